#include "flowprior/io.hpp"

#include <cstring>
#include <fstream>

#include "flowprior/common.hpp"

namespace flowprior {

namespace {
constexpr char kMagic[8] = {'F', 'P', 'V', 'E', 'C', '\0', '\0', '\0'};
}

void write_fpvec(const std::string& path, const Vector& v) {
    std::string buf;
    buf.append(kMagic, 8);
    uint64_t n = v.size();
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((n >> (8 * i)) & 0xFF));
    for (double d : v) {
        uint64_t bits;
        std::memcpy(&bits, &d, 8);
        for (int i = 0; i < 8; ++i) buf.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("write_fpvec: cannot open '" + path + "'");
    f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write_fpvec: write failed for '" + path + "'");
}

Vector read_fpvec(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("read_fpvec: cannot open '" + path + "'");
    std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    if (data.size() < 16) throw IoError("read_fpvec: truncated header in '" + path + "'");
    if (std::memcmp(data.data(), kMagic, 8) != 0)
        throw IoError("read_fpvec: bad magic in '" + path + "'");
    uint64_t n = 0;
    for (int i = 0; i < 8; ++i)
        n |= static_cast<uint64_t>(static_cast<uint8_t>(data[8 + static_cast<size_t>(i)])) << (8 * i);
    if (data.size() != 16 + 8 * n) throw IoError("read_fpvec: truncated body in '" + path + "'");
    Vector v(static_cast<size_t>(n));
    for (uint64_t k = 0; k < n; ++k) {
        uint64_t bits = 0;
        for (int i = 0; i < 8; ++i)
            bits |= static_cast<uint64_t>(
                        static_cast<uint8_t>(data[16 + 8 * static_cast<size_t>(k) + static_cast<size_t>(i)]))
                    << (8 * i);
        std::memcpy(&v[static_cast<size_t>(k)], &bits, 8);
    }
    return v;
}

}  // namespace flowprior
