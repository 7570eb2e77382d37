#pragma once

#include <string>

#include "flowprior/numerics.hpp"

namespace flowprior {

/// Flat signal file:
///   bytes 0-7   magic "FPVEC\0\0\0"
///   bytes 8-15  length n, little-endian unsigned 64-bit
///   then n little-endian 64-bit reals
void write_fpvec(const std::string& path, const Vector& v);
Vector read_fpvec(const std::string& path);

}  // namespace flowprior
