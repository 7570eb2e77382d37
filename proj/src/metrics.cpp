#include "flowprior/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowprior/common.hpp"

namespace flowprior {

double psnr(const Vector& x, const Vector& ref) {
    if (x.size() != ref.size() || x.empty()) throw NumericError("psnr: length mismatch");
    double mse = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        double d = x[i] - ref[i];
        mse += d * d;
    }
    mse /= static_cast<double>(x.size());
    if (mse == 0.0) return 100.0;
    return std::min(100.0, 10.0 * std::log10(1.0 / mse));
}

double ssim(const Vector& x, const Vector& ref, int height, int width, int window, double k1,
            double k2, double peak) {
    if (height < 1 || width < 1 ||
        static_cast<size_t>(height) * static_cast<size_t>(width) != x.size() ||
        x.size() != ref.size())
        throw NumericError("ssim: inputs not reshapeable to the declared grid");
    int wh = std::min(window, height);
    int ww = std::min(window, width);
    double c1 = (k1 * peak) * (k1 * peak);
    double c2 = (k2 * peak) * (k2 * peak);
    double total = 0.0;
    int count = 0;
    for (int r0 = 0; r0 + wh <= height; r0 += wh) {
        for (int c0 = 0; c0 + ww <= width; c0 += ww) {
            double mx = 0.0, my = 0.0;
            int np = wh * ww;
            for (int r = 0; r < wh; ++r)
                for (int c = 0; c < ww; ++c) {
                    size_t idx = static_cast<size_t>(r0 + r) * width + (c0 + c);
                    mx += x[idx];
                    my += ref[idx];
                }
            mx /= np;
            my /= np;
            double vx = 0.0, vy = 0.0, cxy = 0.0;
            for (int r = 0; r < wh; ++r)
                for (int c = 0; c < ww; ++c) {
                    size_t idx = static_cast<size_t>(r0 + r) * width + (c0 + c);
                    double dx = x[idx] - mx, dy = ref[idx] - my;
                    vx += dx * dx;
                    vy += dy * dy;
                    cxy += dx * dy;
                }
            vx /= np;
            vy /= np;
            cxy /= np;
            double value = ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) /
                           ((mx * mx + my * my + c1) * (vx + vy + c2));
            total += value;
            ++count;
        }
    }
    return total / count;
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
    size_t n = v.size();
    std::vector<size_t> order(n);
    std::iota(order.begin(), order.end(), size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> ranks(n, 0.0);
    size_t i = 0;
    while (i < n) {
        size_t j = i;
        while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
        double r = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

}  // namespace

double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw NumericError("spearman_rho: need >= 2 pairs");
    std::vector<double> rx = average_ranks(xs);
    std::vector<double> ry = average_ranks(ys);
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < rx.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= static_cast<double>(rx.size());
    my /= static_cast<double>(ry.size());
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (size_t i = 0; i < rx.size(); ++i) {
        double dx = rx[i] - mx, dy = ry[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (sxx == 0.0 || syy == 0.0) return 0.0;
    return sxy / std::sqrt(sxx * syy);
}

}  // namespace flowprior
