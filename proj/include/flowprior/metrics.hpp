#pragma once

#include "flowprior/numerics.hpp"

namespace flowprior {

/// Peak signal-to-noise ratio in dB for unit dynamic range:
/// 10 log10(1 / MSE), capped at 100 dB (the value reported for MSE = 0).
double psnr(const Vector& x, const Vector& ref);

/// Mean local SSIM over non-overlapping window x window tiles of the
/// height x width grid (row-major), uniform weighting, population moments.
/// Windows larger than the image shrink to fit; partial edge tiles are dropped.
double ssim(const Vector& x, const Vector& ref, int height, int width, int window = 8,
            double k1 = 0.01, double k2 = 0.03, double peak = 1.0);

/// Spearman rank correlation with average ranks for ties.
double spearman_rho(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace flowprior
