#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "flowprior/common.hpp"
#include "flowprior/metrics.hpp"
#include "flowprior/rng.hpp"
#include "test_support.hpp"

using namespace flowprior;
using flowprior::testing::random_vector;

namespace {

// Direct-formula SSIM oracle, written independently of the library loop:
// accumulates raw sums per tile and applies the definition verbatim.
double ssim_direct(const Vector& x, const Vector& y, int h, int w, int win) {
    double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
    int wh = std::min(win, h), ww = std::min(win, w);
    double acc = 0.0;
    int tiles = 0;
    for (int r0 = 0; r0 + wh <= h; r0 += wh)
        for (int c0 = 0; c0 + ww <= w; c0 += ww) {
            double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
            double np = wh * ww;
            for (int r = r0; r < r0 + wh; ++r)
                for (int c = c0; c < c0 + ww; ++c) {
                    double a = x[static_cast<size_t>(r * w + c)];
                    double b = y[static_cast<size_t>(r * w + c)];
                    sx += a;
                    sy += b;
                    sxx += a * a;
                    syy += b * b;
                    sxy += a * b;
                }
            double mx = sx / np, my = sy / np;
            double vx = sxx / np - mx * mx;
            double vy = syy / np - my * my;
            double cov = sxy / np - mx * my;
            acc += ((2 * mx * my + c1) * (2 * cov + c2)) /
                   ((mx * mx + my * my + c1) * (vx + vy + c2));
            ++tiles;
        }
    return acc / tiles;
}

}  // namespace

TEST_CASE("psnr closed forms") {
    Vector ref(100, 0.5);
    Vector x = ref;
    CHECK(psnr(x, ref) == 100.0);  // exact recovery hits the cap
    for (double& v : x) v += 0.1;  // MSE = 0.01
    CHECK(psnr(x, ref) == doctest::Approx(20.0).epsilon(1e-12));
}

TEST_CASE("psnr is symmetric and permutation invariant") {
    RngStream rng(5);
    for (int t = 0; t < 20; ++t) {
        Vector a = random_vector(16, rng);
        Vector b = random_vector(16, rng);
        CHECK(psnr(a, b) == psnr(b, a));
        std::vector<int> order = {5, 3, 1, 0, 2, 4, 7, 6, 9, 8, 11, 10, 13, 12, 15, 14};
        Vector ap(16), bp(16);
        for (int i = 0; i < 16; ++i) {
            ap[static_cast<size_t>(i)] = a[static_cast<size_t>(order[static_cast<size_t>(i)])];
            bp[static_cast<size_t>(i)] = b[static_cast<size_t>(order[static_cast<size_t>(i)])];
        }
        CHECK(psnr(ap, bp) == doctest::Approx(psnr(a, b)).epsilon(1e-14));
    }
}

TEST_CASE("ssim basics") {
    RngStream rng(6);
    Vector img(64);
    for (size_t i = 0; i < img.size(); ++i) img[i] = 0.5 + 0.4 * std::sin(0.7 * static_cast<double>(i));
    CHECK(ssim(img, img, 8, 8) == doctest::Approx(1.0).epsilon(1e-12));

    Vector inverted(64);
    for (size_t i = 0; i < img.size(); ++i) inverted[i] = 1.0 - img[i];
    CHECK(ssim(inverted, img, 8, 8) < 1.0);

    CHECK_THROWS_AS(ssim(img, img, 5, 5), NumericError);
}

TEST_CASE("ssim matches an independent direct-formula evaluation") {
    RngStream rng(7);
    const int h = 16, w = 16;
    Vector board(static_cast<size_t>(h * w));
    for (int r = 0; r < h; ++r)
        for (int c = 0; c < w; ++c)
            board[static_cast<size_t>(r * w + c)] = ((r / 2 + c / 2) % 2 == 0) ? 1.0 : 0.0;
    Vector noisy(board.size());
    for (size_t i = 0; i < board.size(); ++i)
        noisy[i] = 0.5 * board[i] + 0.5 * rng.next_unit();
    CHECK(std::fabs(ssim(noisy, board, h, w) - ssim_direct(noisy, board, h, w, 8)) < 1e-10);
}

TEST_CASE("spearman rank correlation") {
    std::vector<double> xs = {1, 2, 3, 4, 5};
    std::vector<double> inc = {2, 9, 11, 30, 31};
    std::vector<double> dec = {5, 4, 3, 2, 1};
    CHECK(spearman_rho(xs, inc) == doctest::Approx(1.0));
    CHECK(spearman_rho(xs, dec) == doctest::Approx(-1.0));
    std::vector<double> mixed = {1, 3, 2, 5, 4};
    CHECK(spearman_rho(xs, mixed) == doctest::Approx(0.8));
}
