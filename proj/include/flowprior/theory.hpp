#pragma once

#include <string>
#include <utility>
#include <vector>

#include "flowprior/numerics.hpp"
#include "flowprior/rng.hpp"

namespace flowprior {

/// Invertible linear generator G = U diag(sigma) V^T with square orthogonal
/// factors and strictly positive, descending singular values.
struct LinearGenerator {
    Matrix u, v;
    Vector sigma;

    static LinearGenerator from_sigma(Vector sigma);  // U = V = I
    static LinearGenerator random(Vector sigma, RngStream& rng);

    int dim() const { return static_cast<int>(sigma.size()); }
    Matrix matrix() const;  // U diag(sigma) V^T
};

/// Singular-value presets: "flat" (all 1), "1/i", "1/i^2".
Vector sigma_profile(const std::string& name, int n);

struct BoundReport {
    int n = 0;
    int m = 0;
    double lower = 0.0;
    double upper = 0.0;
    double mc_mean = 0.0;
    double mc_stderr = 0.0;
    int trials = 0;
    // The Monte Carlo average of per-draw closed-form errors; the inner
    // expectation over z0 is exact, only A is sampled.
    double closed_form_mean = 0.0;
};

/// Closed-form restricted maximum-likelihood recovery: z_hat is the
/// orthogonal projection of z0 onto range(G^T A^T), the minimum-norm latent
/// with A G z = A G z0; x_hat = G z_hat. Requires A G full row rank.
std::pair<Vector, Vector> mle_linear(const LinearGenerator& G, const Matrix& A, const Vector& z0);

/// E_{z0 ~ N(0, I)} ||x_hat - x0||^2 = ||G (P_{G^T A^T} - I)||_F^2, exactly.
double expected_error_closed_form(const LinearGenerator& G, const Matrix& A);

/// Averages expected_error_closed_form over `trials` draws of A with
/// i.i.d. N(0,1) entries; returns (mean, stderr). Numerically degenerate
/// draws are skipped and counted; more than 1% skipped is a failure.
std::pair<double, double> monte_carlo_error(const LinearGenerator& G, int m, int trials,
                                            RngStream& rng);

/// (sum_{i>m} sigma_i^2, m * sum_{i>m-2} sigma_i^2); requires 4 <= m < n.
std::pair<double, double> theorem1_bounds(const Vector& sigma, int m);

double relative_error(const BoundReport& report, const Vector& sigma);

BoundReport make_bound_report(const LinearGenerator& G, int m, int trials, RngStream& rng);

struct FrobeniusCheck {
    double empirical = 0.0;
    double exact = 0.0;
    double z_score = 0.0;
};

/// Empirical mean of ||M z||^2 over isotropic Gaussian z against ||M||_F^2.
FrobeniusCheck lemma_frobenius_check(const Matrix& M, int samples, RngStream& rng);

/// || U^T P_M U - P_{U^T M} ||_F for orthogonal U.
double projector_commutativity_check(const Matrix& M, const Matrix& U);

/// (sum_{i>m} sigma_i^2, min over `draws` random A of the closed-form error);
/// the first is a lower bound for every draw.
std::pair<double, double> eckart_young_check(const LinearGenerator& G, int m, int draws,
                                             RngStream& rng);

struct BoundReportRow {
    std::string sigma_profile;
    BoundReport report;
    double relative;
};

void write_bound_reports_csv(const std::vector<BoundReportRow>& rows, const std::string& path);

}  // namespace flowprior
