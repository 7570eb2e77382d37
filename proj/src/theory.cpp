#include "flowprior/theory.hpp"

#include <cmath>
#include <fstream>
#include <optional>

#include "flowprior/common.hpp"

namespace flowprior {

namespace {

void validate_sigma(const Vector& sigma) {
    if (sigma.empty()) throw NumericError("linear generator: empty sigma");
    for (size_t i = 0; i < sigma.size(); ++i) {
        if (!(sigma[i] > 0.0)) throw NumericError("linear generator: sigma must be > 0");
        if (i > 0 && sigma[i] > sigma[i - 1])
            throw NumericError("linear generator: sigma must be descending");
    }
}

// G^T A^T as an n x m matrix.
Matrix gt_at(const Matrix& Gm, const Matrix& A) { return transpose(matmul(A, Gm)); }

std::optional<double> closed_form_via_qr(const Matrix& Gm, const Matrix& B) {
    Matrix Q;
    if (!qr_thin_checked(B, Q)) return std::nullopt;
    // ||G (QQ^T - I)||_F^2 computed as ||(G Q) Q^T - G||_F^2.
    Matrix GQ = matmul(Gm, Q);
    const int n = Gm.rows, m = Q.cols;
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < n; ++j) {
            double s = -Gm(i, j);
            for (int k = 0; k < m; ++k) s += GQ(i, k) * Q(j, k);
            total += s * s;
        }
    }
    return total;
}

void require_full_row_rank(const Matrix& AG) {
    SvdTriple t = svd(AG);
    double smin = t.sigma.back();
    if (AG.rows > AG.cols || smin <= 1e-10)
        throw NumericError("theory: A G is rank deficient, smallest singular value " +
                           std::to_string(smin));
}

}  // namespace

LinearGenerator LinearGenerator::from_sigma(Vector sigma) {
    validate_sigma(sigma);
    LinearGenerator g;
    int n = static_cast<int>(sigma.size());
    g.u = Matrix::identity(n);
    g.v = Matrix::identity(n);
    g.sigma = std::move(sigma);
    return g;
}

LinearGenerator LinearGenerator::random(Vector sigma, RngStream& rng) {
    validate_sigma(sigma);
    LinearGenerator g;
    int n = static_cast<int>(sigma.size());
    g.u = random_orthogonal(n, rng);
    g.v = random_orthogonal(n, rng);
    g.sigma = std::move(sigma);
    return g;
}

Matrix LinearGenerator::matrix() const {
    int n = dim();
    Matrix sv_t(n, n);  // diag(sigma) V^T
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) sv_t(i, j) = sigma[static_cast<size_t>(i)] * v(j, i);
    return matmul(u, sv_t);
}

Vector sigma_profile(const std::string& name, int n) {
    if (n < 1) throw NumericError("sigma_profile: n must be >= 1");
    Vector s(static_cast<size_t>(n), 1.0);
    if (name == "flat") {
        // all ones
    } else if (name == "1/i") {
        for (int i = 0; i < n; ++i) s[static_cast<size_t>(i)] = 1.0 / (i + 1.0);
    } else if (name == "1/i^2") {
        for (int i = 0; i < n; ++i) s[static_cast<size_t>(i)] = 1.0 / ((i + 1.0) * (i + 1.0));
    } else {
        throw NumericError("sigma_profile: unknown profile '" + name + "'");
    }
    return s;
}

std::pair<Vector, Vector> mle_linear(const LinearGenerator& G, const Matrix& A, const Vector& z0) {
    if (A.cols != G.dim() || static_cast<int>(z0.size()) != G.dim())
        throw NumericError("mle_linear: dimension mismatch");
    Matrix Gm = G.matrix();
    Matrix AG = matmul(A, Gm);
    require_full_row_rank(AG);
    Matrix Q = qr_thin(transpose(AG));
    // z_hat = Q Q^T z0
    Vector qt(static_cast<size_t>(Q.cols), 0.0);
    for (int j = 0; j < Q.cols; ++j) {
        double s = 0.0;
        for (int i = 0; i < Q.rows; ++i) s += Q(i, j) * z0[static_cast<size_t>(i)];
        qt[static_cast<size_t>(j)] = s;
    }
    Vector z_hat(static_cast<size_t>(Q.rows), 0.0);
    for (int i = 0; i < Q.rows; ++i) {
        double s = 0.0;
        for (int j = 0; j < Q.cols; ++j) s += Q(i, j) * qt[static_cast<size_t>(j)];
        z_hat[static_cast<size_t>(i)] = s;
    }
    Vector x_hat = matvec(Gm, z_hat);
    return {std::move(z_hat), std::move(x_hat)};
}

double expected_error_closed_form(const LinearGenerator& G, const Matrix& A) {
    if (A.cols != G.dim()) throw NumericError("expected_error_closed_form: dimension mismatch");
    Matrix Gm = G.matrix();
    Matrix AG = matmul(A, Gm);
    require_full_row_rank(AG);
    std::optional<double> val = closed_form_via_qr(Gm, transpose(AG));
    if (!val) throw NumericError("expected_error_closed_form: degenerate projector basis");
    return *val;
}

std::pair<double, double> monte_carlo_error(const LinearGenerator& G, int m, int trials,
                                            RngStream& rng) {
    const int n = G.dim();
    if (m < 1 || m >= n) throw NumericError("monte_carlo_error: need 1 <= m < n");
    if (trials < 2) throw NumericError("monte_carlo_error: need trials >= 2");
    Matrix Gm = G.matrix();
    double sum = 0.0, sum_sq = 0.0;
    int kept = 0, skipped = 0;
    for (int t = 0; t < trials; ++t) {
        RngStream trial_rng = rng.derive(static_cast<uint64_t>(t));
        Matrix A = gaussian_matrix(m, n, 1.0, trial_rng);
        std::optional<double> val = closed_form_via_qr(Gm, gt_at(Gm, A));
        if (!val) {
            ++skipped;
            continue;
        }
        sum += *val;
        sum_sq += *val * *val;
        ++kept;
    }
    if (skipped * 100 > trials)
        throw NumericError("monte_carlo_error: more than 1% of draws were rank deficient");
    if (kept < 2) throw NumericError("monte_carlo_error: too few usable draws");
    double mean = sum / kept;
    double var = (sum_sq - kept * mean * mean) / (kept - 1);
    double stderr_ = std::sqrt(std::max(0.0, var) / kept);
    return {mean, stderr_};
}

std::pair<double, double> theorem1_bounds(const Vector& sigma, int m) {
    validate_sigma(sigma);
    const int n = static_cast<int>(sigma.size());
    if (m < 4 || m >= n)
        throw NumericError("theorem1_bounds: hypothesis requires 4 <= m < n, got m = " +
                           std::to_string(m));
    double lower = 0.0;
    for (int i = m; i < n; ++i) lower += sigma[static_cast<size_t>(i)] * sigma[static_cast<size_t>(i)];
    double tail = 0.0;
    for (int i = m - 2; i < n; ++i) tail += sigma[static_cast<size_t>(i)] * sigma[static_cast<size_t>(i)];
    return {lower, m * tail};
}

double relative_error(const BoundReport& report, const Vector& sigma) {
    double total = 0.0;
    for (double s : sigma) total += s * s;
    if (!(total > 0.0)) throw NumericError("relative_error: zero signal energy");
    return report.mc_mean / total;
}

BoundReport make_bound_report(const LinearGenerator& G, int m, int trials, RngStream& rng) {
    BoundReport r;
    r.n = G.dim();
    r.m = m;
    r.trials = trials;
    auto [lower, upper] = theorem1_bounds(G.sigma, m);
    r.lower = lower;
    r.upper = upper;
    auto [mean, se] = monte_carlo_error(G, m, trials, rng);
    r.mc_mean = mean;
    r.mc_stderr = se;
    r.closed_form_mean = mean;
    return r;
}

FrobeniusCheck lemma_frobenius_check(const Matrix& M, int samples, RngStream& rng) {
    if (samples < 2) throw NumericError("lemma_frobenius_check: need samples >= 2");
    FrobeniusCheck out;
    double fn = frobenius_norm(M);
    out.exact = fn * fn;
    Vector z(static_cast<size_t>(M.cols));
    double sum = 0.0, sum_sq = 0.0;
    for (int t = 0; t < samples; ++t) {
        for (double& v : z) v = rng.next_normal();
        Vector mz = matvec(M, z);
        double val = dot(mz, mz);
        sum += val;
        sum_sq += val * val;
    }
    out.empirical = sum / samples;
    double var = (sum_sq - samples * out.empirical * out.empirical) / (samples - 1);
    double se = std::sqrt(std::max(0.0, var) / samples);
    out.z_score = se > 0.0 ? (out.empirical - out.exact) / se : 0.0;
    return out;
}

double projector_commutativity_check(const Matrix& M, const Matrix& U) {
    if (U.rows != U.cols || U.rows != M.rows)
        throw NumericError("projector_commutativity_check: dimension mismatch");
    Matrix pm = projector_onto_range(M);
    Matrix lhs = matmul(matmul(transpose(U), pm), U);
    Matrix rhs = projector_onto_range(matmul(transpose(U), M));
    double s = 0.0;
    for (size_t i = 0; i < lhs.a.size(); ++i) {
        double d = lhs.a[i] - rhs.a[i];
        s += d * d;
    }
    return std::sqrt(s);
}

std::pair<double, double> eckart_young_check(const LinearGenerator& G, int m, int draws,
                                             RngStream& rng) {
    const int n = G.dim();
    if (m < 1 || m >= n) throw NumericError("eckart_young_check: need 1 <= m < n");
    if (draws < 1) throw NumericError("eckart_young_check: need draws >= 1");
    double truncation = 0.0;
    for (int i = m; i < n; ++i)
        truncation += G.sigma[static_cast<size_t>(i)] * G.sigma[static_cast<size_t>(i)];
    double best = 0.0;
    bool first = true;
    for (int t = 0; t < draws; ++t) {
        RngStream trial_rng = rng.derive(static_cast<uint64_t>(t));
        Matrix A = gaussian_matrix(m, n, 1.0, trial_rng);
        double err = expected_error_closed_form(G, A);
        if (first || err < best) {
            best = err;
            first = false;
        }
    }
    return {truncation, best};
}

void write_bound_reports_csv(const std::vector<BoundReportRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("write_bound_reports_csv: cannot open '" + path + "'");
    f << "n,m,sigma_profile,trials,lower,mc_mean,mc_stderr,upper,relative_error\n";
    for (const BoundReportRow& r : rows)
        f << r.report.n << ',' << r.report.m << ',' << r.sigma_profile << ',' << r.report.trials
          << ',' << fmt_double(r.report.lower) << ',' << fmt_double(r.report.mc_mean) << ','
          << fmt_double(r.report.mc_stderr) << ',' << fmt_double(r.report.upper) << ','
          << fmt_double(r.relative) << '\n';
    if (!f) throw IoError("write_bound_reports_csv: write failed");
}

}  // namespace flowprior
