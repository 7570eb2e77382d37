#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flowprior/common.hpp"
#include "flowprior/numerics.hpp"
#include "flowprior/rng.hpp"
#include "test_support.hpp"

using namespace flowprior;
using flowprior::testing::random_vector;

namespace {

Matrix reconstruct(const SvdTriple& t) {
    int m = t.U.rows, n = t.V.rows, r = static_cast<int>(t.sigma.size());
    Matrix M(m, n);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int k = 0; k < r; ++k) s += t.U(i, k) * t.sigma[static_cast<size_t>(k)] * t.V(j, k);
            M(i, j) = s;
        }
    return M;
}

double ortho_residual(const Matrix& Q) {
    double worst = 0.0;
    for (int i = 0; i < Q.cols; ++i)
        for (int j = 0; j < Q.cols; ++j) {
            double s = 0.0;
            for (int k = 0; k < Q.rows; ++k) s += Q(k, i) * Q(k, j);
            worst = std::max(worst, std::fabs(s - (i == j ? 1.0 : 0.0)));
        }
    return worst;
}

}  // namespace

TEST_CASE("rng streams are deterministic and platform-stable") {
    RngStream a(42, 7), b(42, 7);
    for (int i = 0; i < 1000; ++i) CHECK(a.next_u64() == b.next_u64());
    RngStream c(42, 8);
    int same = 0;
    RngStream a2(42, 7);
    for (int i = 0; i < 1000; ++i)
        if (a2.next_u64() == c.next_u64()) ++same;
    CHECK(same == 0);

    // derived substreams replay bitwise
    RngStream parent(9);
    RngStream d1 = parent.derive(3), d2 = parent.derive(3);
    for (int i = 0; i < 100; ++i) CHECK(d1.next_normal() == d2.next_normal());
}

TEST_CASE("rng normal moments") {
    RngStream rng(1234);
    double sum = 0.0, sum_sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        double v = rng.next_normal();
        sum += v;
        sum_sq += v * v;
    }
    CHECK(std::fabs(sum / n) < 0.01);
    CHECK(std::fabs(sum_sq / n - 1.0) < 0.01);
}

TEST_CASE("svd of diagonal and identity matrices") {
    Matrix d(2, 2);
    d(0, 0) = 3.0;
    d(1, 1) = 1.0;
    SvdTriple t = svd(d);
    CHECK(t.sigma[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(t.sigma[1] == doctest::Approx(1.0).epsilon(1e-12));

    SvdTriple ti = svd(Matrix::identity(4));
    for (double s : ti.sigma) CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("svd reconstruction and orthogonality on random matrices") {
    RngStream rng(7);
    for (auto [m, n] : {std::pair{6, 4}, std::pair{4, 6}, std::pair{8, 8}, std::pair{33, 17},
                        std::pair{64, 64}}) {
        Matrix M = gaussian_matrix(m, n, 1.0, rng);
        SvdTriple t = svd(M);
        Matrix R = reconstruct(t);
        double resid = 0.0;
        for (size_t i = 0; i < M.a.size(); ++i) resid += (R.a[i] - M.a[i]) * (R.a[i] - M.a[i]);
        resid = std::sqrt(resid);
        CHECK(resid <= 1e-8 * std::max(1.0, frobenius_norm(M)));
        CHECK(ortho_residual(t.U) < 1e-10);
        CHECK(ortho_residual(t.V) < 1e-10);
        for (size_t i = 1; i < t.sigma.size(); ++i) CHECK(t.sigma[i] <= t.sigma[i - 1]);
    }
}

TEST_CASE("svd rejects non-finite input") {
    Matrix M(2, 2);
    M(0, 0) = std::nan("");
    CHECK_THROWS_AS(svd(M), NumericError);
}

TEST_CASE("pseudo_solve closed forms") {
    Matrix B(1, 2);
    B(0, 0) = 1.0;
    B(0, 1) = 1.0;
    Vector z = pseudo_solve(B, Vector{2.0});
    CHECK(z[0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(z[1] == doctest::Approx(1.0).epsilon(1e-12));

    Vector z2 = pseudo_solve(Matrix::identity(3), Vector{1.0, 2.0, 3.0});
    CHECK(z2[0] == doctest::Approx(1.0));
    CHECK(z2[1] == doctest::Approx(2.0));
    CHECK(z2[2] == doctest::Approx(3.0));
}

TEST_CASE("pseudo_solve returns the minimum-norm row-space solution") {
    RngStream rng(11);
    Matrix B = gaussian_matrix(3, 7, 1.0, rng);
    Vector y = random_vector(3, rng);
    Vector z = pseudo_solve(B, y);

    Vector r = matvec(B, z);
    for (size_t i = 0; i < r.size(); ++i) r[i] -= y[i];
    CHECK(norm2(r) < 1e-9);

    // z must be orthogonal to null(B), i.e. lie in range(B^T).
    Matrix Q = qr_thin(transpose(B));
    Vector proj(z.size(), 0.0);
    for (int j = 0; j < Q.cols; ++j) {
        double c = 0.0;
        for (int i = 0; i < Q.rows; ++i) c += Q(i, j) * z[static_cast<size_t>(i)];
        for (int i = 0; i < Q.rows; ++i) proj[static_cast<size_t>(i)] += c * Q(i, j);
    }
    for (size_t i = 0; i < z.size(); ++i) CHECK(std::fabs(z[i] - proj[i]) < 1e-9);
}

TEST_CASE("pseudo_solve names the offending singular value on rank deficiency") {
    Matrix B(2, 2);
    B(0, 0) = 1.0;
    B(0, 1) = 1.0;
    B(1, 0) = 2.0;
    B(1, 1) = 2.0;
    CHECK_THROWS_WITH_AS(pseudo_solve(B, Vector{1.0, 2.0}),
                         doctest::Contains("singular value"), NumericError);
}

TEST_CASE("gaussian_matrix preconditions and determinism") {
    RngStream rng(5);
    CHECK_THROWS_AS(gaussian_matrix(1, 1, 0.0, rng), NumericError);
    RngStream r1(99), r2(99);
    Matrix a = gaussian_matrix(5, 5, 0.3, r1);
    Matrix b = gaussian_matrix(5, 5, 0.3, r2);
    CHECK(a.a == b.a);
}

TEST_CASE("gaussian_matrix row inner products are isotropic") {
    // variance 1/m makes E||Ax||^2 = ||x||^2
    RngStream rng(21);
    const int m = 20, n = 10;
    Vector x = random_vector(n, rng);
    double xx = dot(x, x);
    double mean = 0.0;
    const int draws = 2000;
    for (int t = 0; t < draws; ++t) {
        Matrix A = gaussian_matrix(m, n, 1.0 / m, rng);
        Vector ax = matvec(A, x);
        mean += dot(ax, ax);
    }
    mean /= draws;
    CHECK(std::fabs(mean - xx) < 0.05 * xx);
}

TEST_CASE("gaussian_matrix sample variance tracks the request") {
    RngStream rng(77);
    Matrix A = gaussian_matrix(400, 300, 0.25, rng);  // 120k entries
    double s = 0.0, ss = 0.0;
    for (double v : A.a) {
        s += v;
        ss += v * v;
    }
    double nEntries = static_cast<double>(A.a.size());
    double var = ss / nEntries - (s / nEntries) * (s / nEntries);
    CHECK(std::fabs(var - 0.25) < 0.02 * 0.25);
}

TEST_CASE("finite_diff_jacobian closed forms") {
    RngStream rng(3);
    Matrix M = gaussian_matrix(3, 3, 1.0, rng);
    auto linear = [&](const Vector& v) { return matvec(M, v); };
    Matrix J = finite_diff_jacobian(linear, random_vector(3, rng), 1e-5);
    for (size_t i = 0; i < M.a.size(); ++i) CHECK(std::fabs(J.a[i] - M.a[i]) < 1e-8);

    auto square = [](const Vector& v) {
        Vector out(v.size());
        for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] * v[i];
        return out;
    };
    Matrix Jsq = finite_diff_jacobian(square, Vector{1.0, 2.0}, 1e-5);
    CHECK(Jsq(0, 0) == doctest::Approx(2.0).epsilon(1e-6));
    CHECK(Jsq(1, 1) == doctest::Approx(4.0).epsilon(1e-6));
    CHECK(std::fabs(Jsq(0, 1)) < 1e-9);

    auto bad = [](const Vector& v) { return Vector{std::log(v[0])}; };
    CHECK_THROWS_WITH_AS(finite_diff_jacobian(bad, Vector{1e-7}, 1e-5),
                         doctest::Contains("coordinate"), NumericError);
}

TEST_CASE("projectors from qr are idempotent and symmetric") {
    RngStream rng(13);
    for (int trial = 0; trial < 5; ++trial) {
        Matrix M = gaussian_matrix(9, 4, 1.0, rng);
        Matrix P = projector_onto_range(M);
        Matrix PP = matmul(P, P);
        for (size_t i = 0; i < P.a.size(); ++i) CHECK(std::fabs(PP.a[i] - P.a[i]) < 1e-10);
        Matrix Pt = transpose(P);
        for (size_t i = 0; i < P.a.size(); ++i) CHECK(std::fabs(Pt.a[i] - P.a[i]) < 1e-10);
    }
}

TEST_CASE("plu factorization and log|det|") {
    RngStream rng(17);
    Matrix M = gaussian_matrix(6, 6, 1.0, rng);
    std::vector<int> perm;
    Matrix L, U;
    plu(M, perm, L, U);
    // P M = L U
    Matrix LU = matmul(L, U);
    for (int i = 0; i < 6; ++i)
        for (int j = 0; j < 6; ++j)
            CHECK(std::fabs(LU(i, j) - M(perm[static_cast<size_t>(i)], j)) < 1e-12);

    // |det| agrees with the singular-value product
    SvdTriple t = svd(M);
    double ld = 0.0;
    for (double s : t.sigma) ld += std::log(s);
    CHECK(log_abs_det(M) == doctest::Approx(ld).epsilon(1e-10));
}

TEST_CASE("random_orthogonal produces orthogonal matrices") {
    RngStream rng(23);
    Matrix Q = random_orthogonal(8, rng);
    CHECK(ortho_residual(Q) < 1e-12);
}
