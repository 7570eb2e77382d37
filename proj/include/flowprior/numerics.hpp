#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "flowprior/rng.hpp"

namespace flowprior {

using Vector = std::vector<double>;

/// Dense row-major matrix of 64-bit reals.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> a;

    Matrix() = default;
    Matrix(int r, int c) : rows(r), cols(c), a(static_cast<size_t>(r) * c, 0.0) {}

    double& operator()(int i, int j) { return a[static_cast<size_t>(i) * cols + j]; }
    double operator()(int i, int j) const { return a[static_cast<size_t>(i) * cols + j]; }

    static Matrix identity(int n);
};

struct SvdTriple {
    Matrix U;      // m x r, orthonormal columns
    Vector sigma;  // r, descending, >= 0
    Matrix V;      // n x r, orthonormal columns
};

// ---- vector helpers ----
double dot(const Vector& x, const Vector& y);
double norm2(const Vector& x);
double norm_inf(const Vector& x);
void axpy(double alpha, const Vector& x, Vector& y);  // y += alpha*x
bool all_finite(const Vector& x);
bool all_finite(const Matrix& m);

// ---- matrix helpers ----
Matrix matmul(const Matrix& A, const Matrix& B);
Matrix transpose(const Matrix& A);
Vector matvec(const Matrix& A, const Vector& x);
Vector tmatvec(const Matrix& A, const Vector& x);  // A^T x
double frobenius_norm(const Matrix& A);

/// Thin SVD by one-sided Jacobi rotation sweeps. Accurate at desk scale
/// (n <= 256); throws NumericError if the sweeps do not converge.
SvdTriple svd(const Matrix& M);

/// Minimum-Euclidean-norm solution of B z = y for full-row-rank B
/// (z = B^T (B B^T)^{-1} y). Throws NumericError naming the offending
/// singular value if the smallest one is <= 1e-10.
Vector pseudo_solve(const Matrix& B, const Vector& y);

/// m x n matrix of i.i.d. N(0, variance) entries, deterministic given rng.
Matrix gaussian_matrix(int m, int n, double variance, RngStream& rng);

/// Central-difference Jacobian of f at x, column j = (f(x+h e_j) - f(x-h e_j)) / 2h.
Matrix finite_diff_jacobian(const std::function<Vector(const Vector&)>& f,
                            const Vector& x, double h = 1e-5);

/// Thin QR of an r x c matrix with r >= c: returns Q (r x c) with
/// orthonormal columns spanning range(M). Assumes full column rank.
Matrix qr_thin(const Matrix& M);

/// QR with a column-degeneracy signal: returns false (Q untouched) when a
/// Householder column norm falls below tol * ||M||_F, instead of throwing.
bool qr_thin_checked(const Matrix& M, Matrix& Q, double tol = 1e-13);

/// Orthogonal projector onto range(M) via QR (P = Q Q^T).
Matrix projector_onto_range(const Matrix& M);

/// Partial-pivot LU: P M = L U with L unit-lower and U upper. perm[i] is the
/// source row of output row i. Throws NumericError on an exactly singular pivot.
void plu(const Matrix& M, std::vector<int>& perm, Matrix& L, Matrix& U);

/// log |det M| for square M, via partial-pivot LU.
double log_abs_det(const Matrix& M);

/// Haar-ish random orthogonal matrix: QR of a Gaussian square matrix with
/// the R diagonal sign fixed positive.
Matrix random_orthogonal(int n, RngStream& rng);

}  // namespace flowprior
