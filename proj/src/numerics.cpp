#include "flowprior/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "flowprior/common.hpp"

namespace flowprior {

Matrix Matrix::identity(int n) {
    Matrix I(n, n);
    for (int i = 0; i < n; ++i) I(i, i) = 1.0;
    return I;
}

double dot(const Vector& x, const Vector& y) {
    double s = 0.0;
    for (size_t i = 0; i < x.size(); ++i) s += x[i] * y[i];
    return s;
}

double norm2(const Vector& x) { return std::sqrt(dot(x, x)); }

double norm_inf(const Vector& x) {
    double m = 0.0;
    for (double v : x) m = std::max(m, std::fabs(v));
    return m;
}

void axpy(double alpha, const Vector& x, Vector& y) {
    for (size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

bool all_finite(const Vector& x) {
    for (double v : x)
        if (!std::isfinite(v)) return false;
    return true;
}

bool all_finite(const Matrix& m) {
    for (double v : m.a)
        if (!std::isfinite(v)) return false;
    return true;
}

Matrix matmul(const Matrix& A, const Matrix& B) {
    Matrix C(A.rows, B.cols);
    for (int i = 0; i < A.rows; ++i) {
        for (int k = 0; k < A.cols; ++k) {
            double aik = A(i, k);
            if (aik == 0.0) continue;
            const double* brow = &B.a[static_cast<size_t>(k) * B.cols];
            double* crow = &C.a[static_cast<size_t>(i) * C.cols];
            for (int j = 0; j < B.cols; ++j) crow[j] += aik * brow[j];
        }
    }
    return C;
}

Matrix transpose(const Matrix& A) {
    Matrix T(A.cols, A.rows);
    for (int i = 0; i < A.rows; ++i)
        for (int j = 0; j < A.cols; ++j) T(j, i) = A(i, j);
    return T;
}

Vector matvec(const Matrix& A, const Vector& x) {
    Vector y(static_cast<size_t>(A.rows), 0.0);
    for (int i = 0; i < A.rows; ++i) {
        const double* row = &A.a[static_cast<size_t>(i) * A.cols];
        double s = 0.0;
        for (int j = 0; j < A.cols; ++j) s += row[j] * x[j];
        y[i] = s;
    }
    return y;
}

Vector tmatvec(const Matrix& A, const Vector& x) {
    Vector y(static_cast<size_t>(A.cols), 0.0);
    for (int i = 0; i < A.rows; ++i) {
        const double* row = &A.a[static_cast<size_t>(i) * A.cols];
        double xi = x[i];
        for (int j = 0; j < A.cols; ++j) y[j] += row[j] * xi;
    }
    return y;
}

double frobenius_norm(const Matrix& A) {
    double s = 0.0;
    for (double v : A.a) s += v * v;
    return std::sqrt(s);
}

namespace {

// One-sided Jacobi on the columns of A (m >= n). Rotations orthogonalize
// column pairs; V accumulates them so A_in = A_out * V^T with A_out having
// orthogonal columns.
void jacobi_orthogonalize(Matrix& A, Matrix& V) {
    const int m = A.rows, n = A.cols;
    const double tol = 1e-14;
    const int max_sweeps = 100;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        bool rotated = false;
        for (int p = 0; p < n - 1; ++p) {
            for (int q = p + 1; q < n; ++q) {
                double app = 0.0, aqq = 0.0, apq = 0.0;
                for (int k = 0; k < m; ++k) {
                    double x = A(k, p), y = A(k, q);
                    app += x * x;
                    aqq += y * y;
                    apq += x * y;
                }
                if (app == 0.0 || aqq == 0.0) continue;
                if (std::fabs(apq) <= tol * std::sqrt(app * aqq)) continue;
                rotated = true;
                double zeta = (aqq - app) / (2.0 * apq);
                double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                           (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                double c = 1.0 / std::sqrt(1.0 + t * t);
                double s = c * t;
                for (int k = 0; k < m; ++k) {
                    double x = A(k, p), y = A(k, q);
                    A(k, p) = c * x - s * y;
                    A(k, q) = s * x + c * y;
                }
                for (int k = 0; k < n; ++k) {
                    double x = V(k, p), y = V(k, q);
                    V(k, p) = c * x - s * y;
                    V(k, q) = s * x + c * y;
                }
            }
        }
        if (!rotated) return;
    }
    throw NumericError("svd: Jacobi sweeps did not converge within the iteration cap");
}

// Fills U column `col` with a unit vector orthogonal to columns [0, col)
// as well as the previously completed ones. Used for exactly-zero singular values.
void complete_orthonormal_column(Matrix& U, int col) {
    const int m = U.rows;
    for (int trial = 0; trial < m; ++trial) {
        Vector v(static_cast<size_t>(m), 0.0);
        v[static_cast<size_t>(trial)] = 1.0;
        for (int j = 0; j < U.cols; ++j) {
            if (j == col) continue;
            double proj = 0.0;
            for (int k = 0; k < m; ++k) proj += U(k, j) * v[static_cast<size_t>(k)];
            for (int k = 0; k < m; ++k) v[static_cast<size_t>(k)] -= proj * U(k, j);
        }
        double nv = norm2(v);
        if (nv > 1e-3) {
            for (int k = 0; k < m; ++k) U(k, col) = v[static_cast<size_t>(k)] / nv;
            return;
        }
    }
    throw NumericError("svd: failed to complete an orthonormal basis");
}

SvdTriple svd_tall(const Matrix& M) {
    const int m = M.rows, n = M.cols;
    Matrix A = M;
    Matrix V = Matrix::identity(n);
    jacobi_orthogonalize(A, V);

    Vector sigma(static_cast<size_t>(n), 0.0);
    for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int k = 0; k < m; ++k) s += A(k, j) * A(k, j);
        sigma[static_cast<size_t>(j)] = std::sqrt(s);
    }

    std::vector<int> order(static_cast<size_t>(n));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int i, int j) {
        return sigma[static_cast<size_t>(i)] > sigma[static_cast<size_t>(j)];
    });

    SvdTriple out;
    out.U = Matrix(m, n);
    out.V = Matrix(n, n);
    out.sigma.assign(static_cast<size_t>(n), 0.0);
    for (int jj = 0; jj < n; ++jj) {
        int src = order[static_cast<size_t>(jj)];
        double s = sigma[static_cast<size_t>(src)];
        out.sigma[static_cast<size_t>(jj)] = s;
        for (int k = 0; k < n; ++k) out.V(k, jj) = V(k, src);
        if (s > 0.0) {
            for (int k = 0; k < m; ++k) out.U(k, jj) = A(k, src) / s;
        }
    }
    for (int jj = 0; jj < n; ++jj)
        if (out.sigma[static_cast<size_t>(jj)] == 0.0) complete_orthonormal_column(out.U, jj);
    return out;
}

}  // namespace

SvdTriple svd(const Matrix& M) {
    if (M.rows <= 0 || M.cols <= 0) throw NumericError("svd: empty matrix");
    if (!all_finite(M)) throw NumericError("svd: matrix has non-finite entries");
    if (M.rows >= M.cols) return svd_tall(M);
    SvdTriple t = svd_tall(transpose(M));
    return SvdTriple{std::move(t.V), std::move(t.sigma), std::move(t.U)};
}

Vector pseudo_solve(const Matrix& B, const Vector& y) {
    if (static_cast<int>(y.size()) != B.rows)
        throw NumericError("pseudo_solve: dimension mismatch");
    SvdTriple t = svd(B);
    int r = static_cast<int>(t.sigma.size());
    double smin = t.sigma[static_cast<size_t>(r - 1)];
    if (B.rows > B.cols || smin <= 1e-10)
        throw NumericError("pseudo_solve: rank-deficient system, smallest singular value " +
                           std::to_string(smin));
    // z = V diag(1/sigma) U^T y
    Vector uy(static_cast<size_t>(r), 0.0);
    for (int j = 0; j < r; ++j) {
        double s = 0.0;
        for (int i = 0; i < B.rows; ++i) s += t.U(i, j) * y[static_cast<size_t>(i)];
        uy[static_cast<size_t>(j)] = s / t.sigma[static_cast<size_t>(j)];
    }
    Vector z(static_cast<size_t>(B.cols), 0.0);
    for (int i = 0; i < B.cols; ++i) {
        double s = 0.0;
        for (int j = 0; j < r; ++j) s += t.V(i, j) * uy[static_cast<size_t>(j)];
        z[static_cast<size_t>(i)] = s;
    }
    return z;
}

Matrix gaussian_matrix(int m, int n, double variance, RngStream& rng) {
    if (m < 1 || n < 1) throw NumericError("gaussian_matrix: dimensions must be >= 1");
    if (!(variance > 0.0)) throw NumericError("gaussian_matrix: variance must be > 0");
    Matrix A(m, n);
    double sd = std::sqrt(variance);
    for (double& v : A.a) v = sd * rng.next_normal();
    return A;
}

Matrix finite_diff_jacobian(const std::function<Vector(const Vector&)>& f,
                            const Vector& x, double h) {
    if (!(h > 0.0)) throw NumericError("finite_diff_jacobian: step must be > 0");
    const int n = static_cast<int>(x.size());
    Vector xp = x, xm = x;
    Matrix J;
    for (int j = 0; j < n; ++j) {
        xp[static_cast<size_t>(j)] = x[static_cast<size_t>(j)] + h;
        xm[static_cast<size_t>(j)] = x[static_cast<size_t>(j)] - h;
        Vector fp = f(xp);
        Vector fm = f(xm);
        if (!all_finite(fp) || !all_finite(fm))
            throw NumericError("finite_diff_jacobian: non-finite output at coordinate " +
                               std::to_string(j));
        if (J.rows == 0) J = Matrix(static_cast<int>(fp.size()), n);
        for (int i = 0; i < J.rows; ++i)
            J(i, j) = (fp[static_cast<size_t>(i)] - fm[static_cast<size_t>(i)]) / (2.0 * h);
        xp[static_cast<size_t>(j)] = x[static_cast<size_t>(j)];
        xm[static_cast<size_t>(j)] = x[static_cast<size_t>(j)];
    }
    return J;
}

bool qr_thin_checked(const Matrix& M, Matrix& Q, double tol) {
    const int r = M.rows, c = M.cols;
    if (r < c) throw NumericError("qr_thin: need rows >= cols");
    double scale = frobenius_norm(M);
    if (scale == 0.0) return false;
    Matrix A = M;
    // Householder vectors stored per column.
    std::vector<Vector> hh(static_cast<size_t>(c));
    for (int k = 0; k < c; ++k) {
        double nrm = 0.0;
        for (int i = k; i < r; ++i) nrm += A(i, k) * A(i, k);
        nrm = std::sqrt(nrm);
        if (nrm <= tol * scale) return false;  // numerically rank deficient
        double alpha = (A(k, k) >= 0.0 ? -nrm : nrm);
        Vector v(static_cast<size_t>(r - k), 0.0);
        v[0] = A(k, k) - alpha;
        for (int i = k + 1; i < r; ++i) v[static_cast<size_t>(i - k)] = A(i, k);
        double vn = norm2(v);
        if (vn == 0.0) {
            hh[static_cast<size_t>(k)] = Vector();
            A(k, k) = alpha;
            continue;
        }
        for (double& vi : v) vi /= vn;
        for (int j = k; j < c; ++j) {
            double s = 0.0;
            for (int i = k; i < r; ++i) s += v[static_cast<size_t>(i - k)] * A(i, j);
            s *= 2.0;
            for (int i = k; i < r; ++i) A(i, j) -= s * v[static_cast<size_t>(i - k)];
        }
        hh[static_cast<size_t>(k)] = std::move(v);
    }
    // Q = H_0 ... H_{c-1} applied to the first c identity columns.
    Q = Matrix(r, c);
    for (int j = 0; j < c; ++j) Q(j, j) = 1.0;
    for (int k = c - 1; k >= 0; --k) {
        const Vector& v = hh[static_cast<size_t>(k)];
        if (v.empty()) continue;
        for (int j = 0; j < c; ++j) {
            double s = 0.0;
            for (int i = k; i < r; ++i) s += v[static_cast<size_t>(i - k)] * Q(i, j);
            s *= 2.0;
            for (int i = k; i < r; ++i) Q(i, j) -= s * v[static_cast<size_t>(i - k)];
        }
    }
    return true;
}

Matrix qr_thin(const Matrix& M) {
    Matrix Q;
    if (!qr_thin_checked(M, Q))
        throw NumericError("qr_thin: numerically rank-deficient column encountered");
    return Q;
}

Matrix projector_onto_range(const Matrix& M) {
    Matrix Q = qr_thin(M);
    Matrix P(M.rows, M.rows);
    for (int i = 0; i < M.rows; ++i)
        for (int j = 0; j < M.rows; ++j) {
            double s = 0.0;
            for (int k = 0; k < Q.cols; ++k) s += Q(i, k) * Q(j, k);
            P(i, j) = s;
        }
    return P;
}

void plu(const Matrix& M, std::vector<int>& perm, Matrix& L, Matrix& U) {
    if (M.rows != M.cols) throw NumericError("plu: matrix must be square");
    const int n = M.rows;
    U = M;
    L = Matrix::identity(n);
    perm.resize(static_cast<size_t>(n));
    std::iota(perm.begin(), perm.end(), 0);
    for (int k = 0; k < n; ++k) {
        int piv = k;
        double best = std::fabs(U(k, k));
        for (int i = k + 1; i < n; ++i) {
            double v = std::fabs(U(i, k));
            if (v > best) {
                best = v;
                piv = i;
            }
        }
        if (best == 0.0) throw NumericError("plu: singular pivot at column " + std::to_string(k));
        if (piv != k) {
            for (int j = 0; j < n; ++j) std::swap(U(k, j), U(piv, j));
            for (int j = 0; j < k; ++j) std::swap(L(k, j), L(piv, j));
            std::swap(perm[static_cast<size_t>(k)], perm[static_cast<size_t>(piv)]);
        }
        for (int i = k + 1; i < n; ++i) {
            double f = U(i, k) / U(k, k);
            L(i, k) = f;
            for (int j = k; j < n; ++j) U(i, j) -= f * U(k, j);
        }
    }
}

double log_abs_det(const Matrix& M) {
    std::vector<int> perm;
    Matrix L, U;
    plu(M, perm, L, U);
    double s = 0.0;
    for (int i = 0; i < M.rows; ++i) s += std::log(std::fabs(U(i, i)));
    return s;
}

Matrix random_orthogonal(int n, RngStream& rng) {
    Matrix G = gaussian_matrix(n, n, 1.0, rng);
    Matrix Q = qr_thin(G);
    // Fix signs so the factorization is unique: diag(R) > 0, R = Q^T G.
    for (int j = 0; j < n; ++j) {
        double rjj = 0.0;
        for (int i = 0; i < n; ++i) rjj += Q(i, j) * G(i, j);
        if (rjj < 0.0)
            for (int i = 0; i < n; ++i) Q(i, j) = -Q(i, j);
    }
    return Q;
}

}  // namespace flowprior
