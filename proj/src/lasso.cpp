#include "flowprior/lasso.hpp"

#include <cmath>

#include "flowprior/common.hpp"

namespace flowprior {

namespace {

constexpr double kPi = 3.1415926535897932384626433832795;

// Orthonormal DCT-II analysis matrix: C(k, i) = a_k cos(pi (2i+1) k / 2N).
Matrix dct_analysis_1d(int n) {
    Matrix C(n, n);
    for (int k = 0; k < n; ++k) {
        double ak = std::sqrt((k == 0 ? 1.0 : 2.0) / n);
        for (int i = 0; i < n; ++i)
            C(k, i) = ak * std::cos(kPi * (2.0 * i + 1.0) * k / (2.0 * n));
    }
    return C;
}

double soft_threshold(double v, double kappa) {
    if (v > kappa) return v - kappa;
    if (v < -kappa) return v + kappa;
    return 0.0;
}

}  // namespace

Matrix dct_synthesis_matrix(int h, int w) {
    if (h < 1 || w < 1) throw NumericError("dct_synthesis_matrix: bad grid");
    Matrix ch_t = transpose(dct_analysis_1d(h));
    Matrix cw_t = transpose(dct_analysis_1d(w));
    // x = Ch^T Z Cw with row-major vectorization: Phi = kron(Ch^T, Cw^T).
    int n = h * w;
    Matrix phi(n, n);
    for (int r1 = 0; r1 < h; ++r1)
        for (int c1 = 0; c1 < w; ++c1)
            for (int r2 = 0; r2 < h; ++r2)
                for (int c2 = 0; c2 < w; ++c2)
                    phi(r1 * w + c1, r2 * w + c2) = ch_t(r1, r2) * cw_t(c1, c2);
    return phi;
}

LassoResult lasso_dct(const Matrix& A, const Vector& y, int h, int w, double lambda,
                      int max_cycles, double tol) {
    if (A.cols != h * w) throw NumericError("lasso_dct: operator/grid dimension mismatch");
    if (static_cast<int>(y.size()) != A.rows) throw NumericError("lasso_dct: measurement mismatch");
    if (lambda < 0.0) throw NumericError("lasso_dct: lambda must be >= 0");

    Matrix phi = dct_synthesis_matrix(h, w);
    Matrix B = matmul(A, phi);  // m x n design in coefficient space
    const int n = B.cols;
    Vector col_sq(static_cast<size_t>(n), 0.0);
    for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i < B.rows; ++i) s += B(i, j) * B(i, j);
        col_sq[static_cast<size_t>(j)] = s;
    }

    LassoResult out;
    out.z.assign(static_cast<size_t>(n), 0.0);
    Vector r = y;  // residual y - B z

    auto objective = [&]() {
        double f = 0.0;
        for (double v : r) f += v * v;
        for (double v : out.z) f += lambda * std::fabs(v);
        return f;
    };

    for (int cycle = 0; cycle < max_cycles; ++cycle) {
        double max_update = 0.0;
        for (int j = 0; j < n; ++j) {
            double cs = col_sq[static_cast<size_t>(j)];
            if (cs == 0.0) continue;
            double zj = out.z[static_cast<size_t>(j)];
            double rho = cs * zj;
            for (int i = 0; i < B.rows; ++i) rho += B(i, j) * r[static_cast<size_t>(i)];
            double zj_new = soft_threshold(rho, 0.5 * lambda) / cs;
            double delta = zj_new - zj;
            if (delta != 0.0) {
                for (int i = 0; i < B.rows; ++i) r[static_cast<size_t>(i)] -= B(i, j) * delta;
                out.z[static_cast<size_t>(j)] = zj_new;
            }
            max_update = std::max(max_update, std::fabs(delta));
        }
        out.objective_per_cycle.push_back(objective());
        out.cycles = cycle + 1;
        if (max_update < tol) break;
    }
    out.x = matvec(phi, out.z);
    return out;
}

}  // namespace flowprior
