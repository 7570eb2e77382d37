#pragma once

#include "flowprior/numerics.hpp"

namespace flowprior {

/// Orthonormal 2D DCT-II synthesis matrix for an h x w grid (row-major
/// vectorization): x = Phi z maps DCT coefficients to pixels. h = 1 gives
/// the plain 1D transform.
Matrix dct_synthesis_matrix(int h, int w);

struct LassoResult {
    Vector x;  // Phi z
    Vector z;
    std::vector<double> objective_per_cycle;
    int cycles = 0;
};

/// min_z ||A Phi z - y||^2 + lambda ||z||_1 by cyclic coordinate descent with
/// exact soft-threshold updates. Stops when the largest coordinate update in
/// a full cycle drops below tol, or at max_cycles.
LassoResult lasso_dct(const Matrix& A, const Vector& y, int h, int w, double lambda = 0.01,
                      int max_cycles = 1000, double tol = 1e-10);

}  // namespace flowprior
