#pragma once

#include <cstdint>
#include <vector>

#include "flowprior/numerics.hpp"
#include "flowprior/rng.hpp"

namespace flowprior {

enum class OperatorKind { identity, gaussian, mask };

/// Linear measurement map A plus its noise model. Gaussian operators are
/// realized dense with entry variance exactly 1/m; mask operators act
/// elementwise (masked output coordinates are identically zero).
/// noise_level is the target sqrt(E||eta||^2) of make_measurements.
struct MeasurementOperator {
    OperatorKind kind = OperatorKind::identity;
    int n = 0;                  // input dimension
    Matrix dense;               // gaussian kind only, m x n
    std::vector<uint8_t> mask;  // mask kind only, length n, entries 0/1
    double noise_level = 0.0;

    static MeasurementOperator identity(int n, double noise_level = 0.0);
    static MeasurementOperator gaussian(int m, int n, RngStream& rng, double noise_level = 0.0);
    static MeasurementOperator masked(std::vector<uint8_t> mask, double noise_level = 0.0);

    int out_dim() const;
    /// Number of informative output coordinates: rows for gaussian, n for
    /// identity, kept entries for mask. Sets the per-coordinate noise variance.
    int effective_m() const;

    Vector apply(const Vector& x) const;
    Vector apply_transpose(const Vector& v) const;
};

/// y = A x0 + eta with eta_i i.i.d. N(0, noise_level^2 / effective_m), so
/// sqrt(E||eta||^2) = noise_level exactly. Mask operators receive noise only
/// on kept coordinates; masked entries of y stay exactly zero.
Vector make_measurements(const Vector& x0, const MeasurementOperator& op, RngStream& rng);

}  // namespace flowprior
