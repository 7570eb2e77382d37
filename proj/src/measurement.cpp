#include "flowprior/measurement.hpp"

#include <cmath>

#include "flowprior/common.hpp"

namespace flowprior {

MeasurementOperator MeasurementOperator::identity(int n, double noise_level) {
    if (n < 1) throw NumericError("measurement: dimension must be >= 1");
    MeasurementOperator op;
    op.kind = OperatorKind::identity;
    op.n = n;
    op.noise_level = noise_level;
    return op;
}

MeasurementOperator MeasurementOperator::gaussian(int m, int n, RngStream& rng,
                                                  double noise_level) {
    if (m < 1 || n < 1) throw NumericError("measurement: dimensions must be >= 1");
    MeasurementOperator op;
    op.kind = OperatorKind::gaussian;
    op.n = n;
    op.dense = gaussian_matrix(m, n, 1.0 / static_cast<double>(m), rng);
    op.noise_level = noise_level;
    return op;
}

MeasurementOperator MeasurementOperator::masked(std::vector<uint8_t> mask, double noise_level) {
    if (mask.empty()) throw NumericError("measurement: empty mask");
    int kept = 0;
    for (uint8_t v : mask) {
        if (v != 0 && v != 1) throw NumericError("measurement: mask entries must be 0 or 1");
        kept += v;
    }
    if (kept == 0) throw NumericError("measurement: mask keeps no coordinates");
    MeasurementOperator op;
    op.kind = OperatorKind::mask;
    op.n = static_cast<int>(mask.size());
    op.mask = std::move(mask);
    op.noise_level = noise_level;
    return op;
}

int MeasurementOperator::out_dim() const {
    return kind == OperatorKind::gaussian ? dense.rows : n;
}

int MeasurementOperator::effective_m() const {
    switch (kind) {
        case OperatorKind::identity: return n;
        case OperatorKind::gaussian: return dense.rows;
        case OperatorKind::mask: {
            int kept = 0;
            for (uint8_t v : mask) kept += v;
            return kept;
        }
    }
    return n;
}

Vector MeasurementOperator::apply(const Vector& x) const {
    switch (kind) {
        case OperatorKind::identity: return x;
        case OperatorKind::gaussian: return matvec(dense, x);
        case OperatorKind::mask: {
            Vector y(x.size(), 0.0);
            for (size_t i = 0; i < x.size(); ++i)
                if (mask[i]) y[i] = x[i];
            return y;
        }
    }
    return x;
}

Vector MeasurementOperator::apply_transpose(const Vector& v) const {
    switch (kind) {
        case OperatorKind::identity: return v;
        case OperatorKind::gaussian: return tmatvec(dense, v);
        case OperatorKind::mask: {
            Vector y(v.size(), 0.0);
            for (size_t i = 0; i < v.size(); ++i)
                if (mask[i]) y[i] = v[i];
            return y;
        }
    }
    return v;
}

Vector make_measurements(const Vector& x0, const MeasurementOperator& op, RngStream& rng) {
    if (static_cast<int>(x0.size()) != op.n)
        throw NumericError("make_measurements: signal dimension mismatch");
    Vector y = op.apply(x0);
    if (op.noise_level > 0.0) {
        double sd = op.noise_level / std::sqrt(static_cast<double>(op.effective_m()));
        if (op.kind == OperatorKind::mask) {
            for (size_t i = 0; i < y.size(); ++i)
                if (op.mask[i]) y[i] += sd * rng.next_normal();
        } else {
            for (double& v : y) v += sd * rng.next_normal();
        }
    }
    return y;
}

}  // namespace flowprior
