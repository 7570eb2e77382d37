#pragma once

#include <cmath>

#include "flowprior/flow.hpp"
#include "flowprior/numerics.hpp"
#include "flowprior/rng.hpp"

namespace flowprior::testing {

/// Perturbs an identity-initialized stack into a generic non-identity flow:
/// actnorm scales/biases move off (1, 0) and the conditioner output layers
/// become nonzero, so couplings actually warp space.
inline void randomize_stack(FlowStack& G, RngStream& rng, double spread = 0.3,
                            double out_std = 0.5) {
    for (Layer& layer : G.layers) {
        if (auto* an = std::get_if<ActNorm>(&layer)) {
            for (double& s : an->scale) s = std::exp(spread * rng.next_normal());
            for (double& b : an->bias) b = spread * rng.next_normal();
        } else if (auto* cp = std::get_if<Coupling>(&layer)) {
            double sd = out_std / std::sqrt(static_cast<double>(cp->net.hidden));
            for (double& v : cp->net.w3.a) v = sd * rng.next_normal();
            for (double& v : cp->net.b3) v = 0.1 * rng.next_normal();
        }
    }
}

inline FlowStack make_random_stack(int n, int steps, uint64_t seed,
                                   MixingKind mixing = MixingKind::permutation,
                                   double spread = 0.3, double out_std = 0.5) {
    RngStream rng(seed);
    FlowStack G = make_flow_stack(n, steps, rng, mixing);
    randomize_stack(G, rng, spread, out_std);
    return G;
}

inline Vector random_vector(int n, RngStream& rng, double scale = 1.0) {
    Vector v(static_cast<size_t>(n));
    for (double& x : v) x = scale * rng.next_normal();
    return v;
}

/// Independent oracle for gradients of a scalar function: central differences.
template <typename F>
Vector fd_gradient(const F& f, const Vector& x, double h = 1e-5) {
    Vector g(x.size(), 0.0);
    Vector xp = x;
    for (size_t j = 0; j < x.size(); ++j) {
        xp[j] = x[j] + h;
        double fp = f(xp);
        xp[j] = x[j] - h;
        double fm = f(xp);
        xp[j] = x[j];
        g[j] = (fp - fm) / (2.0 * h);
    }
    return g;
}

/// Midpoint quadrature of exp(log_prob) over [lo, hi]^2.
inline double density_mass_2d(const FlowStack& G, double lo, double hi, int res) {
    double h = (hi - lo) / res;
    double total = 0.0;
    for (int i = 0; i < res; ++i) {
        double c1 = lo + (i + 0.5) * h;
        for (int j = 0; j < res; ++j) {
            double c0 = lo + (j + 0.5) * h;
            total += std::exp(log_prob(G, Vector{c0, c1}));
        }
    }
    return total * h * h;
}

}  // namespace flowprior::testing
