#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "flowprior/measurement.hpp"
#include "flowprior/numerics.hpp"
#include "flowprior/rng.hpp"

namespace flowprior {

/// Conditioner network for coupling layers: two tanh hidden layers.
/// identity_init zeroes the output layer so a fresh coupling layer is the
/// identity map exactly.
struct Mlp {
    int in = 0, hidden = 0, out = 0;
    Matrix w1, w2, w3;
    Vector b1, b2, b3;

    static Mlp identity_init(int in, int hidden, int out, RngStream& rng);

    struct Cache {
        Vector x, h1, h2, o;
    };

    Vector eval(const Vector& x, Cache* cache = nullptr) const;
    /// Input cotangent of eval; when pg != nullptr, parameter gradients are
    /// accumulated into it in the order [w1, b1, w2, b2, w3, b3].
    Vector vjp(const Cache& cache, const Vector& go, double* pg) const;
    Vector jvp(const Cache& cache, const Vector& dx) const;
    int trainable_count() const { return hidden * in + hidden + hidden * hidden + hidden + out * hidden + out; }
};

/// Per-coordinate affine layer. The working scale is floored in magnitude
/// at epsilon (sign-preserving), in forward, inverse and the log-determinant
/// alike, so an exact scale is untouched and inversion can never divide by zero.
struct ActNorm {
    Vector scale;
    Vector bias;
    double epsilon = 5e-4;
};

/// Affine coupling: one half of the coordinates is passed through and
/// conditions an elementwise affine map of the other half. Raw scales are
/// clamped to [-squash_bound, squash_bound] before exponentiation.
struct Coupling {
    bool swap_halves = false;  // false: [0, n/2) conditions [n/2, n)
    double squash_bound = 5.0;
    Mlp net;
};

/// Coordinate reshuffle: either a fixed permutation (log-det 0) or a learned
/// invertible matrix in PLU form (log-det = sum log|U_ii|).
struct Mixing {
    bool learned = false;
    std::vector<int> perm;  // forward gather: y[i] = (..)[perm[i]]
    Matrix lower, upper;    // learned variant only; lower is unit-triangular
};

using Layer = std::variant<ActNorm, Coupling, Mixing>;

struct FlowStack {
    int dim = 0;
    double activation_clip = 40.0;
    std::vector<Layer> layers;
};

enum class MixingKind { permutation, lu };

/// Glow-style stack of `steps` x (actnorm, mixing, coupling) units, all
/// identity-initialized; coupling direction alternates so every coordinate
/// is transformed.
FlowStack make_flow_stack(int n, int steps, RngStream& rng,
                          MixingKind mixing = MixingKind::permutation,
                          double activation_clip = 40.0, int hidden_multiplier = 4);

struct FlowResult {
    Vector value;
    long clip_events = 0;
};

struct FlowLogDetResult {
    Vector value;
    double log_det = 0.0;
    long clip_events = 0;
};

FlowResult forward(const FlowStack& G, const Vector& z);
FlowResult inverse(const FlowStack& G, const Vector& x);
FlowLogDetResult forward_with_logdet(const FlowStack& G, const Vector& z);
/// Returns z = G^{-1}(x) together with the forward-map log-determinant at z.
FlowLogDetResult inverse_with_logdet(const FlowStack& G, const Vector& x);

double log_det(const FlowStack& G, const Vector& z);
/// log p_G(x) under a standard-normal latent:
/// -n/2 log(2pi) - ||z||^2/2 - log_det(G, z) with z = G^{-1}(x).
double log_prob(const FlowStack& G, const Vector& x);

/// Exact gradient of ||A G(z) - y||^2 + gamma ||z||^2 with respect to z,
/// by reverse accumulation through all layers.
Vector grad_data_fit(const FlowStack& G, const Vector& z, const MeasurementOperator& op,
                     const Vector& y, double gamma, long* clip_events = nullptr);

/// Directional derivative dG/dz(z) . dz (forward-mode tangent).
Vector forward_jvp(const FlowStack& G, const Vector& z, const Vector& dz);

/// Descending singular values of the Jacobian of G at z; the dense Jacobian
/// is assembled column-by-column from directional derivatives (n <= 512).
Vector jacobian_singular_values(const FlowStack& G, const Vector& z);

// ---- training support ----

/// Number of trainable parameters (actnorm scale/bias, conditioner weights,
/// learned-mixing L/U entries; fixed permutations and epsilon are not trained).
int trainable_count(const FlowStack& G);
Vector get_trainable(const FlowStack& G);
void set_trainable(FlowStack& G, const Vector& params);

/// Negative log-likelihood of one sample plus accumulation of its parameter
/// gradient into grad (length trainable_count(G)). Thread-safe for a shared
/// const stack and distinct grad buffers.
double nll_and_grad(const FlowStack& G, const Vector& x, double* grad,
                    long* clip_events = nullptr);

// ---- checkpoint format (bit-exact, see README) ----
void save_flow(const FlowStack& G, const std::string& path);
FlowStack load_flow(const std::string& path);

}  // namespace flowprior
