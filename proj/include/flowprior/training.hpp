#pragma once

#include <functional>
#include <string>
#include <vector>

#include "flowprior/flow.hpp"
#include "flowprior/numerics.hpp"
#include "flowprior/rng.hpp"

namespace flowprior {

struct Dataset {
    std::string name;
    int dim = 0;
    std::vector<Vector> samples;
};

/// Toy 2D datasets: "two-moons", "gaussian-mixture-K" (K >= 1, centers equally
/// spaced on a radius-2 circle), "ring". Deterministic given the stream.
Dataset make_toy_2d(const std::string& kind, int count, double noise_std, RngStream& rng);

struct TrainConfig {
    double learning_rate = 1e-3;
    int warmup_steps = 500;  // linear learning-rate ramp
    int batch_size = 256;
    int steps = 20000;
    uint64_t seed = 0;
    int threads = 1;
    int checkpoint_interval = 0;  // 0 disables the callback
    std::function<void(int, const FlowStack&)> on_checkpoint;
};

struct TrainLogRow {
    int step;
    double nll;  // batch mean, nats per sample
    double grad_norm;
    long clip_events;
};

struct TrainLog {
    std::vector<TrainLogRow> rows;
    double initial_heldout_nll = 0.0;
    double final_heldout_nll = 0.0;
    int diverged_at = -1;  // step at which a non-finite loss appeared, or -1
};

/// Adam on the mean negative log-likelihood over minibatches. The held-out
/// split is the last 10% of the dataset, fixed. On a non-finite loss the
/// parameters are restored to the last good step and diverged_at is set.
/// Per-sample gradients are reduced in sample order, so results are
/// thread-count invariant.
TrainLog train(FlowStack& G, const Dataset& data, const TrainConfig& cfg);

double mean_nll(const FlowStack& G, const std::vector<Vector>& samples, int threads = 1);

struct DensityGrid {
    double lo = 0.0, hi = 0.0;
    int resolution = 0;
    // value(i, j) at midpoint coordinates (lo + (j+.5)h, lo + (i+.5)h)
    Matrix x_logp;  // log p_G over x-space
    Matrix z_logp;  // log p_G(G(z)) over z-space
};

/// Midpoint grids of the model density for plotting and quadrature (n = 2 only).
DensityGrid density_grid(const FlowStack& G, double lo, double hi, int resolution);

void write_train_log_csv(const TrainLog& log, const std::string& path);

}  // namespace flowprior
