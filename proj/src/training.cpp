#include "flowprior/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "flowprior/common.hpp"

namespace flowprior {

namespace {

constexpr double kPi = 3.1415926535897932384626433832795;

Dataset make_moons(int count, double noise_std, RngStream& rng) {
    Dataset d;
    d.name = "two-moons";
    d.dim = 2;
    d.samples.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        double t = kPi * rng.next_unit();
        double x, y;
        if (i % 2 == 0) {
            x = std::cos(t);
            y = std::sin(t);
        } else {
            x = 1.0 - std::cos(t);
            y = 0.5 - std::sin(t);
        }
        d.samples.push_back({x + noise_std * rng.next_normal(), y + noise_std * rng.next_normal()});
    }
    return d;
}

Dataset make_mixture(int components, int count, double noise_std, RngStream& rng) {
    Dataset d;
    d.name = "gaussian-mixture-" + std::to_string(components);
    d.dim = 2;
    d.samples.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        int j = rng.next_index(components);
        double a = 2.0 * kPi * j / components;
        double cx = 2.0 * std::cos(a);
        double cy = 2.0 * std::sin(a);
        d.samples.push_back(
            {cx + noise_std * rng.next_normal(), cy + noise_std * rng.next_normal()});
    }
    return d;
}

Dataset make_ring(int count, double noise_std, RngStream& rng) {
    Dataset d;
    d.name = "ring";
    d.dim = 2;
    d.samples.reserve(static_cast<size_t>(count));
    for (int i = 0; i < count; ++i) {
        double a = 2.0 * kPi * rng.next_unit();
        double r = 2.0 + noise_std * rng.next_normal();
        d.samples.push_back({r * std::cos(a), r * std::sin(a)});
    }
    return d;
}

}  // namespace

Dataset make_toy_2d(const std::string& kind, int count, double noise_std, RngStream& rng) {
    if (count < 2) throw NumericError("make_toy_2d: need count >= 2");
    if (kind == "two-moons") return make_moons(count, noise_std, rng);
    if (kind == "ring") return make_ring(count, noise_std, rng);
    const std::string prefix = "gaussian-mixture-";
    if (kind.rfind(prefix, 0) == 0) {
        int k = 0;
        try {
            k = std::stoi(kind.substr(prefix.size()));
        } catch (...) {
            throw NumericError("make_toy_2d: bad mixture component count in '" + kind + "'");
        }
        if (k < 1) throw NumericError("make_toy_2d: mixture needs >= 1 component");
        return make_mixture(k, count, noise_std, rng);
    }
    throw NumericError("make_toy_2d: unknown dataset kind '" + kind + "'");
}

double mean_nll(const FlowStack& G, const std::vector<Vector>& samples, int threads) {
    if (samples.empty()) throw NumericError("mean_nll: no samples");
    std::vector<double> vals(samples.size(), 0.0);
    parallel_for(static_cast<int>(samples.size()), threads, [&](int i) {
        vals[static_cast<size_t>(i)] = nll_and_grad(G, samples[static_cast<size_t>(i)], nullptr);
    });
    double s = 0.0;
    for (double v : vals) s += v;  // fixed-order reduction
    return s / static_cast<double>(samples.size());
}

TrainLog train(FlowStack& G, const Dataset& data, const TrainConfig& cfg) {
    if (data.dim != G.dim) throw NumericError("train: dataset/model dimension mismatch");
    if (data.samples.empty()) throw NumericError("train: empty dataset");
    if (!(cfg.learning_rate > 0.0) || cfg.batch_size < 1 || cfg.steps < 0 || cfg.warmup_steps < 0)
        throw NumericError("train: invalid configuration");
    if (cfg.steps > 0 && cfg.warmup_steps > cfg.steps)
        throw NumericError("train: warmup_steps must not exceed steps");

    const int total = static_cast<int>(data.samples.size());
    const int held = total / 10;
    const int train_count = std::max(1, total - held);
    std::vector<Vector> heldout(data.samples.end() - (held > 0 ? held : total), data.samples.end());
    if (held == 0) heldout = data.samples;

    TrainLog log;
    log.initial_heldout_nll = mean_nll(G, heldout, cfg.threads);
    log.final_heldout_nll = log.initial_heldout_nll;
    if (cfg.steps == 0) return log;

    const int nparams = trainable_count(G);
    Vector params = get_trainable(G);
    Vector m(static_cast<size_t>(nparams), 0.0);
    Vector v(static_cast<size_t>(nparams), 0.0);
    const double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

    RngStream batch_rng = RngStream(cfg.seed).derive(11);
    Vector grad(static_cast<size_t>(nparams), 0.0);
    // Per-sample gradient slots, reduced in sample order (thread-count invariant).
    const int block = std::min(32, cfg.batch_size);
    std::vector<Vector> slot_grad(static_cast<size_t>(block),
                                  Vector(static_cast<size_t>(nparams), 0.0));
    std::vector<double> slot_nll(static_cast<size_t>(block), 0.0);
    std::vector<long> slot_clips(static_cast<size_t>(block), 0);
    std::vector<int> batch_idx(static_cast<size_t>(cfg.batch_size), 0);

    Vector last_good = params;
    log.rows.reserve(static_cast<size_t>(cfg.steps));
    for (int step = 1; step <= cfg.steps; ++step) {
        for (int b = 0; b < cfg.batch_size; ++b)
            batch_idx[static_cast<size_t>(b)] = batch_rng.next_index(train_count);

        std::fill(grad.begin(), grad.end(), 0.0);
        double nll_sum = 0.0;
        long clips = 0;
        bool finite = true;
        for (int start = 0; start < cfg.batch_size && finite; start += block) {
            int len = std::min(block, cfg.batch_size - start);
            parallel_for(len, cfg.threads, [&](int b) {
                Vector& gslot = slot_grad[static_cast<size_t>(b)];
                std::fill(gslot.begin(), gslot.end(), 0.0);
                slot_clips[static_cast<size_t>(b)] = 0;
                const Vector& x = data.samples[static_cast<size_t>(batch_idx[static_cast<size_t>(start + b)])];
                slot_nll[static_cast<size_t>(b)] =
                    nll_and_grad(G, x, gslot.data(), &slot_clips[static_cast<size_t>(b)]);
            });
            for (int b = 0; b < len; ++b) {
                nll_sum += slot_nll[static_cast<size_t>(b)];
                clips += slot_clips[static_cast<size_t>(b)];
                axpy(1.0, slot_grad[static_cast<size_t>(b)], grad);
            }
            if (!std::isfinite(nll_sum) || !all_finite(grad)) finite = false;
        }
        double nll = nll_sum / cfg.batch_size;
        if (!finite || !std::isfinite(nll)) {
            set_trainable(G, last_good);  // last-good checkpoint
            log.diverged_at = step;
            break;
        }
        last_good = params;  // loss was finite at the current parameters
        for (double& gv : grad) gv /= cfg.batch_size;
        double gnorm = norm2(grad);

        double lr = cfg.learning_rate;
        if (cfg.warmup_steps > 0 && step < cfg.warmup_steps)
            lr *= static_cast<double>(step) / cfg.warmup_steps;
        double bc1 = 1.0 - std::pow(beta1, step);
        double bc2 = 1.0 - std::pow(beta2, step);
        for (int i = 0; i < nparams; ++i) {
            size_t si = static_cast<size_t>(i);
            m[si] = beta1 * m[si] + (1.0 - beta1) * grad[si];
            v[si] = beta2 * v[si] + (1.0 - beta2) * grad[si] * grad[si];
            params[si] -= lr * (m[si] / bc1) / (std::sqrt(v[si] / bc2) + adam_eps);
        }
        set_trainable(G, params);
        log.rows.push_back(TrainLogRow{step, nll, gnorm, clips});

        if (cfg.checkpoint_interval > 0 && cfg.on_checkpoint &&
            step % cfg.checkpoint_interval == 0)
            cfg.on_checkpoint(step, G);
    }
    log.final_heldout_nll = mean_nll(G, heldout, cfg.threads);
    return log;
}

DensityGrid density_grid(const FlowStack& G, double lo, double hi, int resolution) {
    if (G.dim != 2) throw NumericError("density_grid: only defined for 2D stacks");
    if (!(hi > lo) || resolution < 1) throw NumericError("density_grid: bad bounds/resolution");
    DensityGrid grid;
    grid.lo = lo;
    grid.hi = hi;
    grid.resolution = resolution;
    grid.x_logp = Matrix(resolution, resolution);
    grid.z_logp = Matrix(resolution, resolution);
    double h = (hi - lo) / resolution;
    constexpr double kLog2Pi = 1.8378770664093454835606594728112;
    for (int i = 0; i < resolution; ++i) {
        double c1 = lo + (i + 0.5) * h;
        for (int j = 0; j < resolution; ++j) {
            double c0 = lo + (j + 0.5) * h;
            grid.x_logp(i, j) = log_prob(G, Vector{c0, c1});
            // log p_G(G(z)) needs no inversion: N(z) minus the forward log-det.
            FlowLogDetResult f = forward_with_logdet(G, Vector{c0, c1});
            grid.z_logp(i, j) = -kLog2Pi - 0.5 * (c0 * c0 + c1 * c1) - f.log_det;
        }
    }
    return grid;
}

void write_train_log_csv(const TrainLog& log, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("write_train_log_csv: cannot open '" + path + "'");
    f << "step,nll,grad_norm,clip_events\n";
    for (const TrainLogRow& r : log.rows)
        f << r.step << ',' << fmt_double(r.nll) << ',' << fmt_double(r.grad_norm) << ','
          << r.clip_events << '\n';
    if (!f) throw IoError("write_train_log_csv: write failed");
}

}  // namespace flowprior
