#include "flowprior/inverse.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <fstream>

#include "flowprior/common.hpp"
#include "flowprior/metrics.hpp"

namespace flowprior {

const char* to_string(SolveStatus s) {
    switch (s) {
        case SolveStatus::ok: return "ok";
        case SolveStatus::max_iters: return "max_iters";
        case SolveStatus::line_search: return "line_search";
        case SolveStatus::nonfinite: return "nonfinite";
    }
    return "unknown";
}

namespace {

double objective(const FlowStack& G, const MeasurementOperator& op, const Vector& y, double gamma,
                 const Vector& z, long* clips) {
    FlowResult fr = forward(G, z);
    if (clips) *clips += fr.clip_events;
    Vector r = op.apply(fr.value);
    double f = 0.0;
    for (size_t i = 0; i < r.size(); ++i) {
        double d = r[i] - y[i];
        f += d * d;
    }
    if (gamma != 0.0) f += gamma * dot(z, z);
    return f;
}

Vector initial_point(const FlowStack& G, const InverseProblemSpec& spec) {
    switch (spec.init.kind) {
        case InitKind::zero: return Vector(static_cast<size_t>(G.dim), 0.0);
        case InitKind::gaussian: {
            RngStream rng = RngStream(spec.seed).derive(23);
            Vector z(static_cast<size_t>(G.dim));
            for (double& v : z) v = spec.init.std * rng.next_normal();
            return z;
        }
        case InitKind::from_image: {
            if (static_cast<int>(spec.init.image.size()) != G.dim)
                throw NumericError("solve: from_image initializer has wrong dimension");
            return inverse(G, spec.init.image).value;
        }
    }
    return Vector(static_cast<size_t>(G.dim), 0.0);
}

}  // namespace

RecoveryReport solve(const FlowStack& G, const InverseProblemSpec& spec) {
    if (spec.op.n != G.dim) throw NumericError("solve: operator dimension mismatch");
    if (static_cast<int>(spec.y.size()) != spec.op.out_dim())
        throw NumericError("solve: measurement dimension mismatch");
    if (spec.gamma < 0.0) throw NumericError("solve: gamma must be >= 0");

    auto t0 = std::chrono::steady_clock::now();
    RecoveryReport rep;
    rep.seed = spec.seed;

    Vector z = initial_point(G, spec);
    double f = objective(G, spec.op, spec.y, spec.gamma, z, &rep.clip_events);
    Vector g = grad_data_fit(G, z, spec.op, spec.y, spec.gamma);
    rep.objective_trace.push_back(f);

    const int history = 10;
    std::deque<Vector> s_hist, y_hist;
    std::deque<double> rho_hist;

    Vector best_z = z;
    double best_f = f;
    rep.status = SolveStatus::max_iters;

    for (int iter = 0; iter < spec.max_iters; ++iter) {
        double gnorm = norm2(g);
        if (!std::isfinite(f) || !all_finite(g)) {
            rep.status = SolveStatus::nonfinite;
            break;
        }
        if (gnorm < spec.tolerance) {
            rep.status = SolveStatus::ok;
            break;
        }

        // Two-loop recursion for d = -H g.
        Vector d = g;
        std::vector<double> alpha(s_hist.size(), 0.0);
        for (size_t i = s_hist.size(); i-- > 0;) {
            alpha[i] = rho_hist[i] * dot(s_hist[i], d);
            axpy(-alpha[i], y_hist[i], d);
        }
        if (!s_hist.empty()) {
            double sy = dot(s_hist.back(), y_hist.back());
            double yy = dot(y_hist.back(), y_hist.back());
            if (yy > 0.0) {
                double h0 = sy / yy;
                for (double& v : d) v *= h0;
            }
        }
        for (size_t i = 0; i < s_hist.size(); ++i) {
            double beta = rho_hist[i] * dot(y_hist[i], d);
            axpy(alpha[i] - beta, s_hist[i], d);
        }
        for (double& v : d) v = -v;

        double dg = dot(d, g);
        if (dg >= 0.0) {  // not a descent direction; restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g;
            for (double& v : d) v = -v;
            dg = -dot(g, g);
        }

        // Armijo backtracking.
        double t = s_hist.empty() ? std::min(1.0, 1.0 / std::max(1.0, gnorm)) : 1.0;
        const double c1 = 1e-4;
        Vector z_new(z.size());
        double f_new = 0.0;
        bool accepted = false;
        for (int ls = 0; ls < 60; ++ls) {
            for (size_t i = 0; i < z.size(); ++i) z_new[i] = z[i] + t * d[i];
            f_new = objective(G, spec.op, spec.y, spec.gamma, z_new, &rep.clip_events);
            if (std::isfinite(f_new) && f_new <= f + c1 * t * dg) {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if (!accepted) {
            rep.status = SolveStatus::line_search;
            break;
        }

        Vector g_new = grad_data_fit(G, z_new, spec.op, spec.y, spec.gamma);
        Vector s_vec(z.size()), y_vec(z.size());
        for (size_t i = 0; i < z.size(); ++i) {
            s_vec[i] = z_new[i] - z[i];
            y_vec[i] = g_new[i] - g[i];
        }
        double sy = dot(s_vec, y_vec);
        if (sy > 1e-12 * norm2(s_vec) * norm2(y_vec) && sy > 0.0) {
            s_hist.push_back(std::move(s_vec));
            y_hist.push_back(std::move(y_vec));
            rho_hist.push_back(1.0 / sy);
            if (static_cast<int>(s_hist.size()) > history) {
                s_hist.pop_front();
                y_hist.pop_front();
                rho_hist.pop_front();
            }
        }
        z = std::move(z_new);
        g = std::move(g_new);
        f = f_new;
        rep.objective_trace.push_back(f);
        ++rep.iterations;
        if (f < best_f) {
            best_f = f;
            best_z = z;
        }
    }
    if (rep.status == SolveStatus::max_iters && norm2(g) < spec.tolerance)
        rep.status = SolveStatus::ok;

    // Return the best iterate; on clean runs this is the final one.
    if (rep.status == SolveStatus::line_search || rep.status == SolveStatus::nonfinite) z = best_z;
    rep.z_hat = z;
    rep.x_hat = forward(G, z).value;
    if (!spec.ground_truth.empty()) {
        rep.psnr = psnr(rep.x_hat, spec.ground_truth);
        int w = spec.grid_w > 0 ? spec.grid_w : G.dim;
        int h = spec.grid_h > 0 ? spec.grid_h : 1;
        rep.ssim = ssim(rep.x_hat, spec.ground_truth, h, w);
        rep.has_metrics = true;
    }
    rep.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return rep;
}

namespace {

SweepCell run_cell(const FlowStack& G, const MeasurementOperator& op, const Vector& y,
                   const Vector& x0, double key, int sample_id, uint64_t seed, double gamma,
                   const SweepOptions& opt) {
    SweepCell cell;
    cell.key = key;
    cell.sample_id = sample_id;
    cell.seed = seed;
    try {
        InverseProblemSpec spec;
        spec.op = op;
        spec.y = y;
        spec.gamma = gamma;
        spec.init = opt.init;
        spec.max_iters = opt.max_iters;
        spec.tolerance = opt.tolerance;
        spec.seed = seed;
        spec.ground_truth = x0;
        spec.grid_h = opt.grid_h;
        spec.grid_w = opt.grid_w;
        RecoveryReport rep = solve(G, spec);
        cell.psnr_db = rep.psnr;
        cell.ssim = rep.ssim;
        cell.iters = rep.iterations;
        cell.status = to_string(rep.status);
    } catch (const std::exception&) {
        cell.psnr_db = 0.0;
        cell.ssim = 0.0;
        cell.iters = 0;
        cell.status = "error";
    }
    return cell;
}

}  // namespace

std::vector<SweepCell> gamma_sweep(const FlowStack& G, const std::vector<Vector>& x0s,
                                   const MeasurementOperator& op, const std::vector<double>& gammas,
                                   uint64_t base_seed, const SweepOptions& opt) {
    if (gammas.empty()) throw NumericError("gamma_sweep: need at least one gamma");
    if (x0s.empty()) throw NumericError("gamma_sweep: need at least one sample");
    RngStream base(base_seed);
    // One measurement draw per sample, shared across the whole gamma grid.
    std::vector<Vector> ys(x0s.size());
    for (size_t s = 0; s < x0s.size(); ++s) {
        RngStream noise = base.derive(1000 + s);
        ys[s] = make_measurements(x0s[s], op, noise);
    }
    const int ncells = static_cast<int>(gammas.size() * x0s.size());
    std::vector<SweepCell> cells(static_cast<size_t>(ncells));
    parallel_for(ncells, opt.threads, [&](int c) {
        int gi = c / static_cast<int>(x0s.size());
        int si = c % static_cast<int>(x0s.size());
        uint64_t seed = base.derive(1).derive(static_cast<uint64_t>(c)).stream_id();
        cells[static_cast<size_t>(c)] =
            run_cell(G, op, ys[static_cast<size_t>(si)], x0s[static_cast<size_t>(si)],
                     gammas[static_cast<size_t>(gi)], si, seed, gammas[static_cast<size_t>(gi)], opt);
    });
    return cells;
}

std::vector<SweepCell> measurement_sweep(const FlowStack& G, const std::vector<Vector>& x0s,
                                         const std::vector<int>& m_values, double noise_level,
                                         uint64_t base_seed, const SweepOptions& opt) {
    if (m_values.empty()) throw NumericError("measurement_sweep: empty m list");
    for (int m : m_values)
        if (m < 1 || m > G.dim)
            throw NumericError("measurement_sweep: m values must lie in [1, n]");
    if (x0s.empty()) throw NumericError("measurement_sweep: need at least one sample");
    RngStream base(base_seed);
    const int ncells = static_cast<int>(m_values.size() * x0s.size());
    std::vector<SweepCell> cells(static_cast<size_t>(ncells));
    parallel_for(ncells, opt.threads, [&](int c) {
        int mi = c / static_cast<int>(x0s.size());
        int si = c % static_cast<int>(x0s.size());
        int m = m_values[static_cast<size_t>(mi)];
        RngStream cell_rng = base.derive(static_cast<uint64_t>(c) + 7);
        MeasurementOperator op = MeasurementOperator::gaussian(m, G.dim, cell_rng, noise_level);
        Vector y = make_measurements(x0s[static_cast<size_t>(si)], op, cell_rng);
        cells[static_cast<size_t>(c)] =
            run_cell(G, op, y, x0s[static_cast<size_t>(si)], static_cast<double>(m), si,
                     cell_rng.stream_id(), opt.gamma, opt);
    });
    return cells;
}

std::vector<SweepAggregate> aggregate_sweep(const std::vector<SweepCell>& cells) {
    std::vector<SweepAggregate> out;
    for (const SweepCell& c : cells) {
        SweepAggregate* slot = nullptr;
        for (SweepAggregate& a : out)
            if (a.key == c.key) slot = &a;
        if (!slot) {
            out.push_back(SweepAggregate{c.key, 0.0, 0.0, 0});
            slot = &out.back();
        }
        slot->mean_psnr += c.psnr_db;
        slot->mean_ssim += c.ssim;
        slot->cells += 1;
    }
    for (SweepAggregate& a : out) {
        a.mean_psnr /= a.cells;
        a.mean_ssim /= a.cells;
    }
    return out;
}

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("write_sweep_csv: cannot open '" + path + "'");
    f << "m_or_gamma,sample_id,seed,psnr_db,ssim,iters,status\n";
    for (const SweepCell& c : cells)
        f << fmt_double(c.key) << ',' << c.sample_id << ',' << c.seed << ','
          << fmt_double(c.psnr_db) << ',' << fmt_double(c.ssim) << ',' << c.iters << ','
          << c.status << '\n';
    if (!f) throw IoError("write_sweep_csv: write failed");
}

std::vector<PerturbRow> perturbation_sensitivity(const FlowStack& G, const Vector& z_a,
                                                 const Vector& z_b,
                                                 const std::vector<double>& alphas, int n_random,
                                                 RngStream& rng) {
    if (z_a == z_b) throw NumericError("perturbation_sensitivity: z_a and z_b must differ");
    if (n_random < 2) throw NumericError("perturbation_sensitivity: need >= 2 random directions");
    const int n = G.dim;
    Vector d_nat(z_a.size());
    for (size_t i = 0; i < z_a.size(); ++i) d_nat[i] = z_b[i] - z_a[i];
    double nn = norm2(d_nat);
    for (double& v : d_nat) v /= nn;

    std::vector<Vector> dirs(static_cast<size_t>(n_random));
    for (Vector& d : dirs) {
        d.resize(static_cast<size_t>(n));
        double dn = 0.0;
        do {
            for (double& v : d) v = rng.next_normal();
            dn = norm2(d);
        } while (dn == 0.0);
        for (double& v : d) v /= dn;
    }

    Vector base = forward(G, z_a).value;
    auto shift = [&](const Vector& dir, double a) {
        Vector z(z_a.size());
        for (size_t i = 0; i < z.size(); ++i) z[i] = z_a[i] + a * dir[i];
        Vector out = forward(G, z).value;
        double s = 0.0;
        for (size_t i = 0; i < out.size(); ++i) {
            double d = out[i] - base[i];
            s += d * d;
        }
        return std::sqrt(s);
    };

    std::vector<PerturbRow> rows;
    rows.reserve(alphas.size());
    for (double a : alphas) {
        PerturbRow row;
        row.alpha = a;
        row.natural = shift(d_nat, a);
        double mean = 0.0;
        std::vector<double> vals(static_cast<size_t>(n_random));
        for (int i = 0; i < n_random; ++i) {
            vals[static_cast<size_t>(i)] = shift(dirs[static_cast<size_t>(i)], a);
            mean += vals[static_cast<size_t>(i)];
        }
        mean /= n_random;
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        row.random_mean = mean;
        row.random_std = std::sqrt(var / (n_random - 1));
        rows.push_back(row);
    }
    return rows;
}

void write_perturb_csv(const std::vector<PerturbRow>& rows, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw IoError("write_perturb_csv: cannot open '" + path + "'");
    f << "alpha,natural,random_mean,random_std\n";
    for (const PerturbRow& r : rows)
        f << fmt_double(r.alpha) << ',' << fmt_double(r.natural) << ',' << fmt_double(r.random_mean)
          << ',' << fmt_double(r.random_std) << '\n';
    if (!f) throw IoError("write_perturb_csv: write failed");
}

}  // namespace flowprior
