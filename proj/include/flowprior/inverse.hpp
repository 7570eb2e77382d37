#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flowprior/flow.hpp"
#include "flowprior/measurement.hpp"
#include "flowprior/numerics.hpp"

namespace flowprior {

enum class InitKind { zero, gaussian, from_image };

struct InitStrategy {
    InitKind kind = InitKind::zero;
    double std = 0.1;  // gaussian kind
    Vector image;      // from_image kind: z0 = G^{-1}(image)
};

struct InverseProblemSpec {
    MeasurementOperator op;
    Vector y;
    double gamma = 0.0;
    InitStrategy init;
    int max_iters = 500;
    double tolerance = 1e-8;  // gradient-norm stopping threshold
    uint64_t seed = 0;
    Vector ground_truth;  // optional; enables psnr/ssim in the report
    int grid_h = 1;       // ssim reshape; grid_w = 0 means 1 x n
    int grid_w = 0;
};

enum class SolveStatus { ok, max_iters, line_search, nonfinite };
const char* to_string(SolveStatus s);

struct RecoveryReport {
    Vector x_hat;  // forward(G, z_hat), exactly
    Vector z_hat;
    std::vector<double> objective_trace;  // initial value plus one entry per accepted step
    double psnr = 0.0;
    double ssim = 0.0;
    bool has_metrics = false;
    int iterations = 0;
    double wall_time = 0.0;
    uint64_t seed = 0;
    SolveStatus status = SolveStatus::ok;
    long clip_events = 0;
};

/// Minimizes ||A G(z) - y||^2 + gamma ||z||^2 by limited-memory quasi-Newton
/// descent (history 10, Armijo backtracking) from the configured
/// initialization; stops on gradient norm < tolerance or max_iters.
RecoveryReport solve(const FlowStack& G, const InverseProblemSpec& spec);

struct SweepCell {
    double key;  // gamma or m
    int sample_id;
    uint64_t seed;
    double psnr_db;
    double ssim;
    int iters;
    std::string status;
};

struct SweepOptions {
    double gamma = 0.0;  // measurement_sweep only
    InitStrategy init;
    int max_iters = 500;
    double tolerance = 1e-8;
    int threads = 1;
    int grid_h = 1;
    int grid_w = 0;
};

/// One solve per (gamma, sample); each sample's measurement noise is drawn
/// once and reused for every gamma. Cell failures are flagged in their
/// status, never propagated.
std::vector<SweepCell> gamma_sweep(const FlowStack& G, const std::vector<Vector>& x0s,
                                   const MeasurementOperator& op, const std::vector<double>& gammas,
                                   uint64_t base_seed, const SweepOptions& opt);

/// One solve per (m, sample) with an independent Gaussian operator draw per cell.
std::vector<SweepCell> measurement_sweep(const FlowStack& G, const std::vector<Vector>& x0s,
                                         const std::vector<int>& m_values, double noise_level,
                                         uint64_t base_seed, const SweepOptions& opt);

/// Mean psnr (and ssim) per distinct key, in first-appearance order.
struct SweepAggregate {
    double key;
    double mean_psnr;
    double mean_ssim;
    int cells;
};
std::vector<SweepAggregate> aggregate_sweep(const std::vector<SweepCell>& cells);

void write_sweep_csv(const std::vector<SweepCell>& cells, const std::string& path);

struct PerturbRow {
    double alpha;
    double natural;      // ||G(z + alpha d) - G(z)|| along (z_b - z_a)
    double random_mean;  // same statistic over random unit directions
    double random_std;
};

std::vector<PerturbRow> perturbation_sensitivity(const FlowStack& G, const Vector& z_a,
                                                 const Vector& z_b,
                                                 const std::vector<double>& alphas, int n_random,
                                                 RngStream& rng);

void write_perturb_csv(const std::vector<PerturbRow>& rows, const std::string& path);

}  // namespace flowprior
