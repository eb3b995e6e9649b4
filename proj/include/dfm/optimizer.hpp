#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dfm/codes.hpp"
#include "dfm/data.hpp"
#include "dfm/fm.hpp"

namespace dfm {

// +1 for x >= 0, -1 otherwise. Throws NumericError on NaN.
int sgn(double x);

// Alternating-optimization state. The caches hold, per training instance,
// the current prediction and the k per-bit sums s_t = sum_i x_i b_it.
struct OptState {
    CodeMatrix codes;
    Eigen::MatrixXd delegate;  // k x n
    double w0 = 0.0;
    Eigen::VectorXd w;

    std::vector<double> predictions;
    std::vector<double> bit_sums;  // instance-major
    std::vector<double> objective_trace;
    int b_sweeps = 0;
    int outer_iterations = 0;

    int k() const { return codes.k(); }
    DfmModel model() const { return {w0, w, codes}; }
};

// Builds a state and fills its caches from scratch.
OptState make_state(const Dataset& d, CodeMatrix codes, Eigen::MatrixXd delegate, double w0, Eigen::VectorXd w);
void refresh_caches(OptState& s, const Dataset& d);
// Largest |cached - recomputed| over predictions and bit sums.
double cache_drift(const OptState& s, const Dataset& d);

// sum (y - DFM(x))^2 + alpha |w|^2 - 2 beta tr(B^T D), recomputed from the
// model parameters without touching the caches.
double soft_objective(const OptState& s, const Dataset& d, const TrainConfig& cfg);
// Same quantity from the cached predictions.
double cached_soft_objective(const OptState& s, const Dataset& d, const TrainConfig& cfg);

// Update statistic for bit (r, t): the objective restricted to b_rt is
// const - 2 b_rt * statistic. Uses the cached predictions and bit sums.
double bit_statistic(const OptState& s, const Dataset& d, const FeatureIndex& index, FeatureId r, int t, double beta);

struct BitDecision {
    FeatureId feature;
    int bit;
    double statistic;
    int before;
    int after;
};
using BitObserver = std::function<void(const OptState&, const BitDecision&)>;

// One discrete coordinate descent sweep over every (feature, bit). A bit is
// set to sgn(statistic) unless the statistic is exactly zero, in which case
// it is left alone. The observer sees the state after each decision.
void update_B(OptState& s, const Dataset& d, const FeatureIndex& index, const TrainConfig& cfg,
              const BitObserver& observer = {});

// Replaces the delegate with the constrained maximizer of tr(B^T D).
void update_D(OptState& s, std::uint64_t seed);

// Ridge solve of (w0, w) on phi = y - pairwise(B); refreshes predictions.
void update_w(OptState& s, const Dataset& d, const FeatureIndex& index, const TrainConfig& cfg);

// Warm start: alternate embedding sweeps on the relaxed coupled objective,
// delegate solves and ridge solves for cfg.init_iters rounds, then round the
// embeddings with sgn.
OptState initialize(const Dataset& d, const FeatureIndex& index, const TrainConfig& cfg);

enum class Stage { kInit, kUpdateB, kUpdateD, kUpdateW };

struct StageRecord {
    int iteration;
    Stage stage;
    double objective;
};

struct DfmTrainReport {
    std::vector<StageRecord> stages;
    int iterations = 0;
    bool converged = false;
};

// Runs {update_B, update_D, update_w} until the relative change of the
// softened objective drops below cfg.tol or cfg.max_outer_iters is reached.
// `resume` continues from a checkpointed state instead of initializing.
OptState train_dfm_state(const Dataset& d, const TrainConfig& cfg, DfmTrainReport* report = nullptr,
                         const ProgressFn& progress = {}, const OptState* resume = nullptr);

DfmModel train_dfm(const Dataset& d, const TrainConfig& cfg, DfmTrainReport* report = nullptr,
                   const ProgressFn& progress = {});

// Checkpoint: "DFMCHKPT", u32 version, u64 length + DFM model container,
// f64 D (feature-major), u64 count + f64 objective trace, u64 outer
// iterations, u64 B sweeps. Caches are rebuilt on load.
std::string serialize_checkpoint(const OptState& s);
OptState deserialize_checkpoint(std::string_view bytes, const Dataset& d);

}  // namespace dfm
