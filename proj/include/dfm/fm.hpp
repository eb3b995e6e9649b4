#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dfm/data.hpp"

namespace dfm {

// Real-valued factorization machine. V is k x n; column i is feature i's
// embedding and is contiguous in memory.
struct FmModel {
    double w0 = 0.0;
    Eigen::VectorXd w;
    Eigen::MatrixXd V;

    FmModel() = default;
    FmModel(std::size_t n_features, int k) : w(Eigen::VectorXd::Zero(n_features)), V(Eigen::MatrixXd::Zero(k, n_features)) {}

    std::size_t n_features() const { return static_cast<std::size_t>(w.size()); }
    int k() const { return static_cast<int>(V.rows()); }
};

enum class FmSolver { kCoordinateDescent, kSgd };

struct TrainConfig {
    double alpha = 1e-2;         // l2 on the linear weights
    double beta = 1e-2;          // strength of the delegate coupling
    int k = 16;
    int max_outer_iters = 30;
    double tol = 1e-5;           // relative objective change
    std::uint64_t seed = 0;
    double init_scale = 0.1;     // half-width of the uniform embedding init

    // Real-valued baseline only: l2 on V.
    double embedding_l2 = 0.0;
    FmSolver fm_solver = FmSolver::kCoordinateDescent;
    double sgd_learning_rate = 0.01;

    // Warm start: alternation rounds and embedding sweeps per round.
    int init_iters = 20;
    int init_fm_sweeps = 5;
    double init_l2 = 0.2;        // l2 on V in the relaxed warm start only
    int rotation_restarts = 20;  // random starts when aligning V to its signs; 0 skips

    int w_max_sweeps = 200;
    double w_tol = 1e-12;

    bool shuffle_features = false;
    int audit_interval = 10;

    // Real-valued baseline schedule: 50 outer iterations at tolerance 1e-6,
    // embedding l2 0.1.
    static TrainConfig fm_defaults() {
        TrainConfig c;
        c.max_outer_iters = 50;
        c.tol = 1e-6;
        c.embedding_l2 = 0.1;
        return c;
    }
};

// Throws DataError when an index is outside the model.
double fm_predict(const FmModel& m, const SparseInstance& x);

// Sum of squared residuals + alpha * |w|^2 (+ embedding_l2 * |V|_F^2).
double fm_objective(const FmModel& m, const Dataset& d, const TrainConfig& cfg);

struct LinearPart {
    double w0 = 0.0;
    Eigen::VectorXd w;
};

struct RidgeOptions {
    int max_sweeps = 200;
    double tol = 1e-12;
};

// Coordinate-descent ridge regression:
//   argmin sum_i (phi_i - w0 - w.x_i)^2 + alpha |w|^2,  w0 unpenalized.
// Each step is the exact one-dimensional minimizer, so the objective never
// increases. With alpha = 0 and collinear features the minimizer is not
// unique; the result then depends on the starting point.
LinearPart solve_w(std::span<const double> phi, const Dataset& d, const FeatureIndex& index, double alpha,
                   const RidgeOptions& opts = {}, const LinearPart* warm_start = nullptr);

double ridge_objective(std::span<const double> phi, const Dataset& d, const LinearPart& lin, double alpha);

// Per-instance caches for coordinate descent on an FmModel. The prediction of
// every instance is affine in any single parameter, so each coordinate has a
// closed-form minimizer.
class FmCoordinateSolver {
public:
    FmCoordinateSolver(const Dataset& d, const FeatureIndex& index, FmModel& model);

    void refresh();
    void update_bias();
    void update_linear(double alpha);

    // Minimizes SSE + (l2 + beta)|V|^2 - 2 beta tr(V^T D) one entry at a
    // time. `delegate` may be null when beta == 0.
    void update_embeddings(double l2, double beta, const Eigen::MatrixXd* delegate,
                           std::span<const FeatureId> order = {});

    double squared_error() const;
    std::span<const double> predictions() const { return pred_; }

private:
    const Dataset& data_;
    const FeatureIndex& index_;
    FmModel& model_;
    std::vector<double> pred_;
    std::vector<double> sums_;  // instance-major, k per instance
};

// Relaxed objective used during warm start:
// fm_objective + beta |V|^2 - 2 beta tr(V^T D).
double coupled_objective(const FmModel& m, const Dataset& d, const TrainConfig& cfg, const Eigen::MatrixXd& delegate);

struct FmTrainReport {
    std::vector<double> objective_trace;
    int iterations = 0;
};

using ProgressFn = std::function<void(int iter, double objective)>;

// Throws NumericError when the objective becomes non-finite.
FmModel fm_train(const Dataset& d, const TrainConfig& cfg, FmTrainReport* report = nullptr,
                 const ProgressFn& progress = {});

// Binary container: "DFMFMMDL", u32 version, u64 n, u64 k, f64 w0, f64 w[n],
// f64 V (feature-major, k per feature); all little-endian.
std::string serialize_fm(const FmModel& m);
FmModel deserialize_fm(std::string_view bytes);
void save_fm(const FmModel& m, const std::string& path);
FmModel load_fm(const std::string& path);

}  // namespace dfm
