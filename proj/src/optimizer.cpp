#include "dfm/optimizer.hpp"

#include <cmath>
#include <numeric>

#include "dfm/binary_io.hpp"
#include "dfm/delegate.hpp"
#include "dfm/errors.hpp"
#include "dfm/rng.hpp"

namespace dfm {

int sgn(double x) {
    if (std::isnan(x)) throw NumericError("sgn of NaN");
    return x >= 0.0 ? 1 : -1;
}

namespace {

double linear_part(double w0, const Eigen::VectorXd& w, const SparseInstance& x) {
    double p = w0;
    for (std::size_t j = 0; j < x.nnz(); ++j) p += w[x.indices[j]] * x.values[j];
    return p;
}

// Fills s (length k) and returns the prediction of one instance.
double predict_with_sums(const OptState& st, const SparseInstance& x, double* s) {
    const int k = st.k();
    std::fill_n(s, k, 0.0);
    double sq = 0.0;
    for (std::size_t j = 0; j < x.nnz(); ++j) {
        const double v = x.values[j];
        for (int t = 0; t < k; ++t) s[t] += st.codes.sign(x.indices[j], t) > 0 ? v : -v;
        sq += v * v;
    }
    double ss = 0.0;
    for (int t = 0; t < k; ++t) ss += s[t] * s[t];
    return linear_part(st.w0, st.w, x) + 0.5 * (ss - k * sq);
}

double trace_coupling(const OptState& s) {
    double tr = 0.0;
    for (std::size_t i = 0; i < s.codes.n_features(); ++i)
        for (int t = 0; t < s.k(); ++t) tr += s.codes.sign(static_cast<FeatureId>(i), t) * s.delegate(t, i);
    return tr;
}

std::uint64_t delegate_seed(std::uint64_t seed, std::uint64_t step) {
    return seed * 0x9E3779B97F4A7C15ull + step + 1;
}

}  // namespace

OptState make_state(const Dataset& d, CodeMatrix codes, Eigen::MatrixXd delegate, double w0, Eigen::VectorXd w) {
    if (codes.n_features() != d.n_features || static_cast<std::size_t>(w.size()) != d.n_features)
        throw DataError("state dimensions do not match the dataset");
    if (delegate.rows() != codes.k() || static_cast<std::size_t>(delegate.cols()) != codes.n_features())
        throw DataError("delegate dimensions do not match the codes");
    OptState s;
    s.codes = std::move(codes);
    s.delegate = std::move(delegate);
    s.w0 = w0;
    s.w = std::move(w);
    refresh_caches(s, d);
    return s;
}

void refresh_caches(OptState& s, const Dataset& d) {
    const int k = s.k();
    s.predictions.resize(d.size());
    s.bit_sums.resize(d.size() * static_cast<std::size_t>(k));
    for (std::size_t i = 0; i < d.size(); ++i)
        s.predictions[i] = predict_with_sums(s, d.instances[i], &s.bit_sums[i * k]);
}

double cache_drift(const OptState& s, const Dataset& d) {
    const int k = s.k();
    std::vector<double> sums(k);
    double drift = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double p = predict_with_sums(s, d.instances[i], sums.data());
        drift = std::max(drift, std::abs(p - s.predictions[i]));
        for (int t = 0; t < k; ++t) drift = std::max(drift, std::abs(sums[t] - s.bit_sums[i * k + t]));
    }
    return drift;
}

double soft_objective(const OptState& s, const Dataset& d, const TrainConfig& cfg) {
    const DfmModel m = s.model();
    double sse = 0.0;
    for (const auto& x : d.instances) {
        const double e = x.target - dfm_predict(m, x);
        sse += e * e;
    }
    return sse + cfg.alpha * s.w.squaredNorm() - 2.0 * cfg.beta * trace_coupling(s);
}

double cached_soft_objective(const OptState& s, const Dataset& d, const TrainConfig& cfg) {
    double sse = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double e = d.instances[i].target - s.predictions[i];
        sse += e * e;
    }
    return sse + cfg.alpha * s.w.squaredNorm() - 2.0 * cfg.beta * trace_coupling(s);
}

double bit_statistic(const OptState& s, const Dataset& d, const FeatureIndex& index, FeatureId r, int t,
                     double beta) {
    const int k = s.k();
    const int b = s.codes.sign(r, t);
    double stat = 0.0;
    for (const auto& e : index.bucket(r)) {
        const double x = e.value;
        // a = sum over the other features of x_i b_it; the prediction
        // depends on b_rt only through x * a * b_rt
        const double a = s.bit_sums[e.instance * k + t] - x * b;
        const double rho = d.instances[e.instance].target - s.predictions[e.instance] + x * a * b;
        stat += x * rho * a;
    }
    return stat + beta * s.delegate(t, r);
}

void update_B(OptState& s, const Dataset& d, const FeatureIndex& index, const TrainConfig& cfg,
              const BitObserver& observer) {
    const int k = s.k();
    std::vector<FeatureId> order(s.codes.n_features());
    std::iota(order.begin(), order.end(), FeatureId{0});
    if (cfg.shuffle_features) {
        Rng rng(delegate_seed(cfg.seed ^ 0x5bd1e995u, static_cast<std::uint64_t>(s.b_sweeps)));
        shuffle(order, rng);
    }

    for (FeatureId r : order) {
        for (int t = 0; t < k; ++t) {
            const double stat = bit_statistic(s, d, index, r, t, cfg.beta);
            const int before = s.codes.sign(r, t);
            const int after = stat != 0.0 ? sgn(stat) : before;
            if (after != before) {
                s.codes.set_sign(r, t, after);
                for (const auto& e : index.bucket(r)) {
                    double& sum = s.bit_sums[e.instance * k + t];
                    const double a = sum - e.value * before;
                    s.predictions[e.instance] += 2.0 * e.value * a * after;
                    sum += 2.0 * e.value * after;
                }
            }
            if (observer) observer(s, {r, t, stat, before, after});
        }
    }

    ++s.b_sweeps;
    if (cfg.audit_interval > 0 && s.b_sweeps % cfg.audit_interval == 0) {
        const double drift = cache_drift(s, d);
        if (drift > 1e-6)
            throw NumericError("prediction cache drifted by " + std::to_string(drift) + " after sweep " +
                               std::to_string(s.b_sweeps));
        refresh_caches(s, d);
    }
}

void update_D(OptState& s, std::uint64_t seed) { s.delegate = update_delegate(unpack(s.codes), seed); }

void update_w(OptState& s, const Dataset& d, const FeatureIndex& index, const TrainConfig& cfg) {
    std::vector<double> phi(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double pairwise = s.predictions[i] - linear_part(s.w0, s.w, d.instances[i]);
        phi[i] = d.instances[i].target - pairwise;
    }
    const LinearPart start{s.w0, s.w};
    const LinearPart lin = solve_w(phi, d, index, cfg.alpha, {cfg.w_max_sweeps, cfg.w_tol}, &start);
    for (std::size_t i = 0; i < d.size(); ++i) {
        const double pairwise = d.instances[i].target - phi[i];
        s.predictions[i] = linear_part(lin.w0, lin.w, d.instances[i]) + pairwise;
    }
    s.w0 = lin.w0;
    s.w = lin.w;
}

namespace {

Eigen::MatrixXd round_signs(const Eigen::MatrixXd& v) {
    return v.unaryExpr([](double x) { return static_cast<double>(sgn(x)); });
}

}  // namespace

OptState initialize(const Dataset& d, const FeatureIndex& index, const TrainConfig& cfg) {
    if (d.empty()) throw DataError("cannot initialize on an empty dataset");
    if (cfg.k < 1) throw DataError("k must be at least 1");

    FmModel relaxed(d.n_features, cfg.k);
    Rng rng(cfg.seed);
    for (Eigen::Index i = 0; i < relaxed.V.cols(); ++i)
        for (Eigen::Index t = 0; t < relaxed.V.rows(); ++t) relaxed.V(t, i) = uniform(rng, -cfg.init_scale, cfg.init_scale);

    Eigen::MatrixXd delegate = update_delegate(relaxed.V, delegate_seed(cfg.seed, 0));
    FmCoordinateSolver solver(d, index, relaxed);

    auto fit_linear = [&] {
        std::vector<double> phi(d.size());
        for (std::size_t i = 0; i < d.size(); ++i)
            phi[i] = d.instances[i].target - (solver.predictions()[i] - linear_part(relaxed.w0, relaxed.w, d.instances[i]));
        const LinearPart start{relaxed.w0, relaxed.w};
        const LinearPart lin = solve_w(phi, d, index, cfg.alpha, {cfg.w_max_sweeps, cfg.w_tol}, &start);
        relaxed.w0 = lin.w0;
        relaxed.w = lin.w;
        solver.refresh();
    };

    fit_linear();
    for (int round = 0; round < cfg.init_iters; ++round) {
        for (int sweep = 0; sweep < cfg.init_fm_sweeps; ++sweep)
            solver.update_embeddings(cfg.init_l2, cfg.beta, &delegate);
        delegate = update_delegate(relaxed.V, delegate_seed(cfg.seed, static_cast<std::uint64_t>(round) + 1));
        fit_linear();
        if (!std::isfinite(solver.squared_error()))
            throw NumericError("warm start diverged in round " + std::to_string(round));
    }

    // Rotating V and D together leaves the relaxed objective unchanged; pick
    // the rotation that rounds with the least loss.
    if (cfg.rotation_restarts > 0 && cfg.init_iters > 0) {
        Rng rot_rng(delegate_seed(cfg.seed, 500));
        const Eigen::MatrixXd rot = quantization_rotation(relaxed.V, cfg.rotation_restarts, 50, rot_rng);
        relaxed.V = rot * relaxed.V;
        delegate = rot * delegate;
    }
    return make_state(d, pack(round_signs(relaxed.V)), std::move(delegate), relaxed.w0, relaxed.w);
}

OptState train_dfm_state(const Dataset& d, const TrainConfig& cfg, DfmTrainReport* report, const ProgressFn& progress,
                         const OptState* resume) {
    if (d.empty()) throw DataError("cannot train on an empty dataset");
    if (cfg.alpha < 0.0 || cfg.beta < 0.0) throw DataError("alpha and beta must be non-negative");
    const FeatureIndex index(d);

    DfmTrainReport local;
    DfmTrainReport& rep = report ? *report : local;
    rep = {};

    OptState s = resume ? *resume : initialize(d, index, cfg);
    if (resume) refresh_caches(s, d);

    auto record = [&](Stage stage) {
        const double obj = cached_soft_objective(s, d, cfg);
        if (!std::isfinite(obj))
            throw NumericError("softened objective became non-finite at iteration " +
                               std::to_string(s.outer_iterations));
        rep.stages.push_back({s.outer_iterations, stage, obj});
        return obj;
    };

    double prev = record(Stage::kInit);
    if (s.objective_trace.empty()) s.objective_trace.push_back(prev);
    for (int it = 0; it < cfg.max_outer_iters; ++it) {
        ++s.outer_iterations;
        update_B(s, d, index, cfg);
        record(Stage::kUpdateB);
        update_D(s, delegate_seed(cfg.seed, 1000 + static_cast<std::uint64_t>(s.outer_iterations)));
        record(Stage::kUpdateD);
        update_w(s, d, index, cfg);
        const double cur = record(Stage::kUpdateW);
        s.objective_trace.push_back(cur);
        rep.iterations = it + 1;
        if (progress) progress(s.outer_iterations, cur);
        if (std::abs(prev - cur) < cfg.tol * std::max(std::abs(prev), 1e-300)) {
            rep.converged = true;
            break;
        }
        prev = cur;
    }
    return s;
}

DfmModel train_dfm(const Dataset& d, const TrainConfig& cfg, DfmTrainReport* report, const ProgressFn& progress) {
    return train_dfm_state(d, cfg, report, progress).model();
}

namespace {
constexpr std::string_view kCkptMagic = "DFMCHKPT";
constexpr std::uint32_t kCkptVersion = 1;
}  // namespace

std::string serialize_checkpoint(const OptState& s) {
    const std::string model = serialize_dfm(s.model());
    io::Writer w;
    w.bytes(kCkptMagic);
    w.u32(kCkptVersion);
    w.u64(model.size());
    w.bytes(model);
    w.f64s({s.delegate.data(), static_cast<std::size_t>(s.delegate.size())});
    w.u64(s.objective_trace.size());
    w.f64s(s.objective_trace);
    w.u64(static_cast<std::uint64_t>(s.outer_iterations));
    w.u64(static_cast<std::uint64_t>(s.b_sweeps));
    return w.take();
}

OptState deserialize_checkpoint(std::string_view bytes, const Dataset& d) {
    io::Reader r(bytes);
    r.expect(kCkptMagic, "checkpoint");
    if (r.u32() != kCkptVersion) throw DataError("unsupported checkpoint version");
    const std::uint64_t model_len = r.u64();
    if (model_len > r.remaining()) throw DataError("truncated checkpoint");
    const std::size_t model_start = bytes.size() - r.remaining();
    DfmModel m = deserialize_dfm(bytes.substr(model_start, model_len));
    io::Reader rest(bytes.substr(model_start + model_len));

    Eigen::MatrixXd delegate(m.k(), static_cast<Eigen::Index>(m.n_features()));
    for (Eigen::Index i = 0; i < delegate.size(); ++i) delegate.data()[i] = rest.f64();
    const std::uint64_t trace_len = rest.u64();
    if (trace_len > rest.remaining() / 8) throw DataError("truncated checkpoint");
    std::vector<double> trace(trace_len);
    for (auto& v : trace) v = rest.f64();
    const auto outer = static_cast<int>(rest.u64());
    const auto sweeps = static_cast<int>(rest.u64());
    if (!rest.at_end()) throw DataError("trailing bytes in checkpoint");

    OptState s = make_state(d, std::move(m.codes), std::move(delegate), m.w0, std::move(m.w));
    s.objective_trace = std::move(trace);
    s.outer_iterations = outer;
    s.b_sweeps = sweeps;
    return s;
}

}  // namespace dfm
