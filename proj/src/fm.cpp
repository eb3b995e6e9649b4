#include "dfm/fm.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dfm/binary_io.hpp"
#include "dfm/errors.hpp"
#include "dfm/rng.hpp"

namespace dfm {

namespace {

void check_indices(const SparseInstance& x, std::size_t n) {
    if (!x.indices.empty() && x.indices.back() >= n)
        throw DataError("feature index " + std::to_string(x.indices.back()) + " out of range for model with " +
                        std::to_string(n) + " features");
}

}  // namespace

double fm_predict(const FmModel& m, const SparseInstance& x) {
    check_indices(x, m.n_features());
    const int k = m.k();
    double linear = m.w0;
    for (std::size_t j = 0; j < x.nnz(); ++j) linear += m.w[x.indices[j]] * x.values[j];

    // 1/2 sum_t [(sum_i x_i v_ti)^2 - sum_i x_i^2 v_ti^2]
    double pairwise = 0.0;
    for (int t = 0; t < k; ++t) {
        double s = 0.0, q = 0.0;
        for (std::size_t j = 0; j < x.nnz(); ++j) {
            const double v = m.V(t, x.indices[j]) * x.values[j];
            s += v;
            q += v * v;
        }
        pairwise += s * s - q;
    }
    return linear + 0.5 * pairwise;
}

double fm_objective(const FmModel& m, const Dataset& d, const TrainConfig& cfg) {
    double sse = 0.0;
    for (const auto& x : d.instances) {
        const double e = x.target - fm_predict(m, x);
        sse += e * e;
    }
    double obj = sse + cfg.alpha * m.w.squaredNorm();
    if (cfg.embedding_l2 != 0.0) obj += cfg.embedding_l2 * m.V.squaredNorm();
    return obj;
}

double ridge_objective(std::span<const double> phi, const Dataset& d, const LinearPart& lin, double alpha) {
    double sse = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& x = d.instances[i];
        double p = lin.w0;
        for (std::size_t j = 0; j < x.nnz(); ++j) p += lin.w[x.indices[j]] * x.values[j];
        sse += (phi[i] - p) * (phi[i] - p);
    }
    return sse + alpha * lin.w.squaredNorm();
}

LinearPart solve_w(std::span<const double> phi, const Dataset& d, const FeatureIndex& index, double alpha,
                   const RidgeOptions& opts, const LinearPart* warm_start) {
    if (phi.size() != d.size()) throw DataError("residual count does not match instance count");
    if (alpha < 0.0) throw DataError("alpha must be non-negative");
    for (double v : phi)
        if (!std::isfinite(v)) throw NumericError("non-finite residual target");

    LinearPart lin;
    if (warm_start) {
        lin = *warm_start;
    } else {
        lin.w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(d.n_features));
    }
    if (d.empty()) return lin;

    // residual = phi - w0 - w.x
    std::vector<double> res(phi.begin(), phi.end());
    for (std::size_t i = 0; i < d.size(); ++i) {
        const auto& x = d.instances[i];
        res[i] -= lin.w0;
        for (std::size_t j = 0; j < x.nnz(); ++j) res[i] -= lin.w[x.indices[j]] * x.values[j];
    }
    auto objective = [&] {
        double s = 0.0;
        for (double r : res) s += r * r;
        return s + alpha * lin.w.squaredNorm();
    };

    const double n_inst = static_cast<double>(d.size());
    double prev = objective();
    for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
        const double shift = std::accumulate(res.begin(), res.end(), 0.0) / n_inst;
        lin.w0 += shift;
        for (double& r : res) r -= shift;

        for (FeatureId f = 0; f < index.n_features(); ++f) {
            auto bucket = index.bucket(f);
            double num = 0.0, den = alpha;
            for (const auto& e : bucket) {
                num += e.value * (res[e.instance] + lin.w[f] * e.value);
                den += e.value * e.value;
            }
            if (den <= 0.0) continue;
            const double next = num / den;
            const double delta = next - lin.w[f];
            if (delta == 0.0) continue;
            lin.w[f] = next;
            for (const auto& e : bucket) res[e.instance] -= delta * e.value;
        }

        const double cur = objective();
        if (!std::isfinite(cur)) throw NumericError("ridge objective became non-finite at sweep " + std::to_string(sweep));
        const bool done = cur == 0.0 || std::abs(prev - cur) <= opts.tol * std::max(std::abs(prev), 1e-300);
        prev = cur;
        if (done) break;
    }
    return lin;
}

FmCoordinateSolver::FmCoordinateSolver(const Dataset& d, const FeatureIndex& index, FmModel& model)
    : data_(d), index_(index), model_(model) {
    refresh();
}

void FmCoordinateSolver::refresh() {
    const int k = model_.k();
    pred_.assign(data_.size(), 0.0);
    sums_.assign(data_.size() * static_cast<std::size_t>(k), 0.0);
    for (std::size_t i = 0; i < data_.size(); ++i) {
        const auto& x = data_.instances[i];
        double* s = &sums_[i * k];
        double linear = model_.w0, q = 0.0;
        for (std::size_t j = 0; j < x.nnz(); ++j) {
            const FeatureId f = x.indices[j];
            linear += model_.w[f] * x.values[j];
            for (int t = 0; t < k; ++t) {
                const double v = model_.V(t, f) * x.values[j];
                s[t] += v;
                q += v * v;
            }
        }
        double ss = 0.0;
        for (int t = 0; t < k; ++t) ss += s[t] * s[t];
        pred_[i] = linear + 0.5 * (ss - q);
    }
}

void FmCoordinateSolver::update_bias() {
    if (data_.empty()) return;
    double shift = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) shift += data_.instances[i].target - pred_[i];
    shift /= static_cast<double>(data_.size());
    model_.w0 += shift;
    for (double& p : pred_) p += shift;
}

void FmCoordinateSolver::update_linear(double alpha) {
    for (FeatureId f = 0; f < index_.n_features(); ++f) {
        auto bucket = index_.bucket(f);
        double num = 0.0, den = alpha;
        for (const auto& e : bucket) {
            const double err = data_.instances[e.instance].target - pred_[e.instance];
            num += e.value * (err + model_.w[f] * e.value);
            den += e.value * e.value;
        }
        if (den <= 0.0) continue;
        const double delta = num / den - model_.w[f];
        if (delta == 0.0) continue;
        model_.w[f] += delta;
        for (const auto& e : bucket) pred_[e.instance] += delta * e.value;
    }
}

void FmCoordinateSolver::update_embeddings(double l2, double beta, const Eigen::MatrixXd* delegate,
                                           std::span<const FeatureId> order) {
    const int k = model_.k();
    const bool coupled = beta != 0.0 && delegate != nullptr;
    auto visit = [&](FeatureId f) {
        auto bucket = index_.bucket(f);
        for (int t = 0; t < k; ++t) {
            const double old = model_.V(t, f);
            double num = coupled ? beta * (*delegate)(t, f) : 0.0;
            double den = l2 + beta;
            for (const auto& e : bucket) {
                // prediction is affine in V(t,f) with slope h = x_f * (s_t - x_f V(t,f))
                const double h = e.value * (sums_[e.instance * k + t] - e.value * old);
                const double err = data_.instances[e.instance].target - pred_[e.instance];
                num += h * (err + old * h);
                den += h * h;
            }
            if (den <= 0.0) continue;
            const double delta = num / den - old;
            if (delta == 0.0) continue;
            model_.V(t, f) = old + delta;
            for (const auto& e : bucket) {
                double& s = sums_[e.instance * k + t];
                const double h = e.value * (s - e.value * old);
                pred_[e.instance] += delta * h;
                s += delta * e.value;
            }
        }
    };
    if (order.empty()) {
        for (FeatureId f = 0; f < index_.n_features(); ++f) visit(f);
    } else {
        for (FeatureId f : order) visit(f);
    }
}

double FmCoordinateSolver::squared_error() const {
    double s = 0.0;
    for (std::size_t i = 0; i < data_.size(); ++i) {
        const double e = data_.instances[i].target - pred_[i];
        s += e * e;
    }
    return s;
}

double coupled_objective(const FmModel& m, const Dataset& d, const TrainConfig& cfg, const Eigen::MatrixXd& delegate) {
    return fm_objective(m, d, cfg) + cfg.beta * m.V.squaredNorm() - 2.0 * cfg.beta * m.V.cwiseProduct(delegate).sum();
}

namespace {

void init_embeddings(FmModel& m, double scale, Rng& rng) {
    for (Eigen::Index i = 0; i < m.V.cols(); ++i)
        for (Eigen::Index t = 0; t < m.V.rows(); ++t) m.V(t, i) = uniform(rng, -scale, scale);
}

void sgd_epoch(FmModel& m, const Dataset& d, const TrainConfig& cfg, std::vector<std::size_t>& order, Rng& rng) {
    const int k = m.k();
    const double lr = cfg.sgd_learning_rate;
    std::vector<double> s(k);
    shuffle(order, rng);
    for (std::size_t i : order) {
        const auto& x = d.instances[i];
        const double err = x.target - fm_predict(m, x);
        std::fill(s.begin(), s.end(), 0.0);
        for (std::size_t j = 0; j < x.nnz(); ++j)
            for (int t = 0; t < k; ++t) s[t] += m.V(t, x.indices[j]) * x.values[j];
        m.w0 += lr * err;
        for (std::size_t j = 0; j < x.nnz(); ++j) {
            const FeatureId f = x.indices[j];
            const double xv = x.values[j];
            m.w[f] += lr * (err * xv - cfg.alpha * m.w[f]);
            for (int t = 0; t < k; ++t) {
                const double grad = xv * (s[t] - m.V(t, f) * xv);
                m.V(t, f) += lr * (err * grad - cfg.embedding_l2 * m.V(t, f));
            }
        }
    }
}

}  // namespace

FmModel fm_train(const Dataset& d, const TrainConfig& cfg, FmTrainReport* report, const ProgressFn& progress) {
    if (d.empty()) throw DataError("cannot train on an empty dataset");
    if (cfg.k < 1) throw DataError("k must be at least 1");
    if (cfg.alpha < 0.0 || cfg.beta < 0.0 || cfg.embedding_l2 < 0.0)
        throw DataError("regularization strengths must be non-negative");

    FmModel m(d.n_features, cfg.k);
    Rng rng(cfg.seed);
    init_embeddings(m, cfg.init_scale, rng);

    FmTrainReport local;
    FmTrainReport& rep = report ? *report : local;
    rep = {};

    const FeatureIndex index(d);
    std::vector<std::size_t> order(d.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    FmCoordinateSolver solver(d, index, m);

    double prev = fm_objective(m, d, cfg);
    for (int it = 1; it <= cfg.max_outer_iters; ++it) {
        if (cfg.fm_solver == FmSolver::kSgd) {
            sgd_epoch(m, d, cfg, order, rng);
        } else {
            solver.update_bias();
            solver.update_linear(cfg.alpha);
            solver.update_embeddings(cfg.embedding_l2, 0.0, nullptr);
        }
        const double cur = fm_objective(m, d, cfg);
        if (!std::isfinite(cur)) throw NumericError("objective became non-finite at iteration " + std::to_string(it));
        rep.objective_trace.push_back(cur);
        rep.iterations = it;
        if (progress) progress(it, cur);
        const bool done = cur == 0.0 || std::abs(prev - cur) < cfg.tol * std::abs(prev);
        prev = cur;
        if (done) break;
    }
    return m;
}

namespace {
constexpr std::string_view kFmMagic = "DFMFMMDL";
constexpr std::uint32_t kFmVersion = 1;
}  // namespace

std::string serialize_fm(const FmModel& m) {
    io::Writer w;
    w.bytes(kFmMagic);
    w.u32(kFmVersion);
    w.u64(m.n_features());
    w.u64(static_cast<std::uint64_t>(m.k()));
    w.f64(m.w0);
    w.f64s({m.w.data(), static_cast<std::size_t>(m.w.size())});
    w.f64s({m.V.data(), static_cast<std::size_t>(m.V.size())});
    return w.take();
}

FmModel deserialize_fm(std::string_view bytes) {
    io::Reader r(bytes);
    r.expect(kFmMagic, "FM model");
    if (r.u32() != kFmVersion) throw DataError("unsupported FM model version");
    const std::uint64_t n = r.u64(), k = r.u64();
    if (k == 0 || k > (1u << 16) || n > (std::uint64_t{1} << 40) || r.remaining() != 8 * (1 + n + n * k))
        throw DataError("FM model header inconsistent with file size");
    FmModel m(n, static_cast<int>(k));
    m.w0 = r.f64();
    for (std::uint64_t i = 0; i < n; ++i) m.w[i] = r.f64();
    for (Eigen::Index i = 0; i < m.V.size(); ++i) m.V.data()[i] = r.f64();
    return m;
}

void save_fm(const FmModel& m, const std::string& path) { io::write_file_atomic(path, serialize_fm(m)); }

FmModel load_fm(const std::string& path) { return deserialize_fm(io::read_file(path)); }

}  // namespace dfm
