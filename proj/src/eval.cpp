#include "dfm/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>
#include <thread>

#include "dfm/errors.hpp"
#include "dfm/optimizer.hpp"

namespace dfm {

std::size_t RankingRun::max_list_length() const {
    std::size_t m = 0;
    for (const auto& l : lists) m = std::max(m, l.size());
    return m;
}

namespace {

double dcg(const std::vector<RankedItem>& ranked, std::size_t K) {
    double s = 0.0;
    for (std::size_t p = 0; p < std::min(K, ranked.size()); ++p)
        s += (std::exp2(ranked[p].rating) - 1.0) / std::log2(static_cast<double>(p) + 2.0);
    return s;
}

}  // namespace

NdcgResult ndcg_at_k(const RankingRun& run, int K) {
    if (K < 1) throw DataError("NDCG cutoff must be at least 1");
    NdcgResult out;
    out.per_user.reserve(run.lists.size());
    for (const auto& list : run.lists) {
        std::vector<RankedItem> by_score = list;
        std::sort(by_score.begin(), by_score.end(), [](const RankedItem& a, const RankedItem& b) {
            return a.score != b.score ? a.score > b.score : a.item < b.item;
        });
        std::vector<RankedItem> ideal = list;
        std::sort(ideal.begin(), ideal.end(),
                  [](const RankedItem& a, const RankedItem& b) { return a.rating > b.rating; });
        const double idcg = dcg(ideal, static_cast<std::size_t>(K));
        out.per_user.push_back(idcg == 0.0 ? 1.0 : dcg(by_score, static_cast<std::size_t>(K)) / idcg);
    }
    if (!out.per_user.empty()) {
        double s = 0.0;
        for (double v : out.per_user) s += v;
        out.mean = s / static_cast<double>(out.per_user.size());
    }
    return out;
}

RankingRun make_ranking_run(const Dataset& test, const Scorer& score) {
    if (!test.user_field || !test.item_field) throw DataError("ranking needs declared user and item fields");
    std::map<FeatureId, std::vector<RankedItem>> by_user;
    for (const auto& x : test.instances) {
        auto u = field_member(x, *test.user_field);
        auto i = field_member(x, *test.item_field);
        if (!u || !i) throw DataError("test instance without user or item id");
        by_user[*u].push_back({*i, score(x), x.target});
    }
    RankingRun run;
    for (auto& [u, list] : by_user) {
        run.users.push_back(u);
        run.lists.push_back(std::move(list));
    }
    return run;
}

RankingRun make_ranking_run(const Dataset& test, const FmModel& m) {
    return make_ranking_run(test, [&](const SparseInstance& x) { return fm_predict(m, x); });
}

RankingRun make_ranking_run(const Dataset& test, const DfmModel& m) {
    return make_ranking_run(test, [&](const SparseInstance& x) { return dfm_predict(m, x); });
}

namespace {

using Clock = std::chrono::steady_clock;

// Instance ids grouped by user, prepared outside the timed region.
std::vector<std::vector<std::size_t>> user_groups(const Dataset& test) {
    std::vector<std::vector<std::size_t>> groups;
    if (!test.user_field || !test.item_field) return groups;
    std::map<FeatureId, std::size_t> slot;
    for (std::size_t i = 0; i < test.size(); ++i) {
        auto u = field_member(test.instances[i], *test.user_field);
        if (!u) continue;
        auto [it, inserted] = slot.try_emplace(*u, groups.size());
        if (inserted) groups.emplace_back();
        groups[it->second].push_back(i);
    }
    return groups;
}

template <typename ScoreFn>
double time_pass(const Dataset& test, const ScoreFn& score, int threads, std::vector<double>& scores,
                 std::vector<std::vector<std::size_t>>& groups) {
    const auto start = Clock::now();
    const std::size_t n = test.size();
    if (threads <= 1) {
        for (std::size_t i = 0; i < n; ++i) scores[i] = score(test.instances[i]);
    } else {
        std::vector<std::thread> pool;
        const std::size_t chunk = (n + threads - 1) / threads;
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                const std::size_t lo = t * chunk, hi = std::min(n, lo + chunk);
                for (std::size_t i = lo; i < hi; ++i) scores[i] = score(test.instances[i]);
            });
        }
        for (auto& th : pool) th.join();
    }
    for (auto& g : groups)
        std::sort(g.begin(), g.end(), [&](std::size_t a, std::size_t b) {
            return scores[a] != scores[b] ? scores[a] > scores[b] : a < b;
        });
    return std::chrono::duration<double>(Clock::now() - start).count();
}

template <typename ScoreFn>
double best_time(const Dataset& test, const ScoreFn& score, const TtcOptions& opts) {
    std::vector<double> scores(test.size());
    auto groups = user_groups(test);
    time_pass(test, score, opts.threads, scores, groups);  // warm-up
    double best = std::numeric_limits<double>::infinity();
    for (int r = 0; r < std::max(1, opts.repetitions); ++r)
        best = std::min(best, time_pass(test, score, opts.threads, scores, groups));
    return best;
}

}  // namespace

double time_scoring(const Dataset& test, const Scorer& score, const TtcOptions& opts) {
    return best_time(test, score, opts);
}

BenchReport measure_ttc(const FmModel& fm, const DfmModel& dfm, const Dataset& test, const TtcOptions& opts) {
    if (test.empty()) throw DataError("cannot benchmark an empty test set");
    if (fm.k() != dfm.k() || fm.n_features() != dfm.n_features())
        throw DataError("float and binary models have different shapes");

    BenchReport rep;
    rep.k = dfm.k();
    rep.n_features = test.n_features;
    rep.repetitions = std::max(1, opts.repetitions);
    rep.threads = std::max(1, opts.threads);
    for (const auto& x : test.instances) {
        rep.mean_nnz += static_cast<double>(x.nnz());
        rep.max_nnz = std::max(rep.max_nnz, x.nnz());
    }
    rep.mean_nnz /= static_cast<double>(test.size());

    rep.ttc_float = best_time(test, [&](const SparseInstance& x) { return fm_predict(fm, x); }, opts);
    rep.float_instances = test.size();
    rep.ttc_binary =
        best_time(test, [&](const SparseInstance& x) { return dfm_predict(dfm, x, opts.binary_path); }, opts);
    rep.binary_instances = test.size();
    rep.acceleration_ratio = rep.ttc_float / rep.ttc_binary;
    return rep;
}

std::vector<GridRow> eval_grid(const Dataset& train, const Dataset& test, const std::vector<GridCell>& cells,
                               const TrainConfig& base) {
    if (cells.empty()) throw DataError("empty hyperparameter grid");
    std::vector<GridRow> rows;
    for (const auto& cell : cells) {
        GridRow row;
        row.beta = cell.beta;
        row.k = cell.k;
        try {
            TrainConfig cfg = base;
            cfg.beta = cell.beta;
            cfg.k = cell.k;
            const DfmModel m = train_dfm(train, cfg);
            const RankingRun run = make_ranking_run(test, m);
            for (int K = 1; K <= 10; ++K) row.ndcg.push_back(ndcg_at_k(run, K).mean);
            row.ok = true;
        } catch (const std::exception& e) {
            row.error = e.what();
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

namespace {

std::string g6(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

}  // namespace

std::string grid_csv(const std::vector<GridRow>& rows) {
    std::ostringstream out;
    out << "beta,k,status";
    for (int K = 1; K <= 10; ++K) out << ",ndcg@" << K;
    out << '\n';
    for (const auto& r : rows) {
        out << g6(r.beta) << ',' << r.k << ',' << (r.ok ? "ok" : "failed");
        for (int K = 0; K < 10; ++K) out << ',' << (r.ok ? g6(r.ndcg[K]) : "");
        out << '\n';
    }
    return out.str();
}

std::string bench_table(const std::vector<BenchReport>& reports) {
    std::ostringstream out;
    char buf[64];
    auto cell = [&](const char* fmt, double v) {
        std::snprintf(buf, sizeof buf, fmt, v);
        out << buf;
    };
    out << "Testing time cost (seconds, best of repetitions)\n";
    out << "                        ";
    for (const auto& r : reports) {
        std::snprintf(buf, sizeof buf, "%12s", ("k=" + std::to_string(r.k)).c_str());
        out << buf;
    }
    out << "\nTTC float FM            ";
    for (const auto& r : reports) cell("%12.6f", r.ttc_float);
    out << "\nTTC binary DFM          ";
    for (const auto& r : reports) cell("%12.6f", r.ttc_binary);
    out << "\nAcceleration ratio      ";
    for (const auto& r : reports) cell("%12.2f", r.acceleration_ratio);
    out << "\nReference ratio         ";
    for (const auto& r : reports) {
        const int slot = r.k == 8 ? 0 : r.k == 16 ? 1 : r.k == 32 ? 2 : r.k == 64 ? 3 : -1;
        if (slot < 0) {
            std::snprintf(buf, sizeof buf, "%12s", "-");
            out << buf;
        } else {
            cell("%12.2f", kReferenceRatios[slot]);
        }
    }
    out << "\n\n";
    if (!reports.empty()) {
        const auto& r = reports.front();
        std::snprintf(buf, sizeof buf, "%.2f", r.mean_nnz);
        out << "instances: " << r.float_instances << "  features: " << r.n_features << "  mean nnz: " << buf
            << "  max nnz: " << r.max_nnz << "  threads: " << r.threads << '\n';
    }
    out << "Reference ratios (13.19-17.51) were published for a different implementation pair\n"
           "and machine; they are context for the measured ratio, not a target.\n";
    return out.str();
}

}  // namespace dfm
