#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "dfm/codes.hpp"
#include "dfm/data.hpp"
#include "dfm/fm.hpp"

namespace dfm {

struct RankedItem {
    FeatureId item;
    double score;
    double rating;
};

// One list of test items per user.
struct RankingRun {
    std::vector<FeatureId> users;
    std::vector<std::vector<RankedItem>> lists;

    std::size_t max_list_length() const;
};

struct NdcgResult {
    std::vector<double> per_user;
    double mean = 0.0;
};

// Gain 2^rating - 1, discount 1 / log2(rank + 1). Items are ranked by score
// descending with ties broken by ascending item id; lists shorter than K
// contribute all of their items. A user whose ideal DCG is zero scores 1.
// Throws DataError for K < 1.
NdcgResult ndcg_at_k(const RankingRun& run, int K);

using Scorer = std::function<double(const SparseInstance&)>;

// Groups a test set with declared user and item fields into per-user lists.
RankingRun make_ranking_run(const Dataset& test, const Scorer& score);
RankingRun make_ranking_run(const Dataset& test, const FmModel& m);
RankingRun make_ranking_run(const Dataset& test, const DfmModel& m);

struct BenchReport {
    int k = 0;
    double ttc_float = 0.0;   // seconds, best of repetitions
    double ttc_binary = 0.0;
    double acceleration_ratio = 0.0;
    std::size_t float_instances = 0;
    std::size_t binary_instances = 0;
    std::size_t n_features = 0;
    double mean_nnz = 0.0;
    std::size_t max_nnz = 0;
    int repetitions = 0;
    int threads = 1;
};

struct TtcOptions {
    int repetitions = 3;
    int threads = 1;
    ScorePath binary_path = ScorePath::kAuto;
};

// Wall-clock time to score every test instance (and rank per user when the
// test set has user and item fields), after one warm-up pass, best of
// `repetitions`. Both models see the same instance stream.
BenchReport measure_ttc(const FmModel& fm, const DfmModel& dfm, const Dataset& test, const TtcOptions& opts = {});

// Times one model alone; used for the self-consistency check.
double time_scoring(const Dataset& test, const Scorer& score, const TtcOptions& opts = {});

struct GridCell {
    double beta;
    int k;
};

struct GridRow {
    double beta = 0.0;
    int k = 0;
    bool ok = false;
    std::string error;
    std::vector<double> ndcg;  // K = 1..10
};

// Trains one DFM per cell with `base` overridden by the cell's beta and k.
// A failing cell is reported and the sweep continues.
std::vector<GridRow> eval_grid(const Dataset& train, const Dataset& test, const std::vector<GridCell>& cells,
                               const TrainConfig& base);

std::string grid_csv(const std::vector<GridRow>& rows);

// Published binary-vs-float acceleration ratios for k = 8, 16, 32, 64. They
// were measured with a different implementation pair on a different machine.
inline constexpr double kReferenceRatios[4] = {13.19, 15.95, 17.29, 17.51};

// Plain-text table: code lengths as columns, TTC rows and the ratio row.
std::string bench_table(const std::vector<BenchReport>& reports);

}  // namespace dfm
