#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dfm/data.hpp"

namespace dfm {

// Bit-packed B in {+1,-1}^{k x n}. Feature i owns words_per_feature()
// contiguous words; bit t of the block is 1 for b_it = +1 and 0 for -1.
// Bits past k in the last word of a block are always zero.
class CodeMatrix {
public:
    CodeMatrix() = default;
    // All entries -1.
    CodeMatrix(std::size_t n_features, int k);
    CodeMatrix(std::size_t n_features, int k, std::vector<std::uint64_t> words);

    std::size_t n_features() const { return n_; }
    int k() const { return k_; }
    std::size_t words_per_feature() const { return wpf_; }
    std::size_t word_count() const { return words_.size(); }
    std::span<const std::uint64_t> words() const { return words_; }

    std::span<const std::uint64_t> block(FeatureId i) const { return {words_.data() + i * wpf_, wpf_}; }

    int sign(FeatureId i, int t) const { return (words_[i * wpf_ + t / 64] >> (t % 64)) & 1u ? 1 : -1; }
    void set_sign(FeatureId i, int t, int s) {
        const std::uint64_t mask = std::uint64_t{1} << (t % 64);
        auto& w = words_[i * wpf_ + t / 64];
        w = s > 0 ? (w | mask) : (w & ~mask);
    }

    bool operator==(const CodeMatrix&) const = default;

private:
    std::size_t n_ = 0;
    int k_ = 0;
    std::size_t wpf_ = 0;
    std::vector<std::uint64_t> words_;
};

// `signs` is k x n with entries exactly +1 or -1; throws DataError otherwise.
CodeMatrix pack(const Eigen::MatrixXd& signs);
Eigen::MatrixXd unpack(const CodeMatrix& codes);

// <b_i, b_j> = k - 2 popcount(b_i xor b_j).
int code_dot(const CodeMatrix& codes, FeatureId i, FeatureId j);

struct DfmModel {
    double w0 = 0.0;
    Eigen::VectorXd w;
    CodeMatrix codes;

    std::size_t n_features() const { return codes.n_features(); }
    int k() const { return codes.k(); }
    bool operator==(const DfmModel& o) const { return w0 == o.w0 && w == o.w && codes == o.codes; }
};

enum class ScorePath {
    kAccumulate,  // per-bit sums s_t, O(k nnz)
    kPairwise,    // popcount over all feature pairs, O(nnz^2 k / 64)
    kAuto,        // whichever of the two is cheaper for this nnz and k
};

double dfm_predict(const DfmModel& m, const SparseInstance& x, ScorePath path = ScorePath::kAccumulate);

// Union of two instances with disjoint supports; throws DataError on overlap.
SparseInstance merge_instances(const SparseInstance& a, const SparseInstance& b);

// scores[i] == dfm_predict(m, merge(context, candidates[i])). The context's
// bit sums are computed once.
std::vector<double> score_items(const DfmModel& m, const SparseInstance& context,
                                std::span<const SparseInstance> candidates);

// Binary container: "DFMBINMD", u32 version, u64 n, u64 k, f64 w0,
// f64 w[n], u64 code words; all little-endian.
std::string serialize_dfm(const DfmModel& m);
DfmModel deserialize_dfm(std::string_view bytes);
void save_dfm(const DfmModel& m, const std::string& path);
DfmModel load_dfm(const std::string& path);

}  // namespace dfm
