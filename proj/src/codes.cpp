#include "dfm/codes.hpp"

#include <bit>

#include "dfm/binary_io.hpp"
#include "dfm/errors.hpp"

namespace dfm {

namespace {

std::size_t words_for(int k) { return (static_cast<std::size_t>(k) + 63) / 64; }

std::uint64_t tail_mask(int k) {
    const int rem = k % 64;
    return rem == 0 ? ~std::uint64_t{0} : (std::uint64_t{1} << rem) - 1;
}

void check_indices(const SparseInstance& x, std::size_t n) {
    if (!x.indices.empty() && x.indices.back() >= n)
        throw DataError("feature index " + std::to_string(x.indices.back()) + " out of range for model with " +
                        std::to_string(n) + " features");
}

}  // namespace

CodeMatrix::CodeMatrix(std::size_t n_features, int k)
    : n_(n_features), k_(k), wpf_(words_for(k)), words_(n_features * wpf_, 0) {
    if (k < 1) throw DataError("code length must be at least 1");
}

CodeMatrix::CodeMatrix(std::size_t n_features, int k, std::vector<std::uint64_t> words)
    : n_(n_features), k_(k), wpf_(words_for(k)), words_(std::move(words)) {
    if (k < 1) throw DataError("code length must be at least 1");
    if (words_.size() != n_ * wpf_) throw DataError("code word count does not match n and k");
    const std::uint64_t mask = tail_mask(k);
    for (std::size_t i = 0; i < n_; ++i)
        if (words_[i * wpf_ + wpf_ - 1] & ~mask) throw DataError("nonzero padding bits in code block");
}

CodeMatrix pack(const Eigen::MatrixXd& signs) {
    CodeMatrix c(static_cast<std::size_t>(signs.cols()), static_cast<int>(signs.rows()));
    for (Eigen::Index i = 0; i < signs.cols(); ++i) {
        for (Eigen::Index t = 0; t < signs.rows(); ++t) {
            const double v = signs(t, i);
            if (v != 1.0 && v != -1.0) throw DataError("code entry is not +1 or -1");
            c.set_sign(static_cast<FeatureId>(i), static_cast<int>(t), v > 0 ? 1 : -1);
        }
    }
    return c;
}

Eigen::MatrixXd unpack(const CodeMatrix& codes) {
    Eigen::MatrixXd out(codes.k(), static_cast<Eigen::Index>(codes.n_features()));
    for (std::size_t i = 0; i < codes.n_features(); ++i)
        for (int t = 0; t < codes.k(); ++t) out(t, i) = codes.sign(static_cast<FeatureId>(i), t);
    return out;
}

namespace {

inline int dot_unchecked(const CodeMatrix& c, FeatureId i, FeatureId j) {
    const std::uint64_t* a = c.words().data() + i * c.words_per_feature();
    const std::uint64_t* b = c.words().data() + j * c.words_per_feature();
    int diff = 0;
    for (std::size_t w = 0; w < c.words_per_feature(); ++w) diff += std::popcount(a[w] ^ b[w]);
    return c.k() - 2 * diff;
}

// Sum over set bits: c_t += x. Then s_t = 2 c_t - sum(x).
inline void add_set_bits(const CodeMatrix& codes, FeatureId f, double x, double* counts) {
    const std::uint64_t* blk = codes.words().data() + f * codes.words_per_feature();
    for (std::size_t w = 0; w < codes.words_per_feature(); ++w) {
        std::uint64_t bits = blk[w];
        double* c = counts + 64 * w;
        while (bits) {
            c[std::countr_zero(bits)] += x;
            bits &= bits - 1;
        }
    }
}

// Scratch sized for k bits, reused across calls on the same thread.
double* scratch(int k) {
    thread_local std::vector<double> buf;
    if (buf.size() < static_cast<std::size_t>(k)) buf.resize(k);
    std::fill_n(buf.begin(), k, 0.0);
    return buf.data();
}

}  // namespace

int code_dot(const CodeMatrix& codes, FeatureId i, FeatureId j) {
    if (i >= codes.n_features() || j >= codes.n_features()) throw DataError("feature id out of range in code_dot");
    return dot_unchecked(codes, i, j);
}

double dfm_predict(const DfmModel& m, const SparseInstance& x, ScorePath path) {
    check_indices(x, m.n_features());
    double linear = m.w0;
    for (std::size_t j = 0; j < x.nnz(); ++j) linear += m.w[x.indices[j]] * x.values[j];

    const int k = m.k();
    if (path == ScorePath::kAuto)
        path = (x.nnz() * m.codes.words_per_feature() <= static_cast<std::size_t>(k)) ? ScorePath::kPairwise
                                                                                      : ScorePath::kAccumulate;
    if (path == ScorePath::kPairwise) {
        double pairwise = 0.0;
        for (std::size_t a = 0; a < x.nnz(); ++a) {
            double row = 0.0;
            for (std::size_t b = a + 1; b < x.nnz(); ++b)
                row += x.values[b] * dot_unchecked(m.codes, x.indices[a], x.indices[b]);
            pairwise += x.values[a] * row;
        }
        return linear + pairwise;
    }

    double* counts = scratch(k);
    double sum = 0.0, sq = 0.0;
    for (std::size_t j = 0; j < x.nnz(); ++j) {
        add_set_bits(m.codes, x.indices[j], x.values[j], counts);
        sum += x.values[j];
        sq += x.values[j] * x.values[j];
    }
    double ss = 0.0;
    for (int t = 0; t < k; ++t) {
        const double s = 2.0 * counts[t] - sum;
        ss += s * s;
    }
    return linear + 0.5 * (ss - k * sq);
}

SparseInstance merge_instances(const SparseInstance& a, const SparseInstance& b) {
    SparseInstance out;
    out.target = a.target;
    out.indices.reserve(a.nnz() + b.nnz());
    out.values.reserve(a.nnz() + b.nnz());
    std::size_t i = 0, j = 0;
    while (i < a.nnz() || j < b.nnz()) {
        if (j == b.nnz() || (i < a.nnz() && a.indices[i] < b.indices[j])) {
            out.indices.push_back(a.indices[i]);
            out.values.push_back(a.values[i++]);
        } else if (i == a.nnz() || b.indices[j] < a.indices[i]) {
            out.indices.push_back(b.indices[j]);
            out.values.push_back(b.values[j++]);
        } else {
            throw DataError("feature " + std::to_string(a.indices[i]) + " present in both context and item");
        }
    }
    return out;
}

std::vector<double> score_items(const DfmModel& m, const SparseInstance& context,
                                std::span<const SparseInstance> candidates) {
    check_indices(context, m.n_features());
    const int k = m.k();
    std::vector<double> ctx_counts(k, 0.0);
    double ctx_linear = m.w0, ctx_sum = 0.0, ctx_sq = 0.0;
    for (std::size_t j = 0; j < context.nnz(); ++j) {
        add_set_bits(m.codes, context.indices[j], context.values[j], ctx_counts.data());
        ctx_linear += m.w[context.indices[j]] * context.values[j];
        ctx_sum += context.values[j];
        ctx_sq += context.values[j] * context.values[j];
    }

    std::vector<double> scores;
    scores.reserve(candidates.size());
    std::vector<double> counts(k);
    for (const auto& item : candidates) {
        check_indices(item, m.n_features());
        // both supports are sorted, so a merge scan detects overlap
        for (std::size_t i = 0, j = 0; i < context.nnz() && j < item.nnz();) {
            if (context.indices[i] == item.indices[j])
                throw DataError("feature " + std::to_string(item.indices[j]) + " present in both context and item");
            context.indices[i] < item.indices[j] ? ++i : ++j;
        }
        std::copy(ctx_counts.begin(), ctx_counts.end(), counts.begin());
        double linear = ctx_linear, sum = ctx_sum, sq = ctx_sq;
        for (std::size_t j = 0; j < item.nnz(); ++j) {
            add_set_bits(m.codes, item.indices[j], item.values[j], counts.data());
            linear += m.w[item.indices[j]] * item.values[j];
            sum += item.values[j];
            sq += item.values[j] * item.values[j];
        }
        double ss = 0.0;
        for (int t = 0; t < k; ++t) {
            const double s = 2.0 * counts[t] - sum;
            ss += s * s;
        }
        scores.push_back(linear + 0.5 * (ss - k * sq));
    }
    return scores;
}

namespace {
constexpr std::string_view kDfmMagic = "DFMBINMD";
constexpr std::uint32_t kDfmVersion = 1;
}  // namespace

std::string serialize_dfm(const DfmModel& m) {
    io::Writer w;
    w.bytes(kDfmMagic);
    w.u32(kDfmVersion);
    w.u64(m.n_features());
    w.u64(static_cast<std::uint64_t>(m.k()));
    w.f64(m.w0);
    w.f64s({m.w.data(), static_cast<std::size_t>(m.w.size())});
    for (std::uint64_t word : m.codes.words()) w.u64(word);
    return w.take();
}

DfmModel deserialize_dfm(std::string_view bytes) {
    io::Reader r(bytes);
    r.expect(kDfmMagic, "DFM model");
    if (r.u32() != kDfmVersion) throw DataError("unsupported DFM model version");
    const std::uint64_t n = r.u64(), k = r.u64();
    if (k == 0 || k > (1u << 16) || n > (std::uint64_t{1} << 40) ||
        r.remaining() != 8 * (1 + n + n * words_for(static_cast<int>(k))))
        throw DataError("DFM model header inconsistent with file size");
    DfmModel m;
    m.w0 = r.f64();
    m.w.resize(static_cast<Eigen::Index>(n));
    for (std::uint64_t i = 0; i < n; ++i) m.w[i] = r.f64();
    std::vector<std::uint64_t> words(n * words_for(static_cast<int>(k)));
    for (auto& word : words) word = r.u64();
    m.codes = CodeMatrix(n, static_cast<int>(k), std::move(words));
    return m;
}

void save_dfm(const DfmModel& m, const std::string& path) { io::write_file_atomic(path, serialize_dfm(m)); }

DfmModel load_dfm(const std::string& path) { return deserialize_dfm(io::read_file(path)); }

}  // namespace dfm
