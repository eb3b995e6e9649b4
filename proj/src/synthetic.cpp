#include "dfm/synthetic.hpp"

#include <cmath>
#include <numbers>
#include <numeric>
#include <unordered_set>

namespace dfm {

double standard_normal(Rng& rng) {
    // Box-Muller; 1 - u keeps the log argument in (0, 1]
    const double u = 1.0 - uniform01(rng);
    const double v = uniform01(rng);
    return std::sqrt(-2.0 * std::log(u)) * std::cos(2.0 * std::numbers::pi * v);
}

CodeMatrix make_random_codes(std::size_t n_features, int k, Rng& rng) {
    CodeMatrix c(n_features, k);
    for (std::size_t i = 0; i < n_features; ++i)
        for (int t = 0; t < k; ++t) c.set_sign(static_cast<FeatureId>(i), t, (rng() >> 63) ? 1 : -1);
    return c;
}

namespace {

// Keeps generator streams apart from training streams that share a seed value.
std::uint64_t generator_seed(std::uint64_t seed) { return seed ^ 0x6a09e667f3bcc909ull; }

SparseInstance planted_instance(const PlantedConfig& cfg, const CodeMatrix& codes, std::size_t user, std::size_t item,
                                Rng& rng) {
    const auto u = static_cast<FeatureId>(user);
    const auto i = static_cast<FeatureId>(cfg.n_users + item);
    SparseInstance x;
    x.indices = {u, i};
    x.values = {cfg.value, cfg.value};
    x.target = cfg.base + cfg.value * cfg.value * code_dot(codes, u, i) + cfg.noise * standard_normal(rng);
    return x;
}

Dataset empty_planted(const PlantedConfig& cfg) {
    Dataset d;
    d.n_features = cfg.n_users + cfg.n_items;
    d.user_field = FieldRange{0, static_cast<FeatureId>(cfg.n_users)};
    d.item_field = FieldRange{static_cast<FeatureId>(cfg.n_users), static_cast<FeatureId>(cfg.n_items)};
    return d;
}

}  // namespace

PlantedData make_planted_ratings(const PlantedConfig& cfg, std::size_t ratings_per_user) {
    Rng rng(generator_seed(cfg.seed));
    PlantedData out;
    out.codes = make_random_codes(cfg.n_users + cfg.n_items, cfg.k, rng);
    out.data = empty_planted(cfg);
    std::vector<std::size_t> items(cfg.n_items);
    for (std::size_t u = 0; u < cfg.n_users; ++u) {
        std::iota(items.begin(), items.end(), std::size_t{0});
        shuffle(items, rng);
        for (std::size_t j = 0; j < std::min(ratings_per_user, cfg.n_items); ++j)
            out.data.instances.push_back(planted_instance(cfg, out.codes, u, items[j], rng));
    }
    return out;
}

Dataset sample_planted(const PlantedConfig& cfg, const CodeMatrix& codes, std::size_t count, std::uint64_t seed) {
    Rng rng(generator_seed(seed));
    Dataset d = empty_planted(cfg);
    for (std::size_t n = 0; n < count; ++n) {
        const std::size_t u = uniform_index(rng, cfg.n_users);
        const std::size_t i = uniform_index(rng, cfg.n_items);
        d.instances.push_back(planted_instance(cfg, codes, u, i, rng));
    }
    return d;
}

Dataset make_random_sparse(std::size_t n_features, std::size_t nnz, std::size_t count, std::uint64_t seed) {
    Rng rng(seed);
    Dataset d;
    d.n_features = n_features;
    std::unordered_set<FeatureId> used;
    std::vector<std::pair<FeatureId, double>> entries;
    for (std::size_t n = 0; n < count; ++n) {
        used.clear();
        entries.clear();
        while (entries.size() < std::min(nnz, n_features)) {
            const auto f = static_cast<FeatureId>(uniform_index(rng, n_features));
            if (!used.insert(f).second) continue;
            entries.emplace_back(f, 1.0 - uniform01(rng));
        }
        d.instances.push_back(make_instance(entries, uniform(rng, 1.0, 5.0)));
    }
    return d;
}

FmModel make_random_fm(std::size_t n_features, int k, std::uint64_t seed) {
    Rng rng(seed);
    FmModel m(n_features, k);
    m.w0 = uniform(rng, -1.0, 1.0);
    for (Eigen::Index i = 0; i < m.w.size(); ++i) m.w[i] = uniform(rng, -1.0, 1.0);
    for (Eigen::Index i = 0; i < m.V.size(); ++i) m.V.data()[i] = uniform(rng, -1.0, 1.0);
    return m;
}

DfmModel make_random_dfm(std::size_t n_features, int k, std::uint64_t seed) {
    Rng rng(seed);
    DfmModel m;
    m.w0 = uniform(rng, -1.0, 1.0);
    m.w.resize(static_cast<Eigen::Index>(n_features));
    for (Eigen::Index i = 0; i < m.w.size(); ++i) m.w[i] = uniform(rng, -1.0, 1.0);
    m.codes = make_random_codes(n_features, k, rng);
    return m;
}

}  // namespace dfm
