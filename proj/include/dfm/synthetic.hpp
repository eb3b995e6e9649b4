#pragma once

#include <cstdint>

#include "dfm/codes.hpp"
#include "dfm/data.hpp"
#include "dfm/fm.hpp"
#include "dfm/rng.hpp"

namespace dfm {

double standard_normal(Rng& rng);

// Ratings generated by a planted binary model over one-hot users and items:
//   y = base + value^2 <b_u, b_i> + N(0, noise^2)
// where every nonzero feature value equals `value`. Users occupy features
// [0, n_users), items [n_users, n_users + n_items).
struct PlantedConfig {
    std::size_t n_users = 25;
    std::size_t n_items = 25;
    int k = 8;
    double base = 3.0;
    double value = 0.5;
    double noise = 0.1;
    std::uint64_t seed = 1;
};

struct PlantedData {
    CodeMatrix codes;  // the generator's codes; user and item rows only
    Dataset data;
};

// `ratings_per_user` distinct items for every user.
PlantedData make_planted_ratings(const PlantedConfig& cfg, std::size_t ratings_per_user);

// `count` (user, item) pairs drawn uniformly with replacement from the same
// generator as `planted`.
Dataset sample_planted(const PlantedConfig& cfg, const CodeMatrix& codes, std::size_t count, std::uint64_t seed);

// Random instances with `nnz` distinct features each and values in (0, 1].
Dataset make_random_sparse(std::size_t n_features, std::size_t nnz, std::size_t count, std::uint64_t seed);

FmModel make_random_fm(std::size_t n_features, int k, std::uint64_t seed);
DfmModel make_random_dfm(std::size_t n_features, int k, std::uint64_t seed);
CodeMatrix make_random_codes(std::size_t n_features, int k, Rng& rng);

}  // namespace dfm
