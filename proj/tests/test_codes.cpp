#include <doctest.h>

#include "dfm/codes.hpp"
#include "dfm/errors.hpp"
#include "dfm/synthetic.hpp"
#include "oracles.hpp"

using namespace dfm;

namespace {

Eigen::MatrixXd random_signs(Rng& rng, Eigen::Index k, Eigen::Index n) {
    Eigen::MatrixXd s(k, n);
    for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = (rng() >> 63) ? 1.0 : -1.0;
    return s;
}

}  // namespace

TEST_CASE("pack encodes +1 as a set bit") {
    const CodeMatrix plus = pack(Eigen::MatrixXd::Ones(8, 1));
    REQUIRE(plus.word_count() == 1);
    CHECK(plus.words()[0] == 0xFFu);
    const CodeMatrix minus = pack(-Eigen::MatrixXd::Ones(8, 1));
    CHECK(minus.words()[0] == 0u);

    Eigen::MatrixXd bad = Eigen::MatrixXd::Ones(4, 2);
    bad(1, 1) = 0.5;
    CHECK_THROWS_AS(pack(bad), DataError);
}

TEST_CASE("pack/unpack round trip and storage size") {
    Rng rng(1);
    for (int k : {1, 7, 8, 63, 64, 65, 100, 128}) {
        const Eigen::MatrixXd s = random_signs(rng, k, 100);
        const CodeMatrix c = pack(s);
        CHECK(c.word_count() == 100 * ((k + 63) / 64));
        CHECK(unpack(c) == s);
        // padding bits stay clear
        const std::uint64_t mask = k % 64 == 0 ? ~0ull : (1ull << (k % 64)) - 1;
        for (FeatureId i = 0; i < 100; ++i) CHECK((c.block(i).back() & ~mask) == 0);
    }
    CHECK_THROWS_AS(CodeMatrix(1, 8, {0x1FFu}), DataError);
    CHECK_THROWS_AS(CodeMatrix(2, 8, {0x1u}), DataError);
}

TEST_CASE("code_dot") {
    Rng rng(2);
    Eigen::MatrixXd s = random_signs(rng, 16, 3);
    s.col(1) = s.col(0);
    s.col(2) = -s.col(0);
    const CodeMatrix c = pack(s);
    CHECK(code_dot(c, 0, 1) == 16);
    CHECK(code_dot(c, 0, 2) == -16);
    CHECK_THROWS_AS(code_dot(c, 0, 3), DataError);

    for (int k : {5, 64, 100}) {
        const Eigen::MatrixXd r = random_signs(rng, k, 40);
        const CodeMatrix cr = pack(r);
        for (FeatureId i = 0; i < 40; ++i) {
            CHECK(code_dot(cr, i, i) == k);
            for (FeatureId j = 0; j < 40; ++j) {
                const int d = code_dot(cr, i, j);
                CHECK(d == static_cast<int>(r.col(i).dot(r.col(j))));
                CHECK(d == code_dot(cr, j, i));
                CHECK((d - k) % 2 == 0);
            }
        }
    }
}

TEST_CASE("dfm_predict examples") {
    DfmModel m;
    m.w = Eigen::VectorXd::Zero(4);
    m.codes = pack(Eigen::MatrixXd::Ones(16, 4));
    CHECK(dfm_predict(m, make_instance({{0, 1.0}, {3, 1.0}}, 0.0)) == 16.0);

    m.w0 = 0.5;
    m.w[2] = 3.0;
    for (auto path : {ScorePath::kAccumulate, ScorePath::kPairwise, ScorePath::kAuto})
        CHECK(dfm_predict(m, make_instance({{2, 2.0}}, 0.0), path) == 6.5);
    CHECK_THROWS_AS(dfm_predict(m, make_instance({{4, 1.0}}, 0.0)), DataError);
}

TEST_CASE("dfm_predict paths agree with the unpacked double loop") {
    Rng rng(3);
    for (int rep = 0; rep < 200; ++rep) {
        const std::size_t n = 2 + uniform_index(rng, 29);
        const int k = rep % 3 == 0 ? 8 : rep % 3 == 1 ? 64 : 1 + static_cast<int>(uniform_index(rng, 150));
        const DfmModel m = make_random_dfm(n, k, rng());
        const SparseInstance x = oracle::random_instance(rng, n, 1 + uniform_index(rng, std::min<std::size_t>(n, 10)));
        const double brute = oracle::dfm_brute(m.w0, m.w, unpack(m.codes), x);
        CHECK(std::abs(dfm_predict(m, x, ScorePath::kAccumulate) - brute) <= 1e-9);
        CHECK(std::abs(dfm_predict(m, x, ScorePath::kPairwise) - brute) <= 1e-9);
        CHECK(std::abs(dfm_predict(m, x, ScorePath::kAuto) - brute) <= 1e-9);
    }
    const DfmModel m = make_random_dfm(30, 32, 17);
    const SparseInstance x6 = oracle::random_instance(rng, 30, 6);
    CHECK(std::abs(dfm_predict(m, x6) - oracle::dfm_brute(m.w0, m.w, unpack(m.codes), x6)) <= 1e-9);
}

TEST_CASE("score_items reuses the context") {
    Rng rng(4);
    const DfmModel m = make_random_dfm(200, 24, 5);
    const SparseInstance ctx = make_instance({{3, 1.0}, {10, 0.5}, {40, -1.5}}, 0.0);

    std::vector<SparseInstance> one = {make_instance({{100, 1.0}}, 0.0)};
    CHECK(score_items(m, ctx, one)[0] == doctest::Approx(dfm_predict(m, merge_instances(ctx, one[0]))).epsilon(1e-14));

    std::vector<SparseInstance> twins = {one[0], one[0]};
    const auto tw = score_items(m, ctx, twins);
    CHECK(tw[0] == tw[1]);

    std::vector<SparseInstance> items;
    for (int i = 0; i < 50; ++i) {
        std::vector<std::pair<FeatureId, double>> e = {{static_cast<FeatureId>(100 + i), 1.0}};
        if (i % 3 == 0) e.emplace_back(static_cast<FeatureId>(150 + i), uniform(rng, 0.1, 1.0));
        items.push_back(make_instance(e, 0.0));
    }
    const auto scores = score_items(m, ctx, items);
    for (std::size_t i = 0; i < items.size(); ++i)
        CHECK(std::abs(scores[i] - dfm_predict(m, merge_instances(ctx, items[i]))) <= 1e-9);

    std::vector<SparseInstance> clash = {make_instance({{10, 1.0}}, 0.0)};
    CHECK_THROWS_AS(score_items(m, ctx, clash), DataError);
    CHECK_THROWS_AS(merge_instances(ctx, clash[0]), DataError);
}

TEST_CASE("dfm model container round trip") {
    for (std::uint64_t s = 0; s < 10; ++s) {
        const DfmModel m = make_random_dfm(2 + s * 11, 1 + static_cast<int>(s) * 15, s);
        const std::string bytes = serialize_dfm(m);
        CHECK(bytes.size() == 8 + 4 + 16 + 8 * (1 + m.n_features() + m.codes.word_count()));
        const DfmModel back = deserialize_dfm(bytes);
        CHECK(back == m);
        CHECK(serialize_dfm(back) == bytes);
    }
    const std::string bytes = serialize_dfm(make_random_dfm(4, 8, 0));
    CHECK_THROWS_AS(deserialize_dfm(bytes.substr(0, bytes.size() - 3)), DataError);
    CHECK_THROWS_AS(deserialize_dfm(bytes + "x"), DataError);
}
