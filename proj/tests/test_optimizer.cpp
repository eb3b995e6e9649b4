#include <doctest.h>

#include <algorithm>
#include <array>
#include <cmath>

#include "dfm/delegate.hpp"
#include "dfm/errors.hpp"
#include "dfm/optimizer.hpp"
#include "dfm/synthetic.hpp"
#include "oracles.hpp"

using namespace dfm;

namespace {

// Random state over a random dataset; the delegate is feasible.
OptState random_state(const Dataset& d, int k, Rng& rng) {
    const auto n = static_cast<Eigen::Index>(d.n_features);
    Eigen::VectorXd w(n);
    for (Eigen::Index i = 0; i < n; ++i) w[i] = uniform(rng, -0.5, 0.5);
    return make_state(d, make_random_codes(d.n_features, k, rng), oracle::random_feasible_delegate(k, n, rng),
                      uniform(rng, -1.0, 1.0), w);
}

double brute_objective(const OptState& s, const Dataset& d, const TrainConfig& cfg) {
    return oracle::soft_objective_brute(unpack(s.codes), s.delegate, s.w0, s.w, d, cfg.alpha, cfg.beta);
}

double rmse(const DfmModel& m, const Dataset& d) {
    double s = 0.0;
    for (const auto& x : d.instances) s += std::pow(x.target - dfm_predict(m, x), 2);
    return std::sqrt(s / static_cast<double>(d.size()));
}

// Rows of the 8 x 8 Sylvester Hadamard matrix other than the all-ones row
// are balanced and mutually orthogonal.
Eigen::MatrixXd hadamard_rows(int k) {
    Eigen::MatrixXd h(8, 8);
    for (int i = 0; i < 8; ++i)
        for (int j = 0; j < 8; ++j) h(i, j) = (__builtin_popcount(i & j) % 2) ? -1.0 : 1.0;
    return h.middleRows(1, k);
}

}  // namespace

TEST_CASE("sgn") {
    CHECK(sgn(0.0) == 1);
    CHECK(sgn(-0.0) == 1);
    CHECK(sgn(-1e-300) == -1);
    CHECK(sgn(3.7) == 1);
    CHECK_THROWS_AS(sgn(std::nan("")), NumericError);
}

TEST_CASE("soft_objective") {
    TrainConfig cfg;
    cfg.alpha = 0.0;

    SUBCASE("perfect predictions, beta = 0") {
        Rng rng(1);
        Dataset d = oracle::random_dataset(rng, 20, 10, 4);
        OptState s = random_state(d, 4, rng);
        for (auto& x : d.instances) x.target = dfm_predict(s.model(), x);
        cfg.beta = 0.0;
        CHECK(std::abs(soft_objective(s, d, cfg)) < 1e-18);
    }

    SUBCASE("delegate equal to feasible codes") {
        const Eigen::MatrixXd b = hadamard_rows(3);
        REQUIRE(is_feasible_delegate(b));
        Dataset d = parse_libfm_string("#n 8\n0 0:1\n");
        OptState s = make_state(d, pack(b), b, 0.0, Eigen::VectorXd::Zero(8));
        d.instances[0].target = dfm_predict(s.model(), d.instances[0]);
        cfg.beta = 1.0;
        CHECK(soft_objective(s, d, cfg) == doctest::Approx(-2.0 * 3 * 8));
    }

    SUBCASE("matches term-by-term recomputation") {
        Rng rng(2);
        const Dataset d = oracle::random_dataset(rng, 40, 12, 5);
        const OptState s = random_state(d, 5, rng);
        cfg.alpha = 0.3;
        cfg.beta = 0.7;
        CHECK(soft_objective(s, d, cfg) == doctest::Approx(brute_objective(s, d, cfg)).epsilon(1e-12));
        CHECK(cached_soft_objective(s, d, cfg) == doctest::Approx(brute_objective(s, d, cfg)).epsilon(1e-12));
    }
}

TEST_CASE("cached bit statistic equals the literal update expression") {
    Rng rng(3);
    for (int rep = 0; rep < 10; ++rep) {
        const Dataset d = oracle::random_dataset(rng, 12, 6, 4);
        const int k = 1 + static_cast<int>(uniform_index(rng, 4));
        const OptState s = random_state(d, k, rng);
        const FeatureIndex idx(d);
        const Eigen::MatrixXd b = unpack(s.codes);
        for (FeatureId r = 0; r < 6; ++r)
            for (int t = 0; t < k; ++t) {
                const double lit = oracle::bit_statistic_literal(b, s.delegate, s.w0, s.w, d, r, t, 0.4);
                CHECK(bit_statistic(s, d, idx, r, t, 0.4) == doctest::Approx(lit).epsilon(1e-10));
            }
    }
}

TEST_CASE("update_B") {
    TrainConfig cfg;
    cfg.alpha = 0.1;

    SUBCASE("unused feature follows the delegate") {
        Rng rng(4);
        Dataset d = oracle::random_dataset(rng, 30, 10, 3);
        d.n_features = 12;  // features 10 and 11 never occur
        OptState s = random_state(d, 4, rng);
        cfg.beta = 0.5;
        update_B(s, d, FeatureIndex(d), cfg);
        for (FeatureId r : {10u, 11u})
            for (int t = 0; t < 4; ++t) CHECK(s.codes.sign(r, t) == sgn(s.delegate(t, r)));
    }

    SUBCASE("zero statistic leaves the bit unchanged") {
        Rng rng(5);
        Dataset d = oracle::random_dataset(rng, 30, 10, 3);
        d.n_features = 12;
        OptState s = random_state(d, 4, rng);
        for (FeatureId r : {10u, 11u})
            for (int t = 0; t < 4; ++t) s.codes.set_sign(r, t, t % 2 ? 1 : -1);
        refresh_caches(s, d);
        cfg.beta = 0.0;
        int zero_seen = 0;
        update_B(s, d, FeatureIndex(d), cfg, [&](const OptState&, const BitDecision& e) {
            if (e.statistic == 0.0) {
                ++zero_seen;
                CHECK(e.after == e.before);
            }
        });
        CHECK(zero_seen >= 8);
        for (FeatureId r : {10u, 11u})
            for (int t = 0; t < 4; ++t) CHECK(s.codes.sign(r, t) == (t % 2 ? 1 : -1));
    }

    SUBCASE("every decision beats its flip on a tiny problem") {
        Rng rng(6);
        const Dataset d = oracle::random_dataset(rng, 6, 4, 4);
        OptState s = random_state(d, 2, rng);
        cfg.beta = 0.3;
        const FeatureIndex idx(d);
        int decisions = 0;
        for (int sweep = 0; sweep < 3; ++sweep) {
            const double before = soft_objective(s, d, cfg);
            update_B(s, d, idx, cfg, [&](const OptState& cur, const BitDecision& e) {
                OptState flipped = cur;
                flipped.codes.set_sign(e.feature, e.bit, -e.after);
                CHECK(brute_objective(cur, d, cfg) <= brute_objective(flipped, d, cfg) + 1e-12);
                ++decisions;
            });
            CHECK(soft_objective(s, d, cfg) <= before + 1e-9 * std::abs(before));
        }
        CHECK(decisions == 3 * 4 * 2);
        CHECK(cache_drift(s, d) < 1e-9);
    }

    SUBCASE("cache stays consistent across many sweeps") {
        Rng rng(7);
        const Dataset d = oracle::random_dataset(rng, 200, 30, 6);
        OptState s = random_state(d, 16, rng);
        cfg.audit_interval = 0;
        const FeatureIndex idx(d);
        for (int i = 0; i < 25; ++i) update_B(s, d, idx, cfg);
        CHECK(cache_drift(s, d) < 1e-6);
    }
}

TEST_CASE("update_D yields a feasible delegate that does not raise the objective") {
    Rng rng(8);
    const Dataset d = oracle::random_dataset(rng, 50, 20, 4);
    OptState s = random_state(d, 8, rng);
    TrainConfig cfg;
    cfg.beta = 1.0;
    const double before = soft_objective(s, d, cfg);
    update_D(s, 3);
    CHECK(is_feasible_delegate(s.delegate));
    CHECK(soft_objective(s, d, cfg) <= before + 1e-9 * std::abs(before));
}

TEST_CASE("update_w") {
    Rng rng(9);
    TrainConfig cfg;
    cfg.beta = 0.2;

    SUBCASE("descent and fixed point") {
        const Dataset d = oracle::random_dataset(rng, 80, 15, 4);
        OptState s = random_state(d, 6, rng);
        const FeatureIndex idx(d);
        const double before = soft_objective(s, d, cfg);
        update_w(s, d, idx, cfg);
        const double once = soft_objective(s, d, cfg);
        CHECK(once <= before);
        CHECK(cache_drift(s, d) < 1e-9);
        update_w(s, d, idx, cfg);
        CHECK(std::abs(soft_objective(s, d, cfg) - once) < 1e-9);
    }

    SUBCASE("reduces to ridge regression on the interaction residual") {
        cfg.alpha = 0.0;
        Dataset d = oracle::random_dataset(rng, 60, 10, 3);
        for (auto& x : d.instances) x.target = 2.0;
        OptState s = random_state(d, 4, rng);
        const FeatureIndex idx(d);
        update_w(s, d, idx, cfg);
        std::vector<double> phi;
        for (const auto& x : d.instances) {
            DfmModel pair_only = s.model();
            pair_only.w0 = 0.0;
            pair_only.w.setZero();
            phi.push_back(x.target - dfm_predict(pair_only, x));
        }
        const LinearPart best = oracle::ridge_closed_form(phi, d, 0.0);
        const double best_sse = ridge_objective(phi, d, best, 0.0);
        double sse = 0.0;
        for (std::size_t i = 0; i < d.size(); ++i) sse += std::pow(d.instances[i].target - s.predictions[i], 2);
        CHECK(sse == doctest::Approx(best_sse).epsilon(1e-6));
    }
}

TEST_CASE("initialize") {
    PlantedConfig pc;
    pc.n_users = 15;
    pc.n_items = 15;
    pc.k = 4;
    pc.value = 1.0;

    SUBCASE("zero rounds rounds the random embeddings") {
        const PlantedData p = make_planted_ratings(pc, 10);
        TrainConfig cfg;
        cfg.k = 4;
        cfg.init_iters = 0;
        cfg.seed = 77;
        const OptState s = initialize(p.data, FeatureIndex(p.data), cfg);
        Rng rng(77);
        Eigen::MatrixXd v(4, 30);
        for (Eigen::Index i = 0; i < 30; ++i)
            for (Eigen::Index t = 0; t < 4; ++t) v(t, i) = uniform(rng, -cfg.init_scale, cfg.init_scale);
        CHECK(unpack(s.codes) == v.unaryExpr([](double x) { return x >= 0 ? 1.0 : -1.0; }));
        CHECK(is_feasible_delegate(s.delegate));
        CHECK(cache_drift(s, p.data) < 1e-9);
    }

    SUBCASE("beta = 0 reduces to plain FM sweeps then rounding") {
        const PlantedData p = make_planted_ratings(pc, 10);
        const FeatureIndex idx(p.data);
        TrainConfig cfg;
        cfg.k = 4;
        cfg.beta = 0.0;
        cfg.seed = 5;
        cfg.rotation_restarts = 0;
        const OptState s = initialize(p.data, idx, cfg);

        FmModel v(30, 4);
        Rng rng(cfg.seed);
        for (Eigen::Index i = 0; i < 30; ++i)
            for (Eigen::Index t = 0; t < 4; ++t) v.V(t, i) = uniform(rng, -cfg.init_scale, cfg.init_scale);
        FmCoordinateSolver solver(p.data, idx, v);
        auto fit_linear = [&] {
            std::vector<double> phi;
            for (std::size_t i = 0; i < p.data.size(); ++i) {
                FmModel pair_only = v;
                pair_only.w0 = 0.0;
                pair_only.w.setZero();
                phi.push_back(p.data.instances[i].target - fm_predict(pair_only, p.data.instances[i]));
            }
            const LinearPart start{v.w0, v.w};
            const LinearPart lin = solve_w(phi, p.data, idx, cfg.alpha, {cfg.w_max_sweeps, cfg.w_tol}, &start);
            v.w0 = lin.w0;
            v.w = lin.w;
            solver.refresh();
        };
        fit_linear();
        for (int round = 0; round < cfg.init_iters; ++round) {
            for (int sweep = 0; sweep < cfg.init_fm_sweeps; ++sweep) solver.update_embeddings(cfg.init_l2, 0.0, nullptr);
            fit_linear();
        }
        CHECK(unpack(s.codes) == v.V.unaryExpr([](double x) { return x >= 0 ? 1.0 : -1.0; }));
        CHECK(s.w0 == doctest::Approx(v.w0).epsilon(1e-9));
    }

    SUBCASE("recovers planted codes up to signed row permutation") {
        // Observed agreement at the default beta for seeds 1..5:
        // 1.0 on all five; 0.82-0.92 with the sign alignment disabled.
        for (std::uint64_t seed = 1; seed <= 5; ++seed) {
            pc.seed = seed;
            const PlantedData p = make_planted_ratings(pc, 15);
            TrainConfig cfg;
            cfg.k = 4;
            cfg.seed = seed;
            const OptState s = initialize(p.data, FeatureIndex(p.data), cfg);
            // best[t][u]: agreement of learned row t with planted row u, either sign
            int best[4][4];
            for (int t = 0; t < 4; ++t)
                for (int u = 0; u < 4; ++u) {
                    int same = 0;
                    for (FeatureId i = 0; i < 30; ++i) same += s.codes.sign(i, t) == p.codes.sign(i, u);
                    best[t][u] = std::max(same, 30 - same);
                }
            std::array<int, 4> perm{0, 1, 2, 3};
            int total = 0;
            do {
                total = std::max(total, best[0][perm[0]] + best[1][perm[1]] + best[2][perm[2]] + best[3][perm[3]]);
            } while (std::next_permutation(perm.begin(), perm.end()));
            const double agreement = total / 120.0;
            MESSAGE("seed " << seed << " bit agreement " << agreement);
            CHECK(agreement >= 0.90);
        }
    }

    CHECK_THROWS_AS(initialize(Dataset{}, FeatureIndex{}, TrainConfig{}), DataError);
}

TEST_CASE("train_dfm") {
    SUBCASE("single instance") {
        // k = 8 needs at least 9 features for the delegate constraints
        const Dataset d = parse_libfm_string("#n 9\n4 0:1 1:1\n");
        TrainConfig cfg;
        cfg.k = 8;
        DfmTrainReport rep;
        const OptState s = train_dfm_state(d, cfg, &rep);
        CHECK(rep.iterations <= cfg.max_outer_iters);
        const OptState init = initialize(d, FeatureIndex(d), cfg);
        CHECK(std::pow(4 - dfm_predict(s.model(), d.instances[0]), 2) <=
              std::pow(4 - dfm_predict(init.model(), d.instances[0]), 2) + 1e-12);
        CHECK_THROWS_AS(train_dfm(parse_libfm_string("4 0:1 1:1\n"), cfg), DataError);
    }

    SUBCASE("planted generator") {
        PlantedConfig pc;
        pc.n_users = 25;
        pc.n_items = 25;
        pc.k = 8;
        pc.noise = 0.1;
        pc.seed = 1;
        Rng rng(1001);
        const CodeMatrix codes = make_random_codes(50, 8, rng);
        const Dataset train = sample_planted(pc, codes, 2000, 101);
        const Dataset test = sample_planted(pc, codes, 500, 201);
        TrainConfig cfg;
        cfg.k = 8;
        cfg.seed = 1;
        DfmTrainReport rep;
        const OptState s = train_dfm_state(train, cfg, &rep);
        const double test_rmse = rmse(s.model(), test);
        MESSAGE("planted DFM test RMSE " << test_rmse << " after " << rep.iterations << " iterations");
        CHECK(test_rmse <= 1.5 * pc.noise);

        for (std::size_t i = 1; i < s.objective_trace.size(); ++i)
            CHECK(s.objective_trace[i] <= s.objective_trace[i - 1] + 1e-9 * std::abs(s.objective_trace[i - 1]));

        const OptState again = train_dfm_state(train, cfg);
        CHECK(again.codes == s.codes);
        CHECK(serialize_dfm(again.model()) == serialize_dfm(s.model()));
    }
}

TEST_CASE("checkpoint round trip and resume") {
    PlantedConfig pc;
    pc.n_users = 12;
    pc.n_items = 12;
    pc.k = 4;
    const PlantedData p = make_planted_ratings(pc, 8);
    TrainConfig cfg;
    cfg.k = 4;
    cfg.max_outer_iters = 2;
    cfg.tol = 0.0;
    const OptState s = train_dfm_state(p.data, cfg);
    const std::string bytes = serialize_checkpoint(s);
    const OptState back = deserialize_checkpoint(bytes, p.data);
    CHECK(serialize_checkpoint(back) == bytes);
    for (std::size_t i = 0; i < s.predictions.size(); ++i)
        CHECK(back.predictions[i] == doctest::Approx(s.predictions[i]).epsilon(1e-12));

    const OptState resumed = train_dfm_state(p.data, cfg, nullptr, {}, &back);
    CHECK(resumed.outer_iterations == 4);
    CHECK(resumed.objective_trace.size() == s.objective_trace.size() + 2);
    CHECK_THROWS_AS(deserialize_checkpoint(bytes.substr(0, bytes.size() - 8), p.data), DataError);
}
