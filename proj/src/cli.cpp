#include "dfm/cli.hpp"

#include <CLI11.hpp>

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "dfm/binary_io.hpp"
#include "dfm/codes.hpp"
#include "dfm/data.hpp"
#include "dfm/errors.hpp"
#include "dfm/eval.hpp"
#include "dfm/fm.hpp"
#include "dfm/optimizer.hpp"
#include "dfm/synthetic.hpp"

namespace dfm::cli {

namespace {

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

FieldRange parse_field(const std::string& text, const char* name) {
    FieldRange f;
    const auto colon = text.find(':');
    auto parse = [](std::string_view s, FeatureId& out) {
        auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
        return ec == std::errc() && p == s.data() + s.size();
    };
    if (colon == std::string::npos || !parse(std::string_view(text).substr(0, colon), f.offset) ||
        !parse(std::string_view(text).substr(colon + 1), f.width) || f.width == 0)
        throw UsageError(std::string("--") + name + " expects <offset>:<width>");
    return f;
}

std::string shortest(double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, p);
}

int default_threads() {
    if (const char* env = std::getenv("DFM_THREADS")) {
        int n = std::atoi(env);
        if (n > 0) return n;
    }
    return 1;
}

struct DataFlags {
    std::string user_field, item_field;
    std::size_t n_features = 0;

    void add(CLI::App* cmd) {
        cmd->add_option("--user-field", user_field, "one-hot user block as <offset>:<width>");
        cmd->add_option("--item-field", item_field, "one-hot item block as <offset>:<width>");
        cmd->add_option("--n-features", n_features, "feature dimension (default: from data)");
    }

    ParseOptions options() const {
        ParseOptions o;
        if (!user_field.empty()) o.user_field = parse_field(user_field, "user-field");
        if (!item_field.empty()) o.item_field = parse_field(item_field, "item-field");
        if (n_features > 0) o.n_features = n_features;
        return o;
    }
};

struct TrainFlags {
    TrainConfig cfg;
    std::string solver = "cd";

    void add(CLI::App* cmd, bool dfm) {
        cmd->add_option("--k", cfg.k, "code length / embedding dimension")->check(CLI::PositiveNumber);
        cmd->add_option("--alpha", cfg.alpha, "l2 strength on linear weights")->check(CLI::NonNegativeNumber);
        cmd->add_option("--iters", cfg.max_outer_iters, "maximum outer iterations")->check(CLI::NonNegativeNumber);
        cmd->add_option("--tol", cfg.tol, "relative objective tolerance")->check(CLI::NonNegativeNumber);
        cmd->add_option("--seed", cfg.seed, "random seed");
        cmd->add_option("--init-scale", cfg.init_scale, "half-width of uniform embedding init")
            ->check(CLI::NonNegativeNumber);
        if (dfm) {
            cmd->add_option("--beta", cfg.beta, "delegate coupling strength")->check(CLI::NonNegativeNumber);
            cmd->add_option("--init-iters", cfg.init_iters, "warm-start alternation rounds")
                ->check(CLI::NonNegativeNumber);
            cmd->add_option("--init-sweeps", cfg.init_fm_sweeps, "embedding sweeps per warm-start round")
                ->check(CLI::NonNegativeNumber);
            cmd->add_option("--init-l2", cfg.init_l2, "l2 on embeddings during the warm start")
                ->check(CLI::NonNegativeNumber);
            cmd->add_option("--rotation-restarts", cfg.rotation_restarts, "random starts for sign alignment (0 skips)")
                ->check(CLI::NonNegativeNumber);
            cmd->add_flag("--shuffle", cfg.shuffle_features, "seeded shuffled feature order in bit sweeps");
        } else {
            cmd->add_option("--l2-v", cfg.embedding_l2, "l2 strength on embeddings")->check(CLI::NonNegativeNumber);
            cmd->add_option("--solver", solver, "cd or sgd")->check(CLI::IsMember({"cd", "sgd"}));
            cmd->add_option("--lr", cfg.sgd_learning_rate, "SGD learning rate")->check(CLI::PositiveNumber);
        }
    }

    TrainConfig resolved() const {
        TrainConfig c = cfg;
        c.fm_solver = solver == "sgd" ? FmSolver::kSgd : FmSolver::kCoordinateDescent;
        return c;
    }
};

std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoi(item));
        } catch (const std::exception&) {
            throw UsageError("bad integer list '" + s + "'");
        }
    }
    return out;
}

std::vector<double> parse_double_list(const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stod(item));
        } catch (const std::exception&) {
            throw UsageError("bad number list '" + s + "'");
        }
    }
    return out;
}

// Either kind of model, detected by magic bytes.
struct AnyModel {
    std::optional<FmModel> fm;
    std::optional<DfmModel> dfm;

    double predict(const SparseInstance& x) const { return fm ? fm_predict(*fm, x) : dfm_predict(*dfm, x); }
};

AnyModel load_any_model(const std::string& path) {
    const std::string bytes = io::read_file(path);
    AnyModel m;
    if (bytes.rfind("DFMFMMDL", 0) == 0) {
        m.fm = deserialize_fm(bytes);
    } else {
        m.dfm = deserialize_dfm(bytes);
    }
    return m;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Discrete factorization machines: train binary feature codes and score with popcount", "dfm"};
    app.require_subcommand(1);

    std::string input, output, model_path;
    DataFlags data_flags;

    auto* split = app.add_subcommand("split", "per-user random train/test split");
    double fraction = 0.5;
    std::uint64_t seed = 0;
    std::string train_out, test_out;
    split->add_option("--input", input, "libFM file")->required();
    split->add_option("--fraction", fraction, "train fraction per user")->check(CLI::Range(0.0, 1.0));
    split->add_option("--split-fraction", fraction, "alias of --fraction")->check(CLI::Range(0.0, 1.0));
    split->add_option("--seed", seed, "random seed");
    split->add_option("--train-out", train_out)->required();
    split->add_option("--test-out", test_out)->required();
    data_flags.add(split);

    TrainFlags fm_flags, dfm_flags;
    fm_flags.cfg = TrainConfig::fm_defaults();
    auto* train_fm = app.add_subcommand("train-fm", "train a real-valued FM");
    train_fm->add_option("--input", input, "libFM training file")->required();
    train_fm->add_option("--out", output, "model path")->required();
    fm_flags.add(train_fm, false);
    data_flags.add(train_fm);

    auto* train_dfm_cmd = app.add_subcommand("train-dfm", "train a discrete FM");
    std::string checkpoint, resume;
    train_dfm_cmd->add_option("--input", input, "libFM training file")->required();
    train_dfm_cmd->add_option("--out", output, "model path")->required();
    train_dfm_cmd->add_option("--checkpoint", checkpoint, "also write a resumable optimizer checkpoint");
    train_dfm_cmd->add_option("--resume", resume, "continue from a checkpoint");
    dfm_flags.add(train_dfm_cmd, true);
    data_flags.add(train_dfm_cmd);

    auto* predict = app.add_subcommand("predict", "score every instance of a libFM file");
    predict->add_option("--model", model_path)->required();
    predict->add_option("--input", input)->required();
    predict->add_option("--out", output)->required();
    data_flags.add(predict);

    auto* eval = app.add_subcommand("eval", "NDCG@1..K of a model on a test set");
    int max_k = 10;
    eval->add_option("--model", model_path)->required();
    eval->add_option("--input", input)->required();
    eval->add_option("--out", output, "CSV path (default: stdout)");
    eval->add_option("--max-k", max_k)->check(CLI::PositiveNumber);
    data_flags.add(eval);

    auto* bench = app.add_subcommand("bench", "testing time cost, float FM vs binary DFM");
    std::string bench_fm, bench_dfm, bench_ks = "8,16,32,64";
    std::size_t synth_features = 50000, synth_ops = 100000, synth_nnz = 30;
    bool synthetic = false;
    TtcOptions ttc;
    ttc.threads = default_threads();
    bench->add_option("--model-fm", bench_fm);
    bench->add_option("--model-dfm", bench_dfm);
    bench->add_option("--input", input);
    bench->add_flag("--synthetic", synthetic, "random models and instances instead of files");
    bench->add_option("--features", synth_features, "synthetic feature count")->check(CLI::PositiveNumber);
    bench->add_option("--ops", synth_ops, "synthetic scoring operations")->check(CLI::PositiveNumber);
    bench->add_option("--nnz", synth_nnz, "synthetic nonzeros per instance")->check(CLI::PositiveNumber);
    bench->add_option("--ks", bench_ks, "synthetic code lengths, comma separated");
    bench->add_option("--reps", ttc.repetitions)->check(CLI::PositiveNumber);
    bench->add_option("--threads", ttc.threads)->check(CLI::PositiveNumber);
    bench->add_option("--seed", seed);
    data_flags.add(bench);

    auto* grid = app.add_subcommand("grid", "NDCG@1..10 over a beta x k grid");
    std::string grid_train, grid_test, betas = "1e-4,1e-3,1e-2,1e-1,1,10,100", ks = "8,16,32,64";
    TrainFlags grid_flags;
    grid->add_option("--train", grid_train)->required();
    grid->add_option("--test", grid_test)->required();
    grid->add_option("--betas", betas);
    grid->add_option("--ks", ks);
    grid->add_option("--out", output, "CSV path (default: stdout)");
    grid_flags.add(grid, true);
    data_flags.add(grid);

    auto* synth = app.add_subcommand("synth", "write planted binary-code ratings");
    PlantedConfig planted;
    std::size_t per_user = 20;
    synth->add_option("--users", planted.n_users)->check(CLI::PositiveNumber);
    synth->add_option("--items", planted.n_items)->check(CLI::PositiveNumber);
    synth->add_option("--k", planted.k)->check(CLI::PositiveNumber);
    synth->add_option("--ratings-per-user", per_user)->check(CLI::PositiveNumber);
    synth->add_option("--noise", planted.noise)->check(CLI::NonNegativeNumber);
    synth->add_option("--seed", planted.seed);
    synth->add_option("--out", output)->required();

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp& e) {
        out << app.help();
        return 0;
    } catch (const CLI::ParseError& e) {
        err << "usage error: " << e.what() << '\n';
        return 1;
    }

    auto progress = [&](int it, double obj) { err << "iter=" << it << " obj=" << shortest(obj) << '\n'; };

    try {
        if (*split) {
            const Dataset d = load_libfm(input, data_flags.options());
            if (!d.user_field) throw UsageError("split needs --user-field or a '#user' directive");
            const SplitResult s = split_per_user(d, fraction, seed);
            for (const auto& w : s.warnings) err << "warning: " << w << '\n';
            io::write_file_atomic(train_out, to_libfm_string(s.train));
            io::write_file_atomic(test_out, to_libfm_string(s.test));
            err << "train=" << s.train.size() << " test=" << s.test.size() << '\n';
        } else if (*train_fm) {
            const Dataset d = load_libfm(input, data_flags.options());
            const FmModel m = fm_train(d, fm_flags.resolved(), nullptr, progress);
            save_fm(m, output);
        } else if (*train_dfm_cmd) {
            const Dataset d = load_libfm(input, data_flags.options());
            const TrainConfig cfg = dfm_flags.resolved();
            if (static_cast<std::size_t>(cfg.k) + 1 > d.n_features)
                throw UsageError("--k must be at most n_features - 1");
            std::optional<OptState> start;
            if (!resume.empty()) start = deserialize_checkpoint(io::read_file(resume), d);
            const OptState s = train_dfm_state(d, cfg, nullptr, progress, start ? &*start : nullptr);
            save_dfm(s.model(), output);
            if (!checkpoint.empty()) io::write_file_atomic(checkpoint, serialize_checkpoint(s));
        } else if (*predict) {
            const AnyModel m = load_any_model(model_path);
            ParseOptions opts = data_flags.options();
            if (!opts.n_features) opts.n_features = m.fm ? m.fm->n_features() : m.dfm->n_features();
            // Scores must line up with input lines, so no duplicate merging.
            opts.user_field.reset();
            opts.item_field.reset();
            std::ifstream in(input);
            if (!in) throw DataError("cannot open " + input);
            Dataset d = parse_libfm(in, opts);
            d.user_field.reset();
            d.item_field.reset();
            std::string text;
            for (const auto& x : d.instances) text += shortest(m.predict(x)) + '\n';
            io::write_file_atomic(output, text);
        } else if (*eval) {
            const AnyModel m = load_any_model(model_path);
            ParseOptions opts = data_flags.options();
            if (!opts.n_features) opts.n_features = m.fm ? m.fm->n_features() : m.dfm->n_features();
            const Dataset d = load_libfm(input, opts);
            const RankingRun runs = make_ranking_run(d, [&](const SparseInstance& x) { return m.predict(x); });
            std::ostringstream csv;
            csv << "k,ndcg\n";
            for (int K = 1; K <= max_k; ++K) {
                char buf[32];
                std::snprintf(buf, sizeof buf, "%.6g", ndcg_at_k(runs, K).mean);
                csv << K << ',' << buf << '\n';
            }
            if (output.empty()) {
                out << csv.str();
            } else {
                io::write_file_atomic(output, csv.str());
            }
        } else if (*bench) {
            std::vector<BenchReport> reports;
            if (synthetic) {
                const Dataset d = make_random_sparse(synth_features, synth_nnz, synth_ops, seed + 1);
                for (int k : parse_int_list(bench_ks)) {
                    if (k < 1) throw UsageError("--ks entries must be positive");
                    const FmModel fm = make_random_fm(synth_features, k, seed + 2);
                    const DfmModel dfm = make_random_dfm(synth_features, k, seed + 3);
                    reports.push_back(measure_ttc(fm, dfm, d, ttc));
                }
            } else {
                if (bench_fm.empty() || bench_dfm.empty() || input.empty())
                    throw UsageError("bench needs --model-fm, --model-dfm and --input (or --synthetic)");
                const FmModel fm = load_fm(bench_fm);
                const DfmModel dfm = load_dfm(bench_dfm);
                ParseOptions opts = data_flags.options();
                if (!opts.n_features) opts.n_features = fm.n_features();
                const Dataset d = load_libfm(input, opts);
                reports.push_back(measure_ttc(fm, dfm, d, ttc));
            }
            out << bench_table(reports);
        } else if (*grid) {
            const ParseOptions opts = data_flags.options();
            const Dataset train = load_libfm(grid_train, opts);
            ParseOptions test_opts = opts;
            if (!test_opts.n_features) test_opts.n_features = train.n_features;
            const Dataset test = load_libfm(grid_test, test_opts);
            std::vector<GridCell> cells;
            for (double b : parse_double_list(betas))
                for (int k : parse_int_list(ks)) cells.push_back({b, k});
            const std::string csv = grid_csv(eval_grid(train, test, cells, grid_flags.resolved()));
            if (output.empty()) {
                out << csv;
            } else {
                io::write_file_atomic(output, csv);
            }
        } else if (*synth) {
            const PlantedData p = make_planted_ratings(planted, per_user);
            io::write_file_atomic(output, to_libfm_string(p.data));
        }
    } catch (const UsageError& e) {
        err << "usage error: " << e.what() << '\n';
        return 1;
    } catch (const NumericError& e) {
        err << "numeric error: " << e.what() << '\n';
        return 3;
    } catch (const DataError& e) {
        err << "data error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}

int run(const std::vector<std::string>& args) { return run(args, std::cout, std::cerr); }

}  // namespace dfm::cli
