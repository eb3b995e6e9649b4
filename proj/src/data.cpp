#include "dfm/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string_view>

#include "dfm/errors.hpp"
#include "dfm/rng.hpp"

namespace dfm {

double SparseInstance::squared_norm() const {
    double s = 0.0;
    for (double v : values) s += v * v;
    return s;
}

std::size_t Dataset::total_nnz() const {
    std::size_t n = 0;
    for (const auto& x : instances) n += x.nnz();
    return n;
}

std::optional<FeatureId> field_member(const SparseInstance& x, const FieldRange& field) {
    auto it = std::lower_bound(x.indices.begin(), x.indices.end(), field.offset);
    if (it == x.indices.end() || !field.contains(*it)) return std::nullopt;
    return *it - field.offset;
}

namespace {

void check_instance(const SparseInstance& x, std::size_t n_features, std::size_t pos) {
    auto where = [&] { return " (instance " + std::to_string(pos) + ")"; };
    if (x.indices.size() != x.values.size())
        throw DataError("index/value length mismatch" + where());
    if (!std::isfinite(x.target)) throw DataError("non-finite target" + where());
    for (std::size_t i = 0; i < x.indices.size(); ++i) {
        if (i > 0 && x.indices[i] <= x.indices[i - 1])
            throw DataError("indices not strictly increasing" + where());
        if (x.indices[i] >= n_features)
            throw DataError("index " + std::to_string(x.indices[i]) + " >= n_features" + where());
        if (!std::isfinite(x.values[i])) throw DataError("non-finite value" + where());
        if (x.values[i] == 0.0) throw DataError("explicit zero value" + where());
    }
}

void check_field(const SparseInstance& x, const FieldRange& f, const char* name, std::size_t pos) {
    std::size_t hits = 0;
    for (FeatureId idx : x.indices) hits += f.contains(idx) ? 1 : 0;
    if (hits != 1)
        throw DataError(std::string("instance ") + std::to_string(pos) + " has " +
                        std::to_string(hits) + " nonzeros in the " + name + " field");
}

}  // namespace

void validate(const Dataset& d) {
    for (auto* f : {&d.user_field, &d.item_field}) {
        if (*f && std::size_t{(*f)->offset} + (*f)->width > d.n_features)
            throw DataError("field range exceeds n_features");
    }
    for (std::size_t i = 0; i < d.instances.size(); ++i) {
        check_instance(d.instances[i], d.n_features, i);
        if (d.user_field) check_field(d.instances[i], *d.user_field, "user", i);
        if (d.item_field) check_field(d.instances[i], *d.item_field, "item", i);
    }
}

SparseInstance make_instance(std::vector<std::pair<FeatureId, double>> entries, double target) {
    std::sort(entries.begin(), entries.end(),
              [](const auto& a, const auto& b) { return a.first < b.first; });
    SparseInstance x;
    x.target = target;
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (i > 0 && entries[i].first == entries[i - 1].first)
            throw DataError("duplicate index " + std::to_string(entries[i].first));
        if (!std::isfinite(entries[i].second))
            throw DataError("non-finite value at index " + std::to_string(entries[i].first));
        if (entries[i].second == 0.0) continue;
        x.indices.push_back(entries[i].first);
        x.values.push_back(entries[i].second);
    }
    return x;
}

namespace {

bool parse_double(std::string_view s, double& out) {
    if (!s.empty() && s.front() == '+') s.remove_prefix(1);
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

template <typename Int>
bool parse_int(std::string_view s, Int& out) {
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc() && p == s.data() + s.size();
}

std::vector<std::string_view> split_ws(std::string_view line) {
    std::vector<std::string_view> tokens;
    std::size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
        std::size_t j = i;
        while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
        if (j > i) tokens.push_back(line.substr(i, j - i));
        i = j;
    }
    return tokens;
}

FieldRange parse_field_directive(const std::vector<std::string_view>& tok, std::size_t lineno) {
    FieldRange f;
    if (tok.size() != 3 || !parse_int(tok[1], f.offset) || !parse_int(tok[2], f.width) || f.width == 0)
        throw ParseError(lineno, "expected '" + std::string(tok[0]) + " <offset> <width>'");
    return f;
}

// Merges repeated (user, item) instances, keeping the first occurrence's
// features and the mean target.
void average_duplicates(Dataset& d) {
    std::map<std::pair<FeatureId, FeatureId>, std::pair<std::size_t, std::size_t>> seen;
    std::vector<SparseInstance> merged;
    merged.reserve(d.instances.size());
    for (auto& x : d.instances) {
        auto u = field_member(x, *d.user_field);
        auto i = field_member(x, *d.item_field);
        if (!u || !i) throw DataError("instance without user or item id");
        auto [it, inserted] = seen.try_emplace({*u, *i}, merged.size(), 1);
        if (inserted) {
            merged.push_back(std::move(x));
        } else {
            merged[it->second.first].target += x.target;
            ++it->second.second;
        }
    }
    for (const auto& [key, slot] : seen) merged[slot.first].target /= static_cast<double>(slot.second);
    d.instances = std::move(merged);
}

}  // namespace

Dataset parse_libfm(std::istream& in, const ParseOptions& opts) {
    Dataset d;
    d.user_field = opts.user_field;
    d.item_field = opts.item_field;
    std::optional<std::size_t> declared_n = opts.n_features;
    std::size_t max_index_plus_one = 0;

    std::string raw;
    std::size_t lineno = 0;
    std::vector<std::pair<FeatureId, double>> entries;
    while (std::getline(in, raw)) {
        ++lineno;
        std::string_view line(raw);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        auto tok = split_ws(line);
        if (tok.empty()) continue;
        if (tok[0].front() == '#') {
            if (tok[0] == "#n") {
                std::size_t n = 0;
                if (tok.size() != 2 || !parse_int(tok[1], n))
                    throw ParseError(lineno, "expected '#n <N>'");
                if (!opts.n_features) declared_n = n;
            } else if (tok[0] == "#user") {
                auto f = parse_field_directive(tok, lineno);
                if (!opts.user_field) d.user_field = f;
            } else if (tok[0] == "#item") {
                auto f = parse_field_directive(tok, lineno);
                if (!opts.item_field) d.item_field = f;
            }
            continue;
        }

        double target = 0.0;
        if (!parse_double(tok[0], target)) throw ParseError(lineno, "bad target '" + std::string(tok[0]) + "'");
        if (!std::isfinite(target)) throw ParseError(lineno, "non-finite target");
        entries.clear();
        for (std::size_t i = 1; i < tok.size(); ++i) {
            auto colon = tok[i].find(':');
            FeatureId idx = 0;
            double val = 0.0;
            if (colon == std::string_view::npos || !parse_int(tok[i].substr(0, colon), idx) ||
                !parse_double(tok[i].substr(colon + 1), val))
                throw ParseError(lineno, "malformed feature '" + std::string(tok[i]) + "'");
            entries.emplace_back(idx, val);
        }
        try {
            d.instances.push_back(make_instance(std::move(entries), target));
            entries = {};
        } catch (const DataError& e) {
            throw ParseError(lineno, e.what());
        }
        const auto& x = d.instances.back();
        if (!x.indices.empty())
            max_index_plus_one = std::max<std::size_t>(max_index_plus_one, x.indices.back() + std::size_t{1});
    }

    if (declared_n) {
        if (*declared_n < max_index_plus_one)
            throw DataError("declared n_features " + std::to_string(*declared_n) +
                            " is smaller than max index + 1 = " + std::to_string(max_index_plus_one));
        d.n_features = *declared_n;
    } else {
        d.n_features = max_index_plus_one;
        for (auto* f : {&d.user_field, &d.item_field})
            if (*f) d.n_features = std::max<std::size_t>(d.n_features, std::size_t{(*f)->offset} + (*f)->width);
    }
    validate(d);
    if (d.user_field && d.item_field) average_duplicates(d);
    return d;
}

Dataset parse_libfm_string(const std::string& text, const ParseOptions& opts) {
    std::istringstream in(text);
    return parse_libfm(in, opts);
}

Dataset load_libfm(const std::string& path, const ParseOptions& opts) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open " + path);
    return parse_libfm(in, opts);
}

namespace {

void put_double(std::ostream& out, double v) {
    char buf[32];
    auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
    out.write(buf, p - buf);
}

}  // namespace

void write_libfm(std::ostream& out, const Dataset& d) {
    out << "#n " << d.n_features << '\n';
    if (d.user_field) out << "#user " << d.user_field->offset << ' ' << d.user_field->width << '\n';
    if (d.item_field) out << "#item " << d.item_field->offset << ' ' << d.item_field->width << '\n';
    for (const auto& x : d.instances) {
        put_double(out, x.target);
        for (std::size_t i = 0; i < x.nnz(); ++i) {
            out << ' ' << x.indices[i] << ':';
            put_double(out, x.values[i]);
        }
        out << '\n';
    }
}

std::string to_libfm_string(const Dataset& d) {
    std::ostringstream out;
    write_libfm(out, d);
    return out.str();
}

SplitResult split_per_user(const Dataset& d, double train_fraction, std::uint64_t seed) {
    if (!d.user_field) throw DataError("split_per_user requires a user field");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw DataError("train fraction must lie in (0, 1)");

    std::map<FeatureId, std::vector<std::size_t>> by_user;
    for (std::size_t i = 0; i < d.instances.size(); ++i) {
        auto u = field_member(d.instances[i], *d.user_field);
        if (!u) throw DataError("instance " + std::to_string(i) + " has no user id");
        by_user[*u].push_back(i);
    }

    SplitResult out;
    std::vector<char> to_train(d.instances.size(), 0);
    Rng rng(seed);
    for (auto& [user, rows] : by_user) {
        const std::size_t m = rows.size();
        if (m < 2) {
            out.warnings.push_back("user " + std::to_string(user) + " has " + std::to_string(m) +
                                   " rating; assigned to train");
        }
        shuffle(rows, rng);
        auto n_train = static_cast<std::size_t>(std::ceil(train_fraction * static_cast<double>(m)));
        n_train = std::min(std::max<std::size_t>(n_train, 1), m);
        for (std::size_t j = 0; j < n_train; ++j) to_train[rows[j]] = 1;
    }

    for (Dataset* part : {&out.train, &out.test}) {
        part->n_features = d.n_features;
        part->user_field = d.user_field;
        part->item_field = d.item_field;
    }
    for (std::size_t i = 0; i < d.instances.size(); ++i)
        (to_train[i] ? out.train : out.test).instances.push_back(d.instances[i]);
    return out;
}

FeatureIndex::FeatureIndex(const Dataset& d) : offsets_(d.n_features + 1, 0) {
    for (const auto& x : d.instances)
        for (FeatureId r : x.indices) ++offsets_[r + 1];
    std::partial_sum(offsets_.begin(), offsets_.end(), offsets_.begin());
    entries_.resize(offsets_.back());
    std::vector<std::size_t> fill(offsets_.begin(), offsets_.end() - 1);
    for (std::size_t i = 0; i < d.instances.size(); ++i) {
        const auto& x = d.instances[i];
        for (std::size_t j = 0; j < x.nnz(); ++j)
            entries_[fill[x.indices[j]]++] = {static_cast<std::uint32_t>(i), x.values[j]};
    }
}

}  // namespace dfm
