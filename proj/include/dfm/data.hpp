#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dfm {

using FeatureId = std::uint32_t;

// One (x, y) pair in sparse form. Indices are strictly increasing.
struct SparseInstance {
    std::vector<FeatureId> indices;
    std::vector<double> values;
    double target = 0.0;

    std::size_t nnz() const { return indices.size(); }
    double squared_norm() const;

    bool operator==(const SparseInstance&) const = default;
};

// A contiguous block [offset, offset + width) of one-hot features.
struct FieldRange {
    FeatureId offset = 0;
    FeatureId width = 0;

    bool contains(FeatureId f) const { return f >= offset && f - offset < width; }
    bool operator==(const FieldRange&) const = default;
};

struct Dataset {
    std::vector<SparseInstance> instances;
    std::size_t n_features = 0;
    std::optional<FieldRange> user_field;
    std::optional<FieldRange> item_field;

    std::size_t size() const { return instances.size(); }
    bool empty() const { return instances.empty(); }
    std::size_t total_nnz() const;

    bool operator==(const Dataset&) const = default;
};

// Checks every SparseInstance and Dataset invariant; throws DataError.
void validate(const Dataset& d);

// Builds a validated instance from unsorted (index, value) pairs. Zero values
// are dropped; duplicate indices are rejected.
SparseInstance make_instance(std::vector<std::pair<FeatureId, double>> entries, double target);

// The single nonzero feature of `field` in `x`, relative to the field offset.
std::optional<FeatureId> field_member(const SparseInstance& x, const FieldRange& field);

struct ParseOptions {
    std::optional<std::size_t> n_features;
    std::optional<FieldRange> user_field;
    std::optional<FieldRange> item_field;
};

// libFM text format: "<target> <idx>:<val> ...". Lines starting with '#' are
// comments, except the directives "#n <N>", "#user <offset> <width>" and
// "#item <offset> <width>". When both fields are known, repeated
// (user, item) ratings are merged into one instance with the mean target.
Dataset parse_libfm(std::istream& in, const ParseOptions& opts = {});
Dataset parse_libfm_string(const std::string& text, const ParseOptions& opts = {});
Dataset load_libfm(const std::string& path, const ParseOptions& opts = {});

// Writes directives for n_features and declared fields, then one line per
// instance with round-trip precision.
void write_libfm(std::ostream& out, const Dataset& d);
std::string to_libfm_string(const Dataset& d);

struct SplitResult {
    Dataset train;
    Dataset test;
    std::vector<std::string> warnings;
};

// For each user, ceil(fraction * m) of the user's m ratings go to train. The
// relative order of instances is preserved inside both outputs.
SplitResult split_per_user(const Dataset& d, double train_fraction = 0.5, std::uint64_t seed = 0);

// Per-feature inverted index over a dataset's nonzeros.
class FeatureIndex {
public:
    struct Entry {
        std::uint32_t instance;
        double value;
    };

    FeatureIndex() = default;
    explicit FeatureIndex(const Dataset& d);

    std::span<const Entry> bucket(FeatureId r) const {
        return {entries_.data() + offsets_[r], entries_.data() + offsets_[r + 1]};
    }
    std::size_t n_features() const { return offsets_.empty() ? 0 : offsets_.size() - 1; }
    std::size_t total_entries() const { return entries_.size(); }

private:
    std::vector<std::size_t> offsets_;
    std::vector<Entry> entries_;
};

inline FeatureIndex build_feature_index(const Dataset& d) { return FeatureIndex(d); }

}  // namespace dfm
