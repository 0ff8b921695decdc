#pragma once

// Grouped datasets: features plus a protected-group id and a class label per
// row. Sources are either the synthetic Gaussian-mixture generator or a plain
// CSV file; both produce the same in-memory shape. Row order is part of the
// contract (the reference reduction folds in row order), so nothing here
// reorders silently.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fairdrift::data {

struct GroupedDataset {
    std::size_t feature_dim = 0;
    std::size_t num_classes = 0;               // label arity K
    std::vector<double> features;              // n x feature_dim, row-major
    std::vector<std::uint32_t> groups;         // dense group ids, n entries
    std::vector<std::uint32_t> labels;         // dense label ids, n entries
    std::vector<std::string> feature_names;    // feature_dim entries
    std::vector<std::string> group_names;      // id -> name, first-appearance order
    std::vector<std::string> label_names;      // id -> name, first-appearance order
    std::vector<double> group_margins;         // synthetic only: min class-mean separation

    std::size_t size() const { return groups.size(); }
    std::size_t num_groups() const { return group_names.size(); }
    std::span<const double> row(std::size_t i) const {
        return {features.data() + i * feature_dim, feature_dim};
    }
    std::vector<std::size_t> group_sizes() const;
};

// Lightweight index view over a dataset. Iteration order is the stored index
// order; the factory functions below produce ascending indices.
struct DataView {
    const GroupedDataset* dataset = nullptr;
    std::vector<std::uint32_t> indices;

    static DataView all(const GroupedDataset& ds);
    static DataView group(const GroupedDataset& ds, std::uint32_t group_id);

    std::size_t size() const { return indices.size(); }
    std::span<const double> row(std::size_t k) const { return dataset->row(indices[k]); }
    std::uint32_t label(std::size_t k) const { return dataset->labels[indices[k]]; }
    std::uint32_t group(std::size_t k) const { return dataset->groups[indices[k]]; }
};

// ---- synthetic generator ----

struct GroupSpec {
    std::string name;
    std::vector<std::size_t> class_counts;        // one count per class
    std::vector<std::vector<double>> class_means; // num_classes x feature_dim
    double sigma = 1.0;                           // shared isotropic stddev
};

struct SyntheticSpec {
    std::size_t feature_dim = 0;
    std::size_t num_classes = 2;
    std::uint64_t seed = 0;
    std::vector<GroupSpec> groups;
};

// Per-group margin: the smallest distance between two class means inside the
// group. Throws DegenerateSpec for specs that cannot make a usable benchmark.
double margin_of(const GroupSpec& group);

// Draws class_counts[y] points from N(mean_y, sigma^2 I) per group and class,
// in (group, class) block order. Deterministic in spec.seed; each (group,
// class) cell has its own derived stream, so editing one group's count leaves
// the other groups' samples untouched.
GroupedDataset gen_synthetic(const SyntheticSpec& spec);

// ---- CSV ----

struct CsvSchema {
    std::vector<std::string> feature_columns;
    std::string group_column;
    std::string label_column;
};

// Plain comma-separated files with a header row, no quoting. Group and label
// cells become dense ids in order of first appearance. Missing columns throw
// SchemaError naming the column; non-numeric or non-finite feature cells throw
// ParseError with 1-based row and column.
GroupedDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema);

// Inverse of load_csv for any dataset: features at 17 significant digits so a
// save/load cycle reproduces the double bits exactly.
void save_csv(const std::filesystem::path& path, const GroupedDataset& ds);

// ---- split and standardization ----

struct SplitResult {
    GroupedDataset train;
    GroupedDataset test;
    std::vector<std::string> warnings; // size-1 strata forced into train, etc.
};

// Stratified by (group, label): every stratum with at least two samples lands
// on both sides. Within each split, rows keep their original dataset order.
SplitResult split(const GroupedDataset& ds, double train_fraction, std::uint64_t seed);

struct Standardizer {
    std::vector<double> mean;
    std::vector<double> scale; // population stddev, 1.0 for constant features
};

// Statistics always come from the training split alone; apply() then maps any
// dataset with the same feature count through (x - mean) / scale.
Standardizer fit_standardizer(const GroupedDataset& train);
void apply(const Standardizer& stats, GroupedDataset& ds);

std::uint64_t dataset_fingerprint(const GroupedDataset& ds);

} // namespace fairdrift::data
