#include "fairdrift/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

#include "fairdrift/errors.hpp"
#include "fairdrift/format.hpp"
#include "fairdrift/hash.hpp"
#include "fairdrift/rng.hpp"

namespace fairdrift::data {

std::vector<std::size_t> GroupedDataset::group_sizes() const {
    std::vector<std::size_t> sizes(num_groups(), 0);
    for (std::uint32_t g : groups) sizes[g]++;
    return sizes;
}

DataView DataView::all(const GroupedDataset& ds) {
    DataView v;
    v.dataset = &ds;
    v.indices.resize(ds.size());
    for (std::size_t i = 0; i < ds.size(); ++i) v.indices[i] = static_cast<std::uint32_t>(i);
    return v;
}

DataView DataView::group(const GroupedDataset& ds, std::uint32_t group_id) {
    DataView v;
    v.dataset = &ds;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        if (ds.groups[i] == group_id) v.indices.push_back(static_cast<std::uint32_t>(i));
    }
    return v;
}

double margin_of(const GroupSpec& group) {
    double margin = std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < group.class_means.size(); ++a) {
        for (std::size_t b = a + 1; b < group.class_means.size(); ++b) {
            double d2 = 0.0;
            for (std::size_t j = 0; j < group.class_means[a].size(); ++j) {
                const double d = group.class_means[a][j] - group.class_means[b][j];
                d2 += d * d;
            }
            margin = std::min(margin, std::sqrt(d2));
        }
    }
    return margin;
}

namespace {

void validate_spec(const SyntheticSpec& spec) {
    if (spec.feature_dim == 0) throw DegenerateSpec("synthetic spec: feature_dim must be positive");
    if (spec.num_classes < 2) throw DegenerateSpec("synthetic spec: need at least two classes");
    if (spec.groups.empty()) throw DegenerateSpec("synthetic spec: need at least one group");
    for (const auto& g : spec.groups) {
        if (g.name.empty()) throw DegenerateSpec("synthetic spec: group with empty name");
        if (g.class_counts.size() != spec.num_classes || g.class_means.size() != spec.num_classes) {
            throw DegenerateSpec("synthetic spec: group '" + g.name +
                                 "' must list counts and means for every class");
        }
        std::size_t total = 0;
        for (std::size_t c : g.class_counts) total += c;
        if (total == 0) throw DegenerateSpec("synthetic spec: group '" + g.name + "' is empty");
        for (const auto& mean : g.class_means) {
            if (mean.size() != spec.feature_dim) {
                throw DegenerateSpec("synthetic spec: group '" + g.name +
                                     "' has a mean of the wrong dimension");
            }
        }
        if (!(g.sigma > 0.0)) {
            throw DegenerateSpec("synthetic spec: group '" + g.name + "' needs sigma > 0");
        }
        if (margin_of(g) == 0.0) {
            throw DegenerateSpec("synthetic spec: group '" + g.name +
                                 "' has coincident class means (zero margin)");
        }
    }
}

} // namespace

GroupedDataset gen_synthetic(const SyntheticSpec& spec) {
    validate_spec(spec);

    GroupedDataset ds;
    ds.feature_dim = spec.feature_dim;
    ds.num_classes = spec.num_classes;
    for (std::size_t j = 0; j < spec.feature_dim; ++j) ds.feature_names.push_back("f" + std::to_string(j));
    for (std::size_t y = 0; y < spec.num_classes; ++y) ds.label_names.push_back(std::to_string(y));

    for (std::size_t a = 0; a < spec.groups.size(); ++a) {
        const GroupSpec& g = spec.groups[a];
        ds.group_names.push_back(g.name);
        ds.group_margins.push_back(margin_of(g));
        for (std::size_t y = 0; y < spec.num_classes; ++y) {
            Rng rng(derive_seed(spec.seed, "synthetic/" + g.name, y));
            for (std::size_t k = 0; k < g.class_counts[y]; ++k) {
                for (std::size_t j = 0; j < spec.feature_dim; ++j) {
                    ds.features.push_back(g.class_means[y][j] + g.sigma * rng.normal());
                }
                ds.groups.push_back(static_cast<std::uint32_t>(a));
                ds.labels.push_back(static_cast<std::uint32_t>(y));
            }
        }
    }
    return ds;
}

namespace {

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::stringstream ss(line);
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.push_back("");
    return cells;
}

double parse_feature(const std::string& cell, std::size_t row, std::size_t col) {
    if (cell.empty()) throw ParseError("empty feature cell", row, col);
    const char* begin = cell.c_str();
    char* end = nullptr;
    const double v = std::strtod(begin, &end);
    if (end != begin + cell.size()) throw ParseError("unparsable feature '" + cell + "'", row, col);
    if (!std::isfinite(v)) throw ParseError("non-finite feature '" + cell + "'", row, col);
    return v;
}

std::string trimmed(std::string s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ')) s.pop_back();
    std::size_t start = 0;
    while (start < s.size() && s[start] == ' ') ++start;
    return s.substr(start);
}

} // namespace

GroupedDataset load_csv(const std::filesystem::path& path, const CsvSchema& schema) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open '" + path.string() + "'");

    std::string header_line;
    if (!std::getline(in, header_line)) throw SchemaError("'" + path.string() + "' is empty");
    const auto header = split_line(trimmed(header_line));

    auto column_of = [&](const std::string& name) -> std::size_t {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (trimmed(header[i]) == name) return i;
        }
        throw SchemaError("column '" + name + "' not found in '" + path.string() + "'");
    };

    std::vector<std::size_t> feature_cols;
    for (const auto& name : schema.feature_columns) feature_cols.push_back(column_of(name));
    const std::size_t group_col = column_of(schema.group_column);
    const std::size_t label_col = column_of(schema.label_column);

    GroupedDataset ds;
    ds.feature_dim = feature_cols.size();
    ds.feature_names = schema.feature_columns;

    std::map<std::string, std::uint32_t> group_ids;
    std::map<std::string, std::uint32_t> label_ids;

    std::string line;
    std::size_t row = 1; // header is row 1; data rows start at 2
    while (std::getline(in, line)) {
        ++row;
        const std::string t = trimmed(line);
        if (t.empty()) continue;
        const auto cells = split_line(t);
        if (cells.size() != header.size()) {
            throw ParseError("row has " + std::to_string(cells.size()) + " cells, header has " +
                                 std::to_string(header.size()),
                             row, cells.size() + 1);
        }
        for (std::size_t j = 0; j < feature_cols.size(); ++j) {
            ds.features.push_back(parse_feature(trimmed(cells[feature_cols[j]]), row, feature_cols[j] + 1));
        }
        const std::string gname = trimmed(cells[group_col]);
        const std::string lname = trimmed(cells[label_col]);
        if (gname.empty()) throw ParseError("empty group cell", row, group_col + 1);
        if (lname.empty()) throw ParseError("empty label cell", row, label_col + 1);
        auto gi = group_ids.find(gname);
        if (gi == group_ids.end()) {
            gi = group_ids.emplace(gname, static_cast<std::uint32_t>(ds.group_names.size())).first;
            ds.group_names.push_back(gname);
        }
        auto li = label_ids.find(lname);
        if (li == label_ids.end()) {
            li = label_ids.emplace(lname, static_cast<std::uint32_t>(ds.label_names.size())).first;
            ds.label_names.push_back(lname);
        }
        ds.groups.push_back(gi->second);
        ds.labels.push_back(li->second);
    }
    if (ds.size() == 0) throw SchemaError("'" + path.string() + "' has no data rows");
    ds.num_classes = ds.label_names.size();
    return ds;
}

void save_csv(const std::filesystem::path& path, const GroupedDataset& ds) {
    auto check_name = [](const std::string& name) {
        if (name.find(',') != std::string::npos || name.find('\n') != std::string::npos) {
            throw SchemaError("name '" + name + "' contains a separator; plain CSV cannot hold it");
        }
    };
    for (const auto& n : ds.feature_names) check_name(n);
    for (const auto& n : ds.group_names) check_name(n);
    for (const auto& n : ds.label_names) check_name(n);

    std::ofstream out(path);
    if (!out) throw SchemaError("cannot write '" + path.string() + "'");
    for (std::size_t j = 0; j < ds.feature_dim; ++j) out << ds.feature_names[j] << ',';
    out << "group,label\n";
    for (std::size_t i = 0; i < ds.size(); ++i) {
        const auto x = ds.row(i);
        for (std::size_t j = 0; j < ds.feature_dim; ++j) out << fmt_g17(x[j]) << ',';
        out << ds.group_names[ds.groups[i]] << ',' << ds.label_names[ds.labels[i]] << '\n';
    }
}

namespace {

GroupedDataset subset(const GroupedDataset& ds, const std::vector<std::uint32_t>& rows) {
    GroupedDataset out;
    out.feature_dim = ds.feature_dim;
    out.num_classes = ds.num_classes;
    out.feature_names = ds.feature_names;
    out.group_names = ds.group_names;
    out.label_names = ds.label_names;
    out.group_margins = ds.group_margins;
    out.features.reserve(rows.size() * ds.feature_dim);
    for (std::uint32_t i : rows) {
        const auto x = ds.row(i);
        out.features.insert(out.features.end(), x.begin(), x.end());
        out.groups.push_back(ds.groups[i]);
        out.labels.push_back(ds.labels[i]);
    }
    return out;
}

} // namespace

SplitResult split(const GroupedDataset& ds, double train_fraction, std::uint64_t seed) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
        throw SchemaError("train_fraction must lie strictly between 0 and 1");
    }

    // Strata keyed by (group, label), in id order for determinism.
    std::map<std::pair<std::uint32_t, std::uint32_t>, std::vector<std::uint32_t>> strata;
    for (std::size_t i = 0; i < ds.size(); ++i) {
        strata[{ds.groups[i], ds.labels[i]}].push_back(static_cast<std::uint32_t>(i));
    }

    SplitResult result;
    std::vector<std::uint32_t> train_rows;
    std::vector<std::uint32_t> test_rows;
    for (auto& [key, rows] : strata) {
        if (rows.size() == 1) {
            train_rows.push_back(rows[0]);
            result.warnings.push_back("stratum (group=" + ds.group_names[key.first] + ", label=" +
                                      ds.label_names[key.second] +
                                      ") has a single sample; kept in train");
            continue;
        }
        Rng rng(derive_seed(seed, "split", (static_cast<std::uint64_t>(key.first) << 32) | key.second));
        rng.shuffle(rows);
        const auto n = rows.size();
        std::size_t n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
        n_train = std::clamp<std::size_t>(n_train, 1, n - 1);
        train_rows.insert(train_rows.end(), rows.begin(), rows.begin() + static_cast<long>(n_train));
        test_rows.insert(test_rows.end(), rows.begin() + static_cast<long>(n_train), rows.end());
    }
    // Keep original row order inside each split.
    std::sort(train_rows.begin(), train_rows.end());
    std::sort(test_rows.begin(), test_rows.end());
    result.train = subset(ds, train_rows);
    result.test = subset(ds, test_rows);
    return result;
}

Standardizer fit_standardizer(const GroupedDataset& train) {
    if (train.size() == 0) throw EmptySubset("cannot fit standardizer on an empty dataset");
    Standardizer st;
    st.mean.assign(train.feature_dim, 0.0);
    st.scale.assign(train.feature_dim, 1.0);
    const double n = static_cast<double>(train.size());
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto x = train.row(i);
        for (std::size_t j = 0; j < train.feature_dim; ++j) st.mean[j] += x[j];
    }
    for (double& m : st.mean) m /= n;
    std::vector<double> var(train.feature_dim, 0.0);
    for (std::size_t i = 0; i < train.size(); ++i) {
        const auto x = train.row(i);
        for (std::size_t j = 0; j < train.feature_dim; ++j) {
            const double d = x[j] - st.mean[j];
            var[j] += d * d;
        }
    }
    for (std::size_t j = 0; j < train.feature_dim; ++j) {
        var[j] /= n;
        // A constant feature stays centered but unscaled.
        st.scale[j] = var[j] < 1e-24 ? 1.0 : std::sqrt(var[j]);
    }
    return st;
}

void apply(const Standardizer& st, GroupedDataset& ds) {
    if (st.mean.size() != ds.feature_dim) {
        throw SchemaError("standardizer dimension does not match dataset");
    }
    for (std::size_t i = 0; i < ds.size(); ++i) {
        double* x = ds.features.data() + i * ds.feature_dim;
        for (std::size_t j = 0; j < ds.feature_dim; ++j) x[j] = (x[j] - st.mean[j]) / st.scale[j];
    }
}

std::uint64_t dataset_fingerprint(const GroupedDataset& ds) {
    std::uint64_t h = fnv1a(std::span<const double>(ds.features));
    h = fnv1a(std::to_string(ds.feature_dim), h);
    for (std::uint32_t g : ds.groups) h = fnv1a(std::to_string(g), h);
    for (std::uint32_t l : ds.labels) h = fnv1a(std::to_string(l), h);
    for (const auto& n : ds.group_names) h = fnv1a(n, h);
    for (const auto& n : ds.label_names) h = fnv1a(n, h);
    return h;
}

} // namespace fairdrift::data
