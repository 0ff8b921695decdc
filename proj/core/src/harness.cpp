#include "fairdrift/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>
#include <tuple>

#include "fairdrift/errors.hpp"
#include "fairdrift/fairlab.hpp"
#include "fairdrift/format.hpp"
#include "fairdrift/hash.hpp"
#include "fairdrift/rng.hpp"
#include "fairdrift/vhw.hpp"

namespace fs = std::filesystem;

namespace fairdrift::harness {

namespace {

// ---- config parsing ----

void check_keys(const nlohmann::json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    for (auto it = j.begin(); it != j.end(); ++it) {
        bool known = false;
        for (const char* key : allowed) {
            if (it.key() == key) {
                known = true;
                break;
            }
        }
        if (!known) throw ConfigError(where + ": unknown key '" + it.key() + "'");
    }
}

const nlohmann::json& object_section(const nlohmann::json& j, const char* name) {
    if (!j.contains(name)) throw ConfigError(std::string("missing section '") + name + "'");
    const auto& s = j.at(name);
    if (!s.is_object()) throw ConfigError(std::string("section '") + name + "' must be an object");
    return s;
}

data::GroupSpec parse_group(const nlohmann::json& g, std::size_t feature_dim,
                            std::size_t classes) {
    check_keys(g, "dataset.groups entry",
               {"name", "counts", "sigma", "means", "center", "angle_deg", "margin"});
    data::GroupSpec spec;
    spec.name = g.at("name").get<std::string>();
    if (spec.name.empty()) throw ConfigError("dataset group with an empty name");
    spec.class_counts = g.at("counts").get<std::vector<std::size_t>>();
    if (spec.class_counts.size() != classes) {
        throw ConfigError("group '" + spec.name + "': counts must list one entry per class");
    }
    spec.sigma = g.value("sigma", 1.0);
    if (!(std::isfinite(spec.sigma) && spec.sigma > 0.0)) {
        throw ConfigError("group '" + spec.name + "': sigma must be positive");
    }

    if (g.contains("means")) {
        if (g.contains("center") || g.contains("angle_deg") || g.contains("margin")) {
            throw ConfigError("group '" + spec.name +
                              "': give either means or the center/angle_deg/margin shorthand");
        }
        spec.class_means = g.at("means").get<std::vector<std::vector<double>>>();
        if (spec.class_means.size() != classes) {
            throw ConfigError("group '" + spec.name + "': means must list one point per class");
        }
        for (const auto& mean : spec.class_means) {
            if (mean.size() != feature_dim) {
                throw ConfigError("group '" + spec.name + "': class mean has the wrong dimension");
            }
            for (double v : mean) {
                if (!std::isfinite(v)) {
                    throw ConfigError("group '" + spec.name + "': non-finite class mean");
                }
            }
        }
        return spec;
    }

    // Shorthand: two class means margin apart along a direction in the first
    // two feature axes, centered on "center". Binary problems only.
    if (classes != 2) {
        throw ConfigError("group '" + spec.name +
                          "': the center/angle_deg/margin shorthand is binary only");
    }
    if (feature_dim < 2) {
        throw ConfigError("group '" + spec.name +
                          "': the shorthand needs at least two features; give explicit means");
    }
    if (!g.contains("margin")) {
        throw ConfigError("group '" + spec.name + "': shorthand form needs a margin");
    }
    const double margin = g.at("margin").get<double>();
    if (!(std::isfinite(margin) && margin > 0.0)) {
        throw ConfigError("group '" + spec.name + "': margin must be positive");
    }
    std::vector<double> center = g.value("center", std::vector<double>(feature_dim, 0.0));
    if (center.size() != feature_dim) {
        throw ConfigError("group '" + spec.name + "': center has the wrong dimension");
    }
    for (double v : center) {
        if (!std::isfinite(v)) throw ConfigError("group '" + spec.name + "': non-finite center");
    }
    const double angle_deg = g.value("angle_deg", 0.0);
    if (!std::isfinite(angle_deg)) {
        throw ConfigError("group '" + spec.name + "': non-finite angle_deg");
    }
    const double angle = angle_deg * std::acos(-1.0) / 180.0;
    std::vector<double> lo = center;
    std::vector<double> hi = center;
    lo[0] -= 0.5 * margin * std::cos(angle);
    lo[1] -= 0.5 * margin * std::sin(angle);
    hi[0] += 0.5 * margin * std::cos(angle);
    hi[1] += 0.5 * margin * std::sin(angle);
    spec.class_means = {std::move(lo), std::move(hi)};
    return spec;
}

DatasetSection parse_dataset(const nlohmann::json& root) {
    const auto& d = object_section(root, "dataset");
    DatasetSection out;
    const auto kind = d.at("kind").get<std::string>();
    if (kind == "synthetic") {
        out.kind = DatasetKind::synthetic;
        check_keys(d, "dataset",
                   {"kind", "seed", "feature_dim", "classes", "groups", "eval", "standardize"});
        auto& spec = out.synthetic;
        spec.seed = d.at("seed").get<std::uint64_t>();
        spec.feature_dim = d.at("feature_dim").get<std::size_t>();
        if (spec.feature_dim == 0) throw ConfigError("dataset.feature_dim must be positive");
        spec.num_classes = d.value("classes", std::size_t{2});
        if (spec.num_classes < 2) throw ConfigError("dataset.classes must be at least 2");
        const auto& groups = d.at("groups");
        if (!groups.is_array() || groups.empty()) {
            throw ConfigError("dataset.groups must be a non-empty array");
        }
        std::set<std::string> seen;
        for (const auto& g : groups) {
            auto parsed = parse_group(g, spec.feature_dim, spec.num_classes);
            if (!seen.insert(parsed.name).second) {
                throw ConfigError("duplicate dataset group '" + parsed.name + "'");
            }
            spec.groups.push_back(std::move(parsed));
        }
    } else if (kind == "csv") {
        out.kind = DatasetKind::csv;
        check_keys(d, "dataset",
                   {"kind", "path", "features", "group_column", "label_column", "eval",
                    "standardize"});
        out.csv_path = d.at("path").get<std::string>();
        out.csv_schema.feature_columns = d.at("features").get<std::vector<std::string>>();
        if (out.csv_schema.feature_columns.empty()) {
            throw ConfigError("dataset.features must name at least one column");
        }
        out.csv_schema.group_column = d.at("group_column").get<std::string>();
        out.csv_schema.label_column = d.at("label_column").get<std::string>();
    } else {
        throw ConfigError("dataset.kind must be 'synthetic' or 'csv'");
    }
    out.standardize = d.value("standardize", false);

    if (d.contains("eval")) {
        const auto& e = d.at("eval");
        check_keys(e, "dataset.eval", {"kind", "multiplier", "fraction", "seed"});
        const auto ekind = e.at("kind").get<std::string>();
        if (ekind == "fresh_draw") {
            if (out.kind == DatasetKind::csv) {
                throw ConfigError("dataset.eval: fresh_draw needs a synthetic dataset");
            }
            if (e.contains("fraction") || e.contains("seed")) {
                throw ConfigError("dataset.eval: fraction and seed belong to split");
            }
            out.eval.kind = EvalKind::fresh_draw;
            out.eval.multiplier = e.value("multiplier", std::size_t{5});
            if (out.eval.multiplier == 0) {
                throw ConfigError("dataset.eval.multiplier must be positive");
            }
        } else if (ekind == "split") {
            if (e.contains("multiplier")) {
                throw ConfigError("dataset.eval: multiplier belongs to fresh_draw");
            }
            out.eval.kind = EvalKind::split;
            out.eval.fraction = e.value("fraction", 0.8);
            if (!(out.eval.fraction > 0.0 && out.eval.fraction < 1.0)) {
                throw ConfigError("dataset.eval.fraction must be inside (0, 1)");
            }
            out.eval.seed = e.value("seed", std::uint64_t{1});
        } else {
            throw ConfigError("dataset.eval.kind must be 'fresh_draw' or 'split'");
        }
    } else {
        out.eval.kind =
            out.kind == DatasetKind::synthetic ? EvalKind::fresh_draw : EvalKind::split;
    }
    return out;
}

train::TrainConfig parse_train(const nlohmann::json& root) {
    train::TrainConfig cfg;
    if (!root.contains("train")) return cfg;
    const auto& t = object_section(root, "train");
    check_keys(t, "train",
               {"epochs", "batch_size", "lr", "momentum", "weight_decay", "schedule",
                "divergence_ceiling"});
    cfg.epochs = t.value("epochs", cfg.epochs);
    cfg.batch_size = t.value("batch_size", cfg.batch_size);
    cfg.lr = t.value("lr", cfg.lr);
    cfg.momentum = t.value("momentum", cfg.momentum);
    cfg.weight_decay = t.value("weight_decay", cfg.weight_decay);
    cfg.divergence_ceiling = t.value("divergence_ceiling", cfg.divergence_ceiling);
    if (t.contains("schedule")) {
        const auto name = t.at("schedule").get<std::string>();
        if (name == "constant") {
            cfg.schedule = train::LrSchedule::constant;
        } else if (name == "linear_warmup_decay") {
            cfg.schedule = train::LrSchedule::linear_warmup_decay;
        } else {
            throw ConfigError("train.schedule must be 'constant' or 'linear_warmup_decay'");
        }
    }
    cfg.validate();
    return cfg;
}

const char* schedule_name(train::LrSchedule schedule) {
    return schedule == train::LrSchedule::constant ? "constant" : "linear_warmup_decay";
}

// ---- small writing helpers ----

// Group and label names flow into CSV cells; the files use bare commas as
// separators, so separators inside a name get flattened.
std::string csv_cell(const std::string& raw) {
    std::string out = raw;
    for (char& ch : out) {
        if (ch == ',' || ch == '\n' || ch == '\r') ch = '_';
    }
    return out;
}

void finish_file(std::ofstream& out, const fs::path& path) {
    out.flush();
    if (!out) throw Error("failed writing " + path.string());
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw Error("cannot create " + path.string());
    out << j.dump(2) << '\n';
    finish_file(out, path);
}

nlohmann::json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw SchemaError(path.string() + " is not valid JSON");
    return j;
}

std::string cell_stem(std::uint64_t seed, std::size_t lambda_index) {
    return "seed" + std::to_string(seed) + "_lam" + std::to_string(lambda_index);
}

} // namespace

ExperimentConfig parse_config(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("config root must be a JSON object");
    check_keys(j, "config",
               {"run_id", "dataset", "model", "train", "profiles", "sweep", "mitigation",
                "output"});
    ExperimentConfig cfg;
    try {
        cfg.run_id = j.at("run_id").get<std::string>();
        if (cfg.run_id.empty()) throw ConfigError("run_id must not be empty");
        for (char ch : cfg.run_id) {
            const bool ok = (ch >= 'a' && ch <= 'z') || (ch >= 'A' && ch <= 'Z') ||
                            (ch >= '0' && ch <= '9') || ch == '_' || ch == '-' || ch == '.';
            if (!ok) {
                throw ConfigError("run_id may only use letters, digits, '_', '-' and '.'");
            }
        }

        cfg.dataset = parse_dataset(j);
        cfg.model = object_section(j, "model").get<models::ArchSpec>();
        cfg.model.validate();
        cfg.train_base = parse_train(j);

        const auto& profiles = j.at("profiles");
        if (!profiles.is_array() || profiles.empty()) {
            throw ConfigError("profiles must be a non-empty array of profile ids");
        }
        for (const auto& entry : profiles) {
            const auto id = entry.get<std::string>();
            vhw::builtin_profile(id); // existence check, throws ConfigError
            if (std::find(cfg.profile_ids.begin(), cfg.profile_ids.end(), id) !=
                cfg.profile_ids.end()) {
                throw ConfigError("duplicate profile id '" + id + "'");
            }
            cfg.profile_ids.push_back(id);
        }

        const auto& sweep = object_section(j, "sweep");
        check_keys(sweep, "sweep", {"seeds"});
        const auto& seeds = sweep.at("seeds");
        if (seeds.is_array()) {
            cfg.seeds = seeds.get<std::vector<std::uint64_t>>();
        } else if (seeds.is_object()) {
            check_keys(seeds, "sweep.seeds", {"count", "start"});
            const auto count = seeds.at("count").get<std::size_t>();
            const auto start = seeds.value("start", std::uint64_t{1});
            for (std::size_t k = 0; k < count; ++k) cfg.seeds.push_back(start + k);
        } else {
            throw ConfigError("sweep.seeds must be an array or a {count, start} object");
        }
        if (cfg.seeds.empty()) throw ConfigError("sweep.seeds must not be empty");
        if (std::set<std::uint64_t>(cfg.seeds.begin(), cfg.seeds.end()).size() !=
            cfg.seeds.size()) {
            throw ConfigError("sweep.seeds contains duplicates");
        }

        if (j.contains("mitigation")) {
            const auto& m = object_section(j, "mitigation");
            check_keys(m, "mitigation", {"lambdas", "max_accuracy_drop"});
            cfg.lambdas = m.at("lambdas").get<std::vector<double>>();
            if (cfg.lambdas.empty()) throw ConfigError("mitigation.lambdas must not be empty");
            for (double l : cfg.lambdas) {
                if (!(std::isfinite(l) && l >= 0.0)) {
                    throw ConfigError("mitigation.lambdas must be finite and non-negative");
                }
            }
            if (std::set<double>(cfg.lambdas.begin(), cfg.lambdas.end()).size() !=
                cfg.lambdas.size()) {
                throw ConfigError("mitigation.lambdas contains duplicates");
            }
            cfg.max_accuracy_drop = m.value("max_accuracy_drop", 2.0);
            if (!(std::isfinite(cfg.max_accuracy_drop) && cfg.max_accuracy_drop >= 0.0)) {
                throw ConfigError("mitigation.max_accuracy_drop must be non-negative");
            }
        }

        if (j.contains("output")) {
            const auto& o = object_section(j, "output");
            check_keys(o, "output", {"dir"});
            cfg.output_dir = o.at("dir").get<std::string>();
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad config: ") + e.what());
    }

    if (cfg.dataset.kind == DatasetKind::synthetic) {
        if (cfg.model.input_dim != cfg.dataset.synthetic.feature_dim) {
            throw ConfigError("model.input_dim does not match dataset.feature_dim");
        }
        if (cfg.model.classes != cfg.dataset.synthetic.num_classes) {
            throw ConfigError("model.classes does not match dataset.classes");
        }
    }
    return cfg;
}

ExperimentConfig load_config(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config: " + path.string());
    nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config is not valid JSON: " + path.string());
    return parse_config(j);
}

nlohmann::json config_json(const ExperimentConfig& config) {
    nlohmann::json j;
    j["run_id"] = config.run_id;

    nlohmann::json d;
    if (config.dataset.kind == DatasetKind::synthetic) {
        const auto& spec = config.dataset.synthetic;
        d["kind"] = "synthetic";
        d["seed"] = spec.seed;
        d["feature_dim"] = spec.feature_dim;
        d["classes"] = spec.num_classes;
        nlohmann::json groups = nlohmann::json::array();
        for (const auto& g : spec.groups) {
            // Always the resolved means: the shorthand and the explicit form
            // hash identically when they describe the same distribution.
            groups.push_back({{"name", g.name},
                              {"counts", g.class_counts},
                              {"sigma", g.sigma},
                              {"means", g.class_means}});
        }
        d["groups"] = std::move(groups);
    } else {
        d["kind"] = "csv";
        d["path"] = config.dataset.csv_path.string();
        d["features"] = config.dataset.csv_schema.feature_columns;
        d["group_column"] = config.dataset.csv_schema.group_column;
        d["label_column"] = config.dataset.csv_schema.label_column;
    }
    d["standardize"] = config.dataset.standardize;
    if (config.dataset.eval.kind == EvalKind::fresh_draw) {
        d["eval"] = {{"kind", "fresh_draw"}, {"multiplier", config.dataset.eval.multiplier}};
    } else {
        d["eval"] = {{"kind", "split"},
                     {"fraction", config.dataset.eval.fraction},
                     {"seed", config.dataset.eval.seed}};
    }
    j["dataset"] = std::move(d);

    j["model"] = config.model;
    j["train"] = {{"epochs", config.train_base.epochs},
                  {"batch_size", config.train_base.batch_size},
                  {"lr", config.train_base.lr},
                  {"momentum", config.train_base.momentum},
                  {"weight_decay", config.train_base.weight_decay},
                  {"schedule", schedule_name(config.train_base.schedule)},
                  {"divergence_ceiling", config.train_base.divergence_ceiling}};
    j["profiles"] = config.profile_ids;
    j["sweep"] = {{"seeds", config.seeds}};
    j["mitigation"] = {{"lambdas", config.lambdas},
                       {"max_accuracy_drop", config.max_accuracy_drop}};
    return j;
}

std::string config_fingerprint(const ExperimentConfig& config) {
    return hash_hex(fnv1a(std::string_view(config_json(config).dump())));
}

ResolvedData resolve_dataset(const DatasetSection& section) {
    ResolvedData out;
    if (section.kind == DatasetKind::synthetic) {
        out.train = data::gen_synthetic(section.synthetic);
        if (section.eval.kind == EvalKind::fresh_draw) {
            data::SyntheticSpec eval_spec = section.synthetic;
            eval_spec.seed = derive_seed(section.synthetic.seed, "eval");
            for (auto& g : eval_spec.groups) {
                for (auto& count : g.class_counts) count *= section.eval.multiplier;
            }
            out.eval = data::gen_synthetic(eval_spec);
        } else {
            auto parts = data::split(out.train, section.eval.fraction, section.eval.seed);
            out.train = std::move(parts.train);
            out.eval = std::move(parts.test);
            out.warnings = std::move(parts.warnings);
        }
    } else {
        auto full = data::load_csv(section.csv_path, section.csv_schema);
        auto parts = data::split(full, section.eval.fraction, section.eval.seed);
        out.train = std::move(parts.train);
        out.eval = std::move(parts.test);
        out.warnings = std::move(parts.warnings);
    }
    if (section.standardize) {
        const auto stats = data::fit_standardizer(out.train);
        data::apply(stats, out.train);
        data::apply(stats, out.eval);
    }
    if (out.train.group_names != out.eval.group_names) {
        throw SchemaError("train and eval splits disagree on group names");
    }
    return out;
}

RunOutcome run_experiment(const ExperimentConfig& config, std::size_t workers, bool force) {
    std::vector<vhw::VirtualHardwareProfile> profiles;
    for (const auto& id : config.profile_ids) profiles.push_back(vhw::builtin_profile(id));

    const std::string fingerprint = config_fingerprint(config);
    const fs::path run_dir = config.output_dir / config.run_id;
    const fs::path manifest_path = run_dir / "manifest.json";

    RunOutcome outcome;
    outcome.run_dir = run_dir;

    if (fs::exists(manifest_path)) {
        if (!force) {
            std::string existing;
            try {
                existing = read_json_file(manifest_path).value("config_hash", "");
            } catch (const Error&) {
                // unreadable manifest, handled below
            }
            if (existing == fingerprint) {
                // Report what the finished run already holds, so callers see
                // the same counts and failures a fresh execution would give.
                outcome.skipped = true;
                const auto manifest = read_json_file(manifest_path);
                for (const auto& r : manifest.value("runs", nlohmann::json::array())) {
                    if (r.value("status", "") == "ok") ++outcome.completed;
                }
                for (const auto& f : manifest.value("failures", nlohmann::json::array())) {
                    outcome.failures.push_back(f.get<std::string>());
                }
                return outcome;
            }
            throw ConfigError("run directory " + run_dir.string() +
                              " holds a different run; pass force to overwrite");
        }
    }
    if (fs::exists(run_dir)) {
        if (!force && !fs::is_empty(run_dir)) {
            throw ConfigError("run directory " + run_dir.string() +
                              " exists without a matching manifest; pass force to overwrite");
        }
        fs::remove_all(run_dir);
    }
    fs::create_directories(run_dir / "checkpoints");
    fs::create_directories(run_dir / "traces");
    fs::create_directories(run_dir / "reports");

    ResolvedData rd = resolve_dataset(config.dataset);
    if (rd.train.feature_dim != config.model.input_dim) {
        throw ConfigError("model.input_dim does not match the dataset feature count");
    }
    if (rd.train.num_classes != config.model.classes) {
        throw ConfigError("model.classes does not match the dataset label count");
    }

    const auto train_view = data::DataView::all(rd.train);
    const auto eval_all = data::DataView::all(rd.eval);
    const auto eval_groups = fairlab::group_views(rd.eval);
    const std::size_t num_groups = rd.train.num_groups();

    // Anchor for drift reports: the reference profile when the sweep has one.
    std::size_t anchor = 0;
    for (std::size_t p = 0; p < profiles.size(); ++p) {
        if (vhw::is_reference(profiles[p])) {
            anchor = p;
            break;
        }
    }

    struct Job {
        std::size_t li, si, pi;
    };
    std::vector<Job> jobs;
    for (std::size_t li = 0; li < config.lambdas.size(); ++li) {
        for (std::size_t si = 0; si < config.seeds.size(); ++si) {
            for (std::size_t pi = 0; pi < config.profile_ids.size(); ++pi) {
                jobs.push_back({li, si, pi});
            }
        }
    }

    struct Slot {
        std::optional<train::TrainResult> result;
        std::string error;
    };
    std::vector<Slot> slots(jobs.size());
    std::atomic<std::size_t> cursor{0};

    auto worker = [&] {
        for (;;) {
            const std::size_t k = cursor.fetch_add(1);
            if (k >= jobs.size()) return;
            const Job job = jobs[k];
            train::TrainConfig cfg = config.train_base;
            cfg.shuffle_seed = config.seeds[job.si];
            cfg.mitigation_lambda = config.lambdas[job.li];
            try {
                const auto init = models::init_model(config.model, config.seeds[job.si]);
                slots[k].result = train::sgd_train(init, train_view, profiles[job.pi], cfg);
            } catch (const std::exception& e) {
                slots[k].error = e.what();
            }
        }
    };

    const std::size_t thread_count =
        std::max<std::size_t>(1, std::min(workers == 0 ? 1 : workers, jobs.size()));
    if (thread_count == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(thread_count);
        for (std::size_t t = 0; t < thread_count; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    auto job_index = [&](std::size_t li, std::size_t si, std::size_t pi) {
        return (li * config.seeds.size() + si) * config.profile_ids.size() + pi;
    };

    // Everything below runs single threaded in a fixed order so reruns are
    // byte-identical.
    nlohmann::json manifest_runs = nlohmann::json::array();
    nlohmann::json manifest_cells = nlohmann::json::array();

    struct MetricsRow {
        std::size_t li, si, pi;
        std::uint32_t g;
        double loss, acc, gnorm, lmax, dtb;
    };
    struct SensRow {
        std::size_t li, si;
        std::string group;
        double delta, term1, term2, rhs, slack;
    };
    std::vector<MetricsRow> metric_rows;
    std::vector<SensRow> sens_rows;

    for (std::size_t li = 0; li < config.lambdas.size(); ++li) {
        const double lambda = config.lambdas[li];
        for (std::size_t si = 0; si < config.seeds.size(); ++si) {
            const std::uint64_t seed = config.seeds[si];
            const std::string stem = cell_stem(seed, li);

            bool cell_ok = true;
            for (std::size_t pi = 0; pi < config.profile_ids.size(); ++pi) {
                const auto& slot = slots[job_index(li, si, pi)];
                nlohmann::json entry = {{"seed", seed},
                                        {"lambda", lambda},
                                        {"lambda_index", li},
                                        {"profile_id", config.profile_ids[pi]}};
                if (slot.result) {
                    const std::string job_name = stem + "_" + config.profile_ids[pi];
                    const std::string ckpt = "checkpoints/" + job_name + ".ckpt";
                    const std::string trace = "traces/" + job_name + ".csv";
                    models::save_checkpoint(run_dir / ckpt, slot.result->model,
                                            {seed, config.profile_ids[pi], fingerprint});
                    {
                        std::ofstream out(run_dir / trace);
                        if (!out) throw Error("cannot create " + (run_dir / trace).string());
                        out << "epoch,train_loss,grad_norm,penalty";
                        for (const auto& name : rd.train.group_names) {
                            out << ",dtb_" << csv_cell(name);
                        }
                        out << '\n';
                        for (const auto& row : slot.result->trace) {
                            out << row.epoch << ',' << fmt_g17(row.train_loss) << ','
                                << fmt_g17(row.grad_norm) << ',' << fmt_g17(row.penalty);
                            for (double v : row.group_dtb) out << ',' << fmt_g17(v);
                            out << '\n';
                        }
                        finish_file(out, run_dir / trace);
                    }
                    entry["status"] = "ok";
                    entry["param_fnv"] = hash_hex(slot.result->param_hash);
                    entry["checkpoint"] = ckpt;
                    entry["trace"] = trace;
                    outcome.completed += 1;
                } else {
                    entry["status"] = "failed";
                    entry["error"] = slot.error;
                    outcome.failures.push_back("seed=" + std::to_string(seed) +
                                               " lambda=" + fmt_g17(lambda) + " profile=" +
                                               config.profile_ids[pi] + ": " + slot.error);
                    cell_ok = false;
                }
                manifest_runs.push_back(std::move(entry));
            }

            nlohmann::json cell = {{"seed", seed}, {"lambda", lambda}, {"lambda_index", li}};
            if (!cell_ok) {
                cell["complete"] = false;
                manifest_cells.push_back(std::move(cell));
                continue;
            }

            try {
                std::vector<models::Model> trained;
                trained.reserve(config.profile_ids.size());
                for (std::size_t pi = 0; pi < config.profile_ids.size(); ++pi) {
                    trained.push_back(slots[job_index(li, si, pi)].result->model);
                }

                const auto sens = fairlab::hardware_sensitivity(trained, config.profile_ids,
                                                                rd.train);
                const auto taylor = fairlab::taylor_bound_report(
                    trained, config.profile_ids, anchor, rd.train,
                    derive_seed(seed, "taylor"));

                nlohmann::json report;
                report["run_id"] = config.run_id;
                report["seed"] = seed;
                report["lambda"] = lambda;
                report["sensitivity"] = sens;
                report["taylor"] = taylor;

                if (config.model.head == models::Head::sigmoid) {
                    report["hessian_bound"] = fairlab::hessian_bound_report(
                        trained[anchor], train_view, derive_seed(seed, "bound"));
                } else {
                    report["hessian_bound"] = nullptr;
                }

                const auto anchor_grads = fairlab::group_gradients(trained[anchor], rd.train);
                const auto angles = fairlab::gradient_angles(anchor_grads);
                report["angles"] = {
                    {"cosine", angles.cosine},
                    {"minority_group", rd.train.group_names[angles.minority_group]},
                    {"hypothesis_holds", angles.hypothesis_holds}};
                report["boundary"] = fairlab::distance_to_boundary(trained[anchor], rd.train);

                nlohmann::json eval_list = nlohmann::json::array();
                for (std::size_t pi = 0; pi < config.profile_ids.size(); ++pi) {
                    const auto& model = trained[pi];
                    const auto grads = pi == anchor
                                           ? anchor_grads
                                           : fairlab::group_gradients(model, rd.train);
                    const auto curvature = fairlab::group_hessian_lmax(
                        model, rd.train, derive_seed(seed, "curvature", pi));
                    const auto eval_boundary = fairlab::distance_to_boundary(model, rd.eval);

                    double acc_lo = 1.0;
                    double acc_hi = 0.0;
                    nlohmann::json group_acc = nlohmann::json::array();
                    for (std::uint32_t g = 0; g < num_groups; ++g) {
                        const double acc = fairlab::accuracy(model, eval_groups[g]);
                        acc_lo = std::min(acc_lo, acc);
                        acc_hi = std::max(acc_hi, acc);
                        group_acc.push_back(
                            {{"group", rd.train.group_names[g]}, {"accuracy", acc}});
                        metric_rows.push_back({li, si, pi, g, sens.loss[pi][g], acc,
                                               grads.norm[g], curvature.lambda_max[g],
                                               eval_boundary.dtb_mean[g]});
                    }
                    eval_list.push_back({{"profile_id", config.profile_ids[pi]},
                                         {"accuracy", fairlab::accuracy(model, eval_all)},
                                         {"spread", acc_hi - acc_lo},
                                         {"groups", std::move(group_acc)}});
                }
                report["eval"] = std::move(eval_list);

                for (const auto& row : taylor.rows) {
                    sens_rows.push_back({li, si, row.group, row.delta, row.term1, row.term2,
                                         row.rhs, row.slack});
                }

                const std::string report_rel = "reports/" + stem + ".json";
                write_json_file(run_dir / report_rel, report);
                cell["complete"] = true;
                cell["report"] = report_rel;
            } catch (const std::exception& e) {
                outcome.failures.push_back("seed=" + std::to_string(seed) +
                                           " lambda=" + fmt_g17(lambda) +
                                           " report: " + e.what());
                cell["complete"] = false;
                cell["error"] = e.what();
            }
            manifest_cells.push_back(std::move(cell));
        }
    }

    // Flat tables, row order (lambda, seed, profile, group).
    {
        const fs::path path = run_dir / "metrics.csv";
        std::ofstream out(path);
        if (!out) throw Error("cannot create " + path.string());
        out << "run_id,profile_id,seed,lambda,group,loss,accuracy,grad_norm,lambda_max,"
               "dtb_mean\n";
        for (const auto& r : metric_rows) {
            out << csv_cell(config.run_id) << ',' << config.profile_ids[r.pi] << ','
                << config.seeds[r.si] << ',' << fmt_g17(config.lambdas[r.li]) << ','
                << csv_cell(rd.train.group_names[r.g]) << ',' << fmt_g17(r.loss) << ','
                << fmt_g17(r.acc) << ',' << fmt_g17(r.gnorm) << ',' << fmt_g17(r.lmax) << ','
                << fmt_g17(r.dtb) << '\n';
        }
        finish_file(out, path);
    }
    {
        const fs::path path = run_dir / "sensitivity.csv";
        std::ofstream out(path);
        if (!out) throw Error("cannot create " + path.string());
        out << "seed,lambda,group,delta,term1,term2,rhs,slack\n";
        for (const auto& r : sens_rows) {
            out << config.seeds[r.si] << ',' << fmt_g17(config.lambdas[r.li]) << ','
                << csv_cell(r.group) << ',' << fmt_g17(r.delta) << ',' << fmt_g17(r.term1)
                << ',' << fmt_g17(r.term2) << ',' << fmt_g17(r.rhs) << ',' << fmt_g17(r.slack)
                << '\n';
        }
        finish_file(out, path);
    }

    // Mean and sample stddev over seeds for every (lambda, profile, group).
    {
        struct Acc {
            std::vector<double> loss, acc, gnorm, lmax, dtb;
        };
        std::map<std::tuple<std::size_t, std::size_t, std::uint32_t>, Acc> cellstats;
        for (const auto& r : metric_rows) {
            auto& a = cellstats[{r.li, r.pi, r.g}];
            a.loss.push_back(r.loss);
            a.acc.push_back(r.acc);
            a.gnorm.push_back(r.gnorm);
            a.lmax.push_back(r.lmax);
            a.dtb.push_back(r.dtb);
        }
        auto mean_of = [](const std::vector<double>& v) {
            double s = 0.0;
            for (double x : v) s += x;
            return s / static_cast<double>(v.size());
        };
        auto stddev_of = [&](const std::vector<double>& v) {
            if (v.size() < 2) return 0.0;
            const double m = mean_of(v);
            double s = 0.0;
            for (double x : v) s += (x - m) * (x - m);
            return std::sqrt(s / static_cast<double>(v.size() - 1));
        };
        for (const char* which : {"metrics_mean.csv", "metrics_stddev.csv"}) {
            const bool want_mean = std::string(which) == "metrics_mean.csv";
            const fs::path path = run_dir / which;
            std::ofstream out(path);
            if (!out) throw Error("cannot create " + path.string());
            out << "profile_id,lambda,group,loss,accuracy,grad_norm,lambda_max,dtb_mean\n";
            for (const auto& [key, a] : cellstats) {
                const auto [li, pi, g] = key;
                auto stat = [&](const std::vector<double>& v) {
                    return want_mean ? mean_of(v) : stddev_of(v);
                };
                out << config.profile_ids[pi] << ',' << fmt_g17(config.lambdas[li]) << ','
                    << csv_cell(rd.train.group_names[g]) << ',' << fmt_g17(stat(a.loss)) << ','
                    << fmt_g17(stat(a.acc)) << ',' << fmt_g17(stat(a.gnorm)) << ','
                    << fmt_g17(stat(a.lmax)) << ',' << fmt_g17(stat(a.dtb)) << '\n';
            }
            finish_file(out, path);
        }
    }

    write_json_file(run_dir / "config.json", config_json(config));

    nlohmann::json manifest;
    manifest["format"] = "fairdrift-run-v1";
    manifest["tool"] = tool_version;
    manifest["run_id"] = config.run_id;
    manifest["config_hash"] = fingerprint;
    manifest["config_file"] = "config.json";
    manifest["dataset"] = {{"train_fingerprint", hash_hex(data::dataset_fingerprint(rd.train))},
                           {"eval_fingerprint", hash_hex(data::dataset_fingerprint(rd.eval))},
                           {"train_rows", rd.train.size()},
                           {"eval_rows", rd.eval.size()},
                           {"groups", rd.train.group_names},
                           {"warnings", rd.warnings}};
    manifest["notes"] = {"optimizer momentum is fixed at 0.9 for all stock runs",
                         "loss, gradient and curvature diagnostics use the training rows; "
                         "accuracy and boundary distance use the eval rows"};
    manifest["profiles"] = config.profile_ids;
    manifest["seeds"] = config.seeds;
    manifest["lambdas"] = config.lambdas;
    manifest["anchor_profile"] = config.profile_ids[anchor];
    manifest["runs"] = std::move(manifest_runs);
    manifest["cells"] = std::move(manifest_cells);
    manifest["tables"] = {{"metrics", "metrics.csv"},
                          {"sensitivity", "sensitivity.csv"},
                          {"metrics_mean", "metrics_mean.csv"},
                          {"metrics_stddev", "metrics_stddev.csv"}};
    manifest["failures"] = outcome.failures;
    write_json_file(manifest_path, manifest);

    return outcome;
}

MitigationChoice mitigation_study(const ExperimentConfig& config, std::size_t workers,
                                  bool force) {
    std::size_t baseline_index = config.lambdas.size();
    for (std::size_t li = 0; li < config.lambdas.size(); ++li) {
        if (config.lambdas[li] == 0.0) {
            baseline_index = li;
            break;
        }
    }
    if (baseline_index == config.lambdas.size()) {
        throw ConfigError("mitigation study needs lambda 0 in the grid as the baseline");
    }

    const RunOutcome outcome = run_experiment(config, workers, force);
    const fs::path run_dir = outcome.run_dir;

    struct LambdaStats {
        std::size_t cells = 0; // (cell, profile) samples
        double acc_sum = 0.0;
        double spread_sum = 0.0;
        std::map<std::string, std::pair<double, std::size_t>> group_acc;
    };
    std::vector<LambdaStats> stats(config.lambdas.size());

    for (std::size_t li = 0; li < config.lambdas.size(); ++li) {
        for (std::uint64_t seed : config.seeds) {
            const fs::path report_path =
                run_dir / "reports" / (cell_stem(seed, li) + ".json");
            if (!fs::exists(report_path)) continue;
            const auto report = read_json_file(report_path);
            for (const auto& entry : report.at("eval")) {
                auto& s = stats[li];
                s.cells += 1;
                s.acc_sum += entry.at("accuracy").get<double>();
                s.spread_sum += entry.at("spread").get<double>();
                for (const auto& g : entry.at("groups")) {
                    auto& slot = s.group_acc[g.at("group").get<std::string>()];
                    slot.first += g.at("accuracy").get<double>();
                    slot.second += 1;
                }
            }
        }
    }

    if (stats[baseline_index].cells == 0) {
        throw Error("every baseline (lambda 0) cell failed; cannot select a penalty weight");
    }

    auto mean_acc = [&](std::size_t li) {
        return stats[li].acc_sum / static_cast<double>(stats[li].cells);
    };
    auto mean_spread = [&](std::size_t li) {
        return stats[li].spread_sum / static_cast<double>(stats[li].cells);
    };

    // Scan in ascending lambda order with strict improvement, so ties land on
    // the smaller weight. Accuracy budget is in percentage points.
    std::vector<std::size_t> order(config.lambdas.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return config.lambdas[a] < config.lambdas[b];
    });

    const double budget = mean_acc(baseline_index) - config.max_accuracy_drop / 100.0;
    std::size_t best = baseline_index;
    bool nonzero_candidate = false;
    for (std::size_t li : order) {
        if (stats[li].cells == 0) continue;
        if (mean_acc(li) < budget) continue;
        if (config.lambdas[li] != 0.0) nonzero_candidate = true;
        if (mean_spread(li) < mean_spread(best)) best = li;
    }

    MitigationChoice choice;
    choice.lambda_star = config.lambdas[best];
    choice.spread_baseline = mean_spread(baseline_index);
    choice.spread_star = mean_spread(best);
    choice.accuracy_baseline = mean_acc(baseline_index);
    choice.accuracy_star = mean_acc(best);
    choice.constrained = nonzero_candidate;

    const auto group_names = read_json_file(run_dir / "manifest.json")
                                 .at("dataset")
                                 .at("groups")
                                 .get<std::vector<std::string>>();
    for (const auto& name : group_names) {
        GroupAccuracy row;
        row.group = name;
        const auto& base = stats[baseline_index].group_acc;
        const auto& star = stats[best].group_acc;
        if (auto it = base.find(name); it != base.end() && it->second.second > 0) {
            row.baseline = it->second.first / static_cast<double>(it->second.second);
        }
        if (auto it = star.find(name); it != star.end() && it->second.second > 0) {
            row.mitigated = it->second.first / static_cast<double>(it->second.second);
        }
        choice.groups.push_back(std::move(row));
    }

    nlohmann::json mj;
    mj["format"] = "fairdrift-mitigation-v1";
    mj["lambda_star"] = choice.lambda_star;
    mj["max_accuracy_drop"] = config.max_accuracy_drop;
    mj["constrained"] = choice.constrained;
    mj["accuracy"] = {{"baseline", choice.accuracy_baseline},
                      {"mitigated", choice.accuracy_star}};
    mj["spread"] = {{"baseline", choice.spread_baseline}, {"mitigated", choice.spread_star}};
    nlohmann::json per_lambda = nlohmann::json::array();
    for (std::size_t li : order) {
        nlohmann::json entry = {{"lambda", config.lambdas[li]}, {"cells", stats[li].cells}};
        if (stats[li].cells > 0) {
            entry["accuracy"] = mean_acc(li);
            entry["spread"] = mean_spread(li);
        }
        per_lambda.push_back(std::move(entry));
    }
    mj["per_lambda"] = std::move(per_lambda);
    nlohmann::json groups = nlohmann::json::array();
    for (const auto& g : choice.groups) {
        groups.push_back(
            {{"group", g.group}, {"baseline", g.baseline}, {"mitigated", g.mitigated}});
    }
    mj["groups"] = std::move(groups);
    write_json_file(run_dir / "mitigation.json", mj);

    auto manifest = read_json_file(run_dir / "manifest.json");
    manifest["tables"]["mitigation"] = "mitigation.json";
    write_json_file(run_dir / "manifest.json", manifest);

    return choice;
}

void write_report(const fs::path& run_dir, std::ostream& out) {
    const fs::path manifest_path = run_dir / "manifest.json";
    if (!fs::exists(manifest_path)) {
        throw Error(run_dir.string() + " is not a run directory (no manifest.json)");
    }
    const auto manifest = read_json_file(manifest_path);

    out << "run " << manifest.value("run_id", "?") << "  (" << manifest.value("tool", "?")
        << ", config " << manifest.value("config_hash", "?").substr(0, 12) << ")\n";
    const auto& ds = manifest.at("dataset");
    out << "data: " << ds.at("train_rows").get<std::size_t>() << " train rows, "
        << ds.at("eval_rows").get<std::size_t>() << " eval rows, groups:";
    for (const auto& g : ds.at("groups")) out << ' ' << g.get<std::string>();
    out << '\n';
    for (const auto& w : ds.at("warnings")) out << "warning: " << w.get<std::string>() << '\n';

    std::size_t ok = 0;
    std::size_t failed = 0;
    for (const auto& r : manifest.at("runs")) {
        if (r.at("status") == "ok") {
            ++ok;
        } else {
            ++failed;
        }
    }
    out << "training runs: " << ok << " ok, " << failed << " failed\n";
    for (const auto& f : manifest.at("failures")) {
        out << "failure: " << f.get<std::string>() << '\n';
    }

    // Per-lambda aggregates straight from the per-cell reports.
    struct Agg {
        std::size_t cells = 0;
        double xi = 0.0, rho = 0.0, acc = 0.0, spread = 0.0;
    };
    std::map<double, Agg> by_lambda;
    for (const auto& cell : manifest.at("cells")) {
        if (!cell.value("complete", false)) continue;
        const auto report = read_json_file(run_dir / cell.at("report").get<std::string>());
        auto& agg = by_lambda[cell.at("lambda").get<double>()];
        const auto& xi = report.at("sensitivity").at("xi");
        double xi_mean = 0.0;
        for (const auto& v : xi) xi_mean += v.get<double>();
        if (!xi.empty()) xi_mean /= static_cast<double>(xi.size());
        double acc_mean = 0.0;
        double spread_mean = 0.0;
        const auto& evals = report.at("eval");
        for (const auto& e : evals) {
            acc_mean += e.at("accuracy").get<double>();
            spread_mean += e.at("spread").get<double>();
        }
        if (!evals.empty()) {
            acc_mean /= static_cast<double>(evals.size());
            spread_mean /= static_cast<double>(evals.size());
        }
        agg.cells += 1;
        agg.xi += xi_mean;
        agg.rho += report.at("sensitivity").at("rho_max").get<double>();
        agg.acc += acc_mean;
        agg.spread += spread_mean;
    }

    if (!by_lambda.empty()) {
        out << "\nlambda        cells  accuracy   spread       xi(mean)     rho(max)\n";
        char line[160];
        for (const auto& [lambda, agg] : by_lambda) {
            const double n = static_cast<double>(agg.cells);
            std::snprintf(line, sizeof line, "%-12.6g %6zu  %8.4f  %8.4f  %12.5g %12.5g",
                          lambda, agg.cells, agg.acc / n, agg.spread / n, agg.xi / n,
                          agg.rho / n);
            out << line << '\n';
        }
    }

    const fs::path mitigation_path = run_dir / "mitigation.json";
    if (fs::exists(mitigation_path)) {
        const auto mj = read_json_file(mitigation_path);
        char line[200];
        std::snprintf(line, sizeof line,
                      "\nmitigation: lambda* = %g  spread %.4f -> %.4f  accuracy %.4f -> %.4f\n",
                      mj.at("lambda_star").get<double>(),
                      mj.at("spread").at("baseline").get<double>(),
                      mj.at("spread").at("mitigated").get<double>(),
                      mj.at("accuracy").at("baseline").get<double>(),
                      mj.at("accuracy").at("mitigated").get<double>());
        out << line;
        for (const auto& g : mj.at("groups")) {
            std::snprintf(line, sizeof line, "  group %-16s %.4f -> %.4f\n",
                          g.at("group").get<std::string>().c_str(),
                          g.at("baseline").get<double>(), g.at("mitigated").get<double>());
            out << line;
        }
    }
    out.flush();
}

} // namespace fairdrift::harness
