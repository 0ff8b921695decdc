#pragma once

// Experiment orchestration: a JSON config describes one sweep (dataset, model,
// optimizer, hardware profiles, seeds, penalty weights); run_experiment turns
// it into a run directory full of checkpoints, traces, per-cell reports and
// flat CSV tables, all listed in a manifest. Reruns of the same config are
// byte-identical, so the manifest carries no clocks, hostnames or paths
// outside the run directory.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairdrift/data.hpp"
#include "fairdrift/models.hpp"
#include "fairdrift/train.hpp"

namespace fairdrift::harness {

inline constexpr const char* tool_version = "fairdrift 0.1.0";

enum class DatasetKind { synthetic, csv };
enum class EvalKind { fresh_draw, split };

struct EvalSection {
    EvalKind kind = EvalKind::fresh_draw;
    std::size_t multiplier = 5;   // fresh_draw: eval set size per group/class
    double fraction = 0.8;        // split: train share
    std::uint64_t seed = 1;       // split: shuffle stream
};

struct DatasetSection {
    DatasetKind kind = DatasetKind::synthetic;
    data::SyntheticSpec synthetic;       // populated for synthetic configs
    std::filesystem::path csv_path;      // populated for csv configs
    data::CsvSchema csv_schema;
    EvalSection eval;
    bool standardize = false; // fit on train rows, apply to train and eval
};

struct ExperimentConfig {
    std::string run_id;
    DatasetSection dataset;
    models::ArchSpec model;
    train::TrainConfig train_base; // shuffle_seed and mitigation_lambda filled per cell
    std::vector<std::string> profile_ids;
    std::vector<std::uint64_t> seeds;
    std::vector<double> lambdas{0.0};
    double max_accuracy_drop = 2.0; // percentage points, for selecting lambda*
    std::filesystem::path output_dir = "runs";
};

// Parse and validate a config file. Unknown profile ids, empty sweeps and
// malformed sections all raise ConfigError with the offending key.
ExperimentConfig load_config(const std::filesystem::path& path);
ExperimentConfig parse_config(const nlohmann::json& j);

// Canonical JSON image of the config and its fingerprint. The fingerprint is
// what reruns compare against before skipping work.
nlohmann::json config_json(const ExperimentConfig& config);
std::string config_fingerprint(const ExperimentConfig& config);

// Train/eval material resolved from the dataset section.
struct ResolvedData {
    data::GroupedDataset train;
    data::GroupedDataset eval;
    std::vector<std::string> warnings;
};

ResolvedData resolve_dataset(const DatasetSection& section);

struct RunOutcome {
    std::filesystem::path run_dir;
    bool skipped = false;            // manifest already present for this config
    std::size_t completed = 0;       // training cells that finished
    std::vector<std::string> failures; // "seed=s lambda=l profile=p: reason"
};

// Execute the sweep. force wipes a mismatching or partial run directory;
// without it a finished identical run is skipped and a different one refuses
// to be overwritten. Returns the failures instead of throwing so one diverged
// cell cannot take down the sweep.
RunOutcome run_experiment(const ExperimentConfig& config, std::size_t workers, bool force);

struct GroupAccuracy {
    std::string group;
    double baseline = 0.0;
    double mitigated = 0.0;
};

struct MitigationChoice {
    double lambda_star = 0.0;
    double spread_baseline = 0.0;  // mean over seeds and profiles of the
    double spread_star = 0.0;      // max-min group accuracy gap
    double accuracy_baseline = 0.0;
    double accuracy_star = 0.0;
    std::vector<GroupAccuracy> groups;
    bool constrained = true; // false when no nonzero lambda met the accuracy budget
};

// Run (or reuse) the sweep, then pick the penalty weight with the smallest
// group accuracy spread subject to the overall accuracy budget. Requires
// lambda 0 in the grid as the baseline. Writes mitigation.json into the run
// directory and returns the choice.
MitigationChoice mitigation_study(const ExperimentConfig& config, std::size_t workers,
                                  bool force);

// Human summary of a finished run directory, for the report subcommand.
void write_report(const std::filesystem::path& run_dir, std::ostream& out);

} // namespace fairdrift::harness
