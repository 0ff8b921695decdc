// Command-line front end. Four subcommands map onto the library's entry
// points: `run` executes a sweep config, `mitigate` adds the penalty-weight
// selection on top, `verify` runs the release checks, `report` summarizes a
// finished run directory. Exit code is 0 only when nothing failed.

#include <cstddef>
#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "fairdrift/accept.hpp"
#include "fairdrift/errors.hpp"
#include "fairdrift/harness.hpp"

namespace {

struct SweepArgs {
    std::string config_path;
    std::size_t workers = 1;
    bool force = false;
    std::string output_dir; // empty: keep the config's own setting
};

void add_sweep_options(CLI::App& cmd, SweepArgs& args) {
    cmd.add_option("config", args.config_path, "experiment config (JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    cmd.add_option("--workers", args.workers, "training cells to run in parallel")
        ->check(CLI::PositiveNumber);
    cmd.add_flag("--force", args.force, "wipe a mismatching or partial run directory");
    cmd.add_option("--output", args.output_dir, "run directory root (overrides config)");
}

fairdrift::harness::ExperimentConfig load_sweep_config(const SweepArgs& args) {
    auto config = fairdrift::harness::load_config(args.config_path);
    if (!args.output_dir.empty()) {
        config.output_dir = args.output_dir;
    }
    return config;
}

int print_outcome(const fairdrift::harness::RunOutcome& outcome) {
    if (outcome.skipped) {
        std::cout << "up to date: " << outcome.run_dir.string() << " (reusing "
                  << outcome.completed << " cells)\n";
    } else {
        std::cout << outcome.run_dir.string() << ": " << outcome.completed
                  << " cells completed\n";
    }
    for (const auto& failure : outcome.failures) {
        std::cerr << "failed: " << failure << '\n';
    }
    return outcome.failures.empty() ? 0 : 1;
}

int cmd_run(const SweepArgs& args) {
    const auto config = load_sweep_config(args);
    const auto outcome = fairdrift::harness::run_experiment(config, args.workers, args.force);
    return print_outcome(outcome);
}

int cmd_mitigate(const SweepArgs& args) {
    const auto config = load_sweep_config(args);
    const auto outcome = fairdrift::harness::run_experiment(config, args.workers, args.force);
    const int run_status = print_outcome(outcome);

    // The sweep above is reused, so this only aggregates and writes
    // mitigation.json into the run directory.
    const auto choice = fairdrift::harness::mitigation_study(config, args.workers, false);

    std::cout << "lambda* = " << choice.lambda_star << '\n';
    std::cout << "  spread   " << choice.spread_baseline << " -> " << choice.spread_star
              << '\n';
    std::cout << "  accuracy " << choice.accuracy_baseline << " -> " << choice.accuracy_star
              << '\n';
    for (const auto& row : choice.groups) {
        std::cout << "  " << row.group << " " << row.baseline << " -> " << row.mitigated
                  << '\n';
    }
    if (!choice.constrained) {
        std::cout << "note: no nonzero weight stayed inside the accuracy budget\n";
    }
    return run_status;
}

int cmd_verify(const std::string& suite_name) {
    const auto suite = fairdrift::accept::parse_suite(suite_name);
    const auto results = fairdrift::accept::run_suite(suite, std::cout);
    return fairdrift::accept::all_passed(results) ? 0 : 1;
}

int cmd_report(const std::string& run_dir) {
    fairdrift::harness::write_report(run_dir, std::cout);
    return 0;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"deterministic trainer with per-group drift diagnostics"};
    app.set_version_flag("--version", fairdrift::harness::tool_version);
    app.require_subcommand(1);

    SweepArgs run_args;
    auto* run_cmd = app.add_subcommand("run", "execute a sweep from a config file");
    add_sweep_options(*run_cmd, run_args);

    SweepArgs mitigate_args;
    auto* mitigate_cmd =
        app.add_subcommand("mitigate", "run the sweep and pick the penalty weight");
    add_sweep_options(*mitigate_cmd, mitigate_args);

    std::string suite_name = "all";
    auto* verify_cmd = app.add_subcommand("verify", "run the release checks");
    verify_cmd->add_option("suite", suite_name, "fast, theorems, mitigation or all");

    std::string report_dir;
    auto* report_cmd = app.add_subcommand("report", "summarize a finished run directory");
    report_cmd->add_option("run_dir", report_dir, "run directory with a manifest")
        ->required()
        ->check(CLI::ExistingDirectory);

    CLI11_PARSE(app, argc, argv);

    try {
        if (run_cmd->parsed()) return cmd_run(run_args);
        if (mitigate_cmd->parsed()) return cmd_mitigate(mitigate_args);
        if (verify_cmd->parsed()) return cmd_verify(suite_name);
        return cmd_report(report_dir);
    } catch (const fairdrift::Error& err) {
        std::cerr << "error: " << err.what() << '\n';
        return 1;
    } catch (const std::exception& err) {
        std::cerr << "unexpected error: " << err.what() << '\n';
        return 1;
    }
}
