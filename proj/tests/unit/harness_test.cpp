#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "fairdrift/errors.hpp"
#include "fairdrift/harness.hpp"
#include "fairdrift/hash.hpp"
#include "fairdrift/models.hpp"

using namespace fairdrift;
namespace fs = std::filesystem;

namespace {

nlohmann::json base_config() {
    return {
        {"run_id", "t0"},
        {"dataset",
         {{"kind", "synthetic"},
          {"seed", 404},
          {"feature_dim", 2},
          {"groups",
           nlohmann::json::array(
               {{{"name", "big"}, {"counts", {20, 20}}, {"margin", 2.4}, {"sigma", 0.8}},
                {{"name", "small"},
                 {"counts", {8, 8}},
                 {"margin", 1.2},
                 {"angle_deg", 90.0},
                 {"center", {1.0, -0.5}},
                 {"sigma", 0.8}}})},
          {"eval", {{"kind", "fresh_draw"}, {"multiplier", 2}}}}},
        {"model",
         {{"input_dim", 2},
          {"hidden", nlohmann::json::array()},
          {"head", "sigmoid"},
          {"classes", 2}}},
        {"train", {{"epochs", 2}, {"batch_size", 8}, {"lr", 0.1}, {"schedule", "constant"}}},
        {"profiles", {"hw_ref", "hw_seq32"}},
        {"sweep", {{"seeds", {11, 12}}}},
        {"mitigation", {{"lambdas", {0.0, 0.01}}, {"max_accuracy_drop", 2.0}}},
        {"output", {{"dir", "harness_tmp/runs"}}}};
}

std::string slurp(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    REQUIRE(bool(in));
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

std::size_t line_count(const std::string& text) {
    std::size_t n = 0;
    for (char ch : text) {
        if (ch == '\n') ++n;
    }
    return n;
}

// Every file in the run directory must be claimed by the manifest exactly
// once; the manifest itself is the index and stays unlisted.
void check_manifest_covers_dir(const fs::path& run_dir) {
    const auto manifest = nlohmann::json::parse(slurp(run_dir / "manifest.json"));
    std::set<std::string> referenced;
    auto add = [&](const std::string& rel) {
        CAPTURE(rel);
        REQUIRE(referenced.insert(rel).second);
    };
    add(manifest.at("config_file").get<std::string>());
    for (const auto& [name, rel] : manifest.at("tables").items()) {
        (void)name;
        add(rel.get<std::string>());
    }
    for (const auto& run : manifest.at("runs")) {
        if (run.at("status") == "ok") {
            add(run.at("checkpoint").get<std::string>());
            add(run.at("trace").get<std::string>());
        }
    }
    for (const auto& cell : manifest.at("cells")) {
        if (cell.value("complete", false)) add(cell.at("report").get<std::string>());
    }

    std::set<std::string> present;
    for (const auto& entry : fs::recursive_directory_iterator(run_dir)) {
        if (!entry.is_regular_file()) continue;
        const auto rel = fs::relative(entry.path(), run_dir).generic_string();
        if (rel == "manifest.json") continue;
        present.insert(rel);
    }
    CHECK(present == referenced);
}

} // namespace

TEST_SUITE_BEGIN("harness");

TEST_CASE("config parsing resolves shorthand groups and defaults") {
    auto cfg = harness::parse_config(base_config());
    CHECK(cfg.run_id == "t0");
    CHECK(cfg.dataset.kind == harness::DatasetKind::synthetic);
    REQUIRE(cfg.dataset.synthetic.groups.size() == 2);

    // margin 2.4 along angle 0: means straddle the origin on the x axis
    const auto& g0 = cfg.dataset.synthetic.groups[0];
    CHECK(g0.class_means[0][0] == doctest::Approx(-1.2));
    CHECK(g0.class_means[0][1] == doctest::Approx(0.0));
    CHECK(g0.class_means[1][0] == doctest::Approx(1.2));

    // margin 1.2 along angle 90 about (1, -0.5): means move only in y
    const auto& g1 = cfg.dataset.synthetic.groups[1];
    CHECK(g1.class_means[0][0] == doctest::Approx(1.0));
    CHECK(g1.class_means[0][1] == doctest::Approx(-1.1));
    CHECK(g1.class_means[1][1] == doctest::Approx(0.1));

    CHECK(cfg.lambdas == std::vector<double>{0.0, 0.01});
    CHECK(cfg.seeds == std::vector<std::uint64_t>{11, 12});
    CHECK(cfg.train_base.epochs == 2);
    CHECK(cfg.train_base.momentum == doctest::Approx(0.9)); // untouched default
    CHECK(cfg.output_dir == fs::path("harness_tmp/runs"));

    // seeds may come as {count, start}
    auto j = base_config();
    j["sweep"]["seeds"] = {{"count", 3}, {"start", 5}};
    auto cfg2 = harness::parse_config(j);
    CHECK(cfg2.seeds == std::vector<std::uint64_t>{5, 6, 7});

    // no mitigation section: single lambda zero
    j = base_config();
    j.erase("mitigation");
    CHECK(harness::parse_config(j).lambdas == std::vector<double>{0.0});
}

TEST_CASE("config parsing rejects malformed input") {
    auto expect_config_error = [](nlohmann::json j) {
        CHECK_THROWS_AS(harness::parse_config(j), ConfigError);
    };

    auto j = base_config();
    j["typo_section"] = 1;
    expect_config_error(j);

    j = base_config();
    j["run_id"] = "bad/id";
    expect_config_error(j);

    j = base_config();
    j.erase("sweep");
    expect_config_error(j);

    j = base_config();
    j["dataset"]["groups"][0]["counts"] = {20};
    expect_config_error(j);

    j = base_config();
    j["dataset"]["groups"][0]["means"] = {{-1.0, 0.0}, {1.0, 0.0}};
    expect_config_error(j); // means and margin shorthand together

    j = base_config();
    j["dataset"]["groups"][1]["name"] = "big";
    expect_config_error(j);

    j = base_config();
    j["profiles"] = {"hw_ref", "hw_ref"};
    expect_config_error(j);

    j = base_config();
    j["profiles"] = {"hw_made_up"};
    expect_config_error(j);

    j = base_config();
    j["sweep"]["seeds"] = {11, 11};
    expect_config_error(j);

    j = base_config();
    j["mitigation"]["lambdas"] = {0.0, -0.1};
    expect_config_error(j);

    j = base_config();
    j["dataset"]["eval"] = {{"kind", "split"}, {"multiplier", 3}};
    expect_config_error(j);

    j = base_config();
    j["model"]["input_dim"] = 5;
    expect_config_error(j); // disagrees with feature_dim

    j = base_config();
    j["train"]["momentum"] = 1.5;
    expect_config_error(j); // TrainConfig::validate

    // csv datasets cannot use fresh_draw eval
    j = base_config();
    j["dataset"] = {{"kind", "csv"},
                    {"path", "x.csv"},
                    {"features", {"a", "b"}},
                    {"group_column", "g"},
                    {"label_column", "y"},
                    {"eval", {{"kind", "fresh_draw"}}}};
    expect_config_error(j);
}

TEST_CASE("config fingerprint tracks content, not spelling or output") {
    const auto cfg = harness::parse_config(base_config());
    const auto fp = harness::config_fingerprint(cfg);

    // shorthand vs. explicit means with the same geometry hash identically
    auto j = base_config();
    j["dataset"]["groups"][0].erase("margin");
    j["dataset"]["groups"][0]["means"] = {{-1.2, 0.0}, {1.2, 0.0}};
    CHECK(harness::config_fingerprint(harness::parse_config(j)) == fp);

    // the output directory is not part of the run's identity
    j = base_config();
    j["output"]["dir"] = "elsewhere";
    CHECK(harness::config_fingerprint(harness::parse_config(j)) == fp);

    j = base_config();
    j["train"]["lr"] = 0.2;
    CHECK(harness::config_fingerprint(harness::parse_config(j)) != fp);
}

TEST_CASE("load_config reads files and rejects bad ones") {
    fs::create_directories("harness_tmp");
    {
        std::ofstream out("harness_tmp/config.json");
        out << base_config().dump(2);
    }
    const auto cfg = harness::load_config("harness_tmp/config.json");
    CHECK(harness::config_fingerprint(cfg) ==
          harness::config_fingerprint(harness::parse_config(base_config())));

    CHECK_THROWS_AS(harness::load_config("harness_tmp/nope.json"), ConfigError);
    {
        std::ofstream out("harness_tmp/broken.json");
        out << "{ not json";
    }
    CHECK_THROWS_AS(harness::load_config("harness_tmp/broken.json"), ConfigError);
}

TEST_CASE("resolve_dataset produces aligned train and eval sets") {
    const auto cfg = harness::parse_config(base_config());
    const auto rd = harness::resolve_dataset(cfg.dataset);
    CHECK(rd.train.size() == 56);
    CHECK(rd.eval.size() == 112); // multiplier 2
    CHECK(rd.train.group_names == rd.eval.group_names);
    CHECK(data::dataset_fingerprint(rd.train) != data::dataset_fingerprint(rd.eval));

    // split path
    auto j = base_config();
    j["dataset"]["eval"] = {{"kind", "split"}, {"fraction", 0.75}, {"seed", 9}};
    const auto rd2 = harness::resolve_dataset(harness::parse_config(j).dataset);
    CHECK(rd2.train.size() + rd2.eval.size() == 56);
    CHECK(rd2.eval.size() >= 8);

    // standardization centers the training features
    j = base_config();
    j["dataset"]["standardize"] = true;
    const auto rd3 = harness::resolve_dataset(harness::parse_config(j).dataset);
    double mean0 = 0.0;
    for (std::size_t i = 0; i < rd3.train.size(); ++i) mean0 += rd3.train.row(i)[0];
    mean0 /= static_cast<double>(rd3.train.size());
    CHECK(std::abs(mean0) < 1e-12);
}

TEST_CASE("run_experiment writes a complete, self-describing run directory") {
    fs::remove_all("harness_tmp/runs");
    const auto cfg = harness::parse_config(base_config());
    const auto out = harness::run_experiment(cfg, 1, false);

    CHECK_FALSE(out.skipped);
    CHECK(out.completed == 8); // 2 lambdas x 2 seeds x 2 profiles
    CHECK(out.failures.empty());
    const fs::path dir = out.run_dir;
    CHECK(dir == fs::path("harness_tmp/runs/t0"));

    check_manifest_covers_dir(dir);
    const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
    CHECK(manifest.at("format") == "fairdrift-run-v1");
    CHECK(manifest.at("anchor_profile") == "hw_ref");
    CHECK(manifest.at("runs").size() == 8);
    CHECK(manifest.at("cells").size() == 4);

    // pinned table headers
    const auto metrics = slurp(dir / "metrics.csv");
    CHECK(metrics.rfind("run_id,profile_id,seed,lambda,group,loss,accuracy,grad_norm,"
                        "lambda_max,dtb_mean\n", 0) == 0);
    CHECK(line_count(metrics) == 1 + 16); // header + 2 lambdas x 2 seeds x 2 profiles x 2 groups
    const auto sens = slurp(dir / "sensitivity.csv");
    CHECK(sens.rfind("seed,lambda,group,delta,term1,term2,rhs,slack\n", 0) == 0);
    CHECK(line_count(sens) == 1 + 8); // header + 2 lambdas x 2 seeds x 2 groups

    // traces carry epoch 0..epochs rows and per-group dtb columns
    const auto trace = slurp(dir / "traces/seed11_lam0_hw_ref.csv");
    CHECK(trace.rfind("epoch,train_loss,grad_norm,penalty,dtb_big,dtb_small\n", 0) == 0);
    CHECK(line_count(trace) == 1 + 3);

    // checkpoints round trip and match the manifest fingerprint
    models::CheckpointMeta meta;
    const auto model = models::load_checkpoint(dir / "checkpoints/seed11_lam0_hw_ref.ckpt", &meta);
    CHECK(meta.init_seed == 11);
    CHECK(meta.profile_id == "hw_ref");
    CHECK(meta.config_hash == manifest.at("config_hash").get<std::string>());
    std::string fnv;
    for (const auto& run : manifest.at("runs")) {
        if (run.at("seed") == 11 && run.at("lambda") == 0.0 &&
            run.at("profile_id") == "hw_ref") {
            fnv = run.at("param_fnv").get<std::string>();
        }
    }
    CHECK(hash_hex(models::param_fingerprint(model)) == fnv);

    // per-cell report content
    const auto report = nlohmann::json::parse(slurp(dir / "reports/seed11_lam0.json"));
    CHECK(report.at("sensitivity").at("profiles").size() == 2);
    CHECK(report.at("taylor").at("rows").size() == 2);
    CHECK(report.at("eval").size() == 2);
    CHECK(report.at("hessian_bound").is_object()); // sigmoid head
}

TEST_CASE("reruns are byte-identical and skipping works") {
    const auto cfg = harness::parse_config(base_config());
    if (!fs::exists("harness_tmp/runs/t0/manifest.json")) {
        harness::run_experiment(cfg, 1, false);
    }

    // identical config, fresh directory: bytes match
    auto j = base_config();
    j["output"]["dir"] = "harness_tmp/runs_b";
    fs::remove_all("harness_tmp/runs_b");
    const auto out_b = harness::run_experiment(harness::parse_config(j), 1, false);
    CHECK_FALSE(out_b.skipped);
    for (const char* rel :
         {"manifest.json", "metrics.csv", "sensitivity.csv", "metrics_mean.csv",
          "reports/seed12_lam1.json", "checkpoints/seed11_lam0_hw_seq32.ckpt"}) {
        CAPTURE(rel);
        CHECK(slurp(fs::path("harness_tmp/runs/t0") / rel) ==
              slurp(fs::path("harness_tmp/runs_b/t0") / rel));
    }

    // same config again: skipped, and the stored outcome is echoed back
    const auto again = harness::run_experiment(cfg, 1, false);
    CHECK(again.skipped);
    CHECK(again.completed == out_b.completed);
    CHECK(again.failures.empty());

    // changed config into the same directory: refused without force
    auto changed_json = base_config();
    changed_json["train"]["lr"] = 0.05;
    const auto changed = harness::parse_config(changed_json);
    CHECK_THROWS_AS(harness::run_experiment(changed, 1, false), ConfigError);

    // force replaces the run wholesale
    const auto forced = harness::run_experiment(changed, 1, true);
    CHECK_FALSE(forced.skipped);
    const auto manifest = nlohmann::json::parse(slurp("harness_tmp/runs/t0/manifest.json"));
    CHECK(manifest.at("config_hash").get<std::string>() ==
          harness::config_fingerprint(changed));
    check_manifest_covers_dir("harness_tmp/runs/t0");

    // restore the original run for the later cases
    harness::run_experiment(cfg, 1, true);
}

TEST_CASE("diverged cells are recorded, not fatal") {
    auto j = base_config();
    j["run_id"] = "boom";
    j["train"] = {{"epochs", 2}, {"batch_size", 8}, {"lr", 1e80}, {"weight_decay", 0.5}};
    j["profiles"] = {"hw_ref"};
    j["sweep"]["seeds"] = {1};
    j["mitigation"]["lambdas"] = {0.0};
    fs::remove_all("harness_tmp/runs/boom");
    const auto out = harness::run_experiment(harness::parse_config(j), 1, false);

    CHECK(out.completed == 0);
    REQUIRE(out.failures.size() == 1);
    CHECK(out.failures[0].find("seed=1") != std::string::npos);

    const auto manifest = nlohmann::json::parse(slurp(out.run_dir / "manifest.json"));
    CHECK(manifest.at("runs")[0].at("status") == "failed");
    CHECK_FALSE(manifest.at("cells")[0].at("complete").get<bool>());
    CHECK(line_count(slurp(out.run_dir / "metrics.csv")) == 1); // header only
    check_manifest_covers_dir(out.run_dir);
}

TEST_CASE("mitigation study picks the smallest spread inside the budget") {
    const auto cfg = harness::parse_config(base_config());
    const auto choice = harness::mitigation_study(cfg, 1, false);

    const bool starred = choice.lambda_star == 0.0 || choice.lambda_star == 0.01;
    CHECK(starred);
    CHECK(choice.spread_star <= choice.spread_baseline + 1e-12);
    CHECK(choice.accuracy_star >= choice.accuracy_baseline - 0.02 - 1e-12);
    REQUIRE(choice.groups.size() == 2);
    CHECK(choice.groups[0].group == "big");

    const fs::path dir = "harness_tmp/runs/t0";
    const auto mj = nlohmann::json::parse(slurp(dir / "mitigation.json"));
    CHECK(mj.at("lambda_star").get<double>() == choice.lambda_star);
    CHECK(mj.at("per_lambda").size() == 2);
    const auto manifest = nlohmann::json::parse(slurp(dir / "manifest.json"));
    CHECK(manifest.at("tables").at("mitigation") == "mitigation.json");
    check_manifest_covers_dir(dir);

    // the study is as repeatable as the run itself
    auto j = base_config();
    j["output"]["dir"] = "harness_tmp/runs_b";
    harness::mitigation_study(harness::parse_config(j), 1, false);
    CHECK(slurp(dir / "mitigation.json") ==
          slurp("harness_tmp/runs_b/t0/mitigation.json"));

    // a grid without the lambda 0 baseline is refused
    j = base_config();
    j["mitigation"]["lambdas"] = {0.01, 0.1};
    CHECK_THROWS_AS(harness::mitigation_study(harness::parse_config(j), 1, false),
                    ConfigError);
}

TEST_CASE("report summarises a run directory") {
    std::ostringstream text;
    harness::write_report("harness_tmp/runs/t0", text);
    const auto s = text.str();
    CHECK(s.find("run t0") != std::string::npos);
    CHECK(s.find("training runs: 8 ok, 0 failed") != std::string::npos);
    CHECK(s.find("lambda") != std::string::npos);
    CHECK(s.find("mitigation: lambda*") != std::string::npos);

    std::ostringstream sink;
    CHECK_THROWS_AS(harness::write_report("harness_tmp/not_a_run", sink), Error);
}

TEST_SUITE_END();
