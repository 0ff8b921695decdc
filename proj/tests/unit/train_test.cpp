#include <doctest.h>

#include <cmath>
#include <vector>

#include "fairdrift/data.hpp"
#include "fairdrift/errors.hpp"
#include "fairdrift/models.hpp"
#include "fairdrift/train.hpp"
#include "fairdrift/vhw.hpp"

using namespace fairdrift;
using namespace fairdrift::train;

namespace {

// Two Gaussian blobs with a skewed 3:1 group split, enough signal for SGD to
// make visible progress in a few epochs.
data::GroupedDataset blob_dataset(std::size_t per_class, std::uint64_t seed) {
    data::SyntheticSpec spec;
    spec.feature_dim = 2;
    spec.num_classes = 2;
    spec.seed = seed;
    data::GroupSpec big;
    big.name = "big";
    big.class_counts = {per_class, per_class};
    big.class_means = {{-1.2, 0.0}, {1.2, 0.0}};
    big.sigma = 0.7;
    data::GroupSpec small;
    small.name = "small";
    small.class_counts = {per_class / 3, per_class / 3};
    small.class_means = {{-1.2, 0.6}, {1.2, 0.6}};
    small.sigma = 0.7;
    spec.groups = {big, small};
    return data::gen_synthetic(spec);
}

models::ArchSpec small_mlp() {
    models::ArchSpec spec;
    spec.input_dim = 2;
    spec.hidden = {{4, models::Activation::tanh}};
    spec.head = models::Head::sigmoid;
    spec.classes = 2;
    return spec;
}

TrainConfig quick_config() {
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 16;
    cfg.lr = 0.1;
    cfg.shuffle_seed = 42;
    return cfg;
}

} // namespace

TEST_SUITE("train") {

TEST_CASE("learning rate schedule ramps up and decays to zero") {
    TrainConfig cfg;
    cfg.lr = 0.5;
    cfg.schedule = LrSchedule::constant;
    CHECK(learning_rate_at(cfg, 0, 100) == 0.5);
    CHECK(learning_rate_at(cfg, 99, 100) == 0.5);

    cfg.schedule = LrSchedule::linear_warmup_decay;
    // 100 steps: warmup is the first 10.
    CHECK(learning_rate_at(cfg, 0, 100) == doctest::Approx(0.05).epsilon(1e-12));
    CHECK(learning_rate_at(cfg, 4, 100) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(learning_rate_at(cfg, 9, 100) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(learning_rate_at(cfg, 10, 100) == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(learning_rate_at(cfg, 55, 100) == doctest::Approx(0.25).epsilon(1e-12));
    CHECK(learning_rate_at(cfg, 99, 100) == doctest::Approx(0.5 / 90.0).epsilon(1e-12));
    // Tiny runs still warm up for one step.
    CHECK(learning_rate_at(cfg, 0, 3) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("config validation rejects nonsense") {
    TrainConfig cfg = quick_config();
    cfg.batch_size = 0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = quick_config();
    cfg.momentum = 1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = quick_config();
    cfg.mitigation_lambda = -0.5;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    cfg = quick_config();
    cfg.lr = -1.0;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("penalty statistics match hand arithmetic") {
    const std::vector<double> d = {0.3, 0.5, 0.7, 0.9};
    const std::vector<std::uint32_t> g = {0, 0, 1, 1};
    const auto r = mitigation_penalty(d, g, 3);
    CHECK(r.group_delta[0] == doctest::Approx(0.4).epsilon(1e-15));
    CHECK(r.group_delta[1] == doctest::Approx(0.8).epsilon(1e-15));
    CHECK(r.batch_delta == doctest::Approx(0.6).epsilon(1e-15));
    CHECK(r.penalty == doctest::Approx(0.08).epsilon(1e-12)); // 0.2^2 + 0.2^2
    CHECK(r.group_present[0]);
    CHECK(r.group_present[1]);
    CHECK_FALSE(r.group_present[2]);
    CHECK(r.group_count[1] == 2);

    // A batch from a single group cannot be penalized.
    const std::vector<std::uint32_t> solo = {1, 1, 1, 1};
    CHECK(mitigation_penalty(d, solo, 3).penalty == doctest::Approx(0.0));

    CHECK_THROWS_AS(mitigation_penalty(d, std::vector<std::uint32_t>{0, 1}, 2), SchemaError);
    CHECK_THROWS_AS(mitigation_penalty(std::vector<double>{}, std::vector<std::uint32_t>{}, 2),
                    EmptySubset);
}

TEST_CASE("zero learning rate leaves the parameters untouched") {
    const auto ds = blob_dataset(30, 7);
    const auto view = data::DataView::all(ds);
    const auto init = models::init_model(small_mlp(), 3);

    TrainConfig cfg = quick_config();
    cfg.lr = 0.0;
    const auto result = sgd_train(init, view, vhw::reference_profile(), cfg);

    CHECK(result.model.params.values == init.params.values);
    CHECK(result.trace.size() == cfg.epochs + 1);
    CHECK(result.steps == cfg.epochs * ((view.size() + 15) / 16));
    // All trace rows then describe the same parameter point.
    CHECK(result.trace.front().train_loss == result.trace.back().train_loss);
}

TEST_CASE("training makes progress and records a sane trace") {
    const auto ds = blob_dataset(60, 11);
    const auto view = data::DataView::all(ds);
    const auto init = models::init_model(small_mlp(), 5);

    TrainConfig cfg = quick_config();
    cfg.epochs = 8;
    const auto result = sgd_train(init, view, vhw::builtin_profile("hw_pair32"), cfg);

    REQUIRE(result.trace.size() == 9);
    CHECK(result.trace[0].epoch == 0);
    CHECK(result.trace[8].epoch == 8);
    CHECK(result.trace[8].train_loss < result.trace[0].train_loss);
    CHECK(result.trace[8].train_loss < 0.55);
    for (const auto& row : result.trace) {
        CHECK(std::isfinite(row.train_loss));
        CHECK(row.grad_norm >= 0.0);
        CHECK(row.penalty >= 0.0);
        REQUIRE(row.group_dtb.size() == 2);
        CHECK(std::isfinite(row.group_dtb[0]));
        CHECK(std::isfinite(row.group_dtb[1]));
    }
}

TEST_CASE("same seeds reproduce bit-identical results, new seeds do not") {
    const auto ds = blob_dataset(24, 19);
    const auto view = data::DataView::all(ds);
    const auto init = models::init_model(small_mlp(), 9);
    const TrainConfig cfg = quick_config();

    const auto a = sgd_train(init, view, vhw::builtin_profile("hw_perm32_s7"), cfg);
    const auto b = sgd_train(init, view, vhw::builtin_profile("hw_perm32_s7"), cfg);
    CHECK(a.model.params.values == b.model.params.values);
    CHECK(a.param_hash == b.param_hash);

    TrainConfig other = cfg;
    other.shuffle_seed = 43;
    const auto c = sgd_train(init, view, vhw::builtin_profile("hw_perm32_s7"), other);
    CHECK(a.param_hash != c.param_hash);
}

TEST_CASE("profiles leave distinct fingerprints on the trained weights") {
    const auto ds = blob_dataset(24, 23);
    const auto view = data::DataView::all(ds);
    const auto init = models::init_model(small_mlp(), 13);
    const TrainConfig cfg = quick_config();

    const auto ref = sgd_train(init, view, vhw::reference_profile(), cfg);
    const auto seq32 = sgd_train(init, view, vhw::builtin_profile("hw_seq32"), cfg);
    const auto pair32 = sgd_train(init, view, vhw::builtin_profile("hw_pair32"), cfg);

    CHECK(ref.param_hash != seq32.param_hash);
    CHECK(seq32.param_hash != pair32.param_hash);

    // Drift, not damage: the same batches under another reduction plan end up
    // within a small ball of the reference weights.
    double dist = 0.0;
    for (std::size_t j = 0; j < ref.model.params.size(); ++j) {
        const double gap = ref.model.params[j] - seq32.model.params[j];
        dist += gap * gap;
    }
    CHECK(std::sqrt(dist) < 0.05);
}

TEST_CASE("forcing the penalty path at lambda zero changes nothing") {
    const auto ds = blob_dataset(24, 29);
    const auto view = data::DataView::all(ds);
    const auto init = models::init_model(small_mlp(), 17);
    const TrainConfig cfg = quick_config();

    const auto plain = sgd_train(init, view, vhw::builtin_profile("hw_seq32"), cfg);
    TrainHooks hooks;
    hooks.force_penalty_path = true;
    const auto forced = sgd_train(init, view, vhw::builtin_profile("hw_seq32"), cfg, hooks);
    CHECK(plain.model.params.values == forced.model.params.values);
}

TEST_CASE("a positive lambda actually changes training") {
    const auto ds = blob_dataset(24, 31);
    const auto view = data::DataView::all(ds);
    const auto init = models::init_model(small_mlp(), 19);

    TrainConfig cfg = quick_config();
    const auto base = sgd_train(init, view, vhw::reference_profile(), cfg);
    cfg.mitigation_lambda = 0.1;
    const auto reg = sgd_train(init, view, vhw::reference_profile(), cfg);
    CHECK(base.param_hash != reg.param_hash);
}

TEST_CASE("penalized batch gradients pass their finite-difference audit") {
    const auto ds = blob_dataset(12, 37);
    const auto view = data::DataView::all(ds);

    SUBCASE("sigmoid head") {
        const auto model = models::init_model(small_mlp(), 23);
        penalty_gradient_check(model, view, 0.0);
        penalty_gradient_check(model, view, 0.1);
        penalty_gradient_check(model, view, 10.0);
    }

    SUBCASE("softmax head") {
        models::ArchSpec spec;
        spec.input_dim = 2;
        spec.hidden = {{4, models::Activation::tanh}};
        spec.head = models::Head::softmax;
        spec.classes = 2;
        const auto model = models::init_model(spec, 23);
        penalty_gradient_check(model, view, 0.0);
        penalty_gradient_check(model, view, 0.1);
        penalty_gradient_check(model, view, 10.0);
    }
}

TEST_CASE("runaway updates stop with a diverged error") {
    const auto ds = blob_dataset(12, 41);
    const auto view = data::DataView::all(ds);
    const auto init = models::init_model(small_mlp(), 29);

    TrainConfig cfg = quick_config();
    cfg.epochs = 20;
    cfg.batch_size = 4;
    cfg.lr = 1e80;
    cfg.weight_decay = 0.5;
    try {
        sgd_train(init, view, vhw::reference_profile(), cfg);
        FAIL("expected DivergedError");
    } catch (const DivergedError& e) {
        CHECK(e.epoch >= 1);
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
}

TEST_CASE("structural mismatches are rejected up front") {
    const auto ds = blob_dataset(12, 43);
    const auto init = models::init_model(small_mlp(), 31);
    const TrainConfig cfg = quick_config();

    data::DataView empty;
    empty.dataset = &ds;
    CHECK_THROWS_AS(sgd_train(init, empty, vhw::reference_profile(), cfg), EmptySubset);

    models::ArchSpec wide = small_mlp();
    wide.input_dim = 5;
    const auto mismatched = models::init_model(wide, 31);
    CHECK_THROWS_AS(sgd_train(mismatched, data::DataView::all(ds), vhw::reference_profile(), cfg),
                    SchemaError);
}

} // TEST_SUITE
