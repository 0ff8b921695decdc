#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <vector>

#include "fairdrift/errors.hpp"
#include "fairdrift/models.hpp"
#include "fairdrift/oracles.hpp"
#include "fairdrift/rng.hpp"
#include "fairdrift/vhw.hpp"

using namespace fairdrift;
using namespace fairdrift::models;

namespace {

ArchSpec mlp_spec(std::size_t input, std::vector<HiddenLayer> hidden, Head head,
                  std::size_t classes) {
    ArchSpec spec;
    spec.input_dim = input;
    spec.hidden = std::move(hidden);
    spec.head = head;
    spec.classes = classes;
    return spec;
}

// Full-vector finite-difference check of backward() through the sample loss.
void check_sample_gradient(const ArchSpec& spec, std::uint32_t label) {
    Model model = init_model(spec, 99);
    Rng rng(4242);
    std::vector<double> x(spec.input_dim);
    for (double& v : x) v = rng.normal();

    Workspace ws;
    forward(model, x, vhw::reference_profile(), ws);
    loss_dlogits(spec, ws.logits, label, ws);
    std::vector<double> grad(model.params.size(), 0.0);
    backward(model, x, ws, 1.0, grad);

    Model probe = model;
    auto loss_at = [&](std::span<const double> theta) {
        std::copy(theta.begin(), theta.end(), probe.params.values.begin());
        Workspace local;
        forward(probe, x, vhw::reference_profile(), local);
        return sample_loss_from_logits(spec, local.logits, label);
    };
    const std::vector<double> fd = oracles::fd_gradient(loss_at, model.params.span());

    REQUIRE(fd.size() == grad.size());
    for (std::size_t i = 0; i < grad.size(); ++i) {
        const double tol = 1e-6 + 1e-5 * std::abs(fd[i]);
        CAPTURE(i);
        CHECK(std::abs(grad[i] - fd[i]) <= tol);
    }
}

} // namespace

TEST_SUITE("models") {

TEST_CASE("glorot init stays inside its bound and is seed reproducible") {
    const auto spec = mlp_spec(64, {{64, Activation::tanh}}, Head::sigmoid, 2);
    const Model a = init_model(spec, 11);
    const Model b = init_model(spec, 11);
    const Model c = init_model(spec, 12);

    REQUIRE(a.params.size() == spec.param_count());
    CHECK(a.params.values == b.params.values);
    CHECK(a.params.values != c.params.values);

    const double limit = std::sqrt(6.0 / 128.0);
    double max_abs = 0.0;
    for (std::size_t i = 0; i < 64 * 64; ++i) {
        max_abs = std::max(max_abs, std::abs(a.params[i]));
    }
    CHECK(max_abs <= limit);
    CHECK(max_abs > 0.5 * limit); // the draw actually explores the range
    // Biases of the first layer start at zero.
    for (std::size_t i = 64 * 64; i < 64 * 64 + 64; ++i) CHECK(a.params[i] == 0.0);
}

TEST_CASE("layout lists weight and bias blocks in declaration order") {
    const auto spec = mlp_spec(3, {{5, Activation::relu}, {4, Activation::tanh}}, Head::softmax, 3);
    CHECK(spec.param_count() == (3 * 5 + 5) + (5 * 4 + 4) + (4 * 3 + 3));

    const auto layout = spec.make_layout();
    REQUIRE(layout->blocks().size() == 6);
    CHECK(layout->blocks()[0].name == "hidden0/weight");
    CHECK(layout->blocks()[1].name == "hidden0/bias");
    CHECK(layout->blocks()[2].name == "hidden1/weight");
    CHECK(layout->blocks()[3].name == "hidden1/bias");
    CHECK(layout->blocks()[4].name == "head/weight");
    CHECK(layout->blocks()[5].name == "head/bias");
    CHECK(layout->blocks()[2].offset == 20);
    CHECK(layout->blocks()[2].size == 20);
    CHECK(layout->total_size() == spec.param_count());
}

TEST_CASE("impossible architectures are rejected") {
    CHECK_THROWS_AS(mlp_spec(0, {}, Head::sigmoid, 2).validate(), SchemaError);
    CHECK_THROWS_AS(mlp_spec(2, {}, Head::sigmoid, 3).validate(), SchemaError);
    CHECK_THROWS_AS(mlp_spec(2, {{0, Activation::relu}}, Head::softmax, 3).validate(), SchemaError);
    CHECK_THROWS_AS(mlp_spec(2, {}, Head::softmax, 1).validate(), SchemaError);
}

TEST_CASE("softmax probabilities are shift invariant, normalized and clamped") {
    const auto spec = mlp_spec(2, {}, Head::softmax, 4);
    const std::vector<double> logits = {0.3, -1.2, 2.5, 0.0};
    std::vector<double> shifted = logits;
    for (double& v : shifted) v += 345.0;

    const auto p = probabilities(spec, logits);
    const auto q = probabilities(spec, shifted);
    REQUIRE(p.size() == 4);
    double sum = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        CHECK(std::abs(p[i] - q[i]) <= 1e-12);
        CHECK(p[i] >= prob_floor);
        CHECK(p[i] <= 1.0 - prob_floor);
        sum += p[i];
    }
    CHECK(std::abs(sum - 1.0) <= 1e-9);

    // A hopeless logit still comes back clamped, not zero.
    const auto q2 = probabilities(spec, std::vector<double>{800.0, 0.0, 0.0, 0.0});
    CHECK(q2[1] == prob_floor);
    CHECK(q2[0] == 1.0 - prob_floor);
}

TEST_CASE("zero parameters give the uniform baseline losses") {
    const auto bin = mlp_spec(3, {}, Head::sigmoid, 2);
    Model m{bin, ParamVector(std::vector<double>(bin.param_count(), 0.0), bin.make_layout())};
    const std::vector<double> x = {0.4, -1.0, 2.0};
    Workspace ws;
    forward(m, x, vhw::reference_profile(), ws);
    CHECK(ws.logits[0] == 0.0);
    CHECK(sample_loss_from_logits(bin, ws.logits, 0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    CHECK(sample_loss_from_logits(bin, ws.logits, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

    const auto multi = mlp_spec(3, {}, Head::softmax, 5);
    Model m5{multi, ParamVector(std::vector<double>(multi.param_count(), 0.0), multi.make_layout())};
    forward(m5, x, vhw::reference_profile(), ws);
    CHECK(sample_loss_from_logits(multi, ws.logits, 3) ==
          doctest::Approx(std::log(5.0)).epsilon(1e-12));
    CHECK_THROWS_AS(sample_loss_from_logits(multi, ws.logits, 5), SchemaError);
}

TEST_CASE("backward matches central differences across the model zoo") {
    check_sample_gradient(mlp_spec(4, {}, Head::sigmoid, 2), 1);
    check_sample_gradient(mlp_spec(4, {}, Head::softmax, 3), 0);
    check_sample_gradient(mlp_spec(3, {{8, Activation::tanh}}, Head::sigmoid, 2), 0);
    check_sample_gradient(mlp_spec(3, {{6, Activation::relu}, {5, Activation::tanh}},
                                   Head::softmax, 4), 2);
}

TEST_CASE("logistic output views have closed-form gradients") {
    const auto spec = mlp_spec(3, {}, Head::sigmoid, 2);
    Model m = init_model(spec, 5);
    m.params[0] = 0.7;
    m.params[1] = -0.3;
    m.params[2] = 0.1;
    m.params[3] = 0.25; // bias
    const std::vector<double> x = {1.5, -2.0, 0.5};

    const double z = 0.7 * 1.5 - 0.3 * -2.0 + 0.1 * 0.5 + 0.25;
    CHECK(output_value(m, x, ScalarOutput::logit) == doctest::Approx(z).epsilon(1e-15));
    const double f = 1.0 / (1.0 + std::exp(-z));
    CHECK(output_value(m, x, ScalarOutput::sigmoid) == doctest::Approx(f).epsilon(1e-15));

    std::vector<double> g(4, 0.0);
    output_gradient(m, x, ScalarOutput::logit, g);
    CHECK(g[0] == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(g[1] == doctest::Approx(-2.0).epsilon(1e-15));
    CHECK(g[2] == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(g[3] == doctest::Approx(1.0).epsilon(1e-15));

    output_gradient(m, x, ScalarOutput::sigmoid, g);
    CHECK(g[0] == doctest::Approx(f * (1.0 - f) * 1.5).epsilon(1e-12));
    CHECK(g[3] == doctest::Approx(f * (1.0 - f)).epsilon(1e-12));

    const auto multi = mlp_spec(3, {}, Head::softmax, 3);
    Model m3 = init_model(multi, 5);
    CHECK_THROWS_AS(output_value(m3, x, ScalarOutput::logit), SchemaError);
}

TEST_CASE("binary32 profiles move the output a little, never a lot") {
    const auto spec = mlp_spec(6, {{16, Activation::tanh}, {16, Activation::relu}},
                               Head::sigmoid, 2);
    const Model m = init_model(spec, 31);
    const auto& seq32 = vhw::builtin_profile("hw_seq32");

    Rng rng(8);
    double max_gap = 0.0;
    for (int s = 0; s < 50; ++s) {
        std::vector<double> x(6);
        for (double& v : x) v = rng.normal();
        const double ref = predict_proba(m, x, vhw::reference_profile())[0];
        const double alt = predict_proba(m, x, seq32)[0];
        max_gap = std::max(max_gap, std::abs(ref - alt));
    }
    CHECK(max_gap > 0.0);    // the low-precision path is really exercised
    CHECK(max_gap <= 1e-3);  // but stays a perturbation, not a regime change
}

TEST_CASE("forward reports the offending layer on overflow") {
    const auto spec = mlp_spec(2, {{3, Activation::relu}}, Head::sigmoid, 2);
    Model m = init_model(spec, 1);
    m.params[0] = 1e308;
    m.params[1] = 1e308;
    const std::vector<double> x = {1e5, 1e5};
    Workspace ws;
    try {
        forward(m, x, vhw::reference_profile(), ws);
        FAIL("expected NumericalOverflow");
    } catch (const NumericalOverflow& e) {
        CHECK(std::string(e.what()).find("hidden0") != std::string::npos);
    }
}

TEST_CASE("checkpoints round trip bit for bit") {
    const auto spec = mlp_spec(5, {{7, Activation::tanh}}, Head::softmax, 3);
    const Model m = init_model(spec, 77);
    CheckpointMeta meta;
    meta.init_seed = 77;
    meta.profile_id = "hw_pair32";
    meta.config_hash = "deadbeef00112233";

    const auto dir = std::filesystem::temp_directory_path() / "fairdrift_ckpt_test";
    std::filesystem::create_directories(dir);
    const auto path = dir / "model.ckpt";
    save_checkpoint(path, m, meta);

    CheckpointMeta loaded_meta;
    const Model loaded = load_checkpoint(path, &loaded_meta);
    CHECK(loaded.spec == spec);
    CHECK(loaded.params.values == m.params.values);
    CHECK(loaded_meta.init_seed == 77);
    CHECK(loaded_meta.profile_id == "hw_pair32");
    CHECK(loaded_meta.config_hash == "deadbeef00112233");
    CHECK(param_fingerprint(loaded) == param_fingerprint(m));
    CHECK(loaded.params.layout != nullptr);
    CHECK(same_layout(loaded.params, m.params));

    SUBCASE("a flipped payload byte changes the fingerprint") {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(0);
        std::string header;
        std::getline(f, header);
        const auto pos = static_cast<std::streamoff>(header.size()) + 1 + 11;
        f.seekg(pos);
        char byte = 0;
        f.read(&byte, 1);
        byte = static_cast<char>(byte ^ 0x40);
        f.seekp(pos);
        f.write(&byte, 1);
        f.close();
        const Model tampered = load_checkpoint(path);
        CHECK(param_fingerprint(tampered) != param_fingerprint(m));
    }

    SUBCASE("truncation and trailing bytes are both rejected") {
        std::ifstream in(path, std::ios::binary);
        std::string all((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
        in.close();

        const auto short_path = dir / "short.ckpt";
        std::ofstream(short_path, std::ios::binary) << all.substr(0, all.size() - 4);
        CHECK_THROWS_AS(load_checkpoint(short_path), SchemaError);

        const auto long_path = dir / "long.ckpt";
        std::ofstream(long_path, std::ios::binary) << all << "xx";
        CHECK_THROWS_AS(load_checkpoint(long_path), SchemaError);
    }

    SUBCASE("garbage headers are rejected") {
        const auto bad = dir / "bad.ckpt";
        std::ofstream(bad, std::ios::binary) << "not json\n1234";
        CHECK_THROWS_AS(load_checkpoint(bad), SchemaError);
    }

    std::filesystem::remove_all(dir);
}

TEST_CASE("architecture descriptions survive JSON") {
    const auto spec = mlp_spec(9, {{4, Activation::relu}, {3, Activation::tanh}},
                               Head::softmax, 3);
    nlohmann::json j = spec;
    const auto back = j.get<ArchSpec>();
    CHECK(back == spec);

    nlohmann::json broken = j;
    broken["head"] = "linear";
    CHECK_THROWS_AS(broken.get<ArchSpec>(), ConfigError);
    nlohmann::json missing = j;
    missing.erase("input_dim");
    CHECK_THROWS_AS(missing.get<ArchSpec>(), ConfigError);
}

} // TEST_SUITE
