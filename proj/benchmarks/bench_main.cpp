// Microbenchmarks for the hot paths: reduction plans, forward/backward,
// Hessian-vector products and the eigenvalue iteration. Run with
// --benchmark_filter=... to pick a subset.

#include <benchmark/benchmark.h>

#include <cstdint>
#include <vector>

#include "fairdrift/data.hpp"
#include "fairdrift/models.hpp"
#include "fairdrift/numkit.hpp"
#include "fairdrift/rng.hpp"
#include "fairdrift/train.hpp"
#include "fairdrift/vhw.hpp"

namespace {

using namespace fairdrift;

std::vector<double> bench_vector(std::size_t n) {
    Rng rng(12345);
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(-1.0, 1.0);
    return v;
}

void BM_ReduceProfile(benchmark::State& state, const char* id) {
    const auto v = bench_vector(static_cast<std::size_t>(state.range(0)));
    const auto& profile = vhw::builtin_profile(id);
    for (auto _ : state) {
        benchmark::DoNotOptimize(vhw::reduce(v, profile));
    }
    state.SetItemsProcessed(state.iterations() * state.range(0));
}

// A fixed two-group problem and a small tanh network, shared by the model
// benchmarks so their numbers are comparable across commits.
data::GroupedDataset bench_dataset(std::size_t per_class) {
    data::SyntheticSpec spec;
    spec.feature_dim = 2;
    spec.seed = 777;
    data::GroupSpec big;
    big.name = "big";
    big.class_counts = {per_class, per_class};
    big.class_means = {{-1.0, 0.0}, {1.0, 0.0}};
    data::GroupSpec small;
    small.name = "small";
    small.class_counts = {per_class / 4, per_class / 4};
    small.class_means = {{0.3, -0.8}, {0.9, 0.6}};
    spec.groups = {big, small};
    return data::gen_synthetic(spec);
}

models::ArchSpec bench_arch(std::size_t width) {
    models::ArchSpec arch;
    arch.input_dim = 2;
    if (width > 0) arch.hidden = {{width, models::Activation::tanh}};
    return arch;
}

void BM_MeanGradient(benchmark::State& state) {
    const auto ds = bench_dataset(static_cast<std::size_t>(state.range(0)));
    const auto view = data::DataView::all(ds);
    const auto model = models::init_model(bench_arch(8), 1);
    const auto& profile = vhw::builtin_profile("hw_seq32");
    std::vector<double> grad(model.params.size());
    for (auto _ : state) {
        benchmark::DoNotOptimize(numkit::mean_loss_and_gradient(model, view, profile, grad));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ds.size()));
}

void BM_Hvp(benchmark::State& state) {
    const auto ds = bench_dataset(static_cast<std::size_t>(state.range(0)));
    const auto view = data::DataView::all(ds);
    const auto model = models::init_model(bench_arch(8), 1);
    const numkit::ModelLossObjective obj(model, view, vhw::builtin_profile("hw_seq32"));
    const auto& theta = model.params.values;
    const auto v = bench_vector(theta.size());
    for (auto _ : state) {
        benchmark::DoNotOptimize(numkit::hvp(obj, theta, v));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ds.size()));
}

void BM_MaxEigenvalue(benchmark::State& state) {
    const auto ds = bench_dataset(128);
    const auto view = data::DataView::all(ds);
    const auto model = models::init_model(bench_arch(static_cast<std::size_t>(state.range(0))), 1);
    const numkit::ModelLossObjective obj(model, view, vhw::builtin_profile("hw_seq32"));
    const auto op = numkit::hvp_operator(obj, model.params.values);
    for (auto _ : state) {
        benchmark::DoNotOptimize(numkit::max_eigenvalue(op, model.params.size(), 99));
    }
}

void BM_SgdEpoch(benchmark::State& state, const char* id) {
    const auto ds = bench_dataset(256);
    const auto view = data::DataView::all(ds);
    const auto init = models::init_model(bench_arch(8), 1);
    const auto& profile = vhw::builtin_profile(id);
    train::TrainConfig config;
    config.epochs = 1;
    config.batch_size = 32;
    config.lr = 0.05;
    config.shuffle_seed = 7;
    for (auto _ : state) {
        benchmark::DoNotOptimize(train::sgd_train(init, view, profile, config));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ds.size()));
}

void BM_MitigatedEpoch(benchmark::State& state) {
    const auto ds = bench_dataset(256);
    const auto view = data::DataView::all(ds);
    const auto init = models::init_model(bench_arch(8), 1);
    const auto& profile = vhw::builtin_profile("hw_seq32");
    train::TrainConfig config;
    config.epochs = 1;
    config.batch_size = 32;
    config.lr = 0.05;
    config.shuffle_seed = 7;
    config.mitigation_lambda = 0.1;
    for (auto _ : state) {
        benchmark::DoNotOptimize(train::sgd_train(init, view, profile, config));
    }
    state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(ds.size()));
}

} // namespace

BENCHMARK_CAPTURE(BM_ReduceProfile, hw_ref, "hw_ref")->Arg(1024)->Arg(16384);
BENCHMARK_CAPTURE(BM_ReduceProfile, hw_seq32, "hw_seq32")->Arg(1024)->Arg(16384);
BENCHMARK_CAPTURE(BM_ReduceProfile, hw_pair32, "hw_pair32")->Arg(1024)->Arg(16384);
BENCHMARK_CAPTURE(BM_ReduceProfile, hw_perm32_s7, "hw_perm32_s7")->Arg(1024)->Arg(16384);
BENCHMARK_CAPTURE(BM_ReduceProfile, hw_warp32, "hw_warp32")->Arg(1024)->Arg(16384);

BENCHMARK(BM_MeanGradient)->Arg(128)->Arg(512);
BENCHMARK(BM_Hvp)->Arg(128)->Arg(512);
BENCHMARK(BM_MaxEigenvalue)->Arg(4)->Arg(16);
BENCHMARK_CAPTURE(BM_SgdEpoch, hw_ref, "hw_ref");
BENCHMARK_CAPTURE(BM_SgdEpoch, hw_seq32, "hw_seq32");
BENCHMARK_CAPTURE(BM_SgdEpoch, hw_warp32, "hw_warp32");
BENCHMARK(BM_MitigatedEpoch);

BENCHMARK_MAIN();
