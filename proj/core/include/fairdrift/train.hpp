#pragma once

// Minibatch SGD under a virtual hardware profile. The profile touches exactly
// two places: the forward pass of each sample and the reduction of per-sample
// gradients into the batch gradient. Everything else (shuffling, the update
// rule, the optional fairness penalty arithmetic) runs in plain binary64, and
// the shuffle order depends only on (shuffle_seed, epoch) so that runs under
// different profiles see identical batches.

#include <cstdint>
#include <span>
#include <vector>

#include "fairdrift/data.hpp"
#include "fairdrift/models.hpp"
#include "fairdrift/vhw.hpp"

namespace fairdrift::train {

enum class LrSchedule { constant, linear_warmup_decay };

struct TrainConfig {
    std::size_t epochs = 10;
    std::size_t batch_size = 32;
    double lr = 0.05;
    double momentum = 0.9;
    double weight_decay = 5e-4;
    LrSchedule schedule = LrSchedule::constant;
    std::uint64_t shuffle_seed = 0;
    double mitigation_lambda = 0.0;  // weight of the boundary-spread penalty
    double divergence_ceiling = 1e6; // reference loss above this aborts the run

    void validate() const; // throws ConfigError
};

// Warmup covers the first tenth of training (at least one step), then the
// rate decays linearly to zero. Exposed for direct testing.
double learning_rate_at(const TrainConfig& config, std::size_t step, std::size_t total_steps);

// Reference-mode diagnostics recorded after every epoch; epoch 0 is the
// untouched initialization. The penalty column is the raw squared spread of
// per-group diversities, before any lambda.
struct TraceRow {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double grad_norm = 0.0;
    double penalty = 0.0;
    std::vector<double> group_dtb; // mean diversity per group id
};

struct TrainResult {
    models::Model model;
    std::vector<TraceRow> trace; // epochs + 1 rows
    std::size_t steps = 0;
    std::uint64_t param_hash = 0;
};

// Test hooks. force_penalty_path runs the penalty bookkeeping even at
// lambda == 0, which must not change a single bit of the result.
struct TrainHooks {
    bool force_penalty_path = false;
};

TrainResult sgd_train(const models::Model& init, const data::DataView& train_view,
                      const vhw::VirtualHardwareProfile& profile, const TrainConfig& config,
                      const TrainHooks& hooks = {});

// The penalty itself: squared gaps between per-group mean diversity and the
// batch mean, summed over the groups present in the batch.
struct PenaltyResult {
    double penalty = 0.0;
    double batch_delta = 0.0;
    std::vector<double> group_delta;       // zero where a group is absent
    std::vector<bool> group_present;
    std::vector<std::size_t> group_count;
};

PenaltyResult mitigation_penalty(std::span<const double> diversities,
                                 std::span<const std::uint32_t> groups, std::size_t num_groups);

// Central-difference audit of the penalized batch gradient in reference
// arithmetic. Throws GradCheckFailure naming the worst coordinate if the
// analytic and numerical gradients disagree.
void penalty_gradient_check(const models::Model& model, const data::DataView& batch,
                            double lambda, double tolerance_scale = 1.0);

} // namespace fairdrift::train
