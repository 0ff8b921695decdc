#include "fairdrift/train.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "fairdrift/errors.hpp"
#include "fairdrift/hash.hpp"
#include "fairdrift/oracles.hpp"
#include "fairdrift/param_vector.hpp"
#include "fairdrift/rng.hpp"

namespace fairdrift::train {

void TrainConfig::validate() const {
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("learning rate must be finite and >= 0");
    if (!(momentum >= 0.0) || momentum >= 1.0) throw ConfigError("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
    if (!(mitigation_lambda >= 0.0) || !std::isfinite(mitigation_lambda)) {
        throw ConfigError("mitigation lambda must be finite and >= 0");
    }
    if (!(divergence_ceiling > 0.0)) throw ConfigError("divergence ceiling must be positive");
}

double learning_rate_at(const TrainConfig& config, std::size_t step, std::size_t total_steps) {
    if (config.schedule == LrSchedule::constant || total_steps == 0) return config.lr;
    const std::size_t warmup = std::max<std::size_t>(1, total_steps / 10);
    if (step < warmup) {
        return config.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    }
    if (total_steps == warmup) return config.lr;
    return config.lr * static_cast<double>(total_steps - step) /
           static_cast<double>(total_steps - warmup);
}

PenaltyResult mitigation_penalty(std::span<const double> diversities,
                                 std::span<const std::uint32_t> groups, std::size_t num_groups) {
    if (diversities.size() != groups.size()) {
        throw SchemaError("diversity and group arrays disagree in length");
    }
    if (diversities.empty()) throw EmptySubset("penalty of an empty batch");

    PenaltyResult r;
    r.group_delta.assign(num_groups, 0.0);
    r.group_present.assign(num_groups, false);
    r.group_count.assign(num_groups, 0);

    double total = 0.0;
    for (std::size_t i = 0; i < diversities.size(); ++i) {
        const std::uint32_t g = groups[i];
        if (g >= num_groups) throw SchemaError("group id outside the declared range");
        r.group_delta[g] += diversities[i];
        r.group_count[g] += 1;
        total += diversities[i];
    }
    r.batch_delta = total / static_cast<double>(diversities.size());
    for (std::size_t g = 0; g < num_groups; ++g) {
        if (r.group_count[g] == 0) continue;
        r.group_present[g] = true;
        r.group_delta[g] /= static_cast<double>(r.group_count[g]);
        const double gap = r.group_delta[g] - r.batch_delta;
        r.penalty += gap * gap;
    }
    return r;
}

namespace {

double raw_sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// Diversity 1 - sum p^2 from raw logits, no clamping so the penalty stays
// smooth everywhere. Returns the probabilities too when probs is non-null.
double raw_diversity(const models::ArchSpec& spec, std::span<const double> logits,
                     std::vector<double>* probs) {
    if (spec.head == models::Head::sigmoid) {
        const double f = raw_sigmoid(logits[0]);
        if (probs != nullptr) *probs = {f};
        return 2.0 * f * (1.0 - f);
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    std::vector<double> p(logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        p[i] = std::exp(logits[i] - m);
        sum += p[i];
    }
    double sq = 0.0;
    for (double& v : p) {
        v /= sum;
        sq += v * v;
    }
    if (probs != nullptr) *probs = std::move(p);
    return 1.0 - sq;
}

struct BatchScratch {
    std::vector<models::Workspace> sample_ws; // one per batch slot, caches kept for backward
    std::vector<double> diversities;
    std::vector<std::uint32_t> groups;
    std::vector<double> matrix; // batch_size x dim per-sample gradients
    std::vector<double> column;
    std::vector<double> probs;
};

// Penalized batch gradient under a profile. Per-sample forward passes and the
// final per-coordinate reduction follow the profile; everything between is
// binary64. Returns the batch objective value (mean loss + lambda * penalty).
double batch_gradient(const models::Model& model, const data::DataView& view,
                      std::span<const std::size_t> batch,
                      const vhw::VirtualHardwareProfile& profile, double lambda,
                      bool penalty_path, BatchScratch& s, std::span<double> grad) {
    const models::ArchSpec& spec = model.spec;
    const std::size_t bsz = batch.size();
    const std::size_t dim = model.params.size();

    if (s.sample_ws.size() < bsz) s.sample_ws.resize(bsz);
    s.diversities.resize(bsz);
    s.groups.resize(bsz);

    double ce = 0.0;
    for (std::size_t k = 0; k < bsz; ++k) {
        models::forward(model, view.row(batch[k]), profile, s.sample_ws[k]);
        ce += models::sample_loss_from_logits(spec, s.sample_ws[k].logits, view.label(batch[k]));
        if (penalty_path) {
            s.diversities[k] = raw_diversity(spec, s.sample_ws[k].logits, nullptr);
            s.groups[k] = view.group(batch[k]);
        }
    }

    PenaltyResult pen;
    double gap_sum = 0.0;
    if (penalty_path) {
        pen = mitigation_penalty(std::span<const double>(s.diversities.data(), bsz), s.groups,
                                 view.dataset->num_groups());
        for (std::size_t g = 0; g < pen.group_delta.size(); ++g) {
            if (pen.group_present[g]) gap_sum += pen.group_delta[g] - pen.batch_delta;
        }
    }

    s.matrix.assign(bsz * dim, 0.0);
    for (std::size_t k = 0; k < bsz; ++k) {
        models::Workspace& ws = s.sample_ws[k];
        models::loss_dlogits(spec, ws.logits, view.label(batch[k]), ws);
        if (penalty_path) {
            // The batch objective is (1/B) sum_i loss_i + lambda * P. Folding
            // lambda dP/dz_i into the head seed scaled by B lets one reduction
            // and one division serve both terms.
            const std::uint32_t g = s.groups[k];
            const double dP_dd =
                2.0 * (pen.group_delta[g] - pen.batch_delta) /
                    static_cast<double>(pen.group_count[g]) -
                2.0 * gap_sum / static_cast<double>(bsz);
            const double w = static_cast<double>(bsz) * lambda * dP_dd;
            if (spec.head == models::Head::sigmoid) {
                const double f = raw_sigmoid(ws.logits[0]);
                ws.dlogits[0] += w * (2.0 - 4.0 * f) * f * (1.0 - f);
            } else {
                raw_diversity(spec, ws.logits, &s.probs);
                double sq = 0.0;
                for (double p : s.probs) sq += p * p;
                for (std::size_t j = 0; j < s.probs.size(); ++j) {
                    ws.dlogits[j] += w * 2.0 * s.probs[j] * (sq - s.probs[j]);
                }
            }
        }
        models::backward(model, view.row(batch[k]), ws, 1.0, {s.matrix.data() + k * dim, dim});
    }

    // Reduce each coordinate across the batch under the profile's plan, then
    // divide by the batch size in binary64.
    s.column.resize(bsz);
    const double inv_b = 1.0 / static_cast<double>(bsz);
    for (std::size_t j = 0; j < dim; ++j) {
        for (std::size_t k = 0; k < bsz; ++k) s.column[k] = s.matrix[k * dim + j];
        grad[j] = vhw::reduce(s.column, profile) * inv_b;
    }
    return ce * inv_b + lambda * pen.penalty;
}

// Value-only evaluation of the same batch objective, for finite differences.
double batch_value(const models::Model& model, const data::DataView& view,
                   std::span<const std::size_t> batch,
                   const vhw::VirtualHardwareProfile& profile, double lambda,
                   bool penalty_path) {
    static thread_local models::Workspace ws;
    const std::size_t bsz = batch.size();
    std::vector<double> diversities(bsz);
    std::vector<std::uint32_t> groups(bsz);
    double ce = 0.0;
    for (std::size_t k = 0; k < bsz; ++k) {
        models::forward(model, view.row(batch[k]), profile, ws);
        ce += models::sample_loss_from_logits(model.spec, ws.logits, view.label(batch[k]));
        if (penalty_path) {
            diversities[k] = raw_diversity(model.spec, ws.logits, nullptr);
            groups[k] = view.group(batch[k]);
        }
    }
    double penalty = 0.0;
    if (penalty_path) {
        penalty = mitigation_penalty(diversities, groups, view.dataset->num_groups()).penalty;
    }
    return ce / static_cast<double>(bsz) + lambda * penalty;
}

// One reference-arithmetic pass over the full training view: loss, gradient
// norm, raw penalty and per-group diversity for the trace.
TraceRow reference_trace_row(const models::Model& model, const data::DataView& view,
                             std::size_t epoch) {
    static thread_local models::Workspace ws;
    const std::size_t n = view.size();
    const std::size_t groups = view.dataset->num_groups();
    const double inv_n = 1.0 / static_cast<double>(n);

    TraceRow row;
    row.epoch = epoch;
    std::vector<double> grad(model.params.size(), 0.0);
    std::vector<double> group_sum(groups, 0.0);
    std::vector<std::size_t> group_count(groups, 0);
    double loss = 0.0;
    double total_diversity = 0.0;

    for (std::size_t k = 0; k < n; ++k) {
        models::forward(model, view.row(k), vhw::reference_profile(), ws);
        loss += models::sample_loss_from_logits(model.spec, ws.logits, view.label(k));
        const double d = raw_diversity(model.spec, ws.logits, nullptr);
        total_diversity += d;
        group_sum[view.group(k)] += d;
        group_count[view.group(k)] += 1;
        models::loss_dlogits(model.spec, ws.logits, view.label(k), ws);
        models::backward(model, view.row(k), ws, inv_n, grad);
    }

    row.train_loss = loss * inv_n;
    row.grad_norm = l2_norm(grad);
    const double mean_d = total_diversity * inv_n;
    row.group_dtb.assign(groups, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t g = 0; g < groups; ++g) {
        if (group_count[g] == 0) continue;
        const double gd = group_sum[g] / static_cast<double>(group_count[g]);
        row.group_dtb[g] = gd;
        const double gap = gd - mean_d;
        row.penalty += gap * gap;
    }
    return row;
}

} // namespace

TrainResult sgd_train(const models::Model& init, const data::DataView& train_view,
                      const vhw::VirtualHardwareProfile& profile, const TrainConfig& config,
                      const TrainHooks& hooks) {
    config.validate();
    vhw::validate(profile);
    if (train_view.dataset == nullptr || train_view.size() == 0) {
        throw EmptySubset("training on an empty view");
    }
    if (train_view.dataset->feature_dim != init.spec.input_dim) {
        throw SchemaError("training data feature count does not match the model");
    }
    if (train_view.dataset->num_classes != init.spec.classes) {
        throw SchemaError("training data label arity does not match the model");
    }

    TrainResult result;
    result.model = init;
    models::Model& model = result.model;

    const std::size_t n = train_view.size();
    const std::size_t dim = model.params.size();
    const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
    const std::size_t total_steps = config.epochs * steps_per_epoch;
    const bool penalty_path = config.mitigation_lambda > 0.0 || hooks.force_penalty_path;

    result.trace.push_back(reference_trace_row(model, train_view, 0));

    std::vector<double> buf(dim, 0.0);
    std::vector<double> grad(dim, 0.0);
    std::vector<std::size_t> order(n);
    BatchScratch scratch;
    std::size_t step = 0;

    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng shuffle_rng(derive_seed(config.shuffle_seed, "epoch", epoch));
        shuffle_rng.shuffle(order);

        for (std::size_t start = 0; start < n; start += config.batch_size) {
            const std::size_t bsz = std::min(config.batch_size, n - start);
            try {
                batch_gradient(model, train_view, {order.data() + start, bsz}, profile,
                               config.mitigation_lambda, penalty_path, scratch, grad);
            } catch (const NumericalOverflow& e) {
                throw DivergedError(std::string("forward pass overflowed: ") + e.what(), epoch,
                                    step);
            }

            const double lr = learning_rate_at(config, step, total_steps);
            for (std::size_t j = 0; j < dim; ++j) {
                const double g = grad[j] + config.weight_decay * model.params[j];
                buf[j] = config.momentum * buf[j] + g;
                model.params[j] -= lr * buf[j];
            }
            ++step;
            if (!all_finite(model.params.span())) {
                throw DivergedError("parameters left the finite range", epoch, step);
            }
        }

        TraceRow row = reference_trace_row(model, train_view, epoch);
        const double epoch_loss = row.train_loss;
        result.trace.push_back(std::move(row));
        if (!std::isfinite(epoch_loss) || epoch_loss > config.divergence_ceiling) {
            throw DivergedError("training loss crossed the divergence ceiling", epoch, step);
        }
    }

    result.steps = step;
    result.param_hash = fnv1a(model.params.span());
    return result;
}

void penalty_gradient_check(const models::Model& model, const data::DataView& batch,
                            double lambda, double tolerance_scale) {
    if (batch.dataset == nullptr || batch.size() == 0) {
        throw EmptySubset("gradient check on an empty batch");
    }
    std::vector<std::size_t> positions(batch.size());
    std::iota(positions.begin(), positions.end(), std::size_t{0});

    BatchScratch scratch;
    std::vector<double> analytic(model.params.size(), 0.0);
    batch_gradient(model, batch, positions, vhw::reference_profile(), lambda, true, scratch,
                   analytic);

    models::Model probe = model;
    const auto objective = [&](std::span<const double> theta) {
        std::copy(theta.begin(), theta.end(), probe.params.values.begin());
        return batch_value(probe, batch, positions, vhw::reference_profile(), lambda, true);
    };
    const std::vector<double> fd = oracles::fd_gradient(objective, model.params.span());

    for (std::size_t j = 0; j < analytic.size(); ++j) {
        const double tol =
            1e-6 * tolerance_scale * (1.0 + std::abs(analytic[j]) + std::abs(fd[j]));
        if (std::abs(analytic[j] - fd[j]) > tol) {
            const std::string where =
                model.params.layout ? model.params.layout->block_at(j) : std::to_string(j);
            throw GradCheckFailure("penalized gradient mismatch at " + where + ": analytic " +
                                   std::to_string(analytic[j]) + " vs numerical " +
                                   std::to_string(fd[j]) + " (lambda " + std::to_string(lambda) +
                                   ")");
        }
    }
}

} // namespace fairdrift::train
