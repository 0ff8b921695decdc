#include "fairdrift/fairlab.hpp"

#include <algorithm>
#include <cmath>

#include "fairdrift/errors.hpp"
#include "fairdrift/numkit.hpp"
#include "fairdrift/param_vector.hpp"
#include "fairdrift/rng.hpp"
#include "fairdrift/vhw.hpp"

namespace fairdrift::fairlab {

namespace {

void check_same_family(std::span<const models::Model> trained) {
    if (trained.empty()) throw SchemaError("no trained models to compare");
    for (std::size_t m = 1; m < trained.size(); ++m) {
        if (!(trained[m].spec == trained[0].spec) ||
            !same_layout(trained[m].params, trained[0].params)) {
            throw LayoutError("trained models disagree in architecture, cannot compare");
        }
    }
}

} // namespace

std::vector<data::DataView> group_views(const data::GroupedDataset& ds) {
    std::vector<data::DataView> views;
    views.reserve(ds.num_groups());
    for (std::uint32_t g = 0; g < ds.num_groups(); ++g) {
        views.push_back(data::DataView::group(ds, g));
    }
    return views;
}

double group_loss(const models::Model& model, const data::GroupedDataset& ds,
                  std::uint32_t group_id) {
    return numkit::mean_loss(model, data::DataView::group(ds, group_id),
                             vhw::reference_profile());
}

double accuracy(const models::Model& model, const data::DataView& view) {
    if (view.size() == 0) throw EmptySubset("accuracy over an empty view");
    std::size_t hits = 0;
    for (std::size_t k = 0; k < view.size(); ++k) {
        const auto probs = models::predict_proba(model, view.row(k), vhw::reference_profile());
        std::uint32_t predicted = 0;
        if (model.spec.head == models::Head::sigmoid) {
            predicted = probs[0] >= 0.5 ? 1 : 0;
        } else {
            predicted = static_cast<std::uint32_t>(
                std::max_element(probs.begin(), probs.end()) - probs.begin());
        }
        if (predicted == view.label(k)) ++hits;
    }
    return static_cast<double>(hits) / static_cast<double>(view.size());
}

namespace {

double diversity(const std::vector<double>& probs, models::Head head) {
    if (head == models::Head::sigmoid) {
        const double f = probs[0];
        return 1.0 - (f * f + (1.0 - f) * (1.0 - f)); // = 2 f (1 - f)
    }
    double s = 0.0;
    for (double p : probs) s += p * p;
    return 1.0 - s;
}

} // namespace

double mean_diversity(const models::Model& model, const data::DataView& view) {
    if (view.size() == 0) throw EmptySubset("diversity over an empty view");
    double total = 0.0;
    for (std::size_t k = 0; k < view.size(); ++k) {
        const auto probs = models::predict_proba(model, view.row(k), vhw::reference_profile());
        total += diversity(probs, model.spec.head);
    }
    return total / static_cast<double>(view.size());
}

BoundaryReport distance_to_boundary(const models::Model& model, const data::GroupedDataset& ds) {
    BoundaryReport report;
    report.group_names = ds.group_names;
    const bool binary = model.spec.head == models::Head::sigmoid;
    for (std::uint32_t g = 0; g < ds.num_groups(); ++g) {
        const auto view = data::DataView::group(ds, g);
        if (view.size() == 0) throw EmptySubset("group '" + ds.group_names[g] + "' is empty");
        double div = 0.0;
        double close = 0.0;
        for (std::size_t k = 0; k < view.size(); ++k) {
            const auto probs = models::predict_proba(model, view.row(k), vhw::reference_profile());
            div += diversity(probs, model.spec.head);
            if (binary) close += probs[0] * (1.0 - probs[0]);
        }
        report.dtb_mean.push_back(div / static_cast<double>(view.size()));
        if (binary) report.closeness_mean.push_back(close / static_cast<double>(view.size()));
    }
    return report;
}

XiResult fairness_violation(std::span<const double> deltas) {
    if (deltas.empty()) throw SchemaError("fairness violation needs at least one group");
    XiResult r;
    std::size_t hi = 0;
    std::size_t lo = 0;
    for (std::size_t a = 1; a < deltas.size(); ++a) {
        if (deltas[a] > deltas[hi]) hi = a;
        if (deltas[a] < deltas[lo]) lo = a;
    }
    r.xi = deltas[hi] - deltas[lo];
    r.group_hi = hi;
    r.group_lo = lo;
    return r;
}

std::vector<double> param_distances(std::span<const models::Model> trained) {
    check_same_family(trained);
    const std::size_t m = trained.size();
    std::vector<double> rho(m, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = i + 1; j < m; ++j) {
            double acc = 0.0;
            for (std::size_t k = 0; k < trained[i].params.size(); ++k) {
                const double d = trained[i].params[k] - trained[j].params[k];
                acc += d * d;
            }
            const double dist = std::sqrt(acc);
            rho[i] = std::max(rho[i], dist);
            rho[j] = std::max(rho[j], dist);
        }
    }
    return rho;
}

SensitivityTable hardware_sensitivity(std::span<const models::Model> trained,
                                      std::span<const std::string> profile_ids,
                                      const data::GroupedDataset& ds) {
    check_same_family(trained);
    if (trained.size() != profile_ids.size()) {
        throw SchemaError("profile id list does not match the trained models");
    }
    const std::size_t m = trained.size();
    const std::size_t groups = ds.num_groups();

    SensitivityTable table;
    table.profile_ids.assign(profile_ids.begin(), profile_ids.end());
    table.group_names = ds.group_names;
    if (m == 1) {
        table.warnings.push_back(
            "only one profile supplied; hardware sensitivities are zero by construction");
    }

    table.loss.assign(m, std::vector<double>(groups, 0.0));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::uint32_t g = 0; g < groups; ++g) {
            table.loss[i][g] = group_loss(trained[i], ds, g);
        }
    }

    table.delta.assign(m, std::vector<double>(groups, 0.0));
    for (std::size_t i = 0; i < m; ++i) {
        for (std::uint32_t g = 0; g < groups; ++g) {
            double worst = 0.0;
            for (std::size_t j = 0; j < m; ++j) {
                worst = std::max(worst, std::abs(table.loss[i][g] - table.loss[j][g]));
            }
            table.delta[i][g] = worst;
        }
    }

    for (std::size_t i = 0; i < m; ++i) {
        const XiResult xi = fairness_violation(table.delta[i]);
        table.xi.push_back(xi.xi);
        table.xi_detail.push_back(xi);
    }

    table.rho = param_distances(trained);
    table.rho_max = *std::max_element(table.rho.begin(), table.rho.end());
    return table;
}

GroupGradients group_gradients(const models::Model& model, const data::GroupedDataset& ds) {
    GroupGradients out;
    out.group_names = ds.group_names;
    const auto sizes = ds.group_sizes();
    out.group_sizes.assign(sizes.begin(), sizes.end());
    const std::size_t n = model.params.size();
    for (std::uint32_t g = 0; g < ds.num_groups(); ++g) {
        std::vector<double> grad(n, 0.0);
        numkit::mean_loss_and_gradient(model, data::DataView::group(ds, g),
                                       vhw::reference_profile(), grad);
        const double norm = l2_norm(grad);
        out.norm.push_back(norm);
        out.zero.push_back(norm < 1e-300);
        out.gradient.push_back(std::move(grad));
    }
    return out;
}

AngleReport gradient_angles(const GroupGradients& grads) {
    const std::size_t g = grads.gradient.size();
    if (g == 0) throw SchemaError("no group gradients to compare");
    AngleReport report;
    report.cosine.assign(g, std::vector<double>(g, 0.0));
    for (std::size_t a = 0; a < g; ++a) {
        report.cosine[a][a] = 1.0;
        for (std::size_t b = a + 1; b < g; ++b) {
            double c = 0.0;
            if (!grads.zero[a] && !grads.zero[b]) {
                c = dot(grads.gradient[a], grads.gradient[b]) / (grads.norm[a] * grads.norm[b]);
            }
            report.cosine[a][b] = c;
            report.cosine[b][a] = c;
        }
    }

    report.minority_group = static_cast<std::size_t>(
        std::min_element(grads.group_sizes.begin(), grads.group_sizes.end()) -
        grads.group_sizes.begin());

    report.hypothesis_holds = true;
    for (std::size_t a = 0; a < g && report.hypothesis_holds; ++a) {
        if (a == report.minority_group) continue;
        for (std::size_t b = a + 1; b < g; ++b) {
            if (b == report.minority_group) continue;
            if (!(report.cosine[a][b] > 0.0)) {
                report.hypothesis_holds = false;
                break;
            }
        }
    }
    return report;
}

GroupCurvature group_hessian_lmax(const models::Model& model, const data::GroupedDataset& ds,
                                  std::uint64_t seed) {
    GroupCurvature out;
    for (std::uint32_t g = 0; g < ds.num_groups(); ++g) {
        const numkit::ModelLossObjective obj(model, data::DataView::group(ds, g),
                                             vhw::reference_profile());
        const auto op = numkit::hvp_operator(obj, model.params.values);
        const auto est = numkit::max_eigenvalue(op, obj.dim(), derive_seed(seed, "group", g));
        out.lambda_max.push_back(est.value);
        out.converged.push_back(est.converged);
    }
    return out;
}

TaylorReport taylor_bound_report(std::span<const models::Model> trained,
                                 std::span<const std::string> profile_ids,
                                 std::size_t anchor_index, const data::GroupedDataset& ds,
                                 std::uint64_t seed) {
    check_same_family(trained);
    if (trained.size() != profile_ids.size()) {
        throw SchemaError("profile id list does not match the trained models");
    }
    if (anchor_index >= trained.size()) {
        throw SchemaError("anchor index outside the trained model list");
    }

    const models::Model& anchor = trained[anchor_index];
    TaylorReport report;
    report.anchor_profile = profile_ids[anchor_index];
    report.rho = param_distances(trained)[anchor_index];

    const GroupGradients grads = group_gradients(anchor, ds);
    const GroupCurvature curvature = group_hessian_lmax(anchor, ds, seed);

    for (std::uint32_t g = 0; g < ds.num_groups(); ++g) {
        TaylorRow row;
        row.group = ds.group_names[g];
        const double anchor_loss = group_loss(anchor, ds, g);
        for (std::size_t j = 0; j < trained.size(); ++j) {
            row.delta = std::max(row.delta, std::abs(anchor_loss - group_loss(trained[j], ds, g)));
        }
        row.grad_norm = grads.norm[g];
        row.lambda_max = curvature.lambda_max[g];
        row.eigen_converged = curvature.converged[g];
        row.term1 = row.grad_norm * report.rho;
        row.term2 = 0.5 * row.lambda_max * report.rho * report.rho;
        row.rhs = row.term1 + row.term2;
        row.slack = row.rhs - row.delta;
        report.rows.push_back(std::move(row));
    }
    return report;
}

HessianBoundReport hessian_bound_report(const models::Model& model, const data::DataView& view,
                                        std::uint64_t seed) {
    if (model.spec.head != models::Head::sigmoid) {
        throw SchemaError("the curvature ceiling is stated for sigmoid heads only");
    }
    if (view.size() == 0) throw EmptySubset("curvature ceiling over an empty view");

    HessianBoundReport report;

    {
        const numkit::ModelLossObjective obj(model, view, vhw::reference_profile());
        const auto op = numkit::hvp_operator(obj, model.params.values);
        const auto est = numkit::max_eigenvalue(op, obj.dim(), derive_seed(seed, "lhs"));
        report.lhs = est.value;
        report.lhs_converged = est.converged;
    }

    const std::size_t n = model.params.size();
    const bool has_hidden = !model.spec.hidden.empty();
    std::vector<double> grad_z(n);
    double rank_one = 0.0;
    double residual = 0.0;
    for (std::size_t k = 0; k < view.size(); ++k) {
        const auto x = view.row(k);
        const double f = models::output_value(model, x, models::ScalarOutput::sigmoid);
        models::output_gradient(model, x, models::ScalarOutput::logit, grad_z);
        double gz2 = 0.0;
        for (double v : grad_z) gz2 += v * v;
        rank_one += f * (1.0 - f) * gz2;

        // The logit of a linear model has a vanishing Hessian; skip the
        // eigensolver there instead of grinding on a zero operator.
        double sample_lambda = 0.0;
        if (has_hidden) {
            const numkit::ScalarOutputObjective obj(model, x, models::ScalarOutput::logit);
            const auto op = numkit::hvp_operator(obj, model.params.values);
            const auto est =
                numkit::max_eigenvalue(op, n, derive_seed(seed, "sample", k), 300, 1e-8);
            sample_lambda = est.value;
        }
        const double y = static_cast<double>(view.label(k));
        residual += std::abs(f - y) * sample_lambda;
    }

    const double inv_n = 1.0 / static_cast<double>(view.size());
    report.mean_rank_one = rank_one * inv_n;
    report.mean_residual = residual * inv_n;
    report.rhs = report.mean_rank_one + report.mean_residual;
    report.slack = report.rhs - report.lhs;
    return report;
}

void to_json(nlohmann::json& j, const SensitivityTable& table) {
    j = nlohmann::json::object();
    j["profiles"] = table.profile_ids;
    j["groups"] = table.group_names;
    j["loss"] = table.loss;
    j["delta"] = table.delta;
    j["xi"] = table.xi;
    j["rho"] = table.rho;
    j["rho_max"] = table.rho_max;
    auto pairs = nlohmann::json::array();
    for (const auto& d : table.xi_detail) {
        pairs.push_back({{"group_hi", d.group_hi}, {"group_lo", d.group_lo}});
    }
    j["xi_pairs"] = pairs;
    j["warnings"] = table.warnings;
}

void to_json(nlohmann::json& j, const TaylorReport& report) {
    j = nlohmann::json::object();
    j["anchor_profile"] = report.anchor_profile;
    j["rho"] = report.rho;
    auto rows = nlohmann::json::array();
    for (const auto& r : report.rows) {
        rows.push_back({{"group", r.group},
                        {"delta", r.delta},
                        {"grad_norm", r.grad_norm},
                        {"lambda_max", r.lambda_max},
                        {"term1", r.term1},
                        {"term2", r.term2},
                        {"rhs", r.rhs},
                        {"slack", r.slack},
                        {"eigen_converged", r.eigen_converged}});
    }
    j["rows"] = rows;
}

void to_json(nlohmann::json& j, const HessianBoundReport& report) {
    j = nlohmann::json::object();
    j["lhs"] = report.lhs;
    j["rhs"] = report.rhs;
    j["mean_rank_one"] = report.mean_rank_one;
    j["mean_residual"] = report.mean_residual;
    j["slack"] = report.slack;
    j["lhs_converged"] = report.lhs_converged;
}

void to_json(nlohmann::json& j, const BoundaryReport& report) {
    j = nlohmann::json::object();
    j["groups"] = report.group_names;
    j["dtb_mean"] = report.dtb_mean;
    j["closeness_mean"] = report.closeness_mean;
}

} // namespace fairdrift::fairlab
