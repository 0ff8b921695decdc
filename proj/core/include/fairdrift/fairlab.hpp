#pragma once

// Per-group diagnostics over trained models: how far the same training run
// drifts across hardware profiles, how that drift splits across protected
// groups, and the gradient/curvature quantities that explain the split. All
// functions here evaluate in reference arithmetic; profiles only matter as
// the provenance of the parameter vectors being compared.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairdrift/data.hpp"
#include "fairdrift/models.hpp"

namespace fairdrift::fairlab {

// Views of one dataset split by group id, indexed by group.
std::vector<data::DataView> group_views(const data::GroupedDataset& ds);

// Mean reference-mode cross-entropy of one group.
double group_loss(const models::Model& model, const data::GroupedDataset& ds,
                  std::uint32_t group_id);

// Fraction of correctly classified samples (argmax class, reference forward).
double accuracy(const models::Model& model, const data::DataView& view);

// Mean predictive diversity 1 - sum_k p_k^2: zero for a confident prediction,
// largest on the decision boundary. The distance-to-boundary proxy.
double mean_diversity(const models::Model& model, const data::DataView& view);

struct BoundaryReport {
    std::vector<std::string> group_names;
    std::vector<double> dtb_mean;       // mean diversity per group
    std::vector<double> closeness_mean; // binary heads only: mean f(1-f); else empty
};

BoundaryReport distance_to_boundary(const models::Model& model, const data::GroupedDataset& ds);

// Largest spread among per-group sensitivities: value and the two groups
// realizing it.
struct XiResult {
    double xi = 0.0;
    std::size_t group_hi = 0;
    std::size_t group_lo = 0;
};

XiResult fairness_violation(std::span<const double> deltas);

// Pairwise parameter distance: rho[m] = max over other profiles of
// |theta_m - theta_m'|_2. Throws LayoutError when the models disagree in
// architecture.
std::vector<double> param_distances(std::span<const models::Model> trained);

// The central table: one trained model per profile, evaluated per group.
// delta[m][a] = max over other profiles of |L_a(theta_m) - L_a(theta_m')|.
struct SensitivityTable {
    std::vector<std::string> profile_ids;
    std::vector<std::string> group_names;
    std::vector<std::vector<double>> loss;  // [profile][group]
    std::vector<std::vector<double>> delta; // [profile][group]
    std::vector<double> xi;                 // [profile]
    std::vector<XiResult> xi_detail;        // [profile]
    std::vector<double> rho;                // [profile]
    double rho_max = 0.0;
    std::vector<std::string> warnings;
};

SensitivityTable hardware_sensitivity(std::span<const models::Model> trained,
                                      std::span<const std::string> profile_ids,
                                      const data::GroupedDataset& ds);

// Per-group mean gradients at a parameter point, with norms and directions.
struct GroupGradients {
    std::vector<std::string> group_names;
    std::vector<std::size_t> group_sizes;
    std::vector<std::vector<double>> gradient; // [group][param]
    std::vector<double> norm;
    std::vector<bool> zero; // norm underflowed; direction left as zeros
};

GroupGradients group_gradients(const models::Model& model, const data::GroupedDataset& ds);

// Pairwise gradient angles and the acute-angle hypothesis: every pair of
// non-minority group gradients strictly acute. When it holds (and the model
// sits at a critical point of the total loss), the smallest group must carry
// the largest gradient norm.
struct AngleReport {
    std::vector<std::vector<double>> cosine; // [group][group], 1 on the diagonal
    std::size_t minority_group = 0;          // smallest group, ties to the lowest id
    bool hypothesis_holds = false;
};

AngleReport gradient_angles(const GroupGradients& grads);

// Largest eigenvalue of each group's loss Hessian by the operator route.
struct GroupCurvature {
    std::vector<double> lambda_max;
    std::vector<bool> converged;
};

GroupCurvature group_hessian_lmax(const models::Model& model, const data::GroupedDataset& ds,
                                  std::uint64_t seed);

// First-and-second-order explanation of the drift: for the anchor profile,
// each group's observed delta against |g_a| rho + 0.5 lambda_a rho^2.
struct TaylorRow {
    std::string group;
    double delta = 0.0;
    double grad_norm = 0.0;
    double lambda_max = 0.0;
    double term1 = 0.0; // grad_norm * rho
    double term2 = 0.0; // 0.5 * lambda_max * rho^2
    double rhs = 0.0;
    double slack = 0.0; // rhs - delta; negative means the bound failed
    bool eigen_converged = false;
};

struct TaylorReport {
    std::string anchor_profile;
    double rho = 0.0; // anchor's max parameter distance
    std::vector<TaylorRow> rows;
};

TaylorReport taylor_bound_report(std::span<const models::Model> trained,
                                 std::span<const std::string> profile_ids,
                                 std::size_t anchor_index, const data::GroupedDataset& ds,
                                 std::uint64_t seed);

// Curvature ceiling for binary cross-entropy: the top eigenvalue of the mean
// loss Hessian against the per-sample decomposition
//   mean of f(1-f) |grad z|^2 + |f - y| lambda(hess z)
// taken at the pre-sigmoid logit z. Sigmoid heads only.
struct HessianBoundReport {
    double lhs = 0.0;
    double rhs = 0.0;
    double mean_rank_one = 0.0; // f(1-f) |grad z|^2 part
    double mean_residual = 0.0; // |f - y| lambda(hess z) part
    double slack = 0.0;         // rhs - lhs
    bool lhs_converged = false;
};

HessianBoundReport hessian_bound_report(const models::Model& model, const data::DataView& view,
                                        std::uint64_t seed);

void to_json(nlohmann::json& j, const SensitivityTable& table);
void to_json(nlohmann::json& j, const TaylorReport& report);
void to_json(nlohmann::json& j, const HessianBoundReport& report);
void to_json(nlohmann::json& j, const BoundaryReport& report);

} // namespace fairdrift::fairlab
