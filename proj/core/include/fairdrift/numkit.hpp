#pragma once

// Derivative machinery shared by the diagnostics: objectives over flat
// parameter vectors, finite-difference Hessian-vector products with a
// built-in consistency check, a shifted power iteration for the largest
// eigenvalue, and a dense Hessian assembler for small models. Everything here
// runs in reference binary64 arithmetic; the only place a hardware profile
// enters is the forward pass inside a model loss objective.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "fairdrift/data.hpp"
#include "fairdrift/models.hpp"
#include "fairdrift/vhw.hpp"

namespace fairdrift::numkit {

class Objective {
public:
    virtual ~Objective() = default;
    virtual std::size_t dim() const = 0;
    virtual double value(std::span<const double> theta) const = 0;
    virtual void gradient(std::span<const double> theta, std::span<double> grad) const = 0;
};

// Mean cross-entropy of a model over a data view. The forward pass runs under
// the given profile; the average over samples and the whole backward pass are
// plain binary64. Throws EmptySubset for an empty view.
double mean_loss(const models::Model& model, const data::DataView& view,
                 const vhw::VirtualHardwareProfile& profile);

// Same traversal, also accumulating the mean parameter gradient. Returns the
// loss so callers get both from one pass.
double mean_loss_and_gradient(const models::Model& model, const data::DataView& view,
                              const vhw::VirtualHardwareProfile& profile,
                              std::span<double> grad);

// Mean loss as a function of the parameters, for the curvature machinery.
// Keeps its own scratch model; the dataset behind the view must outlive it.
class ModelLossObjective : public Objective {
public:
    ModelLossObjective(const models::Model& model, data::DataView view,
                       vhw::VirtualHardwareProfile profile);

    std::size_t dim() const override { return scratch_.params.size(); }
    double value(std::span<const double> theta) const override;
    void gradient(std::span<const double> theta, std::span<double> grad) const override;

private:
    mutable models::Model scratch_;
    data::DataView view_;
    vhw::VirtualHardwareProfile profile_;
};

// Scalar network output at one fixed sample as a function of the parameters
// (sigmoid heads only). Lets the curvature tools differentiate the logit or
// the sigmoid output itself.
class ScalarOutputObjective : public Objective {
public:
    ScalarOutputObjective(const models::Model& model, std::span<const double> x,
                          models::ScalarOutput kind);

    std::size_t dim() const override { return scratch_.params.size(); }
    double value(std::span<const double> theta) const override;
    void gradient(std::span<const double> theta, std::span<double> grad) const override;

private:
    mutable models::Model scratch_;
    std::vector<double> x_;
    models::ScalarOutput kind_;
};

// f(theta) = 0.5 theta' A theta + b' theta for a symmetric A. Test probe with
// a Hessian known by construction.
class QuadraticObjective : public Objective {
public:
    QuadraticObjective(std::vector<double> a_row_major, std::vector<double> b);

    std::size_t dim() const override { return b_.size(); }
    double value(std::span<const double> theta) const override;
    void gradient(std::span<const double> theta, std::span<double> grad) const override;
    const std::vector<double>& matrix() const { return a_; }

private:
    std::vector<double> a_;
    std::vector<double> b_;
};

struct HvpResult {
    std::vector<double> hv;      // central-difference estimate at step h
    double inconsistency = 0.0;  // relative gap between the h and h/2 estimates
    bool ill_conditioned = false;
};

// Hessian-vector product by central differences of the gradient, step
// h = cbrt(eps) * (1 + |theta|) / max(|v|, 1). The same stencil is evaluated
// again at h/2; a relative gap above 1e-4 sets ill_conditioned. Throws
// ZeroDirection for a zero v.
HvpResult hvp(const Objective& objective, std::span<const double> theta,
              std::span<const double> v);

using LinearOperator = std::function<void(std::span<const double>, std::span<double>)>;

// Single-step variant packaged as a linear operator for the eigensolver;
// skips the consistency pass so each apply costs two gradient evaluations.
// The objective is captured by reference and must outlive the operator.
LinearOperator hvp_operator(const Objective& objective, std::vector<double> theta);

struct EigenEstimate {
    double value = 0.0;
    bool converged = false;
    std::size_t iterations = 0;
};

// Largest (signed) eigenvalue of a symmetric operator by power iteration with
// a spectral shift: a first sweep estimates the dominant magnitude r, a second
// runs on op + r*I so the algebraically largest eigenvalue dominates even when
// a negative one has the biggest magnitude.
EigenEstimate max_eigenvalue(const LinearOperator& op, std::size_t dim, std::uint64_t seed,
                             std::size_t max_iterations = 500, double tolerance = 1e-10);

struct DenseHessian {
    std::vector<double> matrix; // n x n, row-major, symmetrized
    std::size_t n = 0;
    double max_asymmetry = 0.0; // largest |H_ij - H_ji| before symmetrizing
    bool any_ill_conditioned = false;
};

// Hessian column by column from checked HVPs, then (M + M')/2. Refuses
// parameter counts above dense_hessian_cap with OracleTooLarge.
constexpr std::size_t dense_hessian_cap = 512;

DenseHessian full_hessian(const Objective& objective, std::span<const double> theta);

} // namespace fairdrift::numkit
