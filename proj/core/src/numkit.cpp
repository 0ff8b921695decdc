#include "fairdrift/numkit.hpp"

#include <algorithm>
#include <cmath>

#include "fairdrift/errors.hpp"
#include "fairdrift/param_vector.hpp"
#include "fairdrift/rng.hpp"

namespace fairdrift::numkit {

namespace {

void check_view(const data::DataView& view, const models::ArchSpec& spec) {
    if (view.dataset == nullptr || view.size() == 0) {
        throw EmptySubset("loss over an empty data view");
    }
    if (view.dataset->feature_dim != spec.input_dim) {
        throw SchemaError("dataset has " + std::to_string(view.dataset->feature_dim) +
                          " features, model expects " + std::to_string(spec.input_dim));
    }
    if (view.dataset->num_classes != spec.classes) {
        throw SchemaError("dataset has " + std::to_string(view.dataset->num_classes) +
                          " classes, model expects " + std::to_string(spec.classes));
    }
}

} // namespace

double mean_loss(const models::Model& model, const data::DataView& view,
                 const vhw::VirtualHardwareProfile& profile) {
    check_view(view, model.spec);
    static thread_local models::Workspace ws;
    double total = 0.0;
    for (std::size_t k = 0; k < view.size(); ++k) {
        models::forward(model, view.row(k), profile, ws);
        total += models::sample_loss_from_logits(model.spec, ws.logits, view.label(k));
    }
    return total / static_cast<double>(view.size());
}

double mean_loss_and_gradient(const models::Model& model, const data::DataView& view,
                              const vhw::VirtualHardwareProfile& profile,
                              std::span<double> grad) {
    check_view(view, model.spec);
    if (grad.size() != model.params.size()) {
        throw LayoutError("gradient buffer does not match the parameter count");
    }
    static thread_local models::Workspace ws;
    std::fill(grad.begin(), grad.end(), 0.0);
    double total = 0.0;
    const double inv_n = 1.0 / static_cast<double>(view.size());
    for (std::size_t k = 0; k < view.size(); ++k) {
        models::forward(model, view.row(k), profile, ws);
        total += models::sample_loss_from_logits(model.spec, ws.logits, view.label(k));
        models::loss_dlogits(model.spec, ws.logits, view.label(k), ws);
        models::backward(model, view.row(k), ws, inv_n, grad);
    }
    return total * inv_n;
}

ModelLossObjective::ModelLossObjective(const models::Model& model, data::DataView view,
                                       vhw::VirtualHardwareProfile profile)
    : scratch_(model), view_(std::move(view)), profile_(std::move(profile)) {
    check_view(view_, scratch_.spec);
}

double ModelLossObjective::value(std::span<const double> theta) const {
    std::copy(theta.begin(), theta.end(), scratch_.params.values.begin());
    return mean_loss(scratch_, view_, profile_);
}

void ModelLossObjective::gradient(std::span<const double> theta, std::span<double> grad) const {
    std::copy(theta.begin(), theta.end(), scratch_.params.values.begin());
    mean_loss_and_gradient(scratch_, view_, profile_, grad);
}

ScalarOutputObjective::ScalarOutputObjective(const models::Model& model,
                                             std::span<const double> x,
                                             models::ScalarOutput kind)
    : scratch_(model), x_(x.begin(), x.end()), kind_(kind) {
    if (model.spec.head != models::Head::sigmoid) {
        throw SchemaError("scalar output objectives need a sigmoid head");
    }
}

double ScalarOutputObjective::value(std::span<const double> theta) const {
    std::copy(theta.begin(), theta.end(), scratch_.params.values.begin());
    return models::output_value(scratch_, x_, kind_);
}

void ScalarOutputObjective::gradient(std::span<const double> theta,
                                     std::span<double> grad) const {
    std::copy(theta.begin(), theta.end(), scratch_.params.values.begin());
    models::output_gradient(scratch_, x_, kind_, grad);
}

QuadraticObjective::QuadraticObjective(std::vector<double> a_row_major, std::vector<double> b)
    : a_(std::move(a_row_major)), b_(std::move(b)) {
    const std::size_t n = b_.size();
    if (a_.size() != n * n) {
        throw SchemaError("quadratic matrix is not n x n for the given linear term");
    }
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            if (a_[i * n + j] != a_[j * n + i]) {
                throw SchemaError("quadratic matrix must be symmetric");
            }
        }
    }
}

double QuadraticObjective::value(std::span<const double> theta) const {
    const std::size_t n = b_.size();
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += a_[i * n + j] * theta[j];
        total += 0.5 * theta[i] * row + b_[i] * theta[i];
    }
    return total;
}

void QuadraticObjective::gradient(std::span<const double> theta, std::span<double> grad) const {
    const std::size_t n = b_.size();
    for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < n; ++j) row += a_[i * n + j] * theta[j];
        grad[i] = row + b_[i];
    }
}

namespace {

constexpr double fd_cbrt_eps = 6.055454452393343e-06; // cbrt(2^-52)

double hvp_step(std::span<const double> theta, std::span<const double> v) {
    const double vn = l2_norm(v);
    if (vn == 0.0) throw ZeroDirection("Hessian-vector product along a zero direction");
    return fd_cbrt_eps * (1.0 + l2_norm(theta)) / std::max(vn, 1.0);
}

// One central-difference stencil: (grad(theta + h v) - grad(theta - h v)) / 2h.
void hvp_stencil(const Objective& objective, std::span<const double> theta,
                 std::span<const double> v, double h, std::vector<double>& out,
                 std::vector<double>& shifted, std::vector<double>& gplus) {
    const std::size_t n = theta.size();
    shifted.resize(n);
    gplus.resize(n);
    out.resize(n);
    for (std::size_t i = 0; i < n; ++i) shifted[i] = theta[i] + h * v[i];
    objective.gradient(shifted, gplus);
    for (std::size_t i = 0; i < n; ++i) shifted[i] = theta[i] - h * v[i];
    objective.gradient(shifted, out);
    const double inv = 1.0 / (2.0 * h);
    for (std::size_t i = 0; i < n; ++i) out[i] = (gplus[i] - out[i]) * inv;
}

} // namespace

HvpResult hvp(const Objective& objective, std::span<const double> theta,
              std::span<const double> v) {
    if (theta.size() != objective.dim() || v.size() != objective.dim()) {
        throw LayoutError("Hessian-vector product buffers do not match the objective");
    }
    const double h = hvp_step(theta, v);

    HvpResult result;
    std::vector<double> shifted;
    std::vector<double> gplus;
    std::vector<double> half;
    hvp_stencil(objective, theta, v, h, result.hv, shifted, gplus);
    hvp_stencil(objective, theta, v, 0.5 * h, half, shifted, gplus);

    double gap = 0.0;
    double ref = 0.0;
    for (std::size_t i = 0; i < theta.size(); ++i) {
        gap += (result.hv[i] - half[i]) * (result.hv[i] - half[i]);
        ref += result.hv[i] * result.hv[i];
    }
    result.inconsistency = std::sqrt(gap) / std::max(std::sqrt(ref), 1e-8);
    result.ill_conditioned = result.inconsistency > 1e-4;
    return result;
}

LinearOperator hvp_operator(const Objective& objective, std::vector<double> theta) {
    if (theta.size() != objective.dim()) {
        throw LayoutError("operator parameters do not match the objective");
    }
    // Buffers are shared across applies; the operator is stateful but cheap.
    auto shifted = std::make_shared<std::vector<double>>();
    auto gplus = std::make_shared<std::vector<double>>();
    auto out = std::make_shared<std::vector<double>>();
    auto theta_p = std::make_shared<std::vector<double>>(std::move(theta));
    return [&objective, theta_p, shifted, gplus, out](std::span<const double> v,
                                                      std::span<double> result) {
        const double h = hvp_step(*theta_p, v);
        hvp_stencil(objective, *theta_p, v, h, *out, *shifted, *gplus);
        std::copy(out->begin(), out->end(), result.begin());
    };
}

namespace {

struct PowerSweep {
    double rayleigh = 0.0;
    bool converged = false;
    std::size_t iterations = 0;
};

PowerSweep power_sweep(const LinearOperator& op, double shift, std::vector<double> v,
                       std::size_t max_iterations, double tolerance) {
    const std::size_t n = v.size();
    std::vector<double> w(n);
    PowerSweep sweep;
    double prev = 0.0;
    for (std::size_t it = 0; it < max_iterations; ++it) {
        ++sweep.iterations;
        op(v, w);
        if (shift != 0.0) axpy(shift, v, w);
        double mu = 0.0;
        for (std::size_t i = 0; i < n; ++i) mu += v[i] * w[i];
        const double wn = l2_norm(w);
        if (wn == 0.0) {
            // The operator annihilated the iterate; nothing left to amplify.
            sweep.rayleigh = mu;
            sweep.converged = true;
            return sweep;
        }
        for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / wn;
        if (it > 0 && std::abs(mu - prev) <= tolerance * std::max(1.0, std::abs(mu))) {
            sweep.rayleigh = mu;
            sweep.converged = true;
            return sweep;
        }
        prev = mu;
        sweep.rayleigh = mu;
    }
    return sweep;
}

} // namespace

EigenEstimate max_eigenvalue(const LinearOperator& op, std::size_t dim, std::uint64_t seed,
                             std::size_t max_iterations, double tolerance) {
    if (dim == 0) throw SchemaError("eigenvalue of a zero-dimensional operator");
    Rng rng(derive_seed(seed, "power"));
    std::vector<double> start(dim);
    for (double& x : start) x = rng.normal();
    const double sn = l2_norm(start);
    for (double& x : start) x /= sn;

    // Sweep 1: magnitude of the dominant eigenvalue, sign unknown. Only a
    // couple of digits are needed to size the shift, so the tolerance is
    // loose; the sweep does not have to converge for the shift to work.
    const PowerSweep first =
        power_sweep(op, 0.0, start, max_iterations, std::max(tolerance, 1e-4));

    EigenEstimate est;
    est.iterations = first.iterations;
    const double r = 1.1 * std::abs(first.rayleigh) + 1e-12;

    // Sweep 2: on op + r*I every eigenvalue is shifted up by r, so the
    // algebraically largest one now also has the largest magnitude.
    const PowerSweep second = power_sweep(op, r, start, max_iterations, tolerance);
    est.iterations += second.iterations;
    est.value = second.rayleigh - r;
    est.converged = second.converged;
    return est;
}

DenseHessian full_hessian(const Objective& objective, std::span<const double> theta) {
    const std::size_t n = objective.dim();
    if (n > dense_hessian_cap) {
        throw OracleTooLarge("dense Hessian refused for " + std::to_string(n) +
                             " parameters (cap " + std::to_string(dense_hessian_cap) + ")");
    }
    if (theta.size() != n) {
        throw LayoutError("parameter vector does not match the objective");
    }

    DenseHessian dense;
    dense.n = n;
    dense.matrix.assign(n * n, 0.0);
    std::vector<double> e(n, 0.0);
    for (std::size_t j = 0; j < n; ++j) {
        e[j] = 1.0;
        const HvpResult column = hvp(objective, theta, e);
        e[j] = 0.0;
        dense.any_ill_conditioned = dense.any_ill_conditioned || column.ill_conditioned;
        for (std::size_t i = 0; i < n; ++i) dense.matrix[i * n + j] = column.hv[i];
    }

    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = i + 1; j < n; ++j) {
            const double a = dense.matrix[i * n + j];
            const double b = dense.matrix[j * n + i];
            dense.max_asymmetry = std::max(dense.max_asymmetry, std::abs(a - b));
            const double s = 0.5 * (a + b);
            dense.matrix[i * n + j] = s;
            dense.matrix[j * n + i] = s;
        }
    }
    return dense;
}

} // namespace fairdrift::numkit
