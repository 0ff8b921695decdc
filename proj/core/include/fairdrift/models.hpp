#pragma once

// Small dense classifiers: an optional stack of relu/tanh hidden layers under
// a sigmoid or softmax head. The forward pass routes every inner product and
// bias addition through a hardware profile; backpropagation always runs in
// plain binary64 using the cached activations, which is exactly the split the
// simulated nondeterminism model calls for.

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fairdrift/param_vector.hpp"
#include "fairdrift/vhw.hpp"

namespace fairdrift::models {

enum class Activation { relu, tanh };
enum class Head { sigmoid, softmax };

struct HiddenLayer {
    std::size_t width = 0;
    Activation activation = Activation::tanh;
    bool operator==(const HiddenLayer&) const = default;
};

struct ArchSpec {
    std::size_t input_dim = 0;
    std::vector<HiddenLayer> hidden;
    Head head = Head::sigmoid;
    std::size_t classes = 2; // label arity; the sigmoid head encodes it as one logit

    bool operator==(const ArchSpec&) const = default;

    // Number of head outputs: 1 for sigmoid, `classes` for softmax.
    std::size_t output_dim() const { return head == Head::sigmoid ? 1 : classes; }
    std::size_t param_count() const;

    // Frozen flat layout: layers in declaration order, weights (row-major,
    // rows = outputs) then bias per layer, head last.
    std::shared_ptr<const ParamLayout> make_layout() const;

    void validate() const; // throws SchemaError on impossible shapes
};

struct Model {
    ArchSpec spec;
    ParamVector params;
};

// Clamp bound applied to probabilities before any logarithm.
constexpr double prob_floor = 1e-12;

// Glorot-uniform weights (+-sqrt(6/(fan_in+fan_out))), zero biases.
// Bit-reproducible for a given (spec, seed).
Model init_model(const ArchSpec& spec, std::uint64_t seed);

// Reusable buffers for one sample's forward and backward pass. Sized lazily
// against a spec; safe to reuse across samples, not across threads.
struct Workspace {
    std::vector<std::vector<double>> pre;  // per hidden layer, before activation
    std::vector<std::vector<double>> post; // per hidden layer, after activation
    std::vector<double> logits;
    std::vector<double> dlogits;
    std::vector<double> dh_a;
    std::vector<double> dh_b;
    void size_for(const ArchSpec& spec);
};

// Forward pass under a profile; fills the workspace caches and leaves raw
// head outputs in ws.logits. Throws NumericalOverflow naming the layer if a
// non-finite value appears.
void forward(const Model& model, std::span<const double> x,
             const vhw::VirtualHardwareProfile& profile, Workspace& ws);

// Probabilities from cached logits, reference binary64 arithmetic, clamped to
// [prob_floor, 1 - prob_floor]. Sigmoid heads return one value, softmax K.
std::vector<double> probabilities(const ArchSpec& spec, std::span<const double> logits);

// Convenience wrapper: forward + probabilities.
std::vector<double> predict_proba(const Model& model, std::span<const double> x,
                                  const vhw::VirtualHardwareProfile& profile);

// Cross-entropy of one sample from cached logits (clamped probabilities).
double sample_loss_from_logits(const ArchSpec& spec, std::span<const double> logits,
                               std::uint32_t label);

// Derivative of the sample cross-entropy with respect to the raw logits:
// softmax gives p - onehot(y), sigmoid gives f - y. Written into ws.dlogits.
void loss_dlogits(const ArchSpec& spec, std::span<const double> logits, std::uint32_t label,
                  Workspace& ws);

// Reverse pass from an arbitrary head seed (ws.dlogits), accumulating
// (scale *) the parameter gradient into grad. Plain binary64 arithmetic over
// the caches left by forward().
void backward(const Model& model, std::span<const double> x, Workspace& ws,
              double scale, std::span<double> grad);

// Scalar views of a sigmoid-head network, used by the curvature diagnostics:
// either the raw pre-sigmoid logit or the sigmoid output itself.
enum class ScalarOutput { logit, sigmoid };

double output_value(const Model& model, std::span<const double> x, ScalarOutput kind);
void output_gradient(const Model& model, std::span<const double> x, ScalarOutput kind,
                     std::span<double> grad);

// ---- checkpoints ----

struct CheckpointMeta {
    std::uint64_t init_seed = 0;
    std::string profile_id;
    std::string config_hash;
};

// One JSON header line (spec, seed, profile, config hash, parameter count)
// followed by the raw little-endian binary64 parameter block. Round trips are
// bit-exact.
void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointMeta& meta);
Model load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr);

std::uint64_t param_fingerprint(const Model& model);

void to_json(nlohmann::json& j, const ArchSpec& spec);
void from_json(const nlohmann::json& j, ArchSpec& spec);

} // namespace fairdrift::models
