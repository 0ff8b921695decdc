#include "fairdrift/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "fairdrift/errors.hpp"
#include "fairdrift/hash.hpp"
#include "fairdrift/rng.hpp"

namespace fairdrift::models {

namespace {

struct LayerShape {
    std::size_t in = 0;
    std::size_t out = 0;
    std::string name;
};

std::vector<LayerShape> layer_shapes(const ArchSpec& spec) {
    std::vector<LayerShape> shapes;
    std::size_t in = spec.input_dim;
    for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
        shapes.push_back({in, spec.hidden[l].width, "hidden" + std::to_string(l)});
        in = spec.hidden[l].width;
    }
    shapes.push_back({in, spec.output_dim(), "head"});
    return shapes;
}

double activate(Activation a, double z) {
    return a == Activation::relu ? std::max(0.0, z) : std::tanh(z);
}

// Derivative through the activation, expressed via whichever of (pre, post)
// is cheapest: relu looks at the sign of pre, tanh reuses post.
double activate_grad(Activation a, double pre, double post) {
    return a == Activation::relu ? (pre > 0.0 ? 1.0 : 0.0) : 1.0 - post * post;
}

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

void check_finite(std::span<const double> v, const std::string& layer) {
    if (!all_finite(v)) {
        throw NumericalOverflow("non-finite activation in layer '" + layer + "'");
    }
}

std::uint64_t to_le_bits(double v) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap64(bits);
    }
    return bits;
}

double from_le_bits(std::uint64_t bits) {
    if constexpr (std::endian::native == std::endian::big) {
        bits = __builtin_bswap64(bits);
    }
    return std::bit_cast<double>(bits);
}

} // namespace

std::size_t ArchSpec::param_count() const {
    std::size_t n = 0;
    for (const auto& s : layer_shapes(*this)) n += s.in * s.out + s.out;
    return n;
}

std::shared_ptr<const ParamLayout> ArchSpec::make_layout() const {
    auto layout = std::make_shared<ParamLayout>();
    for (const auto& s : layer_shapes(*this)) {
        layout->add_block(s.name + "/weight", s.in * s.out);
        layout->add_block(s.name + "/bias", s.out);
    }
    return layout;
}

void ArchSpec::validate() const {
    if (input_dim == 0) throw SchemaError("model input dimension must be positive");
    if (classes < 2) throw SchemaError("model needs at least two classes");
    if (head == Head::sigmoid && classes != 2) {
        throw SchemaError("sigmoid head is binary; use softmax for " + std::to_string(classes) +
                          " classes");
    }
    for (std::size_t l = 0; l < hidden.size(); ++l) {
        if (hidden[l].width == 0) {
            throw SchemaError("hidden layer " + std::to_string(l) + " has zero width");
        }
    }
}

Model init_model(const ArchSpec& spec, std::uint64_t seed) {
    spec.validate();
    Model model;
    model.spec = spec;
    model.params = ParamVector(std::vector<double>(spec.param_count(), 0.0), spec.make_layout());

    Rng rng(derive_seed(seed, "init"));
    std::size_t offset = 0;
    for (const auto& s : layer_shapes(spec)) {
        const double limit = std::sqrt(6.0 / static_cast<double>(s.in + s.out));
        for (std::size_t i = 0; i < s.in * s.out; ++i) {
            model.params[offset + i] = rng.uniform(-limit, limit);
        }
        offset += s.in * s.out + s.out; // biases stay zero
    }
    return model;
}

void Workspace::size_for(const ArchSpec& spec) {
    pre.resize(spec.hidden.size());
    post.resize(spec.hidden.size());
    std::size_t widest = 0;
    for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
        pre[l].resize(spec.hidden[l].width);
        post[l].resize(spec.hidden[l].width);
        widest = std::max(widest, spec.hidden[l].width);
    }
    logits.resize(spec.output_dim());
    dlogits.resize(spec.output_dim());
    dh_a.resize(widest);
    dh_b.resize(widest);
}

void forward(const Model& model, std::span<const double> x,
             const vhw::VirtualHardwareProfile& profile, Workspace& ws) {
    const ArchSpec& spec = model.spec;
    if (x.size() != spec.input_dim) {
        throw SchemaError("sample has " + std::to_string(x.size()) + " features, model expects " +
                          std::to_string(spec.input_dim));
    }
    ws.size_for(spec);

    const double* p = model.params.data();
    std::span<const double> input = x;
    std::size_t offset = 0;
    for (std::size_t l = 0; l < spec.hidden.size(); ++l) {
        const std::size_t in = input.size();
        const std::size_t out = spec.hidden[l].width;
        const double* w = p + offset;
        const double* b = p + offset + in * out;
        for (std::size_t i = 0; i < out; ++i) {
            const double acc = vhw::dot({w + i * in, in}, input, profile);
            ws.pre[l][i] = vhw::add(acc, b[i], profile);
        }
        check_finite(ws.pre[l], "hidden" + std::to_string(l));
        for (std::size_t i = 0; i < out; ++i) {
            ws.post[l][i] = activate(spec.hidden[l].activation, ws.pre[l][i]);
        }
        input = ws.post[l];
        offset += in * out + out;
    }

    const std::size_t in = input.size();
    const std::size_t out = spec.output_dim();
    const double* w = p + offset;
    const double* b = p + offset + in * out;
    for (std::size_t i = 0; i < out; ++i) {
        const double acc = vhw::dot({w + i * in, in}, input, profile);
        ws.logits[i] = vhw::add(acc, b[i], profile);
    }
    check_finite(ws.logits, "head");
}

std::vector<double> probabilities(const ArchSpec& spec, std::span<const double> logits) {
    if (logits.size() != spec.output_dim()) {
        throw SchemaError("logit count does not match the head");
    }
    std::vector<double> probs;
    if (spec.head == Head::sigmoid) {
        probs.push_back(sigmoid(logits[0]));
    } else {
        const double m = *std::max_element(logits.begin(), logits.end());
        double sum = 0.0;
        probs.resize(logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i) {
            probs[i] = std::exp(logits[i] - m);
            sum += probs[i];
        }
        for (double& v : probs) v /= sum;
    }
    for (double& v : probs) v = std::clamp(v, prob_floor, 1.0 - prob_floor);
    return probs;
}

std::vector<double> predict_proba(const Model& model, std::span<const double> x,
                                  const vhw::VirtualHardwareProfile& profile) {
    static thread_local Workspace ws;
    forward(model, x, profile, ws);
    return probabilities(model.spec, ws.logits);
}

double sample_loss_from_logits(const ArchSpec& spec, std::span<const double> logits,
                               std::uint32_t label) {
    if (label >= spec.classes) {
        throw SchemaError("label " + std::to_string(label) + " outside " +
                          std::to_string(spec.classes) + " classes");
    }
    const std::vector<double> probs = probabilities(spec, logits);
    if (spec.head == Head::sigmoid) {
        const double f = probs[0];
        return label == 1 ? -std::log(f) : -std::log(1.0 - f);
    }
    return -std::log(probs[label]);
}

void loss_dlogits(const ArchSpec& spec, std::span<const double> logits, std::uint32_t label,
                  Workspace& ws) {
    if (label >= spec.classes) {
        throw SchemaError("label " + std::to_string(label) + " outside " +
                          std::to_string(spec.classes) + " classes");
    }
    // The clamp above protects the log only; the gradient identity p - y is
    // exact and stays well behaved without it.
    ws.dlogits.resize(spec.output_dim());
    if (spec.head == Head::sigmoid) {
        ws.dlogits[0] = sigmoid(logits[0]) - static_cast<double>(label);
        return;
    }
    const double m = *std::max_element(logits.begin(), logits.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        ws.dlogits[i] = std::exp(logits[i] - m);
        sum += ws.dlogits[i];
    }
    for (std::size_t i = 0; i < logits.size(); ++i) {
        ws.dlogits[i] = ws.dlogits[i] / sum - (i == label ? 1.0 : 0.0);
    }
}

void backward(const Model& model, std::span<const double> x, Workspace& ws,
              double scale, std::span<double> grad) {
    const ArchSpec& spec = model.spec;
    if (grad.size() != model.params.size()) {
        throw LayoutError("gradient buffer does not match the parameter count");
    }

    const auto shapes = layer_shapes(spec);
    std::vector<std::size_t> offsets(shapes.size());
    std::size_t offset = 0;
    for (std::size_t l = 0; l < shapes.size(); ++l) {
        offsets[l] = offset;
        offset += shapes[l].in * shapes[l].out + shapes[l].out;
    }

    const double* p = model.params.data();
    auto& scratch_a = ws.dh_a;
    auto& scratch_b = ws.dh_b;

    // Head layer.
    {
        const LayerShape& s = shapes.back();
        std::span<const double> in_act = spec.hidden.empty() ? x : std::span<const double>(ws.post.back());
        const double* w = p + offsets.back();
        for (std::size_t i = 0; i < s.out; ++i) {
            const double d = ws.dlogits[i];
            double* gw = grad.data() + offsets.back() + i * s.in;
            for (std::size_t j = 0; j < s.in; ++j) gw[j] += scale * d * in_act[j];
            grad[offsets.back() + s.in * s.out + i] += scale * d;
        }
        if (!spec.hidden.empty()) {
            for (std::size_t j = 0; j < s.in; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < s.out; ++i) acc += w[i * s.in + j] * ws.dlogits[i];
                scratch_a[j] = acc;
            }
        }
    }

    // Hidden layers, last to first. dcur holds d(loss)/d(post activation).
    double* dcur = scratch_a.data();
    double* dnext = scratch_b.data();
    for (std::size_t l = spec.hidden.size(); l-- > 0;) {
        const LayerShape& s = shapes[l];
        std::span<const double> in_act = l == 0 ? x : std::span<const double>(ws.post[l - 1]);
        const double* w = p + offsets[l];
        // Fold the activation derivative in place: dcur becomes d/d(pre).
        for (std::size_t i = 0; i < s.out; ++i) {
            dcur[i] *= activate_grad(spec.hidden[l].activation, ws.pre[l][i], ws.post[l][i]);
        }
        for (std::size_t i = 0; i < s.out; ++i) {
            const double d = dcur[i];
            double* gw = grad.data() + offsets[l] + i * s.in;
            for (std::size_t j = 0; j < s.in; ++j) gw[j] += scale * d * in_act[j];
            grad[offsets[l] + s.in * s.out + i] += scale * d;
        }
        if (l > 0) {
            for (std::size_t j = 0; j < s.in; ++j) {
                double acc = 0.0;
                for (std::size_t i = 0; i < s.out; ++i) acc += w[i * s.in + j] * dcur[i];
                dnext[j] = acc;
            }
            std::swap(dcur, dnext);
        }
    }
}

double output_value(const Model& model, std::span<const double> x, ScalarOutput kind) {
    if (model.spec.head != Head::sigmoid) {
        throw SchemaError("scalar output views need a sigmoid head");
    }
    static thread_local Workspace ws;
    forward(model, x, vhw::reference_profile(), ws);
    const double z = ws.logits[0];
    return kind == ScalarOutput::logit ? z : sigmoid(z);
}

void output_gradient(const Model& model, std::span<const double> x, ScalarOutput kind,
                     std::span<double> grad) {
    if (model.spec.head != Head::sigmoid) {
        throw SchemaError("scalar output views need a sigmoid head");
    }
    static thread_local Workspace ws;
    forward(model, x, vhw::reference_profile(), ws);
    std::fill(grad.begin(), grad.end(), 0.0);
    if (kind == ScalarOutput::logit) {
        ws.dlogits[0] = 1.0;
    } else {
        const double f = sigmoid(ws.logits[0]);
        ws.dlogits[0] = f * (1.0 - f);
    }
    backward(model, x, ws, 1.0, grad);
}

void save_checkpoint(const std::filesystem::path& path, const Model& model,
                     const CheckpointMeta& meta) {
    nlohmann::json header;
    header["format"] = "fairdrift-checkpoint-v1";
    header["arch"] = model.spec;
    header["init_seed"] = meta.init_seed;
    header["profile_id"] = meta.profile_id;
    header["config_hash"] = meta.config_hash;
    header["param_count"] = model.params.size();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
    out << header.dump() << '\n';

    std::vector<char> block(model.params.size() * sizeof(std::uint64_t));
    for (std::size_t i = 0; i < model.params.size(); ++i) {
        const std::uint64_t bits = to_le_bits(model.params[i]);
        std::memcpy(block.data() + i * sizeof(bits), &bits, sizeof(bits));
    }
    out.write(block.data(), static_cast<std::streamsize>(block.size()));
    if (!out) throw Error("failed writing checkpoint: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint: " + path.string());

    std::string line;
    if (!std::getline(in, line)) throw SchemaError("checkpoint has no header line: " + path.string());
    nlohmann::json header = nlohmann::json::parse(line, nullptr, false);
    if (header.is_discarded() || !header.is_object()) {
        throw SchemaError("checkpoint header is not valid JSON: " + path.string());
    }
    if (header.value("format", "") != std::string("fairdrift-checkpoint-v1")) {
        throw SchemaError("unrecognized checkpoint format in " + path.string());
    }

    Model model;
    try {
        model.spec = header.at("arch").get<ArchSpec>();
        if (meta != nullptr) {
            meta->init_seed = header.at("init_seed").get<std::uint64_t>();
            meta->profile_id = header.at("profile_id").get<std::string>();
            meta->config_hash = header.at("config_hash").get<std::string>();
        }
        const auto stored = header.at("param_count").get<std::size_t>();
        if (stored != model.spec.param_count()) {
            throw SchemaError("checkpoint parameter count disagrees with its architecture");
        }
    } catch (const nlohmann::json::exception& e) {
        throw SchemaError(std::string("bad checkpoint header: ") + e.what());
    }
    model.spec.validate();

    const std::size_t n = model.spec.param_count();
    std::vector<char> block(n * sizeof(std::uint64_t));
    in.read(block.data(), static_cast<std::streamsize>(block.size()));
    if (static_cast<std::size_t>(in.gcount()) != block.size()) {
        throw SchemaError("checkpoint parameter block is truncated: " + path.string());
    }
    if (in.peek() != std::ifstream::traits_type::eof()) {
        throw SchemaError("checkpoint has trailing bytes: " + path.string());
    }

    model.params = ParamVector(std::vector<double>(n, 0.0), model.spec.make_layout());
    for (std::size_t i = 0; i < n; ++i) {
        std::uint64_t bits = 0;
        std::memcpy(&bits, block.data() + i * sizeof(bits), sizeof(bits));
        model.params[i] = from_le_bits(bits);
    }
    return model;
}

std::uint64_t param_fingerprint(const Model& model) {
    return fnv1a(model.params.span());
}

void to_json(nlohmann::json& j, const ArchSpec& spec) {
    j = nlohmann::json::object();
    j["input_dim"] = spec.input_dim;
    j["hidden"] = nlohmann::json::array();
    for (const auto& h : spec.hidden) {
        j["hidden"].push_back({{"width", h.width},
                               {"activation", h.activation == Activation::relu ? "relu" : "tanh"}});
    }
    j["head"] = spec.head == Head::sigmoid ? "sigmoid" : "softmax";
    j["classes"] = spec.classes;
}

void from_json(const nlohmann::json& j, ArchSpec& spec) {
    try {
        spec.input_dim = j.at("input_dim").get<std::size_t>();
        spec.classes = j.at("classes").get<std::size_t>();
        const auto head = j.at("head").get<std::string>();
        if (head == "sigmoid") {
            spec.head = Head::sigmoid;
        } else if (head == "softmax") {
            spec.head = Head::softmax;
        } else {
            throw ConfigError("unknown head '" + head + "'");
        }
        spec.hidden.clear();
        for (const auto& item : j.at("hidden")) {
            HiddenLayer layer;
            layer.width = item.at("width").get<std::size_t>();
            const auto act = item.at("activation").get<std::string>();
            if (act == "relu") {
                layer.activation = Activation::relu;
            } else if (act == "tanh") {
                layer.activation = Activation::tanh;
            } else {
                throw ConfigError("unknown activation '" + act + "'");
            }
            spec.hidden.push_back(layer);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("bad architecture description: ") + e.what());
    }
}

} // namespace fairdrift::models
