#include "fairdrift/vhw.hpp"

#include <mutex>
#include <unordered_map>

#include "fairdrift/errors.hpp"
#include "fairdrift/rng.hpp"

namespace fairdrift::vhw {

namespace {

// The recursive tree sum and the sequential fold are written once, templated
// on the accumulator type. With SSE codegen and -ffp-contract=off, arithmetic
// on float rounds every operation to binary32, which is exactly the model.

template <typename Acc>
inline Acc load_elem(double x, Precision element) {
    if (element == Precision::binary32) return static_cast<Acc>(static_cast<float>(x));
    return static_cast<Acc>(x);
}

template <typename Acc>
Acc sum_sequential(std::span<const double> v, Precision element) {
    Acc acc = Acc(0);
    for (double x : v) acc = acc + load_elem<Acc>(x, element);
    return acc;
}

template <typename Acc>
Acc sum_ordered(std::span<const double> v, std::span<const std::uint32_t> order, Precision element) {
    Acc acc = Acc(0);
    for (std::uint32_t i : order) acc = acc + load_elem<Acc>(v[i], element);
    return acc;
}

// Balanced split: [lo, mid) and [mid, hi) with mid at the midpoint, so the
// tree depth is ceil(log2 n) and the textbook pairwise error bound applies.
template <typename Acc>
Acc sum_pairwise(std::span<const double> v, std::size_t lo, std::size_t hi, Precision element) {
    const std::size_t n = hi - lo;
    if (n == 1) return load_elem<Acc>(v[lo], element);
    if (n == 2) return load_elem<Acc>(v[lo], element) + load_elem<Acc>(v[lo + 1], element);
    const std::size_t mid = lo + n / 2;
    return sum_pairwise<Acc>(v, lo, mid, element) + sum_pairwise<Acc>(v, mid, hi, element);
}

// Chunked tree: each chunk folded sequentially, chunk sums combined as a
// balanced tree. Chunk sums are accumulator-precision intermediates and are
// not re-rounded to element precision.
template <typename Acc>
Acc combine_pairwise(std::span<const Acc> v, std::size_t lo, std::size_t hi) {
    const std::size_t n = hi - lo;
    if (n == 1) return v[lo];
    if (n == 2) return v[lo] + v[lo + 1];
    const std::size_t mid = lo + n / 2;
    return combine_pairwise<Acc>(v, lo, mid) + combine_pairwise<Acc>(v, mid, hi);
}

template <typename Acc>
Acc sum_chunked(std::span<const double> v, std::size_t chunk, Precision element) {
    std::vector<Acc> partial;
    partial.reserve((v.size() + chunk - 1) / chunk);
    for (std::size_t lo = 0; lo < v.size(); lo += chunk) {
        const std::size_t hi = std::min(lo + chunk, v.size());
        partial.push_back(sum_sequential<Acc>(v.subspan(lo, hi - lo), element));
    }
    return combine_pairwise<Acc>(std::span<const Acc>(partial), 0, partial.size());
}

// Permutations depend on (seed, n) only, so they are cached per thread. The
// gradient reduction calls this once per parameter coordinate per batch and
// recomputing the Fisher-Yates order every time would dominate the profile.
std::span<const std::uint32_t> permutation_for(std::uint64_t seed, std::size_t n) {
    thread_local std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cache;
    std::uint64_t key = seed ^ (0x9e3779b97f4a7c15ull * (n + 1));
    key = splitmix64(key);
    auto it = cache.find(key);
    if (it == cache.end()) {
        it = cache.emplace(key, seeded_permutation(seed, n)).first;
    }
    return it->second;
}

template <typename Acc>
double reduce_as(std::span<const double> values, const VirtualHardwareProfile& p) {
    if (values.empty()) return 0.0;
    switch (p.order) {
        case OrderPolicy::sequential:
            return static_cast<double>(sum_sequential<Acc>(values, p.element));
        case OrderPolicy::permuted:
            return static_cast<double>(
                sum_ordered<Acc>(values, permutation_for(p.permutation_seed, values.size()), p.element));
        case OrderPolicy::pairwise:
            return static_cast<double>(sum_pairwise<Acc>(values, 0, values.size(), p.element));
        case OrderPolicy::chunked_tree:
            return static_cast<double>(sum_chunked<Acc>(values, p.chunk_size, p.element));
    }
    throw ConfigError("unknown order policy");
}

} // namespace

void validate(const VirtualHardwareProfile& profile) {
    if (profile.id.empty()) throw ConfigError("hardware profile needs a non-empty id");
    if (profile.order == OrderPolicy::chunked_tree && profile.chunk_size == 0) {
        throw ConfigError("profile '" + profile.id + "': chunked_tree needs chunk_size >= 1");
    }
}

double reduce(std::span<const double> values, const VirtualHardwareProfile& profile) {
    if (profile.accumulator == Precision::binary32) return reduce_as<float>(values, profile);
    return reduce_as<double>(values, profile);
}

double dot(std::span<const double> xs, std::span<const double> ys,
           const VirtualHardwareProfile& profile) {
    if (xs.size() != ys.size()) {
        throw SchemaError("dot: length mismatch (" + std::to_string(xs.size()) + " vs " +
                          std::to_string(ys.size()) + ")");
    }
    if (xs.empty()) return 0.0;
    thread_local std::vector<double> products;
    products.resize(xs.size());
    if (profile.element == Precision::binary32) {
        for (std::size_t i = 0; i < xs.size(); ++i) {
            products[i] = static_cast<double>(static_cast<float>(xs[i]) * static_cast<float>(ys[i]));
        }
    } else {
        for (std::size_t i = 0; i < xs.size(); ++i) products[i] = xs[i] * ys[i];
    }
    return reduce(std::span<const double>(products), profile);
}

double add(double a, double b, const VirtualHardwareProfile& profile) {
    if (profile.accumulator == Precision::binary32) {
        return static_cast<double>(static_cast<float>(a) + static_cast<float>(b));
    }
    return a + b;
}

double round_element(double x, const VirtualHardwareProfile& profile) {
    if (profile.element == Precision::binary32) return static_cast<double>(static_cast<float>(x));
    return x;
}

const std::vector<VirtualHardwareProfile>& builtin_profiles() {
    static const std::vector<VirtualHardwareProfile> registry = {
        {"hw_ref", OrderPolicy::sequential, Precision::binary64, Precision::binary64, 0, 0},
        {"hw_seq32", OrderPolicy::sequential, Precision::binary32, Precision::binary32, 0, 0},
        {"hw_pair32", OrderPolicy::pairwise, Precision::binary32, Precision::binary32, 0, 0},
        {"hw_perm32_s7", OrderPolicy::permuted, Precision::binary32, Precision::binary32, 7, 0},
        {"hw_warp32", OrderPolicy::chunked_tree, Precision::binary32, Precision::binary32, 0, 32},
    };
    return registry;
}

const VirtualHardwareProfile& reference_profile() { return builtin_profiles().front(); }

const VirtualHardwareProfile& builtin_profile(const std::string& id) {
    for (const auto& p : builtin_profiles()) {
        if (p.id == id) return p;
    }
    throw ConfigError("unknown builtin hardware profile '" + id + "'");
}

bool is_reference(const VirtualHardwareProfile& profile) {
    return profile.order == OrderPolicy::sequential &&
           profile.accumulator == Precision::binary64 && profile.element == Precision::binary64;
}

std::string to_string(OrderPolicy policy) {
    switch (policy) {
        case OrderPolicy::sequential: return "sequential";
        case OrderPolicy::permuted: return "permuted";
        case OrderPolicy::pairwise: return "pairwise";
        case OrderPolicy::chunked_tree: return "chunked_tree";
    }
    return "unknown";
}

std::string to_string(Precision precision) {
    return precision == Precision::binary32 ? "binary32" : "binary64";
}

namespace {

OrderPolicy policy_from_string(const std::string& s) {
    if (s == "sequential") return OrderPolicy::sequential;
    if (s == "permuted") return OrderPolicy::permuted;
    if (s == "pairwise") return OrderPolicy::pairwise;
    if (s == "chunked_tree") return OrderPolicy::chunked_tree;
    throw ConfigError("unknown order policy '" + s + "'");
}

Precision precision_from_string(const std::string& s) {
    if (s == "binary32") return Precision::binary32;
    if (s == "binary64") return Precision::binary64;
    throw ConfigError("unknown precision '" + s + "'");
}

} // namespace

void to_json(nlohmann::json& j, const VirtualHardwareProfile& profile) {
    j = nlohmann::json{
        {"id", profile.id},
        {"order", to_string(profile.order)},
        {"accumulator", to_string(profile.accumulator)},
        {"element", to_string(profile.element)},
    };
    if (profile.order == OrderPolicy::permuted) j["permutation_seed"] = profile.permutation_seed;
    if (profile.order == OrderPolicy::chunked_tree) j["chunk_size"] = profile.chunk_size;
}

void from_json(const nlohmann::json& j, VirtualHardwareProfile& profile) {
    profile = VirtualHardwareProfile{};
    profile.id = j.at("id").get<std::string>();
    profile.order = policy_from_string(j.at("order").get<std::string>());
    profile.accumulator = precision_from_string(j.at("accumulator").get<std::string>());
    profile.element = precision_from_string(j.at("element").get<std::string>());
    if (j.contains("permutation_seed")) profile.permutation_seed = j["permutation_seed"].get<std::uint64_t>();
    if (j.contains("chunk_size")) profile.chunk_size = j["chunk_size"].get<std::size_t>();
    validate(profile);
}

} // namespace fairdrift::vhw
