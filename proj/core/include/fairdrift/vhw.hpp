#pragma once

// Virtual hardware profiles: deterministic stand-ins for the accumulation
// differences real accelerators exhibit. A profile fixes the order in which a
// sum is associated and the precision of elements and accumulator, nothing
// else. Running the same reduction under two profiles gives two genuinely
// different floating-point results while each profile stays bit-reproducible.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace fairdrift::vhw {

enum class Precision { binary32, binary64 };

enum class OrderPolicy {
    sequential,   // left-to-right fold in input order
    permuted,     // left-to-right fold over a seeded Fisher-Yates order
    pairwise,     // balanced binary tree
    chunked_tree, // fixed-size sequential chunks, chunk sums combined pairwise
};

struct VirtualHardwareProfile {
    std::string id;
    OrderPolicy order = OrderPolicy::sequential;
    Precision accumulator = Precision::binary64;
    Precision element = Precision::binary64;
    std::uint64_t permutation_seed = 0; // used by permuted only
    std::size_t chunk_size = 0;         // used by chunked_tree only
};

// Throws ConfigError if the profile's policy parameters are inconsistent
// (missing chunk size, zero-length id, ...).
void validate(const VirtualHardwareProfile& profile);

// Sum of values under the profile's plan. Elements are rounded to the element
// precision before any addition; every addition is performed and rounded in
// the accumulator precision. Empty input sums to +0.0.
double reduce(std::span<const double> values, const VirtualHardwareProfile& profile);

// Inner product: elementwise products in element precision, then reduce().
// Lengths must match (SchemaError otherwise).
double dot(std::span<const double> xs, std::span<const double> ys,
           const VirtualHardwareProfile& profile);

// Single addition in the profile's accumulator precision. Forward passes use
// this for bias terms so that a binary32 profile never smuggles a binary64
// intermediate into the activation path.
double add(double a, double b, const VirtualHardwareProfile& profile);

// Round one value to the profile's element precision.
double round_element(double x, const VirtualHardwareProfile& profile);

// The registry shipped with the library. First entry is the reference profile
// (sequential binary64), the others are the binary32 variants used by the
// stock experiments.
const std::vector<VirtualHardwareProfile>& builtin_profiles();
const VirtualHardwareProfile& reference_profile();

// Lookup by id in the builtin registry; throws ConfigError if absent.
const VirtualHardwareProfile& builtin_profile(const std::string& id);

bool is_reference(const VirtualHardwareProfile& profile);

std::string to_string(OrderPolicy policy);
std::string to_string(Precision precision);

void to_json(nlohmann::json& j, const VirtualHardwareProfile& profile);
void from_json(const nlohmann::json& j, VirtualHardwareProfile& profile);

} // namespace fairdrift::vhw
