#include "doctest.h"

#include <cmath>
#include <limits>
#include <vector>

#include "fairdrift/errors.hpp"
#include "fairdrift/oracles.hpp"
#include "fairdrift/rng.hpp"
#include "fairdrift/vhw.hpp"

using namespace fairdrift;
using vhw::VirtualHardwareProfile;

namespace {

// Uniform(0,1) values pre-rounded to binary32 so that element rounding inside
// reduce() is exact and the accumulation error bounds apply cleanly.
std::vector<double> uniform32_vector(std::size_t n, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> v(n);
    for (auto& x : v) x = static_cast<double>(static_cast<float>(rng.uniform()));
    return v;
}

double abs_sum(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += std::abs(x);
    return s;
}

constexpr double eps32 = 1.1920928955078125e-7; // 2^-23

} // namespace

TEST_SUITE("vhw") {

TEST_CASE("catastrophic absorption under binary32 sequential") {
    const std::vector<double> v = {1e8, 1.0, -1e8};
    // 1e8f absorbs the 1.0 entirely, the reference keeps it.
    CHECK(vhw::reduce(v, vhw::builtin_profile("hw_seq32")) == 0.0);
    CHECK(vhw::reduce(v, vhw::reference_profile()) == 1.0);
}

TEST_CASE("pairwise binary32 stays within the log-depth error bound") {
    const auto v = uniform32_vector(10000, 21u);
    const double exact = oracles::compensated_sum(v);
    const double got = vhw::reduce(v, vhw::builtin_profile("hw_pair32"));
    const double depth = std::ceil(std::log2(10000.0)); // 14
    CHECK(std::abs(got - exact) <= depth * eps32 * abs_sum(v) * 1.001);
}

TEST_CASE("sequential binary32 stays within the (n-1) eps bound") {
    for (std::uint64_t seed : {3u, 4u, 5u}) {
        const auto v = uniform32_vector(10000, seed);
        const double exact = oracles::compensated_sum(v);
        const double got = vhw::reduce(v, vhw::builtin_profile("hw_seq32"));
        CHECK(std::abs(got - exact) <= 9999.0 * eps32 * abs_sum(v) * 1.001);
    }
}

TEST_CASE("profiles disagree with each other but agree with themselves") {
    const auto v = uniform32_vector(10000, 7u);
    const double seq = vhw::reduce(v, vhw::builtin_profile("hw_seq32"));
    const double pair = vhw::reduce(v, vhw::builtin_profile("hw_pair32"));
    const double perm = vhw::reduce(v, vhw::builtin_profile("hw_perm32_s7"));
    const double warp = vhw::reduce(v, vhw::builtin_profile("hw_warp32"));
    CHECK(seq != pair);
    CHECK(seq != perm);
    CHECK(seq != warp);
    // Bit-exact repeatability of every plan.
    for (const auto& p : vhw::builtin_profiles()) {
        const double a = vhw::reduce(v, p);
        const double b = vhw::reduce(v, p);
        CHECK(a == b);
    }
}

TEST_CASE("exactly representable sums are exact under every plan") {
    const std::vector<double> v = {1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0};
    for (const auto& p : vhw::builtin_profiles()) {
        CHECK(vhw::reduce(v, p) == 28.0);
    }
}

TEST_CASE("dot cancellation exposes the accumulator precision") {
    const std::vector<double> xs = {4096.0, 1.0, 4096.0};
    const std::vector<double> ys = {4096.0, 1.0, -4096.0};
    // Products are (2^24, 1, -2^24); binary32 absorbs the 1 into 2^24.
    CHECK(vhw::dot(xs, ys, vhw::builtin_profile("hw_seq32")) == 0.0);
    const double ref = vhw::dot(xs, ys, vhw::reference_profile());
    CHECK(ref == 1.0);
    CHECK(std::abs(0.0 - ref) / std::abs(ref) > 1e-3);
}

TEST_CASE("degenerate shapes") {
    const std::vector<double> empty;
    for (const auto& p : vhw::builtin_profiles()) {
        CHECK(vhw::reduce(empty, p) == 0.0);
    }
    const std::vector<double> one = {3.25};
    CHECK(vhw::reduce(one, vhw::builtin_profile("hw_warp32")) == 3.25);
    const std::vector<double> xs = {1.0, 2.0};
    const std::vector<double> ys = {1.0};
    CHECK_THROWS_AS(vhw::dot(xs, ys, vhw::reference_profile()), SchemaError);
}

TEST_CASE("chunked tree handles ragged tails") {
    // 70 values with chunk 32: chunks of 32, 32, 6.
    std::vector<double> v(70, 0.0);
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i % 13) * 0.5;
    const auto& warp = vhw::builtin_profile("hw_warp32");
    const double got = vhw::reduce(v, warp);
    const double exact = oracles::compensated_sum(v);
    CHECK(got == doctest::Approx(exact).epsilon(1e-5));
    CHECK(vhw::reduce(v, warp) == got);
}

TEST_CASE("permuted order is a real reordering") {
    // Pinned input where any non-identity fold order changes the binary32 sum.
    const auto v = uniform32_vector(128, 99u);
    const double seq = vhw::reduce(v, vhw::builtin_profile("hw_seq32"));
    const double perm = vhw::reduce(v, vhw::builtin_profile("hw_perm32_s7"));
    CHECK(seq != perm);
}

TEST_CASE("profile json round trip") {
    for (const auto& p : vhw::builtin_profiles()) {
        nlohmann::json j;
        vhw::to_json(j, p);
        VirtualHardwareProfile back;
        vhw::from_json(j, back);
        CHECK(back.id == p.id);
        CHECK(back.order == p.order);
        CHECK(back.accumulator == p.accumulator);
        CHECK(back.element == p.element);
        CHECK(back.permutation_seed == p.permutation_seed);
        CHECK(back.chunk_size == p.chunk_size);
    }
    VirtualHardwareProfile bad;
    bad.id = "x";
    bad.order = vhw::OrderPolicy::chunked_tree;
    bad.chunk_size = 0;
    CHECK_THROWS_AS(vhw::validate(bad), ConfigError);
}

TEST_CASE("registry shape") {
    const auto& reg = vhw::builtin_profiles();
    REQUIRE(reg.size() == 5);
    CHECK(reg.front().id == "hw_ref");
    CHECK(vhw::is_reference(reg.front()));
    for (std::size_t i = 1; i < reg.size(); ++i) CHECK_FALSE(vhw::is_reference(reg[i]));
    CHECK_THROWS_AS(vhw::builtin_profile("hw_nope"), ConfigError);
}

} // TEST_SUITE
