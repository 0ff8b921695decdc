#pragma once

// Flat parameter vector with a named block layout. The layout is the frozen
// contract between models, optimizers and every diagnostic that compares or
// differentiates parameters: blocks appear in declaration order, each layer
// stores its weight block (row-major) followed by its bias block.

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fairdrift/errors.hpp"

namespace fairdrift {

struct LayoutBlock {
    std::string name;
    std::size_t offset = 0;
    std::size_t size = 0;
};

class ParamLayout {
public:
    std::size_t add_block(const std::string& name, std::size_t size) {
        blocks_.push_back({name, total_, size});
        total_ += size;
        return blocks_.size() - 1;
    }

    const std::vector<LayoutBlock>& blocks() const { return blocks_; }
    std::size_t total_size() const { return total_; }

    // Name of the block containing flat index i, for diagnostics.
    const std::string& block_at(std::size_t i) const {
        for (const auto& b : blocks_) {
            if (i >= b.offset && i < b.offset + b.size) return b.name;
        }
        throw LayoutError("parameter index " + std::to_string(i) + " outside layout");
    }

    bool operator==(const ParamLayout& other) const {
        if (total_ != other.total_ || blocks_.size() != other.blocks_.size()) return false;
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            const auto& a = blocks_[i];
            const auto& b = other.blocks_[i];
            if (a.name != b.name || a.offset != b.offset || a.size != b.size) return false;
        }
        return true;
    }

private:
    std::vector<LayoutBlock> blocks_;
    std::size_t total_ = 0;
};

struct ParamVector {
    std::vector<double> values;
    std::shared_ptr<const ParamLayout> layout; // may be null for anonymous vectors

    ParamVector() = default;
    explicit ParamVector(std::size_t n) : values(n, 0.0) {}
    ParamVector(std::vector<double> v, std::shared_ptr<const ParamLayout> l)
        : values(std::move(v)), layout(std::move(l)) {}

    std::size_t size() const { return values.size(); }
    double* data() { return values.data(); }
    const double* data() const { return values.data(); }
    double& operator[](std::size_t i) { return values[i]; }
    double operator[](std::size_t i) const { return values[i]; }
    std::span<double> span() { return values; }
    std::span<const double> span() const { return values; }
};

inline bool same_layout(const ParamVector& a, const ParamVector& b) {
    if (a.size() != b.size()) return false;
    if (!a.layout || !b.layout) return true; // anonymous vectors only compare length
    return *a.layout == *b.layout;
}

// Plain binary64 vector helpers. These are deliberately sequential; reduction
// policies belong to the vhw module, diagnostics always run in reference
// arithmetic.
inline double dot(std::span<const double> a, std::span<const double> b) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

inline double l2_norm(std::span<const double> a) {
    double acc = 0.0;
    for (double v : a) acc += v * v;
    return std::sqrt(acc);
}

inline void axpy(double alpha, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += alpha * x[i];
}

inline bool all_finite(std::span<const double> a) {
    for (double v : a) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

} // namespace fairdrift
