#pragma once

#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "esnet/tensor.hpp"

namespace esnet {

enum class ParamRole { ConvWeight, ConvBias, BnGamma, BnBeta, BnRunningMean, BnRunningVar };

const char* role_name(ParamRole r);

inline constexpr std::size_t kNoParam = std::numeric_limits<std::size_t>::max();

struct ParamInfo {
    std::string name;
    ParamRole role;
    Shape4 shape;      // vectors are stored as (C, 1, 1, 1)
    std::size_t rank;  // 4 for conv weights, 1 for per-channel vectors
    std::size_t fan_in = 0;

    bool learnable() const { return role != ParamRole::BnRunningMean && role != ParamRole::BnRunningVar; }
    /// Weight decay applies to convolution parameters only.
    bool decays() const { return role == ParamRole::ConvWeight || role == ParamRole::ConvBias; }
};

/// Ordered, name-unique registry of parameter tensors.
class ParamLayout {
public:
    std::size_t add(ParamInfo info);
    std::size_t index_of(const std::string& name) const;
    bool contains(const std::string& name) const { return by_name_.count(name) != 0; }
    const ParamInfo& operator[](std::size_t i) const { return entries_[i]; }
    std::size_t size() const { return entries_.size(); }
    const std::vector<ParamInfo>& entries() const { return entries_; }

private:
    std::vector<ParamInfo> entries_;
    std::unordered_map<std::string, std::size_t> by_name_;
};

/// Values for every entry of a layout, in layout order.
template <typename T>
class ParamStore {
public:
    ParamStore() = default;
    explicit ParamStore(ParamLayout layout);

    const ParamLayout& layout() const { return layout_; }
    std::size_t size() const { return values_.size(); }

    Tensor4<T>& operator[](std::size_t i) { return values_[i]; }
    const Tensor4<T>& operator[](std::size_t i) const { return values_[i]; }
    Tensor4<T>& at(const std::string& name) { return values_[layout_.index_of(name)]; }
    const Tensor4<T>& at(const std::string& name) const { return values_[layout_.index_of(name)]; }

    /// Fan-in scaled uniform init for conv weights (bound sqrt(6 / fan_in)),
    /// zero biases, gamma 1, beta 0, running mean 0, running var 1.
    void init(std::uint64_t seed);
    /// Zero every convolution weight and bias; normalization stays as is.
    void zero_convolutions();

    std::size_t learnable_count() const;

    template <typename U>
    ParamStore<U> cast() const {
        ParamStore<U> out(layout_);
        for (std::size_t i = 0; i < values_.size(); ++i) out[i] = values_[i].template cast<U>();
        return out;
    }

    bool operator==(const ParamStore& o) const { return values_ == o.values_; }

private:
    ParamLayout layout_;
    std::vector<Tensor4<T>> values_;
};

/// Gradient buffers matching a layout; running-stat entries stay empty.
template <typename T>
struct Gradients {
    std::vector<Tensor4<T>> values;

    explicit Gradients(const ParamLayout& layout);
    Tensor4<T>& operator[](std::size_t i) { return values[i]; }
    const Tensor4<T>& operator[](std::size_t i) const { return values[i]; }
};

/// Seeded generator. Draws are derived from std::mt19937_64 by hand rather
/// than through <random> distributions, whose output is implementation-defined.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : engine_(seed) {}
    std::uint64_t next() { return engine_(); }
    /// Uniform in [0, 1) with 53 random bits.
    double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
    /// Uniform integer in [0, n); n must be positive.
    std::uint64_t below(std::uint64_t n) { return static_cast<std::uint64_t>(uniform() * static_cast<double>(n)); }

private:
    std::mt19937_64 engine_;
};

}  // namespace esnet
