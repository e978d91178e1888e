#include "esnet/params.hpp"

#include <cmath>
#include <stdexcept>

namespace esnet {

const char* role_name(ParamRole r) {
    switch (r) {
        case ParamRole::ConvWeight: return "conv_weight";
        case ParamRole::ConvBias: return "conv_bias";
        case ParamRole::BnGamma: return "bn_gamma";
        case ParamRole::BnBeta: return "bn_beta";
        case ParamRole::BnRunningMean: return "bn_running_mean";
        case ParamRole::BnRunningVar: return "bn_running_var";
    }
    return "unknown";
}

std::size_t ParamLayout::add(ParamInfo info) {
    if (by_name_.count(info.name)) throw std::invalid_argument("duplicate parameter name: " + info.name);
    const std::size_t idx = entries_.size();
    by_name_.emplace(info.name, idx);
    entries_.push_back(std::move(info));
    return idx;
}

std::size_t ParamLayout::index_of(const std::string& name) const {
    auto it = by_name_.find(name);
    if (it == by_name_.end()) throw std::out_of_range("no parameter named " + name);
    return it->second;
}

template <typename T>
ParamStore<T>::ParamStore(ParamLayout layout) : layout_(std::move(layout)) {
    values_.reserve(layout_.size());
    for (const ParamInfo& p : layout_.entries()) {
        const T fill = p.role == ParamRole::BnGamma || p.role == ParamRole::BnRunningVar ? T(1) : T(0);
        values_.emplace_back(p.shape, fill);
    }
}

template <typename T>
void ParamStore<T>::init(std::uint64_t seed) {
    Rng rng(seed);
    for (std::size_t i = 0; i < values_.size(); ++i) {
        const ParamInfo& p = layout_[i];
        switch (p.role) {
            case ParamRole::ConvWeight: {
                const double bound = std::sqrt(6.0 / static_cast<double>(p.fan_in));
                for (T& v : values_[i].values()) v = static_cast<T>(rng.uniform(-bound, bound));
                break;
            }
            case ParamRole::ConvBias:
            case ParamRole::BnBeta:
            case ParamRole::BnRunningMean: values_[i].fill(T(0)); break;
            case ParamRole::BnGamma:
            case ParamRole::BnRunningVar: values_[i].fill(T(1)); break;
        }
    }
}

template <typename T>
void ParamStore<T>::zero_convolutions() {
    for (std::size_t i = 0; i < values_.size(); ++i) {
        const ParamRole r = layout_[i].role;
        if (r == ParamRole::ConvWeight || r == ParamRole::ConvBias) values_[i].fill(T(0));
    }
}

template <typename T>
std::size_t ParamStore<T>::learnable_count() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (layout_[i].learnable()) n += values_[i].size();
    }
    return n;
}

template <typename T>
Gradients<T>::Gradients(const ParamLayout& layout) {
    values.reserve(layout.size());
    for (const ParamInfo& p : layout.entries()) {
        values.emplace_back(p.learnable() ? p.shape : Shape4{});
    }
}

template class ParamStore<float>;
template class ParamStore<double>;
template struct Gradients<float>;
template struct Gradients<double>;
template class ParamStore<long double>;
template struct Gradients<long double>;

}  // namespace esnet
