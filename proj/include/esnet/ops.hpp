#pragma once

// Differentiable primitives over NCHW tensors. Every forward has a matching
// backward that returns exact analytic gradients. All functions are pure;
// the only mutating entry point is batchnorm2d(), which updates running
// statistics in train mode.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "esnet/tensor.hpp"

namespace esnet {

/// Stride, dilation and zero padding per axis, in (height, width) order.
struct ConvGeometry {
    std::array<std::size_t, 2> stride{1, 1};
    std::array<std::size_t, 2> dilation{1, 1};
    std::array<std::size_t, 2> padding{0, 0};

    bool operator==(const ConvGeometry&) const = default;
};

/// Padding that keeps a stride-1 convolution at input resolution.
/// Kernel extents are odd everywhere in this library, so this is exact.
constexpr std::size_t same_padding(std::size_t kernel, std::size_t dilation) {
    return dilation * (kernel - 1) / 2;
}

constexpr std::size_t effective_extent(std::size_t kernel, std::size_t dilation) {
    return dilation * (kernel - 1) + 1;
}

/// Output extent of a convolution along one axis; throws when the dilated
/// kernel does not fit the padded input.
std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t dilation, std::size_t padding, const char* axis = "H");

/// Output extent of a transposed convolution along one axis.
std::size_t transposed_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                  std::size_t dilation, std::size_t padding,
                                  std::size_t output_padding, const char* axis = "H");

template <typename T>
struct ConvParams {
    Tensor4<T> weight;  // (C_out, C_in, kH, kW)
    std::vector<T> bias;  // empty or C_out
    ConvGeometry geom;
};

template <typename T>
struct ConvGrads {
    Tensor4<T> dx;
    Tensor4<T> dw;
    std::vector<T> db;
};

Shape4 conv2d_output_shape(const Shape4& x, const Shape4& weight, const ConvGeometry& g);

template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const Tensor4<T>& weight, std::span<const T> bias,
                  const ConvGeometry& g);

template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const ConvParams<T>& p) {
    return conv2d(x, p.weight, std::span<const T>(p.bias), p.geom);
}

/// Gradients of sum(dy * conv2d(x, w, b)) with respect to x, w and b.
/// `need_dx` may be cleared for a layer that sees the network input.
template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& weight, bool has_bias,
                             const ConvGeometry& g, const Tensor4<T>& dy, bool need_dx = true);

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& x, const ConvParams<T>& p, const Tensor4<T>& dy) {
    return conv2d_backward(x, p.weight, !p.bias.empty(), p.geom, dy);
}

/// Input gradient of a convolution whose input had `input_shape`.
template <typename T>
Tensor4<T> conv2d_input_grad(const Tensor4<T>& dy, const Tensor4<T>& weight, const ConvGeometry& g,
                             const Shape4& input_shape);

/// Adjoint of conv2d: `weight` keeps the convolution layout (C_x, C_y, kH, kW),
/// so x carries weight.n channels and the result carries weight.c channels.
/// Bias, when present, has length weight.c.
template <typename T>
Tensor4<T> transposed_conv2d(const Tensor4<T>& x, const Tensor4<T>& weight, std::span<const T> bias,
                             const ConvGeometry& g, std::array<std::size_t, 2> output_padding);

template <typename T>
ConvGrads<T> transposed_conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& weight, bool has_bias,
                                        const ConvGeometry& g, const Tensor4<T>& dy,
                                        bool need_dx = true);

// ---------------------------------------------------------------------------

template <typename T>
struct MaxPoolResult {
    Tensor4<T> y;
    std::vector<std::uint32_t> argmax;  // flat offset into the pooled input
};

/// 2x2 window, stride 2, floor semantics.
template <typename T>
MaxPoolResult<T> maxpool2d(const Tensor4<T>& x);

template <typename T>
Tensor4<T> maxpool2d_backward(const Shape4& x_shape, const std::vector<std::uint32_t>& argmax,
                              const Tensor4<T>& dy);

// ---------------------------------------------------------------------------

enum class Mode { Train, Infer };

template <typename T>
struct BNParams {
    std::vector<T> gamma;
    std::vector<T> beta;
    std::vector<T> running_mean;
    std::vector<T> running_var;
    T eps = T(1e-5);
    T momentum = T(0.1);

    static BNParams identity(std::size_t channels) {
        return {std::vector<T>(channels, T(1)), std::vector<T>(channels, T(0)),
                std::vector<T>(channels, T(0)), std::vector<T>(channels, T(1))};
    }
};

/// What a train-mode normalization must remember for its backward.
template <typename T>
struct BatchNormCache {
    Tensor4<T> xhat;
    std::vector<T> mean;     // batch mean
    std::vector<T> var;      // biased batch variance
    std::vector<T> inv_std;  // 1 / sqrt(var + eps)
};

template <typename T>
struct BatchNormForward {
    Tensor4<T> y;
    BatchNormCache<T> cache;
};

template <typename T>
struct BatchNormGrads {
    Tensor4<T> dx;
    std::vector<T> dgamma;
    std::vector<T> dbeta;
};

template <typename T>
BatchNormForward<T> batchnorm2d_train(const Tensor4<T>& x, std::span<const T> gamma,
                                      std::span<const T> beta, T eps);

template <typename T>
Tensor4<T> batchnorm2d_infer(const Tensor4<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             std::span<const T> running_mean, std::span<const T> running_var, T eps);

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                       const Tensor4<T>& dy);

/// Exponential update of running statistics. The variance fed in is the
/// biased batch variance; it is rescaled to the unbiased estimate.
template <typename T>
void update_running_stats(std::span<T> running_mean, std::span<T> running_var,
                          std::span<const T> batch_mean, std::span<const T> batch_var,
                          std::size_t count, T momentum);

/// Train mode normalizes with batch statistics and updates p's running stats.
template <typename T>
Tensor4<T> batchnorm2d(const Tensor4<T>& x, BNParams<T>& p, Mode mode);

// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> relu(const Tensor4<T>& x);

/// Gradient through relu given the relu *output* (or input; the sign test is the same).
template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& y, const Tensor4<T>& dy);

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b);

template <typename T>
void add_inplace(Tensor4<T>& acc, const Tensor4<T>& b);

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b);

/// Inverse of concat_channels: first `ca` channels, then the rest.
template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> split_channels(const Tensor4<T>& x, std::size_t ca);

/// Per-channel sum over (N, H, W).
template <typename T>
std::vector<T> channel_sums(const Tensor4<T>& x);

// ---------------------------------------------------------------------------

template <typename T>
struct LossResult {
    T loss = T(0);
    Tensor4<T> dlogits;
    std::size_t scored = 0;  // pixels that were not ignored
};

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor4<T>& logits, const LabelMap& labels, int ignore_index);

/// Channel argmax per pixel; ties resolve to the lowest class index.
template <typename T>
LabelMap argmax_channels(const Tensor4<T>& logits);

}  // namespace esnet
