#include "esnet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

namespace esnet {

std::string to_string(const Shape4& s) {
    return "(" + std::to_string(s.n) + "," + std::to_string(s.c) + "," + std::to_string(s.h) + "," +
           std::to_string(s.w) + ")";
}

std::size_t conv_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                            std::size_t dilation, std::size_t padding, const char* axis) {
    if (kernel == 0 || stride == 0 || dilation == 0) {
        throw PreconditionError(std::string("conv ") + axis + ": kernel, stride and dilation must be >= 1");
    }
    const std::size_t ek = effective_extent(kernel, dilation);
    const std::size_t padded = in + 2 * padding;
    if (ek > padded) {
        throw ShapeError(std::string("conv ") + axis + ": effective kernel extent " + std::to_string(ek) +
                         " exceeds padded input extent " + std::to_string(padded));
    }
    return (padded - ek) / stride + 1;
}

std::size_t transposed_out_extent(std::size_t in, std::size_t kernel, std::size_t stride,
                                  std::size_t dilation, std::size_t padding,
                                  std::size_t output_padding, const char* axis) {
    if (kernel == 0 || stride == 0 || dilation == 0) {
        throw PreconditionError(std::string("transposed conv ") + axis +
                                ": kernel, stride and dilation must be >= 1");
    }
    if (output_padding >= stride) {
        throw PreconditionError(std::string("transposed conv ") + axis + ": output_padding " +
                                std::to_string(output_padding) + " must be smaller than stride " +
                                std::to_string(stride));
    }
    if (in == 0) throw ShapeError(std::string("transposed conv ") + axis + ": empty input");
    const std::size_t full = (in - 1) * stride + effective_extent(kernel, dilation) + output_padding;
    if (full <= 2 * padding) {
        throw ShapeError(std::string("transposed conv ") + axis + ": padding " + std::to_string(padding) +
                         " leaves an empty output");
    }
    return full - 2 * padding;
}

Shape4 conv2d_output_shape(const Shape4& x, const Shape4& w, const ConvGeometry& g) {
    if (x.c != w.c) {
        throw ShapeError("conv2d: input channels C=" + std::to_string(x.c) + " but weight expects C_in=" +
                         std::to_string(w.c));
    }
    if (w.n == 0) throw ShapeError("conv2d: weight has zero output channels");
    const std::size_t ho = conv_out_extent(x.h, w.h, g.stride[0], g.dilation[0], g.padding[0], "H");
    const std::size_t wo = conv_out_extent(x.w, w.w, g.stride[1], g.dilation[1], g.padding[1], "W");
    if (x.n == 0 || ho == 0 || wo == 0) {
        throw ShapeError("conv2d: zero-size output " + to_string({x.n, w.n, ho, wo}));
    }
    return {x.n, w.n, ho, wo};
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct Window {
    std::size_t c, h, w;      // input plane
    std::size_t kh, kw;       // kernel
    std::size_t ho, wo;       // output plane
    ConvGeometry g;

    std::size_t rows() const { return c * kh * kw; }
    std::size_t cols() const { return ho * wo; }
    bool is_pointwise() const {
        return kh == 1 && kw == 1 && g.stride[0] == 1 && g.stride[1] == 1 && g.padding[0] == 0 &&
               g.padding[1] == 0;
    }
};

// Unfold one image (c,h,w) into a (c*kh*kw) x (ho*wo) matrix.
template <typename T>
void im2col(const T* x, const Window& win, T* col) {
    const auto sh = static_cast<std::ptrdiff_t>(win.g.stride[0]);
    const auto sw = static_cast<std::ptrdiff_t>(win.g.stride[1]);
    const auto dh = static_cast<std::ptrdiff_t>(win.g.dilation[0]);
    const auto dw = static_cast<std::ptrdiff_t>(win.g.dilation[1]);
    const auto ph = static_cast<std::ptrdiff_t>(win.g.padding[0]);
    const auto pw = static_cast<std::ptrdiff_t>(win.g.padding[1]);
    const auto h = static_cast<std::ptrdiff_t>(win.h);
    const auto w = static_cast<std::ptrdiff_t>(win.w);
    for (std::size_t c = 0; c < win.c; ++c) {
        const T* plane = x + c * win.h * win.w;
        for (std::size_t ki = 0; ki < win.kh; ++ki) {
            for (std::size_t kj = 0; kj < win.kw; ++kj) {
                T* out = col + ((c * win.kh + ki) * win.kw + kj) * win.cols();
                for (std::size_t oy = 0; oy < win.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * sh - ph +
                                              static_cast<std::ptrdiff_t>(ki) * dh;
                    T* row = out + oy * win.wo;
                    if (iy < 0 || iy >= h) {
                        std::fill(row, row + win.wo, T(0));
                        continue;
                    }
                    const T* src = plane + iy * w;
                    const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(kj) * dw - pw;
                    for (std::size_t ox = 0; ox < win.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * sw + x0;
                        row[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add columns back into an image.
template <typename T>
void col2im(const T* col, const Window& win, T* x) {
    const auto sh = static_cast<std::ptrdiff_t>(win.g.stride[0]);
    const auto sw = static_cast<std::ptrdiff_t>(win.g.stride[1]);
    const auto dh = static_cast<std::ptrdiff_t>(win.g.dilation[0]);
    const auto dw = static_cast<std::ptrdiff_t>(win.g.dilation[1]);
    const auto ph = static_cast<std::ptrdiff_t>(win.g.padding[0]);
    const auto pw = static_cast<std::ptrdiff_t>(win.g.padding[1]);
    const auto h = static_cast<std::ptrdiff_t>(win.h);
    const auto w = static_cast<std::ptrdiff_t>(win.w);
    for (std::size_t c = 0; c < win.c; ++c) {
        T* plane = x + c * win.h * win.w;
        for (std::size_t ki = 0; ki < win.kh; ++ki) {
            for (std::size_t kj = 0; kj < win.kw; ++kj) {
                const T* in = col + ((c * win.kh + ki) * win.kw + kj) * win.cols();
                for (std::size_t oy = 0; oy < win.ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy) * sh - ph +
                                              static_cast<std::ptrdiff_t>(ki) * dh;
                    if (iy < 0 || iy >= h) continue;
                    T* dst = plane + iy * w;
                    const T* row = in + oy * win.wo;
                    const std::ptrdiff_t x0 = static_cast<std::ptrdiff_t>(kj) * dw - pw;
                    for (std::size_t ox = 0; ox < win.wo; ++ox) {
                        const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox) * sw + x0;
                        if (ix >= 0 && ix < w) dst[ix] += row[ox];
                    }
                }
            }
        }
    }
}

Window make_window(const Shape4& x, const Shape4& w, const Shape4& y, const ConvGeometry& g) {
    return {x.c, x.h, x.w, w.h, w.w, y.h, y.w, g};
}

template <typename T>
void check_bias(std::span<const T> bias, std::size_t channels, const char* op) {
    if (!bias.empty() && bias.size() != channels) {
        throw ShapeError(std::string(op) + ": bias length " + std::to_string(bias.size()) +
                         " does not match channel count " + std::to_string(channels));
    }
}

template <typename T>
void add_bias(Tensor4<T>& y, std::span<const T> bias) {
    if (bias.empty()) return;
    const std::size_t p = y.shape().plane();
    for (std::size_t n = 0; n < y.n(); ++n) {
        for (std::size_t c = 0; c < y.c(); ++c) {
            T* out = y.plane(n, c);
            const T b = bias[c];
            for (std::size_t i = 0; i < p; ++i) out[i] += b;
        }
    }
}

// dx for a convolution, given dy of shape y_shape. Shared by the conv
// backward pass and the transposed convolution forward.
template <typename T>
Tensor4<T> input_grad_impl(const Tensor4<T>& dy, const Tensor4<T>& weight, const Window& win,
                           std::size_t batch) {
    Tensor4<T> dx(batch, win.c, win.h, win.w);
    const auto cout = static_cast<Eigen::Index>(weight.n());
    const auto rows = static_cast<Eigen::Index>(win.rows());
    const auto cols = static_cast<Eigen::Index>(win.cols());
    Eigen::Map<const RowMat<T>> wm(weight.data(), cout, rows);
    RowMat<T> dcol(rows, cols);
    for (std::size_t n = 0; n < batch; ++n) {
        Eigen::Map<const RowMat<T>> dym(dy.plane(n, 0), cout, cols);
        if (win.is_pointwise()) {
            Eigen::Map<RowMat<T>> dxm(dx.plane(n, 0), rows, cols);
            dxm.noalias() = wm.transpose() * dym;
        } else {
            dcol.noalias() = wm.transpose() * dym;
            col2im(dcol.data(), win, dx.plane(n, 0));
        }
    }
    return dx;
}

// dw (and nothing else) for a convolution with input x and upstream dy.
template <typename T>
Tensor4<T> weight_grad_impl(const Tensor4<T>& x, const Tensor4<T>& dy, const Shape4& wshape,
                            const Window& win) {
    Tensor4<T> dw(wshape);
    const auto cout = static_cast<Eigen::Index>(wshape.n);
    const auto rows = static_cast<Eigen::Index>(win.rows());
    const auto cols = static_cast<Eigen::Index>(win.cols());
    Eigen::Map<RowMat<T>> dwm(dw.data(), cout, rows);
    RowMat<T> col;
    if (!win.is_pointwise()) col.resize(rows, cols);
    for (std::size_t n = 0; n < x.n(); ++n) {
        Eigen::Map<const RowMat<T>> dym(dy.plane(n, 0), cout, cols);
        if (win.is_pointwise()) {
            Eigen::Map<const RowMat<T>> xm(x.plane(n, 0), rows, cols);
            dwm.noalias() += dym * xm.transpose();
        } else {
            im2col(x.plane(n, 0), win, col.data());
            dwm.noalias() += dym * col.transpose();
        }
    }
    return dw;
}

}  // namespace

template <typename T>
Tensor4<T> conv2d(const Tensor4<T>& x, const Tensor4<T>& weight, std::span<const T> bias,
                  const ConvGeometry& g) {
    const Shape4 ys = conv2d_output_shape(x.shape(), weight.shape(), g);
    check_bias(bias, weight.n(), "conv2d");
    Tensor4<T> y(ys);
    const Window win = make_window(x.shape(), weight.shape(), ys, g);
    const auto cout = static_cast<Eigen::Index>(weight.n());
    const auto rows = static_cast<Eigen::Index>(win.rows());
    const auto cols = static_cast<Eigen::Index>(win.cols());
    Eigen::Map<const RowMat<T>> wm(weight.data(), cout, rows);
    RowMat<T> col;
    if (!win.is_pointwise()) col.resize(rows, cols);
    for (std::size_t n = 0; n < x.n(); ++n) {
        Eigen::Map<RowMat<T>> ym(y.plane(n, 0), cout, cols);
        if (win.is_pointwise()) {
            Eigen::Map<const RowMat<T>> xm(x.plane(n, 0), rows, cols);
            ym.noalias() = wm * xm;
        } else {
            im2col(x.plane(n, 0), win, col.data());
            ym.noalias() = wm * col;
        }
    }
    add_bias(y, bias);
    return y;
}

template <typename T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& weight, bool has_bias,
                             const ConvGeometry& g, const Tensor4<T>& dy, bool need_dx) {
    const Shape4 ys = conv2d_output_shape(x.shape(), weight.shape(), g);
    if (dy.shape() != ys) {
        throw ShapeError("conv2d_backward: dy dims " + to_string(dy.shape()) +
                         " differ from forward output dims " + to_string(ys));
    }
    const Window win = make_window(x.shape(), weight.shape(), ys, g);
    ConvGrads<T> out;
    if (need_dx) out.dx = input_grad_impl(dy, weight, win, x.n());
    out.dw = weight_grad_impl(x, dy, weight.shape(), win);
    if (has_bias) out.db = channel_sums(dy);
    return out;
}

template <typename T>
Tensor4<T> conv2d_input_grad(const Tensor4<T>& dy, const Tensor4<T>& weight, const ConvGeometry& g,
                             const Shape4& input_shape) {
    const Shape4 ys = conv2d_output_shape(input_shape, weight.shape(), g);
    if (dy.shape() != ys) {
        throw ShapeError("conv2d_input_grad: dy dims " + to_string(dy.shape()) +
                         " differ from forward output dims " + to_string(ys));
    }
    return input_grad_impl(dy, weight, make_window(input_shape, weight.shape(), ys, g), input_shape.n);
}

namespace {

Shape4 transposed_output_shape(const Shape4& x, const Shape4& w, const ConvGeometry& g,
                               std::array<std::size_t, 2> op) {
    if (x.c != w.n) {
        throw ShapeError("transposed_conv2d: input channels C=" + std::to_string(x.c) +
                         " but weight expects " + std::to_string(w.n));
    }
    const std::size_t ho =
        transposed_out_extent(x.h, w.h, g.stride[0], g.dilation[0], g.padding[0], op[0], "H");
    const std::size_t wo =
        transposed_out_extent(x.w, w.w, g.stride[1], g.dilation[1], g.padding[1], op[1], "W");
    return {x.n, w.c, ho, wo};
}

}  // namespace

template <typename T>
Tensor4<T> transposed_conv2d(const Tensor4<T>& x, const Tensor4<T>& weight, std::span<const T> bias,
                             const ConvGeometry& g, std::array<std::size_t, 2> output_padding) {
    const Shape4 ys = transposed_output_shape(x.shape(), weight.shape(), g, output_padding);
    check_bias(bias, weight.c(), "transposed_conv2d");
    Tensor4<T> y = conv2d_input_grad(x, weight, g, ys);
    add_bias(y, bias);
    return y;
}

template <typename T>
ConvGrads<T> transposed_conv2d_backward(const Tensor4<T>& x, const Tensor4<T>& weight, bool has_bias,
                                        const ConvGeometry& g, const Tensor4<T>& dy, bool need_dx) {
    // y = J^T x where J is the conv input-Jacobian; so dx = conv(dy) and dw is
    // the conv weight gradient with the roles of input and upstream swapped.
    const Shape4 expect = conv2d_output_shape(dy.shape(), weight.shape(), g);
    if (expect != x.shape()) {
        throw ShapeError("transposed_conv2d_backward: dy dims " + to_string(dy.shape()) +
                         " inconsistent with input dims " + to_string(x.shape()));
    }
    ConvGrads<T> out;
    if (need_dx) out.dx = conv2d(dy, weight, std::span<const T>{}, g);
    out.dw = weight_grad_impl(dy, x, weight.shape(), make_window(dy.shape(), weight.shape(), x.shape(), g));
    if (has_bias) out.db = channel_sums(dy);
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
MaxPoolResult<T> maxpool2d(const Tensor4<T>& x) {
    if (x.h() < 2 || x.w() < 2) {
        throw ShapeError("maxpool2d: input H and W must be >= 2, got " + to_string(x.shape()));
    }
    const Shape4 ys{x.n(), x.c(), x.h() / 2, x.w() / 2};
    MaxPoolResult<T> r{Tensor4<T>(ys), std::vector<std::uint32_t>(ys.numel())};
    std::size_t o = 0;
    for (std::size_t n = 0; n < x.n(); ++n) {
        for (std::size_t c = 0; c < x.c(); ++c) {
            for (std::size_t oy = 0; oy < ys.h; ++oy) {
                for (std::size_t ox = 0; ox < ys.w; ++ox, ++o) {
                    std::size_t best = x.offset(n, c, 2 * oy, 2 * ox);
                    for (std::size_t dy = 0; dy < 2; ++dy) {
                        for (std::size_t dx = 0; dx < 2; ++dx) {
                            const std::size_t at = x.offset(n, c, 2 * oy + dy, 2 * ox + dx);
                            if (x[at] > x[best]) best = at;  // strict: first max wins
                        }
                    }
                    r.y[o] = x[best];
                    r.argmax[o] = static_cast<std::uint32_t>(best);
                }
            }
        }
    }
    return r;
}

template <typename T>
Tensor4<T> maxpool2d_backward(const Shape4& x_shape, const std::vector<std::uint32_t>& argmax,
                              const Tensor4<T>& dy) {
    if (argmax.size() != dy.size()) {
        throw ShapeError("maxpool2d_backward: dy has " + std::to_string(dy.size()) +
                         " elements but the forward produced " + std::to_string(argmax.size()));
    }
    Tensor4<T> dx(x_shape);
    for (std::size_t i = 0; i < argmax.size(); ++i) dx[argmax[i]] += dy[i];
    return dx;
}

// ---------------------------------------------------------------------------

namespace {

template <typename T>
void check_bn_channels(const Tensor4<T>& x, std::size_t gamma, std::size_t beta, const char* op) {
    if (gamma != x.c() || beta != x.c()) {
        throw ShapeError(std::string(op) + ": input has C=" + std::to_string(x.c()) +
                         " channels but gamma/beta have " + std::to_string(gamma) + "/" +
                         std::to_string(beta));
    }
}

}  // namespace

template <typename T>
BatchNormForward<T> batchnorm2d_train(const Tensor4<T>& x, std::span<const T> gamma,
                                      std::span<const T> beta, T eps) {
    check_bn_channels(x, gamma.size(), beta.size(), "batchnorm2d");
    const std::size_t C = x.c();
    const std::size_t P = x.shape().plane();
    const std::size_t count = x.n() * P;
    if (count == 0) throw ShapeError("batchnorm2d: empty input " + to_string(x.shape()));
    BatchNormForward<T> f{Tensor4<T>(x.shape()),
                          {Tensor4<T>(x.shape()), std::vector<T>(C), std::vector<T>(C), std::vector<T>(C)}};
    for (std::size_t c = 0; c < C; ++c) {
        T sum = 0;
        for (std::size_t n = 0; n < x.n(); ++n) {
            const T* p = x.plane(n, c);
            for (std::size_t i = 0; i < P; ++i) sum += p[i];
        }
        const T mean = sum / static_cast<T>(count);
        T sq = 0;
        for (std::size_t n = 0; n < x.n(); ++n) {
            const T* p = x.plane(n, c);
            for (std::size_t i = 0; i < P; ++i) {
                const T d = p[i] - mean;
                sq += d * d;
            }
        }
        const T var = sq / static_cast<T>(count);
        const T inv = T(1) / std::sqrt(var + eps);
        f.cache.mean[c] = mean;
        f.cache.var[c] = var;
        f.cache.inv_std[c] = inv;
        for (std::size_t n = 0; n < x.n(); ++n) {
            const T* p = x.plane(n, c);
            T* xh = f.cache.xhat.plane(n, c);
            T* y = f.y.plane(n, c);
            for (std::size_t i = 0; i < P; ++i) {
                xh[i] = (p[i] - mean) * inv;
                y[i] = gamma[c] * xh[i] + beta[c];
            }
        }
    }
    return f;
}

template <typename T>
Tensor4<T> batchnorm2d_infer(const Tensor4<T>& x, std::span<const T> gamma, std::span<const T> beta,
                             std::span<const T> running_mean, std::span<const T> running_var, T eps) {
    check_bn_channels(x, gamma.size(), beta.size(), "batchnorm2d");
    if (running_mean.size() != x.c() || running_var.size() != x.c()) {
        throw ShapeError("batchnorm2d: running statistics length does not match C=" + std::to_string(x.c()));
    }
    Tensor4<T> y(x.shape());
    const std::size_t P = x.shape().plane();
    for (std::size_t c = 0; c < x.c(); ++c) {
        const T scale = gamma[c] / std::sqrt(running_var[c] + eps);
        const T shift = beta[c] - running_mean[c] * scale;
        for (std::size_t n = 0; n < x.n(); ++n) {
            const T* p = x.plane(n, c);
            T* o = y.plane(n, c);
            for (std::size_t i = 0; i < P; ++i) o[i] = p[i] * scale + shift;
        }
    }
    return y;
}

template <typename T>
BatchNormGrads<T> batchnorm2d_backward(const BatchNormCache<T>& cache, std::span<const T> gamma,
                                       const Tensor4<T>& dy) {
    const Tensor4<T>& xhat = cache.xhat;
    if (dy.shape() != xhat.shape()) {
        throw ShapeError("batchnorm2d_backward: dy dims " + to_string(dy.shape()) +
                         " differ from input dims " + to_string(xhat.shape()));
    }
    if (gamma.size() != xhat.c()) throw ShapeError("batchnorm2d_backward: gamma length mismatch");
    const std::size_t C = xhat.c();
    const std::size_t P = xhat.shape().plane();
    const T m = static_cast<T>(xhat.n() * P);
    BatchNormGrads<T> g{Tensor4<T>(xhat.shape()), std::vector<T>(C), std::vector<T>(C)};
    for (std::size_t c = 0; c < C; ++c) {
        T sum_dy = 0;
        T sum_dy_xhat = 0;
        for (std::size_t n = 0; n < xhat.n(); ++n) {
            const T* d = dy.plane(n, c);
            const T* xh = xhat.plane(n, c);
            for (std::size_t i = 0; i < P; ++i) {
                sum_dy += d[i];
                sum_dy_xhat += d[i] * xh[i];
            }
        }
        g.dbeta[c] = sum_dy;
        g.dgamma[c] = sum_dy_xhat;
        const T k = gamma[c] * cache.inv_std[c] / m;
        for (std::size_t n = 0; n < xhat.n(); ++n) {
            const T* d = dy.plane(n, c);
            const T* xh = xhat.plane(n, c);
            T* dx = g.dx.plane(n, c);
            for (std::size_t i = 0; i < P; ++i) dx[i] = k * (m * d[i] - sum_dy - xh[i] * sum_dy_xhat);
        }
    }
    return g;
}

template <typename T>
void update_running_stats(std::span<T> running_mean, std::span<T> running_var,
                          std::span<const T> batch_mean, std::span<const T> batch_var,
                          std::size_t count, T momentum) {
    if (running_mean.size() != batch_mean.size() || running_var.size() != batch_var.size()) {
        throw ShapeError("update_running_stats: channel count mismatch");
    }
    const T unbias = count > 1 ? static_cast<T>(count) / static_cast<T>(count - 1) : T(1);
    for (std::size_t c = 0; c < running_mean.size(); ++c) {
        running_mean[c] = (T(1) - momentum) * running_mean[c] + momentum * batch_mean[c];
        running_var[c] = (T(1) - momentum) * running_var[c] + momentum * batch_var[c] * unbias;
    }
}

template <typename T>
Tensor4<T> batchnorm2d(const Tensor4<T>& x, BNParams<T>& p, Mode mode) {
    if (mode == Mode::Infer) {
        return batchnorm2d_infer<T>(x, p.gamma, p.beta, p.running_mean, p.running_var, p.eps);
    }
    auto f = batchnorm2d_train<T>(x, p.gamma, p.beta, p.eps);
    update_running_stats<T>(p.running_mean, p.running_var, f.cache.mean, f.cache.var,
                            x.n() * x.shape().plane(), p.momentum);
    return std::move(f.y);
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor4<T> relu(const Tensor4<T>& x) {
    Tensor4<T> y(x.shape());
    // NaN passes through so divergence stays visible downstream.
    for (std::size_t i = 0; i < x.size(); ++i) y[i] = x[i] <= T(0) ? T(0) : x[i];
    return y;
}

template <typename T>
Tensor4<T> relu_backward(const Tensor4<T>& y, const Tensor4<T>& dy) {
    if (y.shape() != dy.shape()) {
        throw ShapeError("relu_backward: dims " + to_string(y.shape()) + " vs " + to_string(dy.shape()));
    }
    Tensor4<T> dx(y.shape());
    for (std::size_t i = 0; i < y.size(); ++i) dx[i] = y[i] > T(0) ? dy[i] : T(0);
    return dx;
}

template <typename T>
Tensor4<T> add(const Tensor4<T>& a, const Tensor4<T>& b) {
    Tensor4<T> out = a;
    add_inplace(out, b);
    return out;
}

template <typename T>
void add_inplace(Tensor4<T>& acc, const Tensor4<T>& b) {
    if (acc.shape() != b.shape()) {
        throw ShapeError("add: dims " + to_string(acc.shape()) + " vs " + to_string(b.shape()));
    }
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += b[i];
}

template <typename T>
Tensor4<T> concat_channels(const Tensor4<T>& a, const Tensor4<T>& b) {
    if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w()) {
        throw ShapeError("concat_channels: N,H,W must agree, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    }
    Tensor4<T> out(a.n(), a.c() + b.c(), a.h(), a.w());
    const std::size_t pa = a.c() * a.shape().plane();
    const std::size_t pb = b.c() * b.shape().plane();
    for (std::size_t n = 0; n < a.n(); ++n) {
        std::copy_n(a.plane(n, 0), pa, out.plane(n, 0));
        std::copy_n(b.plane(n, 0), pb, out.plane(n, 0) + pa);
    }
    return out;
}

template <typename T>
std::pair<Tensor4<T>, Tensor4<T>> split_channels(const Tensor4<T>& x, std::size_t ca) {
    if (ca > x.c()) throw ShapeError("split_channels: split point beyond channel count");
    Tensor4<T> a(x.n(), ca, x.h(), x.w());
    Tensor4<T> b(x.n(), x.c() - ca, x.h(), x.w());
    const std::size_t pa = a.c() * x.shape().plane();
    const std::size_t pb = b.c() * x.shape().plane();
    for (std::size_t n = 0; n < x.n(); ++n) {
        if (pa) std::copy_n(x.plane(n, 0), pa, a.plane(n, 0));
        if (pb) std::copy_n(x.plane(n, 0) + pa, pb, b.plane(n, 0));
    }
    return {std::move(a), std::move(b)};
}

template <typename T>
std::vector<T> channel_sums(const Tensor4<T>& x) {
    std::vector<T> s(x.c(), T(0));
    const std::size_t P = x.shape().plane();
    for (std::size_t n = 0; n < x.n(); ++n) {
        for (std::size_t c = 0; c < x.c(); ++c) {
            const T* p = x.plane(n, c);
            T acc = 0;
            for (std::size_t i = 0; i < P; ++i) acc += p[i];
            s[c] += acc;
        }
    }
    return s;
}

// ---------------------------------------------------------------------------

template <typename T>
LossResult<T> softmax_cross_entropy(const Tensor4<T>& logits, const LabelMap& labels, int ignore_index) {
    if (labels.n != logits.n() || labels.h != logits.h() || labels.w != logits.w()) {
        throw ShapeError("softmax_cross_entropy: label map " + std::to_string(labels.n) + "x" +
                         std::to_string(labels.h) + "x" + std::to_string(labels.w) +
                         " does not match logits " + to_string(logits.shape()));
    }
    const std::size_t C = logits.c();
    const int classes = static_cast<int>(C);
    for (std::size_t i = 0; i < labels.data.size(); ++i) {
        const int l = labels.data[i];
        if (l == ignore_index) continue;
        if (l < 0 || l >= classes) {
            throw PreconditionError("softmax_cross_entropy: label " + std::to_string(l) + " at pixel " +
                                    std::to_string(i) + " outside [0, " + std::to_string(C) + ")");
        }
    }
    LossResult<T> r{T(0), Tensor4<T>(logits.shape()), 0};
    for (int l : labels.data) r.scored += (l != ignore_index);
    if (r.scored == 0) return r;

    const T inv_count = T(1) / static_cast<T>(r.scored);
    std::vector<T> prob(C);
    T total = 0;
    for (std::size_t n = 0; n < logits.n(); ++n) {
        for (std::size_t y = 0; y < logits.h(); ++y) {
            for (std::size_t x = 0; x < logits.w(); ++x) {
                const int l = labels(n, y, x);
                if (l == ignore_index) continue;
                T mx = -std::numeric_limits<T>::infinity();
                for (std::size_t c = 0; c < C; ++c) mx = std::max(mx, logits(n, c, y, x));
                T z = 0;
                for (std::size_t c = 0; c < C; ++c) {
                    prob[c] = std::exp(logits(n, c, y, x) - mx);
                    z += prob[c];
                }
                total += std::log(z) + mx - logits(n, static_cast<std::size_t>(l), y, x);
                for (std::size_t c = 0; c < C; ++c) {
                    const T p = prob[c] / z;
                    r.dlogits(n, c, y, x) = (p - (static_cast<int>(c) == l ? T(1) : T(0))) * inv_count;
                }
            }
        }
    }
    r.loss = total * inv_count;
    return r;
}

template <typename T>
LabelMap argmax_channels(const Tensor4<T>& logits) {
    LabelMap out(logits.n(), logits.h(), logits.w());
    for (std::size_t n = 0; n < logits.n(); ++n) {
        for (std::size_t y = 0; y < logits.h(); ++y) {
            for (std::size_t x = 0; x < logits.w(); ++x) {
                std::size_t best = 0;
                for (std::size_t c = 1; c < logits.c(); ++c) {
                    if (logits(n, c, y, x) > logits(n, best, y, x)) best = c;
                }
                out(n, y, x) = static_cast<int>(best);
            }
        }
    }
    return out;
}

#define ESNET_INSTANTIATE_OPS(T)                                                                          \
    template Tensor4<T> conv2d<T>(const Tensor4<T>&, const Tensor4<T>&, std::span<const T>,               \
                                  const ConvGeometry&);                                                   \
    template ConvGrads<T> conv2d_backward<T>(const Tensor4<T>&, const Tensor4<T>&, bool,                  \
                                             const ConvGeometry&, const Tensor4<T>&, bool);               \
    template Tensor4<T> conv2d_input_grad<T>(const Tensor4<T>&, const Tensor4<T>&, const ConvGeometry&,   \
                                             const Shape4&);                                              \
    template Tensor4<T> transposed_conv2d<T>(const Tensor4<T>&, const Tensor4<T>&, std::span<const T>,    \
                                             const ConvGeometry&, std::array<std::size_t, 2>);            \
    template ConvGrads<T> transposed_conv2d_backward<T>(const Tensor4<T>&, const Tensor4<T>&, bool,       \
                                                        const ConvGeometry&, const Tensor4<T>&, bool);    \
    template MaxPoolResult<T> maxpool2d<T>(const Tensor4<T>&);                                            \
    template Tensor4<T> maxpool2d_backward<T>(const Shape4&, const std::vector<std::uint32_t>&,           \
                                              const Tensor4<T>&);                                         \
    template BatchNormForward<T> batchnorm2d_train<T>(const Tensor4<T>&, std::span<const T>,              \
                                                      std::span<const T>, T);                             \
    template Tensor4<T> batchnorm2d_infer<T>(const Tensor4<T>&, std::span<const T>, std::span<const T>,   \
                                             std::span<const T>, std::span<const T>, T);                  \
    template BatchNormGrads<T> batchnorm2d_backward<T>(const BatchNormCache<T>&, std::span<const T>,      \
                                                       const Tensor4<T>&);                                \
    template void update_running_stats<T>(std::span<T>, std::span<T>, std::span<const T>,                 \
                                          std::span<const T>, std::size_t, T);                            \
    template Tensor4<T> batchnorm2d<T>(const Tensor4<T>&, BNParams<T>&, Mode);                            \
    template Tensor4<T> relu<T>(const Tensor4<T>&);                                                       \
    template Tensor4<T> relu_backward<T>(const Tensor4<T>&, const Tensor4<T>&);                           \
    template Tensor4<T> add<T>(const Tensor4<T>&, const Tensor4<T>&);                                     \
    template void add_inplace<T>(Tensor4<T>&, const Tensor4<T>&);                                         \
    template Tensor4<T> concat_channels<T>(const Tensor4<T>&, const Tensor4<T>&);                         \
    template std::pair<Tensor4<T>, Tensor4<T>> split_channels<T>(const Tensor4<T>&, std::size_t);         \
    template std::vector<T> channel_sums<T>(const Tensor4<T>&);                                           \
    template LossResult<T> softmax_cross_entropy<T>(const Tensor4<T>&, const LabelMap&, int);             \
    template LabelMap argmax_channels<T>(const Tensor4<T>&);

ESNET_INSTANTIATE_OPS(float)
ESNET_INSTANTIATE_OPS(double)
ESNET_INSTANTIATE_OPS(long double)

}  // namespace esnet
