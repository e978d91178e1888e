#include "esnet/gradcheck_suite.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "esnet/network.hpp"

namespace esnet {

namespace {

Tensor4d random_tensor(Shape4 s, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor4d t(s);
    for (double& v : t.values()) v = rng.uniform(lo, hi);
    return t;
}

std::vector<double> random_vector(std::size_t n, Rng& rng, double lo, double hi) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.uniform(lo, hi);
    return v;
}

template <typename A, typename B>
double dot(const Tensor4<A>& a, const Tensor4<B>& b) {
    long double s = 0.0L;
    for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<long double>(a[i]) * static_cast<long double>(b[i]);
    return static_cast<double>(s);
}

// Losses of whole blocks and networks are re-evaluated in extended precision
// and returned relative to the unperturbed loss, so the double handed to
// grad_check carries the difference at full precision. Without this, exact-zero
// gradients (a bias cancelled by the following normalization) sit on a roundoff
// floor near 1e-10. The analytic gradient under test is still the double backward.
using Wide = long double;


// Conv weights from init, plus non-trivial biases and normalization affine terms.
void randomize(ParamStore<double>& params, Rng& rng) {
    params.init(rng.next());
    const ParamLayout& layout = params.layout();
    for (std::size_t i = 0; i < layout.size(); ++i) {
        switch (layout[i].role) {
            case ParamRole::ConvBias:
            case ParamRole::BnBeta:
                for (double& v : params[i].values()) v = rng.uniform(-0.2, 0.2);
                break;
            case ParamRole::BnGamma:
                for (double& v : params[i].values()) v = rng.uniform(0.5, 1.5);
                break;
            default: break;
        }
    }
}

void add_param_targets(std::vector<GradTarget>& targets, ParamStore<double>& params, const Gradients<double>& grads) {
    const ParamLayout& layout = params.layout();
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (!layout[i].learnable()) continue;
        targets.push_back({layout[i].name, params[i].values(), grads[i].values()});
    }
}

struct ConvCase {
    std::string name;
    Shape4 x, w;
    ConvGeometry g;
    bool bias;
};

GradCheckResult check_conv(const ConvCase& c, Rng& rng, const GradCheckOptions& opts) {
    Tensor4d x = random_tensor(c.x, rng);
    Tensor4d w = random_tensor(c.w, rng, -0.5, 0.5);
    std::vector<double> b = c.bias ? random_vector(c.w.n, rng, -0.5, 0.5) : std::vector<double>{};
    const Tensor4d r = random_tensor(conv2d_output_shape(c.x, c.w, c.g), rng);
    const auto grads = conv2d_backward(x, w, c.bias, c.g, r);
    auto loss = [&] { return dot(r, conv2d(x, w, std::span<const double>(b), c.g)); };
    std::vector<GradTarget> targets{{"x", x.values(), grads.dx.values()}, {"weight", w.values(), grads.dw.values()}};
    if (c.bias) targets.push_back({"bias", b, grads.db});
    return grad_check(loss, targets, opts);
}

GradCheckResult check_transposed(Shape4 xs, Shape4 ws, Rng& rng, const GradCheckOptions& opts) {
    const ConvGeometry g{{2, 2}, {1, 1}, {1, 1}};
    const std::array<std::size_t, 2> op{1, 1};
    Tensor4d x = random_tensor(xs, rng);
    Tensor4d w = random_tensor(ws, rng, -0.5, 0.5);
    std::vector<double> b = random_vector(ws.c, rng, -0.5, 0.5);
    const Tensor4d y0 = transposed_conv2d(x, w, std::span<const double>(b), g, op);
    const Tensor4d r = random_tensor(y0.shape(), rng);
    const auto grads = transposed_conv2d_backward(x, w, true, g, r);
    auto loss = [&] { return dot(r, transposed_conv2d(x, w, std::span<const double>(b), g, op)); };
    std::vector<GradTarget> targets{
        {"x", x.values(), grads.dx.values()}, {"weight", w.values(), grads.dw.values()}, {"bias", b, grads.db}};
    return grad_check(loss, targets, opts);
}

GradCheckResult check_batchnorm(Shape4 xs, Rng& rng, const GradCheckOptions& opts) {
    Tensor4d x = random_tensor(xs, rng, -2.0, 2.0);
    std::vector<double> gamma = random_vector(xs.c, rng, 0.5, 1.5);
    std::vector<double> beta = random_vector(xs.c, rng, -0.5, 0.5);
    const Tensor4d r = random_tensor(xs, rng);
    const auto fwd = batchnorm2d_train(x, std::span<const double>(gamma), std::span<const double>(beta), kBnEps);
    const auto grads = batchnorm2d_backward(fwd.cache, std::span<const double>(gamma), r);
    auto loss = [&] {
        return dot(r, batchnorm2d_train(x, std::span<const double>(gamma), std::span<const double>(beta), kBnEps).y);
    };
    std::vector<GradTarget> targets{
        {"x", x.values(), grads.dx.values()}, {"gamma", gamma, grads.dgamma}, {"beta", beta, grads.dbeta}};
    return grad_check(loss, targets, opts);
}

LabelMap random_labels(std::size_t n, std::size_t h, std::size_t w, std::size_t classes, Rng& rng, bool with_ignore) {
    LabelMap m(n, h, w);
    for (int& v : m.data) v = static_cast<int>(rng.below(classes));
    if (with_ignore) m.data[m.data.size() / 2] = 255;
    return m;
}

GradCheckResult check_softmax(Shape4 s, Rng& rng, const GradCheckOptions& opts) {
    Tensor4d logits = random_tensor(s, rng, -3.0, 3.0);
    const LabelMap labels = random_labels(s.n, s.h, s.w, s.c, rng, true);
    const auto res = softmax_cross_entropy(logits, labels, 255);
    auto loss = [&] { return softmax_cross_entropy(logits, labels, 255).loss; };
    std::vector<GradTarget> targets{{"logits", logits.values(), res.dlogits.values()}};
    return grad_check(loss, targets, opts);
}

GradCheckResult check_block(const BlockSpec& spec, Shape4 xs, Rng& rng, const GradCheckOptions& opts) {
    StandaloneBlock<double> block(spec);
    randomize(block.params, rng);
    Tensor4d x = random_tensor(xs, rng);
    BlockCache<double> cache;
    const Tensor4d y0 = block_forward(block.plan, block.params, x, Mode::Train, &cache);
    const Tensor4d r = random_tensor(y0.shape(), rng);
    Gradients<double> grads(block.params.layout());
    const Tensor4d dx = block_backward(block.plan, block.params, cache, r, grads);
    std::uint64_t pattern = 0;
    auto wide_out = [&] {
        BlockCache<Wide> c;
        Tensor4<Wide> y = block_forward(block.plan, block.params.cast<Wide>(), x.cast<Wide>(), Mode::Train, &c);
        pattern = 0xcbf29ce484222325ull;
        hash_activation_pattern(block.plan, c, pattern);
        return y;
    };
    const Tensor4<Wide> base = wide_out();
    // sum(r * (y - y0)), differenced per element.
    auto loss = [&] {
        const Tensor4<Wide> y = wide_out();
        Wide s = 0.0L;
        for (std::size_t i = 0; i < y.size(); ++i) s += static_cast<Wide>(r[i]) * (y[i] - base[i]);
        return static_cast<double>(s);
    };
    std::vector<GradTarget> targets{{"x", x.values(), dx.values()}};
    add_param_targets(targets, block.params, grads);
    return grad_check(loss, [&] { return pattern; }, targets, opts);
}

std::vector<Wide> pixel_cross_entropy(const Tensor4<Wide>& logits, const LabelMap& labels) {
    const Shape4 s = logits.shape();
    std::vector<Wide> out;
    out.reserve(s.n * s.h * s.w);
    for (std::size_t n = 0; n < s.n; ++n) {
        for (std::size_t y = 0; y < s.h; ++y) {
            for (std::size_t x = 0; x < s.w; ++x) {
                Wide m = logits(n, 0, y, x);
                for (std::size_t c = 1; c < s.c; ++c) m = std::max(m, logits(n, c, y, x));
                Wide z = 0.0L;
                for (std::size_t c = 0; c < s.c; ++c) z += std::exp(logits(n, c, y, x) - m);
                out.push_back(m + std::log(z) - logits(n, static_cast<std::size_t>(labels(n, y, x)), y, x));
            }
        }
    }
    return out;
}

GradCheckResult check_network(std::vector<std::size_t> widths, InputDims in, std::size_t batch, Rng& rng,
                              const GradCheckOptions& opts) {
    const std::size_t classes = 4;
    const NetworkPlan plan = compile(build_esnet_scaled(classes, widths, in));
    ParamStore<double> params(plan.layout);
    randomize(params, rng);
    const Tensor4d x = random_tensor({batch, in[0], in[1], in[2]}, rng);
    const LabelMap labels = random_labels(batch, in[1], in[2], classes, rng, false);
    Tape<double> tape;
    const Tensor4d logits = forward(plan, params, x, Mode::Train, &tape);
    const auto res = softmax_cross_entropy(logits, labels, 255);
    const Gradients<double> grads = backward(plan, params, tape, res.dlogits);
    const Tensor4<Wide> xw = x.cast<Wide>();
    std::uint64_t pattern = 0;
    auto pixel_losses = [&] {
        Tape<Wide> t;
        const Tensor4<Wide> out = forward(plan, params.cast<Wide>(), xw, Mode::Train, &t);
        pattern = activation_pattern(plan, t);
        return pixel_cross_entropy(out, labels);
    };
    const std::vector<Wide> base = pixel_losses();
    // Mean cross-entropy minus its unperturbed value, differenced per pixel.
    auto loss = [&] {
        const std::vector<Wide> now = pixel_losses();
        Wide s = 0.0L;
        for (std::size_t i = 0; i < now.size(); ++i) s += now[i] - base[i];
        return static_cast<double>(s / static_cast<Wide>(now.size()));
    };
    std::vector<GradTarget> targets;
    add_param_targets(targets, params, grads);
    return grad_check(loss, [&] { return pattern; }, targets, opts);
}

}  // namespace

SuiteScale parse_suite_scale(const std::string& s) {
    if (s == "tiny") return SuiteScale::Tiny;
    if (s == "small") return SuiteScale::Small;
    throw PreconditionError("unknown gradcheck scale '" + s + "' (expected tiny or small)");
}

std::vector<GradCase> run_gradcheck_suite(SuiteScale scale, const GradCheckOptions& opts) {
    const bool tiny = scale == SuiteScale::Tiny;
    const std::size_t n = tiny ? 1 : 2;
    const std::size_t s = tiny ? 8 : 12;
    Rng rng(opts.seed);
    std::vector<GradCase> out;
    auto run = [&](const std::string& name, auto&& fn) {
        const auto t0 = std::chrono::steady_clock::now();
        GradCase c{name, fn(), 0.0};
        c.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        out.push_back(std::move(c));
    };
    auto same = [](std::size_t kh, std::size_t kw, std::size_t dh, std::size_t dw) {
        return ConvGeometry{{1, 1}, {dh, dw}, {same_padding(kh, dh), same_padding(kw, dw)}};
    };

    const std::vector<ConvCase> convs{
        {"conv2d 3x3", {n, 3, s, s - 2}, {4, 3, 3, 3}, same(3, 3, 1, 1), true},
        {"conv2d 3x3 dilation 2", {n, 2, s, s}, {3, 2, 3, 3}, same(3, 3, 2, 2), true},
        {"conv2d 3x3 dilation 5", {n, 2, s, s}, {3, 2, 3, 3}, same(3, 3, 5, 5), false},
        {"conv2d 3x3 dilation 9", {n, 2, s + 8, s + 8}, {2, 2, 3, 3}, same(3, 3, 9, 9), false},
        {"conv2d 5x1", {n, 3, s, s}, {3, 3, 5, 1}, same(5, 1, 2, 1), true},
        {"conv2d 1x5", {n, 3, s, s}, {3, 3, 1, 5}, same(1, 5, 1, 2), false},
        {"conv2d 3x3 stride 2", {n, 3, s, s}, {4, 3, 3, 3}, {{2, 2}, {1, 1}, {1, 1}}, false},
    };
    for (const ConvCase& c : convs) run(c.name, [&] { return check_conv(c, rng, opts); });
    run("transposed conv 3x3 stride 2", [&] { return check_transposed({n, 4, s / 2, s / 2}, {4, 3, 3, 3}, rng, opts); });
    run("batchnorm (train)", [&] { return check_batchnorm({n + 1, 3, s / 2, s / 2}, rng, opts); });
    run("softmax cross-entropy", [&] { return check_softmax({n, 5, s / 2, s / 2}, rng, opts); });
    run("FCU K=3", [&] { return check_block(BlockSpec::fcu(4, 3), {n, 4, s, s}, rng, opts); });
    run("FCU K=5", [&] { return check_block(BlockSpec::fcu(4, 5), {n, 4, s, s}, rng, opts); });
    run("PFCU rates 2,5,9", [&] { return check_block(BlockSpec::pfcu(4, {2, 5, 9}), {n, 4, s, s}, rng, opts); });
    if (tiny) {
        run("ESNet widths 4/6/8 on 3x16x16", [&] { return check_network({4, 6, 8}, {3, 16, 16}, 2, rng, opts); });
    } else {
        run("ESNet widths 4/8/16 on 3x32x16", [&] { return check_network({4, 8, 16}, {3, 32, 16}, 2, rng, opts); });
    }
    return out;
}

std::string format_grad_case(const GradCase& c) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-34s max rel err %.3e over %7zu coords  %6.2fs  %s", c.name.c_str(),
                  c.result.max_rel_error, c.result.checked, c.seconds, c.passed() ? "ok" : "FAILED");
    std::string line = buf;
    if (c.result.kink_adjusted) line += " (" + std::to_string(c.result.kink_adjusted) + " near a kink)";
    if (!c.result.finite) {
        line += " (" + c.result.failure + ")";
    } else if (!c.passed()) {
        std::snprintf(buf, sizeof buf, " (worst %s[%zu]: analytic %.6e, numeric %.6e)", c.result.worst_target.c_str(),
                      c.result.worst_index, c.result.worst_analytic, c.result.worst_numeric);
        line += buf;
    }
    return line;
}

}  // namespace esnet
