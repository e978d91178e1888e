#include "esnet/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace esnet {

const char* optimizer_name(OptimizerKind k) { return k == OptimizerKind::Sgd ? "sgd" : "adam"; }

OptimizerKind parse_optimizer(const std::string& name) {
    if (name == "sgd") return OptimizerKind::Sgd;
    if (name == "adam") return OptimizerKind::Adam;
    throw PreconditionError("unknown optimizer '" + name + "' (expected sgd or adam)");
}

template <typename T>
OptimizerState<T>::OptimizerState(const ParamLayout& layout, OptimizerConfig cfg) : config(cfg) {
    if (!(cfg.base_lr > 0) || !(cfg.power > 0) || cfg.momentum < 0 || cfg.weight_decay < 0 || cfg.max_iter == 0) {
        throw PreconditionError("optimizer hyperparameters must be positive (max_iter >= 1)");
    }
    if (cfg.kind == OptimizerKind::Adam &&
        (cfg.momentum >= 1 || !(cfg.beta2 > 0) || cfg.beta2 >= 1 || !(cfg.adam_eps > 0))) {
        throw PreconditionError("adam needs 0 <= beta1 < 1, 0 < beta2 < 1 and eps > 0");
    }
    velocity.reserve(layout.size());
    for (const ParamInfo& p : layout.entries()) velocity.emplace_back(p.learnable() ? p.shape : Shape4{});
    if (cfg.kind == OptimizerKind::Adam) {
        for (const ParamInfo& p : layout.entries()) second_moment.emplace_back(p.learnable() ? p.shape : Shape4{});
    }
}

double poly_lr(std::size_t iter, const OptimizerConfig& cfg) {
    if (cfg.max_iter == 0) throw PreconditionError("poly_lr: max_iter must be >= 1");
    if (iter > cfg.max_iter) {
        throw PreconditionError("poly_lr: iteration " + std::to_string(iter) + " exceeds max_iter " +
                                std::to_string(cfg.max_iter));
    }
    const double frac = 1.0 - static_cast<double>(iter) / static_cast<double>(cfg.max_iter);
    return cfg.base_lr * std::pow(frac, cfg.power);
}

template <typename T>
void sgd_apply(ParamStore<T>& params, const Gradients<T>& grads, OptimizerState<T>& state, double lr) {
    const ParamLayout& layout = params.layout();
    if (grads.values.size() != layout.size() || state.velocity.size() != layout.size()) {
        throw ShapeError("sgd: gradient/velocity count does not match the parameter layout");
    }
    const T mu = static_cast<T>(state.config.momentum);
    const T step = static_cast<T>(lr);
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const ParamInfo& info = layout[i];
        if (!info.learnable()) continue;
        Tensor4<T>& p = params[i];
        const Tensor4<T>& g = grads[i];
        Tensor4<T>& v = state.velocity[i];
        if (g.shape() != p.shape() || v.shape() != p.shape()) {
            throw ShapeError("sgd: shape mismatch for " + info.name + ": param " + to_string(p.shape()) + ", grad " +
                             to_string(g.shape()));
        }
        const T wd = info.decays() ? static_cast<T>(state.config.weight_decay) : T(0);
        for (std::size_t k = 0; k < p.size(); ++k) {
            v[k] = mu * v[k] + g[k] + wd * p[k];
            p[k] -= step * v[k];
        }
    }
    ++state.updates;
}

template <typename T>
double sgd_step(ParamStore<T>& params, const Gradients<T>& grads, OptimizerState<T>& state, std::size_t iter) {
    const double lr = poly_lr(iter, state.config);
    sgd_apply(params, grads, state, lr);
    return lr;
}

template <typename T>
void adam_apply(ParamStore<T>& params, const Gradients<T>& grads, OptimizerState<T>& state, double lr) {
    const ParamLayout& layout = params.layout();
    if (state.second_moment.size() != layout.size()) {
        throw PreconditionError("adam: optimizer state was not created for adam");
    }
    if (grads.values.size() != layout.size() || state.velocity.size() != layout.size()) {
        throw ShapeError("adam: gradient/moment count does not match the parameter layout");
    }
    const OptimizerConfig& c = state.config;
    const double t = static_cast<double>(state.updates + 1);
    const double corr1 = 1.0 - std::pow(c.momentum, t);
    const double corr2 = 1.0 - std::pow(c.beta2, t);
    const T b1 = static_cast<T>(c.momentum), b2 = static_cast<T>(c.beta2);
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const ParamInfo& info = layout[i];
        if (!info.learnable()) continue;
        Tensor4<T>& p = params[i];
        const Tensor4<T>& g = grads[i];
        Tensor4<T>& m = state.velocity[i];
        Tensor4<T>& v = state.second_moment[i];
        if (g.shape() != p.shape() || m.shape() != p.shape()) {
            throw ShapeError("adam: shape mismatch for " + info.name + ": param " + to_string(p.shape()) +
                             ", grad " + to_string(g.shape()));
        }
        const T wd = info.decays() ? static_cast<T>(c.weight_decay) : T(0);
        for (std::size_t k = 0; k < p.size(); ++k) {
            const T gk = g[k] + wd * p[k];
            m[k] = b1 * m[k] + (T(1) - b1) * gk;
            v[k] = b2 * v[k] + (T(1) - b2) * gk * gk;
            const double m_hat = static_cast<double>(m[k]) / corr1;
            const double v_hat = static_cast<double>(v[k]) / corr2;
            p[k] -= static_cast<T>(lr * m_hat / (std::sqrt(v_hat) + c.adam_eps));
        }
    }
    ++state.updates;
}

template <typename T>
double optimizer_step(ParamStore<T>& params, const Gradients<T>& grads, OptimizerState<T>& state, std::size_t iter) {
    const double lr = poly_lr(iter, state.config);
    if (state.config.kind == OptimizerKind::Adam) {
        adam_apply(params, grads, state, lr);
    } else {
        sgd_apply(params, grads, state, lr);
    }
    return lr;
}

// ---------------------------------------------------------------------------

std::uint64_t ConfusionMatrix::total() const {
    std::uint64_t t = 0;
    for (std::uint64_t v : counts_) t += v;
    return t;
}

void confusion_update(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt, int ignore_index) {
    if (pred.n != gt.n || pred.h != gt.h || pred.w != gt.w) {
        throw ShapeError("confusion_update: prediction and ground-truth maps differ in size");
    }
    const int C = static_cast<int>(cm.classes());
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        const int g = gt.data[i];
        const int p = pred.data[i];
        if (g == ignore_index) continue;
        if (g < 0 || g >= C || p < 0 || p >= C) {
            throw PreconditionError("confusion_update: label out of range at pixel " + std::to_string(i) +
                                    " (gt " + std::to_string(g) + ", pred " + std::to_string(p) + ", classes " +
                                    std::to_string(C) + ")");
        }
    }
    for (std::size_t i = 0; i < gt.data.size(); ++i) {
        if (gt.data[i] == ignore_index) continue;
        ++cm(static_cast<std::size_t>(gt.data[i]), static_cast<std::size_t>(pred.data[i]));
    }
}

MiouResult miou(const ConfusionMatrix& cm) {
    const std::size_t C = cm.classes();
    MiouResult r;
    r.per_class.resize(C);
    double sum = 0.0;
    std::size_t present = 0;
    for (std::size_t c = 0; c < C; ++c) {
        std::uint64_t row = 0, col = 0;
        for (std::size_t k = 0; k < C; ++k) {
            row += cm(c, k);
            col += cm(k, c);
        }
        const std::uint64_t tp = cm(c, c);
        const std::uint64_t denom = row + col - tp;
        if (denom == 0) continue;
        const double iou = static_cast<double>(tp) / static_cast<double>(denom);
        r.per_class[c] = iou;
        sum += iou;
        ++present;
    }
    if (present > 0) r.mean = sum / static_cast<double>(present);
    return r;
}

std::optional<double> pixel_accuracy(const ConfusionMatrix& cm) {
    const std::uint64_t total = cm.total();
    if (total == 0) return std::nullopt;
    std::uint64_t diag = 0;
    for (std::size_t c = 0; c < cm.classes(); ++c) diag += cm(c, c);
    return static_cast<double>(diag) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------

std::array<double, 3> synth_class_color(std::size_t cls, std::size_t classes) {
    if (cls == 0) return {0.15, 0.15, 0.15};
    // Evenly spaced hues for the foreground classes, slightly desaturated.
    const double hue = 6.0 * static_cast<double>(cls - 1) / static_cast<double>(classes - 1);
    const int sector = static_cast<int>(hue) % 6;
    const double f = hue - std::floor(hue);
    const double hi = 0.95, lo = 0.25;
    const double up = lo + (hi - lo) * f, down = hi - (hi - lo) * f;
    switch (sector) {
        case 0: return {hi, up, lo};
        case 1: return {down, hi, lo};
        case 2: return {lo, hi, up};
        case 3: return {lo, down, hi};
        case 4: return {up, lo, hi};
        default: return {hi, lo, down};
    }
}

std::vector<Sample> synth_dataset(std::size_t n, std::size_t height, std::size_t width, std::size_t classes,
                                  std::uint64_t seed) {
    if (classes < 2) throw PreconditionError("synth_dataset: need at least 2 classes");
    if (height % 8 != 0 || width % 8 != 0 || height == 0 || width == 0) {
        throw PreconditionError("synth_dataset: height and width must be positive multiples of 8");
    }
    Rng rng(seed);
    std::vector<Sample> out;
    out.reserve(n);
    std::size_t next_class = 0;
    const std::size_t half = width / 2;
    for (std::size_t i = 0; i < n; ++i) {
        Sample s{Tensor4d(1, 3, height, width), LabelMap(1, height, width, 0)};
        for (std::size_t cell = 0; cell < 2; ++cell) {
            const auto cls = 1 + (next_class++ % (classes - 1));
            const std::size_t rh = height / 4 + rng.below(height / 2 + 1);
            const std::size_t rw = half / 3 + rng.below(half / 2 + 1);
            const std::size_t y0 = rng.below(height - rh + 1);
            const std::size_t x0 = cell * half + rng.below(half - std::min(rw, half) + 1);
            for (std::size_t y = y0; y < y0 + rh; ++y) {
                for (std::size_t x = x0; x < std::min(x0 + rw, (cell + 1) * half); ++x) s.label(0, y, x) = static_cast<int>(cls);
            }
        }
        for (std::size_t y = 0; y < height; ++y) {
            for (std::size_t x = 0; x < width; ++x) {
                const auto color = synth_class_color(static_cast<std::size_t>(s.label(0, y, x)), classes);
                for (std::size_t c = 0; c < 3; ++c) {
                    const double v = color[c] + rng.uniform(-0.05, 0.05);
                    s.image(0, c, y, x) = std::clamp(v, 0.0, 1.0);
                }
            }
        }
        out.push_back(std::move(s));
    }
    return out;
}

// ---------------------------------------------------------------------------

template <typename T>
std::pair<Tensor4<T>, LabelMap> make_batch(const std::vector<Sample>& data, std::size_t first, std::size_t count) {
    if (data.empty() || count == 0) throw PreconditionError("make_batch: empty dataset or batch");
    std::vector<std::size_t> indices(count);
    for (std::size_t b = 0; b < count; ++b) indices[b] = (first + b) % data.size();
    return make_batch<T>(data, indices);
}

template <typename T>
std::pair<Tensor4<T>, LabelMap> make_batch(const std::vector<Sample>& data, const std::vector<std::size_t>& indices) {
    if (data.empty() || indices.empty()) throw PreconditionError("make_batch: empty dataset or batch");
    const Shape4 s = data.front().image.shape();
    const std::size_t count = indices.size();
    Tensor4<T> x(count, s.c, s.h, s.w);
    LabelMap y(count, s.h, s.w);
    const std::size_t per_image = s.c * s.h * s.w;
    const std::size_t per_label = s.h * s.w;
    for (std::size_t b = 0; b < count; ++b) {
        if (indices[b] >= data.size()) throw PreconditionError("make_batch: sample index out of range");
        const Sample& sample = data[indices[b]];
        if (sample.image.shape() != s) throw ShapeError("make_batch: samples differ in size");
        std::transform(sample.image.data(), sample.image.data() + per_image, x.data() + b * per_image,
                       [](double v) { return static_cast<T>(v); });
        std::copy_n(sample.label.data.begin(), per_label, y.data.begin() + static_cast<std::ptrdiff_t>(b * per_label));
    }
    return {std::move(x), std::move(y)};
}

template <typename T>
ConfusionMatrix evaluate(const Network<T>& net, const std::vector<Sample>& data, int ignore_index) {
    ConfusionMatrix cm(net.plan.spec.num_classes);
    for (std::size_t i = 0; i < data.size(); ++i) {
        auto [x, y] = make_batch<T>(data, i, 1);
        const Tensor4<T> logits = net.forward(x, Mode::Infer);
        confusion_update(cm, argmax_channels(logits), y, ignore_index);
    }
    return cm;
}

template <typename T>
TrainReport train_toy(Network<T>& net, const std::vector<Sample>& data, const TrainOptions& opts) {
    if (data.empty()) throw PreconditionError("train_toy: empty dataset");
    OptimizerConfig cfg = opts.optimizer;
    if (cfg.max_iter == 0) cfg.max_iter = std::max<std::size_t>(opts.steps, 1);
    OptimizerState<T> state(net.plan.layout, cfg);
    const std::size_t batch = std::min(opts.batch == 0 ? std::size_t{4} : opts.batch, data.size());

    // Index stream: one permutation of the set per epoch, drawn as needed.
    Rng rng(opts.shuffle_seed);
    std::vector<std::size_t> order;
    std::size_t cursor = 0;
    auto next_indices = [&] {
        std::vector<std::size_t> picked;
        while (picked.size() < batch) {
            if (cursor == order.size()) {
                order.resize(data.size());
                std::iota(order.begin(), order.end(), std::size_t{0});
                if (opts.shuffle) {
                    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
                }
                cursor = 0;
            }
            picked.push_back(order[cursor++]);
        }
        return picked;
    };

    TrainReport report;
    report.curve.reserve(opts.steps);
    for (std::size_t step = 0; step < opts.steps; ++step) {
        auto [x, labels] = make_batch<T>(data, next_indices());
        Tape<T> tape;
        const Tensor4<T> logits = esnet::forward(net.plan, net.params, x, Mode::Train, &tape);
        const LossResult<T> loss = softmax_cross_entropy(logits, labels, opts.ignore_index);
        if (!std::isfinite(static_cast<double>(loss.loss))) {
            throw TrainingDiverged(step, "training diverged: loss is not finite at step " + std::to_string(step));
        }
        const Gradients<T> grads = backward(net.plan, net.params, tape, loss.dlogits);
        apply_running_stats(net.plan, net.params, tape);
        const double lr = optimizer_step(net.params, grads, state, step);
        report.curve.push_back({step, lr, static_cast<double>(loss.loss)});
    }
    report.confusion = evaluate(net, data, opts.ignore_index);
    report.pixel_accuracy = pixel_accuracy(report.confusion).value_or(0.0);
    report.miou = miou(report.confusion).mean;
    return report;
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
    std::ostringstream os;
    os.precision(17);
    os << "step,lr,loss\n";
    for (const CurvePoint& p : curve) os << p.step << ',' << p.lr << ',' << p.loss << '\n';
    return os.str();
}

#define ESNET_INSTANTIATE_TRAINING(T)                                                                          \
    template struct OptimizerState<T>;                                                                         \
    template void sgd_apply<T>(ParamStore<T>&, const Gradients<T>&, OptimizerState<T>&, double);               \
    template double sgd_step<T>(ParamStore<T>&, const Gradients<T>&, OptimizerState<T>&, std::size_t);         \
    template void adam_apply<T>(ParamStore<T>&, const Gradients<T>&, OptimizerState<T>&, double);              \
    template double optimizer_step<T>(ParamStore<T>&, const Gradients<T>&, OptimizerState<T>&, std::size_t);   \
    template std::pair<Tensor4<T>, LabelMap> make_batch<T>(const std::vector<Sample>&, std::size_t,            \
                                                           std::size_t);                                       \
    template std::pair<Tensor4<T>, LabelMap> make_batch<T>(const std::vector<Sample>&,                          \
                                                           const std::vector<std::size_t>&);                   \
    template ConfusionMatrix evaluate<T>(const Network<T>&, const std::vector<Sample>&, int);                  \
    template TrainReport train_toy<T>(Network<T>&, const std::vector<Sample>&, const TrainOptions&);

ESNET_INSTANTIATE_TRAINING(float)
ESNET_INSTANTIATE_TRAINING(double)

}  // namespace esnet
