#include "esnet/blocks.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace esnet {

const char* block_kind_name(BlockKind k) {
    switch (k) {
        case BlockKind::Downsample: return "down";
        case BlockKind::Upsample: return "up";
        case BlockKind::FCU: return "fcu";
        case BlockKind::PFCU: return "pfcu";
        case BlockKind::NonBottleneck: return "non_bottleneck";
        case BlockKind::Bottleneck: return "bottleneck";
        case BlockKind::NonBt1D: return "non_bt_1d";
    }
    return "unknown";
}

BlockKind parse_block_kind(const std::string& name) {
    for (BlockKind k : {BlockKind::Downsample, BlockKind::Upsample, BlockKind::FCU, BlockKind::PFCU,
                        BlockKind::NonBottleneck, BlockKind::Bottleneck, BlockKind::NonBt1D}) {
        if (name == block_kind_name(k)) return k;
    }
    throw PreconditionError("unknown block kind '" + name +
                            "' (expected down, up, fcu, pfcu, non_bottleneck, bottleneck or non_bt_1d)");
}

bool is_residual(BlockKind k) { return k != BlockKind::Downsample && k != BlockKind::Upsample; }

BlockSpec BlockSpec::downsample(std::size_t cin, std::size_t cout) {
    BlockSpec s;
    s.kind = BlockKind::Downsample;
    s.channels_in = cin;
    s.channels_out = cout;
    return s;
}

BlockSpec BlockSpec::upsample(std::size_t cin, std::size_t cout, bool full_conv) {
    BlockSpec s;
    s.kind = BlockKind::Upsample;
    s.channels_in = cin;
    s.channels_out = cout;
    s.full_conv = full_conv;
    return s;
}

BlockSpec BlockSpec::fcu(std::size_t channels, std::size_t K) {
    BlockSpec s;
    s.kind = BlockKind::FCU;
    s.channels_in = s.channels_out = channels;
    s.K = K;
    return s;
}

BlockSpec BlockSpec::pfcu(std::size_t channels, std::vector<std::size_t> rates) {
    BlockSpec s;
    s.kind = BlockKind::PFCU;
    s.channels_in = s.channels_out = channels;
    s.rates = std::move(rates);
    return s;
}

BlockSpec BlockSpec::non_bottleneck(std::size_t channels) {
    BlockSpec s;
    s.kind = BlockKind::NonBottleneck;
    s.channels_in = s.channels_out = channels;
    return s;
}

BlockSpec BlockSpec::bottleneck(std::size_t channels) {
    BlockSpec s;
    s.kind = BlockKind::Bottleneck;
    s.channels_in = s.channels_out = channels;
    return s;
}

BlockSpec BlockSpec::non_bt_1d(std::size_t channels, std::size_t dilation) {
    BlockSpec s;
    s.kind = BlockKind::NonBt1D;
    s.channels_in = s.channels_out = channels;
    s.K = 3;
    s.dilation = dilation;
    return s;
}

void validate(const BlockSpec& s) {
    const std::string kind = block_kind_name(s.kind);
    if (s.channels_in == 0 || s.channels_out == 0) {
        throw PreconditionError(kind + ": channel counts must be positive");
    }
    switch (s.kind) {
        case BlockKind::Downsample:
            if (s.channels_out <= s.channels_in) {
                throw PreconditionError("down: channels_out (" + std::to_string(s.channels_out) +
                                        ") must exceed channels_in (" + std::to_string(s.channels_in) +
                                        "); the unit concatenates a pooled copy of its input");
            }
            return;
        case BlockKind::Upsample: return;
        default: break;
    }
    if (s.channels_in != s.channels_out) {
        throw PreconditionError(kind + ": residual units keep the channel count (got " +
                                std::to_string(s.channels_in) + " -> " + std::to_string(s.channels_out) + ")");
    }
    if (s.kind == BlockKind::FCU && (s.K < 3 || s.K % 2 == 0)) {
        throw PreconditionError("fcu: kernel size K must be odd and >= 3, got " + std::to_string(s.K));
    }
    if (s.kind == BlockKind::PFCU) {
        if (s.rates.size() != 3) {
            throw PreconditionError("pfcu: exactly three dilation rates required, got " +
                                    std::to_string(s.rates.size()));
        }
        for (std::size_t r : s.rates) {
            if (r == 0) throw PreconditionError("pfcu: dilation rates must be positive");
        }
    }
    if (s.kind == BlockKind::NonBt1D && s.dilation == 0) {
        throw PreconditionError("non_bt_1d: dilation must be positive");
    }
}

std::size_t kernel_elements(const BlockSpec& s) {
    switch (s.kind) {
        case BlockKind::FCU: return 4 * s.K;
        case BlockKind::NonBt1D: return 12;
        case BlockKind::PFCU: return 6 + 6 * s.rates.size();
        case BlockKind::NonBottleneck: return 18;
        case BlockKind::Bottleneck: return 11;
        default: return 0;
    }
}

Shape4 block_output_shape(const BlockSpec& s, const Shape4& in) {
    if (in.c != s.channels_in) {
        throw ShapeError(std::string(block_kind_name(s.kind)) + ": input has C=" + std::to_string(in.c) +
                         " but the block expects " + std::to_string(s.channels_in));
    }
    switch (s.kind) {
        case BlockKind::Downsample:
            if (in.h % 2 != 0 || in.w % 2 != 0 || in.h < 2 || in.w < 2) {
                throw ShapeError("down: input H and W must be even, got " + to_string(in));
            }
            return {in.n, s.channels_out, in.h / 2, in.w / 2};
        case BlockKind::Upsample: return {in.n, s.channels_out, 2 * in.h, 2 * in.w};
        default: return in;
    }
}

namespace {

std::size_t add_param(ParamLayout& layout, const std::string& name, ParamRole role, Shape4 shape,
                      std::size_t rank, std::size_t fan_in = 0) {
    return layout.add({name, role, shape, rank, fan_in});
}

LayerPlan conv_layer(ParamLayout& layout, const std::string& name, std::size_t cout, std::size_t cin,
                     std::size_t kh, std::size_t kw, ConvGeometry g, bool bias) {
    LayerPlan l;
    l.kind = LayerKind::Conv;
    l.geom = g;
    l.weight = add_param(layout, name + ".weight", ParamRole::ConvWeight, {cout, cin, kh, kw}, 4, cin * kh * kw);
    if (bias) l.bias = add_param(layout, name + ".bias", ParamRole::ConvBias, {cout, 1, 1, 1}, 1);
    return l;
}

LayerPlan bn_layer(ParamLayout& layout, const std::string& name, std::size_t c) {
    LayerPlan l;
    l.kind = LayerKind::BatchNorm;
    const Shape4 v{c, 1, 1, 1};
    l.gamma = add_param(layout, name + ".gamma", ParamRole::BnGamma, v, 1);
    l.beta = add_param(layout, name + ".beta", ParamRole::BnBeta, v, 1);
    l.mean = add_param(layout, name + ".running_mean", ParamRole::BnRunningMean, v, 1);
    l.var = add_param(layout, name + ".running_var", ParamRole::BnRunningVar, v, 1);
    return l;
}

LayerPlan relu_layer() { return LayerPlan{}; }

ConvGeometry same_geom(std::size_t kh, std::size_t kw, std::size_t dh = 1, std::size_t dw = 1) {
    ConvGeometry g;
    g.dilation = {dh, dw};
    g.padding = {same_padding(kh, dh), same_padding(kw, dw)};
    return g;
}

// (Kx1 conv + bias, ReLU, 1xK conv, BN), both at dilation d.
void append_pair(Chain& chain, ParamLayout& layout, const std::string& prefix, std::size_t first_conv,
                 std::size_t bn, std::size_t c, std::size_t K, std::size_t d) {
    const std::string a = prefix + ".conv" + std::to_string(first_conv);
    const std::string b = prefix + ".conv" + std::to_string(first_conv + 1);
    chain.push_back(conv_layer(layout, a, c, c, K, 1, same_geom(K, 1, d, 1), true));
    chain.push_back(relu_layer());
    chain.push_back(conv_layer(layout, b, c, c, 1, K, same_geom(1, K, 1, d), false));
    chain.push_back(bn_layer(layout, prefix + ".bn" + std::to_string(bn), c));
}

}  // namespace

BlockPlan compile_block(const BlockSpec& spec, const std::string& prefix, ParamLayout& layout) {
    validate(spec);
    BlockPlan plan{spec, prefix, {}};
    const std::size_t c = spec.channels_in;
    switch (spec.kind) {
        case BlockKind::Downsample: {
            ConvGeometry g;
            g.stride = {2, 2};
            g.padding = {1, 1};
            plan.chains.push_back({conv_layer(layout, prefix + ".conv", spec.channels_out - c, c, 3, 3, g, false)});
            plan.chains.push_back({bn_layer(layout, prefix + ".bn", spec.channels_out), relu_layer()});
            break;
        }
        case BlockKind::Upsample: {
            ConvGeometry g;
            g.stride = {2, 2};
            g.padding = {1, 1};
            LayerPlan t;
            t.kind = LayerKind::TransposedConv;
            t.geom = g;
            t.output_padding = {1, 1};
            t.weight = add_param(layout, prefix + ".tconv.weight", ParamRole::ConvWeight,
                                 {c, spec.channels_out, 3, 3}, 4, spec.channels_out * 9);
            if (spec.full_conv) {
                t.bias = add_param(layout, prefix + ".tconv.bias", ParamRole::ConvBias,
                                   {spec.channels_out, 1, 1, 1}, 1);
                plan.chains.push_back({t});
            } else {
                plan.chains.push_back({t, bn_layer(layout, prefix + ".bn", spec.channels_out), relu_layer()});
            }
            break;
        }
        case BlockKind::FCU:
        case BlockKind::NonBt1D: {
            const std::size_t second = spec.kind == BlockKind::NonBt1D ? spec.dilation : 1;
            Chain chain;
            append_pair(chain, layout, prefix, 0, 0, c, spec.K, 1);
            chain.push_back(relu_layer());
            append_pair(chain, layout, prefix, 2, 1, c, spec.K, second);
            plan.chains.push_back(std::move(chain));
            break;
        }
        case BlockKind::PFCU: {
            Chain shared;
            append_pair(shared, layout, prefix + ".shared", 0, 0, c, 3, 1);
            shared.push_back(relu_layer());
            plan.chains.push_back(std::move(shared));
            for (std::size_t i = 0; i < spec.rates.size(); ++i) {
                Chain branch;
                append_pair(branch, layout, prefix + ".branch" + std::to_string(i), 0, 0, c, 3, spec.rates[i]);
                plan.chains.push_back(std::move(branch));
            }
            break;
        }
        case BlockKind::NonBottleneck: {
            plan.chains.push_back({conv_layer(layout, prefix + ".conv0", c, c, 3, 3, same_geom(3, 3), false),
                                   bn_layer(layout, prefix + ".bn0", c), relu_layer(),
                                   conv_layer(layout, prefix + ".conv1", c, c, 3, 3, same_geom(3, 3), false),
                                   bn_layer(layout, prefix + ".bn1", c)});
            break;
        }
        case BlockKind::Bottleneck: {
            const std::size_t r = std::max<std::size_t>(1, c / 4);
            plan.chains.push_back({conv_layer(layout, prefix + ".conv0", r, c, 1, 1, ConvGeometry{}, false),
                                   bn_layer(layout, prefix + ".bn0", r), relu_layer(),
                                   conv_layer(layout, prefix + ".conv1", r, r, 3, 3, same_geom(3, 3), false),
                                   bn_layer(layout, prefix + ".bn1", r), relu_layer(),
                                   conv_layer(layout, prefix + ".conv2", c, r, 1, 1, ConvGeometry{}, false),
                                   bn_layer(layout, prefix + ".bn2", c)});
            break;
        }
    }
    return plan;
}

namespace {

template <typename T>
std::span<const T> bias_of(const LayerPlan& l, const ParamStore<T>& p) {
    if (l.bias == kNoParam) return {};
    return p[l.bias].values();
}

template <typename T>
Tensor4<T> run_chain(const Chain& chain, const ParamStore<T>& p, Tensor4<T> x, Mode mode, ChainCache<T>* cache) {
    if (cache) {
        cache->inputs.clear();
        cache->bn.assign(chain.size(), std::nullopt);
    }
    for (std::size_t i = 0; i < chain.size(); ++i) {
        const LayerPlan& l = chain[i];
        if (cache) cache->inputs.push_back(x);
        switch (l.kind) {
            case LayerKind::Conv: x = conv2d(x, p[l.weight], bias_of(l, p), l.geom); break;
            case LayerKind::TransposedConv:
                x = transposed_conv2d(x, p[l.weight], bias_of(l, p), l.geom, l.output_padding);
                break;
            case LayerKind::BatchNorm:
                if (mode == Mode::Train) {
                    auto f = batchnorm2d_train(x, p[l.gamma].values(), p[l.beta].values(), static_cast<T>(kBnEps));
                    if (cache) cache->bn[i] = std::move(f.cache);
                    x = std::move(f.y);
                } else {
                    x = batchnorm2d_infer(x, p[l.gamma].values(), p[l.beta].values(), p[l.mean].values(),
                                          p[l.var].values(), static_cast<T>(kBnEps));
                }
                break;
            case LayerKind::Relu: x = relu(x); break;
        }
    }
    if (cache) cache->output = x;
    return x;
}

template <typename T>
void accumulate(Tensor4<T>& acc, const Tensor4<T>& g) {
    add_inplace(acc, g);
}

template <typename T>
void accumulate(Tensor4<T>& acc, const std::vector<T>& g) {
    if (acc.size() != g.size()) throw ShapeError("gradient accumulation: length mismatch");
    for (std::size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
}

template <typename T>
Tensor4<T> chain_backward(const Chain& chain, const ParamStore<T>& p, const ChainCache<T>& cache, Tensor4<T> dy,
                          Gradients<T>& grads, bool need_dx) {
    for (std::size_t k = chain.size(); k-- > 0;) {
        const LayerPlan& l = chain[k];
        const Tensor4<T>& in = cache.inputs[k];
        const bool want_dx = need_dx || k > 0;
        switch (l.kind) {
            case LayerKind::Conv: {
                auto g = conv2d_backward(in, p[l.weight], l.bias != kNoParam, l.geom, dy, want_dx);
                accumulate(grads[l.weight], g.dw);
                if (l.bias != kNoParam) accumulate(grads[l.bias], g.db);
                dy = std::move(g.dx);
                break;
            }
            case LayerKind::TransposedConv: {
                auto g = transposed_conv2d_backward(in, p[l.weight], l.bias != kNoParam, l.geom, dy, want_dx);
                accumulate(grads[l.weight], g.dw);
                if (l.bias != kNoParam) accumulate(grads[l.bias], g.db);
                dy = std::move(g.dx);
                break;
            }
            case LayerKind::BatchNorm: {
                if (cache.bn[k]) {
                    auto g = batchnorm2d_backward(*cache.bn[k], p[l.gamma].values(), dy);
                    accumulate(grads[l.gamma], g.dgamma);
                    accumulate(grads[l.beta], g.dbeta);
                    dy = std::move(g.dx);
                } else {
                    // Inference-mode normalization is a fixed per-channel affine map.
                    const auto gamma = p[l.gamma].values();
                    const auto mean = p[l.mean].values();
                    const auto var = p[l.var].values();
                    const std::size_t P = in.shape().plane();
                    std::vector<T> dgamma(in.c(), T(0));
                    std::vector<T> dbeta(in.c(), T(0));
                    for (std::size_t c = 0; c < in.c(); ++c) {
                        const T inv = T(1) / std::sqrt(var[c] + static_cast<T>(kBnEps));
                        for (std::size_t n = 0; n < in.n(); ++n) {
                            const T* x = in.plane(n, c);
                            T* d = dy.plane(n, c);
                            for (std::size_t i = 0; i < P; ++i) {
                                dbeta[c] += d[i];
                                dgamma[c] += d[i] * (x[i] - mean[c]) * inv;
                                d[i] *= gamma[c] * inv;
                            }
                        }
                    }
                    accumulate(grads[l.gamma], dgamma);
                    accumulate(grads[l.beta], dbeta);
                }
                break;
            }
            case LayerKind::Relu: dy = relu_backward(in, dy); break;
        }
    }
    return dy;
}

// Sum of three branch outputs in ascending value order, so the merge is
// exactly invariant to branch order while staying deterministic.
template <typename T>
Tensor4<T> merge_sorted(const Tensor4<T>& a, const Tensor4<T>& b, const Tensor4<T>& c, const Tensor4<T>& x) {
    if (a.shape() != x.shape() || b.shape() != x.shape() || c.shape() != x.shape()) {
        throw ShapeError("pfcu merge: branch dims differ from input dims " + to_string(x.shape()));
    }
    Tensor4<T> out(x.shape());
    for (std::size_t i = 0; i < x.size(); ++i) {
        T lo = a[i], mid = b[i], hi = c[i];
        if (lo > mid) std::swap(lo, mid);
        if (mid > hi) std::swap(mid, hi);
        if (lo > mid) std::swap(lo, mid);
        out[i] = ((lo + mid) + hi) + x[i];
    }
    return out;
}

}  // namespace

template <typename T>
Tensor4<T> block_forward(const BlockPlan& plan, const ParamStore<T>& params, const Tensor4<T>& x, Mode mode,
                         BlockCache<T>* cache) {
    block_output_shape(plan.spec, x.shape());  // validates input dims
    if (cache) {
        cache->input_shape = x.shape();
        cache->chains.assign(plan.chains.size(), ChainCache<T>{});
    }
    auto chain_cache = [&](std::size_t i) { return cache ? &cache->chains[i] : nullptr; };

    switch (plan.spec.kind) {
        case BlockKind::Downsample: {
            Tensor4<T> conv = run_chain(plan.chains[0], params, x, mode, chain_cache(0));
            auto pooled = maxpool2d(x);
            if (cache) cache->pool_argmax = std::move(pooled.argmax);
            return run_chain(plan.chains[1], params, concat_channels(conv, pooled.y), mode, chain_cache(1));
        }
        case BlockKind::Upsample: return run_chain(plan.chains[0], params, x, mode, chain_cache(0));
        case BlockKind::PFCU: {
            Tensor4<T> t = run_chain(plan.chains[0], params, x, mode, chain_cache(0));
            Tensor4<T> b0 = run_chain(plan.chains[1], params, t, mode, chain_cache(1));
            Tensor4<T> b1 = run_chain(plan.chains[2], params, t, mode, chain_cache(2));
            Tensor4<T> b2 = run_chain(plan.chains[3], params, t, mode, chain_cache(3));
            Tensor4<T> y = relu(merge_sorted(b0, b1, b2, x));
            if (cache) cache->output = y;
            return y;
        }
        default: {
            Tensor4<T> r = run_chain(plan.chains[0], params, x, mode, chain_cache(0));
            add_inplace(r, x);
            Tensor4<T> y = relu(r);
            if (cache) cache->output = y;
            return y;
        }
    }
}

template <typename T>
Tensor4<T> block_backward(const BlockPlan& plan, const ParamStore<T>& params, const BlockCache<T>& cache,
                          const Tensor4<T>& dy, Gradients<T>& grads, bool need_dx) {
    if (cache.chains.size() != plan.chains.size()) {
        throw PreconditionError("block_backward: cache was not recorded for block " + plan.name);
    }
    switch (plan.spec.kind) {
        case BlockKind::Downsample: {
            Tensor4<T> dcat = chain_backward(plan.chains[1], params, cache.chains[1], dy, grads, true);
            const std::size_t conv_channels = plan.spec.channels_out - plan.spec.channels_in;
            auto [dconv, dpool] = split_channels(dcat, conv_channels);
            Tensor4<T> dx = chain_backward(plan.chains[0], params, cache.chains[0], std::move(dconv), grads, need_dx);
            if (!need_dx) return {};
            add_inplace(dx, maxpool2d_backward(cache.input_shape, cache.pool_argmax, dpool));
            return dx;
        }
        case BlockKind::Upsample:
            return chain_backward(plan.chains[0], params, cache.chains[0], dy, grads, need_dx);
        case BlockKind::PFCU: {
            const Tensor4<T> ds = relu_backward(cache.output, dy);
            Tensor4<T> dt = chain_backward(plan.chains[1], params, cache.chains[1], ds, grads, true);
            add_inplace(dt, chain_backward(plan.chains[2], params, cache.chains[2], ds, grads, true));
            add_inplace(dt, chain_backward(plan.chains[3], params, cache.chains[3], ds, grads, true));
            Tensor4<T> dx = chain_backward(plan.chains[0], params, cache.chains[0], std::move(dt), grads, need_dx);
            if (!need_dx) return {};
            add_inplace(dx, ds);
            return dx;
        }
        default: {
            const Tensor4<T> ds = relu_backward(cache.output, dy);
            Tensor4<T> dx = chain_backward(plan.chains[0], params, cache.chains[0], ds, grads, need_dx);
            if (!need_dx) return {};
            add_inplace(dx, ds);
            return dx;
        }
    }
}

template <typename T>
void apply_running_stats(const BlockPlan& plan, ParamStore<T>& params, const BlockCache<T>& cache, T momentum) {
    for (std::size_t c = 0; c < plan.chains.size() && c < cache.chains.size(); ++c) {
        const Chain& chain = plan.chains[c];
        const ChainCache<T>& cc = cache.chains[c];
        for (std::size_t k = 0; k < chain.size() && k < cc.bn.size(); ++k) {
            if (chain[k].kind != LayerKind::BatchNorm || !cc.bn[k]) continue;
            const Shape4& s = cc.inputs[k].shape();
            update_running_stats<T>(params[chain[k].mean].values(), params[chain[k].var].values(), cc.bn[k]->mean,
                                    cc.bn[k]->var, s.n * s.plane(), momentum);
        }
    }
}

namespace {

void fnv_mix(std::uint64_t& h, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        h ^= (v >> (8 * i)) & 0xFF;
        h *= 0x100000001b3ull;
    }
}

template <typename T>
void hash_positive(const Tensor4<T>& t, std::uint64_t& h) {
    std::uint64_t word = 0;
    std::size_t bits = 0;
    for (T v : t.values()) {
        word = (word << 1) | (v > T(0) ? 1u : 0u);
        if (++bits == 64) {
            fnv_mix(h, word);
            word = 0;
            bits = 0;
        }
    }
    fnv_mix(h, word);
}

}  // namespace

template <typename T>
void hash_activation_pattern(const BlockPlan& plan, const BlockCache<T>& cache, std::uint64_t& h) {
    for (std::size_t c = 0; c < plan.chains.size() && c < cache.chains.size(); ++c) {
        const Chain& chain = plan.chains[c];
        for (std::size_t k = 0; k < chain.size() && k < cache.chains[c].inputs.size(); ++k) {
            if (chain[k].kind == LayerKind::Relu) hash_positive(cache.chains[c].inputs[k], h);
        }
    }
    for (std::uint32_t a : cache.pool_argmax) fnv_mix(h, a);
    // The final ReLU of residual units is applied outside the chains.
    if (plan.spec.kind != BlockKind::Downsample && plan.spec.kind != BlockKind::Upsample) {
        hash_positive(cache.output, h);
    }
}

template <typename T>
StandaloneBlock<T>::StandaloneBlock(const BlockSpec& spec, const std::string& prefix) {
    ParamLayout layout;
    plan = compile_block(spec, prefix, layout);
    params = ParamStore<T>(std::move(layout));
}

#define ESNET_INSTANTIATE_BLOCKS(T)                                                                            \
    template Tensor4<T> block_forward<T>(const BlockPlan&, const ParamStore<T>&, const Tensor4<T>&, Mode,      \
                                         BlockCache<T>*);                                                      \
    template Tensor4<T> block_backward<T>(const BlockPlan&, const ParamStore<T>&, const BlockCache<T>&,        \
                                          const Tensor4<T>&, Gradients<T>&, bool);                             \
    template void apply_running_stats<T>(const BlockPlan&, ParamStore<T>&, const BlockCache<T>&, T);           \
    template void hash_activation_pattern<T>(const BlockPlan&, const BlockCache<T>&, std::uint64_t&);          \
    template struct StandaloneBlock<T>;

ESNET_INSTANTIATE_BLOCKS(float)
ESNET_INSTANTIATE_BLOCKS(double)
ESNET_INSTANTIATE_BLOCKS(long double)

}  // namespace esnet
