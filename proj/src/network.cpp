#include "esnet/network.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace esnet {

NetworkSpec assemble_network(const std::string& label, const std::vector<StageGroup>& groups,
                             const std::vector<std::size_t>& widths, std::size_t num_classes, InputDims input) {
    if (num_classes < 2) throw PreconditionError("num_classes must be >= 2, got " + std::to_string(num_classes));
    NetworkSpec spec;
    spec.label = label;
    spec.num_classes = num_classes;
    spec.input = input;

    std::size_t level = 0;
    std::size_t channels = input[0];
    std::size_t block_no = 0;
    std::string prefix = "stem";
    std::string group = "Stem";
    std::size_t ordinal = 0;  // index of a residual stage within its group
    for (const StageGroup& g : groups) {
        if (g.count == 0) throw PreconditionError(std::string(block_kind_name(g.kind)) + ": count must be >= 1");
        for (std::size_t i = 0; i < g.count; ++i) {
            BlockSpec b;
            switch (g.kind) {
                case BlockKind::Downsample:
                    if (level >= widths.size()) {
                        throw PreconditionError("width ladder has " + std::to_string(widths.size()) +
                                                " rungs but more downsamplers are configured");
                    }
                    b = BlockSpec::downsample(channels, widths[level]);
                    ++level;
                    break;
                case BlockKind::Upsample:
                    if (level == 0) throw PreconditionError("upsampler without a matching downsampler");
                    --level;
                    b = BlockSpec::upsample(channels, level == 0 ? num_classes : widths[level - 1], level == 0);
                    break;
                case BlockKind::FCU: b = BlockSpec::fcu(channels, g.K); break;
                case BlockKind::PFCU: b = BlockSpec::pfcu(channels, g.rates); break;
                case BlockKind::NonBottleneck: b = BlockSpec::non_bottleneck(channels); break;
                case BlockKind::Bottleneck: b = BlockSpec::bottleneck(channels); break;
                case BlockKind::NonBt1D: b = BlockSpec::non_bt_1d(channels, g.dilation); break;
            }
            if (!is_residual(b.kind)) {
                ++block_no;
                ordinal = 0;
                if (b.full_conv) {
                    prefix = "fullconv";
                    group = "Full Conv";
                } else {
                    prefix = "block" + std::to_string(block_no);
                    group = "Block " + std::to_string(block_no);
                }
                spec.stages.push_back({prefix + "." + block_kind_name(b.kind), group, b});
            } else {
                spec.stages.push_back(
                    {prefix + "." + block_kind_name(b.kind) + std::to_string(ordinal++), group, b});
            }
            channels = b.channels_out;
        }
    }
    validate(spec);
    return spec;
}

std::vector<StageGroup> esnet_stage_groups() {
    auto down = StageGroup{BlockKind::Downsample, 1};
    auto up = StageGroup{BlockKind::Upsample, 1};
    auto fcu = [](std::size_t count, std::size_t K) { return StageGroup{BlockKind::FCU, count, K}; };
    StageGroup pfcu{BlockKind::PFCU, 3};
    pfcu.rates = {2, 5, 9};
    return {down, fcu(3, 3), down, fcu(2, 5), down, pfcu, up, fcu(2, 5), up, fcu(2, 3), up};
}

NetworkSpec build_esnet(std::size_t num_classes) {
    NetworkSpec spec = assemble_network("ESNet", esnet_stage_groups(), kEsnetWidths, num_classes, {3, 1024, 512});
    spec.published_accounting_total = 15296;
    return spec;
}

NetworkSpec build_esnet_scaled(std::size_t num_classes, const std::vector<std::size_t>& widths, InputDims input) {
    NetworkSpec spec = assemble_network("ESNet", esnet_stage_groups(), widths, num_classes, input);
    spec.published_accounting_total = 15296;
    return spec;
}

std::vector<std::size_t> scaled_widths(double scale) {
    if (!(scale > 0.0)) throw PreconditionError("width_scale must be positive");
    std::vector<std::size_t> w;
    std::size_t prev = 3;
    for (std::size_t base : kEsnetWidths) {
        const auto v = static_cast<std::size_t>(std::lround(static_cast<double>(base) * scale));
        prev = std::max(prev + 1, v);
        w.push_back(prev);
    }
    return w;
}

NetworkSpec build_erfnet_reference(std::size_t num_classes) {
    auto down = StageGroup{BlockKind::Downsample, 1};
    auto up = StageGroup{BlockKind::Upsample, 1};
    auto nbt = [](std::size_t count, std::size_t dilation = 1) {
        StageGroup g{BlockKind::NonBt1D, count};
        g.dilation = dilation;
        return g;
    };
    std::vector<StageGroup> groups{down, down, nbt(5), down};
    for (std::size_t d : {2, 4, 8, 16, 2, 4, 8, 16}) groups.push_back(nbt(1, d));
    groups.insert(groups.end(), {up, nbt(2), up, nbt(2), up});
    NetworkSpec spec = assemble_network("ERFNet", groups, kEsnetWidths, num_classes, {3, 1024, 512});
    spec.published_accounting_total = 17688;
    return spec;
}

void validate(const NetworkSpec& spec) {
    if (spec.stages.empty()) throw PreconditionError("network has no stages");
    if (spec.num_classes < 2) throw PreconditionError("num_classes must be >= 2");
    std::size_t channels = spec.input[0];
    for (const StageSpec& s : spec.stages) {
        validate(s.block);
        if (s.block.channels_in != channels) {
            throw PreconditionError("stage " + s.name + " expects " + std::to_string(s.block.channels_in) +
                                    " input channels but receives " + std::to_string(channels));
        }
        channels = s.block.channels_out;
    }
    if (channels != spec.num_classes) {
        throw PreconditionError("network ends with " + std::to_string(channels) + " channels, expected " +
                                std::to_string(spec.num_classes) + " classes");
    }
}

std::size_t required_divisor(const NetworkSpec& spec) {
    std::size_t d = 1;
    for (const StageSpec& s : spec.stages) {
        if (s.block.kind == BlockKind::Downsample) d *= 2;
    }
    return d;
}

void check_input(const NetworkSpec& spec, const Shape4& x) {
    if (x.c != spec.input[0]) {
        throw ShapeError("input has C=" + std::to_string(x.c) + " channels, network expects " +
                         std::to_string(spec.input[0]));
    }
    const std::size_t d = required_divisor(spec);
    if (x.h == 0 || x.w == 0 || x.h % d != 0 || x.w % d != 0) {
        throw ShapeError("input H=" + std::to_string(x.h) + ", W=" + std::to_string(x.w) +
                         " must both be positive multiples of " + std::to_string(d));
    }
}

std::vector<TraceEntry> shape_trace(const NetworkSpec& spec, InputDims input) {
    Shape4 s{1, input[0], input[1], input[2]};
    check_input(spec, s);
    std::vector<TraceEntry> out;
    out.reserve(spec.stages.size());
    for (std::size_t i = 0; i < spec.stages.size(); ++i) {
        s = block_output_shape(spec.stages[i].block, s);
        out.push_back({i + 1, spec.stages[i].name, spec.stages[i].group, s});
    }
    return out;
}

std::vector<TraceEntry> group_trace(const NetworkSpec& spec, InputDims input) {
    std::vector<TraceEntry> out;
    for (TraceEntry& e : shape_trace(spec, input)) {
        if (!out.empty() && out.back().group == e.group) {
            out.back() = std::move(e);
        } else {
            out.push_back(std::move(e));
        }
    }
    return out;
}

NetworkPlan compile(const NetworkSpec& spec) {
    validate(spec);
    NetworkPlan plan{spec, {}, {}};
    plan.blocks.reserve(spec.stages.size());
    for (const StageSpec& s : spec.stages) plan.blocks.push_back(compile_block(s.block, s.name, plan.layout));
    return plan;
}

template <typename T>
Tensor4<T> forward(const NetworkPlan& plan, const ParamStore<T>& params, const Tensor4<T>& x, Mode mode,
                   Tape<T>* tape) {
    check_input(plan.spec, x.shape());
    if (params.size() != plan.layout.size()) {
        throw ShapeError("parameter store has " + std::to_string(params.size()) + " entries, network needs " +
                         std::to_string(plan.layout.size()));
    }
    if (tape) tape->blocks.assign(plan.blocks.size(), BlockCache<T>{});
    Tensor4<T> h = x;
    for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
        h = block_forward(plan.blocks[i], params, h, mode, tape ? &tape->blocks[i] : nullptr);
    }
    return h;
}

template <typename T>
Gradients<T> backward(const NetworkPlan& plan, const ParamStore<T>& params, const Tape<T>& tape,
                      const Tensor4<T>& dlogits) {
    if (tape.blocks.size() != plan.blocks.size()) {
        throw PreconditionError("backward: tape does not belong to this network (run forward with a tape)");
    }
    Gradients<T> grads(plan.layout);
    Tensor4<T> dy = dlogits;
    for (std::size_t i = plan.blocks.size(); i-- > 0;) {
        dy = block_backward(plan.blocks[i], params, tape.blocks[i], dy, grads, i > 0);
    }
    return grads;
}

template <typename T>
void apply_running_stats(const NetworkPlan& plan, ParamStore<T>& params, const Tape<T>& tape, T momentum) {
    for (std::size_t i = 0; i < plan.blocks.size() && i < tape.blocks.size(); ++i) {
        apply_running_stats(plan.blocks[i], params, tape.blocks[i], momentum);
    }
}

template <typename T>
std::uint64_t activation_pattern(const NetworkPlan& plan, const Tape<T>& tape) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (std::size_t i = 0; i < plan.blocks.size() && i < tape.blocks.size(); ++i) {
        hash_activation_pattern(plan.blocks[i], tape.blocks[i], h);
    }
    return h;
}

#define ESNET_INSTANTIATE_NETWORK(T)                                                                       \
    template Tensor4<T> forward<T>(const NetworkPlan&, const ParamStore<T>&, const Tensor4<T>&, Mode,      \
                                   Tape<T>*);                                                              \
    template Gradients<T> backward<T>(const NetworkPlan&, const ParamStore<T>&, const Tape<T>&,            \
                                      const Tensor4<T>&);                                                  \
    template void apply_running_stats<T>(const NetworkPlan&, ParamStore<T>&, const Tape<T>&, T);          \
    template std::uint64_t activation_pattern<T>(const NetworkPlan&, const Tape<T>&);

ESNET_INSTANTIATE_NETWORK(float)
ESNET_INSTANTIATE_NETWORK(double)
ESNET_INSTANTIATE_NETWORK(long double)

}  // namespace esnet
