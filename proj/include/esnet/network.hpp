#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "esnet/blocks.hpp"

namespace esnet {

struct StageSpec {
    std::string name;   // parameter prefix, e.g. "block2.fcu1"
    std::string group;  // row label, e.g. "Block 2"
    BlockSpec block;
};

/// Input dims are (channels, height, width).
using InputDims = std::array<std::size_t, 3>;

struct NetworkSpec {
    std::string label;
    std::vector<StageSpec> stages;
    std::size_t num_classes = 20;
    InputDims input{3, 1024, 512};
    /// Published kernel-accounting total for this architecture, when one exists.
    std::optional<std::uint64_t> published_accounting_total;
};

/// One run of identical stages, the unit of the JSON config's "stages" list.
struct StageGroup {
    BlockKind kind = BlockKind::FCU;
    std::size_t count = 1;
    std::size_t K = 3;
    std::vector<std::size_t> rates{2, 5, 9};
    std::size_t dilation = 1;

    bool operator==(const StageGroup&) const = default;
};

/// Expands stage groups into a network. Channels follow a width ladder:
/// the i-th downsampler widens to widths[i], each upsampler returns to the
/// previous rung, and the upsampler that reaches the bottom rung emits
/// `num_classes` logits. A new row group starts at every resampling unit.
NetworkSpec assemble_network(const std::string& label, const std::vector<StageGroup>& groups,
                             const std::vector<std::size_t>& widths, std::size_t num_classes, InputDims input);

/// The stage groups of the 18-layer encoder/decoder.
std::vector<StageGroup> esnet_stage_groups();
inline const std::vector<std::size_t> kEsnetWidths{16, 64, 128};

/// Full-size network for `num_classes` classes (>= 2) at 3x1024x512.
NetworkSpec build_esnet(std::size_t num_classes);

/// Same block multiset and symmetry at reduced channel widths.
NetworkSpec build_esnet_scaled(std::size_t num_classes, const std::vector<std::size_t>& widths, InputDims input);

/// Widths 16/64/128 multiplied by `scale`, rounded, and kept strictly increasing.
std::vector<std::size_t> scaled_widths(double scale);

/// Residual-block skeleton of the 1D-factorized reference network
/// (5 @64, 8 dilated @128, 2 @64, 2 @16 between the same resampling units).
NetworkSpec build_erfnet_reference(std::size_t num_classes = 20);

/// Throws on channel discontinuities or an output width != num_classes.
void validate(const NetworkSpec& spec);

/// H and W must be multiples of 2^(number of downsamplers).
std::size_t required_divisor(const NetworkSpec& spec);

struct TraceEntry {
    std::size_t layer;  // 1-based
    std::string stage;
    std::string group;
    Shape4 dims;
};

/// Per-layer output dims, computed without touching any tensor data.
std::vector<TraceEntry> shape_trace(const NetworkSpec& spec, InputDims input);
/// Output dims of the last layer of each row group.
std::vector<TraceEntry> group_trace(const NetworkSpec& spec, InputDims input);

struct NetworkPlan {
    NetworkSpec spec;
    ParamLayout layout;
    std::vector<BlockPlan> blocks;
};

NetworkPlan compile(const NetworkSpec& spec);

/// Throws ShapeError when x cannot be fed to the network.
void check_input(const NetworkSpec& spec, const Shape4& x);

template <typename T>
struct Tape {
    std::vector<BlockCache<T>> blocks;
};

template <typename T>
Tensor4<T> forward(const NetworkPlan& plan, const ParamStore<T>& params, const Tensor4<T>& x, Mode mode,
                   Tape<T>* tape = nullptr);

/// Gradients for every learnable parameter, in layout order.
template <typename T>
Gradients<T> backward(const NetworkPlan& plan, const ParamStore<T>& params, const Tape<T>& tape,
                      const Tensor4<T>& dlogits);

template <typename T>
void apply_running_stats(const NetworkPlan& plan, ParamStore<T>& params, const Tape<T>& tape, T momentum = T(0.1));

/// Identifies the linear piece of a recorded forward; see hash_activation_pattern.
template <typename T>
std::uint64_t activation_pattern(const NetworkPlan& plan, const Tape<T>& tape);

/// A compiled network with its own parameters.
template <typename T>
struct Network {
    NetworkPlan plan;
    ParamStore<T> params;

    explicit Network(const NetworkSpec& spec, std::uint64_t seed = 0)
        : plan(compile(spec)), params(plan.layout) {
        params.init(seed);
    }
    Tensor4<T> forward(const Tensor4<T>& x, Mode mode = Mode::Infer, Tape<T>* tape = nullptr) const {
        return esnet::forward(plan, params, x, mode, tape);
    }
};

}  // namespace esnet
