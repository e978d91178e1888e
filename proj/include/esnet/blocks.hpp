#pragma once

// Residual and resampling units, expressed as small plans over the
// primitives in ops.hpp. A plan names its parameters in a ParamLayout; the
// values live in a ParamStore so that one plan can run at any precision.
//
// Normalization convention inside residual units: each 1D pair is
// (Kx1 conv + bias, ReLU, 1xK conv, BN) followed by ReLU, except that the
// last pair's ReLU comes after the identity add. Convolutions feeding a BN
// carry no bias.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "esnet/ops.hpp"
#include "esnet/params.hpp"

namespace esnet {

enum class BlockKind { Downsample, Upsample, FCU, PFCU, NonBottleneck, Bottleneck, NonBt1D };

const char* block_kind_name(BlockKind k);
/// Accepts the names produced by block_kind_name; throws on anything else.
BlockKind parse_block_kind(const std::string& name);
bool is_residual(BlockKind k);

struct BlockSpec {
    BlockKind kind = BlockKind::FCU;
    std::size_t channels_in = 0;
    std::size_t channels_out = 0;
    std::size_t K = 3;                       // FCU kernel extent
    std::vector<std::size_t> rates{2, 5, 9};  // PFCU branch dilations
    std::size_t dilation = 1;                // NonBt1D second-pair dilation
    bool full_conv = false;                  // Upsample producing class logits

    bool operator==(const BlockSpec&) const = default;

    static BlockSpec downsample(std::size_t cin, std::size_t cout);
    static BlockSpec upsample(std::size_t cin, std::size_t cout, bool full_conv = false);
    static BlockSpec fcu(std::size_t channels, std::size_t K);
    static BlockSpec pfcu(std::size_t channels, std::vector<std::size_t> rates = {2, 5, 9});
    static BlockSpec non_bottleneck(std::size_t channels);
    static BlockSpec bottleneck(std::size_t channels);
    static BlockSpec non_bt_1d(std::size_t channels, std::size_t dilation = 1);
};

/// Throws PreconditionError describing the first violated constraint.
void validate(const BlockSpec& spec);

/// Kernel elements per layer-channel of a residual unit (Kx1 counts K).
/// Zero for resampling units.
std::size_t kernel_elements(const BlockSpec& spec);

Shape4 block_output_shape(const BlockSpec& spec, const Shape4& in);

enum class LayerKind { Conv, TransposedConv, BatchNorm, Relu };

struct LayerPlan {
    LayerKind kind = LayerKind::Relu;
    ConvGeometry geom{};
    std::array<std::size_t, 2> output_padding{0, 0};
    std::size_t weight = kNoParam;
    std::size_t bias = kNoParam;
    std::size_t gamma = kNoParam;
    std::size_t beta = kNoParam;
    std::size_t mean = kNoParam;
    std::size_t var = kNoParam;
};

using Chain = std::vector<LayerPlan>;

/// Chains per kind:
///   Downsample: [conv s2], [BN, ReLU] applied after concat with max-pool
///   Upsample:   [tconv, BN, ReLU] or [tconv + bias]
///   FCU/NonBt1D/NonBottleneck/Bottleneck: [residual path]
///   PFCU:       [shared transform], [branch 1], [branch 2], [branch 3]
struct BlockPlan {
    BlockSpec spec;
    std::string name;
    std::vector<Chain> chains;
};

/// Registers the block's parameters under "<prefix>." and returns its plan.
BlockPlan compile_block(const BlockSpec& spec, const std::string& prefix, ParamLayout& layout);

template <typename T>
struct ChainCache {
    std::vector<Tensor4<T>> inputs;  // input of each layer
    std::vector<std::optional<BatchNormCache<T>>> bn;
    Tensor4<T> output;
};

template <typename T>
struct BlockCache {
    Shape4 input_shape{};
    std::vector<ChainCache<T>> chains;
    std::vector<std::uint32_t> pool_argmax;
    Tensor4<T> output;  // post-ReLU output where the block ends in a ReLU
};

/// Runs a block. In train mode BN uses batch statistics and, when `cache`
/// is non-null, everything the backward needs is recorded there. Running
/// statistics are not touched; see apply_running_stats.
template <typename T>
Tensor4<T> block_forward(const BlockPlan& plan, const ParamStore<T>& params, const Tensor4<T>& x, Mode mode,
                         BlockCache<T>* cache = nullptr);

/// Accumulates parameter gradients into `grads` and returns dx (empty when
/// need_dx is false).
template <typename T>
Tensor4<T> block_backward(const BlockPlan& plan, const ParamStore<T>& params, const BlockCache<T>& cache,
                          const Tensor4<T>& dy, Gradients<T>& grads, bool need_dx = true);

/// Folds the batch statistics recorded in a train-mode cache into the
/// running mean/variance of every BN in the block.
template <typename T>
void apply_running_stats(const BlockPlan& plan, ParamStore<T>& params, const BlockCache<T>& cache,
                         T momentum = T(0.1));

/// Folds which linear piece the recorded forward ran on (every ReLU's
/// active set and every max-pool choice) into the FNV-1a hash `h`.
template <typename T>
void hash_activation_pattern(const BlockPlan& plan, const BlockCache<T>& cache, std::uint64_t& h);

/// A standalone block with its own parameters, for unit-level use.
template <typename T>
struct StandaloneBlock {
    BlockPlan plan;
    ParamStore<T> params;

    explicit StandaloneBlock(const BlockSpec& spec, const std::string& prefix = "block");
    Tensor4<T> forward(const Tensor4<T>& x, Mode mode = Mode::Infer) const {
        return block_forward(plan, params, x, mode);
    }
};

inline constexpr double kBnEps = 1e-5;

}  // namespace esnet
