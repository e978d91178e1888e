#pragma once

// Complexity arithmetic over network specs. Nothing here allocates tensors.
//
// Two different "size" measures live side by side:
//   * kernel accounting multiplies layers x channels x kernel elements per
//     residual run; it ignores the channel-squared factor, norms and biases
//     and is only meaningful as a relative comparison between designs;
//   * the learnable count is the exact number of trainable scalars.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "esnet/network.hpp"

namespace esnet {

struct AccountingRow {
    std::string stage_name;  // row group of the first block in the run
    BlockKind block_kind;
    std::size_t layers;
    std::size_t channels;
    std::size_t kernel_elems;
    std::uint64_t product;
};

struct AccountingReport {
    std::vector<AccountingRow> rows;
    std::uint64_t total = 0;
    std::optional<std::uint64_t> published_total;
    std::vector<std::string> excluded_stages;  // resampling units

    /// True when there is no published figure or it equals the computed sum.
    bool consistent() const { return !published_total || *published_total == total; }
};

/// Groups consecutive residual units with the same kind, channel count and
/// kernel-element count into rows.
AccountingReport kernel_accounting(const NetworkSpec& spec);

/// 100 * (1 - a / b). Throws when b == 0.
double reduction_ratio(std::uint64_t a_total, std::uint64_t b_total);
/// One decimal, e.g. "13.5%".
std::string format_percent(double pct);

struct StageCount {
    std::string stage;
    std::uint64_t count;
};

struct ParamCountReport {
    std::vector<StageCount> per_stage;
    std::uint64_t total = 0;
};

/// Learnable scalars (conv weights and biases, BN gamma and beta); running
/// statistics excluded.
ParamCountReport learnable_param_count(const NetworkSpec& spec);
ParamCountReport learnable_param_count(const NetworkPlan& plan);

struct RFEntry {
    std::size_t layer;
    std::string stage;
    std::size_t rf_h;
    std::size_t rf_w;
    std::size_t jump;                      // input pixels between adjacent outputs
    std::vector<std::size_t> branch_rf;    // per-branch RF (height axis) for PFCU

    std::size_t rf() const { return rf_h > rf_w ? rf_h : rf_w; }
};

/// Receptive field (per axis) and jump, the input-pixel distance between
/// adjacent outputs.
struct RFState {
    std::size_t h = 1;
    std::size_t w = 1;
    std::size_t jump = 1;
};

/// RF_l = RF_{l-1} + (eK - 1) * jump_{l-1}; jump_l = jump_{l-1} * stride.
RFState rf_through_conv(RFState rf, std::size_t kh, std::size_t kw, const ConvGeometry& g);
/// A stride-s transposed convolution: (ceil(k / s) - 1) * jump, jump / s.
RFState rf_through_transposed(RFState rf, std::size_t k, std::size_t stride);

/// Theoretical receptive field after each layer, tracked per axis.
/// A convolution grows the RF by (effective extent - 1) * jump on its axis
/// and multiplies jump by its stride; a stride-s transposed convolution
/// grows it by (ceil(k / s) - 1) * jump and divides jump by s. Parallel
/// paths merge by taking the maximum.
std::vector<RFEntry> receptive_field(const NetworkSpec& spec);

struct LayerMacs {
    std::size_t layer;
    std::string stage;
    std::uint64_t macs;
};

struct MacReport {
    std::vector<LayerMacs> per_layer;
    std::uint64_t total = 0;
};

/// Multiply-accumulates per batch element: sum over convolutions of
/// H' * W' * C_out * C_in * kH * kW (transposed convolutions counted on
/// their input grid).
MacReport flop_count(const NetworkSpec& spec, InputDims input);

/// H' * W' * C_out * C_in * kH * kW for one convolution.
std::uint64_t conv_macs(const Shape4& out, const Shape4& weight);

// Text output -------------------------------------------------------------

std::string format_shape_table(const std::vector<TraceEntry>& trace);
std::string format_accounting_table(const AccountingReport& report);
std::string format_param_table(const ParamCountReport& report);
std::string format_rf_table(const std::vector<RFEntry>& rf);
std::string format_mac_table(const MacReport& report);

/// "H x W x C", e.g. "512 x 256 x 16".
std::string format_hwc(const Shape4& s);
/// Integer with thousands separators, e.g. "15,296".
std::string format_count(std::uint64_t v);

/// Header line plus one comma-separated line per row, LF terminated.
std::string accounting_csv(const AccountingReport& report);

}  // namespace esnet
