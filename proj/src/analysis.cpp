#include "esnet/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace esnet {

AccountingReport kernel_accounting(const NetworkSpec& spec) {
    AccountingReport r;
    r.published_total = spec.published_accounting_total;
    bool open = false;  // whether the last row may be extended
    for (const StageSpec& s : spec.stages) {
        const BlockSpec& b = s.block;
        if (!is_residual(b.kind)) {
            r.excluded_stages.push_back(s.name);
            open = false;
            continue;
        }
        const std::size_t ke = kernel_elements(b);
        if (open) {
            AccountingRow& last = r.rows.back();
            if (last.block_kind == b.kind && last.channels == b.channels_in && last.kernel_elems == ke) {
                ++last.layers;
                continue;
            }
        }
        r.rows.push_back({s.group, b.kind, 1, b.channels_in, ke, 0});
        open = true;
    }
    for (AccountingRow& row : r.rows) {
        row.product = static_cast<std::uint64_t>(row.layers) * row.channels * row.kernel_elems;
        r.total += row.product;
    }
    return r;
}

double reduction_ratio(std::uint64_t a_total, std::uint64_t b_total) {
    if (b_total == 0) throw PreconditionError("reduction_ratio: reference total must be positive");
    return 100.0 * (1.0 - static_cast<double>(a_total) / static_cast<double>(b_total));
}

std::string format_percent(double pct) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(1) << pct << '%';
    return os.str();
}

ParamCountReport learnable_param_count(const NetworkPlan& plan) {
    ParamCountReport r;
    for (const BlockPlan& b : plan.blocks) r.per_stage.push_back({b.name, 0});
    const std::vector<ParamInfo>& entries = plan.layout.entries();
    std::size_t stage = 0;
    for (const ParamInfo& p : entries) {
        if (!p.learnable()) continue;
        // Layout order follows block order, so a forward scan finds the owner.
        while (stage < r.per_stage.size() &&
               p.name.compare(0, r.per_stage[stage].stage.size() + 1, r.per_stage[stage].stage + ".") != 0) {
            ++stage;
        }
        if (stage == r.per_stage.size()) throw std::logic_error("parameter outside any stage: " + p.name);
        r.per_stage[stage].count += p.shape.numel();
        r.total += p.shape.numel();
    }
    return r;
}

ParamCountReport learnable_param_count(const NetworkSpec& spec) { return learnable_param_count(compile(spec)); }

RFState rf_through_conv(RFState rf, std::size_t kh, std::size_t kw, const ConvGeometry& g) {
    rf.h += (effective_extent(kh, g.dilation[0]) - 1) * rf.jump;
    rf.w += (effective_extent(kw, g.dilation[1]) - 1) * rf.jump;
    rf.jump *= g.stride[0];
    return rf;
}

RFState rf_through_transposed(RFState rf, std::size_t k, std::size_t stride) {
    const std::size_t taps = (k + stride - 1) / stride;
    rf.h += (taps - 1) * rf.jump;
    rf.w += (taps - 1) * rf.jump;
    rf.jump = std::max<std::size_t>(1, rf.jump / stride);
    return rf;
}

std::uint64_t conv_macs(const Shape4& out, const Shape4& weight) {
    return static_cast<std::uint64_t>(out.h) * out.w * weight.n * weight.c * weight.h * weight.w;
}

namespace {

using RF = RFState;

RF through_conv(RF rf, std::size_t kh, std::size_t kw, const ConvGeometry& g) { return rf_through_conv(rf, kh, kw, g); }
RF through_tconv(RF rf, std::size_t k, std::size_t stride) { return rf_through_transposed(rf, k, stride); }

RF through_chain(RF rf, const Chain& chain, const ParamLayout& layout) {
    for (const LayerPlan& l : chain) {
        if (l.kind == LayerKind::Conv) {
            const Shape4& w = layout[l.weight].shape;
            rf = through_conv(rf, w.h, w.w, l.geom);
        } else if (l.kind == LayerKind::TransposedConv) {
            rf = through_tconv(rf, layout[l.weight].shape.h, l.geom.stride[0]);
        }
    }
    return rf;
}

RF merge(RF a, const RF& b) {
    a.h = std::max(a.h, b.h);
    a.w = std::max(a.w, b.w);
    return a;
}

}  // namespace

std::vector<RFEntry> receptive_field(const NetworkSpec& spec) {
    const NetworkPlan plan = compile(spec);
    std::vector<RFEntry> out;
    RF rf;
    for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
        const BlockPlan& b = plan.blocks[i];
        std::vector<std::size_t> branches;
        switch (b.spec.kind) {
            case BlockKind::Downsample: {
                RF conv = through_chain(rf, b.chains[0], plan.layout);
                RF pool = rf;
                pool.h += rf.jump;  // 2x2 window
                pool.w += rf.jump;
                rf = merge(conv, pool);
                rf.jump = conv.jump;
                break;
            }
            case BlockKind::PFCU: {
                const RF shared = through_chain(rf, b.chains[0], plan.layout);
                RF merged = rf;  // identity path
                for (std::size_t c = 1; c < b.chains.size(); ++c) {
                    const RF br = through_chain(shared, b.chains[c], plan.layout);
                    branches.push_back(br.h);
                    merged = merge(merged, br);
                }
                rf = merged;
                break;
            }
            case BlockKind::Upsample: rf = through_chain(rf, b.chains[0], plan.layout); break;
            default: rf = merge(rf, through_chain(rf, b.chains[0], plan.layout)); break;
        }
        out.push_back({i + 1, b.name, rf.h, rf.w, rf.jump, std::move(branches)});
    }
    return out;
}

namespace {

std::uint64_t chain_macs(const Chain& chain, const ParamLayout& layout, Shape4& s) {
    std::uint64_t macs = 0;
    for (const LayerPlan& l : chain) {
        if (l.kind == LayerKind::Conv) {
            const Shape4& w = layout[l.weight].shape;
            const Shape4 out = conv2d_output_shape(s, w, l.geom);
            macs += conv_macs(out, w);
            s = out;
        } else if (l.kind == LayerKind::TransposedConv) {
            const Shape4& w = layout[l.weight].shape;
            macs += static_cast<std::uint64_t>(s.h) * s.w * w.n * w.c * w.h * w.w;
            s = {s.n,
                 w.c,
                 transposed_out_extent(s.h, w.h, l.geom.stride[0], l.geom.dilation[0], l.geom.padding[0],
                                       l.output_padding[0]),
                 transposed_out_extent(s.w, w.w, l.geom.stride[1], l.geom.dilation[1], l.geom.padding[1],
                                       l.output_padding[1])};
        }
    }
    return macs;
}

}  // namespace

MacReport flop_count(const NetworkSpec& spec, InputDims input) {
    const NetworkPlan plan = compile(spec);
    Shape4 s{1, input[0], input[1], input[2]};
    check_input(spec, s);
    MacReport r;
    for (std::size_t i = 0; i < plan.blocks.size(); ++i) {
        const BlockPlan& b = plan.blocks[i];
        std::uint64_t macs = 0;
        if (b.spec.kind == BlockKind::PFCU) {
            Shape4 t = s;
            macs += chain_macs(b.chains[0], plan.layout, t);
            for (std::size_t c = 1; c < b.chains.size(); ++c) {
                Shape4 u = t;
                macs += chain_macs(b.chains[c], plan.layout, u);
            }
        } else {
            Shape4 t = s;
            macs += chain_macs(b.chains[0], plan.layout, t);
        }
        s = block_output_shape(b.spec, s);
        r.per_layer.push_back({i + 1, b.name, macs});
        r.total += macs;
    }
    return r;
}

// ---------------------------------------------------------------------------

std::string format_hwc(const Shape4& s) {
    return std::to_string(s.h) + " x " + std::to_string(s.w) + " x " + std::to_string(s.c);
}

std::string format_count(std::uint64_t v) {
    std::string digits = std::to_string(v);
    std::string out;
    const std::size_t lead = digits.size() % 3;
    for (std::size_t i = 0; i < digits.size(); ++i) {
        if (i != 0 && i >= lead && (i - lead) % 3 == 0) out.push_back(',');
        out.push_back(digits[i]);
    }
    return out;
}

namespace {

// Left-aligned columns padded to the widest cell.
std::string render(const std::vector<std::vector<std::string>>& rows) {
    std::vector<std::size_t> width;
    for (const auto& r : rows) {
        width.resize(std::max(width.size(), r.size()), 0);
        for (std::size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
    }
    std::ostringstream os;
    for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto& r = rows[k];
        for (std::size_t i = 0; i < r.size(); ++i) {
            os << r[i];
            if (i + 1 < r.size()) os << std::string(width[i] - r[i].size() + 2, ' ');
        }
        os << '\n';
        if (k == 0) {
            std::size_t total = 0;
            for (std::size_t i = 0; i < width.size(); ++i) total += width[i] + (i + 1 < width.size() ? 2 : 0);
            os << std::string(total, '-') << '\n';
        }
    }
    return os.str();
}

std::string kind_label(const BlockSpec& b) {
    switch (b.kind) {
        case BlockKind::FCU: return "FCU(K=" + std::to_string(b.K) + ")";
        case BlockKind::PFCU: {
            std::string s = "PFCU(r=";
            for (std::size_t i = 0; i < b.rates.size(); ++i) s += (i ? "," : "") + std::to_string(b.rates[i]);
            return s + ")";
        }
        case BlockKind::NonBt1D:
            return b.dilation == 1 ? "Non-bt-1D" : "Non-bt-1D(d=" + std::to_string(b.dilation) + ")";
        case BlockKind::NonBottleneck: return "Non-bottleneck";
        case BlockKind::Bottleneck: return "Bottleneck";
        case BlockKind::Downsample: return "Down-sampling";
        case BlockKind::Upsample: return b.full_conv ? "Up-sampling (full conv)" : "Up-sampling";
    }
    return "?";
}

}  // namespace

std::string format_shape_table(const std::vector<TraceEntry>& trace) {
    std::vector<std::vector<std::string>> rows{{"layer", "group", "stage", "size (H x W x C)"}};
    for (const TraceEntry& e : trace) rows.push_back({std::to_string(e.layer), e.group, e.stage, format_hwc(e.dims)});
    return render(rows);
}

std::string format_accounting_table(const AccountingReport& report) {
    std::vector<std::vector<std::string>> rows{{"group", "type", "size", "product"}};
    for (const AccountingRow& r : report.rows) {
        BlockSpec b;
        b.kind = r.block_kind;
        b.K = r.block_kind == BlockKind::FCU ? r.kernel_elems / 4 : 3;
        const std::string type = r.block_kind == BlockKind::PFCU ? "PFCU" : kind_label(b);
        rows.push_back({r.stage_name, type,
                        std::to_string(r.layers) + " x " + std::to_string(r.channels) + " x " +
                            std::to_string(r.kernel_elems),
                        format_count(r.product)});
    }
    std::string out = render(rows);
    out += "computed total: " + format_count(report.total) + "\n";
    if (report.published_total) {
        out += "published total: " + format_count(*report.published_total);
        if (report.consistent()) {
            out += " (matches)\n";
        } else {
            const std::uint64_t p = *report.published_total;
            const std::uint64_t diff = p > report.total ? p - report.total : report.total - p;
            out += " (MISMATCH: " + format_count(diff) + (p < report.total ? " below" : " above") +
                   " the row sum)\n";
        }
    }
    if (!report.excluded_stages.empty()) {
        out += "excluded (resampling units): " + std::to_string(report.excluded_stages.size()) + " stages\n";
    }
    return out;
}

std::string format_param_table(const ParamCountReport& report) {
    std::vector<std::vector<std::string>> rows{{"stage", "learnable"}};
    for (const StageCount& s : report.per_stage) rows.push_back({s.stage, format_count(s.count)});
    rows.push_back({"total", format_count(report.total)});
    return render(rows);
}

std::string format_rf_table(const std::vector<RFEntry>& rf) {
    std::vector<std::vector<std::string>> rows{{"layer", "stage", "rf_h", "rf_w", "jump", "branch rf"}};
    for (const RFEntry& e : rf) {
        std::string br;
        for (std::size_t i = 0; i < e.branch_rf.size(); ++i) br += (i ? "/" : "") + std::to_string(e.branch_rf[i]);
        rows.push_back({std::to_string(e.layer), e.stage, std::to_string(e.rf_h), std::to_string(e.rf_w),
                        std::to_string(e.jump), br});
    }
    return render(rows);
}

std::string format_mac_table(const MacReport& report) {
    std::vector<std::vector<std::string>> rows{{"layer", "stage", "MACs"}};
    for (const LayerMacs& l : report.per_layer) rows.push_back({std::to_string(l.layer), l.stage, format_count(l.macs)});
    rows.push_back({"", "total", format_count(report.total)});
    return render(rows);
}

std::string accounting_csv(const AccountingReport& report) {
    std::string out = "stage,block_kind,layers,channels,kernel_elems,product\n";
    for (const AccountingRow& r : report.rows) {
        out += r.stage_name + "," + block_kind_name(r.block_kind) + "," + std::to_string(r.layers) + "," +
               std::to_string(r.channels) + "," + std::to_string(r.kernel_elems) + "," + std::to_string(r.product) +
               "\n";
    }
    return out;
}

}  // namespace esnet
