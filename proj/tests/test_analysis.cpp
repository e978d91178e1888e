#include "doctest.h"
#include "esnet/analysis.hpp"
#include "golden.hpp"
#include "support.hpp"

using namespace esnet;
using namespace esnet::test;

namespace {

ConvGeometry geom(std::size_t dh, std::size_t dw, std::size_t stride = 1) {
    ConvGeometry g;
    g.stride = {stride, stride};
    g.dilation = {dh, dw};
    return g;
}

// The two convolutions of one dilated pair: 3x1 then 1x3, both at rate r.
RFState through_pair(RFState s, std::size_t r) {
    s = rf_through_conv(s, 3, 1, geom(r, 1));
    return rf_through_conv(s, 1, 3, geom(1, r));
}

std::size_t first_pfcu(const NetworkSpec& spec) {
    for (std::size_t i = 0; i < spec.stages.size(); ++i)
        if (spec.stages[i].block.kind == BlockKind::PFCU) return i;
    FAIL("no PFCU stage");
    return 0;
}

}  // namespace

TEST_SUITE("analysis: kernel accounting") {
    TEST_CASE("ESNet rows and total") {
        const AccountingReport r = kernel_accounting(build_esnet(20));
        REQUIRE(r.rows.size() == 5);
        const std::vector<std::uint64_t> products{576, 2560, 9216, 2560, 384};
        const std::vector<std::size_t> layers{3, 2, 3, 2, 2}, channels{16, 64, 128, 64, 16}, elems{12, 20, 24, 20, 12};
        for (std::size_t i = 0; i < 5; ++i) {
            CAPTURE(i);
            CHECK(r.rows[i].layers == layers[i]);
            CHECK(r.rows[i].channels == channels[i]);
            CHECK(r.rows[i].kernel_elems == elems[i]);
            CHECK(r.rows[i].product == products[i]);
        }
        CHECK(r.rows[0].stage_name == "Block 1");
        CHECK(r.rows[2].block_kind == BlockKind::PFCU);
        CHECK(r.total == 15296);
        CHECK(r.consistent());
        CHECK(r.excluded_stages.size() == 6);
    }

    TEST_CASE("reference rows, total and flagged published total") {
        const AccountingReport r = kernel_accounting(build_erfnet_reference());
        REQUIRE(r.rows.size() == 4);
        CHECK(r.rows[1].product == 12288);
        CHECK(r.rows[1].layers == 8);
        CHECK(r.total == 18048);
        REQUIRE(r.published_total.has_value());
        CHECK(*r.published_total == 17688);
        CHECK_FALSE(r.consistent());
        const std::string table = format_accounting_table(r);
        CHECK(table.find("18,048") != std::string::npos);
        CHECK(table.find("17,688") != std::string::npos);
        CHECK(table.find("MISMATCH: 360") != std::string::npos);
    }

    TEST_CASE("reduction ratios") {
        CHECK(format_percent(reduction_ratio(15296, 17688)) == "13.5%");
        CHECK(format_percent(reduction_ratio(15296, 18048)) == "15.2%");
        CHECK(format_percent(reduction_ratio(15296, 15296)) == "0.0%");
        CHECK(reduction_ratio(15296, 17688) == doctest::Approx(100.0 * 2392 / 17688));
        CHECK_THROWS(reduction_ratio(1, 0));
    }

    TEST_CASE("no published total means consistent") {
        NetworkSpec spec = build_esnet(20);
        spec.published_accounting_total.reset();
        CHECK(kernel_accounting(spec).consistent());
        spec.published_accounting_total = 1;
        CHECK_FALSE(kernel_accounting(spec).consistent());
    }

    TEST_CASE("product is layers x channels x kernel elements on random widths") {
        Gen gen(301);
        for (int t = 0; t < kPropertyCases; ++t) {
            const std::size_t a = gen.range(4, 20), b = a + gen.range(1, 20), c = b + gen.range(1, 20);
            const AccountingReport r = kernel_accounting(build_esnet_scaled(5, {a, b, c}, {3, 64, 64}));
            std::uint64_t sum = 0;
            for (const AccountingRow& row : r.rows) {
                CHECK(row.product == row.layers * row.channels * row.kernel_elems);
                sum += row.product;
            }
            CHECK(r.total == sum);
            CHECK(r.total == 12 * (3 * a + 2 * a) + 20 * (2 * b + 2 * b) + 24 * 3 * c);
        }
    }

    TEST_CASE("CSV") {
        const std::string csv = accounting_csv(kernel_accounting(build_esnet(20)));
        CHECK(csv.rfind("stage,block_kind,layers,channels,kernel_elems,product\n", 0) == 0);
        CHECK(csv.find("Block 3,") != std::string::npos);
        CHECK(csv.find(",3,128,24,9216\n") != std::string::npos);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 6);
        CHECK(csv.find('\r') == std::string::npos);
    }

    TEST_CASE("formatting helpers") {
        CHECK(format_count(15296) == "15,296");
        CHECK(format_count(999) == "999");
        CHECK(format_count(1000000) == "1,000,000");
        CHECK(format_hwc({1, 16, 512, 256}) == "512 x 256 x 16");
    }
}

TEST_SUITE("analysis: parameters") {
    TEST_CASE("learnable count matches the independent reference") {
        const ParamCountReport r = learnable_param_count(build_esnet(20));
        CHECK(r.total == golden::esnet_learnable_params);
        CHECK(r.total == 1659859);
        CHECK(r.total >= 1490000);
        CHECK(r.total <= 1830000);
        std::uint64_t sum = 0;
        for (const StageCount& s : r.per_stage) sum += s.count;
        CHECK(sum == r.total);
        CHECK(r.per_stage.size() == 18);
    }

    TEST_CASE("count agrees with an instantiated store and is unchanged by a forward pass") {
        const NetworkSpec spec = build_esnet_scaled(4, {4, 8, 16}, {3, 16, 16});
        Network<float> net(spec, 3);
        const std::uint64_t before = net.params.learnable_count();
        CHECK(before == learnable_param_count(spec).total);
        CHECK(before == learnable_param_count(net.plan).total);
        Gen gen(302);
        Tape<float> tape;
        (void)net.forward(gen.tensor({2, 3, 16, 16}).cast<float>(), Mode::Train, &tape);
        apply_running_stats(net.plan, net.params, tape);
        CHECK(net.params.learnable_count() == before);
    }

    TEST_CASE("single convolution with bias") {
        ParamLayout layout;
        layout.add({"c.weight", ParamRole::ConvWeight, {1, 1, 1, 1}, 4, 1});
        layout.add({"c.bias", ParamRole::ConvBias, {1, 1, 1, 1}, 1, 1});
        const ParamStore<float> store(layout);
        CHECK(store.learnable_count() == 2);
    }
}

TEST_SUITE("analysis: receptive field") {
    TEST_CASE("single convolutions") {
        RFState s = rf_through_conv({}, 3, 3, geom(1, 1));
        CHECK(s.h == 3);
        CHECK(s.w == 3);
        s = rf_through_conv({}, 3, 3, geom(2, 2));
        CHECK(s.h == 5);
        s = rf_through_conv({}, 3, 3, geom(1, 1, 2));
        CHECK(s.jump == 2);
        s = rf_through_conv(s, 3, 3, geom(1, 1));
        CHECK(s.h == 7);
        const RFState t = rf_through_transposed(s, 3, 2);
        CHECK(t.jump == 1);
        CHECK(t.h == 7 + 2);
    }

    TEST_CASE("dilated pair growth at jump 8") {
        const RFState base{1, 1, 8};
        for (std::size_t r : {2, 5, 9}) {
            const RFState s = through_pair(base, r);
            CAPTURE(r);
            // Each axis sees one 3-tap kernel at rate r.
            CHECK(s.h - base.h == 2 * r * 8);
            CHECK(s.w - base.w == 2 * r * 8);
        }
        // Summed over both axes: 288 for rate 9 and 64 for rate 2.
        const RFState r9 = through_pair(base, 9), r2 = through_pair(base, 2);
        CHECK((r9.h - 1) + (r9.w - 1) == 288);
        CHECK((r2.h - 1) + (r2.w - 1) == 64);
    }

    TEST_CASE("ESNet: branches ordered, RF monotone") {
        const NetworkSpec spec = build_esnet(20);
        const auto rf = receptive_field(spec);
        REQUIRE(rf.size() == 18);
        for (std::size_t i = 1; i < rf.size(); ++i) {
            CAPTURE(i);
            CHECK(rf[i].rf_h >= rf[i - 1].rf_h);
            CHECK(rf[i].rf_w >= rf[i - 1].rf_w);
        }
        for (const RFEntry& e : rf) {
            if (spec.stages[e.layer - 1].block.kind != BlockKind::PFCU) continue;
            REQUIRE(e.branch_rf.size() == 3);
            CHECK(e.branch_rf[2] > e.branch_rf[1]);
            CHECK(e.branch_rf[1] > e.branch_rf[0]);
            CHECK(e.jump == 8);
            CHECK(e.branch_rf[2] - e.branch_rf[0] == (9 - 2) * 2 * 8);
        }
        CHECK(rf.back().rf() == 677);
    }

    TEST_CASE("raising one dilation rate widens only that branch") {
        const NetworkSpec spec = build_esnet(20);
        const std::size_t k = first_pfcu(spec);
        const auto base = receptive_field(spec)[k].branch_rf;
        Gen gen(303);
        for (int t = 0; t < kPropertyCases; ++t) {
            NetworkSpec s = spec;
            const std::size_t i = gen.range(0, 2);
            s.stages[k].block.rates[i] += gen.range(1, 3);
            const auto br = receptive_field(s)[k].branch_rf;
            for (std::size_t j = 0; j < 3; ++j) {
                if (j == i) CHECK(br[j] > base[j]);
                else CHECK(br[j] == base[j]);
            }
        }
    }

    TEST_CASE("table text") {
        const std::string t = format_rf_table(receptive_field(build_esnet(20)));
        CHECK(t.find("branch rf") != std::string::npos);
        CHECK(t.find("677") != std::string::npos);
    }
}

TEST_SUITE("analysis: MACs") {
    TEST_CASE("single convolution examples") {
        CHECK(conv_macs({1, 1, 4, 4}, {1, 1, 1, 1}) == 16);
        CHECK(conv_macs({1, 16, 32, 32}, {16, 16, 3, 3}) == 32ull * 32 * 16 * 16 * 9);
        CHECK(conv_macs({1, 16, 32, 32}, {16, 16, 3, 3}) == 2359296);
        CHECK(conv_macs({1, 1, 16, 16}, {1, 64, 3, 3}) == 147456);
    }

    TEST_CASE("ESNet total matches the independent reference") {
        const MacReport m = flop_count(build_esnet(20), {3, 1024, 512});
        CHECK(m.total == golden::esnet_macs_1024x512);
        CHECK(m.per_layer.size() == 18);
        std::uint64_t sum = 0;
        for (const LayerMacs& l : m.per_layer) sum += l.macs;
        CHECK(sum == m.total);
    }

    TEST_CASE("factorized unit cost is linear in K") {
        const MacReport m = flop_count(build_esnet(20), {3, 1024, 512});
        // Four 1-D convolutions of K taps each.
        CHECK(m.per_layer[1].macs == 512ull * 256 * 16 * 16 * 4 * 3);
        CHECK(m.per_layer[5].macs == 256ull * 128 * 64 * 64 * 4 * 5);
        NetworkSpec k3 = build_esnet(20);
        k3.stages[5].block.K = 3;
        CHECK(flop_count(k3, {3, 1024, 512}).per_layer[5].macs * 5 == m.per_layer[5].macs * 3);
    }

    TEST_CASE("linear in H x W") {
        Gen gen(304);
        const NetworkSpec spec = build_esnet(20);
        const std::uint64_t unit = flop_count(spec, {3, 8, 8}).total;
        for (int t = 0; t < 10; ++t) {
            const std::size_t h = 8 * gen.range(1, 40), w = 8 * gen.range(1, 40);
            CHECK(flop_count(spec, {3, h, w}).total * 64 == unit * h * w);
        }
    }
}
