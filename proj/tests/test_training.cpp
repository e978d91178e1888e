#include <algorithm>
#include <numeric>

#include "doctest.h"
#include "esnet/training.hpp"
#include "support.hpp"

using namespace esnet;
using namespace esnet::test;

namespace {

// One conv weight, one BN gamma and one running mean, all scalars.
ParamLayout scalar_layout() {
    ParamLayout layout;
    layout.add({"c.weight", ParamRole::ConvWeight, {1, 1, 1, 1}, 4, 1});
    layout.add({"bn.gamma", ParamRole::BnGamma, {1, 1, 1, 1}, 1, 0});
    layout.add({"bn.running_mean", ParamRole::BnRunningMean, {1, 1, 1, 1}, 1, 0});
    return layout;
}

OptimizerConfig plain(double momentum, double wd, OptimizerKind kind = OptimizerKind::Sgd) {
    OptimizerConfig c;
    c.kind = kind;
    c.momentum = momentum;
    c.weight_decay = wd;
    c.max_iter = 10;
    return c;
}

LabelMap labels_from(std::size_t h, std::size_t w, std::vector<int> v) {
    LabelMap m(1, h, w);
    m.data = std::move(v);
    return m;
}

}  // namespace

TEST_SUITE("training: schedule") {
    TEST_CASE("poly examples") {
        OptimizerConfig c;
        c.max_iter = 1000;
        CHECK(poly_lr(0, c) == 5e-4);
        CHECK(poly_lr(1000, c) == 0.0);
        CHECK(poly_lr(500, c) == doctest::Approx(2.6795e-4).epsilon(1e-4));
        CHECK(poly_lr(500, c) == doctest::Approx(5e-4 * std::pow(0.5, 0.9)).epsilon(1e-15));
        CHECK_THROWS_AS(poly_lr(1001, c), PreconditionError);
        c.max_iter = 0;
        CHECK_THROWS_AS(poly_lr(0, c), PreconditionError);
    }

    TEST_CASE("strictly decreasing and continuous") {
        Gen gen(401);
        for (int t = 0; t < kPropertyCases; ++t) {
            OptimizerConfig c;
            c.max_iter = gen.range(2, 100000);
            c.power = gen.real(0.1, 3.0);
            double prev = poly_lr(0, c);
            for (std::size_t i = 1; i < std::min<std::size_t>(c.max_iter, 500); ++i) {
                const double lr = poly_lr(i, c);
                CHECK(lr < prev);
                prev = lr;
            }
            // Adjacent rates differ by at most base * max(1, p) / M^min(1, p).
            const std::size_t i = gen.range(0, c.max_iter - 1);
            CHECK(poly_lr(i, c) - poly_lr(i + 1, c) <= c.base_lr * std::max(1.0, c.power) *
                                                           std::pow(1.0 / static_cast<double>(c.max_iter),
                                                                    std::min(1.0, c.power)) + 1e-18);
        }
    }
}

TEST_SUITE("training: update rules") {
    TEST_CASE("sgd: single step 1 -> 0.9") {
        const ParamLayout layout = scalar_layout();
        ParamStore<double> p(layout);
        p[0][0] = 1.0;
        Gradients<double> g(layout);
        g[0][0] = 1.0;
        OptimizerState<double> s(layout, plain(0.0, 0.0));
        sgd_apply(p, g, s, 0.1);
        CHECK(p[0][0] == doctest::Approx(0.9).epsilon(1e-15));
        CHECK(s.updates == 1);
    }

    TEST_CASE("sgd: two momentum steps") {
        const ParamLayout layout = scalar_layout();
        ParamStore<double> p(layout);
        p[0][0] = 1.0;
        Gradients<double> g(layout);
        g[0][0] = 1.0;
        OptimizerState<double> s(layout, plain(0.9, 0.0));
        sgd_apply(p, g, s, 0.1);
        CHECK(s.velocity[0][0] == doctest::Approx(1.0));
        CHECK(p[0][0] == doctest::Approx(0.9).epsilon(1e-15));
        sgd_apply(p, g, s, 0.1);
        CHECK(s.velocity[0][0] == doctest::Approx(1.9).epsilon(1e-15));
        CHECK(p[0][0] == doctest::Approx(0.71).epsilon(1e-15));
    }

    TEST_CASE("sgd: weight decay on conv parameters only, running stats untouched") {
        const ParamLayout layout = scalar_layout();
        ParamStore<double> p(layout);
        p[0][0] = 2.0;
        p[1][0] = 2.0;
        p[2][0] = 2.0;
        Gradients<double> g(layout);
        OptimizerState<double> s(layout, plain(0.0, 0.5));
        sgd_apply(p, g, s, 0.1);
        CHECK(p[0][0] == doctest::Approx(2.0 - 0.1 * 0.5 * 2.0));
        CHECK(p[1][0] == 2.0);
        CHECK(p[2][0] == 2.0);
    }

    TEST_CASE("sgd: zero grads, momentum and decay leave parameters unchanged") {
        const NetworkSpec spec = build_esnet_scaled(3, {4, 6, 8}, {3, 16, 16});
        Network<double> net(spec, 9);
        const ParamStore<double> before = net.params;
        Gradients<double> g(net.plan.layout);
        OptimizerState<double> s(net.plan.layout, plain(0.0, 0.0));
        sgd_step(net.params, g, s, 3);
        CHECK(net.params == before);
    }

    TEST_CASE("sgd: lr 0 is the identity for any gradient") {
        const NetworkSpec spec = build_esnet_scaled(3, {4, 6, 8}, {3, 16, 16});
        Network<double> net(spec, 9);
        const ParamStore<double> before = net.params;
        Gen gen(402);
        OptimizerState<double> s(net.plan.layout, plain(0.9, 1e-4));
        for (int t = 0; t < 5; ++t) {
            Gradients<double> g(net.plan.layout);
            for (auto& v : g.values)
                for (double& x : v.values()) x = gen.real(-10, 10);
            sgd_apply(net.params, g, s, 0.0);
            CHECK(net.params == before);
        }
        // The last poly step has lr 0 too.
        Gradients<double> g(net.plan.layout);
        for (auto& v : g.values) v.fill(1.0);
        CHECK(sgd_step(net.params, g, s, s.config.max_iter) == 0.0);
        CHECK(net.params == before);
    }

    TEST_CASE("sgd: shape mismatch rejected") {
        const ParamLayout layout = scalar_layout();
        ParamStore<double> p(layout);
        Gradients<double> g(layout);
        g[0] = Tensor4d(Shape4{2, 1, 1, 1});
        OptimizerState<double> s(layout, plain(0.9, 0.0));
        CHECK_THROWS_AS(sgd_apply(p, g, s, 0.1), ShapeError);
    }

    TEST_CASE("adam: first step moves by lr in the gradient sign") {
        const ParamLayout layout = scalar_layout();
        ParamStore<double> p(layout);
        p[0][0] = 1.0;
        p[1][0] = 1.0;
        Gradients<double> g(layout);
        g[0][0] = 3.0;
        g[1][0] = -0.25;
        OptimizerState<double> s(layout, plain(0.9, 0.0, OptimizerKind::Adam));
        adam_apply(p, g, s, 0.1);
        CHECK(p[0][0] == doctest::Approx(0.9).epsilon(1e-8));
        CHECK(p[1][0] == doctest::Approx(1.1).epsilon(1e-8));
        CHECK(s.updates == 1);
    }

    TEST_CASE("adam: constant gradient keeps a constant step") {
        const ParamLayout layout = scalar_layout();
        ParamStore<double> p(layout);
        Gradients<double> g(layout);
        g[0][0] = 0.5;
        OptimizerState<double> s(layout, plain(0.9, 0.0, OptimizerKind::Adam));
        for (int t = 1; t <= 20; ++t) {
            adam_apply(p, g, s, 0.01);
            CHECK(p[0][0] == doctest::Approx(-0.01 * t).epsilon(1e-6));
        }
    }

    TEST_CASE("adam: lr 0 is the identity; sgd state refused") {
        const ParamLayout layout = scalar_layout();
        ParamStore<double> p(layout);
        p[0][0] = 0.3;
        const ParamStore<double> before = p;
        Gradients<double> g(layout);
        g[0][0] = 7.0;
        OptimizerState<double> s(layout, plain(0.9, 1e-4, OptimizerKind::Adam));
        adam_apply(p, g, s, 0.0);
        CHECK(p == before);
        OptimizerState<double> sgd(layout, plain(0.9, 0.0));
        CHECK_THROWS_AS(adam_apply(p, g, sgd, 0.1), PreconditionError);
    }

    TEST_CASE("optimizer_step dispatches on the kind") {
        const ParamLayout layout = scalar_layout();
        Gradients<double> g(layout);
        g[0][0] = 4.0;
        ParamStore<double> a(layout), b(layout);
        OptimizerState<double> sa(layout, plain(0.0, 0.0, OptimizerKind::Adam)), sb(layout, plain(0.0, 0.0));
        CHECK(optimizer_step(a, g, sa, 0) == 5e-4);
        optimizer_step(b, g, sb, 0);
        CHECK(a[0][0] == doctest::Approx(-5e-4).epsilon(1e-6));
        CHECK(b[0][0] == doctest::Approx(-4 * 5e-4).epsilon(1e-12));
    }

    TEST_CASE("names and validation") {
        CHECK(parse_optimizer("sgd") == OptimizerKind::Sgd);
        CHECK(parse_optimizer("adam") == OptimizerKind::Adam);
        CHECK(std::string(optimizer_name(OptimizerKind::Adam)) == "adam");
        CHECK_THROWS_AS(parse_optimizer("rmsprop"), PreconditionError);
        OptimizerConfig c = plain(1.0, 0.0, OptimizerKind::Adam);
        CHECK_THROWS_AS(OptimizerState<double>(scalar_layout(), c), PreconditionError);
    }
}

TEST_SUITE("training: metrics") {
    TEST_CASE("confusion: 2-class, 8 pixels, 2 errors") {
        ConfusionMatrix cm(2);
        confusion_update(cm, labels_from(2, 4, {0, 0, 0, 1, 1, 1, 1, 0}), labels_from(2, 4, {0, 0, 0, 0, 1, 1, 1, 1}));
        CHECK(cm(0, 0) == 3);
        CHECK(cm(0, 1) == 1);
        CHECK(cm(1, 0) == 1);
        CHECK(cm(1, 1) == 3);
        const MiouResult r = miou(cm);
        CHECK(*r.per_class[0] == doctest::Approx(0.6));
        CHECK(*r.per_class[1] == doctest::Approx(0.6));
        CHECK(*r.mean == doctest::Approx(0.6));
        CHECK(*pixel_accuracy(cm) == doctest::Approx(0.75));
    }

    TEST_CASE("confusion: perfect, ignored, out of range") {
        ConfusionMatrix cm(3);
        const LabelMap gt = labels_from(1, 3, {0, 1, 2});
        confusion_update(cm, gt, gt);
        CHECK(cm(0, 0) == 1);
        CHECK(cm(1, 1) == 1);
        CHECK(cm(2, 2) == 1);
        CHECK(cm.total() == 3);
        const MiouResult r = miou(cm);
        CHECK(*r.mean == 1.0);

        const ConfusionMatrix before = cm;
        confusion_update(cm, gt, labels_from(1, 3, {255, 255, 255}));
        CHECK(cm == before);
        CHECK_THROWS_AS(confusion_update(cm, gt, labels_from(1, 3, {0, 3, 1})), PreconditionError);
        CHECK_THROWS_AS(confusion_update(cm, labels_from(1, 3, {0, -1, 1}), gt), PreconditionError);
        CHECK_THROWS_AS(confusion_update(cm, labels_from(1, 2, {0, 1}), gt), ShapeError);
    }

    TEST_CASE("mIoU: absent class excluded, all-zero undefined") {
        ConfusionMatrix cm(3);
        cm(0, 0) = 4;
        cm(1, 1) = 2;
        cm(1, 0) = 2;
        const MiouResult r = miou(cm);
        CHECK_FALSE(r.per_class[2].has_value());
        CHECK(*r.per_class[0] == doctest::Approx(4.0 / 6.0));
        CHECK(*r.per_class[1] == doctest::Approx(0.5));
        CHECK(*r.mean == doctest::Approx((4.0 / 6.0 + 0.5) / 2));
        CHECK_FALSE(miou(ConfusionMatrix(4)).mean.has_value());
        CHECK_FALSE(pixel_accuracy(ConfusionMatrix(4)).has_value());
    }

    TEST_CASE("mIoU is invariant under a joint class permutation") {
        Gen gen(403);
        for (int t = 0; t < kPropertyCases; ++t) {
            const std::size_t c = gen.range(2, 8);
            ConfusionMatrix cm(c), permuted(c);
            std::vector<std::size_t> perm(c);
            std::iota(perm.begin(), perm.end(), std::size_t{0});
            for (std::size_t i = c; i > 1; --i) std::swap(perm[i - 1], perm[gen.range(0, i - 1)]);
            for (std::size_t i = 0; i < c; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    cm(i, j) = gen.range(0, 3) == 0 ? 0 : gen.range(0, 50);
                    permuted(perm[i], perm[j]) = cm(i, j);
                }
            const MiouResult a = miou(cm), b = miou(permuted);
            REQUIRE(a.mean.has_value() == b.mean.has_value());
            if (a.mean) CHECK(*a.mean == doctest::Approx(*b.mean).epsilon(1e-12));
            for (std::size_t i = 0; i < c; ++i) CHECK(a.per_class[i] == b.per_class[perm[i]]);
        }
    }
}

TEST_SUITE("training: synthetic data") {
    TEST_CASE("deterministic per seed") {
        const auto a = synth_dataset(6, 32, 32, 4, 7), b = synth_dataset(6, 32, 32, 4, 7), c = synth_dataset(6, 32, 32, 4, 8);
        bool any_diff = false;
        for (std::size_t i = 0; i < a.size(); ++i) {
            CHECK(a[i].image == b[i].image);
            CHECK(a[i].label == b[i].label);
            any_diff = any_diff || !(a[i].label == c[i].label);
        }
        CHECK(any_diff);
    }

    TEST_CASE("labels in range, every class present, images in [0, 1]") {
        Gen gen(404);
        for (int t = 0; t < 10; ++t) {
            const std::size_t classes = gen.range(2, 6);
            const std::size_t n = 4 * classes;
            const auto data = synth_dataset(n, 8 * gen.range(2, 5), 8 * gen.range(2, 5), classes, gen.rng().next());
            std::vector<std::size_t> freq(classes, 0);
            for (const Sample& s : data) {
                for (int l : s.label.data) {
                    REQUIRE(l >= 0);
                    REQUIRE(static_cast<std::size_t>(l) < classes);
                    ++freq[static_cast<std::size_t>(l)];
                }
                CHECK(*std::min_element(s.image.values().begin(), s.image.values().end()) >= 0.0);
                CHECK(*std::max_element(s.image.values().begin(), s.image.values().end()) <= 1.0);
            }
            for (std::size_t c = 0; c < classes; ++c) CHECK(freq[c] > 0);
        }
    }

    TEST_CASE("validation") {
        CHECK_THROWS_AS(synth_dataset(4, 32, 32, 1, 1), PreconditionError);
        CHECK_THROWS_AS(synth_dataset(4, 30, 32, 4, 1), PreconditionError);
    }

    TEST_CASE("batches stack and wrap") {
        const auto data = synth_dataset(3, 16, 16, 3, 1);
        const auto [x, y] = make_batch<float>(data, 2, 2);
        CHECK(x.shape() == Shape4{2, 3, 16, 16});
        CHECK(y.n == 2);
        CHECK(x(1, 0, 5, 5) == static_cast<float>(data[0].image(0, 0, 5, 5)));
        CHECK(y(0, 3, 3) == data[2].label(0, 3, 3));
        CHECK_THROWS_AS(make_batch<float>(data, std::vector<std::size_t>{0, 3}), PreconditionError);
    }
}

TEST_SUITE("training: toy loop") {
    TEST_CASE("short run: finite curve, poly rates, deterministic") {
        const auto data = synth_dataset(4, 16, 16, 3, 5);
        const NetworkSpec spec = build_esnet_scaled(3, {4, 6, 8}, {3, 16, 16});
        TrainOptions opts;
        opts.steps = 12;
        opts.batch = 2;
        Network<float> a(spec, 11), b(spec, 11);
        const TrainReport ra = train_toy(a, data, opts);
        const TrainReport rb = train_toy(b, data, opts);
        REQUIRE(ra.curve.size() == 12);
        CHECK(ra.curve[0].lr == 5e-4);
        for (std::size_t i = 0; i < ra.curve.size(); ++i) {
            CHECK(std::isfinite(ra.curve[i].loss));
            CHECK(ra.curve[i].step == i);
            CHECK(ra.curve[i].loss == rb.curve[i].loss);
            if (i > 0) CHECK(ra.curve[i].lr < ra.curve[i - 1].lr);
        }
        CHECK(a.params == b.params);
        CHECK(ra.confusion == rb.confusion);
        CHECK(ra.confusion.total() == 4 * 16 * 16);
        const std::string csv = curve_csv(ra.curve);
        REQUIRE(csv.rfind("step,lr,loss\n0,", 0) == 0);
        CHECK(std::stod(csv.substr(15)) == 5e-4);
        CHECK(std::count(csv.begin(), csv.end(), '\n') == 13);
    }

    TEST_CASE("zero steps evaluates the untrained net") {
        const auto data = synth_dataset(8, 32, 32, 4, 1);
        Network<float> net(build_esnet_scaled(4, {16, 64, 128}, {3, 32, 32}), 1);
        TrainOptions opts;
        opts.steps = 0;
        const TrainReport r = train_toy(net, data, opts);
        CHECK(r.curve.empty());
        REQUIRE(r.miou.has_value());
        CHECK(*r.miou < 0.5);
    }

    TEST_CASE("non-finite loss aborts with the step index") {
        auto data = synth_dataset(2, 16, 16, 3, 5);
        data[0].image[0] = std::numeric_limits<double>::quiet_NaN();
        data[1].image[0] = std::numeric_limits<double>::quiet_NaN();
        Network<double> net(build_esnet_scaled(3, {4, 6, 8}, {3, 16, 16}), 1);
        TrainOptions opts;
        opts.steps = 3;
        try {
            train_toy(net, data, opts);
            FAIL("expected TrainingDiverged");
        } catch (const TrainingDiverged& e) {
            CHECK(e.step() == 0);
            CHECK(std::string(e.what()).find("step 0") != std::string::npos);
        }
    }
}
