#include <cmath>
#include <numeric>

#include "doctest.h"
#include "esnet/gradcheck.hpp"
#include "esnet/ops.hpp"
#include "golden.hpp"
#include "support.hpp"

using namespace esnet;
using namespace esnet::test;

namespace {

ConvGeometry geom(std::size_t s, std::size_t d, std::size_t p) {
    ConvGeometry g;
    g.stride = {s, s};
    g.dilation = {d, d};
    g.padding = {p, p};
    return g;
}

std::span<const double> no_bias() { return {}; }

}  // namespace

TEST_SUITE("conv2d") {
    TEST_CASE("scalar product") {
        const Tensor4d x(Shape4{1, 1, 1, 1}, std::vector<double>{2.0});
        const Tensor4d w(Shape4{1, 1, 1, 1}, std::vector<double>{3.0});
        const Tensor4d y = conv2d(x, w, no_bias(), ConvGeometry{});
        CHECK(y.shape() == Shape4{1, 1, 1, 1});
        CHECK(y[0] == 6.0);

        const Tensor4d dy(Shape4{1, 1, 1, 1}, std::vector<double>{1.0});
        const auto g = conv2d_backward(x, w, true, ConvGeometry{}, dy);
        CHECK(g.dx[0] == 3.0);
        CHECK(g.dw[0] == 2.0);
        REQUIRE(g.db.size() == 1);
        CHECK(g.db[0] == 1.0);
    }

    TEST_CASE("stride 2 halves 512") {
        CHECK(conv_out_extent(512, 3, 2, 1, 1) == 256);
        CHECK(conv2d_output_shape({1, 3, 1024, 512}, {13, 3, 3, 3}, geom(2, 1, 1)) == Shape4{1, 13, 512, 256});
    }

    TEST_CASE("dilated kernel must fit the padded input") {
        const Tensor4d w(Shape4{1, 1, 3, 3}, 1.0);
        CHECK_THROWS_AS(conv2d(Tensor4d(Shape4{1, 1, 4, 4}, 1.0), w, no_bias(), geom(1, 2, 0)), ShapeError);
        const Tensor4d y = conv2d(Tensor4d(Shape4{1, 1, 5, 5}, 1.0), w, no_bias(), geom(1, 2, 0));
        CHECK(y.shape() == Shape4{1, 1, 1, 1});
        CHECK(y[0] == 9.0);
    }

    TEST_CASE("channel mismatch names the dimension") {
        const Tensor4d x(Shape4{1, 2, 4, 4});
        const Tensor4d w(Shape4{1, 3, 3, 3});
        CHECK_THROWS_WITH_AS(conv2d(x, w, no_bias(), geom(1, 1, 1)), doctest::Contains("C_in"), ShapeError);
    }

    TEST_CASE("bias length checked") {
        const std::vector<double> b{1.0, 2.0};
        CHECK_THROWS_AS(conv2d(Tensor4d(Shape4{1, 1, 3, 3}), Tensor4d(Shape4{1, 1, 3, 3}), std::span<const double>(b),
                               geom(1, 1, 1)),
                        ShapeError);
    }

    TEST_CASE("backward rejects mismatched dy and zero dy gives zero gradients") {
        Gen gen(3);
        const Tensor4d x = gen.tensor({1, 2, 6, 6});
        const Tensor4d w = gen.tensor({3, 2, 3, 3});
        CHECK_THROWS_AS(conv2d_backward(x, w, true, geom(1, 1, 1), Tensor4d(Shape4{1, 3, 5, 6})), ShapeError);
        const auto g = conv2d_backward(x, w, true, geom(1, 2, 2), Tensor4d(Shape4{1, 3, 6, 6}));
        CHECK(max_abs(g.dx.values()) == 0.0);
        CHECK(max_abs(g.dw.values()) == 0.0);
        CHECK(max_abs(g.db) == 0.0);
    }

    TEST_CASE("matches the float64 reference implementation") {
        const Tensor4d x = pattern({2, 2, 5, 6}, 1, 1.0 / 8);
        const Tensor4d w = pattern({3, 2, 3, 3}, 2, 1.0 / 16);
        const std::vector<double> b{0.5, -0.25, 0.125};
        ConvGeometry g;
        g.stride = {2, 1};
        g.padding = {1, 2};
        g.dilation = {1, 2};
        const Tensor4d y = conv2d(x, w, std::span<const double>(b), g);
        REQUIRE(y.shape() == Shape4{2, 3, 3, 6});
        CHECK(max_abs_diff(y.values(), golden::conv_y) < 1e-12);

        const Tensor4d dy = pattern(y.shape(), 3, 1.0 / 4);
        const auto gr = conv2d_backward(x, w, true, g, dy);
        CHECK(max_abs_diff(gr.dx.values(), golden::conv_dx) < 1e-12);
        CHECK(max_abs_diff(gr.dw.values(), golden::conv_dw) < 1e-12);
        CHECK(max_abs_diff(gr.db, golden::conv_db) < 1e-12);
    }

    TEST_CASE("property: agrees with brute-force convolution") {
        Gen gen(11);
        for (int t = 0; t < kPropertyCases; ++t) {
            const std::size_t kh = gen.range(1, 5), kw = gen.range(1, 5);
            ConvGeometry g;
            g.stride = {gen.range(1, 3), gen.range(1, 3)};
            g.dilation = t % 2 ? std::array<std::size_t, 2>{1, 1}
                               : std::array<std::size_t, 2>{gen.range(1, 3), gen.range(1, 3)};
            g.padding = {gen.range(0, 3), gen.range(0, 3)};
            const std::size_t h = effective_extent(kh, g.dilation[0]) + gen.range(0, 6);
            const std::size_t w = effective_extent(kw, g.dilation[1]) + gen.range(0, 6);
            const Tensor4d x = gen.tensor({gen.range(1, 2), gen.range(1, 3), h, w});
            const Tensor4d wt = gen.tensor({gen.range(1, 3), x.c(), kh, kw});
            const std::vector<double> b = gen.vec(wt.n());
            CAPTURE(t);
            CHECK(max_abs_diff(conv2d(x, wt, std::span<const double>(b), g), brute_conv2d(x, wt, b, g)) < 1e-12);
        }
    }

    TEST_CASE("property: output extent follows the closed form") {
        Gen gen(12);
        for (int t = 0; t < 200; ++t) {
            const std::size_t k = gen.range(1, 7), s = gen.range(1, 4), d = gen.range(1, 4), p = gen.range(0, 4);
            const std::size_t in = gen.range(1, 40);
            const std::size_t ek = d * (k - 1) + 1;
            if (in + 2 * p < ek) {
                CHECK_THROWS_AS(conv_out_extent(in, k, s, d, p), ShapeError);
                continue;
            }
            const std::size_t out = conv_out_extent(in, k, s, d, p);
            CHECK(out == (in + 2 * p - ek) / s + 1);
            // A transposed conv with o = (H + 2p - eK) mod s restores the extent.
            const std::size_t o = (in + 2 * p - ek) % s;
            if (o < s) CHECK(transposed_out_extent(out, k, s, d, p, o) == in);
        }
    }

    TEST_CASE("property: linear in the input") {
        Gen gen(13);
        for (int t = 0; t < kPropertyCases; ++t) {
            const ConvGeometry g = geom(gen.range(1, 2), gen.range(1, 3), gen.range(0, 2));
            const std::size_t k = gen.odd(1, 3);
            const std::size_t side = effective_extent(k, g.dilation[0]) + gen.range(0, 5);
            const Tensor4d a = gen.tensor({1, 2, side, side}), b = gen.tensor({1, 2, side, side});
            const Tensor4d w = gen.tensor({2, 2, k, k});
            const double alpha = gen.real(-2, 2), beta = gen.real(-2, 2);
            Tensor4d mix(a.shape());
            for (std::size_t i = 0; i < mix.size(); ++i) mix[i] = alpha * a[i] + beta * b[i];
            const Tensor4d ya = conv2d(a, w, no_bias(), g), yb = conv2d(b, w, no_bias(), g);
            Tensor4d expect(ya.shape());
            for (std::size_t i = 0; i < expect.size(); ++i) expect[i] = alpha * ya[i] + beta * yb[i];
            CHECK(max_abs_diff(conv2d(mix, w, no_bias(), g), expect) < 1e-10);
        }
    }

    TEST_CASE("property: rank-1 kernel equals the factorized pair") {
        Gen gen(14);
        for (int t = 0; t < kPropertyCases; ++t) {
            const std::size_t K = gen.odd(3, 9);
            const std::size_t d = gen.range(1, 3);
            const std::size_t h = gen.range(1, 12), w = gen.range(1, 12);
            const Tensor4d x = gen.tensor({gen.range(1, 2), 1, h, w});
            const std::vector<double> u = gen.vec(K), v = gen.vec(K);
            const Tensor4d col(Shape4{1, 1, K, 1}, u), row({1, 1, 1, K}, v);
            Tensor4d full(1, 1, K, K);
            for (std::size_t i = 0; i < K; ++i)
                for (std::size_t j = 0; j < K; ++j) full(0, 0, i, j) = u[i] * v[j];
            ConvGeometry gc, gr, gf;
            gc.dilation = {d, 1};
            gc.padding = {same_padding(K, d), 0};
            gr.dilation = {1, d};
            gr.padding = {0, same_padding(K, d)};
            gf.dilation = {d, d};
            gf.padding = {same_padding(K, d), same_padding(K, d)};
            const Tensor4d pair = conv2d(conv2d(x, col, no_bias(), gc), row, no_bias(), gr);
            CHECK(max_abs_diff(pair, conv2d(x, full, no_bias(), gf)) < 1e-10);
        }
    }

    TEST_CASE("gradient check: linear op and the dilated example") {
        Gen gen(15);
        Tensor4d x = gen.tensor({1, 2, 6, 6});
        Tensor4d w = gen.tensor({2, 2, 3, 3});
        std::vector<double> b = gen.vec(2);
        const ConvGeometry g = geom(1, 2, 2);
        const Tensor4d r = gen.tensor({1, 2, 6, 6});
        auto loss = [&] {
            const Tensor4d y = conv2d(x, w, std::span<const double>(b), g);
            return std::inner_product(y.vec().begin(), y.vec().end(), r.vec().begin(), 0.0);
        };
        const auto an = conv2d_backward(x, w, true, g, r);
        std::vector<GradTarget> targets{{"x", x.values(), an.dx.values()},
                                        {"w", w.values(), an.dw.values()},
                                        {"b", b, an.db}};
        CHECK(grad_check(loss, targets).max_rel_error < 1e-6);
        GradCheckOptions coarse;
        coarse.eps = 1e-3;
        const GradCheckResult res = grad_check(loss, targets, coarse);
        CHECK(res.passed(1e-4));
        CHECK(res.checked == x.size() + w.size() + b.size());
    }
}

TEST_SUITE("transposed_conv2d") {
    TEST_CASE("kernel stamping") {
        const Tensor4d x(Shape4{1, 1, 1, 1}, std::vector<double>{1.0});
        const Tensor4d w(Shape4{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
        const Tensor4d y = transposed_conv2d(x, w, no_bias(), geom(2, 1, 0), {0, 0});
        CHECK(y == Tensor4d(Shape4{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
    }

    TEST_CASE("decoder doubling and output padding bound") {
        CHECK(transposed_out_extent(256, 3, 2, 1, 1, 1) == 512);
        const Tensor4d w(Shape4{1, 1, 3, 3}, 1.0);
        CHECK_THROWS_AS(transposed_conv2d(Tensor4d(Shape4{1, 1, 2, 2}), w, no_bias(), geom(2, 1, 1), {2, 1}),
                        PreconditionError);
        CHECK_THROWS_AS(transposed_conv2d(Tensor4d(Shape4{1, 1, 2, 2}), w, no_bias(), geom(1, 1, 1), {1, 0}),
                        PreconditionError);
    }

    TEST_CASE("matches the float64 reference implementation") {
        const Tensor4d x = pattern({1, 2, 3, 3}, 4, 1.0 / 8);
        const Tensor4d w = pattern({2, 3, 3, 3}, 5, 1.0 / 16);
        const std::vector<double> b{0.25, -0.5, 0.75};
        const Tensor4d y = transposed_conv2d(x, w, std::span<const double>(b), geom(2, 1, 1), {1, 1});
        REQUIRE(y.shape() == Shape4{1, 3, 6, 6});
        CHECK(max_abs_diff(y.values(), golden::tconv_y) < 1e-12);
    }

    TEST_CASE("property: equals the conv input gradient") {
        Gen gen(21);
        for (int t = 0; t < kPropertyCases; ++t) {
            const std::size_t s = gen.range(1, 3), d = gen.range(1, 2), k = gen.range(1, 4), p = gen.range(0, 2);
            const std::size_t ek = effective_extent(k, d);
            const std::size_t in = ek + gen.range(0, 7);
            if (in + 2 * p < ek) continue;
            const std::size_t out = conv_out_extent(in, k, s, d, p);
            const std::size_t o = (in + 2 * p - ek) % s;
            const ConvGeometry g = geom(s, d, p);
            const Tensor4d w = gen.tensor({gen.range(1, 3), gen.range(1, 3), k, k});
            const Tensor4d x = gen.tensor({gen.range(1, 2), w.n(), out, out});
            const Tensor4d t_out = transposed_conv2d(x, w, no_bias(), g, {o, o});
            const Tensor4d dx = conv2d_input_grad(x, w, g, {x.n(), w.c(), in, in});
            CAPTURE(t);
            CHECK(max_abs_diff(t_out, dx) < 1e-12);
        }
    }

    TEST_CASE("property: agrees with the scatter definition") {
        Gen gen(22);
        for (int t = 0; t < kPropertyCases; ++t) {
            const std::size_t s = gen.range(1, 3), d = gen.range(1, 2), k = gen.range(1, 4);
            const std::size_t p = gen.range(0, d * (k - 1) / 2);
            const std::size_t o = gen.range(0, s - 1);
            const ConvGeometry g = geom(s, d, p);
            const Tensor4d w = gen.tensor({gen.range(1, 3), gen.range(1, 3), k, k});
            const Tensor4d x = gen.tensor({gen.range(1, 2), w.n(), gen.range(1, 6), gen.range(1, 6)});
            CAPTURE(t);
            CHECK(max_abs_diff(transposed_conv2d(x, w, no_bias(), g, {o, o}), brute_transposed_conv2d(x, w, g, {o, o})) <
                  1e-12);
        }
    }

    TEST_CASE("gradient check") {
        Gen gen(22);
        Tensor4d x = gen.tensor({2, 3, 3, 4});
        Tensor4d w = gen.tensor({3, 2, 3, 3});
        std::vector<double> b = gen.vec(2);
        const ConvGeometry g = geom(2, 1, 1);
        const Tensor4d r = gen.tensor({2, 2, 6, 8});
        auto loss = [&] {
            const Tensor4d y = transposed_conv2d(x, w, std::span<const double>(b), g, {1, 1});
            return std::inner_product(y.vec().begin(), y.vec().end(), r.vec().begin(), 0.0);
        };
        const auto an = transposed_conv2d_backward(x, w, true, g, r);
        std::vector<GradTarget> targets{{"x", x.values(), an.dx.values()},
                                        {"w", w.values(), an.dw.values()},
                                        {"b", b, an.db}};
        CHECK(grad_check(loss, targets).max_rel_error < 1e-6);
    }
}

TEST_SUITE("maxpool2d") {
    TEST_CASE("window max") {
        const auto r = maxpool2d(Tensor4d(Shape4{1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4}));
        CHECK(r.y == Tensor4d(Shape4{1, 1, 1, 1}, std::vector<double>{4.0}));
    }

    TEST_CASE("constant input routes all gradient to the first element") {
        const Tensor4d x(Shape4{1, 1, 4, 4}, 0.5);
        const auto r = maxpool2d(x);
        CHECK(r.y == Tensor4d(Shape4{1, 1, 2, 2}, 0.5));
        const Tensor4d dx = maxpool2d_backward(x.shape(), r.argmax, Tensor4d(Shape4{1, 1, 2, 2}, 1.0));
        for (std::size_t y = 0; y < 4; ++y)
            for (std::size_t xx = 0; xx < 4; ++xx) CHECK(dx(0, 0, y, xx) == ((y % 2 == 0 && xx % 2 == 0) ? 1.0 : 0.0));
    }

    TEST_CASE("odd extents floor and inputs below 2 are rejected") {
        CHECK(maxpool2d(Tensor4d(Shape4{1, 1, 5, 3})).y.shape() == Shape4{1, 1, 2, 1});
        CHECK_THROWS_AS(maxpool2d(Tensor4d(Shape4{1, 1, 1, 4})), ShapeError);
    }

    TEST_CASE("matches the float64 reference implementation (with ties)") {
        const Tensor4d x(Shape4{1, 2, 5, 4}, golden::pool_x);
        const auto r = maxpool2d(x);
        CHECK(max_abs_diff(r.y.values(), golden::pool_y) == 0.0);
        const Tensor4d dy = pattern(r.y.shape(), 9, 0.5);
        CHECK(max_abs_diff(maxpool2d_backward(x.shape(), r.argmax, dy).values(), golden::pool_dx) == 0.0);
    }

    TEST_CASE("property: brute-force window max") {
        Gen gen(31);
        for (int t = 0; t < kPropertyCases; ++t) {
            const Tensor4d x = gen.tensor({1, 3, gen.range(2, 9), gen.range(2, 9)});
            const auto r = maxpool2d(x);
            for (std::size_t c = 0; c < 3; ++c)
                for (std::size_t i = 0; i < x.h() / 2; ++i)
                    for (std::size_t j = 0; j < x.w() / 2; ++j) {
                        const double m = std::max({x(0, c, 2 * i, 2 * j), x(0, c, 2 * i, 2 * j + 1),
                                                   x(0, c, 2 * i + 1, 2 * j), x(0, c, 2 * i + 1, 2 * j + 1)});
                        CHECK(r.y(0, c, i, j) == m);
                    }
        }
    }
}

TEST_SUITE("batchnorm2d") {
    TEST_CASE("train mode normalizes each channel") {
        Gen gen(41);
        const Tensor4d x = gen.tensor({3, 2, 4, 5}, -3.0, 7.0);
        auto p = BNParams<double>::identity(2);
        const Tensor4d y = batchnorm2d(x, p, Mode::Train);
        for (std::size_t c = 0; c < 2; ++c) {
            double mean = 0, sq = 0;
            for (std::size_t n = 0; n < 3; ++n)
                for (std::size_t i = 0; i < 20; ++i) mean += y.plane(n, c)[i];
            mean /= 60;
            for (std::size_t n = 0; n < 3; ++n)
                for (std::size_t i = 0; i < 20; ++i) sq += (y.plane(n, c)[i] - mean) * (y.plane(n, c)[i] - mean);
            CHECK(std::abs(mean) < 1e-10);
            CHECK(sq / 60 == doctest::Approx(1.0).epsilon(1e-4));
        }
        // Running stats moved toward the batch statistics.
        CHECK(p.running_mean[0] != 0.0);
    }

    TEST_CASE("gamma zero gives the constant beta") {
        Gen gen(42);
        auto p = BNParams<double>::identity(2);
        p.gamma = {0.0, 0.0};
        p.beta = {1.5, -0.5};
        const Tensor4d y = batchnorm2d(gen.tensor({2, 2, 3, 3}), p, Mode::Train);
        for (std::size_t n = 0; n < 2; ++n)
            for (std::size_t i = 0; i < 9; ++i) {
                CHECK(y.plane(n, 0)[i] == 1.5);
                CHECK(y.plane(n, 1)[i] == -0.5);
            }
    }

    TEST_CASE("inference with identity statistics is the identity up to eps") {
        Gen gen(43);
        auto p = BNParams<double>::identity(3);
        // y = x / sqrt(1 + eps): absolute error below 1e-6 for |x| <= 0.1,
        // relative error eps / 2 everywhere.
        const Tensor4d small = gen.tensor({2, 3, 4, 4}, -0.1, 0.1);
        CHECK(max_abs_diff(batchnorm2d(small, p, Mode::Infer), small) < 1e-6);
        const Tensor4d x = gen.tensor({2, 3, 4, 4}, -5, 5);
        const Tensor4d y = batchnorm2d(x, p, Mode::Infer);
        for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(y[i] - x[i]) <= 5.0001e-6 * std::abs(x[i]));
    }

    TEST_CASE("channel mismatch rejected") {
        auto p = BNParams<double>::identity(2);
        CHECK_THROWS_AS(batchnorm2d(Tensor4d(Shape4{1, 3, 2, 2}), p, Mode::Train), ShapeError);
    }

    TEST_CASE("matches the float64 reference implementation") {
        const Tensor4d x = pattern({2, 3, 2, 3}, 6, 1.0 / 8);
        const std::vector<double> gamma{1.0, 0.5, -0.75}, beta{0.0, 0.25, -0.125};
        const auto f = batchnorm2d_train(x, std::span<const double>(gamma), std::span<const double>(beta), 1e-5);
        CHECK(max_abs_diff(f.y.values(), golden::bn_y) < 1e-12);
        const Tensor4d dy = pattern(x.shape(), 7, 1.0 / 4);
        const auto g = batchnorm2d_backward(f.cache, std::span<const double>(gamma), dy);
        CHECK(max_abs_diff(g.dx.values(), golden::bn_dx) < 1e-12);
        CHECK(max_abs_diff(g.dgamma, golden::bn_dgamma) < 1e-12);
        CHECK(max_abs_diff(g.dbeta, golden::bn_dbeta) < 1e-12);

        std::vector<double> rm{0.1, -0.2, 0.3}, rv{1.0, 2.0, 0.5};
        update_running_stats(std::span<double>(rm), std::span<double>(rv), std::span<const double>(f.cache.mean),
                             std::span<const double>(f.cache.var), 12, 0.1);
        CHECK(max_abs_diff(rm, golden::bn_running_mean) < 1e-15);
        CHECK(max_abs_diff(rv, golden::bn_running_var) < 1e-15);
    }

    TEST_CASE("gradient check") {
        Gen gen(44);
        Tensor4d x = gen.tensor({2, 3, 3, 3});
        std::vector<double> gamma = gen.vec(3, 0.5, 1.5), beta = gen.vec(3);
        const Tensor4d r = gen.tensor(x.shape());
        auto loss = [&] {
            const auto f = batchnorm2d_train(x, std::span<const double>(gamma), std::span<const double>(beta), 1e-5);
            return std::inner_product(f.y.vec().begin(), f.y.vec().end(), r.vec().begin(), 0.0);
        };
        const auto f = batchnorm2d_train(x, std::span<const double>(gamma), std::span<const double>(beta), 1e-5);
        const auto an = batchnorm2d_backward(f.cache, std::span<const double>(gamma), r);
        std::vector<GradTarget> targets{{"x", x.values(), an.dx.values()},
                                        {"gamma", gamma, an.dgamma},
                                        {"beta", beta, an.dbeta}};
        CHECK(grad_check(loss, targets).passed(1e-4));
    }
}

TEST_SUITE("elementwise") {
    TEST_CASE("relu, add, concat") {
        const Tensor4d x(Shape4{1, 2, 1, 1}, std::vector<double>{-1.0, 2.0});
        CHECK(relu(x) == Tensor4d(Shape4{1, 2, 1, 1}, std::vector<double>{0.0, 2.0}));
        CHECK(add(x, Tensor4d(x.shape())) == x);
        CHECK_THROWS_AS(add(x, Tensor4d(Shape4{1, 1, 1, 1})), ShapeError);

        Gen gen(51);
        const Tensor4d a = gen.tensor({1, 13, 4, 4}), b = gen.tensor({1, 3, 4, 4});
        const Tensor4d c = concat_channels(a, b);
        CHECK(c.shape() == Shape4{1, 16, 4, 4});
        CHECK(c(0, 0, 1, 2) == a(0, 0, 1, 2));
        CHECK(c(0, 13, 3, 3) == b(0, 0, 3, 3));
        const auto [sa, sb] = split_channels(c, 13);
        CHECK(sa == a);
        CHECK(sb == b);
        CHECK_THROWS_AS(concat_channels(a, Tensor4d(Shape4{1, 3, 4, 5})), ShapeError);
    }

    TEST_CASE("relu backward passes gradient where the output is positive") {
        const Tensor4d y(Shape4{1, 1, 1, 3}, std::vector<double>{0.0, 1.0, 2.0});
        const Tensor4d dy(Shape4{1, 1, 1, 3}, std::vector<double>{5.0, 6.0, 7.0});
        CHECK(relu_backward(y, dy) == Tensor4d(Shape4{1, 1, 1, 3}, std::vector<double>{0.0, 6.0, 7.0}));
    }
}

TEST_SUITE("softmax_cross_entropy") {
    TEST_CASE("uniform logits give ln C") {
        const Tensor4d logits(Shape4{1, 19, 2, 3});
        const auto r = softmax_cross_entropy(logits, LabelMap(1, 2, 3, 7), 255);
        CHECK(r.loss == doctest::Approx(std::log(19.0)).epsilon(1e-14));
        CHECK(r.loss == doctest::Approx(2.9444).epsilon(1e-4));
        CHECK(r.scored == 6);
    }

    TEST_CASE("all pixels ignored") {
        Gen gen(61);
        const auto r = softmax_cross_entropy(gen.tensor({2, 4, 3, 3}), LabelMap(2, 3, 3, 255), 255);
        CHECK(r.loss == 0.0);
        CHECK(r.scored == 0);
        CHECK(max_abs(r.dlogits.values()) == 0.0);
    }

    TEST_CASE("out-of-range label rejected") {
        LabelMap y(1, 1, 2, 0);
        y(0, 0, 1) = 4;
        CHECK_THROWS_AS(softmax_cross_entropy(Tensor4d(Shape4{1, 4, 1, 2}), y, 255), PreconditionError);
        y(0, 0, 1) = -1;
        CHECK_THROWS_AS(softmax_cross_entropy(Tensor4d(Shape4{1, 4, 1, 2}), y, 255), PreconditionError);
    }

    TEST_CASE("matches the float64 reference implementation") {
        const Tensor4d logits = pattern({2, 3, 2, 2}, 8, 0.25);
        LabelMap y(2, 2, 2);
        y.data = {0, 1, 2, 255, 1, 1, 0, 2};
        const auto r = softmax_cross_entropy(logits, y, 255);
        CHECK(std::abs(r.loss - golden::ce_loss) < 1e-14);
        CHECK(max_abs_diff(r.dlogits.values(), golden::ce_dlogits) < 1e-15);
    }

    TEST_CASE("gradient check on a random (1,4,3,3)") {
        Gen gen(62);
        Tensor4d logits = gen.tensor({1, 4, 3, 3}, -3, 3);
        LabelMap y(1, 3, 3);
        for (int& v : y.data) v = static_cast<int>(gen.range(0, 3));
        y.data[4] = 255;
        const auto an = softmax_cross_entropy(logits, y, 255);
        auto loss = [&] { return softmax_cross_entropy(logits, y, 255).loss; };
        std::vector<GradTarget> targets{{"logits", logits.values(), an.dlogits.values()}};
        CHECK(grad_check(loss, targets).passed(1e-4));
        const std::vector<double> fd = central_difference(loss, logits.values());
        CHECK(max_abs_diff(fd, an.dlogits.values()) < 1e-8);
    }

    TEST_CASE("argmax ties resolve to the lowest class") {
        Tensor4d logits(Shape4{1, 3, 1, 2});
        logits(0, 1, 0, 0) = 2.0;
        logits(0, 2, 0, 0) = 2.0;
        const LabelMap m = argmax_channels(logits);
        CHECK(m(0, 0, 0) == 1);
        CHECK(m(0, 0, 1) == 0);
    }
}

TEST_SUITE("grad_check harness") {
    TEST_CASE("reports a wrong analytic gradient") {
        std::vector<double> v{1.0, 2.0};
        const std::vector<double> wrong{2.0, 4.5};  // d/dv sum(v^2) = (2, 4)
        auto loss = [&] { return v[0] * v[0] + v[1] * v[1]; };
        std::vector<GradTarget> targets{{"v", v, wrong}};
        const auto r = grad_check(loss, targets);
        CHECK_FALSE(r.passed(1e-4));
        CHECK(r.worst_index == 1);
        CHECK(r.worst_target == "v");
        CHECK(v == std::vector<double>{1.0, 2.0});  // restored
    }

    TEST_CASE("non-finite loss is a failure naming the coordinate") {
        std::vector<double> v{0.0};
        const std::vector<double> an{0.0};
        auto loss = [&] { return std::log(v[0]); };
        std::vector<GradTarget> targets{{"v", v, an}};
        const auto r = grad_check(loss, targets);
        CHECK_FALSE(r.finite);
        CHECK_FALSE(r.passed(1e-4));
        CHECK(r.failure.find("v[0]") != std::string::npos);
    }

    TEST_CASE("subsamples above the coordinate cap, deterministically") {
        std::vector<double> v(50, 0.5);
        std::vector<double> an(50, 1.0);
        auto loss = [&] { return std::accumulate(v.begin(), v.end(), 0.0); };
        std::vector<GradTarget> targets{{"v", v, an}};
        GradCheckOptions o;
        o.max_coords = 10;
        const auto a = grad_check(loss, targets, o), b = grad_check(loss, targets, o);
        CHECK(a.checked == 10);
        CHECK(a.max_rel_error == b.max_rel_error);
        CHECK(a.passed(1e-8));
    }

    TEST_CASE("kink-aware overload steps away from a relu corner") {
        // f(v) = relu(v) at v = 1e-7: the central stencil straddles the kink.
        std::vector<double> v{1e-7};
        const std::vector<double> an{1.0};
        auto loss = [&] { return std::max(v[0], 0.0); };
        auto region = [&] { return static_cast<std::uint64_t>(v[0] > 0); };
        std::vector<GradTarget> targets{{"v", v, an}};
        CHECK_FALSE(grad_check(loss, targets).passed(1e-4));
        const auto r = grad_check(loss, region, targets);
        CHECK(r.passed(1e-4));
        CHECK(r.kink_adjusted == 1);
    }
}
