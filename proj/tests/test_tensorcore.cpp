#include <doctest.h>

#include <cmath>
#include <random>

#include "polygonizer/adam.hpp"
#include "polygonizer/gradcheck.hpp"
#include "polygonizer/ops.hpp"

using namespace polygonizer;
using namespace polygonizer::tc;

namespace {

constexpr double kTol = 1e-4;

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    std::uniform_real_distribution<double> u(lo, hi);
    for (double& v : t.data) v = u(rng);
    return t;
}

// Values bounded away from zero so relu/max-pool kinks stay outside +-h.
Tensor<double> away_from_zero(Shape shape, std::mt19937_64& rng) {
    Tensor<double> t = random_tensor(std::move(shape), rng);
    for (double& v : t.data) v = (v < 0 ? -0.1 : 0.1) + v;
    return t;
}

// Projects a vector output onto fixed random weights so grad_check sees a scalar.
Var project(Tape<double>& t, Var y, std::uint64_t seed = 99) {
    std::mt19937_64 rng(seed);
    return weighted_sum(t, y, random_tensor(t.shape(y), rng));
}

void check_grad(const GraphFn& f, std::vector<Tensor<double>> inputs, double tol = kTol) {
    const GradCheckResult r = grad_check(f, std::move(inputs));
    INFO("worst input " << r.worst_input << " index " << r.worst_index << " analytic " << r.analytic
                        << " numeric " << r.numeric);
    CHECK(r.entries_checked > 0);
    CHECK(r.max_relative_error < tol);
}

// Direct cross-correlation reference for a single image.
Tensor<double> direct_conv(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                           std::size_t stride, std::size_t pad) {
    const std::size_t C = x.dim(0), H = x.dim(1), W = x.dim(2);
    const std::size_t K = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::size_t oh = (H + 2 * pad - kh) / stride + 1;
    const std::size_t ow = (W + 2 * pad - kw) / stride + 1;
    Tensor<double> y({K, oh, ow});
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t oy = 0; oy < oh; ++oy)
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double s = b.data[k];
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t i = 0; i < kh; ++i)
                        for (std::size_t j = 0; j < kw; ++j) {
                            const long iy = static_cast<long>(oy * stride + i) - static_cast<long>(pad);
                            const long ix = static_cast<long>(ox * stride + j) - static_cast<long>(pad);
                            if (iy < 0 || ix < 0 || iy >= static_cast<long>(H) || ix >= static_cast<long>(W)) continue;
                            s += w.data[((k * C + c) * kh + i) * kw + j] *
                                 x.data[(c * H + static_cast<std::size_t>(iy)) * W + static_cast<std::size_t>(ix)];
                        }
                y.data[(k * oh + oy) * ow + ox] = s;
            }
    return y;
}

}  // namespace

TEST_CASE("grad_check harness") {
    std::mt19937_64 rng(1);
    SUBCASE("identity gradient is exact up to rounding") {
        const GradCheckResult r =
            grad_check([](Tape<double>& t, std::span<const Var> in) { return sum(t, in[0]); },
                       {random_tensor({5}, rng)});
        CHECK(r.max_relative_error < 1e-9);
    }
    SUBCASE("linear layer") {
        const GradCheckResult r = grad_check(
            [](Tape<double>& t, std::span<const Var> in) {
                return project(t, linear(t, in[0], in[1], in[2]));
            },
            {random_tensor({3, 4}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng)});
        CHECK(r.max_relative_error < 1e-7);
    }
    SUBCASE("non-scalar output rejected") {
        CHECK_THROWS_AS(grad_check([](Tape<double>&, std::span<const Var> in) { return in[0]; },
                                   {random_tensor({3}, rng)}),
                        Error);
        Tape<double> t;
        const Var x = t.input(random_tensor({3}, rng));
        CHECK_THROWS_AS(t.backward(tanh(t, x)), Error);
    }
}

TEST_CASE("primitive gradients match central differences") {
    std::mt19937_64 rng(2);
    SUBCASE("embedding") {
        const std::vector<int> ids{1, 3, 1, 0};
        check_grad(
            [&](Tape<double>& t, std::span<const Var> in) {
                return project(t, embedding(t, in[0], std::span<const int>(ids)));
            },
            {random_tensor({5, 4}, rng)});
    }
    SUBCASE("relu") {
        check_grad([](Tape<double>& t, std::span<const Var> in) { return project(t, relu(t, in[0])); },
                   {away_from_zero({3, 5}, rng)});
    }
    SUBCASE("tanh") {
        check_grad([](Tape<double>& t, std::span<const Var> in) { return project(t, tanh(t, in[0])); },
                   {random_tensor({3, 5}, rng, -2, 2)});
    }
    SUBCASE("sigmoid") {
        check_grad([](Tape<double>& t, std::span<const Var> in) { return project(t, sigmoid(t, in[0])); },
                   {random_tensor({3, 5}, rng, -3, 3)});
    }
    SUBCASE("add and scale") {
        check_grad(
            [](Tape<double>& t, std::span<const Var> in) {
                return project(t, scale(t, add(t, in[0], in[1]), 1.7));
            },
            {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)});
    }
    SUBCASE("channel concat and slice") {
        check_grad(
            [](Tape<double>& t, std::span<const Var> in) {
                const Var c = concat(t, in[0], in[1], 1);
                return add(t, project(t, c), project(t, slice(t, c, 1, 1, 4), 7));
            },
            {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)});
    }
    SUBCASE("conv2d 3x3 pad 1") {
        check_grad(
            [](Tape<double>& t, std::span<const Var> in) {
                return project(t, conv2d(t, in[0], in[1], in[2], 1, 1));
            },
            {random_tensor({2, 3, 5, 5}, rng), random_tensor({4, 3, 3, 3}, rng), random_tensor({4}, rng)});
    }
    SUBCASE("conv2d stride 2") {
        check_grad(
            [](Tape<double>& t, std::span<const Var> in) {
                return project(t, conv2d(t, in[0], in[1], in[2], 2, 1));
            },
            {random_tensor({2, 7, 7}, rng), random_tensor({3, 2, 3, 3}, rng), random_tensor({3}, rng)});
    }
    SUBCASE("conv2d pointwise") {
        check_grad(
            [](Tape<double>& t, std::span<const Var> in) {
                return project(t, conv2d(t, in[0], in[1], in[2], 1, 0));
            },
            {random_tensor({2, 3, 4, 4}, rng), random_tensor({5, 3, 1, 1}, rng), random_tensor({5}, rng)});
    }
    SUBCASE("max_pool2x2") {
        check_grad([](Tape<double>& t, std::span<const Var> in) { return project(t, max_pool2x2(t, in[0])); },
                   {random_tensor({2, 2, 4, 6}, rng)});
    }
    SUBCASE("upsample2x") {
        check_grad([](Tape<double>& t, std::span<const Var> in) { return project(t, upsample2x(t, in[0])); },
                   {random_tensor({2, 3, 3}, rng)});
    }
    SUBCASE("spatial_to_sequence") {
        check_grad(
            [](Tape<double>& t, std::span<const Var> in) { return project(t, spatial_to_sequence(t, in[0])); },
            {random_tensor({2, 3, 2, 4}, rng)});
    }
    SUBCASE("softmax_nll") {
        const std::vector<int> targets{2, 0, 5};
        const std::vector<double> weights{0.5, 1.0, 0.25};
        check_grad(
            [&](Tape<double>& t, std::span<const Var> in) {
                return softmax_nll(t, in[0], std::span<const int>(targets), std::span<const double>(weights));
            },
            {random_tensor({3, 6}, rng, -3, 3)});
    }
    SUBCASE("lstm_cell") {
        check_grad(
            [](Tape<double>& t, std::span<const Var> in) {
                const auto [h, c] = lstm_cell(t, in[0], in[1], in[2], in[3], in[4], in[5]);
                return add(t, project(t, h, 1), project(t, c, 2));
            },
            {random_tensor({2, 3}, rng), random_tensor({2, 4}, rng), random_tensor({2, 4}, rng),
             random_tensor({16, 3}, rng), random_tensor({16, 4}, rng), random_tensor({16}, rng)});
    }
    SUBCASE("additive_attention") {
        check_grad(
            [](Tape<double>& t, std::span<const Var> in) {
                const auto [ctx, w] = additive_attention(t, in[0], in[1], in[2], in[3], in[4]);
                return add(t, project(t, ctx, 1), project(t, w, 2));
            },
            {random_tensor({2, 3}, rng), random_tensor({2, 5, 4}, rng), random_tensor({6, 3}, rng),
             random_tensor({6, 4}, rng), random_tensor({6}, rng)});
    }
    SUBCASE("unbatched additive_attention") {
        check_grad(
            [](Tape<double>& t, std::span<const Var> in) {
                return project(t, additive_attention(t, in[0], in[1], in[2], in[3], in[4]).first);
            },
            {random_tensor({3}, rng), random_tensor({4, 2}, rng), random_tensor({5, 3}, rng),
             random_tensor({5, 2}, rng), random_tensor({5}, rng)});
    }
}

TEST_CASE("conv2d values") {
    std::mt19937_64 rng(3);
    SUBCASE("identity 1x1 kernel") {
        Tape<double> t;
        const Tensor<double> x = random_tensor({1, 5, 5}, rng);
        const Var y = conv2d(t, t.constant(x), t.constant(Tensor<double>({1, 1, 1, 1}, 1.0)),
                             t.constant(Tensor<double>({1})), 1, 0);
        CHECK(t.value(y).data == x.data);
    }
    SUBCASE("all-ones 3x3 on constant input") {
        Tape<double> t;
        const Var y = conv2d(t, t.constant(Tensor<double>({1, 5, 5}, 1.0)),
                             t.constant(Tensor<double>({1, 1, 3, 3}, 1.0)), t.constant(Tensor<double>({1})), 1, 1);
        const auto& v = t.value(y).data;
        CHECK(v[2 * 5 + 2] == 9.0);
        CHECK(v[0] == 4.0);
        CHECK(v[2] == 6.0);
    }
    SUBCASE("matches direct convolution") {
        for (std::size_t stride : {1u, 2u}) {
            const Tensor<double> x = random_tensor({3, 7, 7}, rng);
            const Tensor<double> w = random_tensor({4, 3, 3, 3}, rng);
            const Tensor<double> b = random_tensor({4}, rng);
            Tape<double> t;
            const Var y = conv2d(t, t.constant(x), t.constant(w), t.constant(b), stride, 1);
            const Tensor<double> ref = direct_conv(x, w, b, stride, 1);
            REQUIRE(t.shape(y) == ref.shape);
            for (std::size_t i = 0; i < ref.size(); ++i) CHECK(t.value(y).data[i] == doctest::Approx(ref.data[i]));
        }
    }
    SUBCASE("shape errors") {
        Tape<double> t;
        const Var x = t.constant(Tensor<double>({3, 8, 8}));
        CHECK_THROWS_AS(conv2d(t, x, t.constant(Tensor<double>({4, 2, 3, 3})), Var{}, 1, 1), Error);
        CHECK_THROWS_AS(conv2d(t, x, t.constant(Tensor<double>({4, 3, 2, 2})), Var{}, 1, 1), Error);
        // (8 + 2 - 3) / 2 is not integral.
        CHECK_THROWS_AS(conv2d(t, x, t.constant(Tensor<double>({4, 3, 3, 3})), Var{}, 2, 1), Error);
    }
}

TEST_CASE("lstm_cell values") {
    Tape<double> t;
    const std::size_t dh = 4;
    const Var x = t.constant(Tensor<double>({3}, 0.7));
    const Var w_ih = t.constant(Tensor<double>({4 * dh, 3}));
    const Var w_hh = t.constant(Tensor<double>({4 * dh, dh}));
    SUBCASE("all-zero weights give a zero hidden state") {
        const auto [h, c] = lstm_cell(t, x, t.constant(Tensor<double>({dh}, 0.3)),
                                      t.constant(Tensor<double>({dh})), w_ih, w_hh,
                                      t.constant(Tensor<double>({4 * dh})));
        for (double v : t.value(h).data) CHECK(v == 0.0);
    }
    SUBCASE("saturated forget gate keeps the cell") {
        Tensor<double> bias({4 * dh});
        for (std::size_t k = dh; k < 2 * dh; ++k) bias.data[k] = 10.0;
        const auto [h, c] = lstm_cell(t, x, t.constant(Tensor<double>({dh})),
                                      t.constant(Tensor<double>({dh}, 1.0)), w_ih, w_hh, t.constant(bias));
        const double sig10 = 1.0 / (1.0 + std::exp(-10.0));
        for (double v : t.value(c).data) CHECK(v == doctest::Approx(sig10).epsilon(1e-12));
        CHECK(sig10 == doctest::Approx(0.99995).epsilon(1e-5));
    }
}

TEST_CASE("additive_attention values") {
    std::mt19937_64 rng(4);
    Tape<double> t;
    const Var h = t.constant(random_tensor({3}, rng));
    const Var wq = t.constant(random_tensor({5, 3}, rng));
    const Var wk = t.constant(random_tensor({5, 4}, rng));
    const Var v = t.constant(random_tensor({5}, rng));
    SUBCASE("single key") {
        const Tensor<double> f = random_tensor({1, 4}, rng);
        const auto [ctx, w] = additive_attention(t, h, t.constant(f), wq, wk, v);
        CHECK(t.value(w).data[0] == doctest::Approx(1.0));
        for (std::size_t i = 0; i < 4; ++i) CHECK(t.value(ctx).data[i] == doctest::Approx(f.data[i]));
    }
    SUBCASE("identical keys give uniform weights") {
        Tensor<double> f({6, 4});
        for (std::size_t i = 0; i < 6; ++i)
            for (std::size_t k = 0; k < 4; ++k) f.data[i * 4 + k] = 0.1 * static_cast<double>(k);
        const auto [ctx, w] = additive_attention(t, h, t.constant(f), wq, wk, v);
        for (double x : t.value(w).data) CHECK(x == doctest::Approx(1.0 / 6.0));
    }
    SUBCASE("empty key set") {
        CHECK_THROWS_AS(additive_attention(t, h, t.constant(Tensor<double>({0, 4})), wq, wk, v), Error);
    }
}

TEST_CASE("softmax_nll values") {
    Tape<double> t;
    const Var uniform = t.input(Tensor<double>({30}, 0.25));
    const Var loss = softmax_nll(t, uniform, 4);
    CHECK(t.value(loss).data[0] == doctest::Approx(std::log(30.0)));
    t.backward(loss);
    // softmax - onehot
    for (std::size_t k = 0; k < 30; ++k) {
        CHECK(t.grad(uniform)[k] == doctest::Approx(1.0 / 30.0 - (k == 4 ? 1.0 : 0.0)));
    }

    Tensor<double> peaked({30});
    peaked.data[7] = 50.0;
    CHECK(t.value(softmax_nll(t, t.constant(peaked), 7)).data[0] == doctest::Approx(0.0).epsilon(1e-12));
    CHECK_THROWS_AS(softmax_nll(t, t.constant(peaked), 30), Error);
    CHECK_THROWS_AS(softmax_nll(t, t.constant(peaked), -1), Error);
}

TEST_CASE("backward accumulates at fan-out") {
    Tape<double> t;
    const Var x = t.input(Tensor<double>({3}, std::vector<double>{-0.5, 0.2, 1.1}));
    const Var y = sum(t, add(t, tanh(t, x), sigmoid(t, x)));
    t.backward(y);
    for (std::size_t i = 0; i < 3; ++i) {
        const double v = t.value(x).data[i];
        const double th = std::tanh(v);
        const double s = 1.0 / (1.0 + std::exp(-v));
        CHECK(t.grad(x)[i] == doctest::Approx((1 - th * th) + s * (1 - s)));
    }
}

TEST_CASE("ops are deterministic") {
    std::mt19937_64 rng(5);
    const auto x = random_tensor({2, 3, 8, 8}, rng).cast<float>();
    const auto w = random_tensor({4, 3, 3, 3}, rng).cast<float>();
    auto run = [&] {
        Tape<float> t;
        const Var y = max_pool2x2(t, relu(t, conv2d(t, t.constant(x), t.constant(w), Var{}, 1, 1)));
        return t.value(y).data;
    };
    CHECK(run() == run());
}

TEST_CASE("adam_step") {
    ParameterStore<double> store;
    Parameter<double>& p = store.create("p", {4});
    p.value.data = {1.0, -2.0, 0.5, 3.0};
    auto params = store.all();
    SUBCASE("zero gradient leaves parameters unchanged") {
        auto state = make_adam_state(params);
        p.grad.assign(4, 0.0);
        const auto before = p.value.data;
        adam_step(params, state, 2e-4);
        CHECK(p.value.data == before);
        CHECK(state.step == 1);
    }
    SUBCASE("first step moves each entry by about lr") {
        auto state = make_adam_state(params);
        p.grad = {0.3, 0.3, -7.0, 1e-3};
        const auto before = p.value.data;
        adam_step(params, state, 2e-4);
        for (std::size_t k = 0; k < 4; ++k) {
            const double g = p.grad[k];
            const double expected = 2e-4 * g / (std::abs(g) + 1e-8);
            CHECK(before[k] - p.value.data[k] == doctest::Approx(expected).epsilon(1e-9));
        }
    }
    SUBCASE("identical runs reproduce the trajectory") {
        auto run = [&] {
            ParameterStore<double> s;
            Parameter<double>& q = s.create("q", {3});
            q.value.data = {0.1, 0.2, 0.3};
            auto ps = s.all();
            auto state = make_adam_state(ps);
            for (int i = 0; i < 5; ++i) {
                q.grad = {q.value.data[0] * 2, -1.0, 0.5};
                adam_step(ps, state, 1e-2);
            }
            return q.value.data;
        };
        CHECK(run() == run());
    }
}
