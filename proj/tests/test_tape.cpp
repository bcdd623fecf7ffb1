#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <functional>

#include "instructtime/rng.hpp"
#include "instructtime/tape.hpp"

using namespace instructtime;
using namespace instructtime::nn;

namespace {

// Central-difference check of every parameter's gradient against a scalar
// graph. `run(true)` must build a fresh tape, call backward and return the
// loss; `run(false)` must only return the loss. Samples up to 8 coordinates
// per parameter.
void fd_check(const std::vector<Parameter*>& ps, const std::function<Real(bool)>& run,
              Real h = 1e-5, Real tol = 1e-4) {
    for (auto* p : ps) p->zero_grad();
    run(true);
    Rng pick(123);
    for (auto* p : ps) {
        const size_t n = p->value.size();
        const size_t samples = std::min<size_t>(n, 8);
        for (size_t s = 0; s < samples; ++s) {
            const size_t i = (n <= 8) ? s : static_cast<size_t>(pick.below(n));
            const Real orig = p->value.v[i];
            p->value.v[i] = orig + h;
            const Real hi = run(false);
            p->value.v[i] = orig - h;
            const Real lo = run(false);
            p->value.v[i] = orig;
            const Real fd = (hi - lo) / (2 * h);
            const Real an = p->grad.v[i];
            const Real denom = std::max({std::abs(fd), std::abs(an), Real(1e-8)});
            CAPTURE(p->name);
            CAPTURE(i);
            CHECK(std::abs(fd - an) / denom < tol);
        }
    }
}

Parameter make_param(const char* name, std::vector<int> shape, uint64_t seed, Real stddev = 0.5) {
    Rng rng(seed);
    return Parameter(name, Tensor::randn(std::move(shape), rng, stddev));
}

}  // namespace

TEST_CASE("mse and row_sqnorm_mean forward values") {
    Tape t;
    auto a = t.constant(Tensor({2, 2}, {1, 0, 0, 2}));
    CHECK(t.scalar(t.mse(a, Tensor::zeros({2, 2}))) == doctest::Approx(5.0 / 4.0).epsilon(1e-12));
    CHECK(t.scalar(t.row_sqnorm_mean(a, Tensor::zeros({2, 2}))) ==
          doctest::Approx(5.0 / 2.0).epsilon(1e-12));
}

TEST_CASE("elementwise arithmetic gradients") {
    auto a = make_param("a", {3, 4}, 1);
    auto b = make_param("b", {3, 4}, 2);
    Rng tr(9);
    const Tensor target = Tensor::randn({3, 4}, tr, 1.0);
    auto run = [&](bool bwd) {
        Tape t;
        auto na = t.param(a);
        auto nb = t.param(b);
        auto expr = t.axpy(t.add(t.mul(na, nb), t.sub(na, nb)), t.scale(na, 0.3), -1.7);
        auto loss = t.mse(expr, target);
        if (bwd) t.backward(loss);
        return t.scalar(loss);
    };
    fd_check({&a, &b}, run);
}

TEST_CASE("matmul and add_rowvec gradients") {
    auto w = make_param("w", {4, 3}, 5);
    auto x = make_param("x", {2, 4}, 6);
    auto bias = make_param("bias", {3}, 7);
    Rng tr(8);
    const Tensor target = Tensor::randn({2, 3}, tr, 1.0);
    auto run = [&](bool bwd) {
        Tape t;
        auto y = t.add_rowvec(t.matmul(t.param(x), t.param(w)), t.param(bias));
        auto loss = t.mse(y, target);
        if (bwd) t.backward(loss);
        return t.scalar(loss);
    };
    fd_check({&w, &x, &bias}, run);
}

TEST_CASE("gelu matches the exact Gaussian cdf form") {
    CHECK(gelu_fn(0.0) == 0.0);
    CHECK(gelu_fn(1.0) == doctest::Approx(0.8413447460685429).epsilon(1e-12));
    CHECK(gelu_fn(-1.0) == doctest::Approx(-0.15865525393145707).epsilon(1e-12));
    // Large inputs saturate to identity / zero.
    CHECK(gelu_fn(10.0) == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(std::abs(gelu_fn(-10.0)) < 1e-12);
    for (Real x : {-2.0, -0.5, 0.0, 0.7, 3.1}) {
        const Real h = 1e-6;
        const Real fd = (gelu_fn(x + h) - gelu_fn(x - h)) / (2 * h);
        CHECK(gelu_grad(x) == doctest::Approx(fd).epsilon(1e-6));
    }
}

TEST_CASE("gelu gradient through the tape") {
    auto a = make_param("a", {2, 5}, 11, 1.0);
    Rng tr(12);
    const Tensor target = Tensor::randn({2, 5}, tr, 1.0);
    auto run = [&](bool bwd) {
        Tape t;
        auto loss = t.mse(t.gelu(t.param(a)), target);
        if (bwd) t.backward(loss);
        return t.scalar(loss);
    };
    fd_check({&a}, run);
}

TEST_CASE("layer_norm normalizes rows and differentiates") {
    auto x = make_param("x", {3, 6}, 21, 2.0);
    auto gain = make_param("gain", {6}, 22);
    auto bias = make_param("bias", {6}, 23);
    {
        Parameter unit_gain("g1", Tensor({6}, std::vector<Real>(6, 1.0)));
        Parameter zero_bias("b0", Tensor::zeros({6}));
        Tape t;
        auto y = t.layer_norm(t.param(x), t.param(unit_gain), t.param(zero_bias));
        const Tensor& out = t.val(y);
        for (int r = 0; r < 3; ++r) {
            Real mean = 0, var = 0;
            for (int c = 0; c < 6; ++c) mean += out.at(r, c);
            mean /= 6;
            for (int c = 0; c < 6; ++c) var += (out.at(r, c) - mean) * (out.at(r, c) - mean);
            var /= 6;
            CHECK(std::abs(mean) < 1e-12);
            CHECK(var == doctest::Approx(1.0).epsilon(1e-4));  // eps shrinks it slightly
        }
    }
    Rng tr(24);
    const Tensor target = Tensor::randn({3, 6}, tr, 1.0);
    auto run = [&](bool bwd) {
        Tape t;
        auto y = t.layer_norm(t.param(x), t.param(gain), t.param(bias));
        auto loss = t.mse(y, target);
        if (bwd) t.backward(loss);
        return t.scalar(loss);
    };
    fd_check({&x, &gain, &bias}, run);
}

TEST_CASE("conv1d_causal sees only the past and differentiates") {
    const int T = 10, cin = 3, cout = 4, kernel = 3, dilation = 2;
    auto x = make_param("x", {T, cin}, 31);
    auto w = make_param("w", {kernel, cin, cout}, 32);
    auto b = make_param("b", {cout}, 33);
    {
        // Perturbing x at time t must leave outputs at times < t unchanged.
        Tape t0;
        auto base = t0.conv1d_causal(t0.param(x), t0.param(w), t0.param(b), dilation);
        const Tensor before = t0.val(base);
        Parameter x2 = x;
        x2.value.at(6, 1) += 5.0;
        Tape t1;
        auto pert = t1.conv1d_causal(t1.param(x2), t1.param(w), t1.param(b), dilation);
        const Tensor& after = t1.val(pert);
        for (int tt = 0; tt < 6; ++tt)
            for (int c = 0; c < cout; ++c) CHECK(before.at(tt, c) == after.at(tt, c));
        bool changed = false;
        for (int c = 0; c < cout; ++c) changed = changed || before.at(6, c) != after.at(6, c);
        CHECK(changed);
    }
    Rng tr(34);
    const Tensor target = Tensor::randn({T, cout}, tr, 1.0);
    auto run = [&](bool bwd) {
        Tape t;
        auto y = t.conv1d_causal(t.param(x), t.param(w), t.param(b), dilation);
        auto loss = t.mse(y, target);
        if (bwd) t.backward(loss);
        return t.scalar(loss);
    };
    fd_check({&x, &w, &b}, run);
}

TEST_CASE("causal_self_attention gradients") {
    const int T = 5, d = 8, heads = 2;
    auto x = make_param("x", {T, d}, 41);
    auto wq = make_param("wq", {d, d}, 42, 0.3);
    auto bq = make_param("bq", {d}, 43, 0.1);
    auto wk = make_param("wk", {d, d}, 44, 0.3);
    auto bk = make_param("bk", {d}, 45, 0.1);
    auto wv = make_param("wv", {d, d}, 46, 0.3);
    auto bv = make_param("bv", {d}, 47, 0.1);
    auto wo = make_param("wo", {d, d}, 48, 0.3);
    auto bo = make_param("bo", {d}, 49, 0.1);
    Rng tr(50);
    const Tensor target = Tensor::randn({T, d}, tr, 1.0);
    auto run = [&](bool bwd) {
        Tape t;
        auto y = t.causal_self_attention(t.param(x), t.param(wq), t.param(bq), t.param(wk),
                                         t.param(bk), t.param(wv), t.param(bv), t.param(wo),
                                         t.param(bo), heads);
        auto loss = t.mse(y, target);
        if (bwd) t.backward(loss);
        return t.scalar(loss);
    };
    fd_check({&x, &wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}, run, 1e-5, 2e-4);
}

TEST_CASE("causal_self_attention ignores future positions") {
    const int T = 6, d = 4;
    auto x = make_param("x", {T, d}, 61);
    auto wq = make_param("wq", {d, d}, 62, 0.4);
    auto bq = make_param("bq", {d}, 63, 0.1);
    auto wk = make_param("wk", {d, d}, 64, 0.4);
    auto bk = make_param("bk", {d}, 65, 0.1);
    auto wv = make_param("wv", {d, d}, 66, 0.4);
    auto bv = make_param("bv", {d}, 67, 0.1);
    auto wo = make_param("wo", {d, d}, 68, 0.4);
    auto bo = make_param("bo", {d}, 69, 0.1);
    auto eval = [&](Parameter& xin) {
        Tape t;
        auto y = t.causal_self_attention(t.param(xin), t.param(wq), t.param(bq), t.param(wk),
                                         t.param(bk), t.param(wv), t.param(bv), t.param(wo),
                                         t.param(bo), 2);
        return t.val(y);
    };
    const Tensor base = eval(x);
    Parameter x2 = x;
    x2.value.at(4, 2) += 3.0;
    const Tensor pert = eval(x2);
    for (int tt = 0; tt < 4; ++tt)
        for (int c = 0; c < d; ++c) CHECK(base.at(tt, c) == pert.at(tt, c));
    bool changed = false;
    for (int c = 0; c < d; ++c) changed = changed || base.at(4, c) != pert.at(4, c);
    CHECK(changed);
}

TEST_CASE("gather_rows scatter-adds repeated ids") {
    auto table = make_param("table", {4, 3}, 71);
    {
        Tape t;
        auto g = t.gather_rows(t.param(table), {2, 0, 2});
        const Tensor& out = t.val(g);
        for (int c = 0; c < 3; ++c) {
            CHECK(out.at(0, c) == table.value.at(2, c));
            CHECK(out.at(1, c) == table.value.at(0, c));
            CHECK(out.at(2, c) == table.value.at(2, c));
        }
    }
    Rng tr(72);
    const Tensor target = Tensor::randn({3, 3}, tr, 1.0);
    auto run = [&](bool bwd) {
        Tape t;
        auto loss = t.mse(t.gather_rows(t.param(table), {2, 0, 2}), target);
        if (bwd) t.backward(loss);
        return t.scalar(loss);
    };
    fd_check({&table}, run);
    // Row 2 was gathered twice: its gradient is the sum of both output rows'
    // contributions, row 1 and 3 of the table stay untouched.
    for (int c = 0; c < 3; ++c) {
        CHECK(table.grad.at(1, c) == 0.0);
        CHECK(table.grad.at(3, c) == 0.0);
    }
}

TEST_CASE("interleave_rows places and differentiates both sources") {
    auto a = make_param("a", {2, 3}, 81);
    auto b = make_param("b", {3, 3}, 82);
    const std::vector<int> a_pos{1, 3}, b_pos{0, 2, 4};
    {
        Tape t;
        auto y = t.interleave_rows(5, t.param(a), a_pos, t.param(b), b_pos);
        const Tensor& out = t.val(y);
        for (int c = 0; c < 3; ++c) {
            CHECK(out.at(1, c) == a.value.at(0, c));
            CHECK(out.at(3, c) == a.value.at(1, c));
            CHECK(out.at(0, c) == b.value.at(0, c));
            CHECK(out.at(2, c) == b.value.at(1, c));
            CHECK(out.at(4, c) == b.value.at(2, c));
        }
    }
    Rng tr(83);
    const Tensor target = Tensor::randn({5, 3}, tr, 1.0);
    auto run = [&](bool bwd) {
        Tape t;
        auto y = t.interleave_rows(5, t.param(a), a_pos, t.param(b), b_pos);
        auto loss = t.mse(y, target);
        if (bwd) t.backward(loss);
        return t.scalar(loss);
    };
    fd_check({&a, &b}, run);
}

TEST_CASE("reshape is a gradient-transparent view") {
    auto a = make_param("a", {2, 6}, 91);
    Rng tr(92);
    const Tensor target = Tensor::randn({4, 3}, tr, 1.0);
    auto run = [&](bool bwd) {
        Tape t;
        auto y = t.reshape(t.param(a), {4, 3});
        auto loss = t.mse(y, target);
        if (bwd) t.backward(loss);
        return t.scalar(loss);
    };
    fd_check({&a}, run);
}

TEST_CASE("ste forwards the quantized tensor and passes gradient through") {
    auto a = make_param("a", {2, 2}, 95);
    const Tensor q({2, 2}, {1.0, -1.0, 0.5, 2.0});
    const Tensor target({2, 2}, {0.0, 0.0, 0.0, 0.0});
    a.zero_grad();
    Tape t;
    auto y = t.ste(t.param(a), q);
    for (size_t i = 0; i < q.size(); ++i) CHECK(t.val(y).v[i] == q.v[i]);
    auto loss = t.mse(y, target);
    t.backward(loss);
    // d mse / d y = 2 (q - target) / 4, routed to `a` unchanged.
    for (size_t i = 0; i < q.size(); ++i)
        CHECK(a.grad.v[i] == doctest::Approx(2.0 * q.v[i] / 4.0).epsilon(1e-12));
}

TEST_CASE("cross_entropy_next_token matches hand-rolled softmax sum") {
    // 3 positions, vocab 4. Mask selects targets at positions 1 and 2; the
    // logits row used for position i is row i-1.
    auto logits = make_param("logits", {3, 4}, 97, 1.0);
    const std::vector<int> ids{3, 1, 2};
    const std::vector<uint8_t> mask{0, 1, 1};
    auto nll = [&](int row, int id) {
        Real mx = logits.value.at(row, 0);
        for (int c = 1; c < 4; ++c) mx = std::max(mx, logits.value.at(row, c));
        Real z = 0;
        for (int c = 0; c < 4; ++c) z += std::exp(logits.value.at(row, c) - mx);
        return -(logits.value.at(row, id) - mx - std::log(z));
    };
    const Real want = nll(0, 1) + nll(1, 2);
    auto run = [&](bool bwd) {
        Tape t;
        auto loss = t.cross_entropy_next_token(t.param(logits), ids, mask);
        if (bwd) t.backward(loss);
        return t.scalar(loss);
    };
    CHECK(run(false) == doctest::Approx(want).epsilon(1e-12));
    fd_check({&logits}, run);
    // The last logits row predicts nothing (no position 3), so no gradient.
    logits.zero_grad();
    run(true);
    for (int c = 0; c < 4; ++c) CHECK(logits.grad.at(2, c) == 0.0);
}

TEST_CASE("backward seed scales gradients linearly") {
    auto a = make_param("a", {2, 2}, 99);
    const Tensor target = Tensor::zeros({2, 2});
    auto grad_with_seed = [&](Real seed) {
        a.zero_grad();
        Tape t;
        auto loss = t.mse(t.param(a), target);
        t.backward(loss, seed);
        return a.grad;
    };
    const Tensor g1 = grad_with_seed(1.0);
    const Tensor gh = grad_with_seed(0.25);
    for (size_t i = 0; i < g1.size(); ++i)
        CHECK(gh.v[i] == doctest::Approx(0.25 * g1.v[i]).epsilon(1e-12));
}
