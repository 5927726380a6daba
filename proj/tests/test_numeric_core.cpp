#include <cmath>
#include <numbers>

#include "doctest.h"
#include "msic/gradcheck.hpp"
#include "msic/layers.hpp"
#include "msic/optim.hpp"
#include "test_util.hpp"

using namespace msic;
using msic::testing::random_tensor;
using msic::testing::reference_conv;

namespace {

Var<double> cst(Tensor<double> t) { return Var<double>::constant(std::move(t)); }

}  // namespace

TEST_CASE("conv2d with an identity 1x1 kernel returns the input") {
  Rng rng(1);
  const Tensor<double> x = random_tensor<double>({1, 1, 3, 3}, rng);
  const Var<double> y = conv2d(cst(x), cst(Tensor<double>({1, 1, 1, 1}, 1.0)), Var<double>());
  CHECK(y.value().storage() == x.storage());
}

TEST_CASE("fully masked kernel produces zeros") {
  Rng rng(2);
  const std::vector<double> zeros(9, 0.0);
  const KernelMask mask(3, zeros);
  ConvOptions o;
  o.pad = 1;
  o.mask = &mask;
  const Var<double> y = conv2d(cst(random_tensor<double>({2, 2, 4, 4}, rng)),
                               cst(random_tensor<double>({3, 2, 3, 3}, rng)),
                               cst(Tensor<double>({1, 3, 1, 1})), o);
  for (double v : y.value().values()) CHECK(v == 0.0);
}

TEST_CASE("conv2d matches the nested-loop reference") {
  Rng rng(3);
  const Tensor<double> x = random_tensor<double>({1, 2, 5, 5}, rng);
  const Tensor<double> w = random_tensor<double>({3, 2, 3, 3}, rng);
  const Tensor<double> b = random_tensor<double>({1, 3, 1, 1}, rng);
  const std::vector<double> bias(b.storage().begin(), b.storage().end());
  const KernelMask ma = msic::testing::mask_a();
  struct Case {
    int stride, pad;
    const KernelMask* mask;
  };
  for (const Case c : {Case{1, 0, nullptr}, Case{1, 1, nullptr}, Case{2, 1, nullptr},
                       Case{2, 0, nullptr}, Case{1, 1, &ma}, Case{2, 2, &ma}}) {
    ConvOptions o;
    o.stride = c.stride;
    o.pad = c.pad;
    o.mask = c.mask;
    const Var<double> y = conv2d(cst(x), cst(w), cst(b), o);
    const Tensor<double> ref = reference_conv(x, w, bias, c.stride, c.pad, c.mask);
    REQUIRE(y.shape() == ref.shape());
    CHECK(max_abs_diff(y.value(), ref) <= 1e-6);
  }
  // float path, batch of 3
  const Tensor<double> xb = random_tensor<double>({3, 4, 7, 6}, rng);
  const Tensor<double> wb = random_tensor<double>({5, 4, 3, 3}, rng);
  ConvOptions o;
  o.pad = 1;
  const Var<float> yf = conv2d(Var<float>::constant(xb.cast<float>()),
                               Var<float>::constant(wb.cast<float>()), Var<float>(), o);
  CHECK(max_abs_diff(yf.value().cast<double>(), reference_conv(xb, wb, {}, 1, 1)) <= 1e-5);
}

TEST_CASE("conv2d output extent and errors") {
  Rng rng(4);
  ConvOptions o;
  o.stride = 2;
  o.pad = 1;
  const Var<double> y = conv2d(cst(random_tensor<double>({1, 2, 9, 8}, rng)),
                               cst(random_tensor<double>({4, 2, 3, 3}, rng)), Var<double>(), o);
  CHECK(y.shape() == Shape{1, 4, 5, 4});
  CHECK_THROWS_AS(conv2d(cst(random_tensor<double>({1, 3, 5, 5}, rng)),
                         cst(random_tensor<double>({4, 2, 3, 3}, rng)), Var<double>()),
                  ShapeError);
  const std::vector<double> bad{0, 1, 0.5, 1, 1, 1, 0, 0, 0};
  CHECK_THROWS_AS(KernelMask(3, bad), ShapeError);
}

TEST_CASE("masked conv ignores inputs under masked-out taps") {
  // With one output position and no padding, each input pixel meets exactly
  // one tap; perturbing pixels under masked taps must not move the output.
  Rng rng(5);
  for (const KernelMask& mask : {msic::testing::mask_a(), msic::testing::mask_b()}) {
    const Tensor<double> w = random_tensor<double>({2, 2, 3, 3}, rng);
    Tensor<double> x = random_tensor<double>({1, 2, 3, 3}, rng);
    ConvOptions o;
    o.mask = &mask;
    const Tensor<double> base = conv2d(cst(x), cst(w), Var<double>(), o).value();
    for (int c = 0; c < 2; ++c)
      for (int ky = 0; ky < 3; ++ky)
        for (int kx = 0; kx < 3; ++kx) {
          Tensor<double> p = x;
          p.at(0, c, ky, kx) += 10.0;
          const Tensor<double> out = conv2d(cst(p), cst(w), Var<double>(), o).value();
          if (mask.active(ky, kx)) {
            CHECK(out.storage() != base.storage());
          } else {
            CHECK(out.storage() == base.storage());
          }
        }
  }
}

TEST_CASE("elementwise reference values") {
  const auto one = [](double v) { return cst(Tensor<double>({1, 1, 1, 1}, v)); };
  CHECK(sigmoid(one(0.0)).value()[0] == 0.5);
  CHECK(msic::exp(one(0.0)).value()[0] == 1.0);
  // tanh(x) = (e^{2x} - 1) / (e^{2x} + 1) with e^{2x} from its power series
  long double e = 0.0L, term = 1.0L;
  for (int k = 1; k < 40; ++k) {
    e += term;
    term *= 1.0L / k;
  }
  const double expected = static_cast<double>((e - 1.0L) / (e + 1.0L));
  CHECK(msic::tanh(one(0.5)).value()[0] == doctest::Approx(expected).epsilon(1e-14));
  CHECK(expected == doctest::Approx(0.46211715).epsilon(1e-8));
  CHECK(relu(one(-2.0)).value()[0] == 0.0);
  CHECK(scale(one(3.0), 2.0).value()[0] == 6.0);
}

TEST_CASE("channel-wise broadcasting") {
  Rng rng(6);
  const Tensor<double> x = random_tensor<double>({2, 3, 2, 2}, rng);
  const Tensor<double> v({1, 3, 1, 1}, std::vector<double>{1, 2, 3});
  const Tensor<double> y = add(cst(x), cst(v)).value();
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 3; ++c)
      for (int i = 0; i < 4; ++i) CHECK(y.at(n, c, i / 2, i % 2) == x.at(n, c, i / 2, i % 2) + c + 1);
  CHECK_THROWS_AS(add(cst(x), cst(Tensor<double>({1, 2, 1, 1}))), ShapeError);
}

TEST_CASE("non-finite results are rejected") {
  CHECK_THROWS_AS(msic::exp(cst(Tensor<double>({1, 1, 1, 1}, 1000.0))), NumericError);
  Tape<double> tape;
  const Var<double> a = tape.leaf(Tensor<double>({1, 1, 1, 1}, 0.0));
  CHECK_THROWS_AS(reciprocal(a), NumericError);
}

TEST_CASE("channel_stats") {
  const ChannelStats c = channel_stats(Tensor<double>({2, 1, 3, 3}, 4.5));
  CHECK(c.mean[0] == 4.5);
  CHECK(c.variance[0] == 0.0);
  const ChannelStats two = channel_stats(Tensor<double>({1, 1, 1, 2}, std::vector<double>{0, 2}));
  CHECK(two.mean[0] == 1.0);
  CHECK(two.variance[0] == 1.0);

  Rng rng(7);
  const Tensor<double> x = random_tensor<double>({3, 4, 5, 6}, rng, 3.0);
  const ChannelStats s = channel_stats(x);
  for (int c = 0; c < 4; ++c) {
    double sum = 0.0;
    int count = 0;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 30; ++i, ++count) sum += x.at(n, c, i / 6, i % 6);
    const double mean = sum / count;
    double sq = 0.0;
    for (int n = 0; n < 3; ++n)
      for (int i = 0; i < 30; ++i) sq += (x.at(n, c, i / 6, i % 6) - mean) * (x.at(n, c, i / 6, i % 6) - mean);
    CHECK(std::abs(s.mean[c] - mean) <= 1e-10);
    CHECK(std::abs(s.variance[c] - sq / count) <= 1e-10);
  }
}

TEST_CASE("backward: linear case, unreachable parameters, cleared tape") {
  Rng rng(8);
  Parameter<double> w("w", random_tensor<double>({1, 2, 3, 3}, rng));
  Parameter<double> unused("unused", random_tensor<double>({1, 2, 3, 3}, rng));
  const Tensor<double> x = random_tensor<double>({1, 2, 3, 3}, rng);
  Tape<double> tape;
  const Var<double> loss = sum(mul(tape.param(w), cst(x)));
  tape.param(unused);
  tape.backward(loss);
  CHECK(w.grad.storage() == x.storage());
  for (double g : unused.grad.values()) CHECK(g == 0.0);
  CHECK(tape.cleared());
  CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
}

TEST_CASE("backward visits operations in reverse order") {
  Tape<double> tape;
  tape.set_trace(true);
  Parameter<double> w("w", Tensor<double>({1, 1, 2, 2}, 0.3));
  const Var<double> a = msic::exp(tape.param(w));
  const Var<double> b = sigmoid(a);
  const Var<double> c = square(b);
  const Var<double> loss = sum(c);
  const std::vector<std::string> forward = tape.forward_trace();
  tape.backward(loss);
  std::vector<std::string> reversed(forward.rbegin(), forward.rend());
  CHECK(tape.backward_trace() == reversed);
}

TEST_CASE("gradients of every op match finite differences") {
  Rng rng(9);
  const KernelMask mb = msic::testing::mask_b();
  Parameter<double> x("x", random_tensor<double>({2, 3, 6, 6}, rng));
  Parameter<double> w("w", random_tensor<double>({4, 3, 3, 3}, rng, 0.3));
  Parameter<double> b("b", random_tensor<double>({1, 4, 1, 1}, rng));
  Parameter<double> v("v", random_tensor<double>({1, 4, 1, 1}, rng));
  Parameter<double> m("m", random_tensor<double>({5, 5, 1, 1}, rng));
  Parameter<double> table("table", random_tensor<double>({4, 4, 1, 1}, rng, 0.5));
  Parameter<double> sigma("sigma", msic::testing::uniform_tensor<double>({2, 4, 4, 4}, rng, 0.3, 3));
  for (int i = 0; i < 5; ++i) m.value.at(i, i, 0, 0) += 3.0;
  const std::vector<double> qs{0.3, 2.0};

  struct Case {
    const char* name;
    std::function<Var<double>(Tape<double>&)> f;
  };
  const std::vector<Case> cases = {
      {"conv", [&](Tape<double>& t) {
         ConvOptions o;
         o.pad = 1;
         return conv2d(t.param(x), t.param(w), t.param(b), o);
       }},
      {"conv stride", [&](Tape<double>& t) {
         ConvOptions o;
         o.pad = 1;
         o.stride = 2;
         return conv2d(t.param(x), t.param(w), t.param(b), o);
       }},
      {"conv masked", [&](Tape<double>& t) {
         ConvOptions o;
         o.pad = 1;
         o.mask = &mb;
         return conv2d(t.param(x), t.param(w), t.param(b), o);
       }},
      {"unary", [&](Tape<double>& t) {
         const Var<double> a = t.param(x);
         return concat_channels<double>({msic::exp(scale(a, 0.5)), sigmoid(a), msic::tanh(a),
                                         relu(a), square(a), neg(add_scalar(a, 0.25)),
                                         clamp(a, -0.5, 0.7)});
       }},
      {"reciprocal", [&](Tape<double>& t) { return reciprocal(add_scalar(square(t.param(x)), 0.5)); }},
      {"broadcast", [&](Tape<double>& t) {
         const Var<double> a = conv2d(t.param(x), t.param(w), Var<double>());
         return concat_channels<double>({add(a, t.param(v)), sub(t.param(v), a), mul(a, t.param(v))});
       }},
      {"reductions", [&](Tape<double>& t) {
         const Var<double> a = t.param(x);
         return concat_channels<double>({batch_sum(a), mul(batch_sum(square(a)), mean(a))});
       }},
      {"rearrange", [&](Tape<double>& t) {
         const Var<double> a = t.param(x);
         return add(depth_to_space(scale(space_to_depth(a), 2.0)),
                    slice_channels(upsample_nearest2x(space_to_depth(a)), 1, 3));
       }},
      {"inverse", [&](Tape<double>& t) { return matrix_inverse(t.param(m)); }},
      {"gaussian bits", [&](Tape<double>& t) {
         const Var<double> a = slice_channels(conv2d(t.param(x), t.param(w), Var<double>()), 0, 4);
         return gaussian_bits(scale(a, 2.0), t.param(sigma));
       }},
      {"gain", [&](Tape<double>& t) { return gain_lookup(t.param(table), qs); }},
  };
  for (const Case& c : cases) {
    CAPTURE(c.name);
    Rng probe = rng.split(c.name);
    const GradCheckResult r = grad_check(
        {&x, &w, &b, &v, &m, &table, &sigma},
        [&](Tape<double>& t) { return random_projection(c.f(t), Rng(11)); }, probe);
    CAPTURE(r.worst);
    CHECK(r.max_rel_error <= 1e-4);
  }
}

TEST_CASE("gradient check tolerates kinks but not wrong gradients") {
  // relu(p) with p 3e-5 from the kink: a 1e-4 central difference straddles it.
  Parameter<double> p("p", Tensor<double>({1, 1, 1, 1}, 3e-5));
  Rng rng(1);
  const GradCheckResult ok = grad_check({&p}, [&](Tape<double>& t) { return sum(relu(t.param(p))); }, rng);
  CHECK(ok.passed);
  GradCheckOptions no_retry;
  no_retry.kink_retries = 0;
  CHECK_FALSE(grad_check({&p}, [&](Tape<double>& t) { return sum(relu(t.param(p))); }, rng, no_retry).passed);

  // A deliberately wrong backward: value 2p, gradient 1.
  const GradCheckResult bad = grad_check(
      {&p},
      [&](Tape<double>& t) {
        const Var<double> a = t.param(p);
        const Tensor<double> v({1, 1, 1, 1}, 2.0 * a.value()[0]);
        return t.record("wrong", v, [a](const detail::Node<double>& out) { a.node()->accumulate(out.grad); });
      },
      rng);
  CHECK_FALSE(bad.passed);
}

TEST_CASE("matrix_inverse rejects singular matrices") {
  Tensor<double> m({3, 3, 1, 1});
  m.at(0, 0, 0, 0) = 1;
  m.at(1, 1, 0, 0) = 1;
  CHECK_THROWS_AS(matrix_inverse(cst(m)), NumericError);
}

TEST_CASE("space_to_depth layout") {
  const Tensor<double> x({1, 1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  CHECK(space_to_depth(x).storage() == Buffer<double>{1, 2, 3, 4});
  CHECK(space_to_depth(x).shape() == Shape{1, 4, 1, 1});
  const Tensor<double> pq({1, 2, 2, 2}, std::vector<double>{1, 2, 3, 4, 5, 6, 7, 8});
  CHECK(space_to_depth(pq).storage() == Buffer<double>{1, 2, 3, 4, 5, 6, 7, 8});
  Rng rng(10);
  const Tensor<float> r = random_tensor<float>({2, 3, 8, 6}, rng);
  CHECK(depth_to_space(space_to_depth(r)).storage() == r.storage());
  CHECK_THROWS_AS(space_to_depth(Tensor<float>({1, 1, 3, 2})), ShapeError);
}

TEST_CASE("discretized Gaussian rate of symbol 0 at unit scale") {
  const double pmf = std::erf(0.5 / std::numbers::sqrt2);
  CHECK(pmf == doctest::Approx(0.3829249).epsilon(1e-7));
  const Var<double> bits = gaussian_bits(cst(Tensor<double>({1, 1, 1, 1}, 0.0)),
                                         cst(Tensor<double>({1, 1, 1, 1}, 1.0)));
  CHECK(bits.value()[0] == doctest::Approx(-std::log2(pmf)).epsilon(1e-12));
  CHECK(bits.value()[0] == doctest::Approx(1.3851).epsilon(1e-4));
  double prev = 0.0;
  for (double s : {0.5, 1.0, 4.0, 32.0, 256.0}) {
    const double r = gaussian_bits(cst(Tensor<double>({1, 1, 1, 1}, 0.0)),
                                   cst(Tensor<double>({1, 1, 1, 1}, s))).value()[0];
    CHECK(r > prev);
    prev = r;
  }
}

TEST_CASE("gain interpolation is geometric and exact at integers") {
  Tensor<double> table({4, 1, 1, 1}, std::vector<double>{0.0, std::log(3.0), std::log(1.0), std::log(4.0)});
  const std::vector<double> qs{2.5, 1.0, 3.0};
  const Tensor<double> g = gain_lookup(cst(table), qs).value();
  CHECK(g[0] == doctest::Approx(2.0).epsilon(1e-14));
  CHECK(g[1] == std::exp(std::log(3.0)));
  CHECK(g[2] == std::exp(std::log(4.0)));
  const std::vector<double> bad{3.5};
  CHECK_THROWS_AS(gain_lookup(cst(table), bad), RangeError);
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Rng rng(12);
    Parameter<float> p("p", random_tensor<float>({1, 3, 2, 2}, rng));
    const Tensor<float> before = p.value;
    adam_step<float>({&p}, AdamOptions{.lr = 0.1});
    CHECK(p.value.storage() == before.storage());
  }
  SUBCASE("first bias-corrected step has magnitude lr") {
    Parameter<double> p("p", Tensor<double>({1, 1, 1, 1}, 1.0));
    p.grad[0] = 0.37;
    adam_step<double>({&p}, AdamOptions{.lr = 0.01});
    CHECK(p.value[0] == doctest::Approx(1.0 - 0.01).epsilon(1e-6));
    CHECK(p.grad[0] == 0.0);
  }
  SUBCASE("quadratic converges") {
    Parameter<double> p("p", Tensor<double>({1, 1, 1, 1}, 0.0));
    for (int i = 0; i < 100; ++i) {
      p.grad[0] = 2.0 * (p.value[0] - 3.0);
      adam_step<double>({&p}, AdamOptions{.lr = 0.1});
    }
    CHECK(std::abs(p.value[0] - 3.0) < 0.5);
  }
}

TEST_CASE("seeded initialization is reproducible") {
  Rng a(77), b(77);
  const Conv2d<float> c1("layer", 3, 8, 3, a);
  const Conv2d<float> c2("layer", 3, 8, 3, b);
  CHECK(c1.weight.value.storage() == c2.weight.value.storage());
  Rng c(78);
  const Conv2d<float> c3("layer", 3, 8, 3, c);
  CHECK(c1.weight.value.storage() != c3.weight.value.storage());
}
