#include <cmath>
#include <functional>

#include "doctest.h"
#include "helpers.hpp"

#include "cdaug/nn/ops.hpp"
#include "cdaug/nn/params.hpp"

using namespace cdaug;
using namespace cdaug::nn;
using testing::rel_error;

namespace {

using Builder = std::function<Var(Tape<double>&, const std::vector<Var>&)>;

Tensor<double> random_tensor(Rng& rng, int n, int c, int h, int w, double scale = 1.0) {
  Tensor<double> t(n, c, h, w);
  for (double& v : t.data) v = scale * rng.normal();
  return t;
}

// Scalar probe: sum(proj * op(inputs)) with a fixed random projection.
double probe(const Builder& op, const std::vector<Tensor<double>>& inputs, const Tensor<double>* proj_in,
             Tensor<double>* proj_out, std::vector<Tensor<double>>* grads) {
  Tape<double> tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.variable(t));
  const Var out = op(tape, vars);
  const Tensor<double>& y = tape.value(out);
  Tensor<double> proj = proj_in ? *proj_in : Tensor<double>();
  if (!proj_in) {
    Rng rng(77);
    proj = random_tensor(rng, y.n, y.c, y.h, y.w);
    if (proj_out) *proj_out = proj;
  }
  double s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) s += proj.data[i] * y.data[i];
  if (grads) {
    tape.backward(out, proj);
    grads->clear();
    for (Var v : vars) grads->push_back(tape.grad(v));
  }
  return s;
}

// Central differences on every coordinate of every input (inputs are small).
double worst_gradient_error(const Builder& op, std::vector<Tensor<double>> inputs, double h = 1e-5) {
  Tensor<double> proj;
  std::vector<Tensor<double>> grads;
  probe(op, inputs, nullptr, &proj, &grads);
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    for (std::size_t i = 0; i < inputs[k].size(); ++i) {
      const double orig = inputs[k].data[i];
      inputs[k].data[i] = orig + h;
      const double up = probe(op, inputs, &proj, nullptr, nullptr);
      inputs[k].data[i] = orig - h;
      const double down = probe(op, inputs, &proj, nullptr, nullptr);
      inputs[k].data[i] = orig;
      worst = std::max(worst, rel_error((up - down) / (2 * h), grads[k].data[i], 1e-6));
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("conv2d forward matches a direct loop") {
  Rng rng(1);
  const auto x = random_tensor(rng, 2, 3, 5, 6);
  const auto w = random_tensor(rng, 4, 3, 3, 3);
  const auto b = random_tensor(rng, 4, 1, 1, 1);
  Tape<double> tape;
  const auto y = tape.value(conv2d(tape, tape.constant(x), tape.constant(w), tape.constant(b)));
  REQUIRE(y.n == 2);
  REQUIRE(y.c == 4);
  double worst = 0;
  for (int n = 0; n < 2; ++n)
    for (int co = 0; co < 4; ++co)
      for (int r = 0; r < 5; ++r)
        for (int c = 0; c < 6; ++c) {
          double s = b.data[co];
          for (int ci = 0; ci < 3; ++ci)
            for (int ky = 0; ky < 3; ++ky)
              for (int kx = 0; kx < 3; ++kx) {
                const int rr = r + ky - 1, cc = c + kx - 1;
                if (rr < 0 || rr >= 5 || cc < 0 || cc >= 6) continue;
                s += w.data[((co * 3 + ci) * 3 + ky) * 3 + kx] * x.data[((n * 3 + ci) * 5 + rr) * 6 + cc];
              }
          worst = std::max(worst, std::abs(s - y.data[((n * 4 + co) * 5 + r) * 6 + c]));
        }
  CHECK(worst < 1e-12);
}

TEST_CASE("op gradients match central differences") {
  Rng rng(2);
  SUBCASE("conv2d 3x3") {
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return conv2d(t, v[0], v[1], v[2]); },
                               {random_tensor(rng, 2, 2, 4, 5), random_tensor(rng, 3, 2, 3, 3),
                                random_tensor(rng, 3, 1, 1, 1)}) < 1e-6);
  }
  SUBCASE("conv2d 1x1") {
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return conv2d(t, v[0], v[1], v[2]); },
                               {random_tensor(rng, 2, 3, 4, 4), random_tensor(rng, 2, 3, 1, 1),
                                random_tensor(rng, 2, 1, 1, 1)}) < 1e-6);
  }
  SUBCASE("linear") {
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return linear(t, v[0], v[1], v[2]); },
                               {random_tensor(rng, 3, 4, 1, 1), random_tensor(rng, 5, 4, 1, 1),
                                random_tensor(rng, 5, 1, 1, 1)}) < 1e-6);
  }
  SUBCASE("group_norm") {
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return group_norm(t, v[0], v[1], v[2], 2); },
                               {random_tensor(rng, 2, 4, 3, 3), random_tensor(rng, 4, 1, 1, 1),
                                random_tensor(rng, 4, 1, 1, 1)}) < 1e-5);
  }
  SUBCASE("silu and relu") {
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return silu(t, v[0]); }, {random_tensor(rng, 2, 2, 3, 3)}) <
          1e-6);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return relu(t, v[0]); }, {random_tensor(rng, 2, 2, 3, 3)}) <
          1e-6);
  }
  SUBCASE("structural ops") {
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return add(t, v[0], v[1]); },
                               {random_tensor(rng, 2, 2, 2, 2), random_tensor(rng, 2, 2, 2, 2)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return add_channel_bias(t, v[0], v[1]); },
                               {random_tensor(rng, 2, 3, 2, 2), random_tensor(rng, 2, 3, 1, 1)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return avg_pool2(t, v[0]); },
                               {random_tensor(rng, 2, 2, 4, 6)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return mul(t, v[0], v[1]); },
                               {random_tensor(rng, 2, 3, 2, 2), random_tensor(rng, 2, 3, 2, 2)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return mul(t, v[0], v[0]); },
                               {random_tensor(rng, 2, 1, 2, 2)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return spatial_mean(t, v[0]); },
                               {random_tensor(rng, 2, 3, 4, 5)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return upsample2(t, v[0]); },
                               {random_tensor(rng, 2, 2, 2, 3)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return concat_channels(t, v[0], v[1]); },
                               {random_tensor(rng, 2, 1, 2, 2), random_tensor(rng, 2, 3, 2, 2)}) < 1e-8);
    CHECK(worst_gradient_error(
              [](auto& t, const auto& v) { return per_sample_affine<double>(t, v[0], v[1], {0.5, -2.0}, {1.5, 0.25}); },
              {random_tensor(rng, 2, 1, 3, 3), random_tensor(rng, 2, 1, 3, 3)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return select_samples<double>(t, v[0], {2, 0, 2}); },
                               {random_tensor(rng, 3, 1, 2, 2)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return sq_diff_per_sample(t, v[0], v[1]); },
                               {random_tensor(rng, 3, 2, 2, 2), random_tensor(rng, 3, 2, 2, 2)}) < 1e-7);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return weighted_sum<double>(t, v[0], {0.3, -1.0, 2.0}); },
                               {random_tensor(rng, 3, 1, 1, 1)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return embed_rows<double>(t, v[0], {1, -1, 1, 0}); },
                               {random_tensor(rng, 3, 4, 1, 1)}) < 1e-8);
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return scale<double>(t, v[0], -3.5); },
                               {random_tensor(rng, 2, 2, 2, 2)}) < 1e-8);
  }
  SUBCASE("clamp away from the bounds") {
    CHECK(worst_gradient_error([](auto& t, const auto& v) { return clamp<double>(t, v[0], -1.0, 1.0); },
                               {random_tensor(rng, 2, 2, 3, 3, 1.5)}) < 1e-8);
  }
}

TEST_CASE("clamp passes gradient only strictly inside the interval") {
  Tape<double> tape;
  Tensor<double> x(1, 1, 1, 5);
  x.data = {-2.0, -1.0, 0.3, 1.0, 4.0};
  const Var v = tape.variable(x);
  const Var y = clamp<double>(tape, v, -1.0, 1.0);
  CHECK(tape.value(y).data == std::vector<double>{-1.0, -1.0, 0.3, 1.0, 1.0});
  tape.backward(y, Tensor<double>(1, 1, 1, 5, 1.0));
  CHECK(tape.grad(v).data == std::vector<double>{0, 0, 1, 0, 0});
}

TEST_CASE("relu passes gradient at zero") {
  Tape<double> tape;
  Tensor<double> x(1, 1, 1, 3);
  x.data = {-0.5, 0.0, 0.5};
  const Var v = tape.variable(x);
  const Var y = relu(tape, v);
  tape.backward(y, Tensor<double>(1, 1, 1, 3, 1.0));
  CHECK(tape.grad(v).data == std::vector<double>{0, 1, 1});
}

TEST_CASE("embedding row -1 yields zeros") {
  Tape<double> tape;
  Rng rng(4);
  const Var table = tape.constant(random_tensor(rng, 2, 3, 1, 1));
  const auto& y = tape.value(embed_rows<double>(tape, table, {-1}));
  for (double v : y.data) CHECK(v == 0.0);
}

TEST_CASE("shape mismatches raise ShapeError") {
  Tape<double> tape;
  const Var a = tape.constant(Tensor<double>(1, 2, 3, 3));
  const Var b = tape.constant(Tensor<double>(1, 2, 3, 4));
  CHECK_THROWS_AS(add(tape, a, b), ShapeError);
  CHECK_THROWS_AS(sq_diff_per_sample(tape, a, b), ShapeError);
  CHECK_THROWS_AS(avg_pool2(tape, a), ShapeError);
  CHECK_THROWS_AS(group_norm(tape, a, tape.constant(Tensor<double>(2, 1, 1, 1)), tape.constant(Tensor<double>(2, 1, 1, 1)), 3),
                  ShapeError);
  CHECK_THROWS_AS(tape.backward(a), ShapeError);
}

TEST_CASE("constants receive no gradient") {
  Tape<double> tape;
  Rng rng(5);
  const Var c = tape.constant(random_tensor(rng, 1, 1, 2, 2));
  const Var v = tape.variable(random_tensor(rng, 1, 1, 2, 2));
  const Var s = weighted_sum<double>(tape, sq_diff_per_sample(tape, c, v), {1.0});
  tape.backward(s);
  CHECK_FALSE(tape.has_grad(c));
  CHECK(tape.has_grad(v));
}

TEST_CASE("param set binding, gradients and flattening") {
  ParamSet<double> ps;
  ps.add("trunk.w", 2, 1, 1, 1, true);
  ps.add("ctrl.w", 3, 1, 1, 1, false);
  ps[0].values = {1.0, 2.0};
  ps[1].values = {3.0, 4.0, 5.0};
  CHECK(ps.total_size() == 5);
  CHECK(ps.flatten() == std::vector<double>{1, 2, 3, 4, 5});
  CHECK(ps.index_of("ctrl.w") == 1);

  Tape<double> tape;
  const auto bound = ps.bind(tape, [](const std::string&, bool trunk) { return !trunk; });
  const Var s0 = weighted_sum<double>(tape, bound[0], {1.0, 1.0});
  const Var s1 = weighted_sum<double>(tape, bound[1], {1.0, 2.0, 3.0});
  tape.backward(add(tape, s0, s1));
  const auto g = ps.gradients(tape, bound);
  CHECK(g[0].values == std::vector<double>{0, 0});
  CHECK(g[1].values == std::vector<double>{1, 2, 3});

  auto copy = ps;
  copy.assign(std::vector<double>{5, 4, 3, 2, 1});
  CHECK(copy.flatten() == std::vector<double>{5, 4, 3, 2, 1});
  CHECK_FALSE(copy == ps);

  ByteWriter w;
  ps.write_values(w);
  const Bytes bytes = w.take();
  CHECK(bytes.size() == 20);
  auto loaded = ps.zeros_like();
  ByteReader r(bytes, "test");
  loaded.read_values(r);
  CHECK(loaded == ps);
}

TEST_CASE("adam minimizes a quadratic and leaves frozen blocks alone") {
  ParamSet<double> ps;
  ps.add("a", 3, 1, 1, 1, true);
  ps.add("b", 1, 1, 1, 1, false);
  ps[0].values = {3.0, -2.0, 0.5};
  ps[1].values = {7.0};
  Adam<double> opt(ps, 0.05);
  const auto only_a = [](const std::string& name, bool) { return name == "a"; };
  for (int it = 0; it < 1000; ++it) {
    auto g = ps.zeros_like();
    for (int i = 0; i < 3; ++i) g[0].values[i] = 2 * (ps[0].values[i] - 1.0);
    g[1].values[0] = 1.0;
    opt.step(ps, g, only_a);
  }
  for (double v : ps[0].values) CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
  CHECK(ps[1].values[0] == 7.0);
  CHECK(opt.steps() == 1000);
}
