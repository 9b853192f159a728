#include <cmath>

#include "doctest.h"
#include "helpers.hpp"

#include "cdaug/denoiser.hpp"
#include "cdaug/nn/ops.hpp"

using namespace cdaug;
using testing::dense_tiny_model;
using testing::random_grid;
using testing::rel_error;
using testing::tiny_arch;

namespace {

Conditioning random_condition(Rng& rng, int h, int w, int tag) {
  DotMap d{{}, w, h};
  const int n = rng.uniform_int(1, 6);
  for (int i = 0; i < n; ++i) d.points.push_back({rng.uniform(0, w), rng.uniform(0, h)});
  return {tag, render_density(d)};
}

// Sum of squared noise predictions: a loss that depends on every path.
template <typename T>
LossBuilder<T> energy() {
  return [](nn::Tape<T>& tape, nn::Var, nn::Var eps) {
    const int n = tape.value(eps).n;
    return nn::weighted_sum(tape, nn::sq_diff_per_sample(tape, eps, tape.constant(nn::Tensor<T>(n, 1, tape.value(eps).h, tape.value(eps).w))),
                            std::vector<T>(n, T(1)));
  };
}

}  // namespace

TEST_CASE("init is deterministic and fusion projections and the mean gain start at zero") {
  const auto a = init_model(tiny_arch(), 1), b = init_model(tiny_arch(), 1), c = init_model(tiny_arch(), 2);
  CHECK(a.params == b.params);
  CHECK_FALSE(a.params == c.params);
  int fusion = 0;
  for (const auto& blk : a.params.blocks()) {
    if (!is_fusion_block(blk.name)) continue;
    ++fusion;
    CHECK_FALSE(blk.trunk);
    for (float v : blk.values) CHECK(v == 0.0f);
  }
  CHECK(fusion == 6);
  for (const char* name : {"out.global_gain.w", "out.global_gain.b"})
    for (float v : a.params[a.params.index_of(name)].values) CHECK(v == 0.0f);
  bool trunk_differs = false;
  for (std::size_t i = 0; i < a.params.count(); ++i)
    if (a.params[i].trunk && a.params[i].values != c.params[i].values) trunk_differs = true;
  CHECK(trunk_differs);
}

TEST_CASE("at init every density map gives the zero-map prediction bit for bit") {
  DenoiserArch arch = tiny_arch();
  arch.widths = {8, 8, 8};
  arch.groups = 4;
  const auto p = init_model(arch, 3);
  Rng rng(4);
  const auto xt = random_grid<float>(16, 16, rng);
  const Conditioning zero{1, DensityMap{Grid<float>(16, 16), 4.0}};
  const auto base = predict_eps(p, xt, 500, zero);
  REQUIRE(base.height == 16);
  REQUIRE(base.width == 16);
  for (int trial = 0; trial < 20; ++trial) CHECK(predict_eps(p, xt, 500, random_condition(rng, 16, 16, 1)) == base);
}

TEST_CASE("null tag equals a zeroed tag embedding") {
  auto p = dense_tiny_model(5);
  Rng rng(6);
  const auto xt = random_grid<double>(8, 8, rng);
  Conditioning c = random_condition(rng, 8, 8, p.arch.null_tag());
  const auto with_null = predict_eps(p, xt, 10, c);
  auto zeroed = p;
  auto& table = zeroed.params[zeroed.params.index_of("tag.table")].values;
  std::fill(table.begin(), table.begin() + zeroed.arch.emb_dim, 0.0);
  c.tag = 0;
  CHECK(predict_eps(zeroed, xt, 10, c) == with_null);
  CHECK_FALSE(predict_eps(p, xt, 10, c) == with_null);
}

TEST_CASE("output shape, determinism and input validation") {
  const auto p = init_model(tiny_arch(), 7);
  Rng rng(8);
  const auto xt = random_grid<float>(64, 64, rng);
  const Conditioning c{0, DensityMap{Grid<float>(64, 64), 4.0}};
  const auto y = predict_eps(p, xt, 1000, c);
  CHECK(y.height == 64);
  CHECK(y.width == 64);
  CHECK(predict_eps(p, xt, 1000, c) == y);

  CHECK_THROWS_AS(predict_eps(p, random_grid<float>(10, 8, rng), 5, Conditioning{0, DensityMap{Grid<float>(10, 8), 4.0}}),
                  ShapeError);
  CHECK_THROWS_AS(predict_eps(p, random_grid<float>(8, 8, rng), 5, Conditioning{0, DensityMap{Grid<float>(8, 12), 4.0}}),
                  ShapeError);
  CHECK_THROWS_AS(predict_eps(p, random_grid<float>(8, 8, rng), 5, Conditioning{5, DensityMap{Grid<float>(8, 8), 4.0}}),
                  BoundsError);
}

TEST_CASE("perturbing a trunk parameter changes the prediction") {
  auto p = dense_tiny_model(9);
  Rng rng(10);
  const auto xt = random_grid<double>(8, 8, rng);
  const auto c = random_condition(rng, 8, 8, 0);
  const auto before = predict_eps(p, xt, 100, c);
  p.params[p.params.index_of("in.w")].values[4] += 1e-3;
  const auto after = predict_eps(p, xt, 100, c);
  CHECK(max_abs_diff(before, after) > 1e-8);
}

TEST_CASE("parameter gradients match central differences on 25 random parameters") {
  const auto p = dense_tiny_model(11);
  Rng rng(12);
  std::vector<Grid<double>> xs;
  std::vector<Conditioning> cs;
  for (int i = 0; i < 2; ++i) {
    xs.push_back(random_grid<double>(8, 8, rng));
    cs.push_back(random_condition(rng, 8, 8, i));
  }
  const auto batch = make_batch<double>(xs, {37, 810}, cs);
  const auto analytic = loss_gradients(p, batch, energy<double>());
  const auto flat = analytic.grads.flatten();

  auto loss_at = [&](std::size_t idx, double value) {
    auto q = p;
    auto v = q.params.flatten();
    v[idx] = value;
    q.params.assign(v);
    return loss_gradients(q, batch, energy<double>(), nn::no_blocks()).loss;
  };
  const auto base = p.params.flatten();
  double worst = 0;
  for (int k = 0; k < 25; ++k) {
    const std::size_t idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(base.size()) - 1));
    const double fd = testing::central_difference([&](double v) { return loss_at(idx, v); }, base[idx]);
    worst = std::max(worst, rel_error(fd, flat[idx], 1e-6));
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("frozen-base gradients zero the trunk and keep the control branch") {
  const auto p = dense_tiny_model(13);
  Rng rng(14);
  const auto batch = make_batch<double>({random_grid<double>(8, 8, rng)}, {300}, {random_condition(rng, 8, 8, 1)});
  const auto g = loss_gradients(p, batch, energy<double>(), trainable_blocks(TrainMode::frozen_base));
  double trunk = 0, control = 0;
  for (const auto& b : g.grads.blocks())
    for (double v : b.values) (b.trunk ? trunk : control) += std::abs(v);
  CHECK(trunk == 0.0);
  CHECK(control > 0.0);

  const auto zero = loss_gradients(p, batch,
                                   LossBuilder<double>([](nn::Tape<double>& t, nn::Var, nn::Var eps) {
                                     return nn::scale(t, energy<double>()(t, nn::Var{}, eps), 0.0);
                                   }));
  for (const auto& b : zero.grads.blocks())
    for (double v : b.values) CHECK(v == 0.0);
}

TEST_CASE("input gradient matches central differences and scales linearly") {
  const auto p = dense_tiny_model(15);
  Rng rng(16);
  const auto xt = random_grid<double>(8, 8, rng);
  const auto c = random_condition(rng, 8, 8, 0);
  const auto g = input_gradient(p, xt, 250, c, energy<double>());
  auto loss_at = [&](int pix, double v) {
    auto x = xt;
    x.values[pix] = v;
    return loss_gradients(p, make_batch<double>({x}, {250}, {c}), energy<double>(), nn::no_blocks()).loss;
  };
  double worst = 0;
  for (int k = 0; k < 25; ++k) {
    const int pix = rng.uniform_int(0, 63);
    worst = std::max(worst, rel_error(testing::central_difference([&](double v) { return loss_at(pix, v); }, xt.values[pix]),
                                      g.values[pix], 1e-6));
  }
  CHECK(worst < 1e-4);

  const auto doubled = input_gradient(p, xt, 250, c, LossBuilder<double>([](nn::Tape<double>& t, nn::Var x, nn::Var eps) {
                                        return nn::scale(t, energy<double>()(t, x, eps), 2.0);
                                      }));
  for (std::size_t i = 0; i < g.size(); ++i) CHECK(doubled.values[i] == doctest::Approx(2 * g.values[i]).epsilon(1e-12));

  const auto none = input_gradient(p, xt, 250, c, LossBuilder<double>([](nn::Tape<double>& t, nn::Var, nn::Var) {
                                     return t.constant(nn::Tensor<double>(1, 1, 1, 1, 3.0));
                                   }));
  for (double v : none.values) CHECK(v == 0.0);
}

TEST_CASE("checkpoint round trip reproduces predictions bit for bit") {
  auto p = dense_tiny_model(17).cast<float>();
  p.dmap_scale = 12.5;
  const auto q = load_params(save_params(p));
  CHECK(q.arch == p.arch);
  CHECK(q.params == p.params);
  Rng rng(18);
  const auto xt = random_grid<float>(8, 8, rng);
  const auto c = random_condition(rng, 8, 8, 1);
  CHECK(predict_eps(q, xt, 77, c) == predict_eps(p, xt, 77, c));
}

TEST_CASE("corrupt checkpoints raise FormatError") {
  const Bytes good = save_params(init_model(tiny_arch(), 19));
  CHECK(std::string(good.begin(), good.begin() + 5) == "DNSR1");

  Bytes version = good;
  version[5] ^= 0x7f;
  CHECK_THROWS_AS(load_params(version), FormatError);

  Bytes truncated(good.begin(), good.end() - 3);
  CHECK_THROWS_AS(load_params(truncated), FormatError);

  Bytes magic = good;
  magic[0] = 'X';
  CHECK_THROWS_AS(load_params(magic), FormatError);

  Bytes arch = good;
  arch[6] = 3;  // first width no longer a multiple of the group count
  CHECK_THROWS_AS(load_params(arch), FormatError);

  Bytes extra = good;
  extra.push_back(1);
  CHECK_THROWS_AS(load_params(extra), FormatError);
}
