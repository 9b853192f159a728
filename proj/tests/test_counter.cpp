#include <cmath>
#include <numeric>

#include "doctest.h"
#include "helpers.hpp"

#include "cdaug/corpus.hpp"
#include "cdaug/counter.hpp"

using namespace cdaug;
using testing::dense_tiny_counter;
using testing::random_grid;
using testing::rel_error;

namespace {

std::vector<LabeledImage> small_corpus(int scenes, int size, std::uint64_t seed) {
  std::vector<LabeledImage> out;
  Rng rng(seed);
  for (int i = 0; i < scenes; ++i) {
    const int n = rng.uniform_int(0, 6);
    const Scene s = generate_scene({n, i % kSceneTags, rng.next_u64(), size, size});
    out.push_back({"s" + std::to_string(i), s.image, render_density(s.dots), n, i % kSceneTags});
  }
  return out;
}

}  // namespace

TEST_CASE("metrics on hand-computed examples") {
  const std::vector<double> preds{2, 4}, gts{1, 6};
  const Metrics m = compute_metrics(preds, gts);
  CHECK(m.n == 2);
  CHECK(m.mae == doctest::Approx(1.5));
  CHECK(m.mse == doctest::Approx(std::sqrt(2.5)));
  CHECK(m.mse == doctest::Approx(1.5811).epsilon(1e-4));

  const std::vector<double> same{3, 12, 25};
  const Metrics z = compute_metrics(same, same);
  CHECK(z.mae == 0.0);
  CHECK(z.mse == 0.0);

  const std::vector<double> one_p{7.5}, one_g{5};
  const Metrics single = compute_metrics(one_p, one_g);
  CHECK(single.mae == 2.5);
  CHECK(single.mse == 2.5);
}

TEST_CASE("metrics agree with brute-force accumulation and strata recombine") {
  Rng rng(1);
  std::vector<double> preds, gts;
  for (int i = 0; i < 1000; ++i) {
    gts.push_back(rng.uniform_int(0, 30));
    preds.push_back(gts.back() + rng.normal() * 3.0);
  }
  const Metrics m = compute_metrics(preds, gts);
  long double abs_sum = 0, sq_sum = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    abs_sum += std::abs(preds[i] - gts[i]);
    sq_sum += (preds[i] - gts[i]) * (preds[i] - gts[i]);
  }
  CHECK(m.mae * m.n == doctest::Approx(static_cast<double>(abs_sum)).epsilon(1e-12));
  CHECK(m.mse * m.mse * m.n == doctest::Approx(static_cast<double>(sq_sum)).epsilon(1e-12));

  REQUIRE(m.per_stratum.size() == 3);
  std::size_t total = 0;
  double weighted = 0, weighted_sq = 0;
  for (const auto& s : m.per_stratum) {
    total += s.n;
    weighted += s.n * s.mae;
    weighted_sq += s.n * s.mse * s.mse;
    CHECK(s.mae >= 0.0);
    CHECK(s.mse >= 0.0);
  }
  CHECK(total == m.n);
  CHECK(weighted == doctest::Approx(m.n * m.mae).epsilon(1e-12));
  CHECK(weighted_sq == doctest::Approx(m.n * m.mse * m.mse).epsilon(1e-12));
}

TEST_CASE("default strata split at 10 and 20") {
  const auto s = default_strata();
  REQUIRE(s.size() == 3);
  CHECK(s[0].contains(0));
  CHECK(s[0].contains(9));
  CHECK_FALSE(s[0].contains(10));
  CHECK(s[1].contains(10));
  CHECK(s[1].contains(19));
  CHECK(s[2].contains(20));
  CHECK(s[2].contains(1000));
  const std::vector<double> g{5, 15, 25, 25}, p{5, 14, 27, 25};
  const Metrics m = compute_metrics(p, g);
  CHECK(m.per_stratum[0].n == 1);
  CHECK(m.per_stratum[1].mae == 1.0);
  CHECK(m.per_stratum[2].n == 2);
  CHECK(m.per_stratum[2].mae == 1.0);
  CHECK(m.per_stratum[2].mse == doctest::Approx(std::sqrt(2.0)));
  const auto j = to_json(m);
  CHECK(j["strata"][2]["hi"].is_null());
  CHECK(j["strata"][1]["lo"] == 10);
}

TEST_CASE("untrained counter predicts an all-zero map") {
  const auto p = init_counter(CounterArch{}, 1);
  Rng rng(2);
  const auto img = random_grid<float>(16, 12, rng);
  const DensityMap d = predict_density(p, img);
  CHECK(d.height() == 16);
  CHECK(d.width() == 12);
  for (float v : d.values.values) CHECK(v == 0.0f);
  CHECK(count(p, img) == 0.0);
}

TEST_CASE("predictions are nonnegative and count is their sum") {
  const auto p = dense_tiny_counter(3);
  Rng rng(4);
  for (int trial = 0; trial < 5; ++trial) {
    const auto img = random_grid<double>(8, 8, rng);
    const auto d = predict_density_grid(p, img);
    double s = 0;
    for (double v : d.values) {
      CHECK(v >= 0.0);
      s += v;
    }
    CHECK(count(p, img) == s);
  }
}

TEST_CASE("counting loss oracles") {
  // All weights zero except the head bias: the prediction is that bias everywhere.
  auto p = init_counter(testing::tiny_counter_arch(), 5).cast<double>();
  for (auto& b : p.params.blocks()) std::fill(b.values.begin(), b.values.end(), 0.0);
  p.params.blocks().back().values[0] = 0.3;
  Rng rng(6);
  const auto img = random_grid<double>(6, 6, rng);
  CHECK(counting_loss(p, img, Grid<double>(6, 6)) == doctest::Approx(36 * 0.09).epsilon(1e-12));

  const auto zero_model = init_counter(testing::tiny_counter_arch(), 5).cast<double>();
  Grid<double> single(6, 6);
  single.at(2, 3) = 0.7;
  CHECK(counting_loss(zero_model, img, single) == doctest::Approx(0.49).epsilon(1e-12));

  const auto dense = dense_tiny_counter(7);
  const auto y = random_grid<double>(6, 6, rng, 0.0, 0.2);
  const auto pred = predict_density_grid(dense, img);
  long double brute = 0;
  for (std::size_t i = 0; i < y.size(); ++i) brute += (pred.values[i] - y.values[i]) * (pred.values[i] - y.values[i]);
  CHECK(counting_loss(dense, img, y) == doctest::Approx(static_cast<double>(brute)).epsilon(1e-12));
  CHECK(counting_loss(dense, img, pred) == 0.0);
}

TEST_CASE("counting input gradient matches central differences") {
  const auto p = dense_tiny_counter(8);
  Rng rng(9);
  const auto img = random_grid<double>(8, 8, rng);
  for (double y_scale : {1.0, 3.0}) {
    auto y = random_grid<double>(8, 8, rng, 0.0, 0.1);
    for (double& v : y.values) v *= y_scale;
    const auto g = counting_input_gradient(p, img, y);
    double worst = 0;
    for (int k = 0; k < 25; ++k) {
      const int pix = rng.uniform_int(0, 63);
      auto f = [&](double v) {
        auto x = img;
        x.values[pix] = v;
        return counting_loss(p, x, y);
      };
      worst = std::max(worst, rel_error(testing::central_difference(f, img.values[pix]), g.values[pix], 1e-6));
    }
    CHECK(worst < 1e-4);
  }

  const auto at_fixed_point = counting_input_gradient(p, img, predict_density_grid(p, img));
  for (double v : at_fixed_point.values) CHECK(v == 0.0);
}

TEST_CASE("counter checkpoints round trip and reject corruption") {
  const auto p = dense_tiny_counter(10).cast<float>();
  const Bytes bytes = save_counter(p);
  const auto q = load_counter(bytes);
  CHECK(q.arch == p.arch);
  Rng rng(11);
  const auto img = random_grid<float>(8, 8, rng);
  CHECK(predict_density_grid(q, img) == predict_density_grid(p, img));

  Bytes version = bytes;
  version[5] = 9;
  CHECK_THROWS_AS(load_counter(version), FormatError);
  CHECK_THROWS_AS(load_counter(Bytes(bytes.begin(), bytes.end() - 1)), FormatError);
  Bytes magic = bytes;
  magic[1] = 'X';
  CHECK_THROWS_AS(load_counter(magic), FormatError);
}

TEST_CASE("training is deterministic and its loss decreases") {
  const auto corpus = small_corpus(32, 16, 12);
  CounterTrainConfig cfg;
  cfg.arch = {{4, 8, 8, 4}};
  cfg.epochs = 30;
  cfg.batch_size = 8;
  cfg.learn_rate = 1e-3;
  cfg.seed = 13;
  const auto a = train_counter(corpus, cfg);
  const auto b = train_counter(corpus, cfg);
  CHECK(a.params.params == b.params.params);
  REQUIRE(a.epoch_loss.size() == 30);

  std::vector<double> ma;
  for (std::size_t e = 4; e < a.epoch_loss.size(); ++e)
    ma.push_back(std::accumulate(a.epoch_loss.begin() + e - 4, a.epoch_loss.begin() + e + 1, 0.0) / 5);
  for (std::size_t i = 1; i < ma.size(); ++i) CHECK(ma[i] <= ma[i - 1]);
  CHECK(a.epoch_loss.back() < a.epoch_loss.front());

  cfg.seed = 14;
  CHECK_FALSE(train_counter(corpus, cfg).params.params == a.params.params);
}

TEST_CASE("constant images with zero targets fit to near-zero predictions") {
  std::vector<LabeledImage> corpus;
  for (int i = 0; i < 4; ++i)
    corpus.push_back({"c" + std::to_string(i), ImageGrid(8, 8, 0.25f), DensityMap{Grid<float>(8, 8), 4.0}, 0, 0});
  CounterTrainConfig cfg;
  cfg.arch = testing::tiny_counter_arch();
  cfg.epochs = 5;
  cfg.seed = 15;
  const auto res = train_counter(corpus, cfg);
  CHECK(std::abs(count(res.params, corpus[0].image)) < 1e-3);

  // A uniform nonzero target is reachable through the head bias alone.
  for (auto& s : corpus) s.density.values = Grid<float>(8, 8, 0.05f);
  cfg.epochs = 300;
  cfg.learn_rate = 1e-2;
  const auto fit = train_counter(corpus, cfg);
  CHECK(count(fit.params, corpus[0].image) == doctest::Approx(64 * 0.05).epsilon(0.05));
}

TEST_CASE("evaluate compares predicted counts with dot counts") {
  const auto corpus = small_corpus(5, 16, 16);
  const auto p = init_counter(testing::tiny_counter_arch(), 17);
  const Metrics m = evaluate(p, corpus);
  double expected = 0;
  for (const auto& s : corpus) expected += s.count;
  CHECK(m.n == 5);
  CHECK(m.mae == doctest::Approx(expected / 5));
}
