#include <cmath>
#include <map>
#include <set>

#include "doctest.h"
#include "helpers.hpp"

#include "cdaug/corpus.hpp"
#include "cdaug/io.hpp"

using namespace cdaug;

namespace {

bool on_tenth_grid(double v) { return std::abs(v * 10 - std::round(v * 10)) < 1e-6; }

std::vector<LabeledImage> labeled(int n, int tag, const std::string& prefix) {
  std::vector<LabeledImage> out;
  for (int i = 0; i < n; ++i) out.push_back({prefix + std::to_string(i), ImageGrid(8, 8), DensityMap{Grid<float>(8, 8), 4.0}, i, tag});
  return out;
}

}  // namespace

TEST_CASE("scenes are deterministic and respect placement rules") {
  Rng rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    const SceneSpec spec{rng.uniform_int(0, 30), trial % kSceneTags, rng.next_u64(), 64, 64};
    const Scene a = generate_scene(spec), b = generate_scene(spec);
    CHECK(a.image == b.image);
    CHECK(a.dots == b.dots);
    REQUIRE(a.dots.count() == static_cast<std::size_t>(spec.n));
    CHECK(a.image.height == 64);
    for (float v : a.image.values) {
      CHECK(v >= -1.0f);
      CHECK(v <= 1.0f);
    }
    for (std::size_t i = 0; i < a.dots.points.size(); ++i) {
      const Point& p = a.dots.points[i];
      CHECK(on_tenth_grid(p.x));
      CHECK(on_tenth_grid(p.y));
      CHECK(p.x >= 3.0);
      CHECK(p.y >= 3.0);
      CHECK(p.x <= 61.0);
      CHECK(p.y <= 61.0);
      for (std::size_t j = 0; j < i; ++j) {
        const Point& q = a.dots.points[j];
        CHECK(std::hypot(p.x - q.x, p.y - q.y) >= kMinDotSeparation - 1e-9);
      }
    }
  }
}

TEST_CASE("discs are brighter than the background around them") {
  for (int tag = 0; tag < kSceneTags; ++tag) {
    const SceneSpec spec{12, tag, 99, 64, 64};
    const Scene withdots = generate_scene(spec);
    const Scene empty = generate_scene({0, tag, 99, 64, 64});
    double gain = 0;
    for (const Point& p : withdots.dots.points) {
      const int r = static_cast<int>(p.y), c = static_cast<int>(p.x);
      gain += withdots.image.at(r, c) - empty.image.at(r, c);
    }
    CHECK(gain / 12 > 0.5 * kDiscContrast);
  }
  CHECK_FALSE(generate_scene({0, 0, 5, 64, 64}).image == generate_scene({0, 2, 5, 64, 64}).image);
  CHECK_FALSE(generate_scene({5, 1, 5, 64, 64}).dots == generate_scene({5, 1, 6, 64, 64}).dots);
}

TEST_CASE("scene generation validates its inputs") {
  CHECK_THROWS_AS(generate_scene({-1, 0, 1, 64, 64}), ConfigError);
  CHECK_THROWS_AS(generate_scene({1, kSceneTags, 1, 64, 64}), BoundsError);
  CHECK_THROWS_AS(generate_scene({1, 0, 1, 6, 6}), ConfigError);
  // Far more dots than fit at the minimum separation.
  CHECK_THROWS_AS(generate_scene({2000, 0, 1, 16, 16}), ConfigError);
}

TEST_CASE("corpus plan covers every count stratum and is seed determined") {
  CorpusConfig cfg;
  cfg.seed = 3;
  const auto plan = plan_corpus(cfg);
  REQUIRE(plan.size() == 250);
  CHECK(plan_corpus(cfg) == plan);
  std::map<std::string, int> splits;
  std::set<std::string> ids;
  std::set<int> tags;
  int low = 0, mid = 0, high = 0;
  for (const auto& r : plan) {
    ++splits[r.split];
    ids.insert(r.scene_id);
    tags.insert(r.tag);
    CHECK(r.n >= 0);
    CHECK(r.n <= 30);
    (r.n < 10 ? low : r.n < 20 ? mid : high)++;
  }
  CHECK(splits["train"] == 200);
  CHECK(splits["test"] == 50);
  CHECK(ids.size() == 250);
  CHECK(tags.size() == static_cast<std::size_t>(kSceneTags));
  CHECK(low > 0);
  CHECK(mid > 0);
  CHECK(high > 0);

  cfg.seed = 4;
  CHECK_FALSE(plan_corpus(cfg) == plan);
  cfg.max_count = -1;
  CHECK_THROWS_AS(plan_corpus(cfg), ConfigError);
}

TEST_CASE("generated corpus on disk matches its plan and renders") {
  testing::TempDir dir("corpus");
  CorpusConfig cfg;
  cfg.train_scenes = 6;
  cfg.test_scenes = 3;
  cfg.width = 32;
  cfg.height = 24;
  cfg.max_count = 8;
  cfg.seed = 7;
  const auto plan = generate_corpus(cfg, dir.path());
  CHECK(read_manifest(dir.path()) == plan);

  for (const auto& r : plan) {
    const auto base = dir.path() / r.split / r.scene_id;
    const Scene s = generate_scene({r.n, r.tag, r.seed, 32, 24});
    CHECK(read_file(base.string() + ".pgm") == write_pgm(s.image));
    CHECK(parse_dots(read_text(base.string() + ".dots")) == parse_dots(format_dots(s.dots)));
    CHECK(read_density(read_file(base.string() + ".dmap")).values == render_density(s.dots).values);
  }

  const auto train = load_split(dir.path(), "train");
  const auto test = load_split(dir.path(), "test");
  REQUIRE(train.size() == 6);
  REQUIRE(test.size() == 3);
  for (std::size_t i = 0; i < test.size(); ++i) {
    const auto& r = plan[6 + i];
    CHECK(test[i].id == r.scene_id);
    CHECK(test[i].count == r.n);
    CHECK(test[i].tag == r.tag);
    CHECK(test[i].image.width == 32);
    CHECK(test[i].density.values.height == 24);
  }

  testing::TempDir again("corpus2");
  generate_corpus(cfg, again.path());
  CHECK(read_text(again.path() / "manifest.json") == read_text(dir.path() / "manifest.json"));
  CHECK(read_file(again.path() / "train" / (plan[2].scene_id + ".pgm")) ==
        read_file(dir.path() / "train" / (plan[2].scene_id + ".pgm")));
}

TEST_CASE("corrupt corpus files are reported") {
  testing::TempDir dir("corpusbad");
  CorpusConfig cfg;
  cfg.train_scenes = 1;
  cfg.test_scenes = 0;
  cfg.width = cfg.height = 16;
  cfg.max_count = 2;
  const auto plan = generate_corpus(cfg, dir.path());
  write_text(dir.path() / "train" / (plan[0].scene_id + ".dots"), "20,16\n");
  CHECK_THROWS_AS(load_labeled(dir.path() / "train", plan[0].scene_id), ShapeError);
  write_text(dir.path() / "manifest.json", "{\"scenes\": [{\"scene_id\": 3}]}");
  CHECK_THROWS_AS(read_manifest(dir.path()), ParseError);
  write_text(dir.path() / "manifest.json", "not json");
  CHECK_THROWS_AS(read_manifest(dir.path()), ParseError);
}

TEST_CASE("mixed sampler draws synthetic items at the requested rate") {
  const auto real = labeled(10, 0, "r");
  const auto synth = labeled(5, 1, "s");
  for (double ratio : {0.0, 0.25, 0.5, 1.0}) {
    MixedSampler m(real, synth, ratio, 11);
    std::map<std::string, int> hits;
    for (int i = 0; i < 20000; ++i) {
      const LabeledImage& x = m.next();
      CHECK(m.last_was_synthetic() == (x.id[0] == 's'));
      ++hits[x.id];
    }
    CHECK(m.draws() == 20000);
    const double rate = static_cast<double>(m.synthetic_draws()) / 20000;
    CHECK(std::abs(rate - ratio) <= 0.02);
    if (ratio == 0.0) CHECK(m.synthetic_draws() == 0);
    if (ratio == 1.0) CHECK(m.synthetic_draws() == 20000);
    // Uniform within each set.
    if (ratio > 0.0 && ratio < 1.0) {
      for (const auto& s : synth) CHECK(hits[s.id] == doctest::Approx(20000 * ratio / 5).epsilon(0.15));
      for (const auto& r : real) CHECK(hits[r.id] == doctest::Approx(20000 * (1 - ratio) / 10).epsilon(0.15));
    }
  }

  MixedSampler a(real, synth, 0.5, 12), b(real, synth, 0.5, 12);
  for (int i = 0; i < 100; ++i) CHECK(a.next().id == b.next().id);

  const std::vector<LabeledImage> none;
  CHECK_NOTHROW(MixedSampler(real, none, 0.0, 1));
  CHECK_THROWS_AS(MixedSampler(real, none, 0.1, 1), ConfigError);
  CHECK_THROWS_AS(MixedSampler(none, synth, 0.5, 1), ConfigError);
  CHECK_NOTHROW(MixedSampler(none, synth, 1.0, 1));
  CHECK_THROWS_AS(MixedSampler(real, synth, 1.5, 1), ConfigError);
  CHECK_THROWS_AS(MixedSampler(real, synth, -0.1, 1), ConfigError);
}
