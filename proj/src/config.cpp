#include "cdaug/config.hpp"

#include "cdaug/io.hpp"

namespace cdaug {

namespace {

using nlohmann::json;

// Every key in `user` must exist in `schema`; objects are checked recursively.
void check_keys(const json& user, const json& schema, const std::string& path) {
  if (!user.is_object()) throw ConfigError("config: '" + (path.empty() ? "<root>" : path) + "' must be an object");
  for (const auto& [key, value] : user.items()) {
    const std::string here = path.empty() ? key : path + "." + key;
    if (!schema.contains(key)) throw ConfigError("config: unknown key '" + here + "'");
    if (schema.at(key).is_object()) check_keys(value, schema.at(key), here);
  }
}

template <typename V>
V get(const json& j, const char* section, const char* key) {
  try {
    return j.at(section).at(key).get<V>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: '") + section + "." + key + "' is missing or has the wrong type");
  }
}

std::string mode_name(TrainMode m) { return m == TrainMode::joint ? "joint" : "frozen-base"; }
std::string gate_name(GateDirection d) { return d == GateDirection::below ? "below" : "above"; }

}  // namespace

Seeds resolve_seeds(std::uint64_t master) {
  return {master,
          derive_seed(master, "corpus"),
          derive_seed(master, "counter"),
          derive_seed(master, "train"),
          derive_seed(master, "sample"),
          derive_seed(master, "mix"),
          derive_seed(master, "downstream")};
}

RunConfig with_resolved_seeds(RunConfig cfg) {
  const Seeds s = resolve_seeds(cfg.seed);
  cfg.corpus.seed = s.corpus;
  cfg.counter.seed = s.counter;
  cfg.train.seed = s.train;
  cfg.sampler.seed = s.sample;
  return cfg;
}

json to_json(const Seeds& s) {
  return {{"master", s.master}, {"corpus", s.corpus},   {"counter", s.counter},      {"train", s.train},
          {"sample", s.sample}, {"mix", s.mix}, {"downstream", s.downstream}};
}

json to_json(const RunConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["corpus"] = {{"train_scenes", c.corpus.train_scenes}, {"test_scenes", c.corpus.test_scenes},
                 {"min_count", c.corpus.min_count},       {"max_count", c.corpus.max_count},
                 {"width", c.corpus.width},               {"height", c.corpus.height}};
  j["schedule"] = {{"T", c.schedule.T}, {"beta_start", c.schedule.beta_start}, {"beta_end", c.schedule.beta_end}};
  j["arch"] = {{"widths", c.arch.widths},
               {"groups", c.arch.groups},
               {"time_dim", c.arch.time_dim},
               {"emb_dim", c.arch.emb_dim}};
  j["train"] = {{"lambda", c.train.auto_lambda ? json("auto") : json(c.train.lambda)},
                {"auto_lambda_batches", c.train.auto_lambda_batches},
                {"t_threshold", c.train.t_threshold},
                {"learn_rate", c.train.learn_rate},
                {"dropout_ratio", c.train.dropout_ratio},
                {"epochs", c.train.epochs},
                {"pretrain_epochs", c.train.pretrain_epochs},
                {"batch_size", c.train.batch_size},
                {"mode", mode_name(c.train.mode)},
                {"gate_direction", gate_name(c.train.gate_direction)},
                {"clamp_x0", c.train.clamp_x0}};
  j["sampler"] = {{"s", c.sampler.s},
                  {"steps", c.sampler.steps},
                  {"clamp_x0", c.sampler.clamp_x0},
                  {"full_backprop_guidance", c.sampler.full_backprop_guidance}};
  j["counter"] = {{"hidden", c.counter.arch.hidden},
                  {"epochs", c.counter.epochs},
                  {"batch_size", c.counter.batch_size},
                  {"learn_rate", c.counter.learn_rate}};
  j["augment"] = {{"per_image", c.per_image}};
  j["mix"] = {{"ratio", c.mix_ratio}, {"sweep", c.sweep_ratios}};
  return j;
}

RunConfig run_config_from_json(const json& j) {
  check_keys(j, to_json(RunConfig{}), "");
  RunConfig c;
  if (!j.contains("seed") || !j.at("seed").is_number_unsigned()) {
    throw ConfigError("config: 'seed' must be a nonnegative integer");
  }
  c.seed = j.at("seed").get<std::uint64_t>();
  c.corpus.train_scenes = get<int>(j, "corpus", "train_scenes");
  c.corpus.test_scenes = get<int>(j, "corpus", "test_scenes");
  c.corpus.min_count = get<int>(j, "corpus", "min_count");
  c.corpus.max_count = get<int>(j, "corpus", "max_count");
  c.corpus.width = get<int>(j, "corpus", "width");
  c.corpus.height = get<int>(j, "corpus", "height");

  c.schedule.T = get<int>(j, "schedule", "T");
  c.schedule.beta_start = get<double>(j, "schedule", "beta_start");
  c.schedule.beta_end = get<double>(j, "schedule", "beta_end");

  c.arch.widths = get<std::array<int, 3>>(j, "arch", "widths");
  c.arch.groups = get<int>(j, "arch", "groups");
  c.arch.time_dim = get<int>(j, "arch", "time_dim");
  c.arch.emb_dim = get<int>(j, "arch", "emb_dim");
  c.arch.tags = kSceneTags;

  const json& lam = j.at("train").at("lambda");
  if (lam.is_string()) {
    if (lam.get<std::string>() != "auto") throw ConfigError("config: 'train.lambda' must be a number or \"auto\"");
    c.train.auto_lambda = true;
  } else {
    c.train.lambda = get<double>(j, "train", "lambda");
  }
  c.train.auto_lambda_batches = get<int>(j, "train", "auto_lambda_batches");
  c.train.t_threshold = get<int>(j, "train", "t_threshold");
  c.train.learn_rate = get<double>(j, "train", "learn_rate");
  c.train.dropout_ratio = get<double>(j, "train", "dropout_ratio");
  c.train.epochs = get<int>(j, "train", "epochs");
  c.train.pretrain_epochs = get<int>(j, "train", "pretrain_epochs");
  c.train.batch_size = get<int>(j, "train", "batch_size");
  const auto mode = get<std::string>(j, "train", "mode");
  if (mode == "joint") {
    c.train.mode = TrainMode::joint;
  } else if (mode == "frozen-base") {
    c.train.mode = TrainMode::frozen_base;
  } else {
    throw ConfigError("config: 'train.mode' must be \"joint\" or \"frozen-base\"");
  }
  const auto gate = get<std::string>(j, "train", "gate_direction");
  if (gate == "below") {
    c.train.gate_direction = GateDirection::below;
  } else if (gate == "above") {
    c.train.gate_direction = GateDirection::above;
  } else {
    throw ConfigError("config: 'train.gate_direction' must be \"below\" or \"above\"");
  }
  c.train.clamp_x0 = get<bool>(j, "train", "clamp_x0");

  c.sampler.s = get<double>(j, "sampler", "s");
  c.sampler.steps = get<int>(j, "sampler", "steps");
  c.sampler.clamp_x0 = get<bool>(j, "sampler", "clamp_x0");
  c.sampler.full_backprop_guidance = get<bool>(j, "sampler", "full_backprop_guidance");

  c.counter.arch.hidden = get<std::array<int, 4>>(j, "counter", "hidden");
  c.counter.epochs = get<int>(j, "counter", "epochs");
  c.counter.batch_size = get<int>(j, "counter", "batch_size");
  c.counter.learn_rate = get<double>(j, "counter", "learn_rate");

  c.per_image = get<int>(j, "augment", "per_image");
  c.mix_ratio = get<double>(j, "mix", "ratio");
  c.sweep_ratios = get<std::vector<double>>(j, "mix", "sweep");
  validate(c);
  return with_resolved_seeds(c);
}

void validate(const RunConfig& c) {
  if (c.corpus.width <= 0 || c.corpus.height <= 0) throw ConfigError("config: corpus size must be positive");
  if (c.corpus.width % 4 != 0 || c.corpus.height % 4 != 0) {
    throw ConfigError("config: corpus width and height must be multiples of 4");
  }
  if (c.schedule.T <= 0) throw ConfigError("config: schedule.T must be positive");
  validate(c.arch);
  validate(c.train, c.schedule.T);
  validate(c.sampler, c.schedule.T);
  if (c.per_image < 0) throw ConfigError("config: augment.per_image must be nonnegative");
  auto ratio_ok = [](double r) { return r >= 0.0 && r <= 1.0; };
  if (!ratio_ok(c.mix_ratio)) throw ConfigError("config: mix.ratio must lie in [0, 1]");
  for (double r : c.sweep_ratios)
    if (!ratio_ok(r)) throw ConfigError("config: every mix.sweep ratio must lie in [0, 1]");
  if (c.counter.epochs < 0 || c.counter.batch_size <= 0 || !(c.counter.learn_rate > 0.0)) {
    throw ConfigError("config: counter needs epochs >= 0, batch_size > 0, learn_rate > 0");
  }
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  json value = json::parse(raw, nullptr, false);
  if (value.is_discarded()) value = raw;

  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || !node->contains(part)) throw ConfigError("override: unknown key '" + key + "'");
    node = &(*node)[part];
    if (dot == std::string::npos) break;
    start = dot + 1;
  }
  *node = std::move(value);
}

RunConfig load_run_config(const std::filesystem::path& file, const std::vector<std::string>& overrides,
                          const RunConfig& base) {
  json j = to_json(base);
  if (!file.empty()) {
    json patch;
    try {
      patch = json::parse(read_text(file));
    } catch (const json::exception& e) {
      throw ConfigError("config file '" + file.string() + "': " + e.what());
    }
    check_keys(patch, j, "");
    j.merge_patch(patch);
  }
  for (const auto& o : overrides) apply_override(j, o);
  return run_config_from_json(j);
}

RunConfig smoke_config() {
  RunConfig c;
  c.corpus.train_scenes = 8;
  c.corpus.test_scenes = 2;
  c.schedule.T = 50;
  c.arch.widths = {8, 16, 16};
  c.arch.groups = 4;
  c.arch.time_dim = 16;
  c.arch.emb_dim = 32;
  c.train.epochs = 2;
  c.train.pretrain_epochs = 1;
  c.train.batch_size = 4;
  c.train.learn_rate = 1e-3;
  c.sampler.steps = 5;
  c.counter.epochs = 2;
  c.counter.arch.hidden = {4, 8, 8, 4};
  c.per_image = 1;
  return with_resolved_seeds(c);
}

}  // namespace cdaug
