#include "cdaug/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>

#include "cdaug/corpus.hpp"
#include "cdaug/io.hpp"
#include "cdaug/sample.hpp"
#include "cdaug/schedule.hpp"
#include "cdaug/train.hpp"

namespace cdaug {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kStampFile = "stamp.json";
constexpr const char* kReportSchema = "cdaug-report/1";

std::uint64_t outputs_hash(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file() && e.path().filename() != kStampFile) files.push_back(fs::relative(e.path(), dir));
  std::sort(files.begin(), files.end());
  std::uint64_t h = fnv1a64(std::string_view("outputs"));
  for (const auto& f : files) {
    h = fnv1a64(f.generic_string(), h);
    h = fnv1a64(read_file(dir / f), h);
  }
  return h;
}

std::string fresh_nonce() {
  std::random_device rd;
  return hex64((static_cast<std::uint64_t>(rd()) << 32) ^ rd());
}

struct StepDef {
  std::string name;
  json config;
  std::vector<std::string> inputs;
  std::function<void(const fs::path& dir)> run;
};

class Engine {
 public:
  explicit Engine(fs::path work) : work_(std::move(work)) {}

  void ensure(const StepDef& step) {
    const fs::path dir = work_ / step.name;
    const std::string config_hash = hex64(fnv1a64(step.config.dump()));
    json inputs = json::object();
    for (const auto& in : step.inputs) inputs[in] = nonces_.at(in);

    const fs::path stamp_path = dir / kStampFile;
    if (fs::exists(stamp_path)) {
      json stamp;
      try {
        stamp = json::parse(read_text(stamp_path));
      } catch (const json::exception& e) {
        throw StalenessError("step '" + step.name + "': unreadable stamp: " + e.what());
      }
      if (stamp.value("config_hash", "") == config_hash && stamp.value("inputs", json()) == inputs) {
        if (hex64(outputs_hash(dir)) != stamp.value("outputs_hash", "")) {
          throw StalenessError("step '" + step.name + "': outputs in " + dir.string() +
                               " no longer match their recorded hash");
        }
        nonces_[step.name] = stamp.at("nonce").get<std::string>();
        return;
      }
    }

    fs::remove_all(dir);
    fs::create_directories(dir);
    const auto started = std::chrono::steady_clock::now();
    try {
      step.run(dir);
    } catch (const StepError&) {
      throw;
    } catch (const std::exception& e) {
      throw StepError(step.name, e.what());
    }
    const std::string nonce = fresh_nonce();
    const json stamp = {{"step", step.name},
                        {"config_hash", config_hash},
                        {"inputs", inputs},
                        {"outputs_hash", hex64(outputs_hash(dir))},
                        {"nonce", nonce}};
    write_text(stamp_path, stamp.dump(2) + "\n");
    nonces_[step.name] = nonce;
    executed_.push_back(step.name);
    std::ofstream log(work_ / "run_log.jsonl", std::ios::app);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    log << json{{"executed", step.name}, {"seconds", seconds}}.dump() << "\n";
  }

  const std::vector<std::string>& executed() const { return executed_; }

 private:
  fs::path work_;
  std::map<std::string, std::string> nonces_;
  std::vector<std::string> executed_;
};

NoiseSchedule schedule_of(const RunConfig& cfg) {
  return build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end);
}

std::vector<StepDef> step_defs(const RunConfig& cfg, const fs::path& work) {
  const json full = to_json(cfg);
  const Seeds seeds = resolve_seeds(cfg.seed);
  const fs::path corpus_dir = work / "corpus";
  const fs::path counter_file = work / "counter" / "counter.cntr";
  const fs::path model_file = work / "diffusion" / "model.dnsr";
  const fs::path synthetic_dir = work / "sample";

  std::vector<StepDef> steps;
  steps.push_back({"corpus", {{"seed", seeds.corpus}, {"corpus", full["corpus"]}}, {}, [cfg](const fs::path& dir) {
                     generate_corpus(cfg.corpus, dir);
                   }});
  steps.push_back({"counter",
                   {{"seed", seeds.counter}, {"counter", full["counter"]}},
                   {"corpus"},
                   [cfg, corpus_dir](const fs::path& dir) {
                     const auto res = train_counter(load_split(corpus_dir, "train"), cfg.counter);
                     write_file(dir / "counter.cntr", save_counter(res.params));
                   }});
  steps.push_back({"diffusion",
                   {{"seed", seeds.train}, {"schedule", full["schedule"]}, {"arch", full["arch"]}, {"train", full["train"]}},
                   {"corpus", "counter"},
                   [cfg, corpus_dir, counter_file](const fs::path& dir) {
                     const auto counter = load_counter(read_file(counter_file));
                     std::ostringstream telemetry;
                     const auto res =
                         train_diffusion(load_split(corpus_dir, "train"), counter, cfg.train, schedule_of(cfg), cfg.arch,
                                         [&](const EpochStats& e) { telemetry << to_json(e).dump() << "\n"; });
                     write_file(dir / "model.dnsr", save_params(res.params));
                     write_text(dir / "telemetry.jsonl", telemetry.str());
                     write_text(dir / "info.json", json{{"lambda", res.lambda}}.dump(2) + "\n");
                   }});
  steps.push_back({"sample",
                   {{"seed", seeds.sample}, {"schedule", full["schedule"]}, {"sampler", full["sampler"]},
                    {"augment", full["augment"]}},
                   {"corpus", "counter", "diffusion"},
                   [cfg, corpus_dir, counter_file, model_file](const fs::path& dir) {
                     batch_sample(load_params(read_file(model_file)), load_counter(read_file(counter_file)),
                                  corpus_dir / "train", cfg.per_image, cfg.sampler, schedule_of(cfg), dir);
                   }});
  steps.push_back({"downstream",
                   {{"seeds", {seeds.mix, seeds.downstream}}, {"counter", full["counter"]}, {"ratio", cfg.mix_ratio}},
                   {"corpus", "sample"},
                   [cfg, corpus_dir, synthetic_dir](const fs::path& dir) {
                     const auto real = load_split(corpus_dir, "train");
                     write_file(dir / "baseline.cntr", save_counter(train_downstream(cfg, real, synthetic_dir, 0.0)));
                     write_file(dir / "augmented.cntr",
                                save_counter(train_downstream(cfg, real, synthetic_dir, cfg.mix_ratio)));
                   }});
  steps.push_back({"evaluate",
                   {{"schema", kReportSchema}, {"config", full}},
                   {"corpus", "diffusion", "sample", "downstream"},
                   [cfg, work, corpus_dir, synthetic_dir](const fs::path& dir) {
                     const auto test = load_split(corpus_dir, "test");
                     const Metrics base = evaluate(load_counter(read_file(work / "downstream" / "baseline.cntr")), test);
                     const Metrics aug = evaluate(load_counter(read_file(work / "downstream" / "augmented.cntr")), test);
                     const json info = json::parse(read_text(work / "diffusion" / "info.json"));
                     json baseline = to_json(base), augmented = to_json(aug);
                     baseline["ratio"] = 0.0;
                     augmented["ratio"] = cfg.mix_ratio;
                     const json report = {
                         {"schema", kReportSchema},
                         {"seeds", to_json(resolve_seeds(cfg.seed))},
                         {"config", to_json(cfg)},
                         {"lambda", info.at("lambda")},
                         {"synthetic_images", read_synthetic_manifest(synthetic_dir).size()},
                         {"test_scenes", test.size()},
                         {"baseline", baseline},
                         {"augmented", augmented},
                         {"strata", {{"baseline", stratified_report(base)}, {"augmented", stratified_report(aug)}}}};
                     write_text(dir / "report.json", report.dump(2) + "\n");
                   }});
  return steps;
}

}  // namespace

CounterParams<float> train_downstream(const RunConfig& cfg, const std::vector<LabeledImage>& real,
                                      const fs::path& synthetic_dir, double ratio) {
  const std::vector<LabeledImage> synthetic = ratio > 0.0 ? load_synthetic(synthetic_dir) : std::vector<LabeledImage>{};
  const Seeds seeds = resolve_seeds(cfg.seed);
  MixedSampler sampler(real, synthetic, ratio, seeds.mix);
  CounterTrainConfig tc = cfg.counter;
  tc.seed = seeds.downstream;
  return train_counter_stream([&]() -> const LabeledImage& { return sampler.next(); }, real.size(), tc).params;
}

PipelineResult run_pipeline(const RunConfig& cfg_in, const fs::path& work) {
  const RunConfig cfg = with_resolved_seeds(cfg_in);
  validate(cfg);
  fs::create_directories(work);
  Engine engine(work);
  for (const StepDef& s : step_defs(cfg, work)) engine.ensure(s);
  PipelineResult res;
  res.report = json::parse(read_text(work / "evaluate" / "report.json"));
  res.executed = engine.executed();
  write_text(work / "report.json", res.report.dump(2) + "\n");
  return res;
}

std::vector<SweepRow> ratio_sweep(const RunConfig& cfg_in, const fs::path& work, const std::vector<double>& ratios) {
  const RunConfig cfg = with_resolved_seeds(cfg_in);
  validate(cfg);
  for (double r : ratios)
    if (!(r >= 0.0 && r <= 1.0)) throw ConfigError("ratio_sweep: ratio outside [0, 1]");
  fs::create_directories(work);
  Engine engine(work);
  for (const StepDef& s : step_defs(cfg, work)) {
    engine.ensure(s);
    if (s.name == "sample") break;
  }
  const auto real = load_split(work / "corpus", "train");
  const auto test = load_split(work / "corpus", "test");
  std::vector<SweepRow> rows;
  for (double r : ratios) {
    try {
      rows.push_back({r, evaluate(train_downstream(cfg, real, work / "sample", r), test)});
    } catch (const std::exception& e) {
      throw StepError("ratio-sweep", e.what());
    }
  }
  return rows;
}

json to_json(const std::vector<SweepRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    json m = to_json(r.metrics);
    m["ratio"] = r.ratio;
    out.push_back(m);
  }
  return out;
}

json stratified_report(const Metrics& m) {
  json rows = json::array();
  for (const auto& s : m.per_stratum) {
    const std::string label = s.range.hi < 0 ? "n>=" + std::to_string(s.range.lo)
                                             : std::to_string(s.range.lo) + "<=n<" + std::to_string(s.range.hi);
    rows.push_back({{"range", label}, {"n", s.n}, {"mae", s.mae}, {"mse", s.mse}});
  }
  rows.push_back({{"range", "total"}, {"n", m.n}, {"mae", m.mae}, {"mse", m.mse}});
  return rows;
}

}  // namespace cdaug
