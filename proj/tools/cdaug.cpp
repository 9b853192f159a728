// Command-line front end: one subcommand per pipeline stage plus the full run.

#include <cstdio>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "cdaug/config.hpp"
#include "cdaug/corpus.hpp"
#include "cdaug/counter.hpp"
#include "cdaug/denoiser.hpp"
#include "cdaug/io.hpp"
#include "cdaug/pipeline.hpp"
#include "cdaug/sample.hpp"
#include "cdaug/schedule.hpp"
#include "cdaug/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cdaug;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  bool smoke = false;

  RunConfig load() const { return load_run_config(config, sets, smoke ? smoke_config() : RunConfig{}); }
};

void add_common(CLI::App* app, Common& c, const std::string& out_help) {
  app->add_option("--config", c.config, "JSON config file")->check(CLI::ExistingFile);
  app->add_option("--set", c.sets, "Override a config value, key=value (repeatable)");
  app->add_option("--out", c.out, out_help)->required();
  app->add_flag("--smoke", c.smoke, "Start from the small smoke-test configuration");
}

NoiseSchedule schedule_of(const RunConfig& cfg) {
  return build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end);
}

void emit(const json& j, const std::string& path) {
  write_text(path, j.dump(2) + "\n");
  std::cout << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counting-conditioned diffusion augmentation for density-map counting"};
  app.require_subcommand(1);

  Common gen_c;
  auto* gen = app.add_subcommand("gen-corpus", "Generate the procedural train/test corpus");
  add_common(gen, gen_c, "Corpus root directory");

  Common tc_c;
  std::string tc_corpus, tc_synthetic;
  double tc_ratio = 0.0;
  auto* tc = app.add_subcommand("train-counter", "Train a density-map counter on a corpus (optionally mixed)");
  add_common(tc, tc_c, "Counter checkpoint path");
  tc->add_option("--corpus", tc_corpus, "Corpus root")->required()->check(CLI::ExistingDirectory);
  tc->add_option("--synthetic", tc_synthetic, "Synthetic set directory (with manifest.jsonl)");
  tc->add_option("--ratio", tc_ratio, "Probability that a draw comes from the synthetic set")
      ->check(CLI::Range(0.0, 1.0));

  Common td_c;
  std::string td_corpus, td_counter, td_telemetry;
  auto* td = app.add_subcommand("train-diffusion", "Train the conditional denoiser with the gated counting loss");
  add_common(td, td_c, "Denoiser checkpoint path");
  td->add_option("--corpus", td_corpus, "Corpus root")->required()->check(CLI::ExistingDirectory);
  td->add_option("--counter", td_counter, "Frozen counter checkpoint")->required()->check(CLI::ExistingFile);
  td->add_option("--telemetry", td_telemetry, "Per-epoch JSON lines (default: <out>.telemetry.jsonl)");

  Common sm_c;
  std::string sm_checkpoint, sm_counter, sm_annotations;
  std::optional<int> sm_per_image, sm_steps;
  std::optional<double> sm_s;
  std::optional<std::uint64_t> sm_seed;
  auto* sm = app.add_subcommand("sample", "Draw counting-guided samples for every annotated scene");
  add_common(sm, sm_c, "Output directory");
  sm->add_option("--checkpoint", sm_checkpoint, "Denoiser checkpoint")->required()->check(CLI::ExistingFile);
  sm->add_option("--counter", sm_counter, "Counter checkpoint")->required()->check(CLI::ExistingFile);
  sm->add_option("--annotations", sm_annotations, "Directory of <id>.dots / <id>.dmap files")
      ->required()
      ->check(CLI::ExistingDirectory);
  sm->add_option("--per-image", sm_per_image, "Samples per scene");
  sm->add_option("--s", sm_s, "Guidance constant");
  sm->add_option("--steps", sm_steps, "DDIM steps");
  sm->add_option("--seed", sm_seed, "Master sampling seed");

  Common ev_c;
  std::string ev_counter, ev_corpus, ev_split = "test";
  auto* ev = app.add_subcommand("evaluate", "MAE / MSE of a counter on a corpus split");
  add_common(ev, ev_c, "Report JSON path");
  ev->add_option("--counter", ev_counter, "Counter checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--corpus", ev_corpus, "Corpus root")->required()->check(CLI::ExistingDirectory);
  ev->add_option("--split", ev_split, "Split to evaluate");

  Common pl_c;
  auto* pl = app.add_subcommand("pipeline", "Run (or resume) every step and write report.json");
  add_common(pl, pl_c, "Work directory");

  Common rs_c;
  std::vector<double> rs_ratios;
  auto* rs = app.add_subcommand("ratio-sweep", "Downstream MAE / MSE for several synthetic ratios");
  add_common(rs, rs_c, "Work directory");
  rs->add_option("--ratios", rs_ratios, "Ratios (default: mix.sweep from the config)")->delimiter(',');

  CLI11_PARSE(app, argc, argv);

  const std::string name = app.get_subcommands().front()->get_name();
  try {
    if (*gen) {
      const RunConfig cfg = gen_c.load();
      const auto scenes = generate_corpus(cfg.corpus, gen_c.out);
      std::cout << "wrote " << scenes.size() << " scenes to " << gen_c.out << "\n";
    } else if (*tc) {
      const RunConfig cfg = tc_c.load();
      const auto real = load_split(tc_corpus, "train");
      CounterParams<float> p;
      if (tc_ratio > 0.0 || !tc_synthetic.empty()) {
        p = train_downstream(cfg, real, tc_synthetic, tc_ratio);
      } else {
        const auto res = train_counter(real, cfg.counter);
        for (std::size_t e = 0; e < res.epoch_loss.size(); ++e)
          std::cerr << json{{"epoch", e}, {"loss", res.epoch_loss[e]}}.dump() << "\n";
        p = res.params;
      }
      write_file(tc_c.out, save_counter(p));
    } else if (*td) {
      const RunConfig cfg = td_c.load();
      const auto counter = load_counter(read_file(td_counter));
      const std::string tpath = td_telemetry.empty() ? td_c.out + ".telemetry.jsonl" : td_telemetry;
      std::ostringstream lines;
      const auto res = train_diffusion(load_split(td_corpus, "train"), counter, cfg.train, schedule_of(cfg), cfg.arch,
                                       [&](const EpochStats& e) {
                                         lines << to_json(e).dump() << "\n";
                                         std::cerr << to_json(e).dump() << "\n";
                                       });
      write_file(td_c.out, save_params(res.params));
      write_text(tpath, lines.str());
    } else if (*sm) {
      RunConfig cfg = sm_c.load();
      if (sm_s) cfg.sampler.s = *sm_s;
      if (sm_steps) cfg.sampler.steps = *sm_steps;
      if (sm_seed) cfg.sampler.seed = *sm_seed;
      if (sm_per_image) cfg.per_image = *sm_per_image;
      const auto recs = batch_sample(load_params(read_file(sm_checkpoint)), load_counter(read_file(sm_counter)),
                                     sm_annotations, cfg.per_image, cfg.sampler, schedule_of(cfg), sm_c.out);
      std::cout << "wrote " << recs.size() << " samples to " << sm_c.out << "\n";
    } else if (*ev) {
      ev_c.load();
      const Metrics m = evaluate(load_counter(read_file(ev_counter)), load_split(ev_corpus, ev_split));
      json report = to_json(m);
      report["table"] = stratified_report(m);
      emit(report, ev_c.out);
    } else if (*pl) {
      const auto res = run_pipeline(pl_c.load(), pl_c.out);
      for (const auto& s : res.executed) std::cerr << "executed " << s << "\n";
      std::cout << res.report.dump(2) << "\n";
    } else if (*rs) {
      const RunConfig cfg = rs_c.load();
      const auto rows = ratio_sweep(cfg, rs_c.out, rs_ratios.empty() ? cfg.sweep_ratios : rs_ratios);
      emit(json{{"rows", to_json(rows)}}, (fs::path(rs_c.out) / "sweep.json").string());
    }
  } catch (const StepError& e) {
    std::cerr << name << ": " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << name << ": " << e.what() << "\n";
    return 1;
  }
  return 0;
}
