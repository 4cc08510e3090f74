#include <chrono>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "sdreid/errors.hpp"
#include "sdreid/hash.hpp"
#include "sdreid/pipeline.hpp"

namespace fs = std::filesystem;
using namespace sdreid;
using nlohmann::json;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Common {
  std::string config;
  std::string run;
  std::string run_dir;
};

pipeline::RunConfig load_config(const Common& c) {
  if (c.config.empty()) return pipeline::desk_config();
  return pipeline::load_run_config(c.config);
}

fs::path resolve_dir(const Common& c, const pipeline::RunConfig& cfg) {
  if (!c.run_dir.empty()) return c.run_dir;
  return pipeline::run_root() / (c.run.empty() ? cfg.name : c.run);
}

void log_line(const std::string& s) { std::cerr << s << "\n"; }

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep))
    if (!item.empty()) out.push_back(item);
  return out;
}

json eval_run(const fs::path& dir, eval::Direction dir_proto,
              const std::vector<std::string>& fusion) {
  const auto q = pipeline::load_records(dir / "features", "query");
  const auto g = pipeline::load_records(dir / "features", "gallery");
  auto reports = pipeline::evaluate_all(q, g, dir_proto);
  if (!fusion.empty()) {
    std::map<eval::FusionMode, eval::EvalReport> keep;
    for (const auto& f : fusion) {
      const auto m = eval::parse_fusion_mode(f);
      if (!reports.count(m)) throw DataError("fusion mode '" + f + "' needs generated features (run `generate`)");
      keep[m] = reports[m];
    }
    reports = keep;
  }
  fs::create_directories(dir / "eval");
  const json metrics = pipeline::reports_to_json(reports);
  std::ofstream(dir / "eval" / "metrics.json") << metrics.dump(2) << "\n";
  std::ofstream table(dir / "eval" / "table.txt");
  for (const auto& [m, r] : reports) {
    const std::string line = eval::to_string(m) + "  " + r.table();
    std::cout << line << "\n";
    table << line << "\n";
    eval::write_cmc_csv(r, dir / "eval" / ("cmc_" + eval::to_string(m) + ".csv"));
  }
  return metrics;
}

void generate_run(const pipeline::RunConfig& cfg, const fs::path& dir) {
  const auto samples = pipeline::load_dataset(cfg, dir / "corpus");
  const auto s1 = pipeline::load_stage1(dir / "stage1.ckpt");
  const auto s2 = pipeline::load_stage2(dir / "stage2.ckpt");
  const std::string s1_sha = sha256_file(dir / "stage1.ckpt");
  if (s2.stage1_sha256 != s1_sha) throw ConfigError("stage-2 checkpoint was trained on a different stage-1 checkpoint");
  for (auto split : {data::Split::Query, data::Split::Gallery}) {
    const auto idx = data::indices_of(samples, split);
    auto recs = pipeline::real_records(s1, samples, idx);
    pipeline::generate_all_view_features(s1, s2, samples, idx, recs, cfg.sampling, cfg.seed);
    pipeline::save_records(recs, dir / "features", std::string(data::split_name(split)));
  }
}

int run(int argc, char** argv) {
  CLI::App app{"Two-stage aerial-ground re-identification with diffusion-generated view features"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "run config JSON (default: built-in desk preset)");
    sub->add_option("--run", common.run, "run name under $SDREID_RUN_ROOT (default: config name)");
    sub->add_option("--run-dir", common.run_dir, "explicit run directory");
  };

  auto* synth = app.add_subcommand("synth", "write the synthetic corpus as PNG + manifest");
  add_common(synth);

  int64_t max_steps = -1;
  std::string resume;
  auto* s1 = app.add_subcommand("train-stage1", "train the encoder and the view prototype bank");
  add_common(s1);
  s1->add_option("--resume", resume, "stage-1 checkpoint to continue from");
  s1->add_option("--max-steps", max_steps, "stop after this many total steps");

  std::string stage1_path;
  auto* s2 = app.add_subcommand("train-stage2", "train the condition learner and the denoiser");
  add_common(s2);
  s2->add_option("--stage1", stage1_path, "stage-1 checkpoint (default: <run>/stage1.ckpt)");
  s2->add_option("--max-steps", max_steps, "stop after this many steps");

  int64_t steps = 0;
  double guidance = -1;
  auto* gen = app.add_subcommand("generate", "real and generated features for query and gallery");
  add_common(gen);
  gen->add_option("--steps", steps, "sampling steps (tau)");
  gen->add_option("--guidance", guidance, "guidance scale w");

  std::string protocol;
  std::vector<std::string> fusion;
  auto* ev = app.add_subcommand("eval", "CMC / mAP / mINP for each fusion mode");
  add_common(ev);
  ev->add_option("--protocol", protocol, "a2g, g2a or both");
  ev->add_option("--fusion", fusion, "fusion modes (real, gen_a, gen_g, gen_ag, real+gen_ag)");

  std::string sweep;
  auto* ab = app.add_subcommand("ablate", "sweep one knob and evaluate each value");
  add_common(ab);
  ab->add_option("--sweep", sweep, "knob=v1,v2,... with knob in R, tau, k_id, vrd_mechanism, vrd_positions, fusion")
      ->required();

  CLI11_PARSE(app, argc, argv);

  auto cfg = load_config(common);
  const fs::path dir = resolve_dir(common, cfg);

  if (*synth) {
    const auto digest = pipeline::synthesize(cfg, dir / "corpus");
    pipeline::update_run_manifest(dir, {{"config", pipeline::to_json(cfg)}, {"corpus_sha256", digest}});
    std::cout << "corpus written to " << (dir / "corpus").string() << "\nsha256 " << digest << "\n";
  } else if (*s1) {
    const auto samples = pipeline::load_dataset(cfg, dir / "corpus");
    pipeline::Stage1Options opt{max_steps, resume, log_line};
    const auto r = pipeline::train_stage1(cfg, samples, dir / "stage1.ckpt", opt);
    pipeline::update_run_manifest(dir, {{"config", pipeline::to_json(cfg)},
                                        {"seed", cfg.seed},
                                        {"stage1", {{"checkpoint", r.checkpoint.string()}, {"sha256", r.sha256},
                                                    {"steps", r.steps}}}});
    std::cout << "stage-1 checkpoint " << r.checkpoint.string() << " (" << r.steps << "/" << r.total_steps
              << " steps)\nsha256 " << r.sha256 << "\n";
  } else if (*s2) {
    const auto samples = pipeline::load_dataset(cfg, dir / "corpus");
    const fs::path s1p = stage1_path.empty() ? dir / "stage1.ckpt" : fs::path(stage1_path);
    if (!fs::exists(s1p)) throw DataError("stage-1 checkpoint '" + s1p.string() + "' not found");
    const auto r = pipeline::train_stage2(cfg, samples, s1p, dir / "stage2.ckpt", {max_steps, log_line});
    pipeline::update_run_manifest(
        dir, {{"stage2", {{"checkpoint", r.checkpoint.string()}, {"sha256", r.sha256}, {"steps", r.steps},
                          {"eval_mse", r.eval_mse}, {"zero_predictor_mse", r.zero_predictor_mse}}}});
    std::cout << "stage-2 checkpoint " << r.checkpoint.string() << "\nsha256 " << r.sha256 << "\n";
  } else if (*gen) {
    if (steps > 0) cfg.sampling.steps = steps;
    if (guidance >= 0) cfg.sampling.guidance = guidance;
    cfg.validate();
    generate_run(cfg, dir);
    pipeline::update_run_manifest(dir, {{"sampling", {{"steps", cfg.sampling.steps},
                                                      {"guidance", cfg.sampling.guidance},
                                                      {"stochastic", cfg.sampling.stochastic},
                                                      {"implicit", cfg.sampling.implicit},
                                                      {"seed", cfg.seed}}}});
    std::cout << "features written to " << (dir / "features").string() << "\n";
  } else if (*ev) {
    const auto d = protocol.empty() ? cfg.protocol : eval::parse_direction(protocol);
    const json metrics = eval_run(dir, d, fusion);
    pipeline::update_run_manifest(dir, {{"metrics", metrics}});
  } else if (*ab) {
    const auto eq = sweep.find('=');
    if (eq == std::string::npos) throw ConfigError("--sweep expects knob=v1,v2,...");
    const std::string knob = sweep.substr(0, eq);
    const auto values = split(sweep.substr(eq + 1), ',');
    if (values.empty()) throw ConfigError("--sweep needs at least one value");
    const auto samples = pipeline::load_dataset(cfg, dir / "corpus");
    if (!fs::exists(dir / "stage1.ckpt")) throw DataError("ablate needs a stage-1 checkpoint (run train-stage1)");
    json results = json::object();
    for (const auto& v : values) {
      auto c = cfg;
      bool retrain = true;
      try {
        if (knob == "R") {
          c.condition.num_layers = std::stoll(v);
        } else if (knob == "k_id") {
          c.encoder.num_id_conditions = std::stoll(v);
          c.condition.num_id_conditions = c.encoder.k_id();
        } else if (knob == "tau") {
          c.sampling.steps = std::stoll(v);
          retrain = false;
        } else if (knob == "vrd_mechanism") {
          c.denoiser.vrd_mechanism = model::parse_vrd_mechanism(v);
        } else if (knob == "vrd_positions") {
          c.denoiser.vrd_positions = model::parse_vrd_positions(v);
        } else if (knob == "fusion") {
          eval::parse_fusion_mode(v);
          retrain = false;
        } else {
          throw ConfigError("unknown sweep knob '" + knob + "'");
        }
      } catch (const std::invalid_argument&) {
        throw ConfigError("sweep value '" + v + "' is not a number");
      }
      c.validate();
      const fs::path sub = dir / "ablate" / (knob + "=" + v);
      fs::create_directories(sub);
      fs::copy_file(dir / "stage1.ckpt", sub / "stage1.ckpt", fs::copy_options::overwrite_existing);
      if (retrain) {
        pipeline::train_stage2(c, samples, sub / "stage1.ckpt", sub / "stage2.ckpt", {-1, log_line});
      } else if (fs::exists(dir / "stage2.ckpt")) {
        fs::copy_file(dir / "stage2.ckpt", sub / "stage2.ckpt", fs::copy_options::overwrite_existing);
      } else {
        throw DataError("sweeping '" + knob + "' needs a stage-2 checkpoint (run train-stage2)");
      }
      const auto s1m = pipeline::load_stage1(sub / "stage1.ckpt");
      const auto s2m = pipeline::load_stage2(sub / "stage2.ckpt");
      auto qr = pipeline::real_records(s1m, samples, data::indices_of(samples, data::Split::Query));
      auto gr = pipeline::real_records(s1m, samples, data::indices_of(samples, data::Split::Gallery));
      const auto t0 = std::chrono::steady_clock::now();
      pipeline::generate_all_view_features(s1m, s2m, samples, data::indices_of(samples, data::Split::Query), qr,
                                           c.sampling, c.seed);
      pipeline::generate_all_view_features(s1m, s2m, samples, data::indices_of(samples, data::Split::Gallery), gr,
                                           c.sampling, c.seed);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      auto reports = pipeline::evaluate_all(qr, gr, c.protocol);
      if (knob == "fusion") {
        const auto keep = eval::parse_fusion_mode(v);
        reports = {{keep, reports.at(keep)}};
      }
      json entry = pipeline::reports_to_json(reports);
      entry["generation_seconds"] = secs;
      results[v] = entry;
      for (const auto& [m, r] : reports) std::cout << knob << "=" << v << "  " << eval::to_string(m) << "  " << r.table() << "\n";
    }
    std::ofstream(dir / "ablate" / (knob + ".json")) << results.dump(2) << "\n";
    pipeline::update_run_manifest(dir, {{"ablations", {{knob, results}}}});
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailure;
  }
}
