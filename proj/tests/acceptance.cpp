// Acceptance suite: one PASS/FAIL line per criterion.
//
//   sdreid_acceptance [--only 1,2,...] [--workdir DIR] [--seeds N] [--report FILE]
//
// Criteria 5-8 share one set of trained runs (one per seed) on the desk
// preset; criterion 9 runs a shortened pipeline twice.

#include <CLI11.hpp>
#include <boost/math/distributions/chi_squared.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>

#include "oracles.hpp"
#include "sdreid/condition.hpp"
#include "sdreid/denoiser.hpp"
#include "sdreid/diffusion.hpp"
#include "sdreid/encoder.hpp"
#include "sdreid/errors.hpp"
#include "sdreid/memory_bank.hpp"
#include "sdreid/objectives.hpp"
#include "sdreid/pipeline.hpp"
#include "sdreid/retrieval.hpp"
#include "test_util.hpp"

using namespace sdreid;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int prec = 4) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(prec);
  s << v;
  return s.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
  json data = json::object();
};

// ------------------------------------------------------------------ 1

Outcome oracle_equivalence() {
  const auto t0 = Clock::now();
  Rng rng(2024, "acceptance/oracle");
  double worst = 0;
  int64_t instances = 0;
  for (int inst = 0; inst < 100; ++inst) {
    const auto m = rng.uniform_int(1, 50), n = rng.uniform_int(1, 200), ids = rng.uniform_int(1, 15);
    eval::RankingLabels q, g;
    for (int64_t i = 0; i < m; ++i) {
      q.identity.push_back(rng.uniform_int(0, ids - 1));
      q.camera.push_back(rng.uniform_int(0, 3));
    }
    for (int64_t j = 0; j < n; ++j) {
      g.identity.push_back(rng.uniform_int(0, ids - 1));
      g.camera.push_back(rng.uniform_int(0, 3));
    }
    Tensor d({m, n});
    // Half the instances use coarse distances so ties occur.
    for (auto& v : d.span()) v = inst % 2 ? std::floor(rng.uniform() * 16) / 16 : rng.uniform();
    const auto rep = eval::cmc_map_minp(d, q, g, 50);
    const auto ref = oracle::retrieval(d, q, g);
    if (rep.num_queries != ref.valid) worst = std::max(worst, 1.0);
    if (ref.valid == 0) continue;
    ++instances;
    for (auto [a, b] : {std::pair{rep.map_score, ref.map}, {rep.minp, ref.minp}, {rep.rank_k.at(1), ref.r1},
                        {rep.rank_k.at(5), ref.r5}, {rep.rank_k.at(10), ref.r10}})
      worst = std::max(worst, std::abs(a - b));
  }
  const double secs = seconds_since(t0);
  Outcome o;
  o.pass = worst <= 1e-10 && secs < 10.0;
  o.detail = "max |diff| " + fmt(worst, 14) + " over " + std::to_string(instances) + " instances, " + fmt(secs, 2) +
             " s (need <= 1e-10, < 10 s)";
  o.data = {{"max_abs_diff", worst}, {"seconds", secs}};
  return o;
}

// ------------------------------------------------------------------ 2

Outcome gradient_suite() {
  using testutil::gradcheck;
  using testutil::param_gradcheck;
  using testutil::project;
  using testutil::randn;
  const auto t0 = Clock::now();
  Rng rng(7, "acceptance/grad");
  std::vector<std::pair<std::string, double>> errs;
  auto add = [&](const std::string& name, double e) { errs.emplace_back(name, e); };

  using V = std::vector<ag::Var>;
  add("linear", gradcheck([](const V& v) { return project(ag::linear(v[0], v[1], v[2])); },
                          {randn({4, 5}, rng), randn({5, 3}, rng), randn({3}, rng)}));
  add("gelu", gradcheck([](const V& v) { return project(ag::gelu(v[0])); }, {randn({3, 7}, rng, 2.0)}));
  add("silu", gradcheck([](const V& v) { return project(ag::silu(v[0])); }, {randn({3, 7}, rng, 2.0)}));
  add("layer_norm", gradcheck([](const V& v) { return project(ag::layer_norm(v[0], v[1], v[2])); },
                              {randn({4, 6}, rng), randn({6}, rng), randn({6}, rng)}));
  add("batch_norm", gradcheck([](const V& v) {
        return project(ag::batch_norm_train(v[0], v[1], v[2], 1e-5, nullptr, nullptr));
      }, {randn({5, 4}, rng), randn({4}, rng), randn({4}, rng)}));
  add("group_norm", gradcheck([](const V& v) { return project(ag::group_norm(v[0], 2, v[1], v[2])); },
                              {randn({2, 4, 3, 3}, rng), randn({4}, rng), randn({4}, rng)}));
  add("conv2d", gradcheck([](const V& v) { return project(ag::conv2d(v[0], v[1], v[2], 2, 1)); },
                          {randn({2, 3, 4, 4}, rng), randn({4, 3, 3, 3}, rng), randn({4}, rng)}));
  add("pool_upsample", gradcheck([](const V& v) {
        return project(ag::upsample_nearest2x(ag::avg_pool2d(v[0], 2)));
      }, {randn({1, 2, 4, 4}, rng)}));
  {
    const kernels::AttentionShape s{2, 3, 4, 2, 3, 1.0 / std::sqrt(3.0)};
    add("attention", gradcheck([&](const V& v) { return project(ag::attention(v[0], v[1], v[2], s)); },
                               {randn({6, 6}, rng), randn({8, 6}, rng), randn({8, 6}, rng)}));
  }
  const std::vector<int64_t> y{0, 0, 1, 1, 2, 2};
  add("label_smoothing_ce", gradcheck([&](const V& v) { return loss::label_smoothing_ce(v[0], y, 0.1); },
                                      {randn({6, 3}, rng)}));
  add("batch_hard_triplet", gradcheck([&](const V& v) { return loss::batch_hard_triplet(v[0], y, 0.3); },
                                      {randn({6, 4}, rng)}));
  add("view_ce", gradcheck([](const V& v) { return loss::view_ce(v[0], {0, 1, 1, 0}); }, {randn({4, 2}, rng)}));
  {
    const Tensor target = randn({3, 4}, rng);
    add("diffusion_mse", gradcheck([&](const V& v) { return loss::diffusion_mse(target, v[0]); }, {randn({3, 4}, rng)}));
  }
  {
    model::EncoderConfig ec;
    ec.image_height = ec.image_width = 8;
    ec.patch_size = 4;
    ec.embed_dim = 8;
    ec.num_layers = 2;
    ec.num_heads = 2;
    ec.mlp_ratio = 2;
    ec.num_train_identities = 3;
    model::VitEncoder enc(ec, 1);
    Tensor x({4, 8, 8, 3});
    fill_uniform(x, rng, 0, 1);
    add("encoder_attention_layer", param_gradcheck(enc.params(), enc.params().names(), [&] {
          const auto out = enc.forward(x);
          const auto h = enc.heads(out, false);
          return ag::add(project(out.final_class), loss::view_ce(h.view_logits, {0, 1, 0, 1}));
        }));
  }
  model::ConditionConfig cc;
  cc.embed_dim = 16;
  cc.num_id_conditions = 2;
  cc.num_layers = 2;
  model::ConditionLearner learner(cc, 2);
  const Tensor ids = randn({4, 16}, rng), views = randn({2, 16}, rng), vrd = randn({2, 16}, rng);
  add("condition_learner", param_gradcheck(learner.params(), learner.params().names(), [&] {
        return project(learner.refine(learner.assemble(ids, views, vrd)).context);
      }));
  for (auto mech : {model::VrdMechanism::DownConv, model::VrdMechanism::Pooling, model::VrdMechanism::Projection}) {
    model::DenoiserConfig dc;
    dc.latent_channels = 1;
    dc.widths = {8, 16};
    dc.groups = 4;
    dc.time_dim = 8;
    dc.context_dim = 16;
    dc.vrd_mechanism = mech;
    model::Denoiser den(dc, 3);
    const Tensor z = randn({2, 16}, rng);
    auto fn = [&] {
      return project(den.eps_predict(ag::constant(z), {5, 900}, learner.refine(learner.assemble(ids, views, vrd))));
    };
    add("eps_predictor/" + model::to_string(mech), param_gradcheck(den.params(), den.params().names(), fn, 3));
  }

  const double secs = seconds_since(t0);
  double worst = 0;
  std::string worst_name;
  json per = json::object();
  for (const auto& [n, e] : errs) {
    per[n] = e;
    if (e > worst) {
      worst = e;
      worst_name = n;
    }
  }
  Outcome o;
  o.pass = worst < 1e-3 && secs < 120.0;
  o.detail = std::to_string(errs.size()) + " checks, worst relative error " + fmt(worst * 1e6, 3) + "e-6 (" +
             worst_name + "), " + fmt(secs, 1) + " s (need < 1e-3, < 120 s)";
  o.data = {{"relative_errors", per}, {"seconds", secs}};
  return o;
}

// ------------------------------------------------------------------ 3

Outcome diffusion_statistics() {
  const auto sched = diffusion::make_schedule();
  Rng rng(11, "acceptance/diffusion");
  const int64_t n = 100000;
  double worst_var = 0;
  for (int64_t t : {1, 100, 500, 900, 1000}) {
    Tensor z0({n}), eps({n});
    fill_normal(z0, rng);
    fill_normal(eps, rng);
    const Tensor z = diffusion::q_sample(z0, t, eps, sched);
    double m = 0, v = 0;
    for (double x : z.span()) m += x;
    m /= static_cast<double>(n);
    for (double x : z.span()) v += (x - m) * (x - m);
    v /= static_cast<double>(n - 1);
    worst_var = std::max(worst_var, std::abs(v - 1.0));
  }

  const int64_t T = 1000, bins = 20, draws = 1000000;
  std::vector<double> observed(bins, 0.0);
  for (int64_t i = 0; i < draws; ++i) observed[static_cast<size_t>((diffusion::sample_timestep_cubic(rng, T) - 1) / (T / bins))] += 1;
  double chi2 = 0;
  for (int64_t b = 0; b < bins; ++b) {
    const double e = static_cast<double>(draws) * oracle::cubic_timestep_mass(b * (T / bins) + 1, (b + 1) * (T / bins), T);
    chi2 += (observed[static_cast<size_t>(b)] - e) * (observed[static_cast<size_t>(b)] - e) / e;
  }
  const double p = 1.0 - boost::math::cdf(boost::math::chi_squared(static_cast<double>(bins - 1)), chi2);

  // Scripted predictor: a for the null branch, b for the conditional one.
  Tensor zt({3, 5});
  fill_normal(zt, rng);
  const diffusion::EpsFn scripted = [](const Tensor& z, int64_t, bool cond) { return Tensor(z.shape(), cond ? 0.75 : -0.5); };
  bool cfg_exact = true;
  for (auto [w, want] : {std::pair{1.0, 0.75}, {0.0, -0.5}, {2.0, 2.0 * 0.75 + 0.5}}) {
    const Tensor e = diffusion::cfg_predict(scripted, zt, 10, w);
    for (double v : e.span()) cfg_exact = cfg_exact && v == want;
  }

  Outcome o;
  o.pass = worst_var <= 0.05 && p > 0.01 && cfg_exact;
  o.detail = "max |Var-1| " + fmt(worst_var) + "; cubic chi2 " + fmt(chi2, 2) + " p=" + fmt(p) + "; CFG identities " +
             (cfg_exact ? "exact" : "NOT exact");
  o.data = {{"max_var_dev", worst_var}, {"chi2", chi2}, {"p_value", p}, {"cfg_exact", cfg_exact}};
  return o;
}

// ------------------------------------------------------------------ 4

Outcome memory_bank_closed_form() {
  const double alpha = 0.8;
  model::ViewPrototypeBank bank(16, alpha);
  Rng rng(5, "acceptance/bank");
  std::vector<double> m0(16), p(16);
  for (auto& v : m0) v = rng.normal();
  for (auto& v : p) v = rng.normal();
  bank.update(data::View::Aerial, m0);
  double worst = 0;
  for (int n = 1; n <= 10; ++n) {
    bank.update(data::View::Aerial, p);
    const auto m = bank.get(data::View::Aerial);
    for (size_t k = 0; k < m.size(); ++k) {
      const double closed = std::pow(alpha, n) * m0[k] + (1 - std::pow(alpha, n)) * p[k];
      worst = std::max(worst, std::abs(m[k] - closed));
    }
  }
  Outcome o;
  o.pass = worst <= 1e-6;
  o.detail = "alpha 0.8, 10 updates, max |sim - closed form| " + fmt(worst, 16) + " (need <= 1e-6)";
  o.data = {{"max_abs_diff", worst}};
  return o;
}

// ------------------------------------------------------------- 5-8 runs

struct SeedRun {
  uint64_t seed = 0;
  double stage1_seconds = 0;
  double stage2_seconds = 0;
  int64_t gallery_ids = 0;
  std::map<eval::FusionMode, eval::EvalReport> reports;
};

struct Shared {
  pipeline::RunConfig cfg;
  fs::path workdir;
  std::vector<data::ImageSample> samples;
  std::vector<SeedRun> runs;
};

fs::path seed_dir(const Shared& sh, uint64_t seed) { return sh.workdir / ("seed" + std::to_string(seed)); }

std::pair<std::vector<eval::FeatureRecord>, std::vector<eval::FeatureRecord>> generate(
    const Shared& sh, const pipeline::Stage1Model& s1, const pipeline::Stage2Model& s2,
    const diffusion::SamplerConfig& sampling, uint64_t seed) {
  const auto qi = data::indices_of(sh.samples, data::Split::Query);
  const auto gi = data::indices_of(sh.samples, data::Split::Gallery);
  auto q = pipeline::real_records(s1, sh.samples, qi);
  auto g = pipeline::real_records(s1, sh.samples, gi);
  pipeline::generate_all_view_features(s1, s2, sh.samples, qi, q, sampling, seed);
  pipeline::generate_all_view_features(s1, s2, sh.samples, gi, g, sampling, seed);
  return {std::move(q), std::move(g)};
}

void prepare_runs(Shared& sh, int seeds) {
  const fs::path corpus = sh.workdir / "corpus";
  if (!fs::exists(corpus / "manifest.csv")) pipeline::synthesize(sh.cfg, corpus);
  sh.samples = pipeline::load_dataset(sh.cfg, corpus);
  std::set<int64_t> gallery_ids;
  for (const auto& s : sh.samples)
    if (s.split == data::Split::Gallery && s.view == data::View::Ground) gallery_ids.insert(s.identity);

  for (int i = 0; i < seeds; ++i) {
    SeedRun run;
    run.seed = static_cast<uint64_t>(i);
    run.gallery_ids = static_cast<int64_t>(gallery_ids.size());
    auto cfg = sh.cfg;
    cfg.seed = run.seed;
    const fs::path dir = seed_dir(sh, run.seed);
    fs::create_directories(dir);
    std::cerr << "  seed " << i << ": stage 1" << std::flush;
    auto t0 = Clock::now();
    pipeline::train_stage1(cfg, sh.samples, dir / "stage1.ckpt");
    run.stage1_seconds = seconds_since(t0);
    std::cerr << " (" << fmt(run.stage1_seconds, 1) << " s), stage 2" << std::flush;
    t0 = Clock::now();
    pipeline::train_stage2(cfg, sh.samples, dir / "stage1.ckpt", dir / "stage2.ckpt");
    run.stage2_seconds = seconds_since(t0);
    std::cerr << " (" << fmt(run.stage2_seconds, 1) << " s), generate" << std::flush;
    const auto s1 = pipeline::load_stage1(dir / "stage1.ckpt");
    const auto s2 = pipeline::load_stage2(dir / "stage2.ckpt");
    const auto [q, g] = generate(sh, s1, s2, cfg.sampling, cfg.seed);
    run.reports = pipeline::evaluate_all(q, g, eval::Direction::AtoG);
    std::cerr << ", done\n";
    sh.runs.push_back(std::move(run));
  }
}

Outcome stage1_learning(const Shared& sh) {
  const auto& r = sh.runs.front();
  const double r1 = r.reports.at(eval::FusionMode::Real).rank_k.at(1);
  const double chance = 1.0 / static_cast<double>(r.gallery_ids);
  Outcome o;
  o.pass = r1 >= 5.0 * chance && r.stage1_seconds < 15 * 60;
  o.detail = "A->G Rank-1 " + fmt(100 * r1, 2) + "% vs chance " + fmt(100 * chance, 2) + "% (" + fmt(r1 / chance, 2) +
             "x, need >= 5x); stage-1 training " + fmt(r.stage1_seconds, 1) + " s (need < 900 s)";
  o.data = {{"rank1", r1}, {"chance", chance}, {"stage1_seconds", r.stage1_seconds}};
  return o;
}

Outcome stage2_direction(const Shared& sh) {
  std::map<eval::FusionMode, double> mean;
  double worst_regress = 0;
  json per_seed = json::array();
  for (const auto& r : sh.runs) {
    json row = {{"seed", r.seed}};
    for (const auto& [m, rep] : r.reports) {
      mean[m] += 100 * rep.map_score / static_cast<double>(sh.runs.size());
      row[eval::to_string(m)] = 100 * rep.map_score;
    }
    worst_regress = std::max(worst_regress, 100 * (r.reports.at(eval::FusionMode::Real).map_score -
                                                   r.reports.at(eval::FusionMode::RealPlusGenAG).map_score));
    per_seed.push_back(row);
  }
  const double real = mean.at(eval::FusionMode::Real), fused = mean.at(eval::FusionMode::RealPlusGenAG);
  bool best = true;
  std::string table;
  for (const auto& [m, v] : mean) {
    table += " " + eval::to_string(m) + "=" + fmt(v, 2);
    if (m != eval::FusionMode::RealPlusGenAG && v > fused) best = false;
  }
  Outcome o;
  o.pass = fused >= real && best && worst_regress <= 1.0;
  o.detail = std::to_string(sh.runs.size()) + " seeds, mean mAP" + table + "; Real+Gen(AG) " +
             (best ? "is" : "is NOT") + " the best mode; worst per-seed regression " + fmt(worst_regress, 2) +
             " (need mean fused >= mean real, fused best, regression <= 1.0)";
  o.data = {{"mean_map", json::object()}, {"per_seed", per_seed}, {"worst_regression", worst_regress}};
  for (const auto& [m, v] : mean) o.data["mean_map"][eval::to_string(m)] = v;
  return o;
}

Outcome generated_quality(const Shared& sh) {
  double real = 0, gen = 0;
  for (const auto& r : sh.runs) {
    real += r.reports.at(eval::FusionMode::Real).map_score;
    gen += r.reports.at(eval::FusionMode::GenAG).map_score;
  }
  const double ratio = gen / real;
  Outcome o;
  o.pass = ratio >= 0.8;
  o.detail = "mean mAP Gen(AG) " + fmt(100 * gen / static_cast<double>(sh.runs.size()), 2) + " vs Real " +
             fmt(100 * real / static_cast<double>(sh.runs.size()), 2) + " (" + fmt(100 * ratio, 1) +
             "%, need >= 80%)";
  o.data = {{"ratio", ratio}};
  return o;
}

Outcome tau_tradeoff(const Shared& sh) {
  const uint64_t seed = sh.runs.front().seed;
  const auto s1 = pipeline::load_stage1(seed_dir(sh, seed) / "stage1.ckpt");
  const auto s2 = pipeline::load_stage2(seed_dir(sh, seed) / "stage2.ckpt");
  const std::vector<int64_t> taus{1, 2, 5, 10, 25};
  std::vector<double> secs, maps;
  for (int64_t tau : taus) {
    auto sampling = sh.cfg.sampling;
    sampling.steps = tau;
    const auto t0 = Clock::now();
    const auto [q, g] = generate(sh, s1, s2, sampling, seed);
    secs.push_back(seconds_since(t0));
    maps.push_back(100 * eval::evaluate_records(q, g, eval::Direction::AtoG, eval::FusionMode::RealPlusGenAG).map_score);
  }
  // Least-squares line through (tau, seconds).
  const double n = static_cast<double>(taus.size());
  double mx = 0, my = 0;
  for (size_t i = 0; i < taus.size(); ++i) {
    mx += static_cast<double>(taus[i]) / n;
    my += secs[i] / n;
  }
  double sxy = 0, sxx = 0, syy = 0;
  for (size_t i = 0; i < taus.size(); ++i) {
    const double dx = static_cast<double>(taus[i]) - mx, dy = secs[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  const double r2 = sxy * sxy / (sxx * syy);
  const double gap = std::abs(maps[2] - maps[4]);
  std::string pts;
  for (size_t i = 0; i < taus.size(); ++i) pts += " " + std::to_string(taus[i]) + ":" + fmt(secs[i], 2) + "s/" + fmt(maps[i], 2);
  Outcome o;
  o.pass = r2 > 0.98 && gap <= 1.0;
  o.detail = "time vs tau R^2 " + fmt(r2) + "; |mAP(5) - mAP(25)| " + fmt(gap, 2) + " (tau:time/mAP" + pts +
             "; need R^2 > 0.98, gap <= 1.0)";
  o.data = {{"taus", taus}, {"seconds", secs}, {"map", maps}, {"r2", r2}};
  return o;
}

// ------------------------------------------------------------------ 9

Outcome end_to_end_determinism(const pipeline::RunConfig& base, const fs::path& workdir) {
  auto cfg = base;
  cfg.name = "determinism";
  cfg.stage1.epochs = 4;
  cfg.stage1.warmup_epochs = 1;
  cfg.stage2.epochs = 3;
  std::string bytes[2];
  for (int i = 0; i < 2; ++i) {
    const fs::path dir = workdir / ("determinism_" + std::to_string(i));
    fs::remove_all(dir);
    pipeline::run_all(cfg, dir);
    std::ifstream f(dir / "eval" / "metrics.json", std::ios::binary);
    bytes[i].assign(std::istreambuf_iterator<char>(f), {});
  }
  Outcome o;
  o.pass = !bytes[0].empty() && bytes[0] == bytes[1];
  o.detail = "two runs of the shortened pipeline: metrics.json " + std::to_string(bytes[0].size()) + " bytes, " +
             (o.pass ? "byte-identical" : "DIFFERENT");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance suite"};
  std::vector<int> only;
  std::string workdir;
  std::string report;
  std::string config;
  int seeds = 5;
  app.add_option("--only", only, "criteria to run (default: all)")->delimiter(',');
  app.add_option("--workdir", workdir, "scratch directory (default: $SDREID_RUN_ROOT/acceptance)");
  app.add_option("--seeds", seeds, "seeds for criteria 5-8")->check(CLI::PositiveNumber);
  app.add_option("--report", report, "write a JSON report here");
  app.add_option("-c,--config", config, "run config (default: desk preset)");
  CLI11_PARSE(app, argc, argv);

  std::set<int> want(only.begin(), only.end());
  if (want.empty()) want = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  const fs::path dir = workdir.empty() ? pipeline::run_root() / "acceptance" : fs::path(workdir);
  fs::create_directories(dir);

  const char* names[] = {"",
                         "oracle equivalence",
                         "gradient suite",
                         "diffusion statistics",
                         "memory bank closed form",
                         "stage-1 learning",
                         "stage-2 direction",
                         "generated-feature quality",
                         "tau trade-off",
                         "end-to-end determinism"};
  json out = json::object();
  int failures = 0;
  auto emit = [&](int id, const std::function<Outcome()>& fn) {
    if (!want.count(id)) return;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail = std::string("error: ") + e.what();
    }
    failures += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << id << "] " << names[id] << ": " << o.detail << std::endl;
    out[std::to_string(id)] = {{"name", names[id]}, {"pass", o.pass}, {"detail", o.detail}, {"data", o.data}};
  };

  try {
    Shared sh;
    sh.cfg = config.empty() ? pipeline::desk_config() : pipeline::load_run_config(config);
    sh.workdir = dir;
    emit(1, oracle_equivalence);
    emit(2, gradient_suite);
    emit(3, diffusion_statistics);
    emit(4, memory_bank_closed_form);
    if (want.count(5) || want.count(6) || want.count(7) || want.count(8)) {
      const int n = (want.count(6) || want.count(7)) ? seeds : 1;
      std::cerr << "training " << n << " seed(s) on the desk preset\n";
      prepare_runs(sh, n);
    }
    emit(5, [&] { return stage1_learning(sh); });
    emit(6, [&] { return stage2_direction(sh); });
    emit(7, [&] { return generated_quality(sh); });
    emit(8, [&] { return tau_tradeoff(sh); });
    emit(9, [&] { return end_to_end_determinism(sh.cfg, dir); });
  } catch (const std::exception& e) {
    std::cout << "FAIL setup: " << e.what() << std::endl;
    return 1;
  }
  if (!report.empty()) std::ofstream(report) << out.dump(2) << "\n";
  return failures == 0 ? 0 : 1;
}
