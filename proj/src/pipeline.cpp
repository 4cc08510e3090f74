#include "sdreid/pipeline.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <sstream>

#include "sdreid/augment.hpp"
#include "sdreid/checkpoint.hpp"
#include "sdreid/errors.hpp"
#include "sdreid/hash.hpp"
#include "sdreid/optim.hpp"

namespace sdreid::pipeline {

using nlohmann::json;

namespace {

constexpr const char* kStage1Kind = "stage1";
constexpr const char* kStage2Kind = "stage2";

void say(const std::function<void(const std::string&)>& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fmt(double v, int prec = 4) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(prec);
  os << v;
  return os.str();
}

int64_t view_label(data::View v) { return v == data::View::Aerial ? 0 : 1; }

std::vector<size_t> permutation(size_t n, Rng& rng) {
  std::vector<size_t> p(n);
  std::iota(p.begin(), p.end(), 0);
  for (size_t i = n; i > 1; --i) std::swap(p[i - 1], p[static_cast<size_t>(rng.uniform_int(0, static_cast<int64_t>(i - 1)))]);
  return p;
}

}  // namespace

fs::path run_root() {
  const char* env = std::getenv("SDREID_RUN_ROOT");
  return env && *env ? fs::path(env) : fs::path("runs");
}

std::string synthesize(const RunConfig& cfg, const fs::path& dir) {
  auto spec = cfg.data.synthetic;
  spec.patch_size = cfg.encoder.patch_size;
  auto samples = data::generate_corpus(spec);
  data::save_corpus(samples, dir);
  return data::corpus_digest(samples);
}

std::vector<data::ImageSample> load_dataset(const RunConfig& cfg, const fs::path& synthetic_dir) {
  const fs::path root = cfg.data.root.empty() ? synthetic_dir : fs::path(cfg.data.root);
  const fs::path manifest = root / cfg.data.manifest;
  if (!fs::exists(manifest)) {
    throw DataError("dataset manifest '" + manifest.string() + "' not found" +
                    (cfg.data.root.empty() ? " (run `synth` first)" : ""));
  }
  auto samples = data::load_folder_dataset(root, manifest, cfg.encoder.image_height, cfg.encoder.image_width);
  if (data::indices_of(samples, data::Split::Train).empty()) throw DataError("dataset has no training samples");
  return samples;
}

// ------------------------------------------------------------------ stage 1

Stage1Result train_stage1(const RunConfig& cfg_in, const std::vector<data::ImageSample>& samples,
                          const fs::path& ckpt_path, const Stage1Options& opt) {
  RunConfig cfg = cfg_in;
  cfg.encoder.num_train_identities = data::count_train_identities(samples);
  cfg.validate();
  const auto& sc = cfg.stage1;
  const auto train = data::indices_of(samples, data::Split::Train);
  data::IdentityBatchSampler sampler(samples, train, sc.ids_per_batch, sc.instances_per_id);
  const int64_t per_epoch = sampler.batches_per_epoch();
  const int64_t total = sc.epochs * per_epoch;

  model::VitEncoder enc(cfg.encoder, cfg.seed);
  const auto [mean, sd] = model::channel_stats(samples, train);
  enc.set_input_stats(mean, sd);
  model::ViewPrototypeBank bank(cfg.encoder.embed_dim, sc.memory_alpha);
  optim::Sgd sgd(enc.params(), sc.momentum, sc.weight_decay);
  int64_t step = 0;

  if (!opt.resume_from.empty()) {
    const auto ck = io::load_checkpoint(opt.resume_from);
    if (ck.meta.value("kind", "") != kStage1Kind) throw FormatError("resume checkpoint is not a stage-1 checkpoint");
    if (ck.meta.at("encoder") != json(cfg.encoder)) throw ConfigError("resume checkpoint encoder config differs");
    io::restore_params(ck, "encoder/", enc.params());
    bank = model::ViewPrototypeBank::restore(ck);
    for (const auto& [name, t] : ck.tensors)
      if (name.rfind("optim/velocity/", 0) == 0) sgd.state()[name.substr(15)] = t;
    step = ck.meta.at("step").get<int64_t>();
  }

  const fs::path log_path = ckpt_path.parent_path() / "stage1_loss.csv";
  if (ckpt_path.has_parent_path()) fs::create_directories(ckpt_path.parent_path());
  std::ofstream csv(log_path, opt.resume_from.empty() ? std::ios::trunc : std::ios::app);
  csv.precision(17);
  if (opt.resume_from.empty()) csv << "step,l_id,l_tri,l_view,l_total\n";

  Stage1Result res;
  res.total_steps = total;
  const int64_t stop = opt.stop_after_steps < 0 ? total : std::min(total, opt.stop_after_steps);
  const Rng root(cfg.seed, "stage1");
  say(opt.log, "stage 1: " + std::to_string(total) + " steps (" + std::to_string(per_epoch) + " per epoch), batch " +
                   std::to_string(sampler.batch_size()));
  for (; step < stop; ++step) {
    Rng rng = root.fork("step/" + std::to_string(step));
    const auto idx = sampler.next(rng);
    const Tensor images = data::augment_batch(data::stack_pixels(samples, idx), sc.augment, rng);
    std::vector<int64_t> ids, views;
    for (size_t i : idx) {
      ids.push_back(samples[i].identity);
      views.push_back(view_label(samples[i].view));
    }
    enc.params().zero_grad();
    const auto out = enc.forward(images, true);
    const auto heads = enc.heads(out, true, sc.stop_view_gradient);
    const auto loss = loss::stage1_loss(heads.id_logits, out.final_class, heads.view_logits, ids, views,
                                        {sc.smoothing, sc.margin, sc.view_loss});
    if (!std::isfinite(loss.report.l_total)) {
      throw NumericError("stage 1: non-finite loss at step " + std::to_string(step));
    }
    ag::backward(loss.total);
    const double epoch = static_cast<double>(step) / static_cast<double>(per_epoch);
    sgd.step(optim::warmup_cosine_lr(sc.lr, epoch, sc.warmup_epochs, static_cast<double>(sc.epochs)));

    const Tensor& pv = out.view_feature.value();
    const int64_t c = cfg.encoder.embed_dim;
    for (data::View v : {data::View::Aerial, data::View::Ground}) {
      std::vector<double> m(static_cast<size_t>(c), 0.0);
      int64_t n = 0;
      for (size_t i = 0; i < idx.size(); ++i) {
        if (samples[idx[i]].view != v) continue;
        for (int64_t k = 0; k < c; ++k) m[static_cast<size_t>(k)] += pv.at(static_cast<int64_t>(i), k);
        ++n;
      }
      if (n == 0) continue;
      for (double& x : m) x /= static_cast<double>(n);
      bank.update(v, m);
    }

    const auto& r = loss.report;
    csv << step << "," << r.l_id << "," << r.l_tri << "," << r.l_view << "," << r.l_total << "\n";
    res.history.push_back(r);
    if (step % per_epoch == per_epoch - 1) {
      say(opt.log, "stage 1 epoch " + std::to_string(step / per_epoch + 1) + "/" + std::to_string(sc.epochs) +
                       "  loss " + fmt(r.l_total) + " (id " + fmt(r.l_id) + ", tri " + fmt(r.l_tri) + ", view " +
                       fmt(r.l_view) + ")");
    }
  }

  io::Checkpoint ck;
  ck.meta = {{"kind", kStage1Kind}, {"encoder", cfg.encoder}, {"step", step}, {"total_steps", total},
             {"seed", cfg.seed},    {"config", to_json(cfg)}};
  io::store_params(ck, "encoder/", enc.params());
  bank.store(ck);
  for (const auto& [name, t] : sgd.state()) ck.put("optim/velocity/" + name, t);
  io::save_checkpoint(ck, ckpt_path);
  res.checkpoint = ckpt_path;
  res.sha256 = sha256_file(ckpt_path);
  res.steps = step;
  return res;
}

Stage1Model load_stage1(const fs::path& path) {
  const auto ck = io::load_checkpoint(path);
  if (ck.meta.value("kind", "") != kStage1Kind) throw FormatError("'" + path.string() + "' is not a stage-1 checkpoint");
  Stage1Model m;
  const auto ecfg = ck.meta.at("encoder").get<model::EncoderConfig>();
  m.encoder = std::make_unique<model::VitEncoder>(ecfg, 0);
  io::restore_params(ck, "encoder/", m.encoder->params());
  m.bank = std::make_unique<model::ViewPrototypeBank>(model::ViewPrototypeBank::restore(ck));
  m.step = ck.meta.at("step").get<int64_t>();
  return m;
}

// ------------------------------------------------------------------ stage 2

namespace {

struct Stage2Batch {
  Tensor x0;  // standardized targets [B, D]
  std::vector<model::ConditionInputs> cond;
};

Tensor noised(const Tensor& x0, const std::vector<int64_t>& t, const Tensor& eps, const diffusion::NoiseSchedule& s) {
  Tensor z(x0.shape());
  const int64_t b = x0.dim(0), d = x0.dim(1);
  for (int64_t i = 0; i < b; ++i) {
    const double ab = s.alpha_bar(t[static_cast<size_t>(i)]);
    const double a = std::sqrt(ab), c = std::sqrt(1.0 - ab);
    for (int64_t k = 0; k < d; ++k) z.at(i, k) = a * x0.at(i, k) + c * eps.at(i, k);
  }
  return z;
}

}  // namespace

Stage2Result train_stage2(const RunConfig& cfg, const std::vector<data::ImageSample>& samples,
                          const fs::path& stage1_ckpt, const fs::path& ckpt_path, const Stage2Options& opt) {
  cfg.validate();
  const std::string s1_sha = sha256_file(stage1_ckpt);
  if (!cfg.stage2.stage1_sha256.empty() && cfg.stage2.stage1_sha256 != s1_sha) {
    throw ConfigError("stage-1 checkpoint hash mismatch: config pins " + cfg.stage2.stage1_sha256 + ", file has " +
                      s1_sha);
  }
  Stage1Model s1 = load_stage1(stage1_ckpt);
  s1.encoder->set_num_id_conditions(cfg.encoder.k_id());
  const auto& sc = cfg.stage2;
  const int64_t d = cfg.encoder.embed_dim;

  // Frozen encodings: clean images give targets, clean or flipped ones give conditions.
  const auto train = data::indices_of(samples, data::Split::Train);
  const auto clean = s1.encoder->encode(samples, train);
  std::vector<data::ImageSample> flipped;
  flipped.reserve(train.size());
  for (size_t i : train) {
    data::ImageSample s = samples[i];
    s.pixels = data::hflip(s.pixels);
    flipped.push_back(std::move(s));
  }
  std::vector<size_t> all(flipped.size());
  std::iota(all.begin(), all.end(), 0);
  const auto flip = s1.encoder->encode(flipped, all);
  const int64_t n = static_cast<int64_t>(train.size());

  Tensor mean({d}, 0.0), sd({d}, 0.0);
  for (const auto& r : clean)
    for (int64_t k = 0; k < d; ++k) mean[static_cast<size_t>(k)] += r.final_class[static_cast<size_t>(k)];
  for (int64_t k = 0; k < d; ++k) mean[static_cast<size_t>(k)] /= static_cast<double>(n);
  for (const auto& r : clean)
    for (int64_t k = 0; k < d; ++k) {
      const double v = r.final_class[static_cast<size_t>(k)] - mean[static_cast<size_t>(k)];
      sd[static_cast<size_t>(k)] += v * v;
    }
  for (int64_t k = 0; k < d; ++k) sd[static_cast<size_t>(k)] = std::max(std::sqrt(sd[static_cast<size_t>(k)] / static_cast<double>(n)), 1e-6);

  auto make_batch = [&](const std::vector<size_t>& rows, Rng* flip_rng) {
    Stage2Batch b;
    b.x0 = Tensor({static_cast<int64_t>(rows.size()), d});
    for (size_t i = 0; i < rows.size(); ++i) {
      const auto& target = clean[rows[i]];
      for (int64_t k = 0; k < d; ++k) {
        b.x0.at(static_cast<int64_t>(i), k) =
            (target.final_class[static_cast<size_t>(k)] - mean[static_cast<size_t>(k)]) / sd[static_cast<size_t>(k)];
      }
      const bool use_flip = flip_rng && flip_rng->bernoulli(sc.flip_prob);
      const auto& src = use_flip ? flip[rows[i]] : target;
      b.cond.push_back(model::build_condition(src, src.view, *s1.bank, model::ConditionMode::Train));
    }
    return b;
  };

  model::ConditionLearner learner(cfg.condition, cfg.seed);
  model::Denoiser den(cfg.denoiser, cfg.seed);
  const auto sched = diffusion::make_schedule(sc.timesteps, sc.beta_start, sc.beta_end);
  optim::Adam adam_c(learner.params()), adam_d(den.params());

  const int64_t per_epoch = (n + sc.batch_size - 1) / sc.batch_size;
  const int64_t total = sc.epochs * per_epoch;
  const int64_t stop = opt.stop_after_steps < 0 ? total : std::min(total, opt.stop_after_steps);
  const Rng root(cfg.seed, "stage2");
  if (ckpt_path.has_parent_path()) fs::create_directories(ckpt_path.parent_path());
  std::ofstream csv(ckpt_path.parent_path() / "stage2_loss.csv", std::ios::trunc);
  csv.precision(17);
  csv << "step,mse\n";
  say(opt.log, "stage 2: " + std::to_string(total) + " steps (" + std::to_string(per_epoch) + " per epoch)");

  Stage2Result res;
  std::vector<size_t> order;
  double epoch_sum = 0;
  for (int64_t step = 0; step < stop; ++step) {
    const int64_t epoch = step / per_epoch, within = step % per_epoch;
    if (within == 0) {
      Rng er = root.fork("epoch/" + std::to_string(epoch));
      order = permutation(static_cast<size_t>(n), er);
      epoch_sum = 0;
    }
    const size_t lo = static_cast<size_t>(within * sc.batch_size);
    const size_t hi = std::min(order.size(), lo + static_cast<size_t>(sc.batch_size));
    std::vector<size_t> rows(order.begin() + static_cast<std::ptrdiff_t>(lo), order.begin() + static_cast<std::ptrdiff_t>(hi));
    const int64_t b = static_cast<int64_t>(rows.size());

    Rng rng = root.fork("step/" + std::to_string(step));
    const auto batch = make_batch(rows, &rng);
    std::vector<int64_t> t(static_cast<size_t>(b));
    for (auto& x : t) x = diffusion::sample_timestep_cubic(rng, sched.T);
    Tensor eps({b, d});
    fill_normal(eps, rng);
    std::vector<bool> drop(static_cast<size_t>(b));
    for (size_t i = 0; i < drop.size(); ++i) drop[i] = rng.bernoulli(cfg.condition.dropout);

    learner.params().zero_grad();
    den.params().zero_grad();
    auto cond = learner.refine(learner.assemble(batch.cond));
    cond = learner.drop(cond, drop);
    const auto pred = den.eps_predict(ag::constant(noised(batch.x0, t, eps, sched)), t, cond);
    const auto loss = loss::diffusion_mse(eps, pred);
    const double l = loss.value().item();
    if (!std::isfinite(l)) throw NumericError("stage 2: non-finite loss at step " + std::to_string(step));
    ag::backward(loss);
    adam_c.step(sc.lr);
    adam_d.step(sc.lr);
    csv << step << "," << l << "\n";
    res.history.push_back(l);
    epoch_sum += l;
    if (within == per_epoch - 1) {
      say(opt.log, "stage 2 epoch " + std::to_string(epoch + 1) + "/" + std::to_string(sc.epochs) + "  mse " +
                       fmt(epoch_sum / static_cast<double>(per_epoch)));
    }
  }
  res.steps = stop;

  {
    // Fixed (t, eps) draw over the whole training set, no condition dropout.
    ag::NoGradGuard guard;
    Rng er(cfg.seed, "stage2-eval");
    double se = 0, zero = 0;
    int64_t count = 0;
    for (int64_t lo = 0; lo < n; lo += 128) {
      std::vector<size_t> rows;
      for (int64_t i = lo; i < std::min(n, lo + 128); ++i) rows.push_back(static_cast<size_t>(i));
      const int64_t b = static_cast<int64_t>(rows.size());
      const auto batch = make_batch(rows, nullptr);
      std::vector<int64_t> t(static_cast<size_t>(b));
      for (auto& x : t) x = diffusion::sample_timestep_cubic(er, sched.T);
      Tensor eps({b, d});
      fill_normal(eps, er);
      const auto cond = learner.refine(learner.assemble(batch.cond));
      const Tensor pred = den.eps_predict(ag::constant(noised(batch.x0, t, eps, sched)), t, cond).value();
      for (size_t i = 0; i < eps.size(); ++i) {
        se += (pred[i] - eps[i]) * (pred[i] - eps[i]);
        zero += eps[i] * eps[i];
      }
      count += static_cast<int64_t>(eps.size());
    }
    res.eval_mse = se / static_cast<double>(count);
    res.zero_predictor_mse = zero / static_cast<double>(count);
    say(opt.log, "stage 2 held-out mse " + fmt(res.eval_mse) + " vs zero predictor " + fmt(res.zero_predictor_mse));
  }

  io::Checkpoint ck;
  ck.meta = {{"kind", kStage2Kind},
             {"condition", cfg.condition},
             {"denoiser", cfg.denoiser},
             {"stage1_sha256", s1_sha},
             {"schedule", {{"T", sc.timesteps}, {"beta_start", sc.beta_start}, {"beta_end", sc.beta_end}}},
             {"step", res.steps},
             {"seed", cfg.seed},
             {"eval_mse", res.eval_mse},
             {"zero_predictor_mse", res.zero_predictor_mse},
             {"config", to_json(cfg)}};
  io::store_params(ck, "condition/", learner.params());
  io::store_params(ck, "denoiser/", den.params());
  ck.put("target/mean", mean);
  ck.put("target/std", sd);
  io::save_checkpoint(ck, ckpt_path);
  res.checkpoint = ckpt_path;
  res.sha256 = sha256_file(ckpt_path);
  return res;
}

Stage2Model load_stage2(const fs::path& path) {
  const auto ck = io::load_checkpoint(path);
  if (ck.meta.value("kind", "") != kStage2Kind) throw FormatError("'" + path.string() + "' is not a stage-2 checkpoint");
  Stage2Model m;
  m.learner = std::make_unique<model::ConditionLearner>(ck.meta.at("condition").get<model::ConditionConfig>(), 0);
  m.denoiser = std::make_unique<model::Denoiser>(ck.meta.at("denoiser").get<model::DenoiserConfig>(), 0);
  io::restore_params(ck, "condition/", m.learner->params());
  io::restore_params(ck, "denoiser/", m.denoiser->params());
  const auto& s = ck.meta.at("schedule");
  m.schedule = diffusion::make_schedule(s.at("T").get<int64_t>(), s.at("beta_start").get<double>(),
                                        s.at("beta_end").get<double>());
  m.target_mean = ck.get("target/mean");
  m.target_std = ck.get("target/std");
  m.stage1_sha256 = ck.meta.at("stage1_sha256").get<std::string>();
  return m;
}

// ------------------------------------------------------- generation / eval

std::vector<eval::FeatureRecord> real_records(const Stage1Model& s1, const std::vector<data::ImageSample>& samples,
                                              const std::vector<size_t>& indices) {
  const auto reps = s1.encoder->encode(samples, indices);
  std::vector<eval::FeatureRecord> out;
  out.reserve(reps.size());
  for (size_t i = 0; i < reps.size(); ++i) {
    eval::FeatureRecord r;
    r.real = reps[i].final_class;
    r.identity = reps[i].identity;
    r.view = reps[i].view;
    r.camera_id = samples[indices[i]].camera_id;
    out.push_back(std::move(r));
  }
  return out;
}

void generate_all_view_features(const Stage1Model& s1, const Stage2Model& s2,
                                const std::vector<data::ImageSample>& samples, const std::vector<size_t>& indices,
                                std::vector<eval::FeatureRecord>& records, const diffusion::SamplerConfig& sampling,
                                uint64_t seed) {
  if (records.size() != indices.size()) throw ContractError("generate: one record per index required");
  ag::NoGradGuard guard;
  s1.encoder->set_num_id_conditions(s2.learner->config().num_id_conditions);
  const auto reps = s1.encoder->encode(samples, indices);
  const int64_t d = s1.encoder->config().embed_dim;
  const Rng root(seed, "generate");
  constexpr size_t kChunk = 128;
  for (data::View target : {data::View::Aerial, data::View::Ground}) {
    for (size_t lo = 0; lo < reps.size(); lo += kChunk) {
      const size_t hi = std::min(reps.size(), lo + kChunk);
      const auto b = static_cast<int64_t>(hi - lo);
      std::vector<model::ConditionInputs> inputs;
      std::vector<Rng> rngs;
      for (size_t i = lo; i < hi; ++i) {
        inputs.push_back(model::build_condition(reps[i], target, *s1.bank, model::ConditionMode::Infer));
        rngs.push_back(root.fork(std::to_string(indices[i]) + "/" + std::string(data::view_name(target))));
      }
      const auto cond = s2.learner->refine(s2.learner->assemble(inputs));
      const auto null = s2.learner->null_condition(b);
      const diffusion::EpsFn eps = [&](const Tensor& z, int64_t t, bool conditional) {
        return s2.denoiser->eps_predict(ag::constant(z), std::vector<int64_t>(static_cast<size_t>(b), t),
                                        conditional ? cond : null)
            .value();
      };
      const Tensor z = diffusion::sample_features(eps, b, d, sampling, rngs, s2.schedule);
      for (size_t i = lo; i < hi; ++i) {
        std::vector<double> f(static_cast<size_t>(d));
        for (int64_t k = 0; k < d; ++k) {
          f[static_cast<size_t>(k)] = z.at(static_cast<int64_t>(i - lo), k) * s2.target_std[static_cast<size_t>(k)] +
                                      s2.target_mean[static_cast<size_t>(k)];
        }
        for (double v : f)
          if (!std::isfinite(v)) throw NumericError("generate: non-finite generated feature");
        (target == data::View::Aerial ? records[i].gen_aerial : records[i].gen_ground) = std::move(f);
      }
    }
  }
}

std::map<eval::FusionMode, eval::EvalReport> evaluate_all(const std::vector<eval::FeatureRecord>& queries,
                                                          const std::vector<eval::FeatureRecord>& gallery,
                                                          eval::Direction dir) {
  bool has_gen = true;
  for (const auto* set : {&queries, &gallery})
    for (const auto& r : *set) has_gen = has_gen && r.gen_aerial && r.gen_ground;
  std::map<eval::FusionMode, eval::EvalReport> out;
  for (eval::FusionMode m : eval::kAllFusionModes) {
    if (m != eval::FusionMode::Real && !has_gen) continue;
    out[m] = eval::evaluate_records(queries, gallery, dir, m);
  }
  return out;
}

json reports_to_json(const std::map<eval::FusionMode, eval::EvalReport>& reports) {
  json modes = json::object();
  std::string protocol;
  for (const auto& [m, r] : reports) {
    modes[eval::to_string(m)] = r.to_json();
    protocol = r.protocol;
  }
  return json{{"protocol", protocol}, {"modes", modes}};
}

void save_records(const std::vector<eval::FeatureRecord>& records, const fs::path& dir, const std::string& split) {
  fs::create_directories(dir);
  auto dump = [&](const std::string& part, auto getter) {
    if (records.empty()) return;
    const auto* first = getter(records[0]);
    if (!first) return;
    Tensor m({static_cast<int64_t>(records.size()), static_cast<int64_t>(first->size())});
    for (size_t i = 0; i < records.size(); ++i) {
      const auto* v = getter(records[i]);
      if (!v || v->size() != first->size()) throw ContractError("save_records: inconsistent '" + part + "' features");
      std::copy(v->begin(), v->end(), m.data() + static_cast<int64_t>(i) * m.dim(1));
    }
    eval::write_feature_dump(dir / (split + "_" + part + ".bin"), dir / (split + "_manifest.csv"), m, records);
  };
  for (const auto& p : {"real", "gen_aerial", "gen_ground"}) fs::remove(dir / (split + "_" + p + ".bin"));
  dump("real", [](const eval::FeatureRecord& r) { return &r.real; });
  dump("gen_aerial", [](const eval::FeatureRecord& r) { return r.gen_aerial ? &*r.gen_aerial : nullptr; });
  dump("gen_ground", [](const eval::FeatureRecord& r) { return r.gen_ground ? &*r.gen_ground : nullptr; });
}

std::vector<eval::FeatureRecord> load_records(const fs::path& dir, const std::string& split) {
  const fs::path manifest = dir / (split + "_manifest.csv");
  std::ifstream f(manifest);
  if (!f) throw DataError("feature manifest '" + manifest.string() + "' not found (run `generate` first)");
  std::vector<eval::FeatureRecord> out;
  std::string line;
  std::getline(f, line);
  int64_t lineno = 1;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string row, id, view, cam;
    if (!std::getline(ss, row, ',') || !std::getline(ss, id, ',') || !std::getline(ss, view, ',') ||
        !std::getline(ss, cam, ',')) {
      throw FormatError("malformed feature manifest line at line " + std::to_string(lineno));
    }
    eval::FeatureRecord r;
    try {
      r.identity = std::stoll(id);
      r.camera_id = std::stoll(cam);
    } catch (const std::exception&) {
      throw FormatError("malformed feature manifest line at line " + std::to_string(lineno));
    }
    if (view != "A" && view != "G") throw FormatError("unknown view '" + view + "' at line " + std::to_string(lineno));
    r.view = view == "A" ? data::View::Aerial : data::View::Ground;
    out.push_back(std::move(r));
  }
  auto fill = [&](const std::string& part, auto setter) {
    const fs::path p = dir / (split + "_" + part + ".bin");
    if (!fs::exists(p)) return;
    const Tensor m = eval::read_feature_matrix(p);
    if (static_cast<size_t>(m.dim(0)) != out.size()) throw FormatError("'" + p.string() + "' row count mismatch");
    for (size_t i = 0; i < out.size(); ++i) setter(out[i], m.row(static_cast<int64_t>(i)));
  };
  fill("real", [](eval::FeatureRecord& r, std::vector<double> v) { r.real = std::move(v); });
  fill("gen_aerial", [](eval::FeatureRecord& r, std::vector<double> v) { r.gen_aerial = std::move(v); });
  fill("gen_ground", [](eval::FeatureRecord& r, std::vector<double> v) { r.gen_ground = std::move(v); });
  return out;
}

void update_run_manifest(const fs::path& dir, const json& patch) {
  fs::create_directories(dir);
  const fs::path p = dir / "manifest.json";
  json m = json::object();
  if (fs::exists(p)) {
    std::ifstream f(p);
    try {
      m = json::parse(f);
    } catch (const json::exception&) {
      m = json::object();
    }
  }
  m.merge_patch(patch);
  std::ofstream(p) << m.dump(2) << "\n";
}

json run_all(const RunConfig& cfg, const fs::path& dir, const std::function<void(const std::string&)>& log) {
  const fs::path corpus = dir / "corpus";
  json manifest = {{"config", to_json(cfg)}, {"seed", cfg.seed}};
  if (cfg.data.root.empty() && !fs::exists(corpus / cfg.data.manifest)) {
    manifest["corpus_sha256"] = synthesize(cfg, corpus);
  }
  const auto samples = load_dataset(cfg, corpus);
  const auto s1r = train_stage1(cfg, samples, dir / "stage1.ckpt", {-1, {}, log});
  manifest["stage1"] = {{"checkpoint", s1r.checkpoint.string()}, {"sha256", s1r.sha256}, {"steps", s1r.steps}};
  const auto s2r = train_stage2(cfg, samples, dir / "stage1.ckpt", dir / "stage2.ckpt", {-1, log});
  manifest["stage2"] = {{"checkpoint", s2r.checkpoint.string()}, {"sha256", s2r.sha256}, {"steps", s2r.steps},
                        {"eval_mse", s2r.eval_mse}, {"zero_predictor_mse", s2r.zero_predictor_mse}};

  const auto s1 = load_stage1(dir / "stage1.ckpt");
  const auto s2 = load_stage2(dir / "stage2.ckpt");
  const auto q = data::indices_of(samples, data::Split::Query);
  const auto g = data::indices_of(samples, data::Split::Gallery);
  auto qr = real_records(s1, samples, q);
  auto gr = real_records(s1, samples, g);
  generate_all_view_features(s1, s2, samples, q, qr, cfg.sampling, cfg.seed);
  generate_all_view_features(s1, s2, samples, g, gr, cfg.sampling, cfg.seed);
  save_records(qr, dir / "features", "query");
  save_records(gr, dir / "features", "gallery");

  const json metrics = reports_to_json(evaluate_all(qr, gr, cfg.protocol));
  fs::create_directories(dir / "eval");
  std::ofstream(dir / "eval" / "metrics.json") << metrics.dump(2) << "\n";
  manifest["metrics"] = metrics;
  update_run_manifest(dir, manifest);
  return metrics;
}

}  // namespace sdreid::pipeline
