#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "sdreid/errors.hpp"
#include "sdreid/hash.hpp"
#include "sdreid/pipeline.hpp"
#include "test_util.hpp"

using namespace sdreid;
using namespace sdreid::pipeline;

namespace {

RunConfig tiny_config() {
  RunConfig c = desk_config();
  c.name = "tiny";
  c.data.synthetic.num_identities = 8;
  c.data.synthetic.images_per_id_per_view = 4;
  c.data.synthetic.height = 16;
  c.data.synthetic.width = 16;
  c.encoder.image_height = 16;
  c.encoder.image_width = 16;
  c.encoder.embed_dim = 16;
  c.encoder.num_layers = 2;
  c.encoder.num_heads = 2;
  c.encoder.mlp_ratio = 2;
  c.encoder.num_id_conditions = 1;
  c.condition.embed_dim = 16;
  c.condition.num_id_conditions = 1;
  c.denoiser.latent_channels = 1;
  c.denoiser.widths = {8, 16};
  c.denoiser.groups = 4;
  c.denoiser.time_dim = 8;
  c.denoiser.context_dim = 16;
  c.stage1.epochs = 6;
  c.stage1.warmup_epochs = 1;
  c.stage1.ids_per_batch = 2;
  c.stage1.instances_per_id = 2;
  c.stage2.epochs = 4;
  c.stage2.batch_size = 8;
  c.stage2.timesteps = 50;
  c.stage2.lr = 1e-3;
  c.sampling.steps = 5;
  c.validate();
  return c;
}

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("sdreid_pipe_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

struct Prepared {
  RunConfig cfg;
  fs::path dir;
  std::vector<data::ImageSample> samples;
};

Prepared prepare(const std::string& name) {
  Prepared p{tiny_config(), fresh_dir(name), {}};
  synthesize(p.cfg, p.dir / "corpus");
  p.samples = load_dataset(p.cfg, p.dir / "corpus");
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(SDREID_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

}  // namespace

TEST_CASE("config round-trips and rejects unknown keys") {
  const auto c = tiny_config();
  const auto j = to_json(c);
  CHECK(to_json(run_config_from_json(j)) == j);
  auto bad = j;
  bad["stage1"]["learning_rate"] = 0.1;
  CHECK_THROWS_AS(run_config_from_json(bad), ConfigError);
  auto mismatch = j;
  mismatch["condition"]["embed_dim"] = 8;
  CHECK_THROWS_AS(run_config_from_json(mismatch), ConfigError);
  CHECK(to_json(desk_config())["stage1"]["lr"] == 0.008);
}

TEST_CASE("missing dataset is reported before training") {
  const auto cfg = tiny_config();
  const auto dir = fresh_dir("missing");
  try {
    load_dataset(cfg, dir / "corpus");
    FAIL("expected a data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("run `synth` first") != std::string::npos);
  }
}

TEST_CASE("stage 1 smoke run lowers the loss and is deterministic") {
  auto p = prepare("s1");
  const auto a = train_stage1(p.cfg, p.samples, p.dir / "a.ckpt");
  REQUIRE(a.history.size() >= 8);
  double head = 0, tail = 0;
  for (size_t i = 0; i < 4; ++i) {
    head += a.history[i].l_total;
    tail += a.history[a.history.size() - 1 - i].l_total;
  }
  CHECK(tail < head);
  const auto b = train_stage1(p.cfg, p.samples, p.dir / "b.ckpt");
  CHECK(a.sha256 == b.sha256);

  const auto m = load_stage1(p.dir / "a.ckpt");
  CHECK(m.step == a.steps);
  CHECK(m.bank->initialized(data::View::Aerial));
  CHECK(m.bank->initialized(data::View::Ground));
}

TEST_CASE("resumed stage 1 matches the uninterrupted run bit for bit") {
  auto p = prepare("resume");
  Stage1Options ten;
  ten.stop_after_steps = 10;
  const auto full = train_stage1(p.cfg, p.samples, p.dir / "full.ckpt", ten);
  REQUIRE(full.steps == 10);

  Stage1Options five;
  five.stop_after_steps = 5;
  train_stage1(p.cfg, p.samples, p.dir / "half.ckpt", five);
  Stage1Options rest;
  rest.stop_after_steps = 10;
  rest.resume_from = p.dir / "half.ckpt";
  const auto resumed = train_stage1(p.cfg, p.samples, p.dir / "resumed.ckpt", rest);
  CHECK(resumed.steps == 10);
  CHECK(resumed.sha256 == full.sha256);
  for (size_t i = 0; i < resumed.history.size(); ++i)
    CHECK(resumed.history[i].l_total == full.history[5 + i].l_total);
}

TEST_CASE("stage 2 leaves stage 1 untouched and beats the zero predictor") {
  auto p = prepare("s2");
  const auto s1 = train_stage1(p.cfg, p.samples, p.dir / "stage1.ckpt");
  const auto before = load_stage1(p.dir / "stage1.ckpt");
  const auto s2 = train_stage2(p.cfg, p.samples, p.dir / "stage1.ckpt", p.dir / "stage2.ckpt");
  CHECK(sha256_file(p.dir / "stage1.ckpt") == s1.sha256);
  const auto after = load_stage1(p.dir / "stage1.ckpt");
  for (const auto& n : before.encoder->params().names()) {
    const auto& x = before.encoder->params().get(n).value();
    const auto& y = after.encoder->params().get(n).value();
    CHECK(std::equal(x.span().begin(), x.span().end(), y.span().begin()));
  }
  CHECK(s2.eval_mse < s2.zero_predictor_mse);

  const auto again = train_stage2(p.cfg, p.samples, p.dir / "stage1.ckpt", p.dir / "stage2b.ckpt");
  CHECK(again.sha256 == s2.sha256);

  const auto m = load_stage2(p.dir / "stage2.ckpt");
  CHECK(m.stage1_sha256 == s1.sha256);

  auto pinned = p.cfg;
  pinned.stage2.stage1_sha256 = std::string(64, '0');
  CHECK_THROWS_AS(train_stage2(pinned, p.samples, p.dir / "stage1.ckpt", p.dir / "stage2c.ckpt"), ConfigError);
}

TEST_CASE("generation fills every record reproducibly and evaluation covers all modes") {
  auto p = prepare("gen");
  train_stage1(p.cfg, p.samples, p.dir / "stage1.ckpt");
  train_stage2(p.cfg, p.samples, p.dir / "stage1.ckpt", p.dir / "stage2.ckpt");
  const auto s1 = load_stage1(p.dir / "stage1.ckpt");
  const auto s2 = load_stage2(p.dir / "stage2.ckpt");
  const auto qi = data::indices_of(p.samples, data::Split::Query);
  const auto gi = data::indices_of(p.samples, data::Split::Gallery);
  auto q = real_records(s1, p.samples, qi);
  auto g = real_records(s1, p.samples, gi);

  const auto real_only = evaluate_all(q, g, eval::Direction::AtoG);
  CHECK(real_only.size() == 1);
  const auto direct = eval::evaluate_records(q, g, eval::Direction::AtoG, eval::FusionMode::Real);
  CHECK(real_only.at(eval::FusionMode::Real).map_score == direct.map_score);

  generate_all_view_features(s1, s2, p.samples, qi, q, p.cfg.sampling, 3);
  generate_all_view_features(s1, s2, p.samples, gi, g, p.cfg.sampling, 3);
  for (const auto& r : q) {
    REQUIRE(r.gen_aerial);
    REQUIRE(r.gen_ground);
    CHECK(r.gen_aerial->size() == 16);
  }
  auto q2 = real_records(s1, p.samples, qi);
  generate_all_view_features(s1, s2, p.samples, qi, q2, p.cfg.sampling, 3);
  for (size_t i = 0; i < q.size(); ++i) CHECK(*q2[i].gen_aerial == *q[i].gen_aerial);

  // A subset draws the same features as the full pass.
  const std::vector<size_t> sub{qi[3], qi[1]};
  auto qs = real_records(s1, p.samples, sub);
  generate_all_view_features(s1, s2, p.samples, sub, qs, p.cfg.sampling, 3);
  CHECK(*qs[0].gen_ground == *q[3].gen_ground);

  const auto reports = evaluate_all(q, g, eval::Direction::AtoG);
  CHECK(reports.size() == 5);
  const auto j = reports_to_json(reports);
  for (auto m : eval::kAllFusionModes) CHECK(j["modes"].contains(eval::to_string(m)));

  save_records(q, p.dir, "query");
  const auto back = load_records(p.dir, "query");
  REQUIRE(back.size() == q.size());
  CHECK(back[2].real == q[2].real);
  CHECK(*back[2].gen_ground == *q[2].gen_ground);
  CHECK(back[2].camera_id == q[2].camera_id);
}

TEST_CASE("full runs are self-describing and reproducible") {
  const auto cfg = tiny_config();
  const auto a = fresh_dir("all_a"), b = fresh_dir("all_b");
  const auto ma = run_all(cfg, a);
  const auto mb = run_all(cfg, b);
  CHECK(ma.dump() == mb.dump());
  std::ifstream fa(a / "eval" / "metrics.json"), fb(b / "eval" / "metrics.json");
  const std::string sa((std::istreambuf_iterator<char>(fa)), {}), sb((std::istreambuf_iterator<char>(fb)), {});
  CHECK(sa == sb);
  std::ifstream mf(a / "manifest.json");
  const auto manifest = nlohmann::json::parse(mf);
  CHECK(manifest.contains("config"));
  CHECK(manifest.contains("stage1"));
  CHECK(manifest.contains("stage2"));
  CHECK(manifest.contains("metrics"));
}

TEST_CASE("CLI exit codes") {
  const auto dir = fresh_dir("cli");
  CHECK(run_cli("train-stage1 --run-dir " + dir.string()) == 3);
  {
    std::ofstream(dir / "bad.json") << R"({"stage1": {"bogus": 1}})";
  }
  CHECK(run_cli("synth -c " + (dir / "bad.json").string() + " --run-dir " + dir.string()) == 2);
  {
    auto j = to_json(tiny_config());
    j["stage1"]["lr"] = 1e200;
    std::ofstream(dir / "nan.json") << j.dump();
  }
  CHECK(run_cli("synth -c " + (dir / "nan.json").string() + " --run-dir " + dir.string()) == 0);
  CHECK(run_cli("train-stage1 -c " + (dir / "nan.json").string() + " --run-dir " + dir.string()) == 4);
  CHECK(run_cli("no-such-verb") != 0);
}
