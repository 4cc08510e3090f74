#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "sdreid/augment.hpp"
#include "sdreid/data.hpp"
#include "sdreid/errors.hpp"
#include "sdreid/image_io.hpp"
#include "test_util.hpp"

using namespace sdreid;
using namespace sdreid::data;

namespace {

std::filesystem::path scratch(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("sdreid_data_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream(p) << text;
}

std::string load_error(const std::filesystem::path& root) {
  try {
    load_folder_dataset(root, root / "manifest.csv", 8, 8);
  } catch (const DataError& e) {
    return e.what();
  }
  return "";
}

double tmin(const Tensor& t) { return *std::min_element(t.span().begin(), t.span().end()); }
double tmax(const Tensor& t) { return *std::max_element(t.span().begin(), t.span().end()); }
bool same(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::equal(a.span().begin(), a.span().end(), b.span().begin());
}

SyntheticCorpusSpec small_spec() {
  SyntheticCorpusSpec s;
  s.num_identities = 12;
  s.images_per_id_per_view = 4;
  return s;
}

}  // namespace

TEST_CASE("corpus counts") {
  auto s = small_spec();
  s.num_identities = 0;
  CHECK(generate_corpus(s).empty());
  s.num_identities = 50;
  s.images_per_id_per_view = 8;
  const auto c = generate_corpus(s);
  CHECK(c.size() == 800);
  std::set<int64_t> ids;
  for (const auto& x : c) {
    ids.insert(x.identity);
    CHECK(x.pixels.shape() == Shape{32, 32, 3});
  }
  CHECK(ids.size() == 50);
  CHECK(count_train_identities(c) == s.num_train_identities());
}

TEST_CASE("corpus generation is deterministic") {
  const auto a = generate_corpus(small_spec());
  const auto b = generate_corpus(small_spec());
  CHECK(corpus_digest(a) == corpus_digest(b));
  for (size_t i = 0; i < a.size(); ++i) CHECK(same(a[i].pixels, b[i].pixels));
  auto other = small_spec();
  other.seed = 8;
  CHECK(corpus_digest(generate_corpus(other)) != corpus_digest(a));
}

TEST_CASE("incompatible image size is a configuration error") {
  auto s = small_spec();
  s.height = 30;
  CHECK_THROWS_AS(generate_corpus(s), ConfigError);
}

TEST_CASE("split hygiene") {
  const auto c = generate_corpus(SyntheticCorpusSpec{});
  std::set<std::pair<int64_t, int64_t>> query_pairs, gallery_pairs;
  std::set<int64_t> query_ids, gallery_ids, train_ids, query_cams, gallery_cams;
  for (const auto& x : c) {
    CHECK(tmin(x.pixels) >= 0.0);
    CHECK(tmax(x.pixels) <= 1.0);
    if (x.split == Split::Query) {
      query_pairs.insert({x.identity, x.camera_id});
      query_ids.insert(x.identity);
      query_cams.insert(x.camera_id);
    } else if (x.split == Split::Gallery) {
      gallery_pairs.insert({x.identity, x.camera_id});
      gallery_ids.insert(x.identity);
      gallery_cams.insert(x.camera_id);
    } else {
      train_ids.insert(x.identity);
    }
  }
  for (const auto& p : query_pairs) CHECK(gallery_pairs.count(p) == 0);
  for (int64_t c_id : query_cams) CHECK(gallery_cams.count(c_id) == 0);
  for (int64_t id : query_ids) CHECK(gallery_ids.count(id) == 1);
  for (int64_t id : query_ids) CHECK(train_ids.count(id) == 0);
}

TEST_CASE("views are linearly separable on raw pixels") {
  // Logistic regression on standardized pixels, fit on Train, scored on Query + Gallery.
  const auto c = generate_corpus(SyntheticCorpusSpec{});
  const size_t n = c.front().pixels.size();
  std::vector<double> mu(n, 0.0), sd(n, 0.0);
  double nt = 0;
  for (const auto& x : c) {
    if (x.split != Split::Train) continue;
    nt += 1;
    for (size_t i = 0; i < n; ++i) mu[i] += x.pixels[i];
  }
  for (auto& m : mu) m /= nt;
  for (const auto& x : c)
    if (x.split == Split::Train)
      for (size_t i = 0; i < n; ++i) sd[i] += (x.pixels[i] - mu[i]) * (x.pixels[i] - mu[i]);
  for (auto& s2 : sd) s2 = std::sqrt(s2 / nt) + 1e-6;
  auto feat = [&](const ImageSample& x, size_t i) { return (x.pixels[i] - mu[i]) / sd[i]; };

  std::vector<double> w(n, 0.0), grad(n);
  double bias = 0;
  for (int epoch = 0; epoch < 100; ++epoch) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double gb = 0;
    for (const auto& x : c) {
      if (x.split != Split::Train) continue;
      double z = bias;
      for (size_t i = 0; i < n; ++i) z += w[i] * feat(x, i);
      const double err = 1.0 / (1.0 + std::exp(-z)) - (x.view == View::Aerial ? 1.0 : 0.0);
      for (size_t i = 0; i < n; ++i) grad[i] += err * feat(x, i);
      gb += err;
    }
    for (size_t i = 0; i < n; ++i) w[i] -= 0.1 * (grad[i] / nt + 1e-3 * w[i]);
    bias -= 0.1 * gb / nt;
  }
  int64_t right = 0, total = 0;
  for (const auto& x : c) {
    if (x.split == Split::Train) continue;
    double z = bias;
    for (size_t i = 0; i < n; ++i) z += w[i] * feat(x, i);
    right += (z > 0) == (x.view == View::Aerial);
    ++total;
  }
  CHECK(static_cast<double>(right) / static_cast<double>(total) > 0.9);
}

TEST_CASE("saved corpus loads back through the manifest") {
  auto c = generate_corpus(small_spec());
  const auto root = scratch("roundtrip");
  const auto manifest = save_corpus(c, root);
  const auto back = load_folder_dataset(root, manifest, 32, 32);
  REQUIRE(back.size() == c.size());
  CHECK(corpus_digest(back) == corpus_digest(c));
  for (size_t i = 0; i < c.size(); ++i) {
    CHECK(back[i].identity == c[i].identity);
    CHECK(back[i].view == c[i].view);
    CHECK(back[i].camera_id == c[i].camera_id);
    CHECK(back[i].split == c[i].split);
    CHECK(back[i].path == c[i].path);
  }
  std::filesystem::remove_all(root);
}

TEST_CASE("manifest parsing") {
  const auto root = scratch("manifest");
  io::Rgb8Image img{2, 2, std::vector<uint8_t>(12, 255)};
  io::write_png(root / "x.png", img);

  write_text(root / "manifest.csv", "");
  CHECK(load_folder_dataset(root, root / "manifest.csv", 8, 8).empty());

  write_text(root / "manifest.csv", "relative_path,identity,view,camera_id,split\nx.png,3,A,2,query\n");
  const auto one = load_folder_dataset(root, root / "manifest.csv", 8, 8);
  REQUIRE(one.size() == 1);
  CHECK(one[0].identity == 3);
  CHECK(one[0].view == View::Aerial);
  CHECK(one[0].camera_id == 2);
  CHECK(one[0].split == Split::Query);
  CHECK(one[0].pixels.shape() == Shape{8, 8, 3});
  CHECK(tmin(one[0].pixels) == 1.0);

  write_text(root / "manifest.csv", "x.png,3,B,0,train\n");
  CHECK(load_error(root) == "unknown view 'B' at line 1");
  write_text(root / "manifest.csv", "x.png,1,G,0,train\nx.png,2,G\n");
  CHECK(load_error(root) == "malformed manifest line at line 2: expected 5 fields");
  write_text(root / "manifest.csv", "gone.png,1,G,0,train\n");
  CHECK(load_error(root) == "missing file 'gone.png' at line 1");
  write_text(root / "manifest.csv", "x.png,1,G,0,holdout\n");
  CHECK(load_error(root) == "unknown split 'holdout' at line 1");
  CHECK_THROWS_AS(load_folder_dataset(root, root / "absent.csv", 8, 8), DataError);
  std::filesystem::remove_all(root);
}

TEST_CASE("PNG round-trip and bilinear resize") {
  const auto root = scratch("png");
  Rng rng(100);
  io::Rgb8Image img{5, 7, {}};
  for (int i = 0; i < 5 * 7 * 3; ++i) img.pixels.push_back(static_cast<uint8_t>(rng.uniform_int(0, 255)));
  io::write_png(root / "a.png", img);
  const auto back = io::read_png(root / "a.png");
  CHECK(back.pixels == img.pixels);
  CHECK(io::to_rgb8(io::from_rgb8(img)).pixels == img.pixels);

  const Tensor t = io::from_rgb8(img);
  const Tensor same = io::resize_bilinear(t, 5, 7);
  for (size_t i = 0; i < t.size(); ++i) CHECK(same[i] == doctest::Approx(t[i]).epsilon(1e-12));
  Tensor flat({3, 3, 3}, 0.25);
  const Tensor up = io::resize_bilinear(flat, 6, 9);
  CHECK(tmin(up) == doctest::Approx(0.25));
  CHECK(tmax(up) == doctest::Approx(0.25));

  write_text(root / "bad.png", "not a png");
  CHECK_THROWS_AS(io::read_png(root / "bad.png"), DataError);
  std::filesystem::remove_all(root);
}

TEST_CASE("identity batches") {
  const auto c = generate_corpus(small_spec());
  const auto train = indices_of(c, Split::Train);
  IdentityBatchSampler sampler(c, train, 4, 3);
  CHECK(sampler.batch_size() == 12);
  Rng rng(101);
  const int64_t n_ids = count_train_identities(c);
  std::vector<int64_t> seen(static_cast<size_t>(n_ids), 0);
  for (int b = 0; b < 1000; ++b) {
    const auto batch = sampler.next(rng);
    REQUIRE(batch.size() == 12);
    std::map<int64_t, int> per_id;
    for (size_t i : batch) {
      CHECK(c[i].split == Split::Train);
      ++per_id[c[i].identity];
    }
    CHECK(per_id.size() == 4);
    for (const auto& [id, count] : per_id) {
      CHECK(count == 3);
      ++seen[static_cast<size_t>(id)];
    }
  }
  for (auto s : seen) CHECK(s >= 1);

  Rng r1(5), r2(5);
  CHECK(sampler.next(r1) == sampler.next(r2));
}

TEST_CASE("batch sizes and the replacement rule") {
  auto spec = small_spec();
  spec.num_identities = 80;
  const auto c = generate_corpus(spec);
  IdentityBatchSampler big(c, indices_of(c, Split::Train), 32, 4);
  CHECK(big.batch_size() == 128);

  std::vector<ImageSample> one(1);
  one[0].pixels = Tensor({8, 8, 3}, 0.0);
  IdentityBatchSampler solo(one, {0}, 1, 2);
  Rng rng(102);
  CHECK(solo.next(rng) == std::vector<size_t>{0, 0});

  CHECK_THROWS_AS(IdentityBatchSampler(c, indices_of(c, Split::Train), 41, 4), ConfigError);
  CHECK_THROWS_AS(IdentityBatchSampler(c, indices_of(c, Split::Train), 4, 1), ConfigError);
}

TEST_CASE("augmentations") {
  Rng rng(103);
  Tensor img({4, 6, 3});
  fill_uniform(img, rng, 0, 1);
  const Tensor f = hflip(img);
  for (int64_t y = 0; y < 4; ++y)
    for (int64_t x = 0; x < 6; ++x)
      for (int64_t ch = 0; ch < 3; ++ch)
        CHECK(f[static_cast<size_t>((y * 6 + x) * 3 + ch)] == img[static_cast<size_t>((y * 6 + 5 - x) * 3 + ch)]);
  CHECK(same(hflip(f), img));

  const Tensor pc = pad_crop(img, 2, rng);
  CHECK(pc.shape() == img.shape());
  CHECK(same(pad_crop(img, 0, rng), img));
  CHECK(same(random_erasing(img, 0.0, rng), img));
  const Tensor er = random_erasing(img, 1.0, rng);
  CHECK_FALSE(same(er, img));
  CHECK(tmin(er) >= 0.0);
  CHECK(tmax(er) <= 1.0);

  AugmentConfig none{0.0, 0, 0.0};
  Tensor batch({2, 4, 6, 3});
  fill_uniform(batch, rng, 0, 1);
  CHECK(same(augment_batch(batch, none, rng), batch));
}
