#include "sdreid/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "sdreid/errors.hpp"
#include "sdreid/hash.hpp"
#include "sdreid/image_io.hpp"

namespace sdreid::data {

std::string_view view_name(View v) { return v == View::Aerial ? "aerial" : "ground"; }
std::string_view view_token(View v) { return v == View::Aerial ? "A" : "G"; }
View other_view(View v) { return v == View::Aerial ? View::Ground : View::Aerial; }

std::string_view split_name(Split s) {
  switch (s) {
    case Split::Train:
      return "train";
    case Split::Query:
      return "query";
    case Split::Gallery:
      return "gallery";
  }
  return "?";
}

int64_t SyntheticCorpusSpec::num_train_identities() const {
  if (num_identities <= 0) return 0;
  const auto n = static_cast<int64_t>(std::ceil(static_cast<double>(num_identities) * train_fraction));
  return std::clamp<int64_t>(n, 0, num_identities);
}

namespace {

using Rgb = std::array<double, 3>;

Rgb random_color(Rng& rng, double lo = 0.05, double hi = 0.95) {
  return {rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)};
}

// Identity-keyed body layout in canonical [0,1]^2 coordinates (u right, v down).
struct Glyph {
  Rgb skin, hair, upper, lower, accent, bag;
  double body_width = 0.4;
  double torso_end = 0.6;
  int accent_shape = 0;  // 0 horizontal band, 1 circle, 2 diamond, 3 vertical band
  double accent_y = 0.4;
  int bag_side = 0;  // -1 left, 0 none, 1 right
  bool leg_gap = false;
  bool hat = false;

  static Glyph random(Rng& rng) {
    Glyph g;
    g.skin = {rng.uniform(0.55, 0.95), rng.uniform(0.4, 0.75), rng.uniform(0.3, 0.6)};
    g.hair = random_color(rng, 0.02, 0.6);
    g.upper = random_color(rng);
    g.lower = random_color(rng);
    g.accent = random_color(rng);
    g.bag = random_color(rng);
    g.body_width = rng.uniform(0.28, 0.46);
    g.torso_end = rng.uniform(0.52, 0.66);
    g.accent_shape = static_cast<int>(rng.uniform_int(0, 3));
    g.accent_y = rng.uniform(0.32, g.torso_end - 0.08);
    g.bag_side = static_cast<int>(rng.uniform_int(-1, 1));
    g.leg_gap = rng.bernoulli(0.5);
    g.hat = rng.bernoulli(0.5);
    return g;
  }

  // Returns false for background.
  bool shade(double u, double v, Rgb& out) const {
    const double half = body_width / 2;
    const double du = u - 0.5;
    // head
    const double hv = v - 0.16;
    if (du * du + hv * hv < 0.085 * 0.085) {
      out = (hv < (hat ? 0.0 : -0.04)) ? hair : skin;
      return true;
    }
    // torso with accent
    if (v >= 0.26 && v < torso_end && std::abs(du) < half) {
      const double dv = v - accent_y;
      bool on = false;
      switch (accent_shape) {
        case 0:
          on = std::abs(dv) < 0.035;
          break;
        case 1:
          on = du * du + dv * dv < 0.07 * 0.07;
          break;
        case 2:
          on = std::abs(du) + std::abs(dv) < 0.08;
          break;
        default:
          on = std::abs(du) < 0.04;
          break;
      }
      out = on ? accent : upper;
      return true;
    }
    // arms
    if (v >= 0.27 && v < torso_end - 0.02 && std::abs(du) >= half && std::abs(du) < half + 0.07) {
      out = upper;
      for (auto& c : out) c *= 0.85;
      return true;
    }
    // bag
    if (bag_side != 0 && v >= 0.40 && v < 0.58) {
      const double side = bag_side * du;
      if (side >= half + 0.07 && side < half + 0.16) {
        out = bag;
        return true;
      }
    }
    // legs
    if (v >= torso_end && v < 0.95 && std::abs(du) < half - 0.02) {
      if (leg_gap && std::abs(du) < 0.03) return false;
      out = lower;
      return true;
    }
    return false;
  }
};

struct ImageJitter {
  double dx, dy, scale, gain;
  Rgb background;
};

Tensor render(const Glyph& glyph, View view, double strength, const ImageJitter& jit, int64_t height, int64_t width,
              Rng& noise_rng) {
  Tensor img({height, width, 3});
  constexpr int kSuper = 2;
  const double squash = 1.0 - 0.35 * strength;
  for (int64_t y = 0; y < height; ++y) {
    for (int64_t x = 0; x < width; ++x) {
      Rgb acc{0, 0, 0};
      for (int sy = 0; sy < kSuper; ++sy) {
        for (int sx = 0; sx < kSuper; ++sx) {
          const double X = (x + (sx + 0.5) / kSuper) / static_cast<double>(width);
          const double Y = (y + (sy + 0.5) / kSuper) / static_cast<double>(height);
          double u = (X - 0.5 - jit.dx) / jit.scale + 0.5;
          double v = (Y - 0.5 - jit.dy) / jit.scale + 0.5;
          if (view == View::Aerial) {
            // Top-down look: compressed height, wider near the top, skewed.
            const double widen = 1.0 + 0.5 * strength * (0.5 - v);
            v = 0.5 + (v - 0.55) / squash;
            u = 0.5 + (u - 0.5) / widen + 0.12 * strength * (v - 0.5);
          }
          Rgb c;
          if (!glyph.shade(u, v, c)) c = jit.background;
          for (int k = 0; k < 3; ++k) acc[k] += c[k];
        }
      }
      for (int k = 0; k < 3; ++k) {
        double c = acc[k] / (kSuper * kSuper) * jit.gain;
        if (view == View::Aerial) c = c * (1.0 - 0.3 * strength) + 0.3 * strength * 0.95;
        c += 0.02 * noise_rng.normal();
        img[(y * width + x) * 3 + k] = std::clamp(c, 0.0, 1.0);
      }
    }
  }
  return img;
}

std::string trim(std::string_view s) {
  size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

bool parse_nonneg(const std::string& s, int64_t& out) {
  if (s.empty()) return false;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc() && p == s.data() + s.size() && out >= 0;
}

}  // namespace

std::vector<ImageSample> generate_corpus(const SyntheticCorpusSpec& spec) {
  if (spec.num_identities < 0 || spec.images_per_id_per_view < 0) {
    throw ConfigError("corpus counts must be non-negative");
  }
  if (spec.height <= 0 || spec.width <= 0 || spec.patch_size <= 0 || spec.height % spec.patch_size != 0 ||
      spec.width % spec.patch_size != 0) {
    throw ConfigError("image size " + std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                      " is not a positive multiple of patch size " + std::to_string(spec.patch_size));
  }
  if (spec.view_transform_strength < 0) throw ConfigError("view_transform_strength must be >= 0");

  std::vector<ImageSample> out;
  const int64_t n_train = spec.num_train_identities();
  const int64_t per_view = spec.images_per_id_per_view;
  const int64_t n_query = per_view == 1 ? 1 : (per_view + 1) / 2;
  const Rng root(spec.seed, "corpus");
  out.reserve(static_cast<size_t>(spec.num_identities * per_view * 2));
  for (int64_t id = 0; id < spec.num_identities; ++id) {
    Rng glyph_rng = root.fork("glyph/" + std::to_string(id));
    const Glyph glyph = Glyph::random(glyph_rng);
    const bool train = id < n_train;
    for (View view : {View::Aerial, View::Ground}) {
      const int64_t cam_base = view == View::Aerial ? 0 : 2;
      for (int64_t i = 0; i < per_view; ++i) {
        Rng rng = root.fork("image/" + std::to_string(id) + "/" + std::string(view_token(view)) + "/" +
                            std::to_string(i));
        ImageJitter jit{rng.uniform(-0.06, 0.06), rng.uniform(-0.05, 0.05), rng.uniform(0.92, 1.08),
                        rng.uniform(0.9, 1.1), random_color(rng, 0.2, 0.7)};
        ImageSample s;
        s.pixels = render(glyph, view, spec.view_transform_strength, jit, spec.height, spec.width, rng);
        s.identity = id;
        s.view = view;
        if (train) {
          s.split = Split::Train;
          s.camera_id = cam_base + (i % 2);
        } else {
          bool query = i < n_query;
          // A single image per view: aerial goes to query, ground to gallery,
          // so every query identity still has a gallery match.
          if (per_view == 1) query = view == View::Aerial;
          s.split = query ? Split::Query : Split::Gallery;
          s.camera_id = cam_base + (query ? 0 : 1);
        }
        out.push_back(std::move(s));
      }
    }
  }
  return out;
}

std::string corpus_digest(const std::vector<ImageSample>& samples) {
  Sha256 h;
  for (const auto& s : samples) {
    const int64_t meta[4] = {s.identity, static_cast<int64_t>(s.view), s.camera_id, static_cast<int64_t>(s.split)};
    h.update(meta, sizeof(meta));
    const auto rgb = io::to_rgb8(s.pixels);
    h.update(rgb.pixels);
  }
  return h.hex_digest();
}

std::filesystem::path save_corpus(std::vector<ImageSample>& samples, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root / "images");
  const fs::path manifest = root / "manifest.csv";
  std::ofstream out(manifest);
  if (!out) throw DataError("cannot write manifest '" + manifest.string() + "'");
  out << "relative_path,identity,view,camera_id,split\n";
  std::map<std::string, int> counters;
  for (auto& s : samples) {
    std::ostringstream stem;
    stem << "images/" << s.identity << '_' << view_token(s.view) << "_c" << s.camera_id;
    const int idx = counters[stem.str()]++;
    const std::string rel = stem.str() + "_" + std::to_string(idx) + ".png";
    io::write_png(root / rel, io::to_rgb8(s.pixels));
    s.path = rel;
    out << rel << ',' << s.identity << ',' << view_token(s.view) << ',' << s.camera_id << ',' << split_name(s.split)
        << '\n';
  }
  if (!out) throw DataError("failed writing manifest '" + manifest.string() + "'");
  return manifest;
}

std::vector<ImageSample> load_folder_dataset(const std::filesystem::path& root, const std::filesystem::path& manifest,
                                             int64_t height, int64_t width) {
  std::ifstream in(manifest);
  if (!in) throw DataError("cannot open manifest '" + manifest.string() + "'");
  std::vector<ImageSample> out;
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string body = trim(line);
    if (body.empty()) continue;
    if (line_no == 1 && body.rfind("relative_path", 0) == 0) continue;
    std::vector<std::string> fields;
    std::stringstream ss(body);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(trim(field));
    if (!body.empty() && body.back() == ',') fields.emplace_back();
    const std::string at = " at line " + std::to_string(line_no);
    if (fields.size() != 5) throw DataError("malformed manifest line" + at + ": expected 5 fields");
    ImageSample s;
    s.path = fields[0];
    if (s.path.empty()) throw DataError("malformed manifest line" + at + ": empty path");
    if (!parse_nonneg(fields[1], s.identity)) throw DataError("bad identity '" + fields[1] + "'" + at);
    const std::string v = lower(fields[2]);
    if (v == "a" || v == "aerial") {
      s.view = View::Aerial;
    } else if (v == "g" || v == "ground") {
      s.view = View::Ground;
    } else {
      throw DataError("unknown view '" + fields[2] + "'" + at);
    }
    if (!parse_nonneg(fields[3], s.camera_id)) throw DataError("bad camera id '" + fields[3] + "'" + at);
    const std::string sp = lower(fields[4]);
    if (sp == "train") {
      s.split = Split::Train;
    } else if (sp == "query") {
      s.split = Split::Query;
    } else if (sp == "gallery") {
      s.split = Split::Gallery;
    } else {
      throw DataError("unknown split '" + fields[4] + "'" + at);
    }
    const auto file = root / s.path;
    if (!std::filesystem::exists(file)) throw DataError("missing file '" + s.path + "'" + at);
    s.pixels = io::resize_bilinear(io::from_rgb8(io::read_png(file)), height, width);
    out.push_back(std::move(s));
  }
  return out;
}

int64_t count_train_identities(const std::vector<ImageSample>& samples) {
  std::vector<int64_t> ids;
  for (const auto& s : samples)
    if (s.split == Split::Train) ids.push_back(s.identity);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] != static_cast<int64_t>(i)) {
      throw DataError("train identities must form the contiguous range [0, " + std::to_string(ids.size()) + ")");
    }
  }
  return static_cast<int64_t>(ids.size());
}

IdentityBatchSampler::IdentityBatchSampler(const std::vector<ImageSample>& samples, std::vector<size_t> candidates,
                                           int64_t ids_per_batch, int64_t instances_per_id)
    : ids_per_batch_(ids_per_batch), instances_per_id_(instances_per_id), pool_size_(candidates.size()) {
  if (instances_per_id < 2) throw ConfigError("instances_per_id must be >= 2 for the triplet loss");
  if (ids_per_batch < 1) throw ConfigError("ids_per_batch must be >= 1");
  std::map<int64_t, std::vector<size_t>> groups;
  for (size_t idx : candidates) groups[samples.at(idx).identity].push_back(idx);
  for (auto& [id, members] : groups) by_identity_.push_back(std::move(members));
  if (static_cast<int64_t>(by_identity_.size()) < ids_per_batch) {
    throw ConfigError("only " + std::to_string(by_identity_.size()) + " distinct train identities, but ids_per_batch=" +
                      std::to_string(ids_per_batch));
  }
}

std::vector<size_t> IdentityBatchSampler::next(Rng& rng) const {
  std::vector<size_t> order(by_identity_.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::vector<size_t> batch;
  batch.reserve(static_cast<size_t>(batch_size()));
  for (int64_t p = 0; p < ids_per_batch_; ++p) {
    const auto j = static_cast<size_t>(rng.uniform_int(p, static_cast<int64_t>(order.size()) - 1));
    std::swap(order[p], order[j]);
    const auto& members = by_identity_[order[p]];
    const auto n = static_cast<int64_t>(members.size());
    if (n >= instances_per_id_) {
      std::vector<size_t> pick(members);
      for (int64_t k = 0; k < instances_per_id_; ++k) {
        const auto r = static_cast<size_t>(rng.uniform_int(k, n - 1));
        std::swap(pick[k], pick[r]);
        batch.push_back(pick[k]);
      }
    } else {
      for (int64_t k = 0; k < instances_per_id_; ++k) batch.push_back(members[rng.uniform_int(0, n - 1)]);
    }
  }
  return batch;
}

int64_t IdentityBatchSampler::batches_per_epoch() const {
  return std::max<int64_t>(1, static_cast<int64_t>(pool_size_) / batch_size());
}

std::vector<size_t> indices_of(const std::vector<ImageSample>& samples, Split split) {
  std::vector<size_t> out;
  for (size_t i = 0; i < samples.size(); ++i)
    if (samples[i].split == split) out.push_back(i);
  return out;
}

Tensor stack_pixels(const std::vector<ImageSample>& samples, const std::vector<size_t>& indices) {
  if (indices.empty()) return Tensor({0, 0, 0, 3});
  const auto& first = samples.at(indices[0]).pixels;
  const int64_t h = first.dim(0), w = first.dim(1);
  Tensor out({static_cast<int64_t>(indices.size()), h, w, 3});
  const size_t block = static_cast<size_t>(h * w * 3);
  for (size_t i = 0; i < indices.size(); ++i) {
    const auto& px = samples.at(indices[i]).pixels;
    if (px.size() != block) throw ContractError("stack_pixels: inconsistent image sizes");
    std::copy(px.data(), px.data() + block, out.data() + i * block);
  }
  return out;
}

}  // namespace sdreid::data
