#include "sdreid/denoiser.hpp"

#include <cmath>

#include "sdreid/errors.hpp"

namespace sdreid::model {

using ag::Var;

std::string to_string(VrdMechanism m) {
  switch (m) {
    case VrdMechanism::DownConv: return "downconv";
    case VrdMechanism::Pooling: return "pooling";
    case VrdMechanism::Projection: return "projection";
  }
  return "?";
}

std::string to_string(VrdPositions p) {
  switch (p) {
    case VrdPositions::Down: return "down";
    case VrdPositions::Up: return "up";
    case VrdPositions::Both: return "both";
  }
  return "?";
}

VrdMechanism parse_vrd_mechanism(const std::string& s) {
  if (s == "downconv") return VrdMechanism::DownConv;
  if (s == "pooling") return VrdMechanism::Pooling;
  if (s == "projection") return VrdMechanism::Projection;
  throw ConfigError("unknown VRD mechanism '" + s + "' (downconv, pooling, projection)");
}

VrdPositions parse_vrd_positions(const std::string& s) {
  if (s == "down") return VrdPositions::Down;
  if (s == "up") return VrdPositions::Up;
  if (s == "both") return VrdPositions::Both;
  throw ConfigError("unknown VRD positions '" + s + "' (down, up, both)");
}

void DenoiserConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("denoiser: " + m); };
  if (latent_channels <= 0 || latent_height <= 0 || latent_width <= 0) fail("latent dims must be positive");
  if (widths.empty()) fail("need at least one width");
  const int64_t f = int64_t{1} << (levels() - 1);
  if (latent_height % f != 0 || latent_width % f != 0) fail("latent size must halve cleanly at every level");
  if (num_res_blocks < 1) fail("num_res_blocks must be >= 1");
  if (time_dim <= 0 || time_dim % 2 != 0) fail("time_dim must be a positive even number");
  if (context_dim <= 0) fail("context_dim must be positive");
  if (groups < 1) fail("groups must be >= 1");
  for (size_t i = 0; i < widths.size(); ++i) {
    if (widths[i] <= 0 || widths[i] % groups != 0) fail("widths must be positive multiples of groups");
  }
}

void to_json(nlohmann::json& j, const DenoiserConfig& c) {
  j = nlohmann::json{{"latent_channels", c.latent_channels},
                     {"latent_height", c.latent_height},
                     {"latent_width", c.latent_width},
                     {"widths", c.widths},
                     {"num_res_blocks", c.num_res_blocks},
                     {"time_dim", c.time_dim},
                     {"context_dim", c.context_dim},
                     {"groups", c.groups},
                     {"vrd_mechanism", to_string(c.vrd_mechanism)},
                     {"vrd_positions", to_string(c.vrd_positions)},
                     {"vrd_enabled", c.vrd_enabled}};
}

void from_json(const nlohmann::json& j, DenoiserConfig& c) {
  DenoiserConfig d;
  c.latent_channels = j.value("latent_channels", d.latent_channels);
  c.latent_height = j.value("latent_height", d.latent_height);
  c.latent_width = j.value("latent_width", d.latent_width);
  c.widths = j.value("widths", d.widths);
  c.num_res_blocks = j.value("num_res_blocks", d.num_res_blocks);
  c.time_dim = j.value("time_dim", d.time_dim);
  c.context_dim = j.value("context_dim", d.context_dim);
  c.groups = j.value("groups", d.groups);
  c.vrd_mechanism = parse_vrd_mechanism(j.value("vrd_mechanism", to_string(d.vrd_mechanism)));
  c.vrd_positions = parse_vrd_positions(j.value("vrd_positions", to_string(d.vrd_positions)));
  c.vrd_enabled = j.value("vrd_enabled", d.vrd_enabled);
}

Tensor feature_to_latent(const std::vector<double>& feature, const DenoiserConfig& cfg) {
  if (static_cast<int64_t>(feature.size()) != cfg.feature_dim()) {
    throw ContractError("feature_to_latent: feature has " + std::to_string(feature.size()) + " values, latent needs " +
                        std::to_string(cfg.feature_dim()));
  }
  return Tensor({cfg.latent_channels, cfg.latent_height, cfg.latent_width}, feature);
}

std::vector<double> latent_to_feature(const Tensor& latent) { return latent.storage(); }

Tensor timestep_embedding(const std::vector<int64_t>& t, int64_t dim) {
  const int64_t b = static_cast<int64_t>(t.size()), half = dim / 2;
  Tensor out({b, dim});
  for (int64_t i = 0; i < b; ++i)
    for (int64_t k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      const double a = static_cast<double>(t[static_cast<size_t>(i)]) * f;
      out.at(i, k) = std::sin(a);
      out.at(i, half + k) = std::cos(a);
    }
  return out;
}

void Denoiser::add_res_block(const std::string& p, int64_t cin, int64_t cout, Rng& rng) {
  params_.add(p + "norm1.weight", Tensor({cin}, 1.0));
  params_.add(p + "norm1.bias", Tensor({cin}, 0.0));
  params_.add(p + "conv1.weight", nn::init_conv(cout, cin, 3, rng));
  params_.add(p + "conv1.bias", nn::init_bias(cout, cin * 9, rng));
  params_.add(p + "time.weight", nn::init_linear(cfg_.time_dim, cout, rng));
  params_.add(p + "time.bias", nn::init_bias(cout, cfg_.time_dim, rng));
  params_.add(p + "norm2.weight", Tensor({cout}, 1.0));
  params_.add(p + "norm2.bias", Tensor({cout}, 0.0));
  params_.add(p + "conv2.weight", nn::init_conv(cout, cout, 3, rng));
  params_.add(p + "conv2.bias", nn::init_bias(cout, cout * 9, rng));
  if (cin != cout) {
    params_.add(p + "skip.weight", nn::init_conv(cout, cin, 1, rng));
    params_.add(p + "skip.bias", nn::init_bias(cout, cin, rng));
  }
}

void Denoiser::add_cross_attention(const std::string& p, int64_t c, Rng& rng) {
  params_.add(p + "norm.weight", Tensor({c}, 1.0));
  params_.add(p + "norm.bias", Tensor({c}, 0.0));
  params_.add(p + "wq", nn::init_linear(c, c, rng));
  params_.add(p + "wk", nn::init_linear(cfg_.context_dim, c, rng));
  params_.add(p + "wv", nn::init_linear(cfg_.context_dim, c, rng));
  params_.add(p + "out.weight", nn::init_linear(c, c, rng));
  params_.add(p + "out.bias", nn::init_bias(c, c, rng));
}

void Denoiser::add_vrd(const BlockShape& b, Rng& rng) {
  const std::string p = "vrd." + b.name + ".";
  const int64_t cl = cfg_.latent_channels;
  switch (cfg_.vrd_mechanism) {
    case VrdMechanism::DownConv:
      params_.add(p + "weight", nn::init_conv(b.channels, cl, 3, rng));
      params_.add(p + "bias", nn::init_bias(b.channels, cl * 9, rng));
      break;
    case VrdMechanism::Pooling:
      params_.add(p + "weight", nn::init_conv(b.channels, cl, 1, rng));
      params_.add(p + "bias", nn::init_bias(b.channels, cl, rng));
      break;
    case VrdMechanism::Projection: {
      const int64_t n = b.channels * b.height * b.width;
      params_.add(p + "weight", nn::init_linear(cfg_.feature_dim(), n, rng));
      params_.add(p + "bias", nn::init_bias(n, cfg_.feature_dim(), rng));
      break;
    }
  }
}

Denoiser::Denoiser(const DenoiserConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed, "denoiser");
  const auto& w = cfg_.widths;
  const int64_t levels = cfg_.levels(), td = cfg_.time_dim;
  params_.add("time.fc1.weight", nn::init_linear(td, td, rng));
  params_.add("time.fc1.bias", nn::init_bias(td, td, rng));
  params_.add("time.fc2.weight", nn::init_linear(td, td, rng));
  params_.add("time.fc2.bias", nn::init_bias(td, td, rng));
  params_.add("conv_in.weight", nn::init_conv(w[0], cfg_.latent_channels, 3, rng));
  params_.add("conv_in.bias", nn::init_bias(w[0], cfg_.latent_channels * 9, rng));

  const bool vrd_down = cfg_.vrd_enabled && cfg_.vrd_positions != VrdPositions::Up;
  const bool vrd_up = cfg_.vrd_enabled && cfg_.vrd_positions != VrdPositions::Down;
  std::vector<BlockShape> down_sites, up_sites;
  for (int64_t i = 0; i < levels; ++i) {
    const size_t ui = static_cast<size_t>(i);
    const std::string p = "down." + std::to_string(i) + ".";
    const int64_t cin = i == 0 ? w[0] : w[ui - 1];
    if (i > 0) {
      params_.add(p + "downsample.weight", nn::init_conv(cin, cin, 3, rng));
      params_.add(p + "downsample.bias", nn::init_bias(cin, cin * 9, rng));
    }
    const int64_t h = cfg_.latent_height >> i, wd = cfg_.latent_width >> i;
    if (vrd_down) down_sites.push_back({"down." + std::to_string(i), cin, h, wd});
    for (int64_t r = 0; r < cfg_.num_res_blocks; ++r)
      add_res_block(p + "res." + std::to_string(r) + ".", r == 0 ? cin : w[ui], w[ui], rng);
    add_cross_attention(p + "attn.", w[ui], rng);
  }
  add_res_block("mid.", w.back(), w.back(), rng);
  for (int64_t i = levels - 1; i >= 0; --i) {
    const size_t ui = static_cast<size_t>(i);
    const std::string p = "up." + std::to_string(i) + ".";
    const int64_t below = i == levels - 1 ? w.back() : w[ui + 1];
    if (i < levels - 1) {
      params_.add(p + "upsample.weight", nn::init_conv(below, below, 3, rng));
      params_.add(p + "upsample.bias", nn::init_bias(below, below * 9, rng));
    }
    const int64_t cin = below + w[ui];
    const int64_t h = cfg_.latent_height >> i, wd = cfg_.latent_width >> i;
    if (vrd_up) up_sites.push_back({"up." + std::to_string(i), cin, h, wd});
    for (int64_t r = 0; r < cfg_.num_res_blocks; ++r)
      add_res_block(p + "res." + std::to_string(r) + ".", r == 0 ? cin : w[ui], w[ui], rng);
    add_cross_attention(p + "attn.", w[ui], rng);
  }
  params_.add("out.norm.weight", Tensor({w[0]}, 1.0));
  params_.add("out.norm.bias", Tensor({w[0]}, 0.0));
  params_.add("conv_out.weight", nn::init_conv(cfg_.latent_channels, w[0], 3, rng));
  params_.add("conv_out.bias", nn::init_bias(cfg_.latent_channels, w[0] * 9, rng));

  vrd_blocks_ = down_sites;
  vrd_blocks_.insert(vrd_blocks_.end(), up_sites.begin(), up_sites.end());
  for (const auto& b : vrd_blocks_) add_vrd(b, rng);
}

VrdOutput Denoiser::vrd_forward(const Var& view_feature) const {
  const int64_t c = cfg_.feature_dim();
  if (view_feature.value().ndim() != 2 || view_feature.dim(1) != c) {
    throw ContractError("vrd_forward: view feature must be [B, " + std::to_string(c) + "]");
  }
  const int64_t b = view_feature.dim(0);
  VrdOutput out;
  out.blocks = vrd_blocks_;
  Var lat = ag::reshape(view_feature, {b, cfg_.latent_channels, cfg_.latent_height, cfg_.latent_width});
  for (const auto& blk : vrd_blocks_) {
    const std::string p = "vrd." + blk.name + ".";
    const int64_t stride = cfg_.latent_height / blk.height;
    const Var& w = params_.get(p + "weight");
    const Var& bias = params_.get(p + "bias");
    Var m;
    switch (cfg_.vrd_mechanism) {
      case VrdMechanism::DownConv:
        m = ag::conv2d(lat, w, bias, stride, 1);
        break;
      case VrdMechanism::Pooling:
        m = ag::conv2d(stride > 1 ? ag::avg_pool2d(lat, stride) : lat, w, bias, 1, 0);
        break;
      case VrdMechanism::Projection:
        m = ag::reshape(ag::linear(view_feature, w, bias), {b, blk.channels, blk.height, blk.width});
        break;
    }
    out.maps.push_back(m);
  }
  return out;
}

const Var* Denoiser::vrd_map(const VrdOutput& v, const std::string& name) const {
  for (size_t i = 0; i < v.blocks.size(); ++i)
    if (v.blocks[i].name == name) return &v.maps[i];
  return nullptr;
}

Var Denoiser::res_block(const Var& x, const Var& temb, const std::string& p) const {
  const auto& P = params_;
  const int64_t g = cfg_.groups;
  Var h = ag::conv2d(ag::silu(ag::group_norm(x, g, P.get(p + "norm1.weight"), P.get(p + "norm1.bias"))),
                     P.get(p + "conv1.weight"), P.get(p + "conv1.bias"), 1, 1);
  h = ag::add_channel_bias(h, ag::linear(temb, P.get(p + "time.weight"), P.get(p + "time.bias")));
  h = ag::conv2d(ag::silu(ag::group_norm(h, g, P.get(p + "norm2.weight"), P.get(p + "norm2.bias"))),
                 P.get(p + "conv2.weight"), P.get(p + "conv2.bias"), 1, 1);
  Var skip = P.contains(p + "skip.weight") ? ag::conv2d(x, P.get(p + "skip.weight"), P.get(p + "skip.bias"), 1, 0) : x;
  return ag::add(skip, h);
}

Var Denoiser::cross_attention(const Var& x, const Var& context, int64_t rows, const std::string& p) const {
  const auto& P = params_;
  const int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Var tokens = ag::nchw_to_tokens(ag::group_norm(x, cfg_.groups, P.get(p + "norm.weight"), P.get(p + "norm.bias")));
  Var q = ag::matmul(tokens, P.get(p + "wq"));
  Var k = ag::matmul(context, P.get(p + "wk"));
  Var v = ag::matmul(context, P.get(p + "wv"));
  kernels::AttentionShape as{b, h * w, rows, 1, c, 1.0 / std::sqrt(static_cast<double>(c))};
  Var o = ag::linear(ag::attention(q, k, v, as), P.get(p + "out.weight"), P.get(p + "out.bias"));
  return ag::add(x, ag::tokens_to_nchw(o, b, c, h, w));
}

Var Denoiser::eps_predict(const Var& z, const std::vector<int64_t>& t, const ConditionBundle& cond) const {
  const int64_t d = cfg_.feature_dim();
  if (z.value().ndim() != 2 || z.dim(1) != d) {
    throw ContractError("eps_predict: latents must be [B, " + std::to_string(d) + "], got " + shape_str(z.shape()));
  }
  const int64_t b = z.dim(0);
  if (static_cast<int64_t>(t.size()) != b) throw ContractError("eps_predict: need one timestep per sample");
  if (cond.batch != b || cond.context.dim(0) != b * cond.rows || cond.context.dim(1) != cfg_.context_dim) {
    throw ContractError("eps_predict: condition does not match the batch");
  }
  const auto& P = params_;
  const int64_t levels = cfg_.levels();

  Var temb = ag::constant(timestep_embedding(t, cfg_.time_dim));
  temb = ag::linear(ag::silu(ag::linear(temb, P.get("time.fc1.weight"), P.get("time.fc1.bias"))),
                    P.get("time.fc2.weight"), P.get("time.fc2.bias"));
  Var temb_act = ag::silu(temb);

  VrdOutput vrd;
  if (!vrd_blocks_.empty()) vrd = vrd_forward(cond.vrd_source);

  Var h = ag::reshape(z, {b, cfg_.latent_channels, cfg_.latent_height, cfg_.latent_width});
  h = ag::conv2d(h, P.get("conv_in.weight"), P.get("conv_in.bias"), 1, 1);
  std::vector<Var> skips;
  for (int64_t i = 0; i < levels; ++i) {
    const std::string p = "down." + std::to_string(i) + ".";
    if (i > 0) h = ag::conv2d(h, P.get(p + "downsample.weight"), P.get(p + "downsample.bias"), 2, 1);
    if (const Var* m = vrd_map(vrd, "down." + std::to_string(i))) h = ag::add(h, *m);
    for (int64_t r = 0; r < cfg_.num_res_blocks; ++r) h = res_block(h, temb_act, p + "res." + std::to_string(r) + ".");
    h = cross_attention(h, cond.context, cond.rows, p + "attn.");
    skips.push_back(h);
  }
  h = res_block(h, temb_act, "mid.");
  for (int64_t i = levels - 1; i >= 0; --i) {
    const std::string p = "up." + std::to_string(i) + ".";
    if (i < levels - 1) {
      h = ag::conv2d(ag::upsample_nearest2x(h), P.get(p + "upsample.weight"), P.get(p + "upsample.bias"), 1, 1);
    }
    h = ag::concat_channels(h, skips[static_cast<size_t>(i)]);
    if (const Var* m = vrd_map(vrd, "up." + std::to_string(i))) h = ag::add(h, *m);
    for (int64_t r = 0; r < cfg_.num_res_blocks; ++r) h = res_block(h, temb_act, p + "res." + std::to_string(r) + ".");
    h = cross_attention(h, cond.context, cond.rows, p + "attn.");
  }
  h = ag::silu(ag::group_norm(h, cfg_.groups, P.get("out.norm.weight"), P.get("out.norm.bias")));
  h = ag::conv2d(h, P.get("conv_out.weight"), P.get("conv_out.bias"), 1, 1);
  return ag::reshape(h, {b, d});
}

}  // namespace sdreid::model
