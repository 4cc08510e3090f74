#include "sdreid/encoder.hpp"

#include <cmath>

#include "sdreid/errors.hpp"

namespace sdreid::model {

using ag::Var;

void EncoderConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("encoder: " + m); };
  if (patch_size <= 0 || image_height <= 0 || image_width <= 0) fail("sizes must be positive");
  if (image_height % patch_size != 0 || image_width % patch_size != 0) fail("image size must be a multiple of patch size");
  if (embed_dim <= 0 || num_heads <= 0 || embed_dim % num_heads != 0) fail("embed_dim must be divisible by num_heads");
  if (num_layers < 1) fail("num_layers must be >= 1");
  if (mlp_ratio < 1) fail("mlp_ratio must be >= 1");
  if (num_train_identities < 1) fail("num_train_identities must be >= 1");
  if (k_id() < 0 || k_id() > num_layers) fail("num_id_conditions must lie in [0, num_layers]");
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = nlohmann::json{{"image_height", c.image_height}, {"image_width", c.image_width},
                     {"patch_size", c.patch_size},     {"embed_dim", c.embed_dim},
                     {"num_layers", c.num_layers},     {"num_heads", c.num_heads},
                     {"mlp_ratio", c.mlp_ratio},       {"num_train_identities", c.num_train_identities},
                     {"num_id_conditions", c.num_id_conditions}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  EncoderConfig d;
  c.image_height = j.value("image_height", d.image_height);
  c.image_width = j.value("image_width", d.image_width);
  c.patch_size = j.value("patch_size", d.patch_size);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.num_layers = j.value("num_layers", d.num_layers);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
  c.num_train_identities = j.value("num_train_identities", d.num_train_identities);
  c.num_id_conditions = j.value("num_id_conditions", d.num_id_conditions);
}

VitEncoder::VitEncoder(const EncoderConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  Rng rng(seed, "encoder");
  const int64_t c = cfg_.embed_dim, n = cfg_.num_patches(), pd = cfg_.patch_dim(), hidden = c * cfg_.mlp_ratio;
  auto tok = [&](int64_t rows) {
    Tensor t({rows, c});
    fill_trunc_normal(t, rng, 0.02);
    return t;
  };
  params_.add_buffer("input.mean", Tensor({3}, 0.0));
  params_.add_buffer("input.std", Tensor({3}, 1.0));
  params_.add("patch_embed.weight", nn::init_linear(pd, c, rng));
  params_.add("patch_embed.bias", nn::init_bias(c, pd, rng));
  params_.add("cls_token", tok(1));
  params_.add("pos_embed", tok(1 + n));
  params_.add("view_token", tok(1));
  for (int64_t l = 0; l < cfg_.num_layers; ++l) {
    const std::string p = "blocks." + std::to_string(l) + ".";
    params_.add(p + "norm1.weight", Tensor({c}, 1.0));
    params_.add(p + "norm1.bias", Tensor({c}, 0.0));
    params_.add(p + "attn.qkv.weight", nn::init_linear(c, 3 * c, rng));
    params_.add(p + "attn.qkv.bias", nn::init_bias(3 * c, c, rng));
    params_.add(p + "attn.proj.weight", nn::init_linear(c, c, rng));
    params_.add(p + "attn.proj.bias", nn::init_bias(c, c, rng));
    params_.add(p + "norm2.weight", Tensor({c}, 1.0));
    params_.add(p + "norm2.bias", Tensor({c}, 0.0));
    params_.add(p + "mlp.fc1.weight", nn::init_linear(c, hidden, rng));
    params_.add(p + "mlp.fc1.bias", nn::init_bias(hidden, c, rng));
    params_.add(p + "mlp.fc2.weight", nn::init_linear(hidden, c, rng));
    params_.add(p + "mlp.fc2.bias", nn::init_bias(c, hidden, rng));
  }
  params_.add("norm.weight", Tensor({c}, 1.0));
  params_.add("norm.bias", Tensor({c}, 0.0));
  params_.add("head.bn.weight", Tensor({c}, 1.0));
  params_.add("head.bn.bias", Tensor({c}, 0.0));
  params_.add_buffer("head.bn.running_mean", Tensor({c}, 0.0));
  params_.add_buffer("head.bn.running_var", Tensor({c}, 1.0));
  params_.add("head.id.weight", nn::init_linear(c, cfg_.num_train_identities, rng));
  params_.add("head.view.weight", nn::init_linear(c, 2, rng));
  params_.add("head.view.bias", nn::init_bias(2, c, rng));
}

void VitEncoder::set_num_id_conditions(int64_t k) {
  EncoderConfig c = cfg_;
  c.num_id_conditions = k;
  c.validate();
  cfg_ = c;
}

void VitEncoder::set_input_stats(const std::array<double, 3>& mean, const std::array<double, 3>& stddev) {
  for (int k = 0; k < 3; ++k) {
    if (!(stddev[k] > 0)) throw ConfigError("input std must be positive");
    params_.buffer("input.mean")[k] = mean[k];
    params_.buffer("input.std")[k] = stddev[k];
  }
}

Tensor VitEncoder::patchify(const Tensor& images) const {
  if (images.ndim() != 4 || images.dim(1) != cfg_.image_height || images.dim(2) != cfg_.image_width ||
      images.dim(3) != 3) {
    throw ContractError("encoder expects images [B, " + std::to_string(cfg_.image_height) + ", " +
                        std::to_string(cfg_.image_width) + ", 3], got " + shape_str(images.shape()));
  }
  const int64_t b = images.dim(0), h = cfg_.image_height, w = cfg_.image_width, p = cfg_.patch_size;
  const int64_t gw = w / p, n = cfg_.num_patches(), pd = cfg_.patch_dim();
  const auto& mean = params_.buffer("input.mean");
  const auto& sd = params_.buffer("input.std");
  Tensor out({b * n, pd});
  for (int64_t s = 0; s < b; ++s)
    for (int64_t pi = 0; pi < n; ++pi) {
      const int64_t py = pi / gw, px = pi % gw;
      double* dst = out.data() + (s * n + pi) * pd;
      for (int64_t y = 0; y < p; ++y)
        for (int64_t x = 0; x < p; ++x)
          for (int64_t ch = 0; ch < 3; ++ch) {
            const double v = images[((s * h + py * p + y) * w + px * p + x) * 3 + ch];
            dst[(y * p + x) * 3 + ch] = (v - mean[ch]) / sd[ch];
          }
    }
  return out;
}

Var VitEncoder::project_patches(const Tensor& images) const {
  return ag::linear(ag::constant(patchify(images)), params_.get("patch_embed.weight"), params_.get("patch_embed.bias"));
}

Var VitEncoder::patch_embed(const Tensor& images) const {
  const int64_t b = images.dim(0), n = cfg_.num_patches();
  Var patches = project_patches(images);
  Var seq = ag::concat_sequences(ag::broadcast_batch(params_.get("cls_token"), b), 1, patches, n, b);
  return ag::add_broadcast_batch(seq, params_.get("pos_embed"), b);
}

Var VitEncoder::transformer_layer(const Var& seq, int64_t layer, int64_t batch, int64_t len) const {
  const std::string p = "blocks." + std::to_string(layer) + ".";
  const int64_t c = cfg_.embed_dim;
  if (seq.value().ndim() != 2 || seq.dim(1) != c || seq.dim(0) != batch * len) {
    throw ContractError("transformer_layer: bad sequence shape " + shape_str(seq.shape()));
  }
  const auto& P = params_;
  Var h = ag::layer_norm(seq, P.get(p + "norm1.weight"), P.get(p + "norm1.bias"));
  Var qkv = ag::linear(h, P.get(p + "attn.qkv.weight"), P.get(p + "attn.qkv.bias"));
  const int64_t dh = c / cfg_.num_heads;
  kernels::AttentionShape as{batch, len, len, cfg_.num_heads, dh, 1.0 / std::sqrt(static_cast<double>(dh))};
  Var a = ag::attention(ag::slice_cols(qkv, 0, c), ag::slice_cols(qkv, c, 2 * c), ag::slice_cols(qkv, 2 * c, 3 * c), as);
  Var x = ag::add(seq, ag::linear(a, P.get(p + "attn.proj.weight"), P.get(p + "attn.proj.bias")));
  Var h2 = ag::layer_norm(x, P.get(p + "norm2.weight"), P.get(p + "norm2.bias"));
  Var m = ag::linear(ag::gelu(ag::linear(h2, P.get(p + "mlp.fc1.weight"), P.get(p + "mlp.fc1.bias"))),
                     P.get(p + "mlp.fc2.weight"), P.get(p + "mlp.fc2.bias"));
  return ag::add(x, m);
}

EncoderOutput VitEncoder::forward(const Tensor& images, bool with_view_token) const {
  EncoderOutput out;
  const int64_t b = images.dim(0), layers = cfg_.num_layers;
  out.batch = b;
  int64_t len = 1 + cfg_.num_patches();
  Var seq = patch_embed(images);
  out.class_tokens.push_back(ag::select_position(seq, b, len, 0));
  for (int64_t l = 0; l + 1 < layers; ++l) {
    seq = transformer_layer(seq, l, b, len);
    out.class_tokens.push_back(ag::select_position(seq, b, len, 0));
  }
  if (with_view_token) {
    seq = ag::concat_sequences(seq, len, ag::broadcast_batch(params_.get("view_token"), b), 1, b);
    ++len;
  }
  seq = transformer_layer(seq, layers - 1, b, len);
  out.class_tokens.push_back(ag::select_position(seq, b, len, 0));
  seq = ag::layer_norm(seq, params_.get("norm.weight"), params_.get("norm.bias"));
  out.final_class = ag::select_position(seq, b, len, 0);
  if (with_view_token) out.view_feature = ag::select_position(seq, b, len, len - 1);
  const int64_t k = cfg_.k_id();
  if (k > 0) {
    // Candidates are the class tokens entering layers 1..L, i.e. I^0..I^{L-1}.
    std::vector<Var> parts(out.class_tokens.begin() + (layers - k), out.class_tokens.begin() + layers);
    out.intermediate = ag::stack_per_sample(parts);
  }
  return out;
}

HeadOutput VitEncoder::heads(const EncoderOutput& out, bool training, bool stop_view_gradient) {
  HeadOutput h;
  auto& P = params_;
  Var bn;
  if (training) {
    std::vector<double> mu, var;
    bn = ag::batch_norm_train(out.final_class, P.get("head.bn.weight"), P.get("head.bn.bias"), 1e-5, &mu, &var);
    auto& rm = P.buffer("head.bn.running_mean");
    auto& rv = P.buffer("head.bn.running_var");
    const double n = static_cast<double>(out.batch);
    for (size_t j = 0; j < mu.size(); ++j) {
      rm[j] = (1 - bn_momentum_) * rm[j] + bn_momentum_ * mu[j];
      rv[j] = (1 - bn_momentum_) * rv[j] + bn_momentum_ * var[j] * n / (n - 1);
    }
  } else {
    bn = ag::batch_norm_eval(out.final_class, P.get("head.bn.weight"), P.get("head.bn.bias"),
                             P.buffer("head.bn.running_mean").storage(), P.buffer("head.bn.running_var").storage(), 1e-5);
  }
  h.id_logits = ag::matmul(bn, P.get("head.id.weight"));
  if (out.view_feature.defined()) {
    Var vf = stop_view_gradient ? ag::detach(out.view_feature) : out.view_feature;
    h.view_logits = ag::linear(vf, P.get("head.view.weight"), P.get("head.view.bias"));
  }
  return h;
}

std::vector<PersonRepresentation> VitEncoder::encode(const std::vector<data::ImageSample>& samples,
                                                     const std::vector<size_t>& indices, int64_t chunk) const {
  ag::NoGradGuard guard;
  std::vector<PersonRepresentation> reps;
  reps.reserve(indices.size());
  const int64_t c = cfg_.embed_dim, k = cfg_.k_id();
  for (size_t start = 0; start < indices.size(); start += static_cast<size_t>(chunk)) {
    const size_t end = std::min(indices.size(), start + static_cast<size_t>(chunk));
    std::vector<size_t> part(indices.begin() + static_cast<std::ptrdiff_t>(start),
                             indices.begin() + static_cast<std::ptrdiff_t>(end));
    const EncoderOutput out = forward(data::stack_pixels(samples, part));
    for (size_t i = 0; i < part.size(); ++i) {
      const auto& s = samples[part[i]];
      PersonRepresentation r;
      r.final_class = out.final_class.value().row(static_cast<int64_t>(i));
      r.view_feature = out.view_feature.value().row(static_cast<int64_t>(i));
      r.intermediate_classes = k > 0 ? out.intermediate.value().rows(static_cast<int64_t>(i) * k,
                                                                     static_cast<int64_t>(i + 1) * k)
                                     : Tensor({0, c});
      r.view = s.view;
      r.identity = s.identity;
      reps.push_back(std::move(r));
    }
  }
  return reps;
}

std::pair<std::array<double, 3>, std::array<double, 3>> channel_stats(const std::vector<data::ImageSample>& samples,
                                                                      const std::vector<size_t>& indices) {
  std::array<double, 3> sum{0, 0, 0}, sq{0, 0, 0};
  double count = 0;
  for (size_t idx : indices) {
    const auto& px = samples.at(idx).pixels;
    for (size_t i = 0; i < px.size(); i += 3)
      for (int k = 0; k < 3; ++k) {
        sum[k] += px[i + k];
        sq[k] += px[i + k] * px[i + k];
      }
    count += static_cast<double>(px.size() / 3);
  }
  std::array<double, 3> mean{0, 0, 0}, sd{1, 1, 1};
  if (count == 0) return {mean, sd};
  for (int k = 0; k < 3; ++k) {
    mean[k] = sum[k] / count;
    sd[k] = std::sqrt(std::max(sq[k] / count - mean[k] * mean[k], 1e-12));
  }
  return {mean, sd};
}

}  // namespace sdreid::model
