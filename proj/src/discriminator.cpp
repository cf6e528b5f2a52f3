#include "avatar/discriminator.hpp"

#include <cmath>

#include "avatar/errors.hpp"

namespace av {

using ad::DType;
using ad::Tensor;
using nlohmann::json;

void DiscConfig::validate() const {
  if (channels.empty()) throw std::invalid_argument("discriminator: channels must not be empty");
  for (int c : channels)
    if (c < 1) throw std::invalid_argument("discriminator: channel widths must be positive");
  if (feature_dim < 1) throw std::invalid_argument("discriminator: feature_dim must be positive");
  if (label_dim != BinningConfig{}.dim())
    throw std::invalid_argument("discriminator: label_dim must equal the pose label size " +
                                std::to_string(BinningConfig{}.dim()));
  if (!(r1_gamma >= 0)) throw std::invalid_argument("discriminator: r1_gamma must be >= 0");
  if (resolution < 1 || resolution % (1 << (channels.size() - 1)) != 0)
    throw std::invalid_argument("discriminator: resolution must be divisible by 2^(stages - 1)");
}

int DiscConfig::final_res() const { return resolution >> (channels.size() - 1); }

json disc_config_to_json(const DiscConfig& c) {
  return {{"resolution", c.resolution},
          {"channels", c.channels},
          {"feature_dim", c.feature_dim},
          {"label_dim", c.label_dim},
          {"r1_gamma", c.r1_gamma}};
}

DiscConfig disc_config_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("discriminator config: expected an object");
  DiscConfig c;
  auto get = [&](const std::string& k, auto& dst) {
    try {
      dst = j.at(k).get<std::decay_t<decltype(dst)>>();
    } catch (const json::exception&) {
      throw SchemaError("discriminator config: field '" + k + "' has the wrong type");
    }
  };
  for (const auto& [k, v] : j.items()) {
    if (k == "resolution") get(k, c.resolution);
    else if (k == "channels") get(k, c.channels);
    else if (k == "feature_dim") get(k, c.feature_dim);
    else if (k == "label_dim") get(k, c.label_dim);
    else if (k == "r1_gamma") get(k, c.r1_gamma);
    else throw SchemaError("discriminator config: unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

namespace {

Tensor he_normal(Rng& rng, ad::Shape shape, std::size_t fan_in, double gain, DType dtype) {
  std::vector<double> v(ad::numel_of(shape));
  const double sd = gain / std::sqrt(static_cast<double>(fan_in));
  for (auto& x : v) x = sd * rng.normal();
  return Tensor::from(std::move(shape), v, dtype);
}

std::string conv_name(std::size_t i, const char* what) { return "conv." + std::to_string(i) + "." + what; }

}  // namespace

ParamSet init_discriminator(const DiscConfig& cfg, std::uint64_t seed, DType dtype) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x646973ULL}));
  const double gain = std::sqrt(2.0 / (1.0 + 0.2 * 0.2));
  ParamSet p;
  std::size_t in = 3;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const auto out = static_cast<std::size_t>(cfg.channels[i]);
    p.add(conv_name(i, "w"), he_normal(rng, {out, in, 3, 3}, in * 9, gain, dtype));
    p.add(conv_name(i, "b"), Tensor::zeros({out}, dtype));
    in = out;
  }
  const auto r = static_cast<std::size_t>(cfg.final_res());
  const auto F = static_cast<std::size_t>(cfg.feature_dim);
  p.add("fc.w", he_normal(rng, {F, in * r * r}, in * r * r, gain, dtype));
  p.add("fc.b", Tensor::zeros({F}, dtype));
  p.add("phi.w", he_normal(rng, {1, F}, F, 1.0, dtype));
  p.add("phi.b", Tensor::zeros({1}, dtype));
  p.add("psi.w", he_normal(rng, {F, static_cast<std::size_t>(cfg.label_dim)}, F, 1.0, dtype));
  return p;
}

Tensor disc_features(const DiscConfig& cfg, const ParamSet& p, const Tensor& images) {
  const auto R = static_cast<std::size_t>(cfg.resolution);
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != R || images.dim(3) != R)
    throw ad::ShapeError("discriminator: expected images (B,3," + std::to_string(R) + "," + std::to_string(R) +
                         "), got " + ad::to_string(images.shape()));
  Tensor h = images;
  for (std::size_t i = 0; i < cfg.channels.size(); ++i) {
    const ad::Conv2dGeometry g{i == 0 ? 1u : 2u, 1};
    h = ad::leaky_relu(ad::conv2d(h, p[conv_name(i, "w")], p[conv_name(i, "b")], g), 0.2);
  }
  const std::size_t B = images.dim(0);
  h = ad::reshape(h, {B, h.numel() / B});
  return ad::leaky_relu(ad::affine(h, p["fc.w"], p["fc.b"]), 0.2);
}

Tensor discriminate(const DiscConfig& cfg, const ParamSet& p, const Tensor& images, const Tensor& labels) {
  const auto L = static_cast<std::size_t>(cfg.label_dim);
  if (labels.rank() != 2 || labels.dim(1) != L || images.rank() < 1 || labels.dim(0) != images.dim(0))
    throw ad::ShapeError("discriminator: expected labels (B," + std::to_string(L) + "), got " +
                         ad::to_string(labels.shape()));
  const Tensor h = disc_features(cfg, p, images);
  const std::size_t B = h.dim(0);
  const Tensor phi = ad::reshape(ad::affine(h, p["phi.w"], p["phi.b"]), {B});
  const Tensor proj = ad::sum(ad::mul(h, ad::affine(labels, p["psi.w"])), 1);
  return ad::add(phi, proj);
}

Tensor label_batch(const std::vector<PoseLabel>& labels, const BinningConfig& bins, DType dtype) {
  const auto L = static_cast<std::size_t>(bins.dim());
  std::vector<double> v;
  v.reserve(labels.size() * L);
  for (const auto& l : labels) {
    const auto row = label_vector(l, bins);
    v.insert(v.end(), row.begin(), row.end());
  }
  return Tensor::from({labels.size(), L}, v, dtype);
}

DLoss d_loss(const DiscConfig& cfg, const ParamSet& p, ad::Tape& tape, const Tensor& real_images,
             const Tensor& real_labels, const Tensor& fake_images, const Tensor& fake_labels, double gamma) {
  if (real_images.rank() < 1 || real_images.dim(0) == 0 || fake_images.rank() < 1 || fake_images.dim(0) == 0)
    throw std::invalid_argument("d_loss: batches must be non-empty");
  if (!(gamma >= 0)) throw std::invalid_argument("d_loss: gamma must be >= 0");
  const Tensor real = tape.watch(real_images.detach());
  const Tensor real_logits = discriminate(cfg, p, real, real_labels);
  const Tensor fake_logits = discriminate(cfg, p, fake_images, fake_labels);
  Tensor gan = ad::add(ad::mean(ad::softplus(fake_logits)), ad::mean(ad::softplus(ad::neg(real_logits))));
  DLoss out;
  out.gan = gan.item();
  out.real_logit = ad::mean(real_logits.detach()).item();
  out.fake_logit = ad::mean(fake_logits.detach()).item();
  out.total = gan;
  if (gamma > 0) {
    const Tensor gx = tape.gradients(ad::sum(real_logits), {real}, /*build_graph=*/true)[0];
    const Tensor r1 = ad::scale(ad::sum(ad::square(gx)), 0.5 * gamma / static_cast<double>(real_images.dim(0)));
    out.r1 = r1.item();
    out.total = ad::add(gan, r1);
  }
  return out;
}

Tensor g_loss(const Tensor& fake_logits) {
  if (fake_logits.numel() == 0) throw std::invalid_argument("g_loss: empty batch");
  return ad::mean(ad::softplus(ad::neg(fake_logits)));
}

}  // namespace av
