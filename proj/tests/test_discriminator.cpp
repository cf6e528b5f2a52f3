#include <chrono>
#include <cmath>
#include <optional>

#include <gtest/gtest.h>

#include "avatar/discriminator.hpp"
#include "avatar/errors.hpp"

using namespace av;
using ad::DType;
using ad::Tensor;

namespace {

Tensor randn(ad::Shape s, std::uint64_t seed, double scale = 1.0, DType dt = DType::F64) {
  Rng rng(seed);
  std::vector<double> v(ad::numel_of(s));
  for (auto& x : v) x = scale * rng.normal();
  return Tensor::from(s, v, dt);
}

DiscConfig small_config() {
  DiscConfig c;
  c.resolution = 8;
  c.channels = {3, 4};
  c.feature_dim = 5;
  return c;
}

Tensor random_labels(std::size_t B, std::uint64_t seed, DType dt = DType::F64) {
  Rng rng(seed);
  const BinningConfig bins;
  std::vector<PoseLabel> ls;
  for (std::size_t b = 0; b < B; ++b) {
    const auto pose = sample_pose(rng);
    ls.push_back(encode(pose, bins, rng.bernoulli(0.5) ? LabelPart::Fine : LabelPart::Coarse));
  }
  return label_batch(ls, bins, dt);
}

ParamSet with(const ParamSet& p, const std::function<void(const std::string&, Tensor&)>& edit) {
  NamedTensors items = p.items();
  for (auto& [k, v] : items) edit(k, v);
  return ParamSet(items);
}

}  // namespace

TEST(Discriminator, ZeroNetworkGivesPhiBias) {
  const auto cfg = small_config();
  const ParamSet p = with(init_discriminator(cfg, 1, DType::F64), [](const std::string& k, Tensor& v) {
    v = k == "phi.b" ? Tensor::full({1}, 0.37, DType::F64) : Tensor::zeros(v.shape(), DType::F64);
  });
  const auto logits = discriminate(cfg, p, Tensor::zeros({3, 3, 8, 8}, DType::F64), random_labels(3, 2)).values();
  for (double l : logits) EXPECT_EQ(l, 0.37);
}

TEST(Discriminator, ZeroLabelLeavesImagePathwayOnly) {
  const auto cfg = small_config();
  const ParamSet p = init_discriminator(cfg, 2, DType::F64);
  const Tensor x = randn({4, 3, 8, 8}, 3);
  const Tensor zero = Tensor::zeros({4, 60}, DType::F64);
  const auto h = disc_features(cfg, p, x);
  const auto phi = ad::affine(h, p["phi.w"], p["phi.b"]).values();
  const auto logits = discriminate(cfg, p, x, zero).values();
  for (std::size_t b = 0; b < 4; ++b) EXPECT_EQ(logits[b], phi[b]);

  // With psi zeroed, any label gives the image-only logit.
  const ParamSet q = with(p, [](const std::string& k, Tensor& v) {
    if (k == "psi.w") v = Tensor::zeros(v.shape(), DType::F64);
  });
  EXPECT_EQ(discriminate(cfg, q, x, random_labels(4, 4)).values(), discriminate(cfg, q, x, zero).values());

  // The projection is linear in the label: fine-only plus coarse-only equals the sum.
  const Tensor a = random_labels(4, 5), b = random_labels(4, 6);
  const auto la = discriminate(cfg, p, x, a).values(), lb = discriminate(cfg, p, x, b).values();
  const auto lab = discriminate(cfg, p, x, ad::add(a, b)).values();
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(lab[i] - logits[i], (la[i] - logits[i]) + (lb[i] - logits[i]), 1e-12);
}

TEST(Discriminator, LabelDimensionMismatchThrows) {
  const auto cfg = small_config();
  const ParamSet p = init_discriminator(cfg, 2, DType::F64);
  EXPECT_THROW(discriminate(cfg, p, randn({2, 3, 8, 8}, 1), Tensor::zeros({2, 55}, DType::F64)), ad::ShapeError);
  EXPECT_THROW(discriminate(cfg, p, randn({2, 3, 8, 8}, 1), Tensor::zeros({3, 60}, DType::F64)), ad::ShapeError);
  EXPECT_THROW(discriminate(cfg, p, randn({2, 3, 16, 16}, 1), Tensor::zeros({2, 60}, DType::F64)), ad::ShapeError);
}

TEST(Discriminator, GradientMatchesFiniteDifferences) {
  const auto cfg = small_config();
  const ParamSet p = init_discriminator(cfg, 3, DType::F64);
  const Tensor lab = random_labels(2, 7);
  const auto names = std::vector<std::string>{"conv.0.w", "conv.1.b", "fc.w", "phi.w", "psi.w"};
  std::vector<Tensor> point{randn({2, 3, 8, 8}, 8)};
  for (const auto& n : names) point.push_back(p[n]);
  const Tensor r = randn({2}, 9);
  const double err = ad::grad_check(
      [&](const std::vector<Tensor>& x) {
        const ParamSet q = with(p, [&](const std::string& k, Tensor& v) {
          for (std::size_t i = 0; i < names.size(); ++i)
            if (k == names[i]) v = x[i + 1];
        });
        return ad::sum(ad::mul(discriminate(cfg, q, x[0], lab), r));
      },
      point);
  EXPECT_LT(err, 1e-6);
}

TEST(DLoss, ConstantDiscriminator) {
  const auto cfg = small_config();
  const ParamSet zero = with(init_discriminator(cfg, 1, DType::F64),
                             [](const std::string&, Tensor& v) { v = Tensor::zeros(v.shape(), DType::F64); });
  ad::Tape tape;
  const DLoss l = d_loss(cfg, zero, tape, randn({3, 3, 8, 8}, 1), random_labels(3, 1), randn({2, 3, 8, 8}, 2),
                         random_labels(2, 2), 10.0);
  EXPECT_NEAR(l.gan, 2 * std::log(2.0), 1e-15);
  EXPECT_EQ(l.r1, 0.0);
  EXPECT_NEAR(l.total.item(), 2 * std::log(2.0), 1e-15);
}

TEST(DLoss, R1MatchesFiniteDifferenceGradientNorm) {
  const auto cfg = small_config();
  const ParamSet p = init_discriminator(cfg, 4, DType::F64);
  const Tensor real = randn({2, 3, 8, 8}, 10), rl = random_labels(2, 11);
  const Tensor fake = randn({2, 3, 8, 8}, 12), fl = random_labels(2, 13);
  const double gamma = 3.0;
  ad::Tape tape;
  const DLoss l = d_loss(cfg, p, tape, real, rl, fake, fl, gamma);

  // Independent: central differences of each logit with respect to its image.
  auto v = real.values();
  double norm2 = 0;
  const double h = 1e-6;
  for (std::size_t i = 0; i < v.size(); ++i) {
    const double keep = v[i];
    v[i] = keep + h;
    const auto up = discriminate(cfg, p, Tensor::from(real.shape(), v, DType::F64), rl).values();
    v[i] = keep - h;
    const auto dn = discriminate(cfg, p, Tensor::from(real.shape(), v, DType::F64), rl).values();
    v[i] = keep;
    const std::size_t b = i / (3 * 64);
    const double g = (up[b] - dn[b]) / (2 * h);
    norm2 += g * g;
  }
  const double expect = 0.5 * gamma * norm2 / 2.0;
  EXPECT_NEAR(l.r1, expect, 1e-6 * expect);
  EXPECT_GT(l.r1, 0.0);

  ad::Tape t0;
  const DLoss l0 = d_loss(cfg, p, t0, real, rl, fake, fl, 0.0);
  EXPECT_EQ(l0.r1, 0.0);
  EXPECT_EQ(l0.total.item(), l.gan);
}

TEST(DLoss, LinearCriticPenaltyIsHalfGammaNormSquared) {
  // Large positive biases keep every leaky unit on its identity branch, so
  // D is affine in x and its input gradient is the product of the weights.
  DiscConfig cfg;
  cfg.resolution = 4;
  cfg.channels = {2};
  cfg.feature_dim = 3;
  const ParamSet p = with(init_discriminator(cfg, 5, DType::F64), [](const std::string& k, Tensor& v) {
    if (k == "conv.0.b" || k == "fc.b") v = Tensor::full(v.shape(), 1e3, DType::F64);
    if (k == "fc.w") v = ad::add_scalar(ad::scale(v, 0.1), 0.5);
  });
  const Tensor lab = Tensor::zeros({1, 60}, DType::F64);
  // a = gradient of the affine map, found by probing unit images.
  const Tensor x0 = Tensor::zeros({1, 3, 4, 4}, DType::F64);
  const double base = discriminate(cfg, p, x0, lab).item();
  double norm2 = 0;
  for (std::size_t i = 0; i < 48; ++i) {
    std::vector<double> e(48, 0.0);
    e[i] = 1.0;
    const double a = discriminate(cfg, p, Tensor::from({1, 3, 4, 4}, e, DType::F64), lab).item() - base;
    norm2 += a * a;
  }
  ad::Tape tape;
  const DLoss l = d_loss(cfg, p, tape, randn({1, 3, 4, 4}, 6, 0.1), lab, randn({1, 3, 4, 4}, 7, 0.1), lab, 2.0);
  EXPECT_NEAR(l.r1, norm2, 1e-8 * norm2);
}

TEST(DLoss, DoubleBackwardMatchesFiniteDifferences) {
  const auto cfg = small_config();
  const ParamSet p = init_discriminator(cfg, 6, DType::F64);
  const Tensor real = randn({2, 3, 8, 8}, 14), rl = random_labels(2, 15);
  const Tensor fake = randn({2, 3, 8, 8}, 16), fl = random_labels(2, 17);
  const auto names = std::vector<std::string>{"conv.0.w", "conv.1.w", "fc.w", "psi.w"};
  std::vector<Tensor> point;
  for (const auto& n : names) point.push_back(p[n]);
  const double err = ad::grad_check(
      [&](const std::vector<Tensor>& x) {
        const ParamSet q = with(p, [&](const std::string& k, Tensor& v) {
          for (std::size_t i = 0; i < names.size(); ++i)
            if (k == names[i]) v = x[i];
        });
        std::optional<ad::Tape> local;
        ad::Tape* tape = x[0].tape();
        if (!tape) tape = &local.emplace();
        return d_loss(cfg, q, *tape, real, rl, fake, fl, 5.0).total;
      },
      point);
  EXPECT_LT(err, 1e-4);
}

TEST(DLoss, BatchPermutationInvariant) {
  const auto cfg = small_config();
  const ParamSet p = init_discriminator(cfg, 7, DType::F64);
  const Tensor real = randn({3, 3, 8, 8}, 18), rl = random_labels(3, 19);
  const Tensor fake = randn({3, 3, 8, 8}, 20), fl = random_labels(3, 21);
  auto permute = [](const Tensor& t) {
    const std::size_t row = t.numel() / 3;
    auto v = t.values();
    std::vector<double> out;
    for (std::size_t b : {2, 0, 1}) out.insert(out.end(), v.begin() + b * row, v.begin() + (b + 1) * row);
    return Tensor::from(t.shape(), out, DType::F64);
  };
  ad::Tape t1, t2;
  const DLoss a = d_loss(cfg, p, t1, real, rl, fake, fl, 1.0);
  const DLoss b = d_loss(cfg, p, t2, permute(real), permute(rl), permute(fake), permute(fl), 1.0);
  EXPECT_NEAR(a.total.item(), b.total.item(), 1e-6);
  EXPECT_NEAR(a.r1, b.r1, 1e-6);
  EXPECT_GE(a.r1, 0.0);
}

TEST(GLoss, SoftplusTail) {
  EXPECT_NEAR(g_loss(Tensor::zeros({4}, DType::F64)).item(), std::log(2.0), 1e-15);
  EXPECT_LT(g_loss(Tensor::full({2}, 40.0, DType::F64)).item(), 1e-15);
  double prev = INFINITY;
  for (double l = -10; l <= 10; l += 0.5) {
    const double v = g_loss(Tensor::full({1}, l, DType::F64)).item();
    EXPECT_LT(v, prev);
    prev = v;
  }
  EXPECT_THROW(g_loss(Tensor::zeros({0}, DType::F64)), std::invalid_argument);
}

TEST(DiscConfig, JsonAndValidation) {
  DiscConfig c;
  c.r1_gamma = 0.5;
  EXPECT_EQ(disc_config_to_json(disc_config_from_json(disc_config_to_json(c))), disc_config_to_json(c));
  EXPECT_THROW(disc_config_from_json({{"gamma", 1}}), SchemaError);
  EXPECT_THROW(disc_config_from_json({{"label_dim", 55}}), std::invalid_argument);
  EXPECT_THROW(disc_config_from_json({{"r1_gamma", -1}}), std::invalid_argument);
  EXPECT_THROW(disc_config_from_json({{"resolution", 30}}), std::invalid_argument);
}

TEST(DLoss, TrainingStepCost) {
  const DiscConfig cfg;
  const ParamSet p0 = init_discriminator(cfg, 1);
  const Tensor real = randn({16, 3, 32, 32}, 1, 1.0, DType::F32), fake = randn({16, 3, 32, 32}, 2, 1.0, DType::F32);
  const Tensor rl = random_labels(16, 3, DType::F32), fl = random_labels(16, 4, DType::F32);
  const auto t0 = std::chrono::steady_clock::now();
  ad::Tape tape;
  const ParamSet p = p0.watched(tape);
  const DLoss l = d_loss(cfg, p, tape, real, rl, fake, fl, cfg.r1_gamma);
  const auto grads = tape.gradients(l.total, p.tensors());
  const auto t1 = std::chrono::steady_clock::now();
  std::printf("discriminator batch 16 step with R1: %.3f s\n", std::chrono::duration<double>(t1 - t0).count());
  EXPECT_EQ(grads.size(), p.tensors().size());
}
