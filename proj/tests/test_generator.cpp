#include <chrono>
#include <cmath>

#include <gtest/gtest.h>

#include "avatar/errors.hpp"
#include "avatar/generator.hpp"
#include "avatar/oracle.hpp"
#include "avatar/render.hpp"

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

Tensor uniform(ad::Shape s, std::uint64_t seed, double lo, double hi) {
  Rng rng(seed);
  std::vector<double> v(ad::numel_of(s));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(s, v, DType::F64);
}

double contract_check(const std::function<Tensor(const std::vector<Tensor>&)>& f, const std::vector<Tensor>& point) {
  const Tensor probe = f(point);
  const Tensor r = randn(probe.shape(), 999);
  return ad::grad_check([&](const std::vector<Tensor>& xs) { return ad::sum(ad::mul(f(xs), r)); }, point);
}

GeneratorConfig small_config() {
  GeneratorConfig c;
  c.d_z = 3;
  c.d_w = 4;
  c.mapping_layers = 2;
  c.mapping_hidden = 5;
  c.plane_channels = 2;
  c.plane_res = 5;
  c.decoder_hidden = 3;
  c.resolution = 3;
  c.samples_per_ray = 5;
  return c;
}

// Hand bilinear lookup of one channel, corner-aligned with border clamping.
double bilinear(const std::vector<double>& plane, std::size_t R, double u, double v) {
  auto coord = [R](double a) { return std::clamp((a + 1) * 0.5 * (R - 1), 0.0, double(R - 1)); };
  const double x = coord(u), y = coord(v);
  const auto x0 = static_cast<std::size_t>(std::floor(x)), y0 = static_cast<std::size_t>(std::floor(y));
  const auto x1 = std::min(x0 + 1, R - 1), y1 = std::min(y0 + 1, R - 1);
  const double fx = x - x0, fy = y - y0;
  auto at = [&](std::size_t yy, std::size_t xx) { return plane[yy * R + xx]; };
  return (1 - fy) * ((1 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1 - fx) * at(y1, x0) + fx * at(y1, x1));
}

}  // namespace

TEST(Mapping, DeterministicAndBiasOnlyWhenFinalLayerZero) {
  const auto cfg = small_config();
  ParamSet p = init_generator(cfg, 3, DType::F64);
  const Tensor z = randn({2, 3}, 1), gpc = gpc_labels(std::vector{SphericalPose::make(10, 0), SphericalPose::make(-100, 5)}, DType::F64);
  EXPECT_EQ(map_style(cfg, p, z, gpc).values(), map_style(cfg, p, z, gpc).values());
  EXPECT_EQ(init_generator(cfg, 3, DType::F64).tensors()[0].values(), p.tensors()[0].values());

  NamedTensors items = p.items();
  for (auto& [k, v] : items) {
    if (k == "map.1.w") v = Tensor::zeros(v.shape(), DType::F64);
    if (k == "map.1.b") v = Tensor::from({4}, std::vector<double>{0.1, -0.2, 0.3, 0.4}, DType::F64);
  }
  const ParamSet zeroed(items);
  const auto w = map_style(cfg, zeroed, randn({2, 3}, 7), gpc).values();
  EXPECT_EQ(w, (std::vector<double>{0.1, -0.2, 0.3, 0.4, 0.1, -0.2, 0.3, 0.4}));
  EXPECT_THROW(map_style(cfg, p, randn({2, 4}, 1), gpc), ad::ShapeError);
}

TEST(Mapping, JacobianMatchesFiniteDifferences) {
  const auto cfg = small_config();
  const ParamSet p = init_generator(cfg, 4, DType::F64);
  const Tensor gpc = gpc_labels(std::vector{SphericalPose::make(33, 7), SphericalPose::make(150, -20)}, DType::F64);
  EXPECT_LT(contract_check([&](const std::vector<Tensor>& x) { return map_style(cfg, p, x[0], gpc); },
                           {randn({2, 3}, 5)}),
            1e-6);
  // Parameters as well.
  auto names = std::vector<std::string>{"map.0.w", "map.0.b", "map.1.w"};
  std::vector<Tensor> point;
  for (const auto& n : names) point.push_back(p[n]);
  const Tensor z = randn({2, 3}, 6);
  EXPECT_LT(contract_check(
                [&](const std::vector<Tensor>& x) {
                  NamedTensors items = p.items();
                  for (auto& [k, v] : items)
                    for (std::size_t i = 0; i < names.size(); ++i)
                      if (k == names[i]) v = x[i];
                  return map_style(cfg, ParamSet(items), z, gpc);
                },
                point),
            1e-6);
}

TEST(Synthesis, ZeroLinearityAndShape) {
  const GeneratorConfig def;
  const ParamSet pd = init_generator(def, 1);
  const Tensor planes = synthesize(def, pd, Tensor::zeros({1, 64}));
  EXPECT_EQ(planes.shape(), (ad::Shape{1, 3, 8, 32, 32}));
  for (double v : planes.values()) EXPECT_EQ(v, 0.0);
  EXPECT_GT(pd.count(), 1'500'000u);

  const auto cfg = small_config();
  const ParamSet p = init_generator(cfg, 2, DType::F64);
  const Tensor w = randn({1, 4}, 3);
  const auto a = synthesize(cfg, p, ad::scale(w, 2.5)).values();
  const auto b = synthesize(cfg, p, w).values();
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], 2.5 * b[i], 1e-12);
}

TEST(Triplane, ConstantPlanesSumChannels) {
  std::vector<double> v(3 * 2 * 4 * 4);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 16; ++i) v[(k * 2 + c) * 16 + i] = (k + 1) * (c ? 10.0 : 1.0);
  const Tensor planes = Tensor::from({1, 3, 2, 4, 4}, v, DType::F64);
  const Tensor pts = uniform({50, 3}, 1, -1.5, 1.5);
  const std::vector<int> batch(50, 0);
  const auto f = sample_triplane(planes, pts, batch).values();
  for (std::size_t n = 0; n < 50; ++n) {
    EXPECT_NEAR(f[2 * n], 6.0, 1e-12);
    EXPECT_NEAR(f[2 * n + 1], 60.0, 1e-12);
  }
}

TEST(Triplane, MatchesHandBilinear) {
  const std::size_t R = 6, C = 3, B = 2;
  const Tensor planes = randn({B, 3, C, R, R}, 4);
  const Tensor pts = uniform({40, 3}, 5, -1.2, 1.2);
  std::vector<int> batch(40);
  for (std::size_t i = 0; i < 40; ++i) batch[i] = static_cast<int>(i % B);
  const auto f = sample_triplane(planes, pts, batch).values();
  const auto pv = planes.values();
  const auto x = pts.values();
  const int axes[3][2] = {{0, 1}, {0, 2}, {1, 2}};
  for (std::size_t n = 0; n < 40; ++n)
    for (std::size_t c = 0; c < C; ++c) {
      double expect = 0;
      for (int k = 0; k < 3; ++k) {
        const std::size_t off = ((batch[n] * 3 + k) * C + c) * R * R;
        std::vector<double> plane(pv.begin() + off, pv.begin() + off + R * R);
        expect += bilinear(plane, R, x[3 * n + axes[k][0]], x[3 * n + axes[k][1]]);
      }
      EXPECT_NEAR(f[n * C + c], expect, 1e-12);
    }
}

TEST(Triplane, PermutationSymmetry) {
  // Identical planes: swapping x and y maps XY to its transpose, and XZ <-> YZ.
  const std::size_t R = 5;
  Rng rng(9);
  std::vector<double> sym(R * R);
  for (std::size_t i = 0; i < R; ++i)
    for (std::size_t j = 0; j <= i; ++j) sym[i * R + j] = sym[j * R + i] = rng.normal();
  std::vector<double> v;
  for (int k = 0; k < 3; ++k) v.insert(v.end(), sym.begin(), sym.end());
  const Tensor planes = Tensor::from({1, 3, 1, R, R}, v, DType::F64);
  const Tensor pts = uniform({30, 3}, 2, -1, 1);
  auto sw = pts.values();
  for (std::size_t n = 0; n < 30; ++n) std::swap(sw[3 * n], sw[3 * n + 1]);
  const std::vector<int> batch(30, 0);
  const auto a = sample_triplane(planes, pts, batch).values();
  const auto b = sample_triplane(planes, Tensor::from({30, 3}, sw, DType::F64), batch).values();
  for (std::size_t i = 0; i < 30; ++i) EXPECT_NEAR(a[i], b[i], 1e-12);
}

TEST(Triplane, GradientsMatchFiniteDifferences) {
  const Tensor planes = randn({2, 3, 2, 4, 4}, 11);
  const Tensor pts = uniform({12, 3}, 12, -0.95, 0.95);
  std::vector<int> batch(12);
  for (std::size_t i = 0; i < 12; ++i) batch[i] = static_cast<int>(i % 2);
  EXPECT_LT(contract_check([&](const std::vector<Tensor>& x) { return sample_triplane(x[0], x[1], batch); },
                           {planes, pts}),
            1e-6);
}

TEST(Decoder, RangesAndZeroWeights) {
  GeneratorConfig cfg;
  const ParamSet p = init_generator(cfg, 5);
  const Tensor feats = randn({10000, 8}, 6, 3.0, DType::F32);
  const Decoded d = decode(cfg, p, feats);
  for (double s : d.sigma.values()) EXPECT_GE(s, 0.0);
  for (double c : d.rgb.values()) {
    EXPECT_GE(c, 0.0);
    EXPECT_LE(c, 1.0);
  }
  NamedTensors items = p.items();
  for (auto& [k, v] : items) {
    if (k == "dec.0.w" || k == "dec.1.w") v = Tensor::zeros(v.shape());
    if (k == "dec.1.b") v = Tensor::from({4}, std::vector<double>{0.7, 0, 0, 0});
  }
  const Decoded z = decode(cfg, ParamSet(items), feats);
  for (double s : z.sigma.values()) EXPECT_NEAR(s, std::log1p(std::exp(0.7)), 1e-6);
}

namespace {

SampleLayout single_ray(int samples, double delta) {
  SampleLayout L;
  L.batch = L.height = L.width = 1;
  L.samples = samples;
  L.delta = delta;
  for (int s = 0; s < samples; ++s) {
    L.index.push_back(s);
    L.points.insert(L.points.end(), {0.0, 0.0, 0.0});
    L.point_batch.push_back(0);
  }
  return L;
}

}  // namespace

TEST(Composite, HandComputedCases) {
  const std::array<double, 3> bg{0.9, 0.8, 0.7};
  // Zero density: background, alpha 0.
  auto L = single_ray(3, 0.5);
  auto out = composite(Tensor::zeros({3, 1}, DType::F64), randn({3, 3}, 1), L, bg).values();
  EXPECT_EQ(out, (std::vector<double>{0.9, 0.8, 0.7, 0.0}));
  // Saturated single sample: its colour, alpha 1.
  L = single_ray(1, 1.0);
  out = composite(Tensor::from({1, 1}, std::vector<double>{800.0}, DType::F64),
                  Tensor::from({1, 3}, std::vector<double>{0.1, 0.2, 0.3}, DType::F64), L, bg)
            .values();
  EXPECT_NEAR(out[0], 0.1, 1e-12);
  EXPECT_NEAR(out[2], 0.3, 1e-12);
  EXPECT_NEAR(out[3], 1.0, 1e-12);
  // Two samples with sigma * delta = ln 2: weights 1/2 and 1/4, background 1/4.
  L = single_ray(2, 0.25);
  const double s = std::log(2.0) / 0.25;
  out = composite(Tensor::from({2, 1}, std::vector<double>{s, s}, DType::F64),
                  Tensor::from({2, 3}, std::vector<double>{1, 0, 0, 0, 1, 0}, DType::F64), L, bg)
            .values();
  EXPECT_NEAR(out[0], 0.5 + 0.25 * 0.9, 1e-12);
  EXPECT_NEAR(out[1], 0.25 + 0.25 * 0.8, 1e-12);
  EXPECT_NEAR(out[2], 0.25 * 0.7, 1e-12);
  EXPECT_NEAR(out[3], 0.75, 1e-12);
}

TEST(Composite, GradientsMatchFiniteDifferences) {
  auto cfg = small_config();
  const std::vector poses{SphericalPose::make(20, 10), SphericalPose::make(-160, -5)};
  const SampleLayout L = layout_rays(cfg, poses);
  ASSERT_GT(L.count(), 10u);
  const Tensor sigma = uniform({L.count(), 1}, 3, 0.1, 3.0);
  const Tensor rgb = uniform({L.count(), 3}, 4, 0.0, 1.0);
  EXPECT_LT(contract_check([&](const std::vector<Tensor>& x) { return composite(x[0], x[1], L, {1, 1, 1}); },
                           {sigma, rgb}),
            1e-6);
}

TEST(Composite, OpacityPlusBackgroundWeightIsOne) {
  // With rgb = 0 and background 1, colour is exactly the background weight.
  auto cfg = small_config();
  cfg.resolution = 6;
  const std::vector poses{SphericalPose::make(70, 20)};
  const SampleLayout L = layout_rays(cfg, poses);
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> s(L.count());
    for (auto& x : s) x = std::exp(rng.uniform(-5, 6));
    const auto out = composite(Tensor::from({L.count(), 1}, s, DType::F64), Tensor::zeros({L.count(), 3}, DType::F64),
                               L, {1, 1, 1})
                         .values();
    const std::size_t hw = 36;
    for (std::size_t r = 0; r < hw; ++r) {
      EXPECT_NEAR(out[r] + out[3 * hw + r], 1.0, 1e-6);
      EXPECT_GE(out[3 * hw + r], 0.0);
      EXPECT_LE(out[3 * hw + r], 1.0);
    }
  }
}

TEST(Render, EndToEndGradientWrtW) {
  const auto cfg = small_config();
  const ParamSet p = init_generator(cfg, 6, DType::F64);
  const std::vector poses{SphericalPose::make(15, 5), SphericalPose::make(100, -10)};
  EXPECT_LT(contract_check([&](const std::vector<Tensor>& x) {
              return volume_render(cfg, p, synthesize(cfg, p, x[0]), poses).rgb;
            },
                           {randn({2, 4}, 7)}),
            1e-4);
  // Through the mapping network, including alpha.
  const Tensor gpc = gpc_labels(poses, DType::F64);
  EXPECT_LT(contract_check([&](const std::vector<Tensor>& x) {
              return generate(cfg, p, x[0], gpc, poses).alpha;
            },
                           {randn({2, 3}, 8)}),
            1e-4);
}

TEST(Render, MirroredPlanesGiveMirroredImages) {
  GeneratorConfig cfg = small_config();
  cfg.resolution = 9;
  cfg.plane_res = 7;
  const ParamSet p = init_generator(cfg, 9, DType::F64);
  const std::size_t C = 2, R = 7;
  const Tensor planes = randn({1, 3, C, R, R}, 10);
  // x -> -x flips the XY and XZ planes along their width axis; YZ is unchanged.
  auto v = planes.values();
  for (std::size_t k = 0; k < 2; ++k)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t y = 0; y < R; ++y)
        for (std::size_t x = 0; x < R / 2; ++x) {
          const std::size_t row = ((k * C + c) * R + y) * R;
          std::swap(v[row + x], v[row + R - 1 - x]);
        }
  const Tensor mirrored_planes = Tensor::from(planes.shape(), v, DType::F64);
  for (double yaw : {0.0, 40.0, -135.0}) {
    const auto pose = SphericalPose::make(yaw, 8);
    const std::vector a{pose}, b{flip_pose(pose)};
    const Image ia = to_image(volume_render(cfg, p, planes, a).rgb, 0);
    const Image ib = flip_horizontal(to_image(volume_render(cfg, p, mirrored_planes, b).rgb, 0));
    for (std::size_t i = 0; i < ia.size(); ++i) EXPECT_NEAR(ia.data[i], ib.data[i], 1e-6);
  }
}

TEST(Render, OracleFieldThroughCompositeMatchesReferenceRenderer) {
  GeneratorConfig cfg;
  cfg.resolution = 16;
  cfg.samples_per_ray = 24;
  cfg.cull_radius = 100;  // keep every sample so both renderers see the same points
  Rng rng(3);
  const OracleField field(spawn_avatar(rng, "Anime", {{"Hairstyle", "long hair"}}));
  for (double yaw : {10.0, 95.0, -170.0}) {
    const std::vector poses{SphericalPose::make(yaw, -6)};
    const SampleLayout L = layout_rays(cfg, poses);
    std::vector<double> sigma(L.count()), rgb(3 * L.count());
    for (std::size_t i = 0; i < L.count(); ++i) {
      Eigen::Vector3d c;
      field.eval(Eigen::Vector3d(L.points[3 * i], L.points[3 * i + 1], L.points[3 * i + 2]), sigma[i], c);
      for (int k = 0; k < 3; ++k) rgb[3 * i + k] = c[k];
    }
    const Tensor out = composite(Tensor::from({L.count(), 1}, sigma, DType::F64),
                                 Tensor::from({L.count(), 3}, rgb, DType::F64), L, kWhite);
    const Image gen = to_image(ad::slice(out, 1, 0, 3), 0);
    const Image ref = render_field(field, poses[0], cfg.rig(), cfg.samples_per_ray).rgb;
    for (std::size_t i = 0; i < gen.size(); ++i) EXPECT_NEAR(gen.data[i], ref.data[i], 1e-5);
  }
}

TEST(Init, OrthogonalRows) {
  Rng rng(1);
  const Tensor w = orthogonal(rng, 6, 20, 1.5, DType::F64);
  const auto v = w.values();
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      double dot = 0;
      for (std::size_t k = 0; k < 20; ++k) dot += v[i * 20 + k] * v[j * 20 + k];
      EXPECT_NEAR(dot, i == j ? 2.25 : 0.0, 1e-12);
    }
}

TEST(Config, JsonRoundTrip) {
  GeneratorConfig c;
  c.samples_per_ray = 9;
  c.background = {0, 0.5, 1};
  const auto back = generator_config_from_json(generator_config_to_json(c));
  EXPECT_EQ(generator_config_to_json(back), generator_config_to_json(c));
  EXPECT_THROW(generator_config_from_json({{"samples", 3}}), SchemaError);
  EXPECT_THROW(generator_config_from_json({{"samples_per_ray", 1}}), std::invalid_argument);
}

TEST(Render, TrainingStepCost) {
  // Reports forward + backward time for a default batch of 16; not a hard bound.
  GeneratorConfig cfg;
  const ParamSet p0 = init_generator(cfg, 1);
  Rng rng(2);
  std::vector<SphericalPose> poses;
  for (int i = 0; i < 16; ++i) poses.push_back(sample_pose(rng));
  const auto t0 = std::chrono::steady_clock::now();
  ad::Tape tape;
  const ParamSet p = p0.watched(tape);
  const auto out = generate(cfg, p, sample_z(rng, 16, cfg.d_z), gpc_labels(poses), poses);
  const auto t1 = std::chrono::steady_clock::now();
  const auto grads = tape.gradients(ad::mean(out.rgb), p.tensors());
  const auto t2 = std::chrono::steady_clock::now();
  std::printf("generator batch 16: forward %.3f s, backward %.3f s\n",
              std::chrono::duration<double>(t1 - t0).count(), std::chrono::duration<double>(t2 - t1).count());
  EXPECT_EQ(grads.size(), p.tensors().size());
}
