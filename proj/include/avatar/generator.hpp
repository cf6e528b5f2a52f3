#pragma once

// Tri-plane generator: mapping network (z, pose label) -> w, an affine
// synthesis of three axis-aligned feature planes from w, a small point
// decoder, and differentiable emission-absorption rendering with the same
// midpoint quadrature as the analytic renderer.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <json.hpp>

#include "avatar/autodiff.hpp"
#include "avatar/camera.hpp"
#include "avatar/params.hpp"
#include "avatar/pose_codec.hpp"
#include "avatar/render.hpp"

namespace av {

struct GeneratorConfig {
  int d_z = 64;
  int d_w = 64;
  int mapping_layers = 3;  // affine layers, leaky ReLU between them
  int mapping_hidden = 64;
  int plane_channels = 8;
  int plane_res = 32;
  int decoder_hidden = 16;
  int resolution = 32;
  int samples_per_ray = 12;
  double near = 1.7;
  double far = 3.7;
  double gpc_swap_prob = 0.5;
  std::array<double, 3> background = kWhite;
  // Samples farther than this from the origin get zero density and are never
  // decoded. The scene lives inside the unit sphere.
  double cull_radius = 1.0;

  int gpc_dim() const { return BinningConfig{}.fine_dim(); }
  CameraRig rig() const;
  void validate() const;
};

nlohmann::json generator_config_to_json(const GeneratorConfig& c);
GeneratorConfig generator_config_from_json(const nlohmann::json& j);  // unknown keys -> SchemaError

// Orthogonal random initialisation, deterministic in `seed`.
ParamSet init_generator(const GeneratorConfig& cfg, std::uint64_t seed, ad::DType dtype = ad::DType::F32);

// z (B, d_z), gpc (B, 55) -> w (B, d_w).
ad::Tensor map_style(const GeneratorConfig& cfg, const ParamSet& p, const ad::Tensor& z, const ad::Tensor& gpc);
// w (B, d_w) -> planes (B, 3, C, R, R) in the order XY, XZ, YZ.
ad::Tensor synthesize(const GeneratorConfig& cfg, const ParamSet& p, const ad::Tensor& w);

// Sum of bilinear lookups XY at (x, y), XZ at (x, z), YZ at (y, z) with
// border clamping; plane texel centres span [-1, 1] corner to corner.
// planes (B, 3, C, R, R), points (P, 3), batch[P] in [0, B) -> (P, C).
// Differentiable in planes and points.
ad::Tensor sample_triplane(const ad::Tensor& planes, const ad::Tensor& points, std::span<const int> batch);

struct Decoded {
  ad::Tensor sigma;  // (P, 1), softplus
  ad::Tensor rgb;    // (P, 3), sigmoid
};
Decoded decode(const GeneratorConfig& cfg, const ParamSet& p, const ad::Tensor& features);

// Ray samples for a batch of poses. Sample s of ray r in image b lives at
// flat slot (b * H * W + r) * S + s; index[slot] is its row in the compact
// point list, or -1 when culled.
struct SampleLayout {
  int batch = 0, height = 0, width = 0, samples = 0;
  double delta = 0;
  std::vector<int> index;
  std::vector<double> points;  // P x 3
  std::vector<int> point_batch;
  std::size_t count() const { return point_batch.size(); }
};
SampleLayout layout_rays(const GeneratorConfig& cfg, std::span<const SphericalPose> poses);

// Composites per-point (sigma, rgb) along rays; culled slots count as empty.
// Returns (B, 4, H, W): colour channels then opacity.
ad::Tensor composite(const ad::Tensor& sigma, const ad::Tensor& rgb, const SampleLayout& layout,
                     const std::array<double, 3>& background);

struct Rendered {
  ad::Tensor rgb;    // (B, 3, H, W)
  ad::Tensor alpha;  // (B, 1, H, W)
};
Rendered volume_render(const GeneratorConfig& cfg, const ParamSet& p, const ad::Tensor& planes,
                       std::span<const SphericalPose> poses);
Rendered generate(const GeneratorConfig& cfg, const ParamSet& p, const ad::Tensor& z, const ad::Tensor& gpc,
                  std::span<const SphericalPose> poses);

// Rows of fine pose encodings for GPC, (B, 55).
ad::Tensor gpc_labels(std::span<const SphericalPose> poses, ad::DType dtype = ad::DType::F32);
// (B, d_z) standard normal draws.
ad::Tensor sample_z(Rng& rng, int batch, int d_z, ad::DType dtype = ad::DType::F32);

// Row b of a (B, C, H, W) tensor as an image.
Image to_image(const ad::Tensor& batch, std::size_t b);

}  // namespace av
