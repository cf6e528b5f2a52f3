#pragma once

// Emission-absorption compositing shared by the analytic renderer and the
// differentiable generator renderer. Samples sit at bin midpoints
// t_i = near + (i + 1/2) * delta with delta = (far - near) / n:
//   alpha_i = 1 - exp(-sigma_i * delta),  T_i = prod_{j<i} (1 - alpha_j),
//   w_i = T_i * alpha_i,  colour = sum_i w_i * rgb_i + (1 - sum_i w_i) * bg.

#include <array>
#include <cmath>

#include <Eigen/Core>

#include "avatar/camera.hpp"
#include "avatar/image.hpp"

namespace av {

struct Quadrature {
  double near = 1.7;
  double far = 3.7;
  int n = 12;

  double delta() const { return (far - near) / n; }
  double t(int i) const { return near + (i + 0.5) * delta(); }
};

// sigma[n], rgb[n*3] (interleaved) -> colour[3]; returns the opacity sum_i w_i.
// `weights` (length n) is optional.
template <class T>
T composite_ray(const T* sigma, const T* rgb, int n, T delta, const T* bg, T* colour, T* weights = nullptr) {
  T trans = 1;
  T acc = 0;
  T c[3] = {0, 0, 0};
  for (int i = 0; i < n; ++i) {
    const T alpha = 1 - std::exp(-sigma[i] * delta);
    const T w = trans * alpha;
    if (weights) weights[i] = w;
    for (int k = 0; k < 3; ++k) c[k] += w * rgb[3 * i + k];
    acc += w;
    trans *= 1 - alpha;
  }
  for (int k = 0; k < 3; ++k) colour[k] = c[k] + (1 - acc) * bg[k];
  return acc;
}

class RadianceField {
 public:
  virtual ~RadianceField() = default;
  virtual void eval(const Eigen::Vector3d& p, double& sigma, Eigen::Vector3d& rgb) const = 0;
};

struct RenderOutput {
  Image rgb;    // 3 x H x W
  Image alpha;  // 1 x H x W, sum of compositing weights
  Image depth;  // 1 x H x W, expected termination depth (far where empty)
};

inline constexpr std::array<double, 3> kWhite{1.0, 1.0, 1.0};

RenderOutput render_field(const RadianceField& field, const SphericalPose& pose, const CameraRig& rig, int n_samples,
                          std::array<double, 3> background = kWhite);

// Depth mapped to a guidance image: near -> 1, far (or empty) -> 0.
Image depth_to_pose_image(const Image& depth, const CameraRig& rig);

Image flip_horizontal(const Image& img);

}  // namespace av
