#include "avatar/render.hpp"

#include <algorithm>
#include <vector>

namespace av {

RenderOutput render_field(const RadianceField& field, const SphericalPose& pose, const CameraRig& rig, int n_samples,
                          std::array<double, 3> background) {
  if (n_samples < 2) throw std::invalid_argument("render_field: need at least 2 samples per ray");
  const Quadrature q{rig.near, rig.far, n_samples};
  const auto rs = rays(pose, rig);
  RenderOutput out{Image(3, rig.height, rig.width), Image(1, rig.height, rig.width), Image(1, rig.height, rig.width)};
  std::vector<double> sigma(static_cast<std::size_t>(n_samples)), rgb(static_cast<std::size_t>(n_samples) * 3),
      w(static_cast<std::size_t>(n_samples));
  const std::size_t hw = static_cast<std::size_t>(rig.width) * rig.height;
  for (std::size_t r = 0; r < rs.size(); ++r) {
    for (int i = 0; i < n_samples; ++i) {
      Eigen::Vector3d c;
      field.eval(rs[r].origin + q.t(i) * rs[r].dir, sigma[static_cast<std::size_t>(i)], c);
      for (int k = 0; k < 3; ++k) rgb[static_cast<std::size_t>(3 * i + k)] = c[k];
    }
    double colour[3];
    const double acc = composite_ray(sigma.data(), rgb.data(), n_samples, q.delta(), background.data(), colour, w.data());
    double depth = 0;
    for (int i = 0; i < n_samples; ++i) depth += w[static_cast<std::size_t>(i)] * q.t(i);
    depth += (1 - acc) * q.far;
    for (int k = 0; k < 3; ++k) out.rgb.data[k * hw + r] = static_cast<float>(colour[k]);
    out.alpha.data[r] = static_cast<float>(acc);
    out.depth.data[r] = static_cast<float>(depth);
  }
  return out;
}

Image depth_to_pose_image(const Image& depth, const CameraRig& rig) {
  Image out(1, depth.height, depth.width);
  for (std::size_t i = 0; i < depth.size(); ++i)
    out.data[i] = static_cast<float>(std::clamp((rig.far - depth.data[i]) / (rig.far - rig.near), 0.0, 1.0));
  return out;
}

Image flip_horizontal(const Image& img) {
  Image out = img;
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) out.at(c, y, x) = img.at(c, y, img.width - 1 - x);
  return out;
}

}  // namespace av
