#include "avatar/camera.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <string>

#include <Eigen/Geometry>

#include "avatar/errors.hpp"

namespace av {

namespace {
constexpr double kDeg = std::numbers::pi / 180.0;
}

double normalize_yaw(double yaw) {
  if (!std::isfinite(yaw)) throw std::invalid_argument("yaw must be finite");
  double y = std::fmod(yaw + 180.0, 360.0);
  if (y < 0) y += 360.0;
  y -= 180.0;
  // fmod can round a value just below 180 up to exactly 180.
  if (y >= 180.0) y -= 360.0;
  return y;
}

SphericalPose SphericalPose::make(double yaw_deg, double pitch_deg, double radius) {
  if (!std::isfinite(pitch_deg) || pitch_deg < -kPitchLimit || pitch_deg > kPitchLimit)
    throw std::invalid_argument("pitch " + std::to_string(pitch_deg) + " outside [-30, 30]");
  if (!std::isfinite(radius) || radius <= 0) throw std::invalid_argument("radius must be positive");
  return {normalize_yaw(yaw_deg), pitch_deg, radius};
}

CameraRig CameraRig::square(int res) {
  const double r = res;
  CameraRig rig{1.2 * r, 1.2 * r, r / 2, r / 2, res, res, 1.7, 3.7};
  rig.validate();
  return rig;
}

void CameraRig::validate() const {
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera rig needs a positive image size");
  if (!(fx > 0 && fy > 0)) throw std::invalid_argument("camera rig focal lengths must be positive");
  if (!(near > 0 && near < far)) throw std::invalid_argument("camera rig needs 0 < near < far");
}

SphericalPose sample_pose(Rng& rng, Range yaw, Range pitch, double radius) {
  if (yaw.lo > yaw.hi || pitch.lo > pitch.hi) throw std::invalid_argument("sample_pose: empty range");
  if (yaw.lo < -180.0 || yaw.hi > 180.0 || pitch.lo < -kPitchLimit || pitch.hi > kPitchLimit)
    throw std::invalid_argument("sample_pose: range outside pose bounds");
  const double y = rng.uniform(yaw.lo, yaw.hi);
  const double p = rng.uniform(pitch.lo, pitch.hi);
  return SphericalPose::make(y, p, radius);
}

Eigen::Vector3d camera_position(const SphericalPose& pose) {
  const double yaw = pose.yaw_deg * kDeg, pitch = pose.pitch_deg * kDeg;
  return pose.radius *
         Eigen::Vector3d(std::sin(yaw) * std::cos(pitch), std::sin(pitch), std::cos(yaw) * std::cos(pitch));
}

Eigen::Matrix4d extrinsics(const SphericalPose& pose) {
  const Eigen::Vector3d p = camera_position(pose);
  const Eigen::Vector3d z = p.normalized();
  const Eigen::Vector3d x = Eigen::Vector3d::UnitY().cross(z).normalized();
  const Eigen::Vector3d y = z.cross(x);
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.block<3, 1>(0, 0) = x;
  m.block<3, 1>(0, 1) = y;
  m.block<3, 1>(0, 2) = z;
  m.block<3, 1>(0, 3) = p;
  return m;
}

std::vector<Ray> rays(const SphericalPose& pose, const CameraRig& rig) {
  rig.validate();
  const Eigen::Matrix4d c2w = extrinsics(pose);
  const Eigen::Matrix3d rot = c2w.block<3, 3>(0, 0);
  const Eigen::Vector3d origin = c2w.block<3, 1>(0, 3);
  std::vector<Ray> out;
  out.reserve(static_cast<std::size_t>(rig.width) * static_cast<std::size_t>(rig.height));
  for (int v = 0; v < rig.height; ++v) {
    for (int u = 0; u < rig.width; ++u) {
      const Eigen::Vector3d d_cam((u + 0.5 - rig.cx) / rig.fx, -(v + 0.5 - rig.cy) / rig.fy, -1.0);
      out.push_back({origin, (rot * d_cam).normalized()});
    }
  }
  return out;
}

SphericalPose flip_pose(const SphericalPose& pose) { return {normalize_yaw(-pose.yaw_deg), pose.pitch_deg, pose.radius}; }

nlohmann::json pose_to_json(const SphericalPose& pose) {
  return {{"yaw_deg", pose.yaw_deg}, {"pitch_deg", pose.pitch_deg}, {"radius", pose.radius}};
}

SphericalPose pose_from_json(const nlohmann::json& j) {
  for (const char* k : {"yaw_deg", "pitch_deg", "radius"})
    if (!j.contains(k) || !j[k].is_number()) throw SchemaError(std::string("pose: missing numeric field '") + k + "'");
  for (const auto& [k, v] : j.items())
    if (k != "yaw_deg" && k != "pitch_deg" && k != "radius") throw SchemaError("pose: unknown key '" + k + "'");
  return SphericalPose::make(j["yaw_deg"].get<double>(), j["pitch_deg"].get<double>(), j["radius"].get<double>());
}

}  // namespace av
