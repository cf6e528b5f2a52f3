#pragma once

// Head-centred spherical cameras. World axes: +y up, the avatar faces +z, so
// yaw 0 / pitch 0 looks at the face. Camera frames follow the usual graphics
// convention (camera looks down its own -z, +y up in the image).

#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "avatar/rng.hpp"

namespace av {

inline constexpr double kDefaultRadius = 2.7;
inline constexpr double kPitchLimit = 30.0;

double normalize_yaw(double yaw_deg);  // into [-180, 180)

struct SphericalPose {
  double yaw_deg = 0.0;
  double pitch_deg = 0.0;
  double radius = kDefaultRadius;

  // Validates ranges and normalizes yaw; throws std::invalid_argument.
  static SphericalPose make(double yaw_deg, double pitch_deg, double radius = kDefaultRadius);

  bool operator==(const SphericalPose&) const = default;
};

struct CameraRig {
  double fx, fy, cx, cy;
  int width, height;
  double near, far;

  // Square rig used throughout: fx = fy = 1.2 * res, principal point at the
  // image centre, depth range [1.7, 3.7] bracketing the unit sphere at r = 2.7.
  static CameraRig square(int res);
  void validate() const;
};

struct Range {
  double lo, hi;
};
inline constexpr Range kYawRange{-180.0, 180.0};
inline constexpr Range kPitchRange{-kPitchLimit, kPitchLimit};

SphericalPose sample_pose(Rng& rng, Range yaw = kYawRange, Range pitch = kPitchRange, double radius = kDefaultRadius);

Eigen::Vector3d camera_position(const SphericalPose& pose);
// Camera-to-world rigid transform.
Eigen::Matrix4d extrinsics(const SphericalPose& pose);

struct Ray {
  Eigen::Vector3d origin;
  Eigen::Vector3d dir;
};
// Row-major over pixels (row v, column u), sampling pixel centres.
std::vector<Ray> rays(const SphericalPose& pose, const CameraRig& rig);

SphericalPose flip_pose(const SphericalPose& pose);

nlohmann::json pose_to_json(const SphericalPose& pose);
SphericalPose pose_from_json(const nlohmann::json& j);

}  // namespace av
