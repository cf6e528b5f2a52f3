#pragma once

// Procedural avatar heads with an analytic radiance field, used in place of a
// pose-guided text-to-image model. Each head is a smooth-min composition of
// signed-distance primitives (head, nose, ears, neck, hair, beard) with colour
// decals for eyes, brows, mouth and skin marks.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "avatar/pose_codec.hpp"
#include "avatar/prompts.hpp"
#include "avatar/render.hpp"

namespace av {

struct Palette {
  std::string style;
  Eigen::Vector3d skin, hair, iris, mouth, sclera;
  double boxiness = 0.0;   // 0 = ellipsoid head, 1 = rounded box
  double eye_scale = 1.0;  // style-level eye size
  double hair_cover = 0.0;  // shifts the hairline (positive = more hair)
};

// One palette per bundled style, in bundled-table order.
const std::vector<Palette>& style_palettes();
const Palette& palette_for(const std::string& style);  // throws std::out_of_range

enum class HairKind { None, Short, Long };

struct AvatarSpec {
  std::string style;
  std::vector<AttributeChoice> attributes;
  std::uint64_t seed = 0;
  bool mirrored = false;

  Eigen::Vector3d head_axes{0.52, 0.66, 0.58};
  double boxiness = 0.0;
  double eye_radius = 0.075;
  double eye_squash = 1.0;  // vertical / horizontal eye radius
  double eye_spacing = 0.19;
  double eye_height = 0.08;
  double nose_length = 0.12;
  double nose_radius = 0.045;
  double ear_scale = 1.0;
  double mouth_width = 0.13;
  double mouth_height = 0.028;
  double brow_thickness = 0.018;
  double hairline = 0.05;
  double hair_thickness = 0.05;
  double hair_part = 0.06;  // lateral offset of the hair shell; breaks mirror symmetry
  HairKind hair = HairKind::Short;
  bool curly = false;
  bool bun = false;
  bool ponytail = false;
  double beard = 0.0;  // 0 none, 0.5 goatee, 1 full
  bool moustache = false;
  double blush = 0.0;
  bool mole = false;
  Eigen::Vector3d skin, hair_colour, iris, mouth, sclera;
  double scale = 1.0;  // constructive clamp into the unit sphere

  bool operator==(const AvatarSpec&) const = default;
};

inline constexpr double kBigEyeFactor = 1.35;   // eye radius multiplier for "big-eyed"
inline constexpr double kSmallEyeFactor = 0.7;  // and for "small-eyed"
inline constexpr double kContainRadius = 0.95;  // every avatar is scaled to fit this sphere

// Deterministic in (rng state, style, attributes). Attribute categories are
// mapped to geometry/colour modifiers; categories without an entry only
// appear in the prompt.
AvatarSpec spawn_avatar(Rng& rng, const std::string& style, const std::vector<AttributeChoice>& attributes);
AvatarSpec mirrored(const AvatarSpec& spec);
// Radius of a sphere about the origin containing every primitive.
double bounding_radius(const AvatarSpec& spec);

inline constexpr double kOracleDensity = 30.0;    // k in sigma = k * sigmoid(-s * sdf)
inline constexpr double kOracleSharpness = 80.0;  // s

class OracleField : public RadianceField {
 public:
  explicit OracleField(AvatarSpec spec, double density = kOracleDensity, double sharpness = kOracleSharpness);
  double sdf(const Eigen::Vector3d& p) const;
  void eval(const Eigen::Vector3d& p, double& sigma, Eigen::Vector3d& rgb) const override;
  const AvatarSpec& spec() const { return spec_; }

 private:
  struct Parts {
    double skin, hair;
  };
  Parts parts(const Eigen::Vector3d& q) const;  // in the unscaled head frame
  Eigen::Vector3d shade(const Eigen::Vector3d& q, const Parts& d) const;
  AvatarSpec spec_;
  double k_, s_;
};

// Empty field, used for background-only renders.
class EmptyField : public RadianceField {
 public:
  void eval(const Eigen::Vector3d&, double& sigma, Eigen::Vector3d& rgb) const override {
    sigma = 0;
    rgb.setZero();
  }
};

// ---------------------------------------------------------------------------

struct MisalignmentModel {
  double delta_max = 20.0;  // degrees of uniform yaw/pitch jitter outside the confident box
  double p_flip = 0.25;     // back views: probability of a uniformly random yaw instead
  ConfidencePolicy box;
  void validate() const;
};

struct CorruptedPose {
  SphericalPose pose;
  bool flipped = false;
};

// Identity inside the confident box. Outside: yaw and pitch jitter (pitch
// clamped), then for back views a random yaw with probability p_flip. Consumes
// no draws inside the box.
CorruptedPose corrupt_pose(const SphericalPose& nominal, const MisalignmentModel& model, Rng& rng);

// In-process backend: rebuilds the avatar from the request's prompts and seed
// and renders it at request.content_pose.
class OracleBackend : public ImageBackend {
 public:
  OracleBackend(CameraRig rig, int n_samples) : rig_(rig), n_samples_(n_samples) {}
  std::string name() const override { return "oracle"; }
  Image generate(const GenerationRequest& request) override;

 private:
  CameraRig rig_;
  int n_samples_;
};

// The avatar the oracle backend draws for a request seed and prompt bundle.
AvatarSpec avatar_for(std::uint64_t seed, const PromptBundle& prompts);

}  // namespace av
