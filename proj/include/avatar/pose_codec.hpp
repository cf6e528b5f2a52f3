#pragma once

// Two-granularity pose labels. A label is a 60-vector laid out as
// [fine yaw 40 | fine pitch 15 | coarse yaw 3 | coarse pitch 2]; exactly one
// granularity carries a yaw one-hot and a pitch one-hot, the other is zero.

#include <vector>

#include <json.hpp>

#include "avatar/camera.hpp"
#include "avatar/rng.hpp"

namespace av {

enum class LabelPart { Fine, Coarse };

struct BinningConfig {
  int yaw_fine = 40;
  int pitch_fine = 15;
  int yaw_coarse = 3;
  int pitch_coarse = 2;
  Range yaw = kYawRange;
  Range pitch = kPitchRange;

  int fine_dim() const { return yaw_fine + pitch_fine; }
  int dim() const { return yaw_fine + pitch_fine + yaw_coarse + pitch_coarse; }
  int yaw_bins(LabelPart p) const { return p == LabelPart::Fine ? yaw_fine : yaw_coarse; }
  int pitch_bins(LabelPart p) const { return p == LabelPart::Fine ? pitch_fine : pitch_coarse; }
  // Offset of the part's yaw block and pitch block inside the full vector.
  int yaw_offset(LabelPart p) const { return p == LabelPart::Fine ? 0 : fine_dim(); }
  int pitch_offset(LabelPart p) const { return yaw_offset(p) + yaw_bins(p); }
  void validate() const;
};

// Half-open uniform bins over [lo, hi); value == hi clamps into the last bin.
int bin_index(double value, Range range, int n_bins);
double bin_center(Range range, int n_bins, int index);

struct PoseLabel {
  LabelPart part = LabelPart::Fine;
  int yaw_bin = 0;
  int pitch_bin = 0;

  bool operator==(const PoseLabel&) const = default;
};

PoseLabel encode(const SphericalPose& pose, const BinningConfig& cfg, LabelPart part);
PoseLabel flip_encode(const SphericalPose& pose, const BinningConfig& cfg, LabelPart part);
// Bin-centre pose of a label (radius set to the default).
SphericalPose decode(const PoseLabel& label, const BinningConfig& cfg);

// Dense 60-vector.
std::vector<float> label_vector(const PoseLabel& label, const BinningConfig& cfg);
// Fine-part block only (55 entries), used for generator pose conditioning.
std::vector<float> fine_vector(const SphericalPose& pose, const BinningConfig& cfg);

struct ConfidencePolicy {
  double yaw_box = 60.0;
  double pitch_box = 15.0;
  double p_high = 0.9;
  double p_low = 0.1;
  void validate() const;
};

bool is_confident(const SphericalPose& pose, const ConfidencePolicy& policy = {});
// Draws the label granularity: Fine with p_high on confident views, p_low
// elsewhere. Exactly one uniform draw per call.
LabelPart sample_part(const SphericalPose& pose, const ConfidencePolicy& policy, Rng& rng);

const char* part_name(LabelPart p);
LabelPart part_from_name(const std::string& s);
nlohmann::json label_to_json(const PoseLabel& label);
PoseLabel label_from_json(const nlohmann::json& j, const BinningConfig& cfg);

}  // namespace av
