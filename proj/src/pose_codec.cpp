#include "avatar/pose_codec.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

#include "avatar/errors.hpp"

namespace av {

void BinningConfig::validate() const {
  if (yaw_fine < 1 || pitch_fine < 1 || yaw_coarse < 1 || pitch_coarse < 1)
    throw std::invalid_argument("binning: every bin count must be at least 1");
  if (!(yaw.lo < yaw.hi) || !(pitch.lo < pitch.hi)) throw std::invalid_argument("binning: empty range");
}

int bin_index(double value, Range range, int n_bins) {
  if (n_bins < 1) throw std::invalid_argument("bin_index: n_bins must be positive");
  if (!std::isfinite(value) || value < range.lo || value > range.hi)
    throw std::invalid_argument("bin_index: value " + std::to_string(value) + " outside [" +
                                std::to_string(range.lo) + ", " + std::to_string(range.hi) + "]");
  const double w = (range.hi - range.lo) / n_bins;
  const auto k = static_cast<int>(std::floor((value - range.lo) / w));
  return std::clamp(k, 0, n_bins - 1);
}

double bin_center(Range range, int n_bins, int index) {
  if (index < 0 || index >= n_bins) throw std::out_of_range("bin_center: index out of range");
  const double w = (range.hi - range.lo) / n_bins;
  return range.lo + (index + 0.5) * w;
}

PoseLabel encode(const SphericalPose& pose, const BinningConfig& cfg, LabelPart part) {
  return {part, bin_index(pose.yaw_deg, cfg.yaw, cfg.yaw_bins(part)),
          bin_index(pose.pitch_deg, cfg.pitch, cfg.pitch_bins(part))};
}

PoseLabel flip_encode(const SphericalPose& pose, const BinningConfig& cfg, LabelPart part) {
  return encode(flip_pose(pose), cfg, part);
}

SphericalPose decode(const PoseLabel& label, const BinningConfig& cfg) {
  return SphericalPose::make(bin_center(cfg.yaw, cfg.yaw_bins(label.part), label.yaw_bin),
                             bin_center(cfg.pitch, cfg.pitch_bins(label.part), label.pitch_bin));
}

std::vector<float> label_vector(const PoseLabel& label, const BinningConfig& cfg) {
  std::vector<float> v(static_cast<std::size_t>(cfg.dim()), 0.0f);
  v.at(static_cast<std::size_t>(cfg.yaw_offset(label.part) + label.yaw_bin)) = 1.0f;
  v.at(static_cast<std::size_t>(cfg.pitch_offset(label.part) + label.pitch_bin)) = 1.0f;
  return v;
}

std::vector<float> fine_vector(const SphericalPose& pose, const BinningConfig& cfg) {
  auto full = label_vector(encode(pose, cfg, LabelPart::Fine), cfg);
  full.resize(static_cast<std::size_t>(cfg.fine_dim()));
  return full;
}

void ConfidencePolicy::validate() const {
  if (!(0.0 <= p_low && p_low <= p_high && p_high <= 1.0))
    throw std::invalid_argument("confidence policy needs 0 <= p_low <= p_high <= 1");
  if (yaw_box < 0 || yaw_box > 180 || pitch_box < 0 || pitch_box > kPitchLimit)
    throw std::invalid_argument("confidence box outside the pose ranges");
}

bool is_confident(const SphericalPose& pose, const ConfidencePolicy& policy) {
  return std::abs(pose.yaw_deg) <= policy.yaw_box && std::abs(pose.pitch_deg) <= policy.pitch_box;
}

LabelPart sample_part(const SphericalPose& pose, const ConfidencePolicy& policy, Rng& rng) {
  const double p = is_confident(pose, policy) ? policy.p_high : policy.p_low;
  return rng.bernoulli(p) ? LabelPart::Fine : LabelPart::Coarse;
}

const char* part_name(LabelPart p) { return p == LabelPart::Fine ? "fine" : "coarse"; }

LabelPart part_from_name(const std::string& s) {
  if (s == "fine") return LabelPart::Fine;
  if (s == "coarse") return LabelPart::Coarse;
  throw SchemaError("label part must be \"fine\" or \"coarse\", got \"" + s + "\"");
}

nlohmann::json label_to_json(const PoseLabel& label) {
  return {{"part", part_name(label.part)}, {"yaw_bin", label.yaw_bin}, {"pitch_bin", label.pitch_bin}};
}

PoseLabel label_from_json(const nlohmann::json& j, const BinningConfig& cfg) {
  if (!j.is_object() || !j.contains("part") || !j.contains("yaw_bin") || !j.contains("pitch_bin"))
    throw SchemaError("label needs part, yaw_bin and pitch_bin");
  PoseLabel l{part_from_name(j["part"].get<std::string>()), j["yaw_bin"].get<int>(), j["pitch_bin"].get<int>()};
  if (l.yaw_bin < 0 || l.yaw_bin >= cfg.yaw_bins(l.part) || l.pitch_bin < 0 || l.pitch_bin >= cfg.pitch_bins(l.part))
    throw SchemaError("label bin index out of range");
  return l;
}

}  // namespace av
