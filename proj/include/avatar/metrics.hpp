#pragma once

// Fixed random-feature embedding, Gaussian fits, Frechet distance, and the
// random-view evaluation protocol. The embedding network is untrained and
// seeded, so distances are only comparable with each other, never with
// numbers computed from other feature extractors.

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "avatar/camera.hpp"
#include "avatar/dataset.hpp"
#include "avatar/generator.hpp"
#include "avatar/image.hpp"

namespace av {

struct FeatureConfig {
  int resolution = 32;
  int dim = 64;
  std::uint64_t seed = 0x66656174ULL;
};

class FeatureExtractor {
 public:
  explicit FeatureExtractor(FeatureConfig cfg = {});
  const FeatureConfig& config() const { return cfg_; }
  // One row per image. Images must be 3 x resolution x resolution.
  Eigen::MatrixXd embed(std::span<const Image> images) const;

 private:
  FeatureConfig cfg_;
  std::vector<ad::Tensor> conv_;  // weights, stride 2 each
  Eigen::MatrixXd proj_;          // dim x (flattened final map + pooled channels)
};

struct GaussianStats {
  Eigen::VectorXd mu;
  Eigen::MatrixXd sigma;
  std::size_t n = 0;
};

// Sample mean and unbiased covariance of the rows; needs at least 2 rows.
GaussianStats gaussian_stats(const Eigen::MatrixXd& features);
// |mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), with
// negative eigenvalues clamped to zero in both square roots.
double frechet(const GaussianStats& a, const GaussianStats& b);

enum class ViewBucket { Front, Side, Back };
inline constexpr std::array<ViewBucket, 3> kViewBuckets{ViewBucket::Front, ViewBucket::Side, ViewBucket::Back};
// |yaw| < 60: front, < 120: side, else back.
ViewBucket view_bucket(const SphericalPose& pose);
const char* bucket_name(ViewBucket b);

// Real-image statistics, overall and per view bucket (by nominal pose).
struct ReferenceStats {
  GaussianStats overall;
  std::array<std::optional<GaussianStats>, 3> bucket;
};
ReferenceStats reference_stats(const FeatureExtractor& fx, const Dataset& data);

// Something that renders images for (conditioning pose, view pose) pairs.
class ViewSource {
 public:
  virtual ~ViewSource() = default;
  // `rng` supplies any latent randomness; poses are drawn by the caller.
  virtual std::vector<Image> render(std::span<const SphericalPose> conditioning, std::span<const SphericalPose> views,
                                    Rng& rng) = 0;
};

class GeneratorSource : public ViewSource {
 public:
  GeneratorSource(GeneratorConfig cfg, ParamSet params, int batch = 16);
  std::vector<Image> render(std::span<const SphericalPose> conditioning, std::span<const SphericalPose> views,
                            Rng& rng) override;

 private:
  GeneratorConfig cfg_;
  ParamSet params_;
  int batch_;
};

// Returns, for each view, a dataset image whose nominal yaw is closest
// (ties broken at random). A reference point for the protocol's noise floor.
class DatasetReplayer : public ViewSource {
 public:
  explicit DatasetReplayer(const Dataset& data);
  std::vector<Image> render(std::span<const SphericalPose> conditioning, std::span<const SphericalPose> views,
                            Rng& rng) override;

 private:
  const Dataset& data_;
  std::vector<std::size_t> by_yaw_;
};

struct FdScore {
  double overall = 0;
  std::array<std::optional<double>, 3> per_bucket;  // empty when a side has < 2 samples
  std::size_t n = 0;
  std::uint64_t seed = 0;
};
nlohmann::json fd_score_to_json(const FdScore& s);

// Conditioning and view poses are drawn independently and uniformly from
// separate streams, so the conditioning pose never favours the view.
FdScore eval_protocol(ViewSource& source, const ReferenceStats& ref, const FeatureExtractor& fx, std::size_t n,
                      std::uint64_t seed);

}  // namespace av
