#pragma once

// Conditional diffusion in style space: a linear-beta DDPM noise schedule,
// an MLP noise predictor trained with condition dropout, classifier-free
// guidance, deterministic DDIM and ancestral DDPM samplers, and the image
// conditioned generator that replaces the mapping network with the prior.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <json.hpp>

#include "avatar/generator.hpp"
#include "avatar/metrics.hpp"
#include "avatar/params.hpp"

namespace av {

class NoiseSchedule {
 public:
  explicit NoiseSchedule(int steps = 1000, double beta_first = 1e-4, double beta_last = 0.02);
  int steps() const { return T_; }
  double beta(int t) const;       // t in [1, T]
  double alpha_bar(int t) const;  // t in [0, T]; alpha_bar(0) = 1

 private:
  int T_;
  std::vector<double> beta_, alpha_bar_;  // index t; beta_[0] unused
};

struct GuidanceConfig {
  double lambda = 5.0;
  double p_drop = 0.2;
  int ddim_steps = 50;
  void validate(const NoiseSchedule& s) const;
};

// Rows are samples. w_t = sqrt(abar_t) w0 + sqrt(1 - abar_t) noise.
Eigen::MatrixXd q_sample(const NoiseSchedule& s, const Eigen::MatrixXd& w0, int t, const Eigen::MatrixXd& noise);

// Noise prediction for a batch at one timestep; y rows are conditions, a zero
// row is the null condition.
using EpsFn = std::function<Eigen::MatrixXd(const Eigen::MatrixXd& x, int t, const Eigen::MatrixXd& y)>;

// lambda * eps(x, t, y) + (1 - lambda) * eps(x, t, null).
Eigen::MatrixXd guided_eps(const EpsFn& eps, const Eigen::MatrixXd& x, int t, const Eigen::MatrixXd& y, double lambda);

// Evenly spaced descending timesteps in [1, T], ending at the smallest.
std::vector<int> ddim_timesteps(int T, int steps);
// Deterministic DDIM from x_T; the last update lands on t = 0.
Eigen::MatrixXd ddim_sample(const EpsFn& eps, const NoiseSchedule& s, const Eigen::MatrixXd& y, double lambda,
                            int steps, Eigen::MatrixXd x_T);
// Ancestral DDPM over every step, posterior variance beta-tilde.
Eigen::MatrixXd ddpm_sample(const EpsFn& eps, const NoiseSchedule& s, const Eigen::MatrixXd& y, double lambda,
                            Eigen::MatrixXd x_T, Rng& rng);

struct DenoiserConfig {
  int d_x = 64;
  int d_y = 64;
  int hidden = 128;
  int layers = 3;
  int time_dim = 64;  // even
  void validate() const;
};
nlohmann::json denoiser_config_to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

ParamSet init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed, ad::DType dtype = ad::DType::F32);
// Sinusoidal embedding of integer timesteps, (B, time_dim).
ad::Tensor time_embedding(std::span<const int> t, int dim, ad::DType dtype);
// x (B, d_x), t[B], y (B, d_y) -> predicted noise (B, d_x). The condition
// enters through a bias-free linear map, so a zero row adds nothing.
ad::Tensor denoise(const DenoiserConfig& cfg, const ParamSet& p, const ad::Tensor& x, std::span<const int> t,
                   const ad::Tensor& y);
EpsFn eps_fn(const DenoiserConfig& cfg, const ParamSet& p);

struct DenoiserTraining {
  int steps = 20000;
  int batch = 128;
  double lr = 1e-4;
  double p_drop = 0.2;
};

// Replaces each row of y by the null condition with probability p; returns
// how many rows were dropped. One draw per row.
std::size_t drop_conditions(Eigen::MatrixXd& y, double p, Rng& rng);

struct TrainedDenoiser {
  ParamSet params;
  std::vector<double> losses;  // per step
  std::size_t dropped = 0, seen = 0;
};
// MSE on predicted noise at uniform timesteps; rows of x and y are pairs.
TrainedDenoiser train_denoiser(const DenoiserConfig& cfg, const NoiseSchedule& s, const Eigen::MatrixXd& x,
                               const Eigen::MatrixXd& y, const DenoiserTraining& tr, std::uint64_t seed,
                               const std::function<void(int, double)>& progress = {});

// Condition embedding of front images, one row each.
Eigen::MatrixXd encode_condition(const FeatureExtractor& fx, std::span<const Image> front);

struct PriorConfig {
  DenoiserConfig denoiser;
  DenoiserTraining training;  // its p_drop is ignored; guidance.p_drop applies
  GuidanceConfig guidance;
  int pairs = 4000;
  double jitter_deg = 5.0;  // front-view yaw and pitch jitter of the condition renders
  void validate() const;
};
nlohmann::json prior_config_to_json(const PriorConfig& c);
PriorConfig prior_config_from_json(const nlohmann::json& j);  // unknown keys -> SchemaError

// (style vector, front render) pairs from a generator.
struct PriorPairs {
  Eigen::MatrixXd w;  // (n, d_w)
  std::vector<Image> front;
  std::vector<SphericalPose> poses;
};
PriorPairs sample_prior_pairs(const GeneratorConfig& cfg, const ParamSet& g, int n, double jitter_deg,
                              std::uint64_t seed);

// The denoiser works on standardised w and y; the null condition is the
// zero vector in that standardised space.
struct StylePrior {
  PriorConfig config;
  int resolution = 32;  // condition image size
  ParamSet params;
  Eigen::VectorXd w_mean, w_std, y_mean, y_std;
  std::vector<double> losses;
  std::size_t dropped = 0, seen = 0;

  Eigen::MatrixXd standardise_y(const Eigen::MatrixXd& y_raw) const;
  // Style vectors for raw condition rows, from a seeded x_T.
  Eigen::MatrixXd sample(const Eigen::MatrixXd& y_raw, double lambda, int steps, std::uint64_t seed) const;
};

StylePrior train_prior(const GeneratorConfig& gcfg, const ParamSet& g, const PriorConfig& cfg, std::uint64_t seed,
                       const std::function<void(const std::string&)>& progress = {});
void save_prior(const std::filesystem::path& dir, const StylePrior& p);
StylePrior load_prior(const std::filesystem::path& dir);

struct ConditionedAvatar {
  Eigen::VectorXd w;
  ad::Tensor planes;  // (1, 3, C, R, R), for mesh extraction
  std::vector<Image> views;
};
// No pose is estimated from the input; views are rendered at the caller's poses.
ConditionedAvatar generate_conditioned(const Image& image, const GeneratorConfig& gcfg, const ParamSet& g,
                                       const StylePrior& prior, std::span<const SphericalPose> poses,
                                       std::uint64_t seed, std::optional<double> lambda = std::nullopt);

// Mean cosine similarity of row-paired embeddings against a shuffled-pair
// null; rows are centred on the pooled mean first.
struct PairedSimilarity {
  double matched = 0;
  double shuffled = 0;  // mean over permutations
  double p_value = 1;   // (1 + #{perm >= matched}) / (1 + permutations)
};
PairedSimilarity paired_similarity(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, int permutations,
                                   std::uint64_t seed);

}  // namespace av
