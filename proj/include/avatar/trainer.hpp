#pragma once

// GAN training loop: per-iteration label-granularity sampling for real and
// fake images, alternating discriminator / generator Adam steps, EMA of the
// generator, checkpoints with exact resume, and the three-variant ablation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "avatar/dataset.hpp"
#include "avatar/discriminator.hpp"
#include "avatar/generator.hpp"
#include "avatar/metrics.hpp"
#include "avatar/pose_codec.hpp"

namespace av {

// Which label granularity the discriminator sees.
enum class LabelMode { CoarseToFine, FineOnly, CoarseOnly };
const char* label_mode_name(LabelMode m);
LabelMode label_mode_from_name(const std::string& s);  // "cof", "fine_only", "coarse_only"

struct LabelPolicy {
  LabelMode mode = LabelMode::CoarseToFine;
  ConfidencePolicy confidence;
  // Forced modes return without drawing; the mixed mode draws once.
  LabelPart draw(const SphericalPose& pose, Rng& rng) const;
};

struct Schedule {
  int iterations = 2000;
  int batch = 16;
  double g_lr = 2e-3;
  double d_lr = 2e-3;
  double beta1 = 0.0;
  double beta2 = 0.99;
  double ema_decay = 0.99;
  int checkpoint_every = 500;  // 0: only at the end
  int fd_every = 0;            // 0: never during training
  int fd_samples = 500;
  void validate() const;
};

struct TrainConfig {
  GeneratorConfig generator;
  DiscConfig discriminator;
  Schedule schedule;
  LabelPolicy policy;
  void validate() const;
};

nlohmann::json train_config_to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);  // unknown keys -> SchemaError

// Thrown when a loss or update goes non-finite; the run directory keeps the
// last good checkpoint.
class TrainingDiverged : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

// One row of log.jsonl.
struct IterationLog {
  int iteration = 0;
  double d_loss = 0, g_loss = 0, r1 = 0, real_logit = 0, fake_logit = 0;
  int confident_real = 0, confident_real_fine = 0;  // confident reals and how many got fine labels
  int fine_real = 0, fine_fake = 0;                 // fine labels this iteration
  std::optional<double> fd;
};
nlohmann::json iteration_log_to_json(const IterationLog& l);

struct TrainOptions {
  bool resume = false;  // continue from run_dir/ckpt if present
  std::function<void(const IterationLog&)> on_iteration;
  // Stop after this iteration as if interrupted (tests of resume).
  std::optional<int> stop_after;
};

struct TrainResult {
  int iterations_done = 0;
  std::filesystem::path checkpoint;  // run_dir/ckpt
};

// Trains on the dataset and writes config.json, log.jsonl and ckpt/ under
// run_dir. Deterministic in (dataset, config, seed).
TrainResult train(const Dataset& data, const TrainConfig& cfg, std::uint64_t seed,
                  const std::filesystem::path& run_dir, const TrainOptions& opts = {});

// A trained generator as stored in a checkpoint; `ema` weights are used for
// every downstream task.
struct GeneratorCheckpoint {
  GeneratorConfig config;
  ParamSet ema;
  int iteration = 0;
};
GeneratorCheckpoint load_generator(const std::filesystem::path& ckpt_dir);

struct AblationOptions {
  std::vector<LabelMode> variants{LabelMode::CoarseToFine, LabelMode::FineOnly, LabelMode::CoarseOnly};
  std::vector<std::uint64_t> seeds{0, 1, 2};
  int eval_samples = 2000;
  bool resume = false;  // continue interrupted runs; finished runs are only re-scored
  std::function<void(const std::string&)> progress;
};

// Trains every (variant, seed) into out_dir/<variant>/seed_<s>/ and scores
// each final EMA generator with the random-view protocol. The report holds
// the per-run scores and the per-variant medians, overall and per bucket.
nlohmann::json ablation(const Dataset& data, const TrainConfig& base, const std::filesystem::path& out_dir,
                        const AblationOptions& opts = {});

}  // namespace av
