#pragma once

// Synthetic multi-view dataset: images from an ImageBackend guided by depth
// pose images, annotated with the nominal camera pose, plus horizontally
// flipped copies.
//
// Layout: manifest.json + records/rec_%06d.img (raw f32, 3 x H x W) +
// records/rec_%06d.depth (raw f32 guidance image, 1 x H x W).

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "avatar/camera.hpp"
#include "avatar/image.hpp"
#include "avatar/oracle.hpp"
#include "avatar/pose_codec.hpp"
#include "avatar/prompts.hpp"

namespace av {

struct SynthConfig {
  int n = 100;                      // records before flip doubling
  int resolution = 32;
  int render_samples = 48;          // samples per ray for oracle renders
  std::vector<std::string> styles;  // empty = every bundled style
  MisalignmentModel misalignment;
  Range yaw = kYawRange;
  Range pitch = kPitchRange;
  int attributes_per_prompt = 5;
  std::uint64_t seed = 0;

  void validate(const PromptTables& tables) const;
};

nlohmann::json synth_config_to_json(const SynthConfig& c);
SynthConfig synth_config_from_json(const nlohmann::json& j);  // unknown keys -> SchemaError

struct DatasetRecord {
  int id = 0;
  Image image;         // 3 x H x W in [0, 1]
  SphericalPose nominal;
  SphericalPose truth;  // diagnostic only
  PoseLabel fine, coarse;
  std::string style;
  std::string prompt_pos, prompt_neg;
  std::uint64_t seed = 0;
  bool flipped = false;
};

struct Dataset {
  int resolution = 0;
  std::vector<DatasetRecord> records;
};

std::string record_stem(int id);  // "rec_000042"

// Writes the dataset and returns the manifest. Image files are written
// atomically before the manifest, which is written last; a failed record
// removes its own files and aborts without a manifest. `backend` defaults to
// the in-process oracle.
nlohmann::json synth_dataset(const SynthConfig& config, const std::filesystem::path& out_dir,
                             ImageBackend* backend = nullptr);

// Loads and validates a dataset directory (schema, shapes, finite pixels).
Dataset load_dataset(const std::filesystem::path& dir, const BinningConfig& bins = {});

}  // namespace av
