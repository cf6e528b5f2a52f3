#pragma once

// Named tensor collections on disk: a directory holding `index.json`
// (name -> {shape, dtype, file}) and one raw little-endian row-major file per
// tensor.

#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "avatar/autodiff.hpp"

namespace av {

using NamedTensors = std::vector<std::pair<std::string, ad::Tensor>>;

void save_checkpoint(const std::filesystem::path& dir, const NamedTensors& tensors);
std::map<std::string, ad::Tensor> load_checkpoint(const std::filesystem::path& dir);

// Raw float32 little-endian buffers, shared with the dataset and image formats.
void write_raw_f32(const std::filesystem::path& file, std::span<const float> values);
std::vector<float> read_raw_f32(const std::filesystem::path& file, std::size_t expected_count);

// Writes `bytes` to a sibling temp file, then renames over `file`.
void write_file_atomic(const std::filesystem::path& file, const std::string& bytes);
std::string read_file(const std::filesystem::path& file);

}  // namespace av
