#pragma once

// Planar float images (C x H x W, row-major, values nominally in [0, 1]) and
// their on-disk encodings.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace av {

struct Image {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Image() = default;
  Image(int c, int h, int w, float fill = 0.0f);

  std::size_t size() const { return data.size(); }
  float& at(int c, int y, int x) { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  float at(int c, int y, int x) const { return data[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  bool operator==(const Image&) const = default;
};

// Raw little-endian float32 C x H x W; the shape is carried by the caller.
void save_raw(const std::filesystem::path& file, const Image& img);
Image load_raw(const std::filesystem::path& file, int channels, int height, int width);

// 8-bit PNG (gray for 1 channel, RGB for 3). Values are clamped to [0, 1].
std::string encode_png(const Image& img);
Image decode_png(const std::string& bytes);

// Binary PPM (P6) for quick inspection; 1-channel images are replicated.
void save_ppm(const std::filesystem::path& file, const Image& img);
Image load_ppm(const std::filesystem::path& file);

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);  // throws av::IoError on malformed input

}  // namespace av
