#include "avatar/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <openssl/evp.h>
#include <png.h>

#include "avatar/checkpoint.hpp"
#include "avatar/errors.hpp"

namespace av {

Image::Image(int c, int h, int w, float fill) : channels(c), height(h), width(w) {
  if (c <= 0 || h <= 0 || w <= 0) throw std::invalid_argument("image extents must be positive");
  data.assign(static_cast<std::size_t>(c) * h * w, fill);
}

void save_raw(const std::filesystem::path& file, const Image& img) { write_raw_f32(file, img.data); }

Image load_raw(const std::filesystem::path& file, int channels, int height, int width) {
  Image img(channels, height, width);
  img.data = read_raw_f32(file, img.size());
  return img;
}

namespace {

std::uint8_t to_byte(float v) {
  const float c = std::clamp(std::isfinite(v) ? v : 0.0f, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

std::vector<std::uint8_t> interleave(const Image& img, int out_channels) {
  std::vector<std::uint8_t> px(static_cast<std::size_t>(out_channels) * img.height * img.width);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < out_channels; ++c)
        px[(static_cast<std::size_t>(y) * img.width + x) * out_channels + c] =
            to_byte(img.at(img.channels == 1 ? 0 : c, y, x));
  return px;
}

Image deinterleave(const std::uint8_t* px, int channels, int height, int width) {
  Image img(channels, height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(c, y, x) = px[(static_cast<std::size_t>(y) * width + x) * channels + c] / 255.0f;
  return img;
}

}  // namespace

std::string encode_png(const Image& img) {
  if (img.channels != 1 && img.channels != 3) throw std::invalid_argument("encode_png: need 1 or 3 channels");
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  pi.width = static_cast<png_uint_32>(img.width);
  pi.height = static_cast<png_uint_32>(img.height);
  pi.format = img.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  const auto px = interleave(img, img.channels);
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&pi, nullptr, &size, 0, px.data(), 0, nullptr))
    throw IoError(std::string("png encode failed: ") + pi.message);
  std::string out(size, '\0');
  if (!png_image_write_to_memory(&pi, out.data(), &size, 0, px.data(), 0, nullptr))
    throw IoError(std::string("png encode failed: ") + pi.message);
  out.resize(size);
  return out;
}

Image decode_png(const std::string& bytes) {
  png_image pi;
  std::memset(&pi, 0, sizeof pi);
  pi.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&pi, bytes.data(), bytes.size()))
    throw IoError(std::string("png decode failed: ") + pi.message);
  const bool gray = (pi.format & PNG_FORMAT_FLAG_COLOR) == 0;
  pi.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<std::uint8_t> px(PNG_IMAGE_SIZE(pi));
  if (!png_image_finish_read(&pi, nullptr, px.data(), 0, nullptr)) {
    png_image_free(&pi);
    throw IoError(std::string("png decode failed: ") + pi.message);
  }
  return deinterleave(px.data(), gray ? 1 : 3, static_cast<int>(pi.height), static_cast<int>(pi.width));
}

void save_ppm(const std::filesystem::path& file, const Image& img) {
  std::ostringstream ss;
  ss << "P6\n" << img.width << " " << img.height << "\n255\n";
  const auto px = interleave(img, 3);
  ss.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  write_file_atomic(file, ss.str());
}

Image load_ppm(const std::filesystem::path& file) {
  std::istringstream in(read_file(file));
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  if (magic != "P6" || w <= 0 || h <= 0 || maxv != 255) throw IoError(file.string() + ": not an 8-bit P6 PPM");
  in.get();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (in.gcount() != static_cast<std::streamsize>(px.size())) throw IoError(file.string() + ": truncated PPM");
  return deinterleave(px.data(), 3, h, w);
}

std::string base64_encode(const std::string& bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3) + 1, '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()), static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(const std::string& text) {
  if (text.size() % 4 != 0) throw IoError("base64: length is not a multiple of 4");
  std::string out(3 * (text.size() / 4) + 1, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()), static_cast<int>(text.size()));
  if (n < 0) throw IoError("base64: malformed input");
  // EVP_DecodeBlock keeps the bytes produced by '=' padding; drop them.
  std::size_t pad = 0;
  if (!text.empty() && text.back() == '=') ++pad;
  if (text.size() > 1 && text[text.size() - 2] == '=') ++pad;
  out.resize(static_cast<std::size_t>(n) - pad);
  return out;
}

}  // namespace av
