// Eigen must precede httplib: <resolv.h> defines a _res macro.
#include "avatar/prompts.hpp"

#include <httplib.h>

#include <json.hpp>

#include "avatar/errors.hpp"

namespace av {

RemoteBackend::RemoteBackend(RemoteBackendConfig config) : config_(std::move(config)) {
  if (config_.timeout_s <= 0) throw std::invalid_argument("remote backend timeout must be positive");
  if (config_.retries < 0) throw std::invalid_argument("remote backend retries must be >= 0");
}

Image RemoteBackend::generate(const GenerationRequest& req) {
  const int w = req.pose_image.width, h = req.pose_image.height;
  const nlohmann::json body{{"prompt_pos", req.prompts.positive},
                            {"prompt_neg", req.prompts.negative},
                            {"pose_image_png_b64", base64_encode(encode_png(req.pose_image))},
                            {"width", w},
                            {"height", h},
                            {"seed", req.seed}};
  const std::string payload = body.dump();

  httplib::Client client(config_.url);
  const auto sec = static_cast<time_t>(config_.timeout_s);
  const auto usec = static_cast<time_t>((config_.timeout_s - static_cast<double>(sec)) * 1e6);
  client.set_connection_timeout(sec, usec);
  client.set_read_timeout(sec, usec);
  client.set_write_timeout(sec, usec);

  std::string last_error;
  for (int attempt = 0; attempt <= config_.retries; ++attempt) {
    auto res = client.Post("/generate", payload, "application/json");
    if (!res) {
      last_error = "request failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status >= 500) {
      last_error = "server error " + std::to_string(res->status);
      continue;
    }
    if (res->status != 200) throw IoError("remote backend: HTTP " + std::to_string(res->status));

    nlohmann::json reply;
    try {
      reply = nlohmann::json::parse(res->body);
    } catch (const nlohmann::json::parse_error&) {
      throw IoError("remote backend: response is not JSON");
    }
    if (!reply.is_object() || !reply.contains("image_png_b64") || !reply["image_png_b64"].is_string())
      throw IoError("remote backend: response lacks image_png_b64");
    Image img = decode_png(base64_decode(reply["image_png_b64"].get<std::string>()));
    if (img.width != w || img.height != h)
      throw IoError("remote backend: expected " + std::to_string(w) + "x" + std::to_string(h) + " image, got " +
                    std::to_string(img.width) + "x" + std::to_string(img.height));
    if (img.channels == 1) {
      Image rgb(3, h, w);
      for (int c = 0; c < 3; ++c) std::copy(img.data.begin(), img.data.end(), rgb.data.begin() + c * w * h);
      img = std::move(rgb);
    }
    return img;
  }
  throw IoError("remote backend unreachable after " + std::to_string(config_.retries + 1) + " attempts (" +
                last_error + ")");
}

}  // namespace av
