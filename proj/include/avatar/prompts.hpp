#pragma once

// Text prompts for pose-guided image generation: style, view and attribute
// parts for the positive prompt, plus view-specific and always-on negatives.
// Also the interface to the image generator that consumes them.

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "avatar/camera.hpp"
#include "avatar/image.hpp"
#include "avatar/rng.hpp"

namespace av {

enum class ViewClass { Front, Side, Back };
const char* view_name(ViewClass v);

struct StyleEntry {
  std::string name;
  std::string prompt;
  std::string source;  // "manual" or "generated"
};

struct ViewText {
  std::string positive;
  std::string negative;
};

struct ViewRules {
  std::string separator = ", ";
  double front_below_abs_yaw = 45.0;
  double side_below_abs_yaw = 120.0;
  ViewText front, side, back;
  std::string negative_always;

  const ViewText& text(ViewClass v) const;
};

struct PromptTables {
  std::vector<StyleEntry> styles;
  std::map<std::string, std::vector<std::string>> attributes;
  ViewRules view_rules;

  const StyleEntry& style(const std::string& name) const;  // throws std::out_of_range
  int style_index(const std::string& name) const;
};

// Throws av::SchemaError naming the line (for syntax errors) or the field.
PromptTables parse_tables(const std::string& text, const std::string& origin = "<memory>");
PromptTables load_tables(const std::filesystem::path& path);
// Tables compiled into the library from data/prompt_tables.json.
const PromptTables& default_tables();

ViewClass classify_view(double yaw_deg, const ViewRules& rules = {});

struct AttributeChoice {
  std::string attribute;
  std::string category;
  bool operator==(const AttributeChoice&) const = default;
};

struct PromptBundle {
  std::string style;
  std::string style_text;
  ViewClass view = ViewClass::Front;
  std::string view_text;
  std::vector<AttributeChoice> attributes;
  std::string positive;
  std::string negative;
  bool operator==(const PromptBundle&) const = default;
};

inline constexpr int kAttributesPerPrompt = 5;

// Distinct attributes drawn uniformly without replacement, one uniformly
// drawn category each.
std::vector<AttributeChoice> sample_attributes(Rng& rng, const PromptTables& tables, int count = kAttributesPerPrompt);
PromptBundle compose(const std::string& style_name, const SphericalPose& pose, Rng& rng, const PromptTables& tables,
                     int n_attributes = kAttributesPerPrompt);
// Assembles a bundle from already chosen parts.
PromptBundle assemble(const StyleEntry& style, ViewClass view, std::vector<AttributeChoice> attributes,
                      const ViewRules& rules);

// ---------------------------------------------------------------------------

struct GenerationRequest {
  Image pose_image;            // depth pose image, 1 x H x W
  SphericalPose pose;          // pose the guidance image was rendered at
  SphericalPose content_pose;  // pose the in-process oracle actually draws (may differ)
  PromptBundle prompts;
  std::uint64_t seed = 0;
};

class ImageBackend {
 public:
  virtual ~ImageBackend() = default;
  virtual std::string name() const = 0;
  // Returns a 3 x H x W image matching the pose image's size.
  virtual Image generate(const GenerationRequest& request) = 0;
};

struct RemoteBackendConfig {
  std::string url = "http://127.0.0.1:8765";
  double timeout_s = 30.0;
  int retries = 2;
};

// POST {url}/generate with {"prompt_pos","prompt_neg","pose_image_png_b64",
// "width","height","seed"}; expects {"image_png_b64"}.
class RemoteBackend : public ImageBackend {
 public:
  explicit RemoteBackend(RemoteBackendConfig config);
  std::string name() const override { return "remote"; }
  Image generate(const GenerationRequest& request) override;

 private:
  RemoteBackendConfig config_;
};

}  // namespace av
