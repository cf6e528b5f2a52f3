#include "avatar/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "avatar/checkpoint.hpp"
#include "avatar/errors.hpp"
#include "avatar/parallel.hpp"
#include "avatar/render.hpp"

namespace av {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kSchema = "avatar-dataset/1";
constexpr const char* kSynthSchema = "avatar-synth/1";

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || k == a;
    if (!ok) throw SchemaError(where + ": unknown key '" + k + "'");
  }
}

template <class T>
T field(const json& j, const char* key, const std::string& where) {
  if (!j.contains(key)) throw SchemaError(where + ": missing field '" + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw SchemaError(where + ": field '" + key + "' has the wrong type");
  }
}

json range_json(Range r) { return json::array({r.lo, r.hi}); }

Range range_from(const json& j, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number() || !j[1].is_number())
    throw SchemaError(where + ": expected [lo, hi]");
  return {j[0].get<double>(), j[1].get<double>()};
}

json bins_json(const PoseLabel& l) { return json::array({l.yaw_bin, l.pitch_bin}); }

PoseLabel bins_from(const json& j, LabelPart part, const BinningConfig& cfg, const std::string& where) {
  if (!j.is_array() || j.size() != 2 || !j[0].is_number_integer() || !j[1].is_number_integer())
    throw SchemaError(where + ": expected [yaw_bin, pitch_bin]");
  PoseLabel l{part, j[0].get<int>(), j[1].get<int>()};
  if (l.yaw_bin < 0 || l.yaw_bin >= cfg.yaw_bins(part) || l.pitch_bin < 0 || l.pitch_bin >= cfg.pitch_bins(part))
    throw SchemaError(where + ": bin index out of range");
  return l;
}

struct Synthesised {
  json entry;
  Image image, depth;
};

}  // namespace

void SynthConfig::validate(const PromptTables& tables) const {
  if (n < 1) throw std::invalid_argument("synth: n must be >= 1");
  if (resolution < 4) throw std::invalid_argument("synth: resolution must be >= 4");
  if (render_samples < 2) throw std::invalid_argument("synth: render_samples must be >= 2");
  if (!(yaw.lo < yaw.hi) || yaw.lo < kYawRange.lo || yaw.hi > kYawRange.hi)
    throw std::invalid_argument("synth: yaw range must lie within [-180, 180]");
  if (!(pitch.lo < pitch.hi) || pitch.lo < kPitchRange.lo || pitch.hi > kPitchRange.hi)
    throw std::invalid_argument("synth: pitch range must lie within [-30, 30]");
  misalignment.validate();
  for (const auto& s : styles) {
    tables.style(s);
    palette_for(s);
  }
}

json synth_config_to_json(const SynthConfig& c) {
  return {{"schema", kSynthSchema},
          {"n", c.n},
          {"resolution", c.resolution},
          {"render_samples", c.render_samples},
          {"styles", c.styles},
          {"delta_max", c.misalignment.delta_max},
          {"p_flip", c.misalignment.p_flip},
          {"yaw_range", range_json(c.yaw)},
          {"pitch_range", range_json(c.pitch)},
          {"attributes_per_prompt", c.attributes_per_prompt},
          {"seed", c.seed}};
}

SynthConfig synth_config_from_json(const json& j) {
  const std::string where = "synth config";
  check_keys(j,
             {"schema", "n", "resolution", "render_samples", "styles", "delta_max", "p_flip", "yaw_range", "pitch_range",
              "attributes_per_prompt", "seed"},
             where);
  if (j.contains("schema") && (!j["schema"].is_string() || j["schema"].get<std::string>() != kSynthSchema))
    throw SchemaError(where + ": schema must be \"" + kSynthSchema + "\"");
  SynthConfig c;
  if (j.contains("n")) c.n = field<int>(j, "n", where);
  if (j.contains("resolution")) c.resolution = field<int>(j, "resolution", where);
  if (j.contains("render_samples")) c.render_samples = field<int>(j, "render_samples", where);
  if (j.contains("styles")) c.styles = field<std::vector<std::string>>(j, "styles", where);
  if (j.contains("delta_max")) c.misalignment.delta_max = field<double>(j, "delta_max", where);
  if (j.contains("p_flip")) c.misalignment.p_flip = field<double>(j, "p_flip", where);
  if (j.contains("yaw_range")) c.yaw = range_from(j["yaw_range"], where + ".yaw_range");
  if (j.contains("pitch_range")) c.pitch = range_from(j["pitch_range"], where + ".pitch_range");
  if (j.contains("attributes_per_prompt")) c.attributes_per_prompt = field<int>(j, "attributes_per_prompt", where);
  if (j.contains("seed")) c.seed = field<std::uint64_t>(j, "seed", where);
  return c;
}

std::string record_stem(int id) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "rec_%06d", id);
  return buf;
}

json synth_dataset(const SynthConfig& config, const fs::path& out_dir, ImageBackend* backend) {
  const PromptTables& tables = default_tables();
  config.validate(tables);
  std::vector<std::string> styles = config.styles;
  if (styles.empty())
    for (const auto& s : tables.styles) styles.push_back(s.name);

  const CameraRig rig = CameraRig::square(config.resolution);
  const BinningConfig bins;
  OracleBackend oracle(rig, config.render_samples);
  ImageBackend& be = backend ? *backend : oracle;

  std::error_code ec;
  fs::create_directories(out_dir / "records", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "records").string() + ": " + ec.message());

  const int n = config.n;
  std::vector<Synthesised> recs(static_cast<std::size_t>(2 * n));
  const std::vector<std::size_t> shape{3, static_cast<std::size_t>(rig.height), static_cast<std::size_t>(rig.width)};

  auto write_record = [&](int id, const Synthesised& r) {
    const fs::path stem = out_dir / "records" / record_stem(id);
    try {
      save_raw(stem.string() + ".img", r.image);
      save_raw(stem.string() + ".depth", r.depth);
    } catch (...) {
      std::error_code ignored;
      fs::remove(stem.string() + ".img", ignored);
      fs::remove(stem.string() + ".depth", ignored);
      throw;
    }
  };

  parallel_for(static_cast<std::size_t>(n), [&](std::size_t i) {
    const std::uint64_t seed = derive_seed(config.seed, {i});
    Rng rng(seed);
    const SphericalPose nominal = sample_pose(rng, config.yaw, config.pitch);
    const std::string& style = styles[rng.index(styles.size())];
    PromptBundle prompts = compose(style, nominal, rng, tables, config.attributes_per_prompt);
    const CorruptedPose truth = corrupt_pose(nominal, config.misalignment, rng);

    // The guidance image comes from the same avatar rendered at the nominal pose.
    const OracleField field(avatar_for(seed, prompts));
    GenerationRequest req;
    req.pose_image = depth_to_pose_image(render_field(field, nominal, rig, config.render_samples).depth, rig);
    req.pose = nominal;
    req.content_pose = truth.pose;
    req.prompts = prompts;
    req.seed = seed;
    Image img = be.generate(req);
    if (img.channels != 3 || img.height != rig.height || img.width != rig.width)
      throw IoError("backend returned an image of the wrong shape");
    for (float& v : img.data) {
      if (!std::isfinite(v)) throw IoError("backend returned non-finite pixels");
      v = std::clamp(v, 0.0f, 1.0f);
    }

    const int id = static_cast<int>(i);
    Synthesised& a = recs[i];
    a.image = std::move(img);
    a.depth = req.pose_image;
    a.entry = {{"id", id},
               {"shape", shape},
               {"nominal_pose", pose_to_json(nominal)},
               {"true_pose", pose_to_json(truth.pose)},
               {"fine_bins", bins_json(encode(nominal, bins, LabelPart::Fine))},
               {"coarse_bins", bins_json(encode(nominal, bins, LabelPart::Coarse))},
               {"style", style},
               {"prompt_pos", prompts.positive},
               {"prompt_neg", prompts.negative},
               {"seed", seed},
               {"flipped", false}};
    write_record(id, a);

    // Mirrored copy: image flipped left-right, labels from the mirrored pose.
    Synthesised& b = recs[i + static_cast<std::size_t>(n)];
    b.image = flip_horizontal(a.image);
    b.depth = flip_horizontal(a.depth);
    b.entry = a.entry;
    b.entry["id"] = id + n;
    b.entry["nominal_pose"] = pose_to_json(flip_pose(nominal));
    b.entry["true_pose"] = pose_to_json(flip_pose(truth.pose));
    b.entry["fine_bins"] = bins_json(flip_encode(nominal, bins, LabelPart::Fine));
    b.entry["coarse_bins"] = bins_json(flip_encode(nominal, bins, LabelPart::Coarse));
    b.entry["flipped"] = true;
    write_record(id + n, b);
    a.image = a.depth = b.image = b.depth = Image();
  });

  json manifest{{"schema", kSchema},
                {"resolution", config.resolution},
                {"backend", be.name()},
                {"config", synth_config_to_json(config)},
                {"records", json::array()}};
  for (auto& r : recs) manifest["records"].push_back(std::move(r.entry));
  write_file_atomic(out_dir / "manifest.json", manifest.dump(1) + "\n");
  return manifest;
}

Dataset load_dataset(const fs::path& dir, const BinningConfig& bins) {
  json m;
  try {
    m = json::parse(read_file(dir / "manifest.json"));
  } catch (const json::parse_error& e) {
    throw SchemaError((dir / "manifest.json").string() + ": " + e.what());
  }
  const std::string where = (dir / "manifest.json").string();
  check_keys(m, {"schema", "resolution", "backend", "config", "records"}, where);
  if (field<std::string>(m, "schema", where) != kSchema) throw SchemaError(where + ": unsupported schema");
  Dataset ds;
  ds.resolution = field<int>(m, "resolution", where);
  if (ds.resolution < 4) throw SchemaError(where + ": bad resolution");
  if (!m.contains("records") || !m["records"].is_array()) throw SchemaError(where + ": records must be an array");

  std::set<int> ids;
  for (std::size_t k = 0; k < m["records"].size(); ++k) {
    const json& e = m["records"][k];
    const std::string w = where + ": records[" + std::to_string(k) + "]";
    check_keys(e,
               {"id", "shape", "nominal_pose", "true_pose", "fine_bins", "coarse_bins", "style", "prompt_pos",
                "prompt_neg", "seed", "flipped"},
               w);
    DatasetRecord r;
    r.id = field<int>(e, "id", w);
    if (!ids.insert(r.id).second) throw SchemaError(w + ": duplicate id");
    const auto shape = field<std::vector<int>>(e, "shape", w);
    if (shape != std::vector<int>{3, ds.resolution, ds.resolution}) throw SchemaError(w + ": shape mismatch");
    if (!e.contains("nominal_pose") || !e.contains("true_pose")) throw SchemaError(w + ": missing pose");
    r.nominal = pose_from_json(e["nominal_pose"]);
    r.truth = pose_from_json(e["true_pose"]);
    if (!e.contains("fine_bins") || !e.contains("coarse_bins")) throw SchemaError(w + ": missing bins");
    r.fine = bins_from(e["fine_bins"], LabelPart::Fine, bins, w + ".fine_bins");
    r.coarse = bins_from(e["coarse_bins"], LabelPart::Coarse, bins, w + ".coarse_bins");
    r.style = field<std::string>(e, "style", w);
    r.prompt_pos = field<std::string>(e, "prompt_pos", w);
    r.prompt_neg = field<std::string>(e, "prompt_neg", w);
    r.seed = field<std::uint64_t>(e, "seed", w);
    r.flipped = field<bool>(e, "flipped", w);
    r.image = load_raw(dir / "records" / (record_stem(r.id) + ".img"), 3, ds.resolution, ds.resolution);
    for (float v : r.image.data)
      if (!std::isfinite(v)) throw SchemaError(w + ": image has non-finite pixels");
    ds.records.push_back(std::move(r));
  }
  return ds;
}

}  // namespace av
