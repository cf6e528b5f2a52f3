#include "avatar/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "avatar/checkpoint.hpp"
#include "avatar/errors.hpp"

namespace av {

namespace fs = std::filesystem;
using ad::DType;
using ad::Tensor;
using nlohmann::json;

namespace {

constexpr const char* kConfigSchema = "avatar-train/1";
constexpr const char* kCheckpointSchema = "avatar-ckpt/1";
constexpr std::uint64_t kIterStream = 0x69746572ULL;
constexpr std::uint64_t kFdStream = 0x6664ULL;
constexpr std::uint64_t kEvalStream = 0x6576616cULL;
constexpr std::uint64_t kInitG = 0x47ULL, kInitD = 0x44ULL;

template <class T>
void get_field(const json& j, const std::string& key, T& dst, const std::string& where) {
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw SchemaError(where + ": field '" + key + "' has the wrong type");
  }
}

void require_object(const json& j, const std::string& where) {
  if (!j.is_object()) throw SchemaError(where + ": expected an object");
}

json schedule_to_json(const Schedule& s) {
  return {{"iterations", s.iterations}, {"batch", s.batch},         {"g_lr", s.g_lr},
          {"d_lr", s.d_lr},             {"beta1", s.beta1},         {"beta2", s.beta2},
          {"ema_decay", s.ema_decay},   {"checkpoint_every", s.checkpoint_every},
          {"fd_every", s.fd_every},     {"fd_samples", s.fd_samples}};
}

Schedule schedule_from_json(const json& j) {
  const std::string where = "train config.schedule";
  require_object(j, where);
  Schedule s;
  for (const auto& [k, v] : j.items()) {
    if (k == "iterations") get_field(j, k, s.iterations, where);
    else if (k == "batch") get_field(j, k, s.batch, where);
    else if (k == "g_lr") get_field(j, k, s.g_lr, where);
    else if (k == "d_lr") get_field(j, k, s.d_lr, where);
    else if (k == "beta1") get_field(j, k, s.beta1, where);
    else if (k == "beta2") get_field(j, k, s.beta2, where);
    else if (k == "ema_decay") get_field(j, k, s.ema_decay, where);
    else if (k == "checkpoint_every") get_field(j, k, s.checkpoint_every, where);
    else if (k == "fd_every") get_field(j, k, s.fd_every, where);
    else if (k == "fd_samples") get_field(j, k, s.fd_samples, where);
    else throw SchemaError(where + ": unknown key '" + k + "'");
  }
  return s;
}

json policy_to_json(const LabelPolicy& p) {
  return {{"mode", label_mode_name(p.mode)},
          {"yaw_box", p.confidence.yaw_box},
          {"pitch_box", p.confidence.pitch_box},
          {"p_high", p.confidence.p_high},
          {"p_low", p.confidence.p_low}};
}

LabelPolicy policy_from_json(const json& j) {
  const std::string where = "train config.policy";
  require_object(j, where);
  LabelPolicy p;
  for (const auto& [k, v] : j.items()) {
    if (k == "mode") {
      std::string m;
      get_field(j, k, m, where);
      p.mode = label_mode_from_name(m);
    } else if (k == "yaw_box") get_field(j, k, p.confidence.yaw_box, where);
    else if (k == "pitch_box") get_field(j, k, p.confidence.pitch_box, where);
    else if (k == "p_high") get_field(j, k, p.confidence.p_high, where);
    else if (k == "p_low") get_field(j, k, p.confidence.p_low, where);
    else throw SchemaError(where + ": unknown key '" + k + "'");
  }
  return p;
}

// Everything a checkpoint restores.
struct TrainState {
  ParamSet g, d, ema;
  ad::AdamState adam_g, adam_d;
  int iteration = 0;
};

ad::AdamConfig adam_config(const Schedule& s, double lr) { return {lr, s.beta1, s.beta2, 1e-8}; }

void append_adam(NamedTensors& out, const ParamSet& names, const ad::AdamState& st, const std::string& prefix) {
  for (std::size_t i = 0; i < names.items().size(); ++i) {
    out.emplace_back(prefix + "m." + names.items()[i].first, st.m[i]);
    out.emplace_back(prefix + "v." + names.items()[i].first, st.v[i]);
  }
}

void load_adam(const std::map<std::string, Tensor>& stored, const ParamSet& names, ad::AdamState& st,
               const std::string& prefix) {
  for (std::size_t i = 0; i < names.items().size(); ++i) {
    const std::string& n = names.items()[i].first;
    const auto m = stored.find(prefix + "m." + n), v = stored.find(prefix + "v." + n);
    if (m == stored.end() || v == stored.end()) throw SchemaError("checkpoint lacks optimiser state for " + n);
    if (m->second.shape() != st.m[i].shape() || v->second.shape() != st.v[i].shape())
      throw SchemaError("checkpoint optimiser state for " + n + " has the wrong shape");
    st.m[i] = m->second;
    st.v[i] = v->second;
  }
}

void save_state(const fs::path& ckpt, const TrainState& s, const TrainConfig& cfg, std::uint64_t seed) {
  NamedTensors all;
  s.g.append_to(all, "G.");
  s.d.append_to(all, "D.");
  s.ema.append_to(all, "E.");
  append_adam(all, s.g, s.adam_g, "adam_g.");
  append_adam(all, s.d, s.adam_d, "adam_d.");
  const fs::path tmp = ckpt.string() + ".tmp", old = ckpt.string() + ".old";
  fs::remove_all(tmp);
  save_checkpoint(tmp, all);
  const json meta{{"schema", kCheckpointSchema},
                  {"iteration", s.iteration},
                  {"seed", seed},
                  {"adam_g_step", s.adam_g.step},
                  {"adam_d_step", s.adam_d.step},
                  {"generator", generator_config_to_json(cfg.generator)},
                  {"discriminator", disc_config_to_json(cfg.discriminator)}};
  write_file_atomic(tmp / "meta.json", meta.dump(1) + "\n");
  // Swap in the new checkpoint; the old one survives until the new one is in place.
  fs::remove_all(old);
  if (fs::exists(ckpt)) fs::rename(ckpt, old);
  fs::rename(tmp, ckpt);
  fs::remove_all(old);
}

json read_meta(const fs::path& ckpt) {
  try {
    json m = json::parse(read_file(ckpt / "meta.json"));
    if (!m.is_object() || m.value("schema", "") != kCheckpointSchema)
      throw SchemaError((ckpt / "meta.json").string() + ": unsupported checkpoint schema");
    return m;
  } catch (const json::parse_error& e) {
    throw SchemaError((ckpt / "meta.json").string() + ": " + e.what());
  }
}

TrainState fresh_state(const TrainConfig& cfg, std::uint64_t seed) {
  TrainState s;
  s.g = init_generator(cfg.generator, derive_seed(seed, {kInitG}));
  s.d = init_discriminator(cfg.discriminator, derive_seed(seed, {kInitD}));
  s.ema = s.g;
  s.adam_g = ad::make_adam(s.g.tensors(), adam_config(cfg.schedule, cfg.schedule.g_lr));
  s.adam_d = ad::make_adam(s.d.tensors(), adam_config(cfg.schedule, cfg.schedule.d_lr));
  return s;
}

TrainState load_state(const fs::path& ckpt, const TrainConfig& cfg, std::uint64_t seed) {
  const json meta = read_meta(ckpt);
  if (meta.value("seed", std::uint64_t{0}) != seed)
    throw std::invalid_argument("resume: checkpoint was trained with a different seed");
  TrainState s = fresh_state(cfg, seed);
  const auto stored = load_checkpoint(ckpt);
  s.g.load_from(stored, "G.");
  s.d.load_from(stored, "D.");
  s.ema.load_from(stored, "E.");
  load_adam(stored, s.g, s.adam_g, "adam_g.");
  load_adam(stored, s.d, s.adam_d, "adam_d.");
  s.adam_g.step = meta.at("adam_g_step").get<std::int64_t>();
  s.adam_d.step = meta.at("adam_d_step").get<std::int64_t>();
  s.iteration = meta.at("iteration").get<int>();
  return s;
}

// Keeps the first n lines of the log (those written before the checkpoint).
void truncate_log(const fs::path& log, int n) {
  std::string kept;
  if (fs::exists(log)) {
    std::istringstream in(read_file(log));
    std::string line;
    for (int i = 0; i < n && std::getline(in, line); ++i) kept += line + "\n";
  }
  write_file_atomic(log, kept);
}

Tensor image_batch(const Dataset& data, const std::vector<std::size_t>& idx) {
  const auto R = static_cast<std::size_t>(data.resolution);
  std::vector<float> v;
  v.reserve(idx.size() * 3 * R * R);
  for (std::size_t i : idx) {
    const auto& d = data.records[i].image.data;
    v.insert(v.end(), d.begin(), d.end());
  }
  return Tensor({idx.size(), 3, R, R}, std::move(v));
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

const char* label_mode_name(LabelMode m) {
  switch (m) {
    case LabelMode::CoarseToFine: return "cof";
    case LabelMode::FineOnly: return "fine_only";
    case LabelMode::CoarseOnly: return "coarse_only";
  }
  return "?";
}

LabelMode label_mode_from_name(const std::string& s) {
  if (s == "cof") return LabelMode::CoarseToFine;
  if (s == "fine_only") return LabelMode::FineOnly;
  if (s == "coarse_only") return LabelMode::CoarseOnly;
  throw SchemaError("label mode must be cof, fine_only or coarse_only, got \"" + s + "\"");
}

LabelPart LabelPolicy::draw(const SphericalPose& pose, Rng& rng) const {
  switch (mode) {
    case LabelMode::FineOnly: return LabelPart::Fine;
    case LabelMode::CoarseOnly: return LabelPart::Coarse;
    case LabelMode::CoarseToFine: break;
  }
  return sample_part(pose, confidence, rng);
}

void Schedule::validate() const {
  if (iterations < 0) throw std::invalid_argument("schedule: iterations must be >= 0");
  if (batch < 1) throw std::invalid_argument("schedule: batch must be >= 1");
  if (!(g_lr > 0) || !(d_lr > 0)) throw std::invalid_argument("schedule: learning rates must be positive");
  if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1))
    throw std::invalid_argument("schedule: Adam betas must lie in [0, 1)");
  if (!(ema_decay >= 0 && ema_decay < 1)) throw std::invalid_argument("schedule: ema_decay must lie in [0, 1)");
  if (checkpoint_every < 0 || fd_every < 0) throw std::invalid_argument("schedule: intervals must be >= 0");
  if (fd_samples < 2) throw std::invalid_argument("schedule: fd_samples must be >= 2");
}

void TrainConfig::validate() const {
  generator.validate();
  discriminator.validate();
  schedule.validate();
  policy.confidence.validate();
  if (generator.resolution != discriminator.resolution)
    throw std::invalid_argument("train config: generator and discriminator resolutions differ");
}

json train_config_to_json(const TrainConfig& c) {
  return {{"schema", kConfigSchema},
          {"generator", generator_config_to_json(c.generator)},
          {"discriminator", disc_config_to_json(c.discriminator)},
          {"schedule", schedule_to_json(c.schedule)},
          {"policy", policy_to_json(c.policy)}};
}

TrainConfig train_config_from_json(const json& j) {
  const std::string where = "train config";
  require_object(j, where);
  TrainConfig c;
  for (const auto& [k, v] : j.items()) {
    if (k == "schema") {
      if (!v.is_string() || v.get<std::string>() != kConfigSchema)
        throw SchemaError(where + ": schema must be \"" + kConfigSchema + "\"");
    } else if (k == "generator") c.generator = generator_config_from_json(v);
    else if (k == "discriminator") c.discriminator = disc_config_from_json(v);
    else if (k == "schedule") c.schedule = schedule_from_json(v);
    else if (k == "policy") c.policy = policy_from_json(v);
    else throw SchemaError(where + ": unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

json iteration_log_to_json(const IterationLog& l) {
  json j{{"iter", l.iteration},
         {"d_loss", l.d_loss},
         {"g_loss", l.g_loss},
         {"r1", l.r1},
         {"real_logit", l.real_logit},
         {"fake_logit", l.fake_logit},
         {"confident_real", l.confident_real},
         {"confident_real_fine", l.confident_real_fine},
         {"fine_real", l.fine_real},
         {"fine_fake", l.fine_fake}};
  if (l.fd) j["fd"] = *l.fd;
  return j;
}

TrainResult train(const Dataset& data, const TrainConfig& cfg, std::uint64_t seed, const fs::path& run_dir,
                  const TrainOptions& opts) {
  cfg.validate();
  if (data.records.empty()) throw std::invalid_argument("train: dataset is empty");
  if (data.resolution != cfg.generator.resolution)
    throw std::invalid_argument("train: dataset resolution " + std::to_string(data.resolution) +
                                " differs from the generator's " + std::to_string(cfg.generator.resolution));
  const Schedule& sched = cfg.schedule;
  const GeneratorConfig& gcfg = cfg.generator;
  const DiscConfig& dcfg = cfg.discriminator;
  const BinningConfig bins;

  fs::create_directories(run_dir);
  const fs::path ckpt = run_dir / "ckpt", log_path = run_dir / "log.jsonl";
  const json config_doc{{"train", train_config_to_json(cfg)}, {"seed", seed}, {"records", data.records.size()}};

  TrainState st;
  if (opts.resume && fs::exists(ckpt / "meta.json")) {
    const json saved = json::parse(read_file(run_dir / "config.json"));
    if (saved != config_doc) throw std::invalid_argument("resume: configuration differs from the stored run");
    st = load_state(ckpt, cfg, seed);
    truncate_log(log_path, st.iteration);
  } else {
    st = fresh_state(cfg, seed);
    write_file_atomic(run_dir / "config.json", config_doc.dump(1) + "\n");
    write_file_atomic(log_path, "");
  }

  std::optional<FeatureExtractor> fx;
  std::optional<ReferenceStats> ref;
  if (sched.fd_every > 0) {
    fx.emplace(FeatureConfig{gcfg.resolution});
    ref = reference_stats(*fx, data);
  }

  std::ofstream log(log_path, std::ios::app);
  if (!log) throw IoError("cannot open " + log_path.string());

  const std::size_t N = data.records.size();
  const auto B = static_cast<std::size_t>(sched.batch);
  TrainResult result;
  result.checkpoint = ckpt;
  for (int it = st.iteration; it < sched.iterations; ++it) {
    Rng rng(derive_seed(seed, {kIterStream, static_cast<std::uint64_t>(it)}));
    IterationLog row;
    row.iteration = it;

    // Reals: label granularity drawn afresh for every image at every iteration.
    std::vector<std::size_t> idx(B);
    std::vector<PoseLabel> real_labels(B);
    for (std::size_t b = 0; b < B; ++b) {
      idx[b] = rng.index(N);
      const DatasetRecord& r = data.records[idx[b]];
      const LabelPart part = cfg.policy.draw(r.nominal, rng);
      real_labels[b] = part == LabelPart::Fine ? r.fine : r.coarse;
      const bool confident = is_confident(r.nominal, cfg.policy.confidence);
      row.confident_real += confident;
      row.confident_real_fine += confident && part == LabelPart::Fine;
      row.fine_real += part == LabelPart::Fine;
    }

    // Fakes: rendering poses follow the dataset's pose distribution; the
    // conditioning pose is swapped for another with gpc_swap_prob.
    std::vector<SphericalPose> views(B), cond(B);
    std::vector<PoseLabel> fake_labels(B);
    for (std::size_t b = 0; b < B; ++b) {
      views[b] = data.records[rng.index(N)].nominal;
      cond[b] = views[b];
      if (rng.bernoulli(gcfg.gpc_swap_prob)) cond[b] = data.records[rng.index(N)].nominal;
      const LabelPart part = cfg.policy.draw(views[b], rng);
      fake_labels[b] = encode(views[b], bins, part);
      row.fine_fake += part == LabelPart::Fine;
    }
    const Tensor z = sample_z(rng, sched.batch, gcfg.d_z);

    try {
      ad::Tape g_tape;
      const ParamSet gp = st.g.watched(g_tape);
      const Tensor fake = generate(gcfg, gp, z, gpc_labels(cond), views).rgb;
      const Tensor real = image_batch(data, idx);
      const Tensor rl = label_batch(real_labels, bins), fl = label_batch(fake_labels, bins);

      {
        ad::Tape d_tape;
        const ParamSet dp = st.d.watched(d_tape);
        const DLoss dl = d_loss(dcfg, dp, d_tape, real, rl, fake.detach(), fl, dcfg.r1_gamma);
        auto grads = d_tape.gradients(dl.total, dp.tensors());
        auto params = st.d.tensors();
        ad::adam_step(params, grads, st.adam_d);
        st.d.assign(params);
        row.d_loss = dl.total.item();
        row.r1 = dl.r1;
        row.real_logit = dl.real_logit;
        row.fake_logit = dl.fake_logit;
      }

      const Tensor gl = g_loss(discriminate(dcfg, st.d, fake, fl));
      auto grads = g_tape.gradients(gl, gp.tensors());
      auto params = st.g.tensors();
      ad::adam_step(params, grads, st.adam_g);
      st.g.assign(params);
      row.g_loss = gl.item();
      ema_update(st.ema, st.g, sched.ema_decay);
    } catch (const ad::NonFiniteError& e) {
      throw TrainingDiverged("iteration " + std::to_string(it) + ": " + e.what() +
                             (fs::exists(ckpt) ? "; last good checkpoint at iteration " +
                                                     std::to_string(read_meta(ckpt).at("iteration").get<int>())
                                               : "; no checkpoint written yet"));
    }
    st.iteration = it + 1;

    if (sched.fd_every > 0 && st.iteration % sched.fd_every == 0) {
      GeneratorSource src(gcfg, st.ema);
      row.fd = eval_protocol(src, *ref, *fx, static_cast<std::size_t>(sched.fd_samples),
                             derive_seed(seed, {kFdStream, static_cast<std::uint64_t>(it)}))
                   .overall;
    }
    log << iteration_log_to_json(row).dump() << "\n";
    log.flush();
    if (opts.on_iteration) opts.on_iteration(row);

    const bool last = st.iteration == sched.iterations;
    if (last || (sched.checkpoint_every > 0 && st.iteration % sched.checkpoint_every == 0))
      save_state(ckpt, st, cfg, seed);
    if (opts.stop_after && st.iteration >= *opts.stop_after) break;
  }
  if (sched.iterations == 0 || !fs::exists(ckpt)) save_state(ckpt, st, cfg, seed);
  result.iterations_done = st.iteration;
  return result;
}

GeneratorCheckpoint load_generator(const fs::path& ckpt_dir) {
  const json meta = read_meta(ckpt_dir);
  GeneratorCheckpoint g;
  if (!meta.contains("generator")) throw SchemaError((ckpt_dir / "meta.json").string() + ": missing generator config");
  g.config = generator_config_from_json(meta["generator"]);
  g.iteration = meta.value("iteration", 0);
  const auto stored = load_checkpoint(ckpt_dir);
  g.ema = init_generator(g.config, 0);
  g.ema.load_from(stored, "E.");
  return g;
}

json ablation(const Dataset& data, const TrainConfig& base, const fs::path& out_dir, const AblationOptions& opts) {
  if (opts.seeds.size() < 3) throw std::invalid_argument("ablation: at least 3 seeds are required");
  if (opts.variants.empty()) throw std::invalid_argument("ablation: no variants");
  const FeatureExtractor fx(FeatureConfig{base.generator.resolution});
  const ReferenceStats ref = reference_stats(fx, data);

  json runs = json::array();
  json medians = json::object(), spread = json::object();
  for (LabelMode mode : opts.variants) {
    TrainConfig cfg = base;
    cfg.policy.mode = mode;
    std::vector<double> overall;
    std::array<std::vector<double>, 3> per;
    for (std::uint64_t seed : opts.seeds) {
      const fs::path dir = out_dir / label_mode_name(mode) / ("seed_" + std::to_string(seed));
      if (opts.progress) opts.progress(std::string(label_mode_name(mode)) + " seed " + std::to_string(seed));
      TrainOptions topts;
      topts.resume = opts.resume;
      train(data, cfg, seed, dir, topts);
      const GeneratorCheckpoint g = load_generator(dir / "ckpt");
      GeneratorSource src(g.config, g.ema);
      // Same evaluation stream for every variant at a given seed.
      const FdScore s = eval_protocol(src, ref, fx, static_cast<std::size_t>(opts.eval_samples),
                                      derive_seed(seed, {kEvalStream}));
      write_file_atomic(dir / "score.json", fd_score_to_json(s).dump(1) + "\n");
      runs.push_back({{"variant", label_mode_name(mode)}, {"seed", seed}, {"score", fd_score_to_json(s)}});
      overall.push_back(s.overall);
      for (int b = 0; b < 3; ++b)
        if (s.per_bucket[b]) per[b].push_back(*s.per_bucket[b]);
    }
    json m{{"overall", median(overall)}};
    for (ViewBucket b : kViewBuckets) {
      const auto& v = per[static_cast<int>(b)];
      m[bucket_name(b)] = v.empty() ? json(nullptr) : json(median(v));
    }
    medians[label_mode_name(mode)] = m;
    spread[label_mode_name(mode)] =
        *std::max_element(overall.begin(), overall.end()) - *std::min_element(overall.begin(), overall.end());
  }
  json report{{"schema", "avatar-ablation/1"},
              {"seeds", opts.seeds},
              {"eval_samples", opts.eval_samples},
              {"config", train_config_to_json(base)},
              {"runs", runs},
              {"median", medians},
              {"spread", spread}};
  fs::create_directories(out_dir);
  write_file_atomic(out_dir / "report.json", report.dump(1) + "\n");
  return report;
}

}  // namespace av
