#include "avatar/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "avatar/checkpoint.hpp"
#include "avatar/errors.hpp"

namespace av {

namespace fs = std::filesystem;
using ad::DType;
using ad::Tensor;
using nlohmann::json;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace {

constexpr const char* kPriorSchema = "avatar-prior/1";
constexpr const char* kPriorConfigSchema = "avatar-prior-config/1";
constexpr std::uint64_t kPairStream = 0x70616972ULL, kTrainStream = 0x74726eULL, kNoiseStream = 0x6e6f6973ULL;

Tensor to_tensor(const Eigen::MatrixXd& m, DType dtype) {
  const RowMat r = m;
  return Tensor::from({static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())},
                      std::span<const double>(r.data(), static_cast<std::size_t>(r.size())), dtype);
}

Eigen::MatrixXd to_matrix(const Tensor& t) {
  const std::vector<double> v = t.values();
  return Eigen::Map<const RowMat>(v.data(), static_cast<Eigen::Index>(t.dim(0)), static_cast<Eigen::Index>(t.dim(1)));
}

template <class F>
void parse_object(const json& j, const std::string& where, F&& on_key) {
  if (!j.is_object()) throw SchemaError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    try {
      if (!on_key(k, v)) throw SchemaError(where + ": unknown key '" + k + "'");
    } catch (const json::exception&) {
      throw SchemaError(where + ": field '" + k + "' has the wrong type");
    }
  }
}

// SiLU, x * sigmoid(x).
Tensor silu(const Tensor& x) { return ad::mul(x, ad::sigmoid(x)); }

std::string layer(int i, const char* what) { return "mlp." + std::to_string(i) + "." + what; }

}  // namespace

NoiseSchedule::NoiseSchedule(int steps, double beta_first, double beta_last) : T_(steps) {
  if (steps < 1) throw std::invalid_argument("noise schedule: at least one step");
  if (!(beta_first > 0 && beta_first <= beta_last && beta_last < 1))
    throw std::invalid_argument("noise schedule: need 0 < beta_first <= beta_last < 1");
  beta_.assign(static_cast<std::size_t>(steps) + 1, 0.0);
  alpha_bar_.assign(static_cast<std::size_t>(steps) + 1, 1.0);
  for (int t = 1; t <= steps; ++t) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(t - 1) / (steps - 1);
    beta_[t] = beta_first + f * (beta_last - beta_first);
    alpha_bar_[t] = alpha_bar_[t - 1] * (1 - beta_[t]);
  }
}

double NoiseSchedule::beta(int t) const {
  if (t < 1 || t > T_) throw std::out_of_range("noise schedule: t must lie in [1, " + std::to_string(T_) + "]");
  return beta_[t];
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 0 || t > T_) throw std::out_of_range("noise schedule: t must lie in [0, " + std::to_string(T_) + "]");
  return alpha_bar_[t];
}

void GuidanceConfig::validate(const NoiseSchedule& s) const {
  if (!std::isfinite(lambda)) throw std::invalid_argument("guidance: lambda must be finite");
  if (!(p_drop >= 0 && p_drop <= 1)) throw std::invalid_argument("guidance: p_drop must lie in [0, 1]");
  if (ddim_steps < 1 || ddim_steps > s.steps())
    throw std::invalid_argument("guidance: ddim_steps must lie in [1, " + std::to_string(s.steps()) + "]");
}

Eigen::MatrixXd q_sample(const NoiseSchedule& s, const Eigen::MatrixXd& w0, int t, const Eigen::MatrixXd& noise) {
  if (t < 1 || t > s.steps()) throw std::out_of_range("q_sample: t must lie in [1, " + std::to_string(s.steps()) + "]");
  if (w0.rows() != noise.rows() || w0.cols() != noise.cols())
    throw std::invalid_argument("q_sample: w0 and noise shapes differ");
  const double ab = s.alpha_bar(t);
  return std::sqrt(ab) * w0 + std::sqrt(1 - ab) * noise;
}

Eigen::MatrixXd guided_eps(const EpsFn& eps, const Eigen::MatrixXd& x, int t, const Eigen::MatrixXd& y,
                           double lambda) {
  const Eigen::MatrixXd null = Eigen::MatrixXd::Zero(y.rows(), y.cols());
  // The skipped term would be multiplied by an exact zero.
  if (lambda == 1) return eps(x, t, y);
  if (lambda == 0) return eps(x, t, null);
  return lambda * eps(x, t, y) + (1 - lambda) * eps(x, t, null);
}

std::vector<int> ddim_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw std::invalid_argument("ddim: steps must lie in [1, T]");
  std::vector<int> ts;
  for (int k = steps; k >= 1; --k)
    ts.push_back(static_cast<int>((static_cast<long long>(k) * T + steps / 2) / steps));
  return ts;
}

Eigen::MatrixXd ddim_sample(const EpsFn& eps, const NoiseSchedule& s, const Eigen::MatrixXd& y, double lambda,
                            int steps, Eigen::MatrixXd x) {
  const std::vector<int> ts = ddim_timesteps(s.steps(), steps);
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const int t = ts[i], next = i + 1 < ts.size() ? ts[i + 1] : 0;
    const double ab = s.alpha_bar(t), ab_next = s.alpha_bar(next);
    const Eigen::MatrixXd e = guided_eps(eps, x, t, y, lambda);
    const Eigen::MatrixXd x0 = (x - std::sqrt(1 - ab) * e) / std::sqrt(ab);
    x = std::sqrt(ab_next) * x0 + std::sqrt(1 - ab_next) * e;
  }
  return x;
}

Eigen::MatrixXd ddpm_sample(const EpsFn& eps, const NoiseSchedule& s, const Eigen::MatrixXd& y, double lambda,
                            Eigen::MatrixXd x, Rng& rng) {
  for (int t = s.steps(); t >= 1; --t) {
    const double b = s.beta(t), ab = s.alpha_bar(t), ab_prev = s.alpha_bar(t - 1);
    const Eigen::MatrixXd e = guided_eps(eps, x, t, y, lambda);
    x = (x - b / std::sqrt(1 - ab) * e) / std::sqrt(1 - b);
    if (t > 1) {
      const double sd = std::sqrt((1 - ab_prev) / (1 - ab) * b);
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] += sd * rng.normal();
    }
  }
  return x;
}

void DenoiserConfig::validate() const {
  if (d_x < 1 || d_y < 1 || hidden < 1 || layers < 1)
    throw std::invalid_argument("denoiser config: sizes must be positive");
  if (time_dim < 2 || time_dim % 2) throw std::invalid_argument("denoiser config: time_dim must be even and >= 2");
}

json denoiser_config_to_json(const DenoiserConfig& c) {
  return {{"d_x", c.d_x}, {"d_y", c.d_y}, {"hidden", c.hidden}, {"layers", c.layers}, {"time_dim", c.time_dim}};
}

DenoiserConfig denoiser_config_from_json(const json& j) {
  DenoiserConfig c;
  parse_object(j, "denoiser config", [&](const std::string& k, const json& v) {
    if (k == "d_x") c.d_x = v.get<int>();
    else if (k == "d_y") c.d_y = v.get<int>();
    else if (k == "hidden") c.hidden = v.get<int>();
    else if (k == "layers") c.layers = v.get<int>();
    else if (k == "time_dim") c.time_dim = v.get<int>();
    else return false;
    return true;
  });
  c.validate();
  return c;
}

ParamSet init_denoiser(const DenoiserConfig& cfg, std::uint64_t seed, DType dtype) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x64656eULL}));
  const auto H = static_cast<std::size_t>(cfg.hidden);
  ParamSet p;
  p.add("in.w", orthogonal(rng, H, static_cast<std::size_t>(cfg.d_x), 1.0, dtype));
  p.add("in.b", Tensor::zeros({H}, dtype));
  p.add("time.w", orthogonal(rng, H, static_cast<std::size_t>(cfg.time_dim), 1.0, dtype));
  // Zero start: the condition pathway only grows from conditioned samples.
  p.add("cond.w", Tensor::zeros({H, static_cast<std::size_t>(cfg.d_y)}, dtype));
  for (int i = 1; i < cfg.layers; ++i) {
    p.add(layer(i, "w"), orthogonal(rng, H, H, 1.0, dtype));
    p.add(layer(i, "b"), Tensor::zeros({H}, dtype));
  }
  p.add("out.w", orthogonal(rng, static_cast<std::size_t>(cfg.d_x), H, 1.0, dtype));
  p.add("out.b", Tensor::zeros({static_cast<std::size_t>(cfg.d_x)}, dtype));
  return p;
}

Tensor time_embedding(std::span<const int> t, int dim, DType dtype) {
  const std::size_t half = static_cast<std::size_t>(dim / 2);
  std::vector<double> v(t.size() * static_cast<std::size_t>(dim));
  for (std::size_t b = 0; b < t.size(); ++b)
    for (std::size_t k = 0; k < half; ++k) {
      const double f = std::exp(-std::log(10000.0) * static_cast<double>(k) / static_cast<double>(half));
      v[b * dim + k] = std::sin(t[b] * f);
      v[b * dim + half + k] = std::cos(t[b] * f);
    }
  return Tensor::from({t.size(), static_cast<std::size_t>(dim)}, v, dtype);
}

Tensor denoise(const DenoiserConfig& cfg, const ParamSet& p, const Tensor& x, std::span<const int> t,
               const Tensor& y) {
  const auto B = x.dim(0);
  if (x.rank() != 2 || x.dim(1) != static_cast<std::size_t>(cfg.d_x) || y.rank() != 2 || y.dim(0) != B ||
      y.dim(1) != static_cast<std::size_t>(cfg.d_y) || t.size() != B)
    throw ad::ShapeError("denoise: expected x (B," + std::to_string(cfg.d_x) + "), y (B," + std::to_string(cfg.d_y) +
                         ") and B timesteps");
  const Tensor te = time_embedding(t, cfg.time_dim, x.dtype());
  Tensor h = ad::add(ad::add(ad::affine(x, p["in.w"], p["in.b"]), ad::affine(te, p["time.w"])),
                     ad::affine(y, p["cond.w"]));
  h = silu(h);
  for (int i = 1; i < cfg.layers; ++i) h = silu(ad::affine(h, p[layer(i, "w")], p[layer(i, "b")]));
  return ad::affine(h, p["out.w"], p["out.b"]);
}

EpsFn eps_fn(const DenoiserConfig& cfg, const ParamSet& p) {
  const DType dtype = p["in.w"].dtype();
  return [cfg, p, dtype](const Eigen::MatrixXd& x, int t, const Eigen::MatrixXd& y) {
    const std::vector<int> ts(static_cast<std::size_t>(x.rows()), t);
    return to_matrix(denoise(cfg, p, to_tensor(x, dtype), ts, to_tensor(y, dtype)));
  };
}

std::size_t drop_conditions(Eigen::MatrixXd& y, double p, Rng& rng) {
  std::size_t dropped = 0;
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    if (rng.bernoulli(p)) {
      y.row(i).setZero();
      ++dropped;
    }
  return dropped;
}

TrainedDenoiser train_denoiser(const DenoiserConfig& cfg, const NoiseSchedule& s, const Eigen::MatrixXd& x,
                               const Eigen::MatrixXd& y, const DenoiserTraining& tr, std::uint64_t seed,
                               const std::function<void(int, double)>& progress) {
  cfg.validate();
  if (x.rows() < 1 || x.rows() != y.rows() || x.cols() != cfg.d_x || y.cols() != cfg.d_y)
    throw std::invalid_argument("train_denoiser: expected paired rows of widths d_x and d_y");
  if (tr.steps < 0 || tr.batch < 1 || !(tr.lr > 0) || !(tr.p_drop >= 0 && tr.p_drop <= 1))
    throw std::invalid_argument("train_denoiser: invalid training schedule");
  TrainedDenoiser out;
  out.params = init_denoiser(cfg, derive_seed(seed, {1}));
  ad::AdamState adam = ad::make_adam(out.params.tensors(), ad::AdamConfig{tr.lr, 0.9, 0.999, 1e-8});
  Rng rng(derive_seed(seed, {kTrainStream}));
  const auto B = static_cast<Eigen::Index>(tr.batch);
  Eigen::MatrixXd xt(B, x.cols()), noise(B, x.cols()), yb(B, y.cols());
  std::vector<int> ts(static_cast<std::size_t>(B));
  for (int step = 0; step < tr.steps; ++step) {
    for (Eigen::Index b = 0; b < B; ++b) {
      const auto i = static_cast<Eigen::Index>(rng.index(static_cast<std::size_t>(x.rows())));
      const int t = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(s.steps())));
      ts[static_cast<std::size_t>(b)] = t;
      for (Eigen::Index c = 0; c < x.cols(); ++c) noise(b, c) = rng.normal();
      const double ab = s.alpha_bar(t);
      xt.row(b) = std::sqrt(ab) * x.row(i) + std::sqrt(1 - ab) * noise.row(b);
      yb.row(b) = y.row(i);
    }
    out.dropped += drop_conditions(yb, tr.p_drop, rng);
    out.seen += static_cast<std::size_t>(B);

    ad::Tape tape;
    const ParamSet pw = out.params.watched(tape);
    const DType dt = out.params["in.w"].dtype();
    const Tensor pred = denoise(cfg, pw, to_tensor(xt, dt), ts, to_tensor(yb, dt));
    const Tensor loss = ad::mean(ad::square(ad::sub(pred, to_tensor(noise, dt))));
    auto grads = tape.gradients(loss, pw.tensors());
    auto params = out.params.tensors();
    ad::adam_step(params, grads, adam);
    out.params.assign(params);
    out.losses.push_back(loss.item());
    if (progress) progress(step, out.losses.back());
  }
  return out;
}

Eigen::MatrixXd encode_condition(const FeatureExtractor& fx, std::span<const Image> front) { return fx.embed(front); }

void PriorConfig::validate() const {
  denoiser.validate();
  guidance.validate(NoiseSchedule());
  if (pairs < 2) throw std::invalid_argument("prior config: at least two pairs");
  if (!(jitter_deg >= 0 && jitter_deg <= 90)) throw std::invalid_argument("prior config: jitter_deg must lie in [0, 90]");
  if (training.steps < 0 || training.batch < 1 || !(training.lr > 0))
    throw std::invalid_argument("prior config: invalid training schedule");
}

json prior_config_to_json(const PriorConfig& c) {
  return {{"schema", kPriorConfigSchema},
          {"denoiser", denoiser_config_to_json(c.denoiser)},
          {"training", {{"steps", c.training.steps}, {"batch", c.training.batch}, {"lr", c.training.lr}}},
          {"guidance", {{"lambda", c.guidance.lambda}, {"p_drop", c.guidance.p_drop}, {"ddim_steps", c.guidance.ddim_steps}}},
          {"pairs", c.pairs},
          {"jitter_deg", c.jitter_deg}};
}

PriorConfig prior_config_from_json(const json& j) {
  PriorConfig c;
  parse_object(j, "prior config", [&](const std::string& k, const json& v) {
    if (k == "schema") {
      if (!v.is_string() || v.get<std::string>() != kPriorConfigSchema)
        throw SchemaError(std::string("prior config: schema must be \"") + kPriorConfigSchema + "\"");
    } else if (k == "denoiser") c.denoiser = denoiser_config_from_json(v);
    else if (k == "training")
      parse_object(v, "prior config.training", [&](const std::string& k2, const json& v2) {
        if (k2 == "steps") c.training.steps = v2.get<int>();
        else if (k2 == "batch") c.training.batch = v2.get<int>();
        else if (k2 == "lr") c.training.lr = v2.get<double>();
        else return false;
        return true;
      });
    else if (k == "guidance")
      parse_object(v, "prior config.guidance", [&](const std::string& k2, const json& v2) {
        if (k2 == "lambda") c.guidance.lambda = v2.get<double>();
        else if (k2 == "p_drop") c.guidance.p_drop = v2.get<double>();
        else if (k2 == "ddim_steps") c.guidance.ddim_steps = v2.get<int>();
        else return false;
        return true;
      });
    else if (k == "pairs") c.pairs = v.get<int>();
    else if (k == "jitter_deg") c.jitter_deg = v.get<double>();
    else return false;
    return true;
  });
  c.validate();
  return c;
}

PriorPairs sample_prior_pairs(const GeneratorConfig& cfg, const ParamSet& g, int n, double jitter_deg,
                              std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("sample_prior_pairs: n must be positive");
  PriorPairs out;
  out.w.resize(n, cfg.d_w);
  constexpr int kChunk = 16;
  for (int start = 0; start < n; start += kChunk) {
    const int b = std::min(kChunk, n - start);
    Rng rng(derive_seed(seed, {kPairStream, static_cast<std::uint64_t>(start)}));
    std::vector<SphericalPose> poses;
    for (int i = 0; i < b; ++i) {
      const double yaw = rng.uniform(-jitter_deg, jitter_deg);
      poses.push_back(SphericalPose::make(yaw, rng.uniform(-jitter_deg, jitter_deg)));
    }
    const Tensor z = sample_z(rng, b, cfg.d_z, g["synth.w"].dtype());
    const Tensor w = map_style(cfg, g, z, gpc_labels(poses, z.dtype()));
    const Tensor rgb = volume_render(cfg, g, synthesize(cfg, g, w), poses).rgb;
    out.w.middleRows(start, b) = to_matrix(w);
    for (int i = 0; i < b; ++i) out.front.push_back(to_image(rgb, static_cast<std::size_t>(i)));
    out.poses.insert(out.poses.end(), poses.begin(), poses.end());
  }
  return out;
}

namespace {

void column_stats(const Eigen::MatrixXd& m, Eigen::VectorXd& mean, Eigen::VectorXd& sd) {
  mean = m.colwise().mean().transpose();
  sd = ((m.rowwise() - mean.transpose()).array().square().colwise().sum() / std::max<Eigen::Index>(1, m.rows() - 1))
           .sqrt()
           .transpose();
  for (Eigen::Index i = 0; i < sd.size(); ++i)
    if (!(sd[i] > 1e-8)) sd[i] = 1.0;
}

Eigen::MatrixXd standardise(const Eigen::MatrixXd& m, const Eigen::VectorXd& mean, const Eigen::VectorXd& sd) {
  return (m.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array();
}

Tensor vec_tensor(const Eigen::VectorXd& v) {
  return Tensor::from({static_cast<std::size_t>(v.size())}, std::span<const double>(v.data(), v.size()), DType::F64);
}

Eigen::VectorXd tensor_vec(const Tensor& t) {
  const auto v = t.values();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace

Eigen::MatrixXd StylePrior::standardise_y(const Eigen::MatrixXd& y_raw) const {
  if (y_raw.cols() != y_mean.size()) throw std::invalid_argument("style prior: condition width mismatch");
  return standardise(y_raw, y_mean, y_std);
}

Eigen::MatrixXd StylePrior::sample(const Eigen::MatrixXd& y_raw, double lambda, int steps, std::uint64_t seed) const {
  const NoiseSchedule s;
  Rng rng(derive_seed(seed, {kNoiseStream}));
  Eigen::MatrixXd xT(y_raw.rows(), config.denoiser.d_x);
  for (Eigen::Index i = 0; i < xT.size(); ++i) xT.data()[i] = rng.normal();
  const Eigen::MatrixXd x = ddim_sample(eps_fn(config.denoiser, params), s, standardise_y(y_raw), lambda, steps, xT);
  return (x.array().rowwise() * w_std.transpose().array()).rowwise() + w_mean.transpose().array();
}

StylePrior train_prior(const GeneratorConfig& gcfg, const ParamSet& g, const PriorConfig& cfg, std::uint64_t seed,
                       const std::function<void(const std::string&)>& progress) {
  cfg.validate();
  if (cfg.denoiser.d_x != gcfg.d_w)
    throw std::invalid_argument("train_prior: denoiser width " + std::to_string(cfg.denoiser.d_x) +
                                " differs from the generator's d_w " + std::to_string(gcfg.d_w));
  const FeatureExtractor fx(FeatureConfig{gcfg.resolution});
  if (cfg.denoiser.d_y != fx.config().dim)
    throw std::invalid_argument("train_prior: denoiser d_y must equal the feature dimension");
  if (progress) progress("rendering " + std::to_string(cfg.pairs) + " pairs");
  const PriorPairs pairs = sample_prior_pairs(gcfg, g, cfg.pairs, cfg.jitter_deg, derive_seed(seed, {kPairStream}));
  const Eigen::MatrixXd y = encode_condition(fx, pairs.front);

  StylePrior prior;
  prior.config = cfg;
  prior.resolution = gcfg.resolution;
  column_stats(pairs.w, prior.w_mean, prior.w_std);
  column_stats(y, prior.y_mean, prior.y_std);
  const NoiseSchedule s;
  DenoiserTraining tr = cfg.training;
  tr.p_drop = cfg.guidance.p_drop;
  const int every = std::max(1, tr.steps / 10);
  TrainedDenoiser t = train_denoiser(
      cfg.denoiser, s, standardise(pairs.w, prior.w_mean, prior.w_std), prior.standardise_y(y), tr,
      derive_seed(seed, {kTrainStream}), [&](int step, double loss) {
        if (progress && (step + 1) % every == 0)
          progress("step " + std::to_string(step + 1) + " loss " + std::to_string(loss));
      });
  prior.params = std::move(t.params);
  prior.losses = std::move(t.losses);
  prior.dropped = t.dropped;
  prior.seen = t.seen;
  return prior;
}

void save_prior(const fs::path& dir, const StylePrior& p) {
  NamedTensors all;
  p.params.append_to(all, "net.");
  all.emplace_back("stats.w_mean", vec_tensor(p.w_mean));
  all.emplace_back("stats.w_std", vec_tensor(p.w_std));
  all.emplace_back("stats.y_mean", vec_tensor(p.y_mean));
  all.emplace_back("stats.y_std", vec_tensor(p.y_std));
  save_checkpoint(dir, all);
  double tail = 0;
  const std::size_t n = std::min<std::size_t>(100, p.losses.size());
  for (std::size_t i = p.losses.size() - n; i < p.losses.size(); ++i) tail += p.losses[i] / static_cast<double>(n);
  const json meta{{"schema", kPriorSchema},
                  {"config", prior_config_to_json(p.config)},
                  {"resolution", p.resolution},
                  {"dropped", p.dropped},
                  {"seen", p.seen},
                  {"final_loss", n ? json(tail) : json(nullptr)}};
  write_file_atomic(dir / "meta.json", meta.dump(1) + "\n");
}

StylePrior load_prior(const fs::path& dir) {
  json meta;
  try {
    meta = json::parse(read_file(dir / "meta.json"));
  } catch (const json::parse_error& e) {
    throw SchemaError((dir / "meta.json").string() + ": " + e.what());
  }
  if (!meta.is_object() || meta.value("schema", "") != kPriorSchema || !meta.contains("config"))
    throw SchemaError((dir / "meta.json").string() + ": not a style prior checkpoint");
  StylePrior p;
  p.config = prior_config_from_json(meta["config"]);
  p.resolution = meta.value("resolution", 32);
  p.dropped = meta.value("dropped", std::size_t{0});
  p.seen = meta.value("seen", std::size_t{0});
  const auto stored = load_checkpoint(dir);
  p.params = init_denoiser(p.config.denoiser, 0);
  p.params.load_from(stored, "net.");
  auto stat = [&](const std::string& name, Eigen::Index n) {
    const auto it = stored.find("stats." + name);
    if (it == stored.end() || it->second.numel() != static_cast<std::size_t>(n))
      throw SchemaError(dir.string() + ": missing or malformed stats." + name);
    return tensor_vec(it->second);
  };
  p.w_mean = stat("w_mean", p.config.denoiser.d_x);
  p.w_std = stat("w_std", p.config.denoiser.d_x);
  p.y_mean = stat("y_mean", p.config.denoiser.d_y);
  p.y_std = stat("y_std", p.config.denoiser.d_y);
  return p;
}

ConditionedAvatar generate_conditioned(const Image& image, const GeneratorConfig& gcfg, const ParamSet& g,
                                       const StylePrior& prior, std::span<const SphericalPose> poses,
                                       std::uint64_t seed, std::optional<double> lambda) {
  if (prior.config.denoiser.d_x != gcfg.d_w)
    throw std::invalid_argument("generate_conditioned: prior produces " + std::to_string(prior.config.denoiser.d_x) +
                                "-dim styles but the generator expects d_w = " + std::to_string(gcfg.d_w));
  if (image.channels != 3 || image.height != prior.resolution || image.width != prior.resolution)
    throw std::invalid_argument("generate_conditioned: condition image must be 3x" + std::to_string(prior.resolution) +
                                "x" + std::to_string(prior.resolution));
  const FeatureExtractor fx(FeatureConfig{prior.resolution});
  const Eigen::MatrixXd y = encode_condition(fx, std::span<const Image>(&image, 1));
  ConditionedAvatar out;
  out.w = prior.sample(y, lambda.value_or(prior.config.guidance.lambda), prior.config.guidance.ddim_steps, seed)
              .row(0)
              .transpose();
  const DType dt = g["synth.w"].dtype();
  out.planes = synthesize(gcfg, g, to_tensor(out.w.transpose(), dt));
  if (!poses.empty()) {
    const Eigen::MatrixXd ws = out.w.transpose().replicate(static_cast<Eigen::Index>(poses.size()), 1);
    const Tensor rgb = volume_render(gcfg, g, synthesize(gcfg, g, to_tensor(ws, dt)), poses).rgb;
    for (std::size_t i = 0; i < poses.size(); ++i) out.views.push_back(to_image(rgb, i));
  }
  return out;
}

PairedSimilarity paired_similarity(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, int permutations,
                                   std::uint64_t seed) {
  if (a.rows() != b.rows() || a.cols() != b.cols() || a.rows() < 2)
    throw std::invalid_argument("paired_similarity: need two equally shaped matrices with at least 2 rows");
  if (permutations < 1) throw std::invalid_argument("paired_similarity: permutations must be positive");
  const Eigen::RowVectorXd centre = 0.5 * (a.colwise().mean() + b.colwise().mean());
  auto unit_rows = [&](const Eigen::MatrixXd& m) {
    Eigen::MatrixXd u = m.rowwise() - centre;
    for (Eigen::Index i = 0; i < u.rows(); ++i) {
      const double n = u.row(i).norm();
      if (n > 0) u.row(i) /= n;
    }
    return u;
  };
  const Eigen::MatrixXd ua = unit_rows(a), ub = unit_rows(b);
  const Eigen::MatrixXd sim = ua * ub.transpose();
  const auto n = static_cast<std::size_t>(a.rows());
  PairedSimilarity out;
  out.matched = sim.diagonal().mean();
  Rng rng(seed);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  int at_least = 0;
  double total = 0;
  for (int k = 0; k < permutations; ++k) {
    for (std::size_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.index(i + 1)]);
    double m = 0;
    for (std::size_t i = 0; i < n; ++i)
      m += sim(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(perm[i]));
    m /= static_cast<double>(n);
    total += m;
    at_least += m >= out.matched;
  }
  out.shuffled = total / permutations;
  out.p_value = (1.0 + at_least) / (1.0 + permutations);
  return out;
}

}  // namespace av
