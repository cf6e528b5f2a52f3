#include "avatar/generator.hpp"

#include <algorithm>
#include <cmath>

#include "autodiff/dispatch.hpp"
#include "avatar/errors.hpp"

namespace av {

using ad::DType;
using ad::Shape;
using ad::Tensor;
using nlohmann::json;

CameraRig GeneratorConfig::rig() const {
  CameraRig r = CameraRig::square(resolution);
  r.near = near;
  r.far = far;
  return r;
}

void GeneratorConfig::validate() const {
  if (d_z < 1 || d_w < 1 || mapping_hidden < 1 || plane_channels < 1 || decoder_hidden < 1)
    throw std::invalid_argument("generator: widths must be positive");
  if (mapping_layers < 1) throw std::invalid_argument("generator: mapping_layers must be >= 1");
  if (plane_res < 2) throw std::invalid_argument("generator: plane_res must be >= 2");
  if (resolution < 2) throw std::invalid_argument("generator: resolution must be >= 2");
  if (samples_per_ray < 2) throw std::invalid_argument("generator: samples_per_ray must be >= 2");
  if (!(near > 0 && near < far)) throw std::invalid_argument("generator: need 0 < near < far");
  if (!(gpc_swap_prob >= 0 && gpc_swap_prob <= 1)) throw std::invalid_argument("generator: gpc_swap_prob in [0, 1]");
  if (!(cull_radius > 0)) throw std::invalid_argument("generator: cull_radius must be positive");
}

json generator_config_to_json(const GeneratorConfig& c) {
  return {{"d_z", c.d_z},
          {"d_w", c.d_w},
          {"mapping_layers", c.mapping_layers},
          {"mapping_hidden", c.mapping_hidden},
          {"plane_channels", c.plane_channels},
          {"plane_res", c.plane_res},
          {"decoder_hidden", c.decoder_hidden},
          {"resolution", c.resolution},
          {"samples_per_ray", c.samples_per_ray},
          {"near", c.near},
          {"far", c.far},
          {"gpc_swap_prob", c.gpc_swap_prob},
          {"background", c.background},
          {"cull_radius", c.cull_radius}};
}

GeneratorConfig generator_config_from_json(const json& j) {
  if (!j.is_object()) throw SchemaError("generator config: expected an object");
  GeneratorConfig c;
  auto get = [&](const std::string& k, auto& dst) {
    try {
      dst = j.at(k).get<std::decay_t<decltype(dst)>>();
    } catch (const json::exception&) {
      throw SchemaError("generator config: field '" + k + "' has the wrong type");
    }
  };
  for (const auto& [k, v] : j.items()) {
    if (k == "d_z") get(k, c.d_z);
    else if (k == "d_w") get(k, c.d_w);
    else if (k == "mapping_layers") get(k, c.mapping_layers);
    else if (k == "mapping_hidden") get(k, c.mapping_hidden);
    else if (k == "plane_channels") get(k, c.plane_channels);
    else if (k == "plane_res") get(k, c.plane_res);
    else if (k == "decoder_hidden") get(k, c.decoder_hidden);
    else if (k == "resolution") get(k, c.resolution);
    else if (k == "samples_per_ray") get(k, c.samples_per_ray);
    else if (k == "near") get(k, c.near);
    else if (k == "far") get(k, c.far);
    else if (k == "gpc_swap_prob") get(k, c.gpc_swap_prob);
    else if (k == "background") get(k, c.background);
    else if (k == "cull_radius") get(k, c.cull_radius);
    else throw SchemaError("generator config: unknown key '" + k + "'");
  }
  c.validate();
  return c;
}

namespace {

std::string layer(const char* net, int i, const char* what) {
  return std::string(net) + "." + std::to_string(i) + "." + what;
}

std::size_t plane_numel(const GeneratorConfig& c) {
  return 3 * static_cast<std::size_t>(c.plane_channels) * c.plane_res * c.plane_res;
}

}  // namespace

ParamSet init_generator(const GeneratorConfig& cfg, std::uint64_t seed, DType dtype) {
  cfg.validate();
  Rng rng(derive_seed(seed, {0x67656eULL}));
  ParamSet p;
  const double relu_gain = std::sqrt(2.0 / (1.0 + 0.2 * 0.2));
  std::size_t in = static_cast<std::size_t>(cfg.d_z + cfg.gpc_dim());
  for (int i = 0; i < cfg.mapping_layers; ++i) {
    const bool last = i + 1 == cfg.mapping_layers;
    const std::size_t out = static_cast<std::size_t>(last ? cfg.d_w : cfg.mapping_hidden);
    p.add(layer("map", i, "w"), orthogonal(rng, out, in, last ? 1.0 : relu_gain, dtype));
    p.add(layer("map", i, "b"), Tensor::zeros({out}, dtype));
    in = out;
  }
  // Tall orthonormal columns scaled so unit-variance w gives unit-variance planes.
  const std::size_t np = plane_numel(cfg);
  p.add("synth.w", orthogonal(rng, np, static_cast<std::size_t>(cfg.d_w),
                              std::sqrt(static_cast<double>(np) / cfg.d_w), dtype));
  p.add("synth.b", Tensor::zeros({np}, dtype));
  const auto C = static_cast<std::size_t>(cfg.plane_channels), H = static_cast<std::size_t>(cfg.decoder_hidden);
  p.add("dec.0.w", orthogonal(rng, H, C, 1.0, dtype));
  p.add("dec.0.b", Tensor::zeros({H}, dtype));
  p.add("dec.1.w", orthogonal(rng, 4, H, 1.0, dtype));
  p.add("dec.1.b", Tensor::zeros({4}, dtype));
  return p;
}

Tensor map_style(const GeneratorConfig& cfg, const ParamSet& p, const Tensor& z, const Tensor& gpc) {
  if (z.rank() != 2 || gpc.rank() != 2 || z.dim(0) != gpc.dim(0) || z.dim(1) != static_cast<std::size_t>(cfg.d_z) ||
      gpc.dim(1) != static_cast<std::size_t>(cfg.gpc_dim()))
    throw ad::ShapeError("map_style: expected z (B," + std::to_string(cfg.d_z) + ") and gpc (B," +
                         std::to_string(cfg.gpc_dim()) + "), got " + ad::to_string(z.shape()) + " and " +
                         ad::to_string(gpc.shape()));
  Tensor h = ad::concat({z, gpc}, 1);
  for (int i = 0; i < cfg.mapping_layers; ++i) {
    h = ad::affine(h, p[layer("map", i, "w")], p[layer("map", i, "b")]);
    if (i + 1 < cfg.mapping_layers) h = ad::leaky_relu(h, 0.2);
  }
  return h;
}

Tensor synthesize(const GeneratorConfig& cfg, const ParamSet& p, const Tensor& w) {
  if (w.rank() != 2 || w.dim(1) != static_cast<std::size_t>(cfg.d_w))
    throw ad::ShapeError("synthesize: expected w (B," + std::to_string(cfg.d_w) + "), got " + ad::to_string(w.shape()));
  const Tensor flat = ad::affine(w, p["synth.w"], p["synth.b"]);
  const auto C = static_cast<std::size_t>(cfg.plane_channels), R = static_cast<std::size_t>(cfg.plane_res);
  return ad::reshape(flat, {w.dim(0), 3, C, R, R});
}

// ---------------------------------------------------------------------------

namespace {

struct Tap {
  std::size_t i00, i01, i10, i11;
  double fx, fy;
  double du, dv;  // d(texel coordinate)/d(point coordinate), zero when clamped
};

Tap tap(double u, double v, std::size_t R) {
  const double s = 0.5 * static_cast<double>(R - 1);
  Tap t{};
  t.du = (u >= -1 && u <= 1) ? s : 0.0;
  t.dv = (v >= -1 && v <= 1) ? s : 0.0;
  const double px = std::clamp((u + 1) * s, 0.0, static_cast<double>(R - 1));
  const double py = std::clamp((v + 1) * s, 0.0, static_cast<double>(R - 1));
  const std::size_t x0 = std::min(static_cast<std::size_t>(px), R - 2);
  const std::size_t y0 = std::min(static_cast<std::size_t>(py), R - 2);
  t.fx = px - static_cast<double>(x0);
  t.fy = py - static_cast<double>(y0);
  t.i00 = y0 * R + x0;
  t.i01 = t.i00 + 1;
  t.i10 = t.i00 + R;
  t.i11 = t.i10 + 1;
  return t;
}

// Plane k is indexed by point axes (a, b): width coordinate a, height b.
constexpr int kAxes[3][2] = {{0, 1}, {0, 2}, {1, 2}};

struct PlaneDims {
  std::size_t B, C, R;
};

PlaneDims plane_dims(const Tensor& planes) {
  if (planes.rank() != 5 || planes.dim(1) != 3 || planes.dim(3) != planes.dim(4) || planes.dim(3) < 2)
    throw ad::ShapeError("sample_triplane: planes must be (B,3,C,R,R) with R >= 2, got " +
                         ad::to_string(planes.shape()));
  return {planes.dim(0), planes.dim(2), planes.dim(3)};
}

}  // namespace

Tensor sample_triplane(const Tensor& planes, const Tensor& points, std::span<const int> batch) {
  ad::require_same_dtype(planes, points, "sample_triplane");
  const PlaneDims d = plane_dims(planes);
  if (points.rank() != 2 || points.dim(1) != 3 || points.dim(0) != batch.size())
    throw ad::ShapeError("sample_triplane: points must be (P,3) with one batch index each");
  for (int b : batch)
    if (b < 0 || static_cast<std::size_t>(b) >= d.B) throw ad::ShapeError("sample_triplane: batch index out of range");
  const std::size_t P = points.dim(0), RR = d.R * d.R;
  const std::vector<int> bidx(batch.begin(), batch.end());

  Tensor out = ad::dispatch(planes.dtype(), [&]<class T>() {
    auto PL = planes.data<T>();
    auto X = points.data<T>();
    std::vector<T> o(P * d.C);
    std::vector<double> acc(d.C);
    for (std::size_t n = 0; n < P; ++n) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (int k = 0; k < 3; ++k) {
        const Tap t = tap(X[3 * n + kAxes[k][0]], X[3 * n + kAxes[k][1]], d.R);
        const double w00 = (1 - t.fx) * (1 - t.fy), w01 = t.fx * (1 - t.fy), w10 = (1 - t.fx) * t.fy,
                     w11 = t.fx * t.fy;
        const T* base = &PL[(static_cast<std::size_t>(bidx[n]) * 3 + k) * d.C * RR];
        for (std::size_t c = 0; c < d.C; ++c) {
          const T* q = base + c * RR;
          acc[c] += w00 * q[t.i00] + w01 * q[t.i01] + w10 * q[t.i10] + w11 * q[t.i11];
        }
      }
      for (std::size_t c = 0; c < d.C; ++c) o[n * d.C + c] = static_cast<T>(acc[c]);
    }
    return ad::make_tensor<T>({P, d.C}, std::move(o), "sample_triplane");
  });

  return ad::maybe_record(
      "sample_triplane", {planes, points}, out,
      [planes, points, bidx, d](const Tensor& g, const std::vector<bool>& needs, bool graph) {
        ad::no_graph(graph, "sample_triplane");
        return ad::dispatch(planes.dtype(), [&]<class T>() {
          auto PL = planes.data<T>();
          auto X = points.data<T>();
          auto G = g.data<T>();
          const std::size_t P = points.dim(0), RR = d.R * d.R;
          std::vector<double> gp(needs[0] ? PL.size() : 0, 0.0);
          std::vector<T> gx(needs[1] ? X.size() : 0, T(0));
          for (std::size_t n = 0; n < P; ++n) {
            const T* gn = &G[n * d.C];
            double dx[3] = {0, 0, 0};
            for (int k = 0; k < 3; ++k) {
              const Tap t = tap(X[3 * n + kAxes[k][0]], X[3 * n + kAxes[k][1]], d.R);
              const std::size_t base = (static_cast<std::size_t>(bidx[n]) * 3 + k) * d.C * RR;
              if (needs[0]) {
                const double w00 = (1 - t.fx) * (1 - t.fy), w01 = t.fx * (1 - t.fy), w10 = (1 - t.fx) * t.fy,
                             w11 = t.fx * t.fy;
                for (std::size_t c = 0; c < d.C; ++c) {
                  double* q = &gp[base + c * RR];
                  const double gv = gn[c];
                  q[t.i00] += gv * w00;
                  q[t.i01] += gv * w01;
                  q[t.i10] += gv * w10;
                  q[t.i11] += gv * w11;
                }
              }
              if (needs[1]) {
                double du = 0, dv = 0;
                for (std::size_t c = 0; c < d.C; ++c) {
                  const T* q = &PL[base + c * RR];
                  const double gv = gn[c];
                  du += gv * ((1 - t.fy) * (q[t.i01] - q[t.i00]) + t.fy * (q[t.i11] - q[t.i10]));
                  dv += gv * ((1 - t.fx) * (q[t.i10] - q[t.i00]) + t.fx * (q[t.i11] - q[t.i01]));
                }
                dx[kAxes[k][0]] += du * t.du;
                dx[kAxes[k][1]] += dv * t.dv;
              }
            }
            if (needs[1])
              for (int a = 0; a < 3; ++a) gx[3 * n + a] = static_cast<T>(dx[a]);
          }
          std::vector<Tensor> r(2);
          if (needs[0])
            r[0] = ad::make_tensor<T>(planes.shape(), std::vector<T>(gp.begin(), gp.end()), "sample_triplane_grad");
          if (needs[1]) r[1] = ad::make_tensor<T>(points.shape(), std::move(gx), "sample_triplane_grad");
          return r;
        });
      });
}

Decoded decode(const GeneratorConfig& cfg, const ParamSet& p, const Tensor& features) {
  if (features.rank() != 2 || features.dim(1) != static_cast<std::size_t>(cfg.plane_channels))
    throw ad::ShapeError("decode: expected features (P," + std::to_string(cfg.plane_channels) + ")");
  Tensor h = ad::softplus(ad::affine(features, p["dec.0.w"], p["dec.0.b"]));
  Tensor o = ad::affine(h, p["dec.1.w"], p["dec.1.b"]);
  return {ad::softplus(ad::slice(o, 1, 0, 1)), ad::sigmoid(ad::slice(o, 1, 1, 4))};
}

// ---------------------------------------------------------------------------

SampleLayout layout_rays(const GeneratorConfig& cfg, std::span<const SphericalPose> poses) {
  const CameraRig rig = cfg.rig();
  const Quadrature q{cfg.near, cfg.far, cfg.samples_per_ray};
  SampleLayout L;
  L.batch = static_cast<int>(poses.size());
  L.height = rig.height;
  L.width = rig.width;
  L.samples = cfg.samples_per_ray;
  L.delta = q.delta();
  const std::size_t hw = static_cast<std::size_t>(rig.width) * rig.height, S = static_cast<std::size_t>(L.samples);
  L.index.assign(poses.size() * hw * S, -1);
  const double r2 = cfg.cull_radius * cfg.cull_radius;
  for (std::size_t b = 0; b < poses.size(); ++b) {
    const auto rs = rays(poses[b], rig);
    for (std::size_t r = 0; r < hw; ++r)
      for (std::size_t s = 0; s < S; ++s) {
        const Eigen::Vector3d x = rs[r].origin + q.t(static_cast<int>(s)) * rs[r].dir;
        if (x.squaredNorm() > r2) continue;
        L.index[(b * hw + r) * S + s] = static_cast<int>(L.point_batch.size());
        L.points.insert(L.points.end(), {x.x(), x.y(), x.z()});
        L.point_batch.push_back(static_cast<int>(b));
      }
  }
  return L;
}

namespace {

// Compositing over one ray: slot indices idx[S] (-1 = empty).
template <class T>
void composite_forward(const T* sigma, const T* rgb, const int* idx, int S, double delta, const double* bg,
                       double* out4) {
  double trans = 1, c[3] = {0, 0, 0};
  for (int s = 0; s < S; ++s) {
    if (idx[s] < 0) continue;
    const double a = 1 - std::exp(-static_cast<double>(sigma[idx[s]]) * delta);
    const double w = trans * a;
    for (int k = 0; k < 3; ++k) c[k] += w * rgb[3 * idx[s] + k];
    trans *= 1 - a;
  }
  const double acc = 1 - trans;
  for (int k = 0; k < 3; ++k) out4[k] = c[k] + trans * bg[k];
  out4[3] = acc;
}

}  // namespace

Tensor composite(const Tensor& sigma, const Tensor& rgb, const SampleLayout& L,
                 const std::array<double, 3>& background) {
  ad::require_same_dtype(sigma, rgb, "composite");
  const std::size_t P = L.count();
  if (sigma.rank() != 2 || sigma.dim(0) != P || sigma.dim(1) != 1 || rgb.rank() != 2 || rgb.dim(0) != P ||
      rgb.dim(1) != 3)
    throw ad::ShapeError("composite: expected sigma (P,1) and rgb (P,3) for P = " + std::to_string(P));
  const std::size_t B = static_cast<std::size_t>(L.batch), hw = static_cast<std::size_t>(L.height) * L.width;
  const int S = L.samples;
  const Shape shape{B, 4, static_cast<std::size_t>(L.height), static_cast<std::size_t>(L.width)};
  auto layout = std::make_shared<const SampleLayout>(L);

  Tensor out = ad::dispatch(sigma.dtype(), [&]<class T>() {
    auto sg = sigma.data<T>();
    auto cl = rgb.data<T>();
    std::vector<T> o(B * 4 * hw);
    double px[4];
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t r = 0; r < hw; ++r) {
        composite_forward(sg.data(), cl.data(), &L.index[(b * hw + r) * S], S, L.delta, background.data(), px);
        for (int k = 0; k < 4; ++k) o[(b * 4 + k) * hw + r] = static_cast<T>(px[k]);
      }
    return ad::make_tensor<T>(shape, std::move(o), "composite");
  });

  return ad::maybe_record(
      "composite", {sigma, rgb}, out,
      [sigma, rgb, layout, background](const Tensor& g, const std::vector<bool>& needs, bool graph) {
        ad::no_graph(graph, "composite");
        const SampleLayout& L = *layout;
        return ad::dispatch(sigma.dtype(), [&]<class T>() {
          auto sg = sigma.data<T>();
          auto cl = rgb.data<T>();
          auto G = g.data<T>();
          const std::size_t B = static_cast<std::size_t>(L.batch), hw = static_cast<std::size_t>(L.height) * L.width;
          const int S = L.samples;
          const double delta = L.delta;
          std::vector<T> gs(needs[0] ? sg.size() : 0, T(0)), gc(needs[1] ? cl.size() : 0, T(0));
          std::vector<double> w(static_cast<std::size_t>(S)), after(static_cast<std::size_t>(S));
          for (std::size_t b = 0; b < B; ++b)
            for (std::size_t r = 0; r < hw; ++r) {
              const int* idx = &L.index[(b * hw + r) * S];
              const double gC[3] = {G[(b * 4 + 0) * hw + r], G[(b * 4 + 1) * hw + r], G[(b * 4 + 2) * hw + r]};
              const double gA = G[(b * 4 + 3) * hw + r];
              double trans = 1;
              for (int s = 0; s < S; ++s) {
                w[s] = 0;
                after[s] = trans;
                if (idx[s] < 0) continue;
                const double a = 1 - std::exp(-static_cast<double>(sg[idx[s]]) * delta);
                w[s] = trans * a;
                trans *= 1 - a;
                after[s] = trans;  // transmittance past sample s
              }
              const double t_final = trans;
              const double g_bg = gC[0] * background[0] + gC[1] * background[1] + gC[2] * background[2];
              // d colour / d sigma_s = delta * (T_{s+1} c_s - sum_{j>s} w_j c_j - T_final bg);
              // d alpha / d sigma_s = delta * T_final.
              double suffix = 0;
              for (int s = S - 1; s >= 0; --s) {
                if (idx[s] < 0) continue;
                const std::size_t i = static_cast<std::size_t>(idx[s]);
                const double gc_s = gC[0] * cl[3 * i] + gC[1] * cl[3 * i + 1] + gC[2] * cl[3 * i + 2];
                if (needs[0])
                  gs[i] = static_cast<T>(delta * (after[s] * gc_s - suffix - t_final * g_bg) + gA * delta * t_final);
                if (needs[1])
                  for (int k = 0; k < 3; ++k) gc[3 * i + k] = static_cast<T>(w[s] * gC[k]);
                suffix += w[s] * gc_s;
              }
            }
          std::vector<Tensor> res(2);
          if (needs[0]) res[0] = ad::make_tensor<T>(sigma.shape(), std::move(gs), "composite_grad");
          if (needs[1]) res[1] = ad::make_tensor<T>(rgb.shape(), std::move(gc), "composite_grad");
          return res;
        });
      });
}

Rendered volume_render(const GeneratorConfig& cfg, const ParamSet& p, const Tensor& planes,
                       std::span<const SphericalPose> poses) {
  if (planes.rank() != 5 || planes.dim(0) != poses.size())
    throw ad::ShapeError("volume_render: one pose per plane set required");
  const SampleLayout L = layout_rays(cfg, poses);
  const std::size_t B = poses.size();
  const auto H = static_cast<std::size_t>(cfg.resolution);
  if (L.count() == 0) {
    // Every sample culled: background only, still attached through nothing.
    std::vector<double> bg(B * 3 * H * H);
    for (std::size_t i = 0; i < bg.size(); ++i) bg[i] = cfg.background[(i / (H * H)) % 3];
    return {Tensor::from({B, 3, H, H}, bg, planes.dtype()), Tensor::zeros({B, 1, H, H}, planes.dtype())};
  }
  const Tensor pts = Tensor::from({L.count(), 3}, L.points, planes.dtype());
  const Tensor feat = sample_triplane(planes, pts, L.point_batch);
  const Decoded d = decode(cfg, p, feat);
  const Tensor out = composite(d.sigma, d.rgb, L, cfg.background);
  return {ad::slice(out, 1, 0, 3), ad::slice(out, 1, 3, 4)};
}

Rendered generate(const GeneratorConfig& cfg, const ParamSet& p, const Tensor& z, const Tensor& gpc,
                  std::span<const SphericalPose> poses) {
  return volume_render(cfg, p, synthesize(cfg, p, map_style(cfg, p, z, gpc)), poses);
}

Tensor gpc_labels(std::span<const SphericalPose> poses, DType dtype) {
  const BinningConfig bins;
  const auto dim = static_cast<std::size_t>(bins.fine_dim());
  std::vector<double> v;
  v.reserve(poses.size() * dim);
  for (const auto& pose : poses) {
    const auto f = fine_vector(pose, bins);
    v.insert(v.end(), f.begin(), f.end());
  }
  return Tensor::from({poses.size(), dim}, v, dtype);
}

Tensor sample_z(Rng& rng, int batch, int d_z, DType dtype) {
  std::vector<double> v(static_cast<std::size_t>(batch) * d_z);
  for (auto& x : v) x = rng.normal();
  return Tensor::from({static_cast<std::size_t>(batch), static_cast<std::size_t>(d_z)}, v, dtype);
}

Image to_image(const Tensor& t, std::size_t b) {
  if (t.rank() != 4 || b >= t.dim(0)) throw ad::ShapeError("to_image: expected (B,C,H,W) and b < B");
  const auto C = t.dim(1), H = t.dim(2), W = t.dim(3);
  Image img(static_cast<int>(C), static_cast<int>(H), static_cast<int>(W));
  const std::size_t n = C * H * W;
  for (std::size_t i = 0; i < n; ++i) img.data[i] = static_cast<float>(t.at(b * n + i));
  return img;
}

}  // namespace av
