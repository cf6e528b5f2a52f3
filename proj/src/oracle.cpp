#include "avatar/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <unordered_map>

namespace av {

namespace {

using V3 = Eigen::Vector3d;

double smoothstep(double a, double b, double x) {
  const double t = std::clamp((x - a) / (b - a), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

// Polynomial smooth minimum with blend radius k.
double smin(double a, double b, double k) {
  const double h = std::max(k - std::abs(a - b), 0.0) / k;
  return std::min(a, b) - h * h * k * 0.25;
}

// First-order ellipsoid distance; exact on the axes, continuous everywhere.
double sd_ellipsoid(const V3& p, const V3& r) {
  const double k1 = p.cwiseQuotient(r.cwiseProduct(r)).norm();
  if (k1 < 1e-12) return -r.minCoeff();
  const double k0 = p.cwiseQuotient(r).norm();
  return k0 * (k0 - 1.0) / k1;
}

double sd_round_box(const V3& p, const V3& half, double round) {
  const V3 q = p.cwiseAbs() - half + V3::Constant(round);
  return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0) - round;
}

double sd_capsule(const V3& p, const V3& a, const V3& b, double r) {
  const V3 pa = p - a, ba = b - a;
  const double h = std::clamp(pa.dot(ba) / ba.squaredNorm(), 0.0, 1.0);
  return (pa - h * ba).norm() - r;
}

double sd_sphere(const V3& p, const V3& c, double r) { return (p - c).norm() - r; }

V3 rgb(double r, double g, double b) { return V3(r, g, b); }

V3 clamp01(const V3& c) { return c.cwiseMax(0.0).cwiseMin(1.0); }

// Fixed primitive placements, relative to the head axes.
V3 nose_base(const AvatarSpec& s) { return V3(0, -0.03, 0.88 * s.head_axes.z()); }
V3 nose_tip(const AvatarSpec& s) { return nose_base(s) + V3(0, -0.05, s.nose_length); }
V3 ear_centre(const AvatarSpec& s, double side) { return V3(side * 0.97 * s.head_axes.x(), 0.0, -0.03); }
V3 ear_axes(const AvatarSpec& s) { return V3(0.05, 0.12, 0.08) * s.ear_scale; }
const V3 kNeckTop(0, -0.42, -0.06);
const V3 kNeckBottom(0, -0.78, -0.1);
constexpr double kNeckRadius = 0.2;
V3 hair_axes(const AvatarSpec& s) { return s.head_axes + V3::Constant(s.hair_thickness); }
V3 hair_centre(const AvatarSpec& s) { return V3(0.5 * s.hair_part, 0.02, -0.02); }
const V3 kBun(0, 0.55, -0.38);
constexpr double kBunRadius = 0.15;
const V3 kTailTop(0, 0.18, -0.62);
const V3 kTailBottom(0, -0.38, -0.72);
constexpr double kTailRadius = 0.08;
V3 beard_centre(const AvatarSpec& s) { return V3(0, -0.42, 0.55 * s.head_axes.z()); }
V3 beard_axes(const AvatarSpec& s) { return V3(0.16 + 0.22 * s.beard, 0.14 + 0.1 * s.beard, 0.2 + 0.08 * s.beard); }
constexpr double kBlend = 0.04;
const V3 kLight = V3(0, 0.6, 0.8).normalized();

// Palette rows. Values are sRGB-ish albedos in [0, 1].
std::vector<Palette> make_palettes() {
  const V3 white = rgb(0.97, 0.97, 0.97);
  return {
      {"Disney", rgb(0.96, 0.80, 0.69), rgb(0.45, 0.28, 0.12), rgb(0.25, 0.45, 0.80), rgb(0.80, 0.35, 0.35), white,
       0.10, 1.30, 0.00},
      {"Sculpture", rgb(0.86, 0.85, 0.82), rgb(0.76, 0.75, 0.72), rgb(0.80, 0.79, 0.76), rgb(0.74, 0.72, 0.70),
       rgb(0.88, 0.87, 0.85), 0.20, 1.00, 0.00},
      {"Dragon Ball", rgb(0.98, 0.82, 0.66), rgb(0.12, 0.10, 0.10), rgb(0.10, 0.10, 0.12), rgb(0.75, 0.30, 0.30), white,
       0.15, 0.90, 0.08},
      {"Avatar", rgb(0.25, 0.55, 0.85), rgb(0.08, 0.08, 0.12), rgb(0.95, 0.80, 0.20), rgb(0.20, 0.25, 0.45), white,
       0.05, 1.10, 0.00},
      {"Pixel Art", rgb(0.95, 0.75, 0.55), rgb(0.60, 0.30, 0.10), rgb(0.15, 0.20, 0.60), rgb(0.70, 0.20, 0.20), white,
       0.90, 0.80, 0.00},
      {"Anime", rgb(1.00, 0.88, 0.80), rgb(0.90, 0.55, 0.75), rgb(0.55, 0.20, 0.70), rgb(0.90, 0.45, 0.50), white,
       0.00, 1.45, 0.05},
      {"Sci-Fi", rgb(0.75, 0.78, 0.82), rgb(0.30, 0.35, 0.45), rgb(0.10, 0.90, 0.90), rgb(0.35, 0.40, 0.50), white,
       0.50, 1.00, -0.02},
      {"Hulk", rgb(0.35, 0.62, 0.25), rgb(0.10, 0.12, 0.08), rgb(0.35, 0.25, 0.15), rgb(0.25, 0.35, 0.15), white, 0.60,
       0.75, 0.00},
      {"Joker", rgb(0.95, 0.95, 0.93), rgb(0.20, 0.60, 0.20), rgb(0.10, 0.10, 0.10), rgb(0.85, 0.10, 0.15), white,
       0.20, 0.90, 0.04},
      {"Robot", rgb(0.62, 0.64, 0.68), rgb(0.35, 0.37, 0.40), rgb(0.95, 0.20, 0.10), rgb(0.20, 0.20, 0.22),
       rgb(0.15, 0.15, 0.17), 1.00, 0.85, -0.04},
  };
}

// Category -> modifier. Categories not listed (e.g. every Race entry and most
// impressions) only affect the prompt.
using Modifier = std::function<void(AvatarSpec&)>;

const std::unordered_map<std::string, Modifier>& modifiers() {
  static const std::unordered_map<std::string, Modifier> table = [] {
    std::unordered_map<std::string, Modifier> m;
    auto eye = [](double r, double squash) { return [=](AvatarSpec& s) { s.eye_radius *= r, s.eye_squash *= squash; }; };
    m["big-eyed"] = eye(kBigEyeFactor, 1.0);
    m["small-eyed"] = eye(kSmallEyeFactor, 1.0);
    m["round eyes"] = eye(1.1, 1.0);
    m["protruding eyes"] = eye(1.15, 1.0);
    m["narrow eyes"] = eye(1.0, 0.55);
    m["almond-shaped eyes"] = eye(1.0, 0.7);
    m["deep-set eyes"] = eye(0.9, 0.8);
    m["hooded eyes"] = eye(1.0, 0.75);
    m["sunken eyes"] = eye(0.85, 0.85);
    m["close-set eyes"] = [](AvatarSpec& s) { s.eye_spacing -= 0.035; };
    m["wide-set eyes"] = [](AvatarSpec& s) { s.eye_spacing += 0.035; };

    for (const char* c : {"thick-browed", "bushy eyebrows", "unibrow"})
      m[c] = [](AvatarSpec& s) { s.brow_thickness *= 1.8; };
    for (const char* c : {"sparse-browed", "thin eyebrows"}) m[c] = [](AvatarSpec& s) { s.brow_thickness *= 0.5; };
    m["raising eyebrows"] = [](AvatarSpec& s) { s.brow_thickness *= 1.2; };

    m["rosy-cheeked"] = [](AvatarSpec& s) { s.blush = std::max(s.blush, 0.8); };
    m["pale-cheeked"] = [](AvatarSpec& s) { s.skin = clamp01(s.skin * 1.08); };
    m["chubby cheeks"] = [](AvatarSpec& s) { s.head_axes.x() *= 1.06; };
    m["hollow cheeks"] = [](AvatarSpec& s) { s.head_axes.x() *= 0.94; };

    m["big-eared"] = [](AvatarSpec& s) { s.ear_scale *= 1.4; };
    m["small-eared"] = [](AvatarSpec& s) { s.ear_scale *= 0.7; };

    for (const char* c : {"happy", "smiling", "grinning", "friendly", "warm"})
      m[c] = [](AvatarSpec& s) { s.mouth_width *= 1.3; };
    for (const char* c : {"sad", "frowning", "pouting", "tired"}) m[c] = [](AvatarSpec& s) { s.mouth_width *= 0.8; };
    m["surprised"] = [](AvatarSpec& s) { s.mouth_height *= 2.2, s.mouth_width *= 0.7, s.eye_radius *= 1.1; };
    for (const char* c : {"angry", "scowling", "intimidating"})
      m[c] = [](AvatarSpec& s) { s.brow_thickness *= 1.3, s.eye_squash *= 0.85; };

    m["moustache"] = [](AvatarSpec& s) { s.moustache = true; };
    m["beard"] = [](AvatarSpec& s) { s.beard = 1.0; };
    m["goatee"] = [](AvatarSpec& s) { s.beard = 0.5; };
    m["stubble"] = [](AvatarSpec& s) { s.beard = std::max(s.beard, 0.25); };
    m["sideburns"] = [](AvatarSpec& s) { s.beard = std::max(s.beard, 0.15); };
    m["clean-shaven"] = [](AvatarSpec& s) { s.beard = 0.0, s.moustache = false; };

    auto iris = [](V3 c) { return [=](AvatarSpec& s) { s.iris = c; }; };
    m["blue eyes"] = iris(rgb(0.20, 0.40, 0.85));
    m["black eyes"] = iris(rgb(0.05, 0.05, 0.05));
    m["brown eyes"] = iris(rgb(0.40, 0.25, 0.10));
    m["green eyes"] = iris(rgb(0.20, 0.60, 0.30));
    m["hazel eyes"] = iris(rgb(0.55, 0.45, 0.20));
    m["gray eyes"] = iris(rgb(0.55, 0.58, 0.60));

    for (const char* c : {"mole", "beauty mark", "birthmark"}) m[c] = [](AvatarSpec& s) { s.mole = true; };
    for (const char* c : {"freckle", "freckles", "acne-prone skin"})
      m[c] = [](AvatarSpec& s) { s.blush = std::max(s.blush, 0.35); };
    m["wrinkled"] = [](AvatarSpec& s) { s.skin *= 0.92; };

    for (const char* c : {"old", "elderly"}) m[c] = [](AvatarSpec& s) { s.hair_colour = rgb(0.72, 0.72, 0.72); };
    for (const char* c : {"young", "baby-faced"})
      m[c] = [](AvatarSpec& s) { s.eye_radius *= 1.1, s.head_axes.y() *= 0.96; };

    for (const char* c : {"square-faced", "square chin", "sharp jawline"})
      m[c] = [](AvatarSpec& s) { s.boxiness = std::min(1.0, s.boxiness + 0.35); };
    for (const char* c : {"round-faced", "chubby-faced", "round chin", "soft jawline"})
      m[c] = [](AvatarSpec& s) { s.head_axes.x() *= 1.08, s.boxiness *= 0.5; };
    for (const char* c : {"thin-faced", "narrow face"}) m[c] = [](AvatarSpec& s) { s.head_axes.x() *= 0.9; };
    m["wide face"] = [](AvatarSpec& s) { s.head_axes.x() *= 1.1; };
    for (const char* c : {"pointy-chinned", "pointed chin", "prominent-chinned", "heart-shaped face"})
      m[c] = [](AvatarSpec& s) { s.head_axes.y() *= 1.05; };

    m["short-nosed"] = [](AvatarSpec& s) { s.nose_length *= 0.7; };
    m["long-nosed"] = [](AvatarSpec& s) { s.nose_length *= 1.4; };
    m["Roman nose"] = [](AvatarSpec& s) { s.nose_length *= 1.25, s.nose_radius *= 1.1; };
    m["button nose"] = [](AvatarSpec& s) { s.nose_length *= 0.6, s.nose_radius *= 1.3; };
    m["high-bridged nose"] = [](AvatarSpec& s) { s.nose_length *= 1.15; };
    m["low-bridged nose"] = [](AvatarSpec& s) { s.nose_length *= 0.85; };

    for (const char* c : {"full-lipped", "thick-lipped", "full lower lip"})
      m[c] = [](AvatarSpec& s) { s.mouth_height *= 1.5; };
    for (const char* c : {"thin-lipped", "thin upper lip"}) m[c] = [](AvatarSpec& s) { s.mouth_height *= 0.6; };

    for (const char* c : {"high forehead", "receding hairline"}) m[c] = [](AvatarSpec& s) { s.hairline += 0.08; };
    for (const char* c : {"low forehead", "bangs"}) m[c] = [](AvatarSpec& s) { s.hairline -= 0.08; };

    m["bald"] = [](AvatarSpec& s) { s.hair = HairKind::None; };
    for (const char* c : {"short hair", "straight hair"}) m[c] = [](AvatarSpec& s) { s.hair = HairKind::Short; };
    for (const char* c : {"long hair", "braids"}) m[c] = [](AvatarSpec& s) { s.hair = HairKind::Long; };
    for (const char* c : {"curly hair", "wavy hair"}) m[c] = [](AvatarSpec& s) { s.curly = true; };
    m["cornrows"] = [](AvatarSpec& s) { s.hair = HairKind::Short, s.hair_thickness = 0.025; };
    m["ponytail"] = [](AvatarSpec& s) { s.ponytail = true; };
    m["bun"] = [](AvatarSpec& s) { s.bun = true; };
    return m;
  }();
  return table;
}

void clamp_params(AvatarSpec& s) {
  s.head_axes = s.head_axes.cwiseMax(0.35).cwiseMin(0.8);
  s.boxiness = std::clamp(s.boxiness, 0.0, 1.0);
  s.eye_radius = std::clamp(s.eye_radius, 0.03, 0.16);
  s.eye_squash = std::clamp(s.eye_squash, 0.3, 1.3);
  s.eye_spacing = std::clamp(s.eye_spacing, 0.12, 0.28);
  s.nose_length = std::clamp(s.nose_length, 0.04, 0.22);
  s.nose_radius = std::clamp(s.nose_radius, 0.025, 0.07);
  s.ear_scale = std::clamp(s.ear_scale, 0.5, 1.6);
  s.mouth_width = std::clamp(s.mouth_width, 0.06, 0.22);
  s.mouth_height = std::clamp(s.mouth_height, 0.01, 0.08);
  s.brow_thickness = std::clamp(s.brow_thickness, 0.006, 0.045);
  s.hairline = std::clamp(s.hairline, -0.12, 0.2);
  s.hair_thickness = std::clamp(s.hair_thickness, 0.02, 0.09);
  s.skin = clamp01(s.skin);
  s.hair_colour = clamp01(s.hair_colour);
}

}  // namespace

const std::vector<Palette>& style_palettes() {
  static const std::vector<Palette> p = make_palettes();
  return p;
}

const Palette& palette_for(const std::string& style) {
  for (const auto& p : style_palettes())
    if (p.style == style) return p;
  throw std::out_of_range("no palette for style '" + style + "'");
}

AvatarSpec spawn_avatar(Rng& rng, const std::string& style, const std::vector<AttributeChoice>& attributes) {
  const Palette& pal = palette_for(style);
  AvatarSpec s;
  s.style = style;
  s.attributes = attributes;
  s.seed = rng.bits();
  Rng r(s.seed);
  auto jitter = [&r](double v, double rel) { return v * (1.0 + r.uniform(-rel, rel)); };

  s.skin = pal.skin;
  s.hair_colour = pal.hair;
  s.iris = pal.iris;
  s.mouth = pal.mouth;
  s.sclera = pal.sclera;
  s.boxiness = pal.boxiness;
  s.head_axes = V3(jitter(0.52, 0.05), jitter(0.64, 0.05), jitter(0.58, 0.05));
  s.eye_radius = jitter(0.075, 0.1) * pal.eye_scale;
  s.eye_spacing = jitter(0.19, 0.08);
  s.eye_height = jitter(0.08, 0.2);
  s.nose_length = jitter(0.12, 0.15);
  s.mouth_width = jitter(0.12, 0.1);
  s.hairline = 0.05 + pal.hair_cover + r.uniform(-0.03, 0.03);
  s.hair_part = r.uniform(0.03, 0.09) * (r.bernoulli(0.5) ? 1.0 : -1.0);
  const double h = r.uniform();
  s.hair = h < 0.1 ? HairKind::None : h < 0.7 ? HairKind::Short : HairKind::Long;

  const auto& table = modifiers();
  for (const auto& a : attributes)
    if (auto it = table.find(a.category); it != table.end()) it->second(s);
  clamp_params(s);
  s.scale = std::min(1.0, kContainRadius / bounding_radius(s));
  return s;
}

AvatarSpec mirrored(const AvatarSpec& spec) {
  AvatarSpec m = spec;
  m.mirrored = !spec.mirrored;
  return m;
}

double bounding_radius(const AvatarSpec& s) {
  double r = 0;
  auto cover = [&r](const V3& c, double extent) { r = std::max(r, c.norm() + extent); };
  // Each smooth-min lowers the distance by at most its radius / 4; the chain
  // of blends stays below kBlend.
  const double pad = kBlend;
  cover(V3::Zero(), s.head_axes.maxCoeff() + pad);
  cover(nose_tip(s), s.nose_radius + pad);
  for (double side : {-1.0, 1.0}) cover(ear_centre(s, side), ear_axes(s).maxCoeff() + pad);
  cover(kNeckBottom, kNeckRadius + pad);
  if (s.hair != HairKind::None) cover(hair_centre(s), hair_axes(s).maxCoeff() + 0.02 + pad);
  if (s.bun) cover(kBun, kBunRadius + pad);
  if (s.ponytail) cover(kTailBottom, kTailRadius + pad);
  if (s.beard > 0) cover(beard_centre(s), beard_axes(s).maxCoeff() + pad);
  return r;
}

// ---------------------------------------------------------------------------

OracleField::OracleField(AvatarSpec spec, double density, double sharpness)
    : spec_(std::move(spec)), k_(density), s_(sharpness) {
  if (!(k_ >= 0) || !(s_ > 0)) throw std::invalid_argument("OracleField: density must be >= 0, sharpness > 0");
}

OracleField::Parts OracleField::parts(const V3& q) const {
  const AvatarSpec& s = spec_;
  const double ell = sd_ellipsoid(q, s.head_axes);
  double skin = ell;
  if (s.boxiness > 0) {
    const double box = sd_round_box(q, 0.86 * s.head_axes, 0.18);
    skin = (1 - s.boxiness) * ell + s.boxiness * box;
  }
  skin = smin(skin, sd_capsule(q, nose_base(s), nose_tip(s), s.nose_radius), kBlend * 0.5);
  for (double side : {-1.0, 1.0}) skin = smin(skin, sd_ellipsoid(q - ear_centre(s, side), ear_axes(s)), kBlend * 0.5);
  skin = smin(skin, sd_capsule(q, kNeckTop, kNeckBottom, kNeckRadius), kBlend);

  double hair = 1e3;
  if (s.hair != HairKind::None) {
    double shell = sd_ellipsoid(q - hair_centre(s), hair_axes(s));
    if (s.curly) shell += 0.015 * std::sin(25 * q.x()) * std::sin(25 * q.y()) * std::sin(25 * q.z());
    // Hair covers the region above a plane tilted down toward the back.
    const double front_y = 0.3 + s.hairline;
    const double back_y = s.hair == HairKind::Long ? -0.6 : -0.25;
    const double tilt = (front_y - back_y) / 1.18;
    const double h0 = front_y - 0.58 * tilt;
    const double plane = (h0 + tilt * q.z() + 0.3 * s.hair_part * q.x() - q.y()) / std::sqrt(1 + tilt * tilt);
    hair = std::max(shell, plane);
  }
  if (s.bun) hair = smin(hair, sd_sphere(q, kBun, kBunRadius), kBlend);
  if (s.ponytail) hair = smin(hair, sd_capsule(q, kTailTop, kTailBottom, kTailRadius), kBlend);
  if (s.beard > 0) {
    const double b = sd_ellipsoid(q - beard_centre(s), beard_axes(s));
    hair = std::min(hair, std::max(b, q.y() + 0.18));
  }
  if (s.moustache) {
    const double z = 0.9 * s.head_axes.z();
    hair = std::min(hair, sd_capsule(q, V3(-0.09, -0.2, z), V3(0.09, -0.2, z), 0.022));
  }
  return {skin, hair};
}

double OracleField::sdf(const V3& p) const {
  V3 q = p / spec_.scale;
  if (spec_.mirrored) q.x() = -q.x();
  const Parts d = parts(q);
  return spec_.scale * smin(d.skin, d.hair, kBlend * 0.5);
}

V3 OracleField::shade(const V3& q, const Parts& d) const {
  const AvatarSpec& s = spec_;
  V3 skin = s.skin;
  const double front = smoothstep(0.05, 0.2, q.z());
  if (front > 0) {
    const double x = q.x(), y = q.y();
    for (double side : {-1.0, 1.0}) {
      const double ex = side * s.eye_spacing, ey = s.eye_height;
      const double rx = s.eye_radius, ry = s.eye_radius * s.eye_squash;
      const double e = std::hypot((x - ex) / rx, (y - ey) / ry);
      skin += front * (1 - smoothstep(0.9, 1.0, e)) * (s.sclera - skin);
      skin += front * (1 - smoothstep(0.5, 0.6, e)) * (s.iris - skin);
      skin += front * (1 - smoothstep(0.2, 0.28, e)) * (V3::Constant(0.03) - skin);
      const double b = std::max(std::abs(x - ex) / (1.2 * rx), std::abs(y - (ey + ry + 0.035)) / s.brow_thickness);
      skin += front * (1 - smoothstep(0.85, 1.0, b)) * (s.hair_colour * 0.7 - skin);
    }
    const double m = std::hypot(x / s.mouth_width, (y + 0.27) / s.mouth_height);
    skin += front * (1 - smoothstep(0.85, 1.0, m)) * (s.mouth - skin);
    if (s.blush > 0)
      for (double side : {-1.0, 1.0}) {
        const double c = std::hypot(x - side * 0.24, y + 0.12) / 0.08;
        skin += front * 0.5 * s.blush * (1 - smoothstep(0.6, 1.0, c)) * (V3(0.95, 0.45, 0.45) - skin);
      }
    if (s.mole) {
      const double c = std::hypot(x - 0.17, y + 0.17) / 0.02;
      skin += front * (1 - smoothstep(0.7, 1.0, c)) * (V3(0.25, 0.15, 0.1) - skin);
    }
  }
  const double to_hair = smoothstep(-0.01, 0.01, d.skin - d.hair);
  return skin + to_hair * (s.hair_colour - skin);
}

void OracleField::eval(const V3& p, double& sigma, V3& colour) const {
  const double sc = spec_.scale;
  V3 q = p / sc;
  if (spec_.mirrored) q.x() = -q.x();
  const Parts d = parts(q);
  const double dist = sc * smin(d.skin, d.hair, kBlend * 0.5);
  sigma = k_ / (1 + std::exp(s_ * dist));

  V3 albedo = shade(q, d);
  // Lambert term with a light on the symmetry plane, faded out far from the
  // surface so the field stays continuous without evaluating normals there.
  const double near_surface = 1 - smoothstep(0.1, 0.15, dist);
  double light = 0.8;
  if (near_surface > 0) {
    const double h = 0.01;
    V3 n;
    for (int a = 0; a < 3; ++a) {
      V3 e = V3::Zero();
      e[a] = h;
      const Parts hi = parts(q + e), lo = parts(q - e);
      n[a] = smin(hi.skin, hi.hair, kBlend * 0.5) - smin(lo.skin, lo.hair, kBlend * 0.5);
    }
    if (spec_.mirrored) n.x() = -n.x();  // back to world orientation
    const double len = n.norm();
    const double lambert = len > 0 ? std::max(0.0, n.dot(kLight) / len) : 0.0;
    light += near_surface * (0.35 + 0.65 * lambert - light);
  }
  colour = clamp01(albedo * light);
}

// ---------------------------------------------------------------------------

void MisalignmentModel::validate() const {
  if (!(delta_max >= 0)) throw std::invalid_argument("misalignment delta_max must be >= 0");
  if (!(p_flip >= 0 && p_flip <= 1)) throw std::invalid_argument("misalignment p_flip must lie in [0, 1]");
  box.validate();
}

CorruptedPose corrupt_pose(const SphericalPose& nominal, const MisalignmentModel& model, Rng& rng) {
  if (is_confident(nominal, model.box)) return {nominal, false};
  const double dy = rng.uniform(-model.delta_max, model.delta_max);
  const double dp = rng.uniform(-model.delta_max, model.delta_max);
  double yaw = normalize_yaw(nominal.yaw_deg + dy);
  const double pitch = std::clamp(nominal.pitch_deg + dp, kPitchRange.lo, kPitchRange.hi);
  bool flipped = false;
  if (classify_view(nominal.yaw_deg) == ViewClass::Back && rng.bernoulli(model.p_flip)) {
    yaw = normalize_yaw(rng.uniform(-180.0, 180.0));
    flipped = true;
  }
  return {SphericalPose::make(yaw, pitch, nominal.radius), flipped};
}

AvatarSpec avatar_for(std::uint64_t seed, const PromptBundle& prompts) {
  Rng rng(derive_seed(seed, {0x617661746172ULL}));
  return spawn_avatar(rng, prompts.style, prompts.attributes);
}

Image OracleBackend::generate(const GenerationRequest& request) {
  const OracleField field(avatar_for(request.seed, request.prompts));
  return render_field(field, request.content_pose, rig_, n_samples_).rgb;
}

}  // namespace av
