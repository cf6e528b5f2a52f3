#include "avatar/mesh.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <map>
#include <sstream>
#include <unordered_map>

#include <Eigen/Geometry>

#include "avatar/checkpoint.hpp"
#include "avatar/errors.hpp"

namespace av {

using ad::Tensor;

namespace {

Eigen::Vector3d corner_pos(int c) { return {double(c & 1), double(c >> 1 & 1), double(c >> 2 & 1)}; }

int edge_between(int a, int b) {
  for (int e = 0; e < 12; ++e)
    if ((kCubeEdges[e][0] == a && kCubeEdges[e][1] == b) || (kCubeEdges[e][0] == b && kCubeEdges[e][1] == a)) return e;
  return -1;
}

// True when all three edges lie on one face of the cube.
bool shares_face(int e0, int e1, int e2) {
  for (int axis = 0; axis < 3; ++axis)
    for (int side = 0; side < 2; ++side) {
      auto on = [&](int e) {
        return (kCubeEdges[e][0] >> axis & 1) == side && (kCubeEdges[e][1] >> axis & 1) == side;
      };
      if (on(e0) && on(e1) && on(e2)) return true;
    }
  return false;
}

struct Face {
  std::array<int, 4> corners;  // cyclic
  Eigen::Vector3d normal;      // outward
};

std::array<Face, 6> cube_faces() {
  std::array<Face, 6> faces;
  int f = 0;
  for (int axis = 0; axis < 3; ++axis)
    for (int side = 0; side < 2; ++side) {
      const int a = (axis + 1) % 3, b = (axis + 2) % 3;
      const int base = side << axis;
      Face face;
      face.corners = {base, base | 1 << a, base | 1 << a | 1 << b, base | 1 << b};
      face.normal = Eigen::Vector3d::Zero();
      face.normal[axis] = side ? 1.0 : -1.0;
      faces[f++] = face;
    }
  return faces;
}

// Triangles for one corner mask, traced from oriented face segments.
std::vector<std::array<int, 3>> build_case(int mask, const std::array<Face, 6>& faces, bool flip) {
  auto inside = [mask](int c) { return (mask >> c & 1) != 0; };
  auto edge_mid = [](int e) -> Eigen::Vector3d { return 0.5 * (corner_pos(kCubeEdges[e][0]) + corner_pos(kCubeEdges[e][1])); };
  std::map<int, int> next;  // segment start edge -> end edge
  for (const Face& face : faces) {
    // Crossing edges in cyclic order, each with the face corner it follows.
    std::vector<int> cross;
    for (int i = 0; i < 4; ++i) {
      const int a = face.corners[i], b = face.corners[(i + 1) % 4];
      if (inside(a) != inside(b)) cross.push_back(edge_between(a, b));
    }
    if (cross.empty()) continue;
    // Pairs of crossing edges and the inside region they bound.
    std::vector<std::pair<std::array<int, 2>, Eigen::Vector3d>> segs;
    if (cross.size() == 2) {
      Eigen::Vector3d centre = Eigen::Vector3d::Zero();
      int count = 0;
      for (int c : face.corners)
        if (inside(c)) centre += corner_pos(c), ++count;
      segs.push_back({{cross[0], cross[1]}, centre / count});
    } else {
      // Two diagonal inside corners: cut each off on its own.
      for (int c : face.corners) {
        if (!inside(c)) continue;
        std::array<int, 2> pair{};
        int k = 0;
        for (int e : cross)
          if (kCubeEdges[e][0] == c || kCubeEdges[e][1] == c) pair[k++] = e;
        segs.push_back({pair, corner_pos(c)});
      }
    }
    for (auto [pair, centre] : segs) {
      const Eigen::Vector3d a = edge_mid(pair[0]), b = edge_mid(pair[1]);
      if ((b - a).cross(centre - a).dot(face.normal) < 0) std::swap(pair[0], pair[1]);
      next[pair[0]] = pair[1];
    }
  }
  std::vector<std::array<int, 3>> tris;
  while (!next.empty()) {
    std::vector<int> loop{next.begin()->first};
    while (true) {
      const auto it = next.find(loop.back());
      const int to = it->second;
      next.erase(it);
      if (to == loop.front()) break;
      loop.push_back(to);
    }
    // Fan from the first origin that keeps every triangle off the cube faces;
    // a triangle lying in a face would be emitted again, reversed, by the
    // neighbouring cell.
    const std::size_t len = loop.size();
    std::size_t origin = 0;
    auto fan_ok = [&](std::size_t o) {
      for (std::size_t i = 1; i + 1 < len; ++i)
        if (shares_face(loop[o], loop[(o + i) % len], loop[(o + i + 1) % len])) return false;
      return true;
    };
    while (origin < len && !fan_ok(origin)) ++origin;
    if (origin == len) throw std::logic_error("cube table: no face-free triangulation");
    for (std::size_t i = 1; i + 1 < len; ++i) {
      const int a = loop[origin], b = loop[(origin + i) % len], c = loop[(origin + i + 1) % len];
      if (flip) tris.push_back({a, c, b});
      else tris.push_back({a, b, c});
    }
  }
  return tris;
}

std::array<std::vector<std::array<int, 3>>, 256> build_table() {
  const auto faces = cube_faces();
  // Fix the winding once from the single-corner case: its triangle must face
  // away from the inside corner.
  const auto probe = build_case(1, faces, false);
  auto mid = [](int e) -> Eigen::Vector3d { return 0.5 * (corner_pos(kCubeEdges[e][0]) + corner_pos(kCubeEdges[e][1])); };
  const Eigen::Vector3d n = (mid(probe[0][1]) - mid(probe[0][0])).cross(mid(probe[0][2]) - mid(probe[0][0]));
  const bool flip = n.dot(Eigen::Vector3d(1, 1, 1)) < 0;
  std::array<std::vector<std::array<int, 3>>, 256> table;
  for (int m = 0; m < 256; ++m) table[m] = build_case(m, faces, flip);
  return table;
}

std::string format_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace

const std::vector<std::array<int, 3>>& cube_case(int mask) {
  static const auto table = build_table();
  if (mask < 0 || mask > 255) throw std::out_of_range("cube_case: mask must lie in [0, 255]");
  return table[static_cast<std::size_t>(mask)];
}

DensityGrid sample_field_grid(const std::function<double(const Eigen::Vector3d&)>& f, int n) {
  if (n < 2) throw std::invalid_argument("density grid: n must be >= 2");
  DensityGrid g;
  g.n = n;
  g.values.resize(static_cast<std::size_t>(n) * n * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      for (int k = 0; k < n; ++k)
        g.values[(static_cast<std::size_t>(i) * n + j) * n + k] = f({g.coord(i), g.coord(j), g.coord(k)});
  return g;
}

DensityGrid sample_density_grid(const GeneratorConfig& cfg, const ParamSet& p, const Tensor& planes, int n) {
  if (n < 2) throw std::invalid_argument("density grid: n must be >= 2");
  if (planes.rank() != 5 || planes.dim(0) != 1) throw ad::ShapeError("density grid: expected one plane set");
  DensityGrid g;
  g.n = n;
  const std::size_t total = static_cast<std::size_t>(n) * n * n;
  g.values.assign(total, 0.0);
  constexpr std::size_t kChunk = 1 << 15;
  std::vector<double> pts;
  std::vector<std::size_t> slot;
  auto flush = [&] {
    if (slot.empty()) return;
    const Tensor points = Tensor::from({slot.size(), 3}, pts, planes.dtype());
    const std::vector<int> batch(slot.size(), 0);
    const auto sigma = decode(cfg, p, sample_triplane(planes, points, batch)).sigma.values();
    for (std::size_t i = 0; i < slot.size(); ++i) g.values[slot[i]] = sigma[i];
    pts.clear();
    slot.clear();
  };
  const double r2 = cfg.cull_radius * cfg.cull_radius;
  for (std::size_t idx = 0; idx < total; ++idx) {
    const int i = static_cast<int>(idx / (static_cast<std::size_t>(n) * n)), j = static_cast<int>(idx / n % n),
              k = static_cast<int>(idx % n);
    const double x = g.coord(i), y = g.coord(j), z = g.coord(k);
    if (x * x + y * y + z * z > r2) continue;
    pts.insert(pts.end(), {x, y, z});
    slot.push_back(idx);
    if (slot.size() == kChunk) flush();
  }
  flush();
  return g;
}

Mesh marching_cubes(const DensityGrid& grid, double iso) {
  const int n = grid.n;
  if (n < 2 || grid.values.size() != static_cast<std::size_t>(n) * n * n)
    throw std::invalid_argument("marching_cubes: grid must be n^3 with n >= 2");
  if (!std::isfinite(iso)) throw std::invalid_argument("marching_cubes: iso must be finite");
  Mesh mesh;
  std::unordered_map<std::int64_t, int> vertex_of;
  const double h = grid.spacing();
  auto vertex = [&](int i, int j, int k, int e) {
    const int c0 = kCubeEdges[e][0], c1 = kCubeEdges[e][1];  // c0 has the lower coordinate
    const int axis = e / 4;
    const int gi = i + (c0 & 1), gj = j + (c0 >> 1 & 1), gk = k + (c0 >> 2 & 1);
    const std::int64_t key = ((static_cast<std::int64_t>(gi) * n + gj) * n + gk) * 3 + axis;
    const auto [it, fresh] = vertex_of.try_emplace(key, static_cast<int>(mesh.vertices.size()));
    if (fresh) {
      const double v0 = grid.at(gi, gj, gk);
      const double v1 = grid.at(i + (c1 & 1), j + (c1 >> 1 & 1), k + (c1 >> 2 & 1));
      const double t = (iso - v0) / (v1 - v0);
      Eigen::Vector3d p(grid.coord(gi), grid.coord(gj), grid.coord(gk));
      p[axis] += t * h;
      mesh.vertices.push_back(p);
    }
    return it->second;
  };
  for (int i = 0; i + 1 < n; ++i)
    for (int j = 0; j + 1 < n; ++j)
      for (int k = 0; k + 1 < n; ++k) {
        int mask = 0;
        for (int c = 0; c < 8; ++c)
          if (grid.at(i + (c & 1), j + (c >> 1 & 1), k + (c >> 2 & 1)) > iso) mask |= 1 << c;
        for (const auto& tri : cube_case(mask))
          mesh.triangles.push_back({vertex(i, j, k, tri[0]), vertex(i, j, k, tri[1]), vertex(i, j, k, tri[2])});
      }
  return mesh;
}

std::string obj_string(const Mesh& m) {
  std::string out;
  for (const auto& v : m.vertices)
    out += "v " + format_double(v.x()) + " " + format_double(v.y()) + " " + format_double(v.z()) + "\n";
  for (const auto& t : m.triangles)
    out += "f " + std::to_string(t[0] + 1) + " " + std::to_string(t[1] + 1) + " " + std::to_string(t[2] + 1) + "\n";
  return out;
}

Mesh parse_obj(const std::string& text) {
  Mesh m;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  auto fail = [&](const std::string& why) {
    throw SchemaError("obj line " + std::to_string(line_no) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag == "v") {
      std::array<double, 3> c{};
      for (auto& x : c) {
        std::string tok;
        if (!(ls >> tok)) fail("vertex needs three coordinates");
        const auto r = std::from_chars(tok.data(), tok.data() + tok.size(), x);
        if (r.ec != std::errc() || r.ptr != tok.data() + tok.size()) fail("bad coordinate '" + tok + "'");
      }
      m.vertices.emplace_back(c[0], c[1], c[2]);
    } else if (tag == "f") {
      std::array<int, 3> f{};
      for (auto& x : f) {
        if (!(ls >> x)) fail("face needs three indices");
        if (x < 1 || x > static_cast<int>(m.vertices.size())) fail("face index out of range");
        --x;
      }
      m.triangles.push_back(f);
    } else {
      fail("unsupported record '" + tag + "'");
    }
    std::string extra;
    if (ls >> extra) fail("trailing data");
  }
  return m;
}

void export_obj(const Mesh& m, const std::filesystem::path& path) { write_file_atomic(path, obj_string(m)); }

Mesh load_obj(const std::filesystem::path& path) { return parse_obj(read_file(path)); }

}  // namespace av
