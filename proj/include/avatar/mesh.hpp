#pragma once

// Density grids over [-1, 1]^3, marching-cubes isosurfaces and Wavefront OBJ
// files.

#include <array>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "avatar/generator.hpp"
#include "avatar/oracle.hpp"

namespace av {

// n^3 samples at x_i = -1 + 2 i / (n - 1) on each axis; index (i * n + j) * n + k
// for the point (x_i, y_j, z_k).
struct DensityGrid {
  int n = 0;
  std::vector<double> values;

  double at(int i, int j, int k) const { return values[(static_cast<std::size_t>(i) * n + j) * n + k]; }
  double coord(int i) const { return -1.0 + 2.0 * i / (n - 1); }
  double spacing() const { return 2.0 / (n - 1); }
};

DensityGrid sample_field_grid(const std::function<double(const Eigen::Vector3d&)>& f, int n);
// Generator density for one plane set (1, 3, C, R, R); zero beyond the
// generator's cull radius, as in its renders.
DensityGrid sample_density_grid(const GeneratorConfig& cfg, const ParamSet& p, const ad::Tensor& planes, int n);

// Default iso level: half the oracle's interior density.
inline constexpr double kDefaultIso = kOracleDensity / 2;

struct Mesh {
  std::vector<Eigen::Vector3d> vertices;
  std::vector<std::array<int, 3>> triangles;  // counter-clockwise seen from outside
  bool operator==(const Mesh&) const = default;
};

// Corner sets of the 256 cube cases and their triangles, built from face
// segments: on a face with two diagonal inside corners each inside corner
// is cut off separately. Corner c sits at (c & 1, c >> 1 & 1, c >> 2 & 1);
// edges are numbered as in kCubeEdges.
inline constexpr std::array<std::array<int, 2>, 12> kCubeEdges{{{0, 1}, {2, 3}, {4, 5}, {6, 7},  // x
                                                                {0, 2}, {1, 3}, {4, 6}, {5, 7},  // y
                                                                {0, 4}, {1, 5}, {2, 6}, {3, 7}}};
const std::vector<std::array<int, 3>>& cube_case(int mask);

// Inside is value > iso; a value equal to iso counts as outside, so exact
// ties behave as if iso were raised by an infinitesimal. Vertices on shared
// grid edges are shared; triangles are ordered by cell, then table order.
Mesh marching_cubes(const DensityGrid& grid, double iso = kDefaultIso);

// `v x y z` lines then 1-based `f a b c` lines, shortest round-trip decimals.
std::string obj_string(const Mesh& m);
Mesh parse_obj(const std::string& text);  // throws SchemaError on malformed lines
void export_obj(const Mesh& m, const std::filesystem::path& path);
Mesh load_obj(const std::filesystem::path& path);

}  // namespace av
