#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "m3d/tensor.hpp"

// Geometry pipeline: farthest point sampling, exact brute-force KNN, patch
// grouping, synthetic shape generation and xyz/off file IO. All geometry runs
// in double so oracle comparisons can demand exactness.

namespace m3d {

using Point3 = std::array<double, 3>;

struct PointCloud {
  std::vector<Point3> pts;
  int label = -1;

  std::size_t size() const { return pts.size(); }
};

struct PatchSet {
  std::size_t L = 0, K = 0;
  std::vector<Point3> centers;              // L
  std::vector<Point3> groups;               // L*K, row-major, center-relative
  std::vector<std::size_t> source_indices;  // L*K into the source cloud
};

// Greedy max-min selection. First pick is start_index, then each pick
// maximizes distance to the selected set; ties go to the lowest index.
std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t L,
                             std::size_t start_index = 0);

// Per query, indices of the K nearest cloud points (squared L2), ties by
// lowest index. Result is M*K row-major.
std::vector<std::size_t> knn(const PointCloud& cloud,
                             const std::vector<Point3>& queries, std::size_t K);

PatchSet group_patches(const PointCloud& cloud, std::size_t L, std::size_t K,
                       std::size_t start_index = 0);

// Mean squared nearest-neighbor distance in both directions. Differentiable
// w.r.t. both point sets; exactly symmetric.
template <class T>
Tensor<T> chamfer_distance(const Tensor<T>& a, const Tensor<T>& b);

// Uniform surface samples with optional Gaussian jitter, then centered and
// scaled to a unit-radius bounding sphere. Points are emitted in antithetic
// pairs (p, -p stay on all three surfaces) so even counts have an exactly
// zero centroid. shape is one of "sphere", "cube", "torus".
PointCloud synth_shapes(const std::string& shape, std::size_t n_points,
                        std::uint64_t seed, double noise_sigma);

// format "xyz": one point per line, >=3 whitespace-separated reals, extra
// columns ignored. format "off": OFF header, vertex block, faces ignored.
PointCloud load_points(const std::string& path, const std::string& format);
void save_points(const std::string& path, const PointCloud& cloud,
                 const std::string& format);

// L*K*3 (or K*3 etc.) tensor view of packed points, untracked.
template <class T>
Tensor<T> points_to_tensor(const std::vector<Point3>& pts, Shape shape);

}  // namespace m3d
