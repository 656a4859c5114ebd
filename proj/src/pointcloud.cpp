#include "m3d/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <random>
#include <sstream>

namespace m3d {

namespace {

double sqdist(const Point3& a, const Point3& b) {
  double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

// Coordinates are quantized to a 2^-51 fixed-point grid when clouds enter the
// pipeline (synthesis and file load). On that grid, p - c and (p - c) + c are
// exact for unit-scale data, so patch normalization is losslessly invertible;
// raw doubles can be off by an ulp on reconstruction with no fix possible.
// The snap moves a coordinate by at most 2^-52, far below any data precision.
constexpr double kGrid = 2251799813685248.0;  // 2^51

double snap(double x) { return std::round(x * kGrid) / kGrid; }

void snap_cloud(PointCloud& cloud) {
  for (auto& p : cloud.pts) {
    p[0] = snap(p[0]);
    p[1] = snap(p[1]);
    p[2] = snap(p[2]);
  }
}

// p - c with an ulp nudge as a backstop for clouds that did not come through
// an ingestion path; exact already for grid-snapped coordinates.
double exact_rel(double p, double c) {
  double g = p - c;
  constexpr double inf = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 4 && g + c != p; ++i) g = std::nextafter(g, g + c < p ? inf : -inf);
  return g;
}

}  // namespace

std::vector<std::size_t> fps(const PointCloud& cloud, std::size_t L,
                             std::size_t start_index) {
  std::size_t n = cloud.size();
  if (n == 0) throw ValidationError("fps: empty cloud");
  if (L < 1 || L > n) {
    throw ValidationError("fps: L=" + std::to_string(L) + " outside [1," +
                          std::to_string(n) + "]");
  }
  if (start_index >= n) {
    throw ValidationError("fps: start_index " + std::to_string(start_index) +
                          " out of range");
  }
  std::vector<std::size_t> picked;
  picked.reserve(L);
  picked.push_back(start_index);
  std::vector<double> min_d(n);
  for (std::size_t i = 0; i < n; ++i) min_d[i] = sqdist(cloud.pts[i], cloud.pts[start_index]);
  while (picked.size() < L) {
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < n; ++i) {
      if (min_d[i] > best_d) {  // strict: ties keep the lowest index
        best_d = min_d[i];
        best = i;
      }
    }
    picked.push_back(best);
    for (std::size_t i = 0; i < n; ++i) min_d[i] = std::min(min_d[i], sqdist(cloud.pts[i], cloud.pts[best]));
  }
  return picked;
}

std::vector<std::size_t> knn(const PointCloud& cloud,
                             const std::vector<Point3>& queries, std::size_t K) {
  std::size_t n = cloud.size();
  if (K < 1 || K > n) {
    throw ValidationError("knn: K=" + std::to_string(K) + " outside [1," +
                          std::to_string(n) + "]");
  }
  std::vector<std::size_t> out;
  out.reserve(queries.size() * K);
  std::vector<std::pair<double, std::size_t>> cand(n);
  for (const auto& q : queries) {
    for (std::size_t i = 0; i < n; ++i) cand[i] = {sqdist(q, cloud.pts[i]), i};
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(K),
                      cand.end());
    for (std::size_t k = 0; k < K; ++k) out.push_back(cand[k].second);
  }
  return out;
}

PatchSet group_patches(const PointCloud& cloud, std::size_t L, std::size_t K,
                       std::size_t start_index) {
  auto center_idx = fps(cloud, L, start_index);
  std::vector<Point3> centers(L);
  for (std::size_t l = 0; l < L; ++l) centers[l] = cloud.pts[center_idx[l]];
  PatchSet ps;
  ps.L = L;
  ps.K = K;
  ps.centers = centers;
  ps.source_indices = knn(cloud, centers, K);
  ps.groups.resize(L * K);
  for (std::size_t l = 0; l < L; ++l) {
    for (std::size_t k = 0; k < K; ++k) {
      const Point3& p = cloud.pts[ps.source_indices[l * K + k]];
      ps.groups[l * K + k] = {exact_rel(p[0], centers[l][0]),
                              exact_rel(p[1], centers[l][1]),
                              exact_rel(p[2], centers[l][2])};
    }
  }
  return ps;
}

template <class T>
Tensor<T> chamfer_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.shape()[1] != 3 || b.shape()[1] != 3) {
    throw ValidationError("chamfer: expected P x 3 and Q x 3, got " +
                          shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  std::size_t p = a.shape()[0], q = b.shape()[0];
  if (p == 0 || q == 0) throw ValidationError("chamfer: empty point set");
  const auto av = a.data();
  const auto bv = b.data();
  auto nearest = [](const T* from, std::size_t nf, const T* to, std::size_t nt,
                    std::vector<std::size_t>& nn) {
    T total = T(0);
    for (std::size_t i = 0; i < nf; ++i) {
      T best = std::numeric_limits<T>::infinity();
      std::size_t bj = 0;
      for (std::size_t j = 0; j < nt; ++j) {
        T dx = from[i * 3] - to[j * 3];
        T dy = from[i * 3 + 1] - to[j * 3 + 1];
        T dz = from[i * 3 + 2] - to[j * 3 + 2];
        T d = dx * dx + dy * dy + dz * dz;
        if (d < best) {
          best = d;
          bj = j;
        }
      }
      nn[i] = bj;
      total += best;
    }
    return total / T(nf);
  };
  std::vector<std::size_t> nn_ab(p), nn_ba(q);
  T d1 = nearest(av.data(), p, bv.data(), q, nn_ab);
  T d2 = nearest(bv.data(), q, av.data(), p, nn_ba);
  auto y = Tensor<T>::scalar(d1 + d2);
  auto* tape = Tape<T>::current();
  if (tape && (a.tracked() || b.tracked())) {
    y.set_tracked(true);
    auto an = a.node(), bn = b.node(), yn = y.node();
    tape->record([tape, an, bn, yn, p, q, nn_ab = std::move(nn_ab),
                  nn_ba = std::move(nn_ba)]() {
      T g = tape->grad_buf(yn.get())[0];
      T wp = g * T(2) / T(p);
      T wq = g * T(2) / T(q);
      std::vector<T>* ga = an->tracked ? &tape->grad_buf(an.get()) : nullptr;
      std::vector<T>* gb = bn->tracked ? &tape->grad_buf(bn.get()) : nullptr;
      for (std::size_t i = 0; i < p; ++i) {
        std::size_t j = nn_ab[i];
        for (std::size_t c = 0; c < 3; ++c) {
          T d = an->val[i * 3 + c] - bn->val[j * 3 + c];
          if (ga) (*ga)[i * 3 + c] += wp * d;
          if (gb) (*gb)[j * 3 + c] -= wp * d;
        }
      }
      for (std::size_t j = 0; j < q; ++j) {
        std::size_t i = nn_ba[j];
        for (std::size_t c = 0; c < 3; ++c) {
          T d = bn->val[j * 3 + c] - an->val[i * 3 + c];
          if (gb) (*gb)[j * 3 + c] += wq * d;
          if (ga) (*ga)[i * 3 + c] -= wq * d;
        }
      }
    });
  }
  return y;
}

namespace {

Point3 sample_surface(const std::string& shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  if (shape == "sphere") {
    std::normal_distribution<double> gauss(0.0, 1.0);
    double x = gauss(rng), y = gauss(rng), z = gauss(rng);
    double r = std::sqrt(x * x + y * y + z * z);
    while (r < 1e-12) {
      x = gauss(rng);
      y = gauss(rng);
      z = gauss(rng);
      r = std::sqrt(x * x + y * y + z * z);
    }
    return {x / r, y / r, z / r};
  }
  if (shape == "cube") {
    std::size_t face = static_cast<std::size_t>(unif(rng) * 6.0);
    if (face > 5) face = 5;
    double u = 2.0 * unif(rng) - 1.0;
    double v = 2.0 * unif(rng) - 1.0;
    double s = face % 2 ? 1.0 : -1.0;
    switch (face / 2) {
      case 0: return {s, u, v};
      case 1: return {u, s, v};
      default: return {u, v, s};
    }
  }
  if (shape == "torus") {
    const double R = 1.0, r = 0.375;
    double u = 2.0 * std::numbers::pi * unif(rng);
    // rejection keeps the surface measure uniform in the tube angle
    double v;
    for (;;) {
      v = 2.0 * std::numbers::pi * unif(rng);
      if (unif(rng) * (R + r) <= R + r * std::cos(v)) break;
    }
    double w = R + r * std::cos(v);
    return {w * std::cos(u), w * std::sin(u), r * std::sin(v)};
  }
  throw ValidationError("synth_shapes: unknown shape '" + shape +
                        "' (expected sphere, cube, or torus)");
}

}  // namespace

PointCloud synth_shapes(const std::string& shape, std::size_t n_points,
                        std::uint64_t seed, double noise_sigma) {
  if (n_points < 8) throw ValidationError("synth_shapes: n_points must be >= 8");
  if (noise_sigma < 0) throw ValidationError("synth_shapes: negative noise");
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  PointCloud cloud;
  cloud.pts.reserve(n_points);
  while (cloud.pts.size() < n_points) {
    Point3 p = sample_surface(shape, rng);
    cloud.pts.push_back(p);
    if (cloud.pts.size() < n_points) cloud.pts.push_back({-p[0], -p[1], -p[2]});
  }
  if (noise_sigma > 0) {
    std::normal_distribution<double> jitter(0.0, noise_sigma);
    for (auto& p : cloud.pts) {
      p[0] += jitter(rng);
      p[1] += jitter(rng);
      p[2] += jitter(rng);
    }
  }
  Point3 centroid = {0, 0, 0};
  for (const auto& p : cloud.pts) {
    centroid[0] += p[0];
    centroid[1] += p[1];
    centroid[2] += p[2];
  }
  for (auto& c : centroid) c /= static_cast<double>(n_points);
  double max_r = 0;
  for (auto& p : cloud.pts) {
    p[0] -= centroid[0];
    p[1] -= centroid[1];
    p[2] -= centroid[2];
    max_r = std::max(max_r, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  if (max_r > 0) {
    for (auto& p : cloud.pts) {
      p[0] /= max_r;
      p[1] /= max_r;
      p[2] /= max_r;
    }
  }
  snap_cloud(cloud);
  return cloud;
}

PointCloud load_points(const std::string& path, const std::string& format) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  PointCloud cloud;
  std::string line;
  std::size_t lineno = 0;
  auto parse_point = [&](const std::string& text, std::size_t min_fields) {
    std::istringstream ss(text);
    Point3 p;
    for (std::size_t c = 0; c < min_fields; ++c) {
      if (!(ss >> p[c])) {
        throw IoError(path + ":" + std::to_string(lineno) +
                      ": expected 3 coordinates, got '" + text + "'");
      }
    }
    return p;
  };
  if (format == "xyz") {
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
      cloud.pts.push_back(parse_point(line, 3));
    }
    if (cloud.pts.empty()) throw IoError(path + ": no points");
    snap_cloud(cloud);
    return cloud;
  }
  if (format == "off") {
    if (!std::getline(in, line)) throw IoError(path + ":1: empty file");
    ++lineno;
    // strip optional BOM/whitespace
    while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
    if (line != "OFF") {
      throw IoError(path + ":1: expected OFF header, got '" + line + "'");
    }
    std::size_t nv = 0, nf = 0, ne = 0;
    for (;;) {
      if (!std::getline(in, line)) {
        throw IoError(path + ":" + std::to_string(lineno) + ": missing count line");
      }
      ++lineno;
      if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
      if (line[line.find_first_not_of(" \t")] == '#') continue;
      std::istringstream ss(line);
      if (!(ss >> nv >> nf >> ne)) {
        throw IoError(path + ":" + std::to_string(lineno) +
                      ": malformed count line '" + line + "'");
      }
      break;
    }
    if (nv == 0) throw IoError(path + ": no vertices");
    cloud.pts.reserve(nv);
    while (cloud.pts.size() < nv) {
      if (!std::getline(in, line)) {
        throw IoError(path + ":" + std::to_string(lineno) +
                      ": vertex block ended early (" +
                      std::to_string(cloud.pts.size()) + "/" +
                      std::to_string(nv) + ")");
      }
      ++lineno;
      if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
      cloud.pts.push_back(parse_point(line, 3));
    }
    snap_cloud(cloud);
    return cloud;  // faces ignored
  }
  throw ValidationError("load_points: unknown format '" + format + "'");
}

void save_points(const std::string& path, const PointCloud& cloud,
                 const std::string& format) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  char buf[96];
  auto line = [&](const Point3& p) {
    std::snprintf(buf, sizeof(buf), "%.6g %.6g %.6g\n", p[0], p[1], p[2]);
    out << buf;
  };
  if (format == "xyz") {
    for (const auto& p : cloud.pts) line(p);
  } else if (format == "off") {
    out << "OFF\n" << cloud.pts.size() << " 0 0\n";
    for (const auto& p : cloud.pts) line(p);
  } else {
    throw ValidationError("save_points: unknown format '" + format + "'");
  }
  if (!out) throw IoError("short write to " + path);
}

template <class T>
Tensor<T> points_to_tensor(const std::vector<Point3>& pts, Shape shape) {
  std::vector<T> vals;
  vals.reserve(pts.size() * 3);
  for (const auto& p : pts) {
    vals.push_back(static_cast<T>(p[0]));
    vals.push_back(static_cast<T>(p[1]));
    vals.push_back(static_cast<T>(p[2]));
  }
  return Tensor<T>::from(std::move(shape), std::move(vals));
}

template Tensor<float> chamfer_distance(const Tensor<float>&, const Tensor<float>&);
template Tensor<double> chamfer_distance(const Tensor<double>&, const Tensor<double>&);
template Tensor<float> points_to_tensor(const std::vector<Point3>&, Shape);
template Tensor<double> points_to_tensor(const std::vector<Point3>&, Shape);

}  // namespace m3d
