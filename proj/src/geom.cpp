#include "lifemap/geom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include <Eigen/Eigenvalues>
#include <absl/container/flat_hash_map.h>

#include "lifemap/errors.hpp"
#include "lifemap/kernels.hpp"
#include "lifemap/spatial_index.hpp"
#include "lifemap/voxel_key.hpp"

namespace lifemap {

namespace {

void require_finite(const Point3& p) {
  if (!p.allFinite()) throw DataError("non-finite point rejected");
}

// Deterministic normal sign: +z half-space, ties broken by x then y.
Eigen::Vector3d canonical_sign(Eigen::Vector3d n) {
  constexpr double kTie = 1e-12;
  if (n.z() < -kTie || (std::abs(n.z()) <= kTie &&
                        (n.x() < -kTie || (std::abs(n.x()) <= kTie && n.y() < 0.0)))) {
    n = -n;
  }
  return n;
}

double cross2(const Point2& o, const Point2& a, const Point2& b) {
  return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

}  // namespace

// --- PointCloud -------------------------------------------------------------

PointCloud::PointCloud(std::vector<Point3> points) : points_(std::move(points)) {
  for (const auto& p : points_) require_finite(p);
}

PointCloud::PointCloud(std::vector<Point3> points, std::vector<Label> labels)
    : PointCloud(std::move(points)) {
  set_labels(std::move(labels));
}

void PointCloud::set_labels(std::vector<Label> labels) {
  if (labels.empty() && !points_.empty()) {
    labels_.clear();
    labeled_ = false;
    return;
  }
  if (labels.size() != points_.size()) {
    throw DataError("label count " + std::to_string(labels.size()) + " != point count " +
                    std::to_string(points_.size()));
  }
  labels_ = std::move(labels);
  labeled_ = true;
}

void PointCloud::reserve(std::size_t n) {
  points_.reserve(n);
  if (labeled_) labels_.reserve(n);
}

void PointCloud::push_back(const Point3& p) {
  require_finite(p);
  if (labeled_) throw DataError("labeled cloud requires a label per point");
  points_.push_back(p);
}

void PointCloud::push_back(const Point3& p, Label l) {
  require_finite(p);
  if (!labeled_) {
    if (!points_.empty()) throw DataError("unlabeled cloud cannot take a labeled point");
    labeled_ = true;
  }
  points_.push_back(p);
  labels_.push_back(l);
}

void PointCloud::append(const PointCloud& other) {
  if (other.empty()) return;
  if (empty()) {
    *this = other;
    return;
  }
  const bool keep = labeled_ && other.labeled_;
  points_.insert(points_.end(), other.points_.begin(), other.points_.end());
  if (keep) {
    labels_.insert(labels_.end(), other.labels_.begin(), other.labels_.end());
  } else {
    labels_.clear();
    labeled_ = false;
  }
}

PointCloud PointCloud::select(std::span<const std::size_t> indices) const {
  PointCloud out;
  out.points_.reserve(indices.size());
  for (std::size_t i : indices) out.points_.push_back(points_[i]);
  if (labeled_) {
    out.labels_.reserve(indices.size());
    for (std::size_t i : indices) out.labels_.push_back(labels_[i]);
    out.labeled_ = true;
  }
  return out;
}

PointCloud concatenate(std::initializer_list<const PointCloud*> parts) {
  PointCloud out;
  std::size_t total = 0;
  for (const auto* p : parts) total += p->size();
  out.reserve(total);
  for (const auto* p : parts) out.append(*p);
  return out;
}

// --- Pose -------------------------------------------------------------------

Pose::Pose(const Eigen::Quaterniond& rotation, const Point3& translation)
    : rotation_(rotation), translation_(translation) {
  const double n = rotation_.norm();
  if (!(n > 1e-12) || !std::isfinite(n)) throw DegenerateInput("zero or non-finite quaternion");
  rotation_.coeffs() /= n;
  if (!translation_.allFinite()) throw DegenerateInput("non-finite translation");
}

Pose Pose::from_matrix(const Eigen::Matrix3d& rotation, const Point3& translation) {
  // Project onto SO(3) first so slightly non-orthonormal input stays valid.
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Eigen::Matrix3d r = svd.matrixU() * svd.matrixV().transpose();
  if (r.determinant() < 0) {
    Eigen::Matrix3d u = svd.matrixU();
    u.col(2) *= -1.0;
    r = u * svd.matrixV().transpose();
  }
  return {Eigen::Quaterniond(r), translation};
}

Pose Pose::from_row_major(std::span<const double, 12> v) {
  Eigen::Matrix3d r;
  r << v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10];
  return from_matrix(r, Point3(v[3], v[7], v[11]));
}

std::array<double, 12> Pose::row_major() const {
  const Eigen::Matrix3d r = rotation_matrix();
  return {r(0, 0), r(0, 1), r(0, 2), translation_.x(), r(1, 0), r(1, 1),
          r(1, 2), translation_.y(), r(2, 0), r(2, 1), r(2, 2), translation_.z()};
}

Pose Pose::inverse() const {
  const Eigen::Quaterniond qi = rotation_.conjugate();
  return {qi, -(qi * translation_)};
}

Pose Pose::operator*(const Pose& rhs) const {
  return {rotation_ * rhs.rotation_, rotation_ * rhs.translation_ + translation_};
}

double Pose::rotation_angle() const {
  return 2.0 * std::atan2(rotation_.vec().norm(), std::abs(rotation_.w()));
}

// --- HullPolygon ------------------------------------------------------------

double HullPolygon::area() const {
  double a = 0.0;
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const auto& p = vertices[i];
    const auto& q = vertices[(i + 1) % vertices.size()];
    a += p.x() * q.y() - q.x() * p.y();
  }
  return 0.5 * a;
}

bool HullPolygon::contains(const Point2& q, double eps) const {
  if (vertices.size() < 3) return false;
  for (std::size_t i = 0; i < vertices.size(); ++i) {
    const auto& a = vertices[i];
    const auto& b = vertices[(i + 1) % vertices.size()];
    const double len = (b - a).norm();
    if (cross2(a, b, q) < -eps * len) return false;
  }
  return true;
}

// --- Operations -------------------------------------------------------------

PointCloud voxel_downsample(const PointCloud& cloud, double cell) {
  if (!(cell > 0.0)) throw DataError("voxel cell must be positive");
  struct Acc {
    Eigen::Vector3d sum = Eigen::Vector3d::Zero();
    std::size_t count = 0;
    std::size_t order = 0;
  };
  absl::flat_hash_map<VoxelKey, Acc> voxels;
  voxels.reserve(cloud.size() / 4 + 1);
  for (const auto& p : cloud.points()) {
    auto [it, inserted] = voxels.try_emplace(voxel_of(p, cell));
    if (inserted) it->second.order = voxels.size() - 1;
    it->second.sum += p;
    ++it->second.count;
  }
  std::vector<Point3> out(voxels.size());
  for (const auto& [key, acc] : voxels) {
    Point3 c = acc.sum / static_cast<double>(acc.count);
    // keep the centroid inside its voxel despite rounding
    const VoxelKey k = voxel_of(c, cell);
    if (k != key) {
      c = c.cwiseMax(Point3(key.x, key.y, key.z) * cell)
              .cwiseMin(Point3(std::nextafter((key.x + 1) * cell, -kInfinity),
                               std::nextafter((key.y + 1) * cell, -kInfinity),
                               std::nextafter((key.z + 1) * cell, -kInfinity)));
    }
    out[acc.order] = c;
  }
  return PointCloud(std::move(out));
}

Normals estimate_normals(const PointCloud& cloud, std::size_t n_neighbors) {
  if (cloud.size() < 3) throw DegenerateInput("normal estimation needs at least 3 points");
  const std::size_t k = std::clamp<std::size_t>(n_neighbors, 3, cloud.size());
  const SpatialIndex index(cloud);

  Eigen::Vector3d centroid = Eigen::Vector3d::Zero();
  Eigen::Vector3d lo = cloud[0];
  Eigen::Vector3d hi = cloud[0];
  for (const auto& p : cloud.points()) {
    centroid += p;
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  centroid /= static_cast<double>(cloud.size());
  const Eigen::Vector3d viewpoint = centroid + Eigen::Vector3d(0, 0, (hi - lo).norm() + 1.0);

  Normals out;
  out.normals.assign(cloud.size(), Eigen::Vector3d::Zero());
  out.valid.assign(cloud.size(), 0);
  const auto n = static_cast<std::int64_t>(cloud.size());
#pragma omp parallel
  {
    std::vector<Neighbor> nbrs;
#pragma omp for schedule(dynamic, 256)
    for (std::int64_t i = 0; i < n; ++i) {
      index.knn(cloud[i], k, nbrs);
      Eigen::Vector3d mean = Eigen::Vector3d::Zero();
      for (const auto& nb : nbrs) mean += cloud[nb.index];
      mean /= static_cast<double>(nbrs.size());
      Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
      for (const auto& nb : nbrs) {
        const Eigen::Vector3d d = cloud[nb.index] - mean;
        cov.noalias() += d * d.transpose();
      }
      Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
      const auto& ev = es.eigenvalues();
      if (!(ev[2] > 1e-18) || ev[1] <= 1e-9 * ev[2]) continue;
      Eigen::Vector3d normal = es.eigenvectors().col(0).normalized();
      if (normal.dot(viewpoint - cloud[i]) < 0.0) normal = -normal;
      out.normals[i] = normal;
      out.valid[i] = 1;
    }
  }
  return out;
}

PlaneModel fit_plane(std::span<const Point3> points) {
  if (points.size() < 3) throw DegenerateInput("plane fit needs at least 3 points");
  Eigen::Vector3d mean = Eigen::Vector3d::Zero();
  for (const auto& p : points) mean += p;
  mean /= static_cast<double>(points.size());
  Eigen::Matrix3d cov = Eigen::Matrix3d::Zero();
  for (const auto& p : points) {
    const Eigen::Vector3d d = p - mean;
    cov.noalias() += d * d.transpose();
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
  if (!(es.eigenvalues()[2] > 0.0) || es.eigenvalues()[1] <= 1e-12 * es.eigenvalues()[2]) {
    throw DegenerateInput("points are collinear");
  }
  PlaneModel plane;
  plane.normal = canonical_sign(es.eigenvectors().col(0).normalized());
  plane.offset = -plane.normal.dot(mean);
  return plane;
}

PlaneModel ransac_plane(const PointCloud& cloud, const RansacPlaneOptions& opts) {
  return ransac_plane(std::span<const Point3>(cloud.points()), opts);
}

PlaneModel ransac_plane(std::span<const Point3> pts, const RansacPlaneOptions& opts) {
  if (pts.size() < 3) throw DegenerateInput("RANSAC plane needs at least 3 points");
  if (!(opts.dist_thr > 0.0)) throw DataError("plane distance threshold must be positive");

  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, pts.size() - 1);
  std::size_t best_count = 0;
  Eigen::Vector3d best_n = Eigen::Vector3d::UnitZ();
  double best_d = 0.0;
  std::size_t iters = std::max<std::size_t>(opts.max_iters, 1);
  constexpr double kConfidence = 0.999;

  for (std::size_t it = 0; it < iters; ++it) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    std::size_t c = pick(rng);
    if (a == b || b == c || a == c) continue;
    Eigen::Vector3d n = (pts[b] - pts[a]).cross(pts[c] - pts[a]);
    const double norm = n.norm();
    if (norm < 1e-12) continue;
    n /= norm;
    const double d = -n.dot(pts[a]);
    const std::size_t count = kernels::plane_inlier_count(pts, n, d, opts.dist_thr);
    if (count > best_count) {
      best_count = count;
      best_n = n;
      best_d = d;
      const double w = static_cast<double>(count) / static_cast<double>(pts.size());
      const double p_fail = 1.0 - w * w * w;
      if (p_fail <= 0.0) {
        iters = it + 1;
      } else if (p_fail < 1.0) {
        const double need = std::log(1.0 - kConfidence) / std::log(p_fail);
        if (need < static_cast<double>(iters)) iters = static_cast<std::size_t>(std::ceil(need));
      }
    }
  }
  if (best_count < 3) throw DegenerateInput("no plane hypothesis with three inliers");

  std::vector<Point3> consensus;
  consensus.reserve(best_count);
  for (const auto& p : pts) {
    if (std::abs(best_n.dot(p) + best_d) <= opts.dist_thr) consensus.push_back(p);
  }
  PlaneModel plane;
  try {
    plane = fit_plane(consensus);
  } catch (const DegenerateInput&) {
    plane.normal = canonical_sign(best_n);
    plane.offset = plane.normal.dot(best_n) > 0 ? best_d : -best_d;
  }
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (std::abs(plane.signed_distance(pts[i])) <= opts.dist_thr) plane.inliers.push_back(i);
  }
  return plane;
}

std::vector<std::size_t> statistical_inliers(const PointCloud& cloud, std::size_t k,
                                             double std_mul) {
  if (k == 0) throw DataError("statistical outlier removal needs k >= 1");
  std::vector<std::size_t> keep(cloud.size());
  std::iota(keep.begin(), keep.end(), 0);
  if (cloud.size() <= k) return keep;
  const SpatialIndex index(cloud);
  const std::vector<double> mean_dist = kernels::knn_mean_distance(index, k);
  const double n = static_cast<double>(mean_dist.size());
  const double mean = kernels::deterministic_sum(mean_dist) / n;
  std::vector<double> sq(mean_dist.size());
  for (std::size_t i = 0; i < sq.size(); ++i) sq[i] = (mean_dist[i] - mean) * (mean_dist[i] - mean);
  const double stddev = std::sqrt(kernels::deterministic_sum(sq) / n);
  const double limit = mean + std_mul * stddev;
  keep.clear();
  for (std::size_t i = 0; i < mean_dist.size(); ++i) {
    if (mean_dist[i] <= limit) keep.push_back(i);
  }
  return keep;
}

PointCloud statistical_outlier_removal(const PointCloud& cloud, std::size_t k, double std_mul) {
  const auto keep = statistical_inliers(cloud, k, std_mul);
  return cloud.select(keep);
}

HullPolygon hull_of(const PointCloud& cloud) { return hull_of(std::span<const Point3>(cloud.points())); }

HullPolygon hull_of(std::span<const Point3> points) {
  std::vector<Point2> p;
  p.reserve(points.size());
  for (const auto& q : points) p.emplace_back(q.x(), q.y());
  std::sort(p.begin(), p.end(), [](const Point2& a, const Point2& b) {
    return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
  });
  p.erase(std::unique(p.begin(), p.end()), p.end());
  if (p.size() < 3) throw DegenerateInput("convex hull needs three distinct projections");

  // Andrew's monotone chain; strictly convex turns only.
  std::vector<Point2> h(2 * p.size());
  std::size_t k = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    while (k >= 2 && cross2(h[k - 2], h[k - 1], p[i]) <= 0) --k;
    h[k++] = p[i];
  }
  for (std::size_t i = p.size() - 1, t = k + 1; i > 0; --i) {
    while (k >= t && cross2(h[k - 2], h[k - 1], p[i - 1]) <= 0) --k;
    h[k++] = p[i - 1];
  }
  h.resize(k - 1);
  HullPolygon hull{std::move(h)};
  if (hull.vertices.size() < 3 || !(hull.area() > 0.0)) {
    throw DegenerateInput("ground projections are collinear");
  }
  return hull;
}

std::vector<std::size_t> hull_crop_indices(const PointCloud& cloud, const HullPolygon& hull) {
  std::vector<std::uint8_t> inside(cloud.size(), 0);
  const auto n = static_cast<std::int64_t>(cloud.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    inside[i] = hull.contains(Point2(cloud[i].x(), cloud[i].y())) ? 1 : 0;
  }
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < inside.size(); ++i) {
    if (inside[i]) keep.push_back(i);
  }
  return keep;
}

PointCloud hull_crop(const PointCloud& cloud, const HullPolygon& hull) {
  const auto keep = hull_crop_indices(cloud, hull);
  return cloud.select(keep);
}

PointCloud transform(const PointCloud& cloud, const Pose& pose) {
  std::vector<Point3> pts(cloud.size());
  const Eigen::Matrix3d r = pose.rotation_matrix();
  const Eigen::Vector3d t = pose.translation();
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = r * cloud[i] + t;
  PointCloud out(std::move(pts));
  if (cloud.has_labels()) out.set_labels(cloud.labels());
  return out;
}

namespace {
double filtered_mean(const std::vector<double>& sq, double tau2, std::size_t& used) {
  std::vector<double> kept;
  kept.reserve(sq.size());
  for (double d : sq) {
    if (d < tau2) kept.push_back(d);
  }
  used = kept.size();
  return used == 0 ? 0.0 : kernels::deterministic_sum(kept) / static_cast<double>(used);
}
}  // namespace

double chamfer_distance(const PointCloud& a, const PointCloud& b, double tau) {
  if (!(tau > 0.0)) throw DataError("chamfer tau must be positive");
  if (a.empty() || b.empty()) return kInfinity;
  const SpatialIndex ia(a);
  const SpatialIndex ib(b);
  const auto da = kernels::nearest_sq_dist(ib, a.points());
  const auto db = kernels::nearest_sq_dist(ia, b.points());
  std::size_t na = 0;
  std::size_t nb = 0;
  const double ma = filtered_mean(da, tau * tau, na);
  const double mb = filtered_mean(db, tau * tau, nb);
  if (na == 0 || nb == 0) return kInfinity;
  return ma + mb;
}

PointCloud quantize_f32(const PointCloud& cloud) {
  std::vector<Point3> pts(cloud.size());
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = cloud[i].cast<float>().cast<double>();
  PointCloud out(std::move(pts));
  if (cloud.has_labels()) out.set_labels(cloud.labels());
  return out;
}

}  // namespace lifemap
