#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace lifemap {

/// Coordinates are meters, float64 during computation.
using Point3 = Eigen::Vector3d;
using Point2 = Eigen::Vector2d;

enum class Label : std::uint8_t { Static = 0, Dynamic = 1, Unknown = 2 };

/// Dense point array with optional per-point labels.
///
/// Non-finite points are rejected at insertion. Labels, when present, hold
/// exactly one entry per point.
class PointCloud {
 public:
  PointCloud() = default;
  explicit PointCloud(std::vector<Point3> points);
  PointCloud(std::vector<Point3> points, std::vector<Label> labels);

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }

  const std::vector<Point3>& points() const { return points_; }
  const Point3& operator[](std::size_t i) const { return points_[i]; }

  bool has_labels() const { return labeled_; }
  const std::vector<Label>& labels() const { return labels_; }
  Label label(std::size_t i) const { return labels_[i]; }
  void set_label(std::size_t i, Label l) { labels_[i] = l; }
  /// Attaches labels (size must match) or, with an empty vector, drops them.
  void set_labels(std::vector<Label> labels);

  void reserve(std::size_t n);
  void push_back(const Point3& p);
  void push_back(const Point3& p, Label l);

  /// Concatenation. The result keeps labels only if both sides carry them
  /// (an empty receiver adopts the other side's labeling).
  void append(const PointCloud& other);

  /// Points at the given indices, in the given order.
  PointCloud select(std::span<const std::size_t> indices) const;

 private:
  std::vector<Point3> points_;
  std::vector<Label> labels_;
  bool labeled_ = false;
};

PointCloud concatenate(std::initializer_list<const PointCloud*> parts);

/// Rigid transform p -> R p + t with a unit quaternion rotation.
class Pose {
 public:
  Pose() = default;
  /// The quaternion is normalized; a zero quaternion throws DegenerateInput.
  Pose(const Eigen::Quaterniond& rotation, const Point3& translation);
  static Pose identity() { return {}; }
  static Pose from_matrix(const Eigen::Matrix3d& rotation, const Point3& translation);
  /// Row-major 3x4 [R | t].
  static Pose from_row_major(std::span<const double, 12> values);

  const Eigen::Quaterniond& rotation() const { return rotation_; }
  const Point3& translation() const { return translation_; }
  Eigen::Matrix3d rotation_matrix() const { return rotation_.toRotationMatrix(); }
  std::array<double, 12> row_major() const;

  Point3 apply(const Point3& p) const { return rotation_ * p + translation_; }
  Pose inverse() const;
  Pose operator*(const Pose& rhs) const;

  /// Rotation angle in radians and translation norm of this transform.
  double rotation_angle() const;
  double translation_norm() const { return translation_.norm(); }

 private:
  Eigen::Quaterniond rotation_ = Eigen::Quaterniond::Identity();
  Point3 translation_ = Point3::Zero();
};

/// Plane {p : normal.p + offset = 0}.
struct PlaneModel {
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  double offset = 0.0;
  std::vector<std::size_t> inliers;

  double signed_distance(const Point3& p) const { return normal.dot(p) + offset; }
};

/// Convex polygon in the ground (x, y) plane, counter-clockwise.
struct HullPolygon {
  std::vector<Point2> vertices;

  double area() const;
  /// Inside or on the boundary, with a tolerance of `eps` meters.
  bool contains(const Point2& q, double eps = 1e-9) const;
};

struct Normals {
  std::vector<Eigen::Vector3d> normals;
  /// 0 where the neighborhood was degenerate (rank < 2).
  std::vector<std::uint8_t> valid;
};

/// Centroid of each non-empty voxel of edge `cell`, in order of first
/// occurrence. Labels, if present, are dropped.
PointCloud voxel_downsample(const PointCloud& cloud, double cell);

/// Least-eigenvalue eigenvector of each point's k-neighborhood covariance,
/// oriented toward a viewpoint above the cloud centroid.
Normals estimate_normals(const PointCloud& cloud, std::size_t n_neighbors);

struct RansacPlaneOptions {
  double dist_thr = 0.1;
  std::size_t max_iters = 500;
  std::uint64_t seed = 0;
};

/// Dominant plane by RANSAC; the consensus set is refit by least squares and
/// inliers are recomputed against the refit. Throws DegenerateInput for fewer
/// than three points or when every sample is collinear.
PlaneModel ransac_plane(const PointCloud& cloud, const RansacPlaneOptions& opts);
PlaneModel ransac_plane(std::span<const Point3> points, const RansacPlaneOptions& opts);

/// Least-squares plane through the points (smallest-eigenvalue direction).
PlaneModel fit_plane(std::span<const Point3> points);

/// Indices of points kept by statistical outlier removal.
std::vector<std::size_t> statistical_inliers(const PointCloud& cloud, std::size_t k, double std_mul);
PointCloud statistical_outlier_removal(const PointCloud& cloud, std::size_t k, double std_mul);

/// 2D convex hull of the (x, y) projections. Throws DegenerateInput when the
/// projections are collinear or fewer than three.
HullPolygon hull_of(const PointCloud& cloud);
HullPolygon hull_of(std::span<const Point3> points);
std::vector<std::size_t> hull_crop_indices(const PointCloud& cloud, const HullPolygon& hull);
PointCloud hull_crop(const PointCloud& cloud, const HullPolygon& hull);

PointCloud transform(const PointCloud& cloud, const Pose& pose);

/// Chamfer distance with outlier cutoff: both clouds are restricted to the
/// points whose nearest neighbor in the other cloud is closer than tau, then
/// the mean squared nearest-neighbor distances of both directions are summed.
/// Returns +inf if either restricted set (or either input) is empty.
double chamfer_distance(const PointCloud& a, const PointCloud& b, double tau);

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

/// Rounds every coordinate to the nearest float32 value.
PointCloud quantize_f32(const PointCloud& cloud);

}  // namespace lifemap
