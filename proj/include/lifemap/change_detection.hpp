#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lifemap/geom.hpp"

namespace lifemap {

struct ChangeParams {
  double r_coexist = 0.3;
  double r_overlap = 2.0;
  double bev_res = 0.1;
  double h_thr = 0.3;
  bool multi_layer = false;
  double layer_height = 3.0;

  /// Which images the PD side compares. Symmetric: BEV(session_overlap) vs
  /// BEV(base). Literal: BEV(session) vs BEV(base_overlap), as the ND side
  /// is described, restricted to session_overlap points.
  enum class Pairing { Symmetric, Literal };
  Pairing pairing = Pairing::Symmetric;

  double plane_dist_thr = 0.1;
  std::size_t plane_max_iters = 500;
  std::uint64_t seed = 0;

  /// Radii and thresholds positive; bev_res in the precise [0.05, 0.15] or
  /// efficient [0.5, 2.0] band.
  void validate() const;
};

/// Max-height image over a plane. Pixel (i, j) covers
/// [origin + (i, j) res, origin + (i + 1, j + 1) res) in plane coordinates.
struct BevImage {
  Point2 origin = Point2::Zero();
  double resolution = 1.0;
  std::size_t width = 0;
  std::size_t height = 0;
  std::vector<double> cells;  // row-major by j, NaN when unoccupied
  PlaneModel plane;

  std::optional<double> at(std::size_t i, std::size_t j) const;
  bool occupied(std::size_t i, std::size_t j) const { return static_cast<bool>(at(i, j)); }
  /// In-plane coordinates (u, v) and signed height of p.
  Eigen::Vector3d plane_coords(const Point3& p) const;
  /// Flat pixel index of p, or nullopt outside the grid.
  std::optional<std::size_t> pixel_of(const Point3& p) const;
  bool same_grid(const BevImage& other) const;
  std::size_t occupied_count() const;
};

/// Empty image whose grid covers every point of the given clouds.
BevImage bev_layout(std::span<const PointCloud* const> clouds, const PlaneModel& plane, double res);
/// Image over the cloud's own extent.
BevImage bev_project(const PointCloud& cloud, const PlaneModel& plane, double res);
/// Image on an existing grid; points outside it are ignored.
BevImage bev_project(const PointCloud& cloud, const BevImage& layout);

/// Pixels occupied in a and either empty in b or differing by more than
/// h_thr; returns the indices of source points inside them. Throws
/// GridMismatch unless both images share one grid and plane.
std::vector<std::size_t> bev_change_indices(const BevImage& a, const BevImage& b, double h_thr,
                                            const PointCloud& source);
PointCloud bev_change(const BevImage& a, const BevImage& b, double h_thr, const PointCloud& source);

struct DiffResult {
  PointCloud coexist;  // base side
  PointCloud base_diff;
  PointCloud session_diff;
  PointCloud base_overlap;
  PointCloud base_nonoverlap;
  PointCloud session_overlap;
  PointCloud session_nonoverlap;
  PointCloud base_nd;
  PointCloud session_pd;
};

struct Partition {
  std::vector<std::size_t> base_diff;
  std::vector<std::size_t> coexist;  // base indices
  std::vector<std::size_t> session_diff;
};
/// Base points with a session point within r are coexist, the rest base_diff;
/// session points without a base point within r are session_diff.
Partition spatial_partition_indices(const PointCloud& base, const PointCloud& session, double r_coexist);

struct PartitionClouds {
  PointCloud base_diff;
  PointCloud coexist;
  PointCloud session_diff;
};
PartitionClouds spatial_partition(const PointCloud& base, const PointCloud& session, double r_coexist);

struct OverlapSplit {
  PointCloud overlap;
  PointCloud nonoverlap;
};
/// diff points with a coexist point within r_overlap are overlap.
OverlapSplit overlap_split(const PointCloud& diff, const PointCloud& coexist, double r_overlap);

/// Dominant plane of the union, normal oriented to +z.
PlaneModel canonical_plane(const PointCloud& a, const PointCloud& b, const ChangeParams& params);

DiffResult detect_changes(const PointCloud& base, const PointCloud& session, const ChangeParams& params);

struct ChangePR {
  std::optional<double> precision;  // nullopt when nothing was detected
  std::optional<double> recall;     // nullopt when the truth is empty
};
/// A detected point is true if a truth point lies within match_radius; recall
/// counts truth points with a detected point within match_radius.
ChangePR eval_change_pr(const PointCloud& detected, const PointCloud& truth, double match_radius);

}  // namespace lifemap
