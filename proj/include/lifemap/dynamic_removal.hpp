#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <absl/container/flat_hash_map.h>

#include "lifemap/geom.hpp"
#include "lifemap/map_io.hpp"
#include "lifemap/voxel_key.hpp"

namespace lifemap {

struct DynRemovalParams {
  double voxel_size = 0.2;
  double p_hit = 0.7;
  double p_miss = 0.4;
  double p_min = 0.12;
  double p_max = 0.97;
  double p_occ = 0.5;
  double max_range = 80.0;

  std::size_t submap_window = 10;
  double plane_dist_thr = 0.1;
  double plane_ratio_thr = 0.10;
  std::size_t plane_max_iters = 500;
  std::size_t plane_max_count = 16;

  std::size_t knn_k = 7;
  double knn_radius = 0.5;
  std::size_t sor_k = 12;
  double sor_std_mul = 1.0;
  double reassign_radius = 0.1;
  std::size_t reassign_min_neighbors = 1;
  std::optional<double> height_cutoff;

  std::uint64_t seed = 0;

  /// Throws DataError when a field violates its range.
  void validate() const;
};

double log_odds(double p);

/// Sparse voxel hash of clamped log-odds occupancy.
class OccupancyGrid {
 public:
  explicit OccupancyGrid(const DynRemovalParams& params = {});

  double voxel_size() const { return voxel_size_; }
  double l_hit() const { return l_hit_; }
  double l_miss() const { return l_miss_; }
  double l_min() const { return l_min_; }
  double l_max() const { return l_max_; }
  double l_occ() const { return l_occ_; }
  std::size_t size() const { return cells_.size(); }

  std::optional<double> value(const VoxelKey& key) const;
  std::optional<double> value_at(const Point3& p) const { return value(voxel_of(p, voxel_size_)); }

  /// One scan in the world frame, cast from `origin`. Voxels strictly between
  /// the origin voxel and the endpoint voxel take a miss, the endpoint voxel a
  /// hit; within one scan a voxel is updated at most once per kind and a hit
  /// suppresses a miss. Rays beyond max_range stop there without a hit.
  void integrate_scan(const Point3& origin, const PointCloud& scan);

  /// Visits the voxels strictly between a and b (excluding both end voxels).
  template <typename F>
  void traverse(const Point3& a, const Point3& b, F&& visit) const;

  struct Cell {
    double value = 0.0;
    std::uint32_t hit_scan = 0;
    std::uint32_t miss_scan = 0;
  };
  const absl::flat_hash_map<VoxelKey, Cell>& cells() const { return cells_; }

 private:

  double voxel_size_;
  double l_hit_, l_miss_, l_min_, l_max_, l_occ_;
  double max_range_;
  std::uint32_t scan_id_ = 0;
  absl::flat_hash_map<VoxelKey, Cell> cells_;
};

void integrate_scan(OccupancyGrid& grid, const Point3& origin, const PointCloud& scan);

/// Static if log-odds >= l_occ, Dynamic if below, Unknown if the voxel was
/// never touched. The result carries labels.
PointCloud classify_by_occupancy(const OccupancyGrid& grid, const PointCloud& map_cloud);

/// Per non-overlapping window of `submap_window` frames, extracts planes by
/// repeated RANSAC. The first plane is restored to Static; later planes only
/// while inliers / submap size >= plane_ratio_thr. `labeled` is the assembled
/// session map in frame order.
PointCloud restore_planes(const SessionMap& session, const PointCloud& labeled,
                          const DynRemovalParams& params);
/// Same, with precomputed per-frame offsets into `labeled`.
PointCloud restore_planes(std::span<const std::size_t> frame_offsets, const PointCloud& labeled,
                          const DynRemovalParams& params);

/// Each Unknown point takes the majority of Static/Dynamic among its knn_k
/// nearest labeled neighbors within knn_radius; ties and empty sets go Static.
PointCloud vote_unknown(const PointCloud& labeled, const DynRemovalParams& params);

/// Dynamic points with at least reassign_min_neighbors Static points within
/// reassign_radius become Static. Neighbors are counted on the input labels.
PointCloud radial_reassign(const PointCloud& labeled, const DynRemovalParams& params);

struct DynRemovalResult {
  PointCloud static_map;
  PointCloud dynamic_map;
  /// Final label of every assembled point; points dropped by the outlier
  /// filter are reported as Dynamic.
  std::vector<Label> point_labels;
  std::vector<std::uint8_t> sor_removed;
  std::size_t voxel_count = 0;
};

DynRemovalResult remove_dynamic(const SessionMap& session, const DynRemovalParams& params);

struct PrRrF1 {
  std::optional<double> pr;
  std::optional<double> rr;
  std::optional<double> f1;
};

/// Harmonic mean; undefined when pr + rr = 0.
std::optional<double> f1_score(double pr, double rr);

/// PR = true-static points predicted Static / true-static points; RR =
/// true-dynamic points predicted Dynamic / true-dynamic points.
PrRrF1 evaluate_pr_rr_f1(std::span<const Label> predicted, std::span<const Label> truth);
PrRrF1 evaluate_pr_rr_f1(const PointCloud& predicted, const PointCloud& truth);

// --- implementation ---------------------------------------------------------

template <typename F>
void OccupancyGrid::traverse(const Point3& a, const Point3& b, F&& visit) const {
  const VoxelKey start = voxel_of(a, voxel_size_);
  const VoxelKey end = voxel_of(b, voxel_size_);
  const Eigen::Vector3d d = b - a;
  const std::int64_t s[3] = {start.x, start.y, start.z};
  const std::int64_t e[3] = {end.x, end.y, end.z};
  std::int64_t cur[3] = {s[0], s[1], s[2]};
  std::int64_t remaining[3];
  int step[3];
  double t_max[3];
  double t_delta[3];
  std::int64_t total = 0;
  for (int i = 0; i < 3; ++i) {
    step[i] = e[i] > s[i] ? 1 : (e[i] < s[i] ? -1 : 0);
    remaining[i] = e[i] > s[i] ? e[i] - s[i] : s[i] - e[i];
    total += remaining[i];
    if (step[i] == 0 || d[i] == 0.0) {
      t_max[i] = kInfinity;
      t_delta[i] = kInfinity;
      continue;
    }
    const double boundary = (static_cast<double>(cur[i]) + (step[i] > 0 ? 1.0 : 0.0)) * voxel_size_;
    t_max[i] = (boundary - a[i]) / d[i];
    t_delta[i] = voxel_size_ / std::abs(d[i]);
  }
  for (std::int64_t n = 0; n < total; ++n) {
    // pick the nearest boundary among axes that still have steps left, so the
    // walk always terminates exactly in the endpoint voxel
    int axis = -1;
    for (int i = 0; i < 3; ++i) {
      if (remaining[i] == 0) continue;
      if (axis < 0 || t_max[i] < t_max[axis]) axis = i;
    }
    cur[axis] += step[axis];
    t_max[axis] += t_delta[axis];
    --remaining[axis];
    if (n + 1 == total) break;
    visit(VoxelKey{static_cast<std::int32_t>(cur[0]), static_cast<std::int32_t>(cur[1]),
                   static_cast<std::int32_t>(cur[2])});
  }
}

}  // namespace lifemap
