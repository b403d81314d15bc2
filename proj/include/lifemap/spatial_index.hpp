#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lifemap/geom.hpp"

namespace lifemap {

struct Neighbor {
  std::size_t index;
  double sq_dist;
};

/// k-d tree over a snapshot of a point set. Immutable after construction and
/// safe to query from many threads.
class SpatialIndex {
 public:
  SpatialIndex() = default;
  explicit SpatialIndex(const PointCloud& cloud, std::size_t leaf_size = 12);
  explicit SpatialIndex(std::span<const Point3> points, std::size_t leaf_size = 12);

  std::size_t size() const { return points_.size(); }
  bool empty() const { return points_.empty(); }
  /// Point by original index.
  const Point3& point(std::size_t i) const { return points_[slot_of_[i]]; }

  /// Indices with |p - q| <= r, ascending.
  std::vector<std::size_t> radius(const Point3& q, double r) const;
  void radius(const Point3& q, double r, std::vector<std::size_t>& out) const;
  /// Same set with squared distances, ascending by index.
  void radius(const Point3& q, double r, std::vector<Neighbor>& out) const;
  /// Same set in traversal order (deterministic for a given index).
  void radius_unsorted(const Point3& q, double r, std::vector<Neighbor>& out) const;
  bool any_within(const Point3& q, double r) const;
  /// Counts points within r, stopping early once `cap` is reached.
  std::size_t count_within(const Point3& q, double r,
                           std::size_t cap = static_cast<std::size_t>(-1)) const;

  /// The k nearest points ordered by (distance, index); fewer if the index is smaller.
  std::vector<Neighbor> knn(const Point3& q, std::size_t k) const;
  void knn(const Point3& q, std::size_t k, std::vector<Neighbor>& out) const;
  std::optional<Neighbor> nearest(const Point3& q) const;

 private:
  struct Node {
    Eigen::Vector3d lo;
    Eigen::Vector3d hi;
    std::uint32_t begin = 0;
    std::uint32_t end = 0;
    std::int32_t left = -1;
    std::int32_t right = -1;
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end, std::size_t leaf_size);
  static double box_sq_dist(const Node& n, const Point3& q);

  std::vector<Point3> points_;          // reordered by tree slot
  std::vector<std::uint32_t> index_of_;  // slot -> original index
  std::vector<std::uint32_t> slot_of_;   // original index -> slot
  std::vector<Node> nodes_;
};

/// Indices i with |p_i - query| <= r.
std::vector<std::size_t> radius_neighbors(const SpatialIndex& index, const Point3& query, double r);

}  // namespace lifemap
