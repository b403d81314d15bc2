#include "lifemap/spatial_index.hpp"

#include <algorithm>
#include <numeric>
#include <queue>

namespace lifemap {

SpatialIndex::SpatialIndex(const PointCloud& cloud, std::size_t leaf_size)
    : SpatialIndex(std::span<const Point3>(cloud.points()), leaf_size) {}

SpatialIndex::SpatialIndex(std::span<const Point3> points, std::size_t leaf_size) {
  const auto n = static_cast<std::uint32_t>(points.size());
  index_of_.resize(n);
  std::iota(index_of_.begin(), index_of_.end(), 0U);
  points_.assign(points.begin(), points.end());
  if (n == 0) return;
  nodes_.reserve(2 * (n / std::max<std::size_t>(leaf_size, 1) + 1));
  build(0, n, std::max<std::size_t>(leaf_size, 1));
  std::vector<Point3> reordered(n);
  slot_of_.resize(n);
  for (std::uint32_t s = 0; s < n; ++s) {
    reordered[s] = points[index_of_[s]];
    slot_of_[index_of_[s]] = s;
  }
  points_ = std::move(reordered);
}

std::int32_t SpatialIndex::build(std::uint32_t begin, std::uint32_t end, std::size_t leaf_size) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.emplace_back();
  Eigen::Vector3d lo = Eigen::Vector3d::Constant(kInfinity);
  Eigen::Vector3d hi = Eigen::Vector3d::Constant(-kInfinity);
  for (std::uint32_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[index_of_[i]]);
    hi = hi.cwiseMax(points_[index_of_[i]]);
  }
  nodes_[id].lo = lo;
  nodes_[id].hi = hi;
  nodes_[id].begin = begin;
  nodes_[id].end = end;
  if (end - begin <= leaf_size) return id;

  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] - lo[axis] <= 0.0) return id;  // all points coincide
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(index_of_.begin() + begin, index_of_.begin() + mid, index_of_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     return points_[a][axis] < points_[b][axis];
                   });
  const std::int32_t left = build(begin, mid, leaf_size);
  const std::int32_t right = build(mid, end, leaf_size);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

double SpatialIndex::box_sq_dist(const Node& n, const Point3& q) {
  double d = 0.0;
  for (int a = 0; a < 3; ++a) {
    const double e = std::max({n.lo[a] - q[a], 0.0, q[a] - n.hi[a]});
    d += e * e;
  }
  return d;
}

void SpatialIndex::radius(const Point3& q, double r, std::vector<Neighbor>& out) const {
  radius_unsorted(q, r, out);
  std::sort(out.begin(), out.end(),
            [](const Neighbor& a, const Neighbor& b) { return a.index < b.index; });
}

void SpatialIndex::radius_unsorted(const Point3& q, double r, std::vector<Neighbor>& out) const {
  out.clear();
  if (nodes_.empty()) return;
  const double r2 = r * r;
  std::int32_t stack[128];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& n = nodes_[stack[--top]];
    if (box_sq_dist(n, q) > r2) continue;
    if (n.left < 0) {
      for (std::uint32_t s = n.begin; s < n.end; ++s) {
        const double d2 = (points_[s] - q).squaredNorm();
        if (d2 <= r2) out.push_back({index_of_[s], d2});
      }
    } else {
      stack[top++] = n.left;
      stack[top++] = n.right;
    }
  }
}

void SpatialIndex::radius(const Point3& q, double r, std::vector<std::size_t>& out) const {
  std::vector<Neighbor> hits;
  radius(q, r, hits);
  out.resize(hits.size());
  for (std::size_t i = 0; i < hits.size(); ++i) out[i] = hits[i].index;
}

std::vector<std::size_t> SpatialIndex::radius(const Point3& q, double r) const {
  std::vector<std::size_t> out;
  radius(q, r, out);
  return out;
}

bool SpatialIndex::any_within(const Point3& q, double r) const { return count_within(q, r, 1) > 0; }

std::size_t SpatialIndex::count_within(const Point3& q, double r, std::size_t cap) const {
  if (nodes_.empty() || cap == 0) return 0;
  const double r2 = r * r;
  std::size_t count = 0;
  std::int32_t stack[128];
  int top = 0;
  stack[top++] = 0;
  while (top > 0) {
    const Node& n = nodes_[stack[--top]];
    if (box_sq_dist(n, q) > r2) continue;
    if (n.left < 0) {
      for (std::uint32_t s = n.begin; s < n.end; ++s) {
        if ((points_[s] - q).squaredNorm() <= r2 && ++count >= cap) return count;
      }
    } else {
      // near child last so it is popped first
      const bool left_first = box_sq_dist(nodes_[n.left], q) <= box_sq_dist(nodes_[n.right], q);
      stack[top++] = left_first ? n.right : n.left;
      stack[top++] = left_first ? n.left : n.right;
    }
  }
  return count;
}

void SpatialIndex::knn(const Point3& q, std::size_t k, std::vector<Neighbor>& out) const {
  out.clear();
  if (nodes_.empty() || k == 0) return;
  k = std::min(k, points_.size());
  auto worse = [](const Neighbor& a, const Neighbor& b) {
    return a.sq_dist < b.sq_dist || (a.sq_dist == b.sq_dist && a.index < b.index);
  };
  // max-heap on (dist, index): front is the current worst
  std::vector<Neighbor>& heap = out;
  heap.reserve(k);
  std::pair<double, std::int32_t> stack[128];
  int top = 0;
  stack[top++] = {0.0, 0};
  while (top > 0) {
    const auto [bound, id] = stack[--top];
    if (heap.size() == k && bound > heap.front().sq_dist) continue;
    const Node& n = nodes_[id];
    if (n.left < 0) {
      for (std::uint32_t s = n.begin; s < n.end; ++s) {
        const Neighbor cand{index_of_[s], (points_[s] - q).squaredNorm()};
        if (heap.size() < k) {
          heap.push_back(cand);
          std::push_heap(heap.begin(), heap.end(), worse);
        } else if (worse(cand, heap.front())) {
          std::pop_heap(heap.begin(), heap.end(), worse);
          heap.back() = cand;
          std::push_heap(heap.begin(), heap.end(), worse);
        }
      }
    } else {
      const double dl = box_sq_dist(nodes_[n.left], q);
      const double dr = box_sq_dist(nodes_[n.right], q);
      if (dl <= dr) {
        stack[top++] = {dr, n.right};
        stack[top++] = {dl, n.left};
      } else {
        stack[top++] = {dl, n.left};
        stack[top++] = {dr, n.right};
      }
    }
  }
  std::sort_heap(heap.begin(), heap.end(), worse);
}

std::vector<Neighbor> SpatialIndex::knn(const Point3& q, std::size_t k) const {
  std::vector<Neighbor> out;
  knn(q, k, out);
  return out;
}

std::optional<Neighbor> SpatialIndex::nearest(const Point3& q) const {
  if (nodes_.empty()) return std::nullopt;
  Neighbor best{0, kInfinity};
  std::pair<double, std::int32_t> stack[128];
  int top = 0;
  stack[top++] = {0.0, 0};
  while (top > 0) {
    const auto [bound, id] = stack[--top];
    if (bound > best.sq_dist) continue;
    const Node& n = nodes_[id];
    if (n.left < 0) {
      for (std::uint32_t s = n.begin; s < n.end; ++s) {
        const double d2 = (points_[s] - q).squaredNorm();
        if (d2 < best.sq_dist || (d2 == best.sq_dist && index_of_[s] < best.index)) {
          best = {index_of_[s], d2};
        }
      }
    } else {
      const double dl = box_sq_dist(nodes_[n.left], q);
      const double dr = box_sq_dist(nodes_[n.right], q);
      if (dl <= dr) {
        stack[top++] = {dr, n.right};
        stack[top++] = {dl, n.left};
      } else {
        stack[top++] = {dl, n.left};
        stack[top++] = {dr, n.right};
      }
    }
  }
  return best;
}

std::vector<std::size_t> radius_neighbors(const SpatialIndex& index, const Point3& query, double r) {
  return index.radius(query, r);
}

}  // namespace lifemap
