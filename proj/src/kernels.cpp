#include "lifemap/kernels.hpp"

#include <cmath>

#include <omp.h>

namespace lifemap::kernels {

namespace {
constexpr std::size_t kChunk = 4096;
}

void set_max_threads(int n) {
  if (n > 0) omp_set_num_threads(n);
}

int max_threads() { return omp_get_max_threads(); }

std::vector<double> nearest_sq_dist(const SpatialIndex& index, std::span<const Point3> queries,
                                    Exec exec) {
  std::vector<double> out(queries.size(), kInfinity);
  if (index.empty()) return out;
  const auto n = static_cast<std::int64_t>(queries.size());
  if (exec == Exec::Serial) {
    for (std::int64_t i = 0; i < n; ++i) out[i] = index.nearest(queries[i])->sq_dist;
    return out;
  }
#pragma omp parallel for schedule(dynamic, 512)
  for (std::int64_t i = 0; i < n; ++i) out[i] = index.nearest(queries[i])->sq_dist;
  return out;
}

std::vector<std::uint8_t> has_neighbor_within(const SpatialIndex& index,
                                              std::span<const Point3> queries, double r,
                                              Exec exec) {
  std::vector<std::uint8_t> out(queries.size(), 0);
  const auto n = static_cast<std::int64_t>(queries.size());
  if (exec == Exec::Serial) {
    for (std::int64_t i = 0; i < n; ++i) out[i] = index.any_within(queries[i], r) ? 1 : 0;
    return out;
  }
#pragma omp parallel for schedule(dynamic, 512)
  for (std::int64_t i = 0; i < n; ++i) out[i] = index.any_within(queries[i], r) ? 1 : 0;
  return out;
}

namespace {
double mean_knn_dist(const SpatialIndex& index, std::size_t i, std::size_t k,
                     std::vector<Neighbor>& scratch) {
  index.knn(index.point(i), k + 1, scratch);
  double sum = 0.0;
  std::size_t used = 0;
  for (const auto& nb : scratch) {
    if (nb.index == i) continue;
    if (used == k) break;
    sum += std::sqrt(nb.sq_dist);
    ++used;
  }
  return used == 0 ? 0.0 : sum / static_cast<double>(used);
}
}  // namespace

std::vector<double> knn_mean_distance(const SpatialIndex& index, std::size_t k, Exec exec) {
  std::vector<double> out(index.size(), 0.0);
  const auto n = static_cast<std::int64_t>(index.size());
  if (exec == Exec::Serial) {
    std::vector<Neighbor> scratch;
    for (std::int64_t i = 0; i < n; ++i) out[i] = mean_knn_dist(index, i, k, scratch);
    return out;
  }
#pragma omp parallel
  {
    std::vector<Neighbor> scratch;
#pragma omp for schedule(dynamic, 256)
    for (std::int64_t i = 0; i < n; ++i) out[i] = mean_knn_dist(index, i, k, scratch);
  }
  return out;
}

std::size_t plane_inlier_count(std::span<const Point3> points, const Eigen::Vector3d& normal,
                               double offset, double thr, Exec exec) {
  const auto n = static_cast<std::int64_t>(points.size());
  std::size_t count = 0;
  if (exec == Exec::Serial) {
    for (std::int64_t i = 0; i < n; ++i) {
      if (std::abs(normal.dot(points[i]) + offset) <= thr) ++count;
    }
    return count;
  }
#pragma omp parallel for reduction(+ : count) schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    if (std::abs(normal.dot(points[i]) + offset) <= thr) ++count;
  }
  return count;
}

double deterministic_sum(std::span<const double> values, Exec exec) {
  const std::size_t chunks = (values.size() + kChunk - 1) / kChunk;
  std::vector<double> partial(chunks, 0.0);
  auto sum_chunk = [&](std::size_t c) {
    const std::size_t lo = c * kChunk;
    const std::size_t hi = std::min(values.size(), lo + kChunk);
    double s = 0.0;
    for (std::size_t i = lo; i < hi; ++i) s += values[i];
    partial[c] = s;
  };
  if (exec == Exec::Serial) {
    for (std::size_t c = 0; c < chunks; ++c) sum_chunk(c);
  } else {
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < static_cast<std::int64_t>(chunks); ++c) sum_chunk(c);
  }
  double total = 0.0;
  for (double s : partial) total += s;
  return total;
}

}  // namespace lifemap::kernels
