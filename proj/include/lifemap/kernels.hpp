#pragma once

// Data-parallel inner loops shared by the pipeline stages. Every kernel has an
// OpenMP path and a plain serial path; the serial path is the reference the
// tests compare against and the baseline the benchmarks measure.

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "lifemap/geom.hpp"
#include "lifemap/spatial_index.hpp"

namespace lifemap::kernels {

enum class Exec { Serial, Parallel };

/// Caps the OpenMP worker pool (0 leaves the runtime default).
void set_max_threads(int n);
int max_threads();

/// Squared distance from each query to its nearest indexed point; +inf for an
/// empty index.
std::vector<double> nearest_sq_dist(const SpatialIndex& index, std::span<const Point3> queries,
                                    Exec exec = Exec::Parallel);

/// 1 where at least one indexed point lies within r (inclusive).
std::vector<std::uint8_t> has_neighbor_within(const SpatialIndex& index,
                                              std::span<const Point3> queries, double r,
                                              Exec exec = Exec::Parallel);

/// Mean Euclidean distance from each indexed point to its k nearest other
/// indexed points. Points with no other point get 0.
std::vector<double> knn_mean_distance(const SpatialIndex& index, std::size_t k,
                                      Exec exec = Exec::Parallel);

/// Number of points with |n.p + d| <= thr.
std::size_t plane_inlier_count(std::span<const Point3> points, const Eigen::Vector3d& normal,
                               double offset, double thr, Exec exec = Exec::Parallel);

/// Sum of values accumulated in fixed-size chunks so the result does not depend
/// on the thread count.
double deterministic_sum(std::span<const double> values, Exec exec = Exec::Parallel);

}  // namespace lifemap::kernels
