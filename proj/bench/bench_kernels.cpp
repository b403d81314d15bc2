// Serial reference versus OpenMP path for each kernel. Arg 0 selects the
// serial path, arg 1 the parallel one; the second arg is the point count.
#include <benchmark/benchmark.h>

#include <random>

#include "lifemap/change_detection.hpp"
#include "lifemap/kernels.hpp"
#include "lifemap/spatial_index.hpp"
#include "lifemap/synth.hpp"

namespace {

using namespace lifemap;
using kernels::Exec;

std::vector<Point3> cloud(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = Point3(u(rng), u(rng), 0.1 * u(rng));
  return pts;
}

Exec exec_of(const benchmark::State& s) { return s.range(0) == 0 ? Exec::Serial : Exec::Parallel; }

void label(benchmark::State& s) {
  s.SetLabel(s.range(0) == 0 ? "serial" : "parallel");
  s.SetItemsProcessed(s.iterations() * s.range(1));
}

void BM_NearestSqDist(benchmark::State& s) {
  const SpatialIndex idx{PointCloud(cloud(s.range(1), 1))};
  const auto q = cloud(s.range(1), 2);
  for (auto _ : s) benchmark::DoNotOptimize(kernels::nearest_sq_dist(idx, q, exec_of(s)));
  label(s);
}

void BM_HasNeighborWithin(benchmark::State& s) {
  const SpatialIndex idx{PointCloud(cloud(s.range(1), 1))};
  const auto q = cloud(s.range(1), 2);
  for (auto _ : s) benchmark::DoNotOptimize(kernels::has_neighbor_within(idx, q, 0.3, exec_of(s)));
  label(s);
}

void BM_KnnMeanDistance(benchmark::State& s) {
  const SpatialIndex idx{PointCloud(cloud(s.range(1), 1))};
  for (auto _ : s) benchmark::DoNotOptimize(kernels::knn_mean_distance(idx, 30, exec_of(s)));
  label(s);
}

void BM_PlaneInlierCount(benchmark::State& s) {
  const auto pts = cloud(s.range(1), 3);
  for (auto _ : s)
    benchmark::DoNotOptimize(kernels::plane_inlier_count(pts, Eigen::Vector3d::UnitZ(), 0.0, 0.2, exec_of(s)));
  label(s);
}

void BM_DeterministicSum(benchmark::State& s) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<double> v(s.range(1));
  for (auto& x : v) x = u(rng);
  for (auto _ : s) benchmark::DoNotOptimize(kernels::deterministic_sum(v, exec_of(s)));
  label(s);
}

// Whole change detection on two surveys of a parking lot; uses the default
// (parallel) kernels throughout.
void BM_DetectChanges(benchmark::State& s) {
  const Scene sc = make_parking_scene(10, 8, 40, 1);
  auto a = sample_surfaces(sc, std::nullopt, {-20, -20}, {20, 20}, 0.1, 1);
  auto b = sample_surfaces(sc, std::nullopt, {-20, -20}, {20, 20}, 0.1, 2);
  a.set_labels({});
  b.set_labels({});
  for (auto _ : s) benchmark::DoNotOptimize(detect_changes(a, b, ChangeParams{}));
  s.SetItemsProcessed(s.iterations() * static_cast<std::int64_t>(a.size() + b.size()));
}

void sizes(benchmark::internal::Benchmark* b) {
  for (int e : {0, 1})
    for (int n : {10000, 200000}) b->Args({e, n});
  b->Unit(benchmark::kMillisecond);
}

BENCHMARK(BM_NearestSqDist)->Apply(sizes);
BENCHMARK(BM_HasNeighborWithin)->Apply(sizes);
BENCHMARK(BM_KnnMeanDistance)->Apply(sizes);
BENCHMARK(BM_PlaneInlierCount)->Apply(sizes);
BENCHMARK(BM_DeterministicSum)->Apply(sizes);
BENCHMARK(BM_DetectChanges)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
