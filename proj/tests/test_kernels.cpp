#include <gtest/gtest.h>

#include <numeric>

#include "lifemap/kernels.hpp"
#include "support.hpp"

namespace lifemap {
namespace {

using kernels::Exec;

class KernelThreads : public ::testing::TestWithParam<int> {
 protected:
  void SetUp() override {
    saved_ = kernels::max_threads();
    kernels::set_max_threads(GetParam());
  }
  void TearDown() override { kernels::set_max_threads(saved_); }
  int saved_ = 1;
};

TEST_P(KernelThreads, NearestMatchesSerialAndBruteForce) {
  const auto pts = test::random_points(2000, 0, 10, 1);
  const auto qs = test::random_points(500, -1, 11, 2);
  const SpatialIndex idx{std::span<const Point3>(pts)};
  const auto ser = kernels::nearest_sq_dist(idx, qs, Exec::Serial);
  const auto par = kernels::nearest_sq_dist(idx, qs, Exec::Parallel);
  EXPECT_EQ(ser, par);
  for (std::size_t i = 0; i < qs.size(); i += 25) {
    double best = kInfinity;
    for (const auto& p : pts) best = std::min(best, (p - qs[i]).squaredNorm());
    EXPECT_EQ(ser[i], best);
  }
}

TEST_P(KernelThreads, NeighborFlagsMatch) {
  const auto pts = test::random_points(3000, 0, 10, 3);
  const auto qs = test::random_points(800, 0, 10, 4);
  const SpatialIndex idx{std::span<const Point3>(pts)};
  const auto ser = kernels::has_neighbor_within(idx, qs, 0.3, Exec::Serial);
  EXPECT_EQ(ser, kernels::has_neighbor_within(idx, qs, 0.3, Exec::Parallel));
  for (std::size_t i = 0; i < qs.size(); i += 40) {
    bool any = false;
    for (const auto& p : pts) any = any || (p - qs[i]).norm() <= 0.3;
    EXPECT_EQ(ser[i] != 0, any);
  }
}

TEST_P(KernelThreads, KnnMeanMatches) {
  const auto pts = test::random_points(1500, 0, 5, 5);
  const SpatialIndex idx{std::span<const Point3>(pts)};
  EXPECT_EQ(kernels::knn_mean_distance(idx, 8, Exec::Serial), kernels::knn_mean_distance(idx, 8, Exec::Parallel));
}

TEST_P(KernelThreads, PlaneCountMatches) {
  const auto pts = test::random_points(10000, -1, 1, 6);
  const Eigen::Vector3d n = Eigen::Vector3d(1, 2, 3).normalized();
  const auto ser = kernels::plane_inlier_count(pts, n, 0.1, 0.2, Exec::Serial);
  EXPECT_EQ(ser, kernels::plane_inlier_count(pts, n, 0.1, 0.2, Exec::Parallel));
  std::size_t brute = 0;
  for (const auto& p : pts) brute += std::abs(n.dot(p) + 0.1) <= 0.2;
  EXPECT_EQ(ser, brute);
}

TEST_P(KernelThreads, SumIsBitIdentical) {
  std::vector<double> v(100003);
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(-1e6, 1e6);
  for (auto& x : v) x = u(rng);
  EXPECT_EQ(kernels::deterministic_sum(v, Exec::Serial), kernels::deterministic_sum(v, Exec::Parallel));
  EXPECT_NEAR(kernels::deterministic_sum(v, Exec::Serial), std::accumulate(v.begin(), v.end(), 0.0), 1e-3);
}

INSTANTIATE_TEST_SUITE_P(Threads, KernelThreads, ::testing::Values(1, 2, 4));

}  // namespace
}  // namespace lifemap
