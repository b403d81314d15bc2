#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "lifemap/dynamic_removal.hpp"
#include "lifemap/errors.hpp"
#include "lifemap/synth.hpp"
#include "support.hpp"

namespace lifemap {
namespace {

double lo(double p) { return std::log(p / (1.0 - p)); }

TEST(Params, Validation) {
  DynRemovalParams p;
  EXPECT_NO_THROW(p.validate());
  p.p_hit = 0.5;
  EXPECT_THROW(p.validate(), DataError);
  p = {};
  p.p_miss = 0.5;
  EXPECT_THROW(p.validate(), DataError);
  p = {};
  p.knn_radius = 0;
  EXPECT_THROW(p.validate(), DataError);
  p = {};
  p.reassign_radius = -1;
  EXPECT_THROW(p.validate(), DataError);
}

TEST(Occupancy, StraightAxisRay) {
  OccupancyGrid g;
  integrate_scan(g, Point3(0, 0, 0), PointCloud({Point3(1, 0, 0)}));
  EXPECT_NEAR(*g.value(VoxelKey{5, 0, 0}), lo(0.7), 1e-12);
  for (int i = 1; i <= 4; ++i) EXPECT_NEAR(*g.value(VoxelKey{i, 0, 0}), lo(0.4), 1e-12) << i;
  EXPECT_FALSE(g.value(VoxelKey{0, 0, 0}).has_value());
  EXPECT_EQ(g.size(), 5u);
}

TEST(Occupancy, TwoHitsOneMiss) {
  OccupancyGrid g;
  const PointCloud target({Point3(1.1, 0.1, 0.1)});
  integrate_scan(g, Point3(0.1, 0.1, 0.1), target);
  integrate_scan(g, Point3(0.1, 0.1, 0.1), target);
  integrate_scan(g, Point3(0.1, 0.1, 0.1), PointCloud({Point3(3.1, 0.1, 0.1)}));
  const double expect = 2 * std::log(0.7 / 0.3) + std::log(0.4 / 0.6);
  EXPECT_NEAR(expect, 1.289, 5e-4);
  const auto v = g.value_at(target[0]);
  ASSERT_TRUE(v);
  EXPECT_NEAR(*v, expect, 1e-9);
  EXPECT_GT(*v, g.l_occ());
}

TEST(Occupancy, HitBeatsMissWithinScan) {
  OccupancyGrid g;
  // the second ray passes through the first ray's endpoint voxel
  integrate_scan(g, Point3(0.1, 0.1, 0.1), PointCloud({Point3(1.1, 0.1, 0.1), Point3(2.1, 0.1, 0.1)}));
  EXPECT_NEAR(*g.value_at(Point3(1.1, 0.1, 0.1)), lo(0.7), 1e-12);
  // and a voxel crossed by several rays takes one miss
  OccupancyGrid h;
  integrate_scan(h, Point3(0.1, 0.1, 0.1), PointCloud({Point3(2.1, 0.1, 0.1), Point3(2.1, 0.15, 0.1)}));
  EXPECT_NEAR(*h.value_at(Point3(1.1, 0.1, 0.1)), lo(0.4), 1e-12);
}

TEST(Occupancy, ClampedToBounds) {
  OccupancyGrid g;
  for (int i = 0; i < 50; ++i) integrate_scan(g, Point3(0.1, 0.1, 0.1), PointCloud({Point3(1.1, 0.1, 0.1)}));
  for (const auto& [k, c] : g.cells()) {
    EXPECT_GE(c.value, g.l_min() - 1e-12);
    EXPECT_LE(c.value, g.l_max() + 1e-12);
  }
  EXPECT_NEAR(*g.value_at(Point3(1.1, 0.1, 0.1)), lo(0.97), 1e-12);
  EXPECT_NEAR(*g.value_at(Point3(0.5, 0.1, 0.1)), lo(0.12), 1e-12);
}

TEST(Occupancy, MaxRangeMissesOnly) {
  DynRemovalParams p;
  p.max_range = 1.0;
  OccupancyGrid g(p);
  integrate_scan(g, Point3(0.1, 0.1, 0.1), PointCloud({Point3(3.1, 0.1, 0.1)}));
  EXPECT_FALSE(g.value_at(Point3(3.1, 0.1, 0.1)).has_value());
  for (const auto& [k, c] : g.cells()) EXPECT_LT(c.value, 0.0);
}

TEST(Classify, MovingObjectScheduleIsDynamic) {
  DynRemovalParams p;
  OccupancyGrid g(p);
  const Point3 o(0.1, 0.1, 0.1);
  const Point3 object(2.1, 0.1, 0.1);
  const Point3 wall(5.1, 0.1, 0.1);
  const int early = 2, late = 8;
  for (int i = 0; i < early; ++i) integrate_scan(g, o, PointCloud({object}));
  for (int i = 0; i < late; ++i) integrate_scan(g, o, PointCloud({wall}));
  // oracle: fold the same schedule with clamping
  double v = 0;
  for (int i = 0; i < early; ++i) v = std::clamp(v + lo(0.7), lo(0.12), lo(0.97));
  for (int i = 0; i < late; ++i) v = std::clamp(v + lo(0.4), lo(0.12), lo(0.97));
  EXPECT_LT(v, 0.0);
  EXPECT_NEAR(*g.value_at(object), v, 1e-12);
  const auto labeled = classify_by_occupancy(g, PointCloud({object, wall, Point3(-9, -9, -9)}));
  EXPECT_EQ(labeled.label(0), Label::Dynamic);
  EXPECT_EQ(labeled.label(1), Label::Static);
  EXPECT_EQ(labeled.label(2), Label::Unknown);
}

// --- plane restoration ---------------------------------------------------------

struct PlaneScene {
  PointCloud cloud;
  std::vector<int> group;  // 0 ground, 1 wall, 2 small plane, 3 clutter
};

PlaneScene plane_scene(std::size_t n, double wall_frac, double small_frac, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0, 1);
  PlaneScene s;
  const auto n_wall = static_cast<std::size_t>(wall_frac * n);
  const auto n_small = static_cast<std::size_t>(small_frac * n);
  const std::size_t n_clutter = n / 10;
  const std::size_t n_ground = n - n_wall - n_small - n_clutter;
  auto add = [&](int g, const Point3& p) {
    s.cloud.push_back(p, Label::Dynamic);
    s.group.push_back(g);
  };
  for (std::size_t i = 0; i < n_ground; ++i) add(0, Point3(20 * u(rng), 20 * u(rng), 0));
  for (std::size_t i = 0; i < n_wall; ++i) add(1, Point3(25, 20 * u(rng), 5 * u(rng)));
  for (std::size_t i = 0; i < n_small; ++i) add(2, Point3(5 + 2 * u(rng), -5, 1 + 2 * u(rng)));
  for (std::size_t i = 0; i < n_clutter; ++i) add(3, Point3(2 + 15 * u(rng), 2 + 15 * u(rng), 1 + 4 * u(rng)));
  return s;
}

TEST(RestorePlanes, SecondPlaneAboveRatioRestoredThirdNot) {
  const auto s = plane_scene(4000, 0.15, 0.02, 3);
  DynRemovalParams p;
  const std::vector<std::size_t> offsets{0, s.cloud.size()};
  const auto out = restore_planes(offsets, s.cloud, p);
  std::size_t counts[4] = {}, restored[4] = {};
  for (std::size_t i = 0; i < out.size(); ++i) {
    ++counts[s.group[i]];
    restored[s.group[i]] += out.label(i) == Label::Static;
  }
  EXPECT_EQ(restored[0], counts[0]);
  EXPECT_EQ(restored[1], counts[1]);
  EXPECT_EQ(restored[2], 0u);
  EXPECT_LT(restored[3], counts[3] / 10);
}

TEST(RestorePlanes, GroundRestoredRegardlessOfOccupancy) {
  // ground is only 40% here, still the largest plane
  const auto s = plane_scene(3000, 0.0, 0.0, 4);
  DynRemovalParams p;
  p.plane_ratio_thr = 0.99;  // nothing but the first plane can pass
  const std::vector<std::size_t> offsets{0, s.cloud.size()};
  const auto out = restore_planes(offsets, s.cloud, p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (s.group[i] == 0) EXPECT_EQ(out.label(i), Label::Static);
  }
}

TEST(RestorePlanes, NeverStaticToDynamic) {
  std::mt19937_64 rng(5);
  auto s = plane_scene(3000, 0.1, 0.05, 5);
  const Label all[3] = {Label::Static, Label::Dynamic, Label::Unknown};
  for (std::size_t i = 0; i < s.cloud.size(); ++i) s.cloud.set_label(i, all[rng() % 3]);
  const std::vector<std::size_t> offsets{0, 1000, 2000, s.cloud.size()};
  DynRemovalParams p;
  p.submap_window = 1;
  const auto out = restore_planes(offsets, s.cloud, p);
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (s.cloud.label(i) == Label::Static) EXPECT_EQ(out.label(i), Label::Static);
    if (out.label(i) != s.cloud.label(i)) EXPECT_EQ(out.label(i), Label::Static);
  }
}

// --- voting / reassign ------------------------------------------------------------

PointCloud star(int n_static, int n_dynamic, double r) {
  PointCloud c;
  c.push_back(Point3::Zero(), Label::Unknown);
  const int n = n_static + n_dynamic;
  for (int i = 0; i < n; ++i) {
    const double a = 2 * M_PI * i / n;
    c.push_back(Point3(r * std::cos(a), r * std::sin(a), 0), i < n_static ? Label::Static : Label::Dynamic);
  }
  return c;
}

TEST(VoteUnknown, Majority) {
  DynRemovalParams p;
  EXPECT_EQ(vote_unknown(star(5, 2, 0.1), p).label(0), Label::Static);
  EXPECT_EQ(vote_unknown(star(2, 5, 0.1), p).label(0), Label::Dynamic);
}

TEST(VoteUnknown, TieGoesStatic) {
  DynRemovalParams p;
  p.knn_k = 6;
  EXPECT_EQ(vote_unknown(star(3, 3, 0.1), p).label(0), Label::Static);
}

TEST(VoteUnknown, EmptyNeighborhoodGoesStatic) {
  DynRemovalParams p;
  EXPECT_EQ(vote_unknown(star(0, 7, 2.0), p).label(0), Label::Static);
}

TEST(VoteUnknown, NoUnknownLeft) {
  std::mt19937_64 rng(1);
  auto c = test::random_cloud(2000, 0, 5, 2);
  std::vector<Label> l(c.size());
  for (auto& x : l) x = static_cast<Label>(rng() % 3);
  c.set_labels(l);
  const auto out = vote_unknown(c, DynRemovalParams{});
  for (std::size_t i = 0; i < out.size(); ++i) {
    EXPECT_NE(out.label(i), Label::Unknown);
    if (l[i] != Label::Unknown) EXPECT_EQ(out.label(i), l[i]);
  }
}

TEST(RadialReassign, Cases) {
  DynRemovalParams p;
  // near a wall
  PointCloud a;
  a.push_back(Point3(0, 0, 0), Label::Static);
  a.push_back(Point3(0.05, 0, 0), Label::Dynamic);
  EXPECT_EQ(radial_reassign(a, p).label(1), Label::Static);
  // isolated blob
  PointCloud b;
  b.push_back(Point3(0, 0, 0), Label::Static);
  b.push_back(Point3(1, 0, 0), Label::Dynamic);
  b.push_back(Point3(1.05, 0, 0), Label::Dynamic);
  const auto rb = radial_reassign(b, p);
  EXPECT_EQ(rb.label(1), Label::Dynamic);
  EXPECT_EQ(rb.label(2), Label::Dynamic);
  // chain: only the first link flips
  PointCloud c;
  c.push_back(Point3(0, 0, 0), Label::Static);
  for (int i = 1; i <= 4; ++i) c.push_back(Point3(0.08 * i, 0, 0), Label::Dynamic);
  const auto rc = radial_reassign(c, p);
  EXPECT_EQ(rc.label(1), Label::Static);
  for (int i = 2; i <= 4; ++i) EXPECT_EQ(rc.label(i), Label::Dynamic);
}

// --- metrics -----------------------------------------------------------------------

TEST(Metrics, F1FromTableValues) {
  const auto f1 = f1_score(0.9471, 0.9712);
  ASSERT_TRUE(f1);
  EXPECT_NEAR(*f1, 0.9590, 5e-5);
  EXPECT_FALSE(f1_score(0, 0).has_value());
}

TEST(Metrics, PerfectAndAllStatic) {
  const std::vector<Label> truth{Label::Static, Label::Dynamic, Label::Static, Label::Dynamic};
  auto m = evaluate_pr_rr_f1(truth, truth);
  EXPECT_EQ(*m.pr, 1.0);
  EXPECT_EQ(*m.rr, 1.0);
  EXPECT_EQ(*m.f1, 1.0);
  const std::vector<Label> all_static(4, Label::Static);
  m = evaluate_pr_rr_f1(all_static, truth);
  EXPECT_EQ(*m.pr, 1.0);
  EXPECT_EQ(*m.rr, 0.0);
  EXPECT_EQ(*m.f1, 0.0);
  const std::vector<Label> only_static(4, Label::Static);
  m = evaluate_pr_rr_f1(only_static, only_static);
  EXPECT_FALSE(m.rr.has_value());
  EXPECT_FALSE(m.f1.has_value());
  EXPECT_THROW(evaluate_pr_rr_f1(std::vector<Label>(3), truth), DataError);
}

// --- full pipeline -------------------------------------------------------------------

SimSession street_session(std::size_t frames, std::size_t moving, std::uint64_t seed) {
  StreetOptions so;
  so.frames = frames;
  so.moving_boxes = moving;
  so.seed = seed;
  const auto st = make_street_scene(so);
  SimConfig cfg;
  cfg.seed = seed;
  return make_session(st.scene, st.trajectory, cfg);
}

TEST(RemoveDynamic, OneMovingBox) {
  const auto sim = street_session(60, 1, 2);
  const auto r = remove_dynamic(sim.session, DynRemovalParams{});
  std::size_t td = 0, rd = 0, ts = 0, ks = 0;
  for (std::size_t i = 0; i < sim.truth.size(); ++i) {
    if (sim.truth[i] == Label::Dynamic) {
      ++td;
      rd += r.point_labels[i] == Label::Dynamic;
    } else {
      ++ts;
      ks += r.point_labels[i] == Label::Static;
    }
  }
  ASSERT_GT(td, 0u);
  EXPECT_GE(static_cast<double>(rd) / td, 0.90);
  EXPECT_GE(static_cast<double>(ks) / ts, 0.95);
}

TEST(RemoveDynamic, NoDynamicObjects) {
  const auto sim = street_session(40, 0, 3);
  const auto r = remove_dynamic(sim.session, DynRemovalParams{});
  EXPECT_LT(static_cast<double>(r.dynamic_map.size()), 0.02 * static_cast<double>(sim.truth.size()));
}

TEST(RemoveDynamic, SingleFrameGroundStatic) {
  const auto sim = street_session(1, 0, 4);
  const auto r = remove_dynamic(sim.session, DynRemovalParams{});
  const auto map = assemble_map(sim.session);
  std::size_t ground = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    if (std::abs(map[i].z()) < 0.02) {
      ++ground;
      EXPECT_EQ(r.point_labels[i], Label::Static);
    }
  }
  EXPECT_GT(ground, 100u);
}

TEST(RemoveDynamic, PartitionClosureDeterminism) {
  const auto sim = street_session(30, 2, 5);
  const auto r = remove_dynamic(sim.session, DynRemovalParams{});
  const auto map = assemble_map(sim.session);
  ASSERT_EQ(r.point_labels.size(), map.size());
  std::size_t removed = 0;
  for (auto x : r.sor_removed) removed += x;
  EXPECT_EQ(r.static_map.size() + r.dynamic_map.size() + removed, map.size());
  // rebuild both sets from the per-point verdicts
  std::size_t s = 0, d = 0;
  for (std::size_t i = 0; i < map.size(); ++i) {
    EXPECT_NE(r.point_labels[i], Label::Unknown);
    if (r.sor_removed[i]) {
      EXPECT_EQ(r.point_labels[i], Label::Dynamic);
      continue;
    }
    if (r.point_labels[i] == Label::Static) {
      EXPECT_EQ(r.static_map[s++], map[i]);
    } else {
      EXPECT_EQ(r.dynamic_map[d++], map[i]);
    }
  }
  const auto again = remove_dynamic(sim.session, DynRemovalParams{});
  EXPECT_EQ(again.point_labels, r.point_labels);
  EXPECT_EQ(again.voxel_count, r.voxel_count);
}

TEST(RemoveDynamic, CommonRigidMotionKeepsLabels) {
  const auto sim = street_session(30, 2, 6);
  // a voxel-aligned motion: 90 degree yaw and a whole-voxel shift
  const Pose m(Eigen::Quaterniond(Eigen::AngleAxisd(M_PI / 2, Eigen::Vector3d::UnitZ())), Point3(4.0, -2.0, 0.0));
  SessionMap moved = sim.session;
  for (auto& f : moved.frames) f.pose = m * f.pose;
  const auto a = remove_dynamic(sim.session, DynRemovalParams{});
  const auto b = remove_dynamic(moved, DynRemovalParams{});
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.point_labels.size(); ++i) same += a.point_labels[i] == b.point_labels[i];
  EXPECT_GE(static_cast<double>(same), 0.99 * static_cast<double>(a.point_labels.size()));
}

}  // namespace
}  // namespace lifemap
