#include <gtest/gtest.h>

#include "lifemap/errors.hpp"
#include "lifemap/synth.hpp"

namespace lifemap {
namespace {

SimConfig small_cfg(double noise = 0.0) {
  SimConfig c;
  c.horizontal_rays = 120;
  c.vertical_rays = 8;
  c.noise_sigma = noise;
  return c;
}

double box_distance(const Box& b, const Point3& p) {
  // distance to the surface of an axis-aligned box
  const Eigen::Vector3d d = (p - b.center).cwiseAbs() - b.half_extents;
  const double outside = d.cwiseMax(0.0).norm();
  const double inside = std::min(d.maxCoeff(), 0.0);
  return std::abs(outside + inside);
}

TEST(CastRay, StraightDownHitsGround) {
  const auto hit = cast_ray(Point3(0, 0, 1), Eigen::Vector3d(0, 0, -1), PlaneModel{}, {});
  EXPECT_DOUBLE_EQ(hit.t, 1.0);
  EXPECT_EQ(hit.box, -1);
}

TEST(CastRay, NearestBoxFace) {
  const std::vector<Box> boxes{{1, Point3(5.5, 0, 1), Eigen::Vector3d(0.5, 1, 1)},
                               {2, Point3(9, 0, 1), Eigen::Vector3d(0.5, 1, 1)}};
  const auto hit = cast_ray(Point3(0, 0, 1), Eigen::Vector3d(1, 0, 0), PlaneModel{}, boxes);
  EXPECT_DOUBLE_EQ(hit.t, 5.0);
  EXPECT_EQ(hit.box, 0);
}

TEST(RaycastScan, MaxRangeDropsReturns) {
  Scene s;
  s.ground.offset = 100.0;  // ground far below
  s.static_objects.push_back({1, Point3(5.5, 0, 0), Eigen::Vector3d(0.5, 50, 50)});
  SimConfig cfg = small_cfg();
  cfg.vertical_rays = 1;
  cfg.horizontal_rays = 4;
  cfg.max_range = 4.0;
  EXPECT_TRUE(raycast_scan(s, 0, Pose::identity(), cfg).empty());
  cfg.max_range = 6.0;
  const auto scan = raycast_scan(s, 0, Pose::identity(), cfg);
  ASSERT_EQ(scan.size(), 1u);
  EXPECT_NEAR(scan[0].x(), 5.0, 1e-12);
}

TEST(RaycastScan, GroundOnlyAllStatic) {
  Scene s;
  const auto scan = raycast_scan(s, 0, Pose(Eigen::Quaterniond::Identity(), Point3(0, 0, 1.8)), small_cfg(0.01));
  ASSERT_FALSE(scan.empty());
  for (auto l : scan.labels()) EXPECT_EQ(l, Label::Static);
}

TEST(SimConfig, Validation) {
  SimConfig c;
  c.horizontal_rays = 0;
  EXPECT_THROW(c.validate(), DataError);
  c = SimConfig{};
  c.noise_sigma = -1;
  EXPECT_THROW(c.validate(), DataError);
}

TEST(MakeSession, FrameCountAndStaticScene) {
  Scene s;
  s.static_objects.push_back({1, Point3(6, 0, 1), Eigen::Vector3d(1, 1, 1)});
  const auto traj = straight_trajectory(Point3(0, 0, 1.8), Point3(10, 0, 1.8), 7);
  const auto sim = make_session(s, traj, small_cfg());
  EXPECT_EQ(sim.session.frames.size(), 7u);
  for (auto l : sim.truth) EXPECT_EQ(l, Label::Static);
  EXPECT_THROW(make_session(s, {}, small_cfg()), DataError);
}

TEST(MakeSession, MovingBoxSeenAndLabelSound) {
  StreetOptions so;
  so.frames = 40;
  const auto st = make_street_scene(so);
  const auto sim = make_session(st.scene, st.trajectory, small_cfg());
  // oracle for visibility: a ray aimed at a dynamic box center returns that box
  bool expect_visible = false;
  for (std::size_t f = 0; f < st.trajectory.size() && !expect_visible; ++f) {
    const auto boxes = st.scene.boxes_at(f);
    const Point3 o = st.trajectory[f].translation();
    for (std::size_t b = st.scene.static_objects.size(); b < boxes.size(); ++b) {
      const Eigen::Vector3d dir = (boxes[b].center - o).normalized();
      const double el = std::asin(dir.z()) * 180.0 / M_PI;
      if (std::abs(el) > 15.0) continue;
      const auto hit = cast_ray(o, dir, st.scene.ground, boxes);
      expect_visible = hit.box == static_cast<int>(b) && hit.t < 50.0;
    }
  }
  ASSERT_TRUE(expect_visible);
  std::size_t dyn = 0, p = 0;
  for (std::size_t f = 0; f < sim.session.frames.size(); ++f) {
    const auto& fr = sim.session.frames[f];
    for (std::size_t j = 0; j < fr.scan.size(); ++j, ++p) {
      if (sim.truth[p] != Label::Dynamic) continue;
      ++dyn;
      const Point3 w = fr.pose.apply(fr.scan[j]);
      double best = kInfinity;
      for (const auto& d : st.scene.dynamic_objects) best = std::min(best, box_distance(d.at(f), w));
      EXPECT_LT(best, 1e-9);
    }
  }
  EXPECT_GT(dyn, 0u);
}

TEST(MakeSession, NoiseFreePointsOnSurfaces) {
  StreetOptions so;
  so.frames = 10;
  const auto st = make_street_scene(so);
  const auto sim = make_session(st.scene, st.trajectory, small_cfg());
  for (std::size_t f = 0; f < sim.session.frames.size(); ++f) {
    const auto& fr = sim.session.frames[f];
    for (std::size_t j = 0; j < fr.scan.size(); j += 7)
      EXPECT_LT(surface_residual(st.scene, f, fr.pose.apply(fr.scan[j])), 1e-9);
  }
}

TEST(MakeSession, Deterministic) {
  StreetOptions so;
  so.frames = 8;
  so.seed = 3;
  const auto a = make_street_scene(so), b = make_street_scene(so);
  auto cfg = small_cfg(0.01);
  cfg.seed = 9;
  const auto sa = make_session(a.scene, a.trajectory, cfg), sb = make_session(b.scene, b.trajectory, cfg);
  EXPECT_EQ(assemble_map(sa.session).points(), assemble_map(sb.session).points());
  EXPECT_EQ(sa.truth, sb.truth);
}

TEST(MutateScene, NoOpIsEmpty) {
  const Scene s = make_block_scene(5, 30, 1);
  const auto m = mutate_scene(s, {}, {});
  EXPECT_TRUE(m.truth_pd.empty());
  EXPECT_TRUE(m.truth_nd.empty());
  EXPECT_EQ(m.scene.static_objects.size(), 5u);
}

TEST(MutateScene, UnknownIdThrows) { EXPECT_THROW(mutate_scene(make_block_scene(3, 30, 1), {}, {999}), DataError); }

TEST(MutateScene, RemovedCarSurfacesAreNd) {
  Scene s;
  const Box car{7, Point3(0, 0, 0.75), Eigen::Vector3d(2.2, 0.9, 0.75)};
  s.static_objects.push_back(car);
  const auto m = mutate_scene(s, {}, {7}, 0.05);
  EXPECT_TRUE(m.scene.static_objects.empty());
  ASSERT_FALSE(m.truth_nd.empty());
  // every ND sample lies on the car (or on nothing else); PD holds the uncovered ground
  std::size_t on_car = 0;
  for (const auto& p : m.truth_nd.points()) on_car += box_distance(car, p) < 1e-9;
  EXPECT_EQ(on_car, m.truth_nd.size());
  for (const auto& p : m.truth_pd.points()) {
    EXPECT_NEAR(p.z(), 0.0, 1e-12);
    EXPECT_LE(std::abs(p.x()), 2.2 + 1e-9);
    EXPECT_LE(std::abs(p.y()), 0.9 + 1e-9);
  }
}

TEST(MutateScene, SameSizeSwapBalances) {
  Scene s;
  s.static_objects.push_back({1, Point3(0, 0, 0.75), Eigen::Vector3d(2.2, 0.9, 0.75)});
  const Box moved{2, Point3(10, 5, 0.75), Eigen::Vector3d(2.2, 0.9, 0.75)};
  const auto m = mutate_scene(s, {moved}, {1}, 0.05);
  // oracle: each side is exposed faces (area A) plus footprint ground (area F)
  const double a = 2 * (4.4 * 1.8) / 2 + 2 * (4.4 * 1.5) + 2 * (1.8 * 1.5);  // top + 4 sides
  const double f = 4.4 * 1.8;
  const double expect = (a + f) / (0.05 * 0.05);
  EXPECT_NEAR(static_cast<double>(m.truth_pd.size()), static_cast<double>(m.truth_nd.size()),
              0.02 * m.truth_nd.size());
  EXPECT_NEAR(static_cast<double>(m.truth_nd.size()), expect, 0.05 * expect);
}

TEST(ParkingStreet, ParkAndLeaveMovesOneCar) {
  StreetOptions so;
  so.frames = 20;
  auto ps = make_parking_street(so);
  const auto before = ps.street.scene.static_objects.size();
  const auto free_before = ps.free_slots.size();
  const auto m = park_and_leave(ps, 5);
  EXPECT_EQ(ps.street.scene.static_objects.size(), before);
  EXPECT_EQ(ps.free_slots.size(), free_before);
  EXPECT_FALSE(m.truth_nd.empty());
  EXPECT_FALSE(m.truth_pd.empty());
}

TEST(ParkingStreet, SurveyFrameMapsSessionToScene) {
  StreetOptions so;
  so.frames = 10;
  const auto ps = make_parking_street(so);
  const Pose frame(Eigen::Quaterniond(Eigen::AngleAxisd(0.3, Eigen::Vector3d::UnitZ())), Point3(2, -1, 0));
  const auto sim = survey_street(ps, 0.5, frame, small_cfg(), "s");
  for (std::size_t f = 0; f < sim.session.frames.size(); ++f) {
    const auto& fr = sim.session.frames[f];
    for (std::size_t j = 0; j < fr.scan.size(); j += 11)
      EXPECT_LT(surface_residual(ps.street.scene, f, (frame * fr.pose).apply(fr.scan[j])), 1e-9);
  }
}

}  // namespace
}  // namespace lifemap
