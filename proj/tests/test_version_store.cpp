#include <gtest/gtest.h>

#include <algorithm>
#include <array>
#include <fstream>
#include <set>

#include <json.hpp>

#include "lifemap/errors.hpp"
#include "lifemap/spatial_index.hpp"
#include "lifemap/synth.hpp"
#include "lifemap/version_store.hpp"
#include "support.hpp"

namespace lifemap {
namespace {

namespace fs = std::filesystem;

using PointSet = std::set<std::array<double, 3>>;
PointSet as_set(const PointCloud& c) {
  PointSet s;
  for (const auto& p : c.points()) s.insert({p.x(), p.y(), p.z()});
  return s;
}

// Exact multiset-free set algebra; the store keeps bit-exact float32 copies.
PointCloud set_add(const PointCloud& a, const PointCloud& b) {
  PointCloud out = a;
  out.append(b);
  return out;
}
PointCloud set_sub(const PointCloud& a, const PointCloud& b) {
  const auto drop = as_set(b);
  PointCloud out;
  for (const auto& p : a.points())
    if (!drop.count({p.x(), p.y(), p.z()})) out.push_back(p);
  return out;
}

PointCloud unlabeled(PointCloud c) {
  c.set_labels({});
  return c;
}

const Point2 kLo(-15, -15), kHi(15, 15);
constexpr double kSpacing = 0.1;

PointCloud survey(const Scene& s, std::uint64_t seed) {
  return unlabeled(sample_surfaces(s, std::nullopt, kLo, kHi, kSpacing, seed));
}

// --- pure set operations ---------------------------------------------------

TEST(PointSubtract, Identities) {
  const auto a = test::random_cloud(500, -5, 5, 1);
  EXPECT_TRUE(point_subtract(a, a, kEpsRemove).empty());
  EXPECT_EQ(point_subtract(a, PointCloud(), kEpsRemove).points(), a.points());
  EXPECT_TRUE(point_subtract(PointCloud(), a, kEpsRemove).empty());
}

TEST(PointSubtract, RadiusBoundary) {
  const PointCloud a(std::vector<Point3>{Point3(0, 0, 0), Point3(1, 0, 0), Point3(2, 0, 0)});
  const PointCloud b(std::vector<Point3>{Point3(0.0005, 0, 0), Point3(2.002, 0, 0)});
  const auto r = point_subtract(a, b, 1e-3);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_EQ(r[0], Point3(1, 0, 0));
  EXPECT_EQ(r[1], Point3(2, 0, 0));
}

TEST(PointSubtract, StoredSubsetRemovesExactlyItsSize) {
  test::TempDir dir("subtract");
  const auto a = quantize_f32(test::random_cloud(3000, -20, 20, 2));
  std::vector<std::size_t> pick;
  for (std::size_t i = 0; i < a.size(); i += 7) pick.push_back(i);
  write_cloud(a.select(pick), dir / "b.pcd");
  const auto b = read_cloud(dir / "b.pcd");
  ASSERT_EQ(b.size(), pick.size());
  EXPECT_EQ(point_subtract(a, b, kEpsRemove).size(), a.size() - b.size());
}

TEST(Dedupe, MergesNearDuplicates) {
  const PointCloud c(std::vector<Point3>{Point3(0, 0, 0), Point3(0.0004, 0, 0), Point3(1, 0, 0), Point3(0, 0, 0)});
  const auto d = dedupe(c, 1e-3);
  ASSERT_EQ(d.size(), 2u);
  EXPECT_EQ(d[0], Point3(0, 0, 0));
  EXPECT_EQ(d[1], Point3(1, 0, 0));
}

TEST(ForwardUpdate, NoChangeKeepsBase) {
  const Scene s = make_block_scene(5, 20, 4);
  const auto base = quantize_f32(survey(s, 1));
  const auto d = detect_changes(base, base, ChangeParams{});
  const auto next = forward_update(d.coexist, d.base_overlap, d.base_nonoverlap, d.session_nonoverlap, d.session_pd,
                                   d.base_nd);
  EXPECT_EQ(as_set(next), as_set(base));
}

TEST(ForwardUpdate, AddsPdRemovesNd) {
  const auto coexist = test::random_cloud(200, 0, 5, 3);
  const auto car = test::random_cloud(50, 10, 12, 4);
  const auto building = test::random_cloud(80, 20, 25, 5);
  const PointCloud base_overlap = building;
  const auto next = forward_update(coexist, base_overlap, PointCloud(), PointCloud(), car, building);
  const auto got = as_set(next);
  for (const auto& p : car.points()) EXPECT_TRUE(got.count({p.x(), p.y(), p.z()}));
  for (const auto& p : building.points()) EXPECT_FALSE(got.count({p.x(), p.y(), p.z()}));
  EXPECT_EQ(next.size(), coexist.size() + car.size());
}

TEST(EfficiencyRatio, Arithmetic) {
  const double r = efficiency_ratio(45.4, 27.2);
  EXPECT_NEAR(r, 1.0 - 27.2 / 45.4, 1e-15);
  EXPECT_EQ(std::round(r * 1000.0) / 10.0, 40.1);
  EXPECT_DOUBLE_EQ(efficiency_ratio(10, 10), 0.0);
}

// --- init ----------------------------------------------------------------------

TEST(InitStore, ThousandPoints) {
  test::TempDir dir("init");
  const auto pts = quantize_f32(test::random_cloud(1000, -10, 10, 9));
  Store s = init_store(dir / "store", pts, 0.0);
  EXPECT_EQ(s.size(), 1u);
  EXPECT_EQ(s.base_map().size(), 1000u);
  EXPECT_EQ(as_set(s.base_map()), as_set(pts));
  EXPECT_FALSE(s.boundary(0).vertices.empty());
  EXPECT_FALSE(fs::exists(s.session_dir(0) / "nd.pcd"));
  EXPECT_FALSE(fs::exists(s.session_dir(0) / "pd.pcd"));
  EXPECT_EQ(as_set(reconstruct(s, 0)), as_set(s.base_map()));
  EXPECT_THROW(init_store(dir / "store", pts, 0.0), StoreExists);
  EXPECT_THROW(s.record(1), NoSuchSession);
  EXPECT_THROW(reconstruct(s, 1), NoSuchSession);
  const Store reopened = Store::open(dir / "store");
  EXPECT_EQ(reopened.size(), 1u);
}

TEST(InitStore, OpenMissingIsDataError) {
  test::TempDir dir("open");
  EXPECT_THROW(Store::open(dir / "nothing"), DataError);
  std::ofstream(dir / "manifest.json") << "{not json";
  EXPECT_THROW(Store::open(dir.path()), DataError);
}

TEST(InitStore, SingleSessionRatioNearZero) {
  test::TempDir dir("single");
  Store s = init_store(dir / "store", survey(make_block_scene(4, 20, 1), 1), 0.0);
  EXPECT_NEAR(stats(s).ratio, 0.0, 0.05);
}

// --- commit sequence -------------------------------------------------------------

// Four entries: the initial survey, an identical re-survey, and two rounds
// of one car leaving and another arriving (the last one surveyed in a
// rotated and shifted frame). Every base map state is kept as a shadow copy.
class StoreSequence : public ::testing::Test {
 protected:
  struct Step {
    Mutation mutation;
    Box removed, added;
    PointCloud clean;  // session as committed, session frame
    Pose frame = Pose::identity();
  };

  static void SetUpTestSuite() {
    dir_ = std::make_unique<test::TempDir>("sequence");
    Scene scene = make_parking_scene(6, 6, 30, 1);
    Store store = init_store(dir_->path() / "store", voxel_downsample(survey(scene, 100), kSpacing), kSpacing);
    shadows_.push_back(store.base_map());
    ratios_.push_back(stats(store).ratio);

    steps_.push_back({});
    steps_[0].clean = survey(scene, 101);
    commit_clean(store, steps_[0].clean, "resurvey", 1.0);
    shadows_.push_back(store.base_map());
    ratios_.push_back(stats(store).ratio);

    int next_id = 2000;
    for (int k = 0; k < 2; ++k) {
      Step st;
      std::vector<const Box*> cars;
      for (const auto& b : scene.static_objects)
        if (b.half_extents.isApprox(Eigen::Vector3d(2.2, 0.9, 0.75)) || b.half_extents.isApprox(Eigen::Vector3d(0.9, 2.2, 0.75)))
          cars.push_back(&b);
      st.removed = *cars.at(k);
      Scene without = scene;
      without.static_objects.erase(std::find_if(without.static_objects.begin(), without.static_objects.end(),
                                                [&](const Box& b) { return b.id == st.removed.id; }));
      st.added = *place_car(without, next_id++, {-10, -10}, {10, 10}, 1.5, 40 + k);
      st.mutation = mutate_scene(scene, {st.added}, {st.removed.id}, 0.05);
      scene = st.mutation.scene;
      if (k == 1) {
        st.frame = Pose(Eigen::Quaterniond(Eigen::AngleAxisd(0.08, Eigen::Vector3d::UnitZ())), Point3(1.0, -0.5, 0.0));
      }
      // the session is recorded in its own frame: frame maps it into the store
      st.clean = transform(survey(scene, 200 + k), st.frame.inverse());
      commit_clean(store, st.clean, "change" + std::to_string(k), 2.0 + k);
      shadows_.push_back(store.base_map());
      ratios_.push_back(stats(store).ratio);
      steps_.push_back(st);
    }
  }

  static void TearDownTestSuite() {
    shadows_.clear();
    steps_.clear();
    ratios_.clear();
    dir_.reset();
  }

  static Store store() { return Store::open(dir_->path() / "store"); }
  static PointCloud car_points(const Box& b) { return unlabeled(sample_box(b, {}, kSpacing, 5)); }

  static std::unique_ptr<test::TempDir> dir_;
  static std::vector<PointCloud> shadows_;
  static std::vector<Step> steps_;  // steps_[t - 1] was committed as entry t
  static std::vector<double> ratios_;
};

std::unique_ptr<test::TempDir> StoreSequence::dir_;
std::vector<PointCloud> StoreSequence::shadows_;
std::vector<StoreSequence::Step> StoreSequence::steps_;
std::vector<double> StoreSequence::ratios_;

TEST_F(StoreSequence, ManifestAndLayout) {
  const Store s = store();
  ASSERT_EQ(s.size(), 4u);
  for (std::size_t t = 0; t < s.size(); ++t) {
    EXPECT_EQ(s.record(t).index, t);
    EXPECT_TRUE(fs::exists(s.session_dir(t) / "boundary.txt"));
    EXPECT_TRUE(fs::exists(s.session_dir(t) / "transform.txt"));
    EXPECT_EQ(fs::exists(s.session_dir(t) / "nd.pcd"), t > 0);
    EXPECT_EQ(fs::exists(s.session_dir(t) / "pd.pcd"), t > 0);
    EXPECT_EQ(s.record(t).base_points, shadows_[t].size());
  }
  for (std::size_t t = 1; t < s.size(); ++t) {
    EXPECT_EQ(s.base_nd_of(t).size(), s.record(t).nd_points);
    EXPECT_EQ(s.session_pd_of(t).size(), s.record(t).pd_points);
  }
  std::ifstream in(s.root() / "manifest.json");
  const auto j = nlohmann::json::parse(in);
  EXPECT_EQ(j.at("schema_version"), kStoreSchemaVersion);
  EXPECT_THROW(s.base_nd_of(0), NoSuchSession);
  EXPECT_THROW(s.record(4), NoSuchSession);
}

TEST_F(StoreSequence, ResurveyHasFewChanges) {
  const Store s = store();
  const auto n = static_cast<double>(s.record(1).session_points);
  EXPECT_LT(s.record(1).nd_points, 0.02 * n);
  EXPECT_LT(s.record(1).pd_points, 0.02 * n);
}

TEST_F(StoreSequence, MutationRecall) {
  const Store s = store();
  for (std::size_t t = 2; t < s.size(); ++t) {
    const auto& st = steps_[t - 1];
    const auto nd = eval_change_pr(s.base_nd_of(t), car_points(st.removed), 0.2);
    const auto pd = eval_change_pr(s.session_pd_of(t), car_points(st.added), 0.2);
    EXPECT_GE(*nd.recall, 0.9) << t;
    EXPECT_GE(*pd.recall, 0.9) << t;
  }
}

TEST_F(StoreSequence, AlignmentRecoversFrame) {
  const Store s = store();
  const Pose err = steps_.back().frame.inverse() * s.record(3).transform;
  EXPECT_LT(err.translation().norm(), 0.05);
  EXPECT_LT(Eigen::AngleAxisd(err.rotation()).angle() * 180.0 / M_PI, 0.5);
}

TEST_F(StoreSequence, RollbackReproducesShadows) {
  const Store s = store();
  for (std::size_t k = 0; k < s.size(); ++k) {
    const auto got = rollback(s, k);
    EXPECT_EQ(got.size(), shadows_[k].size()) << k;
    EXPECT_EQ(as_set(got), as_set(shadows_[k])) << k;
    EXPECT_EQ(as_set(reconstruct(s, k)), as_set(hull_crop(shadows_[k], s.boundary(k)))) << k;
  }
}

TEST_F(StoreSequence, LatestIsCroppedBase) {
  const Store s = store();
  const std::size_t t = s.size() - 1;
  EXPECT_EQ(as_set(reconstruct(s, t)), as_set(hull_crop(s.base_map(), s.boundary(t))));
}

TEST_F(StoreSequence, WorkedSequenceFourSessions) {
  const Store s = store();
  // base(3) + ND(2) - PD(3) + ND(1) - PD(2), then the hull of entry 1
  PointCloud m = s.base_map();
  m = set_add(m, s.base_nd_of(3));
  m = set_sub(m, s.session_pd_of(3));
  m = set_add(m, s.base_nd_of(2));
  m = set_sub(m, s.session_pd_of(2));
  EXPECT_EQ(as_set(reconstruct(s, 1)), as_set(hull_crop(m, s.boundary(1))));
}

TEST_F(StoreSequence, ReconstructKeepsSessionContent) {
  const Store s = store();
  for (std::size_t t = 1; t < s.size(); ++t) {
    const auto aligned = transform(steps_[t - 1].clean, s.record(t).transform);
    const auto rec = reconstruct(s, t);
    const SpatialIndex idx(rec);
    std::size_t kept = 0;
    for (const auto& p : aligned.points()) kept += idx.nearest(p)->sq_dist <= 0.3 * 0.3;
    EXPECT_GE(static_cast<double>(kept), 0.99 * static_cast<double>(aligned.size())) << t;
  }
}

TEST_F(StoreSequence, DiffBetweenSelfIsEmpty) {
  const Store s = store();
  const auto self = diff_between(s, 2, 2, ChangeParams{});
  EXPECT_TRUE(self.base_nd.empty());
  EXPECT_TRUE(self.session_pd.empty());
  EXPECT_THROW(diff_between(s, 0, 9, ChangeParams{}), NoSuchSession);
}

// Replaying two adjacent states finds the stored PD. The stored ND is found
// except for points that now sit within r_coexist of content the later base
// map kept, which the spatial filter reads as coexisting, or that lie outside
// the earlier hull and so are not part of its replayed state.
TEST_F(StoreSequence, DiffBetweenAdjacentMatchesStored) {
  const Store s = store();
  const ChangeParams params;
  for (std::size_t t = 1; t + 1 < s.size(); ++t) {
    const auto d = diff_between(s, t, t + 1, params);
    const auto stored_nd = s.base_nd_of(t + 1), stored_pd = s.session_pd_of(t + 1);
    const auto pd = eval_change_pr(d.session_pd, stored_pd, 0.2);
    EXPECT_GE(pd.precision.value_or(0), 0.9) << t;
    EXPECT_GE(pd.recall.value_or(0), 0.9) << t;
    const auto nd = eval_change_pr(d.base_nd, stored_nd, 0.2);
    EXPECT_GE(nd.precision.value_or(0), 0.9) << t;

    const auto later = reconstruct(s, t + 1);
    const SpatialIndex later_idx(later);
    const SpatialIndex found_idx(d.base_nd);
    const double r2 = params.r_coexist * params.r_coexist;
    for (const auto& p : stored_nd.points()) {
      const auto f = found_idx.nearest(p);
      if (f && f->sq_dist <= 0.2 * 0.2) continue;
      if (!s.boundary(t).contains(p.head<2>())) continue;  // cropped away from the replayed state
      const auto n = later_idx.nearest(p);
      ASSERT_TRUE(n);
      EXPECT_LE(n->sq_dist, r2) << t;
    }
  }
}

TEST_F(StoreSequence, DiffAcrossTwoStepsFindsBothMutations) {
  const Store s = store();
  const auto diff = diff_between(s, 1, 3, ChangeParams{});
  PointCloud removed = car_points(steps_[1].removed), added = car_points(steps_[1].added);
  removed.append(car_points(steps_[2].removed));
  added.append(car_points(steps_[2].added));
  // one removed car pokes out of the surveyed square; no session saw that part
  removed = hull_crop(removed, s.boundary(1));
  EXPECT_GE(*eval_change_pr(diff.session_pd, added, 0.2).recall, 0.85);
  // A removed car's lowest side band coexists with the ground at commit time
  // and stays in the base, so later diffs absorb the car points around it.
  // Every missed truth point must be explained by retained content nearby.
  const SpatialIndex detected(diff.base_nd), later(reconstruct(s, 3));
  std::size_t missed = 0;
  for (const auto& p : removed.points()) {
    if (detected.any_within(p, 0.2)) continue;
    ++missed;
    EXPECT_TRUE(later.any_within(p, ChangeParams{}.r_coexist + kSpacing));
  }
  EXPECT_LT(missed, removed.size() / 4);
}

TEST_F(StoreSequence, NoSessionMapPersisted) {
  const Store s = store();
  for (std::size_t t = 1; t < s.size(); ++t) {
    const auto aligned = as_set(quantize_f32(transform(steps_[t - 1].clean, s.record(t).transform)));
    for (const auto& e : fs::recursive_directory_iterator(s.root())) {
      if (e.path().extension() != ".pcd") continue;
      const auto c = read_cloud(e.path());
      if (e.path().filename() == "base_map.pcd") continue;
      // a diff file is a small part of a session, never the session itself
      EXPECT_LT(c.size(), aligned.size() / 5) << e.path();
    }
  }
  std::size_t pcd_files = 0;
  for (const auto& e : fs::recursive_directory_iterator(s.root())) pcd_files += e.path().extension() == ".pcd";
  EXPECT_EQ(pcd_files, 1 + 2 * (s.size() - 1));
}

TEST_F(StoreSequence, StatsFromFileSizes) {
  const Store s = store();
  const auto st = stats(s);
  std::uint64_t ours = fs::file_size(s.root() / "base_map.pcd");
  std::uint64_t all = 0;
  for (std::size_t t = 0; t < s.size(); ++t) {
    for (const auto& e : fs::directory_iterator(s.session_dir(t))) {
      const auto name = e.path().filename().string();
      if (name == "nd.pcd" || name == "pd.pcd" || name == "boundary.txt" || name == "base_boundary.txt")
        ours += fs::file_size(e.path());
    }
    all += s.record(t).session_bytes;
  }
  EXPECT_EQ(st.ours_bytes, ours);
  EXPECT_EQ(st.all_bytes, all);
  EXPECT_NEAR(st.ratio, 1.0 - static_cast<double>(ours) / static_cast<double>(all), 1e-12);
  for (std::size_t t = 1; t < ratios_.size(); ++t) EXPECT_GT(ratios_[t], ratios_[t - 1]) << t;
}

TEST_F(StoreSequence, FailedCommitLeavesStoreUntouched) {
  Store s = store();
  const auto before = tree_checksum(s.root());
  // unstructured points far away from anything in the base cannot be aligned
  const auto far = transform(test::random_cloud(3000, 0, 10, 2), Pose(Eigen::Quaterniond::Identity(), Point3(500, 500, 0)));
  EXPECT_THROW(commit_clean(s, far, "far", 9.0), AlignmentFailed);
  EXPECT_EQ(tree_checksum(s.root()), before);
  EXPECT_EQ(Store::open(s.root()).size(), 4u);
}

}  // namespace
}  // namespace lifemap
