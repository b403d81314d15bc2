#include "lifemap/dynamic_removal.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "lifemap/errors.hpp"
#include "lifemap/spatial_index.hpp"

namespace lifemap {

void DynRemovalParams::validate() const {
  auto fail = [](const std::string& what) { throw DataError("invalid dynamic-removal parameter: " + what); };
  if (!(voxel_size > 0)) fail("voxel_size must be > 0");
  if (!(p_hit > 0.5 && p_hit < 1.0)) fail("p_hit must lie in (0.5, 1)");
  if (!(p_miss > 0.0 && p_miss < 0.5)) fail("p_miss must lie in (0, 0.5)");
  if (!(p_min > 0.0 && p_min < p_occ && p_occ < p_max && p_max < 1.0)) {
    fail("need 0 < p_min < p_occ < p_max < 1");
  }
  if (!(max_range > 0)) fail("max_range must be > 0");
  if (submap_window == 0) fail("submap_window must be >= 1");
  if (!(plane_dist_thr > 0)) fail("plane_dist_thr must be > 0");
  if (!(plane_ratio_thr >= 0 && plane_ratio_thr <= 1)) fail("plane_ratio_thr must lie in [0, 1]");
  if (knn_k == 0) fail("knn_k must be >= 1");
  if (!(knn_radius > 0)) fail("knn_radius must be > 0");
  if (sor_k == 0) fail("sor_k must be >= 1");
  if (!(sor_std_mul >= 0)) fail("sor_std_mul must be >= 0");
  if (!(reassign_radius > 0)) fail("reassign_radius must be > 0");
  if (height_cutoff && !std::isfinite(*height_cutoff)) fail("height_cutoff must be finite");
}

double log_odds(double p) { return std::log(p / (1.0 - p)); }

// --- occupancy --------------------------------------------------------------

OccupancyGrid::OccupancyGrid(const DynRemovalParams& params)
    : voxel_size_(params.voxel_size),
      l_hit_(log_odds(params.p_hit)),
      l_miss_(log_odds(params.p_miss)),
      l_min_(log_odds(params.p_min)),
      l_max_(log_odds(params.p_max)),
      l_occ_(log_odds(params.p_occ)),
      max_range_(params.max_range) {}

std::optional<double> OccupancyGrid::value(const VoxelKey& key) const {
  const auto it = cells_.find(key);
  if (it == cells_.end()) return std::nullopt;
  return it->second.value;
}

void OccupancyGrid::integrate_scan(const Point3& origin, const PointCloud& scan) {
  const std::uint32_t id = ++scan_id_;
  std::vector<VoxelKey> hits;
  hits.reserve(scan.size());
  // endpoints first, so that the miss pass can see this scan's hits
  for (const auto& p : scan.points()) {
    if ((p - origin).norm() > max_range_) continue;
    const VoxelKey k = voxel_of(p, voxel_size_);
    auto& c = cells_[k];
    if (c.hit_scan != id) {
      c.hit_scan = id;
      hits.push_back(k);
    }
  }
  for (const auto& p : scan.points()) {
    const Eigen::Vector3d d = p - origin;
    const double len = d.norm();
    if (len == 0.0) continue;
    Point3 end = p;
    bool truncated = false;
    if (len > max_range_) {
      end = origin + d * (max_range_ / len);
      truncated = true;
    }
    auto mark = [&](const VoxelKey& k) {
      auto& c = cells_[k];
      if (c.hit_scan == id || c.miss_scan == id) return;
      c.miss_scan = id;
      c.value = std::clamp(c.value + l_miss_, l_min_, l_max_);
    };
    traverse(origin, end, mark);
    if (truncated) {
      const VoxelKey last = voxel_of(end, voxel_size_);
      if (last != voxel_of(origin, voxel_size_)) mark(last);
    }
  }
  for (const auto& k : hits) {
    auto& c = cells_[k];
    c.value = std::clamp(c.value + l_hit_, l_min_, l_max_);
  }
}

void integrate_scan(OccupancyGrid& grid, const Point3& origin, const PointCloud& scan) {
  grid.integrate_scan(origin, scan);
}

PointCloud classify_by_occupancy(const OccupancyGrid& grid, const PointCloud& map_cloud) {
  std::vector<Label> labels(map_cloud.size(), Label::Unknown);
  const auto n = static_cast<std::int64_t>(map_cloud.size());
#pragma omp parallel for schedule(static)
  for (std::int64_t i = 0; i < n; ++i) {
    const auto v = grid.value_at(map_cloud[i]);
    if (v) labels[i] = *v >= grid.l_occ() ? Label::Static : Label::Dynamic;
  }
  PointCloud out(map_cloud.points());
  out.set_labels(std::move(labels));
  return out;
}

// --- plane restoration ------------------------------------------------------

PointCloud restore_planes(std::span<const std::size_t> offsets, const PointCloud& labeled,
                          const DynRemovalParams& params) {
  if (!labeled.has_labels()) throw DataError("restore_planes needs a labeled map");
  if (offsets.empty() || offsets.back() != labeled.size()) {
    throw DataError("frame offsets do not cover the labeled map");
  }
  PointCloud out = labeled;
  const std::size_t frames = offsets.size() - 1;
  std::vector<Point3> pts;
  std::vector<std::size_t> ids;
  for (std::size_t w = 0, start = 0; start < frames; ++w, start += params.submap_window) {
    const std::size_t stop = std::min(frames, start + params.submap_window);
    const std::size_t lo = offsets[start];
    const std::size_t hi = offsets[stop];
    const std::size_t submap_size = hi - lo;
    if (submap_size < 3) continue;
    ids.resize(submap_size);
    std::iota(ids.begin(), ids.end(), lo);
    for (std::size_t plane_no = 0; plane_no < params.plane_max_count && ids.size() >= 3; ++plane_no) {
      pts.resize(ids.size());
      for (std::size_t i = 0; i < ids.size(); ++i) pts[i] = labeled[ids[i]];
      PlaneModel plane;
      try {
        plane = ransac_plane(pts, {params.plane_dist_thr, params.plane_max_iters,
                                   params.seed * 1000003ULL + w * 131ULL + plane_no});
      } catch (const DegenerateInput&) {
        break;
      }
      if (plane.inliers.empty()) break;
      const double ratio = static_cast<double>(plane.inliers.size()) / static_cast<double>(submap_size);
      if (plane_no > 0 && ratio < params.plane_ratio_thr) break;
      std::vector<std::uint8_t> taken(ids.size(), 0);
      for (std::size_t k : plane.inliers) {
        out.set_label(ids[k], Label::Static);
        taken[k] = 1;
      }
      std::size_t keep = 0;
      for (std::size_t i = 0; i < ids.size(); ++i) {
        if (!taken[i]) ids[keep++] = ids[i];
      }
      ids.resize(keep);
    }
  }
  return out;
}

PointCloud restore_planes(const SessionMap& session, const PointCloud& labeled,
                          const DynRemovalParams& params) {
  const auto offsets = frame_offsets(session);
  return restore_planes(offsets, labeled, params);
}

// --- voting and reassignment ------------------------------------------------

PointCloud vote_unknown(const PointCloud& labeled, const DynRemovalParams& params) {
  if (!labeled.has_labels()) throw DataError("vote_unknown needs a labeled map");
  std::vector<std::size_t> known;
  std::vector<std::size_t> unknown;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    (labeled.label(i) == Label::Unknown ? unknown : known).push_back(i);
  }
  PointCloud out = labeled;
  if (unknown.empty()) return out;
  std::vector<Point3> known_pts(known.size());
  for (std::size_t i = 0; i < known.size(); ++i) known_pts[i] = labeled[known[i]];
  const SpatialIndex index(known_pts);
  const double r2 = params.knn_radius * params.knn_radius;
  std::vector<Label> verdict(unknown.size(), Label::Static);
  const auto n = static_cast<std::int64_t>(unknown.size());
#pragma omp parallel
  {
    std::vector<Neighbor> nb;
#pragma omp for schedule(dynamic, 256)
    for (std::int64_t u = 0; u < n; ++u) {
      index.knn(labeled[unknown[u]], params.knn_k, nb);
      std::size_t s = 0, d = 0;
      for (const auto& x : nb) {
        if (x.sq_dist > r2) break;
        (labeled.label(known[x.index]) == Label::Static ? s : d) += 1;
      }
      verdict[u] = d > s ? Label::Dynamic : Label::Static;
    }
  }
  for (std::size_t u = 0; u < unknown.size(); ++u) out.set_label(unknown[u], verdict[u]);
  return out;
}

PointCloud radial_reassign(const PointCloud& labeled, const DynRemovalParams& params) {
  if (!labeled.has_labels()) throw DataError("radial_reassign needs a labeled map");
  std::vector<Point3> static_pts;
  std::vector<std::size_t> dynamic;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    if (labeled.label(i) == Label::Static) static_pts.push_back(labeled[i]);
    if (labeled.label(i) == Label::Dynamic) dynamic.push_back(i);
  }
  PointCloud out = labeled;
  if (dynamic.empty() || static_pts.empty()) return out;
  const SpatialIndex index(static_pts);
  std::vector<std::uint8_t> flip(dynamic.size(), 0);
  const auto n = static_cast<std::int64_t>(dynamic.size());
  const std::size_t need = std::max<std::size_t>(1, params.reassign_min_neighbors);
#pragma omp parallel for schedule(dynamic, 256)
  for (std::int64_t j = 0; j < n; ++j) {
    flip[j] = index.count_within(labeled[dynamic[j]], params.reassign_radius, need) >= need;
  }
  for (std::size_t j = 0; j < dynamic.size(); ++j) {
    if (flip[j]) out.set_label(dynamic[j], Label::Static);
  }
  return out;
}

// --- pipeline ---------------------------------------------------------------

DynRemovalResult remove_dynamic(const SessionMap& session, const DynRemovalParams& params) {
  params.validate();
  if (session.frames.empty()) throw DataError("session has no frames");
  const PointCloud map = assemble_map(session);
  const auto offsets = frame_offsets(session);

  OccupancyGrid grid(params);
  for (std::size_t f = 0; f < session.frames.size(); ++f) {
    const auto& frame = session.frames[f];
    if (frame.scan.empty()) continue;
    std::vector<Point3> world(map.points().begin() + offsets[f], map.points().begin() + offsets[f + 1]);
    grid.integrate_scan(frame.pose.translation(), PointCloud(std::move(world)));
  }

  PointCloud labeled = classify_by_occupancy(grid, map);
  if (params.height_cutoff) {
    for (std::size_t i = 0; i < labeled.size(); ++i) {
      if (labeled[i].z() > *params.height_cutoff) labeled.set_label(i, Label::Static);
    }
  }
  labeled = restore_planes(offsets, labeled, params);

  // outlier filter on the dynamic set; removed points leave the map
  std::vector<std::size_t> dyn;
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    if (labeled.label(i) == Label::Dynamic) dyn.push_back(i);
  }
  std::vector<std::uint8_t> removed(labeled.size(), 0);
  if (!dyn.empty()) {
    const PointCloud dyn_cloud = map.select(dyn);
    const auto keep = statistical_inliers(dyn_cloud, params.sor_k, params.sor_std_mul);
    std::vector<std::uint8_t> kept(dyn.size(), 0);
    for (std::size_t k : keep) kept[k] = 1;
    for (std::size_t j = 0; j < dyn.size(); ++j) {
      if (!kept[j]) removed[dyn[j]] = 1;
    }
  }
  std::vector<std::size_t> survivors;
  survivors.reserve(labeled.size());
  for (std::size_t i = 0; i < labeled.size(); ++i) {
    if (!removed[i]) survivors.push_back(i);
  }
  PointCloud rest = labeled.select(survivors);
  rest = vote_unknown(rest, params);
  rest = radial_reassign(rest, params);

  DynRemovalResult result;
  result.voxel_count = grid.size();
  result.point_labels.assign(labeled.size(), Label::Dynamic);
  std::vector<std::size_t> s_idx, d_idx;
  for (std::size_t j = 0; j < survivors.size(); ++j) {
    result.point_labels[survivors[j]] = rest.label(j);
    (rest.label(j) == Label::Static ? s_idx : d_idx).push_back(survivors[j]);
  }
  result.static_map = map.select(s_idx);
  result.dynamic_map = map.select(d_idx);
  result.sor_removed = std::move(removed);
  return result;
}

// --- metrics ----------------------------------------------------------------

std::optional<double> f1_score(double pr, double rr) {
  if (!(pr + rr > 0)) return std::nullopt;
  return 2.0 * pr * rr / (pr + rr);
}

PrRrF1 evaluate_pr_rr_f1(std::span<const Label> predicted, std::span<const Label> truth) {
  if (predicted.size() != truth.size()) {
    throw DataError("prediction has " + std::to_string(predicted.size()) + " labels, truth has " +
                    std::to_string(truth.size()));
  }
  std::size_t ts = 0, td = 0, kept = 0, rejected = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == Label::Static) {
      ++ts;
      if (predicted[i] == Label::Static) ++kept;
    } else if (truth[i] == Label::Dynamic) {
      ++td;
      if (predicted[i] == Label::Dynamic) ++rejected;
    }
  }
  PrRrF1 m;
  if (ts > 0) m.pr = static_cast<double>(kept) / static_cast<double>(ts);
  if (td > 0) m.rr = static_cast<double>(rejected) / static_cast<double>(td);
  if (m.pr && m.rr) m.f1 = f1_score(*m.pr, *m.rr);
  return m;
}

PrRrF1 evaluate_pr_rr_f1(const PointCloud& predicted, const PointCloud& truth) {
  if (!predicted.has_labels() || !truth.has_labels()) throw DataError("both clouds need labels");
  return evaluate_pr_rr_f1(predicted.labels(), truth.labels());
}

}  // namespace lifemap
