#include "lifemap/change_detection.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <string>

#include "lifemap/errors.hpp"
#include "lifemap/kernels.hpp"
#include "lifemap/spatial_index.hpp"

namespace lifemap {

void ChangeParams::validate() const {
  auto fail = [](const std::string& what) { throw DataError("invalid change parameter: " + what); };
  if (!(r_coexist > 0)) fail("r_coexist must be > 0");
  if (!(r_overlap > 0)) fail("r_overlap must be > 0");
  if (!(h_thr >= 0)) fail("h_thr must be >= 0");
  const bool precise = bev_res >= 0.05 && bev_res <= 0.15;
  const bool efficient = bev_res >= 0.5 && bev_res <= 2.0;
  if (!precise && !efficient) fail("bev_res must lie in [0.05, 0.15] or [0.5, 2.0]");
  if (multi_layer && !(layer_height > 0)) fail("layer_height must be > 0");
  if (!(plane_dist_thr > 0)) fail("plane_dist_thr must be > 0");
  if (plane_max_iters == 0) fail("plane_max_iters must be >= 1");
}

// --- BEV --------------------------------------------------------------------

namespace {

// In-plane axes: u is the x axis (or y when the normal is near x) projected
// onto the plane, v = n x u.
std::pair<Eigen::Vector3d, Eigen::Vector3d> plane_axes(const Eigen::Vector3d& n) {
  const Eigen::Vector3d e = std::abs(n.x()) < 0.9 ? Eigen::Vector3d::UnitX() : Eigen::Vector3d::UnitY();
  const Eigen::Vector3d u = (e - n * n.dot(e)).normalized();
  return {u, n.cross(u)};
}

constexpr double kEmpty = std::numeric_limits<double>::quiet_NaN();

}  // namespace

std::optional<double> BevImage::at(std::size_t i, std::size_t j) const {
  if (i >= width || j >= height) return std::nullopt;
  const double v = cells[j * width + i];
  if (std::isnan(v)) return std::nullopt;
  return v;
}

Eigen::Vector3d BevImage::plane_coords(const Point3& p) const {
  const auto [u, v] = plane_axes(plane.normal);
  return {u.dot(p), v.dot(p), plane.signed_distance(p)};
}

std::optional<std::size_t> BevImage::pixel_of(const Point3& p) const {
  const Eigen::Vector3d c = plane_coords(p);
  const double fi = std::floor((c.x() - origin.x()) / resolution);
  const double fj = std::floor((c.y() - origin.y()) / resolution);
  if (!(fi >= 0 && fj >= 0 && fi < static_cast<double>(width) && fj < static_cast<double>(height))) {
    return std::nullopt;
  }
  return static_cast<std::size_t>(fj) * width + static_cast<std::size_t>(fi);
}

bool BevImage::same_grid(const BevImage& o) const {
  return origin == o.origin && resolution == o.resolution && width == o.width && height == o.height &&
         plane.normal == o.plane.normal && plane.offset == o.plane.offset;
}

std::size_t BevImage::occupied_count() const {
  return static_cast<std::size_t>(std::count_if(cells.begin(), cells.end(), [](double v) { return !std::isnan(v); }));
}

BevImage bev_layout(std::span<const PointCloud* const> clouds, const PlaneModel& plane, double res) {
  if (!(res > 0)) throw DataError("bev resolution must be > 0");
  BevImage img;
  img.resolution = res;
  img.plane.normal = plane.normal;
  img.plane.offset = plane.offset;
  const auto [u, v] = plane_axes(plane.normal);
  Point2 lo = Point2::Constant(kInfinity), hi = Point2::Constant(-kInfinity);
  for (const PointCloud* c : clouds) {
    for (const auto& p : c->points()) {
      const Point2 q(u.dot(p), v.dot(p));
      lo = lo.cwiseMin(q);
      hi = hi.cwiseMax(q);
    }
  }
  if (!(lo.x() <= hi.x())) return img;  // no points
  img.origin = lo;
  img.width = static_cast<std::size_t>(std::floor((hi.x() - lo.x()) / res)) + 1;
  img.height = static_cast<std::size_t>(std::floor((hi.y() - lo.y()) / res)) + 1;
  img.cells.assign(img.width * img.height, kEmpty);
  return img;
}

BevImage bev_project(const PointCloud& cloud, const BevImage& layout) {
  BevImage img = layout;
  img.cells.assign(layout.width * layout.height, kEmpty);
  for (const auto& p : cloud.points()) {
    const auto px = img.pixel_of(p);
    if (!px) continue;
    const double h = img.plane.signed_distance(p);
    double& cell = img.cells[*px];
    if (std::isnan(cell) || h > cell) cell = h;
  }
  return img;
}

BevImage bev_project(const PointCloud& cloud, const PlaneModel& plane, double res) {
  const PointCloud* one[] = {&cloud};
  return bev_project(cloud, bev_layout(one, plane, res));
}

std::vector<std::size_t> bev_change_indices(const BevImage& a, const BevImage& b, double h_thr,
                                            const PointCloud& source) {
  if (!a.same_grid(b)) throw GridMismatch("BEV images do not share a grid");
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < source.size(); ++k) {
    const auto px = a.pixel_of(source[k]);
    if (!px) continue;
    const double ha = a.cells[*px];
    const double hb = b.cells[*px];
    if (std::isnan(ha)) continue;
    if (std::isnan(hb) || std::abs(ha - hb) > h_thr) out.push_back(k);
  }
  return out;
}

PointCloud bev_change(const BevImage& a, const BevImage& b, double h_thr, const PointCloud& source) {
  return source.select(bev_change_indices(a, b, h_thr, source));
}

// --- partition --------------------------------------------------------------

namespace {

std::vector<std::uint8_t> near_flags(const PointCloud& queries, const PointCloud& targets, double r) {
  if (targets.empty()) return std::vector<std::uint8_t>(queries.size(), 0);
  const SpatialIndex index(targets);
  return kernels::has_neighbor_within(index, queries.points(), r);
}

}  // namespace

Partition spatial_partition_indices(const PointCloud& base, const PointCloud& session, double r_coexist) {
  Partition part;
  const auto base_near = near_flags(base, session, r_coexist);
  for (std::size_t i = 0; i < base.size(); ++i) (base_near[i] ? part.coexist : part.base_diff).push_back(i);
  const auto session_near = near_flags(session, base, r_coexist);
  for (std::size_t i = 0; i < session.size(); ++i) {
    if (!session_near[i]) part.session_diff.push_back(i);
  }
  return part;
}

PartitionClouds spatial_partition(const PointCloud& base, const PointCloud& session, double r_coexist) {
  const Partition p = spatial_partition_indices(base, session, r_coexist);
  return {base.select(p.base_diff), base.select(p.coexist), session.select(p.session_diff)};
}

OverlapSplit overlap_split(const PointCloud& diff, const PointCloud& coexist, double r_overlap) {
  const auto flags = near_flags(diff, coexist, r_overlap);
  std::vector<std::size_t> in, out;
  for (std::size_t i = 0; i < diff.size(); ++i) (flags[i] ? in : out).push_back(i);
  return {diff.select(in), diff.select(out)};
}

PlaneModel canonical_plane(const PointCloud& a, const PointCloud& b, const ChangeParams& params) {
  std::vector<Point3> all;
  all.reserve(a.size() + b.size());
  all.insert(all.end(), a.points().begin(), a.points().end());
  all.insert(all.end(), b.points().begin(), b.points().end());
  PlaneModel plane = ransac_plane(all, {params.plane_dist_thr, params.plane_max_iters, params.seed});
  plane.inliers.clear();
  if (plane.normal.z() < 0) {
    plane.normal = -plane.normal;
    plane.offset = -plane.offset;
  }
  return plane;
}

namespace {

// Indices of `source` in pixels where image(a_cloud) differs from image(b_cloud),
// layer by layer when requested.
std::vector<std::size_t> changed_points(const PointCloud& a_cloud, const PointCloud& b_cloud,
                                        const PointCloud& source, const BevImage& layout,
                                        const ChangeParams& params) {
  if (source.empty()) return {};
  if (!params.multi_layer) {
    return bev_change_indices(bev_project(a_cloud, layout), bev_project(b_cloud, layout), params.h_thr, source);
  }
  auto layer = [&](const Point3& p) {
    return static_cast<long>(std::floor(layout.plane.signed_distance(p) / params.layer_height));
  };
  auto split = [&](const PointCloud& c) {
    std::map<long, std::vector<std::size_t>> m;
    for (std::size_t i = 0; i < c.size(); ++i) m[layer(c[i])].push_back(i);
    return m;
  };
  const auto la = split(a_cloud), lb = split(b_cloud), ls = split(source);
  std::vector<std::size_t> out;
  for (const auto& [L, src_idx] : ls) {
    const PointCloud src = source.select(src_idx);
    const auto ia = la.find(L);
    const auto ib = lb.find(L);
    const PointCloud pa = ia == la.end() ? PointCloud() : a_cloud.select(ia->second);
    const PointCloud pb = ib == lb.end() ? PointCloud() : b_cloud.select(ib->second);
    for (std::size_t k : bev_change_indices(bev_project(pa, layout), bev_project(pb, layout), params.h_thr, src)) {
      out.push_back(src_idx[k]);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

DiffResult detect_changes(const PointCloud& base, const PointCloud& session, const ChangeParams& params) {
  params.validate();
  DiffResult r;
  const Partition part = spatial_partition_indices(base, session, params.r_coexist);
  r.coexist = base.select(part.coexist);
  r.base_diff = base.select(part.base_diff);
  r.session_diff = session.select(part.session_diff);

  auto bo = overlap_split(r.base_diff, r.coexist, params.r_overlap);
  auto so = overlap_split(r.session_diff, r.coexist, params.r_overlap);
  r.base_overlap = std::move(bo.overlap);
  r.base_nonoverlap = std::move(bo.nonoverlap);
  r.session_overlap = std::move(so.overlap);
  r.session_nonoverlap = std::move(so.nonoverlap);
  if (r.base_overlap.empty() && r.session_overlap.empty()) return r;

  const PlaneModel plane = canonical_plane(base, session, params);
  const PointCloud* both[] = {&base, &session};
  const BevImage layout = bev_layout(both, plane, params.bev_res);

  r.base_nd = r.base_overlap.select(changed_points(r.base_overlap, session, r.base_overlap, layout, params));
  if (params.pairing == ChangeParams::Pairing::Symmetric) {
    r.session_pd =
        r.session_overlap.select(changed_points(r.session_overlap, base, r.session_overlap, layout, params));
  } else {
    r.session_pd =
        r.session_overlap.select(changed_points(session, r.base_overlap, r.session_overlap, layout, params));
  }
  return r;
}

ChangePR eval_change_pr(const PointCloud& detected, const PointCloud& truth, double match_radius) {
  if (!(match_radius > 0)) throw DataError("match_radius must be > 0");
  ChangePR out;
  if (!detected.empty()) {
    const auto hit = near_flags(detected, truth, match_radius);
    const auto tp = std::count(hit.begin(), hit.end(), std::uint8_t{1});
    out.precision = static_cast<double>(tp) / static_cast<double>(detected.size());
  }
  if (!truth.empty()) {
    const auto found = near_flags(truth, detected, match_radius);
    const auto tp = std::count(found.begin(), found.end(), std::uint8_t{1});
    out.recall = static_cast<double>(tp) / static_cast<double>(truth.size());
  }
  return out;
}

}  // namespace lifemap
