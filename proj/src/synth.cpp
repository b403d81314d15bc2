#include "lifemap/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "lifemap/errors.hpp"

namespace lifemap {

namespace {

constexpr double kRayEps = 1e-9;

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

bool inside_box(const Box& b, const Point3& p, double margin) {
  const Eigen::Vector3d d = (p - b.center).cwiseAbs();
  return (d.array() < (b.half_extents.array() - margin)).all();
}

double ground_height(const PlaneModel& g, double x, double y) {
  return -(g.normal.x() * x + g.normal.y() * y + g.offset) / g.normal.z();
}

bool on_ground(const Box& b, const PlaneModel& g) {
  const double z0 = ground_height(g, b.center.x(), b.center.y());
  return b.center.z() - b.half_extents.z() <= z0 + 1e-6;
}

double box_surface_distance(const Box& b, const Point3& p) {
  const Eigen::Vector3d q = (p - b.center).cwiseAbs() - b.half_extents;
  const double outside = q.cwiseMax(0.0).norm();
  const double inside = std::min(q.maxCoeff(), 0.0);
  return outside > 0 ? outside : -inside;
}

// Samples a rectangle spanned from `corner` along u (length lu) and v (length lv).
template <typename Keep>
void sample_rect(const Point3& corner, const Eigen::Vector3d& u, double lu, const Eigen::Vector3d& v,
                 double lv, double spacing, std::mt19937_64& rng, Keep&& keep, PointCloud& out,
                 Label label) {
  std::uniform_real_distribution<double> jitter(-0.25 * spacing, 0.25 * spacing);
  const auto nu = static_cast<std::size_t>(std::max(1.0, std::round(lu / spacing)));
  const auto nv = static_cast<std::size_t>(std::max(1.0, std::round(lv / spacing)));
  const double su = lu / static_cast<double>(nu);
  const double sv = lv / static_cast<double>(nv);
  for (std::size_t i = 0; i < nu; ++i) {
    for (std::size_t j = 0; j < nv; ++j) {
      const double a = std::clamp((i + 0.5) * su + jitter(rng), 0.0, lu);
      const double b = std::clamp((j + 0.5) * sv + jitter(rng), 0.0, lv);
      const Point3 p = corner + a * u + b * v;
      if (keep(p)) out.push_back(p, label);
    }
  }
}

void sample_box_into(const Box& box, const std::vector<const Box*>& others, double spacing,
                     std::mt19937_64& rng, PointCloud& out, Label label) {
  const Point3 lo = box.center - box.half_extents;
  const Eigen::Vector3d e = 2.0 * box.half_extents;
  const Eigen::Vector3d X = Eigen::Vector3d::UnitX(), Y = Eigen::Vector3d::UnitY(),
                        Z = Eigen::Vector3d::UnitZ();
  auto keep = [&](const Point3& p) {
    for (const Box* o : others) {
      if (inside_box(*o, p, 1e-9)) return false;
    }
    return true;
  };
  sample_rect(lo, Y, e.y(), Z, e.z(), spacing, rng, keep, out, label);                        // -x
  sample_rect(lo + e.x() * X, Y, e.y(), Z, e.z(), spacing, rng, keep, out, label);            // +x
  sample_rect(lo, X, e.x(), Z, e.z(), spacing, rng, keep, out, label);                        // -y
  sample_rect(lo + e.y() * Y, X, e.x(), Z, e.z(), spacing, rng, keep, out, label);            // +y
  sample_rect(lo + e.z() * Z, X, e.x(), Y, e.y(), spacing, rng, keep, out, label);            // +z
}

void sample_footprint_into(const Box& box, const PlaneModel& ground,
                           const std::vector<const Box*>& cover, double spacing, std::mt19937_64& rng,
                           PointCloud& out) {
  const Point3 lo = box.center - box.half_extents;
  const Eigen::Vector3d e = 2.0 * box.half_extents;
  PointCloud flat;
  auto keep = [&](const Point3& p) {
    const Point3 g(p.x(), p.y(), ground_height(ground, p.x(), p.y()));
    for (const Box* o : cover) {
      if (on_ground(*o, ground) && inside_box(*o, Point3(g.x(), g.y(), o->center.z()), 1e-9)) {
        return false;
      }
    }
    return true;
  };
  sample_rect(Point3(lo.x(), lo.y(), 0.0), Eigen::Vector3d::UnitX(), e.x(), Eigen::Vector3d::UnitY(),
              e.y(), spacing, rng, keep, flat, Label::Static);
  for (const auto& p : flat.points()) {
    out.push_back(Point3(p.x(), p.y(), ground_height(ground, p.x(), p.y())), Label::Static);
  }
}

}  // namespace

Box DynamicBox::at(std::size_t frame) const {
  if (centers.empty()) throw DataError("dynamic box without trajectory");
  return {id, centers[std::min(frame, centers.size() - 1)], half_extents};
}

std::vector<Box> Scene::boxes_at(std::optional<std::size_t> frame) const {
  std::vector<Box> out = static_objects;
  if (frame) {
    for (const auto& d : dynamic_objects) out.push_back(d.at(*frame));
  }
  return out;
}

void SimConfig::validate() const {
  if (horizontal_rays == 0 || vertical_rays == 0) throw DataError("ray counts must be >= 1");
  if (!(noise_sigma >= 0)) throw DataError("noise_sigma must be >= 0");
  if (!(max_range > 0)) throw DataError("max_range must be > 0");
  if (!(vertical_fov_deg >= 0 && vertical_fov_deg < 180)) throw DataError("vertical_fov_deg out of range");
}

RayHit cast_ray(const Point3& o, const Eigen::Vector3d& dir, const PlaneModel& ground,
                const std::vector<Box>& boxes) {
  RayHit best;
  const double denom = ground.normal.dot(dir);
  if (std::abs(denom) > 1e-12) {
    const double t = -(ground.normal.dot(o) + ground.offset) / denom;
    if (t > kRayEps) best.t = t;
  }
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    const Point3 lo = boxes[b].center - boxes[b].half_extents;
    const Point3 hi = boxes[b].center + boxes[b].half_extents;
    double t0 = -kInfinity, t1 = kInfinity;
    bool miss = false;
    for (int i = 0; i < 3 && !miss; ++i) {
      if (std::abs(dir[i]) < 1e-15) {
        if (o[i] < lo[i] || o[i] > hi[i]) miss = true;
        continue;
      }
      double ta = (lo[i] - o[i]) / dir[i];
      double tb = (hi[i] - o[i]) / dir[i];
      if (ta > tb) std::swap(ta, tb);
      t0 = std::max(t0, ta);
      t1 = std::min(t1, tb);
      if (t0 > t1) miss = true;
    }
    // a sensor inside a box sees through it
    if (miss || t0 <= kRayEps) continue;
    if (t0 < best.t) best = {t0, static_cast<int>(b)};
  }
  return best;
}

PointCloud raycast_scan(const Scene& scene, std::size_t frame, const Pose& pose, const SimConfig& cfg) {
  cfg.validate();
  const std::vector<Box> boxes = scene.boxes_at(frame);
  const std::size_t n_static = scene.static_objects.size();
  std::mt19937_64 rng(mix_seed(cfg.seed, frame));
  std::normal_distribution<double> noise(0.0, 1.0);
  const Eigen::Matrix3d R = pose.rotation_matrix();
  const Point3 o = pose.translation();
  const double fov = cfg.vertical_fov_deg * std::numbers::pi / 180.0;
  PointCloud scan;
  scan.reserve(cfg.horizontal_rays * cfg.vertical_rays);
  for (std::size_t v = 0; v < cfg.vertical_rays; ++v) {
    const double el = cfg.vertical_rays == 1
                          ? 0.0
                          : -0.5 * fov + fov * static_cast<double>(v) / static_cast<double>(cfg.vertical_rays - 1);
    for (std::size_t h = 0; h < cfg.horizontal_rays; ++h) {
      const double az = 2.0 * std::numbers::pi * static_cast<double>(h) / static_cast<double>(cfg.horizontal_rays);
      const Eigen::Vector3d local(std::cos(el) * std::cos(az), std::cos(el) * std::sin(az), std::sin(el));
      const double n = noise(rng);
      const RayHit hit = cast_ray(o, R * local, scene.ground, boxes);
      if (!(hit.t <= cfg.max_range)) continue;
      const double t = hit.t + cfg.noise_sigma * n;
      if (t <= 0) continue;
      const bool dynamic = hit.box >= static_cast<int>(n_static);
      scan.push_back(t * local, dynamic ? Label::Dynamic : Label::Static);
    }
  }
  return scan;
}

SimSession make_session(const Scene& scene, const std::vector<Pose>& trajectory, const SimConfig& cfg,
                        const std::string& id) {
  if (trajectory.empty()) throw DataError("empty trajectory");
  cfg.validate();
  for (const auto& d : scene.dynamic_objects) {
    if (d.centers.size() < trajectory.size()) {
      throw DataError("dynamic box " + std::to_string(d.id) + " has fewer centers than frames");
    }
  }
  std::vector<PointCloud> scans(trajectory.size());
  const auto n = static_cast<std::int64_t>(trajectory.size());
#pragma omp parallel for schedule(dynamic, 1)
  for (std::int64_t f = 0; f < n; ++f) scans[f] = raycast_scan(scene, f, trajectory[f], cfg);

  SimSession out;
  out.session.id = id;
  out.session.metadata["generator"] = "synth";
  out.session.metadata["seed"] = std::to_string(cfg.seed);
  for (std::size_t f = 0; f < scans.size(); ++f) {
    out.truth.insert(out.truth.end(), scans[f].labels().begin(), scans[f].labels().end());
    PointCloud bare(scans[f].points());
    out.session.frames.push_back({0.1 * static_cast<double>(f), trajectory[f], std::move(bare)});
  }
  return out;
}

PointCloud sample_box(const Box& box, const std::vector<Box>& others, double spacing, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(box.id) + 7));
  std::vector<const Box*> ptrs;
  for (const auto& o : others) {
    if (&o != &box) ptrs.push_back(&o);
  }
  PointCloud out;
  sample_box_into(box, ptrs, spacing, rng, out, Label::Static);
  return out;
}

PointCloud sample_surfaces(const Scene& scene, std::optional<std::size_t> frame, const Point2& lo,
                           const Point2& hi, double spacing, std::uint64_t seed) {
  if (!(spacing > 0)) throw DataError("spacing must be > 0");
  const std::vector<Box> boxes = scene.boxes_at(frame);
  const std::size_t n_static = scene.static_objects.size();
  std::mt19937_64 rng(mix_seed(seed, 1));
  PointCloud out;
  auto keep_ground = [&](const Point3& p) {
    for (const auto& b : boxes) {
      if (on_ground(b, scene.ground) && inside_box(b, Point3(p.x(), p.y(), b.center.z()), 1e-9)) {
        return false;
      }
    }
    return true;
  };
  PointCloud flat;
  sample_rect(Point3(lo.x(), lo.y(), 0.0), Eigen::Vector3d::UnitX(), hi.x() - lo.x(),
              Eigen::Vector3d::UnitY(), hi.y() - lo.y(), spacing, rng, keep_ground, flat, Label::Static);
  for (const auto& p : flat.points()) {
    out.push_back(Point3(p.x(), p.y(), ground_height(scene.ground, p.x(), p.y())), Label::Static);
  }
  for (std::size_t b = 0; b < boxes.size(); ++b) {
    std::vector<const Box*> others;
    for (std::size_t o = 0; o < boxes.size(); ++o) {
      if (o != b) others.push_back(&boxes[o]);
    }
    sample_box_into(boxes[b], others, spacing, rng, out, b >= n_static ? Label::Dynamic : Label::Static);
  }
  return out;
}

double surface_residual(const Scene& scene, std::optional<std::size_t> frame, const Point3& p) {
  double best = std::abs(scene.ground.signed_distance(p));
  for (const auto& b : scene.boxes_at(frame)) best = std::min(best, box_surface_distance(b, p));
  return best;
}

Mutation mutate_scene(const Scene& scene, const std::vector<Box>& add, const std::vector<int>& remove,
                      double sample_spacing) {
  Mutation m;
  m.scene = scene;
  std::vector<Box> removed;
  for (int id : remove) {
    auto it = std::find_if(m.scene.static_objects.begin(), m.scene.static_objects.end(),
                           [&](const Box& b) { return b.id == id; });
    if (it == m.scene.static_objects.end()) throw DataError("no static box with id " + std::to_string(id));
    removed.push_back(*it);
    m.scene.static_objects.erase(it);
  }
  for (const auto& b : add) {
    if (!(b.half_extents.array() > 0).all()) throw DataError("box extents must be positive");
    for (const auto& o : m.scene.static_objects) {
      if (o.id == b.id) throw DataError("box id " + std::to_string(b.id) + " already in scene");
    }
    m.scene.static_objects.push_back(b);
  }
  std::mt19937_64 rng(mix_seed(0, 99));
  auto ptrs = [](const std::vector<Box>& v, const Box* skip) {
    std::vector<const Box*> out;
    for (const auto& b : v) {
      if (&b != skip) out.push_back(&b);
    }
    return out;
  };
  for (const auto& r : removed) {
    sample_box_into(r, ptrs(scene.static_objects, nullptr), sample_spacing, rng, m.truth_nd, Label::Static);
    sample_footprint_into(r, scene.ground, ptrs(m.scene.static_objects, nullptr), sample_spacing, rng,
                          m.truth_pd);
  }
  for (const auto& b : add) {
    const Box* self = nullptr;
    for (const auto& o : m.scene.static_objects) {
      if (o.id == b.id) self = &o;
    }
    sample_box_into(b, ptrs(m.scene.static_objects, self), sample_spacing, rng, m.truth_pd, Label::Static);
    sample_footprint_into(b, scene.ground, ptrs(scene.static_objects, nullptr), sample_spacing, rng,
                          m.truth_nd);
  }
  return m;
}

std::vector<Pose> straight_trajectory(const Point3& start, const Point3& end, std::size_t frames) {
  std::vector<Pose> out;
  if (frames == 0) return out;
  const Eigen::Vector3d d = end - start;
  const double yaw = std::atan2(d.y(), d.x());
  const Eigen::Quaterniond q(Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ()));
  for (std::size_t f = 0; f < frames; ++f) {
    const double s = frames == 1 ? 0.0 : static_cast<double>(f) / static_cast<double>(frames - 1);
    out.emplace_back(q, start + s * d);
  }
  return out;
}

std::vector<Point3> linear_track(const Point3& start, const Eigen::Vector3d& step, std::size_t frames) {
  std::vector<Point3> out(frames);
  for (std::size_t f = 0; f < frames; ++f) out[f] = start + static_cast<double>(f) * step;
  return out;
}

StreetScene make_street_scene(const StreetOptions& opts) {
  std::mt19937_64 rng(mix_seed(opts.seed, 3));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  StreetScene s;
  const double L = opts.street_length;
  // buildings alternate sides and together line the street from -8 to L + 8
  const std::size_t per_side = (opts.static_boxes + 1) / 2;
  const double span = L + 16.0;
  const double slot = span / static_cast<double>(std::max<std::size_t>(per_side, 1));
  for (std::size_t i = 0; i < opts.static_boxes; ++i) {
    const double side = i % 2 == 0 ? 1.0 : -1.0;
    const std::size_t k = i / 2;
    const double length = slot - 1.5 - 1.5 * u01(rng);
    const double depth = 4.0 + 2.0 * u01(rng);
    const double height = 5.0 + 5.0 * u01(rng);
    const double face = 7.0 + 1.0 * u01(rng);
    const double x = -8.0 + (static_cast<double>(k) + 0.5) * slot + (i % 2 == 1 ? 0.35 * slot : 0.0);
    Box b;
    b.id = static_cast<int>(i);
    b.center = Point3(x, side * (face + 0.5 * depth), 0.5 * height);
    b.half_extents = Eigen::Vector3d(0.5 * length, 0.5 * depth, 0.5 * height);
    s.scene.static_objects.push_back(b);
  }
  // cars drive the lanes in opposite directions and stay within the built-up stretch
  for (std::size_t j = 0; j < opts.moving_boxes; ++j) {
    DynamicBox car;
    car.id = 100 + static_cast<int>(j);
    car.half_extents = Eigen::Vector3d(2.0, 0.9, 0.75);
    const bool toward = j % 2 == 0;
    const double lane = (toward ? 3.0 : -3.0) + 0.4 * (u01(rng) - 0.5);
    const double speed = (L + 10.0) / static_cast<double>(std::max<std::size_t>(opts.frames, 2)) *
                         (1.0 + 0.3 * u01(rng));
    const double x0 = toward ? L + 5.0 - 2.0 * static_cast<double>(j) : -5.0 + 2.0 * static_cast<double>(j);
    car.centers = linear_track(Point3(x0, lane, 0.75), Eigen::Vector3d(toward ? -speed : speed, 0, 0),
                               opts.frames);
    s.scene.dynamic_objects.push_back(std::move(car));
  }
  s.trajectory = straight_trajectory(Point3(0, 0, opts.sensor_height), Point3(L, 0, opts.sensor_height),
                                     opts.frames);
  return s;
}

Scene make_block_scene(std::size_t boxes, double extent, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 5));
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  Scene s;
  for (std::size_t i = 0; i < boxes; ++i) {
    Box b;
    b.id = static_cast<int>(i);
    const double hx = 0.5 + 2.5 * u01(rng);
    const double hy = 0.5 + 2.5 * u01(rng);
    const double hz = 0.25 + 3.75 * u01(rng);
    b.center = Point3((u01(rng) - 0.5) * extent, (u01(rng) - 0.5) * extent, hz);
    b.half_extents = Eigen::Vector3d(hx, hy, hz);
    s.static_objects.push_back(b);
  }
  return s;
}

std::optional<Box> place_car(const Scene& scene, int id, const Point2& lo, const Point2& hi,
                             double clearance, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 7));
  std::uniform_real_distribution<double> ux(lo.x(), hi.x()), uy(lo.y(), hi.y());
  for (int attempt = 0; attempt < 1000; ++attempt) {
    Box car;
    car.id = id;
    car.half_extents = (rng() & 1) ? Eigen::Vector3d(2.2, 0.9, 0.75) : Eigen::Vector3d(0.9, 2.2, 0.75);
    car.center = Point3(ux(rng), uy(rng), 0.75);
    bool free = true;
    for (const auto& b : scene.static_objects) {
      const Eigen::Vector2d gap = (car.center - b.center).head<2>().cwiseAbs() -
                                  (car.half_extents + b.half_extents).head<2>();
      if (gap.maxCoeff() < clearance) {
        free = false;
        break;
      }
    }
    if (free) return car;
  }
  return std::nullopt;
}

Scene make_parking_scene(std::size_t blocks, std::size_t cars, double extent, std::uint64_t seed) {
  Scene s = make_block_scene(blocks, extent, seed);
  const Point2 hi = Point2::Constant(extent / 2), lo = -hi;
  for (std::size_t c = 0; c < cars; ++c) {
    const int id = static_cast<int>(blocks + c);
    if (auto car = place_car(s, id, lo, hi, 1.0, mix_seed(seed, 100 + c))) s.static_objects.push_back(*car);
  }
  return s;
}

namespace {

Box parked_car(int id, const Point3& c) { return Box{id, c, Eigen::Vector3d(2.2, 0.9, 0.75)}; }

}  // namespace

ParkingStreet make_parking_street(const StreetOptions& opts) {
  ParkingStreet ps;
  ps.opts = opts;
  ps.street = make_street_scene(opts);
  std::mt19937_64 rng(mix_seed(opts.seed, 11));
  for (double x = 2.0; x <= opts.street_length - 2.0; x += 6.0) {
    for (double side : {-1.0, 1.0}) {
      const Point3 c(x, side * 5.0, 0.75);
      if (rng() & 1) {
        ps.street.scene.static_objects.push_back(parked_car(ps.next_id++, c));
      } else {
        ps.free_slots.push_back(c);
      }
    }
  }
  return ps;
}

Mutation park_and_leave(ParkingStreet& ps, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 13));
  std::vector<std::size_t> parked;
  for (std::size_t i = 0; i < ps.street.scene.static_objects.size(); ++i) {
    if (ps.street.scene.static_objects[i].id >= 500) parked.push_back(i);
  }
  if (parked.empty() || ps.free_slots.empty()) throw DataError("parking street has no car to move");
  const Box leaving = ps.street.scene.static_objects[parked[rng() % parked.size()]];
  const std::size_t slot = rng() % ps.free_slots.size();
  const Box arriving = parked_car(ps.next_id++, ps.free_slots[slot]);
  ps.free_slots.erase(ps.free_slots.begin() + static_cast<std::ptrdiff_t>(slot));
  ps.free_slots.push_back(leaving.center);
  Mutation m = mutate_scene(ps.street.scene, {arriving}, {leaving.id});
  ps.street.scene = m.scene;
  return m;
}

SimSession survey_street(const ParkingStreet& ps, double lane, const Pose& frame, const SimConfig& cfg,
                         const std::string& id) {
  const double h = ps.opts.sensor_height;
  const auto traj =
      straight_trajectory(Point3(0, lane, h), Point3(ps.opts.street_length, lane, h), ps.opts.frames);
  SimSession s = make_session(ps.street.scene, traj, cfg, id);
  const Pose inv = frame.inverse();
  for (auto& f : s.session.frames) f.pose = inv * f.pose;
  return s;
}

}  // namespace lifemap
