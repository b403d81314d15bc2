#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "lifemap/geom.hpp"
#include "lifemap/map_io.hpp"

namespace lifemap {

/// Axis-aligned box.
struct Box {
  int id = 0;
  Point3 center = Point3::Zero();
  Eigen::Vector3d half_extents = Eigen::Vector3d::Constant(0.5);
};

/// Box that moves: one center per frame.
struct DynamicBox {
  int id = 0;
  Eigen::Vector3d half_extents = Eigen::Vector3d::Constant(0.5);
  std::vector<Point3> centers;

  Box at(std::size_t frame) const;
};

struct Scene {
  PlaneModel ground;  // default z = 0
  std::vector<Box> static_objects;
  std::vector<DynamicBox> dynamic_objects;

  /// Static boxes plus dynamic boxes placed at `frame` (if they have one).
  std::vector<Box> boxes_at(std::optional<std::size_t> frame) const;
};

struct SimConfig {
  std::size_t horizontal_rays = 360;
  std::size_t vertical_rays = 16;
  double vertical_fov_deg = 30.0;  // symmetric about the horizon
  double max_range = 50.0;
  double noise_sigma = 0.005;
  std::uint64_t seed = 0;

  void validate() const;
};

struct RayHit {
  double t = kInfinity;
  int box = -1;  // index into the box list, -1 for ground
};

/// Nearest intersection with the ground plane or any box, t > 0.
RayHit cast_ray(const Point3& origin, const Eigen::Vector3d& dir, const PlaneModel& ground,
                const std::vector<Box>& boxes);

/// One scan in the sensor frame. Labels are Dynamic for returns from dynamic
/// boxes, Static otherwise.
PointCloud raycast_scan(const Scene& scene, std::size_t frame, const Pose& pose, const SimConfig& cfg);

struct SimSession {
  SessionMap session;       // scans without labels
  std::vector<Label> truth;  // per point of assemble_map(session)
};

SimSession make_session(const Scene& scene, const std::vector<Pose>& trajectory,
                        const SimConfig& cfg, const std::string& id = "synth");

struct Mutation {
  Scene scene;
  /// Surface samples of what appeared (added boxes, ground uncovered by
  /// removed boxes) and what disappeared (removed boxes, ground covered by
  /// added boxes).
  PointCloud truth_pd;
  PointCloud truth_nd;
};

/// Adds boxes and removes static boxes by id. Unknown ids throw DataError.
Mutation mutate_scene(const Scene& scene, const std::vector<Box>& add,
                      const std::vector<int>& remove, double sample_spacing = 0.05);

/// Regular samples (with seeded sub-spacing jitter) of every exposed box face
/// (bottom excluded) and of the ground inside [lo, hi] in x/y, skipping
/// samples buried inside another box. Dynamic boxes are included when
/// `frame` is set; labels mark them Dynamic.
PointCloud sample_surfaces(const Scene& scene, std::optional<std::size_t> frame, const Point2& lo,
                           const Point2& hi, double spacing, std::uint64_t seed = 0);
/// Exposed faces of a single box.
PointCloud sample_box(const Box& box, const std::vector<Box>& others, double spacing,
                      std::uint64_t seed = 0);

/// Distance from p to the nearest scene surface at `frame`.
double surface_residual(const Scene& scene, std::optional<std::size_t> frame, const Point3& p);

/// Poses along a straight line at fixed height, yaw following the direction.
std::vector<Pose> straight_trajectory(const Point3& start, const Point3& end, std::size_t frames);
/// Per-frame centers moving linearly from start by `step` each frame.
std::vector<Point3> linear_track(const Point3& start, const Eigen::Vector3d& step, std::size_t frames);

struct StreetOptions {
  std::size_t frames = 200;
  std::size_t static_boxes = 6;
  std::size_t moving_boxes = 2;
  double street_length = 40.0;
  double sensor_height = 1.8;
  std::uint64_t seed = 0;
};

/// A street flanked by buildings with cars driving along it, plus the sensor
/// trajectory driving down the street.
struct StreetScene {
  Scene scene;
  std::vector<Pose> trajectory;
};
StreetScene make_street_scene(const StreetOptions& opts);

/// Static boxes of random footprint and height scattered over a square of
/// side `extent` centered on the origin.
Scene make_block_scene(std::size_t boxes, double extent, std::uint64_t seed);

/// Car-sized box (2.2 x 0.9 x 0.75 half extents, long side along x or y)
/// standing on the ground somewhere in [lo, hi], its footprint at least
/// `clearance` away from every box of the scene. nullopt when 1000 tries fail.
std::optional<Box> place_car(const Scene& scene, int id, const Point2& lo, const Point2& hi,
                             double clearance, std::uint64_t seed);

/// Street scene with cars parked along both curbs. Slots are every 6 m
/// between x = 2 and the street end; about half of them start occupied.
struct ParkingStreet {
  StreetOptions opts;
  StreetScene street;
  std::vector<Point3> free_slots;  // car centers
  int next_id = 500;
};
ParkingStreet make_parking_street(const StreetOptions& opts);

/// One round of change: a random parked car leaves and a new one takes a free
/// slot. The street's scene is updated in place.
Mutation park_and_leave(ParkingStreet& ps, std::uint64_t seed);

/// Session driving the street at lateral offset `lane`, expressed in `frame`
/// (every pose p becomes frame^-1 * p, so frame maps session -> scene).
SimSession survey_street(const ParkingStreet& ps, double lane, const Pose& frame, const SimConfig& cfg,
                         const std::string& id);

/// Block scene plus `cars` parked cars (ids after the blocks).
Scene make_parking_scene(std::size_t blocks, std::size_t cars, double extent, std::uint64_t seed);

}  // namespace lifemap
