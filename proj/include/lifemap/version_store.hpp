#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "lifemap/alignment.hpp"
#include "lifemap/change_detection.hpp"
#include "lifemap/dynamic_removal.hpp"
#include "lifemap/geom.hpp"
#include "lifemap/map_io.hpp"

namespace lifemap {

inline constexpr double kEpsRemove = 1e-3;
inline constexpr int kStoreSchemaVersion = 1;

struct SessionRef {
  std::size_t index = 0;
  std::string id;
};

/// One manifest entry. Entry t > 0 owns sessions/<t>/nd.pcd (base ND of
/// t - 1) and pd.pcd (session PD of t).
struct SessionRecord {
  std::size_t index = 0;
  std::string id;
  double timestamp = 0.0;  // first frame time of the session
  Pose transform;          // session frame -> store frame
  std::size_t session_points = 0;
  std::size_t nd_points = 0;
  std::size_t pd_points = 0;
  std::size_t base_points = 0;  // base map size after this entry
  std::uint64_t session_bytes = 0;  // size the clean session would take as a PCD
};

/// Handle on a store directory. Loads lazily; every accessor reads from disk.
class Store {
 public:
  /// Opens an existing store; a missing or malformed manifest is a DataError.
  static Store open(const std::filesystem::path& root);

  const std::filesystem::path& root() const { return root_; }
  const std::vector<SessionRecord>& sessions() const { return sessions_; }
  std::size_t size() const { return sessions_.size(); }
  double eps_rm() const { return eps_rm_; }
  double voxel() const { return voxel_; }
  std::uint64_t all_bytes() const;

  /// Throws NoSuchSession for t >= size().
  const SessionRecord& record(std::size_t t) const;
  PointCloud base_map() const;
  PointCloud base_nd_of(std::size_t t) const;     // base ND(t - 1), t >= 1
  PointCloud session_pd_of(std::size_t t) const;  // session PD(t), t >= 1
  HullPolygon boundary(std::size_t t) const;

  std::filesystem::path session_dir(std::size_t t) const;

 private:
  friend Store init_store(const std::filesystem::path&, const PointCloud&, double, double);
  friend struct StoreAccess;
  std::filesystem::path root_;
  std::vector<SessionRecord> sessions_;
  double eps_rm_ = kEpsRemove;
  double voxel_ = 0.0;
};

/// Creates a store whose base map is the given clean map (float32 rounded,
/// near-duplicates within eps_rm merged). `voxel` is the cell committed
/// sessions are downsampled to (0 keeps them as they are).
/// Throws StoreExists if root exists and is not empty.
Store init_store(const std::filesystem::path& root, const PointCloud& clean_session0, double voxel = 0.1,
                 double eps_rm = kEpsRemove);

/// Points of a with no point of b within eps_rm, order kept.
PointCloud point_subtract(const PointCloud& a, const PointCloud& b, double eps_rm);

/// Drops every point within eps of an earlier kept point.
PointCloud dedupe(const PointCloud& cloud, double eps);

/// coexist + base_overlap + base_nonoverlap + session_nonoverlap + session_pd - base_nd.
PointCloud forward_update(const PointCloud& coexist, const PointCloud& base_overlap,
                          const PointCloud& base_nonoverlap, const PointCloud& session_nonoverlap,
                          const PointCloud& session_pd, const PointCloud& base_nd, double eps_rm = kEpsRemove);

struct CommitOptions {
  DynRemovalParams dyn;
  std::vector<AlignParams> grid = fast_grid();
  GridSearchOptions align;
  ChangeParams change;
};

struct CommitReport {
  SessionRef ref;
  AlignmentResult alignment;
  std::size_t clean_points = 0;
  std::size_t nd_points = 0;
  std::size_t pd_points = 0;
  std::size_t base_points = 0;
};

/// Dynamic removal, alignment onto the base map, change detection and the
/// forward update, persisted atomically. On any failure the store is left
/// untouched.
CommitReport commit(Store& store, const SessionMap& session, const CommitOptions& opts = {});

/// Same as commit for a map that is already clean (skips dynamic removal).
CommitReport commit_clean(Store& store, const PointCloud& clean, const std::string& id, double timestamp,
                          const CommitOptions& opts = {});

/// Historic session k: rolls the current base back through the stored diffs
/// down to k and crops with boundary(k).
PointCloud reconstruct(const Store& store, std::size_t k);

/// Base map as of entry k without the final crop.
PointCloud rollback(const Store& store, std::size_t k);

DiffResult diff_between(const Store& store, std::size_t a, std::size_t b, const ChangeParams& params);

struct StoreStats {
  std::size_t sessions = 0;
  std::uint64_t base_bytes = 0;
  std::uint64_t diff_bytes = 0;
  std::uint64_t boundary_bytes = 0;
  std::uint64_t ours_bytes = 0;
  std::uint64_t all_bytes = 0;
  double ratio = 0.0;
};
StoreStats stats(const Store& store);

/// 1 - ours / all.
double efficiency_ratio(double all, double ours);

/// Recursive SHA-256 over relative paths and file contents, for atomicity checks.
std::string tree_checksum(const std::filesystem::path& root);

}  // namespace lifemap
