#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "lifemap/errors.hpp"
#include "lifemap/geom.hpp"
#include "lifemap/spatial_index.hpp"

namespace lifemap {

struct AlignParams {
  double K_r = 0.5;       // keypoint radius
  double PC_ds = 0.1;     // downsample cell
  std::size_t N_n = 200;  // normal neighbors
  double FD_r = 5.0;      // descriptor support radius
  double NDT_r = 0.5;     // NDT voxel size
  double NDT_ss = 5.0;    // NDT maximum step

  void validate() const;
  std::string str() const;
  friend bool operator==(const AlignParams&, const AlignParams&) = default;
};

/// Cross product of the tabulated value lists, K_r outermost.
std::vector<AlignParams> full_grid();
/// One candidate: the first value of every list.
std::vector<AlignParams> fast_grid();

inline constexpr std::size_t kShotSize = 352;
inline constexpr std::size_t kDescriptorDim = 50;

/// Voxel centroids at cell K_r, each snapped to its nearest cloud point.
PointCloud select_keypoints(const PointCloud& cloud, double K_r);

/// Raw SHOT histograms. `support` is the downsampled cloud the normals belong
/// to; keypoints with fewer than 5 support neighbors are skipped.
struct RawDescriptors {
  std::vector<std::size_t> keypoint;  // index into the keypoint cloud
  std::vector<Eigen::Matrix<double, kShotSize, 1>> shot;
};
RawDescriptors compute_shot(const PointCloud& support, const Normals& normals,
                            const PointCloud& keypoints, double radius);

/// Local reference frame (columns x, y, z) of a neighborhood, or nullopt when
/// the support is too small.
std::optional<Eigen::Matrix3d> local_reference_frame(const PointCloud& support,
                                                     std::span<const Neighbor> neighbors,
                                                     const Point3& center, double radius);

/// Principal directions of the pooled raw descriptors of both maps.
struct PcaBasis {
  Eigen::Matrix<double, kShotSize, 1> mean;
  Eigen::Matrix<double, kShotSize, Eigen::Dynamic> axes;  // kShotSize x dim
};
PcaBasis fit_pca(const RawDescriptors& a, const RawDescriptors& b, std::size_t dim = kDescriptorDim);
Eigen::MatrixXd project(const PcaBasis& basis, const RawDescriptors& d);  // rows = descriptors

struct Descriptors {
  PointCloud keypoints;  // only keypoints that received a descriptor
  Eigen::MatrixXd values;  // one row per keypoint
};

/// Descriptors for both maps of a pair, sharing one PCA basis.
std::pair<Descriptors, Descriptors> compute_descriptors(const PointCloud& cloudA, const PointCloud& cloudB,
                                                        const PointCloud& kpA, const PointCloud& kpB,
                                                        const AlignParams& params);

/// Pairs (i, j) where row i of a and row j of b are each other's nearest neighbor.
std::vector<std::pair<std::size_t, std::size_t>> mutual_matches(const Eigen::MatrixXd& a,
                                                                const Eigen::MatrixXd& b);

/// Least-squares rigid transform taking src onto dst.
Pose rigid_fit(std::span<const Point3> src, std::span<const Point3> dst);

struct CoarseResult {
  bool ok = false;
  Pose pose;  // maps B onto A
  std::size_t correspondences = 0;
  std::size_t inliers = 0;
  std::size_t hypotheses = 0;
};

struct RansacOptions {
  std::size_t hypotheses = 2000;
  double early_exit_ratio = 0.8;
  std::size_t max_draws = 200000;
  double edge_similarity = 0.9;
  std::uint64_t seed = 0;
};

CoarseResult coarse_align(const Descriptors& a, const Descriptors& b, double K_r,
                          const RansacOptions& opts = {});
/// RANSAC on given correspondences (dst = A side, src = B side).
CoarseResult ransac_rigid(std::span<const Point3> dst, std::span<const Point3> src, double inlier_thr,
                          const RansacOptions& opts);

struct NdtResult {
  enum class Status { Converged, NotConverged, NoDistributions };
  Status status = Status::NotConverged;
  Pose pose;
  std::size_t iterations = 0;
  double score = 0.0;
  bool converged() const { return status == Status::Converged; }
};

struct NdtOptions {
  std::size_t max_iterations = 60;
  double epsilon = 1e-4;
  double outlier_ratio = 0.55;
  std::size_t min_points = 5;
};

/// Registers source onto target starting from `init` (source -> target).
NdtResult ndt_register(const PointCloud& source_ds, const PointCloud& target_ds, const Pose& init,
                       double NDT_r, double NDT_ss, const NdtOptions& opts = {});

enum class StageOutcome { FailedCoarse, FailedFine, Succeeded };
const char* to_string(StageOutcome o);

struct StageLogEntry {
  std::size_t index = 0;
  AlignParams params;
  StageOutcome outcome = StageOutcome::FailedCoarse;
  std::size_t correspondences = 0;
  std::size_t coarse_inliers = 0;
  std::size_t ndt_iterations = 0;
  double chamfer = kInfinity;
  Pose transform;
};

struct AlignmentResult {
  Pose transform;  // session (B) frame -> base (A) frame
  double chamfer = kInfinity;
  AlignParams params;
  std::size_t best_index = 0;
  std::vector<StageLogEntry> stage_log;
};

class AlignmentFailed : public PipelineError {
 public:
  explicit AlignmentFailed(std::vector<StageLogEntry> log)
      : PipelineError("alignment failed for all " + std::to_string(log.size()) + " candidates"),
        log_(std::move(log)) {}
  const std::vector<StageLogEntry>& stage_log() const { return log_; }

 private:
  std::vector<StageLogEntry> log_;
};

struct GridSearchOptions {
  double chamfer_tau = 0.5;
  std::uint64_t seed = 0;
};

/// Tries every candidate and keeps the succeeded one with the lowest Chamfer
/// distance between transform(mapB) and mapA. Throws AlignmentFailed.
AlignmentResult grid_search_align(const PointCloud& mapA, const PointCloud& mapB,
                                  const std::vector<AlignParams>& grid,
                                  const GridSearchOptions& opts = {});

std::string stage_log_csv(const std::vector<StageLogEntry>& log);

}  // namespace lifemap
