#include "lifemap/alignment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <tuple>
#include <numbers>
#include <random>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <Eigen/Geometry>
#include <absl/container/flat_hash_map.h>

#include "lifemap/kernels.hpp"
#include "lifemap/voxel_key.hpp"

namespace lifemap {

using Shot = Eigen::Matrix<double, kShotSize, 1>;

void AlignParams::validate() const {
  if (!(K_r > 0 && PC_ds > 0 && N_n > 0 && FD_r > 0 && NDT_r > 0 && NDT_ss > 0)) {
    throw DataError("alignment parameters must be positive: " + str());
  }
}

std::string AlignParams::str() const {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "K_r=%g PC_ds=%g N_n=%zu FD_r=%g NDT_r=%g NDT_ss=%g", K_r, PC_ds, N_n,
                FD_r, NDT_r, NDT_ss);
  return buf;
}

std::vector<AlignParams> full_grid() {
  std::vector<AlignParams> out;
  for (double kr : {0.5, 1.0, 2.0, 5.0, 10.0})
    for (double ds : {0.1, 0.2, 0.3, 1.0})
      for (std::size_t nn : {200, 500})
        for (double fd : {5.0, 10.0, 20.0, 50.0})
          for (double nr : {0.5, 1.0, 2.0, 5.0})
            for (double ss : {5.0, 10.0}) out.push_back({kr, ds, nn, fd, nr, ss});
  return out;
}

std::vector<AlignParams> fast_grid() { return {AlignParams{0.5, 0.1, 200, 5.0, 0.5, 5.0}}; }

// --- keypoints --------------------------------------------------------------

PointCloud select_keypoints(const PointCloud& cloud, double K_r) {
  if (!(K_r > 0)) throw DataError("K_r must be > 0");
  if (cloud.empty()) return {};
  const PointCloud centers = voxel_downsample(cloud, K_r);
  const SpatialIndex index(cloud);
  std::vector<std::size_t> picked;
  picked.reserve(centers.size());
  for (const auto& c : centers.points()) picked.push_back(index.nearest(c)->index);
  // two voxels may snap to the same point
  std::vector<std::uint8_t> seen(cloud.size(), 0);
  std::vector<std::size_t> unique;
  for (std::size_t i : picked) {
    if (!seen[i]) {
      seen[i] = 1;
      unique.push_back(i);
    }
  }
  PointCloud out;
  out.reserve(unique.size());
  for (std::size_t i : unique) out.push_back(cloud[i]);
  return out;
}

// --- SHOT -------------------------------------------------------------------

namespace {

constexpr int kAzimuth = 8;
constexpr int kElevation = 2;
constexpr int kRadial = 2;
constexpr int kCosBins = 11;
constexpr std::size_t kMinSupport = 5;

struct Split {
  int bin[2];
  double weight[2];
  int count;
};

// Splits a continuous bin coordinate between the two nearest bin centers.
Split split(double pos, int bins, bool wrap) {
  Split s{};
  int b = static_cast<int>(std::floor(pos));
  if (wrap) {
    b = ((b % bins) + bins) % bins;
  } else {
    b = std::clamp(b, 0, bins - 1);
  }
  const double off = pos - (std::floor(pos) + 0.5);
  if (!wrap && std::floor(pos) != b) {
    s = {{b, 0}, {1.0, 0.0}, 1};
    return s;
  }
  int other = off >= 0 ? b + 1 : b - 1;
  if (wrap) {
    other = ((other % bins) + bins) % bins;
  } else if (other < 0 || other >= bins) {
    s = {{b, 0}, {1.0, 0.0}, 1};
    return s;
  }
  const double w = std::abs(off);
  s = {{b, other}, {1.0 - w, w}, 2};
  return s;
}

}  // namespace

std::optional<Eigen::Matrix3d> local_reference_frame(const PointCloud& support,
                                                     std::span<const Neighbor> neighbors,
                                                     const Point3& center, double radius) {
  if (neighbors.size() < kMinSupport) return std::nullopt;
  Eigen::Matrix3d m = Eigen::Matrix3d::Zero();
  double wsum = 0.0;
  for (const auto& nb : neighbors) {
    const Eigen::Vector3d v = support[nb.index] - center;
    const double w = radius - std::sqrt(nb.sq_dist);
    m += w * v * v.transpose();
    wsum += w;
  }
  if (!(wsum > 0)) return std::nullopt;
  m /= wsum;
  const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(m);
  Eigen::Vector3d x = es.eigenvectors().col(2);
  Eigen::Vector3d z = es.eigenvectors().col(0);
  auto majority = [&](Eigen::Vector3d& axis) {
    long pos = 0, neg = 0;
    for (const auto& nb : neighbors) {
      const double d = (support[nb.index] - center).dot(axis);
      if (d > 0) ++pos;
      else if (d < 0) ++neg;
    }
    if (neg > pos) axis = -axis;
  };
  majority(x);
  majority(z);
  Eigen::Matrix3d frame;
  frame.col(0) = x;
  frame.col(1) = z.cross(x);
  frame.col(2) = z;
  return frame;
}

RawDescriptors compute_shot(const PointCloud& support, const Normals& normals, const PointCloud& keypoints,
                            double radius) {
  RawDescriptors out;
  if (support.empty() || keypoints.empty()) return out;
  const SpatialIndex index(support);
  const auto n = static_cast<std::int64_t>(keypoints.size());
  std::vector<std::optional<Shot>> shots(keypoints.size());
#pragma omp parallel
  {
    std::vector<Neighbor> nb;
#pragma omp for schedule(dynamic, 16)
    for (std::int64_t k = 0; k < n; ++k) {
      const Point3& c = keypoints[k];
      index.radius_unsorted(c, radius, nb);
      const auto lrf = local_reference_frame(support, nb, c, radius);
      if (!lrf) continue;
      Shot h = Shot::Zero();
      const Eigen::Vector3d zaxis = lrf->col(2);
      for (const auto& x : nb) {
        if (!normals.valid[x.index]) continue;
        const Eigen::Vector3d q = lrf->transpose() * (support[x.index] - c);
        const double dist = std::sqrt(x.sq_dist);
        const double cosv = std::min(1.0, std::abs(normals.normals[x.index].dot(zaxis)));
        const double az = std::atan2(q.y(), q.x());
        const double el = std::atan2(q.z(), std::hypot(q.x(), q.y()));
        const Split sc = split(cosv * kCosBins, kCosBins, false);
        const Split sa = split((az + std::numbers::pi) / (2.0 * std::numbers::pi) * kAzimuth, kAzimuth, true);
        const Split se = split((el + 0.5 * std::numbers::pi) / std::numbers::pi * kElevation, kElevation, false);
        const Split sr = split(dist / radius * kRadial, kRadial, false);
        for (int ia = 0; ia < sa.count; ++ia)
          for (int ie = 0; ie < se.count; ++ie)
            for (int ir = 0; ir < sr.count; ++ir) {
              const int spatial = (sa.bin[ia] * kElevation + se.bin[ie]) * kRadial + sr.bin[ir];
              const double w = sa.weight[ia] * se.weight[ie] * sr.weight[ir];
              for (int ic = 0; ic < sc.count; ++ic) h[spatial * kCosBins + sc.bin[ic]] += w * sc.weight[ic];
            }
      }
      const double norm = h.norm();
      if (!(norm > 0)) continue;
      shots[k] = h / norm;
    }
  }
  for (std::size_t k = 0; k < shots.size(); ++k) {
    if (!shots[k]) continue;
    out.keypoint.push_back(k);
    out.shot.push_back(*shots[k]);
  }
  return out;
}

PcaBasis fit_pca(const RawDescriptors& a, const RawDescriptors& b, std::size_t dim) {
  const std::size_t n = a.shot.size() + b.shot.size();
  PcaBasis basis;
  basis.mean.setZero();
  for (const auto& s : a.shot) basis.mean += s;
  for (const auto& s : b.shot) basis.mean += s;
  if (n > 0) basis.mean /= static_cast<double>(n);
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(kShotSize, kShotSize);
  Eigen::MatrixXd centered(kShotSize, n);
  std::size_t col = 0;
  for (const auto& s : a.shot) centered.col(col++) = s - basis.mean;
  for (const auto& s : b.shot) centered.col(col++) = s - basis.mean;
  if (n > 1) cov = centered * centered.transpose() / static_cast<double>(n - 1);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
  dim = std::min(dim, kShotSize);
  basis.axes.resize(kShotSize, static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < dim; ++i) {
    Shot v = es.eigenvectors().col(static_cast<Eigen::Index>(kShotSize - 1 - i));
    // fix the sign so the basis does not depend on the solver's choice
    Eigen::Index arg;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    basis.axes.col(static_cast<Eigen::Index>(i)) = v;
  }
  return basis;
}

Eigen::MatrixXd project(const PcaBasis& basis, const RawDescriptors& d) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(d.shot.size()), basis.axes.cols());
  for (std::size_t i = 0; i < d.shot.size(); ++i) {
    out.row(static_cast<Eigen::Index>(i)) = ((d.shot[i] - basis.mean).transpose() * basis.axes);
  }
  return out;
}

namespace {

Descriptors finish(const PointCloud& keypoints, const RawDescriptors& raw, const PcaBasis& basis) {
  Descriptors d;
  d.keypoints.reserve(raw.keypoint.size());
  for (std::size_t k : raw.keypoint) d.keypoints.push_back(keypoints[k]);
  d.values = project(basis, raw);
  return d;
}

}  // namespace

std::pair<Descriptors, Descriptors> compute_descriptors(const PointCloud& cloudA, const PointCloud& cloudB,
                                                        const PointCloud& kpA, const PointCloud& kpB,
                                                        const AlignParams& params) {
  params.validate();
  const PointCloud dsA = voxel_downsample(cloudA, params.PC_ds);
  const PointCloud dsB = voxel_downsample(cloudB, params.PC_ds);
  RawDescriptors rawA, rawB;
  if (dsA.size() >= 3) rawA = compute_shot(dsA, estimate_normals(dsA, params.N_n), kpA, params.FD_r);
  if (dsB.size() >= 3) rawB = compute_shot(dsB, estimate_normals(dsB, params.N_n), kpB, params.FD_r);
  const PcaBasis basis = fit_pca(rawA, rawB);
  return {finish(kpA, rawA, basis), finish(kpB, rawB, basis)};
}

// --- matching and RANSAC ----------------------------------------------------

std::vector<std::pair<std::size_t, std::size_t>> mutual_matches(const Eigen::MatrixXd& a,
                                                                const Eigen::MatrixXd& b) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  const Eigen::Index na = a.rows(), nb = b.rows();
  if (na == 0 || nb == 0) return out;
  // squared distances through one matrix product per block, in single precision
  const Eigen::MatrixXf af = a.cast<float>();
  const Eigen::MatrixXf bf = b.cast<float>();
  const Eigen::VectorXf a2 = af.rowwise().squaredNorm();
  const Eigen::VectorXf b2 = bf.rowwise().squaredNorm();
  std::vector<Eigen::Index> best_b(na, -1);
  std::vector<float> best_b_d(na, std::numeric_limits<float>::infinity());
  std::vector<Eigen::Index> best_a(nb, -1);
  std::vector<float> best_a_d(nb, std::numeric_limits<float>::infinity());
  constexpr Eigen::Index kBlock = 1024;
  Eigen::MatrixXf g;
  for (Eigen::Index c0 = 0; c0 < na; c0 += kBlock) {
    const Eigen::Index cols = std::min(kBlock, na - c0);
    g.noalias() = bf * af.middleRows(c0, cols).transpose();  // nb x cols
    for (Eigen::Index i = 0; i < cols; ++i) {
      const float ai = a2[c0 + i];
      const float* col = g.col(i).data();
      float bd = best_b_d[c0 + i];
      Eigen::Index bj = best_b[c0 + i];
      for (Eigen::Index j = 0; j < nb; ++j) {
        const float v = ai + b2[j] - 2.0f * col[j];
        if (v < bd) {
          bd = v;
          bj = j;
        }
        if (v < best_a_d[j]) {
          best_a_d[j] = v;
          best_a[j] = c0 + i;
        }
      }
      best_b_d[c0 + i] = bd;
      best_b[c0 + i] = bj;
    }
  }
  for (Eigen::Index i = 0; i < na; ++i) {
    const Eigen::Index j = best_b[i];
    if (j >= 0 && best_a[j] == i) out.emplace_back(i, j);
  }
  return out;
}

Pose rigid_fit(std::span<const Point3> src, std::span<const Point3> dst) {
  if (src.size() != dst.size() || src.size() < 3) throw DegenerateInput("rigid_fit needs >= 3 pairs");
  Eigen::Matrix3Xd s(3, src.size()), d(3, dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    s.col(static_cast<Eigen::Index>(i)) = src[i];
    d.col(static_cast<Eigen::Index>(i)) = dst[i];
  }
  const Eigen::Matrix4d T = Eigen::umeyama(s, d, false);
  return Pose::from_matrix(T.topLeftCorner<3, 3>(), T.topRightCorner<3, 1>());
}

CoarseResult ransac_rigid(std::span<const Point3> dst, std::span<const Point3> src, double thr,
                          const RansacOptions& opts) {
  CoarseResult res;
  const std::size_t n = dst.size();
  res.correspondences = n;
  if (n < 3) return res;
  std::mt19937_64 rng(opts.seed);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  const double thr2 = thr * thr;
  auto count_inliers = [&](const Pose& T, std::vector<std::size_t>* ids, double limit2) {
    const Eigen::Matrix3d R = T.rotation_matrix();
    const Eigen::Vector3d t = T.translation();
    std::size_t c = 0;
    for (std::size_t i = 0; i < n; ++i) {
      if ((R * src[i] + t - dst[i]).squaredNorm() <= limit2) {
        ++c;
        if (ids) ids->push_back(i);
      }
    }
    return c;
  };
  std::size_t best = 0;
  Pose best_pose;
  std::size_t evaluated = 0;
  for (std::size_t draw = 0; draw < opts.max_draws && evaluated < opts.hypotheses; ++draw) {
    const std::size_t i = pick(rng), j = pick(rng), k = pick(rng);
    if (i == j || j == k || i == k) continue;
    // reject samples whose triangles disagree in edge length or are degenerate
    const std::size_t s[3] = {i, j, k};
    bool ok = true;
    for (int e = 0; e < 3 && ok; ++e) {
      const double la = (dst[s[e]] - dst[s[(e + 1) % 3]]).norm();
      const double lb = (src[s[e]] - src[s[(e + 1) % 3]]).norm();
      if (la < thr || lb < thr) ok = false;
      else if (std::min(la, lb) / std::max(la, lb) < opts.edge_similarity) ok = false;
    }
    if (!ok) continue;
    if ((dst[j] - dst[i]).cross(dst[k] - dst[i]).norm() < thr * thr) continue;
    const Point3 ps[3] = {src[i], src[j], src[k]};
    const Point3 pd[3] = {dst[i], dst[j], dst[k]};
    const Pose T = rigid_fit(ps, pd);
    ++evaluated;
    const std::size_t c = count_inliers(T, nullptr, thr2);
    if (c > best) {
      best = c;
      best_pose = T;
      if (static_cast<double>(best) >= opts.early_exit_ratio * static_cast<double>(n)) break;
    }
  }
  res.hypotheses = evaluated;
  if (best < 3) return res;
  // least-squares refits on the consensus set, tightening the gate from thr
  // to thr / 4 so near-miss matches stop pulling the estimate
  Pose pose = best_pose;
  for (double scale : {1.0, 0.5, 0.25}) {
    const double gate2 = thr2 * scale * scale;
    std::vector<std::size_t> ids;
    count_inliers(pose, &ids, gate2);
    for (int round = 0; round < 3 && ids.size() >= 3; ++round) {
      std::vector<Point3> s(ids.size()), d(ids.size());
      for (std::size_t m = 0; m < ids.size(); ++m) {
        s[m] = src[ids[m]];
        d[m] = dst[ids[m]];
      }
      const Pose refit = rigid_fit(s, d);
      std::vector<std::size_t> next;
      count_inliers(refit, &next, gate2);
      if (next.size() < 3) break;
      pose = refit;
      const bool same = next == ids;
      ids = std::move(next);
      if (same) break;
    }
  }
  std::vector<std::size_t> ids;
  count_inliers(pose, &ids, thr2);
  res.pose = pose;
  res.inliers = ids.size();
  const double need = std::max(10.0, 0.05 * static_cast<double>(n));
  res.ok = static_cast<double>(res.inliers) >= need;
  return res;
}

CoarseResult coarse_align(const Descriptors& a, const Descriptors& b, double K_r, const RansacOptions& opts) {
  CoarseResult res;
  if (a.values.rows() < 3 || b.values.rows() < 3) return res;
  const auto matches = mutual_matches(a.values, b.values);
  std::vector<Point3> dst(matches.size()), src(matches.size());
  for (std::size_t m = 0; m < matches.size(); ++m) {
    dst[m] = a.keypoints[matches[m].first];
    src[m] = b.keypoints[matches[m].second];
  }
  return ransac_rigid(dst, src, 2.0 * K_r, opts);
}

// --- NDT --------------------------------------------------------------------

namespace {

struct Gaussian {
  Eigen::Vector3d mean;
  Eigen::Matrix3d inv_cov;
};

using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat6 = Eigen::Matrix<double, 6, 6>;

class NdtTarget {
 public:
  NdtTarget(const PointCloud& target, double res, std::size_t min_points) : res_(res) {
    struct Acc {
      Eigen::Vector3d sum = Eigen::Vector3d::Zero();
      Eigen::Matrix3d sq = Eigen::Matrix3d::Zero();
      std::size_t n = 0;
    };
    absl::flat_hash_map<VoxelKey, Acc> acc;
    for (const auto& p : target.points()) {
      auto& a = acc[voxel_of(p, res)];
      a.sum += p;
      a.sq += p * p.transpose();
      ++a.n;
    }
    const double floor = 1e-3 * res * res;
    for (const auto& [key, a] : acc) {
      if (a.n < min_points) continue;
      const Eigen::Vector3d mean = a.sum / static_cast<double>(a.n);
      Eigen::Matrix3d cov = (a.sq - static_cast<double>(a.n) * mean * mean.transpose()) /
                            static_cast<double>(a.n - 1);
      const Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(cov);
      const Eigen::Vector3d ev = es.eigenvalues().cwiseMax(floor);
      const Eigen::Matrix3d inv = es.eigenvectors() * ev.cwiseInverse().asDiagonal() * es.eigenvectors().transpose();
      cells_.emplace(key, Gaussian{mean, inv});
    }
  }

  bool empty() const { return cells_.empty(); }

  template <typename F>
  void near(const Point3& p, F&& f) const {
    const VoxelKey k = voxel_of(p, res_);
    static constexpr int kOff[7][3] = {{0, 0, 0}, {1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                       {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    for (const auto& o : kOff) {
      const auto it = cells_.find(VoxelKey{k.x + o[0], k.y + o[1], k.z + o[2]});
      if (it != cells_.end()) f(it->second);
    }
  }

 private:
  double res_;
  absl::flat_hash_map<VoxelKey, Gaussian> cells_;
};

Eigen::Matrix3d skew(const Eigen::Vector3d& v) {
  Eigen::Matrix3d m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

// Pose for a perturbation [t, w] applied about center c: x -> R(w)(x - c) + c + t.
Pose perturbation(const Vec6& p, const Eigen::Vector3d& c) {
  const Eigen::Vector3d w = p.tail<3>();
  const double angle = w.norm();
  const Eigen::Matrix3d R = angle > 0 ? Eigen::AngleAxisd(angle, w / angle).toRotationMatrix()
                                      : Eigen::Matrix3d::Identity();
  return Pose::from_matrix(R, c - R * c + p.head<3>());
}

struct ScoreTerms {
  double score = 0.0;
  Vec6 grad = Vec6::Zero();
  Mat6 hess = Mat6::Zero();
  std::size_t hits = 0;
};

}  // namespace

NdtResult ndt_register(const PointCloud& source, const PointCloud& target, const Pose& init, double NDT_r,
                       double NDT_ss, const NdtOptions& opts) {
  NdtResult res;
  res.pose = init;
  const NdtTarget grid(target, NDT_r, opts.min_points);
  if (grid.empty() || source.empty()) {
    res.status = NdtResult::Status::NoDistributions;
    return res;
  }
  const double c1 = 10.0 * (1.0 - opts.outlier_ratio);
  const double c2 = opts.outlier_ratio / (NDT_r * NDT_r * NDT_r);
  const double d3 = -std::log(c2);
  const double d1 = -std::log(c1 + c2) - d3;
  const double d2 = -2.0 * std::log((-std::log(c1 * std::exp(-0.5) + c2) - d3) / d1);

  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  for (const auto& p : source.points()) center += p;
  center /= static_cast<double>(source.size());

  const auto n = static_cast<std::int64_t>(source.size());
  auto evaluate = [&](const Pose& pose, bool derivatives) {
    const Eigen::Matrix3d R = pose.rotation_matrix();
    const Eigen::Vector3d t = pose.translation();
    const Eigen::Vector3d c = R * center + t;  // perturbation center in the moved frame
    ScoreTerms total;
#pragma omp parallel
    {
      ScoreTerms local;
      Eigen::Matrix<double, 3, 6> J;
#pragma omp for schedule(static)
      for (std::int64_t i = 0; i < n; ++i) {
        const Eigen::Vector3d x = R * source[i] + t;
        const Eigen::Vector3d r = x - c;
        if (derivatives) {
          J.leftCols<3>().setIdentity();
          J.rightCols<3>() = -skew(r);
        }
        grid.near(x, [&](const Gaussian& g) {
          const Eigen::Vector3d q = x - g.mean;
          const Eigen::Vector3d Cq = g.inv_cov * q;
          const double m = q.dot(Cq);
          const double e = std::exp(-0.5 * d2 * m);
          if (!(e > 0) || !std::isfinite(e)) return;
          local.score += -d1 * e;
          ++local.hits;
          if (!derivatives) return;
          const double k = d1 * d2 * e;
          const Vec6 qCJ = J.transpose() * Cq;
          local.grad += k * qCJ;
          Mat6 H = -d2 * qCJ * qCJ.transpose() + J.transpose() * g.inv_cov * J;
          // second derivative of the rotated point: 0.5 (e_a r_b + e_b r_a) - delta_ab r
          for (int a = 0; a < 3; ++a) {
            for (int b = 0; b < 3; ++b) {
              Eigen::Vector3d h = Eigen::Vector3d::Zero();
              h[a] += 0.5 * r[b];
              h[b] += 0.5 * r[a];
              if (a == b) h -= r;
              H(3 + a, 3 + b) += Cq.dot(h);
            }
          }
          local.hess += k * H;
        });
      }
#pragma omp critical
      {
        total.score += local.score;
        total.grad += local.grad;
        total.hess += local.hess;
        total.hits += local.hits;
      }
    }
    return std::make_pair(total, c);
  };

  Pose pose = init;
  auto [terms, c] = evaluate(pose, true);
  for (std::size_t it = 0; it < opts.max_iterations; ++it) {
    res.iterations = it + 1;
    Vec6 step;
    // Newton step with every curvature taken as |lambda|: plain Newton when the
    // Hessian is negative definite, an ascent direction otherwise
    const Eigen::SelfAdjointEigenSolver<Mat6> es(terms.hess);
    const Vec6 lam = es.eigenvalues().cwiseAbs();
    const double floor = std::max(lam.maxCoeff() * 1e-9, std::numeric_limits<double>::min());
    step = es.eigenvectors() * ((es.eigenvectors().transpose() * terms.grad).array() / lam.array().max(floor)).matrix();
    if (!step.allFinite() || step.norm() == 0) {
      res.status = terms.hits > 0 ? NdtResult::Status::Converged : NdtResult::Status::NotConverged;
      break;
    }
    double len = step.norm();
    if (len > NDT_ss) {
      step *= NDT_ss / len;
      len = NDT_ss;
    }
    // backtracking: halve until the score does not decrease
    double alpha = 1.0;
    Pose next;
    ScoreTerms next_terms;
    Eigen::Vector3d next_c;
    bool improved = false;
    for (int bt = 0; bt < 20; ++bt) {
      next = perturbation(alpha * step, c) * pose;
      auto probe = evaluate(next, false);
      if (probe.first.score >= terms.score) {
        improved = true;
        break;
      }
      alpha *= 0.5;
    }
    if (!improved) {
      res.status = terms.hits > 0 ? NdtResult::Status::Converged : NdtResult::Status::NotConverged;
      break;
    }
    pose = next;
    std::tie(terms, c) = evaluate(pose, true);
    if (alpha * len < opts.epsilon) {
      res.status = terms.hits > 0 ? NdtResult::Status::Converged : NdtResult::Status::NotConverged;
      break;
    }
  }
  res.pose = pose;
  res.score = terms.score;
  return res;
}

// --- grid search ------------------------------------------------------------

const char* to_string(StageOutcome o) {
  switch (o) {
    case StageOutcome::FailedCoarse: return "FailedCoarse";
    case StageOutcome::FailedFine: return "FailedFine";
    case StageOutcome::Succeeded: return "Succeeded";
  }
  return "?";
}

namespace {

struct Prepared {
  PointCloud ds;
  std::map<std::size_t, Normals> normals;  // by N_n
};

std::uint64_t candidate_seed(std::uint64_t seed, const AlignParams& p) {
  std::uint64_t h = seed ^ 0x51ed270b27a5f3c1ULL;
  for (double v : {p.K_r, p.PC_ds, static_cast<double>(p.N_n), p.FD_r}) {
    h ^= std::hash<double>{}(v) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  }
  return h;
}

}  // namespace

AlignmentResult grid_search_align(const PointCloud& mapA, const PointCloud& mapB,
                                  const std::vector<AlignParams>& grid, const GridSearchOptions& opts) {
  if (grid.empty()) throw DataError("empty parameter grid");
  for (const auto& p : grid) p.validate();
  if (mapA.size() < 3 || mapB.size() < 3) throw DegenerateInput("alignment needs >= 3 points per map");

  // evaluation order: K_r outermost so keypoints and descriptors are reused
  std::vector<std::size_t> order(grid.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = grid[a];
    const auto& y = grid[b];
    return std::tie(x.K_r, x.PC_ds, x.N_n, x.FD_r) < std::tie(y.K_r, y.PC_ds, y.N_n, y.FD_r);
  });

  std::map<double, std::pair<Prepared, Prepared>> prepared;  // by PC_ds
  auto prep = [&](double ds, std::size_t nn) -> std::pair<Prepared, Prepared>& {
    auto& pp = prepared[ds];
    if (pp.first.ds.empty()) {
      pp.first.ds = voxel_downsample(mapA, ds);
      pp.second.ds = voxel_downsample(mapB, ds);
    }
    for (Prepared* p : {&pp.first, &pp.second}) {
      if (!p->normals.count(nn) && p->ds.size() >= 3) p->normals[nn] = estimate_normals(p->ds, nn);
    }
    return pp;
  };

  std::vector<StageLogEntry> log(grid.size());
  double cached_kr = -1;
  PointCloud kpA, kpB;
  std::tuple<double, double, std::size_t, double> coarse_key{-1, -1, 0, -1};
  CoarseResult coarse;
  for (std::size_t oi = 0; oi < order.size(); ++oi) {
    const std::size_t idx = order[oi];
    const AlignParams& p = grid[idx];
    StageLogEntry& e = log[idx];
    e.index = idx;
    e.params = p;
    if (p.K_r != cached_kr) {
      kpA = select_keypoints(mapA, p.K_r);
      kpB = select_keypoints(mapB, p.K_r);
      cached_kr = p.K_r;
    }
    const auto key = std::make_tuple(p.K_r, p.PC_ds, p.N_n, p.FD_r);
    auto& pp = prep(p.PC_ds, p.N_n);
    if (key != coarse_key) {
      coarse_key = key;
      coarse = CoarseResult{};
      if (pp.first.normals.count(p.N_n) && pp.second.normals.count(p.N_n)) {
        const RawDescriptors rawA = compute_shot(pp.first.ds, pp.first.normals.at(p.N_n), kpA, p.FD_r);
        const RawDescriptors rawB = compute_shot(pp.second.ds, pp.second.normals.at(p.N_n), kpB, p.FD_r);
        const PcaBasis basis = fit_pca(rawA, rawB);
        RansacOptions ro;
        ro.seed = candidate_seed(opts.seed, p);
        coarse = coarse_align(finish(kpA, rawA, basis), finish(kpB, rawB, basis), p.K_r, ro);
      }
    }
    e.correspondences = coarse.correspondences;
    e.coarse_inliers = coarse.inliers;
    if (!coarse.ok) {
      e.outcome = StageOutcome::FailedCoarse;
      continue;
    }
    const NdtResult fine = ndt_register(pp.second.ds, pp.first.ds, coarse.pose, p.NDT_r, p.NDT_ss);
    e.ndt_iterations = fine.iterations;
    e.transform = fine.pose;
    if (!fine.converged()) {
      e.outcome = StageOutcome::FailedFine;
      continue;
    }
    e.chamfer = chamfer_distance(transform(mapB, fine.pose), mapA, opts.chamfer_tau);
    e.outcome = std::isfinite(e.chamfer) ? StageOutcome::Succeeded : StageOutcome::FailedFine;
  }

  AlignmentResult result;
  bool found = false;
  for (const auto& e : log) {
    if (e.outcome != StageOutcome::Succeeded) continue;
    if (!found || e.chamfer < result.chamfer) {
      found = true;
      result.chamfer = e.chamfer;
      result.transform = e.transform;
      result.params = e.params;
      result.best_index = e.index;
    }
  }
  if (!found) throw AlignmentFailed(std::move(log));
  result.stage_log = std::move(log);
  return result;
}

std::string stage_log_csv(const std::vector<StageLogEntry>& log) {
  std::ostringstream out;
  out << "index,K_r,PC_ds,N_n,FD_r,NDT_r,NDT_ss,outcome,correspondences,coarse_inliers,ndt_iterations,chamfer\n";
  char buf[64];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof(buf), "%.17g", e.chamfer);
    out << e.index << ',' << e.params.K_r << ',' << e.params.PC_ds << ',' << e.params.N_n << ','
        << e.params.FD_r << ',' << e.params.NDT_r << ',' << e.params.NDT_ss << ',' << to_string(e.outcome)
        << ',' << e.correspondences << ',' << e.coarse_inliers << ',' << e.ndt_iterations << ','
        << (std::isfinite(e.chamfer) ? buf : "inf") << '\n';
  }
  return out.str();
}

}  // namespace lifemap
