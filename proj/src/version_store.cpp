#include "lifemap/version_store.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <charconv>
#include <sstream>

#include <json.hpp>

#include "lifemap/errors.hpp"
#include "lifemap/kernels.hpp"
#include "lifemap/spatial_index.hpp"

namespace lifemap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Advisory flock on root/.lock; shared for readers, exclusive for writers.
class StoreLock {
 public:
  StoreLock(const fs::path& root, bool exclusive) {
    fd_ = ::open((root / ".lock").c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open lock file in " + root.string());
    if (::flock(fd_, exclusive ? LOCK_EX : LOCK_SH) != 0) {
      ::close(fd_);
      throw IoError("cannot lock " + root.string());
    }
  }
  ~StoreLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  StoreLock(const StoreLock&) = delete;
  StoreLock& operator=(const StoreLock&) = delete;

 private:
  int fd_ = -1;
};

std::string fmt(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string boundary_text(const HullPolygon& hull) {
  std::string out;
  for (const auto& v : hull.vertices) out += fmt(v.x()) + " " + fmt(v.y()) + "\n";
  return out;
}

HullPolygon parse_boundary(const std::string& text, const std::string& source) {
  HullPolygon hull;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    double xy[2];
    const char* p = line.data();
    const char* end = line.data() + line.size();
    for (double& v : xy) {
      while (p < end && *p == ' ') ++p;
      const auto r = std::from_chars(p, end, v);
      if (r.ec != std::errc()) throw ParseError(source, line_no, "expected `x y`");
      p = r.ptr;
    }
    hull.vertices.emplace_back(xy[0], xy[1]);
  }
  if (hull.vertices.size() < 3) throw ParseError(source, line_no, "boundary needs >= 3 vertices");
  return hull;
}

std::string transform_text(const Pose& pose) {
  const auto m = pose.row_major();
  std::string out;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) out += fmt(m[r * 4 + c]) + (c == 3 ? "\n" : " ");
  }
  return out;
}

json record_json(const SessionRecord& r) {
  const auto m = r.transform.row_major();
  return json{{"index", r.index},
              {"id", r.id},
              {"timestamp", r.timestamp},
              {"transform", std::vector<double>(m.begin(), m.end())},
              {"session_points", r.session_points},
              {"nd_points", r.nd_points},
              {"pd_points", r.pd_points},
              {"base_points", r.base_points},
              {"session_bytes", r.session_bytes}};
}

SessionRecord record_from_json(const json& j) {
  SessionRecord r;
  r.index = j.at("index").get<std::size_t>();
  r.id = j.at("id").get<std::string>();
  r.timestamp = j.at("timestamp").get<double>();
  const auto m = j.at("transform").get<std::vector<double>>();
  if (m.size() != 12) throw DataError("manifest transform must have 12 values");
  r.transform = Pose::from_row_major(std::span<const double, 12>(m.data(), 12));
  r.session_points = j.at("session_points").get<std::size_t>();
  r.nd_points = j.at("nd_points").get<std::size_t>();
  r.pd_points = j.at("pd_points").get<std::size_t>();
  r.base_points = j.at("base_points").get<std::size_t>();
  r.session_bytes = j.at("session_bytes").get<std::uint64_t>();
  return r;
}

std::string manifest_text(const std::vector<SessionRecord>& sessions, double eps_rm, double voxel) {
  json j;
  j["schema_version"] = kStoreSchemaVersion;
  j["eps_rm"] = eps_rm;
  j["voxel"] = voxel;
  std::uint64_t all = 0;
  json arr = json::array();
  for (const auto& r : sessions) {
    arr.push_back(record_json(r));
    all += r.session_bytes;
  }
  j["all_bytes"] = all;
  j["sessions"] = std::move(arr);
  return j.dump(2) + "\n";
}

// Clean maps enter the store on the float32 grid with no two points closer
// than eps, so later subtractions only ever hit verbatim copies.
PointCloud normalize(const PointCloud& cloud, double voxel, double eps) {
  PointCloud c = voxel > 0 ? voxel_downsample(cloud, voxel) : cloud;
  c.set_labels({});
  return dedupe(quantize_f32(c), eps);
}

}  // namespace

// --- Store ------------------------------------------------------------------

struct StoreAccess {
  static std::vector<SessionRecord>& sessions(Store& s) { return s.sessions_; }
  static Store load(const fs::path& root);
};

Store Store::open(const fs::path& root) {
  if (!fs::exists(root / "manifest.json")) throw DataError("not a store (no manifest.json): " + root.string());
  StoreLock lock(root, false);
  return StoreAccess::load(root);
}

Store StoreAccess::load(const fs::path& root) {
  const fs::path manifest = root / "manifest.json";
  Store s;
  s.root_ = root;
  try {
    const json j = json::parse(read_file(manifest));
    if (j.at("schema_version").get<int>() != kStoreSchemaVersion) {
      throw DataError("unsupported store schema version in " + manifest.string());
    }
    s.eps_rm_ = j.at("eps_rm").get<double>();
    s.voxel_ = j.at("voxel").get<double>();
    for (const auto& r : j.at("sessions")) s.sessions_.push_back(record_from_json(r));
  } catch (const json::exception& e) {
    throw DataError(manifest.string() + ": " + e.what());
  }
  for (std::size_t t = 0; t < s.sessions_.size(); ++t) {
    if (s.sessions_[t].index != t) throw DataError(manifest.string() + ": session indices out of order");
  }
  if (s.sessions_.empty()) throw DataError(manifest.string() + ": no sessions");
  return s;
}

std::uint64_t Store::all_bytes() const {
  std::uint64_t all = 0;
  for (const auto& r : sessions_) all += r.session_bytes;
  return all;
}

const SessionRecord& Store::record(std::size_t t) const {
  if (t >= sessions_.size()) {
    throw NoSuchSession("no session " + std::to_string(t) + " (store has " + std::to_string(sessions_.size()) +
                        ")");
  }
  return sessions_[t];
}

fs::path Store::session_dir(std::size_t t) const { return root_ / "sessions" / std::to_string(t); }

PointCloud Store::base_map() const { return read_cloud(root_ / "base_map.pcd"); }

PointCloud Store::base_nd_of(std::size_t t) const {
  record(t);
  if (t == 0) throw NoSuchSession("session 0 has no diffs");
  return read_cloud(session_dir(t) / "nd.pcd");
}

PointCloud Store::session_pd_of(std::size_t t) const {
  record(t);
  if (t == 0) throw NoSuchSession("session 0 has no diffs");
  return read_cloud(session_dir(t) / "pd.pcd");
}

HullPolygon Store::boundary(std::size_t t) const {
  record(t);
  const fs::path p = session_dir(t) / "boundary.txt";
  return parse_boundary(read_file(p), p.string());
}

// --- set operations ---------------------------------------------------------

PointCloud point_subtract(const PointCloud& a, const PointCloud& b, double eps_rm) {
  if (!(eps_rm > 0)) throw DataError("eps_rm must be > 0");
  if (a.empty() || b.empty()) return a;
  const SpatialIndex index(b);
  const auto hit = kernels::has_neighbor_within(index, a.points(), eps_rm);
  std::vector<std::size_t> keep;
  keep.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!hit[i]) keep.push_back(i);
  }
  return a.select(keep);
}

PointCloud dedupe(const PointCloud& cloud, double eps) {
  if (cloud.size() < 2) return cloud;
  const SpatialIndex index(cloud);
  std::vector<std::uint8_t> dropped(cloud.size(), 0);
  std::vector<std::size_t> keep, near;
  keep.reserve(cloud.size());
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    if (dropped[i]) continue;
    keep.push_back(i);
    index.radius(cloud[i], eps, near);
    for (std::size_t j : near) {
      if (j > i) dropped[j] = 1;
    }
  }
  return cloud.select(keep);
}

PointCloud forward_update(const PointCloud& coexist, const PointCloud& base_overlap,
                          const PointCloud& base_nonoverlap, const PointCloud& session_nonoverlap,
                          const PointCloud& session_pd, const PointCloud& base_nd, double eps_rm) {
  PointCloud sum = concatenate({&coexist, &base_overlap, &base_nonoverlap, &session_nonoverlap, &session_pd});
  return point_subtract(sum, base_nd, eps_rm);
}

// --- init / commit ----------------------------------------------------------

Store init_store(const fs::path& root, const PointCloud& clean_session0, double voxel, double eps_rm) {
  if (!(eps_rm > 0)) throw DataError("eps_rm must be > 0");
  if (!(voxel >= 0)) throw DataError("store voxel must be >= 0");
  if (fs::exists(root) && !(fs::is_directory(root) && fs::is_empty(root))) {
    throw StoreExists("store root is not empty: " + root.string());
  }
  PointCloud base = clean_session0;
  base.set_labels({});
  base = dedupe(quantize_f32(base), eps_rm);
  const HullPolygon hull = hull_of(base);

  fs::create_directories(root / "sessions");
  StoreLock lock(root, true);
  const fs::path dir = root / "sessions" / "0";
  fs::create_directories(dir);
  write_file_atomic(dir / "boundary.txt", boundary_text(hull));
  write_file_atomic(dir / "base_boundary.txt", boundary_text(hull));
  write_file_atomic(dir / "transform.txt", transform_text(Pose::identity()));
  write_file_atomic(dir / "meta.json", json{{"id", "session0"}, {"points", base.size()}}.dump(2) + "\n");
  const std::string bytes = serialize_pcd(base, PcdEncoding::Binary);
  write_file_atomic(root / "base_map.pcd", bytes);

  Store s;
  s.root_ = root;
  s.eps_rm_ = eps_rm;
  s.voxel_ = voxel;
  SessionRecord r;
  r.id = "session0";
  r.session_points = base.size();
  r.base_points = base.size();
  r.session_bytes = bytes.size();
  s.sessions_.push_back(r);
  write_file_atomic(root / "manifest.json", manifest_text(s.sessions_, eps_rm, voxel));
  return s;
}

CommitReport commit_clean(Store& store, const PointCloud& clean, const std::string& id, double timestamp,
                          const CommitOptions& opts) {
  opts.change.validate();
  StoreLock lock(store.root(), true);
  // everything is computed before the first write so a failure leaves no trace
  const Store current = StoreAccess::load(store.root());
  const std::size_t t = current.size();
  const PointCloud base = current.base_map();
  const PointCloud session = normalize(clean, current.voxel(), current.eps_rm());

  CommitReport rep;
  rep.alignment = grid_search_align(base, session, opts.grid, opts.align);
  const PointCloud aligned = dedupe(quantize_f32(transform(session, rep.alignment.transform)), current.eps_rm());
  const HullPolygon hull = hull_of(aligned);
  const DiffResult d = detect_changes(base, aligned, opts.change);
  const PointCloud next = forward_update(d.coexist, d.base_overlap, d.base_nonoverlap, d.session_nonoverlap,
                                         d.session_pd, d.base_nd, current.eps_rm());

  SessionRecord r;
  r.index = t;
  r.id = id;
  r.timestamp = timestamp;
  r.transform = rep.alignment.transform;
  r.session_points = aligned.size();
  r.nd_points = d.base_nd.size();
  r.pd_points = d.session_pd.size();
  r.base_points = next.size();
  r.session_bytes = serialize_pcd(aligned, PcdEncoding::Binary).size();

  const json meta{{"id", id},
                  {"timestamp", timestamp},
                  {"align_params", rep.alignment.params.str()},
                  {"chamfer", rep.alignment.chamfer},
                  {"coexist", d.coexist.size()},
                  {"base_overlap", d.base_overlap.size()},
                  {"base_nonoverlap", d.base_nonoverlap.size()},
                  {"session_overlap", d.session_overlap.size()},
                  {"session_nonoverlap", d.session_nonoverlap.size()},
                  {"base_nd", d.base_nd.size()},
                  {"session_pd", d.session_pd.size()}};
  const HullPolygon base_hull = hull_of(next);

  const fs::path dir = current.session_dir(t);
  const fs::path tmp = current.root() / "sessions" / (".tmp-" + std::to_string(t));
  fs::remove_all(tmp);
  try {
    fs::create_directories(tmp);
    write_cloud(d.base_nd, tmp / "nd.pcd");
    write_cloud(d.session_pd, tmp / "pd.pcd");
    write_file_atomic(tmp / "boundary.txt", boundary_text(hull));
    write_file_atomic(tmp / "base_boundary.txt", boundary_text(base_hull));
    write_file_atomic(tmp / "transform.txt", transform_text(r.transform));
    write_file_atomic(tmp / "meta.json", meta.dump(2) + "\n");
    fs::remove_all(dir);  // leftover of an interrupted commit
    fs::rename(tmp, dir);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(tmp);
    throw IoError(e.what());
  } catch (...) {
    fs::remove_all(tmp);
    throw;
  }
  std::vector<SessionRecord> sessions = current.sessions();
  sessions.push_back(r);
  write_file_atomic(current.root() / "base_map.pcd", serialize_pcd(next, PcdEncoding::Binary));
  write_file_atomic(current.root() / "manifest.json", manifest_text(sessions, current.eps_rm(), current.voxel()));
  StoreAccess::sessions(store) = sessions;

  rep.ref = {t, id};
  rep.clean_points = aligned.size();
  rep.nd_points = r.nd_points;
  rep.pd_points = r.pd_points;
  rep.base_points = r.base_points;
  return rep;
}

CommitReport commit(Store& store, const SessionMap& session, const CommitOptions& opts) {
  const DynRemovalResult clean = remove_dynamic(session, opts.dyn);
  const double ts = session.frames.empty() ? 0.0 : session.frames.front().timestamp;
  return commit_clean(store, clean.static_map, session.id, ts, opts);
}

// --- queries ----------------------------------------------------------------

PointCloud rollback(const Store& store, std::size_t k) {
  store.record(k);
  StoreLock lock(store.root(), false);
  PointCloud m = store.base_map();
  for (std::size_t i = store.size() - 1; i > k; --i) {
    m.append(store.base_nd_of(i));
    m = point_subtract(m, store.session_pd_of(i), store.eps_rm());
  }
  return m;
}

PointCloud reconstruct(const Store& store, std::size_t k) { return hull_crop(rollback(store, k), store.boundary(k)); }

DiffResult diff_between(const Store& store, std::size_t a, std::size_t b, const ChangeParams& params) {
  store.record(a);
  store.record(b);
  return detect_changes(reconstruct(store, a), reconstruct(store, b), params);
}

double efficiency_ratio(double all, double ours) {
  if (!(all > 0)) throw DataError("total size must be > 0");
  return 1.0 - ours / all;
}

StoreStats stats(const Store& store) {
  StoreLock lock(store.root(), false);
  StoreStats s;
  s.sessions = store.size();
  s.base_bytes = fs::file_size(store.root() / "base_map.pcd");
  for (std::size_t t = 0; t < store.size(); ++t) {
    const fs::path dir = store.session_dir(t);
    for (const char* f : {"nd.pcd", "pd.pcd"}) {
      if (fs::exists(dir / f)) s.diff_bytes += fs::file_size(dir / f);
    }
    for (const char* f : {"boundary.txt", "base_boundary.txt"}) {
      if (fs::exists(dir / f)) s.boundary_bytes += fs::file_size(dir / f);
    }
  }
  s.ours_bytes = s.base_bytes + s.diff_bytes + s.boundary_bytes;
  s.all_bytes = store.all_bytes();
  s.ratio = efficiency_ratio(static_cast<double>(s.all_bytes), static_cast<double>(s.ours_bytes));
  return s;
}

std::string tree_checksum(const fs::path& root) {
  std::vector<fs::path> entries;
  for (const auto& e : fs::recursive_directory_iterator(root)) entries.push_back(e.path());
  std::sort(entries.begin(), entries.end());
  std::string acc;
  for (const auto& p : entries) {
    acc += fs::relative(p, root).generic_string();
    acc += fs::is_regular_file(p) ? ":" + sha256_file(p) : "/";
    acc += "\n";
  }
  return sha256_hex(acc);
}

}  // namespace lifemap
