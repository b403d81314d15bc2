#include "lifemap/cli.hpp"

#include <chrono>
#include <filesystem>
#include <iostream>
#include <set>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "lifemap/alignment.hpp"
#include "lifemap/change_detection.hpp"
#include "lifemap/dynamic_removal.hpp"
#include "lifemap/errors.hpp"
#include "lifemap/kernels.hpp"
#include "lifemap/map_io.hpp"
#include "lifemap/synth.hpp"
#include "lifemap/version_store.hpp"

namespace lifemap::cli {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<std::pair<std::string, std::string>> parse_config(const std::string& text, const std::string& source) {
  std::vector<std::pair<std::string, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t no = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(source, no, "expected key = value");
    std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(source, no, "empty key");
    for (char& c : key) {
      if (c == '_') c = '-';
    }
    out.emplace_back(key, value);
  }
  return out;
}

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Report {
  json params = json::object();
  json metrics = json::object();
  json timings = json::object();
  json outputs = json::array();
};

class Stopwatch {
 public:
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - last_).count();
    last_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
};

json pose_json(const Pose& p) {
  const auto m = p.row_major();
  return std::vector<double>(m.begin(), m.end());
}

json dyn_json(const DynRemovalParams& p) {
  json j{{"voxel_size", p.voxel_size},     {"p_hit", p.p_hit},
         {"p_miss", p.p_miss},             {"p_min", p.p_min},
         {"p_max", p.p_max},               {"p_occ", p.p_occ},
         {"max_range", p.max_range},       {"submap_window", p.submap_window},
         {"plane_dist_thr", p.plane_dist_thr}, {"plane_ratio_thr", p.plane_ratio_thr},
         {"plane_max_iters", p.plane_max_iters}, {"plane_max_count", p.plane_max_count},
         {"knn_k", p.knn_k},               {"knn_radius", p.knn_radius},
         {"sor_k", p.sor_k},               {"sor_std_mul", p.sor_std_mul},
         {"reassign_radius", p.reassign_radius}, {"reassign_min_neighbors", p.reassign_min_neighbors},
         {"seed", p.seed}};
  j["height_cutoff"] = p.height_cutoff ? json(*p.height_cutoff) : json(nullptr);
  return j;
}

json change_json(const ChangeParams& p) {
  return json{{"r_coexist", p.r_coexist},
              {"r_overlap", p.r_overlap},
              {"bev_res", p.bev_res},
              {"h_thr", p.h_thr},
              {"multi_layer", p.multi_layer},
              {"layer_height", p.layer_height},
              {"pairing", p.pairing == ChangeParams::Pairing::Symmetric ? "symmetric" : "literal"},
              {"seed", p.seed}};
}

json diff_counts(const DiffResult& d) {
  return json{{"coexist", d.coexist.size()},
              {"base_diff", d.base_diff.size()},
              {"session_diff", d.session_diff.size()},
              {"base_overlap", d.base_overlap.size()},
              {"base_nonoverlap", d.base_nonoverlap.size()},
              {"session_overlap", d.session_overlap.size()},
              {"session_nonoverlap", d.session_nonoverlap.size()},
              {"base_nd", d.base_nd.size()},
              {"session_pd", d.session_pd.size()}};
}

std::string opt_str(const std::optional<double>& v) {
  if (!v) return "undefined";
  std::ostringstream s;
  s.precision(6);
  s << std::fixed << *v;
  return s.str();
}

json opt_json(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

// 8-bit grayscale, heights scaled over the occupied range, 0 = empty.
void write_pgm(const BevImage& img, const fs::path& path) {
  double lo = kInfinity, hi = -kInfinity;
  for (double v : img.cells) {
    if (std::isnan(v)) continue;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  std::string bytes = "P5\n" + std::to_string(img.width) + " " + std::to_string(img.height) + "\n255\n";
  const std::size_t header = bytes.size();
  bytes.resize(header + img.width * img.height, '\0');
  for (std::size_t j = 0; j < img.height; ++j) {
    for (std::size_t i = 0; i < img.width; ++i) {
      const double v = img.cells[j * img.width + i];
      if (std::isnan(v)) continue;
      const double s = hi > lo ? (v - lo) / (hi - lo) : 1.0;
      // image rows run top-down, plane v axis bottom-up
      bytes[header + (img.height - 1 - j) * img.width + i] = static_cast<char>(1 + std::lround(s * 254.0));
    }
  }
  write_file_atomic(path, bytes);
}

std::string transform_text(const Pose& p) {
  const auto m = p.row_major();
  std::ostringstream s;
  s.precision(17);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 4; ++c) s << m[r * 4 + c] << (c == 3 ? '\n' : ' ');
  }
  return s.str();
}

Pose jitter_pose(std::mt19937_64& rng, double max_deg, double max_shift) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double yaw = u(rng) * max_deg * M_PI / 180.0;
  return Pose(Eigen::Quaterniond(Eigen::AngleAxisd(yaw, Eigen::Vector3d::UnitZ())),
              Point3(u(rng) * max_shift, u(rng) * max_shift, 0.0));
}

// Inserts config entries after the selected (sub)subcommand, skipping keys the
// command line already sets.
std::vector<std::string> inject_config(const std::vector<std::string>& args, const CLI::App& app) {
  std::string config;
  std::set<std::string> given;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const std::string& a = args[i];
    if (a.rfind("--", 0) != 0) continue;
    const std::string name = a.substr(2, a.find('=') == std::string::npos ? std::string::npos : a.find('=') - 2);
    given.insert(name);
    if (name == "config") {
      if (a.find('=') != std::string::npos) {
        config = a.substr(a.find('=') + 1);
      } else if (i + 1 < args.size()) {
        config = args[i + 1];
      }
    }
  }
  if (config.empty()) return args;
  const auto entries = parse_config(read_file(config), config);

  // position after the subcommand chain
  std::size_t pos = args.size();
  const CLI::App* level = &app;
  for (std::size_t i = 1; i < args.size(); ++i) {
    const auto subs = level->get_subcommands([&](const CLI::App* s) { return s->get_name() == args[i]; });
    if (!subs.empty()) {
      level = subs.front();
      pos = i + 1;
    }
  }
  std::vector<std::string> out(args.begin(), args.begin() + static_cast<std::ptrdiff_t>(pos));
  for (const auto& [k, v] : entries) {
    if (k == "config" || given.count(k)) continue;
    out.push_back("--" + k + "=" + v);
  }
  out.insert(out.end(), args.begin() + static_cast<std::ptrdiff_t>(pos), args.end());
  return out;
}

struct Options {
  int threads = 0;
  std::uint64_t seed = 0;
  std::string report;
  std::string config;
  bool timings = false;
  std::string store = ".";

  DynRemovalParams dyn;
  std::optional<double> height_cutoff;
  ChangeParams change;
  std::string pairing = "symmetric";
  std::string grid = "fast";
  double chamfer_tau = 0.5;

  // positional / command specific
  std::string input;
  std::string input_b;
  std::string out;
  std::string dynamic_out;
  std::string labels_out;
  std::string truth;
  std::string stage_log;
  std::string aligned_out;
  bool clean_input = false;
  bool pgm = false;
  double store_voxel = 0.1;
  bool no_downsample = false;
  std::size_t t = 0;
  std::size_t a = 0;
  std::size_t b = 0;

  StreetOptions street;
  SimConfig sim;
  std::size_t sessions = 3;
  double lane_jitter = 1.0;
  double yaw_jitter = 10.0;
  double shift_jitter = 3.0;

  std::string detected;
  double radius = 0.2;
  double pr = 0;
  double rr = 0;
};

void add_dyn(CLI::App* c, Options& o) {
  auto& p = o.dyn;
  c->add_option("--voxel-size", p.voxel_size, "occupancy voxel edge (m)")->capture_default_str();
  c->add_option("--p-hit", p.p_hit)->capture_default_str();
  c->add_option("--p-miss", p.p_miss)->capture_default_str();
  c->add_option("--p-min", p.p_min)->capture_default_str();
  c->add_option("--p-max", p.p_max)->capture_default_str();
  c->add_option("--p-occ", p.p_occ)->capture_default_str();
  c->add_option("--max-range", p.max_range)->capture_default_str();
  c->add_option("--submap-window", p.submap_window)->capture_default_str();
  c->add_option("--plane-dist-thr", p.plane_dist_thr)->capture_default_str();
  c->add_option("--plane-ratio-thr", p.plane_ratio_thr)->capture_default_str();
  c->add_option("--plane-max-iters", p.plane_max_iters)->capture_default_str();
  c->add_option("--plane-max-count", p.plane_max_count)->capture_default_str();
  c->add_option("--knn-k", p.knn_k)->capture_default_str();
  c->add_option("--knn-radius", p.knn_radius)->capture_default_str();
  c->add_option("--sor-k", p.sor_k)->capture_default_str();
  c->add_option("--sor-std-mul", p.sor_std_mul)->capture_default_str();
  c->add_option("--reassign-radius", p.reassign_radius)->capture_default_str();
  c->add_option("--reassign-min-neighbors", p.reassign_min_neighbors)->capture_default_str();
  c->add_option("--height-cutoff", o.height_cutoff, "drop points above this height before classification");
}

void add_change(CLI::App* c, Options& o) {
  auto& p = o.change;
  c->add_option("--r-coexist", p.r_coexist)->capture_default_str();
  c->add_option("--r-overlap", p.r_overlap)->capture_default_str();
  c->add_option("--bev-res", p.bev_res)->capture_default_str();
  c->add_option("--h-thr", p.h_thr)->capture_default_str();
  c->add_flag("--multi-layer", p.multi_layer, "compare height bands separately");
  c->add_option("--layer-height", p.layer_height)->capture_default_str();
  c->add_option("--pairing", o.pairing)->check(CLI::IsMember({"symmetric", "literal"}))->capture_default_str();
}

void add_align(CLI::App* c, Options& o) {
  c->add_option("--grid", o.grid, "parameter grid")->check(CLI::IsMember({"fast", "full"}))->capture_default_str();
  c->add_option("--chamfer-tau", o.chamfer_tau)->capture_default_str();
}

void add_store(CLI::App* c, Options& o) {
  c->add_option("--store", o.store, "store root")->capture_default_str();
}

// Copies flag values into the parameter structs and checks their invariants.
void finalize(Options& o) {
  o.dyn.height_cutoff = o.height_cutoff;
  o.dyn.seed = o.seed;
  o.change.seed = o.seed;
  o.change.pairing = o.pairing == "literal" ? ChangeParams::Pairing::Literal : ChangeParams::Pairing::Symmetric;
  o.sim.seed = o.seed;
  o.street.seed = o.seed;
  try {
    o.dyn.validate();
    o.change.validate();
    o.sim.validate();
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  if (!(o.chamfer_tau > 0)) throw UsageError("--chamfer-tau must be > 0");
  if (o.threads < 0) throw UsageError("--threads must be >= 0");
  if (!(o.store_voxel >= 0)) throw UsageError("--voxel must be >= 0");
  if (!(o.radius > 0)) throw UsageError("--radius must be > 0");
}

std::vector<AlignParams> grid_of(const Options& o) { return o.grid == "full" ? full_grid() : fast_grid(); }

void out_cloud(Report& rep, const PointCloud& c, const std::string& path) {
  write_cloud(c, path);
  rep.outputs.push_back(path);
}

// --- commands ---------------------------------------------------------------

void cmd_clean(Options& o, Report& rep, std::ostream& out) {
  Stopwatch sw;
  const SessionMap s = read_session(o.input);
  rep.timings["read"] = sw.lap();
  const DynRemovalResult r = remove_dynamic(s, o.dyn);
  rep.timings["remove_dynamic"] = sw.lap();
  rep.params["dynamic_removal"] = dyn_json(o.dyn);
  out_cloud(rep, r.static_map, o.out);
  if (!o.dynamic_out.empty()) out_cloud(rep, r.dynamic_map, o.dynamic_out);
  PointCloud labeled;
  if (!o.labels_out.empty() || !o.truth.empty()) {
    labeled = assemble_map(s);
    labeled.set_labels(r.point_labels);
  }
  if (!o.labels_out.empty()) out_cloud(rep, labeled, o.labels_out);
  rep.metrics["points"] = r.point_labels.size();
  rep.metrics["static_points"] = r.static_map.size();
  rep.metrics["dynamic_points"] = r.dynamic_map.size();
  rep.metrics["voxels"] = r.voxel_count;
  out << "points: " << r.point_labels.size() << "\nstatic: " << r.static_map.size()
      << "\ndynamic: " << r.dynamic_map.size() << "\n";
  if (!o.truth.empty()) {
    const auto m = evaluate_pr_rr_f1(labeled, read_cloud(o.truth));
    rep.metrics["pr"] = opt_json(m.pr);
    rep.metrics["rr"] = opt_json(m.rr);
    rep.metrics["f1"] = opt_json(m.f1);
    out << "PR: " << opt_str(m.pr) << "\nRR: " << opt_str(m.rr) << "\nF1: " << opt_str(m.f1) << "\n";
  }
}

void cmd_align(Options& o, Report& rep, std::ostream& out) {
  Stopwatch sw;
  const PointCloud a = read_cloud(o.input);
  const PointCloud b = read_cloud(o.input_b);
  const auto grid = grid_of(o);
  rep.params["grid"] = o.grid;
  rep.params["candidates"] = grid.size();
  rep.params["chamfer_tau"] = o.chamfer_tau;
  AlignmentResult r;
  try {
    r = grid_search_align(a, b, grid, {o.chamfer_tau, o.seed});
  } catch (const AlignmentFailed& f) {
    if (!o.stage_log.empty()) {
      write_file_atomic(o.stage_log, stage_log_csv(f.stage_log()));
      rep.outputs.push_back(o.stage_log);
    }
    throw;
  }
  rep.timings["align"] = sw.lap();
  std::size_t ok = 0;
  for (const auto& e : r.stage_log) ok += e.outcome == StageOutcome::Succeeded;
  rep.metrics["chamfer"] = r.chamfer;
  rep.metrics["best_index"] = r.best_index;
  rep.metrics["best_params"] = r.params.str();
  rep.metrics["succeeded"] = ok;
  rep.metrics["transform"] = pose_json(r.transform);
  if (!o.out.empty()) {
    write_file_atomic(o.out, transform_text(r.transform));
    rep.outputs.push_back(o.out);
  }
  if (!o.aligned_out.empty()) out_cloud(rep, transform(b, r.transform), o.aligned_out);
  if (!o.stage_log.empty()) {
    write_file_atomic(o.stage_log, stage_log_csv(r.stage_log));
    rep.outputs.push_back(o.stage_log);
  }
  out << "chamfer: " << r.chamfer << "\nbest: " << r.best_index << " (" << r.params.str() << ")\n"
      << "succeeded: " << ok << "/" << r.stage_log.size() << "\ntransform:\n"
      << transform_text(r.transform);
}

void cmd_init(Options& o, Report& rep, std::ostream& out) {
  PointCloud c = read_cloud(o.input);
  if (o.store_voxel > 0 && !o.no_downsample) c = voxel_downsample(c, o.store_voxel);
  const Store s = init_store(o.store, c, o.store_voxel);
  rep.params["voxel"] = o.store_voxel;
  rep.metrics["base_points"] = s.record(0).base_points;
  rep.outputs.push_back(o.store);
  out << "initialized " << o.store << " with " << s.record(0).base_points << " points\n";
}

void cmd_commit(Options& o, Report& rep, std::ostream& out) {
  Store s = Store::open(o.store);
  CommitOptions co;
  co.dyn = o.dyn;
  co.grid = grid_of(o);
  co.align = {o.chamfer_tau, o.seed};
  co.change = o.change;
  rep.params["dynamic_removal"] = dyn_json(o.dyn);
  rep.params["change"] = change_json(o.change);
  rep.params["grid"] = o.grid;
  Stopwatch sw;
  CommitReport r;
  if (o.clean_input) {
    r = commit_clean(s, read_cloud(o.input), fs::path(o.input).stem().string(), 0.0, co);
  } else {
    r = commit(s, read_session(o.input), co);
  }
  rep.timings["commit"] = sw.lap();
  rep.metrics["index"] = r.ref.index;
  rep.metrics["id"] = r.ref.id;
  rep.metrics["clean_points"] = r.clean_points;
  rep.metrics["nd_points"] = r.nd_points;
  rep.metrics["pd_points"] = r.pd_points;
  rep.metrics["base_points"] = r.base_points;
  rep.metrics["chamfer"] = r.alignment.chamfer;
  rep.metrics["transform"] = pose_json(r.alignment.transform);
  rep.outputs.push_back(s.session_dir(r.ref.index).string());
  out << "committed session " << r.ref.index << " (" << r.ref.id << ")\nND: " << r.nd_points
      << "\nPD: " << r.pd_points << "\nbase: " << r.base_points << "\nchamfer: " << r.alignment.chamfer << "\n";
}

void cmd_checkout(Options& o, Report& rep, std::ostream& out) {
  const Store s = Store::open(o.store);
  const PointCloud m = reconstruct(s, o.t);
  rep.params["session"] = o.t;
  rep.metrics["points"] = m.size();
  out_cloud(rep, m, o.out);
  out << "session " << o.t << ": " << m.size() << " points -> " << o.out << "\n";
}

void cmd_diff(Options& o, Report& rep, std::ostream& out) {
  const Store s = Store::open(o.store);
  const PointCloud ma = reconstruct(s, o.a);
  const PointCloud mb = reconstruct(s, o.b);
  const DiffResult d = detect_changes(ma, mb, o.change);
  rep.params["a"] = o.a;
  rep.params["b"] = o.b;
  rep.params["change"] = change_json(o.change);
  const fs::path dir = o.out.empty() ? fs::path("diff_" + std::to_string(o.a) + "_" + std::to_string(o.b)) : fs::path(o.out);
  fs::create_directories(dir);
  out_cloud(rep, d.base_nd, (dir / "base_nd.pcd").string());
  out_cloud(rep, d.session_pd, (dir / "session_pd.pcd").string());
  const json counts = diff_counts(d);
  std::string summary;
  for (const auto& [k, v] : counts.items()) summary += k + ": " + v.dump() + "\n";
  write_file_atomic(dir / "summary.txt", summary);
  rep.outputs.push_back((dir / "summary.txt").string());
  if (o.pgm && !(ma.empty() && mb.empty())) {
    const PlaneModel plane = canonical_plane(ma, mb, o.change);
    const PointCloud* both[] = {&ma, &mb};
    const BevImage layout = bev_layout(both, plane, o.change.bev_res);
    write_pgm(bev_project(ma, layout), dir / "bev_a.pgm");
    write_pgm(bev_project(mb, layout), dir / "bev_b.pgm");
    rep.outputs.push_back((dir / "bev_a.pgm").string());
    rep.outputs.push_back((dir / "bev_b.pgm").string());
  }
  rep.metrics = counts;
  out << summary;
}

void cmd_log(Options& o, Report& rep, std::ostream& out) {
  const Store s = Store::open(o.store);
  json list = json::array();
  out << "index id timestamp session_points nd pd base\n";
  for (const auto& r : s.sessions()) {
    out << r.index << " " << r.id << " " << r.timestamp << " " << r.session_points << " " << r.nd_points << " "
        << r.pd_points << " " << r.base_points << "\n";
    list.push_back(json{{"index", r.index},
                        {"id", r.id},
                        {"timestamp", r.timestamp},
                        {"session_points", r.session_points},
                        {"nd_points", r.nd_points},
                        {"pd_points", r.pd_points},
                        {"base_points", r.base_points},
                        {"transform", pose_json(r.transform)}});
  }
  rep.metrics["sessions"] = list;
}

void cmd_stats(Options& o, Report& rep, std::ostream& out) {
  const StoreStats st = stats(Store::open(o.store));
  rep.metrics = json{{"sessions", st.sessions},     {"base_bytes", st.base_bytes},
                     {"diff_bytes", st.diff_bytes}, {"boundary_bytes", st.boundary_bytes},
                     {"ours_bytes", st.ours_bytes}, {"all_bytes", st.all_bytes},
                     {"ratio", st.ratio}};
  out << "sessions: " << st.sessions << "\nours: " << st.ours_bytes << " bytes\nall: " << st.all_bytes
      << " bytes\nratio: " << st.ratio * 100.0 << "%\n";
}

json street_json(const Options& o) {
  return json{{"frames", o.street.frames},
              {"static_boxes", o.street.static_boxes},
              {"moving_boxes", o.street.moving_boxes},
              {"street_length", o.street.street_length},
              {"sensor_height", o.street.sensor_height},
              {"horizontal_rays", o.sim.horizontal_rays},
              {"vertical_rays", o.sim.vertical_rays},
              {"noise_sigma", o.sim.noise_sigma},
              {"seed", o.seed}};
}

void cmd_synth_street(Options& o, Report& rep, std::ostream& out) {
  const StreetScene st = make_street_scene(o.street);
  const SimSession s = make_session(st.scene, st.trajectory, o.sim, "street");
  write_session(s.session, o.out);
  rep.params = street_json(o);
  rep.outputs.push_back(o.out);
  PointCloud truth = assemble_map(s.session);
  truth.set_labels(s.truth);
  const std::string tpath = o.truth.empty() ? (fs::path(o.out) / "truth.pcd").string() : o.truth;
  out_cloud(rep, truth, tpath);
  const auto dyn = static_cast<std::size_t>(std::count(s.truth.begin(), s.truth.end(), Label::Dynamic));
  rep.metrics["points"] = truth.size();
  rep.metrics["dynamic_points"] = dyn;
  out << "wrote " << o.out << ": " << s.session.frames.size() << " frames, " << truth.size() << " points ("
      << dyn << " dynamic)\n";
}

void cmd_synth_sequence(Options& o, Report& rep, std::ostream& out) {
  if (o.sessions == 0) throw UsageError("--sessions must be >= 1");
  ParkingStreet ps = make_parking_street(o.street);
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const fs::path root = o.out;
  fs::create_directories(root / "truth");
  rep.params = street_json(o);
  rep.params["sessions"] = o.sessions;
  for (std::size_t k = 0; k < o.sessions; ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "%02zu", k);
    if (k > 0) {
      const Mutation m = park_and_leave(ps, o.seed * 1000 + k);
      out_cloud(rep, m.truth_nd, (root / "truth" / (std::string(name) + "_nd.pcd")).string());
      out_cloud(rep, m.truth_pd, (root / "truth" / (std::string(name) + "_pd.pcd")).string());
    }
    const Pose frame = k == 0 ? Pose::identity() : jitter_pose(rng, o.yaw_jitter, o.shift_jitter);
    const double lane = k == 0 ? 0.0 : o.lane_jitter * u(rng);
    SimConfig cfg = o.sim;
    cfg.seed = o.seed * 1000 + k;
    const SimSession s = survey_street(ps, lane, frame, cfg, "session_" + std::string(name));
    const fs::path dir = root / ("session_" + std::string(name));
    write_session(s.session, dir);
    rep.outputs.push_back(dir.string());
    PointCloud truth = assemble_map(s.session);
    truth.set_labels(s.truth);
    out_cloud(rep, truth, (root / "truth" / (std::string(name) + "_labels.pcd")).string());
    write_file_atomic(root / "truth" / (std::string(name) + "_frame.txt"), transform_text(frame));
    out << "session " << name << ": " << truth.size() << " points\n";
  }
}

void cmd_eval_dynamic(Options& o, Report& rep, std::ostream& out) {
  const auto m = evaluate_pr_rr_f1(read_cloud(o.input), read_cloud(o.truth));
  rep.metrics = json{{"pr", opt_json(m.pr)}, {"rr", opt_json(m.rr)}, {"f1", opt_json(m.f1)}};
  out << "PR: " << opt_str(m.pr) << "\nRR: " << opt_str(m.rr) << "\nF1: " << opt_str(m.f1) << "\n";
}

void cmd_eval_change(Options& o, Report& rep, std::ostream& out) {
  const auto m = eval_change_pr(read_cloud(o.detected), read_cloud(o.truth), o.radius);
  rep.params["match_radius"] = o.radius;
  rep.metrics = json{{"precision", opt_json(m.precision)}, {"recall", opt_json(m.recall)}};
  out << "precision: " << opt_str(m.precision) << "\nrecall: " << opt_str(m.recall) << "\n";
}

void cmd_eval_f1(Options& o, Report& rep, std::ostream& out) {
  if (!(o.pr >= 0 && o.pr <= 1 && o.rr >= 0 && o.rr <= 1)) throw UsageError("--pr and --rr must lie in [0, 1]");
  const auto f1 = f1_score(o.pr, o.rr);
  rep.params["pr"] = o.pr;
  rep.params["rr"] = o.rr;
  rep.metrics["f1"] = opt_json(f1);
  out << "F1: " << opt_str(f1) << "\n";
}

}  // namespace

int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  Options o;
  CLI::App app{"lifemap: lifelong point cloud map maintenance"};
  app.name(raw_args.empty() ? "lifemap" : fs::path(raw_args[0]).filename().string());
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--threads", o.threads, "worker threads (0 = runtime default)")->capture_default_str();
  app.add_option("--seed", o.seed, "seed for every stochastic stage")->capture_default_str();
  app.add_option("--report", o.report, "write a JSON report here");
  app.add_option("--config", o.config, "key = value file; flags win over it");
  app.add_flag("--timings", o.timings, "include wall-clock timings in the report");

  using Fn = void (*)(Options&, Report&, std::ostream&);
  std::vector<std::pair<CLI::App*, Fn>> handlers;
  auto sub = [&](CLI::App* parent, const std::string& name, const std::string& help, Fn fn) {
    CLI::App* c = parent->add_subcommand(name, help);
    c->fallthrough();
    if (fn) handlers.emplace_back(c, fn);
    return c;
  };

  auto* clean = sub(&app, "clean", "remove dynamic points from a session", cmd_clean);
  clean->add_option("session", o.input, "session directory")->required();
  clean->add_option("--out", o.out, "static map output")->required();
  clean->add_option("--dynamic-out", o.dynamic_out, "dynamic points output");
  clean->add_option("--labels-out", o.labels_out, "assembled map with predicted labels");
  clean->add_option("--truth", o.truth, "labeled truth map for PR/RR/F1");
  add_dyn(clean, o);

  auto* align = sub(&app, "align", "align map B onto map A", cmd_align);
  align->add_option("map_a", o.input, "reference map")->required();
  align->add_option("map_b", o.input_b, "map to move")->required();
  align->add_option("--out", o.out, "transform output (3x4 row-major)");
  align->add_option("--aligned-out", o.aligned_out, "transformed map B");
  align->add_option("--stage-log", o.stage_log, "per-candidate CSV log");
  add_align(align, o);

  auto* init = sub(&app, "init", "create a store from a clean map", cmd_init);
  init->add_option("map", o.input, "clean session-0 map")->required();
  init->add_option("--voxel", o.store_voxel, "downsampling cell for stored maps (0 = none)")->capture_default_str();
  init->add_flag("--no-downsample", o.no_downsample, "store the initial map as given");
  add_store(init, o);

  auto* commit_cmd = sub(&app, "commit", "merge a session into the store", cmd_commit);
  commit_cmd->add_option("session", o.input, "session directory (or clean map with --clean)")->required();
  commit_cmd->add_flag("--clean", o.clean_input, "input is an already clean map file");
  add_store(commit_cmd, o);
  add_dyn(commit_cmd, o);
  add_align(commit_cmd, o);
  add_change(commit_cmd, o);

  auto* checkout = sub(&app, "checkout", "reconstruct a historic session", cmd_checkout);
  checkout->add_option("t", o.t, "session index")->required();
  checkout->add_option("--out", o.out, "output map")->required();
  add_store(checkout, o);

  auto* diff = sub(&app, "diff", "changes between two stored sessions", cmd_diff);
  diff->add_option("a", o.a, "earlier session")->required();
  diff->add_option("b", o.b, "later session")->required();
  diff->add_option("--out", o.out, "output directory (default diff_<a>_<b>)");
  diff->add_flag("--pgm", o.pgm, "export BEV images");
  add_store(diff, o);
  add_change(diff, o);

  auto* log = sub(&app, "log", "list committed sessions", cmd_log);
  add_store(log, o);
  auto* st = sub(&app, "stats", "storage usage", cmd_stats);
  add_store(st, o);

  auto* synth = sub(&app, "synth", "generate synthetic sessions", nullptr);
  synth->require_subcommand(1);
  auto sim_opts = [&](CLI::App* c) {
    c->add_option("--out", o.out, "output directory")->required();
    c->add_option("--frames", o.street.frames)->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--street-length", o.street.street_length)->capture_default_str()->check(CLI::PositiveNumber);
    c->add_option("--static-boxes", o.street.static_boxes)->capture_default_str();
    c->add_option("--moving-boxes", o.street.moving_boxes)->capture_default_str();
    c->add_option("--horizontal-rays", o.sim.horizontal_rays)->capture_default_str();
    c->add_option("--vertical-rays", o.sim.vertical_rays)->capture_default_str();
    c->add_option("--noise", o.sim.noise_sigma)->capture_default_str();
  };
  auto* street = sub(synth, "street", "one street session with truth labels", cmd_synth_street);
  sim_opts(street);
  street->add_option("--truth", o.truth, "labeled truth map (default <out>/truth.pcd)");
  auto* seq = sub(synth, "sequence", "parking street surveyed repeatedly, one car moved per session",
                  cmd_synth_sequence);
  sim_opts(seq);
  seq->add_option("--sessions", o.sessions)->capture_default_str();
  seq->add_option("--lane-jitter", o.lane_jitter, "lateral trajectory offset bound (m)")->capture_default_str();
  seq->add_option("--yaw-jitter", o.yaw_jitter, "session frame yaw bound (deg)")->capture_default_str();
  seq->add_option("--shift-jitter", o.shift_jitter, "session frame shift bound (m)")->capture_default_str();

  auto* eval = sub(&app, "eval", "score results against truth files", nullptr);
  eval->require_subcommand(1);
  auto* ed = sub(eval, "dynamic", "PR / RR / F1 of predicted labels", cmd_eval_dynamic);
  ed->add_option("--pred", o.input, "map with predicted labels")->required();
  ed->add_option("--truth", o.truth, "map with truth labels")->required();
  auto* ec = sub(eval, "change", "precision / recall of detected changes", cmd_eval_change);
  ec->add_option("--detected", o.detected)->required();
  ec->add_option("--truth", o.truth)->required();
  ec->add_option("--radius", o.radius, "match radius (m)")->capture_default_str();
  auto* ef = sub(eval, "f1", "F1 from PR and RR", cmd_eval_f1);
  ef->add_option("--pr", o.pr)->required();
  ef->add_option("--rr", o.rr)->required();

  Report rep;
  std::string command;
  int code = kOk;
  std::string error;
  try {
    std::vector<std::string> args = inject_config(raw_args, app);
    std::vector<char*> argv;
    for (auto& a : args) argv.push_back(a.data());
    app.parse(static_cast<int>(argv.size()), argv.data());
    finalize(o);
    if (o.threads > 0) kernels::set_max_threads(o.threads);
    for (auto& [c, fn] : handlers) {
      if (!c->parsed()) continue;
      command = c->get_parent() == &app ? c->get_name() : c->get_parent()->get_name() + " " + c->get_name();
      rep.params["seed"] = o.seed;
      rep.params["threads"] = o.threads;
      fn(o, rep, out);
    }
  } catch (const CLI::ParseError& e) {
    const int c = app.exit(e, out, err);
    return c == 0 ? kOk : kUsage;
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    code = kUsage;
    error = e.what();
  } catch (const PipelineError& e) {
    err << "pipeline failure: " << e.what() << "\n";
    code = kPipelineFailure;
    error = e.what();
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    code = kDataError;
    error = e.what();
  } catch (const fs::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    code = kDataError;
    error = e.what();
  } catch (const std::exception& e) {
    err << "failure: " << e.what() << "\n";
    code = kPipelineFailure;
    error = e.what();
  }
  if (!o.report.empty()) {
    json j{{"command", command},
           {"params", rep.params},
           {"metrics", rep.metrics},
           {"timings", o.timings ? rep.timings : json::object()},
           {"outputs", rep.outputs},
           {"exit_code", code}};
    if (!error.empty()) j["error"] = error;
    try {
      write_file_atomic(o.report, j.dump(2) + "\n");
    } catch (const std::exception& e) {
      err << "cannot write report: " << e.what() << "\n";
      if (code == kOk) code = kDataError;
    }
  }
  return code;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace lifemap::cli
