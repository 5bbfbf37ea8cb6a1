#include "mrus/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <initializer_list>
#include <random>
#include <sstream>
#include <tuple>

#include "json.hpp"
#include "mrus/io.hpp"

namespace mrus {

namespace fs = std::filesystem;
using nlohmann::json;

const char* stage_name(Stage stage) {
  switch (stage) {
    case Stage::None: return "none";
    case Stage::Config: return "config";
    case Stage::Phantom: return "phantom";
    case Stage::Calibrate: return "calibrate";
    case Stage::Plan: return "plan";
    case Stage::Sweep: return "sweep";
    case Stage::Register: return "register";
    case Stage::Update: return "update";
    case Stage::Touch: return "touch-accuracy";
    case Stage::Report: return "report";
  }
  return "unknown";
}

namespace {

// Stage identifiers feeding stage_seed(); changing them changes every run.
enum SeedStage : std::uint64_t {
  kSeedPhantom = 1,
  kSeedBackground = 2,
  kSeedCurrent = 3,
  kSeedHandEye = 4,
  kSeedInjected = 5,
  kSeedUltrasound = 6,
  kSeedRegistration = 7,
  kSeedTouch = 8,
};

constexpr int kSchemaVersion = 1;
constexpr int kTorsoLabel = 1;
constexpr int kTableLabel = 0;

template <class F>
auto staged(Stage stage, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e.code(), e.what());
  }
}

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

// --- JSON config helpers ------------------------------------------------------

[[noreturn]] void config_error(const std::string& msg) { throw Error(ErrorCode::Config, msg); }

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) config_error(where + " must be a JSON object");
  for (const auto& item : j.items()) {
    const bool known = std::any_of(allowed.begin(), allowed.end(),
                                   [&](const char* k) { return item.key() == k; });
    if (!known) config_error("unknown key '" + item.key() + "' in " + where);
  }
}

template <class T>
void get(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception&) {
    config_error("bad value for '" + std::string(key) + "' in " + where);
  }
}

void get_vec3(const json& j, const char* key, Vec3& out, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (!v.is_array() || v.size() != 3 || !std::all_of(v.begin(), v.end(), [](const json& x) {
        return x.is_number();
      })) {
    config_error("'" + std::string(key) + "' in " + where + " must be an array of 3 numbers");
  }
  out = Vec3(v[0].get<double>(), v[1].get<double>(), v[2].get<double>());
}

void get_range(const json& j, const char* key, double& lo, double& hi, const std::string& where) {
  if (!j.contains(key)) return;
  const json& v = j.at(key);
  if (v.is_number()) {
    lo = hi = v.get<double>();
    return;
  }
  if (!v.is_array() || v.size() != 2 || !v[0].is_number() || !v[1].is_number()) {
    config_error("'" + std::string(key) + "' in " + where + " must be a number or [min, max]");
  }
  lo = v[0].get<double>();
  hi = v[1].get<double>();
}

PhantomSpec parse_phantom(const json& j) {
  const std::string where = "phantom spec";
  check_keys(j,
             {"dims", "spacing", "torso_half_axes", "torso_intensity", "background_intensity",
              "noise_amplitude", "echo_min", "echo_max", "inclusions"},
             where);
  PhantomSpec s = PhantomSpec::default_spec();
  get(j, "dims", s.dims, where);
  get_vec3(j, "spacing", s.spacing, where);
  get_vec3(j, "torso_half_axes", s.torso_half_axes, where);
  get(j, "torso_intensity", s.torso_intensity, where);
  get(j, "background_intensity", s.background_intensity, where);
  get(j, "noise_amplitude", s.noise_amplitude, where);
  get(j, "echo_min", s.echo_min, where);
  get(j, "echo_max", s.echo_max, where);
  if (j.contains("inclusions")) {
    if (!j["inclusions"].is_array()) config_error("'inclusions' must be an array");
    s.inclusions.clear();
    for (const auto& e : j["inclusions"]) {
      check_keys(e, {"center", "radii", "mri_intensity"}, "inclusion");
      Inclusion inc;
      get_vec3(e, "center", inc.center, "inclusion");
      get_vec3(e, "radii", inc.radii, "inclusion");
      get(e, "mri_intensity", inc.mri_intensity, "inclusion");
      s.inclusions.push_back(inc);
    }
  }
  return s;
}

Mat3 look_at(const Vec3& eye, const Vec3& target) {
  const Vec3 z = (target - eye).normalized();
  Vec3 x = z.cross(Vec3::UnitZ());
  if (x.norm() < 1e-9) x = Vec3::UnitX();
  x.normalize();
  const Vec3 y = z.cross(x);
  Mat3 r;
  r << x, y, z;
  return r;
}

double uniform_in(double lo, double hi, std::uint64_t seed) {
  if (lo == hi) return lo;
  std::mt19937_64 rng(seed);
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

// Error of an image -> World estimate against the truth.
std::pair<double, double> placement_error(const RigidTransform& estimate, const RigidTransform& truth) {
  const RigidTransform e = compose(invert(truth.relabeled(estimate.from(), FrameId::World)), estimate);
  return {e.translation().norm(), rotation_angle_norm(e)};
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create output directory " + dir.string());
}

fs::path iteration_file(const fs::path& dir, const char* stem, int iteration, const char* ext) {
  return dir / (std::string(stem) + "_" + std::to_string(iteration) + ext);
}

// Mean and sample standard deviation (n - 1); std is 0 for one sample.
std::pair<double, double> mean_std(const std::vector<double>& v) {
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  const double sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  return {mean, sd};
}

std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

// --- config --------------------------------------------------------------------

PipelineConfig PipelineConfig::parse(const std::string& json_text, const fs::path& base_dir) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::exception& e) {
    config_error(std::string("config is not valid JSON: ") + e.what());
  }
  check_keys(j,
             {"phantom", "seed", "output_dir", "threshold", "closing_radius", "scene", "camera",
              "hand_eye", "icp", "change", "us_geometry", "us", "stiffness", "sweep",
              "skin_stiffness", "plans", "compounding", "registration", "affine",
              "injected_error", "touch", "write_volumes", "chain_from_icp"},
             "config");
  PipelineConfig c;
  if (j.contains("phantom")) {
    if (!j["phantom"].is_string()) config_error("'phantom' must be a file path");
    fs::path p = j["phantom"].get<std::string>();
    if (p.is_relative()) p = base_dir / p;
    if (!fs::is_regular_file(p)) config_error("phantom spec file not found: " + p.string());
    c.phantom_file = p;
    json pj;
    try {
      pj = json::parse(io::read_text(p));
    } catch (const json::exception& e) {
      config_error("phantom spec is not valid JSON: " + std::string(e.what()));
    }
    c.phantom = parse_phantom(pj);
  }
  get(j, "seed", c.seed, "config");
  if (j.contains("output_dir")) {
    std::string out;
    get(j, "output_dir", out, "config");
    c.output_dir = out;
    if (c.output_dir.is_relative()) c.output_dir = base_dir / c.output_dir;
  }
  get(j, "threshold", c.threshold, "config");
  get(j, "closing_radius", c.closing_radius, "config");
  get(j, "skin_stiffness", c.skin_stiffness, "config");
  get(j, "affine", c.affine, "config");
  get(j, "write_volumes", c.write_volumes, "config");
  get(j, "chain_from_icp", c.chain_from_icp, "config");

  if (j.contains("scene")) {
    const json& s = j["scene"];
    check_keys(s,
               {"phantom_position", "phantom_yaw_deg", "camera_position", "camera_target",
                "table_half_x", "table_half_y", "marker_offset", "marker_tilt_deg", "tool_length"},
               "scene");
    get_vec3(s, "phantom_position", c.scene.phantom_position, "scene");
    get(s, "phantom_yaw_deg", c.scene.phantom_yaw_deg, "scene");
    get_vec3(s, "camera_position", c.scene.camera_position, "scene");
    get_vec3(s, "camera_target", c.scene.camera_target, "scene");
    get(s, "table_half_x", c.scene.table_half_x, "scene");
    get(s, "table_half_y", c.scene.table_half_y, "scene");
    get_vec3(s, "marker_offset", c.scene.marker_offset, "scene");
    get(s, "marker_tilt_deg", c.scene.marker_tilt_deg, "scene");
    get(s, "tool_length", c.scene.tool_length, "scene");
  }
  if (j.contains("camera")) {
    const json& s = j["camera"];
    check_keys(s, {"width", "height", "focal_px", "noise_xy_sigma", "noise_z_sigma"}, "camera");
    get(s, "width", c.camera.width, "camera");
    get(s, "height", c.camera.height, "camera");
    get(s, "focal_px", c.camera.focal_px, "camera");
    get(s, "noise_xy_sigma", c.camera.noise_xy_sigma, "camera");
    get(s, "noise_z_sigma", c.camera.noise_z_sigma, "camera");
  }
  if (j.contains("hand_eye")) {
    const json& s = j["hand_eye"];
    check_keys(s,
               {"count", "translation_noise_mm", "rotation_noise_deg", "workspace_center",
                "workspace_half_extent", "max_tilt_deg"},
               "hand_eye");
    get(s, "count", c.hand_eye.count, "hand_eye");
    get(s, "translation_noise_mm", c.hand_eye.translation_noise_mm, "hand_eye");
    get(s, "rotation_noise_deg", c.hand_eye.rotation_noise_deg, "hand_eye");
    get_vec3(s, "workspace_center", c.hand_eye.workspace_center, "hand_eye");
    get(s, "workspace_half_extent", c.hand_eye.workspace_half_extent, "hand_eye");
    get(s, "max_tilt_deg", c.hand_eye.max_tilt_deg, "hand_eye");
  }
  if (j.contains("icp")) {
    const json& s = j["icp"];
    check_keys(s, {"max_iterations", "convergence_tol", "max_pair_distance", "prealign"}, "icp");
    get(s, "max_iterations", c.icp.max_iterations, "icp");
    get(s, "convergence_tol", c.icp.convergence_tol, "icp");
    get(s, "max_pair_distance", c.icp.max_pair_distance, "icp");
    get(s, "prealign", c.icp.prealign, "icp");
  }
  if (j.contains("change")) {
    const json& s = j["change"];
    check_keys(s, {"min_points", "leaf_size"}, "change");
    get(s, "min_points", c.change.min_points, "change");
    get(s, "leaf_size", c.change.leaf_size, "change");
  }
  if (j.contains("us_geometry")) {
    const json& s = j["us_geometry"];
    check_keys(s, {"s_x", "s_y", "t_x", "t_y", "width", "height"}, "us_geometry");
    get(s, "s_x", c.us_geometry.s_x, "us_geometry");
    get(s, "s_y", c.us_geometry.s_y, "us_geometry");
    get(s, "t_x", c.us_geometry.t_x, "us_geometry");
    get(s, "t_y", c.us_geometry.t_y, "us_geometry");
    get(s, "width", c.us_geometry.width, "us_geometry");
    get(s, "height", c.us_geometry.height, "us_geometry");
  }
  if (j.contains("us")) {
    const json& s = j["us"];
    check_keys(s, {"gain", "offset", "speckle", "attenuation", "fan_mask", "fan_half_angle_deg"},
               "us");
    get(s, "gain", c.us.gain, "us");
    get(s, "offset", c.us.offset, "us");
    get(s, "speckle", c.us.speckle, "us");
    get(s, "attenuation", c.us.attenuation, "us");
    get(s, "fan_mask", c.us.fan_mask, "us");
    get(s, "fan_half_angle_deg", c.us.fan_half_angle_deg, "us");
  }
  if (j.contains("stiffness")) {
    const json& s = j["stiffness"];
    check_keys(s, {"k_scan", "k_lateral", "damping", "f_desired", "f_abort", "mass"}, "stiffness");
    get(s, "k_scan", c.stiffness.k_scan, "stiffness");
    get(s, "k_lateral", c.stiffness.k_lateral, "stiffness");
    get(s, "damping", c.stiffness.damping, "stiffness");
    get(s, "f_desired", c.stiffness.f_desired, "stiffness");
    get(s, "f_abort", c.stiffness.f_abort, "stiffness");
    get(s, "mass", c.stiffness.mass, "stiffness");
  }
  if (j.contains("sweep")) {
    const json& s = j["sweep"];
    check_keys(s,
               {"rate_hz", "dt", "speed", "approach_height", "force_gain", "position_tolerance",
                "orientation_tolerance_deg", "settle_band", "segment_timeout"},
               "sweep");
    get(s, "rate_hz", c.sweep.rate_hz, "sweep");
    get(s, "dt", c.sweep.dt, "sweep");
    get(s, "speed", c.sweep.speed, "sweep");
    get(s, "approach_height", c.sweep.approach_height, "sweep");
    get(s, "force_gain", c.sweep.force_gain, "sweep");
    get(s, "position_tolerance", c.sweep.position_tolerance, "sweep");
    get(s, "orientation_tolerance_deg", c.sweep.orientation_tolerance_deg, "sweep");
    get(s, "settle_band", c.sweep.settle_band, "sweep");
    get(s, "segment_timeout", c.sweep.segment_timeout, "sweep");
  }
  if (j.contains("plans")) {
    if (!j["plans"].is_array()) config_error("'plans' must be an array");
    c.plans.clear();
    for (const auto& p : j["plans"]) {
      check_keys(p, {"start", "end", "spacing"}, "plan");
      TrajectoryPlan plan;
      if (!p.contains("start") || !p.contains("end")) config_error("a plan needs start and end");
      get_vec3(p, "start", plan.start, "plan");
      get_vec3(p, "end", plan.end, "plan");
      get(p, "spacing", plan.sample_spacing, "plan");
      c.plans.push_back(plan);
    }
  }
  if (j.contains("compounding")) {
    const json& s = j["compounding"];
    check_keys(s, {"spacing", "radius", "min_weight"}, "compounding");
    get(s, "spacing", c.compounding.spacing, "compounding");
    get(s, "radius", c.compounding.radius, "compounding");
    get(s, "min_weight", c.compounding.min_weight, "compounding");
  }
  if (j.contains("registration")) {
    const json& s = j["registration"];
    auto& r = c.registration;
    check_keys(s,
               {"patch_radius", "variance_floor", "min_overlap", "patch_stride", "coarse_spacing",
                "max_translation", "max_rotation_deg", "max_scale", "max_shear", "initial_step_mm",
                "initial_step_deg", "final_step_mm", "final_step_deg", "restarts",
                "max_evaluations"},
               "registration");
    get(s, "patch_radius", r.patch_radius, "registration");
    get(s, "variance_floor", r.variance_floor, "registration");
    get(s, "min_overlap", r.min_overlap, "registration");
    get(s, "patch_stride", r.patch_stride, "registration");
    get(s, "coarse_spacing", r.coarse_spacing, "registration");
    get(s, "max_translation", r.max_translation, "registration");
    get(s, "max_rotation_deg", r.max_rotation_deg, "registration");
    get(s, "max_scale", r.max_scale, "registration");
    get(s, "max_shear", r.max_shear, "registration");
    get(s, "initial_step_mm", r.initial_step_mm, "registration");
    get(s, "initial_step_deg", r.initial_step_deg, "registration");
    get(s, "final_step_mm", r.final_step_mm, "registration");
    get(s, "final_step_deg", r.final_step_deg, "registration");
    get(s, "restarts", r.restarts, "registration");
    get(s, "max_evaluations", r.max_evaluations, "registration");
  }
  if (j.contains("injected_error")) {
    const json& s = j["injected_error"];
    check_keys(s, {"translation_mm", "rotation_deg"}, "injected_error");
    get_range(s, "translation_mm", c.injected_translation_min, c.injected_translation_max,
              "injected_error");
    get_range(s, "rotation_deg", c.injected_rotation_min, c.injected_rotation_max,
              "injected_error");
  }
  if (j.contains("touch")) {
    const json& s = j["touch"];
    check_keys(s, {"targets", "seeds"}, "touch");
    get(s, "targets", c.touch_targets, "touch");
    get(s, "seeds", c.touch_seeds, "touch");
  }
  c.validate();
  return c;
}

PipelineConfig PipelineConfig::load(const fs::path& path) {
  if (!fs::is_regular_file(path)) config_error("config file not found: " + path.string());
  PipelineConfig c = parse(io::read_text(path), path.parent_path());
  c.source = path;
  return c;
}

void PipelineConfig::validate() const {
  auto check = [](auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      config_error(e.what());
    }
  };
  if (plans.empty()) config_error("at least one scan plan is required");
  check([&] { phantom.validate(); });
  check([&] { camera.validate(); });
  check([&] { us_geometry.validate(); });
  check([&] { us.validate(); });
  check([&] { stiffness.validate(); });
  check([&] { sweep.validate(); });
  check([&] { compounding.validate(); });
  check([&] { registration.validate(); });
  for (const auto& p : plans) check([&] { p.validate(); });
  if (!(skin_stiffness > 0.0)) config_error("skin_stiffness must be positive");
  if (closing_radius < 0) config_error("closing_radius must be >= 0");
  if (hand_eye.count < 3) config_error("hand-eye calibration needs at least 3 poses");
  if (hand_eye.translation_noise_mm < 0.0 || hand_eye.rotation_noise_deg < 0.0) {
    config_error("hand-eye noise must be >= 0");
  }
  if (icp.max_iterations < 1 || !(icp.max_pair_distance > 0.0)) {
    config_error("icp parameters out of range");
  }
  if (change.min_points < 1 || !(change.leaf_size > 0.0)) {
    config_error("change detection parameters out of range");
  }
  if (injected_translation_min < 0.0 || injected_translation_max < injected_translation_min ||
      injected_rotation_min < 0.0 || injected_rotation_max < injected_rotation_min) {
    config_error("injected error ranges must satisfy 0 <= min <= max");
  }
  if (touch_targets < 1 || touch_seeds < 1) config_error("touch targets and seeds must be >= 1");
  if (scene.table_half_x <= 0.0 || scene.table_half_y <= 0.0 || scene.tool_length <= 0.0) {
    config_error("scene extents must be positive");
  }
}

// --- scenario ------------------------------------------------------------------

std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage, std::uint64_t index) {
  // splitmix64 finalizer over a mixed key.
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + stage * 0xBF58476D1CE4E5B9ULL +
                    index * 0x94D049BB133111EBULL + 0x2545F4914F6CDD1DULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

Scenario make_scenario(const PipelineConfig& config) {
  const SceneConfig& sc = config.scene;
  Scenario s;
  s.phantom_to_world = RigidTransform(rot_z(deg2rad(sc.phantom_yaw_deg)), sc.phantom_position,
                                      FrameId::MRI, FrameId::World);
  s.camera_to_world = RigidTransform(look_at(sc.camera_position, sc.camera_target),
                                     sc.camera_position, FrameId::Camera, FrameId::World);
  s.marker_on_flange = RigidTransform(rot_x(deg2rad(sc.marker_tilt_deg)), sc.marker_offset,
                                      FrameId::Marker, FrameId::EndEffector);
  s.tool_to_end_effector = RigidTransform::translation({0.0, 0.0, sc.tool_length}, FrameId::Tool,
                                                       FrameId::EndEffector);
  Mat3 mount;
  mount << 0, 0, 1,  //
      1, 0, 0,       //
      0, 1, 0;
  s.image_mount = RigidTransform(mount, Vec3::Zero(), FrameId::Tool, FrameId::Tool);

  const double t = uniform_in(config.injected_translation_min, config.injected_translation_max,
                              stage_seed(config.seed, kSeedInjected, 0));
  const double r = uniform_in(config.injected_rotation_min, config.injected_rotation_max,
                              stage_seed(config.seed, kSeedInjected, 1));
  s.injected = random_perturbation(t, r, FrameId::MRI, stage_seed(config.seed, kSeedInjected, 2));

  Scene::Rectangle table;
  table.pose = RigidTransform::translation(
      {sc.phantom_position.x(), sc.phantom_position.y(), 0.0}, FrameId::World, FrameId::World);
  table.half_x = sc.table_half_x;
  table.half_y = sc.table_half_y;
  table.label = kTableLabel;
  s.background.rectangles.push_back(table);
  s.current = s.background;
  s.current.ellipsoids.push_back({s.phantom_to_world, config.phantom.torso_half_axes, kTorsoLabel});
  return s;
}

// --- stages --------------------------------------------------------------------

PhantomStage run_phantom_stage(const PipelineConfig& config) {
  return staged(Stage::Phantom, [&] {
    PhantomStage out;
    out.phantom = make_phantom(config.phantom, stage_seed(config.seed, kSeedPhantom));
    const BinaryMask mask =
        morph_close(threshold(out.phantom.mri, config.threshold), config.closing_radius);
    out.surface = extract_surface(mask);
    return out;
  });
}

CalibrationStage run_calibration_stage(const PipelineConfig& config, const Scenario& scenario,
                                       const SurfaceCloud& mri_surface) {
  return staged(Stage::Calibrate, [&] {
    CalibrationStage out;
    const auto pairs = simulate_pose_pairs(scenario.camera_to_world, scenario.marker_on_flange,
                                           config.hand_eye, stage_seed(config.seed, kSeedHandEye));
    out.hand_eye = hand_eye_calibrate(pairs);

    DepthCameraModel camera = config.camera;
    camera.pose = scenario.camera_to_world;
    out.background = render_depth(camera, scenario.background, stage_seed(config.seed, kSeedBackground));
    out.current = render_depth(camera, scenario.current, stage_seed(config.seed, kSeedCurrent));
    out.patient = detect_change(out.background, out.current, config.change);
    if (out.patient.size() < 3) {
      throw Error(ErrorCode::InsufficientData, "change detection left fewer than 3 patient points");
    }

    // Prior from the nominal table setup: yaw to a quarter turn, position to 50 mm.
    const SceneConfig& sc = config.scene;
    const double yaw = 90.0 * std::round(sc.phantom_yaw_deg / 90.0);
    const Vec3 pos = 50.0 * (sc.phantom_position / 50.0).array().round().matrix();
    const RigidTransform nominal(rot_z(deg2rad(yaw)), pos, FrameId::MRI, FrameId::World);

    IcpParams icp_params = config.icp;
    icp_params.initial = compose(invert(out.hand_eye.camera_to_world), nominal);
    out.icp = icp(mri_surface, out.patient, icp_params);

    const RigidTransform matched =
        config.chain_from_icp ? out.icp.transform
                              : compose(invert(scenario.camera_to_world), scenario.phantom_to_world);
    out.state = CalibrationState(scenario.tool_to_end_effector, config.us_geometry,
                                 scenario.image_mount, out.hand_eye.camera_to_world,
                                 compose(matched, scenario.injected));
    return out;
  });
}

SurfaceCloud planning_surface(const CalibrationState& state, const SurfaceCloud& mri_surface) {
  if (mri_surface.frame != FrameId::MRI) {
    throw Error(ErrorCode::FrameMismatch, "image surface must be in the MRI frame");
  }
  SurfaceCloud image = mri_surface;
  image.frame = FrameId::Patient;
  return transform_cloud(compose(invert(state.camera_to_world()), chain_patient_to_world(state)),
                         image);
}

std::vector<ScanPose> run_plan_stage(const PipelineConfig& config, const CalibrationState& state,
                                     const SurfaceCloud& mri_surface) {
  return staged(Stage::Plan, [&] {
    const std::size_t i =
        std::min(static_cast<std::size_t>(state.version()), config.plans.size() - 1);
    return plan_in_world(config.plans[i], state, planning_surface(state, mri_surface));
  });
}

SweepStage run_sweep_stage(const PipelineConfig& config, const Scenario& scenario,
                           const ScalarVolume& tissue, const CalibrationState& state,
                           std::span<const ScanPose> poses, int iteration) {
  return staged(Stage::Sweep, [&] {
    ContactModel contact;
    contact.add(std::make_shared<EllipsoidContact>(scenario.phantom_to_world,
                                                   config.phantom.torso_half_axes),
                config.skin_stiffness);
    contact.add(std::make_shared<PlaneContact>(Vec3::Zero(), Vec3::UnitZ()), config.skin_stiffness);

    SweepStage out;
    out.sweep = run_sweep(poses, config.stiffness, contact, config.sweep);
    if (out.sweep.aborted) {
      throw Error(ErrorCode::Aborted, "contact force exceeded the abort threshold at step " +
                                          std::to_string(out.sweep.abort_step));
    }
    // Imaging frames: on the scan path with acoustic coupling.
    std::vector<TrackedFrame> scan;
    for (const auto& f : out.sweep.frames) {
      if (f.segment >= 1 && f.contact_force >= 0.5 * config.stiffness.f_desired) scan.push_back(f);
    }
    if (scan.empty()) throw Error(ErrorCode::EmptyInput, "sweep produced no frames in contact");
    UsSimParams us = config.us;
    us.seed = stage_seed(config.seed, kSeedUltrasound, static_cast<std::uint64_t>(iteration));
    out.frames = acquire_sweep(scan, tissue, scenario.phantom_to_world, state, us);
    out.volume = compound(out.frames, config.compounding);
    return out;
  });
}

RegistrationStage run_registration_stage(const PipelineConfig& config, const Scenario& scenario,
                                         const ScalarVolume& mri, const CalibrationState& state,
                                         const CompoundResult& volume, bool with_affine) {
  return staged(Stage::Register, [&] {
    Lc2Params params = config.registration;
    params.seed = stage_seed(config.seed, kSeedRegistration, static_cast<std::uint64_t>(state.version()));
    RegistrationStage out;
    out.rigid = register_rigid(volume, mri, chain_patient_to_world(state), params,
                               scenario.phantom_to_world);
    if (with_affine) out.affine = register_affine(volume, mri, out.rigid, params, scenario.phantom_to_world);
    return out;
  });
}

// --- metrics -------------------------------------------------------------------

void Metrics::set(const std::string& key, double value) {
  for (auto& kv : values) {
    if (kv.first == key) {
      kv.second = value;
      return;
    }
  }
  values.emplace_back(key, value);
}

std::optional<double> Metrics::find(std::string_view key) const {
  for (const auto& kv : values) {
    if (kv.first == key) return kv.second;
  }
  return std::nullopt;
}

double Metrics::at(std::string_view key) const {
  const auto v = find(key);
  if (!v) throw Error(ErrorCode::Malformed, "metric '" + std::string(key) + "' is missing");
  return *v;
}

void write_metrics(const fs::path& path, const Metrics& metrics) {
  std::string text = "schema_version " + std::to_string(kSchemaVersion) + "\n";
  for (const auto& [k, v] : metrics.values) {
    if (k == "schema_version") continue;
    text += k + " " + format_value(v) + "\n";
  }
  io::write_text(path, text);
}

Metrics read_metrics(const fs::path& path) {
  std::istringstream is(io::read_text(path));
  Metrics m;
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key, rest;
    double value = 0.0;
    if (!(ls >> key >> value) || (ls >> rest)) {
      throw Error(ErrorCode::Malformed,
                  path.string() + ":" + std::to_string(line_no) + ": expected '<key> <number>'");
    }
    if (m.values.empty() && (key != "schema_version" || value != kSchemaVersion)) {
      throw Error(ErrorCode::Malformed, path.string() + ": missing or unsupported schema_version");
    }
    m.set(key, value);
  }
  if (m.values.empty()) throw Error(ErrorCode::Malformed, path.string() + ": empty metrics file");
  return m;
}

// --- pipeline ------------------------------------------------------------------

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void record_registration(Metrics& m, const std::string& prefix, const RegistrationResult& r) {
  m.set(prefix + "_translation_mm", r.rigid.translation().norm());
  m.set(prefix + "_rotation_deg", rotation_angle_norm(r.rigid));
  if (r.translation_error_mm) m.set(prefix + "_translation_error_mm", *r.translation_error_mm);
  if (r.rotation_error_deg) m.set(prefix + "_rotation_error_deg", *r.rotation_error_deg);
}

void record_affine(Metrics& m, const std::string& prefix, const RegistrationResult& r) {
  // Correction magnitude of the affine placement relative to the start.
  const AffineTransform delta = compose(invert(*r.affine), AffineTransform(r.initial));
  m.set(prefix + "_translation_mm", delta.translation().norm());
  m.set(prefix + "_rotation_deg", rotation_angle_norm(nearest_rotation(delta.linear())));
  if (r.translation_error_mm) m.set(prefix + "_translation_error_mm", *r.translation_error_mm);
  if (r.rotation_error_deg) m.set(prefix + "_rotation_error_deg", *r.rotation_error_deg);
  m.set(prefix + "_similarity_after", r.similarity_after);
}

double in_band_fraction(const SweepResult& sweep, const StiffnessParams& p) {
  int contact = 0, in_band = 0;
  for (const auto& f : sweep.frames) {
    if (f.segment < 1 || f.contact_force <= 0.0) continue;
    ++contact;
    if (std::abs(f.contact_force - p.f_desired) <= 1.0) ++in_band;
  }
  return contact > 0 ? static_cast<double>(in_band) / contact : 0.0;
}

}  // namespace

RunMetrics run_pipeline(const PipelineConfig& config, const Logger& log) {
  staged(Stage::Config, [&] {
    config.validate();
    ensure_dir(config.output_dir);
    return 0;
  });
  const fs::path& dir = config.output_dir;
  RunMetrics out;
  Metrics& m = out.metrics;
  Metrics& timing = out.timings;
  const auto total_t0 = Clock::now();

  m.set("schema_version", kSchemaVersion);
  m.set("seed", static_cast<double>(config.seed));

  auto t0 = Clock::now();
  say(log, "phantom: generating " + std::to_string(config.phantom.dims[0]) + "^3 volumes");
  const PhantomStage phantom = run_phantom_stage(config);
  timing.set("phantom_s", seconds_since(t0));
  staged(Stage::Phantom, [&] {
    if (config.write_volumes) {
      io::write_svol(dir / "mri.svol", phantom.phantom.mri);
      io::write_svol(dir / "tissue.svol", phantom.phantom.tissue);
    }
    io::write_cloud(dir / "mri_surface.xyz", phantom.surface);
    return 0;
  });

  const Scenario scenario = make_scenario(config);
  m.set("injected_translation_mm", scenario.injected.translation().norm());
  m.set("injected_rotation_deg", rotation_angle_norm(scenario.injected));

  t0 = Clock::now();
  say(log, "calibrate: hand-eye, depth rendering, change detection, surface matching");
  const CalibrationStage calib = run_calibration_stage(config, scenario, phantom.surface);
  timing.set("calibration_s", seconds_since(t0));
  m.set("handeye_rotation_residual_deg", calib.hand_eye.rotation_residual_deg);
  m.set("handeye_translation_residual_mm", calib.hand_eye.translation_residual_mm);
  m.set("icp_rms_mm", calib.icp.rms_error);
  const auto [icp_t, icp_r] = placement_error(compose(scenario.camera_to_world, calib.icp.transform),
                                              scenario.phantom_to_world);
  m.set("icp_translation_error_mm", icp_t);
  m.set("icp_rotation_error_deg", icp_r);
  m.set("patient_points", static_cast<double>(calib.patient.size()));
  staged(Stage::Calibrate, [&] {
    if (config.write_volumes) {
      io::write_cloud(dir / "background.xyz", calib.background);
      io::write_cloud(dir / "scene.xyz", calib.current);
      io::write_cloud(dir / "patient.xyz", calib.patient);
    }
    write_calibration(dir / "calibration_v0.txt", calib.state);
    return 0;
  });

  CalibrationState state = calib.state;
  for (int it = 1; it <= 2; ++it) {
    const std::string p = "iter" + std::to_string(it);
    const auto [chain_t, chain_r] = placement_error(chain_patient_to_world(state), scenario.phantom_to_world);
    m.set(p + "_chain_translation_error_mm", chain_t);
    m.set(p + "_chain_rotation_error_deg", chain_r);

    t0 = Clock::now();
    const auto poses = run_plan_stage(config, state, phantom.surface);
    staged(Stage::Plan, [&] {
      write_poses(iteration_file(dir, "poses", it, ".txt"), poses);
      return 0;
    });
    say(log, p + ": sweeping " + std::to_string(poses.size()) + " scan poses");
    const SweepStage sweep =
        run_sweep_stage(config, scenario, phantom.phantom.tissue, state, poses, it);
    timing.set(p + "_sweep_s", seconds_since(t0));
    m.set(p + "_scan_poses", static_cast<double>(poses.size()));
    m.set(p + "_sweep_duration_s", sweep.sweep.duration);
    m.set(p + "_sweep_frames", static_cast<double>(sweep.sweep.frames.size()));
    m.set(p + "_us_frames", static_cast<double>(sweep.frames.size()));
    m.set(p + "_force_in_band_fraction", in_band_fraction(sweep.sweep, config.stiffness));
    staged(Stage::Sweep, [&] {
      write_sweep(iteration_file(dir, "sweep", it, ".txt"), sweep.sweep, config.stiffness,
                  config.sweep);
      if (config.write_volumes) {
        io::write_svol(iteration_file(dir, "us", it, ".svol"), sweep.volume.volume);
        io::write_mask(iteration_file(dir, "us", it, "_mask.svol"), sweep.volume.mask);
      }
      return 0;
    });

    t0 = Clock::now();
    say(log, p + ": registering US to MRI");
    const bool with_affine = config.affine && it == 1;
    const RegistrationStage reg = run_registration_stage(config, scenario, phantom.phantom.mri,
                                                         state, sweep.volume, with_affine);
    timing.set(p + "_registration_s", seconds_since(t0));
    m.set(p + "_similarity_before", reg.rigid.similarity_before);
    m.set(p + "_similarity_after", reg.rigid.similarity_after);
    m.set(p + "_evaluations", reg.rigid.evaluations);
    record_registration(m, p + "_rigid", reg.rigid);
    if (reg.affine) record_affine(m, p + "_affine", *reg.affine);
    staged(Stage::Register, [&] {
      write_registration_report(iteration_file(dir, "registration", it, ".json"), reg.rigid);
      if (reg.affine) {
        write_registration_report(iteration_file(dir, "registration", it, "_affine.json"), *reg.affine);
      }
      return 0;
    });

    state = staged(Stage::Update, [&] {
      CalibrationState next = update_patient_calibration(state, reg.rigid);
      write_calibration(dir / ("calibration_v" + std::to_string(next.version()) + ".txt"), next);
      return next;
    });
    say(log, p + ": correction " + format_value(reg.rigid.rigid.translation().norm()) + " mm, " +
                 format_value(rotation_angle_norm(reg.rigid.rigid)) + " deg");
  }

  const auto [final_t, final_r] = placement_error(chain_patient_to_world(state), scenario.phantom_to_world);
  m.set("final_chain_translation_error_mm", final_t);
  m.set("final_chain_rotation_error_deg", final_r);
  m.set("calibration_version", state.version());
  timing.set("total_s", seconds_since(total_t0));

  staged(Stage::Update, [&] {
    write_calibration(dir / "calibration.txt", state);
    write_metrics(dir / "metrics.txt", m);
    write_metrics(dir / "timings.txt", timing);
    return 0;
  });
  return out;
}

// --- point-touch experiment ----------------------------------------------------

TouchStats run_touch_accuracy(const PipelineConfig& config, const Logger& log) {
  staged(Stage::Config, [&] {
    config.validate();
    return 0;
  });
  return staged(Stage::Touch, [&] {
    const Scenario scenario = make_scenario(config);
    const RigidTransform world_to_camera = invert(scenario.camera_to_world);
    DepthCameraModel camera = config.camera;
    camera.pose = scenario.camera_to_world;

    std::vector<double> xy, z;
    for (int s = 0; s < config.touch_seeds; ++s) {
      const std::uint64_t seed = stage_seed(config.seed, kSeedTouch, static_cast<std::uint64_t>(s));
      const auto pairs = simulate_pose_pairs(scenario.camera_to_world, scenario.marker_on_flange,
                                             config.hand_eye, stage_seed(seed, kSeedHandEye));
      const HandEyeResult he = hand_eye_calibrate(pairs);
      const DepthRender render = render_depth_labeled(camera, scenario.current, stage_seed(seed, kSeedCurrent));

      std::vector<std::size_t> candidates;
      for (std::size_t i = 0; i < render.labels.size(); ++i) {
        if (render.labels[i] == kTorsoLabel) candidates.push_back(i);
      }
      if (candidates.empty()) throw Error(ErrorCode::EmptyInput, "no target surface is visible");
      const std::size_t n = candidates.size();
      for (int k = 0; k < config.touch_targets; ++k) {
        const std::size_t idx = candidates[static_cast<std::size_t>(
            std::floor((k + 0.5) * static_cast<double>(n) / config.touch_targets))];
        // The robot reaches the commanded point exactly; the offset is the
        // error of the target as seen through the calibrated chain.
        const Vec3 commanded = he.camera_to_world.apply(render.cloud.points[idx]);
        const Vec3 truth = scenario.camera_to_world.apply(render.true_points[idx]);
        const Vec3 e = world_to_camera.apply_vector(commanded - truth);
        xy.push_back(std::hypot(e.x(), e.y()));
        z.push_back(std::abs(e.z()));
      }
      say(log, "touch: seed " + std::to_string(s) + " done");
    }
    TouchStats out;
    std::tie(out.xy_mean, out.xy_std) = mean_std(xy);
    std::tie(out.z_mean, out.z_std) = mean_std(z);
    out.samples = static_cast<int>(xy.size());
    return out;
  });
}

// --- report --------------------------------------------------------------------

Report make_report(std::span<const Metrics> runs) {
  return staged(Stage::Report, [&] {
    if (runs.empty()) throw Error(ErrorCode::EmptyInput, "report needs at least one metrics file");
    const std::vector<std::pair<std::string, std::string>> specs = {
        {"rigid scan #1", "iter1_rigid"},
        {"rigid scan #2", "iter2_rigid"},
        {"affine scan #1", "iter1_affine"},
    };

    Report rep;
    for (const auto& [name, key] : specs) {
      ReportRow row;
      row.name = name;
      row.key = key;
      std::vector<double> t, r;
      for (const auto& m : runs) {
        const auto tv = m.find(key + "_translation_mm");
        if (!tv) {
          if (key == "iter1_affine") continue;  // affine stage is optional
          throw Error(ErrorCode::Malformed, "metrics lack '" + key + "_translation_mm'");
        }
        t.push_back(*tv);
        r.push_back(m.at(key + "_rotation_deg"));
      }
      row.runs = static_cast<int>(t.size());
      if (row.runs > 0) {
        std::tie(row.translation_mean, row.translation_std) = mean_std(t);
        std::tie(row.rotation_mean, row.rotation_std) = mean_std(r);
      }
      rep.rows.push_back(row);
    }

    std::ostringstream text;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-16s %22s %22s %5s\n", "", "translation (mm)", "rotation (deg)", "runs");
    text << buf;
    json rows = json::array();
    for (const auto& row : rep.rows) {
      if (row.runs == 0) {
        std::snprintf(buf, sizeof buf, "%-16s %22s %22s %5d\n", row.name.c_str(), "n/a", "n/a", 0);
        text << buf;
        rows.push_back({{"name", row.name}, {"key", row.key}, {"runs", 0}});
        continue;
      }
      char tcol[64], rcol[64];
      std::snprintf(tcol, sizeof tcol, "%.2f +/- %.2f", row.translation_mean, row.translation_std);
      std::snprintf(rcol, sizeof rcol, "%.2f +/- %.2f", row.rotation_mean, row.rotation_std);
      std::snprintf(buf, sizeof buf, "%-16s %22s %22s %5d\n", row.name.c_str(), tcol, rcol, row.runs);
      text << buf;
      rows.push_back({{"name", row.name},
                      {"key", row.key},
                      {"runs", row.runs},
                      {"translation_mm", {{"mean", row.translation_mean}, {"std", row.translation_std}}},
                      {"rotation_deg", {{"mean", row.rotation_mean}, {"std", row.rotation_std}}}});
    }
    rep.text = text.str();
    rep.json = json{{"schema_version", kSchemaVersion},
                    {"runs", static_cast<int>(runs.size())},
                    {"rows", rows}}
                   .dump(2);
    return rep;
  });
}

// --- staged commands -------------------------------------------------------------

namespace {

struct Artifacts {
  const fs::path& dir;

  fs::path operator/(const std::string& name) const { return dir / name; }

  void require(const fs::path& p, Stage stage, const char* producer) const {
    if (!fs::exists(p)) {
      throw StageError(stage, ErrorCode::Io,
                       "missing " + p.string() + "; run '" + producer + "' first");
    }
  }
};

CalibrationState current_calibration(const Artifacts& a, Stage stage) {
  const fs::path p = a / "calibration.txt";
  a.require(p, stage, "calibrate");
  return staged(stage, [&] { return read_calibration(p); });
}

}  // namespace

void cmd_phantom(const PipelineConfig& config, const Logger& log) {
  staged(Stage::Config, [&] {
    config.validate();
    ensure_dir(config.output_dir);
    return 0;
  });
  const PhantomStage ph = run_phantom_stage(config);
  staged(Stage::Phantom, [&] {
    io::write_svol(config.output_dir / "mri.svol", ph.phantom.mri);
    io::write_svol(config.output_dir / "tissue.svol", ph.phantom.tissue);
    io::write_cloud(config.output_dir / "mri_surface.xyz", ph.surface);
    return 0;
  });
  say(log, "phantom: " + std::to_string(ph.surface.size()) + " surface points");
}

void cmd_calibrate(const PipelineConfig& config, const Logger& log) {
  const Artifacts a{config.output_dir};
  a.require(a / "mri_surface.xyz", Stage::Calibrate, "phantom");
  const SurfaceCloud surface = staged(Stage::Calibrate, [&] { return io::read_cloud(a / "mri_surface.xyz"); });
  const Scenario scenario = make_scenario(config);
  const CalibrationStage c = run_calibration_stage(config, scenario, surface);
  staged(Stage::Calibrate, [&] {
    io::write_cloud(a / "background.xyz", c.background);
    io::write_cloud(a / "scene.xyz", c.current);
    io::write_cloud(a / "patient.xyz", c.patient);
    write_calibration(a / "calibration_v0.txt", c.state);
    write_calibration(a / "calibration.txt", c.state);
    return 0;
  });
  say(log, "calibrate: hand-eye residual " + format_value(c.hand_eye.translation_residual_mm) +
               " mm, ICP rms " + format_value(c.icp.rms_error) + " mm");
}

void cmd_plan(const PipelineConfig& config, const Logger& log) {
  const Artifacts a{config.output_dir};
  const CalibrationState state = current_calibration(a, Stage::Plan);
  a.require(a / "mri_surface.xyz", Stage::Plan, "phantom");
  const SurfaceCloud surface = staged(Stage::Plan, [&] { return io::read_cloud(a / "mri_surface.xyz"); });
  const auto poses = run_plan_stage(config, state, surface);
  const int it = state.version() + 1;
  staged(Stage::Plan, [&] {
    write_poses(iteration_file(a.dir, "poses", it, ".txt"), poses);
    return 0;
  });
  say(log, "plan: " + std::to_string(poses.size()) + " scan poses for iteration " + std::to_string(it));
}

void cmd_sweep(const PipelineConfig& config, const Logger& log) {
  const Artifacts a{config.output_dir};
  const CalibrationState state = current_calibration(a, Stage::Sweep);
  const int it = state.version() + 1;
  const fs::path poses_file = iteration_file(a.dir, "poses", it, ".txt");
  a.require(poses_file, Stage::Sweep, "plan");
  a.require(a / "tissue.svol", Stage::Sweep, "phantom");
  const auto poses = staged(Stage::Sweep, [&] { return read_poses(poses_file); });
  const ScalarVolume tissue = staged(Stage::Sweep, [&] { return io::read_svol(a / "tissue.svol"); });
  const SweepStage s = run_sweep_stage(config, make_scenario(config), tissue, state, poses, it);
  staged(Stage::Sweep, [&] {
    write_sweep(iteration_file(a.dir, "sweep", it, ".txt"), s.sweep, config.stiffness, config.sweep);
    write_bundle(a / ("frames_" + std::to_string(it)), s.frames);
    io::write_svol(iteration_file(a.dir, "us", it, ".svol"), s.volume.volume);
    io::write_mask(iteration_file(a.dir, "us", it, "_mask.svol"), s.volume.mask);
    return 0;
  });
  say(log, "sweep: " + std::to_string(s.frames.size()) + " US frames, " +
               format_value(s.sweep.duration) + " s");
}

void cmd_register(const PipelineConfig& config, const Logger& log) {
  const Artifacts a{config.output_dir};
  const CalibrationState state = current_calibration(a, Stage::Register);
  const int it = state.version() + 1;
  const fs::path us_file = iteration_file(a.dir, "us", it, ".svol");
  const fs::path mask_file = iteration_file(a.dir, "us", it, "_mask.svol");
  a.require(us_file, Stage::Register, "sweep");
  a.require(mask_file, Stage::Register, "sweep");
  a.require(a / "mri.svol", Stage::Register, "phantom");
  CompoundResult us;
  ScalarVolume mri;
  staged(Stage::Register, [&] {
    us.volume = io::read_svol(us_file);
    us.mask = io::read_mask(mask_file);
    mri = io::read_svol(a / "mri.svol");
    return 0;
  });
  const bool with_affine = config.affine && it == 1;
  const RegistrationStage r =
      run_registration_stage(config, make_scenario(config), mri, state, us, with_affine);
  staged(Stage::Register, [&] {
    write_registration_report(iteration_file(a.dir, "registration", it, ".json"), r.rigid);
    if (r.affine) {
      write_registration_report(iteration_file(a.dir, "registration", it, "_affine.json"), *r.affine);
    }
    return 0;
  });
  say(log, "register: LC2 " + format_value(r.rigid.similarity_before) + " -> " +
               format_value(r.rigid.similarity_after));
}

void cmd_update(const PipelineConfig& config, const Logger& log) {
  const Artifacts a{config.output_dir};
  const CalibrationState state = current_calibration(a, Stage::Update);
  const int it = state.version() + 1;
  const fs::path report = iteration_file(a.dir, "registration", it, ".json");
  a.require(report, Stage::Update, "register");
  const CalibrationState next = staged(Stage::Update, [&] {
    const CalibrationState n = update_patient_calibration(state, read_registration_report(report));
    write_calibration(a / ("calibration_v" + std::to_string(n.version()) + ".txt"), n);
    write_calibration(a / "calibration.txt", n);
    return n;
  });
  say(log, "update: calibration version " + std::to_string(next.version()));
}

}  // namespace mrus
