#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mrus/acquire.hpp"
#include "mrus/calib.hpp"
#include "mrus/compound.hpp"
#include "mrus/register.hpp"
#include "mrus/robotsim.hpp"
#include "mrus/sensor.hpp"
#include "mrus/surfmatch.hpp"
#include "mrus/trajectory.hpp"
#include "mrus/volume.hpp"

namespace mrus {

enum class Stage { None, Config, Phantom, Calibrate, Plan, Sweep, Register, Update, Touch, Report };

const char* stage_name(Stage stage);

/// An Error annotated with the workflow stage that raised it.
class StageError : public Error {
 public:
  StageError(Stage stage, ErrorCode code, const std::string& message)
      : Error(code, std::string(stage_name(stage)) + ": " + message), stage_(stage) {}
  Stage stage() const noexcept { return stage_; }

 private:
  Stage stage_;
};

using Logger = std::function<void(std::string_view)>;

/// Physical layout of the simulated setup (World frame, mm).
struct SceneConfig {
  Vec3 phantom_position{500.0, 0.0, 36.0};  // torso centre
  double phantom_yaw_deg = 20.0;
  Vec3 camera_position{500.0, -700.0, 1850.0};
  Vec3 camera_target{500.0, 0.0, 36.0};
  double table_half_x = 400.0;
  double table_half_y = 300.0;
  Vec3 marker_offset{0.0, 0.0, 60.0};  // on the flange
  double marker_tilt_deg = 20.0;
  double tool_length = 150.0;          // flange to probe tip along flange z
};

struct PipelineConfig {
  std::filesystem::path source;        // config file, when loaded from disk
  std::filesystem::path phantom_file;  // resolved path
  PhantomSpec phantom = PhantomSpec::default_spec();
  std::uint64_t seed = 1;
  double threshold = 100.0;
  int closing_radius = 2;
  SceneConfig scene;
  DepthCameraModel camera;
  PoseSimulation hand_eye;
  IcpParams icp;
  ChangeDetectionParams change{5, 30.0};
  /// When false the chain starts from the true camera-to-image transform and
  /// the injected error alone misplaces the image; the surface match is still
  /// run and reported. When true the surface match result is used.
  bool chain_from_icp = false;
  UsImageGeometry us_geometry;
  UsSimParams us;
  StiffnessParams stiffness;
  SweepOptions sweep;
  double skin_stiffness = 5000.0;
  /// Scan lines in image coordinates; iteration i uses plans[min(i, n) - 1].
  std::vector<TrajectoryPlan> plans{{{-25.0, 0.0, 36.0}, {25.0, 0.0, 36.0}, 20.0},
                                    {{-25.0, 8.0, 36.0}, {25.0, 8.0, 36.0}, 20.0}};
  CompoundingParams compounding;
  Lc2Params registration;
  bool affine = true;
  double injected_translation_min = 3.0, injected_translation_max = 6.0;
  double injected_rotation_min = 3.0, injected_rotation_max = 6.0;
  int touch_targets = 20;
  int touch_seeds = 10;
  std::filesystem::path output_dir = "out";
  bool write_volumes = true;  // volumes and point clouds next to the metrics

  /// Parses a JSON config; relative paths resolve against `base_dir`.
  /// Throws Config on missing files, unknown keys or invalid values.
  static PipelineConfig parse(const std::string& json_text, const std::filesystem::path& base_dir);
  static PipelineConfig load(const std::filesystem::path& path);
  void validate() const;
};

/// Ground truth of one simulated run, fixed by the config and seed.
struct Scenario {
  RigidTransform phantom_to_world;   // MRI -> World
  RigidTransform camera_to_world;    // true camera pose
  RigidTransform marker_on_flange;   // Marker -> EndEffector
  RigidTransform tool_to_end_effector;
  RigidTransform image_mount;        // Tool -> Tool
  RigidTransform injected;           // MRI -> MRI chain error
  Scene background;                  // table only
  Scene current;                     // table and patient
};

Scenario make_scenario(const PipelineConfig& config);

/// Deterministic per-stage seed.
std::uint64_t stage_seed(std::uint64_t seed, std::uint64_t stage, std::uint64_t index = 0);

struct PhantomStage {
  Phantom phantom;
  SurfaceCloud surface;  // MRI frame
};
PhantomStage run_phantom_stage(const PipelineConfig& config);

struct CalibrationStage {
  CalibrationState state;
  HandEyeResult hand_eye;
  IcpResult icp;
  PointCloud background;
  PointCloud current;
  PointCloud patient;  // change-detected, Camera frame
};
CalibrationStage run_calibration_stage(const PipelineConfig& config, const Scenario& scenario,
                                       const SurfaceCloud& mri_surface);

/// The image surface placed by the current chain, expressed in the Camera frame.
SurfaceCloud planning_surface(const CalibrationState& state, const SurfaceCloud& mri_surface);

std::vector<ScanPose> run_plan_stage(const PipelineConfig& config, const CalibrationState& state,
                                     const SurfaceCloud& mri_surface);

struct SweepStage {
  SweepResult sweep;
  std::vector<UsFrame> frames;  // frames with acoustic contact
  CompoundResult volume;
};
SweepStage run_sweep_stage(const PipelineConfig& config, const Scenario& scenario,
                           const ScalarVolume& tissue, const CalibrationState& state,
                           std::span<const ScanPose> poses, int iteration);

struct RegistrationStage {
  RegistrationResult rigid;
  std::optional<RegistrationResult> affine;
};
RegistrationStage run_registration_stage(const PipelineConfig& config, const Scenario& scenario,
                                         const ScalarVolume& mri, const CalibrationState& state,
                                         const CompoundResult& volume, bool with_affine);

/// Ordered flat key-value metrics.
struct Metrics {
  std::vector<std::pair<std::string, double>> values;

  void set(const std::string& key, double value);
  std::optional<double> find(std::string_view key) const;
  double at(std::string_view key) const;  // throws Malformed when missing
};

struct RunMetrics {
  Metrics metrics;  // deterministic per config and seed
  Metrics timings;  // wall-clock seconds, hardware dependent
};

/// Full closed loop: phantom, calibration, sweep, registration, update,
/// second sweep and registration. Writes artifacts and metrics.txt /
/// timings.txt into config.output_dir.
RunMetrics run_pipeline(const PipelineConfig& config, const Logger& log = {});

struct TouchStats {
  double xy_mean = 0.0, xy_std = 0.0;
  double z_mean = 0.0, z_std = 0.0;
  int samples = 0;
};

/// Point-touch experiment: targets picked from the noisy depth cloud are
/// touched through the hand-eye chain; errors split into the camera x-y
/// plane and the viewing axis.
TouchStats run_touch_accuracy(const PipelineConfig& config, const Logger& log = {});

void write_metrics(const std::filesystem::path& path, const Metrics& metrics);
Metrics read_metrics(const std::filesystem::path& path);

struct ReportRow {
  std::string name;
  std::string key;  // metrics prefix
  int runs = 0;
  double translation_mean = 0.0, translation_std = 0.0;
  double rotation_mean = 0.0, rotation_std = 0.0;
};

struct Report {
  std::vector<ReportRow> rows;
  std::string text;
  std::string json;
};

/// Table rows for rigid scan #1, rigid scan #2 and affine scan #1 with
/// mean ± sample standard deviation over runs.
Report make_report(std::span<const Metrics> runs);

/// Staged commands working on artifacts in config.output_dir.
void cmd_phantom(const PipelineConfig& config, const Logger& log = {});
void cmd_calibrate(const PipelineConfig& config, const Logger& log = {});
void cmd_plan(const PipelineConfig& config, const Logger& log = {});
void cmd_sweep(const PipelineConfig& config, const Logger& log = {});
void cmd_register(const PipelineConfig& config, const Logger& log = {});
void cmd_update(const PipelineConfig& config, const Logger& log = {});

}  // namespace mrus
