#include <cmath>
#include <fstream>
#include <sstream>

#include "mrus/pipeline.hpp"
#include "support.hpp"

using namespace mrus;
namespace fs = std::filesystem;

namespace {

const fs::path kConfigs = MRUS_CONFIG_DIR;

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

// Noise-free camera and chain, rigid stage only.
PipelineConfig quiet_config(const fs::path& out) {
  PipelineConfig c = PipelineConfig::parse(R"({
    "injected_error": {"translation_mm": 0, "rotation_deg": 0},
    "camera": {"noise_xy_sigma": 0, "noise_z_sigma": 0},
    "affine": false, "write_volumes": false})", out);
  c.output_dir = out;
  return c;
}

Metrics scan_metrics(double t1, double r1, double t2, double r2) {
  Metrics m;
  m.set("schema_version", 1);
  m.set("iter1_rigid_translation_mm", t1);
  m.set("iter1_rigid_rotation_deg", r1);
  m.set("iter2_rigid_translation_mm", t2);
  m.set("iter2_rigid_rotation_deg", r2);
  return m;
}

StageError stage_error_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const StageError& e) {
    return e;
  }
  FAIL("expected a StageError");
  return StageError(Stage::None, ErrorCode::InvalidArgument, "");
}

}  // namespace

TEST_CASE("shipped configs load") {
  const PipelineConfig d = PipelineConfig::load(kConfigs / "default.json");
  CHECK(d.phantom_file == kConfigs / "phantom.json");
  CHECK(d.phantom.inclusions.size() == PhantomSpec::default_spec().inclusions.size());
  CHECK(d.output_dir == kConfigs / "out");
  CHECK(d.affine);
  const PipelineConfig a = PipelineConfig::load(kConfigs / "acceptance.json");
  CHECK(!a.affine);
  CHECK(!a.write_volumes);
  CHECK(a.injected_translation_min == 3.0);
  CHECK(a.injected_rotation_max == 6.0);
}

TEST_CASE("config errors are reported before any work") {
  const auto dir = test::scratch_dir("config");
  CHECK(test::error_of([&] { (void)PipelineConfig::parse(R"({"phantom": "nope.json"})", dir); }) ==
        ErrorCode::Config);
  CHECK(test::error_of([&] { (void)PipelineConfig::parse("{", dir); }) == ErrorCode::Config);
  CHECK(test::error_of([&] { (void)PipelineConfig::parse(R"({"sede": 3})", dir); }) == ErrorCode::Config);
  CHECK(test::error_of([&] { (void)PipelineConfig::parse(R"({"seed": "x"})", dir); }) == ErrorCode::Config);
  CHECK(test::error_of([&] {
          (void)PipelineConfig::parse(R"({"stiffness": {"f_desired": 30}})", dir);
        }) == ErrorCode::Config);
  CHECK(test::error_of([&] {
          (void)PipelineConfig::parse(R"({"injected_error": {"translation_mm": [6, 3]}})", dir);
        }) == ErrorCode::Config);
  CHECK(test::error_of([&] { (void)PipelineConfig::load(dir / "missing.json"); }) == ErrorCode::Config);
  CHECK(fs::is_empty(dir));
  spit(dir / "bad_phantom.json", R"({"dims": [96, 96, 96], "colour": 3})");
  CHECK(test::error_of([&] { (void)PipelineConfig::parse(R"({"phantom": "bad_phantom.json"})", dir); }) ==
        ErrorCode::Config);

  // Invalid values set after parsing are caught by the first stage.
  PipelineConfig c = quiet_config(dir / "out");
  c.plans.clear();
  const StageError e = stage_error_of([&] { (void)run_pipeline(c); });
  CHECK(e.code() == ErrorCode::Config);
  CHECK(e.stage() == Stage::Config);
  CHECK(!fs::exists(dir / "out"));
}

TEST_CASE("scenario is fixed by the seed") {
  PipelineConfig c;
  const Scenario a = make_scenario(c), b = make_scenario(c);
  CHECK(a.injected.matrix() == b.injected.matrix());
  const double t = a.injected.translation().norm(), r = rotation_angle_norm(a.injected);
  CHECK(t >= 3.0 - 1e-9);
  CHECK(t <= 6.0 + 1e-9);
  CHECK(r >= 3.0 - 1e-6);
  CHECK(r <= 6.0 + 1e-6);
  c.seed = 2;
  CHECK(make_scenario(c).injected.matrix() != a.injected.matrix());
  CHECK(stage_seed(1, 2, 3) != stage_seed(1, 3, 2));
  CHECK(stage_seed(1, 2, 3) == stage_seed(1, 2, 3));
}

TEST_CASE("metrics files round trip exactly") {
  const auto dir = test::scratch_dir("metrics");
  Metrics m;
  m.set("schema_version", 1);
  m.set("a", 0.1);
  m.set("b", -1.0 / 3.0);
  m.set("c", 1e-300);
  m.set("a", 0.2);  // overwrite keeps the position
  write_metrics(dir / "m.txt", m);
  const Metrics back = read_metrics(dir / "m.txt");
  REQUIRE(back.values.size() == 4);
  CHECK(back.values[1].first == "a");
  CHECK(back.at("a") == 0.2);
  CHECK(back.at("b") == -1.0 / 3.0);
  CHECK(back.at("c") == 1e-300);
  CHECK(test::error_of([&] { (void)back.at("zzz"); }) == ErrorCode::Malformed);

  spit(dir / "bad.txt", "schema_version 1\nkey 1 2\n");
  CHECK(test::error_of([&] { (void)read_metrics(dir / "bad.txt"); }) == ErrorCode::Malformed);
  spit(dir / "noschema.txt", "key 1\n");
  CHECK(test::error_of([&] { (void)read_metrics(dir / "noschema.txt"); }) == ErrorCode::Malformed);
  spit(dir / "empty.txt", "");
  CHECK(test::error_of([&] { (void)read_metrics(dir / "empty.txt"); }) == ErrorCode::Malformed);
  CHECK(test::error_of([&] { (void)read_metrics(dir / "none.txt"); }) == ErrorCode::Io);
}

TEST_CASE("report of a single run") {
  const std::vector<Metrics> runs{scan_metrics(1.25, 2.5, 0.5, 0.75)};
  const Report r = make_report(runs);
  REQUIRE(r.rows.size() == 3);
  CHECK(r.rows[0].runs == 1);
  CHECK(r.rows[0].translation_mean == 1.25);
  CHECK(r.rows[0].translation_std == 0.0);
  CHECK(r.rows[1].rotation_mean == 0.75);
  CHECK(r.rows[2].runs == 0);  // no affine stage
  CHECK(r.text.find("1.25 +/- 0.00") != std::string::npos);
  CHECK(r.text.find("n/a") != std::string::npos);
  CHECK(r.json.find("\"runs\": 1") != std::string::npos);
}

TEST_CASE("report statistics over five runs") {
  std::vector<Metrics> runs;
  const double t1[] = {2.0, 4.0, 4.0, 5.0, 10.0};
  for (int i = 0; i < 5; ++i) {
    runs.push_back(scan_metrics(t1[i], 1.0 + i, 0.3, 0.1 * i));
    runs.back().set("iter1_affine_translation_mm", 1.0);
    runs.back().set("iter1_affine_rotation_deg", 1.0);
  }
  const Report r = make_report(runs);
  // AVERAGE and STDEV.S of {2, 4, 4, 5, 10}: 5 and sqrt(9).
  CHECK(r.rows[0].translation_mean == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(r.rows[0].translation_std == doctest::Approx(3.0).epsilon(1e-12));
  // {1, 2, 3, 4, 5}: 3 and sqrt(2.5).
  CHECK(r.rows[0].rotation_mean == doctest::Approx(3.0).epsilon(1e-12));
  CHECK(r.rows[0].rotation_std == doctest::Approx(1.5811388300841898).epsilon(1e-12));
  CHECK(r.rows[1].translation_std == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(r.rows[1].rotation_std == doctest::Approx(0.15811388300841898).epsilon(1e-12));
  CHECK(r.rows[2].runs == 5);
  CHECK(r.text.find("5.00 +/- 3.00") != std::string::npos);

  CHECK(test::error_of([&] { (void)make_report(std::span<const Metrics>()); }) == ErrorCode::EmptyInput);
  std::vector<Metrics> broken{Metrics{}};
  CHECK(test::error_of([&] { (void)make_report(broken); }) == ErrorCode::Malformed);
}

TEST_CASE("touch accuracy without sensor noise is exact") {
  PipelineConfig c = quiet_config(test::scratch_dir("touch"));
  c.touch_seeds = 2;
  const TouchStats t = run_touch_accuracy(c);
  CHECK(t.samples == 2 * c.touch_targets);
  CHECK(t.xy_mean < 0.1);
  CHECK(t.z_mean < 0.1);
}

TEST_CASE("closed loop without injected error barely moves") {
  const auto dir = test::scratch_dir("loop_zero");
  PipelineConfig c = quiet_config(dir / "a");
  c.phantom.noise_amplitude = 0.0;
  const RunMetrics a = run_pipeline(c);
  CHECK(a.metrics.at("injected_translation_mm") == 0.0);
  // The default 2 mm compounding kernel smooths the slab edges, leaving ~0.24 mm.
  CHECK(a.metrics.at("iter1_rigid_translation_mm") < 0.3);
  CHECK(a.metrics.at("iter1_rigid_rotation_deg") < 1.0);
  CHECK(a.metrics.at("calibration_version") == 2.0);
  for (const char* f : {"metrics.txt", "timings.txt", "calibration.txt", "calibration_v2.txt", "sweep_1.txt",
                        "poses_2.txt", "registration_1.json", "mri_surface.xyz"})
    CHECK(fs::exists(dir / "a" / f));
  CHECK(!fs::exists(dir / "a" / "mri.svol"));
  CHECK(read_metrics(dir / "a" / "metrics.txt").values.size() == a.metrics.values.size());

  // Same config and seed: identical metrics file.
  PipelineConfig c2 = c;
  c2.output_dir = dir / "b";
  (void)run_pipeline(c2);
  CHECK(slurp(dir / "a" / "metrics.txt") == slurp(dir / "b" / "metrics.txt"));

  // A 1 mm kernel approaches the unsmoothed system.
  PipelineConfig sharp = c;
  sharp.output_dir = dir / "sharp";
  sharp.compounding.radius = 1.0;
  CHECK(run_pipeline(sharp).metrics.at("iter1_rigid_translation_mm") < 0.2);
}

TEST_CASE("closed loop corrects a 4.5 mm chain error") {
  PipelineConfig c;
  c.output_dir = test::scratch_dir("loop_injected");
  c.affine = false;
  c.write_volumes = false;
  c.injected_translation_min = c.injected_translation_max = 4.5;
  c.injected_rotation_min = c.injected_rotation_max = 4.5;
  const RunMetrics m = run_pipeline(c);
  CHECK(m.metrics.at("injected_translation_mm") == doctest::Approx(4.5));
  CHECK(m.metrics.at("iter1_chain_translation_error_mm") > 3.0);
  CHECK(m.metrics.at("iter1_rigid_translation_error_mm") <= 1.0);
  CHECK(m.metrics.at("iter1_rigid_rotation_error_deg") <= 1.0);
  CHECK(m.metrics.at("iter2_rigid_translation_mm") < 1.5);
  CHECK(m.metrics.at("iter2_rigid_rotation_deg") < 1.5);
  CHECK(m.metrics.at("iter1_force_in_band_fraction") >= 0.99);
}

TEST_CASE("staged commands need their inputs") {
  const auto dir = test::scratch_dir("stages_missing");
  const PipelineConfig c = quiet_config(dir);
  const StageError e = stage_error_of([&] { cmd_calibrate(c); });
  CHECK(e.stage() == Stage::Calibrate);
  CHECK(e.code() == ErrorCode::Io);
  CHECK(std::string(e.what()).find("phantom") != std::string::npos);
  CHECK(stage_error_of([&] { cmd_register(c); }).stage() == Stage::Register);
}

TEST_CASE("staged commands chain through the output directory") {
  const auto dir = test::scratch_dir("stages");
  PipelineConfig c = quiet_config(dir);
  c.injected_translation_min = c.injected_translation_max = 4.5;
  c.injected_rotation_min = c.injected_rotation_max = 4.5;
  cmd_phantom(c);
  cmd_calibrate(c);
  cmd_plan(c);
  cmd_sweep(c);
  cmd_register(c);
  const CalibrationState before = read_calibration(dir / "calibration.txt");
  cmd_update(c);
  const CalibrationState after = read_calibration(dir / "calibration.txt");
  CHECK(after.version() == before.version() + 1);
  const Scenario s = make_scenario(c);
  const auto err = [&](const CalibrationState& st) {
    const RigidTransform e = compose(invert(s.phantom_to_world.relabeled(FrameId::Patient, FrameId::World)),
                                     chain_patient_to_world(st));
    return e.translation().norm();
  };
  CHECK(err(before) > 3.0);
  CHECK(err(after) < 1.0);
}
