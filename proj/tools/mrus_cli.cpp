// Command-line front end over the mrus C API.
#include <cstdio>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "mrus/mrus.h"

namespace {

// Process exit codes.
enum Exit : int {
  kOk = 0,
  kInternal = 1,
  kUsage = 2,
  kConfig = 3,
  kIo = 4,
  kPhantom = 10,
  kCalibrate = 11,
  kPlan = 12,
  kSweep = 13,
  kRegister = 14,
  kUpdate = 15,
  kTouch = 16,
  kReport = 17,
};

int exit_code(mrus_status status, mrus_stage stage, int fallback_stage_code) {
  if (status == MRUS_OK) return kOk;
  if (status == MRUS_ERR_INTERNAL) return kInternal;
  if (status == MRUS_ERR_CONFIG) return kConfig;
  switch (stage) {
    case MRUS_STAGE_CONFIG: return kConfig;
    case MRUS_STAGE_PHANTOM: return kPhantom;
    case MRUS_STAGE_CALIBRATE: return kCalibrate;
    case MRUS_STAGE_PLAN: return kPlan;
    case MRUS_STAGE_SWEEP: return kSweep;
    case MRUS_STAGE_REGISTER: return kRegister;
    case MRUS_STAGE_UPDATE: return kUpdate;
    case MRUS_STAGE_TOUCH: return kTouch;
    case MRUS_STAGE_REPORT: return kReport;
    case MRUS_STAGE_NONE: break;
  }
  if (fallback_stage_code != kOk) return fallback_stage_code;
  return status == MRUS_ERR_IO ? kIo : kInternal;
}

int fail(mrus_status status, int fallback_stage_code = kOk) {
  const mrus_stage stage = mrus_last_stage();
  std::fprintf(stderr, "mrus: error [%s%s%s]: %s\n", mrus_status_name(status),
               stage != MRUS_STAGE_NONE ? " in " : "",
               stage != MRUS_STAGE_NONE ? mrus_stage_name(stage) : "", mrus_last_error());
  return exit_code(status, stage, fallback_stage_code);
}

void log_line(const char* message, void*) { std::fprintf(stderr, "mrus: %s\n", message); }

struct Options {
  std::string config;
  unsigned long long seed = 0;
  bool seed_set = false;
  std::string out;
  bool verbose = false;
};

struct ConfigHandle {
  mrus_config* ptr = nullptr;
  ~ConfigHandle() { mrus_config_free(ptr); }
};

mrus_status load_config(const Options& o, ConfigHandle& h) {
  mrus_status s = mrus_config_load(o.config.empty() ? nullptr : o.config.c_str(), &h.ptr);
  if (s != MRUS_OK) return s;
  if (o.seed_set && (s = mrus_config_set_seed(h.ptr, o.seed)) != MRUS_OK) return s;
  if (!o.out.empty() && (s = mrus_config_set_output_dir(h.ptr, o.out.c_str())) != MRUS_OK) return s;
  return MRUS_OK;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Robotic ultrasound calibration simulator"};
  app.require_subcommand(1);
  app.fallthrough();
  Options o;
  app.add_option("--config", o.config, "pipeline config (JSON)");
  app.add_option("--seed", o.seed, "override the config seed")->each([&](const std::string&) {
    o.seed_set = true;
  });
  app.add_option("--out", o.out, "output directory");
  app.add_flag("--verbose", o.verbose, "progress messages on stderr");

  const std::vector<std::string> stages = {"phantom", "calibrate", "plan",
                                           "sweep",   "register",  "update"};
  for (const auto& s : stages) app.add_subcommand(s, "run the " + s + " stage on --out artifacts");
  CLI::App* pipeline = app.add_subcommand("pipeline", "full closed-loop run");
  CLI::App* touch = app.add_subcommand("touch-accuracy", "point-touch experiment");
  CLI::App* report = app.add_subcommand("report", "aggregate metrics files into the scan table");
  std::vector<std::string> metrics_files;
  std::string json_out;
  report->add_option("metrics", metrics_files, "metrics.txt files")->required();
  report->add_option("--json", json_out, "also write the table as JSON to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  mrus_log_fn log = o.verbose ? log_line : nullptr;

  if (report->parsed()) {
    std::vector<const char*> paths;
    for (const auto& f : metrics_files) paths.push_back(f.c_str());
    char* text = nullptr;
    char* json = nullptr;
    const mrus_status s = mrus_report(paths.data(), paths.size(), &text, &json);
    if (s != MRUS_OK) return fail(s, kReport);
    std::fputs(text, stdout);
    int rc = kOk;
    if (!json_out.empty()) {
      if (std::FILE* f = std::fopen(json_out.c_str(), "w")) {
        std::fputs(json, f);
        std::fputc('\n', f);
        std::fclose(f);
      } else {
        std::fprintf(stderr, "mrus: cannot write %s\n", json_out.c_str());
        rc = kIo;
      }
    }
    mrus_string_free(text);
    mrus_string_free(json);
    return rc;
  }

  ConfigHandle config;
  if (const mrus_status s = load_config(o, config); s != MRUS_OK) return fail(s);

  if (pipeline->parsed()) {
    mrus_metrics* metrics = nullptr;
    const mrus_status s = mrus_run_pipeline(config.ptr, log, nullptr, &metrics);
    if (s != MRUS_OK) return fail(s);
    double t1 = 0, r1 = 0, t2 = 0, r2 = 0;
    mrus_metrics_get(metrics, "iter1_rigid_translation_mm", &t1);
    mrus_metrics_get(metrics, "iter1_rigid_rotation_deg", &r1);
    mrus_metrics_get(metrics, "iter2_rigid_translation_mm", &t2);
    mrus_metrics_get(metrics, "iter2_rigid_rotation_deg", &r2);
    std::printf("rigid scan #1: %.3f mm %.3f deg\nrigid scan #2: %.3f mm %.3f deg\n", t1, r1, t2, r2);
    mrus_metrics_free(metrics);
    return kOk;
  }
  if (touch->parsed()) {
    mrus_touch_stats t{};
    const mrus_status s = mrus_touch_accuracy(config.ptr, log, nullptr, &t);
    if (s != MRUS_OK) return fail(s, kTouch);
    std::printf("touch accuracy over %d targets\nxy: %.3f +/- %.3f mm\nz:  %.3f +/- %.3f mm\n",
                t.samples, t.xy_mean, t.xy_std, t.z_mean, t.z_std);
    return kOk;
  }
  for (const auto& name : stages) {
    if (!app.got_subcommand(name)) continue;
    const mrus_status s = mrus_run_stage(config.ptr, name.c_str(), log, nullptr);
    if (s != MRUS_OK) return fail(s);
    return kOk;
  }
  return kUsage;
}
