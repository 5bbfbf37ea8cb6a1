#include "mrus/mrus.h"

#include <cstdlib>
#include <cstring>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "mrus/pipeline.hpp"

struct mrus_config {
  mrus::PipelineConfig config;
};

struct mrus_metrics {
  mrus::Metrics metrics;
};

namespace {

thread_local std::string g_last_error;
thread_local mrus_stage g_last_stage = MRUS_STAGE_NONE;

mrus_stage to_c(mrus::Stage s) { return static_cast<mrus_stage>(static_cast<int>(s)); }

mrus::Logger logger(mrus_log_fn fn, void* user) {
  if (!fn) return {};
  return [fn, user](std::string_view msg) { fn(std::string(msg).c_str(), user); };
}

// Runs f, translating exceptions into status codes and the thread-local error.
template <class F>
mrus_status guarded(F&& f) {
  g_last_error.clear();
  g_last_stage = MRUS_STAGE_NONE;
  try {
    f();
    return MRUS_OK;
  } catch (const mrus::StageError& e) {
    g_last_error = e.what();
    g_last_stage = to_c(e.stage());
    return static_cast<mrus_status>(static_cast<int>(e.code()));
  } catch (const mrus::Error& e) {
    g_last_error = e.what();
    return static_cast<mrus_status>(static_cast<int>(e.code()));
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
  } catch (const std::exception& e) {
    g_last_error = e.what();
  } catch (...) {
    g_last_error = "unknown exception";
  }
  return MRUS_ERR_INTERNAL;
}

void require(const void* p, const char* what) {
  if (!p) throw mrus::Error(mrus::ErrorCode::InvalidArgument, std::string(what) + " is NULL");
}

char* duplicate(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

}  // namespace

extern "C" {

const char* mrus_version(void) { return "0.1.0"; }

const char* mrus_status_name(mrus_status status) {
  if (status == MRUS_OK) return "ok";
  if (status == MRUS_ERR_INTERNAL) return "internal";
  if (status >= MRUS_ERR_INVALID_ARGUMENT && status <= MRUS_ERR_ABORTED) {
    return mrus::error_code_name(static_cast<mrus::ErrorCode>(static_cast<int>(status)));
  }
  return "unknown";
}

const char* mrus_stage_name(mrus_stage stage) {
  if (stage < MRUS_STAGE_NONE || stage > MRUS_STAGE_REPORT) return "unknown";
  return mrus::stage_name(static_cast<mrus::Stage>(static_cast<int>(stage)));
}

const char* mrus_last_error(void) { return g_last_error.c_str(); }

mrus_stage mrus_last_stage(void) { return g_last_stage; }

mrus_status mrus_config_load(const char* path, mrus_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    auto c = std::make_unique<mrus_config>();
    if (path) c->config = mrus::PipelineConfig::load(path);
    *out = c.release();
  });
}

mrus_status mrus_config_parse(const char* json_text, const char* base_dir, mrus_config** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    auto c = std::make_unique<mrus_config>();
    if (json_text) {
      c->config = mrus::PipelineConfig::parse(json_text, base_dir ? base_dir : ".");
    }
    *out = c.release();
  });
}

void mrus_config_free(mrus_config* config) { delete config; }

mrus_status mrus_config_set_seed(mrus_config* config, unsigned long long seed) {
  return guarded([&] {
    require(config, "config");
    config->config.seed = seed;
  });
}

mrus_status mrus_config_set_output_dir(mrus_config* config, const char* dir) {
  return guarded([&] {
    require(config, "config");
    require(dir, "dir");
    config->config.output_dir = dir;
  });
}

mrus_status mrus_config_set_write_volumes(mrus_config* config, int enabled) {
  return guarded([&] {
    require(config, "config");
    config->config.write_volumes = enabled != 0;
  });
}

mrus_status mrus_run_pipeline(const mrus_config* config, mrus_log_fn log, void* user,
                              mrus_metrics** out) {
  return guarded([&] {
    require(config, "config");
    if (out) *out = nullptr;
    mrus::RunMetrics m = mrus::run_pipeline(config->config, logger(log, user));
    if (out) *out = new mrus_metrics{std::move(m.metrics)};
  });
}

mrus_status mrus_run_stage(const mrus_config* config, const char* stage, mrus_log_fn log,
                           void* user) {
  return guarded([&] {
    require(config, "config");
    require(stage, "stage");
    const std::string s = stage;
    const auto& c = config->config;
    const mrus::Logger l = logger(log, user);
    if (s == "phantom") mrus::cmd_phantom(c, l);
    else if (s == "calibrate") mrus::cmd_calibrate(c, l);
    else if (s == "plan") mrus::cmd_plan(c, l);
    else if (s == "sweep") mrus::cmd_sweep(c, l);
    else if (s == "register") mrus::cmd_register(c, l);
    else if (s == "update") mrus::cmd_update(c, l);
    else throw mrus::Error(mrus::ErrorCode::InvalidArgument, "unknown stage '" + s + "'");
  });
}

mrus_status mrus_touch_accuracy(const mrus_config* config, mrus_log_fn log, void* user,
                                mrus_touch_stats* out) {
  return guarded([&] {
    require(config, "config");
    require(out, "out");
    const mrus::TouchStats t = mrus::run_touch_accuracy(config->config, logger(log, user));
    *out = {t.xy_mean, t.xy_std, t.z_mean, t.z_std, t.samples};
  });
}

mrus_status mrus_metrics_read(const char* path, mrus_metrics** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = nullptr;
    *out = new mrus_metrics{mrus::read_metrics(path)};
  });
}

void mrus_metrics_free(mrus_metrics* metrics) { delete metrics; }

size_t mrus_metrics_count(const mrus_metrics* metrics) {
  return metrics ? metrics->metrics.values.size() : 0;
}

const char* mrus_metrics_key(const mrus_metrics* metrics, size_t i) {
  if (!metrics || i >= metrics->metrics.values.size()) return nullptr;
  return metrics->metrics.values[i].first.c_str();
}

mrus_status mrus_metrics_get(const mrus_metrics* metrics, const char* key, double* out) {
  return guarded([&] {
    require(metrics, "metrics");
    require(key, "key");
    require(out, "out");
    *out = metrics->metrics.at(key);
  });
}

mrus_status mrus_report(const char* const* paths, size_t count, char** text, char** json) {
  return guarded([&] {
    require(text, "text");
    require(json, "json");
    *text = nullptr;
    *json = nullptr;
    if (count > 0) require(paths, "paths");
    std::vector<mrus::Metrics> runs;
    for (size_t i = 0; i < count; ++i) {
      require(paths[i], "path");
      runs.push_back(mrus::read_metrics(paths[i]));
    }
    const mrus::Report r = mrus::make_report(runs);
    char* t = duplicate(r.text);
    char* j = nullptr;
    try {
      j = duplicate(r.json);
    } catch (...) {
      std::free(t);
      throw;
    }
    *text = t;
    *json = j;
  });
}

void mrus_string_free(char* s) { std::free(s); }

}  // extern "C"
