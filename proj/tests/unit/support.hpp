#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "doctest.h"
#include "mrus/geom.hpp"

namespace mrus::test {

/// Random rigid motion from an independent generator: uniform unit
/// quaternion, translation uniform in [-t, t]^3.
inline RigidTransform random_rigid(std::mt19937_64& rng, double t = 100.0,
                                   FrameId from = FrameId::World, FrameId to = FrameId::World) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::uniform_real_distribution<double> u(-t, t);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return RigidTransform(q.toRotationMatrix(), Vec3(u(rng), u(rng), u(rng)), from, to);
}

inline Vec3 random_point(std::mt19937_64& rng, double extent = 100.0) {
  std::uniform_real_distribution<double> u(-extent, extent);
  return {u(rng), u(rng), u(rng)};
}

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("mrus_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

template <class F>
ErrorCode error_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an mrus::Error");
  return ErrorCode::InvalidArgument;
}

}  // namespace mrus::test
