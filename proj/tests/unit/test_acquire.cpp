#include <cmath>
#include <random>

#include "mrus/acquire.hpp"
#include "support.hpp"

using namespace mrus;

namespace {

GridGeometry cube_grid() {
  GridGeometry g;
  g.dims = {81, 81, 81};
  g.origin = Vec3::Constant(-40.0);
  g.frame = FrameId::MRI;
  return g;
}

const RigidTransform kPlaced = RigidTransform::identity(FrameId::MRI, FrameId::World);

// Image depth runs along the tool z axis.
CalibrationState probe_state() {
  UsImageGeometry g;
  g.s_x = 0.5;
  g.s_y = 0.5;
  g.t_x = -40.0;
  g.t_y = 0.0;
  g.width = 80;
  g.height = 100;
  return CalibrationState(RigidTransform::identity(FrameId::Tool, FrameId::EndEffector), g,
                          RigidTransform(rot_x(M_PI / 2), Vec3::Zero(), FrameId::Tool, FrameId::Tool),
                          RigidTransform::identity(FrameId::Camera, FrameId::World),
                          RigidTransform::identity(FrameId::MRI, FrameId::Camera));
}

// Probe tip at `tip`, looking down -z.
RigidTransform looking_down(const Vec3& tip) {
  Mat3 r;
  r.col(0) = Vec3::UnitX();
  r.col(1) = Vec3(0, -1, 0);
  r.col(2) = Vec3(0, 0, -1);
  return RigidTransform(r, tip, FrameId::Tool, FrameId::World);
}

ScalarVolume sphere_tissue(double radius) {
  ScalarVolume v(cube_grid());
  const auto& g = v.geometry();
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) v.at(i, j, k) = g.position(i, j, k).norm() <= radius ? 100.0f : 0.0f;
  return v;
}

ScalarVolume smooth_tissue() {
  ScalarVolume v(cube_grid());
  const auto& g = v.geometry();
  for (int k = 0; k < g.dims[2]; ++k)
    for (int j = 0; j < g.dims[1]; ++j)
      for (int i = 0; i < g.dims[0]; ++i) {
        const Vec3 p = g.position(i, j, k);
        v.at(i, j, k) = static_cast<float>(100.0 + 30.0 * std::sin(0.11 * p.x()) * std::cos(0.07 * p.z()) + 0.5 * p.y());
      }
  return v;
}

}  // namespace

TEST_CASE("uniform tissue gives a uniform frame") {
  const ScalarVolume tissue(cube_grid(), 77.0f);
  const UsFrame f = acquire_frame(tissue, kPlaced, looking_down(Vec3(0, 0, 30)), probe_state(), {});
  REQUIRE(f.image.size() == 80u * 100u);
  for (float x : f.image) CHECK(x == doctest::Approx(77.0).epsilon(1e-6));
}

TEST_CASE("sphere cross-section matches the analytic chord") {
  const double radius = 15.0, offset = 5.0;
  const ScalarVolume tissue = sphere_tissue(radius);
  const UsFrame f = acquire_frame(tissue, kPlaced, looking_down(Vec3(0, offset, 30)), probe_state(), {});
  // Row 60 is 30 mm deep: the plane through the sphere centre height.
  const int row = 60;
  REQUIRE(std::abs(f.pixel_position(40, row).z()) < 1e-9);
  int first = -1, last = -1;
  for (int u = 0; u < f.geometry.width; ++u) {
    if (f.at(u, row) >= 50.0f) {
      if (first < 0) first = u;
      last = u;
    }
  }
  REQUIRE(first >= 0);
  const double half = std::sqrt(radius * radius - offset * offset) / f.geometry.s_x;  // px
  const double centre = 40.0;
  CHECK(std::abs((centre - first) - half) <= 1.0);
  CHECK(std::abs((last - centre) - half) <= 1.0);
}

TEST_CASE("without speckle a frame is a trilinear resample") {
  const ScalarVolume tissue = smooth_tissue();
  const RigidTransform pose(rot_y(0.3) * looking_down(Vec3::Zero()).rotation(), Vec3(3, -4, 28),
                            FrameId::Tool, FrameId::World);
  const UsFrame f = acquire_frame(tissue, kPlaced, pose, probe_state(), {});
  for (int v = 0; v < f.geometry.height; ++v)
    for (int u = 0; u < f.geometry.width; ++u)
      REQUIRE(f.at(u, v) == static_cast<float>(sample_trilinear(tissue, f.pixel_position(u, v))));

  // Tissue placed elsewhere in the world: sample through the inverse placement.
  std::mt19937_64 rng(4);
  const RigidTransform placed = test::random_rigid(rng, 5.0, FrameId::MRI, FrameId::World);
  const RigidTransform moved =
      compose(placed, RigidTransform(pose.rotation(), pose.translation(), FrameId::Tool, FrameId::MRI));
  const UsFrame g = acquire_frame(tissue, placed, moved, probe_state(), {});
  for (std::size_t i = 0; i < f.image.size(); ++i) CHECK(g.image[i] == doctest::Approx(f.image[i]).epsilon(1e-5));
}

TEST_CASE("frames follow the tracked poses") {
  const ScalarVolume tissue = smooth_tissue();
  std::vector<TrackedFrame> tracked;
  for (int i = 0; i < 5; ++i) {
    TrackedFrame t;
    t.timestamp = 0.05 * i + 0.01;
    t.probe_pose = looking_down(Vec3(2.0 * i, 1.0, 25.0));
    t.segment = i;
    tracked.push_back(t);
  }
  const auto one = acquire_sweep(std::span(tracked).first(1), tissue, kPlaced, probe_state(), {});
  CHECK(one.size() == 1);
  const auto all = acquire_sweep(tracked, tissue, kPlaced, probe_state(), {});
  REQUIRE(all.size() == tracked.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    CHECK(all[i].timestamp == tracked[i].timestamp);
    const auto& g = all[i].geometry;
    const Vec3 apex = all[i].pixel_position(-g.t_x, -g.t_y);
    CHECK((apex - tracked[i].probe_pose.translation()).norm() <= 1.0);
    CHECK((apex - tracked[i].probe_pose.translation()).norm() < 1e-9);
  }
  CHECK(test::error_of([&] {
          (void)acquire_sweep(std::span<const TrackedFrame>(), tissue, kPlaced, probe_state(), {});
        }) == ErrorCode::EmptyInput);
}

TEST_CASE("pixel mapping keeps lines straight") {
  std::mt19937_64 rng(11);
  const ScalarVolume tissue(cube_grid(), 1.0f);
  std::uniform_real_distribution<double> u(0.0, 40.0);
  for (int trial = 0; trial < 50; ++trial) {
    const RigidTransform pose(test::random_rigid(rng).rotation(), test::random_point(rng, 5.0), FrameId::Tool,
                              FrameId::World);
    const UsFrame f = acquire_frame(tissue, kPlaced, pose, probe_state(), {});
    const Vec3 a(u(rng), u(rng), 0), d(u(rng), u(rng), 0);
    const Vec3 p0 = f.pixel_position(a.x(), a.y());
    const Vec3 p1 = f.pixel_position(a.x() + d.x(), a.y() + d.y());
    const Vec3 p2 = f.pixel_position(a.x() + 2.7 * d.x(), a.y() + 2.7 * d.y());
    CHECK((p1 - p0).cross(p2 - p0).norm() <= 1e-9 * (p1 - p0).norm() * (p2 - p0).norm() + 1e-12);
  }
}

TEST_CASE("speckle is reproducible per frame index") {
  const ScalarVolume tissue = smooth_tissue();
  UsSimParams p;
  p.speckle = 0.3;
  p.seed = 9;
  const auto pose = looking_down(Vec3(0, 0, 30));
  const UsFrame a = acquire_frame(tissue, kPlaced, pose, probe_state(), p, 3);
  const UsFrame b = acquire_frame(tissue, kPlaced, pose, probe_state(), p, 3);
  const UsFrame c = acquire_frame(tissue, kPlaced, pose, probe_state(), p, 4);
  CHECK(a.image == b.image);
  CHECK(a.image != c.image);
  const UsFrame clean = acquire_frame(tissue, kPlaced, pose, probe_state(), {});
  for (std::size_t i = 0; i < a.image.size(); ++i) {
    CHECK(a.image[i] >= 0.7f * clean.image[i] - 1e-3f);
    CHECK(a.image[i] <= 1.3f * clean.image[i] + 1e-3f);
  }
}

TEST_CASE("fan mask and attenuation") {
  const ScalarVolume tissue(cube_grid(), 50.0f);
  UsSimParams p;
  p.fan_mask = true;
  p.fan_half_angle_deg = 30.0;
  p.attenuation = 0.02;
  const UsFrame f = acquire_frame(tissue, kPlaced, looking_down(Vec3(0, 0, 30)), probe_state(), p);
  const auto& g = f.geometry;
  const double tan_fan = std::tan(deg2rad(30.0));
  for (int v = 0; v < g.height; ++v)
    for (int u = 0; u < g.width; ++u) {
      const double depth = v * g.s_y, lateral = std::abs((u + g.t_x) * g.s_x);
      if (lateral > depth * tan_fan) CHECK(f.at(u, v) == 0.0f);
      else CHECK(f.at(u, v) == doctest::Approx(50.0 * std::exp(-0.02 * depth)).epsilon(1e-5));
    }
  p = {};
  p.speckle = 1.0;
  CHECK(test::error_of([&] { p.validate(); }) == ErrorCode::InvalidArgument);
  p = {};
  p.gain = 0.0;
  CHECK(test::error_of([&] { p.validate(); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("tissue placement must be in the world frame") {
  const ScalarVolume tissue(cube_grid(), 1.0f);
  CHECK(test::error_of([&] {
          (void)acquire_frame(tissue, RigidTransform::identity(FrameId::Camera, FrameId::World),
                              looking_down(Vec3::Zero()), probe_state(), {});
        }) == ErrorCode::FrameMismatch);
}

TEST_CASE("bundle round trip") {
  const ScalarVolume tissue = smooth_tissue();
  std::vector<UsFrame> frames;
  for (int i = 0; i < 3; ++i) {
    frames.push_back(acquire_frame(tissue, kPlaced, looking_down(Vec3(i, 0, 30)), probe_state(), {}));
    frames.back().timestamp = 0.1 * i;
  }
  const auto dir = test::scratch_dir("bundle");
  write_bundle(dir / "b", frames);
  const auto back = read_bundle(dir / "b");
  REQUIRE(back.size() == frames.size());
  for (std::size_t i = 0; i < back.size(); ++i) {
    CHECK(back[i].image == frames[i].image);
    CHECK(back[i].timestamp == frames[i].timestamp);
    CHECK((back[i].pose.matrix() - frames[i].pose.matrix()).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(back[i].geometry.width == frames[i].geometry.width);
  }
  CHECK(test::error_of([&] { (void)read_bundle(dir / "missing"); }) == ErrorCode::Io);
}
