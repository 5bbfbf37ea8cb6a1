#include <cmath>
#include <set>

#include "mrus/sensor.hpp"
#include "support.hpp"

using namespace mrus;

namespace {

// Camera at the World origin looking down +z.
DepthCameraModel small_camera(double xy = 0.0, double z = 0.0) {
  DepthCameraModel m;
  m.width = 160;
  m.height = 120;
  m.focal_px = 142.5;
  m.noise_xy_sigma = xy;
  m.noise_z_sigma = z;
  return m;
}

Scene::Rectangle facing_plane(double distance, double half) {
  return {RigidTransform(rot_x(M_PI), Vec3(0, 0, distance), FrameId::World, FrameId::World), half,
          half, 0};
}

Scene table_and_torso(bool with_torso) {
  Scene s;
  s.rectangles.push_back(facing_plane(2000.0, 3000.0));
  if (with_torso) {
    s.ellipsoids.push_back(
        {RigidTransform::translation({0, 0, 1960}, FrameId::World, FrameId::World), {200, 150, 60}, 1});
  }
  return s;
}

}  // namespace

TEST_CASE("noiseless plane renders coplanar points") {
  const PointCloud c = render_depth(small_camera(), table_and_torso(false), 1);
  REQUIRE(c.size() == 160u * 120u);
  CHECK(c.frame == FrameId::Camera);
  for (const Vec3& p : c.points) CHECK(std::abs(p.z() - 2000.0) < 1e-6);
}

TEST_CASE("depth noise matches the configured sigmas") {
  DepthCameraModel m = small_camera(3.0, 10.0);
  m.width = 400;
  m.height = 250;
  const DepthRender r = render_depth_labeled(m, table_and_torso(false), 9);
  REQUIRE(r.cloud.size() == 100000u);
  double sx = 0, sy = 0, sz = 0;
  for (std::size_t i = 0; i < r.cloud.size(); ++i) {
    const Vec3 d = r.cloud.points[i] - r.true_points[i];
    sx += d.x() * d.x();
    sy += d.y() * d.y();
    sz += d.z() * d.z();
  }
  const double n = static_cast<double>(r.cloud.size());
  // In-plane sigma is an RMS radius, split evenly over x and y.
  CHECK(std::sqrt((sx + sy) / n) == doctest::Approx(3.0).epsilon(0.10));
  CHECK(std::sqrt(sx / n) == doctest::Approx(3.0 / std::sqrt(2.0)).epsilon(0.10));
  CHECK(std::sqrt(sz / n) == doctest::Approx(10.0).epsilon(0.10));
}

TEST_CASE("rendering is deterministic per seed and rejects empty scenes") {
  const auto m = small_camera(3.0, 10.0);
  const auto a = render_depth(m, table_and_torso(true), 5);
  const auto b = render_depth(m, table_and_torso(true), 5);
  CHECK(a.points == b.points);
  CHECK(test::error_of([&] { (void)render_depth(m, Scene{}, 1); }) == ErrorCode::EmptyInput);
}

TEST_CASE("back faces of a splatted sphere are never returned") {
  SurfaceCloud sphere;
  sphere.frame = FrameId::World;
  const Vec3 c(0, 0, 1500);
  for (int i = 0; i < 200; ++i)
    for (int j = 0; j < 400; ++j) {
      const double th = M_PI * (i + 0.5) / 200, ph = 2 * M_PI * j / 400;
      const Vec3 n(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th));
      sphere.points.push_back(c + 150.0 * n);
      sphere.normals.push_back(n);
    }
  const PointCloud out = render_depth(small_camera(), sphere, 1);
  REQUIRE(!out.empty());
  // Camera and depth origins differ by 25 mm; visible points face both.
  for (const Vec3& p : out.points) {
    const Vec3 n = (p - c).normalized();
    CHECK(n.z() < 0.2);
  }
  // The analytic ray cast sees exactly the front cap.
  Scene s;
  s.ellipsoids.push_back({RigidTransform::translation(c, FrameId::World, FrameId::World),
                          Vec3::Constant(150.0), 0});
  const DepthRender r = render_depth_labeled(small_camera(), s, 1);
  for (const Vec3& p : r.true_points) CHECK((p - c).normalized().z() < 0.2);
}

TEST_CASE("change detection of an unchanged scene is empty") {
  const auto m = small_camera(3.0, 10.0);
  const PointCloud a = render_depth(m, table_and_torso(true), 2);
  CHECK(detect_change(a, a).empty());
  CHECK(detect_change(a, a, {1, 5.0}).empty());
}

TEST_CASE("change detection keeps the added torso") {
  // Full resolution: about 3 mm between samples at the torso.
  DepthCameraModel m;
  m.noise_xy_sigma = m.noise_z_sigma = 0.0;
  const PointCloud bg = render_depth(m, table_and_torso(false), 1);
  const DepthRender cur = render_depth_labeled(m, table_and_torso(true), 1);
  const PointCloud out = detect_change(bg, cur.cloud);
  std::size_t torso = 0;
  for (int l : cur.labels) torso += l == 1;
  // Torso extent in the camera frame plus one leaf.
  for (const Vec3& p : out.points) {
    CHECK(std::abs(p.x()) <= 200.0 + 10.0);
    CHECK(std::abs(p.y()) <= 150.0 + 10.0);
    CHECK(p.z() >= 1900.0 - 10.0);
  }
  std::set<std::tuple<double, double, double>> kept;
  for (const Vec3& p : out.points) kept.insert({p.x(), p.y(), p.z()});
  std::size_t retained = 0;
  for (std::size_t i = 0; i < cur.cloud.size(); ++i) {
    const Vec3& p = cur.cloud.points[i];
    const bool is_kept = kept.count({p.x(), p.y(), p.z()}) == 1;
    if (cur.labels[i] != 1) {
      CHECK_FALSE(is_kept);
      continue;
    }
    retained += is_kept;
  }
  // Leaves the surface only clips at a corner can hold a single sample.
  CHECK(static_cast<double>(retained) >= 0.95 * static_cast<double>(torso));
}

TEST_CASE("a single stray point is dropped with min_points 2") {
  PointCloud bg;
  bg.frame = FrameId::Camera;
  for (int i = 0; i < 50; ++i)
    for (int j = 0; j < 50; ++j) bg.points.push_back({i * 4.0, j * 4.0, 0.0});
  // Pins the shared root cube so both stray points fall in one leaf.
  bg.points.push_back({0.0, 0.0, 160.0});
  PointCloud cur = bg;
  cur.points.push_back({100.0, 100.0, 80.0});
  CHECK(detect_change(bg, cur, {2, 10.0}).empty());
  CHECK(detect_change(bg, cur, {1, 10.0}).size() == 1);
  cur.points.push_back({101.0, 100.5, 80.5});
  CHECK(detect_change(bg, cur, {2, 10.0}).size() == 2);
}

TEST_CASE("change output is a subset of the current cloud") {
  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0.0, 300.0);
  PointCloud bg, cur;
  bg.frame = cur.frame = FrameId::Camera;
  for (int i = 0; i < 3000; ++i) bg.points.push_back({u(rng), u(rng), 0.1 * u(rng)});
  cur = bg;
  for (int i = 0; i < 500; ++i) cur.points.push_back({u(rng), u(rng), u(rng)});
  const PointCloud out = detect_change(bg, cur, {2, 10.0});
  std::set<std::tuple<double, double, double>> all;
  for (const Vec3& p : cur.points) all.insert({p.x(), p.y(), p.z()});
  for (const Vec3& p : out.points) CHECK(all.count({p.x(), p.y(), p.z()}) == 1);

  PointCloud other = cur;
  other.frame = FrameId::World;
  CHECK(test::error_of([&] { (void)detect_change(bg, other); }) == ErrorCode::FrameMismatch);
}

TEST_CASE("octree insertion cost is bounded by points times depth") {
  Octree t(Vec3::Zero(), 512.0, 7);
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-512.0, 512.0);
  std::vector<Vec3> pts;
  for (int i = 0; i < 5000; ++i) pts.push_back({u(rng), u(rng), u(rng)});
  for (const Vec3& p : pts) t.insert(p);
  CHECK(t.nodes_touched() <= pts.size() * 7);
  CHECK(t.node_count() <= 1 + pts.size() * 7);
  CHECK(t.count(0) == pts.size());
  CHECK(t.leaf_size() == doctest::Approx(8.0));
  for (const Vec3& p : pts) CHECK(t.find_leaf(p) >= 0);
  CHECK(test::error_of([&] { t.insert(Vec3(600, 0, 0)); }) == ErrorCode::OutOfBounds);
}
