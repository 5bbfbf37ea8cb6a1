#include <cmath>

#include "mrus/surfmatch.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace mrus;

namespace {

// Closed ellipsoidal torso-like surface with outward normals.
SurfaceCloud torso_surface(int rings = 40, int columns = 80, double phase = 0.0) {
  SurfaceCloud s;
  s.frame = FrameId::MRI;
  const Vec3 r(44, 32, 36);
  for (int i = 0; i < rings; ++i)
    for (int j = 0; j < columns; ++j) {
      const double th = M_PI * (i + 0.5) / rings, ph = 2 * M_PI * (j + phase) / columns;
      const Vec3 u(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th));
      // A bump breaks the ellipsoid's mirror symmetries.
      const double bump = 6.0 * std::exp(-((u - Vec3(0.6, 0.6, 0.5).normalized()).squaredNorm()) / 0.1);
      s.points.push_back(u.cwiseProduct(r) * (1.0 + bump / 40.0));
      s.normals.push_back(u.cwiseQuotient(r).normalized());
    }
  return s;
}

PointCloud moved(const SurfaceCloud& s, const RigidTransform& t) {
  PointCloud out;
  out.frame = t.to();
  for (const Vec3& p : s.points) out.points.push_back(t.apply(p));
  return out;
}

double trans_err(const RigidTransform& a, const RigidTransform& b) {
  return (a.translation() - b.translation()).norm();
}
double rot_err(const RigidTransform& a, const RigidTransform& b) {
  return rotation_angle_deg(a.rotation().transpose() * b.rotation());
}

}  // namespace

TEST_CASE("nearest neighbour trivial cases") {
  const NearestNeighborIndex one({Vec3::Zero()});
  const auto h = one.query(Vec3(1, 1, 1));
  CHECK(h.index == 0);
  CHECK(h.distance == doctest::Approx(std::sqrt(3.0)));
  const NearestNeighborIndex two({Vec3(1, 2, 3), Vec3(4, 5, 6)});
  CHECK(two.query(Vec3(4, 5, 6)).distance == 0.0);
  CHECK(test::error_of([] { (void)NearestNeighborIndex().query(Vec3::Zero()); }) ==
        ErrorCode::EmptyInput);
}

TEST_CASE("nearest neighbour equals a linear scan") {
  std::mt19937_64 rng(31);
  std::vector<Vec3> pts;
  for (int i = 0; i < 10000; ++i) pts.push_back(test::random_point(rng, 100.0));
  const NearestNeighborIndex index(pts);
  for (int q = 0; q < 1000; ++q) {
    // Half the queries far outside the cloud.
    const Vec3 p = test::random_point(rng, q % 2 ? 120.0 : 400.0);
    std::size_t best = 0;
    double best_d2 = (pts[0] - p).squaredNorm();
    for (std::size_t i = 1; i < pts.size(); ++i) {
      const double d2 = (pts[i] - p).squaredNorm();
      if (d2 < best_d2) {
        best_d2 = d2;
        best = i;
      }
    }
    const auto h = index.query(p);
    CHECK(h.index == best);
    CHECK(h.distance == std::sqrt(best_d2));
    CHECK(linear_scan_nearest(pts, p).index == best);
  }
}

TEST_CASE("nearest neighbour ties go to the lowest index") {
  std::vector<Vec3> grid;
  for (int rep = 0; rep < 3; ++rep)
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < 6; ++j)
        for (int k = 0; k < 6; ++k) grid.emplace_back(i, j, k);
  const NearestNeighborIndex index(grid);
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 6; ++j) {
      const auto h = index.query(Vec3(i, j, 2.5));  // equidistant from k = 2 and k = 3
      CHECK(h.index == static_cast<std::size_t>((i * 6 + j) * 6 + 2));
    }
}

TEST_CASE("SVD solver equals the quaternion closed form") {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> noise(0.0, 0.5);
  for (int trial = 0; trial < 100; ++trial) {
    const RigidTransform t = test::random_rigid(rng, 300.0, FrameId::MRI, FrameId::Camera);
    std::vector<Vec3> a, b;
    for (int i = 0; i < 50; ++i) {
      a.push_back(test::random_point(rng, 60.0));
      b.push_back(t.apply(a.back()));
    }
    const RigidTransform exact = solve_absolute_orientation(a, b, FrameId::MRI, FrameId::Camera);
    CHECK((exact.matrix() - test::horn_absolute_orientation(a, b).matrix()).cwiseAbs().maxCoeff() <= 1e-9);
    CHECK((exact.matrix() - t.matrix()).cwiseAbs().maxCoeff() <= 1e-9);
    // Noisy correspondences: both solvers minimize the same cost.
    for (auto& p : b) p += Vec3(noise(rng), noise(rng), noise(rng));
    const RigidTransform fit = solve_absolute_orientation(a, b, FrameId::MRI, FrameId::Camera);
    CHECK((fit.matrix() - test::horn_absolute_orientation(a, b).matrix()).cwiseAbs().maxCoeff() <= 1e-9);
  }
  const std::vector<Vec3> line{{0, 0, 0}, {1, 1, 1}, {2, 2, 2}};
  CHECK(test::error_of([&] {
          (void)solve_absolute_orientation(line, line, FrameId::MRI, FrameId::Camera);
        }) == ErrorCode::Degenerate);
}

TEST_CASE("ICP self alignment") {
  const SurfaceCloud s = torso_surface();
  PointCloud target = moved(s, RigidTransform::identity(FrameId::MRI, FrameId::Camera));
  for (bool pre : {false, true}) {
    IcpParams p;
    p.prealign = pre;
    const IcpResult r = icp(s, target, p);
    CHECK((r.transform.matrix() - Mat4::Identity()).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(r.converged);
    CHECK(r.iterations <= 2);
    CHECK(r.rms_error < 1e-9);
  }
}

TEST_CASE("ICP recovers a known displacement") {
  // Dense source, sparser target sampled on a different lattice: identical
  // lattices trap point-to-point ICP at lattice shifts.
  const SurfaceCloud s = torso_surface(200, 400);
  const RigidTransform truth(rot_z(deg2rad(5.0)), Vec3(10, 5, 0), FrameId::MRI, FrameId::Camera);
  const PointCloud target = moved(torso_surface(37, 71, 0.37), truth);
  IcpParams p;
  p.prealign = false;
  p.convergence_tol = 1e-9;
  p.max_iterations = 300;
  const IcpResult r = icp(s, target, p);
  CHECK(trans_err(r.transform, truth) < 0.1);
  // Point-to-point bias about the weak (near-symmetric) z axis shrinks with
  // the source spacing: ~0.35 deg at 120x240, ~0.25 deg at 200x400.
  CHECK(rot_err(r.transform, truth) < 0.3);
  CHECK(r.iterations <= p.max_iterations);
  CHECK(r.rms_error >= 0.0);
  for (std::size_t i = 1; i < r.cost_history.size(); ++i) {
    CHECK(r.cost_history[i] <= r.cost_history[i - 1]);
  }

  // 30% extra points far beyond the pair distance.
  PointCloud noisy = target;
  std::mt19937_64 rng(2);
  const std::size_t extra = target.size() * 3 / 7;
  for (std::size_t i = 0; i < extra; ++i) {
    noisy.points.push_back(truth.apply(test::random_point(rng, 40.0).normalized() * 300.0));
  }
  const IcpResult ro = icp(s, noisy, p);
  CHECK(trans_err(ro.transform, truth) < 0.5);
  CHECK(rot_err(ro.transform, truth) < 0.5);
  CHECK(ro.inliers == target.size());
}

TEST_CASE("ICP pre-alignment recovers a large rotation") {
  const SurfaceCloud s = torso_surface();
  const RigidTransform truth(rot_z(deg2rad(70.0)) * rot_x(0.3), Vec3(400, -200, 1800),
                             FrameId::MRI, FrameId::Camera);
  IcpParams p;
  p.convergence_tol = 1e-9;
  const IcpResult r = icp(s, moved(s, truth), p);
  CHECK(trans_err(r.transform, truth) < 0.1);
  // Point-to-point bias about the weak (near-symmetric) z axis shrinks with
  // the source spacing: ~0.35 deg at 120x240, ~0.25 deg at 200x400.
  CHECK(rot_err(r.transform, truth) < 0.3);
}

TEST_CASE("ICP is equivariant under a common rotation") {
  const SurfaceCloud s = torso_surface();
  const RigidTransform truth(rot_y(deg2rad(4.0)), Vec3(3, -6, 2), FrameId::MRI, FrameId::Camera);
  IcpParams p;
  p.prealign = false;
  p.max_iterations = 20;
  const IcpResult base = icp(s, moved(s, truth), p);

  const Mat3 rot = rot_x(0.7) * rot_z(-1.1);
  const RigidTransform rs(rot, Vec3::Zero(), FrameId::MRI, FrameId::MRI);
  const RigidTransform rt(rot, Vec3::Zero(), FrameId::Camera, FrameId::Camera);
  SurfaceCloud s2 = s;
  for (auto& q : s2.points) q = rot * q;
  PointCloud t2 = moved(s, truth);
  for (auto& q : t2.points) q = rot * q;
  const IcpResult turned = icp(s2, t2, p);
  const RigidTransform expected = compose(compose(rt, base.transform), invert(rs));
  CHECK((turned.transform.matrix() - expected.matrix()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("ICP error cases") {
  const SurfaceCloud s = torso_surface();
  PointCloud far = moved(s, RigidTransform::translation({1000, 0, 0}, FrameId::MRI, FrameId::Camera));
  IcpParams p;
  p.prealign = false;
  CHECK(test::error_of([&] { (void)icp(s, far, p); }) == ErrorCode::NoCorrespondences);
  PointCloud line;
  line.frame = FrameId::Camera;
  line.points = {{0, 0, 0}, {1, 0, 0}, {2, 0, 0}};
  CHECK(test::error_of([&] { (void)icp(s, line, p); }) == ErrorCode::Degenerate);
  p.initial = RigidTransform::identity(FrameId::MRI, FrameId::World);
  CHECK(test::error_of([&] { (void)icp(s, moved(s, RigidTransform::identity(FrameId::MRI, FrameId::Camera)), p); }) ==
        ErrorCode::FrameMismatch);
}
