#include <algorithm>
#include <cmath>
#include <memory>

#include "mrus/robotsim.hpp"
#include "support.hpp"

using namespace mrus;

namespace {

ContactModel flat_skin(double stiffness = 5000.0) {
  ContactModel c;
  c.add(std::make_shared<PlaneContact>(Vec3::Zero(), Vec3::UnitZ()), stiffness);
  return c;
}

// Tool z points down onto the z = 0 skin, x along travel.
ScanPose flat_pose(double x, double y = 0.0) {
  Mat3 r;
  r.col(0) = Vec3::UnitX();
  r.col(1) = Vec3(0, -1, 0);
  r.col(2) = Vec3(0, 0, -1);
  return {Vec3(x, y, 0), Vec3::UnitZ(), RigidTransform(r, Vec3(x, y, 0), FrameId::Tool, FrameId::World)};
}

std::vector<ScanPose> six_flat_poses() {
  std::vector<ScanPose> p;
  for (int i = 0; i < 6; ++i) p.push_back(flat_pose(-50.0 + 20.0 * i, 5.0));
  return p;
}

Setpoint down_at(const Vec3& p) {
  Setpoint s;
  s.position = p;
  s.orientation = flat_pose(0).tool_pose.rotation();
  return s;
}

bool in_contact(const TrackedFrame& f) { return f.segment >= 1 && f.contact_force > 0.0; }

}  // namespace

TEST_CASE("controller at rest on its setpoint stays put") {
  ProbeState st;
  st.position = Vec3(1, 2, 30);
  st.orientation = down_at(Vec3::Zero()).orientation;
  const StepResult r = step_controller(st, down_at(st.position), StiffnessParams{}, flat_skin(), 1e-3);
  CHECK(r.commanded_force.norm() == 0.0);
  CHECK(r.contact_force.norm() == 0.0);
  CHECK(r.state.position == st.position);
  CHECK(r.state.velocity == Vec3::Zero());
  CHECK(test::error_of([&] { step_controller(st, down_at(st.position), {}, flat_skin(), 0.02); }) ==
        ErrorCode::InvalidArgument);
}

TEST_CASE("spring balance against flat skin") {
  const StiffnessParams p;
  const double k_skin = 5000.0;
  // Setpoint f/k_scan beyond the penetration depth f/k_skin.
  const double depth = p.f_desired / k_skin * 1e3;
  const Vec3 target(0, 0, -depth - p.f_desired / p.k_scan * 1e3);
  ProbeState st;
  st.position = Vec3(0, 0, 5);
  st.orientation = down_at(target).orientation;
  const ContactModel skin = flat_skin(k_skin);
  StepResult r;
  for (int i = 0; i < 20000; ++i) {
    r = step_controller(st, down_at(target), p, skin, 1e-3);
    st = r.state;
  }
  CHECK(r.contact_force.norm() == doctest::Approx(p.f_desired).epsilon(0.02));
  CHECK(-st.position.z() == doctest::Approx(depth).epsilon(0.05));
}

TEST_CASE("free-space setpoint is reached without contact") {
  ProbeState st;
  st.position = Vec3(3, -2, 40);
  st.orientation = down_at(Vec3::Zero()).orientation;
  const Vec3 target(0, 0, 10);
  StepResult r;
  for (int i = 0; i < 10000; ++i) {
    r = step_controller(st, down_at(target), StiffnessParams{}, flat_skin(), 1e-3);
    st = r.state;
    CHECK(r.contact_force.norm() == 0.0);
  }
  CHECK((st.position - target).norm() < 1e-3);
}

TEST_CASE("undamped free motion conserves the discrete energy") {
  StiffnessParams p;
  p.damping = 0.0;
  const double h = 1e-3;
  ProbeState st;
  st.position = Vec3(4, -3, 12);
  st.orientation = down_at(Vec3::Zero()).orientation;
  const ContactModel none;
  // Symplectic Euler conserves v²/2 + w²x²/2 - h·w²·x·v/2 per axis.
  auto shadow = [&](const ProbeState& s) {
    double e = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double w2 = (a == 2 ? p.k_scan : p.k_lateral) / p.mass;
      const double x = s.position[a], v = s.velocity[a];
      e += 0.5 * v * v + 0.5 * w2 * x * x - 0.5 * h * w2 * x * v;
    }
    return e;
  };
  auto physical = [&](const ProbeState& s) {
    double e = 0.0;
    for (int a = 0; a < 3; ++a) {
      const double w2 = (a == 2 ? p.k_scan : p.k_lateral) / p.mass;
      e += 0.5 * s.velocity[a] * s.velocity[a] + 0.5 * w2 * s.position[a] * s.position[a];
    }
    return e;
  };
  const double e0 = shadow(st), p0 = physical(st);
  const double hw = h * std::sqrt(p.k_lateral / p.mass);
  double prev = e0;
  for (int i = 0; i < 50000; ++i) {
    st = step_controller(st, down_at(Vec3::Zero()), p, none, h).state;
    const double e = shadow(st);
    CHECK(e <= prev + 1e-9 * e0);
    prev = e;
    // |E - shadow| <= h·w·E/2, so E is bounded by the initial shadow.
    CHECK(physical(st) <= p0 * (1.0 + hw / 2) / (1.0 - hw / 2));
  }
}

TEST_CASE("sweep over a flat phantom holds the force band") {
  const StiffnessParams p;
  const SweepResult s = run_sweep(six_flat_poses(), p, flat_skin());
  CHECK(!s.aborted);
  std::size_t contact = 0, in_band = 0;
  for (std::size_t i = 0; i < s.frames.size(); ++i) {
    const auto& f = s.frames[i];
    if (i > 0) CHECK(f.timestamp > s.frames[i - 1].timestamp);
    CHECK(f.contact_force <= p.f_abort);
    if (!in_contact(f)) continue;
    ++contact;
    in_band += f.contact_force >= 4.0 && f.contact_force <= 6.0;
    // Orientation servo keeps the probe on the segment normal.
    const double ang = rad2deg(std::acos(std::clamp(-f.probe_pose.rotation().col(2).dot(Vec3::UnitZ()), -1.0, 1.0)));
    CHECK(ang <= 2.0);
  }
  REQUIRE(contact > 100);
  CHECK(static_cast<double>(in_band) >= 0.99 * static_cast<double>(contact));
  CHECK(s.duration < 30.0);

  // Mean penetration while scanning matches the skin spring.
  double depth = 0.0;
  for (const auto& f : s.frames)
    if (in_contact(f)) depth -= f.probe_pose.translation().z();
  depth /= static_cast<double>(contact);
  CHECK(depth == doctest::Approx(p.f_desired / 5000.0 * 1e3).epsilon(0.05));
}

TEST_CASE("a rigid wall triggers the abort on the step it passes the limit") {
  const StiffnessParams p;
  ContactModel c = flat_skin();
  c.add(std::make_shared<PlaneContact>(Vec3(10, 0, 0), Vec3(-1, 0, 0)), 2e5);
  const std::vector<ScanPose> poses{flat_pose(-20), flat_pose(40)};

  const SweepResult s = run_sweep(poses, p, c);
  REQUIRE(s.aborted);
  CHECK(s.frames.back().contact_force > p.f_abort);
  CHECK(s.frames.back().contact_force < 30.0);
  for (std::size_t i = 0; i + 1 < s.frames.size(); ++i) CHECK(s.frames[i].contact_force <= p.f_abort);
  CHECK(s.duration == doctest::Approx(static_cast<double>(s.abort_step) * 1e-3));
  CHECK(s.frames.back().timestamp == s.duration);

  // Same sweep with every control step recorded: the preceding step was
  // still inside the limit and the frame rate does not alter the dynamics.
  SweepOptions every;
  every.rate_hz = 1000.0;
  const SweepResult d = run_sweep(poses, p, c, every);
  REQUIRE(d.aborted);
  CHECK(d.abort_step == s.abort_step);
  REQUIRE(d.frames.size() == static_cast<std::size_t>(d.abort_step) + 1);
  CHECK(d.frames[d.frames.size() - 2].contact_force <= p.f_abort);
  CHECK(d.frames.back().contact_force == s.frames.back().contact_force);
}

TEST_CASE("two coincident poses give a minimal sweep") {
  SweepOptions o;
  o.approach_height = 0.0;
  const SweepResult s = run_sweep(std::vector<ScanPose>{flat_pose(0), flat_pose(0)}, StiffnessParams{},
                                  flat_skin(), o);
  CHECK(s.frames.size() == 2);
  CHECK((s.frames.back().probe_pose.translation() - Vec3::Zero()).norm() < 0.01);
  CHECK(test::error_of([&] {
          (void)run_sweep(std::vector<ScanPose>{flat_pose(0)}, StiffnessParams{}, flat_skin());
        }) == ErrorCode::InvalidArgument);
}

TEST_CASE("an unreachable pose times out") {
  ContactModel c = flat_skin();
  c.add(std::make_shared<PlaneContact>(Vec3(5, 0, 0), Vec3(-1, 0, 0)), 2e5);  // wall short of the goal
  SweepOptions o;
  o.segment_timeout = 2.0;
  CHECK(test::error_of([&] {
          (void)run_sweep(std::vector<ScanPose>{flat_pose(-10), flat_pose(10)}, StiffnessParams{}, c, o);
        }) == ErrorCode::Timeout);
}

TEST_CASE("stiffness parameters are validated") {
  StiffnessParams p;
  p.k_scan = 3000.0;
  CHECK(test::error_of([&] { p.validate(); }) == ErrorCode::InvalidArgument);
  p = {};
  p.f_desired = 30.0;
  CHECK(test::error_of([&] { p.validate(); }) == ErrorCode::InvalidArgument);
  p = {};
  p.damping = 1.5;
  CHECK(test::error_of([&] { p.validate(); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("ellipsoid and cloud contact agree on a sphere") {
  const EllipsoidContact e(RigidTransform::identity(FrameId::World, FrameId::World), Vec3::Constant(50));
  SurfaceCloud s;
  s.frame = FrameId::World;
  for (int i = 0; i < 90; ++i)
    for (int j = 0; j < 180; ++j) {
      const double th = M_PI * (i + 0.5) / 90, ph = 2 * M_PI * j / 180;
      const Vec3 n(std::sin(th) * std::cos(ph), std::sin(th) * std::sin(ph), std::cos(th));
      s.points.push_back(50.0 * n);
      s.normals.push_back(n);
    }
  const CloudContact cc(s);
  const Vec3 p(0.3, 0.2, 49.0);
  const auto a = e.probe(p), b = cc.probe(p);
  REQUIRE(a);
  REQUIRE(b);
  CHECK(a->depth == doctest::Approx(50.0 - p.norm()).epsilon(0.01));
  CHECK(b->depth == doctest::Approx(a->depth).epsilon(0.1));
  CHECK(!e.probe(Vec3(0, 0, 51)));
  CHECK(!cc.probe(Vec3(0, 0, 51)));
}

TEST_CASE("sweep file round trip") {
  const StiffnessParams p;
  const SweepOptions o;
  const SweepResult s = run_sweep(six_flat_poses(), p, flat_skin(), o);
  const auto dir = test::scratch_dir("sweep_io");
  write_sweep(dir / "s.txt", s, p, o);
  const SweepResult b = read_sweep(dir / "s.txt");
  REQUIRE(b.frames.size() == s.frames.size());
  CHECK(b.aborted == s.aborted);
  for (std::size_t i = 0; i < b.frames.size(); ++i) {
    CHECK(b.frames[i].segment == s.frames[i].segment);
    CHECK(b.frames[i].timestamp == doctest::Approx(s.frames[i].timestamp));
    CHECK(b.frames[i].contact_force == doctest::Approx(s.frames[i].contact_force));
  }
}
