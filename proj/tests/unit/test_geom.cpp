#include <cmath>
#include <sstream>

#include "mrus/geom.hpp"
#include "support.hpp"

using namespace mrus;
using test::random_rigid;

namespace {

double max_abs(const Mat4& a, const Mat4& b) { return (a - b).cwiseAbs().maxCoeff(); }

// Fixed-axis XYZ angles from R = Rz·Ry·Rx, solved from the matrix entries.
Vec3 euler_oracle(const Mat3& r) {
  const double ry = std::asin(std::clamp(-r(2, 0), -1.0, 1.0));
  const double rx = std::atan2(r(2, 1), r(2, 2));
  const double rz = std::atan2(r(1, 0), r(0, 0));
  return {rx, ry, rz};
}

}  // namespace

TEST_CASE("compose of identities is identity") {
  const auto i = RigidTransform::identity(FrameId::World, FrameId::World);
  CHECK(max_abs(compose(i, i).matrix(), Mat4::Identity()) == 0.0);
}

TEST_CASE("compose with inverse gives identity") {
  std::mt19937_64 rng(7);
  for (int n = 0; n < 100; ++n) {
    const auto t = random_rigid(rng, 500.0, FrameId::MRI, FrameId::Camera);
    const auto c = compose(t, invert(t));
    CHECK(c.from() == FrameId::Camera);
    CHECK(c.to() == FrameId::Camera);
    CHECK(max_abs(c.matrix(), Mat4::Identity()) < 1e-9);
  }
}

TEST_CASE("two quarter turns about z send x to -x") {
  const RigidTransform q(rot_z(M_PI / 2), Vec3::Zero(), FrameId::World, FrameId::World);
  const Vec3 p = compose(q, q).apply(Vec3(1, 0, 0));
  CHECK((p - Vec3(-1, 0, 0)).norm() < 1e-12);
}

TEST_CASE("compose rejects mismatched frames and names both") {
  const auto a = RigidTransform::identity(FrameId::Camera, FrameId::World);
  const auto b = RigidTransform::identity(FrameId::MRI, FrameId::Tool);
  try {
    (void)compose(a, b);
    FAIL("no error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::FrameMismatch);
    const std::string msg = e.what();
    CHECK(msg.find("Camera") != std::string::npos);
    CHECK(msg.find("Tool") != std::string::npos);
  }
}

TEST_CASE("invert of a pure translation negates it") {
  const auto t = RigidTransform::translation({1, 2, 3}, FrameId::US, FrameId::World);
  const auto inv = invert(t);
  CHECK(inv.from() == FrameId::World);
  CHECK(inv.to() == FrameId::US);
  CHECK((inv.translation() - Vec3(-1, -2, -3)).norm() == 0.0);
  CHECK(max_abs(invert(RigidTransform()).matrix(), Mat4::Identity()) == 0.0);
}

TEST_CASE("invert undoes the transform on random points") {
  std::mt19937_64 rng(11);
  for (int n = 0; n < 1000; ++n) {
    const auto t = random_rigid(rng);
    const Vec3 p = test::random_point(rng);
    CHECK((invert(t).apply(t.apply(p)) - p).norm() < 1e-9);
    CHECK(max_abs(invert(invert(t)).matrix(), t.matrix()) < 1e-12);
  }
}

TEST_CASE("rotation angle norm") {
  CHECK(rotation_angle_norm(RigidTransform()) == 0.0);
  const RigidTransform rz(rot_z(deg2rad(3.0)), Vec3::Zero(), FrameId::World, FrameId::World);
  CHECK(rotation_angle_norm(rz) == doctest::Approx(3.0).epsilon(1e-12));

  const Mat3 r = rot_x(deg2rad(2.0)) * rot_y(deg2rad(2.0));
  const Vec3 e = euler_oracle(r);
  // The oracle angles must rebuild the matrix.
  CHECK((rot_z(e[2]) * rot_y(e[1]) * rot_x(e[0]) - r).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(std::abs(rotation_angle_norm(r) - rad2deg(e.norm())) < 1e-6);
}

TEST_CASE("rotation angle norm is unchanged by conjugation with translations") {
  std::mt19937_64 rng(5);
  for (int n = 0; n < 200; ++n) {
    const auto t = random_rigid(rng);
    const auto s = RigidTransform::translation(test::random_point(rng), FrameId::World, FrameId::World);
    const auto c = compose(compose(s, t), invert(s));
    CHECK(std::abs(rotation_angle_norm(c) - rotation_angle_norm(t)) < 1e-9);
  }
}

TEST_CASE("apply") {
  const RigidTransform i;
  CHECK(i.apply(Vec3(5, 5, 5)) == Vec3(5, 5, 5));
  const auto t = RigidTransform::translation({1, 0, 0}, FrameId::World, FrameId::World);
  CHECK(apply(t, Vec3::Zero()) == Vec3(1, 0, 0));

  // Inverting the Camera <- MRI map gives the MRI <- Camera map pointwise.
  std::mt19937_64 rng(3);
  for (int n = 0; n < 100; ++n) {
    const auto mri_to_camera = random_rigid(rng, 1000.0, FrameId::MRI, FrameId::Camera);
    const Mat4 oracle = mri_to_camera.matrix().inverse();
    const Vec3 p = test::random_point(rng);
    const Vec3 expected = (oracle * p.homogeneous()).head<3>();
    CHECK((apply(invert(mri_to_camera), p) - expected).norm() < 1e-9);
  }
}

TEST_CASE("group axioms on random transforms") {
  std::mt19937_64 rng(2024);
  const RigidTransform id;
  for (int n = 0; n < 10000; ++n) {
    const auto a = random_rigid(rng), b = random_rigid(rng), c = random_rigid(rng);
    CHECK(max_abs(compose(compose(a, b), c).matrix(), compose(a, compose(b, c)).matrix()) < 1e-9);
    CHECK(max_abs(compose(id, a).matrix(), a.matrix()) < 1e-12);
    CHECK(max_abs(compose(a, id).matrix(), a.matrix()) < 1e-12);
    CHECK(max_abs(compose(invert(a), a).matrix(), Mat4::Identity()) < 1e-9);
  }
}

TEST_CASE("long compose chains stay orthonormal") {
  std::mt19937_64 rng(99);
  RigidTransform acc;
  for (int n = 0; n < 100; ++n) acc = compose(acc, random_rigid(rng, 10.0));
  const Mat3& r = acc.rotation();
  CHECK(std::abs(r.determinant() - 1.0) < 1e-9);
  CHECK((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("slightly drifted rotations are projected, far ones rejected") {
  Mat3 r = rot_z(0.3);
  r(0, 0) += 1e-6;
  const RigidTransform t(r, Vec3::Zero(), FrameId::World, FrameId::World);
  CHECK((t.rotation().transpose() * t.rotation() - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(test::error_of([] {
          RigidTransform(2.0 * Mat3::Identity(), Vec3::Zero(), FrameId::World, FrameId::World);
        }) == ErrorCode::InvalidArgument);
}

TEST_CASE("affine transforms need an invertible linear part") {
  CHECK(test::error_of([] {
          AffineTransform(Mat3::Zero(), Vec3::Zero(), FrameId::US, FrameId::Tool);
        }) == ErrorCode::InvalidArgument);
  const AffineTransform a(Vec3(2, 3, 4).asDiagonal(), Vec3(1, 1, 1), FrameId::US, FrameId::Tool);
  const Vec3 p(1, 2, 3);
  CHECK((invert(a).apply(a.apply(p)) - p).norm() < 1e-12);
}

TEST_CASE("transform text round trip keeps 12 significant digits") {
  std::mt19937_64 rng(1);
  const auto t = random_rigid(rng, 1000.0, FrameId::Patient, FrameId::World);
  std::stringstream ss;
  write_transform(ss, t);
  const std::string text = ss.str();
  CHECK(text.rfind("transform Patient World", 0) == 0);
  const auto back = read_rigid(ss);
  CHECK(back.from() == FrameId::Patient);
  CHECK(back.to() == FrameId::World);
  CHECK(max_abs(back.matrix(), t.matrix()) < 1e-9);

  std::istringstream bad("transform Patient World\n1 0 0\n");
  CHECK(test::error_of([&] { (void)read_rigid(bad); }) == ErrorCode::Malformed);
}

TEST_CASE("frame names round trip") {
  for (FrameId f : {FrameId::MRI, FrameId::Camera, FrameId::Depth, FrameId::World,
                    FrameId::EndEffector, FrameId::Tool, FrameId::US, FrameId::Patient,
                    FrameId::Marker}) {
    CHECK(parse_frame(frame_name(f)) == f);
  }
  CHECK(test::error_of([] { (void)parse_frame("Nowhere"); }) == ErrorCode::Malformed);
}
