#include "mrus/geom.hpp"

#include <array>
#include <cmath>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

namespace mrus {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidArgument: return "invalid-argument";
    case ErrorCode::FrameMismatch: return "frame-mismatch";
    case ErrorCode::Io: return "io";
    case ErrorCode::Config: return "config";
    case ErrorCode::EmptyInput: return "empty-input";
    case ErrorCode::Degenerate: return "degenerate";
    case ErrorCode::InsufficientData: return "insufficient-data";
    case ErrorCode::NoCorrespondences: return "no-correspondences";
    case ErrorCode::NoOverlap: return "no-overlap";
    case ErrorCode::OutOfBounds: return "out-of-bounds";
    case ErrorCode::Timeout: return "timeout";
    case ErrorCode::Malformed: return "malformed";
    case ErrorCode::Aborted: return "aborted";
  }
  return "unknown";
}

namespace {

constexpr std::array<std::pair<FrameId, std::string_view>, 9> kFrameNames{{
    {FrameId::MRI, "MRI"},
    {FrameId::Camera, "Camera"},
    {FrameId::Depth, "Depth"},
    {FrameId::World, "World"},
    {FrameId::EndEffector, "EndEffector"},
    {FrameId::Tool, "Tool"},
    {FrameId::US, "US"},
    {FrameId::Patient, "Patient"},
    {FrameId::Marker, "Marker"},
}};

void require_chain(FrameId outer_from, FrameId inner_to) {
  if (outer_from != inner_to) {
    throw Error(ErrorCode::FrameMismatch,
                "cannot compose: outer transform starts in frame '" +
                    std::string(frame_name(outer_from)) +
                    "' but inner transform ends in frame '" +
                    std::string(frame_name(inner_to)) + "'");
  }
}

double ortho_residual(const Mat3& r) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
}

void write_matrix(std::ostream& os, const Mat4& m) {
  std::ostringstream line;
  line << std::setprecision(12);
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      // Avoid printing "-0".
      const double v = m(i, j) == 0.0 ? 0.0 : m(i, j);
      line << v << (j == 3 ? '\n' : ' ');
    }
  }
  os << line.str();
}

std::tuple<Mat4, FrameId, FrameId> read_block(std::istream& is) {
  std::string tag, from, to;
  if (!(is >> tag >> from >> to) || tag != "transform") {
    throw Error(ErrorCode::Malformed, "expected 'transform <from> <to>'");
  }
  Mat4 m;
  for (int i = 0; i < 4; ++i) {
    for (int j = 0; j < 4; ++j) {
      if (!(is >> m(i, j))) {
        throw Error(ErrorCode::Malformed, "transform matrix truncated");
      }
    }
  }
  return {m, parse_frame(from), parse_frame(to)};
}

}  // namespace

std::string_view frame_name(FrameId frame) {
  for (const auto& [id, name] : kFrameNames) {
    if (id == frame) return name;
  }
  return "?";
}

FrameId parse_frame(std::string_view name) {
  for (const auto& [id, n] : kFrameNames) {
    if (n == name) return id;
  }
  throw Error(ErrorCode::Malformed, "unknown frame name '" + std::string(name) + "'");
}

Mat3 nearest_rotation(const Mat3& m) {
  Eigen::JacobiSVD<Mat3> svd(m, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU();
  const Mat3& v = svd.matrixV();
  if ((u * v.transpose()).determinant() < 0.0) u.col(2) = -u.col(2);
  return u * v.transpose();
}

// --- RigidTransform -------------------------------------------------------

RigidTransform::RigidTransform()
    : rotation_(Mat3::Identity()),
      translation_(Vec3::Zero()),
      from_(FrameId::World),
      to_(FrameId::World) {}

RigidTransform::RigidTransform(const Mat3& rotation, const Vec3& translation,
                               FrameId from, FrameId to)
    : rotation_(rotation), translation_(translation), from_(from), to_(to) {
  if (!rotation.allFinite() || !translation.allFinite()) {
    throw Error(ErrorCode::InvalidArgument, "rigid transform has non-finite entries");
  }
  const double residual = ortho_residual(rotation_);
  if (residual > 1e-3 || rotation_.determinant() < 0.0) {
    throw Error(ErrorCode::InvalidArgument,
                "rotation is not a proper orthonormal matrix");
  }
  if (residual > kOrthoTolerance) rotation_ = nearest_rotation(rotation_);
}

RigidTransform RigidTransform::identity(FrameId from, FrameId to) {
  return {Mat3::Identity(), Vec3::Zero(), from, to};
}

RigidTransform RigidTransform::translation(const Vec3& t, FrameId from, FrameId to) {
  return {Mat3::Identity(), t, from, to};
}

RigidTransform RigidTransform::from_matrix(const Mat4& m, FrameId from, FrameId to) {
  return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>(), from, to};
}

Mat4 RigidTransform::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = rotation_;
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

RigidTransform RigidTransform::relabeled(FrameId from, FrameId to) const {
  RigidTransform out = *this;
  out.from_ = from;
  out.to_ = to;
  return out;
}

// --- AffineTransform ------------------------------------------------------

AffineTransform::AffineTransform()
    : linear_(Mat3::Identity()),
      translation_(Vec3::Zero()),
      from_(FrameId::World),
      to_(FrameId::World) {}

AffineTransform::AffineTransform(const Mat3& linear, const Vec3& translation,
                                 FrameId from, FrameId to)
    : linear_(linear), translation_(translation), from_(from), to_(to) {
  if (!linear.allFinite() || !translation.allFinite()) {
    throw Error(ErrorCode::InvalidArgument, "affine transform has non-finite entries");
  }
  if (std::abs(linear.determinant()) <= 1e-12) {
    throw Error(ErrorCode::InvalidArgument, "affine linear part is singular");
  }
}

AffineTransform::AffineTransform(const RigidTransform& rigid)
    : linear_(rigid.rotation()),
      translation_(rigid.translation()),
      from_(rigid.from()),
      to_(rigid.to()) {}

AffineTransform AffineTransform::from_matrix(const Mat4& m, FrameId from, FrameId to) {
  return {m.topLeftCorner<3, 3>(), m.topRightCorner<3, 1>(), from, to};
}

Mat4 AffineTransform::matrix() const {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = linear_;
  m.topRightCorner<3, 1>() = translation_;
  return m;
}

// --- algebra --------------------------------------------------------------

RigidTransform compose(const RigidTransform& a, const RigidTransform& b) {
  require_chain(a.from(), b.to());
  return {a.rotation() * b.rotation(), a.rotation() * b.translation() + a.translation(),
          b.from(), a.to()};
}

AffineTransform compose(const AffineTransform& a, const AffineTransform& b) {
  require_chain(a.from(), b.to());
  return {a.linear() * b.linear(), a.linear() * b.translation() + a.translation(),
          b.from(), a.to()};
}

AffineTransform compose(const RigidTransform& a, const AffineTransform& b) {
  return compose(AffineTransform(a), b);
}

AffineTransform compose(const AffineTransform& a, const RigidTransform& b) {
  return compose(a, AffineTransform(b));
}

RigidTransform invert(const RigidTransform& t) {
  const Mat3 rt = t.rotation().transpose();
  return {rt, -(rt * t.translation()), t.to(), t.from()};
}

AffineTransform invert(const AffineTransform& t) {
  const Mat3 inv = t.linear().inverse();
  return {inv, -(inv * t.translation()), t.to(), t.from()};
}

Vec3 euler_xyz(const Mat3& r) {
  const double sy = std::clamp(-r(2, 0), -1.0, 1.0);
  const double ry = std::asin(sy);
  double rx = 0.0;
  double rz = 0.0;
  if (std::abs(sy) < 1.0 - 1e-12) {
    rx = std::atan2(r(2, 1), r(2, 2));
    rz = std::atan2(r(1, 0), r(0, 0));
  } else {
    // Gimbal lock: only rx - rz (or rx + rz) is defined; put it all in rx.
    rx = std::atan2(-r(1, 2), r(1, 1));
  }
  return {rx, ry, rz};
}

double rotation_angle_norm(const Mat3& rotation) {
  return rad2deg(euler_xyz(rotation).norm());
}

double rotation_angle_norm(const RigidTransform& t) {
  return rotation_angle_norm(t.rotation());
}

double rotation_angle_deg(const Mat3& rotation) {
  // atan2 keeps full precision near zero, where acos of the trace does not.
  const Vec3 axis(rotation(2, 1) - rotation(1, 2), rotation(0, 2) - rotation(2, 0),
                  rotation(1, 0) - rotation(0, 1));
  return rad2deg(std::atan2(0.5 * axis.norm(), 0.5 * (rotation.trace() - 1.0)));
}

Mat3 rot_x(double a) {
  return Eigen::AngleAxisd(a, Vec3::UnitX()).toRotationMatrix();
}
Mat3 rot_y(double a) {
  return Eigen::AngleAxisd(a, Vec3::UnitY()).toRotationMatrix();
}
Mat3 rot_z(double a) {
  return Eigen::AngleAxisd(a, Vec3::UnitZ()).toRotationMatrix();
}

Mat3 rotation_from_vector(const Vec3& v) {
  const double angle = v.norm();
  if (angle < 1e-15) return Mat3::Identity();
  return Eigen::AngleAxisd(angle, v / angle).toRotationMatrix();
}

Vec3 rotation_to_vector(const Mat3& rotation) {
  const Eigen::AngleAxisd aa(rotation);
  return aa.axis() * aa.angle();
}

Mat3 skew(const Vec3& v) {
  Mat3 s;
  s << 0.0, -v.z(), v.y(), v.z(), 0.0, -v.x(), -v.y(), v.x(), 0.0;
  return s;
}

// --- text form ------------------------------------------------------------

void write_transform(std::ostream& os, const RigidTransform& t) {
  os << "transform " << frame_name(t.from()) << ' ' << frame_name(t.to()) << '\n';
  write_matrix(os, t.matrix());
}

void write_transform(std::ostream& os, const AffineTransform& t) {
  os << "transform " << frame_name(t.from()) << ' ' << frame_name(t.to()) << '\n';
  write_matrix(os, t.matrix());
}

std::string to_text(const RigidTransform& t) {
  std::ostringstream os;
  write_transform(os, t);
  return os.str();
}

RigidTransform read_rigid(std::istream& is) {
  auto [m, from, to] = read_block(is);
  return RigidTransform::from_matrix(m, from, to);
}

AffineTransform read_affine(std::istream& is) {
  auto [m, from, to] = read_block(is);
  return AffineTransform::from_matrix(m, from, to);
}

}  // namespace mrus
