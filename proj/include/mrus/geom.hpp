#pragma once

#include <Eigen/Dense>

#include <iosfwd>
#include <string>
#include <string_view>

#include "mrus/error.hpp"

namespace mrus {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Coordinate frames appearing in the calibration chain.
enum class FrameId {
  MRI,
  Camera,
  Depth,
  World,
  EndEffector,
  Tool,
  US,
  Patient,
  Marker,
};

std::string_view frame_name(FrameId frame);
FrameId parse_frame(std::string_view name);

/// Orthonormality residual max|RᵀR - I| above which rotations are re-projected.
inline constexpr double kOrthoTolerance = 1e-9;

/// Rigid map from `from()` coordinates into `to()` coordinates (mm).
class RigidTransform {
 public:
  /// Identity World -> World.
  RigidTransform();
  /// Throws InvalidArgument if `rotation` is far from SO(3); small drift is
  /// projected back onto the nearest rotation.
  RigidTransform(const Mat3& rotation, const Vec3& translation, FrameId from,
                 FrameId to);

  static RigidTransform identity(FrameId from, FrameId to);
  static RigidTransform translation(const Vec3& t, FrameId from, FrameId to);
  static RigidTransform from_matrix(const Mat4& m, FrameId from, FrameId to);

  const Mat3& rotation() const { return rotation_; }
  const Vec3& translation() const { return translation_; }
  FrameId from() const { return from_; }
  FrameId to() const { return to_; }

  Mat4 matrix() const;
  Vec3 apply(const Vec3& p) const { return rotation_ * p + translation_; }
  Vec3 apply_vector(const Vec3& v) const { return rotation_ * v; }

  /// Same numbers, different frame labels.
  RigidTransform relabeled(FrameId from, FrameId to) const;

 private:
  Mat3 rotation_;
  Vec3 translation_;
  FrameId from_;
  FrameId to_;
};

/// General invertible affine map (used for scaled image geometry and the
/// affine registration stage).
class AffineTransform {
 public:
  AffineTransform();
  /// Throws InvalidArgument if |det(linear)| <= 1e-12.
  AffineTransform(const Mat3& linear, const Vec3& translation, FrameId from,
                  FrameId to);
  explicit AffineTransform(const RigidTransform& rigid);

  static AffineTransform from_matrix(const Mat4& m, FrameId from, FrameId to);

  const Mat3& linear() const { return linear_; }
  const Vec3& translation() const { return translation_; }
  FrameId from() const { return from_; }
  FrameId to() const { return to_; }

  Mat4 matrix() const;
  Vec3 apply(const Vec3& p) const { return linear_ * p + translation_; }

 private:
  Mat3 linear_;
  Vec3 translation_;
  FrameId from_;
  FrameId to_;
};

/// result(x) == a(b(x)); requires a.from() == b.to().
RigidTransform compose(const RigidTransform& a, const RigidTransform& b);
AffineTransform compose(const AffineTransform& a, const AffineTransform& b);
AffineTransform compose(const RigidTransform& a, const AffineTransform& b);
AffineTransform compose(const AffineTransform& a, const RigidTransform& b);

RigidTransform invert(const RigidTransform& t);
AffineTransform invert(const AffineTransform& t);

inline Vec3 apply(const RigidTransform& t, const Vec3& p) { return t.apply(p); }
inline Vec3 apply(const AffineTransform& t, const Vec3& p) { return t.apply(p); }

/// Fixed-axis XYZ Euler angles (rx, ry, rz) in radians with R = Rz·Ry·Rx.
Vec3 euler_xyz(const Mat3& rotation);

/// sqrt(rx² + ry² + rz²) of the fixed-axis XYZ decomposition, degrees.
double rotation_angle_norm(const RigidTransform& t);
double rotation_angle_norm(const Mat3& rotation);

/// Geodesic rotation angle of R in degrees.
double rotation_angle_deg(const Mat3& rotation);

/// Nearest rotation in the Frobenius sense (polar decomposition).
Mat3 nearest_rotation(const Mat3& m);

Mat3 rot_x(double radians);
Mat3 rot_y(double radians);
Mat3 rot_z(double radians);
/// Rotation about `axis_angle` (direction) by its norm (radians).
Mat3 rotation_from_vector(const Vec3& axis_angle);
Vec3 rotation_to_vector(const Mat3& rotation);

Mat3 skew(const Vec3& v);

inline double deg2rad(double deg) { return deg * M_PI / 180.0; }
inline double rad2deg(double rad) { return rad * 180.0 / M_PI; }

/// Text form: "transform <from> <to>" then four rows of the 4x4 matrix,
/// 12 significant digits.
void write_transform(std::ostream& os, const RigidTransform& t);
void write_transform(std::ostream& os, const AffineTransform& t);
std::string to_text(const RigidTransform& t);
/// Reads one transform block; throws Malformed on bad input.
RigidTransform read_rigid(std::istream& is);
AffineTransform read_affine(std::istream& is);

}  // namespace mrus
