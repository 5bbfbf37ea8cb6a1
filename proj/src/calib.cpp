#include "mrus/calib.hpp"

#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

namespace mrus {

void UsImageGeometry::validate() const {
  if (!(s_x > 0.0) || !(s_y > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "US pixel spacing must be positive");
  }
  if (width <= 0 || height <= 0) {
    throw Error(ErrorCode::InvalidArgument, "US image dimensions must be positive");
  }
  if (!std::isfinite(t_x) || !std::isfinite(t_y)) {
    throw Error(ErrorCode::InvalidArgument, "US apex offset must be finite");
  }
}

AffineTransform us_image_transform(const UsImageGeometry& g) {
  g.validate();
  Mat3 linear = Vec3(g.s_x, g.s_y, 1.0).asDiagonal();
  return AffineTransform(linear, Vec3(g.s_x * g.t_x, g.s_y * g.t_y, 0.0), FrameId::US,
                         FrameId::Tool);
}

namespace {

void require(const RigidTransform& t, FrameId from, FrameId to, const char* what) {
  if (t.from() != from || t.to() != to) {
    throw Error(ErrorCode::FrameMismatch,
                std::string(what) + " must map " + std::string(frame_name(from)) + " -> " +
                    std::string(frame_name(to)) + ", got " + std::string(frame_name(t.from())) +
                    " -> " + std::string(frame_name(t.to())));
  }
}

}  // namespace

CalibrationState::CalibrationState()
    : CalibrationState(RigidTransform::identity(FrameId::Tool, FrameId::EndEffector),
                       UsImageGeometry{1.0, 1.0, 0.0, 0.0, 1, 1},
                       RigidTransform::identity(FrameId::Tool, FrameId::Tool),
                       RigidTransform::identity(FrameId::Camera, FrameId::World),
                       RigidTransform::identity(FrameId::MRI, FrameId::Camera)) {}

CalibrationState::CalibrationState(const RigidTransform& tool_to_end_effector,
                                   const UsImageGeometry& geometry,
                                   const RigidTransform& image_mount,
                                   const RigidTransform& camera_to_world,
                                   const RigidTransform& mri_to_camera)
    : tool_to_end_effector_(tool_to_end_effector),
      us_geometry_(geometry),
      image_mount_(image_mount),
      us_to_tool_(compose(image_mount, us_image_transform(geometry))),
      camera_to_world_(camera_to_world),
      mri_to_camera_(mri_to_camera),
      patient_correction_(RigidTransform::identity(FrameId::MRI, FrameId::Patient)) {
  require(tool_to_end_effector, FrameId::Tool, FrameId::EndEffector, "tool mount");
  require(image_mount, FrameId::Tool, FrameId::Tool, "image mount");
  require(camera_to_world, FrameId::Camera, FrameId::World, "camera pose");
  require(mri_to_camera, FrameId::MRI, FrameId::Camera, "surface match");
}

CalibrationState CalibrationState::with_tool(const RigidTransform& tool_to_end_effector) const {
  require(tool_to_end_effector, FrameId::Tool, FrameId::EndEffector, "tool mount");
  CalibrationState next = *this;
  next.tool_to_end_effector_ = tool_to_end_effector;
  return next;
}

CalibrationState CalibrationState::with_correction(const RigidTransform& correction) const {
  require(correction, FrameId::Patient, FrameId::Patient, "patient correction");
  CalibrationState next = *this;
  next.patient_correction_ = compose(correction, patient_correction_);
  next.version_ = version_ + 1;
  return next;
}

namespace {

bool same(const RigidTransform& a, const RigidTransform& b) {
  return a.from() == b.from() && a.to() == b.to() && a.matrix() == b.matrix();
}

}  // namespace

bool operator==(const CalibrationState& a, const CalibrationState& b) {
  const auto& ga = a.us_geometry_;
  const auto& gb = b.us_geometry_;
  return a.version_ == b.version_ && same(a.tool_to_end_effector_, b.tool_to_end_effector_) &&
         ga.s_x == gb.s_x && ga.s_y == gb.s_y && ga.t_x == gb.t_x && ga.t_y == gb.t_y &&
         ga.width == gb.width && ga.height == gb.height && same(a.image_mount_, b.image_mount_) &&
         same(a.camera_to_world_, b.camera_to_world_) &&
         same(a.mri_to_camera_, b.mri_to_camera_) &&
         same(a.patient_correction_, b.patient_correction_);
}

AffineTransform chain_us_to_world(const CalibrationState& s, const RigidTransform& robot_pose) {
  require(robot_pose, FrameId::EndEffector, FrameId::World, "robot pose");
  return compose(compose(robot_pose, s.tool_to_end_effector()), s.us_to_tool());
}

RigidTransform chain_mri_to_world(const CalibrationState& s) {
  return compose(s.camera_to_world(), s.mri_to_camera());
}

RigidTransform chain_world_to_mri(const CalibrationState& s) {
  return compose(invert(s.mri_to_camera()), invert(s.camera_to_world()));
}

RigidTransform chain_patient_to_world(const CalibrationState& s) {
  return compose(chain_mri_to_world(s), invert(s.patient_correction()));
}

AffineTransform chain_us_to_patient(const CalibrationState& s, const RigidTransform& robot_pose) {
  return compose(compose(s.patient_correction(), chain_world_to_mri(s)),
                 chain_us_to_world(s, robot_pose));
}

RigidTransform end_effector_for_tool(const CalibrationState& s, const RigidTransform& tool_pose) {
  require(tool_pose, FrameId::Tool, FrameId::World, "tool pose");
  return compose(tool_pose, invert(s.tool_to_end_effector()));
}

// --- calibration file -------------------------------------------------------

void write_calibration(const std::filesystem::path& path, const CalibrationState& s) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::Io, "cannot write calibration file " + path.string());
  const auto& g = s.us_geometry();
  os.precision(17);
  os << "mrus-calibration 1\n";
  os << "version " << s.version() << "\n";
  os << "us_geometry " << g.s_x << ' ' << g.s_y << ' ' << g.t_x << ' ' << g.t_y << ' ' << g.width
     << ' ' << g.height << "\n";
  os << "tool_to_end_effector\n";
  write_transform(os, s.tool_to_end_effector());
  os << "image_mount\n";
  write_transform(os, s.image_mount());
  os << "us_to_tool\n";
  write_transform(os, s.us_to_tool());
  os << "camera_to_world\n";
  write_transform(os, s.camera_to_world());
  os << "mri_to_camera\n";
  write_transform(os, s.mri_to_camera());
  os << "patient_correction\n";
  write_transform(os, s.patient_correction());
  if (!os) throw Error(ErrorCode::Io, "failed writing calibration file " + path.string());
}

namespace {

void expect_word(std::istream& is, const std::string& word, const std::string& path) {
  std::string got;
  if (!(is >> got) || got != word) {
    throw Error(ErrorCode::Malformed,
                "calibration file " + path + ": expected '" + word + "', got '" + got + "'");
  }
}

}  // namespace

CalibrationState read_calibration(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::Io, "cannot open calibration file " + path.string());
  const std::string p = path.string();
  expect_word(is, "mrus-calibration", p);
  int format = 0;
  is >> format;
  if (format != 1) throw Error(ErrorCode::Malformed, "unsupported calibration format in " + p);
  expect_word(is, "version", p);
  int version = -1;
  is >> version;
  expect_word(is, "us_geometry", p);
  UsImageGeometry g;
  is >> g.s_x >> g.s_y >> g.t_x >> g.t_y >> g.width >> g.height;
  if (!is || version < 0) throw Error(ErrorCode::Malformed, "bad calibration header in " + p);
  expect_word(is, "tool_to_end_effector", p);
  const RigidTransform tool = read_rigid(is);
  expect_word(is, "image_mount", p);
  const RigidTransform mount = read_rigid(is);
  expect_word(is, "us_to_tool", p);
  read_affine(is);  // derived; rebuilt from geometry and mount
  expect_word(is, "camera_to_world", p);
  const RigidTransform cam = read_rigid(is);
  expect_word(is, "mri_to_camera", p);
  const RigidTransform mri = read_rigid(is);
  expect_word(is, "patient_correction", p);
  const RigidTransform corr = read_rigid(is);
  require(corr, FrameId::MRI, FrameId::Patient, "patient correction");

  CalibrationState s(tool, g, mount, cam, mri);
  s.patient_correction_ = corr;
  s.version_ = version;
  return s;
}

// --- hand-eye -----------------------------------------------------------------

namespace {

struct Motion {
  Mat3 ra, rb;
  Vec3 ta, tb;
};

/// 2·sin(θ/2)·axis of a rotation.
Vec3 modified_rodrigues(const Mat3& r) {
  const Vec3 v = rotation_to_vector(r);
  const double theta = v.norm();
  if (theta < 1e-15) return Vec3::Zero();
  return 2.0 * std::sin(0.5 * theta) * v / theta;
}

}  // namespace

HandEyeResult hand_eye_calibrate(std::span<const PosePair> pairs) {
  if (pairs.size() < 3) {
    throw Error(ErrorCode::InsufficientData,
                "hand-eye calibration needs >= 3 pose pairs, got " + std::to_string(pairs.size()));
  }
  for (const auto& p : pairs) {
    require(p.robot_pose, FrameId::EndEffector, FrameId::World, "robot pose");
    require(p.marker_pose, FrameId::Marker, FrameId::Camera, "marker pose");
    if (!p.robot_pose.matrix().allFinite() || !p.marker_pose.matrix().allFinite()) {
      throw Error(ErrorCode::InvalidArgument, "pose pair contains non-finite values");
    }
  }

  // A = E_i E_j^-1 (World), B = C_i C_j^-1 (Camera); A X = X B with X = T_W<-C.
  std::vector<Motion> motions;
  std::vector<Vec3> axes;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    for (std::size_t j = i + 1; j < pairs.size(); ++j) {
      const RigidTransform a = compose(pairs[i].robot_pose, invert(pairs[j].robot_pose));
      const RigidTransform b = compose(pairs[i].marker_pose, invert(pairs[j].marker_pose));
      motions.push_back({a.rotation(), b.rotation(), a.translation(), b.translation()});
      const Vec3 v = rotation_to_vector(a.rotation());
      if (v.norm() > deg2rad(1.0)) axes.push_back(v.normalized());
    }
  }
  double widest = 0.0;
  for (std::size_t i = 0; i < axes.size(); ++i) {
    for (std::size_t j = i + 1; j < axes.size(); ++j) {
      const double c = std::min(1.0, std::abs(axes[i].dot(axes[j])));
      widest = std::max(widest, std::acos(c));
    }
  }
  if (rad2deg(widest) <= 5.0) {
    throw Error(ErrorCode::Degenerate,
                "hand-eye motions are degenerate: rotation axes span at most " +
                    std::to_string(rad2deg(widest)) + " deg");
  }

  // Rough rotation from axis alignment; the linear system is then solved for
  // the residual rotation, which keeps it away from the 180° singularity.
  Mat3 cross = Mat3::Zero();
  for (const auto& m : motions) {
    cross += modified_rodrigues(m.ra) * modified_rodrigues(m.rb).transpose();
  }
  const Mat3 r0 = nearest_rotation(cross);

  const int n = static_cast<int>(motions.size());
  Eigen::MatrixXd lhs(3 * n, 3);
  Eigen::VectorXd rhs(3 * n);
  for (int k = 0; k < n; ++k) {
    const Vec3 pa = modified_rodrigues(motions[k].ra);
    const Vec3 pb = r0 * modified_rodrigues(motions[k].rb);
    lhs.block<3, 3>(3 * k, 0) = skew(pa + pb);
    rhs.segment<3>(3 * k) = pb - pa;
  }
  const Vec3 r = lhs.colPivHouseholderQr().solve(rhs);
  const Mat3 s = skew(r);
  const Mat3 residual_rot = (Mat3::Identity() - s).inverse() * (Mat3::Identity() + s);
  const Mat3 rx = nearest_rotation(residual_rot * r0);

  Eigen::MatrixXd lt(3 * n, 3);
  Eigen::VectorXd bt(3 * n);
  for (int k = 0; k < n; ++k) {
    lt.block<3, 3>(3 * k, 0) = motions[k].ra - Mat3::Identity();
    bt.segment<3>(3 * k) = rx * motions[k].tb - motions[k].ta;
  }
  const Vec3 tx = lt.colPivHouseholderQr().solve(bt);

  HandEyeResult out;
  out.camera_to_world = RigidTransform(rx, tx, FrameId::Camera, FrameId::World);
  double rot2 = 0.0, trans2 = 0.0;
  for (const auto& m : motions) {
    const Mat3 lhs_r = m.ra * rx;
    const Mat3 rhs_r = rx * m.rb;
    rot2 += std::pow(rotation_angle_deg(lhs_r.transpose() * rhs_r), 2);
    trans2 += ((m.ra * tx + m.ta) - (rx * m.tb + tx)).squaredNorm();
  }
  out.rotation_residual_deg = std::sqrt(rot2 / n);
  out.translation_residual_mm = std::sqrt(trans2 / n);
  out.motions = n;
  return out;
}

RigidTransform random_perturbation(double translation_mm, double angle_deg, FrameId frame,
                                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> unit(0.0, 1.0);
  auto direction = [&] {
    Vec3 v(unit(rng), unit(rng), unit(rng));
    while (v.norm() < 1e-9) v = Vec3(unit(rng), unit(rng), unit(rng));
    return Vec3(v.normalized());
  };
  const Vec3 axis = direction();
  const Vec3 dir = direction();
  return RigidTransform(rotation_from_vector(axis * deg2rad(angle_deg)), dir * translation_mm,
                        frame, frame);
}

std::vector<PosePair> simulate_pose_pairs(const RigidTransform& camera_to_world,
                                          const RigidTransform& marker_on_flange,
                                          const PoseSimulation& sim, std::uint64_t seed) {
  require(camera_to_world, FrameId::Camera, FrameId::World, "camera pose");
  require(marker_on_flange, FrameId::Marker, FrameId::EndEffector, "marker mount");
  if (sim.count < 0 || sim.translation_noise_mm < 0.0 || sim.rotation_noise_deg < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "pose simulation parameters out of range");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> box(-sim.workspace_half_extent, sim.workspace_half_extent);
  std::uniform_real_distribution<double> tilt(-deg2rad(sim.max_tilt_deg), deg2rad(sim.max_tilt_deg));
  std::uniform_real_distribution<double> yaw(-M_PI, M_PI);
  std::normal_distribution<double> unit(0.0, 1.0);

  const RigidTransform world_to_camera = invert(camera_to_world);
  std::vector<PosePair> out;
  out.reserve(static_cast<std::size_t>(sim.count));
  for (int k = 0; k < sim.count; ++k) {
    // Flange pointing down (z toward -World z) with random tilt and yaw.
    const Mat3 rot = rot_z(yaw(rng)) * rot_y(tilt(rng)) * rot_x(M_PI + tilt(rng));
    const Vec3 pos = sim.workspace_center + Vec3(box(rng), box(rng), box(rng));
    const RigidTransform robot(rot, pos, FrameId::EndEffector, FrameId::World);
    const RigidTransform truth = compose(compose(world_to_camera, robot), marker_on_flange);

    Vec3 axis(unit(rng), unit(rng), unit(rng));
    if (axis.norm() < 1e-12) axis = Vec3::UnitX();
    const double angle = deg2rad(sim.rotation_noise_deg) * unit(rng);
    const Vec3 dt = sim.translation_noise_mm * Vec3(unit(rng), unit(rng), unit(rng));
    const RigidTransform noise(rotation_from_vector(axis.normalized() * angle), dt,
                               FrameId::Marker, FrameId::Marker);
    out.push_back({robot, compose(truth, noise)});
  }
  return out;
}

}  // namespace mrus
