#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mrus/geom.hpp"

namespace mrus {

/// Ultrasound image scaling and apex offset. Pixel (u, v) maps to
/// (s_x·(u + t_x), s_y·(v + t_y), 0) in the tool frame.
struct UsImageGeometry {
  double s_x = 0.5;  // mm/px
  double s_y = 0.5;  // mm/px
  double t_x = -40.0;  // px, apex to image origin
  double t_y = 0.0;    // px
  int width = 80;
  int height = 100;

  void validate() const;
};

/// The US -> Tool image matrix.
AffineTransform us_image_transform(const UsImageGeometry& g);

/// Complete transformation chain. Version 0 is the initial calibration; each
/// closed-loop update produces version + 1 and touches only the patient
/// correction.
class CalibrationState;
CalibrationState read_calibration(const std::filesystem::path& path);

class CalibrationState {
 public:
  CalibrationState();
  CalibrationState(const RigidTransform& tool_to_end_effector, const UsImageGeometry& geometry,
                   const RigidTransform& image_mount, const RigidTransform& camera_to_world,
                   const RigidTransform& mri_to_camera);

  /// T_E<-T, from the probe mount CAD.
  const RigidTransform& tool_to_end_effector() const { return tool_to_end_effector_; }
  const UsImageGeometry& us_geometry() const { return us_geometry_; }
  /// Fixed rotation placing the image plane in the tool frame (Tool -> Tool).
  const RigidTransform& image_mount() const { return image_mount_; }
  /// T_T<-US = image_mount · us_image_transform(geometry).
  const AffineTransform& us_to_tool() const { return us_to_tool_; }
  /// T_W<-C, from hand-eye calibration.
  const RigidTransform& camera_to_world() const { return camera_to_world_; }
  /// T_C<-MRI, from surface matching.
  const RigidTransform& mri_to_camera() const { return mri_to_camera_; }
  /// T_P<-MRI, the registration refinement (identity at version 0).
  const RigidTransform& patient_correction() const { return patient_correction_; }
  int version() const { return version_; }

  /// Replaces the tool mount (probe exchange); everything else is kept.
  CalibrationState with_tool(const RigidTransform& tool_to_end_effector) const;
  /// Left-composes `correction` (Patient -> Patient) onto the patient
  /// correction and bumps the version.
  CalibrationState with_correction(const RigidTransform& correction) const;

  friend bool operator==(const CalibrationState& a, const CalibrationState& b);
  friend CalibrationState read_calibration(const std::filesystem::path& path);

 private:
  RigidTransform tool_to_end_effector_;
  UsImageGeometry us_geometry_;
  RigidTransform image_mount_;
  AffineTransform us_to_tool_;
  RigidTransform camera_to_world_;
  RigidTransform mri_to_camera_;
  RigidTransform patient_correction_;
  int version_ = 0;
};

/// T_W<-US = T_W<-E · T_E<-T · T_T<-US for a tracked end-effector pose.
AffineTransform chain_us_to_world(const CalibrationState& s, const RigidTransform& robot_pose);
/// T_W<-MRI = (T_MRI<-C · T_C<-W)^-1.
RigidTransform chain_mri_to_world(const CalibrationState& s);
RigidTransform chain_world_to_mri(const CalibrationState& s);
/// Refined image placement: T_W<-P = T_W<-MRI · (T_P<-MRI)^-1.
RigidTransform chain_patient_to_world(const CalibrationState& s);
/// T_P<-US = T_P<-MRI · T_MRI<-C · T_C<-W · T_W<-US.
AffineTransform chain_us_to_patient(const CalibrationState& s, const RigidTransform& robot_pose);

/// End-effector pose commanded so that the tool lands on `tool_pose`.
RigidTransform end_effector_for_tool(const CalibrationState& s, const RigidTransform& tool_pose);

void write_calibration(const std::filesystem::path& path, const CalibrationState& s);
CalibrationState read_calibration(const std::filesystem::path& path);

/// One hand-eye sample: flange pose from forward kinematics and the marker
/// pose observed by the camera.
struct PosePair {
  RigidTransform robot_pose;   // EndEffector -> World
  RigidTransform marker_pose;  // Marker -> Camera
};

struct HandEyeResult {
  RigidTransform camera_to_world;
  double rotation_residual_deg = 0.0;    // RMS over motion pairs
  double translation_residual_mm = 0.0;  // RMS over motion pairs
  int motions = 0;
};

/// Eye-on-base AX = XB: rotation from the Tsai-Lenz linear system, then
/// translation by linear least squares. Throws InsufficientData (< 3 pairs)
/// or Degenerate (all motion axes within 5°).
HandEyeResult hand_eye_calibrate(std::span<const PosePair> pairs);

struct PoseSimulation {
  int count = 13;
  double translation_noise_mm = 0.0;  // per-axis sigma
  double rotation_noise_deg = 0.0;    // angle sigma about a random axis
  Vec3 workspace_center{450.0, 0.0, 250.0};
  double workspace_half_extent = 150.0;
  double max_tilt_deg = 35.0;
};

/// Random flange poses with simulated marker observations (truth ∘ noise).
std::vector<PosePair> simulate_pose_pairs(const RigidTransform& camera_to_world,
                                          const RigidTransform& marker_on_flange,
                                          const PoseSimulation& sim, std::uint64_t seed);

/// Small random rigid perturbation: rotation `angle_deg` about a uniformly
/// random axis and translation of `translation_mm` along a random direction.
RigidTransform random_perturbation(double translation_mm, double angle_deg, FrameId frame,
                                   std::uint64_t seed);

}  // namespace mrus
