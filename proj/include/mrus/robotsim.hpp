#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "mrus/trajectory.hpp"

namespace mrus {

struct StiffnessParams {
  double k_scan = 300.0;      // N/m along the probe axis
  double k_lateral = 2000.0;  // N/m across it
  double damping = 0.7;       // normalized d_c
  double f_desired = 5.0;     // N
  double f_abort = 25.0;      // N
  double mass = 1.0;          // kg, point model

  void validate() const;
};

/// Penetration of a point into a rigid-body shape.
struct Penetration {
  double depth = 0.0;  // mm, > 0 when inside
  Vec3 normal = Vec3::UnitZ();  // outward unit normal at the contact
};

class ContactShape {
 public:
  virtual ~ContactShape() = default;
  virtual std::optional<Penetration> probe(const Vec3& p) const = 0;
};

/// Half-space behind a plane through `point` with outward `normal`.
class PlaneContact : public ContactShape {
 public:
  PlaneContact(const Vec3& point, const Vec3& normal);
  std::optional<Penetration> probe(const Vec3& p) const override;

 private:
  Vec3 point_, normal_;
};

/// Solid ellipsoid; depth is the first-order distance f/|∇f|.
class EllipsoidContact : public ContactShape {
 public:
  EllipsoidContact(const RigidTransform& pose, const Vec3& radii);
  std::optional<Penetration> probe(const Vec3& p) const override;

 private:
  RigidTransform pose_, inverse_;
  Vec3 radii_;
};

/// Surface cloud with outward normals; inside when behind the nearest
/// point's tangent plane.
class CloudContact : public ContactShape {
 public:
  explicit CloudContact(const SurfaceCloud& surface);
  ~CloudContact() override;
  std::optional<Penetration> probe(const Vec3& p) const override;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Simulated tissue: shapes with their spring stiffness (World frame).
struct ContactModel {
  struct Body {
    std::shared_ptr<const ContactShape> shape;
    double stiffness = 5000.0;  // N/m
  };
  std::vector<Body> bodies;

  void add(std::shared_ptr<const ContactShape> shape, double stiffness = 5000.0);
  /// Summed spring reaction (N) on a probe tip at p (mm).
  Vec3 force(const Vec3& p) const;
  void validate() const;
};

struct ProbeState {
  Vec3 position = Vec3::Zero();  // mm
  Vec3 velocity = Vec3::Zero();  // mm/s
  Mat3 orientation = Mat3::Identity();  // Tool -> World rotation

  RigidTransform pose() const { return {orientation, position, FrameId::Tool, FrameId::World}; }
};

struct Setpoint {
  Vec3 position = Vec3::Zero();
  Mat3 orientation = Mat3::Identity();  // probe axis is column 2
};

struct StepResult {
  ProbeState state;
  Vec3 commanded_force = Vec3::Zero();  // virtual spring-damper, N
  Vec3 contact_force = Vec3::Zero();    // skin reaction, N
};

/// One semi-implicit Euler step of the Cartesian stiffness controller. The
/// orientation servo is ideal: the probe takes the setpoint orientation.
StepResult step_controller(const ProbeState& state, const Setpoint& setpoint,
                           const StiffnessParams& params, const ContactModel& contact, double dt);

struct TrackedFrame {
  double timestamp = 0.0;  // s
  RigidTransform probe_pose = RigidTransform::identity(FrameId::Tool, FrameId::World);
  double contact_force = 0.0;  // N, magnitude
  int segment = -1;  // target pose index; -1 during the approach
};

struct SweepOptions {
  double rate_hz = 20.0;
  double dt = 1e-3;
  double speed = 5.0;              // mm/s along the path
  double approach_height = 20.0;   // mm above the first pose
  double force_gain = 2.0;         // 1/s, integral force adaptation
  double position_tolerance = 1.0; // mm
  double orientation_tolerance_deg = 1.0;
  double settle_band = 0.25;       // N
  double segment_timeout = 20.0;   // s

  void validate() const;
};

struct SweepResult {
  std::vector<TrackedFrame> frames;
  bool aborted = false;
  long abort_step = -1;
  double duration = 0.0;
};

/// Drives the probe through `poses` under stiffness control. Throws Timeout
/// when a segment target is not reached in time.
SweepResult run_sweep(std::span<const ScanPose> poses, const StiffnessParams& params,
                      const ContactModel& contact, const SweepOptions& options = {});

void write_sweep(const std::filesystem::path& path, const SweepResult& sweep,
                 const StiffnessParams& params, const SweepOptions& options);
SweepResult read_sweep(const std::filesystem::path& path);

}  // namespace mrus
