#pragma once

#include <filesystem>
#include <span>
#include <vector>

#include "mrus/calib.hpp"
#include "mrus/volume.hpp"

namespace mrus {

/// Straight scan line in image (MRI) coordinates.
struct TrajectoryPlan {
  Vec3 start = Vec3::Zero();  // P_s, mm
  Vec3 end = Vec3::Zero();    // P_e, mm
  double sample_spacing = 20.0;

  Vec3 direction() const { return end - start; }  // d_t
  /// Throws Degenerate when |d_t| <= sample_spacing (which covers P_s == P_e).
  void validate() const;
};

struct ScanPose {
  Vec3 surface_point = Vec3::Zero();  // P^k, World
  Vec3 normal = Vec3::UnitZ();        // n_k, outward unit normal
  RigidTransform tool_pose = RigidTransform::identity(FrameId::Tool, FrameId::World);
};

/// Equidistant samples Q^i along the plan, endpoint appended when it lies at
/// least spacing/2 beyond the last regular sample.
std::vector<Vec3> sample_line(const TrajectoryPlan& plan);

/// Nearest surface point and normal per sample; tool z = -n, tool x = travel
/// direction projected onto the tangent plane. Consecutive samples hitting
/// the same surface point collapse to the first one.
std::vector<ScanPose> project_to_surface(std::span<const Vec3> samples, const SurfaceCloud& surface,
                                         const Vec3& travel);

/// Samples mapped through the patient chain into World and projected onto
/// the camera-frame surface mapped into World.
std::vector<ScanPose> plan_in_world(const TrajectoryPlan& plan, const CalibrationState& state,
                                    const SurfaceCloud& camera_surface);

void write_plan(const std::filesystem::path& path, const TrajectoryPlan& plan);
TrajectoryPlan read_plan(const std::filesystem::path& path);
void write_poses(const std::filesystem::path& path, std::span<const ScanPose> poses);
std::vector<ScanPose> read_poses(const std::filesystem::path& path);

}  // namespace mrus
