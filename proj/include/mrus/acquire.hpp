#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "mrus/calib.hpp"
#include "mrus/robotsim.hpp"
#include "mrus/volume.hpp"

namespace mrus {

struct UsSimParams {
  double gain = 1.0;      // echo = gain·tissue + offset, gain > 0
  double offset = 0.0;
  double speckle = 0.0;   // multiplicative uniform noise amplitude in [0, 1)
  double attenuation = 0.0;  // 1/mm, applied as exp(-attenuation·depth)
  bool fan_mask = false;  // zero pixels outside the sector spanned from the apex
  double fan_half_angle_deg = 35.0;
  std::uint64_t seed = 1;

  void validate() const;
};

struct UsFrame {
  std::vector<float> image;  // row-major, width x height
  UsImageGeometry geometry;
  AffineTransform pose = AffineTransform(Mat3::Identity(), Vec3::Zero(), FrameId::US, FrameId::World);
  double timestamp = 0.0;

  float at(int u, int v) const { return image[static_cast<std::size_t>(v) * geometry.width + u]; }
  /// World position of pixel (u, v).
  Vec3 pixel_position(double u, double v) const { return pose.apply(Vec3(u, v, 0.0)); }
};

/// Slices the echogenicity volume at one tracked probe pose. `tissue_to_world`
/// is the true placement of the tissue volume; the frame pose follows the
/// calibrated chain of `state`.
UsFrame acquire_frame(const ScalarVolume& tissue, const RigidTransform& tissue_to_world,
                      const RigidTransform& probe_pose, const CalibrationState& state,
                      const UsSimParams& params, std::uint64_t frame_index = 0);

/// One frame per tracked pose, timestamps copied.
std::vector<UsFrame> acquire_sweep(std::span<const TrackedFrame> tracked, const ScalarVolume& tissue,
                                   const RigidTransform& tissue_to_world,
                                   const CalibrationState& state, const UsSimParams& params);

/// Directory with `index.txt` and one float32 raw image per frame.
void write_bundle(const std::filesystem::path& dir, std::span<const UsFrame> frames);
std::vector<UsFrame> read_bundle(const std::filesystem::path& dir);

}  // namespace mrus
