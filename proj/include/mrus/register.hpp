#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>

#include "mrus/calib.hpp"
#include "mrus/compound.hpp"
#include "mrus/volume.hpp"

namespace mrus {

struct Lc2Params {
  int patch_radius = 3;             // voxels; 7³ neighbourhoods
  double variance_floor = 1e-6;     // relative to the squared US intensity range
  double min_overlap = 0.05;        // fraction of US voxels that must map into the MRI
  int patch_stride = 1;             // patch centres every `stride` voxels
  double coarse_spacing = 2.0;      // mm; <= US spacing disables the coarse level
  double max_translation = 20.0;    // mm
  double max_rotation_deg = 10.0;
  double max_scale = 0.10;          // affine stage, fraction
  double max_shear = 0.10;
  double initial_step_mm = 2.0;
  double initial_step_deg = 2.0;
  double final_step_mm = 0.02;
  double final_step_deg = 0.02;
  int restarts = 2;
  int max_evaluations = 4000;
  std::uint64_t seed = 1;

  void validate() const;
};

/// LC² over a fixed US volume. Holds the MRI gradient magnitude and the
/// centred US intensities; evaluate() resamples the MRI under a transform.
class Lc2Metric {
 public:
  Lc2Metric(const ScalarVolume& us, const BinaryMask* mask, const ScalarVolume& mri,
            const ScalarVolume& mri_gradient, const Lc2Params& params);

  /// Score in [0, 1] for `mri_to_us` (image -> US volume frame). Throws
  /// NoOverlap when too few US voxels map inside the MRI.
  double evaluate(const AffineTransform& mri_to_us) const;

  /// Centroid of the US support (mask), US frame.
  const Vec3& centroid() const { return centroid_; }
  std::size_t support() const { return support_; }

 private:
  const ScalarVolume* mri_;
  const ScalarVolume* gradient_;
  GridGeometry grid_;
  std::vector<std::uint32_t> voxels_;  // masked voxel indices
  std::vector<double> us_;             // centred US values at voxels_
  std::array<int, 3> box_lo_{}, box_hi_{};  // support bounding box, [lo, hi)
  std::vector<std::int32_t> slot_;     // box cell -> index into voxels_, or -1
  double mri_shift_ = 0.0, grad_shift_ = 0.0;
  double floor_ = 0.0;
  Vec3 centroid_ = Vec3::Zero();
  std::size_t support_ = 0;
  Lc2Params params_;
};

/// One-shot LC² (builds the gradient and metric).
double lc2_similarity(const ScalarVolume& us, const BinaryMask* mask, const ScalarVolume& mri,
                      const AffineTransform& mri_to_us, const Lc2Params& params = {});

struct SearchOptions {
  Eigen::VectorXd lower, upper;  // bounds
  Eigen::VectorXd step;          // initial step per coordinate
  double min_step_ratio = 0.01;  // stop when the step shrinks below step·ratio
  int restarts = 0;              // re-polls from the best point in random rotated bases
  int max_evaluations = 1000;
  std::uint64_t seed = 1;
};

struct SearchResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int evaluations = 0;
};

/// Bounded compass search maximizing f; points are clipped to the bounds.
SearchResult pattern_search(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& x0, const SearchOptions& options);

struct RegistrationResult {
  RigidTransform initial;  // image -> World before registration
  /// Rigid correction T^P_MRI (Patient -> Patient): image coordinates before
  /// the update mapped to image coordinates after it.
  RigidTransform rigid = RigidTransform::identity(FrameId::Patient, FrameId::Patient);
  RigidTransform rigid_aligned;  // image -> World after the rigid stage
  std::optional<AffineTransform> affine;  // image -> World after the affine stage
  double similarity_before = 0.0;
  double similarity_after = 0.0;
  int evaluations = 0;
  bool improved = false;  // similarity gain >= 1e-4
  std::optional<double> translation_error_mm;
  std::optional<double> rotation_error_deg;
};

/// Maximizes LC² over translation (mm) and rotation vector (deg) about the US
/// centroid, starting at `initial` (image -> World). When `truth` is given
/// the start must lie within the bounds of it. Throws OutOfBounds when the
/// start is outside the capture range.
RegistrationResult register_rigid(const CompoundResult& us, const ScalarVolume& mri,
                                  const RigidTransform& initial, const Lc2Params& params,
                                  const std::optional<RigidTransform>& truth = std::nullopt);

/// 12-parameter refinement (translation, rotation, per-axis scale, shear)
/// from the rigid result; the score never drops below the rigid stage.
RegistrationResult register_affine(const CompoundResult& us, const ScalarVolume& mri,
                                   const RegistrationResult& rigid, const Lc2Params& params,
                                   const std::optional<RigidTransform>& truth = std::nullopt);

/// New state with T_P<-MRI left-composed by the rigid correction.
CalibrationState update_patient_calibration(const CalibrationState& state,
                                            const RegistrationResult& result);

void write_registration_report(const std::filesystem::path& path, const RegistrationResult& r);
RegistrationResult read_registration_report(const std::filesystem::path& path);

}  // namespace mrus
