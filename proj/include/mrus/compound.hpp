#pragma once

#include <span>

#include "mrus/acquire.hpp"
#include "mrus/volume.hpp"

namespace mrus {

struct CompoundingParams {
  double spacing = 1.0;  // mm, isotropic output grid
  double radius = 2.0;   // mm, hard kernel cutoff; Gaussian sigma = radius/2
  double min_weight = 1e-3;

  void validate() const;
};

struct CompoundResult {
  ScalarVolume volume;  // World frame
  BinaryMask mask;      // voxels with enough kernel support
};

/// Backward normalized convolution: every output voxel is the kernel-weighted
/// mean of all frame pixels within `radius` of its center.
CompoundResult compound(std::span<const UsFrame> frames, const CompoundingParams& params = {});

/// Output grid covering the frame footprints padded by the kernel radius.
GridGeometry compounding_grid(std::span<const UsFrame> frames, const CompoundingParams& params);

}  // namespace mrus
