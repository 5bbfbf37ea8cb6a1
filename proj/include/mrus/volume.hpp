#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <vector>

#include "mrus/geom.hpp"

namespace mrus {

/// Regular grid: voxel (i,j,k) has its center at origin + (i,j,k)∘spacing.
/// Voxel order is x-fastest.
struct GridGeometry {
  std::array<int, 3> dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 origin{0.0, 0.0, 0.0};
  FrameId frame = FrameId::World;

  std::size_t size() const {
    return static_cast<std::size_t>(dims[0]) * dims[1] * dims[2];
  }
  std::size_t index(int i, int j, int k) const {
    return (static_cast<std::size_t>(k) * dims[1] + j) * dims[0] + i;
  }
  bool inside(int i, int j, int k) const {
    return i >= 0 && j >= 0 && k >= 0 && i < dims[0] && j < dims[1] && k < dims[2];
  }
  Vec3 position(int i, int j, int k) const {
    return origin + Vec3(i, j, k).cwiseProduct(spacing);
  }
  /// Continuous voxel coordinates of a point in mm.
  Vec3 to_voxel(const Vec3& p) const { return (p - origin).cwiseQuotient(spacing); }

  /// Throws InvalidArgument on non-positive dims or spacing.
  void validate() const;
  bool same_shape(const GridGeometry& other) const;
};

class ScalarVolume {
 public:
  ScalarVolume() = default;
  ScalarVolume(const GridGeometry& geometry, float fill = 0.0f);
  ScalarVolume(const GridGeometry& geometry, std::vector<float> data);

  const GridGeometry& geometry() const { return geometry_; }
  const std::array<int, 3>& dims() const { return geometry_.dims; }
  FrameId frame() const { return geometry_.frame; }

  float& at(int i, int j, int k) { return data_[geometry_.index(i, j, k)]; }
  float at(int i, int j, int k) const { return data_[geometry_.index(i, j, k)]; }
  std::vector<float>& data() { return data_; }
  const std::vector<float>& data() const { return data_; }

 private:
  GridGeometry geometry_;
  std::vector<float> data_;
};

class BinaryMask {
 public:
  BinaryMask() = default;
  explicit BinaryMask(const GridGeometry& geometry, bool fill = false);

  const GridGeometry& geometry() const { return geometry_; }
  bool at(int i, int j, int k) const { return data_[geometry_.index(i, j, k)] != 0; }
  void set(int i, int j, int k, bool v) { data_[geometry_.index(i, j, k)] = v ? 1 : 0; }
  /// Out-of-grid voxels read as `outside`.
  bool get(int i, int j, int k, bool outside) const {
    return geometry_.inside(i, j, k) ? at(i, j, k) : outside;
  }
  std::vector<std::uint8_t>& data() { return data_; }
  const std::vector<std::uint8_t>& data() const { return data_; }
  std::size_t count() const;

 private:
  GridGeometry geometry_;
  std::vector<std::uint8_t> data_;
};

/// Points (mm) in one frame, optionally with unit normals.
struct PointCloud {
  std::vector<Vec3> points;
  std::vector<Vec3> normals;  // empty or same length as points
  FrameId frame = FrameId::World;

  std::size_t size() const { return points.size(); }
  bool empty() const { return points.empty(); }
  bool has_normals() const { return !normals.empty(); }
};
using SurfaceCloud = PointCloud;

/// Apply a rigid map to a cloud; checks cloud.frame == t.from().
PointCloud transform_cloud(const RigidTransform& t, const PointCloud& cloud);

struct Inclusion {
  Vec3 center;
  Vec3 radii;
  double mri_intensity = 200.0;
};

/// Synthetic torso: an ellipsoid of tissue with ellipsoidal inclusions,
/// centered at the grid center (MRI coordinates, origin at the torso center).
struct PhantomSpec {
  std::array<int, 3> dims{96, 96, 96};
  Vec3 spacing{1.0, 1.0, 1.0};
  Vec3 torso_half_axes{44.0, 32.0, 36.0};
  double torso_intensity = 160.0;
  double background_intensity = 0.0;
  double noise_amplitude = 8.0;
  /// Range for the per-region ultrasound echogenicity draw.
  double echo_min = 20.0;
  double echo_max = 220.0;
  std::vector<Inclusion> inclusions;

  /// Throws Config when the spec is unusable.
  void validate() const;
  GridGeometry grid() const;
  static PhantomSpec default_spec();
};

struct Phantom {
  ScalarVolume mri;
  /// Ground-truth echogenicity map sharing the MRI geometry.
  ScalarVolume tissue;
};

Phantom make_phantom(const PhantomSpec& spec, std::uint64_t seed);

/// True where v >= tau.
BinaryMask threshold(const ScalarVolume& v, double tau);

BinaryMask dilate(const BinaryMask& m, int radius);
/// Out-of-grid voxels count as set, so erode(dilate(X)) ⊇ X.
BinaryMask erode(const BinaryMask& m, int radius);
/// Dilation then erosion with a ball of `radius` voxels.
BinaryMask morph_close(const BinaryMask& m, int radius);

/// Boundary voxels of the largest 26-connected boundary component, in mm,
/// with outward PCA normals over the surface points in a 5x5x5 window.
/// Throws EmptyInput for an empty mask.
SurfaceCloud extract_surface(const BinaryMask& m);

/// Number of 26-connected components of the set voxels.
int count_components(const BinaryMask& m);

/// Trilinear interpolation; 0 outside the grid.
double sample_trilinear(const ScalarVolume& v, const Vec3& p);

/// Central-difference gradient magnitude at native spacing.
ScalarVolume gradient_magnitude(const ScalarVolume& v);

}  // namespace mrus
