#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mrus/volume.hpp"

namespace mrus {

/// Structured-light depth camera. Rays are cast from the depth sensor; points
/// are reported in the RGB camera frame ("Camera"), which is the frame the
/// hand-eye calibration recovers.
struct DepthCameraModel {
  RigidTransform pose = RigidTransform::identity(FrameId::Camera, FrameId::World);
  /// Depth sensor -> RGB camera; 25 mm along the transverse (x) axis.
  RigidTransform depth_to_camera =
      RigidTransform::translation({25.0, 0.0, 0.0}, FrameId::Depth, FrameId::Camera);
  int width = 640;
  int height = 480;
  double focal_px = 570.0;
  /// RMS in-plane (x-y) displacement, mm.
  double noise_xy_sigma = 3.0;
  /// Standard deviation along the depth axis, mm.
  double noise_z_sigma = 10.0;

  void validate() const;
  /// Unit ray direction through the center of pixel (u, v), depth frame.
  Vec3 ray(int u, int v) const;
};

/// Analytic world-frame scene for ray casting.
struct Scene {
  struct Ellipsoid {
    RigidTransform pose;  // local -> World
    Vec3 radii;
    int label = 0;
  };
  /// Rectangle through `pose` origin spanning local x/y within half_extent;
  /// the local z axis is its normal.
  struct Rectangle {
    RigidTransform pose;
    double half_x = 0.0, half_y = 0.0;
    int label = 0;
  };

  std::vector<Ellipsoid> ellipsoids;
  std::vector<Rectangle> rectangles;

  bool empty() const { return ellipsoids.empty() && rectangles.empty(); }

  struct Hit {
    double distance;
    Vec3 point;
    Vec3 normal;
    int label;
  };
  /// Nearest hit along origin + s·dir for s > 0 (World frame).
  std::optional<Hit> intersect(const Vec3& origin, const Vec3& dir) const;
};

struct DepthRender {
  PointCloud cloud;                 // noisy, Camera frame
  std::vector<Vec3> true_points;    // noiseless, Camera frame
  std::vector<int> labels;          // label of the surface each pixel hit
  std::vector<std::array<int, 2>> pixels;
};

DepthRender render_depth_labeled(const DepthCameraModel& model, const Scene& scene,
                                 std::uint64_t seed);
PointCloud render_depth(const DepthCameraModel& model, const Scene& scene, std::uint64_t seed);
/// Splats a world-frame surface cloud through a z-buffer.
PointCloud render_depth(const DepthCameraModel& model, const SurfaceCloud& scene,
                        std::uint64_t seed);

/// Octree over a fixed root cube; nodes record how many points passed through.
class Octree {
 public:
  Octree(const Vec3& center, double half_extent, int max_depth);

  void insert(const Vec3& p);
  /// Leaf node index containing p, or -1 if that leaf was never populated.
  std::int32_t find_leaf(const Vec3& p) const;
  std::uint32_t count(std::int32_t node) const { return nodes_[node].count; }
  bool contains(const Vec3& p) const;

  std::size_t node_count() const { return nodes_.size(); }
  /// Child-node visits performed by insert() so far.
  std::size_t nodes_touched() const { return touched_; }
  int max_depth() const { return max_depth_; }
  double leaf_size() const { return 2.0 * half_extent_ / (1 << max_depth_); }

 private:
  struct Node {
    std::array<std::int32_t, 8> child;
    std::uint32_t count = 0;
  };
  int child_slot(const Vec3& p, Vec3& center, double half) const;

  Vec3 center_;
  double half_extent_;
  int max_depth_;
  std::vector<Node> nodes_;
  std::size_t touched_ = 0;
};

struct ChangeDetectionParams {
  int min_points = 2;
  double leaf_size = 10.0;  // mm
};

/// Points of `current` lying in octree leaves that are empty in the
/// background tree, keeping only leaves holding >= min_points current points.
PointCloud detect_change(const PointCloud& background, const PointCloud& current,
                         const ChangeDetectionParams& params = {});

}  // namespace mrus
