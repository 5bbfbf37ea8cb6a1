#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "mrus/volume.hpp"

namespace mrus {

/// Exact Euclidean nearest-neighbour search (k-d tree). Ties resolve to the
/// lowest insertion index.
class NearestNeighborIndex {
 public:
  struct Hit {
    std::size_t index = 0;
    Vec3 point;
    double distance = 0.0;
  };

  NearestNeighborIndex() = default;
  explicit NearestNeighborIndex(std::vector<Vec3> points);

  bool empty() const { return points_.empty(); }
  std::size_t size() const { return points_.size(); }
  const std::vector<Vec3>& points() const { return points_; }

  /// Throws EmptyInput on an empty index.
  Hit query(const Vec3& p) const;

 private:
  struct Node {
    int axis = -1;  // -1 for leaves
    double split = 0.0;
    std::uint32_t begin = 0, end = 0;
    std::int32_t left = -1, right = -1;
    Vec3 lo, hi;  // bounding box of the node's points
  };

  std::int32_t build(std::uint32_t begin, std::uint32_t end, int depth);
  void search(std::int32_t node, const Vec3& p, double& best_d2, std::size_t& best) const;
  double box_distance2(std::int32_t node, const Vec3& p) const;

  std::vector<Vec3> points_;
  std::vector<std::uint32_t> order_;
  std::vector<Node> nodes_;
};

/// Brute-force reference used by tests and small inputs.
NearestNeighborIndex::Hit linear_scan_nearest(std::span<const Vec3> points, const Vec3& p);

/// Least-squares rigid motion mapping `from` onto `to` (SVD of the
/// cross-covariance with reflection guard). Needs >= 3 non-collinear pairs.
RigidTransform solve_absolute_orientation(std::span<const Vec3> from,
                                          std::span<const Vec3> to, FrameId from_frame,
                                          FrameId to_frame);

struct IcpParams {
  int max_iterations = 100;
  double convergence_tol = 1e-3;  // mm of RMS improvement
  double max_pair_distance = 50.0;  // mm
  /// Initial MRI -> Camera guess; also the tie-breaker among symmetric
  /// pre-alignment candidates.
  RigidTransform initial = RigidTransform::identity(FrameId::MRI, FrameId::Camera);
  /// Try centroid + principal-axes starts in addition to `initial`.
  bool prealign = true;
  int prealign_iterations = 15;
};

struct IcpResult {
  RigidTransform transform;  // source frame -> target frame
  double rms_error = 0.0;    // over accepted pairs, mm
  int iterations = 0;
  bool converged = false;
  std::size_t inliers = 0;
  /// Truncated RMS, sqrt(mean(min(d², D²))), before each iteration's update
  /// and after the last one.
  std::vector<double> cost_history;
};

/// Point-to-point ICP aligning `source` (e.g. MRI surface) to `target` (e.g.
/// camera cloud). Target points are matched to their nearest source point.
IcpResult icp(const SurfaceCloud& source, const PointCloud& target, const IcpParams& params);

}  // namespace mrus
