#include "mrus/surfmatch.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>

namespace mrus {

// --- k-d tree ---------------------------------------------------------------

namespace {
constexpr std::uint32_t kLeafSize = 8;
}

NearestNeighborIndex::NearestNeighborIndex(std::vector<Vec3> points)
    : points_(std::move(points)) {
  order_.resize(points_.size());
  std::iota(order_.begin(), order_.end(), 0u);
  if (!points_.empty()) {
    nodes_.reserve(2 * points_.size() / kLeafSize + 2);
    build(0, static_cast<std::uint32_t>(points_.size()), 0);
  }
}

std::int32_t NearestNeighborIndex::build(std::uint32_t begin, std::uint32_t end, int depth) {
  const auto id = static_cast<std::int32_t>(nodes_.size());
  nodes_.push_back(Node{});
  nodes_[id].begin = begin;
  nodes_[id].end = end;
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (std::uint32_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[order_[i]]);
    hi = hi.cwiseMax(points_[order_[i]]);
  }
  nodes_[id].lo = lo;
  nodes_[id].hi = hi;
  if (end - begin <= kLeafSize) return id;

  // Split on the axis of largest extent.
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  if (hi[axis] - lo[axis] <= 0.0) return id;  // all coincident: keep as leaf

  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                   [&](std::uint32_t a, std::uint32_t b) {
                     return points_[a][axis] < points_[b][axis];
                   });
  nodes_[id].axis = axis;
  nodes_[id].split = points_[order_[mid]][axis];
  const std::int32_t left = build(begin, mid, depth + 1);
  const std::int32_t right = build(mid, end, depth + 1);
  nodes_[id].left = left;
  nodes_[id].right = right;
  return id;
}

void NearestNeighborIndex::search(std::int32_t node, const Vec3& p, double& best_d2,
                                  std::size_t& best) const {
  const Node& n = nodes_[node];
  if (n.axis < 0) {
    for (std::uint32_t i = n.begin; i < n.end; ++i) {
      const std::uint32_t idx = order_[i];
      const double d2 = (points_[idx] - p).squaredNorm();
      if (d2 < best_d2 || (d2 == best_d2 && idx < best)) {
        best_d2 = d2;
        best = idx;
      }
    }
    return;
  }
  // Children are pruned by box distance; equal distances are still visited
  // so that ties resolve to the lowest index.
  const double diff = p[n.axis] - n.split;
  const std::int32_t near = diff <= 0.0 ? n.left : n.right;
  const std::int32_t far = diff <= 0.0 ? n.right : n.left;
  if (box_distance2(near, p) <= best_d2) search(near, p, best_d2, best);
  if (box_distance2(far, p) <= best_d2) search(far, p, best_d2, best);
}

double NearestNeighborIndex::box_distance2(std::int32_t node, const Vec3& p) const {
  const Node& n = nodes_[node];
  const Vec3 d = (n.lo - p).cwiseMax(p - n.hi).cwiseMax(0.0);
  return d.squaredNorm();
}

NearestNeighborIndex::Hit NearestNeighborIndex::query(const Vec3& p) const {
  if (points_.empty()) throw Error(ErrorCode::EmptyInput, "nearest-neighbour query on an empty index");
  double best_d2 = std::numeric_limits<double>::infinity();
  std::size_t best = std::numeric_limits<std::size_t>::max();
  search(0, p, best_d2, best);
  return {best, points_[best], std::sqrt(best_d2)};
}

NearestNeighborIndex::Hit linear_scan_nearest(std::span<const Vec3> points, const Vec3& p) {
  if (points.empty()) throw Error(ErrorCode::EmptyInput, "nearest-neighbour query on an empty set");
  double best_d2 = std::numeric_limits<double>::infinity();
  std::size_t best = 0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double d2 = (points[i] - p).squaredNorm();
    if (d2 < best_d2) {
      best_d2 = d2;
      best = i;
    }
  }
  return {best, points[best], std::sqrt(best_d2)};
}

// --- absolute orientation ---------------------------------------------------

namespace {

/// Eigen-decomposition of the point covariance (ascending eigenvalues).
std::pair<Vec3, Eigen::SelfAdjointEigenSolver<Mat3>> principal_axes(std::span<const Vec3> pts) {
  Vec3 c = Vec3::Zero();
  for (const auto& p : pts) c += p;
  c /= static_cast<double>(pts.size());
  Mat3 cov = Mat3::Zero();
  for (const auto& p : pts) cov += (p - c) * (p - c).transpose();
  cov /= static_cast<double>(pts.size());
  return {c, Eigen::SelfAdjointEigenSolver<Mat3>(cov)};
}

void require_non_degenerate(std::span<const Vec3> pts, const char* what) {
  if (pts.size() < 3) {
    throw Error(ErrorCode::Degenerate, std::string(what) + " needs at least 3 points");
  }
  const auto [c, es] = principal_axes(pts);
  const Vec3 ev = es.eigenvalues();
  if (ev[1] <= 1e-12 * std::max(1.0, ev[2])) {
    throw Error(ErrorCode::Degenerate, std::string(what) + " is collinear");
  }
}

}  // namespace

RigidTransform solve_absolute_orientation(std::span<const Vec3> from, std::span<const Vec3> to,
                                          FrameId from_frame, FrameId to_frame) {
  if (from.size() != to.size()) {
    throw Error(ErrorCode::InvalidArgument, "correspondence sets differ in size");
  }
  require_non_degenerate(from, "absolute orientation input");
  const double n = static_cast<double>(from.size());
  Vec3 cf = Vec3::Zero(), ct = Vec3::Zero();
  for (std::size_t i = 0; i < from.size(); ++i) {
    cf += from[i];
    ct += to[i];
  }
  cf /= n;
  ct /= n;
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < from.size(); ++i) h += (from[i] - cf) * (to[i] - ct).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 v = svd.matrixV();
  const Mat3& u = svd.matrixU();
  // Reflection guard: flip the singular vector of the smallest singular value.
  if ((v * u.transpose()).determinant() < 0.0) v.col(2) = -v.col(2);
  const Mat3 r = v * u.transpose();
  return {r, ct - r * cf, from_frame, to_frame};
}

// --- ICP ----------------------------------------------------------------------

namespace {

struct IcpRun {
  RigidTransform transform;
  std::vector<double> history;
  int iterations = 0;
  bool converged = false;
  double rms = 0.0;
  std::size_t inliers = 0;
};

/// Runs ICP from `start`; `max_iter` bounds the number of rigid updates.
IcpRun run_icp(const NearestNeighborIndex& index, const PointCloud& target,
               const RigidTransform& start, int max_iter, const IcpParams& params,
               FrameId from, FrameId to) {
  const double d_max2 = params.max_pair_distance * params.max_pair_distance;
  const double n = static_cast<double>(target.size());
  IcpRun run{start, {}, 0, false, 0.0, 0};
  std::vector<Vec3> src, dst;
  src.reserve(target.size());
  dst.reserve(target.size());

  auto correspond = [&](const RigidTransform& t, double& truncated, double& inlier_ss) {
    src.clear();
    dst.clear();
    truncated = 0.0;
    inlier_ss = 0.0;
    const RigidTransform inv = invert(t);
    for (const auto& q : target.points) {
      const auto hit = index.query(inv.apply(q));
      const double d2 = hit.distance * hit.distance;
      truncated += std::min(d2, d_max2);
      if (d2 <= d_max2) {
        src.push_back(hit.point);
        dst.push_back(q);
        inlier_ss += d2;
      }
    }
    return std::sqrt(truncated / n);
  };

  double truncated = 0.0, inlier_ss = 0.0;
  double cost = correspond(run.transform, truncated, inlier_ss);
  run.history.push_back(cost);
  for (int it = 0; it < max_iter; ++it) {
    if (src.size() < 3) {
      throw Error(ErrorCode::NoCorrespondences,
                  "ICP: no usable correspondences within max_pair_distance");
    }
    RigidTransform next = run.transform;
    try {
      next = solve_absolute_orientation(src, dst, from, to);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Degenerate) throw;
      throw Error(ErrorCode::Degenerate, std::string("ICP: correspondences degenerate: ") + e.what());
    }
    const double new_cost = correspond(next, truncated, inlier_ss);
    run.iterations = it + 1;
    // Cost is non-increasing by construction; guard against round-off.
    if (new_cost <= cost) {
      run.transform = next;
    } else {
      correspond(run.transform, truncated, inlier_ss);
    }
    const double improvement = cost - std::min(new_cost, cost);
    cost = std::min(new_cost, cost);
    run.history.push_back(cost);
    if (improvement < params.convergence_tol) {
      run.converged = true;
      break;
    }
  }
  if (src.empty()) {
    throw Error(ErrorCode::NoCorrespondences, "ICP: all pairs rejected by max_pair_distance");
  }
  run.inliers = src.size();
  run.rms = std::sqrt(inlier_ss / static_cast<double>(src.size()));
  return run;
}

/// The 24 proper signed permutation matrices.
std::vector<Mat3> axis_symmetries() {
  std::vector<Mat3> out;
  std::array<int, 3> perm{0, 1, 2};
  do {
    for (int s = 0; s < 8; ++s) {
      Mat3 m = Mat3::Zero();
      for (int r = 0; r < 3; ++r) m(r, perm[r]) = (s >> r & 1) ? -1.0 : 1.0;
      if (m.determinant() > 0.0) out.push_back(m);
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return out;
}

Mat3 proper(Mat3 axes) {
  if (axes.determinant() < 0.0) axes.col(0) = -axes.col(0);
  return axes;
}

}  // namespace

IcpResult icp(const SurfaceCloud& source, const PointCloud& target, const IcpParams& params) {
  require_non_degenerate(source.points, "ICP source cloud");
  require_non_degenerate(target.points, "ICP target cloud");
  if (params.initial.from() != source.frame || params.initial.to() != target.frame) {
    throw Error(ErrorCode::FrameMismatch,
                "ICP initial transform must map " + std::string(frame_name(source.frame)) +
                    " -> " + std::string(frame_name(target.frame)));
  }
  if (params.max_iterations < 1 || !(params.max_pair_distance > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "ICP parameters out of range");
  }
  const NearestNeighborIndex index(source.points);
  const FrameId from = source.frame, to = target.frame;

  RigidTransform start = params.initial;
  if (params.prealign) {
    const auto [cs, es] = principal_axes(source.points);
    const auto [ct, et] = principal_axes(target.points);
    const Mat3 vs = proper(es.eigenvectors());
    const Mat3 vt = proper(et.eigenvectors());

    std::vector<RigidTransform> candidates{params.initial};
    for (const Mat3& q : axis_symmetries()) {
      const Mat3 r = vt * q * vs.transpose();
      candidates.emplace_back(r, ct - r * cs, from, to);
    }
    double best_cost = std::numeric_limits<double>::infinity();
    double best_dist = std::numeric_limits<double>::infinity();
    for (const auto& c : candidates) {
      IcpRun trial;
      try {
        trial = run_icp(index, target, c, params.prealign_iterations, params, from, to);
      } catch (const Error&) {
        continue;
      }
      const double cost = trial.history.back();
      const double dist = rotation_angle_deg(trial.transform.rotation() *
                                             params.initial.rotation().transpose());
      // Near-equal costs (symmetric shapes) go to the start closest to `initial`.
      const bool tie = std::abs(cost - best_cost) <= 0.02 * best_cost + 1e-9;
      if ((tie && dist < best_dist) || (!tie && cost < best_cost)) {
        best_cost = cost;
        best_dist = dist;
        start = trial.transform;
      }
    }
    if (!std::isfinite(best_cost)) {
      throw Error(ErrorCode::NoCorrespondences, "ICP: no start produced correspondences");
    }
  }

  const IcpRun run = run_icp(index, target, start, params.max_iterations, params, from, to);
  IcpResult out;
  out.transform = run.transform;
  out.rms_error = run.rms;
  out.iterations = run.iterations;
  out.converged = run.converged;
  out.inliers = run.inliers;
  out.cost_history = run.history;
  return out;
}

}  // namespace mrus
