#include "mrus/sensor.hpp"

#include <cmath>
#include <limits>
#include <random>
#include <unordered_map>

namespace mrus {

void DepthCameraModel::validate() const {
  if (width <= 0 || height <= 0) throw Error(ErrorCode::InvalidArgument, "camera image size must be positive");
  if (!(focal_px > 0.0)) throw Error(ErrorCode::InvalidArgument, "camera focal length must be positive");
  if (noise_xy_sigma < 0.0 || noise_z_sigma < 0.0) {
    throw Error(ErrorCode::InvalidArgument, "camera noise sigmas must be >= 0");
  }
  if (pose.from() != FrameId::Camera || pose.to() != FrameId::World) {
    throw Error(ErrorCode::FrameMismatch, "camera pose must map Camera -> World");
  }
  if (depth_to_camera.from() != FrameId::Depth || depth_to_camera.to() != FrameId::Camera) {
    throw Error(ErrorCode::FrameMismatch, "depth extrinsic must map Depth -> Camera");
  }
}

Vec3 DepthCameraModel::ray(int u, int v) const {
  const double cx = 0.5 * (width - 1), cy = 0.5 * (height - 1);
  return Vec3((u - cx) / focal_px, (v - cy) / focal_px, 1.0).normalized();
}

std::optional<Scene::Hit> Scene::intersect(const Vec3& origin, const Vec3& dir) const {
  std::optional<Hit> best;
  auto offer = [&](double s, const Vec3& p, const Vec3& n, int label) {
    if (s > 1e-9 && (!best || s < best->distance)) best = Hit{s, p, n, label};
  };
  for (const auto& e : ellipsoids) {
    const RigidTransform inv = invert(e.pose);
    const Vec3 o = inv.apply(origin).cwiseQuotient(e.radii);
    const Vec3 d = inv.apply_vector(dir).cwiseQuotient(e.radii);
    const double a = d.squaredNorm(), b = 2.0 * o.dot(d), c = o.squaredNorm() - 1.0;
    const double disc = b * b - 4.0 * a * c;
    if (disc < 0.0) continue;
    const double sq = std::sqrt(disc);
    for (double s : {(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)}) {
      if (s <= 1e-9) continue;
      const Vec3 p = origin + s * dir;
      const Vec3 local = inv.apply(p);
      const Vec3 n = e.pose.apply_vector(
          local.cwiseQuotient(e.radii.cwiseProduct(e.radii)).normalized());
      offer(s, p, n.normalized(), e.label);
      break;
    }
  }
  for (const auto& r : rectangles) {
    const Vec3 n = r.pose.rotation().col(2);
    const double denom = n.dot(dir);
    if (std::abs(denom) < 1e-12) continue;
    const double s = n.dot(r.pose.translation() - origin) / denom;
    const Vec3 p = origin + s * dir;
    const Vec3 local = invert(r.pose).apply(p);
    if (std::abs(local.x()) > r.half_x || std::abs(local.y()) > r.half_y) continue;
    offer(s, p, denom < 0.0 ? n : Vec3(-n), r.label);
  }
  return best;
}

namespace {

struct Noise {
  std::mt19937_64 rng;
  std::normal_distribution<double> unit{0.0, 1.0};
  double xy, z;

  Vec3 operator()() {
    // Per-axis sigma so that the in-plane RMS radius equals noise_xy_sigma.
    const double s = xy / std::sqrt(2.0);
    const double nx = unit(rng) * s;
    const double ny = unit(rng) * s;
    const double nz = unit(rng) * z;
    return {nx, ny, nz};
  }
};

}  // namespace

DepthRender render_depth_labeled(const DepthCameraModel& model, const Scene& scene,
                                 std::uint64_t seed) {
  model.validate();
  if (scene.empty()) throw Error(ErrorCode::EmptyInput, "cannot render an empty scene");
  const RigidTransform depth_to_world = compose(model.pose, model.depth_to_camera);
  const RigidTransform world_to_depth = invert(depth_to_world);
  const Vec3 origin = depth_to_world.translation();
  Noise noise{std::mt19937_64(seed), {}, model.noise_xy_sigma, model.noise_z_sigma};

  DepthRender out;
  out.cloud.frame = FrameId::Camera;
  for (int v = 0; v < model.height; ++v) {
    for (int u = 0; u < model.width; ++u) {
      const Vec3 dir = depth_to_world.apply_vector(model.ray(u, v));
      const auto hit = scene.intersect(origin, dir);
      if (!hit) continue;
      const Vec3 in_depth = world_to_depth.apply(hit->point);
      const Vec3 noisy = in_depth + noise();
      out.cloud.points.push_back(model.depth_to_camera.apply(noisy));
      out.true_points.push_back(model.depth_to_camera.apply(in_depth));
      out.labels.push_back(hit->label);
      out.pixels.push_back({u, v});
    }
  }
  return out;
}

PointCloud render_depth(const DepthCameraModel& model, const Scene& scene, std::uint64_t seed) {
  return render_depth_labeled(model, scene, seed).cloud;
}

PointCloud render_depth(const DepthCameraModel& model, const SurfaceCloud& scene,
                        std::uint64_t seed) {
  model.validate();
  if (scene.empty()) throw Error(ErrorCode::EmptyInput, "cannot render an empty scene");
  if (scene.frame != FrameId::World) {
    throw Error(ErrorCode::FrameMismatch, "scene cloud must be in the World frame");
  }
  const RigidTransform world_to_depth = invert(compose(model.pose, model.depth_to_camera));
  const Vec3 eye = invert(world_to_depth).translation();
  const double cx = 0.5 * (model.width - 1), cy = 0.5 * (model.height - 1);
  std::vector<double> zbuf(static_cast<std::size_t>(model.width) * model.height,
                           std::numeric_limits<double>::infinity());
  std::vector<Vec3> hit(zbuf.size());
  for (std::size_t i = 0; i < scene.size(); ++i) {
    const Vec3& pw = scene.points[i];
    if (scene.has_normals() && scene.normals[i].dot(pw - eye) >= 0.0) continue;  // back face
    const Vec3 p = world_to_depth.apply(pw);
    if (p.z() <= 0.0) continue;
    const long u = std::lround(model.focal_px * p.x() / p.z() + cx);
    const long v = std::lround(model.focal_px * p.y() / p.z() + cy);
    if (u < 0 || v < 0 || u >= model.width || v >= model.height) continue;
    const std::size_t idx = static_cast<std::size_t>(v) * model.width + u;
    if (p.z() < zbuf[idx]) {
      zbuf[idx] = p.z();
      hit[idx] = p;
    }
  }
  Noise noise{std::mt19937_64(seed), {}, model.noise_xy_sigma, model.noise_z_sigma};
  PointCloud out;
  out.frame = FrameId::Camera;
  for (std::size_t idx = 0; idx < zbuf.size(); ++idx) {
    if (!std::isfinite(zbuf[idx])) continue;
    out.points.push_back(model.depth_to_camera.apply(hit[idx] + noise()));
  }
  return out;
}

// --- octree -------------------------------------------------------------------

Octree::Octree(const Vec3& center, double half_extent, int max_depth)
    : center_(center), half_extent_(half_extent), max_depth_(max_depth) {
  if (!(half_extent > 0.0) || max_depth < 0 || max_depth > 20) {
    throw Error(ErrorCode::InvalidArgument, "octree needs half_extent > 0 and depth in [0, 20]");
  }
  Node root;
  root.child.fill(-1);
  nodes_.push_back(root);
}

bool Octree::contains(const Vec3& p) const {
  return ((p - center_).cwiseAbs().array() <= half_extent_).all();
}

int Octree::child_slot(const Vec3& p, Vec3& center, double half) const {
  int slot = 0;
  const double q = 0.5 * half;
  for (int a = 0; a < 3; ++a) {
    if (p[a] >= center[a]) {
      slot |= 1 << a;
      center[a] += q;
    } else {
      center[a] -= q;
    }
  }
  return slot;
}

void Octree::insert(const Vec3& p) {
  if (!contains(p)) throw Error(ErrorCode::OutOfBounds, "point outside the octree root cube");
  std::int32_t node = 0;
  ++nodes_[0].count;
  Vec3 c = center_;
  double half = half_extent_;
  for (int d = 0; d < max_depth_; ++d) {
    const int slot = child_slot(p, c, half);
    half *= 0.5;
    std::int32_t next = nodes_[node].child[slot];
    if (next < 0) {
      next = static_cast<std::int32_t>(nodes_.size());
      Node n;
      n.child.fill(-1);
      nodes_.push_back(n);
      nodes_[node].child[slot] = next;
    }
    ++touched_;
    ++nodes_[next].count;
    node = next;
  }
}

std::int32_t Octree::find_leaf(const Vec3& p) const {
  if (!contains(p)) return -1;
  std::int32_t node = 0;
  Vec3 c = center_;
  double half = half_extent_;
  for (int d = 0; d < max_depth_; ++d) {
    const int slot = child_slot(p, c, half);
    half *= 0.5;
    node = nodes_[node].child[slot];
    if (node < 0) return -1;
  }
  return node;
}

PointCloud detect_change(const PointCloud& background, const PointCloud& current,
                         const ChangeDetectionParams& params) {
  if (background.frame != current.frame) {
    throw Error(ErrorCode::FrameMismatch,
                "change detection clouds are in different frames ('" +
                    std::string(frame_name(background.frame)) + "' vs '" +
                    std::string(frame_name(current.frame)) + "')");
  }
  if (params.min_points < 1 || !(params.leaf_size > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "change detection parameters out of range");
  }
  PointCloud out;
  out.frame = current.frame;
  if (current.empty()) return out;

  // Both trees share one root cube covering the union of the clouds.
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto* cloud : {&background, &current}) {
    for (const auto& p : cloud->points) {
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
  }
  const double extent = std::max((hi - lo).maxCoeff(), params.leaf_size);
  int depth = 0;
  while (params.leaf_size * (1 << depth) < extent * (1.0 + 1e-9)) ++depth;
  const double half = 0.5 * params.leaf_size * (1 << depth);
  const Vec3 center = 0.5 * (lo + hi);

  Octree bg(center, half, depth), cur(center, half, depth);
  for (const auto& p : background.points) bg.insert(p);
  for (const auto& p : current.points) cur.insert(p);

  for (std::size_t i = 0; i < current.size(); ++i) {
    const Vec3& p = current.points[i];
    if (bg.find_leaf(p) >= 0) continue;
    if (cur.count(cur.find_leaf(p)) < static_cast<std::uint32_t>(params.min_points)) continue;
    out.points.push_back(p);
    if (current.has_normals()) out.normals.push_back(current.normals[i]);
  }
  return out;
}

}  // namespace mrus
