#include "mrus/trajectory.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>

#include "mrus/surfmatch.hpp"

namespace mrus {

void TrajectoryPlan::validate() const {
  if (!start.allFinite() || !end.allFinite() || !std::isfinite(sample_spacing)) {
    throw Error(ErrorCode::InvalidArgument, "trajectory plan has non-finite values");
  }
  if (!(sample_spacing > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "trajectory sample spacing must be positive");
  }
  const double length = direction().norm();
  if (!(length > sample_spacing)) {
    throw Error(ErrorCode::Degenerate, "trajectory length " + std::to_string(length) +
                                           " mm does not exceed the sample spacing");
  }
}

std::vector<Vec3> sample_line(const TrajectoryPlan& plan) {
  plan.validate();
  const Vec3 d = plan.direction();
  const double length = d.norm();
  const Vec3 unit = d / length;
  const int last = static_cast<int>(std::floor(length / plan.sample_spacing + 1e-9));
  std::vector<Vec3> out;
  out.reserve(static_cast<std::size_t>(last) + 2);
  for (int j = 0; j <= last; ++j) out.push_back(plan.start + j * plan.sample_spacing * unit);
  if ((plan.end - out.back()).norm() >= 0.5 * plan.sample_spacing) out.push_back(plan.end);
  return out;
}

namespace {

Vec3 tangent_of(const Vec3& v, const Vec3& n) { return v - v.dot(n) * n; }

}  // namespace

std::vector<ScanPose> project_to_surface(std::span<const Vec3> samples, const SurfaceCloud& surface,
                                         const Vec3& travel) {
  if (surface.empty()) throw Error(ErrorCode::EmptyInput, "cannot project onto an empty surface");
  if (!surface.has_normals()) {
    throw Error(ErrorCode::InvalidArgument, "surface projection needs a cloud with normals");
  }
  const NearestNeighborIndex index(surface.points);
  std::vector<ScanPose> out;
  std::optional<std::size_t> previous_hit;
  std::optional<Vec3> previous_x;
  for (const Vec3& q : samples) {
    const auto hit = index.query(q);
    if (previous_hit && *previous_hit == hit.index) continue;
    previous_hit = hit.index;

    const Vec3 n = surface.normals[hit.index].normalized();
    Vec3 x = tangent_of(travel, n);
    if (x.norm() < 1e-9 * std::max(1.0, travel.norm())) {
      if (previous_x) {
        x = tangent_of(*previous_x, n);
      }
      if (!previous_x || x.norm() < 1e-9) {
        int axis = 0;
        for (int a = 1; a < 3; ++a) {
          if (std::abs(n[a]) < std::abs(n[axis])) axis = a;
        }
        x = tangent_of(Vec3::Unit(axis), n);
      }
    }
    x.normalize();
    const Vec3 z = -n;
    const Vec3 y = z.cross(x);
    Mat3 r;
    r.col(0) = x;
    r.col(1) = y;
    r.col(2) = z;
    previous_x = x;
    out.push_back({hit.point, n, RigidTransform(r, hit.point, FrameId::Tool, FrameId::World)});
  }
  return out;
}

std::vector<ScanPose> plan_in_world(const TrajectoryPlan& plan, const CalibrationState& state,
                                    const SurfaceCloud& camera_surface) {
  if (camera_surface.frame != FrameId::Camera) {
    throw Error(ErrorCode::FrameMismatch, "planning surface must be in the Camera frame, got " +
                                              std::string(frame_name(camera_surface.frame)));
  }
  const RigidTransform image_to_world = chain_patient_to_world(state);
  std::vector<Vec3> samples = sample_line(plan);
  for (auto& q : samples) q = image_to_world.apply(q);
  const SurfaceCloud world_surface = transform_cloud(state.camera_to_world(), camera_surface);
  return project_to_surface(samples, world_surface, image_to_world.apply_vector(plan.direction()));
}

void write_plan(const std::filesystem::path& path, const TrajectoryPlan& plan) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::Io, "cannot write plan file " + path.string());
  os.precision(17);
  os << "mrus-plan 1\n";
  os << "start " << plan.start.x() << ' ' << plan.start.y() << ' ' << plan.start.z() << '\n';
  os << "end " << plan.end.x() << ' ' << plan.end.y() << ' ' << plan.end.z() << '\n';
  os << "spacing " << plan.sample_spacing << '\n';
  if (!os) throw Error(ErrorCode::Io, "failed writing plan file " + path.string());
}

TrajectoryPlan read_plan(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::Io, "cannot open plan file " + path.string());
  std::string magic, k1, k2, k3;
  int format = 0;
  TrajectoryPlan p;
  is >> magic >> format >> k1 >> p.start.x() >> p.start.y() >> p.start.z() >> k2 >> p.end.x() >>
      p.end.y() >> p.end.z() >> k3 >> p.sample_spacing;
  if (!is || magic != "mrus-plan" || format != 1 || k1 != "start" || k2 != "end" ||
      k3 != "spacing") {
    throw Error(ErrorCode::Malformed, "malformed plan file " + path.string());
  }
  p.validate();
  return p;
}

void write_poses(const std::filesystem::path& path, std::span<const ScanPose> poses) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::Io, "cannot write pose file " + path.string());
  os << "mrus-poses 1\ncount " << poses.size() << '\n';
  for (const auto& p : poses) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "normal %.12g %.12g %.12g\n", p.normal.x(), p.normal.y(),
                  p.normal.z());
    os << buf;
    write_transform(os, p.tool_pose);
  }
  if (!os) throw Error(ErrorCode::Io, "failed writing pose file " + path.string());
}

std::vector<ScanPose> read_poses(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::Io, "cannot open pose file " + path.string());
  std::string magic, key;
  int format = 0;
  std::size_t count = 0;
  is >> magic >> format >> key >> count;
  if (!is || magic != "mrus-poses" || format != 1 || key != "count") {
    throw Error(ErrorCode::Malformed, "malformed pose file " + path.string());
  }
  std::vector<ScanPose> out;
  for (std::size_t i = 0; i < count; ++i) {
    ScanPose p;
    is >> key >> p.normal.x() >> p.normal.y() >> p.normal.z();
    if (!is || key != "normal") throw Error(ErrorCode::Malformed, "malformed pose entry in " + path.string());
    p.tool_pose = read_rigid(is);
    p.surface_point = p.tool_pose.translation();
    out.push_back(p);
  }
  return out;
}

}  // namespace mrus
