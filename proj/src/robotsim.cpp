#include "mrus/robotsim.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "mrus/surfmatch.hpp"

namespace mrus {

namespace {

constexpr double kMmToM = 1e-3;

}  // namespace

void StiffnessParams::validate() const {
  if (!(k_scan > 0.0) || !(k_scan <= k_lateral)) {
    throw Error(ErrorCode::InvalidArgument, "stiffness needs 0 < k_scan <= k_lateral");
  }
  if (!(damping >= 0.0 && damping <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "normalized damping must be in [0, 1]");
  }
  if (!(f_desired > 0.0) || !(f_desired < f_abort)) {
    throw Error(ErrorCode::InvalidArgument, "forces need 0 < f_desired < f_abort");
  }
  if (!(mass > 0.0)) throw Error(ErrorCode::InvalidArgument, "probe mass must be positive");
}

PlaneContact::PlaneContact(const Vec3& point, const Vec3& normal)
    : point_(point), normal_(normal.normalized()) {
  if (!(normal.norm() > 0.0)) throw Error(ErrorCode::InvalidArgument, "plane normal is zero");
}

std::optional<Penetration> PlaneContact::probe(const Vec3& p) const {
  const double d = (p - point_).dot(normal_);
  if (d >= 0.0) return std::nullopt;
  return Penetration{-d, normal_};
}

EllipsoidContact::EllipsoidContact(const RigidTransform& pose, const Vec3& radii)
    : pose_(pose), inverse_(invert(pose)), radii_(radii) {
  if (!(radii.minCoeff() > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "ellipsoid radii must be positive");
  }
}

std::optional<Penetration> EllipsoidContact::probe(const Vec3& p) const {
  const Vec3 q = inverse_.apply(p);
  const double gauge = q.cwiseQuotient(radii_).norm();
  if (gauge >= 1.0) return std::nullopt;
  if (gauge < 1e-12) return Penetration{radii_.minCoeff(), pose_.apply_vector(Vec3::UnitZ())};
  const Vec3 grad = q.cwiseQuotient(radii_.cwiseProduct(radii_)) / gauge;
  const double g = grad.norm();
  return Penetration{(1.0 - gauge) / g, pose_.apply_vector(grad / g)};
}

struct CloudContact::Impl {
  NearestNeighborIndex index;
  std::vector<Vec3> normals;
};

CloudContact::CloudContact(const SurfaceCloud& surface) : impl_(std::make_unique<Impl>()) {
  if (surface.empty()) throw Error(ErrorCode::EmptyInput, "contact surface is empty");
  if (!surface.has_normals()) {
    throw Error(ErrorCode::InvalidArgument, "contact surface needs normals");
  }
  if (surface.frame != FrameId::World) {
    throw Error(ErrorCode::FrameMismatch, "contact surface must be in the World frame");
  }
  impl_->index = NearestNeighborIndex(surface.points);
  impl_->normals = surface.normals;
}

CloudContact::~CloudContact() = default;

std::optional<Penetration> CloudContact::probe(const Vec3& p) const {
  const auto hit = impl_->index.query(p);
  const Vec3& n = impl_->normals[hit.index];
  const double d = (p - hit.point).dot(n);
  if (d >= 0.0) return std::nullopt;
  return Penetration{-d, n};
}

void ContactModel::add(std::shared_ptr<const ContactShape> shape, double stiffness) {
  bodies.push_back({std::move(shape), stiffness});
  validate();
}

void ContactModel::validate() const {
  for (const auto& b : bodies) {
    if (!b.shape) throw Error(ErrorCode::InvalidArgument, "contact body without a shape");
    if (!(b.stiffness > 0.0)) throw Error(ErrorCode::InvalidArgument, "skin stiffness must be > 0");
  }
}

Vec3 ContactModel::force(const Vec3& p) const {
  Vec3 f = Vec3::Zero();
  for (const auto& b : bodies) {
    if (const auto pen = b.shape->probe(p)) f += b.stiffness * pen->depth * kMmToM * pen->normal;
  }
  return f;
}

StepResult step_controller(const ProbeState& state, const Setpoint& setpoint,
                           const StiffnessParams& params, const ContactModel& contact, double dt) {
  if (!(dt > 0.0 && dt <= 0.01)) throw Error(ErrorCode::InvalidArgument, "dt must be in (0, 0.01] s");
  const Vec3 a = setpoint.orientation.col(2).normalized();
  const Mat3 axial = a * a.transpose();
  const Mat3 lateral = Mat3::Identity() - axial;
  const double c_scan = params.damping * 2.0 * std::sqrt(params.k_scan * params.mass);
  const double c_lat = params.damping * 2.0 * std::sqrt(params.k_lateral * params.mass);

  const Vec3 error = setpoint.position - state.position;
  StepResult out;
  out.commanded_force = (params.k_scan * axial + params.k_lateral * lateral) * error * kMmToM -
                        (c_scan * axial + c_lat * lateral) * state.velocity * kMmToM;
  out.contact_force = contact.force(state.position);
  const Vec3 accel = (out.commanded_force + out.contact_force) / params.mass / kMmToM;  // mm/s²
  out.state.velocity = state.velocity + dt * accel;
  out.state.position = state.position + dt * out.state.velocity;
  out.state.orientation = setpoint.orientation;
  return out;
}

void SweepOptions::validate() const {
  if (!(rate_hz > 0.0) || !(dt > 0.0 && dt <= 0.01) || !(speed > 0.0) ||
      !(approach_height >= 0.0) || !(force_gain >= 0.0) || !(position_tolerance > 0.0) ||
      !(orientation_tolerance_deg > 0.0) || !(settle_band > 0.0) || !(segment_timeout > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "sweep options out of range");
  }
  if (1.0 / rate_hz < dt) throw Error(ErrorCode::InvalidArgument, "frame rate exceeds control rate");
}

SweepResult run_sweep(std::span<const ScanPose> poses, const StiffnessParams& params,
                      const ContactModel& contact, const SweepOptions& options) {
  params.validate();
  options.validate();
  contact.validate();
  if (poses.size() < 2) {
    throw Error(ErrorCode::InvalidArgument, "a sweep needs at least 2 poses");
  }
  for (const auto& p : poses) {
    if (p.tool_pose.from() != FrameId::Tool || p.tool_pose.to() != FrameId::World) {
      throw Error(ErrorCode::FrameMismatch, "scan poses must map Tool -> World");
    }
  }

  const double dt = options.dt;
  const long frame_every = std::max(1L, std::lround(1.0 / (options.rate_hz * dt)));
  const double base_offset = params.f_desired / params.k_scan / kMmToM;  // mm
  double extra_offset = 0.0;

  ProbeState state;
  state.position = poses[0].surface_point + options.approach_height * poses[0].normal;
  state.orientation = poses[0].tool_pose.rotation();

  SweepResult out;
  auto emit = [&](double t, double force, int segment) {
    out.frames.push_back({t, state.pose(), force, segment});
  };
  emit(0.0, contact.force(state.position).norm(), 0);

  std::size_t target = 0;
  Vec3 nominal = state.position;  // path point, moves toward the target surface point
  double segment_time = 0.0;
  double force = 0.0;
  long step = 0;
  while (target < poses.size()) {
    const ScanPose& goal = poses[target];
    const Vec3 towards = goal.surface_point - nominal;
    const double remaining = towards.norm();
    const double advance = options.speed * dt;
    nominal = remaining <= advance ? goal.surface_point : Vec3(nominal + towards * (advance / remaining));

    Setpoint sp;
    sp.orientation = goal.tool_pose.rotation();
    const Vec3 axis = sp.orientation.col(2);
    sp.position = nominal + (base_offset + extra_offset) * axis;

    const StepResult r = step_controller(state, sp, params, contact, dt);
    state = r.state;
    ++step;
    if (nominal == goal.surface_point) segment_time += dt;
    force = r.contact_force.norm();
    const double t = step * dt;

    if (force > params.f_abort) {
      out.aborted = true;
      out.abort_step = step;
      emit(t, force, static_cast<int>(target));
      out.duration = t;
      return out;
    }
    if (force > 0.0) {
      extra_offset += dt * options.force_gain * (params.f_desired - force) / params.k_scan / kMmToM;
      extra_offset = std::clamp(extra_offset, -base_offset, 2.0 * base_offset);
    }

    // Advance through every target already satisfied at this instant.
    while (target < poses.size() && (nominal - poses[target].surface_point).norm() == 0.0) {
      const ScanPose& g = poses[target];
      const Vec3 a = g.tool_pose.rotation().col(2);
      const Vec3 d = state.position - g.surface_point;
      const double lateral = (d - d.dot(a) * a).norm();
      const double axial = std::abs(d.dot(a));
      const double angle = rotation_angle_deg(g.tool_pose.rotation().transpose() * state.orientation);
      const bool placed = lateral <= options.position_tolerance &&
                          angle <= options.orientation_tolerance_deg;
      const bool settled = force > 0.0 && std::abs(force - params.f_desired) <= options.settle_band;
      if (!(placed && (settled || axial <= options.position_tolerance))) break;
      ++target;
      segment_time = 0.0;
    }
    if (segment_time > options.segment_timeout) {
      throw Error(ErrorCode::Timeout, "scan pose " + std::to_string(target) + " not reached within " +
                                          std::to_string(options.segment_timeout) + " s");
    }
    if (target >= poses.size() || step % frame_every == 0) {
      emit(t, force, static_cast<int>(std::min(target, poses.size() - 1)));
    }
  }
  out.duration = step * dt;
  return out;
}

void write_sweep(const std::filesystem::path& path, const SweepResult& sweep,
                 const StiffnessParams& params, const SweepOptions& options) {
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::Io, "cannot write sweep file " + path.string());
  os.precision(17);
  os << "mrus-sweep 1\n";
  os << "k_scan " << params.k_scan << "\nk_lateral " << params.k_lateral << "\ndamping "
     << params.damping << "\nf_desired " << params.f_desired << "\nf_abort " << params.f_abort
     << "\nrate_hz " << options.rate_hz << "\ndt " << options.dt << "\nspeed " << options.speed
     << '\n';
  os << "aborted " << (sweep.aborted ? 1 : 0) << "\nabort_step " << sweep.abort_step
     << "\nduration " << sweep.duration << '\n';
  os << "frames " << sweep.frames.size() << '\n';
  os << "# t segment force r00 r01 r02 tx r10 r11 r12 ty r20 r21 r22 tz\n";
  for (const auto& f : sweep.frames) {
    const Mat4 m = f.probe_pose.matrix();
    char buf[512];
    int n = std::snprintf(buf, sizeof buf, "%.9f %d %.12g", f.timestamp, f.segment, f.contact_force);
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) n += std::snprintf(buf + n, sizeof buf - n, " %.12g", m(r, c));
    }
    os << buf << '\n';
  }
  if (!os) throw Error(ErrorCode::Io, "failed writing sweep file " + path.string());
}

SweepResult read_sweep(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::Io, "cannot open sweep file " + path.string());
  std::string line, key;
  SweepResult out;
  std::size_t count = 0;
  bool header = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    if (line[0] == '#') break;
    std::istringstream ls(line);
    ls >> key;
    if (key == "mrus-sweep") {
      header = true;
    } else if (key == "aborted") {
      int a = 0;
      ls >> a;
      out.aborted = a != 0;
    } else if (key == "abort_step") {
      ls >> out.abort_step;
    } else if (key == "duration") {
      ls >> out.duration;
    } else if (key == "frames") {
      ls >> count;
    }
  }
  if (!header) throw Error(ErrorCode::Malformed, "not a sweep file: " + path.string());
  for (std::size_t i = 0; i < count; ++i) {
    TrackedFrame f;
    Mat4 m = Mat4::Identity();
    is >> f.timestamp >> f.segment >> f.contact_force;
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 4; ++c) is >> m(r, c);
    }
    if (!is) throw Error(ErrorCode::Malformed, "truncated sweep file " + path.string());
    f.probe_pose = RigidTransform::from_matrix(m, FrameId::Tool, FrameId::World);
    out.frames.push_back(f);
  }
  return out;
}

}  // namespace mrus
