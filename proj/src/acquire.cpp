#include "mrus/acquire.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>
#include <sstream>

namespace mrus {

void UsSimParams::validate() const {
  if (!(gain > 0.0)) throw Error(ErrorCode::InvalidArgument, "US intensity gain must be positive");
  if (!(speckle >= 0.0 && speckle < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "speckle amplitude must be in [0, 1)");
  }
  if (!(attenuation >= 0.0)) throw Error(ErrorCode::InvalidArgument, "attenuation must be >= 0");
  if (!(fan_half_angle_deg > 0.0 && fan_half_angle_deg < 90.0)) {
    throw Error(ErrorCode::InvalidArgument, "fan half angle must be in (0, 90) deg");
  }
}

UsFrame acquire_frame(const ScalarVolume& tissue, const RigidTransform& tissue_to_world,
                      const RigidTransform& probe_pose, const CalibrationState& state,
                      const UsSimParams& params, std::uint64_t frame_index) {
  params.validate();
  if (!probe_pose.matrix().allFinite()) {
    throw Error(ErrorCode::InvalidArgument, "probe pose is not finite");
  }
  if (tissue_to_world.from() != tissue.frame() || tissue_to_world.to() != FrameId::World) {
    throw Error(ErrorCode::FrameMismatch, "tissue placement must map the volume frame to World");
  }
  const UsImageGeometry& g = state.us_geometry();
  UsFrame frame;
  frame.geometry = g;
  frame.pose = chain_us_to_world(state, end_effector_for_tool(state, probe_pose));
  frame.image.assign(static_cast<std::size_t>(g.width) * g.height, 0.0f);

  const AffineTransform us_to_tissue = compose(invert(tissue_to_world), frame.pose);
  std::mt19937_64 rng(params.seed * 0x9E3779B97F4A7C15ULL + frame_index);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  const double tan_fan = std::tan(deg2rad(params.fan_half_angle_deg));
  for (int v = 0; v < g.height; ++v) {
    const double depth = std::max(0.0, (v + g.t_y) * g.s_y);  // mm below the apex
    const double attenuation = std::exp(-params.attenuation * depth);
    for (int u = 0; u < g.width; ++u) {
      const double lateral = std::abs((u + g.t_x) * g.s_x);
      const double noise = params.speckle > 0.0 ? 1.0 + params.speckle * unit(rng) : 1.0;
      if (params.fan_mask && lateral > depth * tan_fan) continue;
      const double t = sample_trilinear(tissue, us_to_tissue.apply(Vec3(u, v, 0.0)));
      const double echo = (params.gain * t + params.offset) * attenuation * noise;
      frame.image[static_cast<std::size_t>(v) * g.width + u] = static_cast<float>(echo);
    }
  }
  return frame;
}

std::vector<UsFrame> acquire_sweep(std::span<const TrackedFrame> tracked, const ScalarVolume& tissue,
                                   const RigidTransform& tissue_to_world,
                                   const CalibrationState& state, const UsSimParams& params) {
  if (tracked.empty()) throw Error(ErrorCode::EmptyInput, "no tracked frames to acquire");
  std::vector<UsFrame> out;
  out.reserve(tracked.size());
  for (std::size_t i = 0; i < tracked.size(); ++i) {
    UsFrame f = acquire_frame(tissue, tissue_to_world, tracked[i].probe_pose, state, params, i);
    f.timestamp = tracked[i].timestamp;
    out.push_back(std::move(f));
  }
  return out;
}

void write_bundle(const std::filesystem::path& dir, std::span<const UsFrame> frames) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::Io, "cannot create bundle directory " + dir.string());
  std::ofstream index(dir / "index.txt");
  if (!index) throw Error(ErrorCode::Io, "cannot write bundle index in " + dir.string());
  index.precision(17);
  index << "mrus-bundle 1\nframes " << frames.size() << '\n';
  for (std::size_t i = 0; i < frames.size(); ++i) {
    const UsFrame& f = frames[i];
    char name[32];
    std::snprintf(name, sizeof name, "frame_%05zu.raw", i);
    const auto& g = f.geometry;
    index << "frame " << name << ' ' << f.timestamp << ' ' << g.s_x << ' ' << g.s_y << ' ' << g.t_x
          << ' ' << g.t_y << ' ' << g.width << ' ' << g.height << '\n';
    write_transform(index, f.pose);
    std::ofstream raw(dir / name, std::ios::binary);
    raw.write(reinterpret_cast<const char*>(f.image.data()),
              static_cast<std::streamsize>(f.image.size() * sizeof(float)));
    if (!raw) throw Error(ErrorCode::Io, "failed writing " + (dir / name).string());
  }
  if (!index) throw Error(ErrorCode::Io, "failed writing bundle index in " + dir.string());
}

std::vector<UsFrame> read_bundle(const std::filesystem::path& dir) {
  std::ifstream index(dir / "index.txt");
  if (!index) throw Error(ErrorCode::Io, "cannot open bundle index in " + dir.string());
  std::string magic, key;
  int format = 0;
  std::size_t count = 0;
  index >> magic >> format >> key >> count;
  if (!index || magic != "mrus-bundle" || format != 1 || key != "frames") {
    throw Error(ErrorCode::Malformed, "malformed bundle index in " + dir.string());
  }
  std::vector<UsFrame> out;
  for (std::size_t i = 0; i < count; ++i) {
    UsFrame f;
    std::string name;
    auto& g = f.geometry;
    index >> key >> name >> f.timestamp >> g.s_x >> g.s_y >> g.t_x >> g.t_y >> g.width >> g.height;
    if (!index || key != "frame") throw Error(ErrorCode::Malformed, "malformed bundle entry");
    g.validate();
    f.pose = read_affine(index);
    f.image.resize(static_cast<std::size_t>(g.width) * g.height);
    std::ifstream raw(dir / name, std::ios::binary);
    raw.read(reinterpret_cast<char*>(f.image.data()),
             static_cast<std::streamsize>(f.image.size() * sizeof(float)));
    if (!raw) throw Error(ErrorCode::Io, "cannot read " + (dir / name).string());
    out.push_back(std::move(f));
  }
  return out;
}

}  // namespace mrus
