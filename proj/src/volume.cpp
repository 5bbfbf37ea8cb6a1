#include "mrus/volume.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <random>

namespace mrus {

// --- containers -----------------------------------------------------------

void GridGeometry::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] <= 0) throw Error(ErrorCode::InvalidArgument, "grid dims must be positive");
    if (!(spacing[a] > 0.0)) {
      throw Error(ErrorCode::InvalidArgument, "grid spacing must be positive");
    }
  }
}

bool GridGeometry::same_shape(const GridGeometry& other) const {
  return dims == other.dims && spacing == other.spacing && origin == other.origin &&
         frame == other.frame;
}

ScalarVolume::ScalarVolume(const GridGeometry& geometry, float fill)
    : geometry_(geometry) {
  geometry_.validate();
  data_.assign(geometry_.size(), fill);
}

ScalarVolume::ScalarVolume(const GridGeometry& geometry, std::vector<float> data)
    : geometry_(geometry), data_(std::move(data)) {
  geometry_.validate();
  if (data_.size() != geometry_.size()) {
    throw Error(ErrorCode::InvalidArgument, "volume data length does not match dims");
  }
}

BinaryMask::BinaryMask(const GridGeometry& geometry, bool fill) : geometry_(geometry) {
  geometry_.validate();
  data_.assign(geometry_.size(), fill ? 1 : 0);
}

std::size_t BinaryMask::count() const {
  return static_cast<std::size_t>(std::count(data_.begin(), data_.end(), 1));
}

PointCloud transform_cloud(const RigidTransform& t, const PointCloud& cloud) {
  if (cloud.frame != t.from()) {
    throw Error(ErrorCode::FrameMismatch,
                "cloud is in frame '" + std::string(frame_name(cloud.frame)) +
                    "' but transform starts in '" + std::string(frame_name(t.from())) +
                    "'");
  }
  PointCloud out;
  out.frame = t.to();
  out.points.reserve(cloud.size());
  for (const auto& p : cloud.points) out.points.push_back(t.apply(p));
  out.normals.reserve(cloud.normals.size());
  for (const auto& n : cloud.normals) out.normals.push_back(t.apply_vector(n));
  return out;
}

// --- phantom --------------------------------------------------------------

namespace {

bool inside_ellipsoid(const Vec3& p, const Vec3& center, const Vec3& radii,
                      double margin = 0.0) {
  const Vec3 q = (p - center).cwiseQuotient(radii + Vec3::Constant(margin));
  return q.squaredNorm() <= 1.0;
}

/// Partial-volume occupancy of an ellipsoid at p, from the first-order signed
/// distance f/|∇f| with f = Σ(x/a)² - 1.
double ellipsoid_occupancy(const Vec3& p, const Vec3& center, const Vec3& radii,
                           double voxel) {
  const Vec3 d = p - center;
  const Vec3 q = d.cwiseQuotient(radii);
  const double f = q.squaredNorm() - 1.0;
  const Vec3 grad = 2.0 * d.cwiseQuotient(radii.cwiseProduct(radii));
  const double g = grad.norm();
  if (g < 1e-12) return f < 0.0 ? 1.0 : 0.0;
  const double dist = f / g;
  return std::clamp(0.5 - dist / voxel, 0.0, 1.0);
}

}  // namespace

void PhantomSpec::validate() const {
  for (int a = 0; a < 3; ++a) {
    if (dims[a] <= 0 || !(spacing[a] > 0.0)) {
      throw Error(ErrorCode::Config, "phantom grid dims and spacing must be positive");
    }
    if (!(torso_half_axes[a] > 0.0)) {
      throw Error(ErrorCode::Config, "torso half-axes must be positive");
    }
  }
  if (noise_amplitude < 0.0) throw Error(ErrorCode::Config, "noise amplitude must be >= 0");
  if (!(echo_max > echo_min)) throw Error(ErrorCode::Config, "echo range is empty");
  for (std::size_t i = 0; i < inclusions.size(); ++i) {
    const auto& inc = inclusions[i];
    if ((inc.radii.array() <= 0.0).any()) {
      throw Error(ErrorCode::Config, "inclusion radii must be positive");
    }
    // Every extreme point of the inclusion's bounding box along its axes must
    // lie inside the torso.
    for (int a = 0; a < 3; ++a) {
      for (double s : {-1.0, 1.0}) {
        Vec3 p = inc.center;
        p[a] += s * inc.radii[a];
        if (!inside_ellipsoid(p, Vec3::Zero(), torso_half_axes)) {
          throw Error(ErrorCode::Config,
                      "inclusion " + std::to_string(i) + " extends outside the torso");
        }
      }
    }
  }
}

GridGeometry PhantomSpec::grid() const {
  GridGeometry g;
  g.dims = dims;
  g.spacing = spacing;
  for (int a = 0; a < 3; ++a) g.origin[a] = -0.5 * (dims[a] - 1) * spacing[a];
  g.frame = FrameId::MRI;
  return g;
}

PhantomSpec PhantomSpec::default_spec() {
  PhantomSpec s;
  s.inclusions = {
      {{-20.0, -8.0, 10.0}, {8.0, 7.0, 7.0}, 260.0},
      {{18.0, 6.0, 8.0}, {8.0, 10.0, 7.0}, 115.0},
      {{0.0, -12.0, -4.0}, {12.0, 6.0, 6.0}, 320.0},
      {{-10.0, 12.0, 0.0}, {6.0, 6.0, 9.0}, 230.0},
      {{25.0, -10.0, -6.0}, {7.0, 7.0, 7.0}, 125.0},
      {{5.0, 4.0, 22.0}, {5.0, 5.0, 4.0}, 280.0},
      {{-28.0, 6.0, -8.0}, {6.0, 8.0, 6.0}, 200.0},
      {{10.0, -2.0, -18.0}, {10.0, 8.0, 5.0}, 300.0},
      {{0.0, 10.0, 12.0}, {28.0, 3.0, 3.0}, 350.0},
  };
  return s;
}

Phantom make_phantom(const PhantomSpec& spec, std::uint64_t seed) {
  spec.validate();
  const GridGeometry grid = spec.grid();
  const double voxel = spec.spacing.mean();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> echo(spec.echo_min, spec.echo_max);

  // Echogenicity per region; each inclusion must stand out from the torso.
  const double torso_echo = echo(rng);
  std::vector<double> inclusion_echo;
  for (std::size_t i = 0; i < spec.inclusions.size(); ++i) {
    double e = echo(rng);
    for (int tries = 0; tries < 64 && std::abs(e - torso_echo) < 30.0; ++tries) e = echo(rng);
    inclusion_echo.push_back(e);
  }

  Phantom out{ScalarVolume(grid), ScalarVolume(grid)};
  auto& mri = out.mri.data();
  auto& tissue = out.tissue.data();
  const auto& dims = grid.dims;
  const Vec3 center = Vec3::Zero();

  for (int k = 0; k < dims[2]; ++k) {
    for (int j = 0; j < dims[1]; ++j) {
      for (int i = 0; i < dims[0]; ++i) {
        const Vec3 p = grid.position(i, j, k);
        const double o = ellipsoid_occupancy(p, center, spec.torso_half_axes, voxel);
        const std::size_t idx = grid.index(i, j, k);
        mri[idx] = static_cast<float>(spec.background_intensity * (1.0 - o) +
                                      spec.torso_intensity * o);
        tissue[idx] = static_cast<float>(torso_echo * o);
      }
    }
  }

  for (std::size_t n = 0; n < spec.inclusions.size(); ++n) {
    const auto& inc = spec.inclusions[n];
    const Vec3 lo = grid.to_voxel(inc.center - inc.radii).array().floor() - 1.0;
    const Vec3 hi = grid.to_voxel(inc.center + inc.radii).array().ceil() + 1.0;
    for (int k = std::max(0, int(lo.z())); k <= std::min(dims[2] - 1, int(hi.z())); ++k) {
      for (int j = std::max(0, int(lo.y())); j <= std::min(dims[1] - 1, int(hi.y())); ++j) {
        for (int i = std::max(0, int(lo.x())); i <= std::min(dims[0] - 1, int(hi.x())); ++i) {
          const double o =
              ellipsoid_occupancy(grid.position(i, j, k), inc.center, inc.radii, voxel);
          if (o <= 0.0) continue;
          const std::size_t idx = grid.index(i, j, k);
          mri[idx] = static_cast<float>(mri[idx] * (1.0 - o) + inc.mri_intensity * o);
          tissue[idx] = static_cast<float>(tissue[idx] * (1.0 - o) + inclusion_echo[n] * o);
        }
      }
    }
  }

  if (spec.noise_amplitude > 0.0) {
    std::uniform_real_distribution<double> noise(-spec.noise_amplitude, spec.noise_amplitude);
    for (auto& v : mri) v = static_cast<float>(std::max(0.0, v + noise(rng)));
  }
  return out;
}

// --- masks and morphology -------------------------------------------------

BinaryMask threshold(const ScalarVolume& v, double tau) {
  BinaryMask m(v.geometry());
  auto& out = m.data();
  const auto& in = v.data();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] >= tau ? 1 : 0;
  return m;
}

namespace {

std::vector<std::array<int, 3>> ball_offsets(int radius) {
  std::vector<std::array<int, 3>> off;
  for (int k = -radius; k <= radius; ++k)
    for (int j = -radius; j <= radius; ++j)
      for (int i = -radius; i <= radius; ++i)
        if (i * i + j * j + k * k <= radius * radius) off.push_back({i, j, k});
  return off;
}

template <bool kDilate>
BinaryMask morph(const BinaryMask& m, int radius) {
  if (radius < 0) throw Error(ErrorCode::InvalidArgument, "morphology radius must be >= 0");
  if (radius == 0) return m;
  const auto& g = m.geometry();
  const auto off = ball_offsets(radius);
  BinaryMask out(g);
  for (int k = 0; k < g.dims[2]; ++k) {
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i) {
        bool v = !kDilate;
        for (const auto& o : off) {
          const bool s = m.get(i + o[0], j + o[1], k + o[2], /*outside=*/!kDilate);
          if (kDilate && s) { v = true; break; }
          if (!kDilate && !s) { v = false; break; }
        }
        out.set(i, j, k, v);
      }
    }
  }
  return out;
}

constexpr std::array<std::array<int, 3>, 6> kFace{{
    {1, 0, 0}, {-1, 0, 0}, {0, 1, 0}, {0, -1, 0}, {0, 0, 1}, {0, 0, -1}}};

// Offsets within the cube of half-width r, centre excluded.
std::vector<std::array<int, 3>> cube_offsets(int r) {
  std::vector<std::array<int, 3>> n;
  for (int k = -r; k <= r; ++k)
    for (int j = -r; j <= r; ++j)
      for (int i = -r; i <= r; ++i)
        if (i || j || k) n.push_back({i, j, k});
  return n;
}

std::vector<std::array<int, 3>> neighbours26() { return cube_offsets(1); }

// Normals from a 5x5x5 window: 3x3x3 windows on a voxel staircase
// quantize the PCA axis too coarsely.
constexpr int kNormalWindow = 2;

/// Labels 26-connected components of `set`; returns labels (−1 unset) and sizes.
std::pair<std::vector<int>, std::vector<std::size_t>> label_components(
    const GridGeometry& g, const std::vector<std::uint8_t>& set) {
  const auto nb = neighbours26();
  std::vector<int> label(set.size(), -1);
  std::vector<std::size_t> sizes;
  std::deque<std::array<int, 3>> queue;
  for (int k = 0; k < g.dims[2]; ++k) {
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i) {
        const std::size_t idx = g.index(i, j, k);
        if (!set[idx] || label[idx] >= 0) continue;
        const int id = static_cast<int>(sizes.size());
        sizes.push_back(0);
        label[idx] = id;
        queue.push_back({i, j, k});
        while (!queue.empty()) {
          const auto c = queue.front();
          queue.pop_front();
          ++sizes[id];
          for (const auto& o : nb) {
            const int x = c[0] + o[0], y = c[1] + o[1], z = c[2] + o[2];
            if (!g.inside(x, y, z)) continue;
            const std::size_t n = g.index(x, y, z);
            if (set[n] && label[n] < 0) {
              label[n] = id;
              queue.push_back({x, y, z});
            }
          }
        }
      }
    }
  }
  return {std::move(label), std::move(sizes)};
}

}  // namespace

BinaryMask dilate(const BinaryMask& m, int radius) { return morph<true>(m, radius); }
BinaryMask erode(const BinaryMask& m, int radius) { return morph<false>(m, radius); }

BinaryMask morph_close(const BinaryMask& m, int radius) {
  return erode(dilate(m, radius), radius);
}

int count_components(const BinaryMask& m) {
  return static_cast<int>(label_components(m.geometry(), m.data()).second.size());
}

SurfaceCloud extract_surface(const BinaryMask& m) {
  const auto& g = m.geometry();
  if (m.count() == 0) throw Error(ErrorCode::EmptyInput, "cannot extract a surface from an empty mask");

  std::vector<std::uint8_t> boundary(g.size(), 0);
  Vec3 interior = Vec3::Zero();
  std::size_t n_true = 0;
  for (int k = 0; k < g.dims[2]; ++k) {
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i) {
        if (!m.at(i, j, k)) continue;
        interior += g.position(i, j, k);
        ++n_true;
        for (const auto& f : kFace) {
          if (!m.get(i + f[0], j + f[1], k + f[2], false)) {
            boundary[g.index(i, j, k)] = 1;
            break;
          }
        }
      }
    }
  }
  interior /= static_cast<double>(n_true);

  const auto [label, sizes] = label_components(g, boundary);
  const int best = static_cast<int>(std::max_element(sizes.begin(), sizes.end()) - sizes.begin());

  SurfaceCloud out;
  out.frame = g.frame;
  const auto nb = cube_offsets(kNormalWindow);
  std::vector<Vec3> pts;
  pts.reserve(nb.size() + 1);
  for (int k = 0; k < g.dims[2]; ++k) {
    for (int j = 0; j < g.dims[1]; ++j) {
      for (int i = 0; i < g.dims[0]; ++i) {
        if (label[g.index(i, j, k)] != best) continue;
        const Vec3 p = g.position(i, j, k);
        Vec3 mean = p;
        pts.assign(1, p);
        for (const auto& o : nb) {
          const int x = i + o[0], y = j + o[1], z = k + o[2];
          if (g.inside(x, y, z) && label[g.index(x, y, z)] == best) {
            pts.push_back(g.position(x, y, z));
            mean += pts.back();
          }
        }
        const int count = static_cast<int>(pts.size());
        mean /= count;
        Mat3 cov = Mat3::Zero();
        for (const Vec3& q : pts) {
          const Vec3 d = q - mean;
          cov += d * d.transpose();
        }
        Eigen::SelfAdjointEigenSolver<Mat3> es(cov);
        Vec3 n = es.eigenvectors().col(0);
        if (count < 3 || !n.allFinite()) n = p - interior;
        if (n.dot(p - interior) < 0.0) n = -n;
        if (n.norm() < 1e-12) n = Vec3::UnitZ();
        out.points.push_back(p);
        out.normals.push_back(n.normalized());
      }
    }
  }
  return out;
}

// --- sampling -------------------------------------------------------------

double sample_trilinear(const ScalarVolume& v, const Vec3& p) {
  const auto& g = v.geometry();
  const Vec3 c = g.to_voxel(p);
  const auto& d = g.dims;
  if (!(c.x() >= 0.0 && c.y() >= 0.0 && c.z() >= 0.0 && c.x() <= d[0] - 1 &&
        c.y() <= d[1] - 1 && c.z() <= d[2] - 1)) {
    return 0.0;
  }
  const int i0 = std::min(static_cast<int>(c.x()), std::max(d[0] - 2, 0));
  const int j0 = std::min(static_cast<int>(c.y()), std::max(d[1] - 2, 0));
  const int k0 = std::min(static_cast<int>(c.z()), std::max(d[2] - 2, 0));
  const double fx = c.x() - i0, fy = c.y() - j0, fz = c.z() - k0;
  const int i1 = std::min(i0 + 1, d[0] - 1);
  const int j1 = std::min(j0 + 1, d[1] - 1);
  const int k1 = std::min(k0 + 1, d[2] - 1);
  auto at = [&](int i, int j, int k) { return static_cast<double>(v.at(i, j, k)); };
  const double c00 = at(i0, j0, k0) * (1 - fx) + at(i1, j0, k0) * fx;
  const double c10 = at(i0, j1, k0) * (1 - fx) + at(i1, j1, k0) * fx;
  const double c01 = at(i0, j0, k1) * (1 - fx) + at(i1, j0, k1) * fx;
  const double c11 = at(i0, j1, k1) * (1 - fx) + at(i1, j1, k1) * fx;
  const double c0 = c00 * (1 - fy) + c10 * fy;
  const double c1 = c01 * (1 - fy) + c11 * fy;
  return c0 * (1 - fz) + c1 * fz;
}

ScalarVolume gradient_magnitude(const ScalarVolume& v) {
  const auto& g = v.geometry();
  ScalarVolume out(g);
  const auto& d = g.dims;
  for (int k = 0; k < d[2]; ++k) {
    for (int j = 0; j < d[1]; ++j) {
      for (int i = 0; i < d[0]; ++i) {
        double grad[3];
        const int c[3] = {i, j, k};
        for (int a = 0; a < 3; ++a) {
          int lo[3] = {i, j, k}, hi[3] = {i, j, k};
          lo[a] = std::max(0, c[a] - 1);
          hi[a] = std::min(d[a] - 1, c[a] + 1);
          const int span = hi[a] - lo[a];
          grad[a] = span == 0 ? 0.0
                              : (v.at(hi[0], hi[1], hi[2]) - v.at(lo[0], lo[1], lo[2])) /
                                    (span * g.spacing[a]);
        }
        out.at(i, j, k) = static_cast<float>(
            std::sqrt(grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2]));
      }
    }
  }
  return out;
}

}  // namespace mrus
