#include "mrus/register.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <random>

#include "json.hpp"

namespace mrus {

void Lc2Params::validate() const {
  if (patch_radius < 1) throw Error(ErrorCode::InvalidArgument, "LC2 patch radius must be >= 1");
  if (patch_stride < 1) throw Error(ErrorCode::InvalidArgument, "LC2 patch stride must be >= 1");
  if (!(variance_floor >= 0.0) || !(min_overlap >= 0.0 && min_overlap <= 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "LC2 variance floor / overlap out of range");
  }
  if (!(max_translation > 0.0) || !(max_rotation_deg > 0.0) || !(max_scale > 0.0) ||
      !(max_shear > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "registration bounds must be positive");
  }
  if (!(initial_step_mm > 0.0) || !(initial_step_deg > 0.0) || !(final_step_mm > 0.0) ||
      !(final_step_deg > 0.0) || final_step_mm > initial_step_mm ||
      final_step_deg > initial_step_deg) {
    throw Error(ErrorCode::InvalidArgument, "registration step sizes out of range");
  }
  if (restarts < 0 || max_evaluations < 1) {
    throw Error(ErrorCode::InvalidArgument, "registration restarts / evaluations out of range");
  }
}

// --- LC² ----------------------------------------------------------------------

namespace {

constexpr int kChannels = 10;  // n, U, M, G, UU, UM, UG, MM, MG, GG

/// Trilinear weights for a point given in voxel coordinates; false outside.
struct Trilinear {
  std::size_t base = 0;
  std::size_t dx = 1, dy = 0, dz = 0;
  double fx = 0, fy = 0, fz = 0;

  bool locate(const GridGeometry& g, const Vec3& voxel) {
    const double x = voxel.x(), y = voxel.y(), z = voxel.z();
    if (!(x >= 0.0 && y >= 0.0 && z >= 0.0 && x <= g.dims[0] - 1 && y <= g.dims[1] - 1 &&
          z <= g.dims[2] - 1)) {
      return false;
    }
    int i = std::min(static_cast<int>(x), std::max(0, g.dims[0] - 2));
    int j = std::min(static_cast<int>(y), std::max(0, g.dims[1] - 2));
    int k = std::min(static_cast<int>(z), std::max(0, g.dims[2] - 2));
    fx = g.dims[0] > 1 ? x - i : 0.0;
    fy = g.dims[1] > 1 ? y - j : 0.0;
    fz = g.dims[2] > 1 ? z - k : 0.0;
    base = g.index(i, j, k);
    dx = g.dims[0] > 1 ? 1 : 0;
    dy = g.dims[1] > 1 ? static_cast<std::size_t>(g.dims[0]) : 0;
    dz = g.dims[2] > 1 ? static_cast<std::size_t>(g.dims[0]) * g.dims[1] : 0;
    return true;
  }

  double sample(const std::vector<float>& d) const {
    const double c000 = d[base], c100 = d[base + dx], c010 = d[base + dy], c110 = d[base + dx + dy];
    const double c001 = d[base + dz], c101 = d[base + dx + dz], c011 = d[base + dy + dz],
                 c111 = d[base + dx + dy + dz];
    const double c00 = c000 + fx * (c100 - c000), c10 = c010 + fx * (c110 - c010);
    const double c01 = c001 + fx * (c101 - c001), c11 = c011 + fx * (c111 - c011);
    const double c0 = c00 + fy * (c10 - c00), c1 = c01 + fy * (c11 - c01);
    return c0 + fz * (c1 - c0);
  }
};

/// bᵀ C⁺ b for a symmetric 2x2 C.
double explained(double cmm, double cmg, double cgg, double bm, double bg) {
  const double tr = cmm + cgg;
  if (!(tr > 0.0)) return 0.0;
  const double half_gap = std::sqrt(std::max(0.0, 0.25 * (cmm - cgg) * (cmm - cgg) + cmg * cmg));
  const double l1 = 0.5 * tr + half_gap, l2 = 0.5 * tr - half_gap;
  const double tol = 1e-10 * l1;
  if (l2 > tol) {
    const double det = cmm * cgg - cmg * cmg;
    return (cgg * bm * bm - 2.0 * cmg * bm * bg + cmm * bg * bg) / det;
  }
  if (!(l1 > tol)) return 0.0;
  // Rank one: project onto the leading eigenvector.
  Eigen::Vector2d e = std::abs(cmg) > 0.0 ? Eigen::Vector2d(l1 - cgg, cmg)
                      : (cmm >= cgg ? Eigen::Vector2d(1, 0) : Eigen::Vector2d(0, 1));
  e.normalize();
  const double p = e.x() * bm + e.y() * bg;
  return p * p / l1;
}

}  // namespace

Lc2Metric::Lc2Metric(const ScalarVolume& us, const BinaryMask* mask, const ScalarVolume& mri,
                     const ScalarVolume& mri_gradient, const Lc2Params& params)
    : mri_(&mri), gradient_(&mri_gradient), grid_(us.geometry()), params_(params) {
  params.validate();
  grid_.validate();
  if (!mri.geometry().same_shape(mri_gradient.geometry())) {
    throw Error(ErrorCode::InvalidArgument, "MRI gradient must share the MRI grid");
  }
  if (mask && !mask->geometry().same_shape(grid_)) {
    throw Error(ErrorCode::InvalidArgument, "US mask must share the US grid");
  }
  const auto& data = us.data();
  double lo = std::numeric_limits<double>::infinity(), hi = -lo, sum = 0.0;
  Vec3 csum = Vec3::Zero();
  for (int k = 0; k < grid_.dims[2]; ++k) {
    for (int j = 0; j < grid_.dims[1]; ++j) {
      for (int i = 0; i < grid_.dims[0]; ++i) {
        const std::size_t idx = grid_.index(i, j, k);
        if (mask && !mask->data()[idx]) continue;
        voxels_.push_back(static_cast<std::uint32_t>(idx));
        lo = std::min(lo, static_cast<double>(data[idx]));
        hi = std::max(hi, static_cast<double>(data[idx]));
        sum += data[idx];
        csum += grid_.position(i, j, k);
      }
    }
  }
  support_ = voxels_.size();
  if (support_ == 0) throw Error(ErrorCode::EmptyInput, "US volume has no support");
  box_lo_ = grid_.dims;
  box_hi_ = {0, 0, 0};
  const int nx = grid_.dims[0], ny = grid_.dims[1];
  for (auto idx : voxels_) {
    const std::array<int, 3> v{static_cast<int>(idx % nx), static_cast<int>((idx / nx) % ny),
                               static_cast<int>(idx / (static_cast<std::size_t>(nx) * ny))};
    for (int a = 0; a < 3; ++a) {
      box_lo_[a] = std::min(box_lo_[a], v[a]);
      box_hi_[a] = std::max(box_hi_[a], v[a] + 1);
    }
  }
  slot_.assign(static_cast<std::size_t>(box_hi_[0] - box_lo_[0]) * (box_hi_[1] - box_lo_[1]) *
                   (box_hi_[2] - box_lo_[2]),
               -1);
  for (std::size_t n = 0; n < voxels_.size(); ++n) {
    const std::size_t idx = voxels_[n];
    const int i = static_cast<int>(idx % nx) - box_lo_[0];
    const int j = static_cast<int>((idx / nx) % ny) - box_lo_[1];
    const int k = static_cast<int>(idx / (static_cast<std::size_t>(nx) * ny)) - box_lo_[2];
    slot_[(static_cast<std::size_t>(k) * (box_hi_[1] - box_lo_[1]) + j) * (box_hi_[0] - box_lo_[0]) + i] =
        static_cast<std::int32_t>(n);
  }
  const double mean = sum / support_;
  us_.reserve(support_);
  for (auto idx : voxels_) us_.push_back(data[idx] - mean);
  centroid_ = csum / static_cast<double>(support_);
  floor_ = params.variance_floor * (hi - lo) * (hi - lo);

  double msum = 0.0, gsum = 0.0;
  for (float v : mri.data()) msum += v;
  for (float v : mri_gradient.data()) gsum += v;
  mri_shift_ = msum / mri.data().size();
  grad_shift_ = gsum / mri_gradient.data().size();
}

double Lc2Metric::evaluate(const AffineTransform& mri_to_us) const {
  // Summed-area table over the support bounding box only; voxels outside it
  // contribute nothing, so clipping patches to the box leaves sums unchanged.
  const int bx = box_hi_[0] - box_lo_[0], by = box_hi_[1] - box_lo_[1], bz = box_hi_[2] - box_lo_[2];
  const std::size_t sx = static_cast<std::size_t>(bx) + 1, sy = static_cast<std::size_t>(by) + 1;
  thread_local std::vector<double> sat;
  thread_local std::vector<std::uint8_t> valid;
  sat.assign(sx * sy * (static_cast<std::size_t>(bz) + 1) * kChannels, 0.0);
  valid.assign(voxels_.size(), 0);
  auto cell = [&](std::size_t i, std::size_t j, std::size_t k) {
    return ((k * sy + j) * sx + i) * kChannels;
  };

  // US voxel centre -> MRI voxel coordinates is affine; fold everything.
  const GridGeometry& mg = mri_->geometry();
  const AffineTransform us_to_mri = invert(mri_to_us);
  const Mat3 lin = mg.spacing.cwiseInverse().asDiagonal() * us_to_mri.linear() *
                   grid_.spacing.asDiagonal();
  const Vec3 off = (us_to_mri.apply(grid_.origin) - mg.origin).cwiseQuotient(mg.spacing);
  const auto& mdata = mri_->data();
  const auto& gdata = gradient_->data();

  // One pass: per-row running sums plus the two previously completed planes.
  std::size_t overlap = 0;
  std::size_t s = 0;
  double v[kChannels];
  double row[kChannels];
  for (int k = 1; k <= bz; ++k) {
    for (int j = 1; j <= by; ++j) {
      std::fill(row, row + kChannels, 0.0);
      for (int i = 1; i <= bx; ++i, ++s) {
        const std::int32_t n = slot_[s];
        if (n >= 0) {
          Trilinear t;
          const Vec3 p(box_lo_[0] + i - 1, box_lo_[1] + j - 1, box_lo_[2] + k - 1);
          if (t.locate(mg, lin * p + off)) {
            valid[n] = 1;
            ++overlap;
            const double u = us_[n];
            const double m = t.sample(mdata) - mri_shift_;
            const double g = t.sample(gdata) - grad_shift_;
            v[0] = 1.0;
            v[1] = u;
            v[2] = m;
            v[3] = g;
            v[4] = u * u;
            v[5] = u * m;
            v[6] = u * g;
            v[7] = m * m;
            v[8] = m * g;
            v[9] = g * g;
            for (int ch = 0; ch < kChannels; ++ch) row[ch] += v[ch];
          }
        }
        double* c = &sat[cell(i, j, k)];
        const double* pj = &sat[cell(i, j - 1, k)];
        const double* pk = &sat[cell(i, j, k - 1)];
        const double* pjk = &sat[cell(i, j - 1, k - 1)];
        for (int ch = 0; ch < kChannels; ++ch) c[ch] = row[ch] + pj[ch] + pk[ch] - pjk[ch];
      }
    }
  }
  if (static_cast<double>(overlap) < params_.min_overlap * static_cast<double>(voxels_.size()) ||
      overlap == 0) {
    throw Error(ErrorCode::NoOverlap, "US and MRI overlap in " + std::to_string(overlap) + " of " +
                                          std::to_string(voxels_.size()) + " voxels");
  }

  const int nx = grid_.dims[0], ny = grid_.dims[1];
  const int r = params_.patch_radius;
  const int stride = params_.patch_stride;
  double num = 0.0, den = 0.0;
  double sum[kChannels];
  for (std::size_t n = 0; n < voxels_.size(); ++n) {
    if (!valid[n]) continue;
    const std::size_t idx = voxels_[n];
    const int i = static_cast<int>(idx % nx);
    const int j = static_cast<int>((idx / nx) % ny);
    const int k = static_cast<int>(idx / (static_cast<std::size_t>(nx) * ny));
    if (i % stride || j % stride || k % stride) continue;
    // Box-relative, clipped window [x0, x1) etc. in SAT cell coordinates.
    const std::size_t x0 = std::max(box_lo_[0], i - r) - box_lo_[0];
    const std::size_t x1 = std::min(box_hi_[0], i + r + 1) - box_lo_[0];
    const std::size_t y0 = std::max(box_lo_[1], j - r) - box_lo_[1];
    const std::size_t y1 = std::min(box_hi_[1], j + r + 1) - box_lo_[1];
    const std::size_t z0 = std::max(box_lo_[2], k - r) - box_lo_[2];
    const std::size_t z1 = std::min(box_hi_[2], k + r + 1) - box_lo_[2];
    const double* a = &sat[cell(x1, y1, z1)];
    const double* b = &sat[cell(x0, y1, z1)];
    const double* c = &sat[cell(x1, y0, z1)];
    const double* d = &sat[cell(x1, y1, z0)];
    const double* e = &sat[cell(x0, y0, z1)];
    const double* f = &sat[cell(x0, y1, z0)];
    const double* g = &sat[cell(x1, y0, z0)];
    const double* h = &sat[cell(x0, y0, z0)];
    for (int ch = 0; ch < kChannels; ++ch) {
      sum[ch] = a[ch] - b[ch] - c[ch] - d[ch] + e[ch] + f[ch] + g[ch] - h[ch];
    }
    const double cnt = sum[0];
    if (cnt < 8.0) continue;
    const double sst = sum[4] - sum[1] * sum[1] / cnt;
    const double var = sst / cnt;
    if (!(var > floor_)) continue;
    const double cmm = sum[7] - sum[2] * sum[2] / cnt;
    const double cmg = sum[8] - sum[2] * sum[3] / cnt;
    const double cgg = sum[9] - sum[3] * sum[3] / cnt;
    const double bm = sum[5] - sum[1] * sum[2] / cnt;
    const double bg = sum[6] - sum[1] * sum[3] / cnt;
    const double ratio = std::clamp(explained(cmm, cmg, cgg, bm, bg) / sst, 0.0, 1.0);
    num += var * ratio;
    den += var;
  }
  return den > 0.0 ? num / den : 0.0;
}

double lc2_similarity(const ScalarVolume& us, const BinaryMask* mask, const ScalarVolume& mri,
                      const AffineTransform& mri_to_us, const Lc2Params& params) {
  const ScalarVolume gradient = gradient_magnitude(mri);
  const Lc2Metric metric(us, mask, mri, gradient, params);
  return metric.evaluate(mri_to_us);
}

// --- pattern search -------------------------------------------------------------

SearchResult pattern_search(const std::function<double(const Eigen::VectorXd&)>& f,
                            const Eigen::VectorXd& x0, const SearchOptions& options) {
  const Eigen::Index n = x0.size();
  if (n == 0 || options.lower.size() != n || options.upper.size() != n ||
      options.step.size() != n) {
    throw Error(ErrorCode::InvalidArgument, "pattern search dimensions disagree");
  }
  if ((options.upper.array() < options.lower.array()).any() || !(options.step.array() > 0.0).all() ||
      !(options.min_step_ratio > 0.0 && options.min_step_ratio < 1.0)) {
    throw Error(ErrorCode::InvalidArgument, "pattern search bounds or steps out of range");
  }
  auto clip = [&](const Eigen::VectorXd& x) -> Eigen::VectorXd {
    return x.cwiseMax(options.lower).cwiseMin(options.upper);
  };

  SearchResult out;
  out.x = clip(x0);
  out.value = f(out.x);
  out.evaluations = 1;
  std::mt19937_64 rng(options.seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  for (int round = 0; round <= options.restarts; ++round) {
    Eigen::MatrixXd basis = Eigen::MatrixXd::Identity(n, n);
    if (round > 0) {
      Eigen::MatrixXd g(n, n);
      for (Eigen::Index c = 0; c < n; ++c) {
        for (Eigen::Index r = 0; r < n; ++r) g(r, c) = unit(rng);
      }
      basis = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
    }
    double h = round == 0 ? 1.0 : 0.5;
    while (h >= options.min_step_ratio && out.evaluations < options.max_evaluations) {
      bool moved = false;
      for (Eigen::Index d = 0; d < 2 * n && out.evaluations < options.max_evaluations; ++d) {
        const double sign = (d % 2 == 0) ? 1.0 : -1.0;
        const Eigen::VectorXd cand =
            clip(out.x + h * sign * options.step.cwiseProduct(basis.col(d / 2)));
        if (cand == out.x) continue;
        const double v = f(cand);
        ++out.evaluations;
        if (v > out.value) {
          out.x = cand;
          out.value = v;
          moved = true;
          break;
        }
      }
      if (!moved) h *= 0.5;
    }
  }
  return out;
}

// --- registration ---------------------------------------------------------------

namespace {

/// Box-averages masked voxels by an integer factor; a coarse voxel is kept
/// when at least half of its children are in the mask.
CompoundResult downsample(const CompoundResult& in, int factor) {
  const GridGeometry& g = in.volume.geometry();
  GridGeometry c = g;
  for (int a = 0; a < 3; ++a) c.dims[a] = std::max(1, g.dims[a] / factor);
  c.spacing = g.spacing * factor;
  c.origin = g.origin + 0.5 * (factor - 1) * g.spacing;
  CompoundResult out{ScalarVolume(c, 0.0f), BinaryMask(c, false)};
  const int half = (factor * factor * factor + 1) / 2;
  for (int k = 0; k < c.dims[2]; ++k) {
    for (int j = 0; j < c.dims[1]; ++j) {
      for (int i = 0; i < c.dims[0]; ++i) {
        double sum = 0.0;
        int count = 0;
        for (int dk = 0; dk < factor; ++dk) {
          for (int dj = 0; dj < factor; ++dj) {
            for (int di = 0; di < factor; ++di) {
              const int x = i * factor + di, y = j * factor + dj, z = k * factor + dk;
              if (!g.inside(x, y, z) || !in.mask.at(x, y, z)) continue;
              sum += in.volume.at(x, y, z);
              ++count;
            }
          }
        }
        if (count >= half) {
          out.volume.at(i, j, k) = static_cast<float>(sum / count);
          out.mask.set(i, j, k, true);
        }
      }
    }
  }
  return out;
}

/// Δ(y) = L·(y - c) + c + t on the US side.
AffineTransform delta_from(const Eigen::VectorXd& p, const Vec3& c) {
  const Vec3 t(p[0], p[1], p[2]);
  Mat3 lin = rotation_from_vector(Vec3(deg2rad(p[3]), deg2rad(p[4]), deg2rad(p[5])));
  if (p.size() == 12) {
    const Vec3 scale = Vec3::Ones() + 0.01 * Vec3(p[6], p[7], p[8]);
    Mat3 shear = Mat3::Identity();
    shear(0, 1) = 0.01 * p[9];
    shear(0, 2) = 0.01 * p[10];
    shear(1, 2) = 0.01 * p[11];
    lin = lin * scale.asDiagonal() * shear;
  }
  return AffineTransform(lin, c + t - lin * c, FrameId::World, FrameId::World);
}

/// Rigid parameters (mm, deg) of Δ = target ∘ initial⁻¹ about c.
Eigen::VectorXd rigid_params(const RigidTransform& initial, const RigidTransform& target,
                             const Vec3& c) {
  const RigidTransform d =
      compose(target.relabeled(initial.from(), FrameId::World), invert(initial));
  Eigen::VectorXd p(6);
  const Vec3 r = rotation_to_vector(d.rotation());
  const Vec3 t = d.translation() - c + d.rotation() * c;
  p << t.x(), t.y(), t.z(), rad2deg(r.x()), rad2deg(r.y()), rad2deg(r.z());
  return p;
}

RigidTransform to_rigid(const AffineTransform& a) {
  return RigidTransform(nearest_rotation(a.linear()), a.translation(), a.from(), a.to());
}

void check_inputs(const CompoundResult& us, const ScalarVolume& mri, const RigidTransform& initial) {
  if (us.volume.frame() != FrameId::World) {
    throw Error(ErrorCode::FrameMismatch, "US volume must be in the World frame");
  }
  if (initial.to() != FrameId::World ||
      (initial.from() != FrameId::MRI && initial.from() != FrameId::Patient)) {
    throw Error(ErrorCode::FrameMismatch, "initial transform must map image (MRI/Patient) -> World");
  }
  if (mri.frame() != FrameId::MRI && mri.frame() != FrameId::Patient) {
    throw Error(ErrorCode::FrameMismatch, "MRI volume must be in an image frame");
  }
}

void fill_errors(RegistrationResult& r, const std::optional<RigidTransform>& truth,
                 const AffineTransform& aligned) {
  if (!truth) return;
  const AffineTransform e =
      compose(invert(AffineTransform(truth->relabeled(aligned.from(), FrameId::World))), aligned);
  r.translation_error_mm = e.translation().norm();
  r.rotation_error_deg = rotation_angle_norm(nearest_rotation(e.linear()));
}

}  // namespace

RegistrationResult register_rigid(const CompoundResult& us, const ScalarVolume& mri,
                                  const RigidTransform& initial, const Lc2Params& params,
                                  const std::optional<RigidTransform>& truth) {
  params.validate();
  check_inputs(us, mri, initial);
  const ScalarVolume gradient = gradient_magnitude(mri);
  const Lc2Metric fine(us.volume, &us.mask, mri, gradient, params);
  const Vec3 c = fine.centroid();
  const AffineTransform start(initial.relabeled(initial.from(), FrameId::World));

  Eigen::VectorXd lower(6), upper(6);
  lower << -params.max_translation, -params.max_translation, -params.max_translation,
      -params.max_rotation_deg, -params.max_rotation_deg, -params.max_rotation_deg;
  upper = -lower;
  if (truth) {
    const Eigen::VectorXd pt = rigid_params(initial, truth->relabeled(initial.from(), FrameId::World), c);
    if ((pt.array() < lower.array()).any() || (pt.array() > upper.array()).any()) {
      throw Error(ErrorCode::OutOfBounds,
                  "initial alignment lies outside the registration capture range");
    }
  }

  auto transform_of = [&](const Eigen::VectorXd& p) { return compose(delta_from(p, c), start); };

  RegistrationResult out;
  out.initial = initial;
  out.similarity_before = fine.evaluate(start);
  int evaluations = 1;
  Eigen::VectorXd p = Eigen::VectorXd::Zero(6);

  const double us_spacing = us.volume.geometry().spacing.maxCoeff();
  const int factor = static_cast<int>(std::lround(params.coarse_spacing / us_spacing));
  double fine_mm = params.initial_step_mm, fine_deg = params.initial_step_deg;
  if (factor >= 2) {
    const CompoundResult coarse = downsample(us, factor);
    Lc2Params cp = params;
    cp.patch_stride = 1;
    const Lc2Metric coarse_metric(coarse.volume, &coarse.mask, mri, gradient, cp);
    SearchOptions so;
    so.lower = lower;
    so.upper = upper;
    so.step.resize(6);
    so.step << Vec3::Constant(params.initial_step_mm), Vec3::Constant(params.initial_step_deg);
    so.min_step_ratio = 0.05;
    so.restarts = 0;
    so.max_evaluations = params.max_evaluations / 2;
    so.seed = params.seed;
    const SearchResult sr =
        pattern_search([&](const Eigen::VectorXd& x) { return coarse_metric.evaluate(transform_of(x)); },
                       p, so);
    p = sr.x;
    evaluations += sr.evaluations;
    fine_mm = std::max(params.final_step_mm, 0.25 * params.initial_step_mm);
    fine_deg = std::max(params.final_step_deg, 0.25 * params.initial_step_deg);
  }

  SearchOptions so;
  so.lower = lower;
  so.upper = upper;
  so.step.resize(6);
  so.step << Vec3::Constant(fine_mm), Vec3::Constant(fine_deg);
  so.min_step_ratio = std::min(params.final_step_mm / fine_mm, params.final_step_deg / fine_deg);
  so.min_step_ratio = std::clamp(so.min_step_ratio, 1e-6, 0.999);
  so.restarts = params.restarts;
  so.max_evaluations = std::max(1, params.max_evaluations - evaluations);
  so.seed = params.seed + 1;
  const SearchResult sr =
      pattern_search([&](const Eigen::VectorXd& x) { return fine.evaluate(transform_of(x)); }, p, so);
  evaluations += sr.evaluations;
  p = sr.x;

  if (!truth) {
    for (int i = 0; i < 6; ++i) {
      if (std::abs(std::abs(p[i]) - upper[i]) < 1e-9) {
        throw Error(ErrorCode::OutOfBounds,
                    "registration optimum lies on the search bound; start outside capture range");
      }
    }
  }

  const AffineTransform aligned = transform_of(p);
  out.rigid_aligned = to_rigid(aligned).relabeled(initial.from(), FrameId::World);
  out.rigid = compose(invert(out.rigid_aligned), initial).relabeled(FrameId::Patient, FrameId::Patient);
  out.similarity_after = sr.value;
  out.evaluations = evaluations;
  out.improved = out.similarity_after - out.similarity_before >= 1e-4;
  fill_errors(out, truth, AffineTransform(out.rigid_aligned));
  return out;
}

RegistrationResult register_affine(const CompoundResult& us, const ScalarVolume& mri,
                                   const RegistrationResult& rigid, const Lc2Params& params,
                                   const std::optional<RigidTransform>& truth) {
  params.validate();
  check_inputs(us, mri, rigid.initial);
  const ScalarVolume gradient = gradient_magnitude(mri);
  const Lc2Metric fine(us.volume, &us.mask, mri, gradient, params);
  const Vec3 c = fine.centroid();
  const AffineTransform start(rigid.initial.relabeled(rigid.initial.from(), FrameId::World));

  const Eigen::VectorXd pr = rigid_params(rigid.initial, rigid.rigid_aligned, c);
  Eigen::VectorXd p = Eigen::VectorXd::Zero(12);
  p.head<6>() = pr;
  Eigen::VectorXd upper(12);
  upper << Vec3::Constant(params.max_translation), Vec3::Constant(params.max_rotation_deg),
      Vec3::Constant(100.0 * params.max_scale), Vec3::Constant(100.0 * params.max_shear);
  const Eigen::VectorXd lower = -upper;

  auto transform_of = [&](const Eigen::VectorXd& x) { return compose(delta_from(x, c), start); };

  SearchOptions so;
  so.lower = lower;
  so.upper = upper;
  so.step.resize(12);
  const double mm = std::max(params.final_step_mm, 0.25 * params.initial_step_mm);
  const double deg = std::max(params.final_step_deg, 0.25 * params.initial_step_deg);
  so.step << Vec3::Constant(mm), Vec3::Constant(deg), Vec3::Constant(mm), Vec3::Constant(mm);
  so.min_step_ratio = std::clamp(params.final_step_mm / mm, 1e-6, 0.999);
  so.restarts = params.restarts;
  so.max_evaluations = params.max_evaluations;
  so.seed = params.seed + 2;
  const SearchResult sr =
      pattern_search([&](const Eigen::VectorXd& x) { return fine.evaluate(transform_of(x)); }, p, so);

  RegistrationResult out = rigid;
  const AffineTransform aligned = transform_of(sr.x);
  out.affine = AffineTransform(aligned.linear(), aligned.translation(), rigid.initial.from(),
                               FrameId::World);
  out.similarity_before = rigid.similarity_after;
  out.similarity_after = sr.value;
  out.evaluations = sr.evaluations;
  out.improved = out.similarity_after - out.similarity_before >= 1e-4;
  out.translation_error_mm.reset();
  out.rotation_error_deg.reset();
  fill_errors(out, truth, *out.affine);
  return out;
}

CalibrationState update_patient_calibration(const CalibrationState& state,
                                            const RegistrationResult& result) {
  return state.with_correction(result.rigid);
}

// --- report -----------------------------------------------------------------

namespace {

using nlohmann::json;

json matrix_json(const Mat4& m) {
  json rows = json::array();
  for (int r = 0; r < 4; ++r) rows.push_back({m(r, 0), m(r, 1), m(r, 2), m(r, 3)});
  return rows;
}

json transform_json(const Mat4& m, FrameId from, FrameId to) {
  return {{"from", std::string(frame_name(from))},
          {"to", std::string(frame_name(to))},
          {"matrix", matrix_json(m)}};
}

Mat4 matrix_from(const json& j) {
  Mat4 m;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) m(r, c) = j.at(r).at(c).get<double>();
  }
  return m;
}

RigidTransform rigid_from(const json& j) {
  return RigidTransform::from_matrix(matrix_from(j.at("matrix")),
                                     parse_frame(j.at("from").get<std::string>()),
                                     parse_frame(j.at("to").get<std::string>()));
}

}  // namespace

void write_registration_report(const std::filesystem::path& path, const RegistrationResult& r) {
  json j;
  j["schema_version"] = 1;
  j["initial"] = transform_json(r.initial.matrix(), r.initial.from(), r.initial.to());
  j["rigid_correction"] = transform_json(r.rigid.matrix(), r.rigid.from(), r.rigid.to());
  j["rigid_aligned"] =
      transform_json(r.rigid_aligned.matrix(), r.rigid_aligned.from(), r.rigid_aligned.to());
  if (r.affine) j["affine_aligned"] = transform_json(r.affine->matrix(), r.affine->from(), r.affine->to());
  j["correction_translation_mm"] = r.rigid.translation().norm();
  j["correction_rotation_deg"] = rotation_angle_norm(r.rigid);
  j["similarity_before"] = r.similarity_before;
  j["similarity_after"] = r.similarity_after;
  j["evaluations"] = r.evaluations;
  j["improved"] = r.improved;
  if (r.translation_error_mm) j["translation_error_mm"] = *r.translation_error_mm;
  if (r.rotation_error_deg) j["rotation_error_deg"] = *r.rotation_error_deg;
  std::ofstream os(path);
  if (!os) throw Error(ErrorCode::Io, "cannot write registration report " + path.string());
  os << j.dump(2) << '\n';
  if (!os) throw Error(ErrorCode::Io, "failed writing registration report " + path.string());
}

RegistrationResult read_registration_report(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw Error(ErrorCode::Io, "cannot open registration report " + path.string());
  try {
    const json j = json::parse(is);
    RegistrationResult r;
    r.initial = rigid_from(j.at("initial"));
    r.rigid = rigid_from(j.at("rigid_correction"));
    r.rigid_aligned = rigid_from(j.at("rigid_aligned"));
    if (j.contains("affine_aligned")) {
      const auto& a = j.at("affine_aligned");
      r.affine = AffineTransform::from_matrix(matrix_from(a.at("matrix")),
                                              parse_frame(a.at("from").get<std::string>()),
                                              parse_frame(a.at("to").get<std::string>()));
    }
    r.similarity_before = j.at("similarity_before").get<double>();
    r.similarity_after = j.at("similarity_after").get<double>();
    r.evaluations = j.at("evaluations").get<int>();
    r.improved = j.at("improved").get<bool>();
    if (j.contains("translation_error_mm")) r.translation_error_mm = j["translation_error_mm"].get<double>();
    if (j.contains("rotation_error_deg")) r.rotation_error_deg = j["rotation_error_deg"].get<double>();
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Malformed, "malformed registration report " + path.string() + ": " + e.what());
  }
}

}  // namespace mrus
