#include "mrus/compound.hpp"

#include <cmath>
#include <limits>

namespace mrus {

void CompoundingParams::validate() const {
  if (!(spacing > 0.0) || !(radius > 0.0)) {
    throw Error(ErrorCode::InvalidArgument, "compounding spacing and radius must be positive");
  }
  if (!(min_weight >= 0.0)) throw Error(ErrorCode::InvalidArgument, "min_weight must be >= 0");
}

GridGeometry compounding_grid(std::span<const UsFrame> frames, const CompoundingParams& params) {
  params.validate();
  if (frames.empty()) throw Error(ErrorCode::EmptyInput, "no frames to compound");
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& f : frames) {
    if (f.pose.from() != FrameId::US || f.pose.to() != FrameId::World) {
      throw Error(ErrorCode::FrameMismatch, "frames must be posed US -> World");
    }
    const double w = f.geometry.width - 1, h = f.geometry.height - 1;
    for (const Vec3& c : {Vec3(0, 0, 0), Vec3(w, 0, 0), Vec3(0, h, 0), Vec3(w, h, 0)}) {
      const Vec3 p = f.pose.apply(c);
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
  }
  lo.array() -= params.radius;
  hi.array() += params.radius;
  GridGeometry g;
  g.frame = FrameId::World;
  g.spacing = Vec3::Constant(params.spacing);
  for (int a = 0; a < 3; ++a) {
    g.origin[a] = std::floor(lo[a] / params.spacing) * params.spacing;
    g.dims[a] = static_cast<int>(std::floor((hi[a] - g.origin[a]) / params.spacing + 1e-9)) + 1;
  }
  return g;
}

CompoundResult compound(std::span<const UsFrame> frames, const CompoundingParams& params) {
  const GridGeometry grid = compounding_grid(frames, params);
  std::vector<double> sum_wv(grid.size(), 0.0), sum_w(grid.size(), 0.0);
  const double r = params.radius, r2 = r * r;
  const double inv_two_sigma2 = 1.0 / (2.0 * 0.25 * r2);

  for (const auto& f : frames) {
    const UsImageGeometry& g = f.geometry;
    if (f.image.size() != static_cast<std::size_t>(g.width) * g.height) {
      throw Error(ErrorCode::InvalidArgument, "frame image does not match its geometry");
    }
    const Mat3& a = f.pose.linear();
    const Vec3& t = f.pose.translation();
    Eigen::Matrix<double, 3, 2> span;
    span.col(0) = a.col(0);
    span.col(1) = a.col(1);
    const Vec3 normal = a.col(0).cross(a.col(1)).normalized();
    const Eigen::Matrix<double, 2, 3> pinv =
        (span.transpose() * span).inverse() * span.transpose();
    const double reach_u = pinv.row(0).norm() * r, reach_v = pinv.row(1).norm() * r;

    // Voxel box around the padded footprint.
    Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity()), hi = -lo;
    const double w = g.width - 1, h = g.height - 1;
    for (const Vec3& c : {Vec3(0, 0, 0), Vec3(w, 0, 0), Vec3(0, h, 0), Vec3(w, h, 0)}) {
      const Vec3 p = f.pose.apply(c);
      lo = lo.cwiseMin(p);
      hi = hi.cwiseMax(p);
    }
    const Vec3 vlo = grid.to_voxel(lo.array() - r), vhi = grid.to_voxel(hi.array() + r);
    std::array<int, 3> b0, b1;
    for (int k = 0; k < 3; ++k) {
      b0[k] = std::max(0, static_cast<int>(std::ceil(vlo[k] - 1e-9)));
      b1[k] = std::min(grid.dims[k] - 1, static_cast<int>(std::floor(vhi[k] + 1e-9)));
    }
    for (int kz = b0[2]; kz <= b1[2]; ++kz) {
      for (int ky = b0[1]; ky <= b1[1]; ++ky) {
        for (int kx = b0[0]; kx <= b1[0]; ++kx) {
          const Vec3 x = grid.position(kx, ky, kz);
          const Vec3 rel = x - t;
          if (std::abs(normal.dot(rel)) > r) continue;
          const Eigen::Vector2d uv = pinv * rel;
          const int u0 = std::max(0, static_cast<int>(std::ceil(uv[0] - reach_u)));
          const int u1 = std::min(g.width - 1, static_cast<int>(std::floor(uv[0] + reach_u)));
          const int v0 = std::max(0, static_cast<int>(std::ceil(uv[1] - reach_v)));
          const int v1 = std::min(g.height - 1, static_cast<int>(std::floor(uv[1] + reach_v)));
          if (u0 > u1 || v0 > v1) continue;
          double wv = 0.0, ws = 0.0;
          for (int v = v0; v <= v1; ++v) {
            for (int u = u0; u <= u1; ++u) {
              const double d2 = (f.pose.apply(Vec3(u, v, 0.0)) - x).squaredNorm();
              if (d2 > r2) continue;
              const double wgt = std::exp(-d2 * inv_two_sigma2);
              wv += wgt * f.at(u, v);
              ws += wgt;
            }
          }
          const std::size_t idx = grid.index(kx, ky, kz);
          sum_wv[idx] += wv;
          sum_w[idx] += ws;
        }
      }
    }
  }

  CompoundResult out{ScalarVolume(grid, 0.0f), BinaryMask(grid, false)};
  auto& data = out.volume.data();
  auto& mask = out.mask.data();
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (sum_w[i] > 0.0 && sum_w[i] >= params.min_weight) {
      data[i] = static_cast<float>(sum_wv[i] / sum_w[i]);
      mask[i] = 1;
    }
  }
  return out;
}

}  // namespace mrus
