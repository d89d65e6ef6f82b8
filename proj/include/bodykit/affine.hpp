#pragma once

#include <algorithm>
#include <span>

#include "bodykit/types.hpp"

namespace bodykit {

// 2x3 image-space affine map: y = L x + t with L the left 2x2 block.
struct AffineTransform {
  Eigen::Matrix<double, 2, 3> m = (Eigen::Matrix<double, 2, 3>() << 1, 0, 0, 0, 1, 0).finished();

  static AffineTransform identity() { return {}; }

  Eigen::Matrix2d linear() const { return m.leftCols<2>(); }
  Vec2 translation() const { return m.col(2); }

  Vec2 apply(const Vec2& x) const { return linear() * x + translation(); }
};

inline AffineTransform compose(const AffineTransform& A, const AffineTransform& B) {
  AffineTransform out;
  out.m.leftCols<2>() = A.linear() * B.linear();
  out.m.col(2) = A.linear() * B.translation() + A.translation();
  return out;
}

inline AffineTransform invert(const AffineTransform& A) {
  const Eigen::Matrix2d L = A.linear();
  const double det = L.determinant();
  if (std::abs(det) <= 1e-12)
    throw InvalidInput("AffineTransform: singular linear block");
  AffineTransform out;
  const Eigen::Matrix2d Linv = L.inverse();
  out.m.leftCols<2>() = Linv;
  out.m.col(2) = -Linv * A.translation();
  return out;
}

struct PartBox {
  Vec2 center = Vec2::Zero();
  double size = 0;  // side of the square box, pixels
  PartTag part = PartTag::Body;
  bool degenerate = false;  // size was below the floor before flooring
};

// Box from projected 2D joints: center = midpoint of the axis-aligned
// extremes, size = 2 * max(width, height). Boxes smaller than min_size are
// floored and flagged; downstream refinement may skip flagged parts.
inline PartBox part_bbox(std::span<const Vec2> points, PartTag part,
                         double min_size = 4.0) {
  if (points.empty()) throw InvalidInput("part_bbox: no visible points");
  Vec2 lo = points[0], hi = points[0];
  for (const Vec2& p : points) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  PartBox box;
  box.part = part;
  box.center = 0.5 * (lo + hi);
  box.size = 2.0 * std::max(hi.x() - lo.x(), hi.y() - lo.y());
  if (box.size < min_size) {
    box.degenerate = true;
    box.size = min_size;
  }
  return box;
}

inline PartBox part_bbox(const MatX2& points, PartTag part, double min_size = 4.0) {
  std::vector<Vec2> pts;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    pts.push_back(points.row(i).transpose());
  return part_bbox(std::span<const Vec2>(pts), part, min_size);
}

// Maps the square [c - b/2, c + b/2]^2 onto [0, out_size)^2 with uniform
// scale and no shear.
inline AffineTransform bbox_to_affine(const PartBox& box, double out_size) {
  if (!(box.size > 0)) throw InvalidInput("bbox_to_affine: box size must be positive");
  const double k = out_size / box.size;
  AffineTransform T;
  T.m << k, 0, k * (box.size / 2.0 - box.center.x()),
         0, k, k * (box.size / 2.0 - box.center.y());
  return T;
}

}  // namespace bodykit
