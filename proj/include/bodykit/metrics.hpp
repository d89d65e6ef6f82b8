#pragma once

#include <Eigen/SVD>
#include <limits>
#include <numeric>

#include "bodykit/types.hpp"

namespace bodykit {

struct SimilarityTransform {
  double scale = 1.0;
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return scale * (rotation * p) + translation; }
  MatX3 apply(const MatX3& P) const {
    MatX3 out = (scale * (rotation * P.transpose())).transpose();
    out.rowwise() += translation.transpose();
    return out;
  }
};

// Least-squares similarity transform aligning pred onto gt (Umeyama).
inline SimilarityTransform procrustes_align(const MatX3& pred, const MatX3& gt,
                                            MatX3* aligned = nullptr) {
  const Eigen::Index K = pred.rows();
  if (K < 3 || gt.rows() != K)
    throw InvalidInput("procrustes_align: need >= 3 matched points");
  const Eigen::RowVector3d mu_p = pred.colwise().mean();
  const Eigen::RowVector3d mu_g = gt.colwise().mean();
  const MatX3 Pc = pred.rowwise() - mu_p;
  const MatX3 Gc = gt.rowwise() - mu_g;
  const double var_p = Pc.squaredNorm() / K;
  if (var_p <= 1e-18)
    throw InvalidInput("procrustes_align: degenerate (coincident) points");
  const Mat3 cov = Gc.transpose() * Pc / K;
  Eigen::JacobiSVD<Mat3> svd(cov, Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (svd.singularValues()(1) <= 1e-15)
    throw InvalidInput("procrustes_align: degenerate (collinear) configuration");
  Vec3 d = Vec3::Ones();
  if ((svd.matrixU() * svd.matrixV().transpose()).determinant() < 0) d(2) = -1;
  SimilarityTransform T;
  T.rotation = svd.matrixU() * d.asDiagonal() * svd.matrixV().transpose();
  T.scale = (svd.singularValues().dot(d)) / var_p;
  if (!(T.scale > 0))
    throw InvalidInput("procrustes_align: non-positive recovered scale");
  T.translation = mu_g.transpose() - T.scale * T.rotation * mu_p.transpose();
  if (aligned) *aligned = T.apply(pred);
  return T;
}

inline double mpjpe(const MatX3& pred, const MatX3& gt, bool align = false) {
  if (pred.rows() != gt.rows())
    throw InvalidInput("mpjpe: joint count mismatch");
  MatX3 p = pred;
  if (align) procrustes_align(pred, gt, &p);
  return (p - gt).rowwise().norm().mean();
}

// Mean per-vertex distance over a subset. When align is set the alignment is
// solved on align_on (defaults to the subset itself) and applied before
// averaging over the subset; passing all vertices as align_on gives the
// whole-body-aligned per-part variant.
inline double v2v(const MatX3& pred, const MatX3& gt,
                  std::span<const int> subset, bool align = false,
                  std::span<const int> align_on = {}) {
  if (pred.rows() != gt.rows()) throw InvalidInput("v2v: topology mismatch");
  if (subset.empty()) throw InvalidInput("v2v: empty vertex subset");
  MatX3 p = pred;
  if (align) {
    std::span<const int> basis = align_on.empty() ? subset : align_on;
    MatX3 pa(basis.size(), 3), ga(basis.size(), 3);
    for (size_t i = 0; i < basis.size(); ++i) {
      pa.row(i) = pred.row(basis[i]);
      ga.row(i) = gt.row(basis[i]);
    }
    const SimilarityTransform T = procrustes_align(pa, ga);
    p = T.apply(pred);
  }
  double sum = 0;
  for (int i : subset) sum += (p.row(i) - gt.row(i)).norm();
  return sum / subset.size();
}

// --- point-to-surface ----------------------------------------------------

namespace detail {

// Closest point on triangle (a,b,c) to p, Ericson-style region tests.
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a,
                                      const Vec3& b, const Vec3& c) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0 && d2 <= 0) return a;
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0 && d4 <= d3) return b;
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0 && d1 >= 0 && d3 <= 0) return a + (d1 / (d1 - d3)) * ab;
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0 && d5 <= d6) return c;
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0 && d2 >= 0 && d6 <= 0) return a + (d2 / (d2 - d6)) * ac;
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0 && (d4 - d3) >= 0 && (d5 - d6) >= 0)
    return b + ((d4 - d3) / ((d4 - d3) + (d5 - d6))) * (c - b);
  const double denom = 1.0 / (va + vb + vc);
  return a + (vb * denom) * ab + (vc * denom) * ac;
}

struct AabbNode {
  Vec3 lo, hi;
  int left = -1, right = -1;   // children, or
  int first = -1, count = 0;   // leaf triangle range
};

// Median-split AABB tree over triangles. Exact: only prunes boxes that
// cannot contain a closer point, so results match the exhaustive scan.
struct TriangleBvh {
  const MatX3* verts;
  const FaceList* faces;
  std::vector<int> order;
  std::vector<AabbNode> nodes;

  TriangleBvh(const MatX3& v, const FaceList& f) : verts(&v), faces(&f) {
    if (f.rows() == 0) throw InvalidInput("point_to_surface: empty mesh");
    order.resize(f.rows());
    std::iota(order.begin(), order.end(), 0);
    build(0, static_cast<int>(f.rows()));
  }

  Vec3 centroid(int t) const {
    return (verts->row((*faces)(t, 0)) + verts->row((*faces)(t, 1)) +
            verts->row((*faces)(t, 2))).transpose() / 3.0;
  }

  int build(int first, int count) {
    AabbNode node;
    node.lo = Vec3::Constant(std::numeric_limits<double>::infinity());
    node.hi = -node.lo;
    for (int i = first; i < first + count; ++i)
      for (int k = 0; k < 3; ++k) {
        const Vec3 v = verts->row((*faces)(order[i], k)).transpose();
        node.lo = node.lo.cwiseMin(v);
        node.hi = node.hi.cwiseMax(v);
      }
    const int idx = static_cast<int>(nodes.size());
    nodes.push_back(node);
    if (count <= 4) {
      nodes[idx].first = first;
      nodes[idx].count = count;
      return idx;
    }
    int axis;
    (node.hi - node.lo).maxCoeff(&axis);
    const int mid = first + count / 2;
    std::nth_element(order.begin() + first, order.begin() + mid,
                     order.begin() + first + count, [&](int a, int b) {
                       return centroid(a)[axis] < centroid(b)[axis];
                     });
    const int l = build(first, count / 2);
    const int r = build(mid, count - count / 2);
    nodes[idx].left = l;
    nodes[idx].right = r;
    return idx;
  }

  double box_dist2(const AabbNode& n, const Vec3& p) const {
    return (p.cwiseMax(n.lo).cwiseMin(n.hi) - p).squaredNorm();
  }

  double query(const Vec3& p) const {
    double best = std::numeric_limits<double>::infinity();
    std::vector<int> stack{0};
    while (!stack.empty()) {
      const int ni = stack.back();
      stack.pop_back();
      const AabbNode& n = nodes[ni];
      if (box_dist2(n, p) >= best) continue;
      if (n.left < 0) {
        for (int i = n.first; i < n.first + n.count; ++i) {
          const int t = order[i];
          const Vec3 q = closest_point_on_triangle(
              p, verts->row((*faces)(t, 0)).transpose(),
              verts->row((*faces)(t, 1)).transpose(),
              verts->row((*faces)(t, 2)).transpose());
          best = std::min(best, (q - p).squaredNorm());
        }
      } else {
        // Visit the nearer child first for tighter pruning.
        const double dl = box_dist2(nodes[n.left], p);
        const double dr = box_dist2(nodes[n.right], p);
        if (dl < dr) {
          stack.push_back(n.right);
          stack.push_back(n.left);
        } else {
          stack.push_back(n.left);
          stack.push_back(n.right);
        }
      }
    }
    return std::sqrt(best);
  }
};

}  // namespace detail

inline VecX point_to_surface(const MatX3& points, const MatX3& mesh_vertices,
                             const FaceList& faces) {
  detail::TriangleBvh bvh(mesh_vertices, faces);
  VecX out(points.rows());
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    out[i] = bvh.query(points.row(i).transpose());
  return out;
}

// F-score at threshold tau between two point sets. Precision is the fraction
// of pred points within tau of the nearest gt point, recall vice versa.
inline double f_score(const MatX3& pred, const MatX3& gt, double tau) {
  if (!(tau > 0)) throw InvalidInput("f_score: tau must be positive");
  if (pred.rows() == 0 || gt.rows() == 0)
    throw InvalidInput("f_score: empty point set");
  auto fraction_within = [tau](const MatX3& a, const MatX3& b) {
    int hits = 0;
    for (Eigen::Index i = 0; i < a.rows(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < b.rows(); ++j)
        best = std::min(best, (a.row(i) - b.row(j)).squaredNorm());
      if (best <= tau * tau) ++hits;
    }
    return static_cast<double>(hits) / a.rows();
  };
  const double precision = fraction_within(pred, gt);
  const double recall = fraction_within(gt, pred);
  if (precision + recall == 0) return 0.0;
  return 2.0 * precision * recall / (precision + recall);
}

}  // namespace bodykit
