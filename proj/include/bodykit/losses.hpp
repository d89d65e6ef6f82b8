#pragma once

#include <cmath>
#include <optional>

#include "bodykit/affine.hpp"
#include "bodykit/model.hpp"

namespace bodykit {

struct KeypointSet {
  std::optional<MatX2> points2d;
  std::optional<MatX3> points3d;
  std::vector<int> visibility;  // binary flags, length J

  int size() const { return static_cast<int>(visibility.size()); }

  void validate() const {
    if (!points2d && !points3d)
      throw InvalidInput("KeypointSet: need points2d or points3d");
    if (points2d && points2d->rows() != size())
      throw InvalidInput("KeypointSet: visibility length mismatch (2d)");
    if (points3d && points3d->rows() != size())
      throw InvalidInput("KeypointSet: visibility length mismatch (3d)");
  }
};

// L1 reprojection loss over visible joints. Returns 0 and sets
// *all_invisible when no joint is visible.
inline double reprojection_loss(const MatX2& pred2d, const KeypointSet& gt,
                                bool* all_invisible = nullptr) {
  gt.validate();
  if (!gt.points2d) throw InvalidInput("reprojection_loss: gt has no 2D points");
  if (pred2d.rows() != gt.size())
    throw InvalidInput("reprojection_loss: dimension mismatch");
  double loss = 0;
  int visible = 0;
  for (int j = 0; j < gt.size(); ++j) {
    if (!gt.visibility[j]) continue;
    ++visible;
    loss += (pred2d.row(j) - gt.points2d->row(j)).cwiseAbs().sum();
  }
  if (all_invisible) *all_invisible = (visible == 0);
  return loss;
}

// L1 over 3D joints.
inline double joints3d_loss(const MatX3& predX, const KeypointSet& gt) {
  gt.validate();
  if (!gt.points3d) throw InvalidInput("joints3d_loss: gt has no 3D points");
  if (predX.rows() != gt.size())
    throw InvalidInput("joints3d_loss: dimension mismatch");
  double loss = 0;
  for (int j = 0; j < gt.size(); ++j) {
    if (!gt.visibility[j]) continue;
    loss += (predX.row(j) - gt.points3d->row(j)).cwiseAbs().sum();
  }
  return loss;
}

// Squared L2 over the full parameter vector.
inline double param_loss(const ParamVector& pred, const ParamVector& gt) {
  if (pred.flat_size() != gt.flat_size())
    throw InvalidInput("param_loss: dimension mismatch");
  return (pred.flatten() - gt.flatten()).squaredNorm();
}

// Part-space reprojection: residuals measured after mapping through
// T_part * T_b^{-1}. Only the linear 2x2 block acts on the difference;
// the translations cancel.
inline double part_reprojection_loss(const MatX2& pred2d_body, const KeypointSet& gt,
                                     std::span<const int> part_joints,
                                     const AffineTransform& T_part,
                                     const AffineTransform& T_b) {
  gt.validate();
  if (!gt.points2d)
    throw InvalidInput("part_reprojection_loss: gt has no 2D points");
  if (pred2d_body.rows() != gt.size())
    throw InvalidInput("part_reprojection_loss: dimension mismatch");
  const Eigen::Matrix2d M = T_part.linear() * invert(T_b).linear();
  double loss = 0;
  for (int j : part_joints) {
    if (j < 0 || j >= gt.size())
      throw InvalidInput("part_reprojection_loss: joint index out of range");
    if (!gt.visibility[j]) continue;
    const Vec2 d = pred2d_body.row(j).transpose() - gt.points2d->row(j).transpose();
    loss += (M * d).cwiseAbs().sum();
  }
  return loss;
}

struct LossBreakdown {
  double body = 0, hand = 0, face = 0;
  double part_reproj_hand = 0, part_reproj_face = 0;
  double w_body = 1, w_hand = 1, w_face = 1;
  double w_part_reproj_hand = 1, w_part_reproj_face = 1;
  double total = 0;
};

inline LossBreakdown total_loss(double body, double hand, double face,
                                double part_reproj_hand, double part_reproj_face,
                                double w_body = 1, double w_hand = 1,
                                double w_face = 1, double w_ph = 1,
                                double w_pf = 1) {
  const double terms[] = {body, hand, face, part_reproj_hand, part_reproj_face};
  const char* names[] = {"body", "hand", "face", "part_reproj_hand",
                         "part_reproj_face"};
  for (int i = 0; i < 5; ++i)
    if (!std::isfinite(terms[i]))
      throw NumericalError(std::string("total_loss: non-finite term ") + names[i]);
  LossBreakdown b;
  b.body = body;
  b.hand = hand;
  b.face = face;
  b.part_reproj_hand = part_reproj_hand;
  b.part_reproj_face = part_reproj_face;
  b.w_body = w_body;
  b.w_hand = w_hand;
  b.w_face = w_face;
  b.w_part_reproj_hand = w_ph;
  b.w_part_reproj_face = w_pf;
  b.total = w_body * body + w_hand * hand + w_face * face +
            w_ph * part_reproj_hand + w_pf * part_reproj_face;
  return b;
}

}  // namespace bodykit
