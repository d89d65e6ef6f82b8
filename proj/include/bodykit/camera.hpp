#pragma once

#include "bodykit/types.hpp"

namespace bodykit {

// Weak-perspective camera: orthographic projection (drop z), then uniform
// scale and 2D translation: x = s * (X.xy + t).
struct WeakPerspCamera {
  double s = 1.0;
  Vec2 t = Vec2::Zero();

  void validate() const {
    if (!(s > 0)) throw InvalidInput("WeakPerspCamera: scale must be positive");
  }
};

// Evaluated in the distributed form s*X + s*t so that
// project(X, s, t) == s * project(X, 1, 0) + s * t holds exactly.
inline MatX2 project(const MatX3& X, const WeakPerspCamera& cam) {
  cam.validate();
  MatX2 out(X.rows(), 2);
  for (Eigen::Index j = 0; j < X.rows(); ++j) {
    out(j, 0) = cam.s * X(j, 0) + cam.s * cam.t.x();
    out(j, 1) = cam.s * X(j, 1) + cam.s * cam.t.y();
  }
  return out;
}

inline Vec2 project_point(const Vec3& X, const WeakPerspCamera& cam) {
  return Vec2(cam.s * X.x() + cam.s * cam.t.x(),
              cam.s * X.y() + cam.s * cam.t.y());
}

}  // namespace bodykit
