#pragma once

#include <cmath>

#include "bodykit/types.hpp"

namespace bodykit {

inline Vec6 rot6d_identity() {
  Vec6 r;
  r << 1, 0, 0, 0, 1, 0;
  return r;
}

// Continuous 6D rotation representation: the vector holds the first two
// columns of a rotation matrix; Gram-Schmidt recovers the full matrix.
inline Mat3 rot6d_to_matrix(const Vec6& r) {
  const Vec3 a1 = r.head<3>();
  const Vec3 a2 = r.tail<3>();
  const double n1 = a1.norm();
  if (n1 <= 1e-12) throw InvalidInput("rot6d: first column has near-zero norm");
  const Vec3 b1 = a1 / n1;
  const Vec3 u2 = a2 - b1.dot(a2) * b1;
  const double n2 = u2.norm();
  if (n2 <= 1e-12)
    throw InvalidInput("rot6d: columns are parallel or second column degenerate");
  const Vec3 b2 = u2 / n2;
  Mat3 R;
  R.col(0) = b1;
  R.col(1) = b2;
  R.col(2) = b1.cross(b2);
  return R;
}

inline Vec6 matrix_to_rot6d(const Mat3& R) {
  Vec6 r;
  r.head<3>() = R.col(0);
  r.tail<3>() = R.col(1);
  return r;
}

inline Mat3 axis_angle_to_matrix(const Vec3& axis, double angle) {
  if (std::abs(axis.norm() - 1.0) > 1e-9)
    throw InvalidInput("axis_angle_to_matrix: axis must be unit length");
  Mat3 K;
  K << 0, -axis.z(), axis.y(),
       axis.z(), 0, -axis.x(),
      -axis.y(), axis.x(), 0;
  return Mat3::Identity() + std::sin(angle) * K + (1.0 - std::cos(angle)) * K * K;
}

// Jacobian of rot6d_to_matrix: d vec(R) / d r, 9x6 with R column-major
// (entry 3*c + row). Used by the fitting derivative engine.
inline Eigen::Matrix<double, 9, 6> rot6d_to_matrix_jacobian(const Vec6& r) {
  const Vec3 a1 = r.head<3>();
  const Vec3 a2 = r.tail<3>();
  const double n1 = a1.norm();
  if (n1 <= 1e-12) throw InvalidInput("rot6d jacobian: degenerate first column");
  const Vec3 b1 = a1 / n1;
  const double d = b1.dot(a2);
  const Vec3 u2 = a2 - d * b1;
  const double n2 = u2.norm();
  if (n2 <= 1e-12) throw InvalidInput("rot6d jacobian: degenerate second column");
  const Vec3 b2 = u2 / n2;

  const Mat3 P1 = (Mat3::Identity() - b1 * b1.transpose()) / n1;  // db1/da1
  const Mat3 P2 = (Mat3::Identity() - b2 * b2.transpose()) / n2;  // db2/du2

  // u2 = a2 - (b1.a2) b1
  // du2/da1 = -(b1 * a2^T + d * I) * P1
  // du2/da2 = I - b1 b1^T
  const Mat3 dU_da1 = -(b1 * a2.transpose() + d * Mat3::Identity()) * P1;
  const Mat3 dU_da2 = Mat3::Identity() - b1 * b1.transpose();

  const Mat3 dB2_da1 = P2 * dU_da1;
  const Mat3 dB2_da2 = P2 * dU_da2;

  auto skew = [](const Vec3& v) {
    Mat3 S;
    S << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
    return S;
  };
  // b3 = b1 x b2  =>  db3 = -[b2]x db1 + [b1]x db2
  const Mat3 dB3_da1 = -skew(b2) * P1 + skew(b1) * dB2_da1;
  const Mat3 dB3_da2 = skew(b1) * dB2_da2;

  Eigen::Matrix<double, 9, 6> J;
  J.block<3, 3>(0, 0) = P1;
  J.block<3, 3>(0, 3).setZero();
  J.block<3, 3>(3, 0) = dB2_da1;
  J.block<3, 3>(3, 3) = dB2_da2;
  J.block<3, 3>(6, 0) = dB3_da1;
  J.block<3, 3>(6, 3) = dB3_da2;
  return J;
}

}  // namespace bodykit
