#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>
#include <stdexcept>
#include <string>
#include <vector>

namespace bodykit {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;
using MatX2 = Eigen::Matrix<double, Eigen::Dynamic, 2>;
using MatX3 = Eigen::Matrix<double, Eigen::Dynamic, 3>;
using FaceList = Eigen::Matrix<int, Eigen::Dynamic, 3>;

// Thrown on contract violations (bad dimensions, invalid files, degenerate
// geometry). Numerical failures during iteration use NumericalError.
struct InvalidInput : std::runtime_error {
  explicit InvalidInput(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

enum class PartTag { Body, LeftHand, RightHand, Face };

inline const char* to_string(PartTag t) {
  switch (t) {
    case PartTag::Body: return "body";
    case PartTag::LeftHand: return "left-hand";
    case PartTag::RightHand: return "right-hand";
    case PartTag::Face: return "face";
  }
  return "?";
}

inline PartTag part_tag_from_string(const std::string& s) {
  if (s == "body") return PartTag::Body;
  if (s == "left-hand") return PartTag::LeftHand;
  if (s == "right-hand") return PartTag::RightHand;
  if (s == "face") return PartTag::Face;
  throw InvalidInput("unknown part tag: " + s);
}

}  // namespace bodykit
