#pragma once

#include <Eigen/SparseCore>
#include <array>
#include <random>
#include <vector>

#include "bodykit/rotations.hpp"
#include "bodykit/types.hpp"

namespace bodykit {

// Canonical joint layout for the default 53-joint skeleton:
// 22 body joints, 1 jaw, 15 fingers per hand.
namespace joints {
constexpr int kPelvis = 0;
constexpr int kSpine1 = 1;
constexpr int kSpine2 = 2;
constexpr int kChest = 3;
constexpr int kNeck = 4;
constexpr int kHead = 5;
constexpr int kLeftHip = 6;
constexpr int kLeftKnee = 7;
constexpr int kLeftAnkle = 8;
constexpr int kLeftFoot = 9;
constexpr int kRightHip = 10;
constexpr int kRightKnee = 11;
constexpr int kRightAnkle = 12;
constexpr int kRightFoot = 13;
constexpr int kLeftCollar = 14;
constexpr int kLeftShoulder = 15;
constexpr int kLeftElbow = 16;
constexpr int kLeftWrist = 17;
constexpr int kRightCollar = 18;
constexpr int kRightShoulder = 19;
constexpr int kRightElbow = 20;
constexpr int kRightWrist = 21;
constexpr int kJaw = 22;
constexpr int kLeftFingerStart = 23;   // 15 joints: 5 fingers x 3
constexpr int kRightFingerStart = 38;  // 15 joints
constexpr int kNumBody = 22;
constexpr int kNumJoints = 53;
}  // namespace joints

struct BodyModel {
  MatX3 template_vertices;  // N x 3
  FaceList faces;
  MatX shape_basis;       // (3N) x 10, row 3i+k is vertex i coordinate k
  MatX expression_basis;  // (3N) x 10
  MatX pose_basis;        // (3N) x K, K = 9*(J-1) when present, else 0 cols
  Eigen::SparseMatrix<double, Eigen::RowMajor> skin_weights;     // N x J
  Eigen::SparseMatrix<double, Eigen::RowMajor> joint_regressor;  // J x N
  std::vector<int> parents;  // parents[0] == -1
  std::vector<PartTag> vertex_labels;
  std::vector<PartTag> joint_labels;

  int num_vertices() const { return static_cast<int>(template_vertices.rows()); }
  int num_joints() const { return static_cast<int>(parents.size()); }

  MatX3 rest_joints() const {
    return joint_regressor * template_vertices;
  }

  // Throws InvalidInput naming the offending row/joint on any broken invariant.
  void validate() const;
};

struct ParamVector {
  VecX beta;  // 10
  VecX psi;   // 10
  MatX theta; // J x 6, rows in the continuous 6D representation

  static ParamVector neutral(int num_joints = joints::kNumJoints) {
    ParamVector p;
    p.beta = VecX::Zero(10);
    p.psi = VecX::Zero(10);
    p.theta = rot6d_identity().transpose().replicate(num_joints, 1);
    return p;
  }

  int num_joints() const { return static_cast<int>(theta.rows()); }
  int flat_size() const { return 20 + 6 * num_joints(); }

  // Flat layout: [beta(10), psi(10), theta row-major (J*6)].
  VecX flatten() const {
    VecX v(flat_size());
    v.head(10) = beta;
    v.segment(10, 10) = psi;
    for (int j = 0; j < num_joints(); ++j)
      v.segment(20 + 6 * j, 6) = theta.row(j).transpose();
    return v;
  }

  static ParamVector from_flat(const VecX& v) {
    if ((v.size() - 20) % 6 != 0 || v.size() < 26)
      throw InvalidInput("ParamVector::from_flat: bad flat length");
    ParamVector p;
    const int J = static_cast<int>((v.size() - 20) / 6);
    p.beta = v.head(10);
    p.psi = v.segment(10, 10);
    p.theta.resize(J, 6);
    for (int j = 0; j < J; ++j)
      p.theta.row(j) = v.segment(20 + 6 * j, 6).transpose();
    return p;
  }

  // Part sub-blocks (pose rows in 6D). Hand block = wrist row then 15 finger rows.
  std::vector<int> hand_joint_rows(bool left) const {
    std::vector<int> rows{left ? joints::kLeftWrist : joints::kRightWrist};
    const int start = left ? joints::kLeftFingerStart : joints::kRightFingerStart;
    for (int i = 0; i < 15; ++i) rows.push_back(start + i);
    return rows;
  }
};

struct RigidTransform {
  Mat3 R = Mat3::Identity();
  Vec3 t = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return R * p + t; }
  RigidTransform compose(const RigidTransform& o) const {
    return {R * o.R, R * o.t + t};
  }
};

struct PosedResult {
  MatX3 vertices;                          // N x 3
  MatX3 joints;                            // J x 3
  std::vector<RigidTransform> world_transforms;  // per joint
};

inline void BodyModel::validate() const {
  const int N = num_vertices();
  const int J = num_joints();
  if (J < 1 || parents[0] != -1)
    throw InvalidInput("model: joint 0 must be the root (parent -1)");
  for (int j = 1; j < J; ++j)
    if (parents[j] < 0 || parents[j] >= j)
      throw InvalidInput("model: parents must be topologically ordered, joint " +
                         std::to_string(j));
  if (skin_weights.rows() != N || skin_weights.cols() != J)
    throw InvalidInput("model: skin_weights shape mismatch");
  if (joint_regressor.rows() != J || joint_regressor.cols() != N)
    throw InvalidInput("model: joint_regressor shape mismatch");
  if (shape_basis.rows() != 3 * N || shape_basis.cols() != 10)
    throw InvalidInput("model: shape_basis shape mismatch");
  if (expression_basis.rows() != 3 * N || expression_basis.cols() != 10)
    throw InvalidInput("model: expression_basis shape mismatch");
  if (pose_basis.size() > 0 &&
      (pose_basis.rows() != 3 * N || pose_basis.cols() != 9 * (J - 1)))
    throw InvalidInput("model: pose_basis shape mismatch");
  if (static_cast<int>(vertex_labels.size()) != N ||
      static_cast<int>(joint_labels.size()) != J)
    throw InvalidInput("model: part label length mismatch");

  for (int i = 0; i < N; ++i) {
    double sum = 0;
    int nnz = 0;
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(
             skin_weights, i);
         it; ++it) {
      if (it.value() < 0)
        throw InvalidInput("model: negative skin weight at vertex " +
                           std::to_string(i));
      sum += it.value();
      ++nnz;
    }
    if (nnz > 4)
      throw InvalidInput("model: vertex " + std::to_string(i) +
                         " has more than 4 skin weights");
    if (std::abs(sum - 1.0) > 1e-9)
      throw InvalidInput("model: skin weight row " + std::to_string(i) +
                         " sums to " + std::to_string(sum));
  }
  for (int j = 0; j < J; ++j) {
    double sum = 0;
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(
             joint_regressor, j);
         it; ++it) {
      if (it.value() < 0)
        throw InvalidInput("model: negative regressor weight at joint " +
                           std::to_string(j));
      sum += it.value();
    }
    if (std::abs(sum - 1.0) > 1e-9)
      throw InvalidInput("model: joint_regressor row " + std::to_string(j) +
                         " sums to " + std::to_string(sum));
  }
}

// Rest mesh after blendshapes; pose corrective uses flattened (R_j - I) for
// joints 1..J-1 when a pose basis is present.
inline MatX3 blendshaped_rest(const BodyModel& model, const ParamVector& p,
                              const std::vector<Mat3>* rotations = nullptr) {
  const int N = model.num_vertices();
  VecX offsets = model.shape_basis * p.beta + model.expression_basis * p.psi;
  if (model.pose_basis.size() > 0 && rotations) {
    VecX pose_feat(9 * (model.num_joints() - 1));
    for (int j = 1; j < model.num_joints(); ++j) {
      const Mat3 D = (*rotations)[j] - Mat3::Identity();
      for (int k = 0; k < 9; ++k) pose_feat[9 * (j - 1) + k] = D(k / 3, k % 3);
    }
    offsets += model.pose_basis * pose_feat;
  }
  MatX3 rest = model.template_vertices;
  for (int i = 0; i < N; ++i)
    rest.row(i) += Eigen::RowVector3d(offsets[3 * i], offsets[3 * i + 1],
                                      offsets[3 * i + 2]);
  return rest;
}

inline PosedResult forward(const BodyModel& model, const ParamVector& p) {
  const int N = model.num_vertices();
  const int J = model.num_joints();
  if (p.num_joints() != J || p.beta.size() != 10 || p.psi.size() != 10)
    throw InvalidInput("forward: parameter dimensions do not match model");

  std::vector<Mat3> rot(J);
  for (int j = 0; j < J; ++j)
    rot[j] = rot6d_to_matrix(p.theta.row(j).transpose());

  // Expression/shape offsets apply in rest pose before skinning.
  const MatX3 rest = blendshaped_rest(model, p, &rot);
  const MatX3 rest_joints = model.joint_regressor * rest;

  // Accumulate rest-relative skinning transforms B_j = G_j * [I | -j_rest].
  // The recursion B_j = B_parent * {R_j, j_rest_j - R_j * j_rest_j} keeps the
  // identity pose exactly neutral (every B_j is exactly {I, 0}).
  PosedResult out;
  out.world_transforms.resize(J);
  out.joints.resize(J, 3);
  std::vector<RigidTransform> skin(J);
  for (int j = 0; j < J; ++j) {
    const Vec3 jr = rest_joints.row(j).transpose();
    const RigidTransform local{rot[j], jr - rot[j] * jr};
    skin[j] = model.parents[j] < 0 ? local
                                   : skin[model.parents[j]].compose(local);
    out.world_transforms[j] = {skin[j].R, skin[j].R * jr + skin[j].t};
    out.joints.row(j) = out.world_transforms[j].t.transpose();
  }

  out.vertices.setZero(N, 3);
  for (int i = 0; i < N; ++i) {
    const Vec3 v = rest.row(i).transpose();
    Vec3 acc = v;
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(
             model.skin_weights, i);
         it; ++it) {
      const int j = static_cast<int>(it.col());
      acc += it.value() * (skin[j].R * v + skin[j].t - v);
    }
    out.vertices.row(i) = acc.transpose();
  }
  return out;
}

namespace detail {

struct BoneLayout {
  int child;   // joint at the far end of the bone
  Vec3 a, b;   // segment endpoints (parent joint -> child joint)
  double radius;
};

// Rest skeleton joint positions for the 53-joint humanoid, root at origin,
// y up, x to the subject's left, z forward. The stance is deliberately 3D --
// every bone leaves the frontal plane by roughly a third of its length
// (curved spine, bent knees, arms reaching forward). A flat T-pose would be
// a degenerate input for any frontal weak-perspective camera: bones lying in
// the image plane have depth components right at the sign-ambiguity boundary.
inline std::vector<Vec3> humanoid_rest_joints() {
  using namespace joints;
  std::vector<Vec3> pos(kNumJoints);
  pos[kPelvis] = {0, 0, 0};
  pos[kSpine1] = {0, 0.12, 0.05};
  pos[kSpine2] = {0, 0.26, -0.01};
  pos[kChest] = {0, 0.40, -0.06};
  pos[kNeck] = {0, 0.52, 0.00};
  pos[kHead] = {0, 0.62, 0.06};
  pos[kLeftHip] = {0.10, -0.04, 0.045};
  pos[kLeftKnee] = {0.11, -0.44, 0.19};
  pos[kLeftAnkle] = {0.12, -0.82, 0.00};
  pos[kLeftFoot] = {0.12, -0.87, 0.12};
  pos[kRightHip] = {-0.10, -0.04, 0.045};
  pos[kRightKnee] = {-0.11, -0.44, 0.19};
  pos[kRightAnkle] = {-0.12, -0.82, 0.00};
  pos[kRightFoot] = {-0.12, -0.87, 0.12};
  pos[kLeftCollar] = {0.06, 0.46, -0.01};
  pos[kLeftShoulder] = {0.17, 0.47, 0.03};
  pos[kLeftElbow] = {0.38, 0.45, 0.16};
  pos[kLeftWrist] = {0.54, 0.43, 0.34};
  pos[kRightCollar] = {-0.06, 0.46, -0.01};
  pos[kRightShoulder] = {-0.17, 0.47, 0.03};
  pos[kRightElbow] = {-0.38, 0.45, 0.16};
  pos[kRightWrist] = {-0.54, 0.43, 0.34};
  pos[kJaw] = {0, 0.60, 0.12};
  // Finger chains fan out from each wrist, three segments per finger,
  // curling down and forward so every phalanx keeps a depth component.
  for (int side = 0; side < 2; ++side) {
    const int start = side == 0 ? kLeftFingerStart : kRightFingerStart;
    const double sx = side == 0 ? 1.0 : -1.0;
    const Vec3 wrist = side == 0 ? pos[kLeftWrist] : pos[kRightWrist];
    for (int f = 0; f < 5; ++f) {
      Vec3 dir(sx * (0.032 + 0.010 * (f - 2)), -0.016, 0.016 + 0.004 * (f - 2));
      for (int s = 0; s < 3; ++s) {
        const Vec3 base = s == 0 ? wrist : pos[start + 3 * f + s - 1];
        pos[start + 3 * f + s] = base + dir;
        dir *= 0.75;
      }
    }
  }
  return pos;
}

inline std::vector<int> humanoid_parents() {
  using namespace joints;
  std::vector<int> par(kNumJoints, -1);
  par[kSpine1] = kPelvis;
  par[kSpine2] = kSpine1;
  par[kChest] = kSpine2;
  par[kNeck] = kChest;
  par[kHead] = kNeck;
  par[kLeftHip] = kPelvis;
  par[kLeftKnee] = kLeftHip;
  par[kLeftAnkle] = kLeftKnee;
  par[kLeftFoot] = kLeftAnkle;
  par[kRightHip] = kPelvis;
  par[kRightKnee] = kRightHip;
  par[kRightAnkle] = kRightKnee;
  par[kRightFoot] = kRightAnkle;
  par[kLeftCollar] = kChest;
  par[kLeftShoulder] = kLeftCollar;
  par[kLeftElbow] = kLeftShoulder;
  par[kLeftWrist] = kLeftElbow;
  par[kRightCollar] = kChest;
  par[kRightShoulder] = kRightCollar;
  par[kRightElbow] = kRightShoulder;
  par[kRightWrist] = kRightElbow;
  par[kJaw] = kHead;
  for (int side = 0; side < 2; ++side) {
    const int start = side == 0 ? kLeftFingerStart : kRightFingerStart;
    const int wrist = side == 0 ? kLeftWrist : kRightWrist;
    for (int f = 0; f < 5; ++f)
      for (int s = 0; s < 3; ++s)
        par[start + 3 * f + s] = s == 0 ? wrist : start + 3 * f + s - 1;
  }
  return par;
}

inline PartTag joint_part(int j) {
  using namespace joints;
  if (j == kJaw || j == kHead) return PartTag::Face;
  if (j >= kLeftFingerStart && j < kLeftFingerStart + 15) return PartTag::LeftHand;
  if (j >= kRightFingerStart && j < kRightFingerStart + 15) return PartTag::RightHand;
  return PartTag::Body;
}

}  // namespace detail

// Deterministic desk-scale stand-in for real model assets: tube limbs laid
// out on the humanoid tree, ring-based joint regressor, two-bone skinning.
inline BodyModel generate_synthetic_model(std::uint64_t seed, int N = 1060,
                                          int J = joints::kNumJoints) {
  if (J != joints::kNumJoints)
    throw InvalidInput("generate_synthetic_model: only the 53-joint layout is supported");
  if (N < 4 * J)
    throw InvalidInput("generate_synthetic_model: N must be at least 4*J");

  const std::vector<Vec3> jpos = detail::humanoid_rest_joints();
  const std::vector<int> parents = detail::humanoid_parents();
  const int num_bones = J - 1;

  // Per-bone vertex budget; each bone gets rings of >=3 vertices including a
  // ring at each endpoint (t=0 and t=1).
  std::vector<int> budget(num_bones, N / num_bones);
  for (int b = 0; b < N % num_bones; ++b) budget[b] += 1;

  BodyModel m;
  m.parents = parents;
  m.template_vertices.resize(N, 3);
  m.vertex_labels.resize(N);
  m.joint_labels.resize(J);
  for (int j = 0; j < J; ++j) m.joint_labels[j] = detail::joint_part(j);

  std::vector<Eigen::Triplet<double>> skin_trip, reg_trip;
  std::vector<std::array<int, 3>> tri;
  // Rings whose centroid sits exactly at a joint; used for the regressor.
  std::vector<std::vector<int>> joint_rings(J);

  int vi = 0;
  for (int bone = 0; bone < num_bones; ++bone) {
    const int child = bone + 1;
    const int parent = parents[child];
    const Vec3 a = jpos[parent];
    const Vec3 b = jpos[child];
    const PartTag tag = detail::joint_part(child);
    const double radius =
        (tag == PartTag::LeftHand || tag == PartTag::RightHand) ? 0.012
        : tag == PartTag::Face ? 0.05 : 0.05;

    // Split the budget into rings: at least 2 rings (both endpoints), each
    // with >= 3 vertices.
    int nv = budget[bone];
    int rings = std::max(2, nv / 4);
    while (rings > 2 && nv / rings < 3) --rings;
    std::vector<int> ring_size(rings, nv / rings);
    for (int r = 0; r < nv % rings; ++r) ring_size[r] += 1;

    Vec3 axis = b - a;
    const double len = axis.norm();
    Vec3 u = axis.normalized();
    Vec3 ref = std::abs(u.y()) < 0.9 ? Vec3(0, 1, 0) : Vec3(1, 0, 0);
    const Vec3 e1 = u.cross(ref).normalized();
    const Vec3 e2 = u.cross(e1);

    int ring_base = vi;
    for (int r = 0; r < rings; ++r) {
      const double t = rings == 1 ? 1.0 : static_cast<double>(r) / (rings - 1);
      const Vec3 center = a + t * (b - a);
      std::vector<int> ring_ids;
      for (int s = 0; s < ring_size[r]; ++s) {
        const double ang = 2.0 * M_PI * s / ring_size[r];
        const Vec3 v = center + radius * (std::cos(ang) * e1 + std::sin(ang) * e2);
        m.template_vertices.row(vi) = v.transpose();
        m.vertex_labels[vi] = tag;
        skin_trip.emplace_back(vi, parent, 1.0 - t);
        if (t > 0) skin_trip.emplace_back(vi, child, t);
        ring_ids.push_back(vi);
        ++vi;
      }
      if (r == 0 && joint_rings[parent].empty()) joint_rings[parent] = ring_ids;
      if (r == rings - 1 && joint_rings[child].empty()) joint_rings[child] = ring_ids;
      // Stitch this ring to the previous one.
      if (r > 0) {
        const int prev_base = ring_base;
        const int prev_n = ring_size[r - 1];
        const int cur_base = ring_ids.front();
        const int cur_n = ring_size[r];
        const int n = std::min(prev_n, cur_n);
        for (int s = 0; s < n; ++s) {
          const int p0 = prev_base + s, p1 = prev_base + (s + 1) % prev_n;
          const int c0 = cur_base + s % cur_n, c1 = cur_base + (s + 1) % cur_n;
          tri.push_back({p0, p1, c0});
          tri.push_back({p1, c1, c0});
        }
        ring_base = cur_base;
      }
    }
    (void)len;
  }

  m.faces.resize(static_cast<int>(tri.size()), 3);
  for (size_t f = 0; f < tri.size(); ++f)
    m.faces.row(static_cast<int>(f)) << tri[f][0], tri[f][1], tri[f][2];

  for (int j = 0; j < J; ++j) {
    if (joint_rings[j].empty())
      throw NumericalError("synthetic model: joint without a regressor ring");
    const double w = 1.0 / joint_rings[j].size();
    for (int id : joint_rings[j]) reg_trip.emplace_back(j, id, w);
  }

  m.skin_weights.resize(N, J);
  m.skin_weights.setFromTriplets(skin_trip.begin(), skin_trip.end());
  m.joint_regressor.resize(J, N);
  m.joint_regressor.setFromTriplets(reg_trip.begin(), reg_trip.end());

  // Blendshape bases: smooth seeded displacements. The expression basis is
  // supported only on face vertices so expression stays spatially compact.
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  m.shape_basis.resize(3 * N, 10);
  m.expression_basis.resize(3 * N, 10);
  for (int k = 0; k < 10; ++k) {
    // Low-frequency field: random linear + sinusoidal function of position.
    Vec3 g1(gauss(rng), gauss(rng), gauss(rng));
    Vec3 g2(gauss(rng), gauss(rng), gauss(rng));
    Vec3 ph(gauss(rng), gauss(rng), gauss(rng));
    for (int i = 0; i < N; ++i) {
      const Vec3 p = m.template_vertices.row(i).transpose();
      const Vec3 d = 0.02 * (g1 * p.y() + g2 * std::sin(3.0 * p.x() + ph.x()) +
                             0.5 * g1.cross(g2) * std::cos(2.0 * p.z() + ph.y()));
      m.shape_basis(3 * i + 0, k) = d.x();
      m.shape_basis(3 * i + 1, k) = d.y();
      m.shape_basis(3 * i + 2, k) = d.z();
    }
  }
  for (int k = 0; k < 10; ++k) {
    Vec3 g1(gauss(rng), gauss(rng), gauss(rng));
    Vec3 ph(gauss(rng), gauss(rng), gauss(rng));
    for (int i = 0; i < N; ++i) {
      Vec3 d = Vec3::Zero();
      if (m.vertex_labels[i] == PartTag::Face) {
        const Vec3 p = m.template_vertices.row(i).transpose();
        d = 0.01 * g1 * std::sin(8.0 * p.y() + 5.0 * p.z() + ph.x());
      }
      m.expression_basis(3 * i + 0, k) = d.x();
      m.expression_basis(3 * i + 1, k) = d.y();
      m.expression_basis(3 * i + 2, k) = d.z();
    }
  }
  m.pose_basis.resize(0, 0);

  m.validate();
  return m;
}

}  // namespace bodykit
