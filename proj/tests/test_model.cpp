#include <catch_amalgamated.hpp>

#include <cstdio>
#include <random>

#include "bodykit/model.hpp"
#include "bodykit/model_io.hpp"

using namespace bodykit;

namespace {

ParamVector random_params(std::mt19937_64& rng, int J = joints::kNumJoints,
                          double pose_scale = 1.0) {
  std::normal_distribution<double> g;
  ParamVector p = ParamVector::neutral(J);
  for (int k = 0; k < 10; ++k) {
    p.beta[k] = g(rng);
    p.psi[k] = g(rng);
  }
  for (int j = 0; j < J; ++j) {
    Vec6 r = rot6d_identity();
    for (int k = 0; k < 6; ++k) r[k] += pose_scale * g(rng);
    p.theta.row(j) = r.transpose();
  }
  return p;
}

// Independent FK oracle: walks the kinematic chain joint by joint with plain
// 4x4 homogeneous matrices, no shared code with forward().
MatX3 fk_oracle(const BodyModel& model, const ParamVector& p) {
  const int J = model.num_joints();
  std::vector<Mat3> rot(J);
  for (int j = 0; j < J; ++j) rot[j] = rot6d_to_matrix(p.theta.row(j).transpose());
  MatX3 rest = model.template_vertices;
  const VecX off = model.shape_basis * p.beta + model.expression_basis * p.psi;
  for (int i = 0; i < model.num_vertices(); ++i)
    rest.row(i) += Eigen::RowVector3d(off[3 * i], off[3 * i + 1], off[3 * i + 2]);
  const MatX3 rj = model.joint_regressor * rest;

  std::vector<Eigen::Matrix4d> G(J);
  for (int j = 0; j < J; ++j) {
    Eigen::Matrix4d L = Eigen::Matrix4d::Identity();
    L.topLeftCorner<3, 3>() = rot[j];
    const int par = model.parents[j];
    L.topRightCorner<3, 1>() =
        par < 0 ? Vec3(rj.row(j).transpose())
                : Vec3((rj.row(j) - rj.row(par)).transpose());
    G[j] = par < 0 ? L : G[par] * L;
  }
  MatX3 out(J, 3);
  for (int j = 0; j < J; ++j) out.row(j) = G[j].topRightCorner<3, 1>().transpose();
  return out;
}

}  // namespace

TEST_CASE("parameter vector has 338 scalars for 53 joints") {
  const ParamVector p = ParamVector::neutral();
  CHECK(p.flat_size() == 338);
  CHECK(p.flatten().size() == 338);
  const ParamVector q = ParamVector::from_flat(p.flatten());
  CHECK(q.theta.isApprox(p.theta));
}

TEST_CASE("synthetic model is deterministic and valid") {
  const BodyModel a = generate_synthetic_model(7, 1060, 53);
  const BodyModel b = generate_synthetic_model(7, 1060, 53);
  CHECK(a.template_vertices == b.template_vertices);
  CHECK(a.shape_basis == b.shape_basis);
  CHECK(a.num_vertices() == 1060);
  CHECK(a.num_joints() == 53);
  REQUIRE_NOTHROW(a.validate());

  // Tree structure: single root, acyclic, all joints reachable.
  std::vector<int> depth(53, -1);
  depth[0] = 0;
  for (int j = 1; j < 53; ++j) {
    REQUIRE(a.parents[j] >= 0);
    REQUIRE(a.parents[j] < j);
    depth[j] = depth[a.parents[j]] + 1;
    CHECK(depth[j] > 0);
  }

  CHECK_THROWS_AS(generate_synthetic_model(7, 100, 53), InvalidInput);
  CHECK_THROWS_AS(generate_synthetic_model(7, 1060, 20), InvalidInput);
}

TEST_CASE("identity pose reproduces the template") {
  const BodyModel m = generate_synthetic_model(7);
  const PosedResult r = forward(m, ParamVector::neutral());
  CHECK((r.vertices - m.template_vertices).cwiseAbs().maxCoeff() == 0.0);
  CHECK((r.joints - m.rest_joints()).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("blendshapes are linear at rest pose") {
  const BodyModel m = generate_synthetic_model(7);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 5; ++trial) {
    ParamVector a = ParamVector::neutral(), b = ParamVector::neutral();
    for (int k = 0; k < 10; ++k) {
      a.beta[k] = g(rng);
      a.psi[k] = g(rng);
      b.beta[k] = g(rng);
      b.psi[k] = g(rng);
    }
    ParamVector sum = ParamVector::neutral();
    sum.beta = a.beta + b.beta;
    sum.psi = a.psi + b.psi;
    const MatX3 va = forward(m, a).vertices;
    const MatX3 vb = forward(m, b).vertices;
    const MatX3 vs = forward(m, sum).vertices;
    const MatX3 v0 = forward(m, ParamVector::neutral()).vertices;
    CHECK((vs - (va + vb - v0)).cwiseAbs().maxCoeff() < 1e-10);
  }

  // beta = alpha * e1 adds exactly the first shape basis slice.
  ParamVector p = ParamVector::neutral();
  p.beta[0] = 2.5;
  const MatX3 v = forward(m, p).vertices;
  for (int i = 0; i < m.num_vertices(); ++i)
    for (int k = 0; k < 3; ++k)
      CHECK(v(i, k) == Catch::Approx(m.template_vertices(i, k) +
                                     2.5 * m.shape_basis(3 * i + k, 0))
                           .margin(1e-12));
}

TEST_CASE("posed joints match the FK oracle") {
  const BodyModel m = generate_synthetic_model(7);
  std::mt19937_64 rng(99);
  for (int trial = 0; trial < 100; ++trial) {
    const ParamVector p = random_params(rng);
    const PosedResult r = forward(m, p);
    const MatX3 oracle = fk_oracle(m, p);
    CHECK((r.joints - oracle).cwiseAbs().maxCoeff() < 1e-10);
  }
}

TEST_CASE("root rotation equivariance") {
  const BodyModel m = generate_synthetic_model(7);
  std::mt19937_64 rng(5);
  const ParamVector base = random_params(rng, joints::kNumJoints, 0.3);
  ParamVector ident_root = base;
  ident_root.theta.row(0) = rot6d_identity().transpose();

  const Mat3 R = axis_angle_to_matrix(Vec3(1, 2, 2).normalized(), 0.8);
  ParamVector rotated = ident_root;
  rotated.theta.row(0) = matrix_to_rot6d(R).transpose();

  const MatX3 v0 = forward(m, ident_root).vertices;
  const MatX3 v1 = forward(m, rotated).vertices;
  const Vec3 j0 = m.rest_joints().row(0).transpose();
  // Root sits at the origin of model space; expression bases move the rest
  // root negligibly but not exactly, so use the blendshaped rest root.
  const Vec3 root = (m.joint_regressor *
                     blendshaped_rest(m, ident_root)).row(0).transpose();
  for (int i = 0; i < m.num_vertices(); ++i) {
    const Vec3 expect = R * (v0.row(i).transpose() - root) + root;
    CHECK((v1.row(i).transpose() - expect).cwiseAbs().maxCoeff() < 1e-9);
  }
  CHECK(j0.norm() < 1e-12);
}

TEST_CASE("model json round trip") {
  const BodyModel m = generate_synthetic_model(3, 424, 53);
  const std::string path = "test_model_roundtrip.json";
  save_model(m, path);
  const BodyModel l = load_model(path);
  CHECK(l.template_vertices == m.template_vertices);
  CHECK(l.shape_basis == m.shape_basis);
  CHECK(l.expression_basis == m.expression_basis);
  CHECK(l.parents == m.parents);
  CHECK(MatX(l.skin_weights) == MatX(m.skin_weights));
  CHECK(MatX(l.joint_regressor) == MatX(m.joint_regressor));
  CHECK(l.vertex_labels == m.vertex_labels);
  std::remove(path.c_str());
}

TEST_CASE("model load rejects bad files") {
  const BodyModel m = generate_synthetic_model(3, 424, 53);
  const std::string path = "test_model_bad.json";

  SECTION("skin weight row not summing to 1") {
    save_model(m, path);
    std::ifstream in(path);
    nlohmann::json j;
    in >> j;
    in.close();
    j["skin_weights"][0][2] = j["skin_weights"][0][2].get<double>() * 0.9;
    std::ofstream out(path);
    out << j.dump();
    out.close();
    CHECK_THROWS_WITH(load_model(path),
                      Catch::Matchers::ContainsSubstring("skin weight row"));
  }

  SECTION("truncated file") {
    save_model(m, path);
    std::ifstream in(path);
    std::string s((std::istreambuf_iterator<char>(in)), {});
    in.close();
    std::ofstream out(path);
    out << s.substr(0, s.size() / 2);
    out.close();
    CHECK_THROWS_AS(load_model(path), InvalidInput);
  }
  std::remove(path.c_str());
}

TEST_CASE("forward rejects mismatched dimensions") {
  const BodyModel m = generate_synthetic_model(7);
  ParamVector p = ParamVector::neutral(20);
  CHECK_THROWS_AS(forward(m, p), InvalidInput);
}
