#include <catch_amalgamated.hpp>

#include <random>

#include "bodykit/losses.hpp"
#include "bodykit/metrics.hpp"
#include "bodykit/model.hpp"

using namespace bodykit;

namespace {

KeypointSet make2d(const MatX2& pts, std::vector<int> vis) {
  KeypointSet k;
  k.points2d = pts;
  k.visibility = std::move(vis);
  return k;
}

MatX3 random_points(std::mt19937_64& rng, int n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  MatX3 p(n, 3);
  for (int i = 0; i < n * 3; ++i) p(i / 3, i % 3) = g(rng);
  return p;
}

}  // namespace

TEST_CASE("reprojection loss") {
  MatX2 pred(2, 2), gt(2, 2);
  pred << 0, 0, 1, 1;
  gt = pred;
  CHECK(reprojection_loss(pred, make2d(gt, {1, 1})) == 0.0);

  pred(1, 0) += 1;
  pred(1, 1) += 1;
  CHECK(reprojection_loss(pred, make2d(gt, {0, 1})) == 2.0);

  bool all_invisible = false;
  CHECK(reprojection_loss(pred, make2d(gt, {0, 0}), &all_invisible) == 0.0);
  CHECK(all_invisible);

  MatX2 wrong(3, 2);
  CHECK_THROWS_AS(reprojection_loss(wrong, make2d(gt, {1, 1})), InvalidInput);
}

TEST_CASE("reprojection loss matches scalar loop with mixed visibility") {
  std::mt19937_64 rng(4);
  std::normal_distribution<double> g;
  std::bernoulli_distribution coin(0.6);
  for (int trial = 0; trial < 50; ++trial) {
    const int J = 10;
    MatX2 pred(J, 2), gt(J, 2);
    std::vector<int> vis(J);
    for (int j = 0; j < J; ++j) {
      pred(j, 0) = g(rng); pred(j, 1) = g(rng);
      gt(j, 0) = g(rng); gt(j, 1) = g(rng);
      vis[j] = coin(rng) ? 1 : 0;
    }
    double ref = 0;
    for (int j = 0; j < J; ++j)
      if (vis[j])
        ref += std::abs(pred(j, 0) - gt(j, 0)) + std::abs(pred(j, 1) - gt(j, 1));
    CHECK(std::abs(reprojection_loss(pred, make2d(gt, vis)) - ref) < 1e-12);
  }
}

TEST_CASE("invisible joints have zero influence (bitwise)") {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g;
  MatX2 pred(5, 2), gt(5, 2);
  for (int j = 0; j < 5; ++j)
    for (int k = 0; k < 2; ++k) {
      pred(j, k) = g(rng);
      gt(j, k) = g(rng);
    }
  const std::vector<int> vis{1, 0, 1, 0, 1};
  const double before = reprojection_loss(pred, make2d(gt, vis));
  pred(1, 0) += 1234.5;
  pred(3, 1) -= 77.0;
  const double after = reprojection_loss(pred, make2d(gt, vis));
  CHECK(before == after);
}

TEST_CASE("3d joints and parameter losses") {
  std::mt19937_64 rng(12);
  MatX3 X = random_points(rng, 6);
  KeypointSet k;
  k.points3d = X;
  k.visibility.assign(6, 1);
  CHECK(joints3d_loss(X, k) == 0.0);

  MatX3 Y = X;
  Y(2, 0) += 1.0;
  CHECK(joints3d_loss(Y, k) == 1.0);

  const ParamVector a = ParamVector::neutral();
  CHECK(param_loss(a, a) == 0.0);
  ParamVector b = a;
  b.beta[3] = 2.0;
  CHECK(param_loss(b, a) == 4.0);
}

TEST_CASE("part reprojection loss") {
  MatX2 pred(4, 2), gt(4, 2);
  pred.setZero();
  gt.setZero();
  AffineTransform Tb = AffineTransform::identity();
  AffineTransform Tp;
  Tp.m << 2, 0, 5, 0, 2, -3;  // pure 2x upscale plus translation
  const std::vector<int> subset{1, 2};
  KeypointSet k = make2d(gt, {1, 1, 1, 1});
  CHECK(part_reprojection_loss(pred, k, subset, Tp, Tb) == 0.0);

  pred(1, 0) = 1.0;  // one joint off by (1, 0): linear block doubles it
  CHECK(part_reprojection_loss(pred, k, subset, Tp, Tb) == 2.0);

  // Two-path oracle: transform both point sets, then take the plain L1 loss.
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int trial = 0; trial < 50; ++trial) {
    MatX2 p(6, 2), q(6, 2);
    for (int i = 0; i < 12; ++i) {
      p(i / 2, i % 2) = g(rng);
      q(i / 2, i % 2) = g(rng);
    }
    AffineTransform A, B;
    A.m << 1 + 0.3 * g(rng), 0.2 * g(rng), g(rng), 0.2 * g(rng), 1 + 0.3 * g(rng), g(rng);
    B.m << 1 + 0.3 * g(rng), 0.2 * g(rng), g(rng), 0.2 * g(rng), 1 + 0.3 * g(rng), g(rng);
    const std::vector<int> all{0, 1, 2, 3, 4, 5};
    const KeypointSet kq = make2d(q, {1, 1, 0, 1, 1, 1});
    const double got = part_reprojection_loss(p, kq, all, A, B);

    const Eigen::Matrix2d M = A.linear() * invert(B).linear();
    MatX2 tp(6, 2), tq(6, 2);
    for (int i = 0; i < 6; ++i) {
      tp.row(i) = (M * p.row(i).transpose()).transpose();
      tq.row(i) = (M * q.row(i).transpose()).transpose();
    }
    const double ref = reprojection_loss(tp, make2d(tq, kq.visibility));
    CHECK(std::abs(got - ref) < 1e-9);
  }
}

TEST_CASE("total loss") {
  LossBreakdown z = total_loss(0, 0, 0, 0, 0);
  CHECK(z.total == 0.0);
  CHECK(total_loss(1, 2, 3, 4, 5).total == 15.0);

  std::mt19937_64 rng(8);
  std::uniform_real_distribution<double> u(0, 2);
  for (int trial = 0; trial < 20; ++trial) {
    double t[5], w[5];
    for (int i = 0; i < 5; ++i) {
      t[i] = u(rng);
      w[i] = u(rng);
    }
    const LossBreakdown b =
        total_loss(t[0], t[1], t[2], t[3], t[4], w[0], w[1], w[2], w[3], w[4]);
    double dot = 0;
    for (int i = 0; i < 5; ++i) dot += t[i] * w[i];
    CHECK(std::abs(b.total - dot) < 1e-12);
  }

  CHECK_THROWS_WITH(total_loss(1, std::nan(""), 0, 0, 0),
                    Catch::Matchers::ContainsSubstring("hand"));
}

TEST_CASE("procrustes recovers exact similarity transforms") {
  std::mt19937_64 rng(21);
  MatX3 pred = random_points(rng, 12);
  MatX3 aligned;
  SimilarityTransform T = procrustes_align(pred, pred, &aligned);
  CHECK(std::abs(T.scale - 1.0) < 1e-9);
  CHECK((T.rotation - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-9);
  CHECK((aligned - pred).cwiseAbs().maxCoeff() < 1e-9);

  for (int trial = 0; trial < 20; ++trial) {
    const MatX3 P = random_points(rng, 10);
    const Mat3 R = rot6d_to_matrix((Vec6() << 1 + 0.1 * trial, 0.3, -0.2, 0.1, 1, 0.4).finished());
    const Vec3 t(0.3, -1, 2);
    MatX3 G = (2.0 * (R * P.transpose())).transpose();
    G.rowwise() += t.transpose();
    T = procrustes_align(P, G, &aligned);
    CHECK(std::abs(T.scale - 2.0) < 1e-9);
    CHECK((aligned - G).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("procrustes beats random similarity transforms on noisy data") {
  std::mt19937_64 rng(30);
  std::normal_distribution<double> g;
  const MatX3 P = random_points(rng, 15);
  MatX3 G = P;
  for (int i = 0; i < G.size(); ++i) G(i / 3, i % 3) += 0.1 * g(rng);
  MatX3 aligned;
  procrustes_align(P, G, &aligned);
  const double best = (aligned - G).squaredNorm();
  std::uniform_real_distribution<double> us(0.5, 2.0);
  for (int k = 0; k < 1000; ++k) {
    Vec6 r;
    for (int i = 0; i < 6; ++i) r[i] = g(rng);
    if (r.head<3>().norm() < 0.1) continue;
    SimilarityTransform S;
    S.scale = us(rng);
    S.rotation = rot6d_to_matrix(r);
    S.translation = Vec3(g(rng), g(rng), g(rng));
    CHECK((S.apply(P) - G).squaredNorm() >= best - 1e-12);
  }
}

TEST_CASE("procrustes rejects degenerate input") {
  MatX3 line(5, 3);
  for (int i = 0; i < 5; ++i) line.row(i) << i, 2.0 * i, -i;
  MatX3 other = random_points(*(new std::mt19937_64(2)), 5);
  CHECK_THROWS_AS(procrustes_align(line, other), InvalidInput);
  MatX3 two(2, 3);
  CHECK_THROWS_AS(procrustes_align(two, two), InvalidInput);
}

TEST_CASE("mpjpe") {
  std::mt19937_64 rng(40);
  const MatX3 X = random_points(rng, 14);
  CHECK(mpjpe(X, X) == 0.0);

  MatX3 Y = X;
  Y.col(0).array() += 1.0;
  CHECK(mpjpe(Y, X) == Catch::Approx(1.0).margin(1e-12));

  // PA removes any similarity transform.
  SimilarityTransform S;
  S.scale = 1.7;
  S.rotation = rot6d_to_matrix((Vec6() << 0.2, 1, 0.1, -1, 0.3, 0.5).finished());
  S.translation = Vec3(3, -2, 1);
  CHECK(mpjpe(S.apply(X), X, true) < 1e-9);
}

TEST_CASE("PA metrics invariant under similarity transforms of the prediction") {
  std::mt19937_64 rng(41);
  std::normal_distribution<double> g;
  const MatX3 gt = random_points(rng, 20);
  MatX3 pred = gt;
  for (int i = 0; i < pred.size(); ++i) pred(i / 3, i % 3) += 0.05 * g(rng);

  const double base = mpjpe(pred, gt, true);
  for (int trial = 0; trial < 10; ++trial) {
    Vec6 r;
    for (int i = 0; i < 6; ++i) r[i] = g(rng);
    SimilarityTransform S;
    S.scale = 0.5 + std::abs(g(rng));
    S.rotation = rot6d_to_matrix(r);
    S.translation = Vec3(g(rng), g(rng), g(rng));
    CHECK(std::abs(mpjpe(S.apply(pred), gt, true) - base) < 1e-9);
  }
}

TEST_CASE("v2v") {
  std::mt19937_64 rng(50);
  const MatX3 gt = random_points(rng, 30);
  std::vector<int> all(30);
  std::iota(all.begin(), all.end(), 0);
  CHECK(v2v(gt, gt, all) == 0.0);

  MatX3 shifted = gt;
  shifted.col(2).array() += 0.002;
  CHECK(v2v(shifted, gt, all) == Catch::Approx(0.002).margin(1e-12));

  // random subset matches a scalar loop
  std::vector<int> subset{3, 7, 11, 19};
  double ref = 0;
  for (int i : subset) ref += (shifted.row(i) - gt.row(i)).norm();
  ref /= subset.size();
  CHECK(v2v(shifted, gt, subset) == Catch::Approx(ref).margin(1e-12));

  MatX3 small(5, 3);
  CHECK_THROWS_AS(v2v(small, gt, all), InvalidInput);
}

TEST_CASE("point to surface") {
  // Single large triangle in the z=0 plane.
  MatX3 V(3, 3);
  V << 0, 0, 0, 10, 0, 0, 0, 10, 0;
  FaceList F(1, 3);
  F << 0, 1, 2;

  MatX3 q(2, 3);
  q << 0, 0, 0,   // a mesh vertex
      2, 2, 1.5;  // height 1.5 above the interior
  const VecX d = point_to_surface(q, V, F);
  CHECK(d[0] == 0.0);
  CHECK(d[1] == Catch::Approx(1.5).margin(1e-12));

  CHECK_THROWS_AS(point_to_surface(q, V, FaceList(0, 3)), InvalidInput);
}

TEST_CASE("point to surface matches exhaustive oracle") {
  const BodyModel m = generate_synthetic_model(7, 424, 53);
  std::mt19937_64 rng(60);
  const MatX3 q = random_points(rng, 50, 0.6);
  const VecX fast = point_to_surface(q, m.template_vertices, m.faces);
  for (int i = 0; i < 50; ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (int f = 0; f < m.faces.rows(); ++f) {
      const Vec3 a = m.template_vertices.row(m.faces(f, 0)).transpose();
      const Vec3 b = m.template_vertices.row(m.faces(f, 1)).transpose();
      const Vec3 c = m.template_vertices.row(m.faces(f, 2)).transpose();
      const Vec3 cp = detail::closest_point_on_triangle(q.row(i).transpose(), a, b, c);
      best = std::min(best, (cp - q.row(i).transpose()).norm());
    }
    CHECK(std::abs(fast[i] - best) < 1e-12);
  }

  // a mesh's own vertices are at distance 0
  const VecX self = point_to_surface(m.template_vertices, m.template_vertices, m.faces);
  CHECK(self.maxCoeff() == 0.0);
}

TEST_CASE("f score") {
  std::mt19937_64 rng(70);
  const MatX3 a = random_points(rng, 25);
  CHECK(f_score(a, a, 0.01) == 1.0);

  MatX3 far = a;
  far.col(0).array() += 100.0;
  CHECK(f_score(far, a, 0.5) == 0.0);

  // Constructed half-matching case, counted by hand: pred has 4 points, two
  // within tau of gt; gt has 2 points, both matched.
  MatX3 gt(2, 3), pred(4, 3);
  gt << 0, 0, 0, 1, 0, 0;
  pred << 0, 0, 0.05, 1, 0, 0.05, 5, 5, 5, 6, 6, 6;
  const double p = 2.0 / 4.0, r = 2.0 / 2.0;
  CHECK(f_score(pred, gt, 0.1) == Catch::Approx(2 * p * r / (p + r)).margin(1e-12));

  CHECK_THROWS_AS(f_score(MatX3(0, 3), a, 0.1), InvalidInput);
  CHECK_THROWS_AS(f_score(a, a, 0.0), InvalidInput);
}
