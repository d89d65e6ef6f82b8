#include <catch_amalgamated.hpp>

#include <random>

#include "bodykit/fitting.hpp"
#include "bodykit/metrics.hpp"

using namespace bodykit;

namespace {

ParamVector random_pose(std::mt19937_64& rng, double pose_sigma,
                        double coeff_sigma = 0.5) {
  std::normal_distribution<double> g;
  ParamVector p = ParamVector::neutral();
  for (int k = 0; k < 10; ++k) {
    p.beta[k] = coeff_sigma * g(rng);
    p.psi[k] = coeff_sigma * g(rng);
  }
  for (int j = 0; j < p.num_joints(); ++j)
    for (int k = 0; k < 6; ++k) p.theta(j, k) += pose_sigma * g(rng);
  return p;
}

FitProblem make_problem(const BodyModel& model, const ParamVector& gt,
                        const WeakPerspCamera& cam,
                        const ParamVector& init,
                        const WeakPerspCamera& init_cam,
                        std::vector<int> visibility = {}) {
  FitProblem pb;
  pb.model = &model;
  const detail::JointFk fk(model, gt);
  pb.targets.points2d = project(fk.X, cam);
  pb.targets.visibility =
      visibility.empty() ? std::vector<int>(model.num_joints(), 1) : visibility;
  pb.init = init;
  pb.init_camera = init_cam;
  return pb;
}

}  // namespace

TEST_CASE("gradient vanishes at a constructed global minimum") {
  const BodyModel m = generate_synthetic_model(7);
  std::mt19937_64 rng(1);
  const ParamVector gt = random_pose(rng, 0.2);
  const WeakPerspCamera cam{120.0, Vec2(0.3, 0.1)};
  FitProblem pb = make_problem(m, gt, cam, gt, cam);
  pb.reg = {0, 0, 0};
  const VecX g = fit_gradient(pb, gt, cam);
  CHECK(g.norm() < 1e-8);
}

TEST_CASE("regularizer-only gradient is 2*w*(x - x0)") {
  const BodyModel m = generate_synthetic_model(7);
  std::mt19937_64 rng(2);
  const ParamVector p = random_pose(rng, 0.3);
  const WeakPerspCamera cam{90.0, Vec2(0, 0)};
  // Targets equal the prediction, so only the regularizers contribute.
  FitProblem pb = make_problem(m, p, cam, p, cam);
  pb.reg = {0.7, 0.3, 0.2};
  const VecX g = fit_gradient(pb, p, cam);
  const Vec6 neutral = rot6d_identity();
  for (int j = 0; j < p.num_joints(); ++j) {
    const Vec6 expect = 2.0 * 0.7 * (p.theta.row(j).transpose() - neutral);
    CHECK((g.segment<6>(20 + 6 * j) - expect).cwiseAbs().maxCoeff() < 1e-12);
  }
  CHECK((g.head(10) - 2.0 * 0.3 * p.beta).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((g.segment(10, 10) - 2.0 * 0.2 * p.psi).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(g.tail(3).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradient matches central finite differences") {
  const BodyModel m = generate_synthetic_model(7, 424, 53);
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g01;
  const FitConfig cfg;
  int total = 0, loose = 0;

  for (int trial = 0; trial < 25; ++trial) {
    // Keep the objective O(1e-2): with a huge camera scale the loss is so
    // large that central differences at h=1e-6 sit on the round-off floor
    // and the oracle itself is no better than ~1e-4.
    const ParamVector gt = random_pose(rng, 0.2);
    ParamVector at = gt;
    for (int j = 0; j < at.num_joints(); ++j)
      for (int k = 0; k < 6; ++k) at.theta(j, k) += 0.05 * g01(rng);
    WeakPerspCamera cam{0.8 + 0.4 * std::abs(g01(rng)),
                        Vec2(0.1 * g01(rng), 0.1 * g01(rng))};
    FitProblem pb = make_problem(m, gt, cam, at, cam);
    pb.reg = {0.05, 0.02, 0.01};
    const WeakPerspCamera at_cam{cam.s * 1.1, cam.t + Vec2(0.05, -0.02)};

    const VecX grad = fit_gradient(pb, at, at_cam, cfg);
    VecX x(pb.num_vars());
    x.head(338) = at.flatten();
    x[338] = at_cam.s;
    x[339] = at_cam.t.x();
    x[340] = at_cam.t.y();

    auto E = [&](const VecX& v) {
      ParamVector p = ParamVector::from_flat(v.head(338));
      WeakPerspCamera c{v[338], Vec2(v[339], v[340])};
      return fit_objective(pb, p, c, cfg);
    };
    // Does the segment [x-h, x+h] along coordinate i cross a Huber kink
    // (some residual component passing |r| = delta)? Central differences are
    // only first-order accurate across the kink, so those coordinates get a
    // smaller step and the looser tolerance.
    auto crosses_kink = [&](const VecX& vp, const VecX& vm) {
      auto resid = [&](const VecX& v) {
        ParamVector p = ParamVector::from_flat(v.head(338));
        WeakPerspCamera c{v[338], Vec2(v[339], v[340])};
        return MatX2(project(detail::JointFk(m, p).X, c) -
                     *pb.targets.points2d);
      };
      const MatX2 rp = resid(vp), rm = resid(vm);
      for (int j = 0; j < rp.rows(); ++j)
        for (int k = 0; k < 2; ++k)
          if ((std::abs(rp(j, k)) - cfg.huber_delta) *
                  (std::abs(rm(j, k)) - cfg.huber_delta) <
              0)
            return true;
      return false;
    };

    const double h = 1e-6;
    for (int i = 0; i < pb.num_vars(); i += 7) {  // stride keeps runtime sane
      VecX xp = x, xm = x;
      xp[i] += h;
      xm[i] -= h;
      const double fd = (E(xp) - E(xm)) / (2 * h);
      const double denom = std::max({std::abs(fd), std::abs(grad[i]), 1e-8});
      double rel = std::abs(grad[i] - fd) / denom;
      ++total;
      if (rel >= 1e-4) {
        ++loose;
        CHECK(crosses_kink(xp, xm));
        // Shrink the step so the kink-straddling window shrinks with it.
        const double h2 = 1e-8;
        xp[i] = x[i] + h2;
        xm[i] = x[i] - h2;
        const double fd2 = (E(xp) - E(xm)) / (2 * h2);
        const double denom2 = std::max({std::abs(fd2), std::abs(grad[i]), 1e-8});
        rel = std::abs(grad[i] - fd2) / denom2;
      }
      CHECK(rel < 1e-3);
    }
  }
  // at least 95% of coordinates within the tight tolerance
  CHECK(loose * 20 <= total);
}

TEST_CASE("fit from ground truth terminates immediately") {
  const BodyModel m = generate_synthetic_model(7, 424, 53);
  std::mt19937_64 rng(4);
  const ParamVector gt = random_pose(rng, 0.15);
  const WeakPerspCamera cam{100.0, Vec2(0.2, -0.1)};
  FitProblem pb = make_problem(m, gt, cam, gt, cam);
  pb.reg = {0, 0, 0};
  FitConfig cfg;
  const FitReport r = fit(pb, cfg);
  CHECK(r.converged);
  CHECK(r.iterations <= 2);
  CHECK(r.loss_trace.back() < 1e-10);
  // Stationary inits are returned untouched.
  CHECK(r.params.flatten() == gt.flatten());
}

TEST_CASE("loss trace is non-increasing") {
  const BodyModel m = generate_synthetic_model(7, 424, 53);
  std::mt19937_64 rng(5);
  const ParamVector gt = random_pose(rng, 0.15);
  const WeakPerspCamera cam{100.0, Vec2(0.1, 0.05)};
  ParamVector init = gt;
  std::normal_distribution<double> g;
  for (int j = 0; j < init.num_joints(); ++j)
    for (int k = 0; k < 6; ++k) init.theta(j, k) += 0.1 * g(rng);
  FitProblem pb = make_problem(m, gt, cam, init, WeakPerspCamera{80.0, Vec2(0, 0)});
  FitConfig cfg;
  cfg.max_iters = 300;
  const FitReport r = fit(pb, cfg);
  for (size_t i = 1; i < r.loss_trace.size(); ++i)
    CHECK(r.loss_trace[i] <= r.loss_trace[i - 1]);
}

namespace {

// Articulated poses whose bone depth signs match the rest stance. A bone
// whose depth sign differs from the stance is unrecoverable from 2D data
// alone (its mirrored twin projects identically), so recovery experiments
// sample from the basin the pose prior selects.
bool in_stance_basin(const BodyModel& m, const ParamVector& p) {
  ParamVector rest = ParamVector::neutral();
  rest.beta = p.beta;
  rest.psi = p.psi;
  const detail::JointFk fr(m, rest), fp(m, p);
  for (int k = 0; k < m.num_joints(); ++k) {
    const int par = m.parents[k];
    if (par < 0) continue;
    const double zr = fr.X(k, 2) - fr.X(par, 2);
    const double zp = fp.X(k, 2) - fp.X(par, 2);
    if (zr * zp <= 0) return false;
  }
  return true;
}

ParamVector random_stance_pose(const BodyModel& m, std::mt19937_64& rng,
                               double pose_sigma) {
  ParamVector p = random_pose(rng, pose_sigma);
  for (int tries = 0; tries < 200 && !in_stance_basin(m, p); ++tries)
    p = random_pose(rng, pose_sigma);
  return p;
}

}  // namespace

TEST_CASE("synthetic recovery from perturbed init") {
  const BodyModel m = generate_synthetic_model(7, 424, 53);
  std::mt19937_64 rng(6);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(-0.2, 0.2);
  int success = 0;
  const int trials = 4;
  for (int trial = 0; trial < trials; ++trial) {
    const ParamVector gt = random_stance_pose(m, rng, 0.15);
    const WeakPerspCamera cam{100.0 + 10 * g(rng), Vec2(0.2 * g(rng), 0.2 * g(rng))};
    ParamVector init = gt;
    for (int j = 0; j < init.num_joints(); ++j)
      for (int k = 0; k < 6; ++k) init.theta(j, k) += 0.1 * g(rng);
    const WeakPerspCamera init_cam{cam.s * (1.0 + u(rng)), cam.t};
    FitProblem pb = make_problem(m, gt, cam, init, init_cam);
    // Shape and expression start at their true values and are not part of
    // the perturbation; freeze them so the depth-null shape directions
    // cannot drift.
    pb.free_mask.assign(pb.num_vars(), true);
    for (int k = 0; k < 20; ++k) pb.free_mask[k] = false;
    const FitReport r = fit(pb);

    const MatX3 Xgt = detail::JointFk(m, gt).X;
    const MatX3 Xfit = detail::JointFk(m, r.params).X;
    if (mpjpe(Xfit, Xgt, true) < 1e-3) ++success;
  }
  CHECK(success >= trials - 1);
}

TEST_CASE("masked variables stay bitwise unchanged") {
  const BodyModel m = generate_synthetic_model(7, 424, 53);
  std::mt19937_64 rng(7);
  const ParamVector gt = random_pose(rng, 0.15);
  const WeakPerspCamera cam{100.0, Vec2(0, 0)};
  ParamVector init = gt;
  init.theta(3, 1) += 0.2;
  FitProblem pb = make_problem(m, gt, cam, init, WeakPerspCamera{90.0, Vec2(0.1, 0)});
  pb.free_mask.assign(pb.num_vars(), true);
  for (int k = 0; k < 10; ++k) pb.free_mask[k] = false;        // freeze beta
  for (int k = 0; k < 6; ++k) pb.free_mask[20 + 6 * 5 + k] = false;  // freeze joint 5
  FitConfig cfg;
  cfg.max_iters = 100;
  const FitReport r = fit(pb, cfg);
  CHECK(r.params.beta == init.beta);
  CHECK(r.params.theta.row(5) == init.theta.row(5));
}

TEST_CASE("fit is deterministic") {
  const BodyModel m = generate_synthetic_model(7, 424, 53);
  std::mt19937_64 rng(8);
  const ParamVector gt = random_pose(rng, 0.1);
  const WeakPerspCamera cam{100.0, Vec2(0.1, 0.1)};
  ParamVector init = gt;
  init.theta(4, 2) += 0.15;
  FitProblem pb = make_problem(m, gt, cam, init, WeakPerspCamera{95.0, Vec2(0, 0)});
  FitConfig cfg;
  cfg.max_iters = 200;
  const FitReport a = fit(pb, cfg);
  const FitReport b = fit(pb, cfg);
  CHECK(a.params.flatten() == b.params.flatten());
  CHECK(a.camera.s == b.camera.s);
  CHECK(a.loss_trace == b.loss_trace);
}

TEST_CASE("fit rejects problems without visible joints") {
  const BodyModel m = generate_synthetic_model(7, 424, 53);
  std::mt19937_64 rng(9);
  const ParamVector gt = random_pose(rng, 0.1);
  const WeakPerspCamera cam{100.0, Vec2(0, 0)};
  FitProblem pb = make_problem(m, gt, cam, gt, cam,
                               std::vector<int>(m.num_joints(), 0));
  CHECK_THROWS_AS(fit(pb), InvalidInput);
}
