#pragma once

#include <algorithm>
#include <chrono>
#include <memory>

#include <Eigen/Geometry>

#include <json.hpp>

#include "bodykit/camera.hpp"
#include "bodykit/losses.hpp"
#include "bodykit/model.hpp"

namespace bodykit {

// Flat variable layout used by the derivative engine and the optimizer:
// [beta(10), psi(10), theta row-major (6J), cam.s, cam.t.x, cam.t.y].
inline constexpr int kCamVars = 3;

struct RegWeights {
  double pose = 1e-4;
  double shape = 1e-4;
  double expression = 1e-4;
};

struct FitProblem {
  const BodyModel* model = nullptr;
  KeypointSet targets;  // 2D targets with visibility
  ParamVector init;
  WeakPerspCamera init_camera;
  RegWeights reg;
  std::vector<bool> free_mask;  // empty = all free; else length 20+6J+3

  int num_vars() const { return init.flat_size() + kCamVars; }

  void validate() const {
    if (!model) throw InvalidInput("FitProblem: missing model");
    if (model->pose_basis.size() > 0)
      throw InvalidInput("FitProblem: pose-corrective models are not supported");
    targets.validate();
    if (!targets.points2d) throw InvalidInput("FitProblem: targets must be 2D");
    if (targets.size() != model->num_joints())
      throw InvalidInput("FitProblem: target joint count mismatch");
    int visible = 0;
    for (int v : targets.visibility) visible += (v != 0);
    if (visible < 3)
      throw InvalidInput("FitProblem: need at least 3 visible target joints");
    if (reg.pose < 0 || reg.shape < 0 || reg.expression < 0)
      throw InvalidInput("FitProblem: regularizer weights must be >= 0");
    if (!free_mask.empty() && static_cast<int>(free_mask.size()) != num_vars())
      throw InvalidInput("FitProblem: free_mask length mismatch");
  }
};

struct FitConfig {
  int max_iters = 4000;          // per stage
  double grad_tol = 1e-10;
  double rel_tol = 1e-14;
  double step_init = 1e-3;
  double huber_delta = 1e-3;     // image units
  std::vector<std::string> stage_schedule{"camera", "body", "all"};
  // Graduated non-convexity: the final "all" stage is re-run once per entry
  // (largest first), warm-starting each time, before the target huber_delta.
  // A near-L1 objective (tiny delta) has a badly conditioned landscape; the
  // smoothed solves walk the iterate into the right basin first.
  std::vector<double> delta_schedule{1.0, 0.1, 0.01};
  // Under weak perspective every bone's depth sign is invisible to the data
  // term, so descent can converge into a depth-mirrored basin. When enabled,
  // bones whose z-sign disagrees with the initial pose are reflected back
  // (exactly, preserving all projections) and the result is kept if the loss
  // does not increase.
  bool depth_flip_repair = true;
  std::uint64_t seed = 0;

  static FitConfig from_json(const nlohmann::json& j) {
    FitConfig c;
    if (j.contains("max_iters")) c.max_iters = j["max_iters"].get<int>();
    if (j.contains("grad_tol")) c.grad_tol = j["grad_tol"].get<double>();
    if (j.contains("rel_tol")) c.rel_tol = j["rel_tol"].get<double>();
    if (j.contains("step_init")) c.step_init = j["step_init"].get<double>();
    if (j.contains("huber_delta")) c.huber_delta = j["huber_delta"].get<double>();
    if (j.contains("delta_schedule"))
      c.delta_schedule = j["delta_schedule"].get<std::vector<double>>();
    if (j.contains("depth_flip_repair"))
      c.depth_flip_repair = j["depth_flip_repair"].get<bool>();
    if (j.contains("stage_schedule"))
      c.stage_schedule = j["stage_schedule"].get<std::vector<std::string>>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    return c;
  }
};

struct FitReport {
  ParamVector params;
  WeakPerspCamera camera;
  std::vector<double> loss_trace;  // accepted iterates, non-increasing
  bool converged = false;
  int iterations = 0;
  double wall_seconds = 0;

  nlohmann::json to_json() const {
    return {{"params", std::vector<double>(params.flatten().data(),
                                           params.flatten().data() +
                                               params.flat_size())},
            {"camera", {{"s", camera.s}, {"t", {camera.t.x(), camera.t.y()}}}},
            {"loss_trace", loss_trace},
            {"converged", converged},
            {"iterations", iterations},
            {"wall_seconds", wall_seconds}};
  }
};

namespace detail {

inline double huber(double r, double delta) {
  const double a = std::abs(r);
  return a <= delta ? r * r / (2 * delta) : a - delta / 2;
}

inline double huber_deriv(double r, double delta) {
  if (std::abs(r) <= delta) return r / delta;
  return r > 0 ? 1.0 : -1.0;
}

// Joint-only kinematics: rest joints, world rotations and posed positions.
struct JointFk {
  MatX3 rest;
  std::vector<Mat3> Rw;      // world rotation per joint
  MatX3 X;                   // posed joint positions

  JointFk(const BodyModel& m, const ParamVector& p) {
    const int J = m.num_joints();
    VecX off = m.shape_basis * p.beta + m.expression_basis * p.psi;
    MatX3 mesh = m.template_vertices;
    for (int i = 0; i < m.num_vertices(); ++i)
      mesh.row(i) += Eigen::RowVector3d(off[3 * i], off[3 * i + 1], off[3 * i + 2]);
    rest = m.joint_regressor * mesh;
    Rw.resize(J);
    X.resize(J, 3);
    for (int j = 0; j < J; ++j) {
      const Mat3 R = rot6d_to_matrix(p.theta.row(j).transpose());
      if (m.parents[j] < 0) {
        Rw[j] = R;
        X.row(j) = rest.row(j);
      } else {
        const int par = m.parents[j];
        Rw[j] = Rw[par] * R;
        X.row(j) = (Rw[par] * (rest.row(j) - rest.row(par)).transpose()).transpose() +
                   X.row(par);
      }
    }
  }
};

// Per-model constants reused across gradient calls.
struct FitWorkspace {
  std::vector<std::vector<int>> chain;      // root..j inclusive, per joint
  std::vector<MatX> jrest_beta;             // per joint: 3 x 10
  std::vector<MatX> jrest_psi;

  explicit FitWorkspace(const BodyModel& m) {
    const int J = m.num_joints();
    chain.resize(J);
    for (int j = 0; j < J; ++j) {
      int k = j;
      while (k >= 0) {
        chain[j].push_back(k);
        k = m.parents[k];
      }
      std::reverse(chain[j].begin(), chain[j].end());
    }
    jrest_beta.assign(J, MatX::Zero(3, 10));
    jrest_psi.assign(J, MatX::Zero(3, 10));
    for (int col = 0; col < 10; ++col) {
      MatX3 sb(m.num_vertices(), 3), eb(m.num_vertices(), 3);
      for (int i = 0; i < m.num_vertices(); ++i)
        for (int k = 0; k < 3; ++k) {
          sb(i, k) = m.shape_basis(3 * i + k, col);
          eb(i, k) = m.expression_basis(3 * i + k, col);
        }
      const MatX3 js = m.joint_regressor * sb;
      const MatX3 je = m.joint_regressor * eb;
      for (int j = 0; j < J; ++j) {
        jrest_beta[j].col(col) = js.row(j).transpose();
        jrest_psi[j].col(col) = je.row(j).transpose();
      }
    }
  }
};

}  // namespace detail

// Objective: visibility-masked smooth-L1 reprojection residuals plus
// quadratic pulls toward the neutral pose/shape/expression.
inline double fit_objective(const FitProblem& pb, const ParamVector& p,
                            const WeakPerspCamera& cam,
                            const FitConfig& cfg = {}) {
  const detail::JointFk fk(*pb.model, p);
  const MatX2 pred = project(fk.X, cam);
  double E = 0;
  for (int j = 0; j < pb.targets.size(); ++j) {
    if (!pb.targets.visibility[j]) continue;
    E += detail::huber(pred(j, 0) - (*pb.targets.points2d)(j, 0), cfg.huber_delta);
    E += detail::huber(pred(j, 1) - (*pb.targets.points2d)(j, 1), cfg.huber_delta);
  }
  const Vec6 neutral = rot6d_identity();
  for (int j = 0; j < p.num_joints(); ++j)
    E += pb.reg.pose * (p.theta.row(j).transpose() - neutral).squaredNorm();
  E += pb.reg.shape * p.beta.squaredNorm();
  E += pb.reg.expression * p.psi.squaredNorm();
  return E;
}

// Exact gradient of fit_objective with respect to the flat variable vector.
// The chain covers blendshapes -> joint regressor -> 6D rotations -> forward
// kinematics -> weak-perspective projection -> smooth-L1.
inline VecX fit_gradient(const FitProblem& pb, const ParamVector& p,
                         const WeakPerspCamera& cam, const FitConfig& cfg = {},
                         const detail::FitWorkspace* ws_in = nullptr) {
  const BodyModel& m = *pb.model;
  const int J = m.num_joints();
  std::unique_ptr<detail::FitWorkspace> owned;
  const detail::FitWorkspace* ws = ws_in;
  if (!ws) {
    owned = std::make_unique<detail::FitWorkspace>(m);
    ws = owned.get();
  }

  const detail::JointFk fk(m, p);
  const MatX2 pred = project(fk.X, cam);

  VecX grad = VecX::Zero(p.flat_size() + kCamVars);
  const int theta_off = 20;
  const int cam_off = p.flat_size();

  // Cache the 9x6 rotation jacobians per joint (layout: vec(R) column-major).
  std::vector<Eigen::Matrix<double, 9, 6>> rotJ(J);
  for (int j = 0; j < J; ++j)
    rotJ[j] = rot6d_to_matrix_jacobian(p.theta.row(j).transpose());

  for (int j = 0; j < J; ++j) {
    if (!pb.targets.visibility[j]) continue;
    const Vec2 res = pred.row(j).transpose() - pb.targets.points2d->row(j).transpose();
    const Vec2 g2(detail::huber_deriv(res.x(), cfg.huber_delta),
                  detail::huber_deriv(res.y(), cfg.huber_delta));

    // camera: pred = s*X.xy + s*t
    grad[cam_off + 0] += g2.x() * (fk.X(j, 0) + cam.t.x()) +
                         g2.y() * (fk.X(j, 1) + cam.t.y());
    grad[cam_off + 1] += g2.x() * cam.s;
    grad[cam_off + 2] += g2.y() * cam.s;

    const Vec3 g3(cam.s * g2.x(), cam.s * g2.y(), 0.0);
    const auto& chain = ws->chain[j];
    const Vec3 Xj = fk.X.row(j).transpose();

    for (size_t ci = 0; ci < chain.size(); ++ci) {
      const int k = chain[ci];
      const int pk = m.parents[k];
      const Mat3& Wpk = pk < 0 ? Mat3::Identity().eval() : fk.Rw[pk];

      // theta path: X_j = Wpk * R_k * rel + t_k, rel constant in R_k.
      if (k != j) {
        const Vec3 rel = fk.Rw[k].transpose() * (Xj - fk.X.row(k).transpose());
        const Vec3 u = Wpk.transpose() * g3;
        Eigen::Matrix<double, 9, 1> dR;  // dE/d vec(R_k), column-major
        for (int c = 0; c < 3; ++c)
          for (int r = 0; r < 3; ++r) dR[3 * c + r] = u[r] * rel[c];
        grad.segment<6>(theta_off + 6 * k) += rotJ[k].transpose() * dR;
      }

      // blendshape path through the rest joints:
      // dE/d jrest_k = Wpk^T g3 - [k has a chain child] Wk^T g3
      Vec3 v = Wpk.transpose() * g3;
      if (ci + 1 < chain.size()) v -= fk.Rw[k].transpose() * g3;
      grad.head(10) += ws->jrest_beta[k].transpose() * v;
      grad.segment(10, 10) += ws->jrest_psi[k].transpose() * v;
    }
  }

  // quadratic regularizers
  const Vec6 neutral = rot6d_identity();
  for (int j = 0; j < J; ++j)
    grad.segment<6>(theta_off + 6 * j) +=
        2.0 * pb.reg.pose * (p.theta.row(j).transpose() - neutral);
  grad.head(10) += 2.0 * pb.reg.shape * p.beta;
  grad.segment(10, 10) += 2.0 * pb.reg.expression * p.psi;
  return grad;
}

namespace detail {

inline std::vector<bool> stage_mask(const std::string& stage, int num_theta_joints,
                                    int flat_size) {
  std::vector<bool> mask(flat_size + kCamVars, false);
  auto cam_on = [&] {
    for (int k = 0; k < kCamVars; ++k) mask[flat_size + k] = true;
  };
  if (stage == "camera") {
    cam_on();
  } else if (stage == "body") {
    cam_on();
    const int nbody = std::min(num_theta_joints, joints::kNumBody);
    for (int j = 0; j < nbody; ++j)
      for (int k = 0; k < 6; ++k) mask[20 + 6 * j + k] = true;
  } else if (stage == "all") {
    mask.assign(flat_size + kCamVars, true);
  } else {
    throw InvalidInput("fit: unknown stage '" + stage + "'");
  }
  return mask;
}

}  // namespace detail

// Staged first-order descent with a backtracking line search. Accepted steps
// never increase the objective; masked variables are never touched.
inline FitReport fit(const FitProblem& pb, const FitConfig& cfg = {}) {
  pb.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const int n = pb.num_vars();
  const int flat_size = pb.init.flat_size();

  VecX x(n);
  x.head(flat_size) = pb.init.flatten();
  x[flat_size] = pb.init_camera.s;
  x[flat_size + 1] = pb.init_camera.t.x();
  x[flat_size + 2] = pb.init_camera.t.y();

  auto unpack = [&](const VecX& v, ParamVector& p, WeakPerspCamera& c) {
    p = ParamVector::from_flat(v.head(flat_size));
    c.s = v[flat_size];
    c.t = Vec2(v[flat_size + 1], v[flat_size + 2]);
  };

  const detail::FitWorkspace ws(*pb.model);
  auto eval = [&](const VecX& v, double delta) {
    ParamVector p;
    WeakPerspCamera c;
    unpack(v, p, c);
    FitConfig local = cfg;
    local.huber_delta = delta;
    return fit_objective(pb, p, c, local);
  };

  FitReport report;
  double E = eval(x, cfg.huber_delta);
  if (!std::isfinite(E)) throw NumericalError("fit: non-finite initial loss");
  report.loss_trace.push_back(E);
  bool all_converged = true;
  int total_iters = 0;

  // One L-BFGS solve over the masked variables at a fixed Huber delta.
  // Accepted steps never increase the objective. Returns true if the stage
  // converged (rather than hitting the iteration cap). Updates x/E in place;
  // when trace is non-null, accepted losses are appended to it.
  auto run_stage = [&](VecX& xs, double& Es, const std::vector<bool>& mask,
                       double delta, std::vector<double>* trace) {
    FitConfig local = cfg;
    local.huber_delta = delta;
    constexpr int kMemory = 12;
    std::vector<VecX> s_hist, y_hist;
    VecX g_prev, x_prev;
    bool stage_converged = false;
    for (int it = 0; it < cfg.max_iters; ++it) {
      ++total_iters;
      ParamVector p;
      WeakPerspCamera c;
      unpack(xs, p, c);
      VecX g = fit_gradient(pb, p, c, local, &ws);
      for (int i = 0; i < n; ++i)
        if (!mask[i]) g[i] = 0;
      const double gnorm = g.norm();
      if (gnorm < cfg.grad_tol) {
        stage_converged = true;
        break;
      }

      if (it > 0) {
        VecX s = xs - x_prev;
        VecX y = g - g_prev;
        const double sy = s.dot(y);
        if (sy > 1e-12 * s.norm() * y.norm()) {
          s_hist.push_back(std::move(s));
          y_hist.push_back(std::move(y));
          if (static_cast<int>(s_hist.size()) > kMemory) {
            s_hist.erase(s_hist.begin());
            y_hist.erase(y_hist.begin());
          }
        }
      }
      x_prev = xs;
      g_prev = g;

      // two-loop recursion
      VecX d = -g;
      const int hist = static_cast<int>(s_hist.size());
      std::vector<double> alpha(hist);
      for (int i = hist - 1; i >= 0; --i) {
        const double rho = 1.0 / y_hist[i].dot(s_hist[i]);
        alpha[i] = rho * s_hist[i].dot(d);
        d -= alpha[i] * y_hist[i];
      }
      if (hist > 0) {
        const double gamma = s_hist.back().dot(y_hist.back()) /
                             y_hist.back().squaredNorm();
        d *= gamma;
      } else {
        d *= cfg.step_init;
      }
      for (int i = 0; i < hist; ++i) {
        const double rho = 1.0 / y_hist[i].dot(s_hist[i]);
        d += (alpha[i] - rho * y_hist[i].dot(d)) * s_hist[i];
      }
      for (int i = 0; i < n; ++i)
        if (!mask[i]) d[i] = 0;
      double gd = g.dot(d);
      if (gd >= 0) {  // not a descent direction, fall back to steepest descent
        d = -cfg.step_init * g;
        gd = g.dot(d);
        s_hist.clear();
        y_hist.clear();
      }

      bool accepted = false;
      double step = 1.0;
      for (int bt = 0; bt < 60; ++bt) {
        VecX xn = xs + step * d;
        if (xn[flat_size] <= 1e-8) {  // keep camera scale positive
          step *= 0.5;
          continue;
        }
        const double En = eval(xn, delta);
        if (std::isfinite(En) && En <= Es + 1e-4 * step * gd) {
          const double drop = Es - En;
          xs = std::move(xn);
          Es = En;
          if (trace) trace->push_back(Es);
          accepted = true;
          if (drop < cfg.rel_tol * std::max(1.0, Es)) stage_converged = true;
          break;
        }
        step *= 0.5;
      }
      if (!accepted || stage_converged) {
        stage_converged = true;
        break;
      }
    }
    return stage_converged;
  };

  auto masked = [&](const std::string& stage) {
    std::vector<bool> mask =
        detail::stage_mask(stage, pb.init.num_joints(), flat_size);
    if (!pb.free_mask.empty())
      for (int i = 0; i < n; ++i) mask[i] = mask[i] && pb.free_mask[i];
    return mask;
  };

  // Already stationary (e.g. init at the optimum): report and return without
  // touching the iterate.
  {
    ParamVector p0;
    WeakPerspCamera c0;
    unpack(x, p0, c0);
    VecX g0 = fit_gradient(pb, p0, c0, cfg, &ws);
    const std::vector<bool> mask0 = masked("all");
    for (int i = 0; i < n; ++i)
      if (!mask0[i]) g0[i] = 0;
    if (g0.norm() < cfg.grad_tol) {
      report.params = pb.init;
      report.camera = pb.init_camera;
      report.converged = true;
      report.iterations = 1;
      report.wall_seconds = std::chrono::duration<double>(
                                std::chrono::steady_clock::now() - t0)
                                .count();
      return report;
    }
  }

  for (size_t si = 0; si < cfg.stage_schedule.size(); ++si) {
    const std::string& stage = cfg.stage_schedule[si];
    const std::vector<bool> mask = masked(stage);
    const bool final_stage = si + 1 == cfg.stage_schedule.size();
    // Graduated deltas, largest first, the target delta last. Earlier stages
    // run at the coarsest delta only; the smooth solves are what they exist for.
    std::vector<double> deltas;
    if (final_stage) {
      for (double d : cfg.delta_schedule)
        if (d > cfg.huber_delta) deltas.push_back(d);
      std::sort(deltas.rbegin(), deltas.rend());
    } else if (!cfg.delta_schedule.empty()) {
      deltas.push_back(*std::max_element(cfg.delta_schedule.begin(),
                                         cfg.delta_schedule.end()));
    }
    deltas.push_back(cfg.huber_delta);
    for (double delta : deltas) {
      // The loss trace tracks the target objective; re-anchor E when the
      // stage ran on a smoothed surrogate.
      double Es = eval(x, delta);
      const bool ok = run_stage(x, Es, mask, delta,
                                delta == cfg.huber_delta ? &report.loss_trace
                                                         : nullptr);
      if (delta == cfg.huber_delta) {
        E = Es;
        all_converged = all_converged && ok;
      }
    }
  }

  if (cfg.depth_flip_repair) {
    // Reflect bones whose depth sign disagrees with the neutral pose. The
    // reflection moves the subtree along z only, so projections -- and hence
    // the data term -- are untouched; among the 2^bones depth-mirrored
    // optima of the data term it selects the basin the pose regularizer
    // points at. The surgery preserves every projected point, so a flip is
    // kept iff the data term is unchanged; comparing the full objective
    // instead would drown the decision in unconverged regularizer noise
    // along the data-null twist directions.
    const std::vector<bool> all_mask = masked("all");
    const int J = pb.model->num_joints();
    std::vector<std::vector<int>> children(J);
    for (int j = 0; j < J; ++j)
      if (pb.model->parents[j] >= 0) children[pb.model->parents[j]].push_back(j);
    ParamVector rest_pose = ParamVector::neutral();
    rest_pose.beta = pb.init.beta;
    rest_pose.psi = pb.init.psi;
    const detail::JointFk fk_rest(*pb.model, rest_pose);

    FitProblem data_only = pb;
    data_only.reg = {0, 0, 0};
    auto data_term = [&](const VecX& v) {
      ParamVector p;
      WeakPerspCamera c;
      unpack(v, p, c);
      FitConfig local = cfg;
      local.huber_delta = cfg.huber_delta;
      return fit_objective(data_only, p, c, local);
    };

    bool any_flip = false;
    for (int round = 0; round < 16; ++round) {
      ParamVector p;
      WeakPerspCamera c;
      unpack(x, p, c);
      const detail::JointFk fk(*pb.model, p);
      bool changed = false;
      std::vector<bool> tried(J, false);  // one attempt per parent per round
      for (int par = 0; par < J && !changed; ++par) {
        if (children[par].empty() || tried[par]) continue;
        // Flip requires all of the parent's out-of-plane bones to disagree;
        // with several children only a joint reflection of the fan exists.
        int disagreeing = 0;
        bool mixed = false;
        for (int k : children[par]) {
          const double z_now = fk.X(k, 2) - fk.X(par, 2);
          if (std::abs(z_now) < 1e-9) continue;
          const double z_rest = fk_rest.X(k, 2) - fk_rest.X(par, 2);
          if (z_now * z_rest < 0)
            ++disagreeing;
          else
            mixed = true;
        }
        if (disagreeing == 0 || mixed) continue;
        tried[par] = true;
        // Rotation rows of the parent and of every child must be free to edit.
        bool editable = true;
        for (int t = 0; t < 6; ++t) editable = editable && all_mask[20 + 6 * par + t];
        for (int k : children[par])
          for (int t = 0; t < 6; ++t) editable = editable && all_mask[20 + 6 * k + t];
        if (!editable) continue;

        // Best proper rotation G taking each bone a_i to its z-reflection.
        // Exact for one child; least-squares (Kabsch) for a fan of children,
        // which is near-exact when the fan is nearly planar -- precisely the
        // situation in which the mirrored basin has near-zero data loss.
        Mat3 M = Mat3::Zero();
        for (int k : children[par]) {
          const Vec3 a = (fk.X.row(k) - fk.X.row(par)).transpose();
          const Vec3 ar(a.x(), a.y(), -a.z());
          M += ar * a.transpose();
        }
        Eigen::JacobiSVD<Mat3> svd(M, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 G = svd.matrixU() * svd.matrixV().transpose();
        if (G.determinant() < 0) {
          Mat3 D = Mat3::Identity();
          D(2, 2) = -1;
          G = svd.matrixU() * D * svd.matrixV().transpose();
        }
        const Mat3 Rw_par_new = G * fk.Rw[par];
        const int gp = pb.model->parents[par];
        const Mat3 Rw_gp = gp < 0 ? Mat3::Identity() : fk.Rw[gp];
        VecX xn = x;
        ParamVector pn = p;
        pn.theta.row(par) = matrix_to_rot6d(Rw_gp.transpose() * Rw_par_new).transpose();
        // Counter-rotate each child so its subtree keeps its world
        // orientation and is only translated along z.
        for (int k : children[par])
          pn.theta.row(k) = matrix_to_rot6d(Rw_par_new.transpose() * fk.Rw[k]).transpose();
        xn.head(flat_size) = pn.flatten();
        const double D = data_term(x);
        double Dn = data_term(xn);
        if (std::isfinite(Dn) && Dn > D + 1e-9 * (1.0 + D) &&
            children[par].size() > 1) {
          // The fan reflection is only least-squares exact; let the line
          // search take up the slack before judging the candidate.
          double En = eval(xn, cfg.huber_delta);
          run_stage(xn, En, all_mask, cfg.huber_delta, nullptr);
          Dn = data_term(xn);
        }
        if (std::isfinite(Dn) && Dn <= D + 1e-9 * (1.0 + D)) {
          x = std::move(xn);
          E = eval(x, cfg.huber_delta);
          any_flip = true;
          changed = true;  // recompute kinematics before the next repair
        }
      }
      if (!changed) break;
    }
    if (any_flip) {
      // One polish pass so the report reflects a stationary point again.
      run_stage(x, E, all_mask, cfg.huber_delta, nullptr);
      if (report.loss_trace.empty() || E <= report.loss_trace.back())
        report.loss_trace.push_back(E);
    }
  }

  unpack(x, report.params, report.camera);
  report.converged = all_converged;
  report.iterations = total_iters;
  report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

}  // namespace bodykit
