#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <random>
#include <vector>

#include <json.hpp>

#include "bodykit/affine.hpp"
#include "bodykit/fitting.hpp"
#include "bodykit/image.hpp"
#include "bodykit/metrics.hpp"
#include "bodykit/model.hpp"

namespace bodykit {

// ---------------------------------------------------------------------------
// Features: 16x16 area-averaged grayscale crop (row-major) plus 8 moment
// statistics = 264 scalars. Deterministic stand-in for a learned backbone.
// ---------------------------------------------------------------------------

inline constexpr int kFeatureSide = 16;
inline constexpr int kFeatureDim = kFeatureSide * kFeatureSide + 8;

using FeatureVector = VecX;

inline FeatureVector extract_features(const Image& img) {
  if (img.width <= 0 || img.height <= 0)
    throw InvalidInput("extract_features: empty image");
  FeatureVector f = FeatureVector::Zero(kFeatureDim);

  // Area-average downsample onto the 16x16 grid (exact box filter over the
  // source pixels whose centers fall in each cell; every pixel lands in
  // exactly one cell, so the pooling is a partition).
  Eigen::Matrix<double, kFeatureSide, kFeatureSide> cell =
      Eigen::Matrix<double, kFeatureSide, kFeatureSide>::Zero();
  Eigen::Matrix<int, kFeatureSide, kFeatureSide> count =
      Eigen::Matrix<int, kFeatureSide, kFeatureSide>::Zero();
  for (int i = 0; i < img.height; ++i) {
    const int ci = std::min(kFeatureSide - 1, i * kFeatureSide / img.height);
    for (int j = 0; j < img.width; ++j) {
      const int cj = std::min(kFeatureSide - 1, j * kFeatureSide / img.width);
      double v = 0;  // channel-averaged (grayscale) intensity
      for (int c = 0; c < img.channels; ++c) v += img.at(i, j, c);
      cell(ci, cj) += v / img.channels;
      count(ci, cj) += 1;
    }
  }
  for (int i = 0; i < kFeatureSide; ++i)
    for (int j = 0; j < kFeatureSide; ++j)
      f[i * kFeatureSide + j] = count(i, j) > 0 ? cell(i, j) / count(i, j) : 0.0;

  // Moments over the downsampled grid: mean, stddev, min, max, intensity
  // centroid (x, y), and intensity spread (x, y). All zero for a black crop.
  const auto grid = f.head(kFeatureSide * kFeatureSide);
  const double mean = grid.mean();
  const double var = (grid.array() - mean).square().mean();
  double cx = 0, cy = 0, sx = 0, sy = 0;
  const double mass = grid.sum();
  if (mass > 0) {
    for (int i = 0; i < kFeatureSide; ++i)
      for (int j = 0; j < kFeatureSide; ++j) {
        const double w = f[i * kFeatureSide + j] / mass;
        cx += w * j;
        cy += w * i;
      }
    for (int i = 0; i < kFeatureSide; ++i)
      for (int j = 0; j < kFeatureSide; ++j) {
        const double w = f[i * kFeatureSide + j] / mass;
        sx += w * (j - cx) * (j - cx);
        sy += w * (i - cy) * (i - cy);
      }
  }
  const int base = kFeatureSide * kFeatureSide;
  f[base + 0] = mean;
  f[base + 1] = std::sqrt(var);
  f[base + 2] = grid.minCoeff();
  f[base + 3] = grid.maxCoeff();
  f[base + 4] = cx;
  f[base + 5] = cy;
  f[base + 6] = sx;
  f[base + 7] = sy;
  return f;
}

// ---------------------------------------------------------------------------
// A small tanh MLP with two hidden layers and manual reverse-mode gradients.
// ---------------------------------------------------------------------------

struct Mlp {
  MatX W1, W2, W3;
  VecX b1, b2, b3;

  int in_dim() const { return static_cast<int>(W1.cols()); }
  int out_dim() const { return static_cast<int>(W3.rows()); }

  static Mlp zeros(int in, int out, int hidden = 128) {
    Mlp m;
    m.W1 = MatX::Zero(hidden, in);
    m.W2 = MatX::Zero(hidden, hidden);
    m.W3 = MatX::Zero(out, hidden);
    m.b1 = VecX::Zero(hidden);
    m.b2 = VecX::Zero(hidden);
    m.b3 = VecX::Zero(out);
    return m;
  }

  // Glorot-uniform init, fully determined by the seed.
  static Mlp glorot(int in, int out, std::uint64_t seed, int hidden = 128) {
    Mlp m = zeros(in, out, hidden);
    std::mt19937_64 rng(seed);
    auto fill = [&](MatX& W) {
      const double lim =
          std::sqrt(6.0 / (double(W.rows()) + double(W.cols())));
      std::uniform_real_distribution<double> u(-lim, lim);
      for (Eigen::Index i = 0; i < W.rows(); ++i)
        for (Eigen::Index j = 0; j < W.cols(); ++j) W(i, j) = u(rng);
    };
    fill(m.W1);
    fill(m.W2);
    fill(m.W3);
    return m;
  }

  struct Cache {
    VecX x, h1, h2;  // input and post-tanh activations
  };

  VecX forward(const VecX& x, Cache* cache = nullptr) const {
    if (x.size() != W1.cols())
      throw InvalidInput("Mlp::forward: input dimension mismatch");
    VecX h1 = (W1 * x + b1).array().tanh().matrix();
    VecX h2 = (W2 * h1 + b2).array().tanh().matrix();
    VecX y = W3 * h2 + b3;
    if (cache) {
      cache->x = x;
      cache->h1 = std::move(h1);
      cache->h2 = std::move(h2);
    } else {
      return y;
    }
    return y;
  }

  struct Grads {
    MatX W1, W2, W3;
    VecX b1, b2, b3;

    static Grads zeros_like(const Mlp& m) {
      Grads g;
      g.W1 = MatX::Zero(m.W1.rows(), m.W1.cols());
      g.W2 = MatX::Zero(m.W2.rows(), m.W2.cols());
      g.W3 = MatX::Zero(m.W3.rows(), m.W3.cols());
      g.b1 = VecX::Zero(m.b1.size());
      g.b2 = VecX::Zero(m.b2.size());
      g.b3 = VecX::Zero(m.b3.size());
      return g;
    }
    void accumulate(const Grads& o) {
      W1 += o.W1;
      W2 += o.W2;
      W3 += o.W3;
      b1 += o.b1;
      b2 += o.b2;
      b3 += o.b3;
    }
    void scale(double s) {
      W1 *= s;
      W2 *= s;
      W3 *= s;
      b1 *= s;
      b2 *= s;
      b3 *= s;
    }
  };

  // Backprop d(out)^T * dy through the cached forward pass; returns the
  // gradient w.r.t. the input and accumulates weight gradients into g.
  VecX backward(const Cache& c, const VecX& dy, Grads& g) const {
    g.W3 += dy * c.h2.transpose();
    g.b3 += dy;
    VecX dh2 = W3.transpose() * dy;
    dh2.array() *= (1.0 - c.h2.array().square());
    g.W2 += dh2 * c.h1.transpose();
    g.b2 += dh2;
    VecX dh1 = W2.transpose() * dh2;
    dh1.array() *= (1.0 - c.h1.array().square());
    g.W1 += dh1 * c.x.transpose();
    g.b1 += dh1;
    return W1.transpose() * dh1;
  }

  nlohmann::json to_json() const {
    auto mat = [](const MatX& M) {
      nlohmann::json rows = nlohmann::json::array();
      for (Eigen::Index i = 0; i < M.rows(); ++i) {
        nlohmann::json r = nlohmann::json::array();
        for (Eigen::Index j = 0; j < M.cols(); ++j) r.push_back(M(i, j));
        rows.push_back(std::move(r));
      }
      return rows;
    };
    auto vec = [](const VecX& v) {
      return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
    };
    return {{"in", in_dim()},   {"out", out_dim()},
            {"hidden", static_cast<int>(W1.rows())},
            {"W1", mat(W1)},    {"W2", mat(W2)}, {"W3", mat(W3)},
            {"b1", vec(b1)},    {"b2", vec(b2)}, {"b3", vec(b3)}};
  }

  static Mlp from_json(const nlohmann::json& j) {
    const int in = j.at("in").get<int>();
    const int out = j.at("out").get<int>();
    const int hidden = j.at("hidden").get<int>();
    Mlp m = zeros(in, out, hidden);
    auto mat = [&](const char* key, MatX& M) {
      const auto& rows = j.at(key);
      if (static_cast<Eigen::Index>(rows.size()) != M.rows())
        throw InvalidInput(std::string("Mlp::from_json: bad shape for ") + key);
      for (Eigen::Index i = 0; i < M.rows(); ++i) {
        const auto& r = rows[i];
        if (static_cast<Eigen::Index>(r.size()) != M.cols())
          throw InvalidInput(std::string("Mlp::from_json: bad shape for ") + key);
        for (Eigen::Index c = 0; c < M.cols(); ++c) M(i, c) = r[c].get<double>();
      }
    };
    auto vec = [&](const char* key, VecX& v) {
      const auto& a = j.at(key);
      if (static_cast<Eigen::Index>(a.size()) != v.size())
        throw InvalidInput(std::string("Mlp::from_json: bad shape for ") + key);
      for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = a[i].get<double>();
    };
    mat("W1", m.W1);
    mat("W2", m.W2);
    mat("W3", m.W3);
    vec("b1", m.b1);
    vec("b2", m.b2);
    vec("b3", m.b3);
    return m;
  }
};

// ---------------------------------------------------------------------------
// Iterative residual regression: Theta_{k+1} = Theta_k + MLP([phi, Theta_k]).
// ---------------------------------------------------------------------------

struct RegressorHead {
  Mlp mlp;
  int t = 3;

  int block_dim() const { return mlp.out_dim(); }
  int feature_dim() const { return mlp.in_dim() - mlp.out_dim(); }

  nlohmann::json to_json() const { return {{"t", t}, {"mlp", mlp.to_json()}}; }
  static RegressorHead from_json(const nlohmann::json& j) {
    RegressorHead h;
    h.t = j.at("t").get<int>();
    h.mlp = Mlp::from_json(j.at("mlp"));
    return h;
  }
};

inline VecX iterative_regress(const RegressorHead& head, const FeatureVector& phi,
                              const VecX& theta0) {
  if (phi.size() != head.feature_dim() || theta0.size() != head.block_dim())
    throw InvalidInput("iterative_regress: dimension mismatch");
  VecX theta = theta0;
  VecX in(head.mlp.in_dim());
  for (int k = 0; k < head.t; ++k) {
    in.head(phi.size()) = phi;
    in.tail(theta.size()) = theta;
    theta += head.mlp.forward(in);
  }
  return theta;
}

namespace detail {

// Unrolled forward with caches, for training.
struct RegressCaches {
  std::vector<Mlp::Cache> steps;
  VecX out;
};

inline RegressCaches iterative_regress_cached(const RegressorHead& head,
                                              const FeatureVector& phi,
                                              const VecX& theta0) {
  RegressCaches rc;
  rc.steps.resize(head.t);
  VecX theta = theta0;
  VecX in(head.mlp.in_dim());
  for (int k = 0; k < head.t; ++k) {
    in.head(phi.size()) = phi;
    in.tail(theta.size()) = theta;
    theta += head.mlp.forward(in, &rc.steps[k]);
  }
  rc.out = std::move(theta);
  return rc;
}

// Backprop dL/d(out) through the unrolled loop. Returns dL/d(theta0);
// weight gradients accumulate into g. The feature input is treated as a
// constant (crop pixels carry no gradient).
inline VecX iterative_regress_backward(const RegressorHead& head,
                                       const RegressCaches& rc, const VecX& dout,
                                       Mlp::Grads& g) {
  const int nphi = head.feature_dim();
  VecX dtheta = dout;
  for (int k = head.t - 1; k >= 0; --k) {
    const VecX din = head.mlp.backward(rc.steps[k], dtheta, g);
    dtheta += din.tail(head.block_dim());
  }
  (void)nphi;
  return dtheta;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Parameter blocks. The body head regresses the full flat parameter vector
// plus its camera; the part heads regress the Eq.-style conditioning blocks:
//   hand: wrist + 15 finger rows (96) + part camera (3)  -> 99
//   face: jaw row (6) + expression (10) + part camera (3) -> 19
// Cameras are packed as (s / norm, t.x, t.y) with a caller-supplied scale
// normalizer so every block entry is O(1).
// ---------------------------------------------------------------------------

inline constexpr int kHandBlockDim = 16 * 6 + 3;
inline constexpr int kFaceBlockDim = 6 + 10 + 3;

inline VecX pack_camera(const WeakPerspCamera& cam, double s_norm) {
  return Vec3(cam.s / s_norm, cam.t.x(), cam.t.y());
}

inline WeakPerspCamera unpack_camera(const Eigen::Ref<const VecX>& v,
                                     double s_norm) {
  WeakPerspCamera c;
  c.s = v[0] * s_norm;
  c.t = Vec2(v[1], v[2]);
  return c;
}

inline VecX pack_body_block(const ParamVector& p, const WeakPerspCamera& cam,
                            double s_norm) {
  VecX b(p.flat_size() + 3);
  b.head(p.flat_size()) = p.flatten();
  b.tail(3) = pack_camera(cam, s_norm);
  return b;
}

inline void unpack_body_block(const VecX& b, ParamVector& p,
                              WeakPerspCamera& cam, double s_norm) {
  p = ParamVector::from_flat(b.head(b.size() - 3));
  cam = unpack_camera(b.tail(3), s_norm);
}

inline VecX pack_hand_block(const ParamVector& p, bool left,
                            const WeakPerspCamera& part_cam, double s_norm) {
  VecX b(kHandBlockDim);
  const auto rows = p.hand_joint_rows(left);
  for (size_t i = 0; i < rows.size(); ++i)
    b.segment<6>(6 * static_cast<int>(i)) = p.theta.row(rows[i]).transpose();
  b.tail(3) = pack_camera(part_cam, s_norm);
  return b;
}

inline void apply_hand_block(const VecX& b, bool left, ParamVector& p,
                             WeakPerspCamera& part_cam, double s_norm) {
  if (b.size() != kHandBlockDim)
    throw InvalidInput("apply_hand_block: bad block length");
  const auto rows = p.hand_joint_rows(left);
  for (size_t i = 0; i < rows.size(); ++i)
    p.theta.row(rows[i]) = b.segment<6>(6 * static_cast<int>(i)).transpose();
  part_cam = unpack_camera(b.tail(3), s_norm);
}

inline VecX pack_face_block(const ParamVector& p, const WeakPerspCamera& part_cam,
                            double s_norm) {
  VecX b(kFaceBlockDim);
  b.head<6>() = p.theta.row(joints::kJaw).transpose();
  b.segment<10>(6) = p.psi;
  b.tail(3) = pack_camera(part_cam, s_norm);
  return b;
}

inline void apply_face_block(const VecX& b, ParamVector& p,
                             WeakPerspCamera& part_cam, double s_norm) {
  if (b.size() != kFaceBlockDim)
    throw InvalidInput("apply_face_block: bad block length");
  p.theta.row(joints::kJaw) = b.head<6>().transpose();
  p.psi = b.segment<10>(6);
  part_cam = unpack_camera(b.tail(3), s_norm);
}

// Part camera induced by composing a crop transform with the body camera:
// u = L*(s*X + s*t) + c with L = k*I gives s_p = k*s, t_p = t + c/(k*s).
inline WeakPerspCamera part_camera(const WeakPerspCamera& body_cam,
                                   const AffineTransform& T_crop) {
  const Eigen::Matrix2d L = T_crop.linear();
  const double k = L(0, 0);
  if (!(k > 0) || std::abs(L(0, 1)) > 1e-12 || std::abs(L(1, 0)) > 1e-12 ||
      std::abs(L(1, 1) - k) > 1e-12)
    throw InvalidInput("part_camera: crop transform must be a positive scale");
  WeakPerspCamera c;
  c.s = k * body_cam.s;
  c.t = body_cam.t + T_crop.translation() / c.s;
  return c;
}

// ---------------------------------------------------------------------------
// Part refinement (Eqs. 4-5 structure): run the part head seeded at the
// body prediction's conditioning block. Degenerate crops skip refinement.
// ---------------------------------------------------------------------------

struct PartRefinement {
  VecX block;
  bool skipped = false;
};

inline PartRefinement refine_part(const RegressorHead& head, const Image& crop,
                                  bool degenerate_crop, const VecX& conditioning) {
  if (conditioning.size() != head.block_dim())
    throw InvalidInput("refine_part: conditioning block dimension mismatch");
  if (degenerate_crop) return {conditioning, true};
  return {iterative_regress(head, extract_features(crop), conditioning), false};
}

// ---------------------------------------------------------------------------
// Initialization augmentation. All perturbations are applied about the
// ground truth so that collapsing every range/variance to zero reproduces
// the input exactly.
// ---------------------------------------------------------------------------

struct AugmentConfig {
  double hand_rot_deg = 90;    // wrist delta angle ~ U(-range, range)
  double face_rot_deg = 45;    // head (face global) delta angle ~ U(-range, range)
  double jaw_max_deg = 45;     // jaw delta about x ~ U(0, max)
  double shape_sigma = 1.0;    // beta offsets ~ N(0, sigma^2)
  double expr_sigma = 1.0;     // psi offsets ~ N(0, sigma^2)
  double finger_sigma = 0.3;   // finger-basis coefficients ~ N(0, sigma^2)
  double crop_jitter = 0.10;   // bbox translation jitter, fraction of box size
  double trunc_frac = 0.25;    // max crop truncation fraction
  double scale_lo = 0.75;      // down/up-sampling factor range for crops
  double scale_hi = 1.25;

  void validate() const {
    if (hand_rot_deg < 0 || face_rot_deg < 0 || jaw_max_deg < 0 ||
        shape_sigma < 0 || expr_sigma < 0 || finger_sigma < 0 ||
        crop_jitter < 0 || trunc_frac < 0 || scale_lo <= 0 ||
        scale_hi < scale_lo)
      throw InvalidInput("AugmentConfig: ranges must be non-negative");
  }

  nlohmann::json to_json() const {
    return {{"hand_rot_deg", hand_rot_deg}, {"face_rot_deg", face_rot_deg},
            {"jaw_max_deg", jaw_max_deg},   {"shape_sigma", shape_sigma},
            {"expr_sigma", expr_sigma},     {"finger_sigma", finger_sigma},
            {"crop_jitter", crop_jitter},   {"trunc_frac", trunc_frac},
            {"scale_lo", scale_lo},         {"scale_hi", scale_hi}};
  }
  static AugmentConfig from_json(const nlohmann::json& j) {
    AugmentConfig c;
    auto opt = [&](const char* k, double& v) {
      if (j.contains(k)) v = j[k].get<double>();
    };
    opt("hand_rot_deg", c.hand_rot_deg);
    opt("face_rot_deg", c.face_rot_deg);
    opt("jaw_max_deg", c.jaw_max_deg);
    opt("shape_sigma", c.shape_sigma);
    opt("expr_sigma", c.expr_sigma);
    opt("finger_sigma", c.finger_sigma);
    opt("crop_jitter", c.crop_jitter);
    opt("trunc_frac", c.trunc_frac);
    opt("scale_lo", c.scale_lo);
    opt("scale_hi", c.scale_hi);
    c.validate();
    return c;
  }
};

namespace detail {

// Fixed orthonormal basis over a hand's 15 finger rows (90 scalars), a
// deterministic stand-in for a PCA finger-pose space. The generating seed is
// a constant: the basis is part of the augmentation scheme, not of a draw.
inline const MatX& finger_basis() {
  static const MatX B = [] {
    std::mt19937_64 rng(0x0f1a9e5u);
    std::normal_distribution<double> g;
    MatX M(90, 6);
    for (int c = 0; c < 6; ++c) {
      VecX v(90);
      for (int i = 0; i < 90; ++i) v[i] = g(rng);
      for (int prev = 0; prev < c; ++prev) v -= M.col(prev).dot(v) * M.col(prev);
      M.col(c) = v.normalized();
    }
    return M;
  }();
  return B;
}

// Rotate a 6D pose row by a delta rotation about the row's own axis, i.e.
// add `angle` to the row's axis-angle magnitude. Identity rows rotate about
// a fixed fallback axis.
inline Vec6 spin_about_own_axis(const Vec6& row, double angle) {
  const Mat3 R = rot6d_to_matrix(row);
  const Eigen::AngleAxisd aa(R);
  const Vec3 axis = aa.angle() < 1e-12 ? Vec3(1, 0, 0) : Vec3(aa.axis());
  return matrix_to_rot6d(axis_angle_to_matrix(axis, angle) * R);
}

}  // namespace detail

inline ParamVector augment_init(const ParamVector& gt, const AugmentConfig& cfg,
                                std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  const double deg = M_PI / 180.0;
  ParamVector p = gt;

  // Wrist (hand global) spin: delta ~ U(-range, range) about the GT axis.
  std::uniform_real_distribution<double> hand_u(-cfg.hand_rot_deg * deg,
                                                cfg.hand_rot_deg * deg);
  // Zero-width ranges leave the block untouched bitwise (no draw, no
  // rotation round-trip), so collapsing the config reproduces gt exactly.
  for (bool left : {true, false}) {
    const int wrist = left ? joints::kLeftWrist : joints::kRightWrist;
    if (cfg.hand_rot_deg > 0)
      p.theta.row(wrist) =
          detail::spin_about_own_axis(p.theta.row(wrist).transpose(), hand_u(rng))
              .transpose();
  }

  // Fingers: offset along the fixed orthonormal finger basis.
  if (cfg.finger_sigma > 0)
    for (bool left : {true, false}) {
      VecX c(6);
      for (int i = 0; i < 6; ++i) c[i] = cfg.finger_sigma * gauss(rng);
      const VecX off = detail::finger_basis() * c;
      const int start = left ? joints::kLeftFingerStart : joints::kRightFingerStart;
      for (int i = 0; i < 15; ++i)
        p.theta.row(start + i) += off.segment<6>(6 * i).transpose();
    }

  // Face global (head joint) spin.
  std::uniform_real_distribution<double> face_u(-cfg.face_rot_deg * deg,
                                                cfg.face_rot_deg * deg);
  if (cfg.face_rot_deg > 0)
    p.theta.row(joints::kHead) =
        detail::spin_about_own_axis(p.theta.row(joints::kHead).transpose(),
                                    face_u(rng))
            .transpose();

  // Jaw: opening delta ~ U(0, max) about the x axis, composed onto GT.
  std::uniform_real_distribution<double> jaw_u(0.0, cfg.jaw_max_deg * deg);
  if (cfg.jaw_max_deg > 0) {
    const Mat3 R = rot6d_to_matrix(p.theta.row(joints::kJaw).transpose());
    p.theta.row(joints::kJaw) =
        matrix_to_rot6d(axis_angle_to_matrix(Vec3(1, 0, 0), jaw_u(rng)) * R)
            .transpose();
  }

  // Shape and expression offsets.
  if (cfg.shape_sigma > 0)
    for (int k = 0; k < 10; ++k) p.beta[k] += cfg.shape_sigma * gauss(rng);
  if (cfg.expr_sigma > 0)
    for (int k = 0; k < 10; ++k) p.psi[k] += cfg.expr_sigma * gauss(rng);
  return p;
}

// ---------------------------------------------------------------------------
// Attention boxes for the part crops. The raw joint extents underestimate the
// geometry (the face has only two keypoints), so the boxes are inflated by a
// per-part margin before cropping; a box below the 4 px floor marks the part
// degenerate and refinement is skipped.
// ---------------------------------------------------------------------------

inline PartBox attention_box(const MatX2& joints2d, const std::vector<int>& rows,
                             PartTag tag) {
  std::vector<Vec2> pts;
  pts.reserve(rows.size());
  for (int r : rows) pts.push_back(joints2d.row(r).transpose());
  PartBox box = part_bbox(std::span<const Vec2>(pts), tag, 0.0);
  box.size *= (tag == PartTag::Face) ? 8.0 : 1.5;
  box.degenerate = false;
  if (box.size < 4.0) {
    box.size = 4.0;
    box.degenerate = true;
  }
  return box;
}

inline std::vector<int> part_rows(const ParamVector& p, PartTag tag) {
  if (tag == PartTag::LeftHand) return p.hand_joint_rows(true);
  if (tag == PartTag::RightHand) return p.hand_joint_rows(false);
  if (tag == PartTag::Face) return {joints::kHead, joints::kJaw};
  throw InvalidInput("part_rows: body is not a refinable part");
}

// ---------------------------------------------------------------------------
// Adam optimizer over one MLP's parameters.
// ---------------------------------------------------------------------------

struct AdamState {
  Mlp::Grads m, v;
  long steps = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState init(const Mlp& w) {
    AdamState a;
    a.m = Mlp::Grads::zeros_like(w);
    a.v = Mlp::Grads::zeros_like(w);
    return a;
  }

  void step(Mlp& w, const Mlp::Grads& g, double lr) {
    ++steps;
    const double c1 = 1.0 - std::pow(beta1, steps);
    const double c2 = 1.0 - std::pow(beta2, steps);
    auto upd = [&](auto& W, auto& M, auto& V, const auto& G) {
      M = beta1 * M + (1.0 - beta1) * G;
      V.array() = beta2 * V.array() + (1.0 - beta2) * G.array().square();
      W.array() -= lr * (M.array() / c1) / ((V.array() / c2).sqrt() + eps);
    };
    upd(w.W1, m.W1, v.W1, g.W1);
    upd(w.W2, m.W2, v.W2, g.W2);
    upd(w.W3, m.W3, v.W3, g.W3);
    upd(w.b1, m.b1, v.b1, g.b1);
    upd(w.b2, m.b2, v.b2, g.b2);
    upd(w.b3, m.b3, v.b3, g.b3);
  }
};

// ---------------------------------------------------------------------------
// Toy training. Phase 1 trains the body head on full-image features from a
// fixed mean initialization, and each part head on ground-truth attention
// crops with augmented conditioning blocks. Phase 2 fine-tunes end to end
// through the predicted attention crops: gradients flow into the part heads
// and back into the body head via the conditioning blocks and the body loss,
// but not through the crop pixels or the box geometry (stop-gradient).
// ---------------------------------------------------------------------------

struct TrainSample {
  Image image;
  ParamVector gt_params;
  WeakPerspCamera gt_camera;
};

struct TrainConfig {
  int phase1_epochs = 30;
  int phase2_epochs = 10;
  double lr = 1e-3;
  double lr2 = 1e-4;
  int batch = 16;
  int hidden = 128;
  int t = 3;
  int crop_size = 32;
  double s_norm = 32.0;       // body camera scale normalizer
  double part_s_norm = 256.0; // part camera scale normalizer
  double divergence_loss = 1e6;
  std::uint64_t seed = 0;
  AugmentConfig augment;

  void validate() const {
    if (phase1_epochs < 1 || phase2_epochs < 0 || batch < 1 || hidden < 1 ||
        t < 1 || crop_size < 8 || !(lr > 0) || !(lr2 > 0) || !(s_norm > 0) ||
        !(part_s_norm > 0))
      throw InvalidInput("TrainConfig: invalid hyperparameter");
    augment.validate();
  }

  nlohmann::json to_json() const {
    return {{"phase1_epochs", phase1_epochs}, {"phase2_epochs", phase2_epochs},
            {"lr", lr},           {"lr2", lr2},
            {"batch", batch},     {"hidden", hidden},
            {"t", t},             {"crop_size", crop_size},
            {"s_norm", s_norm},   {"part_s_norm", part_s_norm},
            {"divergence_loss", divergence_loss},
            {"seed", seed},       {"augment", augment.to_json()}};
  }
  static TrainConfig from_json(const nlohmann::json& j) {
    TrainConfig c;
    auto opt = [&](const char* k, auto& v) {
      if (j.contains(k)) v = j[k].get<std::decay_t<decltype(v)>>();
    };
    opt("phase1_epochs", c.phase1_epochs);
    opt("phase2_epochs", c.phase2_epochs);
    opt("lr", c.lr);
    opt("lr2", c.lr2);
    opt("batch", c.batch);
    opt("hidden", c.hidden);
    opt("t", c.t);
    opt("crop_size", c.crop_size);
    opt("s_norm", c.s_norm);
    opt("part_s_norm", c.part_s_norm);
    opt("divergence_loss", c.divergence_loss);
    opt("seed", c.seed);
    if (j.contains("augment")) c.augment = AugmentConfig::from_json(j["augment"]);
    c.validate();
    return c;
  }
};

struct TrainedHeads {
  RegressorHead body, left_hand, right_hand, face;
  VecX theta_bar;  // body-head initialization block
  double s_norm = 32.0, part_s_norm = 256.0;
  int crop_size = 32;
  std::vector<double> curve_body, curve_left_hand, curve_right_hand,
      curve_face, curve_phase2;

  nlohmann::json to_json() const {
    return {{"body", body.to_json()},
            {"left_hand", left_hand.to_json()},
            {"right_hand", right_hand.to_json()},
            {"face", face.to_json()},
            {"theta_bar", std::vector<double>(theta_bar.data(),
                                              theta_bar.data() + theta_bar.size())},
            {"s_norm", s_norm},
            {"part_s_norm", part_s_norm},
            {"crop_size", crop_size},
            {"curves",
             {{"body", curve_body},
              {"left_hand", curve_left_hand},
              {"right_hand", curve_right_hand},
              {"face", curve_face},
              {"phase2", curve_phase2}}}};
  }
  static TrainedHeads from_json(const nlohmann::json& j) {
    TrainedHeads h;
    h.body = RegressorHead::from_json(j.at("body"));
    h.left_hand = RegressorHead::from_json(j.at("left_hand"));
    h.right_hand = RegressorHead::from_json(j.at("right_hand"));
    h.face = RegressorHead::from_json(j.at("face"));
    const auto tb = j.at("theta_bar").get<std::vector<double>>();
    h.theta_bar = Eigen::Map<const VecX>(tb.data(), static_cast<Eigen::Index>(tb.size()));
    h.s_norm = j.at("s_norm").get<double>();
    h.part_s_norm = j.at("part_s_norm").get<double>();
    h.crop_size = j.at("crop_size").get<int>();
    const auto& c = j.at("curves");
    h.curve_body = c.at("body").get<std::vector<double>>();
    h.curve_left_hand = c.at("left_hand").get<std::vector<double>>();
    h.curve_right_hand = c.at("right_hand").get<std::vector<double>>();
    h.curve_face = c.at("face").get<std::vector<double>>();
    h.curve_phase2 = c.at("phase2").get<std::vector<double>>();
    return h;
  }
};

namespace detail {

// Map conditioning-block entries to flat body-block indices; -1 marks the
// entries that are detached in phase 2 (the part camera, which derives from
// the stop-gradient crop geometry).
inline std::vector<int> cond_to_body_index(const ParamVector& p, PartTag tag) {
  std::vector<int> idx;
  if (tag == PartTag::Face) {
    idx.resize(kFaceBlockDim, -1);
    for (int k = 0; k < 6; ++k) idx[k] = 20 + 6 * joints::kJaw + k;
    for (int k = 0; k < 10; ++k) idx[6 + k] = 10 + k;  // psi lives at 10..19
  } else {
    idx.resize(kHandBlockDim, -1);
    const auto rows = p.hand_joint_rows(tag == PartTag::LeftHand);
    for (size_t i = 0; i < rows.size(); ++i)
      for (int k = 0; k < 6; ++k)
        idx[6 * static_cast<int>(i) + k] = 20 + 6 * rows[i] + k;
  }
  return idx;
}

inline VecX pack_part_block(const ParamVector& p, PartTag tag,
                            const WeakPerspCamera& pcam, double s_norm) {
  if (tag == PartTag::Face) return pack_face_block(p, pcam, s_norm);
  return pack_hand_block(p, tag == PartTag::LeftHand, pcam, s_norm);
}

}  // namespace detail

inline TrainedHeads train_toy(const BodyModel& model,
                              const std::vector<TrainSample>& samples,
                              const TrainConfig& cfg) {
  cfg.validate();
  if (samples.empty()) throw InvalidInput("train_toy: empty training set");
  const int n = static_cast<int>(samples.size());
  const int body_dim = samples[0].gt_params.flat_size() + 3;
  const std::array<PartTag, 3> kParts = {PartTag::LeftHand, PartTag::RightHand,
                                         PartTag::Face};

  TrainedHeads H;
  H.s_norm = cfg.s_norm;
  H.part_s_norm = cfg.part_s_norm;
  H.crop_size = cfg.crop_size;
  H.body = {Mlp::glorot(kFeatureDim + body_dim, body_dim, cfg.seed ^ 0xb0d1u,
                        cfg.hidden),
            cfg.t};
  H.left_hand = {Mlp::glorot(kFeatureDim + kHandBlockDim, kHandBlockDim,
                             cfg.seed ^ 0x1ef7u, cfg.hidden),
                 cfg.t};
  H.right_hand = {Mlp::glorot(kFeatureDim + kHandBlockDim, kHandBlockDim,
                              cfg.seed ^ 0x0717u, cfg.hidden),
                  cfg.t};
  H.face = {Mlp::glorot(kFeatureDim + kFaceBlockDim, kFaceBlockDim,
                        cfg.seed ^ 0xfaceu, cfg.hidden),
            cfg.t};

  // --- Precompute per-sample quantities -----------------------------------
  std::vector<FeatureVector> phi_full(n);
  std::vector<VecX> y_body(n);
  // Per part: GT-crop features, conditioning init, and target block.
  std::array<std::vector<FeatureVector>, 3> phi_part;
  std::array<std::vector<VecX>, 3> cond_part, y_part;
  std::array<std::vector<char>, 3> ok_part;
  for (auto& v : phi_part) v.resize(n);
  for (auto& v : cond_part) v.resize(n);
  for (auto& v : y_part) v.resize(n);
  for (auto& v : ok_part) v.assign(n, 0);

  WeakPerspCamera mean_cam;
  mean_cam.s = 0;
  mean_cam.t.setZero();
  for (int i = 0; i < n; ++i) {
    phi_full[i] = extract_features(samples[i].image);
    y_body[i] = pack_body_block(samples[i].gt_params, samples[i].gt_camera,
                                cfg.s_norm);
    mean_cam.s += samples[i].gt_camera.s / n;
    mean_cam.t += samples[i].gt_camera.t / n;
  }
  H.theta_bar = pack_body_block(ParamVector::neutral(model.num_joints()),
                                mean_cam, cfg.s_norm);

  auto check_diverged = [&](double loss, const std::vector<double>& curve,
                            const char* what) {
    if (std::isfinite(loss) && loss <= cfg.divergence_loss) return;
    throw NumericalError(std::string("train_toy: ") + what +
                         " diverged; loss curve: " +
                         nlohmann::json(curve).dump());
  };

  // --- Phase 1: body head first, then each part head ----------------------
  auto train_head = [&](RegressorHead& head, auto get_sample,
                        std::vector<double>& curve, std::uint64_t shuffle_seed,
                        const char* what) {
    std::vector<int> order;
    for (int i = 0; i < n; ++i)
      if (get_sample(i) != nullptr) order.push_back(i);
    if (order.empty()) return;
    AdamState adam = AdamState::init(head.mlp);
    std::mt19937_64 rng(shuffle_seed);
    for (int epoch = 0; epoch < cfg.phase1_epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_loss = 0;
      for (size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
        const size_t b1 = std::min(order.size(), b0 + cfg.batch);
        Mlp::Grads g = Mlp::Grads::zeros_like(head.mlp);
        for (size_t bi = b0; bi < b1; ++bi) {
          const auto* s = get_sample(order[bi]);
          const auto rc =
              detail::iterative_regress_cached(head, s->phi, s->init);
          const VecX r = rc.out - s->target;
          epoch_loss += 0.5 * r.squaredNorm();
          detail::iterative_regress_backward(head, rc, r, g);
        }
        g.scale(1.0 / static_cast<double>(b1 - b0));
        adam.step(head.mlp, g, cfg.lr);
      }
      curve.push_back(epoch_loss / order.size());
      check_diverged(curve.back(), curve, what);
    }
  };

  struct HeadSample {
    FeatureVector phi;
    VecX init, target;
  };
  {
    std::vector<HeadSample> body_s(n);
    for (int i = 0; i < n; ++i)
      body_s[i] = {phi_full[i], H.theta_bar, y_body[i]};
    train_head(
        H.body, [&](int i) { return &body_s[i]; }, H.curve_body,
        cfg.seed ^ 0x51u, "body head");
  }

  // Part-head training data lives in the regime the heads will see at
  // inference: attention crops and conditioning blocks come from the trained
  // body head's own predictions (plus seeded crop jitter and initial-point
  // noise), targets from the ground truth.
  for (int i = 0; i < n; ++i) {
    const std::uint64_t si = cfg.seed + 0x9e3779b97f4a7c15ull * (i + 1);
    std::mt19937_64 rng(si);
    std::uniform_real_distribution<double> jit(-cfg.augment.crop_jitter,
                                               cfg.augment.crop_jitter);
    std::uniform_real_distribution<double> scl(cfg.augment.scale_lo,
                                               cfg.augment.scale_hi);
    ParamVector pred;
    WeakPerspCamera pred_cam;
    unpack_body_block(iterative_regress(H.body, phi_full[i], H.theta_bar), pred,
                      pred_cam, cfg.s_norm);
    if (!(pred_cam.s > 0)) continue;
    const MatX2 kp = project(forward(model, pred).joints, pred_cam);
    const ParamVector aug = augment_init(pred, cfg.augment, si);
    for (int pi = 0; pi < 3; ++pi) {
      const PartTag tag = kParts[pi];
      PartBox box = attention_box(kp, part_rows(pred, tag), tag);
      // Crop augmentation: jitter the center, rescale the box.
      box.center += Vec2(jit(rng), jit(rng)) * box.size;
      box.size *= scl(rng);
      if (box.degenerate) continue;
      const AffineTransform T = bbox_to_affine(box, cfg.crop_size);
      phi_part[pi][i] =
          extract_features(crop(samples[i].image, T, cfg.crop_size));
      y_part[pi][i] = detail::pack_part_block(
          samples[i].gt_params, tag, part_camera(samples[i].gt_camera, T),
          cfg.part_s_norm);
      const WeakPerspCamera pcam = part_camera(pred_cam, T);
      cond_part[pi][i] = detail::pack_part_block(aug, tag, pcam, cfg.part_s_norm);
      ok_part[pi][i] = 1;
    }
  }
  std::array<RegressorHead*, 3> part_heads = {&H.left_hand, &H.right_hand,
                                              &H.face};
  std::array<std::vector<double>*, 3> part_curves = {
      &H.curve_left_hand, &H.curve_right_hand, &H.curve_face};
  for (int pi = 0; pi < 3; ++pi) {
    std::vector<HeadSample> ps(n);
    for (int i = 0; i < n; ++i)
      if (ok_part[pi][i])
        ps[i] = {phi_part[pi][i], cond_part[pi][i], y_part[pi][i]};
    train_head(
        *part_heads[pi],
        [&](int i) -> const HeadSample* {
          return ok_part[pi][i] ? &ps[i] : nullptr;
        },
        *part_curves[pi], cfg.seed ^ (0x52u + pi), "part head");
  }

  // --- Phase 2: end to end through predicted attention crops ---------------
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  AdamState adam_body = AdamState::init(H.body.mlp);
  std::array<AdamState, 3> adam_part = {AdamState::init(H.left_hand.mlp),
                                        AdamState::init(H.right_hand.mlp),
                                        AdamState::init(H.face.mlp)};
  std::mt19937_64 rng2(cfg.seed ^ 0x9132u);
  for (int epoch = 0; epoch < cfg.phase2_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng2);
    double epoch_loss = 0;
    for (size_t b0 = 0; b0 < order.size(); b0 += cfg.batch) {
      const size_t b1 = std::min(order.size(), b0 + cfg.batch);
      Mlp::Grads g_body = Mlp::Grads::zeros_like(H.body.mlp);
      std::array<Mlp::Grads, 3> g_part = {
          Mlp::Grads::zeros_like(H.left_hand.mlp),
          Mlp::Grads::zeros_like(H.right_hand.mlp),
          Mlp::Grads::zeros_like(H.face.mlp)};
      for (size_t bi = b0; bi < b1; ++bi) {
        const int i = order[bi];
        const auto rc_body =
            detail::iterative_regress_cached(H.body, phi_full[i], H.theta_bar);
        VecX d_body = rc_body.out - y_body[i];
        epoch_loss += 0.5 * d_body.squaredNorm();

        ParamVector pred;
        WeakPerspCamera pred_cam;
        unpack_body_block(rc_body.out, pred, pred_cam, cfg.s_norm);
        if (pred_cam.s > 0) {
          // Stop-gradient: keypoints, boxes, crops, and part cameras are
          // constants of the backward pass.
          const MatX2 kp = project(forward(model, pred).joints, pred_cam);
          for (int pi = 0; pi < 3; ++pi) {
            const PartTag tag = kParts[pi];
            const PartBox box = attention_box(kp, part_rows(pred, tag), tag);
            if (box.degenerate) continue;
            const AffineTransform T = bbox_to_affine(box, cfg.crop_size);
            const FeatureVector phi =
                extract_features(crop(samples[i].image, T, cfg.crop_size));
            const WeakPerspCamera pcam = part_camera(pred_cam, T);
            const VecX cond =
                detail::pack_part_block(pred, tag, pcam, cfg.part_s_norm);
            const VecX target = detail::pack_part_block(
                samples[i].gt_params, tag, part_camera(samples[i].gt_camera, T),
                cfg.part_s_norm);
            const auto rc_p = detail::iterative_regress_cached(
                *part_heads[pi], phi, cond);
            const VecX r = rc_p.out - target;
            epoch_loss += 0.5 * r.squaredNorm();
            const VecX d_cond = detail::iterative_regress_backward(
                *part_heads[pi], rc_p, r, g_part[pi]);
            const auto idx = detail::cond_to_body_index(pred, tag);
            for (size_t k = 0; k < idx.size(); ++k)
              if (idx[k] >= 0) d_body[idx[k]] += d_cond[static_cast<int>(k)];
          }
        }
        detail::iterative_regress_backward(H.body, rc_body, d_body, g_body);
      }
      const double inv = 1.0 / static_cast<double>(b1 - b0);
      g_body.scale(inv);
      adam_body.step(H.body.mlp, g_body, cfg.lr2);
      for (int pi = 0; pi < 3; ++pi) {
        g_part[pi].scale(inv);
        adam_part[pi].step(part_heads[pi]->mlp, g_part[pi], cfg.lr2);
      }
    }
    H.curve_phase2.push_back(epoch_loss / n);
    check_diverged(H.curve_phase2.back(), H.curve_phase2, "phase 2");
  }
  return H;
}

// ---------------------------------------------------------------------------
// Full-pipeline inference: body head on the whole image, then body-driven
// attention crops feed the part heads, whose blocks overwrite the body
// prediction's hand/face parameters.
// ---------------------------------------------------------------------------

struct Prediction {
  ParamVector params;
  WeakPerspCamera camera;
  ParamVector body_only_params;  // before part refinement
  bool left_hand_skipped = false, right_hand_skipped = false,
       face_skipped = false;
};

inline Prediction predict(const TrainedHeads& H, const BodyModel& model,
                          const Image& img, bool refine_parts = true) {
  Prediction out;
  const VecX body_block =
      iterative_regress(H.body, extract_features(img), H.theta_bar);
  unpack_body_block(body_block, out.params, out.camera, H.s_norm);
  out.body_only_params = out.params;
  if (!refine_parts) return out;

  if (!(out.camera.s > 0)) {
    out.left_hand_skipped = out.right_hand_skipped = out.face_skipped = true;
    return out;
  }
  const MatX2 kp = project(forward(model, out.params).joints, out.camera);
  const std::array<PartTag, 3> kParts = {PartTag::LeftHand, PartTag::RightHand,
                                         PartTag::Face};
  const std::array<const RegressorHead*, 3> heads = {&H.left_hand,
                                                     &H.right_hand, &H.face};
  std::array<bool*, 3> skipped = {&out.left_hand_skipped,
                                  &out.right_hand_skipped, &out.face_skipped};
  for (int pi = 0; pi < 3; ++pi) {
    const PartTag tag = kParts[pi];
    const PartBox box = attention_box(kp, part_rows(out.params, tag), tag);
    const AffineTransform T = bbox_to_affine(box, H.crop_size);
    const Image part_crop = crop(img, T, H.crop_size);
    const WeakPerspCamera pcam = part_camera(out.camera, T);
    const VecX cond = detail::pack_part_block(out.params, tag, pcam, H.part_s_norm);
    const PartRefinement ref =
        refine_part(*heads[pi], part_crop, box.degenerate, cond);
    *skipped[pi] = ref.skipped;
    if (ref.skipped) continue;
    WeakPerspCamera discard;
    if (tag == PartTag::Face)
      apply_face_block(ref.block, out.params, discard, H.part_s_norm);
    else
      apply_hand_block(ref.block, tag == PartTag::LeftHand, out.params, discard,
                       H.part_s_norm);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-part PA-V2V: Procrustes alignment solved on the full mesh, error
// averaged over each part's vertex subset.
// ---------------------------------------------------------------------------

struct PartV2VReport {
  double all = 0, body = 0, left_hand = 0, right_hand = 0, face = 0;
};

inline PartV2VReport evaluate_pa_v2v(const BodyModel& model,
                                     const ParamVector& pred,
                                     const ParamVector& gt) {
  const MatX3 vp = forward(model, pred).vertices;
  const MatX3 vg = forward(model, gt).vertices;
  std::vector<int> all, body, lh, rh, face;
  for (size_t i = 0; i < model.vertex_labels.size(); ++i) {
    all.push_back(static_cast<int>(i));
    switch (model.vertex_labels[i]) {
      case PartTag::Body: body.push_back(static_cast<int>(i)); break;
      case PartTag::LeftHand: lh.push_back(static_cast<int>(i)); break;
      case PartTag::RightHand: rh.push_back(static_cast<int>(i)); break;
      case PartTag::Face: face.push_back(static_cast<int>(i)); break;
    }
  }
  PartV2VReport r;
  r.all = v2v(vp, vg, all, true, all);
  r.body = v2v(vp, vg, body, true, all);
  r.left_hand = v2v(vp, vg, lh, true, all);
  r.right_hand = v2v(vp, vg, rh, true, all);
  r.face = v2v(vp, vg, face, true, all);
  return r;
}

}  // namespace bodykit
