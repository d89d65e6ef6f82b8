#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "bodykit/camera.hpp"
#include "bodykit/image.hpp"
#include "bodykit/losses.hpp"
#include "bodykit/model.hpp"
#include "bodykit/regressor.hpp"

namespace bodykit {

// ---------------------------------------------------------------------------
// Minimal depth-buffered flat-shaded rasterizer. The camera is orthographic
// after the weak-perspective scale: pixel coords come straight from
// project(), depth is the camera-space z (smaller = closer to the viewer).
// ---------------------------------------------------------------------------

struct RasterResult {
  Image image;                // grayscale render in [0, 1]
  std::vector<double> depth;  // per pixel, +inf where nothing was drawn
  std::vector<int> owner;     // per pixel, face_owner id of the front face (-1 empty)
  double z_min = 0, z_max = 0;  // depth range over drawn vertices
};

inline RasterResult rasterize(const MatX3& vertices, const FaceList& faces,
                              const WeakPerspCamera& cam, int resolution,
                              const std::vector<int>* face_owner = nullptr) {
  if (resolution < 8) throw InvalidInput("rasterize: resolution too small");
  if (face_owner &&
      static_cast<Eigen::Index>(face_owner->size()) != faces.rows())
    throw InvalidInput("rasterize: face_owner length mismatch");
  RasterResult out;
  out.image = Image(resolution, resolution, 1);
  out.depth.assign(static_cast<size_t>(resolution) * resolution,
                   std::numeric_limits<double>::infinity());
  out.owner.assign(out.depth.size(), -1);

  const MatX2 p2 = project(vertices, cam);
  out.z_min = vertices.col(2).minCoeff();
  out.z_max = vertices.col(2).maxCoeff();

  const Vec3 light = Vec3(0.3, -0.5, -0.8).normalized();
  for (Eigen::Index fi = 0; fi < faces.rows(); ++fi) {
    const int v0 = faces(fi, 0), v1 = faces(fi, 1), v2 = faces(fi, 2);
    const Vec2 a = p2.row(v0).transpose();
    const Vec2 b = p2.row(v1).transpose();
    const Vec2 c = p2.row(v2).transpose();
    const double za = vertices(v0, 2), zb = vertices(v1, 2),
                 zc = vertices(v2, 2);
    // Flat shade from the 3D face normal; both sides lit the same so the
    // inside of the tube geometry does not render black.
    const Vec3 e1 = (vertices.row(v1) - vertices.row(v0)).transpose();
    const Vec3 e2 = (vertices.row(v2) - vertices.row(v0)).transpose();
    Vec3 n = e1.cross(e2);
    const double nn = n.norm();
    const double shade =
        nn > 0 ? 0.25 + 0.75 * std::abs(n.dot(light)) / nn : 0.25;

    const double area = (b.x() - a.x()) * (c.y() - a.y()) -
                        (c.x() - a.x()) * (b.y() - a.y());
    if (std::abs(area) < 1e-12) continue;  // degenerate in projection
    const int x0 = std::max(0, static_cast<int>(std::floor(
                                   std::min({a.x(), b.x(), c.x()}) - 0.5)));
    const int x1 = std::min(resolution - 1,
                            static_cast<int>(std::ceil(
                                std::max({a.x(), b.x(), c.x()}) - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::floor(
                                   std::min({a.y(), b.y(), c.y()}) - 0.5)));
    const int y1 = std::min(resolution - 1,
                            static_cast<int>(std::ceil(
                                std::max({a.y(), b.y(), c.y()}) - 0.5)));
    for (int i = y0; i <= y1; ++i) {
      for (int j = x0; j <= x1; ++j) {
        const Vec2 q(j + 0.5, i + 0.5);  // pixel center
        const double w0 = ((b.x() - q.x()) * (c.y() - q.y()) -
                           (c.x() - q.x()) * (b.y() - q.y())) /
                          area;
        const double w1 = ((c.x() - q.x()) * (a.y() - q.y()) -
                           (a.x() - q.x()) * (c.y() - q.y())) /
                          area;
        const double w2 = 1.0 - w0 - w1;
        if (w0 < 0 || w1 < 0 || w2 < 0) continue;
        const double z = w0 * za + w1 * zb + w2 * zc;
        const size_t px = static_cast<size_t>(i) * resolution + j;
        if (z < out.depth[px]) {
          out.depth[px] = z;
          out.image.at(i, j) = shade;
          out.owner[px] = face_owner ? (*face_owner)[fi] : -1;
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic scenes: posed render + GT parameters + keypoints w/ visibility.
// ---------------------------------------------------------------------------

struct SyntheticScene {
  Image image;
  ParamVector gt_params;
  WeakPerspCamera gt_camera;
  KeypointSet keypoints;
  std::uint64_t seed = 0;
  int resolution = 0;

  nlohmann::json to_json() const {
    const VecX flat = gt_params.flatten();
    nlohmann::json pts = nlohmann::json::array();
    for (Eigen::Index j = 0; j < keypoints.points2d->rows(); ++j)
      pts.push_back({(*keypoints.points2d)(j, 0), (*keypoints.points2d)(j, 1)});
    return {{"version", 1},
            {"seed", seed},
            {"resolution", resolution},
            {"params", std::vector<double>(flat.data(), flat.data() + flat.size())},
            {"camera", {{"s", gt_camera.s}, {"t", {gt_camera.t.x(), gt_camera.t.y()}}}},
            {"keypoints", pts},
            {"visibility", keypoints.visibility}};
  }

  static SyntheticScene from_json(const nlohmann::json& j, Image img) {
    if (!j.contains("version") || j["version"].get<int>() != 1)
      throw InvalidInput("SyntheticScene: unsupported schema version");
    SyntheticScene s;
    s.image = std::move(img);
    s.seed = j.at("seed").get<std::uint64_t>();
    s.resolution = j.at("resolution").get<int>();
    const auto flat = j.at("params").get<std::vector<double>>();
    s.gt_params = ParamVector::from_flat(
        Eigen::Map<const VecX>(flat.data(), static_cast<Eigen::Index>(flat.size())));
    s.gt_camera.s = j.at("camera").at("s").get<double>();
    s.gt_camera.t = Vec2(j.at("camera").at("t")[0].get<double>(),
                         j.at("camera").at("t")[1].get<double>());
    const auto& pts = j.at("keypoints");
    MatX2 p(pts.size(), 2);
    for (size_t k = 0; k < pts.size(); ++k) {
      p(static_cast<Eigen::Index>(k), 0) = pts[k][0].get<double>();
      p(static_cast<Eigen::Index>(k), 1) = pts[k][1].get<double>();
    }
    s.keypoints.points2d = std::move(p);
    s.keypoints.visibility = j.at("visibility").get<std::vector<int>>();
    return s;
  }
};

namespace detail {

// Radius of the tube geometry around a joint, mirroring the generator; the
// visibility test compares the joint's front surface (depth minus radius)
// against the depth buffer.
inline double joint_surface_radius(int j) {
  const PartTag tag = joint_part(j);
  return (tag == PartTag::LeftHand || tag == PartTag::RightHand) ? 0.012 : 0.05;
}

// Dominant skinning joint per vertex, then per face (via its first vertex).
// Used as the rasterizer's per-pixel owner id for the self-occlusion test.
inline std::vector<int> face_owner_joints(const BodyModel& model) {
  std::vector<int> vowner(model.num_vertices(), 0);
  for (int i = 0; i < model.num_vertices(); ++i) {
    double best = -1;
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(
             model.skin_weights, i);
         it; ++it)
      if (it.value() > best) {
        best = it.value();
        vowner[i] = static_cast<int>(it.col());
      }
  }
  std::vector<int> fowner(model.faces.rows());
  for (Eigen::Index f = 0; f < model.faces.rows(); ++f)
    fowner[f] = vowner[model.faces(f, 0)];
  return fowner;
}

}  // namespace detail

// Render the model under (params, cam) and derive keypoints + visibility.
// A joint is visible iff it projects inside the frame and either (a) its
// front surface (depth minus tube radius) is within eps (1% of the body
// depth range) of the depth buffer, or (b) the surface at its pixel belongs
// to an adjacent bone (its own, its parent's, or a child's) — a joint is
// never counted as occluded by its own foreshortened limb.
inline SyntheticScene make_scene(const BodyModel& model, const ParamVector& params,
                                 const WeakPerspCamera& cam, int resolution,
                                 std::uint64_t seed) {
  const PosedResult posed = forward(model, params);
  SyntheticScene s;
  s.resolution = resolution;
  s.seed = seed;
  s.gt_params = params;
  s.gt_camera = cam;
  const std::vector<int> fowner = detail::face_owner_joints(model);
  RasterResult raster =
      rasterize(posed.vertices, model.faces, cam, resolution, &fowner);
  s.image = std::move(raster.image);

  const MatX2 kp = project(posed.joints, cam);
  const double eps = 0.01 * std::max(1e-12, raster.z_max - raster.z_min);
  s.keypoints.points2d = kp;
  s.keypoints.visibility.assign(model.num_joints(), 0);
  for (int j = 0; j < model.num_joints(); ++j) {
    const double x = kp(j, 0), y = kp(j, 1);
    if (x < 0 || y < 0 || x >= resolution || y >= resolution) continue;
    const size_t px = static_cast<size_t>(static_cast<int>(y)) * resolution +
                      static_cast<int>(x);
    const double zbuf = raster.depth[px];
    const double z_front = posed.joints(j, 2) - detail::joint_surface_radius(j);
    const int own = raster.owner[px];
    const bool adjacent =
        own >= 0 && (own == j || own == model.parents[j] ||
                     (own < model.num_joints() && model.parents[own] == j));
    if (z_front <= zbuf + eps || adjacent) s.keypoints.visibility[j] = 1;
  }
  return s;
}

// Sample scene parameters from the augmentation distributions about the
// neutral pose, frame the body with a jittered camera, and render. Bodies
// that land fully out of frame are resampled (new derived seed) up to 10
// times before erroring out.
inline SyntheticScene synth_scene(const BodyModel& model, std::uint64_t seed,
                                  int resolution,
                                  const AugmentConfig& cfg = AugmentConfig{}) {
  if (resolution < 64) throw InvalidInput("synth_scene: resolution must be >= 64");
  cfg.validate();
  for (int attempt = 0; attempt < 10; ++attempt) {
    const std::uint64_t draw_seed = seed + 0x9e3779b97f4a7c15ull * attempt;
    const ParamVector params =
        augment_init(ParamVector::neutral(model.num_joints()), cfg, draw_seed);

    std::mt19937_64 rng(draw_seed ^ 0xc2b2ae3d27d4eb4full);
    std::uniform_real_distribution<double> su(cfg.scale_lo, cfg.scale_hi);
    std::uniform_real_distribution<double> ju(-cfg.crop_jitter, cfg.crop_jitter);

    const MatX3 X = forward(model, params).joints;
    const double cx = 0.5 * (X.col(0).minCoeff() + X.col(0).maxCoeff());
    const double cy = 0.5 * (X.col(1).minCoeff() + X.col(1).maxCoeff());
    const double extent = std::max(X.col(0).maxCoeff() - X.col(0).minCoeff(),
                                   X.col(1).maxCoeff() - X.col(1).minCoeff());
    WeakPerspCamera cam;
    cam.s = su(rng) * 0.40 * resolution / std::max(extent, 1e-6);
    cam.t = Vec2(-cx + (0.5 + ju(rng)) * resolution / cam.s,
                 -cy + (0.5 + ju(rng)) * resolution / cam.s);

    SyntheticScene s = make_scene(model, params, cam, resolution, seed);
    bool any_in_frame = false;
    for (Eigen::Index j = 0; j < s.keypoints.points2d->rows(); ++j) {
      const double x = (*s.keypoints.points2d)(j, 0);
      const double y = (*s.keypoints.points2d)(j, 1);
      if (x >= 0 && y >= 0 && x < resolution && y < resolution)
        any_in_frame = true;
    }
    if (any_in_frame) return s;
  }
  throw NumericalError("synth_scene: body out of frame after 10 resamples");
}

// ---------------------------------------------------------------------------
// Scene persistence: <stem>.png (8-bit grayscale render) + <stem>.json.
// The JSON carries exact doubles; only the raster goes through quantization.
// ---------------------------------------------------------------------------

inline void save_scene(const SyntheticScene& s, const std::filesystem::path& dir,
                       const std::string& stem) {
  std::filesystem::create_directories(dir);
  save_png(s.image, (dir / (stem + ".png")).string());
  std::ofstream out(dir / (stem + ".json"));
  if (!out) throw InvalidInput("save_scene: cannot open output file");
  out << s.to_json().dump(2) << "\n";
}

inline SyntheticScene load_scene(const std::filesystem::path& dir,
                                 const std::string& stem) {
  std::ifstream in(dir / (stem + ".json"));
  if (!in) throw InvalidInput("load_scene: cannot open " +
                              (dir / (stem + ".json")).string());
  nlohmann::json j;
  in >> j;
  Image img = load_png((dir / (stem + ".png")).string());
  return SyntheticScene::from_json(j, std::move(img));
}

// ---------------------------------------------------------------------------
// Experiment manifests: enough provenance to re-run a command and compare
// outputs bitwise. Hashes are FNV-1a over canonical JSON dumps.
// ---------------------------------------------------------------------------

inline std::string fnv1a_hex(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : bytes) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

inline std::string hash_json(const nlohmann::json& j) { return fnv1a_hex(j.dump()); }

inline std::string hash_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw InvalidInput("hash_file: cannot open " + p.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return fnv1a_hex(bytes);
}

inline constexpr const char* kToolVersion = "bodykit 0.1.0";

struct ExperimentManifest {
  std::string command;
  std::string config_hash;
  std::string model_hash;
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> outputs;
  std::string version = kToolVersion;

  nlohmann::json to_json() const {
    return {{"command", command},     {"config_hash", config_hash},
            {"model_hash", model_hash}, {"seeds", seeds},
            {"outputs", outputs},     {"version", version}};
  }
  static ExperimentManifest from_json(const nlohmann::json& j) {
    ExperimentManifest m;
    m.command = j.at("command").get<std::string>();
    m.config_hash = j.at("config_hash").get<std::string>();
    m.model_hash = j.at("model_hash").get<std::string>();
    m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    m.outputs = j.at("outputs").get<std::vector<std::string>>();
    m.version = j.at("version").get<std::string>();
    return m;
  }
};

}  // namespace bodykit
