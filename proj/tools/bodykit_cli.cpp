// bodykit command-line tools: synthetic model/scene generation, keypoint
// fitting, toy regressor training, evaluation, and benchmarking.
//
// Exit codes: 0 success, 2 validation error, 3 numerical failure. On error a
// machine-readable JSON object {"error": {...}} is printed to stdout.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "bodykit/fitting.hpp"
#include "bodykit/metrics.hpp"
#include "bodykit/model_io.hpp"
#include "bodykit/regressor.hpp"
#include "bodykit/scene.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace bodykit;

namespace {

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw InvalidInput("malformed JSON in " + path + ": " + e.what());
  }
  return j;
}

void write_json_file(const json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw InvalidInput("cannot open output file " + path);
  out << j.dump(2) << "\n";
}

void write_manifest(const std::string& path, const std::string& command,
                    const json& config, const std::string& model_path,
                    std::vector<std::uint64_t> seeds,
                    std::vector<std::string> outputs) {
  ExperimentManifest m;
  m.command = command;
  m.config_hash = hash_json(config);
  m.model_hash = model_path.empty() ? "" : hash_file(model_path);
  m.seeds = std::move(seeds);
  m.outputs = std::move(outputs);
  write_json_file(m.to_json(), path);
}

// Scene stems ("scene_0007") found in a directory, sorted.
std::vector<std::string> scene_stems(const fs::path& dir) {
  std::vector<std::string> stems;
  if (!fs::is_directory(dir)) throw InvalidInput("not a directory: " + dir.string());
  for (const auto& e : fs::directory_iterator(dir)) {
    const fs::path p = e.path();
    if (p.extension() == ".json" && p.stem().string().rfind("scene_", 0) == 0)
      stems.push_back(p.stem().string());
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw InvalidInput("no scene_*.json in " + dir.string());
  return stems;
}

// Deterministic generic fit initialization: neutral pose, camera matched to
// the 2D keypoint extent of the rest skeleton.
WeakPerspCamera init_camera_from_targets(const BodyModel& model,
                                         const KeypointSet& kp) {
  const MatX3 rest =
      forward(model, ParamVector::neutral(model.num_joints())).joints;
  const MatX2& p2 = *kp.points2d;
  const double kp_ext =
      std::max(p2.col(0).maxCoeff() - p2.col(0).minCoeff(),
               p2.col(1).maxCoeff() - p2.col(1).minCoeff());
  const double rest_ext =
      std::max(rest.col(0).maxCoeff() - rest.col(0).minCoeff(),
               rest.col(1).maxCoeff() - rest.col(1).minCoeff());
  WeakPerspCamera cam;
  cam.s = std::max(1e-6, kp_ext) / std::max(1e-6, rest_ext);
  cam.t = Vec2(p2.col(0).mean(), p2.col(1).mean()) / cam.s -
          Vec2(rest.col(0).mean(), rest.col(1).mean());
  return cam;
}

json camera_json(const WeakPerspCamera& c) {
  return {{"s", c.s}, {"t", {c.t.x(), c.t.y()}}};
}

json params_json(const ParamVector& p) {
  const VecX f = p.flatten();
  return json(std::vector<double>(f.data(), f.data() + f.size()));
}

struct SceneRef {
  fs::path dir;
  std::string stem;
};

SceneRef parse_scene_path(const std::string& path) {
  fs::path p(path);
  if (p.extension() == ".json" || p.extension() == ".png") p.replace_extension();
  return {p.parent_path().empty() ? fs::path(".") : p.parent_path(),
          p.filename().string()};
}

int run_gen_model(std::uint64_t seed, int n, int j, const std::string& out) {
  const BodyModel m = generate_synthetic_model(seed, n, j);
  save_model(m, out);
  write_manifest(out + ".manifest.json", "gen-model",
                 {{"seed", seed}, {"n", n}, {"j", j}}, out, {seed}, {out});
  std::cout << json{{"model", out}, {"joints", m.num_joints()},
                    {"vertices", m.num_vertices()}}
                   .dump(2)
            << "\n";
  return 0;
}

int run_synth(const std::string& model_path, int count, std::uint64_t seed,
              int resolution, const std::string& out_dir) {
  if (count < 1) throw InvalidInput("synth: count must be >= 1");
  const BodyModel m = load_model(model_path);
  fs::create_directories(out_dir);
  std::vector<std::uint64_t> seeds;
  std::vector<std::string> outputs;
  for (int i = 0; i < count; ++i) {
    const std::uint64_t si = seed + static_cast<std::uint64_t>(i);
    const SyntheticScene s = synth_scene(m, si, resolution);
    char stem[32];
    std::snprintf(stem, sizeof stem, "scene_%04d", i);
    save_scene(s, out_dir, stem);
    seeds.push_back(si);
    outputs.push_back((fs::path(out_dir) / (std::string(stem) + ".json")).string());
  }
  write_manifest((fs::path(out_dir) / "manifest.json").string(), "synth",
                 {{"seed", seed}, {"count", count}, {"resolution", resolution}},
                 model_path, seeds, outputs);
  std::cout << json{{"scenes", count}, {"out_dir", out_dir}}.dump(2) << "\n";
  return 0;
}

int run_fit(const std::string& model_path, const std::string& scene_path,
            const std::string& config_path, const std::string& out) {
  const BodyModel m = load_model(model_path);
  const SceneRef ref = parse_scene_path(scene_path);
  const SyntheticScene scene = load_scene(ref.dir, ref.stem);
  const json cfg_json =
      config_path.empty() ? json::object() : load_json_file(config_path);
  const FitConfig cfg = FitConfig::from_json(cfg_json);

  FitProblem pb;
  pb.model = &m;
  pb.targets = scene.keypoints;
  pb.init = ParamVector::neutral(m.num_joints());
  pb.init_camera = init_camera_from_targets(m, scene.keypoints);
  const FitReport rep = fit(pb, cfg);

  const MatX3 fitX = forward(m, rep.params).joints;
  const MatX3 gtX = forward(m, scene.gt_params).joints;
  // wall_seconds deliberately omitted: fit outputs are bitwise reproducible.
  const json out_j = {{"params", params_json(rep.params)},
                      {"camera", camera_json(rep.camera)},
                      {"converged", rep.converged},
                      {"iterations", rep.iterations},
                      {"final_loss", rep.loss_trace.empty() ? 0.0 : rep.loss_trace.back()},
                      {"loss_trace_length", rep.loss_trace.size()},
                      {"pa_mpjpe", mpjpe(fitX, gtX, true)}};
  write_json_file(out_j, out);
  write_manifest(out + ".manifest.json", "fit", cfg_json, model_path,
                 {cfg.seed}, {out});
  std::cout << json{{"out", out}, {"pa_mpjpe", mpjpe(fitX, gtX, true)},
                    {"converged", rep.converged}}
                   .dump(2)
            << "\n";
  return 0;
}

int run_train(const std::string& model_path, const std::string& data_dir,
              const std::string& config_path, const std::string& out) {
  const BodyModel m = load_model(model_path);
  const json cfg_json =
      config_path.empty() ? json::object() : load_json_file(config_path);
  const TrainConfig cfg = TrainConfig::from_json(cfg_json);
  std::vector<TrainSample> ds;
  for (const std::string& stem : scene_stems(data_dir)) {
    SyntheticScene s = load_scene(data_dir, stem);
    ds.push_back({std::move(s.image), std::move(s.gt_params), s.gt_camera});
  }
  const TrainedHeads H = train_toy(m, ds, cfg);
  write_json_file(H.to_json(), out);

  const std::string csv_path = out + ".curves.csv";
  std::ofstream csv(csv_path);
  if (!csv) throw InvalidInput("cannot open " + csv_path);
  csv << "head,epoch,loss\n";
  auto dump = [&](const char* name, const std::vector<double>& c) {
    for (size_t e = 0; e < c.size(); ++e)
      csv << name << "," << e << "," << json(c[e]).dump() << "\n";
  };
  dump("body", H.curve_body);
  dump("left_hand", H.curve_left_hand);
  dump("right_hand", H.curve_right_hand);
  dump("face", H.curve_face);
  dump("phase2", H.curve_phase2);
  csv.close();

  write_manifest(out + ".manifest.json", "train", cfg_json, model_path,
                 {cfg.seed}, {out, csv_path});
  std::cout << json{{"heads", out}, {"curves", csv_path},
                    {"samples", ds.size()}}
                   .dump(2)
            << "\n";
  return 0;
}

int run_eval(const std::string& model_path, const std::string& data_dir,
             const std::string& heads_path, const std::string& metrics_sel,
             const std::string& out) {
  const BodyModel m = load_model(model_path);
  const bool oracle = heads_path.empty();
  TrainedHeads H;
  if (!oracle) H = TrainedHeads::from_json(load_json_file(heads_path));

  const bool want_all = metrics_sel.empty() || metrics_sel == "all";
  auto want = [&](const std::string& name) {
    return want_all || metrics_sel.find(name) != std::string::npos;
  };

  const auto stems = scene_stems(data_dir);
  PartV2VReport v2v_sum, v2v_body_sum;
  double pa_mpjpe_sum = 0, p2s_sum = 0, fscore_sum = 0;
  for (const std::string& stem : stems) {
    const SyntheticScene s = load_scene(data_dir, stem);
    ParamVector pred = s.gt_params, pred_body = s.gt_params;
    if (!oracle) {
      const Prediction p = predict(H, m, s.image);
      pred = p.params;
      pred_body = p.body_only_params;
    }
    if (want("pa_v2v")) {
      const PartV2VReport r = evaluate_pa_v2v(m, pred, s.gt_params);
      const PartV2VReport rb = evaluate_pa_v2v(m, pred_body, s.gt_params);
      v2v_sum.all += r.all; v2v_sum.body += r.body;
      v2v_sum.left_hand += r.left_hand; v2v_sum.right_hand += r.right_hand;
      v2v_sum.face += r.face;
      v2v_body_sum.all += rb.all; v2v_body_sum.body += rb.body;
      v2v_body_sum.left_hand += rb.left_hand;
      v2v_body_sum.right_hand += rb.right_hand; v2v_body_sum.face += rb.face;
    }
    const MatX3 predX = forward(m, pred).joints;
    const MatX3 gtX = forward(m, s.gt_params).joints;
    if (want("pa_mpjpe")) pa_mpjpe_sum += mpjpe(predX, gtX, true);
    if (want("p2s") || want("f_score")) {
      const MatX3 pv = forward(m, pred).vertices;
      const MatX3 gv = forward(m, s.gt_params).vertices;
      if (want("p2s"))
        p2s_sum += point_to_surface(pv, gv, m.faces).mean();
      if (want("f_score")) fscore_sum += f_score(pv, gv, 0.01);
    }
  }
  const double n = static_cast<double>(stems.size());
  json out_j = {{"scenes", stems.size()}, {"oracle_gt", oracle}};
  if (want("pa_v2v")) {
    auto table = [&](const PartV2VReport& r) {
      return json{{"all", r.all / n},           {"body", r.body / n},
                  {"left_hand", r.left_hand / n},
                  {"right_hand", r.right_hand / n},
                  {"face", r.face / n}};
    };
    out_j["pa_v2v"] = table(v2v_sum);
    out_j["pa_v2v_body_only"] = table(v2v_body_sum);
  }
  if (want("pa_mpjpe")) out_j["pa_mpjpe"] = pa_mpjpe_sum / n;
  if (want("p2s")) out_j["p2s"] = p2s_sum / n;
  if (want("f_score")) out_j["f_score"] = fscore_sum / n;
  write_json_file(out_j, out);
  write_manifest(out + ".manifest.json", "eval",
                 {{"heads", heads_path}, {"metrics", metrics_sel}}, model_path,
                 {}, {out});
  std::cout << out_j.dump(2) << "\n";
  return 0;
}

int run_bench(const std::string& model_path, const std::string& scene_path,
              const std::string& heads_path, const std::string& out) {
  using clock = std::chrono::steady_clock;
  const BodyModel m = load_model(model_path);
  const SceneRef ref = parse_scene_path(scene_path);
  const SyntheticScene scene = load_scene(ref.dir, ref.stem);
  const TrainedHeads H = TrainedHeads::from_json(load_json_file(heads_path));

  FitProblem pb;
  pb.model = &m;
  pb.targets = scene.keypoints;
  pb.init = ParamVector::neutral(m.num_joints());
  pb.init_camera = init_camera_from_targets(m, scene.keypoints);
  const auto t0 = clock::now();
  const FitReport rep = fit(pb, FitConfig{});
  const double fit_s = std::chrono::duration<double>(clock::now() - t0).count();

  const auto t1 = clock::now();
  const Prediction pr = predict(H, m, scene.image);
  const double reg_s = std::chrono::duration<double>(clock::now() - t1).count();

  const json out_j = {{"fit_seconds", fit_s},
                      {"regress_seconds", reg_s},
                      {"speedup", reg_s > 0 ? fit_s / reg_s : 0.0},
                      {"fit_converged", rep.converged},
                      {"regress_camera_scale", pr.camera.s}};
  if (!out.empty()) write_json_file(out_j, out);
  std::cout << out_j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bodykit: synthetic expressive-body regression toolkit"};
  app.require_subcommand(1);

  std::string model_path, scene_path, config_path, heads_path, data_dir,
      out_path, out_dir, metrics_sel;
  std::uint64_t seed = 0;
  int n = 1060, jn = 53, count = 16, resolution = 128;

  auto* gen = app.add_subcommand("gen-model", "Generate a synthetic body model");
  gen->add_option("--seed", seed);
  gen->add_option("--n", n, "vertex count");
  gen->add_option("--j", jn, "joint count");
  gen->add_option("--out", out_path)->required();

  auto* synth = app.add_subcommand("synth", "Render synthetic scenes");
  synth->add_option("--model", model_path)->required();
  synth->add_option("--count", count);
  synth->add_option("--seed", seed);
  synth->add_option("--resolution", resolution);
  synth->add_option("--out-dir", out_dir)->required();

  auto* fit_cmd = app.add_subcommand("fit", "Fit parameters to scene keypoints");
  fit_cmd->add_option("--model", model_path)->required();
  fit_cmd->add_option("--scene", scene_path)->required();
  fit_cmd->add_option("--config", config_path);
  fit_cmd->add_option("--out", out_path)->required();

  auto* train = app.add_subcommand("train", "Train the toy regressor heads");
  train->add_option("--model", model_path)->required();
  train->add_option("--data-dir", data_dir)->required();
  train->add_option("--config", config_path);
  train->add_option("--out", out_path)->required();

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate predictions on scenes");
  eval_cmd->add_option("--model", model_path)->required();
  eval_cmd->add_option("--data-dir", data_dir)->required();
  eval_cmd->add_option("--heads", heads_path,
                       "trained heads JSON; omit to score GT as prediction");
  eval_cmd->add_option("--metrics", metrics_sel,
                       "comma list: pa_v2v,pa_mpjpe,p2s,f_score (default all)");
  eval_cmd->add_option("--out", out_path)->required();

  auto* bench = app.add_subcommand("bench", "Time fitting vs regression");
  bench->add_option("--model", model_path)->required();
  bench->add_option("--scene", scene_path)->required();
  bench->add_option("--heads", heads_path)->required();
  bench->add_option("--out", out_path);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cout << json{{"error", {{"type", "validation"},
                                 {"code", 2},
                                 {"message", e.what()}}}}
                     .dump(2)
              << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return run_gen_model(seed, n, jn, out_path);
    if (synth->parsed())
      return run_synth(model_path, count, seed, resolution, out_dir);
    if (fit_cmd->parsed())
      return run_fit(model_path, scene_path, config_path, out_path);
    if (train->parsed())
      return run_train(model_path, data_dir, config_path, out_path);
    if (eval_cmd->parsed())
      return run_eval(model_path, data_dir, heads_path, metrics_sel, out_path);
    if (bench->parsed())
      return run_bench(model_path, scene_path, heads_path, out_path);
  } catch (const NumericalError& e) {
    std::cout << json{{"error", {{"type", "numerical"},
                                 {"code", 3},
                                 {"message", e.what()}}}}
                     .dump(2)
              << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cout << json{{"error", {{"type", "validation"},
                                 {"code", 2},
                                 {"message", e.what()}}}}
                     .dump(2)
              << "\n";
    return 2;
  }
  return 2;
}
