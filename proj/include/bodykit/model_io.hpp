#pragma once

#include <fstream>

#include <json.hpp>

#include "bodykit/model.hpp"

namespace bodykit {

// Model file schema (version 1):
// {version, N, J, parents, template, faces, shape_basis, expression_basis,
//  pose_basis?, skin_weights: [[row,col,value]...], joint_regressor: triplets,
//  part_labels: {vertices, joints}}
// Doubles round-trip bitwise through nlohmann's shortest-exact formatting.

namespace detail {

inline nlohmann::json mat_to_json(const MatX& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    nlohmann::json row = nlohmann::json::array();
    for (Eigen::Index j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline MatX mat_from_json(const nlohmann::json& j, const char* what) {
  if (!j.is_array() || j.empty() || !j[0].is_array())
    throw InvalidInput(std::string("model file: ") + what + " must be a 2D array");
  const size_t cols = j[0].size();
  MatX m(j.size(), cols);
  for (size_t r = 0; r < j.size(); ++r) {
    if (j[r].size() != cols)
      throw InvalidInput(std::string("model file: ragged rows in ") + what);
    for (size_t c = 0; c < cols; ++c) m(r, c) = j[r][c].get<double>();
  }
  return m;
}

inline nlohmann::json sparse_to_json(
    const Eigen::SparseMatrix<double, Eigen::RowMajor>& m) {
  nlohmann::json trip = nlohmann::json::array();
  for (int r = 0; r < m.outerSize(); ++r)
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(m, r);
         it; ++it)
      trip.push_back({it.row(), it.col(), it.value()});
  return trip;
}

inline Eigen::SparseMatrix<double, Eigen::RowMajor> sparse_from_json(
    const nlohmann::json& j, int rows, int cols, const char* what) {
  std::vector<Eigen::Triplet<double>> trips;
  for (const auto& t : j) {
    if (!t.is_array() || t.size() != 3)
      throw InvalidInput(std::string("model file: bad triplet in ") + what);
    trips.emplace_back(t[0].get<int>(), t[1].get<int>(), t[2].get<double>());
  }
  Eigen::SparseMatrix<double, Eigen::RowMajor> m(rows, cols);
  m.setFromTriplets(trips.begin(), trips.end());
  return m;
}

}  // namespace detail

inline void save_model(const BodyModel& m, const std::string& path) {
  nlohmann::json j;
  j["version"] = 1;
  j["N"] = m.num_vertices();
  j["J"] = m.num_joints();
  j["parents"] = m.parents;
  j["template"] = detail::mat_to_json(m.template_vertices);
  nlohmann::json faces = nlohmann::json::array();
  for (Eigen::Index f = 0; f < m.faces.rows(); ++f)
    faces.push_back({m.faces(f, 0), m.faces(f, 1), m.faces(f, 2)});
  j["faces"] = std::move(faces);
  j["shape_basis"] = detail::mat_to_json(m.shape_basis);
  j["expression_basis"] = detail::mat_to_json(m.expression_basis);
  if (m.pose_basis.size() > 0) j["pose_basis"] = detail::mat_to_json(m.pose_basis);
  j["skin_weights"] = detail::sparse_to_json(m.skin_weights);
  j["joint_regressor"] = detail::sparse_to_json(m.joint_regressor);
  std::vector<std::string> vl, jl;
  for (PartTag t : m.vertex_labels) vl.push_back(to_string(t));
  for (PartTag t : m.joint_labels) jl.push_back(to_string(t));
  j["part_labels"] = {{"vertices", vl}, {"joints", jl}};

  std::ofstream out(path);
  if (!out) throw InvalidInput("save_model: cannot open " + path);
  out << j.dump();
}

inline BodyModel load_model(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("load_model: cannot open " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("load_model: parse error in " + path + ": " + e.what());
  }
  try {
    if (j.at("version").get<int>() != 1)
      throw InvalidInput("load_model: unsupported version");
    const int N = j.at("N").get<int>();
    const int J = j.at("J").get<int>();
    BodyModel m;
    m.parents = j.at("parents").get<std::vector<int>>();
    m.template_vertices = detail::mat_from_json(j.at("template"), "template");
    const auto& faces = j.at("faces");
    m.faces.resize(static_cast<int>(faces.size()), 3);
    for (size_t f = 0; f < faces.size(); ++f)
      m.faces.row(static_cast<int>(f)) << faces[f][0].get<int>(),
          faces[f][1].get<int>(), faces[f][2].get<int>();
    m.shape_basis = detail::mat_from_json(j.at("shape_basis"), "shape_basis");
    m.expression_basis =
        detail::mat_from_json(j.at("expression_basis"), "expression_basis");
    if (j.contains("pose_basis"))
      m.pose_basis = detail::mat_from_json(j["pose_basis"], "pose_basis");
    else
      m.pose_basis.resize(0, 0);
    m.skin_weights =
        detail::sparse_from_json(j.at("skin_weights"), N, J, "skin_weights");
    m.joint_regressor = detail::sparse_from_json(j.at("joint_regressor"), J, N,
                                                 "joint_regressor");
    for (const auto& s : j.at("part_labels").at("vertices"))
      m.vertex_labels.push_back(part_tag_from_string(s.get<std::string>()));
    for (const auto& s : j.at("part_labels").at("joints"))
      m.joint_labels.push_back(part_tag_from_string(s.get<std::string>()));
    m.validate();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidInput("load_model: schema violation in " + path + ": " +
                       e.what());
  }
}

}  // namespace bodykit
