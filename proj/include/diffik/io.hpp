#pragma once

#include <fstream>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diffik/gn_diff.hpp"
#include "diffik/gn_solver.hpp"
#include "diffik/jacobian.hpp"
#include "diffik/kinematics.hpp"
#include "diffik/types.hpp"

namespace diffik {

using Json = nlohmann::json;

namespace detail {

// Field access with path context so parse errors name what was wrong.
inline const Json& require(const Json& j, const std::string& key,
                           const std::string& path) {
  if (!j.is_object() || !j.contains(key))
    throw ParseError(path + ": missing field '" + key + "'");
  return j.at(key);
}

inline Vec3 parse_vec3(const Json& j, const std::string& path) {
  if (!j.is_array() || j.size() != 3)
    throw ParseError(path + ": expected an array of 3 numbers");
  for (const auto& v : j)
    if (!v.is_number()) throw ParseError(path + ": expected an array of 3 numbers");
  return Vec3(j[0].get<double>(), j[1].get<double>(), j[2].get<double>());
}

inline Json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open '" + path + "'");
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ParseError(path + ": " + e.what());
  }
}

}  // namespace detail

/// Skeleton document: {"version": 1, "joints": [{"name", "parent",
/// "rest_offset": [x,y,z]}, ...]}, joints in topological order, parent -1 for
/// the root. Offsets are meters.
inline KinematicTree parse_skeleton(const Json& doc, const std::string& origin) {
  const Json& version = detail::require(doc, "version", origin);
  if (!version.is_number_integer() || version.get<int>() != 1)
    throw ParseError(origin + ".version: unsupported skeleton version");
  const Json& joints = detail::require(doc, "joints", origin);
  if (!joints.is_array() || joints.empty())
    throw ParseError(origin + ".joints: expected a non-empty array");
  std::vector<KinematicTree::Joint> out;
  for (size_t i = 0; i < joints.size(); ++i) {
    const std::string path = origin + ".joints[" + std::to_string(i) + "]";
    KinematicTree::Joint joint;
    const Json& name = detail::require(joints[i], "name", path);
    if (!name.is_string()) throw ParseError(path + ".name: expected a string");
    joint.name = name.get<std::string>();
    const Json& parent = detail::require(joints[i], "parent", path);
    if (!parent.is_number_integer())
      throw ParseError(path + ".parent: expected an integer (-1 for the root)");
    joint.parent = parent.get<int>();
    joint.rest_offset =
        detail::parse_vec3(detail::require(joints[i], "rest_offset", path),
                           path + ".rest_offset");
    out.push_back(std::move(joint));
  }
  try {
    return KinematicTree::from_joints(std::move(out));
  } catch (const ShapeMismatch& e) {
    throw ParseError(origin + ": " + e.what());
  }
}

inline KinematicTree load_skeleton(const std::string& path) {
  return parse_skeleton(detail::load_json_file(path), path);
}

inline Json skeleton_to_json(const KinematicTree& tree) {
  Json joints = Json::array();
  for (int j = 0; j < tree.joint_count(); ++j)
    joints.push_back({{"name", tree.name(j)},
                      {"parent", tree.parent(j)},
                      {"rest_offset",
                       {tree.rest_offset(j).x(), tree.rest_offset(j).y(),
                        tree.rest_offset(j).z()}}});
  return Json{{"version", 1}, {"joints", joints}};
}

/// Targets document: {"version": 1, "frames": [{"positions": [[x,y,z],...],
/// "confidence": [...]}]}. Confidence defaults to all ones.
inline std::vector<JointTargets> parse_targets(const Json& doc, int joint_count,
                                               const std::string& origin) {
  const Json& version = detail::require(doc, "version", origin);
  if (!version.is_number_integer() || version.get<int>() != 1)
    throw ParseError(origin + ".version: unsupported targets version");
  const Json& frames = detail::require(doc, "frames", origin);
  if (!frames.is_array() || frames.empty())
    throw ParseError(origin + ".frames: expected a non-empty array");
  std::vector<JointTargets> out;
  for (size_t f = 0; f < frames.size(); ++f) {
    const std::string path = origin + ".frames[" + std::to_string(f) + "]";
    const Json& positions = detail::require(frames[f], "positions", path);
    if (!positions.is_array() || static_cast<int>(positions.size()) != joint_count)
      throw ParseError(path + ".positions: expected " + std::to_string(joint_count) +
                       " positions");
    std::vector<Vec3> pos;
    for (size_t j = 0; j < positions.size(); ++j)
      pos.push_back(detail::parse_vec3(
          positions[j], path + ".positions[" + std::to_string(j) + "]"));
    JointTargets targets = JointTargets::from_positions(std::move(pos));
    if (frames[f].contains("confidence")) {
      const Json& conf = frames[f].at("confidence");
      if (!conf.is_array() || static_cast<int>(conf.size()) != joint_count)
        throw ParseError(path + ".confidence: expected " +
                         std::to_string(joint_count) + " values");
      for (int j = 0; j < joint_count; ++j) {
        if (!conf[j].is_number())
          throw ParseError(path + ".confidence[" + std::to_string(j) +
                           "]: expected a number");
        targets.confidence[j] = conf[j].get<double>();
      }
    }
    out.push_back(std::move(targets));
  }
  return out;
}

inline std::vector<JointTargets> load_targets(const std::string& path,
                                              int joint_count) {
  return parse_targets(detail::load_json_file(path), joint_count, path);
}

inline Json targets_to_json(const std::vector<JointTargets>& frames) {
  Json out{{"version", 1}, {"frames", Json::array()}};
  for (const JointTargets& t : frames) {
    Json positions = Json::array();
    for (const Vec3& p : t.position) positions.push_back({p.x(), p.y(), p.z()});
    Json conf = Json::array();
    for (Eigen::Index j = 0; j < t.confidence.size(); ++j)
      conf.push_back(t.confidence[j]);
    out["frames"].push_back({{"positions", positions}, {"confidence", conf}});
  }
  return out;
}

/// Solver config document mirroring SolverConfig field names.
inline SolverConfig parse_solver_config(const Json& doc, const std::string& origin) {
  SolverConfig cfg;
  const auto num = [&](const char* key, double fallback) {
    if (!doc.contains(key)) return fallback;
    if (!doc.at(key).is_number())
      throw ParseError(origin + "." + key + ": expected a number");
    return doc.at(key).get<double>();
  };
  cfg.max_iters = static_cast<int>(num("max_iters", cfg.max_iters));
  cfg.damping_sigma = num("damping_sigma", cfg.damping_sigma);
  cfg.step_eta = num("step_eta", cfg.step_eta);
  cfg.max_halvings = static_cast<int>(num("max_halvings", cfg.max_halvings));
  cfg.residual_tol = num("residual_tol", cfg.residual_tol);
  cfg.direction_tol = num("direction_tol", cfg.direction_tol);
  const auto flag = [&](const char* key, bool fallback) {
    if (!doc.contains(key)) return fallback;
    if (!doc.at(key).is_boolean())
      throw ParseError(origin + "." + key + ": expected a boolean");
    return doc.at(key).get<bool>();
  };
  cfg.line_search = flag("line_search", cfg.line_search);
  cfg.refresh_axes_each_iter = flag("refresh_axes_each_iter", cfg.refresh_axes_each_iter);
  if (doc.contains("init_alpha") && !doc.at("init_alpha").is_null()) {
    const Json& init = doc.at("init_alpha");
    if (!init.is_array())
      throw ParseError(origin + ".init_alpha: expected an array or null");
    VecX v(init.size());
    for (size_t i = 0; i < init.size(); ++i) {
      if (!init[i].is_number())
        throw ParseError(origin + ".init_alpha[" + std::to_string(i) +
                         "]: expected a number");
      v[static_cast<Eigen::Index>(i)] = init[i].get<double>();
    }
    cfg.init_alpha = std::move(v);
  }
  try {
    cfg.validate();
  } catch (const ShapeMismatch& e) {
    throw ParseError(origin + ": " + e.what());
  }
  return cfg;
}

inline SolverConfig load_solver_config(const std::string& path) {
  return parse_solver_config(detail::load_json_file(path), path);
}

inline Json solver_config_to_json(const SolverConfig& cfg) {
  Json j{{"max_iters", cfg.max_iters},
         {"damping_sigma", cfg.damping_sigma},
         {"step_eta", cfg.step_eta},
         {"line_search", cfg.line_search},
         {"max_halvings", cfg.max_halvings},
         {"residual_tol", cfg.residual_tol},
         {"direction_tol", cfg.direction_tol},
         {"refresh_axes_each_iter", cfg.refresh_axes_each_iter}};
  if (cfg.init_alpha) {
    Json arr = Json::array();
    for (Eigen::Index i = 0; i < cfg.init_alpha->size(); ++i)
      arr.push_back((*cfg.init_alpha)[i]);
    j["init_alpha"] = arr;
  } else {
    j["init_alpha"] = nullptr;
  }
  return j;
}

inline Json rotation_to_json(const RotationMatrix& r) {
  Json rows = Json::array();
  for (int a = 0; a < 3; ++a) rows.push_back({r(a, 0), r(a, 1), r(a, 2)});
  return rows;
}

inline void write_trace_csv(std::ostream& out, const SolveTrace& trace) {
  out << "iteration,residual_norm,direction_norm,eta_used\n";
  out << "0," << trace.initial_residual_norm << ",,\n";
  int k = 1;
  for (const IterationRecord& rec : trace.iterations) {
    out << k++ << ',' << rec.residual_norm << ',' << rec.direction_norm << ','
        << rec.eta_used << '\n';
  }
}

inline Json trace_to_json(const KinematicTree& tree, const SolveTrace& trace) {
  Json iters = Json::array();
  for (const IterationRecord& rec : trace.iterations) {
    Json axes = Json::array();
    for (const Vec3& a : rec.swing_axes) axes.push_back({a.x(), a.y(), a.z()});
    Json alpha = Json::array(), offsets = Json::array();
    for (Eigen::Index i = 0; i < rec.alpha.size(); ++i) alpha.push_back(rec.alpha[i]);
    for (Eigen::Index i = 0; i < rec.swing_offsets.size(); ++i)
      offsets.push_back(rec.swing_offsets[i]);
    iters.push_back({{"alpha", alpha},
                     {"residual_norm", rec.residual_norm},
                     {"direction_norm", rec.direction_norm},
                     {"eta_used", rec.eta_used},
                     {"swing_axes", axes},
                     {"swing_offsets", offsets}});
  }
  Json alpha_star = Json::array();
  for (Eigen::Index i = 0; i < trace.alpha_star.size(); ++i)
    alpha_star.push_back(trace.alpha_star[i]);
  (void)tree;
  return Json{{"initial_residual_norm", trace.initial_residual_norm},
              {"iterations", iters},
              {"alpha_star", alpha_star},
              {"converged", trace.converged},
              {"iterations_used", trace.iterations_used}};
}

inline void write_jacobian_csv(std::ostream& out, const KinematicTree& tree,
                               const FKJacobian& jac) {
  out << "row";
  for (int c : jac.column_joint) out << ',' << tree.name(c);
  out << '\n';
  const char* coord = "xyz";
  for (int r = 0; r < tree.joint_count(); ++r) {
    for (int d = 0; d < 3; ++d) {
      out << tree.name(r) << '_' << coord[d];
      for (Eigen::Index c = 0; c < jac.matrix.cols(); ++c)
        out << ',' << jac.matrix(3 * r + d, c);
      out << '\n';
    }
  }
}

/// Labeled CSV of all three gradient blocks, one matrix after another.
inline void write_gradients_csv(std::ostream& out, const KinematicTree& tree,
                                const SolutionGradients& grads) {
  const char* coord = "xyz";
  const auto row_name = [&](int i) { return tree.name(tree.internal_joints()[i]); };

  out << "# d_alpha / d_targets (radians per meter)\nrow";
  for (int j = 0; j < tree.joint_count(); ++j)
    for (int d = 0; d < 3; ++d) out << ',' << tree.name(j) << '_' << coord[d];
  out << '\n';
  for (Eigen::Index i = 0; i < grads.d_alpha_d_targets.rows(); ++i) {
    out << row_name(static_cast<int>(i));
    for (Eigen::Index c = 0; c < grads.d_alpha_d_targets.cols(); ++c)
      out << ',' << grads.d_alpha_d_targets(i, c);
    out << '\n';
  }

  out << "# d_alpha / d_twist (radians per radian)\nrow";
  for (Eigen::Index i = 0; i < grads.d_alpha_d_twist.cols(); ++i)
    out << ',' << row_name(static_cast<int>(i));
  out << '\n';
  for (Eigen::Index i = 0; i < grads.d_alpha_d_twist.rows(); ++i) {
    out << row_name(static_cast<int>(i));
    for (Eigen::Index c = 0; c < grads.d_alpha_d_twist.cols(); ++c)
      out << ',' << grads.d_alpha_d_twist(i, c);
    out << '\n';
  }

  out << "# d_alpha / d_rest_offsets (radians per meter)\nrow";
  for (int j = 1; j < tree.joint_count(); ++j)
    for (int d = 0; d < 3; ++d) out << ',' << tree.name(j) << '_' << coord[d];
  out << '\n';
  for (Eigen::Index i = 0; i < grads.d_alpha_d_rest_offsets.rows(); ++i) {
    out << row_name(static_cast<int>(i));
    for (Eigen::Index c = 0; c < grads.d_alpha_d_rest_offsets.cols(); ++c)
      out << ',' << grads.d_alpha_d_rest_offsets(i, c);
    out << '\n';
  }
}

inline void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw ParseError("cannot write '" + path + "'");
  out << content;
}

}  // namespace diffik
