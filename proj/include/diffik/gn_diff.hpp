#pragma once

#include <utility>
#include <vector>

#include "diffik/gn_solver.hpp"
#include "diffik/jacobian.hpp"
#include "diffik/kinematics.hpp"
#include "diffik/types.hpp"

namespace diffik {

/// Derivatives of the solver output (final swing angles) with respect to the
/// solve inputs. Rows are internal joints; target columns are joint-major
/// xyz triples over all joints, twist columns follow the internal joint
/// order, and rest-offset columns are joint-major xyz triples over the
/// non-root joints (column 3*(j-1)+d for joint j, coordinate d).
///
/// Per-iteration swing frames (axes and frame offsets) are treated as
/// constants captured in the trace; sensitivity through the axis refresh is
/// excluded, and the finite-difference oracle freezes the frames identically.
struct SolutionGradients {
  MatX d_alpha_d_targets;       // m x 3J, radians per meter
  MatX d_alpha_d_twist;         // m x m, radians per radian
  MatX d_alpha_d_rest_offsets;  // m x 3(J-1), radians per meter
};

namespace detail {

struct IterationGeometry {
  std::vector<RotationMatrix> globals;
  std::vector<Vec3> positions;
  std::vector<Vec3> swing_axis_world;  // per internal joint
  std::vector<Vec3> twist_axis_world;  // per internal joint
};

inline IterationGeometry iteration_geometry(const KinematicTree& tree,
                                            const SwingTwistPose& pose,
                                            const Vec3& root_position) {
  IterationGeometry g;
  fk_unchecked(tree, pose, root_position, g.globals, g.positions);
  g.swing_axis_world.resize(tree.internal_count());
  g.twist_axis_world.resize(tree.internal_count());
  for (int i = 0; i < tree.internal_count(); ++i) {
    const int j = tree.internal_joints()[i];
    g.swing_axis_world[i] = g.globals[tree.parent(j)] * pose.swing_axis[i];
    g.twist_axis_world[i] = g.globals[j] * tree.twist_axis(j);
  }
  return g;
}

/// Position derivatives with respect to twist angles: column i holds, for
/// every strict descendant r of internal joint i, u_i x (q_r - p_i) with u_i
/// the world-frame twist axis. Used by both gradient routes.
inline MatX twist_position_jacobian(const KinematicTree& tree,
                                    const IterationGeometry& g) {
  MatX k = MatX::Zero(3 * tree.joint_count(), tree.internal_count());
  for (int i = 0; i < tree.internal_count(); ++i) {
    const int j = tree.internal_joints()[i];
    for (int r : tree.descendants(j))
      k.block<3, 1>(3 * r, i) =
          g.twist_axis_world[i].cross(g.positions[r] - g.positions[j]);
  }
  return k;
}

/// Position derivatives with respect to rest offsets: the block for joint r
/// and offset s is R_parent(s) when s is an ancestor-or-self of r.
inline MatX rest_position_jacobian(const KinematicTree& tree,
                                   const IterationGeometry& g) {
  const int n = tree.joint_count();
  MatX k = MatX::Zero(3 * n, 3 * (n - 1));
  for (int s = 1; s < n; ++s) {
    const Eigen::Matrix3d rot = g.globals[tree.parent(s)];
    k.block<3, 3>(3 * s, 3 * (s - 1)) = rot;
    for (int r : tree.descendants(s)) k.block<3, 3>(3 * r, 3 * (s - 1)) = rot;
  }
  return k;
}

/// Explicit residual derivative with respect to the targets, including the
/// root position pin (the FK root is placed at the root target, so moving it
/// shifts every reconstructed joint).
inline MatX weighted_target_residual_jacobian(const KinematicTree& tree,
                                              const VecX& confidence) {
  const int n = tree.joint_count();
  MatX e = MatX::Zero(3 * n, 3 * n);
  for (int r = 1; r < n; ++r) {
    e.block<3, 3>(3 * r, 3 * r) = confidence[r] * Eigen::Matrix3d::Identity();
    e.block<3, 3>(3 * r, 0) -= confidence[r] * Eigen::Matrix3d::Identity();
  }
  return e;
}

// State shared by the per-iteration derivative terms.
struct IterationSystem {
  MatX jac_w;          // weighted Jacobian, 3J x m
  MatX jac_t;          // its transpose, m x 3J
  VecX rho;            // weighted residual
  VecX direction;      // (J^T J + sigma I)^{-1} J^T rho
  VecX y;              // rho - J * direction
  Eigen::LLT<MatX> llt;
};

inline IterationSystem iteration_system(const KinematicTree& tree,
                                        const IterationGeometry& g,
                                        const JointTargets& targets, double sigma) {
  IterationSystem s;
  s.jac_w = analytic_jacobian_at(tree, g.positions, g.swing_axis_world).matrix;
  s.rho = VecX(3 * tree.joint_count());
  for (int j = 0; j < tree.joint_count(); ++j) {
    s.jac_w.middleRows<3>(3 * j) *= targets.confidence[j];
    s.rho.segment<3>(3 * j) =
        targets.confidence[j] * (targets.position[j] - g.positions[j]);
  }
  s.jac_t = s.jac_w.transpose();
  MatX normal(s.jac_w.cols(), s.jac_w.cols());
  normal.noalias() = s.jac_t * s.jac_w;
  normal.diagonal().array() += sigma;
  s.llt.compute(normal);
  s.direction = s.llt.solve(s.jac_t * s.rho);
  s.y = s.rho;
  s.y.noalias() -= s.jac_w * s.direction;
  return s;
}

/// Contraction of the Jacobian derivative dJ/dv against the vectors y and
/// direction, producing one column of the H-derivative term
/// M^{-1} (dJ^T y - J^T dJ direction). `add_entry(r, c, h3)` style loops are
/// inlined per input family below.
///
/// Swing-swing second derivative of FK positions: for internal joints c, d
/// that are comparable in the tree (one an ancestor of the other) and a
/// strict descendant r of the deeper one,
///   d2 q_r / d alpha_c d alpha_d = w_outer x (w_inner x (q_r - p_inner)),
/// where inner is the deeper joint. All other entries vanish.
inline MatX swing_curvature_columns(const KinematicTree& tree,
                                    const IterationGeometry& g,
                                    const VecX& confidence,
                                    const IterationSystem& sys) {
  const int m = tree.internal_count();
  const int n = tree.joint_count();
  MatX raw = MatX::Zero(m, m);
  VecX u(3 * n);
  for (int dj = 0; dj < m; ++dj) {
    const int d = tree.internal_joints()[dj];
    u.setZero();
    for (int cj = 0; cj < m; ++cj) {
      const int c = tree.internal_joints()[cj];
      const bool c_deep = tree.is_ancestor_or_self(d, c);
      const bool d_deep = tree.is_ancestor_or_self(c, d);
      if (!c_deep && !d_deep) continue;
      const int inner = c_deep ? c : d;
      const int outer = c_deep ? d : c;
      const Vec3& w_inner = g.swing_axis_world[tree.internal_index(inner)];
      const Vec3& w_outer = g.swing_axis_world[tree.internal_index(outer)];
      double t1 = 0.0;
      for (int r : tree.descendants(inner)) {
        const Vec3 h = confidence[r] *
                       w_outer.cross(w_inner.cross(g.positions[r] - g.positions[inner]));
        t1 += h.dot(sys.y.segment<3>(3 * r));
        u.segment<3>(3 * r) += h * sys.direction[cj];
      }
      raw(cj, dj) += t1;
    }
    raw.col(dj).noalias() -= sys.jac_t * u;
  }
  return raw;
}

/// Same contraction for dJ/d(twist angle): the world swing axis of a joint
/// below a twisting ancestor rotates with it, and positions shift per the
/// twist position Jacobian.
inline MatX twist_curvature_columns(const KinematicTree& tree,
                                    const IterationGeometry& g,
                                    const VecX& confidence,
                                    const IterationSystem& sys) {
  const int m = tree.internal_count();
  const int n = tree.joint_count();
  MatX raw = MatX::Zero(m, m);
  VecX u(3 * n);
  for (int tj = 0; tj < m; ++tj) {
    const int t = tree.internal_joints()[tj];
    const Vec3& ut = g.twist_axis_world[tj];
    u.setZero();
    for (int cj = 0; cj < m; ++cj) {
      const int c = tree.internal_joints()[cj];
      const Vec3& wc = g.swing_axis_world[cj];
      double t1 = 0.0;
      if (tree.is_ancestor_or_self(t, c) && t != c) {
        // twisting above joint c rotates both its world axis and its subtree
        for (int r : tree.descendants(c)) {
          const Vec3 h =
              confidence[r] * ut.cross(wc.cross(g.positions[r] - g.positions[c]));
          t1 += h.dot(sys.y.segment<3>(3 * r));
          u.segment<3>(3 * r) += h * sys.direction[cj];
        }
      } else if (tree.is_ancestor_or_self(c, t)) {
        for (int r : tree.descendants(t)) {
          const Vec3 h =
              confidence[r] * wc.cross(ut.cross(g.positions[r] - g.positions[t]));
          t1 += h.dot(sys.y.segment<3>(3 * r));
          u.segment<3>(3 * r) += h * sys.direction[cj];
        }
      } else {
        continue;
      }
      raw(cj, tj) += t1;
    }
    raw.col(tj).noalias() -= sys.jac_t * u;
  }
  return raw;
}

/// Raw rest-offset term of one unrolled iteration, before the common M^{-1}:
/// (dJ^T y - J^T dJ direction) - J^T W K_rest, assembled with subtree prefix
/// sums. A Jacobian entry w_c x (q_r - p_c) changes with offset s only
/// through the positions, by R_parent(s) applied to the perturbed coordinate,
/// for c strictly above s and r at or below s; every contraction over r then
/// collapses to a subtree sum.
inline void rest_raw_term(const KinematicTree& tree, const IterationGeometry& g,
                          const VecX& confidence, const IterationSystem& sys,
                          Eigen::Ref<MatX> out) {
  const int n = tree.joint_count();

  // Subtree sums over r in sub+(s): children carry larger indices, so a
  // descending sweep folds each subtree into its parent.
  MatX jt_sub(sys.jac_t.rows(), 3 * n);  // conf_r-weighted J^T column blocks
  std::vector<Vec3> y_sub(n);
  for (int j = 0; j < n; ++j) {
    jt_sub.middleCols<3>(3 * j) = confidence[j] * sys.jac_t.middleCols<3>(3 * j);
    y_sub[j] = confidence[j] * sys.y.segment<3>(3 * j);
  }
  for (int j = n - 1; j >= 1; --j) {
    const int p = tree.parent(j);
    jt_sub.middleCols<3>(3 * p) += jt_sub.middleCols<3>(3 * j);
    y_sub[p] += y_sub[j];
  }
  // Direction-weighted sum of the world swing axes over strict ancestors.
  std::vector<Vec3> anc(n, Vec3::Zero());
  for (int j = 1; j < n; ++j) {
    const int p = tree.parent(j);
    anc[j] = anc[p];
    const int ip = tree.internal_index(p);
    if (ip >= 0) anc[j] += sys.direction[ip] * g.swing_axis_world[ip];
  }

  out.setZero();
  for (int s = 1; s < n; ++s) {
    const Eigen::Matrix3d rot = g.globals[tree.parent(s)];
    for (int e = 0; e < 3; ++e) {
      const Vec3 gvec = rot.col(e);
      const int col = 3 * (s - 1) + e;
      for (int a = tree.parent(s); a != kRootParent; a = tree.parent(a)) {
        const int ia = tree.internal_index(a);
        if (ia >= 0)
          out(ia, col) += g.swing_axis_world[ia].cross(gvec).dot(y_sub[s]);
      }
      // curvature contraction through the moved positions, plus J^T W K_rest
      const Vec3 axg_plus_k = anc[s].cross(gvec) + gvec;
      out.col(col).noalias() -= jt_sub.middleCols<3>(3 * s) * axg_plus_k;
    }
  }
}

/// Raw target term J^T W E without materializing E: per-joint column blocks
/// are confidence-scaled J^T blocks, and the root block collects the
/// root-pin coupling.
inline void target_raw_term(const KinematicTree& tree, const VecX& confidence,
                            const MatX& jac_t, Eigen::Ref<MatX> out) {
  const int n = tree.joint_count();
  out.middleCols<3>(0).setZero();
  for (int j = 1; j < n; ++j) {
    out.middleCols<3>(3 * j) = confidence[j] * jac_t.middleCols<3>(3 * j);
    out.middleCols<3>(0) -= out.middleCols<3>(3 * j);
  }
}

inline void check_constant_frames(const SolveTrace& trace) {
  if (trace.iterations.empty())
    throw TraceMismatch("trace has no iterations");
  const auto& axes0 = trace.iterations.front().swing_axes;
  const auto& off0 = trace.iterations.front().swing_offsets;
  for (const auto& rec : trace.iterations) {
    if (rec.swing_axes.size() != axes0.size() ||
        rec.swing_offsets.size() != off0.size())
      throw TraceMismatch("trace iterations disagree on joint count");
    for (size_t i = 0; i < axes0.size(); ++i)
      if ((rec.swing_axes[i] - axes0[i]).norm() > 1e-12 ||
          std::abs(rec.swing_offsets[i] - off0[i]) > 1e-12)
        throw TraceMismatch(
            "swing frames changed between iterations; gradients are defined "
            "for solves whose refreshed frames are stationary");
  }
}

}  // namespace detail

/// Gradients of the solver output by unrolling the Gauss-Newton recursion
/// over exactly the iterations in the trace. Each iteration contributes
///   d alpha_k = d alpha_{k-1} + eta_k * d delta_alpha_k,
/// where the direction derivative combines the H-matrix derivative
/// (d M^{-1} = -M^{-1} dM M^{-1}, contracted against the residual directly)
/// with the residual derivative. Deterministic; requires the trace and config
/// to match the producing solve.
inline SolutionGradients unrolled_gradients(const KinematicTree& tree,
                                            const SolveTrace& trace,
                                            const JointTargets& targets,
                                            const SolverConfig& config) {
  config.validate();
  targets.validate(tree);
  if (!same_settings(config, trace.config))
    throw TraceMismatch("config does not match the trace's config");
  detail::check_constant_frames(trace);

  const int m = tree.internal_count();
  const int n = tree.joint_count();

  SwingTwistPose pose = trace.initial_pose;
  pose.swing_axis = trace.iterations.front().swing_axes;
  pose.swing_offset = trace.iterations.front().swing_offsets;

  // One stacked recursion over [targets | twist | rest offsets] columns. All
  // per-iteration terms are assembled in J^T-space and pushed through a
  // single factorized solve.
  const int cols_p = 3 * n, cols_phi = m, cols_t = 3 * (n - 1);
  const int cols = cols_p + cols_phi + cols_t;
  MatX d_all = MatX::Zero(m, cols);
  MatX d_next(m, cols);
  MatX expl(m, cols);
  MatX a(m, m);
  MatX k_phi(3 * n, m);

  VecX alpha_prev = trace.initial_pose.swing_angle;
  for (const IterationRecord& rec : trace.iterations) {
    pose.swing_angle = alpha_prev;
    const detail::IterationGeometry geom =
        detail::iteration_geometry(tree, pose, trace.root_position);
    const detail::IterationSystem sys =
        detail::iteration_system(tree, geom, targets, config.damping_sigma);
    const double eta = rec.eta_used;

    // a = (1 - eta) I + eta M^{-1} (sigma I + dH-contraction)
    a = detail::swing_curvature_columns(tree, geom, targets.confidence, sys);
    a.diagonal().array() += config.damping_sigma;
    sys.llt.solveInPlace(a);
    a *= eta;
    a.diagonal().array() += 1.0 - eta;

    k_phi = detail::twist_position_jacobian(tree, geom);
    for (int j = 0; j < n; ++j) k_phi.middleRows<3>(3 * j) *= targets.confidence[j];

    detail::target_raw_term(tree, targets.confidence, sys.jac_t, expl.leftCols(cols_p));
    expl.middleCols(cols_p, cols_phi) =
        detail::twist_curvature_columns(tree, geom, targets.confidence, sys);
    expl.middleCols(cols_p, cols_phi).noalias() -= sys.jac_t * k_phi;
    detail::rest_raw_term(tree, geom, targets.confidence, sys, expl.rightCols(cols_t));
    sys.llt.solveInPlace(expl);

    d_next.noalias() = a * d_all;
    d_next += eta * expl;
    d_all.swap(d_next);
    alpha_prev = rec.alpha;
  }

  SolutionGradients out;
  out.d_alpha_d_targets = d_all.leftCols(cols_p);
  out.d_alpha_d_twist = d_all.middleCols(cols_p, cols_phi);
  out.d_alpha_d_rest_offsets = d_all.rightCols(cols_t);
  return out;
}

/// Gradients from the stationarity condition J^T (P - f(alpha)) = 0
/// differentiated at the solution, with the Gauss-Newton Hessian
/// approximation (J^T J + sigma I) as the system matrix. Valid only at a
/// true fixed point; pass require_fixed_point=false to evaluate the formula
/// away from one (used by the comparison experiments).
inline SolutionGradients implicit_gradients(const KinematicTree& tree,
                                            const SwingTwistPose& pose_star,
                                            const JointTargets& targets,
                                            const SolverConfig& config,
                                            bool require_fixed_point = true) {
  config.validate();
  pose_star.validate(tree);
  targets.validate(tree);
  const int n = tree.joint_count();
  const detail::IterationGeometry geom =
      detail::iteration_geometry(tree, pose_star, targets.position[tree.root()]);
  const detail::IterationSystem sys =
      detail::iteration_system(tree, geom, targets, config.damping_sigma);

  const double stationarity = (sys.jac_t * sys.rho).cwiseAbs().maxCoeff();
  if (require_fixed_point && !(stationarity < 1e-6))
    throw NotConverged("implicit_gradients: |J^T dP|_inf = " +
                       std::to_string(stationarity) + " at alpha_star");

  MatX k_phi = detail::twist_position_jacobian(tree, geom);
  MatX k_rest = detail::rest_position_jacobian(tree, geom);
  for (int j = 0; j < n; ++j) {
    k_phi.middleRows<3>(3 * j) *= targets.confidence[j];
    k_rest.middleRows<3>(3 * j) *= targets.confidence[j];
  }
  const MatX h = sys.llt.solve(sys.jac_t);

  SolutionGradients out;
  out.d_alpha_d_targets =
      h * detail::weighted_target_residual_jacobian(tree, targets.confidence);
  out.d_alpha_d_twist = -(h * k_phi);
  out.d_alpha_d_rest_offsets = -(h * k_rest);
  return out;
}

/// Central finite differences of the entire solve output with respect to
/// every input coordinate. The swing frames and the tree's twist axes are
/// frozen at their base values while inputs are perturbed, matching the
/// freeze in unrolled_gradients. Intended for configs with a fixed iteration
/// budget (tolerances disabled); early-stopping makes the solve map
/// piecewise and central differences noisy at the boundaries.
inline SolutionGradients fd_gradients(const KinematicTree& tree,
                                      const SwingTwistPose& pose0,
                                      const JointTargets& targets,
                                      const SolverConfig& config, double h) {
  if (!(h > 0.0)) throw InvalidStep("fd_gradients: step must be positive");
  config.validate();
  pose0.validate(tree);
  targets.validate(tree);

  // Freeze the swing frames the solve would use.
  SwingTwistPose base = pose0;
  if (config.refresh_axes_each_iter) {
    detail::SweepResult s = detail::adaptive_sweep(
        tree, base.root_rotation, base.twist_angle, base.swing_axis, targets);
    base.swing_axis = std::move(s.axes);
    base.swing_offset = std::move(s.aim_angle);
  }
  SolverConfig frozen = config;
  frozen.refresh_axes_each_iter = false;

  const int m = tree.internal_count();
  const int n = tree.joint_count();
  SolutionGradients out;
  out.d_alpha_d_targets = MatX::Zero(m, 3 * n);
  out.d_alpha_d_twist = MatX::Zero(m, m);
  out.d_alpha_d_rest_offsets = MatX::Zero(m, 3 * (n - 1));

  JointTargets probe = targets;
  for (int j = 0; j < n; ++j) {
    for (int e = 0; e < 3; ++e) {
      probe.position[j][e] = targets.position[j][e] + h;
      const VecX plus = solve(tree, base, probe, frozen).first;
      probe.position[j][e] = targets.position[j][e] - h;
      const VecX minus = solve(tree, base, probe, frozen).first;
      probe.position[j][e] = targets.position[j][e];
      out.d_alpha_d_targets.col(3 * j + e) = (plus - minus) / (2.0 * h);
    }
  }

  SwingTwistPose probe_pose = base;
  for (int i = 0; i < m; ++i) {
    probe_pose.twist_angle[i] = base.twist_angle[i] + h;
    const VecX plus = solve(tree, probe_pose, targets, frozen).first;
    probe_pose.twist_angle[i] = base.twist_angle[i] - h;
    const VecX minus = solve(tree, probe_pose, targets, frozen).first;
    probe_pose.twist_angle[i] = base.twist_angle[i];
    out.d_alpha_d_twist.col(i) = (plus - minus) / (2.0 * h);
  }

  std::vector<Vec3> offsets(n);
  for (int j = 0; j < n; ++j) offsets[j] = tree.rest_offset(j);
  for (int s = 1; s < n; ++s) {
    for (int e = 0; e < 3; ++e) {
      offsets[s][e] += h;
      const KinematicTree plus_tree = tree.with_rest_offsets(offsets, true);
      const VecX plus = solve(plus_tree, base, targets, frozen).first;
      offsets[s][e] -= 2.0 * h;
      const KinematicTree minus_tree = tree.with_rest_offsets(offsets, true);
      const VecX minus = solve(minus_tree, base, targets, frozen).first;
      offsets[s][e] += h;
      out.d_alpha_d_rest_offsets.col(3 * (s - 1) + e) = (plus - minus) / (2.0 * h);
    }
  }
  return out;
}

}  // namespace diffik
