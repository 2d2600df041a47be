#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "diffik/jacobian.hpp"
#include "diffik/kinematics.hpp"
#include "diffik/types.hpp"

namespace diffik {

struct SolverConfig {
  int max_iters = 5;
  double damping_sigma = 1e-4;
  double step_eta = 1.0;
  bool line_search = false;   // backtracking halving, at most max_halvings
  int max_halvings = 8;
  double residual_tol = 1e-10;   // early stop on the residual norm, meters
  double direction_tol = 1e-12;  // early stop on the direction norm, radians
  std::optional<VecX> init_alpha;  // nullopt: all zeros
  bool refresh_axes_each_iter = true;

  void validate() const {
    if (max_iters < 1) throw ShapeMismatch("config: max_iters must be >= 1");
    if (!(damping_sigma > 0.0)) throw ShapeMismatch("config: damping_sigma must be > 0");
    if (!(step_eta > 0.0 && step_eta <= 1.0))
      throw ShapeMismatch("config: step_eta must be in (0,1]");
  }
};

inline bool same_settings(const SolverConfig& a, const SolverConfig& b) {
  const bool init_match =
      a.init_alpha.has_value() == b.init_alpha.has_value() &&
      (!a.init_alpha || (a.init_alpha->size() == b.init_alpha->size() &&
                         *a.init_alpha == *b.init_alpha));
  return a.max_iters == b.max_iters && a.damping_sigma == b.damping_sigma &&
         a.step_eta == b.step_eta && a.line_search == b.line_search &&
         a.max_halvings == b.max_halvings && a.residual_tol == b.residual_tol &&
         a.direction_tol == b.direction_tol &&
         a.refresh_axes_each_iter == b.refresh_axes_each_iter && init_match;
}

struct IterationRecord {
  VecX alpha;               // swing angles after the update
  double residual_norm;     // residual norm after the update, meters
  double direction_norm;    // norm of the undamped step direction, radians
  double eta_used;
  std::vector<Vec3> swing_axes;  // axes used at this iteration's linearization
  VecX swing_offsets;            // frame offsets used at the linearization
};

struct SolveTrace {
  std::vector<IterationRecord> iterations;
  VecX alpha_star;
  bool converged = false;
  int iterations_used = 0;
  double initial_residual_norm = 0.0;
  SwingTwistPose initial_pose;  // pose at iteration 0, init_alpha applied
  Vec3 root_position = Vec3::Zero();
  SolverConfig config;
};

/// Confidence-weighted per-joint residuals (target minus FK position) and the
/// Euclidean norm of the stacked vector. The root position is pinned to the
/// root target, so the root residual is identically zero.
inline std::pair<std::vector<Vec3>, double> residual(const KinematicTree& tree,
                                                     const SwingTwistPose& pose,
                                                     const JointTargets& targets) {
  pose.validate(tree);
  targets.validate(tree);
  std::vector<RotationMatrix> globals;
  std::vector<Vec3> positions;
  detail::fk_unchecked(tree, pose, targets.position[tree.root()], globals, positions);
  std::vector<Vec3> r(tree.joint_count());
  double sq = 0.0;
  for (int j = 0; j < tree.joint_count(); ++j) {
    r[j] = targets.confidence[j] * (targets.position[j] - positions[j]);
    sq += r[j].squaredNorm();
  }
  return {std::move(r), std::sqrt(sq)};
}

inline VecX stack_residual(const std::vector<Vec3>& r) {
  VecX v(3 * static_cast<Eigen::Index>(r.size()));
  for (size_t j = 0; j < r.size(); ++j) v.segment<3>(3 * j) = r[j];
  return v;
}

/// Damped Gauss-Newton direction: the unique solution of
/// (J^T J + sigma I) dalpha = J^T deltaP. The damped normal matrix is
/// symmetric positive definite for sigma > 0, so the solve always succeeds.
inline VecX gn_direction(const FKJacobian& jac, const VecX& delta_p, double sigma) {
  if (!(sigma > 0.0)) throw ShapeMismatch("gn_direction: sigma must be > 0");
  if (delta_p.size() != jac.matrix.rows())
    throw ShapeMismatch("gn_direction: residual size does not match Jacobian");
  if (!jac.matrix.allFinite() || !delta_p.allFinite())
    throw NumericalError("gn_direction: non-finite input");
  MatX normal = jac.matrix.transpose() * jac.matrix;
  normal.diagonal().array() += sigma;
  const VecX dir = normal.llt().solve(jac.matrix.transpose() * delta_p);
  if (!dir.allFinite()) throw NumericalError("gn_direction: non-finite direction");
  return dir;
}

namespace detail {

inline void apply_confidence(FKJacobian& jac, const VecX& confidence) {
  for (Eigen::Index j = 0; j < confidence.size(); ++j)
    jac.matrix.middleRows<3>(3 * j) *= confidence[j];
}

inline double residual_norm_unchecked(const KinematicTree& tree,
                                      const SwingTwistPose& pose,
                                      const JointTargets& targets) {
  std::vector<RotationMatrix> globals;
  std::vector<Vec3> positions;
  fk_unchecked(tree, pose, targets.position[tree.root()], globals, positions);
  double sq = 0.0;
  for (int j = 0; j < tree.joint_count(); ++j)
    sq += (targets.confidence[j] * (targets.position[j] - positions[j])).squaredNorm();
  return std::sqrt(sq);
}

}  // namespace detail

/// One linearize -> direction -> (optional line search) -> update cycle.
/// Axes are refreshed before linearization when the config asks for it.
inline std::pair<SwingTwistPose, IterationRecord> gn_step(const KinematicTree& tree,
                                                          const SwingTwistPose& pose_in,
                                                          const JointTargets& targets,
                                                          const SolverConfig& config) {
  config.validate();
  pose_in.validate(tree);
  targets.validate(tree);

  // Line-search non-increase is guaranteed against the incoming pose, before
  // any axis refresh.
  const double norm_in = detail::residual_norm_unchecked(tree, pose_in, targets);

  SwingTwistPose pose = pose_in;
  if (config.refresh_axes_each_iter) {
    // Refresh the swing frames but keep the current angles; the sweep depends
    // only on quantities that are constant during a solve, so from the second
    // iteration on this reproduces the same frames.
    detail::SweepResult s = detail::adaptive_sweep(
        tree, pose.root_rotation, pose.twist_angle, pose.swing_axis, targets);
    pose.swing_axis = std::move(s.axes);
    pose.swing_offset = std::move(s.aim_angle);
  }

  std::vector<RotationMatrix> globals;
  std::vector<Vec3> positions;
  detail::fk_unchecked(tree, pose, targets.position[tree.root()], globals, positions);

  VecX rho(3 * tree.joint_count());
  for (int j = 0; j < tree.joint_count(); ++j)
    rho.segment<3>(3 * j) =
        targets.confidence[j] * (targets.position[j] - positions[j]);

  FKJacobian jac = detail::analytic_jacobian_at(
      tree, positions, detail::world_swing_axes(tree, pose, globals));
  detail::apply_confidence(jac, targets.confidence);

  const VecX direction = gn_direction(jac, rho, config.damping_sigma);

  double eta = config.step_eta;
  SwingTwistPose next = pose;
  next.swing_angle += eta * direction;
  double norm_after = detail::residual_norm_unchecked(tree, next, targets);
  if (config.line_search && norm_after > norm_in) {
    bool accepted = false;
    for (int h = 0; h < config.max_halvings; ++h) {
      eta *= 0.5;
      next.swing_angle = pose.swing_angle + eta * direction;
      norm_after = detail::residual_norm_unchecked(tree, next, targets);
      if (norm_after <= norm_in) {
        accepted = true;
        break;
      }
    }
    if (!accepted) {  // keep the incoming iterate, refresh included
      eta = 0.0;
      next = pose_in;
      norm_after = norm_in;
    }
  }

  IterationRecord rec;
  rec.alpha = next.swing_angle;
  rec.residual_norm = norm_after;
  rec.direction_norm = direction.norm();
  rec.eta_used = eta;
  rec.swing_axes = pose.swing_axis;
  rec.swing_offsets = pose.swing_offset;
  return {std::move(next), std::move(rec)};
}

/// Iterative damped Gauss-Newton fit of the swing angles to the targets.
/// Runs gn_step until max_iters or a tolerance is met; deterministic given
/// identical inputs. The starting angles are config.init_alpha (zeros when
/// unset); axes, twist angles and root rotation come from pose0.
inline std::pair<VecX, SolveTrace> solve(const KinematicTree& tree,
                                         const SwingTwistPose& pose0,
                                         const JointTargets& targets,
                                         const SolverConfig& config) {
  config.validate();
  pose0.validate(tree);
  targets.validate(tree);

  SwingTwistPose pose = pose0;
  if (config.init_alpha) {
    if (config.init_alpha->size() != tree.internal_count())
      throw ShapeMismatch("config: init_alpha size does not match internal joints");
    pose.swing_angle = *config.init_alpha;
  } else {
    pose.swing_angle = VecX::Zero(tree.internal_count());
  }

  SolveTrace trace;
  trace.config = config;
  trace.initial_pose = pose;
  trace.root_position = targets.position[tree.root()];
  trace.initial_residual_norm = detail::residual_norm_unchecked(tree, pose, targets);

  for (int k = 0; k < config.max_iters; ++k) {
    auto [next, rec] = gn_step(tree, pose, targets, config);
    pose = std::move(next);
    trace.iterations.push_back(std::move(rec));
    const IterationRecord& last = trace.iterations.back();
    if (last.residual_norm < config.residual_tol ||
        last.direction_norm < config.direction_tol) {
      trace.converged = true;
      break;
    }
  }
  trace.iterations_used = static_cast<int>(trace.iterations.size());
  trace.alpha_star = pose.swing_angle;
  return {trace.alpha_star, std::move(trace)};
}

/// Pose holding the solver's final state for a given trace: the initial pose
/// with the final angles and, for refresh-mode traces, the refreshed frames.
inline SwingTwistPose pose_at_solution(const KinematicTree& tree,
                                       const SolveTrace& trace,
                                       const JointTargets& targets) {
  SwingTwistPose pose = trace.initial_pose;
  if (trace.config.refresh_axes_each_iter && !trace.iterations.empty()) {
    detail::SweepResult s = detail::adaptive_sweep(
        tree, pose.root_rotation, pose.twist_angle, pose.swing_axis, targets);
    pose.swing_axis = std::move(s.axes);
    pose.swing_offset = std::move(s.aim_angle);
  }
  pose.swing_angle = trace.alpha_star;
  return pose;
}

}  // namespace diffik
