#pragma once

#include <vector>

#include "diffik/kinematics.hpp"
#include "diffik/types.hpp"

namespace diffik {

/// Derivative of all joint positions with respect to all swing angles.
/// Shape (3 * joint_count) x internal_count; row block r holds the xyz rows
/// of joint r, column c corresponds to internal_joints()[c]. Entries are
/// meters per radian. An entry is exactly zero unless the column's joint is
/// a strict ancestor of the row's joint.
struct FKJacobian {
  MatX matrix;
  std::vector<int> column_joint;
};

namespace detail {

inline std::vector<Vec3> world_swing_axes(const KinematicTree& tree,
                                          const SwingTwistPose& pose,
                                          const std::vector<RotationMatrix>& globals) {
  std::vector<Vec3> w(tree.internal_count());
  for (int i = 0; i < tree.internal_count(); ++i) {
    const int j = tree.internal_joints()[i];
    w[i] = globals[tree.parent(j)] * pose.swing_axis[i];
  }
  return w;
}

inline FKJacobian analytic_jacobian_at(const KinematicTree& tree,
                                       const std::vector<Vec3>& positions,
                                       const std::vector<Vec3>& world_axes) {
  FKJacobian jac;
  jac.column_joint = tree.internal_joints();
  jac.matrix = MatX::Zero(3 * tree.joint_count(), tree.internal_count());
  for (int c = 0; c < tree.internal_count(); ++c) {
    const int j = tree.internal_joints()[c];
    for (int r : tree.descendants(j))
      jac.matrix.block<3, 1>(3 * r, c) = world_axes[c].cross(positions[r] - positions[j]);
  }
  return jac;
}

}  // namespace detail

/// Analytic Jacobian at the given pose: column c is, for each strict
/// descendant position q of internal joint c, the cross product of the
/// joint's world-frame swing axis with (q - p_c), where p_c is the joint's
/// own position. Swing axes are held fixed (they are refreshed between
/// solver iterations, not differentiated within one).
inline FKJacobian analytic_jacobian(const KinematicTree& tree,
                                    const SwingTwistPose& pose) {
  pose.validate(tree);
  std::vector<RotationMatrix> globals;
  std::vector<Vec3> positions;
  detail::fk_unchecked(tree, pose, Vec3::Zero(), globals, positions);
  return detail::analytic_jacobian_at(
      tree, positions, detail::world_swing_axes(tree, pose, globals));
}

/// Central finite-difference Jacobian with the swing axes frozen during the
/// perturbation. Validation oracle for analytic_jacobian.
inline FKJacobian fd_jacobian(const KinematicTree& tree, const SwingTwistPose& pose,
                              double step) {
  if (!(step > 0.0)) throw InvalidStep("fd_jacobian: step must be positive");
  pose.validate(tree);
  FKJacobian jac;
  jac.column_joint = tree.internal_joints();
  jac.matrix = MatX::Zero(3 * tree.joint_count(), tree.internal_count());
  SwingTwistPose probe = pose;
  std::vector<RotationMatrix> globals;
  std::vector<Vec3> plus, minus;
  for (int c = 0; c < tree.internal_count(); ++c) {
    probe.swing_angle[c] = pose.swing_angle[c] + step;
    detail::fk_unchecked(tree, probe, Vec3::Zero(), globals, plus);
    probe.swing_angle[c] = pose.swing_angle[c] - step;
    detail::fk_unchecked(tree, probe, Vec3::Zero(), globals, minus);
    probe.swing_angle[c] = pose.swing_angle[c];
    for (int r = 0; r < tree.joint_count(); ++r)
      jac.matrix.block<3, 1>(3 * r, c) = (plus[r] - minus[r]) / (2.0 * step);
  }
  return jac;
}

}  // namespace diffik
