#pragma once

#include <vector>

#include "diffik/kinematics.hpp"
#include "diffik/types.hpp"

namespace diffik {

/// Analytical inverse kinematics in the style of adaptive closed-form
/// solvers: walks the tree root to leaf, takes each parent transform from the
/// reconstruction built so far (not from the targets), and solves the swing
/// per joint in closed form: axis = normalize(d_rest x d_tgt), angle =
/// arccos(clamp(d_rest . d_tgt, -1, 1)). Exact whenever target bone lengths
/// equal rest bone lengths. The root rotation comes from the orthogonal
/// Procrustes fit over the root's children directions.
inline SwingTwistPose hybrik_analytical_ik(const KinematicTree& tree,
                                           const VecX& twist_angles,
                                           const JointTargets& targets) {
  targets.validate(tree);
  if (twist_angles.size() != tree.internal_count())
    throw ShapeMismatch("hybrik_analytical_ik: twist angle count mismatch");
  for (int j = 1; j < tree.joint_count(); ++j)
    if ((targets.position[j] - targets.position[tree.parent(j)]).norm() < 1e-12)
      throw DegenerateBone("target bone of joint '" + tree.name(j) +
                           "' has zero length");

  std::vector<Vec3> rest_dirs, target_dirs;
  for (int c : tree.children(tree.root())) {
    rest_dirs.push_back(tree.rest_offset(c).normalized());
    target_dirs.push_back(
        (targets.position[c] - targets.position[tree.root()]).normalized());
  }
  const RotationMatrix root = detail::procrustes_rotation(rest_dirs, target_dirs);

  SwingTwistPose pose = SwingTwistPose::rest(tree);
  pose.twist_angle = twist_angles;
  pose.root_rotation = root;
  detail::SweepResult s =
      detail::adaptive_sweep(tree, root, twist_angles, pose.swing_axis, targets);
  pose.swing_axis = std::move(s.axes);
  pose.swing_angle = std::move(s.aim_angle);
  return pose;
}

}  // namespace diffik
