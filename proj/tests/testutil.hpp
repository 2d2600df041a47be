#pragma once

#include <random>
#include <vector>

#include "diffik/kinematics.hpp"

namespace testutil {

using diffik::JointTargets;
using diffik::KinematicTree;
using diffik::RotationMatrix;
using diffik::SwingTwistPose;
using diffik::Vec3;
using diffik::VecX;

inline Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 v;
  do {
    v = Vec3(n(rng), n(rng), n(rng));
  } while (v.norm() < 1e-6);
  return v.normalized();
}

inline Vec3 random_perp(std::mt19937_64& rng, const Vec3& b) {
  Vec3 v;
  do {
    v = random_unit(rng);
    v -= v.dot(b) * b;
  } while (v.norm() < 1e-6);
  return v.normalized();
}

inline RotationMatrix random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q;
  do {
    q = Eigen::Quaterniond(n(rng), n(rng), n(rng), n(rng));
  } while (q.norm() < 1e-6);
  q.normalize();
  return RotationMatrix(q.toRotationMatrix());
}

/// Random pose on the tree: swing axes perpendicular to the rest bones,
/// angles in [-amax, amax], twists in [-pi, pi], random root rotation.
inline SwingTwistPose random_pose(const KinematicTree& tree, std::mt19937_64& rng,
                                  double amax = 0.8) {
  std::uniform_real_distribution<double> angle(-amax, amax);
  std::uniform_real_distribution<double> twist(-M_PI, M_PI);
  SwingTwistPose pose = SwingTwistPose::rest(tree);
  for (int i = 0; i < tree.internal_count(); ++i) {
    pose.swing_axis[i] = random_perp(rng, tree.twist_axis(tree.internal_joints()[i]));
    pose.swing_angle[i] = angle(rng);
    pose.twist_angle[i] = twist(rng);
  }
  pose.root_rotation = random_rotation(rng);
  return pose;
}

/// Independent forward-kinematics oracle: depth-first recursion building each
/// joint's rotation and position on the way down, written without reference
/// to the library's FK loop.
inline void fk_oracle_walk(const KinematicTree& tree, const SwingTwistPose& pose,
                           int joint, const RotationMatrix& parent_rot,
                           const Vec3& parent_pos, std::vector<RotationMatrix>& rots,
                           std::vector<Vec3>& positions) {
  RotationMatrix local = RotationMatrix::Identity();
  const int i = tree.internal_index(joint);
  if (joint == tree.root()) {
    local = pose.root_rotation;
  } else if (i >= 0) {
    local = diffik::rodrigues(pose.swing_axis[i],
                              pose.swing_angle[i] + pose.swing_offset[i]) *
            diffik::rodrigues(tree.twist_axis(joint), pose.twist_angle[i]);
  }
  const RotationMatrix rot =
      joint == tree.root() ? local : RotationMatrix(parent_rot * local);
  const Vec3 pos = joint == tree.root()
                       ? parent_pos
                       : Vec3(parent_pos + parent_rot * tree.rest_offset(joint));
  rots[joint] = rot;
  positions[joint] = pos;
  for (int c : tree.children(joint))
    fk_oracle_walk(tree, pose, c, rot, pos, rots, positions);
}

inline std::vector<Vec3> fk_oracle(const KinematicTree& tree,
                                   const SwingTwistPose& pose,
                                   const Vec3& root_position) {
  std::vector<RotationMatrix> rots(tree.joint_count());
  std::vector<Vec3> positions(tree.joint_count());
  fk_oracle_walk(tree, pose, tree.root(), RotationMatrix::Identity(), root_position,
                 rots, positions);
  return positions;
}

inline std::vector<RotationMatrix> rotations_oracle(const KinematicTree& tree,
                                                    const SwingTwistPose& pose) {
  std::vector<RotationMatrix> rots(tree.joint_count());
  std::vector<Vec3> positions(tree.joint_count());
  fk_oracle_walk(tree, pose, tree.root(), RotationMatrix::Identity(), Vec3::Zero(),
                 rots, positions);
  return rots;
}

/// Random tree with the given joint count: each joint's parent is drawn among
/// earlier joints, offsets are random with lengths in [0.1, 0.4].
inline KinematicTree random_tree(std::mt19937_64& rng, int joints) {
  std::vector<KinematicTree::Joint> out;
  out.push_back({"root", diffik::kRootParent, Vec3::Zero()});
  std::uniform_real_distribution<double> len(0.1, 0.4);
  for (int j = 1; j < joints; ++j) {
    std::uniform_int_distribution<int> parent(0, j - 1);
    out.push_back({"j" + std::to_string(j), parent(rng), len(rng) * random_unit(rng)});
  }
  return KinematicTree::from_joints(std::move(out));
}

inline JointTargets targets_from(const KinematicTree& tree, const SwingTwistPose& pose,
                                 const Vec3& root_position) {
  return JointTargets::from_positions(
      diffik::forward_kinematics(tree, pose, root_position));
}

}  // namespace testutil
