#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "diffik/types.hpp"

namespace diffik {

/// Topology and rest-pose geometry of an articulated joint tree.
///
/// Joints are stored in topological order: every joint's parent index is
/// strictly smaller than its own index, and joint 0 is the unique root.
/// Non-root joints carry a nonzero rest offset (meters) relative to their
/// parent. Joints with children have a designated child (first child in
/// index order) whose normalized rest offset is the joint's twist axis.
class KinematicTree {
 public:
  struct Joint {
    std::string name;
    int parent = kRootParent;
    Vec3 rest_offset = Vec3::Zero();
  };

  static KinematicTree from_joints(std::vector<Joint> joints) {
    KinematicTree tree;
    tree.joints_ = std::move(joints);
    tree.build_and_validate();
    return tree;
  }

  /// Bundled 24-joint SMPL-topology skeleton with hand-authored rest
  /// offsets in meters. y is up; the pelvis is the root.
  static KinematicTree smpl24();

  int joint_count() const { return static_cast<int>(joints_.size()); }
  int parent(int j) const { return joints_[j].parent; }
  const Vec3& rest_offset(int j) const { return joints_[j].rest_offset; }
  const std::string& name(int j) const { return joints_[j].name; }
  const std::vector<Joint>& joints() const { return joints_; }
  int root() const { return 0; }

  bool is_leaf(int j) const { return children_[j].empty(); }
  bool is_internal(int j) const { return j != root() && !is_leaf(j); }
  const std::vector<int>& children(int j) const { return children_[j]; }

  /// First child in index order; twist/swing reference bone. -1 for leaves.
  int designated_child(int j) const {
    return children_[j].empty() ? -1 : children_[j].front();
  }

  /// Internal joints (non-root, non-leaf) in index order. These are the
  /// joints that carry swing/twist parameters.
  const std::vector<int>& internal_joints() const { return internal_; }
  int internal_count() const { return static_cast<int>(internal_.size()); }

  /// Position of joint j in internal_joints(), or -1.
  int internal_index(int j) const { return internal_index_[j]; }

  /// Unit direction of the designated child bone in the joint's local frame.
  const Vec3& twist_axis(int j) const {
    if (designated_child(j) < 0)
      throw NoTwistAxis("joint '" + joints_[j].name + "' has no child bone");
    return twist_axes_[j];
  }

  /// Replace the cached twist axes (unit vectors, one per non-leaf joint).
  /// Used by sensitivity analyses that vary rest offsets while holding the
  /// rotation axes fixed.
  void set_twist_axes(std::vector<Vec3> axes) {
    if (axes.size() != twist_axes_.size())
      throw ShapeMismatch("set_twist_axes: wrong count");
    for (int j = 0; j < joint_count(); ++j) {
      if (designated_child(j) < 0) continue;
      if (std::abs(axes[j].norm() - 1.0) > 1e-9)
        throw InvalidAxis("set_twist_axes: axis for joint " + std::to_string(j) +
                          " is not unit length");
    }
    twist_axes_ = std::move(axes);
  }
  const std::vector<Vec3>& twist_axes() const { return twist_axes_; }

  bool is_ancestor_or_self(int anc, int j) const {
    for (int cur = j; cur != kRootParent; cur = joints_[cur].parent)
      if (cur == anc) return true;
    return false;
  }

  /// Strict descendants of j, in index order.
  const std::vector<int>& descendants(int j) const { return descendants_[j]; }

  /// Rest-pose joint positions (identity rotations everywhere).
  std::vector<Vec3> rest_positions(const Vec3& root_position = Vec3::Zero()) const {
    std::vector<Vec3> p(joints_.size());
    p[0] = root_position;
    for (int j = 1; j < joint_count(); ++j)
      p[j] = p[joints_[j].parent] + joints_[j].rest_offset;
    return p;
  }

  /// Copy of this tree with different rest offsets but the same topology.
  /// Twist axes are recomputed from the new offsets unless `keep_twist_axes`.
  KinematicTree with_rest_offsets(const std::vector<Vec3>& offsets,
                                  bool keep_twist_axes = false) const {
    if (static_cast<int>(offsets.size()) != joint_count())
      throw ShapeMismatch("with_rest_offsets: wrong count");
    KinematicTree t = *this;
    for (int j = 0; j < joint_count(); ++j) t.joints_[j].rest_offset = offsets[j];
    if (!keep_twist_axes) t.compute_twist_axes();
    return t;
  }

 private:
  void build_and_validate() {
    const int n = joint_count();
    if (n == 0) throw ShapeMismatch("tree has no joints");
    int roots = 0;
    for (int j = 0; j < n; ++j) {
      const int p = joints_[j].parent;
      if (p == kRootParent) {
        ++roots;
      } else if (p < 0 || p >= j) {
        throw ShapeMismatch("joint " + std::to_string(j) +
                            ": parent index must be smaller than the joint's own index");
      }
      if (!joints_[j].rest_offset.allFinite())
        throw ShapeMismatch("joint " + std::to_string(j) + ": non-finite rest offset");
      if (p != kRootParent && joints_[j].rest_offset.norm() == 0.0)
        throw ShapeMismatch("joint " + std::to_string(j) + ": zero rest offset");
    }
    if (roots != 1 || joints_[0].parent != kRootParent)
      throw ShapeMismatch("tree must have exactly one root at index 0");

    children_.assign(n, {});
    for (int j = 1; j < n; ++j) children_[joints_[j].parent].push_back(j);

    internal_.clear();
    internal_index_.assign(n, -1);
    for (int j = 1; j < n; ++j) {
      if (!children_[j].empty()) {
        internal_index_[j] = static_cast<int>(internal_.size());
        internal_.push_back(j);
      }
    }

    descendants_.assign(n, {});
    for (int j = 1; j < n; ++j)
      for (int a = joints_[j].parent; a != kRootParent; a = joints_[a].parent)
        descendants_[a].push_back(j);

    compute_twist_axes();
  }

  void compute_twist_axes() {
    twist_axes_.assign(joint_count(), Vec3::Zero());
    for (int j = 0; j < joint_count(); ++j) {
      const int c = designated_child(j);
      if (c >= 0) twist_axes_[j] = joints_[c].rest_offset.normalized();
    }
  }

  std::vector<Joint> joints_;
  std::vector<std::vector<int>> children_;
  std::vector<std::vector<int>> descendants_;
  std::vector<int> internal_;
  std::vector<int> internal_index_;
  std::vector<Vec3> twist_axes_;
};

/// Per-joint swing/twist state. Swing parameters exist only for internal
/// joints (indexed by KinematicTree::internal_joints()); the root carries an
/// explicit rotation and leaves have identity local rotation.
///
/// The effective local swing of an internal joint is
///   rodrigues(swing_axis, swing_angle + swing_offset),
/// a single rotation about the swing axis. swing_offset locates the origin of
/// the current swing frame along that circle; refresh_swing_axes sets it to
/// the closed-form aim at the targets, so a zero swing_angle means "at the
/// refreshed frame". Freshly constructed poses have zero offsets.
struct SwingTwistPose {
  VecX swing_angle;
  std::vector<Vec3> swing_axis;
  VecX swing_offset;
  VecX twist_angle;
  RotationMatrix root_rotation = RotationMatrix::Identity();

  static SwingTwistPose rest(const KinematicTree& tree) {
    const int m = tree.internal_count();
    SwingTwistPose p;
    p.swing_angle = VecX::Zero(m);
    p.swing_offset = VecX::Zero(m);
    p.twist_angle = VecX::Zero(m);
    p.swing_axis.resize(m);
    for (int i = 0; i < m; ++i)
      p.swing_axis[i] = any_perpendicular(tree.twist_axis(tree.internal_joints()[i]));
    return p;
  }

  void validate(const KinematicTree& tree) const {
    const int m = tree.internal_count();
    if (swing_angle.size() != m || twist_angle.size() != m ||
        swing_offset.size() != m || static_cast<int>(swing_axis.size()) != m)
      throw ShapeMismatch("pose does not match tree topology");
    if (!swing_angle.allFinite() || !twist_angle.allFinite() ||
        !swing_offset.allFinite())
      throw ShapeMismatch("pose has non-finite angles");
    if (!is_rotation(root_rotation))
      throw InvalidAxis("root_rotation is not a rotation matrix");
    for (int i = 0; i < m; ++i) {
      if (std::abs(swing_axis[i].norm() - 1.0) > 1e-9)
        throw InvalidAxis("swing axis " + std::to_string(i) + " is not unit length");
      // The swing must be able to move the bone off its rest direction.
      const int j = tree.internal_joints()[i];
      if (tree.twist_axis(j).cross(swing_axis[i]).norm() < 1e-6)
        throw InvalidAxis("swing axis " + std::to_string(i) +
                          " is parallel to its rest bone direction");
    }
  }
};

/// Target joint positions with optional per-joint confidence in [0,1].
struct JointTargets {
  std::vector<Vec3> position;
  VecX confidence;

  static JointTargets from_positions(std::vector<Vec3> pos) {
    JointTargets t;
    t.confidence = VecX::Ones(static_cast<Eigen::Index>(pos.size()));
    t.position = std::move(pos);
    return t;
  }

  void validate(const KinematicTree& tree) const {
    if (static_cast<int>(position.size()) != tree.joint_count() ||
        confidence.size() != tree.joint_count())
      throw ShapeMismatch("targets do not match tree joint count");
    for (const auto& p : position)
      if (!p.allFinite()) throw ShapeMismatch("non-finite target position");
    for (int j = 0; j < tree.joint_count(); ++j)
      if (!(confidence[j] >= 0.0 && confidence[j] <= 1.0))
        throw ShapeMismatch("confidence out of [0,1]");
  }
};

/// First 10 principal shape coefficients. Consumed only by loss evaluation;
/// no blend-shape model is applied to the skeleton.
struct ShapeParams {
  VecX beta;

  static ShapeParams from(VecX b) {
    if (b.size() != 10) throw ShapeMismatch("shape params must have length 10");
    ShapeParams s;
    s.beta = std::move(b);
    return s;
  }
};

/// Rotation by `angle` about the unit vector `axis` (exp of the scaled
/// cross-product matrix).
inline RotationMatrix rodrigues(const Vec3& axis, double angle) {
  if (std::abs(axis.norm() - 1.0) > 1e-9)
    throw InvalidAxis("rodrigues: axis is not unit length");
  const Eigen::Matrix3d k = skew(axis);
  RotationMatrix r = RotationMatrix::Identity() + std::sin(angle) * k +
                     (1.0 - std::cos(angle)) * (k * k);
  return r;
}

/// Shortest rotation taking unit vector `from` onto unit vector `to`.
/// Antiparallel inputs rotate by pi about a deterministic perpendicular.
inline RotationMatrix geodesic_rotation(const Vec3& from, const Vec3& to) {
  const Vec3 cross = from.cross(to);
  const double s = cross.norm();
  const double c = from.dot(to);
  if (s < 1e-12) {
    if (c > 0.0) return RotationMatrix::Identity();
    return rodrigues(any_perpendicular(from), M_PI);
  }
  return rodrigues(cross / s, std::atan2(s, c));
}

/// Twist rotation of an internal joint: rotation by phi about its rest bone
/// direction (the normalized rest offset of the designated child).
inline RotationMatrix twist_rotation(const KinematicTree& tree, int joint, double phi) {
  if (!tree.is_internal(joint))
    throw NoTwistAxis("twist_rotation: joint " + std::to_string(joint) +
                      " is not internal");
  return rodrigues(tree.twist_axis(joint), phi);
}

/// Swing rotation of an internal joint about its current swing axis,
/// excluding the frame offset.
inline RotationMatrix swing_rotation(const KinematicTree& tree,
                                     const SwingTwistPose& pose, int joint) {
  const int i = tree.internal_index(joint);
  if (i < 0) throw ShapeMismatch("swing_rotation: joint is not internal");
  return rodrigues(pose.swing_axis[i], pose.swing_angle[i]);
}

/// Local (parent-relative) rotation of a joint: swing * twist for internal
/// joints, identity for leaves. The root's local rotation is its global
/// rotation and is taken from pose.root_rotation by the recursion.
inline RotationMatrix local_rotation(const KinematicTree& tree,
                                     const SwingTwistPose& pose, int joint) {
  const int i = tree.internal_index(joint);
  if (i < 0) return RotationMatrix::Identity();
  return rodrigues(pose.swing_axis[i], pose.swing_angle[i] + pose.swing_offset[i]) *
         rodrigues(tree.twist_axis(joint), pose.twist_angle[i]);
}

/// Global rotations R_i = R_parent * R_local, root first.
inline std::vector<RotationMatrix> global_rotations(const KinematicTree& tree,
                                                    const SwingTwistPose& pose) {
  pose.validate(tree);
  std::vector<RotationMatrix> r(tree.joint_count());
  r[0] = pose.root_rotation;
  for (int j = 1; j < tree.joint_count(); ++j)
    r[j] = r[tree.parent(j)] * local_rotation(tree, pose, j);
  return r;
}

namespace detail {

// FK without pose validation, for inner solver loops. `globals` gets the
// per-joint global rotations.
inline void fk_unchecked(const KinematicTree& tree, const SwingTwistPose& pose,
                         const Vec3& root_position,
                         std::vector<RotationMatrix>& globals,
                         std::vector<Vec3>& positions) {
  const int n = tree.joint_count();
  globals.resize(n);
  positions.resize(n);
  globals[0] = pose.root_rotation;
  positions[0] = root_position;
  for (int j = 1; j < n; ++j) {
    const int p = tree.parent(j);
    globals[j] = globals[p] * local_rotation(tree, pose, j);
    positions[j] = positions[p] + globals[p] * tree.rest_offset(j);
  }
}

}  // namespace detail

/// Joint positions q_i = q_parent + R_parent * rest_offset_i.
inline std::vector<Vec3> forward_kinematics(const KinematicTree& tree,
                                            const SwingTwistPose& pose,
                                            const Vec3& root_position = Vec3::Zero()) {
  pose.validate(tree);
  std::vector<RotationMatrix> globals;
  std::vector<Vec3> positions;
  detail::fk_unchecked(tree, pose, root_position, globals, positions);
  return positions;
}

namespace detail {

/// Best rotation mapping each rest direction onto its target direction in the
/// least-squares sense (orthogonal Procrustes with determinant correction).
inline RotationMatrix procrustes_rotation(const std::vector<Vec3>& rest_dirs,
                                          const std::vector<Vec3>& target_dirs) {
  Eigen::Matrix3d cross = Eigen::Matrix3d::Zero();
  for (size_t i = 0; i < rest_dirs.size(); ++i)
    cross += target_dirs[i] * rest_dirs[i].transpose();
  Eigen::JacobiSVD<Eigen::Matrix3d> svd(cross,
                                        Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (svd.singularValues()(1) < 1e-12)
    throw DegenerateProcrustes("directions are collinear; rotation is not unique");
  Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
  d(2, 2) = (svd.matrixU() * svd.matrixV().transpose()).determinant() < 0 ? -1.0 : 1.0;
  return RotationMatrix(svd.matrixU() * d * svd.matrixV().transpose());
}

}  // namespace detail

/// Closed-form root rotation from three of its children: the rotation that
/// best aligns the children's rest bone directions with the directions from
/// the root target to the children targets.
inline RotationMatrix solve_root_rotation(const KinematicTree& tree,
                                          const JointTargets& targets,
                                          const std::array<int, 3>& child_joints) {
  targets.validate(tree);
  std::vector<Vec3> rest_dirs, target_dirs;
  for (int c : child_joints) {
    if (c <= 0 || c >= tree.joint_count() || tree.parent(c) != tree.root())
      throw ShapeMismatch("solve_root_rotation: joint " + std::to_string(c) +
                          " is not a child of the root");
    const Vec3 t = targets.position[c] - targets.position[tree.root()];
    if (t.norm() < 1e-12)
      throw DegenerateProcrustes("target bone of joint " + std::to_string(c) +
                                 " has zero length");
    rest_dirs.push_back(tree.rest_offset(c).normalized());
    target_dirs.push_back(t.normalized());
  }
  return detail::procrustes_rotation(rest_dirs, target_dirs);
}

namespace detail {

/// Adaptive root-to-leaf sweep shared by refresh_swing_axes and the
/// analytical IK baseline. Walks the tree with already-reconstructed parent
/// transforms: at each internal joint the swing axis is the normalized cross
/// product of d_rest (the child bone direction under the current parent
/// global rotation) and d_tgt (the direction from the joint's current FK
/// position to its child's target), and the closed-form swing angle
/// atan2(|d_rest x d_tgt|, d_rest . d_tgt) takes the bone exactly onto the
/// target direction. Degenerate joints (cross norm < 1e-8) keep the axis in
/// `axes` and get a zero aim angle.
///
/// The reconstruction depends on the targets, the tree, the root rotation and
/// the twist angles only, so repeating the sweep during a solve reproduces
/// identical axes.
struct SweepResult {
  std::vector<Vec3> axes;       // per internal joint, local frame
  VecX aim_angle;               // closed-form swing angle per internal joint
  std::vector<RotationMatrix> globals;
  std::vector<Vec3> positions;  // reconstructed joint positions
};

inline SweepResult adaptive_sweep(const KinematicTree& tree,
                                  const RotationMatrix& root_rotation,
                                  const VecX& twist_angle,
                                  std::vector<Vec3> axes,  // fallback axes
                                  const JointTargets& targets) {
  const int n = tree.joint_count();
  SweepResult s;
  s.axes = std::move(axes);
  s.aim_angle = VecX::Zero(tree.internal_count());
  s.globals.resize(n);
  s.positions.resize(n);
  s.globals[0] = root_rotation;
  s.positions[0] = targets.position[tree.root()];
  for (int j = 1; j < n; ++j) {
    const int p = tree.parent(j);
    s.positions[j] = s.positions[p] + s.globals[p] * tree.rest_offset(j);
    const int i = tree.internal_index(j);
    if (i < 0) {
      s.globals[j] = s.globals[p];
      continue;
    }
    const Vec3& bone = tree.twist_axis(j);
    const Vec3 d_rest = s.globals[p] * bone;
    const Vec3 d_tgt = targets.position[tree.designated_child(j)] - s.positions[j];
    const double len = d_tgt.norm();
    const Vec3 cross = len < 1e-12 ? Vec3::Zero() : Vec3(d_rest.cross(d_tgt / len));
    if (cross.norm() >= 1e-8) {
      s.axes[i] = s.globals[p].transpose() * cross.normalized();
      s.aim_angle[i] = std::atan2(cross.norm(), d_rest.dot(d_tgt / len));
    }
    s.globals[j] = s.globals[p] * rodrigues(s.axes[i], s.aim_angle[i]) *
                   rodrigues(bone, twist_angle[i]);
  }
  return s;
}

}  // namespace detail

/// Re-picks every internal joint's swing frame from the targets: the swing
/// axis becomes normalize(d_rest x d_tgt) where d_rest is the child bone
/// direction under the current parent global rotation and d_tgt points from
/// the joint's current FK position to the child's target (both taken along
/// an adaptive root-to-leaf reconstruction), swing_offset becomes the
/// closed-form angle aligning the bone with d_tgt, and swing angles are reset
/// to zero. The GN solve then measures angles relative to the refreshed
/// frame. Joints with a degenerate cross product (< 1e-8) retain their
/// previous axis.
inline SwingTwistPose refresh_swing_axes(const KinematicTree& tree,
                                         const SwingTwistPose& pose,
                                         const JointTargets& targets) {
  pose.validate(tree);
  targets.validate(tree);
  detail::SweepResult s = detail::adaptive_sweep(tree, pose.root_rotation,
                                                 pose.twist_angle, pose.swing_axis,
                                                 targets);
  SwingTwistPose out = pose;
  out.swing_axis = std::move(s.axes);
  out.swing_offset = std::move(s.aim_angle);
  out.swing_angle.setZero();
  return out;
}

inline KinematicTree KinematicTree::smpl24() {
  return KinematicTree::from_joints({
      {"pelvis", kRootParent, {0.0, 0.0, 0.0}},
      {"left_hip", 0, {0.09, -0.09, 0.0}},
      {"right_hip", 0, {-0.09, -0.09, 0.0}},
      {"spine1", 0, {0.0, 0.11, -0.01}},
      {"left_knee", 1, {0.04, -0.38, 0.0}},
      {"right_knee", 2, {-0.04, -0.38, 0.0}},
      {"spine2", 3, {0.0, 0.13, 0.01}},
      {"left_ankle", 4, {-0.01, -0.40, -0.03}},
      {"right_ankle", 5, {0.01, -0.40, -0.03}},
      {"spine3", 6, {0.0, 0.06, 0.02}},
      {"left_foot", 7, {0.03, -0.06, 0.12}},
      {"right_foot", 8, {-0.03, -0.06, 0.12}},
      {"neck", 9, {0.0, 0.21, -0.03}},
      {"left_collar", 9, {0.08, 0.12, -0.02}},
      {"right_collar", 9, {-0.08, 0.12, -0.02}},
      {"head", 12, {0.0, 0.07, 0.05}},
      {"left_shoulder", 13, {0.10, 0.04, -0.01}},
      {"right_shoulder", 14, {-0.10, 0.04, -0.01}},
      {"left_elbow", 16, {0.26, -0.01, -0.02}},
      {"right_elbow", 17, {-0.26, -0.01, -0.02}},
      {"left_wrist", 18, {0.25, 0.01, -0.01}},
      {"right_wrist", 19, {-0.25, 0.01, -0.01}},
      {"left_hand", 20, {0.08, -0.01, 0.0}},
      {"right_hand", 21, {-0.08, -0.01, 0.0}},
  });
}

}  // namespace diffik
