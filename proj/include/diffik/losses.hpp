#pragma once

#include <vector>

#include "diffik/kinematics.hpp"
#include "diffik/types.hpp"

namespace diffik {

struct LossWeights {
  double w1 = 1.0;  // shape term
  double w2 = 1.0;  // twist term
  double w3 = 1.0;  // joint term
  double w4 = 1.0;  // optimization term in the total loss

  void validate() const {
    for (double w : {w1, w2, w3, w4})
      if (!(w >= 0.0) || !std::isfinite(w))
        throw ShapeMismatch("loss weights must be finite and non-negative");
  }
};

/// Quantities compared by the regression loss.
struct RegressionOutputs {
  VecX beta;
  VecX twist;
  std::vector<Vec3> joints;
};

/// w1 * |beta - beta_gt|_2^2 + w2 * |twist - twist_gt|_2^2
/// + w3 * |joints - joints_gt|_1. The l2 terms are squared norms.
inline double loss_reg(const RegressionOutputs& pred, const RegressionOutputs& gt,
                       const LossWeights& weights) {
  weights.validate();
  if (pred.beta.size() != gt.beta.size() || pred.twist.size() != gt.twist.size() ||
      pred.joints.size() != gt.joints.size())
    throw ShapeMismatch("loss_reg: prediction and ground truth shapes differ");
  double l1_joints = 0.0;
  for (size_t j = 0; j < pred.joints.size(); ++j)
    l1_joints += (pred.joints[j] - gt.joints[j]).cwiseAbs().sum();
  return weights.w1 * (pred.beta - gt.beta).squaredNorm() +
         weights.w2 * (pred.twist - gt.twist).squaredNorm() + weights.w3 * l1_joints;
}

/// Entrywise l1 distance between the swing rotations built from (axes, alpha)
/// and the ground-truth rotations, summed over joints.
inline double loss_opt(const VecX& alpha, const std::vector<Vec3>& axes,
                       const std::vector<RotationMatrix>& r_gt) {
  if (alpha.size() != static_cast<Eigen::Index>(axes.size()) ||
      axes.size() != r_gt.size())
    throw ShapeMismatch("loss_opt: mismatched joint sets");
  double total = 0.0;
  for (size_t i = 0; i < axes.size(); ++i)
    total += (rodrigues(axes[i], alpha[i]) - r_gt[i]).cwiseAbs().sum();
  return total;
}

/// Gradient of loss_opt with respect to alpha. Defined where no matrix entry
/// difference sits exactly at zero.
inline VecX loss_opt_grad_alpha(const VecX& alpha, const std::vector<Vec3>& axes,
                                const std::vector<RotationMatrix>& r_gt) {
  if (alpha.size() != static_cast<Eigen::Index>(axes.size()) ||
      axes.size() != r_gt.size())
    throw ShapeMismatch("loss_opt_grad_alpha: mismatched joint sets");
  VecX grad = VecX::Zero(alpha.size());
  for (size_t i = 0; i < axes.size(); ++i) {
    const RotationMatrix rot = rodrigues(axes[i], alpha[i]);
    const Eigen::Matrix3d drot = skew(axes[i]) * rot;  // d/dalpha of rodrigues
    const Eigen::Matrix3d diff = rot - r_gt[i];
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        grad[static_cast<Eigen::Index>(i)] +=
            (diff(a, b) > 0 ? 1.0 : (diff(a, b) < 0 ? -1.0 : 0.0)) * drot(a, b);
  }
  return grad;
}

inline double loss_total(double reg, double opt, double w4) {
  if (!std::isfinite(reg) || !std::isfinite(opt) || !std::isfinite(w4))
    throw ShapeMismatch("loss_total: non-finite input");
  return reg + w4 * opt;
}

}  // namespace diffik
