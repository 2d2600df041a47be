#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <stdexcept>
#include <string>

namespace diffik {

using Vec3 = Eigen::Vector3d;
// Rotations are stored row-major; serialized forms (JSON/CSV) list entries in
// that order.
using RotationMatrix = Eigen::Matrix<double, 3, 3, Eigen::RowMajor>;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

inline constexpr int kRootParent = -1;

// Base of every error thrown by this library. `code` is a stable machine
// readable tag; the CLI maps it to an exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& what)
      : std::runtime_error(what), code_(std::move(code)) {}
  const std::string& code() const { return code_; }

 private:
  std::string code_;
};

#define DIFFIK_DEFINE_ERROR(Name)                              \
  class Name : public Error {                                  \
   public:                                                     \
    explicit Name(const std::string& what) : Error(#Name, what) {} \
  }

DIFFIK_DEFINE_ERROR(InvalidAxis);
DIFFIK_DEFINE_ERROR(NoTwistAxis);
DIFFIK_DEFINE_ERROR(ShapeMismatch);
DIFFIK_DEFINE_ERROR(DegenerateProcrustes);
DIFFIK_DEFINE_ERROR(InvalidStep);
DIFFIK_DEFINE_ERROR(NumericalError);
DIFFIK_DEFINE_ERROR(NotConverged);
DIFFIK_DEFINE_ERROR(TraceMismatch);
DIFFIK_DEFINE_ERROR(DegenerateBone);
DIFFIK_DEFINE_ERROR(ParseError);

#undef DIFFIK_DEFINE_ERROR

inline Eigen::Matrix3d skew(const Vec3& v) {
  Eigen::Matrix3d s;
  s << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return s;
}

inline bool is_rotation(const RotationMatrix& r, double tol = 1e-9) {
  const double ortho = (r.transpose() * r - RotationMatrix::Identity()).norm();
  return ortho <= tol && std::abs(r.determinant() - 1.0) <= tol;
}

/// Deterministic unit vector perpendicular to `v` (any nonzero input).
inline Vec3 any_perpendicular(const Vec3& v) {
  const Vec3 ref = std::abs(v.x()) < 0.9 * v.norm() ? Vec3::UnitX() : Vec3::UnitY();
  return v.cross(ref).normalized();
}

/// Max over entries of |a-b| / max(|a|,|b|), restricted to entries where
/// max(|a|,|b|) > magnitude_floor. Returns 0 when no entry qualifies.
inline double max_relative_error(const MatX& a, const MatX& b,
                                 double magnitude_floor = 1e-8) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeMismatch("max_relative_error: shape mismatch");
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      const double m = std::max(std::abs(a(i, j)), std::abs(b(i, j)));
      if (m > magnitude_floor)
        worst = std::max(worst, std::abs(a(i, j) - b(i, j)) / m);
    }
  }
  return worst;
}

}  // namespace diffik
