#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "diffik/gn_solver.hpp"
#include "testutil.hpp"

using namespace diffik;

namespace {

JointTargets recovery_targets(const KinematicTree& tree, const SwingTwistPose& truth,
                              const Vec3& root_pos) {
  return JointTargets::from_positions(forward_kinematics(tree, truth, root_pos));
}

SwingTwistPose start_pose(const KinematicTree& tree, const SwingTwistPose& truth,
                          const JointTargets& targets) {
  SwingTwistPose pose0 = SwingTwistPose::rest(tree);
  pose0.swing_axis = truth.swing_axis;
  pose0.twist_angle = truth.twist_angle;
  const auto& kids = tree.children(tree.root());
  pose0.root_rotation = solve_root_rotation(tree, targets, {kids[0], kids[1], kids[2]});
  return pose0;
}

}  // namespace

TEST_CASE("residual is zero at the targets and reports the stacked norm") {
  const KinematicTree tree = KinematicTree::smpl24();
  std::mt19937_64 rng(31);
  const SwingTwistPose pose = testutil::random_pose(tree, rng);
  JointTargets targets = testutil::targets_from(tree, pose, Vec3(0.1, 0, 0));
  auto [vecs, norm] = residual(tree, pose, targets);
  CHECK(norm < 1e-14);
  for (const Vec3& v : vecs) CHECK(v.norm() < 1e-14);

  targets.position[5] += Vec3(0.3, 0, 0);
  auto [vecs2, norm2] = residual(tree, pose, targets);
  CHECK(norm2 == Catch::Approx(0.3).epsilon(1e-12));

  // Random targets: the norm equals an independently recomputed one.
  std::normal_distribution<double> gauss(0.0, 0.05);
  for (auto& p : targets.position) p += Vec3(gauss(rng), gauss(rng), gauss(rng));
  auto [vecs3, norm3] = residual(tree, pose, targets);
  double acc = 0.0;
  for (const Vec3& v : vecs3) acc += v.x() * v.x() + v.y() * v.y() + v.z() * v.z();
  CHECK(norm3 == Catch::Approx(std::sqrt(acc)).epsilon(1e-12));
}

TEST_CASE("residual weights by confidence") {
  const KinematicTree tree = KinematicTree::smpl24();
  const SwingTwistPose pose = SwingTwistPose::rest(tree);
  JointTargets targets = testutil::targets_from(tree, pose, Vec3::Zero());
  targets.position[7] += Vec3(0, 0.4, 0);
  targets.confidence[7] = 0.5;
  auto [vecs, norm] = residual(tree, pose, targets);
  CHECK(norm == Catch::Approx(0.2).epsilon(1e-12));
}

TEST_CASE("gn_direction solves the damped normal equations") {
  std::mt19937_64 rng(32);
  std::normal_distribution<double> gauss(0.0, 1.0);

  FKJacobian scalar;
  scalar.matrix = MatX::Zero(3, 1);
  scalar.matrix(0, 0) = 2.0;
  VecX dp = VecX::Zero(3);
  CHECK(gn_direction(scalar, dp, 1e-4).cwiseAbs().maxCoeff() == 0.0);
  dp(0) = 0.7;
  const double expected = 2.0 * 0.7 / (4.0 + 1e-3);
  CHECK(gn_direction(scalar, dp, 1e-3)(0) == Catch::Approx(expected).epsilon(1e-12));

  // Independent oracle: QR factorization of the damped stacked system
  // [J; sqrt(sigma) I] x = [dp; 0].
  const double sigma = 1e-4;
  FKJacobian jac;
  jac.matrix = MatX::NullaryExpr(72, 18, [&](Eigen::Index, Eigen::Index) {
    return gauss(rng);
  });
  VecX rhs = VecX::NullaryExpr(72, [&](Eigen::Index) { return gauss(rng); });
  MatX stacked(72 + 18, 18);
  stacked.topRows(72) = jac.matrix;
  stacked.bottomRows(18) = std::sqrt(sigma) * MatX::Identity(18, 18);
  VecX stacked_rhs = VecX::Zero(72 + 18);
  stacked_rhs.head(72) = rhs;
  const VecX oracle = stacked.colPivHouseholderQr().solve(stacked_rhs);
  CHECK((gn_direction(jac, rhs, sigma) - oracle).cwiseAbs().maxCoeff() < 1e-10);

  rhs(0) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(gn_direction(jac, rhs, sigma), NumericalError);
}

TEST_CASE("direction norm decreases monotonically with damping") {
  std::mt19937_64 rng(33);
  std::normal_distribution<double> gauss(0.0, 1.0);
  FKJacobian jac;
  jac.matrix = MatX::NullaryExpr(30, 8, [&](Eigen::Index, Eigen::Index) {
    return gauss(rng);
  });
  const VecX rhs = VecX::NullaryExpr(30, [&](Eigen::Index) { return gauss(rng); });
  const double n1 = gn_direction(jac, rhs, 1e-4).norm();
  const double n2 = gn_direction(jac, rhs, 1.0).norm();
  const double n3 = gn_direction(jac, rhs, 1e4).norm();
  CHECK(n1 > n2);
  CHECK(n2 > n3);
}

TEST_CASE("gn_step is a no-op at an exact solution") {
  const KinematicTree tree = KinematicTree::smpl24();
  std::mt19937_64 rng(34);
  const SwingTwistPose truth = testutil::random_pose(tree, rng);
  JointTargets targets = recovery_targets(tree, truth, Vec3::Zero());
  SolverConfig cfg;
  cfg.refresh_axes_each_iter = false;
  auto [next, rec] = gn_step(tree, truth, targets, cfg);
  CHECK(rec.direction_norm < 1e-10);
  CHECK((next.swing_angle - truth.swing_angle).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("one Newton-like step lands near the closed-form angle") {
  KinematicTree chain = KinematicTree::from_joints({
      {"root", kRootParent, {0, 0, 0}},
      {"j", 0, {0, 0.3, 0}},
      {"tip", 1, {0, 0.3, 0}},
  });
  for (double theta : {0.05, 0.1, 0.2}) {
    SwingTwistPose truth = SwingTwistPose::rest(chain);
    truth.swing_axis[0] = Vec3::UnitX();
    truth.swing_angle[0] = theta;
    JointTargets targets = recovery_targets(chain, truth, Vec3::Zero());
    SwingTwistPose pose0 = truth;
    pose0.swing_angle.setZero();
    SolverConfig cfg;
    cfg.refresh_axes_each_iter = false;
    cfg.damping_sigma = 1e-12;
    auto [next, rec] = gn_step(chain, pose0, targets, cfg);
    CHECK(std::abs(next.swing_angle[0] - theta) < theta * theta);
  }
}

TEST_CASE("line search never increases the residual") {
  const KinematicTree tree = KinematicTree::smpl24();
  std::mt19937_64 rng(35);
  std::normal_distribution<double> gauss(0.0, 1.0);
  int checked = 0;
  for (int rep = 0; rep < 100; ++rep) {
    const SwingTwistPose truth = testutil::random_pose(tree, rng);
    JointTargets targets = recovery_targets(tree, truth, Vec3::Zero());
    for (auto& p : targets.position)
      p += 0.05 * Vec3(gauss(rng), gauss(rng), gauss(rng));
    SwingTwistPose pose = start_pose(tree, truth, targets);
    SolverConfig cfg;
    cfg.line_search = true;
    const double before = residual(tree, pose, targets).second;
    auto [next, rec] = gn_step(tree, pose, targets, cfg);
    CHECK(rec.residual_norm <= before + 1e-14);
    ++checked;
  }
  CHECK(checked == 100);
}

TEST_CASE("solve recovers noise-free instances") {
  const KinematicTree tree = KinematicTree::smpl24();
  int hits = 0;
  const int total = 30;
  for (int k = 0; k < total; ++k) {
    std::mt19937_64 rng(4000 + k);
    const SwingTwistPose truth = testutil::random_pose(tree, rng);
    std::uniform_real_distribution<double> pos(-0.5, 0.5);
    const Vec3 root(pos(rng), pos(rng), pos(rng));
    JointTargets targets = recovery_targets(tree, truth, root);
    SolverConfig cfg;
    cfg.max_iters = 10;
    auto [alpha, trace] = solve(tree, start_pose(tree, truth, targets), targets, cfg);
    if (trace.iterations.back().residual_norm < 1e-6) ++hits;
  }
  CHECK(hits >= 29);
}

TEST_CASE("solve stops immediately when already at the targets") {
  const KinematicTree tree = KinematicTree::smpl24();
  std::mt19937_64 rng(36);
  SwingTwistPose pose0 = testutil::random_pose(tree, rng);
  pose0.swing_angle.setZero();
  JointTargets targets = testutil::targets_from(tree, pose0, Vec3(0.2, 0.1, 0));
  SolverConfig cfg;
  cfg.refresh_axes_each_iter = false;
  auto [alpha, trace] = solve(tree, pose0, targets, cfg);
  CHECK(trace.converged);
  CHECK(trace.iterations_used == 1);
  CHECK(alpha.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("default budget caps the trace at five iterations") {
  const KinematicTree tree = KinematicTree::smpl24();
  std::mt19937_64 rng(37);
  const SwingTwistPose truth = testutil::random_pose(tree, rng);
  JointTargets targets = recovery_targets(tree, truth, Vec3::Zero());
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& p : targets.position) p += 0.02 * Vec3(gauss(rng), gauss(rng), gauss(rng));
  SolverConfig cfg;  // defaults: max_iters 5
  auto [alpha, trace] = solve(tree, start_pose(tree, truth, targets), targets, cfg);
  CHECK(trace.iterations_used <= 5);
  CHECK(static_cast<int>(trace.iterations.size()) == trace.iterations_used);
}

TEST_CASE("stationarity holds when the solver reports convergence") {
  const KinematicTree tree = KinematicTree::smpl24();
  for (int k = 0; k < 5; ++k) {
    std::mt19937_64 rng(5000 + k);
    const SwingTwistPose truth = testutil::random_pose(tree, rng);
    JointTargets targets = recovery_targets(tree, truth, Vec3::Zero());
    SolverConfig cfg;
    cfg.max_iters = 20;
    auto [alpha, trace] = solve(tree, start_pose(tree, truth, targets), targets, cfg);
    REQUIRE(trace.converged);
    const SwingTwistPose star = pose_at_solution(tree, trace, targets);
    FKJacobian jac = analytic_jacobian(tree, star);
    auto [vecs, norm] = residual(tree, star, targets);
    CHECK((jac.matrix.transpose() * stack_residual(vecs)).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("zero and random initializations reach matching residuals") {
  const KinematicTree tree = KinematicTree::smpl24();
  for (int k = 0; k < 5; ++k) {
    std::mt19937_64 rng(6000 + k);
    const SwingTwistPose truth = testutil::random_pose(tree, rng);
    JointTargets targets = recovery_targets(tree, truth, Vec3::Zero());
    const SwingTwistPose pose0 = start_pose(tree, truth, targets);
    SolverConfig cfg;
    cfg.max_iters = 20;
    auto zero = solve(tree, pose0, targets, cfg);
    std::uniform_real_distribution<double> unit(-1.0, 1.0);
    VecX init(tree.internal_count());
    for (int i = 0; i < tree.internal_count(); ++i) init[i] = unit(rng);
    cfg.init_alpha = init;
    auto random = solve(tree, pose0, targets, cfg);
    CHECK(zero.second.iterations.back().residual_norm < 1e-4);
    CHECK(random.second.iterations.back().residual_norm < 1e-4);
  }
}

TEST_CASE("line-search residual curves are non-increasing over 1000 instances") {
  const KinematicTree tree = KinematicTree::smpl24();
  std::normal_distribution<double> gauss(0.0, 1.0);
  int violations = 0;
  for (int k = 0; k < 1000; ++k) {
    std::mt19937_64 rng(20000 + k);
    const SwingTwistPose truth = testutil::random_pose(tree, rng);
    JointTargets targets = recovery_targets(tree, truth, Vec3::Zero());
    for (auto& p : targets.position)
      p += 0.02 * Vec3(gauss(rng), gauss(rng), gauss(rng));
    SolverConfig cfg;
    cfg.max_iters = 6;
    cfg.line_search = true;
    auto [alpha, trace] = solve(tree, start_pose(tree, truth, targets), targets, cfg);
    double prev = trace.initial_residual_norm;
    for (const IterationRecord& rec : trace.iterations) {
      if (rec.residual_norm > prev) ++violations;
      prev = rec.residual_norm;
    }
  }
  CHECK(violations == 0);
}

TEST_CASE("identical inputs produce bit-identical traces") {
  const KinematicTree tree = KinematicTree::smpl24();
  std::mt19937_64 rng(38);
  const SwingTwistPose truth = testutil::random_pose(tree, rng);
  JointTargets targets = recovery_targets(tree, truth, Vec3::Zero());
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& p : targets.position) p += 0.01 * Vec3(gauss(rng), gauss(rng), gauss(rng));
  const SwingTwistPose pose0 = start_pose(tree, truth, targets);
  SolverConfig cfg;
  cfg.line_search = true;
  auto a = solve(tree, pose0, targets, cfg);
  auto b = solve(tree, pose0, targets, cfg);
  REQUIRE(a.second.iterations.size() == b.second.iterations.size());
  CHECK(a.first == b.first);
  for (size_t k = 0; k < a.second.iterations.size(); ++k) {
    CHECK(a.second.iterations[k].alpha == b.second.iterations[k].alpha);
    CHECK(a.second.iterations[k].residual_norm == b.second.iterations[k].residual_norm);
    CHECK(a.second.iterations[k].eta_used == b.second.iterations[k].eta_used);
  }
}

TEST_CASE("config validation") {
  SolverConfig cfg;
  cfg.damping_sigma = 0.0;
  CHECK_THROWS_AS(cfg.validate(), ShapeMismatch);
  cfg = SolverConfig{};
  cfg.step_eta = 1.5;
  CHECK_THROWS_AS(cfg.validate(), ShapeMismatch);
  cfg = SolverConfig{};
  cfg.max_iters = 0;
  CHECK_THROWS_AS(cfg.validate(), ShapeMismatch);
}
