// Command-line experiment harness for the differentiable IK layer.
//
// Subcommands: solve, convergence, gradcheck, bench, compare.
// Exit codes: 0 success, 2 input error, 3 numerical failure.

#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "diffik/harness.hpp"

namespace {

using namespace diffik;

struct CommonArgs {
  ExperimentSpec spec;
  std::string config_path;
  int iters = -1;
  double sigma = -1.0;
  bool line_search = false;
};

void add_common_flags(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--skeleton", args.spec.skeleton_path,
                  "Skeleton file (default: bundled 24-joint skeleton)");
  cmd->add_option("--seed", args.spec.seed, "Instance generator seed");
  cmd->add_option("--instances", args.spec.instance_count, "Number of instances");
  cmd->add_option("--noise", args.spec.noise_sigma, "Target noise sigma, meters");
  cmd->add_option("--perturb", args.spec.bone_length_perturbation,
                  "Per-bone length perturbation fraction");
  cmd->add_option("--iters", args.iters, "Solver iteration budget")
      ->check(CLI::PositiveNumber);
  cmd->add_option("--sigma", args.sigma, "Gauss-Newton damping")
      ->check(CLI::PositiveNumber);
  cmd->add_flag("--line-search", args.line_search, "Enable backtracking line search");
  cmd->add_option("--config", args.config_path, "Solver config document (JSON)");
  cmd->add_option("--out", args.spec.out_path, "Output path for the report");
  cmd->add_option("--format", args.spec.format, "Report format: doc (JSON) or csv")
      ->check(CLI::IsMember({"doc", "csv"}));
}

void finalize_spec(CommonArgs& args, const std::string& kind) {
  args.spec.kind = kind;
  if (!args.config_path.empty())
    args.spec.solver = load_solver_config(args.config_path);
  if (args.iters > 0) args.spec.solver.max_iters = args.iters;
  if (args.sigma > 0) args.spec.solver.damping_sigma = args.sigma;
  if (args.line_search) args.spec.solver.line_search = true;
  args.spec.validate();
}

void emit_report(const ExperimentSpec& spec, const Report& report) {
  if (spec.out_path.empty()) {
    if (spec.format == "csv")
      std::cout << report.csv;
    else
      std::cout << report.doc.dump(2) << '\n';
    return;
  }
  if (spec.format == "csv")
    write_text_file(spec.out_path, report.csv);
  else
    write_text_file(spec.out_path, report.doc.dump(2) + "\n");
  std::cerr << "wrote " << spec.out_path << '\n';
}

int exit_code_for(const Error& e) {
  const std::string& code = e.code();
  if (code == "ParseError" || code == "ShapeMismatch" || code == "InvalidAxis" ||
      code == "InvalidStep")
    return 2;
  return 3;  // NumericalError, NotConverged, Degenerate*, TraceMismatch
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Differentiable inverse kinematics on articulated trees"};
  app.require_subcommand(1);

  CommonArgs solve_args, conv_args, grad_args, bench_args, compare_args;
  std::string targets_path, dump_jacobian, dump_gradients;

  CLI::App* solve_cmd =
      app.add_subcommand("solve", "Fit swing angles to target joint positions");
  add_common_flags(solve_cmd, solve_args);
  solve_cmd->add_option("--targets", targets_path,
                        "Targets document; omit to solve generated instances");
  solve_cmd->add_option("--dump-jacobian", dump_jacobian,
                        "Write the Jacobian at the first solution as CSV");

  CLI::App* conv_cmd = app.add_subcommand(
      "convergence", "Residual-per-iteration study, zero vs random init");
  add_common_flags(conv_cmd, conv_args);

  CLI::App* grad_cmd = app.add_subcommand(
      "gradcheck", "Unrolled gradients vs finite differences and implicit");
  add_common_flags(grad_cmd, grad_args);
  grad_cmd->add_option("--dump-gradients", dump_gradients,
                       "Write the first instance's gradient matrices as CSV");

  CLI::App* bench_cmd =
      app.add_subcommand("bench", "Wall-clock cost of forward and backward passes");
  add_common_flags(bench_cmd, bench_args);

  CLI::App* compare_cmd = app.add_subcommand(
      "compare", "Iterative solve vs analytical IK under bone perturbation");
  add_common_flags(compare_cmd, compare_args);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    if (solve_cmd->parsed()) {
      finalize_spec(solve_args, "solve");
      const KinematicTree tree = load_tree_for(solve_args.spec);
      Report report;
      std::vector<JointTargets> frames;
      if (!targets_path.empty()) {
        frames = load_targets(targets_path, tree.joint_count());
        for (const JointTargets& f : frames) f.validate(tree);
        report = run_solve(tree, solve_args.spec, &frames);
      } else {
        report = run_solve(tree, solve_args.spec);
      }
      if (!dump_jacobian.empty()) {
        const JointTargets targets =
            frames.empty()
                ? generate_instances(tree, solve_args.spec).front().targets
                : frames.front();
        SwingTwistPose pose0 = SwingTwistPose::rest(tree);
        pose0.root_rotation = root_rotation_for(tree, targets);
        auto [alpha, trace] = solve(tree, pose0, targets, solve_args.spec.solver);
        std::ostringstream csv;
        write_jacobian_csv(csv, tree,
                           analytic_jacobian(tree, pose_at_solution(tree, trace, targets)));
        write_text_file(dump_jacobian, csv.str());
      }
      emit_report(solve_args.spec, report);
    } else if (conv_cmd->parsed()) {
      finalize_spec(conv_args, "convergence");
      const KinematicTree tree = load_tree_for(conv_args.spec);
      emit_report(conv_args.spec, run_convergence(tree, conv_args.spec));
    } else if (grad_cmd->parsed()) {
      finalize_spec(grad_args, "gradcheck");
      const KinematicTree tree = load_tree_for(grad_args.spec);
      emit_report(grad_args.spec, run_gradcheck(tree, grad_args.spec));
      if (!dump_gradients.empty()) {
        SolverConfig budget = grad_args.spec.solver;
        budget.residual_tol = 0.0;
        budget.direction_tol = 0.0;
        const Instance inst = generate_instances(tree, grad_args.spec).front();
        auto [alpha, trace] = solve(tree, inst.pose0, inst.targets, budget);
        std::ostringstream csv;
        write_gradients_csv(csv, tree,
                            unrolled_gradients(tree, trace, inst.targets, budget));
        write_text_file(dump_gradients, csv.str());
      }
    } else if (bench_cmd->parsed()) {
      finalize_spec(bench_args, "bench");
      const KinematicTree tree = load_tree_for(bench_args.spec);
      emit_report(bench_args.spec, run_bench(tree, bench_args.spec));
    } else if (compare_cmd->parsed()) {
      finalize_spec(compare_args, "compare");
      const KinematicTree tree = load_tree_for(compare_args.spec);
      emit_report(compare_args.spec, run_compare_baselines(tree, compare_args.spec));
    }
  } catch (const Error& e) {
    std::cerr << Json{{"error", e.code()}, {"message", e.what()}}.dump() << '\n';
    return exit_code_for(e);
  } catch (const std::exception& e) {
    std::cerr << Json{{"error", "Unexpected"}, {"message", e.what()}}.dump() << '\n';
    return 3;
  }
  return 0;
}
