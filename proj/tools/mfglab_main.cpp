#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <sstream>

#include "mfglab/mfglab.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitTestFail = 1;
constexpr int kExitUsage = 2;
constexpr int kExitNoConvergence = 3;

namespace fs = std::filesystem;
using namespace mfglab;

struct CommonOpts {
  std::string out_dir = ".";
  int threads = 1;
  unsigned seed = 12345;
  double q = 0.0;  // 0: dimension default
};

fs::path ensure_out(const CommonOpts& o) {
  fs::path dir(o.out_dir);
  fs::create_directories(dir);
  return dir;
}

std::pair<P1Space, ThetaSchemeConfig> discretize(const ProblemConfig& cfg) {
  const P1Space space = make_p1_space(build_mesh(cfg.domain, cfg.cells));
  const int n_steps = cfg.time_steps > 0
                          ? cfg.time_steps
                          : std::max(1, static_cast<int>(std::lround(cfg.T / space.mesh.h_max)));
  return {space, ThetaSchemeConfig(cfg.theta, TimeGrid(cfg.T, n_steps))};
}

int cmd_solve(const std::string& file, const CommonOpts& opts, bool dump_mesh) {
  const ProblemConfig cfg = problem_config_from_json(read_json_file(file));
  const MfgProblem prob = build_problem(cfg);
  auto [space, scheme] = discretize(cfg);
  SolverConfig scfg = cfg.solver;
  if (opts.q > 0.0) scfg.q_norm = opts.q;

  const fs::path dir = ensure_out(opts);
  try {
    const MfgSolution sol = solve_coupled(prob, space, scheme, scfg);
    std::ostringstream ucsv, mcsv;
    write_field_csv(sol.u, ucsv);
    write_field_csv(sol.m, mcsv);
    atomic_write_text(dir / "u.csv", ucsv.str());
    atomic_write_text(dir / "m.csv", mcsv.str());
    atomic_write_text(dir / "report.json", pretty(to_json(sol.report)));
    if (dump_mesh) {
      std::ostringstream ms;
      write_mesh_text(space.mesh, ms);
      atomic_write_text(dir / "mesh.txt", ms.str());
    }
    std::cout << "converged in " << sol.report.outer_iterations
              << " outer iterations, residual " << sol.report.final_residual << "\n";
    return kExitOk;
  } catch (const SolveError& e) {
    atomic_write_text(dir / "report.json", pretty(to_json(e.report)));
    std::cerr << "solver did not converge: " << e.what() << "\n";
    return kExitNoConvergence;
  }
}

int cmd_converge(const std::string& file, const CommonOpts& opts) {
  const StudyConfig study = study_config_from_json(read_json_file(file));
  if (study.levels.size() < 3) {
    std::cerr << "converge: need >= 3 levels\n";
    return kExitUsage;
  }
  const MfgProblem prob = build_problem(study.problem);
  const double q = opts.q > 0.0 ? opts.q : (study.q > 0.0 ? study.q : default_q(prob.domain.dim));
  const TauRule rule = study.tau_rule == "h2" ? tau_equals_h2() : tau_equals_h();

  const fs::path dir = ensure_out(opts);
  try {
    const MfgConvergenceReport rep =
        run_mfg_convergence(prob, study.levels, q, rule, study.problem.solver, opts.threads);
    atomic_write_text(dir / "mfg_convergence.csv", to_csv(rep));
    atomic_write_text(dir / "mfg_convergence.json", pretty(to_json(rep)));
    std::cout << to_table(rep);
    return rep.baseline_pass && rep.quasi_optimal_pass ? kExitOk : kExitTestFail;
  } catch (const std::runtime_error& e) {
    std::cerr << e.what() << "\n";
    return kExitNoConvergence;
  }
}

int cmd_heat_bench(const CommonOpts& opts, const std::vector<int>& cells) {
  const double q = opts.q > 0.0 ? opts.q : 7.0;
  const auto entries = run_heat_suite(cells, q, 0.25, opts.threads);
  const fs::path dir = ensure_out(opts);
  bool pass = true;
  for (const auto& e : entries) {
    atomic_write_text(dir / (e.l2_rate.benchmark + "_l2rate.csv"), to_csv(e.l2_rate));
    atomic_write_text(dir / (e.w01q_rate.benchmark + "_w01qrate.csv"), to_csv(e.w01q_rate));
    std::cout << e.l2_rate.benchmark << ": eoc_L2=" << e.l2_rate.eoc_l2.back()
              << " (tau=h^2, theta=1), eoc_W01q=" << e.w01q_rate.eoc_w01q.back()
              << " (tau=h, theta=1/2) -> " << (e.l2_pass && e.w01q_pass ? "pass" : "FAIL")
              << "\n";
    pass = pass && e.l2_pass && e.w01q_pass;
  }
  return pass ? kExitOk : kExitTestFail;
}

int cmd_stability(const std::string& file, const CommonOpts& opts) {
  const ProblemConfig cfg = problem_config_from_json(read_json_file(file));
  const MfgProblem prob = build_problem(cfg);
  auto [space, scheme] = discretize(cfg);
  SolverConfig scfg = cfg.solver;
  if (opts.q > 0.0) scfg.q_norm = opts.q;
  try {
    const MfgSolution sol = solve_coupled(prob, space, scheme, scfg);
    const MarginEstimate margin =
        stability_margin(prob, space, scheme, scfg, sol.u, sol.m, 1.0, 500, opts.seed);
    json j = to_json(sol.report);
    j["stability_margin"] = margin.value;
    j["margin_converged"] = margin.converged;
    j["margin_iterations"] = margin.iterations;
    atomic_write_text(ensure_out(opts) / "stability.json", pretty(j));
    std::cout << "stability margin " << margin.value
              << (margin.converged ? "" : " (estimate, not converged)") << "\n";
    return margin.value > 0.0 ? kExitOk : kExitTestFail;
  } catch (const SolveError& e) {
    std::cerr << "solver did not converge: " << e.what() << "\n";
    return kExitNoConvergence;
  }
}

int cmd_jacobian_check(const std::string& file, const CommonOpts& opts, int n_dirs) {
  const ProblemConfig cfg = problem_config_from_json(read_json_file(file));
  const MfgProblem prob = build_problem(cfg);
  auto [space, scheme] = discretize(cfg);

  // Probe state: heat flow of m0 and one backward sweep, i.e. the solver's
  // own initial guess.
  SolverConfig scfg = cfg.solver;
  LoadProvider m_src = nullptr;
  if (prob.source_m)
    m_src = [&](int, double t) {
      return assemble_load(space, [&](Vec2 x) { return prob.source_m(t, x); }, 2);
    };
  const SpaceTimeField m =
      theta_solve_forward(space, scheme, l2_project(space, prob.initial_m).coeffs, m_src);
  const SpaceTimeField u = solve_hjb_backward(prob, space, scheme, scfg, m);

  const double err =
      jacobian_fd_max_error(prob, space, scheme, scfg, u, m, n_dirs, opts.seed);
  const RateThresholds thr;
  std::cout << "max relative Jacobian mismatch over " << n_dirs << " directions: " << err
            << " (tolerance " << thr.jacobian_fd_tol << ")\n";
  return err <= thr.jacobian_fd_tol ? kExitOk : kExitTestFail;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Finite element solver and verification lab for time-dependent "
               "mean field game systems"};
  app.require_subcommand(1);

  CommonOpts opts;
  app.add_option("--out", opts.out_dir, "Output directory for reports and CSV artifacts");
  app.add_option("--threads", opts.threads, "Worker cap for parallel mesh levels");
  app.add_option("--seed", opts.seed, "Seed for randomized suites");
  app.add_option("--q", opts.q, "Norm exponent override");

  std::string problem_file, study_file;
  bool dump_mesh = false;
  int n_dirs = 20;
  std::vector<int> heat_cells = {8, 16, 32, 64, 128};

  auto* solve = app.add_subcommand("solve", "Solve a coupled problem and dump fields");
  solve->add_option("problem", problem_file, "problem JSON file")->required();
  solve->add_flag("--dump-mesh", dump_mesh, "Also write the mesh as plain text");

  auto* converge = app.add_subcommand("converge", "Run a manufactured convergence study");
  converge->add_option("study", study_file, "study JSON file")->required();

  auto* heat = app.add_subcommand("heat-bench", "Closed-form heat benchmark battery");
  heat->add_option("--cells", heat_cells, "Mesh level cell counts");

  auto* stab = app.add_subcommand("stability", "Solve and estimate the stability margin");
  stab->add_option("problem", problem_file, "problem JSON file")->required();

  auto* jac = app.add_subcommand("jacobian-check",
                                 "Finite-difference test of the linearized operator");
  jac->add_option("problem", problem_file, "problem JSON file")->required();
  jac->add_option("--directions", n_dirs, "Number of random directions");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitUsage;
  }

  try {
    if (solve->parsed()) return cmd_solve(problem_file, opts, dump_mesh);
    if (converge->parsed()) return cmd_converge(study_file, opts);
    if (heat->parsed()) return cmd_heat_bench(opts, heat_cells);
    if (stab->parsed()) return cmd_stability(problem_file, opts);
    if (jac->parsed()) return cmd_jacobian_check(problem_file, opts, n_dirs);
  } catch (const mfglab::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::invalid_argument& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitTestFail;
  }
  return kExitUsage;
}
