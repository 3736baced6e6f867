#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "collapse/types.hpp"

namespace collapse::cli {

/// Full-objective minimization by gradient descent on the profiled loss,
/// started from seeded Gaussian features. Used by the minimize campaign
/// and by verification drivers that need an optimizer-independent check.
struct MinimizeResult {
  Matrix<double> h;
  Matrix<double> w;
  double objective{0};
  double grad_norm{0};
  long iters{0};
  bool converged{false};
};

MinimizeResult minimize_plain(const ModelParams<double>& p,
                              std::uint64_t seed, double grad_tol = 1e-9,
                              long max_iters = 60000);

/// Least-squares slope of y against x; needs at least two points.
double line_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Runs one campaign. Returns the process exit code: 0 all checks passed,
/// 1 campaign assertion failed, 2 configuration error (in which case no
/// output files were created).
int run_command(const std::string& command, const std::string& config_path,
                const std::string& out_dir,
                const std::optional<std::uint64_t>& seed_override,
                bool strict);

/// argv front end: collapse-lab <command> --config <path> --out <dir>
/// [--seed N] [--strict].
int run(int argc, char** argv);

}  // namespace collapse::cli
