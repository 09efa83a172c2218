#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "cunet/graph.hpp"
#include "cunet/ops.hpp"
#include "cunet/tape.hpp"
#include "cunet/tensor.hpp"

namespace cunet {

struct GradCheckGroup {
  std::string name;
  std::size_t checked = 0;
  double max_rel_err = 0;
  bool pass = true;
  std::string message;  // set on failure
  std::size_t reduced_steps = 0;  // coordinates whose step was shrunk
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  double max_rel_err = 0;
  bool pass = true;
};

// Scalar objective. Called with a tape for the analytic pass and with nullptr
// for every perturbed evaluation.
using ScalarFn = std::function<Tensor<double>(Tape<double>*)>;

// Fingerprint of the smooth piece of a piecewise-smooth objective at the
// current parameter values.
using RegionFn = std::function<std::uint64_t()>;

// Compares analytic gradients against central differences
// (f(θ+ε) − f(θ−ε)) / 2ε on up to `samples_per_group` random coordinates of
// every named parameter. rel_err = |a − n| / max(|a|, |n|, 1e-8).
// With `region`, a coordinate whose ±ε points leave the base region retries
// with ε/10, up to max_step_reductions times.
GradCheckReport finite_diff_check(const ScalarFn& f, std::map<std::string, Tensor<double>>& params,
                                  double epsilon = 1e-5, double tol = 1e-5,
                                  std::size_t samples_per_group = 20, std::uint64_t seed = 0,
                                  const RegionFn& region = {},
                                  std::size_t max_step_reductions = 6);

struct NetworkGradCheckOptions {
  // Within one region the loss is quadratic in any single parameter, so a
  // large step costs no truncation error and keeps round-off small.
  double epsilon = 1e-3;
  double tol = 1e-5;
  std::size_t samples_per_group = 20;
  std::size_t batch = 2;
  std::uint64_t seed = 0;
  // Batch statistics make every bias that feeds a normalization layer
  // gradient-free, so the whole-graph check runs on fixed statistics.
  ops::Mode mode = ops::Mode::Eval;
  double kink_margin = 1e-3;
  std::size_t max_input_attempts = 32;
  std::size_t max_step_reductions = 6;
};

struct NetworkGradCheckReport {
  GradCheckReport report;
  double min_relu_input = 0;  // of the input batch that was used
  std::size_t input_attempts = 0;
};

// Whole-graph check in binary64: random input and target, loss = mean MSE
// over all heads. Inputs are redrawn until every ReLU input is at least
// kink_margin away from zero, keeping the best draw if none qualifies; steps
// that would cross a ReLU or max-pool decision are shrunk.
NetworkGradCheckReport grad_check_network(const NetworkGraph& g,
                                          const NetworkGradCheckOptions& opts = {});

}  // namespace cunet
