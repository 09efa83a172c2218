#include "cunet/grad_check.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "cunet/network.hpp"
#include "cunet/random.hpp"
#include "cunet/supervision.hpp"

namespace cunet {

GradCheckReport finite_diff_check(const ScalarFn& f, std::map<std::string, Tensor<double>>& params,
                                  double epsilon, double tol, std::size_t samples_per_group,
                                  std::uint64_t seed, const RegionFn& region,
                                  std::size_t max_step_reductions) {
  for (auto& [name, t] : params) t.zero_grad();
  std::map<std::string, std::vector<double>> analytic;
  {
    Tape<double> tape;
    Tensor<double> loss = f(&tape);
    tape.backward(loss);
    for (auto& [name, t] : params) {
      if (t.has_grad())
        analytic[name].assign(t.grad().begin(), t.grad().end());
      else
        analytic[name].assign(t.numel(), 0.0);
    }
  }

  const std::uint64_t base_region = region ? region() : 0;
  GradCheckReport report;
  std::mt19937_64 rng(seed);
  for (auto& [name, t] : params) {
    GradCheckGroup group;
    group.name = name;
    std::vector<std::size_t> coords(t.numel());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (coords.size() > samples_per_group) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(samples_per_group);
      std::sort(coords.begin(), coords.end());
    }
    for (std::size_t i : coords) {
      const double saved = t[i];
      double step = epsilon, fp = 0, fm = 0;
      for (std::size_t r = 0;; ++r) {
        t[i] = saved + step;
        fp = f(nullptr).item();
        const bool same_p = !region || region() == base_region;
        t[i] = saved - step;
        fm = f(nullptr).item();
        const bool same_m = !region || region() == base_region;
        t[i] = saved;
        if ((same_p && same_m) || r == max_step_reductions) break;
        if (r == 0) ++group.reduced_steps;
        step /= 10;
      }
      const double numeric = (fp - fm) / (2 * step);
      const double a = analytic[name][i];
      ++group.checked;
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        group.pass = false;
        group.max_rel_err = std::numeric_limits<double>::infinity();
        group.message = "non-finite value in " + name + "[" + std::to_string(i) + "]";
        break;
      }
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
      if (rel > group.max_rel_err) group.max_rel_err = rel;
      if (rel >= tol && group.pass) {
        group.pass = false;
        group.message = name + "[" + std::to_string(i) + "]: analytic " + std::to_string(a) +
                        ", numeric " + std::to_string(numeric);
      }
    }
    report.max_rel_err = std::max(report.max_rel_err, group.max_rel_err);
    report.pass = report.pass && group.pass;
    report.groups.push_back(std::move(group));
  }
  return report;
}

NetworkGradCheckReport grad_check_network(const NetworkGraph& g,
                                          const NetworkGradCheckOptions& opts) {
  const Shape in_shape{opts.batch, g.input_channels(), g.input_resolution(), g.input_resolution()};
  const Shape out_shape{opts.batch, g.output_channels(), g.output_resolution(),
                        g.output_resolution()};

  std::mt19937_64 rng(derive_seed(opts.seed, 0x6772616443ULL));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  // Default affine parameters map the exact zeros of a ReLU output onto the
  // next ReLU's kink, so every draw moves them to a generic point. Running
  // statistics are taken from the drawn input to keep activations at unit
  // scale.
  auto draw_store = [&] {
    ParameterStore<double> s = init_parameters<double>(g, opts.seed);
    for (const auto& p : g.params()) {
      Tensor<double>& t = s.params.at(p.name);
      switch (p.kind) {
        case ParamKind::ConvWeight: break;
        case ParamKind::ConvBias:
          for (auto& v : t.data()) v = 0.1 * normal(rng);
          break;
        case ParamKind::BnGamma:
          for (auto& v : t.data()) v = 0.5 + unit(rng);
          break;
        case ParamKind::BnBeta:
          for (auto& v : t.data()) v = 0.5 * normal(rng);
          break;
      }
    }
    return s;
  };

  NetworkGradCheckReport out;
  ParameterStore<double> store;
  Tensor<double> best_x;
  out.min_relu_input = -1;
  for (std::size_t attempt = 0; attempt < std::max<std::size_t>(1, opts.max_input_attempts);
       ++attempt) {
    ParameterStore<double> candidate = draw_store();
    Tensor<double> x(in_shape);
    for (auto& v : x.data()) v = normal(rng);
    set_bn_stats_from_batch(g, candidate, x);
    ForwardTrace<double> trace;
    ParameterStore<double> probe = candidate.cast<double>();
    forward<double>(g, probe, x, opts.mode, nullptr, &trace);
    ++out.input_attempts;
    if (trace.min_relu_input > out.min_relu_input) {
      out.min_relu_input = trace.min_relu_input;
      best_x = x;
      store = std::move(candidate);
    }
    if (out.min_relu_input >= opts.kink_margin) break;
  }

  Tensor<double> target(out_shape);
  for (auto& v : target.data()) v = unit(rng);

  ScalarFn loss = [&](Tape<double>* tape) {
    auto heads = forward(g, store, best_x, opts.mode, tape);
    return total_loss<double>(tape, heads, target);
  };
  RegionFn region = [&] {
    ForwardTrace<double> trace;
    trace.record_pattern = true;
    forward<double>(g, store, best_x, opts.mode, nullptr, &trace);
    return trace.pattern;
  };
  out.report = finite_diff_check(loss, store.params, opts.epsilon, opts.tol,
                                 opts.samples_per_group, derive_seed(opts.seed, 0x636f6f72ULL),
                                 region, opts.max_step_reductions);
  return out;
}

}  // namespace cunet
