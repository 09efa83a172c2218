#include "cli.hpp"

#include <CLI11.hpp>

#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>

#include "cunet/config.hpp"
#include "cunet/data.hpp"
#include "cunet/grad_check.hpp"
#include "cunet/graph.hpp"
#include "cunet/metrics.hpp"
#include "cunet/trainer.hpp"

namespace cunet::cli {
namespace {

// Raised by a command whose check ran and failed.
struct CheckFailed : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigFlags {
  std::string path;
  std::map<std::string, std::string> overrides;
};

std::string flag_for(std::string_view key) {
  std::string f = "--" + std::string(key);
  for (char& c : f)
    if (c == '_') c = '-';
  return f;
}

void add_config_flags(CLI::App* cmd, ConfigFlags& flags, const std::string& help) {
  cmd->add_option("--config", flags.path, help)->check(CLI::ExistingFile);
  for (std::string_view key : kConfigKeys)
    cmd->add_option(flag_for(key), flags.overrides[std::string(key)],
                    "override config key '" + std::string(key) + "'");
}

CUNetConfig resolve(const ConfigFlags& flags, const CUNetConfig& defaults) {
  KeyValues kv = flags.path.empty() ? defaults.to_key_values() : read_key_values(flags.path);
  for (const auto& [key, value] : flags.overrides)
    if (!value.empty()) kv[key] = value;
  CUNetConfig cfg = CUNetConfig::from_key_values(kv);
  cfg.validate();
  return cfg;
}

// Tiny network used by grad-check when no config is given.
CUNetConfig grad_check_defaults() {
  CUNetConfig c;
  c.unets = 2;
  c.m = 8;
  c.n = 4;
  c.depth = 2;
  c.keypoints = 4;
  c.input_res = 32;
  c.supervisions = 2;
  return c;
}

// Without --arch the config's coupling key decides between cu and stacked.
Arch arch_for(const std::string& flag, const CUNetConfig& cfg) {
  if (flag.empty()) return cfg.coupling ? Arch::Coupled : Arch::Stacked;
  return parse_arch(flag);
}

ModelSpec spec_for(const std::string& arch_flag, const CUNetConfig& cfg, std::ostream& out) {
  switch (arch_for(arch_flag, cfg)) {
    case Arch::Coupled: return ModelSpec::coupled(cfg);
    case Arch::Stacked: return ModelSpec::stacked(cfg);
    case Arch::Dense: break;
  }
  const CalibrationResult r = calibrate_dense(cfg, dense_template_from(cfg, 2, cfg.n));
  out << "# dense calibrated to " << r.achieved << " params (target " << r.target
      << ", rel. error " << r.relative_error << ")\n";
  return ModelSpec::dense_unet(r.config);
}

void print_spec(const ModelSpec& spec, std::ostream& out) {
  out << "# resolved config\n";
  if (spec.arch == Arch::Dense)
    out << format_config(spec.dense);
  else
    out << "arch = " << to_string(spec.arch) << "\n" << format_config(spec.cu);
  out << "#\n";
}

train::TrainOptions train_options(std::size_t epochs, std::size_t batch, bool no_augment,
                                  double val_fraction, double alpha, const std::string& ref,
                                  std::ostream& out) {
  train::TrainOptions o;
  o.epochs = epochs;
  o.batch = batch;
  o.augment = !no_augment;
  o.val_fraction = val_fraction;
  o.alpha = alpha;
  o.ref = metrics::parse_ref_rule(ref);
  o.progress = &out;
  return o;
}

void print_train_options(const train::TrainOptions& o, std::ostream& out) {
  out << "epochs = " << o.epochs << "\nbatch = " << o.batch
      << "\naugment = " << (o.augment ? "true" : "false") << "\nval_fraction = " << o.val_fraction
      << "\nalpha = " << o.alpha << "\nref = " << metrics::to_string(o.ref) << "\n";
  if (o.stop_at) out << "stop_at = " << *o.stop_at << "\n";
  out << "#\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Coupled U-Net toolkit: build, inspect, check, train and evaluate"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all");

  // count-params
  ConfigFlags cp_cfg;
  std::string cp_arch;
  auto* cp = app.add_subcommand("count-params", "print total and per-U-Net parameter counts");
  add_config_flags(cp, cp_cfg, "architecture config file");
  cp->add_option("--arch", cp_arch, "cu | stacked | dense (default: from the coupling key)")
      ->check(CLI::IsMember({"cu", "stacked", "dense"}));

  // inspect
  ConfigFlags in_cfg;
  std::string in_dot, in_arch;
  auto* in = app.add_subcommand("inspect", "write the layer graph as DOT");
  add_config_flags(in, in_cfg, "architecture config file");
  in->add_option("--dot", in_dot, "output DOT file")->required();
  in->add_option("--arch", in_arch, "cu | stacked | dense (default: from the coupling key)")
      ->check(CLI::IsMember({"cu", "stacked", "dense"}));

  // grad-check
  ConfigFlags gc_cfg;
  double gc_tol = 1e-5, gc_eps = NetworkGradCheckOptions{}.epsilon;
  std::size_t gc_samples = 20, gc_batch = 2;
  std::string gc_arch;
  auto* gc = app.add_subcommand("grad-check", "finite-difference check of the whole graph");
  add_config_flags(gc, gc_cfg, "architecture config file (default: m=8 n=4 depth=2 K=4 res=32 S=2)");
  gc->add_option("--tol", gc_tol, "relative error tolerance");
  gc->add_option("--eps", gc_eps, "central-difference step");
  gc->add_option("--samples", gc_samples, "coordinates per parameter tensor");
  gc->add_option("--batch", gc_batch, "input batch size");
  gc->add_option("--arch", gc_arch, "cu | stacked (default: from the coupling key)")->check(CLI::IsMember({"cu", "stacked"}));

  // gen-data
  std::string gd_out;
  std::size_t gd_count = 0, gd_res = 64;
  std::uint64_t gd_seed = 0;
  double gd_sigma = 0;
  auto* gd = app.add_subcommand("gen-data", "generate a synthetic keypoint dataset");
  gd->add_option("--out", gd_out, "output directory")->required();
  gd->add_option("--count", gd_count, "number of samples")->required();
  gd->add_option("--seed", gd_seed, "dataset seed");
  gd->add_option("--input-res", gd_res, "image side in pixels");
  gd->add_option("--sigma", gd_sigma, "heatmap Gaussian width (default input_res/64)");

  // train
  ConfigFlags tr_cfg;
  std::string tr_data, tr_out, tr_arch, tr_ref = "pckh";
  std::size_t tr_epochs = 30, tr_batch = 8;
  bool tr_no_aug = false;
  double tr_val = 0.2, tr_alpha = 0.5;
  auto* tr = app.add_subcommand("train", "train one network");
  add_config_flags(tr, tr_cfg, "architecture config file");
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--arch", tr_arch, "cu | stacked | dense (default: from the coupling key)")
      ->check(CLI::IsMember({"cu", "stacked", "dense"}));
  tr->add_option("--epochs", tr_epochs, "epochs");
  tr->add_option("--batch", tr_batch, "mini-batch size")->check(CLI::PositiveNumber);
  tr->add_flag("--no-augment", tr_no_aug, "disable on-the-fly augmentation");
  tr->add_option("--val-fraction", tr_val, "trailing share of samples held out");
  tr->add_option("--alpha", tr_alpha, "PCK threshold factor for validation");
  tr->add_option("--ref", tr_ref, "pckh | pck")->check(CLI::IsMember({"pckh", "pck"}));
  std::optional<double> tr_stop;
  tr->add_option("--stop-at", tr_stop, "stop after the first epoch reaching this val PCK");

  // eval
  std::string ev_ckpt, ev_data, ev_ref = "pckh", ev_split = "val", ev_out;
  double ev_alpha = 0.5, ev_val = 0.2;
  auto* ev = app.add_subcommand("eval", "PCK of a checkpoint on a dataset");
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "dataset directory")->required();
  ev->add_option("--alpha", ev_alpha, "threshold factor");
  ev->add_option("--ref", ev_ref, "pckh | pck")->check(CLI::IsMember({"pckh", "pck"}));
  ev->add_option("--split", ev_split, "val | all")->check(CLI::IsMember({"val", "all"}));
  ev->add_option("--val-fraction", ev_val, "trailing share used by --split val");
  ev->add_option("--out", ev_out, "metrics CSV file (also printed)");

  // compare
  ConfigFlags co_cfg;
  std::string co_data, co_out, co_ref = "pckh";
  std::size_t co_epochs = 15, co_batch = 8;
  bool co_no_aug = false;
  double co_val = 0.2, co_alpha = 0.5;
  auto* co = app.add_subcommand("compare", "train coupled, stacked and matched dense nets");
  add_config_flags(co, co_cfg, "architecture config file");
  co->add_option("--data", co_data, "dataset directory")->required();
  co->add_option("--out", co_out, "output directory")->required();
  co->add_option("--epochs", co_epochs, "epochs per architecture");
  co->add_option("--batch", co_batch, "mini-batch size")->check(CLI::PositiveNumber);
  co->add_flag("--no-augment", co_no_aug, "disable on-the-fly augmentation");
  co->add_option("--val-fraction", co_val, "trailing share of samples held out");
  co->add_option("--alpha", co_alpha, "PCK threshold factor");
  co->add_option("--ref", co_ref, "pckh | pck")->check(CLI::IsMember({"pckh", "pck"}));

  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (cp->parsed()) {
      const ModelSpec spec = spec_for(cp_arch, resolve(cp_cfg, {}), out);
      print_spec(spec, out);
      const NetworkGraph g = spec.build();
      out << "total: " << param_count(g) << "\n";
      out << "stem: " << param_count(g, "stem.") << "\n";
      const std::size_t unets = spec.arch == Arch::Dense ? 1 : spec.cu.unets;
      for (std::size_t u = 0; u < unets; ++u)
        out << "u" << u << ": " << param_count(g, "u" + std::to_string(u) + ".") << "\n";
      out << "heads: " << param_count(g, "head") << "\n";
    } else if (in->parsed()) {
      const ModelSpec spec = spec_for(in_arch, resolve(in_cfg, {}), out);
      print_spec(spec, out);
      const NetworkGraph g = spec.build();
      write_file_atomic(in_dot, to_dot(g));
      out << "nodes: " << g.nodes().size() << "\nedges: " << g.edges().size()
          << "\ncoupling_edges: " << g.coupling_edge_count() << "\nparams: " << param_count(g)
          << "\nwrote " << in_dot << "\n";
    } else if (gc->parsed()) {
      const CUNetConfig cfg = resolve(gc_cfg, grad_check_defaults());
      const ModelSpec spec = arch_for(gc_arch, cfg) == Arch::Stacked ? ModelSpec::stacked(cfg)
                                                                     : ModelSpec::coupled(cfg);
      print_spec(spec, out);
      out << "tol = " << gc_tol << "\neps = " << gc_eps << "\nsamples = " << gc_samples << "\n#\n";
      NetworkGradCheckOptions o;
      o.tol = gc_tol;
      o.epsilon = gc_eps;
      o.seed = cfg.seed;
      o.samples_per_group = gc_samples;
      o.batch = gc_batch;
      const auto r = grad_check_network(spec.build(), o);
      out << std::setprecision(3);
      for (const auto& grp : r.report.groups)
        out << (grp.pass ? "ok   " : "FAIL ") << grp.name << " checked=" << grp.checked
            << " max_rel_err=" << grp.max_rel_err << " reduced_steps=" << grp.reduced_steps << (grp.pass ? "" : "  " + grp.message) << "\n";
      out << "min_relu_input = " << r.min_relu_input << " (after " << r.input_attempts
          << " draws)\nmax_rel_err = " << r.report.max_rel_err << "\n";
      if (!r.report.pass) throw CheckFailed("gradient check failed");
      out << "gradient check passed\n";
    } else if (gd->parsed()) {
      data::Manifest m;
      m.seed = gd_seed;
      m.count = gd_count;
      m.input_res = gd_res;
      if (gd_res == 0 || gd_res % 4 != 0)
        throw ConfigError("--input-res must be a positive multiple of 4");
      m.sigma = gd_sigma > 0 ? gd_sigma : data::default_sigma(m.heatmap_res());
      out << "# resolved config\nseed = " << m.seed << "\ncount = " << m.count
          << "\ninput_res = " << m.input_res << "\nsigma = " << m.sigma << "\n#\n";
      data::write_dataset(gd_out, m);
      out << "wrote " << m.count << " samples to " << gd_out << "\n";
    } else if (tr->parsed()) {
      const ModelSpec spec = spec_for(tr_arch, resolve(tr_cfg, {}), out);
      auto opts = train_options(tr_epochs, tr_batch, tr_no_aug, tr_val, tr_alpha, tr_ref, out);
      opts.stop_at = tr_stop;
      print_spec(spec, out);
      print_train_options(opts, out);
      const auto split = train::split_dataset(data::read_dataset(tr_data), tr_val);
      out << "train samples = " << split.train.size() << ", val samples = " << split.val.size()
          << "\n" << train::log_header() << "\n";
      const auto r = train::train(spec, split, opts, tr_out);
      if (r.aborted) {
        err << r.message << "\n";
        return kRuntime;
      }
      out << "best val pck = " << r.state.best << "\nfinal val pck = " << r.final_val_pck << "\n";
    } else if (ev->parsed()) {
      const train::Checkpoint ckpt = train::load_checkpoint(ev_ckpt);
      print_spec(ckpt.spec, out);
      out << "alpha = " << ev_alpha << "\nref = " << ev_ref << "\nsplit = " << ev_split << "\n#\n";
      const NetworkGraph g = ckpt.spec.build();
      ParameterStore<float> store;
      train::apply_checkpoint(ckpt, g, store);
      auto samples = data::read_dataset(ev_data);
      if (ev_split == "val") samples = train::split_dataset(std::move(samples), ev_val).val;
      const auto r = train::evaluate(g, store, samples, ev_alpha, metrics::parse_ref_rule(ev_ref));
      const std::string csv = metrics::to_csv(r);
      if (!ev_out.empty()) write_file_atomic(ev_out, csv);
      out << csv;
      if (!r.excluded_samples.empty())
        out << "excluded " << r.excluded_samples.size() << " samples with zero reference length\n";
    } else if (co->parsed()) {
      const CUNetConfig cfg = resolve(co_cfg, {});
      const auto opts = train_options(co_epochs, co_batch, co_no_aug, co_val, co_alpha, co_ref, out);
      print_spec(ModelSpec::coupled(cfg), out);
      print_train_options(opts, out);
      const auto split = train::split_dataset(data::read_dataset(co_data), co_val);
      const auto r = train::compare(cfg, split, opts, co_out);
      out << train::compare_csv(r);
    }
  } catch (const CalibrationError& e) {
    err << "calibrate_dense failed: " << e.what() << " (closest " << e.closest().achieved
        << " params vs target " << e.closest().target << ")\n";
    return kCheckFailed;
  } catch (const CheckFailed& e) {
    err << e.what() << "\n";
    return kCheckFailed;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kOk;
}

}  // namespace cunet::cli
