#include "cunet/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <sstream>

#include "cunet/config.hpp"
#include "cunet/random.hpp"
#include "cunet/supervision.hpp"

namespace cunet::train {

template <typename T>
bool rmsprop_step(std::span<T> param, std::span<const T> grad, std::span<T> s, double lr,
                  double alpha, double eps) {
  if (param.size() != grad.size() || param.size() != s.size())
    throw ShapeError("rmsprop_step: parameter, gradient and state sizes differ");
  if (!(lr > 0)) throw std::invalid_argument("rmsprop_step: lr must be positive");
  for (T g : grad)
    if (!std::isfinite(g)) return false;
  const T a = static_cast<T>(alpha), b = static_cast<T>(1.0 - alpha);
  const T l = static_cast<T>(lr), e = static_cast<T>(eps);
  for (std::size_t i = 0; i < param.size(); ++i) {
    s[i] = a * s[i] + b * grad[i] * grad[i];
    param[i] -= l * grad[i] / (std::sqrt(s[i]) + e);
  }
  return true;
}

template bool rmsprop_step<float>(std::span<float>, std::span<const float>, std::span<float>,
                                  double, double, double);
template bool rmsprop_step<double>(std::span<double>, std::span<const double>, std::span<double>,
                                   double, double, double);

TrainState lr_schedule(TrainState state, double val_metric, const Schedule& schedule) {
  if (!std::isfinite(val_metric)) throw std::invalid_argument("lr_schedule: metric not finite");
  if (val_metric > state.best + schedule.min_improvement) {
    state.best = val_metric;
    state.since_best = 0;
  } else {
    ++state.since_best;
  }
  if (!state.decayed && state.since_best >= schedule.patience) {
    state.lr = schedule.decayed_lr;
    state.decayed = true;
  }
  return state;
}

std::string log_header() { return "epoch,train_loss,val_pck,lr,seconds"; }

std::string log_row(const EpochLog& e) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%zu,%.9g,%.6f,%.9g,%.3f", e.epoch, e.train_loss, e.val_pck,
                e.lr, e.seconds);
  return buf;
}

Split split_dataset(std::vector<data::Sample> samples, double val_fraction) {
  if (!(val_fraction >= 0 && val_fraction < 1))
    throw std::invalid_argument("val_fraction must be in [0, 1)");
  const auto n_val = static_cast<std::size_t>(
      std::llround(val_fraction * static_cast<double>(samples.size())));
  Split s;
  const auto cut = samples.begin() + static_cast<std::ptrdiff_t>(samples.size() - n_val);
  s.train.assign(std::make_move_iterator(samples.begin()), std::make_move_iterator(cut));
  s.val.assign(std::make_move_iterator(cut), std::make_move_iterator(samples.end()));
  return s;
}

void make_batch(std::span<const data::Sample* const> samples, std::size_t in_channels,
                Tensor<float>& x, Tensor<float>& target) {
  if (samples.empty()) throw std::invalid_argument("make_batch: empty batch");
  const Shape img = samples.front()->image.shape();
  const Shape hm = samples.front()->heatmaps.shape();
  const std::size_t src_c = img[0], plane = img[1] * img[2];
  if (src_c != 1 && src_c != in_channels)
    throw ShapeError("make_batch: image has " + std::to_string(src_c) + " channels, network takes " +
                     std::to_string(in_channels));
  x = Tensor<float>(Shape{samples.size(), in_channels, img[1], img[2]});
  target = Tensor<float>(Shape{samples.size(), hm[0], hm[1], hm[2]});
  const std::size_t hm_n = shape_numel(hm);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const data::Sample& s = *samples[i];
    if (s.image.shape() != img || s.heatmaps.shape() != hm)
      throw ShapeError("make_batch: sample " + std::to_string(i) + " shape differs from sample 0");
    for (std::size_t c = 0; c < in_channels; ++c)
      std::copy_n(s.image.ptr() + (src_c == 1 ? 0 : c * plane), plane,
                  x.ptr() + (i * in_channels + c) * plane);
    std::copy_n(s.heatmaps.ptr(), hm_n, target.ptr() + i * hm_n);
  }
}

metrics::EvalResult evaluate(const NetworkGraph& g, ParameterStore<float>& store,
                             const std::vector<data::Sample>& samples, double alpha,
                             metrics::RefRule ref, std::size_t batch) {
  metrics::Keypoints pred;
  std::vector<data::Pose> gt;
  pred.reserve(samples.size());
  gt.reserve(samples.size());
  const std::size_t res = g.input_resolution(), R = g.output_resolution();
  Tensor<float> x, target;
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const std::size_t end = std::min(samples.size(), start + batch);
    std::vector<const data::Sample*> ptrs;
    for (std::size_t i = start; i < end; ++i) {
      ptrs.push_back(&samples[i]);
      gt.push_back(data::to_heatmap_coords(samples[i].pose, res, R));
    }
    make_batch(ptrs, g.input_channels(), x, target);
    const auto heads = forward(g, store, x, ops::Mode::Eval);
    auto decoded = metrics::decode_keypoints(heads.back());
    for (auto& k : decoded) pred.push_back(std::move(k));
  }
  return metrics::pck(pred, gt, alpha, ref);
}

namespace {

void check_compatible(const NetworkGraph& g, const Split& data) {
  for (const auto* set : {&data.train, &data.val})
    for (const auto& s : *set) {
      if (s.image.dim(1) != g.input_resolution() || s.image.dim(2) != g.input_resolution())
        throw ShapeError("dataset input_res " + std::to_string(s.image.dim(1)) +
                         " does not match network input_res " +
                         std::to_string(g.input_resolution()));
      if (s.heatmaps.dim(0) != g.output_channels() || s.heatmaps.dim(1) != g.output_resolution())
        throw ShapeError("dataset heatmaps " + shape_str(s.heatmaps.shape()) +
                         " do not match network output " + std::to_string(g.output_channels()) +
                         "x" + std::to_string(g.output_resolution()));
      return;
    }
}

}  // namespace

TrainResult train(const ModelSpec& spec, const Split& data, const TrainOptions& opts,
                  const std::filesystem::path& out_dir) {
  if (opts.batch == 0) throw std::invalid_argument("batch size must be positive");
  const NetworkGraph g = spec.build();
  check_compatible(g, data);
  ParameterStore<float> store = init_parameters<float>(g, spec.seed());
  RMSPropState opt;
  for (const auto& [name, t] : store.params) opt.s[name].assign(t.numel(), 0.0f);

  TrainResult result;
  result.state.seed = spec.seed();
  result.state.lr = opts.schedule.initial_lr;

  const bool write = !out_dir.empty();
  const auto ckpt = out_dir / "checkpoint.bin";
  std::string log_text = log_header() + "\n";
  if (write) {
    std::filesystem::create_directories(out_dir);
    save_checkpoint(ckpt, spec, result.state, store, opt);
    write_file_atomic(out_dir / "log.csv", log_text);
  }

  std::vector<std::size_t> order(data.train.size());
  for (std::size_t epoch = 1; epoch <= opts.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 shuffle_rng(derive_seed(spec.seed(), 0x73687566ULL, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0;
    std::size_t loss_count = 0;
    Tensor<float> x, target;
    for (std::size_t start = 0; start < order.size(); start += opts.batch) {
      const std::size_t end = std::min(order.size(), start + opts.batch);
      std::vector<data::Sample> augmented;
      std::vector<const data::Sample*> ptrs;
      if (opts.augment) {
        augmented.reserve(end - start);
        for (std::size_t i = start; i < end; ++i)
          augmented.push_back(data::augment(
              data.train[order[i]], derive_seed(spec.seed(), 0x61756721ULL ^ epoch, order[i])));
        for (const auto& s : augmented) ptrs.push_back(&s);
      } else {
        for (std::size_t i = start; i < end; ++i) ptrs.push_back(&data.train[order[i]]);
      }
      make_batch(ptrs, g.input_channels(), x, target);

      Tape<float> tape;
      const auto heads = forward(g, store, x, ops::Mode::Train, &tape);
      Tensor<float> loss = total_loss<float>(&tape, heads, target);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        result.aborted = true;
        result.message = "non-finite loss at epoch " + std::to_string(epoch) + "; kept last checkpoint";
        return result;
      }
      tape.backward(loss);

      bool finite = true;
      for (auto& [name, t] : store.params)
        if (t.has_grad())
          for (float v : t.grad())
            if (!std::isfinite(v)) finite = false;
      if (finite) {
        for (auto& [name, t] : store.params) {
          if (!t.has_grad()) continue;
          rmsprop_step<float>(t.data(), t.grad(), opt.s.at(name), result.state.lr, opt.alpha,
                              opt.eps);
        }
      } else {
        ++result.skipped_steps;
        if (opts.progress)
          *opts.progress << "epoch " << epoch << ": skipped step with non-finite gradient\n";
      }
      for (auto& [name, t] : store.params) t.clear_grad();
      loss_sum += lv * static_cast<double>(end - start);
      loss_count += end - start;
    }

    const double val = data.val.empty()
                           ? 0.0
                           : evaluate(g, store, data.val, opts.alpha, opts.ref).aggregate();
    const double before = result.state.best;
    result.state = lr_schedule(result.state, val, opts.schedule);
    result.state.epoch = epoch;
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    EpochLog row{epoch, loss_count ? loss_sum / static_cast<double>(loss_count) : 0.0, val,
                 result.state.lr, secs};
    result.log.push_back(row);
    result.final_val_pck = val;
    log_text += log_row(row) + "\n";
    if (opts.progress) *opts.progress << log_row(row) << std::endl;
    if (write) {
      if (result.state.best > before) save_checkpoint(ckpt, spec, result.state, store, opt);
      write_file_atomic(out_dir / "log.csv", log_text);
    }
    if (opts.stop_at && val >= *opts.stop_at) {
      result.stopped_early = epoch < opts.epochs;
      break;
    }
  }
  return result;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kCkptMagic[4] = {'C', 'U', 'N', 'C'};
constexpr std::uint32_t kCkptVersion = 1;

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

template <typename V>
V get(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(V) > bytes.size()) throw CheckpointError("checkpoint truncated");
  V v;
  std::memcpy(&v, bytes.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

void put_array(std::string& out, const std::string& name, const Shape& shape,
               std::span<const float> values) {
  put(out, static_cast<std::uint32_t>(name.size()));
  out += name;
  put(out, static_cast<std::uint32_t>(shape.size()));
  for (auto d : shape) put(out, static_cast<std::uint64_t>(d));
  const auto* p = reinterpret_cast<const char*>(values.data());
  out.append(p, values.size() * sizeof(float));
}

std::string exact(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_exact(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw CheckpointError("checkpoint: missing key " + key);
  char* end = nullptr;
  const double v = std::strtod(it->second.c_str(), &end);
  if (end == it->second.c_str() || *end != '\0')
    throw CheckpointError("checkpoint: bad value for " + key);
  return v;
}

const std::string kParam = "param/", kMean = "bn_mean/", kVar = "bn_var/", kOpt = "rms/";

bool starts_with(const std::string& s, const std::string& p) { return s.rfind(p, 0) == 0; }

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const TrainState& state, const ParameterStore<float>& store,
                     const RMSPropState& optimizer) {
  KeyValues kv = spec.to_key_values();
  kv["state.epoch"] = std::to_string(state.epoch);
  kv["state.lr"] = exact(state.lr);
  kv["state.since_best"] = std::to_string(state.since_best);
  kv["state.best"] = exact(state.best);
  kv["state.seed"] = std::to_string(state.seed);
  kv["state.decayed"] = state.decayed ? "true" : "false";
  kv["opt.alpha"] = exact(optimizer.alpha);
  kv["opt.eps"] = exact(optimizer.eps);
  const std::string text = format_key_values(kv);

  std::string arrays;
  std::uint64_t count = 0;
  for (const auto& [name, t] : store.params) {
    put_array(arrays, kParam + name, t.shape(), t.data());
    ++count;
  }
  for (const auto& [name, st] : store.bn_stats) {
    put_array(arrays, kMean + name, {st.mean.size()}, st.mean);
    put_array(arrays, kVar + name, {st.var.size()}, st.var);
    count += 2;
  }
  for (const auto& [name, s] : optimizer.s) {
    put_array(arrays, kOpt + name, {s.size()}, s);
    ++count;
  }

  std::string out(kCkptMagic, 4);
  put(out, kCkptVersion);
  put(out, static_cast<std::uint64_t>(text.size()));
  out += text;
  put(out, count);
  out += arrays;
  write_file_atomic(path, out);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string bytes = ss.str();
  std::string_view view(bytes);

  if (view.size() < 4 || std::memcmp(view.data(), kCkptMagic, 4) != 0)
    throw CheckpointError("checkpoint: bad magic in " + path.string());
  std::size_t pos = 4;
  const auto version = get<std::uint32_t>(view, pos);
  if (version != kCkptVersion)
    throw CheckpointError("checkpoint: unsupported version " + std::to_string(version));
  const auto text_len = get<std::uint64_t>(view, pos);
  if (pos + text_len > view.size()) throw CheckpointError("checkpoint truncated");
  KeyValues kv = parse_key_values(view.substr(pos, text_len));
  pos += text_len;

  Checkpoint c;
  c.state.epoch = kv_size(kv, "state.epoch");
  c.state.lr = parse_exact(kv, "state.lr");
  c.state.since_best = kv_size(kv, "state.since_best");
  c.state.best = parse_exact(kv, "state.best");
  c.state.seed = kv_u64(kv, "state.seed");
  c.state.decayed = kv_bool(kv, "state.decayed");
  c.optimizer.alpha = parse_exact(kv, "opt.alpha");
  c.optimizer.eps = parse_exact(kv, "opt.eps");
  for (auto it = kv.begin(); it != kv.end();)
    it = (starts_with(it->first, "state.") || starts_with(it->first, "opt.")) ? kv.erase(it)
                                                                               : std::next(it);
  try {
    c.spec = ModelSpec::from_key_values(kv);
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: ") + e.what());
  }

  const auto count = get<std::uint64_t>(view, pos);
  std::map<std::string, std::vector<float>> means, vars;
  for (std::uint64_t a = 0; a < count; ++a) {
    const auto name_len = get<std::uint32_t>(view, pos);
    if (pos + name_len > view.size()) throw CheckpointError("checkpoint truncated");
    std::string name(view.substr(pos, name_len));
    pos += name_len;
    const auto rank = get<std::uint32_t>(view, pos);
    if (rank > 8) throw CheckpointError("checkpoint: implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(get<std::uint64_t>(view, pos));
    const std::size_t n = shape_numel(shape);
    if (n > (view.size() - pos) / sizeof(float))
      throw CheckpointError("checkpoint truncated in array " + name);
    std::vector<float> values(n);
    std::memcpy(values.data(), view.data() + pos, n * sizeof(float));
    pos += n * sizeof(float);

    if (starts_with(name, kParam))
      c.store.params.emplace(name.substr(kParam.size()), Tensor<float>(shape, std::move(values)));
    else if (starts_with(name, kMean))
      means.emplace(name.substr(kMean.size()), std::move(values));
    else if (starts_with(name, kVar))
      vars.emplace(name.substr(kVar.size()), std::move(values));
    else if (starts_with(name, kOpt))
      c.optimizer.s.emplace(name.substr(kOpt.size()), std::move(values));
    else
      throw CheckpointError("checkpoint: unknown array " + name);
  }
  if (pos != view.size()) throw CheckpointError("checkpoint: trailing bytes");
  for (auto& [name, mean] : means) {
    auto v = vars.find(name);
    if (v == vars.end() || v->second.size() != mean.size())
      throw CheckpointError("checkpoint: statistics for " + name + " incomplete");
    ops::BatchNormStats<float> st(mean.size());
    st.mean = std::move(mean);
    st.var = std::move(v->second);
    c.store.bn_stats.emplace(name, std::move(st));
  }
  if (vars.size() != means.size()) throw CheckpointError("checkpoint: unpaired statistics");
  return c;
}

void apply_checkpoint(const Checkpoint& ckpt, const NetworkGraph& g, ParameterStore<float>& store,
                      RMSPropState* optimizer) {
  std::set<std::string> expected;
  for (const auto& p : g.params()) {
    expected.insert(p.name);
    auto it = ckpt.store.params.find(p.name);
    if (it == ckpt.store.params.end())
      throw CheckpointError("checkpoint lacks parameter " + p.name);
    if (it->second.shape() != p.shape)
      throw CheckpointError("parameter " + p.name + ": checkpoint shape " +
                            shape_str(it->second.shape()) + ", graph shape " + shape_str(p.shape));
    if (optimizer) {
      auto s = ckpt.optimizer.s.find(p.name);
      if (s == ckpt.optimizer.s.end() || s->second.size() != shape_numel(p.shape))
        throw CheckpointError("optimizer state for " + p.name + " missing or mis-sized");
    }
  }
  for (const auto& [name, t] : ckpt.store.params)
    if (!expected.count(name)) throw CheckpointError("checkpoint parameter " + name + " not in graph");
  try {
    check_parameters(g, ckpt.store);
  } catch (const MissingParameterError& e) {
    throw CheckpointError(e.what());
  }
  std::size_t bn_nodes = 0;
  for (const auto& n : g.nodes())
    if (n.kind == NodeKind::BatchNorm) ++bn_nodes;
  if (ckpt.store.bn_stats.size() != bn_nodes)
    throw CheckpointError("checkpoint has " + std::to_string(ckpt.store.bn_stats.size()) +
                          " normalization statistics, graph has " + std::to_string(bn_nodes));

  store = ckpt.store.cast<float>();
  if (optimizer) *optimizer = ckpt.optimizer;
}

// ---- comparison ------------------------------------------------------------

CompareResult compare(const CUNetConfig& cu, const Split& data, const TrainOptions& opts,
                      const std::filesystem::path& out_dir) {
  CompareResult r;
  r.calibration = calibrate_dense(cu, dense_template_from(cu, 2, cu.n));
  const ModelSpec specs[] = {ModelSpec::coupled(cu), ModelSpec::stacked(cu),
                             ModelSpec::dense_unet(r.calibration.config)};
  for (const ModelSpec& spec : specs) {
    const auto t0 = std::chrono::steady_clock::now();
    const auto dir = out_dir.empty() ? out_dir : out_dir / to_string(spec.arch);
    TrainResult tr = train(spec, data, opts, dir);
    if (tr.aborted) throw std::runtime_error(std::string(to_string(spec.arch)) + ": " + tr.message);
    CompareRow row;
    row.arch = spec.arch;
    row.params = param_count(spec.build());
    row.final_val_pck = tr.final_val_pck;
    row.best_val_pck = std::isfinite(tr.state.best) ? tr.state.best : 0.0;
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.rows.push_back(row);
  }
  if (!out_dir.empty()) write_file_atomic(out_dir / "compare.csv", compare_csv(r));
  return r;
}

std::string compare_csv(const CompareResult& r) {
  std::ostringstream os;
  os << "arch,params,rel_diff_vs_cu,final_val_pck,best_val_pck,seconds\n";
  const double base = r.rows.empty() ? 1.0 : static_cast<double>(r.rows.front().params);
  for (const auto& row : r.rows) {
    char buf[200];
    std::snprintf(buf, sizeof buf, "%s,%llu,%.6f,%.6f,%.6f,%.1f\n", to_string(row.arch),
                  static_cast<unsigned long long>(row.params),
                  (static_cast<double>(row.params) - base) / base, row.final_val_pck,
                  row.best_val_pck, row.seconds);
    os << buf;
  }
  return os.str();
}

}  // namespace cunet::train
