#include "cunet/network.hpp"

#include <cmath>
#include <random>

#include "cunet/random.hpp"

namespace cunet {

template <typename T>
std::uint64_t ParameterStore<T>::scalar_count() const {
  std::uint64_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

template <typename T>
void ParameterStore<T>::zero_grad() {
  for (auto& [name, t] : params) t.zero_grad();
}

template <typename T>
ParameterStore<T> init_parameters(const NetworkGraph& g, std::uint64_t seed) {
  ParameterStore<T> store;
  for (const auto& spec : g.params()) {
    Tensor<T> t(spec.shape);
    switch (spec.kind) {
      case ParamKind::ConvWeight: {
        std::mt19937_64 rng(derive_seed(seed, fnv1a(spec.name)));
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(spec.fan_in)));
        for (auto& v : t.data()) v = static_cast<T>(dist(rng));
        break;
      }
      case ParamKind::BnGamma:
        for (auto& v : t.data()) v = T(1);
        break;
      case ParamKind::ConvBias:
      case ParamKind::BnBeta:
        break;
    }
    t.set_requires_grad(true);
    store.params.emplace(spec.name, std::move(t));
  }
  for (const auto& n : g.nodes())
    if (n.kind == NodeKind::BatchNorm) store.bn_stats.emplace(n.name, ops::BatchNormStats<T>(n.channels));
  return store;
}

template <typename T>
void check_parameters(const NetworkGraph& g, const ParameterStore<T>& store) {
  for (const auto& spec : g.params()) {
    auto it = store.params.find(spec.name);
    if (it == store.params.end())
      throw MissingParameterError("parameter '" + spec.name + "' is not initialized");
    if (it->second.shape() != spec.shape)
      throw MissingParameterError("parameter '" + spec.name + "' has shape " +
                                  shape_str(it->second.shape()) + ", graph expects " +
                                  shape_str(spec.shape));
  }
  for (const auto& n : g.nodes()) {
    if (n.kind != NodeKind::BatchNorm) continue;
    auto it = store.bn_stats.find(n.name);
    if (it == store.bn_stats.end() || it->second.mean.size() != n.channels)
      throw MissingParameterError("normalization statistics for '" + n.name + "' are missing");
  }
}

namespace {

void mix(std::uint64_t& h, std::uint64_t v) {
  h ^= v + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
}

// Index of the winning element of every 2×2 window.
template <typename T>
void mix_pool_choices(std::uint64_t& h, const Tensor<T>& x) {
  const std::size_t planes = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
  const T* p = x.ptr();
  for (std::size_t c = 0; c < planes; ++c, p += H * W)
    for (std::size_t i = 0; i + 1 < H; i += 2)
      for (std::size_t j = 0; j + 1 < W; j += 2) {
        const T v[4] = {p[i * W + j], p[i * W + j + 1], p[(i + 1) * W + j], p[(i + 1) * W + j + 1]};
        std::uint64_t best = 0;
        for (std::uint64_t k = 1; k < 4; ++k)
          if (v[k] > v[best]) best = k;
        mix(h, best);
      }
}

}  // namespace

template <typename T>
std::vector<Tensor<T>> forward(const NetworkGraph& g, ParameterStore<T>& store, const Tensor<T>& x,
                               ops::Mode mode, Tape<T>* tape, ForwardTrace<T>* trace) {
  check_parameters(g, store);
  const Node& in = g.node(g.input_node());
  if (x.rank() != 4 || x.dim(1) != in.channels || x.dim(2) != in.resolution ||
      x.dim(3) != in.resolution)
    throw ShapeError("forward: input " + shape_str(x.shape()) + " does not match N×" +
                     std::to_string(in.channels) + "×" + std::to_string(in.resolution) + "×" +
                     std::to_string(in.resolution));

  const auto& nodes = g.nodes();
  // Without a tape, activations can be dropped after their last consumer.
  std::vector<std::size_t> last_use(nodes.size(), 0);
  for (const auto& n : nodes)
    for (std::size_t i : n.inputs) last_use[i] = n.id;
  for (const auto& h : g.heads()) last_use[h.node] = nodes.size();
  const bool release = tape == nullptr && !(trace && trace->keep_activations);

  std::vector<Tensor<T>> act(nodes.size());
  auto param = [&](const std::string& name) -> const Tensor<T>& { return store.params.at(name); };

  for (const auto& n : nodes) {
    switch (n.kind) {
      case NodeKind::Input:
        act[n.id] = x;
        break;
      case NodeKind::Conv:
        act[n.id] = ops::conv2d(tape, act[n.inputs[0]], param(n.name + ".weight"),
                                param(n.name + ".bias"), n.stride, n.pad);
        break;
      case NodeKind::BatchNorm:
        act[n.id] = ops::batch_norm(tape, act[n.inputs[0]], param(n.name + ".gamma"),
                                    param(n.name + ".beta"), store.bn_stats.at(n.name), mode,
                                    T(ops::kBatchNormEps),
                                    trace ? trace->bn_momentum : T(ops::kBatchNormMomentum));
        break;
      case NodeKind::Relu: {
        const Tensor<T>& a = act[n.inputs[0]];
        if (trace)
          for (const T v : a.data()) {
            trace->min_relu_input = std::min(trace->min_relu_input, std::abs(static_cast<double>(v)));
            if (trace->record_pattern) mix(trace->pattern, v > T(0));
          }
        act[n.id] = ops::relu(tape, a);
        break;
      }
      case NodeKind::MaxPool:
        if (trace && trace->record_pattern) mix_pool_choices(trace->pattern, act[n.inputs[0]]);
        act[n.id] = ops::max_pool2(tape, act[n.inputs[0]]);
        break;
      case NodeKind::Upsample:
        act[n.id] = ops::upsample_nearest2(tape, act[n.inputs[0]]);
        break;
      case NodeKind::Concat: {
        std::vector<Tensor<T>> parts;
        parts.reserve(n.inputs.size());
        for (std::size_t i : n.inputs) parts.push_back(act[i]);
        act[n.id] = ops::concat_channels<T>(tape, parts);
        break;
      }
      case NodeKind::Add:
        act[n.id] = ops::add(tape, act[n.inputs[0]], act[n.inputs[1]]);
        break;
    }
    if (release)
      for (std::size_t i : n.inputs)
        if (last_use[i] == n.id) act[i] = Tensor<T>();
  }

  std::vector<Tensor<T>> outputs;
  for (const auto& h : g.heads()) outputs.push_back(act[h.node]);
  if (trace && trace->keep_activations) trace->activations = std::move(act);
  return outputs;
}

template <typename T>
void set_bn_stats_from_batch(const NetworkGraph& g, ParameterStore<T>& store, const Tensor<T>& x) {
  ForwardTrace<T> trace;
  trace.bn_momentum = T(0);
  forward<T>(g, store, x, ops::Mode::Train, nullptr, &trace);
}

template void set_bn_stats_from_batch(const NetworkGraph&, ParameterStore<float>&,
                                      const Tensor<float>&);
template void set_bn_stats_from_batch(const NetworkGraph&, ParameterStore<double>&,
                                      const Tensor<double>&);
template struct ParameterStore<float>;
template struct ParameterStore<double>;
template ParameterStore<float> init_parameters(const NetworkGraph&, std::uint64_t);
template ParameterStore<double> init_parameters(const NetworkGraph&, std::uint64_t);
template void check_parameters(const NetworkGraph&, const ParameterStore<float>&);
template void check_parameters(const NetworkGraph&, const ParameterStore<double>&);
template std::vector<Tensor<float>> forward(const NetworkGraph&, ParameterStore<float>&,
                                            const Tensor<float>&, ops::Mode, Tape<float>*,
                                            ForwardTrace<float>*);
template std::vector<Tensor<double>> forward(const NetworkGraph&, ParameterStore<double>&,
                                             const Tensor<double>&, ops::Mode, Tape<double>*,
                                             ForwardTrace<double>*);

}  // namespace cunet
