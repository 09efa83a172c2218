#include "cunet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>
#include <utility>

#include "cunet/supervision.hpp"

namespace cunet {

const char* to_string(NodeKind kind) {
  switch (kind) {
    case NodeKind::Input: return "input";
    case NodeKind::Conv: return "conv";
    case NodeKind::BatchNorm: return "batch_norm";
    case NodeKind::Relu: return "relu";
    case NodeKind::MaxPool: return "max_pool2";
    case NodeKind::Upsample: return "upsample2";
    case NodeKind::Concat: return "concat";
    case NodeKind::Add: return "add";
  }
  return "?";
}

const char* to_string(EdgeTag tag) {
  switch (tag) {
    case EdgeTag::MainFlow: return "main_flow";
    case EdgeTag::Skip: return "skip";
    case EdgeTag::Coupling: return "coupling";
    case EdgeTag::Head: return "head";
  }
  return "?";
}

const char* to_string(BlockPath path) {
  switch (path) {
    case BlockPath::Down: return "down";
    case BlockPath::Bottom: return "bottom";
    case BlockPath::Up: return "up";
  }
  return "?";
}

std::string SemanticBlockId::position() const {
  if (path == BlockPath::Bottom) return "bottom";
  return std::string(to_string(path)) + std::to_string(level);
}

BlockChannels semantic_block_channels(std::size_t i, std::size_t m, std::size_t n,
                                      std::size_t extra_in) {
  if (extra_in != n * i)
    throw std::logic_error("semantic block " + std::to_string(i) + ": " +
                           std::to_string(extra_in) + " coupled input channels, expected n*i = " +
                           std::to_string(n * i));
  BlockChannels c;
  c.concat_in = m + extra_in;
  c.bottleneck = 4 * m;
  c.growth = n;
  c.concat_out = c.concat_in + n;
  c.main_out = m;
  return c;
}

class GraphBuilder {
 public:
  explicit GraphBuilder(NetworkGraph& g) : g_(g) {}

  std::size_t input(std::size_t channels, std::size_t res) {
    Node n;
    n.kind = NodeKind::Input;
    n.name = "input";
    n.channels = channels;
    n.resolution = res;
    return push(std::move(n), {});
  }

  using In = std::pair<std::size_t, EdgeTag>;

  std::size_t node(NodeKind kind, std::string name, std::vector<In> ins, std::size_t channels,
                   std::size_t res) {
    Node n;
    n.kind = kind;
    n.name = std::move(name);
    n.channels = channels;
    n.resolution = res;
    n.block = block_;
    return push(std::move(n), ins);
  }

  std::size_t concat(std::string name, std::vector<In> ins) {
    std::size_t c = 0;
    for (auto [id, tag] : ins) c += g_.nodes_[id].channels;
    const std::size_t res = res_of(ins.front().first);
    return node(NodeKind::Concat, std::move(name), std::move(ins), c, res);
  }

  std::size_t conv(const std::string& name, In in, std::size_t out, std::size_t kernel,
                   std::size_t stride, std::size_t pad) {
    const std::size_t cin = g_.nodes_[in.first].channels;
    const std::size_t res = (res_of(in.first) + 2 * pad - kernel) / stride + 1;
    const std::size_t id = node(NodeKind::Conv, name, {in}, out, res);
    Node& n = g_.nodes_[id];
    n.kernel = kernel;
    n.stride = stride;
    n.pad = pad;
    g_.params_.push_back({name + ".weight", {out, cin, kernel, kernel}, ParamKind::ConvWeight,
                          cin * kernel * kernel});
    g_.params_.push_back({name + ".bias", {out}, ParamKind::ConvBias, 0});
    return id;
  }

  std::size_t bn(const std::string& name, In in) {
    const std::size_t c = g_.nodes_[in.first].channels;
    const std::size_t id = node(NodeKind::BatchNorm, name, {in}, c, res_of(in.first));
    g_.params_.push_back({name + ".gamma", {c}, ParamKind::BnGamma, 0});
    g_.params_.push_back({name + ".beta", {c}, ParamKind::BnBeta, 0});
    return id;
  }

  // Pre-activation unit: BN -> ReLU -> conv.
  std::size_t bn_relu_conv(const std::string& prefix, In in, std::size_t out, std::size_t kernel,
                           std::size_t pad) {
    const std::size_t b = bn(prefix + ".bn", in);
    const std::size_t r =
        node(NodeKind::Relu, prefix + ".relu", {{b, EdgeTag::MainFlow}}, g_.nodes_[b].channels,
             res_of(b));
    return conv(prefix + ".conv", {r, EdgeTag::MainFlow}, out, kernel, 1, pad);
  }

  std::size_t stem(std::size_t x, std::size_t m) {
    const std::size_t c = conv("stem.conv", {x, EdgeTag::MainFlow}, m, 7, 2, 3);
    const std::size_t b = bn("stem.bn", {c, EdgeTag::MainFlow});
    const std::size_t r = node(NodeKind::Relu, "stem.relu", {{b, EdgeTag::MainFlow}}, m, res_of(b));
    return node(NodeKind::MaxPool, "stem.pool", {{r, EdgeTag::MainFlow}}, m, res_of(r) / 2);
  }

  // Builds one U-Net around `block`, which receives the block id and the
  // main-flow input and returns the block's main output.
  std::size_t unet(std::size_t u, std::size_t x, std::size_t depth,
                   const std::function<std::size_t(const SemanticBlockId&, std::size_t)>& block) {
    const std::string p = "u" + std::to_string(u);
    std::vector<std::size_t> skips(depth);
    for (std::size_t l = 0; l < depth; ++l) {
      x = block({u, BlockPath::Down, l}, x);
      skips[l] = x;
      x = node(NodeKind::MaxPool, p + ".pool" + std::to_string(l), {{x, EdgeTag::MainFlow}},
               g_.nodes_[x].channels, res_of(x) / 2);
    }
    x = block({u, BlockPath::Bottom, 0}, x);
    for (std::size_t l = depth; l-- > 0;) {
      x = node(NodeKind::Upsample, p + ".upsample" + std::to_string(l), {{x, EdgeTag::MainFlow}},
               g_.nodes_[x].channels, res_of(x) * 2);
      x = node(NodeKind::Add, p + ".skip" + std::to_string(l),
               {{x, EdgeTag::MainFlow}, {skips[l], EdgeTag::Skip}}, g_.nodes_[x].channels,
               res_of(x));
      x = block({u, BlockPath::Up, l}, x);
    }
    g_.unet_outputs_.push_back(x);
    return x;
  }

  std::size_t semantic_block(const SemanticBlockId& id, std::size_t main_in,
                             const std::vector<std::size_t>& coupled, std::size_t m,
                             std::size_t n) {
    const BlockChannels ch = semantic_block_channels(coupled.size(), m, n, n * coupled.size());
    block_ = id;
    const std::string p = "u" + std::to_string(id.unet) + "." + id.position();
    std::vector<In> ins{{main_in, EdgeTag::MainFlow}};
    for (std::size_t src : coupled) ins.emplace_back(src, EdgeTag::Coupling);
    const std::size_t cat = concat(p + ".concat_in", ins);
    const std::size_t reduce = bn_relu_conv(p + ".reduce", {cat, EdgeTag::MainFlow},
                                            ch.bottleneck, 1, 0);
    const std::size_t grow = bn_relu_conv(p + ".grow", {reduce, EdgeTag::MainFlow}, n, 3, 1);
    const std::size_t cat_out =
        concat(p + ".concat_out", {{cat, EdgeTag::MainFlow}, {grow, EdgeTag::MainFlow}});
    const std::size_t out = bn_relu_conv(p + ".compress", {cat_out, EdgeTag::MainFlow}, m, 1, 0);
    block_.reset();
    g_.blocks_.push_back({id, ch, res_of(out), cat, grow, out});
    return out;
  }

  std::size_t dense_block(const SemanticBlockId& id, std::size_t main_in, std::size_t layers,
                          std::size_t growth, std::size_t m) {
    block_ = id;
    const std::string p = "u" + std::to_string(id.unet) + "." + id.position();
    DenseBlockInfo info{id, {}, 0, 0};
    std::vector<In> ins{{main_in, EdgeTag::MainFlow}};
    for (std::size_t j = 0; j < layers; ++j) {
      const std::string lp = p + ".layer" + std::to_string(j);
      const std::size_t cat = concat(lp + ".concat", ins);
      info.layer_inputs.push_back(g_.nodes_[cat].channels);
      const std::size_t r = bn_relu_conv(lp + ".reduce", {cat, EdgeTag::MainFlow}, 4 * growth, 1, 0);
      const std::size_t k = bn_relu_conv(lp + ".grow", {r, EdgeTag::MainFlow}, growth, 3, 1);
      ins.emplace_back(k, EdgeTag::MainFlow);
    }
    const std::size_t cat = concat(p + ".concat_out", ins);
    info.compress_in = g_.nodes_[cat].channels;
    const std::size_t out = bn_relu_conv(p + ".compress", {cat, EdgeTag::MainFlow}, m, 1, 0);
    block_.reset();
    info.main_output_node = out;
    g_.dense_blocks_.push_back(std::move(info));
    return out;
  }

  void head(std::size_t u, std::size_t x, std::size_t keypoints) {
    const std::string p = "head" + std::to_string(u);
    const std::size_t b = bn(p + ".bn", {x, EdgeTag::Head});
    const std::size_t r = node(NodeKind::Relu, p + ".relu", {{b, EdgeTag::MainFlow}},
                               g_.nodes_[b].channels, res_of(b));
    const std::size_t c = conv(p + ".conv", {r, EdgeTag::MainFlow}, keypoints, 1, 1, 0);
    g_.heads_.push_back({u, c});
  }

 private:
  std::size_t res_of(std::size_t id) const { return g_.nodes_[id].resolution; }

  std::size_t push(Node n, const std::vector<In>& ins) {
    n.id = g_.nodes_.size();
    for (auto [src, tag] : ins) {
      n.inputs.push_back(src);
      g_.edges_.push_back({src, n.id, g_.nodes_[src].channels, tag});
    }
    if (n.kind == NodeKind::Concat) {
      n.in_channels = n.channels;
    } else if (!ins.empty()) {
      n.in_channels = g_.nodes_[ins.front().first].channels;
    }
    g_.nodes_.push_back(std::move(n));
    return g_.nodes_.back().id;
  }

  NetworkGraph& g_;
  std::optional<SemanticBlockId> block_;
};

NetworkGraph build_cu_net(const CUNetConfig& cfg) {
  cfg.validate();
  NetworkGraph g;
  GraphBuilder b(g);
  std::size_t x = b.input(cfg.in_channels, cfg.input_res);
  x = b.stem(x, cfg.m);

  // Coupling payloads (the n-channel 3×3 outputs) of earlier U-Nets, keyed by
  // semantic position.
  std::map<std::string, std::vector<std::size_t>> exports;
  const SupervisionPlan plan = place_supervisions(cfg.supervisions, cfg.unets);
  std::size_t next_head = 0;

  for (std::size_t u = 0; u < cfg.unets; ++u) {
    x = b.unet(u, x, cfg.depth, [&](const SemanticBlockId& id, std::size_t in) {
      auto& sources = exports[id.position()];
      const std::vector<std::size_t> coupled = cfg.coupling ? sources : std::vector<std::size_t>{};
      const std::size_t out = b.semantic_block(id, in, coupled, cfg.m, cfg.n);
      sources.push_back(g.blocks().back().coupling_output_node);
      return out;
    });
    if (next_head < plan.indices.size() && plan.indices[next_head] == u + 1) {
      b.head(u, x, cfg.keypoints);
      ++next_head;
    }
  }
  return g;
}

NetworkGraph build_dense_unet(const DenseUNetConfig& cfg) {
  cfg.validate();
  NetworkGraph g;
  GraphBuilder b(g);
  std::size_t x = b.input(cfg.in_channels, cfg.input_res);
  x = b.stem(x, cfg.m);
  x = b.unet(0, x, cfg.depth, [&](const SemanticBlockId& id, std::size_t in) {
    return b.dense_block(id, in, cfg.layers, cfg.growth, cfg.m);
  });
  b.head(0, x, cfg.keypoints);
  return g;
}

std::size_t NetworkGraph::output_channels() const {
  return heads_.empty() ? 0 : nodes_[heads_.back().node].channels;
}

std::size_t NetworkGraph::output_resolution() const {
  return heads_.empty() ? 0 : nodes_[heads_.back().node].resolution;
}

std::size_t NetworkGraph::coupling_edge_count() const {
  return static_cast<std::size_t>(std::count_if(
      edges_.begin(), edges_.end(), [](const Edge& e) { return e.tag == EdgeTag::Coupling; }));
}

std::size_t NetworkGraph::find(const std::string& name) const {
  for (const auto& n : nodes_)
    if (n.name == name) return n.id;
  throw std::out_of_range("graph has no node named '" + name + "'");
}

void NetworkGraph::validate() const {
  auto fail = [](const Node& n, const std::string& why) {
    throw std::logic_error("node " + std::to_string(n.id) + " (" + n.name + "): " + why);
  };
  for (const auto& n : nodes_) {
    for (std::size_t in : n.inputs)
      if (in >= n.id) fail(n, "input " + std::to_string(in) + " does not precede it");
    if (n.kind == NodeKind::Input) continue;
    if (n.inputs.empty()) fail(n, "no inputs");
    std::size_t sum = 0;
    for (std::size_t in : n.inputs) sum += nodes_[in].channels;
    switch (n.kind) {
      case NodeKind::Concat:
        if (n.in_channels != sum || n.channels != sum) fail(n, "concat width mismatch");
        break;
      case NodeKind::Add:
        for (std::size_t in : n.inputs)
          if (nodes_[in].channels != n.in_channels) fail(n, "add inputs differ in width");
        if (n.channels != n.in_channels) fail(n, "add output width mismatch");
        break;
      default:
        if (n.inputs.size() != 1) fail(n, "expected a single input");
        if (n.in_channels != sum) fail(n, "input width annotation mismatch");
        break;
    }
  }
  std::map<std::size_t, const BlockInfo*> by_growth;
  for (const auto& b : blocks_) by_growth[b.coupling_output_node] = &b;
  for (const auto& e : edges_) {
    if (e.tag != EdgeTag::Coupling) continue;
    const Node& from = nodes_[e.from];
    const Node& to = nodes_[e.to];
    if (!from.block || !to.block) fail(to, "coupling edge outside a semantic block");
    if (!from.block->same_semantic(*to.block)) fail(to, "coupling edge joins different positions");
    if (from.block->unet >= to.block->unet) fail(to, "coupling edge does not point forward");
    auto it = by_growth.find(e.from);
    if (it == by_growth.end()) fail(to, "coupling edge does not carry a block's growth output");
    if (e.channels != it->second->channels.growth) fail(to, "coupling edge width is not n");
  }
}

std::uint64_t param_count(const NetworkGraph& g) { return param_count(g, ""); }

std::uint64_t param_count(const NetworkGraph& g, const std::string& prefix) {
  std::uint64_t total = 0;
  for (const auto& p : g.params())
    if (p.name.compare(0, prefix.size(), prefix) == 0) total += shape_numel(p.shape);
  return total;
}

std::string to_dot(const NetworkGraph& g) {
  std::ostringstream os;
  os << "digraph cunet {\n  rankdir=TB;\n  node [shape=box, fontsize=10];\n";
  for (const auto& n : g.nodes()) {
    os << "  n" << n.id << " [label=\"" << n.name << "\\n" << to_string(n.kind) << " "
       << n.channels << "x" << n.resolution << "x" << n.resolution << "\"];\n";
  }
  for (const auto& e : g.edges()) {
    os << "  n" << e.from << " -> n" << e.to << " [label=\"" << to_string(e.tag) << "\"";
    switch (e.tag) {
      case EdgeTag::Coupling: os << ", color=red, style=dashed"; break;
      case EdgeTag::Skip: os << ", color=blue"; break;
      case EdgeTag::Head: os << ", color=darkgreen"; break;
      case EdgeTag::MainFlow: break;
    }
    os << "];\n";
  }
  os << "}\n";
  return os.str();
}

namespace {

std::uint64_t dense_count(const DenseUNetConfig& c) { return param_count(build_dense_unet(c)); }

double rel_err(std::uint64_t achieved, std::uint64_t target) {
  const double diff = std::abs(static_cast<double>(achieved) - static_cast<double>(target));
  return diff / static_cast<double>(target);
}

// Best growth rate at a fixed width; param_count is increasing in k.
CalibrationResult best_growth(std::uint64_t target, DenseUNetConfig c) {
  std::size_t lo = 1, hi = 4 * c.m;
  while (lo < hi) {
    const std::size_t mid = lo + (hi - lo) / 2;
    c.growth = mid;
    if (dense_count(c) < target)
      lo = mid + 1;
    else
      hi = mid;
  }
  CalibrationResult best;
  best.target = target;
  best.relative_error = std::numeric_limits<double>::infinity();
  for (std::size_t k : {lo > 1 ? lo - 1 : lo, lo}) {
    c.growth = k;
    const std::uint64_t got = dense_count(c);
    const double e = rel_err(got, target);
    if (e < best.relative_error) best = {c, target, got, e};
  }
  return best;
}

}  // namespace

CalibrationResult calibrate_dense(std::uint64_t target, const DenseUNetConfig& base,
                                  double tolerance) {
  base.validate();
  if (target == 0) throw std::invalid_argument("calibrate_dense: zero parameter target");
  CalibrationResult closest = best_growth(target, base);
  if (closest.relative_error <= tolerance) return closest;
  for (std::size_t delta = 1; delta <= base.m; ++delta) {
    for (int sign : {-1, +1}) {
      if (sign < 0 && delta >= base.m) continue;
      DenseUNetConfig c = base;
      c.m = sign < 0 ? base.m - delta : base.m + delta;
      const CalibrationResult r = best_growth(target, c);
      if (r.relative_error < closest.relative_error) closest = r;
      if (r.relative_error <= tolerance) return r;
    }
  }
  std::ostringstream os;
  os << "calibrate_dense: no dense U-Net within " << tolerance * 100 << "% of " << target
     << " parameters; closest ratio " << static_cast<double>(closest.achieved) / target
     << " (L=" << closest.config.layers << ", k=" << closest.config.growth
     << ", m=" << closest.config.m << ")";
  throw CalibrationError(os.str(), closest);
}

CalibrationResult calibrate_dense(const CUNetConfig& cu, const DenseUNetConfig& base,
                                  std::size_t base_unets, double tolerance) {
  const std::uint64_t target = param_count(build_cu_net(cu));
  DenseUNetConfig c = base;
  const long layers = static_cast<long>(base.layers) + static_cast<long>(cu.unets) -
                      static_cast<long>(base_unets);
  if (layers < 1)
    throw std::invalid_argument("calibrate_dense: layer rule gives L=" + std::to_string(layers));
  c.layers = static_cast<std::size_t>(layers);
  return calibrate_dense(target, c, tolerance);
}

const char* to_string(Arch arch) {
  switch (arch) {
    case Arch::Coupled: return "cu";
    case Arch::Stacked: return "stacked";
    case Arch::Dense: return "dense";
  }
  return "?";
}

Arch parse_arch(const std::string& s) {
  if (s == "cu" || s == "coupled") return Arch::Coupled;
  if (s == "stacked") return Arch::Stacked;
  if (s == "dense") return Arch::Dense;
  throw ConfigError("unknown architecture '" + s + "' (expected cu, stacked or dense)");
}

ModelSpec ModelSpec::coupled(CUNetConfig cfg) {
  cfg.coupling = true;
  return {Arch::Coupled, cfg, {}};
}

ModelSpec ModelSpec::stacked(CUNetConfig cfg) {
  cfg.coupling = false;
  return {Arch::Stacked, cfg, {}};
}

ModelSpec ModelSpec::dense_unet(DenseUNetConfig cfg) { return {Arch::Dense, {}, cfg}; }

NetworkGraph ModelSpec::build() const {
  return arch == Arch::Dense ? build_dense_unet(dense) : build_cu_net(cu);
}

KeyValues ModelSpec::to_key_values() const {
  if (arch != Arch::Dense) {
    KeyValues kv = cu.to_key_values();
    kv["arch"] = to_string(arch);
    return kv;
  }
  return {{"arch", "dense"},
          {"layers", std::to_string(dense.layers)},
          {"growth", std::to_string(dense.growth)},
          {"m", std::to_string(dense.m)},
          {"depth", std::to_string(dense.depth)},
          {"keypoints", std::to_string(dense.keypoints)},
          {"in_channels", std::to_string(dense.in_channels)},
          {"input_res", std::to_string(dense.input_res)},
          {"seed", std::to_string(dense.seed)}};
}

ModelSpec ModelSpec::from_key_values(const KeyValues& kv) {
  KeyValues rest = kv;
  Arch arch = Arch::Coupled;
  if (auto it = rest.find("arch"); it != rest.end()) {
    arch = parse_arch(it->second);
    rest.erase(it);
  }
  if (arch != Arch::Dense) {
    ModelSpec s{arch, CUNetConfig::from_key_values(rest), {}};
    s.cu.coupling = arch == Arch::Coupled;
    return s;
  }
  DenseUNetConfig d;
  d.layers = kv_size(rest, "layers");
  d.growth = kv_size(rest, "growth");
  d.m = kv_size(rest, "m");
  d.depth = kv_size(rest, "depth");
  d.keypoints = kv_size(rest, "keypoints");
  d.in_channels = kv_size(rest, "in_channels");
  d.input_res = kv_size(rest, "input_res");
  d.seed = kv_u64(rest, "seed");
  return dense_unet(d);
}

}  // namespace cunet
