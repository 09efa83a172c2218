#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cunet/config.hpp"
#include "cunet/tensor.hpp"

namespace cunet {

enum class NodeKind { Input, Conv, BatchNorm, Relu, MaxPool, Upsample, Concat, Add };
enum class EdgeTag { MainFlow, Skip, Coupling, Head };
enum class BlockPath { Down, Bottom, Up };
enum class ParamKind { ConvWeight, ConvBias, BnGamma, BnBeta };

const char* to_string(NodeKind kind);
const char* to_string(EdgeTag tag);
const char* to_string(BlockPath path);

// Position of a semantic block. Blocks in different U-Nets with equal
// (path, level) carry the same semantics and are coupled to each other.
struct SemanticBlockId {
  std::size_t unet = 0;
  BlockPath path = BlockPath::Down;
  std::size_t level = 0;  // unused for the bottom block

  bool same_semantic(const SemanticBlockId& o) const {
    return path == o.path && (path == BlockPath::Bottom || level == o.level);
  }
  std::string position() const;  // "down0", "bottom", "up2", ...
  bool operator==(const SemanticBlockId&) const = default;
};

struct Node {
  std::size_t id = 0;
  NodeKind kind = NodeKind::Input;
  std::string name;
  std::vector<std::size_t> inputs;
  std::size_t in_channels = 0;  // sum over inputs for concat, common width otherwise
  std::size_t channels = 0;
  std::size_t resolution = 0;
  // Convolution geometry.
  std::size_t kernel = 0;
  std::size_t stride = 1;
  std::size_t pad = 0;
  std::optional<SemanticBlockId> block;
};

struct Edge {
  std::size_t from = 0;
  std::size_t to = 0;
  std::size_t channels = 0;
  EdgeTag tag = EdgeTag::MainFlow;
};

struct ParamSpec {
  std::string name;
  Shape shape;
  ParamKind kind = ParamKind::ConvWeight;
  std::size_t fan_in = 0;  // conv weights only
};

// Channel trace of one coupled semantic block.
struct BlockChannels {
  std::size_t concat_in = 0;   // m + n·i
  std::size_t bottleneck = 0;  // 4m
  std::size_t growth = 0;      // n, also the coupling export
  std::size_t concat_out = 0;  // m + n·i + n
  std::size_t main_out = 0;    // m
};

// Validates extra_in == n·i and returns the block's channel arithmetic.
BlockChannels semantic_block_channels(std::size_t i, std::size_t m, std::size_t n,
                                      std::size_t extra_in);

struct BlockInfo {
  SemanticBlockId id;
  BlockChannels channels;
  std::size_t resolution = 0;
  std::size_t concat_node = 0;
  std::size_t coupling_output_node = 0;
  std::size_t main_output_node = 0;
};

struct DenseBlockInfo {
  SemanticBlockId id;
  std::vector<std::size_t> layer_inputs;  // input width of each dense layer
  std::size_t compress_in = 0;
  std::size_t main_output_node = 0;
};

struct Head {
  std::size_t unet = 0;  // 0-based index of the supervised U-Net
  std::size_t node = 0;  // node producing the K-channel prediction
};

// Annotated, acyclic layer graph. Nodes are stored in a topological order;
// every node's inputs have smaller ids.
class NetworkGraph {
 public:
  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(std::size_t id) const { return nodes_.at(id); }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<ParamSpec>& params() const { return params_; }
  const std::vector<Head>& heads() const { return heads_; }
  const std::vector<BlockInfo>& blocks() const { return blocks_; }
  const std::vector<DenseBlockInfo>& dense_blocks() const { return dense_blocks_; }
  // Main-flow output node of each U-Net, in order.
  const std::vector<std::size_t>& unet_outputs() const { return unet_outputs_; }
  std::size_t input_node() const { return 0; }
  std::size_t input_channels() const { return nodes_.front().channels; }
  std::size_t input_resolution() const { return nodes_.front().resolution; }
  std::size_t output_channels() const;
  std::size_t output_resolution() const;

  std::size_t coupling_edge_count() const;
  // Index of the node with this name; throws if absent.
  std::size_t find(const std::string& name) const;

  // Re-checks acyclicity, channel annotations and coupling-edge rules.
  // Throws std::logic_error on the first violation.
  void validate() const;

 private:
  friend class GraphBuilder;

  std::vector<Node> nodes_;
  std::vector<Edge> edges_;
  std::vector<ParamSpec> params_;
  std::vector<Head> heads_;
  std::vector<BlockInfo> blocks_;
  std::vector<DenseBlockInfo> dense_blocks_;
  std::vector<std::size_t> unet_outputs_;
};

// Coupled U-Nets; with cfg.coupling false the result is plain stacked U-Nets.
NetworkGraph build_cu_net(const CUNetConfig& cfg);
NetworkGraph build_dense_unet(const DenseUNetConfig& cfg);

// Total scalar parameter count (conv weights and biases, BN gamma and beta).
std::uint64_t param_count(const NetworkGraph& g);
// Count of parameters whose name starts with prefix.
std::uint64_t param_count(const NetworkGraph& g, const std::string& prefix);

std::string to_dot(const NetworkGraph& g);

struct CalibrationResult {
  DenseUNetConfig config;
  std::uint64_t target = 0;
  std::uint64_t achieved = 0;
  double relative_error = 0;  // |achieved - target| / target
};

class CalibrationError : public std::runtime_error {
 public:
  CalibrationError(const std::string& what, CalibrationResult closest)
      : std::runtime_error(what), closest_(std::move(closest)) {}
  const CalibrationResult& closest() const { return closest_; }

 private:
  CalibrationResult closest_;
};

inline constexpr double kCalibrationTolerance = 0.02;
inline constexpr std::size_t kDenseBaseUnets = 2;

// Dense U-Net sized to match a parameter budget. The layer count follows
// L = base.layers + (unets - base_unets); the growth rate is then searched
// over [1, 4m]. If no growth rate reaches the tolerance at the template
// width, neighbouring compression widths are tried in order of distance.
CalibrationResult calibrate_dense(std::uint64_t target, const DenseUNetConfig& base,
                                  double tolerance = kCalibrationTolerance);
CalibrationResult calibrate_dense(const CUNetConfig& cu, const DenseUNetConfig& base,
                                  std::size_t base_unets = kDenseBaseUnets,
                                  double tolerance = kCalibrationTolerance);

enum class Arch { Coupled, Stacked, Dense };
const char* to_string(Arch arch);
Arch parse_arch(const std::string& s);

// Everything needed to rebuild a graph: the architecture family plus its
// configuration. Serialized into checkpoints.
struct ModelSpec {
  Arch arch = Arch::Coupled;
  CUNetConfig cu;
  DenseUNetConfig dense;

  static ModelSpec coupled(CUNetConfig cfg);
  static ModelSpec stacked(CUNetConfig cfg);
  static ModelSpec dense_unet(DenseUNetConfig cfg);

  NetworkGraph build() const;
  std::uint64_t seed() const { return arch == Arch::Dense ? dense.seed : cu.seed; }
  std::size_t input_res() const { return arch == Arch::Dense ? dense.input_res : cu.input_res; }
  std::size_t in_channels() const {
    return arch == Arch::Dense ? dense.in_channels : cu.in_channels;
  }
  std::size_t keypoints() const { return arch == Arch::Dense ? dense.keypoints : cu.keypoints; }

  KeyValues to_key_values() const;
  static ModelSpec from_key_values(const KeyValues& kv);
};

}  // namespace cunet
