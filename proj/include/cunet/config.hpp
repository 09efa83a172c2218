#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cunet {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Flat `key = value` document, one pair per line. Blank lines and lines
// starting with '#' are ignored. Keys keep their insertion-independent sorted
// order on output.
using KeyValues = std::map<std::string, std::string>;

KeyValues parse_key_values(std::string_view text);
std::string format_key_values(const KeyValues& kv);
KeyValues read_key_values(const std::filesystem::path& path);

std::size_t kv_size(const KeyValues& kv, const std::string& key);
std::uint64_t kv_u64(const KeyValues& kv, const std::string& key);
double kv_double(const KeyValues& kv, const std::string& key);
bool kv_bool(const KeyValues& kv, const std::string& key);

// Writes to a sibling temporary file and renames it over the target.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

// Architecture hyper-parameters of a coupled (or, with coupling off, stacked)
// U-Net. Defaults are the desk-scale configuration.
struct CUNetConfig {
  std::size_t unets = 2;         // U
  std::size_t m = 32;            // main-flow channels
  std::size_t n = 16;            // channels generated per block
  std::size_t depth = 3;         // D, resolution levels per U-Net
  std::size_t keypoints = 16;    // K
  std::size_t in_channels = 1;
  std::size_t input_res = 64;
  bool coupling = true;
  std::size_t supervisions = 1;  // S, counts the final head
  std::uint64_t seed = 0;

  // Side of the feature maps after the stride-4 stem.
  std::size_t heatmap_res() const { return input_res / 4; }

  // Throws ConfigError naming the violated constraint.
  void validate() const;

  KeyValues to_key_values() const;
  static CUNetConfig from_key_values(const KeyValues& kv);

  bool operator==(const CUNetConfig&) const = default;
};

// The keys a CUNetConfig document may carry.
inline constexpr std::string_view kConfigKeys[] = {
    "u", "m", "n", "depth", "keypoints", "in_channels", "input_res", "coupling", "supervisions",
    "seed"};

CUNetConfig load_config(const std::filesystem::path& path);
void save_config(const CUNetConfig& cfg, const std::filesystem::path& path);

// A single U-Net whose semantic positions hold dense blocks.
struct DenseUNetConfig {
  std::size_t layers = 2;   // L, dense layers per block
  std::size_t growth = 16;  // k
  std::size_t m = 32;       // width after each block's compression
  std::size_t depth = 3;
  std::size_t keypoints = 16;
  std::size_t in_channels = 1;
  std::size_t input_res = 64;
  std::uint64_t seed = 0;

  std::size_t heatmap_res() const { return input_res / 4; }
  void validate() const;

  bool operator==(const DenseUNetConfig&) const = default;
};

// Shares every setting with the CU-Net config except the block contents.
DenseUNetConfig dense_template_from(const CUNetConfig& cfg, std::size_t layers,
                                    std::size_t growth);

std::string format_config(const CUNetConfig& cfg);
std::string format_config(const DenseUNetConfig& cfg);

}  // namespace cunet
