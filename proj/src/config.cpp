#include "cunet/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <random>
#include <sstream>

namespace cunet {
namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

const std::string& kv_get(const KeyValues& kv, const std::string& key) {
  auto it = kv.find(key);
  if (it == kv.end()) throw ConfigError("missing key '" + key + "'");
  return it->second;
}

}  // namespace

KeyValues parse_key_values(std::string_view text) {
  KeyValues kv;
  std::size_t line_no = 0;
  while (!text.empty()) {
    ++line_no;
    const auto nl = text.find('\n');
    std::string_view line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw ConfigError("line " + std::to_string(line_no) + ": expected 'key = value'");
    std::string key(trim(line.substr(0, eq)));
    std::string value(trim(line.substr(eq + 1)));
    if (key.empty()) throw ConfigError("line " + std::to_string(line_no) + ": empty key");
    if (!kv.emplace(key, value).second)
      throw ConfigError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'");
  }
  return kv;
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str());
}

std::uint64_t kv_u64(const KeyValues& kv, const std::string& key) {
  const std::string& v = kv_get(kv, key);
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size())
    throw ConfigError("key '" + key + "': '" + v + "' is not a non-negative integer");
  return out;
}

std::size_t kv_size(const KeyValues& kv, const std::string& key) {
  return static_cast<std::size_t>(kv_u64(kv, key));
}

double kv_double(const KeyValues& kv, const std::string& key) {
  const std::string& v = kv_get(kv, key);
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "': '" + v + "' is not a number");
  }
}

bool kv_bool(const KeyValues& kv, const std::string& key) {
  const std::string& v = kv_get(kv, key);
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("key '" + key + "': '" + v + "' is not a boolean");
}

void write_file_atomic(const std::filesystem::path& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::random_device rd;
  fs::path tmp = path;
  tmp += ".tmp" + std::to_string(rd());
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

void CUNetConfig::validate() const {
  if (unets < 1) throw ConfigError("u must be >= 1");
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (n < 1) throw ConfigError("n must be >= 1");
  if (m < n) throw ConfigError("m must be >= n (m=" + std::to_string(m) +
                               ", n=" + std::to_string(n) + ")");
  if (keypoints < 1) throw ConfigError("keypoints must be >= 1");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (input_res == 0 || input_res % 4 != 0)
    throw ConfigError("input_res must be a positive multiple of 4 (stem)");
  if (depth >= 8 * sizeof(std::size_t) || heatmap_res() % (std::size_t{1} << depth) != 0)
    throw ConfigError("input_res/4 must be divisible by 2^depth (input_res=" +
                      std::to_string(input_res) + ", depth=" + std::to_string(depth) + ")");
  if (supervisions < 1 || supervisions > unets)
    throw ConfigError("supervisions must lie in [1, u] (supervisions=" +
                      std::to_string(supervisions) + ", u=" + std::to_string(unets) + ")");
}

KeyValues CUNetConfig::to_key_values() const {
  return {{"u", std::to_string(unets)},
          {"m", std::to_string(m)},
          {"n", std::to_string(n)},
          {"depth", std::to_string(depth)},
          {"keypoints", std::to_string(keypoints)},
          {"in_channels", std::to_string(in_channels)},
          {"input_res", std::to_string(input_res)},
          {"coupling", coupling ? "true" : "false"},
          {"supervisions", std::to_string(supervisions)},
          {"seed", std::to_string(seed)}};
}

CUNetConfig CUNetConfig::from_key_values(const KeyValues& kv) {
  for (const auto& [k, v] : kv) {
    if (std::find(std::begin(kConfigKeys), std::end(kConfigKeys), k) == std::end(kConfigKeys))
      throw ConfigError("unknown config key '" + k + "'");
  }
  CUNetConfig c;
  if (kv.count("u")) c.unets = kv_size(kv, "u");
  if (kv.count("m")) c.m = kv_size(kv, "m");
  if (kv.count("n")) c.n = kv_size(kv, "n");
  if (kv.count("depth")) c.depth = kv_size(kv, "depth");
  if (kv.count("keypoints")) c.keypoints = kv_size(kv, "keypoints");
  if (kv.count("in_channels")) c.in_channels = kv_size(kv, "in_channels");
  if (kv.count("input_res")) c.input_res = kv_size(kv, "input_res");
  if (kv.count("coupling")) c.coupling = kv_bool(kv, "coupling");
  if (kv.count("supervisions")) c.supervisions = kv_size(kv, "supervisions");
  if (kv.count("seed")) c.seed = kv_u64(kv, "seed");
  return c;
}

CUNetConfig load_config(const std::filesystem::path& path) {
  return CUNetConfig::from_key_values(read_key_values(path));
}

void save_config(const CUNetConfig& cfg, const std::filesystem::path& path) {
  write_file_atomic(path, format_key_values(cfg.to_key_values()));
}

void DenseUNetConfig::validate() const {
  if (layers < 1) throw ConfigError("dense layers must be >= 1");
  if (growth < 1) throw ConfigError("dense growth must be >= 1");
  if (m < 1) throw ConfigError("dense m must be >= 1");
  if (depth < 1) throw ConfigError("depth must be >= 1");
  if (keypoints < 1) throw ConfigError("keypoints must be >= 1");
  if (in_channels < 1) throw ConfigError("in_channels must be >= 1");
  if (input_res == 0 || input_res % 4 != 0)
    throw ConfigError("input_res must be a positive multiple of 4 (stem)");
  if (depth >= 8 * sizeof(std::size_t) || heatmap_res() % (std::size_t{1} << depth) != 0)
    throw ConfigError("input_res/4 must be divisible by 2^depth");
}

DenseUNetConfig dense_template_from(const CUNetConfig& cfg, std::size_t layers,
                                    std::size_t growth) {
  DenseUNetConfig d;
  d.layers = layers;
  d.growth = growth;
  d.m = cfg.m;
  d.depth = cfg.depth;
  d.keypoints = cfg.keypoints;
  d.in_channels = cfg.in_channels;
  d.input_res = cfg.input_res;
  d.seed = cfg.seed;
  return d;
}

std::string format_config(const CUNetConfig& cfg) { return format_key_values(cfg.to_key_values()); }

std::string format_config(const DenseUNetConfig& cfg) {
  std::ostringstream os;
  os << "arch = dense\n"
     << "layers = " << cfg.layers << "\n"
     << "growth = " << cfg.growth << "\n"
     << "m = " << cfg.m << "\n"
     << "depth = " << cfg.depth << "\n"
     << "keypoints = " << cfg.keypoints << "\n"
     << "in_channels = " << cfg.in_channels << "\n"
     << "input_res = " << cfg.input_res << "\n"
     << "seed = " << cfg.seed << "\n";
  return os.str();
}

}  // namespace cunet
