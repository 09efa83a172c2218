#include "cunet/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "cunet/config.hpp"
#include "cunet/random.hpp"

namespace cunet::data {
namespace {

constexpr char kRecordMagic[4] = {'C', 'U', 'N', 'S'};
constexpr std::uint32_t kRecordVersion = 1;

static_assert(std::endian::native == std::endian::little,
              "record encoding assumes a little-endian host");

double deg2rad(double d) { return d * std::numbers::pi / 180.0; }

struct Unit {
  double x, y;
};
Unit dir(double deg) { return {std::cos(deg2rad(deg)), std::sin(deg2rad(deg))}; }

Keypoint step(const Keypoint& from, double length, double deg) {
  const Unit d = dir(deg);
  return {from.x + length * d.x, from.y + length * d.y, true};
}

double segment_distance(double px, double py, const Keypoint& a, const Keypoint& b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - a.x) * vx + (py - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

template <typename V>
void put(std::string& out, V v) {
  char buf[sizeof(V)];
  std::memcpy(buf, &v, sizeof(V));
  out.append(buf, sizeof(V));
}

template <typename V>
V get(std::string_view bytes, std::size_t& pos) {
  if (pos + sizeof(V) > bytes.size()) throw DatasetError("record truncated");
  V v;
  std::memcpy(&v, bytes.data() + pos, sizeof(V));
  pos += sizeof(V);
  return v;
}

}  // namespace

const Skeleton& Skeleton::standard() {
  static const Skeleton s{
      {"r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax", "neck",
       "head", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist"},
      {
          {kPelvis, kThorax, 0.18, 0.22},
          {kThorax, kNeck, 0.04, 0.06},
          {kNeck, kHead, 0.12, 0.15},
          {kThorax, kLeftShoulder, 0.07, 0.09},
          {kThorax, kRightShoulder, 0.07, 0.09},
          {kLeftShoulder, kLeftElbow, 0.11, 0.14},
          {kLeftElbow, kLeftWrist, 0.10, 0.13},
          {kRightShoulder, kRightElbow, 0.11, 0.14},
          {kRightElbow, kRightWrist, 0.10, 0.13},
          {kPelvis, kLeftHip, 0.05, 0.07},
          {kPelvis, kRightHip, 0.05, 0.07},
          {kLeftHip, kLeftKnee, 0.13, 0.16},
          {kLeftKnee, kLeftAnkle, 0.12, 0.15},
          {kRightHip, kRightKnee, 0.13, 0.16},
          {kRightKnee, kRightAnkle, 0.12, 0.15},
      },
      {kLeftAnkle, kLeftKnee, kLeftHip, kRightHip, kRightKnee, kRightAnkle, kPelvis, kThorax, kNeck,
       kHead, kLeftWrist, kLeftElbow, kLeftShoulder, kRightShoulder, kRightElbow, kRightWrist}};
  return s;
}

double default_sigma(std::size_t heatmap_res) { return static_cast<double>(heatmap_res) / 16.0; }

double to_heatmap_coord(double image_coord, std::size_t input_res, std::size_t heatmap_res) {
  const double stride = static_cast<double>(input_res) / static_cast<double>(heatmap_res);
  return (image_coord + 0.5) / stride - 0.5;
}

Pose to_heatmap_coords(const Pose& pose, std::size_t input_res, std::size_t heatmap_res) {
  Pose out = pose;
  for (auto& k : out.joints) {
    k.x = to_heatmap_coord(k.x, input_res, heatmap_res);
    k.y = to_heatmap_coord(k.y, input_res, heatmap_res);
  }
  return out;
}

std::size_t quantize(double c, std::size_t heatmap_res) {
  const double r = std::floor(c + 0.5);
  if (r <= 0) return 0;
  return std::min(static_cast<std::size_t>(r), heatmap_res - 1);
}

bool in_frame(const Keypoint& k, std::size_t input_res) {
  const double hi = static_cast<double>(input_res) - 1.0;
  return std::isfinite(k.x) && std::isfinite(k.y) && k.x >= 0 && k.y >= 0 && k.x <= hi &&
         k.y <= hi;
}

Pose sample_pose(std::uint64_t seed, std::size_t input_res) {
  const Skeleton& sk = Skeleton::standard();
  std::mt19937_64 rng(seed);
  auto uni = [&](double a, double b) { return std::uniform_real_distribution<double>(a, b)(rng); };
  const double res = static_cast<double>(input_res);

  Pose pose;
  for (int attempt = 0; attempt < 100; ++attempt) {
    const double body = uni(0.85, 1.0) * res;
    auto len = [&](std::size_t bone) {
      return body * uni(sk.bones[bone].min_length, sk.bones[bone].max_length);
    };
    auto& j = pose.joints;
    j[kPelvis] = {uni(0.25 * res, 0.75 * res), uni(0.25 * res, 0.75 * res), true};
    // Angles are in image coordinates (y down); -90 points up.
    const double torso = -90.0 + uni(-25.0, 25.0);
    j[kThorax] = step(j[kPelvis], len(0), torso);
    const double neck = torso + uni(-15.0, 15.0);
    j[kNeck] = step(j[kThorax], len(1), neck);
    j[kHead] = step(j[kNeck], len(2), neck + uni(-20.0, 20.0));
    // Facing the camera: the figure's left is the image's right, which is
    // torso + 90 degrees.
    j[kLeftShoulder] = step(j[kThorax], len(3), torso + 90.0 + uni(-10.0, 10.0));
    j[kRightShoulder] = step(j[kThorax], len(4), torso - 90.0 + uni(-10.0, 10.0));
    const double l_upper = torso + 180.0 - uni(10.0, 150.0);
    const double r_upper = torso + 180.0 + uni(10.0, 150.0);
    j[kLeftElbow] = step(j[kLeftShoulder], len(5), l_upper);
    j[kLeftWrist] = step(j[kLeftElbow], len(6), l_upper + uni(-75.0, 75.0));
    j[kRightElbow] = step(j[kRightShoulder], len(7), r_upper);
    j[kRightWrist] = step(j[kRightElbow], len(8), r_upper + uni(-75.0, 75.0));
    j[kLeftHip] = step(j[kPelvis], len(9), torso + 90.0 + uni(-10.0, 10.0));
    j[kRightHip] = step(j[kPelvis], len(10), torso - 90.0 + uni(-10.0, 10.0));
    const double l_thigh = torso + 180.0 - uni(-10.0, 40.0);
    const double r_thigh = torso + 180.0 + uni(-10.0, 40.0);
    j[kLeftKnee] = step(j[kLeftHip], len(11), l_thigh);
    j[kLeftAnkle] = step(j[kLeftKnee], len(12), l_thigh + uni(-30.0, 30.0));
    j[kRightKnee] = step(j[kRightHip], len(13), r_thigh);
    j[kRightAnkle] = step(j[kRightKnee], len(14), r_thigh + uni(-30.0, 30.0));
    if (std::all_of(j.begin(), j.end(), [&](const Keypoint& k) { return in_frame(k, input_res); }))
      return pose;
  }
  for (auto& k : pose.joints) {
    k.x = std::clamp(k.x, 0.0, res - 1.0);
    k.y = std::clamp(k.y, 0.0, res - 1.0);
    k.visible = true;
  }
  return pose;
}

Tensor<float> render_image(const Pose& pose, std::uint64_t seed, std::size_t input_res) {
  const Skeleton& sk = Skeleton::standard();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> thick_d(1.0, 3.0), intensity_d(0.5, 1.0), noise_d(0.0, 0.1);
  const double thickness = thick_d(rng);
  const double intensity = intensity_d(rng);

  Tensor<float> img(Shape{1, input_res, input_res});
  for (std::size_t y = 0; y < input_res; ++y)
    for (std::size_t x = 0; x < input_res; ++x) {
      double v = 0;
      for (const Bone& b : sk.bones) {
        const double d = segment_distance(static_cast<double>(x), static_cast<double>(y),
                                          pose.joints[b.parent], pose.joints[b.child]);
        const double coverage = std::clamp(thickness / 2.0 + 0.5 - d, 0.0, 1.0);
        v = std::max(v, intensity * coverage);
      }
      v += noise_d(rng);
      img[y * input_res + x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
    }
  return img;
}

Tensor<float> render_heatmaps(const Pose& pose, std::size_t input_res, std::size_t heatmap_res,
                              double sigma) {
  if (!(sigma > 0)) throw std::invalid_argument("render_heatmaps: sigma must be positive");
  const std::size_t K = pose.joints.size(), R = heatmap_res;
  Tensor<float> maps(Shape{K, R, R});
  const double inv = 1.0 / (2.0 * sigma * sigma);
  for (std::size_t k = 0; k < K; ++k) {
    const Keypoint& j = pose.joints[k];
    if (!j.visible) continue;
    const double qx = static_cast<double>(quantize(to_heatmap_coord(j.x, input_res, R), R));
    const double qy = static_cast<double>(quantize(to_heatmap_coord(j.y, input_res, R), R));
    float* m = maps.ptr() + k * R * R;
    for (std::size_t y = 0; y < R; ++y)
      for (std::size_t x = 0; x < R; ++x) {
        const double dx = static_cast<double>(x) - qx, dy = static_cast<double>(y) - qy;
        m[y * R + x] = static_cast<float>(std::exp(-(dx * dx + dy * dy) * inv));
      }
  }
  return maps;
}

AugmentParams draw_augment_params(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  AugmentParams p;
  p.scale = std::uniform_real_distribution<double>(kMinScale, kMaxScale)(rng);
  p.rotation_deg = std::uniform_real_distribution<double>(-kMaxRotationDeg, kMaxRotationDeg)(rng);
  p.flip = std::bernoulli_distribution(0.5)(rng);
  return p;
}

namespace {

// p' = A p + t, with A = s·Rot(θ) about the image center, before the flip.
struct Affine {
  double a, b, c, d, tx, ty;
};

Affine make_affine(const AugmentParams& p, std::size_t input_res) {
  const double cx = (static_cast<double>(input_res) - 1.0) / 2.0;
  const double th = deg2rad(p.rotation_deg);
  const double cs = std::cos(th), sn = std::sin(th);
  Affine m{p.scale * cs, -p.scale * sn, p.scale * sn, p.scale * cs, 0, 0};
  m.tx = cx - (m.a * cx + m.b * cx);
  m.ty = cx - (m.c * cx + m.d * cx);
  return m;
}

}  // namespace

Pose transform_pose(const Pose& pose, const AugmentParams& p, std::size_t input_res) {
  const Affine m = make_affine(p, input_res);
  const double hi = static_cast<double>(input_res) - 1.0;
  const Skeleton& sk = Skeleton::standard();
  Pose out = pose;
  for (std::size_t k = 0; k < pose.joints.size(); ++k) {
    const Keypoint& j = pose.joints[k];
    Keypoint t{m.a * j.x + m.b * j.y + m.tx, m.c * j.x + m.d * j.y + m.ty, j.visible};
    if (p.flip) t.x = hi - t.x;
    const std::size_t dst = p.flip && pose.joints.size() == kNumJoints ? sk.mirror[k] : k;
    out.joints[dst] = t;
  }
  for (auto& j : out.joints)
    if (!in_frame(j, input_res)) j.visible = false;
  return out;
}

Sample augment_with(const Sample& s, const AugmentParams& p) {
  const std::size_t C = s.image.dim(0), res = s.image.dim(1), R = s.heatmaps.dim(1);
  const Affine m = make_affine(p, res);
  const double det = m.a * m.d - m.b * m.c;
  const double hi = static_cast<double>(res) - 1.0;

  Sample out;
  out.sigma = s.sigma;
  out.pose = transform_pose(s.pose, p, res);
  out.image = Tensor<float>(s.image.shape());
  for (std::size_t y = 0; y < res; ++y)
    for (std::size_t x = 0; x < res; ++x) {
      double ux = static_cast<double>(x);
      const double uy = static_cast<double>(y);
      if (p.flip) ux = hi - ux;
      const double rx = ux - m.tx, ry = uy - m.ty;
      const double sx = (m.d * rx - m.b * ry) / det;
      const double sy = (-m.c * rx + m.a * ry) / det;
      const double fx = std::floor(sx), fy = std::floor(sy);
      const double wx = sx - fx, wy = sy - fy;
      const long x0 = static_cast<long>(fx), y0 = static_cast<long>(fy);
      for (std::size_t c = 0; c < C; ++c) {
        const float* src = s.image.ptr() + c * res * res;
        auto at = [&](long yy, long xx) -> double {
          if (xx < 0 || yy < 0 || xx >= static_cast<long>(res) || yy >= static_cast<long>(res))
            return 0.0;
          return src[static_cast<std::size_t>(yy) * res + static_cast<std::size_t>(xx)];
        };
        double v = (1 - wy) * ((1 - wx) * at(y0, x0) + (wx > 0 ? wx * at(y0, x0 + 1) : 0.0));
        if (wy > 0) v += wy * ((1 - wx) * at(y0 + 1, x0) + (wx > 0 ? wx * at(y0 + 1, x0 + 1) : 0.0));
        out.image[c * res * res + y * res + x] = static_cast<float>(v);
      }
    }
  out.heatmaps = render_heatmaps(out.pose, res, R, s.sigma);
  return out;
}

Sample augment(const Sample& s, std::uint64_t seed) {
  return augment_with(s, draw_augment_params(seed));
}

Sample generate_sample(std::uint64_t seed, std::size_t index, std::size_t input_res, double sigma) {
  Sample s;
  s.sigma = sigma;
  s.pose = sample_pose(derive_seed(seed, index, 1), input_res);
  s.image = render_image(s.pose, derive_seed(seed, index, 2), input_res);
  s.heatmaps = render_heatmaps(s.pose, input_res, input_res / 4, sigma);
  return s;
}

std::string encode_record(const Sample& s) {
  std::string payload;
  for (float v : s.image.data()) put(payload, v);
  for (float v : s.heatmaps.data()) put(payload, v);
  for (const auto& k : s.pose.joints) {
    put(payload, static_cast<float>(k.x));
    put(payload, static_cast<float>(k.y));
    put(payload, k.visible ? 1.0f : 0.0f);
  }
  std::string out(kRecordMagic, 4);
  put(out, kRecordVersion);
  put(out, static_cast<std::uint64_t>(payload.size()));
  return out + payload;
}

Sample decode_record(std::string_view bytes, std::size_t input_res, double sigma,
                     std::size_t* consumed) {
  std::size_t pos = 0;
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kRecordMagic, 4) != 0)
    throw DatasetError("record: bad magic");
  pos = 4;
  const auto version = get<std::uint32_t>(bytes, pos);
  if (version != kRecordVersion)
    throw DatasetError("record: unsupported version " + std::to_string(version));
  const auto length = get<std::uint64_t>(bytes, pos);
  const std::size_t R = input_res / 4, K = kNumJoints;
  const std::size_t floats = input_res * input_res + K * R * R + K * 3;
  if (length != floats * sizeof(float))
    throw DatasetError("record: payload of " + std::to_string(length) + " bytes, expected " +
                       std::to_string(floats * sizeof(float)));
  if (pos + length > bytes.size()) throw DatasetError("record truncated");

  Sample s;
  s.sigma = sigma;
  s.image = Tensor<float>(Shape{1, input_res, input_res});
  for (auto& v : s.image.data()) v = get<float>(bytes, pos);
  s.heatmaps = Tensor<float>(Shape{K, R, R});
  for (auto& v : s.heatmaps.data()) v = get<float>(bytes, pos);
  for (auto& k : s.pose.joints) {
    k.x = get<float>(bytes, pos);
    k.y = get<float>(bytes, pos);
    k.visible = get<float>(bytes, pos) != 0.0f;
  }
  if (consumed) *consumed = pos;
  return s;
}

void write_dataset(const std::filesystem::path& dir, const Manifest& manifest) {
  if (manifest.input_res == 0 || manifest.input_res % 4 != 0)
    throw DatasetError("input_res must be a positive multiple of 4");
  std::filesystem::create_directories(dir);
  std::string blob;
  for (std::size_t i = 0; i < manifest.count; ++i)
    blob += encode_record(generate_sample(manifest.seed, i, manifest.input_res, manifest.sigma));
  write_file_atomic(dir / "samples.bin", blob);
  std::ostringstream sigma;
  sigma.precision(17);
  sigma << manifest.sigma;
  write_file_atomic(dir / "manifest", format_key_values({{"seed", std::to_string(manifest.seed)},
                                                          {"count", std::to_string(manifest.count)},
                                                          {"input_res", std::to_string(manifest.input_res)},
                                                          {"sigma", sigma.str()}}));
}

Manifest read_manifest(const std::filesystem::path& dir) {
  const KeyValues kv = read_key_values(dir / "manifest");
  Manifest m;
  m.seed = kv_u64(kv, "seed");
  m.count = kv_size(kv, "count");
  m.input_res = kv_size(kv, "input_res");
  m.sigma = kv_double(kv, "sigma");
  if (m.input_res == 0 || m.input_res % 4 != 0)
    throw DatasetError("manifest: input_res must be a positive multiple of 4");
  return m;
}

std::vector<Sample> read_dataset(const std::filesystem::path& dir) {
  const Manifest m = read_manifest(dir);
  std::ifstream in(dir / "samples.bin", std::ios::binary);
  if (!in) throw DatasetError("cannot open " + (dir / "samples.bin").string());
  std::ostringstream ss;
  ss << in.rdbuf();
  const std::string blob = ss.str();
  std::vector<Sample> out;
  out.reserve(m.count);
  std::string_view view(blob);
  for (std::size_t i = 0; i < m.count; ++i) {
    std::size_t used = 0;
    out.push_back(decode_record(view, m.input_res, m.sigma, &used));
    view.remove_prefix(used);
  }
  if (!view.empty()) throw DatasetError("samples.bin has trailing bytes beyond manifest count");
  return out;
}

}  // namespace cunet::data
