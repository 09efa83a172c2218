#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cunet/tensor.hpp"

namespace cunet::data {

inline constexpr std::size_t kNumJoints = 16;

// MPII joint order.
enum Joint : std::size_t {
  kRightAnkle = 0,
  kRightKnee,
  kRightHip,
  kLeftHip,
  kLeftKnee,
  kLeftAnkle,
  kPelvis,
  kThorax,
  kNeck,
  kHead,
  kRightWrist,
  kRightElbow,
  kRightShoulder,
  kLeftShoulder,
  kLeftElbow,
  kLeftWrist,
};

struct Bone {
  std::size_t parent;
  std::size_t child;
  double min_length;  // fraction of the image side
  double max_length;
};

// Articulated stick figure: a tree of bones rooted at the pelvis plus the
// left/right pairing used by horizontal flips.
struct Skeleton {
  std::array<const char*, kNumJoints> names;
  std::vector<Bone> bones;
  std::array<std::size_t, kNumJoints> mirror;

  static const Skeleton& standard();
};

struct Keypoint {
  double x = 0;
  double y = 0;
  bool visible = true;
};

// Joint positions in image pixels; pixel (i, j) has its center at (j, i).
struct Pose {
  std::vector<Keypoint> joints = std::vector<Keypoint>(kNumJoints);
};

struct Sample {
  Tensor<float> image;     // 1 × res × res, values in [0, 1]
  Pose pose;
  Tensor<float> heatmaps;  // K × R × R
  double sigma = 1.0;      // heatmap Gaussian width, heatmap pixels
};

// Heatmap σ for a given heatmap side: 1 pixel at R = 16, proportional elsewhere.
double default_sigma(std::size_t heatmap_res);

// Image pixel coordinate -> heatmap pixel coordinate (centers aligned).
double to_heatmap_coord(double image_coord, std::size_t input_res, std::size_t heatmap_res);
Pose to_heatmap_coords(const Pose& pose, std::size_t input_res, std::size_t heatmap_res);
// Nearest heatmap pixel, clamped into [0, R).
std::size_t quantize(double heatmap_coord, std::size_t heatmap_res);

bool in_frame(const Keypoint& k, std::size_t input_res);

// Random pose facing the camera (left joints on the image's right side of
// the torso). All joints end up inside the frame.
Pose sample_pose(std::uint64_t seed, std::size_t input_res);

Tensor<float> render_image(const Pose& pose, std::uint64_t seed, std::size_t input_res);

// map_k(p) = exp(−‖p − q_k‖² / 2σ²), q_k the quantized joint in heatmap pixels;
// invisible joints give all-zero maps.
Tensor<float> render_heatmaps(const Pose& pose, std::size_t input_res, std::size_t heatmap_res,
                              double sigma);

struct AugmentParams {
  double scale = 1.0;
  double rotation_deg = 0.0;
  bool flip = false;
};

inline constexpr double kMinScale = 0.75;
inline constexpr double kMaxScale = 1.25;
inline constexpr double kMaxRotationDeg = 30.0;

// Scale in [0.75, 1.25], rotation in [−30°, 30°], flip with probability 1/2.
AugmentParams draw_augment_params(std::uint64_t seed);

// Scales and rotates about the image center, then optionally mirrors
// horizontally (swapping left/right labels). Keypoints are mapped exactly,
// the image is resampled bilinearly with zero fill, heatmaps are re-rendered
// and joints that leave the frame become invisible.
Sample augment_with(const Sample& s, const AugmentParams& p);
Sample augment(const Sample& s, std::uint64_t seed);
Pose transform_pose(const Pose& pose, const AugmentParams& p, std::size_t input_res);

Sample generate_sample(std::uint64_t seed, std::size_t index, std::size_t input_res, double sigma);

struct Manifest {
  std::uint64_t seed = 0;
  std::size_t count = 0;
  std::size_t input_res = 64;
  double sigma = 1.0;

  std::size_t heatmap_res() const { return input_res / 4; }
  bool operator==(const Manifest&) const = default;
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Directory layout: `manifest` (key = value) and `samples.bin`, a sequence of
// records each led by a 16-byte header (magic "CUNS", u32 version 1, u64
// payload bytes) followed by little-endian binary32 image, heatmaps and K×3
// (x, y, visibility) keypoints.
void write_dataset(const std::filesystem::path& dir, const Manifest& manifest);
Manifest read_manifest(const std::filesystem::path& dir);
std::vector<Sample> read_dataset(const std::filesystem::path& dir);

std::string encode_record(const Sample& s);
Sample decode_record(std::string_view bytes, std::size_t input_res, double sigma,
                     std::size_t* consumed = nullptr);

}  // namespace cunet::data
