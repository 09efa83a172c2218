#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "cunet/data.hpp"
#include "cunet/tensor.hpp"

namespace cunet::metrics {

struct Coord {
  double x = 0;
  double y = 0;
};

// N × K keypoints in heatmap pixels.
using Keypoints = std::vector<std::vector<Coord>>;

// Per map, the first maximum in row-major order, as (x = column, y = row).
template <typename T>
Keypoints decode_keypoints(const Tensor<T>& heatmaps);

enum class RefRule { HeadSegment, Torso };

std::string to_string(RefRule r);
RefRule parse_ref_rule(const std::string& s);  // "pckh" | "pck"

// Reference length of one ground-truth pose: |head − neck| or |pelvis − thorax|.
double reference_length(const data::Pose& gt, RefRule rule);

struct EvalResult {
  std::vector<std::size_t> correct;
  std::vector<std::size_t> total;
  double alpha = 0.5;
  RefRule ref = RefRule::HeadSegment;
  std::vector<std::size_t> excluded_samples;  // zero reference length

  double aggregate() const;  // Σcorrect / Σtotal, 0 when nothing counted
  double joint(std::size_t k) const;
};

// `gt` must already be in heatmap coordinates. A visible joint counts as
// correct iff ‖pred − gt‖ ≤ alpha · ref; invisible joints are not counted.
EvalResult pck(const Keypoints& pred, const std::vector<data::Pose>& gt, double alpha,
               RefRule ref);

// `joint,correct,total,pck` then one row per joint and an `ALL` row.
std::string to_csv(const EvalResult& r);

}  // namespace cunet::metrics
