#include "cunet/metrics.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace cunet::metrics {

template <typename T>
Keypoints decode_keypoints(const Tensor<T>& heatmaps) {
  if (heatmaps.rank() != 4 || heatmaps.dim(2) == 0 || heatmaps.dim(2) != heatmaps.dim(3))
    throw ShapeError("decode_keypoints: expected [N,K,R,R], got " + shape_str(heatmaps.shape()));
  const std::size_t N = heatmaps.dim(0), K = heatmaps.dim(1), R = heatmaps.dim(2);
  Keypoints out(N, std::vector<Coord>(K));
  const T* p = heatmaps.ptr();
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t k = 0; k < K; ++k) {
      const T* m = p + (i * K + k) * R * R;
      std::size_t best = 0;
      for (std::size_t j = 1; j < R * R; ++j)
        if (m[j] > m[best]) best = j;
      out[i][k] = {static_cast<double>(best % R), static_cast<double>(best / R)};
    }
  return out;
}

template Keypoints decode_keypoints(const Tensor<float>&);
template Keypoints decode_keypoints(const Tensor<double>&);

std::string to_string(RefRule r) { return r == RefRule::HeadSegment ? "pckh" : "pck"; }

RefRule parse_ref_rule(const std::string& s) {
  if (s == "pckh") return RefRule::HeadSegment;
  if (s == "pck") return RefRule::Torso;
  throw std::invalid_argument("unknown reference rule '" + s + "' (expected pckh or pck)");
}

double reference_length(const data::Pose& gt, RefRule rule) {
  if (gt.joints.size() != data::kNumJoints)
    throw std::invalid_argument("reference_length: pose must have 16 joints");
  const auto& a = gt.joints[rule == RefRule::HeadSegment ? data::kHead : data::kPelvis];
  const auto& b = gt.joints[rule == RefRule::HeadSegment ? data::kNeck : data::kThorax];
  return std::hypot(a.x - b.x, a.y - b.y);
}

double EvalResult::aggregate() const {
  const std::size_t c = std::accumulate(correct.begin(), correct.end(), std::size_t{0});
  const std::size_t t = std::accumulate(total.begin(), total.end(), std::size_t{0});
  return t == 0 ? 0.0 : static_cast<double>(c) / static_cast<double>(t);
}

double EvalResult::joint(std::size_t k) const {
  return total.at(k) == 0 ? 0.0 : static_cast<double>(correct[k]) / static_cast<double>(total[k]);
}

EvalResult pck(const Keypoints& pred, const std::vector<data::Pose>& gt, double alpha,
               RefRule ref) {
  if (!(alpha > 0)) throw std::invalid_argument("pck: alpha must be positive");
  if (pred.size() != gt.size())
    throw std::invalid_argument("pck: " + std::to_string(pred.size()) + " predictions for " +
                                std::to_string(gt.size()) + " poses");
  EvalResult r;
  r.alpha = alpha;
  r.ref = ref;
  const std::size_t K = gt.empty() ? data::kNumJoints : gt.front().joints.size();
  r.correct.assign(K, 0);
  r.total.assign(K, 0);
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (pred[i].size() != K || gt[i].joints.size() != K)
      throw std::invalid_argument("pck: joint count mismatch at sample " + std::to_string(i));
    const double threshold = alpha * reference_length(gt[i], ref);
    if (!(threshold > 0)) {
      r.excluded_samples.push_back(i);
      continue;
    }
    for (std::size_t k = 0; k < K; ++k) {
      const auto& g = gt[i].joints[k];
      if (!g.visible) continue;
      ++r.total[k];
      if (std::hypot(pred[i][k].x - g.x, pred[i][k].y - g.y) <= threshold) ++r.correct[k];
    }
  }
  return r;
}

std::string to_csv(const EvalResult& r) {
  const auto& names = data::Skeleton::standard().names;
  std::ostringstream os;
  os << "joint,correct,total,pck\n";
  std::size_t c = 0, t = 0;
  for (std::size_t k = 0; k < r.total.size(); ++k) {
    os << (k < names.size() ? std::string(names[k]) : "joint" + std::to_string(k)) << ','
       << r.correct[k] << ',' << r.total[k] << ',' << r.joint(k) << '\n';
    c += r.correct[k];
    t += r.total[k];
  }
  os << "ALL," << c << ',' << t << ',' << r.aggregate() << '\n';
  return os.str();
}

}  // namespace cunet::metrics
