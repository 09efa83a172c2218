#include <gtest/gtest.h>

#include <random>

#include "cunet/data.hpp"
#include "cunet/metrics.hpp"

using namespace cunet;
using namespace cunet::metrics;

namespace {

constexpr std::size_t K = data::kNumJoints;

data::Pose random_pose(std::mt19937_64& rng) {
  std::uniform_real_distribution<double> d(0, 16);
  data::Pose p;
  for (auto& j : p.joints) j = {d(rng), d(rng), true};
  return p;
}

Keypoints as_pred(const std::vector<data::Pose>& poses, double dx = 0, double dy = 0) {
  Keypoints out;
  for (const auto& p : poses) {
    out.emplace_back();
    for (const auto& j : p.joints) out.back().push_back({j.x + dx, j.y + dy});
  }
  return out;
}

TEST(Decode, SinglePeak) {
  Tensor<float> h(Shape{1, 1, 8, 8}, 0.0f);
  h[5 * 8 + 3] = 1.0f;
  const Keypoints k = decode_keypoints(h);
  EXPECT_EQ(k[0][0].x, 3);
  EXPECT_EQ(k[0][0].y, 5);
}

TEST(Decode, TiesGoToFirstRowMajor) {
  Tensor<double> h(Shape{2, 3, 4, 4}, 0.25);
  const Keypoints k = decode_keypoints(h);
  for (const auto& sample : k)
    for (const auto& c : sample) {
      EXPECT_EQ(c.x, 0);
      EXPECT_EQ(c.y, 0);
    }
}

TEST(Decode, RenderedTargetsRoundTrip) {
  for (std::size_t i = 0; i < 20; ++i) {
    const auto s = data::generate_sample(3, i, 64, 1.0);
    const auto hm = s.heatmaps.reshaped({1, K, 16, 16});
    const Keypoints k = decode_keypoints(hm);
    for (std::size_t j = 0; j < K; ++j) {
      const auto& gt = s.pose.joints[j];
      EXPECT_EQ(k[0][j].x, data::quantize(data::to_heatmap_coord(gt.x, 64, 16), 16));
      EXPECT_EQ(k[0][j].y, data::quantize(data::to_heatmap_coord(gt.y, 64, 16), 16));
    }
  }
}

TEST(Pck, ExactPredictionsScoreOne) {
  std::mt19937_64 rng(1);
  std::vector<data::Pose> gt{random_pose(rng), random_pose(rng)};
  for (double alpha : {0.01, 0.5, 2.0})
    EXPECT_DOUBLE_EQ(pck(as_pred(gt), gt, alpha, RefRule::HeadSegment).aggregate(), 1.0);
}

TEST(Pck, FarPredictionsScoreZero) {
  std::mt19937_64 rng(2);
  std::vector<data::Pose> gt{random_pose(rng)};
  const double ref = reference_length(gt[0], RefRule::HeadSegment);
  EXPECT_DOUBLE_EQ(pck(as_pred(gt, 10 * ref), gt, 0.5, RefRule::HeadSegment).aggregate(), 0.0);
}

TEST(Pck, HalfDisplacedScoresHalf) {
  std::mt19937_64 rng(3);
  std::vector<data::Pose> gt{random_pose(rng)};
  const double ref = reference_length(gt[0], RefRule::Torso);
  Keypoints pred = as_pred(gt);
  for (std::size_t j = 0; j < K; j += 2) pred[0][j].x += 0.2 * ref * 1.01;
  const EvalResult r = pck(pred, gt, 0.2, RefRule::Torso);
  EXPECT_DOUBLE_EQ(r.aggregate(), 0.5);
  EXPECT_DOUBLE_EQ(r.joint(0), 0.0);
  EXPECT_DOUBLE_EQ(r.joint(1), 1.0);
}

TEST(Pck, ThresholdIsInclusive) {
  data::Pose p;
  for (auto& j : p.joints) j = {0, 0, true};
  p.joints[data::kHead] = {0, 4, true};  // head segment of length 4
  Keypoints pred = as_pred({p});
  pred[0][0].x += 2.0;  // exactly 0.5 · 4
  EXPECT_EQ(pck(pred, {p}, 0.5, RefRule::HeadSegment).correct[0], 1u);
}

TEST(Pck, InvisibleJointsAreNotCounted) {
  std::mt19937_64 rng(4);
  std::vector<data::Pose> gt{random_pose(rng)};
  gt[0].joints[0].visible = false;
  Keypoints pred = as_pred(gt);
  pred[0][0].x += 100;
  const EvalResult r = pck(pred, gt, 0.5, RefRule::HeadSegment);
  EXPECT_EQ(r.total[0], 0u);
  EXPECT_DOUBLE_EQ(r.aggregate(), 1.0);
}

TEST(Pck, ZeroReferenceExcludesSample) {
  std::mt19937_64 rng(5);
  std::vector<data::Pose> gt{random_pose(rng), random_pose(rng)};
  gt[1].joints[data::kHead] = gt[1].joints[data::kNeck];
  const EvalResult r = pck(as_pred(gt), gt, 0.5, RefRule::HeadSegment);
  EXPECT_EQ(r.excluded_samples, (std::vector<std::size_t>{1}));
  EXPECT_EQ(r.total[0], 1u);
}

TEST(Pck, MonotoneInAlpha) {
  std::mt19937_64 rng(6);
  std::normal_distribution<double> noise(0, 1.5);
  std::vector<data::Pose> gt;
  for (int i = 0; i < 30; ++i) gt.push_back(random_pose(rng));
  Keypoints pred = as_pred(gt);
  for (auto& s : pred)
    for (auto& c : s) c = {c.x + noise(rng), c.y + noise(rng)};
  double prev = -1;
  for (double a = 0.05; a < 3; a += 0.05) {
    const double v = pck(pred, gt, a, RefRule::HeadSegment).aggregate();
    EXPECT_GE(v, prev);
    prev = v;
  }
}

TEST(Pck, InvariantUnderTranslationAndScaling) {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> noise(0, 1.0);
  std::vector<data::Pose> gt;
  for (int i = 0; i < 20; ++i) gt.push_back(random_pose(rng));
  Keypoints pred = as_pred(gt);
  for (auto& s : pred)
    for (auto& c : s) c = {c.x + noise(rng), c.y + noise(rng)};
  const double base = pck(pred, gt, 0.5, RefRule::Torso).aggregate();

  auto moved_gt = gt;
  auto moved_pred = pred;
  for (auto& p : moved_gt)
    for (auto& j : p.joints) j = {j.x + 7.25, j.y - 3.5, j.visible};
  for (auto& s : moved_pred)
    for (auto& c : s) c = {c.x + 7.25, c.y - 3.5};
  EXPECT_DOUBLE_EQ(pck(moved_pred, moved_gt, 0.5, RefRule::Torso).aggregate(), base);

  // Power-of-two scaling is exact in binary floating point.
  for (auto& p : moved_gt)
    for (auto& j : p.joints) j = {j.x * 4, j.y * 4, j.visible};
  for (auto& s : moved_pred)
    for (auto& c : s) c = {c.x * 4, c.y * 4};
  EXPECT_DOUBLE_EQ(pck(moved_pred, moved_gt, 0.5, RefRule::Torso).aggregate(), base);
}

TEST(Csv, HeaderRowsAndAggregate) {
  std::mt19937_64 rng(8);
  std::vector<data::Pose> gt{random_pose(rng)};
  const std::string csv = to_csv(pck(as_pred(gt), gt, 0.5, RefRule::HeadSegment));
  EXPECT_EQ(csv.rfind("joint,correct,total,pck\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), static_cast<long>(K + 2));
  EXPECT_NE(csv.find("\nALL,16,16,"), std::string::npos) << csv;
}

TEST(RefRules, ParseAndLengths) {
  EXPECT_EQ(parse_ref_rule("pckh"), RefRule::HeadSegment);
  EXPECT_EQ(parse_ref_rule("pck"), RefRule::Torso);
  EXPECT_THROW(parse_ref_rule("oks"), std::invalid_argument);
  data::Pose p;
  p.joints[data::kHead] = {3, 4, true};
  p.joints[data::kNeck] = {0, 0, true};
  p.joints[data::kPelvis] = {0, 10, true};
  p.joints[data::kThorax] = {6, 2, true};
  EXPECT_DOUBLE_EQ(reference_length(p, RefRule::HeadSegment), 5.0);
  EXPECT_DOUBLE_EQ(reference_length(p, RefRule::Torso), 10.0);
}

}  // namespace
