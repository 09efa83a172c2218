#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "cunet/supervision.hpp"
#include "cunet/trainer.hpp"

using namespace cunet;
using namespace cunet::train;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("cunet_trainer_" + name);
  std::filesystem::remove_all(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

CUNetConfig tiny16() {
  CUNetConfig c;
  c.m = 8;
  c.n = 4;
  c.depth = 2;
  c.keypoints = data::kNumJoints;
  c.input_res = 64;
  c.seed = 5;
  return c;
}

std::vector<data::Sample> samples(std::size_t count, std::uint64_t seed = 21) {
  std::vector<data::Sample> out;
  for (std::size_t i = 0; i < count; ++i) out.push_back(data::generate_sample(seed, i, 64, 1.0));
  return out;
}

TEST(RmsProp, ClosedFormSingleStep) {
  std::vector<double> theta{0.0}, s{0.0};
  const std::vector<double> g{1.0};
  ASSERT_TRUE(rmsprop_step<double>(theta, g, s, 1e-3, 0.99, 1e-8));
  EXPECT_NEAR(s[0], 0.01, 1e-15);
  EXPECT_NEAR(theta[0], -1e-3 / (0.1 + 1e-8), 1e-15);
  EXPECT_NEAR(theta[0], -9.999e-3, 1e-6);
}

TEST(RmsProp, ZeroGradientOnlyDecaysAccumulator) {
  std::vector<double> theta{1.5, -2.0}, s{0.4, 0.2};
  const std::vector<double> g{0.0, 0.0};
  ASSERT_TRUE(rmsprop_step<double>(theta, g, s, 1e-3));
  EXPECT_EQ(theta[0], 1.5);
  EXPECT_EQ(theta[1], -2.0);
  EXPECT_DOUBLE_EQ(s[0], 0.99 * 0.4);
  EXPECT_DOUBLE_EQ(s[1], 0.99 * 0.2);
}

TEST(RmsProp, QuadraticDescendsMonotonically) {
  std::vector<double> theta{3.0}, s{0.0};
  double prev = 3.0;
  for (int step = 0; step < 100; ++step) {
    const std::vector<double> g{2 * theta[0]};
    ASSERT_TRUE(rmsprop_step<double>(theta, g, s, 1e-2));
    ASSERT_LT(std::abs(theta[0]), prev) << step;
    prev = std::abs(theta[0]);
  }
}

TEST(RmsProp, NonFiniteGradientSkipsStep) {
  std::vector<float> theta{1.0f}, s{0.5f};
  const std::vector<float> g{std::numeric_limits<float>::quiet_NaN()};
  EXPECT_FALSE(rmsprop_step<float>(theta, g, s, 1e-3));
  EXPECT_EQ(theta[0], 1.0f);
  EXPECT_EQ(s[0], 0.5f);
}

TEST(RmsProp, RejectsBadArguments) {
  std::vector<double> theta{1.0}, s{0.0};
  const std::vector<double> g{1.0, 2.0};
  EXPECT_THROW(rmsprop_step<double>(theta, g, s, 1e-3), std::invalid_argument);
  const std::vector<double> g1{1.0};
  EXPECT_THROW(rmsprop_step<double>(theta, g1, s, 0.0), std::invalid_argument);
}

TEST(Schedule, ImprovingMetricKeepsInitialRate) {
  TrainState s;
  for (int e = 0; e < 20; ++e) s = lr_schedule(s, 0.01 * e);
  EXPECT_EQ(s.lr, 2.5e-4);
  EXPECT_FALSE(s.decayed);
}

TEST(Schedule, FlatMetricDecaysAtEpochSix) {
  TrainState s;
  s = lr_schedule(s, 0.5);  // epoch 1 sets the best
  for (int e = 2; e <= 5; ++e) {
    s = lr_schedule(s, 0.5);
    EXPECT_EQ(s.lr, 2.5e-4) << e;
  }
  s = lr_schedule(s, 0.50005);  // below the improvement threshold
  EXPECT_EQ(s.lr, 5e-5);
  for (int e = 0; e < 20; ++e) s = lr_schedule(s, 0.4);
  EXPECT_EQ(s.lr, 5e-5);
}

TEST(Schedule, RateTakesOnlyTwoValues) {
  TrainState s;
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> d(0, 1);
  for (int e = 0; e < 200; ++e) {
    s = lr_schedule(s, d(rng));
    EXPECT_TRUE(s.lr == 2.5e-4 || s.lr == 5e-5);
  }
}

TEST(Batch, ReplicatesSingleChannelImages) {
  const auto ss = samples(2);
  std::vector<const data::Sample*> ptrs{&ss[0], &ss[1]};
  Tensor<float> x, t;
  make_batch(ptrs, 3, x, t);
  ASSERT_EQ(x.shape(), (Shape{2, 3, 64, 64}));
  ASSERT_EQ(t.shape(), (Shape{2, data::kNumJoints, 16, 16}));
  for (std::size_t c = 0; c < 3; ++c)
    EXPECT_EQ(std::memcmp(x.ptr() + (3 + c) * 64 * 64, ss[1].image.ptr(), 64 * 64 * sizeof(float)),
              0);
}

TEST(Split, TrailingShareIsValidation) {
  const Split s = split_dataset(samples(10), 0.2);
  ASSERT_EQ(s.train.size(), 8u);
  ASSERT_EQ(s.val.size(), 2u);
  const auto ref = data::generate_sample(21, 8, 64, 1.0);
  EXPECT_EQ(std::memcmp(s.val[0].image.ptr(), ref.image.ptr(), 64 * 64 * sizeof(float)), 0);
}

TEST(Train, ZeroEpochsWritesInitialCheckpointOnly) {
  const auto dir = temp_dir("zero");
  TrainOptions o;
  o.epochs = 0;
  const auto r = train::train(ModelSpec::coupled(tiny16()), split_dataset(samples(8), 0.25), o, dir);
  EXPECT_TRUE(r.log.empty());
  EXPECT_EQ(slurp(dir / "log.csv"), log_header() + "\n");
  const Checkpoint c = load_checkpoint(dir / "checkpoint.bin");
  EXPECT_EQ(c.state.epoch, 0u);
  const auto init = init_parameters<float>(c.spec.build(), c.spec.seed());
  for (const auto& [name, t] : init.params)
    EXPECT_EQ(std::memcmp(t.ptr(), c.store.params.at(name).ptr(), t.numel() * sizeof(float)), 0);
}

TEST(Train, FixedSeedGivesIdenticalTrajectories) {
  const Split data = split_dataset(samples(24), 0.25);
  TrainOptions o;
  o.epochs = 2;
  const auto da = temp_dir("det_a"), db = temp_dir("det_b");
  const auto a = train::train(ModelSpec::coupled(tiny16()), data, o, da);
  const auto b = train::train(ModelSpec::coupled(tiny16()), data, o, db);
  ASSERT_EQ(a.log.size(), 2u);
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    EXPECT_EQ(a.log[i].train_loss, b.log[i].train_loss);
    EXPECT_EQ(a.log[i].val_pck, b.log[i].val_pck);
    EXPECT_EQ(a.log[i].lr, b.log[i].lr);
  }
  EXPECT_EQ(slurp(da / "checkpoint.bin"), slurp(db / "checkpoint.bin"));
}

double mean_loss(const NetworkGraph& g, ParameterStore<float>& store,
                 const std::vector<data::Sample>& ss, std::size_t batch) {
  double sum = 0;
  for (std::size_t start = 0; start < ss.size(); start += batch) {
    std::vector<const data::Sample*> ptrs;
    for (std::size_t i = start; i < std::min(ss.size(), start + batch); ++i) ptrs.push_back(&ss[i]);
    Tensor<float> x, t;
    make_batch(ptrs, g.input_channels(), x, t);
    auto st = store.cast<float>();
    const auto heads = forward(g, st, x, ops::Mode::Train);
    sum += total_loss<float>(nullptr, heads, t).item() * static_cast<double>(ptrs.size());
  }
  return sum / static_cast<double>(ss.size());
}

TEST(Train, OverfitsSixtyFourSamples) {
  Split data;
  data.train = samples(64, 31);
  TrainOptions o;
  o.epochs = 20;
  o.augment = false;
  const ModelSpec spec = ModelSpec::coupled(tiny16());
  const NetworkGraph g = spec.build();
  auto init = init_parameters<float>(g, spec.seed());
  const double initial = mean_loss(g, init, data.train, o.batch);
  const auto r = train::train(spec, data, o, {});
  ASSERT_EQ(r.log.size(), 20u);
  EXPECT_LT(r.log.back().train_loss, 0.5 * initial)
      << "initial " << initial << " final " << r.log.back().train_loss;
}

TEST(Train, NonFiniteLossAbortsKeepingCheckpoint) {
  const auto dir = temp_dir("nan");
  Split data = split_dataset(samples(8), 0.25);
  data.train[0].heatmaps[0] = std::numeric_limits<float>::quiet_NaN();
  TrainOptions o;
  o.epochs = 3;
  o.augment = false;
  o.batch = 6;
  const auto r = train::train(ModelSpec::coupled(tiny16()), data, o, dir);
  EXPECT_TRUE(r.aborted);
  EXPECT_FALSE(r.message.empty());
  EXPECT_NO_THROW(load_checkpoint(dir / "checkpoint.bin"));
}

TEST(Train, LogRowFormat) {
  EXPECT_EQ(log_header(), "epoch,train_loss,val_pck,lr,seconds");
  EXPECT_EQ(log_row({3, 0.5, 0.25, 2.5e-4, 1.5}), "3,0.5,0.250000,0.00025,1.500");
}

struct Fixture {
  ModelSpec spec = ModelSpec::coupled(tiny16());
  NetworkGraph g = spec.build();
  ParameterStore<float> store = init_parameters<float>(g, 9);
  RMSPropState opt;
  TrainState state;

  Fixture() {
    std::mt19937_64 rng(4);
    std::normal_distribution<float> d(0, 0.3f);
    for (auto& [name, s] : store.bn_stats)
      for (std::size_t i = 0; i < s.mean.size(); ++i) {
        s.mean[i] = d(rng);
        s.var[i] = 1 + std::abs(d(rng));
      }
    for (const auto& [name, t] : store.params) {
      auto& v = opt.s[name];
      v.resize(t.numel());
      for (auto& e : v) e = std::abs(d(rng));
    }
    state.epoch = 7;
    state.lr = 5e-5;
    state.best = 0.123456789;
    state.since_best = 2;
    state.decayed = true;
    state.seed = 5;
  }
};

Tensor<float> fixed_input() {
  const auto s = data::generate_sample(1, 0, 64, 1.0);
  return s.image.reshaped({1, 1, 64, 64});
}

TEST(Checkpoint, RoundTripIsBitwise) {
  Fixture f;
  const auto path = temp_dir("ckpt") / "c.bin";
  std::filesystem::create_directories(path.parent_path());
  save_checkpoint(path, f.spec, f.state, f.store, f.opt);
  const Checkpoint c = load_checkpoint(path);
  EXPECT_EQ(c.state, f.state);
  EXPECT_EQ(c.spec.cu, f.spec.cu);

  auto fresh = init_parameters<float>(f.g, 1234);
  RMSPropState opt;
  apply_checkpoint(c, f.g, fresh, &opt);
  for (const auto& [name, v] : f.opt.s) EXPECT_EQ(opt.s.at(name), v) << name;
  for (const auto& [name, s] : f.store.bn_stats) {
    EXPECT_EQ(fresh.bn_stats.at(name).mean, s.mean);
    EXPECT_EQ(fresh.bn_stats.at(name).var, s.var);
  }
  const auto x = fixed_input();
  const auto ya = forward(f.g, f.store, x, ops::Mode::Eval);
  const auto yb = forward(f.g, fresh, x, ops::Mode::Eval);
  EXPECT_EQ(std::memcmp(ya.back().ptr(), yb.back().ptr(), ya.back().numel() * sizeof(float)), 0);
}

TEST(Checkpoint, TruncatedFileIsRejected) {
  Fixture f;
  const auto dir = temp_dir("trunc");
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "c.bin", f.spec, f.state, f.store, f.opt);
  const std::string bytes = slurp(dir / "c.bin");
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    std::ofstream(dir / "t.bin", std::ios::binary) << bytes.substr(0, cut);
    EXPECT_THROW(load_checkpoint(dir / "t.bin"), CheckpointError) << cut;
  }
  std::string bad = bytes;
  bad[4] = 9;  // version
  std::ofstream(dir / "v.bin", std::ios::binary) << bad;
  EXPECT_THROW(load_checkpoint(dir / "v.bin"), CheckpointError);
}

TEST(Checkpoint, MismatchedGraphIsNamedAndNothingApplied) {
  Fixture f;
  const auto dir = temp_dir("mismatch");
  std::filesystem::create_directories(dir);
  save_checkpoint(dir / "c.bin", f.spec, f.state, f.store, f.opt);
  const Checkpoint c = load_checkpoint(dir / "c.bin");

  CUNetConfig other = tiny16();
  other.m = 12;
  const NetworkGraph g2 = build_cu_net(other);
  auto store = init_parameters<float>(g2, 0);
  const auto before = store.cast<float>();
  try {
    apply_checkpoint(c, g2, store);
    FAIL();
  } catch (const CheckpointError& e) {
    EXPECT_NE(std::string(e.what()).find("stem"), std::string::npos) << e.what();
  }
  for (const auto& [name, t] : before.params)
    EXPECT_EQ(std::memcmp(t.ptr(), store.params.at(name).ptr(), t.numel() * sizeof(float)), 0);
}

}  // namespace
