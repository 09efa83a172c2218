#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cunet/data.hpp"
#include "cunet/graph.hpp"
#include "cunet/metrics.hpp"
#include "cunet/network.hpp"

namespace cunet::train {

inline constexpr double kRmsAlpha = 0.99;
inline constexpr double kRmsEps = 1e-8;

// Running mean square of the gradient, one buffer per parameter name.
struct RMSPropState {
  std::map<std::string, std::vector<float>> s;
  double alpha = kRmsAlpha;
  double eps = kRmsEps;
};

// s ← α·s + (1−α)·g², θ ← θ − lr·g/(√s + eps). Returns false and leaves both
// buffers untouched if any gradient entry is non-finite.
template <typename T>
bool rmsprop_step(std::span<T> param, std::span<const T> grad, std::span<T> s, double lr,
                  double alpha = kRmsAlpha, double eps = kRmsEps);

struct Schedule {
  double initial_lr = 2.5e-4;
  double decayed_lr = 5e-5;
  std::size_t patience = 5;         // epochs without improvement before decay
  double min_improvement = 1e-4;    // absolute
};

struct TrainState {
  std::size_t epoch = 0;
  double lr = Schedule{}.initial_lr;
  std::size_t since_best = 0;
  double best = -std::numeric_limits<double>::infinity();
  std::uint64_t seed = 0;
  bool decayed = false;

  bool operator==(const TrainState&) const = default;
};

// Records one validation metric. A gain above min_improvement resets the
// plateau counter; after `patience` epochs without one the rate drops to
// decayed_lr, once.
TrainState lr_schedule(TrainState state, double val_metric, const Schedule& schedule = {});

struct TrainOptions {
  std::size_t epochs = 30;
  std::size_t batch = 8;
  bool augment = true;
  double val_fraction = 0.2;  // trailing share of the dataset
  double alpha = 0.5;
  metrics::RefRule ref = metrics::RefRule::HeadSegment;
  Schedule schedule;
  std::ostream* progress = nullptr;  // one line per epoch when set
  // Ends training after the first epoch whose validation metric reaches this.
  std::optional<double> stop_at;
};

struct EpochLog {
  std::size_t epoch = 0;
  double train_loss = 0;
  double val_pck = 0;
  double lr = 0;
  double seconds = 0;
};

std::string log_header();
std::string log_row(const EpochLog& e);

struct TrainResult {
  TrainState state;
  std::vector<EpochLog> log;
  double final_val_pck = 0;
  std::size_t skipped_steps = 0;  // non-finite gradients
  bool aborted = false;           // non-finite loss
  bool stopped_early = false;     // stop_at reached
  std::string message;
};

struct Split {
  std::vector<data::Sample> train;
  std::vector<data::Sample> val;
};
Split split_dataset(std::vector<data::Sample> samples, double val_fraction);

// Stacks samples into an N × C × res × res batch (replicating single-channel
// images across C) and the matching N × K × R × R target.
void make_batch(std::span<const data::Sample* const> samples, std::size_t in_channels,
                Tensor<float>& x, Tensor<float>& target);

// PCK of the final head on `samples` in inference mode.
metrics::EvalResult evaluate(const NetworkGraph& g, ParameterStore<float>& store,
                             const std::vector<data::Sample>& samples, double alpha,
                             metrics::RefRule ref, std::size_t batch = 32);

// Trains from a fresh initialization. Writes `checkpoint.bin` (the best
// validation state; the initial state before any epoch) and `log.csv` into
// out_dir when it is non-empty.
TrainResult train(const ModelSpec& spec, const Split& data, const TrainOptions& opts,
                  const std::filesystem::path& out_dir);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Checkpoint {
  ModelSpec spec;
  TrainState state;
  ParameterStore<float> store;
  RMSPropState optimizer;
};

// Magic "CUNC", u32 version 1, u64 length of a key-value block (model and
// train state), u64 array count, then arrays: u32 name length, name, u32 rank,
// u64 dims, binary32 data. Written atomically.
void save_checkpoint(const std::filesystem::path& path, const ModelSpec& spec,
                     const TrainState& state, const ParameterStore<float>& store,
                     const RMSPropState& optimizer);
// Parses and validates the whole file before returning.
Checkpoint load_checkpoint(const std::filesystem::path& path);
// Throws CheckpointError naming the first parameter or statistic whose name or
// shape disagrees with g; nothing is modified on failure.
void apply_checkpoint(const Checkpoint& ckpt, const NetworkGraph& g, ParameterStore<float>& store,
                      RMSPropState* optimizer = nullptr);

struct CompareRow {
  Arch arch = Arch::Coupled;
  std::uint64_t params = 0;
  double final_val_pck = 0;
  double best_val_pck = 0;
  double seconds = 0;
};

struct CompareResult {
  std::vector<CompareRow> rows;  // coupled, stacked, dense
  CalibrationResult calibration;
};

// Trains the coupled net, its coupling-off twin and a dense U-Net calibrated
// to the coupled parameter count, all with the same seed and budget. Throws
// CalibrationError if no dense U-Net lands within tolerance.
CompareResult compare(const CUNetConfig& cu, const Split& data, const TrainOptions& opts,
                      const std::filesystem::path& out_dir);
std::string compare_csv(const CompareResult& r);

}  // namespace cunet::train
