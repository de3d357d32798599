#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mirror/data_model.hpp"
#include "mirror/model.hpp"
#include "mirror/objectives.hpp"

namespace mirror {

enum class Precision { f32, f64 };

struct TrainConfig {
  int epochs = 100;
  int batch_size = 16;
  double learning_rate = 2e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  ObjectiveConfig objective{};
  std::uint64_t seed = 0;
  Precision precision = Precision::f32;
  // Only parameters whose name starts with one of these are updated; empty = all.
  std::vector<std::string> trainable_prefixes;

  void validate() const;
};

struct AdamState {
  std::vector<Tensor> m, v;  // indexed like the parameter store
  std::int64_t step = 0;
};

struct ModelState {
  MirrorModel model;
  ParamStore params;
  AdamState adam;

  friend bool operator==(const ModelState& a, const ModelState& b);
};

// Fresh parameters drawn from `seed`; zero optimizer moments.
ModelState init_state(const ModelConfig& cfg, std::uint64_t seed);

struct TrainLogEntry {
  std::int64_t step = 0;
  int epoch = 0;
  LossBreakdown loss;
};

struct TrainResult {
  ModelState state;
  std::vector<TrainLogEntry> log;
};

using StepCallback = std::function<void(const TrainLogEntry&)>;

// Adam over every parameter that receives a gradient; cluster centers are
// renormalized after each step. Throws NumericError on a non-finite loss or
// parameter, naming the step.
TrainResult train(const Dataset& ds, ModelState state, const TrainConfig& cfg, const StepCallback& on_step = {});

// Mean of each loss term per epoch, in epoch order.
std::vector<LossBreakdown> epoch_means(const std::vector<TrainLogEntry>& log);

void write_train_log(const std::vector<TrainLogEntry>& log, const std::filesystem::path& path);

// Binary checkpoint: "MIRC", version, model config block, then
// (name length, name, rank, dims, float64 data) records for parameters and
// optimizer moments.
inline constexpr std::uint32_t kCheckpointVersion = 1;
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

// ---- gradient verification ------------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  int coordinates = 0;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double tolerance = 0.0;
  double max_rel_error = 0.0;
  bool passed = false;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  int coords_per_tensor = 20;
  double relative_step = 1e-5;  // h = relative_step * max(1, |theta|)
  double error_floor = 1e-5;    // denominators below this are treated as absolute error
  std::uint64_t seed = 0;
};

// Compares `analytic` (one tensor per store entry, empty = not checked) with
// central differences of `loss` over a random subsample of coordinates.
GradCheckReport check_gradients(ParamStore& params, const std::function<double(const ParamStore&)>& loss,
                                const std::vector<Tensor>& analytic, const GradCheckOptions& opts);

// Full objective at 64-bit precision with masks, noise and retention targets
// held fixed. `grad_scale` multiplies the analytic gradient (negative controls).
GradCheckReport finite_diff_check(const ModelState& state, const Batch& batch, const ObjectiveConfig& cfg,
                                  const GradCheckOptions& opts, double grad_scale = 1.0);

}  // namespace mirror
