#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "slpmt/model.hpp"
#include "slpmt/rng.hpp"
#include "slpmt/tensor.hpp"

namespace slpmt {

struct TrainConfig {
  double learning_rate = 3e-4;
  std::size_t warmup_steps = 200;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double adam_epsilon = 1e-8;
  double label_smoothing = 0.1;
  std::size_t batch_tokens = 2048;
  std::size_t stage1_epochs = 15;
  std::size_t stage2_epochs = 5;
  // Probability of taking the soft (weighted-mixture) path on a batch.
  double alternation_probability = 0.5;
  bool disparity = true;
  double disparity_weight = 1.0;
  bool disparity_in_stage2 = true;
  std::size_t checkpoint_average = 5;
  std::uint64_t seed = 1;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

enum class Stage { one, two, baseline };

const char* stage_name(Stage s);
Stage parse_stage(std::string_view s);

// Mean over non-pad positions of (1 - eps) * NLL(target) + eps * mean_v NLL(v).
Tensor label_smoothed_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets, double smoothing,
                                    int pad_id = kPadId);

// Sum over language pairs i < k of alpha_i . alpha_k for alphas (M, T),
// divided by target_tokens. Zero when fewer than two rows.
Tensor disparity_loss(Tape& tape, const Tensor& alphas, std::size_t target_tokens);

double scheduled_learning_rate(const TrainConfig& config, std::uint64_t step);

struct AdamMoments {
  std::vector<double> first;
  std::vector<double> second;
  std::uint64_t updates = 0;
};

// One bias-corrected Adam update of a single array.
void adam_update(std::span<double> param, std::span<const double> grad, AdamMoments& state, double learning_rate,
                 const TrainConfig& config);

// Adam over a model's parameters. Arrays that received no gradient in the
// current step are left untouched, moments included.
class Optimizer {
 public:
  explicit Optimizer(TrainConfig config) : config_(std::move(config)) {}

  // Applies one step to every parameter with a gradient buffer; returns the
  // learning rate used. Aborts on non-finite gradients.
  double step(ModelParams& params);
  std::uint64_t steps() const { return steps_; }
  void reset() {
    moments_.clear();
    steps_ = 0;
  }

  const std::map<std::string, AdamMoments>& moments() const { return moments_; }
  void restore(std::map<std::string, AdamMoments> moments, std::uint64_t steps) {
    moments_ = std::move(moments);
    steps_ = steps;
  }
  // Names of the arrays updated by the most recent step.
  const std::vector<std::string>& last_updated() const { return last_updated_; }

 private:
  TrainConfig config_;
  std::map<std::string, AdamMoments> moments_;
  std::uint64_t steps_ = 0;
  std::vector<std::string> last_updated_;
};

struct StepReport {
  std::uint64_t step = 0;
  Stage stage = Stage::one;
  std::size_t language = 0;
  PathMode path = PathMode::hard;
  double loss = 0.0;
  double cross_entropy = 0.0;
  double disparity = 0.0;  // token-normalized, weighted term added to the loss
  double learning_rate = 0.0;
  std::size_t target_tokens = 0;
};

// Forward + loss + backward without touching the optimizer. Grad buffers of
// params are cleared first.
StepReport compute_gradients(ModelParams& params, const Batch& batch, Stage stage, const TrainConfig& config,
                             Rng& rng);

StepReport stage1_step(ModelParams& params, Optimizer& opt, const Batch& batch, const TrainConfig& config, Rng& rng);
StepReport stage2_step(ModelParams& params, Optimizer& opt, const Batch& batch, const TrainConfig& config, Rng& rng);
StepReport baseline_step(ModelParams& params, Optimizer& opt, const Batch& batch, const TrainConfig& config,
                         Rng& rng);
StepReport train_step(Stage stage, ModelParams& params, Optimizer& opt, const Batch& batch, const TrainConfig& config,
                      Rng& rng);

std::string step_report_json(const StepReport& r, const ModelConfig& model);

}  // namespace slpmt
