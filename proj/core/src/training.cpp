#include "slpmt/training.hpp"

#include <algorithm>
#include <cmath>

#include "json_util.hpp"

namespace slpmt {

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(label_smoothing >= 0.0 && label_smoothing < 1.0)) fail("label_smoothing must lie in [0, 1)");
  if (!(alternation_probability >= 0.0 && alternation_probability <= 1.0))
    fail("alternation_probability must lie in [0, 1]");
  if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
  if (warmup_steps < 1) fail("warmup_steps must be at least 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("adam betas must lie in [0, 1)");
  if (!(adam_epsilon > 0.0)) fail("adam_epsilon must be positive");
  if (batch_tokens < 1) fail("batch_tokens must be positive");
  if (!(disparity_weight >= 0.0)) fail("disparity_weight must be nonnegative");
}

const char* stage_name(Stage s) {
  switch (s) {
    case Stage::one: return "1";
    case Stage::two: return "2";
    case Stage::baseline: return "baseline";
  }
  return "?";
}

Stage parse_stage(std::string_view s) {
  if (s == "1") return Stage::one;
  if (s == "2") return Stage::two;
  if (s == "baseline") return Stage::baseline;
  throw std::invalid_argument("unknown stage '" + std::string(s) + "' (expected 1, 2 or baseline)");
}

Tensor label_smoothed_cross_entropy(Tape& tape, const Tensor& logits, std::span<const int> targets, double smoothing,
                                    int pad_id) {
  const std::size_t v = logits.shape().back();
  const std::size_t rows = logits.size() / v;
  if (rows != targets.size())
    throw ShapeError("label_smoothed_cross_entropy: " + std::to_string(targets.size()) + " targets for logits " +
                     shape_string(logits.shape()));
  std::vector<double> q(rows * v, 0.0);
  std::size_t tokens = 0;
  const double spread = smoothing / static_cast<double>(v);
  for (std::size_t r = 0; r < rows; ++r) {
    if (targets[r] == pad_id) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= v)
      throw std::out_of_range("label_smoothed_cross_entropy: target id outside vocabulary");
    ++tokens;
    std::fill_n(q.begin() + r * v, v, spread);
    q[r * v + static_cast<std::size_t>(targets[r])] += 1.0 - smoothing;
  }
  if (tokens == 0) throw std::invalid_argument("label_smoothed_cross_entropy: every target is padding");
  Tensor logp = tape.reshape(tape.log_softmax(logits), {rows, v});
  Tensor weighted = tape.multiply(logp, Tensor::from_values({rows, v}, std::move(q)));
  return tape.scale(tape.sum(weighted), -1.0 / static_cast<double>(tokens));
}

Tensor disparity_loss(Tape& tape, const Tensor& alphas, std::size_t target_tokens) {
  if (alphas.rank() != 2) throw ShapeError("disparity_loss: alphas must be (M, T), got " + shape_string(alphas.shape()));
  if (target_tokens == 0) throw std::invalid_argument("disparity_loss: target token count must be positive");
  const std::size_t m = alphas.dim(0);
  if (m < 2) return Tensor::scalar(0.0);
  Tensor gram = tape.matmul(alphas, alphas, true);  // (M, M)
  std::vector<double> upper(m * m, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t k = i + 1; k < m; ++k) upper[i * m + k] = 1.0;
  Tensor pairs = tape.sum(tape.multiply(gram, Tensor::from_values({m, m}, std::move(upper))));
  return tape.scale(pairs, 1.0 / static_cast<double>(target_tokens));
}

double scheduled_learning_rate(const TrainConfig& c, std::uint64_t step) {
  if (step < 1) throw std::invalid_argument("scheduled_learning_rate: step must be at least 1");
  const double s = static_cast<double>(step), w = static_cast<double>(c.warmup_steps);
  return c.learning_rate * std::min(s / w, std::sqrt(w / s));
}

void adam_update(std::span<double> param, std::span<const double> grad, AdamMoments& st, double lr,
                 const TrainConfig& c) {
  if (param.size() != grad.size()) throw ShapeError("adam_update: parameter and gradient sizes differ");
  for (double g : grad)
    if (!std::isfinite(g)) throw NumericError("adam_update: non-finite gradient");
  if (st.first.empty()) {
    st.first.assign(param.size(), 0.0);
    st.second.assign(param.size(), 0.0);
  }
  ++st.updates;
  const double t = static_cast<double>(st.updates);
  const double c1 = 1.0 - std::pow(c.beta1, t);
  const double c2 = 1.0 - std::pow(c.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    st.first[i] = c.beta1 * st.first[i] + (1.0 - c.beta1) * grad[i];
    st.second[i] = c.beta2 * st.second[i] + (1.0 - c.beta2) * grad[i] * grad[i];
    const double mhat = st.first[i] / c1;
    const double vhat = st.second[i] / c2;
    param[i] -= lr * mhat / (std::sqrt(vhat) + c.adam_epsilon);
  }
}

double Optimizer::step(ModelParams& params) {
  ++steps_;
  const double lr = scheduled_learning_rate(config_, steps_);
  last_updated_.clear();
  auto all = params.named();
  for (auto& p : all) {
    if (!p.tensor.has_grad()) continue;
    for (double g : p.tensor.grad())
      if (!std::isfinite(g)) throw NumericError("optimizer: non-finite gradient in '" + p.name + "' at step " +
                                                 std::to_string(steps_));
  }
  for (auto& p : all) {
    if (!p.tensor.has_grad()) continue;
    adam_update(p.tensor.mutable_values(), p.tensor.grad(), moments_[p.name], lr, config_);
    last_updated_.push_back(p.name);
  }
  return lr;
}

StepReport compute_gradients(ModelParams& params, const Batch& batch, Stage stage, const TrainConfig& config,
                             Rng& rng) {
  const ModelConfig& mc = params.config;
  if (batch.language >= mc.languages.size()) throw std::out_of_range("batch language is not registered");
  const Tier tier = mc.languages[batch.language].tier;
  if (stage == Stage::one && tier != Tier::high)
    throw std::invalid_argument("stage 1 trains high-resource directions only; got '" + mc.languages[batch.language].id +
                                "'");
  if (stage == Stage::baseline && mc.language_specific)
    throw std::invalid_argument("baseline training expects a model without language-specific modules");
  if (stage != Stage::baseline && !mc.language_specific)
    throw std::invalid_argument("two-stage training expects a model with language-specific modules");

  StepReport r;
  r.stage = stage;
  r.language = batch.language;
  r.target_tokens = batch.target_tokens();
  const bool high = tier == Tier::high && mc.language_specific;
  // Drawn on every batch, with or without a pool.
  const bool soft = rng.bernoulli(config.alternation_probability);
  r.path = high && soft ? PathMode::soft : PathMode::hard;

  params.zero_grad();
  Tape tape;
  ForwardOptions opt{r.path, true, &rng};
  ForwardResult fwd = model_forward(tape, params, batch, opt);
  Tensor loss = label_smoothed_cross_entropy(tape, fwd.logits, batch.target_out, config.label_smoothing);
  r.cross_entropy = loss.item();
  const bool with_disparity =
      high && config.disparity && (stage == Stage::one || config.disparity_in_stage2);
  if (with_disparity) {
    std::vector<int> hrl;
    for (std::size_t k = 0; k < mc.languages.size(); ++k)
      if (mc.languages[k].tier == Tier::high) hrl.push_back(static_cast<int>(k));
    Tensor ld = tape.scale(disparity_loss(tape, selection_alphas(tape, params, hrl), r.target_tokens),
                           config.disparity_weight);
    r.disparity = ld.item();
    if (ld.requires_grad()) loss = tape.add(loss, ld);
  }
  r.loss = loss.item();
  if (!std::isfinite(r.loss)) throw NumericError("training: non-finite loss");
  tape.backward(loss);
  return r;
}

namespace {
StepReport apply(ModelParams& params, Optimizer& opt, const Batch& batch, Stage stage, const TrainConfig& config,
                 Rng& rng) {
  StepReport r = compute_gradients(params, batch, stage, config, rng);
  r.learning_rate = opt.step(params);
  r.step = opt.steps();
  return r;
}
}  // namespace

StepReport stage1_step(ModelParams& params, Optimizer& opt, const Batch& batch, const TrainConfig& config, Rng& rng) {
  return apply(params, opt, batch, Stage::one, config, rng);
}

StepReport stage2_step(ModelParams& params, Optimizer& opt, const Batch& batch, const TrainConfig& config, Rng& rng) {
  return apply(params, opt, batch, Stage::two, config, rng);
}

StepReport baseline_step(ModelParams& params, Optimizer& opt, const Batch& batch, const TrainConfig& config,
                         Rng& rng) {
  return apply(params, opt, batch, Stage::baseline, config, rng);
}

StepReport train_step(Stage stage, ModelParams& params, Optimizer& opt, const Batch& batch, const TrainConfig& config,
                      Rng& rng) {
  return apply(params, opt, batch, stage, config, rng);
}

std::string step_report_json(const StepReport& r, const ModelConfig& model) {
  detail::json j;
  j["step"] = r.step;
  j["stage"] = stage_name(r.stage);
  j["direction"] = model.languages.at(r.language).id;
  j["loss"] = r.loss;
  j["cross_entropy"] = r.cross_entropy;
  j["disparity"] = r.disparity;
  j["lr"] = r.learning_rate;
  j["path"] = r.path == PathMode::hard ? "hard" : "soft";
  j["tokens"] = r.target_tokens;
  return j.dump();
}

}  // namespace slpmt
