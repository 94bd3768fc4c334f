#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "slpmt/eval.hpp"
#include "slpmt/experiment.hpp"
#include "slpmt/training.hpp"

using namespace slpmt;
using namespace slpmt::test;

namespace {

double module_grad(const Bottleneck& m) {
  return sum_abs(m.up.grad_or_zero()) + sum_abs(m.down.grad_or_zero()) + sum_abs(m.norm_gain.grad_or_zero()) +
         sum_abs(m.norm_bias.grad_or_zero());
}

std::vector<double> flatten(const Bottleneck& m) {
  std::vector<double> out;
  for (const Tensor* t : {&m.up, &m.down, &m.norm_gain, &m.norm_bias}) out.insert(out.end(), t->values().begin(), t->values().end());
  return out;
}

std::vector<double> flatten(const ModelParams& p) {
  std::vector<double> out;
  for (const auto& n : p.named()) out.insert(out.end(), n.tensor.values().begin(), n.tensor.values().end());
  return out;
}

Tensor alphas(std::size_t m, std::size_t t, std::vector<double> v) { return Tensor::from_values({m, t}, std::move(v)); }

}  // namespace

TEST_CASE("label-smoothed cross-entropy") {
  Tape tape(Tape::Mode::inference);
  SUBCASE("near one-hot prediction without smoothing") {
    const Tensor logits = Tensor::from_values({1, 4}, {60, 0, 0, 0});
    CHECK(label_smoothed_cross_entropy(tape, logits, std::vector<int>{0}, 0.0, -1).item() < 1e-20);
  }
  SUBCASE("uniform logits give ln V") {
    const Tensor logits = Tensor::zeros({3, 7});
    CHECK(label_smoothed_cross_entropy(tape, logits, std::vector<int>{1, 4, 6}, 0.0).item() ==
          doctest::Approx(std::log(7.0)).epsilon(1e-14));
  }
  SUBCASE("hand-computed smoothed loss") {
    const Tensor logits = Tensor::from_values({1, 4}, {2, 0, 0, 0});
    const double log_z = std::log(std::exp(2.0) + 3.0);
    // q = 0.925 on the target, 0.025 elsewhere.
    const double expected = 0.925 * (log_z - 2.0) + 3 * 0.025 * log_z;
    CHECK(std::abs(label_smoothed_cross_entropy(tape, logits, std::vector<int>{0}, 0.1, -1).item() - expected) <= 1e-14);
  }
  SUBCASE("padding rows are ignored") {
    const Tensor logits = random_tensor({3, 5}, 3);
    const Tensor first = tape.slice(logits, 0, 0, 1);
    const double one = label_smoothed_cross_entropy(tape, first, std::vector<int>{3}, 0.1).item();
    const double padded = label_smoothed_cross_entropy(tape, logits, std::vector<int>{3, kPadId, kPadId}, 0.1).item();
    CHECK(one == padded);
    CHECK_THROWS(label_smoothed_cross_entropy(tape, logits, std::vector<int>{0, 0, 0}, 0.1));
  }
  SUBCASE("gradient") {
    const std::vector<int> targets{3, 1, kPadId, 4};
    CHECK(finite_difference_check(
              [&](Tape& t, const Tensor& x) { return label_smoothed_cross_entropy(t, x, targets, 0.1); },
              random_tensor({2, 2, 6}, 4), 1e-5) <= 1e-4);
  }
}

TEST_CASE("disparity loss") {
  Tape tape(Tape::Mode::inference);
  CHECK(disparity_loss(tape, alphas(2, 3, {1, 0, 0, 0, 1, 0}), 1).item() == 0.0);
  CHECK(std::abs(disparity_loss(tape, alphas(2, 3, {0, 1, 0, 0, 1, 0}), 1).item() - 1.0) <= 1e-12);
  const double third = 1.0 / 3.0;
  CHECK(std::abs(disparity_loss(tape, alphas(3, 3, std::vector<double>(9, third)), 1).item() - 1.0) <= 1e-12);
  CHECK(std::abs(disparity_loss(tape, alphas(3, 3, std::vector<double>(9, third)), 40).item() - 1.0 / 40.0) <= 1e-15);
  CHECK(disparity_loss(tape, alphas(1, 3, {0.2, 0.3, 0.5}), 5).item() == 0.0);

  // Symmetric in language order.
  const Tensor a = tape.softmax(random_tensor({4, 3}, 5));
  const Tensor permuted = tape.concat({tape.slice(a, 0, 2, 4), tape.slice(a, 0, 0, 2)}, 0);
  CHECK(std::abs(disparity_loss(tape, a, 7).item() - disparity_loss(tape, permuted, 7).item()) <= 1e-15);
  // Brute-force pair sum.
  double want = 0.0;
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t k = i + 1; k < 4; ++k)
      for (std::size_t t = 0; t < 3; ++t) want += a[i * 3 + t] * a[k * 3 + t];
  CHECK(std::abs(disparity_loss(tape, a, 1).item() - want) <= 1e-14);
  CHECK(finite_difference_check([](Tape& t, const Tensor& x) { return disparity_loss(t, t.softmax(x), 3); },
                                random_tensor({4, 3}, 6), 1e-5) <= 1e-4);
}

TEST_CASE("learning-rate schedule") {
  TrainConfig c;
  c.learning_rate = 1e-3;
  c.warmup_steps = 100;
  CHECK(scheduled_learning_rate(c, 100) == 1e-3);
  CHECK(scheduled_learning_rate(c, 50) == doctest::Approx(5e-4).epsilon(1e-14));
  CHECK(scheduled_learning_rate(c, 400) == doctest::Approx(5e-4).epsilon(1e-14));
  CHECK_THROWS(scheduled_learning_rate(c, 0));
}

TEST_CASE("Adam matches a hand-rolled two-step trace") {
  TrainConfig c;
  std::vector<double> x{1.0};
  AdamMoments st;
  const double g1 = 0.5, g2 = -0.3, lr1 = 0.1, lr2 = 0.05;
  adam_update(x, std::vector<double>{g1}, st, lr1, c);
  adam_update(x, std::vector<double>{g2}, st, lr2, c);

  double m = 0.0, v = 0.0, want = 1.0;
  m = 0.9 * m + 0.1 * g1;
  v = 0.98 * v + 0.02 * g1 * g1;
  want -= lr1 * (m / (1 - 0.9)) / (std::sqrt(v / (1 - 0.98)) + 1e-8);
  m = 0.9 * m + 0.1 * g2;
  v = 0.98 * v + 0.02 * g2 * g2;
  want -= lr2 * (m / (1 - 0.81)) / (std::sqrt(v / (1 - 0.98 * 0.98)) + 1e-8);
  CHECK(std::abs(x[0] - want) <= 1e-12);
  CHECK(st.updates == 2);

  std::vector<double> y{0.25, -4.0};
  AdamMoments fresh;
  adam_update(y, std::vector<double>{0.0, 0.0}, fresh, 0.1, c);
  CHECK(y == std::vector<double>{0.25, -4.0});
  CHECK_THROWS_AS(adam_update(y, std::vector<double>{std::nan(""), 0.0}, fresh, 0.1, c), NumericError);
}

TEST_CASE("train config validation") {
  TrainConfig c;
  CHECK_NOTHROW(c.validate());
  c.label_smoothing = 1.0;
  CHECK_THROWS(c.validate());
  c = TrainConfig{};
  c.alternation_probability = 1.5;
  CHECK_THROWS(c.validate());
}

TEST_CASE("stage-1 steps") {
  TrainConfig cfg;
  cfg.warmup_steps = 1;
  Rng rng(1);
  SUBCASE("low-resource batches are rejected") {
    ModelParams p = tiny_params();
    Optimizer opt(cfg);
    CHECK_THROWS(stage1_step(p, opt, tiny_batch(3, 2, 5, 4, 1), cfg, rng));
  }
  SUBCASE("hard steps update exactly one module and never the universal layer") {
    cfg.alternation_probability = 0.0;
    ModelParams p = tiny_params(2);
    Optimizer opt(cfg);
    const auto universal_before = flatten(p.universal);
    for (int i = 0; i < 6; ++i) {
      const std::size_t lang = static_cast<std::size_t>(i % 3);
      const auto before = p.clone();
      const StepReport r = stage1_step(p, opt, tiny_batch(lang, 2, 6, 5, 10 + i), cfg, rng);
      CHECK(r.path == PathMode::hard);
      const std::size_t chosen = select_module(before, lang);
      std::size_t changed = 0, updated = 0;
      for (std::size_t t = 0; t < 3; ++t) {
        changed += flatten(p.pool[t]) != flatten(before.pool[t]);
        for (const auto& n : opt.last_updated()) updated += n == "pool." + std::to_string(t) + ".up";
      }
      CHECK(changed == 1);
      CHECK(updated == 1);
      CHECK(flatten(p.pool[chosen]) != flatten(before.pool[chosen]));
      CHECK(module_grad(p.universal) == 0.0);
    }
    CHECK(flatten(p.universal) == universal_before);
  }
  SUBCASE("soft steps reach every module") {
    cfg.alternation_probability = 1.0;
    ModelParams p = tiny_params(3);
    for (int i = 0; i < 3; ++i) {
      const StepReport r = compute_gradients(p, tiny_batch(1, 2, 6, 5, 20 + i), Stage::one, cfg, rng);
      CHECK(r.path == PathMode::soft);
      for (const auto& m : p.pool) CHECK(module_grad(m) > 0.0);
    }
  }
  SUBCASE("disparity switch") {
    ModelParams p = tiny_params(4);
    const Batch b = tiny_batch(0, 2, 6, 5, 30);
    cfg.disparity = false;
    Rng r1(5);
    const StepReport off = compute_gradients(p, b, Stage::one, cfg, r1);
    CHECK(off.loss == off.cross_entropy);
    CHECK(off.disparity == 0.0);
    cfg.disparity = true;
    Rng r2(5);
    const StepReport on = compute_gradients(p, b, Stage::one, cfg, r2);
    double pairs = 0.0;
    std::vector<SelectionProbs> s;
    for (std::size_t k = 0; k < 3; ++k) s.push_back(selection_probs(p, k));
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t k = i + 1; k < 3; ++k)
        for (std::size_t t = 0; t < 3; ++t) pairs += s[i].alpha[t] * s[k].alpha[t];
    CHECK(std::abs(on.disparity - pairs / static_cast<double>(b.target_tokens())) <= 1e-15);
    CHECK(std::abs(on.loss - (on.cross_entropy + on.disparity)) <= 1e-15);
    CHECK(on.cross_entropy == off.cross_entropy);
  }
  SUBCASE("non-finite gradients abort") {
    ModelParams p = tiny_params(5);
    Optimizer opt(cfg);
    compute_gradients(p, tiny_batch(0, 1, 4, 4, 31), Stage::one, cfg, rng);
    p.output.grad_buffer()[0] = std::nan("");
    CHECK_THROWS_AS(opt.step(p), NumericError);
  }
}

TEST_CASE("stage-2 and baseline steps") {
  TrainConfig cfg;
  cfg.warmup_steps = 1;
  Rng rng(2);
  SUBCASE("low-resource batches train the universal layer and shared weights only") {
    ModelParams p = tiny_params(6);
    Optimizer opt(cfg);
    const auto before = p.clone();
    stage2_step(p, opt, tiny_batch(3, 2, 6, 5, 40), cfg, rng);
    for (std::size_t t = 0; t < 3; ++t) CHECK(flatten(p.pool[t]) == flatten(before.pool[t]));
    CHECK(flatten(p.universal) != flatten(before.universal));
    CHECK(std::vector<double>(p.token_embedding.values().begin(), p.token_embedding.values().end()) !=
          std::vector<double>(before.token_embedding.values().begin(), before.token_embedding.values().end()));
    CHECK(std::vector<double>(p.selection.values().begin(), p.selection.values().end()) ==
          std::vector<double>(before.selection.values().begin(), before.selection.values().end()));
  }
  SUBCASE("high-resource batches behave like stage 1") {
    ModelParams a = tiny_params(7), b = tiny_params(7);
    Optimizer oa(cfg), ob(cfg);
    Rng ra(3), rb(3);
    const Batch batch = tiny_batch(2, 2, 6, 5, 41);
    const StepReport r1 = stage1_step(a, oa, batch, cfg, ra);
    const StepReport r2 = stage2_step(b, ob, batch, cfg, rb);
    CHECK(r1.loss == r2.loss);
    CHECK(flatten(a) == flatten(b));
  }
  SUBCASE("baseline needs the plain model") {
    ModelParams full = tiny_params(8);
    ModelParams plain = tiny_params(8, 3, false);
    Optimizer opt(cfg);
    CHECK_THROWS(baseline_step(full, opt, tiny_batch(0, 1, 4, 4, 42), cfg, rng));
    CHECK_THROWS(stage1_step(plain, opt, tiny_batch(0, 1, 4, 4, 42), cfg, rng));
    const StepReport r = baseline_step(plain, opt, tiny_batch(3, 1, 4, 4, 42), cfg, rng);
    CHECK(r.disparity == 0.0);
    CHECK(r.loss == r.cross_entropy);
  }
}

TEST_CASE("training is deterministic and reduces the loss") {
  SuiteConfig sc = default_suite_config();
  for (auto& l : sc.languages) l.corpus_size = std::min<std::size_t>(l.corpus_size, 1500);
  sc.dev_size = 50;
  const SyntheticSuite suite = generate_synthetic_suite(sc);
  std::vector<const ParallelCorpus*> hrl;
  for (const auto& c : suite.train)
    if (c.tier == Tier::high) hrl.push_back(&c);
  TrainConfig cfg;
  cfg.batch_tokens = 512;
  cfg.learning_rate = 1e-3;
  cfg.warmup_steps = 50;
  const BatchSampler sampler(hrl, cfg.batch_tokens);
  const std::vector<double> w(hrl.size(), 0.25);

  auto run = [&](std::size_t steps, std::vector<double>* losses) {
    Rng init(1);
    ModelParams p = ModelParams::initialize(model_config_for(ModelShape{}, suite, Stage::one), init);
    Optimizer opt(cfg);
    Rng rng(2);
    for (std::size_t s = 0; s < steps; ++s) {
      const StepReport r = stage1_step(p, opt, sampler.sample(w, rng), cfg, rng);
      if (losses) losses->push_back(r.cross_entropy);
    }
    return p;
  };
  std::vector<double> losses;
  const ModelParams a = run(200, &losses);
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < 20; ++i) {
    head += losses[i];
    tail += losses[losses.size() - 1 - i];
  }
  CHECK(tail < 0.8 * head);
  CHECK(flatten(run(15, nullptr)) == flatten(run(15, nullptr)));
}

TEST_CASE("baseline learns a single high-resource direction") {
  // One substitution-and-reverse direction over an 8-letter alphabet.
  ModelConfig mc;
  mc.embed_dim = 32;
  mc.slp_hidden_dim = 64;
  mc.heads = 4;
  mc.ffn_dim = 64;
  mc.encoder_layers = 1;
  mc.decoder_layers = 1;
  mc.vocab_size = 3 + 2 + 8;
  mc.max_sequence_length = 10;
  mc.language_specific = false;
  mc.languages = {{"aa", Tier::high}, {"bb", Tier::low}};
  Rng data(4);
  auto corpus = [&](std::size_t n) {
    ParallelCorpus c;
    c.target_language = "aa";
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t len = 3 + data.below(4);
      SentencePair p;
      p.source.push_back(kFirstLanguageSymbol);
      for (std::size_t j = 0; j < len; ++j) p.source.push_back(5 + static_cast<int>(data.below(8)));
      for (std::size_t j = len; j >= 1; --j) p.target.push_back(5 + (p.source[j] - 5 + 3) % 8);
      p.target.push_back(kEosId);
      c.pairs.push_back(std::move(p));
    }
    return c;
  };
  const ParallelCorpus train = corpus(2000), dev = corpus(100);
  TrainConfig cfg;
  cfg.learning_rate = 2e-3;
  cfg.warmup_steps = 50;
  cfg.batch_tokens = 256;
  Rng init(5), rng(6);
  ModelParams p = ModelParams::initialize(mc, init);
  Optimizer opt(cfg);
  const BatchSampler sampler({&train}, cfg.batch_tokens);
  const std::vector<double> w{1.0};
  for (int s = 0; s < 600; ++s) baseline_step(p, opt, sampler.sample(w, rng), cfg, rng);
  CHECK(teacher_forced_accuracy(p, dev) > 0.9);
}
