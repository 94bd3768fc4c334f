#include <doctest.h>

#include <cmath>
#include <sstream>

#include "helpers.hpp"
#include "slpmt/eval.hpp"
#include "slpmt/experiment.hpp"

using namespace slpmt;
using namespace slpmt::test;

namespace {

// Deterministic next-token distribution over {0, 1, EOS=2} that depends on
// the whole prefix.
std::vector<double> toy_logp(const std::vector<int>& prefix) {
  std::uint64_t h = 1469598103934665603ULL;
  for (int t : prefix) h = (h ^ static_cast<std::uint64_t>(t + 7)) * 1099511628211ULL;
  Rng rng(h);
  std::vector<double> logits{rng.normal() * 2, rng.normal() * 2, rng.normal() * 2};
  const double z = std::log(std::exp(logits[0]) + std::exp(logits[1]) + std::exp(logits[2]));
  for (double& l : logits) l -= z;
  return logits;
}

const StepScorer kToy = [](const std::vector<std::vector<int>>& prefixes) {
  std::vector<std::vector<double>> out;
  for (const auto& p : prefixes) out.push_back(toy_logp(p));
  return out;
};

// Every hypothesis of at most max_len tokens: finished ones end with EOS,
// the rest are cut at max_len.
void enumerate(std::vector<int> tokens, double logp, std::size_t max_len, int eos, std::vector<Hypothesis>& out) {
  std::vector<int> prefix{kBosId};
  prefix.insert(prefix.end(), tokens.begin(), tokens.end());
  if (tokens.size() == max_len) {
    out.push_back({tokens, logp, false});
    return;
  }
  const auto lp = toy_logp(prefix);
  out.push_back({tokens, logp + lp[static_cast<std::size_t>(eos)], true});
  for (int v = 0; v < 3; ++v) {
    if (v == eos) continue;
    auto next = tokens;
    next.push_back(v);
    enumerate(next, logp + lp[static_cast<std::size_t>(v)], max_len, eos, out);
  }
}

std::vector<std::string> words(std::initializer_list<const char*> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("beam search on a toy distribution") {
  SUBCASE("wide beam equals exhaustive search") {
    for (double lp : {0.0, 1.0}) {
      std::vector<Hypothesis> all;
      enumerate({}, 0.0, 3, 2, all);
      const Hypothesis* best = &all[0];
      for (const auto& h : all)
        if (length_normalized_score(h, lp) > length_normalized_score(*best, lp)) best = &h;
      const Hypothesis got = beam_search(kToy, 27, 3, lp, 2);
      CHECK(got.tokens == best->tokens);
      CHECK(got.finished == best->finished);
      CHECK(std::abs(got.log_prob - best->log_prob) <= 1e-12);
    }
  }
  SUBCASE("beam 1 is greedy") {
    for (std::size_t max_len : {1, 3, 6})
      CHECK(beam_search(kToy, 1, max_len, 1.0, 2).tokens == greedy_search(kToy, max_len, 2));
  }
  SUBCASE("invalid beam") { CHECK_THROWS(beam_search(kToy, 0, 3, 1.0, 2)); }
}

TEST_CASE("model decoding") {
  const ModelParams p = tiny_params(3);
  for (std::uint64_t seed = 1; seed <= 8; ++seed) {
    const std::size_t lang = seed % 4;
    const Batch b = tiny_batch(lang, 1, 6, 4, seed);
    const std::size_t max_len = 5;
    const auto g1 = greedy_decode(p, b.source, lang, max_len);
    CHECK(g1 == greedy_decode(p, b.source, lang, max_len));
    CHECK(g1.size() <= max_len);
    CHECK(beam_decode(p, b.source, lang, 1, max_len, 1.0) == g1);

    const auto b5 = beam_decode(p, b.source, lang, 5, max_len, 1.0);
    CHECK(b5.size() <= max_len);
    // A hypothesis that filled max_len was cut without its EOS step.
    auto score = [&](const std::vector<int>& t) {
      auto scorer = model_scorer(p, b.source, lang);
      Hypothesis h{t, 0.0, t.size() < max_len};
      std::vector<int> prefix{kBosId};
      for (int tok : t) {
        h.log_prob += scorer({prefix})[0][static_cast<std::size_t>(tok)];
        prefix.push_back(tok);
      }
      if (h.finished) h.log_prob += scorer({prefix})[0][kEosId];
      return length_normalized_score(h, 1.0);
    };
    CHECK(score(b5) >= score(g1) - 1e-12);
  }
}

TEST_CASE("model scorer matches teacher forcing") {
  const ModelParams p = tiny_params(4);
  const Batch b = tiny_batch(1, 1, 5, 4, 9);
  const std::vector<int> tokens{8, 9, 10};
  auto scorer = model_scorer(p, b.source, 1);
  double total = 0.0;
  std::vector<int> prefix{kBosId};
  for (int t : tokens) {
    total += scorer({prefix})[0][static_cast<std::size_t>(t)];
    prefix.push_back(t);
  }
  total += scorer({prefix})[0][kEosId];
  CHECK(std::abs(total - sequence_log_prob(p, b.source, 1, tokens)) <= 1e-10);
}

TEST_CASE("an overfit pair is reproduced by greedy decoding") {
  ModelParams p = tiny_params(5, 3, false);
  ParallelCorpus c;
  c.language = 0;
  c.target_language = "aa";
  c.pairs.push_back({{kFirstLanguageSymbol, 9, 12, 15, 8}, {11, 16, 10, 9, kEosId}});
  TrainConfig cfg;
  cfg.learning_rate = 1e-2;
  cfg.warmup_steps = 10;
  cfg.label_smoothing = 0.0;
  Optimizer opt(cfg);
  Rng rng(1);
  const std::vector<std::size_t> idx{0};
  const Batch b = make_batch(c, idx);
  for (int s = 0; s < 150 && teacher_forced_accuracy(p, c) < 1.0; ++s) baseline_step(p, opt, b, cfg, rng);
  REQUIRE(teacher_forced_accuracy(p, c) == 1.0);
  CHECK(greedy_decode(p, c.pairs[0].source, 0, 8) == std::vector<int>{11, 16, 10, 9});
}

TEST_CASE("corpus BLEU") {
  CHECK(corpus_bleu(words({"a b c d", "e f g h i"}), words({"a b c d", "e f g h i"})) == 100.0);
  CHECK(std::abs(corpus_bleu(words({"a b c d"}), words({"a b c d e"})) - 100.0 * std::exp(1.0 - 5.0 / 4.0)) <= 1e-9);
  CHECK(std::abs(corpus_bleu(words({"a b c d"}), words({"a b c d e"})) - 77.88) <= 0.01);
  const double none = corpus_bleu(words({"x y z w"}), words({"a b c d"}));
  CHECK(none < 5.0);
  CHECK_FALSE(std::isnan(none));
  const auto h = words({"a b c d", "a c b", "q r s t u"}), r = words({"a b c e", "a b c", "q r s t v"});
  const auto hp = words({"q r s t u", "a b c d", "a c b"}), rp = words({"q r s t v", "a b c e", "a b c"});
  CHECK(corpus_bleu(h, r) == doctest::Approx(corpus_bleu(hp, rp)).epsilon(1e-14));
  CHECK(corpus_bleu(h, r) > 0.0);
  CHECK(corpus_bleu(h, r) < 100.0);
  CHECK_THROWS(corpus_bleu(std::vector<std::string>{}, std::vector<std::string>{}));
  CHECK_THROWS(corpus_bleu(words({"a"}), words({"a", "b"})));
}

TEST_CASE("metrics report aggregates") {
  MetricsReport r;
  r.directions = {{"aa", Tier::high, 10, 40.0, 0.8, 0.5},
                  {"bb", Tier::high, 10, 60.0, 0.6, 0.3},
                  {"cc", Tier::low, 10, 10.0, 0.2, 0.1}};
  r.aggregate();
  CHECK(r.high.bleu == 50.0);
  CHECK(r.high.token_accuracy == doctest::Approx(0.7));
  CHECK(r.low.bleu == 10.0);
  CHECK(r.all.bleu == doctest::Approx(110.0 / 3.0));
  CHECK(r.all.directions == 3);
  CHECK(r.to_json().find("\"groups\"") != std::string::npos);
}

TEST_CASE("evaluate covers every direction") {
  const ModelParams p = tiny_params(6);
  std::vector<ParallelCorpus> dev(4);
  for (std::size_t k = 0; k < 4; ++k) {
    dev[k].language = k;
    dev[k].target_language = p.config.languages[k].id;
    dev[k].tier = p.config.languages[k].tier;
    for (std::uint64_t s = 0; s < 3; ++s) {
      const Batch b = tiny_batch(k, 1, 5, 4, 50 + k * 10 + s);
      dev[k].pairs.push_back({b.source, b.target_out});
    }
  }
  EvalOptions eo;
  eo.beam = 2;
  const MetricsReport one = evaluate(p, dev, eo);
  eo.threads = 3;
  const MetricsReport many = evaluate(p, dev, eo);
  CHECK(one.to_json() == many.to_json());
  CHECK(one.directions.size() == 4);
  CHECK(one.low.directions == 1);
}

TEST_CASE("conflict matrices") {
  SUBCASE("sign cases and undefined entries") {
    const ConflictMatrix m = conflict_matrix_from_gradients(
        {"a", "b", "c", "d"}, {{1, 2, 3}, {-1, -2, -3}, {0, 0, 0}, {3, -1, 0.5}}, "shared");
    CHECK(*m.at(0, 0) == doctest::Approx(1.0).epsilon(1e-15));
    CHECK(*m.at(0, 1) == -1.0);
    CHECK_FALSE(m.at(2, 0).has_value());
    CHECK_FALSE(m.at(2, 2).has_value());
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t k = 0; k < 4; ++k) {
        CHECK(m.at(i, k).has_value() == m.at(k, i).has_value());
        if (m.at(i, k)) {
          CHECK(*m.at(i, k) == *m.at(k, i));
          CHECK((*m.at(i, k) >= -1.0 && *m.at(i, k) <= 1.0));
        }
      }
    CHECK(m.to_json().find("null") != std::string::npos);
  }
  SUBCASE("two-parameter toy with orthogonal task gradients") {
    // Task a depends only on w0, task b only on w1.
    auto grad = [](int task) {
      Tensor w = Tensor::from_values({2}, {0.7, -1.3}, true);
      Tape t;
      const Tensor sq = t.multiply(w, w);
      const Tensor pick = Tensor::from_values({2}, task == 0 ? std::vector<double>{1, 0} : std::vector<double>{0, 1});
      t.backward(t.sum(t.multiply(sq, pick)));
      return w.grad_or_zero();
    };
    const ConflictMatrix m = conflict_matrix_from_gradients({"a", "b"}, {grad(0), grad(1)}, "all");
    CHECK(std::abs(*m.at(0, 1)) <= 1e-9);
    CHECK(std::abs(*m.at(0, 0) - 1.0) <= 1e-9);
  }
  SUBCASE("model gradients") {
    const ModelParams p = tiny_params(7);
    std::vector<Batch> probes;
    for (std::size_t k = 0; k < 4; ++k) probes.push_back(tiny_batch(k, 2, 5, 4, 70 + k));
    for (auto sel : {PartitionSelector::shared, PartitionSelector::all}) {
      const ConflictMatrix m = gradient_conflict_matrix(p, probes, sel, 0.1);
      CHECK(m.labels == std::vector<std::string>{"aa", "bb", "cc", "dd"});
      for (std::size_t i = 0; i < 4; ++i) {
        REQUIRE(m.at(i, i).has_value());
        CHECK(std::abs(*m.at(i, i) - 1.0) <= 1e-9);
        for (std::size_t k = 0; k < 4; ++k) {
          CHECK(*m.at(i, k) == *m.at(k, i));
          CHECK((*m.at(i, k) >= -1.0 && *m.at(i, k) <= 1.0));
        }
      }
    }
    CHECK(probe_gradient(p, probes[0], PartitionSelector::shared, 0.1).size() <
          probe_gradient(p, probes[0], PartitionSelector::all, 0.1).size());
    CHECK_FALSE(p.output.has_grad());
  }
}

TEST_CASE("dictionary overlap") {
  const Vocabulary v = Vocabulary::build({LanguageSpec{"aa"}, LanguageSpec{"bb"}}, 10);
  auto corpus = [&](std::vector<int> content) {
    ParallelCorpus c;
    std::vector<int> target;
    for (int i : content) target.push_back(v.content_id(static_cast<std::size_t>(i)));
    target.push_back(kEosId);
    c.pairs.push_back({{v.language_symbol(0), v.content_id(0)}, target});
    return c;
  };
  const ParallelCorpus abc = corpus({0, 1, 2}), bcd = corpus({1, 2, 3}), xy = corpus({7, 8});
  CHECK(dictionary_overlap(abc, bcd, v) == 0.5);
  CHECK(dictionary_overlap(bcd, abc, v) == 0.5);
  CHECK(dictionary_overlap(abc, abc, v) == 1.0);
  CHECK(dictionary_overlap(abc, xy, v) == 0.0);
  CHECK(dictionary_overlap(abc, corpus({2, 1, 0, 0}), v) == 1.0);
  CHECK_THROWS(dictionary_overlap(abc, corpus({}), v));
}

TEST_CASE("selection report") {
  const ModelParams p = tiny_params(8);
  const auto rows = selection_report(p);
  REQUIRE(rows.size() == 4);
  for (std::size_t k = 0; k < 3; ++k) {
    REQUIRE(rows[k].probs.has_value());
    double s = 0.0;
    for (double a : rows[k].probs->alpha) s += a;
    CHECK(std::abs(s - 1.0) <= 1e-9);
    CHECK(*rows[k].module == select_module(p, k));
  }
  CHECK_FALSE(rows[3].probs.has_value());
  CHECK_FALSE(rows[3].module.has_value());
  CHECK(selection_report_json(rows).find("\"universal\"") != std::string::npos);
}

TEST_CASE("decoder representation export") {
  const ModelParams p = tiny_params(9);
  const std::vector<std::vector<int>> sentences{{8, 9, 10}, {11, 12}, {13, 14, 15, 16}};
  for (const char* layer : {"0", "1", "slp-output"}) {
    std::ostringstream a, b;
    CHECK(export_decoder_representations(p, sentences, LayerSelector::parse(layer), a) == 12);
    export_decoder_representations(p, sentences, LayerSelector::parse(layer), b);
    CHECK(a.str() == b.str());
    std::istringstream in(a.str());
    std::string line;
    std::size_t rows = 0;
    while (std::getline(in, line)) {
      ++rows;
      std::size_t tabs = 0;
      for (char ch : line) tabs += ch == '\t';
      CHECK(tabs == 3 + 8 - 1);
      CHECK(line.find(std::string("\t") + LayerSelector::parse(layer).label() + "\t") != std::string::npos);
    }
    CHECK(rows == 12);
  }
  std::ostringstream sink;
  CHECK_THROWS(export_decoder_representations(p, sentences, LayerSelector::parse("2"), sink));
  CHECK_THROWS(LayerSelector::parse("top"));
}
