#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "slpmt/data.hpp"
#include "slpmt/model.hpp"
#include "slpmt/training.hpp"

namespace slpmt {

// ---- decoding -------------------------------------------------------------

// Log-probabilities of the next token for every prefix (each starts with BOS).
using StepScorer = std::function<std::vector<std::vector<double>>(const std::vector<std::vector<int>>& prefixes)>;

struct Hypothesis {
  std::vector<int> tokens;  // generated tokens, EOS excluded
  double log_prob = 0.0;    // includes the EOS step when finished
  bool finished = false;
};

double length_normalized_score(const Hypothesis& h, double length_penalty);

std::vector<int> greedy_search(const StepScorer& scorer, std::size_t max_len, int eos = kEosId);
Hypothesis beam_search(const StepScorer& scorer, std::size_t beam, std::size_t max_len, double length_penalty,
                       int eos = kEosId);

// Scorer backed by the model; encodes `source` once. High-resource targets use
// the hard pool path, low-resource targets the universal layer.
StepScorer model_scorer(const ModelParams& params, std::span<const int> source, std::size_t language);

std::vector<int> greedy_decode(const ModelParams& params, std::span<const int> source, std::size_t language,
                               std::size_t max_len);
std::vector<int> beam_decode(const ModelParams& params, std::span<const int> source, std::size_t language,
                             std::size_t beam, std::size_t max_len, double length_penalty);
// log P(tokens, EOS | source) under the inference path.
double sequence_log_prob(const ModelParams& params, std::span<const int> source, std::size_t language,
                         std::span<const int> tokens);

// ---- metrics --------------------------------------------------------------

// Corpus BLEU-4 in [0, 100] with add-one smoothing of the n > 1 precisions.
double corpus_bleu(const std::vector<std::vector<int>>& hypotheses, const std::vector<std::vector<int>>& references);
double corpus_bleu(const std::vector<std::string>& hypotheses, const std::vector<std::string>& references);

struct DirectionMetrics {
  std::string language;
  Tier tier = Tier::high;
  std::size_t sentences = 0;
  double bleu = 0.0;
  double token_accuracy = 0.0;  // teacher-forced argmax accuracy over target tokens
  double exact_match = 0.0;     // decoded hypothesis equals the reference
};

struct GroupMetrics {
  double bleu = 0.0;
  double token_accuracy = 0.0;
  double exact_match = 0.0;
  std::size_t directions = 0;
};

struct MetricsReport {
  std::vector<DirectionMetrics> directions;
  GroupMetrics high, low, all;

  void aggregate();
  std::string to_json() const;
};

struct EvalOptions {
  std::size_t beam = 5;
  double length_penalty = 1.0;
  std::size_t max_len = 0;  // 0: source length + 4
  bool decode = true;       // false skips BLEU / exact match
  std::size_t threads = 1;
  std::size_t batch_tokens = 4096;
};

double teacher_forced_accuracy(const ModelParams& params, const ParallelCorpus& corpus, std::size_t batch_tokens = 4096);
MetricsReport evaluate(const ModelParams& params, const std::vector<ParallelCorpus>& corpora, const EvalOptions& options);

// ---- analysis instruments -------------------------------------------------

struct ConflictMatrix {
  std::vector<std::string> labels;
  std::string partition;
  std::vector<std::optional<double>> values;  // row-major; nullopt where a gradient had zero norm

  std::size_t size() const { return labels.size(); }
  std::optional<double> at(std::size_t i, std::size_t j) const { return values[i * labels.size() + j]; }
  std::string to_json() const;
};

ConflictMatrix conflict_matrix_from_gradients(std::vector<std::string> labels,
                                              const std::vector<std::vector<double>>& gradients,
                                              std::string partition);

enum class PartitionSelector { shared, all };

// Flattened gradient of the selected partition for one probe batch (hard
// path, no dropout, smoothed cross-entropy only).
std::vector<double> probe_gradient(const ModelParams& params, const Batch& probe, PartitionSelector selector,
                                   double label_smoothing);
ConflictMatrix gradient_conflict_matrix(const ModelParams& params, const std::vector<Batch>& probes,
                                        PartitionSelector selector, double label_smoothing);

// Jaccard similarity of the content-token types on the two target sides.
double dictionary_overlap(const ParallelCorpus& a, const ParallelCorpus& b, const Vocabulary& vocab);

struct SelectionRow {
  std::string language;
  Tier tier = Tier::high;
  std::optional<SelectionProbs> probs;  // absent for low-resource targets
  std::optional<std::size_t> module;
};

std::vector<SelectionRow> selection_report(const ModelParams& params);
std::string selection_report_json(const std::vector<SelectionRow>& rows);

// Decoder layer index, or the pool / universal output.
struct LayerSelector {
  bool slp_output = false;
  std::size_t index = 0;

  static LayerSelector parse(std::string_view text);
  std::string label() const;
};

// Writes TSV rows: language, sentence index, layer, then d_e values of the
// first decoder position. `sentences` hold content ids without a prefix.
std::size_t export_decoder_representations(const ModelParams& params, const std::vector<std::vector<int>>& sentences,
                                           LayerSelector layer, std::ostream& out);

}  // namespace slpmt
