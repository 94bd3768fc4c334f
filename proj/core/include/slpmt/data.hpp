#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "slpmt/rng.hpp"
#include "slpmt/types.hpp"

namespace slpmt {

// Source-alphabet index -> content-token index, optionally followed by
// reversing the sentence. Both transformations preserve length.
struct Transduction {
  std::vector<int> substitution;
  bool reverse = false;

  std::vector<int> apply(std::span<const int> source) const;
};

struct LanguageSpec {
  std::string id;
  Tier tier = Tier::high;
  std::size_t corpus_size = 1;
  int symbol_token = -1;  // assigned by build_vocab
  // Generation recipe. With an explicit substitution these are ignored;
  // otherwise the table maps the alphabet onto [range_offset, range_offset + A)
  // through a permutation drawn from table_seed (0 keeps the identity order).
  std::size_t range_offset = 0;
  std::uint64_t table_seed = 0;
  Transduction transduction;
};

struct SuiteConfig {
  std::uint64_t seed = 1;
  std::string source_language = "en";
  std::size_t base_vocab_size = 50;  // content tokens
  std::size_t source_alphabet = 16;  // source sentences use content tokens [0, A)
  std::size_t min_length = 4;
  std::size_t max_length = 16;
  std::size_t dev_size = 200;
  std::vector<LanguageSpec> languages;
};

// Fills every language's substitution table from its recipe (explicit tables
// are validated and kept).
void resolve_transductions(SuiteConfig& config);

class Vocabulary {
 public:
  static Vocabulary build(const std::vector<LanguageSpec>& specs, std::size_t base_vocab_size);
  static Vocabulary load(const std::filesystem::path& file);
  void save(const std::filesystem::path& file) const;

  std::size_t size() const { return tokens_.size(); }
  std::size_t num_languages() const { return num_languages_; }
  int id(std::string_view token) const;
  const std::string& token(int id) const;
  int language_symbol(std::size_t language) const;
  int content_id(std::size_t content_index) const;
  std::size_t content_index(int id) const;
  bool is_content(int id) const;
  std::vector<int> encode(std::string_view sentence) const;
  std::string decode(std::span<const int> ids) const;

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  std::size_t num_languages_ = 0;
};

struct SentencePair {
  std::vector<int> source;  // target-language symbol, then tokens
  std::vector<int> target;  // tokens, then end-of-sequence
  bool operator==(const SentencePair&) const = default;
};

struct ParallelCorpus {
  std::string source_language;
  std::string target_language;
  std::size_t language = 0;  // target language index
  Tier tier = Tier::high;
  std::vector<SentencePair> pairs;

  std::size_t token_count() const;
};

struct SyntheticSuite {
  SuiteConfig config;
  Vocabulary vocab;
  std::vector<ParallelCorpus> train;  // one per direction, in language order
  std::vector<ParallelCorpus> dev;
};

SyntheticSuite generate_synthetic_suite(SuiteConfig config);

// Corpus file: one pair per line, src-lang TAB tgt-lang TAB source TAB target.
// The source column carries the language symbol; the target omits EOS.
void write_corpus(const ParallelCorpus& corpus, const Vocabulary& vocab, const std::filesystem::path& file);
ParallelCorpus read_corpus(const std::filesystem::path& file, const Vocabulary& vocab,
                           const std::vector<LanguageSpec>& languages);

// suite.json + vocab.txt + train/ and dev/ corpus files.
void save_suite(const SyntheticSuite& suite, const std::filesystem::path& dir);
SyntheticSuite load_suite(const std::filesystem::path& dir);

std::string suite_config_to_json(const SuiteConfig& config);
SuiteConfig suite_config_from_json(std::string_view text);

struct SamplingSchedule {
  double initial_temperature = 1.0;
  double peak_temperature = 5.0;
  std::size_t warmup_epochs = 5;

  void validate() const;
};

double temperature_at_epoch(const SamplingSchedule& schedule, std::size_t epoch);
std::vector<double> direction_sampling_weights(std::span<const std::size_t> sizes, double temperature);

// Builds a padded batch from selected pairs of one corpus.
Batch make_batch(const ParallelCorpus& corpus, std::span<const std::size_t> indices);

// Draws one direction per batch and fills it with pairs of similar length up to
// a token budget (rows * max padded length).
class BatchSampler {
 public:
  BatchSampler(std::vector<const ParallelCorpus*> corpora, std::size_t token_budget);

  Batch sample(std::span<const double> weights, Rng& rng) const;
  std::size_t directions() const { return corpora_.size(); }
  const ParallelCorpus& corpus(std::size_t i) const { return *corpora_[i]; }
  std::vector<std::size_t> sizes() const;
  // Steps whose budgets add up to one pass over all pairs' tokens.
  std::size_t steps_per_epoch() const;

 private:
  struct Buckets {
    std::vector<std::size_t> lengths;               // distinct lengths, ascending
    std::vector<std::vector<std::size_t>> members;  // pair indices per length
  };
  std::vector<const ParallelCorpus*> corpora_;
  std::vector<Buckets> buckets_;
  std::size_t budget_;
};

Batch sample_batch(const std::vector<const ParallelCorpus*>& corpora, std::span<const double> weights,
                   std::size_t token_budget, Rng& rng);

}  // namespace slpmt
