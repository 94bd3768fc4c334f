#include "slpmt/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json_util.hpp"

namespace slpmt {
namespace {

using detail::json;

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

std::vector<std::string> split_ws(std::string_view s) {
  std::vector<std::string> out;
  std::istringstream is{std::string(s)};
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

std::size_t pair_cost(const SentencePair& p) { return std::max(p.source.size(), p.target.size()); }

void validate_suite(const SuiteConfig& c) {
  auto fail = [](const std::string& m) { throw std::invalid_argument("synthetic suite: " + m); };
  std::size_t high = 0, low = 0;
  std::set<std::string> ids;
  for (const auto& l : c.languages) {
    (l.tier == Tier::high ? high : low)++;
    if (!ids.insert(l.id).second) fail("duplicate language id '" + l.id + "'");
    if (l.id == c.source_language) fail("target language '" + l.id + "' equals the source language");
    if (l.corpus_size < 1) fail("corpus_size of '" + l.id + "' must be at least 1");
  }
  if (high < 2 || low < 1) fail("need at least two high-resource and one low-resource language");
  if (c.source_alphabet < 1 || c.source_alphabet > c.base_vocab_size)
    fail("base_vocab_size " + std::to_string(c.base_vocab_size) + " cannot host a source alphabet of " +
         std::to_string(c.source_alphabet));
  if (c.min_length < 1 || c.max_length < c.min_length) fail("invalid sentence length range");
}

}  // namespace

std::vector<int> Transduction::apply(std::span<const int> source) const {
  std::vector<int> out;
  out.reserve(source.size());
  for (int a : source) out.push_back(substitution.at(static_cast<std::size_t>(a)));
  if (reverse) std::reverse(out.begin(), out.end());
  return out;
}

void resolve_transductions(SuiteConfig& c) {
  const std::size_t a = c.source_alphabet;
  for (auto& l : c.languages) {
    auto& sub = l.transduction.substitution;
    if (sub.empty()) {
      if (l.range_offset + a > c.base_vocab_size)
        throw std::invalid_argument("synthetic suite: base_vocab_size " + std::to_string(c.base_vocab_size) +
                                    " too small for range [" + std::to_string(l.range_offset) + ", " +
                                    std::to_string(l.range_offset + a) + ") of '" + l.id + "'");
      std::vector<int> perm(a);
      std::iota(perm.begin(), perm.end(), 0);
      if (l.table_seed != 0) {
        Rng rng(l.table_seed);
        rng.shuffle(perm);
      }
      sub.resize(a);
      for (std::size_t i = 0; i < a; ++i) sub[i] = static_cast<int>(l.range_offset) + perm[i];
    }
    if (sub.size() != a)
      throw std::invalid_argument("synthetic suite: substitution of '" + l.id + "' must have " + std::to_string(a) +
                                  " entries");
    std::set<int> image(sub.begin(), sub.end());
    if (image.size() != a) throw std::invalid_argument("synthetic suite: substitution of '" + l.id + "' is not a bijection");
    if (*image.begin() < 0 || static_cast<std::size_t>(*image.rbegin()) >= c.base_vocab_size)
      throw std::invalid_argument("synthetic suite: base_vocab_size too small for the substitution of '" + l.id + "'");
  }
}

Vocabulary Vocabulary::build(const std::vector<LanguageSpec>& specs, std::size_t base_vocab_size) {
  Vocabulary v;
  v.tokens_ = {"<pad>", "<s>", "</s>"};
  for (const auto& l : specs) v.tokens_.push_back("<2" + l.id + ">");
  char buf[32];
  for (std::size_t i = 0; i < base_vocab_size; ++i) {
    std::snprintf(buf, sizeof buf, "w%02zu", i);
    v.tokens_.emplace_back(buf);
  }
  v.num_languages_ = specs.size();
  for (std::size_t i = 0; i < v.tokens_.size(); ++i)
    if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second)
      throw std::invalid_argument("vocabulary: duplicate token '" + v.tokens_[i] + "'");
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open vocabulary " + file.string());
  Vocabulary v;
  std::string line;
  while (std::getline(in, line)) v.tokens_.push_back(line);
  if (v.tokens_.size() < 3 || v.tokens_[0] != "<pad>" || v.tokens_[1] != "<s>" || v.tokens_[2] != "</s>")
    throw std::runtime_error("vocabulary " + file.string() + ": missing reserved tokens");
  for (std::size_t i = kFirstLanguageSymbol; i < v.tokens_.size() && v.tokens_[i].rfind("<2", 0) == 0; ++i)
    ++v.num_languages_;
  for (std::size_t i = 0; i < v.tokens_.size(); ++i)
    if (!v.index_.emplace(v.tokens_[i], static_cast<int>(i)).second)
      throw std::runtime_error("vocabulary " + file.string() + ": duplicate token '" + v.tokens_[i] + "'");
  return v;
}

void Vocabulary::save(const std::filesystem::path& file) const {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary " + file.string());
  for (const auto& t : tokens_) out << t << '\n';
}

int Vocabulary::id(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw std::out_of_range("unknown token '" + std::string(token) + "'");
  return it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
    throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[static_cast<std::size_t>(id)];
}

int Vocabulary::language_symbol(std::size_t language) const {
  if (language >= num_languages_) throw std::out_of_range("language index outside vocabulary");
  return kFirstLanguageSymbol + static_cast<int>(language);
}

int Vocabulary::content_id(std::size_t content_index) const {
  const std::size_t id = kFirstLanguageSymbol + num_languages_ + content_index;
  if (id >= tokens_.size()) throw std::out_of_range("content index outside vocabulary");
  return static_cast<int>(id);
}

std::size_t Vocabulary::content_index(int id) const {
  if (!is_content(id)) throw std::out_of_range("token id " + std::to_string(id) + " is not a content token");
  return static_cast<std::size_t>(id) - kFirstLanguageSymbol - num_languages_;
}

bool Vocabulary::is_content(int id) const {
  return id >= kFirstLanguageSymbol + static_cast<int>(num_languages_) && static_cast<std::size_t>(id) < tokens_.size();
}

std::vector<int> Vocabulary::encode(std::string_view sentence) const {
  std::vector<int> ids;
  for (const auto& t : split_ws(sentence)) ids.push_back(id(t));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::size_t ParallelCorpus::token_count() const {
  std::size_t n = 0;
  for (const auto& p : pairs) n += pair_cost(p);
  return n;
}

SyntheticSuite generate_synthetic_suite(SuiteConfig config) {
  validate_suite(config);
  resolve_transductions(config);
  SyntheticSuite suite;
  suite.vocab = Vocabulary::build(config.languages, config.base_vocab_size);
  for (std::size_t k = 0; k < config.languages.size(); ++k)
    config.languages[k].symbol_token = suite.vocab.language_symbol(k);

  auto make = [&](std::size_t k, std::size_t count, std::uint64_t stream) {
    const LanguageSpec& l = config.languages[k];
    Rng rng = Rng::derive(config.seed, stream);
    ParallelCorpus c;
    c.source_language = config.source_language;
    c.target_language = l.id;
    c.language = k;
    c.tier = l.tier;
    c.pairs.reserve(count);
    const std::size_t span = config.max_length - config.min_length + 1;
    for (std::size_t i = 0; i < count; ++i) {
      const std::size_t len = config.min_length + rng.below(span);
      std::vector<int> letters(len);
      for (int& a : letters) a = static_cast<int>(rng.below(config.source_alphabet));
      const std::vector<int> mapped = l.transduction.apply(letters);
      SentencePair p;
      p.source.push_back(l.symbol_token);
      for (int a : letters) p.source.push_back(suite.vocab.content_id(static_cast<std::size_t>(a)));
      for (int t : mapped) p.target.push_back(suite.vocab.content_id(static_cast<std::size_t>(t)));
      p.target.push_back(kEosId);
      c.pairs.push_back(std::move(p));
    }
    return c;
  };
  for (std::size_t k = 0; k < config.languages.size(); ++k) {
    suite.train.push_back(make(k, config.languages[k].corpus_size, 2 * k));
    suite.dev.push_back(make(k, config.dev_size, 2 * k + 1));
  }
  suite.config = std::move(config);
  return suite;
}

void write_corpus(const ParallelCorpus& c, const Vocabulary& vocab, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write corpus " + file.string());
  for (const auto& p : c.pairs) {
    std::span<const int> target(p.target.data(), p.target.size() - 1);
    out << c.source_language << '\t' << c.target_language << '\t' << vocab.decode(p.source) << '\t'
        << vocab.decode(target) << '\n';
  }
}

ParallelCorpus read_corpus(const std::filesystem::path& file, const Vocabulary& vocab,
                           const std::vector<LanguageSpec>& languages) {
  std::ifstream in(file);
  if (!in) throw std::runtime_error("cannot open corpus " + file.string());
  ParallelCorpus c;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    auto cols = split(line, '\t');
    auto where = [&] { return file.string() + ":" + std::to_string(lineno); };
    if (cols.size() != 4) throw std::runtime_error(where() + ": expected 4 tab-separated columns");
    if (first) {
      c.source_language = cols[0];
      c.target_language = cols[1];
      auto it = std::find_if(languages.begin(), languages.end(), [&](const LanguageSpec& l) { return l.id == cols[1]; });
      if (it == languages.end()) throw std::runtime_error(where() + ": unknown target language '" + cols[1] + "'");
      c.language = static_cast<std::size_t>(it - languages.begin());
      c.tier = it->tier;
      first = false;
    } else if (cols[0] != c.source_language || cols[1] != c.target_language) {
      throw std::runtime_error(where() + ": mixed directions in one corpus file");
    }
    SentencePair p;
    p.source = vocab.encode(cols[2]);
    p.target = vocab.encode(cols[3]);
    p.target.push_back(kEosId);
    if (p.source.empty() || p.source.front() != vocab.language_symbol(c.language))
      throw std::runtime_error(where() + ": source must begin with the target-language symbol");
    c.pairs.push_back(std::move(p));
  }
  return c;
}

std::string suite_config_to_json(const SuiteConfig& c) {
  json j;
  j["seed"] = c.seed;
  j["source_language"] = c.source_language;
  j["base_vocab_size"] = c.base_vocab_size;
  j["source_alphabet"] = c.source_alphabet;
  j["min_length"] = c.min_length;
  j["max_length"] = c.max_length;
  j["dev_size"] = c.dev_size;
  j["languages"] = json::array();
  for (const auto& l : c.languages) {
    json lj;
    lj["id"] = l.id;
    lj["tier"] = std::string(tier_name(l.tier));
    lj["corpus_size"] = l.corpus_size;
    lj["range_offset"] = l.range_offset;
    lj["table_seed"] = l.table_seed;
    lj["reverse"] = l.transduction.reverse;
    if (!l.transduction.substitution.empty()) lj["substitution"] = l.transduction.substitution;
    if (l.symbol_token >= 0) lj["symbol_token"] = l.symbol_token;
    j["languages"].push_back(lj);
  }
  return j.dump(2);
}

SuiteConfig suite_config_from_json(std::string_view text) {
  const json j = detail::parse_json(text, "suite config");
  detail::StrictObject o(j, "suite config");
  SuiteConfig c;
  c.seed = o.get_or<std::uint64_t>("seed", c.seed);
  c.source_language = o.get_or<std::string>("source_language", c.source_language);
  c.base_vocab_size = o.get_or<std::size_t>("base_vocab_size", c.base_vocab_size);
  c.source_alphabet = o.get_or<std::size_t>("source_alphabet", c.source_alphabet);
  c.min_length = o.get_or<std::size_t>("min_length", c.min_length);
  c.max_length = o.get_or<std::size_t>("max_length", c.max_length);
  c.dev_size = o.get_or<std::size_t>("dev_size", c.dev_size);
  for (const json& lj : o.at("languages")) {
    detail::StrictObject lo(lj, "suite config language");
    LanguageSpec l;
    l.id = lo.get<std::string>("id");
    l.tier = parse_tier(lo.get<std::string>("tier"));
    l.corpus_size = lo.get<std::size_t>("corpus_size");
    l.range_offset = lo.get_or<std::size_t>("range_offset", 0);
    l.table_seed = lo.get_or<std::uint64_t>("table_seed", 0);
    l.transduction.reverse = lo.get_or<bool>("reverse", false);
    l.transduction.substitution = lo.get_or<std::vector<int>>("substitution", {});
    l.symbol_token = lo.get_or<int>("symbol_token", -1);
    lo.finish();
    c.languages.push_back(std::move(l));
  }
  o.finish();
  return c;
}

void save_suite(const SyntheticSuite& suite, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "train");
  fs::create_directories(dir / "dev");
  std::ofstream(dir / "suite.json", std::ios::binary) << suite_config_to_json(suite.config) << '\n';
  suite.vocab.save(dir / "vocab.txt");
  for (const auto* split : {&suite.train, &suite.dev}) {
    const std::string name = split == &suite.train ? "train" : "dev";
    for (const auto& c : *split)
      write_corpus(c, suite.vocab, dir / name / (c.source_language + "-" + c.target_language + ".tsv"));
  }
}

SyntheticSuite load_suite(const std::filesystem::path& dir) {
  std::ifstream in(dir / "suite.json");
  if (!in) throw std::runtime_error("no suite.json in " + dir.string());
  std::stringstream ss;
  ss << in.rdbuf();
  SyntheticSuite suite;
  suite.config = suite_config_from_json(ss.str());
  resolve_transductions(suite.config);
  suite.vocab = Vocabulary::load(dir / "vocab.txt");
  if (suite.vocab.num_languages() != suite.config.languages.size())
    throw std::runtime_error("vocabulary and suite.json disagree on the language count");
  for (std::size_t k = 0; k < suite.config.languages.size(); ++k) {
    auto& l = suite.config.languages[k];
    l.symbol_token = suite.vocab.language_symbol(k);
    const std::string file = suite.config.source_language + "-" + l.id + ".tsv";
    suite.train.push_back(read_corpus(dir / "train" / file, suite.vocab, suite.config.languages));
    suite.dev.push_back(read_corpus(dir / "dev" / file, suite.vocab, suite.config.languages));
  }
  return suite;
}

void SamplingSchedule::validate() const {
  if (!(initial_temperature >= 1.0) || !(peak_temperature >= initial_temperature) || warmup_epochs < 1)
    throw std::invalid_argument("sampling schedule: need tau0 >= 1, tau >= tau0, warmup_epochs >= 1");
}

double temperature_at_epoch(const SamplingSchedule& s, std::size_t epoch) {
  const double rise =
      static_cast<double>(epoch) * (s.peak_temperature - s.initial_temperature) / static_cast<double>(s.warmup_epochs);
  return std::min(s.peak_temperature, s.initial_temperature + rise);
}

std::vector<double> direction_sampling_weights(std::span<const std::size_t> sizes, double temperature) {
  if (sizes.empty()) throw std::invalid_argument("direction_sampling_weights: no directions");
  if (!(temperature >= 1.0)) throw std::invalid_argument("direction_sampling_weights: temperature must be >= 1");
  double total = 0.0;
  for (std::size_t n : sizes) {
    if (n < 1) throw std::invalid_argument("direction_sampling_weights: empty corpus");
    total += static_cast<double>(n);
  }
  std::vector<double> w;
  double z = 0.0;
  for (std::size_t n : sizes) z += w.emplace_back(std::pow(static_cast<double>(n) / total, 1.0 / temperature));
  for (double& x : w) x /= z;
  return w;
}

Batch make_batch(const ParallelCorpus& c, std::span<const std::size_t> indices) {
  if (indices.empty()) throw std::invalid_argument("make_batch: no pairs selected");
  Batch b;
  b.rows = indices.size();
  b.language = c.language;
  for (std::size_t i : indices) {
    const auto& p = c.pairs.at(i);
    b.source_length = std::max(b.source_length, p.source.size());
    b.target_length = std::max(b.target_length, p.target.size());
  }
  b.source.assign(b.rows * b.source_length, kPadId);
  b.target_in.assign(b.rows * b.target_length, kPadId);
  b.target_out.assign(b.rows * b.target_length, kPadId);
  for (std::size_t r = 0; r < b.rows; ++r) {
    const auto& p = c.pairs[indices[r]];
    std::copy(p.source.begin(), p.source.end(), b.source.begin() + r * b.source_length);
    std::copy(p.target.begin(), p.target.end(), b.target_out.begin() + r * b.target_length);
    b.target_in[r * b.target_length] = kBosId;
    std::copy(p.target.begin(), p.target.end() - 1, b.target_in.begin() + r * b.target_length + 1);
  }
  return b;
}

BatchSampler::BatchSampler(std::vector<const ParallelCorpus*> corpora, std::size_t token_budget)
    : corpora_(std::move(corpora)), budget_(token_budget) {
  if (corpora_.empty()) throw std::invalid_argument("BatchSampler: no corpora");
  if (budget_ == 0) throw std::invalid_argument("BatchSampler: token budget must be positive");
  for (const auto* c : corpora_) {
    if (c->pairs.empty()) throw std::invalid_argument("BatchSampler: empty corpus for " + c->target_language);
    Buckets b;
    for (std::size_t i = 0; i < c->pairs.size(); ++i) {
      const std::size_t cost = pair_cost(c->pairs[i]);
      auto it = std::lower_bound(b.lengths.begin(), b.lengths.end(), cost);
      const auto pos = static_cast<std::size_t>(it - b.lengths.begin());
      if (it == b.lengths.end() || *it != cost) {
        b.lengths.insert(it, cost);
        b.members.insert(b.members.begin() + static_cast<std::ptrdiff_t>(pos), std::vector<std::size_t>{});
      }
      b.members[pos].push_back(i);
    }
    buckets_.push_back(std::move(b));
  }
}

std::vector<std::size_t> BatchSampler::sizes() const {
  std::vector<std::size_t> s;
  for (const auto* c : corpora_) s.push_back(c->pairs.size());
  return s;
}

std::size_t BatchSampler::steps_per_epoch() const {
  std::size_t tokens = 0;
  for (const auto* c : corpora_) tokens += c->token_count();
  return std::max<std::size_t>(1, (tokens + budget_ - 1) / budget_);
}

Batch BatchSampler::sample(std::span<const double> weights, Rng& rng) const {
  if (weights.size() != corpora_.size()) throw std::invalid_argument("BatchSampler: weight count mismatch");
  const std::size_t d = rng.categorical(std::vector<double>(weights.begin(), weights.end()));
  const ParallelCorpus& c = *corpora_[d];
  const Buckets& bk = buckets_[d];
  const std::size_t anchor = rng.below(c.pairs.size());
  const std::size_t anchor_cost = pair_cost(c.pairs[anchor]);
  const auto home = static_cast<std::size_t>(std::lower_bound(bk.lengths.begin(), bk.lengths.end(), anchor_cost) -
                                             bk.lengths.begin());

  std::vector<std::size_t> chosen{anchor};
  std::size_t max_cost = anchor_cost;
  // Visit buckets by distance from the anchor's, shorter first on ties.
  std::vector<std::size_t> order{home};
  for (std::size_t dist = 1; order.size() < bk.lengths.size(); ++dist) {
    if (home >= dist) order.push_back(home - dist);
    if (home + dist < bk.lengths.size()) order.push_back(home + dist);
  }
  bool full = false;
  for (std::size_t b : order) {
    const std::size_t cost = std::max(max_cost, bk.lengths[b]);
    if ((chosen.size() + 1) * cost > budget_) break;
    std::vector<std::size_t> pool = bk.members[b];
    if (b == home) pool.erase(std::find(pool.begin(), pool.end(), anchor));
    for (std::size_t i = 0; i < pool.size(); ++i) {
      if ((chosen.size() + 1) * cost > budget_) {
        full = true;
        break;
      }
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
      chosen.push_back(pool[i]);
      max_cost = cost;
    }
    if (full) break;
  }
  return make_batch(c, chosen);
}

Batch sample_batch(const std::vector<const ParallelCorpus*>& corpora, std::span<const double> weights,
                   std::size_t token_budget, Rng& rng) {
  return BatchSampler(corpora, token_budget).sample(weights, rng);
}

}  // namespace slpmt
