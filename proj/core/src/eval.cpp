#include "slpmt/eval.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>
#include <unordered_map>

#include "json_util.hpp"

namespace slpmt {
namespace {

using detail::json;

const ForwardOptions kInference{PathMode::hard, false, nullptr};

EncoderState tile(const EncoderState& one, std::size_t rows) {
  EncoderState st;
  st.rows = rows;
  st.length = one.length;
  const std::size_t n = one.memory.size();
  std::vector<double> mem(rows * n);
  for (std::size_t r = 0; r < rows; ++r) std::copy_n(one.memory.data(), n, mem.begin() + r * n);
  st.memory = Tensor::from_values({rows, one.length, one.memory.dim(2)}, std::move(mem));
  st.source_pad.resize(rows * one.length);
  for (std::size_t r = 0; r < rows; ++r)
    std::copy(one.source_pad.begin(), one.source_pad.end(), st.source_pad.begin() + r * one.length);
  return st;
}

std::string format_double(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

json group_json(const GroupMetrics& g) {
  return {{"bleu", g.bleu}, {"token_accuracy", g.token_accuracy}, {"exact_match", g.exact_match},
          {"directions", g.directions}};
}

std::vector<int> strip_eos(const std::vector<int>& target) {
  std::vector<int> out(target.begin(), target.end());
  if (!out.empty() && out.back() == kEosId) out.pop_back();
  return out;
}

}  // namespace

double length_normalized_score(const Hypothesis& h, double length_penalty) {
  const double len = static_cast<double>(h.tokens.size() + (h.finished ? 1 : 0));
  return h.log_prob / std::pow(std::max(1.0, len), length_penalty);
}

std::vector<int> greedy_search(const StepScorer& scorer, std::size_t max_len, int eos) {
  std::vector<int> prefix{kBosId};
  for (std::size_t s = 0; s < max_len; ++s) {
    const auto scores = scorer({prefix});
    const int next = static_cast<int>(argmax_lowest(scores.at(0)));
    if (next == eos) break;
    prefix.push_back(next);
  }
  return {prefix.begin() + 1, prefix.end()};
}

Hypothesis beam_search(const StepScorer& scorer, std::size_t beam, std::size_t max_len, double length_penalty,
                       int eos) {
  if (beam < 1) throw std::invalid_argument("beam_search: beam must be at least 1");
  std::vector<Hypothesis> live{Hypothesis{}};
  std::vector<Hypothesis> finished;
  struct Candidate {
    double score;
    std::size_t hyp;
    int token;
  };
  for (std::size_t s = 0; s < max_len && !live.empty(); ++s) {
    std::vector<std::vector<int>> prefixes;
    for (const auto& h : live) {
      std::vector<int> p{kBosId};
      p.insert(p.end(), h.tokens.begin(), h.tokens.end());
      prefixes.push_back(std::move(p));
    }
    const auto scores = scorer(prefixes);
    std::vector<Candidate> cands;
    for (std::size_t i = 0; i < live.size(); ++i)
      for (std::size_t v = 0; v < scores[i].size(); ++v)
        cands.push_back({live[i].log_prob + scores[i][v], i, static_cast<int>(v)});
    const std::size_t keep = std::min(beam, cands.size());
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.hyp != b.hyp) return a.hyp < b.hyp;
                        return a.token < b.token;
                      });
    std::vector<Hypothesis> next;
    for (std::size_t c = 0; c < keep; ++c) {
      Hypothesis h = live[cands[c].hyp];
      h.log_prob = cands[c].score;
      if (cands[c].token == eos) {
        h.finished = true;
        finished.push_back(std::move(h));
      } else {
        h.tokens.push_back(cands[c].token);
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  finished.insert(finished.end(), live.begin(), live.end());
  std::size_t best = 0;
  for (std::size_t i = 1; i < finished.size(); ++i)
    if (length_normalized_score(finished[i], length_penalty) > length_normalized_score(finished[best], length_penalty))
      best = i;
  return finished.at(best);
}

StepScorer model_scorer(const ModelParams& params, std::span<const int> source, std::size_t language) {
  auto state = std::make_shared<EncoderState>();
  {
    Tape tape(Tape::Mode::inference);
    *state = encode(tape, params, source, 1, source.size(), kInference);
  }
  return [&params, state, language](const std::vector<std::vector<int>>& prefixes) {
    const std::size_t rows = prefixes.size(), len = prefixes.at(0).size();
    std::vector<int> ids;
    ids.reserve(rows * len);
    for (const auto& p : prefixes) {
      if (p.size() != len) throw std::invalid_argument("model_scorer: prefixes must share a length");
      ids.insert(ids.end(), p.begin(), p.end());
    }
    Tape tape(Tape::Mode::inference);
    EncoderState tiled = tile(*state, rows);
    Tensor h = decode(tape, params, tiled, ids, len, kInference);
    Tensor last = tape.slice(h, 1, len - 1, len);
    Tensor logp = tape.log_softmax(output_logits(tape, params, route(tape, params, language, last, PathMode::hard)));
    const std::size_t v = params.config.vocab_size;
    std::vector<std::vector<double>> out(rows);
    for (std::size_t r = 0; r < rows; ++r) out[r].assign(logp.data() + r * v, logp.data() + (r + 1) * v);
    return out;
  };
}

std::vector<int> greedy_decode(const ModelParams& params, std::span<const int> source, std::size_t language,
                               std::size_t max_len) {
  return greedy_search(model_scorer(params, source, language), max_len);
}

std::vector<int> beam_decode(const ModelParams& params, std::span<const int> source, std::size_t language,
                             std::size_t beam, std::size_t max_len, double length_penalty) {
  return beam_search(model_scorer(params, source, language), beam, max_len, length_penalty).tokens;
}

double sequence_log_prob(const ModelParams& params, std::span<const int> source, std::size_t language,
                         std::span<const int> tokens) {
  Batch b;
  b.rows = 1;
  b.language = language;
  b.source.assign(source.begin(), source.end());
  b.source_length = source.size();
  b.target_in.push_back(kBosId);
  b.target_in.insert(b.target_in.end(), tokens.begin(), tokens.end());
  b.target_out.assign(tokens.begin(), tokens.end());
  b.target_out.push_back(kEosId);
  b.target_length = b.target_out.size();
  Tape tape(Tape::Mode::inference);
  Tensor logp = tape.log_softmax(model_forward(tape, params, b, kInference).logits);
  const std::size_t v = params.config.vocab_size;
  double total = 0.0;
  for (std::size_t i = 0; i < b.target_out.size(); ++i)
    total += logp[i * v + static_cast<std::size_t>(b.target_out[i])];
  return total;
}

double corpus_bleu(const std::vector<std::vector<int>>& hyps, const std::vector<std::vector<int>>& refs) {
  if (hyps.size() != refs.size()) throw std::invalid_argument("corpus_bleu: hypothesis and reference counts differ");
  if (hyps.empty()) throw std::invalid_argument("corpus_bleu: empty corpus");
  std::array<double, 4> matches{}, totals{};
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t s = 0; s < hyps.size(); ++s) {
    const auto& h = hyps[s];
    const auto& r = refs[s];
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= 4; ++n) {
      std::map<std::vector<int>, int> ref_counts;
      for (std::size_t i = 0; i + n <= r.size(); ++i) ++ref_counts[{r.begin() + i, r.begin() + i + n}];
      std::map<std::vector<int>, int> hyp_counts;
      for (std::size_t i = 0; i + n <= h.size(); ++i) ++hyp_counts[{h.begin() + i, h.begin() + i + n}];
      for (const auto& [gram, c] : hyp_counts) {
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matches[n - 1] += std::min(c, it->second);
        totals[n - 1] += c;
      }
    }
  }
  if (matches[0] == 0.0 || hyp_len == 0.0) return 0.0;
  double log_precision = std::log(matches[0] / totals[0]);
  for (std::size_t n = 1; n < 4; ++n) log_precision += std::log((matches[n] + 1.0) / (totals[n] + 1.0));
  const double brevity = hyp_len < ref_len ? 1.0 - ref_len / hyp_len : 0.0;
  return 100.0 * std::exp(brevity + log_precision / 4.0);
}

double corpus_bleu(const std::vector<std::string>& hyps, const std::vector<std::string>& refs) {
  std::unordered_map<std::string, int> ids;
  auto encode = [&](const std::string& sentence) {
    std::vector<int> out;
    std::istringstream is(sentence);
    std::string tok;
    while (is >> tok) out.push_back(ids.emplace(tok, static_cast<int>(ids.size())).first->second);
    return out;
  };
  std::vector<std::vector<int>> h, r;
  for (const auto& s : hyps) h.push_back(encode(s));
  for (const auto& s : refs) r.push_back(encode(s));
  return corpus_bleu(h, r);
}

void MetricsReport::aggregate() {
  high = low = all = GroupMetrics{};
  for (const auto& d : directions)
    for (GroupMetrics* g : {&all, d.tier == Tier::high ? &high : &low}) {
      g->bleu += d.bleu;
      g->token_accuracy += d.token_accuracy;
      g->exact_match += d.exact_match;
      ++g->directions;
    }
  for (GroupMetrics* g : {&high, &low, &all})
    if (g->directions) {
      const double n = static_cast<double>(g->directions);
      g->bleu /= n;
      g->token_accuracy /= n;
      g->exact_match /= n;
    }
}

std::string MetricsReport::to_json() const {
  json j;
  j["directions"] = json::array();
  for (const auto& d : directions)
    j["directions"].push_back({{"language", d.language},
                               {"tier", std::string(tier_name(d.tier))},
                               {"sentences", d.sentences},
                               {"bleu", d.bleu},
                               {"token_accuracy", d.token_accuracy},
                               {"exact_match", d.exact_match}});
  j["groups"] = {{"high", group_json(high)}, {"low", group_json(low)}, {"all", group_json(all)}};
  return j.dump(2);
}

double teacher_forced_accuracy(const ModelParams& params, const ParallelCorpus& corpus, std::size_t batch_tokens) {
  std::vector<std::size_t> order(corpus.pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return corpus.pairs[a].target.size() < corpus.pairs[b].target.size();
  });
  std::size_t correct = 0, total = 0;
  const std::size_t v = params.config.vocab_size;
  for (std::size_t start = 0; start < order.size();) {
    std::size_t end = start + 1;
    auto cost = [&](std::size_t i) {
      return std::max(corpus.pairs[order[i]].source.size(), corpus.pairs[order[i]].target.size());
    };
    std::size_t widest = cost(start);
    while (end < order.size() && (end - start + 1) * std::max(widest, cost(end)) <= batch_tokens)
      widest = std::max(widest, cost(end++));
    const Batch b = make_batch(corpus, std::span(order).subspan(start, end - start));
    Tape tape(Tape::Mode::inference);
    const Tensor logits = model_forward(tape, params, b, kInference).logits;
    for (std::size_t i = 0; i < b.target_out.size(); ++i) {
      if (b.target_out[i] == kPadId) continue;
      ++total;
      correct += argmax_lowest(std::span(logits.data() + i * v, v)) == static_cast<std::size_t>(b.target_out[i]);
    }
    start = end;
  }
  return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
}

MetricsReport evaluate(const ModelParams& params, const std::vector<ParallelCorpus>& corpora, const EvalOptions& opt) {
  MetricsReport report;
  report.directions.resize(corpora.size());
  auto run = [&](std::size_t d) {
    const ParallelCorpus& c = corpora[d];
    DirectionMetrics m;
    m.language = c.target_language;
    m.tier = c.tier;
    m.sentences = c.pairs.size();
    m.token_accuracy = teacher_forced_accuracy(params, c, opt.batch_tokens);
    if (opt.decode && !c.pairs.empty()) {
      std::vector<std::vector<int>> hyps, refs;
      std::size_t exact = 0;
      for (const auto& p : c.pairs) {
        const std::size_t limit = opt.max_len ? opt.max_len
                                              : std::min(params.config.max_sequence_length - 1, p.source.size() + 3);
        hyps.push_back(opt.beam == 1 ? greedy_decode(params, p.source, c.language, limit)
                                     : beam_decode(params, p.source, c.language, opt.beam, limit, opt.length_penalty));
        refs.push_back(strip_eos(p.target));
        exact += hyps.back() == refs.back();
      }
      m.bleu = corpus_bleu(hyps, refs);
      m.exact_match = static_cast<double>(exact) / static_cast<double>(c.pairs.size());
    }
    report.directions[d] = std::move(m);
  };
  const std::size_t threads = std::max<std::size_t>(1, std::min(opt.threads, corpora.size()));
  if (threads == 1) {
    for (std::size_t d = 0; d < corpora.size(); ++d) run(d);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t)
      pool.emplace_back([&, t] {
        for (std::size_t d = t; d < corpora.size(); d += threads) run(d);
      });
    for (auto& th : pool) th.join();
  }
  report.aggregate();
  return report;
}

std::string ConflictMatrix::to_json() const {
  json j;
  j["partition"] = partition;
  j["labels"] = labels;
  j["matrix"] = json::array();
  for (std::size_t i = 0; i < size(); ++i) {
    json row = json::array();
    for (std::size_t k = 0; k < size(); ++k) {
      const auto v = at(i, k);
      row.push_back(v ? json(*v) : json(nullptr));
    }
    j["matrix"].push_back(row);
  }
  return j.dump(2);
}

ConflictMatrix conflict_matrix_from_gradients(std::vector<std::string> labels,
                                              const std::vector<std::vector<double>>& grads, std::string partition) {
  if (labels.size() != grads.size()) throw std::invalid_argument("conflict matrix: label and gradient counts differ");
  const std::size_t n = grads.size();
  std::vector<double> norms(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (grads[i].size() != grads[0].size()) throw std::invalid_argument("conflict matrix: gradient sizes differ");
    norms[i] = std::sqrt(std::inner_product(grads[i].begin(), grads[i].end(), grads[i].begin(), 0.0));
  }
  ConflictMatrix m{std::move(labels), std::move(partition), std::vector<std::optional<double>>(n * n)};
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = i; k < n; ++k) {
      if (norms[i] == 0.0 || norms[k] == 0.0) continue;
      const double dot = std::inner_product(grads[i].begin(), grads[i].end(), grads[k].begin(), 0.0);
      const double cosine = std::clamp(dot / (norms[i] * norms[k]), -1.0, 1.0);
      m.values[i * n + k] = cosine;
      m.values[k * n + i] = cosine;
    }
  return m;
}

std::vector<double> probe_gradient(const ModelParams& params, const Batch& probe, PartitionSelector selector,
                                   double label_smoothing) {
  ModelParams work = params.clone();
  Tape tape;
  Tensor logits = model_forward(tape, work, probe, kInference).logits;
  tape.backward(label_smoothed_cross_entropy(tape, logits, probe.target_out, label_smoothing));
  std::vector<double> flat;
  for (const auto& p : work.named()) {
    if (selector == PartitionSelector::shared && p.partition != Partition::shared) continue;
    const auto g = p.tensor.grad_or_zero();
    flat.insert(flat.end(), g.begin(), g.end());
  }
  return flat;
}

ConflictMatrix gradient_conflict_matrix(const ModelParams& params, const std::vector<Batch>& probes,
                                        PartitionSelector selector, double label_smoothing) {
  std::vector<std::string> labels;
  std::vector<std::vector<double>> grads;
  for (const Batch& b : probes) {
    labels.push_back(params.config.languages.at(b.language).id);
    grads.push_back(probe_gradient(params, b, selector, label_smoothing));
  }
  return conflict_matrix_from_gradients(std::move(labels), grads,
                                        selector == PartitionSelector::shared ? "shared" : "all");
}

double dictionary_overlap(const ParallelCorpus& a, const ParallelCorpus& b, const Vocabulary& vocab) {
  auto types = [&](const ParallelCorpus& c) {
    std::set<int> s;
    for (const auto& p : c.pairs)
      for (int t : p.target)
        if (vocab.is_content(t)) s.insert(t);
    return s;
  };
  const auto sa = types(a), sb = types(b);
  if (sa.empty() || sb.empty()) throw std::invalid_argument("dictionary_overlap: empty token set");
  std::vector<int> common;
  std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
  const double uni = static_cast<double>(sa.size() + sb.size() - common.size());
  return static_cast<double>(common.size()) / uni;
}

std::vector<SelectionRow> selection_report(const ModelParams& params) {
  std::vector<SelectionRow> rows;
  const auto& langs = params.config.languages;
  for (std::size_t k = 0; k < langs.size(); ++k) {
    SelectionRow r{langs[k].id, langs[k].tier, std::nullopt, std::nullopt};
    if (langs[k].tier == Tier::high && params.config.language_specific) {
      r.probs = selection_probs(params, k);
      r.module = argmax_lowest(r.probs->alpha);
    }
    rows.push_back(std::move(r));
  }
  return rows;
}

std::string selection_report_json(const std::vector<SelectionRow>& rows) {
  json j = json::array();
  for (const auto& r : rows) {
    json row{{"language", r.language}, {"tier", std::string(tier_name(r.tier))}};
    if (r.probs) {
      row["module"] = *r.module;
      row["alpha"] = r.probs->alpha;
      row["logits"] = r.probs->logits;
    } else {
      row["module"] = "universal";
    }
    j.push_back(row);
  }
  return j.dump(2);
}

LayerSelector LayerSelector::parse(std::string_view text) {
  if (text == "slp-output") return {true, 0};
  std::size_t index = 0;
  auto res = std::from_chars(text.data(), text.data() + text.size(), index);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size())
    throw std::invalid_argument("layer selector must be a decoder layer index or 'slp-output', got '" +
                                std::string(text) + "'");
  return {false, index};
}

std::string LayerSelector::label() const { return slp_output ? "slp-output" : "decoder." + std::to_string(index); }

std::size_t export_decoder_representations(const ModelParams& params, const std::vector<std::vector<int>>& sentences,
                                           LayerSelector layer, std::ostream& out) {
  const ModelConfig& c = params.config;
  if (!layer.slp_output && layer.index >= c.decoder_layers)
    throw std::out_of_range("decoder layer " + std::to_string(layer.index) + " does not exist (model has " +
                            std::to_string(c.decoder_layers) + ")");
  std::size_t rows = 0;
  const int bos = kBosId;
  for (std::size_t k = 0; k < c.languages.size(); ++k) {
    for (std::size_t s = 0; s < sentences.size(); ++s) {
      std::vector<int> source{kFirstLanguageSymbol + static_cast<int>(k)};
      source.insert(source.end(), sentences[s].begin(), sentences[s].end());
      Tape tape(Tape::Mode::inference);
      EncoderState st = encode(tape, params, source, 1, source.size(), kInference);
      std::vector<Tensor> layers;
      Tensor h = decode(tape, params, st, std::span(&bos, 1), 1, kInference, &layers);
      Tensor v = layer.slp_output ? route(tape, params, k, h, PathMode::hard) : layers[layer.index];
      out << c.languages[k].id << '\t' << s << '\t' << layer.label();
      for (std::size_t i = 0; i < c.embed_dim; ++i) out << '\t' << format_double(v[i]);
      out << '\n';
      ++rows;
    }
  }
  return rows;
}

}  // namespace slpmt
