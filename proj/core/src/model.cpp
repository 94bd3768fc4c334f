#include "slpmt/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

namespace slpmt {
namespace {

Tensor xavier(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in + fan_out));
  return Tensor::normal({fan_in, fan_out}, stddev, rng, true);
}

Tensor ones(std::size_t n) { return Tensor::full({n}, 1.0, true); }
Tensor zeros(std::size_t n) { return Tensor::zeros({n}, true); }

Attention init_attention(std::size_t d, Rng& rng) {
  return {xavier(d, d, rng), xavier(d, d, rng), xavier(d, d, rng), xavier(d, d, rng)};
}

FeedForward init_ffn(std::size_t d, std::size_t inner, Rng& rng) {
  return {xavier(d, inner, rng), zeros(inner), xavier(inner, d, rng), zeros(d)};
}

using Visitor = std::function<void(const std::string&, Partition, Tensor&)>;

void visit_bottleneck(const Visitor& f, const std::string& prefix, Partition part, Bottleneck& b) {
  f(prefix + ".up", part, b.up);
  f(prefix + ".down", part, b.down);
  f(prefix + ".norm.gain", part, b.norm_gain);
  f(prefix + ".norm.bias", part, b.norm_bias);
}

void visit_attention(const Visitor& f, const std::string& prefix, Attention& a) {
  f(prefix + ".query", Partition::shared, a.query);
  f(prefix + ".key", Partition::shared, a.key);
  f(prefix + ".value", Partition::shared, a.value);
  f(prefix + ".out", Partition::shared, a.out);
}

void visit_ffn(const Visitor& f, const std::string& prefix, FeedForward& ff) {
  f(prefix + ".inner", Partition::shared, ff.inner);
  f(prefix + ".inner_bias", Partition::shared, ff.inner_bias);
  f(prefix + ".outer", Partition::shared, ff.outer);
  f(prefix + ".outer_bias", Partition::shared, ff.outer_bias);
}

Tensor sinusoid_positions(std::size_t rows, std::size_t length, std::size_t d) {
  std::vector<double> table(length * d);
  for (std::size_t pos = 0; pos < length; ++pos)
    for (std::size_t i = 0; i < d; i += 2) {
      const double angle = static_cast<double>(pos) / std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
      table[pos * d + i] = std::sin(angle);
      if (i + 1 < d) table[pos * d + i + 1] = std::cos(angle);
    }
  std::vector<double> tiled(rows * length * d);
  for (std::size_t r = 0; r < rows; ++r) std::copy(table.begin(), table.end(), tiled.begin() + r * length * d);
  return Tensor::from_values({rows, length, d}, std::move(tiled));
}

Tensor embed(Tape& tape, const ModelParams& p, std::span<const int> ids, std::size_t rows, std::size_t length,
             const ForwardOptions& opt) {
  const ModelConfig& c = p.config;
  if (length > c.max_sequence_length)
    throw std::invalid_argument("sequence length " + std::to_string(length) + " exceeds max_sequence_length " +
                                std::to_string(c.max_sequence_length));
  for (int id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size)
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(c.vocab_size));
  Tensor x = tape.embedding(p.token_embedding, ids, {rows, length});
  x = tape.scale(x, std::sqrt(static_cast<double>(c.embed_dim)));
  x = tape.add(x, sinusoid_positions(rows, length, c.embed_dim));
  if (opt.train && c.dropout > 0.0) x = tape.dropout(x, c.dropout, *opt.rng);
  return x;
}

// mask is (B, H, Lq, Lk), nonzero where attention is blocked.
Tensor attend(Tape& tape, const Attention& a, const Tensor& queries, const Tensor& keys_values,
              std::span<const std::uint8_t> mask, const ModelConfig& c, const ForwardOptions& opt) {
  const std::size_t rows = queries.dim(0), lq = queries.dim(1), lk = keys_values.dim(1);
  const std::size_t h = c.heads, dh = c.embed_dim / c.heads;
  auto split = [&](const Tensor& x, std::size_t len) {
    return tape.transpose(tape.reshape(x, {rows, len, h, dh}), 1, 2);
  };
  Tensor q = split(tape.matmul(queries, a.query), lq);
  Tensor k = split(tape.matmul(keys_values, a.key), lk);
  Tensor v = split(tape.matmul(keys_values, a.value), lk);
  Tensor scores = tape.scale(tape.matmul(q, k, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  scores = tape.masked_fill(scores, mask, -1e9);
  Tensor weights = tape.softmax(scores);
  if (opt.train && c.dropout > 0.0) weights = tape.dropout(weights, c.dropout, *opt.rng);
  Tensor context = tape.reshape(tape.transpose(tape.matmul(weights, v), 1, 2), {rows, lq, c.embed_dim});
  return tape.matmul(context, a.out);
}

Tensor feed_forward(Tape& tape, const FeedForward& f, const Tensor& x, const ModelConfig& c,
                    const ForwardOptions& opt) {
  Tensor hidden = tape.relu(tape.add(tape.matmul(x, f.inner), f.inner_bias));
  if (opt.train && c.dropout > 0.0) hidden = tape.dropout(hidden, c.dropout, *opt.rng);
  return tape.add(tape.matmul(hidden, f.outer), f.outer_bias);
}

Tensor residual(Tape& tape, const Tensor& x, const Tensor& branch, const ModelConfig& c, const ForwardOptions& opt) {
  Tensor b = (opt.train && c.dropout > 0.0) ? tape.dropout(branch, c.dropout, *opt.rng) : branch;
  return tape.add(x, b);
}

std::vector<std::uint8_t> key_padding_mask(const std::vector<std::uint8_t>& pad, std::size_t rows, std::size_t heads,
                                           std::size_t lq, std::size_t lk) {
  std::vector<std::uint8_t> mask(rows * heads * lq * lk);
  for (std::size_t b = 0; b < rows; ++b)
    for (std::size_t hh = 0; hh < heads; ++hh)
      for (std::size_t i = 0; i < lq; ++i)
        std::copy_n(pad.begin() + b * lk, lk, mask.begin() + ((b * heads + hh) * lq + i) * lk);
  return mask;
}

std::vector<std::uint8_t> causal_mask(std::size_t rows, std::size_t heads, std::size_t len) {
  std::vector<std::uint8_t> mask(rows * heads * len * len);
  for (std::size_t bh = 0; bh < rows * heads; ++bh)
    for (std::size_t i = 0; i < len; ++i)
      for (std::size_t j = i + 1; j < len; ++j) mask[(bh * len + i) * len + j] = 1;
  return mask;
}

void check_language(const ModelParams& p, std::size_t language) {
  if (language >= p.config.languages.size())
    throw std::out_of_range("language index " + std::to_string(language) + " is not registered");
}

void check_width(const char* op, const Tensor& h, std::size_t d) {
  if (h.rank() == 0 || h.shape().back() != d)
    throw ShapeError(std::string(op) + ": expected last dimension " + std::to_string(d) + ", got shape " +
                     shape_string(h.shape()));
}

}  // namespace

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("model config: " + m); };
  if (embed_dim == 0 || heads == 0 || embed_dim % heads != 0) fail("embed_dim must be divisible by heads");
  if (language_specific && !(embed_dim < slp_hidden_dim)) fail("embed_dim must be smaller than slp_hidden_dim");
  if (language_specific && pool_size < 1) fail("pool_size must be at least 1");
  if (languages.empty()) fail("at least one language is required");
  if (vocab_size <= languages.size() + kFirstLanguageSymbol) fail("vocab_size must exceed the reserved tokens");
  if (max_sequence_length < 2) fail("max_sequence_length must be at least 2");
  if (!(dropout >= 0.0 && dropout < 1.0)) fail("dropout must lie in [0, 1)");
  if (encoder_layers == 0 || decoder_layers == 0) fail("at least one encoder and one decoder layer are required");
}

std::size_t ModelConfig::language_index(const std::string& id) const {
  for (std::size_t i = 0; i < languages.size(); ++i)
    if (languages[i].id == id) return i;
  throw std::out_of_range("language '" + id + "' is not registered");
}

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::shared: return "shared";
    case Partition::pool: return "pool";
    case Partition::universal: return "universal";
    case Partition::selection: return "selection";
    case Partition::language_embedding: return "language_embedding";
    case Partition::output: return "output";
  }
  return "?";
}

Bottleneck init_bottleneck(std::size_t embed_dim, std::size_t hidden_dim, Rng& rng) {
  return {xavier(embed_dim, hidden_dim, rng), xavier(hidden_dim, embed_dim, rng), ones(embed_dim), zeros(embed_dim)};
}

ModelParams ModelParams::initialize(const ModelConfig& config, Rng& rng) {
  config.validate();
  ModelParams p;
  p.config = config;
  const std::size_t d = config.embed_dim, v = config.vocab_size;
  const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
  p.token_embedding = Tensor::normal({v, d}, emb_std, rng, true);
  for (std::size_t i = 0; i < config.encoder_layers; ++i) {
    EncoderLayer l;
    l.norm1_gain = ones(d);
    l.norm1_bias = zeros(d);
    l.self_attention = init_attention(d, rng);
    l.norm2_gain = ones(d);
    l.norm2_bias = zeros(d);
    l.ffn = init_ffn(d, config.ffn_dim, rng);
    p.encoder.push_back(std::move(l));
  }
  p.encoder_norm_gain = ones(d);
  p.encoder_norm_bias = zeros(d);
  for (std::size_t i = 0; i < config.decoder_layers; ++i) {
    DecoderLayer l;
    l.norm1_gain = ones(d);
    l.norm1_bias = zeros(d);
    l.self_attention = init_attention(d, rng);
    l.norm2_gain = ones(d);
    l.norm2_bias = zeros(d);
    l.cross_attention = init_attention(d, rng);
    l.norm3_gain = ones(d);
    l.norm3_bias = zeros(d);
    l.ffn = init_ffn(d, config.ffn_dim, rng);
    p.decoder.push_back(std::move(l));
  }
  p.decoder_norm_gain = ones(d);
  p.decoder_norm_bias = zeros(d);
  if (config.language_specific) {
    for (std::size_t t = 0; t < config.pool_size; ++t)
      p.pool.push_back(init_bottleneck(d, config.slp_hidden_dim, rng));
    p.universal = init_bottleneck(d, config.slp_hidden_dim, rng);
    p.selection = xavier(d, config.pool_size, rng);
    p.language_embedding = Tensor::normal({config.languages.size(), d}, 1.0, rng, true);
  }
  p.output = Tensor::normal({d, v}, emb_std, rng, true);
  return p;
}

void ModelParams::visit(const Visitor& f) {
  const Partition sh = Partition::shared;
  f("shared.token_embedding", sh, token_embedding);
  for (std::size_t i = 0; i < encoder.size(); ++i) {
    const std::string pre = "shared.encoder." + std::to_string(i);
    EncoderLayer& l = encoder[i];
    f(pre + ".norm1.gain", sh, l.norm1_gain);
    f(pre + ".norm1.bias", sh, l.norm1_bias);
    visit_attention(f, pre + ".self_attention", l.self_attention);
    f(pre + ".norm2.gain", sh, l.norm2_gain);
    f(pre + ".norm2.bias", sh, l.norm2_bias);
    visit_ffn(f, pre + ".ffn", l.ffn);
  }
  f("shared.encoder.norm.gain", sh, encoder_norm_gain);
  f("shared.encoder.norm.bias", sh, encoder_norm_bias);
  for (std::size_t i = 0; i < decoder.size(); ++i) {
    const std::string pre = "shared.decoder." + std::to_string(i);
    DecoderLayer& l = decoder[i];
    f(pre + ".norm1.gain", sh, l.norm1_gain);
    f(pre + ".norm1.bias", sh, l.norm1_bias);
    visit_attention(f, pre + ".self_attention", l.self_attention);
    f(pre + ".norm2.gain", sh, l.norm2_gain);
    f(pre + ".norm2.bias", sh, l.norm2_bias);
    visit_attention(f, pre + ".cross_attention", l.cross_attention);
    f(pre + ".norm3.gain", sh, l.norm3_gain);
    f(pre + ".norm3.bias", sh, l.norm3_bias);
    visit_ffn(f, pre + ".ffn", l.ffn);
  }
  f("shared.decoder.norm.gain", sh, decoder_norm_gain);
  f("shared.decoder.norm.bias", sh, decoder_norm_bias);
  if (config.language_specific) {
    for (std::size_t t = 0; t < pool.size(); ++t) visit_bottleneck(f, "pool." + std::to_string(t), Partition::pool, pool[t]);
    visit_bottleneck(f, "universal", Partition::universal, universal);
    f("selection.weight", Partition::selection, selection);
    f("language_embedding", Partition::language_embedding, language_embedding);
  }
  f("output.weight", Partition::output, output);
}

std::vector<NamedTensor> ModelParams::named() const {
  std::vector<NamedTensor> out;
  const_cast<ModelParams*>(this)->visit(
      [&](const std::string& name, Partition part, Tensor& t) { out.push_back({name, part, t}); });
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : named()) n += t.tensor.size();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& t : named()) {
    Tensor handle = t.tensor;
    handle.clear_grad();
  }
}

ModelParams ModelParams::clone() const {
  ModelParams copy = *this;
  copy.visit([](const std::string&, Partition, Tensor& t) { t = t.clone(); });
  return copy;
}

EncoderState encode(Tape& tape, const ModelParams& p, std::span<const int> source, std::size_t rows,
                    std::size_t length, const ForwardOptions& opt) {
  const ModelConfig& c = p.config;
  EncoderState st;
  st.rows = rows;
  st.length = length;
  st.source_pad.resize(rows * length);
  for (std::size_t i = 0; i < rows * length; ++i) st.source_pad[i] = source[i] == kPadId;
  const auto mask = key_padding_mask(st.source_pad, rows, c.heads, length, length);
  Tensor x = embed(tape, p, source, rows, length, opt);
  for (const EncoderLayer& l : p.encoder) {
    Tensor n1 = tape.layer_norm(x, l.norm1_gain, l.norm1_bias);
    x = residual(tape, x, attend(tape, l.self_attention, n1, n1, mask, c, opt), c, opt);
    Tensor n2 = tape.layer_norm(x, l.norm2_gain, l.norm2_bias);
    x = residual(tape, x, feed_forward(tape, l.ffn, n2, c, opt), c, opt);
  }
  st.memory = tape.layer_norm(x, p.encoder_norm_gain, p.encoder_norm_bias);
  return st;
}

Tensor decode(Tape& tape, const ModelParams& p, const EncoderState& st, std::span<const int> target_in,
              std::size_t length, const ForwardOptions& opt, std::vector<Tensor>* layer_outputs) {
  const ModelConfig& c = p.config;
  const std::size_t rows = st.rows;
  const auto self_mask = causal_mask(rows, c.heads, length);
  const auto cross_mask = key_padding_mask(st.source_pad, rows, c.heads, length, st.length);
  Tensor x = embed(tape, p, target_in, rows, length, opt);
  for (const DecoderLayer& l : p.decoder) {
    Tensor n1 = tape.layer_norm(x, l.norm1_gain, l.norm1_bias);
    x = residual(tape, x, attend(tape, l.self_attention, n1, n1, self_mask, c, opt), c, opt);
    Tensor n2 = tape.layer_norm(x, l.norm2_gain, l.norm2_bias);
    x = residual(tape, x, attend(tape, l.cross_attention, n2, st.memory, cross_mask, c, opt), c, opt);
    Tensor n3 = tape.layer_norm(x, l.norm3_gain, l.norm3_bias);
    x = residual(tape, x, feed_forward(tape, l.ffn, n3, c, opt), c, opt);
    if (layer_outputs) layer_outputs->push_back(x);
  }
  return tape.layer_norm(x, p.decoder_norm_gain, p.decoder_norm_bias);
}

Tensor forward_shared(Tape& tape, const ModelParams& p, const Batch& b, const ForwardOptions& opt) {
  if (b.source.size() != b.rows * b.source_length || b.target_in.size() != b.rows * b.target_length)
    throw ShapeError("forward_shared: batch arrays do not match their declared shape");
  EncoderState st = encode(tape, p, b.source, b.rows, b.source_length, opt);
  return decode(tape, p, st, b.target_in, b.target_length, opt);
}

Tensor slp_module_apply(Tape& tape, const Bottleneck& m, const Tensor& h) {
  check_width("slp_module_apply", h, m.up.dim(0));
  Tensor branch = tape.matmul(tape.relu(tape.matmul(h, m.up)), m.down);
  return tape.layer_norm(tape.add(branch, h), m.norm_gain, m.norm_bias);
}

SelectionProbs selection_probs(const ModelParams& p, std::size_t language) {
  check_language(p, language);
  if (!p.config.language_specific) throw std::logic_error("selection_probs: model has no language-specific pool");
  Tape tape(Tape::Mode::inference);
  const int id = static_cast<int>(language);
  Tensor logits = tape.matmul(tape.embedding(p.language_embedding, std::span(&id, 1), {1}), p.selection);
  Tensor alpha = tape.softmax(logits);
  SelectionProbs s;
  s.language = language;
  s.logits.assign(logits.values().begin(), logits.values().end());
  s.alpha.assign(alpha.values().begin(), alpha.values().end());
  return s;
}

Tensor selection_alphas(Tape& tape, const ModelParams& p, std::span<const int> languages) {
  for (int l : languages) check_language(p, static_cast<std::size_t>(l));
  Tensor e = tape.embedding(p.language_embedding, languages, {languages.size()});
  return tape.softmax(tape.matmul(e, p.selection));
}

Tensor selection_alpha(Tape& tape, const ModelParams& p, std::size_t language) {
  const int id = static_cast<int>(language);
  return tape.reshape(selection_alphas(tape, p, std::span(&id, 1)), {p.config.pool_size});
}

std::size_t argmax_lowest(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

std::size_t select_module(const ModelParams& p, std::size_t language) {
  return argmax_lowest(selection_probs(p, language).alpha);
}

Tensor slp_apply_hard(Tape& tape, const ModelParams& p, std::size_t language, const Tensor& h) {
  check_language(p, language);
  if (p.config.languages[language].tier != Tier::high)
    throw std::invalid_argument("slp_apply_hard: low-resource target '" + p.config.languages[language].id +
                                "' must use the universal layer");
  return slp_module_apply(tape, p.pool[select_module(p, language)], h);
}

Tensor slp_apply_soft(Tape& tape, const ModelParams& p, std::size_t language, const Tensor& h) {
  check_language(p, language);
  if (p.config.languages[language].tier != Tier::high)
    throw std::invalid_argument("slp_apply_soft: low-resource target '" + p.config.languages[language].id +
                                "' must use the universal layer");
  check_width("slp_apply_soft", h, p.config.embed_dim);
  const std::size_t n = h.size(), pool = p.pool.size();
  std::vector<Tensor> outputs;
  outputs.reserve(pool);
  for (const Bottleneck& m : p.pool) outputs.push_back(tape.reshape(slp_module_apply(tape, m, h), {1, n}));
  Tensor stacked = tape.concat(outputs, 0);  // (T, n)
  Tensor alpha = tape.reshape(selection_alpha(tape, p, language), {1, pool});
  return tape.reshape(tape.matmul(alpha, stacked), h.shape());
}

Tensor universal_apply(Tape& tape, const ModelParams& p, const Tensor& h) {
  return slp_module_apply(tape, p.universal, h);
}

Tensor output_logits(Tape& tape, const ModelParams& p, const Tensor& h) {
  check_width("output_logits", h, p.config.embed_dim);
  return tape.matmul(h, p.output);
}

Tensor route(Tape& tape, const ModelParams& p, std::size_t language, const Tensor& h, PathMode path) {
  check_language(p, language);
  if (!p.config.language_specific) return h;
  if (p.config.languages[language].tier == Tier::low) return universal_apply(tape, p, h);
  return path == PathMode::hard ? slp_apply_hard(tape, p, language, h) : slp_apply_soft(tape, p, language, h);
}

ForwardResult model_forward(Tape& tape, const ModelParams& p, const Batch& b, const ForwardOptions& opt) {
  check_language(p, b.language);
  ForwardResult r;
  Tensor h = forward_shared(tape, p, b, opt);
  r.logits = output_logits(tape, p, route(tape, p, b.language, h, opt.path));
  if (p.config.language_specific && p.config.languages[b.language].tier == Tier::high) {
    r.selection = selection_probs(p, b.language);
    r.selected_module = argmax_lowest(r.selection->alpha);
  }
  if (!r.logits.all_finite()) throw NumericError("model_forward: non-finite logits");
  return r;
}

}  // namespace slpmt
