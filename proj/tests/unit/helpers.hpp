#pragma once

#include <cmath>
#include <vector>

#include "slpmt/data.hpp"
#include "slpmt/model.hpp"
#include "slpmt/tensor.hpp"

namespace slpmt::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double stddev = 1.0, bool requires_grad = false) {
  Rng rng(seed);
  return Tensor::normal(std::move(shape), stddev, rng, requires_grad);
}

// Contracts y against fixed random weights so every output entry matters.
inline Tensor weighted_sum(Tape& tape, const Tensor& y, std::uint64_t seed = 99) {
  return tape.sum(tape.multiply(y, random_tensor(y.shape(), seed)));
}

inline double max_abs_diff(std::span<const double> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double sum_abs(std::span<const double> a) {
  double s = 0.0;
  for (double v : a) s += std::abs(v);
  return s;
}

// Three high-resource targets and one low-resource target.
inline ModelConfig tiny_config(std::size_t pool = 3, bool language_specific = true) {
  ModelConfig c;
  c.embed_dim = 8;
  c.slp_hidden_dim = 12;
  c.pool_size = pool;
  c.encoder_layers = 1;
  c.decoder_layers = 2;
  c.heads = 2;
  c.ffn_dim = 16;
  c.vocab_size = 3 + 4 + 10;
  c.max_sequence_length = 12;
  c.language_specific = language_specific;
  c.languages = {{"aa", Tier::high}, {"bb", Tier::high}, {"cc", Tier::high}, {"dd", Tier::low}};
  return c;
}

inline ModelParams tiny_params(std::uint64_t seed = 1, std::size_t pool = 3, bool language_specific = true) {
  Rng rng(seed);
  return ModelParams::initialize(tiny_config(pool, language_specific), rng);
}

// Random batch of `rows` pairs for target language `language`, padded to
// source length ls and target length lt (last row shorter when rows > 1).
inline Batch tiny_batch(std::size_t language, std::size_t rows, std::size_t ls, std::size_t lt, std::uint64_t seed,
                        std::size_t vocab = 17) {
  Rng rng(seed);
  Batch b;
  b.rows = rows;
  b.source_length = ls;
  b.target_length = lt;
  b.language = language;
  const int first_content = kFirstLanguageSymbol + 4;
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t src_len = r + 1 == rows && rows > 1 ? ls - 1 : ls;
    const std::size_t tgt_len = r + 1 == rows && rows > 1 ? lt - 1 : lt;
    for (std::size_t i = 0; i < ls; ++i) {
      int tok = kPadId;
      if (i == 0) tok = kFirstLanguageSymbol + static_cast<int>(language);
      else if (i < src_len) tok = first_content + static_cast<int>(rng.below(vocab - first_content));
      b.source.push_back(tok);
    }
    std::vector<int> body;
    for (std::size_t i = 0; i + 1 < tgt_len; ++i) body.push_back(first_content + static_cast<int>(rng.below(vocab - first_content)));
    for (std::size_t i = 0; i < lt; ++i) {
      b.target_in.push_back(i == 0 ? kBosId : i < tgt_len ? body[i - 1] : kPadId);
      b.target_out.push_back(i + 1 < tgt_len ? body[i] : i + 1 == tgt_len ? kEosId : kPadId);
    }
  }
  return b;
}

}  // namespace slpmt::test
