#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "slpmt/rng.hpp"
#include "slpmt/tensor.hpp"
#include "slpmt/types.hpp"

namespace slpmt {

struct LanguageSlot {
  std::string id;
  Tier tier = Tier::high;
  bool operator==(const LanguageSlot&) const = default;
};

struct ModelConfig {
  std::size_t embed_dim = 64;        // d_e
  std::size_t slp_hidden_dim = 128;  // d_h
  std::size_t pool_size = 3;         // T
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t vocab_size = 0;
  std::size_t max_sequence_length = 32;
  double dropout = 0.0;
  // false builds the plain multilingual baseline: no pool, no universal layer.
  bool language_specific = true;
  std::vector<LanguageSlot> languages;

  void validate() const;
  std::size_t language_index(const std::string& id) const;
  bool operator==(const ModelConfig&) const = default;
};

// Parameter groups used for routing and for per-partition gradient analysis.
enum class Partition { shared, pool, universal, selection, language_embedding, output };

const char* partition_name(Partition p);

struct NamedTensor {
  std::string name;
  Partition partition;
  Tensor tensor;
};

// One bottleneck module: LayerNorm(down * relu(up * h) + h).
struct Bottleneck {
  Tensor up;    // (d_e, d_h)
  Tensor down;  // (d_h, d_e)
  Tensor norm_gain;
  Tensor norm_bias;
};

struct Attention {
  Tensor query, key, value, out;  // (d_e, d_e) each
};

struct FeedForward {
  Tensor inner, inner_bias, outer, outer_bias;
};

struct EncoderLayer {
  Tensor norm1_gain, norm1_bias;
  Attention self_attention;
  Tensor norm2_gain, norm2_bias;
  FeedForward ffn;
};

struct DecoderLayer {
  Tensor norm1_gain, norm1_bias;
  Attention self_attention;
  Tensor norm2_gain, norm2_bias;
  Attention cross_attention;
  Tensor norm3_gain, norm3_bias;
  FeedForward ffn;
};

struct ModelParams {
  ModelConfig config;
  // shared
  Tensor token_embedding;  // (V, d_e)
  std::vector<EncoderLayer> encoder;
  Tensor encoder_norm_gain, encoder_norm_bias;
  std::vector<DecoderLayer> decoder;
  Tensor decoder_norm_gain, decoder_norm_bias;
  // language-specific
  std::vector<Bottleneck> pool;
  Bottleneck universal;
  Tensor selection;           // W_g, (d_e, T): e = E[L] W_g
  Tensor language_embedding;  // E, (K, d_e)
  Tensor output;              // W^o, (d_e, V)

  static ModelParams initialize(const ModelConfig& config, Rng& rng);

  // Calls f(name, partition, handle) for every learnable array in a fixed
  // order; handles may be reassigned.
  void visit(const std::function<void(const std::string&, Partition, Tensor&)>& f);

  // Every learnable array, in a fixed order, tagged with its partition.
  std::vector<NamedTensor> named() const;
  std::size_t parameter_count() const;
  void zero_grad();
  ModelParams clone() const;
};

Bottleneck init_bottleneck(std::size_t embed_dim, std::size_t hidden_dim, Rng& rng);

enum class PathMode { hard, soft };

struct ForwardOptions {
  PathMode path = PathMode::hard;
  bool train = false;    // enables dropout
  Rng* rng = nullptr;    // required when train && dropout > 0
};

struct EncoderState {
  Tensor memory;  // (B, Ls, d_e)
  std::vector<std::uint8_t> source_pad;  // B * Ls, 1 where padding
  std::size_t rows = 0;
  std::size_t length = 0;
};

EncoderState encode(Tape& tape, const ModelParams& params, std::span<const int> source, std::size_t rows,
                    std::size_t length, const ForwardOptions& options);

// Decoder stack over teacher-forcing inputs; returns the top features
// (B, Lt, d_e). When layer_outputs is given, each decoder layer's output is
// appended to it.
Tensor decode(Tape& tape, const ModelParams& params, const EncoderState& state, std::span<const int> target_in,
              std::size_t length, const ForwardOptions& options, std::vector<Tensor>* layer_outputs = nullptr);

// Shared encoder-decoder features h_s, shape (B, Lt, d_e).
Tensor forward_shared(Tape& tape, const ModelParams& params, const Batch& batch, const ForwardOptions& options);

Tensor slp_module_apply(Tape& tape, const Bottleneck& module, const Tensor& h);

struct SelectionProbs {
  std::size_t language = 0;
  std::vector<double> logits;  // e = W_g E[L]
  std::vector<double> alpha;   // softmax(e)
};

SelectionProbs selection_probs(const ModelParams& params, std::size_t language);
// Differentiable alpha for one language, shape (T).
Tensor selection_alpha(Tape& tape, const ModelParams& params, std::size_t language);
// Differentiable alphas for several languages, shape (n, T).
Tensor selection_alphas(Tape& tape, const ModelParams& params, std::span<const int> languages);
std::size_t argmax_lowest(std::span<const double> values);
std::size_t select_module(const ModelParams& params, std::size_t language);

Tensor slp_apply_hard(Tape& tape, const ModelParams& params, std::size_t language, const Tensor& h);
Tensor slp_apply_soft(Tape& tape, const ModelParams& params, std::size_t language, const Tensor& h);
Tensor universal_apply(Tape& tape, const ModelParams& params, const Tensor& h);
Tensor output_logits(Tape& tape, const ModelParams& params, const Tensor& h);

// Applies the routing rule to shared features: pool (hard or soft) for
// high-resource targets, universal layer for low-resource ones, identity for
// the baseline variant.
Tensor route(Tape& tape, const ModelParams& params, std::size_t language, const Tensor& h, PathMode path);

struct ForwardResult {
  Tensor logits;  // (B, Lt, V)
  std::optional<SelectionProbs> selection;
  std::optional<std::size_t> selected_module;
};

ForwardResult model_forward(Tape& tape, const ModelParams& params, const Batch& batch, const ForwardOptions& options);

}  // namespace slpmt
