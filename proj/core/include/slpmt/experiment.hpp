#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>

#include "slpmt/checkpoint.hpp"
#include "slpmt/data.hpp"
#include "slpmt/eval.hpp"
#include "slpmt/model.hpp"
#include "slpmt/training.hpp"

namespace slpmt {

inline constexpr const char* kToolVersion = "0.1.0";

// Architecture knobs of an experiment. Vocabulary size, languages and the
// baseline switch come from the data and the stage being trained.
struct ModelShape {
  std::size_t embed_dim = 64;
  std::size_t slp_hidden_dim = 128;
  std::size_t pool_size = 3;
  std::size_t encoder_layers = 2;
  std::size_t decoder_layers = 2;
  std::size_t heads = 4;
  std::size_t ffn_dim = 128;
  std::size_t max_sequence_length = 32;
  double dropout = 0.0;
  bool operator==(const ModelShape&) const = default;
};

struct ExperimentConfig {
  // Relative paths are resolved against the config file's directory.
  std::string data_dir;
  std::string output_dir;
  SuiteConfig data;
  ModelShape model;
  TrainConfig train;
  SamplingSchedule sampling;
  std::size_t beam = 5;
  double length_penalty = 1.0;
};

// The desk-scale suite: four high-resource targets of 20k pairs, two
// low-resource targets of 500 pairs.
SuiteConfig default_suite_config();
ExperimentConfig default_experiment_config();

std::string experiment_config_to_json(const ExperimentConfig& config);
ExperimentConfig experiment_config_from_json(std::string_view text);
ExperimentConfig load_experiment_config(const std::filesystem::path& file);

ModelConfig model_config_for(const ModelShape& shape, const SyntheticSuite& suite, Stage stage);

// FNV-1a over the bytes, as 16 hex digits.
std::string fnv1a_hex(std::string_view bytes);

// manifest.json: command, hash of the canonical config text, seed, tool
// version, and content hashes of named input files.
void write_manifest(const std::filesystem::path& dir, const std::string& command, const std::string& config_text,
                    std::uint64_t seed, const std::map<std::string, std::filesystem::path>& inputs = {});
std::string file_hash(const std::filesystem::path& file);

struct TrainingRun {
  Checkpoint final_checkpoint;  // mean of checkpoint_average snapshots spread over the last epoch
  std::size_t epochs_trained = 0;
  std::size_t steps_per_epoch = 0;
};

struct TrainingHooks {
  std::ostream* log = nullptr;  // JSONL step records
  std::function<void(std::size_t epoch, const ModelParams&)> on_epoch;
};

// Trains one stage and writes epoch checkpoints to `out_dir/checkpoints`
// (stage1-epoch-NNN.ckpt and so on) plus `out_dir/final.ckpt`. Stage two needs a stage-one (or
// an unfinished stage-two) checkpoint in `resume`; stage one and the baseline
// may resume from their own epoch checkpoints.
TrainingRun run_training(const ExperimentConfig& config, const SyntheticSuite& suite, Stage stage,
                         const std::optional<Checkpoint>& resume, const std::filesystem::path& out_dir,
                         const TrainingHooks& hooks = {});

// Probe batch for a direction: the leading dev pairs that fit the budget.
Batch probe_batch(const ParallelCorpus& corpus, std::size_t token_budget);

// Keeps large tensor buffers on the heap instead of fresh mmap pages; a
// training step otherwise spends about half its time in page faults.
void tune_allocator();

// SLP_MNMT_THREADS, default 1.
std::size_t thread_cap();

}  // namespace slpmt
