#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "slpmt/model.hpp"
#include "slpmt/training.hpp"

namespace slpmt {

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
  bool operator==(const NamedArray&) const = default;
};

// Binary layout (little endian):
//   magic "SLPMTCKP", u32 version, u64 length + ModelConfig JSON, u64 step,
//   u32 length + stage tag, u64 array count, then per array sorted by name:
//   u32 length + name, u32 rank, u64 dims..., u64 count, f64 values...
// Arrays are prefixed "param/", "adam.m/", "adam.v/" and "adam.t/".
struct Checkpoint {
  ModelConfig config;
  std::vector<NamedArray> params;  // sorted by name
  std::map<std::string, AdamMoments> moments;
  std::uint64_t step = 0;
  std::string stage;

  static Checkpoint capture(const ModelParams& params, const Optimizer* opt, std::uint64_t step, std::string stage);
  ModelParams to_params() const;
  void restore_optimizer(Optimizer& opt) const;

  std::string serialize() const;
  static Checkpoint deserialize(std::string_view bytes);
  void save(const std::filesystem::path& file) const;
  static Checkpoint load(const std::filesystem::path& file);
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Elementwise mean of every parameter array; optimizer state from the last.
Checkpoint average_checkpoints(const std::vector<Checkpoint>& checkpoints);

std::string model_config_to_json(const ModelConfig& config);
ModelConfig model_config_from_json(std::string_view text);

}  // namespace slpmt
