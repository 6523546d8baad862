#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "detector/anchors.hpp"
#include "eval/metrics.hpp"
#include "loss/ib_loss.hpp"
#include "tensor/adam.hpp"

namespace bidet {

struct OptimConfig {
  AdamConfig adam;
  std::vector<int> decay_epochs = {6, 10};
  float decay_factor = 0.1f;
};

struct TrainConfig {
  std::size_t epochs = 12;
  std::size_t batch = 8;
  // Training images used for the per-epoch train-split metrics row.
  std::size_t eval_train_count = 500;
  bool augment = true;
  std::string resume;
};

struct RunConfig {
  DetectorConfig model;
  LossWeights loss;
  OptimConfig optim;
  TrainConfig train;
  EvalOptions eval;
  std::string data_train;
  std::string data_test;
  std::uint64_t seed = 1;
  std::string out = "run";

  void validate() const;
};

// Applies one `key = value` assignment (dotted keys). Unknown keys and
// malformed values raise ErrorCode::invalid_argument.
void apply_config_value(RunConfig& config, const std::string& key, const std::string& value);
std::string config_value(const RunConfig& config, const std::string& key);
// Flat `key = value` text; '#' starts a comment.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::string& path);

// Canonical echo of every key, one `key = value` per line in a fixed order.
// Reparsing it reproduces the configuration.
std::string config_echo(const RunConfig& config);
// FNV-1a over the echo without the output/resume locations.
std::uint64_t config_hash(const RunConfig& config);
std::string hash_hex(std::uint64_t h);

}  // namespace bidet
