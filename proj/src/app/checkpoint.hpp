#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "app/config.hpp"
#include "detector/model.hpp"
#include "tensor/adam.hpp"

namespace bidet {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedTensor {
  std::string name;
  Shape shape;
  std::vector<float> data;
};

// Binary container: "BDET", u32 version, config echo, epoch, optimizer step,
// rng state words, named float32 tensors. Integers and floats little-endian.
struct Checkpoint {
  std::uint32_t version = kCheckpointVersion;
  std::string config_text;
  std::uint64_t epoch = 0;
  std::uint64_t optimizer_step = 0;
  std::vector<std::uint64_t> rng_state;
  std::vector<NamedTensor> entries;

  const NamedTensor* find(const std::string& name) const;
};

std::vector<char> serialize_checkpoint(const Checkpoint& ckpt);
Checkpoint deserialize_checkpoint(const std::vector<char>& bytes, const std::string& origin = "checkpoint");
void save_checkpoint(const std::string& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::string& path);

std::vector<std::uint64_t> rng_words(const std::mt19937_64& rng);
std::mt19937_64 rng_from_words(const std::vector<std::uint64_t>& words);

struct TrainingState {
  RunConfig config;
  DetectorModel<float> model;
  AdamState adam;
  std::mt19937_64 rng;
  std::uint64_t epoch = 0;
};

Checkpoint make_checkpoint(const TrainingState& state);
// Rebuilds the state; every parameter, buffer and moment must be present with
// matching shape.
TrainingState restore_training_state(const Checkpoint& ckpt);
// Model only (Adam moments ignored when absent).
DetectorModel<float> restore_model(const Checkpoint& ckpt);

}  // namespace bidet
