#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "detector/geometry.hpp"
#include "tensor/tensor.hpp"

namespace bidet {

enum class ShapeKind { disc = 1, square = 2, triangle = 3 };

struct SceneConfig {
  std::size_t width = 48;
  std::size_t height = 48;
  std::size_t num_classes = 3;
  std::size_t min_objects = 0;
  std::size_t max_objects = 4;
  std::size_t min_size = 12;
  std::size_t max_size = 20;
  double noise_sigma = 0.05;
  // Object centers are spread one per block of this grid.
  std::size_t grid = 6;
  std::size_t max_tries = 100;
  double background = 0.5;
  // Minimum per-channel L-inf distance between a fill color and the background.
  double min_contrast = 0.3;

  void validate() const;
};

// image is CHW with 3 channels, values k/255.
struct Scene {
  std::size_t width = 0, height = 0;
  std::vector<float> image;
  std::vector<LabeledBox> objects;

  float pixel(std::size_t c, std::size_t y, std::size_t x) const { return image[(c * height + y) * width + x]; }
};

const std::vector<std::string>& default_class_names();

Scene generate_scene(std::mt19937_64& rng, const SceneConfig& config);
// Scene `index` of the dataset with the given seed; independent of other indices.
Scene generate_indexed_scene(std::uint64_t seed, std::size_t index, const SceneConfig& config);
std::vector<Scene> generate_scenes(std::uint64_t seed, std::size_t count, const SceneConfig& config);

struct DatasetRecord {
  std::string image_path;  // relative to the dataset directory
  std::vector<LabeledBox> objects;
};

struct DatasetManifest {
  std::string split = "train";
  std::uint64_t seed = 0;
  std::vector<std::string> class_names;
  std::vector<DatasetRecord> records;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Scene> scenes;
};

void write_ppm(const std::filesystem::path& path, const Scene& scene);
Scene read_ppm(const std::filesystem::path& path);

DatasetManifest write_dataset(const std::filesystem::path& dir, std::span<const Scene> scenes, const std::string& split,
                              std::uint64_t seed, const std::vector<std::string>& class_names = default_class_names());
Dataset read_dataset(const std::filesystem::path& dir);
std::string format_manifest(const DatasetManifest& manifest);
DatasetManifest parse_manifest(const std::string& text);

Scene flip_horizontal(const Scene& scene);
// Shifts image content by (dx, dy); vacated pixels take the background level.
// Boxes are shifted and clipped; objects left with zero area are dropped.
Scene translate(const Scene& scene, int dx, int dy, double background = 0.5);
Scene augment(const Scene& scene, std::mt19937_64& rng, double flip_prob = 0.5, int jitter = 2);

// Stacks scenes into an [N, 3, H, W] tensor.
Tensor<float> scenes_to_tensor(std::span<const Scene> scenes);
Tensor<float> scenes_to_tensor(std::span<const Scene* const> scenes);

}  // namespace bidet
