#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "detector/geometry.hpp"

namespace bidet {

struct DetectorConfig {
  std::size_t height = 48;
  std::size_t width = 48;
  // Foreground classes; class 0 is background.
  std::size_t num_classes = 3;
  std::size_t grid = 6;
  std::size_t anchors_per_block = 3;
  // Backbone conv layers before the feature layer. Layer 0 is real-valued,
  // the rest are binarized when `binarize` is set.
  std::vector<std::size_t> widths = {16, 32, 32, 64, 64};
  std::vector<std::size_t> strides = {2, 2, 1, 2, 1};
  // Channels of the binary high-level feature map (real-valued layer).
  std::size_t feature_channels = 64;
  bool shortcut = false;
  bool binarize = true;
  bool scale_factors = false;
  double anchor_scale = 1.5;

  void validate() const;
  std::size_t blocks() const { return grid * grid; }
  double block_size() const { return static_cast<double>(width) / static_cast<double>(grid); }
  std::size_t class_slots() const { return num_classes + 1; }
  // One flag per backbone layer including the feature layer.
  std::vector<bool> binarize_flags() const;
};

struct Anchor {
  double cx = 0, cy = 0, h = 0, w = 0;

  Box box() const { return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h}; }
};

struct AnchorGrid {
  std::size_t grid = 0;
  std::size_t per_block = 0;
  double block_size = 0;
  double image_width = 0, image_height = 0;
  // index = block * per_block + a, block = gy * grid + gx
  std::vector<Anchor> anchors;

  const Anchor& at(std::size_t block, std::size_t a) const { return anchors.at(block * per_block + a); }
  std::size_t blocks() const { return grid * grid; }
  std::size_t block_of(double x, double y) const;
};

// Anchors at block centers, aspect ratios 1:1, 2:1 (tall), 1:2 (wide) with
// equal area, side = anchor_scale * block side for the square one.
AnchorGrid build_anchors(const DetectorConfig& config);

// Offset layout per block/anchor: [dx, dy, dh, dw] where (dx, dy) shifts the
// center and (dh, dw) are log size ratios.
using Offsets = std::array<double, 4>;

struct BlockLabels {
  std::vector<int> cls;
  std::vector<std::uint8_t> mask;
  std::vector<int> anchor;
  std::vector<Offsets> target;
  // Positive blocks whose best anchor IoU is below the assignment threshold.
  std::size_t weak_matches = 0;
  std::size_t collisions = 0;

  std::size_t positives() const;
};

BlockLabels assign_blocks(std::span<const LabeledBox> objects, const AnchorGrid& grid, double iou_pos = 0.5);

Offsets encode_offsets(const Anchor& anchor, const Box& box);
Box decode_offsets(const AnchorGrid& grid, const Offsets& offsets, std::size_t block, std::size_t anchor, bool clip = true);

}  // namespace bidet
