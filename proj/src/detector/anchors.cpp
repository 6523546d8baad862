#include "detector/anchors.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "error.hpp"

namespace bidet {

void DetectorConfig::validate() const {
  require(height > 0 && height == width, ErrorCode::invalid_argument, "detector: input must be square and non-empty");
  require(num_classes > 0, ErrorCode::invalid_argument, "detector: need at least one foreground class");
  require(grid > 0 && width % grid == 0, ErrorCode::invalid_argument,
          "detector: grid " + std::to_string(grid) + " does not divide the " + std::to_string(width) + " px image evenly");
  require(anchors_per_block >= 1 && anchors_per_block <= 3, ErrorCode::invalid_argument,
          "detector: anchors_per_block must be 1..3");
  require(widths.size() == strides.size() && widths.size() >= 2, ErrorCode::invalid_argument,
          "detector: need matching widths/strides with at least two backbone layers");
  require(feature_channels > 0, ErrorCode::invalid_argument, "detector: feature_channels must be positive");
  std::size_t total = 1;
  for (auto s : strides) {
    require(s == 1 || s == 2, ErrorCode::invalid_argument, "detector: strides must be 1 or 2");
    total *= s;
  }
  for (auto w : widths) require(w > 0, ErrorCode::invalid_argument, "detector: layer widths must be positive");
  require(width % total == 0 && width / total == grid, ErrorCode::invalid_argument,
          "detector: stride schedule maps " + std::to_string(width) + " px to " + std::to_string(width / total) +
              " cells, expected grid " + std::to_string(grid));
  require(anchor_scale > 0, ErrorCode::invalid_argument, "detector: anchor_scale must be positive");
}

std::vector<bool> DetectorConfig::binarize_flags() const {
  std::vector<bool> flags(widths.size() + 1, false);
  for (std::size_t i = 1; i < widths.size(); ++i) flags[i] = binarize;
  return flags;
}

std::size_t AnchorGrid::block_of(double x, double y) const {
  const auto cell = [&](double v) {
    const double c = std::floor(v / block_size);
    return static_cast<std::size_t>(std::clamp(c, 0.0, static_cast<double>(grid - 1)));
  };
  return cell(y) * grid + cell(x);
}

AnchorGrid build_anchors(const DetectorConfig& config) {
  config.validate();
  AnchorGrid g;
  g.grid = config.grid;
  g.per_block = config.anchors_per_block;
  g.block_size = config.block_size();
  g.image_width = static_cast<double>(config.width);
  g.image_height = static_cast<double>(config.height);
  const double side = config.anchor_scale * g.block_size;
  const double r = std::sqrt(2.0);
  // square, tall (h:w = 2:1), wide (h:w = 1:2)
  const std::array<std::pair<double, double>, 3> hw = {{{side, side}, {side * r, side / r}, {side / r, side * r}}};
  for (std::size_t gy = 0; gy < g.grid; ++gy)
    for (std::size_t gx = 0; gx < g.grid; ++gx)
      for (std::size_t a = 0; a < g.per_block; ++a)
        g.anchors.push_back({(static_cast<double>(gx) + 0.5) * g.block_size, (static_cast<double>(gy) + 0.5) * g.block_size,
                             hw[a].first, hw[a].second});
  return g;
}

std::size_t BlockLabels::positives() const {
  return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
}

Offsets encode_offsets(const Anchor& anchor, const Box& box) {
  return {box.cx() - anchor.cx, box.cy() - anchor.cy, std::log(box.height() / anchor.h), std::log(box.width() / anchor.w)};
}

Box decode_offsets(const AnchorGrid& grid, const Offsets& o, std::size_t block, std::size_t anchor, bool clip) {
  const Anchor& a = grid.at(block, anchor);
  const double cx = a.cx + o[0], cy = a.cy + o[1];
  const double h = a.h * std::exp(o[2]), w = a.w * std::exp(o[3]);
  Box b{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
  return clip ? clip_box(b, grid.image_width, grid.image_height) : b;
}

BlockLabels assign_blocks(std::span<const LabeledBox> objects, const AnchorGrid& grid, double iou_pos) {
  const std::size_t nb = grid.blocks();
  BlockLabels labels;
  labels.cls.assign(nb, 0);
  labels.mask.assign(nb, 0);
  labels.anchor.assign(nb, 0);
  labels.target.assign(nb, Offsets{0, 0, 0, 0});

  std::vector<int> owner(nb, -1);
  for (std::size_t i = 0; i < objects.size(); ++i) {
    const Box& b = objects[i].box;
    require(b.area() > 0, ErrorCode::invalid_argument, "assign_blocks: degenerate groundtruth box");
    const std::size_t blk = grid.block_of(b.cx(), b.cy());
    if (owner[blk] >= 0) {
      ++labels.collisions;
      const Box& prev = objects[static_cast<std::size_t>(owner[blk])].box;
      log_incident("assign_blocks: two groundtruth centers in block " + std::to_string(blk) + ", keeping the larger object");
      if (b.area() <= prev.area()) continue;
    }
    owner[blk] = static_cast<int>(i);
  }

  for (std::size_t blk = 0; blk < nb; ++blk) {
    if (owner[blk] < 0) continue;
    const LabeledBox& obj = objects[static_cast<std::size_t>(owner[blk])];
    require(obj.class_id >= 1, ErrorCode::invalid_argument, "assign_blocks: groundtruth class must be >= 1");
    std::size_t best = 0;
    double best_iou = -1.0;
    for (std::size_t a = 0; a < grid.per_block; ++a) {
      const double v = iou(grid.at(blk, a).box(), obj.box);
      if (v > best_iou) {
        best_iou = v;
        best = a;
      }
    }
    if (best_iou < iou_pos) ++labels.weak_matches;
    labels.cls[blk] = obj.class_id;
    labels.mask[blk] = 1;
    labels.anchor[blk] = static_cast<int>(best);
    labels.target[blk] = encode_offsets(grid.at(blk, best), obj.box);
  }
  return labels;
}

}  // namespace bidet
