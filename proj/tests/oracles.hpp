#pragma once

// Brute-force reference implementations for metric tests. These avoid the
// library's code paths on purpose: NMS by subset enumeration, AP by
// recomputing the matching on every score prefix.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "detector/geometry.hpp"

namespace oracle {

using bidet::Box;
using bidet::Detection;
using bidet::LabeledBox;

inline double box_iou(const Box& a, const Box& b) {
  const double aa = std::max(0.0, a.x_max - a.x_min) * std::max(0.0, a.y_max - a.y_min);
  const double ab = std::max(0.0, b.x_max - b.x_min) * std::max(0.0, b.y_max - b.y_min);
  if (aa <= 0 || ab <= 0) return 0.0;
  const double iw = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
  const double ih = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
  if (iw <= 0 || ih <= 0) return 0.0;
  const double inter = iw * ih;
  return inter / (aa + ab - inter);
}

// d1 outranks d2 for suppression: higher score, then lower anchor index.
inline bool outranks(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.anchor_index < b.anchor_index;
}

// The greedy NMS result is the unique subset S such that no two same-class
// members of S overlap above the threshold and every excluded detection is
// overlapped by a higher-ranked member of S. Enumerate and return it as
// a keep mask (input order).
inline std::vector<bool> nms_keep_mask(const std::vector<Detection>& dets, double thresh) {
  const std::size_t n = dets.size();
  auto conflict = [&](std::size_t i, std::size_t j) {
    return dets[i].image_id == dets[j].image_id && dets[i].class_id == dets[j].class_id &&
           box_iou(dets[i].box, dets[j].box) > thresh;
  };
  std::vector<bool> found;
  int solutions = 0;
  for (std::uint32_t mask = 0; mask < (1u << n); ++mask) {
    bool ok = true;
    for (std::size_t i = 0; i < n && ok; ++i)
      for (std::size_t j = i + 1; j < n && ok; ++j)
        if ((mask >> i & 1) && (mask >> j & 1) && conflict(i, j)) ok = false;
    for (std::size_t i = 0; i < n && ok; ++i) {
      if (mask >> i & 1) continue;
      bool covered = false;
      for (std::size_t j = 0; j < n; ++j)
        if ((mask >> j & 1) && outranks(dets[j], dets[i]) && conflict(i, j)) covered = true;
      if (!covered) ok = false;
    }
    if (ok) {
      ++solutions;
      found.assign(n, false);
      for (std::size_t i = 0; i < n; ++i) found[i] = mask >> i & 1;
    }
  }
  if (solutions != 1) found.clear();  // signals a broken oracle assumption
  return found;
}

// TP count when only the first k ranked detections (of one class) exist.
// Each detection, in rank order, claims the highest-IoU unclaimed
// groundtruth of its class and image if that IoU reaches the threshold.
inline std::size_t prefix_tp(const std::vector<Detection>& ranked, std::size_t k,
                             const std::vector<std::vector<LabeledBox>>& gt, int cls, double thresh) {
  std::vector<std::vector<bool>> claimed(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) claimed[i].assign(gt[i].size(), false);
  std::size_t tp = 0;
  for (std::size_t r = 0; r < k; ++r) {
    const auto& d = ranked[r];
    int best = -1;
    double best_iou = -1;
    for (std::size_t j = 0; j < gt[d.image_id].size(); ++j) {
      const auto& g = gt[d.image_id][j];
      if (g.class_id != cls || claimed[d.image_id][j]) continue;
      const double v = box_iou(d.box, g.box);
      if (v > best_iou) {
        best_iou = v;
        best = static_cast<int>(j);
      }
    }
    if (best >= 0 && best_iou >= thresh) {
      claimed[d.image_id][best] = true;
      ++tp;
    }
  }
  return tp;
}

// Per-class AP from the interpolated precision p(r) = max{P_k : R_k >= r}.
// All-point integrates p over recall exactly; eleven-point averages p at
// r = 0, 0.1, ..., 1. Returns -1 for a class without groundtruth.
inline double class_ap(const std::vector<Detection>& dets, const std::vector<std::vector<LabeledBox>>& gt, int cls,
                       double thresh, bool eleven_point) {
  std::size_t num_gt = 0;
  for (const auto& g : gt)
    for (const auto& o : g) num_gt += o.class_id == cls;
  if (num_gt == 0) return -1.0;
  std::vector<std::pair<std::size_t, Detection>> tagged;
  for (std::size_t i = 0; i < dets.size(); ++i)
    if (dets[i].class_id == cls) tagged.emplace_back(i, dets[i]);
  // Descending score, ties by input position.
  std::sort(tagged.begin(), tagged.end(), [](const auto& a, const auto& b) {
    if (a.second.score != b.second.score) return a.second.score > b.second.score;
    return a.first < b.first;
  });
  std::vector<Detection> ranked;
  for (auto& t : tagged) ranked.push_back(t.second);
  const std::size_t n = ranked.size();
  std::vector<double> prec(n + 1, 0.0), rec(n + 1, 0.0);
  for (std::size_t k = 1; k <= n; ++k) {
    const std::size_t tp = prefix_tp(ranked, k, gt, cls, thresh);
    prec[k] = static_cast<double>(tp) / static_cast<double>(k);
    rec[k] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  auto interp = [&](double r) {
    double p = 0.0;
    for (std::size_t k = 1; k <= n; ++k)
      if (rec[k] >= r - 1e-12) p = std::max(p, prec[k]);
    return p;
  };
  if (eleven_point) {
    double s = 0.0;
    for (int t = 0; t <= 10; ++t) s += interp(t / 10.0);
    return s / 11.0;
  }
  // p(r) is a step function that only changes at attained recall levels.
  std::vector<double> levels(rec.begin() + 1, rec.end());
  levels.push_back(0.0);
  std::sort(levels.begin(), levels.end());
  levels.erase(std::unique(levels.begin(), levels.end()), levels.end());
  double area = 0.0;
  for (std::size_t i = 1; i < levels.size(); ++i) area += (levels[i] - levels[i - 1]) * interp(levels[i]);
  return area;
}

struct MicroInstance {
  std::vector<Detection> dets;
  std::vector<std::vector<LabeledBox>> gt;
  std::size_t num_classes = 2;
};

// Small integer boxes and coarse scores so overlaps, ties and duplicates are common.
inline MicroInstance random_micro_instance(std::mt19937_64& rng) {
  auto pick = [&](int lo, int hi) { return std::uniform_int_distribution<int>(lo, hi)(rng); };
  auto box = [&]() {
    const double x = pick(0, 6), y = pick(0, 6);
    return Box{x, y, x + pick(1, 4), y + pick(1, 4)};
  };
  MicroInstance m;
  m.num_classes = static_cast<std::size_t>(pick(1, 2));
  const std::size_t images = static_cast<std::size_t>(pick(1, 2));
  m.gt.resize(images);
  const int ngt = pick(0, 3);
  for (int i = 0; i < ngt; ++i)
    m.gt[pick(0, static_cast<int>(images) - 1)].push_back({box(), pick(1, static_cast<int>(m.num_classes))});
  const int nd = pick(0, 5);
  std::vector<std::size_t> anchors(nd);
  std::iota(anchors.begin(), anchors.end(), 0);
  std::shuffle(anchors.begin(), anchors.end(), rng);
  for (int i = 0; i < nd; ++i) {
    Detection d;
    const auto img = static_cast<std::size_t>(pick(0, static_cast<int>(images) - 1));
    // Half the detections perturb a groundtruth box so true positives occur.
    if (!m.gt[img].empty() && pick(0, 1)) {
      const auto& g = m.gt[img][pick(0, static_cast<int>(m.gt[img].size()) - 1)];
      d.box = g.box;
      d.box.x_max += pick(0, 1);
      d.class_id = pick(0, 3) ? g.class_id : pick(1, static_cast<int>(m.num_classes));
    } else {
      d.box = box();
      d.class_id = pick(1, static_cast<int>(m.num_classes));
    }
    d.image_id = img;
    d.score = pick(1, 5) / 5.0;
    d.anchor_index = anchors[i];
    m.dets.push_back(d);
  }
  return m;
}

}  // namespace oracle
