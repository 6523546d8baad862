#include "eval/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <numeric>

#include "error.hpp"

namespace bidet {

namespace {

// Indices of dets sorted by descending score; equal scores keep input order.
std::vector<std::size_t> score_order(std::span<const Detection> dets) {
  std::vector<std::size_t> idx(dets.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  return idx;
}

void check_image_ids(std::span<const Detection> dets, std::size_t images) {
  for (const auto& d : dets)
    require(d.image_id < images, ErrorCode::invalid_argument,
            "detection refers to image " + std::to_string(d.image_id) + " but only " + std::to_string(images) +
                " groundtruth images were given");
}

// Greedy matching of dets (already filtered) in the given order. Returns TP flags
// in that order.
std::vector<std::uint8_t> greedy_match(std::span<const Detection> dets, const std::vector<std::size_t>& order,
                                       std::span<const std::vector<LabeledBox>> gt, double iou_thresh) {
  std::vector<std::vector<std::uint8_t>> used(gt.size());
  for (std::size_t i = 0; i < gt.size(); ++i) used[i].assign(gt[i].size(), 0);
  std::vector<std::uint8_t> flags;
  flags.reserve(order.size());
  for (std::size_t k : order) {
    const Detection& d = dets[k];
    const auto& objs = gt[d.image_id];
    double best = -1.0;
    std::size_t best_j = objs.size();
    for (std::size_t j = 0; j < objs.size(); ++j) {
      if (used[d.image_id][j] || objs[j].class_id != d.class_id) continue;
      const double v = iou(d.box, objs[j].box);
      if (v > best) {
        best = v;
        best_j = j;
      }
    }
    const bool tp = best_j < objs.size() && best >= iou_thresh;
    if (tp) used[d.image_id][best_j] = 1;
    flags.push_back(tp ? 1 : 0);
  }
  return flags;
}

}  // namespace

std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh) {
  require(iou_thresh > 0 && iou_thresh < 1, ErrorCode::invalid_argument, "nms: iou threshold must lie in (0,1)");
  std::vector<std::size_t> idx(dets.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (dets[a].score != dets[b].score) return dets[a].score > dets[b].score;
    return dets[a].anchor_index < dets[b].anchor_index;
  });
  std::vector<Detection> kept;
  for (std::size_t k : idx) {
    const Detection& d = dets[k];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& q) {
      return q.image_id == d.image_id && q.class_id == d.class_id && iou(q.box, d.box) > iou_thresh;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

MatchCounts match_and_count(std::span<const Detection> dets, std::span<const std::vector<LabeledBox>> groundtruth,
                            double iou_thresh, double score_thresh) {
  check_image_ids(dets, groundtruth.size());
  std::vector<Detection> live;
  for (const auto& d : dets)
    if (d.score > score_thresh) live.push_back(d);
  const auto flags = greedy_match(live, score_order(live), groundtruth, iou_thresh);
  MatchCounts c;
  c.tp = static_cast<std::size_t>(std::count(flags.begin(), flags.end(), 1));
  c.fp = flags.size() - c.tp;
  std::size_t total = 0;
  for (const auto& g : groundtruth) total += g.size();
  c.fn = total - c.tp;
  return c;
}

double ap_from_flags(std::span<const std::uint8_t> tp_flags, std::size_t num_gt, ApMode mode) {
  require(num_gt > 0, ErrorCode::invalid_argument, "ap_from_flags: class without groundtruth");
  const std::size_t n = tp_flags.size();
  std::vector<double> precision(n), recall(n);
  std::size_t tp = 0;
  for (std::size_t k = 0; k < n; ++k) {
    tp += tp_flags[k];
    precision[k] = static_cast<double>(tp) / static_cast<double>(k + 1);
    recall[k] = static_cast<double>(tp) / static_cast<double>(num_gt);
  }
  // precision envelope
  for (std::size_t k = n; k-- > 1;) precision[k - 1] = std::max(precision[k - 1], precision[k]);
  if (mode == ApMode::all_point) {
    double ap = 0.0, prev = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      ap += (recall[k] - prev) * precision[k];
      prev = recall[k];
    }
    return ap;
  }
  double ap = 0.0;
  for (int t = 0; t <= 10; ++t) {
    const double thr = t / 10.0;
    double p = 0.0;
    for (std::size_t k = 0; k < n; ++k)
      if (recall[k] >= thr - 1e-12) {
        p = precision[k];
        break;
      }
    ap += p;
  }
  return ap / 11.0;
}

ApResult average_precision(std::span<const Detection> dets, std::span<const std::vector<LabeledBox>> groundtruth,
                           std::size_t num_classes, double iou_thresh, ApMode mode) {
  check_image_ids(dets, groundtruth.size());
  ApResult r;
  r.per_class.assign(num_classes, -1.0);
  double sum = 0.0;
  std::size_t counted = 0;
  for (std::size_t c = 1; c <= num_classes; ++c) {
    const int cls = static_cast<int>(c);
    std::size_t num_gt = 0;
    std::vector<std::vector<LabeledBox>> gt_c(groundtruth.size());
    for (std::size_t i = 0; i < groundtruth.size(); ++i)
      for (const auto& o : groundtruth[i])
        if (o.class_id == cls) {
          gt_c[i].push_back(o);
          ++num_gt;
        }
    if (num_gt == 0) {
      r.excluded_classes.push_back(cls);
      continue;
    }
    std::vector<Detection> dc;
    for (const auto& d : dets)
      if (d.class_id == cls) dc.push_back(d);
    const auto flags = greedy_match(dc, score_order(dc), gt_c, iou_thresh);
    r.per_class[c - 1] = ap_from_flags(flags, num_gt, mode);
    sum += r.per_class[c - 1];
    ++counted;
  }
  r.map = counted ? sum / static_cast<double>(counted) : 0.0;
  return r;
}

EvalReport evaluate(std::span<const Detection> detections, std::span<const std::vector<LabeledBox>> groundtruth,
                    std::size_t num_classes, const EvalOptions& options) {
  const std::vector<Detection> kept = nms(detections, options.nms_iou);
  EvalReport rep;
  rep.images = groundtruth.size();
  for (const auto& g : groundtruth) rep.groundtruth += g.size();
  rep.ap = average_precision(kept, groundtruth, num_classes, options.iou_thresh, options.ap_mode);
  rep.counts = match_and_count(kept, groundtruth, options.iou_thresh, options.score_thresh);
  std::vector<std::size_t> per_image(groundtruth.size(), 0);
  for (const auto& d : kept)
    if (d.score > options.score_thresh) ++per_image[d.image_id];
  rep.detection_histogram.assign(9, 0);
  for (std::size_t k : per_image) ++rep.detection_histogram[std::min<std::size_t>(k, 8)];
  return rep;
}

std::string format_report(const EvalReport& report, std::span<const std::string> class_names) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "images %zu groundtruth %zu\n", report.images, report.groundtruth);
  out += buf;
  for (std::size_t c = 0; c < report.ap.per_class.size(); ++c) {
    const std::string name = c < class_names.size() ? class_names[c] : "class" + std::to_string(c + 1);
    if (report.ap.per_class[c] < 0)
      std::snprintf(buf, sizeof buf, "AP %-10s excluded (no groundtruth)\n", name.c_str());
    else
      std::snprintf(buf, sizeof buf, "AP %-10s %.6f\n", name.c_str(), report.ap.per_class[c]);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "mAP %.6f\nTP %zu FP %zu FN %zu\n", report.ap.map, report.counts.tp, report.counts.fp,
                report.counts.fn);
  out += buf;
  out += "detections per image:";
  for (std::size_t k = 0; k < report.detection_histogram.size(); ++k)
    out += " " + std::to_string(k) + (k + 1 == report.detection_histogram.size() ? "+" : "") + ":" +
           std::to_string(report.detection_histogram[k]);
  out += "\n";
  return out;
}

namespace {

LayerComplexity conv_entry(const std::string& name, std::size_t out_c, std::size_t in_c, std::size_t k, std::size_t oh,
                           std::size_t ow, bool binarized) {
  LayerComplexity l;
  l.name = name;
  l.binarized = binarized;
  l.parameters = static_cast<std::uint64_t>(out_c) * in_c * k * k;
  l.macs = l.parameters * oh * ow;
  const double p = static_cast<double>(l.parameters), m = static_cast<double>(l.macs);
  l.bytes = binarized ? p / 8.0 : p * 4.0;
  l.flops = binarized ? m / 64.0 * 2.0 : m * 2.0;
  return l;
}

LayerComplexity aux_entry(const std::string& name, std::uint64_t params) {
  LayerComplexity l;
  l.name = name;
  l.auxiliary = true;
  l.parameters = params;
  l.bytes = static_cast<double>(params) * 4.0;
  return l;
}

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
  return (in + 2 * pad - k) / stride + 1;
}

}  // namespace

ComplexityReport complexity_report(const DetectorConfig& config, bool force_real) {
  config.validate();
  const auto flags = config.binarize_flags();
  ComplexityReport rep;
  std::size_t in = 3, h = config.height, w = config.width;
  for (std::size_t i = 0; i < config.widths.size(); ++i) {
    const std::size_t out = config.widths[i], s = config.strides[i];
    const std::size_t oh = conv_out(h, 3, s, 1), ow = conv_out(w, 3, s, 1);
    const std::string name = "backbone." + std::to_string(i);
    rep.layers.push_back(conv_entry(name, out, in, 3, oh, ow, flags[i] && !force_real));
    rep.layers.push_back(aux_entry(name + ".bn", 2 * out));
    if (config.shortcut && i >= 1 && (in != out || s != 1))
      rep.layers.push_back(conv_entry(name + ".projection", out, in, 1, oh, ow, false));
    in = out;
    h = oh;
    w = ow;
  }
  const std::string fname = "backbone." + std::to_string(config.widths.size());
  rep.layers.push_back(conv_entry(fname, config.feature_channels, in, 3, h, w, false));
  rep.layers.push_back(aux_entry(fname + ".bias", config.feature_channels));
  const std::size_t a = config.anchors_per_block;
  const std::pair<const char*, std::size_t> heads[] = {
      {"head.cls", a * config.class_slots()}, {"head.loc", a * 4}, {"head.logvar", a * 4}};
  for (const auto& [name, out] : heads) {
    rep.layers.push_back(conv_entry(name, out, config.feature_channels, 3, h, w, false));
    rep.layers.push_back(aux_entry(std::string(name) + ".bias", out));
  }
  for (const auto& l : rep.layers) {
    rep.total_bytes += l.bytes;
    rep.total_flops += l.flops;
  }
  return rep;
}

SplitObjective info_plane(const DetectorModel<float>& model, std::span<const Scene> scenes, std::size_t sample_count,
                          const LossWeights& weights, std::size_t epoch, std::size_t batch) {
  require(batch > 0, ErrorCode::invalid_argument, "info_plane: batch must be positive");
  const std::size_t count = std::min(sample_count, scenes.size());
  require(count > 0, ErrorCode::invalid_argument, "info_plane: no scenes to evaluate");
  DetectorModel<float> snapshot = model.clone();
  const AnchorGrid anchors = build_anchors(model.config);
  Tape<float> tape(false);
  const ForwardOptions<float> opts{ops::BatchNormMode::infer, FeatureMode::threshold, nullptr, {}};

  double info = 0, cls = 0, loc = 0, sparse = 0;
  std::vector<BlockLabels> all_labels;
  for (std::size_t start = 0; start < count; start += batch) {
    const std::size_t n = std::min(batch, count - start);
    const auto chunk = scenes.subspan(start, n);
    std::vector<BlockLabels> labels;
    for (const auto& s : chunk) labels.push_back(assign_blocks(s.objects, anchors));
    const Tensor<float> images = scenes_to_tensor(chunk);
    const HeadOutputs<float> heads = forward(tape, snapshot, images, opts);
    info += static_cast<double>(info_xf(tape, heads.features).item()) * static_cast<double>(n);
    cls += static_cast<double>(class_term(tape, heads.class_logits, std::span<const BlockLabels>(labels)).item()) *
           static_cast<double>(n);
    loc += static_cast<double>(
               loc_term(tape, heads.loc_mean, heads.loc_logvar, std::span<const BlockLabels>(labels)).item()) *
           static_cast<double>(n);
    sparse += static_cast<double>(sparse_prior_loss(tape, heads.class_logits, weights).item()) * static_cast<double>(n);
    all_labels.insert(all_labels.end(), labels.begin(), labels.end());
  }
  SplitObjective out;
  out.images = count;
  const double nd = static_cast<double>(count);
  out.loss.info_xf = info / nd;
  out.loss.class_term = cls / nd;
  out.loss.loc_term = loc / nd;
  out.loss.sparse_term = sparse / nd;
  out.loss.total = weights.info_weight * out.loss.info_xf - weights.beta * (out.loss.class_term + out.loss.loc_term) +
                   weights.gamma * out.loss.sparse_term;
  out.point.epoch = epoch;
  out.point.ixf = out.loss.info_xf;
  out.point.ify = out.loss.class_term - class_prior_log_density(all_labels, model.config.num_classes) +
                  out.loss.loc_term - loc_prior_log_density(all_labels);
  return out;
}

}  // namespace bidet
