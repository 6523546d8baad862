#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "detector/anchors.hpp"
#include "detector/geometry.hpp"
#include "data/synth_data.hpp"
#include "detector/model.hpp"
#include "loss/ib_loss.hpp"

namespace bidet {

// Greedy per-(image, class) suppression by descending score, ties broken by
// lower anchor index. Drops a box when IoU with a kept box exceeds the threshold.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_thresh);

struct MatchCounts {
  std::size_t tp = 0, fp = 0, fn = 0;
};

// groundtruth[i] holds the objects of image i; detections refer to images by
// image_id. Only detections with score > score_thresh participate.
MatchCounts match_and_count(std::span<const Detection> dets, std::span<const std::vector<LabeledBox>> groundtruth,
                            double iou_thresh = 0.5, double score_thresh = 0.5);

enum class ApMode { all_point, eleven_point };

struct ApResult {
  // Indexed by class id - 1; classes without groundtruth hold -1.
  std::vector<double> per_class;
  std::vector<int> excluded_classes;
  double map = 0.0;
};

ApResult average_precision(std::span<const Detection> dets, std::span<const std::vector<LabeledBox>> groundtruth,
                           std::size_t num_classes, double iou_thresh = 0.5, ApMode mode = ApMode::all_point);

// Area under the interpolated precision envelope for one class given TP flags
// in descending-score order and the groundtruth count.
double ap_from_flags(std::span<const std::uint8_t> tp_flags, std::size_t num_gt, ApMode mode);

struct EvalOptions {
  double iou_thresh = 0.5;
  double score_thresh = 0.5;
  double nms_iou = 0.45;
  ApMode ap_mode = ApMode::all_point;
};

struct EvalReport {
  ApResult ap;
  MatchCounts counts;
  std::size_t groundtruth = 0;
  std::size_t images = 0;
  // histogram[k] = images with k detections above the score threshold (last bin: >= size-1)
  std::vector<std::size_t> detection_histogram;
};

// detections: pre-NMS detections for every image (image_id = index into groundtruth).
EvalReport evaluate(std::span<const Detection> detections, std::span<const std::vector<LabeledBox>> groundtruth,
                    std::size_t num_classes, const EvalOptions& options = {});

std::string format_report(const EvalReport& report, std::span<const std::string> class_names);

struct LayerComplexity {
  std::string name;
  bool binarized = false;
  bool auxiliary = false;  // BN affine/bias parameters, always real
  std::uint64_t parameters = 0;
  std::uint64_t macs = 0;
  double bytes = 0;
  double flops = 0;
};

struct ComplexityReport {
  std::vector<LayerComplexity> layers;
  double total_bytes = 0;
  double total_flops = 0;
};

// Storage: binarized weights at 1 bit, real values at 32 bits. FLOPs: real
// MACs count 2, binary MACs count 2/64. `force_real` accounts every layer as
// real-valued, i.e. the same network run in float.
ComplexityReport complexity_report(const DetectorConfig& config, bool force_real = false);

struct InfoPlanePoint {
  double ixf = 0;
  double ify = 0;
  std::size_t epoch = 0;
};

struct SplitObjective {
  LossBreakdown loss;
  InfoPlanePoint point;
  std::size_t images = 0;
};

// Objective terms on the first `sample_count` scenes with BN in inference mode
// and thresholded features. The I(X;F) proxy is the mean info_xf; the I(F;Y)
// proxy is class_term + loc_term minus the label prior log-densities.
SplitObjective info_plane(const DetectorModel<float>& model, std::span<const Scene> scenes, std::size_t sample_count,
                          const LossWeights& weights = {}, std::size_t epoch = 0, std::size_t batch = 50);

}  // namespace bidet
