#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "app/checkpoint.hpp"
#include "app/config.hpp"
#include "data/synth_data.hpp"
#include "eval/metrics.hpp"

namespace bidet {

inline constexpr const char* kMetricsHeader =
    "epoch,split,info_xf,class_term,loc_term,sparse_term,total,map,fp,fn,ixf_proxy,ify_proxy";
inline constexpr const char* kSweepHeader = "config_hash,beta,gamma,seed,map,ify_proxy,fp,fn,status";

struct SplitMetrics {
  SplitObjective objective;
  EvalReport report;
};

struct EpochRecord {
  std::size_t epoch = 0;
  SplitMetrics train, test;
  LossBreakdown running;  // mean over the epoch's optimizer steps
  std::size_t skipped_steps = 0;
};

struct TrainHooks {
  // Stop (after checkpointing) once this epoch completes; 0 = run to the end.
  std::size_t stop_after_epoch = 0;
  std::function<void(const std::string&)> log;
};

struct TrainResult {
  TrainingState state;
  std::vector<EpochRecord> epochs;  // epochs run in this session
  std::vector<std::string> metrics_rows;
};

// Trains on in-memory scenes. When config.out is non-empty, writes
// config.txt, metrics.csv and a checkpoint per epoch there. Resumes from
// config.train.resume when set.
TrainResult train_model(const RunConfig& config, std::span<const Scene> train, std::span<const Scene> test,
                        const TrainHooks& hooks = {});
TrainResult run_train(const RunConfig& config, const TrainHooks& hooks = {});

SplitMetrics evaluate_split(const DetectorModel<float>& model, std::span<const Scene> scenes, std::size_t count,
                            const RunConfig& config, std::size_t epoch, bool bitpacked = false);

std::string metrics_row(std::size_t epoch, const std::string& split, const SplitMetrics& m);

struct EvalOutcome {
  EvalReport report;
  ComplexityReport complexity;
  std::string text;
  std::string csv;  // metric,value rows
};

std::string format_complexity(const ComplexityReport& report);

EvalOutcome run_eval(const std::string& checkpoint_path, const std::string& data_dir, const EvalOptions& options,
                     bool bitpacked = false);

// Post-NMS detections above the score threshold for a single image.
std::vector<Detection> run_infer(const std::string& checkpoint_path, const std::string& image_path, bool bitpacked,
                                 const EvalOptions& options = {});

enum class BenchMode { float_path, bitpacked };

struct BenchReport {
  BenchMode mode = BenchMode::bitpacked;
  std::size_t iters = 0;
  std::size_t batch = 0;
  double float_images_per_sec = 0;
  double bitpacked_images_per_sec = 0;
  double float_flops = 0;      // per image, every layer counted as real
  double bitpacked_flops = 0;  // per image, binarized layers at 1/64
  double flop_ratio = 0;
  double speedup = 0;
  bool detections_equal = false;
  bool regression = false;

  std::string text() const;
};

BenchReport bench_model(const DetectorModel<float>& model, BenchMode mode, std::size_t iters, std::size_t batch = 16,
                        std::uint64_t seed = 1);
BenchReport run_bench(const std::string& checkpoint_path, BenchMode mode, std::size_t iters, std::size_t batch = 16,
                      std::uint64_t seed = 1);

struct SweepRow {
  std::string config_hash;
  double beta = 0, gamma = 0;
  std::uint64_t seed = 0;
  double map = 0, ify = 0;
  std::size_t fp = 0, fn = 0;
  std::string status = "ok";

  std::string csv() const;
};

// One full training per (beta, gamma, seed), evaluated on the test scenes.
// Writes <base.out>/sweep.csv and per-run directories when base.out is set.
std::vector<SweepRow> sweep_models(const RunConfig& base, std::span<const double> betas, std::span<const double> gammas,
                                   std::span<const std::uint64_t> seeds, std::span<const Scene> train,
                                   std::span<const Scene> test, const TrainHooks& hooks = {});
std::vector<SweepRow> run_sweep(const RunConfig& base, std::span<const double> betas, std::span<const double> gammas,
                                std::span<const std::uint64_t> seeds, const TrainHooks& hooks = {});

DatasetManifest run_gen_data(const std::string& out_dir, std::size_t count, std::uint64_t seed,
                             const std::string& split = "train", const SceneConfig& scene = {});

}  // namespace bidet
