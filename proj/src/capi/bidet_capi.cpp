#include "bidet/bidet.h"

#include <cstring>
#include <exception>
#include <memory>
#include <new>
#include <string>
#include <vector>

#include "app/checkpoint.hpp"
#include "app/config.hpp"
#include "app/runner.hpp"
#include "error.hpp"

struct bidet_config {
  bidet::RunConfig config;
};

struct bidet_model {
  bidet::DetectorModel<float> model;
  std::uint64_t epoch = 0;
  std::unique_ptr<bidet::InferenceEngine> float_engine, packed_engine;
};

struct bidet_eval_result {
  bidet::EvalOutcome outcome;
};

namespace {

thread_local std::string g_last_error;

bidet_status to_status(bidet::ErrorCode code) {
  switch (code) {
    case bidet::ErrorCode::invalid_argument: return BIDET_ERR_INVALID_ARGUMENT;
    case bidet::ErrorCode::shape_mismatch: return BIDET_ERR_SHAPE_MISMATCH;
    case bidet::ErrorCode::io: return BIDET_ERR_IO;
    case bidet::ErrorCode::format: return BIDET_ERR_FORMAT;
    case bidet::ErrorCode::version_mismatch: return BIDET_ERR_VERSION_MISMATCH;
    case bidet::ErrorCode::numeric: return BIDET_ERR_NUMERIC;
    case bidet::ErrorCode::mode_mismatch: return BIDET_ERR_MODE_MISMATCH;
    case bidet::ErrorCode::internal: return BIDET_ERR_INTERNAL;
  }
  return BIDET_ERR_INTERNAL;
}

bidet_status set_error(bidet_status s, std::string msg) {
  g_last_error = std::move(msg);
  return s;
}

// Runs fn, mapping exceptions to status codes and the thread's last error.
template <typename F>
bidet_status guarded(F&& fn) {
  try {
    return fn();
  } catch (const bidet::Error& e) {
    return set_error(to_status(e.code()), e.what());
  } catch (const std::bad_alloc&) {
    return set_error(BIDET_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return set_error(BIDET_ERR_INTERNAL, e.what());
  } catch (...) {
    return set_error(BIDET_ERR_INTERNAL, "unknown failure");
  }
}

bidet_status null_arg(const char* what) { return set_error(BIDET_ERR_NULL_HANDLE, std::string(what) + " is NULL"); }

bidet_status copy_text(const std::string& text, char* buf, std::size_t cap, std::size_t* needed) {
  if (needed) *needed = text.size() + 1;
  if (!buf || cap < text.size() + 1) {
    if (buf && cap > 0) buf[0] = '\0';
    return set_error(BIDET_ERR_BUFFER_TOO_SMALL,
                     "buffer of " + std::to_string(cap) + " bytes; " + std::to_string(text.size() + 1) + " needed");
  }
  std::memcpy(buf, text.c_str(), text.size() + 1);
  return BIDET_OK;
}

bidet::TrainHooks hooks_for(std::size_t stop_after, bidet_log_fn log, void* user) {
  bidet::TrainHooks h;
  h.stop_after_epoch = stop_after;
  if (log) h.log = [log, user](const std::string& line) { log(line.c_str(), user); };
  return h;
}

bidet_status detect_scene(const bidet_model* m, const bidet::Scene& scene, int bitpacked, double score_thresh,
                          double nms_iou, bidet_detection* out, std::size_t cap, std::size_t* count) {
  const auto& cfg = m->model.config;
  bidet::require(scene.width == cfg.width && scene.height == cfg.height, bidet::ErrorCode::shape_mismatch,
                 "image is " + std::to_string(scene.width) + "x" + std::to_string(scene.height) + ", model expects " +
                     std::to_string(cfg.width) + "x" + std::to_string(cfg.height));
  bidet::require(nms_iou > 0 && nms_iou < 1, bidet::ErrorCode::invalid_argument, "nms_iou must lie in (0,1)");
  const bidet::InferenceEngine& engine = bitpacked ? *m->packed_engine : *m->float_engine;
  const auto per_image = engine.detect(bidet::scenes_to_tensor(std::span<const bidet::Scene>(&scene, 1)));
  std::vector<bidet::Detection> kept;
  for (const auto& d : bidet::nms(per_image.at(0), nms_iou))
    if (d.score > score_thresh) kept.push_back(d);
  *count = kept.size();
  for (std::size_t i = 0; i < kept.size() && i < cap && out; ++i) {
    const auto& d = kept[i];
    out[i] = {d.box.x_min, d.box.y_min, d.box.x_max, d.box.y_max, d.score, d.class_id, d.anchor_index};
  }
  return BIDET_OK;
}

}  // namespace

extern "C" {

const char* bidet_status_name(bidet_status status) {
  switch (status) {
    case BIDET_OK: return "ok";
    case BIDET_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case BIDET_ERR_SHAPE_MISMATCH: return "shape_mismatch";
    case BIDET_ERR_IO: return "io";
    case BIDET_ERR_FORMAT: return "format";
    case BIDET_ERR_VERSION_MISMATCH: return "version_mismatch";
    case BIDET_ERR_NUMERIC: return "numeric";
    case BIDET_ERR_MODE_MISMATCH: return "mode_mismatch";
    case BIDET_ERR_INTERNAL: return "internal";
    case BIDET_ERR_BUFFER_TOO_SMALL: return "buffer_too_small";
    case BIDET_ERR_NULL_HANDLE: return "null_handle";
  }
  return "unknown";
}

const char* bidet_last_error(void) { return g_last_error.c_str(); }

const char* bidet_version(void) { return "0.1.0"; }

uint32_t bidet_checkpoint_version(void) { return bidet::kCheckpointVersion; }

bidet_status bidet_config_create(bidet_config** out) {
  if (!out) return null_arg("out");
  return guarded([&] {
    *out = new bidet_config{};
    return BIDET_OK;
  });
}

bidet_status bidet_config_load(const char* path, bidet_config** out) {
  if (!path) return null_arg("path");
  if (!out) return null_arg("out");
  return guarded([&] {
    auto c = std::make_unique<bidet_config>();
    c->config = bidet::load_config(path);
    *out = c.release();
    return BIDET_OK;
  });
}

void bidet_config_destroy(bidet_config* config) { delete config; }

bidet_status bidet_config_set(bidet_config* config, const char* key, const char* value) {
  if (!config) return null_arg("config");
  if (!key || !value) return null_arg("key/value");
  return guarded([&] {
    bidet::RunConfig next = config->config;
    bidet::apply_config_value(next, key, value);
    config->config = std::move(next);
    return BIDET_OK;
  });
}

bidet_status bidet_config_get(const bidet_config* config, const char* key, char* buf, size_t cap, size_t* needed) {
  if (!config) return null_arg("config");
  if (!key) return null_arg("key");
  return guarded([&] { return copy_text(bidet::config_value(config->config, key), buf, cap, needed); });
}

bidet_status bidet_config_echo(const bidet_config* config, char* buf, size_t cap, size_t* needed) {
  if (!config) return null_arg("config");
  return guarded([&] { return copy_text(bidet::config_echo(config->config), buf, cap, needed); });
}

bidet_status bidet_config_hash(const bidet_config* config, uint64_t* out) {
  if (!config) return null_arg("config");
  if (!out) return null_arg("out");
  return guarded([&] {
    *out = bidet::config_hash(config->config);
    return BIDET_OK;
  });
}

bidet_status bidet_train(const bidet_config* config, size_t stop_after_epoch, bidet_train_summary* summary,
                         bidet_log_fn log, void* user) {
  if (!config) return null_arg("config");
  return guarded([&] {
    const bidet::TrainResult r = bidet::run_train(config->config, hooks_for(stop_after_epoch, log, user));
    if (summary) {
      *summary = {};
      summary->epochs_run = r.epochs.size();
      summary->final_epoch = r.state.epoch;
      if (!r.epochs.empty()) {
        const auto& t = r.epochs.back().test;
        summary->test_map = t.report.ap.map;
        summary->test_fp = t.report.counts.fp;
        summary->test_fn = t.report.counts.fn;
        summary->test_ixf = t.objective.point.ixf;
        summary->test_ify = t.objective.point.ify;
      }
    }
    return BIDET_OK;
  });
}

bidet_status bidet_model_load(const char* checkpoint_path, bidet_model** out) {
  if (!checkpoint_path) return null_arg("checkpoint_path");
  if (!out) return null_arg("out");
  return guarded([&] {
    const bidet::Checkpoint ckpt = bidet::load_checkpoint(checkpoint_path);
    auto m = std::make_unique<bidet_model>();
    m->model = bidet::restore_model(ckpt);
    m->epoch = ckpt.epoch;
    m->float_engine = std::make_unique<bidet::InferenceEngine>(m->model, false);
    m->packed_engine = std::make_unique<bidet::InferenceEngine>(m->model, true);
    *out = m.release();
    return BIDET_OK;
  });
}

void bidet_model_destroy(bidet_model* model) { delete model; }

bidet_status bidet_model_info_get(const bidet_model* model, bidet_model_info* out) {
  if (!model) return null_arg("model");
  if (!out) return null_arg("out");
  const auto& c = model->model.config;
  *out = {c.height, c.width, c.num_classes, c.grid, c.anchors_per_block, model->model.parameter_count(),
          c.binarize ? 1 : 0, model->epoch};
  return BIDET_OK;
}

bidet_status bidet_detect(const bidet_model* model, const float* chw, size_t height, size_t width, int bitpacked,
                          double score_thresh, double nms_iou, bidet_detection* out, size_t cap, size_t* count) {
  if (!model) return null_arg("model");
  if (!chw) return null_arg("chw");
  if (!count) return null_arg("count");
  return guarded([&] {
    bidet::Scene scene;
    scene.width = width;
    scene.height = height;
    scene.image.assign(chw, chw + 3 * height * width);
    return detect_scene(model, scene, bitpacked, score_thresh, nms_iou, out, cap, count);
  });
}

bidet_status bidet_detect_ppm(const bidet_model* model, const char* ppm_path, int bitpacked, double score_thresh,
                              double nms_iou, bidet_detection* out, size_t cap, size_t* count) {
  if (!model) return null_arg("model");
  if (!ppm_path) return null_arg("ppm_path");
  if (!count) return null_arg("count");
  return guarded([&] {
    return detect_scene(model, bidet::read_ppm(ppm_path), bitpacked, score_thresh, nms_iou, out, cap, count);
  });
}

void bidet_eval_options_default(bidet_eval_options* out) {
  if (!out) return;
  const bidet::EvalOptions d;
  *out = {d.iou_thresh, d.score_thresh, d.nms_iou, BIDET_AP_ALL_POINT, 0};
}

bidet_status bidet_eval(const char* checkpoint_path, const char* data_dir, const bidet_eval_options* options,
                        bidet_eval_result** out) {
  if (!checkpoint_path) return null_arg("checkpoint_path");
  if (!data_dir) return null_arg("data_dir");
  if (!out) return null_arg("out");
  return guarded([&] {
    bidet_eval_options o;
    bidet_eval_options_default(&o);
    if (options) o = *options;
    bidet::require(o.ap_mode == BIDET_AP_ALL_POINT || o.ap_mode == BIDET_AP_ELEVEN_POINT,
                   bidet::ErrorCode::invalid_argument, "unknown ap_mode");
    bidet::require(o.iou_thresh > 0 && o.iou_thresh <= 1 && o.nms_iou > 0 && o.nms_iou < 1,
                   bidet::ErrorCode::invalid_argument, "eval thresholds out of range");
    bidet::EvalOptions eo;
    eo.iou_thresh = o.iou_thresh;
    eo.score_thresh = o.score_thresh;
    eo.nms_iou = o.nms_iou;
    eo.ap_mode = o.ap_mode == BIDET_AP_ELEVEN_POINT ? bidet::ApMode::eleven_point : bidet::ApMode::all_point;
    auto r = std::make_unique<bidet_eval_result>();
    r->outcome = bidet::run_eval(checkpoint_path, data_dir, eo, o.bitpacked != 0);
    *out = r.release();
    return BIDET_OK;
  });
}

void bidet_eval_result_destroy(bidet_eval_result* result) { delete result; }

double bidet_eval_map(const bidet_eval_result* r) { return r ? r->outcome.report.ap.map : 0.0; }
size_t bidet_eval_tp(const bidet_eval_result* r) { return r ? r->outcome.report.counts.tp : 0; }
size_t bidet_eval_fp(const bidet_eval_result* r) { return r ? r->outcome.report.counts.fp : 0; }
size_t bidet_eval_fn(const bidet_eval_result* r) { return r ? r->outcome.report.counts.fn : 0; }

bidet_status bidet_eval_text(const bidet_eval_result* result, char* buf, size_t cap, size_t* needed) {
  if (!result) return null_arg("result");
  return copy_text(result->outcome.text, buf, cap, needed);
}

bidet_status bidet_eval_csv(const bidet_eval_result* result, char* buf, size_t cap, size_t* needed) {
  if (!result) return null_arg("result");
  return copy_text(result->outcome.csv, buf, cap, needed);
}

bidet_status bidet_bench(const char* checkpoint_path, bidet_bench_mode mode, size_t iters, size_t batch, uint64_t seed,
                         bidet_bench_result* out, char* text, size_t cap, size_t* needed) {
  if (!checkpoint_path) return null_arg("checkpoint_path");
  if (!out) return null_arg("out");
  return guarded([&] {
    bidet::require(mode == BIDET_BENCH_FLOAT || mode == BIDET_BENCH_BITPACKED, bidet::ErrorCode::invalid_argument,
                   "unknown bench mode");
    const bidet::BenchReport r =
        bidet::run_bench(checkpoint_path, mode == BIDET_BENCH_FLOAT ? bidet::BenchMode::float_path : bidet::BenchMode::bitpacked,
                         iters, batch, seed);
    *out = {r.float_images_per_sec, r.bitpacked_images_per_sec, r.speedup, r.float_flops, r.bitpacked_flops,
            r.flop_ratio, r.detections_equal ? 1 : 0, r.regression ? 1 : 0};
    if (text || needed) return copy_text(r.text(), text, cap, needed);
    return BIDET_OK;
  });
}

bidet_status bidet_sweep(const bidet_config* base, const double* betas, size_t n_betas, const double* gammas,
                         size_t n_gammas, const uint64_t* seeds, size_t n_seeds, size_t* failed, bidet_log_fn log,
                         void* user) {
  if (!base) return null_arg("base");
  if ((!betas && n_betas) || (!gammas && n_gammas) || (!seeds && n_seeds)) return null_arg("grid");
  return guarded([&] {
    const auto rows = bidet::run_sweep(base->config, std::span<const double>(betas, n_betas),
                                       std::span<const double>(gammas, n_gammas),
                                       std::span<const std::uint64_t>(seeds, n_seeds), hooks_for(0, log, user));
    if (failed) {
      *failed = 0;
      for (const auto& r : rows) *failed += r.status != "ok";
    }
    return BIDET_OK;
  });
}

void bidet_scene_options_default(bidet_scene_options* out) {
  if (!out) return;
  const bidet::SceneConfig d;
  *out = {d.width, d.height, d.num_classes, d.min_objects, d.max_objects, d.min_size, d.max_size, d.noise_sigma};
}

bidet_status bidet_gen_data(const char* out_dir, size_t count, uint64_t seed, const char* split,
                            const bidet_scene_options* options) {
  if (!out_dir) return null_arg("out_dir");
  return guarded([&] {
    bidet::SceneConfig sc;
    if (options) {
      sc.width = options->width;
      sc.height = options->height;
      sc.num_classes = options->num_classes;
      sc.min_objects = options->min_objects;
      sc.max_objects = options->max_objects;
      sc.min_size = options->min_size;
      sc.max_size = options->max_size;
      sc.noise_sigma = options->noise_sigma;
    }
    bidet::run_gen_data(out_dir, count, seed, split ? split : "train", sc);
    return BIDET_OK;
  });
}

}  // extern "C"
