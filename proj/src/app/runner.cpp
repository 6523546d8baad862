#include "app/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "error.hpp"

namespace bidet {

namespace fs = std::filesystem;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::io, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorCode::io, "write failed: " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io, "cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string g9(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

void say(const TrainHooks& hooks, const std::string& msg) {
  if (hooks.log) hooks.log(msg);
}

SceneConfig scene_config_for(const DetectorConfig& m) {
  SceneConfig s;
  s.width = m.width;
  s.height = m.height;
  s.num_classes = std::min<std::size_t>(m.num_classes, 3);
  s.grid = m.grid;
  return s;
}

void check_scenes(std::span<const Scene> scenes, const DetectorConfig& cfg, const char* what) {
  for (const auto& s : scenes) {
    require(s.width == cfg.width && s.height == cfg.height, ErrorCode::shape_mismatch,
            std::string(what) + ": image size " + std::to_string(s.width) + "x" + std::to_string(s.height) +
                " does not match the model input " + std::to_string(cfg.width) + "x" + std::to_string(cfg.height));
    for (const auto& o : s.objects)
      require(o.class_id >= 1 && static_cast<std::size_t>(o.class_id) <= cfg.num_classes, ErrorCode::invalid_argument,
              std::string(what) + ": class id " + std::to_string(o.class_id) + " outside 1.." +
                  std::to_string(cfg.num_classes));
  }
}

// Lines of two config echoes that differ, for resume diagnostics.
std::string echo_diff(const std::string& a, const std::string& b) {
  std::istringstream sa(a), sb(b);
  std::string la, lb, out;
  while (true) {
    const bool ga = static_cast<bool>(std::getline(sa, la)), gb = static_cast<bool>(std::getline(sb, lb));
    if (!ga && !gb) break;
    if (la != lb) out += (out.empty() ? "" : "; ") + (ga ? la : "<none>") + " vs " + (gb ? lb : "<none>");
    la.clear();
    lb.clear();
  }
  return out;
}

std::vector<std::vector<LabeledBox>> groundtruth_of(std::span<const Scene> scenes) {
  std::vector<std::vector<LabeledBox>> gt;
  gt.reserve(scenes.size());
  for (const auto& s : scenes) gt.push_back(s.objects);
  return gt;
}

std::vector<Detection> detect_all(const InferenceEngine& engine, std::span<const Scene> scenes, std::size_t batch = 50) {
  std::vector<Detection> all;
  for (std::size_t start = 0; start < scenes.size(); start += batch) {
    const std::size_t n = std::min(batch, scenes.size() - start);
    const auto per_image = engine.detect(scenes_to_tensor(scenes.subspan(start, n)), start);
    for (const auto& v : per_image) all.insert(all.end(), v.begin(), v.end());
  }
  return all;
}

}  // namespace

SplitMetrics evaluate_split(const DetectorModel<float>& model, std::span<const Scene> scenes, std::size_t count,
                            const RunConfig& config, std::size_t epoch, bool bitpacked) {
  const auto subset = scenes.first(std::min(count, scenes.size()));
  SplitMetrics m;
  m.objective = info_plane(model, subset, subset.size(), config.loss, epoch);
  const InferenceEngine engine(model, bitpacked);
  const auto dets = detect_all(engine, subset);
  const auto gt = groundtruth_of(subset);
  m.report = evaluate(dets, gt, model.config.num_classes, config.eval);
  return m;
}

std::string metrics_row(std::size_t epoch, const std::string& split, const SplitMetrics& m) {
  const auto& l = m.objective.loss;
  return std::to_string(epoch) + "," + split + "," + g9(l.info_xf) + "," + g9(l.class_term) + "," + g9(l.loc_term) +
         "," + g9(l.sparse_term) + "," + g9(l.total) + "," + g9(m.report.ap.map) + "," +
         std::to_string(m.report.counts.fp) + "," + std::to_string(m.report.counts.fn) + "," +
         g9(m.objective.point.ixf) + "," + g9(m.objective.point.ify);
}

TrainResult train_model(const RunConfig& config, std::span<const Scene> train, std::span<const Scene> test,
                        const TrainHooks& hooks) {
  config.validate();
  require(!train.empty(), ErrorCode::invalid_argument, "training set is empty");
  require(!test.empty(), ErrorCode::invalid_argument, "test set is empty");
  check_scenes(train, config.model, "training set");
  check_scenes(test, config.model, "test set");

  TrainResult result{{config, DetectorModel<float>::init(config.model, config.seed), {}, std::mt19937_64(config.seed), 0},
                     {},
                     {}};
  TrainingState& st = result.state;
  st.adam = AdamState::init(st.model.parameters());

  if (!config.train.resume.empty()) {
    const Checkpoint ckpt = load_checkpoint(config.train.resume);
    TrainingState loaded = restore_training_state(ckpt);
    const std::string mine = make_checkpoint({config, st.model, {}, st.rng, 0}).config_text;
    require(mine == ckpt.config_text, ErrorCode::invalid_argument,
            "resume: checkpoint " + config.train.resume + " was written by a different configuration (" +
                echo_diff(ckpt.config_text, mine) + ")");
    loaded.config = config;
    st = std::move(loaded);
    const fs::path prev_metrics = fs::path(config.train.resume).parent_path() / "metrics.csv";
    if (fs::exists(prev_metrics)) {
      std::istringstream in(read_text(prev_metrics));
      std::string line;
      std::getline(in, line);  // header
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        std::size_t e = 0;
        try {
          e = std::stoul(line.substr(0, comma));
        } catch (const std::exception&) {
          fail(ErrorCode::format, prev_metrics.string() + ": malformed metrics row");
        }
        if (e <= st.epoch) result.metrics_rows.push_back(line);
      }
    } else {
      log_incident("resume: no metrics.csv next to " + config.train.resume + "; earlier rows are not carried over");
    }
    say(hooks, "resumed from " + config.train.resume + " at epoch " + std::to_string(st.epoch));
  }

  const fs::path out = config.out;
  if (!config.out.empty()) {
    std::error_code ec;
    fs::create_directories(out, ec);
    require(!ec, ErrorCode::io, "cannot create output directory " + out.string() + ": " + ec.message());
    RunConfig echo = config;
    echo.out.clear();
    echo.train.resume.clear();
    write_text(out / "config.txt", config_echo(echo) + "# config_hash " + hash_hex(config_hash(config)) + "\n");
  }

  const AnchorGrid anchors = build_anchors(config.model);
  const std::size_t n = train.size(), batch = std::min(config.train.batch, n);
  for (auto& p : st.model.parameters()) p.set_requires_grad(true);

  for (std::size_t epoch = st.epoch + 1; epoch <= config.train.epochs; ++epoch) {
    AdamConfig adam = config.optim.adam;
    adam.lr = lr_for_epoch(config.optim.adam.lr, config.optim.decay_epochs, config.optim.decay_factor,
                           static_cast<int>(epoch));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), st.rng);

    EpochRecord rec;
    rec.epoch = epoch;
    std::size_t steps = 0, taken = 0;
    for (std::size_t start = 0; start + batch <= n; start += batch, ++steps) {
      std::vector<Scene> scenes;
      scenes.reserve(batch);
      for (std::size_t k = start; k < start + batch; ++k)
        scenes.push_back(config.train.augment ? augment(train[order[k]], st.rng) : train[order[k]]);
      std::vector<BlockLabels> labels;
      for (const auto& s : scenes) labels.push_back(assign_blocks(s.objects, anchors));
      const Tensor<float> images = scenes_to_tensor(std::span<const Scene>(scenes));

      Tape<float> tape;
      try {
        HeadOutputs<float> heads = forward_train(tape, st.model, images, st.rng);
        const std::span<const BlockLabels> lab(labels);
        const Tensor<float> info = info_xf(tape, heads.features);
        const Tensor<float> cls = class_term(tape, heads.class_logits, lab);
        const Tensor<float> loc = loc_term(tape, heads.loc_mean, heads.loc_logvar, lab);
        const Tensor<float> sparse = sparse_prior_loss(tape, heads.class_logits, config.loss);
        const Objective<float> obj = total_objective(tape, info, cls, loc, sparse, config.loss);
        const GradientMap<float> grads = tape.backward(obj.total);
        std::vector<Tensor<float>> params = st.model.parameters();
        std::vector<Tensor<float>> g;
        g.reserve(params.size());
        for (const auto& p : params) g.push_back(grads.get(p));
        adam_step(params, g, st.adam, adam);
        rec.running.info_xf += obj.parts.info_xf;
        rec.running.class_term += obj.parts.class_term;
        rec.running.loc_term += obj.parts.loc_term;
        rec.running.sparse_term += obj.parts.sparse_term;
        rec.running.total += obj.parts.total;
        ++taken;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::numeric) throw;
        ++rec.skipped_steps;
        log_incident("epoch " + std::to_string(epoch) + " step " + std::to_string(steps) + " skipped: " + e.what());
      }
    }
    require(taken > 0, ErrorCode::numeric,
            "epoch " + std::to_string(epoch) + ": all " + std::to_string(steps) +
                " steps produced non-finite losses or activations; aborting (lr " + g9(adam.lr) + ", batch " +
                std::to_string(batch) + ")");
    for (double* v : {&rec.running.info_xf, &rec.running.class_term, &rec.running.loc_term, &rec.running.sparse_term,
                      &rec.running.total})
      *v /= static_cast<double>(taken);

    st.epoch = epoch;
    rec.train = evaluate_split(st.model, train, config.train.eval_train_count, config, epoch);
    rec.test = evaluate_split(st.model, test, test.size(), config, epoch);
    result.metrics_rows.push_back(metrics_row(epoch, "train", rec.train));
    result.metrics_rows.push_back(metrics_row(epoch, "test", rec.test));

    say(hooks, "epoch " + std::to_string(epoch) + " lr " + g9(adam.lr) + " loss " + g9(rec.running.total) +
                   " info " + g9(rec.running.info_xf) + " cls " + g9(rec.running.class_term) + " loc " +
                   g9(rec.running.loc_term) + " sparse " + g9(rec.running.sparse_term) + " | train mAP " +
                   g9(rec.train.report.ap.map) + " test mAP " + g9(rec.test.report.ap.map) + " FP " +
                   std::to_string(rec.test.report.counts.fp) + " FN " + std::to_string(rec.test.report.counts.fn) +
                   (rec.skipped_steps ? " skipped " + std::to_string(rec.skipped_steps) : ""));

    if (!config.out.empty()) {
      char name[48];
      std::snprintf(name, sizeof name, "checkpoint_epoch%03zu.bdet", epoch);
      const Checkpoint ckpt = make_checkpoint(st);
      save_checkpoint((out / name).string(), ckpt);
      save_checkpoint((out / "checkpoint.bdet").string(), ckpt);
      std::string csv = std::string(kMetricsHeader) + "\n";
      for (const auto& r : result.metrics_rows) csv += r + "\n";
      write_text(out / "metrics.csv", csv);
    }
    result.epochs.push_back(std::move(rec));
    if (hooks.stop_after_epoch && epoch >= hooks.stop_after_epoch) break;
  }
  for (auto& p : st.model.parameters()) p.set_requires_grad(false);
  return result;
}

TrainResult run_train(const RunConfig& config, const TrainHooks& hooks) {
  require(!config.data_train.empty() && !config.data_test.empty(), ErrorCode::invalid_argument,
          "config must set data.train and data.test");
  const Dataset train = read_dataset(config.data_train);
  const Dataset test = read_dataset(config.data_test);
  return train_model(config, train.scenes, test.scenes, hooks);
}

EvalOutcome run_eval(const std::string& checkpoint_path, const std::string& data_dir, const EvalOptions& options,
                     bool bitpacked) {
  const Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const DetectorModel<float> model = restore_model(ckpt);
  const Dataset data = read_dataset(data_dir);
  check_scenes(data.scenes, model.config, "evaluation set");
  RunConfig cfg = parse_config(ckpt.config_text);
  cfg.eval = options;
  EvalOutcome out;
  const InferenceEngine engine(model, bitpacked);
  out.report = evaluate(detect_all(engine, data.scenes), groundtruth_of(data.scenes), model.config.num_classes, options);
  out.complexity = complexity_report(model.config);
  const auto& names = data.manifest.class_names.empty() ? default_class_names() : data.manifest.class_names;
  out.text = format_report(out.report, names) + format_complexity(out.complexity);
  out.csv = "metric,value\n";
  for (std::size_t c = 0; c < out.report.ap.per_class.size(); ++c) {
    const std::string name = c < names.size() ? names[c] : "class" + std::to_string(c + 1);
    out.csv += "ap_" + name + "," + g9(out.report.ap.per_class[c]) + "\n";
  }
  out.csv += "map," + g9(out.report.ap.map) + "\ntp," + std::to_string(out.report.counts.tp) + "\nfp," +
             std::to_string(out.report.counts.fp) + "\nfn," + std::to_string(out.report.counts.fn) + "\nimages," +
             std::to_string(out.report.images) + "\ngroundtruth," + std::to_string(out.report.groundtruth) +
             "\nstorage_bytes," + g9(out.complexity.total_bytes) + "\nflops_per_image," +
             g9(out.complexity.total_flops) + "\n";
  return out;
}

std::string format_complexity(const ComplexityReport& report) {
  std::string out = "complexity (layer, kind, params, bytes, flops/image)\n";
  char buf[200];
  for (const auto& l : report.layers) {
    std::snprintf(buf, sizeof buf, "  %-22s %-6s %10llu %12.1f %14.1f\n", l.name.c_str(),
                  l.auxiliary ? "aux" : (l.binarized ? "binary" : "real"), static_cast<unsigned long long>(l.parameters),
                  l.bytes, l.flops);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "storage_bytes %.1f flops_per_image %.1f\n", report.total_bytes, report.total_flops);
  return out + buf;
}

std::vector<Detection> run_infer(const std::string& checkpoint_path, const std::string& image_path, bool bitpacked,
                                 const EvalOptions& options) {
  const DetectorModel<float> model = restore_model(load_checkpoint(checkpoint_path));
  const Scene scene = read_ppm(image_path);
  check_scenes(std::span<const Scene>(&scene, 1), model.config, "input image");
  const InferenceEngine engine(model, bitpacked);
  const auto per_image = engine.detect(scenes_to_tensor(std::span<const Scene>(&scene, 1)));
  std::vector<Detection> kept;
  for (const auto& d : nms(per_image.at(0), options.nms_iou))
    if (d.score > options.score_thresh) kept.push_back(d);
  return kept;
}

namespace {

bool same_detections(const std::vector<std::vector<Detection>>& a, const std::vector<std::vector<Detection>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    for (std::size_t k = 0; k < a[i].size(); ++k) {
      const Detection &x = a[i][k], &y = b[i][k];
      if (!(x.box == y.box) || x.class_id != y.class_id || x.score != y.score || x.anchor_index != y.anchor_index)
        return false;
    }
  }
  return true;
}

double images_per_sec(const InferenceEngine& engine, const Tensor<float>& images, std::size_t iters) {
  for (int w = 0; w < 2; ++w) (void)engine.run(images);
  const auto t0 = std::chrono::steady_clock::now();
  for (std::size_t i = 0; i < iters; ++i) (void)engine.run(images);
  const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return static_cast<double>(iters * images.dim(0)) / std::max(sec, 1e-9);
}

}  // namespace

std::string BenchReport::text() const {
  char buf[640];
  std::snprintf(buf, sizeof buf,
                "mode %s iters %zu batch %zu\n"
                "float images/sec %.2f\nbitpacked images/sec %.2f\nspeedup %.3f\n"
                "float flops/image %.1f\nbitpacked flops/image %.1f\nflop ratio %.4f\n"
                "detections equal %s\n%s",
                mode == BenchMode::bitpacked ? "bitpacked" : "float", iters, batch, float_images_per_sec,
                bitpacked_images_per_sec, speedup, float_flops, bitpacked_flops, flop_ratio,
                detections_equal ? "yes" : "no",
                regression ? "performance regression: bitpacked path is not faster than float\n" : "");
  return buf;
}

BenchReport bench_model(const DetectorModel<float>& model, BenchMode mode, std::size_t iters, std::size_t batch,
                        std::uint64_t seed) {
  require(iters >= 10, ErrorCode::invalid_argument, "bench: iters must be >= 10");
  require(batch >= 1, ErrorCode::invalid_argument, "bench: batch must be >= 1");
  const std::vector<Scene> scenes = generate_scenes(seed, batch, scene_config_for(model.config));
  const Tensor<float> images = scenes_to_tensor(std::span<const Scene>(scenes));
  const InferenceEngine fl(model, false), bp(model, true);

  BenchReport r;
  r.mode = mode;
  r.iters = iters;
  r.batch = batch;
  r.detections_equal = same_detections(fl.detect(images), bp.detect(images));
  require(r.detections_equal, ErrorCode::mode_mismatch,
          "bench refused: float and bitpacked inference produce different detections");
  r.float_images_per_sec = images_per_sec(fl, images, iters);
  r.bitpacked_images_per_sec = images_per_sec(bp, images, iters);
  r.speedup = r.bitpacked_images_per_sec / r.float_images_per_sec;
  r.float_flops = complexity_report(model.config, true).total_flops;
  r.bitpacked_flops = complexity_report(model.config).total_flops;
  r.flop_ratio = r.float_flops / r.bitpacked_flops;
  r.regression = r.bitpacked_images_per_sec <= r.float_images_per_sec;
  return r;
}

BenchReport run_bench(const std::string& checkpoint_path, BenchMode mode, std::size_t iters, std::size_t batch,
                      std::uint64_t seed) {
  return bench_model(restore_model(load_checkpoint(checkpoint_path)), mode, iters, batch, seed);
}

std::string SweepRow::csv() const {
  return config_hash + "," + g9(beta) + "," + g9(gamma) + "," + std::to_string(seed) + "," + g9(map) + "," + g9(ify) +
         "," + std::to_string(fp) + "," + std::to_string(fn) + "," + status;
}

std::vector<SweepRow> sweep_models(const RunConfig& base, std::span<const double> betas, std::span<const double> gammas,
                                   std::span<const std::uint64_t> seeds, std::span<const Scene> train,
                                   std::span<const Scene> test, const TrainHooks& hooks) {
  require(!betas.empty() && !gammas.empty() && !seeds.empty(), ErrorCode::invalid_argument,
          "sweep: beta, gamma and seed grids must be non-empty");
  std::vector<SweepRow> rows;
  const fs::path root = base.out;
  auto flush = [&] {
    if (base.out.empty()) return;
    std::string csv = std::string(kSweepHeader) + "\n";
    for (const auto& r : rows) csv += r.csv() + "\n";
    write_text(root / "sweep.csv", csv);
  };
  if (!base.out.empty()) fs::create_directories(root);
  for (double beta : betas)
    for (double gamma : gammas)
      for (std::uint64_t seed : seeds) {
        RunConfig cfg = base;
        cfg.loss.beta = beta;
        cfg.loss.gamma = gamma;
        cfg.seed = seed;
        cfg.train.resume.clear();
        if (!base.out.empty())
          cfg.out = (root / ("run_b" + g9(beta) + "_g" + g9(gamma) + "_s" + std::to_string(seed))).string();
        SweepRow row;
        row.config_hash = hash_hex(config_hash(cfg));
        row.beta = beta;
        row.gamma = gamma;
        row.seed = seed;
        try {
          say(hooks, "sweep: beta " + g9(beta) + " gamma " + g9(gamma) + " seed " + std::to_string(seed));
          const TrainResult tr = train_model(cfg, train, test, hooks);
          const SplitMetrics& m = tr.epochs.back().test;
          row.map = m.report.ap.map;
          row.ify = m.objective.point.ify;
          row.fp = m.report.counts.fp;
          row.fn = m.report.counts.fn;
        } catch (const std::exception& e) {
          std::string msg = e.what();
          std::replace(msg.begin(), msg.end(), ',', ';');
          std::replace(msg.begin(), msg.end(), '\n', ' ');
          row.status = "error: " + msg;
          row.map = row.ify = std::nan("");
          log_incident("sweep run failed (beta " + g9(beta) + ", gamma " + g9(gamma) + ", seed " + std::to_string(seed) +
                       "): " + e.what());
        }
        rows.push_back(row);
        flush();
      }
  return rows;
}

std::vector<SweepRow> run_sweep(const RunConfig& base, std::span<const double> betas, std::span<const double> gammas,
                                std::span<const std::uint64_t> seeds, const TrainHooks& hooks) {
  require(!base.data_train.empty() && !base.data_test.empty(), ErrorCode::invalid_argument,
          "config must set data.train and data.test");
  const Dataset train = read_dataset(base.data_train);
  const Dataset test = read_dataset(base.data_test);
  return sweep_models(base, betas, gammas, seeds, train.scenes, test.scenes, hooks);
}

DatasetManifest run_gen_data(const std::string& out_dir, std::size_t count, std::uint64_t seed, const std::string& split,
                             const SceneConfig& scene) {
  require(split == "train" || split == "test", ErrorCode::invalid_argument, "split must be 'train' or 'test'");
  const std::vector<Scene> scenes = generate_scenes(seed, count, scene);
  return write_dataset(out_dir, scenes, split, seed);
}

}  // namespace bidet
