// bidet-cli: command-line front end over the C API.
//
// Failures print exactly one line to stderr,
//   error: <status>: <message>
// and exit nonzero (2 for usage errors, 1 otherwise).

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bidet/bidet.h"

namespace {

struct Failure {
  std::string status;
  std::string message;
};

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

void check(bidet_status s) {
  if (s != BIDET_OK) throw Failure{bidet_status_name(s), bidet_last_error()};
}

template <typename F>
std::string fetch_text(F&& get) {
  std::size_t needed = 0;
  const bidet_status probe = get(nullptr, 0, &needed);
  if (probe != BIDET_ERR_BUFFER_TOO_SMALL) check(probe);
  std::string buf(needed, '\0');
  check(get(buf.data(), buf.size(), &needed));
  buf.resize(needed - 1);
  return buf;
}

struct ConfigHandle {
  bidet_config* p = nullptr;
  ~ConfigHandle() { bidet_config_destroy(p); }
};

void apply_overrides(bidet_config* cfg, const std::vector<std::string>& sets) {
  for (const auto& kv : sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw Failure{"invalid_argument", "--set expects key=value, got '" + kv + "'"};
    check(bidet_config_set(cfg, kv.substr(0, eq).c_str(), kv.substr(eq + 1).c_str()));
  }
}

void print_line(const char* line, void*) {
  std::printf("%s\n", line);
  std::fflush(stdout);
}

template <typename T>
std::vector<T> parse_list(const std::string& text, const char* what) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::istringstream is(item);
    T v{};
    if (!(is >> v) || !(is >> std::ws).eof()) throw Failure{"invalid_argument", std::string(what) + ": bad entry '" + item + "'"};
    out.push_back(v);
  }
  if (out.empty()) throw Failure{"invalid_argument", std::string(what) + ": empty list"};
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bidet-cli: train, evaluate and benchmark binarized one-stage detectors"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::uint64_t> seed;
  app.add_option("--seed", seed, "Random seed (overrides the config)");

  // train
  auto* train = app.add_subcommand("train", "Train a detector from a config file");
  std::string train_config, train_out, train_resume;
  std::vector<std::string> train_sets;
  std::size_t stop_after = 0;
  train->add_option("--config", train_config, "Config file (key = value)")->required();
  train->add_option("--out", train_out, "Output directory");
  train->add_option("--resume", train_resume, "Checkpoint to resume from");
  train->add_option("--set", train_sets, "Override a config key (key=value), repeatable");
  train->add_option("--stop-after", stop_after, "Stop after this epoch (0 = full schedule)");

  // eval
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
  std::string eval_ckpt, eval_data, eval_csv, ap_mode = "allpoint";
  bidet_eval_options eopts;
  bidet_eval_options_default(&eopts);
  bool eval_bitpacked = false;
  eval->add_option("--ckpt", eval_ckpt, "Checkpoint file")->required();
  eval->add_option("--data", eval_data, "Dataset directory")->required();
  eval->add_option("--iou", eopts.iou_thresh, "IoU threshold for a match")->capture_default_str();
  eval->add_option("--score", eopts.score_thresh, "Score threshold for TP/FP/FN counts")->capture_default_str();
  eval->add_option("--nms-iou", eopts.nms_iou, "NMS suppression IoU")->capture_default_str();
  eval->add_option("--ap-mode", ap_mode, "allpoint or 11point")->check(CLI::IsMember({"allpoint", "11point"}));
  eval->add_flag("--bitpacked", eval_bitpacked, "Use the xnor-popcount inference path");
  eval->add_option("--csv", eval_csv, "Also write metric,value CSV here");

  // infer
  auto* infer = app.add_subcommand("infer", "Detect objects in one PPM image");
  std::string infer_ckpt, infer_image;
  bool infer_bitpacked = false;
  double infer_score = 0.5, infer_nms = 0.45;
  infer->add_option("--ckpt", infer_ckpt, "Checkpoint file")->required();
  infer->add_option("--image", infer_image, "Binary PPM (P6) image")->required();
  infer->add_flag("--bitpacked", infer_bitpacked, "Use the xnor-popcount inference path");
  infer->add_option("--score", infer_score, "Keep detections scoring above this")->capture_default_str();
  infer->add_option("--nms-iou", infer_nms, "NMS suppression IoU")->capture_default_str();

  // bench
  auto* bench = app.add_subcommand("bench", "Time float vs bitpacked inference");
  std::string bench_ckpt, bench_mode = "bitpacked";
  std::size_t bench_iters = 20, bench_batch = 16;
  bench->add_option("--ckpt", bench_ckpt, "Checkpoint file")->required();
  bench->add_option("--mode", bench_mode, "float or bitpacked")->check(CLI::IsMember({"float", "bitpacked"}));
  bench->add_option("--iters", bench_iters, "Timed iterations (>= 10)")->capture_default_str();
  bench->add_option("--batch", bench_batch, "Images per iteration")->capture_default_str();

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Train one model per (beta, gamma, seed)");
  std::string sweep_config, sweep_out, betas = "10", gammas, seeds_text;
  std::vector<std::string> sweep_sets;
  sweep->add_option("--config", sweep_config, "Base config file")->required();
  sweep->add_option("--beta", betas, "Comma-separated beta values")->capture_default_str();
  sweep->add_option("--gamma", gammas, "Comma-separated gamma values")->required();
  sweep->add_option("--seeds", seeds_text, "Comma-separated seeds")->required();
  sweep->add_option("--out", sweep_out, "Output directory");
  sweep->add_option("--set", sweep_sets, "Override a config key (key=value), repeatable");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Write a synthetic dataset split");
  std::string gen_out, gen_split = "train";
  std::size_t gen_count = 0;
  bidet_scene_options sopts;
  bidet_scene_options_default(&sopts);
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of scenes")->required();
  gen->add_option("--split", gen_split, "train or test")->check(CLI::IsMember({"train", "test"}));
  gen->add_option("--min-size", sopts.min_size, "Smallest object side in pixels")->capture_default_str();
  gen->add_option("--max-size", sopts.max_size, "Largest object side in pixels")->capture_default_str();
  gen->add_option("--max-objects", sopts.max_objects, "Objects per scene upper bound")->capture_default_str();
  gen->add_option("--noise", sopts.noise_sigma, "Gaussian pixel noise sigma")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  try {
    if (*train) {
      ConfigHandle cfg;
      check(bidet_config_load(train_config.c_str(), &cfg.p));
      apply_overrides(cfg.p, train_sets);
      if (seed) check(bidet_config_set(cfg.p, "seed", std::to_string(*seed).c_str()));
      if (!train_out.empty()) check(bidet_config_set(cfg.p, "out", train_out.c_str()));
      if (!train_resume.empty()) check(bidet_config_set(cfg.p, "train.resume", train_resume.c_str()));
      bidet_train_summary s{};
      check(bidet_train(cfg.p, stop_after, &s, print_line, nullptr));
      std::printf("done epoch %zu test_map %.6f fp %zu fn %zu\n", s.final_epoch, s.test_map, s.test_fp, s.test_fn);
    } else if (*eval) {
      eopts.ap_mode = ap_mode == "11point" ? BIDET_AP_ELEVEN_POINT : BIDET_AP_ALL_POINT;
      eopts.bitpacked = eval_bitpacked ? 1 : 0;
      bidet_eval_result* raw = nullptr;
      check(bidet_eval(eval_ckpt.c_str(), eval_data.c_str(), &eopts, &raw));
      std::unique_ptr<bidet_eval_result, void (*)(bidet_eval_result*)> r(raw, bidet_eval_result_destroy);
      std::fputs(fetch_text([&](char* b, std::size_t c, std::size_t* n) { return bidet_eval_text(r.get(), b, c, n); }).c_str(),
                 stdout);
      if (!eval_csv.empty()) {
        std::ofstream out(eval_csv, std::ios::binary | std::ios::trunc);
        if (!out) throw Failure{"io", "cannot write " + eval_csv};
        out << fetch_text([&](char* b, std::size_t c, std::size_t* n) { return bidet_eval_csv(r.get(), b, c, n); });
        if (!out) throw Failure{"io", "write failed: " + eval_csv};
      }
    } else if (*infer) {
      bidet_model* raw = nullptr;
      check(bidet_model_load(infer_ckpt.c_str(), &raw));
      std::unique_ptr<bidet_model, void (*)(bidet_model*)> m(raw, bidet_model_destroy);
      std::size_t count = 0;
      check(bidet_detect_ppm(m.get(), infer_image.c_str(), infer_bitpacked, infer_score, infer_nms, nullptr, 0, &count));
      std::vector<bidet_detection> dets(count);
      check(bidet_detect_ppm(m.get(), infer_image.c_str(), infer_bitpacked, infer_score, infer_nms, dets.data(),
                             dets.size(), &count));
      std::printf("class,score,x_min,y_min,x_max,y_max\n");
      for (const auto& d : dets)
        std::printf("%d,%.6f,%.3f,%.3f,%.3f,%.3f\n", d.class_id, d.score, d.x_min, d.y_min, d.x_max, d.y_max);
    } else if (*bench) {
      bidet_bench_result r{};
      const std::string text = fetch_text([&](char* b, std::size_t c, std::size_t* n) {
        return bidet_bench(bench_ckpt.c_str(), bench_mode == "float" ? BIDET_BENCH_FLOAT : BIDET_BENCH_BITPACKED,
                           bench_iters, bench_batch, seed.value_or(1), &r, b, c, n);
      });
      std::fputs(text.c_str(), stdout);
    } else if (*sweep) {
      ConfigHandle cfg;
      check(bidet_config_load(sweep_config.c_str(), &cfg.p));
      apply_overrides(cfg.p, sweep_sets);
      if (!sweep_out.empty()) check(bidet_config_set(cfg.p, "out", sweep_out.c_str()));
      const auto b = parse_list<double>(betas, "--beta");
      const auto g = parse_list<double>(gammas, "--gamma");
      const auto s = parse_list<std::uint64_t>(seeds_text, "--seeds");
      std::size_t failed = 0;
      check(bidet_sweep(cfg.p, b.data(), b.size(), g.data(), g.size(), s.data(), s.size(), &failed, print_line, nullptr));
      std::printf("sweep runs %zu failed %zu\n", b.size() * g.size() * s.size(), failed);
    } else if (*gen) {
      check(bidet_gen_data(gen_out.c_str(), gen_count, seed.value_or(1), gen_split.c_str(), &sopts));
      std::printf("wrote %zu scenes to %s\n", gen_count, gen_out.c_str());
    }
  } catch (const Failure& f) {
    std::fprintf(stderr, "error: %s: %s\n", f.status.c_str(), one_line(f.message).c_str());
    return 1;
  }
  return 0;
}
