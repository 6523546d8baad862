#include <bidet/bidet.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <string>
#include <vector>

#include <unistd.h>

#include "doctest.h"

namespace fs = std::filesystem;

namespace {

std::string fetch(const std::function<bidet_status(char*, size_t, size_t*)>& f) {
  size_t need = 0;
  REQUIRE(f(nullptr, 0, &need) == BIDET_ERR_BUFFER_TOO_SMALL);
  std::string s(need, '\0');
  REQUIRE(f(s.data(), s.size(), &need) == BIDET_OK);
  s.resize(need - 1);
  return s;
}

struct Workdir {
  fs::path root;
  Workdir() {
    root = fs::temp_directory_path() / ("bidet_capi_" + std::to_string(::getpid()));
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Workdir() {
    std::error_code ec;
    fs::remove_all(root, ec);
  }
};

// Tiny model and data so one epoch takes about a second.
bidet_config* tiny_config(const fs::path& root) {
  bidet_config* c = nullptr;
  REQUIRE(bidet_config_create(&c) == BIDET_OK);
  const std::pair<const char*, std::string> kv[] = {
      {"model.widths", "4,8,8,8,8"},
      {"model.feature_channels", "8"},
      {"train.epochs", "2"},
      {"train.batch", "4"},
      {"train.eval_train_count", "8"},
      {"optim.decay_epochs", "1"},
      {"data.train", (root / "train").string()},
      {"data.test", (root / "test").string()},
      {"out", (root / "run").string()},
  };
  for (const auto& [k, v] : kv) REQUIRE(bidet_config_set(c, k, v.c_str()) == BIDET_OK);
  return c;
}

void make_data(const fs::path& root) {
  REQUIRE(bidet_gen_data((root / "train").string().c_str(), 16, 1, "train", nullptr) == BIDET_OK);
  REQUIRE(bidet_gen_data((root / "test").string().c_str(), 8, 2, "test", nullptr) == BIDET_OK);
}

}  // namespace

TEST_CASE("status names and last error") {
  CHECK(std::string(bidet_status_name(BIDET_OK)) == "ok");
  CHECK(std::string(bidet_status_name(BIDET_ERR_VERSION_MISMATCH)) == "version_mismatch");
  CHECK(std::string(bidet_status_name(BIDET_ERR_NULL_HANDLE)) == "null_handle");
  CHECK(std::string(bidet_status_name(static_cast<bidet_status>(999))) == "unknown");
  CHECK(std::strlen(bidet_version()) > 0);
  CHECK(bidet_checkpoint_version() >= 1);

  bidet_config* c = nullptr;
  REQUIRE(bidet_config_create(&c) == BIDET_OK);
  CHECK(bidet_config_set(c, "loss.nope", "1") == BIDET_ERR_INVALID_ARGUMENT);
  CHECK(std::string(bidet_last_error()).find("loss.nope") != std::string::npos);
  CHECK(bidet_config_set(c, "loss.beta", "ten") == BIDET_ERR_INVALID_ARGUMENT);
  bidet_config_destroy(c);
}

TEST_CASE("null handles and arguments are rejected") {
  CHECK(bidet_config_create(nullptr) == BIDET_ERR_NULL_HANDLE);
  CHECK(bidet_config_set(nullptr, "seed", "1") == BIDET_ERR_NULL_HANDLE);
  size_t need = 0;
  CHECK(bidet_config_echo(nullptr, nullptr, 0, &need) == BIDET_ERR_NULL_HANDLE);
  bidet_model_info info{};
  CHECK(bidet_model_info_get(nullptr, &info) == BIDET_ERR_NULL_HANDLE);
  size_t count = 0;
  CHECK(bidet_detect(nullptr, nullptr, 48, 48, 0, 0.5, 0.45, nullptr, 0, &count) == BIDET_ERR_NULL_HANDLE);
  CHECK(bidet_eval_map(nullptr) == 0.0);
  bidet_config_destroy(nullptr);
  bidet_model_destroy(nullptr);
  bidet_eval_result_destroy(nullptr);
}

TEST_CASE("config set, get, echo and hash") {
  bidet_config* c = nullptr;
  REQUIRE(bidet_config_create(&c) == BIDET_OK);
  const auto get = [&](const char* key) {
    return fetch([&](char* b, size_t cap, size_t* n) { return bidet_config_get(c, key, b, cap, n); });
  };
  CHECK(get("loss.beta") == "10");
  CHECK(get("loss.gamma") == "0.2");
  uint64_t h0 = 0, h1 = 0, h2 = 0;
  REQUIRE(bidet_config_hash(c, &h0) == BIDET_OK);

  REQUIRE(bidet_config_set(c, "loss.gamma", "2") == BIDET_OK);
  CHECK(get("loss.gamma") == "2");
  REQUIRE(bidet_config_hash(c, &h1) == BIDET_OK);
  CHECK(h1 != h0);

  // Output location does not enter the hash.
  REQUIRE(bidet_config_set(c, "out", "/somewhere/else") == BIDET_OK);
  REQUIRE(bidet_config_hash(c, &h2) == BIDET_OK);
  CHECK(h2 == h1);

  const std::string echo = fetch([&](char* b, size_t cap, size_t* n) { return bidet_config_echo(c, b, cap, n); });
  CHECK(echo.find("loss.gamma = 2\n") != std::string::npos);
  CHECK(echo.find("out = /somewhere/else\n") != std::string::npos);

  // Echo round-trips through the file loader.
  Workdir w;
  const fs::path p = w.root / "cfg.txt";
  std::ofstream(p) << "# comment\n" << echo;
  bidet_config* back = nullptr;
  REQUIRE(bidet_config_load(p.string().c_str(), &back) == BIDET_OK);
  uint64_t hb = 0;
  REQUIRE(bidet_config_hash(back, &hb) == BIDET_OK);
  CHECK(hb == h1);
  bidet_config_destroy(back);

  char small[2];
  size_t need = 0;
  CHECK(bidet_config_get(c, "loss.gamma", small, 1, &need) == BIDET_ERR_BUFFER_TOO_SMALL);
  CHECK(need == 2);
  CHECK(bidet_config_load((w.root / "missing.txt").string().c_str(), &back) == BIDET_ERR_IO);
  bidet_config_destroy(c);
}

TEST_CASE("gen_data writes a manifest and images") {
  Workdir w;
  bidet_scene_options o;
  bidet_scene_options_default(&o);
  CHECK(o.width == 48);
  REQUIRE(bidet_gen_data((w.root / "d").string().c_str(), 5, 3, "test", &o) == BIDET_OK);
  CHECK(fs::exists(w.root / "d" / "manifest.txt"));
  std::size_t images = 0;
  for (const auto& e : fs::directory_iterator(w.root / "d" / "images")) images += e.path().extension() == ".ppm";
  CHECK(images == 5);
  CHECK(bidet_gen_data((w.root / "e").string().c_str(), 5, 3, "validation", &o) == BIDET_ERR_INVALID_ARGUMENT);
  o.min_size = 30;
  o.max_size = 10;
  CHECK(bidet_gen_data((w.root / "f").string().c_str(), 5, 3, "test", &o) == BIDET_ERR_INVALID_ARGUMENT);
}

TEST_CASE("train, load, detect, eval and bench through the C API") {
  Workdir w;
  make_data(w.root);
  bidet_config* c = tiny_config(w.root);

  std::vector<std::string> lines;
  bidet_train_summary s{};
  REQUIRE(bidet_train(
              c, 0, &s, [](const char* line, void* u) { static_cast<std::vector<std::string>*>(u)->push_back(line); },
              &lines) == BIDET_OK);
  CHECK(s.epochs_run == 2);
  CHECK(s.final_epoch == 2);
  CHECK(s.test_map >= 0.0);
  CHECK(s.test_map <= 1.0);
  CHECK_FALSE(lines.empty());
  const fs::path run = w.root / "run";
  CHECK(fs::exists(run / "config.txt"));
  CHECK(fs::exists(run / "metrics.csv"));
  const fs::path ckpt = run / "checkpoint.bdet";
  REQUIRE(fs::exists(ckpt));

  bidet_model* m = nullptr;
  REQUIRE(bidet_model_load(ckpt.string().c_str(), &m) == BIDET_OK);
  bidet_model_info info{};
  REQUIRE(bidet_model_info_get(m, &info) == BIDET_OK);
  CHECK(info.height == 48);
  CHECK(info.num_classes == 3);
  CHECK(info.binarized == 1);
  CHECK(info.epoch == 2);

  // A zero score threshold keeps every post-NMS box.
  const std::vector<float> img(3 * 48 * 48, 0.5f);
  size_t count = 0;
  REQUIRE(bidet_detect(m, img.data(), 48, 48, 0, 0.0, 0.45, nullptr, 0, &count) == BIDET_OK);
  std::vector<bidet_detection> a(count), b(count);
  size_t ca = 0, cb = 0;
  REQUIRE(bidet_detect(m, img.data(), 48, 48, 0, 0.0, 0.45, a.data(), a.size(), &ca) == BIDET_OK);
  REQUIRE(bidet_detect(m, img.data(), 48, 48, 1, 0.0, 0.45, b.data(), b.size(), &cb) == BIDET_OK);
  CHECK(ca == count);
  CHECK(cb == count);
  for (size_t i = 0; i < count; ++i) {
    CHECK(a[i].class_id >= 1);
    CHECK(a[i].class_id <= 3);
    CHECK(a[i].anchor_index == b[i].anchor_index);
    CHECK(a[i].score == doctest::Approx(b[i].score).epsilon(1e-5));
    CHECK(a[i].x_min >= 0.0);
    CHECK(a[i].x_max <= 48.0);
  }
  CHECK(bidet_detect(m, img.data(), 32, 32, 0, 0.5, 0.45, nullptr, 0, &count) == BIDET_ERR_SHAPE_MISMATCH);
  size_t from_ppm = 0;
  const fs::path first = *fs::directory_iterator(w.root / "test" / "images");
  CHECK(bidet_detect_ppm(m, first.string().c_str(), 0, 0.5, 0.45, nullptr, 0, &from_ppm) == BIDET_OK);
  CHECK(bidet_detect_ppm(m, (w.root / "none.ppm").string().c_str(), 0, 0.5, 0.45, nullptr, 0, &from_ppm) ==
        BIDET_ERR_IO);
  bidet_model_destroy(m);

  bidet_eval_options eo;
  bidet_eval_options_default(&eo);
  CHECK(eo.iou_thresh == 0.5);
  CHECK(eo.nms_iou == 0.45);
  bidet_eval_result* r = nullptr;
  REQUIRE(bidet_eval(ckpt.string().c_str(), (w.root / "test").string().c_str(), &eo, &r) == BIDET_OK);
  CHECK(bidet_eval_map(r) == doctest::Approx(s.test_map).epsilon(1e-9));
  CHECK(bidet_eval_fp(r) == s.test_fp);
  CHECK(bidet_eval_fn(r) == s.test_fn);
  const std::string text = fetch([&](char* b2, size_t cap, size_t* n) { return bidet_eval_text(r, b2, cap, n); });
  CHECK(text.find("mAP") != std::string::npos);
  const std::string csv = fetch([&](char* b2, size_t cap, size_t* n) { return bidet_eval_csv(r, b2, cap, n); });
  CHECK(csv.rfind("metric,value\n", 0) == 0);
  CHECK(csv.find("map,") != std::string::npos);
  bidet_eval_result_destroy(r);

  bidet_bench_result br{};
  CHECK(bidet_bench(ckpt.string().c_str(), BIDET_BENCH_BITPACKED, 3, 2, 1, &br, nullptr, 0, nullptr) ==
        BIDET_ERR_INVALID_ARGUMENT);
  REQUIRE(bidet_bench(ckpt.string().c_str(), BIDET_BENCH_BITPACKED, 10, 2, 1, &br, nullptr, 0, nullptr) == BIDET_OK);
  CHECK(br.detections_equal == 1);
  CHECK(br.float_images_per_sec > 0.0);
  CHECK(br.bitpacked_images_per_sec > 0.0);
  CHECK(br.flop_ratio > 1.0);

  // Resume from the epoch-1 state reproduces the uninterrupted run.
  REQUIRE(bidet_config_set(c, "out", (w.root / "half").string().c_str()) == BIDET_OK);
  bidet_train_summary h{};
  REQUIRE(bidet_train(c, 1, &h, nullptr, nullptr) == BIDET_OK);
  CHECK(h.final_epoch == 1);
  REQUIRE(bidet_config_set(c, "out", (w.root / "resumed").string().c_str()) == BIDET_OK);
  REQUIRE(bidet_config_set(c, "train.resume", (w.root / "half" / "checkpoint.bdet").string().c_str()) == BIDET_OK);
  bidet_train_summary rs{};
  REQUIRE(bidet_train(c, 0, &rs, nullptr, nullptr) == BIDET_OK);
  CHECK(rs.epochs_run == 1);
  CHECK(rs.final_epoch == 2);
  CHECK(rs.test_map == s.test_map);
  CHECK(rs.test_fp == s.test_fp);
  bidet_config_destroy(c);
}

TEST_CASE("checkpoint version and format errors") {
  Workdir w;
  make_data(w.root);
  bidet_config* c = tiny_config(w.root);
  REQUIRE(bidet_config_set(c, "train.epochs", "1") == BIDET_OK);
  REQUIRE(bidet_train(c, 0, nullptr, nullptr, nullptr) == BIDET_OK);
  bidet_config_destroy(c);

  const fs::path ckpt = w.root / "run" / "checkpoint.bdet";
  std::vector<char> bytes;
  {
    std::ifstream in(ckpt, std::ios::binary);
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  REQUIRE(bytes.size() > 16);
  auto write = [&](const fs::path& p, const std::vector<char>& b) {
    std::ofstream(p, std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
  };

  // Version is the little-endian u32 after the 4-byte magic.
  auto bumped = bytes;
  bumped[4] = static_cast<char>(bumped[4] + 1);
  write(w.root / "v.bdet", bumped);
  bidet_model* m = nullptr;
  CHECK(bidet_model_load((w.root / "v.bdet").string().c_str(), &m) == BIDET_ERR_VERSION_MISMATCH);
  CHECK(m == nullptr);
  CHECK(std::string(bidet_last_error()).find("version") != std::string::npos);

  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  write(w.root / "m.bdet", bad_magic);
  CHECK(bidet_model_load((w.root / "m.bdet").string().c_str(), &m) == BIDET_ERR_FORMAT);

  write(w.root / "t.bdet", std::vector<char>(bytes.begin(), bytes.begin() + static_cast<long>(bytes.size() / 2)));
  CHECK(bidet_model_load((w.root / "t.bdet").string().c_str(), &m) == BIDET_ERR_FORMAT);

  CHECK(bidet_model_load((w.root / "absent.bdet").string().c_str(), &m) == BIDET_ERR_IO);
}
