#include "app/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "error.hpp"

namespace bidet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  fail(ErrorCode::invalid_argument, "config key '" + key + "': expected " + expected + ", got '" + value + "'");
}

template <typename T>
T parse_int(const std::string& key, const std::string& v) {
  T out{};
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) bad_value(key, v, "an integer");
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size() || !std::isfinite(out)) bad_value(key, v, "a finite number");
  return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  bad_value(key, v, "true or false");
}

template <typename T>
std::vector<T> parse_int_list(const std::string& key, const std::string& v) {
  std::vector<T> out;
  std::stringstream ss(v);
  for (std::string item; std::getline(ss, item, ',');) {
    item = trim(item);
    if (!item.empty()) out.push_back(parse_int<T>(key, item));
  }
  return out;
}

std::string num(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

std::string num(float v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

std::string ap_mode_name(ApMode m) { return m == ApMode::all_point ? "allpoint" : "11point"; }

using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;
using Getter = std::function<std::string(const RunConfig&)>;

struct Key {
  Setter set;
  Getter get;
};

const std::vector<std::pair<std::string, Key>>& keys() {
  static const std::vector<std::pair<std::string, Key>> table = {
      {"model.height", {[](RunConfig& c, auto& k, auto& v) { c.model.height = parse_int<std::size_t>(k, v); },
                        [](const RunConfig& c) { return std::to_string(c.model.height); }}},
      {"model.width", {[](RunConfig& c, auto& k, auto& v) { c.model.width = parse_int<std::size_t>(k, v); },
                       [](const RunConfig& c) { return std::to_string(c.model.width); }}},
      {"model.classes", {[](RunConfig& c, auto& k, auto& v) { c.model.num_classes = parse_int<std::size_t>(k, v); },
                         [](const RunConfig& c) { return std::to_string(c.model.num_classes); }}},
      {"model.grid", {[](RunConfig& c, auto& k, auto& v) { c.model.grid = parse_int<std::size_t>(k, v); },
                      [](const RunConfig& c) { return std::to_string(c.model.grid); }}},
      {"model.anchors", {[](RunConfig& c, auto& k, auto& v) { c.model.anchors_per_block = parse_int<std::size_t>(k, v); },
                         [](const RunConfig& c) { return std::to_string(c.model.anchors_per_block); }}},
      {"model.widths", {[](RunConfig& c, auto& k, auto& v) { c.model.widths = parse_int_list<std::size_t>(k, v); },
                        [](const RunConfig& c) { return join(c.model.widths); }}},
      {"model.strides", {[](RunConfig& c, auto& k, auto& v) { c.model.strides = parse_int_list<std::size_t>(k, v); },
                         [](const RunConfig& c) { return join(c.model.strides); }}},
      {"model.feature_channels",
       {[](RunConfig& c, auto& k, auto& v) { c.model.feature_channels = parse_int<std::size_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.model.feature_channels); }}},
      {"model.shortcut", {[](RunConfig& c, auto& k, auto& v) { c.model.shortcut = parse_bool(k, v); },
                          [](const RunConfig& c) { return std::string(c.model.shortcut ? "true" : "false"); }}},
      {"model.binarize", {[](RunConfig& c, auto& k, auto& v) { c.model.binarize = parse_bool(k, v); },
                          [](const RunConfig& c) { return std::string(c.model.binarize ? "true" : "false"); }}},
      {"model.scale_factors", {[](RunConfig& c, auto& k, auto& v) { c.model.scale_factors = parse_bool(k, v); },
                               [](const RunConfig& c) { return std::string(c.model.scale_factors ? "true" : "false"); }}},
      {"model.anchor_scale", {[](RunConfig& c, auto& k, auto& v) { c.model.anchor_scale = parse_double(k, v); },
                              [](const RunConfig& c) { return num(c.model.anchor_scale); }}},
      {"loss.beta", {[](RunConfig& c, auto& k, auto& v) { c.loss.beta = parse_double(k, v); },
                     [](const RunConfig& c) { return num(c.loss.beta); }}},
      {"loss.gamma", {[](RunConfig& c, auto& k, auto& v) { c.loss.gamma = parse_double(k, v); },
                      [](const RunConfig& c) { return num(c.loss.gamma); }}},
      {"loss.tau", {[](RunConfig& c, auto& k, auto& v) { c.loss.tau = parse_double(k, v); },
                    [](const RunConfig& c) { return num(c.loss.tau); }}},
      {"loss.info_weight", {[](RunConfig& c, auto& k, auto& v) { c.loss.info_weight = parse_double(k, v); },
                            [](const RunConfig& c) { return num(c.loss.info_weight); }}},
      {"optim.lr", {[](RunConfig& c, auto& k, auto& v) { c.optim.adam.lr = static_cast<float>(parse_double(k, v)); },
                    [](const RunConfig& c) { return num(c.optim.adam.lr); }}},
      {"optim.beta1",
       {[](RunConfig& c, auto& k, auto& v) { c.optim.adam.beta1 = static_cast<float>(parse_double(k, v)); },
        [](const RunConfig& c) { return num(c.optim.adam.beta1); }}},
      {"optim.beta2",
       {[](RunConfig& c, auto& k, auto& v) { c.optim.adam.beta2 = static_cast<float>(parse_double(k, v)); },
        [](const RunConfig& c) { return num(c.optim.adam.beta2); }}},
      {"optim.eps", {[](RunConfig& c, auto& k, auto& v) { c.optim.adam.eps = static_cast<float>(parse_double(k, v)); },
                     [](const RunConfig& c) { return num(c.optim.adam.eps); }}},
      {"optim.decay_epochs", {[](RunConfig& c, auto& k, auto& v) { c.optim.decay_epochs = parse_int_list<int>(k, v); },
                              [](const RunConfig& c) { return join(c.optim.decay_epochs); }}},
      {"optim.decay_factor",
       {[](RunConfig& c, auto& k, auto& v) { c.optim.decay_factor = static_cast<float>(parse_double(k, v)); },
        [](const RunConfig& c) { return num(c.optim.decay_factor); }}},
      {"train.epochs", {[](RunConfig& c, auto& k, auto& v) { c.train.epochs = parse_int<std::size_t>(k, v); },
                        [](const RunConfig& c) { return std::to_string(c.train.epochs); }}},
      {"train.batch", {[](RunConfig& c, auto& k, auto& v) { c.train.batch = parse_int<std::size_t>(k, v); },
                       [](const RunConfig& c) { return std::to_string(c.train.batch); }}},
      {"train.eval_train_count",
       {[](RunConfig& c, auto& k, auto& v) { c.train.eval_train_count = parse_int<std::size_t>(k, v); },
        [](const RunConfig& c) { return std::to_string(c.train.eval_train_count); }}},
      {"train.augment", {[](RunConfig& c, auto& k, auto& v) { c.train.augment = parse_bool(k, v); },
                         [](const RunConfig& c) { return std::string(c.train.augment ? "true" : "false"); }}},
      {"train.resume", {[](RunConfig& c, auto&, auto& v) { c.train.resume = v; },
                        [](const RunConfig& c) { return c.train.resume; }}},
      {"eval.iou", {[](RunConfig& c, auto& k, auto& v) { c.eval.iou_thresh = parse_double(k, v); },
                    [](const RunConfig& c) { return num(c.eval.iou_thresh); }}},
      {"eval.score", {[](RunConfig& c, auto& k, auto& v) { c.eval.score_thresh = parse_double(k, v); },
                      [](const RunConfig& c) { return num(c.eval.score_thresh); }}},
      {"eval.nms_iou", {[](RunConfig& c, auto& k, auto& v) { c.eval.nms_iou = parse_double(k, v); },
                        [](const RunConfig& c) { return num(c.eval.nms_iou); }}},
      {"eval.ap_mode",
       {[](RunConfig& c, auto& k, auto& v) {
          if (v == "allpoint") c.eval.ap_mode = ApMode::all_point;
          else if (v == "11point") c.eval.ap_mode = ApMode::eleven_point;
          else bad_value(k, v, "allpoint or 11point");
        },
        [](const RunConfig& c) { return ap_mode_name(c.eval.ap_mode); }}},
      {"data.train", {[](RunConfig& c, auto&, auto& v) { c.data_train = v; },
                      [](const RunConfig& c) { return c.data_train; }}},
      {"data.test", {[](RunConfig& c, auto&, auto& v) { c.data_test = v; },
                     [](const RunConfig& c) { return c.data_test; }}},
      {"seed", {[](RunConfig& c, auto& k, auto& v) { c.seed = parse_int<std::uint64_t>(k, v); },
                [](const RunConfig& c) { return std::to_string(c.seed); }}},
      {"out", {[](RunConfig& c, auto&, auto& v) { c.out = v; }, [](const RunConfig& c) { return c.out; }}},
  };
  return table;
}

}  // namespace

void RunConfig::validate() const {
  model.validate();
  loss.validate();
  require(optim.adam.lr > 0 && optim.adam.beta1 >= 0 && optim.adam.beta1 < 1 && optim.adam.beta2 >= 0 &&
              optim.adam.beta2 < 1 && optim.adam.eps > 0,
          ErrorCode::invalid_argument, "optimizer settings out of range");
  require(optim.decay_factor > 0, ErrorCode::invalid_argument, "optim.decay_factor must be positive");
  require(train.epochs >= 1 && train.batch >= 1, ErrorCode::invalid_argument, "train.epochs and train.batch must be >= 1");
  require(eval.iou_thresh > 0 && eval.iou_thresh <= 1 && eval.nms_iou > 0 && eval.nms_iou < 1,
          ErrorCode::invalid_argument, "eval thresholds out of range");
}

void apply_config_value(RunConfig& config, const std::string& key, const std::string& value) {
  for (const auto& [name, k] : keys())
    if (name == key) {
      k.set(config, key, value);
      return;
    }
  fail(ErrorCode::invalid_argument, "unknown config key '" + key + "'");
}

std::string config_value(const RunConfig& config, const std::string& key) {
  for (const auto& [name, k] : keys())
    if (name == key) return k.get(config);
  fail(ErrorCode::invalid_argument, "unknown config key '" + key + "'");
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    require(eq != std::string::npos, ErrorCode::invalid_argument,
            "config line " + std::to_string(lineno) + ": expected 'key = value'");
    try {
      apply_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const Error& e) {
      fail(e.code(), "config line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return base;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::io, "cannot open config " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str());
}

std::string config_echo(const RunConfig& config) {
  std::string out;
  for (const auto& [name, k] : keys()) out += name + " = " + k.get(config) + "\n";
  return out;
}

std::uint64_t config_hash(const RunConfig& config) {
  RunConfig c = config;
  c.out.clear();
  c.train.resume.clear();
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : config_echo(c)) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hash_hex(std::uint64_t h) {
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

}  // namespace bidet
