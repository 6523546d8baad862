#include "app/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "error.hpp"

namespace bidet {

namespace {

constexpr char kMagic[4] = {'B', 'D', 'E', 'T'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    out_.insert(out_.end(), c, c + n);
  }
  template <typename U>
  void uint(U v) {
    for (std::size_t i = 0; i < sizeof(U); ++i) out_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }
  void f32(float v) { uint(std::bit_cast<std::uint32_t>(v)); }
  void str(const std::string& s) {
    uint(static_cast<std::uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  std::vector<char> take() { return std::move(out_); }

 private:
  std::vector<char> out_;
};

class Reader {
 public:
  Reader(const std::vector<char>& b, std::string origin) : b_(b), origin_(std::move(origin)) {}
  void need(std::size_t n) {
    require(pos_ + n <= b_.size(), ErrorCode::format, origin_ + ": truncated checkpoint at byte " + std::to_string(pos_));
  }
  template <typename U>
  U uint() {
    need(sizeof(U));
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i)
      v |= static_cast<U>(static_cast<unsigned char>(b_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }
  float f32() { return std::bit_cast<float>(uint<std::uint32_t>()); }
  std::string str(std::size_t limit) {
    const auto n = uint<std::uint32_t>();
    require(n <= limit, ErrorCode::format, origin_ + ": implausible string length");
    need(n);
    std::string s(b_.data() + pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return b_.size() - pos_; }

 private:
  const std::vector<char>& b_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

const NamedTensor* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return &e;
  return nullptr;
}

std::vector<char> serialize_checkpoint(const Checkpoint& ckpt) {
  Writer w;
  w.bytes(kMagic, 4);
  w.uint(ckpt.version);
  w.str(ckpt.config_text);
  w.uint(ckpt.epoch);
  w.uint(ckpt.optimizer_step);
  w.uint(static_cast<std::uint32_t>(ckpt.rng_state.size()));
  for (auto v : ckpt.rng_state) w.uint(v);
  w.uint(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& e : ckpt.entries) {
    require(shape_numel(e.shape) == e.data.size(), ErrorCode::internal, "checkpoint entry " + e.name + ": size mismatch");
    w.str(e.name);
    w.uint(static_cast<std::uint32_t>(e.shape.size()));
    for (auto d : e.shape) w.uint(static_cast<std::uint64_t>(d));
    for (float v : e.data) w.f32(v);
  }
  return w.take();
}

Checkpoint deserialize_checkpoint(const std::vector<char>& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  r.need(4);
  require(std::memcmp(bytes.data(), kMagic, 4) == 0, ErrorCode::format, origin + ": not a checkpoint (bad magic)");
  for (int i = 0; i < 4; ++i) r.uint<std::uint8_t>();
  Checkpoint c;
  c.version = r.uint<std::uint32_t>();
  require(c.version == kCheckpointVersion, ErrorCode::version_mismatch,
          origin + ": checkpoint version " + std::to_string(c.version) + " but this build reads version " +
              std::to_string(kCheckpointVersion));
  c.config_text = r.str(1u << 20);
  c.epoch = r.uint<std::uint64_t>();
  c.optimizer_step = r.uint<std::uint64_t>();
  const auto nrng = r.uint<std::uint32_t>();
  require(nrng <= 4096, ErrorCode::format, origin + ": implausible rng state size");
  for (std::uint32_t i = 0; i < nrng; ++i) c.rng_state.push_back(r.uint<std::uint64_t>());
  const auto n = r.uint<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    NamedTensor e;
    e.name = r.str(4096);
    const auto rank = r.uint<std::uint32_t>();
    require(rank >= 1 && rank <= 8, ErrorCode::format, origin + ": entry " + e.name + " has invalid rank");
    for (std::uint32_t k = 0; k < rank; ++k) e.shape.push_back(static_cast<std::size_t>(r.uint<std::uint64_t>()));
    const std::size_t count = shape_numel(e.shape);
    require(count * 4 <= r.remaining(), ErrorCode::format, origin + ": entry " + e.name + " truncated");
    e.data.resize(count);
    for (auto& v : e.data) v = r.f32();
    c.entries.push_back(std::move(e));
  }
  require(r.remaining() == 0, ErrorCode::format, origin + ": trailing bytes after checkpoint entries");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const auto bytes = serialize_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    require(out.good(), ErrorCode::io, "cannot write checkpoint " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    require(out.good(), ErrorCode::io, "write failed: " + tmp);
  }
  require(std::rename(tmp.c_str(), path.c_str()) == 0, ErrorCode::io, "cannot move checkpoint into place: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io, "cannot open checkpoint " + path);
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes, path);
}

std::vector<std::uint64_t> rng_words(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  std::istringstream is(os.str());
  std::vector<std::uint64_t> out;
  for (std::uint64_t v; is >> v;) out.push_back(v);
  return out;
}

std::mt19937_64 rng_from_words(const std::vector<std::uint64_t>& words) {
  std::ostringstream os;
  for (std::size_t i = 0; i < words.size(); ++i) os << (i ? " " : "") << words[i];
  std::istringstream is(os.str());
  std::mt19937_64 rng;
  is >> rng;
  require(!is.fail(), ErrorCode::format, "checkpoint rng state is malformed");
  return rng;
}

namespace {

NamedTensor to_entry(const std::string& name, const Tensor<float>& t) {
  return {name, t.shape(), std::vector<float>(t.data().begin(), t.data().end())};
}

void fill_from(const Checkpoint& ckpt, const std::string& name, Tensor<float>& t) {
  const NamedTensor* e = ckpt.find(name);
  require(e != nullptr, ErrorCode::format, "checkpoint lacks entry '" + name + "'");
  require(e->shape == t.shape(), ErrorCode::shape_mismatch,
          "checkpoint entry '" + name + "' has shape " + shape_str(e->shape) + ", model expects " + shape_str(t.shape()));
  std::copy(e->data.begin(), e->data.end(), t.data().begin());
}

}  // namespace

Checkpoint make_checkpoint(const TrainingState& state) {
  Checkpoint c;
  RunConfig echo = state.config;
  // locations are not part of the run's identity
  echo.out.clear();
  echo.train.resume.clear();
  c.config_text = config_echo(echo);
  c.epoch = state.epoch;
  c.optimizer_step = state.adam.step;
  c.rng_state = rng_words(state.rng);
  const auto params = state.model.named_parameters();
  for (const auto& [name, t] : params) c.entries.push_back(to_entry("param/" + name, t));
  for (const auto& [name, t] : state.model.named_buffers()) c.entries.push_back(to_entry("buffer/" + name, t));
  if (!state.adam.m.empty()) {
    require(state.adam.m.size() == params.size() && state.adam.v.size() == params.size(), ErrorCode::internal,
            "optimizer state does not match the parameter list");
    for (std::size_t i = 0; i < params.size(); ++i) {
      c.entries.push_back(to_entry("adam.m/" + params[i].first, state.adam.m[i]));
      c.entries.push_back(to_entry("adam.v/" + params[i].first, state.adam.v[i]));
    }
  }
  return c;
}

DetectorModel<float> restore_model(const Checkpoint& ckpt) {
  const RunConfig cfg = parse_config(ckpt.config_text);
  DetectorModel<float> model = DetectorModel<float>::init(cfg.model, 0);
  for (auto& [name, t] : model.named_parameters()) {
    Tensor<float> handle = t;
    fill_from(ckpt, "param/" + name, handle);
  }
  for (auto& [name, t] : model.named_buffers()) {
    Tensor<float> handle = t;
    fill_from(ckpt, "buffer/" + name, handle);
  }
  return model;
}

TrainingState restore_training_state(const Checkpoint& ckpt) {
  TrainingState s{parse_config(ckpt.config_text), restore_model(ckpt), {}, rng_from_words(ckpt.rng_state), ckpt.epoch};
  const auto params = s.model.named_parameters();
  std::vector<Tensor<float>> plist;
  for (const auto& p : params) plist.push_back(p.second);
  s.adam = AdamState::init(plist);
  s.adam.step = ckpt.optimizer_step;
  for (std::size_t i = 0; i < params.size(); ++i) {
    fill_from(ckpt, "adam.m/" + params[i].first, s.adam.m[i]);
    fill_from(ckpt, "adam.v/" + params[i].first, s.adam.v[i]);
  }
  return s;
}

}  // namespace bidet
