#include "data/synth_data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <optional>
#include <array>
#include <cctype>
#include <cstdio>
#include <sstream>

#include "error.hpp"

namespace bidet {

namespace fs = std::filesystem;

void SceneConfig::validate() const {
  require(width > 0 && height > 0, ErrorCode::invalid_argument, "scene config: empty image");
  require(num_classes >= 1 && num_classes <= 3, ErrorCode::invalid_argument,
          "scene config: classes must be 1..3 (disc, square, triangle)");
  require(min_objects <= max_objects, ErrorCode::invalid_argument, "scene config: min_objects > max_objects");
  require(min_size >= 2 && min_size <= max_size && max_size <= std::min(width, height), ErrorCode::invalid_argument,
          "scene config: object sizes must satisfy 2 <= min <= max <= image side");
  require(grid >= 1 && width % grid == 0 && height % grid == 0, ErrorCode::invalid_argument,
          "scene config: grid must divide the image");
  require(noise_sigma >= 0, ErrorCode::invalid_argument, "scene config: negative noise");
  require(background >= 0 && background <= 1 && min_contrast >= 0 && min_contrast <= 0.5, ErrorCode::invalid_argument,
          "scene config: background/contrast out of range");
}

const std::vector<std::string>& default_class_names() {
  static const std::vector<std::string> names = {"disc", "square", "triangle"};
  return names;
}

namespace {

float quantize(double v) {
  const double c = std::clamp(v, 0.0, 1.0);
  return static_cast<float>(std::lround(c * 255.0)) / 255.0f;
}

bool inside_shape(ShapeKind kind, double x0, double y0, double size, double px, double py) {
  switch (kind) {
    case ShapeKind::disc: {
      const double r = 0.5 * size, dx = px - (x0 + r), dy = py - (y0 + r);
      return dx * dx + dy * dy <= r * r;
    }
    case ShapeKind::square:
      return px >= x0 && px <= x0 + size && py >= y0 && py <= y0 + size;
    case ShapeKind::triangle: {
      // apex up, base along the bottom edge
      const double depth = py - y0;
      return depth >= 0 && depth <= size && std::abs(px - (x0 + 0.5 * size)) <= 0.5 * depth;
    }
  }
  return false;
}

struct Placed {
  ShapeKind kind;
  std::size_t x0, y0, size;
  std::vector<std::uint8_t> mask;  // size x size
  Box box;
};

std::optional<Placed> rasterize(ShapeKind kind, std::size_t x0, std::size_t y0, std::size_t size) {
  Placed p{kind, x0, y0, size, std::vector<std::uint8_t>(size * size, 0), {}};
  std::size_t xmin = size, ymin = size, xmax = 0, ymax = 0;
  bool any = false;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      if (inside_shape(kind, 0.0, 0.0, static_cast<double>(size), x + 0.5, y + 0.5)) {
        p.mask[y * size + x] = 1;
        xmin = std::min(xmin, x);
        ymin = std::min(ymin, y);
        xmax = std::max(xmax, x);
        ymax = std::max(ymax, y);
        any = true;
      }
  if (!any) return std::nullopt;
  p.box = {static_cast<double>(x0 + xmin), static_cast<double>(y0 + ymin), static_cast<double>(x0 + xmax + 1),
           static_cast<double>(y0 + ymax + 1)};
  return p;
}

bool separated(const Box& a, const Box& b) {
  // at least one background pixel between boxes
  return a.x_max + 1 <= b.x_min || b.x_max + 1 <= a.x_min || a.y_max + 1 <= b.y_min || b.y_max + 1 <= a.y_min;
}

std::size_t center_block(const Box& b, const SceneConfig& cfg) {
  const double bw = static_cast<double>(cfg.width) / static_cast<double>(cfg.grid);
  const double bh = static_cast<double>(cfg.height) / static_cast<double>(cfg.grid);
  const auto gx = std::min(cfg.grid - 1, static_cast<std::size_t>(b.cx() / bw));
  const auto gy = std::min(cfg.grid - 1, static_cast<std::size_t>(b.cy() / bh));
  return gy * cfg.grid + gx;
}

std::array<double, 3> fill_color(std::mt19937_64& rng, const SceneConfig& cfg) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::array<double, 3> c{};
  for (int attempt = 0; attempt < 100; ++attempt) {
    for (auto& v : c) v = u(rng);
    double dist = 0;
    for (double v : c) dist = std::max(dist, std::abs(v - cfg.background));
    if (dist >= cfg.min_contrast) return c;
  }
  c[0] = cfg.background >= 0.5 ? 0.0 : 1.0;
  return c;
}

}  // namespace

Scene generate_scene(std::mt19937_64& rng, const SceneConfig& config) {
  config.validate();
  Scene scene;
  scene.width = config.width;
  scene.height = config.height;
  scene.image.assign(3 * config.width * config.height, static_cast<float>(config.background));

  std::uniform_int_distribution<std::size_t> count_dist(config.min_objects, config.max_objects);
  std::uniform_int_distribution<int> class_dist(1, static_cast<int>(config.num_classes));
  std::uniform_int_distribution<std::size_t> size_dist(config.min_size, config.max_size);
  const std::size_t target = count_dist(rng);

  std::vector<Placed> placed;
  std::vector<std::size_t> used_blocks;
  std::size_t tries = 0;
  while (placed.size() < target && tries < config.max_tries) {
    ++tries;
    const int cls = class_dist(rng);
    const std::size_t size = size_dist(rng);
    std::uniform_int_distribution<std::size_t> xd(0, config.width - size), yd(0, config.height - size);
    const std::size_t x0 = xd(rng), y0 = yd(rng);
    auto p = rasterize(static_cast<ShapeKind>(cls), x0, y0, size);
    if (!p) continue;
    const std::size_t blk = center_block(p->box, config);
    if (std::find(used_blocks.begin(), used_blocks.end(), blk) != used_blocks.end()) continue;
    if (!std::all_of(placed.begin(), placed.end(), [&](const Placed& q) { return separated(q.box, p->box); })) continue;
    used_blocks.push_back(blk);
    placed.push_back(std::move(*p));
  }

  const std::size_t plane = config.width * config.height;
  for (const auto& p : placed) {
    const auto color = fill_color(rng, config);
    for (std::size_t y = 0; y < p.size; ++y)
      for (std::size_t x = 0; x < p.size; ++x)
        if (p.mask[y * p.size + x])
          for (std::size_t c = 0; c < 3; ++c)
            scene.image[c * plane + (p.y0 + y) * config.width + p.x0 + x] = static_cast<float>(color[c]);
    scene.objects.push_back({p.box, static_cast<int>(p.kind)});
  }

  std::normal_distribution<double> noise(0.0, config.noise_sigma);
  for (auto& v : scene.image) v = quantize(v + (config.noise_sigma > 0 ? noise(rng) : 0.0));
  return scene;
}

Scene generate_indexed_scene(std::uint64_t seed, std::size_t index, const SceneConfig& config) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(static_cast<std::uint64_t>(index) >> 32)};
  std::mt19937_64 rng(seq);
  return generate_scene(rng, config);
}

std::vector<Scene> generate_scenes(std::uint64_t seed, std::size_t count, const SceneConfig& config) {
  std::vector<Scene> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(generate_indexed_scene(seed, i, config));
  return out;
}

void write_ppm(const fs::path& path, const Scene& scene) {
  require(scene.image.size() == 3 * scene.width * scene.height, ErrorCode::shape_mismatch,
          "write_ppm: image buffer does not match its size");
  std::ofstream out(path, std::ios::binary);
  require(out.good(), ErrorCode::io, "cannot open " + path.string() + " for writing");
  out << "P6\n" << scene.width << ' ' << scene.height << "\n255\n";
  const std::size_t plane = scene.width * scene.height;
  std::vector<char> bytes(3 * plane);
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      bytes[3 * i + c] = static_cast<char>(std::lround(std::clamp(scene.image[c * plane + i], 0.0f, 1.0f) * 255.0f));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(out.good(), ErrorCode::io, "write failed: " + path.string());
}

Scene read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::io, "cannot open image " + path.string());
  auto token = [&]() {
    std::string t;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!t.empty()) break;
        continue;
      }
      t.push_back(ch);
    }
    return t;
  };
  require(token() == "P6", ErrorCode::format, path.string() + ": not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    fail(ErrorCode::format, path.string() + ": malformed PPM header");
  }
  require(w > 0 && h > 0 && maxval == 255, ErrorCode::format, path.string() + ": unsupported PPM size or maxval");
  std::vector<unsigned char> bytes(3 * w * h);
  in.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<std::size_t>(in.gcount()) == bytes.size(), ErrorCode::format, path.string() + ": truncated pixel data");
  Scene s;
  s.width = w;
  s.height = h;
  s.image.resize(bytes.size());
  const std::size_t plane = w * h;
  for (std::size_t i = 0; i < plane; ++i)
    for (std::size_t c = 0; c < 3; ++c) s.image[c * plane + i] = static_cast<float>(bytes[3 * i + c]) / 255.0f;
  return s;
}

namespace {

void append_number(std::string& out, double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  out.append(buf, end);
}

}  // namespace

std::string format_manifest(const DatasetManifest& manifest) {
  std::string out = "# bidet-manifest 1\n# split " + manifest.split + "\n# seed " + std::to_string(manifest.seed) +
                    "\n# classes";
  for (const auto& n : manifest.class_names) out += " " + n;
  out += "\n";
  for (const auto& r : manifest.records) {
    out += r.image_path;
    for (const auto& o : r.objects) {
      out += " " + std::to_string(o.class_id);
      for (double v : {o.box.x_min, o.box.y_min, o.box.x_max, o.box.y_max}) {
        out += ' ';
        append_number(out, v);
      }
    }
    out += "\n";
  }
  return out;
}

DatasetManifest parse_manifest(const std::string& text) {
  DatasetManifest m;
  m.class_names.clear();
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool saw_header = false;
  auto bad = [&](const std::string& why) {
    fail(ErrorCode::format, "manifest line " + std::to_string(lineno) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string t; ls >> t;) tok.push_back(t);
    if (tok.empty()) continue;
    if (tok[0] == "#") {
      if (tok.size() >= 2 && tok[1] == "bidet-manifest") {
        if (tok.size() != 3 || tok[2] != "1") bad("unsupported manifest version");
        saw_header = true;
      } else if (tok.size() == 3 && tok[1] == "split") {
        m.split = tok[2];
      } else if (tok.size() == 3 && tok[1] == "seed") {
        auto [p, ec] = std::from_chars(tok[2].data(), tok[2].data() + tok[2].size(), m.seed);
        if (ec != std::errc() || p != tok[2].data() + tok[2].size()) bad("malformed seed");
      } else if (tok.size() >= 2 && tok[1] == "classes") {
        m.class_names.assign(tok.begin() + 2, tok.end());
      }
      continue;
    }
    if (!saw_header) bad("record before the manifest header");
    if ((tok.size() - 1) % 5 != 0) bad("expected path followed by groups of 'class x_min y_min x_max y_max'");
    DatasetRecord r;
    r.image_path = tok[0];
    for (std::size_t i = 1; i < tok.size(); i += 5) {
      LabeledBox o;
      auto [pc, ecc] = std::from_chars(tok[i].data(), tok[i].data() + tok[i].size(), o.class_id);
      if (ecc != std::errc() || pc != tok[i].data() + tok[i].size()) bad("malformed class id '" + tok[i] + "'");
      double v[4];
      for (int k = 0; k < 4; ++k) {
        const auto& t = tok[i + 1 + static_cast<std::size_t>(k)];
        auto [p, ec] = std::from_chars(t.data(), t.data() + t.size(), v[k]);
        if (ec != std::errc() || p != t.data() + t.size() || !std::isfinite(v[k])) bad("malformed coordinate '" + t + "'");
      }
      o.box = {v[0], v[1], v[2], v[3]};
      if (o.class_id < 1) bad("class ids start at 1");
      if (!(o.box.x_min < o.box.x_max && o.box.y_min < o.box.y_max)) bad("degenerate box");
      r.objects.push_back(o);
    }
    m.records.push_back(std::move(r));
  }
  if (!saw_header) fail(ErrorCode::format, "manifest: missing '# bidet-manifest 1' header");
  return m;
}

DatasetManifest write_dataset(const fs::path& dir, std::span<const Scene> scenes, const std::string& split,
                              std::uint64_t seed, const std::vector<std::string>& class_names) {
  std::error_code ec;
  fs::create_directories(dir / "images", ec);
  require(!ec, ErrorCode::io, "cannot create dataset directory " + (dir / "images").string() + ": " + ec.message());
  DatasetManifest m;
  m.split = split;
  m.seed = seed;
  m.class_names = class_names;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "images/%06zu.ppm", i);
    write_ppm(dir / name, scenes[i]);
    m.records.push_back({name, scenes[i].objects});
  }
  std::ofstream out(dir / "manifest.txt", std::ios::binary);
  require(out.good(), ErrorCode::io, "cannot write " + (dir / "manifest.txt").string());
  out << format_manifest(m);
  require(out.good(), ErrorCode::io, "write failed: " + (dir / "manifest.txt").string());
  return m;
}

Dataset read_dataset(const fs::path& dir) {
  const fs::path mpath = dir / "manifest.txt";
  std::ifstream in(mpath, std::ios::binary);
  require(in.good(), ErrorCode::io, "cannot open manifest " + mpath.string());
  std::stringstream buf;
  buf << in.rdbuf();
  Dataset d;
  try {
    d.manifest = parse_manifest(buf.str());
  } catch (const Error& e) {
    fail(e.code(), mpath.string() + ": " + e.what());
  }
  for (const auto& r : d.manifest.records) {
    const fs::path ip = dir / r.image_path;
    require(fs::exists(ip), ErrorCode::io, "missing image file " + ip.string());
    Scene s = read_ppm(ip);
    for (const auto& o : r.objects)
      require(o.box.x_min >= 0 && o.box.y_min >= 0 && o.box.x_max <= static_cast<double>(s.width) &&
                  o.box.y_max <= static_cast<double>(s.height),
              ErrorCode::format, "annotation outside image " + ip.string());
    s.objects = r.objects;
    d.scenes.push_back(std::move(s));
  }
  return d;
}

Scene flip_horizontal(const Scene& scene) {
  Scene out = scene;
  const std::size_t w = scene.width;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t y = 0; y < scene.height; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out.image[(c * scene.height + y) * w + x] = scene.image[(c * scene.height + y) * w + (w - 1 - x)];
  const double W = static_cast<double>(w);
  for (auto& o : out.objects) o.box = {W - o.box.x_max, o.box.y_min, W - o.box.x_min, o.box.y_max};
  return out;
}

Scene translate(const Scene& scene, int dx, int dy, double background) {
  if (dx == 0 && dy == 0) return scene;
  Scene out = scene;
  const auto w = static_cast<long>(scene.width), h = static_cast<long>(scene.height);
  const float fill = quantize(background);
  for (std::size_t c = 0; c < 3; ++c)
    for (long y = 0; y < h; ++y)
      for (long x = 0; x < w; ++x) {
        const long sx = x - dx, sy = y - dy;
        const std::size_t dst = (c * scene.height + static_cast<std::size_t>(y)) * scene.width + static_cast<std::size_t>(x);
        out.image[dst] = (sx >= 0 && sx < w && sy >= 0 && sy < h)
                             ? scene.image[(c * scene.height + static_cast<std::size_t>(sy)) * scene.width +
                                           static_cast<std::size_t>(sx)]
                             : fill;
      }
  out.objects.clear();
  for (auto o : scene.objects) {
    o.box = clip_box({o.box.x_min + dx, o.box.y_min + dy, o.box.x_max + dx, o.box.y_max + dy}, static_cast<double>(w),
                     static_cast<double>(h));
    if (o.box.area() > 0) out.objects.push_back(o);
  }
  return out;
}

Scene augment(const Scene& scene, std::mt19937_64& rng, double flip_prob, int jitter) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> shift(-std::abs(jitter), std::abs(jitter));
  const bool flip = u(rng) < flip_prob;
  const int dx = shift(rng), dy = shift(rng);
  Scene out = flip ? flip_horizontal(scene) : scene;
  return translate(out, dx, dy);
}

Tensor<float> scenes_to_tensor(std::span<const Scene* const> scenes) {
  require(!scenes.empty(), ErrorCode::invalid_argument, "scenes_to_tensor: empty batch");
  const std::size_t w = scenes[0]->width, h = scenes[0]->height, per = 3 * w * h;
  std::vector<float> data;
  data.reserve(scenes.size() * per);
  for (const Scene* s : scenes) {
    require(s->width == w && s->height == h && s->image.size() == per, ErrorCode::shape_mismatch,
            "scenes_to_tensor: images differ in size");
    data.insert(data.end(), s->image.begin(), s->image.end());
  }
  return Tensor<float>({scenes.size(), 3, h, w}, std::move(data));
}

Tensor<float> scenes_to_tensor(std::span<const Scene> scenes) {
  std::vector<const Scene*> ptrs;
  for (const auto& s : scenes) ptrs.push_back(&s);
  return scenes_to_tensor(std::span<const Scene* const>(ptrs));
}

}  // namespace bidet
