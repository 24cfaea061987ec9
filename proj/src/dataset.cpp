#include "maskattn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "maskattn/tns_io.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace maskattn::data {

void validate_sample(const SegSample& s, const std::string& context) {
  const int64_t n = s.h * s.w;
  if (s.h <= 0 || s.w <= 0 || int64_t(s.image.size()) != 3 * n ||
      int64_t(s.semantic.size()) != n || int64_t(s.instance.size()) != n)
    throw std::runtime_error(context + ": sample field sizes disagree");
  std::map<uint16_t, uint16_t> inst_class;
  for (int64_t i = 0; i < n; ++i) {
    const uint16_t c = s.semantic[size_t(i)], id = s.instance[size_t(i)];
    if (c >= kNumClasses) throw std::runtime_error(context + ": semantic label out of range");
    if (id != 0) {
      if (c == 0) throw std::runtime_error(context + ": instance pixel with stuff class");
      auto [it, fresh] = inst_class.emplace(id, c);
      if (!fresh && it->second != c)
        throw std::runtime_error(context + ": instance id spans two semantic classes");
    }
  }
}

namespace {

struct ShapeSpec {
  int cls;          // 1 circle, 2 rectangle, 3 triangle
  double cx, cy;    // center
  double size;      // radius / half-extent
  double aspect;    // rectangles
  double angle;     // triangles
  float color[3];
};

bool inside(const ShapeSpec& sp, double x, double y) {
  const double dx = x - sp.cx, dy = y - sp.cy;
  switch (sp.cls) {
    case 1:
      return dx * dx + dy * dy <= sp.size * sp.size;
    case 2:
      return std::abs(dx) <= sp.size * sp.aspect && std::abs(dy) <= sp.size / sp.aspect;
    case 3: {
      // triangle with vertices at angle, angle+120, angle+240 on radius size
      double vx[3], vy[3];
      for (int k = 0; k < 3; ++k) {
        const double a = sp.angle + k * 2.0943951023931953;
        vx[k] = sp.cx + sp.size * std::cos(a);
        vy[k] = sp.cy + sp.size * std::sin(a);
      }
      bool pos = false, neg = false;
      for (int k = 0; k < 3; ++k) {
        const int j = (k + 1) % 3;
        const double cross = (vx[j] - vx[k]) * (y - vy[k]) - (vy[j] - vy[k]) * (x - vx[k]);
        pos |= cross > 0;
        neg |= cross < 0;
      }
      return !(pos && neg);
    }
  }
  return false;
}

}  // namespace

SegSample generate_sample(const GenConfig& cfg, Rng& rng, int64_t forced_class) {
  const int64_t s = cfg.size, n = s * s;
  SegSample out;
  out.h = out.w = s;
  out.image.assign(size_t(3 * n), 0.f);
  out.semantic.assign(size_t(n), 0);
  out.instance.assign(size_t(n), 0);

  // textured background: two soft gradients per channel
  double gx[3], gy[3], base[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = rng.uniform(0.15, 0.45);
    gx[c] = rng.uniform(-0.15, 0.15);
    gy[c] = rng.uniform(-0.15, 0.15);
  }

  const int64_t k = 1 + int64_t(rng.uniform_index(uint64_t(cfg.max_shapes)));
  std::vector<ShapeSpec> shapes;
  for (int64_t i = 0; i < k; ++i) {
    ShapeSpec sp;
    sp.cls = (i == 0 && forced_class > 0) ? int(forced_class)
                                          : 1 + int(rng.uniform_index(3));
    sp.size = rng.uniform(0.12, 0.28) * double(s);
    sp.cx = rng.uniform(sp.size, double(s) - sp.size);
    sp.cy = rng.uniform(sp.size, double(s) - sp.size);
    sp.aspect = rng.uniform(0.6, 1.6);
    sp.angle = rng.uniform(0.0, 6.283185307179586);
    for (int c = 0; c < 3; ++c) sp.color[c] = float(rng.uniform(0.5, 1.0));
    shapes.push_back(sp);
  }

  // painter's order: later shapes occlude earlier ones
  std::vector<int64_t> owner(size_t(n), -1);
  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      const double px = double(x) + 0.5, py = double(y) + 0.5;
      for (int64_t i = k - 1; i >= 0; --i)
        if (inside(shapes[size_t(i)], px, py)) {
          owner[size_t(y * s + x)] = i;
          break;
        }
    }

  // contiguous instance ids over shapes with visible pixels
  std::vector<uint16_t> remap(size_t(k), 0);
  uint16_t next_id = 1;
  for (int64_t i = 0; i < k; ++i)
    for (int64_t p = 0; p < n; ++p)
      if (owner[size_t(p)] == i) {
        remap[size_t(i)] = next_id++;
        break;
      }

  for (int64_t y = 0; y < s; ++y)
    for (int64_t x = 0; x < s; ++x) {
      const int64_t p = y * s + x;
      float col[3];
      const double u = double(x) / double(s) - 0.5, v = double(y) / double(s) - 0.5;
      for (int c = 0; c < 3; ++c) col[c] = float(base[c] + gx[c] * u + gy[c] * v);
      if (owner[size_t(p)] >= 0) {
        const ShapeSpec& sp = shapes[size_t(owner[size_t(p)])];
        for (int c = 0; c < 3; ++c) col[c] = sp.color[c];
        out.semantic[size_t(p)] = uint16_t(sp.cls);
        out.instance[size_t(p)] = remap[size_t(owner[size_t(p)])];
      }
      for (int c = 0; c < 3; ++c) {
        const double noisy = col[c] + cfg.noise * rng.normal();
        out.image[size_t(c * n + p)] = float(std::clamp(noisy, 0.0, 1.0));
      }
    }
  return out;
}

void save_sample(const std::string& dir, int64_t id, const SegSample& s) {
  const std::string name = std::to_string(id) + ".tns";
  tns::write(dir + "/images/" + name,
             tns::from_f32({3, uint32_t(s.h), uint32_t(s.w)}, s.image.data()));
  tns::write(dir + "/semantic/" + name,
             tns::from_u16({uint32_t(s.h), uint32_t(s.w)}, s.semantic.data()));
  tns::write(dir + "/instance/" + name,
             tns::from_u16({uint32_t(s.h), uint32_t(s.w)}, s.instance.data()));
}

SegSample load_sample(const std::string& dir, int64_t id) {
  const std::string name = std::to_string(id) + ".tns";
  tns::TnsData img = tns::read(dir + "/images/" + name);
  tns::TnsData sem = tns::read(dir + "/semantic/" + name);
  tns::TnsData ins = tns::read(dir + "/instance/" + name);
  if (img.dims.size() != 3 || img.dims[0] != 3)
    throw std::runtime_error(dir + "/images/" + name + ": expected [3,H,W] f32");
  SegSample s;
  s.h = img.dims[1];
  s.w = img.dims[2];
  s.image.assign(img.as_f32(), img.as_f32() + img.count());
  s.semantic.assign(sem.as_u16(), sem.as_u16() + sem.count());
  s.instance.assign(ins.as_u16(), ins.as_u16() + ins.count());
  validate_sample(s, dir + "/" + name);
  return s;
}

void generate_shapes_dataset(const std::string& dir, const GenConfig& cfg, uint64_t seed) {
  if (cfg.size % 16 != 0) throw std::runtime_error("gen-data: size must be divisible by 16");
  if (cfg.n_images < 2) throw std::runtime_error("gen-data: need at least 2 images");
  for (const char* sub : {"", "/images", "/semantic", "/instance"})
    fs::create_directories(dir + sub);

  Rng root(seed);
  for (int64_t id = 0; id < cfg.n_images; ++id) {
    Rng sub = root.substream(uint64_t(id));
    // rotate a forced thing class so every class appears in >= 1/3 of images
    SegSample s = generate_sample(cfg, sub, 1 + id % 3);
    validate_sample(s, dir + " image " + std::to_string(id));
    save_sample(dir, id, s);
  }

  DatasetMeta meta;
  meta.classes = class_names();
  meta.is_thing = {false, true, true, true};
  meta.seed = seed;
  meta.cfg = cfg;
  const int64_t n_val = std::max<int64_t>(1, int64_t(std::llround(cfg.val_fraction * double(cfg.n_images))));
  for (int64_t id = 0; id < cfg.n_images; ++id)
    (id < cfg.n_images - n_val ? meta.train_ids : meta.val_ids).push_back(id);

  json j;
  j["classes"] = meta.classes;
  j["is_thing"] = std::vector<int>(meta.is_thing.begin(), meta.is_thing.end());
  j["train_ids"] = meta.train_ids;
  j["val_ids"] = meta.val_ids;
  j["seed"] = meta.seed;
  j["config"] = {{"n_images", cfg.n_images}, {"size", cfg.size},
                 {"max_shapes", cfg.max_shapes}, {"noise", cfg.noise},
                 {"val_fraction", cfg.val_fraction}};
  std::ofstream f(dir + "/meta.json");
  f << j.dump(2) << "\n";
  if (!f) throw std::runtime_error(dir + "/meta.json: write failed");
}

DatasetMeta load_meta(const std::string& dir) {
  std::ifstream f(dir + "/meta.json");
  if (!f) throw std::runtime_error(dir + "/meta.json: cannot open");
  json j = json::parse(f);
  DatasetMeta m;
  m.classes = j.at("classes").get<std::vector<std::string>>();
  for (int v : j.at("is_thing").get<std::vector<int>>()) m.is_thing.push_back(v != 0);
  m.train_ids = j.at("train_ids").get<std::vector<int64_t>>();
  m.val_ids = j.at("val_ids").get<std::vector<int64_t>>();
  m.seed = j.at("seed").get<uint64_t>();
  const json& c = j.at("config");
  m.cfg.n_images = c.at("n_images").get<int64_t>();
  m.cfg.size = c.at("size").get<int64_t>();
  m.cfg.max_shapes = c.at("max_shapes").get<int64_t>();
  m.cfg.noise = c.at("noise").get<double>();
  m.cfg.val_fraction = c.at("val_fraction").get<double>();
  return m;
}

namespace {

// half-pixel-center source coordinate for arbitrary resize
double src_coord(int64_t i, int64_t to, int64_t from) {
  return (double(i) + 0.5) * double(from) / double(to) - 0.5;
}

}  // namespace

SegSample resize_sample(const SegSample& s, int64_t th, int64_t tw) {
  if (th < 16 || tw < 16) throw std::runtime_error("resize_sample: target smaller than 16");
  if (th == s.h && tw == s.w) return s;
  SegSample o;
  o.h = th;
  o.w = tw;
  o.image.assign(size_t(3 * th * tw), 0.f);
  o.semantic.assign(size_t(th * tw), 0);
  o.instance.assign(size_t(th * tw), 0);
  for (int64_t y = 0; y < th; ++y) {
    const double sy = src_coord(y, th, s.h);
    const int64_t y0 = std::clamp<int64_t>(int64_t(std::floor(sy)), 0, s.h - 1);
    const int64_t y1 = std::min<int64_t>(y0 + 1, s.h - 1);
    const double wy = std::clamp(sy - std::floor(sy), 0.0, 1.0);
    const int64_t yn = std::clamp<int64_t>(int64_t(std::llround(sy)), 0, s.h - 1);
    for (int64_t x = 0; x < tw; ++x) {
      const double sx = src_coord(x, tw, s.w);
      const int64_t x0 = std::clamp<int64_t>(int64_t(std::floor(sx)), 0, s.w - 1);
      const int64_t x1 = std::min<int64_t>(x0 + 1, s.w - 1);
      const double wx = std::clamp(sx - std::floor(sx), 0.0, 1.0);
      for (int64_t c = 0; c < 3; ++c) {
        const float* pl = s.image.data() + c * s.h * s.w;
        const double v =
            (1 - wy) * ((1 - wx) * pl[y0 * s.w + x0] + wx * pl[y0 * s.w + x1]) +
            wy * ((1 - wx) * pl[y1 * s.w + x0] + wx * pl[y1 * s.w + x1]);
        o.image[size_t(c * th * tw + y * tw + x)] = float(v);
      }
      const int64_t xn = std::clamp<int64_t>(int64_t(std::llround(sx)), 0, s.w - 1);
      o.semantic[size_t(y * tw + x)] = s.semantic[size_t(yn * s.w + xn)];
      o.instance[size_t(y * tw + x)] = s.instance[size_t(yn * s.w + xn)];
    }
  }
  validate_sample(o, "resize_sample");
  return o;
}

namespace {

SegSample hflip(const SegSample& s) {
  SegSample o = s;
  for (int64_t c = 0; c < 3; ++c)
    for (int64_t y = 0; y < s.h; ++y)
      for (int64_t x = 0; x < s.w; ++x)
        o.image[size_t((c * s.h + y) * s.w + x)] =
            s.image[size_t((c * s.h + y) * s.w + (s.w - 1 - x))];
  for (int64_t y = 0; y < s.h; ++y)
    for (int64_t x = 0; x < s.w; ++x) {
      o.semantic[size_t(y * s.w + x)] = s.semantic[size_t(y * s.w + (s.w - 1 - x))];
      o.instance[size_t(y * s.w + x)] = s.instance[size_t(y * s.w + (s.w - 1 - x))];
    }
  return o;
}

// crop or zero-pad back to (h, w), centered
SegSample center_fit(const SegSample& s, int64_t h, int64_t w) {
  SegSample o;
  o.h = h;
  o.w = w;
  o.image.assign(size_t(3 * h * w), 0.f);
  o.semantic.assign(size_t(h * w), 0);
  o.instance.assign(size_t(h * w), 0);
  const int64_t oy = (s.h - h) / 2, ox = (s.w - w) / 2;
  for (int64_t y = 0; y < h; ++y) {
    const int64_t sy = y + oy;
    if (sy < 0 || sy >= s.h) continue;
    for (int64_t x = 0; x < w; ++x) {
      const int64_t sx = x + ox;
      if (sx < 0 || sx >= s.w) continue;
      for (int64_t c = 0; c < 3; ++c)
        o.image[size_t((c * h + y) * w + x)] = s.image[size_t((c * s.h + sy) * s.w + sx)];
      o.semantic[size_t(y * w + x)] = s.semantic[size_t(sy * s.w + sx)];
      o.instance[size_t(y * w + x)] = s.instance[size_t(sy * s.w + sx)];
    }
  }
  return o;
}

}  // namespace

SegSample augment(const SegSample& s, Rng& rng) {
  SegSample o = rng.bernoulli(0.5) ? hflip(s) : s;
  const double u = rng.uniform(0.8, 1.25);
  const int64_t sh = std::max<int64_t>(16, int64_t(std::llround(double(s.h) * u)));
  const int64_t sw = std::max<int64_t>(16, int64_t(std::llround(double(s.w) * u)));
  if (sh != s.h || sw != s.w) o = center_fit(resize_sample(o, sh, sw), s.h, s.w);
  return o;
}

}  // namespace maskattn::data
