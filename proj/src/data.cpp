#include "ccvim/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>

#include "ccvim/image_io.hpp"
#include "ccvim/rng.hpp"

namespace ccvim {

SynthMode parse_synth_mode(const std::string& s) {
  if (s == "nuclei") return SynthMode::Nuclei;
  if (s == "lesion") return SynthMode::Lesion;
  throw ConfigError("mode must be 'nuclei' or 'lesion', got '" + s + "'");
}

namespace {

struct Ellipse {
  double cy, cx, ry, rx;
};

// Normalized squared distance; < 1 means inside.
double ellipse_dist(const Ellipse& e, int64_t y, int64_t x) {
  double dy = (static_cast<double>(y) - e.cy) / e.ry;
  double dx = (static_cast<double>(x) - e.cx) / e.rx;
  return dy * dy + dx * dx;
}

IntMap rasterize_nuclei(const std::vector<Ellipse>& shapes, int64_t size) {
  IntMap inst(size, size);
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      double best = 1.0;
      int32_t id = 0;
      for (size_t k = 0; k < shapes.size(); ++k) {
        double d = ellipse_dist(shapes[k], y, x);
        if (d < best) {  // overlap goes to the relatively closest center
          best = d;
          id = static_cast<int32_t>(k + 1);
        }
      }
      inst.at(y, x) = id;
    }
  }
  return inst;
}

IntMap lesion_blob(int64_t size, SplitMix64& rng) {
  double cy = static_cast<double>(size) / 2.0 + rng.uniform(-
      static_cast<double>(size) / 8.0, static_cast<double>(size) / 8.0);
  double cx = static_cast<double>(size) / 2.0 +
              rng.uniform(-static_cast<double>(size) / 8.0, static_cast<double>(size) / 8.0);
  double base = static_cast<double>(size) / 4.0;
  double amp[3], phase[3];
  for (int k = 0; k < 3; ++k) {
    amp[k] = rng.uniform(0.03, 0.1);
    phase[k] = rng.uniform(0.0, 2.0 * M_PI);
  }
  IntMap inst(size, size);
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      double dy = static_cast<double>(y) - cy;
      double dx = static_cast<double>(x) - cx;
      double theta = std::atan2(dy, dx);
      double r = base;
      for (int k = 0; k < 3; ++k) {
        r *= 1.0 + amp[k] * std::sin(static_cast<double>(k + 1) * theta + phase[k]);
      }
      if (std::sqrt(dy * dy + dx * dx) < r) inst.at(y, x) = 1;
    }
  }
  return inst;
}

Tensor render_image(const IntMap& inst, SplitMix64& rng) {
  int64_t size = inst.h;
  double bg[3], fg[3];
  for (int c = 0; c < 3; ++c) bg[c] = rng.uniform(0.10, 0.35);
  for (int c = 0; c < 3; ++c) fg[c] = rng.uniform(0.55, 0.90);
  int32_t count = 0;
  for (int32_t v : inst.v) count = std::max(count, v);
  std::vector<double> shade(static_cast<size_t>(count) + 1, 0.0);
  for (auto& s : shade) s = rng.uniform(-0.08, 0.08);
  Tensor image = Tensor::zeros({3, size, size});
  auto& d = image.data();
  for (int64_t y = 0; y < size; ++y) {
    for (int64_t x = 0; x < size; ++x) {
      int32_t id = inst.at(y, x);
      for (int64_t c = 0; c < 3; ++c) {
        double v = id != 0 ? fg[c] + shade[static_cast<size_t>(id)] : bg[c];
        v += rng.uniform(-0.06, 0.06);
        d[c * size * size + y * size + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  }
  return image;
}

int32_t instance_count(const IntMap& inst) {
  IntMap labels = label_components(inst);
  int32_t count = 0;
  for (int32_t v : labels.v) count = std::max(count, v);
  return count;
}

SynthScene make_scene(int64_t size, SynthMode mode, SplitMix64& rng) {
  SynthScene scene;
  if (mode == SynthMode::Lesion) {
    scene.instances = lesion_blob(size, rng);
  } else {
    for (int attempt = 0; attempt < 20; ++attempt) {
      int64_t count = rng.uniform_int(5, 15);
      std::vector<Ellipse> shapes;
      for (int64_t k = 0; k < count; ++k) {
        Ellipse e;
        e.ry = rng.uniform(3.0, 8.0);
        e.rx = rng.uniform(3.0, 8.0);
        bool touch = !shapes.empty() && rng.uniform() < 0.3;
        if (touch) {
          // Place adjacent to an earlier nucleus so instances may touch.
          const Ellipse& prev = shapes[static_cast<size_t>(rng.uniform_int(
              0, static_cast<int64_t>(shapes.size()) - 1))];
          double ang = rng.uniform(0.0, 2.0 * M_PI);
          double gap = rng.uniform(0.9, 1.1);
          e.cy = prev.cy + (prev.ry + e.ry) * gap * std::sin(ang);
          e.cx = prev.cx + (prev.rx + e.rx) * gap * std::cos(ang);
        } else {
          e.cy = rng.uniform(8.0, static_cast<double>(size) - 8.0);
          e.cx = rng.uniform(8.0, static_cast<double>(size) - 8.0);
        }
        e.cy = std::clamp(e.cy, 4.0, static_cast<double>(size) - 4.0);
        e.cx = std::clamp(e.cx, 4.0, static_cast<double>(size) - 4.0);
        shapes.push_back(e);
      }
      IntMap inst = rasterize_nuclei(shapes, size);
      int32_t got = instance_count(inst);
      if (got == static_cast<int32_t>(count)) {
        scene.instances = std::move(inst);
        break;
      }
    }
    if (scene.instances.v.empty()) {
      throw NumericError("synth_dataset: could not place the requested nuclei");
    }
  }
  scene.semantic = IntMap(size, size);
  for (size_t i = 0; i < scene.instances.v.size(); ++i) {
    scene.semantic.v[i] = scene.instances.v[i] != 0 ? 1 : 0;
  }
  scene.hv = distance_targets(scene.instances);
  scene.image = render_image(scene.instances, rng);
  return scene;
}

}  // namespace

std::vector<SynthScene> synth_dataset(int64_t n, int64_t size, uint64_t seed, SynthMode mode) {
  if (n < 1) throw ConfigError("synth_dataset: n must be >= 1");
  if (size % 32 != 0) throw ConfigError("synth_dataset: size must be divisible by 32");
  std::vector<SynthScene> scenes;
  scenes.reserve(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    SplitMix64 rng(mix_seed(seed, static_cast<uint64_t>(i)));
    scenes.push_back(make_scene(size, mode, rng));
  }
  return scenes;
}

namespace {

enum class AugOp { Identity, HFlip, VFlip, Rot90, Rot180, Rot270 };

// Source coordinate of output pixel (y, x) on a square side s.
void src_coord(AugOp op, int64_t s, int64_t y, int64_t x, int64_t* sy, int64_t* sx) {
  switch (op) {
    case AugOp::Identity: *sy = y; *sx = x; break;
    case AugOp::HFlip: *sy = y; *sx = s - 1 - x; break;
    case AugOp::VFlip: *sy = s - 1 - y; *sx = x; break;
    case AugOp::Rot90: *sy = x; *sx = s - 1 - y; break;
    case AugOp::Rot180: *sy = s - 1 - y; *sx = s - 1 - x; break;
    case AugOp::Rot270: *sy = s - 1 - x; *sx = y; break;
  }
}

// (ph', pv') = mix of source (ph, pv) under the spatial transform.
void hv_mix(AugOp op, double ph, double pv, double* phn, double* pvn) {
  switch (op) {
    case AugOp::Identity: *phn = ph; *pvn = pv; break;
    case AugOp::HFlip: *phn = -ph; *pvn = pv; break;
    case AugOp::VFlip: *phn = ph; *pvn = -pv; break;
    case AugOp::Rot90: *phn = pv; *pvn = -ph; break;
    case AugOp::Rot180: *phn = -ph; *pvn = -pv; break;
    case AugOp::Rot270: *phn = -pv; *pvn = ph; break;
  }
}

}  // namespace

SynthScene augment(const SynthScene& scene, uint64_t seed) {
  int64_t s = scene.semantic.h;
  if (scene.semantic.w != s) throw ContractError("augment: scenes must be square");
  SplitMix64 rng(seed);
  auto op = static_cast<AugOp>(rng.uniform_int(0, 5));
  SynthScene out;
  out.image = Tensor::zeros({3, s, s});
  out.semantic = IntMap(s, s);
  out.instances = IntMap(s, s);
  out.hv.ph = RealMap(s, s);
  out.hv.pv = RealMap(s, s);
  const auto& src_img = scene.image.data();
  auto& dst_img = out.image.data();
  for (int64_t y = 0; y < s; ++y) {
    for (int64_t x = 0; x < s; ++x) {
      int64_t sy, sx;
      src_coord(op, s, y, x, &sy, &sx);
      for (int64_t c = 0; c < 3; ++c) {
        dst_img[c * s * s + y * s + x] = src_img[c * s * s + sy * s + sx];
      }
      out.semantic.at(y, x) = scene.semantic.at(sy, sx);
      out.instances.at(y, x) = scene.instances.at(sy, sx);
      double ph, pv;
      hv_mix(op, scene.hv.ph.at(sy, sx), scene.hv.pv.at(sy, sx), &ph, &pv);
      out.hv.ph.at(y, x) = ph;
      out.hv.pv.at(y, x) = pv;
    }
  }
  return out;
}

namespace {

std::string scene_path(const std::string& dir, int64_t index, const char* suffix) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "scene_%04lld", static_cast<long long>(index));
  return dir + "/" + buf + suffix;
}

}  // namespace

void save_scene(const std::string& dir, int64_t index, const SynthScene& scene) {
  std::filesystem::create_directories(dir);
  write_ppm(scene_path(dir, index, ".ppm"), scene.image);
  write_pgm8(scene_path(dir, index, "_sem.pgm"), scene.semantic);
  write_pgm16(scene_path(dir, index, "_inst.pgm"), scene.instances);
}

SynthScene load_scene(const std::string& dir, int64_t index) {
  SynthScene scene;
  scene.image = read_ppm(scene_path(dir, index, ".ppm"));
  scene.semantic = read_pgm8(scene_path(dir, index, "_sem.pgm"));
  scene.instances = read_pgm16(scene_path(dir, index, "_inst.pgm"));
  scene.hv = distance_targets(scene.instances);
  return scene;
}

int64_t count_scenes(const std::string& dir) {
  int64_t n = 0;
  while (std::filesystem::exists(scene_path(dir, n, ".ppm"))) ++n;
  return n;
}

}  // namespace ccvim
