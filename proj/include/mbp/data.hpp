#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbp/common.hpp"
#include "mbp/image_io.hpp"
#include "mbp/rng.hpp"
#include "mbp/tensor.hpp"

namespace mbp {

template <typename T>
struct SharpHighFpsClip {
  FrameSeq<T> frames;
  double fps = 0;
};

// Index-aligned blurry/sharp pair: frame i of both sequences shares the same
// exposure center.
template <typename T>
struct PairedSequence {
  FrameSeq<T> blurry;
  FrameSeq<T> sharp;
  std::string scene_id;
};

struct DatasetSpec {
  std::string root;
  std::string split = "train";  // train | test
  int patch = 0;                // 0 = whole frames
  int seq_len = 1;

  void validate() const {
    if (split != "train" && split != "test")
      throw ConfigError("DatasetSpec: split must be 'train' or 'test', got '" + split + "'");
    if (seq_len < 1) throw ConfigError("DatasetSpec: seq_len must be >= 1");
    if (patch < 0) throw ConfigError("DatasetSpec: patch must be >= 0");
  }
};

// ---- procedural scenes ----

struct SceneObject {
  enum class Kind { kDisc, kRect, kBar };
  Kind kind = Kind::kDisc;
  double cx = 0, cy = 0;        // center, pixels
  double half_w = 0, half_h = 0;  // rect extents; discs use half_w as radius
  double vx = 0, vy = 0;        // pixels per frame
  double color[3] = {0, 0, 0};
};

struct ToyScene {
  int height = 0, width = 0;
  double bg_base[3] = {0, 0, 0};
  double bg_gx[3] = {0, 0, 0};  // horizontal gradient per channel
  double bg_gy[3] = {0, 0, 0};
  std::vector<SceneObject> objects;
};

namespace detail {

// exact overlap of pixel cell [p, p+1) with interval [lo, hi)
inline double cell_coverage(double p, double lo, double hi) {
  const double v = std::min(hi, p + 1.0) - std::max(lo, p);
  return v < 0 ? 0 : (v > 1 ? 1 : v);
}

inline double object_coverage(const SceneObject& o, double cx, double cy, int x, int y) {
  switch (o.kind) {
    case SceneObject::Kind::kDisc: {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double d = std::sqrt(dx * dx + dy * dy);
      const double v = o.half_w + 0.5 - d;
      return v < 0 ? 0 : (v > 1 ? 1 : v);
    }
    case SceneObject::Kind::kRect:
    case SceneObject::Kind::kBar:
      return cell_coverage(x, cx - o.half_w, cx + o.half_w) *
             cell_coverage(y, cy - o.half_h, cy + o.half_h);
  }
  return 0;
}

// Linear motion with reflection off the frame borders, evaluated in closed
// form so object positions are exact for fractional times.
inline double bounce(double p0, double v, double t, double lo, double hi) {
  if (hi <= lo) return lo;
  const double span = hi - lo;
  double u = std::fmod(p0 - lo + v * t, 2 * span);
  if (u < 0) u += 2 * span;
  return lo + (u <= span ? u : 2 * span - u);
}

}  // namespace detail

template <typename T>
Tensor<T> render_scene_frame(const ToyScene& scene, double t) {
  Tensor<T> frame(Shape{3, scene.height, scene.width});
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < scene.height; ++y)
      for (int x = 0; x < scene.width; ++x)
        frame.at(c, y, x) = static_cast<T>(clamp01(
            scene.bg_base[c] + scene.bg_gx[c] * (x + 0.5) / scene.width +
            scene.bg_gy[c] * (y + 0.5) / scene.height));

  const double margin = 2.0;
  for (const SceneObject& o : scene.objects) {
    const double cx = detail::bounce(o.cx, o.vx, t, margin, scene.width - margin);
    const double cy = detail::bounce(o.cy, o.vy, t, margin, scene.height - margin);
    const int x0 = std::max(0, static_cast<int>(std::floor(cx - o.half_w - 2)));
    const int x1 = std::min(scene.width, static_cast<int>(std::ceil(cx + o.half_w + 2)));
    const int y0 = std::max(0, static_cast<int>(std::floor(cy - o.half_h - 2)));
    const int y1 = std::min(scene.height, static_cast<int>(std::ceil(cy + o.half_h + 2)));
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        const double a = detail::object_coverage(o, cx, cy, x, y);
        if (a <= 0) continue;
        for (int c = 0; c < 3; ++c) {
          T& px = frame.at(c, y, x);
          px = static_cast<T>(clamp01((1 - a) * px + a * o.color[c]));
        }
      }
  }
  return frame;
}

inline ToyScene make_toy_scene(uint64_t seed, int h, int w, double motion_px_per_frame) {
  if (h % 4 || w % 4) throw ContractError("toy scene: dimensions must be divisible by 4");
  Rng rng(seed);
  ToyScene s;
  s.height = h;
  s.width = w;
  for (int c = 0; c < 3; ++c) {
    s.bg_base[c] = rng.uniform(0.1, 0.5);
    s.bg_gx[c] = rng.uniform(-0.3, 0.3);
    s.bg_gy[c] = rng.uniform(-0.3, 0.3);
  }
  const int count = 5 + static_cast<int>(rng.uniform_int(4));
  const double smin = std::max(1.5, h / 14.0), smax = std::max(3.0, h / 4.0);
  for (int i = 0; i < count; ++i) {
    SceneObject o;
    const int kind = static_cast<int>(rng.uniform_int(3));
    o.kind = kind == 0   ? SceneObject::Kind::kDisc
             : kind == 1 ? SceneObject::Kind::kRect
                         : SceneObject::Kind::kBar;
    o.cx = rng.uniform(0.2 * w, 0.8 * w);
    o.cy = rng.uniform(0.2 * h, 0.8 * h);
    o.half_w = rng.uniform(smin, smax);
    o.half_h = o.kind == SceneObject::Kind::kBar ? std::max(1.0, o.half_w / 4) : rng.uniform(smin, smax);
    const double theta = rng.uniform(0, 2 * 3.14159265358979323846);
    o.vx = motion_px_per_frame * std::cos(theta);
    o.vy = motion_px_per_frame * std::sin(theta);
    for (int c = 0; c < 3; ++c) o.color[c] = rng.uniform(0.0, 1.0);
    s.objects.push_back(o);
  }
  return s;
}

// Deterministic per seed; sub-pixel linear motion so window averaging yields
// directional blur.
template <typename T>
SharpHighFpsClip<T> generate_toy_scene(uint64_t seed, int num_frames, int h, int w,
                                       double motion_px_per_frame) {
  if (num_frames < 1) throw ContractError("generate_toy_scene: num_frames must be >= 1");
  const ToyScene scene = make_toy_scene(seed, h, w, motion_px_per_frame);
  SharpHighFpsClip<T> clip;
  clip.fps = 240.0;
  clip.frames.reserve(num_frames);
  for (int t = 0; t < num_frames; ++t) clip.frames.push_back(render_scene_frame<T>(scene, t));
  return clip;
}

// ---- blur synthesis ----

// Each blurry frame is the mean of `window` consecutive sharp frames taken in
// gamma-decoded (linear) intensity; the paired sharp frame is the window
// center. gamma = 1 averages the stored values directly.
template <typename T>
PairedSequence<T> synthesize_blur(const SharpHighFpsClip<T>& clip, int window, int stride,
                                  double gamma) {
  const int n = static_cast<int>(clip.frames.size());
  if (window % 2 == 0) throw ContractError("synthesize_blur: window must be odd (no center frame)");
  if (window > n)
    throw ContractError("synthesize_blur: window " + std::to_string(window) +
                        " exceeds clip length " + std::to_string(n));
  if (stride < 1) throw ContractError("synthesize_blur: stride must be >= 1");
  if (!(gamma > 0)) throw ContractError("synthesize_blur: gamma must be positive");
  check_sequence(clip.frames, "clip");

  PairedSequence<T> out;
  const int64_t numel = clip.frames[0].numel();
  for (int s = 0; s + window <= n; s += stride) {
    Tensor<double> acc(clip.frames[0].shape());
    for (int i = 0; i < window; ++i) {
      const Tensor<T>& f = clip.frames[s + i];
      if (gamma == 1.0)
        for (int64_t j = 0; j < numel; ++j) acc[j] += static_cast<double>(f[j]);
      else
        for (int64_t j = 0; j < numel; ++j) acc[j] += std::pow(static_cast<double>(f[j]), gamma);
    }
    Tensor<T> blurry(clip.frames[0].shape());
    for (int64_t j = 0; j < numel; ++j) {
      const double mean = acc[j] / window;
      blurry[j] = static_cast<T>(gamma == 1.0 ? mean : std::pow(mean, 1.0 / gamma));
    }
    out.blurry.push_back(std::move(blurry));
    out.sharp.push_back(clip.frames[s + window / 2]);
  }
  if (out.blurry.empty()) throw ContractError("synthesize_blur: no complete windows");
  return out;
}

// ---- dataset layout ----
//
//   root/<split>/<scene>/blur/%08d.png
//   root/<split>/<scene>/gt/%08d.png
//   root/<split>/<scene>/meta.json        (optional)

inline std::string frame_name(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%08d.png", index);
  return buf;
}

template <typename T>
void write_scene(const std::string& root, const std::string& split, const std::string& scene_id,
                 const PairedSequence<T>& pair, const nlohmann::json& meta = {}) {
  namespace fs = std::filesystem;
  const fs::path dir = fs::path(root) / split / scene_id;
  fs::create_directories(dir / "blur");
  fs::create_directories(dir / "gt");
  for (size_t i = 0; i < pair.blurry.size(); ++i) {
    png::write_rgb8((dir / "blur" / frame_name(static_cast<int>(i))).string(), pair.blurry[i]);
    png::write_rgb8((dir / "gt" / frame_name(static_cast<int>(i))).string(), pair.sharp[i]);
  }
  if (!meta.is_null() && !meta.empty()) {
    std::ofstream os(dir / "meta.json");
    os << meta.dump(2) << "\n";
  }
}

namespace detail {

inline std::map<int, std::string> indexed_frames(const std::filesystem::path& dir,
                                                 const std::string& scene) {
  namespace fs = std::filesystem;
  std::map<int, std::string> out;
  if (!fs::is_directory(dir))
    throw IoError("dataset: scene '" + scene + "' is missing directory " + dir.string());
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const std::string name = entry.path().filename().string();
    if (name.size() != 12 || name.substr(8) != ".png") continue;
    out.emplace(std::stoi(name.substr(0, 8)), entry.path().string());
  }
  return out;
}

}  // namespace detail

// Loads every scene of the split; blur/gt are verified index-aligned and
// shape-consistent.
template <typename T>
std::vector<PairedSequence<T>> load_dataset(const DatasetSpec& spec) {
  namespace fs = std::filesystem;
  spec.validate();
  const fs::path split_dir = fs::path(spec.root) / spec.split;
  if (!fs::is_directory(split_dir))
    throw IoError("dataset: split directory " + split_dir.string() + " does not exist");

  std::vector<std::string> scenes;
  for (const auto& entry : fs::directory_iterator(split_dir))
    if (entry.is_directory()) scenes.push_back(entry.path().filename().string());
  std::sort(scenes.begin(), scenes.end());
  if (scenes.empty()) throw IoError("dataset: split '" + spec.split + "' is empty");

  std::vector<PairedSequence<T>> out;
  for (const std::string& scene : scenes) {
    const auto blur = detail::indexed_frames(split_dir / scene / "blur", scene);
    const auto gt = detail::indexed_frames(split_dir / scene / "gt", scene);
    if (blur.empty()) throw IoError("dataset: scene '" + scene + "' has no blur frames");
    for (const auto& [idx, path] : blur)
      if (!gt.count(idx))
        throw IoError("dataset: scene '" + scene + "' frame " + std::to_string(idx) +
                      " missing in gt");
    for (const auto& [idx, path] : gt)
      if (!blur.count(idx))
        throw IoError("dataset: scene '" + scene + "' frame " + std::to_string(idx) +
                      " missing in blur");
    int expect = 0;
    for (const auto& [idx, path] : blur) {
      if (idx != expect)
        throw IoError("dataset: scene '" + scene + "' frame indices are not contiguous (expected " +
                      std::to_string(expect) + ", found " + std::to_string(idx) + ")");
      ++expect;
    }

    PairedSequence<T> pair;
    pair.scene_id = scene;
    for (const auto& [idx, path] : blur) pair.blurry.push_back(png::read<T>(path));
    for (const auto& [idx, path] : gt) pair.sharp.push_back(png::read<T>(path));
    for (size_t i = 0; i < pair.blurry.size(); ++i)
      if (pair.blurry[i].shape() != pair.sharp[i].shape())
        throw IoError("dataset: scene '" + scene + "' frame " + std::to_string(i) +
                      " blur/gt shape mismatch: " + pair.blurry[i].shape().str() + " vs " +
                      pair.sharp[i].shape().str());
    check_sequence(pair.blurry, "blur sequence");
    out.push_back(std::move(pair));
  }
  return out;
}

// ---- training windows ----

namespace detail {

template <typename T>
Tensor<T> crop(const Tensor<T>& f, int y0, int x0, int size) {
  Tensor<T> out(Shape{f.shape()[0], size, size});
  for (int c = 0; c < f.shape()[0]; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) out.at(c, y, x) = f.at(c, y0 + y, x0 + x);
  return out;
}

template <typename T>
Tensor<T> hflip(const Tensor<T>& f) {
  Tensor<T> out(f.shape());
  const int h = f.shape()[1], w = f.shape()[2];
  for (int c = 0; c < f.shape()[0]; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = f.at(c, y, w - 1 - x);
  return out;
}

// quarter-turn counterclockwise, square frames
template <typename T>
Tensor<T> rot90(const Tensor<T>& f) {
  const int n = f.shape()[1];
  Tensor<T> out(f.shape());
  for (int c = 0; c < f.shape()[0]; ++c)
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) out.at(c, y, x) = f.at(c, x, n - 1 - y);
  return out;
}

}  // namespace detail

// seq_len consecutive frames cropped at one shared location, identically for
// blurry and sharp; augmentation is a shared horizontal flip plus quarter
// turns (square crops only).
template <typename T>
PairedSequence<T> sample_training_window(const PairedSequence<T>& pair, int seq_len, int patch,
                                         Rng& rng, bool augment = true) {
  const int n = static_cast<int>(pair.blurry.size());
  if (seq_len < 1 || seq_len > n)
    throw ContractError("sample_training_window: seq_len " + std::to_string(seq_len) +
                        " out of range for sequence of " + std::to_string(n));
  const int h = pair.blurry[0].shape()[1], w = pair.blurry[0].shape()[2];
  if (patch > std::min(h, w))
    throw ContractError("sample_training_window: patch " + std::to_string(patch) +
                        " larger than frame " + std::to_string(h) + "x" + std::to_string(w));

  const int t0 = static_cast<int>(rng.uniform_int(n - seq_len + 1));
  const int ph = patch > 0 ? patch : 0;
  int y0 = 0, x0 = 0;
  if (ph > 0) {
    y0 = static_cast<int>(rng.uniform_int(h - ph + 1));
    x0 = static_cast<int>(rng.uniform_int(w - ph + 1));
  }
  const bool flip = augment && rng.coin();
  const bool square = ph > 0 || h == w;
  const int quarter_turns = augment ? (square ? static_cast<int>(rng.uniform_int(4))
                                              : 2 * static_cast<int>(rng.uniform_int(2)))
                                    : 0;

  PairedSequence<T> out;
  out.scene_id = pair.scene_id;
  auto emit = [&](const Tensor<T>& src) {
    Tensor<T> f = ph > 0 ? detail::crop(src, y0, x0, ph) : src;
    if (flip) f = detail::hflip(f);
    for (int q = 0; q < quarter_turns; ++q)
      f = (f.shape()[1] == f.shape()[2]) ? detail::rot90(f) : f;
    if (quarter_turns == 2 && f.shape()[1] != f.shape()[2]) {
      // non-square 180 degrees: flip both axes
      f = detail::hflip(f);
      Tensor<T> v(f.shape());
      for (int c = 0; c < f.shape()[0]; ++c)
        for (int y = 0; y < f.shape()[1]; ++y)
          for (int x = 0; x < f.shape()[2]; ++x)
            v.at(c, y, x) = f.at(c, f.shape()[1] - 1 - y, x);
      f = v;
    }
    return f;
  };
  for (int t = 0; t < seq_len; ++t) {
    out.blurry.push_back(emit(pair.blurry[t0 + t]));
    out.sharp.push_back(emit(pair.sharp[t0 + t]));
  }
  return out;
}

}  // namespace mbp
