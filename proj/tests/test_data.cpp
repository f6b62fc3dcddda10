#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "mbp/data.hpp"
#include "mbp/image_io.hpp"
#include "mbp/rng.hpp"

using mbp::FrameSeq;
using mbp::Rng;
using mbp::Shape;
using mbp::SharpHighFpsClip;
using mbp::Tensor;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  auto p = fs::temp_directory_path() / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

template <typename T>
bool bitwise_equal(const Tensor<T>& a, const Tensor<T>& b) {
  return a.shape() == b.shape() && std::memcmp(a.data(), b.data(), sizeof(T) * a.numel()) == 0;
}

Tensor<float> constant_frame(int h, int w, float v) { return Tensor<float>(Shape{3, h, w}, v); }

}  // namespace

TEST_CASE("png: quantized round-trip within 1/255") {
  Rng rng(5);
  Tensor<float> frame(Shape{3, 12, 20});
  for (int64_t i = 0; i < frame.numel(); ++i) frame[i] = static_cast<float>(rng.uniform());
  const auto dir = fresh_dir("mbp_png_test");
  mbp::png::write_rgb8((dir / "f.png").string(), frame);
  Tensor<float> back = mbp::png::read<float>((dir / "f.png").string());
  REQUIRE(back.shape() == frame.shape());
  for (int64_t i = 0; i < frame.numel(); ++i)
    CHECK(std::fabs(back[i] - frame[i]) <= 0.5f / 255.0f + 1e-6f);
  // already-quantized values survive exactly
  mbp::png::write_rgb8((dir / "g.png").string(), back);
  Tensor<float> again = mbp::png::read<float>((dir / "g.png").string());
  CHECK(bitwise_equal(back, again));
  CHECK_THROWS_AS(mbp::png::read<float>((dir / "missing.png").string()), mbp::IoError);
}

TEST_CASE("synthesize_blur: identity, window validation, gamma arithmetic") {
  // static clip: blurry equals sharp exactly
  {
    SharpHighFpsClip<float> clip;
    for (int i = 0; i < 9; ++i) clip.frames.push_back(constant_frame(8, 8, 0.37f));
    auto pair = mbp::synthesize_blur(clip, 7, 7, 1.0);
    REQUIRE(pair.blurry.size() == 1);
    CHECK(bitwise_equal(pair.blurry[0], pair.sharp[0]));
  }

  // validation
  {
    SharpHighFpsClip<float> clip;
    for (int i = 0; i < 5; ++i) clip.frames.push_back(constant_frame(8, 8, 0.1f));
    CHECK_THROWS_AS(mbp::synthesize_blur(clip, 2, 1, 1.0), mbp::ContractError);
    CHECK_THROWS_AS(mbp::synthesize_blur(clip, 7, 1, 1.0), mbp::ContractError);
    CHECK_THROWS_AS(mbp::synthesize_blur(clip, 3, 1, -1.0), mbp::ContractError);
  }

  // values {0,1,0}, window 3, gamma 2.2: linear mean 1/3 re-encoded
  {
    SharpHighFpsClip<double> clip;
    clip.frames.push_back(Tensor<double>(Shape{3, 4, 4}, 0.0));
    clip.frames.push_back(Tensor<double>(Shape{3, 4, 4}, 1.0));
    clip.frames.push_back(Tensor<double>(Shape{3, 4, 4}, 0.0));
    auto pair = mbp::synthesize_blur(clip, 3, 1, 2.2);
    const double want = std::pow(1.0 / 3.0, 1.0 / 2.2);  // = 0.6069...
    CHECK(pair.blurry[0][0] == doctest::Approx(want).epsilon(1e-12));
    CHECK(pair.blurry[0][0] == doctest::Approx(0.6069).epsilon(1e-3));
    CHECK(pair.sharp[0][0] == 1.0);  // center frame
  }

  // gamma=1 equals the direct summation oracle bit-exactly
  {
    Rng rng(11);
    SharpHighFpsClip<float> clip;
    for (int i = 0; i < 7; ++i) {
      Tensor<float> f(Shape{3, 8, 8});
      for (int64_t j = 0; j < f.numel(); ++j) f[j] = static_cast<float>(rng.uniform());
      clip.frames.push_back(f);
    }
    auto pair = mbp::synthesize_blur(clip, 5, 2, 1.0);
    REQUIRE(pair.blurry.size() == 2);
    for (size_t wdx = 0; wdx < pair.blurry.size(); ++wdx) {
      const int s = static_cast<int>(wdx) * 2;
      for (int64_t j = 0; j < pair.blurry[wdx].numel(); ++j) {
        double acc = 0;
        for (int i = 0; i < 5; ++i) acc += static_cast<double>(clip.frames[s + i][j]);
        CHECK(pair.blurry[wdx][j] == static_cast<float>(acc / 5));
      }
      CHECK(bitwise_equal(pair.sharp[wdx], clip.frames[s + 2]));
    }
  }
}

TEST_CASE("gamma=1 averaging commutes with pixelwise affine rescaling") {
  Rng rng(29);
  SharpHighFpsClip<double> clip;
  for (int i = 0; i < 5; ++i) {
    Tensor<double> f(Shape{3, 6, 6});
    for (int64_t j = 0; j < f.numel(); ++j) f[j] = rng.uniform();
    clip.frames.push_back(f);
  }
  const double a = 0.5, b = 0.2;
  SharpHighFpsClip<double> scaled = clip;
  for (auto& f : scaled.frames)
    for (int64_t j = 0; j < f.numel(); ++j) f[j] = a * f[j] + b;

  auto blur_then_scale = mbp::synthesize_blur(clip, 5, 5, 1.0);
  auto scale_then_blur = mbp::synthesize_blur(scaled, 5, 5, 1.0);
  for (int64_t j = 0; j < blur_then_scale.blurry[0].numel(); ++j)
    CHECK(scale_then_blur.blurry[0][j] ==
          doctest::Approx(a * blur_then_scale.blurry[0][j] + b).epsilon(1e-12));
}

TEST_CASE("toy scenes: determinism, static case, value range") {
  auto a = mbp::generate_toy_scene<float>(42, 6, 24, 32, 1.5);
  auto b = mbp::generate_toy_scene<float>(42, 6, 24, 32, 1.5);
  REQUIRE(a.frames.size() == 6);
  for (int i = 0; i < 6; ++i) CHECK(bitwise_equal(a.frames[i], b.frames[i]));

  auto c = mbp::generate_toy_scene<float>(42, 6, 24, 32, 0.0);
  for (int i = 1; i < 6; ++i) CHECK(bitwise_equal(c.frames[i], c.frames[0]));

  bool in_range = true;
  for (const auto& f : a.frames)
    for (int64_t i = 0; i < f.numel(); ++i)
      if (f[i] < 0.0f || f[i] > 1.0f) in_range = false;
  CHECK(in_range);

  CHECK_THROWS_AS(mbp::generate_toy_scene<float>(1, 3, 10, 8, 1.0), mbp::ContractError);
}

TEST_CASE("edge spread after averaging matches the analytic width") {
  // One rectangle whose right edge starts at x=32, moving +2 px/frame on a
  // flat background. Averaging 9 frames should smear the step over
  // (M-1)*motion plus the 1 px anti-aliasing ramp.
  mbp::ToyScene scene;
  scene.height = 32;
  scene.width = 96;
  for (int c = 0; c < 3; ++c) {
    scene.bg_base[c] = 0;
    scene.bg_gx[c] = 0;
    scene.bg_gy[c] = 0;
  }
  mbp::SceneObject rect;
  rect.kind = mbp::SceneObject::Kind::kRect;
  rect.cx = 16;
  rect.cy = 16;
  rect.half_w = 16;
  rect.half_h = 14;
  rect.vx = 2.0;
  rect.vy = 0.0;
  rect.color[0] = rect.color[1] = rect.color[2] = 1.0;
  scene.objects.push_back(rect);

  SharpHighFpsClip<double> clip;
  const int m = 9;
  for (int t = 0; t < m; ++t) clip.frames.push_back(mbp::render_scene_frame<double>(scene, t));
  auto pair = mbp::synthesize_blur(clip, m, m, 1.0);

  // measure the transition width across the trailing (right) edge; the
  // leading edge lives in x < 20 and is excluded
  const Tensor<double>& blurry = pair.blurry[0];
  const int row = 16;
  double lo = 1, hi = 0;
  for (int x = 24; x < 96; ++x) {
    lo = std::min(lo, blurry.at(0, row, x));
    hi = std::max(hi, blurry.at(0, row, x));
  }
  int transition = 0;
  for (int x = 24; x < 96; ++x) {
    const double v = blurry.at(0, row, x);
    if (v > lo + 0.01 * (hi - lo) && v < hi - 0.01 * (hi - lo)) ++transition;
  }
  const double expected = (m - 1) * rect.vx;  // 16 px of smear
  CHECK(std::fabs(transition - expected) <= 2.0);
}

TEST_CASE("dataset layout: round-trip and malformed fixtures") {
  const auto root = fresh_dir("mbp_dataset_test");
  Rng rng(7);

  // two well-formed scenes
  for (int s = 0; s < 2; ++s) {
    mbp::PairedSequence<float> pair;
    for (int i = 0; i < 4; ++i) {
      Tensor<float> f(Shape{3, 8, 12});
      for (int64_t j = 0; j < f.numel(); ++j) f[j] = static_cast<float>(rng.uniform());
      pair.blurry.push_back(f);
      for (int64_t j = 0; j < f.numel(); ++j) f[j] = static_cast<float>(rng.uniform());
      pair.sharp.push_back(f);
    }
    mbp::write_scene(root.string(), "train", "scene_" + std::to_string(s), pair,
                     nlohmann::json{{"fps", 240}});
  }

  mbp::DatasetSpec spec;
  spec.root = root.string();
  spec.split = "train";
  auto ds = mbp::load_dataset<float>(spec);
  REQUIRE(ds.size() == 2);
  CHECK(ds[0].scene_id == "scene_0");
  CHECK(ds[0].blurry.size() == 4);
  CHECK(ds[0].sharp.size() == 4);

  // decoded values match the written ones within quantization
  {
    mbp::PairedSequence<float> pair;
    Tensor<float> f(Shape{3, 8, 8});
    for (int64_t j = 0; j < f.numel(); ++j) f[j] = static_cast<float>(rng.uniform());
    pair.blurry.push_back(f);
    pair.sharp.push_back(f);
    mbp::write_scene(root.string(), "test", "probe", pair);
    mbp::DatasetSpec tspec;
    tspec.root = root.string();
    tspec.split = "test";
    auto td = mbp::load_dataset<float>(tspec);
    for (int64_t j = 0; j < f.numel(); ++j)
      CHECK(std::fabs(td[0].blurry[0][j] - f[j]) <= 0.5f / 255.0f + 1e-6f);
  }

  // missing gt frame
  {
    fs::remove(root / "train" / "scene_1" / "gt" / "00000003.png");
    CHECK_THROWS_WITH_AS(mbp::load_dataset<float>(spec),
                         doctest::Contains("frame 3 missing in gt"), mbp::IoError);
    // restore for the next cases
    mbp::png::write_rgb8((root / "train" / "scene_1" / "gt" / "00000003.png").string(),
                         constant_frame(8, 12, 0.5f));
  }

  // shape mismatch between blur and gt
  {
    mbp::png::write_rgb8((root / "train" / "scene_1" / "gt" / "00000002.png").string(),
                         constant_frame(8, 16, 0.5f));
    CHECK_THROWS_WITH_AS(mbp::load_dataset<float>(spec), doctest::Contains("shape mismatch"),
                         mbp::IoError);
    mbp::png::write_rgb8((root / "train" / "scene_1" / "gt" / "00000002.png").string(),
                         constant_frame(8, 12, 0.5f));
  }

  // non-contiguous indices
  {
    fs::rename(root / "train" / "scene_1" / "blur" / "00000003.png",
               root / "train" / "scene_1" / "blur" / "00000007.png");
    fs::rename(root / "train" / "scene_1" / "gt" / "00000003.png",
               root / "train" / "scene_1" / "gt" / "00000007.png");
    CHECK_THROWS_WITH_AS(mbp::load_dataset<float>(spec), doctest::Contains("not contiguous"),
                         mbp::IoError);
  }

  // empty split
  {
    mbp::DatasetSpec espec;
    espec.root = root.string();
    espec.split = "test";
    fs::remove_all(root / "test");
    CHECK_THROWS_AS(mbp::load_dataset<float>(espec), mbp::IoError);
  }

  CHECK_THROWS_AS(([&] {
                    mbp::DatasetSpec bad;
                    bad.root = root.string();
                    bad.split = "validation";
                    bad.validate();
                  })(),
                  mbp::ConfigError);
}

TEST_CASE("training windows: identity, determinism, coverage, pairing") {
  Rng rng(13);
  mbp::PairedSequence<float> pair;
  pair.scene_id = "fixture";
  const int n = 6, h = 12, w = 12;
  // coordinate-encoding frames: value identifies (t, y, x); sharp = blurry + 0.25
  for (int t = 0; t < n; ++t) {
    Tensor<float> f(Shape{3, h, w});
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
          f.at(c, y, x) = (t * 1000.0f + y * 16.0f + x) / 16384.0f;
    pair.blurry.push_back(f);
    Tensor<float> g = f;
    for (int64_t i = 0; i < g.numel(); ++i) g[i] += 0.25f;
    pair.sharp.push_back(g);
  }

  // identity sample
  {
    Rng r2(1);
    auto s = mbp::sample_training_window(pair, n, 0, r2, false);
    for (int t = 0; t < n; ++t) CHECK(bitwise_equal(s.blurry[t], pair.blurry[t]));
  }

  // reproducible with equal generator state
  {
    Rng r2(99), r3(99);
    auto a = mbp::sample_training_window(pair, 3, 8, r2);
    auto b = mbp::sample_training_window(pair, 3, 8, r3);
    for (int t = 0; t < 3; ++t) CHECK(bitwise_equal(a.blurry[t], b.blurry[t]));
  }

  // blurry/sharp crops always share coordinates, including under augmentation
  {
    Rng r2(5);
    for (int trial = 0; trial < 50; ++trial) {
      auto s = mbp::sample_training_window(pair, 2, 8, r2, true);
      for (int t = 0; t < 2; ++t)
        for (int64_t i = 0; i < s.blurry[t].numel(); ++i)
          CHECK(s.sharp[t][i] - s.blurry[t][i] == doctest::Approx(0.25f).epsilon(1e-6));
    }
  }

  // crop origins cover all offsets roughly uniformly (patch 8 on 12x12: 5x5)
  {
    Rng r2(17);
    const int bins = 5 * 5;
    std::vector<int> counts(bins, 0);
    for (int trial = 0; trial < 1000; ++trial) {
      auto s = mbp::sample_training_window(pair, 1, 8, r2, false);
      // recover the origin from the encoded pixel value
      const float v = s.blurry[0].at(0, 0, 0) * 16384.0f;
      const int t = static_cast<int>(v / 1000.0f + 0.5f) % 1000;
      const float rem = v - t * 1000.0f;
      const int y0 = static_cast<int>(rem / 16.0f);
      const int x0 = static_cast<int>(rem - y0 * 16.0f + 0.5f);
      REQUIRE(y0 >= 0);
      REQUIRE(y0 < 5);
      REQUIRE(x0 >= 0);
      REQUIRE(x0 < 5);
      ++counts[y0 * 5 + x0];
    }
    double chi2 = 0;
    const double expect = 1000.0 / bins;
    for (int i = 0; i < bins; ++i) {
      CHECK(counts[i] > 0);
      chi2 += (counts[i] - expect) * (counts[i] - expect) / expect;
    }
    CHECK(chi2 < 60.0);  // 24 dof, far beyond the 0.999 quantile
  }

  // errors
  {
    Rng r2(1);
    CHECK_THROWS_AS(mbp::sample_training_window(pair, 7, 0, r2), mbp::ContractError);
    CHECK_THROWS_AS(mbp::sample_training_window(pair, 2, 13, r2), mbp::ContractError);
  }
}
