#pragma once

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbp/common.hpp"
#include "mbp/data.hpp"
#include "mbp/model.hpp"
#include "mbp/tensor.hpp"

namespace mbp {

// 10*log10(peak^2 / MSE) over all channels and pixels, inputs clamped to
// [0,1] first. Identical frames hit the documented 100 dB cap.
template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double peak = 1.0) {
  if (a.shape() != b.shape())
    throw ContractError("psnr: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  double mse = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    const double d = clamp01(static_cast<double>(a[i])) - clamp01(static_cast<double>(b[i]));
    mse += d * d;
  }
  mse /= static_cast<double>(a.numel());
  if (mse == 0) return 100.0;
  return 10.0 * std::log10(peak * peak / mse);
}

namespace detail_ssim {

constexpr int kWindow = 11;
constexpr double kSigma = 1.5;
constexpr double kK1 = 0.01, kK2 = 0.03, kL = 1.0;

inline const std::vector<double>& gaussian_taps() {
  static const std::vector<double> taps = [] {
    std::vector<double> t(kWindow);
    double sum = 0;
    for (int i = 0; i < kWindow; ++i) {
      const double d = i - (kWindow - 1) / 2.0;
      t[i] = std::exp(-d * d / (2 * kSigma * kSigma));
      sum += t[i];
    }
    for (double& v : t) v /= sum;
    return t;
  }();
  return taps;
}

// separable valid-mode gaussian filter on an HxW plane
inline std::vector<double> blur_valid(const std::vector<double>& img, int h, int w, int& oh,
                                      int& ow) {
  const auto& taps = gaussian_taps();
  ow = w - kWindow + 1;
  oh = h - kWindow + 1;
  std::vector<double> rows(static_cast<size_t>(h) * ow);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < kWindow; ++i) acc += taps[i] * img[static_cast<size_t>(y) * w + x + i];
      rows[static_cast<size_t>(y) * ow + x] = acc;
    }
  std::vector<double> out(static_cast<size_t>(oh) * ow);
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double acc = 0;
      for (int i = 0; i < kWindow; ++i) acc += taps[i] * rows[static_cast<size_t>(y + i) * ow + x];
      out[static_cast<size_t>(y) * ow + x] = acc;
    }
  return out;
}

}  // namespace detail_ssim

// Structural similarity with an 11x11 Gaussian window (sigma 1.5), K1=0.01,
// K2=0.03, dynamic range 1; computed per channel on the valid region and
// averaged over RGB.
template <typename T>
double ssim(const Tensor<T>& a, const Tensor<T>& b) {
  using namespace detail_ssim;
  if (a.shape() != b.shape())
    throw ContractError("ssim: shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  const int c = a.shape()[0], h = a.shape()[1], w = a.shape()[2];
  if (h < kWindow || w < kWindow)
    throw ContractError("ssim: frame " + a.shape().str() + " smaller than the 11x11 window; resize first");

  const double c1 = (kK1 * kL) * (kK1 * kL);
  const double c2 = (kK2 * kL) * (kK2 * kL);
  double total = 0;
  for (int ch = 0; ch < c; ++ch) {
    const int64_t hw = int64_t(h) * w;
    std::vector<double> x(hw), y(hw), xx(hw), yy(hw), xy(hw);
    for (int64_t i = 0; i < hw; ++i) {
      const double xv = clamp01(static_cast<double>(a[ch * hw + i]));
      const double yv = clamp01(static_cast<double>(b[ch * hw + i]));
      x[i] = xv;
      y[i] = yv;
      xx[i] = xv * xv;
      yy[i] = yv * yv;
      xy[i] = xv * yv;
    }
    int oh = 0, ow = 0;
    const auto mx = blur_valid(x, h, w, oh, ow);
    const auto my = blur_valid(y, h, w, oh, ow);
    const auto mxx = blur_valid(xx, h, w, oh, ow);
    const auto myy = blur_valid(yy, h, w, oh, ow);
    const auto mxy = blur_valid(xy, h, w, oh, ow);
    double acc = 0;
    for (size_t i = 0; i < mx.size(); ++i) {
      const double mu_x = mx[i], mu_y = my[i];
      const double var_x = mxx[i] - mu_x * mu_x;
      const double var_y = myy[i] - mu_y * mu_y;
      const double cov = mxy[i] - mu_x * mu_y;
      // paired terms are combined smaller-first so ssim(a,b) == ssim(b,a)
      // bitwise regardless of how the compiler fuses the arithmetic
      const double mu_sq = std::min(mu_x * mu_x, mu_y * mu_y) + std::max(mu_x * mu_x, mu_y * mu_y);
      const double var_sum = std::min(var_x, var_y) + std::max(var_x, var_y);
      acc += ((2 * mu_x * mu_y + c1) * (2 * cov + c2)) / ((mu_sq + c1) * (var_sum + c2));
    }
    total += acc / static_cast<double>(mx.size());
  }
  return total / c;
}

// ---- evaluation harness ----

struct DeviceProfile {
  int64_t tile_threshold_pixels = 1 << 20;  // frames above this run tiled
  int tile_size = 256;
  int tile_overlap = 16;
};

struct MetricsReport {
  struct SceneRow {
    std::string scene_id;
    double psnr_mean = 0;
    double ssim_mean = 0;
    int frame_count = 0;
    bool operator==(const SceneRow&) const = default;
  };
  std::vector<SceneRow> per_scene;
  double aggregate_psnr = 0;
  double aggregate_ssim = 0;
  int64_t params = 0;
  double seconds_per_frame = 0;
  std::string fingerprint;
  bool tiled = false;

  bool operator==(const MetricsReport&) const = default;
};

inline std::string config_fingerprint(const ModelConfig& cfg) {
  nlohmann::json j = cfg;
  const std::string s = j.dump() + "|ssim=gauss11x11_s1.5_rgb_mean|psnr=per_frame_cap100";
  uint64_t hash = 1469598103934665603ull;
  for (unsigned char ch : s) {
    hash ^= ch;
    hash *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
  return buf;
}

// Tiled restoration for frames too large to process whole: overlapping tiles
// with tent-weight blending across the overlap band.
template <typename T>
FrameSeq<T> infer_tiled(const Model<T>& model, const FrameSeq<T>& seq, int tile, int overlap) {
  const int h = seq[0].shape()[1], w = seq[0].shape()[2];
  const int stride = tile - overlap;
  if (stride <= 0) throw ContractError("infer_tiled: overlap must be smaller than the tile");

  FrameSeq<T> out;
  for (const auto& f : seq) out.emplace_back(f.shape());
  Tensor<double> weight(Shape{1, h, w});

  auto origins = [](int total, int tile_n, int stride_n) {
    std::vector<int> v;
    for (int p = 0;; p += stride_n) {
      if (p + tile_n >= total) {
        v.push_back(std::max(0, total - tile_n));
        break;
      }
      v.push_back(p);
    }
    return v;
  };

  for (int y0 : origins(h, tile, stride)) {
    const int y1 = std::min(h, y0 + tile);
    for (int x0 : origins(w, tile, stride)) {
      const int x1 = std::min(w, x0 + tile);
      FrameSeq<T> tile_seq;
      for (const auto& f : seq) {
        Tensor<T> t(Shape{3, y1 - y0, x1 - x0});
        for (int c = 0; c < 3; ++c)
          for (int y = y0; y < y1; ++y)
            for (int x = x0; x < x1; ++x) t.at(c, y - y0, x - x0) = f.at(c, y, x);
        int ph = 0, pw = 0;
        tile_seq.push_back(pad_reflect_to_multiple4(t, ph, pw));
      }
      FrameSeq<T> restored = model.forward(tile_seq);
      for (size_t i = 0; i < restored.size(); ++i)
        restored[i] = crop_frame(restored[i], y1 - y0, x1 - x0);

      for (int y = y0; y < y1; ++y)
        for (int x = x0; x < x1; ++x) {
          const double wy = std::min({y - y0 + 1, y1 - y, overlap + 1});
          const double wx = std::min({x - x0 + 1, x1 - x, overlap + 1});
          const double wgt = wy * wx;
          weight.at(0, y, x) += wgt;
          for (size_t i = 0; i < restored.size(); ++i)
            for (int c = 0; c < 3; ++c)
              out[i].at(c, y, x) += static_cast<T>(wgt * restored[i].at(c, y - y0, x - x0));
        }
    }
  }
  for (size_t i = 0; i < out.size(); ++i)
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) out[i].at(c, y, x) /= static_cast<T>(weight.at(0, y, x));
  return out;
}

// Runs the model over every sequence of the dataset, computing per-frame
// PSNR/SSIM against ground truth (outputs clamped first) and steady-state
// seconds per frame with the first sequence treated as warm-up.
template <typename T>
MetricsReport evaluate(const Model<T>& model, const std::vector<PairedSequence<T>>& dataset,
                       const DeviceProfile& profile = {}) {
  if (dataset.empty()) throw ContractError("evaluate: empty dataset");
  MetricsReport report;
  report.params = model.parameter_count();
  report.fingerprint = config_fingerprint(model.config());

  // timing measurements run single-threaded so seconds-per-frame is stable
  const int threads_before = num_threads();
  set_num_threads(1);

  double timed_seconds = 0;
  int64_t timed_frames = 0;
  for (size_t s = 0; s < dataset.size(); ++s) {
    const PairedSequence<T>& pair = dataset[s];
    const int h = pair.blurry[0].shape()[1], w = pair.blurry[0].shape()[2];
    const bool tiled = int64_t(h) * w > profile.tile_threshold_pixels;

    const auto t0 = std::chrono::steady_clock::now();
    FrameSeq<T> restored;
    if (tiled) {
      report.tiled = true;
      restored = infer_tiled(model, pair.blurry, profile.tile_size, profile.tile_overlap);
    } else if (h % 4 || w % 4) {
      FrameSeq<T> padded;
      int ph = 0, pw = 0;
      for (const auto& f : pair.blurry) padded.push_back(pad_reflect_to_multiple4(f, ph, pw));
      restored = model.forward(padded);
      for (auto& f : restored) f = crop_frame(f, h, w);
    } else {
      restored = model.forward(pair.blurry);
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (s > 0 || dataset.size() == 1) {
      timed_seconds += secs;
      timed_frames += static_cast<int64_t>(restored.size());
    }

    MetricsReport::SceneRow row;
    row.scene_id = pair.scene_id;
    row.frame_count = static_cast<int>(restored.size());
    for (size_t t = 0; t < restored.size(); ++t) {
      row.psnr_mean += psnr(restored[t], pair.sharp[t]);
      row.ssim_mean += ssim(restored[t], pair.sharp[t]);
    }
    row.psnr_mean /= row.frame_count;
    row.ssim_mean /= row.frame_count;
    report.per_scene.push_back(row);
  }
  set_num_threads(threads_before);

  int64_t total_frames = 0;
  for (const auto& row : report.per_scene) {
    report.aggregate_psnr += row.psnr_mean * row.frame_count;
    report.aggregate_ssim += row.ssim_mean * row.frame_count;
    total_frames += row.frame_count;
  }
  report.aggregate_psnr /= static_cast<double>(total_frames);
  report.aggregate_ssim /= static_cast<double>(total_frames);
  report.seconds_per_frame = timed_frames > 0 ? timed_seconds / timed_frames : 0;
  return report;
}

// ---- report formatting ----

namespace detail_report {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail_report

// CSV with a meta block followed by the per-scene table and the aggregate
// row; parse_report_csv inverts it exactly.
inline std::string format_report_csv(const MetricsReport& r) {
  using detail_report::fmt_double;
  std::ostringstream os;
  os << "meta,params," << r.params << "\n";
  os << "meta,seconds_per_frame," << fmt_double(r.seconds_per_frame) << "\n";
  os << "meta,fingerprint," << r.fingerprint << "\n";
  os << "meta,tiled," << (r.tiled ? 1 : 0) << "\n";
  os << "scene,psnr,ssim,frames\n";
  for (const auto& row : r.per_scene)
    os << row.scene_id << "," << fmt_double(row.psnr_mean) << "," << fmt_double(row.ssim_mean)
       << "," << row.frame_count << "\n";
  os << "aggregate," << fmt_double(r.aggregate_psnr) << "," << fmt_double(r.aggregate_ssim) << ","
     << 0 << "\n";
  return os.str();
}

inline MetricsReport parse_report_csv(const std::string& text) {
  MetricsReport r;
  std::istringstream is(text);
  std::string line;
  bool in_table = false;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::istringstream ls(line);
    std::string cell;
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (cells[0] == "meta") {
      if (cells.size() != 3) throw IoError("report: malformed meta row: " + line);
      if (cells[1] == "params") r.params = std::stoll(cells[2]);
      else if (cells[1] == "seconds_per_frame") r.seconds_per_frame = std::stod(cells[2]);
      else if (cells[1] == "fingerprint") r.fingerprint = cells[2];
      else if (cells[1] == "tiled") r.tiled = cells[2] == "1";
      else throw IoError("report: unknown meta key " + cells[1]);
    } else if (cells[0] == "scene" && !in_table) {
      in_table = true;
    } else if (cells[0] == "aggregate") {
      r.aggregate_psnr = std::stod(cells[1]);
      r.aggregate_ssim = std::stod(cells[2]);
    } else if (in_table) {
      if (cells.size() != 4) throw IoError("report: malformed scene row: " + line);
      r.per_scene.push_back({cells[0], std::stod(cells[1]), std::stod(cells[2]), std::stoi(cells[3])});
    } else {
      throw IoError("report: unexpected row: " + line);
    }
  }
  return r;
}

inline std::string format_report_text(const MetricsReport& r) {
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-20s %10s %8s %7s\n", "scene", "PSNR", "SSIM", "frames");
  os << buf;
  for (const auto& row : r.per_scene) {
    std::snprintf(buf, sizeof(buf), "%-20s %10.3f %8.4f %7d\n", row.scene_id.c_str(),
                  row.psnr_mean, row.ssim_mean, row.frame_count);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-20s %10.3f %8.4f\n", "aggregate", r.aggregate_psnr,
                r.aggregate_ssim);
  os << buf;
  std::snprintf(buf, sizeof(buf), "params %lld, %.4f s/frame%s\n",
                static_cast<long long>(r.params), r.seconds_per_frame,
                r.tiled ? ", tiled inference" : "");
  os << buf;
  return os.str();
}

inline void to_json(nlohmann::json& j, const MetricsReport::SceneRow& row) {
  j = nlohmann::json{{"scene_id", row.scene_id},
                     {"psnr_mean", row.psnr_mean},
                     {"ssim_mean", row.ssim_mean},
                     {"frame_count", row.frame_count}};
}

inline void from_json(const nlohmann::json& j, MetricsReport::SceneRow& row) {
  row.scene_id = j.at("scene_id").get<std::string>();
  row.psnr_mean = j.at("psnr_mean").get<double>();
  row.ssim_mean = j.at("ssim_mean").get<double>();
  row.frame_count = j.at("frame_count").get<int>();
}

inline void to_json(nlohmann::json& j, const MetricsReport& r) {
  j = nlohmann::json{{"per_scene", r.per_scene},
                     {"aggregate", {{"psnr", r.aggregate_psnr}, {"ssim", r.aggregate_ssim}}},
                     {"params", r.params},
                     {"seconds_per_frame", r.seconds_per_frame},
                     {"fingerprint", r.fingerprint},
                     {"tiled", r.tiled}};
}

inline void from_json(const nlohmann::json& j, MetricsReport& r) {
  r.per_scene = j.at("per_scene").get<std::vector<MetricsReport::SceneRow>>();
  r.aggregate_psnr = j.at("aggregate").at("psnr").get<double>();
  r.aggregate_ssim = j.at("aggregate").at("ssim").get<double>();
  r.params = j.at("params").get<int64_t>();
  r.seconds_per_frame = j.at("seconds_per_frame").get<double>();
  r.fingerprint = j.at("fingerprint").get<std::string>();
  r.tiled = j.at("tiled").get<bool>();
}

inline void write_report_files(const std::string& dir, const MetricsReport& r) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  {
    std::ofstream os(fs::path(dir) / "report.csv");
    os << format_report_csv(r);
  }
  {
    std::ofstream os(fs::path(dir) / "report.json");
    nlohmann::json j = r;
    os << j.dump(2) << "\n";
  }
}

// Side-by-side table for several labelled runs, sorted by PSNR descending.
inline std::string format_comparison(std::vector<std::pair<std::string, MetricsReport>> rows) {
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.second.aggregate_psnr > b.second.aggregate_psnr;
  });
  std::ostringstream os;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-24s %10s %8s %12s %12s\n", "model", "PSNR", "SSIM", "params",
                "s/frame");
  os << buf;
  for (const auto& [label, r] : rows) {
    std::snprintf(buf, sizeof(buf), "%-24s %10.3f %8.4f %12lld %12.4f\n", label.c_str(),
                  r.aggregate_psnr, r.aggregate_ssim, static_cast<long long>(r.params),
                  r.seconds_per_frame);
    os << buf;
  }
  return os.str();
}

}  // namespace mbp
