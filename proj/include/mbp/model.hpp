#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "mbp/graph.hpp"
#include "mbp/kernels.hpp"
#include "mbp/params.hpp"
#include "mbp/rng.hpp"
#include "mbp/tensor.hpp"

namespace mbp {

// Architecture variants: a single-scale recurrent baseline, the same baseline
// with the multi-scale bidirectional cells (MBP), and the full model with the
// target-frame reconstructor on top.
enum class Variant { kBaseline, kBaselineMbp, kRnnMbp };

enum class DownsampleMode { kStridedConv, kBilinear };

inline std::string to_string(Variant v) {
  switch (v) {
    case Variant::kBaseline: return "baseline";
    case Variant::kBaselineMbp: return "baseline_mbp";
    case Variant::kRnnMbp: return "rnn_mbp";
  }
  return "?";
}

inline Variant variant_from_string(const std::string& s) {
  if (s == "baseline") return Variant::kBaseline;
  if (s == "baseline_mbp") return Variant::kBaselineMbp;
  if (s == "rnn_mbp") return Variant::kRnnMbp;
  throw ConfigError("unknown variant '" + s + "' (expected baseline, baseline_mbp or rnn_mbp)");
}

struct ModelConfig {
  int base_channels = 64;
  int cab_reduction = 16;
  int phi_cab_count = 2;  // CABs per encoder/decoder stage
  int psi_cab_count = 8;  // CABs per reconstructor level
  Variant variant = Variant::kRnnMbp;
  DownsampleMode downsample = DownsampleMode::kStridedConv;
  // Pairs the reconstructor's mid-level encoder gather with the backward
  // decoder state instead of the backward encoder state (the asymmetric
  // wiring); off by default.
  bool tfr_mid_pair_decoder = false;

  void validate() const {
    if (base_channels < 1) throw ConfigError("base_channels must be positive");
    if (cab_reduction < 1) throw ConfigError("cab_reduction must be positive");
    if (base_channels % cab_reduction != 0)
      throw ConfigError("base_channels (" + std::to_string(base_channels) +
                        ") must be divisible by cab_reduction (" + std::to_string(cab_reduction) + ")");
    if (phi_cab_count < 1 || psi_cab_count < 1)
      throw ConfigError("CAB counts must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"base_channels", c.base_channels},
                     {"cab_reduction", c.cab_reduction},
                     {"phi_cab_count", c.phi_cab_count},
                     {"psi_cab_count", c.psi_cab_count},
                     {"variant", to_string(c.variant)},
                     {"downsample", c.downsample == DownsampleMode::kStridedConv ? "strided_conv" : "bilinear"},
                     {"tfr_mid_pair_decoder", c.tfr_mid_pair_decoder}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  c.base_channels = j.at("base_channels").get<int>();
  c.cab_reduction = j.at("cab_reduction").get<int>();
  c.phi_cab_count = j.at("phi_cab_count").get<int>();
  c.psi_cab_count = j.at("psi_cab_count").get<int>();
  c.variant = variant_from_string(j.at("variant").get<std::string>());
  const std::string ds = j.at("downsample").get<std::string>();
  if (ds == "strided_conv")
    c.downsample = DownsampleMode::kStridedConv;
  else if (ds == "bilinear")
    c.downsample = DownsampleMode::kBilinear;
  else
    throw ConfigError("unknown downsample mode '" + ds + "'");
  c.tfr_mid_pair_decoder = j.value("tfr_mid_pair_decoder", false);
}

// The six multi-scale states carried between recurrent steps in one temporal
// direction: three encoder levels and three decoder levels.
template <typename T>
struct HiddenStateSet {
  Tensor<T> e1, e2, e3, d3, d2, d1;
};

// ---- parameter layout ----
//
// Conv parameters are named "<prefix>.weight"/"<prefix>.bias" with weight
// shape OxCxKxK. A CAB under <prefix> owns conv1, conv2 (3x3) and the gating
// bottleneck fc1 (C -> C/r) and fc2 (C/r -> C), stored as 1x1 convolutions.
//
//   extractor.conv, extractor.cab0.*
//   {forward_cell,backward_cell}.
//     enc1.phi.cab<i>.*   enc1.gather_enc  enc1.gather_dec
//     enc2.down           enc2.phi.cab<i>.*  enc2.gather_enc  enc2.gather_dec
//     enc3.down           enc3.phi.cab<i>.*  enc3.gather_enc  enc3.gather_dec
//     dec3.phi.cab<i>.*
//     dec2.up             dec2.phi_up.cab<i>.*  dec2.phi_skip.cab<i>.*
//     dec1.up             dec1.phi_up.cab<i>.*  dec1.phi_skip.cab<i>.*
//   tfr.level1.psi.cab<i>.*  tfr.level1.gather_enc      tfr.level1.gather_dec
//   tfr.level2.psi.cab<i>.*  tfr.level2.gather_enc(+_up0)  tfr.level2.gather_dec(+_up0)
//   tfr.level3.psi.cab<i>.*  tfr.level3.gather_enc(+_up0,_up1)  ...
//   tfr.out  (5x5, C -> 3)
//
// Baseline cells replace the six-state machinery with
//   {forward_cell,backward_cell}.merge (3x3, 2C -> C) and .cab0/.cab1,
// and both baseline variants reconstruct through recon.conv0 (3C -> C),
// recon.conv1 (C -> C) and recon.out (5x5, C -> 3).

template <typename Fn>
void enumerate_conv(Fn&& fn, const std::string& prefix, int cout, int cin, int k) {
  fn(prefix + ".weight", Shape{cout, cin, k, k});
  fn(prefix + ".bias", Shape{cout});
}

template <typename Fn>
void enumerate_cab(Fn&& fn, const std::string& prefix, int c, int r) {
  enumerate_conv(fn, prefix + ".conv1", c, c, 3);
  enumerate_conv(fn, prefix + ".conv2", c, c, 3);
  enumerate_conv(fn, prefix + ".fc1", c / r, c, 1);
  enumerate_conv(fn, prefix + ".fc2", c, c / r, 1);
}

template <typename Fn>
void enumerate_cab_chain(Fn&& fn, const std::string& prefix, int count, int c, int r) {
  for (int i = 0; i < count; ++i) enumerate_cab(fn, prefix + ".cab" + std::to_string(i), c, r);
}

template <typename Fn>
void enumerate_parameters(const ModelConfig& cfg, Fn&& fn) {
  cfg.validate();
  const int c = cfg.base_channels, r = cfg.cab_reduction;

  enumerate_conv(fn, "extractor.conv", c, 3, 3);
  enumerate_cab(fn, "extractor.cab0", c, r);

  for (const char* dir : {"forward_cell", "backward_cell"}) {
    const std::string d(dir);
    if (cfg.variant == Variant::kBaseline) {
      enumerate_conv(fn, d + ".merge", c, 2 * c, 3);
      enumerate_cab_chain(fn, d, cfg.phi_cab_count, c, r);
      continue;
    }
    enumerate_cab_chain(fn, d + ".enc1.phi", cfg.phi_cab_count, c, r);
    enumerate_conv(fn, d + ".enc1.gather_enc", c, c, 3);
    enumerate_conv(fn, d + ".enc1.gather_dec", c, c, 3);
    for (int lvl = 2; lvl <= 3; ++lvl) {
      const std::string e = d + ".enc" + std::to_string(lvl);
      enumerate_conv(fn, e + ".down", c, c, 3);
      enumerate_cab_chain(fn, e + ".phi", cfg.phi_cab_count, c, r);
      enumerate_conv(fn, e + ".gather_enc", c, c, 3);
      enumerate_conv(fn, e + ".gather_dec", c, c, 3);
    }
    enumerate_cab_chain(fn, d + ".dec3.phi", cfg.phi_cab_count, c, r);
    for (int lvl = 2; lvl >= 1; --lvl) {
      const std::string de = d + ".dec" + std::to_string(lvl);
      enumerate_conv(fn, de + ".up", c, c, 3);
      enumerate_cab_chain(fn, de + ".phi_up", cfg.phi_cab_count, c, r);
      enumerate_cab_chain(fn, de + ".phi_skip", cfg.phi_cab_count, c, r);
    }
  }

  if (cfg.variant == Variant::kRnnMbp) {
    for (int lvl = 1; lvl <= 3; ++lvl) {
      const std::string l = "tfr.level" + std::to_string(lvl);
      enumerate_cab_chain(fn, l + ".psi", cfg.psi_cab_count, c, r);
      for (const char* side : {"gather_enc", "gather_dec"}) {
        enumerate_conv(fn, l + "." + side, c, c, 3);
        for (int u = 0; u < lvl - 1; ++u)
          enumerate_conv(fn, l + "." + side + "_up" + std::to_string(u), c, c, 3);
      }
    }
    enumerate_conv(fn, "tfr.out", 3, c, 5);
  } else {
    enumerate_conv(fn, "recon.conv0", c, 3 * c, 3);
    enumerate_conv(fn, "recon.conv1", c, c, 3);
    enumerate_conv(fn, "recon.out", 3, c, 5);
  }
}

// Exact learnable-scalar count implied by the configuration, computed from
// shapes alone.
inline int64_t count_parameters(const ModelConfig& cfg) {
  int64_t total = 0;
  enumerate_parameters(cfg, [&](const std::string&, Shape s) { total += s.numel(); });
  return total;
}

enum class InitMode {
  kStandard,   // fan-in scaled uniform weights, zero biases, zero final conv
  kRandomAll,  // everything randomized (gradient checks)
};

template <typename T>
void init_parameters(ParameterStore<T>& store, uint64_t seed, InitMode mode) {
  Rng rng(seed);
  for (const auto& name : store.names()) {
    Tensor<T>& t = store.at(name);
    const bool is_final = name.rfind("tfr.out.", 0) == 0 || name.rfind("recon.out.", 0) == 0;
    const bool is_bias = t.shape().rank == 1;
    if (mode == InitMode::kStandard && is_final) {
      t.set_zero();
      continue;
    }
    if (is_bias) {
      // randomized mode leans biases positive so no ReLU unit starts dead;
      // verification passes want every gradient path active
      if (mode == InitMode::kRandomAll)
        for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(0.02, 0.12));
      else
        t.set_zero();
      continue;
    }
    const int fan_in = t.shape()[1] * t.shape()[2] * t.shape()[3];
    const double bound = std::sqrt(1.0 / fan_in);
    for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
  }
}

// ---- graph builders ----

// Binds store parameters into a graph as shared leaves (one leaf per name, so
// gradients accumulate across time steps) and collects grads back afterwards.
template <typename T>
struct ParamBinder {
  Graph<T>& g;
  ParameterStore<T>& store;
  bool train = true;
  std::unordered_map<std::string, typename Graph<T>::NodeId> bound;

  typename Graph<T>::NodeId operator()(const std::string& name) {
    auto it = bound.find(name);
    if (it != bound.end()) return it->second;
    auto id = g.leaf(store.at(name), train);
    bound.emplace(name, id);
    return id;
  }

  // Accumulates graph gradients into the store's grad buffers.
  void collect_grads() {
    for (const auto& [name, id] : bound) {
      const Tensor<T>& gsrc = g.grad(id);
      if (gsrc.empty()) continue;
      Tensor<T>& dst = store.grad(name);
      for (int64_t i = 0; i < dst.numel(); ++i) dst[i] += gsrc[i];
    }
  }
};

namespace build {

template <typename T>
using NodeId = typename Graph<T>::NodeId;

template <typename T>
struct StateIds {
  NodeId<T> e1, e2, e3, d3, d2, d1;
};

template <typename T>
NodeId<T> conv(Graph<T>& g, ParamBinder<T>& p, NodeId<T> x, const std::string& prefix, int stride,
               int pad) {
  return g.conv2d(x, p(prefix + ".weight"), p(prefix + ".bias"), stride, pad);
}

template <typename T>
NodeId<T> conv3(Graph<T>& g, ParamBinder<T>& p, NodeId<T> x, const std::string& prefix) {
  return conv(g, p, x, prefix, 1, 1);
}

// Channel-attention residual block: conv-relu-conv branch, gated per channel
// by a sigmoid bottleneck over the branch's spatial mean.
template <typename T>
NodeId<T> cab(Graph<T>& g, ParamBinder<T>& p, NodeId<T> x, const std::string& prefix) {
  auto branch = conv3(g, p, g.relu(conv3(g, p, x, prefix + ".conv1")), prefix + ".conv2");
  auto squeeze = g.relu(conv(g, p, g.global_avg_pool(branch), prefix + ".fc1", 1, 0));
  auto gate = g.sigmoid(conv(g, p, squeeze, prefix + ".fc2", 1, 0));
  return g.add(x, g.mul_channels(branch, gate));
}

template <typename T>
NodeId<T> cab_chain(Graph<T>& g, ParamBinder<T>& p, NodeId<T> x, const std::string& prefix,
                    int count) {
  for (int i = 0; i < count; ++i) x = cab(g, p, x, prefix + ".cab" + std::to_string(i));
  return x;
}

template <typename T>
NodeId<T> extract_features(Graph<T>& g, ParamBinder<T>& p, NodeId<T> frame,
                           const ModelConfig& cfg) {
  return cab(g, p, conv3(g, p, frame, "extractor.conv"), "extractor.cab0");
}

template <typename T>
NodeId<T> downsample2(Graph<T>& g, ParamBinder<T>& p, NodeId<T> x, const std::string& prefix,
                      const ModelConfig& cfg) {
  if (cfg.downsample == DownsampleMode::kStridedConv) return conv(g, p, x, prefix, 2, 1);
  return conv3(g, p, g.avg_pool2(x), prefix);
}

template <typename T>
NodeId<T> upsample2(Graph<T>& g, ParamBinder<T>& p, NodeId<T> x, const std::string& prefix) {
  return conv3(g, p, g.bilinear_up2(x), prefix);
}

template <typename T>
StateIds<T> zero_state(Graph<T>& g, int c, int h, int w) {
  StateIds<T> s;
  s.e1 = g.zeros(Shape{c, h, w});
  s.e2 = g.zeros(Shape{c, h / 2, w / 2});
  s.e3 = g.zeros(Shape{c, h / 4, w / 4});
  s.d3 = g.zeros(Shape{c, h / 4, w / 4});
  s.d2 = g.zeros(Shape{c, h / 2, w / 2});
  s.d1 = g.zeros(Shape{c, h, w});
  return s;
}

// One recurrent step of a U-Net cell: the encoder gathers the previous
// multi-scale states level by level, the decoder upsamples back with
// skip-connections from the encoder levels.
template <typename T>
StateIds<T> cell_step(Graph<T>& g, ParamBinder<T>& p, NodeId<T> phi, const StateIds<T>& prev,
                      const std::string& dir, const ModelConfig& cfg) {
  const Shape ps = g.value(phi).shape();  // copy: pushing nodes may reallocate
  const int h = ps[1], w = ps[2];
  const Shape want_e2{ps[0], h / 2, w / 2};
  if (g.value(prev.e1).shape() != ps || g.value(prev.d1).shape() != ps ||
      g.value(prev.e2).shape() != want_e2)
    throw ContractError("cell_step: previous state scales do not match features of shape " + ps.str());
  const int n = cfg.phi_cab_count;

  StateIds<T> s;
  s.e1 = g.add(cab_chain(g, p, phi, dir + ".enc1.phi", n),
               conv3(g, p, prev.e1, dir + ".enc1.gather_enc"),
               conv3(g, p, prev.d1, dir + ".enc1.gather_dec"));
  auto e1d = downsample2(g, p, s.e1, dir + ".enc2.down", cfg);
  s.e2 = g.add(cab_chain(g, p, e1d, dir + ".enc2.phi", n),
               conv3(g, p, prev.e2, dir + ".enc2.gather_enc"),
               conv3(g, p, prev.d2, dir + ".enc2.gather_dec"));
  auto e2d = downsample2(g, p, s.e2, dir + ".enc3.down", cfg);
  s.e3 = g.add(cab_chain(g, p, e2d, dir + ".enc3.phi", n),
               conv3(g, p, prev.e3, dir + ".enc3.gather_enc"),
               conv3(g, p, prev.d3, dir + ".enc3.gather_dec"));
  s.d3 = cab_chain(g, p, s.e3, dir + ".dec3.phi", n);
  auto d3u = upsample2(g, p, s.d3, dir + ".dec2.up");
  s.d2 = g.add(cab_chain(g, p, d3u, dir + ".dec2.phi_up", n),
               cab_chain(g, p, s.e2, dir + ".dec2.phi_skip", n));
  auto d2u = upsample2(g, p, s.d2, dir + ".dec1.up");
  s.d1 = g.add(cab_chain(g, p, d2u, dir + ".dec1.phi_up", n),
               cab_chain(g, p, s.e1, dir + ".dec1.phi_skip", n));
  return s;
}

template <typename T>
std::vector<StateIds<T>> propagate_forward(Graph<T>& g, ParamBinder<T>& p,
                                           const std::vector<NodeId<T>>& phis,
                                           const ModelConfig& cfg) {
  if (phis.empty()) throw ContractError("propagate_forward: empty feature list");
  const Shape s = g.value(phis[0]).shape();
  std::vector<StateIds<T>> out;
  out.reserve(phis.size());
  StateIds<T> prev = zero_state<T>(g, s[0], s[1], s[2]);
  for (auto phi : phis) {
    prev = cell_step(g, p, phi, prev, "forward_cell", cfg);
    out.push_back(prev);
  }
  return out;
}

template <typename T>
std::vector<StateIds<T>> propagate_backward(Graph<T>& g, ParamBinder<T>& p,
                                            const std::vector<NodeId<T>>& phis,
                                            const ModelConfig& cfg) {
  if (phis.empty()) throw ContractError("propagate_backward: empty feature list");
  const Shape s = g.value(phis[0]).shape();
  std::vector<StateIds<T>> out(phis.size());
  StateIds<T> next = zero_state<T>(g, s[0], s[1], s[2]);
  for (int t = static_cast<int>(phis.size()) - 1; t >= 0; --t) {
    next = cell_step(g, p, phis[t], next, "backward_cell", cfg);
    out[t] = next;
  }
  return out;
}

// Target-frame reconstructor: fuses the target features with both directions'
// states level by level, then emits a residual on top of the input frame.
template <typename T>
NodeId<T> reconstruct(Graph<T>& g, ParamBinder<T>& p, NodeId<T> phi, const StateIds<T>& f,
                      const StateIds<T>& b, NodeId<T> frame, const ModelConfig& cfg) {
  const int n = cfg.psi_cab_count;
  auto f1 = g.add(cab_chain(g, p, phi, "tfr.level1.psi", n),
                  conv3(g, p, g.add(f.e1, b.e1), "tfr.level1.gather_enc"),
                  conv3(g, p, g.add(f.d1, b.d1), "tfr.level1.gather_dec"));

  auto b_mid = cfg.tfr_mid_pair_decoder ? b.d2 : b.e2;
  auto ge2 = upsample2(g, p, conv3(g, p, g.add(f.e2, b_mid), "tfr.level2.gather_enc"),
                       "tfr.level2.gather_enc_up0");
  auto gd2 = upsample2(g, p, conv3(g, p, g.add(f.d2, b.d2), "tfr.level2.gather_dec"),
                       "tfr.level2.gather_dec_up0");
  auto f2 = g.add(cab_chain(g, p, f1, "tfr.level2.psi", n), ge2, gd2);

  auto ge3 = conv3(g, p, g.add(f.e3, b.e3), "tfr.level3.gather_enc");
  ge3 = upsample2(g, p, ge3, "tfr.level3.gather_enc_up0");
  ge3 = upsample2(g, p, ge3, "tfr.level3.gather_enc_up1");
  auto gd3 = conv3(g, p, g.add(f.d3, b.d3), "tfr.level3.gather_dec");
  gd3 = upsample2(g, p, gd3, "tfr.level3.gather_dec_up0");
  gd3 = upsample2(g, p, gd3, "tfr.level3.gather_dec_up1");
  auto f3 = g.add(cab_chain(g, p, f2, "tfr.level3.psi", n), ge3, gd3);

  return g.add(conv(g, p, f3, "tfr.out", 1, 2), frame);
}

// Baseline cell: one full-resolution state per direction; the previous state
// is merged in by a 3x3 convolution over the channel concatenation, then the
// stack of CABs runs on the merged features.
template <typename T>
NodeId<T> baseline_cell_step(Graph<T>& g, ParamBinder<T>& p, NodeId<T> phi, NodeId<T> prev,
                             const std::string& dir, const ModelConfig& cfg) {
  auto merged = conv3(g, p, g.concat_channels(phi, prev), dir + ".merge");
  return cab_chain(g, p, merged, dir, cfg.phi_cab_count);
}

// Plain reconstruction head shared by both baseline variants.
template <typename T>
NodeId<T> plain_reconstruct(Graph<T>& g, ParamBinder<T>& p, NodeId<T> phi, NodeId<T> fwd,
                            NodeId<T> bwd, NodeId<T> frame) {
  auto x = g.relu(conv3(g, p, g.concat_channels(phi, fwd, bwd), "recon.conv0"));
  x = g.relu(conv3(g, p, x, "recon.conv1"));
  return g.add(conv(g, p, x, "recon.out", 1, 2), frame);
}

// Full per-sequence graph; returns one restored-frame node per input frame.
template <typename T>
std::vector<NodeId<T>> sequence_graph(Graph<T>& g, ParamBinder<T>& p,
                                      const std::vector<NodeId<T>>& frames,
                                      const ModelConfig& cfg) {
  std::vector<NodeId<T>> phis;
  phis.reserve(frames.size());
  for (auto f : frames) phis.push_back(extract_features(g, p, f, cfg));
  const size_t nframes = frames.size();
  std::vector<NodeId<T>> outputs(nframes);

  if (cfg.variant == Variant::kBaseline) {
    const Shape s = g.value(phis[0]).shape();
    std::vector<NodeId<T>> fwd(nframes), bwd(nframes);
    NodeId<T> h = g.zeros(s);
    for (size_t t = 0; t < nframes; ++t) {
      h = baseline_cell_step(g, p, phis[t], h, "forward_cell", cfg);
      fwd[t] = h;
    }
    h = g.zeros(s);
    for (size_t t = nframes; t-- > 0;) {
      h = baseline_cell_step(g, p, phis[t], h, "backward_cell", cfg);
      bwd[t] = h;
    }
    for (size_t t = 0; t < nframes; ++t)
      outputs[t] = plain_reconstruct(g, p, phis[t], fwd[t], bwd[t], frames[t]);
    return outputs;
  }

  auto fwd = propagate_forward(g, p, phis, cfg);
  auto bwd = propagate_backward(g, p, phis, cfg);
  for (size_t t = 0; t < nframes; ++t) {
    if (cfg.variant == Variant::kBaselineMbp)
      outputs[t] = plain_reconstruct(g, p, phis[t], fwd[t].d1, bwd[t].d1, frames[t]);
    else
      outputs[t] = reconstruct(g, p, phis[t], fwd[t], bwd[t], frames[t], cfg);
  }
  return outputs;
}

}  // namespace build

// ---- model ----

inline void check_model_input(const Shape& s) {
  if (s[1] % 4 != 0 || s[2] % 4 != 0) {
    const int ph = (s[1] + 3) / 4 * 4, pw = (s[2] + 3) / 4 * 4;
    throw ContractError("input frames are " + std::to_string(s[1]) + "x" + std::to_string(s[2]) +
                        "; height and width must be divisible by 4 (pad to " + std::to_string(ph) +
                        "x" + std::to_string(pw) + ")");
  }
}

template <typename T>
class Model {
 public:
  Model() = default;
  Model(ModelConfig cfg, uint64_t seed, InitMode mode = InitMode::kStandard) : config_(cfg) {
    cfg.validate();
    enumerate_parameters(config_, [&](const std::string& name, Shape s) { params_.add(name, s); });
    init_parameters(params_, seed, mode);
  }

  const ModelConfig& config() const { return config_; }
  ParameterStore<T>& params() { return params_; }
  const ParameterStore<T>& params() const { return params_; }
  int64_t parameter_count() const { return params_.total_parameters(); }

  // Restores a sequence. Streaming evaluation: keeps the per-frame features
  // and one direction's states, never a full tape. Output is not clamped.
  FrameSeq<T> forward(const FrameSeq<T>& frames) const {
    check_sequence(frames);
    check_model_input(frames[0].shape());
    Evaluator ev(*this);
    return ev.run(frames);
  }

  // Tape-based restoration; used by training and by equivalence tests.
  FrameSeq<T> forward_tape(const FrameSeq<T>& frames) const {
    check_sequence(frames);
    check_model_input(frames[0].shape());
    Graph<T> g;
    g.set_grad_enabled(false);
    ParamBinder<T> binder{g, const_cast<ParameterStore<T>&>(params_), false};
    std::vector<typename Graph<T>::NodeId> ins;
    for (const auto& f : frames) ins.push_back(g.leaf(f, false));
    auto outs = build::sequence_graph(g, binder, ins, config_);
    FrameSeq<T> result;
    result.reserve(outs.size());
    for (auto id : outs) result.push_back(g.value(id));
    return result;
  }

  // Charbonnier-mean loss over all frames, no gradients.
  T training_loss(const FrameSeq<T>& in, const FrameSeq<T>& gt, T eps) const {
    Graph<T> g;
    g.set_grad_enabled(false);
    ParamBinder<T> binder{g, const_cast<ParameterStore<T>&>(params_), false};
    std::vector<typename Graph<T>::NodeId> ins;
    for (const auto& f : in) ins.push_back(g.leaf(f, false));
    auto outs = build::sequence_graph(g, binder, ins, config_);
    typename Graph<T>::NodeId total = -1;
    for (size_t t = 0; t < outs.size(); ++t) {
      auto term = g.charbonnier_sum(outs[t], g.leaf(gt[t], false), eps);
      total = (total < 0) ? term : g.add(total, term);
    }
    const T denom = static_cast<T>(in.size()) * static_cast<T>(in[0].numel());
    return g.value(g.scale(total, T(1) / denom))[0];
  }

  // Charbonnier-mean loss over all frames; accumulates parameter gradients
  // (scaled by grad_seed) into the store's grad buffers. Returns the loss.
  T training_loss_backward(const FrameSeq<T>& in, const FrameSeq<T>& gt, T eps, T grad_seed) {
    check_sequence(in);
    check_sequence(gt, "target sequence");
    check_model_input(in[0].shape());
    if (in.size() != gt.size() || in[0].shape() != gt[0].shape())
      throw ContractError("training_loss_backward: input/target mismatch");
    Graph<T> g;
    ParamBinder<T> binder{g, params_, true};
    std::vector<typename Graph<T>::NodeId> ins;
    for (const auto& f : in) ins.push_back(g.leaf(f, false));
    auto outs = build::sequence_graph(g, binder, ins, config_);
    typename Graph<T>::NodeId total = -1;
    for (size_t t = 0; t < outs.size(); ++t) {
      auto term = g.charbonnier_sum(outs[t], g.leaf(gt[t], false), eps);
      total = (total < 0) ? term : g.add(total, term);
    }
    const T denom = static_cast<T>(in.size()) * static_cast<T>(in[0].numel());
    auto loss = g.scale(total, T(1) / denom);
    g.backward(loss, grad_seed);
    binder.collect_grads();
    return g.value(loss)[0];
  }

  // Both directions' hidden states for each frame (multi-scale variants).
  struct Propagated {
    std::vector<HiddenStateSet<T>> forward, backward;
  };
  Propagated propagate(const FrameSeq<T>& frames) const {
    if (config_.variant == Variant::kBaseline)
      throw ContractError("propagate: baseline variant has no multi-scale states");
    check_sequence(frames);
    check_model_input(frames[0].shape());
    Graph<T> g;
    g.set_grad_enabled(false);
    ParamBinder<T> binder{g, const_cast<ParameterStore<T>&>(params_), false};
    std::vector<typename Graph<T>::NodeId> phis;
    for (const auto& f : frames)
      phis.push_back(build::extract_features(g, binder, g.leaf(f, false), config_));
    auto fwd = build::propagate_forward(g, binder, phis, config_);
    auto bwd = build::propagate_backward(g, binder, phis, config_);
    Propagated out;
    auto grab = [&](const build::StateIds<T>& s) {
      return HiddenStateSet<T>{g.value(s.e1), g.value(s.e2), g.value(s.e3),
                               g.value(s.d3), g.value(s.d2), g.value(s.d1)};
    };
    for (const auto& s : fwd) out.forward.push_back(grab(s));
    for (const auto& s : bwd) out.backward.push_back(grab(s));
    return out;
  }

 private:
  ModelConfig config_;
  ParameterStore<T> params_;

  // Tape-free evaluator. Re-implements the same wiring on plain tensors so a
  // long sequence never retains intermediate activations; a dedicated test
  // pins it bitwise against forward_tape.
  class Evaluator {
   public:
    explicit Evaluator(const Model& m) : m_(m), cfg_(m.config_) {}

    FrameSeq<T> run(const FrameSeq<T>& frames) {
      const size_t n = frames.size();
      std::vector<Tensor<T>> phis(n);
      for (size_t t = 0; t < n; ++t) phis[t] = extract(frames[t]);

      FrameSeq<T> out(n);
      if (cfg_.variant == Variant::kBaseline) {
        const Shape s = phis[0].shape();
        std::vector<Tensor<T>> bwd(n);
        Tensor<T> h(s);
        for (size_t t = n; t-- > 0;) {
          h = baseline_cell(phis[t], h, "backward_cell");
          bwd[t] = h;
        }
        h = Tensor<T>(s);
        for (size_t t = 0; t < n; ++t) {
          h = baseline_cell(phis[t], h, "forward_cell");
          out[t] = plain_recon(phis[t], h, bwd[t], frames[t]);
        }
        return out;
      }

      std::vector<HiddenStateSet<T>> bwd(n);
      HiddenStateSet<T> state = zero_state(phis[0].shape());
      for (size_t t = n; t-- > 0;) {
        state = cell(phis[t], state, "backward_cell");
        bwd[t] = state;
      }
      state = zero_state(phis[0].shape());
      for (size_t t = 0; t < n; ++t) {
        state = cell(phis[t], state, "forward_cell");
        if (cfg_.variant == Variant::kBaselineMbp)
          out[t] = plain_recon(phis[t], state.d1, bwd[t].d1, frames[t]);
        else
          out[t] = tfr(phis[t], state, bwd[t], frames[t]);
      }
      return out;
    }

   private:
    const Model& m_;
    const ModelConfig& cfg_;

    const Tensor<T>& p(const std::string& name) const { return m_.params_.at(name); }

    Tensor<T> conv(const Tensor<T>& x, const std::string& prefix, int stride, int pad) const {
      const Tensor<T>& w = p(prefix + ".weight");
      Tensor<T> out(kernels::conv2d_out_shape<T>(x.shape(), w.shape(), stride, pad));
      kernels::conv2d_forward(x, w, p(prefix + ".bias"), out, stride, pad);
      return out;
    }
    Tensor<T> conv3(const Tensor<T>& x, const std::string& prefix) const {
      return conv(x, prefix, 1, 1);
    }

    static void relu_inplace(Tensor<T>& t) {
      for (int64_t i = 0; i < t.numel(); ++i)
        if (t[i] < T(0)) t[i] = T(0);
    }
    static void add_inplace(Tensor<T>& a, const Tensor<T>& b) {
      for (int64_t i = 0; i < a.numel(); ++i) a[i] += b[i];
    }

    Tensor<T> cab(const Tensor<T>& x, const std::string& prefix) const {
      Tensor<T> branch = conv3(x, prefix + ".conv1");
      relu_inplace(branch);
      branch = conv3(branch, prefix + ".conv2");
      const int c = branch.shape()[0];
      const int64_t hw = int64_t(branch.shape()[1]) * branch.shape()[2];
      Tensor<T> pooled(Shape{c, 1, 1});
      for (int ch = 0; ch < c; ++ch) {
        T acc = T(0);
        const T* q = branch.data() + ch * hw;
        for (int64_t i = 0; i < hw; ++i) acc += q[i];
        pooled[ch] = acc / static_cast<T>(hw);
      }
      Tensor<T> z = conv(pooled, prefix + ".fc1", 1, 0);
      relu_inplace(z);
      Tensor<T> gate = conv(z, prefix + ".fc2", 1, 0);
      for (int64_t i = 0; i < gate.numel(); ++i) gate[i] = T(1) / (T(1) + std::exp(-gate[i]));
      Tensor<T> out = x;
      for (int ch = 0; ch < c; ++ch) {
        const T gv = gate[ch];
        T* o = out.data() + ch * hw;
        const T* q = branch.data() + ch * hw;
        for (int64_t i = 0; i < hw; ++i) o[i] += gv * q[i];
      }
      return out;
    }

    Tensor<T> cab_chain(Tensor<T> x, const std::string& prefix, int count) const {
      for (int i = 0; i < count; ++i) x = cab(x, prefix + ".cab" + std::to_string(i));
      return x;
    }

    Tensor<T> extract(const Tensor<T>& frame) const {
      return cab(conv3(frame, "extractor.conv"), "extractor.cab0");
    }

    Tensor<T> down(const Tensor<T>& x, const std::string& prefix) const {
      if (cfg_.downsample == DownsampleMode::kStridedConv) return conv(x, prefix, 2, 1);
      Tensor<T> pooled(Shape{x.shape()[0], x.shape()[1] / 2, x.shape()[2] / 2});
      kernels::avg_pool2(x, pooled);
      return conv3(pooled, prefix);
    }

    Tensor<T> up(const Tensor<T>& x, const std::string& prefix) const {
      Tensor<T> big(Shape{x.shape()[0], 2 * x.shape()[1], 2 * x.shape()[2]});
      kernels::bilinear_up2(x, big);
      return conv3(big, prefix);
    }

    HiddenStateSet<T> zero_state(const Shape& s) const {
      HiddenStateSet<T> st;
      st.e1 = Tensor<T>(s);
      st.e2 = Tensor<T>(Shape{s[0], s[1] / 2, s[2] / 2});
      st.e3 = Tensor<T>(Shape{s[0], s[1] / 4, s[2] / 4});
      st.d3 = st.e3;
      st.d2 = st.e2;
      st.d1 = st.e1;
      return st;
    }

    HiddenStateSet<T> cell(const Tensor<T>& phi, const HiddenStateSet<T>& prev,
                           const std::string& dir) const {
      const int n = cfg_.phi_cab_count;
      HiddenStateSet<T> s;
      s.e1 = cab_chain(phi, dir + ".enc1.phi", n);
      add_inplace(s.e1, conv3(prev.e1, dir + ".enc1.gather_enc"));
      add_inplace(s.e1, conv3(prev.d1, dir + ".enc1.gather_dec"));
      s.e2 = cab_chain(down(s.e1, dir + ".enc2.down"), dir + ".enc2.phi", n);
      add_inplace(s.e2, conv3(prev.e2, dir + ".enc2.gather_enc"));
      add_inplace(s.e2, conv3(prev.d2, dir + ".enc2.gather_dec"));
      s.e3 = cab_chain(down(s.e2, dir + ".enc3.down"), dir + ".enc3.phi", n);
      add_inplace(s.e3, conv3(prev.e3, dir + ".enc3.gather_enc"));
      add_inplace(s.e3, conv3(prev.d3, dir + ".enc3.gather_dec"));
      s.d3 = cab_chain(s.e3, dir + ".dec3.phi", n);
      s.d2 = cab_chain(up(s.d3, dir + ".dec2.up"), dir + ".dec2.phi_up", n);
      add_inplace(s.d2, cab_chain(s.e2, dir + ".dec2.phi_skip", n));
      s.d1 = cab_chain(up(s.d2, dir + ".dec1.up"), dir + ".dec1.phi_up", n);
      add_inplace(s.d1, cab_chain(s.e1, dir + ".dec1.phi_skip", n));
      return s;
    }

    Tensor<T> tfr(const Tensor<T>& phi, const HiddenStateSet<T>& f, const HiddenStateSet<T>& b,
                  const Tensor<T>& frame) const {
      const int n = cfg_.psi_cab_count;
      auto sum = [](const Tensor<T>& a, const Tensor<T>& c) {
        Tensor<T> r = a;
        add_inplace(r, c);
        return r;
      };
      Tensor<T> f1 = cab_chain(phi, "tfr.level1.psi", n);
      add_inplace(f1, conv3(sum(f.e1, b.e1), "tfr.level1.gather_enc"));
      add_inplace(f1, conv3(sum(f.d1, b.d1), "tfr.level1.gather_dec"));

      const Tensor<T>& b_mid = cfg_.tfr_mid_pair_decoder ? b.d2 : b.e2;
      Tensor<T> f2 = cab_chain(f1, "tfr.level2.psi", n);
      add_inplace(f2, up(conv3(sum(f.e2, b_mid), "tfr.level2.gather_enc"),
                         "tfr.level2.gather_enc_up0"));
      add_inplace(f2, up(conv3(sum(f.d2, b.d2), "tfr.level2.gather_dec"),
                         "tfr.level2.gather_dec_up0"));

      Tensor<T> f3 = cab_chain(f2, "tfr.level3.psi", n);
      add_inplace(f3, up(up(conv3(sum(f.e3, b.e3), "tfr.level3.gather_enc"),
                            "tfr.level3.gather_enc_up0"),
                         "tfr.level3.gather_enc_up1"));
      add_inplace(f3, up(up(conv3(sum(f.d3, b.d3), "tfr.level3.gather_dec"),
                            "tfr.level3.gather_dec_up0"),
                         "tfr.level3.gather_dec_up1"));

      Tensor<T> out = conv(f3, "tfr.out", 1, 2);
      add_inplace(out, frame);
      return out;
    }

    Tensor<T> baseline_cell(const Tensor<T>& phi, const Tensor<T>& prev,
                            const std::string& dir) const {
      const int c = phi.shape()[0];
      Tensor<T> cat(Shape{2 * c, phi.shape()[1], phi.shape()[2]});
      std::copy(phi.data(), phi.data() + phi.numel(), cat.data());
      std::copy(prev.data(), prev.data() + prev.numel(), cat.data() + phi.numel());
      return cab_chain(conv3(cat, dir + ".merge"), dir, cfg_.phi_cab_count);
    }

    Tensor<T> plain_recon(const Tensor<T>& phi, const Tensor<T>& fwd, const Tensor<T>& bwd,
                          const Tensor<T>& frame) const {
      const int c = phi.shape()[0];
      Tensor<T> cat(Shape{3 * c, phi.shape()[1], phi.shape()[2]});
      std::copy(phi.data(), phi.data() + phi.numel(), cat.data());
      std::copy(fwd.data(), fwd.data() + fwd.numel(), cat.data() + phi.numel());
      std::copy(bwd.data(), bwd.data() + bwd.numel(), cat.data() + 2 * phi.numel());
      Tensor<T> x = conv3(cat, "recon.conv0");
      relu_inplace(x);
      x = conv3(x, "recon.conv1");
      relu_inplace(x);
      Tensor<T> out = conv(x, "recon.out", 1, 2);
      add_inplace(out, frame);
      return out;
    }
  };
};

// Reflection-pads a frame so both sides are divisible by 4; crop undoes it.
template <typename T>
Tensor<T> pad_reflect_to_multiple4(const Tensor<T>& f, int& out_h, int& out_w) {
  const int c = f.shape()[0], h = f.shape()[1], w = f.shape()[2];
  out_h = (h + 3) / 4 * 4;
  out_w = (w + 3) / 4 * 4;
  if (out_h == h && out_w == w) return f;
  if (h < 2 || w < 2) throw ContractError("frame too small to reflection-pad");
  Tensor<T> out(Shape{c, out_h, out_w});
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < out_h; ++y) {
      const int sy = y < h ? y : 2 * h - 2 - y;
      for (int x = 0; x < out_w; ++x) {
        const int sx = x < w ? x : 2 * w - 2 - x;
        out.at(ch, y, x) = f.at(ch, sy, sx);
      }
    }
  return out;
}

template <typename T>
Tensor<T> crop_frame(const Tensor<T>& f, int h, int w) {
  if (f.shape()[1] == h && f.shape()[2] == w) return f;
  Tensor<T> out(Shape{f.shape()[0], h, w});
  for (int ch = 0; ch < f.shape()[0]; ++ch)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(ch, y, x) = f.at(ch, y, x);
  return out;
}

}  // namespace mbp
