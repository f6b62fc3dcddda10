#pragma once

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mbp/data.hpp"
#include "mbp/loss.hpp"
#include "mbp/model.hpp"
#include "mbp/optim.hpp"
#include "mbp/params.hpp"
#include "mbp/rng.hpp"

namespace mbp {

struct TrainConfig {
  double lr_max = 2e-4;
  double lr_min = 1e-7;
  int64_t total_steps = 500000;
  int batch_size = 4;
  int seq_len = 8;
  int patch = 256;  // 0 = whole frames
  double charbonnier_eps = 1e-3;
  uint64_t seed = 0;
  int64_t checkpoint_every = 1000;
  double grad_clip = 0;  // max global L2 norm; 0 disables
  bool augment = true;

  void validate() const {
    if (!(lr_min >= 0) || !(lr_min <= lr_max)) throw ConfigError("require 0 <= lr_min <= lr_max");
    if (total_steps < 0) throw ConfigError("total_steps must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (seq_len < 1) throw ConfigError("seq_len must be >= 1");
    if (patch < 0) throw ConfigError("patch must be >= 0");
    if (!(charbonnier_eps > 0)) throw ConfigError("charbonnier_eps must be positive");
    if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
    if (grad_clip < 0) throw ConfigError("grad_clip must be >= 0");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"lr_max", c.lr_max},
                     {"lr_min", c.lr_min},
                     {"total_steps", c.total_steps},
                     {"batch_size", c.batch_size},
                     {"seq_len", c.seq_len},
                     {"patch", c.patch},
                     {"charbonnier_eps", c.charbonnier_eps},
                     {"seed", c.seed},
                     {"checkpoint_every", c.checkpoint_every},
                     {"grad_clip", c.grad_clip},
                     {"augment", c.augment}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.lr_max = j.at("lr_max").get<double>();
  c.lr_min = j.at("lr_min").get<double>();
  c.total_steps = j.at("total_steps").get<int64_t>();
  c.batch_size = j.at("batch_size").get<int>();
  c.seq_len = j.at("seq_len").get<int>();
  c.patch = j.at("patch").get<int>();
  c.charbonnier_eps = j.at("charbonnier_eps").get<double>();
  c.seed = j.at("seed").get<uint64_t>();
  c.checkpoint_every = j.at("checkpoint_every").get<int64_t>();
  c.grad_clip = j.value("grad_clip", 0.0);
  c.augment = j.value("augment", true);
}

// Model + optimizer + sampler state; everything needed to continue a run
// bit-exactly from disk.
template <typename T>
class Trainer {
 public:
  Trainer(ModelConfig mcfg, TrainConfig tcfg)
      : model_(mcfg, (tcfg.validate(), tcfg.seed), InitMode::kStandard),
        cfg_(tcfg),
        rng_(tcfg.seed ^ 0x9e3779b97f4a7c15ull) {}

  Model<T>& model() { return model_; }
  const Model<T>& model() const { return model_; }
  const TrainConfig& config() const { return cfg_; }
  int64_t step() const { return step_; }
  double loss_ema() const { return loss_ema_; }

  // One Adam update on the Charbonnier loss over a batch of paired windows.
  // Returns the pre-update loss.
  T train_step(const std::vector<PairedSequence<T>>& batch) {
    if (batch.empty()) throw ContractError("train_step: empty batch");
    const double lr = cosine_lr(step_, cfg_.lr_max, cfg_.lr_min, cfg_.total_steps);
    model_.params().zero_grads();
    T loss = T(0);
    const T item_weight = T(1) / static_cast<T>(batch.size());
    for (const auto& item : batch)
      loss += item_weight * model_.training_loss_backward(item.blurry, item.sharp,
                                                          static_cast<T>(cfg_.charbonnier_eps),
                                                          item_weight);
    if (!std::isfinite(static_cast<double>(loss))) {
      std::string scenes;
      for (const auto& item : batch) scenes += (scenes.empty() ? "" : ", ") + item.scene_id;
      throw Error("non-finite loss at step " + std::to_string(step_) + " on batch [" + scenes + "]");
    }
    if (cfg_.grad_clip > 0) clip_gradients();
    adam_.step(model_.params(), lr);
    ++step_;
    loss_ema_ = std::isnan(loss_ema_) ? static_cast<double>(loss)
                                      : 0.99 * loss_ema_ + 0.01 * static_cast<double>(loss);
    return loss;
  }

  std::vector<PairedSequence<T>> sample_batch(const std::vector<PairedSequence<T>>& dataset) {
    std::vector<PairedSequence<T>> batch;
    batch.reserve(cfg_.batch_size);
    for (int b = 0; b < cfg_.batch_size; ++b) {
      const auto& pair = dataset[static_cast<size_t>(rng_.uniform_int(dataset.size()))];
      batch.push_back(sample_training_window(pair, cfg_.seq_len, cfg_.patch, rng_, cfg_.augment));
    }
    return batch;
  }

  void save_checkpoint(const std::string& path) const {
    nlohmann::json meta;
    meta["model_config"] = model_.config();
    meta["train_config"] = cfg_;
    meta["step"] = step_;
    meta["adam_steps"] = adam_.steps_taken();
    meta["rng_state"] = rng_.save_state();
    if (!std::isnan(loss_ema_)) meta["loss_ema"] = loss_ema_;  // NaN has no JSON form
    std::vector<std::tuple<std::string, std::string, const Tensor<T>*>> tensors;
    auto& params = const_cast<ParameterStore<T>&>(model_.params());
    for (const auto& name : params.names()) {
      tensors.emplace_back("params", name, &params.at(name));
      tensors.emplace_back("adam_m", name,
                           &const_cast<Adam<T>&>(adam_).first_moment(name, params.at(name).shape()));
      tensors.emplace_back("adam_v", name,
                           &const_cast<Adam<T>&>(adam_).second_moment(name, params.at(name).shape()));
    }
    const std::string tmp = path + ".tmp";
    container::save(tmp, meta, tensors);
    std::filesystem::rename(tmp, path);
  }

  static Trainer load_checkpoint(const std::string& path) {
    auto loaded = container::load<T>(path);
    const ModelConfig mcfg = loaded.meta.at("model_config").template get<ModelConfig>();
    const TrainConfig tcfg = loaded.meta.at("train_config").template get<TrainConfig>();
    Trainer t(mcfg, tcfg);
    t.step_ = loaded.meta.at("step").template get<int64_t>();
    t.adam_.set_steps_taken(loaded.meta.at("adam_steps").template get<int64_t>());
    t.rng_.load_state(loaded.meta.at("rng_state").template get<std::string>());
    t.loss_ema_ = loaded.meta.value("loss_ema", std::nan(""));
    for (auto& e : loaded.entries) {
      if (e.section == "params")
        t.model_.params().at(e.name) = std::move(e.tensor);
      else if (e.section == "adam_m")
        t.adam_.first_moment(e.name, e.tensor.shape()) = std::move(e.tensor);
      else if (e.section == "adam_v")
        t.adam_.second_moment(e.name, e.tensor.shape()) = std::move(e.tensor);
    }
    return t;
  }

  // Sampling -> step -> schedule until total_steps, with periodic atomic
  // checkpoints and one JSONL record per step.
  void run(const std::vector<PairedSequence<T>>& dataset, const std::string& run_dir,
           const std::function<void(int64_t, double, double)>& on_step = {}) {
    if (dataset.empty()) throw ContractError("train: empty dataset");
    namespace fs = std::filesystem;
    fs::create_directories(run_dir);
    const std::string ckpt = (fs::path(run_dir) / "checkpoint.mbp").string();
    std::ofstream log(fs::path(run_dir) / "train_log.jsonl", std::ios::app);
    const auto wall0 = std::chrono::steady_clock::now();

    if (step_ == 0) save_checkpoint(ckpt);
    while (step_ < cfg_.total_steps) {
      auto batch = sample_batch(dataset);
      const double lr = cosine_lr(step_, cfg_.lr_max, cfg_.lr_min, cfg_.total_steps);
      const T loss = train_step(batch);
      const double wall =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - wall0).count();
      log << "{\"step\":" << (step_ - 1) << ",\"lr\":" << lr << ",\"loss\":" << loss
          << ",\"wall_time\":" << wall << "}\n";
      if (on_step) on_step(step_ - 1, lr, static_cast<double>(loss));
      if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0) {
        save_checkpoint(ckpt);
        log.flush();
      }
    }
    save_checkpoint(ckpt);
  }

 private:
  Model<T> model_;
  TrainConfig cfg_;
  Adam<T> adam_;
  Rng rng_;
  int64_t step_ = 0;
  double loss_ema_ = std::nan("");

  void clip_gradients() {
    double norm2 = 0;
    auto& params = model_.params();
    for (const auto& name : params.names()) {
      const Tensor<T>& g = params.grad(name);
      for (int64_t i = 0; i < g.numel(); ++i)
        norm2 += static_cast<double>(g[i]) * static_cast<double>(g[i]);
    }
    const double norm = std::sqrt(norm2);
    if (norm <= cfg_.grad_clip) return;
    const T scale = static_cast<T>(cfg_.grad_clip / norm);
    for (const auto& name : params.names()) {
      Tensor<T>& g = params.grad(name);
      for (int64_t i = 0; i < g.numel(); ++i) g[i] *= scale;
    }
  }
};

}  // namespace mbp
