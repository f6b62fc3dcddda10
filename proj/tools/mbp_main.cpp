// Command-line front end: synthesize / train / eval / infer / params.
//
// Configuration comes from an optional INI-style file (sections [model],
// [train], [data], [run]) merged with command-line flags; flags win. All
// diagnostics go to stderr; exit codes are 0 (ok), 2 (usage/config), 1
// (runtime failure).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mbp/data.hpp"
#include "mbp/image_io.hpp"
#include "mbp/metrics.hpp"
#include "mbp/model.hpp"
#include "mbp/train.hpp"

namespace fs = std::filesystem;

namespace {

struct RunConfig {
  mbp::ModelConfig model;
  mbp::TrainConfig train;
  mbp::DatasetSpec data;
  std::string out_dir;
  bool deterministic = false;

  // synthesizer knobs
  int scenes_train = 16;
  int scenes_test = 4;
  int clip_frames = 170;
  int height = 64;
  int width = 64;
  double motion = 1.0;
  int window = 7;
  int stride = 7;
  double gamma = 1.0;
};

std::string variant_name(const RunConfig& rc) { return mbp::to_string(rc.model.variant); }

// ---- INI config file ----

std::map<std::string, std::string> parse_ini(const std::string& path,
                                             std::vector<std::string>& errors) {
  std::map<std::string, std::string> kv;
  std::ifstream is(path);
  if (!is) {
    errors.push_back("config file '" + path + "' cannot be opened");
    return kv;
  }
  std::string line, section;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    const auto last = line.find_last_not_of(" \t\r");
    std::string s = line.substr(first, last - first + 1);
    if (s.empty() || s[0] == '#' || s[0] == ';') continue;
    if (s.front() == '[' && s.back() == ']') {
      section = s.substr(1, s.size() - 2);
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) {
      errors.push_back(path + ":" + std::to_string(lineno) + ": expected key=value, got '" + s + "'");
      continue;
    }
    auto trim = [](std::string v) {
      const auto b = v.find_first_not_of(" \t");
      const auto e = v.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : v.substr(b, e - b + 1);
    };
    const std::string key = trim(s.substr(0, eq));
    const std::string value = trim(s.substr(eq + 1));
    if (section.empty()) {
      errors.push_back(path + ":" + std::to_string(lineno) + ": key '" + key +
                       "' outside any [section]");
      continue;
    }
    kv[section + "." + key] = value;
  }
  return kv;
}

// Applies file values onto the config, collecting every problem instead of
// stopping at the first.
void apply_config_file(RunConfig& rc, const std::map<std::string, std::string>& kv,
                       std::vector<std::string>& errors) {
  auto parse_int = [&](const std::string& key, const std::string& v, int& dst) {
    try {
      dst = std::stoi(v);
    } catch (...) {
      errors.push_back(key + ": '" + v + "' is not an integer");
    }
  };
  auto parse_i64 = [&](const std::string& key, const std::string& v, int64_t& dst) {
    try {
      dst = std::stoll(v);
    } catch (...) {
      errors.push_back(key + ": '" + v + "' is not an integer");
    }
  };
  auto parse_u64 = [&](const std::string& key, const std::string& v, uint64_t& dst) {
    try {
      dst = std::stoull(v);
    } catch (...) {
      errors.push_back(key + ": '" + v + "' is not an unsigned integer");
    }
  };
  auto parse_double = [&](const std::string& key, const std::string& v, double& dst) {
    try {
      dst = std::stod(v);
    } catch (...) {
      errors.push_back(key + ": '" + v + "' is not a number");
    }
  };
  auto parse_bool = [&](const std::string& key, const std::string& v, bool& dst) {
    if (v == "true" || v == "1")
      dst = true;
    else if (v == "false" || v == "0")
      dst = false;
    else
      errors.push_back(key + ": '" + v + "' is not a boolean (use true/false)");
  };

  for (const auto& [key, value] : kv) {
    if (key == "model.base_channels") parse_int(key, value, rc.model.base_channels);
    else if (key == "model.cab_reduction") parse_int(key, value, rc.model.cab_reduction);
    else if (key == "model.phi_cab_count") parse_int(key, value, rc.model.phi_cab_count);
    else if (key == "model.psi_cab_count") parse_int(key, value, rc.model.psi_cab_count);
    else if (key == "model.variant") {
      try {
        rc.model.variant = mbp::variant_from_string(value);
      } catch (const mbp::ConfigError& e) {
        errors.push_back(key + ": " + e.what());
      }
    } else if (key == "model.downsample") {
      if (value == "strided_conv") rc.model.downsample = mbp::DownsampleMode::kStridedConv;
      else if (value == "bilinear") rc.model.downsample = mbp::DownsampleMode::kBilinear;
      else errors.push_back(key + ": unknown mode '" + value + "'");
    } else if (key == "model.tfr_mid_pair_decoder") {
      parse_bool(key, value, rc.model.tfr_mid_pair_decoder);
    } else if (key == "train.lr_max") parse_double(key, value, rc.train.lr_max);
    else if (key == "train.lr_min") parse_double(key, value, rc.train.lr_min);
    else if (key == "train.total_steps") parse_i64(key, value, rc.train.total_steps);
    else if (key == "train.batch_size") parse_int(key, value, rc.train.batch_size);
    else if (key == "train.seq_len") parse_int(key, value, rc.train.seq_len);
    else if (key == "train.patch") parse_int(key, value, rc.train.patch);
    else if (key == "train.charbonnier_eps") parse_double(key, value, rc.train.charbonnier_eps);
    else if (key == "train.seed") parse_u64(key, value, rc.train.seed);
    else if (key == "train.checkpoint_every") parse_i64(key, value, rc.train.checkpoint_every);
    else if (key == "train.grad_clip") parse_double(key, value, rc.train.grad_clip);
    else if (key == "train.augment") parse_bool(key, value, rc.train.augment);
    else if (key == "data.root") rc.data.root = value;
    else if (key == "data.split") rc.data.split = value;
    else if (key == "run.out") rc.out_dir = value;
    else if (key == "run.deterministic") parse_bool(key, value, rc.deterministic);
    else errors.push_back("unknown config key '" + key + "'");
  }
}

std::string dump_config(const RunConfig& rc) {
  std::ostringstream os;
  os << "[model]\n";
  os << "base_channels = " << rc.model.base_channels << "\n";
  os << "cab_reduction = " << rc.model.cab_reduction << "\n";
  os << "phi_cab_count = " << rc.model.phi_cab_count << "\n";
  os << "psi_cab_count = " << rc.model.psi_cab_count << "\n";
  os << "variant = " << variant_name(rc) << "\n";
  os << "downsample = "
     << (rc.model.downsample == mbp::DownsampleMode::kStridedConv ? "strided_conv" : "bilinear")
     << "\n";
  os << "tfr_mid_pair_decoder = " << (rc.model.tfr_mid_pair_decoder ? "true" : "false") << "\n";
  os << "\n[train]\n";
  os << "lr_max = " << rc.train.lr_max << "\n";
  os << "lr_min = " << rc.train.lr_min << "\n";
  os << "total_steps = " << rc.train.total_steps << "\n";
  os << "batch_size = " << rc.train.batch_size << "\n";
  os << "seq_len = " << rc.train.seq_len << "\n";
  os << "patch = " << rc.train.patch << "\n";
  os << "charbonnier_eps = " << rc.train.charbonnier_eps << "\n";
  os << "seed = " << rc.train.seed << "\n";
  os << "checkpoint_every = " << rc.train.checkpoint_every << "\n";
  os << "grad_clip = " << rc.train.grad_clip << "\n";
  os << "augment = " << (rc.train.augment ? "true" : "false") << "\n";
  os << "\n[data]\n";
  os << "root = " << rc.data.root << "\n";
  os << "split = " << rc.data.split << "\n";
  os << "\n[run]\n";
  os << "out = " << rc.out_dir << "\n";
  os << "deterministic = " << (rc.deterministic ? "true" : "false") << "\n";
  return os.str();
}

// Common flags for commands that build models or train.
void add_model_flags(CLI::App* cmd, RunConfig& rc) {
  cmd->add_option("--channels", rc.model.base_channels, "Base channel count");
  cmd->add_option("--reduction", rc.model.cab_reduction, "Channel-attention bottleneck reduction");
  cmd->add_option("--variant", [&rc](const std::vector<std::string>& v) {
        rc.model.variant = mbp::variant_from_string(v.back());
        return true;
      }, "Architecture variant: baseline | baseline_mbp | rnn_mbp")
      ->type_name("NAME");
  cmd->add_flag("--tfr-mid-pair-decoder", rc.model.tfr_mid_pair_decoder,
                "Pair the mid-level reconstructor gather with the backward decoder state");
}

void add_common(CLI::App* cmd, RunConfig& rc, std::string& config_path, bool& want_dump) {
  cmd->add_option("--config", config_path, "INI config file; command-line flags override it");
  cmd->add_flag("--dump-config", want_dump, "Print the fully resolved configuration and exit");
  cmd->add_flag("--deterministic", rc.deterministic,
                "Single-threaded, bitwise-reproducible execution");
}

int finalize_config(RunConfig& rc, const std::string& config_path, CLI::App* cmd,
                    const std::vector<std::string>& cli_errors_dummy) {
  (void)cli_errors_dummy;
  (void)cmd;
  std::vector<std::string> errors;
  if (!config_path.empty()) {
    auto kv = parse_ini(config_path, errors);
    RunConfig file_rc = rc;
    apply_config_file(file_rc, kv, errors);
    rc = file_rc;
  }
  if (!errors.empty()) {
    for (const auto& e : errors) std::cerr << "config error: " << e << "\n";
    return 2;
  }
  return 0;
}

mbp::Model<float> load_model_from_checkpoint(const std::string& path) {
  auto loaded = mbp::container::load<float>(path);
  const auto mcfg = loaded.meta.at("model_config").get<mbp::ModelConfig>();
  mbp::Model<float> model(mcfg, 0, mbp::InitMode::kStandard);
  size_t filled = 0;
  for (auto& e : loaded.entries) {
    if (e.section != "params") continue;
    model.params().at(e.name) = std::move(e.tensor);
    ++filled;
  }
  if (filled != model.params().size())
    throw mbp::IoError(path + ": checkpoint fills " + std::to_string(filled) + " of " +
                       std::to_string(model.params().size()) + " parameters");
  return model;
}

// ---- subcommands ----

int cmd_synthesize(RunConfig& rc, bool force) {
  if (rc.out_dir.empty()) throw mbp::ConfigError("--out is required");
  if (fs::exists(rc.out_dir) && !fs::is_empty(rc.out_dir) && !force)
    throw mbp::ConfigError("output directory '" + rc.out_dir +
                           "' is not empty; pass --force to write anyway");
  fs::create_directories(rc.out_dir);

  int scene_index = 0;
  for (const auto& [split, count] :
       {std::pair<std::string, int>{"train", rc.scenes_train}, {"test", rc.scenes_test}}) {
    for (int i = 0; i < count; ++i, ++scene_index) {
      const uint64_t scene_seed = rc.train.seed * 1000003ull + scene_index;
      auto clip = mbp::generate_toy_scene<float>(scene_seed, rc.clip_frames, rc.height, rc.width,
                                                 rc.motion);
      auto pair = mbp::synthesize_blur(clip, rc.window, rc.stride, rc.gamma);
      char name[32];
      std::snprintf(name, sizeof(name), "scene_%03d", scene_index);
      pair.scene_id = name;
      nlohmann::json meta{{"fps", clip.fps},        {"frames", pair.blurry.size()},
                          {"window", rc.window},    {"stride", rc.stride},
                          {"gamma", rc.gamma},      {"seed", scene_seed},
                          {"motion", rc.motion},    {"source", "synthetic"}};
      mbp::write_scene(rc.out_dir, split, name, pair, meta);
    }
  }
  std::cout << "wrote " << (rc.scenes_train + rc.scenes_test) << " scenes under " << rc.out_dir
            << "\n";
  return 0;
}

int cmd_train(RunConfig& rc, bool resume) {
  if (rc.data.root.empty()) throw mbp::ConfigError("--data is required");
  if (rc.out_dir.empty()) throw mbp::ConfigError("--out is required");
  rc.model.validate();
  rc.train.validate();
  rc.data.split = "train";
  auto dataset = mbp::load_dataset<float>(rc.data);

  const std::string ckpt = (fs::path(rc.out_dir) / "checkpoint.mbp").string();
  std::optional<mbp::Trainer<float>> trainer;
  if (resume && fs::exists(ckpt)) {
    trainer.emplace(mbp::Trainer<float>::load_checkpoint(ckpt));
    std::cerr << "resuming from step " << trainer->step() << "\n";
  } else {
    trainer.emplace(rc.model, rc.train);
  }
  fs::create_directories(rc.out_dir);
  {
    std::ofstream os(fs::path(rc.out_dir) / "config.ini");
    os << dump_config(rc);
  }
  trainer->run(dataset, rc.out_dir);
  std::cout << "trained " << variant_name(rc) << " to step " << trainer->step()
            << ", final loss ema " << trainer->loss_ema() << "\n";
  return 0;
}

int cmd_eval(RunConfig& rc, const std::string& checkpoint, bool dump_frames) {
  if (checkpoint.empty()) throw mbp::ConfigError("--checkpoint is required");
  if (!fs::exists(checkpoint))
    throw mbp::ConfigError("checkpoint '" + checkpoint + "' does not exist");
  if (rc.data.root.empty()) throw mbp::ConfigError("--data is required");
  if (rc.out_dir.empty()) throw mbp::ConfigError("--out is required");
  auto model = load_model_from_checkpoint(checkpoint);
  auto dataset = mbp::load_dataset<float>(rc.data);
  auto report = mbp::evaluate(model, dataset);
  mbp::write_report_files(rc.out_dir, report);
  if (dump_frames) {
    for (const auto& pair : dataset) {
      auto restored = model.forward(pair.blurry);
      const fs::path dir = fs::path(rc.out_dir) / "output" / pair.scene_id;
      fs::create_directories(dir);
      for (size_t i = 0; i < restored.size(); ++i)
        mbp::png::write_rgb8((dir / mbp::frame_name(static_cast<int>(i))).string(), restored[i]);
    }
  }
  std::cout << mbp::format_report_text(report);
  return 0;
}

int cmd_infer(RunConfig& rc, const std::string& checkpoint, const std::string& in_dir) {
  if (checkpoint.empty()) throw mbp::ConfigError("--checkpoint is required");
  if (!fs::exists(checkpoint))
    throw mbp::ConfigError("checkpoint '" + checkpoint + "' does not exist");
  if (in_dir.empty() || rc.out_dir.empty()) throw mbp::ConfigError("--in and --out are required");
  auto model = load_model_from_checkpoint(checkpoint);

  std::vector<std::string> names;
  for (const auto& entry : fs::directory_iterator(in_dir))
    if (entry.is_regular_file() && entry.path().extension() == ".png")
      names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw mbp::ConfigError("no .png frames in '" + in_dir + "'");

  mbp::FrameSeq<float> seq;
  for (const auto& n : names) seq.push_back(mbp::png::read<float>((fs::path(in_dir) / n).string()));
  const int h = seq[0].shape()[1], w = seq[0].shape()[2];
  mbp::FrameSeq<float> padded;
  int ph = 0, pw = 0;
  for (const auto& f : seq) padded.push_back(mbp::pad_reflect_to_multiple4(f, ph, pw));
  auto restored = model.forward(padded);
  fs::create_directories(rc.out_dir);
  for (size_t i = 0; i < restored.size(); ++i)
    mbp::png::write_rgb8((fs::path(rc.out_dir) / names[i]).string(),
                         mbp::crop_frame(restored[i], h, w));
  std::cout << "restored " << restored.size() << " frames to " << rc.out_dir << "\n";
  return 0;
}

int cmd_params(RunConfig& rc) {
  rc.model.validate();
  const int64_t count = mbp::count_parameters(rc.model);
  std::cout << variant_name(rc) << " (C=" << rc.model.base_channels
            << ", r=" << rc.model.cab_reduction << "): " << count << " parameters ("
            << count / 1e6 << "M)\n";
  if (rc.model.variant == mbp::Variant::kRnnMbp) {
    const double reference = 16.37e6;
    std::cout << "reference budget 16.37M; deviation "
              << (static_cast<double>(count) - reference) / reference * 100.0 << "%\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-scale bidirectional recurrent video deblurring"};
  app.require_subcommand(1);
  RunConfig rc;
  std::string config_path;
  bool want_dump = false;

  auto* synth = app.add_subcommand("synthesize", "Generate a synthetic blurry/sharp dataset");
  add_common(synth, rc, config_path, want_dump);
  bool force = false;
  synth->add_option("--out", rc.out_dir, "Output dataset root");
  synth->add_option("--train-scenes", rc.scenes_train, "Scenes in the train split");
  synth->add_option("--test-scenes", rc.scenes_test, "Scenes in the test split");
  synth->add_option("--frames", rc.clip_frames, "High-rate frames per scene clip");
  synth->add_option("--height", rc.height, "Frame height (divisible by 4)");
  synth->add_option("--width", rc.width, "Frame width (divisible by 4)");
  synth->add_option("--motion", rc.motion, "Object speed in px per high-rate frame");
  synth->add_option("--window", rc.window, "Averaging window (odd)");
  synth->add_option("--stride", rc.stride, "Window stride");
  synth->add_option("--gamma", rc.gamma, "Gamma for linear-light averaging (1 = direct)");
  synth->add_option("--seed", rc.train.seed, "Base seed");
  synth->add_flag("--force", force, "Write into a non-empty output directory");

  auto* train = app.add_subcommand("train", "Train a model variant");
  add_common(train, rc, config_path, want_dump);
  add_model_flags(train, rc);
  bool resume = false;
  train->add_option("--data", rc.data.root, "Dataset root");
  train->add_option("--out", rc.out_dir, "Run directory (checkpoints, logs)");
  train->add_option("--steps", rc.train.total_steps, "Total optimization steps");
  train->add_option("--batch", rc.train.batch_size, "Sequences per step");
  train->add_option("--seq-len", rc.train.seq_len, "Frames per training window");
  train->add_option("--patch", rc.train.patch, "Square crop size (0 = whole frames)");
  train->add_option("--lr", rc.train.lr_max, "Peak learning rate");
  train->add_option("--lr-min", rc.train.lr_min, "Final learning rate");
  train->add_option("--eps", rc.train.charbonnier_eps, "Charbonnier epsilon");
  train->add_option("--seed", rc.train.seed, "Seed for init and sampling");
  train->add_option("--checkpoint-every", rc.train.checkpoint_every, "Checkpoint period in steps");
  train->add_option("--grad-clip", rc.train.grad_clip, "Max gradient norm (0 = off)");
  train->add_flag("--resume", resume, "Continue from the run directory's checkpoint");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset split");
  add_common(eval, rc, config_path, want_dump);
  std::string checkpoint, in_dir;
  bool dump_frames = false;
  eval->add_option("--checkpoint", checkpoint, "Checkpoint file");
  eval->add_option("--data", rc.data.root, "Dataset root");
  eval->add_option("--split", rc.data.split, "Dataset split (train | test)");
  eval->add_option("--out", rc.out_dir, "Report directory");
  eval->add_flag("--dump-frames", dump_frames, "Also write restored frames");

  auto* infer = app.add_subcommand("infer", "Restore a directory of frames");
  add_common(infer, rc, config_path, want_dump);
  infer->add_option("--checkpoint", checkpoint, "Checkpoint file");
  infer->add_option("--in", in_dir, "Input frame directory (PNG)");
  infer->add_option("--out", rc.out_dir, "Output frame directory");

  auto* params = app.add_subcommand("params", "Print the learnable parameter count");
  add_common(params, rc, config_path, want_dump);
  add_model_flags(params, rc);

  // Parse once to capture --config, then re-parse so flags override the file.
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_code = app.exit(e);
    return rc_code == 0 ? 0 : 2;
  } catch (const mbp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  if (!config_path.empty()) {
    const int code = finalize_config(rc, config_path, &app, {});
    if (code != 0) return code;
    try {
      app.clear();
      app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
      const int rc_code = app.exit(e);
      return rc_code == 0 ? 0 : 2;
    } catch (const mbp::ConfigError& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 2;
    }
  }

  if (rc.deterministic || mbp::deterministic_env()) mbp::set_num_threads(1);
  if (want_dump) {
    std::cout << dump_config(rc);
    return 0;
  }

  try {
    if (synth->parsed()) return cmd_synthesize(rc, force);
    if (train->parsed()) return cmd_train(rc, resume);
    if (eval->parsed()) return cmd_eval(rc, checkpoint, dump_frames);
    if (infer->parsed()) return cmd_infer(rc, checkpoint, in_dir);
    if (params->parsed()) return cmd_params(rc);
  } catch (const mbp::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
