#pragma once

// Command-line front end: train, eval, preprocess, params, shapes,
// gradcheck and saliency.
//
// Settings come from three layers: built-in defaults, an optional flat
// JSON file (--config) and flags. Flags win. The merged result is echoed
// as JSON and can be fed back through --config.
//
// Exit status: 0 success, 1 runtime failure, 2 usage error or invalid config.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "meranet/data.hpp"
#include "meranet/gradsuite.hpp"
#include "meranet/model.hpp"
#include "meranet/parallel.hpp"
#include "meranet/saliency.hpp"
#include "meranet/training.hpp"

namespace meranet {

/// Everything a subcommand may need, flattened into one JSON object.
struct CliSettings {
  ModelConfig model;
  TrainConfig train;
  std::size_t t = 16;
  std::size_t size = clip_size;
  int threads = 1;
  std::string data, out, checkpoint;
};

/// Published totals for the default configuration.
inline constexpr std::size_t published_resnet3d18_params = 33'167'811;
inline constexpr std::size_t published_meranet18_params = 33'547'552;

inline nlohmann::json to_json(const CliSettings& s) {
  nlohmann::json j = to_json(s.model);
  const nlohmann::json train = to_json(s.train);
  for (const auto& [k, v] : train.items()) j[k] = v;
  j["t"] = s.t;
  j["size"] = s.size;
  j["threads"] = s.threads;
  j["data"] = s.data;
  j["out"] = s.out;
  j["checkpoint"] = s.checkpoint;
  return j;
}

/// Overlays a flat config object; unknown keys are rejected by name.
inline void apply_json(CliSettings& s, const nlohmann::json& j) {
  require(j.is_object(), Errc::invalid_argument, "invalid config: expected a JSON object");
  const auto known = to_json(CliSettings{});
  for (const auto& [k, v] : j.items())
    require(known.contains(k), Errc::invalid_argument,
            "invalid config: unknown field '" + k + "'");
  apply_json(s.model, j);
  apply_json(s.train, j);
  if (j.contains("t")) s.t = detail::config_field<std::size_t>(j, "t");
  if (j.contains("size")) s.size = detail::config_field<std::size_t>(j, "size");
  if (j.contains("threads")) s.threads = detail::config_field<int>(j, "threads");
  if (j.contains("data")) s.data = detail::config_field<std::string>(j, "data");
  if (j.contains("out")) s.out = detail::config_field<std::string>(j, "out");
  if (j.contains("checkpoint")) s.checkpoint = detail::config_field<std::string>(j, "checkpoint");
}

inline void validate(const CliSettings& s) {
  try {
    s.model.validate();
    s.train.validate();
  } catch (const Error& e) {
    throw Error(Errc::invalid_argument, std::string("invalid config: ") + e.what());
  }
  require(s.t >= 1, Errc::invalid_argument, "invalid config: field 't' must be >= 1");
  require(s.size >= 4, Errc::invalid_argument, "invalid config: field 'size' must be >= 4");
  require(s.threads >= 1, Errc::invalid_argument,
          "invalid config: field 'threads' must be >= 1");
}

/// Sum over attention-bearing blocks of 2*C*h + h + C + 2*k^3 + 1 with
/// h = max(1, C/r): squeeze and excite weights and biases, then the
/// two-channel spatio-temporal kernel and its bias.
inline std::size_t attention_overhead(const ModelConfig& c) {
  const std::size_t k3 = c.st_kernel * c.st_kernel * c.st_kernel;
  std::size_t total = 0;
  for (auto ch : c.channel_plan) {
    const std::size_t h = std::max<std::size_t>(1, ch / c.reduction);
    total += 2 * ch * h + h + ch + 2 * k3 + 1;
  }
  return total;
}

namespace detail {

inline std::string thousands(std::size_t v) {
  std::string s = std::to_string(v);
  for (int i = int(s.size()) - 3; i > 0; i -= 3) s.insert(std::size_t(i), ",");
  return s;
}

inline std::string signed_thousands(long long v) {
  return (v < 0 ? "-" : "+") + thousands(std::size_t(v < 0 ? -v : v));
}

// Usage and config problems exit with 2; everything else with 1.
struct UsageError : Error {
  using Error::Error;
};

inline void require_flag(const std::string& value, const char* flag) {
  if (value.empty()) throw UsageError(Errc::invalid_argument, std::string(flag) + " is required");
}

inline fs::path manifest_path(const std::string& data) {
  require_flag(data, "--data");
  fs::path p(data);
  return fs::is_directory(p) ? p / "manifest.json" : p;
}

inline std::string format_shape(const Shape& s) {
  std::string r;
  for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "x" : "") + std::to_string(s[i]);
  return r;
}

}  // namespace detail

inline int cmd_params(const CliSettings& s, const std::string& which, std::ostream& out) {
  ModelConfig base = s.model, mera = s.model;
  base.variant = Variant::resnet3d18;
  mera.variant = Variant::meranet18;
  const auto pb = count_params(build_structure<float>(base));
  const auto pm = count_params(build_structure<float>(mera));
  const auto& shown = which == "resnet3d18" ? pb : pm;

  out << "per-tensor parameters (" << which << ")\n";
  char line[160];
  for (const auto& [path, n] : shown.by_layer) {
    std::snprintf(line, sizeof line, "  %-40s %12s\n", path.c_str(), detail::thousands(n).c_str());
    out << line;
  }

  const bool defaults = s.model.channel_plan == default_channel_plan() &&
                        s.model.reduction == 16 && s.model.st_kernel == 5 &&
                        s.model.num_classes == 3 && s.model.in_channels == 3;
  auto total_line = [&](const char* name, std::size_t n, std::size_t published) {
    std::snprintf(line, sizeof line, "%-11s total %12s", name, detail::thousands(n).c_str());
    out << line;
    if (defaults)
      out << "   published " << detail::thousands(published) << "   difference "
          << detail::signed_thousands((long long)n - (long long)published);
    out << '\n';
  };
  out << '\n';
  total_line("resnet3d18", pb.total, published_resnet3d18_params);
  total_line("meranet18", pm.total, published_meranet18_params);

  const std::size_t delta = pm.total - pb.total;
  const std::size_t closed = attention_overhead(mera);
  out << "attention overhead   counted " << detail::thousands(delta) << "   closed form "
      << detail::thousands(closed) << "   difference "
      << detail::signed_thousands((long long)delta - (long long)closed) << '\n';
  if (defaults)
    out << "published overhead   " << detail::thousands(published_meranet18_params -
                                                         published_resnet3d18_params)
        << "   difference vs counted "
        << detail::signed_thousands((long long)(published_meranet18_params -
                                                published_resnet3d18_params) -
                                    (long long)delta)
        << '\n';

  out << "\nattention overhead by block\n";
  const auto names = block_names(mera.channel_plan);
  const std::size_t k3 = mera.st_kernel * mera.st_kernel * mera.st_kernel;
  for (std::size_t i = 0; i < names.size(); ++i) {
    const std::size_t c = mera.channel_plan[i];
    const std::size_t h = std::max<std::size_t>(1, c / mera.reduction);
    std::snprintf(line, sizeof line, "  %-10s C=%-4zu channel %9s   spatio-temporal %6s\n",
                  names[i].c_str(), c, detail::thousands(2 * c * h + h + c).c_str(),
                  detail::thousands(2 * k3 + 1).c_str());
    out << line;
  }
  return delta == closed ? 0 : 1;
}

inline int cmd_shapes(const CliSettings& s, std::ostream& out) {
  const auto m = build_structure<float>(s.model);
  const auto rows = shape_table(m, {s.model.in_channels, s.t, s.size, s.size});
  out << "input " << detail::format_shape({s.model.in_channels, s.t, s.size, s.size}) << '\n';
  char line[128];
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-10s %s\n", r.layer.c_str(),
                  detail::format_shape(r.extents).c_str());
    out << line;
  }
  return 0;
}

inline int cmd_gradcheck(const CliSettings& s, std::ostream& out) {
  const auto rows = gradient_suite(s.train.seed);
  bool ok = true;
  char line[200];
  for (const auto& r : rows) {
    const bool pass = r.result.max_rel_error < gradcheck_tolerance;
    ok = ok && pass;
    std::snprintf(line, sizeof line, "%-5s %-48s max_rel_error %.3e  coords %4zu  %s\n",
                  r.group.c_str(), r.name.c_str(), r.result.max_rel_error, r.result.checked,
                  pass ? "PASS" : "FAIL");
    out << line;
  }
  out << (ok ? "all checks below " : "some checks at or above ") << gradcheck_tolerance << '\n';
  return ok ? 0 : 1;
}

inline int cmd_preprocess(const CliSettings& s, std::ostream& out) {
  detail::require_flag(s.out, "--out");
  const auto raw = load_manifest(detail::manifest_path(s.data));
  PreprocessOptions opt;
  opt.t = s.t;
  opt.size = s.size;
  opt.seed = s.train.seed;
  const auto m = preprocess(raw, s.out, opt);
  out << "wrote " << m.clips.size() << " clips to " << (fs::path(s.out) / "clips").string()
      << "\ntrain " << m.count("train") << "  val " << m.count("val") << "  test "
      << m.count("test") << '\n';
  out << "mean " << nlohmann::json(*m.mean).dump() << "  std " << nlohmann::json(*m.stdev).dump()
      << '\n';
  return 0;
}

inline int cmd_train(const CliSettings& s, const nlohmann::json& echo, std::ostream& out) {
  detail::require_flag(s.out, "--out");
  const auto manifest = load_manifest(detail::manifest_path(s.data));
  require(manifest.classes.size() == s.model.num_classes, Errc::invalid_argument,
          "manifest has " + std::to_string(manifest.classes.size()) +
              " classes but num_classes is " + std::to_string(s.model.num_classes));
  const auto train = load_split(manifest, "train");
  const auto val = load_split(manifest, "val");
  fs::create_directories(s.out);
  {
    std::ofstream f(fs::path(s.out) / "config.json", std::ios::trunc);
    require(static_cast<bool>(f), Errc::io, "cannot write config.json");
    f << echo.dump(2) << '\n';
  }
  auto model = build_model<float>(s.model);
  FitOptions fo;
  fo.out_dir = fs::path(s.out);
  fo.config_echo = echo;
  fo.on_epoch = [&](const EpochMetrics& e) {
    char line[200];
    std::snprintf(line, sizeof line,
                  "epoch %3zu/%zu  lr %.6f  train_loss %.5f  val_loss %.5f  val_acc %.4f\n",
                  e.epoch, s.train.epochs, e.lr, e.train_loss, e.val_loss, e.val_acc);
    out << line << std::flush;
  };
  const auto res = fit(model, train, val, s.train, fo);
  const auto tr = evaluate(model, train, s.train.batch);
  const auto va = evaluate(model, val, s.train.batch);
  out << "final train_acc " << tr.accuracy << "  val_acc " << va.accuracy << "\nbest epoch "
      << res.best_epoch << "  val_acc " << res.best_val_acc << "  val_loss "
      << res.best_val_loss << '\n';
  return 0;
}

inline int cmd_eval(CliSettings& s, const std::string& split, std::ostream& out) {
  detail::require_flag(s.checkpoint, "--checkpoint");
  auto ck = load_checkpoint(s.checkpoint);
  s.model = ck.model.config;
  const auto manifest = load_manifest(detail::manifest_path(s.data));
  const auto samples = load_split(manifest, split);
  const auto r = evaluate(ck.model, samples, s.train.batch);

  out << split << " accuracy " << r.accuracy << "  loss " << r.loss << "  (" << samples.size()
      << " clips)\n";
  out << "per-class:";
  for (std::size_t c = 0; c < r.per_class.size(); ++c)
    out << "  " << manifest.classes.at(c) << ' ' << r.per_class[c];
  out << "\nconfusion (rows true, columns predicted):\n";
  for (const auto& row : r.confusion) {
    for (auto v : row) out << ' ' << v;
    out << '\n';
  }

  nlohmann::json per_class = nlohmann::json::array();
  for (auto v : r.per_class) per_class.push_back(std::isnan(v) ? nlohmann::json() : nlohmann::json(v));
  nlohmann::json preds = nlohmann::json::array();
  for (std::size_t i = 0; i < samples.size(); ++i)
    preds.push_back({{"id", samples[i].id},
                     {"label", samples[i].label},
                     {"predicted", r.predictions[i]}});
  const nlohmann::json report{{"split", split},        {"accuracy", r.accuracy},
                              {"loss", r.loss},        {"classes", manifest.classes},
                              {"per_class", per_class}, {"confusion", r.confusion},
                              {"predictions", preds},  {"checkpoint", s.checkpoint},
                              {"epoch", ck.info.epoch}};
  const fs::path dest =
      s.out.empty() ? fs::path(s.checkpoint) / ("eval_" + split + ".json") : fs::path(s.out);
  if (dest.has_parent_path()) fs::create_directories(dest.parent_path());
  std::ofstream f(dest, std::ios::trunc);
  require(static_cast<bool>(f), Errc::io, "cannot write " + dest.string());
  f << report.dump(2) << '\n';
  out << "wrote " << dest.string() << '\n';
  return 0;
}

struct SaliencyRequest {
  std::string clip, split = "val", layer;
  std::optional<std::size_t> target, frame;
};

inline int cmd_saliency(CliSettings& s, const SaliencyRequest& q, std::ostream& out) {
  detail::require_flag(s.checkpoint, "--checkpoint");
  detail::require_flag(s.out, "--out");
  auto ck = load_checkpoint(s.checkpoint);
  s.model = ck.model.config;
  const auto manifest = load_manifest(detail::manifest_path(s.data));
  const ClipEntry* entry = nullptr;
  for (const auto& c : manifest.clips)
    if (q.clip.empty() ? c.split == q.split : c.id == q.clip) {
      entry = &c;
      break;
    }
  require(entry != nullptr, Errc::invalid_argument,
          q.clip.empty() ? "no clip in split '" + q.split + "'" : "unknown clip '" + q.clip + "'");
  require(!entry->tensor.empty(), Errc::missing_key,
          "clip " + entry->id + " has no preprocessed tensor (run preprocess first)");
  const auto clip = read_tensor(manifest.base_dir / entry->tensor);

  std::size_t target;
  if (q.target) {
    target = *q.target;
  } else {
    Shape bs{1};
    bs.insert(bs.end(), clip.shape().begin(), clip.shape().end());
    target = argmax_row(forward(ck.model, clip.reshaped(bs), Mode::infer), 0);
  }
  const auto map = grad_cam(ck.model, clip, target, q.layer);

  fs::create_directories(s.out);
  std::string stem = entry->id + "_" + tensor_file_name(map.layer);
  stem.resize(stem.size() - 5);  // drop ".mera"
  stem += "_c" + std::to_string(target);
  std::vector<std::size_t> frames;
  if (q.frame) {
    frames.push_back(*q.frame);
  } else {
    for (std::size_t f = 0; f < map.upsampled.extent(0); ++f) frames.push_back(f);
  }
  for (auto f : frames) {
    char suffix[32];
    std::snprintf(suffix, sizeof suffix, "_f%03zu.pgm", f);
    export_pgm(map, f, fs::path(s.out) / (stem + suffix));
  }
  out << "clip " << entry->id << "  label " << manifest.classes.at(entry->label) << "  target "
      << target << "  layer " << map.layer << "  map " << detail::format_shape(map.values.shape())
      << "\nwrote " << frames.size() << " PGM file(s) to " << s.out << '\n';
  return 0;
}

/// Parses argv and runs one subcommand.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout,
                   std::ostream& err = std::cerr) {
  CLI::App app{"3D residual attention network for micro-expression clips", "meranet"};
  app.require_subcommand(1, 1);
  app.fallthrough(false);

  std::string config_path;
  std::optional<std::string> data, out_dir, variant, ch_variant, checkpoint, layer, clip;
  std::optional<std::size_t> st_kernel, t, size, epochs, batch, warmup, reduction, target, frame;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::optional<double> lr, momentum, weight_decay;
  std::vector<std::size_t> channels;
  std::string split = "val";
  bool no_augment = false;

  auto* train = app.add_subcommand("train", "fit a model on a preprocessed manifest");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on one split");
  auto* prep = app.add_subcommand("preprocess", "turn raw frame folders into clip tensors");
  auto* params = app.add_subcommand("params", "parameter counts of both variants");
  auto* shapes = app.add_subcommand("shapes", "layer output sizes for a clip length");
  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  auto* sal = app.add_subcommand("saliency", "Grad-CAM maps as PGM images");
  const std::vector<CLI::App*> all{train, eval, prep, params, shapes, grad, sal};

  for (auto* sc : all) {
    sc->add_option("--config", config_path, "flat JSON config file")->check(CLI::ExistingFile);
    sc->add_option("--seed", seed, "random seed");
    sc->add_option("--threads", threads, "worker threads (default 1)");
  }
  for (auto* sc : {train, params, shapes}) {
    sc->add_option("--variant", variant, "meranet18 or resnet3d18");
    sc->add_option("--ch-variant", ch_variant, "channel attention sub-network: scnn or smlp");
    sc->add_option("--st-kernel", st_kernel, "spatio-temporal attention kernel (3, 5 or 7)");
    sc->add_option("--reduction", reduction, "channel attention reduction ratio");
    sc->add_option("--channels", channels, "channel plan, e.g. 8,8,16,16,32,32,64,64")
        ->delimiter(',');
  }
  for (auto* sc : {train, eval, prep, sal}) sc->add_option("--data", data, "manifest file or directory");
  for (auto* sc : {train, eval, prep, sal}) sc->add_option("--out", out_dir, "output path");
  for (auto* sc : {prep, shapes}) {
    sc->add_option("--t", t, "frames per clip");
    sc->add_option("--size", size, "spatial side length");
  }
  for (auto* sc : {eval, sal}) {
    sc->add_option("--checkpoint", checkpoint, "checkpoint directory");
    sc->add_option("--split", split, "train, val or test");
  }
  train->add_option("--epochs", epochs);
  train->add_option("--batch", batch);
  train->add_option("--lr", lr, "initial learning rate");
  train->add_option("--momentum", momentum);
  train->add_option("--weight-decay", weight_decay);
  train->add_option("--warmup", warmup, "linear warmup epochs");
  train->add_flag("--no-augment", no_augment, "disable random horizontal flips");
  sal->add_option("--layer", layer, "feature volume, e.g. block4_2/st");
  sal->add_option("--class", target, "target class (default: predicted)");
  sal->add_option("--frame", frame, "single frame to export (default: all)");
  sal->add_option("--clip", clip, "clip id (default: first clip of --split)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "meranet: " << e.what() << '\n';
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return 2;
  }
  CLI::App* cmd = app.get_subcommands().front();
  const std::string name = cmd->get_name();

  CliSettings s;
  try {
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(f);
      } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::invalid_argument, "invalid config: " + std::string(e.what()));
      }
      apply_json(s, j);
    }
    try {
      if (variant) s.model.variant = parse_variant(*variant);
      if (ch_variant) s.model.ch_variant = parse_channel_variant(*ch_variant);
    } catch (const Error& e) {
      throw Error(Errc::invalid_argument, std::string("invalid config: ") + e.what());
    }
    if (st_kernel) s.model.st_kernel = *st_kernel;
    if (reduction) s.model.reduction = *reduction;
    if (!channels.empty()) s.model.channel_plan = channels;
    if (seed) s.model.seed = s.train.seed = *seed;
    if (epochs) s.train.epochs = *epochs;
    if (batch) s.train.batch = *batch;
    if (lr) s.train.lr = *lr;
    if (momentum) s.train.momentum = *momentum;
    if (weight_decay) s.train.weight_decay = *weight_decay;
    if (warmup) s.train.warmup = *warmup;
    if (no_augment) s.train.augment = false;
    if (t) s.t = *t;
    if (size) s.size = *size;
    if (threads) s.threads = *threads;
    if (data) s.data = *data;
    if (out_dir) s.out = *out_dir;
    if (checkpoint) s.checkpoint = *checkpoint;
    validate(s);
  } catch (const Error& e) {
    err << "meranet: " << e.what() << '\n';
    return 2;
  }
  set_num_threads(s.threads);

  try {
    const auto echo = to_json(s);
    if (name == "train") {
      out << "effective config\n" << echo.dump(2) << '\n';
      return cmd_train(s, echo, out);
    }
    if (name == "eval") {
      const int rc = cmd_eval(s, split, out);
      out << "effective config\n" << to_json(s).dump(2) << '\n';
      return rc;
    }
    if (name == "saliency") {
      SaliencyRequest q;
      q.clip = clip.value_or("");
      q.split = split;
      q.layer = layer.value_or("");
      q.target = target;
      q.frame = frame;
      const int rc = cmd_saliency(s, q, out);
      out << "effective config\n" << to_json(s).dump(2) << '\n';
      return rc;
    }
    out << "effective config\n" << echo.dump(2) << '\n';
    if (name == "preprocess") return cmd_preprocess(s, out);
    if (name == "params") return cmd_params(s, std::string(to_string(s.model.variant)), out);
    if (name == "shapes") return cmd_shapes(s, out);
    return cmd_gradcheck(s, out);
  } catch (const detail::UsageError& e) {
    err << "meranet: " << e.what() << '\n' << cmd->help();
    return 2;
  } catch (const std::exception& e) {
    err << "meranet: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace meranet
