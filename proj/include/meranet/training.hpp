#pragma once

// Learning-rate schedule, SGD with momentum, evaluation, the training loop
// and checkpoint persistence.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "meranet/data.hpp"
#include "meranet/model.hpp"
#include "meranet/tensor_io.hpp"

namespace meranet {

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch = 8;
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::size_t warmup = 0;  // linear warmup epochs before the cosine span
  bool augment = true;     // random horizontal flips
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, Errc::invalid_argument, "epochs must be >= 1");
    require(batch >= 1, Errc::invalid_argument, "batch must be >= 1");
    require(lr > 0 && std::isfinite(lr), Errc::invalid_argument, "lr must be > 0");
    require(momentum >= 0 && momentum < 1, Errc::invalid_argument,
            "momentum must lie in [0,1)");
    require(weight_decay >= 0, Errc::invalid_argument, "weight_decay must be >= 0");
    require(warmup < epochs, Errc::invalid_argument, "warmup must be < epochs");
  }
};

// ---------------------------------------------------------------------------
// schedule and optimizer

/// 0.5*lr0*(1 + cos(pi*e/E)). With warmup W, epochs e < W use lr0*(e+1)/W
/// and the cosine spans the remaining E - W epochs.
inline double cosine_lr(std::size_t e, std::size_t total, double lr0,
                        std::size_t warmup = 0) {
  require(total >= 1, Errc::invalid_argument, "cosine_lr: total epochs must be >= 1");
  require(e <= total, Errc::out_of_range,
          "cosine_lr: epoch " + std::to_string(e) + " > total " + std::to_string(total));
  require(warmup < total, Errc::invalid_argument, "cosine_lr: warmup must be < total");
  if (e < warmup) return lr0 * double(e + 1) / double(warmup);
  const double x = double(e - warmup) / double(total - warmup);
  return 0.5 * lr0 * (1.0 + std::cos(std::numbers::pi * x));
}

/// v <- mu*v - lr*(g + wd*theta); theta <- theta + v
template <class T>
void sgd_step(Tensor<T>& theta, const Tensor<T>& grad, Tensor<T>& velocity, double lr,
              double momentum, double weight_decay = 0.0) {
  require(theta.shape() == grad.shape() && theta.shape() == velocity.shape(),
          Errc::shape_mismatch, "sgd_step: parameter, gradient and velocity differ in shape");
  for (std::size_t i = 0; i < theta.numel(); ++i) {
    const double g = double(grad[i]) + weight_decay * double(theta[i]);
    const T v = static_cast<T>(momentum * double(velocity[i]) - lr * g);
    velocity[i] = v;
    theta[i] = theta[i] + v;
  }
}

template <class T>
class SGD {
 public:
  SGD(double momentum, double weight_decay) : momentum_(momentum), wd_(weight_decay) {}

  void step(const std::string& path, Tensor<T>& theta, const Tensor<T>& grad, double lr) {
    auto it = velocity_.find(path);
    if (it == velocity_.end()) it = velocity_.emplace(path, Tensor<T>(theta.shape())).first;
    sgd_step(theta, grad, it->second, lr, momentum_, wd_);
  }

 private:
  double momentum_, wd_;
  std::map<std::string, Tensor<T>> velocity_;
};

template <class T>
std::map<std::string, Tensor<T>*> parameter_table(ModelGraph<T>& m) {
  std::map<std::string, Tensor<T>*> out;
  visit_tensors(m, [&](const std::string& path, Tensor<T>& t, TensorRole role) {
    if (role == TensorRole::parameter) out.emplace(path, &t);
  });
  return out;
}

// ---------------------------------------------------------------------------
// evaluation

/// Index of the largest entry of row `r` of [N,K]; ties go to the lowest index.
template <class T>
std::size_t argmax_row(const Tensor<T>& logits, std::size_t r) {
  const std::size_t k = logits.extent(1);
  std::size_t best = 0;
  for (std::size_t j = 1; j < k; ++j)
    if (logits[r * k + j] > logits[r * k + best]) best = j;
  return best;
}

struct EvalResult {
  double accuracy = 0;
  double loss = 0;  // mean cross entropy
  std::vector<double> per_class;  // NaN for classes absent from the split
  std::vector<std::vector<std::size_t>> confusion;  // [true][predicted]
  std::vector<std::size_t> predictions;
};

/// Tallies predictions against labels.
inline EvalResult tally(const std::vector<std::size_t>& pred,
                        const std::vector<std::size_t>& labels, std::size_t classes) {
  require(pred.size() == labels.size(), Errc::shape_mismatch, "tally: size mismatch");
  require(!pred.empty(), Errc::invalid_argument, "evaluate: empty split");
  EvalResult r;
  r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    require(labels[i] < classes && pred[i] < classes, Errc::out_of_range,
            "tally: class index out of range");
    ++r.confusion[labels[i]][pred[i]];
    correct += pred[i] == labels[i];
  }
  r.accuracy = double(correct) / double(pred.size());
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t total = 0;
    for (auto v : r.confusion[c]) total += v;
    r.per_class.push_back(total ? double(r.confusion[c][c]) / double(total)
                                : std::numeric_limits<double>::quiet_NaN());
  }
  r.predictions = pred;
  return r;
}

/// Inference-mode accuracy, loss, per-class accuracy and confusion matrix.
template <class T>
EvalResult evaluate(ModelGraph<T>& m, const std::vector<ClipSample>& samples,
                    std::size_t batch = 8) {
  require(!samples.empty(), Errc::invalid_argument, "evaluate: empty split");
  std::vector<std::size_t> pred, labels;
  double loss_sum = 0;
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    std::vector<std::size_t> idx;
    std::vector<std::size_t> lab;
    for (std::size_t i = start; i < std::min(samples.size(), start + batch); ++i) {
      idx.push_back(i);
      lab.push_back(samples[i].label);
    }
    const auto x = stack_batch(samples, idx);
    Tensor<T> logits = forward(m, x.template cast<T>(), Mode::infer);
    const auto ce = softmax_cross_entropy(logits, lab);
    loss_sum += ce.loss * double(idx.size());
    for (std::size_t r = 0; r < idx.size(); ++r) pred.push_back(argmax_row(logits, r));
    labels.insert(labels.end(), lab.begin(), lab.end());
  }
  auto r = tally(pred, labels, m.config.num_classes);
  r.loss = loss_sum / double(samples.size());
  return r;
}

// ---------------------------------------------------------------------------
// configuration <-> JSON

namespace detail {

template <class V>
V config_field(const nlohmann::json& j, const std::string& key) {
  try {
    return j.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw Error(Errc::invalid_argument, "invalid config: field '" + key + "' has the wrong type");
  }
}

}  // namespace detail

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"variant", std::string(to_string(c.variant))},
          {"num_classes", c.num_classes},
          {"ch_variant", std::string(to_string(c.ch_variant))},
          {"st_kernel", c.st_kernel},
          {"reduction", c.reduction},
          {"channel_plan", c.channel_plan},
          {"residual_projection", std::string(to_string(c.residual_projection))},
          {"in_channels", c.in_channels},
          {"seed", c.seed}};
}

/// Overlays the fields present in `j` onto `c`.
inline void apply_json(ModelConfig& c, const nlohmann::json& j) {
  auto str = [&](const char* k) { return detail::config_field<std::string>(j, k); };
  try {
    if (j.contains("variant")) c.variant = parse_variant(str("variant"));
    if (j.contains("ch_variant")) c.ch_variant = parse_channel_variant(str("ch_variant"));
    if (j.contains("residual_projection"))
      c.residual_projection = parse_projection(str("residual_projection"));
  } catch (const Error& e) {
    throw Error(Errc::invalid_argument, std::string("invalid config: ") + e.what());
  }
  if (j.contains("num_classes")) c.num_classes = detail::config_field<std::size_t>(j, "num_classes");
  if (j.contains("st_kernel")) c.st_kernel = detail::config_field<std::size_t>(j, "st_kernel");
  if (j.contains("reduction")) c.reduction = detail::config_field<std::size_t>(j, "reduction");
  if (j.contains("channel_plan"))
    c.channel_plan = detail::config_field<std::vector<std::size_t>>(j, "channel_plan");
  if (j.contains("in_channels")) c.in_channels = detail::config_field<std::size_t>(j, "in_channels");
  if (j.contains("seed")) c.seed = detail::config_field<std::uint64_t>(j, "seed");
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},     {"batch", c.batch},
          {"lr", c.lr},             {"momentum", c.momentum},
          {"weight_decay", c.weight_decay}, {"warmup", c.warmup},
          {"augment", c.augment},   {"seed", c.seed}};
}

inline void apply_json(TrainConfig& c, const nlohmann::json& j) {
  if (j.contains("epochs")) c.epochs = detail::config_field<std::size_t>(j, "epochs");
  if (j.contains("batch")) c.batch = detail::config_field<std::size_t>(j, "batch");
  if (j.contains("lr")) c.lr = detail::config_field<double>(j, "lr");
  if (j.contains("momentum")) c.momentum = detail::config_field<double>(j, "momentum");
  if (j.contains("weight_decay")) c.weight_decay = detail::config_field<double>(j, "weight_decay");
  if (j.contains("warmup")) c.warmup = detail::config_field<std::size_t>(j, "warmup");
  if (j.contains("augment")) c.augment = detail::config_field<bool>(j, "augment");
  if (j.contains("seed")) c.seed = detail::config_field<std::uint64_t>(j, "seed");
}

// ---------------------------------------------------------------------------
// checkpoints

inline constexpr int checkpoint_version = 1;

struct EpochMetrics {
  std::size_t epoch = 0;  // 1-based
  double lr = 0, train_loss = 0, val_loss = 0, val_acc = 0;
};

inline nlohmann::json to_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch}, {"lr", m.lr}, {"train_loss", m.train_loss},
          {"val_loss", m.val_loss}, {"val_acc", m.val_acc}};
}

inline std::string tensor_file_name(const std::string& path) {
  std::string f = path;
  for (auto& ch : f)
    if (ch == '/') ch = '.';
  return f + ".mera";
}

struct CheckpointInfo {
  std::size_t epoch = 0;
  std::vector<EpochMetrics> history;
  nlohmann::json train_config;  // echo; may be null
};

/// Writes `dir/header.json` and `dir/tensors/<path>.mera` for every
/// parameter and batch-norm running statistic.
template <class T>
void save_checkpoint(const fs::path& dir, ModelGraph<T>& m, const CheckpointInfo& info) {
  fs::create_directories(dir / "tensors");
  auto tensors = nlohmann::json::array();
  visit_tensors(m, [&](const std::string& path, Tensor<T>& t, TensorRole role) {
    const auto file = tensor_file_name(path);
    write_tensor(dir / "tensors" / file, t.template cast<float>());
    tensors.push_back({{"path", path},
                       {"file", "tensors/" + file},
                       {"shape", t.shape()},
                       {"role", role == TensorRole::parameter ? "parameter" : "buffer"}});
  });
  auto metrics = nlohmann::json::array();
  for (const auto& e : info.history) metrics.push_back(to_json(e));
  nlohmann::json header{{"format_version", checkpoint_version},
                        {"model", to_json(m.config)},
                        {"train", info.train_config},
                        {"epoch", info.epoch},
                        {"metrics", metrics},
                        {"tensors", tensors}};
  std::ofstream out(dir / "header.json", std::ios::trunc);
  require(static_cast<bool>(out), Errc::io, "cannot write " + (dir / "header.json").string());
  out << header.dump(2) << '\n';
}

struct Checkpoint {
  ModelGraph<float> model;
  CheckpointInfo info;
};

inline Checkpoint load_checkpoint(const fs::path& dir) {
  const auto header_path = dir / "header.json";
  std::ifstream in(header_path);
  require(static_cast<bool>(in), Errc::io, "cannot open " + header_path.string());
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(Errc::parse, header_path.string() + ": " + e.what());
  }
  const auto version = detail::json_field<int>(h, "format_version", "checkpoint header");
  require(version == checkpoint_version, Errc::version_mismatch,
          "checkpoint format version " + std::to_string(version) + " (expected " +
              std::to_string(checkpoint_version) + ")");
  ModelConfig cfg;
  apply_json(cfg, detail::json_field<nlohmann::json>(h, "model", "checkpoint header"));
  Checkpoint ck{build_structure<float>(cfg), {}};
  ck.info.epoch = detail::json_field<std::size_t>(h, "epoch", "checkpoint header");
  if (h.contains("train")) ck.info.train_config = h["train"];
  if (h.contains("metrics"))
    for (const auto& e : h["metrics"])
      ck.info.history.push_back({e.at("epoch").get<std::size_t>(), e.at("lr").get<double>(),
                                 e.at("train_loss").get<double>(),
                                 e.at("val_loss").get<double>(), e.at("val_acc").get<double>()});

  std::map<std::string, nlohmann::json> listed;
  for (const auto& t : detail::json_field<nlohmann::json>(h, "tensors", "checkpoint header"))
    listed.emplace(detail::json_field<std::string>(t, "path", "checkpoint tensor"), t);
  std::size_t seen = 0;
  visit_tensors(ck.model, [&](const std::string& path, Tensor<float>& t, TensorRole) {
    auto it = listed.find(path);
    require(it != listed.end(), Errc::manifest_mismatch,
            "checkpoint header does not list model tensor '" + path + "'");
    ++seen;
    const auto file = dir / detail::json_field<std::string>(it->second, "file", path);
    require(fs::exists(file), Errc::missing_key,
            "checkpoint payload for '" + path + "' is missing (" + file.string() + ")");
    auto v = read_tensor(file);
    const auto listed_shape = detail::json_field<Shape>(it->second, "shape", path);
    require(v.shape() == listed_shape, Errc::manifest_mismatch,
            "checkpoint tensor '" + path + "' has shape " + shape_str(v.shape()) +
                " but the header lists " + shape_str(listed_shape));
    require(v.shape() == t.shape(), Errc::manifest_mismatch,
            "checkpoint tensor '" + path + "' has shape " + shape_str(v.shape()) +
                " but the model expects " + shape_str(t.shape()));
    t = std::move(v);
  });
  require(seen == listed.size(), Errc::manifest_mismatch,
          "checkpoint header lists tensors the model does not have");
  return ck;
}

// ---------------------------------------------------------------------------
// training loop

struct FitOptions {
  std::optional<fs::path> out_dir;  // metrics.csv, checkpoints/{best,final}
  nlohmann::json config_echo;       // stored in checkpoint headers
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct FitResult {
  std::vector<EpochMetrics> history;
  std::size_t best_epoch = 0;
  double best_val_acc = 0, best_val_loss = 0;
};

inline std::string metrics_csv(const std::vector<EpochMetrics>& history) {
  std::string out = "epoch,lr,train_loss,val_loss,val_acc\n";
  char line[160];
  for (const auto& e : history) {
    std::snprintf(line, sizeof line, "%zu,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.lr,
                  e.train_loss, e.val_loss, e.val_acc);
    out += line;
  }
  return out;
}

/// Mini-batch SGD over `train` with per-epoch cosine learning rate. Each
/// epoch shuffles with a seeded stream, keeps the short final batch, and
/// evaluates on `val`. The best checkpoint maximizes validation accuracy,
/// ties going to the lower validation loss.
template <class T>
FitResult fit(ModelGraph<T>& m, const std::vector<ClipSample>& train,
              const std::vector<ClipSample>& val, const TrainConfig& cfg,
              const FitOptions& opt = {}) {
  cfg.validate();
  require(!train.empty(), Errc::invalid_argument, "fit: empty training split");
  require(!val.empty(), Errc::invalid_argument, "fit: empty validation split");
  for (const auto* split : {&train, &val})
    for (const auto& s : *split)
      require(s.label < m.config.num_classes, Errc::out_of_range,
              "fit: clip " + s.id + " label exceeds the model's class count");

  auto params = parameter_table(m);
  SGD<T> opt_state(cfg.momentum, cfg.weight_decay);
  FitResult res;
  if (opt.out_dir) fs::create_directories(*opt.out_dir);
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const double lr = cosine_lr(e, cfg.epochs, cfg.lr, cfg.warmup);
    Rng shuffle_rng(mix_seed(mix_seed(cfg.seed, path_hash("shuffle")), e));
    std::sort(order.begin(), order.end());
    shuffle_rng.shuffle(order.begin(), order.end());

    double loss_sum = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::vector<std::size_t> idx(order.begin() + start,
                                   order.begin() + std::min(order.size(), start + cfg.batch));
      std::vector<std::size_t> labels;
      std::vector<bool> flip;
      for (auto i : idx) {
        labels.push_back(train[i].label);
        if (cfg.augment) {
          auto rng = augment_rng(cfg.seed, e, train[i].id);
          flip.push_back(draw_flip(rng));
        }
      }
      const auto x = stack_batch(train, idx, flip);
      Tape<T> tape;
      auto r = forward(m, tape.input(x.template cast<T>()), Mode::train);
      auto ce = ad::softmax_cross_entropy(r.logits, labels);
      const double loss = tape.scalar(ce.loss);
      require(std::isfinite(loss), Errc::non_finite,
              "fit: non-finite loss at epoch " + std::to_string(e + 1) + ", batch starting " +
                  std::to_string(start));
      loss_sum += loss * double(idx.size());
      const auto grads = backward(tape, ce.loss);
      for (const auto& [path, var] : r.params)
        opt_state.step(path, *params.at(path), grads.wrt(var), lr);
    }

    const auto ev = evaluate(m, val, cfg.batch);
    EpochMetrics em{e + 1, lr, loss_sum / double(train.size()), ev.loss, ev.accuracy};
    res.history.push_back(em);
    const bool better = res.history.size() == 1 || ev.accuracy > res.best_val_acc ||
                        (ev.accuracy == res.best_val_acc && ev.loss < res.best_val_loss);
    if (better) {
      res.best_epoch = e + 1;
      res.best_val_acc = ev.accuracy;
      res.best_val_loss = ev.loss;
    }
    if (opt.out_dir) {
      std::ofstream csv(*opt.out_dir / "metrics.csv", std::ios::trunc);
      require(static_cast<bool>(csv), Errc::io, "cannot write metrics.csv");
      csv << metrics_csv(res.history);
      if (better)
        save_checkpoint(*opt.out_dir / "checkpoints" / "best", m,
                        {e + 1, res.history, opt.config_echo});
    }
    if (opt.on_epoch) opt.on_epoch(em);
  }
  if (opt.out_dir)
    save_checkpoint(*opt.out_dir / "checkpoints" / "final", m,
                    {cfg.epochs, res.history, opt.config_echo});
  return res;
}

}  // namespace meranet
