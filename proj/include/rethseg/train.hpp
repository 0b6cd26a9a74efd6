#pragma once

// Training protocol: step-decayed learning rate, classical momentum with
// gradients averaged over small accumulation groups, binary checkpoints,
// evaluation, inference export and multi-seed ablation.

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "rethseg/config.hpp"
#include "rethseg/data.hpp"
#include "rethseg/metrics.hpp"
#include "rethseg/network.hpp"
#include "rethseg/rng.hpp"
#include "rethseg/tensor.hpp"

namespace rethseg {

struct TrainConfig {
  double base_lr = 0.001;
  std::size_t lr_drop_every = 50;
  double lr_drop_factor = 10;
  double momentum = 0.9;
  std::size_t epochs = 200;
  std::size_t crop_h = 64, crop_w = 64;
  std::uint64_t seed = 0;  // drives initialization, sample order and augmentation
  std::string dataset_root;
  std::size_t batch = 4;   // samples whose gradients are averaged per step
  bool augment = true;
  std::size_t max_train_samples = 0;  // 0 uses the whole split
  RethNetConfig model = RethNetConfig::desk_default();

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;

  void validate() const {
    if (!(base_lr > 0)) throw ConfigError("base_lr must be positive");
    if (!(momentum >= 0 && momentum < 1)) throw ConfigError("momentum must lie in [0, 1)");
    if (!(lr_drop_factor > 1)) throw ConfigError("lr_drop_factor must exceed 1");
    if (lr_drop_every == 0) throw ConfigError("lr_drop_every must be positive");
    if (batch == 0) throw ConfigError("batch must be positive");
    if (crop_h == 0 || crop_w == 0) throw ConfigError("crop extents must be positive");
    model.validate();
  }

  [[nodiscard]] KeyValues to_keyvalues() const {
    KeyValues kv;
    kv.set_number("base_lr", base_lr);
    kv.set_number("lr_drop_every", lr_drop_every);
    kv.set_number("lr_drop_factor", lr_drop_factor);
    kv.set_number("momentum", momentum);
    kv.set_number("epochs", epochs);
    kv.set_number("crop_h", crop_h);
    kv.set_number("crop_w", crop_w);
    kv.set_number("seed", seed);
    kv.set("dataset_root", dataset_root);
    kv.set_number("batch", batch);
    kv.set("augment", augment ? "true" : "false");
    kv.set_number("max_train_samples", max_train_samples);
    kv.merge(model.to_keyvalues(), "model");
    return kv;
  }

  static TrainConfig from_keyvalues(const KeyValues& kv) {
    TrainConfig c;
    c.base_lr = kv.number_or<double>("base_lr", c.base_lr);
    c.lr_drop_every = kv.number_or<std::size_t>("lr_drop_every", c.lr_drop_every);
    c.lr_drop_factor = kv.number_or<double>("lr_drop_factor", c.lr_drop_factor);
    c.momentum = kv.number_or<double>("momentum", c.momentum);
    c.epochs = kv.number_or<std::size_t>("epochs", c.epochs);
    c.crop_h = kv.number_or<std::size_t>("crop_h", c.crop_h);
    c.crop_w = kv.number_or<std::size_t>("crop_w", c.crop_w);
    c.seed = kv.number_or<std::uint64_t>("seed", c.seed);
    c.dataset_root = kv.get_or("dataset_root", c.dataset_root);
    c.batch = kv.number_or<std::size_t>("batch", c.batch);
    const std::string aug = kv.get_or("augment", c.augment ? "true" : "false");
    if (aug != "true" && aug != "false") throw ConfigError("augment must be true or false, got '" + aug + "'");
    c.augment = aug == "true";
    c.max_train_samples = kv.number_or<std::size_t>("max_train_samples", c.max_train_samples);
    c.model = RethNetConfig::from_keyvalues(kv.subtree("model"));
    c.model.seed = c.seed;
    c.validate();
    return c;
  }
};

/// base_lr / drop_factor^(epoch div drop_every)
inline double lr_at(std::size_t epoch, const TrainConfig& cfg) {
  return cfg.base_lr / std::pow(cfg.lr_drop_factor, static_cast<double>(epoch / cfg.lr_drop_every));
}

template <class T>
using TensorMap = std::map<std::string, Tensor<T>>;

/// v <- mu v + g, p <- p - lr v for every named parameter.
template <class T>
void momentum_step(TensorMap<T>& params, const TensorMap<T>& grads, TensorMap<T>& velocities, T lr, T mu) {
  for (auto& [name, p] : params) {
    const auto g = grads.find(name);
    if (g == grads.end()) throw UsageError("missing gradient entry for '" + name + "'");
    const auto v = velocities.find(name);
    if (v == velocities.end()) throw UsageError("missing velocity entry for '" + name + "'");
    if (g->second.shape() != p.shape() || v->second.shape() != p.shape()) {
      throw ShapeError("momentum_step: shape mismatch for '" + name + "'");
    }
    auto& vel = v->second.storage();
    const auto& grad = g->second.storage();
    auto& value = p.storage();
    for (std::size_t i = 0; i < value.size(); ++i) {
      vel[i] = mu * vel[i] + grad[i];
      value[i] -= lr * vel[i];
    }
  }
}

template <class T>
struct TrainState {
  TrainConfig config;
  Model<T> model;
  TensorMap<T> velocity;
  std::size_t epoch = 0;  // completed epochs
  Rng rng;
  double best_val_miou = -std::numeric_limits<double>::infinity();
};

template <class T>
TrainState<T> init_state(TrainConfig cfg) {
  cfg.model.seed = cfg.seed;
  cfg.validate();
  TrainState<T> s;
  s.config = cfg;
  s.model = build_model<T>(cfg.model);
  for (const auto& [name, p] : s.model.parameters) s.velocity.emplace(name, Tensor<T>(p.shape()));
  s.rng = Rng(mix_seed(cfg.seed, 0x7261696eULL));
  return s;
}

// ---------------------------------------------------------------------------
// Checkpoints: "RTHN", u32 version, u32-length-prefixed config text, u32
// tensor count, then per tensor: u32 name length, name bytes, u32 rank, u32
// dims, payload. All integers little-endian; the payload holds f32 or f64
// values according to the `precision` entry of the config text.

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  KeyValues meta;
  std::map<std::string, Tensor<double>> tensors;
};

namespace detail {

class ByteWriter {
 public:
  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void bytes(const std::string& s) { buf_ += s; }
  void text(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes(s);
  }
  [[nodiscard]] const std::string& buffer() const { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  ByteReader(std::string data, std::string path) : data_(std::move(data)), path_(std::move(path)) {}

  std::uint32_t u32() {
    need(4, "u32");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8, "u64");
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  std::string bytes(std::size_t n, const char* what) {
    need(n, what);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string text(const char* what) { return bytes(u32(), what); }
  [[nodiscard]] std::size_t offset() const { return pos_; }
  [[nodiscard]] bool done() const { return pos_ == data_.size(); }
  [[noreturn]] void fail(const std::string& what) const {
    throw DataError("checkpoint '" + path_ + "' at byte " + std::to_string(pos_) + ": " + what);
  }

 private:
  void need(std::size_t n, const char* what) const {
    if (data_.size() - pos_ < n) fail(std::string("truncated while reading ") + what);
  }

  std::string data_;
  std::string path_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const Precision precision = parse_precision(ckpt.meta.get("precision"));
  detail::ByteWriter w;
  w.bytes("RTHN");
  w.u32(kCheckpointVersion);
  w.text(ckpt.meta.dump());
  w.u32(static_cast<std::uint32_t>(ckpt.tensors.size()));
  for (const auto& [name, t] : ckpt.tensors) {
    w.text(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : t.storage()) {
      if (precision == Precision::f32) {
        w.u32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        w.u64(std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint '" + path + "'");
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw DataError("write failed for checkpoint '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path + "'");
  detail::ByteReader r({std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()}, path);
  if (r.bytes(4, "magic") != "RTHN") r.fail("bad magic, not a checkpoint");
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    r.fail("unsupported format version " + std::to_string(version) + " (expected " +
           std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  try {
    ckpt.meta = KeyValues::parse(r.text("config text"));
  } catch (const ConfigError& e) {
    r.fail(std::string("config text: ") + e.what());
  }
  Precision precision{};
  try {
    precision = parse_precision(ckpt.meta.get("precision"));
  } catch (const std::exception& e) {
    r.fail(e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t k = 0; k < count; ++k) {
    std::string name = r.text("tensor name");
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) r.fail("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.u32();
      if (d == 0) r.fail("tensor '" + name + "' has a zero extent");
    }
    Tensor<double> t(shape);
    for (auto& v : t.storage()) {
      v = precision == Precision::f32 ? static_cast<double>(std::bit_cast<float>(r.u32()))
                                      : std::bit_cast<double>(r.u64());
    }
    if (!ckpt.tensors.emplace(std::move(name), std::move(t)).second) r.fail("duplicate tensor name");
  }
  if (!r.done()) r.fail("trailing bytes after the last tensor");
  return ckpt;
}

template <class T>
Checkpoint to_checkpoint(const TrainState<T>& s) {
  Checkpoint c;
  c.meta = s.config.to_keyvalues();
  c.meta.set("precision", std::string(precision_name(precision_of<T>())));
  c.meta.set_number("epoch", s.epoch);
  c.meta.set("rng.state", s.rng.state());
  c.meta.set_number("best_val_miou", s.best_val_miou);
  c.meta.set_number("stat_updates", s.model.stat_updates);
  const auto widen = [](const Tensor<T>& t) { return t.template cast<double>(); };
  for (const auto& [name, t] : s.model.parameters) c.tensors.emplace("param." + name, widen(t));
  for (const auto& [name, t] : s.velocity) c.tensors.emplace("velocity." + name, widen(t));
  for (const auto& [name, st] : s.model.running_stats) {
    const Shape shape{st.mean.size()};
    c.tensors.emplace("running_mean." + name, Tensor<T>(shape, st.mean).template cast<double>());
    c.tensors.emplace("running_var." + name, Tensor<T>(shape, st.var).template cast<double>());
  }
  return c;
}

inline Precision checkpoint_precision(const Checkpoint& c) { return parse_precision(c.meta.get("precision")); }

template <class T>
TrainState<T> from_checkpoint(const Checkpoint& c) {
  if (checkpoint_precision(c) != precision_of<T>()) {
    throw DataError("checkpoint precision is " + c.meta.get("precision") + ", requested " +
                    std::string(precision_name(precision_of<T>())));
  }
  TrainState<T> s = init_state<T>(TrainConfig::from_keyvalues(c.meta));
  s.epoch = c.meta.number<std::size_t>("epoch");
  s.rng.restore(c.meta.get("rng.state"));
  s.best_val_miou = c.meta.number<double>("best_val_miou");
  s.model.stat_updates = c.meta.number<std::size_t>("stat_updates");
  const auto take = [&](const std::string& key, const Shape& shape) -> std::vector<T> {
    const auto it = c.tensors.find(key);
    if (it == c.tensors.end()) throw DataError("checkpoint lacks tensor '" + key + "'");
    if (it->second.shape() != shape) {
      throw DataError("checkpoint tensor '" + key + "' has shape " + to_string(it->second.shape()) + ", model expects " +
                      to_string(shape));
    }
    return it->second.template cast<T>().storage();
  };
  for (auto& [name, p] : s.model.parameters) p.storage() = take("param." + name, p.shape());
  for (auto& [name, v] : s.velocity) v.storage() = take("velocity." + name, v.shape());
  for (auto& [name, st] : s.model.running_stats) {
    st.mean = take("running_mean." + name, {st.mean.size()});
    st.var = take("running_var." + name, {st.var.size()});
  }
  const std::size_t expected = s.model.parameters.size() + s.velocity.size() + 2 * s.model.running_stats.size();
  if (c.tensors.size() != expected) throw DataError("checkpoint holds tensors the model does not use");
  return s;
}

template <class T>
void save_state(const std::string& path, const TrainState<T>& s) {
  save_checkpoint(path, to_checkpoint(s));
}

// ---------------------------------------------------------------------------
// Evaluation and inference

/// Eval-mode argmax over every sample, pixels equal to kIgnoreIndex skipped.
template <class T>
ConfusionMatrix evaluate(const Model<T>& model, const std::vector<SegSample>& samples) {
  ConfusionMatrix cm(model.config.num_classes);
  for (const SegSample& s : samples) {
    for (int label : s.mask) {
      if (label != kIgnoreIndex && (label < 0 || static_cast<std::size_t>(label) >= model.config.num_classes)) {
        throw DataError("mask class " + std::to_string(label) + " is outside the model's " +
                        std::to_string(model.config.num_classes) + " classes");
      }
    }
    const auto pred = argmax_labels(predict_logits(model, s.image.template cast<T>()));
    cm.accumulate(pred, s.mask, kIgnoreIndex);
  }
  return cm;
}

/// Fixed class palette, cycling after 10 entries.
inline std::array<unsigned char, 3> class_color(int k) {
  static constexpr std::array<std::array<unsigned char, 3>, 10> palette{{{0, 0, 0},
                                                                         {230, 25, 75},
                                                                         {60, 180, 75},
                                                                         {255, 225, 25},
                                                                         {0, 130, 200},
                                                                         {245, 130, 48},
                                                                         {145, 30, 180},
                                                                         {70, 240, 240},
                                                                         {240, 50, 230},
                                                                         {128, 128, 0}}};
  return palette[static_cast<std::size_t>(k) % palette.size()];
}

/// Background pixels keep the image; other pixels mix it half and half with
/// their class colour.
inline Tensor<double> overlay(const Tensor<double>& image, const std::vector<int>& labels) {
  Tensor<double> out = image;
  const std::size_t pixels = image.dim(0) * image.dim(1);
  for (std::size_t p = 0; p < pixels; ++p) {
    if (labels[p] == 0) continue;
    const auto c = class_color(labels[p]);
    for (std::size_t ch = 0; ch < 3; ++ch) out[3 * p + ch] = 0.5 * image[3 * p + ch] + 0.5 * c[ch] / 255.0;
  }
  return out;
}

/// Writes `<prefix>_mask.pgm` and `<prefix>_overlay.ppm`; returns the labels.
template <class T>
std::vector<int> infer(const Model<T>& model, const std::string& image_path, const std::string& out_prefix) {
  const Tensor<double> image = load_image_ppm(image_path);
  const auto labels = argmax_labels(predict_logits(model, image.template cast<T>()));
  save_mask_pgm(out_prefix + "_mask.pgm", labels, image.dim(0), image.dim(1));
  save_image_ppm(out_prefix + "_overlay.ppm", overlay(image, labels));
  return labels;
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0;
  double train_loss = 0;
  double val_miou = std::numeric_limits<double>::quiet_NaN();
};

template <class T>
using EpochCallback = std::function<void(const TrainState<T>&, const EpochLog&)>;

/// Runs epochs state.epoch .. stop_epoch-1 (at most config.epochs). Sample
/// order and augmentation draw from state.rng; one step averages the
/// gradients of `batch` consecutive samples.
template <class T>
std::vector<EpochLog> run_training(TrainState<T>& state, const std::vector<SegSample>& train,
                                   const std::vector<SegSample>& val, const EpochCallback<T>& on_epoch = {},
                                   std::size_t stop_epoch = std::numeric_limits<std::size_t>::max()) {
  const TrainConfig& cfg = state.config;
  if (train.empty()) throw DataError("training split is empty");
  const std::size_t n = cfg.max_train_samples == 0 ? train.size() : std::min(train.size(), cfg.max_train_samples);
  std::vector<EpochLog> logs;
  const std::size_t last = std::min(stop_epoch, cfg.epochs);
  while (state.epoch < last) {
    const std::size_t epoch = state.epoch;
    const T lr = static_cast<T>(lr_at(epoch, cfg));
    const T mu = static_cast<T>(cfg.momentum);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[state.rng.below(i)]);

    double loss_sum = 0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch, ++step) {
      const std::size_t group = std::min(cfg.batch, n - start);
      TensorMap<T> grads;
      for (const auto& [name, p] : state.model.parameters) grads.emplace(name, Tensor<T>(p.shape()));
      for (std::size_t k = 0; k < group; ++k) {
        const SegSample& raw = train[order[start + k]];
        const SegSample sample = cfg.augment ? augment(raw, state.rng, cfg.crop_h, cfg.crop_w)
                                             : apply_augment(raw, AugmentParams{}, std::min(cfg.crop_h, raw.height()),
                                                             std::min(cfg.crop_w, raw.width()));
        Tape<T> tape;
        const ParamVars<T> params = bind_parameters(tape, state.model, true);
        std::map<std::string, ChannelStats<T>> batch_stats;
        const Var<T> logits = forward(state.model, params, tape.constant(sample.image.template cast<T>()),
                                      StatsMode::train, &batch_stats);
        const Var<T> loss = softmax_cross_entropy(logits, sample.mask, kIgnoreIndex);
        const double value = static_cast<double>(loss.value()[0]);
        if (!std::isfinite(value)) {
          throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step) +
                             " (sample " + std::to_string(order[start + k]) + ")");
        }
        loss_sum += value;
        tape.backward(loss);
        const T scale = T{1} / static_cast<T>(group);
        for (auto& [name, g] : grads) {
          const auto src = params.at(name).grad();
          if (src.empty()) continue;
          if (!std::all_of(src.begin(), src.end(), [](T v) { return std::isfinite(v); })) {
            throw NumericError("non-finite gradient for '" + name + "' at epoch " + std::to_string(epoch) +
                               ", step " + std::to_string(step) + " (sample " + std::to_string(order[start + k]) + ")");
          }
          auto& dst = g.storage();
          for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += scale * src[i];
        }
        update_running_stats(state.model, batch_stats);
      }
      momentum_step(state.model.parameters, grads, state.velocity, lr, mu);
      for (const auto& [name, p] : state.model.parameters) {
        if (!p.all_finite()) {
          throw NumericError("non-finite parameter '" + name + "' after epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(step));
        }
      }
    }
    EpochLog log{epoch, lr_at(epoch, cfg), loss_sum / static_cast<double>(n)};
    if (!val.empty()) {
      log.val_miou = miou(evaluate(state.model, val));
      if (log.val_miou > state.best_val_miou) state.best_val_miou = log.val_miou;
    }
    logs.push_back(log);
    ++state.epoch;
    if (on_epoch) on_epoch(state, log);
  }
  return logs;
}

/// Loads the configured dataset, trains and writes last.ckpt, best.ckpt and
/// log.csv into out_dir. Resumes from `resume` when given.
template <class T>
std::vector<EpochLog> train_to_dir(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                                   const std::optional<std::string>& resume = std::nullopt,
                                   const std::function<void(const EpochLog&)>& report = {}) {
  if (cfg.dataset_root.empty()) throw ConfigError("dataset_root is not set");
  const CoOccurrenceSpec spec = load_dataset_spec(cfg.dataset_root);
  if (spec.num_classes != cfg.model.num_classes) {
    throw DataError("dataset has " + std::to_string(spec.num_classes) + " classes, model has " +
                    std::to_string(cfg.model.num_classes));
  }
  const auto train = load_split(cfg.dataset_root, "train");
  std::vector<SegSample> val;
  if (std::filesystem::is_directory(std::filesystem::path(cfg.dataset_root) / "val")) {
    val = load_split(cfg.dataset_root, "val");
  }
  TrainState<T> state = resume ? from_checkpoint<T>(load_checkpoint(*resume)) : init_state<T>(cfg);
  if (resume) {
    // Only the epoch budget and the dataset location may change on resume.
    TrainConfig expected = state.config;
    expected.epochs = cfg.epochs;
    expected.dataset_root = cfg.dataset_root;
    TrainConfig given = cfg;
    given.model.seed = given.seed;
    const auto have = expected.to_keyvalues(), want = given.to_keyvalues();
    for (const auto& [key, value] : want.entries()) {
      if (!have.contains(key) || have.get(key) != value) {
        throw ConfigError("cannot resume: '" + key + "' is " + value + " in the config but " +
                          (have.contains(key) ? have.get(key) : std::string("unset")) + " in the checkpoint");
      }
    }
    state.config = expected;
  }
  std::filesystem::create_directories(out_dir);
  const auto last = (out_dir / "last.ckpt").string(), best = (out_dir / "best.ckpt").string();
  const auto log_path = out_dir / "log.csv";
  if (!resume || !std::filesystem::exists(log_path)) {
    std::ofstream(log_path) << "epoch,lr,train_loss,val_miou\n";
  }
  if (state.epoch == 0) {
    save_state(last, state);
    save_state(best, state);
  }
  return run_training<T>(state, train, val, [&](const TrainState<T>& s, const EpochLog& log) {
    std::ofstream out(log_path, std::ios::app);
    out.precision(17);
    out << log.epoch << "," << log.lr << "," << log.train_loss << "," << log.val_miou << "\n";
    save_state(last, s);
    if (val.empty() || log.val_miou >= s.best_val_miou) save_state(best, s);
    if (report) report(log);
  });
}

// ---------------------------------------------------------------------------
// Ablation

/// Every stage that carries a block gets `variant`.
inline TrainConfig with_variant(TrainConfig cfg, BlockVariant variant) {
  for (auto& s : cfg.model.stages)
    if (s.variant) s.variant = variant;
  return cfg;
}

/// Configs may differ only in the block variant of their stages.
inline void check_comparable(const std::vector<TrainConfig>& configs) {
  for (std::size_t i = 1; i < configs.size(); ++i) {
    TrainConfig a = configs[0], b = configs[i];
    if (a.model.stages.size() != b.model.stages.size()) {
      throw ConfigError("ablation config " + std::to_string(i) + " has a different number of stages");
    }
    for (std::size_t s = 0; s < a.model.stages.size(); ++s) {
      if (a.model.stages[s].variant.has_value() != b.model.stages[s].variant.has_value()) {
        throw ConfigError("ablation config " + std::to_string(i) + " adds or removes the block of stage " +
                          std::to_string(s));
      }
      a.model.stages[s].variant = b.model.stages[s].variant;
    }
    if (!(a == b)) throw ConfigError("ablation config " + std::to_string(i) + " differs in more than the block variant");
  }
}

struct VariantResult {
  std::string name;
  std::vector<double> miou;         // one entry per seed
  std::vector<ConfusionMatrix> cms;  // test confusion matrix per seed
  [[nodiscard]] double mean() const {
    return std::accumulate(miou.begin(), miou.end(), 0.0) / static_cast<double>(miou.size());
  }
  /// Sample standard deviation (n - 1); 0 for a single seed.
  [[nodiscard]] double sd() const {
    if (miou.size() < 2) return 0;
    const double m = mean();
    double ss = 0;
    for (double v : miou) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(miou.size() - 1));
  }
};

/// Trains every config once per seed (seed i is base seed + i) and scores
/// the final model on `test`.
template <class T>
std::vector<VariantResult> ablate(const std::vector<std::pair<std::string, TrainConfig>>& configs, std::size_t seeds,
                                  const std::vector<SegSample>& train, const std::vector<SegSample>& test,
                                  const std::function<void(const std::string&, std::size_t, const EpochLog&)>& report = {}) {
  std::vector<TrainConfig> plain;
  for (const auto& [name, c] : configs) plain.push_back(c);
  check_comparable(plain);
  if (seeds == 0) throw ConfigError("ablation needs at least one seed");
  std::vector<VariantResult> results;
  for (const auto& [name, base] : configs) {
    VariantResult r{name, {}, {}};
    for (std::size_t k = 0; k < seeds; ++k) {
      TrainConfig cfg = base;
      cfg.seed = base.seed + k;
      TrainState<T> state = init_state<T>(cfg);
      run_training<T>(state, train, {}, [&](const TrainState<T>&, const EpochLog& log) {
        if (report) report(name, k, log);
      });
      r.cms.push_back(evaluate(state.model, test));
      r.miou.push_back(miou(r.cms.back()));
    }
    results.push_back(std::move(r));
  }
  return results;
}

/// Seed mean of the IoU averaged over `classes`.
inline double mean_miou_over(const VariantResult& r, std::span<const int> classes) {
  double sum = 0;
  for (const auto& cm : r.cms) sum += miou_over(cm, classes);
  return sum / static_cast<double>(r.cms.size());
}

inline double pooled_sd(const VariantResult& a, const VariantResult& b) {
  return std::sqrt((a.sd() * a.sd() + b.sd() * b.sd()) / 2);
}

/// Fixed-width text table with one row per variant and the gap of the last
/// row to the first. A non-empty `paired` adds the seed-mean IoU over those
/// classes.
inline std::string ablation_table(const std::vector<VariantResult>& results, std::span<const int> paired = {}) {
  std::string out = "variant          mean_miou  sd_miou  ";
  out += paired.empty() ? "" : " paired_iou";
  out += "  per_seed\n";
  char line[256];
  for (const auto& r : results) {
    std::snprintf(line, sizeof line, "%-16s %.4f     %.4f   ", r.name.c_str(), r.mean(), r.sd());
    out += line;
    if (!paired.empty()) {
      std::snprintf(line, sizeof line, "%.4f     ", mean_miou_over(r, paired));
      out += line;
    }
    for (double v : r.miou) {
      std::snprintf(line, sizeof line, " %.4f", v);
      out += line;
    }
    out += "\n";
  }
  if (results.size() >= 2) {
    const auto& first = results.front();
    const auto& last = results.back();
    std::snprintf(line, sizeof line, "gap %s - %s = %.4f (pooled sd %.4f)\n", last.name.c_str(), first.name.c_str(),
                  last.mean() - first.mean(), pooled_sd(first, last));
    out += line;
  }
  return out;
}

}  // namespace rethseg
