#pragma once

// Mini RethNet: an Xception-style encoder built from depthwise separable
// convolutions with an optional REthinker block after every stage, followed
// by a DeepLabv3+-style decoder (no ASPP).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <type_traits>
#include <vector>

#include "rethseg/config.hpp"
#include "rethseg/ops.hpp"
#include "rethseg/rethinker.hpp"
#include "rethseg/rng.hpp"
#include "rethseg/tape.hpp"
#include "rethseg/tensor.hpp"

namespace rethseg {

enum class StatsMode { train, eval };

inline constexpr double kNormMomentum = 0.99;
inline constexpr double kNormEps = 1e-5;

struct StageConfig {
  std::size_t out_channels = 16;
  int stride = 2;
  std::optional<BlockVariant> variant;  // nullopt: no block after this stage
  std::size_t n = 1;                    // slicing coefficient of the block

  friend bool operator==(const StageConfig&, const StageConfig&) = default;
};

/// Slicing coefficient for a stage of the given extent: 4x4 patches when the
/// extent allows it, otherwise the largest n leaving patches of at least 2.
inline std::size_t patch_rule_n(std::size_t extent) {
  if (extent >= 4 && extent % 4 == 0) return extent / 4;
  for (std::size_t n = extent / 2; n >= 1; --n) {
    if (extent % n == 0 && extent / n >= 2) return n;
  }
  return 1;
}

struct RethNetConfig {
  std::size_t input_h = 64;
  std::size_t input_w = 64;
  std::size_t input_c = 3;
  std::size_t num_classes = 6;
  std::vector<StageConfig> stages;
  std::size_t decoder_low_level_stage = 1;
  std::size_t decoder_channels = 32;
  std::size_t decoder_low_level_channels = 16;
  std::size_t se_ratio = 4;
  std::uint64_t seed = 0;

  friend bool operator==(const RethNetConfig&, const RethNetConfig&) = default;

  /// 64x64x3 input, stages of 16/32/64 channels at stride 2 each, a block of
  /// `variant` after every stage with 4x4 patches, decoder from stage 1.
  static RethNetConfig desk_default(std::optional<BlockVariant> variant = BlockVariant::rethinker_e_convlstm) {
    RethNetConfig cfg;
    std::size_t extent = cfg.input_h;
    for (std::size_t ch : {16u, 32u, 64u}) {
      extent /= 2;
      cfg.stages.push_back(StageConfig{ch, 2, variant, patch_rule_n(extent)});
    }
    return cfg;
  }

  [[nodiscard]] std::size_t output_stride() const {
    std::size_t s = 1;
    for (const auto& st : stages) s *= static_cast<std::size_t>(st.stride);
    return s;
  }

  /// Spatial extent after stage `i` for an input of extent `input`.
  [[nodiscard]] std::size_t stage_extent(std::size_t i, std::size_t input) const {
    std::size_t e = input;
    for (std::size_t k = 0; k <= i; ++k) e = (e + static_cast<std::size_t>(stages[k].stride) - 1) / stages[k].stride;
    return e;
  }

  void validate() const {
    if (num_classes < 2) throw ShapeError("model needs at least 2 classes, got " + std::to_string(num_classes));
    if (stages.empty()) throw ShapeError("model needs at least one encoder stage");
    if (input_h == 0 || input_w == 0 || input_c == 0) throw ShapeError("input extents must be positive");
    const std::size_t os = output_stride();
    if (os != 4 && os != 8 && os != 16) {
      throw ShapeError("cumulative encoder stride must be 4, 8 or 16, got " + std::to_string(os));
    }
    if (input_h % os != 0 || input_w % os != 0) {
      throw ShapeError("input " + std::to_string(input_h) + "x" + std::to_string(input_w) +
                       " is not divisible by output stride " + std::to_string(os));
    }
    if (decoder_low_level_stage >= stages.size()) {
      throw ShapeError("decoder low-level stage " + std::to_string(decoder_low_level_stage) + " does not exist");
    }
    if (decoder_channels == 0 || decoder_low_level_channels == 0) throw ShapeError("decoder widths must be positive");
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const StageConfig& s = stages[i];
      const std::string where = "stage " + std::to_string(i) + ": ";
      if (s.stride < 1) throw ShapeError(where + "stride must be >= 1");
      if (s.out_channels == 0) throw ShapeError(where + "out_channels must be positive");
      if (!s.variant) continue;
      const std::size_t h = stage_extent(i, input_h), w = stage_extent(i, input_w);
      if (s.n == 0 || h % s.n != 0 || w % s.n != 0) {
        throw ShapeError(where + "extent " + std::to_string(h) + "x" + std::to_string(w) +
                         " is not divisible by slicing coefficient n=" + std::to_string(s.n));
      }
      if (se_ratio == 0 || s.out_channels % se_ratio != 0) {
        throw ShapeError(where + "depth " + std::to_string(s.out_channels) + " is not divisible by SE ratio " +
                         std::to_string(se_ratio));
      }
    }
  }

  [[nodiscard]] KeyValues to_keyvalues() const {
    KeyValues kv;
    kv.set_number("input_h", input_h);
    kv.set_number("input_w", input_w);
    kv.set_number("input_c", input_c);
    kv.set_number("num_classes", num_classes);
    kv.set_number("decoder_low_level_stage", decoder_low_level_stage);
    kv.set_number("decoder_channels", decoder_channels);
    kv.set_number("decoder_low_level_channels", decoder_low_level_channels);
    kv.set_number("se_ratio", se_ratio);
    kv.set_number("seed", seed);
    kv.set_number("stages.count", stages.size());
    for (std::size_t i = 0; i < stages.size(); ++i) {
      const std::string p = "stages." + std::to_string(i) + ".";
      kv.set_number(p + "out_channels", stages[i].out_channels);
      kv.set_number(p + "stride", stages[i].stride);
      kv.set(p + "variant", stages[i].variant ? std::string(variant_name(*stages[i].variant)) : "none");
      kv.set_number(p + "n", stages[i].n);
    }
    return kv;
  }

  /// Missing keys keep their desk-default values. Stages are read while
  /// `stages.<i>.out_channels` keys exist (or `stages.count` when given).
  static RethNetConfig from_keyvalues(const KeyValues& kv) {
    RethNetConfig cfg = desk_default();
    cfg.input_h = kv.number_or<std::size_t>("input_h", cfg.input_h);
    cfg.input_w = kv.number_or<std::size_t>("input_w", cfg.input_w);
    cfg.input_c = kv.number_or<std::size_t>("input_c", cfg.input_c);
    cfg.num_classes = kv.number_or<std::size_t>("num_classes", cfg.num_classes);
    cfg.decoder_low_level_stage = kv.number_or<std::size_t>("decoder_low_level_stage", cfg.decoder_low_level_stage);
    cfg.decoder_channels = kv.number_or<std::size_t>("decoder_channels", cfg.decoder_channels);
    cfg.decoder_low_level_channels =
        kv.number_or<std::size_t>("decoder_low_level_channels", cfg.decoder_low_level_channels);
    cfg.se_ratio = kv.number_or<std::size_t>("se_ratio", cfg.se_ratio);
    cfg.seed = kv.number_or<std::uint64_t>("seed", cfg.seed);
    const bool has_stage_keys = kv.contains("stages.count") || kv.contains("stages.0.out_channels");
    if (has_stage_keys) {
      std::size_t count = 0;
      if (kv.contains("stages.count")) {
        count = kv.number<std::size_t>("stages.count");
      } else {
        while (kv.contains("stages." + std::to_string(count) + ".out_channels")) ++count;
      }
      const std::vector<StageConfig> defaults = cfg.stages;
      cfg.stages.assign(count, StageConfig{});
      std::size_t extent_h = cfg.input_h;
      for (std::size_t i = 0; i < count; ++i) {
        const std::string p = "stages." + std::to_string(i) + ".";
        StageConfig& s = cfg.stages[i];
        if (i < defaults.size()) s = defaults[i];
        s.out_channels = kv.number_or<std::size_t>(p + "out_channels", s.out_channels);
        s.stride = kv.number_or<int>(p + "stride", s.stride);
        const std::string variant = kv.get_or(p + "variant", s.variant ? std::string(variant_name(*s.variant)) : "none");
        s.variant = variant == "none" ? std::nullopt : std::optional<BlockVariant>(parse_variant(variant));
        extent_h = (extent_h + static_cast<std::size_t>(std::max(s.stride, 1)) - 1) / std::max(s.stride, 1);
        s.n = kv.contains(p + "n") ? kv.number<std::size_t>(p + "n") : patch_rule_n(extent_h);
      }
    } else {
      std::size_t extent_h = cfg.input_h;
      for (auto& s : cfg.stages) {
        extent_h /= static_cast<std::size_t>(s.stride);
        s.n = patch_rule_n(extent_h);
      }
    }
    return cfg;
  }
};

template <class T>
struct Model {
  RethNetConfig config;
  std::map<std::string, Tensor<T>> parameters;
  std::map<std::string, ChannelStats<T>> running_stats;  // keyed by normalization layer name
  std::size_t stat_updates = 0;                           // calls to update_running_stats so far

  [[nodiscard]] std::size_t parameter_count() const {
    std::size_t total = 0;
    for (const auto& [name, t] : parameters) total += t.size();
    return total;
  }
};

template <class T>
using ParamVars = std::map<std::string, Var<T>>;

namespace detail {

inline std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 1469598103934665603ULL;  // FNV-1a
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

template <class T>
class ModelBuilder {
 public:
  explicit ModelBuilder(Model<T>& model) : model_(model) {}

  // Uniform(-sqrt(3/fan_in), sqrt(3/fan_in)); each tensor draws from its own
  // stream keyed by name so that unrelated parameters do not shift when the
  // architecture changes elsewhere.
  void uniform(const std::string& name, Shape shape, std::size_t fan_in) {
    Rng rng(mix_seed(model_.config.seed, name_hash(name)));
    const double bound = std::sqrt(3.0 / static_cast<double>(fan_in));
    Tensor<T> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(-bound, bound));
    add(name, std::move(t));
  }

  void constant(const std::string& name, Shape shape, T value) { add(name, Tensor<T>(std::move(shape), value)); }

  void norm(const std::string& name, std::size_t channels) {
    constant(name + ".gamma", {channels}, T{1});
    constant(name + ".beta", {channels}, T{0});
    model_.running_stats[name] = ChannelStats<T>{std::vector<T>(channels, T{0}), std::vector<T>(channels, T{1})};
  }

  void separable(const std::string& name, std::size_t cin, std::size_t cout) {
    uniform(name + ".dw", {3, 3, cin}, 9);
    norm(name + ".dw_norm", cin);
    uniform(name + ".pw", {1, 1, cin, cout}, cin);
    norm(name + ".pw_norm", cout);
  }

  void block(const std::string& name, BlockVariant variant, std::size_t d, const Shape& patch, std::size_t ratio) {
    const std::size_t hidden = d / ratio;
    uniform(name + ".se.w1", {d, hidden}, d);
    constant(name + ".se.b1", {hidden}, T{0});
    uniform(name + ".se.w2", {hidden, d}, hidden);
    constant(name + ".se.b2", {d}, T{0});
    switch (variant) {
      case BlockVariant::baseline_c:
        uniform(name + ".conv", {3, 3, d, d}, 9 * d);
        break;
      case BlockVariant::rethinker_d_conv3d:
        uniform(name + ".conv3d", {3, 3, 3, d, d}, 27 * d);
        break;
      case BlockVariant::rethinker_e_convlstm:
        for (const char* w : {"w_vi", "w_hi", "w_vf", "w_hf", "w_vc", "w_hc", "w_vo", "w_ho"}) {
          uniform(name + ".lstm." + w, {3, 3, d, d}, 9 * d);
        }
        for (const char* w : {"w_ci", "w_cf", "w_co"}) constant(name + ".lstm." + w, patch, T{0});
        constant(name + ".lstm.b_i", {d}, T{0});
        constant(name + ".lstm.b_f", {d}, T{1});
        constant(name + ".lstm.b_c", {d}, T{0});
        constant(name + ".lstm.b_o", {d}, T{0});
        break;
    }
  }

 private:
  void add(const std::string& name, Tensor<T> t) {
    if (!model_.parameters.emplace(name, std::move(t)).second) {
      throw UsageError("duplicate parameter name '" + name + "'");
    }
  }

  Model<T>& model_;
};

inline std::string stage_name(std::size_t i) { return "stage" + std::to_string(i); }

}  // namespace detail

/// Deterministic construction from cfg.seed. Each stage is two separable
/// convolutions and a strided separable convolution (depthwise -> norm ->
/// ReLU -> pointwise -> norm -> ReLU), optionally followed by a block.
template <class T>
Model<T> build_model(const RethNetConfig& cfg) {
  cfg.validate();
  Model<T> model;
  model.config = cfg;
  detail::ModelBuilder<T> b(model);
  std::size_t cin = cfg.input_c;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const StageConfig& s = cfg.stages[i];
    const std::string name = detail::stage_name(i);
    b.separable(name + ".sep0", cin, s.out_channels);
    b.separable(name + ".sep1", s.out_channels, s.out_channels);
    b.separable(name + ".sep2", s.out_channels, s.out_channels);
    if (s.variant) {
      const Shape patch{cfg.stage_extent(i, cfg.input_h) / s.n, cfg.stage_extent(i, cfg.input_w) / s.n, s.out_channels};
      b.block(name + ".block", *s.variant, s.out_channels, patch, cfg.se_ratio);
    }
    cin = s.out_channels;
  }
  const std::size_t low_c = cfg.stages[cfg.decoder_low_level_stage].out_channels;
  b.uniform("decoder.deep_proj", {1, 1, cin, cfg.decoder_channels}, cin);
  b.norm("decoder.deep_norm", cfg.decoder_channels);
  b.uniform("decoder.low_proj", {1, 1, low_c, cfg.decoder_low_level_channels}, low_c);
  b.norm("decoder.low_norm", cfg.decoder_low_level_channels);
  b.separable("decoder.sep0", cfg.decoder_channels + cfg.decoder_low_level_channels, cfg.decoder_channels);
  b.separable("decoder.sep1", cfg.decoder_channels, cfg.decoder_channels);
  b.uniform("decoder.classifier.w", {1, 1, cfg.decoder_channels, cfg.num_classes}, cfg.decoder_channels);
  b.constant("decoder.classifier.b", {cfg.num_classes}, T{0});
  return model;
}

/// Places every parameter on the tape as a leaf.
template <class T>
ParamVars<T> bind_parameters(Tape<T>& tape, const Model<T>& model, bool requires_grad) {
  ParamVars<T> vars;
  for (const auto& [name, t] : model.parameters) vars.emplace(name, tape.leaf(t, requires_grad));
  return vars;
}

/// Train mode normalizes with the statistics of x and records them in
/// `batch_stats`; eval mode uses the tracked running statistics.
template <class T>
Var<T> normalization_layer(Var<T> x, Var<T> gamma, Var<T> beta, StatsMode mode, const ChannelStats<T>& running,
                           std::type_identity_t<ChannelStats<T>>* batch_stats = nullptr,
                           std::type_identity_t<T> eps = static_cast<T>(kNormEps)) {
  if (x.value().rank() != 3) throw ShapeError("normalization expects (H,W,C), got " + to_string(x.shape()));
  if (mode == StatsMode::train) return normalize_train(x, gamma, beta, eps, batch_stats);
  return normalize_eval(x, gamma, beta, running, eps);
}

/// running <- m * running + (1 - m) * batch with m = min(momentum, k / (k + 1))
/// after k earlier updates, so the first updates form a plain average and the
/// initial mean 0 / var 1 is forgotten.
template <class T>
void update_running_stats(Model<T>& model, const std::map<std::string, ChannelStats<T>>& batch_stats,
                          std::type_identity_t<T> momentum = static_cast<T>(kNormMomentum)) {
  const T k = static_cast<T>(model.stat_updates);
  momentum = std::min(momentum, k / (k + T{1}));
  ++model.stat_updates;
  for (const auto& [name, batch] : batch_stats) {
    auto it = model.running_stats.find(name);
    if (it == model.running_stats.end()) throw UsageError("unknown normalization layer '" + name + "'");
    for (std::size_t c = 0; c < batch.mean.size(); ++c) {
      it->second.mean[c] = momentum * it->second.mean[c] + (T{1} - momentum) * batch.mean[c];
      it->second.var[c] = momentum * it->second.var[c] + (T{1} - momentum) * batch.var[c];
    }
  }
}

namespace detail {

template <class T>
class ForwardPass {
 public:
  ForwardPass(const Model<T>& model, const ParamVars<T>& p, StatsMode mode,
              std::map<std::string, ChannelStats<T>>* batch_stats)
      : model_(model), p_(p), mode_(mode), batch_stats_(batch_stats) {}

  Var<T> param(const std::string& name) const {
    auto it = p_.find(name);
    if (it == p_.end()) throw UsageError("parameter '" + name + "' is not bound");
    return it->second;
  }

  Var<T> norm_relu(Var<T> x, const std::string& name) {
    ChannelStats<T> stats;
    Var<T> y = normalization_layer(x, param(name + ".gamma"), param(name + ".beta"), mode_,
                                   model_.running_stats.at(name), mode_ == StatsMode::train ? &stats : nullptr);
    if (batch_stats_ != nullptr && mode_ == StatsMode::train) (*batch_stats_)[name] = std::move(stats);
    return relu(y);
  }

  Var<T> separable(Var<T> x, const std::string& name, int stride) {
    Var<T> y = norm_relu(depthwise_conv2d(x, param(name + ".dw"), stride), name + ".dw_norm");
    return norm_relu(conv2d(y, param(name + ".pw")), name + ".pw_norm");
  }

  // The patch extent is fixed by the config (the peepholes are sized to it);
  // for inputs other than the configured size the slicing coefficient follows.
  std::size_t slices(Var<T> x, std::size_t stage, const StageConfig& s) const {
    const RethNetConfig& cfg = model_.config;
    const std::size_t ph = cfg.stage_extent(stage, cfg.input_h) / s.n;
    const std::size_t pw = cfg.stage_extent(stage, cfg.input_w) / s.n;
    const std::size_t h = x.shape()[0], w = x.shape()[1];
    if (h % ph != 0 || w % pw != 0 || h / ph != w / pw) {
      throw ShapeError("stage " + std::to_string(stage) + ": extent " + std::to_string(h) + "x" + std::to_string(w) +
                       " cannot be sliced into " + std::to_string(ph) + "x" + std::to_string(pw) + " patches");
    }
    return h / ph;
  }

  Var<T> block(Var<T> x, std::size_t stage, const StageConfig& s) {
    const std::string name = stage_name(stage) + ".block";
    BlockParams<T> bp;
    bp.se = SEParams<T>{param(name + ".se.w1"), param(name + ".se.b1"), param(name + ".se.w2"),
                        param(name + ".se.b2"), model_.config.se_ratio};
    switch (*s.variant) {
      case BlockVariant::baseline_c:
        bp.conv_kernel = param(name + ".conv");
        break;
      case BlockVariant::rethinker_d_conv3d:
        bp.conv3d_kernel = param(name + ".conv3d");
        break;
      case BlockVariant::rethinker_e_convlstm: {
        const std::string l = name + ".lstm.";
        bp.convlstm = ConvLSTMParams<T>{param(l + "w_vi"), param(l + "w_hi"), param(l + "w_vf"), param(l + "w_hf"),
                                        param(l + "w_vc"), param(l + "w_hc"), param(l + "w_vo"), param(l + "w_ho"),
                                        param(l + "w_ci"), param(l + "w_cf"), param(l + "w_co"), param(l + "b_i"),
                                        param(l + "b_f"),  param(l + "b_c"),  param(l + "b_o")};
        break;
      }
    }
    const std::size_t n = slices(x, stage, s);
    try {
      return rethinker_block(x, *s.variant, n, bp);
    } catch (const ShapeError& e) {
      throw ShapeError("stage " + std::to_string(stage) + ": " + e.what());
    }
  }

 private:
  const Model<T>& model_;
  const ParamVars<T>& p_;
  StatsMode mode_;
  std::map<std::string, ChannelStats<T>>* batch_stats_;
};

}  // namespace detail

/// Per-pixel logits (H, W, K) for an (H, W, C) image.
template <class T>
Var<T> forward(const Model<T>& model, const ParamVars<T>& params, Var<T> image, StatsMode mode,
               std::map<std::string, ChannelStats<T>>* batch_stats = nullptr) {
  const RethNetConfig& cfg = model.config;
  const Shape& in = image.shape();
  if (in.size() != 3 || in[2] != cfg.input_c) {
    throw ShapeError("forward: image " + to_string(in) + " does not have " + std::to_string(cfg.input_c) + " channels");
  }
  const std::size_t os = cfg.output_stride();
  if (in[0] % os != 0 || in[1] % os != 0) {
    throw ShapeError("forward: image " + std::to_string(in[0]) + "x" + std::to_string(in[1]) +
                     " is not divisible by output stride " + std::to_string(os));
  }
  const std::size_t height = in[0], width = in[1];
  detail::ForwardPass<T> pass(model, params, mode, batch_stats);
  Var<T> x = image;
  std::vector<Var<T>> features;
  for (std::size_t i = 0; i < cfg.stages.size(); ++i) {
    const StageConfig& s = cfg.stages[i];
    const std::string name = detail::stage_name(i);
    x = pass.separable(x, name + ".sep0", 1);
    x = pass.separable(x, name + ".sep1", 1);
    x = pass.separable(x, name + ".sep2", s.stride);
    if (s.variant) x = pass.block(x, i, s);
    features.push_back(x);
  }
  Var<T> low = features[cfg.decoder_low_level_stage];
  const std::size_t low_h = low.shape()[0], low_w = low.shape()[1];
  Var<T> deep = pass.norm_relu(conv2d(x, pass.param("decoder.deep_proj")), "decoder.deep_norm");
  deep = bilinear_resize(deep, low_h, low_w);
  low = pass.norm_relu(conv2d(low, pass.param("decoder.low_proj")), "decoder.low_norm");
  Var<T> y = concat_last<T>({deep, low});
  y = pass.separable(y, "decoder.sep0", 1);
  y = pass.separable(y, "decoder.sep1", 1);
  Var<T> logits = add_channel_bias(conv2d(y, pass.param("decoder.classifier.w")), pass.param("decoder.classifier.b"));
  return bilinear_resize(logits, height, width);
}

/// Eval-mode logits without gradient bookkeeping.
template <class T>
Tensor<T> predict_logits(const Model<T>& model, const Tensor<T>& image) {
  Tape<T> tape;
  const ParamVars<T> params = bind_parameters(tape, model, false);
  return forward(model, params, tape.constant(image), StatsMode::eval).value();
}

/// Per-pixel argmax of logits (H, W, K), row-major.
template <class T>
std::vector<int> argmax_labels(const Tensor<T>& logits) {
  const std::size_t k = logits.dim(2), pixels = logits.dim(0) * logits.dim(1);
  std::vector<int> labels(pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    const T* row = logits.data().data() + p * k;
    labels[p] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return labels;
}

}  // namespace rethseg
