#pragma once

// Squeeze-and-excitation gating, the peephole ConvLSTM cell, the locally
// constructed ConvLSTM / Conv3D operators over patch sequences, and the
// residual block that composes them.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rethseg/ops.hpp"
#include "rethseg/patch.hpp"
#include "rethseg/tape.hpp"
#include "rethseg/tensor.hpp"

namespace rethseg {

enum class BlockVariant { baseline_c, rethinker_d_conv3d, rethinker_e_convlstm };

inline std::string_view variant_name(BlockVariant v) {
  switch (v) {
    case BlockVariant::baseline_c:
      return "baseline_c";
    case BlockVariant::rethinker_d_conv3d:
      return "rethinker_d";
    case BlockVariant::rethinker_e_convlstm:
      return "rethinker_e";
  }
  return "?";
}

inline BlockVariant parse_variant(std::string_view name) {
  if (name == "baseline_c") return BlockVariant::baseline_c;
  if (name == "rethinker_d" || name == "rethinker_d_conv3d") return BlockVariant::rethinker_d_conv3d;
  if (name == "rethinker_e" || name == "rethinker_e_convlstm") return BlockVariant::rethinker_e_convlstm;
  throw UsageError("unknown block variant '" + std::string(name) + "'");
}

template <class T>
struct SEParams {
  Var<T> w1;  // (D, D/r)
  Var<T> b1;  // (D/r)
  Var<T> w2;  // (D/r, D)
  Var<T> b2;  // (D)
  std::size_t reduction = 4;
};

/// Input-to-state (w_v*) and state-to-state (w_h*) kernels are (k, k, D, D);
/// peepholes are (H', W', D); biases are (D).
template <class T>
struct ConvLSTMParams {
  Var<T> w_vi, w_hi, w_vf, w_hf, w_vc, w_hc, w_vo, w_ho;
  Var<T> w_ci, w_cf, w_co;
  Var<T> b_i, b_f, b_c, b_o;
};

template <class T>
struct ConvLSTMState {
  Var<T> h;
  Var<T> c;
};

template <class T>
struct ConvLSTMGates {
  Var<T> i, f, o;
};

// ---------------------------------------------------------------------------
// Squeeze and excitation

template <class T>
Var<T> se_gate(Var<T> u, const SEParams<T>& p) {
  if (u.value().rank() != 3) throw ShapeError("se_gate expects (H,W,D), got " + to_string(u.shape()));
  const std::size_t d = u.value().dim(2);
  if (p.reduction == 0 || d % p.reduction != 0) {
    throw ShapeError("se_gate: depth " + std::to_string(d) + " is not divisible by reduction ratio " +
                     std::to_string(p.reduction));
  }
  const std::size_t hidden = d / p.reduction;
  if (p.w1.shape() != Shape{d, hidden} || p.w2.shape() != Shape{hidden, d}) {
    throw ShapeError("se_gate: weights " + to_string(p.w1.shape()) + ", " + to_string(p.w2.shape()) +
                     " do not match depth " + std::to_string(d) + " with ratio " + std::to_string(p.reduction));
  }
  Var<T> squeezed = global_avg_pool(u);
  Var<T> hidden_act = relu(fully_connected(squeezed, p.w1, p.b1));
  return sigmoid(fully_connected(hidden_act, p.w2, p.b2));
}

template <class T>
Var<T> se_apply(Var<T> u, Var<T> gate) {
  return scale_channels(u, gate);
}

// ---------------------------------------------------------------------------
// ConvLSTM

namespace detail {

template <class T>
struct FusedConvLSTM {
  Var<T> input_kernel;  // (k, k, D, 4D) in gate order i, f, c, o
  Var<T> state_kernel;  // (k, k, D, 4D)
  Var<T> bias;          // (4D)
  const ConvLSTMParams<T>* params = nullptr;
  std::size_t depth = 0;
};

template <class T>
FusedConvLSTM<T> fuse(const ConvLSTMParams<T>& p) {
  const Shape& k = p.w_vi.shape();
  if (k.size() != 4 || k[2] != k[3]) {
    throw ShapeError("ConvLSTM kernels must be (k,k,D,D), got " + to_string(k));
  }
  for (const Var<T>* w : {&p.w_hi, &p.w_vf, &p.w_hf, &p.w_vc, &p.w_hc, &p.w_vo, &p.w_ho}) {
    if (w->shape() != k) throw ShapeError("ConvLSTM kernels disagree: " + to_string(w->shape()) + " vs " + to_string(k));
  }
  const std::size_t d = k[3];
  for (const Var<T>* b : {&p.b_i, &p.b_f, &p.b_c, &p.b_o}) {
    if (b->shape() != Shape{d}) throw ShapeError("ConvLSTM bias must be (" + std::to_string(d) + ")");
  }
  FusedConvLSTM<T> fused;
  fused.input_kernel = concat_last<T>({p.w_vi, p.w_vf, p.w_vc, p.w_vo});
  fused.state_kernel = concat_last<T>({p.w_hi, p.w_hf, p.w_hc, p.w_ho});
  fused.bias = concat_last<T>({p.b_i, p.b_f, p.b_c, p.b_o});
  fused.params = &p;
  fused.depth = d;
  return fused;
}

template <class T>
ConvLSTMState<T> fused_step(Var<T> v, const ConvLSTMState<T>& state, const FusedConvLSTM<T>& fused,
                            ConvLSTMGates<T>* gates) {
  const ConvLSTMParams<T>& p = *fused.params;
  const Shape& vs = v.shape();
  if (vs.size() != 3 || vs[2] != fused.depth) {
    throw ShapeError("convlstm_step: input " + to_string(vs) + " does not have depth " + std::to_string(fused.depth));
  }
  if (state.h.shape() != vs || state.c.shape() != vs) {
    throw ShapeError("convlstm_step: state " + to_string(state.h.shape()) + "/" + to_string(state.c.shape()) +
                     " does not match input " + to_string(vs));
  }
  for (const Var<T>* w : {&p.w_ci, &p.w_cf, &p.w_co}) {
    if (w->shape() != vs) {
      throw ShapeError("convlstm_step: peephole " + to_string(w->shape()) + " does not match patch " + to_string(vs));
    }
  }
  const std::size_t d = fused.depth;
  Var<T> pre = add_channel_bias(add(conv2d(v, fused.input_kernel), conv2d(state.h, fused.state_kernel)), fused.bias);
  Var<T> i = sigmoid(add(slice_last(pre, 0, d), mul(p.w_ci, state.c)));
  Var<T> f = sigmoid(add(slice_last(pre, d, d), mul(p.w_cf, state.c)));
  Var<T> c = add(mul(f, state.c), mul(i, tanh(slice_last(pre, 2 * d, d))));
  Var<T> o = sigmoid(add(slice_last(pre, 3 * d, d), mul(p.w_co, c)));
  Var<T> h = mul(o, tanh(c));
  if (gates != nullptr) *gates = ConvLSTMGates<T>{i, f, o};
  return ConvLSTMState<T>{h, c};
}

}  // namespace detail

/// One peephole ConvLSTM step with same-padded convolutions:
///   i = s(Wvi*v + Whi*h + wci.c + bi)      f = s(Wvf*v + Whf*h + wcf.c + bf)
///   c' = f.c + i.tanh(Wvc*v + Whc*h + bc)  o = s(Wvo*v + Who*h + wco.c' + bo)
///   h' = o.tanh(c')
/// where * is convolution and . the Hadamard product.
template <class T>
ConvLSTMState<T> convlstm_step(Var<T> v, const ConvLSTMState<T>& state, const ConvLSTMParams<T>& p,
                               ConvLSTMGates<T>* gates = nullptr) {
  return detail::fused_step(v, state, detail::fuse(p), gates);
}

template <class T>
ConvLSTMState<T> zero_state(Tape<T>& tape, const Shape& shape) {
  return ConvLSTMState<T>{tape.constant(Tensor<T>(shape)), tape.constant(Tensor<T>(shape))};
}

/// Runs the ConvLSTM over the n*n patches of u in raster order from a zero
/// state and reassembles the hidden states into a map shaped like u.
template <class T>
Var<T> local_convlstm(Var<T> u, std::size_t n, const ConvLSTMParams<T>& p,
                      std::vector<ConvLSTMGates<T>>* gates = nullptr) {
  Var<T> patches = image2patches(u, n);
  const Shape& ps = patches.shape();
  const Shape patch_shape{ps[1], ps[2], ps[3]};
  const detail::FusedConvLSTM<T> fused = detail::fuse(p);
  ConvLSTMState<T> state = zero_state(*u.tape, patch_shape);
  std::vector<Var<T>> hidden;
  hidden.reserve(ps[0]);
  for (std::size_t t = 0; t < ps[0]; ++t) {
    ConvLSTMGates<T> step_gates;
    state = detail::fused_step(select_first(patches, t), state, fused, gates ? &step_gates : nullptr);
    if (gates != nullptr) gates->push_back(step_gates);
    hidden.push_back(state.h);
  }
  return patches2image(stack_first<T>(hidden), n);
}

/// Treats the patch sequence as a (T = n*n, H', W', D) volume and applies a
/// same-padded Conv3D kernel (kt, kh, kw, D, D).
template <class T>
Var<T> local_conv3d(Var<T> u, std::size_t n, Var<T> kernel) {
  const Shape& ks = kernel.shape();
  if (ks.size() != 5 || ks[3] != ks[4] || ks[3] != u.shape().back()) {
    throw ShapeError("local_conv3d: kernel " + to_string(ks) + " must be (kt,kh,kw,D,D) for input " +
                     to_string(u.shape()));
  }
  return patches2image(conv3d(image2patches(u, n), kernel), n);
}

// ---------------------------------------------------------------------------
// REthinker block

template <class T>
struct BlockParams {
  SEParams<T> se;
  std::optional<ConvLSTMParams<T>> convlstm;  // rethinker_e
  std::optional<Var<T>> conv3d_kernel;        // rethinker_d
  std::optional<Var<T>> conv_kernel;          // baseline_c, (3,3,D,D)
};

/// out = u + core(u) * se_gate(u), channel-wise.
template <class T>
Var<T> rethinker_block(Var<T> u, BlockVariant variant, std::size_t n, const BlockParams<T>& params) {
  Var<T> core;
  switch (variant) {
    case BlockVariant::rethinker_e_convlstm:
      if (!params.convlstm) throw UsageError("rethinker_e block requires ConvLSTM parameters");
      core = local_convlstm(u, n, *params.convlstm);
      break;
    case BlockVariant::rethinker_d_conv3d:
      if (!params.conv3d_kernel) throw UsageError("rethinker_d block requires a Conv3D kernel");
      core = local_conv3d(u, n, *params.conv3d_kernel);
      break;
    case BlockVariant::baseline_c:
      if (!params.conv_kernel) throw UsageError("baseline_c block requires a conv kernel");
      if (u.shape().size() == 3) detail::check_divisible(u.shape()[0], u.shape()[1], n);
      core = conv2d(u, *params.conv_kernel);
      break;
  }
  if (core.shape() != u.shape()) {
    throw ShapeError("block core changed shape " + to_string(u.shape()) + " -> " + to_string(core.shape()));
  }
  return add(u, se_apply(core, se_gate(u, params.se)));
}

}  // namespace rethseg
