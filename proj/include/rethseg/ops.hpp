#pragma once

// Differentiable primitives. Every function takes Var handles on one Tape,
// computes the forward value eagerly and registers its adjoint rule.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <type_traits>
#include <vector>

#include "rethseg/tape.hpp"
#include "rethseg/tensor.hpp"

namespace rethseg {

enum class ElementwiseKind { add, mul, sigmoid, tanh, relu };
enum class Padding { same, valid };

namespace detail {

inline void require(bool condition, const std::string& message) {
  if (!condition) throw ShapeError(message);
}

inline void require_rank(const Shape& shape, std::size_t rank, const char* what) {
  require(shape.size() == rank, std::string(what) + ": expected rank " + std::to_string(rank) + ", got shape " +
                                    to_string(shape));
}

template <class T>
T sigmoid(T x) {
  // Split form keeps exp() from overflowing for large |x|.
  if (x >= 0) return T{1} / (T{1} + std::exp(-x));
  const T e = std::exp(x);
  return e / (T{1} + e);
}

struct ConvGeometry {
  std::size_t out_h = 0;
  std::size_t out_w = 0;
  long pad_top = 0;
  long pad_left = 0;
};

inline std::size_t same_axis(std::size_t extent, std::size_t kernel, int stride, int dilation, long& pad_before) {
  const std::size_t out = (extent + static_cast<std::size_t>(stride) - 1) / static_cast<std::size_t>(stride);
  const long span = static_cast<long>((kernel - 1) * static_cast<std::size_t>(dilation) + 1);
  const long total = std::max<long>(static_cast<long>(out - 1) * stride + span - static_cast<long>(extent), 0);
  pad_before = total / 2;
  return out;
}

inline ConvGeometry conv_geometry(std::size_t h, std::size_t w, std::size_t kh, std::size_t kw, int stride,
                                  Padding padding, int dilation) {
  if (stride < 1) throw ShapeError("convolution stride must be >= 1, got " + std::to_string(stride));
  if (dilation < 1) throw ShapeError("convolution dilation must be >= 1, got " + std::to_string(dilation));
  if (kh % 2 == 0 || kw % 2 == 0) {
    throw ShapeError("convolution kernel extents must be odd, got " + std::to_string(kh) + "x" + std::to_string(kw));
  }
  ConvGeometry g;
  if (padding == Padding::same) {
    g.out_h = same_axis(h, kh, stride, dilation, g.pad_top);
    g.out_w = same_axis(w, kw, stride, dilation, g.pad_left);
    return g;
  }
  const std::size_t span_h = (kh - 1) * static_cast<std::size_t>(dilation) + 1;
  const std::size_t span_w = (kw - 1) * static_cast<std::size_t>(dilation) + 1;
  if (span_h > h || span_w > w) {
    throw ShapeError("valid convolution kernel span exceeds input " + std::to_string(h) + "x" + std::to_string(w));
  }
  g.out_h = (h - span_h) / static_cast<std::size_t>(stride) + 1;
  g.out_w = (w - span_w) / static_cast<std::size_t>(stride) + 1;
  return g;
}

// Row-major (H,W,Cin) x (kh,kw,Cin,Cout) cross-correlation.
template <class T>
void conv2d_forward(std::span<const T> in, std::size_t h, std::size_t w, std::size_t cin, std::span<const T> kernel,
                    std::size_t kh, std::size_t kw, std::size_t cout, const ConvGeometry& g, int stride, int dilation,
                    std::span<T> out) {
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      T* o = out.data() + (oy * g.out_w + ox) * cout;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long iy = static_cast<long>(oy) * stride - g.pad_top + static_cast<long>(ky) * dilation;
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const long ix = static_cast<long>(ox) * stride - g.pad_left + static_cast<long>(kx) * dilation;
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          const T* x = in.data() + (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          const T* k = kernel.data() + (ky * kw + kx) * cin * cout;
          for (std::size_t ci = 0; ci < cin; ++ci) {
            const T a = x[ci];
            const T* kr = k + ci * cout;
            for (std::size_t co = 0; co < cout; ++co) o[co] += a * kr[co];
          }
        }
      }
    }
  }
}

template <class T>
void conv2d_backward(std::span<const T> in, std::size_t h, std::size_t w, std::size_t cin, std::span<const T> kernel,
                     std::size_t kh, std::size_t kw, std::size_t cout, const ConvGeometry& g, int stride, int dilation,
                     std::span<const T> gout, std::span<T> gin, std::span<T> gkernel) {
  // Kernel taps transposed to (kh, kw, Cout, Cin) so the input-gradient loop
  // runs contiguously over Cin.
  std::vector<T> kt;
  if (!gin.empty()) {
    kt.resize(kernel.size());
    for (std::size_t tap = 0; tap < kh * kw; ++tap)
      for (std::size_t ci = 0; ci < cin; ++ci)
        for (std::size_t co = 0; co < cout; ++co)
          kt[(tap * cout + co) * cin + ci] = kernel[(tap * cin + ci) * cout + co];
  }
  for (std::size_t oy = 0; oy < g.out_h; ++oy) {
    for (std::size_t ox = 0; ox < g.out_w; ++ox) {
      const T* go = gout.data() + (oy * g.out_w + ox) * cout;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        const long iy = static_cast<long>(oy) * stride - g.pad_top + static_cast<long>(ky) * dilation;
        if (iy < 0 || iy >= static_cast<long>(h)) continue;
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const long ix = static_cast<long>(ox) * stride - g.pad_left + static_cast<long>(kx) * dilation;
          if (ix < 0 || ix >= static_cast<long>(w)) continue;
          const std::size_t in_off = (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * cin;
          const std::size_t tap = ky * kw + kx;
          if (!gin.empty()) {
            T* gi = gin.data() + in_off;
            const T* k = kt.data() + tap * cout * cin;
            for (std::size_t co = 0; co < cout; ++co) {
              const T gv = go[co];
              const T* kr = k + co * cin;
              for (std::size_t ci = 0; ci < cin; ++ci) gi[ci] += gv * kr[ci];
            }
          }
          if (!gkernel.empty()) {
            const T* x = in.data() + in_off;
            T* gk = gkernel.data() + tap * cin * cout;
            for (std::size_t ci = 0; ci < cin; ++ci) {
              const T a = x[ci];
              T* gkr = gk + ci * cout;
              for (std::size_t co = 0; co < cout; ++co) gkr[co] += a * go[co];
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class T>
Var<T> elementwise(ElementwiseKind kind, Var<T> a, std::optional<std::type_identity_t<Var<T>>> b = std::nullopt) {
  const bool binary = kind == ElementwiseKind::add || kind == ElementwiseKind::mul;
  if (binary && !b) throw UsageError("elementwise add/mul requires two operands");
  if (!binary && b) throw UsageError("elementwise unary kind given two operands");
  Tape<T>& tape = *a.tape;
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());

  if (binary) {
    const Tensor<T>& y = b->value();
    if (x.shape() != y.shape()) {
      throw ShapeError("elementwise shape mismatch: " + to_string(x.shape()) + " vs " + to_string(y.shape()));
    }
    if (kind == ElementwiseKind::add) {
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
      return tape.record(std::move(out), {a, *b}, [ia = a.id, ib = b->id](Tape<T>& t, std::size_t self) {
        auto g = t.output_grad(self);
        for (std::size_t id : {ia, ib}) {
          auto s = t.grad_sink(id);
          for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
        }
      });
    }
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
    return tape.record(std::move(out), {a, *b}, [ia = a.id, ib = b->id](Tape<T>& t, std::size_t self) {
      auto g = t.output_grad(self);
      const Tensor<T>& xa = t.value_at(ia);
      const Tensor<T>& xb = t.value_at(ib);
      if (auto s = t.grad_sink(ia); !s.empty()) {
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * xb[i];
      }
      if (auto s = t.grad_sink(ib); !s.empty()) {
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * xa[i];
      }
    });
  }

  switch (kind) {
    case ElementwiseKind::sigmoid:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::sigmoid(x[i]);
      return tape.record(std::move(out), {a}, [ia = a.id](Tape<T>& t, std::size_t self) {
        auto g = t.output_grad(self);
        const Tensor<T>& y = t.value_at(self);
        auto s = t.grad_sink(ia);
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * y[i] * (T{1} - y[i]);
      });
    case ElementwiseKind::tanh:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(x[i]);
      return tape.record(std::move(out), {a}, [ia = a.id](Tape<T>& t, std::size_t self) {
        auto g = t.output_grad(self);
        const Tensor<T>& y = t.value_at(self);
        auto s = t.grad_sink(ia);
        for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * (T{1} - y[i] * y[i]);
      });
    case ElementwiseKind::relu:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] > T{0} ? x[i] : T{0};
      return tape.record(std::move(out), {a}, [ia = a.id](Tape<T>& t, std::size_t self) {
        auto g = t.output_grad(self);
        const Tensor<T>& xin = t.value_at(ia);
        auto s = t.grad_sink(ia);
        for (std::size_t i = 0; i < s.size(); ++i) {
          if (xin[i] > T{0}) s[i] += g[i];
        }
      });
    default:
      break;
  }
  throw UsageError("unhandled elementwise kind");
}

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  return elementwise(ElementwiseKind::add, a, b);
}
template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  return elementwise(ElementwiseKind::mul, a, b);
}
template <class T>
Var<T> sigmoid(Var<T> a) {
  return elementwise(ElementwiseKind::sigmoid, a);
}
template <class T>
Var<T> tanh(Var<T> a) {
  return elementwise(ElementwiseKind::tanh, a);
}
template <class T>
Var<T> relu(Var<T> a) {
  return elementwise(ElementwiseKind::relu, a);
}

/// Multiplies by a constant.
template <class T>
Var<T> scale(Var<T> a, T factor) {
  const Tensor<T>& x = a.value();
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * factor;
  return a.tape->record(std::move(out), {a}, [ia = a.id, factor](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    auto s = t.grad_sink(ia);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * factor;
  });
}

/// Sum of all elements, as a shape-(1) tensor.
template <class T>
Var<T> sum(Var<T> a) {
  const Tensor<T>& x = a.value();
  T total = 0;
  for (std::size_t i = 0; i < x.size(); ++i) total += x[i];
  return a.tape->record(Tensor<T>({1}, std::vector<T>{total}), {a}, [ia = a.id](Tape<T>& t, std::size_t self) {
    const T g = t.output_grad(self)[0];
    auto s = t.grad_sink(ia);
    for (T& v : s) v += g;
  });
}

/// x[..., c] + bias[c]
template <class T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& bv = bias.value();
  detail::require(bv.rank() == 1 && xv.shape().back() == bv.dim(0),
                  "add_channel_bias: bias " + to_string(bv.shape()) + " does not match " + to_string(xv.shape()));
  const std::size_t c = bv.dim(0);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + bv[i % c];
  return x.tape->record(std::move(out), {x, bias}, [ix = x.id, ib = bias.id, c](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    if (auto s = t.grad_sink(ix); !s.empty()) {
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
    }
    if (auto s = t.grad_sink(ib); !s.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) s[i % c] += g[i];
    }
  });
}

/// x[..., c] * gate[c]
template <class T>
Var<T> scale_channels(Var<T> x, Var<T> gate) {
  const Tensor<T>& xv = x.value();
  const Tensor<T>& gv = gate.value();
  detail::require(gv.rank() == 1 && xv.shape().back() == gv.dim(0),
                  "channel scaling: gate " + to_string(gv.shape()) + " does not match depth of " +
                      to_string(xv.shape()));
  const std::size_t c = gv.dim(0);
  Tensor<T> out(xv.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * gv[i % c];
  return x.tape->record(std::move(out), {x, gate}, [ix = x.id, ig = gate.id, c](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    const Tensor<T>& xin = t.value_at(ix);
    const Tensor<T>& gin = t.value_at(ig);
    if (auto s = t.grad_sink(ix); !s.empty()) {
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i] * gin[i % c];
    }
    if (auto s = t.grad_sink(ig); !s.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) s[i % c] += g[i] * xin[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Shape plumbing

template <class T>
Var<T> reshape(Var<T> x, Shape shape) {
  Tensor<T> out = x.value().reshaped(std::move(shape));
  return x.tape->record(std::move(out), {x}, [ix = x.id](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    auto s = t.grad_sink(ix);
    for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[i];
  });
}

/// Concatenates along the last axis; all leading extents must agree.
template <class T>
Var<T> concat_last(std::span<const Var<T>> parts) {
  detail::require(!parts.empty(), "concat: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var<T>& p : parts) {
    Shape s = p.shape();
    const std::size_t wdt = s.back();
    s.pop_back();
    detail::require(s == lead, "concat: leading shape mismatch " + to_string(p.shape()) + " vs " +
                                   to_string(parts[0].shape()));
    widths.push_back(wdt);
    total += wdt;
  }
  const std::size_t rows = numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total);
  Tensor<T> out(out_shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor<T>& v = parts[p].value();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data().data() + r * widths[p], widths[p], out.data().data() + r * total + offset);
    }
    offset += widths[p];
  }
  std::vector<std::size_t> ids;
  for (const Var<T>& p : parts) ids.push_back(p.id);
  return parts[0].tape->record(std::move(out), parts, [ids, widths, rows, total](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    std::size_t off = 0;
    for (std::size_t p = 0; p < ids.size(); ++p) {
      if (auto s = t.grad_sink(ids[p]); !s.empty()) {
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t j = 0; j < widths[p]; ++j) s[r * widths[p] + j] += g[r * total + off + j];
        }
      }
      off += widths[p];
    }
  });
}

template <class T>
Var<T> concat_last(std::initializer_list<Var<T>> parts) {
  return concat_last(std::span<const Var<T>>(parts.begin(), parts.size()));
}

/// x[..., begin:begin+count]
template <class T>
Var<T> slice_last(Var<T> x, std::size_t begin, std::size_t count) {
  const Tensor<T>& v = x.value();
  const std::size_t width = v.shape().back();
  detail::require(count > 0 && begin + count <= width, "slice: range [" + std::to_string(begin) + "," +
                                                           std::to_string(begin + count) + ") outside depth " +
                                                           std::to_string(width));
  Shape shape = v.shape();
  shape.back() = count;
  const std::size_t rows = v.size() / width;
  Tensor<T> out(shape);
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(v.data().data() + r * width + begin, count, out.data().data() + r * count);
  }
  return x.tape->record(std::move(out), {x}, [ix = x.id, rows, width, begin, count](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    auto s = t.grad_sink(ix);
    if (s.empty()) return;
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < count; ++j) s[r * width + begin + j] += g[r * count + j];
    }
  });
}

/// x[index, ...] with the leading axis dropped.
template <class T>
Var<T> select_first(Var<T> x, std::size_t index) {
  const Tensor<T>& v = x.value();
  detail::require(v.rank() >= 2 && index < v.dim(0), "select: index " + std::to_string(index) + " outside " +
                                                         to_string(v.shape()));
  Shape shape(v.shape().begin() + 1, v.shape().end());
  const std::size_t block = numel(shape);
  Tensor<T> out(shape, std::vector<T>(v.data().begin() + static_cast<std::ptrdiff_t>(index * block),
                                      v.data().begin() + static_cast<std::ptrdiff_t>((index + 1) * block)));
  return x.tape->record(std::move(out), {x}, [ix = x.id, index, block](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    auto s = t.grad_sink(ix);
    if (s.empty()) return;
    for (std::size_t i = 0; i < block; ++i) s[index * block + i] += g[i];
  });
}

/// Stacks equally shaped tensors along a new leading axis.
template <class T>
Var<T> stack_first(std::span<const Var<T>> parts) {
  detail::require(!parts.empty(), "stack: no inputs");
  const Shape inner = parts[0].shape();
  const std::size_t block = numel(inner);
  Shape shape{parts.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  Tensor<T> out(shape);
  std::vector<std::size_t> ids;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    detail::require(parts[p].shape() == inner, "stack: shape mismatch " + to_string(parts[p].shape()) + " vs " +
                                                   to_string(inner));
    std::copy_n(parts[p].value().data().data(), block, out.data().data() + p * block);
    ids.push_back(parts[p].id);
  }
  return parts[0].tape->record(std::move(out), parts, [ids, block](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    for (std::size_t p = 0; p < ids.size(); ++p) {
      auto s = t.grad_sink(ids[p]);
      for (std::size_t i = 0; i < s.size(); ++i) s[i] += g[p * block + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Convolutions

template <class T>
Var<T> conv2d(Var<T> input, Var<T> kernel, int stride = 1, Padding padding = Padding::same, int dilation = 1) {
  const Tensor<T>& x = input.value();
  const Tensor<T>& k = kernel.value();
  detail::require_rank(x.shape(), 3, "conv2d input");
  detail::require_rank(k.shape(), 4, "conv2d kernel");
  const std::size_t h = x.dim(0), w = x.dim(1), cin = x.dim(2);
  const std::size_t kh = k.dim(0), kw = k.dim(1), cout = k.dim(3);
  if (k.dim(2) != cin) {
    throw ShapeError("conv2d channel mismatch: input has " + std::to_string(cin) + " channels, kernel expects " +
                     std::to_string(k.dim(2)));
  }
  const detail::ConvGeometry g = detail::conv_geometry(h, w, kh, kw, stride, padding, dilation);
  Tensor<T> out({g.out_h, g.out_w, cout});
  detail::conv2d_forward<T>(x.data(), h, w, cin, k.data(), kh, kw, cout, g, stride, dilation, out.data());
  return input.tape->record(
      std::move(out), {input, kernel},
      [ii = input.id, ik = kernel.id, h, w, cin, kh, kw, cout, g, stride, dilation](Tape<T>& t, std::size_t self) {
        detail::conv2d_backward<T>(t.value_at(ii).data(), h, w, cin, t.value_at(ik).data(), kh, kw, cout, g, stride,
                                   dilation, t.output_grad(self), t.grad_sink(ii), t.grad_sink(ik));
      });
}

/// One kh x kw filter per channel; kernel shape (kh, kw, C).
template <class T>
Var<T> depthwise_conv2d(Var<T> input, Var<T> kernel, int stride = 1, Padding padding = Padding::same,
                        int dilation = 1) {
  const Tensor<T>& x = input.value();
  const Tensor<T>& k = kernel.value();
  detail::require_rank(x.shape(), 3, "depthwise conv input");
  detail::require_rank(k.shape(), 3, "depthwise conv kernel");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const std::size_t kh = k.dim(0), kw = k.dim(1);
  if (k.dim(2) != c) {
    throw ShapeError("depthwise conv channel mismatch: input has " + std::to_string(c) + " channels, kernel has " +
                     std::to_string(k.dim(2)));
  }
  const detail::ConvGeometry g = detail::conv_geometry(h, w, kh, kw, stride, padding, dilation);
  Tensor<T> out({g.out_h, g.out_w, c});
  auto visit = [=](auto&& body) {
    for (std::size_t oy = 0; oy < g.out_h; ++oy) {
      for (std::size_t ox = 0; ox < g.out_w; ++ox) {
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const long iy = static_cast<long>(oy) * stride - g.pad_top + static_cast<long>(ky) * dilation;
          if (iy < 0 || iy >= static_cast<long>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const long ix = static_cast<long>(ox) * stride - g.pad_left + static_cast<long>(kx) * dilation;
            if (ix < 0 || ix >= static_cast<long>(w)) continue;
            body((oy * g.out_w + ox) * c, (static_cast<std::size_t>(iy) * w + static_cast<std::size_t>(ix)) * c,
                 (ky * kw + kx) * c);
          }
        }
      }
    }
  };
  {
    T* o = out.data().data();
    const T* xi = x.data().data();
    const T* kk = k.data().data();
    visit([&](std::size_t oo, std::size_t io, std::size_t ko) {
      for (std::size_t ch = 0; ch < c; ++ch) o[oo + ch] += xi[io + ch] * kk[ko + ch];
    });
  }
  return input.tape->record(std::move(out), {input, kernel},
                            [ii = input.id, ik = kernel.id, c, visit](Tape<T>& t, std::size_t self) {
                              auto go = t.output_grad(self);
                              auto gi = t.grad_sink(ii);
                              auto gk = t.grad_sink(ik);
                              const T* xi = t.value_at(ii).data().data();
                              const T* kk = t.value_at(ik).data().data();
                              visit([&](std::size_t oo, std::size_t io, std::size_t ko) {
                                if (!gi.empty()) {
                                  for (std::size_t ch = 0; ch < c; ++ch) gi[io + ch] += go[oo + ch] * kk[ko + ch];
                                }
                                if (!gk.empty()) {
                                  for (std::size_t ch = 0; ch < c; ++ch) gk[ko + ch] += go[oo + ch] * xi[io + ch];
                                }
                              });
                            });
}

/// Depthwise kh x kw filtering followed by a 1x1 channel mix.
template <class T>
Var<T> depthwise_separable_conv(Var<T> input, Var<T> dw_kernel, Var<T> pw_kernel, int stride = 1,
                                Padding padding = Padding::same, int dilation = 1) {
  const Tensor<T>& pw = pw_kernel.value();
  detail::require(pw.rank() == 4 && pw.dim(0) == 1 && pw.dim(1) == 1,
                  "pointwise kernel must have shape (1,1,Cin,Cout), got " + to_string(pw.shape()));
  return conv2d(depthwise_conv2d(input, dw_kernel, stride, padding, dilation), pw_kernel, 1, Padding::same, 1);
}

/// Same-padded, stride-1 volumetric cross-correlation over (T,H,W,Cin).
template <class T>
Var<T> conv3d(Var<T> input, Var<T> kernel) {
  const Tensor<T>& x = input.value();
  const Tensor<T>& k = kernel.value();
  detail::require_rank(x.shape(), 4, "conv3d input");
  detail::require_rank(k.shape(), 5, "conv3d kernel");
  const std::size_t tt = x.dim(0), h = x.dim(1), w = x.dim(2), cin = x.dim(3);
  const std::size_t kt = k.dim(0), kh = k.dim(1), kw = k.dim(2), cout = k.dim(4);
  if (k.dim(3) != cin) {
    throw ShapeError("conv3d channel mismatch: input has " + std::to_string(cin) + " channels, kernel expects " +
                     std::to_string(k.dim(3)));
  }
  if (kt % 2 == 0 || kh % 2 == 0 || kw % 2 == 0) throw ShapeError("conv3d kernel extents must be odd");
  const long pt = static_cast<long>(kt / 2), ph = static_cast<long>(kh / 2), pw = static_cast<long>(kw / 2);
  auto visit = [=](auto&& body) {
    for (std::size_t ot = 0; ot < tt; ++ot) {
      for (std::size_t oy = 0; oy < h; ++oy) {
        for (std::size_t ox = 0; ox < w; ++ox) {
          const std::size_t oo = ((ot * h + oy) * w + ox) * cout;
          for (std::size_t dt = 0; dt < kt; ++dt) {
            const long it = static_cast<long>(ot) + static_cast<long>(dt) - pt;
            if (it < 0 || it >= static_cast<long>(tt)) continue;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              const long iy = static_cast<long>(oy) + static_cast<long>(ky) - ph;
              if (iy < 0 || iy >= static_cast<long>(h)) continue;
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const long ix = static_cast<long>(ox) + static_cast<long>(kx) - pw;
                if (ix < 0 || ix >= static_cast<long>(w)) continue;
                const std::size_t io =
                    ((static_cast<std::size_t>(it) * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) *
                    cin;
                const std::size_t ko = ((dt * kh + ky) * kw + kx) * cin * cout;
                body(oo, io, ko);
              }
            }
          }
        }
      }
    }
  };
  Tensor<T> out({tt, h, w, cout});
  {
    T* o = out.data().data();
    const T* xi = x.data().data();
    const T* kk = k.data().data();
    visit([&](std::size_t oo, std::size_t io, std::size_t ko) {
      for (std::size_t ci = 0; ci < cin; ++ci) {
        const T a = xi[io + ci];
        const T* kr = kk + ko + ci * cout;
        for (std::size_t co = 0; co < cout; ++co) o[oo + co] += a * kr[co];
      }
    });
  }
  return input.tape->record(std::move(out), {input, kernel},
                            [ii = input.id, ik = kernel.id, cin, cout, visit](Tape<T>& t, std::size_t self) {
                              auto go = t.output_grad(self);
                              auto gi = t.grad_sink(ii);
                              auto gk = t.grad_sink(ik);
                              const T* xi = t.value_at(ii).data().data();
                              const T* kk = t.value_at(ik).data().data();
                              visit([&](std::size_t oo, std::size_t io, std::size_t ko) {
                                for (std::size_t ci = 0; ci < cin; ++ci) {
                                  const T* kr = kk + ko + ci * cout;
                                  if (!gi.empty()) {
                                    T acc = 0;
                                    for (std::size_t co = 0; co < cout; ++co) acc += go[oo + co] * kr[co];
                                    gi[io + ci] += acc;
                                  }
                                  if (!gk.empty()) {
                                    const T a = xi[io + ci];
                                    T* g = gk.data() + ko + ci * cout;
                                    for (std::size_t co = 0; co < cout; ++co) g[co] += a * go[oo + co];
                                  }
                                }
                              });
                            });
}

// ---------------------------------------------------------------------------
// Pooling, dense, resampling

template <class T>
Var<T> global_avg_pool(Var<T> input) {
  const Tensor<T>& x = input.value();
  detail::require_rank(x.shape(), 3, "global_avg_pool input");
  const std::size_t positions = x.dim(0) * x.dim(1), c = x.dim(2);
  Tensor<T> out({c});
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) out[ch] += x[p * c + ch];
  }
  const T inv = T{1} / static_cast<T>(positions);
  for (std::size_t ch = 0; ch < c; ++ch) out[ch] *= inv;
  return input.tape->record(std::move(out), {input}, [ii = input.id, positions, c, inv](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    auto s = t.grad_sink(ii);
    for (std::size_t p = 0; p < positions && !s.empty(); ++p) {
      for (std::size_t ch = 0; ch < c; ++ch) s[p * c + ch] += g[ch] * inv;
    }
  });
}

/// out = input^T weight + bias, weight shaped (Cin, Cout).
template <class T>
Var<T> fully_connected(Var<T> input, Var<T> weight, Var<T> bias) {
  const Tensor<T>& x = input.value();
  const Tensor<T>& wt = weight.value();
  const Tensor<T>& b = bias.value();
  detail::require_rank(x.shape(), 1, "fully_connected input");
  detail::require_rank(wt.shape(), 2, "fully_connected weight");
  detail::require_rank(b.shape(), 1, "fully_connected bias");
  const std::size_t cin = x.dim(0), cout = wt.dim(1);
  if (wt.dim(0) != cin || b.dim(0) != cout) {
    throw ShapeError("fully_connected dimension mismatch: input " + to_string(x.shape()) + ", weight " +
                     to_string(wt.shape()) + ", bias " + to_string(b.shape()));
  }
  Tensor<T> out({cout});
  for (std::size_t o = 0; o < cout; ++o) out[o] = b[o];
  for (std::size_t i = 0; i < cin; ++i) {
    for (std::size_t o = 0; o < cout; ++o) out[o] += x[i] * wt[i * cout + o];
  }
  return input.tape->record(std::move(out), {input, weight, bias},
                            [ii = input.id, iw = weight.id, ib = bias.id, cin, cout](Tape<T>& t, std::size_t self) {
                              auto g = t.output_grad(self);
                              const Tensor<T>& xv = t.value_at(ii);
                              const Tensor<T>& wv = t.value_at(iw);
                              if (auto s = t.grad_sink(ii); !s.empty()) {
                                for (std::size_t i = 0; i < cin; ++i) {
                                  for (std::size_t o = 0; o < cout; ++o) s[i] += g[o] * wv[i * cout + o];
                                }
                              }
                              if (auto s = t.grad_sink(iw); !s.empty()) {
                                for (std::size_t i = 0; i < cin; ++i) {
                                  for (std::size_t o = 0; o < cout; ++o) s[i * cout + o] += xv[i] * g[o];
                                }
                              }
                              if (auto s = t.grad_sink(ib); !s.empty()) {
                                for (std::size_t o = 0; o < cout; ++o) s[o] += g[o];
                              }
                            });
}

namespace detail {

struct ResizeTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0;
};

// Half-pixel centres (align_corners = false), clamped at the borders.
inline std::vector<ResizeTap> resize_taps(std::size_t in, std::size_t out) {
  std::vector<ResizeTap> taps(out);
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const auto lo = static_cast<std::size_t>(std::floor(src));
    taps[i] = ResizeTap{lo, std::min(lo + 1, in - 1), src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace detail

template <class T>
Var<T> bilinear_resize(Var<T> input, std::size_t out_h, std::size_t out_w) {
  const Tensor<T>& x = input.value();
  detail::require_rank(x.shape(), 3, "bilinear_resize input");
  if (out_h == 0 || out_w == 0) throw ShapeError("bilinear_resize: output extents must be >= 1");
  const std::size_t h = x.dim(0), w = x.dim(1), c = x.dim(2);
  const auto ty = detail::resize_taps(h, out_h);
  const auto tx = detail::resize_taps(w, out_w);
  Tensor<T> out({out_h, out_w, c});
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const T fy = static_cast<T>(ty[oy].frac);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const T fx = static_cast<T>(tx[ox].frac);
      const T* a = &x.at(ty[oy].lo, tx[ox].lo, 0);
      const T* b = &x.at(ty[oy].lo, tx[ox].hi, 0);
      const T* cc = &x.at(ty[oy].hi, tx[ox].lo, 0);
      const T* d = &x.at(ty[oy].hi, tx[ox].hi, 0);
      T* o = &out.at(oy, ox, 0);
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T top = a[ch] + fx * (b[ch] - a[ch]);
        const T bottom = cc[ch] + fx * (d[ch] - cc[ch]);
        o[ch] = top + fy * (bottom - top);
      }
    }
  }
  return input.tape->record(std::move(out), {input},
                            [ii = input.id, w, c, ty, tx, out_w](Tape<T>& t, std::size_t self) {
                              auto g = t.output_grad(self);
                              auto s = t.grad_sink(ii);
                              if (s.empty()) return;
                              auto idx = [&](std::size_t y, std::size_t x) { return (y * w + x) * c; };
                              for (std::size_t oy = 0; oy < ty.size(); ++oy) {
                                const T fy = static_cast<T>(ty[oy].frac);
                                for (std::size_t ox = 0; ox < tx.size(); ++ox) {
                                  const T fx = static_cast<T>(tx[ox].frac);
                                  const T* go = g.data() + (oy * out_w + ox) * c;
                                  const T wa = (1 - fy) * (1 - fx), wb = (1 - fy) * fx, wc = fy * (1 - fx),
                                          wd = fy * fx;
                                  T* a = s.data() + idx(ty[oy].lo, tx[ox].lo);
                                  T* b = s.data() + idx(ty[oy].lo, tx[ox].hi);
                                  T* cc = s.data() + idx(ty[oy].hi, tx[ox].lo);
                                  T* d = s.data() + idx(ty[oy].hi, tx[ox].hi);
                                  for (std::size_t ch = 0; ch < c; ++ch) {
                                    a[ch] += go[ch] * wa;
                                    b[ch] += go[ch] * wb;
                                    cc[ch] += go[ch] * wc;
                                    d[ch] += go[ch] * wd;
                                  }
                                }
                              }
                            });
}

// ---------------------------------------------------------------------------
// Loss

/// Mean over non-ignored pixels of -log softmax(logits)[label]. Labels are a
/// row-major H x W grid. With every pixel ignored the loss is 0.
template <class T>
Var<T> softmax_cross_entropy(Var<T> logits, std::span<const int> labels, int ignore_index) {
  const Tensor<T>& z = logits.value();
  detail::require_rank(z.shape(), 3, "softmax_cross_entropy logits");
  const std::size_t pixels = z.dim(0) * z.dim(1), k = z.dim(2);
  if (labels.size() != pixels) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                     to_string(z.shape()));
  }
  Tensor<T> probs({pixels, k});
  T loss = 0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < pixels; ++p) {
    const int label = labels[p];
    if (label == ignore_index) continue;
    if (label < 0 || static_cast<std::size_t>(label) >= k) {
      throw ShapeError("softmax_cross_entropy: label " + std::to_string(label) + " at pixel " + std::to_string(p) +
                       " outside [0," + std::to_string(k) + ")");
    }
    const T* row = z.data().data() + p * k;
    const T peak = *std::max_element(row, row + k);
    T denom = 0;
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - peak);
    for (std::size_t j = 0; j < k; ++j) probs[p * k + j] = std::exp(row[j] - peak) / denom;
    loss += std::log(denom) - (row[label] - peak);
    ++count;
  }
  if (count > 0) loss /= static_cast<T>(count);
  std::vector<int> kept(labels.begin(), labels.end());
  return logits.tape->record(
      Tensor<T>({1}, std::vector<T>{loss}), {logits},
      [il = logits.id, probs = std::move(probs), kept = std::move(kept), ignore_index, k, count](Tape<T>& t,
                                                                                                std::size_t self) {
        if (count == 0) return;
        auto s = t.grad_sink(il);
        const T g = t.output_grad(self)[0] / static_cast<T>(count);
        for (std::size_t p = 0; p < kept.size(); ++p) {
          if (kept[p] == ignore_index) continue;
          for (std::size_t j = 0; j < k; ++j) s[p * k + j] += g * probs[p * k + j];
          s[p * k + static_cast<std::size_t>(kept[p])] -= g;
        }
      });
}

// ---------------------------------------------------------------------------
// Per-channel spatial normalization (batch-of-one)

template <class T>
struct ChannelStats {
  std::vector<T> mean;
  std::vector<T> var;
};

/// Normalizes each channel over all spatial positions using the statistics of
/// this input, then applies gamma/beta. Biased variance. The statistics used
/// are written to `stats` when given.
template <class T>
Var<T> normalize_train(Var<T> x, Var<T> gamma, Var<T> beta, T eps, ChannelStats<T>* stats = nullptr) {
  const Tensor<T>& xv = x.value();
  const std::size_t c = xv.shape().back();
  const std::size_t positions = xv.size() / c;
  detail::require(gamma.value().rank() == 1 && gamma.value().dim(0) == c && beta.value().rank() == 1 &&
                      beta.value().dim(0) == c,
                  "normalization: affine parameters do not match depth of " + to_string(xv.shape()));
  std::vector<T> mean(c, T{0}), var(c, T{0});
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) mean[ch] += xv[p * c + ch];
  }
  for (T& m : mean) m /= static_cast<T>(positions);
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T d = xv[p * c + ch] - mean[ch];
      var[ch] += d * d;
    }
  }
  for (T& v : var) v /= static_cast<T>(positions);
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T{1} / std::sqrt(var[ch] + eps);
  Tensor<T> xhat(xv.shape());
  Tensor<T> out(xv.shape());
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::size_t p = 0; p < positions; ++p) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t i = p * c + ch;
      xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
      out[i] = gv[ch] * xhat[i] + bv[ch];
    }
  }
  if (stats != nullptr) *stats = ChannelStats<T>{mean, var};
  return x.tape->record(
      std::move(out), {x, gamma, beta},
      [ix = x.id, ig = gamma.id, ib = beta.id, xhat = std::move(xhat), inv_std = std::move(inv_std), c, positions](
          Tape<T>& t, std::size_t self) {
        auto g = t.output_grad(self);
        const Tensor<T>& gv = t.value_at(ig);
        std::vector<T> sum_g(c, T{0}), sum_gx(c, T{0});
        for (std::size_t p = 0; p < positions; ++p) {
          for (std::size_t ch = 0; ch < c; ++ch) {
            sum_g[ch] += g[p * c + ch];
            sum_gx[ch] += g[p * c + ch] * xhat[p * c + ch];
          }
        }
        if (auto s = t.grad_sink(ig); !s.empty()) {
          for (std::size_t ch = 0; ch < c; ++ch) s[ch] += sum_gx[ch];
        }
        if (auto s = t.grad_sink(ib); !s.empty()) {
          for (std::size_t ch = 0; ch < c; ++ch) s[ch] += sum_g[ch];
        }
        if (auto s = t.grad_sink(ix); !s.empty()) {
          const T inv_n = T{1} / static_cast<T>(positions);
          for (std::size_t p = 0; p < positions; ++p) {
            for (std::size_t ch = 0; ch < c; ++ch) {
              const std::size_t i = p * c + ch;
              s[i] += gv[ch] * inv_std[ch] * (g[i] - sum_g[ch] * inv_n - xhat[i] * sum_gx[ch] * inv_n);
            }
          }
        }
      });
}

/// Normalization with fixed (tracked) statistics.
template <class T>
Var<T> normalize_eval(Var<T> x, Var<T> gamma, Var<T> beta, const ChannelStats<T>& stats, T eps) {
  const Tensor<T>& xv = x.value();
  const std::size_t c = xv.shape().back();
  detail::require(stats.mean.size() == c && stats.var.size() == c,
                  "normalization: running statistics do not match depth of " + to_string(xv.shape()));
  detail::require(gamma.value().rank() == 1 && gamma.value().dim(0) == c && beta.value().rank() == 1 &&
                      beta.value().dim(0) == c,
                  "normalization: affine parameters do not match depth of " + to_string(xv.shape()));
  std::vector<T> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) inv_std[ch] = T{1} / std::sqrt(stats.var[ch] + eps);
  Tensor<T> out(xv.shape());
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const std::size_t ch = i % c;
    out[i] = gv[ch] * (xv[i] - stats.mean[ch]) * inv_std[ch] + bv[ch];
  }
  return x.tape->record(std::move(out), {x, gamma, beta},
                        [ix = x.id, ig = gamma.id, ib = beta.id, mean = stats.mean, inv_std, c](Tape<T>& t,
                                                                                               std::size_t self) {
                          auto g = t.output_grad(self);
                          const Tensor<T>& xv = t.value_at(ix);
                          const Tensor<T>& gv = t.value_at(ig);
                          auto sx = t.grad_sink(ix);
                          auto sg = t.grad_sink(ig);
                          auto sb = t.grad_sink(ib);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const std::size_t ch = i % c;
                            const T xhat = (xv[i] - mean[ch]) * inv_std[ch];
                            if (!sx.empty()) sx[i] += g[i] * gv[ch] * inv_std[ch];
                            if (!sg.empty()) sg[ch] += g[i] * xhat;
                            if (!sb.empty()) sb[ch] += g[i];
                          }
                        });
}

}  // namespace rethseg
