#pragma once

// Conversion between a feature map (H, W, D) and its sequence of N*N
// non-overlapping patches (N*N, H/N, W/N, D). Patch t covers grid cell
// (t / N, t % N), i.e. raster order over the patch grid.

#include <cstddef>
#include <string>

#include "rethseg/tape.hpp"
#include "rethseg/tensor.hpp"

namespace rethseg {

template <class T>
struct PatchSequence {
  Tensor<T> patches;  // (N*N, H', W', D)
  std::size_t n = 1;
  std::size_t original_h = 0;
  std::size_t original_w = 0;
};

namespace detail {

inline void check_divisible(std::size_t h, std::size_t w, std::size_t n) {
  if (n < 1) throw ShapeError("slicing coefficient n must be >= 1");
  if (h % n != 0 || w % n != 0) {
    throw ShapeError("feature map " + std::to_string(h) + "x" + std::to_string(w) +
                     " is not divisible by slicing coefficient n=" + std::to_string(n));
  }
}

// Calls body(image_offset, patch_offset, depth) for every patch row segment.
template <class Body>
void for_each_patch_row(std::size_t h, std::size_t w, std::size_t d, std::size_t n, Body&& body) {
  const std::size_t ph = h / n, pw = w / n;
  for (std::size_t t = 0; t < n * n; ++t) {
    const std::size_t row0 = (t / n) * ph, col0 = (t % n) * pw;
    for (std::size_t i = 0; i < ph; ++i) {
      const std::size_t image_off = ((row0 + i) * w + col0) * d;
      const std::size_t patch_off = (t * ph + i) * pw * d;
      body(image_off, patch_off, pw * d);
    }
  }
}

}  // namespace detail

template <class T>
PatchSequence<T> image2patches(const Tensor<T>& u, std::size_t n) {
  if (u.rank() != 3) throw ShapeError("image2patches expects (H,W,D), got " + to_string(u.shape()));
  const std::size_t h = u.dim(0), w = u.dim(1), d = u.dim(2);
  detail::check_divisible(h, w, n);
  Tensor<T> patches({n * n, h / n, w / n, d});
  detail::for_each_patch_row(h, w, d, n, [&](std::size_t io, std::size_t po, std::size_t len) {
    std::copy_n(u.data().data() + io, len, patches.data().data() + po);
  });
  return PatchSequence<T>{std::move(patches), n, h, w};
}

template <class T>
Tensor<T> patches2image(const PatchSequence<T>& p) {
  const Tensor<T>& s = p.patches;
  if (s.rank() != 4 || p.n < 1 || s.dim(0) != p.n * p.n || s.dim(1) * p.n != p.original_h ||
      s.dim(2) * p.n != p.original_w) {
    throw ShapeError("patch sequence " + to_string(s.shape()) + " is inconsistent with n=" + std::to_string(p.n) +
                     " and extent " + std::to_string(p.original_h) + "x" + std::to_string(p.original_w));
  }
  const std::size_t d = s.dim(3);
  Tensor<T> image({p.original_h, p.original_w, d});
  detail::for_each_patch_row(p.original_h, p.original_w, d, p.n, [&](std::size_t io, std::size_t po, std::size_t len) {
    std::copy_n(s.data().data() + po, len, image.data().data() + io);
  });
  return image;
}

/// Differentiable image2patches: (H,W,D) -> (N*N, H/N, W/N, D).
template <class T>
Var<T> image2patches(Var<T> u, std::size_t n) {
  PatchSequence<T> seq = image2patches(u.value(), n);
  const std::size_t h = seq.original_h, w = seq.original_w, d = u.value().dim(2);
  return u.tape->record(std::move(seq.patches), {u}, [iu = u.id, h, w, d, n](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    auto s = t.grad_sink(iu);
    if (s.empty()) return;
    detail::for_each_patch_row(h, w, d, n, [&](std::size_t io, std::size_t po, std::size_t len) {
      for (std::size_t i = 0; i < len; ++i) s[io + i] += g[po + i];
    });
  });
}

/// Differentiable patches2image: (N*N, H', W', D) -> (N*H', N*W', D).
template <class T>
Var<T> patches2image(Var<T> p, std::size_t n) {
  const Tensor<T>& s = p.value();
  if (s.rank() != 4 || n < 1 || s.dim(0) != n * n) {
    throw ShapeError("patches2image: sequence " + to_string(s.shape()) + " does not hold n*n patches for n=" +
                     std::to_string(n));
  }
  const std::size_t h = s.dim(1) * n, w = s.dim(2) * n, d = s.dim(3);
  Tensor<T> image = patches2image(PatchSequence<T>{s, n, h, w});
  return p.tape->record(std::move(image), {p}, [ip = p.id, h, w, d, n](Tape<T>& t, std::size_t self) {
    auto g = t.output_grad(self);
    auto sink = t.grad_sink(ip);
    if (sink.empty()) return;
    detail::for_each_patch_row(h, w, d, n, [&](std::size_t io, std::size_t po, std::size_t len) {
      for (std::size_t i = 0; i < len; ++i) sink[po + i] += g[io + i];
    });
  });
}

}  // namespace rethseg
