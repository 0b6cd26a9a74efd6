#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "rethseg/tape.hpp"
#include "rethseg/tensor.hpp"

namespace rethseg {

/// Scalar-valued function of one or more tensors, built on a fresh tape.
using MultiScalarFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;
using ScalarFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

struct GradCheckOptions {
  double eps = 1e-6;
  /// Coordinates probed per input; 0 probes all of them.
  std::size_t max_coordinates = 0;
  std::uint64_t seed = 0;
};

namespace detail {

inline double evaluate_scalar(const MultiScalarFn& f, const std::vector<Tensor<double>>& inputs) {
  Tape<double> tape;
  std::vector<Var<double>> vars;
  vars.reserve(inputs.size());
  for (const auto& x : inputs) vars.push_back(tape.leaf(x, false));
  const Var<double> out = f(tape, vars);
  if (out.value().size() != 1) throw ShapeError("grad_check: function is not scalar-valued");
  return out.value()[0];
}

}  // namespace detail

/// Largest |analytic - central difference| / max(1, |analytic|, |central|)
/// over the probed coordinates of every input.
inline double grad_check(const MultiScalarFn& f, const std::vector<Tensor<double>>& inputs,
                         const GradCheckOptions& options = {}) {
  if (!(options.eps >= 1e-7 && options.eps <= 1e-4)) {
    throw UsageError("grad_check: eps must lie in [1e-7, 1e-4]");
  }
  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
  const Var<double> out = f(tape, vars);
  if (out.value().size() != 1) {
    throw ShapeError("grad_check: function output has shape " + to_string(out.shape()) + ", expected a scalar");
  }
  tape.backward(out);

  std::mt19937_64 rng(options.seed);
  std::vector<Tensor<double>> probe = inputs;
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = vars[k].grad();
    std::vector<std::size_t> coords(inputs[k].size());
    for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (options.max_coordinates != 0 && coords.size() > options.max_coordinates) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(options.max_coordinates);
    }
    for (std::size_t i : coords) {
      const double original = probe[k][i];
      probe[k][i] = original + options.eps;
      const double up = detail::evaluate_scalar(f, probe);
      probe[k][i] = original - options.eps;
      const double down = detail::evaluate_scalar(f, probe);
      probe[k][i] = original;
      const double numeric = (up - down) / (2 * options.eps);
      const double a = analytic.empty() ? 0.0 : analytic[i];
      const double err = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

inline double grad_check(const ScalarFn& f, const Tensor<double>& x, double eps = 1e-6) {
  MultiScalarFn wrapped = [&f](Tape<double>& tape, std::span<const Var<double>> vars) { return f(tape, vars[0]); };
  return grad_check(wrapped, std::vector<Tensor<double>>{x}, GradCheckOptions{eps, 0, 0});
}

}  // namespace rethseg
