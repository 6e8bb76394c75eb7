// One-hidden-layer tanh scorer over a flat parameter vector, so Adam,
// serialization and gradient checks can treat all weights uniformly.
#pragma once

#include <cstdint>
#include <span>

#include "slink/common.hpp"

namespace slink {

struct Mlp {
  std::size_t in = 0, hidden = 0, out = 0;

  std::size_t param_count() const { return in * hidden + hidden + hidden * out + out; }

  // params layout: W1[in*hidden], b1[hidden], W2[hidden*out], b2[out]
  void init_params(std::span<double> params, Rng& rng) const {
    SLINK_CHECK(params.size() == param_count(), "Mlp::init_params size mismatch");
    const double s1 = 1.0 / std::sqrt(static_cast<double>(in));
    const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden));
    std::size_t p = 0;
    for (std::size_t i = 0; i < in * hidden; ++i) params[p++] = (rng.uniform() * 2 - 1) * s1;
    for (std::size_t i = 0; i < hidden; ++i) params[p++] = 0.0;
    for (std::size_t i = 0; i < hidden * out; ++i) params[p++] = (rng.uniform() * 2 - 1) * s2;
    for (std::size_t i = 0; i < out; ++i) params[p++] = 0.0;
  }

  void forward(std::span<const double> params, std::span<const double> x,
               std::span<double> hidden_act, std::span<double> y) const {
    const double* w1 = params.data();
    const double* b1 = w1 + in * hidden;
    const double* w2 = b1 + hidden;
    const double* b2 = w2 + hidden * out;
    for (std::size_t h = 0; h < hidden; ++h) {
      double a = b1[h];
      for (std::size_t i = 0; i < in; ++i) a += x[i] * w1[i * hidden + h];
      hidden_act[h] = std::tanh(a);
    }
    for (std::size_t o = 0; o < out; ++o) {
      double a = b2[o];
      for (std::size_t h = 0; h < hidden; ++h) a += hidden_act[h] * w2[h * out + o];
      y[o] = a;
    }
  }

  // Accumulates into grad; d_x may be empty when input gradients are unused.
  void backward(std::span<const double> params, std::span<const double> x,
                std::span<const double> hidden_act, std::span<const double> d_y,
                std::span<double> grad, std::span<double> d_x) const {
    const double* w1 = params.data();
    const double* w2 = params.data() + in * hidden + hidden;
    double* g_w1 = grad.data();
    double* g_b1 = g_w1 + in * hidden;
    double* g_w2 = g_b1 + hidden;
    double* g_b2 = g_w2 + hidden * out;
    Vec d_a(hidden, 0.0);
    for (std::size_t h = 0; h < hidden; ++h) {
      double dh = 0.0;
      for (std::size_t o = 0; o < out; ++o) {
        dh += w2[h * out + o] * d_y[o];
        g_w2[h * out + o] += hidden_act[h] * d_y[o];
      }
      d_a[h] = dh * (1.0 - hidden_act[h] * hidden_act[h]);
      g_b1[h] += d_a[h];
    }
    for (std::size_t o = 0; o < out; ++o) g_b2[o] += d_y[o];
    for (std::size_t i = 0; i < in; ++i) {
      double dx = 0.0;
      for (std::size_t h = 0; h < hidden; ++h) {
        g_w1[i * hidden + h] += x[i] * d_a[h];
        dx += w1[i * hidden + h] * d_a[h];
      }
      if (!d_x.empty()) d_x[i] = dx;
    }
  }
};

}  // namespace slink
