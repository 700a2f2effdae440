#pragma once

#include <array>
#include <cstdlib>
#include <functional>
#include <string>

#include "cafbifpn/autodiff.hpp"
#include "cafbifpn/conv.hpp"
#include "cafbifpn/rng.hpp"

namespace cafbifpn {

enum class Activation { none, relu };

/// Convolutional feature enhancement: three parallel branches concatenated
/// and added to a 1x1 projection of the input.
///
///   B1 = dil3x3( conv3x1( conv1x3( conv1x1(F) ) ) )
///   B2 = dil3x3( conv5x1( conv1x5( conv1x1(F) ) ) )
///   B3 = deform3x3( conv1x3( conv3x1( conv1x1(F) ) ) )
///   Y  = concat(B1, B2, B3) + conv1x1(F)
///
/// Each branch reduces C_in to width/3 channels and keeps that width.
struct CfeParams {
  std::array<Conv2dParams, 4> branch1;  // 1x1, 1x3, 3x1, dilated 3x3
  std::array<Conv2dParams, 4> branch2;  // 1x1, 1x5, 5x1, dilated 3x3
  std::array<Conv2dParams, 3> branch3;  // 1x1, 3x1, 1x3
  DeformableParams deform;              // 3x3 closing branch 3
  Conv2dParams residual;                // 1x1, C_in -> width
  Activation activation = Activation::relu;

  std::size_t in_channels() const { return residual.in_channels(); }
  std::size_t width() const { return residual.out_channels(); }
};

/// All weights and biases zero, offset predictor zero.
inline CfeParams make_cfe_zero(std::size_t c_in, std::size_t width, std::size_t dilation = 2,
                               Activation activation = Activation::relu) {
  if (width == 0 || width % 3 != 0) {
    throw ConfigError("cfe: fusion width " + std::to_string(width) + " must be a positive multiple of 3 (fusion_width % 3)");
  }
  const std::size_t b = width / 3;
  CfeParams p;
  p.branch1 = {make_conv(b, c_in, 1, 1), make_conv(b, b, 1, 3), make_conv(b, b, 3, 1), make_conv(b, b, 3, 3, dilation)};
  p.branch2 = {make_conv(b, c_in, 1, 1), make_conv(b, b, 1, 5), make_conv(b, b, 5, 1), make_conv(b, b, 3, 3, dilation)};
  p.branch3 = {make_conv(b, c_in, 1, 1), make_conv(b, b, 3, 1), make_conv(b, b, 1, 3)};
  p.deform = make_deformable(b, b, 3);
  p.residual = make_conv(width, c_in, 1, 1);
  p.activation = activation;
  return p;
}

/// Calls `fn` on every learnable convolution in a fixed order: branch 1,
/// branch 2, branch 3, deformable base, offset predictor, residual.
template <typename Params, typename Fn>
void for_each_conv(Params& p, Fn&& fn) {
  for (auto& c : p.branch1) fn(c);
  for (auto& c : p.branch2) fn(c);
  for (auto& c : p.branch3) fn(c);
  fn(p.deform.base);
  fn(p.deform.offset_predictor);
  fn(p.residual);
}

/// Weights and biases uniform in (-scale, scale), drawn in for_each_conv
/// order; the offset predictor stays zero.
inline CfeParams make_cfe_random(std::size_t c_in, std::size_t width, SplitMix64& rng, std::size_t dilation = 2,
                                 Activation activation = Activation::relu, double scale = 0.1) {
  CfeParams p = make_cfe_zero(c_in, width, dilation, activation);
  const Conv2dParams* predictor = &p.deform.offset_predictor;
  for_each_conv(p, [&](Conv2dParams& c) {
    if (&c == predictor) return;
    c.weights = Tensor::uniform(c.weights.dims(), rng, -scale, scale);
    c.bias = Tensor::uniform(c.bias.dims(), rng, -scale, scale);
  });
  return p;
}

namespace ad {

struct CfeVars {
  std::array<ConvVars, 4> branch1;
  std::array<ConvVars, 4> branch2;
  std::array<ConvVars, 3> branch3;
  ConvVars deform_base;
  ConvVars offset_predictor;
  ConvVars residual;
  Activation activation = Activation::relu;
  std::size_t in_channels = 0;
  std::size_t width = 0;
};

inline CfeVars bind(Tape& t, const CfeParams& p, bool requires_grad = true) {
  CfeVars v;
  for (std::size_t i = 0; i < 4; ++i) v.branch1[i] = bind(t, p.branch1[i], requires_grad);
  for (std::size_t i = 0; i < 4; ++i) v.branch2[i] = bind(t, p.branch2[i], requires_grad);
  for (std::size_t i = 0; i < 3; ++i) v.branch3[i] = bind(t, p.branch3[i], requires_grad);
  v.deform_base = bind(t, p.deform.base, requires_grad);
  v.offset_predictor = bind(t, p.deform.offset_predictor, requires_grad);
  v.residual = bind(t, p.residual, requires_grad);
  v.activation = p.activation;
  v.in_channels = p.in_channels();
  v.width = p.width();
  return v;
}

inline Var activate(Var x, Activation a) { return a == Activation::relu ? relu(x) : x; }

template <std::size_t N>
Var conv_chain(Var x, const std::array<ConvVars, N>& convs, Activation a) {
  for (const auto& c : convs) x = activate(conv2d(x, c), a);
  return x;
}

struct CfeBranches {
  Var b1, b2, b3;
  Var offsets;
  Var output;
};

inline CfeBranches cfe_forward_detailed(Var f, const CfeVars& p) {
  const Tensor& fv = f.tape->value(f);
  if (fv.rank() != 3) throw ShapeError("cfe_forward: expected [C,H,W], got " + to_string(fv.dims()));
  if (p.width == 0 || p.width % 3 != 0) {
    throw ConfigError("cfe_forward: fusion width " + std::to_string(p.width) + " violates fusion_width % 3 == 0");
  }
  if (fv.dim(0) != p.in_channels) {
    throw ShapeError("cfe_forward: input has " + std::to_string(fv.dim(0)) + " channels, parameters expect " +
                     std::to_string(p.in_channels));
  }
  CfeBranches r;
  r.b1 = conv_chain(f, p.branch1, p.activation);
  r.b2 = conv_chain(f, p.branch2, p.activation);
  Var pre = conv_chain(f, p.branch3, p.activation);
  r.offsets = conv2d(pre, p.offset_predictor);
  r.b3 = activate(deformable_conv2d_with_offsets(pre, r.offsets, p.deform_base), p.activation);
  r.output = add(concat_axis({r.b1, r.b2, r.b3}, 0), conv2d(f, p.residual));
  return r;
}

inline Var cfe_forward(Var f, const CfeVars& p) { return cfe_forward_detailed(f, p).output; }

}  // namespace ad

inline Tensor cfe_forward(const Tensor& f, const CfeParams& p) {
  Tape t;
  return t.value(ad::cfe_forward(t.constant(f), ad::bind(t, p, false)));
}

/// Chebyshev radius of the non-zero support of `fn`'s response to a unit
/// impulse at the centre of every input channel of a size x size map.
inline int impulse_support_radius(const std::function<Tensor(const Tensor&)>& fn, std::size_t channels,
                                  std::size_t size) {
  Tensor impulse({channels, size, size});
  const std::size_t c0 = size / 2;
  for (std::size_t c = 0; c < channels; ++c) impulse.at(c, c0, c0) = 1.0;
  const Tensor out = fn(impulse);
  int radius = -1;
  for (std::size_t c = 0; c < out.dim(0); ++c) {
    for (std::size_t y = 0; y < out.dim(1); ++y) {
      for (std::size_t x = 0; x < out.dim(2); ++x) {
        if (out.at(c, y, x) == 0.0) continue;
        const int dy = std::abs(static_cast<int>(y) - static_cast<int>(c0));
        const int dx = std::abs(static_cast<int>(x) - static_cast<int>(c0));
        radius = std::max({radius, dy, dx});
      }
    }
  }
  return radius;
}

/// Measured receptive-field radius of a CFE block. Kernels are replaced by
/// their absolute values, biases and offsets by zero and the activation by
/// identity, so no tap can cancel another and the support equals the
/// geometric reach of the non-zero kernel entries.
inline int cfe_receptive_probe(const CfeParams& params) {
  CfeParams p = params;
  p.activation = Activation::none;
  for_each_conv(p, [](Conv2dParams& c) {
    for (auto& w : c.weights.data()) w = std::abs(w);
    c.bias = Tensor(c.bias.dims());
  });
  p.deform.offset_predictor.weights = Tensor(p.deform.offset_predictor.weights.dims());
  std::size_t reach = 0;
  for_each_conv(p, [&](Conv2dParams& c) {
    reach += c.dilation * (std::max(c.kernel_h(), c.kernel_w()) - 1) / 2;
  });
  const std::size_t size = 2 * (reach + 2) + 1;
  return impulse_support_radius([&](const Tensor& x) { return cfe_forward(x, p); }, p.in_channels(), size);
}

}  // namespace cafbifpn
