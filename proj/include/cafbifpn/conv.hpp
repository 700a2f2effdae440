#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "cafbifpn/tensor.hpp"

namespace cafbifpn {

struct Padding {
  std::size_t h = 0;
  std::size_t w = 0;
};

/// Standard 2-D convolution parameters. Weights are [C_out, C_in, k_h, k_w].
struct Conv2dParams {
  Tensor weights;
  Tensor bias;
  std::size_t stride = 1;
  Padding padding{};
  std::size_t dilation = 1;

  std::size_t out_channels() const { return weights.dim(0); }
  std::size_t in_channels() const { return weights.dim(1); }
  std::size_t kernel_h() const { return weights.dim(2); }
  std::size_t kernel_w() const { return weights.dim(3); }
};

/// Padding that keeps spatial dims for stride 1: (0,1) for 1x3, (2,0) for 5x1, etc.
inline Padding same_padding(std::size_t kernel_h, std::size_t kernel_w, std::size_t dilation = 1) {
  return {dilation * (kernel_h - 1) / 2, dilation * (kernel_w - 1) / 2};
}

/// Zero weights and bias with "same" padding.
inline Conv2dParams make_conv(std::size_t c_out, std::size_t c_in, std::size_t kernel_h, std::size_t kernel_w,
                              std::size_t dilation = 1) {
  return Conv2dParams{Tensor({c_out, c_in, kernel_h, kernel_w}), Tensor({c_out}), 1,
                      same_padding(kernel_h, kernel_w, dilation), dilation};
}

inline std::size_t conv_output_extent(std::size_t in, std::size_t kernel, std::size_t pad, std::size_t dilation,
                                      std::size_t stride) {
  const long long span = static_cast<long long>(in) + 2LL * static_cast<long long>(pad) -
                         static_cast<long long>(dilation * (kernel - 1)) - 1;
  if (span < 0) throw ShapeError("convolution output extent would be non-positive");
  return static_cast<std::size_t>(span) / stride + 1;
}

namespace detail {

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kernel_h, kernel_w;
  std::size_t pad_h, pad_w;
  std::size_t dilation, stride;
  std::size_t out_h, out_w;
};

inline ConvGeometry conv_geometry(const Tensor& input, const Conv2dParams& p) {
  if (input.rank() != 3) throw ShapeError("conv2d: input must be [C,H,W], got " + to_string(input.dims()));
  if (p.weights.rank() != 4) throw ShapeError("conv2d: weights must be [C_out,C_in,k_h,k_w]");
  if (p.bias.dims() != Dims{p.out_channels()}) throw ShapeError("conv2d: bias must be [C_out]");
  if (p.stride == 0 || p.dilation == 0) throw ShapeError("conv2d: stride and dilation must be positive");
  if (input.dim(0) != p.in_channels()) {
    throw ShapeError("conv2d: input has " + std::to_string(input.dim(0)) + " channels, weights expect " +
                     std::to_string(p.in_channels()));
  }
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), p.kernel_h(), p.kernel_w(), p.padding.h, p.padding.w,
                 p.dilation, p.stride, 0, 0};
  g.out_h = conv_output_extent(g.height, g.kernel_h, g.pad_h, g.dilation, g.stride);
  g.out_w = conv_output_extent(g.width, g.kernel_w, g.pad_w, g.dilation, g.stride);
  return g;
}

/// Unfold into columns [C*k_h*k_w, out_h*out_w].
inline Tensor im2col(const Tensor& input, const ConvGeometry& g) {
  const std::size_t cols = g.out_h * g.out_w;
  Tensor out({g.channels * g.kernel_h * g.kernel_w, cols});
  auto src = input.data();
  auto dst = out.data();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        double* row = &dst[((c * g.kernel_h + i) * g.kernel_w + j) * cols];
        for (std::size_t y = 0; y < g.out_h; ++y) {
          const long long iy = static_cast<long long>(y * g.stride + i * g.dilation) - static_cast<long long>(g.pad_h);
          if (iy < 0 || iy >= static_cast<long long>(g.height)) continue;
          for (std::size_t x = 0; x < g.out_w; ++x) {
            const long long ix =
                static_cast<long long>(x * g.stride + j * g.dilation) - static_cast<long long>(g.pad_w);
            if (ix < 0 || ix >= static_cast<long long>(g.width)) continue;
            row[y * g.out_w + x] = src[(c * g.height + iy) * g.width + ix];
          }
        }
      }
    }
  }
  return out;
}

/// Adjoint of im2col: scatter-add columns back onto a [C,H,W] map.
inline Tensor col2im(const Tensor& columns, const ConvGeometry& g) {
  const std::size_t cols = g.out_h * g.out_w;
  Tensor out({g.channels, g.height, g.width});
  auto src = columns.data();
  auto dst = out.data();
  for (std::size_t c = 0; c < g.channels; ++c) {
    for (std::size_t i = 0; i < g.kernel_h; ++i) {
      for (std::size_t j = 0; j < g.kernel_w; ++j) {
        const double* row = &src[((c * g.kernel_h + i) * g.kernel_w + j) * cols];
        for (std::size_t y = 0; y < g.out_h; ++y) {
          const long long iy = static_cast<long long>(y * g.stride + i * g.dilation) - static_cast<long long>(g.pad_h);
          if (iy < 0 || iy >= static_cast<long long>(g.height)) continue;
          for (std::size_t x = 0; x < g.out_w; ++x) {
            const long long ix =
                static_cast<long long>(x * g.stride + j * g.dilation) - static_cast<long long>(g.pad_w);
            if (ix < 0 || ix >= static_cast<long long>(g.width)) continue;
            dst[(c * g.height + iy) * g.width + ix] += row[y * g.out_w + x];
          }
        }
      }
    }
  }
  return out;
}

inline Tensor weights_as_matrix(const Tensor& w) {
  return reshape(w, {w.dim(0), w.dim(1) * w.dim(2) * w.dim(3)});
}

inline Tensor transpose2d(const Tensor& m) { return permute(m, {1, 0}); }

inline void add_bias(Tensor& out, const Tensor& bias) {
  const std::size_t plane = out.size() / bias.size();
  auto d = out.data();
  for (std::size_t o = 0; o < bias.size(); ++o) {
    for (std::size_t i = 0; i < plane; ++i) d[o * plane + i] += bias[o];
  }
}

inline Tensor bias_gradient(const Tensor& grad_out) {
  const std::size_t c = grad_out.dim(0);
  const std::size_t plane = grad_out.size() / c;
  Tensor g({c});
  auto src = grad_out.data();
  for (std::size_t o = 0; o < c; ++o) {
    double s = 0.0;
    for (std::size_t i = 0; i < plane; ++i) s += src[o * plane + i];
    g[o] = s;
  }
  return g;
}

}  // namespace detail

/// out[o,y,x] = bias[o] + sum_{c,i,j} w[o,c,i,j] * in[c, y*s + d*i - pad_h, x*s + d*j - pad_w],
/// zero outside the input.
inline Tensor conv2d(const Tensor& input, const Conv2dParams& p) {
  const auto g = detail::conv_geometry(input, p);
  Tensor out = matmul(detail::weights_as_matrix(p.weights), detail::im2col(input, g));
  out = reshape(out, {p.out_channels(), g.out_h, g.out_w});
  detail::add_bias(out, p.bias);
  return out;
}

struct Conv2dGradients {
  Tensor input;
  Tensor weights;
  Tensor bias;
};

inline Conv2dGradients conv2d_backward(const Tensor& input, const Conv2dParams& p, const Tensor& grad_out) {
  const auto g = detail::conv_geometry(input, p);
  if (grad_out.dims() != Dims{p.out_channels(), g.out_h, g.out_w}) {
    throw ShapeError("conv2d_backward: gradient dims " + to_string(grad_out.dims()) + " do not match output");
  }
  const Tensor go = reshape(grad_out, {p.out_channels(), g.out_h * g.out_w});
  const Tensor cols = detail::im2col(input, g);
  Tensor dw = matmul(go, detail::transpose2d(cols));
  Tensor dcols = matmul(detail::transpose2d(detail::weights_as_matrix(p.weights)), go);
  return {detail::col2im(dcols, g), reshape(dw, p.weights.dims()), detail::bias_gradient(grad_out)};
}

// --- depthwise ---------------------------------------------------------------

namespace detail {

inline std::size_t depthwise_kernel(const Tensor& input, const Tensor& weights, std::size_t padding) {
  if (input.rank() != 3) throw ShapeError("depthwise_conv2d: input must be [C,H,W]");
  if (weights.rank() != 3 || weights.dim(1) != weights.dim(2)) {
    throw ShapeError("depthwise_conv2d: weights must be [C,k,k], got " + to_string(weights.dims()));
  }
  if (weights.dim(0) != input.dim(0)) {
    throw ShapeError("depthwise_conv2d: weights have " + std::to_string(weights.dim(0)) + " channels, input has " +
                     std::to_string(input.dim(0)));
  }
  const std::size_t k = weights.dim(1);
  if (k % 2 == 0) throw ConfigError("depthwise_conv2d: kernel size must be odd, got " + std::to_string(k));
  if (padding != (k - 1) / 2) throw ConfigError("depthwise_conv2d: padding must equal (k-1)/2");
  return k;
}

}  // namespace detail

/// Per-channel k x k convolution with "same" zero padding and no bias.
inline Tensor depthwise_conv2d(const Tensor& input, const Tensor& weights, std::size_t padding) {
  const std::size_t k = detail::depthwise_kernel(input, weights, padding);
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const long long r = static_cast<long long>(padding);
  Tensor out(input.dims());
  auto src = input.data();
  auto w = weights.data();
  auto dst = out.data();
  for (std::size_t c = 0; c < C; ++c) {
    const double* plane = &src[c * H * W];
    const double* kern = &w[c * k * k];
    double* oplane = &dst[c * H * W];
    for (std::size_t i = 0; i < k; ++i) {
      const long long dy = static_cast<long long>(i) - r;
      for (std::size_t j = 0; j < k; ++j) {
        const long long dx = static_cast<long long>(j) - r;
        const double kv = kern[i * k + j];
        if (kv == 0.0) continue;
        const std::size_t y0 = static_cast<std::size_t>(std::max(0LL, -dy));
        const std::size_t y1 = static_cast<std::size_t>(std::min<long long>(H, static_cast<long long>(H) - dy));
        const std::size_t x0 = static_cast<std::size_t>(std::max(0LL, -dx));
        const std::size_t x1 = static_cast<std::size_t>(std::min<long long>(W, static_cast<long long>(W) - dx));
        for (std::size_t y = y0; y < y1; ++y) {
          const double* srow = &plane[(y + dy) * W];
          double* orow = &oplane[y * W];
          for (std::size_t x = x0; x < x1; ++x) orow[x] += kv * srow[x + dx];
        }
      }
    }
  }
  return out;
}

struct DepthwiseGradients {
  Tensor input;
  Tensor weights;
};

inline DepthwiseGradients depthwise_conv2d_backward(const Tensor& input, const Tensor& weights, std::size_t padding,
                                                    const Tensor& grad_out) {
  const std::size_t k = detail::depthwise_kernel(input, weights, padding);
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const long long r = static_cast<long long>(padding);
  DepthwiseGradients g{Tensor(input.dims()), Tensor(weights.dims())};
  auto src = input.data();
  auto w = weights.data();
  auto go = grad_out.data();
  auto gi = g.input.data();
  auto gw = g.weights.data();
  for (std::size_t c = 0; c < C; ++c) {
    for (std::size_t i = 0; i < k; ++i) {
      const long long dy = static_cast<long long>(i) - r;
      for (std::size_t j = 0; j < k; ++j) {
        const long long dx = static_cast<long long>(j) - r;
        const double kv = w[(c * k + i) * k + j];
        double acc = 0.0;
        const std::size_t y0 = static_cast<std::size_t>(std::max(0LL, -dy));
        const std::size_t y1 = static_cast<std::size_t>(std::min<long long>(H, static_cast<long long>(H) - dy));
        const std::size_t x0 = static_cast<std::size_t>(std::max(0LL, -dx));
        const std::size_t x1 = static_cast<std::size_t>(std::min<long long>(W, static_cast<long long>(W) - dx));
        for (std::size_t y = y0; y < y1; ++y) {
          for (std::size_t x = x0; x < x1; ++x) {
            const std::size_t o = (c * H + y) * W + x;
            const std::size_t s = (c * H + y + dy) * W + x + dx;
            acc += go[o] * src[s];
            gi[s] += go[o] * kv;
          }
        }
        gw[(c * k + i) * k + j] = acc;
      }
    }
  }
  return g;
}

// --- bilinear sampling --------------------------------------------------------

namespace detail {

/// The four lattice neighbours of (y, x) and their interpolation weights.
struct BilinearStencil {
  long long y0, x0;
  double ly, lx;  // fractional parts

  std::array<double, 4> weights() const {
    return {(1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx};
  }
};

inline BilinearStencil bilinear_stencil(double y, double x) {
  if (!std::isfinite(y) || !std::isfinite(x)) throw NumericError("bilinear_sample: non-finite coordinates");
  const double fy = std::floor(y), fx = std::floor(x);
  return {static_cast<long long>(fy), static_cast<long long>(fx), y - fy, x - fx};
}

inline double plane_value(const double* plane, std::size_t H, std::size_t W, long long y, long long x) {
  if (y < 0 || x < 0 || y >= static_cast<long long>(H) || x >= static_cast<long long>(W)) return 0.0;
  return plane[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
}

inline double sample_plane(const double* plane, std::size_t H, std::size_t W, const BilinearStencil& s) {
  const auto w = s.weights();
  return w[0] * plane_value(plane, H, W, s.y0, s.x0) + w[1] * plane_value(plane, H, W, s.y0, s.x0 + 1) +
         w[2] * plane_value(plane, H, W, s.y0 + 1, s.x0) + w[3] * plane_value(plane, H, W, s.y0 + 1, s.x0 + 1);
}

}  // namespace detail

/// Bilinearly interpolated C-vector at real coordinates (y, x); lattice points
/// outside the map read as zero.
inline std::vector<double> bilinear_sample(const Tensor& input, double y, double x) {
  if (input.rank() != 3) throw ShapeError("bilinear_sample: input must be [C,H,W]");
  const auto s = detail::bilinear_stencil(y, x);
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  std::vector<double> v(C);
  for (std::size_t c = 0; c < C; ++c) v[c] = detail::sample_plane(&input.data()[c * H * W], H, W, s);
  return v;
}

// --- deformable ---------------------------------------------------------------

/// Deformable 3x3 (v1, no modulation). The offset predictor emits
/// 2*k_h*k_w channels ordered (dy_t, dx_t) per tap t in row-major tap order.
struct DeformableParams {
  Conv2dParams base;
  Conv2dParams offset_predictor;
};

/// Base kernel with zero weights and a zero-initialised offset predictor.
inline DeformableParams make_deformable(std::size_t c_out, std::size_t c_in, std::size_t kernel = 3) {
  return {make_conv(c_out, c_in, kernel, kernel), make_conv(2 * kernel * kernel, c_in, 3, 3)};
}

namespace detail {

inline void check_deformable(const Tensor& input, const Tensor& offsets, const Conv2dParams& base) {
  if (input.rank() != 3) throw ShapeError("deformable_conv2d: input must be [C,H,W]");
  if (base.stride != 1) throw ConfigError("deformable_conv2d: only stride 1 is supported");
  if (input.dim(0) != base.in_channels()) throw ShapeError("deformable_conv2d: channel mismatch");
  const std::size_t taps = base.kernel_h() * base.kernel_w();
  if (offsets.rank() != 3 || offsets.dim(0) != 2 * taps) {
    throw ShapeError("deformable_conv2d: offsets must have " + std::to_string(2 * taps) + " channels, got " +
                     to_string(offsets.dims()));
  }
  if (offsets.dim(1) != input.dim(1) || offsets.dim(2) != input.dim(2)) {
    throw ShapeError("deformable_conv2d: offset map spatial dims differ from input");
  }
  if (conv_output_extent(input.dim(1), base.kernel_h(), base.padding.h, base.dilation, 1) != input.dim(1) ||
      conv_output_extent(input.dim(2), base.kernel_w(), base.padding.w, base.dilation, 1) != input.dim(2)) {
    throw ShapeError("deformable_conv2d: base padding must preserve spatial dims");
  }
}

/// Sampling position of tap (i,j) for output pixel (y,x).
inline std::pair<double, double> deform_position(const Conv2dParams& base, const Tensor& offsets, std::size_t tap,
                                                 std::size_t i, std::size_t j, std::size_t y, std::size_t x) {
  const std::size_t H = offsets.dim(1), W = offsets.dim(2);
  auto off = offsets.data();
  const double dy = off[((2 * tap) * H + y) * W + x];
  const double dx = off[((2 * tap + 1) * H + y) * W + x];
  const double py = static_cast<double>(y) + static_cast<double>(i * base.dilation) - static_cast<double>(base.padding.h) + dy;
  const double px = static_cast<double>(x) + static_cast<double>(j * base.dilation) - static_cast<double>(base.padding.w) + dx;
  return {py, px};
}

inline Tensor deform_im2col(const Tensor& input, const Tensor& offsets, const Conv2dParams& base) {
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t kh = base.kernel_h(), kw = base.kernel_w();
  const std::size_t cols = H * W;
  Tensor out({C * kh * kw, cols});
  auto dst = out.data();
  auto src = input.data();
  for (std::size_t i = 0; i < kh; ++i) {
    for (std::size_t j = 0; j < kw; ++j) {
      const std::size_t tap = i * kw + j;
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const auto [py, px] = deform_position(base, offsets, tap, i, j, y, x);
          const auto s = bilinear_stencil(py, px);
          for (std::size_t c = 0; c < C; ++c) {
            dst[(c * kh * kw + tap) * cols + y * W + x] = sample_plane(&src[c * H * W], H, W, s);
          }
        }
      }
    }
  }
  return out;
}

}  // namespace detail

/// Deformable convolution with explicitly supplied offsets [2*k_h*k_w, H, W].
inline Tensor deformable_conv2d_with_offsets(const Tensor& input, const Tensor& offsets, const Conv2dParams& base) {
  detail::check_deformable(input, offsets, base);
  Tensor out = matmul(detail::weights_as_matrix(base.weights), detail::deform_im2col(input, offsets, base));
  out = reshape(out, {base.out_channels(), input.dim(1), input.dim(2)});
  detail::add_bias(out, base.bias);
  return out;
}

inline Tensor deformable_conv2d(const Tensor& input, const DeformableParams& p) {
  const std::size_t taps = p.base.kernel_h() * p.base.kernel_w();
  if (p.offset_predictor.out_channels() != 2 * taps) {
    throw ShapeError("deformable_conv2d: offset predictor must emit " + std::to_string(2 * taps) + " channels");
  }
  return deformable_conv2d_with_offsets(input, conv2d(input, p.offset_predictor), p.base);
}

struct DeformableGradients {
  Tensor input;
  Tensor offsets;
  Tensor weights;
  Tensor bias;
};

/// Gradients of deformable_conv2d_with_offsets. Bilinear sampling is piecewise
/// linear; at lattice coordinates the right-sided derivative is taken.
inline DeformableGradients deformable_conv2d_backward(const Tensor& input, const Tensor& offsets,
                                                      const Conv2dParams& base, const Tensor& grad_out) {
  detail::check_deformable(input, offsets, base);
  const std::size_t C = input.dim(0), H = input.dim(1), W = input.dim(2);
  const std::size_t kh = base.kernel_h(), kw = base.kernel_w();
  const std::size_t cols = H * W;
  const Tensor go = reshape(grad_out, {base.out_channels(), cols});
  const Tensor columns = detail::deform_im2col(input, offsets, base);
  Tensor dw = matmul(go, detail::transpose2d(columns));
  const Tensor dcols = matmul(detail::transpose2d(detail::weights_as_matrix(base.weights)), go);

  DeformableGradients g{Tensor(input.dims()), Tensor(offsets.dims()), reshape(dw, base.weights.dims()),
                        detail::bias_gradient(grad_out)};
  auto src = input.data();
  auto dc = dcols.data();
  auto gi = g.input.data();
  auto goff = g.offsets.data();
  for (std::size_t i = 0; i < kh; ++i) {
    for (std::size_t j = 0; j < kw; ++j) {
      const std::size_t tap = i * kw + j;
      for (std::size_t y = 0; y < H; ++y) {
        for (std::size_t x = 0; x < W; ++x) {
          const auto [py, px] = detail::deform_position(base, offsets, tap, i, j, y, x);
          const auto s = detail::bilinear_stencil(py, px);
          const auto wts = s.weights();
          const long long ny[4] = {s.y0, s.y0, s.y0 + 1, s.y0 + 1};
          const long long nx[4] = {s.x0, s.x0 + 1, s.x0, s.x0 + 1};
          double grad_py = 0.0, grad_px = 0.0;
          for (std::size_t c = 0; c < C; ++c) {
            const double d = dc[(c * kh * kw + tap) * cols + y * W + x];
            if (d == 0.0) continue;
            const double* plane = &src[c * H * W];
            const double v00 = detail::plane_value(plane, H, W, ny[0], nx[0]);
            const double v01 = detail::plane_value(plane, H, W, ny[1], nx[1]);
            const double v10 = detail::plane_value(plane, H, W, ny[2], nx[2]);
            const double v11 = detail::plane_value(plane, H, W, ny[3], nx[3]);
            grad_py += d * ((1 - s.lx) * (v10 - v00) + s.lx * (v11 - v01));
            grad_px += d * ((1 - s.ly) * (v01 - v00) + s.ly * (v11 - v10));
            for (int n = 0; n < 4; ++n) {
              if (ny[n] < 0 || nx[n] < 0 || ny[n] >= static_cast<long long>(H) || nx[n] >= static_cast<long long>(W)) {
                continue;
              }
              gi[(c * H + static_cast<std::size_t>(ny[n])) * W + static_cast<std::size_t>(nx[n])] += d * wts[n];
            }
          }
          goff[((2 * tap) * H + y) * W + x] += grad_py;
          goff[((2 * tap + 1) * H + y) * W + x] += grad_px;
        }
      }
    }
  }
  return g;
}

}  // namespace cafbifpn
