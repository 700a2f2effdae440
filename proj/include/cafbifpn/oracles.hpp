#pragma once

// Slow brute-force references. Nothing here calls the kernels it checks:
// only raw element access on Tensor is used, plus other functions in this file.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "cafbifpn/afbifpn.hpp"
#include "cafbifpn/cfe.hpp"
#include "cafbifpn/conv.hpp"
#include "cafbifpn/routing.hpp"
#include "cafbifpn/tensor.hpp"

namespace cafbifpn::oracles {

using FlopCount = MacCounts;

/// Six nested loops over (o, y, x, c, i, j).
inline Tensor conv2d_reference(const Tensor& input, const Conv2dParams& p) {
  const std::size_t C_in = input.dims()[0], H = input.dims()[1], W = input.dims()[2];
  const std::size_t C_out = p.weights.dims()[0], kh = p.weights.dims()[2], kw = p.weights.dims()[3];
  if (p.weights.dims()[1] != C_in) throw ShapeError("conv2d_reference: channel mismatch");
  const long long span_h = (long long)H + 2 * (long long)p.padding.h - (long long)(p.dilation * (kh - 1)) - 1;
  const long long span_w = (long long)W + 2 * (long long)p.padding.w - (long long)(p.dilation * (kw - 1)) - 1;
  if (span_h < 0 || span_w < 0) throw ShapeError("conv2d_reference: non-positive output extent");
  const std::size_t H_out = (std::size_t)span_h / p.stride + 1, W_out = (std::size_t)span_w / p.stride + 1;
  Tensor out({C_out, H_out, W_out});
  for (std::size_t o = 0; o < C_out; ++o)
    for (std::size_t y = 0; y < H_out; ++y)
      for (std::size_t x = 0; x < W_out; ++x) {
        double acc = p.bias[o];
        for (std::size_t c = 0; c < C_in; ++c)
          for (std::size_t i = 0; i < kh; ++i)
            for (std::size_t j = 0; j < kw; ++j) {
              const long long iy = (long long)(y * p.stride + p.dilation * i) - (long long)p.padding.h;
              const long long ix = (long long)(x * p.stride + p.dilation * j) - (long long)p.padding.w;
              if (iy < 0 || ix < 0 || iy >= (long long)H || ix >= (long long)W) continue;
              acc += p.weights[((o * C_in + c) * kh + i) * kw + j] * input[(c * H + (std::size_t)iy) * W + (std::size_t)ix];
            }
        out[(o * H_out + y) * W_out + x] = acc;
      }
  return out;
}

/// Sum over the four integer neighbours (py, px) of (1 - |y - py|)(1 - |x - px|) * in.
inline double bilinear_reference(const Tensor& input, std::size_t c, double y, double x) {
  const std::size_t H = input.dims()[1], W = input.dims()[2];
  double acc = 0.0;
  const double fy = std::floor(y), fx = std::floor(x);
  for (double py : {fy, fy + 1.0}) {
    for (double px : {fx, fx + 1.0}) {
      if (py < 0 || px < 0 || py >= (double)H || px >= (double)W) continue;
      const double wy = 1.0 - std::abs(y - py), wx = 1.0 - std::abs(x - px);
      acc += wy * wx * input[(c * H + (std::size_t)py) * W + (std::size_t)px];
    }
  }
  return acc;
}

/// Deformable convolution by explicit per-tap sampling; offsets [2*kh*kw, H, W].
inline Tensor deformable_conv_reference(const Tensor& input, const Tensor& offsets, const Conv2dParams& base) {
  const std::size_t C_in = input.dims()[0], H = input.dims()[1], W = input.dims()[2];
  const std::size_t C_out = base.weights.dims()[0], kh = base.weights.dims()[2], kw = base.weights.dims()[3];
  Tensor out({C_out, H, W});
  for (std::size_t o = 0; o < C_out; ++o)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        double acc = base.bias[o];
        for (std::size_t i = 0; i < kh; ++i)
          for (std::size_t j = 0; j < kw; ++j) {
            const std::size_t t = i * kw + j;
            const double sy = (double)y + (double)(i * base.dilation) - (double)base.padding.h +
                              offsets[((2 * t) * H + y) * W + x];
            const double sx = (double)x + (double)(j * base.dilation) - (double)base.padding.w +
                              offsets[((2 * t + 1) * H + y) * W + x];
            for (std::size_t c = 0; c < C_in; ++c) {
              acc += base.weights[((o * C_in + c) * kh + i) * kw + j] * bilinear_reference(input, c, sy, sx);
            }
          }
        out[(o * H + y) * W + x] = acc;
      }
  return out;
}

inline Tensor relu_reference(const Tensor& t) {
  Tensor out = t;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = out[i] < 0.0 ? 0.0 : out[i];
  return out;
}

/// Full sort by (descending value, ascending index), first k.
inline std::vector<std::size_t> topk_reference(const std::vector<double>& row, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> items;
  for (std::size_t i = 0; i < row.size(); ++i) items.emplace_back(row[i], i);
  std::sort(items.begin(), items.end(), [](const auto& a, const auto& b) {
    return a.first > b.first || (a.first == b.first && a.second < b.second);
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < k && i < items.size(); ++i) out.push_back(items[i].second);
  return out;
}

namespace detail {

/// Token (y, x) of f projected by w: out[d] = sum_c f[c,y,x] w[c,d].
inline std::vector<double> project(const Tensor& f, const Tensor& w, std::size_t y, std::size_t x) {
  const std::size_t C = f.dims()[0], H = f.dims()[1], W = f.dims()[2];
  std::vector<double> out(C, 0.0);
  for (std::size_t d = 0; d < C; ++d)
    for (std::size_t c = 0; c < C; ++c) out[d] += f[(c * H + y) * W + x] * w[c * C + d];
  return out;
}

/// Attention of query pixel q over an explicit list of key pixels, per head.
inline std::vector<double> attend(const std::vector<std::vector<double>>& Q, const std::vector<std::vector<double>>& K,
                                  const std::vector<std::vector<double>>& V, std::size_t q,
                                  const std::vector<std::size_t>& keys, std::size_t heads, FlopCount* macs) {
  const std::size_t C = Q[q].size(), dk = C / heads;
  std::vector<double> out(C, 0.0);
  for (std::size_t h = 0; h < heads; ++h) {
    std::vector<double> logits(keys.size());
    double mx = -INFINITY;
    for (std::size_t m = 0; m < keys.size(); ++m) {
      double dot = 0.0;
      for (std::size_t d = h * dk; d < (h + 1) * dk; ++d) dot += Q[q][d] * K[keys[m]][d];
      logits[m] = dot / std::sqrt((double)dk);
      mx = std::max(mx, logits[m]);
    }
    double z = 0.0;
    for (double& l : logits) {
      l = std::exp(l - mx);
      z += l;
    }
    for (std::size_t m = 0; m < keys.size(); ++m)
      for (std::size_t d = h * dk; d < (h + 1) * dk; ++d) out[d] += logits[m] / z * V[keys[m]][d];
  }
  if (macs) {
    macs->qk_logits += keys.size() * C;
    macs->av_aggregation += keys.size() * C;
  }
  return out;
}

inline void check_heads(std::size_t C, std::size_t heads) {
  if (heads == 0 || C % heads != 0) throw ConfigError("attention reference: heads must divide C");
}

}  // namespace detail

/// Global attention over all H*W tokens with the projections and per-head
/// scaling of `p`; no local context term.
inline Tensor dense_attention_reference(const Tensor& f, const BraParams& p, FlopCount* macs = nullptr) {
  const std::size_t C = f.dims()[0], H = f.dims()[1], W = f.dims()[2];
  detail::check_heads(C, p.heads);
  std::vector<std::vector<double>> Q, K, V;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      Q.push_back(detail::project(f, p.w_q, y, x));
      K.push_back(detail::project(f, p.w_k, y, x));
      V.push_back(detail::project(f, p.w_v, y, x));
    }
  std::vector<std::size_t> all(H * W);
  std::iota(all.begin(), all.end(), std::size_t{0});
  Tensor out({C, H, W});
  for (std::size_t q = 0; q < H * W; ++q) {
    const auto o = detail::attend(Q, K, V, q, all, p.heads, macs);
    for (std::size_t c = 0; c < C; ++c) out[c * H * W + q] = o[c];
  }
  return out;
}

/// Depthwise k x k convolution with zero padding (k-1)/2, by explicit loops.
inline Tensor depthwise_reference(const Tensor& f, const Tensor& kernel) {
  const std::size_t C = f.dims()[0], H = f.dims()[1], W = f.dims()[2], k = kernel.dims()[1];
  const long long r = (long long)(k - 1) / 2;
  Tensor out({C, H, W});
  for (std::size_t c = 0; c < C; ++c)
    for (long long y = 0; y < (long long)H; ++y)
      for (long long x = 0; x < (long long)W; ++x) {
        double acc = 0.0;
        for (long long i = 0; i < (long long)k; ++i)
          for (long long j = 0; j < (long long)k; ++j) {
            const long long iy = y + i - r, ix = x + j - r;
            if (iy < 0 || ix < 0 || iy >= (long long)H || ix >= (long long)W) continue;
            acc += kernel[(c * k + (std::size_t)i) * k + (std::size_t)j] * f[(c * H + (std::size_t)iy) * W + (std::size_t)ix];
          }
        out[(c * H + (std::size_t)y) * W + (std::size_t)x] = acc;
      }
  return out;
}

/// Routed attention written pixel by pixel: each pixel's region, pooled
/// region descriptors, top-k regions by full sort, attention over the pixels
/// of those regions, plus the depthwise local-context term on the values.
inline Tensor ba_reference(const Tensor& f, const BraParams& p, FlopCount* macs = nullptr) {
  const std::size_t C = f.dims()[0], H = f.dims()[1], W = f.dims()[2], S = p.regions_per_side;
  detail::check_heads(C, p.heads);
  if (S == 0 || H % S || W % S) throw PartitionError("ba_reference: S must divide H and W");
  const std::size_t th = H / S, tw = W / S, R = S * S;
  auto region_of = [&](std::size_t y, std::size_t x) { return (y / th) * S + x / tw; };

  std::vector<std::vector<double>> Q, K, V;
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      Q.push_back(detail::project(f, p.w_q, y, x));
      K.push_back(detail::project(f, p.w_k, y, x));
      V.push_back(detail::project(f, p.w_v, y, x));
    }
  std::vector<std::vector<std::size_t>> members(R);  // row-major pixels of each tile
  for (std::size_t ry = 0; ry < S; ++ry)
    for (std::size_t rx = 0; rx < S; ++rx)
      for (std::size_t y = ry * th; y < (ry + 1) * th; ++y)
        for (std::size_t x = rx * tw; x < (rx + 1) * tw; ++x) members[ry * S + rx].push_back(y * W + x);

  std::vector<std::vector<double>> qm(R, std::vector<double>(C, 0.0)), km(R, std::vector<double>(C, 0.0));
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x)
      for (std::size_t c = 0; c < C; ++c) {
        qm[region_of(y, x)][c] += Q[y * W + x][c] / (double)(th * tw);
        km[region_of(y, x)][c] += K[y * W + x][c] / (double)(th * tw);
      }
  std::vector<std::vector<std::size_t>> routed(R);
  for (std::size_t i = 0; i < R; ++i) {
    std::vector<double> row(R, 0.0);
    for (std::size_t j = 0; j < R; ++j)
      for (std::size_t c = 0; c < C; ++c) row[j] += qm[i][c] * km[j][c];
    routed[i] = topk_reference(row, p.topk);
  }
  if (macs) {
    macs->routing += 2 * H * W * C + R * R * C;
    macs->gather += 2 * R * p.topk * th * tw * C;
  }

  Tensor out({C, H, W});
  for (std::size_t q = 0; q < H * W; ++q) {
    std::vector<std::size_t> keys;
    for (std::size_t r : routed[region_of(q / W, q % W)])
      for (std::size_t m : members[r]) keys.push_back(m);
    const auto o = detail::attend(Q, K, V, q, keys, p.heads, macs);
    for (std::size_t c = 0; c < C; ++c) out[c * H * W + q] = o[c];
  }
  Tensor vmap({C, H, W});
  for (std::size_t q = 0; q < H * W; ++q)
    for (std::size_t c = 0; c < C; ++c) vmap[c * H * W + q] = V[q][c];
  const Tensor local = depthwise_reference(vmap, p.lce_kernel);
  if (macs) macs->lce += C * H * W * p.lce_kernel.dims()[1] * p.lce_kernel.dims()[1];
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += local[i];
  return out;
}

inline Tensor up2_reference(const Tensor& f) {
  const std::size_t C = f.dims()[0], H = f.dims()[1], W = f.dims()[2];
  Tensor out({C, 2 * H, 2 * W});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x)
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) out[(c * 2 * H + 2 * y + dy) * 2 * W + 2 * x + dx] = f[(c * H + y) * W + x];
  return out;
}

inline Tensor down2_reference(const Tensor& f) {
  const std::size_t C = f.dims()[0], H = f.dims()[1], W = f.dims()[2];
  Tensor out({C, H / 2, W / 2});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out[(c * (H / 2) + y / 2) * (W / 2) + x / 2] += f[(c * H + y) * W + x] / 4.0;
  return out;
}

/// One weighted-fusion node, literally (sum w x) / (sum w + eps) with w clamped at 0.
inline Tensor fuse_reference(const std::vector<const Tensor*>& xs, const std::vector<double>& ws, double eps) {
  double denom = eps;
  for (double w : ws) denom += w > 0 ? w : 0.0;
  Tensor out(xs.front()->dims());
  for (std::size_t j = 0; j < out.size(); ++j) {
    double num = 0.0;
    for (std::size_t i = 0; i < xs.size(); ++i) num += (ws[i] > 0 ? ws[i] : 0.0) * (*xs[i])[j];
    out[j] = num / denom;
  }
  return out;
}

/// The CFE block evaluated term by term from the reference convolutions.
inline Tensor cfe_reference(const Tensor& f, const CfeParams& p) {
  const bool act = p.activation == Activation::relu;
  auto step = [&](const Tensor& x, const Conv2dParams& c) {
    Tensor y = conv2d_reference(x, c);
    return act ? relu_reference(y) : y;
  };
  Tensor b1 = f, b2 = f, b3 = f;
  for (const auto& c : p.branch1) b1 = step(b1, c);
  for (const auto& c : p.branch2) b2 = step(b2, c);
  for (const auto& c : p.branch3) b3 = step(b3, c);
  const Tensor offsets = conv2d_reference(b3, p.deform.offset_predictor);
  b3 = deformable_conv_reference(b3, offsets, p.deform.base);
  if (act) b3 = relu_reference(b3);
  const Tensor res = conv2d_reference(f, p.residual);
  const std::size_t third = b1.dims()[0], plane = b1.dims()[1] * b1.dims()[2];
  Tensor out(res.dims());
  for (std::size_t c = 0; c < res.dims()[0]; ++c) {
    const Tensor& src = c < third ? b1 : (c < 2 * third ? b2 : b3);
    for (std::size_t i = 0; i < plane; ++i) out[c * plane + i] = src[(c % third) * plane + i] + res[c * plane + i];
  }
  return out;
}

struct PyramidReference {
  std::array<Tensor, 4> input;   // P2I..P5I
  std::array<Tensor, 4> output;  // P2O..P5O
  Tensor p4f, p3f;
};

/// The fusion equations by direct substitution.
inline PyramidReference afbifpn_reference(const std::array<Tensor, 4>& in, const PipelineParams& prm) {
  const auto& w = prm.fusion;
  const double e = w.epsilon;
  auto ba = [&](const Tensor& x, const BraParams& bp) { return prm.attention_fusion_enabled ? ba_reference(x, bp) : x; };
  PyramidReference r;
  r.input = in;
  const Tensor& P2I = in[0];
  const Tensor& P3I = in[1];
  const Tensor& P4I = in[2];
  const Tensor& P5I = in[3];
  const Tensor up_p5i = up2_reference(P5I);
  r.p4f = fuse_reference({&P4I, &up_p5i}, {w.w(4, 1), w.w(4, 2)}, e);
  const Tensor ba_p4f = ba(r.p4f, prm.bra4);
  const Tensor up_ba_p4f = up2_reference(ba_p4f);
  r.p3f = fuse_reference({&P3I, &up_ba_p4f}, {w.w(3, 1), w.w(3, 2)}, e);
  const Tensor ba_p3f = ba(r.p3f, prm.bra3);
  const Tensor up_ba_p3f = up2_reference(ba_p3f);
  r.output[0] = fuse_reference({&P2I, &up_ba_p3f}, {w.w(2, 1), w.w(2, 2)}, e);
  const Tensor down_p2o = down2_reference(r.output[0]);
  r.output[1] = fuse_reference({&P3I, &ba_p3f, &down_p2o}, {w.w(3, 3), w.w(3, 4), w.w(3, 5)}, e);
  const Tensor down_p3o = down2_reference(r.output[1]);
  r.output[2] = fuse_reference({&P4I, &ba_p4f, &down_p3o}, {w.w(4, 3), w.w(4, 4), w.w(4, 5)}, e);
  const Tensor down_p4o = down2_reference(r.output[2]);
  r.output[3] = fuse_reference({&P5I, &down_p4o}, {w.w(5, 1), w.w(5, 2)}, e);
  return r;
}

inline PyramidReference c_afbifpn_reference(const std::array<Tensor, 4>& backbone, const PipelineParams& prm) {
  std::array<Tensor, 4> in;
  for (std::size_t l = 0; l < 4; ++l) {
    in[l] = prm.cfe_enabled ? cfe_reference(backbone[l], prm.cfe[l]) : conv2d_reference(backbone[l], prm.cfe[l].residual);
  }
  return afbifpn_reference(in, prm);
}

/// Central differences with step h_i = 1e-5 * max(1, |x_i|).
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& fn, const Tensor& x,
                               double rel_step = 1e-5) {
  Tensor g(x.dims());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double h = rel_step * std::max(1.0, std::abs(x[i]));
    probe[i] = x[i] + h;
    const double fp = fn(probe);
    probe[i] = x[i] - h;
    const double fm = fn(probe);
    probe[i] = x[i];
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_diff_grad: non-finite evaluation at coordinate " + std::to_string(i));
    }
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

enum class AttentionMode { dense, routed };

/// Exact MAC counts from extents. Dense: (HW)^2 C for logits and aggregation.
/// Routed: HW (k HW / S^2) C for each, plus S^4 C affinity and 2 HW C pooling
/// for routing, 2 S^2 k n C gathered elements, and C H W k_lce^2 local context.
inline FlopCount attention_flops(std::size_t H, std::size_t W, std::size_t C, std::size_t S, std::size_t k,
                                 std::size_t heads, AttentionMode mode, std::size_t lce_kernel = 5) {
  detail::check_heads(C, heads);
  const std::uint64_t hw = H * W;
  FlopCount f;
  if (mode == AttentionMode::dense) {
    f.qk_logits = hw * hw * C;
    f.av_aggregation = hw * hw * C;
    return f;
  }
  if (S == 0 || H % S || W % S) throw PartitionError("attention_flops: S must divide H and W");
  const std::uint64_t R = S * S, n = hw / R;
  f.routing = R * R * C + 2 * hw * C;
  f.gather = 2 * R * k * n * C;
  f.qk_logits = hw * (k * n) * C;
  f.av_aggregation = hw * (k * n) * C;
  f.lce = C * hw * lce_kernel * lce_kernel;
  return f;
}

}  // namespace cafbifpn::oracles
