#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "cafbifpn/autodiff.hpp"
#include "cafbifpn/conv.hpp"
#include "cafbifpn/tensor.hpp"

namespace cafbifpn {

/// Multiply-accumulate tallies per attention stage. `gather` counts scalar
/// element copies, `routing` includes region pooling of Q and K.
struct MacCounts {
  std::uint64_t routing = 0;
  std::uint64_t gather = 0;
  std::uint64_t qk_logits = 0;
  std::uint64_t av_aggregation = 0;
  std::uint64_t lce = 0;

  std::uint64_t total() const { return routing + gather + qk_logits + av_aggregation + lce; }
  bool operator==(const MacCounts&) const = default;

  MacCounts& operator+=(const MacCounts& o) {
    routing += o.routing;
    gather += o.gather;
    qk_logits += o.qk_logits;
    av_aggregation += o.av_aggregation;
    lce += o.lce;
    return *this;
  }
};

/// Layout of a feature map split into S x S tiles.
struct RegionGeometry {
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t regions_per_side = 1;

  std::size_t regions() const { return regions_per_side * regions_per_side; }
  std::size_t tile_h() const { return height / regions_per_side; }
  std::size_t tile_w() const { return width / regions_per_side; }
  std::size_t tokens_per_region() const { return tile_h() * tile_w(); }
  bool operator==(const RegionGeometry&) const = default;
};

/// Tokens [S^2, n, C]; region r and token t follow row-major tile/pixel order.
struct RegionTokens {
  Tensor data;
  RegionGeometry geom;
};

struct BraParams {
  Tensor w_q;  // [C, C]
  Tensor w_k;
  Tensor w_v;
  Tensor lce_kernel;  // [C, k, k], k odd
  std::size_t regions_per_side = 2;
  std::size_t topk = 2;
  std::size_t heads = 1;

  std::size_t channels() const { return w_q.dim(0); }
};

/// Index matrix [rows, cols] of region ids.
struct IndexMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> ids;

  std::size_t at(std::size_t r, std::size_t c) const { return ids[r * cols + c]; }
  std::vector<std::size_t> row(std::size_t r) const {
    return {ids.begin() + static_cast<std::ptrdiff_t>(r * cols), ids.begin() + static_cast<std::ptrdiff_t>((r + 1) * cols)};
  }
  bool operator==(const IndexMatrix&) const = default;
};

struct RoutingResult {
  Tensor affinity;  // [S^2, S^2]
  IndexMatrix indices;  // [S^2, k]
  /// Smallest gap between the k-th and (k+1)-th affinity over all rows
  /// (infinite when k = S^2).
  double min_margin = std::numeric_limits<double>::infinity();
};

/// Order among equal affinities. Only ascending_id is correct; the other
/// value exists so self-checks can inject a fault.
enum class TieBreak { ascending_id, descending_id };

namespace detail {

inline void check_partition(std::size_t height, std::size_t width, std::size_t S) {
  if (S == 0 || height % S != 0 || width % S != 0) {
    throw PartitionError("cannot partition H=" + std::to_string(height) + ", W=" + std::to_string(width) +
                         " into S=" + std::to_string(S) + " regions per side");
  }
}

inline void check_bra(const BraParams& p, std::size_t channels) {
  const Dims cc{channels, channels};
  if (p.w_q.dims() != cc || p.w_k.dims() != cc || p.w_v.dims() != cc) {
    throw ShapeError("routing attention: projections must be [" + std::to_string(channels) + "," +
                     std::to_string(channels) + "]");
  }
  if (p.heads == 0 || channels % p.heads != 0) {
    throw ConfigError("routing attention: heads=" + std::to_string(p.heads) + " must divide C=" + std::to_string(channels));
  }
  const std::size_t regions = p.regions_per_side * p.regions_per_side;
  if (p.topk < 1 || p.topk > regions) {
    throw ConfigError("routing attention: k=" + std::to_string(p.topk) + " must lie in [1, S^2=" +
                      std::to_string(regions) + "]");
  }
  if (p.lce_kernel.rank() != 3 || p.lce_kernel.dim(0) != channels || p.lce_kernel.dim(1) != p.lce_kernel.dim(2)) {
    throw ShapeError("routing attention: LCE kernel must be [C,k,k], got " + to_string(p.lce_kernel.dims()));
  }
}

}  // namespace detail

// --- routing (non-differentiable) ----------------------------------------------

/// Mean over the tokens of each region: [S^2, n, C] -> [S^2, C].
inline Tensor region_pool(const RegionTokens& t, MacCounts* macs = nullptr) {
  if (macs) macs->routing += t.data.size();
  return reduce_mean_axis(t.data, 1);
}

/// Region affinities Q K^T and the k most affine regions per row, ordered by
/// descending affinity with ties broken by ascending region id.
inline RoutingResult topk_routing(const Tensor& q_pooled, const Tensor& k_pooled, std::size_t k,
                                  TieBreak tie_break = TieBreak::ascending_id, MacCounts* macs = nullptr) {
  if (q_pooled.rank() != 2 || q_pooled.dims() != k_pooled.dims()) {
    throw ShapeError("topk_routing: pooled queries/keys must share dims [S^2,C]");
  }
  const std::size_t regions = q_pooled.dim(0);
  if (k < 1 || k > regions) {
    throw ConfigError("topk_routing: k=" + std::to_string(k) + " must lie in [1, " + std::to_string(regions) + "]");
  }
  RoutingResult r;
  r.affinity = matmul(q_pooled, permute(k_pooled, {1, 0}));
  if (macs) macs->routing += regions * regions * q_pooled.dim(1);
  r.indices = IndexMatrix{regions, k, std::vector<std::size_t>(regions * k)};
  std::vector<std::size_t> order(regions);
  for (std::size_t row = 0; row < regions; ++row) {
    const double* a = &r.affinity.data()[row * regions];
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      if (a[x] != a[y]) return a[x] > a[y];
      return tie_break == TieBreak::ascending_id ? x < y : x > y;
    });
    std::copy_n(order.begin(), k, r.indices.ids.begin() + static_cast<std::ptrdiff_t>(row * k));
    if (k < regions) r.min_margin = std::min(r.min_margin, a[order[k - 1]] - a[order[k]]);
  }
  return r;
}

// --- recorded stages ------------------------------------------------------------

namespace ad {

struct RegionVar {
  Var data;
  RegionGeometry geom;
};

struct BraVars {
  Var w_q, w_k, w_v, lce_kernel;
  std::size_t regions_per_side = 2;
  std::size_t topk = 2;
  std::size_t heads = 1;
};

inline BraVars bind(Tape& t, const BraParams& p, bool requires_grad = true) {
  return BraVars{t.leaf(p.w_q, requires_grad), t.leaf(p.w_k, requires_grad), t.leaf(p.w_v, requires_grad),
                 t.leaf(p.lce_kernel, requires_grad), p.regions_per_side, p.topk, p.heads};
}

/// [C,H,W] -> [S^2, (H/S)(W/S), C].
inline RegionVar region_partition(Var f, std::size_t S) {
  const Tensor& v = f.tape->value(f);
  if (v.rank() != 3) throw ShapeError("region_partition: expected [C,H,W], got " + to_string(v.dims()));
  RegionGeometry g{v.dim(0), v.dim(1), v.dim(2), S};
  detail::check_partition(g.height, g.width, S);
  Var x = reshape(f, {g.channels, S, g.tile_h(), S, g.tile_w()});
  x = permute(x, {1, 3, 2, 4, 0});
  return {reshape(x, {g.regions(), g.tokens_per_region(), g.channels}), g};
}

inline RegionVar with_geometry(Var data, const RegionGeometry& g) {
  const Dims expect{g.regions(), g.tokens_per_region(), g.channels};
  if (data.tape->value(data).dims() != expect) {
    throw ShapeError("region tokens " + to_string(data.tape->value(data).dims()) + " inconsistent with geometry " +
                     to_string(expect));
  }
  return {data, g};
}

inline Var region_merge(const RegionVar& rt) {
  const RegionGeometry& g = rt.geom;
  detail::check_partition(g.height, g.width, g.regions_per_side);
  with_geometry(rt.data, g);
  const std::size_t S = g.regions_per_side;
  Var x = reshape(rt.data, {S, S, g.tile_h(), g.tile_w(), g.channels});
  x = permute(x, {4, 0, 2, 1, 3});
  return reshape(x, {g.channels, g.height, g.width});
}

inline RegionVar project_tokens(const RegionVar& rt, Var weights) {
  const RegionGeometry& g = rt.geom;
  const Tensor& w = weights.tape->value(weights);
  if (w.dims() != Dims{g.channels, g.channels}) {
    throw ShapeError("qkv_project: projection " + to_string(w.dims()) + " does not match token width " +
                     std::to_string(g.channels));
  }
  Var flat = reshape(rt.data, {g.regions() * g.tokens_per_region(), g.channels});
  return {reshape(matmul(flat, weights), {g.regions(), g.tokens_per_region(), g.channels}), g};
}

struct Qkv {
  RegionVar q, k, v;
};

inline Qkv qkv_project(const RegionVar& rt, const BraVars& p) {
  return {project_tokens(rt, p.w_q), project_tokens(rt, p.w_k), project_tokens(rt, p.w_v)};
}

/// out[r, m*n + t, :] = tokens[idx(r, m), t, :].
inline Var gather_regions(Var tokens, const IndexMatrix& idx, MacCounts* macs = nullptr) {
  Tape& t = *tokens.tape;
  const Tensor& src = t.value(tokens);
  if (src.rank() != 3) throw ShapeError("gather: tokens must be [S^2,n,C]");
  const std::size_t regions = src.dim(0), n = src.dim(1), C = src.dim(2);
  if (idx.rows != regions) {
    throw IndexError("gather: index matrix has " + std::to_string(idx.rows) + " rows for " + std::to_string(regions) +
                     " regions");
  }
  for (std::size_t id : idx.ids) {
    if (id >= regions) throw IndexError("gather: region id " + std::to_string(id) + " out of range");
  }
  const std::size_t block = n * C;
  Tensor out({regions, idx.cols * n, C});
  for (std::size_t r = 0; r < regions; ++r) {
    for (std::size_t m = 0; m < idx.cols; ++m) {
      auto from = src.data().subspan(idx.at(r, m) * block, block);
      std::copy(from.begin(), from.end(), out.data().begin() + static_cast<std::ptrdiff_t>((r * idx.cols + m) * block));
    }
  }
  if (macs) macs->gather += out.size();
  return t.record("gather_regions", std::move(out), {tokens}, [tokens, idx, block](const Tensor& g, GradientSink& s) {
    Tensor d(s.value(tokens).dims());
    for (std::size_t r = 0; r < idx.rows; ++r) {
      for (std::size_t m = 0; m < idx.cols; ++m) {
        const std::size_t dst = idx.at(r, m) * block;
        const std::size_t from = (r * idx.cols + m) * block;
        for (std::size_t i = 0; i < block; ++i) d[dst + i] += g[from + i];
      }
    }
    s.accumulate(tokens, d);
  });
}

struct GatheredKv {
  Var k;
  Var v;
};

inline GatheredKv gather_kv(const RegionVar& k, const RegionVar& v, const RoutingResult& routing,
                            MacCounts* macs = nullptr) {
  return {gather_regions(k.data, routing.indices, macs), gather_regions(v.data, routing.indices, macs)};
}

/// [R, m, C] -> [R*heads, m, C/heads] with contiguous channel groups per head.
inline Var split_heads(Var x, std::size_t heads) {
  const Dims d = x.tape->value(x).dims();
  const std::size_t dk = d[2] / heads;
  Var y = reshape(x, {d[0], d[1], heads, dk});
  y = permute(y, {0, 2, 1, 3});
  return reshape(y, {d[0] * heads, d[1], dk});
}

inline Var merge_heads(Var x, std::size_t regions, std::size_t heads) {
  const Dims d = x.tape->value(x).dims();
  Var y = reshape(x, {regions, heads, d[1], d[2]});
  y = permute(y, {0, 2, 1, 3});
  return reshape(y, {regions, d[1], heads * d[2]});
}

/// Per region and head: softmax(q K_g^T / sqrt(d_k)) V_g.
inline RegionVar token_attention(const RegionVar& q, Var k_gathered, Var v_gathered, std::size_t heads,
                                 MacCounts* macs = nullptr) {
  const RegionGeometry& g = q.geom;
  if (heads == 0 || g.channels % heads != 0) {
    throw ConfigError("token_attention: heads=" + std::to_string(heads) + " must divide C=" +
                      std::to_string(g.channels));
  }
  const Dims& kd = k_gathered.tape->value(k_gathered).dims();
  if (kd.size() != 3 || kd[0] != g.regions() || kd[2] != g.channels ||
      v_gathered.tape->value(v_gathered).dims() != kd) {
    throw ShapeError("token_attention: gathered keys/values must be [S^2, k*n, C]");
  }
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(g.channels / heads));
  Var qh = split_heads(q.data, heads);
  Var kh = split_heads(k_gathered, heads);
  Var vh = split_heads(v_gathered, heads);
  Var logits = scale(batched_matmul(qh, kh, true, macs ? &macs->qk_logits : nullptr), inv_scale);
  Var alpha = softmax_lastdim(logits);
  Var out = batched_matmul(alpha, vh, false, macs ? &macs->av_aggregation : nullptr);
  return {merge_heads(out, g.regions(), heads), g};
}

/// Local context: depthwise k x k convolution over the re-spatialised values.
inline Var lce(const RegionVar& v, Var kernel, MacCounts* macs = nullptr) {
  const Tensor& kv = kernel.tape->value(kernel);
  if (kv.rank() != 3 || kv.dim(0) != v.geom.channels || kv.dim(1) != kv.dim(2)) {
    throw ShapeError("lce: kernel must be [C,k,k] with C=" + std::to_string(v.geom.channels) + ", got " +
                     to_string(kv.dims()));
  }
  const std::size_t k = kv.dim(1);  // read before recording; the tape may reallocate
  Var spatial = region_merge(v);
  if (macs) macs->lce += v.geom.channels * v.geom.height * v.geom.width * k * k;
  return depthwise_conv2d(spatial, kernel, (k - 1) / 2);
}

struct BaOptions {
  TieBreak tie_break = TieBreak::ascending_id;
  /// Reuse these routing indices instead of recomputing them (for
  /// finite-difference checks, where selection must not move).
  const RoutingResult* frozen_routing = nullptr;
  MacCounts* macs = nullptr;
};

struct BaResult {
  Var output;
  RoutingResult routing;
};

/// Bi-level routing attention on a [C,H,W] map; output has the same dims.
inline BaResult ba_forward(Var f, const BraVars& p, const BaOptions& opt = {}) {
  Tape& t = *f.tape;
  const Tensor& fv = t.value(f);
  if (fv.rank() != 3) throw ShapeError("ba_forward: expected [C,H,W], got " + to_string(fv.dims()));
  detail::check_bra(BraParams{t.value(p.w_q), t.value(p.w_k), t.value(p.w_v), t.value(p.lce_kernel),
                              p.regions_per_side, p.topk, p.heads},
                    fv.dim(0));

  RegionVar tokens = region_partition(f, p.regions_per_side);
  Qkv qkv = qkv_project(tokens, p);

  RoutingResult routing;
  if (opt.frozen_routing) {
    routing = *opt.frozen_routing;
    if (routing.indices.rows != tokens.geom.regions() || routing.indices.cols != p.topk) {
      throw IndexError("ba_forward: frozen routing has the wrong shape");
    }
  } else {
    const Tensor q_pooled = region_pool({t.value(qkv.q.data), tokens.geom}, opt.macs);
    const Tensor k_pooled = region_pool({t.value(qkv.k.data), tokens.geom}, opt.macs);
    routing = topk_routing(q_pooled, k_pooled, p.topk, opt.tie_break, opt.macs);
    t.diagnostics().min_routing_margin = std::min(t.diagnostics().min_routing_margin, routing.min_margin);
    std::uint64_t h = 0;
    for (std::size_t id : routing.indices.ids) h = h * 31 + id;
    t.diagnostics().note_branch(h);
  }

  GatheredKv kv = gather_kv(qkv.k, qkv.v, routing, opt.macs);
  RegionVar attended = token_attention(qkv.q, kv.k, kv.v, p.heads, opt.macs);
  Var out = add(region_merge(attended), lce(qkv.v, p.lce_kernel, opt.macs));
  return {out, std::move(routing)};
}

}  // namespace ad

// --- value-level entry points ------------------------------------------------------

inline RegionTokens region_partition(const Tensor& f, std::size_t S) {
  Tape t;
  ad::RegionVar r = ad::region_partition(t.constant(f), S);
  return {t.value(r.data), r.geom};
}

inline Tensor region_merge(const RegionTokens& rt) {
  Tape t;
  return t.value(ad::region_merge(ad::with_geometry(t.constant(rt.data), rt.geom)));
}

inline std::array<RegionTokens, 3> qkv_project(const RegionTokens& rt, const BraParams& p) {
  Tape t;
  auto q = ad::qkv_project(ad::with_geometry(t.constant(rt.data), rt.geom), ad::bind(t, p, false));
  return {RegionTokens{t.value(q.q.data), rt.geom}, RegionTokens{t.value(q.k.data), rt.geom},
          RegionTokens{t.value(q.v.data), rt.geom}};
}

inline std::pair<Tensor, Tensor> gather_kv(const RegionTokens& k, const RegionTokens& v, const RoutingResult& routing) {
  Tape t;
  auto g = ad::gather_kv(ad::with_geometry(t.constant(k.data), k.geom), ad::with_geometry(t.constant(v.data), v.geom),
                         routing);
  return {t.value(g.k), t.value(g.v)};
}

inline RegionTokens token_attention(const RegionTokens& q, const Tensor& k_gathered, const Tensor& v_gathered,
                                    std::size_t heads) {
  Tape t;
  auto o = ad::token_attention(ad::with_geometry(t.constant(q.data), q.geom), t.constant(k_gathered),
                               t.constant(v_gathered), heads);
  return {t.value(o.data), q.geom};
}

inline Tensor lce(const RegionTokens& v, const Tensor& kernel) {
  Tape t;
  return t.value(ad::lce(ad::with_geometry(t.constant(v.data), v.geom), t.constant(kernel)));
}

inline Tensor ba_forward(const Tensor& f, const BraParams& p, const ad::BaOptions& opt = {}) {
  Tape t;
  auto r = ad::ba_forward(t.constant(f), ad::bind(t, p, false), opt);
  return t.value(r.output);
}

}  // namespace cafbifpn
