#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cafbifpn/afbifpn.hpp"
#include "cafbifpn/cfe.hpp"
#include "cafbifpn/gradcheck.hpp"
#include "cafbifpn/io.hpp"
#include "cafbifpn/oracles.hpp"
#include "cafbifpn/routing.hpp"

namespace cafbifpn {

// --- seeded draws shared by the self-check, tests and acceptance runs -------------------

inline Conv2dParams random_conv(std::size_t c_out, std::size_t c_in, std::size_t kh, std::size_t kw, SplitMix64& rng,
                                std::size_t dilation = 1, double scale = 1.0) {
  Conv2dParams p = make_conv(c_out, c_in, kh, kw, dilation);
  p.weights = Tensor::uniform(p.weights.dims(), rng, -scale, scale);
  p.bias = Tensor::uniform(p.bias.dims(), rng, -scale, scale);
  return p;
}

struct ConvCase {
  Tensor input;
  Conv2dParams params;
};

/// C_in, C_out <= 8; H, W <= 16; k_h, k_w in {1,3,5} drawn independently;
/// dilation in {1,2}; stride in {1,2}; padding 0..2 per axis.
inline ConvCase draw_conv_case(SplitMix64& rng) {
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng.next_u64() % n); };
  static constexpr std::size_t kernels[] = {1, 3, 5};
  for (;;) {
    const std::size_t cin = 1 + pick(8), cout = 1 + pick(8);
    const std::size_t H = 1 + pick(16), W = 1 + pick(16);
    const std::size_t kh = kernels[pick(3)], kw = kernels[pick(3)];
    const std::size_t d = 1 + pick(2), s = 1 + pick(2);
    const Padding pad{pick(3), pick(3)};
    if (H + 2 * pad.h < d * (kh - 1) + 1 || W + 2 * pad.w < d * (kw - 1) + 1) continue;
    ConvCase c;
    c.input = Tensor::uniform({cin, H, W}, rng);
    c.params = random_conv(cout, cin, kh, kw, rng, d);
    c.params.stride = s;
    c.params.padding = pad;
    return c;
  }
}

inline BraParams random_bra(std::size_t C, std::size_t S, std::size_t k, std::size_t heads, SplitMix64& rng,
                            bool zero_lce = false, std::size_t lce_kernel = 5, double scale = 1.0) {
  BraParams p;
  p.w_q = Tensor::uniform({C, C}, rng, -scale, scale);
  p.w_k = Tensor::uniform({C, C}, rng, -scale, scale);
  p.w_v = Tensor::uniform({C, C}, rng, -scale, scale);
  p.lce_kernel = zero_lce ? Tensor({C, lce_kernel, lce_kernel})
                          : Tensor::uniform({C, lce_kernel, lce_kernel}, rng, -scale, scale);
  p.regions_per_side = S;
  p.topk = k;
  p.heads = heads;
  return p;
}

struct AttentionCase {
  Tensor input;
  BraParams params;
};

/// C <= 16 (a multiple of heads), H = W <= 16 divisible by S, S in {1,2,4},
/// heads in {1,2}, k = S^2 and zero LCE.
inline AttentionCase draw_full_routing_case(SplitMix64& rng) {
  auto pick = [&](std::size_t n) { return static_cast<std::size_t>(rng.next_u64() % n); };
  static constexpr std::size_t sides[] = {1, 2, 4};
  const std::size_t S = sides[pick(3)];
  const std::size_t heads = 1 + pick(2);
  const std::size_t C = heads * (1 + pick(16 / heads));
  const std::size_t H = S * (1 + pick(16 / S));
  AttentionCase c;
  c.input = Tensor::uniform({C, H, H}, rng);
  c.params = random_bra(C, S, S * S, heads, rng, true, 3, 0.5);
  return c;
}

/// Named byte strings that the tensor decoder must reject.
inline std::vector<std::pair<std::string, std::vector<std::uint8_t>>> malformed_tensor_corpus(SplitMix64& rng) {
  const auto good = encode_tensor(Tensor::uniform({2, 3, 4}, rng));
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> out;
  auto mutate = [&](std::string name, std::size_t at, std::uint8_t v) {
    auto b = good;
    b[at] = v;
    out.emplace_back(std::move(name), std::move(b));
  };
  mutate("bad magic", 0, 'X');
  mutate("bad version", 4, 2);
  mutate("dtype 0", 5, 0);
  mutate("dtype 7", 5, 7);
  mutate("rank 0", 6, 0);
  mutate("reserved byte set", 7, 1);
  mutate("zero extent", 8, 0);
  mutate("rank larger than header", 6, 200);
  for (std::size_t cut : {0ul, 3ul, 7ul, 8ul, 15ul, 31ul, good.size() - 1, good.size() - 8}) {
    out.emplace_back("truncated to " + std::to_string(cut) + " bytes",
                     std::vector<std::uint8_t>(good.begin(), good.begin() + static_cast<std::ptrdiff_t>(cut)));
  }
  auto extra = good;
  extra.push_back(0);
  out.emplace_back("trailing byte", std::move(extra));
  auto f32 = good;
  f32[5] = 1;
  out.emplace_back("float64 payload labelled float32", std::move(f32));
  auto huge = good;
  for (std::size_t i = 8; i < 16; ++i) huge[i] = 0xFF;
  out.emplace_back("overflowing extent", std::move(huge));
  for (int i = 0; i < 16; ++i) {
    std::vector<std::uint8_t> junk(rng.next_u64() % 64);
    for (auto& byte : junk) byte = static_cast<std::uint8_t>(rng.next_u64());
    out.emplace_back("random bytes " + std::to_string(i), std::move(junk));
  }
  return out;
}

/// Desk-scale backbone maps: level 2 at extent x extent, channels {3,4,5,6}.
inline std::array<Tensor, 4> desk_backbone(std::uint64_t seed, std::size_t extent = 16) {
  std::array<Dims, 4> dims;
  const std::array<std::size_t, 4> channels{3, 4, 5, 6};
  for (std::size_t l = 0; l < 4; ++l) dims[l] = {channels[l], extent >> l, extent >> l};
  return make_backbone_fixture(seed, dims);
}

inline PipelineParams desk_pipeline_params(const PipelineConfig& cfg, std::uint64_t seed) {
  return make_pipeline_params({3, 4, 5, 6}, cfg, seed);
}

// --- self-check ---------------------------------------------------------------------------

struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool ok, const std::string& what) {
  if (!ok) throw CheckFailure(what);
}

inline std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(3) << v;
  return s.str();
}

struct SelfcheckOptions {
  /// Test hook: routing tie order handed to every routing-dependent property.
  TieBreak tie_break = TieBreak::ascending_id;
};

struct Property {
  std::string name;
  std::function<std::string(const SelfcheckOptions&)> run;  // detail on success, throws on failure
};

struct PropertyResult {
  std::string name;
  bool passed = false;
  std::string detail;
  double seconds = 0.0;
};

namespace checks {

inline std::string softmax_rows(const SelfcheckOptions&) {
  SplitMix64 rng(11);
  Tensor x = Tensor::uniform({9, 7}, rng, -50.0, 50.0);
  for (std::size_t j = 0; j < 7; ++j) x.at(0, j) = j % 2 ? 1e3 : -1e3;
  const Tensor s = softmax_lastdim(x);
  double worst = 0.0;
  for (std::size_t i = 0; i < 9; ++i) {
    double z = 0.0;
    for (std::size_t j = 0; j < 7; ++j) {
      require(s.at(i, j) >= 0.0, "negative softmax entry");
      z += s.at(i, j);
    }
    worst = std::max(worst, std::abs(z - 1.0));
  }
  require(worst <= 1e-12, "row sum off by " + fmt(worst));
  return "max |row sum - 1| = " + fmt(worst);
}

inline std::string reshape_permute_roundtrip(const SelfcheckOptions&) {
  SplitMix64 rng(12);
  const Tensor x = Tensor::uniform({2, 3, 4, 5}, rng);
  for (const std::vector<std::size_t>& perm : std::vector<std::vector<std::size_t>>{{3, 1, 0, 2}, {1, 2, 3, 0}, {0, 1, 2, 3}}) {
    require(bit_identical(permute(permute(x, perm), inverse_permutation(perm)), x), "permute round trip differs");
  }
  require(bit_identical(reshape(reshape(x, {6, 20}), x.dims()), x), "reshape round trip differs");
  return "3 permutations and 1 reshape bit-identical";
}

inline std::string rng_stream(const SelfcheckOptions&) {
  SplitMix64 a(0);
  require(a.next_u64() == 0xE220A8397B1DCDAFULL, "seed 0 first output mismatch");
  SplitMix64 b(42), c(42);
  for (int i = 0; i < 1000; ++i) require(b.next_u64() == c.next_u64(), "streams with equal seeds diverge");
  return "reference output and 1000-draw replay match";
}

inline double worst(const std::vector<GroupReport>& rs, std::size_t* checked = nullptr) {
  double w = 0.0;
  std::size_t n = 0;
  for (const auto& r : rs) {
    w = std::max(w, r.max_error);
    n += r.checked;
  }
  if (checked) *checked = n;
  return w;
}

inline std::string require_gradients(const std::vector<GroupReport>& rs) {
  std::size_t n = 0;
  const double w = worst(rs, &n);
  for (const auto& r : rs) {
    require(r.checked > 0, "no smooth coordinate found for " + r.name);
    require(r.passed, r.name + " gradient error " + fmt(r.max_error));
  }
  return std::to_string(n) + " coordinates, max error " + fmt(w);
}

inline std::string op_gradients(const SelfcheckOptions&) {
  SplitMix64 rng(13);
  std::vector<Tensor> in{Tensor::uniform({3, 4}, rng), Tensor::uniform({4, 5}, rng), Tensor::uniform({3, 5}, rng)};
  auto build = [](Tape&, const std::vector<Var>& v) {
    Var m = ad::matmul(v[0], v[1]);
    Var s = ad::mul(ad::softmax_lastdim(m), v[2]);
    Var r = ad::relu(ad::sub(m, v[2]));
    Var q = ad::slice(ad::concat_axis({s, r}, 0), 1, 1, 3);
    Var p = ad::reshape(ad::permute(q, {1, 0}), {3, 2, 3});
    Var b = ad::batched_matmul(p, p, true);
    return ad::add(ad::scale(ad::reduce_mean_axis(b, 2), 0.5), ad::reduce_mean_axis(p, 2));
  };
  return require_gradients(check_function_gradients(build, in, {"a", "b", "c"}));
}

inline std::string conv_oracle(const SelfcheckOptions&) {
  SplitMix64 rng(21);
  double w = 0.0;
  for (int i = 0; i < 25; ++i) {
    const ConvCase c = draw_conv_case(rng);
    w = std::max(w, max_abs_diff(conv2d(c.input, c.params), oracles::conv2d_reference(c.input, c.params)));
  }
  require(w <= 1e-12, "max diff " + fmt(w));
  return "25 draws, max diff " + fmt(w);
}

inline std::string dilated_receptive_field(const SelfcheckOptions&) {
  for (std::size_t k : {3, 5}) {
    for (std::size_t d : {1, 2, 3}) {
      Conv2dParams p = make_conv(1, 1, k, k, d);
      p.weights = Tensor(p.weights.dims(), 1.0);
      const int r = impulse_support_radius([&](const Tensor& x) { return conv2d(x, p); }, 1, 2 * d * k + 3);
      require(r == static_cast<int>(d * (k - 1) / 2),
              "k=" + std::to_string(k) + " d=" + std::to_string(d) + " support radius " + std::to_string(r));
    }
  }
  return "support radius d(k-1)/2 for k in {3,5}, d in {1,2,3}";
}

inline std::string deformable_zero_offsets(const SelfcheckOptions&) {
  SplitMix64 rng(22);
  for (int i = 0; i < 5; ++i) {
    const std::size_t cin = 1 + rng.next_u64() % 4, cout = 1 + rng.next_u64() % 4;
    const std::size_t H = 3 + rng.next_u64() % 8, W = 3 + rng.next_u64() % 8;
    DeformableParams p = make_deformable(cout, cin, 3);
    p.base = random_conv(cout, cin, 3, 3, rng);
    const Tensor x = Tensor::uniform({cin, H, W}, rng);
    require(bit_identical(deformable_conv2d(x, p), conv2d(x, p.base)), "zero-offset deformable differs from conv2d");
  }
  return "5 draws bit-identical";
}

inline std::string conv_gradients(const SelfcheckOptions&) {
  SplitMix64 rng(23);
  std::vector<GroupReport> all;
  {
    Conv2dParams p = random_conv(2, 3, 1, 3, rng, 2);
    std::vector<Tensor> in{Tensor::uniform({3, 5, 6}, rng), p.weights, p.bias};
    auto r = check_function_gradients(
        [&](Tape&, const std::vector<Var>& v) { return ad::conv2d(v[0], ad::ConvVars{v[1], v[2], 1, p.padding, 2}); },
        in, {"conv input", "conv weights", "conv bias"});
    all.insert(all.end(), r.begin(), r.end());
  }
  {
    Conv2dParams p = random_conv(2, 2, 3, 3, rng);
    p.stride = 2;
    std::vector<Tensor> in{Tensor::uniform({2, 7, 6}, rng), p.weights, p.bias};
    auto r = check_function_gradients(
        [&](Tape&, const std::vector<Var>& v) { return ad::conv2d(v[0], ad::ConvVars{v[1], v[2], 2, p.padding, 1}); },
        in, {"strided input", "strided weights", "strided bias"});
    all.insert(all.end(), r.begin(), r.end());
  }
  {
    std::vector<Tensor> in{Tensor::uniform({2, 5, 5}, rng), Tensor::uniform({2, 3, 3}, rng)};
    auto r = check_function_gradients(
        [](Tape&, const std::vector<Var>& v) { return ad::depthwise_conv2d(v[0], v[1], 1); }, in,
        {"depthwise input", "depthwise weights"});
    all.insert(all.end(), r.begin(), r.end());
  }
  {
    Conv2dParams base = random_conv(2, 2, 3, 3, rng);
    Tensor offsets = Tensor::uniform({18, 4, 5}, rng, -1.3, 1.3);
    for (auto& o : offsets.data()) o += 0.173;
    std::vector<Tensor> in{Tensor::uniform({2, 4, 5}, rng), offsets, base.weights, base.bias};
    auto r = check_function_gradients(
        [&](Tape&, const std::vector<Var>& v) {
          return ad::deformable_conv2d_with_offsets(v[0], v[1], ad::ConvVars{v[2], v[3], 1, base.padding, 1});
        },
        in, {"deformable input", "offsets", "deformable weights", "deformable bias"});
    all.insert(all.end(), r.begin(), r.end());
  }
  return require_gradients(all);
}

inline std::string partition_roundtrip(const SelfcheckOptions&) {
  const RegionTokens rt = region_partition(Tensor::iota({1, 4, 4}), 2);
  const std::vector<double> r0{0, 1, 4, 5}, r3{10, 11, 14, 15};
  for (std::size_t t = 0; t < 4; ++t) {
    require(rt.data.at(0, t, 0) == r0[t] && rt.data.at(3, t, 0) == r3[t], "iota tiles out of order");
  }
  SplitMix64 rng(31);
  for (std::size_t S : {1, 2, 4}) {
    const Tensor f = Tensor::uniform({3, 8, 12}, rng);
    require(bit_identical(region_merge(region_partition(f, S)), f), "merge(partition(f)) != f for S=" + std::to_string(S));
  }
  return "iota layout and round trips for S in {1,2,4}";
}

inline std::string sparse_dense(const SelfcheckOptions& o) {
  SplitMix64 rng(32);
  double w = 0.0;
  for (int i = 0; i < 6; ++i) {
    const AttentionCase c = draw_full_routing_case(rng);
    ad::BaOptions opt;
    opt.tie_break = o.tie_break;
    w = std::max(w, max_abs_diff(ba_forward(c.input, c.params, opt), oracles::dense_attention_reference(c.input, c.params)));
  }
  require(w <= 1e-10, "max diff " + fmt(w));
  return "6 cases with k = S^2, max diff " + fmt(w);
}

inline std::string topk_selection(const SelfcheckOptions& o) {
  // Affinity row i equals the key column, so every row is [0.2, 0.9, 0.9, 0.1].
  const Tensor q({4, 1}, 1.0);
  const Tensor k({4, 1}, std::vector<double>{0.2, 0.9, 0.9, 0.1});
  const RoutingResult example = topk_routing(q, k, 2, o.tie_break);
  require(example.indices.row(0) == std::vector<std::size_t>{1, 2},
          "tie example selected [" + std::to_string(example.indices.at(0, 0)) + "," +
              std::to_string(example.indices.at(0, 1)) + "], expected [1,2]");
  SplitMix64 rng(33);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t R = 9, C = 3, kk = 1 + rng.next_u64() % R;
    Tensor qp = Tensor::uniform({R, C}, rng);
    Tensor kp = Tensor::uniform({R, C}, rng);
    for (std::size_t c = 0; c < C; ++c) {
      kp.at(4, c) = kp.at(1, c);
      kp.at(7, c) = kp.at(1, c);
      for (std::size_t r = 0; r < R; ++r) qp.at(r, c) = std::round(qp.at(r, c) * 2.0) / 2.0;
      for (std::size_t r = 0; r < R; ++r) kp.at(r, c) = std::round(kp.at(r, c) * 2.0) / 2.0;
    }
    const RoutingResult rr = topk_routing(qp, kp, kk, o.tie_break);
    for (std::size_t r = 0; r < R; ++r) {
      std::vector<double> row(R);
      for (std::size_t j = 0; j < R; ++j) row[j] = rr.affinity.at(r, j);
      require(rr.indices.row(r) == oracles::topk_reference(row, kk), "row " + std::to_string(r) + " differs from full sort");
    }
  }
  return "tie example [1,2] and 20 tied matrices match the full-sort oracle";
}

inline std::string attention_weights(const SelfcheckOptions& o) {
  SplitMix64 rng(34);
  Tape t;
  const Tensor f = Tensor::uniform({4, 8, 8}, rng);
  ad::BaOptions opt;
  opt.tie_break = o.tie_break;
  ad::ba_forward(t.constant(f), ad::bind(t, random_bra(4, 2, 2, 2, rng, false, 3), false), opt);
  std::size_t rows = 0;
  double w = 0.0;
  for (std::size_t id = 0; id < t.size(); ++id) {
    const Var v{&t, id};
    if (t.op_name(v) != "softmax") continue;
    const Tensor& a = t.value(v);
    const std::size_t n = a.dims().back();
    for (std::size_t r = 0; r < a.size() / n; ++r, ++rows) {
      double z = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        require(a[r * n + j] >= 0.0, "negative attention weight");
        z += a[r * n + j];
      }
      w = std::max(w, std::abs(z - 1.0));
    }
  }
  require(rows > 0, "no attention weights recorded");
  require(w <= 1e-12, "row sum off by " + fmt(w));
  return std::to_string(rows) + " rows, max |sum - 1| = " + fmt(w);
}

inline std::string convex_bound(const SelfcheckOptions& o) {
  SplitMix64 rng(35);
  for (std::size_t heads : {1, 2}) {
    const BraParams p = random_bra(4, 2, 2, heads, rng, false, 3);
    const RegionTokens rt = region_partition(Tensor::uniform({4, 8, 8}, rng), 2);
    const auto qkv = qkv_project(rt, p);
    const RoutingResult routing =
        topk_routing(region_pool(qkv[0]), region_pool(qkv[1]), p.topk, o.tie_break);
    const auto [kg, vg] = gather_kv(qkv[1], qkv[2], routing);
    const RegionTokens out = token_attention(qkv[0], kg, vg, heads);
    for (std::size_t r = 0; r < rt.geom.regions(); ++r) {
      for (std::size_t c = 0; c < 4; ++c) {
        double lo = INFINITY, hi = -INFINITY;
        for (std::size_t m = 0; m < vg.dim(1); ++m) {
          lo = std::min(lo, vg.at(r, m, c));
          hi = std::max(hi, vg.at(r, m, c));
        }
        for (std::size_t tkn = 0; tkn < rt.geom.tokens_per_region(); ++tkn) {
          const double v = out.data.at(r, tkn, c);
          require(v >= lo - 1e-12 && v <= hi + 1e-12, "output outside gathered value range");
        }
      }
    }
  }
  return "every output within [min, max] of its gathered values";
}

inline std::string permutation_equivariance(const SelfcheckOptions& o) {
  SplitMix64 rng(36);
  const std::size_t S = 2, C = 4, E = 8;
  const std::vector<std::size_t> pi{2, 0, 3, 1};
  const BraParams p = random_bra(C, S, 2, 1, rng, true, 3);
  const Tensor f = Tensor::uniform({C, E, E}, rng);
  const RegionTokens rt = region_partition(f, S);
  Tensor moved = rt.data;
  const std::size_t stride = rt.geom.tokens_per_region() * C;
  for (std::size_t r = 0; r < S * S; ++r) {
    std::copy_n(rt.data.data().begin() + static_cast<std::ptrdiff_t>(r * stride), stride,
                moved.data().begin() + static_cast<std::ptrdiff_t>(pi[r] * stride));
  }
  const Tensor g = region_merge({moved, rt.geom});

  auto run = [&](const Tensor& x) {
    Tape t;
    ad::BaOptions opt;
    opt.tie_break = o.tie_break;
    auto res = ad::ba_forward(t.constant(x), ad::bind(t, p, false), opt);
    return std::make_pair(region_partition(t.value(res.output), S), res.routing);
  };
  const auto [out_f, route_f] = run(f);
  const auto [out_g, route_g] = run(g);
  for (std::size_t r = 0; r < S * S; ++r) {
    std::vector<std::size_t> expect;
    for (std::size_t j : route_f.indices.row(r)) expect.push_back(pi[j]);
    require(route_g.indices.row(pi[r]) == expect, "routing row " + std::to_string(r) + " not permuted consistently");
    for (std::size_t i = 0; i < stride; ++i) {
      require(std::abs(out_g.data[pi[r] * stride + i] - out_f.data[r * stride + i]) <= 1e-12,
              "output tile " + std::to_string(r) + " not permuted consistently");
    }
  }
  return "routing rows and output tiles follow the tile permutation";
}

inline std::string routing_gradients(const SelfcheckOptions& o) {
  SplitMix64 rng(37);
  for (int attempt = 0; attempt < 32; ++attempt) {
    const BraParams p = random_bra(4, 2, 2, 2, rng, false, 3, 0.8);
    const Tensor f = Tensor::uniform({4, 8, 8}, rng);
    Tape probe;
    ad::BaOptions opt;
    opt.tie_break = o.tie_break;
    const RoutingResult routing = ad::ba_forward(probe.constant(f), ad::bind(probe, p, false), opt).routing;
    if (routing.min_margin <= 1e-3) continue;
    opt.frozen_routing = &routing;
    auto build = [&](Tape&, const std::vector<Var>& v) {
      return ad::ba_forward(v[0], ad::BraVars{v[1], v[2], v[3], v[4], p.regions_per_side, p.topk, p.heads}, opt).output;
    };
    return require_gradients(check_function_gradients(build, {f, p.w_q, p.w_k, p.w_v, p.lce_kernel},
                                                      {"input", "w_q", "w_k", "w_v", "lce"}));
  }
  throw CheckFailure("no draw with routing margin above 1e-3");
}

inline std::string mac_accounting(const SelfcheckOptions& o) {
  SplitMix64 rng(38);
  for (std::size_t S : {1, 2, 4}) {
    for (std::size_t k = 1; k <= S * S; k += std::max<std::size_t>(1, S * S / 4)) {
      const std::size_t C = 4, H = 8;
      const auto dense = oracles::attention_flops(H, H, C, S, k, 1, oracles::AttentionMode::dense);
      const auto routed = oracles::attention_flops(H, H, C, S, k, 1, oracles::AttentionMode::routed, 3);
      require(routed.qk_logits * S * S == dense.qk_logits * k && routed.av_aggregation * S * S == dense.av_aggregation * k,
              "ratio differs from k/S^2 at S=" + std::to_string(S) + " k=" + std::to_string(k));
      MacCounts runtime;
      ad::BaOptions opt;
      opt.tie_break = o.tie_break;
      opt.macs = &runtime;
      ba_forward(Tensor::uniform({C, H, H}, rng), random_bra(C, S, k, 1, rng, false, 3), opt);
      require(runtime == routed, "runtime counters differ from attention_flops at S=" + std::to_string(S) +
                                     " k=" + std::to_string(k));
    }
  }
  return "routed/dense = k/S^2 and runtime counters match";
}

inline std::string cfe_spatial(const SelfcheckOptions&) {
  SplitMix64 rng(41);
  for (auto [H, W] : std::vector<std::pair<std::size_t, std::size_t>>{{5, 7}, {8, 8}, {1, 3}, {9, 4}}) {
    const CfeParams p = make_cfe_random(3, 6, rng);
    require(cfe_forward(Tensor::uniform({3, H, W}, rng), p).dims() == Dims{6, H, W},
            "dims changed for " + std::to_string(H) + "x" + std::to_string(W));
  }
  return "H, W preserved on 4 shapes";
}

inline std::string cfe_zero_branches(const SelfcheckOptions&) {
  SplitMix64 rng(42);
  CfeParams p = make_cfe_random(3, 9, rng);
  const Conv2dParams* keep = &p.residual;
  for_each_conv(p, [&](Conv2dParams& c) {
    if (&c == keep) return;
    c.weights = Tensor(c.weights.dims());
    c.bias = Tensor(c.bias.dims());
  });
  const Tensor f = Tensor::uniform({3, 6, 7}, rng);
  require(bit_identical(cfe_forward(f, p), conv2d(f, p.residual)), "output differs from residual projection");
  return "output equals residual projection exactly";
}

inline std::string cfe_deformable_degeneracy(const SelfcheckOptions&) {
  SplitMix64 rng(43);
  const CfeParams p = make_cfe_random(3, 6, rng);
  const Tensor f = Tensor::uniform({3, 6, 7}, rng);
  Tape t;
  const auto br = ad::cfe_forward_detailed(t.constant(f), ad::bind(t, p, false));
  Tensor x = f;
  for (const auto& c : p.branch3) x = relu(conv2d(x, c));
  require(bit_identical(t.value(br.b3), relu(conv2d(x, p.deform.base))), "branch 3 differs from standard-conv chain");
  return "branch 3 equals its standard-conv counterpart exactly";
}

inline std::string cfe_gradients(const SelfcheckOptions&) {
  SplitMix64 rng(44);
  CfeParams p = make_cfe_random(2, 3, rng, 2, Activation::none, 0.5);
  p.deform.offset_predictor = random_conv(18, 1, 3, 3, rng, 1, 0.3);
  const Tensor f = Tensor::uniform({2, 5, 6}, rng);
  auto build = [&](Tape& t, const std::vector<Var>& v) {
    ad::CfeVars cv = ad::bind(t, p, false);
    cv.branch1[3].weights = v[1];
    cv.branch2[1].weights = v[2];
    cv.branch3[0].bias = v[3];
    cv.deform_base.weights = v[4];
    cv.offset_predictor.weights = v[5];
    cv.residual.weights = v[6];
    return ad::cfe_forward(v[0], cv);
  };
  return require_gradients(check_function_gradients(
      build, {f, p.branch1[3].weights, p.branch2[1].weights, p.branch3[0].bias, p.deform.base.weights,
              p.deform.offset_predictor.weights, p.residual.weights},
      {"input", "branch1 dilated", "branch2 1x5", "branch3 bias", "deformable base", "offset predictor", "residual"}));
}

inline std::string cfe_channels(const SelfcheckOptions&) {
  SplitMix64 rng(45);
  for (std::size_t width : {3, 6, 12, 48}) {
    const CfeParams p = make_cfe_random(2, width, rng);
    Tape t;
    const auto br = ad::cfe_forward_detailed(t.constant(Tensor::uniform({2, 4, 4}, rng)), ad::bind(t, p, false));
    const std::size_t total = t.value(br.b1).dim(0) + t.value(br.b2).dim(0) + t.value(br.b3).dim(0);
    require(t.value(br.b1).dim(0) == width / 3 && total == width && p.residual.out_channels() == width,
            "branch widths do not add up for W_f=" + std::to_string(width));
  }
  try {
    make_cfe_zero(2, 50);
  } catch (const ConfigError&) {
    return "3 x W_f/3 = W_f for 4 widths; W_f=50 rejected";
  }
  throw CheckFailure("W_f=50 accepted");
}

inline std::string cfe_receptive_field(const SelfcheckOptions&) {
  SplitMix64 rng(46);
  const int r = cfe_receptive_probe(make_cfe_random(2, 3, rng));
  require(r == 4, "probe radius " + std::to_string(r) + ", expected 4");
  return "probe radius 4 at dilation 2";
}

inline std::string fusion_boundedness(const SelfcheckOptions&) {
  SplitMix64 rng(51);
  for (int i = 0; i < 200; ++i) {
    const std::size_t n = 2 + rng.next_u64() % 2;
    std::vector<Tensor> xs;
    std::vector<double> ws;
    double bound = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      xs.push_back(Tensor::uniform({2, 3, 3}, rng, -5.0, 5.0));
      ws.push_back(rng.uniform(-1.0, 2.0));
      bound = std::max(bound, max_abs(xs.back()));
    }
    if (std::all_of(ws.begin(), ws.end(), [](double w) { return w <= 0.0; })) ws[0] = 0.5;
    require(max_abs(fuse(xs, ws, 1e-4)) <= bound, "fused magnitude exceeds inputs");
  }
  return "200 draws bounded by the largest input";
}

inline std::string fusion_clamp(const SelfcheckOptions&) {
  SplitMix64 rng(52);
  for (int i = 0; i < 50; ++i) {
    std::vector<Tensor> xs{Tensor::uniform({2, 3, 3}, rng), Tensor::uniform({2, 3, 3}, rng), Tensor::uniform({2, 3, 3}, rng)};
    const double a = rng.uniform(0.1, 2.0), c = rng.uniform(0.1, 2.0), neg = rng.uniform(-3.0, -1e-6);
    require(bit_identical(fuse(xs, {a, neg, c}, 1e-4), fuse(xs, {a, 0.0, c}, 1e-4)), "negative weight not clamped to 0");
  }
  return "50 draws: negative weight equals weight 0";
}

inline std::string fusion_epsilon_limit(const SelfcheckOptions&) {
  SplitMix64 rng(53);
  for (int i = 0; i < 20; ++i) {
    std::vector<Tensor> xs{Tensor::uniform({2, 4, 4}, rng), Tensor::uniform({2, 4, 4}, rng)};
    const std::vector<double> ws{rng.uniform(0.2, 2.0), rng.uniform(0.2, 2.0)};
    Tensor mean = add(scale(xs[0], ws[0]), scale(xs[1], ws[1]));
    mean = scale(mean, 1.0 / (ws[0] + ws[1]));
    double prev = INFINITY;
    for (double eps : {1e-1, 1e-2, 1e-4}) {
      const double gap = max_abs_diff(fuse(xs, ws, eps), mean);
      require(gap < prev, "gap does not shrink at eps=" + fmt(eps));
      require(gap <= eps * max_abs(mean) / (ws[0] + ws[1]) * (1.0 + 1e-9) + 1e-15, "gap above first-order bound");
      prev = gap;
    }
  }
  return "gap to weighted mean shrinks monotonically over eps in {1e-1,1e-2,1e-4}";
}

inline std::string ba_memoization(const SelfcheckOptions& o) {
  PipelineConfig cfg;
  cfg.fusion_width = 6;
  const auto bb = desk_backbone(61);
  const auto run = c_afbifpn_forward(bb, desk_pipeline_params(cfg, 61), o.tie_break);
  require(run.ba_invocations == 2, "BA invoked " + std::to_string(run.ba_invocations) + " times");
  cfg.attention_fusion_enabled = false;
  const auto off = c_afbifpn_forward(bb, desk_pipeline_params(cfg, 61), o.tie_break);
  require(off.ba_invocations == 0, "BA invoked with attention fusion disabled");
  return "2 invocations with attention fusion, 0 without";
}

inline std::string ablation_shapes(const SelfcheckOptions& o) {
  const auto bb = desk_backbone(62);
  std::vector<Dims> first;
  for (bool cfe : {false, true}) {
    for (bool att : {false, true}) {
      PipelineConfig cfg;
      cfg.fusion_width = 6;
      cfg.cfe_enabled = cfe;
      cfg.attention_fusion_enabled = att;
      const auto run = c_afbifpn_forward(bb, desk_pipeline_params(cfg, 62), o.tie_break);
      std::vector<Dims> dims;
      for (int l = 2; l <= 5; ++l) dims.push_back(run.levels.get(l, Stage::output).dims());
      if (first.empty()) first = dims;
      require(dims == first, "output shapes differ between ablation configurations");
    }
  }
  return "4 configurations, identical output shapes";
}

inline std::string pipeline_gradients(const SelfcheckOptions&) {
  const GradcheckReport r = run_gradcheck(PipelineConfig{}, 7);
  std::ostringstream s;
  for (const auto& g : r.groups) {
    require(g.checked > 0, "no coordinates checked for " + g.name);
    require(g.passed, g.name + " gradient error " + fmt(g.max_error));
  }
  double w = 0.0;
  for (const auto& g : r.groups) w = std::max(w, g.max_error);
  s << r.groups.size() << " groups, max error " << fmt(w) << ", " << r.resample_events() << " kink resamples";
  return s.str();
}

inline std::string fuse_homogeneity(const SelfcheckOptions& o) {
  PipelineConfig cfg;
  cfg.fusion_width = 6;
  cfg.attention_fusion_enabled = false;
  cfg.epsilon = 0.0;
  const auto bb = desk_backbone(63);
  PipelineParams p = desk_pipeline_params(cfg, 63);
  SplitMix64 rng(63);
  for (auto& w : p.fusion.raw) w = rng.uniform(0.3, 2.0);
  PipelineParams q = p;
  const double factors[] = {4.0, 0.5, 8.0, 0.25, 2.0, 16.0};
  const std::vector<std::vector<std::pair<int, int>>> nodes{
      {{4, 1}, {4, 2}}, {{3, 1}, {3, 2}}, {{2, 1}, {2, 2}}, {{3, 3}, {3, 4}, {3, 5}}, {{4, 3}, {4, 4}, {4, 5}}, {{5, 1}, {5, 2}}};
  for (std::size_t n = 0; n < nodes.size(); ++n) {
    for (auto [l, b] : nodes[n]) q.fusion.w(l, b) *= factors[n];
  }
  const auto a = c_afbifpn_forward(bb, p, o.tie_break), b = c_afbifpn_forward(bb, q, o.tie_break);
  for (int l = 2; l <= 5; ++l) {
    require(bit_identical(a.levels.get(l, Stage::output), b.levels.get(l, Stage::output)),
            "P" + std::to_string(l) + "O changed under per-node weight rescaling");
  }
  return "outputs unchanged under power-of-two rescaling at every node";
}

inline std::string equation_substitution(const SelfcheckOptions& o) {
  PipelineConfig cfg;
  cfg.fusion_width = 6;
  const auto bb = desk_backbone(64);
  PipelineParams p = desk_pipeline_params(cfg, 64);
  SplitMix64 rng(64);
  for (auto& w : p.fusion.raw) w = rng.uniform(0.2, 2.0);
  const auto run = c_afbifpn_forward(bb, p, o.tie_break);
  const auto ref = oracles::c_afbifpn_reference(bb, p);
  double w = 0.0;
  for (int l = 2; l <= 5; ++l) {
    w = std::max(w, max_abs_diff(run.levels.get(l, Stage::output), ref.output[static_cast<std::size_t>(l - 2)]));
  }
  w = std::max(w, max_abs_diff(run.levels.get(4, Stage::intermediate), ref.p4f));
  w = std::max(w, max_abs_diff(run.levels.get(3, Stage::intermediate), ref.p3f));
  require(w <= 1e-10, "max diff " + fmt(w));
  return "max diff " + fmt(w);
}

inline std::string plain_reduction(const SelfcheckOptions& o) {
  PipelineConfig cfg;
  cfg.fusion_width = 6;
  cfg.cfe_enabled = false;
  cfg.attention_fusion_enabled = false;
  const auto bb = desk_backbone(65);
  PipelineParams p = desk_pipeline_params(cfg, 65);
  SplitMix64 rng(65);
  for (auto& w : p.fusion.raw) w = rng.uniform(0.2, 2.0);
  const auto run = c_afbifpn_forward(bb, p, o.tie_break);
  const auto ref = oracles::c_afbifpn_reference(bb, p);
  double w = 0.0;
  for (int l = 2; l <= 5; ++l) {
    w = std::max(w, max_abs_diff(run.levels.get(l, Stage::output), ref.output[static_cast<std::size_t>(l - 2)]));
  }
  require(w <= 1e-12, "max diff " + fmt(w));
  return "max diff " + fmt(w);
}

inline std::string oracle_determinism(const SelfcheckOptions&) {
  SplitMix64 rng(71);
  const Tensor f = Tensor::uniform({4, 8, 8}, rng);
  const BraParams p = random_bra(4, 2, 2, 2, rng, false, 3);
  require(bit_identical(oracles::ba_reference(f, p), oracles::ba_reference(f, p)), "ba_reference not deterministic");
  const CfeParams c = make_cfe_random(4, 6, rng);
  require(bit_identical(oracles::cfe_reference(f, c), oracles::cfe_reference(f, c)), "cfe_reference not deterministic");
  return "repeated oracle runs bit-identical";
}

inline std::string tensor_roundtrip(const SelfcheckOptions&) {
  SplitMix64 rng(81);
  for (int i = 0; i < 100; ++i) {
    Dims d(1 + rng.next_u64() % 4);
    for (auto& e : d) e = 1 + rng.next_u64() % 5;
    const Tensor t = Tensor::uniform(d, rng, -1e6, 1e6);
    require(std::get<Tensor>(decode_tensor(encode_tensor(t))) == t, "float64 round trip differs");
    const Tensor32 s = t.cast<float>();
    require(std::get<Tensor32>(decode_tensor(encode_tensor(s))) == s, "float32 round trip differs");
  }
  return "100 float64 and 100 float32 tensors bit-identical";
}

inline std::string malformed_files(const SelfcheckOptions&) {
  SplitMix64 rng(82);
  const auto corpus = malformed_tensor_corpus(rng);
  for (const auto& [name, bytes] : corpus) {
    bool rejected = false;
    try {
      decode_tensor(bytes);
    } catch (const FormatError&) {
      rejected = true;
    }
    require(rejected, name + " accepted");
  }
  return std::to_string(corpus.size()) + " malformed inputs rejected with FormatError";
}

inline std::string config_rules(const SelfcheckOptions&) {
  const RunConfig d = config_parse("{}");
  require(d.pipeline.regions_s == 2 && d.pipeline.topk_k == 2 && d.pipeline.fusion_width == 48 &&
              d.pipeline.epsilon == 1e-4 && d.pipeline.heads == 1,
          "defaults not applied");
  auto rejects = [](const std::string& text, const std::string& needle) {
    try {
      config_parse(text);
    } catch (const ConfigError& e) {
      return std::string(e.what()).find(needle) != std::string::npos;
    }
    return false;
  };
  require(rejects(R"({"fusion_width": 50})", "fusion_width % 3"), "fusion_width 50 not rejected by rule");
  require(rejects(R"({"topk_k": 5, "regions_s": 2})", "topk_k <= S^2"), "topk_k 5 not rejected by rule");
  require(rejects(R"({"bogus": 1})", "unknown key"), "unknown key accepted");
  return "defaults and 3 rejections";
}

inline std::string fixture_determinism(const SelfcheckOptions&) {
  auto bytes = [](std::uint64_t seed) {
    std::vector<std::uint8_t> all;
    for (const auto& t : make_backbone_fixture(seed)) {
      const auto b = encode_tensor(t);
      all.insert(all.end(), b.begin(), b.end());
    }
    return all;
  };
  require(bytes(5) == bytes(5), "same seed gives different fixtures");
  require(bytes(5) != bytes(6), "different seeds give equal fixtures");
  return "seeded fixtures reproducible and seed-separated";
}

inline std::string pad_crop(const SelfcheckOptions&) {
  SplitMix64 rng(83);
  const Tensor f = Tensor::uniform({2, 7, 7}, rng);
  const Tensor p = pad_to_multiple(f, 2);
  require(p.dims() == Dims{2, 8, 8} && p.at(1, 7, 3) == 0.0 && p.at(0, 2, 7) == 0.0, "7x7 not padded to 8x8 with zeros");
  require(bit_identical(crop(p, 7, 7), f), "crop(pad(f)) != f");
  require(bit_identical(pad_to_multiple(p, 2), p), "divisible map changed");
  return "7x7 -> 8x8, crop restores, 8x8 unchanged";
}

}  // namespace checks

inline std::vector<Property> selfcheck_properties() {
  using namespace checks;
  return {
      {"tensor.softmax_rows_sum_to_one", softmax_rows},
      {"tensor.reshape_permute_roundtrip", reshape_permute_roundtrip},
      {"tensor.rng_stream_reproducible", rng_stream},
      {"tensor.op_gradients", op_gradients},
      {"conv.oracle_equivalence", conv_oracle},
      {"conv.dilated_receptive_field", dilated_receptive_field},
      {"conv.deformable_zero_offsets", deformable_zero_offsets},
      {"conv.gradients", conv_gradients},
      {"routing.partition_merge_roundtrip", partition_roundtrip},
      {"routing.sparse_dense_equivalence", sparse_dense},
      {"routing.topk_selection", topk_selection},
      {"routing.attention_weights_stochastic", attention_weights},
      {"routing.convex_combination_bound", convex_bound},
      {"routing.permutation_equivariance", permutation_equivariance},
      {"routing.gradients_frozen_routing", routing_gradients},
      {"routing.mac_accounting", mac_accounting},
      {"cfe.spatial_preservation", cfe_spatial},
      {"cfe.zero_branch_degeneracy", cfe_zero_branches},
      {"cfe.deformable_degeneracy", cfe_deformable_degeneracy},
      {"cfe.gradients", cfe_gradients},
      {"cfe.channel_accounting", cfe_channels},
      {"cfe.receptive_field", cfe_receptive_field},
      {"fusion.boundedness", fusion_boundedness},
      {"fusion.negative_weight_clamp", fusion_clamp},
      {"fusion.epsilon_limit", fusion_epsilon_limit},
      {"pipeline.ba_memoization", ba_memoization},
      {"pipeline.ablation_shapes", ablation_shapes},
      {"pipeline.gradients", pipeline_gradients},
      {"pipeline.fuse_homogeneity", fuse_homogeneity},
      {"pipeline.equation_substitution", equation_substitution},
      {"pipeline.plain_reduction", plain_reduction},
      {"oracles.deterministic", oracle_determinism},
      {"io.tensor_roundtrip", tensor_roundtrip},
      {"io.malformed_files", malformed_files},
      {"io.config_rules", config_rules},
      {"io.fixture_determinism", fixture_determinism},
      {"io.pad_crop_roundtrip", pad_crop},
  };
}

inline PropertyResult run_property(const Property& p, const SelfcheckOptions& opt) {
  PropertyResult r{p.name, false, "", 0.0};
  const auto start = std::chrono::steady_clock::now();
  try {
    r.detail = p.run(opt);
    r.passed = true;
  } catch (const std::exception& e) {
    r.detail = e.what();
  }
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return r;
}

/// Runs every property, printing one line each. Returns true iff all pass.
inline bool run_selfcheck(std::ostream& out, const SelfcheckOptions& opt = {}) {
  bool ok = true;
  for (const auto& p : selfcheck_properties()) {
    const PropertyResult r = run_property(p, opt);
    ok = ok && r.passed;
    out << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << "\n";
  }
  return ok;
}

}  // namespace cafbifpn
