// Acceptance suite. One line per criterion; exit status is nonzero if any fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <string>

#include "cafbifpn/gradcheck.hpp"
#include "cafbifpn/io.hpp"
#include "cafbifpn/oracles.hpp"
#include "cafbifpn/selfcheck.hpp"

using namespace cafbifpn;

namespace {

struct Outcome {
  bool ok = false;
  std::string detail;
};

struct Criterion {
  int id;
  std::string name;
  double time_limit;  // seconds, 0 means none
  std::function<Outcome()> run;
};

double worst_level_diff(const PipelineRun& run, const oracles::PyramidReference& ref, bool intermediates) {
  double w = 0.0;
  for (int l = 2; l <= 5; ++l) {
    w = std::max(w, max_abs_diff(run.levels.get(l, Stage::output), ref.output[static_cast<std::size_t>(l - 2)]));
  }
  if (intermediates) {
    w = std::max(w, max_abs_diff(run.levels.get(4, Stage::intermediate), ref.p4f));
    w = std::max(w, max_abs_diff(run.levels.get(3, Stage::intermediate), ref.p3f));
  }
  return w;
}

std::array<std::size_t, 4> channels_of(const std::array<Tensor, 4>& bb) {
  return {bb[0].dim(0), bb[1].dim(0), bb[2].dim(0), bb[3].dim(0)};
}

Outcome sparse_dense() {
  SplitMix64 rng(101);
  double w = 0.0;
  for (int i = 0; i < 20; ++i) {
    const AttentionCase c = draw_full_routing_case(rng);
    w = std::max(w, max_abs_diff(ba_forward(c.input, c.params), oracles::dense_attention_reference(c.input, c.params)));
  }
  return {w <= 1e-10, "20 cases, max diff " + fmt(w)};
}

Outcome deformable_degeneracy() {
  SplitMix64 rng(102);
  double w = 0.0;
  for (int i = 0; i < 20; ++i) {
    const std::size_t cin = 1 + rng.next_u64() % 8, cout = 1 + rng.next_u64() % 8;
    const std::size_t H = 3 + rng.next_u64() % 14, W = 3 + rng.next_u64() % 14;
    DeformableParams p = make_deformable(cout, cin, 3);
    p.base = random_conv(cout, cin, 3, 3, rng);
    const Tensor x = Tensor::uniform({cin, H, W}, rng);
    w = std::max(w, max_abs_diff(deformable_conv2d(x, p), conv2d(x, p.base)));
  }
  return {w <= 1e-12, "20 cases, max diff " + fmt(w)};
}

Outcome conv_oracle() {
  SplitMix64 rng(103);
  double w = 0.0;
  int dilated = 0, asymmetric = 0;
  for (int i = 0; i < 100; ++i) {
    const ConvCase c = draw_conv_case(rng);
    dilated += c.params.dilation == 2;
    asymmetric += c.params.weights.dim(2) != c.params.weights.dim(3);
    w = std::max(w, max_abs_diff(conv2d(c.input, c.params), oracles::conv2d_reference(c.input, c.params)));
  }
  const bool covered = dilated > 0 && asymmetric > 0;
  return {w <= 1e-12 && covered, "100 draws (" + std::to_string(dilated) + " dilated, " + std::to_string(asymmetric) +
                                     " asymmetric), max diff " + fmt(w)};
}

Outcome gradients() {
  const GradcheckReport r = run_gradcheck(PipelineConfig{}, 7);
  std::string detail;
  double w = 0.0;
  for (const auto& g : r.groups) {
    w = std::max(w, g.max_error);
    detail += g.name + "=" + fmt(g.max_error) + "(" + std::to_string(g.checked) + ") ";
  }
  const auto fusion = std::find_if(r.groups.begin(), r.groups.end(), [](const auto& g) { return g.name == "fusion_weights"; });
  const bool all_fusion = fusion != r.groups.end() && fusion->checked + fusion->resampled == FusionWeights::count;
  return {r.passed() && w <= 1e-5 && all_fusion,
          detail + "resamples=" + std::to_string(r.resample_events()) + " seed=" + std::to_string(r.seed_used)};
}

Outcome plain_reduction() {
  PipelineConfig cfg;
  cfg.fusion_width = 6;
  cfg.cfe_enabled = false;
  cfg.attention_fusion_enabled = false;
  const auto bb = desk_backbone(105);
  PipelineParams p = desk_pipeline_params(cfg, 105);
  SplitMix64 rng(105);
  for (auto& w : p.fusion.raw) w = rng.uniform(0.2, 2.0);
  const PipelineRun run = c_afbifpn_forward(bb, p);
  const double w = worst_level_diff(run, oracles::c_afbifpn_reference(bb, p), false);
  return {w <= 1e-12 && run.ba_invocations == 0, "max diff " + fmt(w)};
}

Outcome equation_substitution() {
  PipelineConfig cfg;  // fusion width 48
  const auto bb = make_backbone_fixture(106);
  PipelineParams p = make_pipeline_params(channels_of(bb), cfg, 106);
  SplitMix64 rng(106);
  for (auto& w : p.fusion.raw) w = rng.uniform(0.2, 2.0);
  const PipelineRun run = c_afbifpn_forward(bb, p);
  const double w = worst_level_diff(run, oracles::c_afbifpn_reference(bb, p), true);
  return {w <= 1e-10, "standard fixture, width 48, max diff " + fmt(w)};
}

Outcome wiring() {
  PipelineConfig cfg;
  const auto bb = make_backbone_fixture(107);
  const PipelineParams p = make_pipeline_params(channels_of(bb), cfg, 107);
  const PipelineRun a = c_afbifpn_forward(bb, p), b = c_afbifpn_forward(bb, p);
  bool dims = true, identical = true;
  for (int l = 2; l <= 5; ++l) {
    const Tensor& o = a.levels.get(l, Stage::output);
    const std::size_t side = bb[0].dim(1) >> (l - 2);
    dims = dims && o.dims() == Dims{cfg.fusion_width, side, side};
    identical = identical && encode_tensor(o) == encode_tensor(b.levels.get(l, Stage::output));
  }
  return {a.ba_invocations == 2 && dims && identical, "ba_invocations=" + std::to_string(a.ba_invocations) +
                                                          " dims=" + (dims ? "ok" : "wrong") +
                                                          " repeat=" + (identical ? "byte-identical" : "differs")};
}

Outcome sparsity_accounting() {
  SplitMix64 rng(108);
  int cells = 0;
  for (std::size_t S : {1, 2, 4, 8}) {
    for (std::size_t k = 1; k <= S * S; ++k) {
      const std::size_t C = 4, H = 16;
      const auto dense = oracles::attention_flops(H, H, C, S, k, 1, oracles::AttentionMode::dense);
      const auto routed = oracles::attention_flops(H, H, C, S, k, 1, oracles::AttentionMode::routed, 3);
      // exact rational comparison: routed * S^2 == dense * k
      if (routed.qk_logits * S * S != dense.qk_logits * k || routed.av_aggregation * S * S != dense.av_aggregation * k)
        return {false, "ratio differs at S=" + std::to_string(S) + " k=" + std::to_string(k)};
      MacCounts runtime;
      ad::BaOptions opt;
      opt.macs = &runtime;
      ba_forward(Tensor::uniform({C, H, H}, rng), random_bra(C, S, k, 1, rng, false, 3), opt);
      if (!(runtime == routed))
        return {false, "runtime counters differ at S=" + std::to_string(S) + " k=" + std::to_string(k)};
      ++cells;
    }
  }
  return {true, std::to_string(cells) + " (S,k) cells exact"};
}

Outcome fusion_properties() {
  const SelfcheckOptions o;
  std::string detail;
  for (auto* fn : {&checks::fusion_boundedness, &checks::fusion_clamp, &checks::fusion_epsilon_limit}) {
    try {
      detail += fn(o) + "; ";
    } catch (const CheckFailure& e) {
      return {false, e.what()};
    }
  }
  return {true, detail};
}

Outcome serialization() {
  SplitMix64 rng(110);
  for (int i = 0; i < 1000; ++i) {
    Dims d(1 + rng.next_u64() % 4);
    for (auto& e : d) e = 1 + rng.next_u64() % 6;
    const Tensor t = Tensor::uniform(d, rng, -1e6, 1e6);
    if (i % 2 == 0) {
      if (!bit_identical(std::get<Tensor>(decode_tensor(encode_tensor(t))), t)) return {false, "float64 round trip differs"};
    } else {
      const Tensor32 s = t.cast<float>();
      if (encode_tensor(std::get<Tensor32>(decode_tensor(encode_tensor(s)))) != encode_tensor(s))
        return {false, "float32 round trip differs"};
    }
  }
  const auto corpus = malformed_tensor_corpus(rng);
  for (const auto& [name, bytes] : corpus) {
    try {
      decode_tensor(bytes);
      return {false, name + " accepted"};
    } catch (const FormatError&) {
    }
  }
  return {true, "1000 round trips, " + std::to_string(corpus.size()) + " malformed inputs rejected"};
}

}  // namespace

int main() {
  const std::vector<Criterion> criteria{
      {1, "sparse_dense_equivalence", 10, sparse_dense},
      {2, "deformable_degeneracy", 5, deformable_degeneracy},
      {3, "conv_oracle_equivalence", 30, conv_oracle},
      {4, "gradient_checks", 60, gradients},
      {5, "pipeline_reduction", 5, plain_reduction},
      {6, "equation_substitution", 30, equation_substitution},
      {7, "wiring_contracts", 0, wiring},
      {8, "sparsity_accounting", 0, sparsity_accounting},
      {9, "fusion_properties", 5, fusion_properties},
      {10, "serialization", 10, serialization},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (c.time_limit > 0 && secs >= c.time_limit) {
      o.ok = false;
      o.detail += " (over " + fmt(c.time_limit) + " s)";
    }
    failed += !o.ok;
    std::printf("%s AC%d %s [%.2fs] %s\n", o.ok ? "PASS" : "FAIL", c.id, c.name.c_str(), secs, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
