#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "cafbifpn/cli.hpp"
#include "cafbifpn/io.hpp"
#include "cafbifpn/selfcheck.hpp"

using namespace cafbifpn;
namespace fs = std::filesystem;

namespace {

class TempDir {
 public:
  TempDir() {
    static int counter = 0;
    path_ = fs::temp_directory_path() / ("cafbifpn_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& text) { std::ofstream(p) << text; }

int run_cli(const std::string& args) {
  const std::string cmd = std::string(CAFBIFPN_CLI) + " " + args + " > /dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

}  // namespace

TEST(TensorFile, Float64RoundTripIsBitIdentical) {
  TempDir dir;
  SplitMix64 rng(1);
  const Tensor t = Tensor::uniform({3, 4, 5}, rng);
  tensor_write(dir.path() / "t.tnsr", t);
  const AnyTensor back = tensor_read(dir.path() / "t.tnsr");
  ASSERT_TRUE(std::holds_alternative<Tensor>(back));
  EXPECT_TRUE(bit_identical(std::get<Tensor>(back), t));
}

TEST(TensorFile, Float32RoundTripAndWidening) {
  TempDir dir;
  SplitMix64 rng(2);
  const Tensor32 t = Tensor::uniform({7}, rng).cast<float>();
  tensor_write(dir.path() / "f.tnsr", t);
  EXPECT_EQ(std::get<Tensor32>(tensor_read(dir.path() / "f.tnsr")), t);
  EXPECT_EQ(tensor_read_f64(dir.path() / "f.tnsr"), t.cast<double>());
}

TEST(TensorFile, SpecialValuesSurviveEncoding) {
  const Tensor t({5}, std::vector<double>{-0.0, INFINITY, -INFINITY, 5e-324, NAN});
  const Tensor back = std::get<Tensor>(decode_tensor(encode_tensor(t)));
  EXPECT_TRUE(bit_identical(back, t));
}

TEST(TensorFile, HeaderLayout) {
  const auto bytes = encode_tensor(Tensor({2, 3}));
  ASSERT_EQ(bytes.size(), 8u + 16u + 48u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "TNSR");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 2);
  EXPECT_EQ(bytes[6], 2);
  EXPECT_EQ(bytes[8], 2);
  EXPECT_EQ(bytes[16], 3);
}

TEST(TensorFile, UnknownDtypeIsNamed) {
  auto bytes = encode_tensor(Tensor({2}));
  bytes[5] = 7;
  try {
    decode_tensor(bytes);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("unknown dtype"), std::string::npos);
  }
}

TEST(TensorFile, TruncationNamesExpectedAndActualBytes) {
  auto bytes = encode_tensor(Tensor({2, 2}));
  bytes.resize(bytes.size() - 3);
  try {
    decode_tensor(bytes);
    FAIL();
  } catch (const FormatError& e) {
    const std::string what = e.what();
    EXPECT_NE(what.find("expected 32"), std::string::npos) << what;
    EXPECT_NE(what.find("got 29"), std::string::npos) << what;
  }
}

TEST(TensorFile, EveryMalformedCorpusEntryIsRejected) {
  SplitMix64 rng(3);
  for (const auto& [name, bytes] : malformed_tensor_corpus(rng)) {
    EXPECT_THROW(decode_tensor(bytes), FormatError) << name;
  }
}

TEST(TensorFile, ManyRandomRoundTrips) {
  SplitMix64 rng(4);
  for (int i = 0; i < 200; ++i) {
    Dims d(1 + rng.next_u64() % 4);
    for (auto& e : d) e = 1 + rng.next_u64() % 5;
    const Tensor t = Tensor::uniform(d, rng, -1e6, 1e6);
    ASSERT_TRUE(bit_identical(std::get<Tensor>(decode_tensor(encode_tensor(t))), t));
  }
}

TEST(Config, EmptyObjectGivesDefaults) {
  const RunConfig c = config_parse("{}");
  EXPECT_EQ(c.pipeline.regions_s, 2u);
  EXPECT_EQ(c.pipeline.topk_k, 2u);
  EXPECT_EQ(c.pipeline.heads, 1u);
  EXPECT_EQ(c.pipeline.fusion_width, 48u);
  EXPECT_EQ(c.pipeline.epsilon, 1e-4);
  EXPECT_EQ(c.pipeline.dilation, 2u);
  EXPECT_EQ(c.pipeline.lce_kernel, 5u);
  EXPECT_TRUE(c.pipeline.cfe_enabled);
  EXPECT_TRUE(c.pipeline.attention_fusion_enabled);
  EXPECT_EQ(c.seed, 0u);
}

TEST(Config, InvariantViolationsNameTheRule) {
  auto message = [](const std::string& text) {
    try {
      config_parse(text);
    } catch (const ConfigError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  EXPECT_NE(message(R"({"fusion_width": 50})").find("fusion_width % 3"), std::string::npos);
  EXPECT_NE(message(R"({"topk_k": 5, "regions_s": 2})").find("topk_k <= S^2"), std::string::npos);
  EXPECT_NE(message(R"({"heads": 5})").find("heads"), std::string::npos);
  EXPECT_NE(message(R"({"bogus": 1})").find("unknown key"), std::string::npos);
  EXPECT_NE(message(R"({"topdown_source": "output"})").find("topdown_source"), std::string::npos);
  EXPECT_FALSE(message("[1,2]").empty());
  EXPECT_FALSE(message("{not json").empty());
  EXPECT_FALSE(message(R"({"regions_s": -1})").empty());
}

TEST(Config, ValuesAreReadBack) {
  const RunConfig c = config_parse(
      R"({"regions_s": 4, "topk_k": 3, "heads": 2, "fusion_width": 12, "epsilon": 0.001, "activation": "none",
          "cfe_enabled": false, "seed": 9})");
  EXPECT_EQ(c.pipeline.regions_s, 4u);
  EXPECT_EQ(c.pipeline.topk_k, 3u);
  EXPECT_EQ(c.pipeline.activation, Activation::none);
  EXPECT_FALSE(c.pipeline.cfe_enabled);
  EXPECT_EQ(c.seed, 9u);
  EXPECT_EQ(config_parse(to_json(c).dump()).pipeline.fusion_width, 12u);
}

TEST(Padding, PadToMultipleAndCrop) {
  SplitMix64 rng(5);
  const Tensor f = Tensor::uniform({2, 7, 7}, rng);
  const Tensor p = pad_to_multiple(f, 2);
  ASSERT_EQ(p.dims(), (Dims{2, 8, 8}));
  for (std::size_t c = 0; c < 2; ++c)
    for (std::size_t i = 0; i < 8; ++i) {
      EXPECT_EQ(p.at(c, 7, i), 0.0);
      EXPECT_EQ(p.at(c, i, 7), 0.0);
    }
  EXPECT_EQ(crop(p, 7, 7), f);
  const Tensor g = Tensor::uniform({1, 8, 8}, rng);
  EXPECT_EQ(pad_to_multiple(g, 2), g);
  EXPECT_EQ(pad_to_multiple(Tensor({1, 5, 9}), 4).dims(), (Dims{1, 8, 12}));
}

TEST(Fixture, SameSeedGivesByteIdenticalFiles) {
  TempDir a, b, c;
  write_backbone_fixture(11, a.path());
  write_backbone_fixture(11, b.path());
  write_backbone_fixture(12, c.path());
  for (const char* name : {"C2.tnsr", "C3.tnsr", "C4.tnsr", "C5.tnsr", "manifest.json"}) {
    EXPECT_EQ(slurp(a.path() / name), slurp(b.path() / name)) << name;
  }
  for (const char* name : {"C2.tnsr", "C5.tnsr"}) EXPECT_NE(slurp(a.path() / name), slurp(c.path() / name)) << name;
  const auto maps = read_backbone(a.path());
  for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(maps[l].dims(), standard_backbone_dims()[l]);
  const auto manifest = nlohmann::json::parse(slurp(a.path() / "manifest.json"));
  EXPECT_EQ(manifest["seed"], 11);
  EXPECT_EQ(manifest["tensors"].size(), 4u);
}

TEST(Forward, ReportCountsAttentionAndDims) {
  const auto backbone = make_backbone_fixture(13);
  PipelineRun run;
  const auto report = cli::forward_report(config_parse("{}"), backbone, run);
  EXPECT_EQ(report["ba_invocations"], 2);
  const std::vector<Dims> want{{48, 64, 64}, {48, 32, 32}, {48, 16, 16}, {48, 8, 8}};
  for (std::size_t l = 0; l < 4; ++l) EXPECT_EQ(report["levels"][l]["dims"].get<Dims>(), want[l]);

  PipelineRun off;
  EXPECT_EQ(cli::forward_report(config_parse(R"({"attention_fusion_enabled": false})"), backbone, off)["ba_invocations"], 0);
}

TEST(Forward, CommandWritesIdenticalOutputsTwice) {
  TempDir in, out1, out2;
  write_backbone_fixture(14, in.path());
  write_text(in.path() / "cfg.json", R"({"seed": 3})");
  std::ostringstream sink;
  ASSERT_EQ(cli::forward(in.path() / "cfg.json", in.path(), out1.path(), sink), cli::ok);
  ASSERT_EQ(cli::forward(in.path() / "cfg.json", in.path(), out2.path(), sink), cli::ok);
  for (const char* name : {"P2O.tnsr", "P3O.tnsr", "P4O.tnsr", "P5O.tnsr", "report.json"}) {
    ASSERT_TRUE(fs::exists(out1.path() / name)) << name;
    EXPECT_EQ(slurp(out1.path() / name), slurp(out2.path() / name)) << name;
  }
  EXPECT_EQ(tensor_read_f64(out1.path() / "P3O.tnsr").dims(), (Dims{48, 32, 32}));
}

TEST(Guarded, MapsErrorsToExitCodes) {
  std::ostringstream err;
  EXPECT_EQ(cli::guarded([] { return 0; }, err), 0);
  EXPECT_EQ(cli::guarded([]() -> int { throw ConfigError("x"); }, err), 2);
  EXPECT_EQ(cli::guarded([]() -> int { throw FormatError("y", 3); }, err), 1);
  EXPECT_NE(err.str().find("config error"), std::string::npos);
}

TEST(Binary, ExitCodes) {
  TempDir dir;
  const std::string d = dir.path().string();
  write_text(dir.path() / "good.json", "{}");
  write_text(dir.path() / "bad.json", R"({"fusion_width": 50})");
  EXPECT_EQ(run_cli("gen-fixture --seed 1 --out " + d + "/fx"), 0);
  EXPECT_TRUE(fs::exists(dir.path() / "fx" / "C4.tnsr"));
  EXPECT_EQ(run_cli("selfcheck"), 0);
  EXPECT_EQ(run_cli("selfcheck --inject-fault topk-tiebreak"), 1);
  EXPECT_EQ(run_cli("selfcheck --inject-fault nonsense"), 2);
  EXPECT_EQ(run_cli(""), 2);
  EXPECT_EQ(run_cli("frobnicate"), 2);
  EXPECT_EQ(run_cli("gradcheck --config " + d + "/bad.json --seed 1"), 2);
  EXPECT_EQ(run_cli("gradcheck --config " + d + "/good.json --seed 7"), 0);
  EXPECT_EQ(run_cli("bench --config " + d + "/good.json --sizes 8,16 --reps 1"), 0);
  // a corrupt input map is a runtime failure, not a usage error
  fs::resize_file(dir.path() / "fx" / "C3.tnsr", 20);
  EXPECT_EQ(run_cli("forward --config " + d + "/good.json --input " + d + "/fx --output " + d + "/out"), 1);
}
