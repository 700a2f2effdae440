#pragma once

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "cafbifpn/afbifpn.hpp"
#include "cafbifpn/rng.hpp"
#include "cafbifpn/tensor.hpp"

namespace cafbifpn {

// --- tensor files ------------------------------------------------------------------
//
// Layout, all integers little-endian:
//   0  "TNSR"
//   4  u8 version (1)
//   5  u8 dtype (1 = float32, 2 = float64)
//   6  u8 rank (>= 1)
//   7  u8 reserved (0)
//   8  rank x u64 extents
//   .. product(extents) scalars, row-major

using AnyTensor = std::variant<Tensor32, Tensor>;

inline constexpr std::array<char, 4> kTensorMagic{'T', 'N', 'S', 'R'};
inline constexpr std::uint8_t kTensorVersion = 1;

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

template <typename T>
using bits_of = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace detail

template <typename T>
std::vector<std::uint8_t> encode_tensor(const BasicTensor<T>& t) {
  std::vector<std::uint8_t> out(kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(kTensorVersion);
  out.push_back(static_cast<std::uint8_t>(dtype_of<T>));
  if (t.rank() > 255) throw ShapeError("tensor rank exceeds file format limit of 255");
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  out.push_back(0);
  for (std::size_t d : t.dims()) detail::put_u64(out, d);
  out.reserve(out.size() + t.size() * sizeof(T));
  for (T v : t.data()) {
    const auto bits = std::bit_cast<detail::bits_of<T>>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
  }
  return out;
}

inline AnyTensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw FormatError("truncated header: expected 8 bytes, got " + std::to_string(bytes.size()), bytes.size());
  if (!std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin())) throw FormatError("bad magic", 0);
  if (bytes[4] != kTensorVersion) throw FormatError("unsupported version " + std::to_string(bytes[4]), 4);
  const std::uint8_t dtype = bytes[5];
  if (dtype != 1 && dtype != 2) throw FormatError("unknown dtype " + std::to_string(dtype), 5);
  const std::size_t rank = bytes[6];
  if (rank == 0) throw FormatError("rank must be at least 1", 6);
  if (bytes[7] != 0) throw FormatError("reserved byte must be 0", 7);
  const std::size_t dims_end = 8 + 8 * rank;
  if (bytes.size() < dims_end) {
    throw FormatError("truncated dims: expected " + std::to_string(dims_end) + " header bytes, got " +
                      std::to_string(bytes.size()), bytes.size());
  }
  Dims dims(rank);
  std::uint64_t count = 1;
  for (std::size_t i = 0; i < rank; ++i) {
    const std::uint64_t d = detail::get_u64(&bytes[8 + 8 * i]);
    if (d == 0) throw FormatError("extent " + std::to_string(i) + " is zero", 8 + 8 * i);
    if (count > std::numeric_limits<std::uint64_t>::max() / d) throw FormatError("element count overflows", 8 + 8 * i);
    count *= d;
    dims[i] = static_cast<std::size_t>(d);
  }
  const std::size_t width = dtype == 1 ? 4 : 8;
  const std::size_t have = bytes.size() - dims_end;
  if (count > std::numeric_limits<std::uint64_t>::max() / width || have != count * width) {
    throw FormatError("payload length mismatch: expected " + std::to_string(count * width) + " bytes, got " +
                      std::to_string(have), dims_end);
  }
  auto read = [&]<typename T>(BasicTensor<T> t) -> AnyTensor {
    const std::uint8_t* p = &bytes[dims_end];
    for (std::size_t i = 0; i < t.size(); ++i) {
      detail::bits_of<T> bits = 0;
      for (std::size_t b = 0; b < sizeof(T); ++b) bits |= static_cast<detail::bits_of<T>>(p[i * sizeof(T) + b]) << (8 * b);
      t[i] = std::bit_cast<T>(bits);
    }
    return t;
  };
  if (dtype == 1) return read(Tensor32(dims));
  return read(Tensor(dims));
}

template <typename T>
void tensor_write(const std::filesystem::path& path, const BasicTensor<T>& t) {
  const auto bytes = encode_tensor(t);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw Error("cannot open " + path.string() + " for writing");
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw Error("write failed for " + path.string());
}

inline AnyTensor tensor_read(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw Error("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes);
}

/// Reads either dtype and widens to float64.
inline Tensor tensor_read_f64(const std::filesystem::path& path) {
  AnyTensor t = tensor_read(path);
  if (auto* f = std::get_if<Tensor32>(&t)) return f->cast<double>();
  return std::get<Tensor>(std::move(t));
}

// --- configuration ------------------------------------------------------------------

struct RunConfig {
  PipelineConfig pipeline;
  std::uint64_t seed = 0;
};

inline RunConfig config_parse(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a flat JSON object");

  RunConfig cfg;
  PipelineConfig& p = cfg.pipeline;
  auto as_size = [](const std::string& key, const nlohmann::json& v) -> std::size_t {
    if (!v.is_number_unsigned()) throw ConfigError(key + " must be a non-negative integer");
    return v.get<std::size_t>();
  };
  auto as_bool = [](const std::string& key, const nlohmann::json& v) {
    if (!v.is_boolean()) throw ConfigError(key + " must be true or false");
    return v.get<bool>();
  };
  for (const auto& [key, v] : doc.items()) {
    if (key == "regions_s") p.regions_s = as_size(key, v);
    else if (key == "topk_k") p.topk_k = as_size(key, v);
    else if (key == "heads") p.heads = as_size(key, v);
    else if (key == "fusion_width") p.fusion_width = as_size(key, v);
    else if (key == "dilation") p.dilation = as_size(key, v);
    else if (key == "lce_kernel") p.lce_kernel = as_size(key, v);
    else if (key == "seed") cfg.seed = as_size(key, v);
    else if (key == "epsilon") {
      if (!v.is_number()) throw ConfigError("epsilon must be a number");
      p.epsilon = v.get<double>();
    } else if (key == "activation") {
      const std::string s = v.is_string() ? v.get<std::string>() : "";
      if (s == "relu") p.activation = Activation::relu;
      else if (s == "none") p.activation = Activation::none;
      else throw ConfigError("activation must be \"none\" or \"relu\"");
    } else if (key == "cfe_enabled") p.cfe_enabled = as_bool(key, v);
    else if (key == "attention_fusion_enabled") p.attention_fusion_enabled = as_bool(key, v);
    else if (key == "topdown_source") {
      const std::string s = v.is_string() ? v.get<std::string>() : "";
      if (s == "input") p.topdown_source = TopdownSource::input;
      else if (s == "output") p.topdown_source = TopdownSource::output;
      else throw ConfigError("topdown_source must be \"input\" or \"output\"");
    } else {
      throw ConfigError("unknown key \"" + key + "\"");
    }
  }
  p.validate();
  return cfg;
}

inline RunConfig config_load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  return config_parse(std::string((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>()));
}

inline nlohmann::json to_json(const RunConfig& c) {
  const PipelineConfig& p = c.pipeline;
  return {{"regions_s", p.regions_s},
          {"topk_k", p.topk_k},
          {"heads", p.heads},
          {"fusion_width", p.fusion_width},
          {"epsilon", p.epsilon},
          {"dilation", p.dilation},
          {"lce_kernel", p.lce_kernel},
          {"activation", p.activation == Activation::relu ? "relu" : "none"},
          {"cfe_enabled", p.cfe_enabled},
          {"attention_fusion_enabled", p.attention_fusion_enabled},
          {"topdown_source", p.topdown_source == TopdownSource::input ? "input" : "output"},
          {"seed", c.seed}};
}

// --- padding ------------------------------------------------------------------------

/// Zero-pads bottom and right so S divides H and W.
inline Tensor pad_to_multiple(const Tensor& f, std::size_t S) {
  if (f.rank() != 3) throw ShapeError("pad_to_multiple: expected [C,H,W]");
  if (S == 0) throw ConfigError("pad_to_multiple: S must be positive");
  const std::size_t C = f.dim(0), H = f.dim(1), W = f.dim(2);
  const std::size_t Hp = (H + S - 1) / S * S, Wp = (W + S - 1) / S * S;
  if (Hp == H && Wp == W) return f;
  Tensor out({C, Hp, Wp});
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out.at(c, y, x) = f.at(c, y, x);
  return out;
}

/// Top-left H x W window.
inline Tensor crop(const Tensor& f, std::size_t H, std::size_t W) {
  if (f.rank() != 3 || H > f.dim(1) || W > f.dim(2)) throw ShapeError("crop: window exceeds map");
  Tensor out({f.dim(0), H, W});
  for (std::size_t c = 0; c < f.dim(0); ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) out.at(c, y, x) = f.at(c, y, x);
  return out;
}

// --- fixtures -------------------------------------------------------------------------

inline constexpr std::array<const char*, 4> kBackboneNames{"C2", "C3", "C4", "C5"};

inline const std::array<Dims, 4>& standard_backbone_dims() {
  static const std::array<Dims, 4> dims{Dims{16, 64, 64}, Dims{32, 32, 32}, Dims{64, 16, 16}, Dims{128, 8, 8}};
  return dims;
}

/// Synthetic C2..C5 drawn in order from one SplitMix64 stream as 2u - 1.
inline std::array<Tensor, 4> make_backbone_fixture(std::uint64_t seed,
                                                   const std::array<Dims, 4>& dims = standard_backbone_dims()) {
  SplitMix64 rng(seed);
  std::array<Tensor, 4> out;
  for (std::size_t l = 0; l < 4; ++l) {
    out[l] = Tensor(dims[l]);
    for (auto& v : out[l].data()) v = 2.0 * rng.next_double() - 1.0;
  }
  return out;
}

inline void write_backbone_fixture(std::uint64_t seed, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto maps = make_backbone_fixture(seed);
  nlohmann::json manifest;
  manifest["seed"] = seed;
  manifest["dtype"] = "float64";
  manifest["tensors"] = nlohmann::json::array();
  for (std::size_t l = 0; l < 4; ++l) {
    const std::string file = std::string(kBackboneNames[l]) + ".tnsr";
    tensor_write(dir / file, maps[l]);
    manifest["tensors"].push_back({{"name", kBackboneNames[l]}, {"file", file}, {"dims", maps[l].dims()}});
  }
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  os << manifest.dump(2) << '\n';
  if (!os) throw Error("cannot write manifest in " + dir.string());
}

/// Loads C2..C5, following manifest.json when present.
inline std::array<Tensor, 4> read_backbone(const std::filesystem::path& dir) {
  std::array<std::string, 4> files;
  for (std::size_t l = 0; l < 4; ++l) files[l] = std::string(kBackboneNames[l]) + ".tnsr";
  if (std::filesystem::exists(dir / "manifest.json")) {
    std::ifstream is(dir / "manifest.json");
    nlohmann::json m;
    try {
      m = nlohmann::json::parse(is);
      const auto& list = m.at("tensors");
      if (list.size() != 4) throw ConfigError("manifest must list 4 tensors");
      for (std::size_t l = 0; l < 4; ++l) files[l] = list.at(l).at("file").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(std::string("malformed manifest: ") + e.what());
    }
  }
  std::array<Tensor, 4> out;
  for (std::size_t l = 0; l < 4; ++l) out[l] = tensor_read_f64(dir / files[l]);
  return out;
}

}  // namespace cafbifpn
