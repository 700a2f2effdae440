#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "cafbifpn/errors.hpp"
#include "cafbifpn/rng.hpp"

namespace cafbifpn {

using Dims = std::vector<std::size_t>;

enum class DType : std::uint8_t { float32 = 1, float64 = 2 };

template <typename T>
inline constexpr DType dtype_of = std::is_same_v<T, float> ? DType::float32 : DType::float64;

inline std::string to_string(const Dims& dims) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < dims.size(); ++i) os << (i ? "," : "") << dims[i];
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Dims& dims) {
  return std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
}

/// Dense row-major array. Values are immutable in the sense that every
/// operation returns a fresh tensor; mutation is only offered for building.
template <typename T>
class BasicTensor {
  static_assert(std::is_floating_point_v<T>);

 public:
  using value_type = T;

  BasicTensor() : dims_{1}, data_(1, T{0}) {}

  explicit BasicTensor(Dims dims, T fill = T{0}) : dims_(std::move(dims)) {
    validate_dims(dims_);
    data_.assign(element_count(dims_), fill);
  }

  BasicTensor(Dims dims, std::vector<T> data) : dims_(std::move(dims)), data_(std::move(data)) {
    validate_dims(dims_);
    if (data_.size() != element_count(dims_)) {
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match dims " +
                       to_string(dims_));
    }
  }

  static BasicTensor zeros(Dims dims) { return BasicTensor(std::move(dims)); }
  static BasicTensor full(Dims dims, T v) { return BasicTensor(std::move(dims), v); }
  static BasicTensor scalar(T v) { return BasicTensor(Dims{1}, v); }

  /// 0, 1, 2, ... in row-major order.
  static BasicTensor iota(Dims dims) {
    BasicTensor t(std::move(dims));
    for (std::size_t i = 0; i < t.size(); ++i) t.data_[i] = static_cast<T>(i);
    return t;
  }

  /// Uniform values in [lo, hi) drawn from the generator in row-major order.
  static BasicTensor uniform(Dims dims, SplitMix64& rng, double lo = -1.0, double hi = 1.0) {
    BasicTensor t(std::move(dims));
    for (auto& v : t.data_) v = static_cast<T>(rng.uniform(lo, hi));
    return t;
  }

  const Dims& dims() const noexcept { return dims_; }
  std::size_t rank() const noexcept { return dims_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= dims_.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + to_string(dims_));
    return dims_[axis];
  }
  static constexpr DType dtype() noexcept { return dtype_of<T>; }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  template <typename... Idx>
  T at(Idx... idx) const {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }
  template <typename... Idx>
  T& at(Idx... idx) {
    return data_[offset({static_cast<std::size_t>(idx)...})];
  }

  std::size_t offset(std::initializer_list<std::size_t> idx) const {
    if (idx.size() != dims_.size()) throw ShapeError("index rank mismatch for " + to_string(dims_));
    std::size_t off = 0;
    std::size_t axis = 0;
    for (std::size_t i : idx) {
      if (i >= dims_[axis]) throw IndexError("index " + std::to_string(i) + " out of range on axis " + std::to_string(axis));
      off = off * dims_[axis] + i;
      ++axis;
    }
    return off;
  }

  template <typename U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(dims_, std::move(out));
  }

  bool operator==(const BasicTensor& other) const = default;

 private:
  static void validate_dims(const Dims& dims) {
    if (dims.empty()) throw ShapeError("tensor dims must be non-empty");
    for (std::size_t d : dims) {
      if (d == 0) throw ShapeError("tensor extents must be positive, got " + to_string(dims));
    }
  }

  Dims dims_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<double>;
using Tensor32 = BasicTensor<float>;

/// Bitwise equality, stricter than operator== for NaN and signed zero.
template <typename T>
bool bit_identical(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dims() != b.dims()) return false;
  return std::equal(a.data().begin(), a.data().end(), b.data().begin(), [](T x, T y) {
    return std::bit_cast<std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>(x) ==
           std::bit_cast<std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>(y);
  });
}

template <typename T>
double max_abs_diff(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("max_abs_diff: dims " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
double max_abs(const BasicTensor<T>& a) {
  double m = 0.0;
  for (T v : a.data()) m = std::max(m, std::abs(double(v)));
  return m;
}

// --- elementwise -----------------------------------------------------------

enum class BinaryOp { add, sub, mul };

template <typename T>
BasicTensor<T> elementwise(BinaryOp op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.dims() != b.dims()) {
    throw ShapeError("elementwise: shape mismatch " + to_string(a.dims()) + " vs " + to_string(b.dims()));
  }
  BasicTensor<T> out(a.dims());
  auto x = a.data();
  auto y = b.data();
  auto r = out.data();
  switch (op) {
    case BinaryOp::add:
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = x[i] + y[i];
      break;
    case BinaryOp::sub:
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = x[i] - y[i];
      break;
    case BinaryOp::mul:
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = x[i] * y[i];
      break;
  }
  return out;
}

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(BinaryOp::add, a, b);
}
template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(BinaryOp::sub, a, b);
}
template <typename T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  return elementwise(BinaryOp::mul, a, b);
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, T s) {
  BasicTensor<T> out = a;
  for (auto& v : out.data()) v *= s;
  return out;
}

template <typename T>
BasicTensor<T> relu(const BasicTensor<T>& a) {
  BasicTensor<T> out = a;
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  return out;
}

template <typename T>
T sum(const BasicTensor<T>& a) {
  T s{0};
  for (T v : a.data()) s += v;
  return s;
}

// --- matrix products -------------------------------------------------------

/// [m,p] x [p,n] -> [m,n].
template <typename T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2) {
    throw ShapeError("matmul: expected rank-2 operands, got " + to_string(a.dims()) + " and " + to_string(b.dims()));
  }
  const std::size_t m = a.dim(0), p = a.dim(1), n = b.dim(1);
  if (b.dim(0) != p) {
    throw ShapeError("matmul: inner extent mismatch " + to_string(a.dims()) + " x " + to_string(b.dims()));
  }
  BasicTensor<T> out({m, n});
  auto A = a.data();
  auto B = b.data();
  auto C = out.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t t = 0; t < p; ++t) {
      const T av = A[i * p + t];
      const T* brow = &B[t * n];
      T* crow = &C[i * n];
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
  return out;
}

/// Batched product [B,m,p] x [B,p,n] -> [B,m,n]. When `transpose_b` is set the
/// second operand is read as [B,n,p].
template <typename T>
BasicTensor<T> batched_matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, bool transpose_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw ShapeError("batched_matmul: incompatible operands " + to_string(a.dims()) + " and " + to_string(b.dims()));
  }
  const std::size_t batch = a.dim(0), m = a.dim(1), p = a.dim(2);
  const std::size_t n = transpose_b ? b.dim(1) : b.dim(2);
  if ((transpose_b ? b.dim(2) : b.dim(1)) != p) {
    throw ShapeError("batched_matmul: inner extent mismatch " + to_string(a.dims()) + " x " + to_string(b.dims()));
  }
  BasicTensor<T> out({batch, m, n});
  auto A = a.data();
  auto B = b.data();
  auto C = out.data();
  for (std::size_t s = 0; s < batch; ++s) {
    const T* As = &A[s * m * p];
    const T* Bs = &B[s * p * n];
    T* Cs = &C[s * m * n];
    if (transpose_b) {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          T acc{0};
          for (std::size_t t = 0; t < p; ++t) acc += As[i * p + t] * Bs[j * p + t];
          Cs[i * n + j] = acc;
        }
      }
    } else {
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t t = 0; t < p; ++t) {
          const T av = As[i * p + t];
          for (std::size_t j = 0; j < n; ++j) Cs[i * n + j] += av * Bs[t * n + j];
        }
      }
    }
  }
  return out;
}

// --- softmax ---------------------------------------------------------------

template <typename T>
BasicTensor<T> softmax_lastdim(const BasicTensor<T>& t) {
  const std::size_t len = t.dims().back();
  const std::size_t rows = t.size() / len;
  BasicTensor<T> out(t.dims());
  auto x = t.data();
  auto y = out.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = &x[r * len];
    T* yr = &y[r * len];
    T mx = xr[0];
    for (std::size_t i = 0; i < len; ++i) {
      if (!std::isfinite(xr[i])) throw NumericError("softmax_lastdim: non-finite input");
      mx = std::max(mx, xr[i]);
    }
    T denom{0};
    for (std::size_t i = 0; i < len; ++i) {
      yr[i] = std::exp(xr[i] - mx);
      denom += yr[i];
    }
    for (std::size_t i = 0; i < len; ++i) yr[i] /= denom;
  }
  return out;
}

// --- structural ------------------------------------------------------------

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& t, Dims dims) {
  if (element_count(dims) != t.size()) {
    throw ShapeError("reshape: cannot map " + to_string(t.dims()) + " onto " + to_string(dims));
  }
  return BasicTensor<T>(std::move(dims), t.values());
}

inline std::vector<std::size_t> strides_of(const Dims& dims) {
  std::vector<std::size_t> s(dims.size(), 1);
  for (std::size_t i = dims.size(); i-- > 1;) s[i - 1] = s[i] * dims[i];
  return s;
}

inline void check_permutation(const std::vector<std::size_t>& perm, std::size_t rank) {
  std::vector<bool> seen(rank, false);
  if (perm.size() != rank) throw ShapeError("permute: permutation length does not match rank");
  for (std::size_t p : perm) {
    if (p >= rank || seen[p]) throw ShapeError("permute: invalid axis permutation");
    seen[p] = true;
  }
}

inline std::vector<std::size_t> inverse_permutation(const std::vector<std::size_t>& perm) {
  std::vector<std::size_t> inv(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
  return inv;
}

/// Output axis i is input axis perm[i].
template <typename T>
BasicTensor<T> permute(const BasicTensor<T>& t, const std::vector<std::size_t>& perm) {
  const std::size_t rank = t.rank();
  check_permutation(perm, rank);
  Dims out_dims(rank);
  for (std::size_t i = 0; i < rank; ++i) out_dims[i] = t.dims()[perm[i]];
  const auto in_strides = strides_of(t.dims());
  std::vector<std::size_t> step(rank);
  for (std::size_t i = 0; i < rank; ++i) step[i] = in_strides[perm[i]];

  BasicTensor<T> out(out_dims);
  auto src = t.data();
  auto dst = out.data();
  std::vector<std::size_t> idx(rank, 0);
  std::size_t src_off = 0;
  for (std::size_t flat = 0; flat < dst.size(); ++flat) {
    dst[flat] = src[src_off];
    for (std::size_t ax = rank; ax-- > 0;) {
      ++idx[ax];
      src_off += step[ax];
      if (idx[ax] < out_dims[ax]) break;
      src_off -= step[ax] * out_dims[ax];
      idx[ax] = 0;
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> concat_axis(const std::vector<BasicTensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat_axis: no inputs");
  const Dims& ref = parts.front().dims();
  if (axis >= ref.size()) throw ShapeError("concat_axis: axis out of range for " + to_string(ref));
  Dims out_dims = ref;
  out_dims[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != ref.size()) throw ShapeError("concat_axis: rank mismatch");
    for (std::size_t i = 0; i < ref.size(); ++i) {
      if (i != axis && p.dims()[i] != ref[i]) {
        throw ShapeError("concat_axis: extent mismatch " + to_string(p.dims()) + " vs " + to_string(ref));
      }
    }
    out_dims[axis] += p.dims()[axis];
  }
  const std::size_t outer = element_count(Dims(ref.begin(), ref.begin() + axis));
  const std::size_t inner = element_count(Dims(ref.begin() + axis + 1, ref.end())) ;
  BasicTensor<T> out(out_dims);
  auto dst = out.data();
  std::size_t pos = 0;
  for (std::size_t o = 0; o < outer; ++o) {
    for (const auto& p : parts) {
      const std::size_t chunk = p.dims()[axis] * inner;
      auto src = p.data().subspan(o * chunk, chunk);
      std::copy(src.begin(), src.end(), dst.begin() + pos);
      pos += chunk;
    }
  }
  return out;
}

/// Elements [start, start+length) along `axis`.
template <typename T>
BasicTensor<T> slice(const BasicTensor<T>& t, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= t.rank()) throw ShapeError("slice: axis out of range for " + to_string(t.dims()));
  if (length == 0 || start + length > t.dims()[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds extent " + std::to_string(t.dims()[axis]));
  }
  const Dims& d = t.dims();
  const std::size_t outer = element_count(Dims(d.begin(), d.begin() + axis));
  const std::size_t inner = element_count(Dims(d.begin() + axis + 1, d.end()));
  Dims out_dims = d;
  out_dims[axis] = length;
  BasicTensor<T> out(out_dims);
  auto src = t.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    auto from = src.subspan((o * d[axis] + start) * inner, length * inner);
    std::copy(from.begin(), from.end(), dst.begin() + o * length * inner);
  }
  return out;
}

template <typename T>
BasicTensor<T> reduce_mean_axis(const BasicTensor<T>& t, std::size_t axis) {
  if (axis >= t.rank()) throw ShapeError("reduce_mean_axis: axis " + std::to_string(axis) + " out of range for " + to_string(t.dims()));
  const Dims& d = t.dims();
  const std::size_t outer = element_count(Dims(d.begin(), d.begin() + axis));
  const std::size_t inner = element_count(Dims(d.begin() + axis + 1, d.end()));
  const std::size_t len = d[axis];
  Dims out_dims;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (i != axis) out_dims.push_back(d[i]);
  }
  if (out_dims.empty()) out_dims.push_back(1);
  BasicTensor<T> out(out_dims);
  auto src = t.data();
  auto dst = out.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t l = 0; l < len; ++l) {
      const T* row = &src[(o * len + l) * inner];
      for (std::size_t i = 0; i < inner; ++i) dst[o * inner + i] += row[i];
    }
  }
  for (auto& v : dst) v /= static_cast<T>(len);
  return out;
}

}  // namespace cafbifpn
