#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>
#include <vector>

#include "cseg/common.hpp"

namespace cseg {

// Dense row-major tensor, rank 1..5, channels-first layout for rank-5
// (batch, channel, depth, height, width) with width fastest.
template <typename S>
class TensorT {
 public:
  TensorT() = default;
  explicit TensorT(std::vector<int> shape) : shape_(std::move(shape)) {
    check_shape(shape_);
    data_.assign(numel_of(shape_), S(0));
  }
  TensorT(std::vector<int> shape, std::vector<S> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape(shape_);
    if (numel_of(shape_) != static_cast<std::int64_t>(data_.size()))
      throw ShapeError("tensor data length does not match shape");
  }

  static TensorT zeros(std::vector<int> shape) { return TensorT(std::move(shape)); }
  static TensorT full(std::vector<int> shape, S v) {
    TensorT t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), v);
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int extent(int axis) const { return shape_.at(static_cast<std::size_t>(axis)); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& raw() { return data_; }
  const std::vector<S>& raw() const { return data_; }

  S& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const S& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // Rank-5 accessor (b, c, d, h, w)
  S& at5(int b, int c, int d, int h, int w) { return data_[static_cast<std::size_t>(index5(b, c, d, h, w))]; }
  const S& at5(int b, int c, int d, int h, int w) const {
    return data_[static_cast<std::size_t>(index5(b, c, d, h, w))];
  }
  std::int64_t index5(int b, int c, int d, int h, int w) const {
    const auto& s = shape_;
    return (((static_cast<std::int64_t>(b) * s[1] + c) * s[2] + d) * s[3] + h) * s[4] + w;
  }

  // Rank-3 accessor (d, h, w)
  S& at3(int d, int h, int w) { return data_[static_cast<std::size_t>((static_cast<std::int64_t>(d) * shape_[1] + h) * shape_[2] + w)]; }
  const S& at3(int d, int h, int w) const {
    return data_[static_cast<std::size_t>((static_cast<std::int64_t>(d) * shape_[1] + h) * shape_[2] + w)];
  }

  using ArrayMap = Eigen::Map<Eigen::Array<S, Eigen::Dynamic, 1>>;
  using ConstArrayMap = Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>;
  ArrayMap array() { return ArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }
  ConstArrayMap array() const { return ConstArrayMap(data_.data(), static_cast<Eigen::Index>(data_.size())); }

  void fill(S v) { std::fill(data_.begin(), data_.end(), v); }
  void zero() { fill(S(0)); }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (const S& v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  static std::int64_t numel_of(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int e : shape) n *= e;
    return n;
  }

  std::string shape_str() const {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
    os << ')';
    return os.str();
  }

 private:
  static void check_shape(const std::vector<int>& shape) {
    if (shape.empty() || shape.size() > 5) throw ShapeError("tensor rank must be 1..5");
    for (int e : shape)
      if (e <= 0) throw ShapeError("tensor extents must be positive");
  }

  std::vector<int> shape_;
  std::vector<S> data_;
};

using Tensor = TensorT<float>;

template <typename S>
void ensure_finite(const TensorT<S>& t, const char* what) {
  if (!t.all_finite()) throw NumericError(std::string("non-finite values in ") + what);
}

template <typename S>
std::uint64_t checksum(const TensorT<S>& t) {
  std::uint64_t h = fnv1a64(t.shape().data(), t.shape().size() * sizeof(int));
  return fnv1a64(t.data(), static_cast<std::size_t>(t.numel()) * sizeof(S), h);
}

// Channel concatenation of rank-5 tensors sharing (batch, spatial) extents.
template <typename S>
TensorT<S> concat_channels(const TensorT<S>& a, const TensorT<S>& b) {
  if (a.rank() != 5 || b.rank() != 5) throw ShapeError("concat_channels expects rank-5 tensors");
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3] || sa[4] != sb[4])
    throw ShapeError("concat_channels extent mismatch " + a.shape_str() + " vs " + b.shape_str());
  TensorT<S> out({sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]});
  const std::int64_t spatial = static_cast<std::int64_t>(sa[2]) * sa[3] * sa[4];
  for (int n = 0; n < sa[0]; ++n) {
    std::copy_n(a.data() + n * sa[1] * spatial, sa[1] * spatial, out.data() + n * (sa[1] + sb[1]) * spatial);
    std::copy_n(b.data() + n * sb[1] * spatial, sb[1] * spatial,
                out.data() + (n * (sa[1] + sb[1]) + sa[1]) * spatial);
  }
  return out;
}

// Inverse of concat_channels: splits grad into the two channel ranges.
template <typename S>
std::pair<TensorT<S>, TensorT<S>> split_channels(const TensorT<S>& g, int c_first) {
  if (g.rank() != 5) throw ShapeError("split_channels expects rank-5 tensor");
  const auto& s = g.shape();
  if (c_first <= 0 || c_first >= s[1]) throw ShapeError("split_channels bad split point");
  TensorT<S> a({s[0], c_first, s[2], s[3], s[4]});
  TensorT<S> b({s[0], s[1] - c_first, s[2], s[3], s[4]});
  const std::int64_t spatial = static_cast<std::int64_t>(s[2]) * s[3] * s[4];
  for (int n = 0; n < s[0]; ++n) {
    std::copy_n(g.data() + n * s[1] * spatial, c_first * spatial, a.data() + n * c_first * spatial);
    std::copy_n(g.data() + (n * s[1] + c_first) * spatial, (s[1] - c_first) * spatial,
                b.data() + n * (s[1] - c_first) * spatial);
  }
  return {std::move(a), std::move(b)};
}

// ---------------------------------------------------------------------------
// Binary tensor format: magic "CSTN", u8 rank, little-endian u32 extents,
// little-endian f32 payload.

namespace io_detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline void put_f32(std::ostream& os, float v) {
  std::uint32_t bits;
  std::memcpy(&bits, &v, 4);
  put_u32(os, bits);
}

inline float get_f32(std::istream& is) {
  std::uint32_t bits = get_u32(is);
  float v;
  std::memcpy(&v, &bits, 4);
  return v;
}

}  // namespace io_detail

template <typename S>
void write_tensor(std::ostream& os, const TensorT<S>& t) {
  os.write("CSTN", 4);
  unsigned char rank = static_cast<unsigned char>(t.rank());
  os.write(reinterpret_cast<const char*>(&rank), 1);
  for (int e : t.shape()) io_detail::put_u32(os, static_cast<std::uint32_t>(e));
  if constexpr (std::is_same_v<S, float>) {
    // payload is already little-endian f32 on every supported target
    static_assert(sizeof(float) == 4);
    os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.numel()) * 4);
  } else {
    for (std::int64_t i = 0; i < t.numel(); ++i) io_detail::put_f32(os, static_cast<float>(t[i]));
  }
  if (!os) throw IoError("tensor write failed");
}

template <typename S = float>
TensorT<S> read_tensor(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "CSTN", 4) != 0) throw IoError("bad tensor magic");
  unsigned char rank = 0;
  is.read(reinterpret_cast<char*>(&rank), 1);
  if (!is || rank < 1 || rank > 5) throw IoError("bad tensor rank");
  std::vector<int> shape(rank);
  for (int i = 0; i < rank; ++i) shape[i] = static_cast<int>(io_detail::get_u32(is));
  TensorT<S> t(shape);
  if constexpr (std::is_same_v<S, float>) {
    is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.numel()) * 4);
  } else {
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(io_detail::get_f32(is));
  }
  if (!is) throw IoError("tensor payload truncated");
  return t;
}

template <typename S>
void save_tensor(const std::string& path, const TensorT<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  write_tensor(os, t);
}

template <typename S = float>
TensorT<S> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open for read: " + path);
  return read_tensor<S>(is);
}

}  // namespace cseg
