#pragma once

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <memory>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "splitnas/common.hpp"

namespace splitnas {

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <class T>
struct TensorData {
  Shape shape;
  std::vector<T> v;
  std::vector<T> g;  // allocated on first gradient touch
  bool requires_grad = false;
};

// Shared-storage handle over a dense row-major array. Copies alias the same
// buffer; use clone() for a deep copy. Gradients live next to the values so
// a parameter tensor and its grad travel together through the tape.
template <class T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : d_(std::make_shared<TensorData<T>>()) {
    for (int64_t dim : shape)
      if (dim <= 0) throw DimensionError("tensor extent must be positive, got " + shape_str(shape));
    d_->shape = std::move(shape);
    d_->v.assign(static_cast<size_t>(numel(d_->shape)), fill);
    d_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t(std::move(shape), T(0), requires_grad);
    if (values.size() != t.v().size())
      throw DimensionError("value count " + std::to_string(values.size()) + " does not match shape " +
                           shape_str(t.shape()));
    t.v() = std::move(values);
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  // Handle semantics: const applies to the handle, not the shared buffer,
  // so a lambda capturing a tensor by value can still accumulate gradients.
  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int64_t size() const { return d_ ? static_cast<int64_t>(d_->v.size()) : 0; }
  int rank() const { return static_cast<int>(d_->shape.size()); }

  std::vector<T>& v() const { return d_->v; }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool b) const { d_->requires_grad = b; }

  bool has_grad() const { return d_ && !d_->g.empty(); }
  std::vector<T>& grad() const {
    if (d_->g.empty()) d_->g.assign(d_->v.size(), T(0));
    return d_->g;
  }
  void zero_grad() const {
    if (d_ && !d_->g.empty()) std::fill(d_->g.begin(), d_->g.end(), T(0));
  }
  void drop_grad() const { d_->g.clear(); }

  T item() const {
    if (size() != 1) throw UsageError("item() on non-scalar tensor " + shape_str(shape()));
    return d_->v[0];
  }

  Tensor clone() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>(*d_);
    return t;
  }

  // Identity of the underlying buffer; used as an optimizer state key.
  const void* id() const { return d_.get(); }

  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

  static Tensor full_like(const Tensor& o, T fill) { return Tensor(o.shape(), fill); }

  static Tensor rand_uniform(Shape shape, T lo, T hi, std::mt19937_64& rng, bool requires_grad = false) {
    Tensor t(std::move(shape), T(0), requires_grad);
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (auto& x : t.v()) x = static_cast<T>(dist(rng));
    return t;
  }

  static Tensor rand_normal(Shape shape, T mean, T stddev, std::mt19937_64& rng, bool requires_grad = false) {
    Tensor t(std::move(shape), T(0), requires_grad);
    std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
    for (auto& x : t.v()) x = static_cast<T>(dist(rng));
    return t;
  }

  bool all_finite() const {
    for (T x : d_->v)
      if (!std::isfinite(static_cast<double>(x))) return false;
    return true;
  }

 private:
  std::shared_ptr<TensorData<T>> d_;
};

template <class T>
struct dtype_byte;
template <>
struct dtype_byte<float> {
  static constexpr uint8_t value = 0;
};
template <>
struct dtype_byte<double> {
  static constexpr uint8_t value = 1;
};

// Tensor blob format: "TBLB", version byte 1, dtype byte (0=f32, 1=f64),
// rank byte, 4 reserved zero bytes, then rank little-endian u64 extents and
// the row-major little-endian payload. Round-trips are bit-exact.
namespace blob {

inline void put_u64_le(std::ostream& os, uint64_t x) {
  uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<uint8_t>((x >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline uint64_t get_u64_le(std::istream& is) {
  uint8_t b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  if (!is) throw FormatError("tensor blob truncated in header");
  uint64_t x = 0;
  for (int i = 0; i < 8; ++i) x |= static_cast<uint64_t>(b[i]) << (8 * i);
  return x;
}

template <class T>
void write(std::ostream& os, const Tensor<T>& t) {
  static_assert(sizeof(float) == 4 && sizeof(double) == 8);
  os.write("TBLB", 4);
  uint8_t head[7] = {1, dtype_byte<T>::value, static_cast<uint8_t>(t.rank()), 0, 0, 0, 0};
  os.write(reinterpret_cast<const char*>(head), 7);
  for (int64_t d : t.shape()) put_u64_le(os, static_cast<uint64_t>(d));
  // x86 is little-endian; payload is written verbatim.
  os.write(reinterpret_cast<const char*>(t.v().data()),
           static_cast<std::streamsize>(t.v().size() * sizeof(T)));
  if (!os) throw FormatError("tensor blob write failed");
}

template <class T>
Tensor<T> read(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TBLB", 4) != 0) throw FormatError("bad tensor blob magic");
  uint8_t head[7];
  is.read(reinterpret_cast<char*>(head), 7);
  if (!is) throw FormatError("tensor blob truncated in header");
  if (head[0] != 1) throw FormatError("unsupported tensor blob version " + std::to_string(head[0]));
  if (head[1] != dtype_byte<T>::value) throw FormatError("tensor blob dtype mismatch");
  if (head[3] || head[4] || head[5] || head[6]) throw FormatError("tensor blob reserved bytes nonzero");
  int rank = head[2];
  Shape shape(static_cast<size_t>(rank));
  for (auto& d : shape) d = static_cast<int64_t>(get_u64_le(is));
  Tensor<T> t(shape);
  is.read(reinterpret_cast<char*>(t.v().data()),
          static_cast<std::streamsize>(t.v().size() * sizeof(T)));
  if (!is || is.gcount() != static_cast<std::streamsize>(t.v().size() * sizeof(T)))
    throw FormatError("tensor blob truncated in payload");
  return t;
}

template <class T>
void save(const std::filesystem::path& path, const Tensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write(os, t);
}

template <class T>
Tensor<T> load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read<T>(is);
}

inline uint8_t peek_dtype(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "TBLB", 4) != 0) throw FormatError("bad tensor blob magic");
  uint8_t head[2];
  is.read(reinterpret_cast<char*>(head), 2);
  if (!is) throw FormatError("tensor blob truncated in header");
  return head[1];
}

}  // namespace blob

template <class T>
struct Parameter {
  std::string name;
  Tensor<T> tensor;
};

}  // namespace splitnas
