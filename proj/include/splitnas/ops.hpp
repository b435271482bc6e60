#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "splitnas/tensor.hpp"

namespace splitnas {

// Reverse-mode tape. Ops record a backward closure when a tape is active and
// some input participates in gradients. One tape per logical thread; nested
// scopes restore the previous tape, so a candidate training loop can run
// inside a controller episode without the two graphs mixing.
template <class T>
class Tape {
 public:
  void record(std::function<void()> fn) { entries_.push_back(std::move(fn)); }
  bool empty() const { return entries_.empty(); }
  size_t size() const { return entries_.size(); }
  void clear() { entries_.clear(); }
  void run_backward() {
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
    entries_.clear();
  }
  static Tape*& current() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

 private:
  std::vector<std::function<void()>> entries_;
};

template <class T>
struct TapeScope {
  Tape<T>* prev;
  explicit TapeScope(Tape<T>& t) : prev(Tape<T>::current()) { Tape<T>::current() = &t; }
  ~TapeScope() { Tape<T>::current() = prev; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;
};

// Temporarily detaches from any active tape (teacher forward passes, feature
// extraction for a frozen encoder, metric evaluation inside training loops).
template <class T>
struct TapeSuspend {
  Tape<T>* prev;
  TapeSuspend() : prev(Tape<T>::current()) { Tape<T>::current() = nullptr; }
  ~TapeSuspend() { Tape<T>::current() = prev; }
  TapeSuspend(const TapeSuspend&) = delete;
  TapeSuspend& operator=(const TapeSuspend&) = delete;
};

namespace detail {

template <class T>
inline bool track1(const Tensor<T>& a) {
  return a.defined() && a.requires_grad();
}

template <class T, class... Ts>
inline bool tracking(const Ts&... ts) {
  return Tape<T>::current() != nullptr && (... || track1<T>(ts));
}

template <class T>
inline void record(std::function<void()> fn) {
  Tape<T>::current()->record(std::move(fn));
}

}  // namespace detail

// Populates grads of everything reachable from `loss` and consumes the tape.
template <class T>
inline void backward(Tensor<T> loss) {
  if (!loss.defined() || loss.size() != 1) throw UsageError("backward expects a scalar tensor");
  Tape<T>* tape = Tape<T>::current();
  if (tape == nullptr || tape->empty()) throw UsageError("backward called with no recorded tape");
  loss.grad()[0] += T(1);
  tape->run_backward();
}

// ---------------------------------------------------------------------------
// elementwise and shape ops

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  const auto& av = a.v();
  const auto& bv = b.v();
  auto& yv = y.v();
  for (size_t i = 0; i < yv.size(); ++i) yv[i] = av[i] + bv[i];
  if (detail::tracking<T>(a, b)) {
    y.set_requires_grad(true);
    detail::record<T>([a, b, y]() mutable {
      const auto& gy = y.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("sub: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  for (size_t i = 0; i < y.v().size(); ++i) y.v()[i] = a.v()[i] - b.v()[i];
  if (detail::tracking<T>(a, b)) {
    y.set_requires_grad(true);
    detail::record<T>([a, b, y]() mutable {
      const auto& gy = y.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  for (size_t i = 0; i < y.v().size(); ++i) y.v()[i] = a.v()[i] * b.v()[i];
  if (detail::tracking<T>(a, b)) {
    y.set_requires_grad(true);
    detail::record<T>([a, b, y]() mutable {
      const auto& gy = y.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * b.v()[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (size_t i = 0; i < gy.size(); ++i) gb[i] += gy[i] * a.v()[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> div_elem(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("div: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor<T> y(a.shape());
  for (size_t i = 0; i < y.v().size(); ++i) y.v()[i] = a.v()[i] / b.v()[i];
  if (detail::tracking<T>(a, b)) {
    y.set_requires_grad(true);
    detail::record<T>([a, b, y]() mutable {
      const auto& gy = y.grad();
      if (a.requires_grad()) {
        auto& ga = a.grad();
        for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] / b.v()[i];
      }
      if (b.requires_grad()) {
        auto& gb = b.grad();
        for (size_t i = 0; i < gy.size(); ++i) gb[i] -= gy[i] * a.v()[i] / (b.v()[i] * b.v()[i]);
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> scalar_mul(const Tensor<T>& a, T c) {
  Tensor<T> y(a.shape());
  for (size_t i = 0; i < y.v().size(); ++i) y.v()[i] = a.v()[i] * c;
  if (detail::tracking<T>(a)) {
    y.set_requires_grad(true);
    detail::record<T>([a, y, c]() mutable {
      const auto& gy = y.grad();
      auto& ga = a.grad();
      for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * c;
    });
  }
  return y;
}

template <class T>
Tensor<T> scalar_add(const Tensor<T>& a, T c) {
  Tensor<T> y(a.shape());
  for (size_t i = 0; i < y.v().size(); ++i) y.v()[i] = a.v()[i] + c;
  if (detail::tracking<T>(a)) {
    y.set_requires_grad(true);
    detail::record<T>([a, y]() mutable {
      const auto& gy = y.grad();
      auto& ga = a.grad();
      for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<T> y = Tensor<T>::from(std::move(shape), a.v());
  if (detail::tracking<T>(a)) {
    y.set_requires_grad(true);
    detail::record<T>([a, y]() mutable {
      const auto& gy = y.grad();
      auto& ga = a.grad();
      for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, int64_t c0, int64_t c1) {
  if (a.rank() != 2) throw DimensionError("slice_cols expects rank-2 input");
  int64_t n = a.shape()[0], c = a.shape()[1];
  if (c0 < 0 || c1 > c || c0 >= c1) throw DimensionError("slice_cols: bad column range");
  Tensor<T> y({n, c1 - c0});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = c0; j < c1; ++j) y.v()[static_cast<size_t>(i * (c1 - c0) + (j - c0))] = a.v()[static_cast<size_t>(i * c + j)];
  if (detail::tracking<T>(a)) {
    y.set_requires_grad(true);
    detail::record<T>([a, y, n, c, c0, c1]() mutable {
      const auto& gy = y.grad();
      auto& ga = a.grad();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = c0; j < c1; ++j)
          ga[static_cast<size_t>(i * c + j)] += gy[static_cast<size_t>(i * (c1 - c0) + (j - c0))];
    });
  }
  return y;
}

template <class T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T s = T(0);
  for (T x : a.v()) s += x;
  Tensor<T> y = Tensor<T>::scalar(s);
  if (detail::tracking<T>(a)) {
    y.set_requires_grad(true);
    detail::record<T>([a, y]() mutable {
      T g = y.grad()[0];
      auto& ga = a.grad();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += g;
    });
  }
  return y;
}

template <class T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scalar_mul(sum_all(a), T(1) / static_cast<T>(a.size()));
}

// ---------------------------------------------------------------------------
// activations

template <class T>
Tensor<T> relu(const Tensor<T>& a) {
  Tensor<T> y(a.shape());
  for (size_t i = 0; i < y.v().size(); ++i) y.v()[i] = a.v()[i] > T(0) ? a.v()[i] : T(0);
  if (detail::tracking<T>(a)) {
    y.set_requires_grad(true);
    // subgradient at 0 is 0
    detail::record<T>([a, y]() mutable {
      const auto& gy = y.grad();
      auto& ga = a.grad();
      for (size_t i = 0; i < gy.size(); ++i)
        if (a.v()[i] > T(0)) ga[i] += gy[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  Tensor<T> y(a.shape());
  for (size_t i = 0; i < y.v().size(); ++i) y.v()[i] = T(1) / (T(1) + std::exp(-a.v()[i]));
  if (detail::tracking<T>(a)) {
    y.set_requires_grad(true);
    detail::record<T>([a, y]() mutable {
      const auto& gy = y.grad();
      auto& ga = a.grad();
      for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * y.v()[i] * (T(1) - y.v()[i]);
    });
  }
  return y;
}

template <class T>
Tensor<T> tanh_act(const Tensor<T>& a) {
  Tensor<T> y(a.shape());
  for (size_t i = 0; i < y.v().size(); ++i) y.v()[i] = std::tanh(a.v()[i]);
  if (detail::tracking<T>(a)) {
    y.set_requires_grad(true);
    detail::record<T>([a, y]() mutable {
      const auto& gy = y.grad();
      auto& ga = a.grad();
      for (size_t i = 0; i < gy.size(); ++i) ga[i] += gy[i] * (T(1) - y.v()[i] * y.v()[i]);
    });
  }
  return y;
}

template <class T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("softmax-rows expects rank-2 input, got " + shape_str(a.shape()));
  int64_t n = a.shape()[0], c = a.shape()[1];
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < n; ++i) {
    const T* row = a.v().data() + i * c;
    T m = row[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    T z = T(0);
    T* out = y.v().data() + i * c;
    for (int64_t j = 0; j < c; ++j) {
      out[j] = std::exp(row[j] - m);
      z += out[j];
    }
    for (int64_t j = 0; j < c; ++j) out[j] /= z;
  }
  if (detail::tracking<T>(a)) {
    y.set_requires_grad(true);
    detail::record<T>([a, y, n, c]() mutable {
      auto& ga = a.grad();
      const auto& gy = y.grad();
      for (int64_t i = 0; i < n; ++i) {
        const T* p = y.v().data() + i * c;
        const T* g = gy.data() + i * c;
        T dot = T(0);
        for (int64_t j = 0; j < c; ++j) dot += g[j] * p[j];
        for (int64_t j = 0; j < c; ++j) ga[static_cast<size_t>(i * c + j)] += p[j] * (g[j] - dot);
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  if (a.rank() != 2) throw DimensionError("log-softmax expects rank-2 input");
  int64_t n = a.shape()[0], c = a.shape()[1];
  Tensor<T> y(a.shape());
  for (int64_t i = 0; i < n; ++i) {
    const T* row = a.v().data() + i * c;
    T m = row[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    T z = T(0);
    for (int64_t j = 0; j < c; ++j) z += std::exp(row[j] - m);
    T lse = m + std::log(z);
    for (int64_t j = 0; j < c; ++j) y.v()[static_cast<size_t>(i * c + j)] = row[j] - lse;
  }
  if (detail::tracking<T>(a)) {
    y.set_requires_grad(true);
    detail::record<T>([a, y, n, c]() mutable {
      auto& ga = a.grad();
      const auto& gy = y.grad();
      for (int64_t i = 0; i < n; ++i) {
        const T* ly = y.v().data() + i * c;
        const T* g = gy.data() + i * c;
        T gsum = T(0);
        for (int64_t j = 0; j < c; ++j) gsum += g[j];
        for (int64_t j = 0; j < c; ++j)
          ga[static_cast<size_t>(i * c + j)] += g[j] - std::exp(ly[j]) * gsum;
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// linear / convolution

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b = {}) {
  if (x.rank() != 2 || w.rank() != 2) throw DimensionError("linear expects rank-2 input and weight");
  int64_t n = x.shape()[0], cin = x.shape()[1];
  int64_t cout = w.shape()[0];
  if (w.shape()[1] != cin)
    throw DimensionError("linear: weight " + shape_str(w.shape()) + " does not match input " +
                         shape_str(x.shape()));
  if (b.defined() && (b.rank() != 1 || b.shape()[0] != cout))
    throw DimensionError("linear: bias shape mismatch");
  Tensor<T> y({n, cout});
  const T* xv = x.v().data();
  const T* wv = w.v().data();
  T* yv = y.v().data();
  // grain: stay serial unless the matmul is big enough to amortize threads
  int64_t grain_rows = (n * cout * cin > (int64_t{1} << 18)) ? 1 : n + 1;
  parallel_for(n, [&](int64_t lo, int64_t hi) {
    for (int64_t i = lo; i < hi; ++i)
      for (int64_t o = 0; o < cout; ++o) {
        T acc = b.defined() ? b.v()[static_cast<size_t>(o)] : T(0);
        const T* xr = xv + i * cin;
        const T* wr = wv + o * cin;
        for (int64_t k = 0; k < cin; ++k) acc += xr[k] * wr[k];
        yv[i * cout + o] = acc;
      }
  }, grain_rows);
  if (detail::tracking<T>(x, w, b)) {
    y.set_requires_grad(true);
    detail::record<T>([x, w, b, y, n, cin, cout, grain_rows]() mutable {
      const auto& gy = y.grad();
      if (x.requires_grad()) {
        auto& gx = x.grad();
        parallel_for(n, [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i)
            for (int64_t k = 0; k < cin; ++k) {
              T acc = T(0);
              for (int64_t o = 0; o < cout; ++o) acc += gy[static_cast<size_t>(i * cout + o)] * w.v()[static_cast<size_t>(o * cin + k)];
              gx[static_cast<size_t>(i * cin + k)] += acc;
            }
        }, grain_rows);
      }
      if (w.requires_grad()) {
        auto& gw = w.grad();
        int64_t grain_o = (n * cout * cin > (int64_t{1} << 18)) ? 1 : cout + 1;
        parallel_for(cout, [&](int64_t lo, int64_t hi) {
          for (int64_t o = lo; o < hi; ++o)
            for (int64_t k = 0; k < cin; ++k) {
              T acc = T(0);
              for (int64_t i = 0; i < n; ++i) acc += gy[static_cast<size_t>(i * cout + o)] * x.v()[static_cast<size_t>(i * cin + k)];
              gw[static_cast<size_t>(o * cin + k)] += acc;
            }
        }, grain_o);
      }
      if (b.defined() && b.requires_grad()) {
        auto& gb = b.grad();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t o = 0; o < cout; ++o) gb[static_cast<size_t>(o)] += gy[static_cast<size_t>(i * cout + o)];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                 int padding, int groups = 1) {
  if (x.rank() != 4 || w.rank() != 4) throw DimensionError("conv2d expects rank-4 input and weight");
  if (stride < 1) throw ConfigError("conv2d: stride must be >= 1");
  if (padding < 0) throw ConfigError("conv2d: padding must be >= 0");
  int64_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  int64_t cout = w.shape()[0], cing = w.shape()[1], k = w.shape()[2];
  if (w.shape()[2] != w.shape()[3]) throw DimensionError("conv2d: only square kernels supported");
  if (groups < 1 || cin % groups != 0) throw ConfigError("conv2d: groups must divide input channels");
  if (cout % groups != 0) throw ConfigError("conv2d: groups must divide output channels");
  if (cing != cin / groups)
    throw DimensionError("conv2d: weight " + shape_str(w.shape()) + " inconsistent with input channels " +
                         std::to_string(cin) + " at groups " + std::to_string(groups));
  if (k > h + 2 * padding || k > wd + 2 * padding)
    throw DimensionError("conv2d: kernel larger than padded input");
  if (b.defined() && (b.rank() != 1 || b.shape()[0] != cout)) throw DimensionError("conv2d: bias shape mismatch");
  int64_t ho = (h + 2 * padding - k) / stride + 1;
  int64_t wo = (wd + 2 * padding - k) / stride + 1;
  Tensor<T> y({n, cout, ho, wo});
  int64_t co_per_g = cout / groups;
  const T* xv = x.v().data();
  const T* wv = w.v().data();
  T* yv = y.v().data();
  int64_t conv_work = n * cout * ho * wo * cing * k * k;
  int64_t grain_nco = (conv_work > (int64_t{1} << 18)) ? 1 : n * cout + 1;
  parallel_for(n * cout, [&](int64_t lo, int64_t hi) {
    for (int64_t idx = lo; idx < hi; ++idx) {
      int64_t i = idx / cout, co = idx % cout;
      int64_t g = co / co_per_g;
      int64_t ci0 = g * cing;
      const T* wbase = wv + co * cing * k * k;
      T bias = b.defined() ? b.v()[static_cast<size_t>(co)] : T(0);
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          T acc = bias;
          int64_t ih0 = oh * stride - padding;
          int64_t iw0 = ow * stride - padding;
          for (int64_t cl = 0; cl < cing; ++cl) {
            const T* xc = xv + ((i * cin + ci0 + cl) * h) * wd;
            const T* wc = wbase + cl * k * k;
            for (int64_t kh = 0; kh < k; ++kh) {
              int64_t ih = ih0 + kh;
              if (ih < 0 || ih >= h) continue;
              const T* xrow = xc + ih * wd;
              const T* wrow = wc + kh * k;
              for (int64_t kw = 0; kw < k; ++kw) {
                int64_t iw = iw0 + kw;
                if (iw < 0 || iw >= wd) continue;
                acc += xrow[iw] * wrow[kw];
              }
            }
          }
          yv[((i * cout + co) * ho + oh) * wo + ow] = acc;
        }
    }
  }, grain_nco);
  if (detail::tracking<T>(x, w, b)) {
    y.set_requires_grad(true);
    detail::record<T>([x, w, b, y, n, cin, h, wd, cout, cing, k, ho, wo, stride, padding, co_per_g,
                       conv_work]() mutable {
      const auto& gy = y.grad();
      int64_t grain_n = (conv_work > (int64_t{1} << 18)) ? 1 : n + 1;
      int64_t grain_co = (conv_work > (int64_t{1} << 18)) ? 1 : cout + 1;
      if (x.requires_grad()) {
        auto& gx = x.grad();
        parallel_for(n, [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i)
            for (int64_t co = 0; co < cout; ++co) {
              int64_t g = co / co_per_g;
              int64_t ci0 = g * cing;
              const T* wbase = w.v().data() + co * cing * k * k;
              for (int64_t oh = 0; oh < ho; ++oh)
                for (int64_t ow = 0; ow < wo; ++ow) {
                  T gout = gy[static_cast<size_t>(((i * cout + co) * ho + oh) * wo + ow)];
                  if (gout == T(0)) continue;
                  int64_t ih0 = oh * stride - padding;
                  int64_t iw0 = ow * stride - padding;
                  for (int64_t cl = 0; cl < cing; ++cl)
                    for (int64_t kh = 0; kh < k; ++kh) {
                      int64_t ih = ih0 + kh;
                      if (ih < 0 || ih >= h) continue;
                      for (int64_t kw = 0; kw < k; ++kw) {
                        int64_t iw = iw0 + kw;
                        if (iw < 0 || iw >= wd) continue;
                        gx[static_cast<size_t>(((i * cin + ci0 + cl) * h + ih) * wd + iw)] +=
                            gout * wbase[cl * k * k + kh * k + kw];
                      }
                    }
                }
            }
        }, grain_n);
      }
      if (w.requires_grad()) {
        auto& gw = w.grad();
        parallel_for(cout, [&](int64_t lo, int64_t hi) {
          for (int64_t co = lo; co < hi; ++co) {
            int64_t g = co / co_per_g;
            int64_t ci0 = g * cing;
            for (int64_t i = 0; i < n; ++i)
              for (int64_t oh = 0; oh < ho; ++oh)
                for (int64_t ow = 0; ow < wo; ++ow) {
                  T gout = gy[static_cast<size_t>(((i * cout + co) * ho + oh) * wo + ow)];
                  if (gout == T(0)) continue;
                  int64_t ih0 = oh * stride - padding;
                  int64_t iw0 = ow * stride - padding;
                  for (int64_t cl = 0; cl < cing; ++cl)
                    for (int64_t kh = 0; kh < k; ++kh) {
                      int64_t ih = ih0 + kh;
                      if (ih < 0 || ih >= h) continue;
                      for (int64_t kw = 0; kw < k; ++kw) {
                        int64_t iw = iw0 + kw;
                        if (iw < 0 || iw >= wd) continue;
                        gw[static_cast<size_t>(((co * cing + cl) * k + kh) * k + kw)] +=
                            gout * x.v()[static_cast<size_t>(((i * cin + ci0 + cl) * h + ih) * wd + iw)];
                      }
                    }
                }
          }
        }, grain_co);
      }
      if (b.defined() && b.requires_grad()) {
        auto& gb = b.grad();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t co = 0; co < cout; ++co) {
            T acc = T(0);
            const T* gyp = gy.data() + ((i * cout + co) * ho) * wo;
            for (int64_t s = 0; s < ho * wo; ++s) acc += gyp[s];
            gb[static_cast<size_t>(co)] += acc;
          }
      }
    });
  }
  return y;
}

// Transposed convolution (decoder mirror of a strided conv). Weight layout is
// [Cin, Cout, K, K]; output H = (H-1)*stride - 2*padding + K + output_padding.
template <class T>
Tensor<T> conv_transpose2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b, int stride,
                           int padding, int output_padding = 0) {
  if (x.rank() != 4 || w.rank() != 4) throw DimensionError("conv_transpose2d expects rank-4 tensors");
  int64_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
  if (w.shape()[0] != cin) throw DimensionError("conv_transpose2d: weight/input channel mismatch");
  int64_t cout = w.shape()[1], k = w.shape()[2];
  if (w.shape()[2] != w.shape()[3]) throw DimensionError("conv_transpose2d: only square kernels supported");
  if (output_padding < 0 || output_padding >= stride)
    throw ConfigError("conv_transpose2d: output_padding must be in [0, stride)");
  int64_t ho = (h - 1) * stride - 2 * padding + k + output_padding;
  int64_t wo = (wd - 1) * stride - 2 * padding + k + output_padding;
  if (ho < 1 || wo < 1) throw DimensionError("conv_transpose2d: empty output");
  if (b.defined() && (b.rank() != 1 || b.shape()[0] != cout)) throw DimensionError("conv_transpose2d: bias shape mismatch");
  Tensor<T> y({n, cout, ho, wo});
  const T* xv = x.v().data();
  const T* wv = w.v().data();
  T* yv = y.v().data();
  int64_t tconv_work = n * cout * ho * wo * cin * k * k;
  int64_t grain_nco = (tconv_work > (int64_t{1} << 18)) ? 1 : n * cout + 1;
  parallel_for(n * cout, [&](int64_t lo, int64_t hi) {
    for (int64_t idx = lo; idx < hi; ++idx) {
      int64_t i = idx / cout, co = idx % cout;
      T bias = b.defined() ? b.v()[static_cast<size_t>(co)] : T(0);
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          T acc = bias;
          for (int64_t kh = 0; kh < k; ++kh) {
            int64_t num_h = oh + padding - kh;
            if (num_h < 0 || num_h % stride != 0) continue;
            int64_t ih = num_h / stride;
            if (ih >= h) continue;
            for (int64_t kw = 0; kw < k; ++kw) {
              int64_t num_w = ow + padding - kw;
              if (num_w < 0 || num_w % stride != 0) continue;
              int64_t iw = num_w / stride;
              if (iw >= wd) continue;
              for (int64_t ci = 0; ci < cin; ++ci)
                acc += xv[((i * cin + ci) * h + ih) * wd + iw] * wv[((ci * cout + co) * k + kh) * k + kw];
            }
          }
          yv[((i * cout + co) * ho + oh) * wo + ow] = acc;
        }
    }
  }, grain_nco);
  if (detail::tracking<T>(x, w, b)) {
    y.set_requires_grad(true);
    detail::record<T>([x, w, b, y, n, cin, h, wd, cout, k, ho, wo, stride, padding, tconv_work]() mutable {
      const auto& gy = y.grad();
      int64_t grain_n = (tconv_work > (int64_t{1} << 18)) ? 1 : n + 1;
      int64_t grain_ci = (tconv_work > (int64_t{1} << 18)) ? 1 : cin + 1;
      if (x.requires_grad()) {
        auto& gx = x.grad();
        parallel_for(n, [&](int64_t lo, int64_t hi) {
          for (int64_t i = lo; i < hi; ++i)
            for (int64_t ci = 0; ci < cin; ++ci)
              for (int64_t ih = 0; ih < h; ++ih)
                for (int64_t iw = 0; iw < wd; ++iw) {
                  T acc = T(0);
                  for (int64_t co = 0; co < cout; ++co)
                    for (int64_t kh = 0; kh < k; ++kh) {
                      int64_t oh = ih * stride - padding + kh;
                      if (oh < 0 || oh >= ho) continue;
                      for (int64_t kw = 0; kw < k; ++kw) {
                        int64_t ow = iw * stride - padding + kw;
                        if (ow < 0 || ow >= wo) continue;
                        acc += gy[static_cast<size_t>(((i * cout + co) * ho + oh) * wo + ow)] *
                               w.v()[static_cast<size_t>(((ci * cout + co) * k + kh) * k + kw)];
                      }
                    }
                  gx[static_cast<size_t>(((i * cin + ci) * h + ih) * wd + iw)] += acc;
                }
        }, grain_n);
      }
      if (w.requires_grad()) {
        auto& gw = w.grad();
        parallel_for(cin, [&](int64_t lo, int64_t hi) {
          for (int64_t ci = lo; ci < hi; ++ci)
            for (int64_t co = 0; co < cout; ++co)
              for (int64_t kh = 0; kh < k; ++kh)
                for (int64_t kw = 0; kw < k; ++kw) {
                  T acc = T(0);
                  for (int64_t i = 0; i < n; ++i)
                    for (int64_t ih = 0; ih < h; ++ih) {
                      int64_t oh = ih * stride - padding + kh;
                      if (oh < 0 || oh >= ho) continue;
                      for (int64_t iw = 0; iw < wd; ++iw) {
                        int64_t ow = iw * stride - padding + kw;
                        if (ow < 0 || ow >= wo) continue;
                        acc += x.v()[static_cast<size_t>(((i * cin + ci) * h + ih) * wd + iw)] *
                               gy[static_cast<size_t>(((i * cout + co) * ho + oh) * wo + ow)];
                      }
                    }
                  gw[static_cast<size_t>(((ci * cout + co) * k + kh) * k + kw)] += acc;
                }
        }, grain_ci);
      }
      if (b.defined() && b.requires_grad()) {
        auto& gb = b.grad();
        for (int64_t i = 0; i < n; ++i)
          for (int64_t co = 0; co < cout; ++co) {
            T acc = T(0);
            const T* gyp = gy.data() + ((i * cout + co) * ho) * wo;
            for (int64_t s = 0; s < ho * wo; ++s) acc += gyp[s];
            gb[static_cast<size_t>(co)] += acc;
          }
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// pooling / resampling

enum class PoolKind { max, avg, global_avg };

template <class T>
Tensor<T> pool2d(const Tensor<T>& x, PoolKind kind, int k = 0, int stride = 0) {
  if (x.rank() != 4) throw DimensionError("pool2d expects rank-4 input");
  int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  int64_t ho, wo;
  if (kind == PoolKind::global_avg) {
    // window is the whole plane; k/stride arguments are ignored
    k = static_cast<int>(h);
    stride = 1;
    ho = 1;
    wo = 1;
  } else {
    if (k < 1 || stride < 1) throw ConfigError("pool2d: window and stride must be >= 1");
    if (k > h || k > w) throw DimensionError("pool2d: window larger than input");
    ho = (h - k) / stride + 1;
    wo = (w - k) / stride + 1;
  }
  Tensor<T> y({n, c, ho, wo});
  auto argmax = std::make_shared<std::vector<int64_t>>();
  if (kind == PoolKind::max) argmax->assign(static_cast<size_t>(n * c * ho * wo), 0);
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch) {
      const T* xc = x.v().data() + (i * c + ch) * h * w;
      for (int64_t oh = 0; oh < ho; ++oh)
        for (int64_t ow = 0; ow < wo; ++ow) {
          size_t oidx = static_cast<size_t>(((i * c + ch) * ho + oh) * wo + ow);
          if (kind == PoolKind::max) {
            int64_t best = (oh * stride) * w + ow * stride;
            T bv = xc[best];
            for (int64_t kh = 0; kh < k; ++kh)
              for (int64_t kw = 0; kw < k; ++kw) {
                int64_t idx = (oh * stride + kh) * w + ow * stride + kw;
                if (xc[idx] > bv) {
                  bv = xc[idx];
                  best = idx;
                }
              }
            y.v()[oidx] = bv;
            (*argmax)[oidx] = best;
          } else {
            int64_t kk = (kind == PoolKind::global_avg) ? h : k;
            int64_t kw2 = (kind == PoolKind::global_avg) ? w : k;
            T acc = T(0);
            for (int64_t kh = 0; kh < kk; ++kh)
              for (int64_t kw = 0; kw < kw2; ++kw) acc += xc[(oh * stride + kh) * w + ow * stride + kw];
            y.v()[oidx] = acc / static_cast<T>(kk * kw2);
          }
        }
    }
  if (detail::tracking<T>(x)) {
    y.set_requires_grad(true);
    detail::record<T>([x, y, argmax, kind, n, c, h, w, ho, wo, k, stride]() mutable {
      const auto& gy = y.grad();
      auto& gx = x.grad();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t oh = 0; oh < ho; ++oh)
            for (int64_t ow = 0; ow < wo; ++ow) {
              size_t oidx = static_cast<size_t>(((i * c + ch) * ho + oh) * wo + ow);
              T g = gy[oidx];
              if (kind == PoolKind::max) {
                gx[static_cast<size_t>((i * c + ch) * h * w + (*argmax)[oidx])] += g;
              } else {
                int64_t kk = (kind == PoolKind::global_avg) ? h : k;
                int64_t kw2 = (kind == PoolKind::global_avg) ? w : k;
                T share = g / static_cast<T>(kk * kw2);
                for (int64_t kh = 0; kh < kk; ++kh)
                  for (int64_t kw = 0; kw < kw2; ++kw)
                    gx[static_cast<size_t>((i * c + ch) * h * w + (oh * stride + kh) * w + ow * stride + kw)] += share;
              }
            }
    });
  }
  return y;
}

template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, int64_t ht, int64_t wt) {
  if (x.rank() != 4) throw DimensionError("upsample expects rank-4 input");
  int64_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (ht < h || wt < w) throw DimensionError("upsample target smaller than input");
  Tensor<T> y({n, c, ht, wt});
  for (int64_t i = 0; i < n; ++i)
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t oh = 0; oh < ht; ++oh)
        for (int64_t ow = 0; ow < wt; ++ow)
          y.v()[static_cast<size_t>(((i * c + ch) * ht + oh) * wt + ow)] =
              x.v()[static_cast<size_t>(((i * c + ch) * h + oh * h / ht) * w + ow * w / wt)];
  if (detail::tracking<T>(x)) {
    y.set_requires_grad(true);
    detail::record<T>([x, y, n, c, h, w, ht, wt]() mutable {
      const auto& gy = y.grad();
      auto& gx = x.grad();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t ch = 0; ch < c; ++ch)
          for (int64_t oh = 0; oh < ht; ++oh)
            for (int64_t ow = 0; ow < wt; ++ow)
              gx[static_cast<size_t>(((i * c + ch) * h + oh * h / ht) * w + ow * w / wt)] +=
                  gy[static_cast<size_t>(((i * c + ch) * ht + oh) * wt + ow)];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// normalization / dropout

// Train mode uses batch statistics (biased variance) and updates the running
// buffers in place: run <- (1-momentum)*run + momentum*batch. Eval mode reads
// the buffers. Input is [N,C,H,W] or [N,C].
template <class T>
Tensor<T> batchnorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    Tensor<T>& run_mean, Tensor<T>& run_var, bool training, T momentum = T(0.1),
                    T eps = T(1e-5)) {
  if (x.rank() != 4 && x.rank() != 2) throw DimensionError("batchnorm expects rank-2 or rank-4 input");
  int64_t n = x.shape()[0], c = x.shape()[1];
  int64_t sp = x.rank() == 4 ? x.shape()[2] * x.shape()[3] : 1;
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw DimensionError("batchnorm: affine parameter shape mismatch");
  int64_t m = n * sp;
  Tensor<T> y(x.shape());
  auto mean = std::make_shared<std::vector<T>>(static_cast<size_t>(c), T(0));
  auto var = std::make_shared<std::vector<T>>(static_cast<size_t>(c), T(0));
  auto at = [c, sp](int64_t i, int64_t ch, int64_t s) -> size_t {
    return static_cast<size_t>((i * c + ch) * sp + s);
  };
  if (training) {
    for (int64_t ch = 0; ch < c; ++ch) {
      T mu = T(0);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t s = 0; s < sp; ++s) mu += x.v()[at(i, ch, s)];
      mu /= static_cast<T>(m);
      T vv = T(0);
      for (int64_t i = 0; i < n; ++i)
        for (int64_t s = 0; s < sp; ++s) {
          T d = x.v()[at(i, ch, s)] - mu;
          vv += d * d;
        }
      vv /= static_cast<T>(m);
      (*mean)[static_cast<size_t>(ch)] = mu;
      (*var)[static_cast<size_t>(ch)] = vv;
      run_mean.v()[static_cast<size_t>(ch)] = (T(1) - momentum) * run_mean.v()[static_cast<size_t>(ch)] + momentum * mu;
      run_var.v()[static_cast<size_t>(ch)] = (T(1) - momentum) * run_var.v()[static_cast<size_t>(ch)] + momentum * vv;
    }
  } else {
    *mean = run_mean.v();
    *var = run_var.v();
  }
  for (int64_t ch = 0; ch < c; ++ch) {
    T inv = T(1) / std::sqrt((*var)[static_cast<size_t>(ch)] + eps);
    T g = gamma.v()[static_cast<size_t>(ch)], bt = beta.v()[static_cast<size_t>(ch)];
    T mu = (*mean)[static_cast<size_t>(ch)];
    for (int64_t i = 0; i < n; ++i)
      for (int64_t s = 0; s < sp; ++s) y.v()[at(i, ch, s)] = (x.v()[at(i, ch, s)] - mu) * inv * g + bt;
  }
  if (detail::tracking<T>(x, gamma, beta)) {
    y.set_requires_grad(true);
    detail::record<T>([x, gamma, beta, y, mean, var, training, eps, n, c, sp, m, at]() mutable {
      const auto& gy = y.grad();
      for (int64_t ch = 0; ch < c; ++ch) {
        T mu = (*mean)[static_cast<size_t>(ch)];
        T inv = T(1) / std::sqrt((*var)[static_cast<size_t>(ch)] + eps);
        T g = gamma.v()[static_cast<size_t>(ch)];
        T sum_gy = T(0), sum_gy_xhat = T(0);
        for (int64_t i = 0; i < n; ++i)
          for (int64_t s = 0; s < sp; ++s) {
            T gyv = gy[at(i, ch, s)];
            sum_gy += gyv;
            sum_gy_xhat += gyv * (x.v()[at(i, ch, s)] - mu) * inv;
          }
        if (gamma.requires_grad()) gamma.grad()[static_cast<size_t>(ch)] += sum_gy_xhat;
        if (beta.requires_grad()) beta.grad()[static_cast<size_t>(ch)] += sum_gy;
        if (x.requires_grad()) {
          auto& gx = x.grad();
          if (training) {
            for (int64_t i = 0; i < n; ++i)
              for (int64_t s = 0; s < sp; ++s) {
                T xhat = (x.v()[at(i, ch, s)] - mu) * inv;
                gx[at(i, ch, s)] += g * inv / static_cast<T>(m) *
                                    (static_cast<T>(m) * gy[at(i, ch, s)] - sum_gy - xhat * sum_gy_xhat);
              }
          } else {
            for (int64_t i = 0; i < n; ++i)
              for (int64_t s = 0; s < sp; ++s) gx[at(i, ch, s)] += gy[at(i, ch, s)] * g * inv;
          }
        }
      }
    });
  }
  return y;
}

// Inverted scaling: eval mode is the identity.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, T rate, bool training, std::mt19937_64& rng) {
  if (rate < T(0) || rate >= T(1)) throw ConfigError("dropout rate must be in [0,1)");
  if (!training || rate == T(0)) {
    if (!detail::tracking<T>(x)) return x;
    return scalar_mul(x, T(1));  // keep the tape edge explicit
  }
  auto mask = std::make_shared<std::vector<T>>(x.v().size());
  std::uniform_real_distribution<double> u(0.0, 1.0);
  T keep = T(1) - rate;
  for (auto& mv : *mask) mv = (u(rng) >= static_cast<double>(rate)) ? T(1) / keep : T(0);
  Tensor<T> y(x.shape());
  for (size_t i = 0; i < y.v().size(); ++i) y.v()[i] = x.v()[i] * (*mask)[i];
  if (detail::tracking<T>(x)) {
    y.set_requires_grad(true);
    detail::record<T>([x, y, mask]() mutable {
      const auto& gy = y.grad();
      auto& gx = x.grad();
      for (size_t i = 0; i < gy.size(); ++i) gx[i] += gy[i] * (*mask)[i];
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// losses

template <class T>
Tensor<T> mse_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape())
    throw DimensionError("mse: shape mismatch " + shape_str(pred.shape()) + " vs " + shape_str(target.shape()));
  int64_t n = pred.size();
  T acc = T(0);
  for (int64_t i = 0; i < n; ++i) {
    T d = pred.v()[static_cast<size_t>(i)] - target.v()[static_cast<size_t>(i)];
    acc += d * d;
  }
  Tensor<T> y = Tensor<T>::scalar(acc / static_cast<T>(n));
  if (!std::isfinite(static_cast<double>(y.v()[0]))) throw UsageError("mse produced a non-finite value");
  if (detail::tracking<T>(pred, target)) {
    y.set_requires_grad(true);
    detail::record<T>([pred, target, y, n]() mutable {
      T g = y.grad()[0] * T(2) / static_cast<T>(n);
      if (pred.requires_grad()) {
        auto& gp = pred.grad();
        for (int64_t i = 0; i < n; ++i)
          gp[static_cast<size_t>(i)] += g * (pred.v()[static_cast<size_t>(i)] - target.v()[static_cast<size_t>(i)]);
      }
      if (target.requires_grad()) {
        auto& gt = target.grad();
        for (int64_t i = 0; i < n; ++i)
          gt[static_cast<size_t>(i)] -= g * (pred.v()[static_cast<size_t>(i)] - target.v()[static_cast<size_t>(i)]);
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> cross_entropy_loss(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) throw DimensionError("cross-entropy expects rank-2 logits");
  int64_t n = logits.shape()[0], c = logits.shape()[1];
  if (static_cast<int64_t>(labels.size()) != n) throw DimensionError("cross-entropy: label count mismatch");
  for (int lb : labels)
    if (lb < 0 || lb >= c) throw DataError("cross-entropy: class index " + std::to_string(lb) + " out of range");
  auto probs = std::make_shared<std::vector<T>>(logits.v().size());
  T loss = T(0);
  for (int64_t i = 0; i < n; ++i) {
    const T* row = logits.v().data() + i * c;
    T m = row[0];
    for (int64_t j = 1; j < c; ++j) m = std::max(m, row[j]);
    T z = T(0);
    for (int64_t j = 0; j < c; ++j) {
      (*probs)[static_cast<size_t>(i * c + j)] = std::exp(row[j] - m);
      z += (*probs)[static_cast<size_t>(i * c + j)];
    }
    for (int64_t j = 0; j < c; ++j) (*probs)[static_cast<size_t>(i * c + j)] /= z;
    loss -= std::log((*probs)[static_cast<size_t>(i * c + labels[static_cast<size_t>(i)])]);
  }
  Tensor<T> y = Tensor<T>::scalar(loss / static_cast<T>(n));
  if (!std::isfinite(static_cast<double>(y.v()[0]))) throw UsageError("cross-entropy produced a non-finite value");
  if (detail::tracking<T>(logits)) {
    y.set_requires_grad(true);
    auto lbl = std::make_shared<std::vector<int>>(labels);
    detail::record<T>([logits, y, probs, lbl, n, c]() mutable {
      T g = y.grad()[0] / static_cast<T>(n);
      auto& gl = logits.grad();
      for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < c; ++j) {
          T p = (*probs)[static_cast<size_t>(i * c + j)];
          T onehot = (j == (*lbl)[static_cast<size_t>(i)]) ? T(1) : T(0);
          gl[static_cast<size_t>(i * c + j)] += g * (p - onehot);
        }
    });
  }
  return y;
}

// Stacks scalar tensors into one rank-1 vector (controller logit heads).
template <class T>
Tensor<T> stack_scalars(const std::vector<Tensor<T>>& xs) {
  if (xs.empty()) throw UsageError("stack_scalars needs at least one input");
  Tensor<T> y({static_cast<int64_t>(xs.size())});
  bool track = false;
  for (size_t i = 0; i < xs.size(); ++i) {
    if (xs[i].size() != 1) throw DimensionError("stack_scalars inputs must be scalars");
    y.v()[i] = xs[i].v()[0];
    track = track || detail::track1<T>(xs[i]);
  }
  if (Tape<T>::current() != nullptr && track) {
    y.set_requires_grad(true);
    auto inputs = std::make_shared<std::vector<Tensor<T>>>(xs);
    detail::record<T>([inputs, y]() mutable {
      const auto& gy = y.grad();
      for (size_t i = 0; i < inputs->size(); ++i)
        if ((*inputs)[i].requires_grad()) (*inputs)[i].grad()[0] += gy[i];
    });
  }
  return y;
}

// log pi(a) for one categorical decision; used by the REINFORCE update.
template <class T>
Tensor<T> pick_log_prob(const Tensor<T>& logits, int64_t idx) {
  if (logits.rank() != 1) throw DimensionError("pick_log_prob expects a rank-1 logit vector");
  int64_t c = logits.shape()[0];
  if (idx < 0 || idx >= c) throw UsageError("pick_log_prob: index out of range");
  T m = logits.v()[0];
  for (int64_t j = 1; j < c; ++j) m = std::max(m, logits.v()[static_cast<size_t>(j)]);
  T z = T(0);
  for (int64_t j = 0; j < c; ++j) z += std::exp(logits.v()[static_cast<size_t>(j)] - m);
  T lse = m + std::log(z);
  Tensor<T> y = Tensor<T>::scalar(logits.v()[static_cast<size_t>(idx)] - lse);
  if (detail::tracking<T>(logits)) {
    y.set_requires_grad(true);
    detail::record<T>([logits, y, idx, c, m, lse]() mutable {
      T g = y.grad()[0];
      auto& gl = logits.grad();
      for (int64_t j = 0; j < c; ++j) {
        T p = std::exp(logits.v()[static_cast<size_t>(j)] - lse);
        T onehot = (j == idx) ? T(1) : T(0);
        gl[static_cast<size_t>(j)] += g * (onehot - p);
      }
    });
  }
  return y;
}

// ---------------------------------------------------------------------------
// SSIM, composed from taped primitives so the backward pass comes for free.
// Uniform window, valid placement (no padding), mean over all windows,
// channels averaged. Result is in [-1, 1]; callers clamp for reporting.

template <class T>
Tensor<T> ssim_mean(const Tensor<T>& x, const Tensor<T>& y, int window, T c1, T c2) {
  if (x.shape() != y.shape())
    throw DimensionError("ssim: shape mismatch " + shape_str(x.shape()) + " vs " + shape_str(y.shape()));
  if (x.rank() != 4) throw DimensionError("ssim expects rank-4 image batches");
  if (window < 3 || window % 2 == 0) throw ConfigError("ssim window must be odd and >= 3");
  auto mu_x = pool2d(x, PoolKind::avg, window, 1);
  auto mu_y = pool2d(y, PoolKind::avg, window, 1);
  auto xx = pool2d(mul(x, x), PoolKind::avg, window, 1);
  auto yy = pool2d(mul(y, y), PoolKind::avg, window, 1);
  auto xy = pool2d(mul(x, y), PoolKind::avg, window, 1);
  auto mu_xx = mul(mu_x, mu_x);
  auto mu_yy = mul(mu_y, mu_y);
  auto mu_xy = mul(mu_x, mu_y);
  auto sigma_x = sub(xx, mu_xx);
  auto sigma_y = sub(yy, mu_yy);
  auto sigma_xy = sub(xy, mu_xy);
  auto num = mul(scalar_add(scalar_mul(mu_xy, T(2)), c1), scalar_add(scalar_mul(sigma_xy, T(2)), c2));
  auto den = mul(scalar_add(add(mu_xx, mu_yy), c1), scalar_add(add(sigma_x, sigma_y), c2));
  return mean_all(div_elem(num, den));
}

// ---------------------------------------------------------------------------
// spec-surface dispatchers

enum class ActKind { relu, softmax_rows };
enum class NormKind { batchnorm, dropout };
enum class LossKind { cross_entropy, mse, neg_ssim };

template <class T>
Tensor<T> activation(const Tensor<T>& x, ActKind kind) {
  switch (kind) {
    case ActKind::relu:
      return relu(x);
    case ActKind::softmax_rows:
      return softmax_rows(x);
  }
  throw UsageError("unknown activation kind");
}

// For cross-entropy the target tensor holds per-row class indices; for
// neg_ssim the default 7-window, range-1 constants apply.
template <class T>
Tensor<T> loss(const Tensor<T>& pred, const Tensor<T>& target, LossKind kind) {
  switch (kind) {
    case LossKind::mse:
      return mse_loss(pred, target);
    case LossKind::cross_entropy: {
      if (target.rank() != 1) throw DimensionError("cross-entropy target must be a label vector");
      std::vector<int> labels(target.v().size());
      for (size_t i = 0; i < labels.size(); ++i) {
        T v = target.v()[i];
        if (v != std::floor(v)) throw DataError("cross-entropy target is not an integer class index");
        labels[i] = static_cast<int>(v);
      }
      return cross_entropy_loss(pred, labels);
    }
    case LossKind::neg_ssim:
      return scalar_mul(ssim_mean(pred, target, 7, static_cast<T>(1e-4), static_cast<T>(9e-4)), T(-1));
  }
  throw UsageError("unknown loss kind");
}

template <class T>
Tensor<T> norm_dropout(const Tensor<T>& x, NormKind kind, Tensor<T>& gamma, Tensor<T>& beta,
                       Tensor<T>& run_mean, Tensor<T>& run_var, bool training, T rate,
                       std::mt19937_64& rng) {
  switch (kind) {
    case NormKind::batchnorm:
      return batchnorm(x, gamma, beta, run_mean, run_var, training);
    case NormKind::dropout:
      return dropout(x, rate, training, rng);
  }
  throw UsageError("unknown norm kind");
}

}  // namespace splitnas
