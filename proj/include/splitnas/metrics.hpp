#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include "splitnas/dataset.hpp"
#include "splitnas/model.hpp"

namespace splitnas {

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& truth) {
  if (pred.empty() || pred.size() != truth.size())
    throw UsageError("accuracy needs equal-length, nonempty label vectors");
  size_t wrong = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] != truth[i]) ++wrong;
  return 1.0 - static_cast<double>(wrong) / static_cast<double>(pred.size());
}

// Uniform 7x7 window over [0,1] images by default; constants follow the
// (0.01 L)^2 / (0.03 L)^2 convention.
struct SsimParams {
  int window = 7;
  double c1 = 1e-4;
  double c2 = 9e-4;
  double range = 1.0;

  static SsimParams for_range(double l, int window = 7) {
    SsimParams p;
    p.window = window;
    p.range = l;
    p.c1 = (0.01 * l) * (0.01 * l);
    p.c2 = (0.03 * l) * (0.03 * l);
    return p;
  }
};

inline void check_ssim_params(const SsimParams& p) {
  if (p.window < 3 || p.window % 2 == 0) throw ConfigError("ssim window must be odd and >= 3");
  if (p.c1 <= 0.0 || p.c2 <= 0.0 || p.range <= 0.0) throw ConfigError("ssim constants must be positive");
}

// Raw SSIM of a single image pair; lies in [-1,1].
template <class T>
double ssim(const Tensor<T>& x, const Tensor<T>& y, const SsimParams& p = {}) {
  check_ssim_params(p);
  TapeSuspend<T> off;
  Tensor<T> xb = x, yb = y;
  if (x.rank() == 3) {
    Shape s = {1};
    s.insert(s.end(), x.shape().begin(), x.shape().end());
    xb = reshape(x, s);
    yb = reshape(y, s);
  }
  return static_cast<double>(
      ssim_mean(xb, yb, p.window, static_cast<T>(p.c1), static_cast<T>(p.c2)).item());
}

inline double clamp01(double v) { return std::clamp(v, 0.0, 1.0); }

// P0 = 1 - err/normalizer, clamped into [0,1]. The normalizer is the error
// of the blind mean-image predictor, so "no better than blind" maps to 0.
inline double privacy_p0(double recon_err, double normalizer) {
  if (normalizer <= 0.0) throw DataError("p0 normalizer must be positive");
  if (recon_err < 0.0) throw UsageError("reconstruction error cannot be negative");
  return clamp01(1.0 - recon_err / normalizer);
}

template <class T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw DimensionError("argmax_rows expects rank-2 logits");
  int64_t n = logits.shape()[0], c = logits.shape()[1];
  std::vector<int> out(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    const T* row = logits.v().data() + i * c;
    int best = 0;
    for (int64_t j = 1; j < c; ++j)
      if (row[j] > row[best]) best = static_cast<int>(j);
    out[static_cast<size_t>(i)] = best;
  }
  return out;
}

// Task accuracy of a full composed model over a dataset split.
template <class T>
double model_accuracy(ModelGraph<T>& g, const SyntheticDataset<T>& ds, const std::vector<int>& indices,
                      size_t batch = 64) {
  if (indices.empty()) throw UsageError("accuracy over an empty split");
  std::vector<int> pred;
  pred.reserve(indices.size());
  for (size_t off = 0; off < indices.size(); off += batch) {
    size_t count = std::min(batch, indices.size() - off);
    Tensor<T> x = gather_images(ds, indices, off, count);
    Tensor<T> logits = forward_eval(g, x);
    auto p = argmax_rows(logits);
    pred.insert(pred.end(), p.begin(), p.end());
  }
  return accuracy(pred, gather_labels(ds.coarse, indices, 0, indices.size()));
}

// Mean clamped SSIM between inputs and decoder reconstructions (Eq. 5 shape).
template <class T>
double privacy_p1(ModelGraph<T>& encoder, ModelGraph<T>& decoder, const SyntheticDataset<T>& ds,
                  const std::vector<int>& indices, const SsimParams& p = {}, size_t batch = 64) {
  if (indices.empty()) throw UsageError("p1 over an empty split");
  TapeSuspend<T> off_tape;
  double acc = 0.0;
  size_t total = 0;
  for (size_t off = 0; off < indices.size(); off += batch) {
    size_t count = std::min(batch, indices.size() - off);
    Tensor<T> x = gather_images(ds, indices, off, count);
    Tensor<T> feat = forward_eval(encoder, x);
    Tensor<T> recon = forward_eval(decoder, feat);
    int64_t chw = static_cast<int64_t>(ds.spec.channels) * ds.spec.h * ds.spec.w;
    for (size_t i = 0; i < count; ++i) {
      Shape one = {1, ds.spec.channels, ds.spec.h, ds.spec.w};
      Tensor<T> xi(one), ri(one);
      std::copy_n(x.v().begin() + static_cast<int64_t>(i) * chw, chw, xi.v().begin());
      std::copy_n(recon.v().begin() + static_cast<int64_t>(i) * chw, chw, ri.v().begin());
      acc += clamp01(ssim(xi, ri, p));
      ++total;
    }
  }
  return acc / static_cast<double>(total);
}

// Hidden-attribute inference accuracy (Eq. 7 shape).
template <class T>
double privacy_p2(ModelGraph<T>& encoder, ModelGraph<T>& classifier, const SyntheticDataset<T>& ds,
                  const std::vector<int>& indices, size_t batch = 64) {
  if (indices.empty()) throw UsageError("p2 over an empty split");
  std::vector<int> truth = gather_labels(ds.fine, indices, 0, indices.size());
  bool varied = false;
  for (size_t i = 1; i < truth.size(); ++i)
    if (truth[i] != truth[0]) {
      varied = true;
      break;
    }
  if (!varied) throw DataError("p2 split has a single hidden-attribute class (uninformative)");
  TapeSuspend<T> off_tape;
  std::vector<int> pred;
  pred.reserve(indices.size());
  for (size_t off = 0; off < indices.size(); off += batch) {
    size_t count = std::min(batch, indices.size() - off);
    Tensor<T> x = gather_images(ds, indices, off, count);
    Tensor<T> feat = forward_eval(encoder, x);
    Tensor<T> logits = forward_eval(classifier, feat);
    auto p = argmax_rows(logits);
    pred.insert(pred.end(), p.begin(), p.end());
  }
  return accuracy(pred, truth);
}

// Mean per-sample L2 norm of (reconstruction - input); feeds privacy_p0.
template <class T>
double mean_l2_reconstruction_error(ModelGraph<T>& encoder, ModelGraph<T>& decoder,
                                    const SyntheticDataset<T>& ds, const std::vector<int>& indices,
                                    size_t batch = 64) {
  if (indices.empty()) throw UsageError("reconstruction error over an empty split");
  TapeSuspend<T> off_tape;
  double acc = 0.0;
  int64_t chw = static_cast<int64_t>(ds.spec.channels) * ds.spec.h * ds.spec.w;
  for (size_t off = 0; off < indices.size(); off += batch) {
    size_t count = std::min(batch, indices.size() - off);
    Tensor<T> x = gather_images(ds, indices, off, count);
    Tensor<T> recon = forward_eval(decoder, forward_eval(encoder, x));
    for (size_t i = 0; i < count; ++i) {
      double sq = 0.0;
      for (int64_t j = 0; j < chw; ++j) {
        double d = static_cast<double>(recon.v()[static_cast<size_t>(static_cast<int64_t>(i) * chw + j)]) -
                   static_cast<double>(x.v()[static_cast<size_t>(static_cast<int64_t>(i) * chw + j)]);
        sq += d * d;
      }
      acc += std::sqrt(sq);
    }
  }
  return acc / static_cast<double>(indices.size());
}

// Blind-decoder baseline: L2 error of predicting the aux-split mean image.
template <class T>
double blind_predictor_error(const SyntheticDataset<T>& ds, const std::vector<int>& fit_indices,
                             const std::vector<int>& eval_indices) {
  if (fit_indices.empty() || eval_indices.empty()) throw DataError("blind predictor needs nonempty splits");
  int64_t chw = static_cast<int64_t>(ds.spec.channels) * ds.spec.h * ds.spec.w;
  std::vector<double> mean(static_cast<size_t>(chw), 0.0);
  for (int idx : fit_indices)
    for (int64_t j = 0; j < chw; ++j)
      mean[static_cast<size_t>(j)] += static_cast<double>(ds.images.v()[static_cast<size_t>(idx * chw + j)]);
  for (auto& m : mean) m /= static_cast<double>(fit_indices.size());
  double acc = 0.0;
  for (int idx : eval_indices) {
    double sq = 0.0;
    for (int64_t j = 0; j < chw; ++j) {
      double d = mean[static_cast<size_t>(j)] -
                 static_cast<double>(ds.images.v()[static_cast<size_t>(idx * chw + j)]);
      sq += d * d;
    }
    acc += std::sqrt(sq);
  }
  acc /= static_cast<double>(eval_indices.size());
  if (acc <= 0.0) throw DataError("degenerate data: blind predictor error is zero");
  return acc;
}

// ---------------------------------------------------------------------------
// reward

struct RewardParts {
  double r_a = 0.0, r_p = 0.0, r_s = 0.0, r = 0.0;
};

// R = (A/A_base) * (1 - P) * S(2 - S)
inline RewardParts reward(double a, double a_base, double p, double s) {
  if (a_base <= 0.0) throw ConfigError("reward needs a positive baseline accuracy");
  auto in01 = [](double v, const char* what) {
    if (v < -1e-9 || v > 1.0 + 1e-9) throw UsageError(std::string(what) + " outside [0,1]");
    return clamp01(v);
  };
  p = in01(p, "privacy loss");
  s = in01(s, "performance indicator");
  RewardParts out;
  out.r_a = a / a_base;
  out.r_p = 1.0 - p;
  out.r_s = s * (2.0 - s);
  out.r = out.r_a * out.r_p * out.r_s;
  return out;
}

struct MetricsReport {
  double a = 0.0, a_base = 1.0;
  std::string p_variant = "p1";
  double p = 0.0;
  std::string s_variant = "s1";
  double s = 0.0;
  double cr = 0.0;
  double r_a = 0.0, r_p = 0.0, r_s = 0.0, r = 0.0;

  void fill_reward() {
    RewardParts parts = reward(a, a_base, p, s);
    r_a = parts.r_a;
    r_p = parts.r_p;
    r_s = parts.r_s;
    r = parts.r;
  }
};

inline std::string metrics_csv_header() {
  return "run_id,episode,strategy,A,A_base,P_variant,P,S_variant,S,CR,R_A,R_P,R_S,R,wall_seconds";
}

inline std::string fmt_g(double v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

inline std::string metrics_csv_row(const MetricsReport& m, const std::string& run_id, int episode,
                                   const std::string& strategy, double wall_seconds) {
  std::ostringstream os;
  os << run_id << "," << episode << "," << strategy << "," << fmt_g(m.a) << "," << fmt_g(m.a_base) << ","
     << m.p_variant << "," << fmt_g(m.p) << "," << m.s_variant << "," << fmt_g(m.s) << "," << fmt_g(m.cr)
     << "," << fmt_g(m.r_a) << "," << fmt_g(m.r_p) << "," << fmt_g(m.r_s) << "," << fmt_g(m.r) << ","
     << fmt_g(wall_seconds);
  return os.str();
}

}  // namespace splitnas
