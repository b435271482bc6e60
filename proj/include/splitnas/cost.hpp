#pragma once

#include "splitnas/model.hpp"

namespace splitnas {

// Effective parameter count. Structural zeros (pruning masks, sparse SVD
// factors, fire-layer center masks) do not count; batchnorm contributes its
// affine pair plus running statistics since all of it ships with the layer.
template <class T>
int64_t layer_param_count(const LayerSpec<T>& l) {
  switch (l.kind) {
    case LayerKind::conv:
    case LayerKind::fc:
    case LayerKind::tconv: {
      int64_t w;
      if (!l.weight_mask.empty()) {
        w = 0;
        for (uint8_t m : l.weight_mask) w += m ? 1 : 0;
      } else {
        w = l.weight.defined() ? l.weight.size() : 0;
      }
      return w + (l.bias.defined() ? l.bias.size() : 0);
    }
    case LayerKind::batchnorm:
      return 4 * static_cast<int64_t>(l.cin);
    default:
      return 0;
  }
}

template <class T>
int64_t count_params(const ModelGraph<T>& g, int from = 0, int to = -1) {
  int end = to < 0 ? g.layer_count() : to;
  if (from < 0 || end > g.layer_count() || from > end) throw UsageError("count_params: bad layer span");
  int64_t total = 0;
  for (int i = from; i < end; ++i) total += layer_param_count(g.layers[static_cast<size_t>(i)]);
  return total;
}

// MACs per the conv/fc approximation: K*K*(Cin/groups)*Cout*Hout*Wout for
// convolutions and Cin*Cout for fully-connected layers; every other layer
// kind contributes zero.
template <class T>
int64_t count_macs(ModelGraph<T>& g, int from = 0, int to = -1) {
  if (g.out_shapes.size() != g.layers.size()) validate(g);
  int end = to < 0 ? g.layer_count() : to;
  if (from < 0 || end > g.layer_count() || from > end) throw UsageError("count_macs: bad layer span");
  int64_t total = 0;
  for (int i = from; i < end; ++i) {
    const auto& l = g.layers[static_cast<size_t>(i)];
    if (l.kind == LayerKind::conv) {
      const Shape& out = g.out_shapes[static_cast<size_t>(i)];
      total += static_cast<int64_t>(l.k) * l.k * (l.cin / l.groups) * l.cout * out[1] * out[2];
    } else if (l.kind == LayerKind::fc) {
      total += static_cast<int64_t>(l.in_units) * l.out_units;
    }
  }
  return total;
}

struct PerfIndicators {
  double s1 = 0.0;  // parameter fraction moved off the device
  double s2 = 0.0;  // MAC fraction moved off the device
};

template <class T>
PerfIndicators perf_indicators(ModelGraph<T>& g) {
  if (g.out_shapes.size() != g.layers.size()) validate(g);
  int64_t p_total = count_params(g);
  if (p_total == 0) throw ConfigError("perf indicators undefined for a zero-parameter model");
  int64_t p_enc = count_params(g, 0, g.partition);
  PerfIndicators s;
  s.s1 = 1.0 - static_cast<double>(p_enc) / static_cast<double>(p_total);
  int64_t m_total = count_macs(g);
  if (m_total == 0) throw ConfigError("perf indicators undefined for a zero-MAC model");
  s.s2 = 1.0 - static_cast<double>(count_macs(g, 0, g.partition)) / static_cast<double>(m_total);
  return s;
}

template <class T>
double compression_ratio(const ModelGraph<T>& base, const ModelGraph<T>& compressed) {
  int64_t pb = count_params(base);
  if (pb == 0) throw ConfigError("compression ratio undefined for a zero-parameter base");
  return 1.0 - static_cast<double>(count_params(compressed)) / static_cast<double>(pb);
}

}  // namespace splitnas
