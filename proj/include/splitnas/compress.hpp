#pragma once

#include <Eigen/SVD>
#include <algorithm>
#include <array>
#include <numeric>
#include <string>
#include <vector>

#include "splitnas/cost.hpp"
#include "splitnas/model.hpp"
#include "splitnas/strategy.hpp"

namespace splitnas {

// Knob defaults; the technique table gives structures but no magnitudes.
struct CompressionKnobs {
  int f1_rank_divisor = 4;     // k = max(1, min(m,n) / divisor)
  double f2_sparsity = 0.5;
  int c2_expansion = 2;
  int c3_squeeze_divisor = 4;  // s = max(1, Cin / divisor)
  double w1_fraction = 0.5;
  double w2_fraction = 0.5;
};

struct RewriteReport {
  Technique technique;
  int target_index = -1;
  int64_t params_before = 0;
  int64_t params_after = 0;
  std::string structural_notes;
};

namespace detail {

// Sorts weight positions by (|w|, index) and returns a mask with the
// smallest `count` entries cleared. Deterministic under ties.
template <class T>
std::vector<uint8_t> magnitude_mask(const std::vector<T>& w, int64_t count) {
  std::vector<int64_t> order(w.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    T ma = std::abs(w[static_cast<size_t>(a)]);
    T mb = std::abs(w[static_cast<size_t>(b)]);
    if (ma != mb) return ma < mb;
    return a < b;
  });
  std::vector<uint8_t> mask(w.size(), 1);
  for (int64_t i = 0; i < count && i < static_cast<int64_t>(order.size()); ++i)
    mask[static_cast<size_t>(order[static_cast<size_t>(i)])] = 0;
  return mask;
}

template <class T>
void apply_mask_to_weight(LayerSpec<T>& l, std::vector<uint8_t> mask) {
  auto& w = l.weight.v();
  for (size_t i = 0; i < w.size(); ++i)
    if (!mask[i]) w[i] = T(0);
  l.weight_mask = std::move(mask);
}

// Shifts link indices after replacing the layer at `idx` with `n_new` layers.
inline void shift_links(std::map<int, int>& links, int idx, int n_new) {
  int delta = n_new - 1;
  if (delta == 0) return;
  std::map<int, int> out;
  for (auto [add, src] : links) {
    int nadd = add > idx ? add + delta : add;
    int nsrc = src > idx ? src + delta : (src == idx ? idx + delta : src);
    out[nadd] = nsrc;
  }
  links = std::move(out);
}

template <class T>
void splice(ModelGraph<T>& g, int idx, int n_removed, std::vector<LayerSpec<T>> replacement) {
  shift_links(g.links, idx + n_removed - 1, static_cast<int>(replacement.size()) + 1 - n_removed);
  g.layers.erase(g.layers.begin() + idx, g.layers.begin() + idx + n_removed);
  g.layers.insert(g.layers.begin() + idx, replacement.begin(), replacement.end());
}

template <class T>
const LayerSpec<T>& target_layer(const ModelGraph<T>& g, int idx, const char* what) {
  if (idx < 0 || idx >= g.layer_count())
    throw ConfigError(std::string(what) + ": layer index " + std::to_string(idx) + " out of range");
  return g.layers[static_cast<size_t>(idx)];
}

}  // namespace detail

// True when `idx` is the first fc of the trailing classifier stack sitting on
// top of a spatial activation (the only place the gap rewrite applies).
template <class T>
bool f3_applicable(const ModelGraph<T>& g, int idx) {
  if (idx < 1 || idx >= g.layer_count()) return false;
  if (g.layers[static_cast<size_t>(idx)].kind != LayerKind::fc) return false;
  if (g.layers[static_cast<size_t>(idx - 1)].kind != LayerKind::flatten) return false;
  const Shape& pre = idx - 1 == 0 ? g.input_shape : g.out_shapes[static_cast<size_t>(idx - 2)];
  if (pre.size() != 3) return false;
  for (int j = idx; j < g.layer_count(); ++j) {
    LayerKind k = g.layers[static_cast<size_t>(j)].kind;
    if (k != LayerKind::fc && k != LayerKind::relu && k != LayerKind::dropout &&
        k != LayerKind::batchnorm)
      return false;
  }
  return true;
}

// Per-layer technique applicability: column order follows kAllTechniques
// (F1 F2 F3 C1 C2 C3 W1 W2).
template <class T>
std::vector<std::array<bool, 8>> applicability_mask(const ModelGraph<T>& g) {
  std::vector<std::array<bool, 8>> mask(g.layers.size(), {false, false, false, false, false, false, false, false});
  for (int i = 0; i < g.layer_count(); ++i) {
    const auto& l = g.layers[static_cast<size_t>(i)];
    auto& row = mask[static_cast<size_t>(i)];
    if (l.kind == LayerKind::fc) {
      row[0] = true;  // F1
      row[1] = true;  // F2
      row[2] = f3_applicable(g, i);
      row[6] = true;  // W1
    } else if (l.kind == LayerKind::conv) {
      row[3] = l.k >= 3 && l.groups == 1;          // C1
      row[4] = l.groups == 1;                      // C2
      // the fire rewrite reproduces the spatial map only for same-padded kernels
      row[5] = l.groups == 1 && l.cout % 2 == 0 && 2 * l.padding == l.k - 1;  // C3
      row[6] = true;                               // W1
      row[7] = l.groups == 1;                      // W2
    }
  }
  return mask;
}

inline size_t technique_column(Technique t) {
  for (size_t i = 0; i < kAllTechniques.size(); ++i)
    if (kAllTechniques[i] == t) return i;
  throw UsageError("bad technique");
}

// Codec-side validation against a concrete graph: indices must name
// compressible, technique-applicable layers on the encoder side.
template <class T>
void validate_strategy(const ModelGraph<T>& g, const Strategy& s) {
  if (s.partition < 0 || s.partition > g.layer_count())
    throw ParseError("partition " + std::to_string(s.partition) + " outside 0.." +
                     std::to_string(g.layer_count()));
  if (!partition_is_legal(g, s.partition))
    throw ParseError("partition " + std::to_string(s.partition) + " cuts a residual link");
  auto mask = applicability_mask(g);
  int f3_at = -1;
  for (const auto& [idx, tech] : s.compressions) {
    if (idx < 0 || idx >= g.layer_count())
      throw ParseError("compressed layer index " + std::to_string(idx) + " out of range");
    const auto& l = g.layers[static_cast<size_t>(idx)];
    if (l.kind != LayerKind::conv && l.kind != LayerKind::fc)
      throw ParseError("layer " + std::to_string(idx) + " (" + layer_kind_name(l.kind) +
                       ") is not compressible");
    if (!mask[static_cast<size_t>(idx)][technique_column(tech)])
      throw ParseError(std::string(technique_name(tech)) + " is not applicable to layer " +
                       std::to_string(idx) + " (" + layer_kind_name(l.kind) + ")");
    if (idx >= s.partition)
      throw ParseError("compression at layer " + std::to_string(idx) +
                       " is at or after the partition " + std::to_string(s.partition) +
                       " (only encoder layers are compressed)");
    if (tech == Technique::F3) f3_at = idx;
  }
  if (f3_at >= 0) {
    if (s.partition != g.layer_count())
      throw ParseError("F3 replaces the trailing fc stack and requires the partition at the end");
    if (s.compressions.rbegin()->first != f3_at)
      throw ParseError("no compression may target a layer after an F3 rewrite");
  }
}

// Validating parse: syntax first, then graph-level checks.
template <class T>
Strategy parse_strategy(const std::string& text, const ModelGraph<T>& g) {
  Strategy s = parse_strategy(text);
  validate_strategy(g, s);
  return s;
}

// ---------------------------------------------------------------------------
// F1: truncated SVD of an fc weight into two fc layers (U*sqrt(S), sqrt(S)*V^T)

template <class T>
ModelGraph<T> apply_f1_svd(const ModelGraph<T>& g0, int idx, int k, RewriteReport* report = nullptr) {
  const auto& target = detail::target_layer(g0, idx, "F1");
  if (target.kind != LayerKind::fc) throw StructureError("F1 targets fc layers");
  int m = target.out_units, n = target.in_units;
  if (k < 1 || k > std::min(m, n))
    throw ConfigError("F1 rank " + std::to_string(k) + " outside 1..min(" + std::to_string(m) + "," +
                      std::to_string(n) + ")");
  ModelGraph<T> g = g0.deep_clone();
  auto& l = g.layers[static_cast<size_t>(idx)];
  Eigen::MatrixXd w(m, n);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < n; ++c) w(r, c) = static_cast<double>(l.weight.v()[static_cast<size_t>(r * n + c)]);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(w, Eigen::ComputeThinU | Eigen::ComputeThinV);
  Eigen::MatrixXd u = svd.matrixU().leftCols(k);
  Eigen::MatrixXd v = svd.matrixV().leftCols(k);
  Eigen::VectorXd sqrt_s = svd.singularValues().head(k).array().sqrt();

  LayerSpec<T> first = layer::fc<T>(n, k);
  first.weight = Tensor<T>({k, n}, T(0), true);
  for (int r = 0; r < k; ++r)
    for (int c = 0; c < n; ++c)
      first.weight.v()[static_cast<size_t>(r * n + c)] = static_cast<T>(sqrt_s(r) * v(c, r));

  LayerSpec<T> second = layer::fc<T>(k, m);
  second.weight = Tensor<T>({m, k}, T(0), true);
  for (int r = 0; r < m; ++r)
    for (int c = 0; c < k; ++c)
      second.weight.v()[static_cast<size_t>(r * k + c)] = static_cast<T>(u(r, c) * sqrt_s(c));
  second.bias = l.bias;  // bias kept on the second factor

  int64_t before = layer_param_count(l);
  detail::splice(g, idx, 1, {first, second});
  if (g.partition > idx) ++g.partition;
  validate(g);
  if (report)
    *report = {Technique::F1, idx, before,
               layer_param_count(g.layers[static_cast<size_t>(idx)]) +
                   layer_param_count(g.layers[static_cast<size_t>(idx + 1)]),
               "fc " + std::to_string(m) + "x" + std::to_string(n) + " -> rank " + std::to_string(k)};
  return g;
}

// F2: SVD factors with the smallest-magnitude entries zeroed structurally.
template <class T>
ModelGraph<T> apply_f2_ksvd(const ModelGraph<T>& g0, int idx, int k, double sparsity,
                            RewriteReport* report = nullptr) {
  if (sparsity < 0.0 || sparsity >= 1.0) throw ConfigError("F2 sparsity must be in [0,1)");
  ModelGraph<T> g = apply_f1_svd(g0, idx, k, report);
  for (int j = idx; j < idx + 2; ++j) {
    auto& l = g.layers[static_cast<size_t>(j)];
    int64_t count = static_cast<int64_t>(sparsity * static_cast<double>(l.weight.size()));
    if (count > 0) detail::apply_mask_to_weight(l, detail::magnitude_mask(l.weight.v(), count));
  }
  if (report) {
    report->technique = Technique::F2;
    report->params_after = layer_param_count(g.layers[static_cast<size_t>(idx)]) +
                           layer_param_count(g.layers[static_cast<size_t>(idx + 1)]);
    report->structural_notes += ", sparsity " + std::to_string(sparsity);
  }
  return g;
}

// F3: replaces the trailing flatten+fc stack with global-avg-pool + one fc.
template <class T>
ModelGraph<T> apply_f3_gap(const ModelGraph<T>& g0, int idx, std::mt19937_64& rng,
                           RewriteReport* report = nullptr) {
  const auto& target = detail::target_layer(g0, idx, "F3");
  if (target.kind != LayerKind::fc) throw StructureError("F3 targets fc layers");
  if (!f3_applicable(g0, idx))
    throw StructureError("F3 needs a spatial activation feeding the first fc of the trailing stack");
  int span_start = idx - 1;  // the flatten
  const Shape& pre = span_start == 0 ? g0.input_shape : g0.out_shapes[static_cast<size_t>(span_start - 1)];
  int channels = static_cast<int>(pre[0]);
  int classes = 0;
  for (int j = idx; j < g0.layer_count(); ++j)
    if (g0.layers[static_cast<size_t>(j)].kind == LayerKind::fc)
      classes = g0.layers[static_cast<size_t>(j)].out_units;
  ModelGraph<T> g = g0.deep_clone();
  if (g.partition != g.layer_count() && g.partition > span_start)
    throw StructureError("F3 replaces layers spanning the partition point");
  bool device_resident = g.partition == g.layer_count();
  int64_t before = count_params(g, span_start, g.layer_count());
  LayerSpec<T> head = layer::fc<T>(channels, classes);
  init_layer_params(head, rng);
  detail::splice(g, span_start, g.layer_count() - span_start,
                 {layer::pool<T>(PoolKind::global_avg), layer::flatten<T>(), head});
  if (device_resident) g.partition = g.layer_count();
  validate(g);
  if (report)
    *report = {Technique::F3, idx, before, count_params(g, span_start, g.layer_count()),
               "fc stack -> gap + fc(" + std::to_string(channels) + "->" + std::to_string(classes) + ")"};
  return g;
}

// C1: depthwise separable factorization; weights are re-initialized and the
// candidate is expected to retrain.
template <class T>
ModelGraph<T> apply_c1_depthwise(const ModelGraph<T>& g0, int idx, std::mt19937_64& rng,
                                 RewriteReport* report = nullptr) {
  const auto& target = detail::target_layer(g0, idx, "C1");
  if (target.kind != LayerKind::conv) throw StructureError("C1 targets conv layers");
  if (target.k < 3) throw ConfigError("C1 on a kernel smaller than 3x3 gives no factorization gain");
  if (target.groups != 1) throw StructureError("C1 targets dense convolutions");
  ModelGraph<T> g = g0.deep_clone();
  const auto& l = g.layers[static_cast<size_t>(idx)];
  int64_t before = layer_param_count(l);
  LayerSpec<T> dw = layer::conv<T>(l.k, l.cin, l.cin, l.stride, l.padding, l.cin);
  LayerSpec<T> pw = layer::conv<T>(1, l.cin, l.cout, 1, 0, 1);
  init_layer_params(dw, rng);
  init_layer_params(pw, rng);
  detail::splice(g, idx, 1, {dw, pw});
  if (g.partition > idx) ++g.partition;
  validate(g);
  if (report)
    *report = {Technique::C1, idx, before,
               layer_param_count(g.layers[static_cast<size_t>(idx)]) +
                   layer_param_count(g.layers[static_cast<size_t>(idx + 1)]),
               "conv -> depthwise + pointwise"};
  return g;
}

// C2: inverted residual block (expand 1x1, depthwise KxK, project 1x1) with a
// skip link exactly when the replaced layer preserved its activation shape.
template <class T>
ModelGraph<T> apply_c2_inverted_residual(const ModelGraph<T>& g0, int idx, int expansion,
                                         std::mt19937_64& rng, RewriteReport* report = nullptr) {
  const auto& target = detail::target_layer(g0, idx, "C2");
  if (target.kind != LayerKind::conv) throw StructureError("C2 targets conv layers");
  if (target.groups != 1) throw StructureError("C2 targets dense convolutions");
  if (expansion < 1) throw ConfigError("C2 expansion factor must be >= 1");
  ModelGraph<T> g = g0.deep_clone();
  if (g.out_shapes.size() != g.layers.size()) validate(g);
  const auto& l = g.layers[static_cast<size_t>(idx)];
  int64_t before = layer_param_count(l);
  const Shape& in_shape = idx == 0 ? g.input_shape : g.out_shapes[static_cast<size_t>(idx - 1)];
  const Shape& out_shape = g.out_shapes[static_cast<size_t>(idx)];
  bool with_link = in_shape == out_shape;
  int mid = expansion * l.cin;
  LayerSpec<T> expand = layer::conv<T>(1, l.cin, mid, 1, 0, 1);
  LayerSpec<T> dw = layer::conv<T>(l.k, mid, mid, l.stride, l.padding, mid);
  LayerSpec<T> project = layer::conv<T>(1, mid, l.cout, 1, 0, 1);
  init_layer_params(expand, rng);
  init_layer_params(dw, rng);
  init_layer_params(project, rng);
  std::vector<LayerSpec<T>> block = {expand, dw, project};
  if (with_link) block.push_back(layer::residual_add<T>());
  detail::splice(g, idx, 1, block);
  if (with_link) g.links[idx + 3] = idx - 1;  // -1 means the graph input
  if (g.partition > idx) g.partition += static_cast<int>(block.size()) - 1;
  validate(g);
  if (report) {
    int64_t after = 0;
    for (size_t j = static_cast<size_t>(idx); j < static_cast<size_t>(idx) + block.size(); ++j)
      after += layer_param_count(g.layers[j]);
    *report = {Technique::C2, idx, before, after,
               with_link ? "inverted residual with skip" : "inverted residual, no skip (shape change)"};
  }
  return g;
}

// C3: fire layer. The parallel 1x1/3x3 expand branches are expressed as one
// 3x3 conv whose first Cout/2 filters are structurally masked to their center
// tap, which is arithmetically identical to a concatenated 1x1 branch.
template <class T>
ModelGraph<T> apply_c3_fire(const ModelGraph<T>& g0, int idx, int squeeze, std::mt19937_64& rng,
                            RewriteReport* report = nullptr) {
  const auto& target = detail::target_layer(g0, idx, "C3");
  if (target.kind != LayerKind::conv) throw StructureError("C3 targets conv layers");
  if (target.groups != 1) throw StructureError("C3 targets dense convolutions");
  if (target.cout % 2 != 0)
    throw ConfigError("C3 needs an even output channel count to split the expand branches");
  if (squeeze < 1) throw ConfigError("C3 squeeze width must be >= 1");
  ModelGraph<T> g = g0.deep_clone();
  const auto& l = g.layers[static_cast<size_t>(idx)];
  int64_t before = layer_param_count(l);
  LayerSpec<T> sq = layer::conv<T>(1, l.cin, squeeze, l.stride, 0, 1);
  LayerSpec<T> expand = layer::conv<T>(3, squeeze, l.cout, 1, 1, 1);
  init_layer_params(sq, rng);
  init_layer_params(expand, rng);
  // center-tap mask over the 1x1 half
  std::vector<uint8_t> mask(static_cast<size_t>(expand.weight.size()), 1);
  int half = l.cout / 2;
  for (int f = 0; f < half; ++f)
    for (int c = 0; c < squeeze; ++c)
      for (int kh = 0; kh < 3; ++kh)
        for (int kw = 0; kw < 3; ++kw)
          if (kh != 1 || kw != 1) mask[static_cast<size_t>(((f * squeeze + c) * 3 + kh) * 3 + kw)] = 0;
  detail::apply_mask_to_weight(expand, std::move(mask));
  detail::splice(g, idx, 1, {sq, expand});
  if (g.partition > idx) ++g.partition;
  validate(g);
  if (report)
    *report = {Technique::C3, idx, before,
               layer_param_count(g.layers[static_cast<size_t>(idx)]) +
                   layer_param_count(g.layers[static_cast<size_t>(idx + 1)]),
               "conv -> fire(squeeze " + std::to_string(squeeze) + ")"};
  return g;
}

// W1: non-structured magnitude pruning with a persistent mask.
template <class T>
ModelGraph<T> apply_w1_prune(const ModelGraph<T>& g0, int idx, double fraction,
                             RewriteReport* report = nullptr) {
  const auto& target = detail::target_layer(g0, idx, "W1");
  if (target.kind != LayerKind::conv && target.kind != LayerKind::fc)
    throw StructureError("W1 targets conv or fc layers");
  if (fraction < 0.0 || fraction >= 1.0) throw ConfigError("W1 fraction must be in [0,1)");
  ModelGraph<T> g = g0.deep_clone();
  auto& l = g.layers[static_cast<size_t>(idx)];
  int64_t before = layer_param_count(l);
  int64_t count = static_cast<int64_t>(fraction * static_cast<double>(l.weight.size()));
  if (count > 0) detail::apply_mask_to_weight(l, detail::magnitude_mask(l.weight.v(), count));
  validate(g);
  if (report)
    *report = {Technique::W1, idx, before, layer_param_count(l),
               "pruned " + std::to_string(count) + " of " + std::to_string(l.weight.size()) + " weights"};
  return g;
}

// W2: structured filter pruning; the consumer layer shrinks consistently.
template <class T>
ModelGraph<T> apply_w2_filter_prune(const ModelGraph<T>& g0, int idx, double fraction,
                                    RewriteReport* report = nullptr) {
  const auto& target = detail::target_layer(g0, idx, "W2");
  if (target.kind != LayerKind::conv) throw StructureError("W2 targets conv layers");
  if (target.groups != 1) throw StructureError("W2 targets dense convolutions");
  if (fraction < 0.0 || fraction >= 1.0) throw ConfigError("W2 fraction must be in [0,1)");
  ModelGraph<T> g = g0.deep_clone();
  if (g.out_shapes.size() != g.layers.size()) validate(g);
  auto& l = g.layers[static_cast<size_t>(idx)];
  int64_t before = layer_param_count(l);
  int f_all = l.cout;
  int drop = static_cast<int>(fraction * f_all);
  int keep = f_all - drop;
  if (keep < 1) throw ConfigError("W2 would prune every filter");
  if (drop == 0) {
    if (report) *report = {Technique::W2, idx, before, before, "fraction too small, structural identity"};
    return g;
  }
  int64_t per_filter = static_cast<int64_t>(l.cin) * l.k * l.k;
  std::vector<std::pair<T, int>> norms(static_cast<size_t>(f_all));
  for (int f = 0; f < f_all; ++f) {
    T acc = T(0);
    for (int64_t j = 0; j < per_filter; ++j) acc += std::abs(l.weight.v()[static_cast<size_t>(f * per_filter + j)]);
    norms[static_cast<size_t>(f)] = {acc, f};
  }
  std::stable_sort(norms.begin(), norms.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second < b.second;
  });
  std::vector<uint8_t> survives(static_cast<size_t>(f_all), 1);
  for (int i = 0; i < drop; ++i) survives[static_cast<size_t>(norms[static_cast<size_t>(i)].second)] = 0;
  std::vector<int> kept;
  for (int f = 0; f < f_all; ++f)
    if (survives[static_cast<size_t>(f)]) kept.push_back(f);

  Tensor<T> new_w({keep, l.cin, l.k, l.k}, T(0), true);
  Tensor<T> new_b({keep}, T(0), true);
  for (int f = 0; f < keep; ++f) {
    int src = kept[static_cast<size_t>(f)];
    std::copy_n(l.weight.v().begin() + src * per_filter, per_filter,
                new_w.v().begin() + f * per_filter);
    new_b.v()[static_cast<size_t>(f)] = l.bias.v()[static_cast<size_t>(src)];
  }
  l.weight = new_w;
  l.bias = new_b;
  l.cout = keep;
  l.weight_mask.clear();

  // propagate the channel shrink to the consumer
  int64_t h_spatial = 1, w_spatial = 1;
  bool resolved = false;
  for (int j = idx + 1; j < g.layer_count() && !resolved; ++j) {
    auto& dn = g.layers[static_cast<size_t>(j)];
    switch (dn.kind) {
      case LayerKind::relu:
      case LayerKind::sigmoid:
      case LayerKind::dropout:
      case LayerKind::pool:
      case LayerKind::upsample:
        break;
      case LayerKind::batchnorm: {
        auto slice1 = [&](Tensor<T>& t, bool req) {
          Tensor<T> nt({keep}, T(0), req);
          for (int f = 0; f < keep; ++f)
            nt.v()[static_cast<size_t>(f)] = t.v()[static_cast<size_t>(kept[static_cast<size_t>(f)])];
          t = nt;
        };
        slice1(dn.gamma, true);
        slice1(dn.beta, true);
        slice1(dn.run_mean, false);
        slice1(dn.run_var, false);
        dn.cin = dn.cout = keep;
        break;
      }
      case LayerKind::conv: {
        if (dn.groups != 1) throw StructureError("W2 cannot shrink into a grouped consumer conv");
        int64_t kk = static_cast<int64_t>(dn.k) * dn.k;
        Tensor<T> w2({dn.cout, keep, dn.k, dn.k}, T(0), true);
        std::vector<uint8_t> m2;
        bool has_mask = !dn.weight_mask.empty();
        if (has_mask) m2.assign(static_cast<size_t>(dn.cout) * keep * kk, 1);
        for (int o = 0; o < dn.cout; ++o)
          for (int f = 0; f < keep; ++f) {
            int src = kept[static_cast<size_t>(f)];
            for (int64_t t2 = 0; t2 < kk; ++t2) {
              w2.v()[static_cast<size_t>((o * keep + f) * kk + t2)] =
                  dn.weight.v()[static_cast<size_t>((o * dn.cin + src) * kk + t2)];
              if (has_mask)
                m2[static_cast<size_t>((o * keep + f) * kk + t2)] =
                    dn.weight_mask[static_cast<size_t>((o * dn.cin + src) * kk + t2)];
            }
          }
        dn.weight = w2;
        dn.weight_mask = m2;
        dn.cin = keep;
        resolved = true;
        break;
      }
      case LayerKind::flatten: {
        const Shape& fin = g.out_shapes[static_cast<size_t>(j - 1)];
        h_spatial = fin[1];
        w_spatial = fin[2];
        break;
      }
      case LayerKind::fc: {
        // consumes the flattened [C,H,W] block channel-major
        int64_t hw = h_spatial * w_spatial;
        if (dn.in_units != f_all * hw)
          throw StructureError("W2: fc consumer layout does not match the pruned channels");
        int64_t new_in = keep * hw;
        Tensor<T> w2({dn.out_units, new_in}, T(0), true);
        std::vector<uint8_t> m2;
        bool has_mask = !dn.weight_mask.empty();
        if (has_mask) m2.assign(static_cast<size_t>(dn.out_units) * new_in, 1);
        for (int o = 0; o < dn.out_units; ++o)
          for (int f = 0; f < keep; ++f) {
            int src = kept[static_cast<size_t>(f)];
            for (int64_t s2 = 0; s2 < hw; ++s2) {
              w2.v()[static_cast<size_t>(o * new_in + f * hw + s2)] =
                  dn.weight.v()[static_cast<size_t>(o * dn.in_units + src * hw + s2)];
              if (has_mask)
                m2[static_cast<size_t>(o * new_in + f * hw + s2)] =
                    dn.weight_mask[static_cast<size_t>(o * dn.in_units + src * hw + s2)];
            }
          }
        dn.weight = w2;
        dn.weight_mask = m2;
        dn.in_units = static_cast<int>(new_in);
        resolved = true;
        break;
      }
      case LayerKind::residual_add:
        throw StructureError("W2 at layer " + std::to_string(idx) +
                             " would break a residual junction downstream");
      default:
        throw StructureError("W2 cannot propagate the channel shrink past layer " + std::to_string(j));
    }
  }
  if (!resolved)
    throw StructureError("W2 at layer " + std::to_string(idx) + " has no downstream consumer to shrink");
  validate(g);
  if (report)
    *report = {Technique::W2, idx, before, layer_param_count(g.layers[static_cast<size_t>(idx)]),
               "kept " + std::to_string(keep) + " of " + std::to_string(f_all) + " filters"};
  return g;
}

// ---------------------------------------------------------------------------
// strategy application: rewrites in ascending base index, then the partition
// is mapped into the rewritten graph's numbering. Any sub-rewrite error
// aborts the whole application.

template <class T>
ModelGraph<T> apply_strategy(const ModelGraph<T>& g0, const Strategy& s, const CompressionKnobs& knobs,
                             std::mt19937_64& rng, std::vector<RewriteReport>* reports = nullptr) {
  validate_strategy(g0, s);
  ModelGraph<T> g = g0.deep_clone();
  if (g.out_shapes.size() != g.layers.size()) validate(g);
  int partition = s.partition;
  bool f3_applied = false;
  for (const auto& [base_idx, tech] : s.compressions) {
    int cur = base_idx + (partition - s.partition);  // all prior deltas happened below base_idx
    RewriteReport rep;
    int before_len = g.layer_count();
    switch (tech) {
      case Technique::F1: {
        const auto& l = detail::target_layer(g, cur, "F1");
        int k = std::max(1, std::min(l.out_units, l.in_units) / knobs.f1_rank_divisor);
        g = apply_f1_svd(g, cur, k, &rep);
        break;
      }
      case Technique::F2: {
        const auto& l = detail::target_layer(g, cur, "F2");
        int k = std::max(1, std::min(l.out_units, l.in_units) / knobs.f1_rank_divisor);
        g = apply_f2_ksvd(g, cur, k, knobs.f2_sparsity, &rep);
        break;
      }
      case Technique::F3:
        g = apply_f3_gap(g, cur, rng, &rep);
        f3_applied = true;
        break;
      case Technique::C1:
        g = apply_c1_depthwise(g, cur, rng, &rep);
        break;
      case Technique::C2:
        g = apply_c2_inverted_residual(g, cur, knobs.c2_expansion, rng, &rep);
        break;
      case Technique::C3: {
        const auto& l = detail::target_layer(g, cur, "C3");
        int sq = std::max(1, l.cin / knobs.c3_squeeze_divisor);
        g = apply_c3_fire(g, cur, sq, rng, &rep);
        break;
      }
      case Technique::W1:
        g = apply_w1_prune(g, cur, knobs.w1_fraction, &rep);
        break;
      case Technique::W2:
        g = apply_w2_filter_prune(g, cur, knobs.w2_fraction, &rep);
        break;
    }
    partition += g.layer_count() - before_len;
    if (reports) reports->push_back(rep);
  }
  g.partition = f3_applied ? g.layer_count() : partition;
  validate(g);
  if (!partition_is_legal(g, g.partition))
    throw StructureError("strategy " + to_string(s) + " leaves an illegal partition");
  return g;
}

}  // namespace splitnas
