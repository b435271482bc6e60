#pragma once

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "splitnas/ops.hpp"
#include "splitnas/tensor.hpp"

namespace splitnas {

// The searchable model space uses conv..residual_add. The trailing kinds
// (tconv, upsample, unflatten, sigmoid) only appear in adversary decoders
// built as structural mirrors; they are never compression targets.
enum class LayerKind {
  conv,
  fc,
  relu,
  pool,
  batchnorm,
  dropout,
  flatten,
  residual_add,
  tconv,
  upsample,
  unflatten,
  sigmoid
};

inline const char* layer_kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::conv: return "conv";
    case LayerKind::fc: return "fc";
    case LayerKind::relu: return "relu";
    case LayerKind::pool: return "pool";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
    case LayerKind::residual_add: return "residual-add";
    case LayerKind::tconv: return "tconv";
    case LayerKind::upsample: return "upsample";
    case LayerKind::unflatten: return "unflatten";
    case LayerKind::sigmoid: return "sigmoid";
  }
  return "?";
}

inline LayerKind layer_kind_from_name(const std::string& s) {
  for (LayerKind k : {LayerKind::conv, LayerKind::fc, LayerKind::relu, LayerKind::pool,
                      LayerKind::batchnorm, LayerKind::dropout, LayerKind::flatten,
                      LayerKind::residual_add, LayerKind::tconv, LayerKind::upsample,
                      LayerKind::unflatten, LayerKind::sigmoid})
    if (s == layer_kind_name(k)) return k;
  throw ConfigError("unknown layer kind '" + s + "'");
}

template <class T>
struct LayerSpec {
  int index = -1;
  LayerKind kind = LayerKind::relu;

  // conv / tconv / fc hyperparameters
  int k = 0, cin = 0, cout = 0, stride = 1, padding = 0, groups = 1, output_padding = 0;
  int in_units = 0, out_units = 0;

  // pool
  PoolKind pool = PoolKind::max;
  int pk = 0, pstride = 0;

  // upsample / unflatten targets
  int64_t up_h = 0, up_w = 0;
  Shape unflat;

  double rate = 0.0;  // dropout

  // parameters (defined only for the kinds that own them)
  Tensor<T> weight, bias;
  Tensor<T> gamma, beta, run_mean, run_var;

  // structural zeros for W1 / F2 / C3; same length as weight when present.
  // Masked entries stay zero through retraining and never count as params.
  std::vector<uint8_t> weight_mask;

  // indices of in-place ops (relu/batchnorm/dropout) fused to this unit
  std::vector<int> attached_inplace;

  bool has_weights() const {
    return kind == LayerKind::conv || kind == LayerKind::fc || kind == LayerKind::tconv;
  }
};

template <class T>
struct ModelGraph {
  std::vector<LayerSpec<T>> layers;
  // residual links: add-layer index -> source layer index (-1 = graph input);
  // the source layer's output is added to the running activation.
  std::map<int, int> links;
  Shape input_shape;  // per-sample {C,H,W}
  int partition = 0;  // layers [0, partition) run on the device
  std::vector<Shape> out_shapes;  // filled by validate()

  int layer_count() const { return static_cast<int>(layers.size()); }

  ModelGraph deep_clone() const {
    ModelGraph g = *this;
    for (auto& l : g.layers) {
      if (l.weight.defined()) l.weight = l.weight.clone();
      if (l.bias.defined()) l.bias = l.bias.clone();
      if (l.gamma.defined()) l.gamma = l.gamma.clone();
      if (l.beta.defined()) l.beta = l.beta.clone();
      if (l.run_mean.defined()) l.run_mean = l.run_mean.clone();
      if (l.run_var.defined()) l.run_var = l.run_var.clone();
    }
    return g;
  }
};

// ---------------------------------------------------------------------------
// construction helpers

namespace layer {

template <class T>
LayerSpec<T> conv(int k, int cin, int cout, int stride = 1, int padding = 0, int groups = 1) {
  LayerSpec<T> l;
  l.kind = LayerKind::conv;
  l.k = k;
  l.cin = cin;
  l.cout = cout;
  l.stride = stride;
  l.padding = padding;
  l.groups = groups;
  return l;
}

template <class T>
LayerSpec<T> tconv(int k, int cin, int cout, int stride = 1, int padding = 0, int output_padding = 0) {
  LayerSpec<T> l;
  l.kind = LayerKind::tconv;
  l.k = k;
  l.cin = cin;
  l.cout = cout;
  l.stride = stride;
  l.padding = padding;
  l.output_padding = output_padding;
  return l;
}

template <class T>
LayerSpec<T> fc(int in_units, int out_units) {
  LayerSpec<T> l;
  l.kind = LayerKind::fc;
  l.in_units = in_units;
  l.out_units = out_units;
  return l;
}

template <class T>
LayerSpec<T> relu() {
  LayerSpec<T> l;
  l.kind = LayerKind::relu;
  return l;
}

template <class T>
LayerSpec<T> sigmoid() {
  LayerSpec<T> l;
  l.kind = LayerKind::sigmoid;
  return l;
}

template <class T>
LayerSpec<T> pool(PoolKind kind, int k = 0, int stride = 0) {
  LayerSpec<T> l;
  l.kind = LayerKind::pool;
  l.pool = kind;
  l.pk = k;
  l.pstride = stride;
  return l;
}

template <class T>
LayerSpec<T> batchnorm(int channels) {
  LayerSpec<T> l;
  l.kind = LayerKind::batchnorm;
  l.cin = channels;
  l.cout = channels;
  return l;
}

template <class T>
LayerSpec<T> dropout(double rate) {
  LayerSpec<T> l;
  l.kind = LayerKind::dropout;
  l.rate = rate;
  return l;
}

template <class T>
LayerSpec<T> flatten() {
  LayerSpec<T> l;
  l.kind = LayerKind::flatten;
  return l;
}

template <class T>
LayerSpec<T> residual_add() {
  LayerSpec<T> l;
  l.kind = LayerKind::residual_add;
  return l;
}

template <class T>
LayerSpec<T> upsample(int64_t h, int64_t w) {
  LayerSpec<T> l;
  l.kind = LayerKind::upsample;
  l.up_h = h;
  l.up_w = w;
  return l;
}

template <class T>
LayerSpec<T> unflatten(Shape target) {
  LayerSpec<T> l;
  l.kind = LayerKind::unflatten;
  l.unflat = std::move(target);
  return l;
}

}  // namespace layer

// He-style fan-in scaled uniform init for one layer; batchnorm gets identity
// affine and unit running variance.
template <class T>
void init_layer_params(LayerSpec<T>& l, std::mt19937_64& rng) {
  auto uniform = [&rng](Shape shape, double limit) {
    return Tensor<T>::rand_uniform(std::move(shape), static_cast<T>(-limit), static_cast<T>(limit),
                                   rng, true);
  };
  switch (l.kind) {
    case LayerKind::conv: {
      double fan_in = static_cast<double>(l.cin / l.groups) * l.k * l.k;
      double limit = std::sqrt(6.0 / fan_in);
      l.weight = uniform({l.cout, l.cin / l.groups, l.k, l.k}, limit);
      l.bias = uniform({l.cout}, 1.0 / std::sqrt(fan_in));
      break;
    }
    case LayerKind::tconv: {
      double fan_in = static_cast<double>(l.cin) * l.k * l.k;
      double limit = std::sqrt(6.0 / fan_in);
      l.weight = uniform({l.cin, l.cout, l.k, l.k}, limit);
      l.bias = uniform({l.cout}, 1.0 / std::sqrt(fan_in));
      break;
    }
    case LayerKind::fc: {
      double fan_in = static_cast<double>(l.in_units);
      double limit = std::sqrt(6.0 / fan_in);
      l.weight = uniform({l.out_units, l.in_units}, limit);
      l.bias = uniform({l.out_units}, 1.0 / std::sqrt(fan_in));
      break;
    }
    case LayerKind::batchnorm: {
      l.gamma = Tensor<T>(Shape{l.cin}, T(1), true);
      l.beta = Tensor<T>(Shape{l.cin}, T(0), true);
      l.run_mean = Tensor<T>(Shape{l.cin}, T(0));
      l.run_var = Tensor<T>(Shape{l.cin}, T(1));
      break;
    }
    default:
      break;
  }
}

template <class T>
void apply_weight_masks(ModelGraph<T>& g) {
  for (auto& l : g.layers) {
    if (l.weight_mask.empty() || !l.weight.defined()) continue;
    auto& w = l.weight.v();
    for (size_t i = 0; i < w.size(); ++i)
      if (!l.weight_mask[i]) w[i] = T(0);
  }
}

// Shape propagation + structural checks. Fills out_shapes and the
// attached_inplace lists. Throws ConfigError when shapes do not compose.
template <class T>
void validate(ModelGraph<T>& g) {
  // {C,H,W} images or {F} flat features (split tails, attack heads)
  if (g.input_shape.size() != 3 && g.input_shape.size() != 1)
    throw ConfigError("model input shape must be {C,H,W} or {F}, got " + shape_str(g.input_shape));
  if (g.partition < 0 || g.partition > g.layer_count())
    throw ConfigError("partition index " + std::to_string(g.partition) + " outside 0.." +
                      std::to_string(g.layer_count()));
  g.out_shapes.assign(g.layers.size(), {});
  Shape cur = g.input_shape;
  for (size_t i = 0; i < g.layers.size(); ++i) {
    auto& l = g.layers[i];
    l.index = static_cast<int>(i);
    auto expect_spatial = [&](const char* what) {
      if (cur.size() != 3)
        throw ConfigError(std::string(what) + " at layer " + std::to_string(i) +
                          " expects a C,H,W activation, got " + shape_str(cur));
    };
    switch (l.kind) {
      case LayerKind::conv: {
        expect_spatial("conv");
        if (cur[0] != l.cin)
          throw ConfigError("conv at layer " + std::to_string(i) + ": expects " +
                            std::to_string(l.cin) + " channels, got " + std::to_string(cur[0]));
        if (l.groups < 1 || l.cin % l.groups != 0 || l.cout % l.groups != 0)
          throw ConfigError("conv at layer " + std::to_string(i) + ": groups must divide channels");
        int64_t ho = (cur[1] + 2 * l.padding - l.k) / l.stride + 1;
        int64_t wo = (cur[2] + 2 * l.padding - l.k) / l.stride + 1;
        if (l.k > cur[1] + 2 * l.padding || l.k > cur[2] + 2 * l.padding || ho < 1 || wo < 1)
          throw ConfigError("conv at layer " + std::to_string(i) + ": kernel does not fit input " +
                            shape_str(cur));
        cur = {l.cout, ho, wo};
        break;
      }
      case LayerKind::tconv: {
        expect_spatial("tconv");
        if (cur[0] != l.cin)
          throw ConfigError("tconv at layer " + std::to_string(i) + ": channel mismatch");
        int64_t ho = (cur[1] - 1) * l.stride - 2 * l.padding + l.k + l.output_padding;
        int64_t wo = (cur[2] - 1) * l.stride - 2 * l.padding + l.k + l.output_padding;
        if (ho < 1 || wo < 1) throw ConfigError("tconv at layer " + std::to_string(i) + ": empty output");
        cur = {l.cout, ho, wo};
        break;
      }
      case LayerKind::fc: {
        if (cur.size() != 1)
          throw ConfigError("fc at layer " + std::to_string(i) +
                            " expects a flat activation (add an explicit flatten), got " + shape_str(cur));
        if (cur[0] != l.in_units)
          throw ConfigError("fc at layer " + std::to_string(i) + ": expects " +
                            std::to_string(l.in_units) + " inputs, got " + std::to_string(cur[0]));
        cur = {l.out_units};
        break;
      }
      case LayerKind::relu:
      case LayerKind::sigmoid:
      case LayerKind::dropout:
        if (l.kind == LayerKind::dropout && (l.rate < 0.0 || l.rate >= 1.0))
          throw ConfigError("dropout rate must be in [0,1)");
        break;
      case LayerKind::pool: {
        expect_spatial("pool");
        if (l.pool == PoolKind::global_avg) {
          cur = {cur[0], 1, 1};
        } else {
          if (l.pk < 1 || l.pstride < 1)
            throw ConfigError("pool at layer " + std::to_string(i) + ": window/stride must be >= 1");
          if (l.pk > cur[1] || l.pk > cur[2])
            throw ConfigError("pool at layer " + std::to_string(i) + ": window larger than input " +
                              shape_str(cur));
          cur = {cur[0], (cur[1] - l.pk) / l.pstride + 1, (cur[2] - l.pk) / l.pstride + 1};
        }
        break;
      }
      case LayerKind::batchnorm: {
        if (cur.empty()) throw ConfigError("batchnorm needs a channel dimension");
        if (cur[0] != l.cin)
          throw ConfigError("batchnorm at layer " + std::to_string(i) + ": channel mismatch, expects " +
                            std::to_string(l.cin) + " got " + std::to_string(cur[0]));
        break;
      }
      case LayerKind::flatten: {
        cur = {numel(cur)};
        break;
      }
      case LayerKind::unflatten: {
        if (numel(cur) != numel(l.unflat))
          throw ConfigError("unflatten at layer " + std::to_string(i) + ": element count mismatch");
        cur = l.unflat;
        break;
      }
      case LayerKind::upsample: {
        expect_spatial("upsample");
        if (l.up_h < cur[1] || l.up_w < cur[2])
          throw ConfigError("upsample at layer " + std::to_string(i) + ": target smaller than input");
        cur = {cur[0], l.up_h, l.up_w};
        break;
      }
      case LayerKind::residual_add: {
        auto it = g.links.find(static_cast<int>(i));
        if (it == g.links.end())
          throw StructureError("residual-add at layer " + std::to_string(i) + " has no link source");
        int src = it->second;
        if (src < -1 || src >= static_cast<int>(i))
          throw StructureError("residual link source " + std::to_string(src) + " invalid for layer " +
                               std::to_string(i));
        const Shape& src_shape = src == -1 ? g.input_shape : g.out_shapes[static_cast<size_t>(src)];
        if (src_shape != cur)
          throw ConfigError("residual-add at layer " + std::to_string(i) + ": source shape " +
                            shape_str(src_shape) + " does not match activation " + shape_str(cur));
        break;
      }
    }
    g.out_shapes[i] = cur;
  }
  for (const auto& [add_idx, src] : g.links) {
    if (add_idx < 0 || add_idx >= g.layer_count() ||
        g.layers[static_cast<size_t>(add_idx)].kind != LayerKind::residual_add)
      throw StructureError("link target " + std::to_string(add_idx) + " is not a residual-add layer");
    (void)src;
  }
  // fused-unit bookkeeping: in-place ops directly following a conv/fc
  for (auto& l : g.layers) l.attached_inplace.clear();
  for (size_t i = 0; i < g.layers.size(); ++i) {
    if (!g.layers[i].has_weights() && g.layers[i].kind != LayerKind::fc) continue;
    for (size_t j = i + 1; j < g.layers.size(); ++j) {
      LayerKind k = g.layers[j].kind;
      if (k == LayerKind::relu || k == LayerKind::batchnorm || k == LayerKind::dropout)
        g.layers[i].attached_inplace.push_back(static_cast<int>(j));
      else
        break;
    }
  }
}

template <class T>
ModelGraph<T> make_graph(Shape input_shape, std::vector<LayerSpec<T>> layers,
                         std::map<int, int> links, std::mt19937_64& rng) {
  if (layers.empty()) throw ConfigError("model needs at least one layer");
  ModelGraph<T> g;
  g.input_shape = std::move(input_shape);
  g.layers = std::move(layers);
  g.links = std::move(links);
  validate(g);
  for (auto& l : g.layers) init_layer_params(l, rng);
  return g;
}

// ---------------------------------------------------------------------------
// forward execution

template <class T>
struct ForwardOptions {
  bool training = false;
  std::mt19937_64* rng = nullptr;  // needed for dropout in training mode
  int from = 0;
  int to = -1;  // exclusive; -1 = end
};

template <class T>
Tensor<T> forward(ModelGraph<T>& g, const Tensor<T>& input, ForwardOptions<T> opt = {}) {
  int to = opt.to < 0 ? g.layer_count() : opt.to;
  if (opt.from < 0 || to > g.layer_count() || opt.from > to)
    throw UsageError("forward: bad layer range");
  Tensor<T> x = input;
  std::map<int, Tensor<T>> stash;
  // sources needed by residual adds inside the range
  for (const auto& [add_idx, src] : g.links)
    if (add_idx >= opt.from && add_idx < to) {
      if (src < opt.from - 1)
        throw StructureError("residual link crosses the execution boundary at layer " +
                             std::to_string(add_idx));
      if (src == opt.from - 1) stash[src] = x;  // range input plays the source role
    }
  for (int i = opt.from; i < to; ++i) {
    auto& l = g.layers[static_cast<size_t>(i)];
    switch (l.kind) {
      case LayerKind::conv:
        x = conv2d(x, l.weight, l.bias, l.stride, l.padding, l.groups);
        break;
      case LayerKind::tconv:
        x = conv_transpose2d(x, l.weight, l.bias, l.stride, l.padding, l.output_padding);
        break;
      case LayerKind::fc:
        x = linear(x, l.weight, l.bias);
        break;
      case LayerKind::relu:
        x = relu(x);
        break;
      case LayerKind::sigmoid:
        x = sigmoid(x);
        break;
      case LayerKind::pool:
        x = pool2d(x, l.pool, l.pk, l.pstride);
        break;
      case LayerKind::batchnorm:
        x = batchnorm(x, l.gamma, l.beta, l.run_mean, l.run_var, opt.training, static_cast<T>(0.1),
                      static_cast<T>(1e-5));
        break;
      case LayerKind::dropout: {
        if (opt.training && opt.rng == nullptr)
          throw UsageError("training forward through dropout requires an rng");
        static std::mt19937_64 unused_rng{0};
        x = dropout(x, static_cast<T>(l.rate), opt.training, opt.rng ? *opt.rng : unused_rng);
        break;
      }
      case LayerKind::flatten:
        x = reshape(x, {x.shape()[0], numel(Shape(x.shape().begin() + 1, x.shape().end()))});
        break;
      case LayerKind::unflatten: {
        Shape s = {x.shape()[0]};
        s.insert(s.end(), l.unflat.begin(), l.unflat.end());
        x = reshape(x, s);
        break;
      }
      case LayerKind::upsample:
        x = upsample_nearest(x, l.up_h, l.up_w);
        break;
      case LayerKind::residual_add: {
        int src = g.links.at(i);
        auto it = stash.find(src);
        if (it == stash.end())
          throw StructureError("residual source " + std::to_string(src) + " not available at layer " +
                               std::to_string(i));
        x = add(x, it->second);
        break;
      }
    }
    // keep activations that later residual adds will consume
    for (const auto& [add_idx, src] : g.links)
      if (src == i && add_idx >= opt.from && add_idx < to) stash[i] = x;
  }
  return x;
}

template <class T>
Tensor<T> forward_eval(ModelGraph<T>& g, const Tensor<T>& input) {
  TapeSuspend<T> off;
  ForwardOptions<T> opt;
  opt.training = false;
  return forward(g, input, opt);
}

// ---------------------------------------------------------------------------
// parameters

template <class T>
std::vector<Parameter<T>> parameters(ModelGraph<T>& g, int from = 0, int to = -1) {
  int end = to < 0 ? g.layer_count() : to;
  std::vector<Parameter<T>> out;
  for (int i = from; i < end; ++i) {
    auto& l = g.layers[static_cast<size_t>(i)];
    std::string base = "l" + std::to_string(i) + ".";
    if (l.weight.defined()) out.push_back({base + "weight", l.weight});
    if (l.bias.defined()) out.push_back({base + "bias", l.bias});
    if (l.gamma.defined()) out.push_back({base + "gamma", l.gamma});
    if (l.beta.defined()) out.push_back({base + "beta", l.beta});
  }
  return out;
}

template <class T>
std::vector<Parameter<T>> buffers(ModelGraph<T>& g, int from = 0, int to = -1) {
  int end = to < 0 ? g.layer_count() : to;
  std::vector<Parameter<T>> out;
  for (int i = from; i < end; ++i) {
    auto& l = g.layers[static_cast<size_t>(i)];
    std::string base = "l" + std::to_string(i) + ".";
    if (l.run_mean.defined()) out.push_back({base + "run_mean", l.run_mean});
    if (l.run_var.defined()) out.push_back({base + "run_var", l.run_var});
  }
  return out;
}

// FNV-1a over raw parameter and buffer bytes; used by tests to assert that a
// training phase touched exactly the parameter set it was supposed to.
template <class T>
uint64_t params_fingerprint(ModelGraph<T>& g, int from = 0, int to = -1) {
  uint64_t h = 1469598103934665603ull;
  auto feed = [&h](const Tensor<T>& t) {
    const unsigned char* p = reinterpret_cast<const unsigned char*>(t.v().data());
    for (size_t i = 0; i < t.v().size() * sizeof(T); ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  };
  for (auto& p : parameters(g, from, to)) feed(p.tensor);
  for (auto& p : buffers(g, from, to)) feed(p.tensor);
  return h;
}

// ---------------------------------------------------------------------------
// partitioning

// Partitions that would cut a residual link are not representable with a
// single-tensor device/cloud interface, so they are masked out of the
// search space rather than shipped as a multi-tensor feature pack.
template <class T>
bool partition_is_legal(const ModelGraph<T>& g, int p) {
  if (p < 0 || p > g.layer_count()) return false;
  for (const auto& [add_idx, src] : g.links)
    if (src < p - 1 && add_idx >= p) return false;
  return true;
}

template <class T>
std::vector<int> legal_partitions(const ModelGraph<T>& g) {
  std::vector<int> out;
  for (int p = 0; p <= g.layer_count(); ++p)
    if (partition_is_legal(g, p)) out.push_back(p);
  return out;
}

// Splits into (encoder, cloud). Parameter storage is shared with the source
// graph, which is what makes the composed forward bit-identical.
template <class T>
std::pair<ModelGraph<T>, ModelGraph<T>> partition_split(const ModelGraph<T>& g) {
  int p = g.partition;
  if (!partition_is_legal(g, p))
    throw StructureError("partition " + std::to_string(p) + " is not legal for this graph");
  ModelGraph<T> enc, cloud;
  enc.input_shape = g.input_shape;
  enc.layers.assign(g.layers.begin(), g.layers.begin() + p);
  for (const auto& [add_idx, src] : g.links)
    if (add_idx < p) enc.links[add_idx] = src;
  enc.partition = p;
  cloud.input_shape = p == 0 ? g.input_shape : g.out_shapes[static_cast<size_t>(p - 1)];
  cloud.layers.assign(g.layers.begin() + p, g.layers.end());
  for (const auto& [add_idx, src] : g.links)
    if (add_idx >= p) cloud.links[add_idx - p] = src - p;
  cloud.partition = 0;
  if (!enc.layers.empty()) validate(enc);
  if (!cloud.layers.empty()) validate(cloud);
  return {std::move(enc), std::move(cloud)};
}

// ---------------------------------------------------------------------------
// zoo: desk-scale models on 1x16x16 inputs, 4 classes

template <class T>
ModelGraph<T> build_tiny_mlp(std::mt19937_64& rng) {
  namespace ly = layer;
  std::vector<LayerSpec<T>> ls;
  ls.push_back(ly::flatten<T>());
  ls.push_back(ly::fc<T>(256, 32));
  ls.push_back(ly::relu<T>());
  ls.push_back(ly::fc<T>(32, 4));
  return make_graph<T>({1, 16, 16}, std::move(ls), {}, rng);
}

template <class T>
ModelGraph<T> build_tiny_lenet(std::mt19937_64& rng) {
  namespace ly = layer;
  std::vector<LayerSpec<T>> ls;
  ls.push_back(ly::conv<T>(5, 1, 6, 1, 2));
  ls.push_back(ly::relu<T>());
  ls.push_back(ly::pool<T>(PoolKind::max, 2, 2));
  ls.push_back(ly::conv<T>(5, 6, 16, 1, 0));
  ls.push_back(ly::relu<T>());
  ls.push_back(ly::pool<T>(PoolKind::max, 2, 2));
  ls.push_back(ly::flatten<T>());
  ls.push_back(ly::fc<T>(64, 32));
  ls.push_back(ly::relu<T>());
  ls.push_back(ly::fc<T>(32, 4));
  return make_graph<T>({1, 16, 16}, std::move(ls), {}, rng);
}

template <class T>
ModelGraph<T> build_tiny_vgg(std::mt19937_64& rng) {
  namespace ly = layer;
  std::vector<LayerSpec<T>> ls;
  ls.push_back(ly::conv<T>(3, 1, 8, 1, 1));      // 0
  ls.push_back(ly::batchnorm<T>(8));             // 1
  ls.push_back(ly::relu<T>());                   // 2
  ls.push_back(ly::pool<T>(PoolKind::max, 2, 2));  // 3 -> 8x8x8
  ls.push_back(ly::conv<T>(3, 8, 16, 1, 1));     // 4
  ls.push_back(ly::relu<T>());                   // 5
  ls.push_back(ly::pool<T>(PoolKind::max, 2, 2));  // 6 -> 16x4x4
  ls.push_back(ly::conv<T>(3, 16, 16, 1, 1));    // 7
  ls.push_back(ly::relu<T>());                   // 8
  ls.push_back(ly::conv<T>(3, 16, 16, 1, 1));    // 9
  ls.push_back(ly::residual_add<T>());           // 10 (from pool 6)
  ls.push_back(ly::relu<T>());                   // 11
  ls.push_back(ly::conv<T>(3, 16, 32, 1, 1));    // 12
  ls.push_back(ly::relu<T>());                   // 13
  ls.push_back(ly::conv<T>(3, 32, 32, 1, 1));    // 14
  ls.push_back(ly::relu<T>());                   // 15
  ls.push_back(ly::pool<T>(PoolKind::global_avg));  // 16 -> 32x1x1
  ls.push_back(ly::flatten<T>());                // 17
  ls.push_back(ly::fc<T>(32, 4));                // 18
  return make_graph<T>({1, 16, 16}, std::move(ls), {{10, 6}}, rng);
}

template <class T>
ModelGraph<T> build_model(const std::string& name, std::mt19937_64& rng) {
  if (name == "tiny-mlp") return build_tiny_mlp<T>(rng);
  if (name == "tiny-lenet") return build_tiny_lenet<T>(rng);
  if (name == "tiny-vgg") return build_tiny_vgg<T>(rng);
  throw ConfigError("unknown model '" + name + "' (zoo: tiny-mlp, tiny-lenet, tiny-vgg)");
}

}  // namespace splitnas
