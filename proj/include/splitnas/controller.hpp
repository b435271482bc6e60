#pragma once

#include <cmath>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "splitnas/compress.hpp"
#include "splitnas/metrics.hpp"
#include "splitnas/model.hpp"
#include "splitnas/optim.hpp"
#include "splitnas/strategy.hpp"

namespace splitnas {

// Per-layer state fed to the policy: kind one-hot (8 searchable kinds),
// normalized Cin/Cout/K/stride, depth position, current-technique one-hot
// (none + 8). Fixed dimension across layers.
inline constexpr int kEmbedKinds = 8;
inline constexpr int kTechChoices = 9;  // "none" + 8 techniques
inline constexpr int kEmbedDim = kEmbedKinds + 4 + 1 + kTechChoices;

template <class T>
std::vector<Tensor<T>> encode_layer_states(const ModelGraph<T>& g) {
  std::vector<Tensor<T>> states;
  states.reserve(g.layers.size());
  int n = g.layer_count();
  for (int i = 0; i < n; ++i) {
    const auto& l = g.layers[static_cast<size_t>(i)];
    Tensor<T> e({1, kEmbedDim});
    auto set = [&e](int j, double v) { e.v()[static_cast<size_t>(j)] = static_cast<T>(v); };
    int kind_slot = static_cast<int>(l.kind);
    if (kind_slot < kEmbedKinds) set(kind_slot, 1.0);
    double cin = l.kind == LayerKind::fc ? l.in_units : l.cin;
    double cout = l.kind == LayerKind::fc ? l.out_units : l.cout;
    set(kEmbedKinds + 0, cin / 256.0);
    set(kEmbedKinds + 1, cout / 256.0);
    set(kEmbedKinds + 2, l.k / 7.0);
    set(kEmbedKinds + 3, l.stride / 4.0);
    set(kEmbedKinds + 4, n > 1 ? static_cast<double>(i) / (n - 1) : 0.0);
    set(kEmbedKinds + 5, 1.0);  // current technique: "none" for a base graph
    states.push_back(e);
  }
  return states;
}

// Bidirectional single-layer LSTM with a per-layer compression head and a
// scalar partition head; partition 0 (empty encoder) gets its own learned
// logit since no hidden state exists before the first layer.
template <class T>
struct ControllerNet {
  int embed_dim = kEmbedDim;
  int hidden = 64;
  Tensor<T> w_ih_f, w_hh_f, b_f;
  Tensor<T> w_ih_b, w_hh_b, b_b;
  Tensor<T> head_comp_f, head_comp_b, head_comp_bias;
  Tensor<T> head_part_f, head_part_b, head_part_bias;
  Tensor<T> p0_logit;

  std::vector<Parameter<T>> parameters() {
    return {{"lstm_f.w_ih", w_ih_f},      {"lstm_f.w_hh", w_hh_f},
            {"lstm_f.b", b_f},            {"lstm_b.w_ih", w_ih_b},
            {"lstm_b.w_hh", w_hh_b},      {"lstm_b.b", b_b},
            {"head_comp.f", head_comp_f}, {"head_comp.b", head_comp_b},
            {"head_comp.bias", head_comp_bias},
            {"head_part.f", head_part_f}, {"head_part.b", head_part_b},
            {"head_part.bias", head_part_bias},
            {"p0_logit", p0_logit}};
  }
};

template <class T>
ControllerNet<T> make_controller(int hidden, std::mt19937_64& rng, int embed_dim = kEmbedDim) {
  ControllerNet<T> net;
  net.embed_dim = embed_dim;
  net.hidden = hidden;
  auto u = [&rng](Shape s, double limit) {
    return Tensor<T>::rand_uniform(std::move(s), static_cast<T>(-limit), static_cast<T>(limit), rng,
                                   true);
  };
  double le = std::sqrt(1.0 / embed_dim);
  double lh = std::sqrt(1.0 / hidden);
  net.w_ih_f = u({4 * hidden, embed_dim}, le);
  net.w_hh_f = u({4 * hidden, hidden}, lh);
  net.b_f = Tensor<T>(Shape{static_cast<int64_t>(4 * hidden)}, T(0), true);
  net.w_ih_b = u({4 * hidden, embed_dim}, le);
  net.w_hh_b = u({4 * hidden, hidden}, lh);
  net.b_b = Tensor<T>(Shape{static_cast<int64_t>(4 * hidden)}, T(0), true);
  net.head_comp_f = u({kTechChoices, hidden}, lh);
  net.head_comp_b = u({kTechChoices, hidden}, lh);
  net.head_comp_bias = Tensor<T>(Shape{kTechChoices}, T(0), true);
  net.head_part_f = u({1, hidden}, lh);
  net.head_part_b = u({1, hidden}, lh);
  net.head_part_bias = Tensor<T>(Shape{1}, T(0), true);
  net.p0_logit = Tensor<T>(Shape{1}, T(0), true);
  return net;
}

namespace ctrl_detail {

template <class T>
Tensor<T> lstm_step(const Tensor<T>& x, Tensor<T>& h, Tensor<T>& c, const Tensor<T>& w_ih,
                    const Tensor<T>& w_hh, const Tensor<T>& b, int hidden) {
  Tensor<T> gates = add(linear(x, w_ih, b), linear(h, w_hh));
  Tensor<T> i = sigmoid(slice_cols(gates, 0, hidden));
  Tensor<T> f = sigmoid(slice_cols(gates, hidden, 2 * hidden));
  Tensor<T> g = tanh_act(slice_cols(gates, 2 * hidden, 3 * hidden));
  Tensor<T> o = sigmoid(slice_cols(gates, 3 * hidden, 4 * hidden));
  c = add(mul(f, c), mul(i, g));
  h = mul(o, tanh_act(c));
  return h;
}

inline std::vector<double> masked_softmax(const std::vector<double>& logits,
                                          const std::vector<bool>& allowed) {
  double best = -1e300;
  for (size_t i = 0; i < logits.size(); ++i)
    if (allowed[i]) best = std::max(best, logits[i]);
  std::vector<double> p(logits.size(), 0.0);
  double z = 0.0;
  for (size_t i = 0; i < logits.size(); ++i)
    if (allowed[i]) {
      p[i] = std::exp(logits[i] - best);
      z += p[i];
    }
  for (auto& v : p) v /= z;
  return p;
}

inline size_t sample_categorical(const std::vector<double>& p, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double x = u(rng);
  double acc = 0.0;
  size_t last_nonzero = 0;
  for (size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    last_nonzero = i;
    acc += p[i];
    if (x < acc) return i;
  }
  return last_nonzero;  // numerical tail
}

}  // namespace ctrl_detail

// What the policy needs to know about the base graph, computed once.
template <class T>
struct ControllerInputs {
  std::vector<Tensor<T>> states;
  std::vector<std::array<bool, 8>> tech_mask;
  std::vector<bool> partition_mask;     // size L+1
  std::vector<int> compressible;        // layer indices with a real choice
};

template <class T>
ControllerInputs<T> controller_inputs(const ModelGraph<T>& g) {
  ControllerInputs<T> in;
  in.states = encode_layer_states(g);
  in.tech_mask = applicability_mask(g);
  in.partition_mask.assign(static_cast<size_t>(g.layer_count() + 1), false);
  for (int p : legal_partitions(g)) in.partition_mask[static_cast<size_t>(p)] = true;
  for (int i = 0; i < g.layer_count(); ++i) {
    LayerKind k = g.layers[static_cast<size_t>(i)].kind;
    if (k == LayerKind::conv || k == LayerKind::fc) in.compressible.push_back(i);
  }
  return in;
}

template <class T>
struct ControllerOutput {
  Tensor<T> partition_logits;           // [L+1], masked
  std::vector<Tensor<T>> comp_logits;   // per layer, [9], masked
  std::vector<double> partition_dist;
  std::vector<std::vector<double>> comp_dist;
};

// One pass over the sequence; both heads read the same hidden states.
template <class T>
ControllerOutput<T> forward_controller(ControllerNet<T>& net, const ControllerInputs<T>& in) {
  int n = static_cast<int>(in.states.size());
  if (n == 0) throw UsageError("controller forward over an empty layer sequence");
  std::vector<Tensor<T>> h_f(static_cast<size_t>(n)), h_b(static_cast<size_t>(n));
  {
    Tensor<T> h({1, net.hidden}), c({1, net.hidden});
    for (int t = 0; t < n; ++t)
      h_f[static_cast<size_t>(t)] =
          ctrl_detail::lstm_step(in.states[static_cast<size_t>(t)], h, c, net.w_ih_f, net.w_hh_f,
                                 net.b_f, net.hidden);
  }
  {
    Tensor<T> h({1, net.hidden}), c({1, net.hidden});
    for (int t = n - 1; t >= 0; --t)
      h_b[static_cast<size_t>(t)] =
          ctrl_detail::lstm_step(in.states[static_cast<size_t>(t)], h, c, net.w_ih_b, net.w_hh_b,
                                 net.b_b, net.hidden);
  }
  ControllerOutput<T> out;
  const T kMasked = T(-1e9);
  // partition logits: learned p0 logit, then one scalar per boundary i+1
  std::vector<Tensor<T>> plogit_scalars;
  plogit_scalars.push_back(net.p0_logit);
  for (int t = 0; t < n; ++t) {
    Tensor<T> s = add(linear(h_f[static_cast<size_t>(t)], net.head_part_f, net.head_part_bias),
                      linear(h_b[static_cast<size_t>(t)], net.head_part_b));
    plogit_scalars.push_back(reshape(s, {1}));
  }
  Tensor<T> pmask({static_cast<int64_t>(n + 1)});
  for (int p = 0; p <= n; ++p)
    pmask.v()[static_cast<size_t>(p)] = in.partition_mask[static_cast<size_t>(p)] ? T(0) : kMasked;
  out.partition_logits = add(stack_scalars(plogit_scalars), pmask);
  {
    std::vector<double> lv(out.partition_logits.v().begin(), out.partition_logits.v().end());
    std::vector<bool> allowed(in.partition_mask.begin(), in.partition_mask.end());
    out.partition_dist = ctrl_detail::masked_softmax(lv, allowed);
  }
  // per-layer compression logits; "none" (column 0) is always available
  out.comp_logits.resize(static_cast<size_t>(n));
  out.comp_dist.resize(static_cast<size_t>(n));
  for (int t = 0; t < n; ++t) {
    Tensor<T> logits =
        add(linear(h_f[static_cast<size_t>(t)], net.head_comp_f, net.head_comp_bias),
            linear(h_b[static_cast<size_t>(t)], net.head_comp_b));
    Tensor<T> mask({1, kTechChoices});
    std::vector<bool> allowed(kTechChoices, false);
    allowed[0] = true;
    for (int j = 0; j < 8; ++j)
      allowed[static_cast<size_t>(j + 1)] = in.tech_mask[static_cast<size_t>(t)][static_cast<size_t>(j)];
    for (int j = 0; j < kTechChoices; ++j)
      mask.v()[static_cast<size_t>(j)] = allowed[static_cast<size_t>(j)] ? T(0) : kMasked;
    Tensor<T> masked = reshape(add(logits, mask), {kTechChoices});
    out.comp_logits[static_cast<size_t>(t)] = masked;
    std::vector<double> lv(masked.v().begin(), masked.v().end());
    out.comp_dist[static_cast<size_t>(t)] = ctrl_detail::masked_softmax(lv, allowed);
  }
  return out;
}

// Samples one strategy. Compression decisions at or after the sampled
// partition are dropped to "none" and their log-probs excluded; the log-prob
// sum covers the partition choice plus the kept per-layer decisions.
template <class T>
std::pair<Strategy, Tensor<T>> sample_strategy(const ControllerOutput<T>& out,
                                               const ControllerInputs<T>& in, std::mt19937_64& rng) {
  Strategy s;
  s.partition = static_cast<int>(ctrl_detail::sample_categorical(out.partition_dist, rng));
  Tensor<T> logp = pick_log_prob(out.partition_logits, s.partition);
  for (int i : in.compressible) {
    size_t choice = ctrl_detail::sample_categorical(out.comp_dist[static_cast<size_t>(i)], rng);
    if (i >= s.partition) continue;  // dropped to "none", log-prob excluded
    logp = add(logp, pick_log_prob(out.comp_logits[static_cast<size_t>(i)], static_cast<int64_t>(choice)));
    if (choice > 0) s.compressions[i] = kAllTechniques[choice - 1];
  }
  return {s, logp};
}

// Log-probability of re-taking a known strategy under the current policy.
template <class T>
double strategy_log_prob(ControllerNet<T>& net, const ControllerInputs<T>& in, const Strategy& s) {
  TapeSuspend<T> off;
  ControllerOutput<T> out = forward_controller(net, in);
  double lp = std::log(out.partition_dist[static_cast<size_t>(s.partition)]);
  for (int i : in.compressible) {
    if (i >= s.partition) continue;
    auto it = s.compressions.find(i);
    size_t choice = 0;
    if (it != s.compressions.end()) choice = technique_column(it->second) + 1;
    lp += std::log(out.comp_dist[static_cast<size_t>(i)][choice]);
  }
  return lp;
}

// ---------------------------------------------------------------------------
// REINFORCE search

template <class T>
struct Trajectory {
  Strategy strategy;
  Tensor<T> log_prob;  // taped scalar
  double log_prob_value = 0.0;
  double reward = 0.0;
  int rollout = 0;
  MetricsReport report;
  bool eval_failed = false;
  std::string error;
};

struct SearchConfig {
  int episodes = 200;       // N
  int rollouts = 1;         // M
  double controller_lr = 0.03;
  int hidden = 64;
  double baseline_decay = 0.9;
  double gamma = 1.0;       // fixed at 1; terminal-only reward
  uint64_t seed = 1;
};

inline double baseline_ema(double b, double mean_reward, double decay) {
  return decay * b + (1.0 - decay) * mean_reward;
}

struct EpisodeRow {
  int episode = 0;
  int rollout = 0;
  std::string strategy;
  double a = 0.0, p = 0.0, s = 0.0, r = 0.0;
  double baseline = 0.0;
  double log_prob = 0.0;
  bool eval_failed = false;
};

inline std::string episode_csv_header() {
  return "episode,rollout,strategy,A,P,S,R,baseline,log_prob_sum";
}

inline std::string episode_csv_row(const EpisodeRow& e) {
  std::ostringstream os;
  os << e.episode << "," << e.rollout << "," << e.strategy << "," << fmt_g(e.a) << "," << fmt_g(e.p)
     << "," << fmt_g(e.s) << "," << fmt_g(e.r) << "," << fmt_g(e.baseline) << "," << fmt_g(e.log_prob);
  return os.str();
}

template <class T>
struct SearchResult {
  std::optional<Strategy> best;
  double best_reward = 0.0;
  MetricsReport best_report;
  std::vector<EpisodeRow> log;
  ControllerNet<T> net;
};

using StrategyEvaluator = std::function<MetricsReport(const Strategy&)>;

// One policy-gradient step: ascent on (1/M) sum_j logp_j * (mean R - b),
// then the baseline moves to decay*b + (1-decay)*mean R. The trajectories'
// log-prob tensors must have been recorded on `tape`. Returns the advantage.
template <class T>
double reinforce_update(Optimizer<T>& opt, Tape<T>& tape, const std::vector<Trajectory<T>>& trajs,
                        double& baseline, bool& baseline_initialized, double decay) {
  if (trajs.empty()) throw UsageError("reinforce update needs at least one trajectory");
  double mean_reward = 0.0;
  for (const auto& t : trajs) mean_reward += t.reward;
  mean_reward /= static_cast<double>(trajs.size());
  if (!baseline_initialized) {
    baseline = mean_reward;
    baseline_initialized = true;
  }
  double advantage = mean_reward - baseline;
  {
    TapeScope<T> scope(tape);
    Tensor<T> objective;
    for (const auto& t : trajs) {
      Tensor<T> term =
          scalar_mul(t.log_prob, static_cast<T>(-advantage / static_cast<double>(trajs.size())));
      objective = objective.defined() ? add(objective, term) : term;
    }
    backward(objective);
  }
  opt.step();
  opt.zero_grad();
  baseline = baseline_ema(baseline, mean_reward, decay);
  return advantage;
}

// Policy-gradient ascent with a moving-average baseline over terminal-only
// rewards. Rollout rewards inside an episode are averaged first and the
// shared advantage (mean - baseline) weights every trajectory. Evaluator
// failures score 0 and are logged, so the search keeps moving.
template <class T>
SearchResult<T> run_search(const ModelGraph<T>& base, const StrategyEvaluator& evaluator,
                           const SearchConfig& cfg) {
  if (cfg.gamma != 1.0) throw ConfigError("the discount factor is fixed at 1");
  if (cfg.rollouts < 1) throw ConfigError("need at least one rollout per episode");
  SearchResult<T> result;
  ControllerInputs<T> inputs = controller_inputs(base);
  std::mt19937_64 init_rng(derive_seed(cfg.seed, 1));
  std::mt19937_64 sample_rng(derive_seed(cfg.seed, 2));
  result.net = make_controller<T>(cfg.hidden, init_rng);
  Optimizer<T> opt(result.net.parameters(), OptKind::adam, static_cast<T>(cfg.controller_lr));
  double baseline = 0.0;
  bool baseline_init = false;

  for (int episode = 0; episode < cfg.episodes; ++episode) {
    Tape<T> tape;
    std::vector<Trajectory<T>> trajs(static_cast<size_t>(cfg.rollouts));
    {
      TapeScope<T> scope(tape);
      for (int j = 0; j < cfg.rollouts; ++j) {
        ControllerOutput<T> out = forward_controller(result.net, inputs);
        auto [strategy, logp] = sample_strategy(out, inputs, sample_rng);
        trajs[static_cast<size_t>(j)].strategy = strategy;
        trajs[static_cast<size_t>(j)].log_prob = logp;
        trajs[static_cast<size_t>(j)].log_prob_value = static_cast<double>(logp.item());
        trajs[static_cast<size_t>(j)].rollout = j;
      }
    }
    for (auto& t : trajs) {
      try {
        t.report = evaluator(t.strategy);
        t.reward = t.report.r;
      } catch (const std::exception& e) {
        t.reward = 0.0;
        t.eval_failed = true;
        t.error = e.what();
      }
    }
    reinforce_update(opt, tape, trajs, baseline, baseline_init, cfg.baseline_decay);
    for (auto& t : trajs) {
      EpisodeRow row;
      row.episode = episode;
      row.rollout = t.rollout;
      row.strategy = to_string(t.strategy);
      row.a = t.report.a;
      row.p = t.report.p;
      row.s = t.report.s;
      row.r = t.reward;
      row.baseline = baseline;
      row.log_prob = t.log_prob_value;
      row.eval_failed = t.eval_failed;
      result.log.push_back(row);
      if (!t.eval_failed && (!result.best.has_value() || t.reward > result.best_reward)) {
        result.best = t.strategy;
        result.best_reward = t.reward;
        result.best_report = t.report;
      }
    }
    (void)baseline_used;
  }
  return result;
}

}  // namespace splitnas
