#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "splitnas/adversary.hpp"
#include "splitnas/compress.hpp"
#include "splitnas/controller.hpp"
#include "splitnas/cost.hpp"

namespace splitnas {

// Grid over partition candidates crossed with either a uniform-technique menu
// (each entry applied to every applicable encoder layer) or, for tiny models,
// the full per-layer assignment space.
struct GridSpec {
  std::vector<int> partitions;
  std::vector<std::optional<Technique>> techniques;  // nullopt = no compression
  bool exhaustive = false;
  int64_t budget = -1;  // <0 = unlimited
  bool allow_truncation = false;
};

template <class T>
std::vector<Strategy> enumerate_grid(const ModelGraph<T>& g, const GridSpec& spec) {
  std::vector<Strategy> out;
  std::set<std::string> seen;
  auto push = [&](Strategy s) {
    if (seen.insert(to_string(s)).second) out.push_back(std::move(s));
  };
  auto mask = applicability_mask(g);
  std::vector<int> partitions = spec.partitions;
  if (partitions.empty())
    for (int p : legal_partitions(g)) partitions.push_back(p);
  for (int p : partitions)
    if (!partition_is_legal(g, p))
      throw ConfigError("grid partition " + std::to_string(p) + " is not legal for this model");

  if (spec.exhaustive) {
    std::vector<int> compressible;
    for (int i = 0; i < g.layer_count(); ++i) {
      LayerKind k = g.layers[static_cast<size_t>(i)].kind;
      if (k == LayerKind::conv || k == LayerKind::fc) compressible.push_back(i);
    }
    for (int p : partitions) {
      std::vector<int> active;
      for (int i : compressible)
        if (i < p) active.push_back(i);
      // product over per-layer choices {none + applicable techniques}
      std::vector<std::vector<std::optional<Technique>>> choices;
      for (int i : active) {
        std::vector<std::optional<Technique>> c = {std::nullopt};
        for (size_t t = 0; t < kAllTechniques.size(); ++t)
          if (mask[static_cast<size_t>(i)][t] && kAllTechniques[t] != Technique::F3)
            c.push_back(kAllTechniques[t]);
        choices.push_back(std::move(c));
      }
      std::vector<size_t> pick(active.size(), 0);
      while (true) {
        Strategy s;
        s.partition = p;
        for (size_t j = 0; j < active.size(); ++j)
          if (choices[j][pick[j]].has_value()) s.compressions[active[j]] = *choices[j][pick[j]];
        push(std::move(s));
        size_t j = 0;
        for (; j < pick.size(); ++j) {
          if (++pick[j] < choices[j].size()) break;
          pick[j] = 0;
        }
        if (j == pick.size()) break;
        if (active.empty()) break;
      }
      if (active.empty()) {
        Strategy s;
        s.partition = p;
        push(std::move(s));
      }
    }
  } else {
    if (spec.techniques.empty()) throw ConfigError("grid needs a technique menu (use \"none\" alone for partition-only)");
    for (int p : partitions)
      for (const auto& tech : spec.techniques) {
        Strategy s;
        s.partition = p;
        if (tech.has_value()) {
          size_t col = technique_column(*tech);
          for (int i = 0; i < p && i < g.layer_count(); ++i)
            if (mask[static_cast<size_t>(i)][col]) {
              if (*tech == Technique::F3 && p != g.layer_count()) continue;
              s.compressions[i] = *tech;
            }
        }
        push(std::move(s));
      }
  }
  if (out.empty()) throw ConfigError("grid enumeration is empty");
  if (spec.budget >= 0 && static_cast<int64_t>(out.size()) > spec.budget) {
    if (!spec.allow_truncation)
      throw ConfigError("grid enumeration (" + std::to_string(out.size()) +
                        ") exceeds the evaluation budget " + std::to_string(spec.budget));
    out.resize(static_cast<size_t>(spec.budget));
  }
  return out;
}

template <class T>
struct GridResult {
  Strategy best;
  MetricsReport best_report;
  std::vector<std::pair<Strategy, MetricsReport>> evaluated;
};

// Shares the evaluator (and therefore the reward path) with the RL search.
// Ties break toward the smaller encoder parameter count, then the
// lexicographically smaller strategy string, making the result independent
// of enumeration order.
template <class T>
GridResult<T> grid_search(const ModelGraph<T>& g, const GridSpec& spec,
                          const StrategyEvaluator& evaluator, const CompressionKnobs& knobs = {}) {
  std::vector<Strategy> all = enumerate_grid(g, spec);
  GridResult<T> result;
  std::map<std::string, int64_t> enc_params_cache;
  auto encoder_params = [&](const Strategy& s) {
    std::string key = to_string(s);
    auto it = enc_params_cache.find(key);
    if (it != enc_params_cache.end()) return it->second;
    std::mt19937_64 rng(0);  // weights do not matter for a structural count
    ModelGraph<T> applied = apply_strategy(g, s, knobs, rng);
    int64_t v = count_params(applied, 0, applied.partition);
    enc_params_cache[key] = v;
    return v;
  };
  bool have_best = false;
  for (const auto& s : all) {
    MetricsReport rep;
    bool failed = false;
    try {
      rep = evaluator(s);
    } catch (const std::exception&) {
      failed = true;
      rep = MetricsReport{};
      rep.r = 0.0;
    }
    result.evaluated.emplace_back(s, rep);
    if (failed) continue;
    bool better = false;
    if (!have_best) {
      better = true;
    } else if (rep.r != result.best_report.r) {
      better = rep.r > result.best_report.r;
    } else {
      int64_t a = encoder_params(s), b = encoder_params(result.best);
      if (a != b)
        better = a < b;
      else
        better = to_string(s) < to_string(result.best);
    }
    if (better) {
      result.best = s;
      result.best_report = rep;
      have_best = true;
    }
  }
  if (!have_best) throw DataError("every grid cell failed to evaluate");
  return result;
}

// ---------------------------------------------------------------------------
// differential-privacy baseline: zero-mean Gaussian noise on the features at
// inference, scaled by the mean absolute feature magnitude.

struct NoiseSpec {
  std::vector<double> multipliers = {0.1, 0.5, 1.0, 2.0};
};

template <class T>
Tensor<T> dp_inject(const Tensor<T>& features, double multiplier, std::mt19937_64& rng) {
  if (multiplier < 0.0) throw ConfigError("noise multiplier must be non-negative");
  double mean_abs = 0.0;
  for (T v : features.v()) mean_abs += std::abs(static_cast<double>(v));
  mean_abs /= static_cast<double>(features.size());
  double sigma = multiplier * mean_abs;
  Tensor<T> out = features.clone();
  if (sigma == 0.0) return out;
  std::normal_distribution<double> n(0.0, sigma);
  for (auto& v : out.v()) v = static_cast<T>(static_cast<double>(v) + n(rng));
  return out;
}

struct DpRow {
  int partition = 0;
  double multiplier = 0.0;
  double a = 0.0;         // protocol accuracy (base model unchanged)
  double a_noised = 0.0;  // measured accuracy under noised features
  double p = 0.0;
  double s1 = 0.0;
  double r = 0.0;
};

inline std::string dp_csv_header() { return "partition,multiplier,A,A_noised,P,S1,R"; }

inline std::string dp_csv_row(const DpRow& d) {
  std::ostringstream os;
  os << d.partition << "," << fmt_g(d.multiplier) << "," << fmt_g(d.a) << "," << fmt_g(d.a_noised)
     << "," << fmt_g(d.p) << "," << fmt_g(d.s1) << "," << fmt_g(d.r);
  return os.str();
}

namespace dp_detail {

template <class T>
Tensor<T> noised_features(ModelGraph<T>& g, const Tensor<T>& x, double multiplier,
                          std::mt19937_64& rng) {
  TapeSuspend<T> off;
  ForwardOptions<T> fo;
  fo.to = g.partition;
  return dp_inject(forward(g, x, fo), multiplier, rng);
}

}  // namespace dp_detail

// Trains the attack decoder on noised aux features (the adversary sees what
// the cloud sees) and evaluates accuracy/privacy on noised eval features.
// The model itself is never modified; per the comparison protocol the reward
// uses the base accuracy, and the measured noised accuracy is reported
// alongside.
template <class T>
std::vector<DpRow> dp_baseline_eval(ModelGraph<T>& base, const std::vector<int>& partitions,
                                    const NoiseSpec& spec, const AttackSpec& attack,
                                    const SyntheticDataset<T>& ds, double a_base, uint64_t seed) {
  if (ds.aux_idx.empty() || ds.eval_idx.empty()) throw DataError("dp baseline needs aux and eval splits");
  std::vector<DpRow> rows;
  for (int p : partitions) {
    if (p <= 0 || !partition_is_legal(base, p))
      throw ConfigError("dp baseline partition " + std::to_string(p) + " is not legal");
    int old_partition = base.partition;
    base.partition = p;
    for (double mult : spec.multipliers) {
      std::mt19937_64 rng(derive_seed(seed, 23, static_cast<uint64_t>(p * 1000) +
                                                     static_cast<uint64_t>(mult * 100)));
      auto [enc, cloud] = partition_split(base);
      ModelGraph<T> decoder = build_attack_network(enc, attack.kind, ds.spec.fine_classes, rng);
      Optimizer<T> dec_opt(parameters(decoder), OptKind::adam, static_cast<T>(attack.lr));
      for (int e = 0; e < attack.epochs; ++e) {
        std::vector<int> order = detail::epoch_order(ds.aux_idx, rng);
        for (size_t off = 0; off < order.size(); off += attack.batch) {
          size_t count = std::min(attack.batch, order.size() - off);
          Tensor<T> x = gather_images(ds, order, off, count);
          std::vector<int> fine = gather_labels(ds.fine, order, off, count);
          Tensor<T> feat = dp_detail::noised_features(base, x, mult, rng);
          Tape<T> tape;
          TapeScope<T> scope(tape);
          Tensor<T> l = attack_loss(decoder, feat, x, fine, attack.kind, rng, true);
          backward(l);
          dec_opt.step();
          dec_opt.zero_grad();
        }
      }
      // evaluate on noised eval features
      DpRow row;
      row.partition = p;
      row.multiplier = mult;
      row.s1 = perf_indicators(base).s1;
      {
        TapeSuspend<T> off_tape;
        std::vector<int> pred;
        double p_acc = 0.0;
        size_t total = 0;
        int64_t chw = static_cast<int64_t>(ds.spec.channels) * ds.spec.h * ds.spec.w;
        double l2_err = 0.0;
        std::vector<int> fine_pred;
        for (size_t off = 0; off < ds.eval_idx.size(); off += 64) {
          size_t count = std::min<size_t>(64, ds.eval_idx.size() - off);
          Tensor<T> x = gather_images(ds, ds.eval_idx, off, count);
          Tensor<T> feat = dp_detail::noised_features(base, x, mult, rng);
          ForwardOptions<T> fo_cloud;
          fo_cloud.from = p;
          Tensor<T> logits = forward(base, feat, fo_cloud);
          auto pr = argmax_rows(logits);
          pred.insert(pred.end(), pr.begin(), pr.end());
          Tensor<T> dec_out = forward(decoder, feat, ForwardOptions<T>{});
          if (attack.kind == AttackKind::property_inference) {
            auto fp = argmax_rows(dec_out);
            fine_pred.insert(fine_pred.end(), fp.begin(), fp.end());
          } else {
            for (size_t i = 0; i < count; ++i) {
              Shape one = {1, ds.spec.channels, ds.spec.h, ds.spec.w};
              Tensor<T> xi(one), ri(one);
              std::copy_n(x.v().begin() + static_cast<int64_t>(i) * chw, chw, xi.v().begin());
              std::copy_n(dec_out.v().begin() + static_cast<int64_t>(i) * chw, chw, ri.v().begin());
              if (attack.kind == AttackKind::inversion_ssim) {
                p_acc += clamp01(ssim(xi, ri));
              } else {
                double sq = 0.0;
                for (int64_t j = 0; j < chw; ++j) {
                  double d = static_cast<double>(ri.v()[static_cast<size_t>(j)]) -
                             static_cast<double>(xi.v()[static_cast<size_t>(j)]);
                  sq += d * d;
                }
                l2_err += std::sqrt(sq);
              }
              ++total;
            }
          }
        }
        row.a_noised = accuracy(pred, gather_labels(ds.coarse, ds.eval_idx, 0, ds.eval_idx.size()));
        switch (attack.kind) {
          case AttackKind::inversion_ssim:
            row.p = p_acc / static_cast<double>(total);
            break;
          case AttackKind::inversion_mse:
            row.p = privacy_p0(l2_err / static_cast<double>(total),
                               blind_predictor_error(ds, ds.aux_idx, ds.eval_idx));
            break;
          case AttackKind::property_inference:
            row.p = accuracy(fine_pred, gather_labels(ds.fine, ds.eval_idx, 0, ds.eval_idx.size()));
            break;
        }
      }
      row.a = a_base;  // the dp baseline never retrains the model
      RewardParts parts = reward(row.a, a_base, row.p, row.s1);
      row.r = parts.r;
      rows.push_back(row);
    }
    base.partition = old_partition;
  }
  return rows;
}

}  // namespace splitnas
