#pragma once

#include <optional>
#include <string>
#include <vector>

#include "splitnas/cost.hpp"
#include "splitnas/metrics.hpp"
#include "splitnas/model.hpp"
#include "splitnas/optim.hpp"

namespace splitnas {

enum class AttackKind { inversion_mse, inversion_ssim, property_inference };

inline const char* attack_kind_name(AttackKind k) {
  switch (k) {
    case AttackKind::inversion_mse: return "inversion-mse";
    case AttackKind::inversion_ssim: return "inversion-ssim";
    case AttackKind::property_inference: return "property-inference";
  }
  return "?";
}

inline AttackKind attack_kind_from_name(const std::string& s) {
  for (AttackKind k :
       {AttackKind::inversion_mse, AttackKind::inversion_ssim, AttackKind::property_inference})
    if (s == attack_kind_name(k)) return k;
  throw ConfigError("unknown attack kind '" + s + "'");
}

inline const char* p_variant_for(AttackKind k) {
  switch (k) {
    case AttackKind::inversion_mse: return "p0";
    case AttackKind::inversion_ssim: return "p1";
    case AttackKind::property_inference: return "p2";
  }
  return "?";
}

struct AttackSpec {
  AttackKind kind = AttackKind::inversion_ssim;
  int epochs = 2;       // reactive decoder training budget
  double lr = 5e-4;
  size_t batch = 32;
};

// Proactive schedule: per round, cloud_epochs of task training, then
// decoder_epochs of attack training, then encoder_epochs of defended
// training. Reactive runs rounds*(cloud+encoder) joint epochs so the two
// protocols spend the same model-side budget. The decoder learning rate is
// halved relative to the encoder (GAN-style slowdown).
struct TrainSchedule {
  int cloud_epochs = 2;
  int decoder_epochs = 1;
  int encoder_epochs = 2;
  int rounds = 1;
  double distill_alpha = 0.5;
  double distill_t = 4.0;
  double lr_model = 1e-3;
  double lr_encoder = 1e-3;
  double lr_decoder = 5e-4;
  size_t batch = 32;
  double privacy_weight = 1.0;
};

// ---------------------------------------------------------------------------
// attack network construction

// Layer-by-layer structural mirror of the encoder: conv -> transposed conv,
// pool -> nearest upsample, fc m->n -> fc n->m, flatten -> unflatten.
// Dropout and residual junctions have no mirror and are skipped; a final
// sigmoid keeps reconstructions inside the image range.
template <class T>
ModelGraph<T> build_inverse_decoder(const ModelGraph<T>& encoder_in, std::mt19937_64& rng) {
  if (encoder_in.layers.empty())
    throw StructureError("cannot build an inverse decoder for an empty encoder (partition 0)");
  ModelGraph<T> enc = encoder_in;  // shares params; we only read shapes
  if (enc.out_shapes.size() != enc.layers.size()) validate(enc);
  std::vector<LayerSpec<T>> out;
  for (int i = enc.layer_count() - 1; i >= 0; --i) {
    const auto& l = enc.layers[static_cast<size_t>(i)];
    const Shape& in_shape = i == 0 ? enc.input_shape : enc.out_shapes[static_cast<size_t>(i - 1)];
    switch (l.kind) {
      case LayerKind::conv: {
        int nominal = (static_cast<int>(enc.out_shapes[static_cast<size_t>(i)][1]) - 1) * l.stride -
                      2 * l.padding + l.k;
        int opad = static_cast<int>(in_shape[1]) - nominal;
        if (opad < 0 || opad >= l.stride)
          throw StructureError("conv at layer " + std::to_string(i) + " cannot be mirrored exactly");
        out.push_back(layer::tconv<T>(l.k, l.cout, l.cin, l.stride, l.padding, opad));
        break;
      }
      case LayerKind::fc:
        out.push_back(layer::fc<T>(l.out_units, l.in_units));
        break;
      case LayerKind::relu:
        out.push_back(layer::relu<T>());
        break;
      case LayerKind::batchnorm:
        out.push_back(layer::batchnorm<T>(l.cin));
        break;
      case LayerKind::pool:
        out.push_back(layer::upsample<T>(in_shape[1], in_shape[2]));
        break;
      case LayerKind::flatten:
        out.push_back(layer::unflatten<T>(in_shape));
        break;
      case LayerKind::dropout:
      case LayerKind::residual_add:
        break;  // no mirror; the decoder is a learned inverse, not an exact one
      default:
        throw StructureError(std::string("layer kind ") + layer_kind_name(l.kind) +
                             " has no decoder mirror");
    }
  }
  out.push_back(layer::sigmoid<T>());
  ModelGraph<T> dec;
  dec.input_shape = enc.out_shapes.back();
  dec.layers = std::move(out);
  validate(dec);
  for (auto& l : dec.layers) init_layer_params(l, rng);
  return dec;
}

// Property-inference head: gap+fc over spatial features, a 2-layer mlp over
// flat ones.
template <class T>
ModelGraph<T> build_property_classifier(const Shape& feature_shape, int classes, std::mt19937_64& rng,
                                        int hidden = 64) {
  if (classes < 2) throw ConfigError("property classifier needs at least 2 classes");
  namespace ly = layer;
  std::vector<LayerSpec<T>> ls;
  if (feature_shape.size() == 3) {
    ls.push_back(ly::pool<T>(PoolKind::global_avg));
    ls.push_back(ly::flatten<T>());
    ls.push_back(ly::fc<T>(static_cast<int>(feature_shape[0]), classes));
  } else if (feature_shape.size() == 1) {
    ls.push_back(ly::fc<T>(static_cast<int>(feature_shape[0]), hidden));
    ls.push_back(ly::relu<T>());
    ls.push_back(ly::fc<T>(hidden, classes));
  } else {
    throw DimensionError("property classifier expects rank-1 or rank-3 features");
  }
  ModelGraph<T> g;
  g.input_shape = feature_shape;
  g.layers = std::move(ls);
  validate(g);
  for (auto& l : g.layers) init_layer_params(l, rng);
  return g;
}

template <class T>
ModelGraph<T> build_attack_network(const ModelGraph<T>& encoder, AttackKind kind, int fine_classes,
                                   std::mt19937_64& rng) {
  if (kind == AttackKind::property_inference) {
    if (encoder.layers.empty())
      throw StructureError("property attack needs a nonempty encoder (partition 0 releases raw input)");
    ModelGraph<T> enc = encoder;
    if (enc.out_shapes.size() != enc.layers.size()) validate(enc);
    return build_property_classifier<T>(enc.out_shapes.back(), fine_classes, rng);
  }
  return build_inverse_decoder(encoder, rng);
}

// ---------------------------------------------------------------------------
// losses

// alpha*CE(student, hard) + (1-alpha)*T^2*KL(soft_teacher || soft_student).
// Teacher probabilities are treated as constants.
template <class T>
Tensor<T> distillation_loss(const Tensor<T>& student_logits, const std::vector<int>& hard_labels,
                            const Tensor<T>& teacher_logits, double alpha, double temp) {
  if (alpha < 0.0 || alpha > 1.0) throw ConfigError("distillation alpha must be in [0,1]");
  if (temp <= 0.0) throw ConfigError("distillation temperature must be positive");
  Tensor<T> ce = cross_entropy_loss(student_logits, hard_labels);
  if (alpha == 1.0) return ce;
  if (student_logits.shape() != teacher_logits.shape())
    throw DimensionError("teacher/student logit shapes differ");
  int64_t n = student_logits.shape()[0];
  Tensor<T> p_t, log_p_t;
  {
    TapeSuspend<T> off;  // teacher side carries no gradient
    Tensor<T> scaled = scalar_mul(teacher_logits, static_cast<T>(1.0 / temp));
    p_t = softmax_rows(scaled);
    log_p_t = log_softmax_rows(scaled);
  }
  Tensor<T> log_q = log_softmax_rows(scalar_mul(student_logits, static_cast<T>(1.0 / temp)));
  T plogp = T(0);
  for (size_t i = 0; i < p_t.v().size(); ++i) plogp += p_t.v()[i] * log_p_t.v()[i];
  Tensor<T> cross = sum_all(mul(p_t, log_q));
  Tensor<T> kl = scalar_add(scalar_mul(cross, T(-1)), plogp);  // sum_i p(logp - logq)
  T kd_scale = static_cast<T>((1.0 - alpha) * temp * temp / static_cast<double>(n));
  return add(scalar_mul(ce, static_cast<T>(alpha)), scalar_mul(kl, kd_scale));
}

// ---------------------------------------------------------------------------
// training phases

namespace detail {

inline std::vector<int> epoch_order(const std::vector<int>& indices, std::mt19937_64& rng) {
  std::vector<int> order = indices;
  for (size_t j = order.size(); j > 1; --j) {
    size_t r = rng() % j;
    std::swap(order[j - 1], order[r]);
  }
  return order;
}

}  // namespace detail

// One supervised epoch over `indices` training `opt`'s parameters on the
// composed forward. With a teacher, the distillation objective is used.
template <class T>
void train_task_epoch(ModelGraph<T>& g, Optimizer<T>& opt, ModelGraph<T>* teacher,
                      const SyntheticDataset<T>& ds, const std::vector<int>& indices,
                      const TrainSchedule& sched, std::mt19937_64& rng, int train_from = 0) {
  std::vector<int> order = detail::epoch_order(indices, rng);
  for (size_t off = 0; off < order.size(); off += sched.batch) {
    size_t count = std::min(sched.batch, order.size() - off);
    Tensor<T> x = gather_images(ds, order, off, count);
    std::vector<int> labels = gather_labels(ds.coarse, order, 0, order.size());
    labels = std::vector<int>(labels.begin() + static_cast<int64_t>(off),
                              labels.begin() + static_cast<int64_t>(off + count));
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> cur = x;
    if (train_from > 0) {
      TapeSuspend<T> off_tape;  // frozen front: plain features, no gradient
      ForwardOptions<T> fo;
      fo.to = train_from;
      cur = forward(g, cur, fo);
    }
    ForwardOptions<T> fo;
    fo.training = true;
    fo.rng = &rng;
    fo.from = train_from;
    Tensor<T> logits = forward(g, cur, fo);
    Tensor<T> l;
    if (teacher != nullptr && sched.distill_alpha < 1.0) {
      Tensor<T> t_logits = forward_eval(*teacher, x);
      l = distillation_loss(logits, labels, t_logits, sched.distill_alpha, sched.distill_t);
    } else {
      l = cross_entropy_loss(logits, labels);
    }
    backward(l);
    opt.step();
    opt.zero_grad();
    apply_weight_masks(g);
  }
}

// Attack objective minimized by the decoder; features come from the frozen
// encoder in eval mode.
template <class T>
Tensor<T> attack_loss(ModelGraph<T>& decoder, const Tensor<T>& features, const Tensor<T>& images,
                      const std::vector<int>& fine_labels, AttackKind kind, std::mt19937_64& rng,
                      bool decoder_training) {
  ForwardOptions<T> fo;
  fo.training = decoder_training;
  fo.rng = &rng;
  Tensor<T> out = forward(decoder, features, fo);
  switch (kind) {
    case AttackKind::inversion_mse:
      return mse_loss(out, images);
    case AttackKind::inversion_ssim:
      return scalar_mul(ssim_mean(out, images, 7, static_cast<T>(1e-4), static_cast<T>(9e-4)), T(-1));
    case AttackKind::property_inference:
      return cross_entropy_loss(out, fine_labels);
  }
  throw UsageError("unknown attack kind");
}

template <class T>
void train_decoder_epoch(ModelGraph<T>& composed, ModelGraph<T>& decoder, Optimizer<T>& opt,
                         AttackKind kind, const SyntheticDataset<T>& ds, const std::vector<int>& indices,
                         size_t batch, std::mt19937_64& rng) {
  std::vector<int> order = detail::epoch_order(indices, rng);
  for (size_t off = 0; off < order.size(); off += batch) {
    size_t count = std::min(batch, order.size() - off);
    Tensor<T> x = gather_images(ds, order, off, count);
    std::vector<int> fine = gather_labels(ds.fine, order, off, count);
    Tensor<T> feat;
    {
      TapeSuspend<T> off_tape;
      ForwardOptions<T> fo;
      fo.to = composed.partition;
      feat = forward(composed, x, fo);
    }
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> l = attack_loss(decoder, feat, x, fine, kind, rng, /*decoder_training=*/true);
    backward(l);
    opt.step();
    opt.zero_grad();
  }
}

// Mean attack loss without updates; used for loss-curve checks.
template <class T>
double decoder_loss_on(ModelGraph<T>& composed, ModelGraph<T>& decoder, AttackKind kind,
                       const SyntheticDataset<T>& ds, const std::vector<int>& indices, size_t batch) {
  TapeSuspend<T> off_tape;
  std::mt19937_64 rng(0);
  double acc = 0.0;
  size_t batches = 0;
  for (size_t off = 0; off < indices.size(); off += batch) {
    size_t count = std::min(batch, indices.size() - off);
    Tensor<T> x = gather_images(ds, indices, off, count);
    std::vector<int> fine = gather_labels(ds.fine, indices, off, count);
    ForwardOptions<T> fo;
    fo.to = composed.partition;
    Tensor<T> feat = forward(composed, x, fo);
    acc += static_cast<double>(attack_loss(decoder, feat, x, fine, kind, rng, false).item());
    ++batches;
  }
  return acc / static_cast<double>(batches);
}

// ---------------------------------------------------------------------------
// evaluation

template <class T>
double evaluate_attack(ModelGraph<T>& composed, ModelGraph<T>& decoder, AttackKind kind,
                       const SyntheticDataset<T>& ds, const std::vector<int>& eval_idx,
                       const std::vector<int>& aux_idx, size_t batch = 64) {
  auto [enc, cloud] = partition_split(composed);
  (void)cloud;
  switch (kind) {
    case AttackKind::inversion_mse: {
      double err = mean_l2_reconstruction_error(enc, decoder, ds, eval_idx, batch);
      double norm = blind_predictor_error(ds, aux_idx, eval_idx);
      return privacy_p0(err, norm);
    }
    case AttackKind::inversion_ssim:
      return privacy_p1(enc, decoder, ds, eval_idx, SsimParams{}, batch);
    case AttackKind::property_inference:
      return privacy_p2(enc, decoder, ds, eval_idx, batch);
  }
  throw UsageError("unknown attack kind");
}

// ---------------------------------------------------------------------------
// protocols

template <class T>
struct AdversaryResult {
  ModelGraph<T> decoder;
  MetricsReport report;
};

template <class T>
MetricsReport candidate_report(ModelGraph<T>& composed, ModelGraph<T>& decoder, AttackKind kind,
                               double a_base, int64_t base_params, const std::string& s_variant,
                               const SyntheticDataset<T>& ds) {
  MetricsReport rep;
  rep.a = model_accuracy(composed, ds, ds.eval_idx);
  rep.a_base = a_base;
  rep.p_variant = p_variant_for(kind);
  rep.p = evaluate_attack(composed, decoder, kind, ds, ds.eval_idx, ds.aux_idx);
  PerfIndicators s = perf_indicators(composed);
  rep.s_variant = s_variant;
  rep.s = s_variant == "s2" ? s.s2 : s.s1;
  rep.cr = base_params > 0
               ? 1.0 - static_cast<double>(count_params(composed)) / static_cast<double>(base_params)
               : 0.0;
  rep.fill_reward();
  return rep;
}

// Reactive protocol: the user trains for accuracy only, then the adversary
// fits its decoder against the frozen encoder using the aux split.
template <class T>
AdversaryResult<T> train_reactive(ModelGraph<T>& composed, ModelGraph<T>* teacher, double a_base,
                                  int64_t base_params, const AttackSpec& attack,
                                  const TrainSchedule& sched, const SyntheticDataset<T>& ds,
                                  const std::string& s_variant, std::mt19937_64& rng) {
  if (ds.aux_idx.empty()) throw DataError("reactive training needs a nonempty aux split");
  if (composed.partition <= 0 || composed.partition > composed.layer_count())
    throw StructureError("reactive training needs a partitioned model (partition > 0)");
  Optimizer<T> model_opt(parameters(composed), OptKind::adam, static_cast<T>(sched.lr_model));
  int joint_epochs = sched.rounds * (sched.cloud_epochs + sched.encoder_epochs);
  for (int e = 0; e < joint_epochs; ++e)
    train_task_epoch(composed, model_opt, teacher, ds, ds.train_idx, sched, rng);

  auto [enc, cloud] = partition_split(composed);
  (void)cloud;
  AdversaryResult<T> out{build_attack_network(enc, attack.kind, ds.spec.fine_classes, rng), {}};
  Optimizer<T> dec_opt(parameters(out.decoder), OptKind::adam, static_cast<T>(attack.lr));
  for (int e = 0; e < attack.epochs; ++e)
    train_decoder_epoch(composed, out.decoder, dec_opt, attack.kind, ds, ds.aux_idx, attack.batch, rng);

  out.report = candidate_report(composed, out.decoder, attack.kind, a_base, base_params, s_variant, ds);
  return out;
}

// Proactive protocol (minimax): per round the cloud trains for accuracy, the
// decoder trains its attack against the frozen encoder, then the encoder
// trains to keep accuracy while degrading the decoder. The decoder persists
// across rounds (warm start).
template <class T>
AdversaryResult<T> train_proactive(ModelGraph<T>& composed, ModelGraph<T>* teacher, double a_base,
                                   int64_t base_params, const AttackSpec& attack,
                                   const TrainSchedule& sched, const SyntheticDataset<T>& ds,
                                   const std::string& s_variant, std::mt19937_64& rng) {
  if (ds.aux_idx.empty()) throw DataError("proactive training needs a nonempty aux split");
  int p = composed.partition;
  if (p <= 0 || p > composed.layer_count())
    throw StructureError("proactive training needs a partitioned model (partition > 0)");

  auto [enc0, cloud0] = partition_split(composed);
  (void)cloud0;
  AdversaryResult<T> out{build_attack_network(enc0, attack.kind, ds.spec.fine_classes, rng), {}};

  Optimizer<T> cloud_opt(parameters(composed, p, composed.layer_count()), OptKind::adam,
                         static_cast<T>(sched.lr_model));
  Optimizer<T> enc_opt(parameters(composed, 0, p), OptKind::adam, static_cast<T>(sched.lr_encoder));
  Optimizer<T> dec_opt(parameters(out.decoder), OptKind::adam, static_cast<T>(sched.lr_decoder));
  auto zero_all = [&] {
    cloud_opt.zero_grad();
    enc_opt.zero_grad();
    dec_opt.zero_grad();
  };

  for (int round = 0; round < sched.rounds; ++round) {
    // (a) cloud: accuracy on frozen features
    for (int e = 0; e < sched.cloud_epochs; ++e) {
      train_task_epoch(composed, cloud_opt, teacher, ds, ds.train_idx, sched, rng, /*train_from=*/p);
      zero_all();
    }
    // (b) decoder: attack loss against the frozen encoder
    for (int e = 0; e < sched.decoder_epochs; ++e) {
      train_decoder_epoch(composed, out.decoder, dec_opt, attack.kind, ds, ds.aux_idx, attack.batch, rng);
      zero_all();
    }
    // (c) encoder: task surrogate plus privacy surrogate with everything else frozen
    for (int e = 0; e < sched.encoder_epochs; ++e) {
      std::vector<int> order = detail::epoch_order(ds.train_idx, rng);
      for (size_t off = 0; off < order.size(); off += sched.batch) {
        size_t count = std::min(sched.batch, order.size() - off);
        Tensor<T> x = gather_images(ds, order, off, count);
        std::vector<int> labels = gather_labels(ds.coarse, order, off, count);
        std::vector<int> fine = gather_labels(ds.fine, order, off, count);
        Tape<T> tape;
        TapeScope<T> scope(tape);
        ForwardOptions<T> fo_enc;
        fo_enc.training = true;
        fo_enc.rng = &rng;
        fo_enc.to = p;
        Tensor<T> feat = forward(composed, x, fo_enc);
        ForwardOptions<T> fo_cloud;  // frozen cloud runs in eval mode, gradients still flow
        fo_cloud.from = p;
        Tensor<T> logits = forward(composed, feat, fo_cloud);
        Tensor<T> task_l;
        if (teacher != nullptr && sched.distill_alpha < 1.0) {
          Tensor<T> t_logits = forward_eval(*teacher, x);
          task_l = distillation_loss(logits, labels, t_logits, sched.distill_alpha, sched.distill_t);
        } else {
          task_l = cross_entropy_loss(logits, labels);
        }
        // privacy surrogate: the differentiable stand-in for P_i, minimized
        Tensor<T> dec_out = forward(out.decoder, feat, ForwardOptions<T>{});
        Tensor<T> priv_l;
        switch (attack.kind) {
          case AttackKind::inversion_mse:
            priv_l = scalar_mul(mse_loss(dec_out, x), T(-1));
            break;
          case AttackKind::inversion_ssim:
            priv_l = ssim_mean(dec_out, x, 7, static_cast<T>(1e-4), static_cast<T>(9e-4));
            break;
          case AttackKind::property_inference:
            priv_l = scalar_mul(cross_entropy_loss(dec_out, fine), T(-1));
            break;
        }
        Tensor<T> total = add(task_l, scalar_mul(priv_l, static_cast<T>(sched.privacy_weight)));
        backward(total);
        enc_opt.step();
        zero_all();
        apply_weight_masks(composed);
      }
    }
  }
  out.report = candidate_report(composed, out.decoder, attack.kind, a_base, base_params, s_variant, ds);
  return out;
}

}  // namespace splitnas
