#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "tido/adam.hpp"
#include "tido/datagen.hpp"
#include "tido/error.hpp"
#include "tido/nn.hpp"
#include "tido/prototypes.hpp"
#include "tido/rng.hpp"
#include "tido/tensor.hpp"

namespace tido {

/// Feature extractor f_s and classifier g_s. g_s has one output per source
/// class (in `classes` order) plus a trailing negative-class output.
struct SourceModel {
  Mlp f_s;
  Mlp g_s;
  std::vector<ClassId> classes;

  std::size_t negative_index() const { return classes.size(); }
  std::size_t latent_dim() const { return f_s.output_dim(); }

  std::size_t index_of(ClassId c) const {
    auto it = std::find(classes.begin(), classes.end(), c);
    if (it == classes.end()) {
      throw InvalidArgument("source model: unknown class " + std::to_string(c));
    }
    return static_cast<std::size_t>(it - classes.begin());
  }

  void check() const {
    if (g_s.output_dim() != classes.size() + 1) {
      throw InvalidState("source model: g_s width must be |C_s| + 1");
    }
    if (f_s.output_dim() != g_s.input_dim()) {
      throw InvalidState("source model: latent dim mismatch");
    }
  }

  friend bool operator==(const SourceModel&, const SourceModel&) = default;
};

/// Synthetic unknown-class latents, all labeled with the negative class.
struct NegativeBatch {
  Tensor samples;
  std::size_t label = 0;  // always |C_s|
};

struct ForesightConfig {
  std::size_t latent_dim = 8;
  std::vector<std::size_t> hidden = {16};
  std::vector<std::size_t> classifier_hidden = {16};
  std::size_t epochs = 150;
  std::size_t batch_size = 64;
  double learning_rate = 5e-3;
  double separability_learning_rate = 1e-3;
  double negative_ratio = 1.0;  // N_neg / N_src
  double k_sigma = kDefaultKSigma;
  bool use_separability = true;
  double plateau_tolerance = 1e-5;
  std::size_t plateau_epochs = 10;
  std::uint64_t seed = 0;

  void validate() const {
    if (latent_dim == 0 || epochs == 0 || batch_size == 0) {
      throw InvalidArgument("foresight config: counts must be positive");
    }
    if (!(negative_ratio > 0.0)) {
      throw InvalidArgument("foresight config: negative_ratio must be positive");
    }
    if (!(k_sigma > 0.0) || !(learning_rate > 0.0) ||
        !(separability_learning_rate > 0.0)) {
      throw InvalidArgument("foresight config: rates and k_sigma must be positive");
    }
  }
};

inline constexpr std::size_t kNegativeRetryBudget = 100;

/// Shell sampling just outside the k-sigma gate: pick a prototype uniformly,
/// a direction uniformly on the unit sphere, and a normalized radius in
/// [k + 0.5, k + 2], scaled per dimension by sigma. Draws that are not OOD
/// with respect to every prototype are redrawn.
inline NegativeBatch generate_negatives(const PrototypeSet& ps, std::size_t n,
                                        std::uint64_t seed,
                                        double k_sigma = kDefaultKSigma) {
  if (ps.empty()) throw InvalidState("generate_negatives: empty prototype set");
  const auto classes = ps.classes();
  const std::size_t d = ps.latent_dim();
  NegativeBatch out{Tensor::matrix(n, d), classes.size()};
  Rng rng(derive_seed(seed, "negatives"));
  std::vector<double> u(d);
  for (std::size_t r = 0; r < n; ++r) {
    bool accepted = false;
    for (std::size_t attempt = 0; attempt <= kNegativeRetryBudget; ++attempt) {
      const auto& p = ps.at(classes[rng.index(classes.size())]);
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        u[j] = rng.normal();
        norm += u[j] * u[j];
      }
      norm = std::sqrt(norm);
      if (norm == 0.0) continue;
      const double radius = rng.uniform(k_sigma + 0.5, k_sigma + 2.0);
      for (std::size_t j = 0; j < d; ++j) {
        u[j] = p.mean[j] + radius * std::sqrt(p.var[j]) * u[j] / norm;
      }
      if (is_ood(ps, u, k_sigma).ood) {
        std::copy(u.begin(), u.end(), out.samples.row(r).begin());
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      throw GenerationFailure(
          "generate_negatives: rejection budget exhausted; prototypes overlap");
    }
  }
  return out;
}

struct SourceGrads {
  Gradients f_s;
  Gradients g_s;
};

struct SourceLoss {
  double loss = 0.0;
  SourceGrads grads;
};

/// Labeled latents fed straight into g_s (proxy samples of earlier classes
/// when the source model is extended).
struct LatentBatch {
  Tensor u;
  std::vector<std::size_t> labels;  // g_s output indices
};

/// Cross-entropy at tau = 1 of g_s(f_s(x)) against the source labels plus
/// cross-entropy of g_s(u_n) against the negative class; each term averaged
/// over its own batch and scaled by its weight.
inline SourceLoss source_objective(const SourceModel& m, const Tensor& x,
                                   std::span<const std::size_t> labels,
                                   const NegativeBatch& neg,
                                   const LatentBatch* latent = nullptr,
                                   double source_weight = 1.0) {
  m.check();
  SourceLoss out{0.0, {m.f_s.zero_gradients(), m.g_s.zero_gradients()}};
  const std::size_t k = m.g_s.output_dim();
  for (std::size_t y : labels) {
    if (y >= k) throw InvalidArgument("loss_s2: label exceeds |C_s| + 1 outputs");
  }
  if (neg.label >= k) throw InvalidArgument("loss_s2: negative label out of range");
  if (x.rows() > 0) {
    MlpCache fc, gc;
    Tensor u = m.f_s.forward(x, fc);
    Tensor z = m.g_s.forward(u, gc);
    auto ce = softmax_cross_entropy(z, labels, 1.0, source_weight);
    out.loss += ce.loss;
    Tensor du;
    m.g_s.backward(gc, ce.grad, out.grads.g_s, &du);
    m.f_s.backward(fc, du, out.grads.f_s);
  }
  auto head_only = [&](const Tensor& u, std::span<const std::size_t> ys) {
    if (u.rows() == 0) return;
    MlpCache gc;
    Tensor z = m.g_s.forward(u, gc);
    auto ce = softmax_cross_entropy(z, ys, 1.0);
    out.loss += ce.loss;
    m.g_s.backward(gc, ce.grad, out.grads.g_s);
  };
  std::vector<std::size_t> neg_labels(neg.samples.rows(), neg.label);
  head_only(neg.samples, neg_labels);
  if (latent != nullptr) head_only(latent->u, latent->labels);
  return out;
}

/// Distillation-form classification loss with its two expectation terms:
/// source samples and negative samples, both at tau = 1.
inline SourceLoss loss_s2(const SourceModel& m, const Tensor& x,
                          std::span<const std::size_t> labels,
                          const NegativeBatch& neg) {
  if (x.rows() == 0 && neg.samples.rows() == 0) {
    throw InvalidArgument("loss_s2: both batches empty");
  }
  return source_objective(m, x, labels, neg);
}

struct ForesightLogRow {
  std::size_t epoch = 0;
  double l_ce = 0.0;
  double l_s1 = 0.0;
  double l_s2 = 0.0;
  double total = 0.0;
};

struct ForesightResult {
  SourceModel model;
  PrototypeSet prototypes;
  std::vector<ForesightLogRow> log;
  bool converged = false;  // stopped on the plateau rule
  std::vector<ClassId> omitted_classes;
};

/// Raised on a non-finite loss; carries the last finite checkpoint.
struct ForesightDiverged : TrainingDiverged {
  ForesightDiverged(const std::string& what, SourceModel m, PrototypeSet p)
      : TrainingDiverged(what), last_good(std::move(m)), prototypes(std::move(p)) {}
  SourceModel last_good;
  PrototypeSet prototypes;
};

/// Warm start for extending an existing source model with new classes:
/// earlier classes are represented only through proxy samples.
struct ForesightWarmStart {
  SourceModel model;
  PrototypeSet prototypes;
  std::size_t proxy_per_class = 200;
};

namespace detail {

inline std::vector<std::size_t> to_indices(const SourceModel& m,
                                           std::span<const ClassId> labels) {
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (ClassId c : labels) out.push_back(m.index_of(c));
  return out;
}

inline std::size_t negative_count(std::size_t n_src, double ratio) {
  return std::max<std::size_t>(
      1, static_cast<std::size_t>(std::llround(ratio * static_cast<double>(n_src))));
}

}  // namespace detail

/// Stage-1 training. Each epoch alternates (a) Adam on l_ce + L_s2 over
/// f_s and g_s, (b) prototype refit on the current latents, (c) Adam on the
/// separability loss over f_s only, (d) fresh negatives from the refit
/// prototypes.
inline ForesightResult train_foresight(
    const Dataset& data, const ForesightConfig& cfg,
    const std::optional<ForesightWarmStart>& warm = std::nullopt) {
  cfg.validate();
  const auto new_classes = data.classes();
  std::map<ClassId, std::size_t> counts;
  for (ClassId c : data.labels) ++counts[c];
  if (!warm) {
    if (new_classes.size() < 2) {
      throw InvalidArgument("train_foresight: need at least two classes");
    }
    for (const auto& [c, n] : counts) {
      if (n < 2) {
        throw InvalidArgument("train_foresight: class " + std::to_string(c) +
                              " has fewer than two samples");
      }
    }
  } else if (data.size() == 0) {
    throw InvalidArgument("train_foresight: no new source data");
  }

  Rng init_rng(derive_seed(cfg.seed, "foresight-init"));
  SourceModel model;
  PrototypeSet prior;
  LatentBatch proxy;
  if (warm) {
    model = warm->model;
    prior = warm->prototypes;
    std::vector<ClassId> added;
    for (ClassId c : new_classes) {
      if (std::find(model.classes.begin(), model.classes.end(), c) ==
          model.classes.end()) {
        added.push_back(c);
      }
    }
    model.g_s.insert_outputs_before_tail(added.size(), 1, init_rng);
    model.classes.insert(model.classes.end(), added.begin(), added.end());
    // Replay only classes the source head already owns; target-private
    // prototypes are carried through untouched.
    PrototypeSet owned(prior.latent_dim());
    for (const auto& [c, p] : prior) {
      if (std::find(warm->model.classes.begin(), warm->model.classes.end(), c) !=
          warm->model.classes.end()) {
        owned.insert(p);
      }
    }
    auto batch = sample_proxy_batch(owned, warm->proxy_per_class,
                                    derive_seed(cfg.seed, "foresight-proxy"));
    proxy.u = batch.x;
    proxy.labels = detail::to_indices(model, batch.labels);
  } else {
    std::vector<std::size_t> fdims{data.feature_dim()};
    fdims.insert(fdims.end(), cfg.hidden.begin(), cfg.hidden.end());
    fdims.push_back(cfg.latent_dim);
    std::vector<std::size_t> gdims{cfg.latent_dim};
    gdims.insert(gdims.end(), cfg.classifier_hidden.begin(),
                 cfg.classifier_hidden.end());
    gdims.push_back(new_classes.size() + 1);
    model.f_s = Mlp::random(fdims, init_rng);
    model.g_s = Mlp::random(gdims, init_rng);
    model.classes = new_classes;
  }
  model.check();

  const std::size_t n = data.size();
  const auto label_idx = detail::to_indices(model, data.labels);
  const std::size_t n_neg = detail::negative_count(n, cfg.negative_ratio);

  auto current_prototypes = [&]() {
    auto fit = fit_prototypes(model.f_s.forward(data.x), data.labels, new_classes);
    if (!warm) return fit;
    // Earlier classes keep their stored prototypes.
    PrototypeSet merged(prior.latent_dim());
    for (const auto& [c, p] : prior) {
      if (!fit.prototypes.contains(c)) merged.insert(p);
    }
    for (const auto& [c, p] : fit.prototypes) merged.insert(p);
    fit.prototypes = std::move(merged);
    return fit;
  };

  auto fit = current_prototypes();
  PrototypeSet ps = fit.prototypes;
  // ps may hold target-private classes g_s does not own
  auto fresh_negatives = [&](std::uint64_t tag) {
    auto nb = generate_negatives(ps, n_neg, derive_seed(cfg.seed, tag), cfg.k_sigma);
    nb.label = model.negative_index();
    return nb;
  };
  NegativeBatch negatives = fresh_negatives(0);

  auto cls_opt = AdamState::with_rate(cfg.learning_rate);
  auto sep_opt = AdamState::with_rate(cfg.separability_learning_rate);

  auto evaluate_epoch = [&](std::size_t epoch) {
    ForesightLogRow row{epoch};
    Tensor u = model.f_s.forward(data.x);
    Tensor z = model.g_s.forward(u);
    row.l_ce = softmax_cross_entropy(z, label_idx, 1.0).loss;
    row.l_s2 = row.l_ce;
    std::vector<std::size_t> neg_labels(negatives.samples.rows(), negatives.label);
    row.l_s2 += softmax_cross_entropy(model.g_s.forward(negatives.samples),
                                      neg_labels, 1.0).loss;
    row.l_s1 = cfg.use_separability
                   ? separability_loss_batch(ps, u, data.labels).loss
                   : 0.0;
    row.total = row.l_ce + row.l_s1 + row.l_s2;
    return row;
  };

  ForesightResult result;
  result.log.push_back(evaluate_epoch(0));
  if (!std::isfinite(result.log.back().total)) {
    throw ForesightDiverged("train_foresight: non-finite initial loss", model, ps);
  }
  SourceModel last_good = model;
  PrototypeSet last_good_ps = ps;
  double best_total = result.log.back().total;
  std::size_t stalled = 0;

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng shuffle_rng(derive_seed(cfg.seed, "foresight-shuffle"));

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    const std::size_t batches = (n + cfg.batch_size - 1) / cfg.batch_size;

    // (a) classification with negatives
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(n, lo + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + lo, hi - lo);
      Tensor xb = data.x.gather_rows(idx);
      std::vector<std::size_t> yb;
      for (std::size_t i : idx) yb.push_back(label_idx[i]);
      const std::size_t nlo = b * n_neg / batches;
      const std::size_t nhi = (b + 1) * n_neg / batches;
      std::vector<std::size_t> nidx(nhi - nlo);
      std::iota(nidx.begin(), nidx.end(), nlo);
      NegativeBatch nb{negatives.samples.gather_rows(nidx), negatives.label};
      if (nidx.empty()) nb.samples = Tensor::matrix(0, model.latent_dim());
      LatentBatch pb;
      const LatentBatch* pbp = nullptr;
      if (warm && proxy.u.rows() > 0) {
        const std::size_t plo = b * proxy.u.rows() / batches;
        const std::size_t phi = (b + 1) * proxy.u.rows() / batches;
        std::vector<std::size_t> pidx(phi - plo);
        std::iota(pidx.begin(), pidx.end(), plo);
        pb.u = proxy.u.gather_rows(pidx);
        for (std::size_t i : pidx) pb.labels.push_back(proxy.labels[i]);
        pbp = &pb;
      }
      // l_ce and the first L_s2 term coincide at tau = 1, hence weight 2.
      auto loss = source_objective(model, xb, yb, nb, pbp, 2.0);
      if (!std::isfinite(loss.loss) || !all_finite(loss.grads.f_s) ||
          !all_finite(loss.grads.g_s)) {
        throw ForesightDiverged("train_foresight: non-finite loss at epoch " +
                                    std::to_string(epoch),
                                last_good, last_good_ps);
      }
      adam_step({{&model.f_s, &loss.grads.f_s}, {&model.g_s, &loss.grads.g_s}},
                cls_opt);
    }

    // (b) refit prototypes on the current latent space
    ps = current_prototypes().prototypes;

    // (c) pull latents toward their class prototypes (f_s only)
    if (cfg.use_separability && ps.size() >= 2) {
      for (std::size_t b = 0; b < batches; ++b) {
        const std::size_t lo = b * cfg.batch_size;
        const std::size_t hi = std::min(n, lo + cfg.batch_size);
        std::span<const std::size_t> idx(order.data() + lo, hi - lo);
        Tensor xb = data.x.gather_rows(idx);
        std::vector<ClassId> yb;
        for (std::size_t i : idx) yb.push_back(data.labels[i]);
        MlpCache fc;
        Tensor u = model.f_s.forward(xb, fc);
        auto sep = separability_loss_batch(ps, u, yb);
        Gradients gf = model.f_s.zero_gradients();
        model.f_s.backward(fc, sep.grad, gf);
        if (!std::isfinite(sep.loss) || !all_finite(gf)) {
          throw ForesightDiverged("train_foresight: non-finite separability loss",
                                  last_good, last_good_ps);
        }
        adam_step({{&model.f_s, &gf}}, sep_opt);
      }
    }

    // (d) negatives from the refreshed prototypes
    negatives = fresh_negatives(epoch);

    auto row = evaluate_epoch(epoch);
    if (!std::isfinite(row.total)) {
      throw ForesightDiverged("train_foresight: non-finite loss at epoch " +
                                  std::to_string(epoch),
                              last_good, last_good_ps);
    }
    result.log.push_back(row);
    last_good = model;
    last_good_ps = ps;

    if (best_total - row.total < cfg.plateau_tolerance) {
      if (++stalled >= cfg.plateau_epochs) {
        result.converged = true;
        break;
      }
    } else {
      stalled = 0;
    }
    best_total = std::min(best_total, row.total);
  }

  auto final_fit = current_prototypes();
  result.model = std::move(model);
  result.prototypes = std::move(final_fit.prototypes);
  result.omitted_classes = std::move(final_fit.omitted);
  return result;
}

/// Argmax of g_s(f_s(x)) over all outputs (the negative class included).
inline std::vector<std::size_t> source_predict_raw(const SourceModel& m,
                                                   const Tensor& x) {
  Tensor z = m.g_s.forward(m.f_s.forward(x));
  std::vector<std::size_t> out(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    out[r] = static_cast<std::size_t>(
        std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

/// Source-only prediction restricted to the known classes.
inline std::vector<ClassId> source_predict(const SourceModel& m, const Tensor& x) {
  Tensor z = m.g_s.forward(m.f_s.forward(x));
  std::vector<ClassId> out(z.rows());
  for (std::size_t r = 0; r < z.rows(); ++r) {
    auto row = z.row(r);
    auto it = std::max_element(row.begin(), row.begin() + m.classes.size());
    out[r] = m.classes[static_cast<std::size_t>(it - row.begin())];
  }
  return out;
}

}  // namespace tido
