#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "tido/adam.hpp"
#include "tido/datagen.hpp"
#include "tido/error.hpp"
#include "tido/foresight.hpp"
#include "tido/nn.hpp"
#include "tido/prototypes.hpp"
#include "tido/rng.hpp"
#include "tido/tensor.hpp"

namespace tido {

/// Target feature extractor f_t and private-class head g_t. g_t is absent
/// (no layers) until the first private class is introduced.
struct TargetModel {
  Mlp f_t;
  Mlp g_t;
  std::vector<ClassId> classes;  // g_t output order

  bool has_head() const { return !classes.empty(); }

  friend bool operator==(const TargetModel&, const TargetModel&) = default;
};

/// Domain projection f_e: U -> U(t+1) and its inverse f_d.
struct AutoEncoder {
  Mlp f_e;
  Mlp f_d;

  friend bool operator==(const AutoEncoder&, const AutoEncoder&) = default;
};

/// Domain discriminator on target-space latents: output 0 = source, 1 = target.
struct Discriminator {
  Mlp d;

  friend bool operator==(const Discriminator&, const Discriminator&) = default;
};

/// Class anchors in the target latent space.
struct GuideSet {
  std::map<ClassId, std::vector<double>> guides;
  std::set<ClassId> shared;
  std::set<ClassId> private_classes;

  std::size_t size() const { return guides.size(); }
  bool empty() const { return guides.empty(); }
};

struct StepClasses {
  std::vector<ClassId> shared;
  std::vector<ClassId> private_classes;
};

/// Per-step label sets plus the current index.
struct ClassRegistry {
  std::vector<StepClasses> steps;

  std::set<ClassId> known() const {
    std::set<ClassId> out;
    for (const auto& s : steps) {
      out.insert(s.shared.begin(), s.shared.end());
      out.insert(s.private_classes.begin(), s.private_classes.end());
    }
    return out;
  }
};

struct IncrementState {
  SourceModel source;
  TargetModel target;
  AutoEncoder ae;
  Discriminator disc;
  PrototypeSet prototypes;
  GuideSet guides;
  ClassRegistry registry;
  std::size_t step = 0;  // completed increments

  // Joint output order: g_s classes, then g_t classes.
  std::vector<ClassId> joint_classes() const {
    std::vector<ClassId> out = source.classes;
    out.insert(out.end(), target.classes.begin(), target.classes.end());
    return out;
  }

  std::size_t joint_index(ClassId c) const {
    const auto all = joint_classes();
    auto it = std::find(all.begin(), all.end(), c);
    if (it == all.end()) {
      throw InvalidArgument("class " + std::to_string(c) + " outside registry");
    }
    return static_cast<std::size_t>(it - all.begin());
  }

  std::size_t parameter_count() const {
    std::size_t n = source.f_s.parameter_count() + source.g_s.parameter_count() +
                    target.f_t.parameter_count() + ae.f_e.parameter_count() +
                    ae.f_d.parameter_count() + disc.d.parameter_count();
    if (target.has_head()) n += target.g_t.parameter_count();
    return n;
  }

  friend bool operator==(const IncrementState&, const IncrementState&) = default;
};

inline bool operator==(const GuideSet& a, const GuideSet& b) {
  return a.guides == b.guides && a.shared == b.shared &&
         a.private_classes == b.private_classes;
}
inline bool operator==(const StepClasses& a, const StepClasses& b) {
  return a.shared == b.shared && a.private_classes == b.private_classes;
}
inline bool operator==(const ClassRegistry& a, const ClassRegistry& b) {
  return a.steps == b.steps;
}

struct IncrementConfig {
  std::vector<std::size_t> head_hidden = {16};           // g_t
  std::vector<std::size_t> discriminator_hidden = {32};  // d
  std::vector<std::size_t> autoencoder_hidden = {};      // empty: linear f_e, f_d
  bool autoencoder_identity_init = true;

  std::size_t ae_epochs = 100;
  std::size_t ae_batch_per_class = 64;
  double ae_learning_rate = 1e-3;

  std::size_t epochs = 300;
  std::size_t proxy_per_class = 64;
  double confident_fraction = 0.5;
  double distillation_tau = 2.0;
  double reversal_coefficient = 0.5;

  double lr_c = 5e-3;
  double lr_disc = 5e-3;
  double lr_confusion = 1e-3;
  double lr_r1 = 1e-4;
  double lr_r2 = 1e-4;

  std::uint64_t seed = 0;

  void validate() const {
    if (!(confident_fraction > 0.0 && confident_fraction <= 1.0)) {
      throw InvalidArgument("increment config: confident fraction must be in (0, 1]");
    }
    if (!(distillation_tau > 0.0)) {
      throw InvalidArgument("increment config: tau must be positive");
    }
    if (proxy_per_class == 0) {
      throw InvalidArgument("increment config: proxy_per_class must be positive");
    }
    for (double lr : {ae_learning_rate, lr_c, lr_disc, lr_confusion, lr_r1, lr_r2}) {
      if (!(lr > 0.0)) throw InvalidArgument("increment config: non-positive rate");
    }
  }
};

namespace detail {

inline std::vector<std::size_t> with_ends(std::size_t in,
                                          const std::vector<std::size_t>& hidden,
                                          std::size_t out) {
  std::vector<std::size_t> dims{in};
  dims.insert(dims.end(), hidden.begin(), hidden.end());
  dims.push_back(out);
  return dims;
}

}  // namespace detail

inline AutoEncoder make_autoencoder(std::size_t latent_dim,
                                    const IncrementConfig& cfg, Rng& rng) {
  if (cfg.autoencoder_hidden.empty() && cfg.autoencoder_identity_init) {
    return {Mlp::identity(latent_dim), Mlp::identity(latent_dim)};
  }
  const auto dims = detail::with_ends(latent_dim, cfg.autoencoder_hidden, latent_dim);
  return {Mlp::random(dims, rng), Mlp::random(dims, rng)};
}

/// Stage-2 starting point from a foresight checkpoint: f_t starts as a copy
/// of f_s, the autoencoder and discriminator are freshly built.
inline IncrementState make_initial_state(const SourceModel& model,
                                         const PrototypeSet& prototypes,
                                         const IncrementConfig& cfg) {
  model.check();
  if (prototypes.latent_dim() != model.latent_dim()) {
    throw InvalidArgument("initial state: prototype/latent dim mismatch");
  }
  Rng rng(derive_seed(cfg.seed, "increment-init"));
  IncrementState s;
  s.source = model;
  s.target.f_t = model.f_s;
  s.ae = make_autoencoder(model.latent_dim(), cfg, rng);
  s.disc.d = Mlp::random(
      detail::with_ends(model.latent_dim(), cfg.discriminator_hidden, 2), rng);
  s.prototypes = prototypes;
  s.registry.steps.push_back({model.classes, {}});
  return s;
}

// ---------------------------------------------------------------------------
// Guides, pseudo-labels, confident samples
// ---------------------------------------------------------------------------

/// Shared guides f_e(mu_c) for the step's shared classes (every prototype
/// class when `shared` is absent); private guides f_t(x) of the one-shot
/// sample of each new private class.
inline GuideSet init_guides(const IncrementState& s,
                            const std::map<ClassId, std::vector<double>>& one_shot,
                            std::span<const ClassId> private_classes,
                            const std::optional<std::vector<ClassId>>& shared = {}) {
  GuideSet g;
  const std::vector<ClassId> shared_classes = shared ? *shared : s.prototypes.classes();
  for (ClassId c : shared_classes) {
    if (!s.prototypes.contains(c)) {
      throw InvalidArgument("init_guides: no prototype for shared class " +
                            std::to_string(c));
    }
    g.guides[c] = s.ae.f_e.forward_one(s.prototypes.at(c).mean);
    g.shared.insert(c);
  }
  for (ClassId c : private_classes) {
    auto it = one_shot.find(c);
    if (it == one_shot.end()) {
      throw InvalidArgument("init_guides: missing one-shot sample for class " +
                            std::to_string(c));
    }
    if (g.shared.count(c)) {
      throw InvalidArgument("init_guides: class " + std::to_string(c) +
                            " is already known");
    }
    g.guides[c] = s.target.f_t.forward_one(it->second);
    g.private_classes.insert(c);
  }
  return g;
}

struct PseudoLabel {
  ClassId label = 0;
  double distance = 0.0;
};

/// Nearest guide by Euclidean distance; ties go to the lowest class id.
inline PseudoLabel pseudo_label(std::span<const double> v, const GuideSet& guides) {
  if (guides.empty()) throw InvalidState("pseudo_label: empty guide set");
  PseudoLabel best{0, std::numeric_limits<double>::infinity()};
  for (const auto& [c, g] : guides.guides) {
    if (g.size() != v.size()) throw InvalidArgument("pseudo_label: dim mismatch");
    const double d = squared_distance(v, g);
    if (d < best.distance) best = {c, d};
  }
  best.distance = std::sqrt(best.distance);
  return best;
}

struct LabeledSample {
  std::size_t sample = 0;  // row in the target batch
  ClassId label = 0;
  double distance = 0.0;
};

struct ConfidentEntry {
  std::size_t sample = 0;
  std::vector<double> latent;
  double distance = 0.0;
};

struct ConfidentSet {
  std::map<ClassId, std::vector<ConfidentEntry>> by_class;
  double fraction = 1.0;

  std::size_t size() const {
    std::size_t n = 0;
    for (const auto& [c, v] : by_class) n += v.size();
    return n;
  }
  bool empty() const { return size() == 0; }
};

inline std::size_t confident_quota(double fraction, std::size_t n) {
  const double q = std::ceil(fraction * static_cast<double>(n) - 1e-9);
  return std::min(n, static_cast<std::size_t>(std::max(q, 0.0)));
}

/// Per pseudo-class, the ceil(fraction * N_c) smallest-distance samples in
/// ascending distance order (ties by sample index). `latents` supplies the
/// stored latent vector for each sample row and may be empty.
inline ConfidentSet select_confident(std::span<const LabeledSample> labeled,
                                     double fraction, const Tensor* latents = nullptr) {
  if (!(fraction > 0.0 && fraction <= 1.0)) {
    throw InvalidArgument("select_confident: fraction must be in (0, 1]");
  }
  std::map<ClassId, std::vector<LabeledSample>> buckets;
  for (const auto& l : labeled) buckets[l.label].push_back(l);
  ConfidentSet out;
  out.fraction = fraction;
  for (auto& [c, v] : buckets) {
    std::sort(v.begin(), v.end(), [](const LabeledSample& a, const LabeledSample& b) {
      return a.distance != b.distance ? a.distance < b.distance : a.sample < b.sample;
    });
    const std::size_t keep = confident_quota(fraction, v.size());
    auto& dst = out.by_class[c];
    for (std::size_t i = 0; i < keep; ++i) {
      ConfidentEntry e{v[i].sample, {}, v[i].distance};
      if (latents != nullptr) e.latent = latents->row_vector(v[i].sample);
      dst.push_back(std::move(e));
    }
  }
  return out;
}

inline std::vector<LabeledSample> label_batch(const Tensor& latents,
                                              const GuideSet& guides) {
  std::vector<LabeledSample> out(latents.rows());
  for (std::size_t r = 0; r < latents.rows(); ++r) {
    const auto pl = pseudo_label(latents.row(r), guides);
    out[r] = {r, pl.label, pl.distance};
  }
  return out;
}

// ---------------------------------------------------------------------------
// Joint classifier and losses
// ---------------------------------------------------------------------------

/// Gradient buffers for every trainable stage-2 network.
struct StageGrads {
  Gradients f_t, g_t, f_e, f_d, d;

  static StageGrads zeros(const IncrementState& s) {
    StageGrads g;
    g.f_t = s.target.f_t.zero_gradients();
    if (s.target.has_head()) g.g_t = s.target.g_t.zero_gradients();
    g.f_e = s.ae.f_e.zero_gradients();
    g.f_d = s.ae.f_d.zero_gradients();
    g.d = s.disc.d.zero_gradients();
    return g;
  }
};

struct StageLoss {
  double loss = 0.0;
  StageGrads grads;
};

namespace detail {

struct JointCache {
  MlpCache fd, gs, gt;
  std::size_t rows = 0;
};

// Logits [g_s(f_d(v)) restricted to C_s | g_t(v)].
inline Tensor joint_logits(const IncrementState& s, const Tensor& v, JointCache& c) {
  const std::size_t ks = s.source.classes.size();
  Tensor u_hat = s.ae.f_d.forward(v, c.fd);
  Tensor zs = s.source.g_s.forward(u_hat, c.gs).slice_cols(0, ks);
  c.rows = v.rows();
  if (!s.target.has_head()) return zs;
  Tensor zt = s.target.g_t.forward(v, c.gt);
  return concat_cols(zs, zt);
}

// Backpropagates d loss / d logits; accumulates into g.f_d (if non-null) and
// g.g_t (if non-null) and returns d loss / d v.
inline Tensor joint_backward(const IncrementState& s, const JointCache& c,
                             const Tensor& dz, Gradients* fd_grads,
                             Gradients* gt_grads) {
  const std::size_t ks = s.source.classes.size();
  Tensor dzs = Tensor::matrix(c.rows, ks + 1);  // negative-class logit unused
  for (std::size_t r = 0; r < c.rows; ++r) {
    for (std::size_t k = 0; k < ks; ++k) dzs(r, k) = dz(r, k);
  }
  Tensor du_hat = s.source.g_s.backward_input(c.gs, dzs);
  Tensor dv;
  if (fd_grads != nullptr) {
    s.ae.f_d.backward(c.fd, du_hat, *fd_grads, &dv);
  } else {
    dv = s.ae.f_d.backward_input(c.fd, du_hat);
  }
  if (s.target.has_head()) {
    Tensor dzt = dz.slice_cols(ks, dz.cols());
    Tensor dv2;
    if (gt_grads != nullptr) {
      s.target.g_t.backward(c.gt, dzt, *gt_grads, &dv2);
    } else {
      dv2 = s.target.g_t.backward_input(c.gt, dzt);
    }
    dv += dv2;
  }
  return dv;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace detail

struct JointPrediction {
  Tensor probs;                    // one row per input, joint_classes() order
  std::vector<ClassId> predicted;
};

/// v = f_t(x); probabilities softmax([g_s(f_d(v))|C_s, g_t(v)]) at tau = 1.
inline JointPrediction joint_predict(const IncrementState& s, const Tensor& x) {
  if (x.cols() != s.target.f_t.input_dim()) {
    throw InvalidArgument("joint_predict: input dim mismatch");
  }
  detail::JointCache c;
  Tensor v = s.target.f_t.forward(x);
  Tensor z = detail::joint_logits(s, v, c);
  const auto classes = s.joint_classes();
  JointPrediction out{Tensor(z.shape()), std::vector<ClassId>(z.rows())};
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const auto p = softmax_temp(z.row(r), 1.0);
    std::copy(p.begin(), p.end(), out.probs.row(r).begin());
    out.predicted[r] = classes[detail::argmax(p)];
  }
  return out;
}

/// Distillation loss on proxy latents u ~ P_c: CE of the tau-softmax of the
/// joint logits of the f_e -> (f_d -> g_s | g_t) pathway against class c.
inline StageLoss loss_r1(const IncrementState& s, const LabeledBatch& proxy,
                         double tau) {
  StageLoss out{0.0, StageGrads::zeros(s)};
  if (proxy.x.rows() == 0) return out;
  std::vector<std::size_t> idx;
  for (ClassId c : proxy.labels) idx.push_back(s.joint_index(c));
  MlpCache ec;
  detail::JointCache jc;
  Tensor v = s.ae.f_e.forward(proxy.x, ec);
  Tensor z = detail::joint_logits(s, v, jc);
  auto ce = softmax_cross_entropy(z, idx, tau);
  out.loss = ce.loss;
  Tensor dv = detail::joint_backward(s, jc, ce.grad, &out.grads.f_d,
                                     s.target.has_head() ? &out.grads.g_t : nullptr);
  s.ae.f_e.backward(ec, dv, out.grads.f_e);
  return out;
}

/// Reconstruction: mse(f_d(f_e(u)), u) over proxy latents plus the target
/// cycle mse(f_e(f_d(v_t)), v_t) with v_t = f_t(x_t).
inline StageLoss loss_r2(const IncrementState& s, const Tensor& proxy,
                         const Tensor& target) {
  StageLoss out{0.0, StageGrads::zeros(s)};
  if (proxy.rows() > 0) {
    MlpCache ec, dc;
    Tensor v = s.ae.f_e.forward(proxy, ec);
    Tensor rec = s.ae.f_d.forward(v, dc);
    out.loss += mse(rec, proxy);
    Tensor dv;
    s.ae.f_d.backward(dc, mse_grad(rec, proxy), out.grads.f_d, &dv);
    s.ae.f_e.backward(ec, dv, out.grads.f_e);
  }
  if (target.rows() > 0) {
    MlpCache tc, dc, ec;
    Tensor v = s.target.f_t.forward(target, tc);
    Tensor u = s.ae.f_d.forward(v, dc);
    Tensor cyc = s.ae.f_e.forward(u, ec);
    out.loss += mse(cyc, v);
    Tensor g = mse_grad(cyc, v);
    Tensor du;
    s.ae.f_e.backward(ec, g, out.grads.f_e, &du);
    Tensor dv;
    s.ae.f_d.backward(dc, du, out.grads.f_d, &dv);
    // The reference v is itself a function of f_t.
    for (std::size_t i = 0; i < dv.size(); ++i) dv[i] -= g[i];
    s.target.f_t.backward(tc, dv, out.grads.f_t);
  }
  return out;
}

/// Cross-entropy of the joint prediction on confident target samples
/// against their pseudo-labels. An empty set yields 0 and sets `empty`.
struct ConfidentLoss : StageLoss {
  bool empty = false;
};

inline ConfidentLoss loss_c(const IncrementState& s, const Tensor& target,
                            const ConfidentSet& confident) {
  ConfidentLoss out;
  out.grads = StageGrads::zeros(s);
  std::vector<std::size_t> rows;
  std::vector<std::size_t> idx;
  for (const auto& [c, entries] : confident.by_class) {
    const std::size_t j = s.joint_index(c);
    for (const auto& e : entries) {
      rows.push_back(e.sample);
      idx.push_back(j);
    }
  }
  if (rows.empty()) {
    out.empty = true;
    return out;
  }
  Tensor x = target.gather_rows(rows);
  MlpCache tc;
  detail::JointCache jc;
  Tensor v = s.target.f_t.forward(x, tc);
  Tensor z = detail::joint_logits(s, v, jc);
  auto ce = softmax_cross_entropy(z, idx, 1.0);
  out.loss = ce.loss;
  Tensor dv = detail::joint_backward(s, jc, ce.grad, &out.grads.f_d,
                                     s.target.has_head() ? &out.grads.g_t : nullptr);
  s.target.f_t.backward(tc, dv, out.grads.f_t);
  return out;
}

struct DomainLoss {
  double discriminator = 0.0;  // minimized by d
  double confusion = 0.0;      // = -discriminator; minimized by f_t and f_e
  StageGrads disc_grads;       // d discriminator / d theta_d
  StageGrads conf_grads;       // d confusion / d theta_{f_t, f_e}
};

/// Discriminator loss 0.5 * (CE(d(f_e(u)), source) + CE(d(f_t(x)), target)),
/// each a batch mean, and the sign-reversed confusion loss.
inline DomainLoss loss_d(const IncrementState& s, const Tensor& proxy,
                         const Tensor& target) {
  if (proxy.rows() == 0 || target.rows() == 0) {
    throw InvalidArgument("loss_d: both batches must be non-empty");
  }
  DomainLoss out{0.0, 0.0, StageGrads::zeros(s), StageGrads::zeros(s)};
  MlpCache ec, tc, dsc, dtc;
  Tensor vs = s.ae.f_e.forward(proxy, ec);
  Tensor vt = s.target.f_t.forward(target, tc);
  std::vector<std::size_t> ys(vs.rows(), 0), yt(vt.rows(), 1);
  auto ce_s = softmax_cross_entropy(s.disc.d.forward(vs, dsc), ys, 1.0, 0.5);
  auto ce_t = softmax_cross_entropy(s.disc.d.forward(vt, dtc), yt, 1.0, 0.5);
  out.discriminator = ce_s.loss + ce_t.loss;
  out.confusion = -out.discriminator;
  Tensor dvs, dvt;
  s.disc.d.backward(dsc, ce_s.grad, out.disc_grads.d, &dvs);
  s.disc.d.backward(dtc, ce_t.grad, out.disc_grads.d, &dvt);
  dvs *= -1.0;
  dvt *= -1.0;
  s.ae.f_e.backward(ec, dvs, out.conf_grads.f_e);
  s.target.f_t.backward(tc, dvt, out.conf_grads.f_t);
  return out;
}

// ---------------------------------------------------------------------------
// Gradient schedule
// ---------------------------------------------------------------------------

/// Independent Adam state per optimizer group.
struct StageOptimizers {
  AdamState classify;     // L_c over {f_t, g_t}
  AdamState discriminate; // discriminator loss over {d}
  AdamState confuse;      // confusion loss over {f_t, f_e}
  AdamState distill;      // L_r1 over {f_e, f_d, g_t}
  AdamState reconstruct;  // L_r2 over {f_e, f_d, f_t}

  static StageOptimizers from(const IncrementConfig& cfg) {
    return {AdamState::with_rate(cfg.lr_c), AdamState::with_rate(cfg.lr_disc),
            AdamState::with_rate(cfg.lr_confusion), AdamState::with_rate(cfg.lr_r1),
            AdamState::with_rate(cfg.lr_r2)};
  }
};

/// Losses and gradients accumulated over one epoch, all taken at the same
/// parameter values.
struct EpochLosses {
  ConfidentLoss c;
  DomainLoss d;
  StageLoss r1;
  StageLoss r2;
};

struct UpdateReport {
  std::vector<std::string> skipped;  // groups skipped for non-finite gradients
};

/// Applies, in order: L_c descent on {f_t, g_t}; discriminator descent on
/// {d}; confusion descent (reversed discriminator gradient) on {f_t, f_e};
/// L_r1 descent on {f_e, f_d, g_t}; L_r2 descent on {f_e, f_d, f_t}.
inline UpdateReport update_gradients(IncrementState& s, const EpochLosses& l,
                                     StageOptimizers& opt,
                                     double reversal_coefficient = 1.0) {
  UpdateReport rep;
  const bool head = s.target.has_head();
  auto finite = [](std::initializer_list<const Gradients*> gs) {
    for (const auto* g : gs) {
      if (!all_finite(*g)) return false;
    }
    return true;
  };

  if (finite({&l.c.grads.f_t, &l.c.grads.g_t})) {
    if (head) {
      adam_step({{&s.target.f_t, &l.c.grads.f_t}, {&s.target.g_t, &l.c.grads.g_t}},
                opt.classify);
    } else {
      adam_step({{&s.target.f_t, &l.c.grads.f_t}}, opt.classify);
    }
  } else {
    rep.skipped.push_back("classify");
  }

  if (finite({&l.d.disc_grads.d})) {
    adam_step({{&s.disc.d, &l.d.disc_grads.d}}, opt.discriminate);
  } else {
    rep.skipped.push_back("discriminate");
  }

  if (finite({&l.d.conf_grads.f_t, &l.d.conf_grads.f_e})) {
    Gradients ft = l.d.conf_grads.f_t;
    Gradients fe = l.d.conf_grads.f_e;
    scale(ft, reversal_coefficient);
    scale(fe, reversal_coefficient);
    adam_step({{&s.target.f_t, &ft}, {&s.ae.f_e, &fe}}, opt.confuse);
  } else {
    rep.skipped.push_back("confuse");
  }

  if (finite({&l.r1.grads.f_e, &l.r1.grads.f_d, &l.r1.grads.g_t})) {
    if (head) {
      adam_step({{&s.ae.f_e, &l.r1.grads.f_e},
                 {&s.ae.f_d, &l.r1.grads.f_d},
                 {&s.target.g_t, &l.r1.grads.g_t}},
                opt.distill);
    } else {
      adam_step({{&s.ae.f_e, &l.r1.grads.f_e}, {&s.ae.f_d, &l.r1.grads.f_d}},
                opt.distill);
    }
  } else {
    rep.skipped.push_back("distill");
  }

  if (finite({&l.r2.grads.f_e, &l.r2.grads.f_d, &l.r2.grads.f_t})) {
    adam_step({{&s.ae.f_e, &l.r2.grads.f_e},
               {&s.ae.f_d, &l.r2.grads.f_d},
               {&s.target.f_t, &l.r2.grads.f_t}},
              opt.reconstruct);
  } else {
    rep.skipped.push_back("reconstruct");
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Autoencoder pretraining
// ---------------------------------------------------------------------------

struct AutoencoderResult {
  AutoEncoder ae;
  std::vector<double> log;  // reconstruction mse before each epoch, then final
};

/// Full-batch Adam on mse(f_d(f_e(u)), u) over a fixed set of proxy samples.
inline AutoencoderResult pretrain_autoencoder(const PrototypeSet& ps, AutoEncoder ae,
                                              std::size_t epochs,
                                              std::size_t batch_per_class,
                                              std::uint64_t seed,
                                              double learning_rate = 1e-3) {
  if (ps.latent_dim() != ae.f_e.input_dim() || ae.f_d.output_dim() != ps.latent_dim()) {
    throw InvalidArgument("pretrain_autoencoder: latent dim mismatch");
  }
  AutoencoderResult out;
  if (epochs == 0 || ps.empty()) {
    out.ae = std::move(ae);
    return out;
  }
  const Tensor u = sample_proxy_batch(ps, batch_per_class, seed).x;
  auto opt = AdamState::with_rate(learning_rate);
  for (std::size_t e = 0; e <= epochs; ++e) {
    MlpCache ec, dc;
    Tensor v = ae.f_e.forward(u, ec);
    Tensor rec = ae.f_d.forward(v, dc);
    const double loss = mse(rec, u);
    out.log.push_back(loss);
    if (!std::isfinite(loss)) {
      throw TrainingDiverged("pretrain_autoencoder: non-finite loss");
    }
    if (e == epochs) break;
    Gradients ge = ae.f_e.zero_gradients();
    Gradients gd = ae.f_d.zero_gradients();
    Tensor dv;
    ae.f_d.backward(dc, mse_grad(rec, u), gd, &dv);
    ae.f_e.backward(ec, dv, ge);
    adam_step({{&ae.f_e, &ge}, {&ae.f_d, &gd}}, opt);
  }
  out.ae = std::move(ae);
  return out;
}

// ---------------------------------------------------------------------------
// One increment
// ---------------------------------------------------------------------------

struct IncrementLogRow {
  std::size_t epoch = 0;
  double l_r1 = 0.0;
  double l_r2 = 0.0;
  double l_c = 0.0;
  double l_d_disc = 0.0;
  double l_d_conf = 0.0;
  std::size_t confident = 0;
  std::vector<std::string> skipped;
};

struct IncrementResult {
  IncrementState state;
  bool ok = true;
  std::string failure;
  std::vector<IncrementLogRow> log;
  std::vector<double> autoencoder_log;
  std::vector<ForesightLogRow> foresight_log;  // when new source data arrived
  // Latent dumps for discrepancy diagnostics: f_e(proxy) and f_t(target).
  Tensor source_latents;
  Tensor target_latents;
  std::size_t proxy_samples = 0;
  std::size_t target_samples = 0;
};

namespace detail {

inline PrototypeSet refresh_prototypes(const IncrementState& s, const PrototypeSet& prior,
                                       const Tensor& target, const ConfidentSet& conf) {
  std::vector<std::size_t> rows;
  std::vector<ClassId> labels;
  for (const auto& [c, entries] : conf.by_class) {
    for (const auto& e : entries) {
      rows.push_back(e.sample);
      labels.push_back(c);
    }
  }
  if (rows.empty()) return prior;
  Tensor u = s.ae.f_d.forward(s.target.f_t.forward(target.gather_rows(rows)));
  return merge_prototypes(prior, fit_prototypes(u, labels));
}

}  // namespace detail

/// Called after every epoch's update with the epoch index and current state.
using EpochObserver = std::function<void(std::size_t, const IncrementState&)>;

/// Runs one task-incremental update. On divergence the input state is
/// returned unchanged with ok = false.
inline IncrementResult run_increment(const IncrementState& input,
                                     const StepInputs& step,
                                     const IncrementConfig& cfg,
                                     const ForesightConfig& foresight_cfg = {},
                                     const EpochObserver& observer = {}) {
  cfg.validate();
  std::vector<ClassId> new_private;
  for (const auto& [c, x] : step.one_shot) new_private.push_back(c);
  if (new_private.empty() && step.target_shared.empty()) {
    throw InvalidArgument("run_increment: no private and no shared target classes");
  }
  if (step.target_unlabeled.rows() == 0) {
    throw InvalidArgument("run_increment: empty target set");
  }
  if (step.target_unlabeled.cols() != input.target.f_t.input_dim()) {
    throw InvalidArgument("run_increment: target feature dim mismatch");
  }
  const auto known = input.joint_classes();
  for (ClassId c : new_private) {
    if (std::find(known.begin(), known.end(), c) != known.end()) {
      throw InvalidArgument("run_increment: private class " + std::to_string(c) +
                            " is already known");
    }
  }

  IncrementResult result;
  result.state = input;
  IncrementState& s = result.state;
  try {
    // (1) new labeled source data: extend the source model from proxies.
    if (step.source && step.source->size() > 0) {
      ForesightConfig fc = foresight_cfg;
      fc.seed = derive_seed(cfg.seed, "increment-foresight");
      auto fr = train_foresight(*step.source, fc,
                                ForesightWarmStart{s.source, s.prototypes,
                                                   cfg.proxy_per_class});
      s.source = std::move(fr.model);
      s.prototypes = std::move(fr.prototypes);
      result.foresight_log = std::move(fr.log);
    }

    // (2) autoencoder pretraining on proxy samples.
    auto ae = pretrain_autoencoder(s.prototypes, s.ae, cfg.ae_epochs,
                                   cfg.ae_batch_per_class,
                                   derive_seed(cfg.seed, "ae-pretrain"),
                                   cfg.ae_learning_rate);
    s.ae = std::move(ae.ae);
    result.autoencoder_log = std::move(ae.log);

    // New private outputs must exist while they are being learned.
    Rng head_rng(derive_seed(cfg.seed, "head-init"));
    if (!new_private.empty()) {
      if (!s.target.has_head()) {
        s.target.g_t = Mlp::random(
            detail::with_ends(s.target.f_t.output_dim(), cfg.head_hidden,
                              new_private.size()),
            head_rng);
      } else {
        s.target.g_t.widen_output(new_private.size(), head_rng);
      }
      s.target.classes.insert(s.target.classes.end(), new_private.begin(),
                              new_private.end());
    }

    // (3) epoch loop. Guides and proxies follow the replay set, which is
    // refit from confident target samples after every update.
    const PrototypeSet prior = s.prototypes;
    const Tensor& target = step.target_unlabeled;
    StageOptimizers opt = StageOptimizers::from(cfg);
    auto relabel = [&]() {
      s.guides = init_guides(s, step.one_shot, new_private, step.target_shared);
      Tensor v = s.target.f_t.forward(target);
      if (!v.all_finite()) {
        throw TrainingDiverged("run_increment: non-finite target latents");
      }
      auto conf = select_confident(label_batch(v, s.guides), cfg.confident_fraction, &v);
      return std::pair{std::move(v), std::move(conf)};
    };
    auto [v, confident] = relabel();

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
      s.guides = init_guides(s, step.one_shot, new_private, step.target_shared);
      const auto proxy = sample_proxy_batch(s.prototypes, cfg.proxy_per_class,
                                            derive_seed(cfg.seed, epoch));
      EpochLosses l;
      l.c = loss_c(s, target, confident);
      l.r1 = loss_r1(s, proxy, cfg.distillation_tau);
      l.r2 = loss_r2(s, proxy.x, target);
      l.d = loss_d(s, proxy.x, target);
      IncrementLogRow row{epoch, l.r1.loss, l.r2.loss, l.c.loss, l.d.discriminator,
                          l.d.confusion, confident.size(), {}};
      for (double x : {row.l_r1, row.l_r2, row.l_c, row.l_d_disc}) {
        if (!std::isfinite(x)) {
          throw TrainingDiverged("run_increment: non-finite loss at epoch " +
                                 std::to_string(epoch));
        }
      }
      row.skipped = update_gradients(s, l, opt, cfg.reversal_coefficient).skipped;
      result.log.push_back(std::move(row));

      std::tie(v, confident) = relabel();
      s.prototypes = detail::refresh_prototypes(s, prior, target, confident);
      if (observer) observer(epoch, s);
    }

    const auto dump_proxy = sample_proxy_batch(s.prototypes, cfg.proxy_per_class,
                                               derive_seed(cfg.seed, "dump"));
    result.source_latents = s.ae.f_e.forward(dump_proxy.x);
    result.target_latents = v;
    result.proxy_samples = dump_proxy.x.rows();
    result.target_samples = target.rows();

    // (4) registry.
    s.registry.steps.push_back({step.target_shared, new_private});
    ++s.step;
  } catch (const TrainingDiverged& e) {
    IncrementResult failed;
    failed.state = input;
    failed.ok = false;
    failed.failure = e.what();
    failed.log = std::move(result.log);
    return failed;
  }
  return result;
}

}  // namespace tido
