#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tido/adam.hpp"
#include "tido/datagen.hpp"
#include "tido/error.hpp"
#include "tido/incremental.hpp"
#include "tido/nn.hpp"
#include "tido/prototypes.hpp"
#include "tido/rng.hpp"
#include "tido/tensor.hpp"

namespace tido {

// ---------------------------------------------------------------------------
// Accuracy and forgetting
// ---------------------------------------------------------------------------

struct EvalReport {
  std::size_t step = 0;
  double all_acc = 0.0;
  std::optional<double> priv_acc;          // absent when there is no private class
  std::map<ClassId, double> per_class;
  std::map<ClassId, double> forgetting;    // classes with at least one past record
  double mean_forgetting = 0.0;
  std::size_t unknown_labels = 0;          // eval labels outside the registry
  std::size_t samples = 0;
};

/// Per-class accuracy records in evaluation order.
struct AccuracyHistory {
  std::map<ClassId, std::vector<double>> by_class;

  void record(const EvalReport& r) {
    for (const auto& [c, a] : r.per_class) by_class[c].push_back(a);
  }
};

struct ForgettingSummary {
  std::map<ClassId, double> per_class;
  double mean = 0.0;
};

/// max over earlier records minus the latest, floored at 0. Classes with a
/// single record are omitted.
inline ForgettingSummary forgetting(const AccuracyHistory& h) {
  ForgettingSummary out;
  for (const auto& [c, v] : h.by_class) {
    if (v.size() < 2) continue;
    const double peak = *std::max_element(v.begin(), v.end() - 1);
    out.per_class[c] = std::max(0.0, peak - v.back());
  }
  if (!out.per_class.empty()) {
    double s = 0.0;
    for (const auto& [c, f] : out.per_class) s += f;
    out.mean = s / static_cast<double>(out.per_class.size());
  }
  return out;
}

/// Scores predictions against labels. Labels outside `known` count as errors
/// and are tallied in unknown_labels. Forgetting is measured against
/// `history` extended by this report; `history` itself is not modified.
inline EvalReport score_predictions(std::span<const ClassId> predicted,
                                    std::span<const ClassId> labels,
                                    const std::set<ClassId>& private_classes,
                                    const std::set<ClassId>& known, std::size_t step,
                                    const AccuracyHistory& history = {}) {
  if (predicted.size() != labels.size()) {
    throw InvalidArgument("score_predictions: size mismatch");
  }
  if (labels.empty()) throw InvalidArgument("score_predictions: empty eval set");
  EvalReport r;
  r.step = step;
  r.samples = labels.size();
  std::map<ClassId, std::pair<std::size_t, std::size_t>> tally;  // correct, total
  std::size_t correct = 0, priv_correct = 0, priv_total = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool ok = known.count(labels[i]) && predicted[i] == labels[i];
    if (!known.count(labels[i])) ++r.unknown_labels;
    auto& t = tally[labels[i]];
    t.first += ok;
    ++t.second;
    correct += ok;
    if (private_classes.count(labels[i])) {
      priv_correct += ok;
      ++priv_total;
    }
  }
  r.all_acc = static_cast<double>(correct) / static_cast<double>(labels.size());
  if (priv_total > 0) {
    r.priv_acc = static_cast<double>(priv_correct) / static_cast<double>(priv_total);
  }
  for (const auto& [c, t] : tally) {
    r.per_class[c] = static_cast<double>(t.first) / static_cast<double>(t.second);
  }
  AccuracyHistory extended = history;
  extended.record(r);
  auto f = forgetting(extended);
  r.forgetting = std::move(f.per_class);
  r.mean_forgetting = f.mean;
  return r;
}

inline EvalReport evaluate(const IncrementState& s, const EvalSet& eval,
                           const AccuracyHistory& history = {}) {
  const auto pred = joint_predict(s, eval.data.x);
  const auto classes = s.joint_classes();
  return score_predictions(pred.predicted, eval.data.labels,
                           {eval.private_classes.begin(), eval.private_classes.end()},
                           {classes.begin(), classes.end()}, s.step, history);
}

/// Accuracy restricted to samples whose label lies in `subset`.
inline double subset_accuracy(std::span<const ClassId> predicted,
                              std::span<const ClassId> labels,
                              const std::set<ClassId>& subset) {
  std::size_t n = 0, ok = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (!subset.count(labels[i])) continue;
    ++n;
    ok += predicted[i] == labels[i];
  }
  if (n == 0) throw InvalidArgument("subset_accuracy: no sample in subset");
  return static_cast<double>(ok) / static_cast<double>(n);
}

// ---------------------------------------------------------------------------
// Domain discrepancy probe
// ---------------------------------------------------------------------------

inline double d_hat_from_error(double error) {
  return std::clamp(2.0 * (1.0 - 2.0 * error), 0.0, 2.0);
}

struct ProbeConfig {
  std::size_t hidden = 16;
  std::size_t epochs = 300;
  double learning_rate = 1e-2;
  double train_fraction = 0.7;
  std::uint64_t seed = 0;
};

struct ProbeResult {
  double d_hat = 0.0;
  double holdout_error = 0.5;  // mean of the per-domain holdout errors
};

/// Trains a fresh tanh probe to tell the two sets apart on a stratified
/// split and maps its balanced holdout error e to 2 (1 - 2 e), clamped to
/// [0, 2]. Features are standardized with training-split statistics.
inline ProbeResult h_distance_probe(const Tensor& src, const Tensor& tgt,
                                    const ProbeConfig& cfg = {}) {
  if (src.cols() != tgt.cols()) throw InvalidArgument("h_distance: dim mismatch");
  if (!(cfg.train_fraction > 0.0 && cfg.train_fraction < 1.0)) {
    throw InvalidArgument("h_distance: train fraction must be in (0, 1)");
  }
  auto split = [&](std::size_t n, Rng& rng) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    rng.shuffle(idx);
    const auto k = static_cast<std::size_t>(
        std::llround(cfg.train_fraction * static_cast<double>(n)));
    if (k == 0 || k == n) {
      throw InvalidArgument("h_distance: degenerate split for " + std::to_string(n) +
                            " samples");
    }
    return std::pair{std::vector<std::size_t>(idx.begin(), idx.begin() + k),
                     std::vector<std::size_t>(idx.begin() + k, idx.end())};
  };
  Rng rng(derive_seed(cfg.seed, "probe"));
  const auto [s_tr, s_te] = split(src.rows(), rng);
  const auto [t_tr, t_te] = split(tgt.rows(), rng);

  Tensor x_tr = concat_rows(src.gather_rows(s_tr), tgt.gather_rows(t_tr));
  std::vector<std::size_t> y_tr(s_tr.size(), 0);
  y_tr.insert(y_tr.end(), t_tr.size(), 1);

  const std::size_t dim = src.cols();
  std::vector<double> mean(dim, 0.0), sd(dim, 0.0);
  for (std::size_t r = 0; r < x_tr.rows(); ++r) {
    for (std::size_t j = 0; j < dim; ++j) mean[j] += x_tr(r, j);
  }
  for (auto& m : mean) m /= static_cast<double>(x_tr.rows());
  for (std::size_t r = 0; r < x_tr.rows(); ++r) {
    for (std::size_t j = 0; j < dim; ++j) sd[j] += std::pow(x_tr(r, j) - mean[j], 2);
  }
  for (auto& s : sd) s = std::max(std::sqrt(s / static_cast<double>(x_tr.rows())), 1e-8);
  auto standardize = [&](Tensor t) {
    for (std::size_t r = 0; r < t.rows(); ++r) {
      for (std::size_t j = 0; j < dim; ++j) t(r, j) = (t(r, j) - mean[j]) / sd[j];
    }
    return t;
  };
  x_tr = standardize(std::move(x_tr));

  // Balanced loss: each domain contributes half regardless of its size.
  const double ws = 0.5 * static_cast<double>(x_tr.rows()) / static_cast<double>(s_tr.size());
  const double wt = 0.5 * static_cast<double>(x_tr.rows()) / static_cast<double>(t_tr.size());

  Mlp probe = Mlp::random({dim, cfg.hidden, 2}, rng);
  auto opt = AdamState::with_rate(cfg.learning_rate);
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    MlpCache cache;
    Tensor z = probe.forward(x_tr, cache);
    auto ce = softmax_cross_entropy(z, y_tr, 1.0);
    for (std::size_t r = 0; r < z.rows(); ++r) {
      const double w = y_tr[r] == 0 ? ws : wt;
      for (std::size_t k = 0; k < 2; ++k) ce.grad(r, k) *= w;
    }
    Gradients g = probe.zero_gradients();
    probe.backward(cache, ce.grad, g);
    if (!all_finite(g)) break;
    adam_step({{&probe, &g}}, opt);
  }

  auto error_on = [&](const Tensor& x, std::span<const std::size_t> idx,
                      std::size_t label) {
    Tensor z = probe.forward(standardize(x.gather_rows(idx)));
    std::size_t wrong = 0;
    for (std::size_t r = 0; r < z.rows(); ++r) {
      const std::size_t pred = z(r, 1) > z(r, 0) ? 1 : 0;
      wrong += pred != label;
    }
    return static_cast<double>(wrong) / static_cast<double>(z.rows());
  };
  ProbeResult out;
  out.holdout_error = 0.5 * (error_on(src, s_te, 0) + error_on(tgt, t_te, 1));
  out.d_hat = d_hat_from_error(out.holdout_error);
  return out;
}

inline double h_distance_proxy(const Tensor& src, const Tensor& tgt,
                               const ProbeConfig& cfg = {}) {
  return h_distance_probe(src, tgt, cfg).d_hat;
}

// ---------------------------------------------------------------------------
// Risk bounds
// ---------------------------------------------------------------------------

/// 4 sqrt((2 d ln(2 m) + ln(4 / delta)) / m).
inline double vc_term(double d, double m, double delta) {
  if (!(m >= 1.0)) throw InvalidArgument("vc_term: sample size must be >= 1");
  if (!(delta > 0.0 && delta < 1.0)) throw InvalidArgument("vc_term: delta in (0, 1)");
  if (!(d >= 0.0)) throw InvalidArgument("vc_term: negative dimension");
  return 4.0 * std::sqrt((2.0 * d * std::log(2.0 * m) + std::log(4.0 / delta)) / m);
}

/// Stored quantities of one completed increment i. "prev" refers to the
/// hypothesis before the increment, the others to the one after it.
struct IncrementRecord {
  double source_risk = 0.0;       // proxy-sample risk of h(i)
  double target_risk = 0.0;       // eval risk of h(i) on step i
  double source_risk_prev = 0.0;  // proxy-sample risk of h(i-1)
  double target_risk_prev = 0.0;  // risk of h(i-1) on step i's eval set
  std::optional<double> d_hat;    // absent when latent dumps are missing
  double m_prime = 1.0;           // proxy dump + target sample count
};

struct BoundReport {
  std::vector<IncrementRecord> increments;
  double lhs = 0.0;               // empirical target risk of the current model
  double vc_dimension = 0.0;      // trainable parameter count
  double delta = 0.05;
  double lambda_prev = 0.0;       // averaged over h(i-1)
  double lambda_cur = 0.0;        // on the current model
  double vc_mean = 0.0;
  std::optional<double> d_hat_mean;
  std::optional<double> thm1_rhs, thm2_rhs, thm3_rhs;
  std::optional<double> thm3_rhs_lambda_prev;
  std::optional<bool> thm1_holds, thm2_holds, thm3_holds;
  bool complete = true;
};

/// Assembles the three right-hand sides with empirical risks standing in for
/// true ones. The target-risk bound uses i = t in its trailing lambda.
inline BoundReport bound_report(std::span<const IncrementRecord> history,
                                double vc_dimension, double delta) {
  if (history.empty()) throw InvalidArgument("bound_report: empty history");
  if (!(delta > 0.0 && delta < 1.0)) throw InvalidArgument("bound_report: delta in (0, 1)");
  auto in_unit = [](double r) { return r >= 0.0 && r <= 1.0; };
  BoundReport b;
  b.increments.assign(history.begin(), history.end());
  b.vc_dimension = vc_dimension;
  b.delta = delta;
  const double t = static_cast<double>(history.size());
  double src = 0.0, tgt_prev = 0.0, lam = 0.0, vc = 0.0, dsum = 0.0;
  for (const auto& r : history) {
    for (double x : {r.source_risk, r.target_risk, r.source_risk_prev, r.target_risk_prev}) {
      if (!in_unit(x)) throw InvalidArgument("bound_report: risk outside [0, 1]");
    }
    src += r.source_risk;
    tgt_prev += r.target_risk_prev;
    lam += r.target_risk_prev + r.source_risk_prev;
    vc += vc_term(vc_dimension, r.m_prime, delta);
    if (r.d_hat) {
      dsum += *r.d_hat;
    } else {
      b.complete = false;
    }
  }
  const auto& last = history.back();
  b.lhs = last.target_risk;
  b.lambda_prev = lam / t;
  b.lambda_cur = last.target_risk + last.source_risk;
  b.vc_mean = vc / t;
  if (!b.complete) return b;

  b.d_hat_mean = dsum / t;
  b.thm1_rhs = src / t + 0.5 * *b.d_hat_mean + b.lambda_prev;
  b.thm2_rhs = (tgt_prev + 0.5 * *b.d_hat_mean) / t + b.lambda_prev;
  b.thm3_rhs = src / t + 0.5 * *b.d_hat_mean + b.vc_mean + b.lambda_cur;
  b.thm3_rhs_lambda_prev = src / t + 0.5 * *b.d_hat_mean + b.vc_mean + b.lambda_prev;
  b.thm1_holds = b.lhs <= *b.thm1_rhs;
  b.thm2_holds = b.lhs <= *b.thm2_rhs;
  b.thm3_holds = b.lhs <= *b.thm3_rhs;
  return b;
}

/// Error of the proxy pathway argmax([g_s(f_d(f_e(u)))|C_s, g_t(f_e(u))])
/// on draws from the stored prototypes.
inline double proxy_source_risk(const IncrementState& s, std::size_t per_class,
                                std::uint64_t seed) {
  const auto batch = sample_proxy_batch(s.prototypes, per_class, seed);
  if (batch.x.rows() == 0) throw InvalidArgument("proxy_source_risk: no prototypes");
  const auto classes = s.joint_classes();
  detail::JointCache jc;
  Tensor z = detail::joint_logits(s, s.ae.f_e.forward(batch.x), jc);
  std::size_t wrong = 0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    wrong += classes[detail::argmax(z.row(r))] != batch.labels[r];
  }
  return static_cast<double>(wrong) / static_cast<double>(z.rows());
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json j;
  j["step"] = r.step;
  j["all_acc"] = r.all_acc;
  j["priv_acc"] = r.priv_acc ? nlohmann::json(*r.priv_acc) : nlohmann::json(nullptr);
  j["samples"] = r.samples;
  j["unknown_labels"] = r.unknown_labels;
  j["mean_forgetting"] = r.mean_forgetting;
  for (const auto& [c, a] : r.per_class) j["per_class"][std::to_string(c)] = a;
  j["forgetting"] = nlohmann::json::object();
  for (const auto& [c, f] : r.forgetting) j["forgetting"][std::to_string(c)] = f;
  return j;
}

inline nlohmann::json to_json(const BoundReport& b) {
  auto opt = [](const auto& o) {
    return o ? nlohmann::json(*o) : nlohmann::json(nullptr);
  };
  nlohmann::json j;
  j["lhs"] = b.lhs;
  j["vc_dimension"] = b.vc_dimension;
  j["delta"] = b.delta;
  j["lambda_prev"] = b.lambda_prev;
  j["lambda_cur"] = b.lambda_cur;
  j["vc_mean"] = b.vc_mean;
  j["d_hat_mean"] = opt(b.d_hat_mean);
  j["thm1_rhs"] = opt(b.thm1_rhs);
  j["thm2_rhs"] = opt(b.thm2_rhs);
  j["thm3_rhs"] = opt(b.thm3_rhs);
  j["thm3_rhs_lambda_prev"] = opt(b.thm3_rhs_lambda_prev);
  j["thm1_holds"] = opt(b.thm1_holds);
  j["thm2_holds"] = opt(b.thm2_holds);
  j["thm3_holds"] = opt(b.thm3_holds);
  j["complete"] = b.complete;
  j["increments"] = nlohmann::json::array();
  for (const auto& r : b.increments) {
    j["increments"].push_back({{"source_risk", r.source_risk},
                               {"target_risk", r.target_risk},
                               {"source_risk_prev", r.source_risk_prev},
                               {"target_risk_prev", r.target_risk_prev},
                               {"d_hat", opt(r.d_hat)},
                               {"m_prime", r.m_prime}});
  }
  return j;
}

inline const char* kMetricsCsvHeader =
    "step,all_acc,priv_acc,forgetting,d_hat,thm1_rhs,thm2_rhs,thm3_rhs,lhs";

/// One row of the flat metrics CSV; absent values are left empty.
inline std::string metrics_csv_row(const EvalReport& e, const BoundReport& b) {
  auto cell = [](const std::optional<double>& v) {
    return v ? format_double(*v) : std::string();
  };
  std::ostringstream os;
  os << e.step << ',' << format_double(e.all_acc) << ',' << cell(e.priv_acc) << ','
     << format_double(e.mean_forgetting) << ','
     << cell(b.increments.empty() ? std::nullopt : b.increments.back().d_hat) << ','
     << cell(b.thm1_rhs) << ',' << cell(b.thm2_rhs) << ',' << cell(b.thm3_rhs) << ','
     << format_double(b.lhs);
  return os.str();
}

}  // namespace tido
