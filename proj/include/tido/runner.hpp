#pragma once

#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "tido/datagen.hpp"
#include "tido/error.hpp"
#include "tido/foresight.hpp"
#include "tido/incremental.hpp"
#include "tido/metrics.hpp"
#include "tido/prototypes.hpp"
#include "tido/rng.hpp"

namespace tido {

struct StreamRunConfig {
  ForesightConfig foresight;
  IncrementConfig increment;
  ProbeConfig probe;
  double delta = 0.05;
  std::size_t risk_proxy_per_class = 200;
};

struct StepReport {
  EvalReport eval;
  BoundReport bound;
  double shared_acc = 0.0;           // joint model on shared-class samples
  double baseline_shared_acc = 0.0;  // frozen source model on the same samples
  std::vector<IncrementLogRow> log;
  std::vector<double> autoencoder_log;
  std::vector<ForesightLogRow> foresight_log;
};

struct StreamRunResult {
  SourceModel source;        // frozen foresight model (baseline)
  PrototypeSet source_prototypes;
  std::vector<ForesightLogRow> foresight_log;
  IncrementState state;
  std::vector<IncrementState> snapshots;  // state after each completed step
  std::vector<StepReport> steps;
  bool ok = true;
  std::string failure;
};

inline double source_shared_accuracy(const SourceModel& m, const EvalSet& eval) {
  const std::set<ClassId> shared(eval.shared.begin(), eval.shared.end());
  const auto pred = source_predict(m, eval.data.x);
  return subset_accuracy(pred, eval.data.labels, shared);
}

inline double joint_shared_accuracy(const IncrementState& s, const EvalSet& eval) {
  const std::set<ClassId> shared(eval.shared.begin(), eval.shared.end());
  const auto pred = joint_predict(s, eval.data.x).predicted;
  return subset_accuracy(pred, eval.data.labels, shared);
}

/// Stage 2 over a stream, starting from a foresight checkpoint or, with
/// `resume`, from a saved increment state. Raw data of step 0's source, when
/// present, is ignored: it was consumed by foresight.
inline StreamRunResult run_stage2(const SourceModel& model, const PrototypeSet& prototypes,
                                  std::span<const StreamBundle> stream,
                                  const StreamRunConfig& cfg,
                                  const IncrementState* resume = nullptr) {
  StreamRunResult out;
  out.source = model;
  out.source_prototypes = prototypes;
  out.state = resume ? *resume : make_initial_state(model, prototypes, cfg.increment);
  AccuracyHistory history;
  std::vector<IncrementRecord> records;

  for (std::size_t t = 0; t < stream.size(); ++t) {
    const auto& bundle = stream[t];
    StepInputs inputs = bundle.inputs;
    if (t == 0 && !resume) inputs.source.reset();

    IncrementConfig icfg = cfg.increment;
    icfg.seed = derive_seed(cfg.increment.seed, t);
    ForesightConfig fcfg = cfg.foresight;
    fcfg.seed = derive_seed(cfg.foresight.seed, t + 1);

    IncrementRecord rec;
    rec.target_risk_prev = 1.0 - evaluate(out.state, bundle.eval).all_acc;
    rec.source_risk_prev = proxy_source_risk(out.state, cfg.risk_proxy_per_class,
                                             derive_seed(icfg.seed, "risk-prev"));

    auto inc = run_increment(out.state, inputs, icfg, fcfg);
    if (!inc.ok) {
      out.ok = false;
      out.failure = "step " + std::to_string(t) + ": " + inc.failure;
      return out;
    }
    out.state = std::move(inc.state);

    StepReport rep;
    rep.eval = evaluate(out.state, bundle.eval, history);
    history.record(rep.eval);
    rep.shared_acc = joint_shared_accuracy(out.state, bundle.eval);
    rep.baseline_shared_acc = source_shared_accuracy(model, bundle.eval);

    rec.target_risk = 1.0 - rep.eval.all_acc;
    rec.source_risk = proxy_source_risk(out.state, cfg.risk_proxy_per_class,
                                        derive_seed(icfg.seed, "risk"));
    ProbeConfig pcfg = cfg.probe;
    pcfg.seed = derive_seed(cfg.probe.seed, t);
    rec.d_hat = h_distance_proxy(inc.source_latents, inc.target_latents, pcfg);
    rec.m_prime = static_cast<double>(inc.proxy_samples + inc.target_samples);
    records.push_back(rec);
    rep.bound = bound_report(records, static_cast<double>(out.state.parameter_count()),
                             cfg.delta);
    rep.log = std::move(inc.log);
    rep.autoencoder_log = std::move(inc.autoencoder_log);
    rep.foresight_log = std::move(inc.foresight_log);
    out.steps.push_back(std::move(rep));
    out.snapshots.push_back(out.state);
  }
  return out;
}

/// Foresight on step 0's source data followed by stage 2.
inline StreamRunResult run_stream(std::span<const StreamBundle> stream,
                                  const StreamRunConfig& cfg) {
  if (stream.empty() || !stream.front().inputs.source) {
    throw InvalidArgument("run_stream: step 0 needs labeled source data");
  }
  auto fr = train_foresight(*stream.front().inputs.source, cfg.foresight);
  auto out = run_stage2(fr.model, fr.prototypes, stream, cfg);
  out.foresight_log = std::move(fr.log);
  return out;
}

}  // namespace tido
