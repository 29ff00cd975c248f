#pragma once

#include <cctype>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "tido/checkpoint.hpp"
#include "tido/datagen.hpp"
#include "tido/error.hpp"
#include "tido/foresight.hpp"
#include "tido/incremental.hpp"
#include "tido/io.hpp"
#include "tido/metrics.hpp"
#include "tido/runner.hpp"

namespace tido::cli {

using nlohmann::json;

enum ExitCode : int { kOk = 0, kConfigError = 2, kNumericalFailure = 3, kPartialSweep = 4 };

struct ConfigError : std::runtime_error {
  ConfigError(const std::string& field, const std::string& what)
      : std::runtime_error(field + ": " + what), field(field) {}
  std::string field;
};

// ---------------------------------------------------------------------------
// Defaults and JSON mapping
// ---------------------------------------------------------------------------

inline json to_json(const ForesightConfig& c) {
  return {{"latent_dim", c.latent_dim},
          {"hidden", c.hidden},
          {"classifier_hidden", c.classifier_hidden},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"separability_learning_rate", c.separability_learning_rate},
          {"negative_ratio", c.negative_ratio},
          {"k_sigma", c.k_sigma},
          {"use_separability", c.use_separability},
          {"plateau_tolerance", c.plateau_tolerance},
          {"plateau_epochs", c.plateau_epochs}};
}

inline json to_json(const IncrementConfig& c) {
  return {{"head_hidden", c.head_hidden},
          {"discriminator_hidden", c.discriminator_hidden},
          {"autoencoder_hidden", c.autoencoder_hidden},
          {"autoencoder_identity_init", c.autoencoder_identity_init},
          {"ae_epochs", c.ae_epochs},
          {"ae_batch_per_class", c.ae_batch_per_class},
          {"ae_learning_rate", c.ae_learning_rate},
          {"epochs", c.epochs},
          {"proxy_per_class", c.proxy_per_class},
          {"confident_fraction", c.confident_fraction},
          {"distillation_tau", c.distillation_tau},
          {"reversal_coefficient", c.reversal_coefficient},
          {"lr_c", c.lr_c},
          {"lr_disc", c.lr_disc},
          {"lr_confusion", c.lr_confusion},
          {"lr_r1", c.lr_r1},
          {"lr_r2", c.lr_r2}};
}

inline json to_json(const ProbeConfig& c) {
  return {{"hidden", c.hidden},
          {"epochs", c.epochs},
          {"learning_rate", c.learning_rate},
          {"train_fraction", c.train_fraction}};
}

inline json default_config() {
  const StreamRunConfig run;
  const StreamSpec spec = standard_stream_spec(0);
  const ShiftSpec shift = standard_shift();
  return {{"mode", "stream"},
          {"seed", 0},
          {"out", "runs"},
          {"checkpoint", ""},
          {"data",
           {{"source", "synthetic"},
            {"preset", "standard"},
            {"stream_dir", ""},
            {"step", 0},
            {"stddev", spec.stddev},
            {"samples_per_class", spec.samples_per_class},
            {"private_sample_ratio", spec.private_sample_ratio},
            {"rotation_deg", shift.rotation_deg},
            {"translation", shift.translation.empty() ? 0.0 : shift.translation[0]}}},
          {"foresight", to_json(run.foresight)},
          {"increment", to_json(run.increment)},
          {"probe", to_json(run.probe)},
          {"delta", run.delta},
          {"risk_proxy_per_class", run.risk_proxy_per_class},
          {"sweep", {{"axis", ""}, {"grid", json::array()}}}};
}

namespace detail {

template <typename T>
T get_field(const json& j, const std::string& path) {
  const json* cur = &j;
  std::string seg;
  std::istringstream ss(path);
  while (std::getline(ss, seg, '.')) {
    if (!cur->is_object() || !cur->contains(seg)) throw ConfigError(path, "missing");
    cur = &cur->at(seg);
  }
  try {
    return cur->get<T>();
  } catch (const json::exception&) {
    throw ConfigError(path, "wrong type (" + cur->dump() + ")");
  }
}

// Overlays `patch` onto `base`; every key of `patch` must already exist.
inline void overlay(json& base, const json& patch, const std::string& prefix) {
  if (!patch.is_object()) throw ConfigError(prefix.empty() ? "<root>" : prefix, "expected object");
  for (const auto& [k, v] : patch.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (!base.contains(k)) throw ConfigError(path, "unknown key");
    if (base[k].is_object()) {
      overlay(base[k], v, path);
    } else {
      base[k] = v;
    }
  }
}

inline std::string env_name(const std::string& path) {
  std::string out = "TIDO_";
  for (char ch : path) {
    out.push_back(ch == '.' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(ch))));
  }
  return out;
}

inline void collect_leaves(const json& j, const std::string& prefix,
                           std::vector<std::string>& out) {
  for (const auto& [k, v] : j.items()) {
    const std::string path = prefix.empty() ? k : prefix + "." + k;
    if (v.is_object()) {
      collect_leaves(v, path, out);
    } else {
      out.push_back(path);
    }
  }
}

inline json& at_path(json& j, const std::string& path) {
  json* cur = &j;
  std::string seg;
  std::istringstream ss(path);
  while (std::getline(ss, seg, '.')) cur = &(*cur)[seg];
  return *cur;
}

// Env values are JSON literals when they parse as such, plain strings otherwise.
inline json parse_env_value(const std::string& raw, const json& current) {
  if (current.is_string()) return raw;
  try {
    return json::parse(raw);
  } catch (const json::exception&) {
    return raw;
  }
}

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace detail

/// Command-line values; unset fields leave the file/env value alone.
struct Flags {
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<std::string> mode;
  std::optional<std::string> sweep_axis;
};

using EnvLookup = std::function<const char*(const std::string&)>;

inline const char* process_env(const std::string& name) { return std::getenv(name.c_str()); }

/// defaults < file < TIDO_* environment < flags.
inline json resolve_config(const Flags& flags, const EnvLookup& env = process_env) {
  json cfg = default_config();
  if (flags.config_path) {
    json file;
    try {
      file = json::parse(io::read_text_file(*flags.config_path));
    } catch (const json::exception& e) {
      throw ConfigError("--config", std::string("not valid JSON: ") + e.what());
    } catch (const InvalidArgument& e) {
      throw ConfigError("--config", e.what());
    }
    detail::overlay(cfg, file, "");
  }
  std::vector<std::string> leaves;
  detail::collect_leaves(cfg, "", leaves);
  for (const auto& path : leaves) {
    if (const char* raw = env(detail::env_name(path))) {
      json& slot = detail::at_path(cfg, path);
      slot = detail::parse_env_value(raw, slot);
    }
  }
  if (flags.seed) cfg["seed"] = *flags.seed;
  if (flags.out) cfg["out"] = *flags.out;
  if (flags.mode) cfg["mode"] = *flags.mode;
  if (flags.sweep_axis) cfg["sweep"]["axis"] = *flags.sweep_axis;
  return cfg;
}

// ---------------------------------------------------------------------------
// Typed view
// ---------------------------------------------------------------------------

struct DataConfig {
  std::string source;  // synthetic | csv
  std::string preset;  // standard | office
  std::string stream_dir;
  std::size_t step = 0;
  double stddev = 0.0;
  std::size_t samples_per_class = 0;
  double private_sample_ratio = 1.0;
  double rotation_deg = 0.0;
  double translation = 0.0;
};

struct RunConfig {
  std::string mode;
  std::uint64_t seed = 0;
  std::string out;
  std::string checkpoint;
  DataConfig data;
  StreamRunConfig run;
  std::string sweep_axis;
  std::vector<json> sweep_grid;
};

inline const std::vector<std::string>& sweep_axes() {
  static const std::vector<std::string> axes = {"k_sigma", "ratio", "one_shot_ratio",
                                                "separability"};
  return axes;
}

inline std::vector<json> default_grid(const std::string& axis) {
  if (axis == "k_sigma") return {1.0, 2.0, 3.0, 4.0, 5.0};
  if (axis == "ratio") return {0.5, 1.0, 1.5};
  if (axis == "one_shot_ratio") return {0.25, 0.5, 1.0, 1.5};
  if (axis == "separability") return {true, false};
  return {};
}

inline RunConfig parse_run_config(const json& j) {
  using detail::get_field;
  RunConfig c;
  c.mode = get_field<std::string>(j, "mode");
  if (c.mode != "foresight" && c.mode != "increment" && c.mode != "stream" &&
      c.mode != "sweep") {
    throw ConfigError("mode", "expected foresight|increment|stream|sweep, got '" + c.mode + "'");
  }
  c.seed = get_field<std::uint64_t>(j, "seed");
  c.out = get_field<std::string>(j, "out");
  if (c.out.empty()) throw ConfigError("out", "empty output directory");
  c.checkpoint = get_field<std::string>(j, "checkpoint");

  auto& d = c.data;
  d.source = get_field<std::string>(j, "data.source");
  d.preset = get_field<std::string>(j, "data.preset");
  d.stream_dir = get_field<std::string>(j, "data.stream_dir");
  d.step = get_field<std::size_t>(j, "data.step");
  d.stddev = get_field<double>(j, "data.stddev");
  d.samples_per_class = get_field<std::size_t>(j, "data.samples_per_class");
  d.private_sample_ratio = get_field<double>(j, "data.private_sample_ratio");
  d.rotation_deg = get_field<double>(j, "data.rotation_deg");
  d.translation = get_field<double>(j, "data.translation");
  if (d.source == "csv") {
    if (d.stream_dir.empty()) throw ConfigError("data.stream_dir", "required when data.source is csv");
    if (!std::filesystem::is_directory(d.stream_dir)) {
      throw ConfigError("data.stream_dir", "no such directory '" + d.stream_dir + "'");
    }
  } else if (d.source == "synthetic") {
    if (d.preset != "standard" && d.preset != "office") {
      throw ConfigError("data.preset", "expected standard|office");
    }
    if (!(d.stddev > 0.0)) throw ConfigError("data.stddev", "must be positive");
    if (d.samples_per_class < 2) throw ConfigError("data.samples_per_class", "must be at least 2");
    if (!(d.private_sample_ratio > 0.0)) {
      throw ConfigError("data.private_sample_ratio", "must be positive");
    }
  } else {
    throw ConfigError("data.source", "expected synthetic|csv");
  }

  auto& f = c.run.foresight;
  f.latent_dim = get_field<std::size_t>(j, "foresight.latent_dim");
  f.hidden = get_field<std::vector<std::size_t>>(j, "foresight.hidden");
  f.classifier_hidden = get_field<std::vector<std::size_t>>(j, "foresight.classifier_hidden");
  f.epochs = get_field<std::size_t>(j, "foresight.epochs");
  f.batch_size = get_field<std::size_t>(j, "foresight.batch_size");
  f.learning_rate = get_field<double>(j, "foresight.learning_rate");
  f.separability_learning_rate = get_field<double>(j, "foresight.separability_learning_rate");
  f.negative_ratio = get_field<double>(j, "foresight.negative_ratio");
  f.k_sigma = get_field<double>(j, "foresight.k_sigma");
  f.use_separability = get_field<bool>(j, "foresight.use_separability");
  f.plateau_tolerance = get_field<double>(j, "foresight.plateau_tolerance");
  f.plateau_epochs = get_field<std::size_t>(j, "foresight.plateau_epochs");
  f.seed = c.seed;

  auto& i = c.run.increment;
  i.head_hidden = get_field<std::vector<std::size_t>>(j, "increment.head_hidden");
  i.discriminator_hidden = get_field<std::vector<std::size_t>>(j, "increment.discriminator_hidden");
  i.autoencoder_hidden = get_field<std::vector<std::size_t>>(j, "increment.autoencoder_hidden");
  i.autoencoder_identity_init = get_field<bool>(j, "increment.autoencoder_identity_init");
  i.ae_epochs = get_field<std::size_t>(j, "increment.ae_epochs");
  i.ae_batch_per_class = get_field<std::size_t>(j, "increment.ae_batch_per_class");
  i.ae_learning_rate = get_field<double>(j, "increment.ae_learning_rate");
  i.epochs = get_field<std::size_t>(j, "increment.epochs");
  i.proxy_per_class = get_field<std::size_t>(j, "increment.proxy_per_class");
  i.confident_fraction = get_field<double>(j, "increment.confident_fraction");
  i.distillation_tau = get_field<double>(j, "increment.distillation_tau");
  i.reversal_coefficient = get_field<double>(j, "increment.reversal_coefficient");
  i.lr_c = get_field<double>(j, "increment.lr_c");
  i.lr_disc = get_field<double>(j, "increment.lr_disc");
  i.lr_confusion = get_field<double>(j, "increment.lr_confusion");
  i.lr_r1 = get_field<double>(j, "increment.lr_r1");
  i.lr_r2 = get_field<double>(j, "increment.lr_r2");
  i.seed = c.seed;

  auto& p = c.run.probe;
  p.hidden = get_field<std::size_t>(j, "probe.hidden");
  p.epochs = get_field<std::size_t>(j, "probe.epochs");
  p.learning_rate = get_field<double>(j, "probe.learning_rate");
  p.train_fraction = get_field<double>(j, "probe.train_fraction");
  p.seed = c.seed;
  c.run.delta = get_field<double>(j, "delta");
  c.run.risk_proxy_per_class = get_field<std::size_t>(j, "risk_proxy_per_class");

  try {
    f.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError("foresight", e.what());
  }
  try {
    i.validate();
  } catch (const InvalidArgument& e) {
    throw ConfigError("increment", e.what());
  }
  if (!(c.run.delta > 0.0 && c.run.delta < 1.0)) throw ConfigError("delta", "must be in (0, 1)");

  c.sweep_axis = get_field<std::string>(j, "sweep.axis");
  c.sweep_grid = get_field<std::vector<json>>(j, "sweep.grid");
  if (c.mode == "sweep") {
    const auto& axes = sweep_axes();
    if (std::find(axes.begin(), axes.end(), c.sweep_axis) == axes.end()) {
      throw ConfigError("sweep.axis",
                        "sweep needs exactly one of k_sigma|ratio|one_shot_ratio|separability");
    }
    if (c.sweep_grid.empty()) c.sweep_grid = default_grid(c.sweep_axis);
  } else if (!c.sweep_axis.empty()) {
    throw ConfigError("sweep.axis", "only valid with mode sweep");
  }
  if (c.mode == "increment" && c.checkpoint.empty()) {
    throw ConfigError("checkpoint", "increment mode needs a checkpoint directory");
  }
  return c;
}

/// Hex digest of the resolved config without seed and output location.
inline std::string config_hash(const json& resolved) {
  json j = resolved;
  j.erase("seed");
  j.erase("out");
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(detail::fnv1a(j.dump())));
  return buf;
}

inline std::filesystem::path run_directory(const json& resolved) {
  return std::filesystem::path(resolved.at("out").get<std::string>()) /
         (config_hash(resolved) + "-seed" + std::to_string(resolved.at("seed").get<std::uint64_t>()));
}

// ---------------------------------------------------------------------------
// Data
// ---------------------------------------------------------------------------

inline std::vector<StreamBundle> synthetic_stream(const RunConfig& c) {
  ShiftSpec shift{c.data.rotation_deg, {c.data.translation, c.data.translation}, 1.0, 0.0};
  StreamSpec spec = standard_stream_spec(c.seed);
  StreamSchedule schedule = standard_schedule(shift);
  if (c.data.preset == "office") {
    schedule = office_shaped_schedule(shift);
    std::size_t n = 0;
    for (const auto& s : schedule.steps) n += s.target_shared.size() + s.target_private.size();
    spec.class_means = grid_class_means(n, spec.feature_dim, 4.0);
  }
  spec.stddev = c.data.stddev;
  spec.samples_per_class = c.data.samples_per_class;
  spec.private_sample_ratio = c.data.private_sample_ratio;
  return build_stream(schedule, spec);
}

inline std::size_t stream_length(const RunConfig& c) {
  if (c.data.source == "csv") return load_stream_manifest(c.data.stream_dir).size();
  return synthetic_stream(c).size();
}

// Step t as stage 2 sees it. Source data of step 0 is never loaded: it is
// consumed by foresight only.
inline StreamBundle stage2_step(const RunConfig& c, std::size_t t,
                                const std::vector<StreamBundle>* synthetic) {
  if (synthetic) {
    StreamBundle b = (*synthetic)[t];
    if (t == 0) b.inputs.source.reset();
    return b;
  }
  return load_stream_step(c.data.stream_dir, t, t > 0);
}

inline Dataset foresight_source(const RunConfig& c, const std::vector<StreamBundle>* synthetic) {
  std::optional<Dataset> src;
  if (synthetic) {
    src = synthetic->front().inputs.source;
  } else {
    src = load_stream_step(c.data.stream_dir, 0, true).inputs.source;
  }
  if (!src) throw ConfigError("data", "step 0 has no labeled source data for foresight");
  return *src;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline json step_json(const StepReport& s) {
  return {{"eval", to_json(s.eval)},
          {"bound", to_json(s.bound)},
          {"shared_acc", s.shared_acc},
          {"baseline_shared_acc", s.baseline_shared_acc}};
}

inline std::string metrics_csv(const std::vector<StepReport>& steps) {
  std::string out = std::string(kMetricsCsvHeader) + "\n";
  for (const auto& s : steps) out += metrics_csv_row(s.eval, s.bound) + "\n";
  return out;
}

inline void freeze_config(const std::filesystem::path& dir, const json& resolved) {
  io::write_text_file(dir / "config.json", resolved.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

struct CommandResult {
  int exit_code = kOk;
  std::filesystem::path run_dir;
  std::string message;
};

inline CommandResult cmd_foresight(const RunConfig& c, const json& resolved) {
  const auto dir = run_directory(resolved);
  freeze_config(dir, resolved);
  std::optional<std::vector<StreamBundle>> synth;
  if (c.data.source == "synthetic") synth = synthetic_stream(c);
  const Dataset src = foresight_source(c, synth ? &*synth : nullptr);
  try {
    auto fr = train_foresight(src, c.run.foresight);
    save_foresight_checkpoint(dir, fr.model, fr.prototypes, fr.log);
  } catch (const ForesightDiverged& e) {
    save_foresight_checkpoint(dir / "last_good", e.last_good, e.prototypes, {});
    return {kNumericalFailure, dir, e.what()};
  }
  return {kOk, dir, ""};
}

// Loads either a foresight or an increment checkpoint as a stage-2 state.
inline IncrementState load_state(const std::filesystem::path& dir, const IncrementConfig& cfg) {
  const auto j = json::parse(io::read_text_file(dir / ckpt::kWeights));
  if (j.value("format", "") == "tido.source_model") {
    auto fc = load_foresight_checkpoint(dir);
    return make_initial_state(fc.model, fc.prototypes, cfg);
  }
  return load_increment_checkpoint(dir);
}

inline CommandResult cmd_increment(const RunConfig& c, const json& resolved) {
  const auto dir = run_directory(resolved);
  freeze_config(dir, resolved);
  if (!std::filesystem::is_directory(c.checkpoint)) {
    throw ConfigError("checkpoint", "no such directory '" + c.checkpoint + "'");
  }
  IncrementState state = load_state(c.checkpoint, c.run.increment);
  std::optional<std::vector<StreamBundle>> synth;
  if (c.data.source == "synthetic") synth = synthetic_stream(c);
  const std::size_t n = synth ? synth->size() : load_stream_manifest(c.data.stream_dir).size();
  if (c.data.step >= n) throw ConfigError("data.step", "stream has " + std::to_string(n) + " steps");
  const StreamBundle b = stage2_step(c, c.data.step, synth ? &*synth : nullptr);

  StreamRunConfig run = c.run;
  run.increment.seed = derive_seed(c.seed, c.data.step);
  auto r = run_stage2(state.source, state.prototypes, std::span<const StreamBundle>(&b, 1), run,
                      &state);
  if (!r.steps.empty()) {
    save_increment_checkpoint(dir / "checkpoint", r.state, r.steps.back().log);
  }
  json report{{"mode", "increment"},
              {"config_hash", config_hash(resolved)},
              {"seed", c.seed},
              {"step", c.data.step},
              {"ok", r.ok},
              {"failure", r.failure},
              {"steps", json::array()}};
  for (const auto& s : r.steps) report["steps"].push_back(step_json(s));
  io::write_text_file(dir / "report.json", report.dump(2) + "\n");
  io::write_text_file(dir / "metrics.csv", metrics_csv(r.steps));
  return {r.ok ? kOk : kNumericalFailure, dir, r.failure};
}

inline CommandResult cmd_stream(const RunConfig& c, const json& resolved,
                                std::optional<std::filesystem::path> dir_override = {}) {
  const auto dir = dir_override ? *dir_override : run_directory(resolved);
  freeze_config(dir, resolved);
  std::optional<std::vector<StreamBundle>> synth;
  if (c.data.source == "synthetic") synth = synthetic_stream(c);
  const std::size_t n = synth ? synth->size() : load_stream_manifest(c.data.stream_dir).size();

  SourceModel model;
  PrototypeSet prototypes;
  if (!c.checkpoint.empty()) {
    if (!std::filesystem::is_directory(c.checkpoint)) {
      throw ConfigError("checkpoint", "no such directory '" + c.checkpoint + "'");
    }
    auto fc = load_foresight_checkpoint(c.checkpoint);
    model = std::move(fc.model);
    prototypes = std::move(fc.prototypes);
  } else {
    const Dataset src = foresight_source(c, synth ? &*synth : nullptr);
    try {
      auto fr = train_foresight(src, c.run.foresight);
      save_foresight_checkpoint(dir / "foresight", fr.model, fr.prototypes, fr.log);
      model = std::move(fr.model);
      prototypes = std::move(fr.prototypes);
    } catch (const ForesightDiverged& e) {
      return {kNumericalFailure, dir, e.what()};
    }
  }

  std::vector<StreamBundle> bundles;
  bundles.reserve(n);
  for (std::size_t t = 0; t < n; ++t) bundles.push_back(stage2_step(c, t, synth ? &*synth : nullptr));
  auto r = run_stage2(model, prototypes, bundles, c.run);

  json report{{"mode", "stream"},
              {"config_hash", config_hash(resolved)},
              {"seed", c.seed},
              {"ok", r.ok},
              {"failure", r.failure},
              {"steps", json::array()}};
  for (std::size_t t = 0; t < r.steps.size(); ++t) {
    save_increment_checkpoint(dir / ("step_" + std::to_string(t)), r.snapshots[t],
                              r.steps[t].log);
    report["steps"].push_back(step_json(r.steps[t]));
  }
  io::write_text_file(dir / "report.json", report.dump(2) + "\n");
  io::write_text_file(dir / "metrics.csv", metrics_csv(r.steps));
  return {r.ok ? kOk : kNumericalFailure, dir, r.failure};
}

inline std::string grid_label(const json& v) {
  if (v.is_boolean()) return v.get<bool>() ? "on" : "off";
  return v.dump();
}

/// Applies one grid value to a resolved config.
inline json with_axis_value(json resolved, const std::string& axis, const json& v) {
  if (axis == "k_sigma") {
    resolved["foresight"]["k_sigma"] = v;
  } else if (axis == "ratio") {
    // grid values are N_src / N_neg
    const double r = v.get<double>();
    if (!(r > 0.0)) throw ConfigError("sweep.grid", "ratio must be positive");
    resolved["foresight"]["negative_ratio"] = 1.0 / r;
  } else if (axis == "one_shot_ratio") {
    resolved["data"]["private_sample_ratio"] = v;
  } else if (axis == "separability") {
    resolved["foresight"]["use_separability"] = v;
  }
  resolved["mode"] = "stream";
  resolved["sweep"] = {{"axis", ""}, {"grid", json::array()}};
  return resolved;
}

struct SweepRow {
  std::string value;
  bool ok = false;
  std::optional<double> mean_all_acc;
  std::optional<double> mean_priv_acc;
  std::string failure;
};

inline std::string sweep_summary_csv(const std::string& axis, const std::vector<SweepRow>& rows) {
  auto opt = [](const std::optional<double>& v) { return v ? format_double(*v) : std::string(); };
  std::string out = axis + ",status,all_acc,priv_acc,failure\n";
  for (const auto& r : rows) {
    std::string why = r.failure;
    for (char& ch : why) {
      if (ch == ',' || ch == '\n') ch = ';';
    }
    out += r.value + "," + (r.ok ? "ok" : "failed") + "," + opt(r.mean_all_acc) + "," +
           opt(r.mean_priv_acc) + "," + why + "\n";
  }
  return out;
}

inline CommandResult cmd_sweep(const RunConfig& c, const json& resolved,
                               std::vector<SweepRow>* rows_out = nullptr) {
  const auto dir = run_directory(resolved);
  freeze_config(dir, resolved);
  std::vector<SweepRow> rows;
  for (const auto& v : c.sweep_grid) {
    SweepRow row;
    row.value = grid_label(v);
    try {
      const json point = with_axis_value(resolved, c.sweep_axis, v);
      const RunConfig pc = parse_run_config(point);
      const auto res = cmd_stream(pc, point, dir / (c.sweep_axis + "_" + row.value));
      row.ok = res.exit_code == kOk;
      row.failure = res.message;
      if (row.ok) {
        const auto rep = json::parse(io::read_text_file(res.run_dir / "report.json"));
        double all = 0.0, priv = 0.0;
        std::size_t n_priv = 0;
        for (const auto& s : rep.at("steps")) {
          all += s.at("eval").at("all_acc").get<double>();
          if (!s.at("eval").at("priv_acc").is_null()) {
            priv += s.at("eval").at("priv_acc").get<double>();
            ++n_priv;
          }
        }
        const auto n = rep.at("steps").size();
        if (n > 0) row.mean_all_acc = all / static_cast<double>(n);
        if (n_priv > 0) row.mean_priv_acc = priv / static_cast<double>(n_priv);
      }
    } catch (const std::exception& e) {
      row.ok = false;
      row.failure = e.what();
    }
    rows.push_back(row);
  }
  io::write_text_file(dir / "summary.csv", sweep_summary_csv(c.sweep_axis, rows));
  const bool all_ok = std::all_of(rows.begin(), rows.end(), [](const SweepRow& r) { return r.ok; });
  if (rows_out) *rows_out = rows;
  return {all_ok ? kOk : kPartialSweep, dir, all_ok ? "" : "one or more grid points failed"};
}

/// Resolves the configuration and runs the selected mode. Never throws.
inline CommandResult run(const Flags& flags, const EnvLookup& env = process_env,
                         std::ostream& err = std::cerr) {
  try {
    const json resolved = resolve_config(flags, env);
    const RunConfig c = parse_run_config(resolved);
    CommandResult r;
    if (c.mode == "foresight") {
      r = cmd_foresight(c, resolved);
    } else if (c.mode == "increment") {
      r = cmd_increment(c, resolved);
    } else if (c.mode == "stream") {
      r = cmd_stream(c, resolved);
    } else {
      r = cmd_sweep(c, resolved);
    }
    if (r.exit_code != kOk) err << "tido: " << r.message << "\n";
    return r;
  } catch (const ConfigError& e) {
    err << "tido: config error: " << e.what() << "\n";
    return {kConfigError, {}, e.what()};
  } catch (const InvalidArgument& e) {
    err << "tido: config error: " << e.what() << "\n";
    return {kConfigError, {}, e.what()};
  } catch (const ParseError& e) {
    err << "tido: config error: " << e.what() << "\n";
    return {kConfigError, {}, e.what()};
  } catch (const TrainingDiverged& e) {
    err << "tido: numerical failure: " << e.what() << "\n";
    return {kNumericalFailure, {}, e.what()};
  } catch (const GenerationFailure& e) {
    err << "tido: numerical failure: " << e.what() << "\n";
    return {kNumericalFailure, {}, e.what()};
  }
}

}  // namespace tido::cli
