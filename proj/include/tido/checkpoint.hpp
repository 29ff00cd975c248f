#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "tido/error.hpp"
#include "tido/foresight.hpp"
#include "tido/incremental.hpp"
#include "tido/io.hpp"
#include "tido/prototypes.hpp"

namespace tido {

inline constexpr int kCheckpointFormatVersion = 1;

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const Mlp& m) {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& p : m.params()) {
    params.push_back(std::vector<double>(p.data().begin(), p.data().end()));
  }
  return {{"dims", m.dims()}, {"params", params}};
}

inline Mlp mlp_from_json(const nlohmann::json& j) {
  const auto dims = j.at("dims").get<std::vector<std::size_t>>();
  if (dims.empty()) return Mlp();
  Mlp m(dims);
  const auto& src = j.at("params");
  auto& params = m.mutable_params();
  if (src.size() != params.size()) {
    throw InvalidArgument("weights json: expected " + std::to_string(params.size()) +
                          " tensors, got " + std::to_string(src.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = src[i].get<std::vector<double>>();
    if (values.size() != params[i].size()) {
      throw InvalidArgument("weights json: tensor " + std::to_string(i) +
                            " has wrong size");
    }
    params[i] = Tensor(params[i].shape(), std::move(values));
  }
  return m;
}

inline nlohmann::json to_json(const SourceModel& m) {
  return {{"format", "tido.source_model"},
          {"version", kCheckpointFormatVersion},
          {"classes", m.classes},
          {"f_s", to_json(m.f_s)},
          {"g_s", to_json(m.g_s)}};
}

inline SourceModel source_model_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "tido.source_model") {
    throw InvalidArgument("source model json: wrong format tag");
  }
  if (j.value("version", 0) != kCheckpointFormatVersion) {
    throw InvalidArgument("source model json: unsupported version");
  }
  return SourceModel{mlp_from_json(j.at("f_s")), mlp_from_json(j.at("g_s")),
                     j.at("classes").get<std::vector<ClassId>>()};
}

inline nlohmann::json to_json(const ClassRegistry& r, std::size_t step) {
  nlohmann::json steps = nlohmann::json::array();
  for (std::size_t t = 0; t < r.steps.size(); ++t) {
    steps.push_back({{"step", t},
                     {"shared", r.steps[t].shared},
                     {"private", r.steps[t].private_classes}});
  }
  return {{"format", "tido.registry"},
          {"version", kCheckpointFormatVersion},
          {"completed_increments", step},
          {"steps", steps}};
}

inline ClassRegistry registry_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "tido.registry") {
    throw InvalidArgument("registry json: wrong format tag");
  }
  ClassRegistry r;
  for (const auto& s : j.at("steps")) {
    r.steps.push_back({s.at("shared").get<std::vector<ClassId>>(),
                       s.at("private").get<std::vector<ClassId>>()});
  }
  return r;
}

// Everything except prototypes and registry, which live in their own files.
inline nlohmann::json state_weights_json(const IncrementState& s) {
  nlohmann::json guides = nlohmann::json::array();
  for (const auto& [c, g] : s.guides.guides) {
    guides.push_back({{"class_id", c},
                      {"shared", s.guides.shared.count(c) != 0},
                      {"value", g}});
  }
  return {{"format", "tido.increment_state"},
          {"version", kCheckpointFormatVersion},
          {"step", s.step},
          {"source", to_json(s.source)},
          {"target", {{"classes", s.target.classes},
                      {"f_t", to_json(s.target.f_t)},
                      {"g_t", to_json(s.target.g_t)}}},
          {"f_e", to_json(s.ae.f_e)},
          {"f_d", to_json(s.ae.f_d)},
          {"discriminator", to_json(s.disc.d)},
          {"guides", guides}};
}

// ---------------------------------------------------------------------------
// Log CSVs
// ---------------------------------------------------------------------------

inline std::string foresight_log_csv(const std::vector<ForesightLogRow>& rows) {
  std::string out = "epoch,l_ce,L_s1,L_s2,total\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + format_double(r.l_ce) + "," +
           format_double(r.l_s1) + "," + format_double(r.l_s2) + "," +
           format_double(r.total) + "\n";
  }
  return out;
}

inline std::string increment_log_csv(const std::vector<IncrementLogRow>& rows) {
  std::string out = "epoch,L_r1,L_r2,L_c,L_d_disc,L_d_conf\n";
  for (const auto& r : rows) {
    out += std::to_string(r.epoch) + "," + format_double(r.l_r1) + "," +
           format_double(r.l_r2) + "," + format_double(r.l_c) + "," +
           format_double(r.l_d_disc) + "," + format_double(r.l_d_conf) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint directories
// ---------------------------------------------------------------------------

namespace ckpt {
inline constexpr const char* kWeights = "weights.json";
inline constexpr const char* kPrototypes = "prototypes.json";
inline constexpr const char* kRegistry = "registry.json";
inline constexpr const char* kForesightLog = "foresight_log.csv";
inline constexpr const char* kIncrementLog = "increment_log.csv";
}  // namespace ckpt

inline void save_foresight_checkpoint(const std::filesystem::path& dir,
                                      const SourceModel& model,
                                      const PrototypeSet& prototypes,
                                      const std::vector<ForesightLogRow>& log) {
  io::write_text_file(dir / ckpt::kWeights, to_json(model).dump(1) + "\n");
  save_prototypes(prototypes, dir / ckpt::kPrototypes);
  io::write_text_file(dir / ckpt::kForesightLog, foresight_log_csv(log));
}

struct ForesightCheckpoint {
  SourceModel model;
  PrototypeSet prototypes;
};

inline ForesightCheckpoint load_foresight_checkpoint(const std::filesystem::path& dir) {
  return {source_model_from_json(
              nlohmann::json::parse(io::read_text_file(dir / ckpt::kWeights))),
          load_prototypes(dir / ckpt::kPrototypes)};
}

inline void save_increment_checkpoint(const std::filesystem::path& dir,
                                      const IncrementState& s,
                                      const std::vector<IncrementLogRow>& log) {
  io::write_text_file(dir / ckpt::kWeights, state_weights_json(s).dump(1) + "\n");
  save_prototypes(s.prototypes, dir / ckpt::kPrototypes);
  io::write_text_file(dir / ckpt::kRegistry, to_json(s.registry, s.step).dump(2) + "\n");
  io::write_text_file(dir / ckpt::kIncrementLog, increment_log_csv(log));
}

inline IncrementState load_increment_checkpoint(const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(io::read_text_file(dir / ckpt::kWeights));
  if (j.value("format", "") != "tido.increment_state") {
    throw InvalidArgument("increment checkpoint: wrong format tag");
  }
  if (j.value("version", 0) != kCheckpointFormatVersion) {
    throw InvalidArgument("increment checkpoint: unsupported version");
  }
  IncrementState s;
  s.step = j.at("step").get<std::size_t>();
  s.source = source_model_from_json(j.at("source"));
  const auto& t = j.at("target");
  s.target.classes = t.at("classes").get<std::vector<ClassId>>();
  s.target.f_t = mlp_from_json(t.at("f_t"));
  s.target.g_t = mlp_from_json(t.at("g_t"));
  s.ae.f_e = mlp_from_json(j.at("f_e"));
  s.ae.f_d = mlp_from_json(j.at("f_d"));
  s.disc.d = mlp_from_json(j.at("discriminator"));
  for (const auto& g : j.at("guides")) {
    const auto c = g.at("class_id").get<ClassId>();
    s.guides.guides[c] = g.at("value").get<std::vector<double>>();
    (g.at("shared").get<bool>() ? s.guides.shared : s.guides.private_classes).insert(c);
  }
  s.prototypes = load_prototypes(dir / ckpt::kPrototypes);
  s.registry = registry_from_json(
      nlohmann::json::parse(io::read_text_file(dir / ckpt::kRegistry)));
  return s;
}

}  // namespace tido
