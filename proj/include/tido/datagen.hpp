#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "tido/error.hpp"
#include "tido/io.hpp"
#include "tido/prototypes.hpp"
#include "tido/rng.hpp"
#include "tido/tensor.hpp"

namespace tido {

/// Labeled feature vectors with a domain tag per row.
struct Dataset {
  Tensor x;
  std::vector<ClassId> labels;
  std::vector<std::string> domains;

  std::size_t size() const { return labels.size(); }
  std::size_t feature_dim() const { return x.cols(); }

  std::vector<ClassId> classes() const {
    std::set<ClassId> s(labels.begin(), labels.end());
    return {s.begin(), s.end()};
  }

  Dataset filter(const std::set<ClassId>& keep) const {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (keep.count(labels[i])) idx.push_back(i);
    }
    return subset(idx);
  }

  Dataset subset(std::span<const std::size_t> idx) const {
    Dataset out{x.gather_rows(idx), {}, {}};
    if (idx.empty()) out.x = Tensor::matrix(0, x.cols());
    for (std::size_t i : idx) {
      out.labels.push_back(labels[i]);
      out.domains.push_back(domains[i]);
    }
    return out;
  }

  friend bool operator==(const Dataset&, const Dataset&) = default;
};

inline Dataset concat(const Dataset& a, const Dataset& b) {
  Dataset out{concat_rows(a.x, b.x), a.labels, a.domains};
  out.labels.insert(out.labels.end(), b.labels.begin(), b.labels.end());
  out.domains.insert(out.domains.end(), b.domains.begin(), b.domains.end());
  return out;
}

struct ClassCluster {
  ClassId class_id = 0;
  std::vector<double> mean;
  double stddev = 1.0;          // isotropic covariance scale
  std::size_t samples = 0;      // 0: use DomainSpec::samples_per_class
};

struct DomainSpec {
  std::size_t feature_dim = 2;
  std::vector<ClassCluster> clusters;
  std::size_t samples_per_class = 200;
  std::uint64_t seed = 0;
  std::string domain = "source";
};

struct ShiftSpec {
  double rotation_deg = 0.0;          // in the plane of features 0 and 1
  std::vector<double> translation;    // empty: no translation
  double scale = 1.0;
  double noise = 0.0;                 // additive isotropic Gaussian stddev

  bool is_identity() const {
    return rotation_deg == 0.0 && scale == 1.0 && noise == 0.0 &&
           std::all_of(translation.begin(), translation.end(),
                       [](double t) { return t == 0.0; });
  }
};

inline void validate(const DomainSpec& spec) {
  std::set<std::vector<double>> means;
  std::set<ClassId> ids;
  for (const auto& c : spec.clusters) {
    if (c.mean.size() != spec.feature_dim) {
      throw InvalidArgument("domain spec: mean dim mismatch for class " +
                            std::to_string(c.class_id));
    }
    if (!(c.stddev > 0.0)) {
      throw InvalidArgument("domain spec: non-positive covariance scale");
    }
    if (!means.insert(c.mean).second) {
      throw InvalidArgument("domain spec: duplicate class mean");
    }
    if (!ids.insert(c.class_id).second) {
      throw InvalidArgument("domain spec: duplicate class id");
    }
  }
}

/// Draws each class from its isotropic Gaussian; rows grouped by cluster.
inline Dataset make_domain(const DomainSpec& spec) {
  validate(spec);
  std::vector<std::vector<double>> rows;
  Dataset out;
  for (const auto& c : spec.clusters) {
    Rng rng(derive_seed(spec.seed, static_cast<std::uint64_t>(c.class_id)));
    const std::size_t n = c.samples != 0 ? c.samples : spec.samples_per_class;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> x(spec.feature_dim);
      for (std::size_t j = 0; j < x.size(); ++j) x[j] = rng.normal(c.mean[j], c.stddev);
      rows.push_back(std::move(x));
      out.labels.push_back(c.class_id);
      out.domains.push_back(spec.domain);
    }
  }
  out.x = Tensor::from_rows(rows, spec.feature_dim);
  return out;
}

inline std::vector<double> shift_point(std::span<const double> x,
                                       const ShiftSpec& s) {
  std::vector<double> y(x.begin(), x.end());
  if (s.rotation_deg != 0.0) {
    if (y.size() < 2) throw InvalidArgument("shift: rotation needs dim >= 2");
    const double th = s.rotation_deg * std::numbers::pi / 180.0;
    const double c = std::cos(th), sn = std::sin(th);
    const double a = y[0], b = y[1];
    y[0] = c * a - sn * b;
    y[1] = sn * a + c * b;
  }
  for (std::size_t j = 0; j < y.size(); ++j) {
    y[j] *= s.scale;
    if (j < s.translation.size()) y[j] += s.translation[j];
  }
  return y;
}

/// x' = scale * R(theta) * x + translation + noise; labels preserved.
inline Dataset shift_domain(const Dataset& data, const ShiftSpec& shift,
                            std::uint64_t seed) {
  if (!(shift.scale > 0.0)) throw InvalidArgument("shift: scale must be positive");
  Dataset out = data;
  Rng rng(derive_seed(seed, "shift"));
  for (std::size_t r = 0; r < data.x.rows(); ++r) {
    auto y = shift_point(data.x.row(r), shift);
    auto dst = out.x.row(r);
    for (std::size_t j = 0; j < y.size(); ++j) {
      dst[j] = y[j] + (shift.noise > 0.0 ? rng.normal(0.0, shift.noise) : 0.0);
    }
  }
  return out;
}

/// Exact inverse of a noise-free shift.
inline Dataset unshift_domain(const Dataset& data, const ShiftSpec& shift) {
  if (!(shift.scale > 0.0)) throw InvalidArgument("shift: scale must be positive");
  Dataset out = data;
  const double th = -shift.rotation_deg * std::numbers::pi / 180.0;
  const double c = std::cos(th), sn = std::sin(th);
  for (std::size_t r = 0; r < data.x.rows(); ++r) {
    auto y = out.x.row(r);
    for (std::size_t j = 0; j < y.size(); ++j) {
      if (j < shift.translation.size()) y[j] -= shift.translation[j];
      y[j] /= shift.scale;
    }
    if (shift.rotation_deg != 0.0) {
      const double a = y[0], b = y[1];
      y[0] = c * a - sn * b;
      y[1] = sn * a + c * b;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Streams
// ---------------------------------------------------------------------------

struct StreamStep {
  std::vector<ClassId> source_classes;   // may be empty
  std::vector<ClassId> target_shared;
  std::vector<ClassId> target_private;
  ShiftSpec shift;
  bool shared_only = false;  // permits an empty private set
};

struct StreamSchedule {
  std::vector<StreamStep> steps;
};

/// Class geometry shared by every step of a stream.
struct StreamSpec {
  std::size_t feature_dim = 2;
  std::map<ClassId, std::vector<double>> class_means;
  double stddev = 0.5;
  std::size_t samples_per_class = 200;
  // Private-class sample count relative to shared classes.
  double private_sample_ratio = 1.0;
  std::uint64_t seed = 0;
};

inline void validate(const StreamSchedule& schedule, const StreamSpec& spec) {
  if (schedule.steps.empty()) throw InvalidArgument("stream: empty schedule");
  std::set<ClassId> introduced_private;
  for (std::size_t t = 0; t < schedule.steps.size(); ++t) {
    const auto& s = schedule.steps[t];
    if (s.target_private.empty() && !s.shared_only) {
      throw InvalidArgument("stream: step " + std::to_string(t) +
                            " has no private class and is not shared-only");
    }
    std::set<ClassId> shared(s.target_shared.begin(), s.target_shared.end());
    for (ClassId c : s.target_private) {
      if (shared.count(c)) {
        throw InvalidArgument("stream: class " + std::to_string(c) +
                              " is both shared and private");
      }
      if (!introduced_private.insert(c).second) {
        throw InvalidArgument("stream: private class " + std::to_string(c) +
                              " introduced twice");
      }
    }
    for (ClassId c : s.source_classes) {
      if (!shared.count(c)) {
        throw InvalidArgument("stream: source class " + std::to_string(c) +
                              " missing from target shared set");
      }
    }
    auto check = [&](const std::vector<ClassId>& v) {
      for (ClassId c : v) {
        if (!spec.class_means.count(c)) {
          throw InvalidArgument("stream: no mean for class " + std::to_string(c));
        }
      }
    };
    check(s.target_shared);
    check(s.target_private);
  }
}

/// Training-facing inputs of one increment. Carries no target labels.
struct StepInputs {
  std::optional<Dataset> source;                  // new labeled source data
  Tensor target_unlabeled;                        // one sample per row
  std::map<ClassId, std::vector<double>> one_shot;
  std::vector<ClassId> target_shared;             // declared shared classes
};

/// Hidden labels of the unlabeled pool; for evaluation only.
struct EvalSet {
  Dataset data;
  std::vector<ClassId> shared;
  std::vector<ClassId> private_classes;
};

struct StreamBundle {
  StepInputs inputs;
  EvalSet eval;
};

inline std::vector<StreamBundle> build_stream(const StreamSchedule& schedule,
                                              const StreamSpec& spec) {
  validate(schedule, spec);
  const auto shared_n = spec.samples_per_class;
  const auto private_n = static_cast<std::size_t>(
      std::llround(spec.private_sample_ratio * static_cast<double>(shared_n)));
  std::vector<StreamBundle> out;
  for (std::size_t t = 0; t < schedule.steps.size(); ++t) {
    const auto& step = schedule.steps[t];
    const std::uint64_t step_seed = derive_seed(spec.seed, t);
    StreamBundle b;

    if (!step.source_classes.empty()) {
      DomainSpec src{spec.feature_dim, {}, shared_n, derive_seed(step_seed, "source"),
                     "source"};
      for (ClassId c : step.source_classes) {
        src.clusters.push_back({c, spec.class_means.at(c), spec.stddev, 0});
      }
      b.inputs.source = make_domain(src);
    }

    DomainSpec tgt{spec.feature_dim, {}, shared_n, derive_seed(step_seed, "target"),
                   "target"};
    for (ClassId c : step.target_shared) {
      tgt.clusters.push_back({c, spec.class_means.at(c), spec.stddev, 0});
    }
    for (ClassId c : step.target_private) {
      if (private_n < 2) {
        throw InvalidArgument("stream: private class " + std::to_string(c) +
                              " needs at least 2 samples");
      }
      tgt.clusters.push_back({c, spec.class_means.at(c), spec.stddev, private_n});
    }
    Dataset target = shift_domain(make_domain(tgt), step.shift,
                                  derive_seed(step_seed, "shift"));

    // One-shot sample: the generated point nearest its (shifted) class mean.
    std::set<std::size_t> taken;
    for (ClassId c : step.target_private) {
      const auto centre = shift_point(spec.class_means.at(c), step.shift);
      std::size_t best = target.size();
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t i = 0; i < target.size(); ++i) {
        if (target.labels[i] != c) continue;
        const double d = squared_distance(target.x.row(i), centre);
        if (d < best_d) {
          best_d = d;
          best = i;
        }
      }
      taken.insert(best);
      b.inputs.one_shot[c] = target.x.row_vector(best);
    }
    std::vector<std::size_t> pool;
    for (std::size_t i = 0; i < target.size(); ++i) {
      if (!taken.count(i)) pool.push_back(i);
    }
    b.eval.data = target.subset(pool);
    b.eval.shared = step.target_shared;
    b.eval.private_classes = step.target_private;
    b.inputs.target_unlabeled = b.eval.data.x;
    b.inputs.target_shared = step.target_shared;
    out.push_back(std::move(b));
  }
  return out;
}

/// Five-step schedule with the class counts of the office-object protocol:
/// 5 source / 5+5 target, 3 / 3+2, 5 / 5+3, 4 / 4+2, then a source-free step
/// with 2 private classes. Class ids are assigned sequentially.
inline StreamSchedule office_shaped_schedule(const ShiftSpec& shift) {
  const std::vector<std::pair<std::size_t, std::size_t>> shape = {
      {5, 5}, {3, 2}, {5, 3}, {4, 2}, {0, 2}};
  StreamSchedule s;
  ClassId next = 0;
  for (auto [shared, priv] : shape) {
    StreamStep step;
    for (std::size_t i = 0; i < shared; ++i) {
      step.source_classes.push_back(next);
      step.target_shared.push_back(next++);
    }
    for (std::size_t i = 0; i < priv; ++i) step.target_private.push_back(next++);
    step.shift = shift;
    s.steps.push_back(std::move(step));
  }
  return s;
}

/// 15 degree rotation plus 0.5 translation on both features.
inline ShiftSpec standard_shift() { return ShiftSpec{15.0, {0.5, 0.5}, 1.0, 0.0}; }

/// Three steps over four shared classes; each step adds two private classes.
/// Labeled source data arrives only at step 0.
inline StreamSchedule standard_schedule(const ShiftSpec& shift = standard_shift()) {
  StreamSchedule s;
  for (ClassId t = 0; t < 3; ++t) {
    StreamStep step;
    if (t == 0) step.source_classes = {0, 1, 2, 3};
    step.target_shared = {0, 1, 2, 3};
    step.target_private = {4 + 2 * t, 5 + 2 * t};
    step.shift = shift;
    s.steps.push_back(std::move(step));
  }
  return s;
}

/// 2-D geometry for the standard schedule: shared classes on a tight square
/// around the origin, private classes far out along the axes.
inline StreamSpec standard_stream_spec(std::uint64_t seed) {
  StreamSpec spec;
  spec.feature_dim = 2;
  const double a = 0.8;
  spec.class_means = {{0, {-a, -a}}, {1, {a, -a}}, {2, {-a, a}}, {3, {a, a}},
                      {4, {0, 5}},   {5, {0, -5}}, {6, {5, 0}},  {7, {-5, 0}},
                      {8, {0, 8}},   {9, {0, -8}}};
  spec.stddev = 0.35;
  spec.samples_per_class = 200;
  spec.seed = seed;
  return spec;
}

inline std::vector<StreamBundle> standard_stream(std::uint64_t seed) {
  return build_stream(standard_schedule(), standard_stream_spec(seed));
}

/// Class means on a square grid with the given spacing, centred at the origin
/// in the first two features (remaining features zero).
inline std::map<ClassId, std::vector<double>> grid_class_means(
    std::size_t num_classes, std::size_t feature_dim, double spacing) {
  const auto side = static_cast<std::size_t>(
      std::ceil(std::sqrt(static_cast<double>(num_classes))));
  const double offset = 0.5 * static_cast<double>(side - 1) * spacing;
  std::map<ClassId, std::vector<double>> means;
  for (std::size_t c = 0; c < num_classes; ++c) {
    std::vector<double> m(feature_dim, 0.0);
    m[0] = static_cast<double>(c % side) * spacing - offset;
    if (feature_dim > 1) m[1] = static_cast<double>(c / side) * spacing - offset;
    means[static_cast<ClassId>(c)] = std::move(m);
  }
  return means;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

inline std::string format_double(double v) {
  std::ostringstream ss;
  ss << std::setprecision(17) << v;
  return ss.str();
}

inline std::string to_csv(const Dataset& d) {
  std::ostringstream ss;
  for (std::size_t j = 0; j < d.feature_dim(); ++j) ss << "feature_" << j << ',';
  ss << "label,domain\n";
  for (std::size_t r = 0; r < d.size(); ++r) {
    for (double v : d.x.row(r)) ss << format_double(v) << ',';
    ss << d.labels[r] << ',' << d.domains[r] << '\n';
  }
  return ss.str();
}

inline void write_csv(const Dataset& d, const std::filesystem::path& path) {
  io::write_text_file(path, to_csv(d));
}

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur.push_back(ch);
    }
  }
  out.push_back(cur);
  return out;
}

inline double parse_double(const std::string& s, std::size_t line_no) {
  double v = 0.0;
  const char* first = s.data();
  const char* last = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || s.empty() || !std::isfinite(v)) {
    throw ParseError("bad number '" + s + "'", line_no);
  }
  return v;
}

}  // namespace detail

/// Parses `feature_0,...,feature_{d-1},label,domain` rows.
inline Dataset parse_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line)) throw ParseError("missing header", 1);
  ++line_no;
  const auto header = detail::split_csv_line(line);
  if (header.size() < 2 || header[header.size() - 2] != "label" ||
      header.back() != "domain") {
    throw ParseError("header must end with label,domain", line_no);
  }
  const std::size_t d = header.size() - 2;
  for (std::size_t j = 0; j < d; ++j) {
    if (header[j] != "feature_" + std::to_string(j)) {
      throw ParseError("unexpected header column '" + header[j] + "'", line_no);
    }
  }
  std::vector<double> values;
  Dataset out;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line == "\r") continue;
    const auto cells = detail::split_csv_line(line);
    if (cells.size() != d + 2) {
      throw ParseError("expected " + std::to_string(d + 2) + " columns, got " +
                           std::to_string(cells.size()),
                       line_no);
    }
    for (std::size_t j = 0; j < d; ++j) {
      values.push_back(detail::parse_double(cells[j], line_no));
    }
    long long label = -1;
    const auto& ls = cells[d];
    auto [ptr, ec] = std::from_chars(ls.data(), ls.data() + ls.size(), label);
    if (ec != std::errc() || ptr != ls.data() + ls.size() || label < 0 ||
        label > std::numeric_limits<ClassId>::max()) {
      throw ParseError("bad label '" + ls + "'", line_no);
    }
    out.labels.push_back(static_cast<ClassId>(label));
    out.domains.push_back(cells[d + 1]);
  }
  out.x = Tensor({out.labels.size(), d}, std::move(values));
  return out;
}

inline Dataset load_csv(const std::filesystem::path& path) {
  return parse_csv(io::read_text_file(path));
}

// Unlabeled pools reuse the CSV contract with label 0 and domain tag
// "unlabeled"; readers ignore the label column.
inline Dataset as_unlabeled(const Tensor& x) {
  Dataset d{x, std::vector<ClassId>(x.rows(), 0),
            std::vector<std::string>(x.rows(), "unlabeled")};
  return d;
}

inline void write_stream(const std::vector<StreamBundle>& stream,
                         const std::filesystem::path& dir) {
  for (std::size_t t = 0; t < stream.size(); ++t) {
    const auto step_dir = dir / ("step_" + std::to_string(t));
    std::filesystem::create_directories(step_dir);
    const auto& b = stream[t];
    if (b.inputs.source) write_csv(*b.inputs.source, step_dir / "source.csv");
    write_csv(as_unlabeled(b.inputs.target_unlabeled),
              step_dir / "target_unlabeled.csv");
    write_csv(b.eval.data, step_dir / "target_eval.csv");
    Dataset shots;
    std::vector<std::vector<double>> rows;
    for (const auto& [c, x] : b.inputs.one_shot) {
      rows.push_back(x);
      shots.labels.push_back(c);
      shots.domains.push_back("one_shot");
    }
    shots.x = Tensor::from_rows(rows, b.inputs.target_unlabeled.cols());
    write_csv(shots, step_dir / "one_shot.csv");
  }
  // Class roles per step; the CSVs alone cannot tell shared from private.
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& b : stream) {
    steps.push_back({{"target_shared", b.eval.shared},
                     {"target_private", b.eval.private_classes},
                     {"has_source", b.inputs.source.has_value()}});
  }
  io::write_text_file(dir / "stream.json",
                      nlohmann::json{{"format", "tido.stream"}, {"steps", steps}}.dump(2) +
                          "\n");
}

struct StreamManifestStep {
  std::vector<ClassId> target_shared;
  std::vector<ClassId> target_private;
  bool has_source = false;
};

inline std::vector<StreamManifestStep> load_stream_manifest(
    const std::filesystem::path& dir) {
  const auto j = nlohmann::json::parse(io::read_text_file(dir / "stream.json"));
  if (j.value("format", "") != "tido.stream") {
    throw InvalidArgument("stream manifest: wrong format tag");
  }
  std::vector<StreamManifestStep> out;
  for (const auto& s : j.at("steps")) {
    out.push_back({s.at("target_shared").get<std::vector<ClassId>>(),
                   s.at("target_private").get<std::vector<ClassId>>(),
                   s.at("has_source").get<bool>()});
  }
  return out;
}

/// Reads step t of a stream directory. source.csv is opened only when
/// `with_source` is set and the manifest lists source data for the step.
inline StreamBundle load_stream_step(const std::filesystem::path& dir, std::size_t t,
                                     bool with_source) {
  const auto manifest = load_stream_manifest(dir);
  if (t >= manifest.size()) {
    throw InvalidArgument("stream: no step " + std::to_string(t) + " in " + dir.string());
  }
  const auto& m = manifest[t];
  const auto step_dir = dir / ("step_" + std::to_string(t));
  StreamBundle b;
  if (with_source && m.has_source) b.inputs.source = load_csv(step_dir / "source.csv");
  b.inputs.target_unlabeled = load_csv(step_dir / "target_unlabeled.csv").x;
  const auto shots = load_csv(step_dir / "one_shot.csv");
  for (std::size_t i = 0; i < shots.size(); ++i) {
    b.inputs.one_shot[shots.labels[i]] = shots.x.row_vector(i);
  }
  b.inputs.target_shared = m.target_shared;
  b.eval.data = load_csv(step_dir / "target_eval.csv");
  b.eval.shared = m.target_shared;
  b.eval.private_classes = m.target_private;
  return b;
}

}  // namespace tido
