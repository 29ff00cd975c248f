#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>
#include <map>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tido/error.hpp"
#include "tido/io.hpp"
#include "tido/nn.hpp"
#include "tido/rng.hpp"
#include "tido/tensor.hpp"

namespace tido {

using ClassId = int;

inline constexpr double kVarianceFloor = 1e-6;
inline constexpr double kDefaultKSigma = 3.0;

/// Diagonal Gaussian summary of one class in latent space.
struct GaussianPrototype {
  ClassId class_id = 0;
  std::vector<double> mean;
  std::vector<double> var;
  std::size_t count = 0;

  friend bool operator==(const GaussianPrototype&, const GaussianPrototype&) = default;
};

/// One prototype per class, all in the same latent space. Immutable once
/// built; refitting produces a new set.
class PrototypeSet {
 public:
  PrototypeSet() = default;
  explicit PrototypeSet(std::size_t latent_dim) : latent_dim_(latent_dim) {}

  void insert(GaussianPrototype p) {
    if (p.mean.size() != latent_dim_ || p.var.size() != latent_dim_) {
      throw InvalidArgument("prototype set: latent dim mismatch for class " +
                            std::to_string(p.class_id));
    }
    if (by_class_.count(p.class_id) != 0) {
      throw InvalidArgument("prototype set: duplicate class " +
                            std::to_string(p.class_id));
    }
    for (double& v : p.var) v = std::max(v, kVarianceFloor);
    by_class_.emplace(p.class_id, std::move(p));
  }

  std::size_t latent_dim() const { return latent_dim_; }
  std::size_t size() const { return by_class_.size(); }
  bool empty() const { return by_class_.empty(); }
  bool contains(ClassId c) const { return by_class_.count(c) != 0; }

  const GaussianPrototype& at(ClassId c) const {
    auto it = by_class_.find(c);
    if (it == by_class_.end()) {
      throw InvalidArgument("prototype set: unknown class " + std::to_string(c));
    }
    return it->second;
  }

  // Ascending class ids.
  std::vector<ClassId> classes() const {
    std::vector<ClassId> out;
    out.reserve(by_class_.size());
    for (const auto& [c, _] : by_class_) out.push_back(c);
    return out;
  }

  auto begin() const { return by_class_.begin(); }
  auto end() const { return by_class_.end(); }

  friend bool operator==(const PrototypeSet&, const PrototypeSet&) = default;

 private:
  std::size_t latent_dim_ = 0;
  std::map<ClassId, GaussianPrototype> by_class_;
};

struct PrototypeFit {
  PrototypeSet prototypes;
  std::vector<ClassId> omitted;  // expected classes with no samples
};

/// Per-class sample mean and population variance (floored) of `features`.
inline PrototypeFit fit_prototypes(const Tensor& features,
                                   std::span<const ClassId> labels,
                                   std::span<const ClassId> expected_classes) {
  if (features.rows() == 0) throw InvalidArgument("fit_prototypes: empty input");
  if (features.rows() != labels.size()) {
    throw InvalidArgument("fit_prototypes: label count mismatch");
  }
  if (!features.all_finite()) {
    throw InvalidArgument("fit_prototypes: non-finite features");
  }
  const std::size_t d = features.cols();
  std::map<ClassId, GaussianPrototype> acc;
  for (std::size_t r = 0; r < features.rows(); ++r) {
    auto& p = acc[labels[r]];
    if (p.mean.empty()) {
      p.class_id = labels[r];
      p.mean.assign(d, 0.0);
      p.var.assign(d, 0.0);
    }
    ++p.count;
    auto x = features.row(r);
    for (std::size_t j = 0; j < d; ++j) p.mean[j] += x[j];
  }
  for (auto& [c, p] : acc) {
    for (double& m : p.mean) m /= static_cast<double>(p.count);
  }
  for (std::size_t r = 0; r < features.rows(); ++r) {
    auto& p = acc[labels[r]];
    auto x = features.row(r);
    for (std::size_t j = 0; j < d; ++j) {
      const double diff = x[j] - p.mean[j];
      p.var[j] += diff * diff;
    }
  }
  PrototypeFit fit{PrototypeSet(d), {}};
  for (auto& [c, p] : acc) {
    for (double& v : p.var) {
      v = std::max(v / static_cast<double>(p.count), kVarianceFloor);
    }
    fit.prototypes.insert(std::move(p));
  }
  for (ClassId c : expected_classes) {
    if (!fit.prototypes.contains(c)) fit.omitted.push_back(c);
  }
  return fit;
}

inline PrototypeSet fit_prototypes(const Tensor& features,
                                   std::span<const ClassId> labels) {
  return fit_prototypes(features, labels, {}).prototypes;
}

inline double log_density(const GaussianPrototype& p, std::span<const double> u) {
  if (u.size() != p.mean.size()) {
    throw InvalidArgument("log_density: dim mismatch");
  }
  constexpr double kLog2Pi = 1.8378770664093454835606594728112;
  double s = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    const double diff = u[j] - p.mean[j];
    s += -0.5 * (kLog2Pi + std::log(p.var[j])) - 0.5 * diff * diff / p.var[j];
  }
  return s;
}

/// `n` independent draws from the class Gaussian, one per row.
inline Tensor sample_proxy(const PrototypeSet& ps, ClassId c, std::size_t n,
                           std::uint64_t seed) {
  const auto& p = ps.at(c);
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(c)));
  Tensor out = Tensor::matrix(n, ps.latent_dim());
  for (std::size_t r = 0; r < n; ++r) {
    auto row = out.row(r);
    for (std::size_t j = 0; j < row.size(); ++j) {
      row[j] = p.mean[j] + std::sqrt(p.var[j]) * rng.normal();
    }
  }
  return out;
}

struct LabeledBatch {
  Tensor x;
  std::vector<ClassId> labels;
};

// `per_class` proxy samples for every class, grouped by ascending class id.
inline LabeledBatch sample_proxy_batch(const PrototypeSet& ps,
                                       std::size_t per_class,
                                       std::uint64_t seed) {
  LabeledBatch out{Tensor::matrix(0, ps.latent_dim()), {}};
  for (ClassId c : ps.classes()) {
    out.x = concat_rows(out.x, sample_proxy(ps, c, per_class, seed));
    out.labels.insert(out.labels.end(), per_class, c);
  }
  return out;
}

struct OodVerdict {
  bool ood = false;
  // max_j |u_j - mu_j| / sigma_j for each class.
  std::map<ClassId, double> normalized_distance;
};

/// Out-of-distribution iff the normalized residual strictly exceeds
/// `k_sigma` for every class.
inline OodVerdict is_ood(const PrototypeSet& ps, std::span<const double> u,
                         double k_sigma = kDefaultKSigma) {
  if (ps.empty()) throw InvalidState("is_ood: empty prototype set");
  if (u.size() != ps.latent_dim()) throw InvalidArgument("is_ood: dim mismatch");
  OodVerdict v{true, {}};
  for (const auto& [c, p] : ps) {
    double worst = 0.0;
    for (std::size_t j = 0; j < u.size(); ++j) {
      worst = std::max(worst, std::abs(u[j] - p.mean[j]) / std::sqrt(p.var[j]));
    }
    v.normalized_distance[c] = worst;
    if (!(worst > k_sigma)) v.ood = false;
  }
  return v;
}

struct VectorLossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

/// Softmax over class log-densities; returns -log of entry `y` and its
/// gradient with respect to `u`.
inline VectorLossAndGrad class_separability_loss(const PrototypeSet& ps,
                                                 std::span<const double> u,
                                                 ClassId y) {
  if (!ps.contains(y)) {
    throw InvalidArgument("class_separability_loss: unknown class " +
                          std::to_string(y));
  }
  if (u.size() != ps.latent_dim()) {
    throw InvalidArgument("class_separability_loss: dim mismatch");
  }
  std::vector<double> logd;
  std::vector<const GaussianPrototype*> protos;
  for (const auto& [c, p] : ps) {
    logd.push_back(log_density(p, u));
    protos.push_back(&p);
  }
  const double lmax = *std::max_element(logd.begin(), logd.end());
  double z = 0.0;
  for (double l : logd) z += std::exp(l - lmax);
  const double lse = lmax + std::log(z);

  VectorLossAndGrad out{0.0, std::vector<double>(u.size(), 0.0)};
  for (std::size_t k = 0; k < protos.size(); ++k) {
    const double prob = std::exp(logd[k] - lse);
    const double coef = prob - (protos[k]->class_id == y ? 1.0 : 0.0);
    if (protos[k]->class_id == y) out.loss = lse - logd[k];
    if (coef == 0.0) continue;
    // d log_density / d u_j = -(u_j - mu_j) / var_j
    for (std::size_t j = 0; j < u.size(); ++j) {
      out.grad[j] -= coef * (u[j] - protos[k]->mean[j]) / protos[k]->var[j];
    }
  }
  return out;
}

/// Mean separability loss over a batch of latents, gradient per row.
inline LossAndGrad separability_loss_batch(const PrototypeSet& ps,
                                           const Tensor& latents,
                                           std::span<const ClassId> labels) {
  LossAndGrad out{0.0, Tensor(latents.shape())};
  const std::size_t n = latents.rows();
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto lg = class_separability_loss(ps, latents.row(r), labels[r]);
    out.loss += lg.loss * inv_n;
    auto g = out.grad.row(r);
    for (std::size_t j = 0; j < g.size(); ++j) g[j] = lg.grad[j] * inv_n;
  }
  return out;
}

/// Count-weighted moment merge; classes present in only one set are copied.
inline PrototypeSet merge_prototypes(const PrototypeSet& a, const PrototypeSet& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.latent_dim() != b.latent_dim()) {
    throw InvalidArgument("merge_prototypes: latent dim mismatch");
  }
  PrototypeSet out(a.latent_dim());
  for (const auto& [c, pa] : a) {
    if (!b.contains(c)) {
      out.insert(pa);
      continue;
    }
    const auto& pb = b.at(c);
    const double na = static_cast<double>(pa.count);
    const double nb = static_cast<double>(pb.count);
    const double n = na + nb;
    GaussianPrototype m{c, std::vector<double>(a.latent_dim()),
                        std::vector<double>(a.latent_dim()), pa.count + pb.count};
    for (std::size_t j = 0; j < a.latent_dim(); ++j) {
      if (n == 0.0) {
        m.mean[j] = 0.5 * (pa.mean[j] + pb.mean[j]);
        m.var[j] = 0.5 * (pa.var[j] + pb.var[j]);
        continue;
      }
      m.mean[j] = (na * pa.mean[j] + nb * pb.mean[j]) / n;
      const double second = (na * (pa.var[j] + pa.mean[j] * pa.mean[j]) +
                             nb * (pb.var[j] + pb.mean[j] * pb.mean[j])) /
                            n;
      m.var[j] = std::max(second - m.mean[j] * m.mean[j], kVarianceFloor);
    }
    out.insert(std::move(m));
  }
  for (const auto& [c, pb] : b) {
    if (!a.contains(c)) out.insert(pb);
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON persistence
// ---------------------------------------------------------------------------

inline constexpr int kPrototypeFormatVersion = 1;

inline nlohmann::json to_json(const PrototypeSet& ps) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& [c, p] : ps) {
    classes.push_back({{"class_id", p.class_id},
                       {"mean", p.mean},
                       {"var", p.var},
                       {"count", p.count}});
  }
  return {{"format", "tido.prototypes"},
          {"version", kPrototypeFormatVersion},
          {"latent_dim", ps.latent_dim()},
          {"classes", classes}};
}

inline PrototypeSet prototypes_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "tido.prototypes") {
    throw InvalidArgument("prototype json: wrong format tag");
  }
  if (j.value("version", 0) != kPrototypeFormatVersion) {
    throw InvalidArgument("prototype json: unsupported version");
  }
  PrototypeSet ps(j.at("latent_dim").get<std::size_t>());
  for (const auto& e : j.at("classes")) {
    ps.insert(GaussianPrototype{e.at("class_id").get<ClassId>(),
                                e.at("mean").get<std::vector<double>>(),
                                e.at("var").get<std::vector<double>>(),
                                e.at("count").get<std::size_t>()});
  }
  return ps;
}

inline void save_prototypes(const PrototypeSet& ps,
                            const std::filesystem::path& path) {
  io::write_text_file(path, to_json(ps).dump(2) + "\n");
}

inline PrototypeSet load_prototypes(const std::filesystem::path& path) {
  return prototypes_from_json(nlohmann::json::parse(io::read_text_file(path)));
}

}  // namespace tido
