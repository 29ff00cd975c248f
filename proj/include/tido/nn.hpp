#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "tido/error.hpp"
#include "tido/rng.hpp"
#include "tido/tensor.hpp"

namespace tido {

inline constexpr double kProbabilityFloor = 1e-12;

// ---------------------------------------------------------------------------
// Losses and the temperature softmax
// ---------------------------------------------------------------------------

/// Temperature softmax exp(z_i/tau) / sum_j exp(z_j/tau), max-subtracted.
inline std::vector<double> softmax_temp(std::span<const double> z, double tau) {
  if (z.empty()) throw InvalidArgument("softmax_temp: empty logits");
  if (!(tau > 0.0)) throw InvalidArgument("softmax_temp: tau must be positive");
  const double zmax = *std::max_element(z.begin(), z.end());
  std::vector<double> p(z.size());
  double total = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp((z[i] - zmax) / tau);
    total += p[i];
  }
  for (double& v : p) v /= total;
  return p;
}

inline double cross_entropy(std::span<const double> probs, std::size_t label) {
  if (label >= probs.size()) {
    throw InvalidArgument("cross_entropy: label " + std::to_string(label) +
                          " out of range");
  }
  return -std::log(std::max(probs[label], kProbabilityFloor));
}

inline double mse(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "mse");
  if (a.empty()) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

// d mse(a, b) / d a.
inline Tensor mse_grad(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "mse_grad");
  Tensor g(a.shape());
  const double scale = a.empty() ? 0.0 : 2.0 / static_cast<double>(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) g[i] = scale * (a[i] - b[i]);
  return g;
}

struct LossAndGrad {
  double loss = 0.0;
  Tensor grad;  // d loss / d input, same shape as the input
};

/// Mean over rows of cross_entropy(softmax_temp(logits_i, tau), labels_i),
/// scaled by `weight`, with the gradient w.r.t. the logits.
inline LossAndGrad softmax_cross_entropy(const Tensor& logits,
                                         std::span<const std::size_t> labels,
                                         double tau, double weight = 1.0) {
  if (logits.rows() != labels.size()) {
    throw InvalidArgument("softmax_cross_entropy: label count mismatch");
  }
  LossAndGrad out{0.0, Tensor(logits.shape())};
  const std::size_t n = logits.rows();
  if (n == 0) return out;
  const double inv_n = weight / static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r) {
    const auto p = softmax_temp(logits.row(r), tau);
    out.loss += cross_entropy(p, labels[r]);
    auto g = out.grad.row(r);
    for (std::size_t c = 0; c < p.size(); ++c) {
      g[c] = inv_n * (p[c] - (c == labels[r] ? 1.0 : 0.0)) / tau;
    }
  }
  out.loss *= inv_n;
  return out;
}

// ---------------------------------------------------------------------------
// Multilayer perceptron
// ---------------------------------------------------------------------------

using Gradients = std::vector<Tensor>;

class Mlp;

/// Activations recorded by a forward pass; consumed by Mlp::backward.
struct MlpCache {
  const Mlp* owner = nullptr;
  std::uint64_t version = 0;
  std::vector<Tensor> activations;  // [input, layer 1 out, ..., output]
};

/// Fully connected network, tanh on hidden layers and identity on the output.
/// Parameters are stored as [W0, b0, W1, b1, ...] with W_l shaped (out x in).
class Mlp {
 public:
  Mlp() = default;

  // Zero-initialized network with the given layer widths (input first).
  explicit Mlp(std::vector<std::size_t> dims) : dims_(std::move(dims)) {
    if (dims_.size() < 2) throw InvalidArgument("mlp: need at least two widths");
    for (std::size_t l = 0; l + 1 < dims_.size(); ++l) {
      if (dims_[l] == 0 || dims_[l + 1] == 0) {
        throw InvalidArgument("mlp: zero layer width");
      }
      params_.push_back(Tensor::matrix(dims_[l + 1], dims_[l]));
      params_.push_back(Tensor({dims_[l + 1]}));
    }
  }

  // Glorot-uniform weights, zero biases.
  static Mlp random(std::vector<std::size_t> dims, Rng& rng) {
    Mlp m(std::move(dims));
    for (std::size_t l = 0; l < m.num_layers(); ++l) {
      Tensor& w = m.params_[2 * l];
      const double limit =
          std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
      for (double& v : w.data()) v = rng.uniform(-limit, limit);
    }
    return m;
  }

  // Single linear layer computing the identity map.
  static Mlp identity(std::size_t dim) {
    Mlp m({dim, dim});
    for (std::size_t i = 0; i < dim; ++i) m.params_[0](i, i) = 1.0;
    return m;
  }

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t num_layers() const { return params_.size() / 2; }
  std::size_t input_dim() const { return dims_.front(); }
  std::size_t output_dim() const { return dims_.back(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.size();
    return n;
  }

  const std::vector<Tensor>& params() const { return params_; }
  const Tensor& weight(std::size_t layer) const { return params_[2 * layer]; }
  const Tensor& bias(std::size_t layer) const { return params_[2 * layer + 1]; }

  // Mutable access invalidates outstanding forward caches.
  std::vector<Tensor>& mutable_params() {
    ++version_;
    return params_;
  }

  std::uint64_t version() const { return version_; }

  Gradients zero_gradients() const {
    Gradients g;
    g.reserve(params_.size());
    for (const auto& p : params_) g.emplace_back(p.shape());
    return g;
  }

  Tensor forward(const Tensor& x) const {
    check_input(x);
    Tensor a = x;
    for (std::size_t l = 0; l < num_layers(); ++l) {
      a = layer_forward(l, a);
    }
    return a;
  }

  Tensor forward(const Tensor& x, MlpCache& cache) const {
    check_input(x);
    cache.owner = this;
    cache.version = version_;
    cache.activations.clear();
    cache.activations.reserve(num_layers() + 1);
    cache.activations.push_back(x);
    for (std::size_t l = 0; l < num_layers(); ++l) {
      cache.activations.push_back(layer_forward(l, cache.activations.back()));
    }
    return cache.activations.back();
  }

  std::vector<double> forward_one(std::span<const double> x) const {
    Tensor batch({1, x.size()}, std::vector<double>(x.begin(), x.end()));
    return forward(batch).row_vector(0);
  }

  /// Reverse-mode pass. Accumulates parameter gradients into `grads` (which
  /// must come from zero_gradients() or a previous backward) and, when
  /// `input_grad` is non-null, writes d loss / d input into it.
  void backward(const MlpCache& cache, const Tensor& upstream, Gradients& grads,
                Tensor* input_grad = nullptr) const {
    backward_impl(cache, upstream, &grads, input_grad);
  }

  // d loss / d input only; parameter gradients are not formed.
  Tensor backward_input(const MlpCache& cache, const Tensor& upstream) const {
    Tensor g;
    backward_impl(cache, upstream, nullptr, &g);
    return g;
  }

  /// Appends `extra` output units with small random weights; existing units
  /// keep their parameters.
  void widen_output(std::size_t extra, Rng& rng) {
    if (extra == 0) return;
    const std::size_t last = num_layers() - 1;
    Tensor& w = params_[2 * last];
    Tensor& b = params_[2 * last + 1];
    const std::size_t in_dim = w.cols();
    const std::size_t out_dim = w.rows() + extra;
    const double limit = std::sqrt(6.0 / static_cast<double>(in_dim + out_dim));
    std::vector<double> wd(w.values());
    std::vector<double> bd(b.values());
    for (std::size_t k = 0; k < extra * in_dim; ++k) {
      wd.push_back(rng.uniform(-limit, limit));
    }
    bd.resize(out_dim, 0.0);
    w = Tensor({out_dim, in_dim}, std::move(wd));
    b = Tensor({out_dim}, std::move(bd));
    dims_.back() = out_dim;
    ++version_;
  }

  /// Inserts `extra` output units before the last `tail` units (used to keep
  /// the negative-class unit last when new source classes are added).
  void insert_outputs_before_tail(std::size_t extra, std::size_t tail, Rng& rng) {
    if (extra == 0) return;
    widen_output(extra, rng);
    const std::size_t last = num_layers() - 1;
    Tensor& w = params_[2 * last];
    Tensor& b = params_[2 * last + 1];
    const std::size_t rows = w.rows();
    // Rotate the trailing `extra` new rows in front of the old tail rows.
    std::vector<std::size_t> order(rows);
    const std::size_t keep = rows - extra - tail;
    for (std::size_t i = 0; i < keep; ++i) order[i] = i;
    for (std::size_t i = 0; i < extra; ++i) order[keep + i] = keep + tail + i;
    for (std::size_t i = 0; i < tail; ++i) order[keep + extra + i] = keep + i;
    Tensor nw = w.gather_rows(order);
    Tensor nb({rows});
    for (std::size_t i = 0; i < rows; ++i) nb[i] = b[order[i]];
    w = std::move(nw);
    b = std::move(nb);
    ++version_;
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    return a.dims_ == b.dims_ && a.params_ == b.params_;
  }

 private:
  void backward_impl(const MlpCache& cache, const Tensor& upstream,
                     Gradients* grads, Tensor* input_grad) const {
    if (cache.owner != this || cache.version != version_ ||
        cache.activations.size() != num_layers() + 1) {
      throw InvalidState("mlp backward: stale or mismatched forward cache");
    }
    const Tensor& out = cache.activations.back();
    if (!upstream.same_shape(out)) {
      throw InvalidArgument("mlp backward: upstream gradient shape mismatch");
    }
    if (grads != nullptr && grads->size() != params_.size()) {
      throw InvalidArgument("mlp backward: gradient buffer mismatch");
    }
    const std::size_t n = upstream.rows();
    Tensor delta = upstream;
    for (std::size_t l = num_layers(); l-- > 0;) {
      const Tensor& w = params_[2 * l];
      const Tensor& a_prev = cache.activations[l];
      if (l + 1 < num_layers()) {
        // tanh'(z) = 1 - tanh(z)^2, where tanh(z) is the cached activation.
        const Tensor& a = cache.activations[l + 1];
        for (std::size_t i = 0; i < delta.size(); ++i) {
          delta[i] *= 1.0 - a[i] * a[i];
        }
      }
      const std::size_t out_dim = w.rows();
      const std::size_t in_dim = w.cols();
      for (std::size_t r = 0; r < n && grads != nullptr; ++r) {
        Tensor& gw = (*grads)[2 * l];
        Tensor& gb = (*grads)[2 * l + 1];
        auto d = delta.row(r);
        auto ap = a_prev.row(r);
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double dv = d[o];
          if (dv == 0.0) continue;
          gb[o] += dv;
          double* gw_row = gw.data().data() + o * in_dim;
          for (std::size_t i = 0; i < in_dim; ++i) gw_row[i] += dv * ap[i];
        }
      }
      if (l == 0 && input_grad == nullptr) break;
      Tensor prev = Tensor::matrix(n, in_dim);
      for (std::size_t r = 0; r < n; ++r) {
        auto d = delta.row(r);
        auto p = prev.row(r);
        for (std::size_t o = 0; o < out_dim; ++o) {
          const double dv = d[o];
          if (dv == 0.0) continue;
          const double* w_row = w.data().data() + o * in_dim;
          for (std::size_t i = 0; i < in_dim; ++i) p[i] += dv * w_row[i];
        }
      }
      delta = std::move(prev);
    }
    if (input_grad != nullptr) *input_grad = std::move(delta);
  }


  void check_input(const Tensor& x) const {
    if (x.rank() != 2 || x.cols() != input_dim()) {
      throw InvalidArgument("mlp forward: expected feature dim " +
                            std::to_string(input_dim()) + ", got " +
                            std::to_string(x.cols()));
    }
  }

  Tensor layer_forward(std::size_t l, const Tensor& a) const {
    const Tensor& w = params_[2 * l];
    const Tensor& b = params_[2 * l + 1];
    const std::size_t out_dim = w.rows();
    const std::size_t in_dim = w.cols();
    const bool hidden = l + 1 < num_layers();
    Tensor z = Tensor::matrix(a.rows(), out_dim);
    for (std::size_t r = 0; r < a.rows(); ++r) {
      auto x = a.row(r);
      auto zr = z.row(r);
      for (std::size_t o = 0; o < out_dim; ++o) {
        const double* w_row = w.data().data() + o * in_dim;
        double s = b[o];
        for (std::size_t i = 0; i < in_dim; ++i) s += w_row[i] * x[i];
        zr[o] = hidden ? std::tanh(s) : s;
      }
    }
    return z;
  }

  std::vector<std::size_t> dims_;
  std::vector<Tensor> params_;
  std::uint64_t version_ = 0;
};

inline bool all_finite(const Gradients& g) {
  return std::all_of(g.begin(), g.end(),
                     [](const Tensor& t) { return t.all_finite(); });
}

inline void scale(Gradients& g, double s) {
  for (auto& t : g) t *= s;
}

}  // namespace tido
