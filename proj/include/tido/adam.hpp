#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <utility>
#include <vector>

#include "tido/error.hpp"
#include "tido/nn.hpp"
#include "tido/tensor.hpp"

namespace tido {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for one parameter group. Moments are sized lazily on the
/// first step and must shape-match the group from then on.
struct AdamState {
  AdamConfig config;
  std::uint64_t step_count = 0;
  std::vector<Tensor> first_moment;
  std::vector<Tensor> second_moment;

  static AdamState with_rate(double learning_rate) {
    AdamState s;
    s.config.learning_rate = learning_rate;
    return s;
  }
};

/// One bias-corrected Adam descent step over `params` using `grads`.
inline void adam_step(std::span<Tensor* const> params,
                      std::span<const Tensor* const> grads, AdamState& state) {
  if (params.size() != grads.size()) {
    throw InvalidArgument("adam_step: parameter/gradient count mismatch");
  }
  const AdamConfig& cfg = state.config;
  if (!(cfg.learning_rate > 0.0) || !(cfg.beta1 > 0.0) || !(cfg.beta2 > 0.0) ||
      !(cfg.epsilon > 0.0)) {
    throw InvalidArgument("adam_step: hyperparameters must be positive");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    params[i]->require_same_shape(*grads[i], "adam_step");
  }
  if (state.first_moment.empty()) {
    for (const Tensor* p : params) {
      state.first_moment.emplace_back(p->shape());
      state.second_moment.emplace_back(p->shape());
    }
  } else if (state.first_moment.size() != params.size()) {
    throw InvalidArgument("adam_step: state does not match parameter group");
  } else {
    for (std::size_t i = 0; i < params.size(); ++i) {
      params[i]->require_same_shape(state.first_moment[i], "adam_step state");
    }
  }

  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i]->data();
    auto g = grads[i]->data();
    auto m = state.first_moment[i].data();
    auto v = state.second_moment[i].data();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * g[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * g[k] * g[k];
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      p[k] -= cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon);
    }
  }
}

/// Member of an optimizer group: a network and the gradient to apply to it.
struct GroupMember {
  Mlp* net;
  const Gradients* grads;
};

/// Adam step over several networks sharing one state. `sign` = -1 ascends
/// the loss (gradient reversal).
inline void adam_step(std::span<const GroupMember> members, AdamState& state,
                      double sign = 1.0) {
  std::vector<Tensor*> params;
  std::vector<Tensor> flipped;
  std::vector<const Tensor*> grads;
  std::size_t total = 0;
  for (const auto& m : members) total += m.grads->size();
  flipped.reserve(sign == 1.0 ? 0 : total);
  for (const auto& m : members) {
    auto& ps = m.net->mutable_params();
    if (ps.size() != m.grads->size()) {
      throw InvalidArgument("adam_step: gradient/network mismatch");
    }
    for (std::size_t i = 0; i < ps.size(); ++i) {
      params.push_back(&ps[i]);
      if (sign == 1.0) {
        grads.push_back(&(*m.grads)[i]);
      } else {
        flipped.push_back((*m.grads)[i]);
        flipped.back() *= sign;
        grads.push_back(&flipped.back());
      }
    }
  }
  adam_step(std::span<Tensor* const>(params),
            std::span<const Tensor* const>(grads), state);
}

inline void adam_step(std::initializer_list<GroupMember> members,
                      AdamState& state, double sign = 1.0) {
  std::vector<GroupMember> v(members);
  adam_step(std::span<const GroupMember>(v), state, sign);
}

}  // namespace tido
