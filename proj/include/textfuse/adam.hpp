// SPDX-License-Identifier: Apache-2.0
//
// Adam with bias correction over a fixed, named list of leaf tensors.
#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "textfuse/errors.hpp"
#include "textfuse/tensor.hpp"

namespace textfuse {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <class T>
class Adam {
 public:
  struct Slot {
    std::string name;
    Tensor<T> param;
    std::vector<double> m, v;
  };

  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  void add(const std::string& name, const Tensor<T>& param) {
    if (!param.is_leaf()) throw ContractError("Adam: '" + name + "' is not a leaf");
    slots_.push_back({name, param, std::vector<double>(param.numel(), 0.0), std::vector<double>(param.numel(), 0.0)});
  }

  // One update from the gradients currently stored on the parameters; a
  // parameter without a gradient buffer is treated as having zero gradient.
  void step(double lr) {
    for (const Slot& s : slots_) {
      if (!s.param.has_grad()) continue;
      for (T g : s.param.grad())
        if (!std::isfinite(static_cast<double>(g)))
          throw NumericError("non-finite gradient in parameter '" + s.name + "'");
    }
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    for (Slot& s : slots_) {
      auto p = s.param.mutable_data();
      const bool has = s.param.has_grad();
      const auto g = s.param.grad();
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double gi = has ? static_cast<double>(g[i]) : 0.0;
        s.m[i] = cfg_.beta1 * s.m[i] + (1 - cfg_.beta1) * gi;
        s.v[i] = cfg_.beta2 * s.v[i] + (1 - cfg_.beta2) * gi * gi;
        const double mhat = s.m[i] / c1, vhat = s.v[i] / c2;
        p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  void zero_grad() {
    for (Slot& s : slots_) s.param.zero_grad();
  }

  std::size_t timestep() const { return t_; }
  const std::vector<Slot>& slots() const { return slots_; }
  std::vector<Slot>& slots() { return slots_; }
  void set_timestep(std::size_t t) { t_ = t; }

 private:
  AdamConfig cfg_;
  std::vector<Slot> slots_;
  std::size_t t_ = 0;
};

}  // namespace textfuse
