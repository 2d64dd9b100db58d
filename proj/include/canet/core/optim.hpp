#pragma once

#include <cmath>
#include <cstdint>
#include <set>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "canet/core/autograd.hpp"
#include "canet/core/rng.hpp"

namespace canet {

/// Named parameters of one network plus its non-trainable buffers
/// (batch-norm running statistics). Registration order is the canonical order
/// for serialization and optimizer state.
template <typename T>
class ParamStore {
 public:
  struct Entry {
    std::string name;
    Var<T> var;
  };

  Var<T> add_param(const std::string& name, Tensor<T> init) {
    check_unique(name);
    auto v = parameter(std::move(init));
    params_.push_back({name, v});
    return v;
  }

  Var<T> add_buffer(const std::string& name, Tensor<T> init) {
    check_unique(name);
    auto v = constant(std::move(init));
    buffers_.push_back({name, v});
    return v;
  }

  const std::vector<Entry>& params() const noexcept { return params_; }
  const std::vector<Entry>& buffers() const noexcept { return buffers_; }

  std::vector<Var<T>> param_vars() const {
    std::vector<Var<T>> out;
    for (const auto& e : params_) out.push_back(e.var);
    return out;
  }

  std::size_t num_scalars() const {
    std::size_t n = 0;
    for (const auto& e : params_) n += e.var->value.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : params_) e.var->zero_grad();
  }

 private:
  void check_unique(const std::string& name) {
    if (!names_.insert(name).second) throw std::logic_error("duplicate parameter name: " + name);
  }

  std::vector<Entry> params_;
  std::vector<Entry> buffers_;
  std::set<std::string> names_;
};

/// He-normal initial weights: N(0, 2 / fan_in).
template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double std = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(std * rng.normal());
  return t;
}

class NonFiniteGradient : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam moments for every parameter of one ParamStore.
template <typename T>
class Adam {
 public:
  Adam() = default;
  Adam(const ParamStore<T>& store, AdamHyper hyper) : hyper_(hyper) {
    for (const auto& e : store.params()) {
      m_.emplace_back(e.var->value.shape());
      v_.emplace_back(e.var->value.shape());
    }
  }

  const AdamHyper& hyper() const noexcept { return hyper_; }
  void set_lr(double lr) { hyper_.lr = lr; }
  std::uint64_t step_count() const noexcept { return step_; }
  void set_step_count(std::uint64_t s) { step_ = s; }
  std::vector<Tensor<T>>& first_moments() noexcept { return m_; }
  std::vector<Tensor<T>>& second_moments() noexcept { return v_; }
  const std::vector<Tensor<T>>& first_moments() const noexcept { return m_; }
  const std::vector<Tensor<T>>& second_moments() const noexcept { return v_; }

  /// Applies one update from the accumulated gradients. A non-finite
  /// gradient anywhere aborts before any parameter changes.
  void step(ParamStore<T>& store) {
    const auto& params = store.params();
    if (params.size() != m_.size()) throw std::logic_error("Adam: parameter table changed size");
    for (const auto& e : params) {
      for (T g : e.var->grad.data()) {
        if (!std::isfinite(g)) throw NonFiniteGradient("non-finite gradient in parameter " + e.name);
      }
    }
    ++step_;
    const double bc1 = 1.0 - std::pow(hyper_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(hyper_.beta2, static_cast<double>(step_));
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto& p = *params[k].var;
      if (p.grad.empty()) continue;
      auto& m = m_[k];
      auto& v = v_[k];
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        const double mi = hyper_.beta1 * m[i] + (1.0 - hyper_.beta1) * g;
        const double vi = hyper_.beta2 * v[i] + (1.0 - hyper_.beta2) * g * g;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = hyper_.lr * (mi / bc1) / (std::sqrt(vi / bc2) + hyper_.eps);
        p.value[i] = static_cast<T>(p.value[i] - update);
      }
    }
  }

 private:
  AdamHyper hyper_;
  std::uint64_t step_ = 0;
  std::vector<Tensor<T>> m_, v_;
};

}  // namespace canet
