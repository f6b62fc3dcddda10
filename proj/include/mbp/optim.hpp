#pragma once

#include <cmath>
#include <string>
#include <unordered_map>

#include "mbp/params.hpp"
#include "mbp/tensor.hpp"

namespace mbp {

// Adam with bias correction; eps is added outside the square root's argument,
// i.e. p -= lr * m_hat / (sqrt(v_hat) + eps).
template <typename T>
class Adam {
 public:
  explicit Adam(double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(ParameterStore<T>& store, double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& name : store.names()) {
      Tensor<T>& p = store.at(name);
      Tensor<T>& g = store.grad(name);
      Tensor<T>& m = moment(m_, name, p.shape());
      Tensor<T>& v = moment(v_, name, p.shape());
      for (int64_t i = 0; i < p.numel(); ++i) {
        const double gi = static_cast<double>(g[i]);
        const double mi = beta1_ * static_cast<double>(m[i]) + (1.0 - beta1_) * gi;
        const double vi = beta2_ * static_cast<double>(v[i]) + (1.0 - beta2_) * gi * gi;
        m[i] = static_cast<T>(mi);
        v[i] = static_cast<T>(vi);
        const double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps_);
        p[i] = static_cast<T>(static_cast<double>(p[i]) - update);
      }
    }
  }

  int64_t steps_taken() const { return t_; }
  void set_steps_taken(int64_t t) { t_ = t; }

  Tensor<T>& first_moment(const std::string& name, Shape s) { return moment(m_, name, s); }
  Tensor<T>& second_moment(const std::string& name, Shape s) { return moment(v_, name, s); }

 private:
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
  std::unordered_map<std::string, Tensor<T>> m_, v_;

  static Tensor<T>& moment(std::unordered_map<std::string, Tensor<T>>& map,
                           const std::string& name, Shape s) {
    auto it = map.find(name);
    if (it == map.end()) it = map.emplace(name, Tensor<T>(s)).first;
    return it->second;
  }
};

}  // namespace mbp
