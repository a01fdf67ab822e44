#pragma once

#include <cmath>
#include <map>
#include <string>

#include "mlground/autodiff.hpp"

namespace mlground {

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam with bias correction. Moment buffers are keyed by parameter name and
// persist across steps.
template <typename Scalar>
class Adam {
 public:
  explicit Adam(AdamOptions opts = {}) : opts_(opts) {}

  void step(ParamSet<Scalar>& params, double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (const auto& name : params.names()) {
      auto& p = params.at(name);
      if (p.grad.shape() != p.value.shape()) {
        throw ValueError(detail::concat("parameter '", name, "' has no gradient"));
      }
      auto [it, fresh] = moments_.try_emplace(name);
      auto& mo = it->second;
      if (fresh) {
        mo.m = Tensor<Scalar>(p.value.shape());
        mo.v = Tensor<Scalar>(p.value.shape());
      }
      for (std::size_t i = 0; i < p.value.size(); ++i) {
        const double g = p.grad[i];
        const double m = opts_.beta1 * mo.m[i] + (1.0 - opts_.beta1) * g;
        const double v = opts_.beta2 * mo.v[i] + (1.0 - opts_.beta2) * g * g;
        mo.m[i] = static_cast<Scalar>(m);
        mo.v[i] = static_cast<Scalar>(v);
        const double update = lr * (m / c1) / (std::sqrt(v / c2) + opts_.eps);
        p.value[i] = static_cast<Scalar>(p.value[i] - update);
      }
    }
  }

  long steps() const { return t_; }

 private:
  struct Moments {
    Tensor<Scalar> m, v;
  };

  AdamOptions opts_;
  long t_ = 0;
  std::map<std::string, Moments> moments_;
};

}  // namespace mlground
