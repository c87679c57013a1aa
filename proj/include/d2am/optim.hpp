#pragma once

#include <cmath>
#include <string>

#include "d2am/error.hpp"
#include "d2am/model.hpp"

namespace d2am {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over every tensor of a parameter struct P (anything list_params accepts).
template <class P>
class Adam {
 public:
  Adam(const P& like, AdamConfig cfg) : cfg_(cfg), m_(zeros_like(like)), v_(zeros_like(like)) {
    if (!(cfg.lr >= 0.0) || !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0) ||
        !(cfg.eps > 0.0))
      throw ValidationError("AdamConfig: need lr >= 0, beta1/beta2 in [0,1), eps > 0");
  }

  void step(P& params, const P& grad) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double c2 = 1.0 - std::pow(cfg_.beta2, t_);
    auto p = list_params(params);
    auto g = list_params(grad);
    auto m = list_params(m_);
    auto v = list_params(v_);
    require(p.size() == g.size(), "Adam::step: gradient structure mismatch");
    for (std::size_t k = 0; k < p.size(); ++k) {
      auto& pv = p[k].second->value;
      const auto& gv = g[k].second->value;
      auto& mv = m[k].second->value;
      auto& vv = v[k].second->value;
      require(pv.size() == gv.size(), "Adam::step: size mismatch in " + p[k].first);
      for (std::size_t i = 0; i < pv.size(); ++i) {
        const double gi = static_cast<double>(gv[i]);
        const double mi = cfg_.beta1 * static_cast<double>(mv[i]) + (1.0 - cfg_.beta1) * gi;
        const double vi = cfg_.beta2 * static_cast<double>(vv[i]) + (1.0 - cfg_.beta2) * gi * gi;
        mv[i] = static_cast<typename std::decay_t<decltype(mv)>::value_type>(mi);
        vv[i] = static_cast<typename std::decay_t<decltype(vv)>::value_type>(vi);
        const double step = cfg_.lr * (mi / c1) / (std::sqrt(vi / c2) + cfg_.eps);
        pv[i] = static_cast<typename std::decay_t<decltype(pv)>::value_type>(static_cast<double>(pv[i]) - step);
      }
    }
  }

  int steps() const { return t_; }

 private:
  AdamConfig cfg_;
  P m_;
  P v_;
  int t_ = 0;
};

}  // namespace d2am
