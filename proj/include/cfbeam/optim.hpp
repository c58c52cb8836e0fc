#ifndef CFBEAM_OPTIM_HPP
#define CFBEAM_OPTIM_HPP

#include <cmath>
#include <vector>

#include "cfbeam/autodiff.hpp"

namespace cfbeam {

/// Adaptive-moment gradient descent over a fixed set of parameter groups.
/// Non-trainable groups are skipped; state is index-aligned with the group
/// list given at construction.
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::vector<ParamGroup*> groups, double learning_rate = 1e-3,
                         double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : groups_(std::move(groups)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    m_.reserve(groups_.size());
    v_.reserve(groups_.size());
    for (ParamGroup* g : groups_) {
      m_.emplace_back(Tensor::zeros_like(g->values));
      v_.emplace_back(Tensor::zeros_like(g->values));
    }
  }

  double learning_rate() const { return lr_; }

  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t gi = 0; gi < groups_.size(); ++gi) {
      ParamGroup* g = groups_[gi];
      if (!g->trainable) continue;
      Tensor& m = m_[gi];
      Tensor& v = v_[gi];
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double grad = g->grad[i];
        m[i] = beta1_ * m[i] + (1.0 - beta1_) * grad;
        v[i] = beta2_ * v[i] + (1.0 - beta2_) * grad * grad;
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        g->values[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
      }
    }
  }

  void zero_grad() {
    for (ParamGroup* g : groups_) g->zero_grad();
  }

 private:
  std::vector<ParamGroup*> groups_;
  std::vector<Tensor> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long t_ = 0;
};

}  // namespace cfbeam

#endif  // CFBEAM_OPTIM_HPP
