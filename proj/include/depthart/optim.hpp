#pragma once

// AdamW with decoupled weight decay, and a step-decay learning-rate schedule.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "depthart/checkpoint.hpp"
#include "depthart/tensor.hpp"

namespace depthart {

using NamedParameters = std::vector<std::pair<std::string, Tensor>>;

struct AdamWOptions {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 1e-2;
};

/// Weight decay applies to matrices and higher-rank tensors only; biases and
/// norm gains are left alone.
class AdamW {
 public:
  AdamW(NamedParameters params, AdamWOptions opts) : params_(std::move(params)), opts_(opts) {
    for (const auto& [name, p] : params_) {
      m_.emplace_back(p.numel(), 0.0f);
      v_.emplace_back(p.numel(), 0.0f);
    }
  }

  void set_lr(double lr) { opts_.lr = lr; }
  double lr() const { return opts_.lr; }
  long steps() const { return t_; }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  /// Parameters without a gradient are treated as having a zero gradient.
  void step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i].second;
      auto w = p.mutable_data();
      const auto g = p.grad();
      const bool decay = p.rank() >= 2 && opts_.weight_decay > 0.0;
      const double shrink = 1.0 - opts_.lr * opts_.weight_decay;
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g.empty() ? 0.0 : g[j];
        const double mj = opts_.beta1 * m[j] + (1.0 - opts_.beta1) * gj;
        const double vj = opts_.beta2 * v[j] + (1.0 - opts_.beta2) * gj * gj;
        m[j] = static_cast<float>(mj);
        v[j] = static_cast<float>(vj);
        double wj = decay ? w[j] * shrink : w[j];
        wj -= opts_.lr * (mj / bc1) / (std::sqrt(vj / bc2) + opts_.eps);
        w[j] = static_cast<float>(wj);
      }
    }
  }

  double grad_norm() const {
    double s = 0.0;
    for (const auto& [name, p] : params_)
      for (float g : p.grad()) s += static_cast<double>(g) * g;
    return std::sqrt(s);
  }

  void save(Checkpoint& ck, const std::string& prefix) const {
    ck.put_scalar(prefix + "t", static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ck.put(prefix + "m." + params_[i].first, Tensor(params_[i].second.shape(), m_[i]));
      ck.put(prefix + "v." + params_[i].first, Tensor(params_[i].second.shape(), v_[i]));
    }
  }

  void load(const Checkpoint& ck, const std::string& prefix) {
    t_ = static_cast<long>(ck.scalar(prefix + "t"));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor m(params_[i].second.shape(), m_[i]), v(params_[i].second.shape(), v_[i]);
      ck.load_into(prefix + "m." + params_[i].first, m);
      ck.load_into(prefix + "v." + params_[i].first, v);
      m_[i].assign(m.data().begin(), m.data().end());
      v_[i].assign(v.data().begin(), v.data().end());
    }
  }

 private:
  NamedParameters params_;
  AdamWOptions opts_;
  std::vector<std::vector<float>> m_, v_;
  long t_ = 0;
};

/// lr * gamma^floor(step / period), step counted from 0.
inline double step_lr(double base, std::size_t step, std::size_t period, double gamma) {
  return base * std::pow(gamma, static_cast<double>(step / period));
}

}  // namespace depthart
