#include "kgpath/optim.h"

#include <cmath>

#include "kgpath/errors.h"

namespace kgpath {

ad::Var ParamStore::add(const std::string& name, Tensor init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  index_[name] = vars_.size();
  names_.push_back(name);
  vars_.push_back(ad::leaf(std::move(init), true));
  return vars_.back();
}

ad::Var ParamStore::add_uniform(const std::string& name, std::size_t rows, std::size_t cols,
                                double scale, Rng& rng) {
  Tensor t({rows, cols});
  for (double& v : t.data()) v = rng.uniform(-scale, scale);
  return add(name, std::move(t));
}

ad::Var ParamStore::add_constant(const std::string& name, std::size_t rows, std::size_t cols,
                                 double value) {
  return add(name, Tensor({rows, cols}, value));
}

const ad::Var& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw LookupError("unknown parameter: " + name);
  return vars_[it->second];
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : vars_) n += v->value.size();
  return n;
}

void ParamStore::zero_grad() {
  for (const auto& v : vars_) {
    if (v->grad.size() == v->value.size()) v->grad.fill(0.0);
  }
}

bool ParamStore::all_finite() const {
  for (const auto& v : vars_) {
    if (!v->value.all_finite()) return false;
  }
  return true;
}

void Adam::step(const ParamStore& params) {
  const auto& vars = params.vars();
  if (m_.size() != vars.size()) {
    m_.clear();
    v_.clear();
    for (const auto& p : vars) {
      m_.emplace_back(p->value.shape());
      v_.emplace_back(p->value.shape());
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < vars.size(); ++k) {
    const Tensor g = ad::gradient(vars[k]);
    Tensor& w = vars[k]->value;
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * g[i];
      v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= config_.lr * mhat / (std::sqrt(vhat) + config_.eps);
    }
  }
}

}  // namespace kgpath
