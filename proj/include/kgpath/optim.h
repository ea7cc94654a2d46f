#ifndef KGPATH_OPTIM_H_
#define KGPATH_OPTIM_H_

#include <map>
#include <string>
#include <vector>

#include "kgpath/autograd.h"
#include "kgpath/rng.h"

namespace kgpath {

// Named, ordered collection of trainable leaves. Insertion order is the
// serialization order.
class ParamStore {
 public:
  ad::Var add(const std::string& name, Tensor init);
  // Seeded uniform(-scale, scale) initialization.
  ad::Var add_uniform(const std::string& name, std::size_t rows, std::size_t cols, double scale,
                      Rng& rng);
  ad::Var add_constant(const std::string& name, std::size_t rows, std::size_t cols, double value);

  const ad::Var& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  const std::vector<std::string>& names() const { return names_; }
  const std::vector<ad::Var>& vars() const { return vars_; }
  std::size_t size() const { return vars_.size(); }
  std::size_t scalar_count() const;

  void zero_grad();
  bool all_finite() const;

 private:
  std::vector<std::string> names_;
  std::vector<ad::Var> vars_;
  std::map<std::string, std::size_t> index_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  // One update of every parameter from its accumulated gradient.
  void step(const ParamStore& params);
  long steps() const { return t_; }
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  long t_ = 0;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
};

}  // namespace kgpath

#endif  // KGPATH_OPTIM_H_
