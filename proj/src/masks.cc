#include "kgpath/masks.h"

#include <cmath>

#include "kgpath/errors.h"
#include "kgpath/logging.h"

namespace kgpath {

namespace {
void check_probability(double p, const char* name) {
  if (!(p >= 0.0 && p <= 1.0)) throw ConfigError(std::string(name) + " must lie in [0, 1]");
}
}  // namespace

std::vector<std::vector<bool>> causal_mask(std::size_t horizon) {
  if (horizon == 0) throw ContractError("causal_mask: horizon must be at least 1");
  std::vector<std::vector<bool>> m(horizon, std::vector<bool>(horizon, false));
  for (std::size_t k = 0; k < horizon; ++k) {
    for (std::size_t j = 0; j <= k; ++j) m[k][j] = true;
  }
  return m;
}

DropoutMask dropout_mask(std::size_t tokens, double p_k, double p_m, Rng& rng) {
  check_probability(p_k, "p_k");
  check_probability(p_m, "p_m");
  DropoutMask out;
  out.masked.assign(tokens, false);
  out.active = rng.bernoulli(p_k);
  if (!out.active) return out;
  for (std::size_t i = 0; i < tokens; ++i) out.masked[i] = rng.bernoulli(p_m);
  return out;
}

HistoryMask history_mask(std::size_t past, double eta, Rng& rng) {
  check_probability(eta, "eta");
  HistoryMask out;
  out.masked.assign(past, false);
  for (std::size_t i = 0; i < past; ++i) {
    out.masked[i] = rng.bernoulli(eta);
    out.activated = out.activated || out.masked[i];
  }
  return out;
}

Rng mask_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index) {
  return Rng(derive_seed(seed, epoch, index));
}

double masked_loglik(const Tensor& probs, const std::vector<std::int32_t>& targets,
                     const std::vector<bool>& supervised) {
  if (targets.size() != probs.rows() || supervised.size() != probs.rows()) {
    throw DimensionError("masked_loglik: " + probs.shape_string() + " against " +
                         std::to_string(targets.size()) + " targets");
  }
  double total = 0.0;
  for (std::size_t k = 0; k < targets.size(); ++k) {
    if (!supervised[k]) continue;
    double row_sum = 0.0;
    for (std::size_t j = 0; j < probs.cols(); ++j) {
      const double q = probs.at(k, j);
      if (!(q >= 0.0 && q <= 1.0)) {
        throw ContractError("masked_loglik: row " + std::to_string(k) + " is not a distribution");
      }
      row_sum += q;
    }
    if (std::abs(row_sum - 1.0) > 1e-6) {
      throw ContractError("masked_loglik: row " + std::to_string(k) + " sums to " +
                          std::to_string(row_sum));
    }
    double p = probs.at(k, static_cast<std::size_t>(targets[k]));
    if (p < 1e-12) {
      log::warn("masked_loglik: probability " + std::to_string(p) + " at slot " +
                std::to_string(k) + " clamped to 1e-12");
      p = 1e-12;
    }
    total += std::log(p);
  }
  return total;
}

}  // namespace kgpath
