#ifndef KGPATH_MASKS_H_
#define KGPATH_MASKS_H_

#include <cstdint>
#include <vector>

#include "kgpath/rng.h"
#include "kgpath/tensor.h"

namespace kgpath {

// Mechanism I: cell (k, j) is true when timestep k may see timestep j.
std::vector<std::vector<bool>> causal_mask(std::size_t horizon);

struct DropoutMask {
  bool active = false;      // gate drawn with probability p_k
  std::vector<bool> masked;  // per token, probability p_m when active
};

// Mechanism II (double data dropout).
DropoutMask dropout_mask(std::size_t tokens, double p_k, double p_m, Rng& rng);

struct HistoryMask {
  bool activated = false;  // at least one token masked
  std::vector<bool> masked;
};

// Mechanism III: each past action is masked with probability eta.
HistoryMask history_mask(std::size_t past, double eta, Rng& rng);

// Masks are a pure function of (seed, epoch, sample index).
Rng mask_rng(std::uint64_t seed, std::uint64_t epoch, std::uint64_t index);

// Sum over unmasked supervised slots of log p(target | prefix). `probs` has
// one row per slot. Zero probabilities are clamped to 1e-12.
double masked_loglik(const Tensor& probs, const std::vector<std::int32_t>& targets,
                     const std::vector<bool>& supervised);

}  // namespace kgpath

#endif  // KGPATH_MASKS_H_
