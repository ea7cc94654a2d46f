#ifndef KGPATH_OBJECTIVE_H_
#define KGPATH_OBJECTIVE_H_

#include <cstdint>
#include <string>
#include <vector>

#include "kgpath/autograd.h"
#include "kgpath/encoder.h"
#include "kgpath/optim.h"
#include "kgpath/rng.h"

namespace kgpath {

struct LossConfig {
  double epsilon = 0.7;  // label smoothing, in (0, 1]
  double beta = 1.2;     // concat weight when history masking fired, >= 1
  double alpha = 0.6;    // modulation degree, >= 0
  bool noise = true;
  double bias_b = 0.0;
  // Counts the target inside the smoothing sum, as the loss is written.
  bool literal_smoothing_sum = false;

  void validate() const;
};

struct HeadDistributions {
  Tensor concat;
  Tensor fig;  // empty when the model has no modal heads
  Tensor ocr;
};

HeadDistributions head_distributions(const HeadLogits& logits);

// Smoothed cross-entropy of one slot, from a probability row of N classes.
double smoothed_ce_slot(std::span<const double> probs, std::int32_t target, double epsilon,
                        bool literal = false);

// Mean over supervised slots (rows of `probs`). Throws ContractError when
// nothing is supervised.
double smoothed_ce(const Tensor& probs, const std::vector<std::int32_t>& targets,
                   const std::vector<bool>& supervised, double epsilon, bool literal = false);

// Differentiable form: sum over rows of row_weight * smoothed CE of the
// row's logits. Rows with weight 0 contribute nothing.
ad::Var smoothed_ce_loss(const ad::Var& logits, const std::vector<std::int32_t>& targets,
                         const std::vector<double>& row_weights, double epsilon,
                         bool literal = false);

struct BranchLosses {
  double fig = 0.0;
  double ocr = 0.0;
  double concat = 0.0;

  double rho_ocr() const;  // L_ocr / L_fig
  double rho_fig() const;  // L_fig / L_ocr
};

// 1 - tanh(alpha * relu(rho)) when rho > 1, else 1.
double modulation_coeff(double rho, double alpha);

struct Coefficients {
  double fig = 1.0;
  double ocr = 1.0;
};

Coefficients modulation_coeffs(const BranchLosses& losses, double alpha);

struct BranchNorms {
  double raw = 0.0;
  double applied = 0.0;
};

// Scales the accumulated gradients of `names` by `coeff`, then adds
// N(0, std(grad) + 1e-8) per array when `noise` is set.
BranchNorms modulate_gradients(const ParamStore& params, const std::vector<std::string>& names,
                               double coeff, bool noise, Rng& rng);

struct UpdateReport {
  BranchNorms fig;
  BranchNorms ocr;
};

// Modulates the fig and OCR branches, checks every gradient is finite
// (NumericError otherwise) and takes one Adam step.
UpdateReport apply_modulated_update(const ParamStore& params,
                                    const std::vector<std::string>& fig_params,
                                    const std::vector<std::string>& ocr_params,
                                    const Coefficients& coeffs, bool noise, Rng& rng,
                                    Adam& optimizer);

}  // namespace kgpath

#endif  // KGPATH_OBJECTIVE_H_
