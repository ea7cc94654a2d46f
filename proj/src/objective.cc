#include "kgpath/objective.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "kgpath/errors.h"
#include "kgpath/logging.h"

namespace kgpath {

void LossConfig::validate() const {
  if (!(epsilon > 0.0 && epsilon <= 1.0)) throw ConfigError("epsilon must lie in (0, 1]");
  if (!(beta >= 1.0)) throw ConfigError("beta must be at least 1");
  if (!(alpha >= 0.0)) throw ConfigError("alpha must be nonnegative");
  if (!std::isfinite(bias_b)) throw ConfigError("bias_b must be finite");
}

namespace {

Tensor softmax_of(const ad::Var& logits) {
  ad::NoGradGuard guard;
  return ad::softmax_rows(ad::constant(logits->value))->value;
}

// Per-class weights of -log p for one slot.
void smoothing_weights(std::size_t n, std::int32_t target, double epsilon, bool literal,
                       double* w) {
  if (n < 2) throw DimensionError("smoothed cross-entropy needs at least two classes");
  const double off = (1.0 - epsilon) / static_cast<double>(n - 1);
  if (literal) {
    const double spread = off / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) w[i] = spread;
    w[target] += epsilon;
  } else {
    for (std::size_t i = 0; i < n; ++i) w[i] = off;
    w[target] = epsilon;
  }
}

}  // namespace

HeadDistributions head_distributions(const HeadLogits& logits) {
  HeadDistributions out;
  out.concat = softmax_of(logits.concat);
  if (logits.fig) out.fig = softmax_of(logits.fig);
  if (logits.ocr) out.ocr = softmax_of(logits.ocr);
  return out;
}

double smoothed_ce_slot(std::span<const double> probs, std::int32_t target, double epsilon,
                        bool literal) {
  const std::size_t n = probs.size();
  if (target < 0 || static_cast<std::size_t>(target) >= n) {
    throw DimensionError("smoothed_ce: target " + std::to_string(target) + " outside " +
                         std::to_string(n) + " classes");
  }
  std::vector<double> w(n);
  smoothing_weights(n, target, epsilon, literal, w.data());
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (w[i] == 0.0) continue;
    loss -= w[i] * std::log(std::max(probs[i], 1e-300));
  }
  return loss;
}

double smoothed_ce(const Tensor& probs, const std::vector<std::int32_t>& targets,
                   const std::vector<bool>& supervised, double epsilon, bool literal) {
  if (targets.size() != probs.rows() || supervised.size() != probs.rows()) {
    throw DimensionError("smoothed_ce: " + probs.shape_string() + " against " +
                         std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = probs.cols();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t r = 0; r < targets.size(); ++r) {
    if (!supervised[r]) continue;
    total += smoothed_ce_slot(probs.data().subspan(r * n, n), targets[r], epsilon, literal);
    ++count;
  }
  if (count == 0) throw ContractError("smoothed_ce: no supervised slot");
  return total / static_cast<double>(count);
}

ad::Var smoothed_ce_loss(const ad::Var& logits, const std::vector<std::int32_t>& targets,
                         const std::vector<double>& row_weights, double epsilon, bool literal) {
  const std::size_t rows = logits->value.rows(), n = logits->value.cols();
  if (targets.size() != rows || row_weights.size() != rows) {
    throw DimensionError("smoothed_ce_loss: " + logits->value.shape_string() + " against " +
                         std::to_string(targets.size()) + " targets");
  }
  Tensor weights({rows, n});
  std::vector<double> w(n);
  for (std::size_t r = 0; r < rows; ++r) {
    if (row_weights[r] == 0.0) continue;
    smoothing_weights(n, targets[r], epsilon, literal, w.data());
    for (std::size_t i = 0; i < n; ++i) weights.at(r, i) = -row_weights[r] * w[i];
  }
  return ad::weighted_sum(ad::log_softmax_rows(logits), weights);
}

double BranchLosses::rho_ocr() const { return ocr / std::max(fig, 1e-12); }
double BranchLosses::rho_fig() const { return fig / std::max(ocr, 1e-12); }

double modulation_coeff(double rho, double alpha) {
  if (!(rho >= 0.0) || !(alpha >= 0.0)) throw ContractError("modulation_coeff: rho and alpha must be >= 0");
  if (rho <= 1.0) return 1.0;
  return 1.0 - ad::tanh_scalar(alpha * std::max(rho, 0.0));
}

Coefficients modulation_coeffs(const BranchLosses& losses, double alpha) {
  return {modulation_coeff(losses.rho_fig(), alpha), modulation_coeff(losses.rho_ocr(), alpha)};
}

BranchNorms modulate_gradients(const ParamStore& params, const std::vector<std::string>& names,
                               double coeff, bool noise, Rng& rng) {
  BranchNorms norms;
  for (const std::string& name : names) {
    Tensor& g = params.get(name)->grad_buffer();
    const std::size_t n = g.size();
    double mean = 0.0;
    for (double v : g.data()) {
      norms.raw += v * v;
      mean += v;
    }
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (double v : g.data()) var += (v - mean) * (v - mean);
    const double stddev = std::sqrt(var / static_cast<double>(n)) + 1e-8;
    for (double& v : g.data()) {
      v *= coeff;
      if (noise) v += rng.normal(0.0, stddev);
      norms.applied += v * v;
    }
  }
  norms.raw = std::sqrt(norms.raw);
  norms.applied = std::sqrt(norms.applied);
  return norms;
}

UpdateReport apply_modulated_update(const ParamStore& params,
                                    const std::vector<std::string>& fig_params,
                                    const std::vector<std::string>& ocr_params,
                                    const Coefficients& coeffs, bool noise, Rng& rng,
                                    Adam& optimizer) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const ad::Var& v = params.vars()[i];
    if (v->grad.size() == v->value.size() && !v->grad.all_finite()) {
      throw NumericError("non-finite gradient in parameter '" + params.names()[i] + "'");
    }
  }
  UpdateReport report;
  report.fig = modulate_gradients(params, fig_params, coeffs.fig, noise, rng);
  report.ocr = modulate_gradients(params, ocr_params, coeffs.ocr, noise, rng);
  optimizer.step(params);
  return report;
}

}  // namespace kgpath
