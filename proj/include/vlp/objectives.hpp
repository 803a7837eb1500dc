#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <vector>

#include "vlp/error.hpp"
#include "vlp/mask_engine.hpp"
#include "vlp/tensor.hpp"

namespace vlp {

struct LossWeights {
  double lambda1 = 1.0;     // ITM (already carrying the weighted VLA term)
  double lambda2 = 0.01;    // MFR
  double vla_weight = 0.1;  // VLA folded into ITM

  void validate() const {
    detail::require<ConfigError>(lambda1 >= 0.0 && lambda2 >= 0.0 && vla_weight >= 0.0,
                                 "loss weights must be non-negative");
  }
};

struct IpotConfig {
  double beta = 0.5;
  std::size_t outer_iterations = 50;
  std::size_t inner_iterations = 1;

  void validate() const {
    detail::require<ConfigError>(beta > 0.0, "ipot: beta must be positive");
    detail::require<ConfigError>(outer_iterations >= 1 && inner_iterations >= 1, "ipot: iterations must be >= 1");
  }
};

// Mean NLL of the original tokens over the plan's positions. `logits` has one
// row per language token; `targets` are the unmasked ids.
inline Tensor mlm_loss(Tape& tape, const Tensor& logits, const std::vector<std::size_t>& targets,
                       const MaskPlan& plan) {
  detail::require<ContractError>(!plan.empty(), "mlm_loss: empty mask plan");
  detail::require_matrix(logits, "mlm_loss");
  detail::require<DimensionError>(targets.size() == logits.rows(), "mlm_loss: one target per language row");
  std::vector<std::size_t> rows, picked;
  for (auto pos : plan.positions) {
    detail::require<ContractError>(pos < targets.size(), "mlm_loss: plan position out of range");
    rows.push_back(pos);
    picked.push_back(targets[pos]);
  }
  return cross_entropy_rows(tape, gather_rows(tape, logits, rows), picked);
}

// Binary NLL; class 1 is "matched", class 0 "mismatched".
inline Tensor itm_loss(Tape& tape, const Tensor& logits, bool matched) {
  detail::require<DimensionError>(logits.numel() == 2, "itm_loss: expected two logits");
  Tensor row = logits.rank() == 2 ? logits : concat_rows(tape, {logits});
  return cross_entropy_rows(tape, row, {matched ? std::size_t{1} : std::size_t{0}});
}

// Single linear head on the [CLS] state.
inline Tensor itm_loss(Tape& tape, const Tensor& cls_hidden, bool matched, const Tensor& head_w,
                       const Tensor& head_b) {
  Tensor h = cls_hidden.rank() == 2 ? cls_hidden : concat_rows(tape, {cls_hidden});
  return itm_loss(tape, linear(tape, h, head_w, head_b), matched);
}

struct TransportResult {
  double distance = 0.0;
  Tensor plan;  // a × b
};

// Inexact proximal-point OT: each outer step runs Sinkhorn scaling against the
// kernel exp(−C/β) reweighted by the current plan.
inline TransportResult ipot_distance(const Tensor& cost, const std::vector<double>& mu, const std::vector<double>& nu,
                                     const IpotConfig& cfg = {}) {
  cfg.validate();
  detail::require_matrix(cost, "ipot_distance");
  const std::size_t a = cost.rows(), b = cost.cols();
  detail::require<DimensionError>(mu.size() == a && nu.size() == b, "ipot_distance: marginal sizes do not match cost");
  auto check_marginal = [](const std::vector<double>& v, const char* name) {
    double s = 0.0;
    for (double x : v) {
      detail::require<ContractError>(x >= 0.0, std::string("ipot_distance: negative entry in ") + name);
      s += x;
    }
    detail::require<ContractError>(std::abs(s - 1.0) <= 1e-9, std::string("ipot_distance: ") + name +
                                                                 " does not sum to 1");
  };
  check_marginal(mu, "mu");
  check_marginal(nu, "nu");
  for (double c : cost.data()) detail::require<ContractError>(c >= 0.0 && std::isfinite(c), "ipot_distance: bad cost");

  std::vector<double> kernel(a * b), plan(a * b, 1.0), q(a * b);
  for (std::size_t k = 0; k < a * b; ++k) kernel[k] = std::exp(-cost[k] / cfg.beta);
  std::vector<double> left(a, 1.0), right(b, 1.0 / static_cast<double>(b));

  for (std::size_t t = 0; t < cfg.outer_iterations; ++t) {
    for (std::size_t k = 0; k < a * b; ++k) q[k] = kernel[k] * plan[k];
    for (std::size_t l = 0; l < cfg.inner_iterations; ++l) {
      for (std::size_t i = 0; i < a; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < b; ++j) s += q[i * b + j] * right[j];
        left[i] = s > 0.0 ? mu[i] / s : 0.0;
      }
      for (std::size_t j = 0; j < b; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < a; ++i) s += q[i * b + j] * left[i];
        right[j] = s > 0.0 ? nu[j] / s : 0.0;
      }
    }
    for (std::size_t i = 0; i < a; ++i)
      for (std::size_t j = 0; j < b; ++j) plan[i * b + j] = left[i] * q[i * b + j] * right[j];
  }

  TransportResult res;
  res.plan = Tensor({a, b}, plan);
  for (std::size_t k = 0; k < a * b; ++k) res.distance += plan[k] * cost[k];
  detail::require<NumericError>(std::isfinite(res.distance), "ipot_distance: non-finite result");
  return res;
}

inline std::vector<double> uniform_marginal(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

struct AlignmentLoss {
  Tensor loss;  // ⟨plan, cost⟩
  Tensor plan;
  Tensor cost;
};

// ⟨plan, C(visual, language)⟩ with the plan held constant.
inline Tensor vla_loss_with_plan(Tape& tape, const Tensor& visual, const Tensor& language, const Tensor& plan) {
  return weighted_sum(tape, cosine_distance_matrix(tape, visual, language), plan);
}

// Token alignment: OT distance under cosine cost with uniform marginals.
// Gradients flow through the cost only (envelope approximation).
inline AlignmentLoss vla_loss(Tape& tape, const Tensor& visual, const Tensor& language, const IpotConfig& cfg = {}) {
  AlignmentLoss out;
  out.cost = cosine_distance_matrix(tape, visual, language);
  Tensor cost_values = out.cost.detach();
  // Rounding can leave 1 − cos a hair below zero for parallel vectors.
  for (auto& c : cost_values.data()) c = std::max(c, 0.0);
  auto ot = ipot_distance(cost_values, uniform_marginal(visual.rows()), uniform_marginal(language.rows()), cfg);
  out.plan = ot.plan;
  out.loss = weighted_sum(tape, out.cost, out.plan);
  return out;
}

// Σ_k ||target_k − regressed_k||² over masked tokens. Targets carry no gradient.
inline Tensor mfr_loss(Tape& tape, const Tensor& targets, const Tensor& regressed) {
  detail::require_same_shape(targets, regressed, "mfr_loss");
  return sum_squares(tape, sub(tape, regressed, targets.detach()));
}

struct LossParts {
  std::optional<Tensor> mlm;
  std::optional<Tensor> itm;  // includes vla_weight · VLA
  std::optional<Tensor> mfr;
};

// L_MLM + λ1·L_ITM + λ2·L_MFR; absent parts contribute nothing.
inline Tensor total_loss(Tape& tape, const LossParts& parts, const LossWeights& w = {}) {
  w.validate();
  std::vector<Tensor> terms;
  std::vector<double> coeffs;
  if (parts.mlm) terms.push_back(*parts.mlm), coeffs.push_back(1.0);
  if (parts.itm) terms.push_back(*parts.itm), coeffs.push_back(w.lambda1);
  if (parts.mfr) terms.push_back(*parts.mfr), coeffs.push_back(w.lambda2);
  if (terms.empty()) return Tensor::scalar(0.0);
  return combine_scalars(tape, terms, coeffs);
}

}  // namespace vlp
