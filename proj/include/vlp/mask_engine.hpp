#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlp/error.hpp"
#include "vlp/rng.hpp"
#include "vlp/tensor.hpp"

namespace vlp {

enum class Modality { kVision, kLanguage };

// What happens to a selected language token.
enum class MaskAction { kMask, kRandom, kKeep };

inline const char* to_string(MaskAction a) {
  switch (a) {
    case MaskAction::kMask:
      return "mask";
    case MaskAction::kRandom:
      return "random";
    case MaskAction::kKeep:
      return "keep";
  }
  return "?";
}

// Positions are indices within one modality's token list (not the joint
// sequence). Vision plans list the anchor first, then the remaining picks in
// rank order. Language plans are ascending and carry one action per position;
// `replacements[i]` is the substitute token id when actions[i] is kRandom.
struct MaskPlan {
  Modality modality = Modality::kVision;
  std::vector<std::size_t> positions;
  std::vector<MaskAction> actions;
  std::vector<std::size_t> replacements;
  std::optional<std::size_t> anchor;
  std::uint64_t seed_used = 0;

  bool empty() const { return positions.empty(); }
  std::size_t size() const { return positions.size(); }
  bool contains(std::size_t p) const { return std::find(positions.begin(), positions.end(), p) != positions.end(); }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["modality"] = modality == Modality::kVision ? "vision" : "language";
    j["positions"] = positions;
    if (!actions.empty()) {
      std::vector<std::string> names;
      for (auto a : actions) names.emplace_back(to_string(a));
      j["actions"] = names;
      j["replacements"] = replacements;
    }
    j["anchor"] = anchor ? nlohmann::json(*anchor) : nlohmann::json(nullptr);
    j["seed"] = seed_used;
    return j;
  }
  std::string to_text() const { return to_json().dump(); }
};

namespace detail {

// {anchor} ∪ top-(k−1) of `scores` (anchor excluded), ties to the lower index.
inline MaskPlan anchored_top_k(const std::vector<double>& scores, std::size_t anchor, std::size_t k,
                               std::uint64_t seed) {
  std::vector<std::size_t> order;
  order.reserve(scores.size());
  for (std::size_t j = 0; j < scores.size(); ++j)
    if (j != anchor) order.push_back(j);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  MaskPlan plan;
  plan.modality = Modality::kVision;
  plan.anchor = anchor;
  plan.seed_used = seed;
  plan.positions.push_back(anchor);
  plan.positions.insert(plan.positions.end(), order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k - 1));
  return plan;
}

}  // namespace detail

// Attention-ranked visual masking: a uniformly drawn anchor plus the k−1
// tokens the anchor attends to most in the last vision layer.
inline MaskPlan mfr_mask_plan(const Tensor& last_attention, std::size_t k, Rng& rng) {
  detail::require_matrix(last_attention, "mfr_mask_plan");
  const std::size_t m = last_attention.rows();
  detail::require<DimensionError>(last_attention.cols() == m, "mfr_mask_plan: attention must be square");
  detail::require<ConfigError>(k >= 1 && k <= m,
                               "mfr_mask_plan: k=" + std::to_string(k) + " must be in [1, " + std::to_string(m) + "]");
  const std::size_t anchor = rng.uniform_index(m);
  std::vector<double> row(m);
  for (std::size_t j = 0; j < m; ++j) row[j] = last_attention.at(anchor, j);
  return detail::anchored_top_k(row, anchor, k, rng.seed());
}

// Uniform masking of round(m·p) visual tokens.
inline MaskPlan random_mask_plan(std::size_t m, double p, Rng& rng) {
  detail::require<ConfigError>(p > 0.0 && p < 1.0, "random_mask_plan: p must be in (0, 1)");
  const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(m) * p));
  detail::require<ConfigError>(k > 0, "random_mask_plan: round(m*p) is zero");
  std::vector<std::size_t> idx(m);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) std::swap(idx[i], idx[i + rng.uniform_index(m - i)]);
  MaskPlan plan;
  plan.modality = Modality::kVision;
  plan.seed_used = rng.seed();
  plan.positions.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(plan.positions.begin(), plan.positions.end());
  return plan;
}

// Like mfr_mask_plan, but ranks by cosine similarity of feature vectors.
inline MaskPlan cosine_mask_plan(const Tensor& features, std::size_t k, Rng& rng) {
  detail::require_matrix(features, "cosine_mask_plan");
  const std::size_t m = features.rows(), c = features.cols();
  detail::require<ConfigError>(k >= 1 && k <= m, "cosine_mask_plan: k out of range");
  std::vector<double> norms(m);
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    for (std::size_t d = 0; d < c; ++d) s += features.at(i, d) * features.at(i, d);
    detail::require<NumericError>(s > 0.0, "cosine_mask_plan: zero-norm feature row " + std::to_string(i));
    norms[i] = std::sqrt(s);
  }
  const std::size_t anchor = rng.uniform_index(m);
  std::vector<double> sim(m);
  for (std::size_t j = 0; j < m; ++j) {
    double dot = 0.0;
    for (std::size_t d = 0; d < c; ++d) dot += features.at(anchor, d) * features.at(j, d);
    sim[j] = dot / (norms[anchor] * norms[j]);
  }
  return detail::anchored_top_k(sim, anchor, k, rng.seed());
}

struct MlmMaskOptions {
  double select_prob = 0.15;
  double mask_prob = 0.8;    // among selected
  double random_prob = 0.1;  // among selected; remainder kept
  // Random replacements are drawn uniformly from [first_regular_id, vocab).
  std::size_t vocab = 0;
  std::size_t first_regular_id = 1;
};

// BERT-style masking. May return an empty plan; callers skip the MLM term then.
inline MaskPlan mlm_mask_plan(std::size_t length, Rng& rng, const MlmMaskOptions& opt = {}) {
  detail::require<ContractError>(length >= 1, "mlm_mask_plan: empty sequence");
  MaskPlan plan;
  plan.modality = Modality::kLanguage;
  plan.seed_used = rng.seed();
  for (std::size_t i = 0; i < length; ++i) {
    if (!rng.bernoulli(opt.select_prob)) continue;
    const double u = rng.uniform();
    MaskAction action = u < opt.mask_prob                     ? MaskAction::kMask
                        : u < opt.mask_prob + opt.random_prob ? MaskAction::kRandom
                                                              : MaskAction::kKeep;
    std::size_t replacement = 0;
    if (action == MaskAction::kRandom && opt.vocab > opt.first_regular_id)
      replacement = opt.first_regular_id + rng.uniform_index(opt.vocab - opt.first_regular_id);
    plan.positions.push_back(i);
    plan.actions.push_back(action);
    plan.replacements.push_back(replacement);
  }
  return plan;
}

}  // namespace vlp
