#pragma once

#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vlp/error.hpp"
#include "vlp/records.hpp"
#include "vlp/tensor.hpp"

namespace vlp {

// A^{i,j}: how layer j's output tokens (rows) draw on layer i's input tokens
// (columns). Layers are 1-based.
struct FlowMatrix {
  std::size_t source_layer = 1;
  std::size_t target_layer = 1;
  Tensor matrix;
};

// A = ½(I + W): the residual connection carries half the mass.
inline Tensor residual_attention(const Tensor& w) {
  detail::require<DimensionError>(w.defined() && w.rank() == 2 && w.rows() == w.cols(),
                                  "residual_attention: attention must be square");
  Tensor a = w.detach();
  for (auto& v : a.data()) v *= 0.5;
  for (std::size_t i = 0; i < a.rows(); ++i) a.at(i, i) += 0.5;
  return a;
}

inline Tensor residual_attention(const AttentionRecord& r) { return residual_attention(r.matrix); }

namespace detail {

inline Tensor square_product(const Tensor& left, const Tensor& right) {
  const std::size_t n = left.rows();
  Tensor out = Tensor::zeros({n, n});
  gemm_nn(left.data().data(), right.data().data(), out.data().data(), n, n, n);
  return out;
}

}  // namespace detail

// A^{i,j} = A^j · A^{j−1} · … · A^i over residual-corrected layers.
inline FlowMatrix attention_flow(const std::vector<Tensor>& layers, std::size_t i, std::size_t j) {
  detail::require<ContractError>(i >= 1 && i <= j, "attention_flow: need 1 <= i <= j, got i=" + std::to_string(i) +
                                                       " j=" + std::to_string(j));
  detail::require<ContractError>(j <= layers.size(), "attention_flow: j beyond layer count");
  const std::size_t n = layers.front().rows();
  for (const auto& a : layers)
    detail::require<DimensionError>(a.rank() == 2 && a.rows() == n && a.cols() == n,
                                    "attention_flow: all layers must be n×n");
  Tensor acc = layers[i - 1].detach();
  for (std::size_t l = i + 1; l <= j; ++l) acc = detail::square_product(layers[l - 1], acc);
  return {i, j, acc};
}

struct ImfSums {
  double inter = 0.0;
  double intra = 0.0;
};

namespace detail {

inline void check_partition(const ModalityPartition& p, std::size_t n) {
  require<ContractError>(!p.vision.empty() && !p.language.empty(), "imf: both modality index sets must be non-empty");
  std::vector<char> seen(n, 0);
  for (const auto* set : {&p.vision, &p.language})
    for (auto x : *set) {
      require<ContractError>(x < n, "imf: partition index " + std::to_string(x) + " outside sequence of " +
                                        std::to_string(n));
      require<ContractError>(!seen[x], "imf: partition sets overlap or repeat index " + std::to_string(x));
      seen[x] = 1;
    }
}

}  // namespace detail

inline ImfSums imf_sums(const Tensor& flow, const ModalityPartition& p) {
  detail::require<DimensionError>(flow.rank() == 2 && flow.rows() == flow.cols(), "imf: flow must be square");
  detail::check_partition(p, flow.rows());
  ImfSums s;
  auto block = [&flow](const std::vector<std::size_t>& rows, const std::vector<std::size_t>& cols) {
    double acc = 0.0;
    for (auto x : rows)
      for (auto y : cols) acc += flow.at(x, y);
    return acc;
  };
  s.inter = block(p.vision, p.language) + block(p.language, p.vision);
  s.intra = block(p.vision, p.vision) + block(p.language, p.language);
  return s;
}

// Inter-modality flow: cross-modal share of the flow mass restricted to V ∪ L.
inline double imf(const Tensor& flow, const ModalityPartition& p) {
  const auto s = imf_sums(flow, p);
  detail::require<ContractError>(s.inter + s.intra > 0.0, "imf: zero total flow mass over the partition");
  return s.inter / (s.inter + s.intra);
}

inline double imf(const FlowMatrix& flow, const ModalityPartition& p) { return imf(flow.matrix, p); }

// Partition that counts [CLS]/[SEP] as language tokens (sensitivity runs).
inline ModalityPartition partition_with_specials(const SequenceLayout& layout) {
  ModalityPartition p = layout.partition;
  p.language.push_back(layout.cls);
  p.language.push_back(layout.sep);
  return p;
}

struct ImfEntry {
  std::size_t i = 0;
  std::size_t j = 0;
  double value = 0.0;
};

struct ImfReport {
  std::size_t layers = 0;
  std::vector<ImfEntry> entries;        // all 1 <= i <= j <= layers, i-major
  std::vector<double> from_first;       // F^{1,j}, j = 1..layers
  std::vector<double> per_layer;        // F^{i,i}, i = 1..layers
  std::size_t samples = 1;

  double at(std::size_t i, std::size_t j) const {
    detail::require<ConfigError>(i >= 1 && i <= j && j <= layers,
                                 "imf report: layer pair (" + std::to_string(i) + "," + std::to_string(j) +
                                     ") out of range");
    for (const auto& e : entries)
      if (e.i == i && e.j == j) return e.value;
    throw ContractError("imf report: missing entry");
  }
};

// Every F^{i,j} for one example. Residual attention is formed once per layer
// and products are extended one layer at a time.
inline ImfReport imf_profiles(const std::vector<AttentionRecord>& records, const ModalityPartition& p) {
  detail::require<ContractError>(!records.empty(), "imf_profiles: no attention records");
  std::vector<Tensor> layers;
  layers.reserve(records.size());
  for (const auto& r : records) layers.push_back(residual_attention(r));
  const std::size_t n = layers.front().rows();
  for (const auto& a : layers) detail::require<DimensionError>(a.rows() == n, "imf_profiles: layer sizes differ");

  ImfReport rep;
  rep.layers = layers.size();
  for (std::size_t i = 1; i <= rep.layers; ++i) {
    Tensor acc = layers[i - 1];
    for (std::size_t j = i; j <= rep.layers; ++j) {
      if (j > i) acc = detail::square_product(layers[j - 1], acc);
      const double f = imf(acc, p);
      rep.entries.push_back({i, j, f});
      if (i == 1) rep.from_first.push_back(f);
      if (i == j) rep.per_layer.push_back(f);
    }
  }
  return rep;
}

// Arithmetic mean over examples.
inline ImfReport average_reports(const std::vector<ImfReport>& reports) {
  detail::require<ContractError>(!reports.empty(), "average_reports: empty batch");
  ImfReport avg = reports.front();
  for (std::size_t r = 1; r < reports.size(); ++r) {
    detail::require<DimensionError>(reports[r].layers == avg.layers, "average_reports: layer counts differ");
    for (std::size_t e = 0; e < avg.entries.size(); ++e) avg.entries[e].value += reports[r].entries[e].value;
    for (std::size_t l = 0; l < avg.layers; ++l) {
      avg.from_first[l] += reports[r].from_first[l];
      avg.per_layer[l] += reports[r].per_layer[l];
    }
  }
  const double k = static_cast<double>(reports.size());
  for (auto& e : avg.entries) e.value /= k;
  for (auto& v : avg.from_first) v /= k;
  for (auto& v : avg.per_layer) v /= k;
  avg.samples = reports.size();
  return avg;
}

inline void write_imf_csv(std::ostream& os, const ImfReport& rep) {
  os << "i,j,F\n";
  os.precision(17);
  for (const auto& e : rep.entries) os << e.i << ',' << e.j << ',' << e.value << '\n';
}

inline nlohmann::json imf_to_json(const ImfReport& rep) {
  nlohmann::json j;
  j["layers"] = rep.layers;
  j["samples"] = rep.samples;
  j["from_first"] = rep.from_first;
  j["per_layer"] = rep.per_layer;
  nlohmann::json all = nlohmann::json::array();
  for (const auto& e : rep.entries) all.push_back({{"i", e.i}, {"j", e.j}, {"F", e.value}});
  j["entries"] = all;
  return j;
}

}  // namespace vlp
