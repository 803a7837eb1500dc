#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <ostream>
#include <vector>

#include "vlp/error.hpp"
#include "vlp/records.hpp"
#include "vlp/rng.hpp"
#include "vlp/tensor.hpp"

namespace vlp {

struct ClusterAssignment {
  std::vector<int> labels;  // 0 or 1 per row
  Tensor centroids;         // 2 × c
  std::size_t iterations_used = 0;
  double objective = 0.0;   // within-cluster sum of squares
  bool degenerate = false;  // all points identical
  std::vector<double> objective_trace;  // after each assignment step of the kept run
};

struct KMeansOptions {
  std::size_t max_iter = 100;
  std::size_t restarts = 5;
};

namespace detail {

inline double sq_dist(const Tensor& x, std::size_t i, const std::vector<double>& c) {
  double s = 0.0;
  for (std::size_t d = 0; d < c.size(); ++d) {
    const double diff = x.at(i, d) - c[d];
    s += diff * diff;
  }
  return s;
}

inline ClusterAssignment lloyd_once(const Tensor& x, Rng& rng, std::size_t max_iter) {
  const std::size_t n = x.rows(), c = x.cols();
  auto row = [&](std::size_t i) {
    return std::vector<double>(x.data().begin() + static_cast<std::ptrdiff_t>(i * c),
                               x.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * c));
  };

  // k-means++ seeding
  std::vector<std::vector<double>> centers{row(rng.uniform_index(n))};
  std::vector<double> d2(n);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += (d2[i] = sq_dist(x, i, centers[0]));
  ClusterAssignment out;
  if (total == 0.0) {
    out.labels.assign(n, 0);
    std::vector<double> flat(centers[0]);
    flat.insert(flat.end(), centers[0].begin(), centers[0].end());
    out.centroids = Tensor({2, c}, std::move(flat));
    out.degenerate = true;
    out.objective_trace.push_back(0.0);
    return out;
  }
  {
    double target = rng.uniform() * total;
    std::size_t pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      target -= d2[i];
      if (target < 0.0 && d2[i] > 0.0) {
        pick = i;
        break;
      }
    }
    if (d2[pick] == 0.0)  // rounding fell through onto a duplicate of the first center
      pick = static_cast<std::size_t>(std::max_element(d2.begin(), d2.end()) - d2.begin());
    centers.push_back(row(pick));
  }

  std::vector<int> labels(n, -1);
  std::size_t it = 0;
  while (it < max_iter) {
    ++it;
    bool changed = false;
    double obj = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d0 = sq_dist(x, i, centers[0]), d1 = sq_dist(x, i, centers[1]);
      const int lab = d1 < d0 ? 1 : 0;
      obj += std::min(d0, d1);
      if (lab != labels[i]) changed = true;
      labels[i] = lab;
    }
    out.objective_trace.push_back(obj);
    if (!changed) break;

    for (int k = 0; k < 2; ++k) {
      std::vector<double> mean(c, 0.0);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i)
        if (labels[i] == k) {
          ++count;
          for (std::size_t d = 0; d < c; ++d) mean[d] += x.at(i, d);
        }
      if (count == 0) {
        // re-seed an empty cluster at the point farthest from the other center
        std::size_t far = 0;
        double best = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double dd = sq_dist(x, i, centers[1 - k]);
          if (dd > best) best = dd, far = i;
        }
        centers[k] = row(far);
        continue;
      }
      for (auto& v : mean) v /= static_cast<double>(count);
      centers[k] = std::move(mean);
    }
  }

  out.labels = std::move(labels);
  out.iterations_used = it;
  std::vector<double> flat(centers[0]);
  flat.insert(flat.end(), centers[1].begin(), centers[1].end());
  out.centroids = Tensor({2, c}, std::move(flat));
  out.objective = 0.0;
  for (std::size_t i = 0; i < n; ++i) out.objective += sq_dist(x, i, centers[out.labels[i]]);
  return out;
}

}  // namespace detail

// Lloyd's algorithm with k-means++ seeding and restarts; the run with the
// lowest within-cluster sum of squares is kept.
inline ClusterAssignment kmeans2(const Tensor& features, Rng& rng, const KMeansOptions& opt = {}) {
  detail::require_matrix(features, "kmeans2");
  detail::require<ContractError>(features.rows() >= 2, "kmeans2: need at least two points");
  detail::require<ConfigError>(opt.max_iter >= 1 && opt.restarts >= 1, "kmeans2: bad options");
  ClusterAssignment best;
  best.objective = std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < opt.restarts; ++r) {
    auto run = detail::lloyd_once(features, rng, opt.max_iter);
    if (run.degenerate) return run;
    if (run.objective < best.objective) best = std::move(run);
  }
  return best;
}

enum class NmiNormalization { kGeometric, kArithmetic };

// Normalized mutual information with natural logs. Zero when either labeling
// has zero entropy.
inline double nmi(const std::vector<int>& a, const std::vector<int>& b,
                  NmiNormalization norm = NmiNormalization::kGeometric) {
  detail::require<DimensionError>(a.size() == b.size(), "nmi: label vectors differ in length");
  detail::require<ContractError>(!a.empty(), "nmi: empty labelings");
  const double n = static_cast<double>(a.size());
  std::map<int, double> pa, pb;
  std::map<std::pair<int, int>, double> joint;
  for (std::size_t i = 0; i < a.size(); ++i) {
    pa[a[i]] += 1.0;
    pb[b[i]] += 1.0;
    joint[{a[i], b[i]}] += 1.0;
  }
  auto entropy = [n](const std::map<int, double>& counts) {
    std::vector<double> terms;
    for (const auto& [k, c] : counts) terms.push_back(-(c / n) * std::log(c / n));
    std::sort(terms.begin(), terms.end());
    double h = 0.0;
    for (double t : terms) h += t;
    return h;
  };
  const double ha = entropy(pa), hb = entropy(pb);
  if (ha <= 0.0 || hb <= 0.0) return 0.0;
  // Sorting the cell terms makes the sum independent of argument order.
  std::vector<double> terms;
  for (const auto& [key, c] : joint) {
    const double pij = c / n;
    const double pi = pa[key.first] / n, pj = pb[key.second] / n;
    terms.push_back(pij * std::log(pij / (pi * pj)));
  }
  std::sort(terms.begin(), terms.end());
  double mi = 0.0;
  for (double t : terms) mi += t;
  const double denom = norm == NmiNormalization::kGeometric ? std::sqrt(ha * hb) : 0.5 * (ha + hb);
  return std::clamp(mi / denom, 0.0, 1.0);
}

// Clusters one layer's V ∪ L rows (special tokens dropped) and scores the
// clusters against the modality labels (vision 0, language 1).
inline double layer_nmi(const Tensor& hidden, const ModalityPartition& truth, Rng& rng, const KMeansOptions& opt = {},
                        NmiNormalization norm = NmiNormalization::kGeometric) {
  detail::require_matrix(hidden, "layer_nmi");
  std::vector<std::size_t> rows(truth.vision);
  rows.insert(rows.end(), truth.language.begin(), truth.language.end());
  for (auto r : rows) detail::require<ContractError>(r < hidden.rows(), "layer_nmi: partition index out of range");
  std::vector<int> labels(truth.vision.size(), 0);
  labels.resize(rows.size(), 1);
  Tape tape = Tape::inference();
  auto clusters = kmeans2(gather_rows(tape, hidden, rows), rng, opt);
  return nmi(clusters.labels, labels, norm);
}

struct NmiProfile {
  std::vector<double> mean;  // per layer
  std::vector<double> stddev;
  std::size_t samples = 0;
};

// `batch[e][l]` is example e's hidden state after layer l. Lower NMI means the
// modalities are harder to tell apart, i.e. more fused.
inline NmiProfile nmi_profile(const std::vector<std::vector<Tensor>>& batch,
                              const std::vector<ModalityPartition>& truth, Rng& rng, const KMeansOptions& opt = {},
                              NmiNormalization norm = NmiNormalization::kGeometric) {
  detail::require<ContractError>(!batch.empty() && batch.size() == truth.size(),
                                 "nmi_profile: need one partition per example");
  const std::size_t layers = batch.front().size();
  NmiProfile prof;
  prof.samples = batch.size();
  prof.mean.assign(layers, 0.0);
  prof.stddev.assign(layers, 0.0);
  std::vector<std::vector<double>> values(layers);
  for (std::size_t e = 0; e < batch.size(); ++e) {
    detail::require<DimensionError>(batch[e].size() == layers, "nmi_profile: layer counts differ across examples");
    for (std::size_t l = 0; l < layers; ++l) values[l].push_back(layer_nmi(batch[e][l], truth[e], rng, opt, norm));
  }
  for (std::size_t l = 0; l < layers; ++l) {
    double s = 0.0;
    for (double v : values[l]) s += v;
    const double mu = s / static_cast<double>(values[l].size());
    double var = 0.0;
    for (double v : values[l]) var += (v - mu) * (v - mu);
    prof.mean[l] = mu;
    prof.stddev[l] = std::sqrt(var / static_cast<double>(values[l].size()));
  }
  return prof;
}

// Single-example convenience: one NMI per layer.
inline std::vector<double> nmi_profile(const std::vector<Tensor>& per_layer, const ModalityPartition& truth, Rng& rng,
                                       const KMeansOptions& opt = {}) {
  std::vector<double> out;
  for (const auto& h : per_layer) out.push_back(layer_nmi(h, truth, rng, opt));
  return out;
}

inline void write_nmi_csv(std::ostream& os, const NmiProfile& p) {
  os << "layer,mean_nmi,std_nmi\n";
  os.precision(17);
  for (std::size_t l = 0; l < p.mean.size(); ++l) os << (l + 1) << ',' << p.mean[l] << ',' << p.stddev[l] << '\n';
}

}  // namespace vlp
