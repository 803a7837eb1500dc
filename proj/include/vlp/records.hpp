#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

#include "vlp/error.hpp"
#include "vlp/tensor.hpp"

namespace vlp {

// Head-averaged, post-softmax attention of one layer. Rows sum to one.
struct AttentionRecord {
  std::size_t layer_index = 0;  // 1-based within its transformer
  Tensor matrix;
};

// Vision (V) and language (L) token indices inside a joint sequence.
struct ModalityPartition {
  std::vector<std::size_t> vision;
  std::vector<std::size_t> language;

  std::size_t size() const { return vision.size() + language.size(); }
};

// [CLS] ⊕ vision ⊕ [SEP] ⊕ language.
struct SequenceLayout {
  std::size_t cls = 0;
  std::size_t sep = 0;
  ModalityPartition partition;
  std::size_t length = 0;

  std::vector<std::size_t> special_positions() const { return {cls, sep}; }
};

inline SequenceLayout joint_layout(std::size_t num_visual, std::size_t num_words) {
  SequenceLayout layout;
  layout.cls = 0;
  for (std::size_t i = 0; i < num_visual; ++i) layout.partition.vision.push_back(1 + i);
  layout.sep = 1 + num_visual;
  for (std::size_t i = 0; i < num_words; ++i) layout.partition.language.push_back(2 + num_visual + i);
  layout.length = num_visual + num_words + 2;
  return layout;
}

// Checks an n×n matrix is non-negative with unit row sums.
inline bool is_row_stochastic(const Tensor& a, double tol) {
  if (a.rank() != 2 || a.rows() != a.cols()) return false;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < a.cols(); ++j) {
      if (a.at(i, j) < 0.0) return false;
      s += a.at(i, j);
    }
    if (std::abs(s - 1.0) > tol) return false;
  }
  return true;
}

}  // namespace vlp
