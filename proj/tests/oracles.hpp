#pragma once

// Independent reference implementations used only by the tests. Nothing here
// calls into the library's numerical routines beyond reading tensor values.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <vector>

#include "vlp/rng.hpp"
#include "vlp/tensor.hpp"

namespace oracle {

using Matrix = std::vector<std::vector<double>>;

inline Matrix to_matrix(const vlp::Tensor& t) {
  Matrix m(t.rows(), std::vector<double>(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline vlp::Tensor to_tensor(const Matrix& m) {
  vlp::Tensor t = vlp::Tensor::zeros({m.size(), m.front().size()});
  for (std::size_t i = 0; i < m.size(); ++i)
    for (std::size_t j = 0; j < m[i].size(); ++j) t.at(i, j) = m[i][j];
  return t;
}

inline Matrix naive_matmul(const Matrix& a, const Matrix& b) {
  Matrix c(a.size(), std::vector<double>(b.front().size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.front().size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// Rows drawn from exponentials then normalized; occasionally sparse.
inline Matrix random_row_stochastic(std::size_t n, vlp::Rng& rng) {
  Matrix m(n, std::vector<double>(n));
  const bool sparse = rng.uniform() < 0.2;
  for (auto& row : m) {
    double s = 0.0;
    for (auto& v : row) {
      v = -std::log(1.0 - rng.uniform());
      if (sparse && rng.uniform() < 0.5) v = 0.0;
      s += v;
    }
    if (s == 0.0) {
      row[rng.uniform_index(n)] = 1.0;
      s = 1.0;
    }
    for (auto& v : row) v /= s;
  }
  return m;
}

// Residual-corrected product over layers i..j (1-based), then the pairwise
// inter/intra double loop.
inline double imf_bruteforce(const std::vector<Matrix>& w, std::size_t i, std::size_t j,
                             const std::vector<std::size_t>& vision, const std::vector<std::size_t>& language) {
  const std::size_t n = w.front().size();
  auto residual = [n](const Matrix& m) {
    Matrix a(n, std::vector<double>(n));
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) a[r][c] = 0.5 * m[r][c] + (r == c ? 0.5 : 0.0);
    return a;
  };
  Matrix flow = residual(w[i - 1]);
  for (std::size_t l = i + 1; l <= j; ++l) flow = naive_matmul(residual(w[l - 1]), flow);
  std::vector<int> side(n, -1);
  for (auto v : vision) side[v] = 0;
  for (auto v : language) side[v] = 1;
  double inter = 0.0, intra = 0.0;
  for (std::size_t x = 0; x < n; ++x)
    for (std::size_t y = 0; y < n; ++y) {
      if (side[x] < 0 || side[y] < 0) continue;
      (side[x] == side[y] ? intra : inter) += flow[x][y];
    }
  return inter / (inter + intra);
}

// Exact discrete OT by enumerating every basis of a+b−1 cells: each basic
// feasible solution is a vertex of the transport polytope.
inline double transport_lp(const Matrix& cost, const std::vector<double>& mu, const std::vector<double>& nu) {
  const std::size_t a = mu.size(), b = nu.size(), cells = a * b, basis = a + b - 1;
  double best = std::numeric_limits<double>::infinity();
  std::vector<std::size_t> pick(basis);
  std::function<void(std::size_t, std::size_t)> rec = [&](std::size_t start, std::size_t depth) {
    if (depth == basis) {
      // Solve the (a+b) × basis system, dropping the last (redundant) column
      // constraint, by Gaussian elimination with partial pivoting.
      const std::size_t rows = a + b - 1;
      Matrix m(rows, std::vector<double>(basis + 1, 0.0));
      for (std::size_t k = 0; k < basis; ++k) {
        const std::size_t r = pick[k] / b, c = pick[k] % b;
        m[r][k] = 1.0;
        if (c < b - 1) m[a + c][k] = 1.0;
      }
      for (std::size_t r = 0; r < a; ++r) m[r][basis] = mu[r];
      for (std::size_t c = 0; c + 1 < b; ++c) m[a + c][basis] = nu[c];
      for (std::size_t col = 0; col < basis; ++col) {
        std::size_t piv = col;
        for (std::size_t r = col + 1; r < rows; ++r)
          if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
        if (std::abs(m[piv][col]) < 1e-12) return;  // singular: not a basis
        std::swap(m[piv], m[col]);
        for (std::size_t r = 0; r < rows; ++r) {
          if (r == col) continue;
          const double f = m[r][col] / m[col][col];
          for (std::size_t k = col; k <= basis; ++k) m[r][k] -= f * m[col][k];
        }
      }
      double total = 0.0;
      for (std::size_t k = 0; k < basis; ++k) {
        const double x = m[k][basis] / m[k][k];
        if (x < -1e-12) return;
        total += x * cost[pick[k] / b][pick[k] % b];
      }
      best = std::min(best, total);
      return;
    }
    for (std::size_t c = start; c + (basis - depth) <= cells; ++c) {
      pick[depth] = c;
      rec(c + 1, depth + 1);
    }
  };
  rec(0, 0);
  return best;
}

// Mutual information from an explicit contingency table, normalized by the
// geometric mean of the entropies.
inline double contingency_nmi(const std::vector<int>& a, const std::vector<int>& b) {
  std::map<int, std::size_t> ia, ib;
  for (int v : a) ia.emplace(v, ia.size());
  for (int v : b) ib.emplace(v, ib.size());
  std::vector<std::vector<double>> table(ia.size(), std::vector<double>(ib.size(), 0.0));
  for (std::size_t k = 0; k < a.size(); ++k) table[ia[a[k]]][ib[b[k]]] += 1.0;
  const double n = static_cast<double>(a.size());
  std::vector<double> ra(ia.size(), 0.0), cb(ib.size(), 0.0);
  for (std::size_t r = 0; r < table.size(); ++r)
    for (std::size_t c = 0; c < table[r].size(); ++c) {
      ra[r] += table[r][c];
      cb[c] += table[r][c];
    }
  double ha = 0.0, hb = 0.0, mi = 0.0;
  for (double x : ra) ha -= (x / n) * std::log(x / n);
  for (double x : cb) hb -= (x / n) * std::log(x / n);
  for (std::size_t r = 0; r < table.size(); ++r)
    for (std::size_t c = 0; c < table[r].size(); ++c)
      if (table[r][c] > 0) mi += (table[r][c] / n) * std::log(table[r][c] * n / (ra[r] * cb[c]));
  if (ha <= 0.0 || hb <= 0.0) return 0.0;
  return mi / std::sqrt(ha * hb);
}

// Lowest within-cluster sum of squares over all 2-partitions with both sides
// non-empty.
inline double best_two_partition(const Matrix& x) {
  const std::size_t n = x.size(), d = x.front().size();
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t mask = 1; mask < (std::size_t{1} << (n - 1)); ++mask) {
    double total = 0.0;
    for (int side = 0; side < 2; ++side) {
      std::vector<double> mean(d, 0.0);
      double count = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        if (static_cast<int>((mask >> i) & 1U) == side) {
          for (std::size_t k = 0; k < d; ++k) mean[k] += x[i][k];
          count += 1.0;
        }
      for (auto& m : mean) m /= count;
      for (std::size_t i = 0; i < n; ++i)
        if (static_cast<int>((mask >> i) & 1U) == side)
          for (std::size_t k = 0; k < d; ++k) total += (x[i][k] - mean[k]) * (x[i][k] - mean[k]);
    }
    best = std::min(best, total);
  }
  return best;
}

// Central difference of a scalar function of one tensor entry.
inline double central_difference(vlp::Tensor t, std::size_t index, const std::function<double()>& f,
                                 double h = 1e-5) {
  const double saved = t.data()[index];
  t.data()[index] = saved + h;
  const double up = f();
  t.data()[index] = saved - h;
  const double down = f();
  t.data()[index] = saved;
  return (up - down) / (2.0 * h);
}

// ‖a − b‖ / max(‖a‖, ‖b‖, floor).
inline double relative_error(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-12) {
  double diff = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace oracle
