#include "osr/assignment.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace osr {

namespace {

// Minimum-cost assignment of every row of `cost` to a distinct column (rows <= cols).
// Classic potentials formulation; returns row -> column.
std::vector<int> solve_assignment(const MatD& cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<std::size_t>(n + 1), 0.0), v(static_cast<std::size_t>(m + 1), 0.0);
  std::vector<int> p(static_cast<std::size_t>(m + 1), 0), way(static_cast<std::size_t>(m + 1), 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(m + 1), inf);
    std::vector<char> used(static_cast<std::size_t>(m + 1), 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= m; ++j) {
    if (p[static_cast<std::size_t>(j)] != 0) {
      row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)] - 1)] = j - 1;
    }
  }
  return row_to_col;
}

double assignment_cost(const MatD& cost, const std::vector<int>& sigma) {
  double total = 0.0;
  for (std::size_t i = 0; i < sigma.size(); ++i) total += cost(static_cast<Eigen::Index>(i), sigma[i]);
  return total;
}

// Optimal cost of rows [first, K) over the columns not in `taken`.
double residual_optimum(const MatD& cost, int first, const std::vector<char>& taken) {
  const int k = static_cast<int>(cost.rows());
  if (first >= k) return 0.0;
  std::vector<int> cols;
  for (int j = 0; j < k; ++j) {
    if (!taken[static_cast<std::size_t>(j)]) cols.push_back(j);
  }
  MatD sub(k - first, static_cast<Eigen::Index>(cols.size()));
  for (int i = first; i < k; ++i) {
    for (std::size_t c = 0; c < cols.size(); ++c) sub(i - first, static_cast<Eigen::Index>(c)) = cost(i, cols[c]);
  }
  const auto sol = solve_assignment(sub);
  double total = 0.0;
  for (std::size_t r = 0; r < sol.size(); ++r) total += sub(static_cast<Eigen::Index>(r), sol[r]);
  return total;
}

}  // namespace

MatchAssignment hungarian(const MatD& cost) {
  if (cost.rows() != cost.cols()) {
    throw ConfigError("hungarian: cost matrix must be square, got " + std::to_string(cost.rows()) +
                      "x" + std::to_string(cost.cols()));
  }
  if (!cost.allFinite()) throw NumericError("hungarian: cost matrix has non-finite entries");
  const int k = static_cast<int>(cost.rows());
  MatchAssignment out;
  if (k == 0) return out;
  std::vector<int> sigma = solve_assignment(cost);
  const double optimum = assignment_cost(cost, sigma);
  const double tol = 1e-12 * (1.0 + cost.cwiseAbs().maxCoeff() * k);

  // Lexicographic refinement: fix rows in order to the smallest column that still admits an
  // optimal completion.
  std::vector<char> taken(static_cast<std::size_t>(k), 0);
  double prefix = 0.0;
  for (int i = 0; i < k; ++i) {
    int chosen = sigma[static_cast<std::size_t>(i)];
    for (int j = 0; j < chosen; ++j) {
      if (taken[static_cast<std::size_t>(j)]) continue;
      taken[static_cast<std::size_t>(j)] = 1;
      const double c = prefix + cost(i, j) + residual_optimum(cost, i + 1, taken);
      taken[static_cast<std::size_t>(j)] = 0;
      if (c <= optimum + tol) {
        chosen = j;
        break;
      }
    }
    if (chosen != sigma[static_cast<std::size_t>(i)]) {
      // Re-solve the remainder with row i pinned so later rows stay consistent.
      taken[static_cast<std::size_t>(chosen)] = 1;
      std::vector<int> cols;
      for (int j = 0; j < k; ++j) {
        if (!taken[static_cast<std::size_t>(j)]) cols.push_back(j);
      }
      MatD sub(k - i - 1, static_cast<Eigen::Index>(cols.size()));
      for (int r = i + 1; r < k; ++r) {
        for (std::size_t c = 0; c < cols.size(); ++c) sub(r - i - 1, static_cast<Eigen::Index>(c)) = cost(r, cols[c]);
      }
      const auto sol = solve_assignment(sub);
      sigma[static_cast<std::size_t>(i)] = chosen;
      for (std::size_t r = 0; r < sol.size(); ++r) sigma[static_cast<std::size_t>(i) + 1 + r] = cols[static_cast<std::size_t>(sol[r])];
    } else {
      taken[static_cast<std::size_t>(chosen)] = 1;
    }
    prefix += cost(i, chosen);
  }
  out.sigma = std::move(sigma);
  out.total_cost = assignment_cost(cost, out.sigma);
  return out;
}

template <typename T>
SlotMatch match_slots(const Mat<T>& a, const Mat<T>& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError("match_slots: slot sets must have identical shapes");
  }
  const MatD ad = a.template cast<double>();
  const MatD bd = b.template cast<double>();
  SlotMatch out;
  Eigen::VectorXd na = ad.rowwise().norm();
  Eigen::VectorXd nb = bd.rowwise().norm();
  for (Eigen::Index i = 0; i < na.size(); ++i) {
    if (na(i) == 0.0) ++out.zero_norm_slots;
    if (nb(i) == 0.0) ++out.zero_norm_slots;
  }
  MatD cost(a.rows(), b.rows());
  for (Eigen::Index i = 0; i < a.rows(); ++i) {
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      const double denom = na(i) * nb(j);
      cost(i, j) = denom > 0.0 ? -ad.row(i).dot(bd.row(j)) / denom : 0.0;
    }
  }
  out.assignment = hungarian(cost);
  out.total_similarity = -out.assignment.total_cost;
  return out;
}

std::vector<int> inverse_permutation(const std::vector<int>& sigma) {
  std::vector<int> inv(sigma.size(), -1);
  for (std::size_t i = 0; i < sigma.size(); ++i) inv[static_cast<std::size_t>(sigma[i])] = static_cast<int>(i);
  return inv;
}

template SlotMatch match_slots<float>(const Mat<float>&, const Mat<float>&);
template SlotMatch match_slots<double>(const Mat<double>&, const Mat<double>&);

}  // namespace osr
