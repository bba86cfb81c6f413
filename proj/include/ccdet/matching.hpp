#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "ccdet/datamodel.hpp"
#include "ccdet/losses.hpp"

namespace ccdet {

/// Rectangular cost matrix: rows are predictions, columns ground-truth
/// objects. All entries must be finite.
struct CostMatrix {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  CostMatrix() = default;
  CostMatrix(int rows_, int cols_, double fill = 0.0)
      : rows(rows_), cols(cols_), data(static_cast<std::size_t>(rows_) * cols_, fill) {
    if (rows_ < 0 || cols_ < 0)
      throw std::invalid_argument("CostMatrix: negative dimensions");
  }

  double& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double at(int r, int c) const {
    return data[static_cast<std::size_t>(r) * cols + c];
  }
};

struct Assignment {
  std::vector<std::pair<int, int>> pairs;  // (prediction, gt), sorted by prediction
  double total_cost = 0.0;
  std::vector<int> unmatched_predictions;
};

/// Matcher cost weights. Defaults mirror the box-loss weights, with the
/// classification term on the same scale as the GIoU term.
struct MatchWeights {
  double w_cls = 2.0;
  double w_l1 = 5.0;
  double w_giou = 2.0;
};

/// Class-agnostic scored box with per-category probabilities, as emitted by
/// a set-prediction head.
struct ScoredPrediction {
  BBox bbox{0.0, 0.0, 1.0, 1.0};
  std::map<int, double> class_probs;
};

namespace detail {

constexpr double kCostInf = std::numeric_limits<double>::infinity();

// Shortest-augmenting-path assignment (Jonker-Volgenant formulation).
// Requires nr <= nc; every row ends up matched. Returns col of each row.
inline std::vector<int> solve_assignment_rows(const std::vector<double>& cost,
                                              int nr, int nc) {
  std::vector<double> u(static_cast<std::size_t>(nr) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(nc) + 1, 0.0);
  std::vector<double> minv(static_cast<std::size_t>(nc) + 1, kCostInf);
  std::vector<int> match(static_cast<std::size_t>(nc) + 1, -1);  // col -> row
  std::vector<int> way(static_cast<std::size_t>(nc) + 1, 0);
  std::vector<char> used(static_cast<std::size_t>(nc) + 1, 0);

  for (int r = 0; r < nr; ++r) {
    int j0 = nc;  // virtual start column
    match[j0] = r;
    std::fill(minv.begin(), minv.end(), kCostInf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = match[j0];
      int j1 = -1;
      double delta = kCostInf;
      for (int j = 0; j < nc; ++j) {
        if (used[j]) continue;
        const double cur = cost[static_cast<std::size_t>(i0) * nc + j] - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= nc; ++j) {
        if (used[j]) {
          u[match[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (match[j0] != -1);
    do {
      const int j1 = way[j0];
      match[j0] = match[j1];
      j0 = j1;
    } while (j0 != nc);
  }

  std::vector<int> col_of_row(nr, -1);
  for (int j = 0; j < nc; ++j)
    if (match[j] >= 0) col_of_row[match[j]] = j;
  return col_of_row;
}

// Minimum total cost of assigning min(|rows|,|cols|) pairs on a submatrix.
inline double optimal_subcost(const CostMatrix& c, const std::vector<int>& rows,
                              const std::vector<int>& cols) {
  const int nr = static_cast<int>(rows.size());
  const int nc = static_cast<int>(cols.size());
  if (nr == 0 || nc == 0) return 0.0;
  std::vector<double> sub;
  sub.reserve(static_cast<std::size_t>(nr) * nc);
  double total = 0.0;
  if (nr <= nc) {
    for (int r : rows)
      for (int col : cols) sub.push_back(c.at(r, col));
    const auto match = solve_assignment_rows(sub, nr, nc);
    for (int r = 0; r < nr; ++r) total += sub[static_cast<std::size_t>(r) * nc + match[r]];
  } else {
    for (int col : cols)
      for (int r : rows) sub.push_back(c.at(r, col));
    const auto match = solve_assignment_rows(sub, nc, nr);
    for (int r = 0; r < nc; ++r) total += sub[static_cast<std::size_t>(r) * nr + match[r]];
  }
  return total;
}

}  // namespace detail

/// Minimum-cost one-to-one assignment of min(rows, cols) pairs. Among all
/// optimal assignments the lexicographically smallest pair list is returned,
/// fixed greedily pair by pair against the optimal completion cost.
inline Assignment hungarian(const CostMatrix& c) {
  for (double v : c.data)
    if (!std::isfinite(v))
      throw std::invalid_argument("hungarian: cost matrix has non-finite entries");
  if (static_cast<std::size_t>(c.rows) * c.cols != c.data.size())
    throw std::invalid_argument("hungarian: dimensions do not match data size");

  Assignment out;
  int pairs_left = std::min(c.rows, c.cols);
  if (pairs_left == 0) {
    for (int r = 0; r < c.rows; ++r) out.unmatched_predictions.push_back(r);
    return out;
  }

  std::vector<int> all_rows(c.rows), free_cols(c.cols);
  for (int r = 0; r < c.rows; ++r) all_rows[r] = r;
  for (int j = 0; j < c.cols; ++j) free_cols[j] = j;

  const double best = detail::optimal_subcost(c, all_rows, free_cols);
  const double tol = 1e-9 * std::max(1.0, std::abs(best));

  double budget = best;
  for (int r = 0; r < c.rows && pairs_left > 0; ++r) {
    std::vector<int> rows_after;
    for (int i = r + 1; i < c.rows; ++i) rows_after.push_back(i);

    bool fixed = false;
    for (std::size_t ci = 0; ci < free_cols.size(); ++ci) {
      const int col = free_cols[ci];
      std::vector<int> cols_rest;
      for (std::size_t cj = 0; cj < free_cols.size(); ++cj)
        if (cj != ci) cols_rest.push_back(free_cols[cj]);
      const double completion =
          pairs_left == 1 ? 0.0 : detail::optimal_subcost(c, rows_after, cols_rest);
      if (c.at(r, col) + completion <= budget + tol) {
        out.pairs.emplace_back(r, col);
        budget -= c.at(r, col);
        free_cols.erase(free_cols.begin() + static_cast<std::ptrdiff_t>(ci));
        --pairs_left;
        fixed = true;
        break;
      }
    }
    (void)fixed;  // row stays unmatched when no column preserves optimality
  }
  std::vector<char> row_matched(static_cast<std::size_t>(c.rows), 0);
  for (const auto& [r, col] : out.pairs) {
    (void)col;
    row_matched[static_cast<std::size_t>(r)] = 1;
  }
  for (int r = 0; r < c.rows; ++r)
    if (!row_matched[static_cast<std::size_t>(r)]) out.unmatched_predictions.push_back(r);

  out.total_cost = 0.0;
  for (const auto& [r, col] : out.pairs) out.total_cost += c.at(r, col);
  return out;
}

/// DETR-family combined cost: classification + L1 + GIoU terms.
inline double match_cost(const ScoredPrediction& pred, const Annotation& gt,
                         const MatchWeights& w, const ImageRecord& norm) {
  if (!std::isfinite(w.w_cls) || !std::isfinite(w.w_l1) || !std::isfinite(w.w_giou) ||
      w.w_cls < 0.0 || w.w_l1 < 0.0 || w.w_giou < 0.0)
    throw std::invalid_argument("MatchWeights: weights must be finite and nonnegative");
  if (w.w_cls == 0.0 && w.w_l1 == 0.0 && w.w_giou == 0.0)
    throw std::invalid_argument("MatchWeights: at least one weight must be positive");
  const auto it = pred.class_probs.find(gt.category_id);
  if (it == pred.class_probs.end())
    throw std::invalid_argument("match_cost: prediction carries no probability for category " +
                                std::to_string(gt.category_id));
  return w.w_cls * (1.0 - it->second) + w.w_l1 * l1_box(gt.bbox, pred.bbox, norm) +
         w.w_giou * giou_loss(gt.bbox, pred.bbox);
}

inline Assignment match_predictions(const std::vector<ScoredPrediction>& preds,
                                    const std::vector<Annotation>& gts,
                                    const MatchWeights& w, const ImageRecord& norm) {
  if (preds.empty())
    throw std::invalid_argument("match_predictions: prediction list is empty");
  if (gts.empty()) {
    Assignment out;
    for (std::size_t r = 0; r < preds.size(); ++r)
      out.unmatched_predictions.push_back(static_cast<int>(r));
    return out;
  }
  CostMatrix c(static_cast<int>(preds.size()), static_cast<int>(gts.size()));
  for (int r = 0; r < c.rows; ++r)
    for (int col = 0; col < c.cols; ++col)
      c.at(r, col) = match_cost(preds[r], gts[col], w, norm);
  return hungarian(c);
}

}  // namespace ccdet
