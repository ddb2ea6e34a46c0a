#pragma once

// Exact k-means on a line. Optimal clusters of sorted data are contiguous, so
// the minimum within-cluster sum of squares is found by dynamic programming
// over split points.

#include <cstddef>
#include <limits>
#include <span>
#include <vector>

#include "crowdtemp/errors.hpp"

namespace crowdtemp {

struct Segment {
  std::size_t begin = 0;  // [begin, end) into the sorted input
  std::size_t end = 0;
  double mean = 0.0;
  double sse = 0.0;

  std::size_t size() const { return end - begin; }
};

inline Segment make_segment(std::span<const double> sorted, std::size_t b, std::size_t e) {
  Segment s{b, e, 0.0, 0.0};
  for (std::size_t i = b; i < e; ++i) s.mean += sorted[i];
  s.mean /= static_cast<double>(e - b);
  for (std::size_t i = b; i < e; ++i) s.sse += (sorted[i] - s.mean) * (sorted[i] - s.mean);
  return s;
}

/// Total SSEs this close to the optimum count as ties.
inline double sse_tie_tolerance(double best) { return 1e-9 * (1.0 + best); }

namespace detail {

struct KmeansTable {
  std::vector<std::vector<double>> cost;  // cost[b][e]: SSE of [b, e)
  std::vector<std::vector<double>> best;  // best[c][j]: min SSE of the first j points in c clusters
  std::vector<std::vector<std::size_t>> arg;
};

inline KmeansTable kmeans_table(std::span<const double> sorted, std::size_t k) {
  const std::size_t n = sorted.size();
  require(k >= 1 && k <= n, "kmeans1d: need 1 <= k <= n");
  for (std::size_t i = 1; i < n; ++i) require(sorted[i - 1] <= sorted[i], "kmeans1d: input must be sorted");

  KmeansTable t;
  auto& cost = t.cost;
  cost.assign(n, std::vector<double>(n + 1, 0.0));
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t e = b + 1; e <= n; ++e) cost[b][e] = make_segment(sorted, b, e).sse;

  constexpr double inf = std::numeric_limits<double>::infinity();
  auto& best = t.best;
  auto& arg = t.arg;  // start of the last cluster
  best.assign(k + 1, std::vector<double>(n + 1, inf));
  arg.assign(k + 1, std::vector<std::size_t>(n + 1, 0));
  best[0][0] = 0.0;
  for (std::size_t c = 1; c <= k; ++c)
    for (std::size_t j = c; j <= n; ++j)
      for (std::size_t i = c - 1; i < j; ++i) {
        const double v = best[c - 1][i] + cost[i][j];
        if (v < best[c][j]) {
          best[c][j] = v;
          arg[c][j] = i;
        }
      }
  return t;
}

}  // namespace detail

/// Partition of ascending `sorted` into exactly k non-empty contiguous
/// clusters with minimum total SSE. O(k n^2) after an O(n^3) cost table.
inline std::vector<Segment> kmeans1d(std::span<const double> sorted, std::size_t k) {
  const auto t = detail::kmeans_table(sorted, k);
  std::vector<Segment> out(k);
  std::size_t j = sorted.size();
  for (std::size_t c = k; c >= 1; --c) {
    const std::size_t i = t.arg[c][j];
    out[c - 1] = make_segment(sorted, i, j);
    j = i;
  }
  return out;
}

/// Every contiguous k-partition whose total SSE ties the optimum within
/// sse_tie_tolerance. The first entry is kmeans1d's partition.
inline std::vector<std::vector<Segment>> kmeans1d_all_optimal(std::span<const double> sorted, std::size_t k) {
  const auto t = detail::kmeans_table(sorted, k);
  const std::size_t n = sorted.size();
  const double tol = sse_tie_tolerance(t.best[k][n]);
  std::vector<std::vector<Segment>> out;
  std::vector<Segment> tail;
  // slack: SSE still allowed above the optimum for the prefix [0, j) in c clusters
  const auto walk = [&](auto&& self, std::size_t c, std::size_t j, double slack) -> void {
    if (c == 0) {
      out.emplace_back(tail.rbegin(), tail.rend());
      return;
    }
    std::vector<std::size_t> starts{t.arg[c][j]};
    for (std::size_t i = c - 1; i < j; ++i)
      if (i != t.arg[c][j]) starts.push_back(i);
    for (std::size_t i : starts) {
      const double extra = t.best[c - 1][i] + t.cost[i][j] - t.best[c][j];
      if (extra > slack) continue;
      tail.push_back(make_segment(sorted, i, j));
      self(self, c - 1, i, slack - extra);
      tail.pop_back();
    }
  };
  walk(walk, k, n, tol);
  return out;
}

}  // namespace crowdtemp
