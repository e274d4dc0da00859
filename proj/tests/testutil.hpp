#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <utility>
#include <vector>

#include "pear/rng.hpp"
#include "pear/tensor.hpp"

// Shared test helpers: the central finite-difference oracle used to check
// every analytic gradient, independent of the tape machinery it verifies.

namespace testutil {

inline constexpr double kFdStep = 1e-5;

// d(eval)/d(t[i]) by central differences. eval() recomputes the loss from
// scratch; recording is suspended so probes leave no tape behind.
inline std::vector<double> numeric_gradient(const std::function<double()>& eval, pear::Tensor& t,
                                            double h = kFdStep) {
  pear::NoGradGuard ng;
  std::vector<double> g(static_cast<size_t>(t.numel()));
  auto& d = t.data();
  for (size_t i = 0; i < d.size(); ++i) {
    const double saved = d[i];
    d[i] = saved + h;
    const double up = eval();
    d[i] = saved - h;
    const double down = eval();
    d[i] = saved;
    g[i] = (up - down) / (2.0 * h);
  }
  return g;
}

// Worst-case relative error, floored so elements whose true gradient is
// tiny compared to the loss scale do not dominate via rounding noise.
inline double max_rel_error(const std::vector<double>& analytic,
                            const std::vector<double>& numeric) {
  double worst = 0.0;
  for (size_t i = 0; i < analytic.size(); ++i) {
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric[i]), 1e-6});
    worst = std::max(worst, std::abs(analytic[i] - numeric[i]) / denom);
  }
  return worst;
}

inline pear::Tensor random_tensor(std::vector<pear::Index> shape, pear::Rng& rng,
                                  bool requires_grad = false, double stddev = 1.0) {
  pear::Tensor t(std::move(shape), 0.0, requires_grad);
  for (auto& v : t.data()) v = rng.gauss(0.0, stddev);
  return t;
}

// Brute-force share-planning reference: order positions by repeated
// max-extraction (ties to the lowest id), prune the lowest m, donate the
// highest m, pair them rank by rank. Kept deliberately independent of the
// planner's sort-based implementation.
struct ReferencePlan {
  std::vector<int> pruned;
  std::vector<int> donors;
  std::vector<std::pair<int, int>> assignment;  // pruned -> donor
};

inline ReferencePlan reference_plan(const std::map<int, double>& scores, double ratio) {
  ReferencePlan out;
  const int n = static_cast<int>(scores.size());
  const int m = static_cast<int>(std::floor(n * ratio));
  if (m == 0) return out;

  std::vector<int> remaining;
  for (const auto& [id, s] : scores) remaining.push_back(id);
  std::vector<int> order;
  while (!remaining.empty()) {
    size_t best = 0;
    for (size_t i = 1; i < remaining.size(); ++i)
      if (scores.at(remaining[i]) > scores.at(remaining[best])) best = i;
    order.push_back(remaining[best]);
    remaining.erase(remaining.begin() + static_cast<long>(best));
  }
  out.donors.assign(order.begin(), order.begin() + m);
  out.pruned.assign(order.end() - m, order.end());
  for (int i = 0; i < m; ++i) out.assignment.push_back({out.pruned[i], out.donors[i]});
  return out;
}

}  // namespace testutil
