#include "tscil/memory/selection.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>
#include <utility>

#include "tscil/core/errors.hpp"

namespace tscil::memory {
namespace {

std::vector<double> row_mean(const Tensor& x) {
  const std::size_t n = x.dim(0), d = x.dim(1);
  std::vector<double> mu(d, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) mu[j] += x.at(i, j);
  }
  for (double& v : mu) v /= static_cast<double>(n);
  return mu;
}

double sq_dist(const Tensor& x, std::size_t row, std::span<const double> y) {
  double s = 0.0;
  for (std::size_t j = 0; j < y.size(); ++j) {
    const double diff = x.at(row, j) - y[j];
    s += diff * diff;
  }
  return s;
}

void require_matrix(const Tensor& x, const char* what) {
  if (x.rank() != 2) throw ContractError(std::string(what) + ": features must be [n x D]");
}

std::vector<std::size_t> order_by_distance(const Tensor& train, std::span<const double> test) {
  const std::size_t n = train.dim(0);
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = sq_dist(train, i, test);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
  return order;
}

}  // namespace

std::vector<std::size_t> herding_select(const Tensor& features, std::size_t m) {
  require_matrix(features, "herding_select");
  const std::size_t n = features.dim(0), d = features.dim(1);
  m = std::min(m, n);
  if (m == 0) return {};
  const auto mu = row_mean(features);
  std::vector<double> sum(d, 0.0);
  std::vector<bool> used(n, false);
  std::vector<std::size_t> picked;
  for (std::size_t k = 1; k <= m; ++k) {
    std::size_t best = n;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      if (used[i]) continue;
      double dist = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = mu[j] - (sum[j] + features.at(i, j)) / static_cast<double>(k);
        dist += diff * diff;
      }
      // Distances equal up to rounding count as ties, which go to the lower index.
      if (best == n || dist < best_d - 1e-12 * std::max(1.0, best_d)) {
        best_d = dist;
        best = i;
      }
    }
    used[best] = true;
    picked.push_back(best);
    for (std::size_t j = 0; j < d; ++j) sum[j] += features.at(best, j);
  }
  return picked;
}

std::vector<std::size_t> fasticarl_select(const Tensor& features, std::size_t m) {
  require_matrix(features, "fasticarl_select");
  const std::size_t n = features.dim(0);
  m = std::min(m, n);
  if (m == 0) return {};
  const auto mu = row_mean(features);
  using Item = std::pair<double, std::size_t>;  // (distance, index); the heap top is the worst kept item
  std::priority_queue<Item> heap;
  for (std::size_t i = 0; i < n; ++i) {
    const Item item{sq_dist(features, i, mu), i};
    if (heap.size() < m) {
      heap.push(item);
    } else if (item < heap.top()) {
      heap.pop();
      heap.push(item);
    }
  }
  std::vector<std::size_t> out(heap.size());
  for (std::size_t i = out.size(); i-- > 0;) {
    out[i] = heap.top().second;
    heap.pop();
  }
  return out;
}

std::vector<std::size_t> clops_select(std::span<const double> scores, std::size_t m) {
  std::vector<std::size_t> keys(scores.size());
  std::iota(keys.begin(), keys.end(), std::size_t{0});
  return top_k(scores, keys, m);
}

std::vector<double> knn_shapley(const Tensor& train, std::span<const int> train_labels,
                                std::span<const double> test, int test_label, std::size_t k) {
  require_matrix(train, "knn_shapley");
  if (k == 0) throw ContractError("knn_shapley: K must be positive");
  const std::size_t n = train.dim(0);
  if (train_labels.size() != n) throw ContractError("knn_shapley: label count mismatch");
  std::vector<double> sv(n, 0.0);
  if (n == 0) return sv;
  const auto order = order_by_distance(train, test);
  auto match = [&](std::size_t pos) { return train_labels[order[pos]] == test_label ? 1.0 : 0.0; };
  std::vector<double> s(n);
  const double nn = static_cast<double>(n), kk = static_cast<double>(k);
  s[n - 1] = match(n - 1) * std::min(kk, nn) / (kk * nn);
  for (std::size_t pos = n - 1; pos-- > 0;) {
    const double i = static_cast<double>(pos + 1);
    s[pos] = s[pos + 1] + (match(pos) - match(pos + 1)) * std::min(static_cast<double>(k), i) / (static_cast<double>(k) * i);
  }
  for (std::size_t pos = 0; pos < n; ++pos) sv[order[pos]] = s[pos];
  return sv;
}

double knn_utility(const Tensor& train, std::span<const int> train_labels, std::span<const std::size_t> subset,
                   std::span<const double> test, int test_label, std::size_t k) {
  std::vector<std::pair<double, std::size_t>> d;
  for (std::size_t i : subset) d.emplace_back(sq_dist(train, i, test), i);
  std::sort(d.begin(), d.end());
  double hits = 0.0;
  for (std::size_t r = 0; r < std::min(k, d.size()); ++r) hits += train_labels[d[r].second] == test_label;
  return hits / static_cast<double>(k);
}

std::vector<double> aser_scores(const Tensor& candidates, std::span<const int> candidate_labels,
                                const Tensor& eval_points, std::span<const int> eval_labels,
                                const Tensor& batch, std::span<const int> batch_labels, std::size_t k,
                                bool mean_variant) {
  const std::size_t n = candidates.dim(0);
  auto reduce = [&](const Tensor& points, std::span<const int> labels, bool take_max) {
    std::vector<double> acc(n, 0.0);
    const std::size_t m = labels.size();
    if (m == 0) return acc;
    const std::size_t d = points.dim(1);
    for (std::size_t p = 0; p < m; ++p) {
      const auto sv = knn_shapley(candidates, candidate_labels,
                                  std::span<const double>(points.data() + p * d, d), labels[p], k);
      for (std::size_t i = 0; i < n; ++i) {
        if (mean_variant) acc[i] += sv[i] / static_cast<double>(m);
        else if (p == 0) acc[i] = sv[i];
        else acc[i] = take_max ? std::max(acc[i], sv[i]) : std::min(acc[i], sv[i]);
      }
    }
    return acc;
  };
  const auto coop = reduce(eval_points, eval_labels, true);
  const auto adv = reduce(batch, batch_labels, false);
  std::vector<double> score(n);
  for (std::size_t i = 0; i < n; ++i) score[i] = coop[i] - adv[i];
  return score;
}

std::vector<std::size_t> top_k(std::span<const double> scores, std::span<const std::size_t> tie_keys, std::size_t k) {
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return tie_keys[a] < tie_keys[b];
  });
  idx.resize(std::min(k, idx.size()));
  return idx;
}

}  // namespace tscil::memory
