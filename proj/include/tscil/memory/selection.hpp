#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "tscil/core/tensor.hpp"

namespace tscil::memory {

/// Greedy herding over rows of `features` [n x D]: step k picks the unused
/// row minimising || mu - (1/k) sum_{i<=k} phi(e_i) ||. Returns min(m, n)
/// row indices in selection order; ties go to the lower index.
std::vector<std::size_t> herding_select(const Tensor& features, std::size_t m);

/// The min(m, n) rows closest to the feature mean, kept in a bounded
/// max-heap during one pass. Returned closest first; ties keep the earlier row.
std::vector<std::size_t> fasticarl_select(const Tensor& features, std::size_t m);

/// The min(m, n) highest scores; equal scores prefer the earlier index.
/// Returned in descending score order.
std::vector<std::size_t> clops_select(std::span<const double> scores, std::size_t m);

/// Exact KNN-Shapley values of `train` rows for one test point under the
/// K-nearest-neighbour utility, by the sorted recursion. Distances are
/// Euclidean; ties in distance are ordered by row index.
std::vector<double> knn_shapley(const Tensor& train, std::span<const int> train_labels,
                                std::span<const double> test, int test_label, std::size_t k);

/// KNN utility (1/K) * #{label matches among the min(K, |S|) nearest members of S}.
double knn_utility(const Tensor& train, std::span<const int> train_labels, std::span<const std::size_t> subset,
                   std::span<const double> test, int test_label, std::size_t k);

/// Adversarial Shapley value of each candidate: cooperative value against
/// the evaluation points minus adversarial value against the incoming batch.
/// The default variant takes max over evaluation points minus min over the
/// batch; the mean variant averages both.
std::vector<double> aser_scores(const Tensor& candidates, std::span<const int> candidate_labels,
                                const Tensor& eval_points, std::span<const int> eval_labels,
                                const Tensor& batch, std::span<const int> batch_labels, std::size_t k,
                                bool mean_variant = false);

/// Indices of the k largest scores; equal scores prefer the smaller tie key.
std::vector<std::size_t> top_k(std::span<const double> scores, std::span<const std::size_t> tie_keys, std::size_t k);

}  // namespace tscil::memory
