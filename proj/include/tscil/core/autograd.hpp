#pragma once

// Minimal reverse-mode automatic differentiation over Tensor values.
//
// A Var is a shared node holding a value, an (optional) gradient and the
// closure that pushes its gradient into its parents. Parameters are
// long-lived leaf nodes; every forward pass builds a fresh graph on top of
// them which is released together with the root.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "tscil/core/rng.hpp"
#include "tscil/core/tensor.hpp"

namespace tscil::ag {

class Node {
 public:
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, zero-initialised on first access.
  Tensor& grad_ref();
  void zero_grad() { grad = Tensor(); }
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor value);
Var parameter(Tensor value);
/// New leaf carrying a copy of x's value; gradients stop here.
Var detach(const Var& x);

/// Result node for a custom operation: records parents and the backward
/// closure only when some parent requires a gradient and grad mode is on.
Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

/// Seeds d(root)/d(root) = 1 and runs the graph backwards. Root must hold a
/// single element.
void backward(const Var& root);

bool grad_enabled();

/// Disables graph construction on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Elementwise / reductions -------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var square(const Var& a);
Var exp(const Var& a);
Var relu(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
/// Row-wise sum of a [N x K] matrix -> [N].
Var row_sum(const Var& a);
Var reshape(const Var& a, std::vector<std::size_t> shape);

// Shape manipulation --------------------------------------------------------
/// Columns [begin, end) of a [N x K] matrix.
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
/// Rows [begin, end) along the leading dimension.
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);
/// Concatenation along the leading dimension.
Var concat_rows(const std::vector<Var>& parts);
/// Gathers leading-dimension entries by index.
Var gather_rows(const Var& a, std::span<const std::size_t> index);

// Layers ---------------------------------------------------------------------
/// x [N x D], w [O x D], b [O] or nullptr -> [N x O].
Var linear(const Var& x, const Var& w, const Var& b);
/// x [N x Cin x L], w [Cout x Cin x K], b [Cout] or nullptr.
Var conv1d(const Var& x, const Var& w, const Var& b, std::size_t stride, std::size_t padding);
/// x [N x Cin x Lin], w [Cin x Cout x K], b [Cout] or nullptr.
/// Lout = (Lin - 1) * stride - 2 * padding + K + output_padding.
Var conv_transpose1d(const Var& x, const Var& w, const Var& b, std::size_t stride,
                     std::size_t padding, std::size_t output_padding);

struct RunningStats {
  Tensor mean;
  Tensor var;
};

/// Per-channel normalisation over (N, L). In training mode batch statistics
/// are used and `stats` is updated with `momentum`; otherwise `stats` is used.
Var batch_norm1d(const Var& x, const Var& gamma, const Var& beta, RunningStats& stats,
                 bool training, double momentum, double eps);
/// Per-sample normalisation over all (C, L) entries with per-channel affine.
Var layer_norm_cl(const Var& x, const Var& gamma, const Var& beta, double eps);
/// Per-sample, per-channel normalisation over L without affine.
Var instance_norm(const Var& x, double eps);

Var max_pool1d(const Var& x, std::size_t kernel);
Var dropout(const Var& x, double p, Rng& rng, bool training);
/// [N x C x L] -> [N x C], mean over time.
Var mean_over_time(const Var& x);

// Losses ---------------------------------------------------------------------
/// Mean softmax cross-entropy. If per_sample is non-null it receives each
/// sample's loss value.
Var cross_entropy(const Var& logits, std::span<const std::size_t> targets,
                  std::vector<double>* per_sample = nullptr);
/// Mean over the batch of the per-class binary cross-entropy summed over
/// classes, with one-hot targets.
Var bce_with_logits(const Var& logits, std::span<const std::size_t> targets,
                    std::vector<double>* per_sample = nullptr);
/// Mean over the batch of -sum_c p_c log softmax(logits / T)_c.
Var soft_cross_entropy(const Var& logits, const Tensor& target_probs, double temperature);
/// Mean squared error against a constant target of identical shape.
Var mse(const Var& a, const Tensor& target);
/// eta * cos(x_n, w_k) for x [N x D], w [K x D]; eta is exp(log_eta[0]).
Var cosine_logits(const Var& x, const Var& w, const Var& log_eta);

// Helpers ---------------------------------------------------------------------
Tensor softmax_rows(const Tensor& logits, double temperature = 1.0);

}  // namespace tscil::ag
