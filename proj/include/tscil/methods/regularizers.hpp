#pragma once

#include <functional>
#include <optional>
#include <vector>

#include "tscil/core/autograd.hpp"
#include "tscil/model/backbone.hpp"
#include "tscil/train/trainer.hpp"

namespace tscil::methods {

// LwF ------------------------------------------------------------------------

/// T^2 * mean over the batch of -sum_c softmax(teacher/T)_c * log softmax(student/T)_c.
ag::Var lwf_loss(const ag::Var& student_old_logits, const Tensor& teacher_logits, double temperature);

// MAS ------------------------------------------------------------------------

struct ImportanceMap {
  std::vector<Tensor> omega;
  std::vector<Tensor> anchor;
  std::size_t tasks = 0;

  bool empty() const { return tasks == 0; }
  /// Zero-pads omega (and pads the anchor with current values) for parameters
  /// that grew since the last accumulation, e.g. a widened head.
  void align(const std::vector<ag::Var>& params);
};

/// Mean over samples of |d ||f(x_i)||^2 / d theta| for each parameter, where
/// output(i) builds f(x_i) on the current parameters.
std::vector<Tensor> mas_increment(const std::vector<ag::Var>& params, std::size_t n_samples,
                                  const std::function<ag::Var(std::size_t)>& output);

/// Folds one task's increment into the running mean over tasks and moves the
/// anchor to the current parameters.
void mas_accumulate(ImportanceMap& map, const std::vector<ag::Var>& params, const std::vector<Tensor>& increment);

/// Model-level accumulation over (at most max_samples of) the given samples.
void mas_accumulate(ImportanceMap& map, model::Model& model, const std::vector<data::SamplePtr>& samples,
                    std::size_t max_samples);

/// lambda * sum_p sum omega_p (theta_p - anchor_p)^2. Throws ContractError on
/// shape mismatch.
ag::Var mas_penalty(const std::vector<ag::Var>& params, const ImportanceMap& map, double lambda);

// Soft-DTW -------------------------------------------------------------------

/// Soft-DTW between a [n x d] and b [m x d] with squared Euclidean cost.
double soft_dtw(const Tensor& a, const Tensor& b, double gamma);

struct SoftDtwGrad {
  double value = 0.0;
  Tensor grad_a;
  Tensor grad_b;
};
SoftDtwGrad soft_dtw_grad(const Tensor& a, const Tensor& b, double gamma);

/// Classic DTW with the same cost.
double dtw(const Tensor& a, const Tensor& b);

/// Differentiable soft-DTW of two [n x d] / [m x d] variables.
ag::Var soft_dtw(const ag::Var& a, const ag::Var& b, double gamma);

/// Mean over the batch of soft-DTW between per-sample [C x L] maps, each
/// transposed to time x channels. Gradients flow into `student` only.
ag::Var soft_dtw_maps(const ag::Var& student, const Tensor& teacher, double gamma);
/// soft_dtw_maps(s, t) - (soft_dtw(s, s) + soft_dtw(t, t)) / 2 per sample:
/// non-negative and zero when the student matches the teacher.
ag::Var soft_dtw_divergence_maps(const ag::Var& student, const Tensor& teacher, double gamma);

/// Scales every time step of [N x C x L] maps to unit L2 norm across channels.
ag::Var channel_normalize(const ag::Var& maps, double eps = 1e-12);

struct Dt2wTerms {
  double lambda_kd = 10.0;
  double lambda_lwf = 1.0;
  double gamma = 1.0;
  double temperature = 2.0;
  bool all_blocks = false;
};

/// lambda_kd * sum over distilled blocks of soft_dtw_divergence_maps on
/// channel-normalised maps + lambda_lwf * lwf_loss over the teacher's classes.
ag::Var dt2w_loss(const model::ForwardResult& student, const model::ForwardResult& teacher, const Dt2wTerms& terms);

// Prototype augmentation -------------------------------------------------------

struct PrototypeSet {
  std::vector<int> classes;
  std::vector<std::vector<double>> means;
  std::vector<double> radius;

  bool empty() const { return classes.empty(); }
  /// Adds per-class mean and radius (root mean per-dimension variance) of
  /// features [n x D].
  void add_from(const Tensor& features, const std::vector<int>& labels);
};

/// Balanced pseudo-features mu_c + r_c * eps: batch_size / K per class, the
/// remainder going to the first classes.
std::pair<Tensor, std::vector<int>> sample_prototypes(const PrototypeSet& set, std::size_t batch_size, Rng& rng);

/// Classifier loss on sampled pseudo-features through the head only.
ag::Var prototype_augment(const PrototypeSet& set, const model::Model& model, std::size_t batch_size, Rng& rng);

// Plugins --------------------------------------------------------------------

struct LwfParams {
  double lambda = 1.0;
  double temperature = 2.0;
};

class LwfPlugin : public train::MethodPlugin {
 public:
  explicit LwfPlugin(LwfParams p) : p_(p) {}
  std::string name() const override { return "lwf"; }
  ag::Var augment_loss(const train::StepContext& ctx) override;
  void end_task(model::Model& model, const data::Task& task, const train::TrainConfig& cfg) override;

 private:
  LwfParams p_;
  std::optional<model::Model> teacher_;
};

struct MasParams {
  double lambda = 1.0;
  std::size_t max_samples = 256;
};

class MasPlugin : public train::MethodPlugin {
 public:
  explicit MasPlugin(MasParams p) : p_(p) {}
  std::string name() const override { return "mas"; }
  ag::Var augment_loss(const train::StepContext& ctx) override;
  void end_task(model::Model& model, const data::Task& task, const train::TrainConfig& cfg) override;
  const ImportanceMap& importance() const { return map_; }

 private:
  MasParams p_;
  ImportanceMap map_;
};

struct Dt2wParams {
  Dt2wTerms terms;
  double prototype_weight = 1.0;
  std::uint64_t seed = 0;
};

class Dt2wPlugin : public train::MethodPlugin {
 public:
  explicit Dt2wPlugin(Dt2wParams p);
  std::string name() const override { return "dt2w"; }
  ag::Var augment_loss(const train::StepContext& ctx) override;
  void end_task(model::Model& model, const data::Task& task, const train::TrainConfig& cfg) override;

 private:
  Dt2wParams p_;
  std::optional<model::Model> teacher_;
  PrototypeSet prototypes_;
  Rng rng_;
};

}  // namespace tscil::methods
