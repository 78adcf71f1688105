#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "tscil/core/autograd.hpp"
#include "tscil/train/trainer.hpp"

namespace tscil::methods {

struct VaeConfig {
  std::vector<std::size_t> widths{32, 64, 128, 256};
  std::size_t latent = 16;
  double beta = 1.0;
  double learning_rate = 1e-3;
  int epochs = 200;
  int patience = 20;
  std::size_t batch_size = 64;
};

/// KL(N(mu, sigma^2) || N(0, 1)) = 0.5 * (mu^2 + sigma^2 - 1 - 2 ln sigma).
double kl_closed_form(double mu, double sigma);

struct VaeLoss {
  ag::Var total;
  ag::Var reconstruction;  // per-sample squared error summed over entries, batch mean
  ag::Var kl;              // per-sample KL summed over latent dims, batch mean
};

/// reconstruction + beta * KL from decoder output and posterior parameters.
VaeLoss vae_loss_terms(const ag::Var& recon, const Tensor& target, const ag::Var& mu, const ag::Var& logvar,
                       double beta);

/// Convolutional VAE: four stride-2 Conv1d encoder layers, linear maps to the
/// posterior mean and log-variance, and a mirrored decoder of four
/// transposed convolutions. Inputs are standardised per channel with
/// statistics fixed on the first data it is fitted to.
class Vae {
 public:
  static Vae build(std::size_t channels, std::size_t length, const VaeConfig& config, std::uint64_t seed);

  struct Output {
    ag::Var recon;  // standardised scale
    ag::Var mu;
    ag::Var logvar;
  };

  /// x is standardised [N x C x L].
  Output forward(const Tensor& x, Rng& rng, bool sample = true) const;
  ag::Var decode(const ag::Var& z) const;
  VaeLoss loss(const Tensor& raw_batch, Rng& rng) const;

  std::vector<data::SamplePtr> generate(std::size_t n, Rng& rng) const;

  /// Fits for up to config.epochs epochs on real samples (plus `replay`
  /// samples drawn on demand, half of each batch), early-stopping on the
  /// reconstruction loss of `val`. Returns the number of epochs run.
  int fit(const std::vector<data::SamplePtr>& train, const std::vector<data::SamplePtr>& val,
          const Vae* replay, Rng& rng, train::RunLog* log = nullptr, std::size_t task = 0);

  void set_standardisation(const std::vector<data::SamplePtr>& samples);
  Tensor standardise(const Tensor& x) const;
  Tensor destandardise(const Tensor& x) const;

  std::vector<ag::Var> parameters() const;
  Vae clone() const;
  const VaeConfig& config() const { return config_; }
  std::size_t channels() const { return channels_; }
  std::size_t length() const { return length_; }
  bool trained() const { return trained_; }

 private:
  VaeConfig config_;
  std::size_t channels_ = 0, length_ = 0;
  std::vector<std::size_t> lengths_;  // encoder lengths, lengths_[0] = length
  std::vector<ag::Var> enc_w_, enc_b_, dec_w_, dec_b_;
  ag::Var mu_w_, mu_b_, lv_w_, lv_b_, dec_in_w_, dec_in_b_;
  std::vector<double> mean_, std_;
  bool trained_ = false;
};

/// Labels = argmax of the frozen learner's logits over its known classes.
std::vector<data::SamplePtr> pseudo_label(model::Model& teacher, const std::vector<data::SamplePtr>& samples);

struct GrParams {
  VaeConfig vae;
  std::uint64_t seed = 0;
  /// When set, a real-vs-generated sample sheet is written here after each task.
  std::optional<std::filesystem::path> sheet_dir;
  std::size_t sheet_per_class = 4;
};

/// Generative replay: pseudo samples from the previous task's frozen
/// generator, labelled by the previous frozen learner, fill half of every
/// step; the generator is trained after the learner on real data plus its
/// own frozen replay, and the frozen pair is refreshed at task end.
class GrPlugin : public train::MethodPlugin {
 public:
  GrPlugin(GrParams params, std::size_t channels, std::size_t length);

  std::string name() const override { return "gr"; }
  int default_patience() const override { return 20; }
  std::size_t replay_slots(std::size_t batch_size) const override;
  void augment_batch(model::Model& model, const data::Task& task, train::StepBatch& batch) override;
  void end_task(model::Model& model, const data::Task& task, const train::TrainConfig& cfg) override;

  /// Task index whose end produced the frozen pair (absent before task 0 ends).
  std::optional<std::size_t> frozen_task() const { return frozen_task_; }
  /// (task being trained, frozen task used) for every replay draw.
  const std::vector<std::pair<std::size_t, std::size_t>>& replay_audit() const { return audit_; }
  const Vae& generator() const { return generator_; }
  const std::optional<Vae>& frozen_generator() const { return frozen_generator_; }
  void set_log(train::RunLog* log) { log_ = log; }

 private:
  GrParams params_;
  Vae generator_;
  std::optional<Vae> frozen_generator_;
  std::optional<model::Model> frozen_learner_;
  std::optional<std::size_t> frozen_task_;
  std::vector<std::pair<std::size_t, std::size_t>> audit_;
  Rng replay_rng_, fit_rng_;
  train::RunLog* log_ = nullptr;
};

/// Per class: `per_class` real series next to `per_class` generated series
/// (channel 0), labelled by the given learner.
void write_sample_sheet(const std::filesystem::path& path, model::Model& labeller, const Vae& generator,
                        const std::vector<data::SamplePtr>& real, std::size_t per_class, Rng& rng);

}  // namespace tscil::methods
