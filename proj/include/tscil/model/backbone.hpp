#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tscil/core/autograd.hpp"
#include "tscil/core/rng.hpp"
#include "tscil/core/tensor.hpp"

namespace tscil::model {

enum class InputNorm { none, layer, instance };
enum class InternalNorm { batch, layer };
enum class HeadKind { softmax_ce, sigmoid_bce, split_cosine, ncm };

std::string to_string(InputNorm v);
std::string to_string(InternalNorm v);
std::string to_string(HeadKind v);
InputNorm parse_input_norm(const std::string& s);
InternalNorm parse_internal_norm(const std::string& s);
HeadKind parse_head_kind(const std::string& s);

inline constexpr double kNormEps = 1e-5;

struct BackboneConfig {
  std::size_t in_channels = 1;
  std::size_t length = 128;
  std::vector<std::size_t> filters{32, 64, 128, 256};
  std::size_t kernel_size = 5;
  std::size_t pool_size = 2;
  double dropout = 0.0;
  InternalNorm internal_norm = InternalNorm::layer;
  InputNorm input_norm = InputNorm::layer;
  HeadKind head = HeadKind::softmax_ce;
  double cosine_scale_init = 10.0;
  double bn_momentum = 0.1;

  std::size_t n_blocks() const { return filters.size(); }
  std::size_t embedding_dim() const { return filters.empty() ? in_channels : filters.back(); }
  /// Time length after each block.
  std::vector<std::size_t> block_lengths() const;
  /// Throws ConfigError for inconsistent settings, including a pooled length of 0.
  void validate() const;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

/// Per-dataset defaults: dropout 0 for UCI-HAR and UWave, 0.3 otherwise;
/// InstanceNorm input for UWave, none for WISDM, LayerNorm elsewhere.
BackboneConfig default_backbone(const std::string& dataset_id, std::size_t channels, std::size_t length);

/// Normalises [C x L] or [N x C x L] input without affine parameters.
Tensor input_normalize(const Tensor& x, InputNorm mode, double eps = kNormEps);

struct ForwardResult {
  ag::Var features;                   // [N x D]
  std::vector<ag::Var> feature_maps;  // per block [N x F_b x L_b]
  ag::Var logits;                     // [N x K]
};

/// Loss of one head kind on logits whose columns follow known_classes.
/// Throws ContractError for ncm.
ag::Var head_loss(HeadKind kind, const ag::Var& logits, std::span<const std::size_t> targets,
                  std::vector<double>* per_sample = nullptr);

/// Nearest prototype by Euclidean distance; ties go to the lowest class id.
/// Rows whose `ready` flag is false are ignored. Throws ContractError when no
/// prototype is available.
int ncm_classify(std::span<const double> feature, const Tensor& prototypes,
                 const std::vector<int>& classes, const std::vector<bool>& ready);

struct Block {
  ag::Var conv_w, conv_b, norm_g, norm_b;
  ag::RunningStats stats;
};

struct Head {
  HeadKind kind = HeadKind::softmax_ce;
  ag::Var weight;   // [K x D]
  ag::Var bias;     // [K], absent for split_cosine
  ag::Var log_eta;  // [1], split_cosine only
  Tensor prototypes;             // [K x D], ncm only
  std::vector<bool> prototype_ready;
};

class Model {
 public:
  static Model build(const BackboneConfig& config, const std::vector<int>& initial_classes,
                     std::uint64_t seed);

  const BackboneConfig& config() const { return config_; }
  const std::vector<int>& known_classes() const { return known_classes_; }
  std::uint64_t seed() const { return seed_; }
  Head& head() { return head_; }
  const Head& head() const { return head_; }
  std::vector<Block>& blocks() { return blocks_; }

  /// `x` is raw [N x C x L]; input normalisation is applied here.
  ForwardResult forward(const Tensor& x, bool training);
  /// Feature extractor only, on an already-built input variable.
  ForwardResult forward_var(const ag::Var& normalized_input, bool training);
  /// Head applied to arbitrary features [N x D].
  ag::Var head_logits(const ag::Var& features) const;

  /// Appends freshly initialised rows; existing rows are untouched.
  void expand_head(const std::vector<int>& new_classes);

  std::size_t class_index(int label) const;
  std::vector<std::size_t> targets(std::span<const int> labels) const;

  /// Training loss for the configured head. The ncm head trains its linear
  /// surrogate with softmax cross-entropy.
  ag::Var training_loss(const ForwardResult& out, std::span<const std::size_t> targets,
                        std::vector<double>* per_sample = nullptr) const;

  /// Evaluation-mode features and logits, computed in chunks without a graph.
  std::pair<Tensor, Tensor> embed(const Tensor& x, std::size_t chunk = 256);
  /// Predicted class ids (argmax logits, or nearest prototype for ncm).
  std::vector<int> predict(const Tensor& x, std::size_t chunk = 256);

  /// Sets the ncm prototype of `label`.
  void set_prototype(int label, std::span<const double> mean);

  std::vector<ag::Var> parameters() const;
  std::vector<std::string> parameter_names() const;
  Model clone() const;
  /// Copies parameter values and running statistics from a model of
  /// identical shape, keeping this model's parameter nodes.
  void assign_from(const Model& other);
  Rng& dropout_rng() { return dropout_rng_; }

  void save(const std::filesystem::path& path) const;
  static Model load(const std::filesystem::path& path);

 private:
  BackboneConfig config_;
  std::vector<Block> blocks_;
  Head head_;
  std::vector<int> known_classes_;
  std::uint64_t seed_ = 0;
  Rng dropout_rng_;
};

}  // namespace tscil::model
