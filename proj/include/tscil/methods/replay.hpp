#pragma once

#include <set>
#include <string>
#include <vector>

#include "tscil/memory/buffer.hpp"
#include "tscil/train/trainer.hpp"

namespace tscil::methods {

enum class UpdatePolicy { reservoir, herding, fasticarl, clops, subject_restricted };
enum class RetrievalPolicy { random, aser, subject_balanced };

struct MethodAssembly {
  std::string kind;
  UpdatePolicy update = UpdatePolicy::reservoir;
  RetrievalPolicy retrieval = RetrievalPolicy::random;
  bool capture_logits = false;  // DER
  bool der_loss = false;

  std::vector<std::string> policy_names() const;
};

/// Replay method kinds: er, der, herding, aser, clops, fasticarl,
/// er_subject_balanced, er_subject_restricted. Throws ConfigError otherwise.
MethodAssembly method_assembly(const std::string& kind);
bool is_replay_kind(const std::string& kind);

/// alpha * mean over samples of the mean squared error between each sample's
/// current logits (first w_i columns) and its w_i stored logits.
ag::Var der_loss(const ag::Var& logits, const std::vector<const std::vector<double>*>& stored, double alpha);

struct ReplayParams {
  std::size_t capacity = 0;
  double der_alpha = 0.5;
  memory::AserConfig aser;
  /// Subjects admitted by er_subject_restricted; when empty the lowest
  /// `restricted_subject_count` subject ids of the first task are used.
  std::set<int> allowed_subjects;
  std::size_t restricted_subject_count = 2;
  std::uint64_t seed = 0;
};

/// The experience-replay pipeline: each step appends a retrieved memory
/// batch to the new-data batch; after the task, one extra pass over the
/// task data applies the memory-update policy with the converged model.
class ReplayPlugin : public train::MethodPlugin {
 public:
  ReplayPlugin(MethodAssembly assembly, ReplayParams params);

  std::string name() const override { return assembly_.kind; }
  int default_patience() const override { return 20; }
  std::size_t replay_slots(std::size_t batch_size) const override;
  void augment_batch(model::Model& model, const data::Task& task, train::StepBatch& batch) override;
  ag::Var augment_loss(const train::StepContext& ctx) override;
  void end_task(model::Model& model, const data::Task& task, const train::TrainConfig& cfg) override;

  const memory::MemoryBuffer& buffer() const { return buffer_; }
  const MethodAssembly& assembly() const { return assembly_; }
  const std::set<int>& allowed_subjects() const { return params_.allowed_subjects; }

 private:
  MethodAssembly assembly_;
  ReplayParams params_;
  memory::MemoryBuffer buffer_;
  Rng retrieve_rng_, update_rng_;
  std::size_t clops_task_ = static_cast<std::size_t>(-1);
  std::vector<double> clops_sum_;
  std::vector<std::size_t> clops_count_;
};

/// Recomputes ncm prototypes as per-class means of buffer features.
void update_ncm_prototypes(model::Model& model, const memory::MemoryBuffer& buffer, std::size_t chunk = 256);

}  // namespace tscil::methods
