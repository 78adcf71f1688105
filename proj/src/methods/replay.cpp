#include "tscil/methods/replay.hpp"

#include <algorithm>
#include <map>
#include <numeric>

#include "tscil/core/errors.hpp"

namespace tscil::methods {

std::vector<std::string> MethodAssembly::policy_names() const {
  static const char* kUpdate[] = {"reservoir", "herding", "fasticarl", "clops", "subject_restricted"};
  static const char* kRetrieval[] = {"random", "aser", "subject_balanced"};
  std::vector<std::string> out{kUpdate[static_cast<int>(update)], kRetrieval[static_cast<int>(retrieval)]};
  if (der_loss) out.push_back("der_loss");
  return out;
}

MethodAssembly method_assembly(const std::string& kind) {
  MethodAssembly a;
  a.kind = kind;
  if (kind == "er") return a;
  if (kind == "der") {
    a.capture_logits = a.der_loss = true;
    return a;
  }
  if (kind == "herding") {
    a.update = UpdatePolicy::herding;
    return a;
  }
  if (kind == "fasticarl") {
    a.update = UpdatePolicy::fasticarl;
    return a;
  }
  if (kind == "clops") {
    a.update = UpdatePolicy::clops;
    return a;
  }
  if (kind == "aser") {
    a.retrieval = RetrievalPolicy::aser;
    return a;
  }
  if (kind == "er_subject_balanced") {
    a.retrieval = RetrievalPolicy::subject_balanced;
    return a;
  }
  if (kind == "er_subject_restricted") {
    a.update = UpdatePolicy::subject_restricted;
    return a;
  }
  throw ConfigError("unknown replay method '" + kind + "'");
}

bool is_replay_kind(const std::string& kind) {
  try {
    method_assembly(kind);
    return true;
  } catch (const ConfigError&) {
    return false;
  }
}

ag::Var der_loss(const ag::Var& logits, const std::vector<const std::vector<double>*>& stored, double alpha) {
  const Tensor& z = logits->value;
  const std::size_t n = z.dim(0), k = z.dim(1);
  if (stored.size() != n) throw ContractError("der_loss: one stored logit vector per row is required");
  if (n == 0) return ag::constant(Tensor::scalar(0.0));
  double total = 0.0;
  Tensor grad(z.shape(), 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!stored[i]) throw ContractError("der_loss: buffer entry has no stored logits");
    const auto& s = *stored[i];
    if (s.empty() || s.size() > k) throw ContractError("der_loss: stored logits wider than the current head");
    const double w = static_cast<double>(s.size());
    for (std::size_t c = 0; c < s.size(); ++c) {
      const double diff = z.at(i, c) - s[c];
      total += diff * diff / w;
      grad.at(i, c) = 2.0 * diff / w;
    }
  }
  const double scale = alpha / static_cast<double>(n);
  for (double& g : grad.values()) g *= scale;
  return ag::make_node(Tensor::scalar(total * scale), {logits}, [logits, grad = std::move(grad)](ag::Node& self) {
    auto& g = logits->grad_ref();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * grad[i];
  });
}

ReplayPlugin::ReplayPlugin(MethodAssembly assembly, ReplayParams params)
    : assembly_(std::move(assembly)),
      params_(std::move(params)),
      buffer_(params_.capacity),
      retrieve_rng_(params_.seed, "buffer/retrieve"),
      update_rng_(params_.seed, "buffer/update") {}

std::size_t ReplayPlugin::replay_slots(std::size_t batch_size) const {
  return buffer_.empty() ? 0 : batch_size / 2;
}

void ReplayPlugin::augment_batch(model::Model& model, const data::Task&, train::StepBatch& batch) {
  if (buffer_.empty()) return;
  const std::size_t k = batch.n_new;
  std::vector<std::size_t> idx;
  switch (assembly_.retrieval) {
    case RetrievalPolicy::random:
      idx = memory::random_retrieve(buffer_, k, retrieve_rng_);
      break;
    case RetrievalPolicy::subject_balanced:
      idx = memory::subject_balanced_retrieve(buffer_, k, retrieve_rng_);
      break;
    case RetrievalPolicy::aser: {
      auto features = [&](const std::vector<data::SamplePtr>& s) { return model.embed(data::to_batch(s)).first; };
      std::vector<data::SamplePtr> fresh(batch.samples.begin(), batch.samples.begin() + static_cast<std::ptrdiff_t>(k));
      std::vector<int> labels;
      for (const auto& s : fresh) labels.push_back(s->label);
      idx = memory::aser_retrieve(buffer_, k, features, features(fresh), labels, params_.aser, retrieve_rng_);
      break;
    }
  }
  for (auto i : idx) {
    batch.samples.push_back(buffer_.entry(i).sample);
    batch.replay_handles.push_back(i);
  }
}

ag::Var ReplayPlugin::augment_loss(const train::StepContext& ctx) {
  if (assembly_.update == UpdatePolicy::clops) {
    if (clops_task_ != ctx.task.index) {
      clops_task_ = ctx.task.index;
      clops_sum_.assign(ctx.task.train.size(), 0.0);
      clops_count_.assign(ctx.task.train.size(), 0);
    }
    for (std::size_t i = 0; i < ctx.batch.n_new; ++i) {
      clops_sum_[ctx.batch.new_indices[i]] += ctx.per_sample_loss[i];
      ++clops_count_[ctx.batch.new_indices[i]];
    }
  }
  if (!assembly_.der_loss || ctx.batch.replay_handles.empty()) return nullptr;
  const std::size_t n_new = ctx.batch.n_new, n_mem = ctx.batch.replay_handles.size();
  std::vector<const std::vector<double>*> stored;
  for (auto h : ctx.batch.replay_handles) {
    const auto& e = buffer_.entry(h);
    stored.push_back(e.stored_logits ? &*e.stored_logits : nullptr);
  }
  return der_loss(ag::slice_rows(ctx.output.logits, n_new, n_new + n_mem), stored, params_.der_alpha);
}

void ReplayPlugin::end_task(model::Model& model, const data::Task& task, const train::TrainConfig& cfg) {
  std::vector<data::SamplePtr> samples = task.train;
  update_rng_.shuffle(samples.begin(), samples.end());
  auto features = [&](const std::vector<data::SamplePtr>& s) { return model.embed(data::to_batch(s), cfg.eval_chunk).first; };
  const std::size_t classes_seen = model.known_classes().size();

  switch (assembly_.update) {
    case UpdatePolicy::reservoir:
    case UpdatePolicy::subject_restricted: {
      if (assembly_.update == UpdatePolicy::subject_restricted && params_.allowed_subjects.empty()) {
        std::set<int> subjects;
        for (const auto& s : task.train) {
          if (s->subject) subjects.insert(*s->subject);
        }
        for (int s : subjects) {
          if (params_.allowed_subjects.size() >= params_.restricted_subject_count) break;
          params_.allowed_subjects.insert(s);
        }
        if (params_.allowed_subjects.empty()) throw ConfigError("er_subject_restricted needs samples with subject ids");
      }
      for (std::size_t start = 0; start < samples.size(); start += cfg.batch_size) {
        const std::size_t end = std::min(samples.size(), start + cfg.batch_size);
        std::span<const data::SamplePtr> chunk(samples.data() + start, end - start);
        std::vector<std::vector<double>> logits;
        if (assembly_.capture_logits) {
          const Tensor z = model.embed(data::to_batch(chunk), cfg.eval_chunk).second;
          const std::size_t k = z.dim(1);
          for (std::size_t i = 0; i < chunk.size(); ++i) {
            logits.emplace_back(z.data() + i * k, z.data() + (i + 1) * k);
          }
        }
        if (assembly_.update == UpdatePolicy::reservoir) {
          buffer_.reservoir_update(chunk, update_rng_, assembly_.capture_logits ? &logits : nullptr);
        } else {
          buffer_.subject_restricted_update(chunk, params_.allowed_subjects, update_rng_,
                                            assembly_.capture_logits ? &logits : nullptr);
        }
      }
      break;
    }
    case UpdatePolicy::herding:
      memory::herding_update(buffer_, task.train, features, classes_seen);
      break;
    case UpdatePolicy::fasticarl:
      memory::fasticarl_update(buffer_, task.train, features, classes_seen);
      break;
    case UpdatePolicy::clops: {
      std::vector<double> scores;
      if (clops_task_ == task.index) {
        for (std::size_t i = 0; i < task.train.size(); ++i) {
          scores.push_back(clops_count_[i] ? clops_sum_[i] / static_cast<double>(clops_count_[i]) : 0.0);
        }
      }
      memory::clops_update(buffer_, task.train, scores, classes_seen, update_rng_);
      break;
    }
  }
  if (model.head().kind == model::HeadKind::ncm) update_ncm_prototypes(model, buffer_, cfg.eval_chunk);
}

void update_ncm_prototypes(model::Model& model, const memory::MemoryBuffer& buffer, std::size_t chunk) {
  std::map<int, std::vector<data::SamplePtr>> by_class;
  for (const auto& e : buffer.entries()) by_class[e.sample->label].push_back(e.sample);
  for (const auto& [label, samples] : by_class) {
    const Tensor f = model.embed(data::to_batch(samples), chunk).first;
    std::vector<double> mu(f.dim(1), 0.0);
    for (std::size_t i = 0; i < f.dim(0); ++i) {
      for (std::size_t j = 0; j < f.dim(1); ++j) mu[j] += f.at(i, j) / static_cast<double>(f.dim(0));
    }
    model.set_prototype(label, mu);
  }
}

}  // namespace tscil::methods
