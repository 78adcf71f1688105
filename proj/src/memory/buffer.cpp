#include "tscil/memory/buffer.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>

#include <spdlog/spdlog.h>

#include "tscil/core/archive.hpp"
#include "tscil/core/errors.hpp"
#include "tscil/memory/selection.hpp"

namespace tscil::memory {

void MemoryBuffer::reservoir_update(std::span<const data::SamplePtr> batch, Rng& rng,
                                    const std::vector<std::vector<double>>* logits) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ++seen_;
    if (capacity_ == 0) continue;
    BufferEntry e;
    e.sample = batch[i];
    if (logits) e.stored_logits = (*logits)[i];
    if (entries_.size() < capacity_) {
      e.insertion_index = next_index_++;
      entries_.push_back(std::move(e));
      continue;
    }
    const std::uint64_t j = rng.index(seen_);
    if (j < capacity_) {
      e.insertion_index = next_index_++;
      entries_[j] = std::move(e);
    }
  }
}

void MemoryBuffer::subject_restricted_update(std::span<const data::SamplePtr> batch, const std::set<int>& allowed,
                                             Rng& rng, const std::vector<std::vector<double>>* logits) {
  if (allowed.empty()) throw ConfigError("subject_restricted_update: allowed subject set is empty");
  std::vector<data::SamplePtr> kept;
  std::vector<std::vector<double>> kept_logits;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch[i]->subject && allowed.count(*batch[i]->subject)) {
      kept.push_back(batch[i]);
      if (logits) kept_logits.push_back((*logits)[i]);
    }
  }
  reservoir_update(kept, rng, logits ? &kept_logits : nullptr);
}

void MemoryBuffer::truncate_per_class(std::size_t quota) {
  std::map<int, std::size_t> count;
  std::vector<BufferEntry> kept;
  for (auto& e : entries_) {
    if (count[e.sample->label]++ < quota) kept.push_back(std::move(e));
  }
  entries_ = std::move(kept);
}

void MemoryBuffer::append(std::vector<BufferEntry> entries) {
  for (auto& e : entries) {
    if (entries_.size() >= capacity_) break;
    entries_.push_back(std::move(e));
  }
}

std::vector<int> MemoryBuffer::classes() const {
  std::set<int> s;
  for (const auto& e : entries_) s.insert(e.sample->label);
  return {s.begin(), s.end()};
}

std::size_t budget_from_fraction(std::size_t train_size, double pct, std::size_t min_classes) {
  if (!(pct > 0.0 && pct <= 1.0)) throw ConfigError("memory fraction must lie in (0, 1], got " + std::to_string(pct));
  // The small epsilon keeps products such as 0.05 * 7352 from flooring below their exact value.
  auto m = static_cast<std::size_t>(std::floor(pct * static_cast<double>(train_size) + 1e-9));
  if (min_classes && min_classes <= train_size) m = std::max(m, min_classes);
  return m;
}

std::size_t budget_from_fraction(const data::TaskStream& stream, double pct) {
  std::size_t n = 0;
  for (const auto& t : stream.tasks) n += t.train.size() + t.val.size();
  return budget_from_fraction(n, pct, stream.classes().size());
}

namespace {

std::map<int, std::vector<std::size_t>> group_by_class(const std::vector<data::SamplePtr>& samples) {
  std::map<int, std::vector<std::size_t>> g;
  for (std::size_t i = 0; i < samples.size(); ++i) g[samples[i]->label].push_back(i);
  return g;
}

std::vector<data::SamplePtr> pick(const std::vector<data::SamplePtr>& samples, const std::vector<std::size_t>& idx) {
  std::vector<data::SamplePtr> out;
  for (auto i : idx) out.push_back(samples[i]);
  return out;
}

template <typename Select>
void quota_update(MemoryBuffer& buffer, const std::vector<data::SamplePtr>& task_samples, std::size_t classes_seen,
                  Select select) {
  if (classes_seen == 0) throw ContractError("class quota needs at least one seen class");
  const std::size_t quota = buffer.capacity() / classes_seen;
  buffer.truncate_per_class(quota);
  for (const auto& [label, members] : group_by_class(task_samples)) {
    std::vector<std::pair<std::size_t, std::optional<double>>> chosen = select(members, quota);
    std::vector<BufferEntry> entries;
    for (const auto& [i, score] : chosen) {
      BufferEntry e;
      e.sample = task_samples[i];
      e.score = score;
      e.insertion_index = buffer.next_insertion_index();
      entries.push_back(std::move(e));
    }
    buffer.append(std::move(entries));
  }
}

template <typename Selector>
void feature_quota_update(MemoryBuffer& buffer, const std::vector<data::SamplePtr>& task_samples,
                          const FeatureFn& features, std::size_t classes_seen, Selector selector) {
  quota_update(buffer, task_samples, classes_seen, [&](const std::vector<std::size_t>& members, std::size_t m) {
    const Tensor f = features(pick(task_samples, members));
    std::vector<std::pair<std::size_t, std::optional<double>>> out;
    for (auto r : selector(f, m)) out.emplace_back(members[r], std::nullopt);
    return out;
  });
}

}  // namespace

void herding_update(MemoryBuffer& buffer, const std::vector<data::SamplePtr>& task_samples,
                    const FeatureFn& features, std::size_t classes_seen) {
  feature_quota_update(buffer, task_samples, features, classes_seen, herding_select);
}

void fasticarl_update(MemoryBuffer& buffer, const std::vector<data::SamplePtr>& task_samples,
                      const FeatureFn& features, std::size_t classes_seen) {
  feature_quota_update(buffer, task_samples, features, classes_seen, fasticarl_select);
}

void clops_update(MemoryBuffer& buffer, const std::vector<data::SamplePtr>& task_samples,
                  std::span<const double> scores, std::size_t classes_seen, Rng& rng) {
  if (scores.size() != task_samples.size()) {
    spdlog::warn("clops: importance scores missing for {} samples; falling back to reservoir sampling",
                 task_samples.size());
    buffer.reservoir_update(task_samples, rng);
    return;
  }
  quota_update(buffer, task_samples, classes_seen, [&](const std::vector<std::size_t>& members, std::size_t m) {
    std::vector<double> s;
    for (auto i : members) s.push_back(scores[i]);
    std::vector<std::pair<std::size_t, std::optional<double>>> out;
    for (auto r : clops_select(s, m)) out.emplace_back(members[r], s[r]);
    return out;
  });
}

std::vector<std::size_t> random_retrieve(const MemoryBuffer& buffer, std::size_t k, Rng& rng) {
  const std::size_t n = buffer.size();
  std::vector<std::size_t> out;
  if (n == 0 || k == 0) return out;
  if (n < k) {
    for (std::size_t i = 0; i < k; ++i) out.push_back(rng.index(n));
    return out;
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(idx[i], idx[i + rng.index(n - i)]);
    out.push_back(idx[i]);
  }
  return out;
}

std::vector<std::size_t> subject_balanced_retrieve(const MemoryBuffer& buffer, std::size_t k, Rng& rng) {
  std::map<int, std::vector<std::size_t>> by_subject;
  for (std::size_t i = 0; i < buffer.size(); ++i) {
    const auto& s = buffer.entry(i).sample->subject;
    if (!s) {
      spdlog::warn("subject_balanced_retrieve: entries without subject ids; using random retrieval");
      return random_retrieve(buffer, k, rng);
    }
    by_subject[*s].push_back(i);
  }
  std::vector<std::size_t> out;
  if (by_subject.empty() || k == 0) return out;
  const std::size_t s_count = by_subject.size();
  std::vector<std::size_t> quota(s_count, k / s_count);
  const std::size_t start = rng.index(s_count);
  for (std::size_t r = 0; r < k % s_count; ++r) ++quota[(start + r) % s_count];
  std::size_t si = 0;
  for (auto& [subject, members] : by_subject) {
    const std::size_t q = quota[si++];
    if (members.size() < q) {
      for (std::size_t i = 0; i < q; ++i) out.push_back(members[rng.index(members.size())]);
    } else {
      for (std::size_t i = 0; i < q; ++i) {
        std::swap(members[i], members[i + rng.index(members.size() - i)]);
        out.push_back(members[i]);
      }
    }
  }
  return out;
}

std::vector<std::size_t> aser_retrieve(const MemoryBuffer& buffer, std::size_t k, const FeatureFn& features,
                                       const Tensor& batch_features, std::span<const int> batch_labels,
                                       const AserConfig& cfg, Rng& rng) {
  const std::size_t n = buffer.size();
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});
  if (n <= k) return all;
  rng.shuffle(all.begin(), all.end());
  const std::size_t n_eval = std::min(cfg.max_eval_points, n - k);
  const std::size_t n_cand = std::min(std::max(cfg.max_candidates, k), n - n_eval);
  std::vector<data::SamplePtr> samples;
  std::vector<int> eval_labels, cand_labels;
  std::vector<std::size_t> cand_index, tie_keys;
  for (std::size_t i = 0; i < n_eval + n_cand; ++i) {
    const auto& e = buffer.entry(all[i]);
    samples.push_back(e.sample);
    if (i < n_eval) {
      eval_labels.push_back(e.sample->label);
    } else {
      cand_labels.push_back(e.sample->label);
      cand_index.push_back(all[i]);
      tie_keys.push_back(static_cast<std::size_t>(e.insertion_index));
    }
  }
  const Tensor f = features(samples);
  const std::size_t d = f.dim(1);
  auto rows = [&](std::size_t begin, std::size_t count) {
    return Tensor({count, d}, std::vector<double>(f.storage().begin() + static_cast<std::ptrdiff_t>(begin * d),
                                                  f.storage().begin() + static_cast<std::ptrdiff_t>((begin + count) * d)));
  };
  const auto scores = aser_scores(rows(n_eval, n_cand), cand_labels, rows(0, n_eval), eval_labels, batch_features,
                                  batch_labels, cfg.neighbours, cfg.mean_variant);
  std::vector<std::size_t> out;
  for (auto r : top_k(scores, tie_keys, k)) out.push_back(cand_index[r]);
  return out;
}

void save_buffer_snapshot(const std::filesystem::path& path, const MemoryBuffer& buffer,
                          const std::vector<std::string>& policies) {
  Archive a;
  a.meta = {{"kind", "tscil-buffer"},
            {"M", buffer.capacity()},
            {"seen_count", buffer.seen_count()},
            {"policies", policies},
            {"size", buffer.size()}};
  const std::size_t n = buffer.size();
  std::vector<std::int32_t> labels, subjects;
  std::vector<std::int64_t> insertion;
  std::vector<double> scores;
  std::vector<float> values;
  std::vector<std::int32_t> logit_width;
  std::vector<double> logits;
  std::size_t c = 0, l = 0;
  for (const auto& e : buffer.entries()) {
    c = e.sample->channels;
    l = e.sample->length;
    labels.push_back(e.sample->label);
    subjects.push_back(e.sample->subject.value_or(-1));
    insertion.push_back(static_cast<std::int64_t>(e.insertion_index));
    scores.push_back(e.score.value_or(std::nan("")));
    values.insert(values.end(), e.sample->values.begin(), e.sample->values.end());
    logit_width.push_back(e.stored_logits ? static_cast<std::int32_t>(e.stored_logits->size()) : 0);
    if (e.stored_logits) logits.insert(logits.end(), e.stored_logits->begin(), e.stored_logits->end());
  }
  a.arrays["values"] = ArchiveArray::from_f32({n, c, l}, values);
  a.arrays["labels"] = ArchiveArray::from_i32({n}, labels);
  a.arrays["subjects"] = ArchiveArray::from_i32({n}, subjects);
  a.arrays["insertion_index"] = ArchiveArray::from_i64({n}, insertion);
  a.arrays["scores"] = ArchiveArray::from_f64({n}, scores);
  a.arrays["logit_width"] = ArchiveArray::from_i32({n}, logit_width);
  a.arrays["logits"] = ArchiveArray::from_f64({logits.size()}, logits);
  write_archive(path, a);
}

}  // namespace tscil::memory
