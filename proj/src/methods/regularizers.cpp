#include "tscil/methods/regularizers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tscil/core/errors.hpp"

namespace tscil::methods {

ag::Var lwf_loss(const ag::Var& student_old_logits, const Tensor& teacher_logits, double temperature) {
  if (!(temperature > 0.0)) throw ContractError("lwf_loss: temperature must be positive");
  if (!student_old_logits->value.same_shape(teacher_logits)) {
    throw ContractError("lwf_loss: student slice " + student_old_logits->value.shape_string() +
                        " does not match teacher logits " + teacher_logits.shape_string());
  }
  const Tensor p = ag::softmax_rows(teacher_logits, temperature);
  return ag::scale(ag::soft_cross_entropy(student_old_logits, p, temperature), temperature * temperature);
}

// MAS ------------------------------------------------------------------------

void ImportanceMap::align(const std::vector<ag::Var>& params) {
  if (empty()) return;
  if (params.size() != omega.size()) throw ContractError("importance map: parameter count changed");
  for (std::size_t p = 0; p < params.size(); ++p) {
    const Tensor& cur = params[p]->value;
    if (cur.same_shape(omega[p])) continue;
    // Only growth along the leading dimension (new head rows) is supported.
    const bool grows = cur.rank() == omega[p].rank() && cur.rank() >= 1 && cur.dim(0) >= omega[p].dim(0) &&
                       std::equal(cur.shape().begin() + 1, cur.shape().end(), omega[p].shape().begin() + 1);
    if (!grows) throw ContractError("importance map: parameter " + std::to_string(p) + " changed shape");
    Tensor om(cur.shape(), 0.0);
    Tensor an = cur;
    std::copy(omega[p].storage().begin(), omega[p].storage().end(), om.storage().begin());
    std::copy(anchor[p].storage().begin(), anchor[p].storage().end(), an.storage().begin());
    omega[p] = std::move(om);
    anchor[p] = std::move(an);
  }
}

std::vector<Tensor> mas_increment(const std::vector<ag::Var>& params, std::size_t n_samples,
                                  const std::function<ag::Var(std::size_t)>& output) {
  std::vector<Tensor> inc;
  for (const auto& p : params) inc.emplace_back(p->value.shape(), 0.0);
  if (n_samples == 0) return inc;
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (const auto& p : params) p->zero_grad();
    ag::backward(ag::sum(ag::square(output(i))));
    for (std::size_t k = 0; k < params.size(); ++k) {
      if (params[k]->grad.empty()) continue;
      for (std::size_t e = 0; e < inc[k].size(); ++e) inc[k][e] += std::abs(params[k]->grad[e]);
    }
  }
  for (const auto& p : params) p->zero_grad();
  for (auto& t : inc) {
    for (double& v : t.values()) v /= static_cast<double>(n_samples);
  }
  return inc;
}

void mas_accumulate(ImportanceMap& map, const std::vector<ag::Var>& params, const std::vector<Tensor>& increment) {
  map.align(params);
  if (map.empty()) {
    map.omega = increment;
  } else {
    const double t = static_cast<double>(map.tasks);
    for (std::size_t p = 0; p < params.size(); ++p) {
      if (!map.omega[p].same_shape(increment[p])) throw ContractError("mas_accumulate: shape mismatch");
      for (std::size_t e = 0; e < increment[p].size(); ++e) {
        map.omega[p][e] = (map.omega[p][e] * t + increment[p][e]) / (t + 1.0);
      }
    }
  }
  map.anchor.clear();
  for (const auto& p : params) map.anchor.push_back(p->value);
  ++map.tasks;
}

void mas_accumulate(ImportanceMap& map, model::Model& model, const std::vector<data::SamplePtr>& samples,
                    std::size_t max_samples) {
  const std::size_t n = std::min(samples.size(), max_samples);
  const auto params = model.parameters();
  const auto inc = mas_increment(params, n, [&](std::size_t i) {
    return model.forward(data::to_batch(std::span<const data::SamplePtr>(&samples[i], 1)), false).logits;
  });
  mas_accumulate(map, params, inc);
}

ag::Var mas_penalty(const std::vector<ag::Var>& params, const ImportanceMap& map, double lambda) {
  if (map.empty()) return ag::constant(Tensor::scalar(0.0));
  if (params.size() != map.omega.size()) throw ContractError("mas_penalty: parameter count mismatch");
  ag::Var total;
  for (std::size_t p = 0; p < params.size(); ++p) {
    if (!params[p]->value.same_shape(map.omega[p])) {
      throw ContractError("mas_penalty: parameter " + std::to_string(p) + " has shape " +
                          params[p]->value.shape_string() + " but importance has " + map.omega[p].shape_string());
    }
    auto term = ag::sum(ag::mul(ag::constant(map.omega[p]), ag::square(ag::sub(params[p], ag::constant(map.anchor[p])))));
    total = total ? ag::add(total, term) : term;
  }
  return ag::scale(total, lambda);
}

// Soft-DTW -------------------------------------------------------------------

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Tensor cost_matrix(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
    throw ContractError("soft_dtw: expects [n x d] and [m x d] with equal d");
  }
  if (a.dim(0) == 0 || b.dim(0) == 0) throw ContractError("soft_dtw: empty sequence");
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
  Tensor c({n, m});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a.at(i, k) - b.at(j, k);
        s += diff * diff;
      }
      c.at(i, j) = s;
    }
  }
  return c;
}

double softmin3(double x, double y, double z, double gamma) {
  const double mn = std::min({x, y, z});
  if (mn == kInf) return kInf;
  const double s = std::exp(-(x - mn) / gamma) + std::exp(-(y - mn) / gamma) + std::exp(-(z - mn) / gamma);
  return mn - gamma * std::log(s);
}

// R has shape (n+2) x (m+2); R[0][0] = 0 and the first row/column are +inf.
std::vector<double> forward_table(const Tensor& cost, double gamma, std::size_t n, std::size_t m) {
  const std::size_t w = m + 2;
  std::vector<double> r((n + 2) * w, kInf);
  r[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      r[i * w + j] = cost.at(i - 1, j - 1) +
                     softmin3(r[(i - 1) * w + j - 1], r[(i - 1) * w + j], r[i * w + j - 1], gamma);
    }
  }
  return r;
}

}  // namespace

double soft_dtw(const Tensor& a, const Tensor& b, double gamma) {
  if (!(gamma > 0.0)) throw ContractError("soft_dtw: gamma must be positive");
  const Tensor c = cost_matrix(a, b);
  const std::size_t n = a.dim(0), m = b.dim(0);
  return forward_table(c, gamma, n, m)[n * (m + 2) + m];
}

SoftDtwGrad soft_dtw_grad(const Tensor& a, const Tensor& b, double gamma) {
  if (!(gamma > 0.0)) throw ContractError("soft_dtw: gamma must be positive");
  const Tensor c = cost_matrix(a, b);
  const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1), w = m + 2;
  auto r = forward_table(c, gamma, n, m);
  SoftDtwGrad out;
  out.value = r[n * w + m];

  // Expected alignment matrix E (Cuturi & Blondel backward recursion).
  std::vector<double> dpad((n + 2) * w, 0.0);
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) dpad[i * w + j] = c.at(i - 1, j - 1);
  }
  for (std::size_t i = 1; i <= n; ++i) r[i * w + m + 1] = -kInf;
  for (std::size_t j = 1; j <= m; ++j) r[(n + 1) * w + j] = -kInf;
  r[(n + 1) * w + m + 1] = r[n * w + m];
  std::vector<double> e((n + 2) * w, 0.0);
  e[(n + 1) * w + m + 1] = 1.0;
  for (std::size_t j = m; j >= 1; --j) {
    for (std::size_t i = n; i >= 1; --i) {
      const double rij = r[i * w + j];
      const double wa = std::exp((r[(i + 1) * w + j] - rij - dpad[(i + 1) * w + j]) / gamma);
      const double wb = std::exp((r[i * w + j + 1] - rij - dpad[i * w + j + 1]) / gamma);
      const double wc = std::exp((r[(i + 1) * w + j + 1] - rij - dpad[(i + 1) * w + j + 1]) / gamma);
      e[i * w + j] = e[(i + 1) * w + j] * wa + e[i * w + j + 1] * wb + e[(i + 1) * w + j + 1] * wc;
    }
  }
  out.grad_a = Tensor({n, d}, 0.0);
  out.grad_b = Tensor({m, d}, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      const double eij = e[(i + 1) * w + j + 1];
      if (eij == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) {
        const double g = 2.0 * eij * (a.at(i, k) - b.at(j, k));
        out.grad_a.at(i, k) += g;
        out.grad_b.at(j, k) -= g;
      }
    }
  }
  return out;
}

double dtw(const Tensor& a, const Tensor& b) {
  const Tensor c = cost_matrix(a, b);
  const std::size_t n = a.dim(0), m = b.dim(0), w = m + 1;
  std::vector<double> r((n + 1) * w, kInf);
  r[0] = 0.0;
  for (std::size_t i = 1; i <= n; ++i) {
    for (std::size_t j = 1; j <= m; ++j) {
      r[i * w + j] = c.at(i - 1, j - 1) + std::min({r[(i - 1) * w + j - 1], r[(i - 1) * w + j], r[i * w + j - 1]});
    }
  }
  return r[n * w + m];
}

ag::Var soft_dtw(const ag::Var& a, const ag::Var& b, double gamma) {
  auto g = soft_dtw_grad(a->value, b->value, gamma);
  const double value = g.value;
  return ag::make_node(Tensor::scalar(value), {a, b}, [a, b, g = std::move(g)](ag::Node& self) {
    const double up = self.grad[0];
    if (a->requires_grad) {
      auto& ga = a->grad_ref();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += up * g.grad_a[i];
    }
    if (b->requires_grad) {
      auto& gb = b->grad_ref();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += up * g.grad_b[i];
    }
  });
}

namespace {

Tensor time_major(const Tensor& maps, std::size_t i) {
  const std::size_t c = maps.dim(1), len = maps.dim(2);
  Tensor a({len, c});
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t t = 0; t < len; ++t) a.at(t, ch) = maps.at(i, ch, t);
  }
  return a;
}

// Batch mean of soft_dtw(student_i, teacher_i), minus the self-similarity
// terms when `divergence` is set.
ag::Var soft_dtw_batch(const ag::Var& student, const Tensor& teacher, double gamma, bool divergence) {
  const Tensor& s = student->value;
  if (s.rank() != 3 || !s.same_shape(teacher)) {
    throw ContractError("soft_dtw_maps: maps must share shape [N x C x L]");
  }
  const std::size_t n = s.dim(0), c = s.dim(1), len = s.dim(2);
  Tensor grad(s.shape(), 0.0);
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const Tensor a = time_major(s, i), b = time_major(teacher, i);
    auto g = soft_dtw_grad(a, b, gamma);
    total += g.value;
    if (divergence) {
      // d/da soft_dtw(a, a) = 2 * grad_a by symmetry of the cost.
      const auto self = soft_dtw_grad(a, a, gamma);
      total -= 0.5 * (self.value + soft_dtw(b, b, gamma));
      for (std::size_t k = 0; k < g.grad_a.size(); ++k) g.grad_a[k] -= self.grad_a[k];
    }
    for (std::size_t ch = 0; ch < c; ++ch) {
      for (std::size_t t = 0; t < len; ++t) grad.at(i, ch, t) = g.grad_a.at(t, ch) / static_cast<double>(n);
    }
  }
  return ag::make_node(Tensor::scalar(total / static_cast<double>(n)), {student},
                       [student, grad = std::move(grad)](ag::Node& self) {
                         auto& g = student->grad_ref();
                         for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0] * grad[i];
                       });
}

}  // namespace

ag::Var soft_dtw_maps(const ag::Var& student, const Tensor& teacher, double gamma) {
  return soft_dtw_batch(student, teacher, gamma, false);
}

ag::Var soft_dtw_divergence_maps(const ag::Var& student, const Tensor& teacher, double gamma) {
  return soft_dtw_batch(student, teacher, gamma, true);
}

ag::Var channel_normalize(const ag::Var& maps, double eps) {
  const Tensor& x = maps->value;
  if (x.rank() != 3) throw ContractError("channel_normalize: maps must be [N x C x L]");
  const std::size_t n = x.dim(0), c = x.dim(1), len = x.dim(2);
  Tensor y(x.shape()), norms({n, len});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < len; ++t) {
      double sq = 0.0;
      for (std::size_t ch = 0; ch < c; ++ch) sq += x.at(i, ch, t) * x.at(i, ch, t);
      const double norm = std::max(std::sqrt(sq), eps);
      norms.at(i, t) = norm;
      for (std::size_t ch = 0; ch < c; ++ch) y.at(i, ch, t) = x.at(i, ch, t) / norm;
    }
  }
  Tensor y_copy = y;
  return ag::make_node(std::move(y), {maps}, [maps, y = std::move(y_copy), norms = std::move(norms)](ag::Node& self) {
    auto& g = maps->grad_ref();
    const std::size_t n = y.dim(0), c = y.dim(1), len = y.dim(2);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < len; ++t) {
        double dot = 0.0;
        for (std::size_t ch = 0; ch < c; ++ch) dot += y.at(i, ch, t) * self.grad[(i * c + ch) * len + t];
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t k = (i * c + ch) * len + t;
          g[k] += (self.grad[k] - y.at(i, ch, t) * dot) / norms.at(i, t);
        }
      }
    }
  });
}

ag::Var dt2w_loss(const model::ForwardResult& student, const model::ForwardResult& teacher, const Dt2wTerms& terms) {
  const std::size_t blocks = student.feature_maps.size();
  if (teacher.feature_maps.size() != blocks || blocks == 0) throw ContractError("dt2w_loss: block count mismatch");
  ag::Var kd;
  for (std::size_t b = terms.all_blocks ? 0 : blocks - 1; b < blocks; ++b) {
    const ag::Var s = channel_normalize(student.feature_maps[b]);
    const Tensor t = channel_normalize(ag::constant(teacher.feature_maps[b]->value))->value;
    const ag::Var term = soft_dtw_divergence_maps(s, t, terms.gamma);
    kd = kd ? ag::add(kd, term) : term;
  }
  const Tensor& tl = teacher.logits->value;
  const ag::Var lwf = lwf_loss(ag::slice_cols(student.logits, 0, tl.dim(1)), tl, terms.temperature);
  return ag::add(ag::scale(kd, terms.lambda_kd), ag::scale(lwf, terms.lambda_lwf));
}

// Prototypes -------------------------------------------------------------------

void PrototypeSet::add_from(const Tensor& features, const std::vector<int>& labels) {
  const std::size_t d = features.dim(1);
  std::vector<int> uniq(labels.begin(), labels.end());
  std::sort(uniq.begin(), uniq.end());
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  for (int c : uniq) {
    std::vector<double> mu(d, 0.0), sq(d, 0.0);
    std::size_t cnt = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != c) continue;
      ++cnt;
      for (std::size_t j = 0; j < d; ++j) mu[j] += features.at(i, j);
    }
    for (double& v : mu) v /= static_cast<double>(cnt);
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] != c) continue;
      for (std::size_t j = 0; j < d; ++j) sq[j] += (features.at(i, j) - mu[j]) * (features.at(i, j) - mu[j]);
    }
    double var = 0.0;
    for (double v : sq) var += v / static_cast<double>(cnt);
    auto it = std::find(classes.begin(), classes.end(), c);
    const std::size_t k = it == classes.end() ? classes.size() : static_cast<std::size_t>(it - classes.begin());
    if (it == classes.end()) {
      classes.push_back(c);
      means.emplace_back();
      radius.push_back(0.0);
    }
    means[k] = mu;
    radius[k] = std::sqrt(var / static_cast<double>(d));
  }
}

std::pair<Tensor, std::vector<int>> sample_prototypes(const PrototypeSet& set, std::size_t batch_size, Rng& rng) {
  if (set.empty()) return {Tensor({0, 0}), {}};
  const std::size_t k = set.classes.size(), d = set.means.front().size();
  Tensor f({batch_size, d});
  std::vector<int> labels;
  std::size_t row = 0;
  for (std::size_t c = 0; c < k; ++c) {
    const std::size_t count = batch_size / k + (c < batch_size % k ? 1 : 0);
    for (std::size_t r = 0; r < count; ++r, ++row) {
      for (std::size_t j = 0; j < d; ++j) f.at(row, j) = set.means[c][j] + set.radius[c] * rng.normal();
      labels.push_back(set.classes[c]);
    }
  }
  return {std::move(f), std::move(labels)};
}

ag::Var prototype_augment(const PrototypeSet& set, const model::Model& model, std::size_t batch_size, Rng& rng) {
  if (set.empty() || batch_size == 0) return ag::constant(Tensor::scalar(0.0));
  auto [features, labels] = sample_prototypes(set, batch_size, rng);
  model::ForwardResult out;
  out.logits = model.head_logits(ag::constant(std::move(features)));
  return model.training_loss(out, model.targets(labels));
}

// Plugins ----------------------------------------------------------------------

namespace {

model::ForwardResult teacher_forward(model::Model& teacher, const Tensor& x) {
  ag::NoGradGuard guard;
  return teacher.forward(x, false);
}

}  // namespace

ag::Var LwfPlugin::augment_loss(const train::StepContext& ctx) {
  if (!teacher_) return nullptr;
  const Tensor tl = teacher_forward(*teacher_, ctx.inputs).logits->value;
  return ag::scale(lwf_loss(ag::slice_cols(ctx.output.logits, 0, tl.dim(1)), tl, p_.temperature), p_.lambda);
}

void LwfPlugin::end_task(model::Model& model, const data::Task&, const train::TrainConfig&) {
  teacher_ = model.clone();
}

ag::Var MasPlugin::augment_loss(const train::StepContext& ctx) {
  if (map_.empty()) return nullptr;
  const auto params = ctx.model.parameters();
  map_.align(params);
  return mas_penalty(params, map_, p_.lambda);
}

void MasPlugin::end_task(model::Model& model, const data::Task& task, const train::TrainConfig&) {
  mas_accumulate(map_, model, task.train, p_.max_samples);
}

Dt2wPlugin::Dt2wPlugin(Dt2wParams p) : p_(p), rng_(p.seed, "dt2w/prototypes") {}

ag::Var Dt2wPlugin::augment_loss(const train::StepContext& ctx) {
  if (!teacher_) return nullptr;
  const auto t_out = teacher_forward(*teacher_, ctx.inputs);
  ag::Var loss = dt2w_loss(ctx.output, t_out, p_.terms);
  if (p_.prototype_weight > 0.0 && !prototypes_.empty()) {
    loss = ag::add(loss, ag::scale(prototype_augment(prototypes_, ctx.model, ctx.batch.samples.size(), rng_),
                                   p_.prototype_weight));
  }
  return loss;
}

void Dt2wPlugin::end_task(model::Model& model, const data::Task& task, const train::TrainConfig& cfg) {
  teacher_ = model.clone();
  const Tensor x = data::to_batch(task.train);
  auto [features, logits] = model.embed(x, cfg.eval_chunk);
  std::vector<int> labels;
  for (const auto& s : task.train) labels.push_back(s->label);
  prototypes_.add_from(features, labels);
}

}  // namespace tscil::methods
