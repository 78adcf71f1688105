#include "tscil/methods/generative.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "tscil/core/errors.hpp"
#include "tscil/core/optim.hpp"
#include "tscil/eval/plots.hpp"

namespace tscil::methods {

double kl_closed_form(double mu, double sigma) {
  return 0.5 * (mu * mu + sigma * sigma - 1.0 - 2.0 * std::log(sigma));
}

VaeLoss vae_loss_terms(const ag::Var& recon, const Tensor& target, const ag::Var& mu, const ag::Var& logvar,
                       double beta) {
  if (!recon->value.same_shape(target)) throw ContractError("vae_loss: reconstruction shape mismatch");
  const double n = static_cast<double>(target.dim(0));
  VaeLoss out;
  out.reconstruction = ag::scale(ag::sum(ag::square(ag::sub(recon, ag::constant(target)))), 1.0 / n);
  const ag::Var inner = ag::sub(ag::add(ag::square(mu), ag::exp(logvar)),
                                ag::add(logvar, ag::constant(Tensor(logvar->value.shape(), 1.0))));
  out.kl = ag::scale(ag::sum(inner), 0.5 / n);
  out.total = ag::add(out.reconstruction, ag::scale(out.kl, beta));
  return out;
}

namespace {

Tensor uniform(std::vector<std::size_t> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

Vae Vae::build(std::size_t channels, std::size_t length, const VaeConfig& config, std::uint64_t seed) {
  if (config.widths.empty() || config.latent == 0) throw ConfigError("vae: widths and latent size must be non-empty");
  Vae v;
  v.config_ = config;
  v.channels_ = channels;
  v.length_ = length;
  v.lengths_ = {length};
  for (std::size_t i = 0; i < config.widths.size(); ++i) v.lengths_.push_back((v.lengths_.back() + 1) / 2);
  Rng rng(seed, "generator/init");
  std::size_t cin = channels;
  for (std::size_t w : config.widths) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * 3));
    v.enc_w_.push_back(ag::parameter(uniform({w, cin, 3}, bound, rng)));
    v.enc_b_.push_back(ag::parameter(uniform({w}, bound, rng)));
    cin = w;
  }
  const std::size_t flat = config.widths.back() * v.lengths_.back();
  const double fb = 1.0 / std::sqrt(static_cast<double>(flat));
  v.mu_w_ = ag::parameter(uniform({config.latent, flat}, fb, rng));
  v.mu_b_ = ag::parameter(uniform({config.latent}, fb, rng));
  v.lv_w_ = ag::parameter(uniform({config.latent, flat}, fb, rng));
  v.lv_b_ = ag::parameter(uniform({config.latent}, fb, rng));
  const double lb = 1.0 / std::sqrt(static_cast<double>(config.latent));
  v.dec_in_w_ = ag::parameter(uniform({flat, config.latent}, lb, rng));
  v.dec_in_b_ = ag::parameter(uniform({flat}, lb, rng));
  for (std::size_t i = config.widths.size(); i-- > 0;) {
    const std::size_t in = config.widths[i], out = i > 0 ? config.widths[i - 1] : channels;
    const double bound = 1.0 / std::sqrt(static_cast<double>(out * 3));
    v.dec_w_.push_back(ag::parameter(uniform({in, out, 3}, bound, rng)));
    v.dec_b_.push_back(ag::parameter(uniform({out}, bound, rng)));
  }
  v.mean_.assign(channels, 0.0);
  v.std_.assign(channels, 1.0);
  return v;
}

Vae::Output Vae::forward(const Tensor& x, Rng& rng, bool sample) const {
  ag::Var h = ag::constant(x);
  for (std::size_t i = 0; i < enc_w_.size(); ++i) h = ag::relu(ag::conv1d(h, enc_w_[i], enc_b_[i], 2, 1));
  const std::size_t n = x.dim(0);
  h = ag::reshape(h, {n, h->value.size() / n});
  Output out;
  out.mu = ag::linear(h, mu_w_, mu_b_);
  out.logvar = ag::linear(h, lv_w_, lv_b_);
  ag::Var z = out.mu;
  if (sample) {
    Tensor eps(out.mu->value.shape());
    for (double& e : eps.values()) e = rng.normal();
    z = ag::add(out.mu, ag::mul(ag::exp(ag::scale(out.logvar, 0.5)), ag::constant(std::move(eps))));
  }
  out.recon = decode(z);
  return out;
}

ag::Var Vae::decode(const ag::Var& z) const {
  const std::size_t n = z->value.dim(0), depth = config_.widths.size();
  ag::Var h = ag::relu(ag::linear(z, dec_in_w_, dec_in_b_));
  h = ag::reshape(h, {n, config_.widths.back(), lengths_.back()});
  for (std::size_t k = 0; k < depth; ++k) {
    const std::size_t level = depth - k;  // produces lengths_[level - 1] from lengths_[level]
    const std::size_t out_pad = lengths_[level - 1] - (2 * lengths_[level] - 1);
    h = ag::conv_transpose1d(h, dec_w_[k], dec_b_[k], 2, 1, out_pad);
    if (k + 1 < depth) h = ag::relu(h);
  }
  return h;
}

VaeLoss Vae::loss(const Tensor& raw_batch, Rng& rng) const {
  const Tensor x = standardise(raw_batch);
  const auto out = forward(x, rng, true);
  return vae_loss_terms(out.recon, x, out.mu, out.logvar, config_.beta);
}

std::vector<data::SamplePtr> Vae::generate(std::size_t n, Rng& rng) const {
  std::vector<data::SamplePtr> out;
  ag::NoGradGuard guard;
  for (std::size_t start = 0; start < n; start += 256) {
    const std::size_t m = std::min<std::size_t>(256, n - start);
    Tensor z({m, config_.latent});
    for (double& v : z.values()) v = rng.normal();
    const Tensor x = destandardise(decode(ag::constant(std::move(z)))->value);
    for (std::size_t i = 0; i < m; ++i) {
      auto s = std::make_shared<data::TimeSeriesSample>();
      s->channels = channels_;
      s->length = length_;
      s->label = -1;
      s->values.resize(channels_ * length_);
      for (std::size_t e = 0; e < s->values.size(); ++e) s->values[e] = static_cast<float>(x[i * s->values.size() + e]);
      out.push_back(std::move(s));
    }
  }
  return out;
}

void Vae::set_standardisation(const std::vector<data::SamplePtr>& samples) {
  std::vector<double> sum(channels_, 0.0), sq(channels_, 0.0);
  double count = 0.0;
  for (const auto& s : samples) {
    for (std::size_t c = 0; c < channels_; ++c) {
      for (std::size_t t = 0; t < length_; ++t) {
        const double v = s->at(c, t);
        sum[c] += v;
        sq[c] += v * v;
      }
    }
    count += static_cast<double>(length_);
  }
  if (count == 0.0) return;
  for (std::size_t c = 0; c < channels_; ++c) {
    mean_[c] = sum[c] / count;
    std_[c] = std::sqrt(std::max(sq[c] / count - mean_[c] * mean_[c], 0.0)) + 1e-6;
  }
}

Tensor Vae::standardise(const Tensor& x) const {
  Tensor out = x;
  const std::size_t n = x.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels_; ++c) {
      for (std::size_t t = 0; t < length_; ++t) out.at(i, c, t) = (x.at(i, c, t) - mean_[c]) / std_[c];
    }
  }
  return out;
}

Tensor Vae::destandardise(const Tensor& x) const {
  Tensor out = x;
  const std::size_t n = x.dim(0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < channels_; ++c) {
      for (std::size_t t = 0; t < length_; ++t) out.at(i, c, t) = x.at(i, c, t) * std_[c] + mean_[c];
    }
  }
  return out;
}

int Vae::fit(const std::vector<data::SamplePtr>& train, const std::vector<data::SamplePtr>& val, const Vae* replay,
             Rng& rng, train::RunLog* log, std::size_t task) {
  if (train.empty()) throw ContractError("vae fit: no training data");
  if (!trained_) set_standardisation(train);
  const auto params = parameters();
  Adam opt(params, config_.learning_rate);
  const std::size_t n_real = replay ? std::max<std::size_t>(1, config_.batch_size / 2) : config_.batch_size;
  std::vector<std::size_t> order(train.size());
  double best = std::numeric_limits<double>::infinity();
  std::vector<Tensor> best_values;
  int since_best = 0, epoch = 0;
  for (epoch = 1; epoch <= config_.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    rng.shuffle(order.begin(), order.end());
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += n_real) {
      std::vector<data::SamplePtr> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + n_real); ++i) batch.push_back(train[order[i]]);
      if (replay) {
        auto fake = replay->generate(batch.size(), rng);
        batch.insert(batch.end(), fake.begin(), fake.end());
      }
      const auto l = loss(data::to_batch(batch), rng);
      const double value = l.total->value[0];
      if (!std::isfinite(value)) {
        throw TrainingError("non-finite generator loss at task " + std::to_string(task) + ", epoch " +
                            std::to_string(epoch) + " (lr " + std::to_string(config_.learning_rate) + ")");
      }
      opt.zero_grad();
      ag::backward(l.total);
      opt.step();
      epoch_loss += value;
      ++steps;
    }
    double monitored = epoch_loss / static_cast<double>(steps);
    if (!val.empty()) {
      ag::NoGradGuard guard;
      const Tensor x = standardise(data::to_batch(val));
      const auto out = forward(x, rng, false);
      monitored = vae_loss_terms(out.recon, x, out.mu, out.logvar, config_.beta).total->value[0];
    }
    if (log) {
      log->event({{"event", "generator_epoch"}, {"task", task}, {"epoch", epoch},
                  {"train_loss", epoch_loss / static_cast<double>(steps)}, {"val_loss", monitored}});
    }
    if (monitored < best) {
      best = monitored;
      since_best = 0;
      best_values.clear();
      for (const auto& p : params) best_values.push_back(p->value);
    } else if (++since_best >= config_.patience) {
      break;
    }
  }
  for (std::size_t i = 0; i < best_values.size(); ++i) params[i]->value = best_values[i];
  trained_ = true;
  return std::min(epoch, config_.epochs);
}

std::vector<ag::Var> Vae::parameters() const {
  std::vector<ag::Var> p;
  for (std::size_t i = 0; i < enc_w_.size(); ++i) p.insert(p.end(), {enc_w_[i], enc_b_[i]});
  p.insert(p.end(), {mu_w_, mu_b_, lv_w_, lv_b_, dec_in_w_, dec_in_b_});
  for (std::size_t i = 0; i < dec_w_.size(); ++i) p.insert(p.end(), {dec_w_[i], dec_b_[i]});
  return p;
}

Vae Vae::clone() const {
  Vae v = *this;
  auto copy = [](std::vector<ag::Var>& vs) {
    for (auto& x : vs) x = ag::parameter(x->value);
  };
  copy(v.enc_w_);
  copy(v.enc_b_);
  copy(v.dec_w_);
  copy(v.dec_b_);
  for (ag::Var* x : {&v.mu_w_, &v.mu_b_, &v.lv_w_, &v.lv_b_, &v.dec_in_w_, &v.dec_in_b_}) *x = ag::parameter((*x)->value);
  return v;
}

std::vector<data::SamplePtr> pseudo_label(model::Model& teacher, const std::vector<data::SamplePtr>& samples) {
  std::vector<data::SamplePtr> out;
  if (samples.empty()) return out;
  const Tensor logits = teacher.embed(data::to_batch(samples)).second;
  const std::size_t k = logits.dim(1);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    auto s = std::make_shared<data::TimeSeriesSample>(*samples[i]);
    s->label = teacher.known_classes()[best];
    out.push_back(std::move(s));
  }
  return out;
}

GrPlugin::GrPlugin(GrParams params, std::size_t channels, std::size_t length)
    : params_(std::move(params)),
      generator_(Vae::build(channels, length, params_.vae, params_.seed)),
      replay_rng_(params_.seed, "generator/replay"),
      fit_rng_(params_.seed, "generator/fit") {}

std::size_t GrPlugin::replay_slots(std::size_t batch_size) const {
  return frozen_generator_ ? batch_size / 2 : 0;
}

void GrPlugin::augment_batch(model::Model&, const data::Task& task, train::StepBatch& batch) {
  if (!frozen_generator_) return;
  auto fake = pseudo_label(*frozen_learner_, frozen_generator_->generate(batch.n_new, replay_rng_));
  batch.samples.insert(batch.samples.end(), fake.begin(), fake.end());
  audit_.emplace_back(task.index, *frozen_task_);
}

void GrPlugin::end_task(model::Model& model, const data::Task& task, const train::TrainConfig&) {
  generator_.fit(task.train, task.val, frozen_generator_ ? &*frozen_generator_ : nullptr, fit_rng_, log_, task.index);
  frozen_learner_ = model.clone();
  frozen_generator_ = generator_.clone();
  frozen_task_ = task.index;
  if (params_.sheet_dir) {
    Rng sheet_rng(params_.seed, "generator/sheet/" + std::to_string(task.index));
    std::vector<data::SamplePtr> real = task.train;
    write_sample_sheet(*params_.sheet_dir / ("gr_samples_task" + std::to_string(task.index + 1) + ".svg"), model,
                       generator_, real, params_.sheet_per_class, sheet_rng);
  }
}

void write_sample_sheet(const std::filesystem::path& path, model::Model& labeller, const Vae& generator,
                        const std::vector<data::SamplePtr>& real, std::size_t per_class, Rng& rng) {
  std::map<int, std::vector<data::SamplePtr>> real_by, fake_by;
  for (const auto& s : real) {
    if (real_by[s->label].size() < per_class) real_by[s->label].push_back(s);
  }
  const auto fake = pseudo_label(labeller, generator.generate(per_class * labeller.known_classes().size() * 4, rng));
  for (const auto& s : fake) {
    if (fake_by[s->label].size() < per_class) fake_by[s->label].push_back(s);
  }
  std::vector<eval::SparkCell> cells;
  auto channel0 = [](const data::SamplePtr& s) {
    return std::vector<double>(s->values.begin(), s->values.begin() + static_cast<std::ptrdiff_t>(s->length));
  };
  for (const auto& [label, rs] : real_by) {
    for (std::size_t i = 0; i < per_class; ++i) {
      cells.push_back(i < rs.size() ? eval::SparkCell{"real, class " + std::to_string(label), channel0(rs[i])}
                                    : eval::SparkCell{"(none)", {}});
    }
    const auto& fs = fake_by[label];
    for (std::size_t i = 0; i < per_class; ++i) {
      cells.push_back(i < fs.size() ? eval::SparkCell{"generated, class " + std::to_string(label), channel0(fs[i])}
                                    : eval::SparkCell{"(no sample)", {}});
    }
  }
  eval::write_svg(path, eval::render_grid_svg("Real (left) vs generated (right) samples, channel 0", cells, 2 * per_class));
}

}  // namespace tscil::methods
