#include "tscil/model/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "tscil/core/archive.hpp"
#include "tscil/core/errors.hpp"

namespace tscil::model {
namespace {

Tensor uniform_tensor(std::vector<std::size_t> shape, double bound, Rng& rng) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

}  // namespace

std::string to_string(InputNorm v) {
  switch (v) {
    case InputNorm::none: return "none";
    case InputNorm::layer: return "layer_norm";
    case InputNorm::instance: return "instance_norm";
  }
  return "?";
}

std::string to_string(InternalNorm v) { return v == InternalNorm::batch ? "batch_norm" : "layer_norm"; }

std::string to_string(HeadKind v) {
  switch (v) {
    case HeadKind::softmax_ce: return "softmax_ce";
    case HeadKind::sigmoid_bce: return "sigmoid_bce";
    case HeadKind::split_cosine: return "split_cosine";
    case HeadKind::ncm: return "ncm";
  }
  return "?";
}

InputNorm parse_input_norm(const std::string& s) {
  if (s == "none") return InputNorm::none;
  if (s == "layer_norm" || s == "LayerNorm" || s == "ln" || s == "LN") return InputNorm::layer;
  if (s == "instance_norm" || s == "InstanceNorm" || s == "in" || s == "IN") return InputNorm::instance;
  throw ConfigError("unknown input normalization '" + s + "' (none, layer_norm, instance_norm)");
}

InternalNorm parse_internal_norm(const std::string& s) {
  if (s == "batch_norm" || s == "BatchNorm" || s == "bn" || s == "BN") return InternalNorm::batch;
  if (s == "layer_norm" || s == "LayerNorm" || s == "ln" || s == "LN") return InternalNorm::layer;
  throw ConfigError("unknown internal normalization '" + s + "' (batch_norm, layer_norm)");
}

HeadKind parse_head_kind(const std::string& s) {
  if (s == "softmax_ce" || s == "softmax") return HeadKind::softmax_ce;
  if (s == "sigmoid_bce" || s == "bce") return HeadKind::sigmoid_bce;
  if (s == "split_cosine" || s == "cosine") return HeadKind::split_cosine;
  if (s == "ncm") return HeadKind::ncm;
  throw ConfigError("unknown classifier '" + s + "' (softmax_ce, sigmoid_bce, split_cosine, ncm)");
}

std::vector<std::size_t> BackboneConfig::block_lengths() const {
  std::vector<std::size_t> out;
  std::size_t len = length;
  for (std::size_t i = 0; i < filters.size(); ++i) {
    len = pool_size ? len / pool_size : len;
    out.push_back(len);
  }
  return out;
}

void BackboneConfig::validate() const {
  if (in_channels == 0 || length == 0) throw ConfigError("backbone: input shape must be non-empty");
  if (filters.empty()) throw ConfigError("backbone: at least one block is required");
  if (kernel_size == 0 || kernel_size % 2 == 0) throw ConfigError("backbone: kernel_size must be odd");
  if (pool_size == 0) throw ConfigError("backbone: pool_size must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("backbone: dropout must lie in [0, 1)");
  for (auto f : filters) {
    if (f == 0) throw ConfigError("backbone: filter counts must be positive");
  }
  const auto lens = block_lengths();
  if (lens.back() == 0) {
    throw ConfigError("backbone: input length " + std::to_string(length) + " pools to 0 after " +
                      std::to_string(filters.size()) + " blocks");
  }
  if (!(cosine_scale_init > 0.0)) throw ConfigError("backbone: cosine scale must be positive");
}

nlohmann::json BackboneConfig::to_json() const {
  return {{"in_channels", in_channels},   {"length", length},
          {"filters", filters},           {"kernel_size", kernel_size},
          {"pool_size", pool_size},       {"dropout", dropout},
          {"internal_norm", to_string(internal_norm)},
          {"input_norm", to_string(input_norm)},
          {"head", to_string(head)},      {"cosine_scale_init", cosine_scale_init},
          {"bn_momentum", bn_momentum}};
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.in_channels = j.at("in_channels");
  c.length = j.at("length");
  c.filters = j.at("filters").get<std::vector<std::size_t>>();
  c.kernel_size = j.at("kernel_size");
  c.pool_size = j.at("pool_size");
  c.dropout = j.at("dropout");
  c.internal_norm = parse_internal_norm(j.at("internal_norm"));
  c.input_norm = parse_input_norm(j.at("input_norm"));
  c.head = parse_head_kind(j.at("head"));
  c.cosine_scale_init = j.at("cosine_scale_init");
  c.bn_momentum = j.at("bn_momentum");
  return c;
}

BackboneConfig default_backbone(const std::string& dataset_id, std::size_t channels, std::size_t length) {
  BackboneConfig c;
  c.in_channels = channels;
  c.length = length;
  c.dropout = (dataset_id == "uci-har" || dataset_id == "uwave") ? 0.0 : 0.3;
  if (dataset_id == "uwave") c.input_norm = InputNorm::instance;
  else if (dataset_id == "wisdm") c.input_norm = InputNorm::none;
  else c.input_norm = InputNorm::layer;
  return c;
}

Tensor input_normalize(const Tensor& x, InputNorm mode, double eps) {
  if (mode == InputNorm::none) return x;
  if (x.rank() != 2 && x.rank() != 3) throw ContractError("input_normalize expects [C x L] or [N x C x L]");
  const std::size_t n = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t c = x.dim(x.rank() - 2), len = x.dim(x.rank() - 1);
  const std::size_t group = mode == InputNorm::layer ? c * len : len;
  Tensor out = x;
  for (std::size_t g = 0; g < n * c * len / group; ++g) {
    double* p = out.data() + g * group;
    double mean = 0.0;
    for (std::size_t i = 0; i < group; ++i) mean += p[i];
    mean /= static_cast<double>(group);
    double var = 0.0;
    for (std::size_t i = 0; i < group; ++i) var += (p[i] - mean) * (p[i] - mean);
    var /= static_cast<double>(group);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < group; ++i) p[i] = (p[i] - mean) * inv;
  }
  return out;
}

ag::Var head_loss(HeadKind kind, const ag::Var& logits, std::span<const std::size_t> targets,
                  std::vector<double>* per_sample) {
  switch (kind) {
    case HeadKind::softmax_ce:
    case HeadKind::split_cosine:
      return ag::cross_entropy(logits, targets, per_sample);
    case HeadKind::sigmoid_bce:
      return ag::bce_with_logits(logits, targets, per_sample);
    case HeadKind::ncm:
      break;
  }
  throw ContractError("the ncm classifier has no training loss; it classifies by prototypes");
}

int ncm_classify(std::span<const double> feature, const Tensor& prototypes,
                 const std::vector<int>& classes, const std::vector<bool>& ready) {
  int best = -1;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < classes.size(); ++k) {
    if (k >= ready.size() || !ready[k]) continue;
    double d = 0.0;
    for (std::size_t i = 0; i < feature.size(); ++i) {
      const double diff = feature[i] - prototypes.at(k, i);
      d += diff * diff;
    }
    if (d < best_d || (d == best_d && classes[k] < best)) {
      best_d = d;
      best = classes[k];
    }
  }
  if (best < 0) throw ContractError("ncm_classify: no prototypes available");
  return best;
}

// ---------------------------------------------------------------------------

Model Model::build(const BackboneConfig& config, const std::vector<int>& initial_classes,
                   std::uint64_t seed) {
  config.validate();
  Model m;
  m.config_ = config;
  m.seed_ = seed;
  m.dropout_rng_ = Rng(seed, "model/dropout");
  Rng init(seed, "model/init");
  std::size_t cin = config.in_channels;
  for (std::size_t f : config.filters) {
    Block b;
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * config.kernel_size));
    b.conv_w = ag::parameter(uniform_tensor({f, cin, config.kernel_size}, bound, init));
    b.conv_b = ag::parameter(uniform_tensor({f}, bound, init));
    b.norm_g = ag::parameter(Tensor({f}, 1.0));
    b.norm_b = ag::parameter(Tensor({f}, 0.0));
    b.stats.mean = Tensor({f}, 0.0);
    b.stats.var = Tensor({f}, 1.0);
    m.blocks_.push_back(std::move(b));
    cin = f;
  }
  const std::size_t d = config.embedding_dim();
  m.head_.kind = config.head;
  m.head_.weight = ag::parameter(Tensor({0, d}));
  if (config.head == HeadKind::split_cosine) {
    m.head_.log_eta = ag::parameter(Tensor::scalar(std::log(config.cosine_scale_init)));
  } else {
    m.head_.bias = ag::parameter(Tensor({0}));
  }
  if (config.head == HeadKind::ncm) m.head_.prototypes = Tensor({0, d});
  m.expand_head(initial_classes);
  return m;
}

ForwardResult Model::forward(const Tensor& x, bool training) {
  if (x.rank() != 3 || x.dim(1) != config_.in_channels || x.dim(2) != config_.length) {
    throw ContractError("model input must be [N x " + std::to_string(config_.in_channels) + " x " +
                        std::to_string(config_.length) + "], got " + x.shape_string());
  }
  return forward_var(ag::constant(input_normalize(x, config_.input_norm)), training);
}

ForwardResult Model::forward_var(const ag::Var& input, bool training) {
  ForwardResult out;
  ag::Var h = input;
  const std::size_t pad = config_.kernel_size / 2;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    Block& b = blocks_[i];
    h = ag::conv1d(h, b.conv_w, b.conv_b, 1, pad);
    if (config_.internal_norm == InternalNorm::batch) {
      h = ag::batch_norm1d(h, b.norm_g, b.norm_b, b.stats, training, config_.bn_momentum, kNormEps);
    } else {
      h = ag::layer_norm_cl(h, b.norm_g, b.norm_b, kNormEps);
    }
    h = ag::relu(h);
    if (config_.pool_size > 1) h = ag::max_pool1d(h, config_.pool_size);
    out.feature_maps.push_back(h);
    h = ag::dropout(h, config_.dropout, dropout_rng_, training);
  }
  out.features = ag::mean_over_time(h);
  out.logits = head_logits(out.features);
  return out;
}

ag::Var Model::head_logits(const ag::Var& features) const {
  if (head_.kind == HeadKind::split_cosine) return ag::cosine_logits(features, head_.weight, head_.log_eta);
  return ag::linear(features, head_.weight, head_.bias);
}

void Model::expand_head(const std::vector<int>& new_classes) {
  if (new_classes.empty()) return;
  for (std::size_t i = 0; i < new_classes.size(); ++i) {
    if (std::find(known_classes_.begin(), known_classes_.end(), new_classes[i]) != known_classes_.end() ||
        std::find(new_classes.begin(), new_classes.begin() + static_cast<std::ptrdiff_t>(i), new_classes[i]) !=
            new_classes.begin() + static_cast<std::ptrdiff_t>(i)) {
      throw ContractError("expand_head: class " + std::to_string(new_classes[i]) + " is already known");
    }
  }
  const std::size_t d = config_.embedding_dim();
  const std::size_t k_old = known_classes_.size(), k_new = k_old + new_classes.size();
  Rng rng(seed_, "model/head/" + std::to_string(k_old));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d));

  Tensor w({k_new, d});
  std::copy(head_.weight->value.storage().begin(), head_.weight->value.storage().end(), w.storage().begin());
  for (std::size_t i = k_old * d; i < k_new * d; ++i) w[i] = rng.uniform(-bound, bound);
  head_.weight->value = std::move(w);
  head_.weight->zero_grad();
  if (head_.bias) {
    Tensor b({k_new});
    std::copy(head_.bias->value.storage().begin(), head_.bias->value.storage().end(), b.storage().begin());
    for (std::size_t i = k_old; i < k_new; ++i) b[i] = rng.uniform(-bound, bound);
    head_.bias->value = std::move(b);
    head_.bias->zero_grad();
  }
  if (head_.kind == HeadKind::ncm) {
    Tensor p({k_new, d});
    std::copy(head_.prototypes.storage().begin(), head_.prototypes.storage().end(), p.storage().begin());
    head_.prototypes = std::move(p);
    head_.prototype_ready.resize(k_new, false);
  }
  known_classes_.insert(known_classes_.end(), new_classes.begin(), new_classes.end());
}

std::size_t Model::class_index(int label) const {
  auto it = std::find(known_classes_.begin(), known_classes_.end(), label);
  if (it == known_classes_.end()) throw ContractError("label " + std::to_string(label) + " is not a known class");
  return static_cast<std::size_t>(it - known_classes_.begin());
}

std::vector<std::size_t> Model::targets(std::span<const int> labels) const {
  std::vector<std::size_t> out;
  out.reserve(labels.size());
  for (int l : labels) out.push_back(class_index(l));
  return out;
}

ag::Var Model::training_loss(const ForwardResult& out, std::span<const std::size_t> targets,
                             std::vector<double>* per_sample) const {
  const HeadKind kind = head_.kind == HeadKind::ncm ? HeadKind::softmax_ce : head_.kind;
  return head_loss(kind, out.logits, targets, per_sample);
}

std::pair<Tensor, Tensor> Model::embed(const Tensor& x, std::size_t chunk) {
  ag::NoGradGuard guard;
  const std::size_t n = x.dim(0), per = x.size() / std::max<std::size_t>(n, 1);
  const std::size_t d = config_.embedding_dim(), k = known_classes_.size();
  Tensor features({n, d}), logits({n, k});
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    std::vector<double> part(x.storage().begin() + static_cast<std::ptrdiff_t>(start * per),
                             x.storage().begin() + static_cast<std::ptrdiff_t>((start + m) * per));
    auto out = forward(Tensor({m, x.dim(1), x.dim(2)}, std::move(part)), false);
    std::copy(out.features->value.storage().begin(), out.features->value.storage().end(),
              features.storage().begin() + static_cast<std::ptrdiff_t>(start * d));
    std::copy(out.logits->value.storage().begin(), out.logits->value.storage().end(),
              logits.storage().begin() + static_cast<std::ptrdiff_t>(start * k));
  }
  return {std::move(features), std::move(logits)};
}

std::vector<int> Model::predict(const Tensor& x, std::size_t chunk) {
  auto [features, logits] = embed(x, chunk);
  const std::size_t n = x.dim(0), k = known_classes_.size(), d = features.dim(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (head_.kind == HeadKind::ncm) {
      out[i] = ncm_classify(std::span<const double>(features.data() + i * d, d), head_.prototypes,
                            known_classes_, head_.prototype_ready);
    } else {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (logits.at(i, j) > logits.at(i, best)) best = j;
      }
      out[i] = known_classes_[best];
    }
  }
  return out;
}

void Model::set_prototype(int label, std::span<const double> mean) {
  if (head_.kind != HeadKind::ncm) throw ContractError("set_prototype requires the ncm head");
  const std::size_t k = class_index(label), d = config_.embedding_dim();
  if (mean.size() != d) throw ContractError("prototype width mismatch");
  std::copy(mean.begin(), mean.end(), head_.prototypes.data() + k * d);
  head_.prototype_ready[k] = true;
}

std::vector<ag::Var> Model::parameters() const {
  std::vector<ag::Var> p;
  for (const auto& b : blocks_) p.insert(p.end(), {b.conv_w, b.conv_b, b.norm_g, b.norm_b});
  p.push_back(head_.weight);
  if (head_.bias) p.push_back(head_.bias);
  if (head_.log_eta) p.push_back(head_.log_eta);
  return p;
}

std::vector<std::string> Model::parameter_names() const {
  std::vector<std::string> names;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string pre = "block" + std::to_string(i) + ".";
    names.insert(names.end(), {pre + "conv.weight", pre + "conv.bias", pre + "norm.weight", pre + "norm.bias"});
  }
  names.push_back("head.weight");
  if (head_.bias) names.push_back("head.bias");
  if (head_.log_eta) names.push_back("head.log_eta");
  return names;
}

Model Model::clone() const {
  Model m = *this;
  auto copy = [](const ag::Var& v) { return v ? ag::parameter(v->value) : v; };
  for (auto& b : m.blocks_) {
    b.conv_w = copy(b.conv_w);
    b.conv_b = copy(b.conv_b);
    b.norm_g = copy(b.norm_g);
    b.norm_b = copy(b.norm_b);
  }
  m.head_.weight = copy(m.head_.weight);
  m.head_.bias = copy(m.head_.bias);
  m.head_.log_eta = copy(m.head_.log_eta);
  return m;
}

void Model::assign_from(const Model& other) {
  const auto dst = parameters();
  const auto src = other.parameters();
  if (dst.size() != src.size()) throw ContractError("assign_from: parameter count mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (!dst[i]->value.same_shape(src[i]->value)) throw ContractError("assign_from: parameter shape mismatch");
    dst[i]->value = src[i]->value;
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) blocks_[i].stats = other.blocks_[i].stats;
}

void Model::save(const std::filesystem::path& path) const {
  Archive a;
  a.meta = {{"kind", "tscil-model"},
            {"config", config_.to_json()},
            {"known_classes", known_classes_},
            {"seed", seed_}};
  const auto params = parameters();
  const auto names = parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) {
    a.arrays[names[i]] = ArchiveArray::from_f64(params[i]->value.shape(), params[i]->value.storage());
  }
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string pre = "block" + std::to_string(i) + ".norm.running_";
    a.arrays[pre + "mean"] = ArchiveArray::from_f64(blocks_[i].stats.mean.shape(), blocks_[i].stats.mean.storage());
    a.arrays[pre + "var"] = ArchiveArray::from_f64(blocks_[i].stats.var.shape(), blocks_[i].stats.var.storage());
  }
  if (head_.kind == HeadKind::ncm) {
    a.arrays["head.prototypes"] = ArchiveArray::from_f64(head_.prototypes.shape(), head_.prototypes.storage());
    std::vector<std::int32_t> ready(head_.prototype_ready.begin(), head_.prototype_ready.end());
    a.arrays["head.prototype_ready"] = ArchiveArray::from_i32({ready.size()}, ready);
  }
  write_archive(path, a);
}

Model Model::load(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  if (a.meta.value("kind", "") != "tscil-model") throw ArchiveError(path.string() + " is not a model checkpoint");
  Model m = build(BackboneConfig::from_json(a.meta.at("config")),
                  a.meta.at("known_classes").get<std::vector<int>>(), a.meta.at("seed").get<std::uint64_t>());
  auto load_into = [&](const std::string& name, Tensor& t) {
    const auto& arr = a.array(name);
    if (arr.shape != t.shape()) throw ArchiveError("checkpoint array " + name + " has the wrong shape");
    t = Tensor(arr.shape, arr.as_f64());
  };
  const auto params = m.parameters();
  const auto names = m.parameter_names();
  for (std::size_t i = 0; i < params.size(); ++i) load_into(names[i], params[i]->value);
  for (std::size_t i = 0; i < m.blocks_.size(); ++i) {
    const std::string pre = "block" + std::to_string(i) + ".norm.running_";
    load_into(pre + "mean", m.blocks_[i].stats.mean);
    load_into(pre + "var", m.blocks_[i].stats.var);
  }
  if (m.head_.kind == HeadKind::ncm) {
    load_into("head.prototypes", m.head_.prototypes);
    const auto ready = a.array("head.prototype_ready").as_i32();
    m.head_.prototype_ready.assign(ready.begin(), ready.end());
  }
  return m;
}

}  // namespace tscil::model
