#include "tscil/eval/config.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

#include <yaml-cpp/yaml.h>

#include "tscil/core/errors.hpp"
#include "tscil/methods/replay.hpp"

namespace tscil::eval {

Protocol parse_protocol(const std::string& s) {
  if (s == "none") return Protocol::none;
  if (s == "a" || s == "A") return Protocol::a;
  if (s == "b" || s == "B") return Protocol::b;
  throw ConfigError("unknown tuning protocol '" + s + "' (none, a, b)");
}

std::string to_string(Protocol p) {
  switch (p) {
    case Protocol::none: return "none";
    case Protocol::a: return "a";
    case Protocol::b: return "b";
  }
  return "?";
}

std::vector<Hyper> Grid::points() const {
  std::vector<Hyper> out{nlohmann::json::object()};
  for (const auto& [key, values] : axes) {
    std::vector<Hyper> next;
    for (const auto& base : out) {
      for (const auto& v : values) {
        Hyper h = base;
        h[key] = v;
        next.push_back(std::move(h));
      }
    }
    out = std::move(next);
  }
  return out;
}

const std::vector<std::string>& method_names() {
  static const std::vector<std::string> names{"naive", "offline", "lwf", "mas", "dt2w", "er", "der", "herding",
                                              "aser", "clops", "fasticarl", "gr", "er_subject_balanced",
                                              "er_subject_restricted"};
  return names;
}

std::vector<std::string> hyper_keys(const std::string& method) {
  std::vector<std::string> keys{"learning_rate", "scheduler", "batch_size", "epochs"};
  auto add = [&](std::initializer_list<const char*> more) { keys.insert(keys.end(), more.begin(), more.end()); };
  if (method == "lwf") add({"lambda", "temperature"});
  else if (method == "mas") add({"lambda", "max_samples"});
  else if (method == "dt2w") add({"lambda_kd", "lambda_lwf", "gamma", "temperature", "prototype_weight", "all_blocks"});
  else if (method == "der") add({"der_alpha"});
  else if (method == "aser") add({"aser_neighbours", "aser_eval_points", "aser_candidates", "aser_mean_variant"});
  else if (method == "er_subject_restricted") add({"restricted_subjects"});
  else if (method == "gr") add({"generator_epochs", "generator_lr", "latent", "beta"});
  return keys;
}

namespace {

nlohmann::json scalar_to_json(const YAML::Node& n) {
  if (n.IsNull()) return nullptr;
  if (!n.IsScalar()) throw ConfigError("expected a scalar value");
  const std::string s = n.Scalar();
  if (n.Tag() != "!") {  // unquoted
    if (s == "true" || s == "True") return true;
    if (s == "false" || s == "False") return false;
    try {
      std::size_t pos = 0;
      const double v = std::stod(s, &pos);
      if (pos == s.size()) {
        if (s.find_first_of(".eE") == std::string::npos) return static_cast<std::int64_t>(std::stoll(s));
        return v;
      }
    } catch (const std::exception&) {
    }
  }
  return s;
}

void emit_json(YAML::Emitter& out, const nlohmann::json& j) {
  if (j.is_object()) {
    out << YAML::BeginMap;
    for (const auto& [k, v] : j.items()) {
      out << YAML::Key << k << YAML::Value;
      emit_json(out, v);
    }
    out << YAML::EndMap;
  } else if (j.is_array()) {
    out << YAML::Flow << YAML::BeginSeq;
    for (const auto& v : j) emit_json(out, v);
    out << YAML::EndSeq;
  } else if (j.is_boolean()) {
    out << j.get<bool>();
  } else if (j.is_number_integer()) {
    out << j.get<std::int64_t>();
  } else if (j.is_number()) {
    out << YAML::Precision(17) << j.get<double>();
  } else if (j.is_null()) {
    out << YAML::Null;
  } else {
    out << j.get<std::string>();
  }
}

void check_keys(const YAML::Node& node, const std::set<std::string>& allowed, const std::string& where) {
  if (!node.IsMap()) throw ConfigError(where + " must be a mapping");
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

template <typename T>
T get(const YAML::Node& node, const std::string& key) {
  try {
    return node[key].as<T>();
  } catch (const YAML::Exception& e) {
    throw ConfigError("bad value for '" + key + "': " + e.what());
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  const auto& names = method_names();
  if (std::find(names.begin(), names.end(), method) == names.end()) {
    throw ConfigError("unknown method '" + method + "'");
  }
  data::canonical_dataset_id(dataset);
  if (seeds < 1) throw ConfigError("seeds must be >= 1");
  if (workers < 1) throw ConfigError("workers must be >= 1");
  if (classes_per_task < 1) throw ConfigError("classes_per_task must be >= 1");
  if (!(val_fraction >= 0.0 && val_fraction < 1.0)) throw ConfigError("val_fraction must be in [0, 1)");
  if (methods::is_replay_kind(method) && !(memory_budget > 0.0 && memory_budget <= 1.0)) {
    throw ConfigError("memory_budget must be in (0, 1]");
  }
  if (classifier == model::HeadKind::ncm && !methods::is_replay_kind(method)) {
    throw ConfigError("the ncm classifier needs a memory-based method, not '" + method + "'");
  }
  if (protocol != Protocol::none && grid.empty()) throw ConfigError("tuning protocol set but the grid is empty");
  if (n_val_runs < 1) throw ConfigError("n_val_runs must be >= 1");
  const auto keys = hyper_keys(method);
  auto allowed = [&](const std::string& k) { return std::find(keys.begin(), keys.end(), k) != keys.end(); };
  for (const auto& [k, v] : params.items()) {
    if (!allowed(k)) throw ConfigError("method '" + method + "' has no hyperparameter '" + k + "'");
  }
  for (const auto& [k, values] : grid.axes) {
    if (!allowed(k)) throw ConfigError("method '" + method + "' has no hyperparameter '" + k + "'");
    if (values.empty()) throw ConfigError("grid axis '" + k + "' is empty");
  }
  apply_hyper(*this, params).train.validate();
  if (filters.empty()) throw ConfigError("filters must not be empty");
}

ExperimentConfig apply_hyper(ExperimentConfig cfg, const Hyper& hyper) {
  for (const auto& [k, v] : hyper.items()) {
    try {
      if (k == "learning_rate") cfg.train.learning_rate = v.get<double>();
      else if (k == "scheduler") cfg.train.scheduler = train::parse_scheduler(v.get<std::string>());
      else if (k == "batch_size") cfg.train.batch_size = v.get<std::size_t>();
      else if (k == "epochs") cfg.train.epochs = v.get<int>();
      else if (k == "generator_epochs") cfg.generator.epochs = v.get<int>();
      else if (k == "generator_lr") cfg.generator.learning_rate = v.get<double>();
      else if (k == "latent") cfg.generator.latent = v.get<std::size_t>();
      else if (k == "beta") cfg.generator.beta = v.get<double>();
      else cfg.params[k] = v;
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for hyperparameter '" + k + "': " + e.what());
    }
  }
  return cfg;
}

ExperimentConfig ExperimentConfig::from_yaml(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("cannot parse config: ") + e.what());
  }
  if (root.IsNull()) root = YAML::Node(YAML::NodeType::Map);
  check_keys(root,
             {"dataset", "data_root", "cache_dir", "method", "normalization", "classifier", "dropout", "filters",
              "memory_budget", "protocol", "grid", "params", "n_val_runs", "val_tasks", "seeds", "base_seed",
              "output", "workers", "classes_per_task", "val_fraction", "train", "generator", "synthetic",
              "sample_sheets"},
             "config");
  ExperimentConfig c;
  if (root["dataset"]) c.dataset = get<std::string>(root, "dataset");
  if (root["data_root"]) c.data_root = get<std::string>(root, "data_root");
  if (root["cache_dir"]) c.cache_dir = get<std::string>(root, "cache_dir");
  if (root["method"]) c.method = get<std::string>(root, "method");
  if (const auto n = root["normalization"]) {
    check_keys(n, {"input", "internal"}, "normalization");
    if (n["input"]) c.input_norm = model::parse_input_norm(get<std::string>(n, "input"));
    if (n["internal"]) c.internal_norm = model::parse_internal_norm(get<std::string>(n, "internal"));
  }
  if (root["classifier"]) c.classifier = model::parse_head_kind(get<std::string>(root, "classifier"));
  if (root["dropout"]) c.dropout = get<double>(root, "dropout");
  if (root["filters"]) c.filters = get<std::vector<std::size_t>>(root, "filters");
  if (root["memory_budget"]) c.memory_budget = get<double>(root, "memory_budget");
  if (root["protocol"]) c.protocol = parse_protocol(get<std::string>(root, "protocol"));
  if (const auto g = root["grid"]) {
    if (!g.IsMap()) throw ConfigError("grid must be a mapping of hyperparameter to value list");
    for (const auto& kv : g) {
      std::vector<nlohmann::json> values;
      if (kv.second.IsSequence()) {
        for (const auto& v : kv.second) values.push_back(scalar_to_json(v));
      } else {
        values.push_back(scalar_to_json(kv.second));
      }
      c.grid.axes.emplace_back(kv.first.as<std::string>(), std::move(values));
    }
  }
  if (const auto p = root["params"]) {
    if (!p.IsMap()) throw ConfigError("params must be a mapping");
    for (const auto& kv : p) c.params[kv.first.as<std::string>()] = scalar_to_json(kv.second);
  }
  if (root["n_val_runs"]) c.n_val_runs = get<std::size_t>(root, "n_val_runs");
  if (root["val_tasks"]) c.val_tasks = get<std::size_t>(root, "val_tasks");
  if (root["seeds"]) c.seeds = get<int>(root, "seeds");
  if (root["base_seed"]) c.base_seed = get<std::uint64_t>(root, "base_seed");
  if (root["output"]) c.output = get<std::string>(root, "output");
  if (root["workers"]) c.workers = get<std::size_t>(root, "workers");
  if (root["classes_per_task"]) c.classes_per_task = get<int>(root, "classes_per_task");
  if (root["val_fraction"]) c.val_fraction = get<double>(root, "val_fraction");
  if (root["sample_sheets"]) c.sample_sheets = get<bool>(root, "sample_sheets");
  if (const auto t = root["train"]) {
    check_keys(t, {"epochs", "learning_rate", "batch_size", "scheduler", "patience", "eval_chunk"}, "train");
    if (t["epochs"]) c.train.epochs = get<int>(t, "epochs");
    if (t["learning_rate"]) c.train.learning_rate = get<double>(t, "learning_rate");
    if (t["batch_size"]) c.train.batch_size = get<std::size_t>(t, "batch_size");
    if (t["scheduler"]) c.train.scheduler = train::parse_scheduler(get<std::string>(t, "scheduler"));
    if (t["patience"] && !t["patience"].IsNull()) c.train.patience = get<int>(t, "patience");
    if (t["eval_chunk"]) c.train.eval_chunk = get<std::size_t>(t, "eval_chunk");
  }
  if (const auto g = root["generator"]) {
    check_keys(g, {"widths", "latent", "beta", "learning_rate", "epochs", "patience", "batch_size"}, "generator");
    if (g["widths"]) c.generator.widths = get<std::vector<std::size_t>>(g, "widths");
    if (g["latent"]) c.generator.latent = get<std::size_t>(g, "latent");
    if (g["beta"]) c.generator.beta = get<double>(g, "beta");
    if (g["learning_rate"]) c.generator.learning_rate = get<double>(g, "learning_rate");
    if (g["epochs"]) c.generator.epochs = get<int>(g, "epochs");
    if (g["patience"]) c.generator.patience = get<int>(g, "patience");
    if (g["batch_size"]) c.generator.batch_size = get<std::size_t>(g, "batch_size");
  }
  if (const auto s = root["synthetic"]) {
    check_keys(s,
               {"classes", "subjects", "channels", "length", "train_per_class_subject", "test_per_class_subject",
                "noise", "subject_shift"},
               "synthetic");
    auto& y = c.synthetic;
    if (s["classes"]) y.classes = get<int>(s, "classes");
    if (s["subjects"]) y.subjects = get<int>(s, "subjects");
    if (s["channels"]) y.channels = get<std::size_t>(s, "channels");
    if (s["length"]) y.length = get<std::size_t>(s, "length");
    if (s["train_per_class_subject"]) y.train_per_class_subject = get<int>(s, "train_per_class_subject");
    if (s["test_per_class_subject"]) y.test_per_class_subject = get<int>(s, "test_per_class_subject");
    if (s["noise"]) y.noise = get<double>(s, "noise");
    if (s["subject_shift"]) y.subject_shift = get<double>(s, "subject_shift");
  }
  c.train.seed = c.base_seed;
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return from_yaml(ss.str());
}

std::string ExperimentConfig::to_yaml() const {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "dataset" << YAML::Value << dataset;
  out << YAML::Key << "data_root" << YAML::Value << data_root.string();
  if (cache_dir) out << YAML::Key << "cache_dir" << YAML::Value << cache_dir->string();
  out << YAML::Key << "method" << YAML::Value << method;
  out << YAML::Key << "normalization" << YAML::Value << YAML::BeginMap;
  if (input_norm) out << YAML::Key << "input" << YAML::Value << model::to_string(*input_norm);
  out << YAML::Key << "internal" << YAML::Value << model::to_string(internal_norm) << YAML::EndMap;
  out << YAML::Key << "classifier" << YAML::Value << model::to_string(classifier);
  if (dropout) out << YAML::Key << "dropout" << YAML::Value << *dropout;
  out << YAML::Key << "filters" << YAML::Value << YAML::Flow << filters;
  out << YAML::Key << "memory_budget" << YAML::Value << memory_budget;
  out << YAML::Key << "protocol" << YAML::Value << to_string(protocol);
  if (!grid.empty()) {
    out << YAML::Key << "grid" << YAML::Value << YAML::BeginMap;
    for (const auto& [k, values] : grid.axes) {
      out << YAML::Key << k << YAML::Value;
      emit_json(out, nlohmann::json(values));
    }
    out << YAML::EndMap;
  }
  if (!params.empty()) {
    out << YAML::Key << "params" << YAML::Value;
    emit_json(out, params);
  }
  out << YAML::Key << "n_val_runs" << YAML::Value << n_val_runs;
  out << YAML::Key << "val_tasks" << YAML::Value << val_tasks;
  out << YAML::Key << "seeds" << YAML::Value << seeds;
  out << YAML::Key << "base_seed" << YAML::Value << base_seed;
  out << YAML::Key << "output" << YAML::Value << output.string();
  out << YAML::Key << "workers" << YAML::Value << workers;
  out << YAML::Key << "classes_per_task" << YAML::Value << classes_per_task;
  out << YAML::Key << "val_fraction" << YAML::Value << val_fraction;
  out << YAML::Key << "sample_sheets" << YAML::Value << sample_sheets;
  out << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "epochs" << YAML::Value << train.epochs;
  out << YAML::Key << "learning_rate" << YAML::Value << train.learning_rate;
  out << YAML::Key << "batch_size" << YAML::Value << train.batch_size;
  out << YAML::Key << "scheduler" << YAML::Value << train::to_string(train.scheduler);
  if (train.patience) out << YAML::Key << "patience" << YAML::Value << *train.patience;
  out << YAML::Key << "eval_chunk" << YAML::Value << train.eval_chunk << YAML::EndMap;
  out << YAML::Key << "generator" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "widths" << YAML::Value << YAML::Flow << generator.widths;
  out << YAML::Key << "latent" << YAML::Value << generator.latent;
  out << YAML::Key << "beta" << YAML::Value << generator.beta;
  out << YAML::Key << "learning_rate" << YAML::Value << generator.learning_rate;
  out << YAML::Key << "epochs" << YAML::Value << generator.epochs;
  out << YAML::Key << "patience" << YAML::Value << generator.patience;
  out << YAML::Key << "batch_size" << YAML::Value << generator.batch_size << YAML::EndMap;
  out << YAML::Key << "synthetic" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "classes" << YAML::Value << synthetic.classes;
  out << YAML::Key << "subjects" << YAML::Value << synthetic.subjects;
  out << YAML::Key << "channels" << YAML::Value << synthetic.channels;
  out << YAML::Key << "length" << YAML::Value << synthetic.length;
  out << YAML::Key << "train_per_class_subject" << YAML::Value << synthetic.train_per_class_subject;
  out << YAML::Key << "test_per_class_subject" << YAML::Value << synthetic.test_per_class_subject;
  out << YAML::Key << "noise" << YAML::Value << synthetic.noise;
  out << YAML::Key << "subject_shift" << YAML::Value << synthetic.subject_shift << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace tscil::eval
