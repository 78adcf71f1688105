#include "tscil/data/loaders.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numbers>
#include <sstream>

#include <spdlog/spdlog.h>

#include "tscil/core/errors.hpp"
#include "tscil/core/rng.hpp"
#include "tscil/data/cache.hpp"
#include "tscil/data/preprocess.hpp"

namespace tscil::data {
namespace fs = std::filesystem;

namespace {

constexpr int kCacheFormat = 2;

std::vector<double> parse_numbers(const std::string& line) {
  std::vector<double> out;
  const char* p = line.c_str();
  while (*p) {
    while (*p && (std::isspace(static_cast<unsigned char>(*p)) || *p == ',' || *p == ';')) ++p;
    if (!*p) break;
    char* end = nullptr;
    const double v = std::strtod(p, &end);
    if (end == p) throw ValidationError("unparseable number near '" + std::string(p, 0, 20) + "'");
    out.push_back(v);
    p = end;
  }
  return out;
}

std::vector<std::vector<double>> read_rows(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open " + path.string());
  std::vector<std::vector<double>> rows;
  std::string line;
  while (std::getline(in, line)) {
    auto row = parse_numbers(line);
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

fs::path first_existing(const std::vector<fs::path>& candidates, const std::string& layout) {
  for (const auto& p : candidates) {
    if (fs::exists(p)) return p;
  }
  throw LoadError("dataset files not found; expected layout: " + layout);
}

const DatasetInfo& info_for(const std::string& id) {
  for (const auto& d : known_datasets()) {
    if (d.id == id) return d;
  }
  throw ConfigError("unknown dataset '" + id + "'");
}

// ---------------------------------------------------------------------------

RawDataset load_uci_har(const fs::path& root) {
  const auto& info = info_for("uci-har");
  const fs::path base =
      first_existing({root / "UCI HAR Dataset", root}, info.layout) / "";
  static const char* kSignals[] = {"body_acc_x",  "body_acc_y",  "body_acc_z",
                                   "body_gyro_x", "body_gyro_y", "body_gyro_z",
                                   "total_acc_x", "total_acc_y", "total_acc_z"};
  RawDataset d;
  d.name = "uci-har";
  d.channels = 9;
  d.length = 128;
  for (const std::string part : {"train", "test"}) {
    const fs::path dir = base / part;
    const fs::path labels_path = dir / ("y_" + part + ".txt");
    const fs::path subjects_path = dir / ("subject_" + part + ".txt");
    if (!fs::exists(labels_path)) {
      throw LoadError("missing " + labels_path.string() + "; expected layout: " + info.layout);
    }
    const auto labels = read_rows(labels_path);
    const auto subjects = read_rows(subjects_path);
    std::vector<std::vector<std::vector<double>>> channels;
    for (const char* sig : kSignals) {
      channels.push_back(read_rows(dir / "Inertial Signals" / (std::string(sig) + "_" + part + ".txt")));
      if (channels.back().size() != labels.size()) {
        throw ValidationError(std::string("UCI-HAR signal ") + sig + " row count mismatch");
      }
    }
    if (subjects.size() != labels.size()) throw ValidationError("UCI-HAR subject count mismatch");
    for (std::size_t i = 0; i < labels.size(); ++i) {
      auto s = std::make_shared<TimeSeriesSample>();
      s->channels = 9;
      s->length = channels[0][i].size();
      s->label = static_cast<int>(labels[i].at(0)) - 1;
      s->subject = static_cast<int>(subjects[i].at(0));
      for (const auto& ch : channels) {
        if (ch[i].size() != s->length) throw ValidationError("UCI-HAR ragged signal rows");
        for (double v : ch[i]) s->values.push_back(static_cast<float>(v));
      }
      d.samples.push_back(std::move(s));
      d.split.push_back(part == "train" ? Split::train : Split::test);
    }
  }
  return d;
}

RawDataset load_uwave(const fs::path& root) {
  const auto& info = info_for("uwave");
  RawDataset d;
  d.name = "uwave";
  d.channels = 3;
  d.length = 315;
  auto locate = [&](char axis, const std::string& part) {
    const std::string stem = std::string("UWaveGestureLibrary") + axis + "_" + part;
    const fs::path dir = root / (std::string("UWaveGestureLibrary") + axis);
    return first_existing({root / (stem + ".tsv"), root / (stem + ".txt"), root / stem,
                           dir / (stem + ".tsv"), dir / (stem + ".txt"), dir / stem},
                          info.layout);
  };
  for (const std::string part : {"TRAIN", "TEST"}) {
    std::vector<std::vector<std::vector<double>>> axes;
    for (char axis : {'X', 'Y', 'Z'}) axes.push_back(read_rows(locate(axis, part)));
    const std::size_t n = axes[0].size();
    for (const auto& a : axes) {
      if (a.size() != n) throw ValidationError("UWave axis files disagree on sample count");
    }
    for (std::size_t i = 0; i < n; ++i) {
      auto s = std::make_shared<TimeSeriesSample>();
      s->channels = 3;
      s->length = axes[0][i].size() - 1;
      s->label = static_cast<int>(axes[0][i][0]) - 1;
      for (const auto& a : axes) {
        if (a[i].size() != s->length + 1 || static_cast<int>(a[i][0]) - 1 != s->label) {
          throw ValidationError("UWave axis rows disagree");
        }
        for (std::size_t t = 1; t < a[i].size(); ++t) s->values.push_back(static_cast<float>(a[i][t]));
      }
      d.samples.push_back(std::move(s));
      d.split.push_back(part == "TRAIN" ? Split::train : Split::test);
    }
  }
  return d;
}

RawDataset load_dsa(const fs::path& root, std::uint64_t split_seed) {
  const auto& info = info_for("dsa");
  const fs::path base = first_existing({root / "data", root / "a01"}, info.layout) ==
                                root / "a01"
                            ? root
                            : root / "data";
  RawDataset d;
  d.name = "dsa";
  d.channels = 45;
  d.length = 125;
  for (int a = 1; a <= 19; ++a) {
    char adir[8];
    std::snprintf(adir, sizeof(adir), "a%02d", a);
    for (int p = 1; p <= 8; ++p) {
      const fs::path pdir = base / adir / ("p" + std::to_string(p));
      if (!fs::exists(pdir)) throw LoadError("missing " + pdir.string() + "; expected layout: " + info.layout);
      for (int seg = 1; seg <= 60; ++seg) {
        char sname[16];
        std::snprintf(sname, sizeof(sname), "s%02d.txt", seg);
        const auto rows = read_rows(pdir / sname);
        auto s = std::make_shared<TimeSeriesSample>();
        s->channels = 45;
        s->length = rows.size();
        s->label = a - 1;
        s->subject = p;
        s->values.assign(45 * rows.size(), 0.0f);
        for (std::size_t t = 0; t < rows.size(); ++t) {
          if (rows[t].size() != 45) throw ValidationError("DSA segment rows must have 45 columns");
          for (std::size_t c = 0; c < 45; ++c) s->values[c * rows.size() + t] = static_cast<float>(rows[t][c]);
        }
        d.samples.push_back(std::move(s));
      }
    }
  }
  d.split = subject_stratified_split(d.samples, 0.25, split_seed);
  return d;
}

RawDataset load_grabmyo(const fs::path& root, std::uint64_t split_seed) {
  const auto& info = info_for("grabmyo");
  const fs::path session = first_existing({root / "session1"}, info.layout);
  std::vector<Recording> recordings;
  std::vector<fs::path> participants;
  for (const auto& entry : fs::directory_iterator(session)) {
    if (entry.is_directory() && entry.path().filename().string().rfind("participant", 0) == 0) {
      participants.push_back(entry.path());
    }
  }
  std::sort(participants.begin(), participants.end());
  if (participants.empty()) throw LoadError("no participant directories; expected layout: " + info.layout);
  for (const auto& pdir : participants) {
    const int subject = std::stoi(pdir.filename().string().substr(11));
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(pdir)) {
      if (entry.path().extension() == ".csv") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& f : files) {
      const std::string stem = f.stem().string();  // gesture<G>_trial<T>
      if (stem.rfind("gesture", 0) != 0) continue;
      const int gesture = std::stoi(stem.substr(7, stem.find('_') - 7));
      const auto rows = read_rows(f);
      Recording r;
      r.subject = subject;
      r.label = gesture - 1;
      r.channels = 28;
      r.rate_hz = 2048.0;
      r.values.assign(28 * rows.size(), 0.0f);
      for (std::size_t t = 0; t < rows.size(); ++t) {
        if (rows[t].size() != 28) throw ValidationError("GRABMyo rows must have 28 columns: " + f.string());
        for (std::size_t c = 0; c < 28; ++c) r.values[c * rows.size() + t] = static_cast<float>(rows[t][c]);
      }
      recordings.push_back(std::move(r));
    }
  }
  auto pre = preprocess_grabmyo(recordings, split_seed);
  RawDataset d;
  d.name = "grabmyo";
  d.channels = 28;
  d.length = 128;
  d.samples = std::move(pre.samples);
  d.split = std::move(pre.split);
  return d;
}

RawDataset load_wisdm(const fs::path& root, std::uint64_t split_seed) {
  const auto& info = info_for("wisdm");
  const fs::path dir = first_existing(
      {root / "wisdm-dataset" / "raw" / "phone" / "accel", root / "raw" / "phone" / "accel"},
      info.layout);
  // Activity codes A..S without N, in alphabetical order.
  auto activity_index = [](char code) -> int {
    if (code < 'A' || code > 'S' || code == 'N') return -1;
    return code < 'N' ? code - 'A' : code - 'A' - 1;
  };
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.path().extension() == ".txt") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<Recording> recordings;
  for (const auto& f : files) {
    std::ifstream in(f);
    std::string line;
    Recording current;
    std::vector<float> xs, ys, zs;
    auto flush = [&]() {
      if (!xs.empty()) {
        current.channels = 3;
        current.rate_hz = 20.0;
        current.values = xs;
        current.values.insert(current.values.end(), ys.begin(), ys.end());
        current.values.insert(current.values.end(), zs.begin(), zs.end());
        recordings.push_back(current);
      }
      xs.clear();
      ys.clear();
      zs.clear();
    };
    while (std::getline(in, line)) {
      std::stringstream ss(line);
      std::string subject, code, ts, x, y, z;
      if (!std::getline(ss, subject, ',') || !std::getline(ss, code, ',') ||
          !std::getline(ss, ts, ',') || !std::getline(ss, x, ',') || !std::getline(ss, y, ',') ||
          !std::getline(ss, z, ';')) {
        continue;
      }
      const int label = code.empty() ? -1 : activity_index(code[0]);
      if (label < 0) continue;
      const int subj = std::stoi(subject);
      if (!xs.empty() && (label != current.label || subj != current.subject)) flush();
      current.label = label;
      current.subject = subj;
      xs.push_back(std::stof(x));
      ys.push_back(std::stof(y));
      zs.push_back(std::stof(z));
    }
    flush();
  }
  auto pre = preprocess_wisdm(recordings, split_seed);
  RawDataset d;
  d.name = "wisdm";
  d.channels = 3;
  d.length = 200;
  d.samples = std::move(pre.samples);
  d.split = std::move(pre.split);
  return d;
}

void check_published_shape(const RawDataset& d) {
  const auto& info = info_for(d.name);
  if (d.channels != info.channels || d.length != info.length) {
    throw ValidationError(d.name + ": expected shape " + std::to_string(info.channels) + "x" +
                          std::to_string(info.length) + ", got " + std::to_string(d.channels) +
                          "x" + std::to_string(d.length));
  }
  for (const auto& s : d.samples) {
    if (s->channels != d.channels || s->length != d.length) {
      throw ValidationError(d.name + ": sample with shape " + std::to_string(s->channels) + "x" +
                            std::to_string(s->length) + " differs from the published " +
                            std::to_string(info.channels) + "x" + std::to_string(info.length));
    }
  }
  if (info.train_size && (d.count(Split::train) != info.train_size ||
                          d.count(Split::test) != info.test_size)) {
    spdlog::warn("{}: split sizes {}/{} differ from the published {}/{}", d.name,
                 d.count(Split::train), d.count(Split::test), info.train_size, info.test_size);
  }
}

}  // namespace

const std::vector<DatasetInfo>& known_datasets() {
  static const std::vector<DatasetInfo> kInfo = {
      {"uci-har", "UCI-HAR", 9, 128, 7352, 2947, 6, 3,
       "<root>/UCI HAR Dataset/{train,test}/Inertial Signals/<signal>_<split>.txt with "
       "y_<split>.txt and subject_<split>.txt"},
      {"uwave", "UWave", 3, 315, 896, 3582, 8, 4,
       "<root>/UWaveGestureLibrary{X,Y,Z}_{TRAIN,TEST}[.tsv|.txt] (UCR format: label then 315 "
       "values per row), optionally inside UWaveGestureLibrary{X,Y,Z}/"},
      {"dsa", "DSA", 45, 125, 6840, 2280, 19, 6,
       "<root>/data/aNN/pM/sKK.txt (19 activities x 8 subjects x 60 segments, 125 rows x 45 "
       "comma-separated columns)"},
      {"grabmyo", "GRABMyo", 28, 128, 36120, 12040, 16, 5,
       "<root>/session1/participant<P>/gesture<G>_trial<T>.csv (28 comma-separated columns per "
       "row, 2048 Hz)"},
      {"wisdm", "WISDM", 3, 200, 18184, 6062, 18, 6,
       "<root>/wisdm-dataset/raw/phone/accel/data_<subject>_accel_phone.txt "
       "(subject,activity,timestamp,x,y,z;)"},
  };
  return kInfo;
}

std::string canonical_dataset_id(std::string_view name) {
  std::string s;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c))) s += static_cast<char>(std::tolower(c));
  }
  if (s == "ucihar" || s == "har") return "uci-har";
  if (s == "uwave" || s == "uwavegesturelibrary") return "uwave";
  if (s == "dsa") return "dsa";
  if (s == "grabmyo") return "grabmyo";
  if (s == "wisdm") return "wisdm";
  if (s == "synthetic") return "synthetic";
  throw ConfigError("unknown dataset '" + std::string(name) +
                    "' (expected uci-har, uwave, dsa, grabmyo, wisdm or synthetic)");
}

RawDataset make_synthetic(const SyntheticConfig& cfg) {
  if (cfg.classes <= 0 || cfg.subjects <= 0 || cfg.channels == 0 || cfg.length < 8 ||
      cfg.train_per_class_subject <= 0 || cfg.test_per_class_subject <= 0) {
    throw ConfigError("synthetic: classes, subjects, channels, per-subject counts must be "
                      "positive and length >= 8");
  }
  constexpr int kComponents = 2;
  const double two_pi = 2.0 * std::numbers::pi;
  Rng proto(cfg.seed, "synthetic/prototypes");
  struct Wave {
    double amp, freq, phase;
  };
  // class x channel x component
  std::vector<Wave> class_waves(static_cast<std::size_t>(cfg.classes) * cfg.channels * kComponents);
  for (auto& w : class_waves) w = {proto.uniform(0.5, 1.5), proto.uniform(1.0, 6.0), proto.uniform(0.0, two_pi)};
  std::vector<double> class_offset(static_cast<std::size_t>(cfg.classes) * cfg.channels);
  for (auto& o : class_offset) o = proto.uniform(-0.5, 0.5);
  struct Subject {
    double gain, phase, tempo;
    std::vector<Wave> extra;  // per channel
  };
  std::vector<Subject> subjects(static_cast<std::size_t>(cfg.subjects));
  for (auto& s : subjects) {
    s.gain = 1.0 + cfg.subject_shift * proto.uniform(-0.5, 0.5);
    s.phase = cfg.subject_shift * proto.uniform(-std::numbers::pi, std::numbers::pi);
    s.tempo = 1.0 + cfg.subject_shift * proto.uniform(-0.25, 0.25);
    for (std::size_t c = 0; c < cfg.channels; ++c) {
      s.extra.push_back({cfg.subject_shift * proto.uniform(0.5, 1.5), proto.uniform(0.5, 8.0),
                         proto.uniform(0.0, two_pi)});
    }
  }

  RawDataset d;
  d.name = "synthetic";
  d.channels = cfg.channels;
  d.length = cfg.length;
  d.class_count = cfg.classes;
  Rng noise(cfg.seed, "synthetic/samples");
  const double len = static_cast<double>(cfg.length);
  for (int part = 0; part < 2; ++part) {
    const int per = part == 0 ? cfg.train_per_class_subject : cfg.test_per_class_subject;
    for (int c = 0; c < cfg.classes; ++c) {
      for (int subj = 0; subj < cfg.subjects; ++subj) {
        const auto& sp = subjects[static_cast<std::size_t>(subj)];
        for (int k = 0; k < per; ++k) {
          auto s = std::make_shared<TimeSeriesSample>();
          s->channels = cfg.channels;
          s->length = cfg.length;
          s->label = c;
          s->subject = subj;
          s->values.resize(cfg.channels * cfg.length);
          const double jitter = noise.uniform(-0.2, 0.2);
          const double gain = sp.gain * noise.uniform(0.9, 1.1);
          for (std::size_t ch = 0; ch < cfg.channels; ++ch) {
            const std::size_t base = (static_cast<std::size_t>(c) * cfg.channels + ch) * kComponents;
            const auto& ex = sp.extra[ch];
            for (std::size_t t = 0; t < cfg.length; ++t) {
              const double u = static_cast<double>(t) / len;
              double v = class_offset[static_cast<std::size_t>(c) * cfg.channels + ch];
              for (int j = 0; j < kComponents; ++j) {
                const auto& w = class_waves[base + static_cast<std::size_t>(j)];
                v += w.amp * std::sin(two_pi * w.freq * sp.tempo * u + w.phase + sp.phase + jitter);
              }
              v = gain * v + ex.amp * std::sin(two_pi * ex.freq * u + ex.phase);
              v += cfg.noise * noise.normal();
              s->values[ch * cfg.length + t] = static_cast<float>(v);
            }
          }
          d.samples.push_back(std::move(s));
          d.split.push_back(part == 0 ? Split::train : Split::test);
        }
      }
    }
  }
  return d;
}

std::string preprocessing_hash(std::string_view id, const LoadOptions& options) {
  std::ostringstream key;
  key << "v" << kCacheFormat << "|" << id << "|split_seed=" << options.split_seed;
  if (id == "synthetic") {
    const auto& s = options.synthetic;
    key << "|" << s.classes << "," << s.subjects << "," << s.channels << "," << s.length << ","
        << s.train_per_class_subject << "," << s.test_per_class_subject << "," << s.noise << ","
        << s.subject_shift << "," << s.seed;
  }
  const std::uint64_t h = derive_seed(0, key.str());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

RawDataset load_dataset(std::string_view name, const fs::path& root, const LoadOptions& options) {
  const std::string id = canonical_dataset_id(name);
  std::optional<fs::path> cached;
  if (options.cache_dir) {
    cached = cache_file(*options.cache_dir, id, preprocessing_hash(id, options));
    if (fs::exists(*cached)) {
      auto d = load_dataset_cache(*cached);
      if (id != "synthetic") check_published_shape(d);
      return d;
    }
  }
  RawDataset d;
  if (id == "synthetic") {
    d = make_synthetic(options.synthetic);
  } else {
    if (id == "uci-har") d = load_uci_har(root);
    else if (id == "uwave") d = load_uwave(root);
    else if (id == "dsa") d = load_dsa(root, options.split_seed);
    else if (id == "grabmyo") d = load_grabmyo(root, options.split_seed);
    else d = load_wisdm(root, options.split_seed);
    d.class_count = static_cast<int>(d.classes().size());
    check_published_shape(d);
  }
  if (cached) save_dataset_cache(*cached, d, preprocessing_hash(id, options));
  return d;
}

}  // namespace tscil::data
