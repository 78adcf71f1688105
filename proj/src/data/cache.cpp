#include "tscil/data/cache.hpp"

#include "tscil/core/archive.hpp"
#include "tscil/core/errors.hpp"

namespace tscil::data {

std::filesystem::path cache_file(const std::filesystem::path& dir, const std::string& dataset,
                                 const std::string& preprocessing_hash) {
  return dir / (dataset + "-" + preprocessing_hash + ".tsc");
}

void save_dataset_cache(const std::filesystem::path& path, const RawDataset& dataset,
                        const std::string& preprocessing_hash) {
  const std::size_t n = dataset.samples.size();
  const std::size_t cl = dataset.channels * dataset.length;
  std::vector<std::int32_t> labels(n), subjects(n), split(n);
  std::vector<float> values;
  values.reserve(n * cl);
  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = *dataset.samples[i];
    labels[i] = s.label;
    subjects[i] = s.subject.value_or(-1);
    split[i] = static_cast<std::int32_t>(dataset.split[i]);
    values.insert(values.end(), s.values.begin(), s.values.end());
  }
  Archive a;
  a.meta = {{"dataset", dataset.name},
            {"C", dataset.channels},
            {"L", dataset.length},
            {"n", n},
            {"class_count", dataset.class_count},
            {"preprocessing_hash", preprocessing_hash}};
  a.arrays["labels"] = ArchiveArray::from_i32({n}, labels);
  a.arrays["subjects"] = ArchiveArray::from_i32({n}, subjects);
  a.arrays["split"] = ArchiveArray::from_i32({n}, split);
  a.arrays["values"] = ArchiveArray::from_f32({n, dataset.channels, dataset.length}, values);
  write_archive(path, a);
}

RawDataset load_dataset_cache(const std::filesystem::path& path) {
  const Archive a = read_archive(path);
  RawDataset d;
  d.name = a.meta.at("dataset").get<std::string>();
  d.channels = a.meta.at("C").get<std::size_t>();
  d.length = a.meta.at("L").get<std::size_t>();
  d.class_count = a.meta.at("class_count").get<int>();
  const auto n = a.meta.at("n").get<std::size_t>();
  const auto labels = a.array("labels").as_i32();
  const auto subjects = a.array("subjects").as_i32();
  const auto split = a.array("split").as_i32();
  const auto values = a.array("values").as_f32();
  const std::size_t cl = d.channels * d.length;
  if (labels.size() != n || subjects.size() != n || split.size() != n || values.size() != n * cl) {
    throw ValidationError("dataset cache is inconsistent: " + path.string());
  }
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto s = std::make_shared<TimeSeriesSample>();
    s->channels = d.channels;
    s->length = d.length;
    s->label = labels[i];
    if (subjects[i] >= 0) s->subject = subjects[i];
    s->values.assign(values.begin() + static_cast<std::ptrdiff_t>(i * cl),
                     values.begin() + static_cast<std::ptrdiff_t>((i + 1) * cl));
    d.samples.push_back(std::move(s));
    d.split.push_back(static_cast<Split>(split[i]));
  }
  return d;
}

}  // namespace tscil::data
