#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "lingm/encoder.hpp"
#include "lingm/ndt.hpp"

namespace lingm {

/// Labeled samples (images [3, h, w] or vectors [d]); the in-memory dataset.
struct LabeledSet {
  std::vector<Tensor> samples;
  std::vector<std::uint32_t> labels;
  std::size_t num_classes = 0;
  std::vector<std::string> class_names;

  std::size_t size() const { return samples.size(); }

  void validate() const {
    if (samples.empty()) throw InvalidArgument("dataset is empty");
    if (samples.size() != labels.size()) throw ShapeError("dataset: sample and label counts differ");
    std::vector<std::size_t> per_class(num_classes, 0);
    for (std::size_t i = 0; i < samples.size(); ++i) {
      if (samples[i].dims() != samples[0].dims()) throw ShapeError("dataset: inconsistent sample shapes");
      if (labels[i] >= num_classes) throw InvalidArgument("dataset: label out of range");
      ++per_class[labels[i]];
    }
    for (std::size_t c = 0; c < num_classes; ++c)
      if (per_class[c] == 0) throw InvalidArgument("dataset: class " + std::to_string(c) + " has no samples");
  }

  LabeledSet subset(std::span<const std::size_t> idx) const {
    LabeledSet out;
    out.num_classes = num_classes;
    out.class_names = class_names;
    for (std::size_t i : idx) {
      out.samples.push_back(samples.at(i));
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

/// n x f features with one class id per row. `layer` records which layer
/// produced externally imported features.
struct EmbeddingTable {
  Tensor features;
  std::vector<std::uint32_t> labels;
  std::vector<std::string> class_names;
  std::string layer;

  std::size_t rows() const { return features.empty() ? 0 : features.dim(0); }
  std::size_t dim() const { return features.empty() ? 0 : features.dim(1); }

  std::size_t num_classes() const {
    std::uint32_t mx = 0;
    for (auto l : labels) mx = std::max(mx, l);
    return labels.empty() ? 0 : mx + 1;
  }

  void validate() const {
    if (features.rank() != 2) throw ShapeError("embedding table: features must be [n, f]");
    if (labels.size() != features.dim(0))
      throw ShapeError("embedding table: " + std::to_string(features.dim(0)) + " feature rows but " +
                       std::to_string(labels.size()) + " labels");
    require_finite(features, "embedding table");
    if (!class_names.empty() && num_classes() > class_names.size())
      throw ShapeError("embedding table: fewer class names than classes");
  }

  EmbeddingTable subset(std::span<const std::size_t> idx) const {
    EmbeddingTable out;
    out.class_names = class_names;
    out.layer = layer;
    Tensor f(Dims{idx.size(), dim()});
    for (std::size_t r = 0; r < idx.size(); ++r) {
      auto src = features.row(idx[r]);
      std::copy(src.begin(), src.end(), f.row(r).begin());
      out.labels.push_back(labels.at(idx[r]));
    }
    out.features = std::move(f);
    return out;
  }
};

/// Encodes every sample in order, batch_size at a time.
inline EmbeddingTable embed_dataset(const Encoder& enc, const LabeledSet& data, std::size_t batch_size = 64) {
  if (data.samples.empty()) throw InvalidArgument("embed_dataset: empty dataset");
  if (batch_size == 0) throw InvalidArgument("embed_dataset: batch size must be positive");
  const std::size_t n = data.size(), f = enc.feature_dim();
  EmbeddingTable out;
  out.features = Tensor(Dims{n, f});
  out.labels = data.labels;
  out.class_names = data.class_names;
  out.layer = enc.architecture() + ":output";
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    Tensor z = enc.forward(stack(std::span(data.samples).subspan(start, stop - start)));
    for (std::size_t i = start; i < stop; ++i) {
      auto src = z.row(i - start);
      std::copy(src.begin(), src.end(), out.features.row(i).begin());
    }
  }
  return out;
}

inline void save_embeddings(const EmbeddingTable& table, const std::filesystem::path& dir) {
  table.validate();
  std::filesystem::create_directories(dir);
  ndt::write_f64(dir / "features.ndt", table.features);
  ndt::write_u32(dir / "labels.ndt", table.labels);
  if (!table.class_names.empty()) {
    std::ofstream os(dir / "names.txt");
    for (const auto& n : table.class_names) os << n << '\n';
  }
  std::ofstream man(dir / "manifest.txt");
  if (!man) throw IoError((dir / "manifest.txt").string() + ": cannot open for writing");
  man << "layer=" << (table.layer.empty() ? "unknown" : table.layer) << '\n';
  man << "feature_dim=" << table.dim() << '\n';
  man << "sample_count=" << table.rows() << '\n';
}

/// Reads features.ndt, labels.ndt and the optional names.txt / manifest.txt.
/// Manifest dims, when present, must agree with the files.
inline EmbeddingTable load_embeddings(const std::filesystem::path& dir) {
  EmbeddingTable t;
  t.features = ndt::read_f64(dir / "features.ndt");
  const auto labels = ndt::read_u32(dir / "labels.ndt");
  if (t.features.rank() != 2) throw FormatError((dir / "features.ndt").string() + ": features must be 2-D");
  if (labels.dims.size() != 1) throw FormatError((dir / "labels.ndt").string() + ": labels must be 1-D");
  t.labels = labels.values;
  if (t.labels.size() != t.features.dim(0))
    throw FormatError((dir / "labels.ndt").string() + ": " + std::to_string(t.labels.size()) + " labels for " +
                      std::to_string(t.features.dim(0)) + " feature rows");
  if (std::ifstream names(dir / "names.txt"); names) {
    std::string line;
    while (std::getline(names, line))
      if (!line.empty()) t.class_names.push_back(line);
  }
  if (std::ifstream man(dir / "manifest.txt"); man) {
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(man, line)) {
      auto eq = line.find('=');
      if (eq != std::string::npos) kv[line.substr(0, eq)] = line.substr(eq + 1);
    }
    const std::string where = (dir / "manifest.txt").string();
    if (auto it = kv.find("layer"); it != kv.end()) t.layer = it->second;
    if (auto it = kv.find("feature_dim"); it != kv.end() && std::stoull(it->second) != t.features.dim(1))
      throw FormatError(where + ": feature_dim disagrees with features.ndt");
    if (auto it = kv.find("sample_count"); it != kv.end() && std::stoull(it->second) != t.features.dim(0))
      throw FormatError(where + ": sample_count disagrees with features.ndt");
  }
  t.validate();
  return t;
}

}  // namespace lingm
