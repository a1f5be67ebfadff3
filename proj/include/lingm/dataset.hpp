#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "lingm/embedding.hpp"
#include "lingm/ndt.hpp"
#include "lingm/ppm.hpp"
#include "lingm/resize.hpp"
#include "lingm/rng.hpp"

namespace lingm {

/// Image mode: root/<class>/*.ppm; class ids follow sorted directory names and
/// files within a class are read in sorted order.
inline LabeledSet load_image_folder(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError(root.string() + ": not a directory");
  std::vector<fs::path> class_dirs;
  for (const auto& e : fs::directory_iterator(root))
    if (e.is_directory()) class_dirs.push_back(e.path());
  std::sort(class_dirs.begin(), class_dirs.end());
  if (class_dirs.empty()) throw InvalidArgument(root.string() + ": no class subdirectories");
  LabeledSet out;
  for (std::size_t c = 0; c < class_dirs.size(); ++c) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(class_dirs[c]))
      if (e.is_regular_file() && e.path().extension() == ".ppm") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw InvalidArgument(class_dirs[c].string() + ": class has no .ppm files");
    out.class_names.push_back(class_dirs[c].filename().string());
    for (const auto& f : files) {
      out.samples.push_back(import_ppm(f));
      out.labels.push_back(static_cast<std::uint32_t>(c));
    }
  }
  out.num_classes = class_dirs.size();
  out.validate();
  return out;
}

/// Vector mode: features.ndt [n, d] + labels.ndt [n] (+ optional names.txt).
inline LabeledSet load_vector_dataset(const std::filesystem::path& dir) {
  const EmbeddingTable t = load_embeddings(dir);
  LabeledSet out;
  for (std::size_t i = 0; i < t.rows(); ++i) out.samples.push_back(unstack_item(t.features, i));
  out.labels = t.labels;
  out.num_classes = t.num_classes();
  out.class_names = t.class_names;
  out.validate();
  return out;
}

/// Loads either layout: a directory holding features.ndt is a vector dataset,
/// anything else an image folder.
inline LabeledSet load_dataset(const std::filesystem::path& path) {
  if (std::filesystem::exists(path / "features.ndt")) return load_vector_dataset(path);
  return load_image_folder(path);
}

inline void save_vector_dataset(const LabeledSet& data, const std::filesystem::path& dir) {
  EmbeddingTable t;
  t.features = stack(data.samples);
  t.labels = data.labels;
  t.class_names = data.class_names;
  t.layer = "input";
  save_embeddings(t, dir);
}

inline void save_image_folder(const LabeledSet& data, const std::filesystem::path& root) {
  std::vector<std::size_t> counter(data.num_classes, 0);
  char name[32];
  for (std::size_t i = 0; i < data.size(); ++i) {
    const std::uint32_t c = data.labels[i];
    std::snprintf(name, sizeof name, "class_%03u", c);
    const auto dir = root / (data.class_names.size() > c ? data.class_names[c] : std::string(name));
    std::filesystem::create_directories(dir);
    std::snprintf(name, sizeof name, "%05zu.ppm", counter[c]++);
    export_ppm(data.samples[i], dir / name);
  }
}

/// Evaluation preprocessing: resize the shorter side to ceil(8R/7) keeping the
/// aspect ratio, then center-crop R x R (256 / 224 at R = 224).
inline Tensor eval_preprocess(const Tensor& img, std::size_t r) {
  if (img.rank() != 3) throw ShapeError("eval_preprocess: expected [C, H, W]");
  const std::size_t h = img.dim(1), w = img.dim(2);
  const auto short_side = static_cast<std::size_t>(std::ceil(8.0 * static_cast<double>(r) / 7.0));
  std::size_t nh, nw;
  if (h <= w) {
    nh = short_side;
    nw = static_cast<std::size_t>(std::llround(static_cast<double>(w) * static_cast<double>(short_side) / static_cast<double>(h)));
  } else {
    nw = short_side;
    nh = static_cast<std::size_t>(std::llround(static_cast<double>(h) * static_cast<double>(short_side) / static_cast<double>(w)));
  }
  const Tensor resized = bilinear_resize(img, nh, nw);
  const std::size_t top = (nh - r) / 2, left = (nw - r) / 2;
  Tensor out(Dims{img.dim(0), r, r});
  for (std::size_t c = 0; c < img.dim(0); ++c)
    for (std::size_t y = 0; y < r; ++y)
      for (std::size_t x = 0; x < r; ++x) out.at(c, y, x) = resized.at(c, top + y, left + x);
  return out;
}

/// Applies eval_preprocess to every image sample; vectors pass through.
inline LabeledSet preprocess_for_eval(const LabeledSet& data, std::size_t r) {
  LabeledSet out = data;
  for (Tensor& s : out.samples)
    if (s.rank() == 3) s = eval_preprocess(s, r);
  return out;
}

/// Deterministic split: the first `fraction` of a seeded permutation becomes
/// the held-out part.
inline std::pair<LabeledSet, LabeledSet> split_holdout(const LabeledSet& data, double fraction, RngStream rng) {
  const auto perm = shuffle(rng, data.size());
  const auto held = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(data.size())));
  std::vector<std::size_t> keep_idx(perm.begin() + static_cast<std::ptrdiff_t>(held), perm.end());
  std::vector<std::size_t> held_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(held));
  std::sort(keep_idx.begin(), keep_idx.end());
  std::sort(held_idx.begin(), held_idx.end());
  return {data.subset(keep_idx), data.subset(held_idx)};
}

}  // namespace lingm
