#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lingm/adam.hpp"
#include "lingm/augment.hpp"
#include "lingm/embedding.hpp"
#include "lingm/lgm.hpp"

namespace lingm {

/// Which split drives early stopping.
enum class EarlyStop { Validation, Test, None };

inline EarlyStop parse_early_stop(const std::string& s) {
  if (s == "validation") return EarlyStop::Validation;
  if (s == "test") return EarlyStop::Test;
  if (s == "none") return EarlyStop::None;
  throw InvalidArgument("unknown early-stop policy '" + s + "'");
}

inline std::string to_string(EarlyStop e) {
  switch (e) {
    case EarlyStop::Validation: return "validation";
    case EarlyStop::Test: return "test";
    default: return "none";
  }
}

struct ProbeConfig {
  std::size_t epochs = 1000;
  std::size_t batch_size = 100;
  double lr = 0.001 / 256;
  bool cosine = true;
  std::size_t patience = 50;
  EarlyStop early_stop = EarlyStop::Validation;
  HeadInit init = HeadInit::FanIn;
  bool augment = true;
  AugmentConfig augmentation;

  void validate() const {
    if (batch_size == 0) throw ConfigError("probe: batch size must be positive");
    if (!(lr > 0)) throw ConfigError("probe: learning rate must be positive");
    if (patience == 0 || (epochs > 0 && patience >= epochs && early_stop != EarlyStop::None))
      throw ConfigError("probe: patience must be in [1, epochs)");
    augmentation.validate();
  }
};

struct ProbeResult {
  LinearHead head;        // head at the selected epoch
  double accuracy = 0;    // test accuracy at the selected epoch
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
};

/// Fraction of rows whose argmax logit equals the label.
inline double probe_accuracy(const LinearHead& head, const EmbeddingTable& table) {
  if (table.rows() == 0) throw InvalidArgument("probe_accuracy: empty table");
  const Tensor logits = head.logits(table.features);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < table.rows(); ++i) hits += argmax(logits.row(i)) == table.labels[i];
  return static_cast<double>(hits) / static_cast<double>(table.rows());
}

namespace detail {

/// Resizes image samples to the encoder input when no augmentation runs.
inline Tensor fit_to_encoder(const Tensor& x, const Encoder& enc) {
  const Dims in = enc.input_shape();
  if (x.rank() == 3 && in.size() == 3 && (x.dim(1) != in[1] || x.dim(2) != in[2])) return bilinear_resize(x, in[1], in[2]);
  return x;
}

}  // namespace detail

/// Trains a freshly initialized linear head on encoder features of `train`,
/// re-augmenting the training samples every epoch. Test (and validation)
/// items are precomputed embeddings.
inline ProbeResult train_probe(const LabeledSet& train, const Encoder& enc, const EmbeddingTable& test, const ProbeConfig& cfg,
                               RngStream rng, const std::optional<EmbeddingTable>& validation = std::nullopt) {
  cfg.validate();
  train.validate();
  test.validate();
  if (test.dim() != enc.feature_dim()) throw ShapeError("train_probe: test embeddings do not match encoder feature_dim");
  if (cfg.early_stop == EarlyStop::Validation && !validation)
    throw ConfigError("train_probe: validation early stopping needs a validation table");
  const std::size_t classes = std::max(train.num_classes, test.num_classes());
  const EmbeddingTable& monitor = cfg.early_stop == EarlyStop::Validation ? *validation : test;

  RngStream init_rng = rng.fork(0);
  ProbeResult res;
  res.head = sample_head(init_rng, classes, enc.feature_dim(), cfg.init);
  res.accuracy = probe_accuracy(res.head, test);
  if (cfg.epochs == 0) return res;

  LinearHead head = res.head;
  AdamHyper hyper;
  hyper.lr = cfg.lr;
  AdamState adam_w = AdamState::fresh(head.weight.dims(), hyper);
  AdamState adam_b = AdamState::fresh(head.bias.dims(), hyper);

  AugmentConfig aug = cfg.augmentation;
  const Dims in = enc.input_shape();
  if (in.size() == 3) {
    aug.out_h = in[1];
    aug.out_w = in[2];
  } else {
    aug.flip = aug.crop = false;
  }

  std::optional<Tensor> fixed_features;
  if (!cfg.augment) {
    std::vector<Tensor> items;
    for (const Tensor& x : train.samples) items.push_back(detail::fit_to_encoder(x, enc));
    fixed_features = enc.forward(stack(items));
  }

  double best_monitor = -1.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    RngStream ep = rng.fork(epoch + 1);
    RngStream order_rng = ep.fork(0), aug_rng = ep.fork(1);
    const double lr = cfg.cosine ? cosine_lr(cfg.lr, epoch, cfg.epochs) : cfg.lr;
    const std::vector<std::size_t> order = shuffle(order_rng, train.size());

    Tensor features;
    if (fixed_features) {
      features = *fixed_features;
    } else {
      std::vector<Tensor> items;
      items.reserve(train.size());
      for (const Tensor& x : train.samples) items.push_back(apply(x, draw_params_for(aug_rng, aug, x)));
      features = enc.forward(stack(items));
    }

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      Tensor z(Dims{stop - start, enc.feature_dim()});
      std::vector<std::uint32_t> y;
      for (std::size_t i = start; i < stop; ++i) {
        auto src = features.row(order[i]);
        std::copy(src.begin(), src.end(), z.row(i - start).begin());
        y.push_back(train.labels[order[i]]);
      }
      const ClassLoss cl = class_loss_and_grad(head, z, y);
      adam_update(adam_w, head.weight, cl.grad.weight, lr);
      adam_update(adam_b, head.bias, cl.grad.bias, lr);
    }
    res.epochs_run = epoch + 1;

    if (cfg.early_stop == EarlyStop::None) {
      res.head = head;
      res.best_epoch = epoch;
      continue;
    }
    const double score = probe_accuracy(head, monitor);
    if (score > best_monitor) {
      best_monitor = score;
      res.head = head;
      res.best_epoch = epoch;
    } else if (epoch - res.best_epoch >= cfg.patience) {
      break;
    }
  }
  res.accuracy = probe_accuracy(res.head, test);
  return res;
}

/// 1 - cos(a, b); zero vectors are rejected.
inline double cosine_distance(std::span<const double> a, std::span<const double> b) {
  const double na = norm2(a), nb = norm2(b);
  if (!(na > 0) || !(nb > 0)) throw InvalidArgument("cosine distance of a zero vector");
  return 1.0 - dot(a, b) / (na * nb);
}

/// One uniformly chosen sample index per class.
inline std::vector<std::size_t> baseline_random(std::span<const std::uint32_t> labels, std::size_t num_classes, RngStream& rng) {
  std::vector<std::vector<std::size_t>> members(num_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= num_classes) throw InvalidArgument("baseline_random: label out of range");
    members[labels[i]].push_back(i);
  }
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < num_classes; ++c) {
    if (members[c].empty()) throw InvalidArgument("baseline_random: class " + std::to_string(c) + " is empty");
    out.push_back(members[c][rng.below(members[c].size())]);
  }
  return out;
}

namespace detail {

/// Per class, the member row with the smallest cosine distance to target(c);
/// ties go to the lowest index.
template <class TargetFn>
std::vector<std::size_t> closest_member_per_class(const EmbeddingTable& emb, TargetFn target) {
  emb.validate();
  const std::size_t c = emb.num_classes();
  std::vector<std::size_t> best(c, SIZE_MAX);
  std::vector<double> best_d(c, INFINITY);
  for (std::size_t i = 0; i < emb.rows(); ++i) {
    const std::uint32_t l = emb.labels[i];
    const double d = cosine_distance(emb.features.row(i), target(l));
    if (d < best_d[l]) {
      best_d[l] = d;
      best[l] = i;
    }
  }
  for (std::size_t k = 0; k < c; ++k)
    if (best[k] == SIZE_MAX) throw InvalidArgument("baseline: class " + std::to_string(k) + " is empty");
  return best;
}

}  // namespace detail

/// Per class, the real row closest (cosine) to the class mean embedding.
inline std::vector<std::size_t> baseline_centroids(const EmbeddingTable& emb) {
  emb.validate();
  const std::size_t c = emb.num_classes(), f = emb.dim();
  Tensor means(Dims{std::max<std::size_t>(c, 1), f});
  std::vector<double> counts(c, 0.0);
  for (std::size_t i = 0; i < emb.rows(); ++i) {
    auto row = emb.features.row(i);
    auto m = means.row(emb.labels[i]);
    for (std::size_t k = 0; k < f; ++k) m[k] += row[k];
    counts[emb.labels[i]] += 1;
  }
  for (std::size_t k = 0; k < c; ++k)
    for (double& v : means.row(k)) v /= counts[k];
  return detail::closest_member_per_class(emb, [&](std::uint32_t l) { return means.row(l); });
}

/// Per class c, the real row of class c closest (cosine) to synthetic feature c.
inline std::vector<std::size_t> baseline_neighbors(const EmbeddingTable& emb, const Tensor& synthetic_features) {
  if (synthetic_features.rank() != 2 || synthetic_features.dim(1) != emb.dim() || synthetic_features.dim(0) < emb.num_classes())
    throw ShapeError("baseline_neighbors: synthetic features must be [c, f]");
  return detail::closest_member_per_class(emb, [&](std::uint32_t l) { return synthetic_features.row(l); });
}

/// 1-NN accuracy under cosine distance; ties go to the lowest train index.
inline double knn_eval(const EmbeddingTable& train, const EmbeddingTable& test) {
  train.validate();
  test.validate();
  if (train.rows() == 0 || test.rows() == 0) throw InvalidArgument("knn_eval: empty table");
  if (train.dim() != test.dim()) throw ShapeError("knn_eval: feature dims differ");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < test.rows(); ++i) {
    std::size_t best = 0;
    double best_d = INFINITY;
    for (std::size_t j = 0; j < train.rows(); ++j) {
      const double d = cosine_distance(test.features.row(i), train.features.row(j));
      if (d < best_d) {
        best_d = d;
        best = j;
      }
    }
    hits += train.labels[best] == test.labels[i];
  }
  return static_cast<double>(hits) / static_cast<double>(test.rows());
}

namespace detail {

/// k nearest rows (cosine, excluding self) for every row, each list sorted.
inline std::vector<std::vector<std::size_t>> cosine_knn(const Tensor& x, std::size_t k) {
  const std::size_t n = x.dim(0);
  std::vector<std::vector<double>> unit(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = x.row(i);
    const double nr = norm2(r);
    if (!(nr > 0)) throw InvalidArgument("mutual_knn_alignment: zero embedding row");
    unit[i].resize(r.size());
    for (std::size_t j = 0; j < r.size(); ++j) unit[i][j] = r[j] / nr;
  }
  std::vector<std::vector<std::size_t>> out(n);
  std::vector<std::pair<double, std::size_t>> cand;
  for (std::size_t i = 0; i < n; ++i) {
    cand.clear();
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) cand.emplace_back(1.0 - dot(unit[i], unit[j]), j);
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(k), cand.end());
    for (std::size_t t = 0; t < k; ++t) out[i].push_back(cand[t].second);
    std::sort(out[i].begin(), out[i].end());
  }
  return out;
}

}  // namespace detail

/// Mean over rows of |kNN_A(i) ∩ kNN_B(i)| / k, cosine neighbors excluding self.
inline double mutual_knn_alignment(const Tensor& a, const Tensor& b, std::size_t k) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(0) != b.dim(0)) throw ShapeError("mutual_knn_alignment: row counts differ");
  require_finite(a, "mutual_knn_alignment");
  require_finite(b, "mutual_knn_alignment");
  const std::size_t n = a.dim(0);
  if (k == 0 || k >= n) throw InvalidArgument("mutual_knn_alignment: need 1 <= k < n");
  const auto na = detail::cosine_knn(a, k), nb = detail::cosine_knn(b, k);
  double total = 0;
  std::vector<std::size_t> common;
  for (std::size_t i = 0; i < n; ++i) {
    common.clear();
    std::set_intersection(na[i].begin(), na[i].end(), nb[i].begin(), nb[i].end(), std::back_inserter(common));
    total += static_cast<double>(common.size()) / static_cast<double>(k);
  }
  return total / static_cast<double>(n);
}

inline double mutual_knn_alignment(const EmbeddingTable& a, const EmbeddingTable& b, std::size_t k) {
  return mutual_knn_alignment(a.features, b.features, k);
}

struct PcaResult {
  Tensor coords;                       // [n, 2]
  std::vector<std::uint32_t> labels;
  std::array<double, 2> variance{};    // eigenvalues, descending
};

/// Projection onto the top two principal axes. Each axis is signed so that its
/// largest-magnitude coordinate is positive.
inline PcaResult pca2(const EmbeddingTable& emb) {
  emb.validate();
  const std::size_t n = emb.rows(), f = emb.dim();
  if (n == 0) throw InvalidArgument("pca2: empty table");
  Eigen::MatrixXd x(n, f);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = emb.features.at(i, j);
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  PcaResult out;
  out.coords = Tensor(Dims{n, 2});
  out.labels = emb.labels;
  const Eigen::Index fi = static_cast<Eigen::Index>(f);
  for (int comp = 0; comp < 2 && comp < fi; ++comp) {
    const Eigen::Index col = fi - 1 - comp;  // eigenvalues ascend
    Eigen::VectorXd axis = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0) axis = -axis;
    out.variance[static_cast<std::size_t>(comp)] = std::max(0.0, eig.eigenvalues()(col));
    const Eigen::VectorXd proj = x * axis;
    for (std::size_t i = 0; i < n; ++i) out.coords.at(i, static_cast<std::size_t>(comp)) = proj(static_cast<Eigen::Index>(i));
  }
  return out;
}

inline void write_pca_csv(std::ostream& os, const PcaResult& p) {
  os << "x,y,label\n" << std::setprecision(17);
  for (std::size_t i = 0; i < p.labels.size(); ++i) os << p.coords.at(i, 0) << ',' << p.coords.at(i, 1) << ',' << p.labels[i] << '\n';
}

inline double mean_of(std::span<const double> v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Sample standard deviation (n - 1); 0 for fewer than two values.
inline double std_of(std::span<const double> v) {
  if (v.size() < 2) return 0.0;
  const double m = mean_of(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw InvalidArgument("median of empty sequence");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Accuracy mean +- std per training-set identity.
struct EvalReport {
  struct Row {
    std::string name;
    std::vector<double> accuracies;
  };
  std::vector<Row> rows;
  std::string config;

  void add(std::string name, std::vector<double> accs) { rows.push_back({std::move(name), std::move(accs)}); }

  void write_csv(std::ostream& os) const {
    os << "train_set,mean_accuracy,std_accuracy,runs\n" << std::setprecision(17);
    for (const Row& r : rows) os << r.name << ',' << mean_of(r.accuracies) << ',' << std_of(r.accuracies) << ',' << r.accuracies.size() << '\n';
  }

  void write_text(std::ostream& os) const {
    os << std::left << std::setw(16) << "Train Set" << "Accuracy (%)\n";
    for (const Row& r : rows) {
      os << std::left << std::setw(16) << r.name << std::fixed << std::setprecision(1) << 100 * mean_of(r.accuracies);
      if (r.accuracies.size() >= 2)
        os << " +- " << 100 * std_of(r.accuracies);
      else
        os << " (single run)";
      os << '\n';
    }
    os.unsetf(std::ios::fixed);
  }
};

}  // namespace lingm
