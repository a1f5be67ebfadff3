#pragma once

// Linear gradient matching: synthetic samples are optimized so that, through a
// frozen encoder, they induce the same classifier gradient direction as real
// data for randomly drawn linear heads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lingm/adam.hpp"
#include "lingm/augment.hpp"
#include "lingm/embedding.hpp"
#include "lingm/encoder.hpp"
#include "lingm/imgparam.hpp"
#include "lingm/ops.hpp"
#include "lingm/ppm.hpp"

namespace lingm {

enum class HeadInit { Normal, FanIn };

inline HeadInit parse_head_init(const std::string& s) {
  if (s == "normal") return HeadInit::Normal;
  if (s == "fanin") return HeadInit::FanIn;
  throw InvalidArgument("unknown head init '" + s + "' (expected normal or fanin)");
}

inline std::string to_string(HeadInit h) { return h == HeadInit::Normal ? "normal" : "fanin"; }

struct LinearHead {
  Tensor weight;  // [c, f]
  Tensor bias;    // [c]

  std::size_t classes() const { return weight.dim(0); }
  std::size_t features() const { return weight.dim(1); }

  /// Logits [N, c] for features z [N, f].
  Tensor logits(const Tensor& z) const {
    if (z.rank() != 2 || z.dim(1) != features())
      throw ShapeError("linear head: features must be [N, " + std::to_string(features()) + "], got " + dims_string(z.dims()));
    const std::size_t n = z.dim(0), c = classes();
    Tensor out(Dims{n, c});
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) = bias[j] + dot(weight.row(j), z.row(i));
    return out;
  }
};

/// normal: W ~ N(0, 1), b = 0. fanin: W, b ~ U[-1/sqrt(f), 1/sqrt(f)].
inline LinearHead sample_head(RngStream& rng, std::size_t classes, std::size_t features, HeadInit mode) {
  if (classes == 0 || features == 0) throw InvalidArgument("sample_head: sizes must be positive");
  LinearHead h{Tensor(Dims{classes, features}), Tensor(Dims{classes})};
  if (mode == HeadInit::Normal) {
    for (double& v : h.weight.data()) v = rng.normal();
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(features));
    for (double& v : h.weight.data()) v = rng.uniform(-bound, bound);
    for (double& v : h.bias.data()) v = rng.uniform(-bound, bound);
  }
  return h;
}

/// Classifier gradient (dl/dW, dl/db).
struct GradientPair {
  Tensor weight;  // [c, f]
  Tensor bias;    // [c]

  double norm(bool include_bias = true) const {
    double s = dot(weight.data(), weight.data());
    if (include_bias) s += dot(bias.data(), bias.data());
    return std::sqrt(s);
  }
};

struct ClassLoss {
  double loss = 0;
  GradientPair grad;
  Tensor probs;  // [N, c]
};

namespace detail {

inline Tensor row_softmax(const Tensor& logits) {
  Tensor p(logits.dims());
  for (std::size_t i = 0; i < logits.dim(0); ++i) softmax_into(logits.row(i), p.row(i));
  return p;
}

inline void check_labels(std::span<const std::uint32_t> labels, std::size_t n, std::size_t c) {
  if (labels.size() != n) throw ShapeError("label count " + std::to_string(labels.size()) + " != batch size " + std::to_string(n));
  for (auto l : labels)
    if (l >= c) throw InvalidArgument("label " + std::to_string(l) + " out of range for " + std::to_string(c) + " classes");
}

}  // namespace detail

/// Mean cross-entropy of W z_i + b and its gradient w.r.t. (W, b).
inline ClassLoss class_loss_and_grad(const LinearHead& head, const Tensor& z, std::span<const std::uint32_t> labels) {
  require_finite(z, "class_loss_and_grad features");
  const Tensor logits = head.logits(z);
  const std::size_t n = z.dim(0), c = head.classes(), f = head.features();
  detail::check_labels(labels, n, c);
  ClassLoss out;
  out.loss = cross_entropy(logits, labels);
  out.probs = detail::row_softmax(logits);
  out.grad.weight = Tensor(Dims{c, f});
  out.grad.bias = Tensor(Dims{c});
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<double> delta(c);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = out.probs.row(i);
    for (std::size_t j = 0; j < c; ++j) delta[j] = (p[j] - (labels[i] == j ? 1.0 : 0.0)) * inv_n;
    auto zi = z.row(i);
    for (std::size_t j = 0; j < c; ++j) {
      out.grad.bias[j] += delta[j];
      auto gw = out.grad.weight.row(j);
      for (std::size_t k = 0; k < f; ++k) gw[k] += delta[j] * zi[k];
    }
  }
  return out;
}

namespace detail {

inline void check_pair_shapes(const GradientPair& a, const GradientPair& b) {
  a.weight.require_same_shape(b.weight, "meta_loss weight gradients");
  a.bias.require_same_shape(b.bias, "meta_loss bias gradients");
}

inline double pair_dot(const GradientPair& a, const GradientPair& b, bool include_bias) {
  double s = dot(a.weight.data(), b.weight.data());
  if (include_bias) s += dot(a.bias.data(), b.bias.data());
  return s;
}

}  // namespace detail

/// 1 - cos(vec(syn), vec(real)), in [0, 2].
inline double meta_loss(const GradientPair& syn, const GradientPair& real, bool include_bias = true) {
  detail::check_pair_shapes(syn, real);
  const double ns = syn.norm(include_bias), nr = real.norm(include_bias);
  if (!(ns > 0)) throw DegenerateGradient("synthetic classifier gradient has zero norm");
  if (!(nr > 0)) throw DegenerateGradient("real classifier gradient has zero norm");
  const double cosine = std::clamp(detail::pair_dot(syn, real, include_bias) / (ns * nr), -1.0, 1.0);
  return 1.0 - cosine;
}

/// d meta_loss / d z_syn with the head and the real gradient held fixed.
/// With (U, v) = d meta_loss / d(G_W, G_b) = -(r_hat - cos * s_hat) / |s|:
///   dz_i = (1/N) [ U^T (p_i - y_i) + W^T (diag(p_i) - p_i p_i^T) (U z_i + v) ]
inline Tensor meta_grad_features(const LinearHead& head, const Tensor& z_syn, std::span<const std::uint32_t> labels_syn,
                                 const GradientPair& g_syn, const GradientPair& g_real, bool include_bias = true) {
  detail::check_pair_shapes(g_syn, g_real);
  require_finite(z_syn, "meta_grad_features features");
  const std::size_t n = z_syn.dim(0), c = head.classes(), f = head.features();
  detail::check_labels(labels_syn, n, c);
  const double ns = g_syn.norm(include_bias), nr = g_real.norm(include_bias);
  if (!(ns > 0)) throw DegenerateGradient("synthetic classifier gradient has zero norm");
  if (!(nr > 0)) throw DegenerateGradient("real classifier gradient has zero norm");
  const double cosine = detail::pair_dot(g_syn, g_real, include_bias) / (ns * nr);

  Tensor u(Dims{c, f});
  std::vector<double> v(c, 0.0);
  for (std::size_t i = 0; i < u.size(); ++i) u[i] = -(g_real.weight[i] / nr - cosine * g_syn.weight[i] / ns) / ns;
  if (include_bias)
    for (std::size_t j = 0; j < c; ++j) v[j] = -(g_real.bias[j] / nr - cosine * g_syn.bias[j] / ns) / ns;

  const Tensor probs = detail::row_softmax(head.logits(z_syn));
  const double inv_n = 1.0 / static_cast<double>(n);
  Tensor out(Dims{n, f});
  std::vector<double> delta(c), a(c), ja(c);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = probs.row(i);
    auto zi = z_syn.row(i);
    for (std::size_t j = 0; j < c; ++j) {
      delta[j] = p[j] - (labels_syn[i] == j ? 1.0 : 0.0);
      a[j] = dot(u.row(j), zi) + v[j];
    }
    const double pa = dot(p, a);
    for (std::size_t j = 0; j < c; ++j) ja[j] = p[j] * (a[j] - pa);
    auto gi = out.row(i);
    for (std::size_t j = 0; j < c; ++j) {
      auto uj = u.row(j);
      auto wj = head.weight.row(j);
      for (std::size_t k = 0; k < f; ++k) gi[k] += (delta[j] * uj[k] + ja[j] * wj[k]) * inv_n;
    }
  }
  return out;
}

struct DistillConfig {
  std::size_t iterations = 5000;
  std::size_t level_period = 200;
  /// Augmented copies of the synthetic batch per step; 0 disables augmentation.
  std::size_t rounds = 10;
  double lr = 0.002;
  HeadInit head_init = HeadInit::FanIn;
  bool include_bias = true;
  bool pyramid = true;
  bool decorrelate = true;
  std::size_t resolution = 256;
  double sigmoid_gain = 1.0;
  AugmentConfig augment;
  std::uint64_t seed = 0;
  std::size_t checkpoint_every = 0;
  std::size_t failure_budget = 100;
  /// Standard deviation of the N(0, s^2) init for vector-mode samples.
  double vector_init_std = 0.01;
  /// Real images per step; 0 matches the expanded synthetic batch.
  std::size_t real_batch = 0;

  bool augment_enabled() const { return rounds > 0; }

  void validate() const {
    if (level_period == 0) throw ConfigError("distill: level period must be positive");
    if (!(lr > 0)) throw ConfigError("distill: learning rate must be positive");
    if (!(sigmoid_gain > 0)) throw ConfigError("distill: sigmoid gain must be positive");
    if (!is_power_of_two(resolution)) throw ConfigError("distill: resolution must be a power of two");
    augment.validate();
  }
};

/// Everything a distillation run carries between steps.
struct DistillState {
  DistillConfig config;
  std::size_t num_classes = 0;
  bool vector_mode = false;
  std::vector<PyramidImage> pyramids;        // image mode, one per class
  std::vector<Tensor> vectors;               // vector mode, one per class
  std::vector<std::uint32_t> labels;         // 0..c-1, never modified
  ColorTransform color;
  std::vector<std::vector<AdamState>> adam;  // per class, per level (or one per vector)
  std::size_t iteration = 0;
  std::size_t skipped = 0;

  Tensor sample(std::size_t c) const {
    return vector_mode ? vectors[c] : render(pyramids[c], color, config.sigmoid_gain);
  }

  std::vector<Tensor> samples() const {
    std::vector<Tensor> out;
    for (std::size_t c = 0; c < num_classes; ++c) out.push_back(sample(c));
    return out;
  }

  std::size_t active_levels() const { return vector_mode ? 1 : pyramids.front().active_count; }
};

struct StepMetrics {
  std::size_t iteration = 0;
  double meta_loss = 0;
  double ell_real = 0;
  double ell_syn = 0;
  double grad_norm_syn = 0;
  double grad_norm_real = 0;
  std::size_t active_levels = 0;
  bool skipped = false;
};

inline AugmentConfig effective_augment(const DistillConfig& cfg, bool vector_mode) {
  AugmentConfig a = cfg.augment_enabled() ? cfg.augment : AugmentConfig::none();
  a.rounds = cfg.augment_enabled() ? cfg.rounds : 1;
  if (vector_mode) {
    a.flip = a.crop = false;
  } else {
    a.out_h = a.out_w = cfg.resolution;
  }
  return a;
}

/// One synthetic sample per class, labels 0..c-1. Vector mode is chosen when
/// dataset samples are rank-1.
inline DistillState init_distill_state(const DistillConfig& config, const LabeledSet& data) {
  config.validate();
  data.validate();
  DistillState s;
  s.config = config;
  s.num_classes = data.num_classes;
  s.vector_mode = data.samples.front().rank() == 1;
  if (!s.vector_mode && (data.samples.front().rank() != 3 || data.samples.front().dim(0) != 3))
    throw ShapeError("distill: image samples must be [3, h, w]");
  RngStream init(config.seed, 0x1417);
  AdamHyper hyper;
  hyper.lr = config.lr;
  for (std::uint32_t c = 0; c < data.num_classes; ++c) {
    RngStream rng = init.fork(c);
    s.labels.push_back(c);
    std::vector<AdamState> adam;
    if (s.vector_mode) {
      Tensor v(data.samples.front().dims());
      for (double& x : v.data()) x = config.vector_init_std * rng.normal();
      adam.push_back(AdamState::fresh(v.dims(), hyper));
      s.vectors.push_back(std::move(v));
    } else {
      PyramidImage p = config.pyramid ? init_pyramid(rng, config.resolution) : init_pixels(rng, config.resolution);
      for (const Tensor& l : p.levels) adam.push_back(AdamState::fresh(l.dims(), hyper));
      s.pyramids.push_back(std::move(p));
    }
    s.adam.push_back(std::move(adam));
  }
  if (!s.vector_mode && config.decorrelate) s.color = color_matrix_from_dataset(data.samples);
  return s;
}

/// Active levels at iteration t: min(1 + t / period, level count).
inline std::size_t scheduled_levels(std::size_t iteration, std::size_t period, std::size_t level_count) {
  return std::min<std::size_t>(1 + iteration / period, level_count);
}

inline void apply_level_schedule(DistillState& s) {
  if (s.vector_mode) return;
  for (auto& p : s.pyramids) {
    const std::size_t want = scheduled_levels(s.iteration, s.config.level_period, p.level_count());
    while (p.active_count < want) p = activate_next_level(std::move(p));
  }
}

/// k distinct indices in [0, n) when k <= n; otherwise whole permutations
/// are concatenated.
inline std::vector<std::size_t> sample_indices(RngStream& rng, std::size_t n, std::size_t k) {
  std::vector<std::size_t> out;
  out.reserve(k);
  while (out.size() < k) {
    std::vector<std::size_t> perm(n);
    for (std::size_t i = 0; i < n; ++i) perm[i] = i;
    const std::size_t take = std::min(n, k - out.size());
    for (std::size_t i = 0; i < take; ++i) {
      const std::size_t j = i + rng.below(n - i);
      std::swap(perm[i], perm[j]);
      out.push_back(perm[i]);
    }
  }
  return out;
}

/// Meta loss and its gradient for one step, before any parameter update.
/// `grads[c]` holds one tensor per pyramid level (or a single tensor in vector
/// mode); it is empty when the step is degenerate.
struct StepGradients {
  StepMetrics metrics;
  std::vector<std::vector<Tensor>> grads;
};

inline StepGradients meta_gradients(const DistillState& s, const LabeledSet& data, const Encoder& enc, const RngStream& rng) {
  const DistillConfig& cfg = s.config;
  StepGradients out;
  StepMetrics& m = out.metrics;
  m.iteration = s.iteration;
  m.active_levels = s.active_levels();

  RngStream head_rng = rng.fork(1), syn_rng = rng.fork(2), pick_rng = rng.fork(3), real_rng = rng.fork(4);
  const LinearHead head = sample_head(head_rng, s.num_classes, enc.feature_dim(), cfg.head_init);

  const std::vector<Tensor> synthetic = s.samples();
  const AugmentConfig aug = effective_augment(cfg, s.vector_mode);
  const ExpandedBatch syn = expand_batch(synthetic, aug, syn_rng);
  const std::vector<std::uint32_t> syn_labels = replicate_labels<std::uint32_t>(s.labels, aug.rounds);

  const std::size_t n_real = cfg.real_batch ? cfg.real_batch : syn.items.size();
  const std::vector<std::size_t> picks = sample_indices(pick_rng, data.size(), n_real);
  std::vector<Tensor> real_items;
  std::vector<std::uint32_t> real_labels;
  real_items.reserve(picks.size());
  for (std::size_t i : picks) {
    const Tensor& x = data.samples[i];
    real_items.push_back(apply(x, draw_params_for(real_rng, aug, x)));
    real_labels.push_back(data.labels[i]);
  }

  const Tensor syn_batch = stack(syn.items);
  const Tensor z_syn = enc.forward(syn_batch);
  const Tensor z_real = enc.forward(stack(real_items));
  const ClassLoss cl_syn = class_loss_and_grad(head, z_syn, syn_labels);
  const ClassLoss cl_real = class_loss_and_grad(head, z_real, real_labels);
  m.ell_syn = cl_syn.loss;
  m.ell_real = cl_real.loss;
  m.grad_norm_syn = cl_syn.grad.norm(cfg.include_bias);
  m.grad_norm_real = cl_real.grad.norm(cfg.include_bias);

  Tensor dz;
  try {
    m.meta_loss = meta_loss(cl_syn.grad, cl_real.grad, cfg.include_bias);
    dz = meta_grad_features(head, z_syn, syn_labels, cl_syn.grad, cl_real.grad, cfg.include_bias);
  } catch (const DegenerateGradient&) {
    m.skipped = true;
    return out;
  }

  const Tensor dx = enc.vjp(syn_batch, dz);
  std::vector<Tensor> sample_grads;
  for (const Tensor& x : synthetic) sample_grads.emplace_back(x.dims());
  for (std::size_t j = 0; j < syn.items.size(); ++j)
    sample_grads[syn.source[j]] += apply_vjp(syn.params[j], unstack_item(dx, j).reshaped(syn.items[j].dims()));

  for (std::size_t c = 0; c < s.num_classes; ++c) {
    if (s.vector_mode)
      out.grads.push_back({std::move(sample_grads[c])});
    else
      out.grads.push_back(render_vjp(s.pyramids[c], s.color, sample_grads[c], cfg.sigmoid_gain));
  }
  return out;
}

/// One meta-optimization step. `rng` should be unique to this step.
inline StepMetrics distill_step(DistillState& s, const LabeledSet& data, const Encoder& enc, const RngStream& rng) {
  StepGradients g = meta_gradients(s, data, enc, rng);
  if (g.metrics.skipped) {
    ++s.skipped;
    ++s.iteration;
    if (s.skipped > s.config.failure_budget)
      throw DegenerateGradient("distill: more than " + std::to_string(s.config.failure_budget) + " degenerate steps");
    return g.metrics;
  }
  for (std::size_t c = 0; c < s.num_classes; ++c) {
    if (s.vector_mode) {
      adam_update(s.adam[c][0], s.vectors[c], g.grads[c][0]);
      continue;
    }
    PyramidImage& p = s.pyramids[c];
    for (std::size_t l = 0; l < p.active_count; ++l) adam_update(s.adam[c][l], p.levels[l], g.grads[c][l]);
  }
  ++s.iteration;
  return g.metrics;
}

inline void write_metrics_header(std::ostream& os) {
  os << "iteration,meta_loss,ell_real,ell_syn,grad_norm_syn,grad_norm_real,active_levels\n";
}

inline void write_metrics_row(std::ostream& os, const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%zu\n", m.iteration, m.meta_loss, m.ell_real, m.ell_syn,
                m.grad_norm_syn, m.grad_norm_real, m.active_levels);
  os << buf;
}

/// Synthetic set directory: samples.ndt [c, ...] + labels.ndt [c].
inline void save_sample_set(const std::filesystem::path& dir, std::span<const Tensor> samples,
                            const std::vector<std::uint32_t>& labels) {
  std::filesystem::create_directories(dir);
  ndt::write_f64(dir / "samples.ndt", stack(samples));
  ndt::write_u32(dir / "labels.ndt", labels);
}

inline LabeledSet load_sample_set(const std::filesystem::path& dir) {
  const Tensor all = ndt::read_f64(dir / "samples.ndt");
  const auto labels = ndt::read_u32(dir / "labels.ndt");
  if (all.rank() < 2 || labels.values.size() != all.dim(0))
    throw FormatError(dir.string() + ": samples.ndt and labels.ndt disagree on sample count");
  LabeledSet out;
  for (std::size_t i = 0; i < all.dim(0); ++i) out.samples.push_back(unstack_item(all, i));
  out.labels = labels.values;
  for (auto l : out.labels) out.num_classes = std::max<std::size_t>(out.num_classes, l + 1);
  return out;
}

inline void save_checkpoint(const DistillState& s, const std::filesystem::path& dir) {
  char name[32];
  for (std::size_t c = 0; c < s.num_classes; ++c) {
    std::snprintf(name, sizeof name, "class_%03zu", c);
    if (s.vector_mode) {
      std::filesystem::create_directories(dir);
      ndt::write_f64(dir / (std::string(name) + ".ndt"), s.vectors[c]);
    } else {
      save_pyramid(dir / name, s.pyramids[c], s.iteration);
    }
  }
}

struct DistillResult {
  DistillState state;
  std::vector<StepMetrics> metrics;
};

/// Full loop with the level schedule. When out_dir is set: metrics.csv,
/// checkpoints/iter_NNNNNN/ every checkpoint_every steps, and final/ with
/// samples.ndt + labels.ndt (plus class_NNN.ppm in image mode).
inline DistillResult distill(const DistillConfig& config, const LabeledSet& data, const Encoder& enc,
                             const std::optional<std::filesystem::path>& out_dir = std::nullopt,
                             const std::function<void(const StepMetrics&)>& on_step = {}) {
  DistillResult res{init_distill_state(config, data), {}};
  DistillState& s = res.state;
  std::ofstream csv;
  if (out_dir) {
    std::filesystem::create_directories(*out_dir);
    csv.open(*out_dir / "metrics.csv", std::ios::trunc);
    if (!csv) throw IoError((*out_dir / "metrics.csv").string() + ": cannot open for writing");
    write_metrics_header(csv);
  }
  const RngStream steps(config.seed, 0x57E9);
  while (s.iteration < config.iterations) {
    apply_level_schedule(s);
    StepMetrics m = distill_step(s, data, enc, steps.fork(s.iteration));
    if (!m.skipped && csv.is_open()) write_metrics_row(csv, m);
    if (on_step) on_step(m);
    res.metrics.push_back(m);
    if (out_dir && config.checkpoint_every && s.iteration % config.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "iter_%06zu", s.iteration);
      save_checkpoint(s, *out_dir / "checkpoints" / name);
    }
  }
  if (out_dir) {
    const auto final_dir = *out_dir / "final";
    const auto samples = s.samples();
    save_sample_set(final_dir, samples, s.labels);
    if (!s.vector_mode) {
      char name[32];
      for (std::size_t c = 0; c < s.num_classes; ++c) {
        std::snprintf(name, sizeof name, "class_%03zu.ppm", c);
        export_ppm(samples[c], final_dir / name);
      }
    }
  }
  return res;
}

}  // namespace lingm
