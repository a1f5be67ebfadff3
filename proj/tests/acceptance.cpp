// Acceptance checks A1-A9. Prints one PASS/FAIL line per criterion and exits
// non-zero if any fails. Criteria can be selected on the command line
// (e.g. `acceptance A4 A9`); A9 reuses the A4 and A5 runs.

#include <Eigen/Dense>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "lingm/lingm.hpp"
#include "support/fd.hpp"
#include "support/logreg_oracle.hpp"
#include "support/tmpdir.hpp"

using namespace lingm;
using testing_support::max_rel_error;
using testing_support::numeric_gradient;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Tensor normal_tensor(Dims d, RngStream& rng) {
  Tensor t(std::move(d));
  for (double& v : t.data()) v = rng.normal();
  return t;
}

Eigen::MatrixXd as_matrix(const EmbeddingTable& t) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.dim()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.dim(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.features.at(i, j);
  return m;
}

LabeledSet as_set(const DistillState& s) {
  LabeledSet out;
  out.samples = s.samples();
  out.labels = s.labels;
  out.num_classes = s.num_classes;
  return out;
}

double trailing_mean(const std::vector<StepMetrics>& m, std::size_t begin, std::size_t end) {
  double s = 0;
  std::size_t n = 0;
  for (std::size_t i = begin; i < end && i < m.size(); ++i)
    if (!m[i].skipped) s += m[i].meta_loss, ++n;
  return n ? s / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------- A1

Outcome a1_gradient_oracle() {
  RngStream rng(11, 1);
  double worst_head = 0;
  const std::vector<std::uint32_t> y{0, 1, 2, 1};
  for (int trial = 0; trial < 8; ++trial) {
    const LinearHead head = sample_head(rng, 3, 5, trial % 2 ? HeadInit::Normal : HeadInit::FanIn);
    const Tensor z = normal_tensor({4, 5}, rng);
    const GradientPair real{normal_tensor({3, 5}, rng), normal_tensor({3}, rng)};
    const bool bias = trial < 6;
    const ClassLoss cl = class_loss_and_grad(head, z, y);
    const Tensor analytic = meta_grad_features(head, z, y, cl.grad, real, bias);
    auto f = [&](const Tensor& zz) { return meta_loss(class_loss_and_grad(head, zz, y).grad, real, bias); };
    worst_head = std::max(worst_head, max_rel_error(analytic, numeric_gradient(f, z)));
  }

  LabeledSet data;
  data.num_classes = 2;
  for (int i = 0; i < 6; ++i) {
    Tensor t(Dims{3, 8, 8});
    for (double& v : t.data()) v = rng.uniform01();
    data.samples.push_back(std::move(t));
    data.labels.push_back(static_cast<std::uint32_t>(i % 2));
  }
  EncoderSpec es{"conv_small", {3, 8, 8}, 6};
  es.conv1 = 3;
  es.conv2 = 4;
  const auto enc = make_encoder(es);
  DistillConfig cfg;
  cfg.resolution = 8;
  cfg.rounds = 2;
  DistillState s = init_distill_state(cfg, data);
  double worst_chain = 0;
  for (std::size_t active : {2u, 4u}) {
    for (auto& p : s.pyramids) p.active_count = active;
    const RngStream step(5, active);
    const StepGradients g = meta_gradients(s, data, *enc, step);
    if (g.metrics.skipped) return {false, "full-chain step was degenerate"};
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t l = 0; l < active; ++l) {
        auto f = [&](const Tensor& level) {
          DistillState q = s;
          q.pyramids[c].levels[l] = level;
          return meta_gradients(q, data, *enc, step).metrics.meta_loss;
        };
        worst_chain = std::max(worst_chain, max_rel_error(g.grads[c][l], numeric_gradient(f, s.pyramids[c].levels[l])));
      }
  }
  return {worst_head < 1e-6 && worst_chain < 1e-5,
          fmt("max rel error: analytic head %.2e (tol 1e-6), full chain %.2e (tol 1e-5)", worst_head, worst_chain)};
}

// ---------------------------------------------------------------- A2

Outcome a2_adjoints() {
  RngStream rng(12, 2);
  double worst = 0;
  auto track = [&](const Tensor& ax, const Tensor& y, const Tensor& x, const Tensor& aty) {
    worst = std::max(worst, std::abs(dot(ax.data(), y.data()) - dot(x.data(), aty.data())));
  };
  auto image = [&](std::size_t h, std::size_t w) {
    Tensor t(Dims{3, h, w});
    for (double& v : t.data()) v = rng.uniform(-1.0, 1.0);
    return t;
  };
  for (int t = 0; t < 100; ++t) {
    const std::size_t h = 1 + rng.below(24), w = 1 + rng.below(24), oh = 1 + rng.below(24), ow = 1 + rng.below(24);
    const Tensor x = image(h, w), y = image(oh, ow);
    track(bilinear_resize(x, oh, ow), y, x, bilinear_resize_vjp(y, h, w));
  }
  const std::vector<std::pair<const char*, AugmentConfig>> modes = [] {
    AugmentConfig flip = AugmentConfig::none(), crop = AugmentConfig::none(), noise = AugmentConfig::none(), all;
    flip.flip = true;
    crop.crop = true;
    noise.noise = true;
    return std::vector<std::pair<const char*, AugmentConfig>>{{"flip", flip}, {"crop", crop}, {"noise", noise}, {"all", all}};
  }();
  for (const auto& [name, base] : modes) {
    for (int t = 0; t < 100; ++t) {
      AugmentConfig cfg = base;
      const std::size_t h = 4 + rng.below(20), w = 4 + rng.below(20);
      cfg.out_h = 2 + rng.below(20);
      cfg.out_w = 2 + rng.below(20);
      const AugmentationParams p = sample_params(rng, cfg, h, w);
      const Tensor x = image(h, w), y = image(cfg.out_h, cfg.out_w);
      // Noise is an offset, so the linear part is apply(x) - apply(0).
      Tensor offset = apply(Tensor(x.dims()), p);
      offset *= -1.0;
      Tensor ax = apply(x, p);
      ax += offset;
      track(ax, y, x, apply_vjp(p, y));
    }
  }
  return {worst <= 1e-9, fmt("max |<Ax,y> - <x,A^T y>| = %.2e over 500 draws (tol 1e-9)", worst)};
}

// ---------------------------------------------------------------- A3

Outcome a3_meta_loss_identities() {
  RngStream rng(13, 3);
  double worst = 0;
  for (int t = 0; t < 50; ++t) {
    const GradientPair g{normal_tensor({4, 7}, rng), normal_tensor({4}, rng)};
    const GradientPair h{normal_tensor({4, 7}, rng), normal_tensor({4}, rng)};
    GradientPair neg = g, scaled_g = g, scaled_h = h;
    neg.weight *= -1.0;
    neg.bias *= -1.0;
    const double a = std::exp(rng.uniform(-5.0, 5.0)), b = std::exp(rng.uniform(-5.0, 5.0));
    scaled_g.weight *= a;
    scaled_g.bias *= a;
    scaled_h.weight *= b;
    scaled_h.bias *= b;
    worst = std::max({worst, std::abs(meta_loss(g, g)), std::abs(meta_loss(g, neg) - 2.0),
                      std::abs(meta_loss(scaled_g, h) - meta_loss(g, h)), std::abs(meta_loss(g, scaled_h) - meta_loss(g, h))});
    // Orthogonal pair: h minus its projection on g.
    const double proj = (dot(h.weight.data(), g.weight.data()) + dot(h.bias.data(), g.bias.data())) /
                        (dot(g.weight.data(), g.weight.data()) + dot(g.bias.data(), g.bias.data()));
    GradientPair orth = h, gp = g;
    gp.weight *= -proj;
    gp.bias *= -proj;
    orth.weight += gp.weight;
    orth.bias += gp.bias;
    worst = std::max(worst, std::abs(meta_loss(g, orth) - 1.0));
  }
  return {worst <= 1e-12, fmt("max deviation %.2e over 50 random gradient pairs (tol 1e-12)", worst)};
}

// ---------------------------------------------------------------- A4

struct VectorRuns {
  std::vector<double> distilled, centroid;
  double oracle = 0;
  std::vector<std::vector<StepMetrics>> metrics;
};

RunConfig a4_config() {
  RunConfig cfg;
  cfg.set("iterations", "1500");
  cfg.set("rounds", "20");
  cfg.set("noise_std", "1.0");
  cfg.set("probe_early_stop", "none");
  cfg.set("probe_lr", "0.01");
  return cfg;
}

const VectorRuns& vector_runs() {
  static const VectorRuns runs = [] {
    VectorRuns r;
    toy::GaussianMixtureSpec spec;
    const LabeledSet train = toy::gaussian_mixture(spec, RngStream(100, 1));
    const LabeledSet test = toy::gaussian_mixture(spec, RngStream(100, 2));
    IdentityEncoder enc(spec.dim);
    const EmbeddingTable tr = embed_dataset(enc, train), te = embed_dataset(enc, test);
    r.oracle = oracle::accuracy(oracle::fit_logreg(as_matrix(tr), tr.labels, static_cast<int>(spec.classes)), as_matrix(te), te.labels);
    RunConfig cfg = a4_config();
    const LabeledSet centroids = train.subset(baseline_centroids(tr));
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      cfg.set("seed", std::to_string(seed));
      const DistillResult res = distill(cfg.distill(), train, enc);
      const ProbeConfig pc = cfg.probe();
      const RngStream probe_rng(seed, 0x9B0);
      r.distilled.push_back(train_probe(as_set(res.state), enc, te, pc, probe_rng).accuracy);
      r.centroid.push_back(train_probe(centroids, enc, te, pc, probe_rng).accuracy);
      r.metrics.push_back(res.metrics);
    }
    return r;
  }();
  return runs;
}

Outcome a4_vector_toy() {
  const VectorRuns& r = vector_runs();
  const double med = median_of(r.distilled), cen = median_of(r.centroid);
  const bool pass = med >= r.oracle - 0.02 && med >= cen - 0.01;
  return {pass, fmt("distilled median %.3f (%.3f %.3f %.3f), oracle full-data %.3f (need >= %.3f), centroids %.3f (need >= %.3f)",
                    med, r.distilled[0], r.distilled[1], r.distilled[2], r.oracle, r.oracle - 0.02, cen, cen - 0.01)};
}

// ---------------------------------------------------------------- A5 / A6

struct ImageRuns {
  LabeledSet train;
  EmbeddingTable test_main, test_cross;
  std::unique_ptr<Encoder> main, cross;
  std::vector<LabeledSet> aug_sets, plain_sets;
  std::vector<std::vector<StepMetrics>> aug_metrics;
  double random_mean = 0;
  std::vector<double> random;
};

EncoderSpec shapes_encoder(std::uint64_t seed) {
  EncoderSpec es{"conv_small", {3, 32, 32}, 8};
  es.conv1 = 16;
  es.conv2 = 32;
  es.seed = seed;
  es.whiten = true;
  return es;
}

ProbeConfig shapes_probe() {
  ProbeConfig pc;
  pc.early_stop = EarlyStop::None;
  pc.lr = 0.01;
  pc.augmentation.area_min = 0.5;
  return pc;
}

DistillConfig shapes_distill(std::uint64_t seed, std::size_t rounds) {
  DistillConfig cfg;
  cfg.iterations = 2000;
  cfg.resolution = 32;
  cfg.rounds = rounds;
  cfg.seed = seed;
  cfg.augment.area_min = 0.5;
  return cfg;
}

ImageRuns& image_runs() {
  static ImageRuns runs = [] {
    ImageRuns r;
    toy::ShapesSpec spec;
    r.train = toy::shapes(spec, RngStream(200, 1));
    spec.per_class = 100;
    const LabeledSet test = toy::shapes(spec, RngStream(200, 2));
    r.main = make_encoder(shapes_encoder(0), r.train.samples);
    r.cross = make_encoder(shapes_encoder(1), r.train.samples);
    r.test_main = embed_dataset(*r.main, test);
    r.test_cross = embed_dataset(*r.cross, test);
    for (std::uint64_t s = 0; s < 10; ++s) {
      RngStream pick(s, 0xBA5E);
      const LabeledSet subset = r.train.subset(baseline_random(r.train.labels, 3, pick));
      r.random.push_back(train_probe(subset, *r.main, r.test_main, shapes_probe(), RngStream(s, 0x9B0)).accuracy);
    }
    r.random_mean = mean_of(r.random);
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
      const DistillResult res = distill(shapes_distill(seed, 5), r.train, *r.main);
      r.aug_sets.push_back(as_set(res.state));
      r.aug_metrics.push_back(res.metrics);
    }
    return r;
  }();
  return runs;
}

Outcome a5_image_toy() {
  ImageRuns& r = image_runs();
  std::vector<double> acc;
  for (std::size_t s = 0; s < r.aug_sets.size(); ++s)
    acc.push_back(train_probe(r.aug_sets[s], *r.main, r.test_main, shapes_probe(), RngStream(100 + s, 0x9B0)).accuracy);
  const double med = median_of(acc);
  return {med >= r.random_mean + 0.05,
          fmt("distilled median %.3f (%.3f %.3f %.3f) vs random %.3f +- %.3f over 10 seeds (need >= %.3f)", med, acc[0], acc[1],
              acc[2], r.random_mean, std_of(r.random), r.random_mean + 0.05)};
}

Outcome a6_augmentation_ablation() {
  ImageRuns& r = image_runs();
  std::vector<double> with_aug, without;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    const LabeledSet plain = as_set(distill(shapes_distill(seed, 0), r.train, *r.main).state);
    const RngStream probe_rng(200 + seed, 0x9B0);
    with_aug.push_back(train_probe(r.aug_sets[seed], *r.cross, r.test_cross, shapes_probe(), probe_rng).accuracy);
    without.push_back(train_probe(plain, *r.cross, r.test_cross, shapes_probe(), probe_rng).accuracy);
  }
  const double a = median_of(with_aug), b = median_of(without);
  return {b < a, fmt("cross-encoder median: k=5 %.3f (%.3f %.3f %.3f), k=0 %.3f (%.3f %.3f %.3f)", a, with_aug[0], with_aug[1],
                     with_aug[2], b, without[0], without[1], without[2])};
}

// ---------------------------------------------------------------- A7

Outcome a7_alignment() {
  RngStream rng(17, 7);
  const std::size_t n = 200, k = 10, f = 32;
  const Tensor x = normal_tensor({n, f}, rng);
  const double self = mutual_knn_alignment(x, x, k);

  std::vector<double> sims;
  for (int t = 0; t < 200; ++t) sims.push_back(mutual_knn_alignment(normal_tensor({n, f}, rng), normal_tensor({n, f}, rng), k));
  const double expect = static_cast<double>(k) / static_cast<double>(n - 1), sd = std_of(sims), sim_mean = mean_of(sims);
  const double fresh = mutual_knn_alignment(normal_tensor({n, f}, rng), normal_tensor({n, f}, rng), k);

  Eigen::MatrixXd g(f, f);
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  Tensor xr(x.dims());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < f; ++j) {
      double s = 0;
      for (std::size_t m = 0; m < f; ++m) s += x.at(i, m) * q(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(j));
      xr.at(i, j) = s;
    }
  const Tensor y = normal_tensor({n, f}, rng);
  const double rot_self = mutual_knn_alignment(x, xr, k);
  const bool rot_ok = rot_self == 1.0 && mutual_knn_alignment(xr, y, k) == mutual_knn_alignment(x, y, k);

  const bool pass = self == 1.0 && std::abs(fresh - expect) <= 3 * sd &&
                    std::abs(sim_mean - expect) <= 3 * sd / std::sqrt(static_cast<double>(sims.size())) && rot_ok;
  return {pass, fmt("self %.6f; random %.5f vs k/(n-1) %.5f (3 sigma %.5f, simulated mean %.5f); rotated self %.6f", self, fresh,
                    expect, 3 * sd, sim_mean, rot_self)};
}

// ---------------------------------------------------------------- A8

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome a8_determinism() {
  toy::ShapesSpec spec;
  spec.per_class = 10;
  const LabeledSet train = toy::shapes(spec, RngStream(300, 1));
  const auto enc = make_encoder(shapes_encoder(0), train.samples);
  DistillConfig cfg = shapes_distill(7, 3);
  cfg.iterations = 40;
  cfg.level_period = 10;
  testing_support::TempDir a, b;
  distill(cfg, train, *enc, a.path());
  distill(cfg, train, *enc, b.path());
  std::size_t compared = 0, differing = 0;
  for (const auto& e : std::filesystem::recursive_directory_iterator(a.path())) {
    if (!e.is_regular_file()) continue;
    const auto ext = e.path().extension();
    if (ext != ".ppm" && ext != ".csv") continue;
    const auto rel = std::filesystem::relative(e.path(), a.path());
    ++compared;
    const std::string lhs = slurp(e.path());
    if (lhs.empty() || lhs != slurp(b.path() / rel)) ++differing;
  }
  return {compared >= 4 && differing == 0, fmt("%zu PPM/CSV files compared, %zu differ", compared, differing)};
}

// ---------------------------------------------------------------- A9

Outcome a9_schedule() {
  std::size_t wrong_levels = 0, checked = 0;
  for (std::size_t t = 0; t < 5000; ++t) wrong_levels += scheduled_levels(t, 200, 9) != std::min<std::size_t>(1 + t / 200, 9);

  const ImageRuns& img = image_runs();
  for (const auto& run : img.aug_metrics)
    for (const StepMetrics& m : run) {
      ++checked;
      wrong_levels += m.active_levels != std::min<std::size_t>(1 + m.iteration / 200, 6);
    }

  std::ostringstream os;
  bool loss_ok = true;
  auto check_loss = [&](const char* name, const std::vector<std::vector<StepMetrics>>& runs) {
    for (std::size_t s = 0; s < runs.size(); ++s) {
      const double early = trailing_mean(runs[s], 0, 100);
      const double late = trailing_mean(runs[s], runs[s].size() - 100, runs[s].size());
      loss_ok = loss_ok && late < early;
      os << fmt(" %s[%zu] %.4f->%.4f", name, s, early, late);
    }
  };
  check_loss("A4", vector_runs().metrics);
  check_loss("A5", img.aug_metrics);
  return {wrong_levels == 0 && checked == 6000 && loss_ok,
          fmt("%zu level mismatches over %zu logged steps; mean meta loss first 100 -> last 100:", wrong_levels, checked) + os.str()};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"A1", a1_gradient_oracle}, {"A2", a2_adjoints},   {"A3", a3_meta_loss_identities}, {"A4", a4_vector_toy},
      {"A5", a5_image_toy},       {"A6", a6_augmentation_ablation}, {"A7", a7_alignment},  {"A8", a8_determinism},
      {"A9", a9_schedule}};
  std::set<std::string> only(argv + 1, argv + argc);
  int failures = 0;
  for (const auto& [id, run] : criteria) {
    if (!only.empty() && !only.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("%s %s  %s [%.1f s]\n", id.c_str(), o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
    std::fflush(stdout);
    failures += !o.pass;
  }
  std::printf("%d criteria failed\n", failures);
  return failures ? 1 : 0;
}
