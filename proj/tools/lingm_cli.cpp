#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "lingm/lingm.hpp"

namespace fs = std::filesystem;
using namespace lingm;

namespace {

constexpr std::uint64_t kValidationStream = 0x7A1;
constexpr std::uint64_t kProbeStream = 0x9B0;
constexpr std::uint64_t kRandomStream = 0xBA5E;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool needs_out) {
  cmd->add_option("--config", c.config, "key=value run configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", c.seed, "overrides the config seed");
  auto* out = cmd->add_option("--out", c.out, "output directory");
  if (needs_out) out->required();
}

RunConfig resolve(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : RunConfig::from_file(c.config);
  cfg.apply_env();
  if (c.seed) cfg.set("seed", std::to_string(*c.seed));
  return cfg;
}

const std::string& require_path(const RunConfig& cfg, const std::string& key) {
  const std::string& p = cfg.str(key);
  if (p.empty()) throw ConfigError("config key '" + key + "' must name a path");
  return p;
}

bool is_image_set(const LabeledSet& d) { return d.samples.front().rank() == 3; }

std::unique_ptr<Encoder> build_encoder(const RunConfig& cfg, const LabeledSet& data) {
  if (!cfg.str("encoder_dir").empty()) return load_encoder(cfg.str("encoder_dir"));
  Dims in = data.samples.front().dims();
  if (!is_image_set(data)) return make_encoder(cfg.encoder(in));
  const std::size_t r = cfg.size("resolution");
  const EncoderSpec spec = cfg.encoder({in[0], r, r});
  if (!spec.whiten) return make_encoder(spec);
  const LabeledSet fit = preprocess_for_eval(data, r);
  return make_encoder(spec, fit.samples);
}

/// Images are brought to the encoder input size with the evaluation
/// resize-and-center-crop; vectors pass through.
LabeledSet prepare_for_encoder(const LabeledSet& data, const Encoder& enc) {
  if (!is_image_set(data)) return data;
  const Dims in = enc.input_shape();
  if (in.size() != 3 || in[1] != in[2]) throw ShapeError("image data needs a square [C, R, R] encoder input");
  return preprocess_for_eval(data, in[1]);
}

EmbeddingTable embed_for_eval(const LabeledSet& data, const Encoder& enc, const RunConfig& cfg) {
  EmbeddingTable t = embed_dataset(enc, prepare_for_encoder(data, enc), cfg.size("embed_batch"));
  t.class_names = data.class_names;
  t.layer = "last";
  return t;
}

std::vector<std::vector<std::size_t>> read_index_lines(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError(path.string() + ": cannot open index file");
  std::vector<std::vector<std::size_t>> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::size_t> idx;
    std::string tok;
    while (ls >> tok) {
      std::size_t pos = 0;
      unsigned long long v = 0;
      try {
        v = std::stoull(tok, &pos);
      } catch (const std::exception&) {
        pos = 0;
      }
      if (pos != tok.size()) throw FormatError(path.string() + ": bad index '" + tok + "'");
      idx.push_back(static_cast<std::size_t>(v));
    }
    if (!idx.empty()) out.push_back(std::move(idx));
  }
  if (out.empty()) throw FormatError(path.string() + ": no index sets");
  return out;
}

void write_index_lines(const fs::path& path, const std::vector<std::vector<std::size_t>>& sets) {
  std::ofstream out(path);
  if (!out) throw IoError(path.string() + ": cannot open for writing");
  for (const auto& s : sets) {
    for (std::size_t i = 0; i < s.size(); ++i) out << (i ? " " : "") << s[i];
    out << '\n';
  }
}

int cmd_distill(const Common& c) {
  const RunConfig cfg = resolve(c);
  const DistillConfig dc = cfg.distill();
  const LabeledSet data = load_dataset(require_path(cfg, "data"));
  const auto enc = build_encoder(cfg, data);
  const fs::path out = c.out;
  cfg.write(out);
  save_encoder(*enc, out / "encoder");
  const DistillResult res = distill(dc, data, *enc, out);
  double tail = 0;
  std::size_t n = 0;
  for (std::size_t i = res.metrics.size() > 100 ? res.metrics.size() - 100 : 0; i < res.metrics.size(); ++i)
    if (!res.metrics[i].skipped) tail += res.metrics[i].meta_loss, ++n;
  std::printf("distilled %zu classes in %zu iterations (%zu skipped); mean meta loss over last %zu steps %.6f\n",
              res.state.num_classes, res.state.iteration, res.state.skipped, n, n ? tail / static_cast<double>(n) : 0.0);
  return 0;
}

int cmd_eval_probe(const Common& c, const std::vector<std::string>& sample_dirs, const std::vector<std::string>& index_files,
                   bool full) {
  const RunConfig cfg = resolve(c);
  const ProbeConfig pc = cfg.probe();
  const LabeledSet data = load_dataset(require_path(cfg, "data"));
  const LabeledSet test = load_dataset(require_path(cfg, "test_data"));
  const auto enc = build_encoder(cfg, data);
  const fs::path out = c.out;
  cfg.write(out);

  const EmbeddingTable test_emb = embed_for_eval(test, *enc, cfg);
  const std::uint64_t seed = cfg.u64("seed");
  LabeledSet pool = data;
  std::optional<EmbeddingTable> val_emb;
  if (pc.early_stop == EarlyStop::Validation) {
    auto [keep, held] = split_holdout(data, cfg.real("val_fraction"), RngStream(seed, kValidationStream));
    if (held.size() == 0) throw ConfigError("val_fraction leaves no validation samples");
    val_emb = embed_for_eval(held, *enc, cfg);
    pool = std::move(keep);
  }
  const std::size_t repeats = std::max<std::size_t>(1, cfg.size("eval_seeds"));

  EvalReport report;
  report.config = cfg.to_string();
  auto run_set = [&](const std::string& name, const std::vector<LabeledSet>& sets) {
    std::vector<double> accs;
    for (std::size_t s = 0; s < sets.size(); ++s)
      for (std::size_t r = 0; r < repeats; ++r) {
        const RngStream rng = RngStream(seed + r, kProbeStream).fork(s);
        accs.push_back(train_probe(sets[s], *enc, test_emb, pc, rng, val_emb).accuracy);
      }
    report.add(name, accs);
    std::printf("%-24s %.4f (%zu runs)\n", name.c_str(), mean_of(accs), accs.size());
  };

  for (const auto& d : sample_dirs) {
    fs::path dir = d;
    if (fs::exists(dir / "final" / "samples.ndt")) dir /= "final";
    LabeledSet syn = load_sample_set(dir);
    syn.num_classes = std::max(syn.num_classes, data.num_classes);
    run_set("distilled:" + fs::path(d).filename().string(), {syn});
  }
  for (const auto& f : index_files) {
    std::vector<LabeledSet> sets;
    for (const auto& idx : read_index_lines(f)) {
      for (std::size_t i : idx)
        if (i >= data.size()) throw InvalidArgument(f + ": index " + std::to_string(i) + " out of range");
      LabeledSet sub = data.subset(idx);
      sub.num_classes = data.num_classes;
      sets.push_back(std::move(sub));
    }
    run_set(fs::path(f).stem().string(), sets);
  }
  if (full) run_set("full", {pool});
  if (report.rows.empty()) throw ConfigError("eval-probe: nothing to evaluate (use --samples, --indices or --full)");

  std::ofstream csv(out / "report.csv"), txt(out / "report.txt");
  if (!csv || !txt) throw IoError(out.string() + ": cannot write report");
  report.write_csv(csv);
  report.write_text(txt);
  return 0;
}

int cmd_baselines(const Common& c, const std::string& samples) {
  const RunConfig cfg = resolve(c);
  const LabeledSet data = load_dataset(require_path(cfg, "data"));
  const auto enc = build_encoder(cfg, data);
  const fs::path out = c.out;
  cfg.write(out);
  const EmbeddingTable emb = embed_for_eval(data, *enc, cfg);

  std::vector<std::vector<std::size_t>> random;
  for (std::size_t s = 0; s < cfg.size("random_seeds"); ++s) {
    RngStream rng(cfg.u64("seed") + s, kRandomStream);
    random.push_back(baseline_random(data.labels, data.num_classes, rng));
  }
  write_index_lines(out / "random.txt", random);
  write_index_lines(out / "centroids.txt", {baseline_centroids(emb)});
  if (!samples.empty()) {
    fs::path dir = samples;
    if (fs::exists(dir / "final" / "samples.ndt")) dir /= "final";
    const LabeledSet syn = load_sample_set(dir);
    std::vector<Tensor> items;
    for (const Tensor& x : syn.samples) items.push_back(detail::fit_to_encoder(x, *enc));
    const Tensor feats = enc->forward(stack(items));
    if (feats.dim(0) != data.num_classes) throw ShapeError(dir.string() + ": expected one sample per class");
    write_index_lines(out / "neighbors.txt", {baseline_neighbors(emb, feats)});
  }
  std::printf("wrote baselines to %s\n", out.string().c_str());
  return 0;
}

int cmd_embed(const Common& c, const std::string& data_override) {
  RunConfig cfg = resolve(c);
  if (!data_override.empty()) cfg.set("data", data_override);
  const LabeledSet data = load_dataset(require_path(cfg, "data"));
  const auto enc = build_encoder(cfg, data);
  const fs::path out = c.out;
  const EmbeddingTable t = embed_for_eval(data, *enc, cfg);
  save_embeddings(t, out);
  cfg.write(out);
  std::printf("embedded %zu samples to %zu features\n", t.rows(), t.dim());
  return 0;
}

int cmd_align(const std::string& a, const std::string& b, std::size_t k) {
  const EmbeddingTable ta = load_embeddings(a), tb = load_embeddings(b);
  std::printf("%.6f\n", mutual_knn_alignment(ta, tb, k));
  return 0;
}

int cmd_pca(const std::string& table, const std::string& out) {
  const PcaResult p = pca2(load_embeddings(table));
  std::ofstream os(out);
  if (!os) throw IoError(out + ": cannot open for writing");
  write_pca_csv(os, p);
  std::printf("explained variance %.6f %.6f\n", p.variance[0], p.variance[1]);
  return 0;
}

int cmd_toy(const std::string& kind, const std::string& out, std::uint64_t seed, std::size_t per_class, std::size_t test_per_class) {
  const fs::path root = out;
  if (kind == "gaussian") {
    toy::GaussianMixtureSpec spec;
    spec.samples = per_class * spec.classes;
    save_vector_dataset(toy::gaussian_mixture(spec, RngStream(seed, 1)), root / "train");
    spec.samples = test_per_class * spec.classes;
    save_vector_dataset(toy::gaussian_mixture(spec, RngStream(seed, 2)), root / "test");
  } else if (kind == "shapes") {
    toy::ShapesSpec spec;
    spec.per_class = per_class;
    save_image_folder(toy::shapes(spec, RngStream(seed, 1)), root / "train");
    spec.per_class = test_per_class;
    save_image_folder(toy::shapes(spec, RngStream(seed, 2)), root / "test");
  } else {
    throw InvalidArgument("toy: unknown kind '" + kind + "' (gaussian or shapes)");
  }
  std::printf("wrote %s/train and %s/test\n", out.c_str(), out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Linear gradient matching dataset distillation"};
  app.require_subcommand(1);

  Common distill_opts;
  auto* distill_cmd = app.add_subcommand("distill", "distill one synthetic sample per class");
  add_common(distill_cmd, distill_opts, true);

  Common probe_opts;
  std::vector<std::string> probe_samples, probe_indices;
  bool probe_full = false;
  auto* probe_cmd = app.add_subcommand("eval-probe", "train linear probes and write an accuracy report");
  add_common(probe_cmd, probe_opts, true);
  probe_cmd->add_option("--samples", probe_samples, "distilled sample set directory (repeatable)");
  probe_cmd->add_option("--indices", probe_indices, "index file from `baselines`, one set per line (repeatable)");
  probe_cmd->add_flag("--full", probe_full, "also train on the full dataset");

  Common base_opts;
  std::string base_samples;
  auto* base_cmd = app.add_subcommand("baselines", "select Random / Centroids / Neighbors coresets");
  add_common(base_cmd, base_opts, true);
  base_cmd->add_option("--samples", base_samples, "distilled set for the Neighbors selection");

  std::string align_a, align_b;
  std::size_t align_k = 10;
  auto* align_cmd = app.add_subcommand("align", "mutual k-NN alignment of two embedding tables");
  align_cmd->add_option("a", align_a, "first embedding directory")->required();
  align_cmd->add_option("b", align_b, "second embedding directory")->required();
  align_cmd->add_option("-k,--k", align_k, "neighborhood size");

  std::string pca_table, pca_out;
  auto* pca_cmd = app.add_subcommand("pca", "2-D PCA projection of an embedding table to CSV");
  pca_cmd->add_option("table", pca_table, "embedding directory")->required();
  pca_cmd->add_option("--out", pca_out, "CSV path")->required();

  Common embed_opts;
  std::string embed_data;
  auto* embed_cmd = app.add_subcommand("embed", "embed a dataset with the configured encoder");
  add_common(embed_cmd, embed_opts, true);
  embed_cmd->add_option("--data", embed_data, "dataset directory (overrides the config)");

  std::string toy_kind = "gaussian", toy_out;
  std::uint64_t toy_seed = 0;
  std::size_t toy_train = 100, toy_test = 100;
  auto* toy_cmd = app.add_subcommand("toy", "write a synthetic train/test dataset");
  toy_cmd->add_option("--kind", toy_kind, "gaussian or shapes");
  toy_cmd->add_option("--out", toy_out, "output directory")->required();
  toy_cmd->add_option("--seed", toy_seed, "generator seed");
  toy_cmd->add_option("--train-per-class", toy_train, "training samples per class");
  toy_cmd->add_option("--test-per-class", toy_test, "test samples per class");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*distill_cmd) return cmd_distill(distill_opts);
    if (*probe_cmd) return cmd_eval_probe(probe_opts, probe_samples, probe_indices, probe_full);
    if (*base_cmd) return cmd_baselines(base_opts, base_samples);
    if (*align_cmd) return cmd_align(align_a, align_b, align_k);
    if (*pca_cmd) return cmd_pca(pca_table, pca_out);
    if (*embed_cmd) return cmd_embed(embed_opts, embed_data);
    if (*toy_cmd) return cmd_toy(toy_kind, toy_out, toy_seed, toy_train, toy_test);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return 3;
  } catch (const IoError& e) {
    std::fprintf(stderr, "io error: %s\n", e.what());
    return 4;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 5;
  }
  return 1;
}
