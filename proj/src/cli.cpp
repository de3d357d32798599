#include "mirror/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <memory>
#include <sstream>
#include <utility>

#include <CLI11.hpp>
#include <json.hpp>

#include "mirror/encoders.hpp"
#include "mirror/errors.hpp"
#include "mirror/eval.hpp"
#include "mirror/rna_select.hpp"
#include "mirror/rng.hpp"
#include "mirror/synth_cohort.hpp"
#include "mirror/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace mirror::cli {
namespace {

struct ConfigEntry {
  std::string key;
  std::vector<std::string> values;
};

std::vector<ConfigEntry> parse_json_config(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ValidationError(std::string("config: ") + e.what());
  }
  const json& opts = j.contains("options") ? j.at("options") : j;
  if (!opts.is_object()) throw ValidationError("config: expected an object of options");
  auto scalar = [](const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
  std::vector<ConfigEntry> entries;
  for (auto it = opts.begin(); it != opts.end(); ++it) {
    if (it->is_null()) continue;
    ConfigEntry e{it.key(), {}};
    if (it->is_array()) {
      for (const auto& v : *it) e.values.push_back(scalar(v));
    } else {
      e.values.push_back(scalar(*it));
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

// Either `key = value` lines or a resolved_config.json written by a previous run.
std::vector<ConfigEntry> read_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("config file not found: " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '{') return parse_json_config(text);
  std::vector<ConfigEntry> entries;
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    const std::string trimmed = CLI::detail::trim_copy(line);
    if (trimmed.empty()) continue;
    const auto eq = trimmed.find('=');
    if (eq == std::string::npos) throw ValidationError("config line " + std::to_string(line_no) + ": expected key=value");
    ConfigEntry e{CLI::detail::trim_copy(trimmed.substr(0, eq)), {CLI::detail::trim_copy(trimmed.substr(eq + 1))}};
    if (e.key.empty()) throw ValidationError("config line " + std::to_string(line_no) + ": empty key");
    entries.push_back(std::move(e));
  }
  return entries;
}

// A subcommand plus a record of every option so the effective values can be echoed.
struct Command {
  CLI::App* app = nullptr;
  std::vector<std::pair<std::string, std::function<json()>>> echo;

  template <typename T>
  CLI::Option* add(const std::string& name, T& var, const std::string& help) {
    echo.emplace_back(name, [&var] { return json(var); });
    return app->add_option("--" + name, var, help)->capture_default_str();
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& help) {
    echo.emplace_back(name, [&var] { return json(var); });
    return app->add_flag("--" + name, var, help);
  }

  json resolved() const {
    json j;
    j["command"] = app->get_name();
    json opts = json::object();
    for (const auto& [name, get] : echo) opts[name] = get();
    j["options"] = std::move(opts);
    return j;
  }

  void write_resolved(const fs::path& dir) const {
    fs::create_directories(dir);
    std::ofstream out(dir / "resolved_config.json");
    if (!out) throw IoError("cannot write " + (dir / "resolved_config.json").string());
    out << resolved().dump(2) << "\n";
  }
};

Command make_command(CLI::App& root, const std::string& name, const std::string& help) {
  Command c;
  c.app = root.add_subcommand(name, help);
  c.app->option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  c.app->add_option("--config", "key=value config file or a resolved_config.json; flags take precedence");
  return c;
}

void require_dir(const std::string& path, const std::string& what) {
  if (!fs::is_directory(path)) throw IoError(what + " directory not found: " + path);
}

void require_file(const std::string& path, const std::string& what) {
  if (!fs::is_regular_file(path)) throw IoError(what + " not found: " + path);
}

// ---- synth ------------------------------------------------------------------------------

struct SynthArgs {
  CohortConfig cohort;
  std::string out;
};

void add_synth(CLI::App& root, SynthArgs& a, std::vector<Command>& cmds) {
  Command c = make_command(root, "synth", "generate a paired synthetic cohort");
  c.add("out", a.out, "output dataset directory")->required();
  auto& k = a.cohort;
  c.add("samples", k.n_samples, "number of paired samples");
  c.add("classes", k.n_classes, "number of subtypes");
  c.add("d-p", k.d_p, "patch feature width");
  c.add("genes", k.k_genes, "genes per profile");
  c.add("informative-genes", k.n_informative_genes, "genes driven by latent factors");
  c.add("d-rs", k.d_rs, "shared relevant factor width");
  c.add("d-ru", k.d_ru, "modality-specific relevant factor width");
  c.add("d-is", k.d_is, "shared irrelevant factor width");
  c.add("d-iu", k.d_iu, "modality-specific irrelevant factor width");
  c.add("tumor-fraction", k.tumor_patch_fraction, "fraction of tumor patches per slide");
  c.add("patches-min", k.patches_min, "minimum patches per slide");
  c.add("patches-max", k.patches_max, "maximum patches per slide");
  c.add("censor-fraction", k.censor_fraction, "fraction of censored survival labels");
  c.add("class-separation", k.class_separation, "distance between subtype means of the shared factors");
  c.add("slide-noise", k.slide_noise, "noise sd on tumor patches");
  c.add("rna-noise", k.rna_noise, "noise sd on informative genes");
  c.add("survival-noise", k.survival_noise, "noise sd on log survival time");
  c.add("seed", k.seed, "generator seed");
  cmds.push_back(c);
}

void do_synth(const SynthArgs& a, const Command& c) {
  a.cohort.validate();
  auto [ds, gt] = generate_cohort(a.cohort);
  write_dataset(ds, a.out);
  write_ground_truth(gt, fs::path(a.out) / "ground_truth.json");
  c.write_resolved(a.out);
  std::cout << "synth: " << ds.size() << " samples written to " << a.out << "\n";
}

// ---- select-genes --------------------------------------------------------------------------

struct SelectArgs {
  std::string input, labels, curated, out;
  int k = 32;
  int folds = 5;
  int step = 1;
  double reg = 1e-2;
  std::uint64_t seed = 0;
};

void add_select(CLI::App& root, SelectArgs& a, std::vector<Command>& cmds) {
  Command c = make_command(root, "select-genes", "recursive feature elimination over expression");
  c.add("input", a.input, "expression CSV or dataset directory")->required();
  c.add("labels", a.labels, "sample_id,label CSV (not needed for a dataset directory)");
  c.add("k", a.k, "genes kept by elimination");
  c.add("folds", a.folds, "cross-validation folds");
  c.add("step", a.step, "genes removed per round (0 = 10% of the remainder)");
  c.add("reg", a.reg, "L2 penalty of the importance classifier");
  c.add("curated", a.curated, "file with curated gene ids, one per line");
  c.add("out", a.out, "output directory")->required();
  c.add("seed", a.seed, "fold assignment seed");
  cmds.push_back(c);
}

void do_select(const SelectArgs& a, const Command& c) {
  ExpressionTable table;
  std::vector<int> y;
  if (fs::is_directory(a.input)) {
    const Dataset ds = read_dataset(a.input);
    table.gene_ids = *ds.gene_ids;
    table.values.resize(static_cast<Eigen::Index>(ds.size()), ds.k_genes);
    for (std::size_t i = 0; i < ds.size(); ++i) {
      table.sample_ids.push_back(ds.samples[i].rna.sample_id);
      table.values.row(static_cast<Eigen::Index>(i)) = ds.samples[i].rna.values.cast<double>().transpose();
    }
    y = a.labels.empty() ? ds.labels() : read_labels_csv(a.labels, table.sample_ids);
  } else {
    require_file(a.input, "expression table");
    if (a.labels.empty()) throw ValidationError("select-genes: --labels is required for a CSV input");
    require_file(a.labels, "labels file");
    table = read_expression_csv(a.input);
    y = read_labels_csv(a.labels, table.sample_ids);
  }
  std::vector<std::string> curated;
  if (!a.curated.empty()) {
    require_file(a.curated, "curated gene list");
    curated = read_gene_list(a.curated);
  }
  RfeOptions opts;
  opts.k_target = a.k;
  opts.step = a.step;
  opts.reg = a.reg;
  const RfeCvResult cv = rfe_cv(table.values, y, table.gene_ids, opts, a.folds, a.seed);
  const GenePanel panel = merge_panel(cv.panel, curated, table.gene_ids);

  const fs::path out(a.out);
  fs::create_directories(out);
  write_panel_json(panel, out / "panel.json");
  write_trace_csv(cv.trace, out / "rfe_trace.csv");
  {
    std::ofstream f(out / "cv_scores.csv");
    f << "fold,n_features,accuracy\n" << std::setprecision(17);
    for (std::size_t i = 0; i < cv.trace.cv_scores.size(); ++i)
      f << i << "," << cv.trace.cv_scores[i].first << "," << cv.trace.cv_scores[i].second << "\n";
  }
  c.write_resolved(out);
  std::cout << "select-genes: " << panel.gene_ids.size() << " genes (" << cv.panel.gene_ids.size()
            << " from elimination), best fold " << cv.best_fold << "\n";
}

// ---- pretrain ------------------------------------------------------------------------------

struct PretrainArgs {
  std::string data, out;
  ModelConfig model;
  TrainConfig train;
  bool no_ppeg = false, no_retention = false, no_style = false;
  std::string precision = "f32";
  int log_every = 1;  // epochs
};

void add_model_options(Command& c, ModelConfig& m, bool& no_ppeg) {
  c.add("dim", m.dim, "shared latent width");
  c.add("rna-dim", m.rna_dim, "RNA token width");
  c.add("heads", m.heads, "attention heads");
  c.add("depth", m.depth, "attention blocks per encoder");
  c.add("retention-depth", m.retention_depth, "blocks in each retention decoder");
  c.add("mlp-ratio", m.mlp_ratio, "MLP hidden width multiplier");
  c.add("n-fixed", m.n_fixed, "patches sampled per slide");
  c.add("rna-groups", m.rna_groups, "gene groups tokenized by the RNA encoder");
  c.add("style-dim", m.style_dim, "style code width");
  c.add("clusters", m.clusters, "style cluster centers");
  c.flag("no-ppeg", no_ppeg, "disable the positional convolution");
}

void add_objective_options(Command& c, ObjectiveConfig& o, bool& no_retention, bool& no_style) {
  c.add("tau", o.tau, "alignment logit scale");
  c.add("kappa", o.kappa, "cluster assignment sharpness");
  c.add("slide-mask-ratio", o.slide_mask_ratio, "fraction of patch tokens masked");
  c.add("rna-mask-ratio", o.rna_mask_ratio, "fraction of gene tokens masked");
  c.add("w-align", o.w_align, "alignment loss weight");
  c.add("w-retention", o.w_retention, "retention loss weight");
  c.add("w-style", o.w_style, "style loss weight");
  c.flag("no-retention", no_retention, "disable the retention module");
  c.flag("no-style", no_style, "disable the style clustering module");
}

void add_pretrain(CLI::App& root, PretrainArgs& a, std::vector<Command>& cmds) {
  Command c = make_command(root, "pretrain", "self-supervised pretraining");
  c.add("data", a.data, "dataset directory")->required();
  c.add("out", a.out, "output directory")->required();
  add_model_options(c, a.model, a.no_ppeg);
  add_objective_options(c, a.train.objective, a.no_retention, a.no_style);
  c.add("epochs", a.train.epochs, "passes over the dataset");
  c.add("batch", a.train.batch_size, "samples per step");
  c.add("lr", a.train.learning_rate, "Adam learning rate");
  c.add("beta1", a.train.beta1, "Adam beta1");
  c.add("beta2", a.train.beta2, "Adam beta2");
  c.add("adam-eps", a.train.adam_eps, "Adam epsilon");
  c.add("precision", a.precision, "training arithmetic")->check(CLI::IsMember({"f32", "f64"}));
  c.add("log-every", a.log_every, "print epoch means every N epochs");
  c.add("seed", a.train.seed, "initialization and sampling seed");
  cmds.push_back(c);
}

void do_pretrain(PretrainArgs a, const Command& c) {
  require_dir(a.data, "dataset");
  const Dataset ds = read_dataset(a.data);
  a.model.d_p = ds.d_p;
  a.model.k_genes = ds.k_genes;
  a.model.use_ppeg = !a.no_ppeg;
  a.train.objective.use_retention = !a.no_retention;
  a.train.objective.use_style = !a.no_style;
  a.train.precision = a.precision == "f64" ? Precision::f64 : Precision::f32;
  a.model.validate();
  a.train.validate();
  if (a.log_every < 1) throw ValidationError("pretrain: --log-every must be >= 1");

  const fs::path out(a.out);
  fs::create_directories(out);
  c.write_resolved(out);

  const auto t0 = std::chrono::steady_clock::now();
  ModelState state = init_state(a.model, a.train.seed);
  std::vector<TrainLogEntry> epoch_log;
  int current_epoch = 0;
  auto flush = [&] {
    if (epoch_log.empty()) return;
    const LossBreakdown m = epoch_means(epoch_log).back();
    if (current_epoch % a.log_every == 0 || current_epoch + 1 == a.train.epochs)
      std::cout << "epoch " << current_epoch << " step " << epoch_log.back().step << " align " << m.l_align
                << " retention " << m.l_retention << " style " << m.l_style << " cluster " << m.l_cluster
                << " total " << m.l_total << std::endl;
    epoch_log.clear();
  };
  TrainResult r = train(ds, std::move(state), a.train, [&](const TrainLogEntry& e) {
    if (e.epoch != current_epoch) {
      flush();
      current_epoch = e.epoch;
    }
    epoch_log.push_back(e);
  });
  flush();
  save_checkpoint(r.state, out / "checkpoint.mirc");
  write_train_log(r.log, out / "train_log.csv");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream msg;
  msg << "pretrain: " << r.log.size() << " steps in " << std::fixed << std::setprecision(1) << secs
      << " s, checkpoint " << (out / "checkpoint.mirc").string() << "\n";
  std::cout << msg.str();
}

// ---- gradcheck -----------------------------------------------------------------------------

struct GradcheckArgs {
  std::string data, out;
  ModelConfig model;
  ObjectiveConfig objective;
  bool no_ppeg = false, no_retention = false, no_style = false;
  double tolerance = 1e-4;
  int batch = 2;
  int coords = 20;
  double relative_step = 1e-5;
  double error_floor = 1e-5;
  std::uint64_t seed = 0;
};

void add_gradcheck(CLI::App& root, GradcheckArgs& a, std::vector<Command>& cmds) {
  Command c = make_command(root, "gradcheck", "finite-difference check of every parameter gradient");
  c.add("tolerance", a.tolerance, "maximum relative error");
  c.add("batch", a.batch, "samples in the checked batch");
  c.add("coords", a.coords, "coordinates checked per parameter tensor");
  c.add("relative-step", a.relative_step, "central difference step relative to max(1, |theta|)");
  c.add("error-floor", a.error_floor, "denominator floor of the relative error");
  c.add("data", a.data, "dataset directory (default: a generated cohort)");
  c.add("out", a.out, "directory for gradcheck.json");
  add_model_options(c, a.model, a.no_ppeg);
  add_objective_options(c, a.objective, a.no_retention, a.no_style);
  c.add("seed", a.seed, "seed for parameters, batch and coordinates");
  cmds.push_back(c);
}

bool do_gradcheck(GradcheckArgs a, const Command& c) {
  if (a.batch < 2) throw ValidationError("gradcheck: --batch must be >= 2");
  Dataset ds;
  if (!a.data.empty()) {
    require_dir(a.data, "dataset");
    ds = read_dataset(a.data);
  } else {
    CohortConfig cc;
    cc.n_samples = a.batch;
    cc.d_p = a.model.d_p;
    cc.k_genes = a.model.k_genes;
    cc.n_informative_genes = std::min(cc.n_informative_genes, cc.k_genes);
    cc.seed = a.seed;
    ds = generate_cohort(cc).first;
  }
  if (static_cast<int>(ds.size()) < a.batch) throw ValidationError("gradcheck: dataset smaller than --batch");
  a.model.d_p = ds.d_p;
  a.model.k_genes = ds.k_genes;
  a.model.use_ppeg = !a.no_ppeg;
  a.objective.use_retention = !a.no_retention;
  a.objective.use_style = !a.no_style;
  a.model.validate();
  a.objective.validate();

  const auto t0 = std::chrono::steady_clock::now();
  const ModelState state = init_state(a.model, a.seed);
  std::vector<int> idx(static_cast<std::size_t>(a.batch));
  for (int i = 0; i < a.batch; ++i) idx[static_cast<std::size_t>(i)] = i;
  const Batch batch = make_batch(ds, idx, a.model.n_fixed, derive_seed(a.seed, 0xb47c));
  GradCheckOptions opts;
  opts.tolerance = a.tolerance;
  opts.coords_per_tensor = a.coords;
  opts.relative_step = a.relative_step;
  opts.error_floor = a.error_floor;
  opts.seed = a.seed;
  const GradCheckReport rep = finite_diff_check(state, batch, a.objective, opts);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  json entries = json::array();
  for (const auto& e : rep.entries) {
    std::cout << std::left << std::setw(44) << e.name << " coords " << std::setw(4) << e.coordinates
              << " max_rel_error " << std::scientific << std::setprecision(3) << e.max_rel_error
              << std::defaultfloat << "\n";
    entries.push_back({{"name", e.name}, {"coordinates", e.coordinates}, {"max_rel_error", e.max_rel_error}});
  }
  std::cout << "gradcheck: " << (rep.passed ? "PASS" : "FAIL") << " max relative error " << std::scientific
            << rep.max_rel_error << " (tolerance " << rep.tolerance << ")" << std::defaultfloat << " in "
            << std::fixed << std::setprecision(1) << secs << " s" << std::defaultfloat << "\n";
  if (!a.out.empty()) {
    c.write_resolved(a.out);
    json j;
    j["passed"] = rep.passed;
    j["tolerance"] = rep.tolerance;
    j["max_rel_error"] = rep.max_rel_error;
    j["seconds"] = secs;
    j["entries"] = std::move(entries);
    std::ofstream(fs::path(a.out) / "gradcheck.json") << j.dump(2) << "\n";
  }
  return rep.passed;
}

// ---- probe ---------------------------------------------------------------------------------

struct ProbeArgs {
  std::string checkpoint, data, out;
  std::string task = "subtype";
  std::string setting = "all";
  std::string representation = "combined";
  int folds = 5;
  int shots = 10;
  double reg = kProbeRegularization;
  std::uint64_t seed = 0;
};

void add_probe(CLI::App& root, ProbeArgs& a, std::vector<Command>& cmds) {
  Command c = make_command(root, "probe", "linear probes on frozen embeddings");
  c.add("checkpoint", a.checkpoint, "checkpoint file")->required();
  c.add("data", a.data, "dataset directory")->required();
  c.add("out", a.out, "output directory for metrics.json and metrics.csv")->required();
  c.add("task", a.task, "subtype or survival")->check(CLI::IsMember({"subtype", "survival"}));
  c.add("setting", a.setting, "10shot or all")->check(CLI::IsMember({"10shot", "all"}));
  c.add("representation", a.representation, "combined, slide or rna")
      ->check(CLI::IsMember({"combined", "slide", "rna"}));
  c.add("folds", a.folds, "cross-validation folds");
  c.add("shots", a.shots, "training samples per class in the 10shot setting");
  c.add("reg", a.reg, "L2 penalty of the probe");
  c.add("seed", a.seed, "fold and few-shot sampling seed");
  cmds.push_back(c);
}

void do_probe(const ProbeArgs& a, const Command& c) {
  require_file(a.checkpoint, "checkpoint");
  require_dir(a.data, "dataset");
  if (a.task == "survival" && a.setting != "all")
    throw ValidationError("probe: survival supports only --setting all");
  const ModelState state = load_checkpoint(a.checkpoint);
  const Dataset ds = read_dataset(a.data);
  const Embeddings e = compute_embeddings(state, ds);
  const Eigen::MatrixXd x = a.representation == "slide" ? e.s_cls : a.representation == "rna" ? e.t_vec : e.combined();
  const FoldPlan plan = make_folds(ds, a.folds, a.seed);

  std::vector<MetricRow> rows;
  if (a.task == "subtype") {
    const std::string setting = a.setting == "all" ? "all-data" : std::to_string(a.shots) + "-shot";
    const ProbeResult r = a.setting == "all"
                              ? linear_probe(x, ds.labels(), ds.n_classes, plan, a.reg)
                              : few_shot_probe(x, ds.labels(), ds.n_classes, plan, a.shots, a.seed, a.reg);
    rows = probe_rows("subtype", setting, r);
  } else {
    std::vector<SurvivalLabel> y;
    for (const auto& s : ds.samples) y.push_back(s.survival);
    rows = survival_rows("all-data", survival_fit_eval(x, y, plan, a.reg));
  }
  const fs::path out(a.out);
  fs::create_directories(out);
  write_metrics(rows, out / "metrics.json", out / "metrics.csv");
  c.write_resolved(out);
  std::cout << summarize_metrics(rows);
}

// ---- attn ----------------------------------------------------------------------------------

struct AttnArgs {
  std::string checkpoint, data, slide_id, out;
  std::uint64_t seed = kEvalBagSeed;
};

void add_attn(CLI::App& root, AttnArgs& a, std::vector<Command>& cmds) {
  Command c = make_command(root, "attn", "class-token attention over the patches of one slide");
  c.add("checkpoint", a.checkpoint, "checkpoint file")->required();
  c.add("data", a.data, "dataset directory")->required();
  c.add("slide-id", a.slide_id, "slide to explain")->required();
  c.add("out", a.out, "attention CSV path")->required();
  c.add("seed", a.seed, "bag sampling seed (default matches probe embeddings)");
  cmds.push_back(c);
}

void do_attn(const AttnArgs& a, const Command& c) {
  require_file(a.checkpoint, "checkpoint");
  require_dir(a.data, "dataset");
  const ModelState state = load_checkpoint(a.checkpoint);
  const Dataset ds = read_dataset(a.data);
  const auto it = std::find_if(ds.samples.begin(), ds.samples.end(),
                               [&](const PairedSample& s) { return s.bag.slide_id == a.slide_id; });
  if (it == ds.samples.end()) throw ValidationError("attn: unknown slide id " + a.slide_id);
  if (it->bag.features.cols() != state.model.cfg.d_p)
    throw DimensionError("attn: dataset patch width does not match the checkpoint");
  const SampledBag bag = sample_bag(it->bag, state.model.cfg.n_fixed, derive_seed(a.seed, id_hash(a.slide_id)));
  const SlideEncoding enc = encode_slide(state.model, state.params, bag.features.cast<double>());
  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_attention_csv(out, bag, enc.attention);
  c.write_resolved(out.has_parent_path() ? out.parent_path() : fs::path("."));
  std::cout << "attn: " << bag.rows.size() << " patches written to " << out.string() << "\n";
}

// ---- report --------------------------------------------------------------------------------

struct ReportArgs {
  std::vector<std::string> metrics;
  std::string out;
  std::uint64_t seed = 0;
};

void add_report(CLI::App& root, ReportArgs& a, std::vector<Command>& cmds) {
  Command c = make_command(root, "report", "summarize metrics.csv files");
  c.add("metrics", a.metrics, "metrics.csv files or directories containing one")->required();
  c.add("out", a.out, "write the table to this file as well");
  c.add("seed", a.seed, "unused; accepted for uniformity");
  cmds.push_back(c);
}

void do_report(const ReportArgs& a, const Command& c) {
  std::vector<MetricRow> rows;
  for (const auto& m : a.metrics) {
    const fs::path p = fs::is_directory(m) ? fs::path(m) / "metrics.csv" : fs::path(m);
    require_file(p.string(), "metrics file");
    auto r = read_metrics_csv(p);
    rows.insert(rows.end(), r.begin(), r.end());
  }
  const std::string table = summarize_metrics(rows);
  std::cout << table;
  if (!a.out.empty()) {
    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    std::ofstream f(out);
    if (!f) throw IoError("cannot write " + out.string());
    f << table;
    c.write_resolved(out.has_parent_path() ? out.parent_path() : fs::path("."));
  }
}

// Splices the entries of the subcommand's --config file in front of the
// command-line flags, so flags given explicitly win.
std::vector<std::string> expand_config(const CLI::App& app, const std::vector<std::string>& args) {
  if (args.empty()) return args;
  const CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(args.front());
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  std::vector<std::string> rest;
  std::string config;
  for (std::size_t i = 1; i < args.size(); ++i) {
    if (args[i] == "--config") {
      if (i + 1 >= args.size()) throw ValidationError("--config requires a path");
      config = args[++i];
    } else if (args[i].rfind("--config=", 0) == 0) {
      config = args[i].substr(9);
    } else {
      rest.push_back(args[i]);
    }
  }
  std::vector<std::string> out{args.front()};
  if (!config.empty()) {
    for (const auto& e : read_config(config)) {
      const CLI::Option* opt = sub->get_option_no_throw("--" + e.key);
      if (opt == nullptr || e.key == "config" || e.key == "help")
        throw ValidationError("config: unknown key '" + e.key + "' for " + sub->get_name());
      if (e.values.size() == 1) {
        out.push_back("--" + e.key + "=" + e.values.front());
      } else {
        out.push_back("--" + e.key);
        out.insert(out.end(), e.values.begin(), e.values.end());
      }
    }
  }
  out.insert(out.end(), rest.begin(), rest.end());
  return out;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  struct FormatGuard {
    std::ios saved{nullptr};
    FormatGuard() { saved.copyfmt(std::cout); }
    ~FormatGuard() { std::cout.copyfmt(saved); }
  } guard;
  CLI::App app{"mirror: multimodal self-supervised pretraining on paired slides and transcriptomes"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "expand all help");

  std::vector<Command> cmds;
  SynthArgs synth;
  SelectArgs select;
  PretrainArgs pretrain;
  GradcheckArgs gradcheck;
  ProbeArgs probe;
  AttnArgs attn;
  ReportArgs report;
  add_synth(app, synth, cmds);
  add_select(app, select, cmds);
  add_pretrain(app, pretrain, cmds);
  add_gradcheck(app, gradcheck, cmds);
  add_probe(app, probe, cmds);
  add_attn(app, attn, cmds);
  add_report(app, report, cmds);

  try {
    const std::vector<std::string> expanded = expand_config(app, args);
    std::vector<std::string> reversed(expanded.rbegin(), expanded.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }

  auto cmd = [&](const char* name) -> const Command& {
    return *std::find_if(cmds.begin(), cmds.end(), [&](const Command& c) { return c.app->get_name() == name; });
  };
  try {
    if (cmd("synth").app->parsed()) do_synth(synth, cmd("synth"));
    else if (cmd("select-genes").app->parsed()) do_select(select, cmd("select-genes"));
    else if (cmd("pretrain").app->parsed()) do_pretrain(pretrain, cmd("pretrain"));
    else if (cmd("gradcheck").app->parsed()) return do_gradcheck(gradcheck, cmd("gradcheck")) ? 0 : 1;
    else if (cmd("probe").app->parsed()) do_probe(probe, cmd("probe"));
    else if (cmd("attn").app->parsed()) do_attn(attn, cmd("attn"));
    else if (cmd("report").app->parsed()) do_report(report, cmd("report"));
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}

int run(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return run(args);
}

}  // namespace mirror::cli
