#include "mirror/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <set>

#include <json.hpp>

#include "mirror/errors.hpp"
#include "mirror/rng.hpp"

namespace mirror {

static_assert(std::endian::native == std::endian::little, "checkpoint codec assumes a little-endian host");

void TrainConfig::validate() const {
  if (epochs < 1) throw ValidationError("epochs must be >= 1");
  if (batch_size < 2) throw ValidationError("batch_size must be >= 2");
  if (!(learning_rate >= 0) || !std::isfinite(learning_rate)) throw ValidationError("learning_rate must be >= 0");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1 && adam_eps > 0))
    throw ValidationError("invalid Adam hyperparameters");
  objective.validate();
}

bool operator==(const ModelState& a, const ModelState& b) {
  if (!(a.params == b.params) || a.adam.step != b.adam.step) return false;
  auto same = [](const std::vector<Tensor>& x, const std::vector<Tensor>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i].rows() != y[i].rows() || x[i].cols() != y[i].cols()) return false;
      if (std::memcmp(x[i].data(), y[i].data(), sizeof(double) * static_cast<std::size_t>(x[i].size())) != 0)
        return false;
    }
    return true;
  };
  return same(a.adam.m, b.adam.m) && same(a.adam.v, b.adam.v);
}

namespace {

void reset_moments(ModelState& s) {
  s.adam.m.clear();
  s.adam.v.clear();
  for (int i = 0; i < s.params.size(); ++i) {
    s.adam.m.push_back(Tensor::Zero(s.params.value(i).rows(), s.params.value(i).cols()));
    s.adam.v.push_back(Tensor::Zero(s.params.value(i).rows(), s.params.value(i).cols()));
  }
  s.adam.step = 0;
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"d_p", c.d_p},
          {"k_genes", c.k_genes},
          {"dim", c.dim},
          {"rna_dim", c.rna_dim},
          {"heads", c.heads},
          {"depth", c.depth},
          {"retention_depth", c.retention_depth},
          {"mlp_ratio", c.mlp_ratio},
          {"n_fixed", c.n_fixed},
          {"rna_groups", c.rna_groups},
          {"use_ppeg", c.use_ppeg},
          {"style_dim", c.style_dim},
          {"clusters", c.clusters}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_p = j.at("d_p");
  c.k_genes = j.at("k_genes");
  c.dim = j.at("dim");
  c.rna_dim = j.at("rna_dim");
  c.heads = j.at("heads");
  c.depth = j.at("depth");
  c.retention_depth = j.at("retention_depth");
  c.mlp_ratio = j.at("mlp_ratio");
  c.n_fixed = j.at("n_fixed");
  c.rna_groups = j.at("rna_groups");
  c.use_ppeg = j.at("use_ppeg");
  c.style_dim = j.at("style_dim");
  c.clusters = j.at("clusters");
  return c;
}

template <typename T>
struct StepOutput {
  LossBreakdown loss;
  std::vector<std::pair<int, Tensor>> grads;
};

template <typename T>
StepOutput<T> loss_and_grads(const ModelState& s, const Batch& batch, const ObjectiveConfig& cfg,
                             const StepSeeds& seeds) {
  ad::Tape<T> tape;
  LossGraph<T> g = build_loss(tape, s.model, s.params, batch, cfg, Mode::train, seeds);
  StepOutput<T> out;
  out.loss = g.breakdown;
  if (!std::isfinite(out.loss.l_total)) return out;
  tape.backward(g.total);
  for (const auto& pg : tape.param_grads()) out.grads.emplace_back(pg.slot, pg.grad->template cast<double>());
  return out;
}

}  // namespace

ModelState init_state(const ModelConfig& cfg, std::uint64_t seed) {
  ModelState s;
  s.model = MirrorModel::declare(cfg, s.params);
  init_params(s.model, s.params, seed);
  reset_moments(s);
  return s;
}

TrainResult train(const Dataset& ds, ModelState state, const TrainConfig& cfg, const StepCallback& on_step) {
  cfg.validate();
  if (static_cast<int>(ds.size()) < cfg.batch_size)
    throw ValidationError("dataset has " + std::to_string(ds.size()) + " samples, fewer than batch_size " +
                          std::to_string(cfg.batch_size));
  if (ds.d_p != state.model.cfg.d_p || ds.k_genes != state.model.cfg.k_genes)
    throw DimensionError("dataset dimensions do not match the model (d_p " + std::to_string(ds.d_p) + ", k " +
                         std::to_string(ds.k_genes) + ")");
  if (static_cast<int>(state.adam.m.size()) != state.params.size()) reset_moments(state);

  auto trainable = [&](const std::string& name) {
    if (cfg.trainable_prefixes.empty()) return true;
    return std::any_of(cfg.trainable_prefixes.begin(), cfg.trainable_prefixes.end(),
                       [&](const std::string& p) { return name.rfind(p, 0) == 0; });
  };
  TrainResult result;
  std::vector<int> order(ds.size());
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = make_rng(cfg.seed, 0x5e00000ULL + static_cast<std::uint64_t>(epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start + 2 <= order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                                 order.begin() + static_cast<std::ptrdiff_t>(end));
      const std::int64_t step = state.adam.step + 1;
      const auto ustep = static_cast<std::uint64_t>(step);
      const Batch batch = make_batch(ds, idx, state.model.cfg.n_fixed, derive_seed(cfg.seed, 0xba90000000ULL + ustep));
      const StepSeeds seeds{derive_seed(cfg.seed, 0x3a50000000ULL + ustep), derive_seed(cfg.seed, 0x7e10000000ULL + ustep)};

      LossBreakdown loss;
      std::vector<std::pair<int, Tensor>> grads;
      if (cfg.precision == Precision::f32) {
        auto out = loss_and_grads<float>(state, batch, cfg.objective, seeds);
        loss = out.loss;
        grads = std::move(out.grads);
      } else {
        auto out = loss_and_grads<double>(state, batch, cfg.objective, seeds);
        loss = out.loss;
        grads = std::move(out.grads);
      }
      if (!std::isfinite(loss.l_total))
        throw NumericError("non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");

      state.adam.step = step;
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
      for (auto& [id, g] : grads) {
        if (!trainable(state.params.name(id))) continue;
        if (!g.allFinite())
          throw NumericError("non-finite gradient for '" + state.params.name(id) + "' at step " + std::to_string(step));
        Tensor& m = state.adam.m[static_cast<std::size_t>(id)];
        Tensor& v = state.adam.v[static_cast<std::size_t>(id)];
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        Tensor& p = state.params.value(id);
        p.array() -= cfg.learning_rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + cfg.adam_eps);
        if (!p.allFinite())
          throw NumericError("parameter '" + state.params.name(id) + "' became non-finite at step " +
                             std::to_string(step));
      }
      normalize_centers(state.model, state.params);

      TrainLogEntry entry{step, epoch, loss};
      result.log.push_back(entry);
      if (on_step) on_step(entry);
    }
  }
  result.state = std::move(state);
  return result;
}

std::vector<LossBreakdown> epoch_means(const std::vector<TrainLogEntry>& log) {
  std::vector<LossBreakdown> out;
  std::vector<int> counts;
  for (const auto& e : log) {
    if (e.epoch >= static_cast<int>(out.size())) {
      out.resize(static_cast<std::size_t>(e.epoch) + 1);
      counts.resize(static_cast<std::size_t>(e.epoch) + 1, 0);
    }
    LossBreakdown& b = out[static_cast<std::size_t>(e.epoch)];
    b.l_align += e.loss.l_align;
    b.l_retention += e.loss.l_retention;
    b.l_style += e.loss.l_style;
    b.l_cluster += e.loss.l_cluster;
    b.l_total += e.loss.l_total;
    b.w_align = e.loss.w_align;
    b.w_retention = e.loss.w_retention;
    b.w_style = e.loss.w_style;
    ++counts[static_cast<std::size_t>(e.epoch)];
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (counts[i] == 0) continue;
    const double n = counts[i];
    out[i].l_align /= n;
    out[i].l_retention /= n;
    out[i].l_style /= n;
    out[i].l_cluster /= n;
    out[i].l_total /= n;
  }
  return out;
}

void write_train_log(const std::vector<TrainLogEntry>& log, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(10);
  out << "step,l_align,l_retention,l_style,l_cluster,l_total\n";
  for (const auto& e : log)
    out << e.step << ',' << e.loss.l_align << ',' << e.loss.l_retention << ',' << e.loss.l_style << ','
        << e.loss.l_cluster << ',' << e.loss.l_total << '\n';
  if (!out) throw IoError("write failed for " + path.string());
}

// ---- checkpoint ---------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'M', 'I', 'R', 'C'};

template <typename U>
void put(std::ostream& out, U v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <typename U>
U get(std::istream& in, const std::string& what) {
  U v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(U));
  if (!in) throw FormatError("checkpoint truncated while reading " + what);
  return v;
}

void put_record(std::ostream& out, const std::string& name, const Tensor& t) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
  out.write(name.data(), static_cast<std::streamsize>(name.size()));
  put<std::uint32_t>(out, 2);
  put<std::uint64_t>(out, static_cast<std::uint64_t>(t.rows()));
  put<std::uint64_t>(out, static_cast<std::uint64_t>(t.cols()));
  out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(sizeof(double) * t.size()));
}

}  // namespace

void save_checkpoint(const ModelState& state, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kCheckpointMagic, 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  const std::string config = config_to_json(state.model.cfg).dump();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  put<std::int64_t>(out, state.adam.step);
  const bool moments = static_cast<int>(state.adam.m.size()) == state.params.size();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(state.params.size() * (moments ? 3 : 1)));
  for (int i = 0; i < state.params.size(); ++i) put_record(out, state.params.name(i), state.params.value(i));
  if (moments) {
    for (int i = 0; i < state.params.size(); ++i)
      put_record(out, "adam.m/" + state.params.name(i), state.adam.m[static_cast<std::size_t>(i)]);
    for (int i = 0; i < state.params.size(); ++i)
      put_record(out, "adam.v/" + state.params.name(i), state.adam.v[static_cast<std::size_t>(i)]);
  }
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

ModelState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) throw FormatError("not a checkpoint (bad magic): " + path.string());
  const auto version = get<std::uint32_t>(in, "version");
  if (version != kCheckpointVersion)
    throw FormatError("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                      std::to_string(kCheckpointVersion) + ")");
  const auto config_len = get<std::uint32_t>(in, "config length");
  if (config_len > (1u << 20)) throw FormatError("checkpoint config block too large");
  std::string config(config_len, '\0');
  in.read(config.data(), config_len);
  if (!in) throw FormatError("checkpoint truncated in config block");
  ModelConfig cfg;
  try {
    cfg = config_from_json(nlohmann::json::parse(config));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint config block is invalid: ") + e.what());
  }
  ModelState s = init_state(cfg, 0);
  s.adam.step = get<std::int64_t>(in, "step");
  const auto records = get<std::uint32_t>(in, "record count");
  std::set<std::string> seen;
  for (std::uint32_t r = 0; r < records; ++r) {
    const auto len = get<std::uint32_t>(in, "record name length");
    if (len > 4096) throw FormatError("checkpoint record name too long");
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw FormatError("checkpoint truncated in record name");
    const auto rank = get<std::uint32_t>(in, "rank of '" + name + "'");
    if (rank != 2) throw FormatError("tensor '" + name + "' has unsupported rank " + std::to_string(rank));
    const auto rows = get<std::uint64_t>(in, "dims of '" + name + "'");
    const auto cols = get<std::uint64_t>(in, "dims of '" + name + "'");

    Tensor* dst = nullptr;
    std::string base = name;
    std::vector<Tensor>* moments = nullptr;
    if (name.rfind("adam.m/", 0) == 0) {
      base = name.substr(7);
      moments = &s.adam.m;
    } else if (name.rfind("adam.v/", 0) == 0) {
      base = name.substr(7);
      moments = &s.adam.v;
    }
    const int id = s.params.find(base);
    if (id < 0) throw FormatError("checkpoint contains unknown tensor '" + name + "'");
    dst = moments ? &(*moments)[static_cast<std::size_t>(id)] : &s.params.value(id);
    if (static_cast<std::uint64_t>(dst->rows()) != rows || static_cast<std::uint64_t>(dst->cols()) != cols)
      throw DimensionError("tensor '" + name + "' has shape " + std::to_string(rows) + "x" + std::to_string(cols) +
                           ", expected " + std::to_string(dst->rows()) + "x" + std::to_string(dst->cols()));
    in.read(reinterpret_cast<char*>(dst->data()), static_cast<std::streamsize>(sizeof(double) * dst->size()));
    if (!in) throw FormatError("checkpoint truncated in data of '" + name + "'");
    if (!seen.insert(name).second) throw FormatError("duplicate tensor '" + name + "' in checkpoint");
  }
  for (int i = 0; i < s.params.size(); ++i)
    if (!seen.count(s.params.name(i))) throw FormatError("checkpoint is missing tensor '" + s.params.name(i) + "'");
  in.peek();
  if (!in.eof()) throw FormatError("trailing bytes after checkpoint records");
  return s;
}

// ---- gradient verification ------------------------------------------------------------

GradCheckReport check_gradients(ParamStore& params, const std::function<double(const ParamStore&)>& loss,
                                const std::vector<Tensor>& analytic, const GradCheckOptions& opts) {
  GradCheckReport report;
  report.tolerance = opts.tolerance;
  Rng rng(derive_seed(opts.seed, 0x9c0c));
  for (int id = 0; id < params.size(); ++id) {
    if (static_cast<std::size_t>(id) >= analytic.size() || analytic[static_cast<std::size_t>(id)].size() == 0) continue;
    Tensor& p = params.value(id);
    const Tensor& a = analytic[static_cast<std::size_t>(id)];
    std::vector<Eigen::Index> coords(static_cast<std::size_t>(p.size()));
    std::iota(coords.begin(), coords.end(), Eigen::Index{0});
    if (static_cast<int>(coords.size()) > opts.coords_per_tensor) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(opts.coords_per_tensor));
    }
    GradCheckEntry entry{params.name(id), static_cast<int>(coords.size()), 0.0};
    for (Eigen::Index k : coords) {
      const double x0 = p.data()[k];
      const double h = opts.relative_step * std::max(1.0, std::abs(x0));
      p.data()[k] = x0 + h;
      const double fp = loss(params);
      p.data()[k] = x0 - h;
      const double fm = loss(params);
      p.data()[k] = x0;
      const double num = (fp - fm) / (2.0 * h);
      const double an = a.data()[k];
      const double denom = std::max({std::abs(an), std::abs(num), opts.error_floor});
      entry.max_rel_error = std::max(entry.max_rel_error, std::abs(an - num) / denom);
    }
    report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
    report.entries.push_back(std::move(entry));
  }
  report.passed = !report.entries.empty() && report.max_rel_error <= opts.tolerance;
  return report;
}

GradCheckReport finite_diff_check(const ModelState& state, const Batch& batch, const ObjectiveConfig& cfg,
                                  const GradCheckOptions& opts, double grad_scale) {
  const StepSeeds seeds{derive_seed(opts.seed, 11), derive_seed(opts.seed, 12)};
  ad::Tape<double> tape;
  LossGraph<double> g = build_loss(tape, state.model, state.params, batch, cfg, Mode::train, seeds);
  tape.backward(g.total);
  const RetentionTargets<double> frozen = g.targets;
  std::vector<Tensor> analytic(static_cast<std::size_t>(state.params.size()));
  for (const auto& pg : tape.param_grads()) analytic[static_cast<std::size_t>(pg.slot)] = *pg.grad * grad_scale;

  ParamStore params = state.params;
  auto loss = [&](const ParamStore& p) {
    ad::Tape<double> t;
    return build_loss(t, state.model, p, batch, cfg, Mode::train, seeds, cfg.use_retention ? &frozen : nullptr)
        .total.value()(0, 0);
  };
  return check_gradients(params, loss, analytic, opts);
}

}  // namespace mirror
