#include "mirror/objectives.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "mirror/errors.hpp"
#include "mirror/rng.hpp"

namespace mirror {

void ObjectiveConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("objective config: " + m); };
  if (!(tau > 0)) fail("tau must be > 0");
  if (!(kappa > 0)) fail("kappa must be > 0");
  if (!(slide_mask_ratio > 0 && slide_mask_ratio < 1)) fail("slide_mask_ratio must be in (0, 1)");
  if (!(rna_mask_ratio > 0 && rna_mask_ratio < 1)) fail("rna_mask_ratio must be in (0, 1)");
  if (!(prob_floor > 0 && prob_floor < 1)) fail("prob_floor must be in (0, 1)");
  if (!(w_align >= 0 && w_retention >= 0 && w_style >= 0)) fail("loss weights must be >= 0");
}

LossBreakdown combine(double l_align, double l_retention, double l_style, double l_cluster, double w_align,
                      double w_retention, double w_style) {
  LossBreakdown b;
  b.l_align = l_align;
  b.l_retention = l_retention;
  b.l_style = l_style;
  b.l_cluster = l_cluster;
  b.w_align = w_align;
  b.w_retention = w_retention;
  b.w_style = w_style;
  b.l_total = w_align * l_align + w_retention * l_retention + w_style * (l_style + l_cluster);
  return b;
}

Batch make_batch(const Dataset& ds, const std::vector<int>& indices, int n_fixed, std::uint64_t bag_seed) {
  if (indices.empty()) throw ValidationError("empty batch");
  Batch b;
  b.n = n_fixed;
  b.sample_index = indices;
  const auto size = static_cast<Eigen::Index>(indices.size());
  b.bags.resize(size * n_fixed, ds.d_p);
  b.expr.resize(size, ds.k_genes);
  for (Eigen::Index i = 0; i < size; ++i) {
    const int idx = indices[static_cast<std::size_t>(i)];
    if (idx < 0 || static_cast<std::size_t>(idx) >= ds.size()) throw ValidationError("batch index out of range");
    const PairedSample& s = ds.samples[static_cast<std::size_t>(idx)];
    const SampledBag bag = sample_bag(s.bag, n_fixed, derive_seed(bag_seed, id_hash(s.bag.slide_id)));
    b.bags.middleRows(i * n_fixed, n_fixed) = bag.features.cast<double>();
    b.expr.row(i) = s.rna.values.cast<double>().transpose();
  }
  return b;
}

std::vector<char> mask_select(int n_tokens, double ratio, std::uint64_t seed) {
  if (n_tokens < 2) throw ValidationError("mask_select: need at least 2 tokens");
  if (!(ratio > 0 && ratio < 1)) throw ValidationError("mask_select: ratio must be in (0, 1)");
  const int count = std::max(1, static_cast<int>(std::lround(ratio * n_tokens)));
  if (count >= n_tokens)
    throw ValidationError("mask_select: ratio " + std::to_string(ratio) + " masks all " + std::to_string(n_tokens) +
                          " tokens");
  std::vector<int> order(static_cast<std::size_t>(n_tokens));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 0x3a5c));
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<int> pick(i, n_tokens - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
  }
  std::vector<char> mask(static_cast<std::size_t>(n_tokens), 0);
  for (int i = 0; i < count; ++i) mask[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 1;
  return mask;
}

template <typename T>
ad::Var<T> alignment_head(ad::Tape<T>& tape, const ParamStore& store, const AlignmentHeadParams& p,
                          const ad::Var<T>& x) {
  auto P = [&](int id) { return bind(tape, store, id); };
  const ad::Var<T> h = ad::gelu(ad::linear(x, P(p.fc1_w), P(p.fc1_b)));
  return ad::l2_normalize_rows(ad::linear(h, P(p.fc2_w), P(p.fc2_b)));
}

namespace {

template <typename T>
ad::Var<T> retention_branch(ad::Tape<T>& tape, const ParamStore& store, const RetentionHeadParams& p,
                            const ad::Var<T>& tokens, const ad::Matrix<T>& target, const std::vector<char>& mask,
                            int seq_len, int heads) {
  auto P = [&](int id) { return bind(tape, store, id); };
  const ad::Var<T> fill =
      ad::gather_rows(P(p.mask_token), std::vector<int>(static_cast<std::size_t>(tokens.rows()), 0));
  ad::Var<T> x = ad::select_rows(mask, fill, tokens);
  for (const auto& b : p.blocks) x = transformer_block(tape, store, b, x, seq_len, heads);
  x = ad::layer_norm(x, P(p.norm_g), P(p.norm_b));
  const ad::Var<T> pred = ad::linear(x, P(p.out_w), P(p.out_b));
  return ad::masked_mse(pred, target, mask, seq_len);
}

// Stacked per-sequence masks; sequence b uses derive_seed(seed, b).
std::vector<char> batch_mask(int batch, int n, double ratio, std::uint64_t seed) {
  std::vector<char> mask;
  mask.reserve(static_cast<std::size_t>(batch) * static_cast<std::size_t>(n));
  for (int b = 0; b < batch; ++b) {
    const auto m = mask_select(n, ratio, derive_seed(seed, static_cast<std::uint64_t>(b)));
    mask.insert(mask.end(), m.begin(), m.end());
  }
  return mask;
}

template <typename T>
ad::Matrix<T> gaussian(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  ad::Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(n(rng));
  return m;
}

}  // namespace

template <typename T>
LossGraph<T> build_loss(ad::Tape<T>& tape, const MirrorModel& model, const ParamStore& store, const Batch& batch,
                        const ObjectiveConfig& cfg, Mode mode, const StepSeeds& seeds,
                        const RetentionTargets<T>* frozen) {
  const int bsz = batch.size();
  if (bsz < 2) throw ValidationError("objective: batch size must be >= 2 for the contrastive term");
  const ModelConfig& mc = model.cfg;
  auto P = [&](int id) { return bind(tape, store, id); };

  LossGraph<T> g;
  g.slide = slide_forward(tape, model, store, ad::Matrix<T>(batch.bags.cast<T>()), batch.n);
  g.rna = rna_forward(tape, model, store, ad::Matrix<T>(batch.expr.cast<T>()));

  g.s_align = alignment_head(tape, store, model.align_slide, g.slide.cls);
  g.t_align = alignment_head(tape, store, model.align_rna, g.rna.t_vec);
  g.align = ad::symmetric_info_nce(g.s_align, g.t_align, static_cast<T>(cfg.tau));

  std::vector<ad::Var<T>> terms{g.align};
  std::vector<T> weights{static_cast<T>(cfg.w_align)};
  double l_ret = 0.0, l_style = 0.0, l_cluster = 0.0;

  if (cfg.use_retention) {
    if (frozen != nullptr) {
      g.targets = *frozen;
    } else {
      g.targets.slide = g.slide.tokens.value();
      g.targets.rna = g.rna.tokens.value();
    }
    const auto slide_mask = batch_mask(bsz, batch.n, cfg.slide_mask_ratio, derive_seed(seeds.mask, 1));
    const auto rna_mask = batch_mask(bsz, mc.rna_groups, cfg.rna_mask_ratio, derive_seed(seeds.mask, 2));
    const ad::Var<T> ls = retention_branch(tape, store, model.retention_slide, g.slide.tokens, g.targets.slide,
                                           slide_mask, batch.n, mc.heads);
    const ad::Var<T> lt = retention_branch(tape, store, model.retention_rna, g.rna.tokens, g.targets.rna, rna_mask,
                                           mc.rna_groups, mc.heads);
    const std::array<ad::Var<T>, 2> parts{ls, lt};
    const std::array<T, 2> half{T(0.5), T(0.5)};
    g.retention = ad::weighted_sum<T>(parts, half);
    terms.push_back(g.retention);
    weights.push_back(static_cast<T>(cfg.w_retention));
    l_ret = static_cast<double>(g.retention.value()(0, 0));
  }

  if (cfg.use_style) {
    const int dz = mc.style_dim;
    auto latent = [&](const ad::Var<T>& x, int w, int b, std::uint64_t stream) {
      const ad::Var<T> stats = ad::linear(x, P(w), P(b));
      const ad::Var<T> mu = ad::slice_cols(stats, 0, dz);
      const ad::Var<T> lv = ad::clamp(ad::slice_cols(stats, dz, dz), T(-10), T(10));
      ad::Var<T> z = mu;
      if (mode == Mode::train) {
        const ad::Var<T> eps = tape.constant(gaussian<T>(bsz, dz, derive_seed(seeds.noise, stream)));
        z = ad::add(mu, ad::mul(ad::exp(ad::scale(lv, T(0.5))), eps));
      }
      return std::array<ad::Var<T>, 3>{mu, lv, z};
    };
    const auto [mu_s, lv_s, z_s] = latent(g.slide.cls, model.style.slide_w, model.style.slide_b, 1);
    const auto [mu_t, lv_t, z_t] = latent(g.rna.t_vec, model.style.rna_w, model.style.rna_b, 2);
    const std::array<ad::Var<T>, 2> kls{ad::kl_standard_normal(mu_s, lv_s), ad::kl_standard_normal(mu_t, lv_t)};
    const std::array<T, 2> ones{T(1), T(1)};
    g.style = ad::weighted_sum<T>(kls, ones);
    const ad::Var<T> centers = P(model.style.centers);
    const ad::Var<T> ps = ad::cosine_softmax(z_s, centers, static_cast<T>(cfg.kappa));
    const ad::Var<T> pt = ad::cosine_softmax(z_t, centers, static_cast<T>(cfg.kappa));
    g.cluster = ad::symmetric_kl(ps, pt, static_cast<T>(cfg.prob_floor));
    terms.push_back(g.style);
    terms.push_back(g.cluster);
    weights.push_back(static_cast<T>(cfg.w_style));
    weights.push_back(static_cast<T>(cfg.w_style));
    l_style = static_cast<double>(g.style.value()(0, 0));
    l_cluster = static_cast<double>(g.cluster.value()(0, 0));
  }

  g.total = ad::weighted_sum<T>(terms, weights);
  g.breakdown = combine(static_cast<double>(g.align.value()(0, 0)), l_ret, l_style, l_cluster, cfg.w_align,
                        cfg.w_retention, cfg.w_style);
  g.breakdown.l_total = static_cast<double>(g.total.value()(0, 0));
  return g;
}

double info_nce(const Tensor& s_align, const Tensor& t_align, double tau) {
  if (s_align.rows() < 2) throw ValidationError("alignment loss: batch size must be >= 2");
  if (!(tau > 0)) throw ValidationError("alignment loss: tau must be > 0");
  ad::Tape<double> tape;
  return ad::symmetric_info_nce(tape.constant(s_align), tape.constant(t_align), tau).value()(0, 0);
}

double alignment_loss(const MirrorModel& model, const ParamStore& store, const Tensor& s_cls, const Tensor& t_vec,
                      double tau) {
  return info_nce(align_slide(model, store, s_cls), align_rna(model, store, t_vec), tau);
}

double style_kl(const Tensor& mu, const Tensor& logvar) {
  ad::Tape<double> tape;
  return ad::kl_standard_normal(tape.constant(mu), tape.constant(logvar)).value()(0, 0);
}

Tensor cluster_assign(const Tensor& z, const Tensor& centers, double kappa) {
  ad::Tape<double> tape;
  return ad::cosine_softmax(tape.constant(z), tape.constant(centers), kappa).value();
}

double cluster_consistency_loss(const Tensor& p, const Tensor& q, double floor) {
  ad::Tape<double> tape;
  return ad::symmetric_kl(tape.constant(p), tape.constant(q), floor).value()(0, 0);
}

double retention_mse(const Tensor& pred, const Tensor& target, const std::vector<char>& mask, int seq_len) {
  ad::Tape<double> tape;
  return ad::masked_mse(tape.constant(pred), target, mask, seq_len).value()(0, 0);
}

Tensor align_slide(const MirrorModel& model, const ParamStore& store, const Tensor& s_cls) {
  ad::Tape<double> tape;
  return alignment_head(tape, store, model.align_slide, tape.constant(s_cls)).value();
}

Tensor align_rna(const MirrorModel& model, const ParamStore& store, const Tensor& t_vec) {
  ad::Tape<double> tape;
  return alignment_head(tape, store, model.align_rna, tape.constant(t_vec)).value();
}

#define MIRROR_OBJECTIVES_INSTANTIATE(T)                                                                      \
  template ad::Var<T> alignment_head(ad::Tape<T>&, const ParamStore&, const AlignmentHeadParams&,             \
                                     const ad::Var<T>&);                                                       \
  template LossGraph<T> build_loss(ad::Tape<T>&, const MirrorModel&, const ParamStore&, const Batch&,         \
                                   const ObjectiveConfig&, Mode, const StepSeeds&, const RetentionTargets<T>*);

MIRROR_OBJECTIVES_INSTANTIATE(float)
MIRROR_OBJECTIVES_INSTANTIATE(double)

#undef MIRROR_OBJECTIVES_INSTANTIATE

}  // namespace mirror
