#include "mirror/model.hpp"

#include <cmath>
#include <cstring>
#include <random>

#include "mirror/errors.hpp"
#include "mirror/rng.hpp"

namespace mirror {

int ParamStore::declare(const std::string& name, Eigen::Index rows, Eigen::Index cols) {
  if (auto it = index_.find(name); it != index_.end()) {
    const Tensor& t = values_[static_cast<std::size_t>(it->second)];
    if (t.rows() != rows || t.cols() != cols)
      throw ValidationError("parameter '" + name + "' has shape " + std::to_string(t.rows()) + "x" +
                            std::to_string(t.cols()) + ", expected " + std::to_string(rows) + "x" +
                            std::to_string(cols));
    return it->second;
  }
  const int id = static_cast<int>(values_.size());
  names_.push_back(name);
  values_.push_back(Tensor::Zero(rows, cols));
  index_.emplace(name, id);
  return id;
}

int ParamStore::find(const std::string& name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

int ParamStore::at(const std::string& name) const {
  const int id = find(name);
  if (id < 0) throw ValidationError("unknown parameter '" + name + "'");
  return id;
}

std::size_t ParamStore::scalar_count() const {
  std::size_t n = 0;
  for (const auto& v : values_) n += static_cast<std::size_t>(v.size());
  return n;
}

bool operator==(const ParamStore& a, const ParamStore& b) {
  if (a.names_ != b.names_) return false;
  for (std::size_t i = 0; i < a.values_.size(); ++i) {
    const Tensor& x = a.values_[i];
    const Tensor& y = b.values_[i];
    if (x.rows() != y.rows() || x.cols() != y.cols()) return false;
    if (std::memcmp(x.data(), y.data(), sizeof(double) * static_cast<std::size_t>(x.size())) != 0) return false;
  }
  return true;
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& m) { throw ValidationError("model config: " + m); };
  if (d_p < 1 || k_genes < 1) fail("d_p and k_genes must be >= 1");
  if (dim < 1 || rna_dim < 1 || heads < 1) fail("dim, rna_dim and heads must be >= 1");
  if (dim % heads != 0) fail("dim " + std::to_string(dim) + " is not divisible by heads " + std::to_string(heads));
  if (rna_dim % heads != 0)
    fail("rna_dim " + std::to_string(rna_dim) + " is not divisible by heads " + std::to_string(heads));
  if (depth < 1 || retention_depth < 1 || mlp_ratio < 1) fail("depths and mlp_ratio must be >= 1");
  if (n_fixed < 2) fail("n_fixed must be >= 2 (masking needs a visible and a masked patch)");
  if (rna_groups < 2 || rna_groups > k_genes) fail("rna_groups must be in [2, k_genes]");
  if (style_dim < 1 || clusters < 2) fail("style_dim must be >= 1 and clusters >= 2");
}

std::vector<int> group_bounds(int k, int groups) {
  std::vector<int> b(static_cast<std::size_t>(groups) + 1);
  for (int g = 0; g <= groups; ++g)
    b[static_cast<std::size_t>(g)] = static_cast<int>((static_cast<long long>(k) * g) / groups);
  return b;
}

namespace {

BlockParams declare_block(ParamStore& s, const std::string& p, int d, int mlp_ratio) {
  BlockParams b{};
  b.ln1_g = s.declare(p + ".ln1.gain", 1, d);
  b.ln1_b = s.declare(p + ".ln1.bias", 1, d);
  b.qkv_w = s.declare(p + ".attn.qkv.weight", d, 3 * d);
  b.qkv_b = s.declare(p + ".attn.qkv.bias", 1, 3 * d);
  b.proj_w = s.declare(p + ".attn.proj.weight", d, d);
  b.proj_b = s.declare(p + ".attn.proj.bias", 1, d);
  b.ln2_g = s.declare(p + ".ln2.gain", 1, d);
  b.ln2_b = s.declare(p + ".ln2.bias", 1, d);
  b.fc1_w = s.declare(p + ".mlp.fc1.weight", d, mlp_ratio * d);
  b.fc1_b = s.declare(p + ".mlp.fc1.bias", 1, mlp_ratio * d);
  b.fc2_w = s.declare(p + ".mlp.fc2.weight", mlp_ratio * d, d);
  b.fc2_b = s.declare(p + ".mlp.fc2.bias", 1, d);
  return b;
}

std::vector<BlockParams> declare_blocks(ParamStore& s, const std::string& p, int n, int d, int mlp_ratio) {
  std::vector<BlockParams> out;
  for (int i = 0; i < n; ++i) out.push_back(declare_block(s, p + ".block" + std::to_string(i), d, mlp_ratio));
  return out;
}

void fill_uniform(Tensor& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = u(rng);
}

void fill_normal(Tensor& t, double sd, Rng& rng) {
  std::normal_distribution<double> n(0.0, sd);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = n(rng);
}

// Weight (fan_in x fan_out) and bias share the same bound.
void init_linear(ParamStore& s, int w, int b, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(s.value(w).rows()));
  fill_uniform(s.value(w), bound, rng);
  fill_uniform(s.value(b), bound, rng);
}

void init_block(ParamStore& s, const BlockParams& b, Rng& rng) {
  s.value(b.ln1_g).setOnes();
  s.value(b.ln1_b).setZero();
  init_linear(s, b.qkv_w, b.qkv_b, rng);
  init_linear(s, b.proj_w, b.proj_b, rng);
  s.value(b.ln2_g).setOnes();
  s.value(b.ln2_b).setZero();
  init_linear(s, b.fc1_w, b.fc1_b, rng);
  init_linear(s, b.fc2_w, b.fc2_b, rng);
}

constexpr double kTokenSd = 0.02;

}  // namespace

MirrorModel MirrorModel::declare(const ModelConfig& cfg, ParamStore& s) {
  cfg.validate();
  MirrorModel m;
  m.cfg = cfg;
  const int d = cfg.dim, dt = cfg.rna_dim;

  m.slide.proj_w = s.declare("slide.proj.weight", cfg.d_p, d);
  m.slide.proj_b = s.declare("slide.proj.bias", 1, d);
  m.slide.cls = s.declare("slide.cls_token", 1, d);
  m.slide.blocks = declare_blocks(s, "slide", cfg.depth, d, cfg.mlp_ratio);
  m.slide.ppeg3 = s.declare("slide.ppeg.kernel3", 9, d);
  m.slide.ppeg5 = s.declare("slide.ppeg.kernel5", 25, d);
  m.slide.ppeg7 = s.declare("slide.ppeg.kernel7", 49, d);
  m.slide.norm_g = s.declare("slide.norm.gain", 1, d);
  m.slide.norm_b = s.declare("slide.norm.bias", 1, d);

  m.rna.group_bounds = group_bounds(cfg.k_genes, cfg.rna_groups);
  m.rna.embed_w = s.declare("rna.embed.weight", cfg.k_genes, dt);
  m.rna.embed_b = s.declare("rna.embed.bias", cfg.rna_groups, dt);
  m.rna.gene_token = s.declare("rna.gene_token", 1, dt);
  m.rna.blocks = declare_blocks(s, "rna", cfg.depth, dt, cfg.mlp_ratio);
  m.rna.norm_g = s.declare("rna.norm.gain", 1, dt);
  m.rna.norm_b = s.declare("rna.norm.bias", 1, dt);
  m.rna.out_w = s.declare("rna.out.weight", dt, d);
  m.rna.out_b = s.declare("rna.out.bias", 1, d);

  auto align = [&](const std::string& p) {
    AlignmentHeadParams a{};
    a.fc1_w = s.declare(p + ".fc1.weight", d, d);
    a.fc1_b = s.declare(p + ".fc1.bias", 1, d);
    a.fc2_w = s.declare(p + ".fc2.weight", d, d);
    a.fc2_b = s.declare(p + ".fc2.bias", 1, d);
    return a;
  };
  m.align_slide = align("align.slide");
  m.align_rna = align("align.rna");

  auto retention = [&](const std::string& p, int width) {
    RetentionHeadParams r{};
    r.mask_token = s.declare(p + ".mask_token", 1, width);
    r.blocks = declare_blocks(s, p, cfg.retention_depth, width, cfg.mlp_ratio);
    r.norm_g = s.declare(p + ".norm.gain", 1, width);
    r.norm_b = s.declare(p + ".norm.bias", 1, width);
    r.out_w = s.declare(p + ".out.weight", width, width);
    r.out_b = s.declare(p + ".out.bias", 1, width);
    return r;
  };
  m.retention_slide = retention("retention.slide", d);
  m.retention_rna = retention("retention.rna", dt);

  m.style.slide_w = s.declare("style.slide.weight", d, 2 * cfg.style_dim);
  m.style.slide_b = s.declare("style.slide.bias", 1, 2 * cfg.style_dim);
  m.style.rna_w = s.declare("style.rna.weight", d, 2 * cfg.style_dim);
  m.style.rna_b = s.declare("style.rna.bias", 1, 2 * cfg.style_dim);
  m.style.centers = s.declare("style.centers", cfg.clusters, cfg.style_dim);
  return m;
}

void init_params(const MirrorModel& m, ParamStore& s, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x1417));

  init_linear(s, m.slide.proj_w, m.slide.proj_b, rng);
  fill_normal(s.value(m.slide.cls), kTokenSd, rng);
  for (const auto& b : m.slide.blocks) init_block(s, b, rng);
  fill_normal(s.value(m.slide.ppeg3), kTokenSd, rng);
  fill_normal(s.value(m.slide.ppeg5), kTokenSd, rng);
  fill_normal(s.value(m.slide.ppeg7), kTokenSd, rng);
  s.value(m.slide.norm_g).setOnes();
  s.value(m.slide.norm_b).setZero();

  {
    Tensor& w = s.value(m.rna.embed_w);
    Tensor& b = s.value(m.rna.embed_b);
    const auto& bounds = m.rna.group_bounds;
    for (std::size_t g = 0; g + 1 < bounds.size(); ++g) {
      const int len = bounds[g + 1] - bounds[g];
      std::uniform_real_distribution<double> u(-1.0 / std::sqrt(len), 1.0 / std::sqrt(len));
      for (int r = bounds[g]; r < bounds[g + 1]; ++r)
        for (Eigen::Index c = 0; c < w.cols(); ++c) w(r, c) = u(rng);
      for (Eigen::Index c = 0; c < b.cols(); ++c) b(static_cast<Eigen::Index>(g), c) = u(rng);
    }
  }
  fill_normal(s.value(m.rna.gene_token), kTokenSd, rng);
  for (const auto& b : m.rna.blocks) init_block(s, b, rng);
  s.value(m.rna.norm_g).setOnes();
  s.value(m.rna.norm_b).setZero();
  init_linear(s, m.rna.out_w, m.rna.out_b, rng);

  for (const auto* a : {&m.align_slide, &m.align_rna}) {
    init_linear(s, a->fc1_w, a->fc1_b, rng);
    init_linear(s, a->fc2_w, a->fc2_b, rng);
  }
  for (const auto* r : {&m.retention_slide, &m.retention_rna}) {
    fill_normal(s.value(r->mask_token), kTokenSd, rng);
    for (const auto& b : r->blocks) init_block(s, b, rng);
    s.value(r->norm_g).setOnes();
    s.value(r->norm_b).setZero();
    init_linear(s, r->out_w, r->out_b, rng);
  }
  init_linear(s, m.style.slide_w, m.style.slide_b, rng);
  init_linear(s, m.style.rna_w, m.style.rna_b, rng);
  fill_normal(s.value(m.style.centers), kTokenSd, rng);
  normalize_centers(m, s);
}

void normalize_centers(const MirrorModel& m, ParamStore& s) {
  Tensor& c = s.value(m.style.centers);
  for (Eigen::Index r = 0; r < c.rows(); ++r) {
    const double n = c.row(r).norm();
    if (n > 0) c.row(r) /= n;
  }
}

}  // namespace mirror
