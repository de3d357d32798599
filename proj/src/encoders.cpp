#include "mirror/encoders.hpp"

#include <array>
#include <fstream>

#include "mirror/errors.hpp"

namespace mirror {

namespace {

// Row index that lays out [cls_b, patch_b0 .. patch_b(n-1)] per sequence from
// the stacked [patches (B*n); cls (B)].
std::vector<int> prepend_index(int batch, int n) {
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(batch) * static_cast<std::size_t>(n + 1));
  for (int b = 0; b < batch; ++b) {
    idx.push_back(batch * n + b);
    for (int i = 0; i < n; ++i) idx.push_back(b * n + i);
  }
  return idx;
}

std::vector<int> body_index(int batch, int n) {
  std::vector<int> idx;
  idx.reserve(static_cast<std::size_t>(batch) * static_cast<std::size_t>(n));
  for (int b = 0; b < batch; ++b)
    for (int i = 0; i < n; ++i) idx.push_back(b * (n + 1) + 1 + i);
  return idx;
}

std::vector<int> head_index(int batch, int n) {
  std::vector<int> idx;
  for (int b = 0; b < batch; ++b) idx.push_back(b * (n + 1));
  return idx;
}

template <typename T>
ad::Var<T> with_leading_token(const ad::Var<T>& body, const ad::Var<T>& token, int batch, int n) {
  const ad::Var<T> lead = ad::gather_rows(token, std::vector<int>(static_cast<std::size_t>(batch), 0));
  const std::array<ad::Var<T>, 2> parts{body, lead};
  return ad::gather_rows(ad::concat_rows<T>(parts), prepend_index(batch, n));
}

template <typename T>
ad::Var<T> with_leading_rows(const ad::Var<T>& body, const ad::Var<T>& lead, int batch, int n) {
  const std::array<ad::Var<T>, 2> parts{body, lead};
  return ad::gather_rows(ad::concat_rows<T>(parts), prepend_index(batch, n));
}

}  // namespace

template <typename T>
ad::Var<T> transformer_block(ad::Tape<T>& tape, const ParamStore& store, const BlockParams& p, const ad::Var<T>& x,
                             int seq_len, int heads, std::vector<ad::Matrix<T>>* probs) {
  auto P = [&](int id) { return bind(tape, store, id); };
  const ad::Var<T> h1 = ad::layer_norm(x, P(p.ln1_g), P(p.ln1_b));
  const ad::Var<T> qkv = ad::linear(h1, P(p.qkv_w), P(p.qkv_b));
  const ad::Var<T> att = ad::multi_head_attention(qkv, seq_len, heads, probs);
  const ad::Var<T> x1 = ad::add(x, ad::linear(att, P(p.proj_w), P(p.proj_b)));
  const ad::Var<T> h2 = ad::layer_norm(x1, P(p.ln2_g), P(p.ln2_b));
  const ad::Var<T> mlp = ad::linear(ad::gelu(ad::linear(h2, P(p.fc1_w), P(p.fc1_b))), P(p.fc2_w), P(p.fc2_b));
  return ad::add(x1, mlp);
}

template <typename T>
SlideForward<T> slide_forward(ad::Tape<T>& tape, const MirrorModel& model, const ParamStore& store,
                              const ad::Matrix<T>& bags, int n, bool keep_attention) {
  const ModelConfig& cfg = model.cfg;
  if (n < 1 || bags.rows() % n != 0 || bags.rows() == 0)
    throw ValidationError("slide encoder: bag rows not a multiple of n");
  if (bags.cols() != cfg.d_p)
    throw DimensionError("slide encoder: expected " + std::to_string(cfg.d_p) + " features, got " +
                         std::to_string(bags.cols()));
  if (!bags.allFinite()) throw ValidationError("slide encoder: non-finite patch feature");
  const int batch = static_cast<int>(bags.rows() / n);
  const int len = n + 1;
  auto P = [&](int id) { return bind(tape, store, id); };
  const auto& s = model.slide;

  const ad::Var<T> x0 = ad::gelu(ad::linear(tape.constant(bags), P(s.proj_w), P(s.proj_b)));
  ad::Var<T> x = with_leading_token(x0, P(s.cls), batch, n);

  SlideForward<T> out;
  const int depth = static_cast<int>(s.blocks.size());
  for (int i = 0; i < depth; ++i) {
    const bool last = i == depth - 1;
    x = transformer_block(tape, store, s.blocks[static_cast<std::size_t>(i)], x, len, cfg.heads,
                          last && keep_attention ? &out.attention : nullptr);
    if (i == 0 && cfg.use_ppeg) {
      const ad::Var<T> body = ad::ppeg(ad::gather_rows(x, body_index(batch, n)), n, P(s.ppeg3), P(s.ppeg5),
                                       P(s.ppeg7));
      x = with_leading_rows(body, ad::gather_rows(x, head_index(batch, n)), batch, n);
    }
  }
  x = ad::layer_norm(x, P(s.norm_g), P(s.norm_b));
  out.tokens = ad::gather_rows(x, body_index(batch, n));
  out.cls = ad::gather_rows(x, head_index(batch, n));
  return out;
}

template <typename T>
RnaForward<T> rna_forward(ad::Tape<T>& tape, const MirrorModel& model, const ParamStore& store,
                          const ad::Matrix<T>& expr) {
  const ModelConfig& cfg = model.cfg;
  if (expr.cols() != cfg.k_genes)
    throw DimensionError("rna encoder: expected " + std::to_string(cfg.k_genes) + " genes, got " +
                         std::to_string(expr.cols()));
  if (!expr.allFinite()) throw ValidationError("rna encoder: non-finite expression value");
  const int batch = static_cast<int>(expr.rows());
  const int groups = cfg.rna_groups;
  auto P = [&](int id) { return bind(tape, store, id); };
  const auto& r = model.rna;

  RnaForward<T> out;
  out.embedded = ad::grouped_linear(tape.constant(expr), P(r.embed_w), P(r.embed_b), r.group_bounds);
  ad::Var<T> x = with_leading_token(out.embedded, P(r.gene_token), batch, groups);
  for (const auto& b : r.blocks) x = transformer_block(tape, store, b, x, groups + 1, cfg.heads);
  x = ad::layer_norm(x, P(r.norm_g), P(r.norm_b));
  out.tokens = ad::gather_rows(x, body_index(batch, groups));
  out.t_vec = ad::linear(ad::gather_rows(x, head_index(batch, groups)), P(r.out_w), P(r.out_b));
  return out;
}

SlideEncoding encode_slide(const MirrorModel& model, const ParamStore& store, const Tensor& bag) {
  if (bag.rows() < 1) throw ValidationError("encode_slide: empty bag");
  ad::Tape<double> tape;
  const int n = static_cast<int>(bag.rows());
  SlideForward<double> f = slide_forward(tape, model, store, bag, n, true);
  SlideEncoding e;
  e.s_tokens = f.tokens.value();
  e.s_cls = f.cls.value().row(0);
  const int heads = model.cfg.heads;
  e.attention.resize(heads, n);
  for (int h = 0; h < heads; ++h) {
    const auto row = f.attention[static_cast<std::size_t>(h)].row(0).tail(n);
    e.attention.row(h) = row / row.sum();
  }
  return e;
}

RnaEncoding encode_rna(const MirrorModel& model, const ParamStore& store, const Eigen::RowVectorXd& expr) {
  ad::Tape<double> tape;
  const Tensor x = expr;
  RnaForward<double> f = rna_forward(tape, model, store, x);
  return RnaEncoding{f.t_vec.value().row(0), f.tokens.value(), f.embedded.value()};
}

Tensor ppeg_apply(const MirrorModel& model, const ParamStore& store, const Tensor& tokens) {
  ad::Tape<double> tape;
  const auto& s = model.slide;
  return ad::ppeg(tape.constant(tokens), static_cast<int>(tokens.rows()), bind(tape, store, s.ppeg3),
                  bind(tape, store, s.ppeg5), bind(tape, store, s.ppeg7))
      .value();
}

void write_attention_csv(const std::filesystem::path& path, const SampledBag& bag, const Tensor& attention) {
  if (static_cast<std::size_t>(attention.cols()) != bag.coords.size())
    throw ValidationError("attention export: weight count does not match the sampled bag");
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out.precision(9);
  out << "patch_index,grid_row,grid_col,weight\n";
  const Eigen::RowVectorXd mean = attention.colwise().mean();
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    const auto& c = bag.coords[static_cast<std::size_t>(i)];
    out << bag.rows[static_cast<std::size_t>(i)] << ',' << c.row << ',' << c.col << ',' << mean(i) << '\n';
  }
  if (!out) throw IoError("write failed for " + path.string());
}

#define MIRROR_ENCODERS_INSTANTIATE(T)                                                                         \
  template ad::Var<T> transformer_block(ad::Tape<T>&, const ParamStore&, const BlockParams&, const ad::Var<T>&, \
                                        int, int, std::vector<ad::Matrix<T>>*);                                 \
  template SlideForward<T> slide_forward(ad::Tape<T>&, const MirrorModel&, const ParamStore&,                   \
                                         const ad::Matrix<T>&, int, bool);                                      \
  template RnaForward<T> rna_forward(ad::Tape<T>&, const MirrorModel&, const ParamStore&, const ad::Matrix<T>&);

MIRROR_ENCODERS_INSTANTIATE(float)
MIRROR_ENCODERS_INSTANTIATE(double)

#undef MIRROR_ENCODERS_INSTANTIATE

}  // namespace mirror
