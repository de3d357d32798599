#include "mirror/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <utility>

namespace mirror::ad {

namespace {

template <typename T>
bool any_grad(const Var<T>& a) {
  return a.tape->requires_grad(a);
}

template <typename T, typename... Rest>
bool any_grad(const Var<T>& a, const Rest&... rest) {
  return a.tape->requires_grad(a) || any_grad(rest...);
}

void check_shape(bool ok, const char* op, const std::string& detail) {
  if (!ok) throw std::invalid_argument(std::string(op) + ": shape mismatch " + detail);
}

template <typename T>
std::string dims(const Var<T>& v) {
  return std::to_string(v.rows()) + "x" + std::to_string(v.cols());
}

}  // namespace

// ---- Tape -------------------------------------------------------------------------

template <typename T>
Var<T> Tape<T>::constant(Mat value) {
  return record(std::move(value), false, nullptr);
}

template <typename T>
Var<T> Tape<T>::leaf(Mat value) {
  return record(std::move(value), true, nullptr);
}

template <typename T>
Var<T> Tape<T>::param(int slot, const Matrix<double>& value) {
  if (slot < 0) throw std::invalid_argument("Tape::param: negative slot");
  const auto s = static_cast<std::size_t>(slot);
  if (slot_to_node_.size() <= s) slot_to_node_.resize(s + 1, -1);
  if (slot_to_node_[s] >= 0) return Var<T>{this, slot_to_node_[s]};
  Var<T> v = leaf(value.template cast<T>());
  slot_to_node_[s] = v.id;
  bound_.emplace_back(slot, v.id);
  return v;
}

template <typename T>
Var<T> Tape<T>::record(Mat value, bool requires_grad, BackwardFn backward) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = requires_grad;
  if (requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var<T>{this, static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
typename Tape<T>::Mat& Tape<T>::grad(int id) {
  Node& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.size() == 0) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

template <typename T>
const typename Tape<T>::Mat* Tape<T>::grad_if_any(int id) const {
  const Node& n = nodes_[static_cast<std::size_t>(id)];
  return n.grad.size() == 0 ? nullptr : &n.grad;
}

template <typename T>
void Tape<T>::backward(const Var<T>& root) {
  if (root.tape != this) throw std::invalid_argument("Tape::backward: foreign node");
  if (root.rows() != 1 || root.cols() != 1) {
    throw std::invalid_argument("Tape::backward: root must be a scalar, got " + dims(root));
  }
  grad(root.id)(0, 0) += T(1);
  for (int id = root.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backward || n.grad.size() == 0) continue;
    n.backward(*this, n.grad);
  }
}

template <typename T>
std::vector<typename Tape<T>::ParamGrad> Tape<T>::param_grads() const {
  std::vector<ParamGrad> out;
  out.reserve(bound_.size());
  for (const auto& [slot, node] : bound_) {
    if (const Mat* g = grad_if_any(node)) out.push_back({slot, g});
  }
  return out;
}

// ---- elementwise ------------------------------------------------------------------

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "add", dims(a) + " vs " + dims(b));
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() + b.value(), any_grad(a, b), [ia, ib](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) += g;
  });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "sub", dims(a) + " vs " + dims(b));
  const int ia = a.id, ib = b.id;
  return a.tape->record(a.value() - b.value(), any_grad(a, b), [ia, ib](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g;
    if (t.requires_grad(ib)) t.grad(ib) -= g;
  });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
  check_shape(a.rows() == b.rows() && a.cols() == b.cols(), "mul", dims(a) + " vs " + dims(b));
  const int ia = a.id, ib = b.id;
  Matrix<T> v = a.value().cwiseProduct(b.value());
  return a.tape->record(std::move(v), any_grad(a, b), [ia, ib](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(ia)) t.grad(ia) += g.cwiseProduct(t.value(ib));
    if (t.requires_grad(ib)) t.grad(ib) += g.cwiseProduct(t.value(ia));
  });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
  const int ia = a.id;
  return a.tape->record(a.value() * s, any_grad(a), [ia, s](Tape<T>& t, const Matrix<T>& g) {
    t.grad(ia) += g * s;
  });
}

template <typename T>
Var<T> exp(const Var<T>& a) {
  const int ia = a.id;
  const int io = static_cast<int>(a.tape->size());
  Matrix<T> v = a.value().array().exp().matrix();
  return a.tape->record(std::move(v), any_grad(a), [ia, io](Tape<T>& t, const Matrix<T>& g) {
    t.grad(ia) += g.cwiseProduct(t.value(io));
  });
}

template <typename T>
Var<T> clamp(const Var<T>& a, T lo, T hi) {
  const int ia = a.id;
  Matrix<T> v = a.value().cwiseMax(lo).cwiseMin(hi);
  return a.tape->record(std::move(v), any_grad(a), [ia, lo, hi](Tape<T>& t, const Matrix<T>& g) {
    const Matrix<T>& x = t.value(ia);
    Matrix<T>& dx = t.grad(ia);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const T xi = x.data()[i];
      if (xi >= lo && xi <= hi) dx.data()[i] += g.data()[i];
    }
  });
}

namespace {
template <typename T>
constexpr T kGeluC = T(0.7978845608028654);  // sqrt(2 / pi)
template <typename T>
constexpr T kGeluA = T(0.044715);
}  // namespace

template <typename T>
Var<T> gelu(const Var<T>& a) {
  const int ia = a.id;
  const auto x = a.value().array();
  const Matrix<T> v = (T(0.5) * x * (T(1) + (kGeluC<T> * (x + kGeluA<T> * x.cube())).tanh())).matrix();
  return a.tape->record(v, any_grad(a), [ia](Tape<T>& t, const Matrix<T>& g) {
    const auto x = t.value(ia).array();
    const auto th = (kGeluC<T> * (x + kGeluA<T> * x.cube())).tanh().eval();
    const auto du = kGeluC<T> * (T(1) + T(3) * kGeluA<T> * x.square());
    t.grad(ia).array() += g.array() * (T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th.square()) * du);
  });
}

template <typename T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  check_shape(a.cols() == b.rows(), "matmul", dims(a) + " * " + dims(b));
  const int ia = a.id, ib = b.id;
  Matrix<T> v = a.value() * b.value();
  return a.tape->record(std::move(v), any_grad(a, b), [ia, ib](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(ia)) t.grad(ia).noalias() += g * t.value(ib).transpose();
    if (t.requires_grad(ib)) t.grad(ib).noalias() += t.value(ia).transpose() * g;
  });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
  check_shape(x.cols() == w.rows() && b.rows() == 1 && b.cols() == w.cols(), "linear",
              dims(x) + " * " + dims(w) + " + " + dims(b));
  const int ix = x.id, iw = w.id, ib = b.id;
  Matrix<T> v(x.rows(), w.cols());
  v.noalias() = x.value() * w.value();
  v.rowwise() += b.value().row(0);
  return x.tape->record(std::move(v), any_grad(x, w, b), [ix, iw, ib](Tape<T>& t, const Matrix<T>& g) {
    if (t.requires_grad(ix)) t.grad(ix).noalias() += g * t.value(iw).transpose();
    if (t.requires_grad(iw)) t.grad(iw).noalias() += t.value(ix).transpose() * g;
    if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
  });
}

template <typename T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gain, const Var<T>& bias) {
  const Eigen::Index n = x.rows(), d = x.cols();
  check_shape(gain.rows() == 1 && gain.cols() == d && bias.rows() == 1 && bias.cols() == d,
              "layer_norm", dims(x) + " gain " + dims(gain));
  constexpr T eps = T(1e-5);
  Matrix<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(n);
  const Matrix<T>& xv = x.value();
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = xv.row(r).mean();
    const T var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix<T> v = xhat.array().rowwise() * gain.value().row(0).array();
  v.rowwise() += bias.value().row(0);
  const int ix = x.id, ig = gain.id, ib = bias.id;
  return x.tape->record(
      std::move(v), any_grad(x, gain, bias),
      [ix, ig, ib, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Matrix<T>& g) {
        if (t.requires_grad(ig)) t.grad(ig) += g.cwiseProduct(xhat).colwise().sum();
        if (t.requires_grad(ib)) t.grad(ib) += g.colwise().sum();
        if (!t.requires_grad(ix)) return;
        const auto gain_row = t.value(ig).row(0).array();
        Matrix<T>& dx = t.grad(ix);
        const auto d = static_cast<T>(xhat.cols());
        for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
          const Eigen::Array<T, 1, Eigen::Dynamic> dxhat = g.row(r).array() * gain_row;
          const T m1 = dxhat.sum() / d;
          const T m2 = (dxhat * xhat.row(r).array()).sum() / d;
          dx.row(r).array() += inv_std(r) * (dxhat - m1 - xhat.row(r).array() * m2);
        }
      });
}

template <typename T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  constexpr T floor = T(1e-12);
  const Matrix<T>& xv = x.value();
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms = xv.rowwise().norm().cwiseMax(floor);
  Matrix<T> v = xv.array().colwise() / norms.array();
  const int ix = x.id;
  const int io = static_cast<int>(x.tape->size());
  return x.tape->record(std::move(v), any_grad(x), [ix, io, norms = std::move(norms)](Tape<T>& t, const Matrix<T>& g) {
    const Matrix<T>& y = t.value(io);
    Matrix<T>& dx = t.grad(ix);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const T proj = y.row(r).dot(g.row(r));
      dx.row(r) += (g.row(r) - y.row(r) * proj) / norms(r);
    }
  });
}

template <typename T>
Var<T> sum(const Var<T>& a) {
  Matrix<T> v(1, 1);
  v(0, 0) = a.value().sum();
  const int ia = a.id;
  return a.tape->record(std::move(v), any_grad(a), [ia](Tape<T>& t, const Matrix<T>& g) {
    t.grad(ia).array() += g(0, 0);
  });
}

template <typename T>
Var<T> weighted_sum(std::span<const Var<T>> terms, std::span<const T> weights) {
  if (terms.empty() || terms.size() != weights.size()) {
    throw std::invalid_argument("weighted_sum: terms and weights must be non-empty and equal length");
  }
  Matrix<T> v = Matrix<T>::Zero(1, 1);
  bool rg = false;
  std::vector<std::pair<int, T>> ids;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    check_shape(terms[i].rows() == 1 && terms[i].cols() == 1, "weighted_sum", dims(terms[i]));
    v(0, 0) += weights[i] * terms[i].value()(0, 0);
    rg = rg || any_grad(terms[i]);
    ids.emplace_back(terms[i].id, weights[i]);
  }
  return terms[0].tape->record(std::move(v), rg, [ids = std::move(ids)](Tape<T>& t, const Matrix<T>& g) {
    for (const auto& [id, w] : ids) {
      if (t.requires_grad(id)) t.grad(id)(0, 0) += w * g(0, 0);
    }
  });
}

// ---- shape ------------------------------------------------------------------------

template <typename T>
Var<T> gather_rows(const Var<T>& x, std::vector<int> index) {
  const Matrix<T>& xv = x.value();
  Matrix<T> v(static_cast<Eigen::Index>(index.size()), xv.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= xv.rows()) throw std::out_of_range("gather_rows: row index out of range");
    v.row(static_cast<Eigen::Index>(i)) = xv.row(index[i]);
  }
  const int ix = x.id;
  return x.tape->record(std::move(v), any_grad(x), [ix, index = std::move(index)](Tape<T>& t, const Matrix<T>& g) {
    Matrix<T>& dx = t.grad(ix);
    for (std::size_t i = 0; i < index.size(); ++i) dx.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
  });
}

template <typename T>
Var<T> concat_rows(std::span<const Var<T>> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  bool rg = false;
  std::vector<int> ids;
  for (const auto& p : parts) {
    check_shape(p.cols() == cols, "concat_rows", dims(p));
    rows += p.rows();
    rg = rg || any_grad(p);
    ids.push_back(p.id);
  }
  Matrix<T> v(rows, cols);
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    v.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return parts[0].tape->record(std::move(v), rg, [ids = std::move(ids)](Tape<T>& t, const Matrix<T>& g) {
    Eigen::Index off = 0;
    for (int id : ids) {
      const Eigen::Index r = t.value(id).rows();
      if (t.requires_grad(id)) t.grad(id) += g.middleRows(off, r);
      off += r;
    }
  });
}

template <typename T>
Var<T> slice_cols(const Var<T>& x, Eigen::Index begin, Eigen::Index count) {
  check_shape(begin >= 0 && count >= 0 && begin + count <= x.cols(), "slice_cols", dims(x));
  Matrix<T> v = x.value().middleCols(begin, count);
  const int ix = x.id;
  return x.tape->record(std::move(v), any_grad(x), [ix, begin, count](Tape<T>& t, const Matrix<T>& g) {
    t.grad(ix).middleCols(begin, count) += g;
  });
}

template <typename T>
Var<T> select_rows(const std::vector<char>& mask, const Var<T>& when_true, const Var<T>& when_false) {
  check_shape(when_true.rows() == when_false.rows() && when_true.cols() == when_false.cols() &&
                  static_cast<Eigen::Index>(mask.size()) == when_true.rows(),
              "select_rows", dims(when_true) + " vs " + dims(when_false));
  Matrix<T> v = when_false.value();
  for (std::size_t i = 0; i < mask.size(); ++i) {
    if (mask[i]) v.row(static_cast<Eigen::Index>(i)) = when_true.value().row(static_cast<Eigen::Index>(i));
  }
  const int it = when_true.id, iff = when_false.id;
  return when_true.tape->record(std::move(v), any_grad(when_true, when_false),
                                [it, iff, mask](Tape<T>& t, const Matrix<T>& g) {
                                  const bool gt = t.requires_grad(it), gf = t.requires_grad(iff);
                                  for (std::size_t i = 0; i < mask.size(); ++i) {
                                    const auto r = static_cast<Eigen::Index>(i);
                                    if (mask[i] && gt) t.grad(it).row(r) += g.row(r);
                                    if (!mask[i] && gf) t.grad(iff).row(r) += g.row(r);
                                  }
                                });
}

template <typename T>
Var<T> grouped_linear(const Var<T>& x, const Var<T>& w, const Var<T>& bias, const std::vector<int>& bounds) {
  const Eigen::Index groups = static_cast<Eigen::Index>(bounds.size()) - 1;
  check_shape(groups >= 1 && bounds.front() == 0 && bounds.back() == x.cols() && w.rows() == x.cols() &&
                  bias.rows() == groups && bias.cols() == w.cols(),
              "grouped_linear", dims(x) + " w " + dims(w) + " bias " + dims(bias));
  const Eigen::Index b = x.rows();
  Matrix<T> v(b * groups, w.cols());
  for (Eigen::Index g = 0; g < groups; ++g) {
    const Eigen::Index lo = bounds[static_cast<std::size_t>(g)];
    const Eigen::Index len = bounds[static_cast<std::size_t>(g) + 1] - lo;
    const Matrix<T> e = x.value().middleCols(lo, len) * w.value().middleRows(lo, len);
    for (Eigen::Index r = 0; r < b; ++r) v.row(r * groups + g) = e.row(r) + bias.value().row(g);
  }
  const int ix = x.id, iw = w.id, ib = bias.id;
  return x.tape->record(std::move(v), any_grad(x, w, bias),
                        [ix, iw, ib, bounds, groups, b](Tape<T>& t, const Matrix<T>& g) {
                          for (Eigen::Index k = 0; k < groups; ++k) {
                            const Eigen::Index lo = bounds[static_cast<std::size_t>(k)];
                            const Eigen::Index len = bounds[static_cast<std::size_t>(k) + 1] - lo;
                            Matrix<T> gk(b, g.cols());
                            for (Eigen::Index r = 0; r < b; ++r) gk.row(r) = g.row(r * groups + k);
                            if (t.requires_grad(ib)) t.grad(ib).row(k) += gk.colwise().sum();
                            if (t.requires_grad(iw))
                              t.grad(iw).middleRows(lo, len).noalias() +=
                                  t.value(ix).middleCols(lo, len).transpose() * gk;
                            if (t.requires_grad(ix))
                              t.grad(ix).middleCols(lo, len).noalias() +=
                                  gk * t.value(iw).middleRows(lo, len).transpose();
                          }
                        });
}

// ---- sequence ops -----------------------------------------------------------------

template <typename T>
Var<T> multi_head_attention(const Var<T>& qkv, int seq_len, int heads, std::vector<Matrix<T>>* probs) {
  const Matrix<T>& in = qkv.value();
  if (seq_len < 1 || in.rows() % seq_len != 0 || in.cols() % 3 != 0 || heads < 1 ||
      (in.cols() / 3) % heads != 0) {
    throw std::invalid_argument("multi_head_attention: bad shape " + dims(qkv));
  }
  const Eigen::Index d = in.cols() / 3;
  const Eigen::Index dh = d / heads;
  const Eigen::Index n_seq = in.rows() / seq_len;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh));
  std::vector<Matrix<T>> attn(static_cast<std::size_t>(n_seq * heads));
  Matrix<T> out(in.rows(), d);
  for (Eigen::Index s = 0; s < n_seq; ++s) {
    const Eigen::Index r0 = s * seq_len;
    for (Eigen::Index h = 0; h < heads; ++h) {
      const auto q = in.block(r0, h * dh, seq_len, dh);
      const auto k = in.block(r0, d + h * dh, seq_len, dh);
      const auto v = in.block(r0, 2 * d + h * dh, seq_len, dh);
      Matrix<T> a(seq_len, seq_len);
      a.noalias() = (q * k.transpose()) * inv_sqrt;
      for (Eigen::Index r = 0; r < seq_len; ++r) {
        const T mx = a.row(r).maxCoeff();
        a.row(r) = (a.row(r).array() - mx).exp();
        a.row(r) /= a.row(r).sum();
      }
      out.block(r0, h * dh, seq_len, dh).noalias() = a * v;
      attn[static_cast<std::size_t>(s * heads + h)] = std::move(a);
    }
  }
  if (probs != nullptr) *probs = attn;
  const int iq = qkv.id;
  return qkv.tape->record(
      std::move(out), any_grad(qkv),
      [iq, seq_len, heads, d, dh, n_seq, inv_sqrt, attn = std::move(attn)](Tape<T>& t, const Matrix<T>& g) {
        const Matrix<T>& in = t.value(iq);
        Matrix<T>& din = t.grad(iq);
        Matrix<T> da(seq_len, seq_len);
        for (Eigen::Index s = 0; s < n_seq; ++s) {
          const Eigen::Index r0 = s * seq_len;
          for (Eigen::Index h = 0; h < heads; ++h) {
            const Matrix<T>& a = attn[static_cast<std::size_t>(s * heads + h)];
            const auto q = in.block(r0, h * dh, seq_len, dh);
            const auto k = in.block(r0, d + h * dh, seq_len, dh);
            const auto v = in.block(r0, 2 * d + h * dh, seq_len, dh);
            const auto go = g.block(r0, h * dh, seq_len, dh);
            din.block(r0, 2 * d + h * dh, seq_len, dh).noalias() += a.transpose() * go;
            da.noalias() = go * v.transpose();
            for (Eigen::Index r = 0; r < seq_len; ++r) {
              const T dot = a.row(r).dot(da.row(r));
              da.row(r) = a.row(r).cwiseProduct((da.row(r).array() - dot).matrix());
            }
            da *= inv_sqrt;
            din.block(r0, h * dh, seq_len, dh).noalias() += da * k;
            din.block(r0, d + h * dh, seq_len, dh).noalias() += da.transpose() * q;
          }
        }
      });
}

namespace {

// Grid geometry shared by the forward and backward passes of ppeg.
struct GridPlan {
  int n;     // real tokens
  int side;  // grid side m = ceil(sqrt(n))
  int cell_source(int cell) const { return cell < n ? cell : n - 1; }
};

GridPlan make_grid(int n) {
  int m = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
  while (m * m < n) ++m;
  while (m > 1 && (m - 1) * (m - 1) >= n) --m;
  return GridPlan{n, m};
}

// Sum of the 3x3, 5x5 and 7x7 kernels as one centered 7x7 kernel.
template <typename T>
Matrix<T> combined_kernel(const Matrix<T>& k3, const Matrix<T>& k5, const Matrix<T>& k7) {
  Matrix<T> k = k7;
  for (int r = 0; r < 5; ++r)
    for (int c = 0; c < 5; ++c) k.row((r + 1) * 7 + (c + 1)) += k5.row(r * 5 + c);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) k.row((r + 2) * 7 + (c + 2)) += k3.row(r * 3 + c);
  return k;
}

}  // namespace

template <typename T>
Var<T> ppeg(const Var<T>& x, int seq_len, const Var<T>& k3, const Var<T>& k5, const Var<T>& k7) {
  const Matrix<T>& xv = x.value();
  const Eigen::Index d = xv.cols();
  if (seq_len < 1 || xv.rows() % seq_len != 0) throw std::invalid_argument("ppeg: bad shape " + dims(x));
  check_shape(k3.rows() == 9 && k5.rows() == 25 && k7.rows() == 49 && k3.cols() == d && k5.cols() == d &&
                  k7.cols() == d,
              "ppeg", "kernels vs " + dims(x));
  const GridPlan grid = make_grid(seq_len);
  const int m = grid.side;
  const Matrix<T> kernel = combined_kernel(k3.value(), k5.value(), k7.value());
  const Eigen::Index n_seq = xv.rows() / seq_len;
  Matrix<T> out = xv;
  for (Eigen::Index s = 0; s < n_seq; ++s) {
    const Eigen::Index r0 = s * seq_len;
    for (int p = 0; p < seq_len; ++p) {
      const int pr = p / m, pc = p % m;
      for (int dr = -3; dr <= 3; ++dr) {
        const int rr = pr + dr;
        if (rr < 0 || rr >= m) continue;
        for (int dc = -3; dc <= 3; ++dc) {
          const int cc = pc + dc;
          if (cc < 0 || cc >= m) continue;
          const int src = grid.cell_source(rr * m + cc);
          out.row(r0 + p).array() += kernel.row((dr + 3) * 7 + (dc + 3)).array() * xv.row(r0 + src).array();
        }
      }
    }
  }
  const int ix = x.id, i3 = k3.id, i5 = k5.id, i7 = k7.id;
  return x.tape->record(std::move(out), any_grad(x, k3, k5, k7),
                        [ix, i3, i5, i7, seq_len, grid, n_seq, d](Tape<T>& t, const Matrix<T>& g) {
                          const int m = grid.side;
                          const Matrix<T>& xv = t.value(ix);
                          const Matrix<T> kernel = combined_kernel(t.value(i3), t.value(i5), t.value(i7));
                          const bool gx = t.requires_grad(ix);
                          Matrix<T> dk = Matrix<T>::Zero(49, d);
                          if (gx) t.grad(ix) += g;
                          for (Eigen::Index s = 0; s < n_seq; ++s) {
                            const Eigen::Index r0 = s * seq_len;
                            for (int p = 0; p < seq_len; ++p) {
                              const int pr = p / m, pc = p % m;
                              const auto gp = g.row(r0 + p).array();
                              for (int dr = -3; dr <= 3; ++dr) {
                                const int rr = pr + dr;
                                if (rr < 0 || rr >= m) continue;
                                for (int dc = -3; dc <= 3; ++dc) {
                                  const int cc = pc + dc;
                                  if (cc < 0 || cc >= m) continue;
                                  const int src = grid.cell_source(rr * m + cc);
                                  const int kr = (dr + 3) * 7 + (dc + 3);
                                  dk.row(kr).array() += gp * xv.row(r0 + src).array();
                                  if (gx) t.grad(ix).row(r0 + src).array() += gp * kernel.row(kr).array();
                                }
                              }
                            }
                          }
                          if (t.requires_grad(i7)) t.grad(i7) += dk;
                          if (t.requires_grad(i5)) {
                            Matrix<T>& d5 = t.grad(i5);
                            for (int r = 0; r < 5; ++r)
                              for (int c = 0; c < 5; ++c) d5.row(r * 5 + c) += dk.row((r + 1) * 7 + (c + 1));
                          }
                          if (t.requires_grad(i3)) {
                            Matrix<T>& d3 = t.grad(i3);
                            for (int r = 0; r < 3; ++r)
                              for (int c = 0; c < 3; ++c) d3.row(r * 3 + c) += dk.row((r + 2) * 7 + (c + 2));
                          }
                        });
}

// ---- losses -----------------------------------------------------------------------

namespace {

template <typename T>
void softmax_rows_inplace(Matrix<T>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const T mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

template <typename T>
T log_sum_exp(const Eigen::Ref<const Eigen::Matrix<T, 1, Eigen::Dynamic>>& v) {
  const T mx = v.maxCoeff();
  return mx + std::log((v.array() - mx).exp().sum());
}

}  // namespace

template <typename T>
Var<T> symmetric_info_nce(const Var<T>& s, const Var<T>& t, T scale) {
  check_shape(s.rows() == t.rows() && s.cols() == t.cols() && s.rows() >= 1, "symmetric_info_nce",
              dims(s) + " vs " + dims(t));
  const Eigen::Index b = s.rows();
  Matrix<T> logits = (s.value() * t.value().transpose()) * scale;
  T total = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    total += log_sum_exp<T>(logits.row(i)) - logits(i, i);
    const Eigen::Matrix<T, 1, Eigen::Dynamic> col = logits.col(i).transpose();
    total += log_sum_exp<T>(col) - logits(i, i);
  }
  Matrix<T> v(1, 1);
  v(0, 0) = total / (T(2) * static_cast<T>(b));
  const int is = s.id, it = t.id;
  return s.tape->record(std::move(v), any_grad(s, t),
                        [is, it, scale, b, logits = std::move(logits)](Tape<T>& tp, const Matrix<T>& g) {
                          Matrix<T> row_p = logits;
                          softmax_rows_inplace(row_p);
                          Matrix<T> col_p = logits.transpose();
                          softmax_rows_inplace(col_p);
                          Matrix<T> dlogits = row_p + col_p.transpose();
                          dlogits.diagonal().array() -= T(2);
                          dlogits *= g(0, 0) / (T(2) * static_cast<T>(b));
                          if (tp.requires_grad(is)) tp.grad(is).noalias() += (dlogits * tp.value(it)) * scale;
                          if (tp.requires_grad(it))
                            tp.grad(it).noalias() += (dlogits.transpose() * tp.value(is)) * scale;
                        });
}

template <typename T>
Var<T> kl_standard_normal(const Var<T>& mu, const Var<T>& logvar) {
  check_shape(mu.rows() == logvar.rows() && mu.cols() == logvar.cols(), "kl_standard_normal",
              dims(mu) + " vs " + dims(logvar));
  const auto b = static_cast<T>(mu.rows());
  const auto m = mu.value().array();
  const auto lv = logvar.value().array();
  Matrix<T> v(1, 1);
  v(0, 0) = T(0.5) * (m.square() + lv.exp() - lv - T(1)).sum() / b;
  const int im = mu.id, il = logvar.id;
  return mu.tape->record(std::move(v), any_grad(mu, logvar), [im, il, b](Tape<T>& t, const Matrix<T>& g) {
    const T s = g(0, 0) / b;
    if (t.requires_grad(im)) t.grad(im) += t.value(im) * s;
    if (t.requires_grad(il)) t.grad(il).array() += T(0.5) * s * (t.value(il).array().exp() - T(1));
  });
}

template <typename T>
Var<T> cosine_softmax(const Var<T>& z, const Var<T>& centers, T kappa) {
  check_shape(z.cols() == centers.cols(), "cosine_softmax", dims(z) + " vs " + dims(centers));
  constexpr T tiny = T(1e-12);
  const Matrix<T>& zv = z.value();
  const Matrix<T>& cv = centers.value();
  Eigen::Matrix<T, Eigen::Dynamic, 1> zn = zv.rowwise().norm();
  Eigen::Matrix<T, Eigen::Dynamic, 1> cn = cv.rowwise().norm().cwiseMax(tiny);
  Matrix<T> zu = Matrix<T>::Zero(zv.rows(), zv.cols());
  for (Eigen::Index r = 0; r < zv.rows(); ++r) {
    if (zn(r) > tiny) zu.row(r) = zv.row(r) / zn(r);
  }
  Matrix<T> cu = cv.array().colwise() / cn.array();
  Matrix<T> p = (zu * cu.transpose()) * kappa;
  softmax_rows_inplace(p);
  const int iz = z.id, ic = centers.id;
  Matrix<T> out = p;
  return z.tape->record(std::move(out), any_grad(z, centers),
                        [iz, ic, kappa, zn = std::move(zn), cn = std::move(cn), zu = std::move(zu),
                         cu = std::move(cu), p = std::move(p)](Tape<T>& t, const Matrix<T>& g) {
                          Matrix<T> dlog(p.rows(), p.cols());
                          for (Eigen::Index r = 0; r < p.rows(); ++r) {
                            const T dot = p.row(r).dot(g.row(r));
                            dlog.row(r) = p.row(r).cwiseProduct((g.row(r).array() - dot).matrix());
                          }
                          dlog *= kappa;
                          if (t.requires_grad(iz)) {
                            Matrix<T> dzu = dlog * cu;
                            Matrix<T>& dz = t.grad(iz);
                            for (Eigen::Index r = 0; r < zu.rows(); ++r) {
                              if (zn(r) <= tiny) continue;
                              const T proj = zu.row(r).dot(dzu.row(r));
                              dz.row(r) += (dzu.row(r) - zu.row(r) * proj) / zn(r);
                            }
                          }
                          if (t.requires_grad(ic)) {
                            Matrix<T> dcu = dlog.transpose() * zu;
                            Matrix<T>& dc = t.grad(ic);
                            for (Eigen::Index r = 0; r < cu.rows(); ++r) {
                              const T proj = cu.row(r).dot(dcu.row(r));
                              dc.row(r) += (dcu.row(r) - cu.row(r) * proj) / cn(r);
                            }
                          }
                        });
}

template <typename T>
Var<T> symmetric_kl(const Var<T>& p, const Var<T>& q, T floor) {
  check_shape(p.rows() == q.rows() && p.cols() == q.cols(), "symmetric_kl", dims(p) + " vs " + dims(q));
  const auto pa = p.value().array();
  const auto qa = q.value().array();
  const auto b = static_cast<T>(p.rows());
  Matrix<T> v(1, 1);
  v(0, 0) = ((pa - qa) * (pa.max(floor).log() - qa.max(floor).log())).sum() / b;
  const int ip = p.id, iq = q.id;
  return p.tape->record(std::move(v), any_grad(p, q), [ip, iq, floor, b](Tape<T>& t, const Matrix<T>& g) {
    const auto pa = t.value(ip).array();
    const auto qa = t.value(iq).array();
    const T s = g(0, 0) / b;
    const auto logdiff = pa.max(floor).log() - qa.max(floor).log();
    const auto diff = pa - qa;
    if (t.requires_grad(ip)) {
      const auto inv_p = (pa > floor).select(pa.max(floor).inverse(), T(0));
      t.grad(ip).array() += s * (logdiff + diff * inv_p);
    }
    if (t.requires_grad(iq)) {
      const auto inv_q = (qa > floor).select(qa.max(floor).inverse(), T(0));
      t.grad(iq).array() += s * (-logdiff - diff * inv_q);
    }
  });
}

template <typename T>
Var<T> masked_mse(const Var<T>& pred, const Matrix<T>& target, const std::vector<char>& mask, int seq_len) {
  check_shape(pred.rows() == target.rows() && pred.cols() == target.cols() &&
                  static_cast<Eigen::Index>(mask.size()) == pred.rows() && seq_len >= 1 &&
                  pred.rows() % seq_len == 0,
              "masked_mse", dims(pred));
  const Eigen::Index n_seq = pred.rows() / seq_len;
  const Eigen::Index cols = pred.cols();
  std::vector<T> weight(static_cast<std::size_t>(n_seq), T(0));
  T total = 0;
  for (Eigen::Index s = 0; s < n_seq; ++s) {
    int count = 0;
    for (int i = 0; i < seq_len; ++i) count += mask[static_cast<std::size_t>(s * seq_len + i)] ? 1 : 0;
    if (count == 0) continue;
    const T w = T(1) / (static_cast<T>(count) * static_cast<T>(cols) * static_cast<T>(n_seq));
    weight[static_cast<std::size_t>(s)] = w;
    for (int i = 0; i < seq_len; ++i) {
      const Eigen::Index r = s * seq_len + i;
      if (mask[static_cast<std::size_t>(r)]) total += w * (pred.value().row(r) - target.row(r)).squaredNorm();
    }
  }
  Matrix<T> v(1, 1);
  v(0, 0) = total;
  const int ip = pred.id;
  return pred.tape->record(std::move(v), any_grad(pred),
                           [ip, target, mask, seq_len, weight = std::move(weight)](Tape<T>& t, const Matrix<T>& g) {
                             Matrix<T>& dp = t.grad(ip);
                             const Matrix<T>& pv = t.value(ip);
                             for (Eigen::Index r = 0; r < pv.rows(); ++r) {
                               if (!mask[static_cast<std::size_t>(r)]) continue;
                               const T w = weight[static_cast<std::size_t>(r / seq_len)];
                               dp.row(r) += (pv.row(r) - target.row(r)) * (T(2) * w * g(0, 0));
                             }
                           });
}

// ---- instantiation ----------------------------------------------------------------

#define MIRROR_AD_INSTANTIATE(T)                                                                       \
  template class Tape<T>;                                                                              \
  template Var<T> add(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> sub(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> mul(const Var<T>&, const Var<T>&);                                                   \
  template Var<T> scale(const Var<T>&, T);                                                             \
  template Var<T> exp(const Var<T>&);                                                                  \
  template Var<T> clamp(const Var<T>&, T, T);                                                          \
  template Var<T> gelu(const Var<T>&);                                                                 \
  template Var<T> matmul(const Var<T>&, const Var<T>&);                                                \
  template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                 \
  template Var<T> layer_norm(const Var<T>&, const Var<T>&, const Var<T>&);                             \
  template Var<T> l2_normalize_rows(const Var<T>&);                                                    \
  template Var<T> sum(const Var<T>&);                                                                  \
  template Var<T> weighted_sum(std::span<const Var<T>>, std::span<const T>);                           \
  template Var<T> gather_rows(const Var<T>&, std::vector<int>);                                        \
  template Var<T> concat_rows(std::span<const Var<T>>);                                                \
  template Var<T> slice_cols(const Var<T>&, Eigen::Index, Eigen::Index);                               \
  template Var<T> select_rows(const std::vector<char>&, const Var<T>&, const Var<T>&);                  \
  template Var<T> grouped_linear(const Var<T>&, const Var<T>&, const Var<T>&, const std::vector<int>&);  \
  template Var<T> multi_head_attention(const Var<T>&, int, int, std::vector<Matrix<T>>*);              \
  template Var<T> ppeg(const Var<T>&, int, const Var<T>&, const Var<T>&, const Var<T>&);               \
  template Var<T> symmetric_info_nce(const Var<T>&, const Var<T>&, T);                                 \
  template Var<T> kl_standard_normal(const Var<T>&, const Var<T>&);                                    \
  template Var<T> cosine_softmax(const Var<T>&, const Var<T>&, T);                                     \
  template Var<T> symmetric_kl(const Var<T>&, const Var<T>&, T);                                       \
  template Var<T> masked_mse(const Var<T>&, const Matrix<T>&, const std::vector<char>&, int);

MIRROR_AD_INSTANTIATE(float)
MIRROR_AD_INSTANTIATE(double)

#undef MIRROR_AD_INSTANTIATE

}  // namespace mirror::ad
