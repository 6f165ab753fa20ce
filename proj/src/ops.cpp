#include "deltaroute/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "deltaroute/errors.hpp"

namespace deltaroute {

namespace {

template <typename Scalar>
using NodePtr = std::shared_ptr<TensorNode<Scalar>>;

// Gradient buffer of an input, or nullptr when it takes no gradient.
template <typename Scalar>
Scalar* grad_of(const NodePtr<Scalar>& node) {
  return node->requires_grad ? node->grad_buffer().data() : nullptr;
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, float alpha,
          const float* a, std::size_t lda, const float* b, std::size_t ldb, float beta, float* c,
          std::size_t ldc) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const double* a, std::size_t lda, const double* b, std::size_t ldb, double beta,
          double* c, std::size_t ldc) {
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(m), static_cast<int>(n),
              static_cast<int>(k), alpha, a, static_cast<int>(lda), b, static_cast<int>(ldb), beta,
              c, static_cast<int>(ldc));
}

bool is_suffix(const Shape& full, const Shape& suffix) {
  if (suffix.size() > full.size()) return false;
  return std::equal(suffix.rbegin(), suffix.rend(), full.rbegin());
}

template <typename Scalar>
void require_broadcastable(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b,
                           const char* op) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + ": shape " + shape_to_string(b.shape()) +
                         " does not broadcast over leading axes of " +
                         shape_to_string(a.shape()));
  }
}

enum class BinaryKind { Add, Sub, Mul };

template <typename Scalar>
BasicTensor<Scalar> binary(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b,
                           BinaryKind kind, const char* name) {
  require_broadcastable(a, b, name);
  const auto total = a.numel();
  const auto inner = b.numel();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<Scalar> out(total);
  for (std::size_t o = 0; o < total; o += inner) {
    const Scalar* x = ad.data() + o;
    Scalar* y = out.data() + o;
    switch (kind) {
      case BinaryKind::Add:
        for (std::size_t i = 0; i < inner; ++i) y[i] = x[i] + bd[i];
        break;
      case BinaryKind::Sub:
        for (std::size_t i = 0; i < inner; ++i) y[i] = x[i] - bd[i];
        break;
      case BinaryKind::Mul:
        for (std::size_t i = 0; i < inner; ++i) y[i] = x[i] * bd[i];
        break;
    }
  }
  return BasicTensor<Scalar>::from_op(
      a.shape(), std::move(out), {a.node(), b.node()}, [kind, inner](TensorNode<Scalar>& self) {
        const auto& in_a = self.inputs[0];
        const auto& in_b = self.inputs[1];
        Scalar* ga = grad_of(in_a);
        Scalar* gb = grad_of(in_b);
        const Scalar* g = self.grad.data();
        const auto total = self.data.size();
        const Scalar sign = kind == BinaryKind::Sub ? Scalar(-1) : Scalar(1);
        for (std::size_t o = 0; o < total; o += inner) {
          const Scalar* go = g + o;
          if (kind == BinaryKind::Mul) {
            const Scalar* xa = in_a->data.data() + o;
            const Scalar* xb = in_b->data.data();
            if (ga) for (std::size_t i = 0; i < inner; ++i) ga[o + i] += go[i] * xb[i];
            if (gb) for (std::size_t i = 0; i < inner; ++i) gb[i] += go[i] * xa[i];
          } else {
            if (ga) for (std::size_t i = 0; i < inner; ++i) ga[o + i] += go[i];
            if (gb) for (std::size_t i = 0; i < inner; ++i) gb[i] += sign * go[i];
          }
        }
      });
}

template <typename Scalar, typename Forward, typename Derivative>
BasicTensor<Scalar> unary(const BasicTensor<Scalar>& x, Forward f, Derivative df) {
  auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = f(xd[i]);
  return BasicTensor<Scalar>::from_op(x.shape(), std::move(out), {x.node()},
                                      [df](TensorNode<Scalar>& self) {
                                        const auto& in = self.inputs[0];
                                        Scalar* gx = grad_of(in);
                                        if (!gx) return;
                                        for (std::size_t i = 0; i < self.data.size(); ++i) {
                                          gx[i] += self.grad[i] * df(in->data[i], self.data[i]);
                                        }
                                      });
}

}  // namespace

template <typename Scalar>
BasicTensor<Scalar> matmul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  if (a.rank() < 2 || b.rank() != 2 || a.shape().back() != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " and " +
                         shape_to_string(b.shape()));
  }
  const std::size_t k = b.dim(0);
  const std::size_t n = b.dim(1);
  const std::size_t m = a.numel() / k;
  Shape out_shape = a.shape();
  out_shape.back() = n;
  std::vector<Scalar> out(m * n, Scalar(0));
  if (m && n && k) {
    gemm(false, false, m, n, k, Scalar(1), a.data().data(), k, b.data().data(), n, Scalar(0),
         out.data(), n);
  }
  return BasicTensor<Scalar>::from_op(
      std::move(out_shape), std::move(out), {a.node(), b.node()},
      [m, n, k](TensorNode<Scalar>& self) {
        const auto& in_a = self.inputs[0];
        const auto& in_b = self.inputs[1];
        if (!m || !n || !k) return;
        if (Scalar* ga = grad_of(in_a)) {
          gemm(false, true, m, k, n, Scalar(1), self.grad.data(), n, in_b->data.data(), n,
               Scalar(1), ga, k);
        }
        if (Scalar* gb = grad_of(in_b)) {
          gemm(true, false, k, n, m, Scalar(1), in_a->data.data(), k, self.grad.data(), n,
               Scalar(1), gb, n);
        }
      });
}

template <typename Scalar>
BasicTensor<Scalar> add(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  return binary(a, b, BinaryKind::Add, "add");
}

template <typename Scalar>
BasicTensor<Scalar> sub(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  return binary(a, b, BinaryKind::Sub, "sub");
}

template <typename Scalar>
BasicTensor<Scalar> mul(const BasicTensor<Scalar>& a, const BasicTensor<Scalar>& b) {
  return binary(a, b, BinaryKind::Mul, "mul");
}

template <typename Scalar>
BasicTensor<Scalar> scale(const BasicTensor<Scalar>& a, Scalar factor) {
  return unary(
      a, [factor](Scalar v) { return v * factor; },
      [factor](Scalar, Scalar) { return factor; });
}

template <typename Scalar>
BasicTensor<Scalar> silu(const BasicTensor<Scalar>& x) {
  return unary(
      x, [](Scalar v) { return v / (Scalar(1) + std::exp(-v)); },
      [](Scalar v, Scalar) {
        const Scalar s = Scalar(1) / (Scalar(1) + std::exp(-v));
        return s * (Scalar(1) + v * (Scalar(1) - s));
      });
}

template <typename Scalar>
BasicTensor<Scalar> exp(const BasicTensor<Scalar>& x) {
  return unary(
      x, [](Scalar v) { return std::exp(v); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
BasicTensor<Scalar> log(const BasicTensor<Scalar>& x) {
  return unary(
      x, [](Scalar v) { return std::log(v); }, [](Scalar v, Scalar) { return Scalar(1) / v; });
}

template <typename Scalar>
BasicTensor<Scalar> softmax(const BasicTensor<Scalar>& x, std::size_t axis) {
  const auto& shape = x.shape();
  if (axis >= shape.size()) {
    throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_to_string(shape));
  }
  const std::size_t n = shape[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];

  auto xd = x.data();
  for (auto v : xd) {
    if (std::isnan(v)) throw NumericError("softmax: NaN in input");
  }
  std::vector<Scalar> out(xd.size());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * n * inner + i;
      Scalar peak = -std::numeric_limits<Scalar>::infinity();
      for (std::size_t j = 0; j < n; ++j) peak = std::max(peak, xd[base + j * inner]);
      Scalar total = 0;
      for (std::size_t j = 0; j < n; ++j) {
        const Scalar e = std::exp(xd[base + j * inner] - peak);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  return BasicTensor<Scalar>::from_op(
      shape, std::move(out), {x.node()}, [outer, inner, n](TensorNode<Scalar>& self) {
        Scalar* gx = grad_of(self.inputs[0]);
        if (!gx) return;
        const auto& y = self.data;
        const auto& g = self.grad;
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t i = 0; i < inner; ++i) {
            const std::size_t base = o * n * inner + i;
            Scalar dot = 0;
            for (std::size_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
            for (std::size_t j = 0; j < n; ++j) {
              const auto idx = base + j * inner;
              gx[idx] += y[idx] * (g[idx] - dot);
            }
          }
        }
      });
}

template <typename Scalar>
BasicTensor<Scalar> rmsnorm(const BasicTensor<Scalar>& x, const BasicTensor<Scalar>& gain,
                            Scalar eps) {
  if (x.rank() < 1 || gain.rank() != 1 || x.shape().back() != gain.dim(0)) {
    throw DimensionError("rmsnorm: input " + shape_to_string(x.shape()) +
                         " incompatible with gain " + shape_to_string(gain.shape()));
  }
  const std::size_t d = gain.dim(0);
  const std::size_t rows = x.numel() / d;
  auto xd = x.data();
  auto gd = gain.data();
  std::vector<Scalar> out(xd.size());
  std::vector<Scalar> inv_rms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const Scalar* row = xd.data() + r * d;
    Scalar sq = 0;
    for (std::size_t i = 0; i < d; ++i) sq += row[i] * row[i];
    const Scalar inv = Scalar(1) / std::sqrt(sq / Scalar(d) + eps);
    inv_rms[r] = inv;
    for (std::size_t i = 0; i < d; ++i) out[r * d + i] = row[i] * inv * gd[i];
  }
  return BasicTensor<Scalar>::from_op(
      x.shape(), std::move(out), {x.node(), gain.node()},
      [d, rows, inv_rms = std::move(inv_rms)](TensorNode<Scalar>& self) {
        const auto& in_x = self.inputs[0];
        const auto& in_g = self.inputs[1];
        Scalar* gx = grad_of(in_x);
        Scalar* gg = grad_of(in_g);
        for (std::size_t r = 0; r < rows; ++r) {
          const Scalar* row = in_x->data.data() + r * d;
          const Scalar* dy = self.grad.data() + r * d;
          const Scalar inv = inv_rms[r];
          if (gg) {
            for (std::size_t i = 0; i < d; ++i) gg[i] += dy[i] * row[i] * inv;
          }
          if (gx) {
            Scalar dot = 0;
            for (std::size_t i = 0; i < d; ++i) dot += dy[i] * in_g->data[i] * row[i];
            const Scalar coeff = inv * inv * inv * dot / Scalar(d);
            for (std::size_t i = 0; i < d; ++i) {
              gx[r * d + i] += inv * dy[i] * in_g->data[i] - row[i] * coeff;
            }
          }
        }
      });
}

template <typename Scalar>
BasicTensor<Scalar> stack(std::span<const BasicTensor<Scalar>> tensors) {
  if (tensors.empty()) throw ContractError("stack: empty tensor list");
  const Shape& item_shape = tensors.front().shape();
  const std::size_t item = shape_numel(item_shape);
  std::vector<Scalar> out;
  out.reserve(item * tensors.size());
  std::vector<NodePtr<Scalar>> inputs;
  inputs.reserve(tensors.size());
  for (const auto& t : tensors) {
    if (t.shape() != item_shape) {
      throw DimensionError("stack: shape " + shape_to_string(t.shape()) + " differs from " +
                           shape_to_string(item_shape));
    }
    auto d = t.data();
    out.insert(out.end(), d.begin(), d.end());
    inputs.push_back(t.node());
  }
  Shape shape{tensors.size()};
  shape.insert(shape.end(), item_shape.begin(), item_shape.end());
  return BasicTensor<Scalar>::from_op(std::move(shape), std::move(out), std::move(inputs),
                                      [item](TensorNode<Scalar>& self) {
                                        for (std::size_t s = 0; s < self.inputs.size(); ++s) {
                                          Scalar* g = grad_of(self.inputs[s]);
                                          if (!g) continue;
                                          const Scalar* src = self.grad.data() + s * item;
                                          for (std::size_t i = 0; i < item; ++i) g[i] += src[i];
                                        }
                                      });
}

template <typename Scalar>
BasicTensor<Scalar> reshape(const BasicTensor<Scalar>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + shape_to_string(x.shape()) + " as " +
                         shape_to_string(shape));
  }
  return BasicTensor<Scalar>::from_op(std::move(shape), x.to_vector(), {x.node()},
                                      [](TensorNode<Scalar>& self) {
                                        Scalar* g = grad_of(self.inputs[0]);
                                        if (!g) return;
                                        for (std::size_t i = 0; i < self.grad.size(); ++i) {
                                          g[i] += self.grad[i];
                                        }
                                      });
}

template <typename Scalar>
BasicTensor<Scalar> transpose(const BasicTensor<Scalar>& x) {
  if (x.rank() != 2) throw DimensionError("transpose: expected rank 2, got " +
                                          shape_to_string(x.shape()));
  const std::size_t rows = x.dim(0), cols = x.dim(1);
  auto xd = x.data();
  std::vector<Scalar> out(xd.size());
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = xd[r * cols + c];
  }
  return BasicTensor<Scalar>::from_op({cols, rows}, std::move(out), {x.node()},
                                      [rows, cols](TensorNode<Scalar>& self) {
                                        Scalar* g = grad_of(self.inputs[0]);
                                        if (!g) return;
                                        for (std::size_t r = 0; r < rows; ++r) {
                                          for (std::size_t c = 0; c < cols; ++c) {
                                            g[r * cols + c] += self.grad[c * rows + r];
                                          }
                                        }
                                      });
}

template <typename Scalar>
BasicTensor<Scalar> sum(const BasicTensor<Scalar>& x) {
  Scalar total = 0;
  for (auto v : x.data()) total += v;
  return BasicTensor<Scalar>::from_op({}, {total}, {x.node()}, [](TensorNode<Scalar>& self) {
    const auto& in = self.inputs[0];
    Scalar* g = grad_of(in);
    if (!g) return;
    for (std::size_t i = 0; i < in->data.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename Scalar>
BasicTensor<Scalar> mean(const BasicTensor<Scalar>& x) {
  if (x.numel() == 0) throw ContractError("mean of an empty tensor");
  return scale(sum(x), Scalar(1) / Scalar(x.numel()));
}

template <typename Scalar>
BasicTensor<Scalar> cross_entropy(const BasicTensor<Scalar>& logits,
                                  std::span<const std::int32_t> targets) {
  if (logits.rank() < 1) throw DimensionError("cross_entropy: logits need a vocabulary axis");
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = vocab ? logits.numel() / vocab : 0;
  if (targets.size() != rows || rows == 0) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) +
                         " targets for logits of shape " + shape_to_string(logits.shape()));
  }
  auto ld = logits.data();
  std::vector<Scalar> probs(ld.size());
  Scalar total = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " +
                       std::to_string(vocab) + ")");
    }
    const Scalar* row = ld.data() + r * vocab;
    const Scalar peak = *std::max_element(row, row + vocab);
    Scalar z = 0;
    for (std::size_t v = 0; v < vocab; ++v) {
      const Scalar e = std::exp(row[v] - peak);
      probs[r * vocab + v] = e;
      z += e;
    }
    for (std::size_t v = 0; v < vocab; ++v) probs[r * vocab + v] /= z;
    total += peak + std::log(z) - row[t];
  }
  std::vector<std::int32_t> saved(targets.begin(), targets.end());
  return BasicTensor<Scalar>::from_op(
      {}, {total / Scalar(rows)}, {logits.node()},
      [rows, vocab, probs = std::move(probs), saved = std::move(saved)](TensorNode<Scalar>& self) {
        Scalar* g = grad_of(self.inputs[0]);
        if (!g) return;
        const Scalar s = self.grad[0] / Scalar(rows);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t v = 0; v < vocab; ++v) g[r * vocab + v] += s * probs[r * vocab + v];
          g[r * vocab + static_cast<std::size_t>(saved[r])] -= s;
        }
      });
}

template <typename Scalar>
BasicTensor<Scalar> embedding(const BasicTensor<Scalar>& table,
                              std::span<const std::int32_t> ids, const Shape& ids_shape) {
  if (table.rank() != 2) throw DimensionError("embedding: table must be [V, d]");
  if (shape_numel(ids_shape) != ids.size()) {
    throw DimensionError("embedding: ids length does not match " + shape_to_string(ids_shape));
  }
  const std::size_t vocab = table.dim(0);
  const std::size_t d = table.dim(1);
  auto td = table.data();
  std::vector<Scalar> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const auto id = ids[i];
    if (id < 0 || static_cast<std::size_t>(id) >= vocab) {
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
    std::copy_n(td.data() + static_cast<std::size_t>(id) * d, d, out.data() + i * d);
  }
  Shape shape = ids_shape;
  shape.push_back(d);
  std::vector<std::int32_t> saved(ids.begin(), ids.end());
  return BasicTensor<Scalar>::from_op(std::move(shape), std::move(out), {table.node()},
                                      [d, saved = std::move(saved)](TensorNode<Scalar>& self) {
                                        Scalar* g = grad_of(self.inputs[0]);
                                        if (!g) return;
                                        for (std::size_t i = 0; i < saved.size(); ++i) {
                                          Scalar* row = g + static_cast<std::size_t>(saved[i]) * d;
                                          const Scalar* src = self.grad.data() + i * d;
                                          for (std::size_t j = 0; j < d; ++j) row[j] += src[j];
                                        }
                                      });
}

template <typename Scalar>
BasicTensor<Scalar> causal_attention(const BasicTensor<Scalar>& q, const BasicTensor<Scalar>& k,
                                     const BasicTensor<Scalar>& v, std::size_t n_heads) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("causal_attention: q, k, v must share shape [B, T, d], got " +
                         shape_to_string(q.shape()) + ", " + shape_to_string(k.shape()) + ", " +
                         shape_to_string(v.shape()));
  }
  const std::size_t batch = q.dim(0), seq = q.dim(1), d = q.dim(2);
  if (n_heads == 0 || d % n_heads != 0) {
    throw DimensionError("causal_attention: " + std::to_string(n_heads) +
                         " heads do not divide width " + std::to_string(d));
  }
  const std::size_t hd = d / n_heads;
  const Scalar scale_factor = Scalar(1) / std::sqrt(Scalar(hd));
  auto qd = q.data(), kd = k.data(), vd = v.data();
  std::vector<Scalar> out(q.numel(), Scalar(0));
  // probs[b][h] is a [T, T] row-major matrix, zero above the diagonal.
  auto probs = std::make_shared<std::vector<Scalar>>(batch * n_heads * seq * seq, Scalar(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < n_heads; ++h) {
      const std::size_t off = b * seq * d + h * hd;
      Scalar* p = probs->data() + (b * n_heads + h) * seq * seq;
      gemm(false, true, seq, seq, hd, scale_factor, qd.data() + off, d, kd.data() + off, d,
           Scalar(0), p, seq);
      for (std::size_t t = 0; t < seq; ++t) {
        Scalar* row = p + t * seq;
        Scalar peak = -std::numeric_limits<Scalar>::infinity();
        for (std::size_t j = 0; j <= t; ++j) peak = std::max(peak, row[j]);
        Scalar z = 0;
        for (std::size_t j = 0; j <= t; ++j) z += row[j] = std::exp(row[j] - peak);
        for (std::size_t j = 0; j <= t; ++j) row[j] /= z;
        for (std::size_t j = t + 1; j < seq; ++j) row[j] = Scalar(0);
      }
      gemm(false, false, seq, hd, seq, Scalar(1), p, seq, vd.data() + off, d, Scalar(0),
           out.data() + off, d);
    }
  }
  return BasicTensor<Scalar>::from_op(
      q.shape(), std::move(out), {q.node(), k.node(), v.node()},
      [batch, seq, d, n_heads, hd, scale_factor, probs](TensorNode<Scalar>& self) {
        const auto& in_q = self.inputs[0];
        const auto& in_k = self.inputs[1];
        const auto& in_v = self.inputs[2];
        Scalar* gq = grad_of(in_q);
        Scalar* gk = grad_of(in_k);
        Scalar* gv = grad_of(in_v);
        std::vector<Scalar> ds(seq * seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < n_heads; ++h) {
            const std::size_t off = b * seq * d + h * hd;
            const Scalar* p = probs->data() + (b * n_heads + h) * seq * seq;
            const Scalar* go = self.grad.data() + off;
            if (gv) gemm(true, false, seq, hd, seq, Scalar(1), p, seq, go, d, Scalar(1), gv + off, d);
            if (!gq && !gk) continue;
            // dP = dO V^T, then the softmax adjoint row by row.
            gemm(false, true, seq, seq, hd, Scalar(1), go, d, in_v->data.data() + off, d, Scalar(0),
                 ds.data(), seq);
            for (std::size_t t = 0; t < seq; ++t) {
              const Scalar* pr = p + t * seq;
              Scalar* row = ds.data() + t * seq;
              Scalar dot = 0;
              for (std::size_t j = 0; j <= t; ++j) dot += pr[j] * row[j];
              for (std::size_t j = 0; j <= t; ++j) row[j] = pr[j] * (row[j] - dot) * scale_factor;
              for (std::size_t j = t + 1; j < seq; ++j) row[j] = Scalar(0);
            }
            if (gq) {
              gemm(false, false, seq, hd, seq, Scalar(1), ds.data(), seq, in_k->data.data() + off, d,
                   Scalar(1), gq + off, d);
            }
            if (gk) {
              gemm(true, false, seq, hd, seq, Scalar(1), ds.data(), seq, in_q->data.data() + off, d,
                   Scalar(1), gk + off, d);
            }
          }
        }
      });
}

template <typename Scalar>
BasicTensor<Scalar> rotary(const BasicTensor<Scalar>& x, std::size_t n_heads, double theta) {
  if (x.rank() != 3) throw DimensionError("rotary: expected [B, T, d], got " +
                                          shape_to_string(x.shape()));
  const std::size_t batch = x.dim(0), seq = x.dim(1), d = x.dim(2);
  if (n_heads == 0 || d % n_heads != 0 || (d / n_heads) % 2 != 0) {
    throw DimensionError("rotary: head width must be even and divide " + std::to_string(d));
  }
  const std::size_t hd = d / n_heads;
  const std::size_t half = hd / 2;
  auto table = std::make_shared<std::vector<Scalar>>(seq * half * 2);
  for (std::size_t t = 0; t < seq; ++t) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::pow(theta, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
      const double angle = static_cast<double>(t) * freq;
      (*table)[(t * half + i) * 2] = static_cast<Scalar>(std::cos(angle));
      (*table)[(t * half + i) * 2 + 1] = static_cast<Scalar>(std::sin(angle));
    }
  }
  auto rotate = [=](const Scalar* src, Scalar* dst, Scalar sign, bool accumulate) {
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t t = 0; t < seq; ++t) {
        for (std::size_t h = 0; h < n_heads; ++h) {
          const std::size_t base = (b * seq + t) * d + h * hd;
          for (std::size_t i = 0; i < half; ++i) {
            const Scalar c = (*table)[(t * half + i) * 2];
            const Scalar s = sign * (*table)[(t * half + i) * 2 + 1];
            const Scalar x1 = src[base + i];
            const Scalar x2 = src[base + i + half];
            const Scalar y1 = x1 * c - x2 * s;
            const Scalar y2 = x1 * s + x2 * c;
            if (accumulate) {
              dst[base + i] += y1;
              dst[base + i + half] += y2;
            } else {
              dst[base + i] = y1;
              dst[base + i + half] = y2;
            }
          }
        }
      }
    }
  };
  std::vector<Scalar> out(x.numel());
  rotate(x.data().data(), out.data(), Scalar(1), false);
  return BasicTensor<Scalar>::from_op(x.shape(), std::move(out), {x.node()},
                                      [rotate](TensorNode<Scalar>& self) {
                                        Scalar* g = grad_of(self.inputs[0]);
                                        if (!g) return;
                                        rotate(self.grad.data(), g, Scalar(-1), true);
                                      });
}

template <typename Scalar>
BasicTensor<Scalar> weighted_sum(const BasicTensor<Scalar>& alpha,
                                 const BasicTensor<Scalar>& values) {
  const Shape& vs = values.shape();
  if (alpha.rank() < 1 || vs.size() != alpha.rank() + 1 ||
      !std::equal(alpha.shape().begin(), alpha.shape().end(), vs.begin())) {
    throw DimensionError("weighted_sum: weights " + shape_to_string(alpha.shape()) +
                         " do not index values " + shape_to_string(vs));
  }
  const std::size_t n = alpha.dim(0);
  const std::size_t rows = alpha.numel() / n;
  const std::size_t d = vs.back();
  auto ad = alpha.data();
  auto vd = values.data();
  std::vector<Scalar> out(rows * d, Scalar(0));
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t r = 0; r < rows; ++r) {
      const Scalar w = ad[s * rows + r];
      const Scalar* src = vd.data() + (s * rows + r) * d;
      Scalar* dst = out.data() + r * d;
      for (std::size_t i = 0; i < d; ++i) dst[i] += w * src[i];
    }
  }
  Shape shape(vs.begin() + 1, vs.end());
  return BasicTensor<Scalar>::from_op(
      std::move(shape), std::move(out), {alpha.node(), values.node()},
      [n, rows, d](TensorNode<Scalar>& self) {
        const auto& in_a = self.inputs[0];
        const auto& in_v = self.inputs[1];
        Scalar* ga = grad_of(in_a);
        Scalar* gv = grad_of(in_v);
        for (std::size_t s = 0; s < n; ++s) {
          for (std::size_t r = 0; r < rows; ++r) {
            const Scalar* g = self.grad.data() + r * d;
            const std::size_t off = (s * rows + r) * d;
            if (ga) {
              Scalar dot = 0;
              for (std::size_t i = 0; i < d; ++i) dot += g[i] * in_v->data[off + i];
              ga[s * rows + r] += dot;
            }
            if (gv) {
              const Scalar w = in_a->data[s * rows + r];
              for (std::size_t i = 0; i < d; ++i) gv[off + i] += w * g[i];
            }
          }
        }
      });
}

template <typename Scalar>
std::pair<BasicTensor<Scalar>, BasicTensor<Scalar>> depth_mix(
    std::span<const BasicTensor<Scalar>> sources, const BasicTensor<Scalar>& query,
    const BasicTensor<Scalar>& gain, Scalar eps) {
  if (sources.empty()) throw ContractError("depth_mix: no sources");
  const Shape& shape = sources[0].shape();
  if (shape.empty()) throw DimensionError("depth_mix: sources must have a feature axis");
  for (const auto& s : sources) {
    if (s.shape() != shape) {
      throw DimensionError("depth_mix: source shape " + shape_to_string(s.shape()) +
                           " differs from " + shape_to_string(shape));
    }
  }
  const std::size_t d = shape.back();
  if (query.shape() != Shape{d} || gain.shape() != Shape{d}) {
    throw DimensionError("depth_mix: query and gain must be [" + std::to_string(d) + "]");
  }
  const std::size_t n_src = sources.size();
  const std::size_t rows = shape_numel(shape) / d;
  const Scalar inv_d = Scalar(1) / static_cast<Scalar>(d);

  std::vector<Scalar> w(d);  // gain * query
  for (std::size_t i = 0; i < d; ++i) w[i] = gain[i] * query[i];
  std::vector<const Scalar*> x(n_src);
  for (std::size_t n = 0; n < n_src; ++n) x[n] = sources[n].data().data();

  // Per (n, r): inverse rms and the normalized logit; alpha overwrites logits.
  auto inv_rms = std::make_shared<std::vector<Scalar>>(n_src * rows);
  auto alpha = std::make_shared<std::vector<Scalar>>(n_src * rows);
  std::vector<Scalar> mixed(rows * d, Scalar(0));
  for (std::size_t r = 0; r < rows; ++r) {
    Scalar peak = -std::numeric_limits<Scalar>::infinity();
    for (std::size_t n = 0; n < n_src; ++n) {
      const Scalar* xr = x[n] + r * d;
      Scalar sq = 0, dot = 0;
      for (std::size_t i = 0; i < d; ++i) {
        sq += xr[i] * xr[i];
        dot += xr[i] * w[i];
      }
      const Scalar inv = Scalar(1) / std::sqrt(sq * inv_d + eps);
      (*inv_rms)[n * rows + r] = inv;
      const Scalar logit = dot * inv;
      (*alpha)[n * rows + r] = logit;
      peak = std::max(peak, logit);
    }
    Scalar z = 0;
    for (std::size_t n = 0; n < n_src; ++n) {
      Scalar& a = (*alpha)[n * rows + r];
      a = std::exp(a - peak);
      z += a;
    }
    if (!std::isfinite(z) || !(z > 0)) throw NumericError("depth_mix: non-finite routing logits");
    Scalar* out = mixed.data() + r * d;
    for (std::size_t n = 0; n < n_src; ++n) {
      Scalar& a = (*alpha)[n * rows + r];
      a /= z;
      const Scalar* xr = x[n] + r * d;
      for (std::size_t i = 0; i < d; ++i) out[i] += a * xr[i];
    }
  }

  Shape weight_shape{n_src};
  weight_shape.insert(weight_shape.end(), shape.begin(), shape.end() - 1);
  auto weights = BasicTensor<Scalar>::from_data(std::move(weight_shape), *alpha);

  std::vector<NodePtr<Scalar>> inputs;
  for (const auto& s : sources) inputs.push_back(s.node());
  inputs.push_back(query.node());
  inputs.push_back(gain.node());
  auto output = BasicTensor<Scalar>::from_op(
      shape, std::move(mixed), std::move(inputs),
      [n_src, rows, d, inv_d, inv_rms, alpha](TensorNode<Scalar>& self) {
        const auto& in_q = self.inputs[n_src];
        const auto& in_g = self.inputs[n_src + 1];
        Scalar* gq = grad_of(in_q);
        Scalar* gg = grad_of(in_g);
        std::vector<Scalar> w(d), dw(d, Scalar(0));
        for (std::size_t i = 0; i < d; ++i) w[i] = in_g->data[i] * in_q->data[i];
        std::vector<Scalar> da(n_src), dl(n_src);
        for (std::size_t r = 0; r < rows; ++r) {
          const Scalar* go = self.grad.data() + r * d;
          Scalar mean = 0;
          for (std::size_t n = 0; n < n_src; ++n) {
            const Scalar* xr = self.inputs[n]->data.data() + r * d;
            Scalar s = 0;
            for (std::size_t i = 0; i < d; ++i) s += go[i] * xr[i];
            da[n] = s;
            mean += (*alpha)[n * rows + r] * s;
          }
          for (std::size_t n = 0; n < n_src; ++n) {
            const Scalar a = (*alpha)[n * rows + r];
            dl[n] = a * (da[n] - mean);
            const Scalar* xr = self.inputs[n]->data.data() + r * d;
            const Scalar inv = (*inv_rms)[n * rows + r];
            const Scalar c = dl[n] * inv;
            if (gq || gg) {
              for (std::size_t i = 0; i < d; ++i) dw[i] += c * xr[i];
            }
            if (Scalar* gx = grad_of(self.inputs[n])) {
              Scalar dot = 0;
              for (std::size_t i = 0; i < d; ++i) dot += xr[i] * w[i];
              // d(logit)/dx = inv * w - logit * inv^2 * x / d, with logit = dot * inv.
              const Scalar shrink = c * dot * inv * inv * inv_d;
              Scalar* gr = gx + r * d;
              for (std::size_t i = 0; i < d; ++i) gr[i] += a * go[i] + c * w[i] - shrink * xr[i];
            }
          }
        }
        if (gq) for (std::size_t i = 0; i < d; ++i) gq[i] += dw[i] * in_g->data[i];
        if (gg) for (std::size_t i = 0; i < d; ++i) gg[i] += dw[i] * in_q->data[i];
      });
  return {std::move(output), std::move(weights)};
}

#define DELTAROUTE_INSTANTIATE_OPS(S)                                                          \
  template BasicTensor<S> matmul(const BasicTensor<S>&, const BasicTensor<S>&);                \
  template BasicTensor<S> add(const BasicTensor<S>&, const BasicTensor<S>&);                   \
  template BasicTensor<S> sub(const BasicTensor<S>&, const BasicTensor<S>&);                   \
  template BasicTensor<S> mul(const BasicTensor<S>&, const BasicTensor<S>&);                   \
  template BasicTensor<S> scale(const BasicTensor<S>&, S);                                     \
  template BasicTensor<S> silu(const BasicTensor<S>&);                                         \
  template BasicTensor<S> exp(const BasicTensor<S>&);                                          \
  template BasicTensor<S> log(const BasicTensor<S>&);                                          \
  template BasicTensor<S> softmax(const BasicTensor<S>&, std::size_t);                         \
  template BasicTensor<S> rmsnorm(const BasicTensor<S>&, const BasicTensor<S>&, S);            \
  template BasicTensor<S> stack(std::span<const BasicTensor<S>>);                              \
  template BasicTensor<S> reshape(const BasicTensor<S>&, Shape);                               \
  template BasicTensor<S> transpose(const BasicTensor<S>&);                                    \
  template BasicTensor<S> sum(const BasicTensor<S>&);                                          \
  template BasicTensor<S> mean(const BasicTensor<S>&);                                         \
  template BasicTensor<S> cross_entropy(const BasicTensor<S>&, std::span<const std::int32_t>); \
  template BasicTensor<S> embedding(const BasicTensor<S>&, std::span<const std::int32_t>,      \
                                    const Shape&);                                             \
  template BasicTensor<S> causal_attention(const BasicTensor<S>&, const BasicTensor<S>&,       \
                                           const BasicTensor<S>&, std::size_t);                \
  template BasicTensor<S> rotary(const BasicTensor<S>&, std::size_t, double);                  \
  template BasicTensor<S> weighted_sum(const BasicTensor<S>&, const BasicTensor<S>&);        \
  template std::pair<BasicTensor<S>, BasicTensor<S>> depth_mix(                                \
      std::span<const BasicTensor<S>>, const BasicTensor<S>&, const BasicTensor<S>&, S);

DELTAROUTE_INSTANTIATE_OPS(float)
DELTAROUTE_INSTANTIATE_OPS(double)

#undef DELTAROUTE_INSTANTIATE_OPS

}  // namespace deltaroute
