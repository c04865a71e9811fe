#include "melon/ad/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>

#include "melon/ad/resample.hpp"

namespace melon::ad {

namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// z (+)= op(x) * op(y) with x stored xr x xc and y stored yr x yc, row-major.
template <typename T>
void gemm(const T* x, std::size_t xr, std::size_t xc, bool tx, const T* y, std::size_t yr,
          std::size_t yc, bool ty, T* z, bool accumulate) {
  using Map = Eigen::Map<const RowMat<T>>;
  Map X(x, static_cast<Eigen::Index>(xr), static_cast<Eigen::Index>(xc));
  Map Y(y, static_cast<Eigen::Index>(yr), static_cast<Eigen::Index>(yc));
  const auto m = static_cast<Eigen::Index>(tx ? xc : xr);
  const auto n = static_cast<Eigen::Index>(ty ? yr : yc);
  Eigen::Map<RowMat<T>> Z(z, m, n);
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      Z.noalias() += lhs * rhs;
    } else {
      Z.noalias() = lhs * rhs;
    }
  };
  if (!tx && !ty) run(X, Y);
  else if (tx && !ty) run(X.transpose(), Y);
  else if (!tx && ty) run(X, Y.transpose());
  else run(X.transpose(), Y.transpose());
}

template <typename T>
void accumulate(Node<T>& parent, std::span<const T> g) {
  auto& pg = parent.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) pg[i] += g[i];
}

// ---- broadcasting -------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b;  // per output axis, 0 when broadcast
  enum class Kind { same, a_scalar, b_scalar, b_suffix, a_suffix, general } kind;
  std::size_t na = 0, nb = 0;
};

bool is_suffix(const Shape& small, const Shape& big) {
  std::size_t lead = 0;
  while (lead < small.size() && small[lead] == 1) ++lead;
  const std::size_t len = small.size() - lead;
  if (len > big.size()) return false;
  for (std::size_t i = 0; i < len; ++i) {
    if (small[lead + i] != big[big.size() - len + i]) return false;
  }
  return true;
}

std::vector<std::size_t> aligned_strides(const Shape& s, const Shape& out) {
  std::vector<std::size_t> st(out.size(), 0);
  std::size_t acc = 1;
  for (std::size_t i = 0; i < s.size(); ++i) {
    const std::size_t axis = s.size() - 1 - i;
    const std::size_t oaxis = out.size() - 1 - i;
    st[oaxis] = s[axis] == 1 ? 0 : acc;
    acc *= s[axis];
  }
  return st;
}

Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  Broadcast p;
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const std::size_t db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1) {
      throw ShapeError("cannot broadcast shapes " + shape_str(a) + " and " + shape_str(b));
    }
    p.out[r - 1 - i] = std::max(da, db);
  }
  p.na = shape_numel(a);
  p.nb = shape_numel(b);
  const std::size_t n = shape_numel(p.out);
  if (a == b) p.kind = Broadcast::Kind::same;
  else if (p.nb == 1 && p.na == n) p.kind = Broadcast::Kind::b_scalar;
  else if (p.na == 1 && p.nb == n) p.kind = Broadcast::Kind::a_scalar;
  else if (p.na == n && is_suffix(b, p.out)) p.kind = Broadcast::Kind::b_suffix;
  else if (p.nb == n && is_suffix(a, p.out)) p.kind = Broadcast::Kind::a_suffix;
  else p.kind = Broadcast::Kind::general;
  p.stride_a = aligned_strides(a, p.out);
  p.stride_b = aligned_strides(b, p.out);
  return p;
}

// Calls f(i, ia, ib) for every output element.
template <class F>
void for_each_pair(const Broadcast& p, F&& f) {
  const std::size_t n = shape_numel(p.out);
  switch (p.kind) {
    case Broadcast::Kind::same:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i);
      return;
    case Broadcast::Kind::b_scalar:
      for (std::size_t i = 0; i < n; ++i) f(i, i, 0);
      return;
    case Broadcast::Kind::a_scalar:
      for (std::size_t i = 0; i < n; ++i) f(i, 0, i);
      return;
    case Broadcast::Kind::b_suffix:
      for (std::size_t i = 0; i < n; ++i) f(i, i, i % p.nb);
      return;
    case Broadcast::Kind::a_suffix:
      for (std::size_t i = 0; i < n; ++i) f(i, i % p.na, i);
      return;
    case Broadcast::Kind::general: {
      std::vector<std::size_t> idx(p.out.size(), 0);
      std::size_t ia = 0, ib = 0;
      for (std::size_t i = 0; i < n; ++i) {
        f(i, ia, ib);
        for (std::size_t d = p.out.size(); d-- > 0;) {
          ++idx[d];
          ia += p.stride_a[d];
          ib += p.stride_b[d];
          if (idx[d] < p.out[d]) break;
          ia -= p.stride_a[d] * idx[d];
          ib -= p.stride_b[d] * idx[d];
          idx[d] = 0;
        }
      }
      return;
    }
  }
}

// da(a, b, g) / db(a, b, g) return the contribution to each operand's grad.
template <typename T, class Fwd, class Da, class Db>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd, Da da,
                 Db db) {
  auto plan = std::make_shared<Broadcast>(plan_broadcast(a.shape(), b.shape()));
  std::vector<T> out(shape_numel(plan->out));
  const auto av = a.data();
  const auto bv = b.data();
  for_each_pair(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    out[i] = fwd(av[ia], bv[ib]);
  });
  return make_result<T>(plan->out, std::move(out), name, {a.ptr(), b.ptr()},
                        [plan, da, db](Node<T>& self) {
                          Node<T>& pa = *self.parents[0];
                          Node<T>& pb = *self.parents[1];
                          const auto& g = self.grad;
                          const auto& va = pa.value;
                          const auto& vb = pb.value;
                          if (pa.requires_grad) {
                            auto& ga = pa.ensure_grad();
                            for_each_pair(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                              ga[ia] += da(va[ia], vb[ib], g[i]);
                            });
                          }
                          if (pb.requires_grad) {
                            auto& gb = pb.ensure_grad();
                            for_each_pair(*plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                              gb[ib] += db(va[ia], vb[ib], g[i]);
                            });
                          }
                        });
}

// dfdx(x, y) is the local derivative given input x and output y.
template <typename T, class Fwd, class Dfdx>
Tensor<T> unary(const Tensor<T>& a, const char* name, Fwd fwd, Dfdx dfdx) {
  const auto av = a.data();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = fwd(av[i]);
  return make_result<T>(a.shape(), std::move(out), name, {a.ptr()}, [dfdx](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      gp[i] += self.grad[i] * dfdx(p.value[i], self.value[i]);
    }
  });
}

std::size_t norm_axis(int axis, std::size_t rank, const Shape& s) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(s));
  }
  return static_cast<std::size_t>(a);
}

// Vectorized elementwise maps. Work goes through an aligned scratch chunk so
// the packet/scalar split depends only on the index, never on the address.
template <typename T, class F>
void chunked(const T* x, T* y, std::size_t n, F f) {
  constexpr std::size_t kChunk = 256;
  alignas(64) T buf[kChunk];
  using Arr = Eigen::Array<T, kChunk, 1>;
  Eigen::Map<Arr, Eigen::Aligned64> a(buf);
  for (std::size_t i = 0; i < n; i += kChunk) {
    const std::size_t m = std::min(kChunk, n - i);
    std::copy(x + i, x + i + m, buf);
    std::fill(buf + m, buf + kChunk, T(0));
    a = f(a);
    std::copy(buf, buf + m, y + i);
  }
}

template <typename T>
void exp_inplace(T* x, std::size_t n) {
  chunked(x, x, n, [](const auto& a) { return a.exp().eval(); });
}

template <typename T>
void sigmoid_into(const T* x, T* y, std::size_t n) {
  chunked(x, y, n, [](const auto& a) { return (T(1) / (T(1) + (-a).exp())).eval(); });
}

template <typename T>
T sigmoid_scalar(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

void require_rank(const Shape& s, std::size_t r, const char* op) {
  if (s.size() != r) {
    throw ShapeError(std::string(op) + " expects rank " + std::to_string(r) + ", got shape " +
                     shape_str(s));
  }
}

}  // namespace

// ---- elementwise ---------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T g) { return g; },
      [](T, T, T g) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T g) { return g * y; },
      [](T x, T, T g) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T g) { return g / y; },
      [](T x, T y, T g) { return -g * x / (y * y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary<T>(
      a, "scale", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary<T>(
      a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return scale(a, T(-1));
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  std::vector<T> out(a.data().begin(), a.data().end());
  exp_inplace(out.data(), out.size());
  return make_result<T>(a.shape(), std::move(out), "exp", {a.ptr()}, [](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * self.value[i];
  });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary<T>(
      a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary<T>(
      a, "sqrt", [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> sin(const Tensor<T>& a) {
  return unary<T>(
      a, "sin", [](T x) { return std::sin(x); }, [](T x, T) { return std::cos(x); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  std::vector<T> out(a.numel());
  sigmoid_into(a.data().data(), out.data(), out.size());
  return make_result<T>(a.shape(), std::move(out), "sigmoid", {a.ptr()}, [](Node<T>& self) {
    auto& gp = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i] * self.value[i] * (T(1) - self.value[i]);
  });
}

template <typename T>
Tensor<T> silu(const Tensor<T>& a) {
  const auto av = a.data();
  auto sig = std::make_shared<std::vector<T>>(av.size());
  sigmoid_into(av.data(), sig->data(), av.size());
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * (*sig)[i];
  return make_result<T>(a.shape(), std::move(out), "silu", {a.ptr()}, [sig](Node<T>& self) {
    Node<T>& p = *self.parents[0];
    auto& gp = p.ensure_grad();
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const T s = (*sig)[i];
      gp[i] += self.grad[i] * s * (T(1) + p.value[i] * (T(1) - s));
    }
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// ---- linear algebra and layout -------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a, bool trans_b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool ok_rank = (sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3) ||
                       (sa.size() == 3 && sb.size() == 2);
  if (!ok_rank) {
    throw ShapeError("matmul unsupported ranks " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t batch = sa.size() == 3 ? sa[0] : 1;
  const bool b_batched = sb.size() == 3;
  if (b_batched && sb[0] != batch) {
    throw ShapeError("matmul batch mismatch " + shape_str(sa) + " x " + shape_str(sb));
  }
  const std::size_t ar = sa[sa.size() - 2], ac = sa[sa.size() - 1];
  const std::size_t br = sb[sb.size() - 2], bc = sb[sb.size() - 1];
  const std::size_t m = trans_a ? ac : ar, k = trans_a ? ar : ac;
  const std::size_t kb = trans_b ? bc : br, n = trans_b ? br : bc;
  if (k != kb) {
    throw ShapeError("matmul inner dimension mismatch " + shape_str(sa) +
                     (trans_a ? "^T" : "") + " x " + shape_str(sb) + (trans_b ? "^T" : ""));
  }
  Shape out_shape = sa.size() == 3 ? Shape{batch, m, n} : Shape{m, n};
  std::vector<T> out(batch * m * n);
  const T* av = a.data().data();
  const T* bv = b.data().data();
  for (std::size_t i = 0; i < batch; ++i) {
    gemm(av + i * ar * ac, ar, ac, trans_a, bv + (b_batched ? i * br * bc : 0), br, bc, trans_b,
         out.data() + i * m * n, false);
  }
  return make_result<T>(
      std::move(out_shape), std::move(out), "matmul", {a.ptr(), b.ptr()},
      [=](Node<T>& self) {
        Node<T>& pa = *self.parents[0];
        Node<T>& pb = *self.parents[1];
        const T* g = self.grad.data();
        if (pa.requires_grad) {
          T* ga = pa.ensure_grad().data();
          const T* bvv = pb.value.data();
          for (std::size_t i = 0; i < batch; ++i) {
            const T* gi = g + i * m * n;
            const T* bi = bvv + (b_batched ? i * br * bc : 0);
            T* gai = ga + i * ar * ac;
            if (!trans_a) gemm(gi, m, n, false, bi, br, bc, !trans_b, gai, true);
            else gemm(bi, br, bc, trans_b, gi, m, n, true, gai, true);
          }
        }
        if (pb.requires_grad) {
          T* gb = pb.ensure_grad().data();
          const T* avv = pa.value.data();
          for (std::size_t i = 0; i < batch; ++i) {
            const T* gi = g + i * m * n;
            const T* ai = avv + i * ar * ac;
            T* gbi = gb + (b_batched ? i * br * bc : 0);
            if (!trans_b) gemm(ai, ar, ac, !trans_a, gi, m, n, false, gbi, true);
            else gemm(gi, m, n, true, ai, ar, ac, trans_a, gbi, true);
          }
        }
      });
}

template <typename T>
Tensor<T> matmul_rows(const Tensor<T>& a, const Tensor<T>& w) {
  if (a.rank() != 2 || w.rank() != 2 || a.size(1) != w.size(1)) {
    throw ShapeError("matmul_rows expects [N, in] x [out, in], got " + shape_str(a.shape()) + " x " +
                     shape_str(w.shape()));
  }
  const std::size_t n = a.size(0), in = a.size(1), outs = w.size(0);
  std::vector<T> out(n * outs);
  using Map = Eigen::Map<const RowMat<T>>;
  Map W(w.data().data(), static_cast<Eigen::Index>(outs), static_cast<Eigen::Index>(in));
  Eigen::Matrix<T, Eigen::Dynamic, 1> x(static_cast<Eigen::Index>(in)), y(static_cast<Eigen::Index>(outs));
  for (std::size_t i = 0; i < n; ++i) {
    std::copy_n(a.data().data() + i * in, in, x.data());
    y.noalias() = W * x;
    std::copy_n(y.data(), outs, out.data() + i * outs);
  }
  return make_result<T>(
      Shape{n, outs}, std::move(out), "matmul_rows", {a.ptr(), w.ptr()},
      [=](Node<T>& self) {
        Node<T>& pa = *self.parents[0];
        Node<T>& pw = *self.parents[1];
        const T* g = self.grad.data();
        if (pa.requires_grad) gemm(g, n, outs, false, pw.value.data(), outs, in, false, pa.ensure_grad().data(), true);
        if (pw.requires_grad) gemm(g, n, outs, true, pa.value.data(), n, in, false, pw.ensure_grad().data(), true);
      });
}

template <typename T>
Tensor<T> causal_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           std::span<const std::uint8_t> allowed) {
  if (q.rank() != 3 || k.shape() != q.shape() || v.shape() != q.shape()) {
    throw ShapeError("causal_attention expects equal [H, L, dh] inputs, got " + shape_str(q.shape()) + ", " +
                     shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const std::size_t heads = q.size(0), len = q.size(1), dh = q.size(2);
  if (allowed.size() != len * len) {
    throw ShapeError("causal_attention mask has " + std::to_string(allowed.size()) + " entries, expected " +
                     std::to_string(len * len));
  }
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t j = i + 1; j < len; ++j)
      if (allowed[i * len + j]) throw ShapeError("causal_attention mask allows a key after its query");

  constexpr std::size_t kBlock = 64;
  const std::size_t blocks = (len + kBlock - 1) / kBlock;
  // probs[h * blocks + b] holds the [rows, keys] softmax of row block b, keys = block end.
  auto probs = std::make_shared<std::vector<std::vector<T>>>(heads * blocks);
  std::vector<T> out(heads * len * dh, T(0));
  using CMap = Eigen::Map<const RowMat<T>>;
  using MMap = Eigen::Map<RowMat<T>>;
  const auto ei = [](std::size_t x) { return static_cast<Eigen::Index>(x); };
  for (std::size_t h = 0; h < heads; ++h) {
    const T* qh = q.data().data() + h * len * dh;
    const T* kh = k.data().data() + h * len * dh;
    const T* vh = v.data().data() + h * len * dh;
    for (std::size_t b = 0; b < blocks; ++b) {
      const std::size_t r0 = b * kBlock, r1 = std::min(len, r0 + kBlock), rows = r1 - r0, keys = r1;
      auto& p = (*probs)[h * blocks + b];
      p.assign(rows * keys, T(0));
      MMap P(p.data(), ei(rows), ei(keys));
      P.noalias() = CMap(qh + r0 * dh, ei(rows), ei(dh)) * CMap(kh, ei(keys), ei(dh)).transpose();
      for (std::size_t r = 0; r < rows; ++r) {
        T* x = p.data() + r * keys;
        const std::uint8_t* m = allowed.data() + (r0 + r) * len;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::size_t c = 0; c < keys; ++c)
          if (m[c]) mx = std::max(mx, x[c]);
        if (mx == -std::numeric_limits<T>::infinity()) {
          std::fill(x, x + keys, T(0));
          continue;
        }
        for (std::size_t c = 0; c < keys; ++c) x[c] = m[c] ? x[c] - mx : T(0);
        exp_inplace(x, keys);
        T z = T(0);
        for (std::size_t c = 0; c < keys; ++c) z += (x[c] = m[c] ? x[c] : T(0));
        const T inv = T(1) / z;
        for (std::size_t c = 0; c < keys; ++c) x[c] *= inv;
      }
      MMap(out.data() + (h * len + r0) * dh, ei(rows), ei(dh)).noalias() = P * CMap(vh, ei(keys), ei(dh));
    }
  }
  return make_result<T>(
      q.shape(), std::move(out), "causal_attention", {q.ptr(), k.ptr(), v.ptr()},
      [=](Node<T>& self) {
        Node<T>& pq = *self.parents[0];
        Node<T>& pk = *self.parents[1];
        Node<T>& pv = *self.parents[2];
        T* gq = pq.requires_grad ? pq.ensure_grad().data() : nullptr;
        T* gk = pk.requires_grad ? pk.ensure_grad().data() : nullptr;
        T* gv = pv.requires_grad ? pv.ensure_grad().data() : nullptr;
        std::vector<T> ds;
        for (std::size_t h = 0; h < heads; ++h) {
          const std::size_t off = h * len * dh;
          for (std::size_t b = 0; b < blocks; ++b) {
            const std::size_t r0 = b * kBlock, r1 = std::min(len, r0 + kBlock), rows = r1 - r0, keys = r1;
            CMap P((*probs)[h * blocks + b].data(), ei(rows), ei(keys));
            CMap dO(self.grad.data() + off + r0 * dh, ei(rows), ei(dh));
            if (gv) MMap(gv + off, ei(keys), ei(dh)).noalias() += P.transpose() * dO;
            if (!gq && !gk) continue;
            ds.resize(rows * keys);
            MMap dS(ds.data(), ei(rows), ei(keys));
            dS.noalias() = dO * CMap(pv.value.data() + off, ei(keys), ei(dh)).transpose();
            for (std::size_t r = 0; r < rows; ++r) {
              const T* pr = P.data() + r * keys;
              T* d = ds.data() + r * keys;
              T dot = T(0);
              for (std::size_t c = 0; c < keys; ++c) dot += pr[c] * d[c];
              for (std::size_t c = 0; c < keys; ++c) d[c] = pr[c] * (d[c] - dot);
            }
            if (gq) {
              MMap(gq + off + r0 * dh, ei(rows), ei(dh)).noalias() +=
                  dS * CMap(pk.value.data() + off, ei(keys), ei(dh));
            }
            if (gk) {
              MMap(gk + off, ei(keys), ei(dh)).noalias() +=
                  dS.transpose() * CMap(pq.value.data() + off + r0 * dh, ei(rows), ei(dh));
            }
          }
        }
      });
}

namespace {

// dst[out_index] (+)= src[in_index] for the permutation out axis i = in axis perm[i].
template <typename T>
void permute_into(std::span<const T> src, const Shape& in_shape,
                  const std::vector<std::size_t>& perm, std::span<T> dst, bool accumulate) {
  const std::size_t r = in_shape.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t d = r; d-- > 1;) in_stride[d - 1] = in_stride[d] * in_shape[d];
  Shape out_shape(r);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[perm[i]];
    step[i] = in_stride[perm[i]];
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t src_off = 0;
  const std::size_t n = src.size();
  for (std::size_t o = 0; o < n; ++o) {
    if (accumulate) dst[o] += src[src_off];
    else dst[o] = src[src_off];
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      src_off += step[d];
      if (idx[d] < out_shape[d]) break;
      src_off -= step[d] * idx[d];
      idx[d] = 0;
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  const Shape& s = a.shape();
  if (perm.size() != s.size()) {
    throw ShapeError("permute order length does not match shape " + shape_str(s));
  }
  std::vector<bool> used(perm.size(), false);
  Shape out_shape(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) {
    if (perm[i] >= s.size() || used[perm[i]]) throw ShapeError("invalid permutation");
    used[perm[i]] = true;
    out_shape[i] = s[perm[i]];
  }
  std::vector<T> out(a.numel());
  permute_into<T>(a.data(), s, perm, out, false);
  std::vector<std::size_t> inverse(perm.size());
  for (std::size_t i = 0; i < perm.size(); ++i) inverse[perm[i]] = i;
  return make_result<T>(out_shape, std::move(out), "permute", {a.ptr()},
                        [inverse, out_shape](Node<T>& self) {
                          Node<T>& p = *self.parents[0];
                          permute_into<T>(self.grad, out_shape, inverse, p.ensure_grad(), true);
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw ShapeError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  std::vector<std::size_t> perm(a.rank());
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[perm.size() - 1], perm[perm.size() - 2]);
  return permute(a, perm);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw ShapeError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return make_result<T>(std::move(shape), std::move(out), "reshape", {a.ptr()},
                        [](Node<T>& self) { accumulate<T>(*self.parents[0], self.grad); });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, std::size_t begin, std::size_t end) {
  const Shape& s = a.shape();
  const std::size_t ax = norm_axis(axis, s.size(), s);
  if (begin > end || end > s[ax]) {
    throw ShapeError("slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of range for axis of size " + std::to_string(s[ax]));
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= s[d];
  for (std::size_t d = ax + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t len = end - begin, full = s[ax];
  Shape out_shape = s;
  out_shape[ax] = len;
  std::vector<T> out(outer * len * inner);
  const auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(av.begin() + static_cast<std::ptrdiff_t>((o * full + begin) * inner), len * inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * len * inner));
  }
  return make_result<T>(std::move(out_shape), std::move(out), "slice", {a.ptr()},
                        [=](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t i = 0; i < len * inner; ++i) {
                              g[(o * full + begin) * inner + i] += self.grad[o * len * inner + i];
                            }
                          }
                        });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of zero tensors");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = norm_axis(axis, s0.size(), s0);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= s0[d];
  for (std::size_t d = ax + 1; d < s0.size(); ++d) inner *= s0[d];
  std::vector<std::size_t> lens;
  std::size_t total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == ax || s[d] == s0[d];
    if (!ok) throw ShapeError("concat shape mismatch " + shape_str(s0) + " vs " + shape_str(s));
    lens.push_back(s[ax]);
    total += s[ax];
  }
  Shape out_shape = s0;
  out_shape[ax] = total;
  std::vector<T> out(outer * total * inner);
  std::vector<std::shared_ptr<Node<T>>> parents;
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto pv = parts[k].data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * lens[k] * inner), lens[k] * inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * total + offset) * inner));
    }
    offset += lens[k];
    parents.push_back(parts[k].ptr());
  }
  return make_result<T>(std::move(out_shape), std::move(out), "concat", std::move(parents),
                        [=](Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            Node<T>& p = *self.parents[k];
                            if (p.requires_grad) {
                              auto& g = p.ensure_grad();
                              for (std::size_t o = 0; o < outer; ++o) {
                                for (std::size_t i = 0; i < lens[k] * inner; ++i) {
                                  g[o * lens[k] * inner + i] +=
                                      self.grad[(o * total + off) * inner + i];
                                }
                              }
                            }
                            off += lens[k];
                          }
                        });
}

// ---- reductions ---------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  return make_result<T>({1}, {acc}, "sum", {a.ptr()}, [](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (auto& v : g) v += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, int axis, bool keepdim) {
  const Shape& s = a.shape();
  const std::size_t ax = norm_axis(axis, s.size(), s);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < ax; ++d) outer *= s[d];
  for (std::size_t d = ax + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t n = s[ax];
  Shape out_shape = s;
  if (keepdim) out_shape[ax] = 1;
  else out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  if (out_shape.empty()) out_shape = {1};
  std::vector<T> out(outer * inner, T(0));
  const auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * n + k) * inner + i];
  return make_result<T>(std::move(out_shape), std::move(out), "sum_axis", {a.ptr()},
                        [=](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t o = 0; o < outer; ++o)
                            for (std::size_t k = 0; k < n; ++k)
                              for (std::size_t i = 0; i < inner; ++i)
                                g[(o * n + k) * inner + i] += self.grad[o * inner + i];
                        });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, int axis, bool keepdim) {
  const std::size_t n = a.size(axis);
  return scale(sum(a, axis, keepdim), T(1) / static_cast<T>(n));
}

// ---- softmax ----------------------------------------------------------------

namespace {

template <typename T>
void softmax_backward(Node<T>& self, std::size_t cols) {
  auto& g = self.parents[0]->ensure_grad();
  const std::size_t rows = self.value.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* p = self.value.data() + r * cols;
    const T* gy = self.grad.data() + r * cols;
    T dot = T(0);
    for (std::size_t c = 0; c < cols; ++c) dot += p[c] * gy[c];
    T* gx = g.data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) gx[c] += p[c] * (gy[c] - dot);
  }
}

}  // namespace

template <typename T>
Tensor<T> softmax(const Tensor<T>& a) {
  const std::size_t cols = a.shape().back();
  const std::size_t rows = a.numel() / cols;
  std::vector<T> out(a.numel());
  const auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    T* y = out.data() + r * cols;
    const T mx = *std::max_element(x, x + cols);
    for (std::size_t c = 0; c < cols; ++c) y[c] = x[c] - mx;
    exp_inplace(y, cols);
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c) z += y[c];
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  return make_result<T>(a.shape(), std::move(out), "softmax", {a.ptr()},
                        [cols](Node<T>& self) { softmax_backward(self, cols); });
}

template <typename T>
Tensor<T> masked_softmax(const Tensor<T>& a, std::span<const std::uint8_t> allowed) {
  const Shape& s = a.shape();
  const std::size_t cols = s.back();
  const std::size_t mrows = s.size() >= 2 ? s[s.size() - 2] : 1;
  if (allowed.size() != mrows * cols) {
    throw ShapeError("masked_softmax mask has " + std::to_string(allowed.size()) +
                     " entries, expected " + std::to_string(mrows * cols) + " for shape " +
                     shape_str(s));
  }
  const std::size_t rows = a.numel() / cols;
  std::vector<T> out(a.numel(), T(0));
  const auto av = a.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* x = av.data() + r * cols;
    const std::uint8_t* m = allowed.data() + (r % mrows) * cols;
    T* y = out.data() + r * cols;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c)
      if (m[c]) mx = std::max(mx, x[c]);
    if (mx == -std::numeric_limits<T>::infinity()) continue;
    T z = T(0);
    for (std::size_t c = 0; c < cols; ++c)
      if (m[c]) z += (y[c] = std::exp(x[c] - mx));
    const T inv = T(1) / z;
    for (std::size_t c = 0; c < cols; ++c) y[c] *= inv;
  }
  // Masked entries have p = 0, so the plain softmax rule gives them zero grad.
  return make_result<T>(s, std::move(out), "masked_softmax", {a.ptr()},
                        [cols](Node<T>& self) { softmax_backward(self, cols); });
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& a, double p, std::uint64_t seed) {
  if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
  if (p == 0.0) return a;
  std::mt19937_64 rng(seed);
  const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
  auto mask = std::make_shared<std::vector<T>>(a.numel());
  std::vector<T> out(a.numel());
  const auto av = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    (*mask)[i] = u >= p ? keep_scale : T(0);
    out[i] = av[i] * (*mask)[i];
  }
  return make_result<T>(a.shape(), std::move(out), "dropout", {a.ptr()}, [mask](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * (*mask)[i];
  });
}

// ---- convolution and pooling ---------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  require_rank(x.shape(), 3, "conv2d input");
  require_rank(w.shape(), 4, "conv2d weight");
  const std::size_t ci = x.size(0), h = x.size(1), wd = x.size(2);
  const std::size_t co = w.size(0), kh = w.size(2), kw = w.size(3);
  if (w.size(1) != ci) {
    throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) + ", weight " +
                     shape_str(w.shape()));
  }
  if (bias.defined() && bias.numel() != co) {
    throw ShapeError("conv2d bias " + shape_str(bias.shape()) + " does not match " +
                     std::to_string(co) + " output channels");
  }
  if (stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw) {
    throw ShapeError("conv2d kernel larger than padded input " + shape_str(x.shape()));
  }
  const std::size_t ho = (h + 2 * padding - kh) / stride + 1;
  const std::size_t wo = (wd + 2 * padding - kw) / stride + 1;
  const std::size_t kdim = ci * kh * kw, npix = ho * wo;

  auto col = std::make_shared<std::vector<T>>(kdim * npix, T(0));
  const auto xv = x.data();
  for (std::size_t c = 0; c < ci; ++c)
    for (std::size_t i = 0; i < kh; ++i)
      for (std::size_t j = 0; j < kw; ++j) {
        T* row = col->data() + ((c * kh + i) * kw + j) * npix;
        for (std::size_t oh = 0; oh < ho; ++oh) {
          const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                    static_cast<std::ptrdiff_t>(padding);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
          const T* src = xv.data() + (c * h + static_cast<std::size_t>(ih)) * wd;
          for (std::size_t ow = 0; ow < wo; ++ow) {
            const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                      static_cast<std::ptrdiff_t>(padding);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(wd)) continue;
            row[oh * wo + ow] = src[iw];
          }
        }
      }

  std::vector<T> out(co * npix);
  gemm(w.data().data(), co, kdim, false, col->data(), kdim, npix, false, out.data(), false);
  if (bias.defined()) {
    const auto bv = bias.data();
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t p = 0; p < npix; ++p) out[o * npix + p] += bv[o];
  }
  std::vector<NodePtr<T>> parents{x.ptr(), w.ptr()};
  if (bias.defined()) parents.push_back(bias.ptr());
  return make_result<T>(
      {co, ho, wo}, std::move(out), "conv2d", std::move(parents), [=](Node<T>& self) {
        Node<T>& px = *self.parents[0];
        Node<T>& pw = *self.parents[1];
        const T* g = self.grad.data();
        if (pw.requires_grad) {
          gemm(g, co, npix, false, col->data(), kdim, npix, true, pw.ensure_grad().data(), true);
        }
        if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
          auto& gb = self.parents[2]->ensure_grad();
          for (std::size_t o = 0; o < co; ++o)
            for (std::size_t p = 0; p < npix; ++p) gb[o] += g[o * npix + p];
        }
        if (px.requires_grad) {
          std::vector<T> dcol(kdim * npix);
          gemm(pw.value.data(), co, kdim, true, g, co, npix, false, dcol.data(), false);
          auto& gx = px.ensure_grad();
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t i = 0; i < kh; ++i)
              for (std::size_t j = 0; j < kw; ++j) {
                const T* row = dcol.data() + ((c * kh + i) * kw + j) * npix;
                for (std::size_t oh = 0; oh < ho; ++oh) {
                  const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * stride + i) -
                                            static_cast<std::ptrdiff_t>(padding);
                  if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(h)) continue;
                  T* dst = gx.data() + (c * h + static_cast<std::size_t>(ih)) * wd;
                  for (std::size_t ow = 0; ow < wo; ++ow) {
                    const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * stride + j) -
                                              static_cast<std::ptrdiff_t>(padding);
                    if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(wd)) continue;
                    dst[iw] += row[oh * wo + ow];
                  }
                }
              }
        }
      });
}

template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  require_rank(x.shape(), 3, "max_pool2d");
  const std::size_t c = x.size(0), h = x.size(1), w = x.size(2);
  if (kernel == 0 || stride == 0 || kernel > h || kernel > w) {
    throw ShapeError("max_pool2d kernel does not fit input " + shape_str(x.shape()));
  }
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  auto arg = std::make_shared<std::vector<std::size_t>>(c * ho * wo);
  std::vector<T> out(c * ho * wo);
  const auto xv = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        std::size_t best = (ch * h + oh * stride) * w + ow * stride;
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j) {
            const std::size_t idx = (ch * h + oh * stride + i) * w + ow * stride + j;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (ch * ho + oh) * wo + ow;
        out[o] = xv[best];
        (*arg)[o] = best;
      }
  return make_result<T>({c, ho, wo}, std::move(out), "max_pool2d", {x.ptr()},
                        [arg](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t o = 0; o < arg->size(); ++o) g[(*arg)[o]] += self.grad[o];
                        });
}

template <typename T>
Tensor<T> avg_pool2d(const Tensor<T>& x, std::size_t kernel, std::size_t stride) {
  require_rank(x.shape(), 3, "avg_pool2d");
  const std::size_t c = x.size(0), h = x.size(1), w = x.size(2);
  if (kernel == 0 || stride == 0 || kernel > h || kernel > w) {
    throw ShapeError("avg_pool2d kernel does not fit input " + shape_str(x.shape()));
  }
  const std::size_t ho = (h - kernel) / stride + 1, wo = (w - kernel) / stride + 1;
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  std::vector<T> out(c * ho * wo, T(0));
  const auto xv = x.data();
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oh = 0; oh < ho; ++oh)
      for (std::size_t ow = 0; ow < wo; ++ow) {
        T acc = T(0);
        for (std::size_t i = 0; i < kernel; ++i)
          for (std::size_t j = 0; j < kernel; ++j)
            acc += xv[(ch * h + oh * stride + i) * w + ow * stride + j];
        out[(ch * ho + oh) * wo + ow] = acc * inv;
      }
  return make_result<T>({c, ho, wo}, std::move(out), "avg_pool2d", {x.ptr()},
                        [=](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t oh = 0; oh < ho; ++oh)
                              for (std::size_t ow = 0; ow < wo; ++ow) {
                                const T go = self.grad[(ch * ho + oh) * wo + ow] * inv;
                                for (std::size_t i = 0; i < kernel; ++i)
                                  for (std::size_t j = 0; j < kernel; ++j)
                                    g[(ch * h + oh * stride + i) * w + ow * stride + j] += go;
                              }
                        });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require_rank(x.shape(), 3, "global_avg_pool");
  return mean(reshape(x, {x.size(0), x.size(1) * x.size(2)}), 1);
}

template <typename T>
Tensor<T> resize_bilinear(const Tensor<T>& x, std::size_t out_h, std::size_t out_w) {
  require_rank(x.shape(), 3, "resize_bilinear");
  if (out_h == 0 || out_w == 0) throw ShapeError("resize_bilinear to an empty size");
  const std::size_t c = x.size(0), h = x.size(1), w = x.size(2);
  auto th = std::make_shared<std::vector<LinearTap>>(linear_taps(h, out_h));
  auto tw = std::make_shared<std::vector<LinearTap>>(linear_taps(w, out_w));
  std::vector<T> out(c * out_h * out_w);
  const auto xv = x.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* src = xv.data() + ch * h * w;
    for (std::size_t i = 0; i < out_h; ++i) {
      const auto& a = (*th)[i];
      for (std::size_t j = 0; j < out_w; ++j) {
        const auto& b = (*tw)[j];
        const double top = (1 - b.frac) * src[a.lo * w + b.lo] + b.frac * src[a.lo * w + b.hi];
        const double bot = (1 - b.frac) * src[a.hi * w + b.lo] + b.frac * src[a.hi * w + b.hi];
        out[(ch * out_h + i) * out_w + j] = static_cast<T>((1 - a.frac) * top + a.frac * bot);
      }
    }
  }
  return make_result<T>({c, out_h, out_w}, std::move(out), "resize_bilinear", {x.ptr()},
                        [=](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t ch = 0; ch < c; ++ch) {
                            T* dst = g.data() + ch * h * w;
                            for (std::size_t i = 0; i < out_h; ++i) {
                              const auto& a = (*th)[i];
                              for (std::size_t j = 0; j < out_w; ++j) {
                                const auto& b = (*tw)[j];
                                const T go = self.grad[(ch * out_h + i) * out_w + j];
                                dst[a.lo * w + b.lo] += static_cast<T>((1 - a.frac) * (1 - b.frac)) * go;
                                dst[a.lo * w + b.hi] += static_cast<T>((1 - a.frac) * b.frac) * go;
                                dst[a.hi * w + b.lo] += static_cast<T>(a.frac * (1 - b.frac)) * go;
                                dst[a.hi * w + b.hi] += static_cast<T>(a.frac * b.frac) * go;
                              }
                            }
                          }
                        });
}

// ---- row indexing ---------------------------------------------------------

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, std::span<const std::size_t> idx) {
  require_rank(x.shape(), 2, "gather_rows");
  const std::size_t n = x.size(0), d = x.size(1);
  auto rows = std::make_shared<std::vector<std::size_t>>(idx.begin(), idx.end());
  std::vector<T> out(rows->size() * d);
  const auto xv = x.data();
  for (std::size_t i = 0; i < rows->size(); ++i) {
    if ((*rows)[i] >= n) {
      throw ShapeError("row index " + std::to_string((*rows)[i]) + " out of range for " +
                       shape_str(x.shape()));
    }
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((*rows)[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return make_result<T>({rows->size(), d}, std::move(out), "gather_rows", {x.ptr()},
                        [rows, d](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < rows->size(); ++i)
                            for (std::size_t k = 0; k < d; ++k)
                              g[(*rows)[i] * d + k] += self.grad[i * d + k];
                        });
}

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const std::size_t> ids) {
  return gather_rows(table, ids);
}

template <typename T>
Tensor<T> scatter_rows(const Tensor<T>& src, std::span<const std::size_t> idx, std::size_t rows) {
  require_rank(src.shape(), 2, "scatter_rows");
  if (src.size(0) != idx.size()) {
    throw ShapeError("scatter_rows has " + std::to_string(idx.size()) + " indices for " +
                     shape_str(src.shape()));
  }
  const std::size_t d = src.size(1);
  auto where = std::make_shared<std::vector<std::size_t>>(idx.begin(), idx.end());
  std::vector<T> out(rows * d, T(0));
  const auto sv = src.data();
  for (std::size_t i = 0; i < where->size(); ++i) {
    if ((*where)[i] >= rows) throw ShapeError("scatter_rows index out of range");
    for (std::size_t k = 0; k < d; ++k) out[(*where)[i] * d + k] += sv[i * d + k];
  }
  return make_result<T>({rows, d}, std::move(out), "scatter_rows", {src.ptr()},
                        [where, d](Node<T>& self) {
                          auto& g = self.parents[0]->ensure_grad();
                          for (std::size_t i = 0; i < where->size(); ++i)
                            for (std::size_t k = 0; k < d; ++k)
                              g[i * d + k] += self.grad[(*where)[i] * d + k];
                        });
}

// ---- normalisation and position encoding ---------------------------------

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& gain, double eps) {
  const std::size_t d = x.shape().back();
  if (gain.numel() != d) {
    throw ShapeError("rms_norm gain " + shape_str(gain.shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto inv = std::make_shared<std::vector<T>>(rows);
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  const auto gv = gain.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data() + r * d;
    T ss = T(0);
    for (std::size_t k = 0; k < d; ++k) ss += xr[k] * xr[k];
    const T ri = T(1) / std::sqrt(ss / static_cast<T>(d) + static_cast<T>(eps));
    (*inv)[r] = ri;
    for (std::size_t k = 0; k < d; ++k) out[r * d + k] = xr[k] * ri * gv[k];
  }
  return make_result<T>(x.shape(), std::move(out), "rms_norm", {x.ptr(), gain.ptr()},
                        [inv, d, rows](Node<T>& self) {
                          Node<T>& px = *self.parents[0];
                          Node<T>& pg = *self.parents[1];
                          const auto& xv = px.value;
                          const auto& gv = pg.value;
                          const auto& gy = self.grad;
                          if (pg.requires_grad) {
                            auto& gg = pg.ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t k = 0; k < d; ++k)
                                gg[k] += gy[r * d + k] * xv[r * d + k] * (*inv)[r];
                          }
                          if (px.requires_grad) {
                            auto& gx = px.ensure_grad();
                            for (std::size_t r = 0; r < rows; ++r) {
                              const T ri = (*inv)[r];
                              T dot = T(0);
                              for (std::size_t k = 0; k < d; ++k)
                                dot += gy[r * d + k] * gv[k] * xv[r * d + k] * ri;
                              dot /= static_cast<T>(d);
                              for (std::size_t k = 0; k < d; ++k) {
                                const T u = xv[r * d + k] * ri;
                                gx[r * d + k] += ri * (gy[r * d + k] * gv[k] - u * dot);
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, std::size_t groups, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps) {
  require_rank(x.shape(), 3, "group_norm");
  const std::size_t c = x.size(0), hw = x.size(1) * x.size(2);
  if (groups == 0 || c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(c) + " channels not divisible into " +
                     std::to_string(groups) + " groups");
  }
  if (gain.numel() != c || bias.numel() != c) {
    throw ShapeError("group_norm affine parameters must have " + std::to_string(c) + " entries");
  }
  const std::size_t cpg = c / groups, gsize = cpg * hw;
  auto xhat = std::make_shared<std::vector<T>>(x.numel());
  auto inv_std = std::make_shared<std::vector<T>>(groups);
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  for (std::size_t g = 0; g < groups; ++g) {
    const T* xs = xv.data() + g * gsize;
    T mu = T(0);
    for (std::size_t i = 0; i < gsize; ++i) mu += xs[i];
    mu /= static_cast<T>(gsize);
    T var = T(0);
    for (std::size_t i = 0; i < gsize; ++i) var += (xs[i] - mu) * (xs[i] - mu);
    var /= static_cast<T>(gsize);
    const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
    (*inv_std)[g] = is;
    for (std::size_t i = 0; i < gsize; ++i) {
      const std::size_t flat = g * gsize + i;
      const std::size_t ch = flat / hw;
      (*xhat)[flat] = (xs[i] - mu) * is;
      out[flat] = (*xhat)[flat] * gv[ch] + bv[ch];
    }
  }
  return make_result<T>(
      x.shape(), std::move(out), "group_norm", {x.ptr(), gain.ptr(), bias.ptr()},
      [=](Node<T>& self) {
        Node<T>& px = *self.parents[0];
        Node<T>& pg = *self.parents[1];
        Node<T>& pb = *self.parents[2];
        const auto& gy = self.grad;
        if (pg.requires_grad || pb.requires_grad) {
          std::vector<T> dg(c, T(0)), db(c, T(0));
          for (std::size_t i = 0; i < gy.size(); ++i) {
            dg[i / hw] += gy[i] * (*xhat)[i];
            db[i / hw] += gy[i];
          }
          if (pg.requires_grad) accumulate<T>(pg, dg);
          if (pb.requires_grad) accumulate<T>(pb, db);
        }
        if (px.requires_grad) {
          auto& gx = px.ensure_grad();
          for (std::size_t g = 0; g < groups; ++g) {
            T m1 = T(0), m2 = T(0);
            for (std::size_t i = 0; i < gsize; ++i) {
              const std::size_t flat = g * gsize + i;
              const T dxh = gy[flat] * pg.value[flat / hw];
              m1 += dxh;
              m2 += dxh * (*xhat)[flat];
            }
            m1 /= static_cast<T>(gsize);
            m2 /= static_cast<T>(gsize);
            for (std::size_t i = 0; i < gsize; ++i) {
              const std::size_t flat = g * gsize + i;
              const T dxh = gy[flat] * pg.value[flat / hw];
              gx[flat] += (*inv_std)[g] * (dxh - m1 - (*xhat)[flat] * m2);
            }
          }
        }
      });
}

void rotate_pairs(std::span<double> v, std::size_t position, double base) {
  const std::size_t d = v.size();
  for (std::size_t j = 0; j + 1 < d; j += 2) {
    const double theta =
        static_cast<double>(position) * std::pow(base, -static_cast<double>(j) / static_cast<double>(d));
    const double c = std::cos(theta), s = std::sin(theta);
    const double a = v[j], b = v[j + 1];
    v[j] = a * c - b * s;
    v[j + 1] = a * s + b * c;
  }
}

template <typename T>
Tensor<T> rotary(const Tensor<T>& x, double base) {
  const Shape& s = x.shape();
  if (s.size() != 2 && s.size() != 3) {
    throw ShapeError("rotary expects [L, d] or [H, L, d], got " + shape_str(s));
  }
  const std::size_t d = s.back(), len = s[s.size() - 2];
  if (d % 2 != 0) throw ShapeError("rotary needs an even feature size, got " + shape_str(s));
  const std::size_t half = d / 2;
  auto cs = std::make_shared<std::vector<T>>(len * half);
  auto sn = std::make_shared<std::vector<T>>(len * half);
  for (std::size_t p = 0; p < len; ++p)
    for (std::size_t j = 0; j < half; ++j) {
      const double theta = static_cast<double>(p) *
                           std::pow(base, -static_cast<double>(2 * j) / static_cast<double>(d));
      (*cs)[p * half + j] = static_cast<T>(std::cos(theta));
      (*sn)[p * half + j] = static_cast<T>(std::sin(theta));
    }
  const std::size_t rows = x.numel() / d;
  std::vector<T> out(x.numel());
  const auto xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const std::size_t p = r % len;
    for (std::size_t j = 0; j < half; ++j) {
      const T c = (*cs)[p * half + j], sv = (*sn)[p * half + j];
      const T a = xv[r * d + 2 * j], b = xv[r * d + 2 * j + 1];
      out[r * d + 2 * j] = a * c - b * sv;
      out[r * d + 2 * j + 1] = a * sv + b * c;
    }
  }
  return make_result<T>(s, std::move(out), "rotary", {x.ptr()}, [=](Node<T>& self) {
    auto& g = self.parents[0]->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const std::size_t p = r % len;
      for (std::size_t j = 0; j < half; ++j) {
        const T c = (*cs)[p * half + j], sv = (*sn)[p * half + j];
        const T ga = self.grad[r * d + 2 * j], gb = self.grad[r * d + 2 * j + 1];
        g[r * d + 2 * j] += ga * c + gb * sv;
        g[r * d + 2 * j + 1] += -ga * sv + gb * c;
      }
    }
  });
}

// ---- losses ---------------------------------------------------------------

namespace {

template <typename T>
void check_loss_args(std::size_t n, std::span<const T> target, std::span<const T> weight,
                     const char* op) {
  if (target.size() != n || (!weight.empty() && weight.size() != n)) {
    throw ShapeError(std::string(op) + ": target/weight length does not match " +
                     std::to_string(n) + " predictions");
  }
}

}  // namespace

template <typename T>
Tensor<T> binary_cross_entropy(const Tensor<T>& p, std::span<const T> target,
                               std::span<const T> weight, Reduction red) {
  const std::size_t n = p.numel();
  check_loss_args(n, target, weight, "binary_cross_entropy");
  const T lo = std::numeric_limits<T>::epsilon();
  auto t = std::make_shared<std::vector<T>>(target.begin(), target.end());
  auto w = std::make_shared<std::vector<T>>(n, T(1));
  if (!weight.empty()) w->assign(weight.begin(), weight.end());
  const T norm = red == Reduction::mean ? T(1) / static_cast<T>(n) : T(1);
  T acc = T(0);
  const auto pv = p.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T q = std::clamp(pv[i], lo, T(1) - lo);
    acc -= (*w)[i] * ((*t)[i] * std::log(q) + (T(1) - (*t)[i]) * std::log(T(1) - q));
  }
  return make_result<T>({1}, {acc * norm}, "bce", {p.ptr()}, [=](Node<T>& self) {
    Node<T>& pp = *self.parents[0];
    auto& g = pp.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      const T q = std::clamp(pp.value[i], lo, T(1) - lo);
      g[i] += self.grad[0] * norm * (*w)[i] * (-(*t)[i] / q + (T(1) - (*t)[i]) / (T(1) - q));
    }
  });
}

template <typename T>
Tensor<T> binary_cross_entropy_with_logits(const Tensor<T>& logits, std::span<const T> target,
                                           std::span<const T> weight, Reduction red) {
  const std::size_t n = logits.numel();
  check_loss_args(n, target, weight, "binary_cross_entropy_with_logits");
  auto t = std::make_shared<std::vector<T>>(target.begin(), target.end());
  auto w = std::make_shared<std::vector<T>>(n, T(1));
  if (!weight.empty()) w->assign(weight.begin(), weight.end());
  const T norm = red == Reduction::mean ? T(1) / static_cast<T>(n) : T(1);
  T acc = T(0);
  const auto zv = logits.data();
  for (std::size_t i = 0; i < n; ++i) {
    const T z = zv[i];
    acc += (*w)[i] * (std::max(z, T(0)) - z * (*t)[i] + std::log1p(std::exp(-std::abs(z))));
  }
  return make_result<T>({1}, {acc * norm}, "bce_logits", {logits.ptr()}, [=](Node<T>& self) {
    Node<T>& pz = *self.parents[0];
    auto& g = pz.ensure_grad();
    for (std::size_t i = 0; i < n; ++i) {
      g[i] += self.grad[0] * norm * (*w)[i] * (sigmoid_scalar(pz.value[i]) - (*t)[i]);
    }
  });
}

template <typename T>
Tensor<T> mse(const Tensor<T>& pred, std::span<const T> target, Reduction red) {
  const std::size_t n = pred.numel();
  check_loss_args(n, target, std::span<const T>{}, "mse");
  auto t = std::make_shared<std::vector<T>>(target.begin(), target.end());
  const T norm = red == Reduction::mean ? T(1) / static_cast<T>(n) : T(1);
  T acc = T(0);
  const auto pv = pred.data();
  for (std::size_t i = 0; i < n; ++i) acc += (pv[i] - (*t)[i]) * (pv[i] - (*t)[i]);
  return make_result<T>({1}, {acc * norm}, "mse", {pred.ptr()}, [=](Node<T>& self) {
    Node<T>& pp = *self.parents[0];
    auto& g = pp.ensure_grad();
    for (std::size_t i = 0; i < n; ++i)
      g[i] += self.grad[0] * norm * T(2) * (pp.value[i] - (*t)[i]);
  });
}

// ---- explicit instantiation ----------------------------------------------

#define MELON_INSTANTIATE_OPS(T)                                                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                 \
  template Tensor<T> scale(const Tensor<T>&, T);                                              \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                         \
  template Tensor<T> neg(const Tensor<T>&);                                                   \
  template Tensor<T> exp(const Tensor<T>&);                                                   \
  template Tensor<T> log(const Tensor<T>&);                                                   \
  template Tensor<T> sqrt(const Tensor<T>&);                                                  \
  template Tensor<T> sin(const Tensor<T>&);                                                   \
  template Tensor<T> sigmoid(const Tensor<T>&);                                               \
  template Tensor<T> silu(const Tensor<T>&);                                                  \
  template Tensor<T> relu(const Tensor<T>&);                                                  \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&, bool, bool);                  \
  template Tensor<T> matmul_rows(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> causal_attention(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,     \
                                      std::span<const std::uint8_t>);                         \
  template Tensor<T> transpose(const Tensor<T>&);                                             \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);              \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                        \
  template Tensor<T> slice(const Tensor<T>&, int, std::size_t, std::size_t);                  \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                              \
  template Tensor<T> sum(const Tensor<T>&);                                                   \
  template Tensor<T> mean(const Tensor<T>&);                                                  \
  template Tensor<T> sum(const Tensor<T>&, int, bool);                                        \
  template Tensor<T> mean(const Tensor<T>&, int, bool);                                       \
  template Tensor<T> softmax(const Tensor<T>&);                                               \
  template Tensor<T> masked_softmax(const Tensor<T>&, std::span<const std::uint8_t>);         \
  template Tensor<T> dropout(const Tensor<T>&, double, std::uint64_t);                        \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t, \
                            std::size_t);                                                     \
  template Tensor<T> max_pool2d(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> avg_pool2d(const Tensor<T>&, std::size_t, std::size_t);                  \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                       \
  template Tensor<T> resize_bilinear(const Tensor<T>&, std::size_t, std::size_t);             \
  template Tensor<T> embedding(const Tensor<T>&, std::span<const std::size_t>);               \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::size_t>);             \
  template Tensor<T> scatter_rows(const Tensor<T>&, std::span<const std::size_t>, std::size_t); \
  template Tensor<T> rms_norm(const Tensor<T>&, const Tensor<T>&, double);                    \
  template Tensor<T> group_norm(const Tensor<T>&, std::size_t, const Tensor<T>&,              \
                                const Tensor<T>&, double);                                    \
  template Tensor<T> rotary(const Tensor<T>&, double);                                        \
  template Tensor<T> binary_cross_entropy(const Tensor<T>&, std::span<const T>,               \
                                          std::span<const T>, Reduction);                     \
  template Tensor<T> binary_cross_entropy_with_logits(const Tensor<T>&, std::span<const T>,   \
                                                      std::span<const T>, Reduction);         \
  template Tensor<T> mse(const Tensor<T>&, std::span<const T>, Reduction);

MELON_INSTANTIATE_OPS(float)
MELON_INSTANTIATE_OPS(double)

}  // namespace melon::ad
