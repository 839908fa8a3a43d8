// Minimal reverse-mode automatic differentiation over Tensor. Define-by-run:
// each op computes its value eagerly and records a backward closure. The
// graph is a DAG of shared_ptr nodes; calling backward() on a scalar root
// accumulates gradients into every reachable node that requires them.
//
// Everything is double precision. Op coverage is exactly what the encoders,
// decoders, projection heads and contrastive losses need.
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "solarchip/tensor.hpp"

namespace solarchip {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward_fn;
  bool requires_grad = false;

  Tensor& ensure_grad() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

using Var = std::shared_ptr<Node>;

inline Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  return n;
}

inline Var parameter(Tensor t) {
  auto n = std::make_shared<Node>();
  n->value = std::move(t);
  n->requires_grad = true;
  return n;
}

inline Var make_node(Tensor value, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  return n;
}

// Runs backward closures in reverse topological order from a scalar root.
inline void backward(const Var& root) {
  if (root->value.numel() != 1)
    throw std::invalid_argument("backward: root must be scalar");
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  root->ensure_grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward_fn) (*it)->backward_fn();
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value))
    throw std::invalid_argument("add: shape mismatch " + a->value.shape_str() + " vs " +
                                b->value.shape_str());
  Tensor out = a->value;
  const double* bv = b->value.data();
  double* ov = out.data();
  for (int i = 0; i < out.numel(); ++i) ov[i] += bv[i];
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get(), *pb = b.get();
    n->backward_fn = [self, pa, pb] {
      const double* g = self->grad.data();
      const int m = self->value.numel();
      if (pa->requires_grad) {
        double* da = pa->ensure_grad().data();
        for (int i = 0; i < m; ++i) da[i] += g[i];
      }
      if (pb->requires_grad) {
        double* db = pb->ensure_grad().data();
        for (int i = 0; i < m; ++i) db[i] += g[i];
      }
    };
  }
  return n;
}

inline Var sub(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("sub: shape mismatch");
  Tensor out = a->value;
  const double* bv = b->value.data();
  double* ov = out.data();
  for (int i = 0; i < out.numel(); ++i) ov[i] -= bv[i];
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get(), *pb = b.get();
    n->backward_fn = [self, pa, pb] {
      const double* g = self->grad.data();
      const int m = self->value.numel();
      if (pa->requires_grad) {
        double* da = pa->ensure_grad().data();
        for (int i = 0; i < m; ++i) da[i] += g[i];
      }
      if (pb->requires_grad) {
        double* db = pb->ensure_grad().data();
        for (int i = 0; i < m; ++i) db[i] -= g[i];
      }
    };
  }
  return n;
}

inline Var mul(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("mul: shape mismatch");
  Tensor out = a->value;
  const double* bv = b->value.data();
  double* ov = out.data();
  for (int i = 0; i < out.numel(); ++i) ov[i] *= bv[i];
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get(), *pb = b.get();
    n->backward_fn = [self, pa, pb] {
      const double* g = self->grad.data();
      const int m = self->value.numel();
      if (pa->requires_grad) {
        double* da = pa->ensure_grad().data();
        const double* bv2 = pb->value.data();
        for (int i = 0; i < m; ++i) da[i] += g[i] * bv2[i];
      }
      if (pb->requires_grad) {
        double* db = pb->ensure_grad().data();
        const double* av2 = pa->value.data();
        for (int i = 0; i < m; ++i) db[i] += g[i] * av2[i];
      }
    };
  }
  return n;
}

inline Var scale(const Var& a, double c) {
  Tensor out = a->value;
  double* ov = out.data();
  for (int i = 0; i < out.numel(); ++i) ov[i] *= c;
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get();
    n->backward_fn = [self, pa, c] {
      const double* g = self->grad.data();
      double* da = pa->ensure_grad().data();
      for (int i = 0; i < self->value.numel(); ++i) da[i] += c * g[i];
    };
  }
  return n;
}

inline Var exp_elem(const Var& a) {
  Tensor out = a->value;
  double* ov = out.data();
  for (int i = 0; i < out.numel(); ++i) ov[i] = std::exp(ov[i]);
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get();
    n->backward_fn = [self, pa] {
      const double* g = self->grad.data();
      const double* y = self->value.data();
      double* da = pa->ensure_grad().data();
      for (int i = 0; i < self->value.numel(); ++i) da[i] += g[i] * y[i];
    };
  }
  return n;
}

// y = s * x with s a 1-element variable (learnable scale).
inline Var scale_by(const Var& x, const Var& s) {
  if (s->value.numel() != 1) throw std::invalid_argument("scale_by: scale must be scalar");
  const double sv = s->value[0];
  Tensor out = x->value;
  double* ov = out.data();
  for (int i = 0; i < out.numel(); ++i) ov[i] *= sv;
  auto n = make_node(std::move(out), {x, s});
  if (n->requires_grad) {
    Node *self = n.get(), *px = x.get(), *ps = s.get();
    n->backward_fn = [self, px, ps, sv] {
      const double* g = self->grad.data();
      const int m = self->value.numel();
      if (px->requires_grad) {
        double* dx = px->ensure_grad().data();
        for (int i = 0; i < m; ++i) dx[i] += sv * g[i];
      }
      if (ps->requires_grad) {
        const double* xv = px->value.data();
        double acc = 0.0;
        for (int i = 0; i < m; ++i) acc += g[i] * xv[i];
        ps->ensure_grad()[0] += acc;
      }
    };
  }
  return n;
}

inline Var gelu(const Var& a) {
  Tensor out = a->value;
  double* ov = out.data();
  const double* xv = a->value.data();
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (int i = 0; i < out.numel(); ++i)
    ov[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  auto n = make_node(std::move(out), {a});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get();
    n->backward_fn = [self, pa] {
      constexpr double kInvSqrt2pi = 0.39894228040143267794;
      constexpr double kInvSqrt2l = 0.70710678118654752440;
      const double* g = self->grad.data();
      const double* x = pa->value.data();
      double* da = pa->ensure_grad().data();
      for (int i = 0; i < self->value.numel(); ++i) {
        const double cdf = 0.5 * (1.0 + std::erf(x[i] * kInvSqrt2l));
        const double pdf = kInvSqrt2pi * std::exp(-0.5 * x[i] * x[i]);
        da[i] += g[i] * (cdf + x[i] * pdf);
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

inline Var sum_all(const Var& a) {
  double s = 0.0;
  for (int i = 0; i < a->value.numel(); ++i) s += a->value[i];
  auto n = make_node(Tensor::scalar(s), {a});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get();
    n->backward_fn = [self, pa] {
      const double g = self->grad[0];
      double* da = pa->ensure_grad().data();
      for (int i = 0; i < pa->value.numel(); ++i) da[i] += g;
    };
  }
  return n;
}

inline Var mean_all(const Var& a) {
  const int m = a->value.numel();
  double s = 0.0;
  for (int i = 0; i < m; ++i) s += a->value[i];
  auto n = make_node(Tensor::scalar(s / m), {a});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get();
    n->backward_fn = [self, pa, m] {
      const double g = self->grad[0] / m;
      double* da = pa->ensure_grad().data();
      for (int i = 0; i < m; ++i) da[i] += g;
    };
  }
  return n;
}

// Sum of squared differences over every element.
inline Var sse(const Var& a, const Var& b) {
  if (!a->value.same_shape(b->value)) throw std::invalid_argument("sse: shape mismatch");
  double s = 0.0;
  const double* av = a->value.data();
  const double* bv = b->value.data();
  const int m = a->value.numel();
  for (int i = 0; i < m; ++i) {
    const double d = av[i] - bv[i];
    s += d * d;
  }
  auto n = make_node(Tensor::scalar(s), {a, b});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get(), *pb = b.get();
    n->backward_fn = [self, pa, pb, m] {
      const double g = self->grad[0];
      const double* av2 = pa->value.data();
      const double* bv2 = pb->value.data();
      if (pa->requires_grad) {
        double* da = pa->ensure_grad().data();
        for (int i = 0; i < m; ++i) da[i] += 2.0 * g * (av2[i] - bv2[i]);
      }
      if (pb->requires_grad) {
        double* db = pb->ensure_grad().data();
        for (int i = 0; i < m; ++i) db[i] -= 2.0 * g * (av2[i] - bv2[i]);
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

// x[..., Din] * w[Din, Dout] + b[Dout]; leading dims are flattened.
inline Var linear(const Var& x, const Var& w, const Var& b) {
  const int din = w->value.dim(0);
  const int dout = w->value.dim(1);
  if (x->value.shape().empty() || x->value.shape().back() != din)
    throw std::invalid_argument("linear: input feature dim mismatch");
  const int rows = x->value.numel() / din;
  std::vector<int> out_shape = x->value.shape();
  out_shape.back() = dout;
  Tensor out(out_shape);
  gemm(false, false, rows, dout, din, x->value.data(), w->value.data(), out.data(), false);
  if (b) {
    if (b->value.numel() != dout) throw std::invalid_argument("linear: bias dim mismatch");
    double* ov = out.data();
    const double* bv = b->value.data();
    for (int r = 0; r < rows; ++r)
      for (int j = 0; j < dout; ++j) ov[static_cast<std::size_t>(r) * dout + j] += bv[j];
  }
  std::vector<Var> parents = {x, w};
  if (b) parents.push_back(b);
  auto n = make_node(std::move(out), std::move(parents));
  if (n->requires_grad) {
    Node *self = n.get(), *px = x.get(), *pw = w.get();
    Node* pb = b ? b.get() : nullptr;
    n->backward_fn = [self, px, pw, pb, rows, din, dout] {
      const double* g = self->grad.data();
      if (px->requires_grad)
        gemm(false, true, rows, din, dout, g, pw->value.data(), px->ensure_grad().data(), true);
      if (pw->requires_grad)
        gemm(true, false, din, dout, rows, px->value.data(), g, pw->ensure_grad().data(), true);
      if (pb && pb->requires_grad) {
        double* db = pb->ensure_grad().data();
        for (int r = 0; r < rows; ++r)
          for (int j = 0; j < dout; ++j) db[j] += g[static_cast<std::size_t>(r) * dout + j];
      }
    };
  }
  return n;
}

// a[M, D] * b[N, D]^T -> [M, N].
inline Var matmul_nt(const Var& a, const Var& b) {
  if (a->value.ndim() != 2 || b->value.ndim() != 2 || a->value.dim(1) != b->value.dim(1))
    throw std::invalid_argument("matmul_nt: expects [M,D] and [N,D]");
  const int m = a->value.dim(0), nn = b->value.dim(0), d = a->value.dim(1);
  Tensor out({m, nn});
  gemm(false, true, m, nn, d, a->value.data(), b->value.data(), out.data(), false);
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get(), *pb = b.get();
    n->backward_fn = [self, pa, pb, m, nn, d] {
      const double* g = self->grad.data();
      if (pa->requires_grad)
        gemm(false, false, m, d, nn, g, pb->value.data(), pa->ensure_grad().data(), true);
      if (pb->requires_grad)
        gemm(true, false, nn, d, m, g, pa->value.data(), pb->ensure_grad().data(), true);
    };
  }
  return n;
}

// Batched matmul. a[N,M,K]; b[N,K,P] (or [N,P,K] with trans_b).
inline Var bmm(const Var& a, const Var& b, bool trans_b = false) {
  if (a->value.ndim() != 3 || b->value.ndim() != 3 || a->value.dim(0) != b->value.dim(0))
    throw std::invalid_argument("bmm: expects matching 3D batches");
  const int nb = a->value.dim(0), m = a->value.dim(1), k = a->value.dim(2);
  const int p = trans_b ? b->value.dim(1) : b->value.dim(2);
  if ((trans_b ? b->value.dim(2) : b->value.dim(1)) != k)
    throw std::invalid_argument("bmm: inner dim mismatch");
  Tensor out({nb, m, p});
  for (int s = 0; s < nb; ++s)
    gemm(false, trans_b, m, p, k, a->value.data() + static_cast<std::size_t>(s) * m * k,
         b->value.data() + static_cast<std::size_t>(s) * k * p, out.data() + static_cast<std::size_t>(s) * m * p,
         false);
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get(), *pb = b.get();
    n->backward_fn = [self, pa, pb, nb, m, k, p, trans_b] {
      for (int s = 0; s < nb; ++s) {
        const double* g = self->grad.data() + static_cast<std::size_t>(s) * m * p;
        const double* av = pa->value.data() + static_cast<std::size_t>(s) * m * k;
        const double* bv = pb->value.data() + static_cast<std::size_t>(s) * k * p;
        if (pa->requires_grad) {
          double* da = pa->ensure_grad().data() + static_cast<std::size_t>(s) * m * k;
          // no trans: dA = G * B^T; trans: dA = G * B
          gemm(false, !trans_b, m, k, p, g, bv, da, true);
        }
        if (pb->requires_grad) {
          double* db = pb->ensure_grad().data() + static_cast<std::size_t>(s) * k * p;
          if (!trans_b)
            gemm(true, false, k, p, m, av, g, db, true);  // dB = A^T G
          else
            gemm(true, false, p, k, m, g, av, db, true);  // dB = G^T A
        }
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// convolutions (im2col + GEMM)
// ---------------------------------------------------------------------------

namespace detail {

inline void im2col(const double* x, int c, int h, int w, int k, int s, int p, int oh, int ow,
                   double* col) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* dst = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s - p + ky;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s - p + kx;
            dst[static_cast<std::size_t>(oy) * ow + ox] =
                (iy >= 0 && iy < h && ix >= 0 && ix < w)
                    ? x[(static_cast<std::size_t>(ci) * h + iy) * w + ix]
                    : 0.0;
          }
        }
      }
}

inline void col2im_add(const double* col, int c, int h, int w, int k, int s, int p, int oh,
                       int ow, double* x) {
  for (int ci = 0; ci < c; ++ci)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const double* src = col + (static_cast<std::size_t>(ci) * k * k + ky * k + kx) * oh * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * s - p + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * s - p + kx;
            if (ix < 0 || ix >= w) continue;
            x[(static_cast<std::size_t>(ci) * h + iy) * w + ix] +=
                src[static_cast<std::size_t>(oy) * ow + ox];
          }
        }
      }
}

}  // namespace detail

// x[B,C,H,W], w[O,C,k,k], b[O].
inline Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[1])
    throw std::invalid_argument("conv2d: bad shapes");
  const int bs = xs[0], c = xs[1], h = xs[2], wd = xs[3];
  const int oc = ws[0], k = ws[2];
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (wd + 2 * pad - k) / stride + 1;
  const int ckk = c * k * k;
  Tensor out({bs, oc, oh, ow});
  std::vector<double> col(static_cast<std::size_t>(ckk) * oh * ow);
  for (int s = 0; s < bs; ++s) {
    detail::im2col(x->value.data() + static_cast<std::size_t>(s) * c * h * wd, c, h, wd, k,
                   stride, pad, oh, ow, col.data());
    double* ob = out.data() + static_cast<std::size_t>(s) * oc * oh * ow;
    gemm(false, false, oc, oh * ow, ckk, w->value.data(), col.data(), ob, false);
    const double* bv = b->value.data();
    for (int o = 0; o < oc; ++o) {
      double* row = ob + static_cast<std::size_t>(o) * oh * ow;
      for (int i = 0; i < oh * ow; ++i) row[i] += bv[o];
    }
  }
  auto n = make_node(std::move(out), {x, w, b});
  if (n->requires_grad) {
    Node *self = n.get(), *px = x.get(), *pw = w.get(), *pb = b.get();
    n->backward_fn = [self, px, pw, pb, bs, c, h, wd, oc, k, stride, pad, oh, ow, ckk] {
      std::vector<double> col(static_cast<std::size_t>(ckk) * oh * ow);
      std::vector<double> dcol(static_cast<std::size_t>(ckk) * oh * ow);
      for (int s = 0; s < bs; ++s) {
        const double* g = self->grad.data() + static_cast<std::size_t>(s) * oc * oh * ow;
        if (pw->requires_grad) {
          detail::im2col(px->value.data() + static_cast<std::size_t>(s) * c * h * wd, c, h, wd,
                         k, stride, pad, oh, ow, col.data());
          gemm(false, true, oc, ckk, oh * ow, g, col.data(), pw->ensure_grad().data(), true);
        }
        if (pb->requires_grad) {
          double* db = pb->ensure_grad().data();
          for (int o = 0; o < oc; ++o) {
            const double* row = g + static_cast<std::size_t>(o) * oh * ow;
            double acc = 0.0;
            for (int i = 0; i < oh * ow; ++i) acc += row[i];
            db[o] += acc;
          }
        }
        if (px->requires_grad) {
          gemm(true, false, ckk, oh * ow, oc, pw->value.data(), g, dcol.data(), false);
          detail::col2im_add(dcol.data(), c, h, wd, k, stride, pad, oh, ow,
                             px->ensure_grad().data() + static_cast<std::size_t>(s) * c * h * wd);
        }
      }
    };
  }
  return n;
}

// Transposed convolution. x[B,Cin,h,w], w[Cin,Cout,k,k], b[Cout];
// output spatial size (h-1)*stride - 2*pad + k.
inline Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const auto& xs = x->value.shape();
  const auto& ws = w->value.shape();
  if (xs.size() != 4 || ws.size() != 4 || xs[1] != ws[0])
    throw std::invalid_argument("conv_transpose2d: bad shapes");
  const int bs = xs[0], cin = xs[1], h = xs[2], wd = xs[3];
  const int cout = ws[1], k = ws[3];
  const int hh = (h - 1) * stride - 2 * pad + k;
  const int ww = (wd - 1) * stride - 2 * pad + k;
  const int ckk = cout * k * k;
  Tensor out({bs, cout, hh, ww});
  std::vector<double> col(static_cast<std::size_t>(ckk) * h * wd);
  for (int s = 0; s < bs; ++s) {
    // col[Cout*k*k x h*w] = w[Cin x Cout*k*k]^T * x_s[Cin x h*w]
    gemm(true, false, ckk, h * wd, cin, w->value.data(),
         x->value.data() + static_cast<std::size_t>(s) * cin * h * wd, col.data(), false);
    double* ob = out.data() + static_cast<std::size_t>(s) * cout * hh * ww;
    detail::col2im_add(col.data(), cout, hh, ww, k, stride, pad, h, wd, ob);
    const double* bv = b->value.data();
    for (int o = 0; o < cout; ++o) {
      double* row = ob + static_cast<std::size_t>(o) * hh * ww;
      for (int i = 0; i < hh * ww; ++i) row[i] += bv[o];
    }
  }
  auto n = make_node(std::move(out), {x, w, b});
  if (n->requires_grad) {
    Node *self = n.get(), *px = x.get(), *pw = w.get(), *pb = b.get();
    n->backward_fn = [self, px, pw, pb, bs, cin, h, wd, cout, k, stride, pad, hh, ww, ckk] {
      std::vector<double> dcol(static_cast<std::size_t>(ckk) * h * wd);
      for (int s = 0; s < bs; ++s) {
        const double* g = self->grad.data() + static_cast<std::size_t>(s) * cout * hh * ww;
        detail::im2col(g, cout, hh, ww, k, stride, pad, h, wd, dcol.data());
        if (px->requires_grad)
          gemm(false, false, cin, h * wd, ckk, pw->value.data(), dcol.data(),
               px->ensure_grad().data() + static_cast<std::size_t>(s) * cin * h * wd, true);
        if (pw->requires_grad)
          gemm(false, true, cin, ckk, h * wd,
               px->value.data() + static_cast<std::size_t>(s) * cin * h * wd, dcol.data(),
               pw->ensure_grad().data(), true);
        if (pb->requires_grad) {
          double* db = pb->ensure_grad().data();
          for (int o = 0; o < cout; ++o) {
            const double* row = g + static_cast<std::size_t>(o) * hh * ww;
            double acc = 0.0;
            for (int i = 0; i < hh * ww; ++i) acc += row[i];
            db[o] += acc;
          }
        }
      }
    };
  }
  return n;
}

// Mean over the two trailing spatial dims: [B,C,H,W] -> [B,C].
inline Var global_avg_pool(const Var& x) {
  const auto& xs = x->value.shape();
  if (xs.size() != 4) throw std::invalid_argument("global_avg_pool: expects 4D");
  const int bs = xs[0], c = xs[1], hw = xs[2] * xs[3];
  Tensor out({bs, c});
  for (int i = 0; i < bs * c; ++i) {
    const double* src = x->value.data() + static_cast<std::size_t>(i) * hw;
    double acc = 0.0;
    for (int j = 0; j < hw; ++j) acc += src[j];
    out[static_cast<std::size_t>(i)] = acc / hw;
  }
  auto n = make_node(std::move(out), {x});
  if (n->requires_grad) {
    Node *self = n.get(), *px = x.get();
    n->backward_fn = [self, px, bs, c, hw] {
      double* dx = px->ensure_grad().data();
      for (int i = 0; i < bs * c; ++i) {
        const double g = self->grad[static_cast<std::size_t>(i)] / hw;
        double* dst = dx + static_cast<std::size_t>(i) * hw;
        for (int j = 0; j < hw; ++j) dst[j] += g;
      }
    };
  }
  return n;
}

// ---------------------------------------------------------------------------
// normalization and softmax
// ---------------------------------------------------------------------------

inline Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-6) {
  const int d = x->value.shape().back();
  if (gamma->value.numel() != d || beta->value.numel() != d)
    throw std::invalid_argument("layer_norm: affine dim mismatch");
  const int rows = x->value.numel() / d;
  Tensor out(x->value.shape());
  std::vector<double> inv_std(rows), mean(rows);
  for (int r = 0; r < rows; ++r) {
    const double* xr = x->value.data() + static_cast<std::size_t>(r) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = is;
    double* yr = out.data() + static_cast<std::size_t>(r) * d;
    const double* gv = gamma->value.data();
    const double* bv = beta->value.data();
    for (int j = 0; j < d; ++j) yr[j] = (xr[j] - mu) * is * gv[j] + bv[j];
  }
  auto n = make_node(std::move(out), {x, gamma, beta});
  if (n->requires_grad) {
    Node *self = n.get(), *px = x.get(), *pg = gamma.get(), *pbeta = beta.get();
    n->backward_fn = [self, px, pg, pbeta, rows, d, mean = std::move(mean),
                      inv_std = std::move(inv_std)] {
      const double* g = self->grad.data();
      const double* gv = pg->value.data();
      for (int r = 0; r < rows; ++r) {
        const double* xr = px->value.data() + static_cast<std::size_t>(r) * d;
        const double* gr = g + static_cast<std::size_t>(r) * d;
        const double is = inv_std[r], mu = mean[r];
        if (pg->requires_grad || pbeta->requires_grad) {
          double* dg = pg->ensure_grad().data();
          double* db = pbeta->ensure_grad().data();
          for (int j = 0; j < d; ++j) {
            dg[j] += gr[j] * (xr[j] - mu) * is;
            db[j] += gr[j];
          }
        }
        if (px->requires_grad) {
          // dxhat = g * gamma; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * is
          double m1 = 0.0, m2 = 0.0;
          for (int j = 0; j < d; ++j) {
            const double xh = (xr[j] - mu) * is;
            const double dxh = gr[j] * gv[j];
            m1 += dxh;
            m2 += dxh * xh;
          }
          m1 /= d;
          m2 /= d;
          double* dx = px->ensure_grad().data() + static_cast<std::size_t>(r) * d;
          for (int j = 0; j < d; ++j) {
            const double xh = (xr[j] - mu) * is;
            dx[j] += (gr[j] * gv[j] - m1 - xh * m2) * is;
          }
        }
      }
    };
  }
  return n;
}

inline Var softmax_lastdim(const Var& x) {
  const int d = x->value.shape().back();
  const int rows = x->value.numel() / d;
  Tensor out(x->value.shape());
  for (int r = 0; r < rows; ++r) {
    const double* xr = x->value.data() + static_cast<std::size_t>(r) * d;
    double* yr = out.data() + static_cast<std::size_t>(r) * d;
    double mx = xr[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    double z = 0.0;
    for (int j = 0; j < d; ++j) {
      yr[j] = std::exp(xr[j] - mx);
      z += yr[j];
    }
    for (int j = 0; j < d; ++j) yr[j] /= z;
  }
  auto n = make_node(std::move(out), {x});
  if (n->requires_grad) {
    Node *self = n.get(), *px = x.get();
    n->backward_fn = [self, px, rows, d] {
      for (int r = 0; r < rows; ++r) {
        const double* y = self->value.data() + static_cast<std::size_t>(r) * d;
        const double* g = self->grad.data() + static_cast<std::size_t>(r) * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += g[j] * y[j];
        double* dx = px->ensure_grad().data() + static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) dx[j] += (g[j] - dot) * y[j];
      }
    };
  }
  return n;
}

// Row-wise L2 normalization of a 2D tensor. eps sits inside the square root
// for gradient stability; rows with exactly zero norm must be rejected by the
// caller before reaching here.
inline Var l2_normalize_rows(const Var& x, double eps = 1e-12) {
  if (x->value.ndim() != 2) throw std::invalid_argument("l2_normalize_rows: expects 2D");
  const int rows = x->value.dim(0), d = x->value.dim(1);
  Tensor out({rows, d});
  std::vector<double> inv_norm(rows);
  for (int r = 0; r < rows; ++r) {
    const double* xr = x->value.data() + static_cast<std::size_t>(r) * d;
    double s = 0.0;
    for (int j = 0; j < d; ++j) s += xr[j] * xr[j];
    const double in = 1.0 / std::sqrt(s + eps);
    inv_norm[r] = in;
    double* yr = out.data() + static_cast<std::size_t>(r) * d;
    for (int j = 0; j < d; ++j) yr[j] = xr[j] * in;
  }
  auto n = make_node(std::move(out), {x});
  if (n->requires_grad) {
    Node *self = n.get(), *px = x.get();
    n->backward_fn = [self, px, rows, d, inv_norm = std::move(inv_norm)] {
      for (int r = 0; r < rows; ++r) {
        const double* xr = px->value.data() + static_cast<std::size_t>(r) * d;
        const double* gr = self->grad.data() + static_cast<std::size_t>(r) * d;
        const double in = inv_norm[r];
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += gr[j] * xr[j];
        double* dx = px->ensure_grad().data() + static_cast<std::size_t>(r) * d;
        for (int j = 0; j < d; ++j) dx[j] += gr[j] * in - xr[j] * dot * in * in * in;
      }
    };
  }
  return n;
}

// Mean over rows of (logsumexp(row) - diagonal): cross entropy of an N x N
// logit matrix against diagonal targets, in stabilized form.
inline Var ce_diag_mean(const Var& r) {
  if (r->value.ndim() != 2 || r->value.dim(0) != r->value.dim(1))
    throw std::invalid_argument("ce_diag_mean: expects square matrix");
  const int nn = r->value.dim(0);
  double total = 0.0;
  for (int i = 0; i < nn; ++i) {
    const double* row = r->value.data() + static_cast<std::size_t>(i) * nn;
    double mx = row[0];
    for (int j = 1; j < nn; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < nn; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[i];
  }
  auto n = make_node(Tensor::scalar(total / nn), {r});
  if (n->requires_grad) {
    Node *self = n.get(), *pr = r.get();
    n->backward_fn = [self, pr, nn] {
      const double g = self->grad[0] / nn;
      for (int i = 0; i < nn; ++i) {
        const double* row = pr->value.data() + static_cast<std::size_t>(i) * nn;
        double* drow = pr->ensure_grad().data() + static_cast<std::size_t>(i) * nn;
        double mx = row[0];
        for (int j = 1; j < nn; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < nn; ++j) z += std::exp(row[j] - mx);
        for (int j = 0; j < nn; ++j) drow[j] += g * (std::exp(row[j] - mx) / z - (j == i ? 1.0 : 0.0));
      }
    };
  }
  return n;
}

// Mean softmax cross entropy of [N,C] logits against integer class targets,
// in stabilized form.
inline Var softmax_ce_mean(const Var& logits, const std::vector<int>& targets) {
  if (logits->value.ndim() != 2 ||
      logits->value.dim(0) != static_cast<int>(targets.size()))
    throw std::invalid_argument("softmax_ce_mean: logits/target size mismatch");
  const int n = logits->value.dim(0), c = logits->value.dim(1);
  double total = 0.0;
  for (int i = 0; i < n; ++i) {
    const int t = targets[static_cast<std::size_t>(i)];
    if (t < 0 || t >= c) throw std::invalid_argument("softmax_ce_mean: target out of range");
    const double* row = logits->value.data() + static_cast<std::size_t>(i) * c;
    double mx = row[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
    total += mx + std::log(z) - row[t];
  }
  auto node = make_node(Tensor::scalar(total / n), {logits});
  if (node->requires_grad) {
    Node *self = node.get(), *pl = logits.get();
    node->backward_fn = [self, pl, targets, n, c] {
      const double g = self->grad[0] / n;
      for (int i = 0; i < n; ++i) {
        const double* row = pl->value.data() + static_cast<std::size_t>(i) * c;
        double* drow = pl->ensure_grad().data() + static_cast<std::size_t>(i) * c;
        double mx = row[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        for (int j = 0; j < c; ++j)
          drow[j] += g * (std::exp(row[j] - mx) / z -
                          (j == targets[static_cast<std::size_t>(i)] ? 1.0 : 0.0));
      }
    };
  }
  return node;
}

// ---------------------------------------------------------------------------
// layout ops (generic gather plus helpers)
// ---------------------------------------------------------------------------

// y.flat[i] = x.flat[idx[i]]. Backward scatter-adds, so fan-out (broadcast)
// index tables are fine.
inline Var gather(const Var& x, std::vector<int> out_shape, std::vector<int> idx) {
  if (static_cast<int>(idx.size()) != Tensor::count(out_shape))
    throw std::invalid_argument("gather: index table size mismatch");
  Tensor out(std::move(out_shape));
  const double* xv = x->value.data();
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = xv[idx[i]];
  auto n = make_node(std::move(out), {x});
  if (n->requires_grad) {
    Node *self = n.get(), *px = x.get();
    n->backward_fn = [self, px, idx = std::move(idx)] {
      double* dx = px->ensure_grad().data();
      const double* g = self->grad.data();
      for (std::size_t i = 0; i < idx.size(); ++i) dx[idx[i]] += g[i];
    };
  }
  return n;
}

inline Var reshape(const Var& x, std::vector<int> shape) {
  if (Tensor::count(shape) != x->value.numel())
    throw std::invalid_argument("reshape: element count mismatch");
  Tensor out(std::move(shape));
  std::memcpy(out.data(), x->value.data(), sizeof(double) * static_cast<std::size_t>(out.numel()));
  auto n = make_node(std::move(out), {x});
  if (n->requires_grad) {
    Node *self = n.get(), *px = x.get();
    n->backward_fn = [self, px] {
      double* dx = px->ensure_grad().data();
      const double* g = self->grad.data();
      for (int i = 0; i < self->value.numel(); ++i) dx[i] += g[i];
    };
  }
  return n;
}

inline Var transpose2d(const Var& x) {
  if (x->value.ndim() != 2) throw std::invalid_argument("transpose2d: expects 2D");
  const int m = x->value.dim(0), nn = x->value.dim(1);
  std::vector<int> idx(static_cast<std::size_t>(m) * nn);
  for (int j = 0; j < nn; ++j)
    for (int i = 0; i < m; ++i) idx[static_cast<std::size_t>(j) * m + i] = i * nn + j;
  return gather(x, {nn, m}, std::move(idx));
}

// Token t of every batch row: [B,T,D] -> [B,D].
inline Var token_at(const Var& x, int t) {
  const int b = x->value.dim(0), tt = x->value.dim(1), d = x->value.dim(2);
  std::vector<int> idx(static_cast<std::size_t>(b) * d);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < d; ++j) idx[static_cast<std::size_t>(i) * d + j] = (i * tt + t) * d + j;
  return gather(x, {b, d}, std::move(idx));
}

// Tokens [t0, t0+len) of every batch row: [B,T,D] -> [B,len,D].
inline Var token_range(const Var& x, int t0, int len) {
  const int b = x->value.dim(0), tt = x->value.dim(1), d = x->value.dim(2);
  std::vector<int> idx(static_cast<std::size_t>(b) * len * d);
  std::size_t o = 0;
  for (int i = 0; i < b; ++i)
    for (int t = 0; t < len; ++t)
      for (int j = 0; j < d; ++j) idx[o++] = (i * tt + t0 + t) * d + j;
  return gather(x, {b, len, d}, std::move(idx));
}

// One batch row: [B,L,D] -> [L,D].
inline Var batch_row(const Var& x, int k) {
  const int l = x->value.dim(1), d = x->value.dim(2);
  std::vector<int> idx(static_cast<std::size_t>(l) * d);
  const int base = k * l * d;
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = base + static_cast<int>(i);
  return gather(x, {l, d}, std::move(idx));
}

// Broadcast a [T,D] (or flat [T*D]) parameter across the batch: -> [B,T,D].
inline Var expand_rows(const Var& p, int b, int t, int d) {
  if (p->value.numel() != t * d) throw std::invalid_argument("expand_rows: size mismatch");
  std::vector<int> idx(static_cast<std::size_t>(b) * t * d);
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < t * d; ++j) idx[static_cast<std::size_t>(i) * t * d + j] = j;
  return gather(p, {b, t, d}, std::move(idx));
}

inline Var concat_dim1(const Var& a, const Var& b) {
  const int bs = a->value.dim(0), ta = a->value.dim(1), d = a->value.dim(2);
  const int tb = b->value.dim(1);
  if (b->value.dim(0) != bs || b->value.dim(2) != d)
    throw std::invalid_argument("concat_dim1: shape mismatch");
  Tensor out({bs, ta + tb, d});
  for (int i = 0; i < bs; ++i) {
    std::memcpy(out.data() + (static_cast<std::size_t>(i) * (ta + tb)) * d,
                a->value.data() + static_cast<std::size_t>(i) * ta * d,
                sizeof(double) * static_cast<std::size_t>(ta) * d);
    std::memcpy(out.data() + (static_cast<std::size_t>(i) * (ta + tb) + ta) * d,
                b->value.data() + static_cast<std::size_t>(i) * tb * d,
                sizeof(double) * static_cast<std::size_t>(tb) * d);
  }
  auto n = make_node(std::move(out), {a, b});
  if (n->requires_grad) {
    Node *self = n.get(), *pa = a.get(), *pb = b.get();
    n->backward_fn = [self, pa, pb, bs, ta, tb, d] {
      const double* g = self->grad.data();
      for (int i = 0; i < bs; ++i) {
        if (pa->requires_grad) {
          double* da = pa->ensure_grad().data() + static_cast<std::size_t>(i) * ta * d;
          const double* ga = g + (static_cast<std::size_t>(i) * (ta + tb)) * d;
          for (int j = 0; j < ta * d; ++j) da[j] += ga[j];
        }
        if (pb->requires_grad) {
          double* db = pb->ensure_grad().data() + static_cast<std::size_t>(i) * tb * d;
          const double* gb = g + (static_cast<std::size_t>(i) * (ta + tb) + ta) * d;
          for (int j = 0; j < tb * d; ++j) db[j] += gb[j];
        }
      }
    };
  }
  return n;
}

// Non-overlapping patches, row major over the patch lattice and within each
// patch: [B,1,S,S] -> [B,L,p*p] with L=(S/p)^2.
inline Var image_to_patches(const Var& x, int p) {
  const int b = x->value.dim(0), s = x->value.dim(2);
  if (x->value.dim(1) != 1 || x->value.dim(3) != s || s % p != 0)
    throw std::invalid_argument("image_to_patches: bad shape");
  const int gpl = s / p;  // patches per side
  const int l = gpl * gpl;
  std::vector<int> idx(static_cast<std::size_t>(b) * l * p * p);
  std::size_t o = 0;
  for (int i = 0; i < b; ++i)
    for (int py = 0; py < gpl; ++py)
      for (int px = 0; px < gpl; ++px)
        for (int iy = 0; iy < p; ++iy)
          for (int ix = 0; ix < p; ++ix)
            idx[o++] = (i * s + py * p + iy) * s + px * p + ix;
  return gather(x, {b, l, p * p}, std::move(idx));
}

// Inverse of image_to_patches: [B,L,p*p] -> [B,1,S,S].
inline Var patches_to_image(const Var& x, int p) {
  const int b = x->value.dim(0), l = x->value.dim(1);
  const int gpl = static_cast<int>(std::lround(std::sqrt(static_cast<double>(l))));
  if (gpl * gpl != l || x->value.dim(2) != p * p)
    throw std::invalid_argument("patches_to_image: bad shape");
  const int s = gpl * p;
  std::vector<int> idx(static_cast<std::size_t>(b) * s * s);
  for (int i = 0; i < b; ++i)
    for (int y = 0; y < s; ++y)
      for (int x2 = 0; x2 < s; ++x2) {
        const int py = y / p, iy = y % p, px = x2 / p, ix = x2 % p;
        idx[(static_cast<std::size_t>(i) * s + y) * s + x2] =
            (i * l + py * gpl + px) * (p * p) + iy * p + ix;
      }
  return gather(x, {b, 1, s, s}, std::move(idx));
}

// Feature map to token sequence: [B,C,G,G] -> [B,G*G,C], spatial row major.
inline Var map_to_tokens(const Var& x) {
  const int b = x->value.dim(0), c = x->value.dim(1), g = x->value.dim(2);
  std::vector<int> idx(static_cast<std::size_t>(b) * g * g * c);
  std::size_t o = 0;
  for (int i = 0; i < b; ++i)
    for (int s = 0; s < g * g; ++s)
      for (int ch = 0; ch < c; ++ch) idx[o++] = (i * c + ch) * g * g + s;
  return gather(x, {b, g * g, c}, std::move(idx));
}

// Token sequence back to feature map: [B,L,C] -> [B,C,G,G].
inline Var tokens_to_map(const Var& x) {
  const int b = x->value.dim(0), l = x->value.dim(1), c = x->value.dim(2);
  const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(l))));
  if (g * g != l) throw std::invalid_argument("tokens_to_map: token count not square");
  std::vector<int> idx(static_cast<std::size_t>(b) * c * l);
  std::size_t o = 0;
  for (int i = 0; i < b; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int s = 0; s < l; ++s) idx[o++] = (i * l + s) * c + ch;
  return gather(x, {b, c, g, g}, std::move(idx));
}

// [B,T,H*dh] -> [B*H,T,dh] for attention heads.
inline Var split_heads(const Var& x, int heads) {
  const int b = x->value.dim(0), t = x->value.dim(1), d = x->value.dim(2);
  if (d % heads != 0) throw std::invalid_argument("split_heads: dim not divisible");
  const int dh = d / heads;
  std::vector<int> idx(static_cast<std::size_t>(b) * heads * t * dh);
  std::size_t o = 0;
  for (int i = 0; i < b; ++i)
    for (int h = 0; h < heads; ++h)
      for (int s = 0; s < t; ++s)
        for (int j = 0; j < dh; ++j) idx[o++] = (i * t + s) * d + h * dh + j;
  return gather(x, {b * heads, t, dh}, std::move(idx));
}

// Inverse of split_heads: [B*H,T,dh] -> [B,T,H*dh].
inline Var merge_heads(const Var& x, int heads) {
  const int bh = x->value.dim(0), t = x->value.dim(1), dh = x->value.dim(2);
  const int b = bh / heads, d = heads * dh;
  std::vector<int> idx(static_cast<std::size_t>(b) * t * d);
  std::size_t o = 0;
  for (int i = 0; i < b; ++i)
    for (int s = 0; s < t; ++s)
      for (int h = 0; h < heads; ++h)
        for (int j = 0; j < dh; ++j) idx[o++] = ((i * heads + h) * t + s) * dh + j;
  return gather(x, {b, t, d}, std::move(idx));
}

inline void zero_grad(const std::vector<Var>& params) {
  for (const auto& p : params) {
    if (!p->grad.empty()) p->grad.fill(0.0);
  }
}

}  // namespace solarchip
