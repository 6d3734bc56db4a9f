#include "qg/tape.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace qg {

void mm_nn(const real* a, const real* b, real* c, size_t m, size_t k, size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, real(0));
  for (size_t i = 0; i < m; ++i) {
    const real* ai = a + i * k;
    real* ci = c + i * n;
    for (size_t p = 0; p < k; ++p) {
      real av = ai[p];
      if (av == 0) continue;
      const real* bp = b + p * n;
      for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

void mm_nt(const real* a, const real* b, real* c, size_t m, size_t k, size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, real(0));
  for (size_t i = 0; i < m; ++i) {
    const real* ai = a + i * k;
    real* ci = c + i * n;
    for (size_t j = 0; j < n; ++j) {
      const real* bj = b + j * k;
      real s = 0;
      for (size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] += s;
    }
  }
}

void mm_tn(const real* a, const real* b, real* c, size_t m, size_t k, size_t n, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, real(0));
  for (size_t p = 0; p < k; ++p) {
    const real* ap = a + p * m;
    const real* bp = b + p * n;
    for (size_t i = 0; i < m; ++i) {
      real av = ap[i];
      if (av == 0) continue;
      real* ci = c + i * n;
      for (size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

Tape::VarId Tape::push(Tensor val, bool requires_grad, std::function<void(Tape&)> back) {
  VarData vd;
  vd.val = std::move(val);
  vd.requires_grad = requires_grad;
  if (requires_grad) vd.grad = Tensor::zeros(vd.val.shape);
  vars_.push_back(std::move(vd));
  nodes_.push_back(Node{std::move(back)});
  return static_cast<VarId>(vars_.size() - 1);
}

Tape::VarId Tape::leaf(Tensor val, bool requires_grad) {
  return push(std::move(val), requires_grad, nullptr);
}

Tape::VarId Tape::lookup(VarId table, const std::vector<int>& ids, std::vector<size_t> ids_shape) {
  const Tensor& tab = val(table);
  if (tab.rank() != 2) throw runtime_error("lookup: table must be 2-D");
  size_t vocab = tab.dim(0), d = tab.dim(1);
  if (ids.size() != Tensor::count(ids_shape)) throw runtime_error("lookup: id count mismatch");
  std::vector<size_t> out_shape = ids_shape;
  out_shape.push_back(d);
  Tensor out(out_shape);
  for (size_t i = 0; i < ids.size(); ++i) {
    size_t id = static_cast<size_t>(ids[i]);
    if (id >= vocab) throw runtime_error("lookup: id out of range");
    std::copy_n(&tab.v[id * d], d, &out.v[i * d]);
  }
  bool rg = requires_grad(table);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[outv].back = [table, outv, ids, d](Tape& t) {
      const Tensor& g = t.grad(outv);
      Tensor& tg = t.grad_mut(table);
      for (size_t i = 0; i < ids.size(); ++i) {
        real* dst = &tg.v[static_cast<size_t>(ids[i]) * d];
        const real* src = &g.v[i * d];
        for (size_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  }
  return outv;
}

Tape::VarId Tape::linear(VarId x, VarId w, bool trans_w) {
  const Tensor& xv = val(x);
  const Tensor& wv = val(w);
  if (wv.rank() != 2) throw runtime_error("linear: weight must be 2-D");
  size_t k = xv.shape.back();
  size_t n;
  if (!trans_w) {
    if (wv.dim(0) != k) throw runtime_error("linear: inner dim mismatch");
    n = wv.dim(1);
  } else {
    if (wv.dim(1) != k) throw runtime_error("linear: inner dim mismatch (trans)");
    n = wv.dim(0);
  }
  size_t m = xv.size() / k;
  std::vector<size_t> out_shape = xv.shape;
  out_shape.back() = n;
  Tensor out(out_shape);
  if (!trans_w)
    mm_nn(xv.v.data(), wv.v.data(), out.v.data(), m, k, n, false);
  else
    mm_nt(xv.v.data(), wv.v.data(), out.v.data(), m, k, n, false);
  bool rg = requires_grad(x) || requires_grad(w);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[outv].back = [x, w, outv, m, k, n, trans_w](Tape& t) {
      const real* dy = t.grad(outv).v.data();
      if (t.requires_grad(x)) {
        real* dx = t.grad_mut(x).v.data();
        const real* wp = t.val(w).v.data();
        if (!trans_w)
          mm_nt(dy, wp, dx, m, n, k, true);  // dy[m,n] * W^T[n,k]
        else
          mm_nn(dy, wp, dx, m, n, k, true);  // dy[m,n] * W[n,k]
      }
      if (t.requires_grad(w)) {
        real* dw = t.grad_mut(w).v.data();
        const real* xp = t.val(x).v.data();
        if (!trans_w)
          mm_tn(xp, dy, dw, k, m, n, true);  // x^T[k,m] * dy[m,n]
        else
          mm_tn(dy, xp, dw, n, m, k, true);  // dy^T[n,m] * x[m,k]
      }
    };
  }
  return outv;
}

Tape::VarId Tape::bmm(VarId a, VarId b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  if (av.rank() < 2 || av.rank() != bv.rank()) throw runtime_error("bmm: rank mismatch");
  size_t r = av.rank();
  for (size_t i = 0; i + 2 < r; ++i)
    if (av.shape[i] != bv.shape[i]) throw runtime_error("bmm: batch dim mismatch");
  size_t m = av.shape[r - 2], k = av.shape[r - 1];
  if (bv.shape[r - 2] != k) throw runtime_error("bmm: inner dim mismatch");
  size_t n = bv.shape[r - 1];
  size_t batch = av.size() / (m * k);
  std::vector<size_t> out_shape(av.shape.begin(), av.shape.end() - 2);
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor out(out_shape);
  for (size_t q = 0; q < batch; ++q)
    mm_nn(av.v.data() + q * m * k, bv.v.data() + q * k * n, out.v.data() + q * m * n, m, k, n, false);
  bool rg = requires_grad(a) || requires_grad(b);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[outv].back = [a, b, outv, batch, m, k, n](Tape& t) {
      const real* dc = t.grad(outv).v.data();
      if (t.requires_grad(a)) {
        real* da = t.grad_mut(a).v.data();
        const real* bp = t.val(b).v.data();
        for (size_t q = 0; q < batch; ++q)
          mm_nt(dc + q * m * n, bp + q * k * n, da + q * m * k, m, n, k, true);
      }
      if (t.requires_grad(b)) {
        real* db = t.grad_mut(b).v.data();
        const real* ap = t.val(a).v.data();
        for (size_t q = 0; q < batch; ++q)
          mm_tn(ap + q * m * k, dc + q * m * n, db + q * k * n, k, m, n, true);
      }
    };
  }
  return outv;
}

Tape::VarId Tape::transpose_last2(VarId a) {
  const Tensor& av = val(a);
  size_t r = av.rank();
  if (r < 2) throw runtime_error("transpose_last2: rank < 2");
  std::vector<size_t> perm(r);
  for (size_t i = 0; i < r; ++i) perm[i] = i;
  std::swap(perm[r - 2], perm[r - 1]);
  return permute(a, perm);
}

namespace {

Tensor permute_tensor(const Tensor& t, const std::vector<size_t>& perm) {
  size_t r = t.rank();
  std::vector<size_t> out_shape(r);
  for (size_t i = 0; i < r; ++i) out_shape[i] = t.shape[perm[i]];
  Tensor out(out_shape);
  std::vector<size_t> in_strides(r, 1), out_strides(r, 1);
  for (size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * t.shape[i];
  for (size_t i = r - 1; i > 0; --i) out_strides[i - 1] = out_strides[i] * out_shape[i];
  std::vector<size_t> idx(r, 0);
  for (size_t o = 0; o < out.size(); ++o) {
    size_t rem = o, src = 0;
    for (size_t i = 0; i < r; ++i) {
      size_t coord = rem / out_strides[i];
      rem %= out_strides[i];
      src += coord * in_strides[perm[i]];
    }
    out.v[o] = t.v[src];
  }
  return out;
}

}  // namespace

Tape::VarId Tape::permute(VarId a, const std::vector<size_t>& perm) {
  const Tensor& av = val(a);
  if (perm.size() != av.rank()) throw runtime_error("permute: bad perm");
  Tensor out = permute_tensor(av, perm);
  bool rg = requires_grad(a);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    std::vector<size_t> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = i;
    nodes_[outv].back = [a, outv, inv](Tape& t) {
      Tensor dg = permute_tensor(t.grad(outv), inv);
      Tensor& da = t.grad_mut(a);
      for (size_t i = 0; i < da.size(); ++i) da.v[i] += dg.v[i];
    };
  }
  return outv;
}

Tape::VarId Tape::reshape(VarId a, std::vector<size_t> shape) {
  const Tensor& av = val(a);
  if (Tensor::count(shape) != av.size()) throw runtime_error("reshape: element count mismatch");
  Tensor out(shape, av.v);
  bool rg = requires_grad(a);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[outv].back = [a, outv](Tape& t) {
      const Tensor& g = t.grad(outv);
      Tensor& da = t.grad_mut(a);
      for (size_t i = 0; i < da.size(); ++i) da.v[i] += g.v[i];
    };
  }
  return outv;
}

Tape::VarId Tape::add(VarId a, VarId b) {
  const Tensor& av = val(a);
  const Tensor& bv = val(b);
  size_t bn = bv.size();
  if (av.size() % bn != 0) throw runtime_error("add: shape mismatch");
  // b must be a suffix shape of a
  size_t off = av.rank() - bv.rank();
  for (size_t i = 0; i < bv.rank(); ++i)
    if (av.shape[off + i] != bv.shape[i]) throw runtime_error("add: broadcast shape mismatch");
  Tensor out(av.shape);
  for (size_t i = 0; i < av.size(); ++i) out.v[i] = av.v[i] + bv.v[i % bn];
  bool rg = requires_grad(a) || requires_grad(b);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[outv].back = [a, b, outv, bn](Tape& t) {
      const Tensor& g = t.grad(outv);
      if (t.requires_grad(a)) {
        Tensor& da = t.grad_mut(a);
        for (size_t i = 0; i < g.size(); ++i) da.v[i] += g.v[i];
      }
      if (t.requires_grad(b)) {
        Tensor& db = t.grad_mut(b);
        for (size_t i = 0; i < g.size(); ++i) db.v[i % bn] += g.v[i];
      }
    };
  }
  return outv;
}

Tape::VarId Tape::scale(VarId a, real c) {
  const Tensor& av = val(a);
  Tensor out(av.shape);
  for (size_t i = 0; i < av.size(); ++i) out.v[i] = av.v[i] * c;
  bool rg = requires_grad(a);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[outv].back = [a, outv, c](Tape& t) {
      const Tensor& g = t.grad(outv);
      Tensor& da = t.grad_mut(a);
      for (size_t i = 0; i < g.size(); ++i) da.v[i] += g.v[i] * c;
    };
  }
  return outv;
}

Tape::VarId Tape::relu(VarId a) {
  const Tensor& av = val(a);
  Tensor out(av.shape);
  for (size_t i = 0; i < av.size(); ++i) out.v[i] = av.v[i] > 0 ? av.v[i] : 0;
  bool rg = requires_grad(a);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[outv].back = [a, outv](Tape& t) {
      const Tensor& g = t.grad(outv);
      const Tensor& x = t.val(a);
      Tensor& da = t.grad_mut(a);
      for (size_t i = 0; i < g.size(); ++i)
        if (x.v[i] > 0) da.v[i] += g.v[i];
    };
  }
  return outv;
}

Tape::VarId Tape::layernorm(VarId x, VarId gain, real eps) {
  const Tensor& xv = val(x);
  const Tensor& gv = val(gain);
  size_t d = xv.shape.back();
  if (gv.size() != d) throw runtime_error("layernorm: gain size mismatch");
  size_t rows = xv.size() / d;
  Tensor out(xv.shape);
  Tensor xhat(xv.shape);       // saved for backward
  std::vector<real> inv_sigma(rows);
  for (size_t rix = 0; rix < rows; ++rix) {
    const real* xr = &xv.v[rix * d];
    real mu = 0;
    for (size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= real(d);
    real var = 0;
    for (size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= real(d);
    real is = real(1) / std::sqrt(var + eps);
    inv_sigma[rix] = is;
    for (size_t j = 0; j < d; ++j) {
      real xh = (xr[j] - mu) * is;
      xhat.v[rix * d + j] = xh;
      out.v[rix * d + j] = xh * gv.v[j];
    }
  }
  bool rg = requires_grad(x) || requires_grad(gain);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    auto xh = std::make_shared<Tensor>(std::move(xhat));
    auto is = std::make_shared<std::vector<real>>(std::move(inv_sigma));
    nodes_[outv].back = [x, gain, outv, d, rows, xh, is](Tape& t) {
      const Tensor& g = t.grad(outv);
      const Tensor& gv2 = t.val(gain);
      if (t.requires_grad(gain)) {
        Tensor& dg = t.grad_mut(gain);
        for (size_t rix = 0; rix < rows; ++rix)
          for (size_t j = 0; j < d; ++j)
            dg.v[j] += g.v[rix * d + j] * xh->v[rix * d + j];
      }
      if (t.requires_grad(x)) {
        Tensor& dx = t.grad_mut(x);
        for (size_t rix = 0; rix < rows; ++rix) {
          real mean_dxh = 0, mean_dxh_xh = 0;
          for (size_t j = 0; j < d; ++j) {
            real dxh = g.v[rix * d + j] * gv2.v[j];
            mean_dxh += dxh;
            mean_dxh_xh += dxh * xh->v[rix * d + j];
          }
          mean_dxh /= real(d);
          mean_dxh_xh /= real(d);
          for (size_t j = 0; j < d; ++j) {
            real dxh = g.v[rix * d + j] * gv2.v[j];
            dx.v[rix * d + j] +=
                (*is)[rix] * (dxh - mean_dxh - xh->v[rix * d + j] * mean_dxh_xh);
          }
        }
      }
    };
  }
  return outv;
}

Tape::VarId Tape::softmax_lastdim(VarId a) {
  const Tensor& av = val(a);
  size_t d = av.shape.back();
  size_t rows = av.size() / d;
  Tensor out(av.shape);
  for (size_t rix = 0; rix < rows; ++rix) {
    const real* xr = &av.v[rix * d];
    real mx = xr[0];
    for (size_t j = 1; j < d; ++j) mx = std::max(mx, xr[j]);
    real z = 0;
    for (size_t j = 0; j < d; ++j) {
      real e = std::exp(xr[j] - mx);
      out.v[rix * d + j] = e;
      z += e;
    }
    for (size_t j = 0; j < d; ++j) out.v[rix * d + j] /= z;
  }
  bool rg = requires_grad(a);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[outv].back = [a, outv, d, rows](Tape& t) {
      const Tensor& g = t.grad(outv);
      const Tensor& y = t.val(outv);
      Tensor& da = t.grad_mut(a);
      for (size_t rix = 0; rix < rows; ++rix) {
        real dot = 0;
        for (size_t j = 0; j < d; ++j) dot += g.v[rix * d + j] * y.v[rix * d + j];
        for (size_t j = 0; j < d; ++j)
          da.v[rix * d + j] += y.v[rix * d + j] * (g.v[rix * d + j] - dot);
      }
    };
  }
  return outv;
}

Tape::VarId Tape::dropout(VarId a, real rate, std::mt19937_64& rng) {
  if (rate == 0) return a;
  if (rate < 0 || rate >= 1) throw runtime_error("dropout: rate out of range");
  const Tensor& av = val(a);
  auto mask = std::make_shared<std::vector<real>>(av.size());
  std::uniform_real_distribution<real> u(0.0, 1.0);
  real keep = real(1) - rate;
  for (auto& m : *mask) m = (u(rng) < keep) ? real(1) / keep : real(0);
  Tensor out(av.shape);
  for (size_t i = 0; i < av.size(); ++i) out.v[i] = av.v[i] * (*mask)[i];
  bool rg = requires_grad(a);
  VarId outv = push(std::move(out), rg, nullptr);
  if (rg) {
    nodes_[outv].back = [a, outv, mask](Tape& t) {
      const Tensor& g = t.grad(outv);
      Tensor& da = t.grad_mut(a);
      for (size_t i = 0; i < g.size(); ++i) da.v[i] += g.v[i] * (*mask)[i];
    };
  }
  return outv;
}

Tape::VarId Tape::cross_entropy_mean(VarId logits, const std::vector<int>& targets, int pad_id) {
  const Tensor& lv = val(logits);
  size_t vsz = lv.shape.back();
  size_t pos = lv.size() / vsz;
  if (targets.size() != pos) throw runtime_error("cross_entropy: target count mismatch");
  size_t n_active = 0;
  real loss = 0;
  // softmax probs saved for backward
  auto probs = std::make_shared<Tensor>(lv.shape);
  for (size_t p = 0; p < pos; ++p) {
    const real* xr = &lv.v[p * vsz];
    real mx = xr[0];
    for (size_t j = 1; j < vsz; ++j) mx = std::max(mx, xr[j]);
    real z = 0;
    for (size_t j = 0; j < vsz; ++j) {
      real e = std::exp(xr[j] - mx);
      probs->v[p * vsz + j] = e;
      z += e;
    }
    real logz = std::log(z) + mx;
    for (size_t j = 0; j < vsz; ++j) probs->v[p * vsz + j] /= z;
    if (targets[p] != pad_id) {
      if (targets[p] < 0 || static_cast<size_t>(targets[p]) >= vsz)
        throw runtime_error("cross_entropy: target id out of range");
      loss += logz - xr[targets[p]];
      ++n_active;
    }
  }
  if (n_active == 0) throw runtime_error("cross_entropy: all targets are padding");
  loss /= real(n_active);
  bool rg = requires_grad(logits);
  VarId outv = push(Tensor({1}, {loss}), rg, nullptr);
  if (rg) {
    auto tgt = std::make_shared<std::vector<int>>(targets);
    nodes_[outv].back = [logits, outv, probs, tgt, pad_id, vsz, pos, n_active](Tape& t) {
      real go = t.grad(outv).v[0];
      Tensor& dl = t.grad_mut(logits);
      real inv = go / real(n_active);
      for (size_t p = 0; p < pos; ++p) {
        if ((*tgt)[p] == pad_id) continue;
        const real* pr = &probs->v[p * vsz];
        real* dr = &dl.v[p * vsz];
        for (size_t j = 0; j < vsz; ++j) dr[j] += pr[j] * inv;
        dr[(*tgt)[p]] -= inv;
      }
    };
  }
  return outv;
}

void Tape::backward(VarId root) {
  if (vars_[root].val.size() != 1) throw runtime_error("backward: root must be scalar");
  if (!vars_[root].requires_grad) throw runtime_error("backward: root does not require grad");
  if (ran_backward_) throw runtime_error("backward: already ran on this tape");
  ran_backward_ = true;
  vars_[root].grad.v[0] = 1;
  for (int i = root; i >= 0; --i)
    if (nodes_[i].back) nodes_[i].back(*this);
}

}  // namespace qg
