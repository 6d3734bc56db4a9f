#pragma once

#include <functional>
#include <random>
#include <vector>

#include "qg/tensor.hpp"

namespace qg {

// Reverse-mode autodiff over dense tensors. One Tape per evaluation;
// variables are indices into tape storage, freed with the tape.
class Tape {
 public:
  using VarId = int;

  VarId leaf(Tensor val, bool requires_grad = false);

  const Tensor& val(VarId id) const { return vars_[id].val; }
  const Tensor& grad(VarId id) const { return vars_[id].grad; }
  bool requires_grad(VarId id) const { return vars_[id].requires_grad; }

  // table: [V, d]; ids: flat index list with logical shape `ids_shape`.
  // Result shape = ids_shape + [d]. Backward scatter-adds into the table.
  VarId lookup(VarId table, const std::vector<int>& ids, std::vector<size_t> ids_shape);

  // x: [..., k]; w: [k, n] (or [n, k] with trans_w). Result [..., n].
  VarId linear(VarId x, VarId w, bool trans_w = false);

  // a: [..., m, k]; b: [..., k, n]; identical leading dims. Result [..., m, n].
  VarId bmm(VarId a, VarId b);

  VarId transpose_last2(VarId a);
  VarId permute(VarId a, const std::vector<size_t>& perm);
  VarId reshape(VarId a, std::vector<size_t> shape);

  // Elementwise sum; b may broadcast as a suffix shape of a.
  VarId add(VarId a, VarId b);
  VarId scale(VarId a, real c);
  VarId relu(VarId a);

  // Normalizes the last dim (mean/variance), then multiplies by gain [d].
  VarId layernorm(VarId x, VarId gain, real eps = 1e-6);

  VarId softmax_lastdim(VarId a);

  // Inverted dropout; identity when rate == 0.
  VarId dropout(VarId a, real rate, std::mt19937_64& rng);

  // logits: [B, T, V]; targets: B*T ids. Mean token cross-entropy (natural
  // log) over positions where target != pad_id. Scalar result.
  VarId cross_entropy_mean(VarId logits, const std::vector<int>& targets, int pad_id);

  // Seeds d(root)=1 and runs all recorded backward steps in reverse order.
  // Root must be scalar.
  void backward(VarId root);

  size_t num_vars() const { return vars_.size(); }

 private:
  struct VarData {
    Tensor val;
    Tensor grad;
    bool requires_grad = false;
  };
  struct Node {
    std::function<void(Tape&)> back;
  };

  VarId push(Tensor val, bool requires_grad, std::function<void(Tape&)> back);
  Tensor& grad_mut(VarId id) { return vars_[id].grad; }
  Tensor& val_mut(VarId id) { return vars_[id].val; }

  std::vector<VarData> vars_;
  std::vector<Node> nodes_;
  bool ran_backward_ = false;
};

// Raw matmul helpers (row-major): c[m,n] (+)= a[m,k] * b[k,n] variants.
void mm_nn(const real* a, const real* b, real* c, size_t m, size_t k, size_t n, bool accumulate);
void mm_nt(const real* a, const real* b, real* c, size_t m, size_t k, size_t n, bool accumulate);  // b is [n,k]
void mm_tn(const real* a, const real* b, real* c, size_t m, size_t k, size_t n, bool accumulate);  // a is [k,m]

}  // namespace qg
