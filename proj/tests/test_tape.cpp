#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "qg/tape.hpp"

using namespace qg;

namespace {

// Builds a scalar from leaf tensors via `body`, then compares each analytic
// leaf gradient against central finite differences.
using Body = std::function<Tape::VarId(Tape&, const std::vector<Tape::VarId>&)>;

real eval_scalar(const std::vector<Tensor>& leaves, const Body& body) {
  Tape t;
  std::vector<Tape::VarId> ids;
  for (const auto& l : leaves) ids.push_back(t.leaf(l, false));
  return t.val(body(t, ids)).v[0];
}

void check_grads(std::vector<Tensor> leaves, const Body& body, real h = 1e-5, real tol = 1e-6) {
  Tape t;
  std::vector<Tape::VarId> ids;
  for (const auto& l : leaves) ids.push_back(t.leaf(l, true));
  Tape::VarId root = body(t, ids);
  REQUIRE(t.val(root).size() == 1);
  t.backward(root);
  for (size_t li = 0; li < leaves.size(); ++li) {
    const Tensor& g = t.grad(ids[li]);
    for (size_t i = 0; i < leaves[li].size(); ++i) {
      real orig = leaves[li].v[i];
      leaves[li].v[i] = orig + h;
      real up = eval_scalar(leaves, body);
      leaves[li].v[i] = orig - h;
      real dn = eval_scalar(leaves, body);
      leaves[li].v[i] = orig;
      real fd = (up - dn) / (2 * h);
      real denom = std::max({std::fabs(fd), std::fabs(g.v[i]), real(1e-8)});
      CHECK(std::fabs(fd - g.v[i]) / denom < tol);
    }
  }
}

// reduce any tensor to a scalar with fixed pseudo-random weights so every
// element of the op output influences the loss
Tape::VarId weighted_sum(Tape& t, Tape::VarId x) {
  const Tensor& v = t.val(x);
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<real> d(0.5, 1.5);
  Tensor w = Tensor::zeros({v.size(), 1});
  for (auto& e : w.v) e = d(rng);
  Tape::VarId flat = t.reshape(x, {size_t(1), v.size()});
  Tape::VarId out = t.linear(flat, t.leaf(w));
  return t.reshape(out, {size_t(1)});
}

Tensor rand_tensor(std::vector<size_t> shape, uint64_t seed, real lo = -1, real hi = 1) {
  Tensor t = Tensor::zeros(shape);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<real> d(lo, hi);
  for (auto& e : t.v) e = d(rng);
  return t;
}

}  // namespace

TEST_CASE("linear matches finite differences") {
  check_grads({rand_tensor({2, 3, 4}, 1), rand_tensor({4, 5}, 2)},
              [](Tape& t, const std::vector<Tape::VarId>& v) {
                return weighted_sum(t, t.linear(v[0], v[1]));
              });
}

TEST_CASE("linear with transposed weight matches finite differences") {
  check_grads({rand_tensor({2, 4}, 3), rand_tensor({5, 4}, 4)},
              [](Tape& t, const std::vector<Tape::VarId>& v) {
                return weighted_sum(t, t.linear(v[0], v[1], true));
              });
}

TEST_CASE("bmm matches finite differences") {
  check_grads({rand_tensor({2, 3, 2, 4}, 5), rand_tensor({2, 3, 4, 3}, 6)},
              [](Tape& t, const std::vector<Tape::VarId>& v) {
                return weighted_sum(t, t.bmm(v[0], v[1]));
              });
}

TEST_CASE("lookup scatter-adds gradients, repeated ids accumulate") {
  std::vector<int> ids = {1, 0, 1, 2};  // id 1 twice
  check_grads({rand_tensor({3, 4}, 7)}, [&](Tape& t, const std::vector<Tape::VarId>& v) {
    return weighted_sum(t, t.lookup(v[0], ids, {2, 2}));
  });
}

TEST_CASE("add with suffix broadcast matches finite differences") {
  check_grads({rand_tensor({2, 3, 4}, 8), rand_tensor({4}, 9)},
              [](Tape& t, const std::vector<Tape::VarId>& v) {
                return weighted_sum(t, t.add(v[0], v[1]));
              });
}

TEST_CASE("relu and scale match finite differences") {
  // keep values away from the kink at 0
  Tensor x = rand_tensor({3, 4}, 10);
  for (auto& e : x.v)
    if (std::fabs(e) < 0.05) e = 0.1;
  check_grads({x}, [](Tape& t, const std::vector<Tape::VarId>& v) {
    return weighted_sum(t, t.scale(t.relu(v[0]), 0.7));
  });
}

TEST_CASE("layernorm matches finite differences") {
  check_grads({rand_tensor({2, 3, 6}, 11), rand_tensor({6}, 12, 0.5, 1.5)},
              [](Tape& t, const std::vector<Tape::VarId>& v) {
                return weighted_sum(t, t.layernorm(v[0], v[1]));
              });
}

TEST_CASE("softmax matches finite differences") {
  check_grads({rand_tensor({2, 3, 5}, 13)}, [](Tape& t, const std::vector<Tape::VarId>& v) {
    return weighted_sum(t, t.softmax_lastdim(v[0]));
  });
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  Tensor x = rand_tensor({4, 7}, 14, -5, 5);
  Tape t;
  Tensor p = t.val(t.softmax_lastdim(t.leaf(x)));
  for (size_t r = 0; r < 4; ++r) {
    real s = 0;
    for (size_t c = 0; c < 7; ++c) s += p.v[r * 7 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
  Tensor shifted = x;
  for (size_t r = 0; r < 4; ++r)
    for (size_t c = 0; c < 7; ++c) shifted.v[r * 7 + c] += 100.0 * real(r + 1);
  Tape t2;
  Tensor p2 = t2.val(t2.softmax_lastdim(t2.leaf(shifted)));
  for (size_t i = 0; i < p.size(); ++i) CHECK(p2.v[i] == doctest::Approx(p.v[i]).epsilon(1e-10));
}

TEST_CASE("permute and transpose_last2 roundtrip values and gradients") {
  Tensor x = rand_tensor({2, 3, 4}, 15);
  Tape t;
  Tape::VarId a = t.leaf(x);
  Tensor y = t.val(t.permute(a, {2, 0, 1}));
  CHECK(y.shape == std::vector<size_t>{4, 2, 3});
  CHECK(y.v[0 * 6 + 1 * 3 + 2] == x.v[1 * 12 + 2 * 4 + 0]);  // y[0,1,2] == x[1,2,0]

  check_grads({x}, [](Tape& tp, const std::vector<Tape::VarId>& v) {
    return weighted_sum(tp, tp.transpose_last2(tp.permute(v[0], {1, 0, 2})));
  });
}

TEST_CASE("cross_entropy_mean matches a hand-computed 2x3x5 fixture") {
  // two sequences of three positions over a 5-token vocab; one pad target
  Tensor logits = rand_tensor({2, 3, 5}, 16, -2, 2);
  std::vector<int> targets = {1, 4, 0, 2, 2, 3};  // pad_id = 0 at position 2
  Tape t;
  Tape::VarId l = t.leaf(logits);
  real got = t.val(t.cross_entropy_mean(l, targets, 0)).v[0];

  // independent recomputation: log-sum-exp per row
  real total = 0;
  size_t n = 0;
  for (size_t r = 0; r < 6; ++r) {
    if (targets[r] == 0) continue;
    const real* row = logits.v.data() + r * 5;
    real mx = row[0];
    for (int c = 1; c < 5; ++c) mx = std::max(mx, row[c]);
    real z = 0;
    for (int c = 0; c < 5; ++c) z += std::exp(row[c] - mx);
    total += -(row[targets[r]] - mx - std::log(z));
    ++n;
  }
  CHECK(got == doctest::Approx(total / real(n)).epsilon(1e-10));

  check_grads({logits}, [&](Tape& tp, const std::vector<Tape::VarId>& v) {
    return tp.cross_entropy_mean(v[0], targets, 0);
  });
}

TEST_CASE("cross_entropy_mean rejects all-pad targets") {
  Tape t;
  Tape::VarId l = t.leaf(Tensor::zeros({1, 2, 3}));
  CHECK_THROWS_AS(t.cross_entropy_mean(l, {0, 0}, 0), Error);
}

TEST_CASE("dropout is identity at rate zero and unbiased otherwise") {
  Tensor x = Tensor::full({1000}, 1.0);
  std::mt19937_64 rng(17);
  Tape t;
  Tensor same = t.val(t.dropout(t.leaf(x), 0.0, rng));
  CHECK(same.v == x.v);

  Tape t2;
  Tensor dropped = t2.val(t2.dropout(t2.leaf(x), 0.3, rng));
  real mean = 0;
  size_t zeros = 0;
  for (real e : dropped.v) {
    mean += e;
    if (e == 0) ++zeros;
    else CHECK(e == doctest::Approx(1.0 / 0.7).epsilon(1e-12));  // inverted scaling
  }
  mean /= 1000;
  CHECK(mean == doctest::Approx(1.0).epsilon(0.1));
  CHECK(zeros > 200);
  CHECK(zeros < 400);
}

TEST_CASE("a tape refuses a second backward pass") {
  Tape t;
  Tape::VarId a = t.leaf(Tensor::full({1}, 2.0), true);
  Tape::VarId b = t.scale(a, 3.0);
  t.backward(b);
  CHECK(t.grad(a).v[0] == doctest::Approx(3.0));
  CHECK_THROWS_AS(t.backward(b), Error);
}

TEST_CASE("raw matmul helpers agree with a naive triple loop") {
  Tensor a = rand_tensor({3, 4}, 18), b = rand_tensor({4, 5}, 19);
  std::vector<real> c(15, 0), naive(15, 0);
  mm_nn(a.v.data(), b.v.data(), c.data(), 3, 4, 5, false);
  for (size_t i = 0; i < 3; ++i)
    for (size_t j = 0; j < 5; ++j)
      for (size_t k = 0; k < 4; ++k) naive[i * 5 + j] += a.v[i * 4 + k] * b.v[k * 5 + j];
  for (size_t i = 0; i < 15; ++i) CHECK(c[i] == doctest::Approx(naive[i]).epsilon(1e-12));

  // b stored transposed [n,k]
  Tensor bt = Tensor::zeros({5, 4});
  for (size_t k = 0; k < 4; ++k)
    for (size_t j = 0; j < 5; ++j) bt.v[j * 4 + k] = b.v[k * 5 + j];
  std::fill(c.begin(), c.end(), 0);
  mm_nt(a.v.data(), bt.v.data(), c.data(), 3, 4, 5, false);
  for (size_t i = 0; i < 15; ++i) CHECK(c[i] == doctest::Approx(naive[i]).epsilon(1e-12));

  // a stored transposed [k,m]
  Tensor at = Tensor::zeros({4, 3});
  for (size_t i = 0; i < 3; ++i)
    for (size_t k = 0; k < 4; ++k) at.v[k * 3 + i] = a.v[i * 4 + k];
  std::fill(c.begin(), c.end(), 0);
  mm_tn(at.v.data(), b.v.data(), c.data(), 3, 4, 5, false);
  for (size_t i = 0; i < 15; ++i) CHECK(c[i] == doctest::Approx(naive[i]).epsilon(1e-12));
}
