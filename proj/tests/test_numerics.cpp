#include <cmath>
#include <string>
#include <vector>

#include "doctest.h"
#include "hica/adamw.hpp"
#include "hica/gradcheck.hpp"
#include "hica/model.hpp"
#include "hica/rng.hpp"
#include "hica/tape.hpp"
#include "oracles.hpp"

using namespace hica;

namespace {

AttentionParams make_attention(int d_model, int heads, Rng& rng, bool identity_wo = false) {
  AttentionParams p;
  p.heads = heads;
  p.d_k = d_model / heads;
  for (int h = 0; h < heads; ++h) {
    p.w_q.emplace_back("wq" + std::to_string(h), oracle::random_tensor(d_model, p.d_k, rng, 0.5));
    p.w_k.emplace_back("wk" + std::to_string(h), oracle::random_tensor(d_model, p.d_k, rng, 0.5));
    p.w_v.emplace_back("wv" + std::to_string(h), oracle::random_tensor(d_model, p.d_k, rng, 0.5));
  }
  p.w_o = Param("wo", identity_wo ? Tensor2::identity(d_model)
                                  : oracle::random_tensor(heads * p.d_k, d_model, rng, 0.5));
  return p;
}

std::vector<Tensor2> weights_of(const std::vector<Param>& ps) {
  std::vector<Tensor2> out;
  for (const Param& p : ps) out.push_back(p.value);
  return out;
}

// Runs a graph builder once for analytic grads, then drives the central-
// difference checker with forward-only re-evaluations.
template <class F>
double max_fd_err(const std::vector<Param*>& params, F&& build, int coords = 300,
                  uint64_t seed = 9) {
  Tape t0;
  GradSet analytic = t0.backward(build(t0));
  const auto forward = [&]() {
    Tape t;
    return t.val(build(t)).at(0, 0);
  };
  return finite_diff_check(params, forward, analytic, {1e-6, coords, seed}).max_rel_err;
}

}  // namespace

TEST_CASE("matmul: identity, hand case, shape error") {
  Tape t;
  Rng rng(1);
  const Tensor2 a = oracle::random_tensor(2, 2, rng);
  const ValueId prod = t.matmul(t.input(Tensor2::identity(2)), t.input(a));
  CHECK(max_abs_diff(t.val(prod), a) == 0.0);

  const ValueId hand =
      t.matmul(t.input(Tensor2::from({{1, 2}, {3, 4}})), t.input(Tensor2::from({{1}, {1}})));
  CHECK(t.val(hand).at(0, 0) == doctest::Approx(3));
  CHECK(t.val(hand).at(1, 0) == doctest::Approx(7));

  const ValueId bad_a = t.input(Tensor2(2, 3));
  const ValueId bad_b = t.input(Tensor2(2, 3));
  CHECK_THROWS_WITH_AS(t.matmul(bad_a, bad_b), doctest::Contains("2x3"),
                       std::invalid_argument);
}

TEST_CASE("matmul matches loop oracle on random small shapes") {
  Rng rng(2);
  for (int trial = 0; trial < 40; ++trial) {
    const int m = 1 + static_cast<int>(rng.next_below(8));
    const int k = 1 + static_cast<int>(rng.next_below(8));
    const int n = 1 + static_cast<int>(rng.next_below(8));
    const Tensor2 a = oracle::random_tensor(m, k, rng);
    const Tensor2 b = oracle::random_tensor(k, n, rng);
    Tape t;
    CHECK(max_abs_diff(t.val(t.matmul(t.input(a), t.input(b))), oracle::matmul(a, b)) < 1e-12);
  }
}

TEST_CASE("softmax_rows: symmetry, hand case, overflow stability") {
  Tape t;
  const Tensor2 u = t.val(t.softmax_rows(t.input(Tensor2::from({{0, 0, 0}}))));
  for (int j = 0; j < 3; ++j) CHECK(u.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-12));

  const Tensor2 h = t.val(t.softmax_rows(t.input(Tensor2::from({{0.0, std::log(3.0)}}))));
  CHECK(h.at(0, 0) == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(h.at(0, 1) == doctest::Approx(0.75).epsilon(1e-12));

  const Tensor2 big = t.val(t.softmax_rows(t.input(Tensor2::from({{1000.0, 1000.0}}))));
  CHECK(big.all_finite());
  CHECK(big.at(0, 0) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("softmax_rows rows sum to one and stay in [0,1]") {
  Rng rng(3);
  for (int trial = 0; trial < 25; ++trial) {
    const int r = 1 + static_cast<int>(rng.next_below(6));
    const int c = 1 + static_cast<int>(rng.next_below(9));
    Tape t;
    const Tensor2 y = t.val(t.softmax_rows(t.input(oracle::random_tensor(r, c, rng, 5.0))));
    for (int i = 0; i < r; ++i) {
      double sum = 0.0;
      for (int j = 0; j < c; ++j) {
        CHECK(y.at(i, j) >= 0.0);
        CHECK(y.at(i, j) <= 1.0);
        sum += y.at(i, j);
      }
      CHECK(std::fabs(sum - 1.0) <= 1e-9);
    }
  }
}

TEST_CASE("layer_norm: constant row, hand case, zero gain") {
  Param gain("g", Tensor2::full(1, 2, 1.0));
  Param bias("b", Tensor2(1, 2));
  Tape t;
  const ValueId g = t.param(gain);
  const ValueId b = t.param(bias);

  const Tensor2 flat = t.val(t.layer_norm(t.input(Tensor2::from({{4, 4}})), g, b, 1e-5));
  CHECK(std::fabs(flat.at(0, 0)) < 1e-9);
  CHECK(std::fabs(flat.at(0, 1)) < 1e-9);

  // row [1,3]: mean 2, population sd 1, so entries are -+1/sqrt(1+eps)
  const double expected = 1.0 / std::sqrt(1.0 + 1e-5);
  const Tensor2 y = t.val(t.layer_norm(t.input(Tensor2::from({{1, 3}})), g, b, 1e-5));
  CHECK(y.at(0, 0) == doctest::Approx(-expected).epsilon(1e-12));
  CHECK(y.at(0, 1) == doctest::Approx(expected).epsilon(1e-12));
  CHECK(std::fabs(y.at(0, 1) - 1.0) < 1e-5);

  Param zero_gain("zg", Tensor2(1, 2));
  Param some_bias("sb", Tensor2::from({{0.7, -0.3}}));
  const Tensor2 only_bias = t.val(
      t.layer_norm(t.input(Tensor2::from({{1, 3}})), t.param(zero_gain), t.param(some_bias), 1e-5));
  CHECK(only_bias.at(0, 0) == 0.7);
  CHECK(only_bias.at(0, 1) == -0.3);

  Param short_gain("short", Tensor2(1, 5));
  CHECK_THROWS_AS(t.layer_norm(t.input(Tensor2(2, 3)), t.param(short_gain), b, 1e-5),
                  std::invalid_argument);
}

TEST_CASE("layer_norm matches loop oracle") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const int r = 1 + static_cast<int>(rng.next_below(5));
    const int c = 2 + static_cast<int>(rng.next_below(7));
    const Tensor2 x = oracle::random_tensor(r, c, rng, 2.0);
    Param gain("g", oracle::random_tensor(1, c, rng));
    Param bias("b", oracle::random_tensor(1, c, rng));
    Tape t;
    const Tensor2 got =
        t.val(t.layer_norm(t.input(x), t.param(gain), t.param(bias), 1e-5));
    CHECK(max_abs_diff(got, oracle::layer_norm(x, gain.value, bias.value, 1e-5)) < 1e-12);
  }
}

TEST_CASE("multi_head_attention: single kv token passes value through identity w_o") {
  Rng rng(5);
  const int d = 6;
  AttentionParams p = make_attention(d, 1, rng, /*identity_wo=*/true);
  const Tensor2 q_in = oracle::random_tensor(1, d, rng);
  const Tensor2 kv_in = q_in;
  Tape t;
  AttentionTrace trace;
  const ValueId out = multi_head_attention(t, t.input(q_in), t.input(kv_in), p, &trace);
  // softmax over one key is exactly 1, so the context is the value row and
  // the identity projection passes it through bit-for-bit
  CHECK(trace.scores[0].at(0, 0) == 1.0);
  CHECK(max_abs_diff(t.val(out), trace.context[0]) == 0.0);
  const Tensor2 vrow = oracle::matmul(kv_in, p.w_v[0].value);
  CHECK(max_abs_diff(t.val(out), vrow) < 1e-12);
}

TEST_CASE("multi_head_attention: duplicated key rows act like a single key") {
  Rng rng(6);
  const int d = 8;
  AttentionParams p = make_attention(d, 2, rng);
  const Tensor2 q_in = oracle::random_tensor(3, d, rng);
  const Tensor2 kv1 = oracle::random_tensor(1, d, rng);
  Tensor2 kv2(2, d);
  for (int j = 0; j < d; ++j) {
    kv2.at(0, j) = kv1.at(0, j);
    kv2.at(1, j) = kv1.at(0, j);
  }
  Tape t;
  const Tensor2 one = t.val(multi_head_attention(t, t.input(q_in), t.input(kv1), p));
  const Tensor2 two = t.val(multi_head_attention(t, t.input(q_in), t.input(kv2), p));
  CHECK(max_abs_diff(one, two) < 1e-14);
}

TEST_CASE("multi_head_attention matches loop oracle on random shapes") {
  Rng rng(7);
  for (int heads : {1, 2, 4}) {
    const int d = 8;
    AttentionParams p = make_attention(d, heads, rng);
    const Tensor2 q_in = oracle::random_tensor(3, d, rng);
    const Tensor2 kv_in = oracle::random_tensor(4, d, rng);
    Tape t;
    const Tensor2 got = t.val(multi_head_attention(t, t.input(q_in), t.input(kv_in), p));
    const Tensor2 want = oracle::attention(q_in, kv_in, weights_of(p.w_q), weights_of(p.w_k),
                                           weights_of(p.w_v), p.w_o.value, p.d_k);
    CHECK(got.rows == q_in.rows);
    CHECK(max_abs_diff(got, want) < 1e-12);
  }
}

TEST_CASE("attention outputs stay in the convex hull of value rows when w_o is identity") {
  Rng rng(8);
  const int d = 6;
  AttentionParams p = make_attention(d, 1, rng, /*identity_wo=*/true);
  const Tensor2 q_in = oracle::random_tensor(4, d, rng);
  const Tensor2 kv_in = oracle::random_tensor(5, d, rng);
  Tape t;
  const Tensor2 out = t.val(multi_head_attention(t, t.input(q_in), t.input(kv_in), p));
  const Tensor2 values = oracle::matmul(kv_in, p.w_v[0].value);
  for (int j = 0; j < d; ++j) {
    double lo = values.at(0, j), hi = values.at(0, j);
    for (int r = 1; r < values.rows; ++r) {
      lo = std::min(lo, values.at(r, j));
      hi = std::max(hi, values.at(r, j));
    }
    for (int r = 0; r < out.rows; ++r) {
      CHECK(out.at(r, j) >= lo - 1e-12);
      CHECK(out.at(r, j) <= hi + 1e-12);
    }
  }
}

TEST_CASE("ffn: zero weights, scalar GELU case, loop oracle") {
  Rng rng(9);
  FfnParams zero;
  zero.hidden = 3;
  zero.w1 = Param("w1", Tensor2(2, 3));
  zero.b1 = Param("b1", Tensor2(1, 3));
  zero.w2 = Param("w2", Tensor2(3, 2));
  zero.b2 = Param("b2", Tensor2(1, 2));
  Tape t;
  const Tensor2 z = t.val(ffn(t, t.input(oracle::random_tensor(2, 2, rng)), zero));
  CHECK(max_abs_diff(z, Tensor2(2, 2)) == 0.0);

  FfnParams unit;
  unit.hidden = 1;
  unit.w1 = Param("w1", Tensor2::full(1, 1, 1.0));
  unit.b1 = Param("b1", Tensor2(1, 1));
  unit.w2 = Param("w2", Tensor2::full(1, 1, 1.0));
  unit.b2 = Param("b2", Tensor2(1, 1));
  const Tensor2 g2 = t.val(ffn(t, t.input(Tensor2::from({{2.0}})), unit));
  CHECK(g2.at(0, 0) == doctest::Approx(1.9545).epsilon(1e-4));
  CHECK(g2.at(0, 0) == doctest::Approx(1.0 + std::erf(std::sqrt(2.0))).epsilon(1e-12));

  for (int trial = 0; trial < 10; ++trial) {
    const int rows = 1 + static_cast<int>(rng.next_below(4));
    const int d = 2 + static_cast<int>(rng.next_below(6));
    const int hidden = 1 + static_cast<int>(rng.next_below(8));
    FfnParams p;
    p.hidden = hidden;
    p.w1 = Param("w1", oracle::random_tensor(d, hidden, rng));
    p.b1 = Param("b1", oracle::random_tensor(1, hidden, rng));
    p.w2 = Param("w2", oracle::random_tensor(hidden, d, rng));
    p.b2 = Param("b2", oracle::random_tensor(1, d, rng));
    const Tensor2 x = oracle::random_tensor(rows, d, rng);
    Tape tt;
    CHECK(max_abs_diff(tt.val(ffn(tt, tt.input(x), p)),
                       oracle::ffn(x, p.w1.value, p.b1.value, p.w2.value, p.b2.value)) < 1e-12);
  }
}

TEST_CASE("backward: sum gives ones, absent parameters stay absent, non-scalar root rejected") {
  Rng rng(10);
  Param a("a", oracle::random_tensor(3, 2, rng));
  Param unused("unused", oracle::random_tensor(2, 2, rng));
  Tape t;
  const ValueId loss = t.sum_all(t.param(a));
  GradSet g = t.backward(loss);
  REQUIRE(g.contains(a));
  CHECK(max_abs_diff(*g.find(a), Tensor2::full(3, 2, 1.0)) == 0.0);
  CHECK_FALSE(g.contains(unused));
  CHECK(g.size() == 1);

  Tape t2;
  CHECK_THROWS_AS(t2.backward(t2.param(a)), std::invalid_argument);
}

TEST_CASE("backward: matmul gradient matches finite differences") {
  Rng rng(11);
  Param a("a", oracle::random_tensor(3, 4, rng));
  Param b("b", oracle::random_tensor(4, 2, rng));
  const double err = max_fd_err({&a, &b}, [&](Tape& t) {
    return t.sum_all(t.matmul(t.param(a), t.param(b)));
  });
  CHECK(err < 1e-7);
}

TEST_CASE("every registered op passes the finite-difference check") {
  Rng rng(12);
  const Tensor2 probe = oracle::random_tensor(3, 5, rng);
  const Tensor2 probe_wide = oracle::random_tensor(3, 10, rng);

  Param x("x", oracle::random_tensor(3, 5, rng));
  Param y("y", oracle::random_tensor(3, 5, rng));
  Param row("row", oracle::random_tensor(1, 5, rng));
  Param gain("gain", oracle::random_tensor(1, 5, rng));
  Param bias("bias", oracle::random_tensor(1, 5, rng));

  auto weigh = [&](Tape& t, ValueId v, const Tensor2& w) {
    return t.sum_all(t.hadamard(v, t.input(w)));
  };

  CHECK(max_fd_err({&x}, [&](Tape& t) { return weigh(t, t.softmax_rows(t.param(x)), probe); }) <
        1e-5);
  CHECK(max_fd_err({&x, &gain, &bias}, [&](Tape& t) {
          return weigh(t, t.layer_norm(t.param(x), t.param(gain), t.param(bias), 1e-5), probe);
        }) < 1e-5);
  CHECK(max_fd_err({&x}, [&](Tape& t) { return weigh(t, t.gelu(t.param(x)), probe); }) < 1e-5);
  CHECK(max_fd_err({&x, &y}, [&](Tape& t) {
          return weigh(t, t.hadamard(t.param(x), t.param(y)), probe);
        }) < 1e-5);
  CHECK(max_fd_err({&x, &row}, [&](Tape& t) {
          return weigh(t, t.add_row(t.param(x), t.param(row)), probe);
        }) < 1e-5);
  CHECK(max_fd_err({&x, &y}, [&](Tape& t) {
          return weigh(t, t.concat_cols({t.param(x), t.param(y)}), probe_wide);
        }) < 1e-5);
  const Tensor2 probe_sq = oracle::random_tensor(3, 3, rng);
  CHECK(max_fd_err({&x, &y}, [&](Tape& t) {
          return weigh(t, t.matmul_nt(t.param(x), t.param(y)), probe_sq);
        }) < 1e-5);
  const Tensor2 probe_row = oracle::random_tensor(1, 5, rng);
  CHECK(max_fd_err({&x}, [&](Tape& t) {
          return weigh(t, t.mean_rows(t.scale(t.param(x), 1.7)), probe_row);
        }) < 1e-5);
  Param x2("x2", oracle::random_tensor(2, 5, rng));
  const Tensor2 probe_tall = oracle::random_tensor(5, 5, rng);
  CHECK(max_fd_err({&x, &x2}, [&](Tape& t) {
          return weigh(t, t.concat_rows({t.param(x), t.param(x2)}), probe_tall);
        }) < 1e-5);
}

TEST_CASE("adamw: zero grad no-op, hand-unrolled step, absent param untouched") {
  Param theta("theta", Tensor2::full(1, 1, 0.5));
  Param other("other", Tensor2::full(1, 1, -0.25));
  const Tensor2 other_before = other.value;

  AdamWState st;
  st.cfg.learning_rate = 0.1;
  st.cfg.weight_decay = 0.0;

  GradSet zero;
  zero.entries.emplace_back(&theta, Tensor2(1, 1));
  adamw_step({&theta, &other}, zero, st);
  CHECK(theta.value.at(0, 0) == 0.5);
  CHECK(other.value.data == other_before.data);

  AdamWState st2;
  st2.cfg.learning_rate = 0.1;
  GradSet one;
  one.entries.emplace_back(&theta, Tensor2::full(1, 1, 1.0));
  adamw_step({&theta, &other}, one, st2);
  // m-hat = v-hat = 1 after bias correction, so the step is -lr/(1+eps)
  const double expected = 0.5 - 0.1 * (1.0 / (1.0 + 1e-8));
  CHECK(theta.value.at(0, 0) == doctest::Approx(expected).epsilon(1e-14));
  CHECK(other.value.data == other_before.data);  // bitwise untouched

  GradSet mismatched;
  mismatched.entries.emplace_back(&theta, Tensor2(2, 2));
  CHECK_THROWS_AS(adamw_step({&theta}, mismatched, st2), std::invalid_argument);
}

TEST_CASE("adamw: decoupled weight decay shrinks parameters independently of the gradient") {
  Param theta("theta", Tensor2::full(1, 1, 1.0));
  AdamWState st;
  st.cfg.learning_rate = 0.5;
  st.cfg.weight_decay = 0.1;
  GradSet zero;
  zero.entries.emplace_back(&theta, Tensor2(1, 1));
  adamw_step({&theta}, zero, st);
  CHECK(theta.value.at(0, 0) == doctest::Approx(1.0 - 0.5 * 0.1).epsilon(1e-14));
}

TEST_CASE("finite_diff_check: exact quadratic, zero-parameter model") {
  Rng rng(13);
  Param theta("theta", oracle::random_tensor(4, 7, rng));
  Tape t0;
  const ValueId loss0 = t0.scale(t0.sum_all(t0.hadamard(t0.param(theta), t0.param(theta))), 0.5);
  GradSet analytic = t0.backward(loss0);
  const auto forward = [&]() {
    Tape t;
    return t.val(t.scale(t.sum_all(t.hadamard(t.param(theta), t.param(theta))), 0.5)).at(0, 0);
  };
  // truncation vanishes for a quadratic, so a wider eps keeps round-off
  // out of the way of the 1e-9 bar
  const FdReport rep = finite_diff_check({&theta}, forward, analytic, {1e-4, 200, 3});
  CHECK(rep.coords_checked == 28);
  CHECK(rep.max_rel_err < 1e-9);

  const FdReport empty = finite_diff_check({}, [] { return 0.0; }, GradSet{}, {});
  CHECK(empty.max_rel_err == 0.0);
  CHECK(empty.coords_checked == 0);

  CHECK_THROWS_AS(finite_diff_check({&theta}, forward, analytic, {-1.0, 10, 0}),
                  std::invalid_argument);
}

TEST_CASE("seeded rng and model init are reproducible") {
  Rng a(99), b(99);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

  const std::vector<std::string> vocab{"yes", "no", "no selection", "mild"};
  ModelDims dims;
  dims.d_model = 16;
  dims.heads = 2;
  dims.ffn_hidden = 8;
  FeaturizerConfig feat;
  feat.d_model = 16;
  Model m1 = init_model(dims, feat, default_prompts(), {}, vocab, 77);
  Model m2 = init_model(dims, feat, default_prompts(), {}, vocab, 77);
  auto p1 = m1.trainable_params();
  auto p2 = m2.trainable_params();
  REQUIRE(p1.size() == p2.size());
  for (size_t i = 0; i < p1.size(); ++i) {
    CHECK(p1[i]->name == p2[i]->name);
    CHECK(p1[i]->value.data == p2[i]->value.data);
  }
}
