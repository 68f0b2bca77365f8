#include <doctest.h>

#include <cmath>
#include <random>
#include <vector>

#include "oracles.hpp"
#include "wsikit/tensor.hpp"

using namespace wsikit;
using ad::Tensor;

namespace {

std::vector<double> random_values(std::mt19937_64& rng, std::size_t n, double lo = -2.0,
                                  double hi = 2.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(n);
  for (double& x : v) x = dist(rng);
  return v;
}

std::vector<double> to_vec(std::span<const double> s) { return {s.begin(), s.end()}; }

}  // namespace

TEST_CASE("tensor construction and invariants") {
  auto t = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.size() == 6);
  CHECK(t.dim(0) == 2);
  CHECK(t.dim(1) == 3);
  CHECK(t.at(4) == 5.0);

  CHECK_THROWS_AS(Tensor::from({2, 2}, {1, 2, 3}), ad::ShapeError);
  CHECK_THROWS_AS(Tensor::from({1}, {std::nan("")}), ad::NumericError);
  CHECK_THROWS_AS(Tensor::full({2}, INFINITY), ad::NumericError);
}

TEST_CASE("matmul identity and hand-computed cases") {
  ad::Tape tape;
  auto eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  auto v = Tensor::from({2, 1}, {3, 4});
  auto r = ad::matmul(tape, eye, v);
  CHECK(r.at(0) == 3.0);
  CHECK(r.at(1) == 4.0);

  auto a = Tensor::from({1, 2}, {1, 2});
  auto b = Tensor::from({2, 1}, {3, 4});
  CHECK(ad::matmul(tape, a, b).item() == 11.0);

  CHECK_THROWS_AS(ad::matmul(tape, a, a), ad::ShapeError);
}

TEST_CASE("matmul matches triple-loop oracle") {
  std::mt19937_64 rng(11);
  for (int rep = 0; rep < 20; ++rep) {
    auto av = random_values(rng, 12);
    auto bv = random_values(rng, 8);
    ad::Tape tape;
    auto got = ad::matmul(tape, Tensor::from({3, 4}, av), Tensor::from({4, 2}, bv));
    auto want = oracle::matmul(av, bv, 3, 4, 2);
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(got.at(i) == doctest::Approx(want[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("elementwise basics") {
  ad::Tape tape;
  auto x = Tensor::from({3}, {-1, 0, 2});
  auto r = ad::relu(tape, x);
  CHECK(to_vec(r.values()) == std::vector<double>{0, 0, 2});

  auto a = ad::abs(tape, Tensor::from({2}, {-3, 4}));
  CHECK(to_vec(a.values()) == std::vector<double>{3, 4});

  CHECK(ad::sigmoid(tape, Tensor::scalar(0.0)).item() == 0.5);

  // broadcast: scalar with tensor, both directions
  auto t = Tensor::from({2}, {1, 2});
  auto s = Tensor::scalar(10.0);
  CHECK(to_vec(ad::add(tape, t, s).values()) == std::vector<double>{11, 12});
  CHECK(to_vec(ad::sub(tape, s, t).values()) == std::vector<double>{9, 8});
  CHECK(to_vec(ad::mul(tape, s, t).values()) == std::vector<double>{10, 20});

  CHECK_THROWS_AS(ad::add(tape, Tensor::from({2}, {1, 2}), Tensor::from({3}, {1, 2, 3})),
                  ad::ShapeError);
}

TEST_CASE("softmax contract") {
  ad::Tape tape;
  auto half = ad::softmax(tape, Tensor::from({2}, {0, 0}));
  CHECK(half.at(0) == 0.5);
  CHECK(half.at(1) == 0.5);

  auto big = ad::softmax(tape, Tensor::from({3}, {1000, 1000, 1000}));
  for (std::size_t i = 0; i < 3; ++i) CHECK(big.at(i) == doctest::Approx(1.0 / 3).epsilon(1e-15));

  // direct exp/sum evaluation at small magnitude
  auto out = ad::softmax(tape, Tensor::from({3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(out.at(0) == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK(out.at(1) == doctest::Approx(std::exp(2.0) / z).epsilon(1e-12));
  CHECK(out.at(2) == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));

  CHECK_THROWS_AS(ad::softmax(tape, Tensor::from({0}, {})), ad::ShapeError);
}

TEST_CASE("softmax shift invariance") {
  std::mt19937_64 rng(5);
  for (int rep = 0; rep < 30; ++rep) {
    auto v = random_values(rng, 7, -3, 3);
    auto shifted = v;
    std::uniform_real_distribution<double> cdist(-50.0, 50.0);
    const double c = cdist(rng);
    for (double& x : shifted) x += c;

    ad::Tape tape;
    auto p = ad::softmax(tape, Tensor::from({7}, v));
    auto q = ad::softmax(tape, Tensor::from({7}, shifted));
    double total = 0.0;
    for (std::size_t i = 0; i < 7; ++i) {
      CHECK(std::fabs(p.at(i) - q.at(i)) < 1e-12);
      total += p.at(i);
    }
    CHECK(std::fabs(total - 1.0) < 1e-12);
  }
}

TEST_CASE("min_k / max_k values, order and tie rule") {
  ad::Tape tape;
  auto x = Tensor::from({5}, {3, 1, -2, 0, 5});
  auto top = ad::max_k(tape, x, 2);
  CHECK(to_vec(top.values.values()) == std::vector<double>{5, 3});
  CHECK(top.indices == std::vector<std::size_t>{4, 0});

  auto bot = ad::min_k(tape, x, 2);
  CHECK(to_vec(bot.values.values()) == std::vector<double>{-2, 0});
  CHECK(bot.indices == std::vector<std::size_t>{2, 3});

  auto ties = Tensor::from({4}, {7, 7, 7, 7});
  CHECK(ad::max_k(tape, ties, 2).indices == std::vector<std::size_t>{0, 1});
  CHECK(ad::min_k(tape, ties, 2).indices == std::vector<std::size_t>{0, 1});

  CHECK_THROWS_AS(ad::max_k(tape, x, 6), ad::ShapeError);
}

TEST_CASE("min_k / max_k match full-sort oracle") {
  std::mt19937_64 rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    auto v = random_values(rng, 50, -10, 10);
    ad::Tape tape;
    auto x = Tensor::from({50}, v);
    CHECK(to_vec(ad::max_k(tape, x, 5).values.values()) == oracle::sorted_largest(v, 5));
    CHECK(to_vec(ad::min_k(tape, x, 5).values.values()) == oracle::sorted_smallest(v, 5));
  }
}

TEST_CASE("backward on sum gives ones") {
  ad::Tape tape;
  auto x = Tensor::from({4}, {1, 2, 3, 4}, /*requires_grad=*/true);
  auto s = ad::sum(tape, x);
  tape.backward(s);
  CHECK(to_vec(x.grad()) == std::vector<double>{1, 1, 1, 1});
}

TEST_CASE("backward through sigmoid(w.x) at w = 0") {
  ad::Tape tape;
  auto w = Tensor::zeros({1, 3}, /*requires_grad=*/true);
  auto x = Tensor::from({3, 1}, {1, 2, 3});
  auto y = ad::sigmoid(tape, ad::matmul(tape, w, x));
  tape.backward(y);
  // sigmoid'(0) = 0.25
  CHECK(to_vec(w.grad()) == std::vector<double>{0.25, 0.5, 0.75});
}

TEST_CASE("backward errors") {
  ad::Tape tape;
  auto x = Tensor::from({2}, {1, 2}, true);
  auto y = ad::mul(tape, x, x);
  CHECK_THROWS_AS(tape.backward(y), ad::TapeError);  // non-scalar

  ad::Tape other;
  auto s = ad::sum(tape, y);
  CHECK_THROWS_AS(other.backward(s), ad::TapeError);  // not on that tape
  CHECK_THROWS_AS(tape.backward(x), ad::TapeError);   // leaf was never produced
  CHECK_NOTHROW(tape.backward(s));
}

TEST_CASE("backward resets between calls and zeroes non-ancestors") {
  ad::Tape tape;
  auto x = Tensor::from({2}, {1, 2}, true);
  auto unused = Tensor::from({2}, {5, 5}, true);
  auto double_x = ad::mul(tape, x, Tensor::scalar(2.0));
  auto bystander = ad::mul(tape, unused, Tensor::scalar(3.0));
  auto s = ad::sum(tape, double_x);
  tape.backward(s);
  tape.backward(s);  // same result, not accumulated twice
  CHECK(to_vec(x.grad()) == std::vector<double>{2, 2});
  CHECK(to_vec(unused.grad()) == std::vector<double>{0, 0});
  CHECK(bystander.defined());
}

TEST_CASE("backward is linear: grad of sum equals sum of per-output grads") {
  std::mt19937_64 rng(23);
  auto v = random_values(rng, 4);
  auto w = random_values(rng, 4);

  auto grad_of = [&](bool combined, std::size_t which) {
    ad::Tape tape;
    auto x = Tensor::from({4}, v, true);
    auto c = Tensor::from({4}, w);
    auto prod = ad::mul(tape, ad::tanh(tape, x), c);
    if (combined) {
      auto s = ad::sum(tape, prod);
      tape.backward(s);
    } else {
      auto s = ad::select(tape, prod, which);
      tape.backward(s);
    }
    return to_vec(x.grad());
  };

  auto total = grad_of(true, 0);
  std::vector<double> accum(4, 0.0);
  for (std::size_t j = 0; j < 4; ++j) {
    auto g = grad_of(false, j);
    for (std::size_t i = 0; i < 4; ++i) accum[i] += g[i];
  }
  for (std::size_t i = 0; i < 4; ++i) CHECK(total[i] == doctest::Approx(accum[i]).epsilon(1e-12));
}

TEST_CASE("min_k/max_k backward routes gradient only to selected indices") {
  std::mt19937_64 rng(31);
  auto v = random_values(rng, 12, -5, 5);
  ad::Tape tape;
  auto x = Tensor::from({12}, v, true);
  auto top = ad::max_k(tape, x, 3);
  auto s = ad::sum(tape, top.values);
  tape.backward(s);
  auto g = to_vec(x.grad());
  for (std::size_t i = 0; i < 12; ++i) {
    const bool selected =
        std::find(top.indices.begin(), top.indices.end(), i) != top.indices.end();
    CHECK(g[i] == (selected ? 1.0 : 0.0));
  }
}

TEST_CASE("non-finite production raises at the offending op") {
  ad::Tape tape;
  auto big = Tensor::full({2}, 1e308);
  CHECK_THROWS_AS(ad::add(tape, big, big), ad::NumericError);
  CHECK_THROWS_AS(ad::log(tape, Tensor::from({2}, {1.0, 0.0})), ad::NumericError);
  CHECK_THROWS_AS(ad::log(tape, Tensor::scalar(-1.0)), ad::NumericError);
}

// Every primitive against central finite differences at random points.
// Points within 1e-6 of relu/abs/clamp kinks or top-k ties are excluded by
// construction (resampled).
TEST_CASE("primitive gradients match finite differences") {
  std::mt19937_64 rng(1234);
  const double h = 1e-5;

  // Builds a scalar: weighted sum of op output, weights fixed per probe.
  auto check_unary = [&](auto opfn, double lo, double hi, double avoid_kink_at) {
    for (int rep = 0; rep < 25; ++rep) {
      auto v = random_values(rng, 6, lo, hi);
      for (double& x : v) {
        while (std::fabs(x - avoid_kink_at) < 1e-4) x += 1e-3;
      }
      auto wts = random_values(rng, 6);

      ad::Tape tape;
      auto x = Tensor::from({6}, v, true);
      auto y = opfn(tape, x);
      auto s = ad::sum(tape, ad::mul(tape, y, Tensor::from({6}, wts)));
      tape.backward(s);
      auto analytic = to_vec(x.grad());

      auto f = [&](std::span<const double> pt) {
        ad::Tape t2;
        auto xx = Tensor::from({6}, {pt.begin(), pt.end()});
        auto yy = opfn(t2, xx);
        double acc = 0.0;
        for (std::size_t i = 0; i < 6; ++i) acc += yy.at(i) * wts[i];
        return acc;
      };
      auto numeric = oracle::fd_gradient(f, v, h);
      CHECK(oracle::max_grad_err(analytic, numeric) < 1e-4);
    }
  };

  check_unary([](ad::Tape& t, const Tensor& x) { return ad::relu(t, x); }, -2, 2, 0.0);
  check_unary([](ad::Tape& t, const Tensor& x) { return ad::tanh(t, x); }, -2, 2, 1e9);
  check_unary([](ad::Tape& t, const Tensor& x) { return ad::sigmoid(t, x); }, -4, 4, 1e9);
  check_unary([](ad::Tape& t, const Tensor& x) { return ad::abs(t, x); }, -2, 2, 0.0);
  check_unary([](ad::Tape& t, const Tensor& x) { return ad::log(t, x); }, 0.2, 3, 1e9);
  check_unary([](ad::Tape& t, const Tensor& x) { return ad::clamp_min(t, x, 0.5); }, -2, 2, 0.5);
  check_unary([](ad::Tape& t, const Tensor& x) { return ad::softmax(t, x); }, -3, 3, 1e9);

  // matmul: d(sum(w ⊙ (A·B)))/dA and /dB
  for (int rep = 0; rep < 25; ++rep) {
    auto av = random_values(rng, 6);
    auto bv = random_values(rng, 12);
    auto wts = random_values(rng, 8);
    auto scalarize = [&](std::span<const double> aa, std::span<const double> bb) {
      ad::Tape t;
      auto prod = ad::matmul(t, Tensor::from({2, 3}, {aa.begin(), aa.end()}),
                             Tensor::from({3, 4}, {bb.begin(), bb.end()}));
      double acc = 0.0;
      for (std::size_t i = 0; i < 8; ++i) acc += prod.at(i) * wts[i];
      return acc;
    };

    ad::Tape tape;
    auto a = Tensor::from({2, 3}, av, true);
    auto b = Tensor::from({3, 4}, bv, true);
    auto s = ad::sum(tape, ad::mul(tape, ad::matmul(tape, a, b), Tensor::from({2, 4}, wts)));
    tape.backward(s);

    auto fd_a = oracle::fd_gradient([&](std::span<const double> p) { return scalarize(p, bv); },
                                    av, h);
    auto fd_b = oracle::fd_gradient([&](std::span<const double> p) { return scalarize(av, p); },
                                    bv, h);
    CHECK(oracle::max_grad_err(to_vec(a.grad()), fd_a) < 1e-4);
    CHECK(oracle::max_grad_err(to_vec(b.grad()), fd_b) < 1e-4);
  }

  // top-k away from ties, plus mean/select/concat/reshape/add_rowvec in one graph
  for (int rep = 0; rep < 25; ++rep) {
    auto v = random_values(rng, 9, -5, 5);
    std::sort(v.begin(), v.end());
    for (std::size_t i = 1; i < v.size(); ++i) {
      if (v[i] - v[i - 1] < 1e-3) v[i] += 1e-2 * static_cast<double>(i);
    }
    std::shuffle(v.begin(), v.end(), rng);

    auto f = [&](std::span<const double> pt) {
      ad::Tape t;
      auto x = Tensor::from({9}, {pt.begin(), pt.end()});
      auto top = ad::max_k(t, x, 3);
      auto bot = ad::min_k(t, x, 2);
      std::vector<Tensor> parts{top.values, bot.values};
      auto joined = ad::concat(t, parts);
      auto mat = ad::reshape(t, joined, {1, 5});
      auto shifted = ad::add_rowvec(t, mat, Tensor::from({5}, {0.1, 0.2, 0.3, 0.4, 0.5}));
      auto mixed = ad::add(t, ad::mean(t, shifted), ad::select(t, x, 4));
      return mixed.item();
    };

    ad::Tape tape;
    auto x = Tensor::from({9}, v, true);
    auto top = ad::max_k(tape, x, 3);
    auto bot = ad::min_k(tape, x, 2);
    std::vector<Tensor> parts{top.values, bot.values};
    auto joined = ad::concat(tape, parts);
    auto mat = ad::reshape(tape, joined, {1, 5});
    auto shifted = ad::add_rowvec(tape, mat, Tensor::from({5}, {0.1, 0.2, 0.3, 0.4, 0.5}));
    auto mixed = ad::add(tape, ad::mean(tape, shifted), ad::select(tape, x, 4));
    tape.backward(mixed);

    auto numeric = oracle::fd_gradient(f, v, h);
    CHECK(oracle::max_grad_err(to_vec(x.grad()), numeric) < 1e-4);
  }
}
