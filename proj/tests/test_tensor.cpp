#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <random>

#include "m3d/gradcheck.hpp"
#include "m3d/tensor.hpp"

using namespace m3d;

namespace {

Tensor<double> randt(Shape shape, std::mt19937_64& rng, double lo = -1.0,
                     double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor<double>::from(std::move(shape), std::move(v));
}

using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// h=1e-5 keeps roundoff below the 1e-6 gate for these O(10)-magnitude
// test functions; the checker's default 1e-6 is noisier than needed here.
double fd_err(std::vector<Tensor<double>> inputs, const Fn& f) {
  auto res = finite_diff_check<double>(std::move(inputs), f, 1e-6, 1e-5);
  return res.max_rel_err;
}

// For compositions that are polynomial in the inputs the central difference
// has no truncation term, so a bigger step only shrinks roundoff.
double fd_err_poly(std::vector<Tensor<double>> inputs, const Fn& f) {
  auto res = finite_diff_check<double>(std::move(inputs), f, 1e-6, 1e-4);
  return res.max_rel_err;
}

}  // namespace

TEST_CASE("matmul identity and hand case") {
  auto I = Tensor<double>::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  auto X = Tensor<double>::from({3, 2}, {1, 2, 3, 4, 5, 6});
  auto Y = matmul(I, X);
  for (std::size_t i = 0; i < 6; ++i) CHECK(Y.data()[i] == X.data()[i]);

  auto A = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto v = Tensor<double>::from({2, 1}, {1, 1});
  auto r = matmul(A, v);
  CHECK(r.data()[0] == doctest::Approx(3.0));
  CHECK(r.data()[1] == doctest::Approx(7.0));
}

TEST_CASE("matmul gradient: analytic ones*b^T and finite differences") {
  std::mt19937_64 rng(7);
  auto a = randt({4, 5}, rng);
  auto b = randt({5, 6}, rng);
  a.set_tracked(true);
  {
    Tape<double> tape;
    auto loss = sum_all(matmul(a, b));
    tape.backward(loss);
    auto ga = tape.grad(a);
    // d sum(ab)/da[i,k] = sum_j b[k,j]
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t k = 0; k < 5; ++k) {
        double want = 0;
        for (std::size_t j = 0; j < 6; ++j) want += b.data()[k * 6 + j];
        CHECK(ga[i * 5 + k] == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
  CHECK(fd_err({a, b}, [](const std::vector<Tensor<double>>& in) {
          return sum_all(matmul(in[0], in[1]));
        }) <= 1e-6);
}

TEST_CASE("batched matmul against per-slice products") {
  std::mt19937_64 rng(11);
  auto a = randt({3, 2, 4}, rng);
  auto b = randt({3, 4, 5}, rng);
  auto y = matmul(a, b);
  REQUIRE(y.shape() == Shape{3, 2, 5});
  for (std::size_t s = 0; s < 3; ++s) {
    for (std::size_t i = 0; i < 2; ++i) {
      for (std::size_t j = 0; j < 5; ++j) {
        double want = 0;
        for (std::size_t k = 0; k < 4; ++k) {
          want += a.data()[s * 8 + i * 4 + k] * b.data()[s * 20 + k * 5 + j];
        }
        CHECK(y.data()[s * 10 + i * 5 + j] == doctest::Approx(want).epsilon(1e-12));
      }
    }
  }
  CHECK(fd_err({a, b}, [](const std::vector<Tensor<double>>& in) {
          return sum_all(matmul(in[0], in[1]));
        }) <= 1e-6);
  // batched x shared weight
  auto w = randt({4, 5}, rng);
  CHECK(fd_err({a, w}, [](const std::vector<Tensor<double>>& in) {
          return sum_all(matmul(in[0], in[1]));
        }) <= 1e-6);
}

TEST_CASE("layernorm hand cases") {
  auto g = Tensor<double>::full({4}, 1.0);
  auto be = Tensor<double>::zeros({4});
  auto x = Tensor<double>::full({4}, 5.0);
  auto y = layernorm(x, g, be, 1e-5);
  for (std::size_t i = 0; i < 4; ++i) CHECK(y.data()[i] == doctest::Approx(0.0));

  auto g2 = Tensor<double>::full({2}, 1.0);
  auto b2 = Tensor<double>::zeros({2});
  auto x2 = Tensor<double>::from({2}, {1.0, -1.0});
  auto y2 = layernorm(x2, g2, b2, 1e-12);
  CHECK(y2.data()[0] == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(y2.data()[1] == doctest::Approx(-1.0).epsilon(1e-6));
}

TEST_CASE("layernorm standardizes each row") {
  std::mt19937_64 rng(3);
  auto x = randt({8, 384}, rng, -2.0, 2.0);
  auto g = Tensor<double>::full({384}, 1.0);
  auto b = Tensor<double>::zeros({384});
  auto y = layernorm(x, g, b, 1e-12);
  for (std::size_t r = 0; r < 8; ++r) {
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < 384; ++i) mean += y.data()[r * 384 + i];
    mean /= 384;
    for (std::size_t i = 0; i < 384; ++i) {
      double d = y.data()[r * 384 + i] - mean;
      var += d * d;
    }
    var /= 384;
    CHECK(std::abs(mean) <= 1e-6);
    CHECK(std::abs(var - 1.0) <= 1e-4);
  }
}

TEST_CASE("layernorm gradient vs finite differences") {
  std::mt19937_64 rng(5);
  auto x = randt({8, 16}, rng);
  auto g = randt({16}, rng, 0.5, 1.5);
  auto b = randt({16}, rng);
  CHECK(fd_err({x, g, b}, [](const std::vector<Tensor<double>>& in) {
          auto y = layernorm(in[0], in[1], in[2], 1e-5);
          return sum_all(mul(y, y));
        }) <= 1e-6);
}

TEST_CASE("softmax hand cases and stability") {
  auto y = softmax(Tensor<double>::from({2}, {0.0, 0.0}), 0);
  CHECK(y.data()[0] == doctest::Approx(0.5));
  CHECK(y.data()[1] == doctest::Approx(0.5));

  auto y2 = softmax(Tensor<double>::from({2}, {0.0, std::log(3.0)}), 0);
  CHECK(y2.data()[0] == doctest::Approx(0.25));
  CHECK(y2.data()[1] == doctest::Approx(0.75));

  auto y3 = softmax(Tensor<double>::from({2}, {1000.0, 1000.0}), 0);
  CHECK(y3.data()[0] == doctest::Approx(0.5));
  CHECK(y3.data()[1] == doctest::Approx(0.5));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    auto x = randt({4, 7}, rng, -5.0, 5.0);
    auto y = softmax(x, 1);
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0;
      for (std::size_t i = 0; i < 7; ++i) {
        double v = y.data()[r * 7 + i];
        CHECK(v > 0);
        s += v;
      }
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
    auto ys = softmax(add_scalar(x, 3.25), 1);
    for (std::size_t i = 0; i < 28; ++i) {
      CHECK(ys.data()[i] == doctest::Approx(y.data()[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("elementwise hand cases") {
  auto f = flip(Tensor<double>::from({3}, {1, 2, 3}), 0);
  CHECK(f.data()[0] == 3);
  CHECK(f.data()[1] == 2);
  CHECK(f.data()[2] == 1);

  CHECK(softplus(Tensor<double>::scalar(0.0)).item() ==
        doctest::Approx(std::log(2.0)));

  CHECK(cross_entropy(Tensor<double>::from({3}, {0, 0, 0}), 1).item() ==
        doctest::Approx(std::log(3.0)));
}

TEST_CASE("flip and concat are exact") {
  std::mt19937_64 rng(17);
  auto x = randt({3, 4, 5}, rng);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto y = flip(flip(x, axis), axis);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  }
  auto a = randt({2, 3}, rng);
  auto b = randt({2, 5}, rng);
  auto c = concat(a, b, 1);
  REQUIRE(c.shape() == Shape{2, 8});
  auto back_a = gather(c, {0, 1, 2}, 1);
  auto back_b = gather(c, {3, 4, 5, 6, 7}, 1);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(back_a.data()[i] == a.data()[i]);
  for (std::size_t i = 0; i < b.numel(); ++i) CHECK(back_b.data()[i] == b.data()[i]);
}

TEST_CASE("backward basics") {
  auto x = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  {
    Tape<double> tape;
    tape.backward(sum_all(x));
    auto g = tape.grad(x);
    for (double v : g) CHECK(v == 1.0);
  }
  auto x2 = Tensor<double>::from({2}, {1, 2}, true);
  {
    Tape<double> tape;
    tape.backward(sum_all(mul(x2, x2)));
    auto g = tape.grad(x2);
    CHECK(g[0] == doctest::Approx(2.0));
    CHECK(g[1] == doctest::Approx(4.0));
  }
}

TEST_CASE("backward error cases") {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  Tape<double> tape;
  auto loss = sum_all(mul(x, x));
  SUBCASE("non-scalar loss") {
    CHECK_THROWS_AS(tape.backward(mul(x, x)), ValidationError);
  }
  SUBCASE("double backward") {
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), ValidationError);
  }
  SUBCASE("empty tape") {
    Tape<double> empty;
    CHECK_THROWS_AS(empty.backward(Tensor<double>::scalar(0.0)), ValidationError);
  }
}

TEST_CASE("shared parameter gets independent grads on separate tapes") {
  auto w = Tensor<double>::from({2}, {3, 4}, true);
  Tape<double> t1;
  auto l1 = sum_all(mul(w, w));
  t1.backward(l1);
  {
    Tape<double> t2;
    auto l2 = sum_all(w);
    t2.backward(l2);
    auto g2 = t2.grad(w);
    CHECK(g2[0] == 1.0);
    CHECK(g2[1] == 1.0);
  }
  auto g1 = t1.grad(w);
  CHECK(g1[0] == doctest::Approx(6.0));
  CHECK(g1[1] == doctest::Approx(8.0));
}

TEST_CASE("finite_diff_check on trivial functions") {
  std::mt19937_64 rng(19);
  auto x = randt({3, 4}, rng);
  auto r1 = finite_diff_check<double>(
      {x}, [](const std::vector<Tensor<double>>& in) { return sum_all(in[0]); },
      1e-10);
  CHECK(r1.ok);
  // central differences are exact for quadratics, so only roundoff remains;
  // h=1e-4 keeps that below 1e-10
  auto r2 = finite_diff_check<double>(
      {x},
      [](const std::vector<Tensor<double>>& in) {
        return sum_all(mul(in[0], in[0]));
      },
      1e-10, 1e-4);
  CHECK(r2.ok);
  CHECK(r2.max_rel_err <= 1e-10);
}

TEST_CASE("finite_diff_check max_coords probes a subset") {
  std::mt19937_64 rng(23);
  auto x = randt({10, 10}, rng);
  auto r = finite_diff_check<double>(
      {x},
      [](const std::vector<Tensor<double>>& in) {
        return sum_all(mul(in[0], in[0]));
      },
      1e-8, 1e-6, 7);
  CHECK(r.ok);
}

TEST_CASE("per-op gradients match finite differences across seeds") {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    std::mt19937_64 rng(seed);
    auto a = randt({2, 3, 4}, rng);
    auto b = randt({2, 3, 4}, rng);

    auto check = [&](const Fn& f, std::vector<Tensor<double>> in) {
      auto e = fd_err(std::move(in), f);
      CHECK(e <= 1e-6);
    };
    auto check_poly = [&](const Fn& f, std::vector<Tensor<double>> in) {
      auto e = fd_err_poly(std::move(in), f);
      CHECK(e <= 1e-6);
    };

    check_poly([](const auto& in) { return sum_all(add(in[0], in[1])); }, {a, b});
    check_poly([](const auto& in) { return sum_all(mul(in[0], in[1])); }, {a, b});
    check_poly([](const auto& in) { return sum_all(sub(in[0], in[1])); }, {a, b});
    // numerator kept off zero so the denominator gradient is not vanishing
    auto numer = randt({2, 3, 4}, rng, 0.25, 1.25);
    auto denom = randt({2, 3, 4}, rng, 0.5, 1.5);
    check([](const auto& in) { return sum_all(divide(in[0], in[1])); },
          {numer, denom});

    check([](const auto& in) { return sum_all(exp(in[0])); }, {a});
    check([](const auto& in) { return sum_all(softplus(in[0])); }, {a});
    check([](const auto& in) { return sum_all(silu(in[0])); }, {a});
    // gelu's derivative crosses zero near -0.75; sample clear of it, same
    // idea as keeping relu off its kink
    auto gpos = randt({2, 3, 4}, rng, 0.2, 1.5);
    auto gneg = randt({2, 3, 4}, rng, -2.4, -1.3);
    check([](const auto& in) { return sum_all(gelu(in[0])); }, {gpos});
    check([](const auto& in) { return sum_all(gelu(in[0])); }, {gneg});
    auto pos = randt({2, 3, 4}, rng, 0.2, 2.0);
    check([](const auto& in) { return sum_all(sqrt(in[0])); }, {pos});
    check([](const auto& in) { return sum_all(recip(in[0])); }, {pos});
    auto away = randt({2, 3, 4}, rng, 0.15, 1.0);
    if (seed % 2) away = neg(away);
    check_poly([](const auto& in) { return sum_all(relu(in[0])); }, {away});

    auto s = randt({2, 3}, rng);
    check_poly([](const auto& in) { return sum_all(mul_prefix(in[0], in[1])); },
               {a, s});
    // suffix broadcast
    auto tail = randt({4}, rng);
    check_poly([](const auto& in) { return sum_all(mul(in[0], in[1])); }, {a, tail});
    check_poly([](const auto& in) { return sum_all(add(in[0], in[1])); }, {tail, a});

    std::size_t axis = seed % 3;
    auto w = randt(a.shape(), rng);
    check([axis, &w](const auto& in) {
      return sum_all(mul(softmax(in[0], axis), w));
    }, {a});
    check_poly([axis, &w](const auto& in) {
      return sum_all(mul(flip(in[0], axis), w));
    }, {a});
    check_poly([axis](const auto& in) {
      auto r = reduce_sum(in[0], axis);
      return sum_all(mul(r, r));
    }, {a});
    check_poly([axis](const auto& in) {
      auto r = reduce_mean(in[0], axis);
      return sum_all(mul(r, r));
    }, {a});
    check_poly([axis](const auto& in) { return sum_all(reduce_var(in[0], axis)); },
               {a});
    check_poly([axis](const auto& in) { return sum_all(reduce_max(in[0], axis)); },
               {a});
    check_poly([axis](const auto& in) {
      return sum_all(concat(in[0], in[1], axis));
    }, {a, b});

    std::vector<std::size_t> idx = {0, 2, 2, 1};
    check_poly([idx](const auto& in) {
      return sum_all(gather(in[0], idx, 2));
    }, {a});
    check_poly([](const auto& in) {
      return sum_all(mul(reshape(in[0], {6, 4}), reshape(in[1], {6, 4})));
    }, {a, b});
    check_poly([](const auto& in) {
      return sum_all(mul(permute(in[0], {2, 0, 1}), permute(in[1], {2, 0, 1})));
    }, {a, b});

    auto logits = randt({5}, rng, -2.0, 2.0);
    std::size_t label = seed % 5;
    check([label](const auto& in) { return cross_entropy(in[0], label); }, {logits});

    auto xc = randt({6, 3}, rng);
    auto wc = randt({3, 4}, rng);
    auto bc = randt({3}, rng);
    check_poly([](const auto& in) {
      auto y = conv1d_depthwise_causal(in[0], in[1], in[2]);
      return sum_all(mul(y, y));
    }, {xc, wc, bc});

    // dropout: rng reseeded per call so the mask is stable under probing
    check_poly([seed](const auto& in) {
      std::mt19937_64 r(seed * 31 + 1);
      return sum_all(dropout(in[0], 0.4, r, true));
    }, {a});

    auto g = randt({4}, rng, 0.5, 1.5);
    auto be = randt({4}, rng);
    check([](const auto& in) {
      auto y = layernorm(in[0], in[1], in[2], 1e-5);
      return sum_all(mul(y, y));
    }, {a, g, be});
  }
}

TEST_CASE("validation errors") {
  auto a = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto bad = Tensor<double>::from({2}, {1, 2});
  CHECK_THROWS_AS(add(a, bad), ValidationError);
  CHECK_THROWS_AS(matmul(a, a), ValidationError);
  CHECK_THROWS_AS(gather(a, {5}, 1), ValidationError);
  CHECK_THROWS_AS(gather(a, {0}, 2), ValidationError);
  CHECK_THROWS_AS(flip(a, 2), ValidationError);
  CHECK_THROWS_AS(reshape(a, {4, 2}), ValidationError);
  CHECK_THROWS_AS(permute(a, {0, 0}), ValidationError);
  CHECK_THROWS_AS(layernorm(a, Tensor<double>::full({2}, 1.0),
                            Tensor<double>::zeros({3}), 1e-5),
                  ValidationError);
  CHECK_THROWS_AS(cross_entropy(Tensor<double>::from({3}, {0, 0, 0}), 3),
                  ValidationError);
  CHECK_THROWS_AS(Tensor<double>::from({2, 2}, {1, 2, 3}), ValidationError);
}

TEST_CASE("opt-in finite checking flags overflow") {
  auto big = Tensor<double>::from({1}, {1000.0});
  CHECK_NOTHROW(exp(big));  // off by default
  set_check_finite(true);
  CHECK_THROWS_AS(exp(big), NumericError);
  set_check_finite(false);
  CHECK_NOTHROW(exp(big));
}

TEST_CASE("ops off tape record nothing") {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  auto y = mul(x, x);  // no active tape
  CHECK(!y.tracked());
  Tape<double> tape;
  auto u = Tensor<double>::from({2}, {1, 2});  // untracked
  auto z = mul(u, u);
  CHECK(tape.num_steps() == 0);
  CHECK(!z.tracked());
  auto t = mul(x, x);
  CHECK(tape.num_steps() == 1);
  CHECK(t.tracked());
}

TEST_CASE("float path trains the same ops") {
  std::mt19937_64 rng(29);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> v(12);
  for (auto& x : v) x = u(rng);
  auto xf = Tensor<float>::from({3, 4}, v, true);
  auto gf = Tensor<float>::full({4}, 1.f);
  auto bf = Tensor<float>::zeros({4});
  Tape<float> tape;
  auto y = layernorm(xf, gf, bf, 1e-5f);
  auto loss = sum_all(mul(y, y));
  tape.backward(loss);
  auto g = tape.grad(xf);
  CHECK(g.size() == 12);
  bool any = false;
  for (float x : g) {
    if (x != 0.f) any = true;
  }
  CHECK(any);
}
