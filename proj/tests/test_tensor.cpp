#include <cmath>
#include <limits>
#include <vector>

#include "doctest.h"
#include "fcc/errors.hpp"
#include "fcc/tensor.hpp"
#include "gradcheck.hpp"

using namespace fcc;
using fcc::testing::grad_check;
using fcc::testing::probe;
using fcc::testing::random_tensor;

namespace {

using T64 = Tensor<double>;

std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, std::size_t m,
                                 std::size_t k, std::size_t n) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a[i * k + p] * b[p * n + j];
  return out;
}

// Direct sliding window with explicit zero padding; independent of the
// tap-range arithmetic used by conv2d.
std::vector<double> sliding_window_conv(const std::vector<double>& x, std::size_t h, std::size_t w,
                                        const std::vector<double>& k, std::size_t kh, std::size_t kw) {
  const std::size_t ph = kh - 1, pw = kw - 1;
  const std::size_t top = ph / 2, left = pw / 2;
  std::vector<double> padded((h + ph) * (w + pw), 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) padded[(i + top) * (w + pw) + j + left] = x[i * w + j];
  std::vector<double> out(h * w, 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      for (std::size_t a = 0; a < kh; ++a)
        for (std::size_t b = 0; b < kw; ++b) out[i * w + j] += k[a * kw + b] * padded[(i + a) * (w + pw) + j + b];
  return out;
}

}  // namespace

TEST_CASE("matmul examples") {
  auto eye = T64::from_vector({2, 2}, {1, 0, 0, 1});
  auto b = T64::from_vector({2, 2}, {5, 6, 7, 8});
  auto out = matmul(eye, b);
  CHECK(std::vector<double>(out.values().begin(), out.values().end()) == std::vector<double>{5, 6, 7, 8});

  auto a = T64::from_vector({2, 2}, {1, 2, 3, 4});
  const auto expected = naive_matmul({1, 2, 3, 4}, {5, 6, 7, 8}, 2, 2, 2);
  CHECK(expected == std::vector<double>{19, 22, 43, 50});
  auto ab = matmul(a, b);
  CHECK(std::vector<double>(ab.values().begin(), ab.values().end()) == expected);

  auto zero = T64::zeros({3, 2});
  auto z = matmul(zero, b);
  for (double v : z.values()) CHECK(v == 0.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = T64::zeros({2, 3});
  auto b = T64::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("by [2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul matches naive oracle and is associative") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng.below(5), k = 1 + rng.below(5), n = 1 + rng.below(5), q = 1 + rng.below(5);
    auto a = random_tensor<double>({m, k}, rng, -1, 1, false);
    auto b = random_tensor<double>({k, n}, rng, -1, 1, false);
    auto c = random_tensor<double>({n, q}, rng, -1, 1, false);
    auto ab = matmul(a, b);
    const auto oracle = naive_matmul({a.values().begin(), a.values().end()}, {b.values().begin(), b.values().end()},
                                     m, k, n);
    for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(ab.values()[i] == doctest::Approx(oracle[i]).epsilon(1e-14));
    auto left = matmul(ab, c);
    auto right = matmul(a, matmul(b, c));
    for (std::size_t i = 0; i < left.numel(); ++i) {
      const double l = left.values()[i], r = right.values()[i];
      CHECK(std::abs(l - r) <= 1e-8 * std::max(1.0, std::abs(l)));
    }
  }
}

TEST_CASE("conv2d examples") {
  auto ones = T64::full({1, 3, 3}, 1.0);
  auto kernel = T64::full({1, 1, 3, 3}, 1.0);
  auto out = conv2d(ones, kernel, 1, Padding::kValid);
  CHECK(out.shape() == Shape{1, 1, 1});
  CHECK(out.item() == 9.0);

  Rng rng(3);
  auto x = random_tensor<double>({1, 5, 5}, rng, -1, 1, false);
  auto zero_k = T64::zeros({2, 1, 3, 3});
  auto zero_out = conv2d(x, zero_k, 1, Padding::kSame);
  for (double v : zero_out.values()) CHECK(v == 0.0);

  auto k = random_tensor<double>({1, 1, 3, 3}, rng, -1, 1, false);
  auto same = conv2d(x, k, 1, Padding::kSame);
  CHECK(same.shape() == Shape{1, 5, 5});
  const auto oracle = sliding_window_conv({x.values().begin(), x.values().end()}, 5, 5,
                                          {k.values().begin(), k.values().end()}, 3, 3);
  for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(same.values()[i] == doctest::Approx(oracle[i]).epsilon(1e-13));
}

TEST_CASE("conv2d geometry and errors") {
  auto x = T64::zeros({2, 7, 5});
  CHECK(conv2d(x, T64::zeros({3, 2, 3, 3}), 2, Padding::kSame).shape() == Shape{3, 4, 3});
  CHECK(conv2d(x, T64::zeros({3, 2, 3, 3}), 1, Padding::kValid).shape() == Shape{3, 5, 3});
  CHECK_THROWS_AS(conv2d(x, T64::zeros({3, 2, 6, 6}), 1, Padding::kValid), DimensionError);
  CHECK_THROWS_AS(conv2d(x, T64::zeros({3, 1, 3, 3}), 1, Padding::kSame), DimensionError);
}

TEST_CASE("max_pool2d examples") {
  auto x = T64::from_vector({1, 2, 2}, {1, 2, 3, 4});
  CHECK(max_pool2d(x, 2, 2).item() == 4.0);

  auto constant = T64::full({2, 4, 6}, 3.5);
  auto pooled_constant = max_pool2d(constant, 2, 2);
  for (double v : pooled_constant.values()) CHECK(v == 3.5);

  Rng rng(11);
  auto r = random_tensor<double>({1, 4, 4}, rng, -1, 1, false);
  auto pooled = max_pool2d(r, 2, 2);
  REQUIRE(pooled.shape() == Shape{1, 2, 2});
  for (std::size_t oy = 0; oy < 2; ++oy) {
    for (std::size_t ox = 0; ox < 2; ++ox) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < 2; ++a)
        for (std::size_t b = 0; b < 2; ++b) best = std::max(best, r.at({0, 2 * oy + a, 2 * ox + b}));
      CHECK(pooled.at({0, oy, ox}) == best);
    }
  }
  CHECK_THROWS_AS(max_pool2d(T64::zeros({1, 1, 3}), 2, 2), DimensionError);
}

TEST_CASE("max_pool2d routes tied gradients to the first position") {
  auto x = T64::full({1, 2, 2}, 1.0, true);
  sum(max_pool2d(x, 2, 2)).backward();
  CHECK(x.grad() == std::vector<double>{1, 0, 0, 0});
}

TEST_CASE("softmax examples") {
  auto s = softmax(T64::from_vector({2}, {0, 0}), 0);
  CHECK(s.values()[0] == 0.5);
  CHECK(s.values()[1] == 0.5);

  auto big = softmax(T64::from_vector({2}, {1000, 1000}), 0);
  CHECK(big.values()[0] == 0.5);
  CHECK(big.values()[1] == 0.5);

  auto y = softmax(T64::from_vector({3}, {1, 2, 3}), 0);
  long double denom = std::exp(1.0L) + std::exp(2.0L) + std::exp(3.0L);
  for (int i = 0; i < 3; ++i) {
    const long double expected = std::exp(static_cast<long double>(i + 1)) / denom;
    CHECK(std::abs(static_cast<long double>(y.values()[i]) - expected) < 1e-12L);
  }
}

TEST_CASE("softmax property: normalized and shift invariant along any axis") {
  Rng rng(21);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t a = 1 + rng.below(4), b = 1 + rng.below(4), c = 1 + rng.below(4);
    const std::size_t axis = rng.below(3);
    auto x = random_tensor<double>({a, b, c}, rng, -5, 5, false);
    const double shift = rng.uniform(-50, 50);
    auto y = softmax(x, axis);
    auto ys = softmax(add_scalar(x, shift), axis);
    const Shape& s = x.shape();
    for (std::size_t i = 0; i < y.numel(); ++i) {
      CHECK(y.values()[i] > 0.0);
      CHECK(std::abs(y.values()[i] - ys.values()[i]) < 1e-9);
    }
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < 3; ++d) inner *= s[d];
    for (std::size_t start = 0; start < y.numel(); ++start) {
      if ((start / inner) % s[axis] != 0) continue;
      double total = 0;
      for (std::size_t i = 0; i < s[axis]; ++i) total += y.values()[start + i * inner];
      CHECK(std::abs(total - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("backward examples") {
  auto x = T64::from_vector({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  sum(x).backward();
  for (double g : x.grad()) CHECK(g == 1.0);

  auto s = T64::scalar(3.0, true);
  mul(s, s).backward();
  CHECK(s.grad()[0] == 6.0);

  CHECK_THROWS_AS(add(x, x).backward(), ContractError);
}

TEST_CASE("backward accumulates across calls and sums shared uses") {
  auto x = T64::scalar(2.0, true);
  auto loss = add(mul(x, x), scale(x, 3.0));  // x^2 + 3x, x used three times
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(7.0));
  loss.backward();
  CHECK(x.grad()[0] == doctest::Approx(14.0));
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("backward matches finite differences on a composite graph") {
  Rng rng(5);
  auto a = random_tensor<double>({3, 4}, rng);
  auto b = random_tensor<double>({4, 2}, rng);
  auto bias = random_tensor<double>({2}, rng);
  auto fn = [&] {
    auto h = tanh(add_row(matmul(a, b), bias));
    auto again = mul(h, sigmoid(h));  // h reused
    return add(mean(again), sum(softmax(matmul(a, b), 1)));
  };
  auto res = grad_check<double>(fn, {a, b, bias});
  CHECK(res.max_relative_error < 1e-5);
}

TEST_CASE("every op passes gradient checks in 64-bit and 32-bit") {
  auto run = [](auto tag, double eps, double tol) {
    using T = decltype(tag);
    Rng rng(17);
    auto a = random_tensor<T>({3, 4}, rng);
    auto b = random_tensor<T>({3, 4}, rng);
    auto w = random_tensor<T>({4, 5}, rng);
    auto row = random_tensor<T>({4}, rng);
    auto img = random_tensor<T>({2, 5, 6}, rng);
    auto kern = random_tensor<T>({3, 2, 3, 3}, rng);
    auto cbias = random_tensor<T>({3}, rng);
    auto table = random_tensor<T>({6, 3}, rng);
    const std::vector<std::int32_t> ids{1, 4, 1, 5};

    struct Case {
      const char* name;
      std::function<Tensor<T>()> fn;
      std::vector<Tensor<T>> leaves;
    };
    std::vector<Case> cases{
        {"add", [&] { return probe(add(a, b)); }, {a, b}},
        {"sub", [&] { return probe(sub(a, b)); }, {a, b}},
        {"mul", [&] { return probe(mul(a, b)); }, {a, b}},
        {"scale", [&] { return probe(scale(a, T(2.5))); }, {a}},
        {"tanh", [&] { return probe(tanh(a)); }, {a}},
        {"sigmoid", [&] { return probe(sigmoid(a)); }, {a}},
        {"relu", [&] { return probe(relu(a)); }, {a}},
        {"softplus", [&] { return probe(softplus(scale(a, T(3)))); }, {a}},
        {"add_row", [&] { return probe(add_row(a, row)); }, {a, row}},
        {"mul_row", [&] { return probe(mul_row(a, row)); }, {a, row}},
        {"matmul", [&] { return probe(matmul(a, w)); }, {a, w}},
        {"transpose", [&] { return probe(transpose(a)); }, {a}},
        {"reshape", [&] { return probe(reshape(a, {2, 6})); }, {a}},
        {"concat0", [&] { return probe(concat<T>({a, b}, 0)); }, {a, b}},
        {"concat1", [&] { return probe(concat<T>({a, b, a}, 1)); }, {a, b}},
        {"slice_rows", [&] { return probe(slice_rows(a, 1, 3)); }, {a}},
        {"pad_rows", [&] { return probe(pad_rows(a, 5)); }, {a}},
        {"mean", [&] { return mean(mul(a, b)); }, {a, b}},
        {"softmax0", [&] { return probe(softmax(a, 0)); }, {a}},
        {"softmax1", [&] { return probe(softmax(a, 1)); }, {a}},
        {"masked_softmax",
         [&] {
           return probe(masked_softmax_rows(matmul(a, transpose(b)), {true, false, true}, {true, true, false}));
         },
         {a, b}},
        {"layer_norm", [&] { return probe(layer_norm_rows(a, T(1e-5))); }, {a}},
        {"embedding", [&] { return probe(embedding_lookup<T>(table, ids)); }, {table}},
        {"conv_same", [&] { return probe(conv2d(img, kern, 1, Padding::kSame)); }, {img, kern}},
        {"conv_stride2", [&] { return probe(conv2d(img, kern, 2, Padding::kSame)); }, {img, kern}},
        {"conv_valid", [&] { return probe(conv2d(img, kern, 1, Padding::kValid)); }, {img, kern}},
        {"channel_bias", [&] { return probe(add_channel_bias(conv2d(img, kern, 1, Padding::kSame), cbias)); },
         {img, kern, cbias}},
        {"max_pool", [&] { return probe(max_pool2d(img, 2, 2)); }, {img}},
        {"max_pool_overlap", [&] { return probe(max_pool2d(img, 2, 1)); }, {img}},
    };
    for (auto& c : cases) {
      CAPTURE(c.name);
      auto res = grad_check<T>(c.fn, c.leaves, eps);
      CHECK(res.max_relative_error < tol);
    }
  };
  SUBCASE("64-bit") { run(double{}, 1e-4, 1e-5); }
  SUBCASE("32-bit") { run(float{}, 1e-2, 1e-3); }
}

TEST_CASE("embedding lookups accumulate sparse rows") {
  auto table = T64::from_vector({4, 2}, {0, 0, 1, 2, 3, 4, 5, 6}, true);
  table.set_sparse_grad(true);
  const std::vector<std::int32_t> ids{2, 2, 3};
  auto out = embedding_lookup<double>(table, ids);
  CHECK(out.at({1, 1}) == 4.0);
  sum(out).backward();
  const auto& rows = table.sparse_grad();
  CHECK(rows.size() == 2);
  CHECK(rows.at(2) == std::vector<double>{2, 2});
  CHECK(rows.at(3) == std::vector<double>{1, 1});
  CHECK(table.grad() == std::vector<double>{0, 0, 0, 0, 2, 2, 1, 1});
  const std::vector<std::int32_t> bad{4};
  CHECK_THROWS_AS(embedding_lookup<double>(table, bad), DimensionError);
}

TEST_CASE("shared leaves share storage but not gradients") {
  auto master = T64::from_vector({2}, {1, 2}, true);
  auto view = master.shared_leaf();
  sum(mul(view, view)).backward();
  CHECK(view.grad() == std::vector<double>{2, 4});
  CHECK_FALSE(master.has_grad());
  master.mutable_values()[0] = 10.0;
  CHECK(view.values()[0] == 10.0);
}

TEST_CASE("no-grad guard skips the tape") {
  auto x = T64::scalar(1.0, true);
  NoGradGuard guard;
  auto y = mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite inputs give finite outputs") {
  auto x = T64::from_vector({4}, {-800, -1, 1, 800});
  for (auto t : {sigmoid(x), tanh(x), softplus(x), softmax(x, 0)})
    for (double v : t.values()) CHECK(std::isfinite(v));
}
