#include <catch2/catch_amalgamated.hpp>

#include "frozenlm/param_store.hpp"
#include "frozenlm/tensor.hpp"
#include "testutil.hpp"

using namespace frozenlm;
using testutil::T64;

TEST_CASE("backward: f(x) = x^2 at x = 3 gives grad 6") {
  auto x = T64::make({1}, {3.0}, true, "x");
  auto loss = mul(x, x);
  backward(loss);
  REQUIRE(x.grad()[0] == Catch::Approx(6.0));
}

TEST_CASE("backward: parameter not reaching the loss is reported with zero grad") {
  auto x = T64::make({1}, {2.0}, true, "x");
  auto w = T64::make({1}, {5.0}, true, "w");
  auto loss = mul(x, x);
  std::vector<T64> params{x, w};
  auto report = backward(loss, std::span<const T64>(params.data(), params.size()));
  REQUIRE(report.disconnected == std::vector<std::string>{"w"});
  w.node()->ensure_grad();
  REQUIRE(w.grad()[0] == 0.0);
}

TEST_CASE("backward: rejects non-scalar loss") {
  auto x = T64::make({2}, {1.0, 2.0}, true);
  REQUIRE_THROWS_AS(backward(x), std::invalid_argument);
}

TEST_CASE("gradcheck: individual ops") {
  Rng rng(7);
  SECTION("matmul") {
    std::vector<T64> leaves;
    auto a = testutil::leaf(leaves, {3, 4}, rng);
    auto b = testutil::leaf(leaves, {4, 2}, rng);
    auto res = testutil::gradcheck(leaves, [&] { return sum_all(matmul(a, b)); });
    INFO(res.worst << " err=" << res.max_err);
    REQUIRE(res.ok);
  }
  SECTION("softmax + mul") {
    std::vector<T64> leaves;
    auto a = testutil::leaf(leaves, {3, 5}, rng);
    auto m = testutil::leaf(leaves, {3, 5}, rng);
    auto res = testutil::gradcheck(leaves, [&] { return sum_all(mul(softmax_rows(a), m)); });
    REQUIRE(res.ok);
  }
  SECTION("causal softmax") {
    std::vector<T64> leaves;
    auto a = testutil::leaf(leaves, {4, 4}, rng);
    auto m = testutil::leaf(leaves, {4, 4}, rng);
    auto res = testutil::gradcheck(leaves, [&] { return sum_all(mul(causal_softmax(a), m)); });
    REQUIRE(res.ok);
  }
  SECTION("layernorm") {
    std::vector<T64> leaves;
    auto a = testutil::leaf(leaves, {3, 6}, rng);
    auto g = testutil::leaf(leaves, {6}, rng, 0.3);
    auto b = testutil::leaf(leaves, {6}, rng, 0.3);
    auto m = testutil::leaf(leaves, {3, 6}, rng);
    auto res =
        testutil::gradcheck(leaves, [&] { return sum_all(mul(layernorm_rows(a, g, b), m)); });
    REQUIRE(res.ok);
  }
  SECTION("gelu") {
    std::vector<T64> leaves;
    auto a = testutil::leaf(leaves, {2, 7}, rng);
    auto res = testutil::gradcheck(leaves, [&] { return sum_all(gelu(a)); });
    REQUIRE(res.ok);
  }
  SECTION("log_softmax") {
    std::vector<T64> leaves;
    auto a = testutil::leaf(leaves, {2, 5}, rng);
    auto m = testutil::leaf(leaves, {2, 5}, rng);
    auto res = testutil::gradcheck(leaves, [&] { return sum_all(mul(log_softmax_rows(a), m)); });
    REQUIRE(res.ok);
  }
  SECTION("embedding + cross_entropy") {
    std::vector<T64> leaves;
    auto table = testutil::leaf(leaves, {6, 4}, rng);
    std::vector<int> ids{1, 3, 5};
    std::vector<int> tgt{0, 2, 4};
    auto w = testutil::leaf(leaves, {4, 6}, rng);
    auto res = testutil::gradcheck(leaves, [&] {
      auto x = embedding(table, std::span<const int>(ids));
      return cross_entropy(matmul(x, w), std::span<const int>(tgt));
    });
    REQUIRE(res.ok);
  }
  SECTION("transpose, slices, concats, bias") {
    std::vector<T64> leaves;
    auto a = testutil::leaf(leaves, {4, 4}, rng);
    auto bias = testutil::leaf(leaves, {4}, rng);
    auto res = testutil::gradcheck(leaves, [&] {
      auto t = transpose(a);
      std::vector<T64> cols{slice_cols(t, 0, 2), slice_cols(t, 2, 4)};
      auto c = concat_cols(cols);
      std::vector<T64> rows{slice_rows(c, 0, 2), slice_rows(c, 2, 4)};
      return sum_all(gelu(add_bias(concat_rows(rows), bias)));
    });
    REQUIRE(res.ok);
  }
  SECTION("dropout with a fixed mask stream") {
    std::vector<T64> leaves;
    auto a = testutil::leaf(leaves, {4, 4}, rng);
    auto res = testutil::gradcheck(leaves, [&] {
      Rng mask_rng(123);
      return sum_all(dropout(a, 0.25, mask_rng));
    });
    REQUIRE(res.ok);
  }
}

TEST_CASE("gradcheck: random 2-layer attention graph vs central differences") {
  Rng rng(42);
  std::vector<T64> leaves;
  auto table = testutil::leaf(leaves, {6, 8}, rng);
  std::vector<T64> wq, wk, wv, wo, lg, lb;
  for (int l = 0; l < 2; ++l) {
    wq.push_back(testutil::leaf(leaves, {8, 8}, rng));
    wk.push_back(testutil::leaf(leaves, {8, 8}, rng));
    wv.push_back(testutil::leaf(leaves, {8, 8}, rng));
    wo.push_back(testutil::leaf(leaves, {8, 8}, rng));
    lg.push_back(testutil::leaf(leaves, {8}, rng, 0.2));
    lb.push_back(testutil::leaf(leaves, {8}, rng, 0.2));
  }
  auto out_w = testutil::leaf(leaves, {8, 6}, rng);
  std::vector<int> ids{0, 2, 4, 1};
  std::vector<int> tgt{2, 4, 1, 5};
  auto build = [&]() -> T64 {
    auto x = embedding(table, std::span<const int>(ids));
    for (int l = 0; l < 2; ++l) {
      auto ln = layernorm_rows(x, lg[size_t(l)], lb[size_t(l)]);
      auto q = matmul(ln, wq[size_t(l)]);
      auto k = matmul(ln, wk[size_t(l)]);
      auto v = matmul(ln, wv[size_t(l)]);
      auto scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(8.0));
      auto ctx = matmul(causal_softmax(scores), v);
      x = add(x, matmul(ctx, wo[size_t(l)]));
    }
    return cross_entropy(matmul(x, out_w), std::span<const int>(tgt));
  };
  auto res = testutil::gradcheck(leaves, build);
  INFO("max rel err " << res.max_err << " at " << res.worst);
  REQUIRE(res.ok);
  REQUIRE(res.max_err < 1e-3);
}

TEST_CASE("frozen partition: optimizer never touches frozen tensors") {
  ParamStore<double> store;
  Rng rng(1);
  auto frozen = store.add_normal("lm.w", {4, 4}, Partition::frozen, rng, 0.5);
  auto tuned = store.add_normal("adapter.w", {4, 4}, Partition::trainable, rng, 0.5);
  const auto frozen_before = store.tensor_hash("lm.w");

  // a loss touching both
  auto loss = mean_all(mul(matmul(frozen, tuned), matmul(frozen, tuned)));
  backward(loss);
  REQUIRE(!frozen.grad().empty());  // grads flow through frozen tensors

  AdamState<double> adam;
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  adam_step(store, adam, cfg, 1, cfg.learning_rate);
  REQUIRE(store.tensor_hash("lm.w") == frozen_before);
  REQUIRE(store.tensor_hash("adapter.w") != fnv1a64(nullptr, 0));
}

TEST_CASE("tensor invariants") {
  REQUIRE_THROWS_AS(T64::make({2, 3}, {1.0, 2.0}, false), std::invalid_argument);
  auto t = T64::zeros({2, 3});
  REQUIRE(t.size() == 6);
  t.node()->ensure_grad();
  REQUIRE(t.grad().size() == t.val().size());
}
