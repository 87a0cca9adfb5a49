#include <catch2/catch_amalgamated.hpp>

#include "frozenlm/checkpoint.hpp"
#include "frozenlm/optim.hpp"
#include "frozenlm/param_store.hpp"

using namespace frozenlm;

TEST_CASE("adam_step: hand-computed bias-corrected first step") {
  // beta1=0.9, beta2=0.95, eps=1e-6, wd=0, lr=0.1, g=1, step 1:
  // mhat = 1, vhat = 1, delta = -0.1 / (1 + 1e-6) ~ -0.1
  ParamStore<double> store;
  auto w = store.add("w", {1}, Partition::trainable, {0.5});
  w.node()->ensure_grad();
  w.grad()[0] = 1.0;
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.95;
  cfg.epsilon = 1e-6;
  cfg.weight_decay = 0.0;
  AdamState<double> st;
  adam_step(store, st, cfg, 1, cfg.learning_rate);
  REQUIRE(w.val()[0] == Catch::Approx(0.5 - 0.1).epsilon(1e-4));
  REQUIRE(w.grad()[0] == 0.0);  // grads cleared
}

TEST_CASE("adam_step: zero grad and zero weight decay leaves parameter unchanged") {
  ParamStore<double> store;
  auto w = store.add("w", {2}, Partition::trainable, {1.5, -2.0});
  w.node()->ensure_grad();
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  AdamState<double> st;
  adam_step(store, st, cfg, 1, cfg.learning_rate);
  REQUIRE(w.val()[0] == 1.5);
  REQUIRE(w.val()[1] == -2.0);
}

TEST_CASE("adam_step: frozen parameter with nonzero grad stays put") {
  ParamStore<double> store;
  auto w = store.add("w", {1}, Partition::frozen, {3.0});
  w.node()->ensure_grad();
  w.grad()[0] = 10.0;
  OptimizerConfig cfg;
  AdamState<double> st;
  adam_step(store, st, cfg, 1, cfg.learning_rate);
  REQUIRE(w.val()[0] == 3.0);
}

TEST_CASE("adam_step: missing grad on trainable parameter is an error") {
  ParamStore<double> store;
  store.add("w", {1}, Partition::trainable, {1.0});
  OptimizerConfig cfg;
  AdamState<double> st;
  REQUIRE_THROWS_AS(adam_step(store, st, cfg, 1, cfg.learning_rate), std::runtime_error);
}

TEST_CASE("adam_step: decoupled weight decay shrinks toward zero independently of grad scale") {
  ParamStore<double> store;
  auto w = store.add("w", {1}, Partition::trainable, {2.0});
  w.node()->ensure_grad();
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0.5;
  AdamState<double> st;
  adam_step(store, st, cfg, 1, cfg.learning_rate);
  // zero grad: update is exactly -lr * wd * w
  REQUIRE(w.val()[0] == Catch::Approx(2.0 - 0.1 * 0.5 * 2.0));
}

TEST_CASE("lr_schedule") {
  OptimizerConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.warmup_fraction = 0.005;
  cfg.decay = DecayKind::linear;

  SECTION("step 0 gives 0") { REQUIRE(lr_schedule(cfg, 0, 1000) == 0.0); }
  SECTION("warmup end gives peak") { REQUIRE(lr_schedule(cfg, 5, 1000) == Catch::Approx(0.1)); }
  SECTION("decay midpoint") {
    // warmup ends at 5; midpoint of [5,1000] is 502.5, so step 502 ~ 0.05
    REQUIRE(lr_schedule(cfg, 502, 1000) == Catch::Approx(0.05).margin(1e-3));
  }
  SECTION("final step decays to 0") { REQUIRE(lr_schedule(cfg, 1000, 1000) == 0.0); }
  SECTION("no decay holds peak") {
    cfg.decay = DecayKind::none;
    REQUIRE(lr_schedule(cfg, 700, 1000) == Catch::Approx(0.1));
  }
  SECTION("step beyond total rejected") {
    REQUIRE_THROWS_AS(lr_schedule(cfg, 1001, 1000), std::invalid_argument);
  }
}

TEST_CASE("optimizer config validation") {
  OptimizerConfig cfg;
  cfg.beta1 = 1.0;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.beta1 = 0.9;
  cfg.epsilon = 0.0;
  REQUIRE_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("checkpoint round trip preserves bytes, tags and hashes") {
  ParamStore<float> store;
  Rng rng(3);
  store.add_normal("lm.emb", {8, 4}, Partition::frozen, rng, 0.5);
  store.add_normal("p.soft", {2, 4}, Partition::trainable, rng, 0.5);
  const auto dir = std::filesystem::temp_directory_path() / "frozenlm_ckpt_test";
  std::filesystem::remove_all(dir);
  save_checkpoint(store, dir);

  ParamStore<float> loaded;
  load_checkpoint(loaded, dir);
  REQUIRE(loaded.names() == store.names());
  for (const auto& name : store.names()) {
    REQUIRE(loaded.tensor_hash(name) == store.tensor_hash(name));
    REQUIRE(loaded.partition(name) == store.partition(name));
    REQUIRE(loaded.get(name).val() == store.get(name).val());
  }

  // reload stability: saving the loaded store produces identical manifests
  const auto dir2 = std::filesystem::temp_directory_path() / "frozenlm_ckpt_test2";
  std::filesystem::remove_all(dir2);
  save_checkpoint(loaded, dir2);
  REQUIRE(read_lines((dir / "manifest.json").string()) ==
          read_lines((dir2 / "manifest.json").string()));
  std::filesystem::remove_all(dir);
  std::filesystem::remove_all(dir2);
}

TEST_CASE("precision is configurable: float and double stores") {
  ParamStore<float> f32;
  ParamStore<double> f64;
  Rng rng(4);
  f32.add_normal("w", {4}, Partition::trainable, rng, 1.0);
  f64.add_normal("w", {4}, Partition::trainable, rng, 1.0);
  REQUIRE(sizeof(f32.get("w").val()[0]) == 4);
  REQUIRE(sizeof(f64.get("w").val()[0]) == 8);
}
