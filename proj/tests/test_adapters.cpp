#include <catch2/catch_amalgamated.hpp>

#include "frozenlm/adapters.hpp"
#include "frozenlm/synth.hpp"
#include "testutil.hpp"

using namespace frozenlm;

namespace {

struct Fixture {
  ParamStore<float> store;
  TransformerModel<float> lm;
  TransformerModel<float> enc;
  Vocabulary vocab;
};

Fixture make_fixture(uint64_t seed, int64_t lm_dim = 16, int64_t enc_dim = 16) {
  Fixture f;
  std::vector<std::string> toks;
  for (int i = 0; i < 20; ++i) toks.push_back("w" + std::to_string(i));
  f.vocab = Vocabulary::from_tokens(toks);
  Rng rng(seed);
  LMConfig lm_cfg;
  lm_cfg.vocab_size = f.vocab.size();
  lm_cfg.hidden_dim = lm_dim;
  lm_cfg.num_layers = 2;
  lm_cfg.num_heads = 2;
  lm_cfg.context_window = 96;
  f.lm = TransformerModel<float>::init(f.store, "lm", lm_cfg, rng, Partition::frozen);
  LMConfig enc_cfg = lm_cfg;
  enc_cfg.hidden_dim = enc_dim;
  enc_cfg.causal = false;
  f.enc = TransformerModel<float>::init(f.store, "enc", enc_cfg, rng, Partition::frozen);
  return f;
}

}  // namespace

TEST_CASE("prepend_prompt: lengths, identity and overflow") {
  auto f = make_fixture(1);
  Rng rng(2);
  auto p = make_soft_prompt(f.store, "p", 4, 16, "p", rng);
  std::vector<int> x{4, 5, 6};

  SECTION("prompt_len K + len(x) m gives K+m rows") {
    auto e = prepend_prompt(f.lm, p.emb, x);
    REQUIRE(e.rows() == 4 + 3);
    REQUIRE(e.cols() == 16);
  }
  SECTION("zero-length prompt equals the plain token path bit for bit") {
    NoGradGuard ng;
    auto empty = Tensor<float>::zeros({0, 16});
    auto via_prompt =
        f.lm.forward_embeddings(prepend_prompt(f.lm, empty, x), InjectAt::embedding).logits;
    auto plain = f.lm.forward_tokens(x).logits;
    REQUIRE(via_prompt.val() == plain.val());
  }
  SECTION("context overflow is rejected with the required truncation reported") {
    std::vector<int> long_x(95, 4);
    REQUIRE_THROWS_WITH(prepend_prompt(f.lm, p.emb, long_x),
                        Catch::Matchers::ContainsSubstring("truncation required: 3"));
  }
}

TEST_CASE("prompt gradients flow while the frozen LM is never updated") {
  auto f = make_fixture(3);
  Rng rng(4);
  auto p = make_soft_prompt(f.store, "p", 4, 16, "p", rng);
  const auto lm_hash = f.store.frozen_hash();

  SeqExample ex;
  ex.input_ids = {4, 5};
  ex.target_ids = {6};
  auto loss = sequence_loss(f.lm, std::optional<Tensor<float>>(p.emb), ex);
  backward(loss);

  double pnorm = 0;
  for (float g : p.emb.grad()) pnorm += std::abs(double(g));
  REQUIRE(pnorm > 0.0);

  AdamState<float> adam;
  OptimizerConfig opt;
  opt.learning_rate = 0.1;
  adam_step(f.store, adam, opt, 1, 0.1);
  f.store.zero_grads();
  REQUIRE(f.store.frozen_hash() == lm_hash);
}

TEST_CASE("generate_prompt: deterministic, fixed length, differentiable") {
  auto f = make_fixture(5);
  Rng rng(6);
  GeneratorDims dims;
  dims.enc_dim = 16;
  dims.enc_heads = 2;
  dims.p_prime_len = 3;
  dims.num_queries = 5;
  dims.lm_dim = 16;
  auto gen = PromptGenerator<float>::init(f.store, "gen", &f.enc, dims, rng);

  SECTION("same x twice is bit-identical") {
    NoGradGuard ng;
    std::vector<int> x{4, 5, 6, 7};
    auto a = generate_prompt<float>(gen, x);
    auto b = generate_prompt<float>(gen, x);
    REQUIRE(a.val() == b.val());
  }
  SECTION("token lengths 5 and 50 both map to exactly K vectors") {
    NoGradGuard ng;
    std::vector<int> short_x{4, 5, 6, 7, 8};
    std::vector<int> long_x(50, 9);
    REQUIRE(generate_prompt<float>(gen, short_x).rows() == 5);
    REQUIRE(generate_prompt<float>(gen, long_x).rows() == 5);
    REQUIRE(generate_prompt<float>(gen, short_x).cols() == 16);
  }
  SECTION("empty input rejected") {
    std::vector<int> empty;
    REQUIRE_THROWS_AS(generate_prompt<float>(gen, empty), std::invalid_argument);
  }
  SECTION("LM loss gradient reaches the cross-attention queries") {
    SeqExample ex;
    ex.input_ids = {4, 5, 6};
    ex.target_ids = {7};
    auto p = gen.generate(ex.input_ids);
    auto loss = sequence_loss(f.lm, std::optional<Tensor<float>>(p), ex);
    backward(loss);
    REQUIRE(!gen.queries.grad().empty());
    double qnorm = 0;
    for (float g : gen.queries.grad()) qnorm += std::abs(double(g));
    REQUIRE(qnorm > 0.0);
    // p' participates too (trained jointly with the cross-attention network)
    double pnorm = 0;
    for (float g : gen.p_prime.grad()) pnorm += std::abs(double(g));
    REQUIRE(pnorm > 0.0);
  }
}

TEST_CASE("parameter census: formula matches registration exactly and paper dims approximately") {
  auto f = make_fixture(7);
  Rng rng(8);
  GeneratorDims dims;
  dims.enc_dim = 16;
  dims.enc_heads = 2;
  dims.p_prime_len = 3;
  dims.num_queries = 5;
  dims.lm_dim = 16;
  ParamStore<float> gstore;
  auto gen = PromptGenerator<float>::init(gstore, "gen", &f.enc, dims, rng);
  const auto census = prompt_generator_census(dims);
  REQUIRE(census.total() == gstore.param_count(Partition::trainable));

  // full-scale dimensions: a 768-wide encoder with ffn 3072, 400 query
  // vectors, an encoder prompt sized near 330K parameters, 4096-wide LM
  GeneratorDims paper;
  paper.enc_dim = 768;
  paper.ffn_mult = 4;
  paper.p_prime_len = 430;
  paper.num_queries = 400;
  paper.lm_dim = 4096;
  const auto full = prompt_generator_census(paper);
  REQUIRE(std::abs(double(full.encoder_prompt) - 330e3) / 330e3 < 0.10);
  REQUIRE(std::abs(double(full.cross_attention) - 7e6) / 7e6 < 0.10);
  REQUIRE(std::abs(double(full.self_attention) - 14e6) / 14e6 < 0.10);
  REQUIRE(std::abs(double(full.expansion) - 3e6) / 3e6 < 0.10);
}

TEST_CASE("prompt_distance") {
  auto a = Tensor<float>::make({2, 2}, {1, 0, 0, 1});
  SECTION("identical prompts give 0") { REQUIRE(prompt_distance(a, a) == Catch::Approx(0.0)); }
  SECTION("orthogonal positions give 1") {
    auto b = Tensor<float>::make({2, 2}, {0, 1, 1, 0});
    REQUIRE(prompt_distance(a, b) == Catch::Approx(1.0));
  }
  SECTION("antipodal single position gives 2") {
    auto x = Tensor<float>::make({1, 2}, {1, 0});
    auto y = Tensor<float>::make({1, 2}, {-1, 0});
    REQUIRE(prompt_distance(x, y) == Catch::Approx(2.0));
  }
  SECTION("zero-norm position rejected") {
    auto z = Tensor<float>::make({1, 2}, {0, 0});
    auto y = Tensor<float>::make({1, 2}, {1, 0});
    REQUIRE_THROWS_AS(prompt_distance(z, y), std::invalid_argument);
  }
  SECTION("symmetry on random prompts") {
    Rng rng(11);
    std::vector<float> da(8), db(8);
    for (auto& v : da) v = float(rng.normal());
    for (auto& v : db) v = float(rng.normal());
    auto x = Tensor<float>::make({2, 4}, da);
    auto y = Tensor<float>::make({2, 4}, db);
    REQUIRE(prompt_distance(x, y) == Catch::Approx(prompt_distance(y, x)));
    REQUIRE(prompt_distance(x, y) >= 0.0);
    REQUIRE(prompt_distance(x, y) <= 2.0);
  }
}

TEST_CASE("train_adapter: 10-fact lookup reaches 100% train accuracy (3 seeds)") {
  for (uint64_t seed : {21ull, 22ull, 23ull}) {
    // world: 10 facts the LM is pretrained on
    std::set<std::string> used;
    Rng wrng(seed);
    auto keys = synth::make_words(wrng, 10, used);
    auto vals = synth::make_words(wrng, 10, used);
    std::vector<std::string> corpus;
    for (size_t i = 0; i < 10; ++i) {
      corpus.push_back("the capital of " + keys[i] + " is " + vals[i] + " .");
      corpus.push_back(vals[i] + " is the capital of " + keys[i] + " .");
    }
    corpus.push_back("what is the capital ? answer :");
    Vocabulary vocab = Vocabulary::build(corpus, 256);

    ParamStore<float> store;
    LMConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.hidden_dim = 32;
    cfg.num_layers = 2;
    cfg.num_heads = 2;
    cfg.context_window = 48;
    Rng rng(seed + 100);
    auto lm = TransformerModel<float>::init(store, "lm", cfg, rng, Partition::trainable);
    OptimizerConfig pre_opt;
    pre_opt.learning_rate = 3e-3;
    pretrain_lm(store, lm, "lm", vocab, corpus, pre_opt, 500, 8, seed + 1);
    const auto lm_hash = store.frozen_hash();

    Rng prng(seed + 50);
    auto prompt = make_soft_prompt(store, "p", 4, 32, "p", prng);
    auto render = [&](size_t i) {
      SeqExample ex;
      ex.input_ids = vocab.encode("what is the capital of " + keys[i] + " ? answer :");
      ex.target_ids = vocab.encode(vals[i]);
      return ex;
    };
    auto train_acc = [&]() {
      int hits = 0;
      for (size_t i = 0; i < 10; ++i) {
        PromptedInput<float> in{prompt.emb, render(i).input_ids};
        auto g = generate(lm, vocab, in, 0.0, 3);
        hits += g.text == vals[i] ? 1 : 0;
      }
      return double(hits) / 10.0;
    };

    AdapterTrainConfig tc;
    tc.opt.learning_rate = 0.05;
    tc.steps = 600;
    tc.batch_size = 8;
    tc.eval_interval = 100;
    tc.seed = seed + 2;
    auto result = train_adapter<float>(
        store, lm, [&](const SeqExample&) { return std::optional<Tensor<float>>(prompt.emb); },
        [&](Rng& r) { return render(size_t(r.uniform_int(10))); }, train_acc, tc);

    INFO("seed " << seed << " best train acc " << result.best_score);
    REQUIRE(result.best_score == 1.0);
    REQUIRE(result.best_step <= 5000);
    REQUIRE(store.frozen_hash() == lm_hash);
    REQUIRE(result.trace.size() == size_t(tc.steps / tc.eval_interval));
  }
}

TEST_CASE("train_adapter rejects an empty trainable set") {
  auto f = make_fixture(31);
  AdapterTrainConfig tc;
  REQUIRE_THROWS_AS(train_adapter<float>(
                        f.store, f.lm, nullptr,
                        [](Rng&) {
                          return SeqExample{{4}, {5}};
                        },
                        nullptr, tc),
                    std::invalid_argument);
}
