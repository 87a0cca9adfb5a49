#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "frozenlm/lm.hpp"

namespace frozenlm {

// ---------------------------------------------------------------------------
// soft prompts

// A trainable prompt_len x hidden_dim embedding block prepended to the
// input. Role tags follow the training stage: p (shared prompt tuning),
// p' (encoder prompt inside the generator), p1/p2 (textual recursion).
template <class S>
struct SoftPrompt {
  Tensor<S> emb;
  std::string role;

  int64_t length() const { return emb.rows(); }
};

template <class S>
SoftPrompt<S> make_soft_prompt(ParamStore<S>& store, const std::string& name, int64_t prompt_len,
                               int64_t hidden_dim, const std::string& role, Rng& rng,
                               double stddev = 0.02) {
  SoftPrompt<S> p;
  p.emb = store.add_normal(name, {prompt_len, hidden_dim}, Partition::trainable, rng, stddev);
  p.role = role;
  return p;
}

// [prompt embeddings ; embed(x)] ready for the decoder's embedding entry.
// A zero-length prompt reproduces the plain token path bit for bit.
template <class S>
Tensor<S> prepend_prompt(const TransformerModel<S>& lm, const Tensor<S>& prompt_emb,
                         std::span<const int> ids) {
  if (prompt_emb.defined() && prompt_emb.rows() > 0 && prompt_emb.cols() != lm.cfg.hidden_dim)
    throw std::invalid_argument("prepend_prompt: prompt width must equal hidden_dim");
  const int64_t prompt_len = prompt_emb.defined() ? prompt_emb.rows() : 0;
  const int64_t total = prompt_len + int64_t(ids.size());
  if (total > lm.cfg.context_window)
    throw std::invalid_argument("prepend_prompt: sequence of " + std::to_string(total) +
                                " tokens exceeds context window of " +
                                std::to_string(lm.cfg.context_window) + "; truncation required: " +
                                std::to_string(total - lm.cfg.context_window));
  if (prompt_len == 0) return lm.embed_tokens(ids);
  if (ids.empty()) return prompt_emb;
  std::vector<Tensor<S>> parts{prompt_emb, lm.embed_tokens(ids)};
  return concat_rows(parts);
}

// ---------------------------------------------------------------------------
// input-dependent prompt generator

struct GeneratorDims {
  int64_t enc_dim = 64;
  int64_t enc_heads = 4;
  int64_t ffn_mult = 4;
  int64_t p_prime_len = 8;
  int64_t num_queries = 32;  // K: fixed output prompt length
  int64_t lm_dim = 128;

  int64_t ffn() const { return enc_dim * ffn_mult; }
};

struct GeneratorCensus {
  int64_t encoder_prompt = 0;
  int64_t cross_attention = 0;  // K queries + one attention/MLP block
  int64_t self_attention = 0;   // two blocks
  int64_t expansion = 0;
  int64_t total() const { return encoder_prompt + cross_attention + self_attention + expansion; }
};

// Closed-form trainable parameter count; equals the registered tensor sizes
// exactly by construction.
inline GeneratorCensus prompt_generator_census(const GeneratorDims& d) {
  const int64_t block = 4 * d.enc_dim * d.enc_dim + 2 * d.enc_dim * d.ffn() + d.ffn() + 9 * d.enc_dim;
  GeneratorCensus c;
  c.encoder_prompt = d.p_prime_len * d.enc_dim;
  c.cross_attention = d.num_queries * d.enc_dim + block;
  c.self_attention = 2 * block;
  c.expansion = d.enc_dim * d.lm_dim;
  return c;
}

// Frozen encoder + trainable encoder prompt p' + fixed-query cross-attention
// resampler + 2 self-attention blocks + a shared expansion matrix into the
// LM's hidden width. Output length is always num_queries, whatever the
// input length.
template <class S>
struct PromptGenerator {
  const TransformerModel<S>* encoder = nullptr;  // frozen
  GeneratorDims dims;
  Tensor<S> p_prime;  // [p_prime_len, enc_dim]
  Tensor<S> queries;  // [num_queries, enc_dim]
  TransformerBlock<S> cross;
  TransformerBlock<S> self1, self2;
  Tensor<S> expand;  // [enc_dim, lm_dim]

  static PromptGenerator init(ParamStore<S>& store, const std::string& prefix,
                              const TransformerModel<S>* encoder, const GeneratorDims& dims,
                              Rng& rng) {
    if (encoder->cfg.hidden_dim != dims.enc_dim)
      throw std::invalid_argument("generator enc_dim must match encoder hidden_dim");
    PromptGenerator g;
    g.encoder = encoder;
    g.dims = dims;
    const auto part = Partition::trainable;
    g.p_prime = store.add_normal(prefix + ".p_prime", {dims.p_prime_len, dims.enc_dim}, part, rng,
                                 0.02);
    g.queries =
        store.add_normal(prefix + ".queries", {dims.num_queries, dims.enc_dim}, part, rng, 0.02);
    g.cross = TransformerBlock<S>::init(store, prefix + ".cross", dims.enc_dim, dims.enc_heads,
                                        dims.ffn(), part, rng);
    g.self1 = TransformerBlock<S>::init(store, prefix + ".self0", dims.enc_dim, dims.enc_heads,
                                        dims.ffn(), part, rng);
    g.self2 = TransformerBlock<S>::init(store, prefix + ".self1", dims.enc_dim, dims.enc_heads,
                                        dims.ffn(), part, rng);
    g.expand = store.add_normal(prefix + ".expand", {dims.enc_dim, dims.lm_dim}, part, rng, 0.02);
    return g;
  }

  // p(x): deterministic, differentiable, length exactly num_queries
  Tensor<S> generate(std::span<const int> x) const {
    if (x.empty()) throw std::invalid_argument("generate_prompt: empty input");
    PromptedInput<S> in{p_prime, std::vector<int>(x.begin(), x.end())};
    auto enc_out = encode(*encoder, in);
    auto latents = cross.apply_cross(queries, enc_out);
    latents = self1.apply(latents, /*causal=*/false);
    latents = self2.apply(latents, /*causal=*/false);
    return matmul(latents, expand);
  }
};

template <class S>
Tensor<S> generate_prompt(const PromptGenerator<S>& gen, std::span<const int> x) {
  return gen.generate(x);
}

// ---------------------------------------------------------------------------
// prompt distance

// Cosine distance 1 - a.b/(|a||b|) averaged over aligned prompt positions.
template <class S>
double prompt_distance(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) throw std::invalid_argument("prompt_distance: shape mismatch");
  const int64_t k = a.rows(), d = a.cols();
  double total = 0.0;
  for (int64_t i = 0; i < k; ++i) {
    double dot = 0, na = 0, nb = 0;
    for (int64_t j = 0; j < d; ++j) {
      const double x = double(a.val()[size_t(i * d + j)]);
      const double y = double(b.val()[size_t(i * d + j)]);
      dot += x * y;
      na += x * x;
      nb += y * y;
    }
    if (na == 0.0 || nb == 0.0)
      throw std::invalid_argument("prompt_distance: zero-norm position vector");
    total += 1.0 - dot / (std::sqrt(na) * std::sqrt(nb));
  }
  return total / double(k);
}

// ---------------------------------------------------------------------------
// adapter training

struct DevPoint {
  int64_t step = 0;
  double score = 0.0;
};

struct AdapterTrainResult {
  std::vector<DevPoint> trace;
  int64_t best_step = 0;
  double best_score = 0.0;
  std::vector<std::string> disconnected;  // parameters the loss never reached
};

struct AdapterTrainConfig {
  OptimizerConfig opt;
  int64_t steps = 1000;
  int64_t batch_size = 8;
  int64_t eval_interval = 0;  // 0 disables periodic dev evaluation
  uint64_t seed = 0;
};

// One supervised example, already rendered to token ids.
struct SeqExample {
  std::vector<int> input_ids;
  std::vector<int> target_ids;  // without EOS; the trainer appends it
};

// Teacher-forced loss of target (plus EOS) given [prefix ; input]. Logit
// rows are restricted to target positions before the unembedding matmul.
template <class S>
Tensor<S> sequence_loss(const TransformerModel<S>& lm, const std::optional<Tensor<S>>& prefix,
                        const SeqExample& ex) {
  std::vector<int> full = ex.input_ids;
  full.insert(full.end(), ex.target_ids.begin(), ex.target_ids.end());
  full.push_back(Vocabulary::eos_id);
  const int64_t prefix_len = prefix ? prefix->rows() : 0;
  if (prefix_len + int64_t(full.size()) > lm.cfg.context_window)
    throw std::invalid_argument("sequence_loss: example exceeds context window");
  Tensor<S> x = prefix ? prepend_prompt(lm, *prefix, full) : lm.embed_tokens(full);
  auto fwd = lm.forward_embeddings(x, InjectAt::embedding, /*want_logits=*/false);
  const int64_t in_len = int64_t(ex.input_ids.size());
  const int64_t n = int64_t(full.size());
  auto rows = slice_rows(fwd.final_tap, prefix_len + in_len - 1, prefix_len + n - 1);
  auto logits = lm.unembed(rows);
  std::vector<int> targets(full.begin() + in_len, full.end());
  return cross_entropy<S>(logits, targets);
}

// Trains whatever is TRAINABLE in the store against examples drawn from
// `sample_example`, with the prompt prefix recomputed per example via
// `prefix_fn` (shared prompt, generated p(x), or none). Dev scores are
// recorded every eval_interval steps and the best snapshot (earliest step
// on ties) is restored on return.
template <class S>
AdapterTrainResult train_adapter(ParamStore<S>& store, const TransformerModel<S>& lm,
                                 std::function<std::optional<Tensor<S>>(const SeqExample&)> prefix_fn,
                                 std::function<SeqExample(Rng&)> sample_example,
                                 std::function<double()> dev_eval,
                                 const AdapterTrainConfig& tc) {
  tc.opt.validate();
  const auto trainable = store.tensors(Partition::trainable);
  if (trainable.empty()) throw std::invalid_argument("train_adapter: trainable set is empty");
  AdamState<S> adam;
  Rng rng(tc.seed);
  AdapterTrainResult result;
  result.best_score = -1e300;
  std::unordered_map<std::string, std::vector<S>> best_snap;
  std::unordered_set<std::string> disconnected_seen;

  for (int64_t step = 1; step <= tc.steps; ++step) {
    for (int64_t bi = 0; bi < tc.batch_size; ++bi) {
      SeqExample ex = sample_example(rng);
      std::optional<Tensor<S>> prefix;
      if (prefix_fn) prefix = prefix_fn(ex);
      auto loss = sequence_loss(lm, prefix, ex);
      auto report = backward(loss, std::span<const Tensor<S>>(trainable.data(), trainable.size()),
                             S(1.0 / double(tc.batch_size)));
      for (auto& name : report.disconnected) disconnected_seen.insert(name);
    }
    // disconnected trainables carry zero grad for this step
    for (const auto& t : trainable) t.node()->ensure_grad();
    const double lr = lr_schedule(tc.opt, step - 1, tc.steps);
    adam_step(store, adam, tc.opt, step, lr);
    store.zero_grads();
    if (tc.eval_interval > 0 && dev_eval && step % tc.eval_interval == 0) {
      const double score = dev_eval();
      result.trace.push_back({step, score});
      if (score > result.best_score) {
        result.best_score = score;
        result.best_step = step;
        best_snap = store.snapshot(Partition::trainable);
      }
    }
  }
  if (!best_snap.empty()) store.restore(best_snap);
  result.disconnected.assign(disconnected_seen.begin(), disconnected_seen.end());
  std::sort(result.disconnected.begin(), result.disconnected.end());
  return result;
}

}  // namespace frozenlm
