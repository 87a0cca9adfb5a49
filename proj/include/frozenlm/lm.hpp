#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "frozenlm/optim.hpp"
#include "frozenlm/param_store.hpp"
#include "frozenlm/tensor.hpp"
#include "frozenlm/vocab.hpp"

namespace frozenlm {

struct LMConfig {
  int64_t vocab_size = 512;
  int64_t hidden_dim = 128;
  int64_t num_layers = 4;
  int64_t num_heads = 4;
  int64_t context_window = 256;
  bool causal = true;
  int64_t ffn_mult = 4;

  int64_t head_dim() const { return hidden_dim / num_heads; }
  int64_t ffn_dim() const { return hidden_dim * ffn_mult; }

  void validate() const {
    if (hidden_dim % num_heads != 0)
      throw std::invalid_argument("hidden_dim must be divisible by num_heads");
    if (context_window < 8) throw std::invalid_argument("context_window must be >= 8");
    if (vocab_size < 5) throw std::invalid_argument("vocab_size too small");
  }
};

enum class InjectAt { embedding, layer1 };

// Pre-LN transformer block: x + attn(ln1(x)), then x + mlp(ln2(x)).
// Shared by the LM, the encoder, the prompt generator and the Connector.
template <class S>
struct TransformerBlock {
  int64_t dim = 0, heads = 1, ffn = 0;
  Tensor<S> ln1_g, ln1_b;
  Tensor<S> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<S> ln2_g, ln2_b;
  Tensor<S> w1, b1, w2, b2;

  static int64_t param_count(int64_t dim, int64_t ffn) {
    return 4 * dim * dim + 2 * dim * ffn + ffn + 9 * dim;
  }

  static TransformerBlock init(ParamStore<S>& store, const std::string& prefix, int64_t dim,
                               int64_t heads, int64_t ffn, Partition part, Rng& rng,
                               double stddev = 0.02) {
    TransformerBlock b;
    b.dim = dim;
    b.heads = heads;
    b.ffn = ffn;
    b.ln1_g = store.add_full(prefix + ".ln1.g", {dim}, part, S(1));
    b.ln1_b = store.add_full(prefix + ".ln1.b", {dim}, part, S(0));
    b.wq = store.add_normal(prefix + ".attn.wq", {dim, dim}, part, rng, stddev);
    b.bq = store.add_full(prefix + ".attn.bq", {dim}, part, S(0));
    b.wk = store.add_normal(prefix + ".attn.wk", {dim, dim}, part, rng, stddev);
    b.bk = store.add_full(prefix + ".attn.bk", {dim}, part, S(0));
    b.wv = store.add_normal(prefix + ".attn.wv", {dim, dim}, part, rng, stddev);
    b.bv = store.add_full(prefix + ".attn.bv", {dim}, part, S(0));
    b.wo = store.add_normal(prefix + ".attn.wo", {dim, dim}, part, rng, stddev);
    b.bo = store.add_full(prefix + ".attn.bo", {dim}, part, S(0));
    b.ln2_g = store.add_full(prefix + ".ln2.g", {dim}, part, S(1));
    b.ln2_b = store.add_full(prefix + ".ln2.b", {dim}, part, S(0));
    b.w1 = store.add_normal(prefix + ".mlp.w1", {dim, ffn}, part, rng, stddev);
    b.b1 = store.add_full(prefix + ".mlp.b1", {ffn}, part, S(0));
    b.w2 = store.add_normal(prefix + ".mlp.w2", {ffn, dim}, part, rng, stddev);
    b.b2 = store.add_full(prefix + ".mlp.b2", {dim}, part, S(0));
    return b;
  }

  static TransformerBlock bind(const ParamStore<S>& store, const std::string& prefix,
                               int64_t dim, int64_t heads, int64_t ffn) {
    TransformerBlock b;
    b.dim = dim;
    b.heads = heads;
    b.ffn = ffn;
    b.ln1_g = store.get(prefix + ".ln1.g");
    b.ln1_b = store.get(prefix + ".ln1.b");
    b.wq = store.get(prefix + ".attn.wq");
    b.bq = store.get(prefix + ".attn.bq");
    b.wk = store.get(prefix + ".attn.wk");
    b.bk = store.get(prefix + ".attn.bk");
    b.wv = store.get(prefix + ".attn.wv");
    b.bv = store.get(prefix + ".attn.bv");
    b.wo = store.get(prefix + ".attn.wo");
    b.bo = store.get(prefix + ".attn.bo");
    b.ln2_g = store.get(prefix + ".ln2.g");
    b.ln2_b = store.get(prefix + ".ln2.b");
    b.w1 = store.get(prefix + ".mlp.w1");
    b.b1 = store.get(prefix + ".mlp.b1");
    b.w2 = store.get(prefix + ".mlp.w2");
    b.b2 = store.get(prefix + ".mlp.b2");
    return b;
  }

  // multi-head attention; kv defaults to the query-side input (self
  // attention), pass encoder outputs for cross attention
  Tensor<S> attention(const Tensor<S>& q_in, const Tensor<S>& kv_in, bool causal) const {
    const int64_t dh = dim / heads;
    auto q = add_bias(matmul(q_in, wq), bq);
    auto k = add_bias(matmul(kv_in, wk), bk);
    auto v = add_bias(matmul(kv_in, wv), bv);
    std::vector<Tensor<S>> head_outs;
    head_outs.reserve(size_t(heads));
    const S inv_sqrt = S(1) / std::sqrt(S(dh));
    for (int64_t h = 0; h < heads; ++h) {
      auto qh = slice_cols(q, h * dh, (h + 1) * dh);
      auto kh = slice_cols(k, h * dh, (h + 1) * dh);
      auto vh = slice_cols(v, h * dh, (h + 1) * dh);
      auto scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
      auto probs = causal ? causal_softmax(scores) : softmax_rows(scores);
      head_outs.push_back(matmul(probs, vh));
    }
    return add_bias(matmul(concat_cols(head_outs), wo), bo);
  }

  Tensor<S> mlp_out(const Tensor<S>& x) const {
    return add_bias(matmul(gelu(add_bias(matmul(x, w1), b1)), w2), b2);
  }

  Tensor<S> apply(const Tensor<S>& x, bool causal, Rng* dropout_rng = nullptr,
                  double dropout_rate = 0.0) const {
    auto ln = layernorm_rows(x, ln1_g, ln1_b);
    auto a = attention(ln, ln, causal);
    if (dropout_rng) a = dropout(a, dropout_rate, *dropout_rng);
    auto y = add(x, a);
    auto m = mlp_out(layernorm_rows(y, ln2_g, ln2_b));
    if (dropout_rng) m = dropout(m, dropout_rate, *dropout_rng);
    return add(y, m);
  }

  // cross attention: queries from `latents`, keys/values from `context`
  Tensor<S> apply_cross(const Tensor<S>& latents, const Tensor<S>& context) const {
    auto a = attention(layernorm_rows(latents, ln1_g, ln1_b), context, /*causal=*/false);
    auto y = add(latents, a);
    return add(y, mlp_out(layernorm_rows(y, ln2_g, ln2_b)));
  }
};

// Decoder LM (causal=true) or bidirectional encoder stand-in (causal=false).
// Positions are learned-absolute and added at the entry point for token and
// injected-embedding paths alike: the frozen layers are pretrained with
// positions present, so layer-1 injected states receive them too. With
// nothing else between the embedding and the first block, the two InjectAt
// taps coincide.
template <class S>
struct TransformerModel {
  LMConfig cfg;
  Tensor<S> tok_emb;  // [V, D]; unembedding is the tied transpose
  Tensor<S> pos_emb;  // [context, D]
  std::vector<TransformerBlock<S>> blocks;
  Tensor<S> lnf_g, lnf_b;

  struct ForwardOut {
    Tensor<S> embedding_tap;            // entry states, positions included
    std::vector<Tensor<S>> layer_taps;  // residual stream after each block
    Tensor<S> final_tap;                // post final layernorm, pre-unembedding
    Tensor<S> logits;                   // [T, V] when requested
  };

  static TransformerModel init(ParamStore<S>& store, const std::string& prefix,
                               const LMConfig& cfg, Rng& rng, Partition part) {
    cfg.validate();
    TransformerModel m;
    m.cfg = cfg;
    const double sd = 0.02;
    m.tok_emb = store.add_normal(prefix + ".emb", {cfg.vocab_size, cfg.hidden_dim}, part, rng, sd);
    m.pos_emb =
        store.add_normal(prefix + ".pos", {cfg.context_window, cfg.hidden_dim}, part, rng, sd);
    for (int64_t l = 0; l < cfg.num_layers; ++l)
      m.blocks.push_back(TransformerBlock<S>::init(store, prefix + ".h" + std::to_string(l),
                                                   cfg.hidden_dim, cfg.num_heads, cfg.ffn_dim(),
                                                   part, rng, sd));
    m.lnf_g = store.add_full(prefix + ".lnf.g", {cfg.hidden_dim}, part, S(1));
    m.lnf_b = store.add_full(prefix + ".lnf.b", {cfg.hidden_dim}, part, S(0));
    return m;
  }

  static TransformerModel bind(const ParamStore<S>& store, const std::string& prefix,
                               const LMConfig& cfg) {
    cfg.validate();
    TransformerModel m;
    m.cfg = cfg;
    m.tok_emb = store.get(prefix + ".emb");
    m.pos_emb = store.get(prefix + ".pos");
    for (int64_t l = 0; l < cfg.num_layers; ++l)
      m.blocks.push_back(TransformerBlock<S>::bind(store, prefix + ".h" + std::to_string(l),
                                                   cfg.hidden_dim, cfg.num_heads, cfg.ffn_dim()));
    m.lnf_g = store.get(prefix + ".lnf.g");
    m.lnf_b = store.get(prefix + ".lnf.b");
    return m;
  }

  // runs the block stack over entry states that already include positions
  ForwardOut run(Tensor<S> x, bool want_logits, bool want_layer_taps = false) const {
    ForwardOut out;
    out.embedding_tap = x;
    for (const auto& b : blocks) {
      x = b.apply(x, cfg.causal);
      if (want_layer_taps) out.layer_taps.push_back(x);
    }
    out.final_tap = layernorm_rows(x, lnf_g, lnf_b);
    if (want_logits) out.logits = unembed(out.final_tap);
    return out;
  }

  Tensor<S> unembed(const Tensor<S>& h) const { return matmul(h, transpose(tok_emb)); }

  Tensor<S> embed_tokens(std::span<const int> ids) const { return embedding(tok_emb, ids); }

  Tensor<S> add_positions(const Tensor<S>& e) const {
    if (e.rows() > cfg.context_window) throw std::invalid_argument("input exceeds context window");
    return add(e, slice_rows(pos_emb, 0, e.rows()));
  }

  ForwardOut forward_tokens(std::span<const int> ids, bool want_logits = true,
                            bool want_layer_taps = false) const {
    if (int64_t(ids.size()) > cfg.context_window)
      throw std::invalid_argument("input exceeds context window");
    if (ids.empty()) throw std::invalid_argument("forward_tokens: empty input");
    return run(add_positions(embed_tokens(ids)), want_logits, want_layer_taps);
  }

  // embedding-sequence entry; `at` names the tap the caller targets (the
  // paths coincide here, see the class comment)
  ForwardOut forward_embeddings(const Tensor<S>& e, InjectAt /*at*/, bool want_logits = true,
                                bool want_layer_taps = false) const {
    if (e.shape().size() != 2 || e.cols() != cfg.hidden_dim)
      throw std::invalid_argument("injected embeddings must be [T, hidden_dim]");
    if (e.rows() > cfg.context_window) throw std::invalid_argument("input exceeds context window");
    return run(add_positions(e), want_logits, want_layer_taps);
  }
};

// ---------------------------------------------------------------------------
// prompted inputs, generation, scoring

template <class S>
struct PromptedInput {
  // optional soft-prompt embeddings prepended ahead of the token ids
  std::optional<Tensor<S>> prefix_embeddings;
  std::vector<int> ids;
};

template <class S>
Tensor<S> assemble_input(const TransformerModel<S>& lm, const PromptedInput<S>& in) {
  if (!in.prefix_embeddings) {
    if (in.ids.empty()) throw std::invalid_argument("empty prompted input");
    return lm.embed_tokens(in.ids);
  }
  if (in.ids.empty()) return *in.prefix_embeddings;
  std::vector<Tensor<S>> parts{*in.prefix_embeddings, lm.embed_tokens(in.ids)};
  return concat_rows(parts);
}

// Bidirectional encoding of an optional learned prompt followed by input
// tokens; returns one output vector per position, prompt positions included.
template <class S>
Tensor<S> encode(const TransformerModel<S>& enc, const PromptedInput<S>& in) {
  if (enc.cfg.causal) throw std::invalid_argument("encode: model is causal");
  auto x = assemble_input(enc, in);
  return enc.forward_embeddings(x, InjectAt::embedding, /*want_logits=*/false).final_tap;
}

struct Generation {
  std::vector<int> ids;  // generated tokens, EOS excluded
  std::string text;
  double logprob = 0.0;  // model log-probability of the emitted sequence
  bool hit_eos = false;
};

namespace detail {
template <class S>
int sample_index(const std::vector<S>& logits, double temperature, Rng* rng) {
  if (temperature <= 0.0) {
    int best = 0;
    for (size_t j = 1; j < logits.size(); ++j)
      if (logits[j] > logits[size_t(best)]) best = int(j);
    return best;
  }
  double mx = -1e300;
  for (S v : logits) mx = std::max(mx, double(v));
  std::vector<double> p(logits.size());
  double z = 0;
  for (size_t j = 0; j < logits.size(); ++j) {
    p[j] = std::exp((double(logits[j]) - mx) / temperature);
    z += p[j];
  }
  double u = rng->uniform() * z;
  double acc = 0;
  for (size_t j = 0; j < p.size(); ++j) {
    acc += p[j];
    if (u < acc) return int(j);
  }
  return int(p.size()) - 1;
}

template <class S>
double token_logprob(const std::vector<S>& logits, int id) {
  double mx = -1e300;
  for (S v : logits) mx = std::max(mx, double(v));
  double z = 0;
  for (S v : logits) z += std::exp(double(v) - mx);
  return (double(logits[size_t(id)]) - mx) - std::log(z);
}
}  // namespace detail

// Autoregressive decoding. temperature = 0 is greedy argmax (lowest id wins
// ties); otherwise softmax sampling at the given temperature. The reported
// logprob is the model's temperature-1 log-probability of the emitted
// tokens, including the terminating EOS when one was produced.
template <class S>
Generation generate(const TransformerModel<S>& lm, const Vocabulary& vocab,
                    const PromptedInput<S>& in, double temperature, int max_len,
                    Rng* rng = nullptr) {
  if (max_len < 1) throw std::invalid_argument("generate: max_len must be >= 1");
  if (temperature < 0) throw std::invalid_argument("generate: temperature must be >= 0");
  NoGradGuard ng;
  Generation g;
  std::vector<int> ids = in.ids;
  const int64_t prefix_rows = in.prefix_embeddings ? in.prefix_embeddings->rows() : 0;
  for (int stepi = 0; stepi < max_len; ++stepi) {
    if (prefix_rows + int64_t(ids.size()) >= lm.cfg.context_window) break;
    PromptedInput<S> cur{in.prefix_embeddings, ids};
    auto x = assemble_input(lm, cur);
    auto fwd = lm.forward_embeddings(x, InjectAt::embedding, /*want_logits=*/false);
    auto last_row = slice_rows(fwd.final_tap, fwd.final_tap.rows() - 1, fwd.final_tap.rows());
    auto logits = lm.unembed(last_row);
    std::vector<S> last = logits.val();
    const int next = detail::sample_index(last, temperature, rng);
    g.logprob += detail::token_logprob(last, next);
    if (next == Vocabulary::eos_id) {
      g.hit_eos = true;
      break;
    }
    ids.push_back(next);
    g.ids.push_back(next);
  }
  g.text = vocab.decode(g.ids);
  return g;
}

// Sum of per-token log-softmax values of `target` conditioned on the
// prompted input (teacher forcing). Empty target scores 0 exactly.
template <class S>
double score_sequence(const TransformerModel<S>& lm, const PromptedInput<S>& in,
                      std::span<const int> target) {
  if (target.empty()) return 0.0;
  NoGradGuard ng;
  std::vector<int> ids = in.ids;
  ids.insert(ids.end(), target.begin(), target.end());
  PromptedInput<S> cur{in.prefix_embeddings, ids};
  auto x = assemble_input(lm, cur);
  auto fwd = lm.forward_embeddings(x, InjectAt::embedding, /*want_logits=*/false);
  const int64_t input_rows = x.rows() - int64_t(target.size());
  auto rows = slice_rows(fwd.final_tap, input_rows - 1, x.rows() - 1);
  auto logits = lm.unembed(rows);
  const int64_t v = logits.cols();
  double total = 0.0;
  for (size_t j = 0; j < target.size(); ++j) {
    std::vector<S> row(logits.val().begin() + int64_t(j) * v,
                       logits.val().begin() + int64_t(j + 1) * v);
    total += detail::token_logprob(row, target[j]);
  }
  return total;
}

// ---------------------------------------------------------------------------
// pretraining

struct PretrainTrace {
  std::vector<double> loss_per_step;

  double mean_over(size_t begin, size_t end) const {
    double s = 0;
    for (size_t i = begin; i < end && i < loss_per_step.size(); ++i) s += loss_per_step[i];
    return s / double(std::min(end, loss_per_step.size()) - begin);
  }
};

// Next-token pretraining of the decoder over one-document-per-line text.
// On return every parameter under `prefix` is tagged FROZEN.
template <class S>
PretrainTrace pretrain_lm(ParamStore<S>& store, TransformerModel<S>& lm,
                          const std::string& prefix, const Vocabulary& vocab,
                          const std::vector<std::string>& corpus, const OptimizerConfig& opt,
                          int64_t steps, int64_t batch_size, uint64_t seed) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_lm: empty corpus");
  opt.validate();
  store.set_partition_prefix(prefix, Partition::trainable);
  AdamState<S> adam;
  Rng rng(seed);
  PretrainTrace trace;
  for (int64_t step = 1; step <= steps; ++step) {
    double batch_loss = 0.0;
    for (int64_t bi = 0; bi < batch_size; ++bi) {
      const auto& doc = corpus[size_t(rng.uniform_int(corpus.size()))];
      std::vector<int> toks = vocab.encode(doc);
      toks.push_back(Vocabulary::eos_id);
      if (int64_t(toks.size()) > lm.cfg.context_window) toks.resize(size_t(lm.cfg.context_window));
      if (toks.size() < 2) continue;
      std::span<const int> inputs(toks.data(), toks.size() - 1);
      std::span<const int> targets(toks.data() + 1, toks.size() - 1);
      auto fwd = lm.forward_tokens(inputs, /*want_logits=*/true);
      auto loss = cross_entropy(fwd.logits, targets);
      batch_loss += double(loss.item());
      backward(loss, {}, S(1.0 / double(batch_size)));
    }
    const double lr = lr_schedule(opt, step - 1, steps);
    adam_step(store, adam, opt, step, lr);
    store.zero_grads();
    trace.loss_per_step.push_back(batch_loss / double(batch_size));
  }
  store.set_partition_prefix(prefix, Partition::frozen);
  return trace;
}

// Masked-token pretraining for the bidirectional encoder: mask_rate of the
// positions are replaced by UNK and the original ids are predicted there.
template <class S>
PretrainTrace pretrain_encoder_masked(ParamStore<S>& store, TransformerModel<S>& enc,
                                      const std::string& prefix, const Vocabulary& vocab,
                                      const std::vector<std::string>& corpus,
                                      const OptimizerConfig& opt, int64_t steps,
                                      int64_t batch_size, uint64_t seed,
                                      double mask_rate = 0.15) {
  if (corpus.empty()) throw std::invalid_argument("pretrain_encoder_masked: empty corpus");
  opt.validate();
  store.set_partition_prefix(prefix, Partition::trainable);
  AdamState<S> adam;
  Rng rng(seed);
  PretrainTrace trace;
  for (int64_t step = 1; step <= steps; ++step) {
    double batch_loss = 0.0;
    int64_t used = 0;
    for (int64_t bi = 0; bi < batch_size; ++bi) {
      const auto& doc = corpus[size_t(rng.uniform_int(corpus.size()))];
      std::vector<int> toks = vocab.encode(doc);
      if (int64_t(toks.size()) > enc.cfg.context_window)
        toks.resize(size_t(enc.cfg.context_window));
      if (toks.empty()) continue;
      std::vector<int> corrupted = toks;
      std::vector<int64_t> masked_pos;
      std::vector<int> masked_tgt;
      for (size_t i = 0; i < toks.size(); ++i) {
        if (rng.uniform() < mask_rate) {
          corrupted[i] = Vocabulary::unk_id;
          masked_pos.push_back(int64_t(i));
          masked_tgt.push_back(toks[i]);
        }
      }
      if (masked_pos.empty()) {
        masked_pos.push_back(0);
        masked_tgt.push_back(toks[0]);
        corrupted[0] = Vocabulary::unk_id;
      }
      auto fwd = enc.forward_tokens(corrupted, /*want_logits=*/false);
      auto picked = gather_rows(fwd.final_tap, masked_pos);
      auto logits = enc.unembed(picked);
      auto loss = cross_entropy(logits, masked_tgt);
      batch_loss += double(loss.item());
      backward(loss, {}, S(1.0 / double(batch_size)));
      ++used;
    }
    if (used == 0) continue;
    const double lr = lr_schedule(opt, step - 1, steps);
    adam_step(store, adam, opt, step, lr);
    store.zero_grads();
    trace.loss_per_step.push_back(batch_loss / double(used));
  }
  store.set_partition_prefix(prefix, Partition::frozen);
  return trace;
}

}  // namespace frozenlm
