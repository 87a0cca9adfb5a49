#pragma once

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "frozenlm/adapters.hpp"
#include "frozenlm/lm.hpp"
#include "frozenlm/reader.hpp"

namespace frozenlm {

// ---------------------------------------------------------------------------
// textual LM recursion

struct Candidate {
  std::string text;
  double logprob = 0.0;
};

struct CandidateSet {
  std::string question;
  std::vector<Candidate> candidates;  // deduplicated, descending logprob
  int n_requested = 0;
};

// n temperature-1 samples from the p1-tuned model. Sample i draws from a
// stream derived from (seed, i), so sets for nested n share a sample prefix
// and recall@n is monotone by construction. Exact-string duplicates are
// merged and candidates are ordered by score_sequence, descending.
template <class S>
CandidateSet sample_candidates(const TransformerModel<S>& lm, const Vocabulary& vocab,
                               const Tensor<S>& p1, const std::string& question, int n,
                               uint64_t seed, int max_len = 8) {
  if (n < 1) throw std::invalid_argument("sample_candidates: n must be >= 1");
  CandidateSet set;
  set.question = question;
  set.n_requested = n;
  const auto qids = vocab.encode(question);
  PromptedInput<S> in{p1, qids};
  Rng base(seed);
  std::vector<std::string> samples;
  for (int i = 0; i < n; ++i) {
    Rng sample_rng = base.fork(uint64_t(i));
    auto g = generate(lm, vocab, in, 1.0, max_len, &sample_rng);
    samples.push_back(g.text);
  }
  std::vector<std::string> unique;
  for (const auto& s : samples)
    if (std::find(unique.begin(), unique.end(), s) == unique.end()) unique.push_back(s);
  for (const auto& text : unique) {
    auto ids = vocab.encode(text);
    ids.push_back(Vocabulary::eos_id);
    set.candidates.push_back({text, score_sequence(lm, in, ids)});
  }
  std::sort(set.candidates.begin(), set.candidates.end(), [](const Candidate& a, const Candidate& b) {
    if (a.logprob != b.logprob) return a.logprob > b.logprob;
    return a.text < b.text;
  });
  return set;
}

// fraction of questions whose gold answer appears among the candidates
inline double recall_at_n(const std::vector<CandidateSet>& sets,
                          const std::vector<std::vector<std::string>>& golds) {
  if (sets.size() != golds.size())
    throw std::invalid_argument("recall_at_n: sets/golds size mismatch");
  if (sets.empty()) return 0.0;
  int64_t hits = 0;
  for (size_t i = 0; i < sets.size(); ++i) {
    bool hit = false;
    for (const auto& c : sets[i].candidates)
      for (const auto& g : golds[i])
        if (normalize_answer(c.text) == normalize_answer(g)) hit = true;
    hits += hit ? 1 : 0;
  }
  return double(hits) / double(sets.size());
}

struct RecursiveRendering {
  std::string text;
  int dropped_candidates = 0;
};

// Deterministic second-pass rendering:
//   question : {q} <sep> candidates : a1 ; a2 ; ... <sep> answer :
// Lowest-ranked candidates are dropped when the rendering would not leave
// room for the answer inside the context window.
inline RecursiveRendering build_recursive_input(const std::string& question,
                                                const CandidateSet& set, int64_t max_tokens) {
  RecursiveRendering out;
  auto render = [&](size_t k) {
    std::string s = "question : " + question + " <sep> candidates :";
    for (size_t i = 0; i < k; ++i) {
      if (i) s += " ;";
      s += " " + set.candidates[i].text;
    }
    s += " <sep> answer :";
    return s;
  };
  size_t keep = set.candidates.size();
  out.text = render(keep);
  while (keep > 0 && int64_t(split_whitespace(out.text).size()) > max_tokens) {
    --keep;
    ++out.dropped_candidates;
    out.text = render(keep);
  }
  return out;
}

// ---------------------------------------------------------------------------
// neural LM recursion

struct ConnectorConfig {
  int64_t layers = 2;        // 1 or 2
  int64_t hidden_dim = 128;  // equals the LM's hidden width
  int64_t num_heads = 4;     // cloned from the LM block hyperparameters
  int64_t ffn_mult = 4;
};

// Small autoregressive network of LM-shaped blocks; maps a hidden-state
// sequence to an equally long hidden-state sequence, causally.
template <class S>
struct Connector {
  ConnectorConfig ccfg;
  std::vector<TransformerBlock<S>> blocks;

  static Connector init(ParamStore<S>& store, const std::string& prefix,
                        const ConnectorConfig& ccfg, Rng& rng) {
    if (ccfg.layers < 1 || ccfg.layers > 2)
      throw std::invalid_argument("connector: layers must be 1 or 2");
    Connector c;
    c.ccfg = ccfg;
    for (int64_t l = 0; l < ccfg.layers; ++l)
      c.blocks.push_back(TransformerBlock<S>::init(store, prefix + ".h" + std::to_string(l),
                                                   ccfg.hidden_dim, ccfg.num_heads,
                                                   ccfg.hidden_dim * ccfg.ffn_mult,
                                                   Partition::trainable, rng));
    return c;
  }

  Tensor<S> forward(Tensor<S> x) const {
    if (x.cols() != ccfg.hidden_dim)
      throw std::invalid_argument("connector: width mismatch");
    for (const auto& b : blocks) x = b.apply(x, /*causal=*/true);
    return x;
  }

  // zeroes the residual-branch output projections; the connector becomes an
  // exact identity map
  void zero_residual_branches() {
    for (auto& b : blocks) {
      std::fill(b.wo.val().begin(), b.wo.val().end(), S(0));
      std::fill(b.bo.val().begin(), b.bo.val().end(), S(0));
      std::fill(b.w2.val().begin(), b.w2.val().end(), S(0));
      std::fill(b.b2.val().begin(), b.b2.val().end(), S(0));
    }
  }

  int64_t param_count() const {
    return ccfg.layers * TransformerBlock<S>::param_count(ccfg.hidden_dim,
                                                          ccfg.hidden_dim * ccfg.ffn_mult);
  }
};

enum class StackKind { lm_connector_lm, connector_lm, lm_connector };

inline const char* stack_kind_name(StackKind k) {
  switch (k) {
    case StackKind::lm_connector_lm: return "lm_connector_lm";
    case StackKind::connector_lm: return "connector_lm";
    default: return "lm_connector";
  }
}

// Composition of a frozen LM (used once or twice) with a trainable
// Connector:
//   LM-Connector-LM: pass-1 final pre-unembedding states -> Connector ->
//                    layer-1 injection of pass 2 -> pass-2 head
//   Connector-LM:    token embeddings -> Connector -> layer-1 injection
//   LM-Connector:    pass-1 final states -> Connector -> pass-1's head
template <class S>
struct Stack {
  StackKind kind = StackKind::lm_connector_lm;
  const TransformerModel<S>* lm = nullptr;  // frozen
  Connector<S>* connector = nullptr;

  Tensor<S> logits(std::span<const int> ids) const {
    switch (kind) {
      case StackKind::lm_connector_lm: {
        auto pass1 = lm->forward_tokens(ids, /*want_logits=*/false);
        auto bridged = connector->forward(pass1.final_tap);
        return lm->forward_embeddings(bridged, InjectAt::layer1, /*want_logits=*/true).logits;
      }
      case StackKind::connector_lm: {
        auto bridged = connector->forward(lm->embed_tokens(ids));
        return lm->forward_embeddings(bridged, InjectAt::layer1, /*want_logits=*/true).logits;
      }
      default: {
        auto pass1 = lm->forward_tokens(ids, /*want_logits=*/false);
        return lm->unembed(connector->forward(pass1.final_tap));
      }
    }
  }

  // final-tap rows for loss slicing without the full unembedding
  Tensor<S> head_states(std::span<const int> ids) const {
    switch (kind) {
      case StackKind::lm_connector_lm: {
        auto pass1 = lm->forward_tokens(ids, /*want_logits=*/false);
        auto bridged = connector->forward(pass1.final_tap);
        return lm->forward_embeddings(bridged, InjectAt::layer1, /*want_logits=*/false).final_tap;
      }
      case StackKind::connector_lm: {
        auto bridged = connector->forward(lm->embed_tokens(ids));
        return lm->forward_embeddings(bridged, InjectAt::layer1, /*want_logits=*/false).final_tap;
      }
      default: {
        auto pass1 = lm->forward_tokens(ids, /*want_logits=*/false);
        return connector->forward(pass1.final_tap);
      }
    }
  }
};

template <class S>
Stack<S> build_stack(StackKind kind, const TransformerModel<S>& lm, Connector<S>& connector) {
  if (connector.ccfg.hidden_dim != lm.cfg.hidden_dim)
    throw std::invalid_argument("build_stack: connector width must match LM hidden_dim");
  Stack<S> s;
  s.kind = kind;
  s.lm = &lm;
  s.connector = &connector;
  return s;
}

// Greedy full-stack autoregression: every emitted token re-enters at the
// bottom and flows through both passes.
template <class S>
Generation stack_generate(const Stack<S>& stack, const Vocabulary& vocab,
                          std::vector<int> ids, int max_len) {
  if (max_len < 1) throw std::invalid_argument("stack_generate: max_len must be >= 1");
  NoGradGuard ng;
  Generation g;
  for (int stepi = 0; stepi < max_len; ++stepi) {
    if (int64_t(ids.size()) >= stack.lm->cfg.context_window) break;
    auto logits = stack.logits(ids);
    const int64_t v = logits.cols();
    std::vector<S> last(logits.val().end() - v, logits.val().end());
    int best = 0;
    for (int64_t j = 1; j < v; ++j)
      if (last[size_t(j)] > last[size_t(best)]) best = int(j);
    g.logprob += detail::token_logprob(last, best);
    if (best == Vocabulary::eos_id) {
      g.hit_eos = true;
      break;
    }
    ids.push_back(best);
    g.ids.push_back(best);
  }
  g.text = vocab.decode(g.ids);
  return g;
}

// ---------------------------------------------------------------------------
// connector pretraining (language modeling through the frozen stack)

// Optimizes the Connector on next-token loss of the full stack over a
// fraction f <= 0.03 of the LM's pretraining corpus, gradients passing
// through the frozen LM.
template <class S>
PretrainTrace pretrain_connector(ParamStore<S>& store, const Stack<S>& stack,
                                 const Vocabulary& vocab,
                                 const std::vector<std::string>& pretrain_corpus, double fraction,
                                 const OptimizerConfig& opt, int64_t steps, int64_t batch_size,
                                 uint64_t seed) {
  if (fraction <= 0.0 || fraction > 0.03)
    throw std::invalid_argument("pretrain_connector: corpus fraction must be in (0, 0.03]");
  opt.validate();
  const size_t n_docs = std::max<size_t>(1, size_t(fraction * double(pretrain_corpus.size())));
  Rng pick(seed);
  std::vector<size_t> order(pretrain_corpus.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  pick.shuffle(order);
  std::vector<std::string> slice;
  for (size_t i = 0; i < n_docs; ++i) slice.push_back(pretrain_corpus[order[i]]);

  AdamState<S> adam;
  Rng rng(seed + 1);
  PretrainTrace trace;
  for (int64_t step = 1; step <= steps; ++step) {
    double batch_loss = 0;
    for (int64_t bi = 0; bi < batch_size; ++bi) {
      const auto& doc = slice[size_t(rng.uniform_int(slice.size()))];
      std::vector<int> toks = vocab.encode(doc);
      toks.push_back(Vocabulary::eos_id);
      if (int64_t(toks.size()) > stack.lm->cfg.context_window)
        toks.resize(size_t(stack.lm->cfg.context_window));
      if (toks.size() < 2) continue;
      std::span<const int> inputs(toks.data(), toks.size() - 1);
      std::vector<int> targets(toks.begin() + 1, toks.end());
      auto logits = stack.logits(inputs);
      auto loss = cross_entropy(logits, targets);
      batch_loss += double(loss.item());
      backward(loss, {}, S(1.0 / double(batch_size)));
    }
    const double lr = lr_schedule(opt, step - 1, steps);
    adam_step(store, adam, opt, step, lr);
    store.zero_grads();
    trace.loss_per_step.push_back(batch_loss / double(batch_size));
  }
  return trace;
}

// held-out next-token loss of the stack, for pretraining-vs-random checks
template <class S>
double stack_validation_loss(const Stack<S>& stack, const Vocabulary& vocab,
                             const std::vector<std::string>& docs) {
  NoGradGuard ng;
  double total = 0;
  int64_t count = 0;
  for (const auto& doc : docs) {
    std::vector<int> toks = vocab.encode(doc);
    toks.push_back(Vocabulary::eos_id);
    if (int64_t(toks.size()) > stack.lm->cfg.context_window)
      toks.resize(size_t(stack.lm->cfg.context_window));
    if (toks.size() < 2) continue;
    std::span<const int> inputs(toks.data(), toks.size() - 1);
    std::vector<int> targets(toks.begin() + 1, toks.end());
    auto loss = cross_entropy(stack.logits(inputs), targets);
    total += double(loss.item());
    ++count;
  }
  return count ? total / double(count) : 0.0;
}

// Supervised QA training of a stack: only the Connector is trainable.
template <class S>
AdapterTrainResult train_stack(ParamStore<S>& store, const Stack<S>& stack,
                               std::function<SeqExample(Rng&)> sample_example,
                               std::function<double()> dev_eval, const AdapterTrainConfig& tc) {
  tc.opt.validate();
  const auto trainable = store.tensors(Partition::trainable);
  if (trainable.empty()) throw std::invalid_argument("train_stack: trainable set is empty");
  AdamState<S> adam;
  Rng rng(tc.seed);
  AdapterTrainResult result;
  result.best_score = -1e300;
  std::unordered_map<std::string, std::vector<S>> best_snap;
  for (int64_t step = 1; step <= tc.steps; ++step) {
    for (int64_t bi = 0; bi < tc.batch_size; ++bi) {
      SeqExample ex = sample_example(rng);
      std::vector<int> full = ex.input_ids;
      full.insert(full.end(), ex.target_ids.begin(), ex.target_ids.end());
      full.push_back(Vocabulary::eos_id);
      auto states = stack.head_states(full);
      const int64_t in_len = int64_t(ex.input_ids.size());
      auto rows = slice_rows(states, in_len - 1, int64_t(full.size()) - 1);
      auto logits = stack.lm->unembed(rows);
      std::vector<int> targets(full.begin() + in_len, full.end());
      auto loss = cross_entropy(logits, targets);
      backward(loss, {}, S(1.0 / double(tc.batch_size)));
    }
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
  return result;
}

}  // namespace frozenlm
