#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "frozenlm/lm.hpp"

// Open-book pipeline: retrieval over a passage corpus, re-ranker training
// with the span-marginal + selection objective, greedy context packing into
// the frozen reader's token budget, and recall instrumentation.

namespace frozenlm {

struct Passage {
  std::string id;
  std::string text;
  double retriever_score = 0.0;
  std::optional<double> reranker_score;
};

enum class RetrievalBackend { bm25, dense };

// ---------------------------------------------------------------------------
// BM25 (Okapi; k1 = 1.2, b = 0.75, Robertson idf floored at a small epsilon)

class Bm25Index {
 public:
  static constexpr double k1 = 1.2;
  static constexpr double b = 0.75;

  explicit Bm25Index(const std::vector<Passage>& corpus) : corpus_(&corpus) {
    int64_t total_len = 0;
    doc_lens_.reserve(corpus.size());
    for (size_t d = 0; d < corpus.size(); ++d) {
      auto toks = split_whitespace(corpus[d].text);
      doc_lens_.push_back(int64_t(toks.size()));
      total_len += int64_t(toks.size());
      std::unordered_map<std::string, int64_t> tf;
      for (auto& t : toks) ++tf[t];
      for (auto& [term, f] : tf) postings_[term].push_back({d, f});
    }
    avg_len_ = corpus.empty() ? 0.0 : double(total_len) / double(corpus.size());
  }

  double idf(const std::string& term) const {
    const auto it = postings_.find(term);
    const double df = it == postings_.end() ? 0.0 : double(it->second.size());
    const double n = double(corpus_->size());
    return std::max(std::log((n - df + 0.5) / (df + 0.5)), 1e-6);
  }

  // score of one (query, doc) pair; the brute-force oracle recomputes this
  // sum term by term
  double score(const std::vector<std::string>& query_terms, size_t doc) const {
    double s = 0.0;
    for (const auto& term : query_terms) {
      const auto it = postings_.find(term);
      if (it == postings_.end()) continue;
      int64_t f = 0;
      for (const auto& [d, tf] : it->second)
        if (d == doc) {
          f = tf;
          break;
        }
      if (f == 0) continue;
      const double norm = double(doc_lens_[doc]) / avg_len_;
      s += idf(term) * (double(f) * (k1 + 1.0)) / (double(f) + k1 * (1.0 - b + b * norm));
    }
    return s;
  }

  std::vector<std::pair<size_t, double>> retrieve(const std::string& query, size_t k) const {
    const auto terms = split_whitespace(query);
    std::unordered_map<size_t, double> acc;
    for (const auto& term : terms) {
      const auto it = postings_.find(term);
      if (it == postings_.end()) continue;
      const double w = idf(term);
      for (const auto& [d, tf] : it->second) {
        const double norm = double(doc_lens_[d]) / avg_len_;
        acc[d] += w * (double(tf) * (k1 + 1.0)) / (double(tf) + k1 * (1.0 - b + b * norm));
      }
    }
    std::vector<std::pair<size_t, double>> hits(acc.begin(), acc.end());
    std::sort(hits.begin(), hits.end(), [&](const auto& a, const auto& bb) {
      if (a.second != bb.second) return a.second > bb.second;
      return (*corpus_)[a.first].id < (*corpus_)[bb.first].id;
    });
    if (hits.size() > k) hits.resize(k);
    return hits;
  }

 private:
  const std::vector<Passage>* corpus_;
  std::unordered_map<std::string, std::vector<std::pair<size_t, int64_t>>> postings_;
  std::vector<int64_t> doc_lens_;
  double avg_len_ = 0.0;
};

// Dense retrieval behind the same interface: embeds texts with a caller
// supplied function (mean-pooled frozen encoder by default elsewhere) and
// ranks by inner product.
class DenseIndex {
 public:
  using EmbedFn = std::function<std::vector<double>(const std::string&)>;

  DenseIndex(const std::vector<Passage>& corpus, EmbedFn embed)
      : corpus_(&corpus), embed_(std::move(embed)) {
    for (const auto& p : *corpus_) vectors_.push_back(embed_(p.text));
  }

  std::vector<std::pair<size_t, double>> retrieve(const std::string& query, size_t k) const {
    const auto q = embed_(query);
    std::vector<std::pair<size_t, double>> hits;
    for (size_t d = 0; d < vectors_.size(); ++d) {
      double s = 0;
      for (size_t j = 0; j < q.size() && j < vectors_[d].size(); ++j) s += q[j] * vectors_[d][j];
      hits.emplace_back(d, s);
    }
    std::sort(hits.begin(), hits.end(), [&](const auto& a, const auto& bb) {
      if (a.second != bb.second) return a.second > bb.second;
      return (*corpus_)[a.first].id < (*corpus_)[bb.first].id;
    });
    if (hits.size() > k) hits.resize(k);
    return hits;
  }

 private:
  const std::vector<Passage>* corpus_;
  EmbedFn embed_;
  std::vector<std::vector<double>> vectors_;
};

// Top-k retrieval with retriever_score filled in; descending score,
// deterministic ties broken by passage id. k > corpus size returns all.
inline std::vector<Passage> retrieve(const std::string& question,
                                     const std::vector<Passage>& corpus, size_t k,
                                     RetrievalBackend backend,
                                     const Bm25Index* bm25 = nullptr,
                                     const DenseIndex* dense = nullptr) {
  if (corpus.empty()) throw std::invalid_argument("retrieve: empty corpus");
  std::vector<std::pair<size_t, double>> hits;
  if (backend == RetrievalBackend::bm25) {
    if (!bm25) throw std::invalid_argument("retrieve: bm25 index not provided");
    hits = bm25->retrieve(question, k);
  } else {
    if (!dense) throw std::invalid_argument("retrieve: dense index not provided");
    hits = dense->retrieve(question, k);
  }
  std::vector<Passage> out;
  out.reserve(hits.size());
  for (const auto& [d, s] : hits) {
    Passage p = corpus[d];
    p.retriever_score = s;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// answer span utilities

// Token positions [start, end] (inclusive) whose normalized tokens equal a
// normalized gold answer's tokens. An answer occurring several times yields
// several spans.
inline std::vector<std::pair<int64_t, int64_t>> find_answer_spans(
    const std::vector<std::string>& passage_tokens, const std::vector<std::string>& golds) {
  std::vector<std::pair<int64_t, int64_t>> spans;
  std::vector<std::string> norm_tokens;
  for (const auto& t : passage_tokens) norm_tokens.push_back(normalize_answer(t));
  for (const auto& gold : golds) {
    const auto g = split_whitespace(normalize_answer(gold));
    if (g.empty()) continue;
    for (size_t start = 0; start + g.size() <= norm_tokens.size(); ++start) {
      bool ok = true;
      for (size_t k = 0; k < g.size(); ++k)
        if (norm_tokens[start + k] != g[k]) {
          ok = false;
          break;
        }
      if (ok) spans.emplace_back(int64_t(start), int64_t(start + g.size() - 1));
    }
  }
  std::sort(spans.begin(), spans.end());
  spans.erase(std::unique(spans.begin(), spans.end()), spans.end());
  return spans;
}

inline bool contains_answer(const std::string& text, const std::vector<std::string>& golds) {
  const auto norm = normalize_answer(text);
  for (const auto& g : golds) {
    const auto ng = normalize_answer(g);
    if (!ng.empty() && norm.find(ng) != std::string::npos) return true;
  }
  return false;
}

// ---------------------------------------------------------------------------
// re-ranker

struct RerankerConfig {
  int64_t hidden_dim = 32;
  int64_t num_layers = 2;
  int64_t num_heads = 2;
  int64_t context_window = 64;
  int64_t negatives = 23;  // selection softmax spans 1 positive + negatives
  double dropout = 0.1;
};

// Joint question+passage encoder with span start/end heads and a passage
// selection head. Inference keeps only the selection score.
template <class S>
struct RerankerModel {
  RerankerConfig rcfg;
  TransformerModel<S> encoder;
  Tensor<S> w_start, w_end, w_sel;  // [D,1] heads
  const Vocabulary* vocab = nullptr;
  mutable int64_t truncated_pairs = 0;

  static RerankerModel init(ParamStore<S>& store, const std::string& prefix,
                            const Vocabulary& vocab, const RerankerConfig& rcfg, Rng& rng) {
    RerankerModel m;
    m.rcfg = rcfg;
    m.vocab = &vocab;
    LMConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.hidden_dim = rcfg.hidden_dim;
    cfg.num_layers = rcfg.num_layers;
    cfg.num_heads = rcfg.num_heads;
    cfg.context_window = rcfg.context_window;
    cfg.causal = false;
    m.encoder = TransformerModel<S>::init(store, prefix + ".enc", cfg, rng, Partition::trainable);
    m.w_start = store.add_normal(prefix + ".w_start", {rcfg.hidden_dim, 1}, Partition::trainable,
                                 rng, 0.02);
    m.w_end =
        store.add_normal(prefix + ".w_end", {rcfg.hidden_dim, 1}, Partition::trainable, rng, 0.02);
    m.w_sel =
        store.add_normal(prefix + ".w_sel", {rcfg.hidden_dim, 1}, Partition::trainable, rng, 0.02);
    return m;
  }

  // joint sequence: question <sep> passage, truncated passage-side when
  // overlong (recorded)
  std::vector<int> joint_ids(const std::string& question, const std::string& passage,
                             int64_t* passage_start = nullptr,
                             int64_t* passage_len = nullptr) const {
    auto q = vocab->encode(question);
    auto p = vocab->encode(passage);
    const int64_t budget = rcfg.context_window - int64_t(q.size()) - 1;
    if (budget < 1) throw std::invalid_argument("reranker: question alone exceeds context");
    if (int64_t(p.size()) > budget) {
      p.resize(size_t(budget));
      ++truncated_pairs;
    }
    std::vector<int> ids = q;
    ids.push_back(Vocabulary::sep_id);
    if (passage_start) *passage_start = int64_t(ids.size());
    ids.insert(ids.end(), p.begin(), p.end());
    if (passage_len) *passage_len = int64_t(p.size());
    return ids;
  }

  struct PairOut {
    Tensor<S> sel;    // [1,1]
    Tensor<S> start;  // [passage_len, 1]
    Tensor<S> end;    // [passage_len, 1]
    int64_t passage_start = 0;
    int64_t passage_len = 0;
  };

  PairOut forward_pair(const std::string& question, const std::string& passage,
                       Rng* dropout_rng = nullptr) const {
    PairOut out;
    auto ids = joint_ids(question, passage, &out.passage_start, &out.passage_len);
    auto x = encoder.add_positions(encoder.embed_tokens(ids));
    for (const auto& blk : encoder.blocks)
      x = blk.apply(x, /*causal=*/false, dropout_rng, rcfg.dropout);
    auto h = layernorm_rows(x, encoder.lnf_g, encoder.lnf_b);
    // mean-pooled selection score
    auto pooled = scale(sum_all_rows(h), S(1) / S(h.rows()));
    out.sel = matmul(pooled, w_sel);
    auto ph = slice_rows(h, out.passage_start, out.passage_start + out.passage_len);
    out.start = matmul(ph, w_start);
    out.end = matmul(ph, w_end);
    return out;
  }

  // pure scalar relevance score of one (question, passage) pair
  double score(const std::string& question, const std::string& passage) const {
    NoGradGuard ng;
    return double(forward_pair(question, passage).sel.item());
  }

 private:
  // [m,n] -> [1,n] column sums
  static Tensor<S> sum_all_rows(const Tensor<S>& a) {
    auto ones = Tensor<S>::full({1, a.rows()}, S(1));
    return matmul(ones, a);
  }
};

struct RerankerTrainStats {
  int64_t trained_questions = 0;
  int64_t skipped_no_positive = 0;
  std::vector<double> loss_per_step;
};

template <class S>
struct RetrievedQuestion {
  std::string id;
  std::string question;
  std::vector<std::string> golds;
  std::vector<Passage> retrieved;  // top-k, retriever order
};

// Loss for one question: negative marginal log-likelihood of all answer
// spans in the positive passage plus negative log-likelihood of selecting
// the positive among 1 + negatives candidates.
template <class S>
Tensor<S> reranker_question_loss(const RerankerModel<S>& model,
                                 const RetrievedQuestion<S>& q, size_t positive_idx,
                                 const std::vector<size_t>& negative_idx, Rng* dropout_rng) {
  std::vector<Tensor<S>> sels;
  auto pos_out = model.forward_pair(q.question, q.retrieved[positive_idx].text, dropout_rng);
  sels.push_back(pos_out.sel);
  for (size_t ni : negative_idx)
    sels.push_back(model.forward_pair(q.question, q.retrieved[ni].text, dropout_rng).sel);
  auto sel_row = transpose(concat_rows(sels));  // [1, 1+negatives]
  std::vector<int> pick{0};
  auto sel_loss = cross_entropy(sel_row, pick);

  // marginal span likelihood inside the positive passage
  auto ptoks = split_whitespace(q.retrieved[positive_idx].text);
  if (int64_t(ptoks.size()) > pos_out.passage_len) ptoks.resize(size_t(pos_out.passage_len));
  auto spans = find_answer_spans(ptoks, q.golds);
  if (spans.empty()) throw std::logic_error("reranker_question_loss: positive has no span");
  auto ls = log_softmax_rows(transpose(pos_out.start));  // [1, P]
  auto le = log_softmax_rows(transpose(pos_out.end));
  // log sum over spans of exp(ls[s] + le[e]); the max shift is a constant,
  // so the gradient is the exact span softmax
  double mx = -1e300;
  for (auto [s, e] : spans)
    mx = std::max(mx, double(ls.val()[size_t(s)]) + double(le.val()[size_t(e)]));
  std::vector<Tensor<S>> terms;
  for (auto [s, e] : spans) {
    auto lse = add(slice_cols(ls, s, s + 1), slice_cols(le, e, e + 1));  // [1,1]
    terms.push_back(exp_of(sub(lse, Tensor<S>::full({1, 1}, S(mx)))));
  }
  Tensor<S> total = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) total = add(total, terms[i]);
  auto span_loss = scale(log_of(total), S(-1));  // -(log sum exp - mx); mx is constant
  return add(add(sel_loss, span_loss), Tensor<S>::full({1, 1}, S(-mx)));
}

// Trains the re-ranker over questions that have at least one positive
// (answer-bearing) passage among their retrievals; the rest are skipped
// and counted.
template <class S>
RerankerTrainStats train_reranker(ParamStore<S>& store, RerankerModel<S>& model,
                                  const std::vector<RetrievedQuestion<S>>& questions,
                                  const OptimizerConfig& opt, int64_t steps, int64_t batch_size,
                                  uint64_t seed) {
  opt.validate();
  RerankerTrainStats stats;
  // questions with >= 1 positive among retrieved
  std::vector<size_t> usable;
  std::vector<std::vector<size_t>> positives, negatives;
  for (size_t i = 0; i < questions.size(); ++i) {
    std::vector<size_t> pos, neg;
    for (size_t d = 0; d < questions[i].retrieved.size(); ++d) {
      if (contains_answer(questions[i].retrieved[d].text, questions[i].golds))
        pos.push_back(d);
      else
        neg.push_back(d);
    }
    if (pos.empty() || neg.empty()) {
      ++stats.skipped_no_positive;
      continue;
    }
    usable.push_back(i);
    positives.push_back(pos);
    negatives.push_back(neg);
  }
  stats.trained_questions = int64_t(usable.size());
  if (usable.empty()) throw std::invalid_argument("train_reranker: no usable questions");

  AdamState<S> adam;
  Rng rng(seed);
  for (int64_t step = 1; step <= steps; ++step) {
    double batch_loss = 0;
    for (int64_t bi = 0; bi < batch_size; ++bi) {
      const size_t u = size_t(rng.uniform_int(usable.size()));
      const auto& q = questions[usable[u]];
      const size_t pos = positives[u][rng.uniform_int(positives[u].size())];
      std::vector<size_t> negs;
      for (int64_t n = 0; n < model.rcfg.negatives; ++n)
        negs.push_back(negatives[u][rng.uniform_int(negatives[u].size())]);
      Rng drop = rng.fork(step * 1000 + bi);
      auto loss = reranker_question_loss(model, q, pos, negs, &drop);
      batch_loss += double(loss.item());
      backward(loss, {}, S(1.0 / double(batch_size)));
    }
    const double lr = lr_schedule(opt, step - 1, steps);
    adam_step(store, adam, opt, step, lr);
    store.zero_grads();
    stats.loss_per_step.push_back(batch_loss / double(batch_size));
  }
  return stats;
}

// applies the trained model to fill reranker_score on each passage
template <class S>
void rerank(const RerankerModel<S>& model, const std::string& question,
            std::vector<Passage>& passages) {
  for (auto& p : passages) p.reranker_score = model.score(question, p.text);
}

// ---------------------------------------------------------------------------
// context packing and recall

struct PackedContext {
  std::string question_id;
  std::vector<std::string> passage_ids;  // strictly descending by packing score
  std::vector<std::string> passage_texts;
  int64_t total_tokens = 0;

  std::string text() const { return join(passage_texts); }
};

enum class PackBy { retriever, reranker };

// Greedy packing: passages in descending score order (ties by id) are added
// until the first one that does not fit; the packed set is a strict prefix
// of the sorted order.
inline PackedContext pack_context(std::vector<Passage> passages, PackBy by, int64_t token_budget,
                                  const std::string& question_id = {}) {
  if (token_budget < 0) throw std::invalid_argument("pack_context: negative budget");
  if (by == PackBy::reranker)
    for (const auto& p : passages)
      if (!p.reranker_score)
        throw std::invalid_argument("pack_context: passage " + p.id + " has no reranker score");
  std::sort(passages.begin(), passages.end(), [&](const Passage& a, const Passage& b) {
    const double sa = by == PackBy::reranker ? *a.reranker_score : a.retriever_score;
    const double sb = by == PackBy::reranker ? *b.reranker_score : b.retriever_score;
    if (sa != sb) return sa > sb;
    return a.id < b.id;
  });
  PackedContext out;
  out.question_id = question_id;
  for (const auto& p : passages) {
    const auto len = int64_t(split_whitespace(p.text).size());
    if (out.total_tokens + len > token_budget) break;  // strict greedy prefix
    out.passage_ids.push_back(p.id);
    out.passage_texts.push_back(p.text);
    out.total_tokens += len;
  }
  return out;
}

// 1 iff any normalized gold answer appears as a substring of the normalized
// packed text.
inline int recall_at_input(const PackedContext& packed, const std::vector<std::string>& golds) {
  if (golds.empty()) throw std::invalid_argument("recall_at_input: empty gold set");
  return contains_answer(packed.text(), golds) ? 1 : 0;
}

// ---------------------------------------------------------------------------
// A/B anti-leakage data preparation

template <class S>
struct AbSplitResult {
  std::vector<size_t> half_a, half_b;  // indices into the training questions
  // packed training contexts, each scored by the re-ranker NOT trained on it
  std::vector<PackedContext> train_packs;
  std::vector<size_t> train_pack_question;  // question index per pack
  int64_t skipped_no_positive = 0;
  RerankerTrainStats stats_a, stats_b, stats_all;
};

// Splits the training questions in half, trains re-ranker-A on A and
// re-ranker-B on B, cross-scores (B scores A's retrievals and vice versa)
// to build the reader's prompt-tuning packs, and trains re-ranker-All on
// the union for dev/test packing.
template <class S>
AbSplitResult<S> ab_split_prepare(ParamStore<S>& store, const Vocabulary& vocab,
                                  const RerankerConfig& rcfg,
                                  std::vector<RetrievedQuestion<S>>& train_questions,
                                  RerankerModel<S>& reranker_all, const OptimizerConfig& opt,
                                  int64_t steps, int64_t batch_size, int64_t token_budget,
                                  uint64_t seed) {
  if (train_questions.size() < 2)
    throw std::invalid_argument("ab_split_prepare: need at least 2 training questions");
  AbSplitResult<S> res;
  std::vector<size_t> order(train_questions.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  rng.shuffle(order);
  const size_t half = order.size() / 2;
  res.half_a.assign(order.begin(), order.begin() + half);
  res.half_b.assign(order.begin() + half, order.end());
  if (res.half_a.empty() || res.half_b.empty())
    throw std::invalid_argument("ab_split_prepare: degenerate half");

  auto subset = [&](const std::vector<size_t>& idx) {
    std::vector<RetrievedQuestion<S>> out;
    for (auto i : idx) out.push_back(train_questions[i]);
    return out;
  };

  Rng init_rng(seed + 1);
  ParamStore<S> store_a, store_b;
  auto ra = RerankerModel<S>::init(store_a, "reranker_a", vocab, rcfg, init_rng);
  auto rb = RerankerModel<S>::init(store_b, "reranker_b", vocab, rcfg, init_rng);
  auto qa = subset(res.half_a);
  auto qb = subset(res.half_b);
  res.stats_a = train_reranker(store_a, ra, qa, opt, steps, batch_size, seed + 2);
  res.stats_b = train_reranker(store_b, rb, qb, opt, steps, batch_size, seed + 3);
  res.stats_all =
      train_reranker(store, reranker_all, train_questions, opt, steps, batch_size, seed + 4);

  // cross-scoring: A's questions packed with re-ranker-B scores and vice versa
  auto pack_half = [&](const std::vector<size_t>& idx, const RerankerModel<S>& scorer) {
    for (auto qi : idx) {
      auto& q = train_questions[qi];
      if (!std::any_of(q.retrieved.begin(), q.retrieved.end(), [&](const Passage& p) {
            return contains_answer(p.text, q.golds);
          })) {
        ++res.skipped_no_positive;
        continue;
      }
      rerank(scorer, q.question, q.retrieved);
      res.train_packs.push_back(pack_context(q.retrieved, PackBy::reranker, token_budget, q.id));
      res.train_pack_question.push_back(qi);
    }
  };
  pack_half(res.half_a, rb);
  pack_half(res.half_b, ra);
  return res;
}

}  // namespace frozenlm
