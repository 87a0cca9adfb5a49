#pragma once

#include <set>
#include <string>
#include <vector>

#include "frozenlm/harness.hpp"
#include "frozenlm/reader.hpp"

// Synthetic worlds for the desk-scale experiments: a 6-dataset multi-task
// suite over 3 task clusters, a marker-token retrieval corpus, and the
// pretraining text that gives the frozen LM the knowledge and copying
// behavior the tasks rely on.

namespace frozenlm::synth {

// deterministic pseudo-words: 2-3 open syllables over a fixed alphabet
inline std::vector<std::string> make_words(Rng& rng, size_t count, std::set<std::string>& used,
                                           int min_syllables = 2, int max_syllables = 3) {
  static const char* consonants = "bdfgklmnprstvz";
  static const char* vowels = "aeiou";
  std::vector<std::string> out;
  while (out.size() < count) {
    const int n = min_syllables + int(rng.uniform_int(uint64_t(max_syllables - min_syllables + 1)));
    std::string w;
    for (int i = 0; i < n; ++i) {
      w += consonants[rng.uniform_int(14)];
      w += vowels[rng.uniform_int(5)];
    }
    if (used.insert(w).second) out.push_back(w);
  }
  return out;
}

// ---------------------------------------------------------------------------
// multi-task toy suite

struct ToySuiteConfig {
  int64_t capital_facts = 30;   // per lookup dataset: entities with facts
  int64_t lookup_dev = 8;
  int64_t transform_train = 200;
  int64_t transform_dev = 32;
  int64_t classification_train = 600;  // the cap-binding dataset
  int64_t classification_dev = 32;
  int64_t size_train = 180;
  int64_t mixture_cap = 500;  // scaled from the paper-scale 500,000
};

struct ToySuite {
  std::vector<DatasetSpec> datasets;
  std::vector<std::string> pretrain_corpus;
  MixtureConfig mixture;
};

namespace detail {

inline TaskExample lookup_example(const std::string& key_field, const std::string& key,
                                  const std::string& answer) {
  TaskExample ex;
  ex.fields[key_field] = key;
  ex.answers = {answer};
  return ex;
}

inline std::string seq3(const std::vector<std::string>& pool, Rng& rng, std::string* rev,
                        std::string* mid) {
  const auto& a = pool[rng.uniform_int(pool.size())];
  const auto& b = pool[rng.uniform_int(pool.size())];
  const auto& c = pool[rng.uniform_int(pool.size())];
  if (rev) *rev = c + " " + b + " " + a;
  if (mid) *mid = b;
  return a + " " + b + " " + c;
}

}  // namespace detail

inline ToySuite make_toy_suite(uint64_t seed, const ToySuiteConfig& cfg = {}) {
  Rng rng(seed);
  std::set<std::string> used;
  ToySuite suite;

  const auto countries = make_words(rng, size_t(cfg.capital_facts + cfg.lookup_dev), used);
  const auto cities = make_words(rng, countries.size(), used);
  const auto realms = make_words(rng, countries.size(), used);
  const auto rulers = make_words(rng, countries.size(), used);
  const auto letters = make_words(rng, 15, used, 1, 1);
  const auto nouns = make_words(rng, 16, used);
  const auto pos_adj = make_words(rng, 8, used);
  const auto neg_adj = make_words(rng, 8, used);
  const auto big_adj = make_words(rng, 6, used);
  const auto small_adj = make_words(rng, 6, used);

  auto& corpus = suite.pretrain_corpus;

  // --- lookup cluster -------------------------------------------------------
  DatasetSpec capitals;
  capitals.name = "capitals";
  capitals.cluster = "lookup_qa";
  capitals.templates = {"what is the capital of {country} ?", "the capital of {country} is",
                        "name the capital city of {country} :"};
  for (size_t i = 0; i < countries.size(); ++i) {
    auto ex = detail::lookup_example("country", countries[i], cities[i]);
    if (int64_t(i) < cfg.capital_facts)
      capitals.train.push_back(ex);
    else
      capitals.dev.push_back(ex);
    corpus.push_back("the capital of " + countries[i] + " is " + cities[i] + " .");
    corpus.push_back(cities[i] + " is the capital of " + countries[i] + " .");
  }
  capitals.test = capitals.dev;

  DatasetSpec leaders;
  leaders.name = "leaders";
  leaders.cluster = "lookup_qa";
  leaders.templates = {"who leads {realm} ?", "the leader of {realm} is"};
  for (size_t i = 0; i < realms.size(); ++i) {
    auto ex = detail::lookup_example("realm", realms[i], rulers[i]);
    if (int64_t(i) < cfg.capital_facts)
      leaders.train.push_back(ex);
    else
      leaders.dev.push_back(ex);
    corpus.push_back(rulers[i] + " leads " + realms[i] + " .");
    corpus.push_back("the leader of " + realms[i] + " is " + rulers[i] + " .");
  }
  leaders.test = leaders.dev;

  // --- string transformation cluster ---------------------------------------
  DatasetSpec reverse;
  reverse.name = "reverse";
  reverse.cluster = "string_transform";
  reverse.templates = {"reverse the sequence {seq} :", "{seq} in reverse order is"};
  std::set<std::string> seen_seq;
  while (int64_t(reverse.train.size()) < cfg.transform_train ||
         int64_t(reverse.dev.size()) < cfg.transform_dev) {
    std::string rev;
    const auto seq = detail::seq3(letters, rng, &rev, nullptr);
    if (!seen_seq.insert(seq).second) continue;
    TaskExample ex;
    ex.fields["seq"] = seq;
    ex.answers = {rev};
    if (int64_t(reverse.train.size()) < cfg.transform_train)
      reverse.train.push_back(ex);
    else
      reverse.dev.push_back(ex);
  }
  reverse.test = reverse.dev;

  DatasetSpec middle;
  middle.name = "middle";
  middle.cluster = "string_transform";
  middle.templates = {"the middle of {seq} is", "of {seq} the middle is", "middle of {seq} :"};
  while (int64_t(middle.train.size()) < cfg.transform_train - 40 ||
         int64_t(middle.dev.size()) < cfg.transform_dev) {
    std::string mid;
    const auto seq = detail::seq3(letters, rng, nullptr, &mid);
    if (!seen_seq.insert("m:" + seq).second) continue;
    TaskExample ex;
    ex.fields["seq"] = seq;
    ex.answers = {mid};
    if (int64_t(middle.train.size()) < cfg.transform_train - 40)
      middle.train.push_back(ex);
    else
      middle.dev.push_back(ex);
  }
  middle.test = middle.dev;

  // transformation mechanics in the pretraining text, on fresh triples
  for (int i = 0; i < 500; ++i) {
    std::string rev, mid;
    const auto seq = detail::seq3(letters, rng, &rev, &mid);
    corpus.push_back(seq + " reversed is " + rev + " .");
    corpus.push_back("the middle of " + seq + " is " + mid + " .");
    if (i % 3 == 0) corpus.push_back(seq + " again " + seq + " .");
  }

  // --- classification cluster ----------------------------------------------
  DatasetSpec polarity;
  polarity.name = "polarity";
  polarity.cluster = "classification";
  polarity.templates = {"review : {text} . verdict :", "{text} . that sounds",
                        "opinion : {text} . overall :", "is this good or bad ? {text} ."};
  auto sentiment_sentence = [&](bool positive) {
    const auto& noun = nouns[rng.uniform_int(nouns.size())];
    const auto& adj = positive ? pos_adj[rng.uniform_int(pos_adj.size())]
                               : neg_adj[rng.uniform_int(neg_adj.size())];
    return "the " + noun + " was " + adj;
  };
  for (int64_t i = 0; i < cfg.classification_train + cfg.classification_dev; ++i) {
    const bool positive = rng.uniform() < 0.5;
    TaskExample ex;
    ex.fields["text"] = sentiment_sentence(positive);
    ex.answers = {positive ? "good" : "bad"};
    if (i < cfg.classification_train)
      polarity.train.push_back(ex);
    else
      polarity.dev.push_back(ex);
  }
  polarity.test = polarity.dev;
  for (const auto& a : pos_adj) corpus.push_back(a + " means good .");
  for (const auto& a : neg_adj) corpus.push_back(a + " means bad .");
  for (int i = 0; i < 200; ++i) {
    const bool positive = rng.uniform() < 0.5;
    corpus.push_back(sentiment_sentence(positive) + " . that is " +
                     (positive ? "good" : "bad") + " .");
  }

  DatasetSpec size_ds;
  size_ds.name = "size";
  size_ds.cluster = "classification";
  size_ds.templates = {"{text} . so it is", "size check : {text} ."};
  auto size_sentence = [&](bool big) {
    const auto& noun = nouns[rng.uniform_int(nouns.size())];
    const auto& adj = big ? big_adj[rng.uniform_int(big_adj.size())]
                          : small_adj[rng.uniform_int(small_adj.size())];
    return "the " + noun + " seemed " + adj;
  };
  for (int64_t i = 0; i < cfg.size_train + cfg.classification_dev; ++i) {
    const bool big = rng.uniform() < 0.5;
    TaskExample ex;
    ex.fields["text"] = size_sentence(big);
    ex.answers = {big ? "big" : "small"};
    if (i < cfg.size_train)
      size_ds.train.push_back(ex);
    else
      size_ds.dev.push_back(ex);
  }
  size_ds.test = size_ds.dev;
  for (const auto& a : big_adj) corpus.push_back(a + " means big .");
  for (const auto& a : small_adj) corpus.push_back(a + " means small .");
  for (int i = 0; i < 150; ++i) {
    const bool big = rng.uniform() < 0.5;
    corpus.push_back(size_sentence(big) + " . so it is " + (big ? "big" : "small") + " .");
  }

  // template carrier lines so rendering vocabulary is pretrained
  for (int i = 0; i < 40; ++i) {
    const auto& n1 = nouns[rng.uniform_int(nouns.size())];
    const auto& n2 = nouns[rng.uniform_int(nouns.size())];
    corpus.push_back("question : what about the " + n1 + " ? answer : the " + n2 + " .");
    corpus.push_back("candidates : " + n1 + " ; " + n2 + " ; " + n1 + " .");
    corpus.push_back("name the " + n1 + " : " + n2 + " . reverse the order . middle ground .");
    corpus.push_back("review : the " + n1 + " . opinion : none . overall : who leads ? size check .");
    corpus.push_back("is it good or bad or big or small ? in sequence it is the " + n2 + " .");
  }

  suite.datasets = {capitals, leaders, reverse, middle, polarity, size_ds};
  suite.mixture.datasets = suite.datasets;
  suite.mixture.cap = cfg.mixture_cap;
  suite.mixture.seed = seed;
  return suite;
}

// ---------------------------------------------------------------------------
// retrieval world

struct RetrievalConfig {
  int64_t eval_subjects = 80;     // one question each
  int64_t pretrain_subjects = 30; // extraction format teachers, disjoint facts
  int64_t relations = 6;
  int64_t passages_per_subject = 25;  // 10 question-tied + 15 fillers
  int64_t train_questions = 40;
  int64_t dev_questions = 20;
};

struct RetrievalQuestion {
  std::string id;
  std::string question;
  std::vector<std::string> golds;
};

struct RetrievalWorld {
  std::vector<Passage> corpus;
  std::vector<RetrievalQuestion> train, dev, test;
  std::vector<std::string> pretrain_corpus;  // reader-format teachers
  std::string marker;
};

// Every question's ten tied passages share the subject and relation tokens
// and an identical length, so BM25 cannot separate them; only the gold one
// carries the marker token ahead of the answer. Re-ranking headroom over
// the retriever is therefore real but learnable.
inline RetrievalWorld make_retrieval_world(uint64_t seed, const RetrievalConfig& cfg = {}) {
  Rng rng(seed);
  std::set<std::string> used{"question", "context", "answer"};
  RetrievalWorld world;

  const auto subjects = make_words(rng, size_t(cfg.eval_subjects), used);
  const auto pre_subjects = make_words(rng, size_t(cfg.pretrain_subjects), used);
  const auto relations = make_words(rng, size_t(cfg.relations), used);
  const auto objects = make_words(rng, size_t(cfg.eval_subjects), used);
  const auto pre_objects = make_words(rng, size_t(cfg.pretrain_subjects), used);
  const auto fillers = make_words(rng, 12, used);
  const auto filler_objects = make_words(rng, 20, used);
  world.marker = make_words(rng, 1, used, 2, 2)[0];

  std::vector<std::string> texts;
  std::vector<size_t> gold_of_question(subjects.size());
  for (size_t i = 0; i < subjects.size(); ++i) {
    const auto& s = subjects[i];
    const auto& r = relations[rng.uniform_int(relations.size())];
    const auto& o = objects[i];
    RetrievalQuestion q;
    q.id = "q" + std::to_string(i);
    q.question = s + " " + r + " ?";
    q.golds = {o};
    const size_t qi = world.train.size() + world.dev.size() + world.test.size();
    if (int64_t(qi) < cfg.train_questions)
      world.train.push_back(q);
    else if (int64_t(qi) < cfg.train_questions + cfg.dev_questions)
      world.dev.push_back(q);
    else
      world.test.push_back(q);

    // 1 gold + 9 same-term distractors, all 5 tokens long
    texts.push_back(s + " " + r + " " + world.marker + " " + o + " .");
    for (int d = 0; d < 9; ++d)
      texts.push_back(s + " " + r + " " + fillers[rng.uniform_int(fillers.size())] + " " +
                      filler_objects[rng.uniform_int(filler_objects.size())] + " .");
    // subject fillers under other relations
    for (int64_t d = 0; d < cfg.passages_per_subject - 10; ++d)
      texts.push_back(s + " " + relations[rng.uniform_int(relations.size())] + " " +
                      fillers[rng.uniform_int(fillers.size())] + " " +
                      filler_objects[rng.uniform_int(filler_objects.size())] + " .");
  }
  // shuffled ids so score ties resolve independently of gold placement
  std::vector<size_t> order(texts.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  rng.shuffle(order);
  std::vector<std::string> id_of(texts.size());
  for (size_t rank = 0; rank < order.size(); ++rank) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%04zu", rank);
    id_of[order[rank]] = buf;
  }
  for (size_t i = 0; i < texts.size(); ++i)
    world.corpus.push_back(Passage{id_of[i], texts[i], 0.0, std::nullopt});

  // reader-format pretraining lines on the disjoint pretrain-half facts
  for (size_t i = 0; i < pre_subjects.size(); ++i) {
    const auto& s = pre_subjects[i];
    const auto& r = relations[rng.uniform_int(relations.size())];
    const auto& o = pre_objects[i];
    const auto& f = fillers[rng.uniform_int(fillers.size())];
    const auto& fo = filler_objects[rng.uniform_int(filler_objects.size())];
    const std::string gold_p = s + " " + r + " " + world.marker + " " + o + " .";
    const std::string noise_p = s + " " + r + " " + f + " " + fo + " .";
    for (int rep = 0; rep < 4; ++rep) {
      const bool gold_first = rng.uniform() < 0.5;
      const std::string ctx = gold_first ? gold_p + " " + noise_p : noise_p + " " + gold_p;
      world.pretrain_corpus.push_back("question : " + s + " " + r + " ? context : " + ctx +
                                      " answer : " + o);
    }
    world.pretrain_corpus.push_back(gold_p);
    world.pretrain_corpus.push_back(noise_p);
  }
  return world;
}

// reader input rendering shared by training and evaluation
inline std::string reader_input(const std::string& question, const std::string& packed_text) {
  return "question : " + question + " context : " + packed_text + " answer :";
}

}  // namespace frozenlm::synth
