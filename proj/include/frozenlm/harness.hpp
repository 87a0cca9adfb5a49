#pragma once

#include <algorithm>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "frozenlm/adapters.hpp"
#include "frozenlm/common.hpp"
#include "frozenlm/vocab.hpp"

// Multi-task mixture and evaluation machinery: capped sampling, template
// rendering, EM/F1, median-over-templates scoring, checkpoint selection and
// the prompt-distance report.

namespace frozenlm {

struct TaskExample {
  std::map<std::string, std::string> fields;
  std::vector<std::string> answers;
};

struct DatasetSpec {
  std::string name;
  std::string cluster;
  std::vector<TaskExample> train, dev, test;
  std::vector<std::string> templates;  // format strings with {slot} markers
  std::string metric = "em";
  bool has_dev = true;
  bool has_test = true;

  int64_t num_templates() const { return int64_t(templates.size()); }

  void validate() const {
    if (templates.empty()) throw std::invalid_argument("dataset " + name + " has no templates");
  }
};

struct MixtureConfig {
  std::vector<DatasetSpec> datasets;
  int64_t cap = 500;  // full-scale value is 500,000; scaled for the desk suite
  uint64_t seed = 0;
};

// min(|D|, cap / num_templates)
inline int64_t effective_size(int64_t dataset_size, int64_t cap, int64_t num_templates) {
  if (num_templates < 1) throw std::invalid_argument("effective_size: num_templates must be >= 1");
  return std::min(dataset_size, cap / num_templates);
}

// ---------------------------------------------------------------------------
// template rendering

struct Rendering {
  std::string input;
  std::string target;
};

// Deterministic {slot} substitution; the target is the first gold answer.
inline Rendering render_template(const std::string& tmpl, const TaskExample& ex) {
  std::string out;
  size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const size_t close = tmpl.find('}', i);
      if (close == std::string::npos)
        throw std::invalid_argument("render_template: unterminated slot");
      const std::string slot = tmpl.substr(i + 1, close - i - 1);
      auto it = ex.fields.find(slot);
      if (it == ex.fields.end())
        throw std::invalid_argument("render_template: missing slot '" + slot + "'");
      out += it->second;
      i = close + 1;
    } else {
      out += tmpl[i++];
    }
  }
  Rendering r;
  r.input = out;
  r.target = ex.answers.empty() ? "" : ex.answers[0];
  return r;
}

// ---------------------------------------------------------------------------
// mixture stream

struct MixtureItem {
  size_t dataset = 0;
  size_t example = 0;
  size_t template_idx = 0;
};

// Infinite seeded stream sampling datasets proportionally to their
// effective sizes; each draw pairs a uniformly chosen example (from the
// first effective_size examples) with a uniformly chosen template.
class MixtureStream {
 public:
  explicit MixtureStream(const MixtureConfig& cfg) : cfg_(&cfg), rng_(cfg.seed) {
    if (cfg.datasets.empty()) throw std::invalid_argument("build_mixture: no datasets");
    for (const auto& d : cfg.datasets) {
      d.validate();
      if (d.train.empty()) throw std::invalid_argument("build_mixture: empty dataset " + d.name);
      const int64_t eff = effective_size(int64_t(d.train.size()), cfg.cap, d.num_templates());
      if (eff < 1) throw std::invalid_argument("build_mixture: cap starves dataset " + d.name);
      effective_.push_back(eff);
      cumulative_.push_back((cumulative_.empty() ? 0 : cumulative_.back()) + eff);
    }
  }

  const std::vector<int64_t>& effective_sizes() const { return effective_; }

  MixtureItem next() {
    const int64_t total = cumulative_.back();
    const int64_t pick = int64_t(rng_.uniform_int(uint64_t(total)));
    size_t ds = 0;
    while (cumulative_[ds] <= pick) ++ds;
    MixtureItem item;
    item.dataset = ds;
    item.example = size_t(rng_.uniform_int(uint64_t(effective_[ds])));
    item.template_idx = size_t(rng_.uniform_int(uint64_t(cfg_->datasets[ds].num_templates())));
    return item;
  }

 private:
  const MixtureConfig* cfg_;
  Rng rng_;
  std::vector<int64_t> effective_;
  std::vector<int64_t> cumulative_;
};

inline MixtureStream build_mixture(const MixtureConfig& cfg) { return MixtureStream(cfg); }

// ---------------------------------------------------------------------------
// metrics

struct QaScore {
  int em = 0;
  double f1 = 0.0;
};

// EM: normalized prediction equals any normalized gold. F1: max over golds
// of whitespace-token overlap F1 after normalization (SQuAD convention).
inline QaScore qa_metrics(const std::string& prediction, const std::vector<std::string>& golds) {
  if (golds.empty()) throw std::invalid_argument("qa_metrics: empty gold set");
  QaScore s;
  const auto pred_norm = normalize_answer(prediction);
  const auto pred_toks = split_whitespace(pred_norm);
  for (const auto& gold : golds) {
    const auto gold_norm = normalize_answer(gold);
    if (pred_norm == gold_norm) s.em = 1;
    const auto gold_toks = split_whitespace(gold_norm);
    if (pred_toks.empty() || gold_toks.empty()) {
      if (pred_toks.empty() && gold_toks.empty()) s.f1 = 1.0;
      continue;
    }
    std::map<std::string, int64_t> counts;
    for (const auto& t : gold_toks) counts[t]++;
    int64_t overlap = 0;
    for (const auto& t : pred_toks) {
      auto it = counts.find(t);
      if (it != counts.end() && it->second > 0) {
        ++overlap;
        --it->second;
      }
    }
    if (overlap == 0) continue;
    const double precision = double(overlap) / double(pred_toks.size());
    const double recall = double(overlap) / double(gold_toks.size());
    s.f1 = std::max(s.f1, 2 * precision * recall / (precision + recall));
  }
  return s;
}

// ---------------------------------------------------------------------------
// evaluation

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median of empty set");
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct DatasetEvaluation {
  std::string dataset;
  double score = 0.0;              // median over templates
  std::vector<double> per_template;
  bool skipped = false;
  std::string skip_reason;
};

using PredictFn = std::function<std::string(const std::string& input)>;

// Mean metric per template over the split, then the median across
// templates (even counts average the two central values). A missing split
// is skipped with a reason rather than scored.
inline DatasetEvaluation evaluate_dataset(const PredictFn& predict, const DatasetSpec& spec,
                                          const std::string& split) {
  DatasetEvaluation ev;
  ev.dataset = spec.name;
  const std::vector<TaskExample>* examples = nullptr;
  if (split == "dev") {
    if (!spec.has_dev || spec.dev.empty()) {
      ev.skipped = true;
      ev.skip_reason = "no public dev split";
      return ev;
    }
    examples = &spec.dev;
  } else if (split == "test") {
    if (!spec.has_test || spec.test.empty()) {
      ev.skipped = true;
      ev.skip_reason = "no public test split";
      return ev;
    }
    examples = &spec.test;
  } else if (split == "train") {
    examples = &spec.train;
  } else {
    throw std::invalid_argument("evaluate_dataset: unknown split " + split);
  }
  for (const auto& tmpl : spec.templates) {
    double total = 0;
    for (const auto& ex : *examples) {
      const auto r = render_template(tmpl, ex);
      const auto pred = predict(r.input);
      const auto score = qa_metrics(pred, ex.answers);
      total += spec.metric == "f1" ? score.f1 : double(score.em);
    }
    ev.per_template.push_back(total / double(examples->size()));
  }
  ev.score = median(ev.per_template);
  return ev;
}

// argmax of the cross-dataset average; the earliest step wins ties
struct CheckpointTrace {
  int64_t step = 0;
  std::vector<double> per_dataset;
};

inline int64_t checkpoint_select(const std::vector<CheckpointTrace>& traces) {
  if (traces.empty()) throw std::invalid_argument("checkpoint_select: no checkpoints");
  size_t best = 0;
  double best_avg = -1e300;
  for (size_t i = 0; i < traces.size(); ++i) {
    double avg = 0;
    for (double s : traces[i].per_dataset) avg += s;
    avg /= double(traces[i].per_dataset.size());
    if (avg > best_avg) {
      best_avg = avg;
      best = i;
    }
  }
  return traces[best].step;
}

// ---------------------------------------------------------------------------
// prompt-distance report (per pair class)

enum class PairClass { same_template, cross_template, cross_dataset };

inline const char* pair_class_name(PairClass c) {
  switch (c) {
    case PairClass::same_template: return "same_dataset_same_template";
    case PairClass::cross_template: return "same_dataset_different_templates";
    default: return "different_datasets";
  }
}

struct DistanceClassStats {
  std::string pair_class;
  double mean = 0.0;
  double stddev = 0.0;
  int64_t pairs = 0;
  std::vector<double> samples;
  bool omitted = false;
  std::string note;
};

struct DistanceReport {
  std::vector<DistanceClassStats> classes;  // same_template, cross_template, cross_dataset
};

// p(x) distances between seeded example pairs drawn from each class.
// Identical examples are excluded from same-template sampling.
template <class S>
DistanceReport distance_report(const PromptGenerator<S>& gen, const Vocabulary& vocab,
                               const std::vector<DatasetSpec>& datasets, int64_t pairs_per_class,
                               uint64_t seed) {
  if (datasets.size() < 2)
    throw std::invalid_argument("distance_report: need at least 2 datasets");
  NoGradGuard ng;
  Rng rng(seed);
  DistanceReport report;
  auto prompt_for = [&](size_t ds, size_t ex, size_t tmpl) {
    const auto r = render_template(datasets[ds].templates[tmpl], datasets[ds].train[ex]);
    return gen.generate(vocab.encode(r.input));
  };
  auto summarize = [&](PairClass cls, const std::vector<double>& d) {
    DistanceClassStats st;
    st.pair_class = pair_class_name(cls);
    st.pairs = int64_t(d.size());
    st.samples = d;
    if (d.empty()) {
      st.omitted = true;
      st.note = "no admissible pairs";
    } else {
      for (double x : d) st.mean += x;
      st.mean /= double(d.size());
      for (double x : d) st.stddev += (x - st.mean) * (x - st.mean);
      st.stddev = std::sqrt(st.stddev / double(d.size()));
    }
    return st;
  };

  std::vector<double> same_t, cross_t, cross_d;
  for (int64_t i = 0; i < pairs_per_class; ++i) {
    // same dataset, same template
    {
      const size_t ds = size_t(rng.uniform_int(datasets.size()));
      const auto& spec = datasets[ds];
      if (spec.train.size() >= 2) {
        const size_t t = size_t(rng.uniform_int(spec.templates.size()));
        const size_t a = size_t(rng.uniform_int(spec.train.size()));
        size_t b = size_t(rng.uniform_int(spec.train.size()));
        while (b == a) b = size_t(rng.uniform_int(spec.train.size()));
        same_t.push_back(prompt_distance(prompt_for(ds, a, t), prompt_for(ds, b, t)));
      }
    }
    // same dataset, different templates
    {
      std::vector<size_t> multi;
      for (size_t d = 0; d < datasets.size(); ++d)
        if (datasets[d].templates.size() >= 2) multi.push_back(d);
      if (!multi.empty()) {
        const size_t ds = multi[rng.uniform_int(multi.size())];
        const auto& spec = datasets[ds];
        const size_t t1 = size_t(rng.uniform_int(spec.templates.size()));
        size_t t2 = size_t(rng.uniform_int(spec.templates.size()));
        while (t2 == t1) t2 = size_t(rng.uniform_int(spec.templates.size()));
        const size_t a = size_t(rng.uniform_int(spec.train.size()));
        const size_t b = size_t(rng.uniform_int(spec.train.size()));
        cross_t.push_back(prompt_distance(prompt_for(ds, a, t1), prompt_for(ds, b, t2)));
      }
    }
    // different datasets
    {
      const size_t d1 = size_t(rng.uniform_int(datasets.size()));
      size_t d2 = size_t(rng.uniform_int(datasets.size()));
      while (d2 == d1) d2 = size_t(rng.uniform_int(datasets.size()));
      const size_t t1 = size_t(rng.uniform_int(datasets[d1].templates.size()));
      const size_t t2 = size_t(rng.uniform_int(datasets[d2].templates.size()));
      const size_t a = size_t(rng.uniform_int(datasets[d1].train.size()));
      const size_t b = size_t(rng.uniform_int(datasets[d2].train.size()));
      cross_d.push_back(prompt_distance(prompt_for(d1, a, t1), prompt_for(d2, b, t2)));
    }
  }
  report.classes.push_back(summarize(PairClass::same_template, same_t));
  report.classes.push_back(summarize(PairClass::cross_template, cross_t));
  report.classes.push_back(summarize(PairClass::cross_dataset, cross_d));
  return report;
}

}  // namespace frozenlm
