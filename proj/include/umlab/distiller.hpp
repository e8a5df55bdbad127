#pragma once
// Sequence-level knowledge distillation from a unified multilingual teacher.
// Three corpus builders (source-, target-, and pivot-teacher), candidate
// weight renormalization, origin-group downsampling, and the weight-1
// back-translation baseline data.

#include <filesystem>

#include <json.hpp>

#include "umlab/corpus.hpp"
#include "umlab/seq2seq.hpp"

namespace umlab::distiller {

using corpus::WeightedExample;
using seq2seq::TranslationCandidate;
using seq2seq::Translator;

struct TeacherConfig {
  int beam = 4;                // candidates per origin sentence
  double tau = 0.5;            // weight temperature, < 1 sharpens
  std::string domain = "log";  // score domain for renormalization

  void validate() const {
    if (beam < 1 || beam > 8) throw config_error("teacher: beam must be in [1,8]");
    if (!(tau > 0)) throw config_error("teacher: tau must be positive");
    if (domain != "log" && domain != "prob")
      throw config_error("teacher: domain must be 'log' or 'prob'");
  }
};

// softmax(scores/tau) in double precision. In the log domain (scores are
// sequence log-probabilities) this equals renormalized p^(1/tau).
inline std::vector<double> normalize_weights(const std::vector<double>& scores, double tau,
                                             const std::string& domain = "log") {
  if (scores.empty()) throw config_error("normalize_weights: empty score list");
  if (!(tau > 0)) throw config_error("normalize_weights: tau must be positive");
  for (double s : scores) {
    if (!std::isfinite(s)) throw config_error("normalize_weights: non-finite score");
    if (domain == "log" && s > 1e-9)
      throw config_error("normalize_weights: log-domain score above 0");
    if (domain == "prob" && (s < 0 || s > 1.0 + 1e-9))
      throw config_error("normalize_weights: prob-domain score outside [0,1]");
  }
  if (domain != "log" && domain != "prob")
    throw config_error("normalize_weights: unknown domain '" + domain + "'");
  if (scores.size() == 1) return {1.0};
  double mx = -std::numeric_limits<double>::infinity();
  for (double s : scores) mx = std::max(mx, s / tau);
  std::vector<double> w(scores.size());
  double sum = 0;
  for (size_t i = 0; i < scores.size(); i++) {
    w[i] = std::exp(scores[i] / tau - mx);
    sum += w[i];
  }
  for (auto& x : w) x /= sum;
  return w;
}

struct DistilledCorpus {
  std::vector<WeightedExample> examples;
  std::string kind;  // src-teacher | tgt-teacher | pivot-teacher | back-translation | merged
  std::string teacher_ckpt;  // identifier recorded for provenance
  int beam = 0;
  double tau = 0;
  std::string domain = "log";
  uint64_t seed = 0;
  int skipped_unfinished = 0;
  int skipped_empty = 0;
  std::vector<int> group_sizes;  // kept candidates per origin sentence, input order
  std::vector<std::pair<std::string, int>> parts;  // (kind, examples) per merged part

  void note_part() {
    if (parts.empty()) parts.emplace_back(kind, static_cast<int>(examples.size()));
  }
};

namespace detail {

// Finished, non-empty candidates only; counts the drops.
inline std::vector<TranslationCandidate> usable(std::vector<TranslationCandidate> cands,
                                                int* skipped_unfinished, int* skipped_empty) {
  std::vector<TranslationCandidate> out;
  for (auto& c : cands) {
    if (!c.finished) {
      (*skipped_unfinished)++;
      continue;
    }
    if (c.tokens.empty()) {
      (*skipped_empty)++;
      continue;
    }
    out.push_back(std::move(c));
  }
  return out;
}

inline std::vector<double> candidate_scores(const std::vector<TranslationCandidate>& cands,
                                            const std::string& domain) {
  std::vector<double> s;
  s.reserve(cands.size());
  for (auto& c : cands)
    s.push_back(domain == "log" ? c.logprob : std::exp(c.logprob));
  return s;
}

}  // namespace detail

// Source-teacher data for the direction src_lang -> (target language of
// `pivot_target`): the pivot side of each (y, z) pair is beam-translated into
// src_lang; each candidate pairs with the real y under its renormalized weight.
inline DistilledCorpus distill_source(Translator& teacher,
                                      const std::vector<WeightedExample>& pivot_target,
                                      const std::string& src_lang, const TeacherConfig& cfg) {
  cfg.validate();
  DistilledCorpus out;
  out.kind = "src-teacher";
  out.beam = cfg.beam;
  out.tau = cfg.tau;
  out.domain = cfg.domain;
  for (auto& pair : pivot_target) {
    if (pair.tgt_lang != "pv")
      throw config_error("distill_source: corpus target side must be pivot");
    if (pair.src_lang == src_lang)
      throw config_error("distill_source: synthetic language equals corpus language");
    auto cands = detail::usable(teacher.translate(pair.tgt, pair.tgt_lang, src_lang, cfg.beam),
                                &out.skipped_unfinished, &out.skipped_empty);
    if (cands.empty()) continue;
    auto weights = normalize_weights(detail::candidate_scores(cands, cfg.domain), cfg.tau,
                                     cfg.domain);
    for (size_t k = 0; k < cands.size(); k++) {
      WeightedExample ex;
      ex.src_lang = src_lang;
      ex.tgt_lang = pair.src_lang;
      ex.src = cands[k].tokens;
      ex.tgt = pair.src;
      ex.weight = weights[k];
      ex.provenance = "src-teacher";
      out.examples.push_back(std::move(ex));
    }
    out.group_sizes.push_back(static_cast<int>(cands.size()));
  }
  out.note_part();
  return out;
}

// Target-teacher data for (source language of `source_pivot`) -> tgt_lang:
// the pivot side of each (x, z) pair is beam-translated into tgt_lang; the
// real x stays verbatim as the source side.
inline DistilledCorpus distill_target(Translator& teacher,
                                      const std::vector<WeightedExample>& source_pivot,
                                      const std::string& tgt_lang, const TeacherConfig& cfg) {
  cfg.validate();
  DistilledCorpus out;
  out.kind = "tgt-teacher";
  out.beam = cfg.beam;
  out.tau = cfg.tau;
  out.domain = cfg.domain;
  for (auto& pair : source_pivot) {
    if (pair.tgt_lang != "pv")
      throw config_error("distill_target: corpus target side must be pivot");
    if (pair.src_lang == tgt_lang)
      throw config_error("distill_target: synthetic language equals corpus language");
    auto cands = detail::usable(teacher.translate(pair.tgt, pair.tgt_lang, tgt_lang, cfg.beam),
                                &out.skipped_unfinished, &out.skipped_empty);
    if (cands.empty()) continue;
    auto weights = normalize_weights(detail::candidate_scores(cands, cfg.domain), cfg.tau,
                                     cfg.domain);
    for (size_t k = 0; k < cands.size(); k++) {
      WeightedExample ex;
      ex.src_lang = pair.src_lang;
      ex.tgt_lang = tgt_lang;
      ex.src = pair.src;
      ex.tgt = cands[k].tokens;
      ex.weight = weights[k];
      ex.provenance = "tgt-teacher";
      out.examples.push_back(std::move(ex));
    }
    out.group_sizes.push_back(static_cast<int>(cands.size()));
  }
  out.note_part();
  return out;
}

// Pivot-teacher data for src_lang -> tgt_lang from monolingual pivot text:
// each sentence is translated into both languages; rank-matched candidates are
// paired and weighted by the product of the two direction scores.
inline DistilledCorpus distill_pivot(Translator& teacher,
                                     const std::vector<std::vector<std::string>>& mono_pivot,
                                     const std::string& src_lang, const std::string& tgt_lang,
                                     const TeacherConfig& cfg) {
  cfg.validate();
  if (src_lang == tgt_lang) throw config_error("distill_pivot: identical languages");
  DistilledCorpus out;
  out.kind = "pivot-teacher";
  out.beam = cfg.beam;
  out.tau = cfg.tau;
  out.domain = cfg.domain;
  for (auto& z : mono_pivot) {
    auto cs = detail::usable(teacher.translate(z, "pv", src_lang, cfg.beam),
                             &out.skipped_unfinished, &out.skipped_empty);
    auto ct = detail::usable(teacher.translate(z, "pv", tgt_lang, cfg.beam),
                             &out.skipped_unfinished, &out.skipped_empty);
    const size_t K = std::min(cs.size(), ct.size());
    if (K == 0) continue;
    std::vector<double> scores(K);
    for (size_t k = 0; k < K; k++) {
      scores[k] = cfg.domain == "log" ? cs[k].logprob + ct[k].logprob
                                      : std::exp(cs[k].logprob) * std::exp(ct[k].logprob);
    }
    auto weights = normalize_weights(scores, cfg.tau, cfg.domain);
    for (size_t k = 0; k < K; k++) {
      WeightedExample ex;
      ex.src_lang = src_lang;
      ex.tgt_lang = tgt_lang;
      ex.src = cs[k].tokens;
      ex.tgt = ct[k].tokens;
      ex.weight = weights[k];
      ex.provenance = "pivot-teacher";
      out.examples.push_back(std::move(ex));
    }
    out.group_sizes.push_back(static_cast<int>(K));
  }
  out.note_part();
  return out;
}

// Greedy weight-1 back-translation: synthetic language side as source, the
// real pivot sentence as target. One corpus per requested language.
inline std::vector<DistilledCorpus> backtranslate(
    Translator& teacher, const std::vector<std::vector<std::string>>& mono_pivot,
    const std::vector<std::string>& languages) {
  std::vector<DistilledCorpus> out;
  for (auto& lang : languages) {
    if (lang == "pv") throw config_error("backtranslate: pivot is not a synthetic language");
    DistilledCorpus c;
    c.kind = "back-translation";
    c.beam = 1;
    c.tau = 1.0;
    for (auto& z : mono_pivot) {
      auto cands = detail::usable(teacher.translate(z, "pv", lang, 1), &c.skipped_unfinished,
                                  &c.skipped_empty);
      if (cands.empty()) continue;
      WeightedExample ex;
      ex.src_lang = lang;
      ex.tgt_lang = "pv";
      ex.src = cands[0].tokens;
      ex.tgt = z;
      ex.weight = 1.0;
      ex.provenance = "back-translation";
      c.examples.push_back(std::move(ex));
      c.group_sizes.push_back(1);
    }
    c.note_part();
    out.push_back(std::move(c));
  }
  return out;
}

// Stable concatenation; per-part metadata is preserved in `parts`.
inline DistilledCorpus merge_distilled(const std::vector<DistilledCorpus>& inputs) {
  if (inputs.empty()) throw config_error("merge_distilled: nothing to merge");
  if (inputs.size() == 1) return inputs[0];
  DistilledCorpus out;
  out.kind = "merged";
  out.beam = inputs[0].beam;
  out.tau = inputs[0].tau;
  out.domain = inputs[0].domain;
  out.seed = inputs[0].seed;
  out.teacher_ckpt = inputs[0].teacher_ckpt;
  for (auto& in : inputs) {
    out.examples.insert(out.examples.end(), in.examples.begin(), in.examples.end());
    out.group_sizes.insert(out.group_sizes.end(), in.group_sizes.begin(), in.group_sizes.end());
    out.skipped_unfinished += in.skipped_unfinished;
    out.skipped_empty += in.skipped_empty;
    if (in.parts.empty())
      out.parts.emplace_back(in.kind, static_cast<int>(in.examples.size()));
    else
      out.parts.insert(out.parts.end(), in.parts.begin(), in.parts.end());
  }
  return out;
}

// Downsampling target size: T' = min(T, max(T_m, T_m + (T - T_m)/N)), all in
// integer arithmetic.
inline int64_t downsample_target(int64_t T, int64_t T_m, int64_t N) {
  if (T_m < 1 || N < 1) throw config_error("downsample: T_m and N must be >= 1");
  if (T < 0) throw config_error("downsample: negative corpus size");
  const int64_t grown = T_m + (T - T_m) / N;
  return std::min(T, std::max(T_m, grown));
}

// Keeps whole origin groups, chosen by a seeded shuffle, until the next group
// would overshoot the target size; survivors keep their original order.
inline DistilledCorpus downsample(const DistilledCorpus& in, int64_t T_m, int64_t N,
                                  uint64_t seed) {
  int64_t total = 0;
  for (int g : in.group_sizes) {
    if (g < 1) throw config_error("downsample: empty origin group");
    total += g;
  }
  if (total != static_cast<int64_t>(in.examples.size()))
    throw config_error("downsample: group sizes do not cover the corpus");
  const int64_t target = downsample_target(total, T_m, N);
  if (target >= total) return in;

  std::vector<int> order(in.group_sizes.size());
  for (size_t i = 0; i < order.size(); i++) order[i] = static_cast<int>(i);
  Rng rng(derive_seed(seed, "downsample"));
  rng.shuffle(order);
  std::vector<char> keep(in.group_sizes.size(), 0);
  int64_t taken = 0;
  for (int gi : order) {
    const int g = in.group_sizes[static_cast<size_t>(gi)];
    if (taken + g > target) break;
    keep[static_cast<size_t>(gi)] = 1;
    taken += g;
  }

  DistilledCorpus out = in;
  out.examples.clear();
  out.group_sizes.clear();
  out.seed = seed;
  size_t offset = 0;
  for (size_t gi = 0; gi < in.group_sizes.size(); gi++) {
    const size_t g = static_cast<size_t>(in.group_sizes[gi]);
    if (keep[gi]) {
      for (size_t k = 0; k < g; k++) out.examples.push_back(in.examples[offset + k]);
      out.group_sizes.push_back(static_cast<int>(g));
    }
    offset += g;
  }
  out.parts.clear();
  out.parts.emplace_back(out.kind, static_cast<int>(out.examples.size()));
  return out;
}

// ----- persistence -----------------------------------------------------------------

// Corpus rows go to `path` in the shared TSV format; everything else goes to
// a JSON sidecar at path + ".meta.json".
inline void write_distilled(const std::filesystem::path& path, const DistilledCorpus& c) {
  corpus::write_corpus(path, c.examples);
  nlohmann::json meta;
  meta["kind"] = c.kind;
  meta["teacher_ckpt"] = c.teacher_ckpt;
  meta["beam"] = c.beam;
  meta["tau"] = c.tau;
  meta["domain"] = c.domain;
  meta["seed"] = c.seed;
  meta["skipped_unfinished"] = c.skipped_unfinished;
  meta["skipped_empty"] = c.skipped_empty;
  meta["group_sizes"] = c.group_sizes;
  meta["parts"] = nlohmann::json::array();
  for (auto& [kind, count] : c.parts) meta["parts"].push_back({{"kind", kind}, {"count", count}});
  write_file(path.string() + ".meta.json", meta.dump(2) + "\n");
}

inline DistilledCorpus read_distilled(const std::filesystem::path& path) {
  DistilledCorpus c;
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(read_file(path.string() + ".meta.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw config_error("bad distilled metadata for " + path.string() + ": " + e.what());
  }
  c.kind = meta.at("kind").get<std::string>();
  c.teacher_ckpt = meta.value("teacher_ckpt", "");
  c.beam = meta.at("beam").get<int>();
  c.tau = meta.at("tau").get<double>();
  c.domain = meta.at("domain").get<std::string>();
  c.seed = meta.at("seed").get<uint64_t>();
  c.skipped_unfinished = meta.value("skipped_unfinished", 0);
  c.skipped_empty = meta.value("skipped_empty", 0);
  c.group_sizes = meta.at("group_sizes").get<std::vector<int>>();
  for (auto& p : meta.at("parts")) c.parts.emplace_back(p.at("kind"), p.at("count"));

  c.examples = corpus::read_corpus(path, c.kind);
  // restore per-example provenance from the part runs
  size_t pos = 0;
  for (auto& [kind, count] : c.parts) {
    for (int i = 0; i < count && pos < c.examples.size(); i++, pos++)
      c.examples[pos].provenance = kind;
  }
  return c;
}

}  // namespace umlab::distiller
