#pragma once
// Evaluation toolkit: corpus BLEU with exponential smoothing, direct and
// two-pass (via-pivot) decoding over a Translator, input perturbations for the
// robustness sweep, and off-target-rate scoring.

#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "umlab/common.hpp"
#include "umlab/corpus.hpp"
#include "umlab/seq2seq.hpp"
#include "umlab/synthworld.hpp"

namespace umlab::evalkit {

// ----- BLEU ------------------------------------------------------------------

struct BleuScore {
  double bleu = 0;                   // 0..100
  std::array<double, 4> precisions{};  // smoothed modified n-gram precisions, 0..1
  double brevity_penalty = 0;
  int64_t hyp_len = 0;
  int64_t ref_len = 0;
};

namespace detail {

// n-gram keys are the tokens joined on an unprintable separator; surface
// tokens never contain it, so joining is collision-free.
inline void count_ngrams(const std::vector<std::string>& toks, int n,
                         std::unordered_map<std::string, int64_t>& out) {
  for (size_t i = 0; i + n <= toks.size(); i++) {
    std::string key = toks[i];
    for (int j = 1; j < n; j++) {
      key += '\x1f';
      key += toks[i + j];
    }
    out[key]++;
  }
}

}  // namespace detail

// Corpus-level BLEU-4, single reference per hypothesis. Zero-match orders are
// smoothed exponentially: the k-th order with no matches scores
// 1 / (2^k * max(total, 1)), k counting zero-match orders seen so far. An
// empty hypothesis corpus scores 0; an empty reference sentence is an error.
inline BleuScore bleu(const std::vector<std::vector<std::string>>& hyps,
                      const std::vector<std::vector<std::string>>& refs) {
  if (hyps.size() != refs.size())
    throw config_error("bleu: " + std::to_string(hyps.size()) + " hypotheses vs " +
                       std::to_string(refs.size()) + " references");
  if (hyps.empty()) throw config_error("bleu: empty corpus");

  int64_t correct[4] = {0, 0, 0, 0};
  int64_t total[4] = {0, 0, 0, 0};
  BleuScore s;
  std::unordered_map<std::string, int64_t> ref_counts, hyp_counts;
  for (size_t i = 0; i < hyps.size(); i++) {
    const auto& h = hyps[i];
    const auto& r = refs[i];
    if (r.empty()) throw config_error("bleu: empty reference at sentence " + std::to_string(i));
    s.hyp_len += static_cast<int64_t>(h.size());
    s.ref_len += static_cast<int64_t>(r.size());
    for (int n = 1; n <= 4; n++) {
      if (h.size() < static_cast<size_t>(n)) break;
      total[n - 1] += static_cast<int64_t>(h.size()) - n + 1;
      ref_counts.clear();
      hyp_counts.clear();
      detail::count_ngrams(r, n, ref_counts);
      detail::count_ngrams(h, n, hyp_counts);
      for (const auto& [key, cnt] : hyp_counts) {
        auto it = ref_counts.find(key);
        if (it != ref_counts.end()) correct[n - 1] += std::min(cnt, it->second);
      }
    }
  }

  if (s.hyp_len == 0) return s;  // nothing produced at all: score 0 by definition

  s.brevity_penalty =
      s.hyp_len >= s.ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(s.ref_len) / s.hyp_len);
  int zero_hit = 0;
  double log_sum = 0;
  for (int n = 0; n < 4; n++) {
    double p;
    if (correct[n] > 0) {
      p = static_cast<double>(correct[n]) / static_cast<double>(total[n]);
    } else {
      zero_hit++;
      p = 1.0 / (std::pow(2.0, zero_hit) * static_cast<double>(std::max<int64_t>(total[n], 1)));
    }
    s.precisions[n] = p;
    log_sum += std::log(p);
  }
  s.bleu = s.brevity_penalty * std::exp(log_sum / 4.0) * 100.0;
  return s;
}

// ----- decoding over a Translator ---------------------------------------------

struct Decoded {
  std::vector<std::vector<std::string>> hyps;
  int failures = 0;  // decodes that never finished; emitted as empty hypotheses
};

namespace detail {

// Top beam candidate, or empty-with-failure when nothing finished.
inline std::vector<std::string> top_tokens(const std::vector<seq2seq::TranslationCandidate>& cs,
                                           bool& failed) {
  if (cs.empty() || !cs.front().finished) {
    failed = true;
    return {};
  }
  return cs.front().tokens;
}

}  // namespace detail

// One hypothesis per test sentence (top beam candidate). Work is sharded by
// sentence index, so the result is identical for any thread count.
inline Decoded translate_direct(seq2seq::Translator& tr,
                                const std::vector<corpus::WeightedExample>& test, int beam,
                                int threads = 1) {
  Decoded d;
  d.hyps.resize(test.size());
  std::vector<uint8_t> failed(test.size(), 0);
  parallel_for(static_cast<int>(test.size()), threads, [&](int i) {
    bool f = false;
    d.hyps[i] = detail::top_tokens(
        tr.translate(test[i].src, test[i].src_lang, test[i].tgt_lang, beam), f);
    failed[i] = f;
  });
  for (uint8_t f : failed) d.failures += f;
  return d;
}

// Pivot through `pivot`: `first` decodes src -> pivot, `second` decodes the top
// pivot hypothesis -> tgt (pass the same model twice for a shared multilingual
// system). A failed first pass propagates as an empty final hypothesis.
inline Decoded translate_two_pass(seq2seq::Translator& first, seq2seq::Translator& second,
                                  const std::vector<corpus::WeightedExample>& test, int beam,
                                  int threads = 1, const std::string& pivot = "pv") {
  Decoded d;
  d.hyps.resize(test.size());
  std::vector<uint8_t> failed(test.size(), 0);
  parallel_for(static_cast<int>(test.size()), threads, [&](int i) {
    bool f = false;
    auto mid = detail::top_tokens(first.translate(test[i].src, test[i].src_lang, pivot, beam), f);
    if (!f) d.hyps[i] = detail::top_tokens(second.translate(mid, pivot, test[i].tgt_lang, beam), f);
    failed[i] = f;
  });
  for (uint8_t f : failed) d.failures += f;
  return d;
}

// ----- input perturbations -----------------------------------------------------

enum class Perturb { deletion, masking, swap_adjacent, substitution };

inline const char* to_string(Perturb k) {
  switch (k) {
    case Perturb::deletion: return "deletion";
    case Perturb::masking: return "masking";
    case Perturb::swap_adjacent: return "swap";
    case Perturb::substitution: return "substitution";
  }
  throw config_error("unknown perturbation kind");
}

inline Perturb perturb_from_string(const std::string& s) {
  if (s == "deletion") return Perturb::deletion;
  if (s == "masking") return Perturb::masking;
  if (s == "swap") return Perturb::swap_adjacent;
  if (s == "substitution") return Perturb::substitution;
  throw config_error("unknown perturbation kind: " + s);
}

// Apply one perturbation at rate p; every token draws independently. Deletion
// that would empty the sentence leaves a single "[unk]" so the decoder still
// has an input. A drawn token swaps with its right neighbor (the last token,
// having none, swaps left). `pool` is the substitution inventory and may span
// every language (noise is allowed to be off-vocabulary for the source side).
inline std::vector<std::string> perturb_sentence(const std::vector<std::string>& tokens,
                                                 Perturb kind, double p, Rng& rng,
                                                 const std::vector<std::string>& pool) {
  if (p < 0 || p > 1) throw config_error("perturbation rate must be in [0,1]");
  if (p == 0) return tokens;
  std::vector<std::string> out;
  switch (kind) {
    case Perturb::deletion:
      for (const auto& t : tokens)
        if (rng.real() >= p) out.push_back(t);
      if (out.empty() && !tokens.empty()) out.push_back("[unk]");
      break;
    case Perturb::masking:
      out = tokens;
      for (auto& t : out)
        if (rng.real() < p) t = "[unk]";
      break;
    case Perturb::swap_adjacent:
      out = tokens;
      for (size_t i = 0; i < out.size(); i++)
        if (rng.real() < p && out.size() >= 2)
          std::swap(out[i], out[i + 1 < out.size() ? i + 1 : i - 1]);
      break;
    case Perturb::substitution:
      if (pool.empty()) throw config_error("substitution needs a token pool");
      out = tokens;
      for (auto& t : out)
        if (rng.real() < p) t = pool[rng.below(pool.size())];
      break;
  }
  return out;
}

// Perturb the source side of a test set; references stay clean. Each sentence
// draws from its own seed, so the result is independent of iteration order.
// p = 0 returns the input verbatim (the sweep's baseline column must match an
// unperturbed evaluation bit for bit).
inline std::vector<corpus::WeightedExample> perturb_sources(
    const std::vector<corpus::WeightedExample>& test, Perturb kind, double p, uint64_t seed,
    const std::vector<std::string>& pool) {
  if (p == 0) return test;
  std::vector<corpus::WeightedExample> out = test;
  for (size_t i = 0; i < out.size(); i++) {
    Rng rng(derive_seed(seed, "perturb", static_cast<uint64_t>(i)));
    out[i].src = perturb_sentence(out[i].src, kind, p, rng, pool);
  }
  return out;
}

// ----- off-target rate ----------------------------------------------------------

// Fraction of hypotheses whose majority surface language is not the requested
// one. "ambiguous" (empty output, vocabulary soup, exact ties) counts as
// off-target: the sentence is certainly not *in* the requested language.
inline double off_target_rate(const synthworld::World& world,
                              const std::vector<std::vector<std::string>>& hyps,
                              const std::string& expected_lang) {
  if (hyps.empty()) throw config_error("off_target_rate: no hypotheses");
  int64_t off = 0;
  for (const auto& h : hyps)
    if (synthworld::classify_language(world, h) != expected_lang) off++;
  return static_cast<double>(off) / static_cast<double>(hyps.size());
}

// ----- full matrix ---------------------------------------------------------------

using TestSets = std::map<std::pair<std::string, std::string>, std::vector<corpus::WeightedExample>>;

struct DirectionScore {
  BleuScore bleu;
  double off_target = 0;
  int failures = 0;
};

struct EvalMatrix {
  std::map<std::pair<std::string, std::string>, DirectionScore> cells;
  // supervised = directions touching the pivot; zero = the rest
  double avg_supervised = 0;
  double avg_zero = 0;
  double avg_zero_off_target = 0;
  int supervised_count = 0;
  int zero_count = 0;
};

namespace detail {

// `second` null means one-pass decoding; otherwise src -> pivot -> tgt.
inline EvalMatrix evaluate_matrix_impl(seq2seq::Translator& tr, seq2seq::Translator* second,
                                       const TestSets& tests, const synthworld::World& world,
                                       int beam, int threads, const std::string& pivot) {
  if (tests.empty()) throw config_error("evaluate_matrix: no test sets");
  EvalMatrix m;
  double sup_sum = 0, zero_sum = 0, zero_off_sum = 0;
  for (const auto& [dir, examples] : tests) {
    Decoded d = second ? translate_two_pass(tr, *second, examples, beam, threads, pivot)
                       : translate_direct(tr, examples, beam, threads);
    std::vector<std::vector<std::string>> refs;
    refs.reserve(examples.size());
    for (const auto& e : examples) refs.push_back(e.tgt);
    DirectionScore ds;
    ds.bleu = bleu(d.hyps, refs);
    ds.off_target = off_target_rate(world, d.hyps, dir.second);
    ds.failures = d.failures;
    m.cells[dir] = ds;
    if (dir.first == pivot || dir.second == pivot) {
      sup_sum += ds.bleu.bleu;
      m.supervised_count++;
    } else {
      zero_sum += ds.bleu.bleu;
      zero_off_sum += ds.off_target;
      m.zero_count++;
    }
  }
  if (m.supervised_count) m.avg_supervised = sup_sum / m.supervised_count;
  if (m.zero_count) {
    m.avg_zero = zero_sum / m.zero_count;
    m.avg_zero_off_target = zero_off_sum / m.zero_count;
  }
  return m;
}

}  // namespace detail

inline EvalMatrix evaluate_matrix(seq2seq::Translator& tr, const TestSets& tests,
                                  const synthworld::World& world, int beam, int threads = 1,
                                  const std::string& pivot = "pv") {
  return detail::evaluate_matrix_impl(tr, nullptr, tests, world, beam, threads, pivot);
}

// Two-pass variant; callers usually hand in only the zero-resource test sets.
inline EvalMatrix evaluate_matrix_two_pass(seq2seq::Translator& first, seq2seq::Translator& second,
                                           const TestSets& tests, const synthworld::World& world,
                                           int beam, int threads = 1,
                                           const std::string& pivot = "pv") {
  return detail::evaluate_matrix_impl(first, &second, tests, world, beam, threads, pivot);
}

// Long-form cell table: one row per direction plus avg_* summary rows. Values
// go through format_double, so a rerun that reproduces the numbers reproduces
// the bytes.
inline void write_matrix(const std::filesystem::path& path, const EvalMatrix& m) {
  std::string out = "src\ttgt\tbleu\tbp\toff_target\tfailures\n";
  for (const auto& [dir, ds] : m.cells) {
    out += dir.first;
    out += '\t';
    out += dir.second;
    out += '\t';
    out += format_double(ds.bleu.bleu);
    out += '\t';
    out += format_double(ds.bleu.brevity_penalty);
    out += '\t';
    out += format_double(ds.off_target);
    out += '\t';
    out += std::to_string(ds.failures);
    out += '\n';
  }
  out += "avg\tsupervised\t" + format_double(m.avg_supervised) + "\t\t\t\n";
  out += "avg\tzero\t" + format_double(m.avg_zero) + "\t\t" +
         format_double(m.avg_zero_off_target) + "\t\n";
  write_file(path, out);
}

inline EvalMatrix read_matrix(const std::filesystem::path& path, const std::string& pivot = "pv") {
  auto lines = split_char(read_file(path), '\n');
  EvalMatrix m;
  for (size_t i = 1; i < lines.size(); i++) {
    if (lines[i].empty()) continue;
    auto cols = split_char(lines[i], '\t');
    if (cols.size() != 6) throw config_error("matrix row needs 6 columns: " + lines[i]);
    if (cols[0] == "avg") {
      if (cols[1] == "supervised") m.avg_supervised = std::stod(cols[2]);
      else {
        m.avg_zero = std::stod(cols[2]);
        m.avg_zero_off_target = std::stod(cols[4]);
      }
      continue;
    }
    DirectionScore ds;
    ds.bleu.bleu = std::stod(cols[2]);
    ds.bleu.brevity_penalty = std::stod(cols[3]);
    ds.off_target = std::stod(cols[4]);
    ds.failures = std::stoi(cols[5]);
    m.cells[{cols[0], cols[1]}] = ds;
    if (cols[0] == pivot || cols[1] == pivot) m.supervised_count++;
    else m.zero_count++;
  }
  return m;
}

// Square presentation grid (rows = source language, columns = target).
inline void write_matrix_grid(const std::filesystem::path& path, const EvalMatrix& m,
                              const std::vector<std::string>& languages) {
  std::string out = "src/tgt";
  for (const auto& l : languages) out += '\t' + l;
  out += '\n';
  for (const auto& src : languages) {
    out += src;
    for (const auto& tgt : languages) {
      auto it = m.cells.find({src, tgt});
      out += '\t';
      out += it == m.cells.end() ? "-" : format_double(it->second.bleu.bleu);
    }
    out += '\n';
  }
  write_file(path, out);
}

// ----- robustness sweep -----------------------------------------------------------

struct RobustnessMethod {
  std::string name;
  seq2seq::Translator* model = nullptr;
  seq2seq::Translator* second = nullptr;  // non-null: two-pass via the pivot
};

struct RobustnessCell {
  std::string method;
  std::string kind;
  double p = 0;
  double bleu = 0;  // mean over directions
  int failures = 0;
};

struct RobustnessReport {
  std::vector<RobustnessCell> cells;  // methods x kinds x probabilities, in that order
};

// Every method sees the same perturbed sources: the corruption seed depends on
// (kind, p, direction) only. p must be sorted ascending and start at 0 so each
// sweep carries its own clean baseline.
inline RobustnessReport robustness_sweep(const std::vector<RobustnessMethod>& methods,
                                         const TestSets& tests,
                                         const std::vector<Perturb>& kinds,
                                         const std::vector<double>& ps, uint64_t seed,
                                         const std::vector<std::string>& pool, int beam,
                                         int threads = 1, const std::string& pivot = "pv") {
  if (methods.empty() || kinds.empty() || tests.empty())
    throw config_error("robustness sweep needs methods, kinds and test sets");
  if (ps.empty() || ps.front() != 0)
    throw config_error("perturbation probabilities must start at 0");
  for (size_t i = 1; i < ps.size(); i++)
    if (ps[i] <= ps[i - 1]) throw config_error("perturbation probabilities must be ascending");
  for (const auto& me : methods)
    if (!me.model) throw config_error("robustness method without a model: " + me.name);

  RobustnessReport report;
  for (const auto& me : methods) {
    for (auto kind : kinds) {
      for (double p : ps) {
        RobustnessCell cell;
        cell.method = me.name;
        cell.kind = to_string(kind);
        cell.p = p;
        double sum = 0;
        for (const auto& [dir, examples] : tests) {
          uint64_t cell_seed =
              derive_seed(seed, cell.kind + "@" + format_double(p) + ":" + dir.first + ">" + dir.second);
          auto perturbed = perturb_sources(examples, kind, p, cell_seed, pool);
          Decoded d = me.second
                          ? translate_two_pass(*me.model, *me.second, perturbed, beam, threads, pivot)
                          : translate_direct(*me.model, perturbed, beam, threads);
          std::vector<std::vector<std::string>> refs;
          for (const auto& e : examples) refs.push_back(e.tgt);
          sum += bleu(d.hyps, refs).bleu;
          cell.failures += d.failures;
        }
        cell.bleu = sum / static_cast<double>(tests.size());
        report.cells.push_back(std::move(cell));
      }
    }
  }
  return report;
}

inline void write_robustness(const std::filesystem::path& path, const RobustnessReport& r) {
  std::string out = "method\tkind\tp\tbleu\n";
  for (const auto& c : r.cells)
    out += c.method + '\t' + c.kind + '\t' + format_double(c.p) + '\t' + format_double(c.bleu) + '\n';
  write_file(path, out);
}

inline RobustnessReport read_robustness(const std::filesystem::path& path) {
  auto lines = split_char(read_file(path), '\n');
  RobustnessReport r;
  for (size_t i = 1; i < lines.size(); i++) {
    if (lines[i].empty()) continue;
    auto cols = split_char(lines[i], '\t');
    if (cols.size() != 4) throw config_error("robustness row needs 4 columns: " + lines[i]);
    RobustnessCell c;
    c.method = cols[0];
    c.kind = cols[1];
    c.p = std::stod(cols[2]);
    c.bleu = std::stod(cols[3]);
    r.cells.push_back(std::move(c));
  }
  return r;
}

// ----- representation export --------------------------------------------------------

struct RepresentationRow {
  int id = 0;
  std::string lang;
  std::vector<float> values;  // mean-pooled encoder state, d_model wide
};

inline void write_representations(const std::filesystem::path& path,
                                  const std::vector<RepresentationRow>& rows) {
  std::string out = "id\tlang\tvalues...\n";
  for (const auto& r : rows) {
    out += std::to_string(r.id) + '\t' + r.lang;
    for (float v : r.values) {
      out += '\t';
      out += format_double(static_cast<double>(v));
    }
    out += '\n';
  }
  write_file(path, out);
}

}  // namespace umlab::evalkit
