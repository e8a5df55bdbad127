#pragma once
// Synthetic multilingual world: a shared concept space with one language per
// deterministic "decoder" (bijective lexicon + block reordering), so exact
// translations between any language pair exist by construction and generation
// quality is measurable against ground truth.
//
// Languages: pivot "pv" renders concepts in order with an identity lexicon;
// "l1".."lN" each get a seeded lexicon permutation and a block-reorder window.
// Sentences are first-order Markov walks over the concept vocabulary.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "umlab/common.hpp"
#include "umlab/corpus.hpp"

namespace umlab::synthworld {

using corpus::WeightedExample;

struct WorldSpec {
  int num_languages = 4;   // non-pivot
  int concept_vocab = 40;
  int min_len = 4;
  int max_len = 12;
  int markov_order = 1;    // only 1 is implemented; kept explicit in configs
  std::vector<int> reorder_windows;  // per non-pivot language; empty -> 2,3,4,2,3,4,...
  double noise_rate = 0.05;
  uint64_t seed = 1;

  void validate() const {
    if (num_languages < 1) throw config_error("world: num_languages must be >= 1");
    if (concept_vocab < 2 || concept_vocab > 999)  // surfaces are fixed-width ":wNNN"
      throw config_error("world: concept_vocab must be in [2, 999]");
    if (min_len < 1 || max_len < min_len) throw config_error("world: bad length range");
    if (markov_order != 1) throw config_error("world: only markov_order 1 is supported");
    if (!(noise_rate >= 0.0 && noise_rate < 1.0))
      throw config_error("world: noise_rate must be in [0,1)");
    if (!reorder_windows.empty() && static_cast<int>(reorder_windows.size()) != num_languages)
      throw config_error("world: reorder_windows must list one window per language");
    for (int w : reorder_windows)
      if (w < 1) throw config_error("world: reorder window must be >= 1");
  }
};

struct LanguageDef {
  std::string id;
  std::vector<int> lexicon;      // concept -> surface index
  std::vector<int> inv_lexicon;  // surface index -> concept
  int window = 1;
  std::vector<int> perm;         // block permutation, size == window

  std::string surface(int concept_id) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s:w%03d", id.c_str(),
                  lexicon[static_cast<size_t>(concept_id)]);
    return buf;
  }

  // Surface token -> concept id, or nullopt when the token is not this language's.
  std::optional<int> concept_of(const std::string& tok) const {
    const std::string prefix = id + ":w";
    if (tok.size() != prefix.size() + 3 || tok.compare(0, prefix.size(), prefix) != 0)
      return std::nullopt;
    int idx = 0;
    for (size_t i = prefix.size(); i < tok.size(); i++) {
      if (tok[i] < '0' || tok[i] > '9') return std::nullopt;
      idx = idx * 10 + (tok[i] - '0');
    }
    if (idx < 0 || idx >= static_cast<int>(inv_lexicon.size())) return std::nullopt;
    return inv_lexicon[static_cast<size_t>(idx)];
  }
};

struct World {
  WorldSpec spec;
  LanguageDef pivot;
  std::vector<LanguageDef> langs;
  // first-order transitions: per concept, K successor ids with cumulative probs
  std::vector<std::vector<std::pair<int, double>>> transitions;

  const LanguageDef& lang(const std::string& id) const {
    if (id == pivot.id) return pivot;
    for (auto& l : langs)
      if (l.id == id) return l;
    throw config_error("unknown language '" + id + "'");
  }

  std::vector<std::string> all_ids() const {
    std::vector<std::string> out{pivot.id};
    for (auto& l : langs) out.push_back(l.id);
    return out;
  }
};

inline World build_world(const WorldSpec& spec) {
  spec.validate();
  World w;
  w.spec = spec;
  const int C = spec.concept_vocab;

  w.pivot.id = "pv";
  w.pivot.lexicon.resize(static_cast<size_t>(C));
  w.pivot.inv_lexicon.resize(static_cast<size_t>(C));
  for (int c = 0; c < C; c++) {
    w.pivot.lexicon[static_cast<size_t>(c)] = c;  // identity lexicon
    w.pivot.inv_lexicon[static_cast<size_t>(c)] = c;
  }
  w.pivot.window = 1;
  w.pivot.perm = {0};

  for (int n = 0; n < spec.num_languages; n++) {
    LanguageDef l;
    l.id = "l" + std::to_string(n + 1);
    Rng rng(derive_seed(spec.seed, "lexicon", static_cast<uint64_t>(n)));
    l.lexicon.resize(static_cast<size_t>(C));
    for (int c = 0; c < C; c++) l.lexicon[static_cast<size_t>(c)] = c;
    rng.shuffle(l.lexicon);
    l.inv_lexicon.assign(static_cast<size_t>(C), 0);
    for (int c = 0; c < C; c++) l.inv_lexicon[static_cast<size_t>(l.lexicon[static_cast<size_t>(c)])] = c;

    l.window = spec.reorder_windows.empty() ? 2 + (n % 3)
                                            : spec.reorder_windows[static_cast<size_t>(n)];
    l.perm.resize(static_cast<size_t>(l.window));
    for (int j = 0; j < l.window; j++) l.perm[static_cast<size_t>(j)] = j;
    if (l.window > 1) {
      Rng prng(derive_seed(spec.seed, "reorder", static_cast<uint64_t>(n)));
      do {
        prng.shuffle(l.perm);
      } while (std::is_sorted(l.perm.begin(), l.perm.end()));  // force a real reorder
    }
    w.langs.push_back(std::move(l));
  }

  // Sparse Markov transitions: 8 successors per concept with random weights.
  const int K = std::min(8, C);
  Rng trng(derive_seed(spec.seed, "markov"));
  w.transitions.resize(static_cast<size_t>(C));
  for (int c = 0; c < C; c++) {
    std::set<int> succ;
    while (static_cast<int>(succ.size()) < K)
      succ.insert(static_cast<int>(trng.below(static_cast<uint64_t>(C))));
    std::vector<double> wts;
    double total = 0;
    for (size_t i = 0; i < succ.size(); i++) {
      wts.push_back(0.1 + trng.real());
      total += wts.back();
    }
    double cum = 0;
    size_t i = 0;
    for (int s : succ) {
      cum += wts[i++] / total;
      w.transitions[static_cast<size_t>(c)].emplace_back(s, cum);
    }
    w.transitions[static_cast<size_t>(c)].back().second = 1.0;  // close rounding gap
  }
  return w;
}

// ----- rendering ----------------------------------------------------------------

// Concepts -> surface tokens of `lang`: block reorder, then lexicon.
inline std::vector<std::string> render(const World& w, const std::string& lang_id,
                                       const std::vector<int>& concepts) {
  const LanguageDef& l = w.lang(lang_id);
  const int n = static_cast<int>(concepts.size());
  std::vector<int> ordered(concepts);
  for (int s = 0; s + l.window <= n; s += l.window)
    for (int j = 0; j < l.window; j++)
      ordered[static_cast<size_t>(s + j)] = concepts[static_cast<size_t>(s + l.perm[static_cast<size_t>(j)])];
  std::vector<std::string> out;
  out.reserve(concepts.size());
  for (int c : ordered) {
    if (c < 0 || c >= w.spec.concept_vocab)
      throw config_error("render: concept " + std::to_string(c) + " outside vocab");
    out.push_back(l.surface(c));
  }
  return out;
}

// Surface tokens -> concepts, undoing lexicon and block reorder.
// nullopt when any token does not belong to `lang`.
inline std::optional<std::vector<int>> inverse_render(const World& w, const std::string& lang_id,
                                                      const std::vector<std::string>& tokens) {
  const LanguageDef& l = w.lang(lang_id);
  std::vector<int> ordered;
  ordered.reserve(tokens.size());
  for (auto& t : tokens) {
    auto c = l.concept_of(t);
    if (!c) return std::nullopt;
    ordered.push_back(*c);
  }
  const int n = static_cast<int>(ordered.size());
  std::vector<int> concepts(ordered);
  for (int s = 0; s + l.window <= n; s += l.window)
    for (int j = 0; j < l.window; j++)
      concepts[static_cast<size_t>(s + l.perm[static_cast<size_t>(j)])] = ordered[static_cast<size_t>(s + j)];
  return concepts;
}

// Majority token ownership; "ambiguous" on ties or when nothing matches.
inline std::string classify_language(const World& w, const std::vector<std::string>& tokens) {
  std::map<std::string, int> votes;
  auto consider = [&](const LanguageDef& l, const std::string& tok) {
    if (l.concept_of(tok)) votes[l.id]++;
  };
  for (auto& t : tokens) {
    consider(w.pivot, t);
    for (auto& l : w.langs) consider(l, t);
  }
  std::string best = "ambiguous";
  int best_n = 0;
  bool tie = false;
  for (auto& [id, n] : votes) {
    if (n > best_n) {
      best = id;
      best_n = n;
      tie = false;
    } else if (n == best_n) {
      tie = true;
    }
  }
  return (best_n == 0 || tie) ? "ambiguous" : best;
}

// ----- sampling -----------------------------------------------------------------

inline std::vector<int> sample_concepts(const World& w, Rng& rng) {
  const int len = rng.range(w.spec.min_len, w.spec.max_len);
  std::vector<int> out;
  out.reserve(static_cast<size_t>(len));
  int c = static_cast<int>(rng.below(static_cast<uint64_t>(w.spec.concept_vocab)));
  out.push_back(c);
  for (int i = 1; i < len; i++) {
    const double u = rng.real();
    const auto& row = w.transitions[static_cast<size_t>(c)];
    c = row.back().first;
    for (auto& [succ, cum] : row)
      if (u < cum) {
        c = succ;
        break;
      }
    out.push_back(c);
  }
  return out;
}

// Independent per-token word dropout; never empties a sentence.
inline std::vector<std::string> word_dropout(const std::vector<std::string>& tokens, double rate,
                                             Rng& rng) {
  if (rate == 0.0) return tokens;
  std::vector<std::string> out;
  for (auto& t : tokens)
    if (!rng.bernoulli(rate)) out.push_back(t);
  if (out.empty()) out.push_back(tokens.front());
  return out;
}

// ----- corpora ------------------------------------------------------------------

struct CorpusSpec {
  std::vector<int> db_sizes;  // per non-pivot language
  int mono_size = 0;
  int test_size = 0;          // per ordered direction
  uint64_t seed = 1;

  void validate(const WorldSpec& ws) const {
    if (static_cast<int>(db_sizes.size()) != ws.num_languages)
      throw config_error("corpus: db_sizes must list one size per language");
    for (int s : db_sizes)
      if (s < 1) throw config_error("corpus: db size must be >= 1");
    if (mono_size < 0 || test_size < 0) throw config_error("corpus: negative size");
  }
};

struct Corpora {
  std::vector<std::vector<WeightedExample>> db;  // (l_n, pv) pairs per language
  std::vector<std::vector<std::string>> mono;    // pivot sentences
  // ordered directions (src,tgt) -> test pairs; src/tgt rendered from shared concepts
  std::map<std::pair<std::string, std::string>, std::vector<WeightedExample>> tests;
};

// `size` distinct concept sequences from one seeded stream. Distinctness is
// per corpus; cross-corpus overlap is left to independent seeding.
inline std::vector<std::vector<int>> sample_distinct(const World& w, int size, Rng& rng) {
  std::set<std::vector<int>> seen;
  std::vector<std::vector<int>> out;
  int64_t attempts = 0;
  const int64_t cap = 200ll * size + 1000;
  while (static_cast<int>(out.size()) < size) {
    if (++attempts > cap)
      throw config_error("concept space too small for " + std::to_string(size) +
                         " distinct sentences");
    auto c = sample_concepts(w, rng);
    if (seen.insert(c).second) out.push_back(std::move(c));
  }
  return out;
}

inline Corpora generate_corpora(const World& w, const CorpusSpec& cs) {
  cs.validate(w.spec);
  Corpora out;

  for (int n = 0; n < w.spec.num_languages; n++) {
    Rng rng(derive_seed(cs.seed, "train", static_cast<uint64_t>(n)));
    const auto& lang = w.langs[static_cast<size_t>(n)];
    std::vector<WeightedExample> corpus;
    for (auto& concepts : sample_distinct(w, cs.db_sizes[static_cast<size_t>(n)], rng)) {
      WeightedExample ex;
      ex.src_lang = lang.id;
      ex.tgt_lang = w.pivot.id;
      ex.src = word_dropout(render(w, lang.id, concepts), w.spec.noise_rate, rng);
      ex.tgt = word_dropout(render(w, w.pivot.id, concepts), w.spec.noise_rate, rng);
      ex.weight = 1.0;
      corpus.push_back(std::move(ex));
    }
    out.db.push_back(std::move(corpus));
  }

  {
    Rng rng(derive_seed(cs.seed, "mono"));
    for (auto& concepts : sample_distinct(w, cs.mono_size, rng))
      out.mono.push_back(render(w, w.pivot.id, concepts));
  }

  const auto ids = w.all_ids();
  for (auto& src : ids)
    for (auto& tgt : ids) {
      if (src == tgt) continue;
      Rng rng(derive_seed(cs.seed, "test:" + src + ":" + tgt));
      std::vector<WeightedExample> set;
      for (auto& concepts : sample_distinct(w, cs.test_size, rng)) {
        WeightedExample ex;
        ex.src_lang = src;
        ex.tgt_lang = tgt;
        ex.src = render(w, src, concepts);
        ex.tgt = render(w, tgt, concepts);
        ex.provenance = "test";
        set.push_back(std::move(ex));
      }
      out.tests.emplace(std::make_pair(src, tgt), std::move(set));
    }
  return out;
}

// ----- vocabulary ---------------------------------------------------------------

// Fixed id layout: 0..3 specials, then one tag per language (pivot first),
// then surface tokens grouped by language (pivot first), each in surface order.
// size == 4 + (N+1) + (N+1)*concept_vocab
struct Vocabulary {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> ids;
  int pad = 0, bos = 1, eos = 2, unk = 3;

  int id(const std::string& tok) const {
    auto it = ids.find(tok);
    if (it == ids.end()) throw config_error("token '" + tok + "' not in vocabulary");
    return it->second;
  }
  const std::string& token(int id) const {
    if (id < 0 || id >= static_cast<int>(tokens.size()))
      throw config_error("token id " + std::to_string(id) + " out of range");
    return tokens[static_cast<size_t>(id)];
  }
  int size() const { return static_cast<int>(tokens.size()); }

  static std::string tag_for(const std::string& lang_id) { return "<2" + lang_id + ">"; }

  std::vector<int> encode(const std::vector<std::string>& toks) const {
    std::vector<int> out;
    out.reserve(toks.size());
    for (auto& t : toks) out.push_back(id(t));
    return out;
  }
  std::vector<std::string> decode(const std::vector<int>& seq) const {
    std::vector<std::string> out;
    out.reserve(seq.size());
    for (int i : seq) out.push_back(token(i));
    return out;
  }

  // Every token that may appear in text (no specials, no tags).
  std::vector<std::string> surface_tokens() const {
    std::vector<std::string> out;
    for (auto& t : tokens)
      if (t[0] != '<' && t != "[unk]") out.push_back(t);
    return out;
  }
};

inline Vocabulary build_vocabulary(const World& w) {
  Vocabulary v;
  v.tokens = {"<pad>", "<bos>", "<eos>", "[unk]"};
  auto push_lang = [&](const LanguageDef& l) {
    for (int s = 0; s < w.spec.concept_vocab; s++) {
      // enumerate by surface index so ids are contiguous per language
      v.tokens.push_back(l.surface(l.inv_lexicon[static_cast<size_t>(s)]));
    }
  };
  v.tokens.push_back(Vocabulary::tag_for(w.pivot.id));
  for (auto& l : w.langs) v.tokens.push_back(Vocabulary::tag_for(l.id));
  push_lang(w.pivot);
  for (auto& l : w.langs) push_lang(l);
  for (size_t i = 0; i < v.tokens.size(); i++) {
    if (!v.ids.emplace(v.tokens[i], static_cast<int>(i)).second)
      throw config_error("duplicate token in vocabulary: " + v.tokens[i]);
  }
  return v;
}

inline void write_vocabulary(const std::filesystem::path& path, const Vocabulary& v) {
  std::string out;
  for (auto& t : v.tokens) {
    out += t;
    out += '\n';
  }
  write_file(path, out);
}

inline Vocabulary read_vocabulary(const std::filesystem::path& path) {
  Vocabulary v;
  v.tokens.clear();
  for (auto& line : split_char(read_file(path), '\n'))
    if (!line.empty()) v.tokens.push_back(line);
  if (v.tokens.size() < 5) throw config_error("vocabulary file too small: " + path.string());
  for (size_t i = 0; i < v.tokens.size(); i++) v.ids.emplace(v.tokens[i], static_cast<int>(i));
  return v;
}

}  // namespace umlab::synthworld
