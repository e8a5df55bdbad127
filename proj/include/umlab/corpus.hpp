#pragma once
// Weighted parallel examples and their on-disk forms.
//
// corpus TSV, one example per line:
//   src_lang \t tgt_lang \t src tokens (space-sep) \t tgt tokens \t weight
// weight prints as exactly "1.0" for originals and shortest-round-trip digits
// otherwise, so files are byte-stable across runs.
//
// mono TSV: lang \t tokens

#include <charconv>
#include <filesystem>
#include <string>
#include <vector>

#include "umlab/common.hpp"

namespace umlab::corpus {

struct WeightedExample {
  std::string src_lang, tgt_lang;
  std::vector<std::string> src, tgt;
  double weight = 1.0;
  std::string provenance = "original";
};

inline std::string format_weight(double w) {
  if (w == 1.0) return "1.0";
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, w);
  if (ec != std::errc()) throw std::runtime_error("weight format failure");
  return std::string(buf, p);
}

inline std::string to_tsv(const WeightedExample& ex) {
  return ex.src_lang + "\t" + ex.tgt_lang + "\t" + join(ex.src) + "\t" + join(ex.tgt) + "\t" +
         format_weight(ex.weight);
}

inline WeightedExample parse_tsv(const std::string& line, const std::string& provenance) {
  auto cols = split_char(line, '\t');
  if (cols.size() != 5)
    throw config_error("corpus line has " + std::to_string(cols.size()) + " columns, want 5: " +
                       line.substr(0, 80));
  WeightedExample ex;
  ex.src_lang = cols[0];
  ex.tgt_lang = cols[1];
  ex.src = split_ws(cols[2]);
  ex.tgt = split_ws(cols[3]);
  ex.provenance = provenance;
  const char* b = cols[4].data();
  auto [p, ec] = std::from_chars(b, b + cols[4].size(), ex.weight);
  if (ec != std::errc() || p != b + cols[4].size())
    throw config_error("bad weight field '" + cols[4] + "'");
  if (ex.src_lang.empty() || ex.tgt_lang.empty())
    throw config_error("empty language field in corpus line");
  if (!(ex.weight > 0.0) || ex.weight > 1.0)
    throw config_error("weight " + cols[4] + " outside (0,1]");
  return ex;
}

inline void write_corpus(const std::filesystem::path& path,
                         const std::vector<WeightedExample>& examples) {
  std::string out;
  for (auto& ex : examples) {
    out += to_tsv(ex);
    out += '\n';
  }
  write_file(path, out);
}

inline std::vector<WeightedExample> read_corpus(const std::filesystem::path& path,
                                                const std::string& provenance = "original") {
  std::vector<WeightedExample> out;
  for (auto& line : split_char(read_file(path), '\n')) {
    if (line.empty()) continue;
    out.push_back(parse_tsv(line, provenance));
  }
  return out;
}

inline void write_mono(const std::filesystem::path& path, const std::string& lang,
                       const std::vector<std::vector<std::string>>& sentences) {
  std::string out;
  for (auto& s : sentences) {
    out += lang;
    out += '\t';
    out += join(s);
    out += '\n';
  }
  write_file(path, out);
}

inline std::vector<std::vector<std::string>> read_mono(const std::filesystem::path& path,
                                                       std::string* lang_out = nullptr) {
  std::vector<std::vector<std::string>> out;
  for (auto& line : split_char(read_file(path), '\n')) {
    if (line.empty()) continue;
    auto cols = split_char(line, '\t');
    if (cols.size() != 2) throw config_error("mono line needs 2 columns: " + line.substr(0, 80));
    if (lang_out) *lang_out = cols[0];
    out.push_back(split_ws(cols[1]));
  }
  return out;
}

}  // namespace umlab::corpus
