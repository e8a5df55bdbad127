#pragma once
// Experiment orchestration: JSON config files, a seeded stage DAG with
// content-hashed run manifests (so finished stages are skipped), and report
// aggregation across seeds. The CLI in tools/ is a thin shell over the cmd_*
// functions at the bottom.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "umlab/common.hpp"
#include "umlab/corpus.hpp"
#include "umlab/distiller.hpp"
#include "umlab/evalkit.hpp"
#include "umlab/seq2seq.hpp"
#include "umlab/synthworld.hpp"
#include "umlab/trainer.hpp"

namespace umlab::experiment {

constexpr const char* kVersion = "0.1.0";

// ----- config ---------------------------------------------------------------

struct EvalSettings {
  int beam = 5;
  double alpha = 1.0;
  std::vector<std::string> methods;   // empty -> default roster, resolved at load
  int representation_count = 100;     // probe sentences per language; 0 disables

  void validate() const {
    if (beam < 1 || beam > 64) throw config_error("eval: beam must be in [1,64]");
    if (!(alpha >= 0)) throw config_error("eval: alpha must be >= 0");
    if (representation_count < 0) throw config_error("eval: representation_count must be >= 0");
  }
};

struct RobustnessSettings {
  std::vector<std::string> methods;  // must be set to run the robustness stage
  std::vector<std::string> kinds = {"substitution"};
  std::vector<double> probabilities = {0.0, 0.05, 0.10, 0.15, 0.20, 0.30};
};

// One student training run. `teachers` picks the distilled corpora kinds the
// student consumes; `corpora` selects the original/distilled mix; a nonzero
// `distill_beam` or `downsample_tm` points the student at the matching
// distillation variant.
struct StudentSpec {
  std::string name;
  std::vector<std::string> teachers = {"src", "tgt", "pivot"};
  std::string corpora = "both";  // both | zero | supervised
  bool bt = false;
  int distill_beam = 0;       // 0 -> the experiment-wide distillation beam
  long long downsample_tm = 0;  // 0 -> no downsampling

  void validate() const {
    if (name.empty()) throw config_error("student: missing name");
    for (char ch : name)
      if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '-' || ch == '_'))
        throw config_error("student name must be [a-zA-Z0-9_-]: " + name);
    if (corpora != "both" && corpora != "zero" && corpora != "supervised")
      throw config_error("student " + name + ": corpora must be both|zero|supervised");
    std::set<std::string> seen;
    for (const auto& t : teachers) {
      if (t != "src" && t != "tgt" && t != "pivot")
        throw config_error("student " + name + ": unknown teacher kind " + t);
      if (!seen.insert(t).second) throw config_error("student " + name + ": duplicate teacher");
    }
    if (corpora == "supervised") {
      if (!teachers.empty())
        throw config_error("student " + name + ": supervised corpora take no teachers");
      if (bt) throw config_error("student " + name + ": supervised corpora exclude bt");
    } else if (teachers.empty()) {
      throw config_error("student " + name + ": needs at least one teacher kind");
    }
    if (bt && corpora != "both")
      throw config_error("student " + name + ": bt requires corpora=both");
    if (distill_beam < 0 || distill_beam > 8)
      throw config_error("student " + name + ": distill_beam must be in [0,8]");
    if (downsample_tm < 0)
      throw config_error("student " + name + ": downsample_tm must be >= 0");
  }
};

struct ExperimentConfig {
  synthworld::WorldSpec world;     // seed overwritten per run
  synthworld::CorpusSpec corpus;   // seed overwritten per run
  seq2seq::ModelConfig model;
  trainer::TrainConfig teacher_train;
  trainer::TrainConfig student_train;
  distiller::TeacherConfig distill;
  EvalSettings eval;
  RobustnessSettings robustness;
  std::vector<StudentSpec> students;
  bool bilinguals = false;  // also train per-language bilingual pivot models
  std::vector<uint64_t> seeds;
  std::string out_dir;

  // filled at load time
  std::filesystem::path out_root;  // out_dir, or the UMLAB_OUT override
  std::string config_hash;         // canonical content hash of the JSON document

  const StudentSpec* find_student(const std::string& name) const {
    for (const auto& s : students)
      if (s.name == name) return &s;
    return nullptr;
  }

  int effective_beam(const StudentSpec& s) const {
    return s.distill_beam > 0 ? s.distill_beam : distill.beam;
  }

  std::vector<std::string> zero_langs() const {
    std::vector<std::string> out;
    for (int n = 1; n <= world.num_languages; n++) out.push_back("l" + std::to_string(n));
    return out;
  }
  std::vector<std::string> all_langs() const {
    auto out = zero_langs();
    out.insert(out.begin(), "pv");
    return out;
  }

  void validate() const;
};

namespace detail {

inline nlohmann::json parse_json(const std::string& text, const std::string& what) {
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw config_error("bad JSON in " + what + ": " + e.what());
  }
}

template <class T>
T jget(const nlohmann::json& j, const std::string& key, T def) {
  if (!j.contains(key)) return def;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config field '" + key + "': " + e.what());
  }
}

inline void check_keys(const nlohmann::json& j, const std::string& section,
                       std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw config_error("config section '" + section + "' must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || it.key() == a;
    if (!ok) throw config_error("unknown key '" + it.key() + "' in config section '" + section + "'");
  }
}

inline trainer::TrainConfig parse_train(const nlohmann::json& j, const std::string& section) {
  check_keys(j, section,
             {"total_steps", "peak_lr", "warmup_steps", "batch_tokens", "checkpoint_every",
              "keep_last", "label_smoothing", "clip_norm"});
  trainer::TrainConfig tc;
  tc.total_steps = jget(j, "total_steps", tc.total_steps);
  tc.peak_lr = jget(j, "peak_lr", tc.peak_lr);
  tc.warmup_steps = jget(j, "warmup_steps", tc.warmup_steps);
  tc.batch_tokens = jget(j, "batch_tokens", tc.batch_tokens);
  tc.checkpoint_every = jget(j, "checkpoint_every", tc.checkpoint_every);
  tc.keep_last = jget(j, "keep_last", tc.keep_last);
  tc.label_smoothing = jget(j, "label_smoothing", tc.label_smoothing);
  tc.clip_norm = jget(j, "clip_norm", tc.clip_norm);
  return tc;
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  using detail::check_keys;
  using detail::jget;
  auto j = detail::parse_json(text, "experiment config");
  check_keys(j, "<root>",
             {"world", "corpus", "model", "teacher_train", "student_train", "distill", "eval",
              "robustness", "students", "bilinguals", "seeds", "out_dir"});

  ExperimentConfig c;
  if (j.contains("world")) {
    const auto& w = j.at("world");
    check_keys(w, "world",
               {"num_languages", "concept_vocab", "min_len", "max_len", "noise_rate",
                "reorder_windows"});
    c.world.num_languages = jget(w, "num_languages", c.world.num_languages);
    c.world.concept_vocab = jget(w, "concept_vocab", c.world.concept_vocab);
    c.world.min_len = jget(w, "min_len", c.world.min_len);
    c.world.max_len = jget(w, "max_len", c.world.max_len);
    c.world.noise_rate = jget(w, "noise_rate", c.world.noise_rate);
    c.world.reorder_windows = jget(w, "reorder_windows", c.world.reorder_windows);
  }
  if (j.contains("corpus")) {
    const auto& k = j.at("corpus");
    check_keys(k, "corpus", {"db_sizes", "mono_size", "test_size"});
    c.corpus.db_sizes = jget(k, "db_sizes", c.corpus.db_sizes);
    c.corpus.mono_size = jget(k, "mono_size", c.corpus.mono_size);
    c.corpus.test_size = jget(k, "test_size", c.corpus.test_size);
  }
  if (c.corpus.db_sizes.empty()) c.corpus.db_sizes.assign(c.world.num_languages, 1000);
  if (j.contains("model")) {
    const auto& m = j.at("model");
    check_keys(m, "model",
               {"d_model", "enc_layers", "dec_layers", "heads", "d_ff", "max_len", "dropout",
                "tied_embeddings"});
    c.model.d_model = jget(m, "d_model", c.model.d_model);
    c.model.enc_layers = jget(m, "enc_layers", c.model.enc_layers);
    c.model.dec_layers = jget(m, "dec_layers", c.model.dec_layers);
    c.model.heads = jget(m, "heads", c.model.heads);
    c.model.d_ff = jget(m, "d_ff", c.model.d_ff);
    c.model.max_len = jget(m, "max_len", c.model.max_len);
    c.model.dropout = jget(m, "dropout", c.model.dropout);
    c.model.tied_embeddings = jget(m, "tied_embeddings", c.model.tied_embeddings);
  }
  if (j.contains("teacher_train")) c.teacher_train = detail::parse_train(j.at("teacher_train"), "teacher_train");
  c.student_train = c.teacher_train;
  c.student_train.total_steps = 4000;
  if (j.contains("student_train")) c.student_train = detail::parse_train(j.at("student_train"), "student_train");
  if (j.contains("distill")) {
    const auto& d = j.at("distill");
    check_keys(d, "distill", {"beam", "tau", "domain"});
    c.distill.beam = jget(d, "beam", c.distill.beam);
    c.distill.tau = jget(d, "tau", c.distill.tau);
    c.distill.domain = jget(d, "domain", c.distill.domain);
  }
  if (j.contains("eval")) {
    const auto& e = j.at("eval");
    check_keys(e, "eval", {"beam", "alpha", "methods", "representation_count"});
    c.eval.beam = jget(e, "beam", c.eval.beam);
    c.eval.alpha = jget(e, "alpha", c.eval.alpha);
    c.eval.methods = jget(e, "methods", c.eval.methods);
    c.eval.representation_count = jget(e, "representation_count", c.eval.representation_count);
  }
  if (j.contains("robustness")) {
    const auto& r = j.at("robustness");
    check_keys(r, "robustness", {"methods", "kinds", "probabilities"});
    c.robustness.methods = jget(r, "methods", c.robustness.methods);
    c.robustness.kinds = jget(r, "kinds", c.robustness.kinds);
    c.robustness.probabilities = jget(r, "probabilities", c.robustness.probabilities);
  }
  if (j.contains("students")) {
    if (!j.at("students").is_array()) throw config_error("config: students must be an array");
    for (const auto& s : j.at("students")) {
      check_keys(s, "students[]",
                 {"name", "teachers", "corpora", "bt", "distill_beam", "downsample_tm"});
      StudentSpec sp;
      sp.name = jget(s, "name", std::string());
      sp.teachers = jget(s, "teachers", sp.teachers);
      sp.corpora = jget(s, "corpora", sp.corpora);
      if (sp.corpora == "supervised" && !s.contains("teachers")) sp.teachers.clear();
      sp.bt = jget(s, "bt", sp.bt);
      sp.distill_beam = jget(s, "distill_beam", sp.distill_beam);
      sp.downsample_tm = jget(s, "downsample_tm", sp.downsample_tm);
      c.students.push_back(std::move(sp));
    }
  }
  c.bilinguals = jget(j, "bilinguals", c.bilinguals);
  c.seeds = jget(j, "seeds", c.seeds);
  c.out_dir = jget(j, "out_dir", c.out_dir);

  if (c.eval.methods.empty()) {
    c.eval.methods = {"multilingual", "multilingual-pivot"};
    if (c.bilinguals) c.eval.methods.push_back("bilingual-pivot");
    for (const auto& s : c.students) c.eval.methods.push_back(s.name);
  }

  c.config_hash = hex64(fnv1a64(j.dump()));
  const char* env = std::getenv("UMLAB_OUT");
  c.out_root = (env && *env) ? std::filesystem::path(env) : std::filesystem::path(c.out_dir);
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return parse_config(read_file(path));
}

inline void ExperimentConfig::validate() const {
  synthworld::WorldSpec w = world;
  w.seed = 1;
  w.validate();
  synthworld::CorpusSpec k = corpus;
  k.seed = 1;
  k.validate(w);
  model.validate();
  trainer::TrainConfig t = teacher_train;
  t.seed = 1;
  t.validate();
  t = student_train;
  t.seed = 1;
  t.validate();
  distill.validate();
  eval.validate();
  if (seeds.empty()) throw config_error("config: seeds must be a non-empty list");
  std::set<uint64_t> sset(seeds.begin(), seeds.end());
  if (sset.size() != seeds.size()) throw config_error("config: duplicate seeds");
  if (out_root.empty())
    throw config_error("config: out_dir missing (or set the UMLAB_OUT environment variable)");

  const std::set<std::string> reserved = {"teacher", "multilingual", "multilingual-pivot",
                                          "bilingual-pivot"};
  std::set<std::string> names;
  for (const auto& s : students) {
    s.validate();
    if (reserved.count(s.name)) throw config_error("student name is reserved: " + s.name);
    if (!names.insert(s.name).second) throw config_error("duplicate student name: " + s.name);
  }
  for (const auto& m : eval.methods) {
    if (m == "bilingual-pivot" && !bilinguals)
      throw config_error("eval method bilingual-pivot requires \"bilinguals\": true");
    if (!reserved.count(m) && !find_student(m))
      throw config_error("unknown eval method: " + m);
  }
  for (const auto& m : robustness.methods) {
    if (m == "bilingual-pivot")
      throw config_error("robustness: bilingual-pivot is not supported (per-direction model pairs)");
    if (!reserved.count(m) && !find_student(m))
      throw config_error("unknown robustness method: " + m);
  }
  for (const auto& kind : robustness.kinds) evalkit::perturb_from_string(kind);
}

// ----- artifact layout --------------------------------------------------------

struct RunPaths {
  std::filesystem::path root;
  std::filesystem::path seed_dir;

  std::filesystem::path data() const { return seed_dir / "data"; }
  std::filesystem::path vocab() const { return data() / "vocab.txt"; }
  std::filesystem::path db(const std::string& lang) const {
    return data() / ("db_" + lang + ".tsv");
  }
  std::filesystem::path mono() const { return data() / "mono_pv.tsv"; }
  std::filesystem::path test(const std::string& s, const std::string& t) const {
    return data() / ("test_" + s + "_" + t + ".tsv");
  }
  std::filesystem::path teacher() const { return seed_dir / "teacher"; }
  std::filesystem::path bilingual(const std::string& lang) const {
    return seed_dir / "bilingual" / lang;
  }
  std::filesystem::path student(const std::string& name) const {
    return seed_dir / "students" / name;
  }
  static std::string distill_dirname(int beam, long long tm) {
    std::string d = "beam" + std::to_string(beam);
    if (tm > 0) d += "_tm" + std::to_string(tm);
    return d;
  }
  std::filesystem::path distill(int beam, long long tm, const std::string& kind) const {
    return seed_dir / "distill" / distill_dirname(beam, tm) / kind;
  }
  std::filesystem::path bt() const { return seed_dir / "distill" / "bt"; }
  std::filesystem::path distilled_file(int beam, long long tm, const std::string& kind,
                                       const std::string& src, const std::string& tgt) const {
    return distill(beam, tm, kind) / (kind + "_" + src + "_" + tgt + ".tsv");
  }
  std::filesystem::path bt_file(const std::string& lang) const {
    return bt() / ("bt_" + lang + ".tsv");
  }
  std::filesystem::path eval() const { return seed_dir / "eval"; }
  std::filesystem::path matrix(const std::string& method) const {
    return eval() / (method + ".matrix.tsv");
  }
  std::filesystem::path robustness() const { return seed_dir / "robustness"; }
};

inline RunPaths run_paths(const ExperimentConfig& cfg, uint64_t master) {
  RunPaths p;
  p.root = cfg.out_root;
  p.seed_dir = cfg.out_root / ("seed_" + std::to_string(master));
  return p;
}

// ----- run manifests ------------------------------------------------------------

struct RunManifest {
  std::string stage;
  std::string config_hash;
  uint64_t seed = 0;
  std::map<std::string, std::string> inputs;   // out_root-relative path -> content hash
  std::map<std::string, std::string> outputs;
  long long wall_ms = 0;
  std::string version;
};

namespace detail {

inline std::string rel_to(const std::filesystem::path& root, const std::filesystem::path& p) {
  return std::filesystem::relative(p, root).generic_string();
}

inline std::map<std::string, std::string> hash_artifacts(const std::filesystem::path& root,
                                                         const std::vector<std::filesystem::path>& paths) {
  std::vector<std::string> missing;
  std::map<std::string, std::string> out;
  for (const auto& p : paths) {
    if (!std::filesystem::exists(p)) {
      missing.push_back(rel_to(root, p));
      continue;
    }
    out[rel_to(root, p)] = hex64(hash_file(p));
  }
  if (!missing.empty()) {
    std::string msg = "missing artifacts:";
    for (const auto& m : missing) msg += "\n  " + m;
    throw missing_artifact_error(msg);
  }
  return out;
}

}  // namespace detail

inline void write_manifest(const std::filesystem::path& path, const RunManifest& m) {
  nlohmann::json j;
  j["stage"] = m.stage;
  j["config_hash"] = m.config_hash;
  j["seed"] = m.seed;
  j["inputs"] = m.inputs;
  j["outputs"] = m.outputs;
  j["wall_ms"] = m.wall_ms;
  j["version"] = m.version;
  write_file(path, j.dump(2) + "\n");
}

inline RunManifest read_manifest(const std::filesystem::path& path) {
  auto j = detail::parse_json(read_file(path), path.string());
  RunManifest m;
  m.stage = detail::jget(j, "stage", std::string());
  m.config_hash = detail::jget(j, "config_hash", std::string());
  m.seed = detail::jget(j, "seed", uint64_t{0});
  m.inputs = detail::jget(j, "inputs", m.inputs);
  m.outputs = detail::jget(j, "outputs", m.outputs);
  m.wall_ms = detail::jget(j, "wall_ms", m.wall_ms);
  m.version = detail::jget(j, "version", std::string());
  return m;
}

// ----- stage runner --------------------------------------------------------------

// Runs `body` inside `stage_dir` unless a manifest proves the stage already ran
// with the same config, seed and input hashes and its outputs are intact.
// Leftovers from a different configuration (or a crashed run) are refused
// unless `force` wipes them. `body` returns the list of files it produced.
inline bool run_stage(const std::filesystem::path& out_root, const std::filesystem::path& stage_dir,
                      const std::string& stage_name, const std::string& config_hash, uint64_t seed,
                      const std::vector<std::filesystem::path>& inputs, bool force,
                      const std::function<std::vector<std::filesystem::path>()>& body) {
  namespace fs = std::filesystem;
  auto input_hashes = detail::hash_artifacts(out_root, inputs);
  const fs::path manifest_path = stage_dir / "manifest.json";

  bool conflicting = false;
  if (fs::exists(manifest_path)) {
    RunManifest m = read_manifest(manifest_path);
    if (m.stage == stage_name && m.config_hash == config_hash && m.seed == seed &&
        m.inputs == input_hashes) {
      bool intact = true;
      for (const auto& [rel, hash] : m.outputs) {
        fs::path p = out_root / rel;
        if (!fs::exists(p) || hex64(hash_file(p)) != hash) {
          intact = false;
          break;
        }
      }
      if (intact) return false;  // up to date
    }
    conflicting = true;
  } else if (fs::exists(stage_dir) && !fs::is_empty(stage_dir)) {
    conflicting = true;  // outputs without a manifest: a crashed or foreign run
  }

  if (conflicting) {
    if (!force)
      throw config_error("stage '" + stage_name + "' has conflicting outputs in " +
                         stage_dir.string() + "; rerun with --force to replace them");
    fs::remove_all(stage_dir);
  }
  fs::create_directories(stage_dir);

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<fs::path> outputs = body();
  const auto t1 = std::chrono::steady_clock::now();

  RunManifest m;
  m.stage = stage_name;
  m.config_hash = config_hash;
  m.seed = seed;
  m.inputs = std::move(input_hashes);
  m.outputs = detail::hash_artifacts(out_root, outputs);
  m.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(t1 - t0).count();
  m.version = kVersion;
  write_manifest(manifest_path, m);
  return true;
}

// ----- shared artifact loading -----------------------------------------------------

namespace detail {

inline synthworld::World load_world(const ExperimentConfig& cfg, uint64_t master) {
  synthworld::WorldSpec ws = cfg.world;
  ws.seed = derive_seed(derive_seed(master, "gen-data"), "world");
  return synthworld::build_world(ws);
}

inline evalkit::TestSets load_tests(const ExperimentConfig& cfg, const RunPaths& p) {
  evalkit::TestSets tests;
  auto langs = cfg.all_langs();
  for (const auto& s : langs)
    for (const auto& t : langs)
      if (s != t) tests[{s, t}] = corpus::read_corpus(p.test(s, t), "test");
  return tests;
}

inline evalkit::TestSets zero_subset(const evalkit::TestSets& tests) {
  evalkit::TestSets zero;
  for (const auto& [dir, ex] : tests)
    if (dir.first != "pv" && dir.second != "pv") zero[dir] = ex;
  return zero;
}

inline std::vector<std::filesystem::path> test_files(const ExperimentConfig& cfg,
                                                     const RunPaths& p, bool zero_only) {
  std::vector<std::filesystem::path> out;
  auto langs = cfg.all_langs();
  for (const auto& s : langs)
    for (const auto& t : langs) {
      if (s == t) continue;
      if (zero_only && (s == "pv" || t == "pv")) continue;
      out.push_back(p.test(s, t));
    }
  return out;
}

inline std::unique_ptr<seq2seq::ModelTranslator> load_translator(
    const ExperimentConfig& cfg, const std::filesystem::path& ckpt,
    const synthworld::Vocabulary& vocab) {
  auto params = seq2seq::load_checkpoint<float>(ckpt);
  return std::make_unique<seq2seq::ModelTranslator>(std::move(params), cfg.model, vocab,
                                                    cfg.eval.alpha);
}

// Ordered zero-resource direction list (src != tgt, neither pivot).
inline std::vector<std::pair<std::string, std::string>> zero_directions(
    const ExperimentConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> dirs;
  auto langs = cfg.zero_langs();
  for (const auto& s : langs)
    for (const auto& t : langs)
      if (s != t) dirs.emplace_back(s, t);
  return dirs;
}

// The (beam, downsample) distillation variants the student roster consumes.
inline std::vector<std::pair<int, long long>> distill_variants(const ExperimentConfig& cfg) {
  std::set<std::pair<int, long long>> set;
  for (const auto& s : cfg.students)
    if (s.corpora != "supervised") set.insert({cfg.effective_beam(s), s.downsample_tm});
  return {set.begin(), set.end()};
}

inline nlohmann::json train_report_json(const trainer::TrainReport& r) {
  nlohmann::json j;
  j["steps"] = r.steps;
  j["examples"] = r.examples;
  j["target_tokens"] = r.target_tokens;
  j["first_loss"] = r.first_loss;
  j["final_loss"] = r.final_loss;
  j["final_original_loss"] = r.final_original_loss;
  j["final_synthetic_loss"] = r.final_synthetic_loss;
  j["checkpoints"] = r.checkpoints;
  j["averaged"] = r.averaged;
  return j;
}

}  // namespace detail

// ----- gen-data stage ---------------------------------------------------------------

inline bool stage_gen_data(const ExperimentConfig& cfg, uint64_t master, bool force) {
  RunPaths p = run_paths(cfg, master);
  const uint64_t stage_seed = derive_seed(master, "gen-data");
  return run_stage(p.root, p.data(), "gen-data", cfg.config_hash, master, {}, force, [&] {
    synthworld::WorldSpec ws = cfg.world;
    ws.seed = derive_seed(stage_seed, "world");
    auto world = synthworld::build_world(ws);
    synthworld::CorpusSpec cs = cfg.corpus;
    cs.seed = derive_seed(stage_seed, "corpus");
    auto corpora = synthworld::generate_corpora(world, cs);

    std::vector<std::filesystem::path> outs;
    auto vocab = synthworld::build_vocabulary(world);
    synthworld::write_vocabulary(p.vocab(), vocab);
    outs.push_back(p.vocab());

    auto langs = cfg.zero_langs();
    for (size_t n = 0; n < langs.size(); n++) {
      corpus::write_corpus(p.db(langs[n]), corpora.db[n]);
      outs.push_back(p.db(langs[n]));
    }
    corpus::write_mono(p.mono(), "pv", corpora.mono);
    outs.push_back(p.mono());
    for (const auto& [dir, examples] : corpora.tests) {
      corpus::write_corpus(p.test(dir.first, dir.second), examples);
      outs.push_back(p.test(dir.first, dir.second));
    }
    return outs;
  });
}

// ----- train stage -------------------------------------------------------------------

namespace detail {

inline std::vector<std::filesystem::path> train_outputs(const std::filesystem::path& dir,
                                                        const trainer::TrainReport& r) {
  std::vector<std::filesystem::path> outs;
  for (const auto& b : r.checkpoints) outs.push_back(dir / b);
  outs.push_back(dir / r.averaged);
  outs.push_back(dir / "train_loss.tsv");
  outs.push_back(dir / "train_report.json");
  return outs;
}

inline std::vector<corpus::WeightedExample> load_db_bidirectional(const ExperimentConfig& cfg,
                                                                  const RunPaths& p) {
  std::vector<corpus::WeightedExample> all;
  for (const auto& lang : cfg.zero_langs()) {
    auto pairs = corpus::read_corpus(p.db(lang));
    all.insert(all.end(), pairs.begin(), pairs.end());
  }
  return trainer::expand_bidirectional(all);
}

}  // namespace detail

// The teacher is the multilingual baseline: every language paired with the
// pivot, both directions, original data only.
inline bool stage_train_teacher(const ExperimentConfig& cfg, uint64_t master, bool force) {
  RunPaths p = run_paths(cfg, master);
  std::vector<std::filesystem::path> inputs = {p.vocab()};
  for (const auto& lang : cfg.zero_langs()) inputs.push_back(p.db(lang));

  return run_stage(p.root, p.teacher(), "train:teacher", cfg.config_hash, master, inputs, force, [&] {
    auto vocab = synthworld::read_vocabulary(p.vocab());
    auto data = detail::load_db_bidirectional(cfg, p);
    trainer::TrainConfig tc = cfg.teacher_train;
    tc.seed = derive_seed(master, "train:teacher");
    auto report = trainer::train(cfg.model, tc, vocab, data, p.teacher());
    write_file(p.teacher() / "train_report.json", detail::train_report_json(report).dump(2) + "\n");
    return detail::train_outputs(p.teacher(), report);
  });
}

inline bool stage_train_bilingual(const ExperimentConfig& cfg, uint64_t master,
                                  const std::string& lang, bool force) {
  RunPaths p = run_paths(cfg, master);
  auto langs = cfg.zero_langs();
  if (std::find(langs.begin(), langs.end(), lang) == langs.end())
    throw config_error("unknown bilingual language: " + lang);
  std::vector<std::filesystem::path> inputs = {p.vocab(), p.db(lang)};
  const std::string stage = "train:bilingual:" + lang;

  return run_stage(p.root, p.bilingual(lang), stage, cfg.config_hash, master, inputs, force, [&] {
    auto vocab = synthworld::read_vocabulary(p.vocab());
    auto data = trainer::expand_bidirectional(corpus::read_corpus(p.db(lang)));
    trainer::TrainConfig tc = cfg.teacher_train;
    tc.seed = derive_seed(master, stage);
    auto report = trainer::train(cfg.model, tc, vocab, data, p.bilingual(lang));
    write_file(p.bilingual(lang) / "train_report.json",
               detail::train_report_json(report).dump(2) + "\n");
    return detail::train_outputs(p.bilingual(lang), report);
  });
}

inline bool stage_train_student(const ExperimentConfig& cfg, uint64_t master,
                                const StudentSpec& spec, bool force) {
  RunPaths p = run_paths(cfg, master);
  const int beam = cfg.effective_beam(spec);
  const long long tm = spec.downsample_tm;

  std::vector<std::filesystem::path> inputs = {p.vocab()};
  if (spec.corpora != "zero")
    for (const auto& lang : cfg.zero_langs()) inputs.push_back(p.db(lang));
  if (spec.corpora != "supervised")
    for (const auto& kind : spec.teachers)
      for (const auto& [s, t] : detail::zero_directions(cfg)) {
        auto f = p.distilled_file(beam, tm, kind, s, t);
        inputs.push_back(f);
        inputs.push_back(f.string() + ".meta.json");
      }
  if (spec.bt)
    for (const auto& lang : cfg.zero_langs()) {
      inputs.push_back(p.bt_file(lang));
      inputs.push_back(p.bt_file(lang).string() + ".meta.json");
    }

  const std::string stage = "train:" + spec.name;
  const auto dir = p.student(spec.name);
  return run_stage(p.root, dir, stage, cfg.config_hash, master, inputs, force, [&] {
    auto vocab = synthworld::read_vocabulary(p.vocab());
    std::vector<corpus::WeightedExample> data;
    if (spec.corpora != "zero") data = detail::load_db_bidirectional(cfg, p);
    if (spec.corpora != "supervised")
      for (const auto& kind : spec.teachers)
        for (const auto& [s, t] : detail::zero_directions(cfg)) {
          auto dc = distiller::read_distilled(p.distilled_file(beam, tm, kind, s, t));
          data.insert(data.end(), dc.examples.begin(), dc.examples.end());
        }
    if (spec.bt)
      for (const auto& lang : cfg.zero_langs()) {
        auto dc = distiller::read_distilled(p.bt_file(lang));
        data.insert(data.end(), dc.examples.begin(), dc.examples.end());
      }
    trainer::TrainConfig tc = cfg.student_train;
    tc.seed = derive_seed(master, stage);
    auto report = trainer::train(cfg.model, tc, vocab, data, dir);
    write_file(dir / "train_report.json", detail::train_report_json(report).dump(2) + "\n");
    return detail::train_outputs(dir, report);
  });
}

// ----- distill stage ------------------------------------------------------------------

// One stage per (beam, downsample) variant and teacher kind, so long runs
// resume at the granularity of a single distilled corpus set.
inline bool stage_distill(const ExperimentConfig& cfg, uint64_t master, const std::string& kind,
                          int beam, long long tm, bool force) {
  if (kind != "src" && kind != "tgt" && kind != "pivot")
    throw config_error("distill kind must be src|tgt|pivot: " + kind);
  RunPaths p = run_paths(cfg, master);
  const std::string stage = "distill:" + RunPaths::distill_dirname(beam, tm) + ":" + kind;
  std::vector<std::filesystem::path> inputs = {p.vocab(), p.teacher() / "averaged.bin"};
  if (kind == "pivot")
    inputs.push_back(p.mono());
  else
    for (const auto& lang : cfg.zero_langs()) inputs.push_back(p.db(lang));

  return run_stage(p.root, p.distill(beam, tm, kind), stage, cfg.config_hash, master, inputs,
                   force, [&] {
    const uint64_t stage_seed = derive_seed(master, stage);
    auto vocab = synthworld::read_vocabulary(p.vocab());
    auto teacher = detail::load_translator(cfg, p.teacher() / "averaged.bin", vocab);
    const std::string ckpt_rel = detail::rel_to(p.root, p.teacher() / "averaged.bin");

    std::map<std::string, std::vector<corpus::WeightedExample>> db;
    if (kind != "pivot")
      for (const auto& lang : cfg.zero_langs()) db[lang] = corpus::read_corpus(p.db(lang));
    std::vector<std::vector<std::string>> mono;
    if (kind == "pivot") mono = corpus::read_mono(p.mono());

    distiller::TeacherConfig tcfg = cfg.distill;
    tcfg.beam = beam;

    std::vector<std::filesystem::path> outs;
    for (const auto& [s, t] : detail::zero_directions(cfg)) {
      distiller::DistilledCorpus dc;
      if (kind == "src")
        dc = distiller::distill_source(*teacher, db[t], s, tcfg);
      else if (kind == "tgt")
        dc = distiller::distill_target(*teacher, db[s], t, tcfg);
      else
        dc = distiller::distill_pivot(*teacher, mono, s, t, tcfg);
      // An all-skipped direction means the teacher never finishes its decodes;
      // training on the resulting empty corpus would silently turn every
      // distilled student into a plain multilingual baseline.
      if (dc.examples.empty())
        throw divergence_error("distill " + kind + " " + s + "->" + t + ": teacher produced no "
                               "finished candidates (skipped " +
                               std::to_string(dc.skipped_unfinished + dc.skipped_empty) +
                               "); it looks too undertrained to distill from");
      dc.teacher_ckpt = ckpt_rel;
      dc.seed = stage_seed;
      auto path = p.distilled_file(beam, tm, kind, s, t);
      if (tm > 0)
        dc = distiller::downsample(dc, tm, cfg.world.num_languages,
                                   derive_seed(stage_seed, "downsample:" + path.filename().string()));
      distiller::write_distilled(path, dc);
      outs.push_back(path);
      outs.push_back(path.string() + ".meta.json");
    }
    return outs;
  });
}

// Back-translation corpora: greedy pivot->language decodes paired as
// (synthetic language side, real pivot side), weight 1.
inline bool stage_bt(const ExperimentConfig& cfg, uint64_t master, bool force) {
  RunPaths p = run_paths(cfg, master);
  std::vector<std::filesystem::path> inputs = {p.vocab(), p.teacher() / "averaged.bin", p.mono()};

  return run_stage(p.root, p.bt(), "distill:bt", cfg.config_hash, master, inputs, force, [&] {
    auto vocab = synthworld::read_vocabulary(p.vocab());
    auto teacher = detail::load_translator(cfg, p.teacher() / "averaged.bin", vocab);
    auto mono = corpus::read_mono(p.mono());
    auto corpora = distiller::backtranslate(*teacher, mono, cfg.zero_langs());

    std::vector<std::filesystem::path> outs;
    auto langs = cfg.zero_langs();
    for (size_t i = 0; i < langs.size(); i++) {
      if (corpora[i].examples.empty())
        throw divergence_error("back-translation into " + langs[i] + ": teacher produced no "
                               "finished candidates; it looks too undertrained to distill from");
      corpora[i].teacher_ckpt = detail::rel_to(p.root, p.teacher() / "averaged.bin");
      corpora[i].seed = derive_seed(master, "distill:bt");
      distiller::write_distilled(p.bt_file(langs[i]), corpora[i]);
      outs.push_back(p.bt_file(langs[i]));
      outs.push_back(p.bt_file(langs[i]).string() + ".meta.json");
    }
    return outs;
  });
}

// ----- eval stage ----------------------------------------------------------------------

namespace detail {

inline bool teacher_based(const std::string& method) {
  return method == "multilingual" || method == "multilingual-pivot";
}

// Per-direction bilingual two-pass: src->pv with the source-language model,
// pv->tgt with the target-language model.
inline evalkit::EvalMatrix bilingual_pivot_matrix(
    const ExperimentConfig& cfg, const RunPaths& p, const synthworld::Vocabulary& vocab,
    const evalkit::TestSets& zero_tests, const synthworld::World& world, int threads) {
  std::map<std::string, std::unique_ptr<seq2seq::ModelTranslator>> models;
  for (const auto& lang : cfg.zero_langs())
    models[lang] = load_translator(cfg, p.bilingual(lang) / "averaged.bin", vocab);

  evalkit::EvalMatrix m;
  double zero_sum = 0, zero_off = 0;
  for (const auto& [dir, examples] : zero_tests) {
    evalkit::TestSets one;
    one[dir] = examples;
    auto cell = evalkit::evaluate_matrix_two_pass(*models[dir.first], *models[dir.second], one,
                                                  world, cfg.eval.beam, threads);
    m.cells[dir] = cell.cells.at(dir);
    zero_sum += cell.cells.at(dir).bleu.bleu;
    zero_off += cell.cells.at(dir).off_target;
    m.zero_count++;
  }
  if (m.zero_count) {
    m.avg_zero = zero_sum / m.zero_count;
    m.avg_zero_off_target = zero_off / m.zero_count;
  }
  return m;
}

}  // namespace detail

inline bool stage_eval(const ExperimentConfig& cfg, uint64_t master, int threads, bool force) {
  RunPaths p = run_paths(cfg, master);

  bool needs_teacher = cfg.eval.representation_count > 0;
  for (const auto& m : cfg.eval.methods) needs_teacher = needs_teacher || detail::teacher_based(m);

  std::vector<std::filesystem::path> inputs = {p.vocab()};
  for (const auto& f : detail::test_files(cfg, p, false)) inputs.push_back(f);
  if (needs_teacher) inputs.push_back(p.teacher() / "averaged.bin");
  for (const auto& m : cfg.eval.methods) {
    if (m == "bilingual-pivot")
      for (const auto& lang : cfg.zero_langs()) inputs.push_back(p.bilingual(lang) / "averaged.bin");
    else if (!detail::teacher_based(m))
      inputs.push_back(p.student(m) / "averaged.bin");
  }

  return run_stage(p.root, p.eval(), "eval", cfg.config_hash, master, inputs, force, [&] {
    auto vocab = synthworld::read_vocabulary(p.vocab());
    auto world = detail::load_world(cfg, master);
    auto tests = detail::load_tests(cfg, p);
    auto zero = detail::zero_subset(tests);

    std::unique_ptr<seq2seq::ModelTranslator> teacher;
    if (needs_teacher) teacher = detail::load_translator(cfg, p.teacher() / "averaged.bin", vocab);

    std::vector<std::filesystem::path> outs;
    for (const auto& method : cfg.eval.methods) {
      evalkit::EvalMatrix m;
      if (method == "multilingual") {
        m = evalkit::evaluate_matrix(*teacher, tests, world, cfg.eval.beam, threads);
      } else if (method == "multilingual-pivot") {
        m = evalkit::evaluate_matrix_two_pass(*teacher, *teacher, zero, world, cfg.eval.beam,
                                              threads);
      } else if (method == "bilingual-pivot") {
        m = detail::bilingual_pivot_matrix(cfg, p, vocab, zero, world, threads);
      } else {
        auto student = detail::load_translator(cfg, p.student(method) / "averaged.bin", vocab);
        m = evalkit::evaluate_matrix(*student, tests, world, cfg.eval.beam, threads);
      }
      evalkit::write_matrix(p.matrix(method), m);
      outs.push_back(p.matrix(method));
      auto grid = p.eval() / (method + ".grid.tsv");
      evalkit::write_matrix_grid(grid, m, cfg.all_langs());
      outs.push_back(grid);
    }

    if (cfg.eval.representation_count > 0) {
      // The same probe sentences rendered into every language, encoded with a
      // fixed <2pv> request so the only varying factor is the source text.
      auto first = cfg.zero_langs().front();
      const auto& probe_pairs = tests.at({"pv", first});
      int count = std::min<int>(cfg.eval.representation_count,
                                static_cast<int>(probe_pairs.size()));
      std::vector<evalkit::RepresentationRow> rows;
      for (int i = 0; i < count; i++) {
        auto concepts = synthworld::inverse_render(world, "pv", probe_pairs[i].src);
        if (!concepts)
          throw config_error("probe sentence does not invert under the configured world; "
                             "the data directory looks stale");
        for (const auto& lang : cfg.all_langs()) {
          std::vector<int> ids;
          ids.push_back(vocab.id(synthworld::Vocabulary::tag_for("pv")));
          for (const auto& tok : synthworld::render(world, lang, *concepts))
            ids.push_back(vocab.id(tok));
          ids.push_back(vocab.eos);
          rows.push_back({i, lang, seq2seq::export_representation(teacher->view(), ids)});
        }
      }
      evalkit::write_representations(p.eval() / "representations.tsv", rows);
      outs.push_back(p.eval() / "representations.tsv");
    }
    return outs;
  });
}

// ----- robustness stage ------------------------------------------------------------------

inline bool stage_robustness(const ExperimentConfig& cfg, uint64_t master, int threads,
                             bool force) {
  if (cfg.robustness.methods.empty())
    throw config_error("robustness: no methods configured (set robustness.methods)");
  RunPaths p = run_paths(cfg, master);

  bool needs_teacher = false;
  for (const auto& m : cfg.robustness.methods) needs_teacher |= detail::teacher_based(m);
  std::vector<std::filesystem::path> inputs = {p.vocab()};
  for (const auto& f : detail::test_files(cfg, p, true)) inputs.push_back(f);
  if (needs_teacher) inputs.push_back(p.teacher() / "averaged.bin");
  for (const auto& m : cfg.robustness.methods)
    if (!detail::teacher_based(m)) inputs.push_back(p.student(m) / "averaged.bin");

  return run_stage(p.root, p.robustness(), "robustness", cfg.config_hash, master, inputs, force, [&] {
    auto vocab = synthworld::read_vocabulary(p.vocab());
    auto world = detail::load_world(cfg, master);
    auto tests = detail::load_tests(cfg, p);
    auto zero = detail::zero_subset(tests);

    std::unique_ptr<seq2seq::ModelTranslator> teacher;
    if (needs_teacher) teacher = detail::load_translator(cfg, p.teacher() / "averaged.bin", vocab);
    std::map<std::string, std::unique_ptr<seq2seq::ModelTranslator>> students;
    std::vector<evalkit::RobustnessMethod> methods;
    for (const auto& name : cfg.robustness.methods) {
      evalkit::RobustnessMethod rm;
      rm.name = name;
      if (name == "multilingual") {
        rm.model = teacher.get();
      } else if (name == "multilingual-pivot") {
        rm.model = teacher.get();
        rm.second = teacher.get();
      } else {
        students[name] = detail::load_translator(cfg, p.student(name) / "averaged.bin", vocab);
        rm.model = students[name].get();
      }
      methods.push_back(rm);
    }

    std::vector<evalkit::Perturb> kinds;
    for (const auto& k : cfg.robustness.kinds) kinds.push_back(evalkit::perturb_from_string(k));

    auto report = evalkit::robustness_sweep(methods, zero, kinds, cfg.robustness.probabilities,
                                            derive_seed(master, "robustness"),
                                            vocab.surface_tokens(), cfg.eval.beam, threads);
    evalkit::write_robustness(p.robustness() / "robustness.tsv", report);

    nlohmann::json j;
    j["seed"] = master;
    j["beam"] = cfg.eval.beam;
    nlohmann::json cells = nlohmann::json::array();
    for (const auto& c : report.cells) {
      cells.push_back({{"method", c.method},
                       {"kind", c.kind},
                       {"p", c.p},
                       {"bleu", c.bleu},
                       {"failures", c.failures}});
    }
    j["cells"] = cells;
    write_file(p.robustness() / "robustness.json", j.dump(2) + "\n");
    return std::vector<std::filesystem::path>{p.robustness() / "robustness.tsv",
                                              p.robustness() / "robustness.json"};
  });
}

// ----- report stage -----------------------------------------------------------------------

namespace detail {

struct MethodAgg {
  double avg_zero = 0;
  double avg_supervised = 0;
  double off_target_zero = 0;
  std::map<uint64_t, evalkit::EvalMatrix> per_seed;
};

// Reference downsampling threshold for the comparison tables: the smallest
// t_m carried by a full-teacher student at the default beam. Configs that
// downsample the whole roster keep their ablation and beam-sweep tables
// populated instead of matching nothing.
inline long long reference_tm(const ExperimentConfig& cfg) {
  long long ref = 0;
  bool found = false;
  for (const auto& s : cfg.students) {
    if (s.corpora != "both" || s.bt) continue;
    if (cfg.effective_beam(s) != cfg.distill.beam) continue;
    std::set<std::string> have(s.teachers.begin(), s.teachers.end());
    if (have != std::set<std::string>{"src", "tgt", "pivot"}) continue;
    if (!found || s.downsample_tm < ref) {
      ref = s.downsample_tm;
      found = true;
    }
  }
  return ref;
}

inline const StudentSpec* find_by_teachers(const ExperimentConfig& cfg, long long ref_tm,
                                           const std::set<std::string>& teachers) {
  for (const auto& s : cfg.students) {
    if (s.corpora != "both" || s.bt || s.downsample_tm != ref_tm) continue;
    if (cfg.effective_beam(s) != cfg.distill.beam) continue;
    std::set<std::string> have(s.teachers.begin(), s.teachers.end());
    if (have == teachers) return &s;
  }
  return nullptr;
}

}  // namespace detail

inline bool stage_report(const ExperimentConfig& cfg, bool force) {
  const std::filesystem::path dir = cfg.out_root / "report";
  const bool with_robustness = !cfg.robustness.methods.empty();

  std::vector<std::filesystem::path> inputs;
  for (uint64_t seed : cfg.seeds) {
    RunPaths p = run_paths(cfg, seed);
    for (const auto& m : cfg.eval.methods) inputs.push_back(p.matrix(m));
    if (with_robustness) inputs.push_back(p.robustness() / "robustness.tsv");
  }

  return run_stage(cfg.out_root, dir, "report", cfg.config_hash, 0, inputs, force, [&] {
    const double n_seeds = static_cast<double>(cfg.seeds.size());

    std::map<std::string, detail::MethodAgg> agg;
    for (const auto& method : cfg.eval.methods) {
      detail::MethodAgg a;
      for (uint64_t seed : cfg.seeds) {
        auto m = evalkit::read_matrix(run_paths(cfg, seed).matrix(method));
        a.avg_zero += m.avg_zero / n_seeds;
        a.avg_supervised += m.avg_supervised / n_seeds;
        a.off_target_zero += m.avg_zero_off_target / n_seeds;
        a.per_seed[seed] = std::move(m);
      }
      agg[method] = std::move(a);
    }

    nlohmann::json summary;
    summary["version"] = kVersion;
    summary["config_hash"] = cfg.config_hash;
    summary["seeds"] = cfg.seeds;

    // method summary table
    std::string tsv = "method\tavg_zero\tavg_supervised\toff_target_zero";
    for (uint64_t seed : cfg.seeds) tsv += "\tzero_seed_" + std::to_string(seed);
    tsv += '\n';
    nlohmann::json jmethods;
    for (const auto& method : cfg.eval.methods) {
      const auto& a = agg.at(method);
      tsv += method + '\t' + format_double(a.avg_zero) + '\t' + format_double(a.avg_supervised) +
             '\t' + format_double(a.off_target_zero);
      nlohmann::json per_seed;
      for (uint64_t seed : cfg.seeds) {
        const auto& m = a.per_seed.at(seed);
        tsv += '\t' + format_double(m.avg_zero);
        std::string ckpt = detail::teacher_based(method)
                               ? "seed_" + std::to_string(seed) + "/teacher/averaged.bin"
                               : (method == "bilingual-pivot"
                                      ? "seed_" + std::to_string(seed) + "/bilingual"
                                      : "seed_" + std::to_string(seed) + "/students/" + method +
                                            "/averaged.bin");
        per_seed[std::to_string(seed)] = {{"avg_zero", m.avg_zero},
                                          {"avg_supervised", m.avg_supervised},
                                          {"off_target_zero", m.avg_zero_off_target},
                                          {"matrix", "seed_" + std::to_string(seed) + "/eval/" +
                                                         method + ".matrix.tsv"},
                                          {"checkpoint", ckpt}};
      }
      tsv += '\n';
      jmethods[method] = {{"avg_zero", a.avg_zero},
                          {"avg_supervised", a.avg_supervised},
                          {"off_target_zero", a.off_target_zero},
                          {"per_seed", per_seed}};
    }
    write_file(dir / "summary.tsv", tsv);
    summary["methods"] = jmethods;

    // teacher-subset ablation, canonical subset order
    const long long ref_tm = detail::reference_tm(cfg);
    const std::vector<std::pair<std::string, std::set<std::string>>> subsets = {
        {"S", {"src"}},
        {"T", {"tgt"}},
        {"P", {"pivot"}},
        {"S+T", {"src", "tgt"}},
        {"S+P", {"src", "pivot"}},
        {"T+P", {"tgt", "pivot"}},
        {"S+T+P", {"src", "tgt", "pivot"}}};
    std::string ab = "teachers\tstudent\tavg_zero\n";
    nlohmann::json jab;
    for (const auto& [label, subset] : subsets) {
      const StudentSpec* s = detail::find_by_teachers(cfg, ref_tm, subset);
      if (!s) continue;
      ab += label + '\t' + s->name + '\t' + format_double(agg.at(s->name).avg_zero) + '\n';
      jab[label] = {{"student", s->name}, {"avg_zero", agg.at(s->name).avg_zero}};
    }
    write_file(dir / "ablation.tsv", ab);
    summary["ablation"] = jab;

    // distillation beam sweep over the full-teacher students
    std::map<int, const StudentSpec*> by_beam;
    for (const auto& s : cfg.students) {
      if (s.corpora != "both" || s.bt || s.downsample_tm != ref_tm) continue;
      std::set<std::string> have(s.teachers.begin(), s.teachers.end());
      if (have != std::set<std::string>{"src", "tgt", "pivot"}) continue;
      by_beam.emplace(cfg.effective_beam(s), &s);
    }
    std::string bs = "beam\tstudent\tavg_zero\n";
    nlohmann::json jbeam = nlohmann::json::array();
    for (const auto& [beam, s] : by_beam) {
      bs += std::to_string(beam) + '\t' + s->name + '\t' +
            format_double(agg.at(s->name).avg_zero) + '\n';
      jbeam.push_back({{"beam", beam}, {"student", s->name}, {"avg_zero", agg.at(s->name).avg_zero}});
    }
    write_file(dir / "beam_sweep.tsv", bs);
    summary["beam_sweep"] = jbeam;

    // joint-training comparison: original-only vs distilled-only vs both
    std::string jt = "setting\tsource\tavg_zero\n";
    nlohmann::json jjoint;
    auto add_joint = [&](const std::string& setting, const std::string& source) {
      jt += setting + '\t' + source + '\t' + format_double(agg.at(source).avg_zero) + '\n';
      jjoint[setting] = {{"source", source}, {"avg_zero", agg.at(source).avg_zero}};
    };
    const StudentSpec* sup_only = nullptr;
    const StudentSpec* zero_only = nullptr;
    for (const auto& s : cfg.students) {
      if (!sup_only && s.corpora == "supervised") sup_only = &s;
      if (!zero_only && s.corpora == "zero") zero_only = &s;
    }
    if (sup_only) add_joint("supervised_only", sup_only->name);
    else if (agg.count("multilingual")) add_joint("supervised_only", "multilingual");
    if (zero_only) add_joint("zero_only", zero_only->name);
    if (const StudentSpec* both = detail::find_by_teachers(cfg, ref_tm, {"src", "tgt", "pivot"}))
      add_joint("both", both->name);
    write_file(dir / "joint.tsv", jt);
    summary["joint"] = jjoint;

    // downsample sweep over full-teacher students (t_m = 0 means keep all)
    std::map<long long, const StudentSpec*> by_tm;
    for (const auto& s : cfg.students) {
      if (s.corpora != "both" || s.bt) continue;
      if (cfg.effective_beam(s) != cfg.distill.beam) continue;
      std::set<std::string> have(s.teachers.begin(), s.teachers.end());
      if (have != std::set<std::string>{"src", "tgt", "pivot"}) continue;
      by_tm.emplace(s.downsample_tm, &s);
    }
    std::string ds = "t_m\tstudent\tavg_zero\n";
    nlohmann::json jds = nlohmann::json::array();
    for (const auto& [tm, s] : by_tm) {
      ds += std::to_string(tm) + '\t' + s->name + '\t' +
            format_double(agg.at(s->name).avg_zero) + '\n';
      jds.push_back({{"t_m", tm}, {"student", s->name}, {"avg_zero", agg.at(s->name).avg_zero}});
    }
    write_file(dir / "downsample.tsv", ds);
    summary["downsample"] = jds;

    std::vector<std::filesystem::path> outs = {dir / "summary.tsv", dir / "ablation.tsv",
                                               dir / "beam_sweep.tsv", dir / "joint.tsv",
                                               dir / "downsample.tsv"};

    if (with_robustness) {
      // mean over seeds per (method, kind, p), preserving first-seed cell order
      std::vector<evalkit::RobustnessCell> order;
      std::map<std::tuple<std::string, std::string, double>, double> sums;
      for (uint64_t seed : cfg.seeds) {
        auto r = evalkit::read_robustness(run_paths(cfg, seed).robustness() / "robustness.tsv");
        for (const auto& c : r.cells) {
          auto key = std::make_tuple(c.method, c.kind, c.p);
          if (!sums.count(key)) order.push_back(c);
          sums[key] += c.bleu / n_seeds;
        }
      }
      std::string rb = "method\tkind\tp\tbleu\n";
      nlohmann::json jrob = nlohmann::json::array();
      for (const auto& c : order) {
        double mean = sums.at(std::make_tuple(c.method, c.kind, c.p));
        rb += c.method + '\t' + c.kind + '\t' + format_double(c.p) + '\t' + format_double(mean) +
              '\n';
        jrob.push_back({{"method", c.method}, {"kind", c.kind}, {"p", c.p}, {"bleu", mean}});
      }
      write_file(dir / "robustness_agg.tsv", rb);
      summary["robustness"] = jrob;
      outs.push_back(dir / "robustness_agg.tsv");
    }

    write_file(dir / "summary.json", summary.dump(2) + "\n");
    outs.push_back(dir / "summary.json");
    return outs;
  });
}

// ----- command wrappers ---------------------------------------------------------------------

// (label, ran) pairs for CLI progress output; ran=false means the manifest was
// already up to date.
using StageLog = std::vector<std::pair<std::string, bool>>;

namespace detail {

inline std::vector<uint64_t> pick_seeds(const ExperimentConfig& cfg,
                                        std::optional<uint64_t> only) {
  if (!only) return cfg.seeds;
  for (uint64_t s : cfg.seeds)
    if (s == *only) return {*only};
  throw config_error("--seed " + std::to_string(*only) + " is not in the config seed list");
}

inline std::string seed_label(const std::string& stage, uint64_t seed) {
  return stage + " seed_" + std::to_string(seed);
}

}  // namespace detail

inline StageLog cmd_gen_data(const ExperimentConfig& cfg, std::optional<uint64_t> seed, bool force) {
  StageLog log;
  for (uint64_t m : detail::pick_seeds(cfg, seed))
    log.emplace_back(detail::seed_label("gen-data", m), stage_gen_data(cfg, m, force));
  return log;
}

// role: "" = teacher, bilinguals (if enabled), then every student in roster
// order. Named roles address a single run; "student" plus the override flags
// defines an ad-hoc spec outside the roster.
inline StageLog cmd_train(const ExperimentConfig& cfg, std::optional<uint64_t> seed,
                          const std::string& role, const std::string& corpora_override,
                          const std::string& teachers_override, int beam_override, bool force) {
  StageLog log;
  for (uint64_t m : detail::pick_seeds(cfg, seed)) {
    if (role.empty()) {
      log.emplace_back(detail::seed_label("train:teacher", m), stage_train_teacher(cfg, m, force));
      if (cfg.bilinguals)
        for (const auto& lang : cfg.zero_langs())
          log.emplace_back(detail::seed_label("train:bilingual:" + lang, m),
                           stage_train_bilingual(cfg, m, lang, force));
      for (const auto& s : cfg.students)
        log.emplace_back(detail::seed_label("train:" + s.name, m),
                         stage_train_student(cfg, m, s, force));
      continue;
    }
    if (role == "teacher" || role == "multilingual") {
      log.emplace_back(detail::seed_label("train:teacher", m), stage_train_teacher(cfg, m, force));
    } else if (role.rfind("bilingual:", 0) == 0) {
      auto lang = role.substr(10);
      log.emplace_back(detail::seed_label("train:" + role, m),
                       stage_train_bilingual(cfg, m, lang, force));
    } else if (const StudentSpec* s = cfg.find_student(role)) {
      StudentSpec spec = *s;
      if (!corpora_override.empty()) spec.corpora = corpora_override;
      if (!teachers_override.empty()) spec.teachers = split_char(teachers_override, ',');
      if (beam_override > 0) spec.distill_beam = beam_override;
      spec.validate();
      log.emplace_back(detail::seed_label("train:" + spec.name, m),
                       stage_train_student(cfg, m, spec, force));
    } else if (role == "student") {
      StudentSpec spec;  // ad-hoc run outside the roster
      spec.name = "student";
      if (!corpora_override.empty()) spec.corpora = corpora_override;
      if (spec.corpora == "supervised") spec.teachers.clear();
      if (!teachers_override.empty()) spec.teachers = split_char(teachers_override, ',');
      if (beam_override > 0) spec.distill_beam = beam_override;
      spec.validate();
      log.emplace_back(detail::seed_label("train:student", m),
                       stage_train_student(cfg, m, spec, force));
    } else {
      throw config_error("unknown train role: " + role);
    }
  }
  return log;
}

// mode "" runs every teacher kind for every (beam, downsample) variant the
// roster needs, plus back-translation when a student asks for it. A single
// mode (src|tgt|pivot|bt) narrows to that corpus family; beam/tm pin a
// one-off variant.
inline StageLog cmd_distill(const ExperimentConfig& cfg, std::optional<uint64_t> seed,
                            const std::string& mode, int beam_override, long long tm_override,
                            bool force) {
  if (!mode.empty() && mode != "src" && mode != "tgt" && mode != "pivot" && mode != "bt")
    throw config_error("distill mode must be src|tgt|pivot|bt");
  std::vector<std::string> kinds;
  if (mode.empty())
    kinds = {"src", "tgt", "pivot"};
  else if (mode != "bt")
    kinds = {mode};

  StageLog log;
  for (uint64_t m : detail::pick_seeds(cfg, seed)) {
    if (!kinds.empty()) {
      auto variants = detail::distill_variants(cfg);
      if (beam_override > 0 || tm_override > 0) {
        int b = beam_override > 0 ? beam_override : cfg.distill.beam;
        variants = {{b, tm_override}};
      }
      for (const auto& [beam, tm] : variants)
        for (const auto& kind : kinds)
          log.emplace_back(
              detail::seed_label(
                  "distill:" + RunPaths::distill_dirname(beam, tm) + ":" + kind, m),
              stage_distill(cfg, m, kind, beam, tm, force));
    }
    bool wants_bt = mode == "bt";
    if (mode.empty())
      for (const auto& s : cfg.students) wants_bt = wants_bt || s.bt;
    if (wants_bt)
      log.emplace_back(detail::seed_label("distill:bt", m), stage_bt(cfg, m, force));
  }
  return log;
}

inline StageLog cmd_eval(const ExperimentConfig& cfg, std::optional<uint64_t> seed, int threads,
                         bool force) {
  StageLog log;
  for (uint64_t m : detail::pick_seeds(cfg, seed))
    log.emplace_back(detail::seed_label("eval", m), stage_eval(cfg, m, threads, force));
  return log;
}

inline StageLog cmd_robustness(const ExperimentConfig& cfg, std::optional<uint64_t> seed,
                               int threads, bool force) {
  StageLog log;
  for (uint64_t m : detail::pick_seeds(cfg, seed))
    log.emplace_back(detail::seed_label("robustness", m), stage_robustness(cfg, m, threads, force));
  return log;
}

inline StageLog cmd_report(const ExperimentConfig& cfg, bool force) {
  StageLog log;
  log.emplace_back("report", stage_report(cfg, force));
  return log;
}

}  // namespace umlab::experiment
