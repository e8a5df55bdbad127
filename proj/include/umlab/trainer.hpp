#pragma once
// Training loop: inverse-sqrt LR schedule with linear warmup, token-budget
// batching with length bucketing, a single weighted token-mean loss over a
// mixed stream of original and synthetic examples, periodic checkpoints and
// last-k checkpoint averaging.

#include <charconv>
#include <filesystem>

#include "umlab/corpus.hpp"
#include "umlab/optim.hpp"
#include "umlab/seq2seq.hpp"
#include "umlab/synthworld.hpp"

namespace umlab::trainer {

using corpus::WeightedExample;
using synthworld::Vocabulary;

struct TrainConfig {
  int total_steps = 3000;
  double peak_lr = 3e-4;
  int warmup_steps = 400;
  int batch_tokens = 1024;
  int checkpoint_every = 200;
  int keep_last = 5;
  double label_smoothing = 0.0;
  double clip_norm = 1.0;
  uint64_t seed = 1;

  void validate() const {
    if (total_steps < 1) throw config_error("train: total_steps must be >= 1");
    if (!(peak_lr > 0)) throw config_error("train: peak_lr must be positive");
    if (warmup_steps < 1) throw config_error("train: warmup_steps must be >= 1");
    if (batch_tokens < 8) throw config_error("train: batch_tokens too small");
    if (checkpoint_every < 1) throw config_error("train: checkpoint_every must be >= 1");
    if (keep_last < 1) throw config_error("train: keep_last must be >= 1");
    if (!(label_smoothing >= 0 && label_smoothing < 1))
      throw config_error("train: label_smoothing must be in [0,1)");
    if (!(clip_norm > 0)) throw config_error("train: clip_norm must be positive");
  }
};

// Linear warmup to peak_lr, then peak_lr * sqrt(warmup/step). 1-based steps.
inline double lr_at(const TrainConfig& c, int step) {
  if (step < 1) throw config_error("lr_at: steps are 1-based");
  if (step <= c.warmup_steps)
    return c.peak_lr * static_cast<double>(step) / c.warmup_steps;
  return c.peak_lr * std::sqrt(static_cast<double>(c.warmup_steps) / step);
}

// Each parallel pair trains both directions.
inline std::vector<WeightedExample> expand_bidirectional(
    const std::vector<WeightedExample>& pairs) {
  std::vector<WeightedExample> out;
  out.reserve(pairs.size() * 2);
  for (auto& ex : pairs) {
    out.push_back(ex);
    WeightedExample rev = ex;
    std::swap(rev.src_lang, rev.tgt_lang);
    std::swap(rev.src, rev.tgt);
    out.push_back(rev);
  }
  return out;
}

// Tokenized training row. src is the full encoder row ([tag] tokens <eos>);
// tgt holds the raw target ids (bos/eos are added at batch assembly).
struct TrainExample {
  std::vector<int> src;
  std::vector<int> tgt;
  double weight = 1.0;
  bool distilled = false;

  int src_rows() const { return static_cast<int>(src.size()); }
  int tgt_rows() const { return static_cast<int>(tgt.size()) + 1; }  // +<eos>
  int cost() const { return std::max(src_rows(), tgt_rows()); }
};

inline std::vector<TrainExample> prepare(const Vocabulary& vocab, const seq2seq::ModelConfig& mc,
                                         const std::vector<WeightedExample>& data) {
  std::vector<TrainExample> out;
  out.reserve(data.size());
  for (auto& ex : data) {
    if (ex.src.empty() || ex.tgt.empty())
      throw config_error("prepare: empty side in training example");
    TrainExample t;
    t.src.push_back(vocab.id(Vocabulary::tag_for(ex.tgt_lang)));
    for (auto& tok : ex.src) t.src.push_back(vocab.id(tok));
    t.src.push_back(vocab.eos);
    t.tgt = vocab.encode(ex.tgt);
    t.weight = ex.weight;
    t.distilled = ex.provenance != "original";
    if (t.src_rows() > mc.max_len || t.tgt_rows() > mc.max_len)
      throw config_error("prepare: example longer than model max_len " +
                         std::to_string(mc.max_len));
    out.push_back(std::move(t));
  }
  return out;
}

// Batching: shuffle, carve into chunks of roughly 16 batches worth of tokens,
// sort each chunk by length, then greedily fill batches up to the token
// budget (cost = members * max row length). Batch order is reshuffled so
// consecutive steps see mixed lengths.
inline std::vector<std::vector<int>> plan_batches(const std::vector<TrainExample>& ex,
                                                  int batch_tokens, uint64_t epoch_seed) {
  if (ex.empty()) throw config_error("plan_batches: no examples");
  std::vector<int> order(ex.size());
  for (size_t i = 0; i < order.size(); i++) order[i] = static_cast<int>(i);
  Rng rng(derive_seed(epoch_seed, "order"));
  rng.shuffle(order);

  std::vector<std::vector<int>> batches;
  const int64_t chunk_budget = 16ll * batch_tokens;
  size_t pos = 0;
  while (pos < order.size()) {
    int64_t chunk_cost = 0;
    size_t end = pos;
    while (end < order.size() && chunk_cost < chunk_budget) {
      chunk_cost += ex[static_cast<size_t>(order[end])].cost();
      end++;
    }
    std::vector<int> chunk(order.begin() + static_cast<ptrdiff_t>(pos),
                           order.begin() + static_cast<ptrdiff_t>(end));
    std::stable_sort(chunk.begin(), chunk.end(), [&](int a, int b) {
      const auto &ea = ex[static_cast<size_t>(a)], &eb = ex[static_cast<size_t>(b)];
      if (ea.tgt_rows() != eb.tgt_rows()) return ea.tgt_rows() < eb.tgt_rows();
      return ea.src_rows() < eb.src_rows();
    });
    std::vector<int> cur;
    int max_cost = 0;
    for (int idx : chunk) {
      const int c = ex[static_cast<size_t>(idx)].cost();
      const int grown = std::max(max_cost, c);
      if (!cur.empty() &&
          static_cast<int64_t>(cur.size() + 1) * grown > static_cast<int64_t>(batch_tokens)) {
        batches.push_back(std::move(cur));
        cur.clear();
        max_cost = 0;
      }
      cur.push_back(idx);
      max_cost = std::max(max_cost, c);
    }
    if (!cur.empty()) batches.push_back(std::move(cur));
    pos = end;
  }
  Rng brng(derive_seed(epoch_seed, "batch_order"));
  brng.shuffle(batches);
  return batches;
}

inline seq2seq::Batch assemble(const std::vector<TrainExample>& ex,
                               const std::vector<int>& members, const Vocabulary& vocab) {
  seq2seq::Batch b;
  b.B = static_cast<int>(members.size());
  for (int idx : members) {
    b.Ts = std::max(b.Ts, ex[static_cast<size_t>(idx)].src_rows());
    b.Tt = std::max(b.Tt, ex[static_cast<size_t>(idx)].tgt_rows());
  }
  b.src.assign(static_cast<size_t>(b.B) * b.Ts, vocab.pad);
  b.tgt_in.assign(static_cast<size_t>(b.B) * b.Tt, vocab.pad);
  b.tgt_out.assign(static_cast<size_t>(b.B) * b.Tt, vocab.pad);
  b.pos_weight.assign(static_cast<size_t>(b.B) * b.Tt, 0.0);
  for (int r = 0; r < b.B; r++) {
    const auto& e = ex[static_cast<size_t>(members[static_cast<size_t>(r)])];
    b.src_len.push_back(e.src_rows());
    b.tgt_len.push_back(e.tgt_rows());
    b.distilled.push_back(e.distilled ? 1 : 0);
    for (size_t i = 0; i < e.src.size(); i++)
      b.src[static_cast<size_t>(r) * b.Ts + i] = e.src[i];
    b.tgt_in[static_cast<size_t>(r) * b.Tt] = vocab.bos;
    for (size_t i = 0; i < e.tgt.size(); i++) {
      b.tgt_in[static_cast<size_t>(r) * b.Tt + i + 1] = e.tgt[i];
      b.tgt_out[static_cast<size_t>(r) * b.Tt + i] = e.tgt[i];
    }
    b.tgt_out[static_cast<size_t>(r) * b.Tt + e.tgt.size()] = vocab.eos;
    for (int i = 0; i < e.tgt_rows(); i++)
      b.pos_weight[static_cast<size_t>(r) * b.Tt + static_cast<size_t>(i)] = e.weight;
  }
  return b;
}

// Weighted mean: sum(w_i * loss_i) / sum(w_i), both in double. The loss the
// optimizer sees is this exact quantity computed on-tape.
inline double weighted_mean_loss(const std::vector<double>& losses,
                                 const std::vector<double>& weights) {
  if (losses.size() != weights.size())
    throw config_error("weighted_mean_loss: size mismatch");
  double num = 0, den = 0;
  for (size_t i = 0; i < losses.size(); i++) {
    num += weights[i] * losses[i];
    den += weights[i];
  }
  if (den <= 0) throw config_error("weighted_mean_loss: nonpositive total weight");
  return num / den;
}

struct TrainReport {
  int steps = 0;
  int examples = 0;
  int64_t target_tokens = 0;  // real (non-pad) target positions consumed
  double first_loss = 0;
  double final_loss = 0;
  // per-token means on the final step's batch, split by example origin
  double final_original_loss = 0;
  double final_synthetic_loss = 0;
  std::vector<std::string> checkpoints;  // basenames, oldest first
  std::string averaged;
};

// Runs the full schedule and returns the report. Writes ckpt_XXXXXX.bin,
// averaged.bin and train_loss.tsv under out_dir.
inline TrainReport train(const seq2seq::ModelConfig& mc, const TrainConfig& tc,
                         const Vocabulary& vocab, const std::vector<WeightedExample>& data,
                         const std::filesystem::path& out_dir) {
  mc.validate();
  tc.validate();
  auto examples = prepare(vocab, mc, data);
  if (examples.empty()) throw config_error("train: empty training set");

  auto ps = seq2seq::init_params<float>(mc, vocab.size(), derive_seed(tc.seed, "init"));
  numcore::AdamState<float> st;
  st.init(ps);

  TrainReport rep;
  rep.examples = static_cast<int>(examples.size());
  std::string loss_tsv;
  std::vector<std::filesystem::path> kept;

  int step = 0;
  uint64_t epoch = 0;
  while (step < tc.total_steps) {
    auto batches = plan_batches(examples, tc.batch_tokens, derive_seed(tc.seed, "epoch", epoch));
    epoch++;
    for (auto& members : batches) {
      if (step >= tc.total_steps) break;
      step++;
      auto batch = assemble(examples, members, vocab);
      Rng drop_rng(derive_seed(tc.seed, "step", static_cast<uint64_t>(step)));

      double loss_val = 0, lo = 0, lo_n = 0, ls = 0, ls_n = 0;
      try {
        numcore::Tape<float> tp;
        auto logits = seq2seq::forward_teacher_forced(tp, ps, mc, batch,
                                                      mc.dropout > 0 ? &drop_rng : nullptr);
        auto ce = numcore::cross_entropy_nll(tp, logits, batch.tgt_out,
                                             static_cast<float>(tc.label_smoothing));
        std::vector<float> w(batch.pos_weight.size());
        double total_w = 0;
        for (size_t i = 0; i < w.size(); i++) {
          w[i] = static_cast<float>(batch.pos_weight[i]);
          total_w += batch.pos_weight[i];
        }
        const int P = static_cast<int>(w.size());
        auto weighted = numcore::mul(tp, ce, numcore::Tensor<float>::from({P}, std::move(w)));
        auto loss =
            numcore::scale(tp, numcore::sum(tp, weighted), static_cast<float>(1.0 / total_w));
        loss_val = static_cast<double>(loss.data()[0]);

        // origin split for diagnostics (values only, no tape work)
        for (int r = 0; r < batch.B; r++)
          for (int t = 0; t < batch.tgt_len[static_cast<size_t>(r)]; t++) {
            const double c =
                static_cast<double>(ce.data()[static_cast<size_t>(r) * batch.Tt + t]);
            if (batch.distilled[static_cast<size_t>(r)]) {
              ls += c;
              ls_n++;
            } else {
              lo += c;
              lo_n++;
            }
            rep.target_tokens++;
          }

        if (!std::isfinite(loss_val) || loss_val > 1e4)
          throw divergence_error("loss " + std::to_string(loss_val) + " at step " +
                                 std::to_string(step));
        tp.backward(loss, ps);
      } catch (const numcore::numeric_error& e) {
        throw divergence_error("non-finite values at step " + std::to_string(step) + ": " +
                               e.what());
      }
      numcore::clip_global_norm(ps, tc.clip_norm);
      numcore::adam_step(ps, st, lr_at(tc, step));

      if (step == 1) rep.first_loss = loss_val;
      rep.final_loss = loss_val;
      rep.final_original_loss = lo_n > 0 ? lo / lo_n : 0.0;
      rep.final_synthetic_loss = ls_n > 0 ? ls / ls_n : 0.0;
      loss_tsv += std::to_string(step);
      loss_tsv += '\t';
      {
        char buf[40];
        auto [p, ec] = std::to_chars(buf, buf + sizeof buf, loss_val);
        if (ec != std::errc()) throw std::runtime_error("loss format failure");
        loss_tsv.append(buf, p);
      }
      loss_tsv += '\n';

      if (step % tc.checkpoint_every == 0 || step == tc.total_steps) {
        char name[32];
        std::snprintf(name, sizeof name, "ckpt_%06d.bin", step);
        auto path = out_dir / name;
        seq2seq::save_checkpoint(path, ps);
        kept.push_back(path);
        if (static_cast<int>(kept.size()) > tc.keep_last) {
          std::filesystem::remove(kept.front());
          kept.erase(kept.begin());
        }
      }
    }
  }
  rep.steps = step;

  std::vector<numcore::ParameterStore<float>> stores;
  for (auto& p : kept) {
    stores.push_back(seq2seq::load_checkpoint<float>(p));
    rep.checkpoints.push_back(p.filename().string());
  }
  auto avg = seq2seq::average_checkpoints(stores);
  seq2seq::save_checkpoint(out_dir / "averaged.bin", avg);
  rep.averaged = "averaged.bin";
  write_file(out_dir / "train_loss.tsv", loss_tsv);
  return rep;
}

}  // namespace umlab::trainer
