#pragma once
// Unified multilingual encoder-decoder transformer.
//
// Two execution paths share one parameter schema:
//  - a tape path (forward_teacher_forced) for training and gradient checks,
//  - a tape-free incremental path with per-beam KV caches for decoding; beam
//    search, scoring and representation export run on it.
//
// Layout decisions: pre-norm residual blocks, sinusoidal positions added to
// sqrt(d_model)-scaled embeddings, target-language tag prepended to the source
// sequence only, logits tied to the embedding unless configured otherwise.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

#include "umlab/corpus.hpp"
#include "umlab/synthworld.hpp"
#include "umlab/tensor.hpp"

namespace umlab::seq2seq {

using numcore::ParameterStore;
using numcore::Shape;
using numcore::Tape;
using numcore::Tensor;
using synthworld::Vocabulary;

struct ModelConfig {
  int d_model = 64;
  int enc_layers = 2;
  int dec_layers = 2;
  int heads = 4;
  int d_ff = 256;
  int max_len = 40;
  double dropout = 0.1;
  bool tied_embeddings = true;

  void validate() const {
    if (d_model < 2 || heads < 1 || d_model % heads != 0)
      throw config_error("model: d_model must be a positive multiple of heads");
    if (enc_layers < 1 || dec_layers < 1) throw config_error("model: need at least one layer");
    if (d_ff < 1) throw config_error("model: d_ff must be positive");
    if (max_len < 4) throw config_error("model: max_len too small");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw config_error("model: dropout must be in [0,1)");
  }
};

// ----- parameter schema ---------------------------------------------------------

namespace detail {

inline void attn_names(std::vector<std::pair<std::string, Shape>>& out, const std::string& p,
                       int D) {
  for (const char* w : {"wq", "wk", "wv", "wo"}) out.emplace_back(p + "." + w, Shape{D, D});
  for (const char* b : {"bq", "bk", "bv", "bo"}) out.emplace_back(p + "." + b, Shape{D});
}

inline void ln_names(std::vector<std::pair<std::string, Shape>>& out, const std::string& p,
                     int D) {
  out.emplace_back(p + ".g", Shape{D});
  out.emplace_back(p + ".b", Shape{D});
}

inline void ffn_names(std::vector<std::pair<std::string, Shape>>& out, const std::string& p,
                      int D, int F) {
  out.emplace_back(p + ".w1", Shape{D, F});
  out.emplace_back(p + ".b1", Shape{F});
  out.emplace_back(p + ".w2", Shape{F, D});
  out.emplace_back(p + ".b2", Shape{D});
}

}  // namespace detail

inline std::vector<std::pair<std::string, Shape>> param_schema(const ModelConfig& cfg,
                                                               int vocab_size) {
  cfg.validate();
  const int D = cfg.d_model, F = cfg.d_ff;
  std::vector<std::pair<std::string, Shape>> s;
  s.emplace_back("embed", Shape{vocab_size, D});
  if (!cfg.tied_embeddings) s.emplace_back("out_embed", Shape{vocab_size, D});
  for (int i = 0; i < cfg.enc_layers; i++) {
    const std::string p = "enc" + std::to_string(i);
    detail::ln_names(s, p + ".ln1", D);
    detail::attn_names(s, p + ".attn", D);
    detail::ln_names(s, p + ".ln2", D);
    detail::ffn_names(s, p + ".ffn", D, F);
  }
  detail::ln_names(s, "enc.ln", D);
  for (int i = 0; i < cfg.dec_layers; i++) {
    const std::string p = "dec" + std::to_string(i);
    detail::ln_names(s, p + ".ln1", D);
    detail::attn_names(s, p + ".self", D);
    detail::ln_names(s, p + ".ln2", D);
    detail::attn_names(s, p + ".cross", D);
    detail::ln_names(s, p + ".ln3", D);
    detail::ffn_names(s, p + ".ffn", D, F);
  }
  detail::ln_names(s, "dec.ln", D);
  return s;
}

// Closed form for the schema above; tests pin the two against each other.
inline int64_t param_count(const ModelConfig& cfg, int vocab_size) {
  const int64_t D = cfg.d_model, F = cfg.d_ff, V = vocab_size;
  const int64_t attn = 4 * D * D + 4 * D;
  const int64_t ffn = 2 * D * F + F + D;
  const int64_t ln = 2 * D;
  int64_t total = V * D * (cfg.tied_embeddings ? 1 : 2);
  total += cfg.enc_layers * (attn + ffn + 2 * ln) + ln;
  total += cfg.dec_layers * (2 * attn + ffn + 3 * ln) + ln;
  return total;
}

// Xavier-uniform matrices, zero biases, unit layer-norm gains. Each tensor's
// stream is derived from (seed, name) so init is order-independent.
template <class R>
ParameterStore<R> init_params(const ModelConfig& cfg, int vocab_size, uint64_t seed) {
  ParameterStore<R> ps;
  for (auto& [name, shape] : param_schema(cfg, vocab_size)) {
    auto& t = ps.add(name, shape);
    if (shape.size() == 2) {
      Rng rng(derive_seed(seed, "init:" + name));
      const double limit = std::sqrt(6.0 / (shape[0] + shape[1]));
      for (auto& v : t.values()) v = static_cast<R>((rng.real() * 2 - 1) * limit);
    } else if (name.size() > 2 && name.compare(name.size() - 2, 2, ".g") == 0) {
      for (auto& v : t.values()) v = R(1);
    }  // biases stay zero
  }
  return ps;
}

// ----- batches ------------------------------------------------------------------

// Padded token-id batch. tgt_in starts with <bos>; tgt_out ends with <eos>;
// pos_weight carries the example weight at real target positions and 0 at pads.
struct Batch {
  int B = 0, Ts = 0, Tt = 0;
  std::vector<int> src, src_len;
  std::vector<int> tgt_in, tgt_out, tgt_len;
  std::vector<double> pos_weight;
  std::vector<uint8_t> distilled;  // per example, for loss component reporting

  void validate(const ModelConfig& cfg, int vocab_size) const {
    if (B < 1) throw config_error("batch: empty");
    if (Ts > cfg.max_len || Tt > cfg.max_len)
      throw config_error("batch: sequence length " + std::to_string(std::max(Ts, Tt)) +
                         " exceeds model max_len " + std::to_string(cfg.max_len));
    if (static_cast<int>(src.size()) != B * Ts || static_cast<int>(tgt_in.size()) != B * Tt ||
        static_cast<int>(tgt_out.size()) != B * Tt ||
        static_cast<int>(pos_weight.size()) != B * Tt)
      throw config_error("batch: inconsistent buffer sizes");
    for (int id : src)
      if (id < 0 || id >= vocab_size) throw config_error("batch: src id outside vocab");
    for (int b = 0; b < B; b++)
      if (src_len[static_cast<size_t>(b)] < 1 || tgt_len[static_cast<size_t>(b)] < 1)
        throw config_error("batch: zero-length row");
  }
};

// ----- training forward ----------------------------------------------------------

namespace detail {

template <class R>
std::vector<R> pe_rows(int T, int D) {
  std::vector<R> pe(static_cast<size_t>(T) * D);
  for (int t = 0; t < T; t++)
    for (int j = 0; j < D; j += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(j) / D);
      pe[static_cast<size_t>(t) * D + j] = static_cast<R>(std::sin(t * freq));
      if (j + 1 < D) pe[static_cast<size_t>(t) * D + j + 1] = static_cast<R>(std::cos(t * freq));
    }
  return pe;
}

constexpr double kMask = -1e9;

}  // namespace detail

// Teacher-forced forward over a padded batch -> logits [B*Tt, V].
// Pass a dropout rng to run in train mode; nullptr means eval (no dropout).
template <class R>
Tensor<R> forward_teacher_forced(Tape<R>& tp, ParameterStore<R>& ps, const ModelConfig& cfg,
                                 const Batch& batch, Rng* dropout_rng = nullptr) {
  const int V = ps.get("embed").dim(0);
  batch.validate(cfg, V);
  const int B = batch.B, Ts = batch.Ts, Tt = batch.Tt;
  const int D = cfg.d_model, H = cfg.heads;
  const R inv_sqrt_dh = static_cast<R>(1.0 / std::sqrt(static_cast<double>(D / H)));

  auto drop = [&](Tensor<R> x) {
    if (dropout_rng && cfg.dropout > 0) return numcore::dropout(tp, x, cfg.dropout, *dropout_rng);
    return x;
  };

  // embeddings + positions
  auto embed_side = [&](const std::vector<int>& ids, int T) {
    auto e = numcore::gather_rows(tp, ps.get("embed"), ids);
    e = numcore::scale(tp, e, static_cast<R>(std::sqrt(static_cast<double>(D))));
    auto pe1 = detail::pe_rows<R>(T, D);
    std::vector<R> tiled(static_cast<size_t>(B) * T * D);
    for (int b = 0; b < B; b++)
      std::copy(pe1.begin(), pe1.end(), tiled.begin() + static_cast<size_t>(b) * T * D);
    auto pe = Tensor<R>::from({B, T, D}, std::move(tiled));
    return drop(numcore::add(tp, numcore::reshape(e, {B, T, D}), pe));
  };

  // additive masks
  auto key_pad_mask = [&](int Tq, int Tk, bool causal) {
    std::vector<R> m(static_cast<size_t>(B) * H * Tq * Tk, R(0));
    for (int b = 0; b < B; b++) {
      const int len = (Tk == Ts) ? batch.src_len[static_cast<size_t>(b)] : Tt;
      for (int h = 0; h < H; h++)
        for (int q = 0; q < Tq; q++)
          for (int k = 0; k < Tk; k++) {
            const bool dead = k >= len || (causal && k > q);
            if (dead)
              m[((static_cast<size_t>(b) * H + h) * Tq + q) * Tk + k] =
                  static_cast<R>(detail::kMask);
          }
    }
    return Tensor<R>::from({B * H, Tq, Tk}, std::move(m));
  };

  auto attention = [&](Tensor<R> xq, Tensor<R> xkv, const std::string& p, const Tensor<R>& mask,
                       int Tq, int Tk) {
    auto proj = [&](const Tensor<R>& x, int T, const char* w, const char* b) {
      auto flat = numcore::reshape(x, {B * T, D});
      auto y = numcore::matmul(tp, flat, ps.get(p + "." + w));
      return numcore::reshape(numcore::add_bias(tp, y, ps.get(p + "." + b)), {B, T, D});
    };
    auto qh = numcore::split_heads(tp, proj(xq, Tq, "wq", "bq"), H);
    auto kh = numcore::split_heads(tp, proj(xkv, Tk, "wk", "bk"), H);
    auto vh = numcore::split_heads(tp, proj(xkv, Tk, "wv", "bv"), H);
    auto scores = numcore::scale(tp, numcore::bmm_nt(tp, qh, kh), inv_sqrt_dh);
    auto probs = numcore::softmax_lastdim(tp, numcore::add(tp, scores, mask));
    auto ctx = numcore::merge_heads(tp, numcore::bmm(tp, probs, vh), H);
    auto o = numcore::matmul(tp, numcore::reshape(ctx, {B * Tq, D}), ps.get(p + ".wo"));
    return numcore::reshape(numcore::add_bias(tp, o, ps.get(p + ".bo")), {B, Tq, D});
  };

  auto ffn = [&](Tensor<R> x, const std::string& p, int T) {
    auto flat = numcore::reshape(x, {B * T, D});
    auto h = numcore::relu(
        tp, numcore::add_bias(tp, numcore::matmul(tp, flat, ps.get(p + ".w1")), ps.get(p + ".b1")));
    auto y = numcore::add_bias(tp, numcore::matmul(tp, h, ps.get(p + ".w2")), ps.get(p + ".b2"));
    return numcore::reshape(y, {B, T, D});
  };

  auto ln = [&](Tensor<R> x, const std::string& p) {
    return numcore::layer_norm(tp, x, ps.get(p + ".g"), ps.get(p + ".b"));
  };

  // encoder
  auto enc_mask = key_pad_mask(Ts, Ts, false);
  auto x = embed_side(batch.src, Ts);
  for (int i = 0; i < cfg.enc_layers; i++) {
    const std::string p = "enc" + std::to_string(i);
    auto h1 = ln(x, p + ".ln1");
    x = numcore::add(tp, x, drop(attention(h1, h1, p + ".attn", enc_mask, Ts, Ts)));
    x = numcore::add(tp, x, drop(ffn(ln(x, p + ".ln2"), p + ".ffn", Ts)));
  }
  auto memory = ln(x, "enc.ln");

  // decoder
  auto causal = key_pad_mask(Tt, Tt, true);
  auto cross = key_pad_mask(Tt, Ts, false);
  auto y = embed_side(batch.tgt_in, Tt);
  for (int i = 0; i < cfg.dec_layers; i++) {
    const std::string p = "dec" + std::to_string(i);
    auto h1 = ln(y, p + ".ln1");
    y = numcore::add(tp, y, drop(attention(h1, h1, p + ".self", causal, Tt, Tt)));
    y = numcore::add(tp, y,
                     drop(attention(ln(y, p + ".ln2"), memory, p + ".cross", cross, Tt, Ts)));
    y = numcore::add(tp, y, drop(ffn(ln(y, p + ".ln3"), p + ".ffn", Tt)));
  }
  auto out = numcore::reshape(ln(y, "dec.ln"), {B * Tt, D});
  const auto& table = cfg.tied_embeddings ? ps.get("embed") : ps.get("out_embed");
  return numcore::matmul_nt(tp, out, table);
}

// ----- inference engine -----------------------------------------------------------

// Raw-pointer view over a ParameterStore for allocation-free weight access.
template <class R>
struct ModelView {
  ModelConfig cfg;
  int V = 0, D = 0, H = 0, dh = 0, F = 0;
  struct LN {
    const R *g, *b;
  };
  struct Attn {
    const R *wq, *wk, *wv, *wo, *bq, *bk, *bv, *bo;
  };
  struct FFN {
    const R *w1, *b1, *w2, *b2;
  };
  struct EncLayer {
    LN ln1, ln2;
    Attn attn;
    FFN ffn;
  };
  struct DecLayer {
    LN ln1, ln2, ln3;
    Attn self, cross;
    FFN ffn;
  };
  const R* embed = nullptr;
  const R* out_table = nullptr;
  std::vector<EncLayer> enc;
  std::vector<DecLayer> dec;
  LN enc_ln{}, dec_ln{};
};

template <class R>
ModelView<R> make_view(const ParameterStore<R>& ps, const ModelConfig& cfg) {
  cfg.validate();
  ModelView<R> v;
  v.cfg = cfg;
  v.D = cfg.d_model;
  v.H = cfg.heads;
  v.dh = cfg.d_model / cfg.heads;
  v.F = cfg.d_ff;
  v.V = ps.get("embed").dim(0);
  v.embed = ps.get("embed").data();
  v.out_table = cfg.tied_embeddings ? v.embed : ps.get("out_embed").data();
  auto ln = [&](const std::string& p) {
    return typename ModelView<R>::LN{ps.get(p + ".g").data(), ps.get(p + ".b").data()};
  };
  auto attn = [&](const std::string& p) {
    return typename ModelView<R>::Attn{ps.get(p + ".wq").data(), ps.get(p + ".wk").data(),
                                       ps.get(p + ".wv").data(), ps.get(p + ".wo").data(),
                                       ps.get(p + ".bq").data(), ps.get(p + ".bk").data(),
                                       ps.get(p + ".bv").data(), ps.get(p + ".bo").data()};
  };
  auto ffn = [&](const std::string& p) {
    return typename ModelView<R>::FFN{ps.get(p + ".w1").data(), ps.get(p + ".b1").data(),
                                      ps.get(p + ".w2").data(), ps.get(p + ".b2").data()};
  };
  for (int i = 0; i < cfg.enc_layers; i++) {
    const std::string p = "enc" + std::to_string(i);
    v.enc.push_back({ln(p + ".ln1"), ln(p + ".ln2"), attn(p + ".attn"), ffn(p + ".ffn")});
  }
  v.enc_ln = ln("enc.ln");
  for (int i = 0; i < cfg.dec_layers; i++) {
    const std::string p = "dec" + std::to_string(i);
    v.dec.push_back({ln(p + ".ln1"), ln(p + ".ln2"), ln(p + ".ln3"), attn(p + ".self"),
                     attn(p + ".cross"), ffn(p + ".ffn")});
  }
  v.dec_ln = ln("dec.ln");
  return v;
}

namespace detail {

template <class R>
void layer_norm_rows(const R* x, R* out, int rows, int D, const R* g, const R* b) {
  for (int r = 0; r < rows; r++) {
    const R* xr = x + static_cast<size_t>(r) * D;
    R* yr = out + static_cast<size_t>(r) * D;
    double mean = 0;
    for (int j = 0; j < D; j++) mean += xr[j];
    mean /= D;
    double var = 0;
    for (int j = 0; j < D; j++) {
      const double d = xr[j] - mean;
      var += d * d;
    }
    const double is = 1.0 / std::sqrt(var / D + 1e-5);
    for (int j = 0; j < D; j++)
      yr[j] = static_cast<R>((xr[j] - mean) * is) * g[j] + b[j];
  }
}

// y[rows,N] = x[rows,D] . w[D,N] + b
template <class R>
void linear(const R* x, const R* w, const R* b, R* y, int rows, int D, int N) {
  for (int r = 0; r < rows; r++) {
    R* yr = y + static_cast<size_t>(r) * N;
    for (int n = 0; n < N; n++) yr[n] = b ? b[n] : R(0);
  }
  numcore::detail::gemm_nn(x, w, y, rows, D, N);
}

}  // namespace detail

// Per-sentence encoder output plus per-decoder-layer cross K/V, all fixed for
// the whole decode.
template <class R>
struct EncodedSource {
  int len = 0;
  std::vector<R> memory;                    // len*D
  std::vector<std::vector<R>> ck, cv;       // per dec layer, len*D
};

template <class R>
EncodedSource<R> encode_source(const ModelView<R>& v, const std::vector<int>& src_ids) {
  const int T = static_cast<int>(src_ids.size());
  if (T < 1) throw config_error("encode: empty source");
  if (T > v.cfg.max_len)
    throw config_error("encode: source length " + std::to_string(T) + " exceeds max_len " +
                       std::to_string(v.cfg.max_len));
  const int D = v.D, H = v.H, dh = v.dh;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  auto pe = detail::pe_rows<R>(T, D);
  std::vector<R> x(static_cast<size_t>(T) * D);
  const double sq = std::sqrt(static_cast<double>(D));
  for (int t = 0; t < T; t++) {
    const int id = src_ids[static_cast<size_t>(t)];
    if (id < 0 || id >= v.V) throw config_error("encode: token id outside vocab");
    for (int j = 0; j < D; j++)
      x[static_cast<size_t>(t) * D + j] =
          static_cast<R>(v.embed[static_cast<size_t>(id) * D + j] * sq) +
          pe[static_cast<size_t>(t) * D + j];
  }
  std::vector<R> h(static_cast<size_t>(T) * D), q(h), k(h), vv(h), ctx(h), o(h);
  std::vector<R> f(static_cast<size_t>(T) * v.F);
  std::vector<double> scores(static_cast<size_t>(T));
  for (auto& L : v.enc) {
    detail::layer_norm_rows(x.data(), h.data(), T, D, L.ln1.g, L.ln1.b);
    detail::linear(h.data(), L.attn.wq, L.attn.bq, q.data(), T, D, D);
    detail::linear(h.data(), L.attn.wk, L.attn.bk, k.data(), T, D, D);
    detail::linear(h.data(), L.attn.wv, L.attn.bv, vv.data(), T, D, D);
    for (int hd = 0; hd < H; hd++) {
      const int off = hd * dh;
      for (int tq = 0; tq < T; tq++) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int tk = 0; tk < T; tk++) {
          double s = 0;
          for (int j = 0; j < dh; j++)
            s += static_cast<double>(q[static_cast<size_t>(tq) * D + off + j]) *
                 static_cast<double>(k[static_cast<size_t>(tk) * D + off + j]);
          scores[static_cast<size_t>(tk)] = s * inv_sqrt_dh;
          mx = std::max(mx, scores[static_cast<size_t>(tk)]);
        }
        double sum = 0;
        for (int tk = 0; tk < T; tk++) {
          scores[static_cast<size_t>(tk)] = std::exp(scores[static_cast<size_t>(tk)] - mx);
          sum += scores[static_cast<size_t>(tk)];
        }
        for (int j = 0; j < dh; j++) {
          double acc = 0;
          for (int tk = 0; tk < T; tk++)
            acc += scores[static_cast<size_t>(tk)] *
                   static_cast<double>(vv[static_cast<size_t>(tk) * D + off + j]);
          ctx[static_cast<size_t>(tq) * D + off + j] = static_cast<R>(acc / sum);
        }
      }
    }
    detail::linear(ctx.data(), L.attn.wo, L.attn.bo, o.data(), T, D, D);
    for (size_t i = 0; i < x.size(); i++) x[i] += o[i];
    detail::layer_norm_rows(x.data(), h.data(), T, D, L.ln2.g, L.ln2.b);
    detail::linear(h.data(), L.ffn.w1, L.ffn.b1, f.data(), T, D, v.F);
    for (auto& z : f) z = z > R(0) ? z : R(0);
    detail::linear(f.data(), L.ffn.w2, L.ffn.b2, o.data(), T, v.F, D);
    for (size_t i = 0; i < x.size(); i++) x[i] += o[i];
  }
  EncodedSource<R> enc;
  enc.len = T;
  enc.memory.resize(static_cast<size_t>(T) * D);
  detail::layer_norm_rows(x.data(), enc.memory.data(), T, D, v.enc_ln.g, v.enc_ln.b);
  for (auto& L : v.dec) {
    std::vector<R> ck(static_cast<size_t>(T) * D), cv(static_cast<size_t>(T) * D);
    detail::linear(enc.memory.data(), L.cross.wk, L.cross.bk, ck.data(), T, D, D);
    detail::linear(enc.memory.data(), L.cross.wv, L.cross.bv, cv.data(), T, D, D);
    enc.ck.push_back(std::move(ck));
    enc.cv.push_back(std::move(cv));
  }
  return enc;
}

// Mean of final encoder states over all encoded positions.
template <class R>
std::vector<R> export_representation(const ModelView<R>& v, const std::vector<int>& ids) {
  auto enc = encode_source(v, ids);
  std::vector<double> acc(static_cast<size_t>(v.D), 0.0);
  for (int t = 0; t < enc.len; t++)
    for (int j = 0; j < v.D; j++)
      acc[static_cast<size_t>(j)] += enc.memory[static_cast<size_t>(t) * v.D + j];
  std::vector<R> out(static_cast<size_t>(v.D));
  for (int j = 0; j < v.D; j++) out[static_cast<size_t>(j)] = static_cast<R>(acc[static_cast<size_t>(j)] / enc.len);
  return out;
}

// Incremental decoder state for one hypothesis: grown K/V caches per layer and
// the token about to be fed.
template <class R>
struct DecState {
  int next_input = 1;  // <bos> by default
  int t = 0;           // positions consumed so far
  std::vector<std::vector<R>> sk, sv;  // per dec layer, t*D after each step

  static DecState start(const ModelView<R>& v, int bos) {
    DecState s;
    s.next_input = bos;
    s.sk.resize(v.dec.size());
    s.sv.resize(v.dec.size());
    return s;
  }
};

// Advance a set of states one step each (in lockstep; all at the same t).
// Mutates the caches and returns per-state log-prob rows over the vocabulary.
template <class R>
std::vector<std::vector<double>> decode_step(const ModelView<R>& v, const EncodedSource<R>& enc,
                                             std::vector<DecState<R>*>& states) {
  const int S = static_cast<int>(states.size());
  if (S == 0) return {};
  const int D = v.D, H = v.H, dh = v.dh;
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const int t = states[0]->t;
  if (t + 1 > v.cfg.max_len) throw config_error("decode: past model max_len");
  for (auto* s : states)
    if (s->t != t) throw std::logic_error("decode_step: states out of lockstep");

  const double sq = std::sqrt(static_cast<double>(D));
  std::vector<R> x(static_cast<size_t>(S) * D);
  auto pe = detail::pe_rows<R>(t + 1, D);
  for (int s = 0; s < S; s++) {
    const int id = states[static_cast<size_t>(s)]->next_input;
    if (id < 0 || id >= v.V) throw config_error("decode: token id outside vocab");
    for (int j = 0; j < D; j++)
      x[static_cast<size_t>(s) * D + j] =
          static_cast<R>(v.embed[static_cast<size_t>(id) * D + j] * sq) +
          pe[static_cast<size_t>(t) * D + j];
  }

  std::vector<R> h(static_cast<size_t>(S) * D), q(h), k(h), vv(h), ctx(h), o(h);
  std::vector<R> f(static_cast<size_t>(S) * v.F);
  std::vector<double> scores;
  for (size_t li = 0; li < v.dec.size(); li++) {
    const auto& L = v.dec[li];
    // self attention over the per-state cache
    detail::layer_norm_rows(x.data(), h.data(), S, D, L.ln1.g, L.ln1.b);
    detail::linear(h.data(), L.self.wq, L.self.bq, q.data(), S, D, D);
    detail::linear(h.data(), L.self.wk, L.self.bk, k.data(), S, D, D);
    detail::linear(h.data(), L.self.wv, L.self.bv, vv.data(), S, D, D);
    for (int s = 0; s < S; s++) {
      auto& sk = states[static_cast<size_t>(s)]->sk[li];
      auto& sv = states[static_cast<size_t>(s)]->sv[li];
      sk.insert(sk.end(), k.begin() + static_cast<size_t>(s) * D,
                k.begin() + static_cast<size_t>(s + 1) * D);
      sv.insert(sv.end(), vv.begin() + static_cast<size_t>(s) * D,
                vv.begin() + static_cast<size_t>(s + 1) * D);
      scores.resize(static_cast<size_t>(t) + 1);
      for (int hd = 0; hd < H; hd++) {
        const int off = hd * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (int tk = 0; tk <= t; tk++) {
          double sc = 0;
          for (int j = 0; j < dh; j++)
            sc += static_cast<double>(q[static_cast<size_t>(s) * D + off + j]) *
                  static_cast<double>(sk[static_cast<size_t>(tk) * D + off + j]);
          scores[static_cast<size_t>(tk)] = sc * inv_sqrt_dh;
          mx = std::max(mx, scores[static_cast<size_t>(tk)]);
        }
        double sum = 0;
        for (int tk = 0; tk <= t; tk++) {
          scores[static_cast<size_t>(tk)] = std::exp(scores[static_cast<size_t>(tk)] - mx);
          sum += scores[static_cast<size_t>(tk)];
        }
        for (int j = 0; j < dh; j++) {
          double acc = 0;
          for (int tk = 0; tk <= t; tk++)
            acc += scores[static_cast<size_t>(tk)] *
                   static_cast<double>(sv[static_cast<size_t>(tk) * D + off + j]);
          ctx[static_cast<size_t>(s) * D + off + j] = static_cast<R>(acc / sum);
        }
      }
    }
    detail::linear(ctx.data(), L.self.wo, L.self.bo, o.data(), S, D, D);
    for (size_t i = 0; i < x.size(); i++) x[i] += o[i];

    // cross attention over the shared encoded source
    detail::layer_norm_rows(x.data(), h.data(), S, D, L.ln2.g, L.ln2.b);
    detail::linear(h.data(), L.cross.wq, L.cross.bq, q.data(), S, D, D);
    const auto& ck = enc.ck[li];
    const auto& cv = enc.cv[li];
    scores.resize(static_cast<size_t>(enc.len));
    for (int s = 0; s < S; s++) {
      for (int hd = 0; hd < H; hd++) {
        const int off = hd * dh;
        double mx = -std::numeric_limits<double>::infinity();
        for (int tk = 0; tk < enc.len; tk++) {
          double sc = 0;
          for (int j = 0; j < dh; j++)
            sc += static_cast<double>(q[static_cast<size_t>(s) * D + off + j]) *
                  static_cast<double>(ck[static_cast<size_t>(tk) * D + off + j]);
          scores[static_cast<size_t>(tk)] = sc * inv_sqrt_dh;
          mx = std::max(mx, scores[static_cast<size_t>(tk)]);
        }
        double sum = 0;
        for (int tk = 0; tk < enc.len; tk++) {
          scores[static_cast<size_t>(tk)] = std::exp(scores[static_cast<size_t>(tk)] - mx);
          sum += scores[static_cast<size_t>(tk)];
        }
        for (int j = 0; j < dh; j++) {
          double acc = 0;
          for (int tk = 0; tk < enc.len; tk++)
            acc += scores[static_cast<size_t>(tk)] *
                   static_cast<double>(cv[static_cast<size_t>(tk) * D + off + j]);
          ctx[static_cast<size_t>(s) * D + off + j] = static_cast<R>(acc / sum);
        }
      }
    }
    detail::linear(ctx.data(), L.cross.wo, L.cross.bo, o.data(), S, D, D);
    for (size_t i = 0; i < x.size(); i++) x[i] += o[i];

    detail::layer_norm_rows(x.data(), h.data(), S, D, L.ln3.g, L.ln3.b);
    detail::linear(h.data(), L.ffn.w1, L.ffn.b1, f.data(), S, D, v.F);
    for (auto& z : f) z = z > R(0) ? z : R(0);
    detail::linear(f.data(), L.ffn.w2, L.ffn.b2, o.data(), S, v.F, D);
    for (size_t i = 0; i < x.size(); i++) x[i] += o[i];
  }
  detail::layer_norm_rows(x.data(), h.data(), S, D, v.dec_ln.g, v.dec_ln.b);
  std::vector<R> logits(static_cast<size_t>(S) * v.V, R(0));
  numcore::detail::gemm_nt(h.data(), v.out_table, logits.data(), S, D, v.V);

  std::vector<std::vector<double>> out(static_cast<size_t>(S));
  for (int s = 0; s < S; s++) {
    const R* row = logits.data() + static_cast<size_t>(s) * v.V;
    double mx = row[0];
    for (int j = 1; j < v.V; j++) mx = std::max(mx, static_cast<double>(row[j]));
    double sum = 0;
    for (int j = 0; j < v.V; j++) sum += std::exp(static_cast<double>(row[j]) - mx);
    const double lse = mx + std::log(sum);
    auto& dst = out[static_cast<size_t>(s)];
    dst.resize(static_cast<size_t>(v.V));
    for (int j = 0; j < v.V; j++) dst[static_cast<size_t>(j)] = static_cast<double>(row[j]) - lse;
    states[static_cast<size_t>(s)]->t = t + 1;
  }
  return out;
}

// Teacher-forced log P(tgt | src) including the closing <eos>, via the
// incremental path. tgt_ids are the raw target ids (no bos/eos).
template <class R>
double sequence_logprob(const ModelView<R>& v, const EncodedSource<R>& enc,
                        const std::vector<int>& tgt_ids, int bos, int eos) {
  DecState<R> st = DecState<R>::start(v, bos);
  std::vector<DecState<R>*> states{&st};
  double lp = 0;
  std::vector<int> seq(tgt_ids);
  seq.push_back(eos);
  for (int tok : seq) {
    auto rows = decode_step(v, enc, states);
    lp += rows[0][static_cast<size_t>(tok)];
    st.next_input = tok;
  }
  return lp;
}

// ----- beam search -----------------------------------------------------------------

struct BeamParams {
  int beam = 5;
  int max_len = 40;      // max generated tokens, <eos> included
  double alpha = 1.0;    // length penalty: score = logp / len^alpha
  int bos = 1, eos = 2;
};

struct Hypothesis {
  std::vector<int> tokens;  // includes the final <eos> when finished
  double logprob = 0;
  double score = 0;
  bool finished = false;
};

namespace detail {

inline bool hyp_before(const Hypothesis& a, const Hypothesis& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.tokens.size() != b.tokens.size()) return a.tokens.size() < b.tokens.size();
  return a.tokens < b.tokens;
}

}  // namespace detail

// Pooled-candidate beam search. Each step ranks all live extensions by
// cumulative logprob (ties: lower beam index, then lower token id), keeps the
// top `beam`; <eos> extensions retire to the finished pool. Final order is by
// length-normalized score, ties broken shorter-then-lexicographic. With beam=1
// this is greedy decoding; with beam >= the number of reachable sequences
// nothing is pruned and the result equals exhaustive enumeration.
//
// Scorer contract:
//   using State = ...;
//   State start();
//   std::vector<std::vector<double>> step(std::vector<State*>&);  // logprob rows
//   State advance(const State&, int token);                       // branch
template <class Scorer>
std::vector<Hypothesis> beam_search(Scorer& sc, const BeamParams& bp) {
  if (bp.beam < 1) throw config_error("beam_search: beam must be >= 1");
  if (bp.max_len < 1) throw config_error("beam_search: max_len must be >= 1");
  using State = typename Scorer::State;
  struct Live {
    State state;
    std::vector<int> tokens;
    double logp = 0;
  };
  auto norm = [&](double logp, size_t len) {
    return logp / std::pow(static_cast<double>(len), bp.alpha);
  };
  std::vector<Live> live;
  live.push_back({sc.start(), {}, 0.0});
  std::vector<Hypothesis> finished;
  std::vector<Hypothesis> capped;  // partials that ran out of length budget

  for (int t = 0; t < bp.max_len && !live.empty(); t++) {
    std::vector<State*> states;
    states.reserve(live.size());
    for (auto& l : live) states.push_back(&l.state);
    auto rows = sc.step(states);

    struct Cand {
      double logp;
      int beam_i, tok;
    };
    std::vector<Cand> cands;
    cands.reserve(rows.size() * rows[0].size());
    for (size_t i = 0; i < rows.size(); i++)
      for (size_t v = 0; v < rows[i].size(); v++)
        cands.push_back({live[i].logp + rows[i][v], static_cast<int>(i), static_cast<int>(v)});
    auto before = [](const Cand& a, const Cand& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      if (a.beam_i != b.beam_i) return a.beam_i < b.beam_i;
      return a.tok < b.tok;
    };
    const size_t take = std::min(cands.size(), static_cast<size_t>(bp.beam));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<ptrdiff_t>(take), cands.end(),
                      before);

    std::vector<Live> next;
    for (size_t c = 0; c < take; c++) {
      const auto& cd = cands[c];
      auto& parent = live[static_cast<size_t>(cd.beam_i)];
      std::vector<int> seq = parent.tokens;
      seq.push_back(cd.tok);
      if (cd.tok == bp.eos) {
        Hypothesis h;
        h.tokens = std::move(seq);
        h.logprob = cd.logp;
        h.score = norm(cd.logp, h.tokens.size());
        h.finished = true;
        finished.push_back(std::move(h));
      } else if (t + 1 < bp.max_len) {
        next.push_back({sc.advance(parent.state, cd.tok), std::move(seq), cd.logp});
      } else {  // out of budget: keep as an unfinished fallback
        Hypothesis h;
        h.tokens = std::move(seq);
        h.logprob = cd.logp;
        h.score = norm(cd.logp, h.tokens.size());
        h.finished = false;
        capped.push_back(std::move(h));
      }
    }
    std::sort(finished.begin(), finished.end(), detail::hyp_before);
    if (finished.size() > static_cast<size_t>(bp.beam))
      finished.resize(static_cast<size_t>(bp.beam));
    live = std::move(next);

    // Safe early stop: a live hypothesis with logp L <= 0 can never beat
    // L / max_len^alpha, the most favorable normalization it could reach.
    if (finished.size() >= static_cast<size_t>(bp.beam) && !live.empty()) {
      double best_bound = -std::numeric_limits<double>::infinity();
      for (auto& l : live)
        best_bound = std::max(best_bound, norm(l.logp, static_cast<size_t>(bp.max_len)));
      if (finished.back().score >= best_bound) break;
    }
  }

  if (finished.empty()) {
    // Nothing terminated within max_len: hand back the best partials, flagged.
    std::sort(capped.begin(), capped.end(), detail::hyp_before);
    if (capped.size() > static_cast<size_t>(bp.beam)) capped.resize(static_cast<size_t>(bp.beam));
    return capped;
  }
  return finished;
}

// Scorer over the transformer's incremental decoder.
template <class R>
struct TransformerScorer {
  const ModelView<R>* view;
  const EncodedSource<R>* enc;
  int bos;

  struct State {
    DecState<R> d;
  };
  State start() { return State{DecState<R>::start(*view, bos)}; }
  std::vector<std::vector<double>> step(std::vector<State*>& states) {
    std::vector<DecState<R>*> ds;
    ds.reserve(states.size());
    for (auto* s : states) ds.push_back(&s->d);
    return decode_step(*view, *enc, ds);
  }
  State advance(const State& s, int token) {
    State n = s;  // deep-copies the caches
    n.d.next_input = token;
    return n;
  }
};

// ----- checkpoints -----------------------------------------------------------------

// Binary format "UM4CKPT1": magic, u32 tensor count, then per tensor
// u32 name len, name bytes, u32 rank, u32 dims..., float32 LE values.
inline constexpr char kCkptMagic[8] = {'U', 'M', '4', 'C', 'K', 'P', 'T', '1'};

template <class R>
void save_checkpoint(const std::filesystem::path& path, const ParameterStore<R>& ps) {
  std::string buf;
  auto put = [&](const void* p, size_t n) { buf.append(static_cast<const char*>(p), n); };
  auto put_u32 = [&](uint32_t v) { put(&v, 4); };
  put(kCkptMagic, 8);
  put_u32(static_cast<uint32_t>(ps.count()));
  for (auto& name : ps.names()) {
    const auto& t = ps.get(name);
    put_u32(static_cast<uint32_t>(name.size()));
    put(name.data(), name.size());
    put_u32(static_cast<uint32_t>(t.shape.size()));
    for (int d : t.shape) put_u32(static_cast<uint32_t>(d));
    for (R x : t.values()) {
      const float f = static_cast<float>(x);
      put(&f, 4);
    }
  }
  write_file(path, buf);
}

template <class R = float>
ParameterStore<R> load_checkpoint(const std::filesystem::path& path) {
  const std::string buf = read_file(path);
  size_t pos = 0;
  auto need = [&](size_t n) {
    if (pos + n > buf.size()) throw config_error("truncated checkpoint: " + path.string());
  };
  need(8);
  if (std::memcmp(buf.data(), kCkptMagic, 8) != 0)
    throw config_error("not a checkpoint file: " + path.string());
  pos = 8;
  auto get_u32 = [&]() {
    need(4);
    uint32_t v;
    std::memcpy(&v, buf.data() + pos, 4);
    pos += 4;
    return v;
  };
  const uint32_t count = get_u32();
  ParameterStore<R> ps;
  for (uint32_t i = 0; i < count; i++) {
    const uint32_t name_len = get_u32();
    need(name_len);
    std::string name(buf.data() + pos, name_len);
    pos += name_len;
    const uint32_t rank = get_u32();
    if (rank > 3) throw config_error("checkpoint tensor rank > 3: " + name);
    Shape shape;
    for (uint32_t r = 0; r < rank; r++) shape.push_back(static_cast<int>(get_u32()));
    auto& t = ps.add(name, shape);
    const size_t n = t.values().size();
    need(n * 4);
    for (size_t j = 0; j < n; j++) {
      float f;
      std::memcpy(&f, buf.data() + pos + j * 4, 4);
      t.values()[j] = static_cast<R>(f);
    }
    pos += n * 4;
  }
  if (pos != buf.size()) throw config_error("trailing bytes in checkpoint: " + path.string());
  return ps;
}

// Elementwise mean of checkpoints with identical schemas (double accumulation).
template <class R>
ParameterStore<R> average_checkpoints(const std::vector<ParameterStore<R>>& stores) {
  if (stores.empty()) throw config_error("average_checkpoints: no inputs");
  const auto& first = stores[0];
  ParameterStore<R> out;
  for (auto& name : first.names()) out.add(name, first.get(name).shape);
  for (auto& st : stores) {
    if (st.names() != first.names())
      throw config_error("average_checkpoints: schema mismatch (names differ)");
    for (auto& name : first.names())
      if (st.get(name).shape != first.get(name).shape)
        throw config_error("average_checkpoints: shape mismatch for " + name);
  }
  const double inv = 1.0 / static_cast<double>(stores.size());
  for (auto& name : first.names()) {
    auto& dst = out.get(name).values();
    for (size_t i = 0; i < dst.size(); i++) {
      double acc = 0;
      for (auto& st : stores) acc += static_cast<double>(st.get(name).values()[i]);
      dst[i] = static_cast<R>(acc * inv);
    }
  }
  return out;
}

// ----- string-level translation interface -------------------------------------------

struct TranslationCandidate {
  std::vector<std::string> tokens;
  double logprob = 0;
  bool finished = true;
};

// Anything that can translate token sequences between named languages. The
// trained model implements it; tests plug in ground-truth oracles.
class Translator {
 public:
  virtual ~Translator() = default;
  virtual std::vector<TranslationCandidate> translate(const std::vector<std::string>& src,
                                                      const std::string& src_lang,
                                                      const std::string& tgt_lang, int beam) = 0;
};

// Beam-decoding translator over a trained model. Decode budget per sentence is
// min(model max_len, 2*src_len + 5).
class ModelTranslator : public Translator {
 public:
  ModelTranslator(ParameterStore<float> params, ModelConfig cfg, Vocabulary vocab,
                  double alpha = 1.0)
      : params_(std::move(params)),
        cfg_(cfg),
        vocab_(std::move(vocab)),
        alpha_(alpha),
        view_(make_view(params_, cfg_)) {}

  std::vector<TranslationCandidate> translate(const std::vector<std::string>& src,
                                              const std::string& src_lang,
                                              const std::string& tgt_lang, int beam) override {
    (void)src_lang;  // tagging is target-side only
    std::vector<int> ids;
    ids.push_back(vocab_.id(Vocabulary::tag_for(tgt_lang)));
    for (auto& t : src) ids.push_back(vocab_.id(t));
    ids.push_back(vocab_.eos);
    auto enc = encode_source(view_, ids);
    TransformerScorer<float> sc{&view_, &enc, vocab_.bos};
    BeamParams bp;
    bp.beam = beam;
    bp.max_len = std::min(cfg_.max_len, 2 * static_cast<int>(src.size()) + 5);
    bp.alpha = alpha_;
    bp.bos = vocab_.bos;
    bp.eos = vocab_.eos;
    std::vector<TranslationCandidate> out;
    for (auto& h : beam_search(sc, bp)) {
      TranslationCandidate c;
      c.logprob = h.logprob;
      c.finished = h.finished;
      const size_t n = h.tokens.size() - (h.finished ? 1 : 0);  // strip final <eos>
      for (size_t i = 0; i < n; i++) c.tokens.push_back(vocab_.token(h.tokens[i]));
      out.push_back(std::move(c));
    }
    return out;
  }

  const ModelView<float>& view() const { return view_; }
  const Vocabulary& vocab() const { return vocab_; }
  const ModelConfig& config() const { return cfg_; }

 private:
  ParameterStore<float> params_;
  ModelConfig cfg_;
  Vocabulary vocab_;
  double alpha_;
  ModelView<float> view_;
};

}  // namespace umlab::seq2seq
