#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tpsgtr/autodiff.hpp"
#include "tpsgtr/rng.hpp"
#include "tpsgtr/rolespace.hpp"
#include "tpsgtr/scenegraph.hpp"

namespace tpsgtr {

// The two decoder architectures: TDBU drives the first recurrent unit with
// the whole-scene visual feature, sTDBU with the summed triplet fillers plus
// semantic-tag gating of both hidden states.
enum class Arch { tdbu, stdbu };

// Pooling over per-triplet encodings: learned softmax attention, or the
// uniform-mean ablation.
enum class Pool { attention, mean };

inline std::string arch_string(Arch arch, Pool pool) {
  std::string s = arch == Arch::tdbu ? "tdbu" : "stdbu";
  if (pool == Pool::mean) s += "_meanpool";
  return s;
}

inline const std::vector<std::string>& arch_strings() {
  static const std::vector<std::string> all{"tdbu", "stdbu", "tdbu_meanpool", "stdbu_meanpool"};
  return all;
}

inline std::pair<Arch, Pool> parse_arch(const std::string& s) {
  if (s == "tdbu") return {Arch::tdbu, Pool::attention};
  if (s == "stdbu") return {Arch::stdbu, Pool::attention};
  if (s == "tdbu_meanpool") return {Arch::tdbu, Pool::mean};
  if (s == "stdbu_meanpool") return {Arch::stdbu, Pool::mean};
  std::string allowed;
  for (const auto& a : arch_strings()) allowed += (allowed.empty() ? "" : ", ") + a;
  throw ConfigError("unknown architecture '" + s + "' (allowed: " + allowed + ")");
}

struct Dims {
  std::size_t d = 32;         // filler dimension
  std::size_t role_order = 4; // Hadamard order R
  std::size_t d_v = 32;       // global visual feature
  std::size_t d_e = 18;       // semantic tag vector
  std::size_t d_emb = 32;     // word embedding
  std::size_t d_h = 64;       // recurrent hidden
  std::size_t d_att = 64;     // attention projection
  std::size_t vocab = 0;

  std::size_t flat() const { return d * role_order; }
  std::size_t lstm1_input(Arch arch) const { return d_h + (arch == Arch::tdbu ? d_v : 3 * d) + d_emb; }
  std::size_t lstm2_input() const { return d_h + flat(); }

  bool operator==(const Dims&) const = default;
};

inline const std::vector<std::string>& param_names(Arch arch) {
  static const std::vector<std::string> base{
      "embed.w_e", "lstm1.w_x", "lstm1.w_h", "lstm1.b", "lstm2.w_x", "lstm2.w_h",
      "lstm2.b",   "attn.w_a",  "attn.w_b",  "attn.w_c", "out.w_hx",
  };
  static const std::vector<std::string> gated = [] {
    std::vector<std::string> v = base;
    v.insert(v.end(), {"gate.w_s1", "gate.w_1n", "gate.w_s2", "gate.w_2n"});
    return v;
  }();
  return arch == Arch::stdbu ? gated : base;
}

inline Shape param_shape(const std::string& name, Arch arch, const Dims& dims) {
  const std::size_t H = dims.d_h;
  if (name == "embed.w_e") return {dims.vocab, dims.d_emb};
  if (name == "lstm1.w_x") return {4 * H, dims.lstm1_input(arch)};
  if (name == "lstm1.w_h") return {4 * H, H};
  if (name == "lstm1.b") return {4 * H};
  if (name == "lstm2.w_x") return {4 * H, dims.lstm2_input()};
  if (name == "lstm2.w_h") return {4 * H, H};
  if (name == "lstm2.b") return {4 * H};
  if (name == "attn.w_a") return {1, dims.d_att};
  if (name == "attn.w_b") return {dims.d_att, dims.flat()};
  if (name == "attn.w_c") return {dims.d_att, H};
  if (name == "out.w_hx") return {dims.vocab, H};
  if (name == "gate.w_s1" || name == "gate.w_s2") return {H, dims.d_e};
  if (name == "gate.w_1n" || name == "gate.w_2n") return {H, H};
  throw ArgumentError("unknown parameter '" + name + "'");
}

// Every weight of both architectures, keyed by canonical name.
struct ModelParams {
  Arch arch = Arch::tdbu;
  Pool pool = Pool::attention;
  Dims dims;
  std::map<std::string, Tensor> tensors;

  const Tensor& at(const std::string& name) const {
    auto it = tensors.find(name);
    if (it == tensors.end()) throw ArgumentError("model has no parameter '" + name + "'");
    return it->second;
  }

  void validate() const {
    const auto& names = param_names(arch);
    if (tensors.size() != names.size()) {
      throw MismatchError("model holds " + std::to_string(tensors.size()) + " parameters, architecture needs " +
                          std::to_string(names.size()));
    }
    for (const auto& name : names) {
      auto it = tensors.find(name);
      if (it == tensors.end()) throw MismatchError("model is missing parameter '" + name + "'");
      const Tensor& t = it->second;
      const Shape expect = param_shape(name, arch, dims);
      if (t.shape() != expect) {
        throw MismatchError("parameter '" + name + "' has shape " + shape_str(t.shape()) + ", expected " +
                            shape_str(expect));
      }
      if (!all_finite(t)) throw ArgumentError("parameter '" + name + "' has non-finite entries");
    }
  }
};

// All-zero parameters.
inline ModelParams make_model(Arch arch, Pool pool, const Dims& dims) {
  if (dims.vocab < 2) throw ArgumentError("vocabulary must hold at least the specials");
  ModelParams p;
  p.arch = arch;
  p.pool = pool;
  p.dims = dims;
  for (const auto& name : param_names(arch)) {
    p.tensors.emplace(name, Tensor(param_shape(name, arch, dims)));
  }
  return p;
}

// Small uniform weights, zero biases except the forget gates.
inline ModelParams init_model(Arch arch, Pool pool, const Dims& dims, std::uint64_t seed) {
  ModelParams p = make_model(arch, pool, dims);
  Rng rng(mix_seed(seed, 0x6D0DE1));
  for (const auto& name : param_names(arch)) {
    Tensor& t = p.tensors.at(name);
    if (name == "lstm1.b" || name == "lstm2.b") {
      const std::size_t H = dims.d_h;
      for (std::size_t i = H; i < 2 * H; ++i) t[i] = 1.0;  // forget gate block
      continue;
    }
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-0.08, 0.08);
  }
  return p;
}

struct LstmWeights {
  Tensor input;      // [4H, in]
  Tensor recurrent;  // [4H, H]
  Tensor bias;       // [4H]
};

// Recurrent state of both units plus the previously emitted token.
struct DecoderState {
  Tensor h1, c1, h2, c2;
  int prev_token = 0;
};

inline DecoderState initial_state(const Dims& dims, int bos = 0) {
  DecoderState s;
  s.h1 = Tensor({dims.d_h});
  s.c1 = Tensor({dims.d_h});
  s.h2 = Tensor({dims.d_h});
  s.c2 = Tensor({dims.d_h});
  s.prev_token = bos;
  return s;
}

// Per-step observables: attention weights, pooled encoding, word log-probs.
struct StepTrace {
  std::vector<double> attention;
  Tensor pooled;
  Tensor log_probs;
};

// ---------------------------------------------------------------------------
// Tape-level construction (shared by the value-level API, training, decoding)

struct TapeParams {
  Arch arch = Arch::tdbu;
  Pool pool = Pool::attention;
  Dims dims;
  std::map<std::string, Var> w;
};

inline TapeParams bind_params(Tape& tape, const ModelParams& params, bool trainable) {
  params.validate();
  TapeParams tp{params.arch, params.pool, params.dims, {}};
  for (const auto& name : param_names(params.arch)) {
    tp.w.emplace(name, trainable ? tape.param(name, params.at(name)) : tape.input(params.at(name)));
  }
  return tp;
}

// Whole-scene inputs, computed once per record.
struct SceneContext {
  Tensor vbar;                    // d_v for TDBU, 3d for sTDBU
  std::vector<Tensor> encodings;  // flattened triplet encodings, each d*R
  Tensor tags;                    // d_e
};

// TDBU initialization: the global visual feature, unchanged.
inline Tensor tdbu_init(const SceneRecord& rec) {
  if (!rec.global_feature) {
    throw ArgumentError("record '" + rec.id + "' has no global feature; TDBU needs one (use the stdbu architecture)");
  }
  return *rec.global_feature;
}

// sTDBU initialization: sum over triplets of [subject; predicate; object].
inline Tensor stdbu_init(const SceneRecord& rec) {
  if (rec.triplets.empty()) throw ArgumentError("record '" + rec.id + "' has no triplets");
  Tensor acc({3 * rec.triplets.front().dim()});
  for (const auto& t : rec.triplets) {
    const Tensor part = concat({t.subject, t.predicate, t.object});
    require_same_shape(acc, part, "stdbu_init");
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += part[i];
  }
  return acc;
}

inline SceneContext make_scene_context(const ModelParams& params, const SceneRecord& rec) {
  const Dims& dims = params.dims;
  if (rec.triplets.empty()) throw ArgumentError("record '" + rec.id + "' has no triplets");
  if (rec.triplets.front().dim() != dims.d) {
    throw MismatchError("record '" + rec.id + "' has filler dimension " + std::to_string(rec.triplets.front().dim()) +
                        ", model expects " + std::to_string(dims.d));
  }
  SceneContext ctx;
  const RoleBasis basis = hadamard_roles(dims.role_order);
  for (const auto& enc : encode_scene(rec.triplets, basis)) {
    ctx.encodings.push_back(flatten_encoding(enc));
  }
  if (params.arch == Arch::tdbu) {
    ctx.vbar = tdbu_init(rec);
    if (ctx.vbar.size() != dims.d_v) {
      throw MismatchError("record '" + rec.id + "' global feature has dimension " + std::to_string(ctx.vbar.size()) +
                          ", model expects " + std::to_string(dims.d_v));
    }
  } else {
    ctx.vbar = stdbu_init(rec);
    if (rec.tags.size() != dims.d_e) {
      throw MismatchError("record '" + rec.id + "' tag vector has dimension " + std::to_string(rec.tags.size()) +
                          ", model expects " + std::to_string(dims.d_e));
    }
  }
  ctx.tags = rec.tags;
  return ctx;
}

struct TapeScene {
  Var vbar;
  std::vector<Var> encodings;
  Var tags;
  Var mean_coeffs;  // uniform 1/N, used by the mean-pool ablation
};

inline TapeScene bind_scene(Tape& tape, const SceneContext& ctx) {
  TapeScene sc;
  sc.vbar = tape.input(ctx.vbar);
  for (const auto& e : ctx.encodings) sc.encodings.push_back(tape.input(e));
  sc.tags = tape.input(ctx.tags);
  const std::size_t n = ctx.encodings.size();
  Tensor uniform({n});
  for (std::size_t i = 0; i < n; ++i) uniform[i] = 1.0 / static_cast<double>(n);
  sc.mean_coeffs = tape.input(std::move(uniform));
  return sc;
}

struct TapeState {
  Var h1, c1, h2, c2;
  int prev_token = 0;
};

inline TapeState initial_tape_state(Tape& tape, const Dims& dims, int bos = 0) {
  TapeState s;
  s.h1 = tape.input(Tensor({dims.d_h}));
  s.c1 = tape.input(Tensor({dims.d_h}));
  s.h2 = tape.input(Tensor({dims.d_h}));
  s.c2 = tape.input(Tensor({dims.d_h}));
  s.prev_token = bos;
  return s;
}

namespace detail {

// i, f, o = sigmoid, g = tanh; c' = f*c + i*g; h' = o*tanh(c').
inline std::pair<Var, Var> lstm_cell(Tape& t, Var w_x, Var w_h, Var b, Var x, Var h, Var c) {
  const std::size_t H = t.value(b).size() / 4;
  Var z = t.add(t.add(t.matvec(w_x, x), t.matvec(w_h, h)), b);
  Var i = t.sigmoid(t.slice(z, 0, H));
  Var f = t.sigmoid(t.slice(z, H, H));
  Var g = t.tanh(t.slice(z, 2 * H, H));
  Var o = t.sigmoid(t.slice(z, 3 * H, H));
  Var c_next = t.add(t.mul(f, c), t.mul(i, g));
  Var h_next = t.mul(o, t.tanh(c_next));
  return {h_next, c_next};
}

struct PoolOut {
  Var weights;
  Var pooled;
};

// a_i = W_a tanh(W_b s_i + W_c h1); softmax; convex combination of the
// encodings. The mean ablation uses fixed uniform coefficients instead.
inline PoolOut attention_pool(Tape& t, const TapeParams& tp, const TapeScene& sc, Var h1) {
  if (sc.encodings.empty()) throw ArgumentError("attention over an empty encoding list");
  PoolOut out;
  if (tp.pool == Pool::attention) {
    Var ch = t.matvec(tp.w.at("attn.w_c"), h1);
    std::vector<Var> scores;
    scores.reserve(sc.encodings.size());
    for (Var enc : sc.encodings) {
      Var u = t.tanh(t.add(t.matvec(tp.w.at("attn.w_b"), enc), ch));
      scores.push_back(t.matvec(tp.w.at("attn.w_a"), u));
    }
    out.weights = t.softmax(t.concat(std::span<const Var>(scores.data(), scores.size())));
  } else {
    out.weights = sc.mean_coeffs;
  }
  out.pooled = t.weighted_sum(out.weights, std::span<const Var>(sc.encodings.data(), sc.encodings.size()));
  return out;
}

struct TapeStepOut {
  Var log_probs;
  Var attn;
  Var pooled;
};

inline TapeStepOut decoder_step(Tape& t, const TapeParams& tp, const TapeScene& sc, TapeState& st) {
  if (st.prev_token < 0 || st.prev_token >= static_cast<int>(tp.dims.vocab)) {
    throw ArgumentError("token id " + std::to_string(st.prev_token) + " out of range for vocabulary of " +
                        std::to_string(tp.dims.vocab));
  }
  Var emb = t.row(tp.w.at("embed.w_e"), static_cast<std::size_t>(st.prev_token));
  Var x1 = t.concat({st.h2, sc.vbar, emb});
  auto [h1, c1] = lstm_cell(t, tp.w.at("lstm1.w_x"), tp.w.at("lstm1.w_h"), tp.w.at("lstm1.b"), x1, st.h1, st.c1);

  PoolOut pool = attention_pool(t, tp, sc, h1);

  Var x2, h2_in;
  if (tp.arch == Arch::stdbu) {
    Var h1n = t.mul(t.matvec(tp.w.at("gate.w_s1"), sc.tags), t.matvec(tp.w.at("gate.w_1n"), h1));
    x2 = t.concat({h1n, pool.pooled});
    h2_in = t.mul(t.matvec(tp.w.at("gate.w_s2"), sc.tags), t.matvec(tp.w.at("gate.w_2n"), st.h2));
  } else {
    x2 = t.concat({h1, pool.pooled});
    h2_in = st.h2;
  }
  auto [h2, c2] = lstm_cell(t, tp.w.at("lstm2.w_x"), tp.w.at("lstm2.w_h"), tp.w.at("lstm2.b"), x2, h2_in, st.c2);

  st.h1 = h1;
  st.c1 = c1;
  st.h2 = h2;
  st.c2 = c2;

  Var logits = t.matvec(tp.w.at("out.w_hx"), h2);
  return {t.log_softmax(logits), pool.weights, pool.pooled};
}

inline StepTrace extract_trace(const Tape& t, const TapeStepOut& out) {
  StepTrace trace;
  trace.attention = t.value(out.attn).data();
  trace.pooled = t.value(out.pooled);
  trace.log_probs = t.value(out.log_probs);
  return trace;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Value-level API

inline std::pair<Tensor, Tensor> lstm_step(const LstmWeights& w, const Tensor& x, const Tensor& h, const Tensor& c) {
  Tape t;
  auto [hn, cn] = detail::lstm_cell(t, t.input(w.input), t.input(w.recurrent), t.input(w.bias), t.input(x),
                                    t.input(h), t.input(c));
  return {t.value(hn), t.value(cn)};
}

// Attention weights and pooled encoding for one query.
inline StepTrace attend(const std::vector<Tensor>& encodings, const Tensor& h1, const ModelParams& params) {
  if (encodings.empty()) throw ArgumentError("attention over an empty encoding list");
  Tape t;
  TapeParams tp = bind_params(t, params, false);
  TapeScene sc;
  sc.vbar = t.input(Tensor({1}));
  for (const auto& e : encodings) sc.encodings.push_back(t.input(e));
  Tensor uniform({encodings.size()});
  for (std::size_t i = 0; i < uniform.size(); ++i) uniform[i] = 1.0 / static_cast<double>(uniform.size());
  sc.mean_coeffs = t.input(std::move(uniform));
  sc.tags = t.input(Tensor({1}));
  auto out = detail::attention_pool(t, tp, sc, t.input(h1));
  StepTrace trace;
  trace.attention = t.value(out.weights).data();
  trace.pooled = t.value(out.pooled);
  return trace;
}

namespace detail {

inline std::pair<Tensor, StepTrace> value_step(const ModelParams& params, const SceneRecord& rec,
                                               const std::vector<Tensor>& encodings, DecoderState& state) {
  Tape t;
  TapeParams tp = bind_params(t, params, false);
  SceneContext ctx = make_scene_context(params, rec);
  ctx.encodings = encodings;  // caller-supplied flattened encodings
  TapeScene sc = bind_scene(t, ctx);
  TapeState ts;
  ts.h1 = t.input(state.h1);
  ts.c1 = t.input(state.c1);
  ts.h2 = t.input(state.h2);
  ts.c2 = t.input(state.c2);
  ts.prev_token = state.prev_token;
  TapeStepOut out = decoder_step(t, tp, sc, ts);
  state.h1 = t.value(ts.h1);
  state.c1 = t.value(ts.c1);
  state.h2 = t.value(ts.h2);
  state.c2 = t.value(ts.c2);
  StepTrace trace = extract_trace(t, out);
  return {trace.log_probs, trace};
}

}  // namespace detail

// One TDBU decode step; advances the state and returns word log-probs.
inline std::pair<Tensor, StepTrace> tdbu_step(const ModelParams& params, const SceneRecord& rec,
                                              const std::vector<Tensor>& encodings, DecoderState& state) {
  if (params.arch != Arch::tdbu) throw ContractError("tdbu_step called on a " + arch_string(params.arch, params.pool) +
                                                     " model");
  return detail::value_step(params, rec, encodings, state);
}

// One sTDBU decode step.
inline std::pair<Tensor, StepTrace> stdbu_step(const ModelParams& params, const SceneRecord& rec,
                                               const std::vector<Tensor>& encodings, DecoderState& state) {
  if (params.arch != Arch::stdbu) throw ContractError("stdbu_step called on a " +
                                                      arch_string(params.arch, params.pool) + " model");
  return detail::value_step(params, rec, encodings, state);
}

// ---------------------------------------------------------------------------
// Decoding

// Argmax decode; ties break toward the lowest token id. <eos> is consumed,
// not emitted.
inline std::vector<int> decode_greedy(const ModelParams& params, const SceneRecord& rec, std::size_t max_len,
                                      int bos = 0, int eos = 1) {
  if (max_len < 1) throw ArgumentError("max_len must be at least 1");
  Tape t;
  TapeParams tp = bind_params(t, params, false);
  TapeScene sc = bind_scene(t, make_scene_context(params, rec));
  TapeState st = initial_tape_state(t, params.dims, bos);
  std::vector<int> tokens;
  for (std::size_t step = 0; step < max_len; ++step) {
    auto out = detail::decoder_step(t, tp, sc, st);
    const Tensor& lp = t.value(out.log_probs);
    int best = 0;
    for (std::size_t i = 1; i < lp.size(); ++i) {
      if (lp[i] > lp[best]) best = static_cast<int>(i);
    }
    if (best == eos) break;
    tokens.push_back(best);
    st.prev_token = best;
  }
  return tokens;
}

struct ScoredSequence {
  std::vector<int> tokens;  // <eos> excluded
  double score = 0.0;       // length-normalized log-probability
};

// Standard beam search over step log-probs. A hypothesis's score is its total
// log-probability (including the <eos> step when one was emitted) divided by
// the number of scored steps. Width 1 reproduces decode_greedy exactly.
inline std::vector<ScoredSequence> decode_beam(const ModelParams& params, const SceneRecord& rec, std::size_t width,
                                               std::size_t max_len, int bos = 0, int eos = 1) {
  if (width < 1) throw ArgumentError("beam width must be at least 1");
  if (max_len < 1) throw ArgumentError("max_len must be at least 1");
  Tape t;
  TapeParams tp = bind_params(t, params, false);
  TapeScene sc = bind_scene(t, make_scene_context(params, rec));

  struct Hyp {
    std::vector<int> tokens;
    double sum_lp = 0.0;
    TapeState state;
  };
  std::vector<Hyp> live(1);
  live[0].state = initial_tape_state(t, params.dims, bos);

  std::vector<ScoredSequence> pool;
  auto finish = [&](const Hyp& h, double final_lp, bool with_eos) {
    const std::size_t steps = h.tokens.size() + (with_eos ? 1 : 0);
    pool.push_back({h.tokens, (h.sum_lp + final_lp) / static_cast<double>(steps)});
  };

  for (std::size_t step = 0; step < max_len && !live.empty(); ++step) {
    struct Cand {
      double sum_lp;
      int token;
      std::size_t hyp;
      double lp;
    };
    std::vector<Cand> cands;
    std::vector<TapeState> stepped(live.size());
    for (std::size_t h = 0; h < live.size(); ++h) {
      TapeState st = live[h].state;
      auto out = detail::decoder_step(t, tp, sc, st);
      stepped[h] = st;
      const Tensor& lp = t.value(out.log_probs);
      for (std::size_t tok = 0; tok < lp.size(); ++tok) {
        cands.push_back({live[h].sum_lp + lp[tok], static_cast<int>(tok), h, lp[tok]});
      }
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.sum_lp != b.sum_lp) return a.sum_lp > b.sum_lp;
      if (a.token != b.token) return a.token < b.token;
      return a.hyp < b.hyp;
    });
    if (cands.size() > width) cands.resize(width);

    std::vector<Hyp> next;
    for (const Cand& c : cands) {
      const Hyp& parent = live[c.hyp];
      if (c.token == eos) {
        finish(parent, c.lp, true);
        continue;
      }
      Hyp h;
      h.tokens = parent.tokens;
      h.tokens.push_back(c.token);
      h.sum_lp = c.sum_lp;
      h.state = stepped[c.hyp];
      h.state.prev_token = c.token;
      if (h.tokens.size() >= max_len) {
        finish(h, 0.0, false);
      } else {
        next.push_back(std::move(h));
      }
    }
    live = std::move(next);
  }
  for (const Hyp& h : live) finish(h, 0.0, false);

  std::sort(pool.begin(), pool.end(), [](const ScoredSequence& a, const ScoredSequence& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.tokens < b.tokens;
  });
  if (pool.size() > width) pool.resize(width);
  return pool;
}

}  // namespace tpsgtr
