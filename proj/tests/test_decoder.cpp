#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "tpsgtr/decoder.hpp"
#include "tpsgtr/rng.hpp"
#include "tpsgtr/training.hpp"

using namespace tpsgtr;

// ---------------------------------------------------------------------------
// Straight-line oracle: a second, independent transcription of both step
// formulas on plain std::vector<double>, sharing nothing with the library
// implementation beyond reading the raw parameter values.

namespace {

using Vec = std::vector<double>;

Vec omv(const Tensor& w, const Vec& x) {
  Vec out(w.rows(), 0.0);
  for (std::size_t r = 0; r < w.rows(); ++r)
    for (std::size_t c = 0; c < w.cols(); ++c) out[r] += w.at(r, c) * x[c];
  return out;
}

Vec ocat(std::initializer_list<Vec> parts) {
  Vec out;
  for (const auto& p : parts) out.insert(out.end(), p.begin(), p.end());
  return out;
}

double osig(double v) { return 1.0 / (1.0 + std::exp(-v)); }

struct OracleState {
  Vec h1, c1, h2, c2;
  int prev = 0;
};

struct OracleOut {
  Vec log_probs;
  Vec attn;
  Vec pooled;
};

void olstm(const Tensor& wx, const Tensor& wh, const Tensor& b, const Vec& x, const Vec& h_in, const Vec& c_in,
           Vec& h_out, Vec& c_out) {
  const std::size_t H = b.size() / 4;
  Vec z = omv(wx, x);
  const Vec rec = omv(wh, h_in);
  for (std::size_t i = 0; i < z.size(); ++i) z[i] += rec[i] + b[i];
  h_out.assign(H, 0.0);
  c_out.assign(H, 0.0);
  for (std::size_t i = 0; i < H; ++i) {
    const double gi = osig(z[i]);
    const double gf = osig(z[H + i]);
    const double gg = std::tanh(z[2 * H + i]);
    const double go = osig(z[3 * H + i]);
    c_out[i] = gf * c_in[i] + gi * gg;
    h_out[i] = go * std::tanh(c_out[i]);
  }
}

// ungated = true replaces both semantic gates with identity pass-through (the
// gating degeneracy reference).
OracleOut oracle_step(const ModelParams& p, const Vec& vbar, const std::vector<Vec>& encs, const Vec& tags,
                      OracleState& st, bool ungated = false) {
  const Tensor& w_e = p.at("embed.w_e");
  Vec emb(w_e.cols());
  for (std::size_t c = 0; c < w_e.cols(); ++c) emb[c] = w_e.at(static_cast<std::size_t>(st.prev), c);

  const Vec x1 = ocat({st.h2, vbar, emb});
  Vec h1, c1;
  olstm(p.at("lstm1.w_x"), p.at("lstm1.w_h"), p.at("lstm1.b"), x1, st.h1, st.c1, h1, c1);

  OracleOut out;
  const std::size_t n = encs.size();
  if (p.pool == Pool::attention) {
    Vec scores(n);
    const Vec ch = omv(p.at("attn.w_c"), h1);
    for (std::size_t i = 0; i < n; ++i) {
      Vec u = omv(p.at("attn.w_b"), encs[i]);
      for (std::size_t k = 0; k < u.size(); ++k) u[k] = std::tanh(u[k] + ch[k]);
      scores[i] = omv(p.at("attn.w_a"), u)[0];
    }
    double mx = scores[0];
    for (double s : scores) mx = std::max(mx, s);
    double total = 0.0;
    out.attn.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      out.attn[i] = std::exp(scores[i] - mx);
      total += out.attn[i];
    }
    for (auto& a : out.attn) a /= total;
  } else {
    out.attn.assign(n, 1.0 / static_cast<double>(n));
  }
  out.pooled.assign(encs[0].size(), 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t k = 0; k < out.pooled.size(); ++k) out.pooled[k] += out.attn[i] * encs[i][k];

  Vec x2, h2_in;
  if (p.arch == Arch::stdbu) {
    if (ungated) {
      x2 = ocat({h1, out.pooled});
      h2_in = st.h2;
    } else {
      const Vec g1 = omv(p.at("gate.w_s1"), tags);
      const Vec p1 = omv(p.at("gate.w_1n"), h1);
      Vec h1n(g1.size());
      for (std::size_t i = 0; i < h1n.size(); ++i) h1n[i] = g1[i] * p1[i];
      x2 = ocat({h1n, out.pooled});
      const Vec g2 = omv(p.at("gate.w_s2"), tags);
      const Vec p2 = omv(p.at("gate.w_2n"), st.h2);
      h2_in.assign(g2.size(), 0.0);
      for (std::size_t i = 0; i < h2_in.size(); ++i) h2_in[i] = g2[i] * p2[i];
    }
  } else {
    x2 = ocat({h1, out.pooled});
    h2_in = st.h2;
  }
  Vec h2, c2;
  olstm(p.at("lstm2.w_x"), p.at("lstm2.w_h"), p.at("lstm2.b"), x2, h2_in, st.c2, h2, c2);

  Vec logits = omv(p.at("out.w_hx"), h2);
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double lse = 0.0;
  for (double v : logits) lse += std::exp(v - mx);
  lse = mx + std::log(lse);
  out.log_probs.assign(logits.size(), 0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) out.log_probs[i] = logits[i] - lse;

  st.h1 = h1;
  st.c1 = c1;
  st.h2 = h2;
  st.c2 = c2;
  return out;
}

// ---------------------------------------------------------------------------
// fixtures

struct Fixture {
  Dims dims;
  ModelParams params;
  SceneRecord rec;
  std::vector<Tensor> encodings;
};

Fixture make_fixture(Arch arch, Pool pool, std::uint64_t seed, bool zero_params = false) {
  ToyWorldConfig cfg;
  cfg.object_vocab = 5;
  cfg.predicate_vocab = 3;
  cfg.feature_dim = 6;
  cfg.triplets_min = 2;
  cfg.triplets_max = 3;
  cfg.seed = seed;
  Fixture s;
  s.rec = generate_toy_world(cfg, 1)[0];

  s.dims.d = 6;
  s.dims.role_order = 4;
  s.dims.d_v = 6;
  s.dims.d_e = 8;
  s.dims.d_emb = 10;
  s.dims.d_h = 12;
  s.dims.d_att = 9;
  s.dims.vocab = 14;
  s.params = zero_params ? make_model(arch, pool, s.dims) : init_model(arch, pool, s.dims, seed);

  const RoleBasis basis = hadamard_roles(4);
  for (const auto& enc : encode_scene(s.rec.triplets, basis)) s.encodings.push_back(flatten_encoding(enc));
  return s;
}

std::vector<Vec> as_vecs(const std::vector<Tensor>& ts) {
  std::vector<Vec> out;
  for (const auto& t : ts) out.push_back(t.data());
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

TEST(LstmStep, AllZeroEverything) {
  LstmWeights w{Tensor({8, 3}), Tensor({8, 2}), Tensor({8})};
  const auto [h, c] = lstm_step(w, Tensor({3}), Tensor({2}), Tensor({2}));
  EXPECT_EQ(h.data(), (std::vector<double>{0, 0}));
  EXPECT_EQ(c.data(), (std::vector<double>{0, 0}));
}

TEST(LstmStep, HalfGatesOnUnitCell) {
  LstmWeights w{Tensor({8, 3}), Tensor({8, 2}), Tensor({8})};
  const auto [h, c] = lstm_step(w, Tensor({3}), Tensor({2}), Tensor::vector({1.0, 1.0}));
  const double expect_h = 0.5 * std::tanh(0.5);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_DOUBLE_EQ(c[i], 0.5);
    EXPECT_NEAR(h[i], expect_h, 1e-15);
    EXPECT_NEAR(h[i], 0.2311, 5e-5);
  }
}

TEST(LstmStep, MatchesStraightLineOracle) {
  Rng rng(42);
  const std::size_t H = 4, in = 5;
  auto rand_tensor = [&](Shape shape) {
    Tensor t(shape);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.gaussian();
    return t;
  };
  LstmWeights w{rand_tensor({4 * H, in}), rand_tensor({4 * H, H}), rand_tensor({4 * H})};
  const Tensor x = rand_tensor({in});
  const Tensor h0 = rand_tensor({H});
  const Tensor c0 = rand_tensor({H});
  const auto [h, c] = lstm_step(w, x, h0, c0);

  Vec oh, oc;
  olstm(w.input, w.recurrent, w.bias, x.data(), h0.data(), c0.data(), oh, oc);
  for (std::size_t i = 0; i < H; ++i) {
    EXPECT_NEAR(h[i], oh[i], 1e-14);
    EXPECT_NEAR(c[i], oc[i], 1e-14);
  }
}

TEST(Attend, SingleEncodingTakesAllWeight) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 1);
  const StepTrace tr = attend({s.encodings[0]}, Tensor({s.dims.d_h}), s.params);
  ASSERT_EQ(tr.attention.size(), 1u);
  EXPECT_DOUBLE_EQ(tr.attention[0], 1.0);
  EXPECT_LT(max_abs_diff(tr.pooled, s.encodings[0]), 1e-15);
}

TEST(Attend, IdenticalEncodingsGiveUniformWeights) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 2);
  Rng rng(5);
  Tensor h({s.dims.d_h});
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = rng.gaussian();
  const StepTrace tr = attend({s.encodings[0], s.encodings[0], s.encodings[0]}, h, s.params);
  for (double a : tr.attention) EXPECT_NEAR(a, 1.0 / 3.0, 1e-12);
  EXPECT_LT(max_abs_diff(tr.pooled, s.encodings[0]), 1e-12);
}

TEST(Attend, MatchesExplicitConvexCombination) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 3);
  ASSERT_GE(s.encodings.size(), 2u);
  Rng rng(9);
  Tensor h({s.dims.d_h});
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = rng.gaussian();
  const StepTrace tr = attend(s.encodings, h, s.params);

  // direct formula on plain vectors
  const std::vector<Vec> encs = as_vecs(s.encodings);
  Vec scores(encs.size());
  const Vec ch = omv(s.params.at("attn.w_c"), h.data());
  for (std::size_t i = 0; i < encs.size(); ++i) {
    Vec u = omv(s.params.at("attn.w_b"), encs[i]);
    for (std::size_t k = 0; k < u.size(); ++k) u[k] = std::tanh(u[k] + ch[k]);
    scores[i] = omv(s.params.at("attn.w_a"), u)[0];
  }
  double mx = scores[0], total = 0.0;
  for (double v : scores) mx = std::max(mx, v);
  Vec weights(encs.size());
  for (std::size_t i = 0; i < encs.size(); ++i) total += (weights[i] = std::exp(scores[i] - mx));
  double checksum = 0.0;
  Vec pooled(encs[0].size(), 0.0);
  for (std::size_t i = 0; i < encs.size(); ++i) {
    weights[i] /= total;
    checksum += weights[i];
    for (std::size_t k = 0; k < pooled.size(); ++k) pooled[k] += weights[i] * encs[i][k];
  }
  EXPECT_NEAR(checksum, 1.0, 1e-12);
  for (std::size_t i = 0; i < weights.size(); ++i) EXPECT_NEAR(tr.attention[i], weights[i], 1e-13);
  for (std::size_t k = 0; k < pooled.size(); ++k) EXPECT_NEAR(tr.pooled[k], pooled[k], 1e-13);
}

TEST(Attend, EmptyListRejected) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 4);
  EXPECT_THROW(attend({}, Tensor({s.dims.d_h}), s.params), ArgumentError);
}

TEST(Attend, PermutationEquivariant) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 6);
  ASSERT_GE(s.encodings.size(), 2u);
  Rng rng(31);
  Tensor h({s.dims.d_h});
  for (std::size_t i = 0; i < h.size(); ++i) h[i] = rng.gaussian();

  std::vector<Tensor> reversed(s.encodings.rbegin(), s.encodings.rend());
  const StepTrace fwd = attend(s.encodings, h, s.params);
  const StepTrace rev = attend(reversed, h, s.params);
  const std::size_t n = s.encodings.size();
  for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(fwd.attention[i], rev.attention[n - 1 - i], 1e-15);
  EXPECT_LT(max_abs_diff(fwd.pooled, rev.pooled), 1e-12);
}

TEST(Init, TdbuPassesGlobalFeatureThrough) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 7);
  EXPECT_EQ(tdbu_init(s.rec).data(), s.rec.global_feature->data());

  SceneRecord no_global = s.rec;
  no_global.global_feature.reset();
  try {
    tdbu_init(no_global);
    FAIL() << "expected ArgumentError";
  } catch (const ArgumentError& e) {
    EXPECT_NE(std::string(e.what()).find("stdbu"), std::string::npos) << e.what();
  }
}

TEST(Init, StdbuSumsConcatenatedFillers) {
  const Fixture s = make_fixture(Arch::stdbu, Pool::attention, 8);
  const Tensor v = stdbu_init(s.rec);
  ASSERT_EQ(v.size(), 3 * s.dims.d);
  // coordinate-wise against hand addition
  for (std::size_t i = 0; i < s.dims.d; ++i) {
    double es = 0.0, ep = 0.0, eo = 0.0;
    for (const auto& t : s.rec.triplets) {
      es += t.subject[i];
      ep += t.predicate[i];
      eo += t.object[i];
    }
    EXPECT_NEAR(v[i], es, 1e-12);
    EXPECT_NEAR(v[s.dims.d + i], ep, 1e-12);
    EXPECT_NEAR(v[2 * s.dims.d + i], eo, 1e-12);
  }

  // a single triplet is its own concatenation; k copies scale it
  SceneRecord one = s.rec;
  one.triplets.resize(1);
  const Tensor single = stdbu_init(one);
  EXPECT_LT(max_abs_diff(single, concat({one.triplets[0].subject, one.triplets[0].predicate,
                                         one.triplets[0].object})),
            1e-15);
  SceneRecord twice = one;
  twice.triplets.push_back(twice.triplets[0]);
  EXPECT_LT(max_abs_diff(stdbu_init(twice), scale(single, 2.0)), 1e-12);
}

TEST(TdbuStep, AllZeroParamsGiveUniformDistribution) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 9, /*zero_params=*/true);
  DecoderState st = initial_state(s.dims);
  const auto [lp, trace] = tdbu_step(s.params, s.rec, s.encodings, st);
  const double expect = -std::log(static_cast<double>(s.dims.vocab));
  for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_NEAR(lp[i], expect, 1e-12);
}

TEST(TdbuStep, DistributionIsProperAtEveryStep) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 10);
  DecoderState st = initial_state(s.dims);
  for (int step = 0; step < 4; ++step) {
    const auto [lp, trace] = tdbu_step(s.params, s.rec, s.encodings, st);
    double total = 0.0;
    for (std::size_t i = 0; i < lp.size(); ++i) total += std::exp(lp[i]);
    EXPECT_NEAR(total, 1.0, 1e-9);
    double attn_total = 0.0;
    for (double a : trace.attention) {
      EXPECT_GE(a, 0.0);
      attn_total += a;
    }
    EXPECT_NEAR(attn_total, 1.0, 1e-9);
    st.prev_token = step % static_cast<int>(s.dims.vocab);
  }
}

TEST(TdbuStep, MatchesStraightLineTranscription) {
  for (std::uint64_t seed : {11u, 12u}) {
    const Fixture s = make_fixture(Arch::tdbu, Pool::attention, seed);
    DecoderState st = initial_state(s.dims);
    OracleState ost;
    ost.h1 = Vec(s.dims.d_h, 0.0);
    ost.c1 = Vec(s.dims.d_h, 0.0);
    ost.h2 = Vec(s.dims.d_h, 0.0);
    ost.c2 = Vec(s.dims.d_h, 0.0);
    const Vec vbar = tdbu_init(s.rec).data();
    const std::vector<Vec> encs = as_vecs(s.encodings);

    for (int step = 0; step < 3; ++step) {
      const auto [lp, trace] = tdbu_step(s.params, s.rec, s.encodings, st);
      ost.prev = st.prev_token;
      const OracleOut ref = oracle_step(s.params, vbar, encs, s.rec.tags.data(), ost);
      for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_NEAR(lp[i], ref.log_probs[i], 1e-12);
      for (std::size_t i = 0; i < trace.attention.size(); ++i) EXPECT_NEAR(trace.attention[i], ref.attn[i], 1e-12);
      for (std::size_t i = 0; i < s.dims.d_h; ++i) {
        EXPECT_NEAR(st.h1[i], ost.h1[i], 1e-12);
        EXPECT_NEAR(st.h2[i], ost.h2[i], 1e-12);
        EXPECT_NEAR(st.c2[i], ost.c2[i], 1e-12);
      }
      st.prev_token = (step + 3) % static_cast<int>(s.dims.vocab);
    }
  }
}

TEST(StdbuStep, MatchesStraightLineTranscription) {
  for (std::uint64_t seed : {13u, 14u}) {
    const Fixture s = make_fixture(Arch::stdbu, Pool::attention, seed);
    DecoderState st = initial_state(s.dims);
    OracleState ost;
    ost.h1 = Vec(s.dims.d_h, 0.0);
    ost.c1 = Vec(s.dims.d_h, 0.0);
    ost.h2 = Vec(s.dims.d_h, 0.0);
    ost.c2 = Vec(s.dims.d_h, 0.0);
    const Vec vbar = stdbu_init(s.rec).data();
    const std::vector<Vec> encs = as_vecs(s.encodings);

    for (int step = 0; step < 3; ++step) {
      const auto [lp, trace] = stdbu_step(s.params, s.rec, s.encodings, st);
      ost.prev = st.prev_token;
      const OracleOut ref = oracle_step(s.params, vbar, encs, s.rec.tags.data(), ost);
      for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_NEAR(lp[i], ref.log_probs[i], 1e-12);
      for (std::size_t i = 0; i < s.dims.d_h; ++i) {
        EXPECT_NEAR(st.h2[i], ost.h2[i], 1e-12);
        EXPECT_NEAR(st.c2[i], ost.c2[i], 1e-12);
      }
      st.prev_token = (step + 5) % static_cast<int>(s.dims.vocab);
    }
  }
}

TEST(TdbuStep, TokenIdOutOfRangeRejected) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 27);
  DecoderState st = initial_state(s.dims);
  st.prev_token = static_cast<int>(s.dims.vocab);
  EXPECT_THROW(tdbu_step(s.params, s.rec, s.encodings, st), ArgumentError);
  st.prev_token = -1;
  EXPECT_THROW(tdbu_step(s.params, s.rec, s.encodings, st), ArgumentError);
}

TEST(StdbuStep, ArchTagEnforced) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 15);
  DecoderState st = initial_state(s.dims);
  EXPECT_THROW(stdbu_step(s.params, s.rec, s.encodings, st), ContractError);
  const Fixture s2 = make_fixture(Arch::stdbu, Pool::attention, 15);
  DecoderState st2 = initial_state(s2.dims);
  EXPECT_THROW(tdbu_step(s2.params, s2.rec, s2.encodings, st2), ContractError);
}

// Ones-gates plus identity projections reproduce the ungated computation.
TEST(StdbuStep, GatingDegeneracyEquivalence) {
  Fixture s = make_fixture(Arch::stdbu, Pool::attention, 16);

  // force W_s1 * tags = W_s2 * tags = all-ones. tags is multi-hot; set every
  // gate matrix column to 1/k where k = number of active tags.
  double active = 0.0;
  for (std::size_t i = 0; i < s.rec.tags.size(); ++i) active += s.rec.tags[i];
  ASSERT_GT(active, 0.0);
  for (const char* name : {"gate.w_s1", "gate.w_s2"}) {
    Tensor& w = s.params.tensors.at(name);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = 1.0 / active;
  }
  for (const char* name : {"gate.w_1n", "gate.w_2n"}) {
    s.params.tensors.at(name) = Tensor::identity(s.dims.d_h);
  }

  DecoderState st = initial_state(s.dims);
  OracleState ost;
  ost.h1 = Vec(s.dims.d_h, 0.0);
  ost.c1 = Vec(s.dims.d_h, 0.0);
  ost.h2 = Vec(s.dims.d_h, 0.0);
  ost.c2 = Vec(s.dims.d_h, 0.0);
  const Vec vbar = stdbu_init(s.rec).data();
  const std::vector<Vec> encs = as_vecs(s.encodings);

  for (int step = 0; step < 3; ++step) {
    const auto [lp, trace] = stdbu_step(s.params, s.rec, s.encodings, st);
    ost.prev = st.prev_token;
    const OracleOut ref = oracle_step(s.params, vbar, encs, s.rec.tags.data(), ost, /*ungated=*/true);
    for (std::size_t i = 0; i < lp.size(); ++i) EXPECT_NEAR(lp[i], ref.log_probs[i], 1e-12);
    for (std::size_t i = 0; i < s.dims.d_h; ++i) {
      EXPECT_NEAR(st.h2[i], ost.h2[i], 1e-12);
      EXPECT_NEAR(st.c2[i], ost.c2[i], 1e-12);
    }
    st.prev_token = (step + 1) % static_cast<int>(s.dims.vocab);
  }
}

// Zero tags annihilate both gated paths: the step must ignore the gate
// projections and the second unit's recurrent weights entirely.
TEST(StdbuStep, ZeroTagsEraseGatedHistory) {
  Fixture s = make_fixture(Arch::stdbu, Pool::attention, 17);
  s.rec.tags = Tensor({s.dims.d_e});

  auto run = [&](const ModelParams& params) {
    DecoderState st = initial_state(s.dims);
    Rng rng(3);
    for (std::size_t i = 0; i < s.dims.d_h; ++i) {
      st.h1[i] = rng.gaussian();
      st.h2[i] = rng.gaussian();
      st.c1[i] = rng.gaussian();
    }
    const auto [lp, trace] = stdbu_step(params, s.rec, s.encodings, st);
    return std::pair{lp, st};
  };

  const auto [lp_base, st_base] = run(s.params);

  Rng rng(99);
  ModelParams tweaked = s.params;
  for (const char* name : {"gate.w_1n", "gate.w_2n", "lstm2.w_h"}) {
    Tensor& w = tweaked.tensors.at(name);
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = rng.gaussian();
  }
  const auto [lp_tweaked, st_tweaked] = run(tweaked);

  EXPECT_EQ(lp_base.data(), lp_tweaked.data());
  EXPECT_EQ(st_base.h2.data(), st_tweaked.h2.data());
}

TEST(DecodeGreedy, AllZeroParamsRepeatLowestToken) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 18, /*zero_params=*/true);
  const auto tokens = decode_greedy(s.params, s.rec, 7);
  ASSERT_EQ(tokens.size(), 7u);
  for (int tok : tokens) EXPECT_EQ(tok, 0);
}

TEST(DecodeGreedy, MaxLenOneGivesSingleToken) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::attention, 19);
  EXPECT_LE(decode_greedy(s.params, s.rec, 1).size(), 1u);
}

TEST(DecodeBeam, WidthOneReproducesGreedy) {
  for (std::uint64_t seed : {21u, 22u, 23u}) {
    for (Arch arch : {Arch::tdbu, Arch::stdbu}) {
      const Fixture s = make_fixture(arch, Pool::attention, seed);
      const auto greedy = decode_greedy(s.params, s.rec, 12);
      const auto beams = decode_beam(s.params, s.rec, 1, 12);
      ASSERT_EQ(beams.size(), 1u);
      EXPECT_EQ(beams[0].tokens, greedy);
    }
  }
}

// With width >= vocab^max_len nothing is pruned, so the result must match a
// full enumeration of every sequence under the same normalized score.
TEST(DecodeBeam, HugeWidthMatchesExhaustiveEnumeration) {
  Fixture s = make_fixture(Arch::tdbu, Pool::attention, 24);
  s.dims.vocab = 3;
  s.params = init_model(Arch::tdbu, Pool::attention, s.dims, 24);
  const std::size_t max_len = 3;

  struct Best {
    double score = -1e300;
    std::vector<int> tokens;
  };
  Best best;
  // enumerate all token sequences; 1 = <eos> terminates the sequence
  const int V = 3;
  std::vector<std::vector<int>> complete;
  std::function<void(std::vector<int>&)> walk = [&](std::vector<int>& prefix) {
    if (prefix.size() == max_len) {
      complete.push_back(prefix);
      return;
    }
    for (int tok = 0; tok < V; ++tok) {
      prefix.push_back(tok);
      if (tok == 1) {
        complete.push_back(prefix);
      } else {
        walk(prefix);
      }
      prefix.pop_back();
    }
  };
  std::vector<int> empty;
  walk(empty);

  for (const auto& seq : complete) {
    DecoderState st = initial_state(s.dims);
    double sum = 0.0;
    for (int tok : seq) {
      const auto [lp, trace] = tdbu_step(s.params, s.rec, s.encodings, st);
      sum += lp[static_cast<std::size_t>(tok)];
      st.prev_token = tok;
    }
    const double score = sum / static_cast<double>(seq.size());
    std::vector<int> tokens = seq;
    if (!tokens.empty() && tokens.back() == 1) tokens.pop_back();
    if (score > best.score || (score == best.score && tokens < best.tokens)) {
      best.score = score;
      best.tokens = tokens;
    }
  }

  const auto beams = decode_beam(s.params, s.rec, 40, max_len);
  ASSERT_FALSE(beams.empty());
  EXPECT_EQ(beams[0].tokens, best.tokens);
  EXPECT_NEAR(beams[0].score, best.score, 1e-12);
}

TEST(DecodeBeam, TopScoreNonDecreasingInWidth) {
  const Fixture s = make_fixture(Arch::stdbu, Pool::attention, 25);
  double prev = -1e300;
  for (std::size_t width = 1; width <= 6; ++width) {
    const auto beams = decode_beam(s.params, s.rec, width, 8);
    ASSERT_FALSE(beams.empty());
    EXPECT_GE(beams[0].score, prev - 1e-15) << "width " << width;
    prev = beams[0].score;
  }
}

TEST(MeanPool, AblationUsesUniformWeights) {
  const Fixture s = make_fixture(Arch::tdbu, Pool::mean, 26);
  DecoderState st = initial_state(s.dims);
  const auto [lp, trace] = tdbu_step(s.params, s.rec, s.encodings, st);
  for (double a : trace.attention) EXPECT_DOUBLE_EQ(a, 1.0 / static_cast<double>(s.encodings.size()));
}

// Gradients of a 3-step teacher-forced loss against central differences, for
// both architectures.
TEST(StepGradients, FiniteDifferenceUnderTolerance) {
  for (Arch arch : {Arch::tdbu, Arch::stdbu}) {
    Dims dims;
    dims.d = 4;
    dims.role_order = 4;
    dims.d_v = 4;
    dims.d_e = 5;
    dims.d_emb = 4;
    dims.d_h = 6;
    dims.d_att = 5;
    dims.vocab = 8;

    ToyWorldConfig cfg;
    cfg.object_vocab = 4;
    cfg.predicate_vocab = 2;
    cfg.feature_dim = 4;
    cfg.tag_dim = 0;  // 6 labels -> d_e must be 6
    cfg.triplets_min = 2;
    cfg.triplets_max = 2;
    cfg.seed = 5;
    const SceneRecord rec = generate_toy_world(cfg, 1)[0];
    dims.d_e = rec.tags.size();

    Rng rng(7);
    ModelParams model = make_model(arch, Pool::attention, dims);
    for (const auto& name : param_names(arch)) {
      Tensor& t = model.tensors.at(name);
      for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.uniform(-0.5, 0.5);
    }
    // small-magnitude dense probe of the log-probs; keeps the central
    // difference above the double-precision noise floor
    std::vector<Tensor> probes;
    for (int k = 0; k < 3; ++k) {
      Tensor r({dims.vocab});
      for (std::size_t i = 0; i < r.size(); ++i) r[i] = 0.002 * rng.gaussian();
      probes.push_back(std::move(r));
    }
    const SceneContext ctx = make_scene_context(model, rec);

    ScalarFn f = [&, arch, dims](Tape& tape, const std::map<std::string, Tensor>& tensors) -> Var {
      TapeParams tp{arch, Pool::attention, dims, {}};
      for (const auto& [name, value] : tensors) tp.w.emplace(name, tape.param(name, value));
      TapeScene sc = bind_scene(tape, ctx);
      TapeState st = initial_tape_state(tape, dims, 0);
      Var loss{};
      for (int k = 0; k < 3; ++k) {
        auto out = tpsgtr::detail::decoder_step(tape, tp, sc, st);
        Var term = tape.dot(tape.input(probes[static_cast<std::size_t>(k)]), out.log_probs);
        loss = k == 0 ? term : tape.add(loss, term);
        st.prev_token = k + 1;
      }
      return loss;
    };
    const double err = finite_difference_check(f, model.tensors, 5e-5);
    EXPECT_LT(err, 1e-4) << arch_string(arch, Pool::attention);

    // the teacher-forced loss itself, at a tolerance the double-precision
    // difference quotient can meet
    const ModelParams trained_like = init_model(arch, Pool::attention, dims, 7);
    ScalarFn g = [&, arch, dims](Tape& tape, const std::map<std::string, Tensor>& tensors) -> Var {
      TapeParams tp{arch, Pool::attention, dims, {}};
      for (const auto& [name, value] : tensors) tp.w.emplace(name, tape.param(name, value));
      TapeScene sc = bind_scene(tape, make_scene_context(trained_like, rec));
      return tpsgtr::detail::sequence_loss_node(tape, tp, sc, {3, 1, 5}, 0);
    };
    EXPECT_LT(finite_difference_check(g, trained_like.tensors, 1e-4), 1e-2)
        << arch_string(arch, Pool::attention);
  }
}
