#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpsgtr/decoder.hpp"
#include "tpsgtr/vocab.hpp"

namespace tpsgtr {

struct TrainConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 30;
  double clip_norm = 5.0;  // 0 disables clipping
  std::uint64_t seed = 1;
  double target_loss = 0.0;  // stop once the epoch loss drops below; 0 disables
  Arch arch = Arch::tdbu;
  Pool pool = Pool::attention;
  // model sizes; d, d_v, d_e and vocab come from the data
  std::size_t role_order = 4;
  std::size_t d_emb = 32;
  std::size_t d_h = 64;
  std::size_t d_att = 64;

  void validate() const {
    if (lr < 0.0) throw ConfigError("learning rate must not be negative");
    if (clip_norm < 0.0) throw ConfigError("clip norm must be positive or 0 to disable");
    if (epochs < 1) throw ConfigError("epochs must be at least 1");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) {
      throw ConfigError("moment decays must lie in [0, 1)");
    }
    if (adam_eps <= 0.0) throw ConfigError("optimizer epsilon must be positive");
  }
};

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  int format_version = kCheckpointVersion;
  Arch arch = Arch::tdbu;
  Pool pool = Pool::attention;
  Dims dims;
  std::vector<std::string> vocab;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  std::map<std::string, Tensor> tensors;

  ModelParams to_model() const {
    ModelParams p;
    p.arch = arch;
    p.pool = pool;
    p.dims = dims;
    p.tensors = tensors;
    p.validate();
    return p;
  }

  static Checkpoint from_model(const ModelParams& params, std::vector<std::string> vocab, std::uint64_t seed,
                               std::size_t epoch) {
    Checkpoint c;
    c.arch = params.arch;
    c.pool = params.pool;
    c.dims = params.dims;
    c.vocab = std::move(vocab);
    c.seed = seed;
    c.epoch = epoch;
    c.tensors = params.tensors;
    return c;
  }
};

// ---------------------------------------------------------------------------
// Loss

namespace detail {

// Teacher-forced negative log-likelihood, averaged over the caption tokens
// plus the closing <eos> step.
inline Var sequence_loss_node(Tape& t, const TapeParams& tp, const TapeScene& sc, const std::vector<int>& targets,
                              int bos) {
  TapeState st = initial_tape_state(t, tp.dims, bos);
  Var total{};
  for (std::size_t k = 0; k < targets.size(); ++k) {
    TapeStepOut out = decoder_step(t, tp, sc, st);
    Var nll = t.scale(t.pick(out.log_probs, static_cast<std::size_t>(targets[k])), -1.0);
    total = (k == 0) ? nll : t.add(total, nll);
    st.prev_token = targets[k];
  }
  return t.scale(total, 1.0 / static_cast<double>(targets.size()));
}

inline std::vector<int> caption_targets(const std::vector<std::string>& caption, const Vocab& vocab) {
  if (caption.empty()) throw ArgumentError("caption must be non-empty");
  std::vector<int> ids;
  ids.reserve(caption.size() + 1);
  for (const auto& tok : caption) ids.push_back(vocab.id(tok));
  ids.push_back(vocab.eos());
  return ids;
}

}  // namespace detail

// Mean over time steps of -log Pr(token) under teacher forcing; the gold
// previous token is fed at every step and <eos> closes the target sequence.
inline double sequence_loss(const ModelParams& params, const SceneRecord& rec,
                            const std::vector<std::string>& caption, const Vocab& vocab) {
  Tape t;
  TapeParams tp = bind_params(t, params, false);
  TapeScene sc = bind_scene(t, make_scene_context(params, rec));
  Var loss = detail::sequence_loss_node(t, tp, sc, detail::caption_targets(caption, vocab), vocab.bos());
  return t.value(loss)[0];
}

// ---------------------------------------------------------------------------
// Optimizer

struct AdamState {
  std::map<std::string, Tensor> m;
  std::map<std::string, Tensor> v;
  std::size_t step = 0;

  static AdamState for_model(const ModelParams& params) {
    AdamState s;
    for (const auto& [name, tensor] : params.tensors) {
      s.m.emplace(name, Tensor(tensor.shape()));
      s.v.emplace(name, Tensor(tensor.shape()));
    }
    return s;
  }
};

// Scales gradients so the global norm does not exceed clip_norm; direction is
// preserved. Returns the pre-clip norm.
inline double clip_gradients(GradientMap& grads, double clip_norm) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) sq += dot(g, g);
  const double total = std::sqrt(sq);
  if (clip_norm > 0.0 && total > clip_norm) {
    const double factor = clip_norm / total;
    for (auto& [name, g] : grads) g = scale(g, factor);
  }
  return total;
}

// Bias-corrected adaptive-moment update.
inline void adam_update(ModelParams& params, const GradientMap& grads, AdamState& state, const TrainConfig& cfg) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (auto& [name, tensor] : params.tensors) {
    auto git = grads.find(name);
    if (git == grads.end()) throw ContractError("gradient map missing parameter '" + name + "'");
    const Tensor& g = git->second;
    require_same_shape(tensor, g, "adam_update");
    Tensor& m = state.m.at(name);
    Tensor& v = state.v.at(name);
    for (std::size_t i = 0; i < tensor.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      tensor[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<double> epoch_losses;
};

// Per-example updates in a seed-derived order; pure function of (data, cfg).
// The optional epoch callback receives (epoch, mean loss) as losses are
// produced.
inline TrainResult train(const std::vector<SceneRecord>& data, const TrainConfig& cfg,
                         const std::function<void(std::size_t, double)>& on_epoch = {}) {
  cfg.validate();
  if (data.empty()) throw ArgumentError("training needs a non-empty dataset");

  const Vocab vocab = Vocab::build(data);
  Dims dims;
  dims.d = data.front().triplets.front().dim();
  dims.role_order = cfg.role_order;
  dims.d_v = data.front().global_feature ? data.front().global_feature->size() : 0;
  dims.d_e = data.front().tags.size();
  dims.d_emb = cfg.d_emb;
  dims.d_h = cfg.d_h;
  dims.d_att = cfg.d_att;
  dims.vocab = vocab.size();

  // consistency across records, before any work
  for (const auto& rec : data) {
    if (rec.triplets.empty()) throw ArgumentError("record '" + rec.id + "' has no triplets");
    for (const auto& t : rec.triplets) {
      if (t.dim() != dims.d) throw MismatchError("record '" + rec.id + "' mixes filler dimensions");
    }
    if (rec.tags.size() != dims.d_e) throw MismatchError("record '" + rec.id + "' tag dimension differs");
    const std::size_t dv = rec.global_feature ? rec.global_feature->size() : 0;
    if (dv != dims.d_v) throw MismatchError("record '" + rec.id + "' global feature dimension differs");
    if (cfg.arch == Arch::tdbu && !rec.global_feature) {
      throw ArgumentError("record '" + rec.id + "' has no global feature; TDBU needs one");
    }
    for (const auto& caption : rec.captions) {
      for (const auto& tok : caption) vocab.id(tok);  // throws on unknown
    }
  }

  ModelParams params = init_model(cfg.arch, cfg.pool, dims, cfg.seed);
  AdamState adam = AdamState::for_model(params);

  // scene contexts are loss-invariant; compute once
  std::vector<SceneContext> contexts;
  contexts.reserve(data.size());
  std::vector<std::vector<int>> targets;
  targets.reserve(data.size());
  for (const auto& rec : data) {
    contexts.push_back(make_scene_context(params, rec));
    targets.push_back(detail::caption_targets(rec.captions.front(), vocab));
  }

  std::vector<double> losses;
  std::size_t epoch = 0;
  for (; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(mix_seed(cfg.seed, 0x5EED + epoch));
    shuffle_rng.shuffle(order);

    // per-index accumulation keeps the reported loss independent of the
    // shuffle order
    std::vector<double> example_loss(data.size(), 0.0);
    for (std::size_t idx : order) {
      Tape t;
      TapeParams tp = bind_params(t, params, true);
      TapeScene sc = bind_scene(t, contexts[idx]);
      Var loss = detail::sequence_loss_node(t, tp, sc, targets[idx], vocab.bos());
      const double value = t.value(loss)[0];
      if (!std::isfinite(value)) {
        throw DivergenceError("loss became non-finite at epoch " + std::to_string(epoch + 1));
      }
      example_loss[idx] = value * static_cast<double>(targets[idx].size());
      GradientMap grads = t.backward(loss);
      clip_gradients(grads, cfg.clip_norm);
      adam_update(params, grads, adam, cfg);
    }
    double total = 0.0;
    std::size_t tokens = 0;
    for (std::size_t i = 0; i < data.size(); ++i) {
      total += example_loss[i];
      tokens += targets[i].size();
    }
    const double epoch_loss = total / static_cast<double>(tokens);
    losses.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch + 1, epoch_loss);
    if (cfg.target_loss > 0.0 && epoch_loss < cfg.target_loss) {
      ++epoch;
      break;
    }
  }

  TrainResult result;
  result.checkpoint = Checkpoint::from_model(params, vocab.words, cfg.seed, epoch);
  result.epoch_losses = std::move(losses);
  return result;
}

// ---------------------------------------------------------------------------
// Checkpoint persistence (JSON, round-trip-exact decimal serialization)

inline void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  nlohmann::json j;
  j["format_version"] = ckpt.format_version;
  j["arch"] = arch_string(ckpt.arch, ckpt.pool);
  j["dims"] = {{"d", ckpt.dims.d},         {"role_order", ckpt.dims.role_order}, {"d_v", ckpt.dims.d_v},
               {"d_e", ckpt.dims.d_e},     {"d_emb", ckpt.dims.d_emb},           {"d_h", ckpt.dims.d_h},
               {"d_att", ckpt.dims.d_att}, {"vocab", ckpt.dims.vocab}};
  j["vocab"] = ckpt.vocab;
  j["seed"] = ckpt.seed;
  j["epoch"] = ckpt.epoch;
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, tensor] : ckpt.tensors) {
    params[name] = {{"shape", tensor.shape()}, {"data", tensor.data()}};
  }
  j["params"] = std::move(params);

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("failed writing checkpoint to '" + path + "'");
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  nlohmann::json j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) throw CorruptFileError("checkpoint '" + path + "' is not valid JSON");

  Checkpoint ckpt;
  try {
    ckpt.format_version = j.at("format_version").get<int>();
    if (ckpt.format_version != kCheckpointVersion) {
      throw VersionError("checkpoint format version " + std::to_string(ckpt.format_version) +
                         " not supported; this build reads version " + std::to_string(kCheckpointVersion));
    }
    auto [arch, pool] = parse_arch(j.at("arch").get<std::string>());
    ckpt.arch = arch;
    ckpt.pool = pool;
    const auto& dj = j.at("dims");
    ckpt.dims.d = dj.at("d").get<std::size_t>();
    ckpt.dims.role_order = dj.at("role_order").get<std::size_t>();
    ckpt.dims.d_v = dj.at("d_v").get<std::size_t>();
    ckpt.dims.d_e = dj.at("d_e").get<std::size_t>();
    ckpt.dims.d_emb = dj.at("d_emb").get<std::size_t>();
    ckpt.dims.d_h = dj.at("d_h").get<std::size_t>();
    ckpt.dims.d_att = dj.at("d_att").get<std::size_t>();
    ckpt.dims.vocab = dj.at("vocab").get<std::size_t>();
    ckpt.vocab = j.at("vocab").get<std::vector<std::string>>();
    ckpt.seed = j.at("seed").get<std::uint64_t>();
    ckpt.epoch = j.at("epoch").get<std::size_t>();
    for (const auto& [name, pj] : j.at("params").items()) {
      Shape shape = pj.at("shape").get<Shape>();
      std::vector<double> data = pj.at("data").get<std::vector<double>>();
      if (Tensor::count(shape) != data.size()) {
        throw MismatchError("parameter '" + name + "' data length does not match its shape");
      }
      ckpt.tensors.emplace(name, Tensor(std::move(shape), std::move(data)));
    }
  } catch (const nlohmann::json::exception& e) {
    throw CorruptFileError("checkpoint '" + path + "' is malformed: " + e.what());
  }

  // full shape validation against the dims record
  ckpt.to_model();
  return ckpt;
}

}  // namespace tpsgtr
