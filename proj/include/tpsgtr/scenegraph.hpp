#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpsgtr/rng.hpp"
#include "tpsgtr/rolespace.hpp"
#include "tpsgtr/tensor.hpp"

namespace tpsgtr {

// One training / evaluation example.
struct SceneRecord {
  std::string id;
  std::vector<Triplet> triplets;
  Tensor tags;                           // multi-hot semantic vector
  std::optional<Tensor> global_feature;  // whole-scene feature, mean of slot vectors
  std::vector<std::vector<std::string>> captions;
};

// Candidate labelings for a scene: per-object class distributions and, for
// every unordered object pair considered, predicate distributions in both
// directions.
struct CandidateGraph {
  struct ObjectCandidate {
    Tensor feature;
    std::vector<double> class_probs;  // over object_labels
  };
  struct PairCandidate {
    Tensor union_feature;
    std::vector<double> predicate_probs;  // over predicate_labels
  };

  std::vector<std::string> object_labels;
  std::vector<std::string> predicate_labels;
  std::vector<ObjectCandidate> objects;
  std::map<std::pair<std::size_t, std::size_t>, PairCandidate> pairs;  // directed (i, j)

  void validate() const {
    auto check_dist = [](const std::vector<double>& p, const std::string& what) {
      double total = 0.0;
      for (double v : p) {
        if (v < 0.0) throw ArgumentError(what + " has a negative probability");
        total += v;
      }
      if (std::abs(total - 1.0) > 1e-9) {
        throw ArgumentError(what + " sums to " + std::to_string(total) + ", expected 1");
      }
    };
    for (std::size_t i = 0; i < objects.size(); ++i) {
      if (objects[i].class_probs.size() != object_labels.size()) {
        throw ArgumentError("object " + std::to_string(i) + " distribution size mismatch");
      }
      check_dist(objects[i].class_probs, "object " + std::to_string(i) + " distribution");
    }
    for (const auto& [key, pc] : pairs) {
      if (key.first >= objects.size() || key.second >= objects.size() || key.first == key.second) {
        throw ArgumentError("pair references invalid object index");
      }
      if (!pairs.count({key.second, key.first})) {
        throw ArgumentError("pair (" + std::to_string(key.first) + ", " + std::to_string(key.second) +
                            ") missing its reverse direction");
      }
      if (pc.predicate_probs.size() != predicate_labels.size()) {
        throw ArgumentError("pair distribution size mismatch");
      }
      check_dist(pc.predicate_probs, "pair distribution");
    }
  }
};

// A full labeling: one label per object, one per directed pair.
struct GraphAssignment {
  std::vector<std::string> object_labels;
  std::map<std::pair<std::size_t, std::size_t>, std::string> pair_labels;
};

namespace detail {

inline std::size_t label_index(const std::vector<std::string>& labels, const std::string& label,
                               const std::string& what) {
  auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw ArgumentError(what + " label '" + label + "' is not a known class");
  return static_cast<std::size_t>(it - labels.begin());
}

inline double log_or_ninf(double p) {
  return p > 0.0 ? std::log(p) : -std::numeric_limits<double>::infinity();
}

}  // namespace detail

// Log of the bidirectional likelihood: object terms plus both directed
// predicate terms per pair. A zero-probability factor yields -infinity.
inline double score_scene_graph(const CandidateGraph& g, const GraphAssignment& assignment) {
  if (assignment.object_labels.size() != g.objects.size()) {
    throw ArgumentError("assignment covers " + std::to_string(assignment.object_labels.size()) + " objects, graph has " +
                        std::to_string(g.objects.size()));
  }
  double score = 0.0;
  for (std::size_t i = 0; i < g.objects.size(); ++i) {
    const std::size_t cls = detail::label_index(g.object_labels, assignment.object_labels[i], "object");
    score += detail::log_or_ninf(g.objects[i].class_probs[cls]);
  }
  for (const auto& [key, pc] : g.pairs) {
    auto it = assignment.pair_labels.find(key);
    if (it == assignment.pair_labels.end()) {
      throw ArgumentError("assignment missing pair (" + std::to_string(key.first) + ", " +
                          std::to_string(key.second) + ")");
    }
    const std::size_t cls = detail::label_index(g.predicate_labels, it->second, "predicate");
    score += detail::log_or_ninf(pc.predicate_probs[cls]);
  }
  return score;
}

// Highest-likelihood labeling of one directed pair: independent argmax over
// subject class, predicate class and object class.
inline std::vector<Triplet> select_triplets(const CandidateGraph& g, std::size_t k_max) {
  if (k_max < 1) throw ArgumentError("k_max must be at least 1");
  if (g.objects.empty() || g.pairs.empty()) throw ArgumentError("select_triplets on an empty graph");

  auto argmax = [](const std::vector<double>& p) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
      if (p[i] > p[best]) best = i;
    return best;
  };

  struct Ranked {
    double score;
    std::size_t order;  // map iteration position, for deterministic ties
    Triplet triplet;
  };
  std::vector<Ranked> ranked;
  std::size_t order = 0;
  for (const auto& [key, pc] : g.pairs) {
    const auto [i, j] = key;
    const std::size_t si = argmax(g.objects[i].class_probs);
    const std::size_t pi = argmax(pc.predicate_probs);
    const std::size_t oi = argmax(g.objects[j].class_probs);
    const double score = detail::log_or_ninf(g.objects[i].class_probs[si]) +
                         detail::log_or_ninf(pc.predicate_probs[pi]) +
                         detail::log_or_ninf(g.objects[j].class_probs[oi]);
    Triplet t;
    t.subject = g.objects[i].feature;
    t.predicate = pc.union_feature;
    t.object = g.objects[j].feature;
    t.labels = {g.object_labels[si], g.predicate_labels[pi], g.object_labels[oi]};
    ranked.push_back({score, order++, std::move(t)});
  }
  std::sort(ranked.begin(), ranked.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.order < b.order;
  });
  if (ranked.size() > k_max) ranked.resize(k_max);
  std::vector<Triplet> out;
  out.reserve(ranked.size());
  for (auto& r : ranked) out.push_back(std::move(r.triplet));
  return out;
}

// Synthetic scene generator standing in for an external scene-graph
// predictor: fixed per-label embeddings, Gaussian feature noise, templated
// captions, multi-hot tags, and a mean-of-slots global feature.
struct ToyWorldConfig {
  std::size_t object_vocab = 12;
  std::size_t predicate_vocab = 6;
  std::size_t feature_dim = 32;
  std::size_t tag_dim = 0;  // 0: exactly the label count
  std::size_t triplets_min = 1;
  std::size_t triplets_max = 5;
  std::size_t max_triplets = 15;
  double noise_scale = 0.05;
  double corruption_rate = 0.0;  // chance a triplet's observed labels are resampled
  std::uint64_t seed = 1;

  void validate() const {
    if (object_vocab < 1 || predicate_vocab < 1) throw ArgumentError("label vocabularies must be non-empty");
    if (feature_dim < 1) throw ArgumentError("feature_dim must be at least 1");
    if (triplets_min < 1 || triplets_min > triplets_max || triplets_max > max_triplets) {
      throw ArgumentError("triplet range [" + std::to_string(triplets_min) + ", " + std::to_string(triplets_max) +
                          "] must lie within [1, " + std::to_string(max_triplets) + "]");
    }
    if (noise_scale < 0.0) throw ArgumentError("noise_scale must be non-negative");
    if (corruption_rate < 0.0 || corruption_rate > 1.0) throw ArgumentError("corruption_rate must be in [0, 1]");
    if (tag_dim != 0 && tag_dim < object_vocab + predicate_vocab) {
      throw ArgumentError("tag_dim " + std::to_string(tag_dim) + " smaller than label count " +
                          std::to_string(object_vocab + predicate_vocab));
    }
  }

  std::size_t effective_tag_dim() const { return tag_dim == 0 ? object_vocab + predicate_vocab : tag_dim; }
};

inline std::string object_label(std::size_t i) { return "obj" + std::to_string(i); }
inline std::string predicate_label(std::size_t i) { return "rel" + std::to_string(i); }

// Objects first, then predicates.
inline std::vector<std::string> tag_vocabulary(const ToyWorldConfig& cfg) {
  std::vector<std::string> vocab;
  vocab.reserve(cfg.object_vocab + cfg.predicate_vocab);
  for (std::size_t i = 0; i < cfg.object_vocab; ++i) vocab.push_back(object_label(i));
  for (std::size_t i = 0; i < cfg.predicate_vocab; ++i) vocab.push_back(predicate_label(i));
  return vocab;
}

// Multi-hot tag vector: 1 at the index of every label present on a triplet.
inline Tensor make_semantic_tags(const SceneRecord& rec, const std::vector<std::string>& tag_vocab,
                                 std::size_t dim = 0) {
  if (dim == 0) dim = tag_vocab.size();
  if (dim < tag_vocab.size()) throw ArgumentError("tag dimension smaller than tag vocabulary");
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < tag_vocab.size(); ++i) index[tag_vocab[i]] = i;
  Tensor tags({dim});
  for (const auto& t : rec.triplets) {
    for (const auto& label : t.labels) {
      auto it = index.find(label);
      if (it == index.end()) throw ArgumentError("label '" + label + "' not in tag vocabulary");
      tags[it->second] = 1.0;
    }
  }
  return tags;
}

namespace detail {

// Per-label embeddings drawn once from the seed's embedding stream.
struct ToyEmbeddings {
  std::vector<Tensor> objects;
  std::vector<Tensor> predicates;

  static ToyEmbeddings make(const ToyWorldConfig& cfg) {
    Rng rng(mix_seed(cfg.seed, 0));
    ToyEmbeddings e;
    auto draw = [&](std::size_t count) {
      std::vector<Tensor> out;
      out.reserve(count);
      for (std::size_t i = 0; i < count; ++i) {
        Tensor t({cfg.feature_dim});
        for (std::size_t k = 0; k < cfg.feature_dim; ++k) t[k] = rng.gaussian();
        out.push_back(std::move(t));
      }
      return out;
    };
    e.objects = draw(cfg.object_vocab);
    e.predicates = draw(cfg.predicate_vocab);
    return e;
  }
};

inline Tensor noisy(const Tensor& base, double scale, Rng& rng) {
  Tensor out = base;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += scale * rng.gaussian();
  return out;
}

inline SceneRecord generate_scene(const ToyWorldConfig& cfg, const ToyEmbeddings& emb, std::size_t index) {
  Rng rng(mix_seed(cfg.seed, 1 + index));
  const std::size_t count = cfg.triplets_min + rng.uniform_index(cfg.triplets_max - cfg.triplets_min + 1);

  struct Spo {
    std::size_t s, p, o;
  };
  std::vector<Spo> truth(count), observed(count);
  for (std::size_t k = 0; k < count; ++k) {
    truth[k] = {rng.uniform_index(cfg.object_vocab), rng.uniform_index(cfg.predicate_vocab),
                rng.uniform_index(cfg.object_vocab)};
    observed[k] = truth[k];
    if (cfg.corruption_rate > 0.0 && rng.uniform() < cfg.corruption_rate) {
      observed[k] = {rng.uniform_index(cfg.object_vocab), rng.uniform_index(cfg.predicate_vocab),
                     rng.uniform_index(cfg.object_vocab)};
    }
  }

  SceneRecord rec;
  rec.id = "scene-" + std::to_string(index);
  rec.triplets.reserve(count);
  Tensor mean({cfg.feature_dim});
  for (std::size_t k = 0; k < count; ++k) {
    Triplet t;
    t.subject = noisy(emb.objects[observed[k].s], cfg.noise_scale, rng);
    t.predicate = noisy(emb.predicates[observed[k].p], cfg.noise_scale, rng);
    t.object = noisy(emb.objects[observed[k].o], cfg.noise_scale, rng);
    t.labels = {object_label(observed[k].s), predicate_label(observed[k].p), object_label(observed[k].o)};
    for (std::size_t i = 0; i < cfg.feature_dim; ++i) {
      mean[i] += t.subject[i] + t.predicate[i] + t.object[i];
    }
    rec.triplets.push_back(std::move(t));
  }
  rec.global_feature = scale(mean, 1.0 / static_cast<double>(3 * count));
  rec.tags = make_semantic_tags(rec, tag_vocabulary(cfg), cfg.effective_tag_dim());

  // Caption comes from the true labels, so corrupted features keep clean
  // references.
  std::vector<std::string> caption;
  for (std::size_t k = 0; k < count; ++k) {
    if (k) caption.push_back("and");
    caption.push_back("a");
    caption.push_back(object_label(truth[k].s));
    caption.push_back(predicate_label(truth[k].p));
    caption.push_back("a");
    caption.push_back(object_label(truth[k].o));
  }
  rec.captions.push_back(std::move(caption));
  return rec;
}

}  // namespace detail

// Pure function of (cfg, n_scenes, start_index): scene i draws from its own
// seed stream, so any contiguous range regenerates independently.
inline std::vector<SceneRecord> generate_toy_world(const ToyWorldConfig& cfg, std::size_t n_scenes,
                                                   std::size_t start_index = 0) {
  cfg.validate();
  const auto emb = detail::ToyEmbeddings::make(cfg);
  std::vector<SceneRecord> out;
  out.reserve(n_scenes);
  for (std::size_t i = 0; i < n_scenes; ++i) {
    out.push_back(detail::generate_scene(cfg, emb, start_index + i));
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON Lines dataset serialization

inline nlohmann::json record_to_json(const SceneRecord& rec) {
  nlohmann::json j;
  j["id"] = rec.id;
  j["triplets"] = nlohmann::json::array();
  for (const auto& t : rec.triplets) {
    j["triplets"].push_back({{"s", t.subject.data()},
                             {"p", t.predicate.data()},
                             {"o", t.object.data()},
                             {"labels", std::vector<std::string>(t.labels.begin(), t.labels.end())}});
  }
  j["tags"] = rec.tags.data();
  if (rec.global_feature) {
    j["global_feature"] = rec.global_feature->data();
  } else {
    j["global_feature"] = nullptr;
  }
  j["captions"] = rec.captions;
  return j;
}

inline SceneRecord record_from_json(const nlohmann::json& j) {
  SceneRecord rec;
  rec.id = j.at("id").get<std::string>();
  for (const auto& tj : j.at("triplets")) {
    Triplet t;
    t.subject = Tensor::vector(tj.at("s").get<std::vector<double>>());
    t.predicate = Tensor::vector(tj.at("p").get<std::vector<double>>());
    t.object = Tensor::vector(tj.at("o").get<std::vector<double>>());
    const auto labels = tj.at("labels").get<std::vector<std::string>>();
    if (labels.size() != 3) throw CorruptFileError("triplet labels must have exactly 3 entries");
    std::copy(labels.begin(), labels.end(), t.labels.begin());
    rec.triplets.push_back(std::move(t));
  }
  if (rec.triplets.empty()) throw CorruptFileError("record '" + rec.id + "' has no triplets");
  rec.tags = Tensor::vector(j.at("tags").get<std::vector<double>>());
  if (j.contains("global_feature") && !j.at("global_feature").is_null()) {
    rec.global_feature = Tensor::vector(j.at("global_feature").get<std::vector<double>>());
  }
  rec.captions = j.at("captions").get<std::vector<std::vector<std::string>>>();
  if (rec.captions.empty()) throw CorruptFileError("record '" + rec.id + "' has no captions");
  for (const auto& c : rec.captions) {
    if (c.empty()) throw CorruptFileError("record '" + rec.id + "' has an empty caption");
  }
  return rec;
}

inline void write_dataset(const std::string& path, const std::vector<SceneRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  for (const auto& rec : records) {
    out << record_to_json(rec).dump() << "\n";
  }
  if (!out) throw IoError("failed writing dataset to '" + path + "'");
}

inline std::vector<SceneRecord> read_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open dataset '" + path + "'");
  std::vector<SceneRecord> records;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw CorruptFileError("dataset '" + path + "' line " + std::to_string(lineno) + " is not valid JSON");
    }
    try {
      records.push_back(record_from_json(j));
    } catch (const nlohmann::json::exception& e) {
      throw CorruptFileError("dataset '" + path + "' line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return records;
}

}  // namespace tpsgtr
