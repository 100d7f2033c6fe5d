#pragma once

#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "tpsgtr/errors.hpp"

namespace tpsgtr {

// Flat key=value run configuration. Every key is validated against the
// schema below before any work starts; '#' begins a comment.
struct RunConfig {
  // toy-world generation
  std::size_t objects = 12;
  std::size_t predicates = 6;
  std::size_t feature_dim = 32;
  std::size_t tag_dim = 0;  // 0: one slot per label
  std::size_t triplets_min = 1;
  std::size_t triplets_max = 5;
  double noise = 0.05;
  double corruption = 0.0;
  // model sizes
  std::size_t role_order = 4;
  std::size_t d_emb = 32;
  std::size_t d_h = 64;
  std::size_t d_att = 64;
  // training
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t epochs = 30;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  double target_loss = 0.0;
  // decoding
  std::size_t beam = 1;
  std::size_t max_len = 30;
};

namespace detail {

struct ConfigKey {
  const char* name;
  std::function<void(RunConfig&, const std::string&)> apply;
};

inline std::uint64_t parse_unsigned(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    if (!value.empty() && value[0] == '-') throw std::invalid_argument("negative");
    const std::uint64_t v = std::stoull(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' needs a non-negative integer, got '" + value + "'");
  }
}

inline double parse_real(const std::string& key, const std::string& value) {
  try {
    std::size_t pos = 0;
    const double v = std::stod(value, &pos);
    if (pos != value.size()) throw std::invalid_argument("trailing characters");
    return v;
  } catch (const std::exception&) {
    throw ConfigError("key '" + key + "' needs a number, got '" + value + "'");
  }
}

inline const std::vector<ConfigKey>& config_schema() {
  static const std::vector<ConfigKey> schema = {
      {"objects", [](RunConfig& c, const std::string& v) { c.objects = parse_unsigned("objects", v); }},
      {"predicates", [](RunConfig& c, const std::string& v) { c.predicates = parse_unsigned("predicates", v); }},
      {"feature_dim", [](RunConfig& c, const std::string& v) { c.feature_dim = parse_unsigned("feature_dim", v); }},
      {"tag_dim", [](RunConfig& c, const std::string& v) { c.tag_dim = parse_unsigned("tag_dim", v); }},
      {"triplets_min", [](RunConfig& c, const std::string& v) { c.triplets_min = parse_unsigned("triplets_min", v); }},
      {"triplets_max", [](RunConfig& c, const std::string& v) { c.triplets_max = parse_unsigned("triplets_max", v); }},
      {"noise", [](RunConfig& c, const std::string& v) { c.noise = parse_real("noise", v); }},
      {"corruption", [](RunConfig& c, const std::string& v) { c.corruption = parse_real("corruption", v); }},
      {"role_order", [](RunConfig& c, const std::string& v) { c.role_order = parse_unsigned("role_order", v); }},
      {"d_emb", [](RunConfig& c, const std::string& v) { c.d_emb = parse_unsigned("d_emb", v); }},
      {"d_h", [](RunConfig& c, const std::string& v) { c.d_h = parse_unsigned("d_h", v); }},
      {"d_att", [](RunConfig& c, const std::string& v) { c.d_att = parse_unsigned("d_att", v); }},
      {"lr", [](RunConfig& c, const std::string& v) { c.lr = parse_real("lr", v); }},
      {"beta1", [](RunConfig& c, const std::string& v) { c.beta1 = parse_real("beta1", v); }},
      {"beta2", [](RunConfig& c, const std::string& v) { c.beta2 = parse_real("beta2", v); }},
      {"adam_eps", [](RunConfig& c, const std::string& v) { c.adam_eps = parse_real("adam_eps", v); }},
      {"epochs", [](RunConfig& c, const std::string& v) { c.epochs = parse_unsigned("epochs", v); }},
      {"clip_norm", [](RunConfig& c, const std::string& v) { c.clip_norm = parse_real("clip_norm", v); }},
      {"seed", [](RunConfig& c, const std::string& v) { c.seed = parse_unsigned("seed", v); }},
      {"target_loss", [](RunConfig& c, const std::string& v) { c.target_loss = parse_real("target_loss", v); }},
      {"beam", [](RunConfig& c, const std::string& v) { c.beam = parse_unsigned("beam", v); }},
      {"max_len", [](RunConfig& c, const std::string& v) { c.max_len = parse_unsigned("max_len", v); }},
  };
  return schema;
}

}  // namespace detail

inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& entry : detail::config_schema()) {
    if (key == entry.name) {
      entry.apply(cfg, value);
      return;
    }
  }
  throw ConfigError("unknown configuration key '" + key + "'");
}

inline void validate_config(const RunConfig& cfg) {
  if (cfg.objects < 1 || cfg.predicates < 1) throw ConfigError("label vocabularies must be non-empty");
  if (cfg.feature_dim < 1) throw ConfigError("feature_dim must be at least 1");
  if (cfg.triplets_min < 1 || cfg.triplets_min > cfg.triplets_max) {
    throw ConfigError("triplet range must satisfy 1 <= triplets_min <= triplets_max");
  }
  if (cfg.noise < 0.0) throw ConfigError("noise must be non-negative");
  if (cfg.corruption < 0.0 || cfg.corruption > 1.0) throw ConfigError("corruption must lie in [0, 1]");
  if (cfg.role_order < 4 || (cfg.role_order & (cfg.role_order - 1)) != 0) {
    throw ConfigError("role_order must be a power of 2, at least 4");
  }
  if (cfg.d_emb < 1 || cfg.d_h < 1 || cfg.d_att < 1) throw ConfigError("model dimensions must be positive");
  if (cfg.lr < 0.0) throw ConfigError("lr must not be negative");
  if (cfg.epochs < 1) throw ConfigError("epochs must be at least 1");
  if (cfg.beam < 1) throw ConfigError("beam must be at least 1");
  if (cfg.max_len < 1) throw ConfigError("max_len must be at least 1");
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path + "'");
  RunConfig cfg;
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto a = s.find_first_not_of(" \t\r");
    const auto b = s.find_last_not_of(" \t\r");
    return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config '" + path + "' line " + std::to_string(lineno) + ": expected key=value");
    }
    apply_config_entry(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  validate_config(cfg);
  return cfg;
}

}  // namespace tpsgtr
