#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "tpsgtr/decoder.hpp"
#include "tpsgtr/vocab.hpp"

namespace tpsgtr {

using TokenSeq = std::vector<std::string>;

namespace detail {

inline std::map<std::string, std::size_t> ngram_counts(const TokenSeq& seq, std::size_t n) {
  std::map<std::string, std::size_t> counts;
  if (seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) {
    std::string key;
    for (std::size_t k = 0; k < n; ++k) {
      if (k) key += '\x1f';
      key += seq[i + k];
    }
    counts[key] += 1;
  }
  return counts;
}

// Reference length closest to the candidate length; ties go to the shorter.
inline std::size_t closest_ref_length(std::size_t cand_len, const std::vector<TokenSeq>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto diff = [&](std::size_t len) {
      return len > cand_len ? len - cand_len : cand_len - len;
    };
    if (diff(r.size()) < diff(best) || (diff(r.size()) == diff(best) && r.size() < best)) {
      best = r.size();
    }
  }
  return best;
}

}  // namespace detail

// Corpus BLEU-n: pooled clipped n-gram precisions, geometric mean over orders
// 1..n, brevity penalty min(1, e^(1 - r/c)). An order with no candidate
// n-grams anywhere in the corpus is skipped, so a corpus of exact copies
// scores 1 even when every candidate is shorter than n.
inline double bleu_n(const std::vector<TokenSeq>& candidates, const std::vector<std::vector<TokenSeq>>& references,
                     int n) {
  if (n < 1 || n > 4) throw ArgumentError("BLEU order must lie in 1..4");
  if (candidates.empty()) throw ArgumentError("BLEU needs at least one candidate");
  if (references.size() != candidates.size()) {
    throw ArgumentError("BLEU needs one reference set per candidate");
  }
  for (const auto& refs : references) {
    if (refs.empty()) throw ArgumentError("every candidate needs at least one reference");
  }

  std::size_t cand_total = 0, ref_total = 0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cand_total += candidates[i].size();
    ref_total += detail::closest_ref_length(candidates[i].size(), references[i]);
  }
  if (cand_total == 0) return 0.0;

  double log_prec_sum = 0.0;
  for (int order = 1; order <= n; ++order) {
    std::size_t matched = 0, total = 0;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      const auto cand_counts = detail::ngram_counts(candidates[i], static_cast<std::size_t>(order));
      std::map<std::string, std::size_t> max_ref;
      for (const auto& ref : references[i]) {
        for (const auto& [gram, count] : detail::ngram_counts(ref, static_cast<std::size_t>(order))) {
          max_ref[gram] = std::max(max_ref[gram], count);
        }
      }
      for (const auto& [gram, count] : cand_counts) {
        total += count;
        auto it = max_ref.find(gram);
        if (it != max_ref.end()) matched += std::min(count, it->second);
      }
    }
    if (total == 0) continue;  // no n-grams of this order exist; skip it
    if (matched == 0) return 0.0;
    log_prec_sum += std::log(static_cast<double>(matched) / static_cast<double>(total));
  }

  const double bp = std::min(1.0, std::exp(1.0 - static_cast<double>(ref_total) / static_cast<double>(cand_total)));
  return bp * std::exp(log_prec_sum / static_cast<double>(n));
}

inline std::size_t lcs_length(const TokenSeq& a, const TokenSeq& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline constexpr double kRougeBeta = 1.2;

// LCS F-measure for one candidate against one reference.
inline double rouge_l_pair(const TokenSeq& cand, const TokenSeq& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(cand, ref));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(cand.size());
  const double r = lcs / static_cast<double>(ref.size());
  const double b2 = kRougeBeta * kRougeBeta;
  return (1.0 + b2) * p * r / (r + b2 * p);
}

// Corpus ROUGE-L: per candidate, the best F over its references; corpus mean.
inline double rouge_l(const std::vector<TokenSeq>& candidates, const std::vector<std::vector<TokenSeq>>& references) {
  if (candidates.empty()) throw ArgumentError("ROUGE-L needs at least one candidate");
  if (references.size() != candidates.size()) {
    throw ArgumentError("ROUGE-L needs one reference set per candidate");
  }
  double total = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (references[i].empty()) throw ArgumentError("every candidate needs at least one reference");
    double best = 0.0;
    for (const auto& ref : references[i]) best = std::max(best, rouge_l_pair(candidates[i], ref));
    total += best;
  }
  return total / static_cast<double>(candidates.size());
}

struct MetricReport {
  double bleu_1 = 0.0, bleu_2 = 0.0, bleu_3 = 0.0, bleu_4 = 0.0;
  double rouge_l = 0.0;
  struct Example {
    std::string id;
    TokenSeq candidate;
    std::size_t reference_count = 0;
    double rouge_l = 0.0;
  };
  std::vector<Example> per_example;
  std::size_t num_candidates = 0;
  std::size_t num_references = 0;
};

struct DecodeConfig {
  std::size_t beam = 1;
  std::size_t max_len = 30;
};

namespace detail {

inline TokenSeq decode_record(const ModelParams& params, const Vocab& vocab, const SceneRecord& rec,
                              const DecodeConfig& cfg) {
  std::vector<int> ids;
  if (cfg.beam <= 1) {
    ids = decode_greedy(params, rec, cfg.max_len, vocab.bos(), vocab.eos());
  } else {
    auto ranked = decode_beam(params, rec, cfg.beam, cfg.max_len, vocab.bos(), vocab.eos());
    if (!ranked.empty()) ids = ranked.front().tokens;
  }
  TokenSeq tokens;
  tokens.reserve(ids.size());
  for (int id : ids) tokens.push_back(vocab.word(id));
  return tokens;
}

}  // namespace detail

// Decodes every record and scores the corpus. Per-record decoding may run on
// `threads` workers; results land in per-record slots, so the report does not
// depend on the thread count.
inline MetricReport evaluate(const ModelParams& params, const Vocab& vocab, const std::vector<SceneRecord>& records,
                             const DecodeConfig& cfg, std::size_t threads = 1) {
  if (records.empty()) throw ArgumentError("evaluation needs a non-empty dataset");
  params.validate();
  if (params.dims.vocab != vocab.size()) {
    throw MismatchError("model vocabulary size " + std::to_string(params.dims.vocab) +
                        " does not match token table of " + std::to_string(vocab.size()));
  }

  std::vector<TokenSeq> candidates(records.size());
  if (threads <= 1) {
    for (std::size_t i = 0; i < records.size(); ++i) {
      candidates[i] = detail::decode_record(params, vocab, records[i], cfg);
    }
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        try {
          for (std::size_t i = next.fetch_add(1); i < records.size(); i = next.fetch_add(1)) {
            candidates[i] = detail::decode_record(params, vocab, records[i], cfg);
          }
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  std::vector<std::vector<TokenSeq>> references;
  references.reserve(records.size());
  for (const auto& rec : records) references.push_back(rec.captions);

  MetricReport report;
  report.bleu_1 = bleu_n(candidates, references, 1);
  report.bleu_2 = bleu_n(candidates, references, 2);
  report.bleu_3 = bleu_n(candidates, references, 3);
  report.bleu_4 = bleu_n(candidates, references, 4);
  report.rouge_l = rouge_l(candidates, references);
  report.num_candidates = records.size();
  for (std::size_t i = 0; i < records.size(); ++i) {
    MetricReport::Example ex;
    ex.id = records[i].id;
    ex.candidate = candidates[i];
    ex.reference_count = records[i].captions.size();
    double best = 0.0;
    for (const auto& ref : records[i].captions) best = std::max(best, rouge_l_pair(candidates[i], ref));
    ex.rouge_l = best;
    report.per_example.push_back(std::move(ex));
    report.num_references += records[i].captions.size();
  }
  return report;
}

inline nlohmann::json report_to_json(const MetricReport& report) {
  nlohmann::json j;
  j["bleu_1"] = report.bleu_1;
  j["bleu_2"] = report.bleu_2;
  j["bleu_3"] = report.bleu_3;
  j["bleu_4"] = report.bleu_4;
  j["rouge_l"] = report.rouge_l;
  j["corpus"] = {{"num_candidates", report.num_candidates}, {"num_references", report.num_references}};
  j["per_example"] = nlohmann::json::array();
  for (const auto& ex : report.per_example) {
    j["per_example"].push_back({{"id", ex.id},
                                {"candidate", ex.candidate},
                                {"reference_count", ex.reference_count},
                                {"rouge_l", ex.rouge_l}});
  }
  return j;
}

}  // namespace tpsgtr
