#pragma once

// Evaluation metrics and the cluster-based ranking of systems across languages.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "json.hpp"

#include "eurobert/rng.hpp"

namespace eurobert {

class EvalError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Per-example metrics

/// Linear gains, log2(i + 1) discount with 1-based positions.
inline double ndcg_at_k(const std::vector<std::string>& ranked, const std::map<std::string, double>& relevance, std::size_t k = 10) {
  if (k == 0) throw EvalError("ndcg_at_k: k must be at least 1");
  double dcg = 0.0;
  std::set<std::string> seen;
  std::size_t pos = 0;
  for (const auto& id : ranked) {
    if (pos == k) break;
    if (!seen.insert(id).second) continue;
    ++pos;
    if (auto it = relevance.find(id); it != relevance.end()) dcg += it->second / std::log2(static_cast<double>(pos) + 1.0);
  }
  std::vector<double> gains;
  for (const auto& [id, rel] : relevance)
    if (rel > 0.0) gains.push_back(rel);
  std::sort(gains.rbegin(), gains.rend());
  double ideal = 0.0;
  for (std::size_t i = 0; i < gains.size() && i < k; ++i) ideal += gains[i] / std::log2(static_cast<double>(i) + 2.0);
  return ideal > 0.0 ? dcg / ideal : 0.0;
}

/// 1-based ranks, tied values share the average of the positions they span.
inline std::vector<double> average_ranks(const std::vector<double>& x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

inline double pearson(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw EvalError("pearson: vectors differ in length");
  if (x.size() < 2) throw EvalError("pearson: need at least two observations");
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw EvalError("correlation is undefined for a constant vector");
  return sxy / std::sqrt(sxx * syy);
}

inline double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw EvalError("spearman: vectors differ in length");
  if (x.size() < 2) throw EvalError("spearman: need at least two observations");
  return pearson(average_ranks(x), average_ranks(y));
}

struct Entity {
  std::size_t begin = 0;
  std::size_t end = 0;
  std::string label;
  auto operator<=>(const Entity&) const = default;
};

struct PrfScore {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t true_positive = 0;
  std::size_t predicted = 0;
  std::size_t gold = 0;
};

/// Micro-averaged over all examples; exact (span, label) matches only.
/// With nothing predicted and nothing gold every rate is 1.
inline PrfScore entity_prf(const std::vector<std::vector<Entity>>& predicted, const std::vector<std::vector<Entity>>& gold) {
  if (predicted.size() != gold.size()) throw EvalError("entity F1: prediction and gold lists are not aligned");
  PrfScore s;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    const std::set<Entity> g(gold[i].begin(), gold[i].end());
    const std::set<Entity> p(predicted[i].begin(), predicted[i].end());
    s.gold += g.size();
    s.predicted += p.size();
    for (const auto& e : p) s.true_positive += g.count(e);
  }
  if (s.gold == 0 && s.predicted == 0) {
    s.precision = s.recall = s.f1 = 1.0;
    return s;
  }
  const auto tp = static_cast<double>(s.true_positive);
  s.precision = s.predicted ? tp / static_cast<double>(s.predicted) : 0.0;
  s.recall = s.gold ? tp / static_cast<double>(s.gold) : 0.0;
  s.f1 = (s.precision + s.recall) > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

inline double f1_entity(const std::vector<std::vector<Entity>>& predicted, const std::vector<std::vector<Entity>>& gold) {
  return entity_prf(predicted, gold).f1;
}

template <class L>
double accuracy(const std::vector<L>& predicted, const std::vector<L>& gold) {
  if (predicted.size() != gold.size()) throw EvalError("accuracy: prediction and gold lists are not aligned");
  if (gold.empty()) throw EvalError("accuracy: no examples");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gold.size(); ++i) hit += predicted[i] == gold[i];
  return static_cast<double>(hit) / static_cast<double>(gold.size());
}

// ---------------------------------------------------------------------------
// Score tables

/// Per-example scores for every (system, language). Example ids align the
/// vectors so that paired resampling compares like with like.
class ScoreTable {
 public:
  void add(const std::string& system, const std::string& language, const std::string& example_id, double score) {
    if (!std::isfinite(score)) throw EvalError("non-finite score for " + system + "/" + language + "/" + example_id);
    if (std::find(systems_.begin(), systems_.end(), system) == systems_.end()) systems_.push_back(system);
    if (std::find(languages_.begin(), languages_.end(), language) == languages_.end()) languages_.push_back(language);
    auto& cell = cells_[{system, language}];
    if (!cell.emplace(example_id, score).second) throw EvalError("duplicate example " + example_id + " for " + system + "/" + language);
  }

  /// Adds a whole aligned vector with example ids "0", "1", ...
  void add_vector(const std::string& system, const std::string& language, const std::vector<double>& scores) {
    for (std::size_t i = 0; i < scores.size(); ++i) add(system, language, pad_id(i), scores[i]);
  }

  const std::vector<std::string>& systems() const { return systems_; }
  const std::vector<std::string>& languages() const { return languages_; }
  bool has(const std::string& system, const std::string& language) const { return cells_.count({system, language}) > 0; }

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    for (const auto& lang : languages_) {
      const std::map<std::string, double>* first = nullptr;
      std::string first_sys;
      for (const auto& sys : systems_) {
        auto it = cells_.find({sys, lang});
        if (it == cells_.end()) {
          p.push_back("system " + sys + " has no scores for language " + lang);
          continue;
        }
        if (!first) {
          first = &it->second;
          first_sys = sys;
          continue;
        }
        bool same = first->size() == it->second.size();
        for (auto a = first->begin(), b = it->second.begin(); same && a != first->end(); ++a, ++b) same = a->first == b->first;
        if (!same) p.push_back("language " + lang + ": example ids of " + sys + " differ from those of " + first_sys);
      }
    }
    return p;
  }

  void validate() const {
    const auto p = problems();
    if (p.empty()) return;
    std::string msg = "invalid score table:";
    for (const auto& s : p) msg += "\n  " + s;
    throw EvalError(msg);
  }

  /// Scores ordered by example id.
  std::vector<double> scores(const std::string& system, const std::string& language) const {
    auto it = cells_.find({system, language});
    if (it == cells_.end()) throw EvalError("no scores for " + system + "/" + language);
    std::vector<double> out;
    out.reserve(it->second.size());
    for (const auto& [id, s] : it->second) out.push_back(s);
    return out;
  }

  double mean(const std::string& system, const std::string& language) const {
    const auto s = scores(system, language);
    if (s.empty()) throw EvalError("no scores for " + system + "/" + language);
    return std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
  }

 private:
  static std::string pad_id(std::size_t i) {
    std::string s = std::to_string(i);
    return std::string(s.size() < 10 ? 10 - s.size() : 0, '0') + s;
  }

  std::vector<std::string> systems_;
  std::vector<std::string> languages_;
  std::map<std::pair<std::string, std::string>, std::map<std::string, double>> cells_;
};

/// One JSON object per line: {system, language, example_id, score} or, for
/// retrieval, {system, language, example_id, ranking: [...], relevance: {...}}
/// which is scored with nDCG@10.
/// Adds every record of `in` to `table` without checking that the result is
/// rectangular, so several files can feed one table.
inline void read_score_records(std::istream& in, ScoreTable& table) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = "line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw EvalError(where + "malformed JSON (" + e.what() + ")");
    }
    if (!j.is_object()) throw EvalError(where + "expected an object");
    for (const char* key : {"system", "language", "example_id"})
      if (!j.contains(key)) throw EvalError(where + "missing field " + key);
    const auto id = j["example_id"].is_string() ? j["example_id"].get<std::string>() : j["example_id"].dump();
    double score = 0.0;
    if (j.contains("score")) {
      if (!j["score"].is_number()) throw EvalError(where + "score must be a number");
      score = j["score"].get<double>();
    } else if (j.contains("ranking") && j.contains("relevance")) {
      std::vector<std::string> ranked;
      for (const auto& r : j["ranking"]) ranked.push_back(r.is_string() ? r.get<std::string>() : r.dump());
      std::map<std::string, double> rel;
      for (const auto& [k, v] : j["relevance"].items()) rel[k] = v.get<double>();
      score = ndcg_at_k(ranked, rel, 10);
    } else {
      throw EvalError(where + "needs either score or ranking+relevance");
    }
    try {
      table.add(j["system"].get<std::string>(), j["language"].get<std::string>(), id, score);
    } catch (const EvalError& e) {
      throw EvalError(where + e.what());
    }
  }
}

inline ScoreTable read_score_records(std::istream& in) {
  ScoreTable table;
  read_score_records(in, table);
  table.validate();
  return table;
}

// ---------------------------------------------------------------------------
// Significance clustering

struct SignificanceOptions {
  double confidence = 0.95;
  std::size_t resamples = 1000;
  std::uint64_t seed = 0;
};

/// Resampled index sets, shared by every comparison within one language.
inline std::vector<std::vector<std::size_t>> bootstrap_indices(std::size_t n, std::size_t resamples, std::uint64_t seed) {
  std::vector<std::vector<std::size_t>> out(resamples, std::vector<std::size_t>(n));
  for (std::size_t r = 0; r < resamples; ++r) {
    auto rng = derive_rng(seed, {r});
    for (auto& i : out[r]) i = static_cast<std::size_t>(uniform_index(rng, 0, n - 1));
  }
  return out;
}

/// One-sided p-value for "leader is better than other": the share of resamples
/// in which the leader's mean does not exceed the other's.
inline double paired_bootstrap_p(const std::vector<double>& leader, const std::vector<double>& other,
                                 const std::vector<std::vector<std::size_t>>& indices) {
  if (leader.size() != other.size()) throw EvalError("paired bootstrap: score vectors are not aligned");
  if (indices.empty()) throw EvalError("paired bootstrap: no resamples");
  std::size_t not_better = 0;
  for (const auto& idx : indices) {
    double d = 0.0;
    for (auto i : idx) d += leader[i] - other[i];
    not_better += d <= 0.0;
  }
  return static_cast<double>(not_better) / static_cast<double>(indices.size());
}

/// Systems ordered by mean score (best first, ties by name).
inline std::vector<std::string> order_by_mean(const ScoreTable& table, const std::string& language) {
  std::vector<std::pair<double, std::string>> by_mean;
  for (const auto& s : table.systems()) by_mean.emplace_back(table.mean(s, language), s);
  std::sort(by_mean.begin(), by_mean.end(), [](const auto& a, const auto& b) { return a.first != b.first ? a.first > b.first : a.second < b.second; });
  std::vector<std::string> out;
  for (auto& [m, s] : by_mean) out.push_back(s);
  return out;
}

/// Greedy top-down clustering with an arbitrary one-sided test. A system
/// opens a new cluster when p(leader better) < 1 - confidence, and then
/// becomes that cluster's leader.
template <class PValue>
std::map<std::string, int> greedy_clusters(const ScoreTable& table, const std::string& language, double confidence, PValue&& p_value) {
  const auto order = order_by_mean(table, language);
  std::map<std::string, int> cluster;
  if (order.empty()) return cluster;
  int current = 1;
  std::string leader = order.front();
  cluster[leader] = current;
  for (std::size_t i = 1; i < order.size(); ++i) {
    const auto& s = order[i];
    if (p_value(table.scores(leader, language), table.scores(s, language)) < 1.0 - confidence) {
      ++current;
      leader = s;
    }
    cluster[s] = current;
  }
  return cluster;
}

inline std::map<std::string, int> significance_clusters(const ScoreTable& table, const std::string& language, const SignificanceOptions& opt = {}) {
  if (!(opt.confidence > 0.0 && opt.confidence < 1.0)) throw EvalError("confidence must lie in (0, 1)");
  if (opt.resamples == 0) throw EvalError("resample count must be positive");
  table.validate();
  if (std::find(table.languages().begin(), table.languages().end(), language) == table.languages().end())
    throw EvalError("unknown language " + language);
  const auto n = table.scores(table.systems().front(), language).size();
  if (n < 2) throw EvalError("significance clustering needs at least 2 examples, language " + language + " has " + std::to_string(n));
  const auto indices = bootstrap_indices(n, opt.resamples, opt.seed);
  return greedy_clusters(table, language, opt.confidence, [&](const auto& a, const auto& b) { return paired_bootstrap_p(a, b, indices); });
}

// ---------------------------------------------------------------------------
// Borda aggregation

struct BordaResult {
  std::map<std::string, double> value;              // mean cluster index
  std::vector<std::string> ordering;                // ascending value, ties by name
  std::vector<std::vector<std::string>> tie_groups;  // groups sharing one value, in ordering
  std::optional<std::string> dominant;              // sole cluster-1 system on a majority of languages
};

using ClusterTable = std::map<std::string, std::map<std::string, int>>;  // language -> system -> cluster

inline BordaResult borda_rank(const ClusterTable& clusters) {
  if (clusters.empty()) throw EvalError("borda_rank: no languages");
  const auto& first = clusters.begin()->second;
  for (const auto& [lang, row] : clusters) {
    bool same = row.size() == first.size();
    for (auto a = row.begin(), b = first.begin(); same && a != row.end(); ++a, ++b) same = a->first == b->first;
    if (!same) throw EvalError("borda_rank: language " + lang + " does not cover the same systems");
  }
  BordaResult r;
  std::map<std::string, std::size_t> sole_first;
  for (const auto& [lang, row] : clusters) {
    std::size_t ones = 0;
    std::string who;
    for (const auto& [sys, c] : row) {
      r.value[sys] += static_cast<double>(c);
      if (c == 1) {
        ++ones;
        who = sys;
      }
    }
    if (ones == 1) ++sole_first[who];
  }
  for (auto& [sys, v] : r.value) v /= static_cast<double>(clusters.size());
  for (const auto& [sys, v] : r.value) r.ordering.push_back(sys);
  std::stable_sort(r.ordering.begin(), r.ordering.end(), [&](const auto& a, const auto& b) { return r.value[a] < r.value[b]; });
  for (const auto& sys : r.ordering) {
    if (r.tie_groups.empty() || r.value[r.tie_groups.back().front()] != r.value[sys]) r.tie_groups.emplace_back();
    r.tie_groups.back().push_back(sys);
  }
  for (const auto& [sys, count] : sole_first)
    if (2 * count > clusters.size()) r.dominant = sys;
  return r;
}

struct RankingReport {
  ClusterTable clusters;
  BordaResult borda;
  SignificanceOptions options;
};

inline RankingReport rank_systems(const ScoreTable& table, const SignificanceOptions& opt = {}) {
  table.validate();
  RankingReport rep;
  rep.options = opt;
  for (const auto& lang : table.languages()) rep.clusters[lang] = significance_clusters(table, lang, opt);
  rep.borda = borda_rank(rep.clusters);
  return rep;
}

/// Line-delimited cluster records, then Borda records, then one metadata record.
inline std::string to_jsonl(const RankingReport& rep, const ScoreTable& table) {
  std::ostringstream out;
  for (const auto& [lang, row] : rep.clusters)
    for (const auto& [sys, c] : row)
      out << nlohmann::json{{"type", "cluster"}, {"language", lang}, {"system", sys}, {"cluster", c}, {"mean", table.mean(sys, lang)}}.dump() << "\n";
  for (std::size_t i = 0; i < rep.borda.ordering.size(); ++i) {
    const auto& sys = rep.borda.ordering[i];
    out << nlohmann::json{{"type", "borda"}, {"system", sys}, {"position", i + 1}, {"value", rep.borda.value.at(sys)}}.dump() << "\n";
  }
  nlohmann::json meta{{"type", "meta"},
                      {"test", "paired-bootstrap-one-sided"},
                      {"confidence", rep.options.confidence},
                      {"resamples", rep.options.resamples},
                      {"seed", rep.options.seed}};
  meta["dominant"] = rep.borda.dominant ? nlohmann::json(*rep.borda.dominant) : nlohmann::json(nullptr);
  out << meta.dump() << "\n";
  return out.str();
}

inline std::string to_table(const RankingReport& rep) {
  std::ostringstream out;
  std::size_t width = 6;
  for (const auto& s : rep.borda.ordering) width = std::max(width, s.size());
  out << std::string(width, ' ');
  for (const auto& [lang, row] : rep.clusters) out << "  " << lang;
  out << "  borda\n";
  for (const auto& sys : rep.borda.ordering) {
    out << sys << std::string(width - sys.size(), ' ');
    for (const auto& [lang, row] : rep.clusters) {
      const auto c = std::to_string(row.at(sys));
      out << "  " << std::string(lang.size() > c.size() ? lang.size() - c.size() : 0, ' ') << c;
    }
    std::ostringstream v;
    v.setf(std::ios::fixed);
    v.precision(2);
    v << rep.borda.value.at(sys);
    out << "  " << v.str() << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Analysis utilities

/// Equal-mass buckets over the sorted lengths, numbered 1..q. A run of equal
/// lengths that straddles a boundary goes entirely to the lower bucket.
inline std::vector<std::size_t> quantile_buckets(const std::vector<double>& lengths, std::size_t q = 5) {
  if (q < 2) throw EvalError("quantile_buckets: need at least 2 buckets");
  if (lengths.size() < q) throw EvalError("quantile_buckets: " + std::to_string(lengths.size()) + " examples for " + std::to_string(q) + " buckets");
  const auto n = lengths.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return lengths[a] < lengths[b]; });
  std::vector<std::size_t> bucket(n);
  std::size_t run_bucket = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t natural = i * q / n + 1;
    if (i == 0 || lengths[order[i]] != lengths[order[i - 1]]) run_bucket = natural;
    bucket[order[i]] = run_bucket;
  }
  return bucket;
}

/// Mean metric per bucket 1..q; an empty bucket has no value.
inline std::vector<std::optional<double>> bucket_means(const std::vector<double>& metric, const std::vector<std::size_t>& bucket, std::size_t q) {
  if (metric.size() != bucket.size()) throw EvalError("bucket_means: vectors are not aligned");
  std::vector<double> sum(q, 0.0);
  std::vector<std::size_t> count(q, 0);
  for (std::size_t i = 0; i < metric.size(); ++i) {
    if (bucket[i] < 1 || bucket[i] > q) throw EvalError("bucket_means: bucket index out of range");
    sum[bucket[i] - 1] += metric[i];
    ++count[bucket[i] - 1];
  }
  std::vector<std::optional<double>> out(q);
  for (std::size_t b = 0; b < q; ++b)
    if (count[b]) out[b] = sum[b] / static_cast<double>(count[b]);
  return out;
}

struct FertilityBin {
  double lo = 0.0;
  double hi = 0.0;
  std::size_t count = 0;
  std::optional<double> mean_a;
  std::optional<double> mean_b;
  std::optional<double> difference;  // mean_a - mean_b
};

/// Bins are [edges[i], edges[i+1]) with the last one closed. Examples outside
/// every bin are ignored.
inline std::vector<FertilityBin> fertility_bins(const std::vector<double>& fertility, const std::vector<double>& metric_a,
                                                const std::vector<double>& metric_b, const std::vector<double>& edges) {
  if (fertility.size() != metric_a.size() || fertility.size() != metric_b.size()) throw EvalError("fertility_bins: vectors are not aligned");
  if (edges.size() < 2) throw EvalError("fertility_bins: need at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw EvalError("fertility_bins: edges must increase strictly");
  const std::size_t nb = edges.size() - 1;
  std::vector<FertilityBin> bins(nb);
  std::vector<double> sa(nb, 0.0), sb(nb, 0.0);
  for (std::size_t b = 0; b < nb; ++b) {
    bins[b].lo = edges[b];
    bins[b].hi = edges[b + 1];
  }
  for (std::size_t i = 0; i < fertility.size(); ++i) {
    const double f = fertility[i];
    if (f < edges.front() || f > edges.back()) continue;
    auto b = static_cast<std::size_t>(std::upper_bound(edges.begin(), edges.end(), f) - edges.begin()) - 1;
    if (b == nb) b = nb - 1;
    ++bins[b].count;
    sa[b] += metric_a[i];
    sb[b] += metric_b[i];
  }
  for (std::size_t b = 0; b < nb; ++b) {
    if (!bins[b].count) continue;
    const auto c = static_cast<double>(bins[b].count);
    bins[b].mean_a = sa[b] / c;
    bins[b].mean_b = sb[b] / c;
    bins[b].difference = *bins[b].mean_a - *bins[b].mean_b;
  }
  return bins;
}

}  // namespace eurobert
