// Acceptance run: one PASS/FAIL line per criterion, supporting detail indented
// below it. Exit status is the number of failed criteria.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "../tools/verify_suites.hpp"
#include "eurobert/checkpoint.hpp"
#include "eurobert/evalstats.hpp"
#include "eurobert/finetune.hpp"
#include "eurobert/run_config.hpp"
#include "toy.hpp"

using namespace eurobert;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool passed = true;
  std::vector<std::string> lines;

  void add(bool ok, const std::string& what) {
    passed = passed && ok;
    lines.push_back(std::string(ok ? "ok   " : "BAD  ") + what);
  }
  void take(const verify::Suite& suite, const std::string& prefix) {
    for (const auto& c : suite) add(c.passed, prefix + "/" + c.name + ": " + c.detail);
  }
};

std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

std::vector<double> normal(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

// ---------------------------------------------------------------------------

Outcome gradient_fidelity() {
  Outcome o;
  const auto t0 = std::chrono::steady_clock::now();
  o.take(verify::grad_suite(), "grad");
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  o.add(secs < 120.0, "runtime " + num(secs) + " s (limit 120 s)");
  return o;
}

Outcome architecture() {
  Outcome o;
  o.take(verify::gqa_suite(), "gqa");
  o.take(verify::rope_suite(), "rope");

  std::mt19937_64 rng(101);
  double rms_err = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t rows = 3, d = 4 + trial % 13;
    const auto xv = normal(rows * d, rng, 2.0), gv = normal(d, rng);
    const auto y = rmsnorm(Tensor<double>(Shape{rows, d}, xv), Tensor<double>(Shape{d}, gv), 1e-5);
    for (std::size_t r = 0; r < rows; ++r) {
      double ms = 0.0;
      for (std::size_t i = 0; i < d; ++i) ms += xv[r * d + i] * xv[r * d + i];
      const double inv = 1.0 / std::sqrt(ms / double(d) + 1e-5);
      for (std::size_t i = 0; i < d; ++i) rms_err = std::max(rms_err, std::abs(y[r * d + i] - gv[i] * xv[r * d + i] * inv));
    }
  }
  o.add(rms_err < 1e-6, "rmsnorm vs formula: max error " + num(rms_err));

  double glu_err = 0.0;
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t rows = 2, d = 3 + trial % 6, f = 5 + trial % 7;
    const auto xv = normal(rows * d, rng), w1 = normal(d * f, rng), w3 = normal(d * f, rng), w2 = normal(f * d, rng);
    const auto y = swiglu_ffn(Tensor<double>(Shape{rows, d}, xv), Tensor<double>(Shape{d, f}, w1), Tensor<double>(Shape{f, d}, w2),
                              Tensor<double>(Shape{d, f}, w3));
    for (std::size_t r = 0; r < rows; ++r) {
      std::vector<double> h(f);
      for (std::size_t j = 0; j < f; ++j) {
        double a = 0.0, b = 0.0;
        for (std::size_t i = 0; i < d; ++i) {
          a += xv[r * d + i] * w1[i * f + j];
          b += xv[r * d + i] * w3[i * f + j];
        }
        h[j] = a / (1.0 + std::exp(-a)) * b;
      }
      for (std::size_t k = 0; k < d; ++k) {
        double acc = 0.0;
        for (std::size_t j = 0; j < f; ++j) acc += h[j] * w2[j * d + k];
        glu_err = std::max(glu_err, std::abs(y[r * d + k] - acc));
      }
    }
  }
  o.add(glu_err < 1e-6, "swiglu vs formula: max error " + num(glu_err));
  return o;
}

// Published architecture and optimisation tables, typed in independently of the presets.
struct SizeRow {
  const char* name;
  std::size_t layers, d, ffn, heads, kv;
  std::uint64_t tokens_per_step;
};

Outcome recipe_constants() {
  Outcome o;
  o.take(verify::sched_suite(), "sched");

  const SizeRow rows[] = {{"210m", 12, 768, 3072, 12, 12, 9'437'184},
                          {"610m", 26, 1152, 4096, 18, 6, 9'437'184},
                          {"2.1b", 32, 2304, 6144, 18, 6, 9'830'400}};
  for (const auto& r : rows) {
    const auto c = encoder_preset(r.name);
    const bool arch = c.n_layers == r.layers && c.d_model == r.d && c.d_ffn == r.ffn && c.n_heads == r.heads && c.n_kv_heads == r.kv &&
                      c.vocab_size == 128'000 && c.rmsnorm_eps == 1e-5 && c.rope_theta == 250'000.0 && c.max_seq_len == 8192 &&
                      std::abs(c.init_std * c.init_std - 0.2) < 1e-12;
    o.add(arch, std::string("architecture table, ") + r.name);

    const auto p = train_plan_preset(std::string("reference-") + r.name);
    bool hp = p.base_lr == 1e-4 && p.warmup == 2000 && p.adam.beta1 == 0.9 && p.adam.beta2 == 0.95 && p.adam.eps == 1e-5 &&
              p.adam.weight_decay == 0.1 && p.adam.clip_norm == 1.0 && p.phases.size() == 2;
    if (hp) {
      const auto& pre = p.phases[0];
      const auto& an = p.phases[1];
      hp = p.batch_size * pre.seq_len == r.tokens_per_step && pre.seq_len == 2048 && pre.mask_ratio == 0.5 &&
           pre.rope_theta == 10'000.0 && pre.schedule == ScheduleSegment::Constant && pre.length == LengthPolicy::Packed &&
           an.seq_len == 8192 && an.crop_min == 12 && an.mask_ratio == 0.1 && an.rope_theta == 250'000.0 &&
           an.schedule == ScheduleSegment::Cosine && an.length == LengthPolicy::Cropped && an.min_quality == 3 &&
           // 4.8T pretraining and 200B annealing tokens, to within one step
           std::llabs(static_cast<long long>(pre.steps * r.tokens_per_step) - 4'843'357'000'000LL) < static_cast<long long>(r.tokens_per_step) &&
           std::llabs(static_cast<long long>(an.steps * r.tokens_per_step) - 200'000'000'000LL) < static_cast<long long>(r.tokens_per_step);
    }
    o.add(hp, std::string("hyperparameter table, ") + r.name);

    const auto file = (fs::path(EUROBERT_SOURCE_DIR) / "presets/runs" / ("eurobert-" + std::string(r.name) + ".yaml")).string();
    bool same = false;
    try {
      const auto cfg = load_run_config(file);
      same = cfg.model == c && cfg.plan.base_lr == p.base_lr && cfg.plan.warmup == p.warmup && cfg.plan.batch_size == p.batch_size &&
             cfg.plan.adam == p.adam && cfg.plan.phases == p.phases;
    } catch (const std::exception& e) {
      o.add(false, file + ": " + e.what());
    }
    o.add(same, "run preset file matches, " + std::string(r.name));
  }
  return o;
}

Outcome masking() {
  Outcome o;
  o.take(verify::mask_suite(), "mask");
  return o;
}

Outcome uniform_logits() {
  Outcome o;
  for (std::size_t V : {101u, 1000u, 50'000u}) {
    auto c = toy::tiny_config(V);
    auto m = EncoderModel<double>::initialize(c, 3);
    std::fill(m.mlm_head.mutable_data().begin(), m.mlm_head.mutable_data().end(), 0.0);
    auto batch = verify::detail::plain_batch(2, 12, static_cast<std::int32_t>(V), 4);
    auto masked = apply_masking(batch, {0.5, MaskStrategy::Bert801010, 5}, 0, V);
    const double loss = mlm_loss(forward(m, masked.corrupted).logits, masked).item();
    const double err = std::abs(loss - std::log(double(V)));
    o.add(err < 1e-4, "V=" + std::to_string(V) + ": loss " + num(loss) + ", |loss - ln V| " + num(err));
  }
  return o;
}

Outcome toy_convergence() {
  Outcome o;
  const auto corpus = toy::progression_corpus(32, 16, 48);
  const auto plan = toy::toy_plan(500, 20);
  auto make = [&] { return Trainer(plan, EncoderModel<float>::initialize(toy::tiny_config(), 9), toy::cyclic_streams(corpus, 8), 13); };

  auto a = make();
  a.run();
  const auto& h = a.history();
  double first = 0.0, last = 0.0;
  for (int i = 0; i < 4; ++i) first += *h[i].loss / 4;  // one pass over the 32 sequences
  for (int i = 496; i < 500; ++i) last += *h[i].loss / 4;
  o.add(last < 0.5 * first, "loss " + num(first) + " -> " + num(last) + " after 500 steps (ratio " + num(last / first) + ")");

  auto b = make();
  b.run();
  bool identical = a.history().size() == b.history().size();
  for (std::size_t i = 0; identical && i < h.size(); ++i) identical = a.history()[i] == b.history()[i];
  o.add(identical, "two fixed-seed runs give bit-identical traces (" + std::to_string(h.size()) + " steps)");

  const auto dir = fs::temp_directory_path() / "eurobert_acceptance_resume";
  fs::remove_all(dir);
  fs::create_directories(dir);
  bool resumed_ok = false;
  for (std::uint64_t split : {137u, 505u}) {
    auto first_half = make();
    first_half.run(split);
    const auto path = (dir / ("at-" + std::to_string(split) + ".ebck")).string();
    first_half.save(path);
    Trainer second(plan, load_checkpoint(path), toy::cyclic_streams(corpus, 8));
    second.run();
    resumed_ok = second.history().size() == h.size() - split;
    for (std::size_t i = 0; resumed_ok && i < second.history().size(); ++i) resumed_ok = second.history()[i] == h[split + i];
    o.add(resumed_ok, "resume at step " + std::to_string(split) + " reproduces the straight trace");
  }
  fs::remove_all(dir);
  return o;
}

Outcome data_pipeline() {
  Outcome o;
  o.take(verify::mix_suite(), "mix");
  return o;
}

// ---------------------------------------------------------------------------
// Metric oracles

// Linear gains; the ideal ordering is found by trying every permutation.
double ndcg_oracle(const std::vector<double>& ranked_gains, std::size_t k) {
  auto dcg = [&](const std::vector<double>& g) {
    double s = 0.0;
    for (std::size_t i = 0; i < g.size() && i < k; ++i) s += g[i] / std::log2(double(i) + 2.0);
    return s;
  };
  auto perm = ranked_gains;
  std::sort(perm.begin(), perm.end());
  double ideal = 0.0;
  do ideal = std::max(ideal, dcg(perm));
  while (std::next_permutation(perm.begin(), perm.end()));
  return ideal > 0.0 ? dcg(ranked_gains) / ideal : 0.0;
}

// Rank of x[i]: one plus the number of smaller values plus half the other ties.
double spearman_oracle(const std::vector<double>& x, const std::vector<double>& y) {
  auto ranks = [](const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
      double less = 0, equal = 0;
      for (std::size_t j = 0; j < v.size(); ++j) {
        less += v[j] < v[i];
        equal += v[j] == v[i];
      }
      r[i] = 1.0 + less + (equal - 1.0) / 2.0;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  const double n = double(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n, my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  return sxy / std::sqrt(sxx * syy);
}

double infonce_oracle(const std::vector<double>& q, const std::vector<double>& d, std::size_t B, std::size_t D, double tau) {
  auto norm = [&](const std::vector<double>& m, std::size_t i) {
    double s = 0;
    for (std::size_t j = 0; j < D; ++j) s += m[i * D + j] * m[i * D + j];
    return std::sqrt(s);
  };
  double total = 0.0;
  for (std::size_t i = 0; i < B; ++i) {
    double z = 0.0, pos = 0.0;
    for (std::size_t k = 0; k < B; ++k) {
      double dot = 0.0;
      for (std::size_t j = 0; j < D; ++j) dot += q[i * D + j] * d[k * D + j];
      const double s = dot / (norm(q, i) * norm(d, k)) / tau;
      z += std::exp(s);
      if (k == i) pos = s;
    }
    total += std::log(z) - pos;
  }
  return total / double(B);
}

Outcome metric_oracles() {
  Outcome o;
  std::mt19937_64 rng(808);
  const int trials = 200;

  double ndcg_err = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t n = 1 + rng() % 8;
    const bool graded = t % 2;
    std::vector<std::string> ranked;
    std::map<std::string, double> rel;
    std::vector<double> gains;
    for (std::size_t i = 0; i < n; ++i) {
      ranked.push_back("doc" + std::to_string(i));
      const double g = graded ? double(rng() % 4) : double(rng() % 2);
      gains.push_back(g);
      if (g > 0) rel[ranked.back()] = g;
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::string> r2;
    std::vector<double> g2;
    for (auto i : order) {
      r2.push_back(ranked[i]);
      g2.push_back(gains[i]);
    }
    const double want = ndcg_oracle(g2, 10);
    ndcg_err = std::max(ndcg_err, std::abs(ndcg_at_k(r2, rel, 10) - want));
  }
  o.add(ndcg_err < 1e-9, "ndcg@10 vs permutation oracle: " + std::to_string(trials) + " instances, max error " + num(ndcg_err));

  double sp_err = 0.0;
  int sp_count = 0, tied = 0;
  while (sp_count < trials) {
    const std::size_t n = 2 + rng() % 7;
    std::vector<double> x(n), y(n);
    for (auto& v : x) v = double(rng() % 4);
    for (auto& v : y) v = double(rng() % 5);
    if (std::set<double>(x.begin(), x.end()).size() < 2 || std::set<double>(y.begin(), y.end()).size() < 2) continue;
    tied += std::set<double>(x.begin(), x.end()).size() < n;
    sp_err = std::max(sp_err, std::abs(spearman(x, y) - spearman_oracle(x, y)));
    ++sp_count;
  }
  o.add(sp_err < 1e-9, "spearman vs rank-count oracle: " + std::to_string(sp_count) + " instances (" + std::to_string(tied) +
                           " with ties), max error " + num(sp_err));

  double f1_err = 0.0;
  const char* labels[] = {"PER", "LOC", "ORG"};
  for (int t = 0; t < trials; ++t) {
    const std::size_t examples = 1 + rng() % 4;
    std::vector<std::vector<Entity>> pred(examples), gold(examples);
    std::size_t tp = 0, np = 0, ng = 0;
    for (std::size_t e = 0; e < examples; ++e) {
      std::set<std::tuple<std::size_t, std::size_t, std::string>> ps, gs;
      const std::size_t pn = rng() % 5, gn = rng() % 5;
      while (gs.size() < gn) {
        const std::size_t b = rng() % 8;
        gs.insert({b, b + 1 + rng() % 2, labels[rng() % 3]});
      }
      while (ps.size() < pn) {
        if (!gs.empty() && rng() % 2) {
          auto it = gs.begin();
          std::advance(it, rng() % gs.size());
          auto [b, en, l] = *it;
          if (rng() % 4 == 0) l = labels[rng() % 3];
          ps.insert({b, en, l});
        } else {
          const std::size_t b = rng() % 8;
          ps.insert({b, b + 1 + rng() % 2, labels[rng() % 3]});
        }
      }
      for (const auto& [b, en, l] : gs) gold[e].push_back({b, en, l});
      for (const auto& [b, en, l] : ps) pred[e].push_back({b, en, l});
      std::shuffle(pred[e].begin(), pred[e].end(), rng);
      for (const auto& p : ps) tp += gs.count(p);
      np += ps.size();
      ng += gs.size();
    }
    const double want = np + ng == 0 ? 1.0 : 2.0 * double(tp) / double(np + ng);
    f1_err = std::max(f1_err, std::abs(f1_entity(pred, gold) - want));
  }
  o.add(f1_err < 1e-9, "entity F1 vs set-count oracle: " + std::to_string(trials) + " instances, max error " + num(f1_err));

  double nce_err = 0.0;
  for (int t = 0; t < trials; ++t) {
    const std::size_t B = 2 + rng() % 7, D = 2 + rng() % 7;
    const double tau = 0.02 + 0.98 * std::uniform_real_distribution<double>(0, 1)(rng);
    const auto q = normal(B * D, rng), d = normal(B * D, rng);
    const double got = infonce_loss(Tensor<double>(Shape{B, D}, q), Tensor<double>(Shape{B, D}, d), tau).item();
    nce_err = std::max(nce_err, std::abs(got - infonce_oracle(q, d, B, D, tau)));
  }
  o.add(nce_err < 1e-6, "InfoNCE vs direct formula: " + std::to_string(trials) + " instances, max error " + num(nce_err));

  double same_err = 0.0;
  for (std::size_t B = 2; B <= 8; ++B) {
    const auto row = normal(5, rng);
    std::vector<double> m;
    for (std::size_t i = 0; i < B; ++i) m.insert(m.end(), row.begin(), row.end());
    const double got = infonce_loss(Tensor<double>(Shape{B, 5}, m), Tensor<double>(Shape{B, 5}, m)).item();
    same_err = std::max(same_err, std::abs(got - std::log(double(B))));
  }
  o.add(same_err < 1e-6, "InfoNCE on identical embeddings = ln B for B = 2..8, max error " + num(same_err));
  return o;
}

// ---------------------------------------------------------------------------
// Ranking

// One-sided p-value over every ordered index tuple of length n.
double exhaustive_p(const std::vector<double>& leader, const std::vector<double>& other) {
  const std::size_t n = leader.size();
  std::vector<std::size_t> idx(n, 0);
  std::size_t total = 0, not_better = 0;
  while (true) {
    double diff = 0.0;
    for (auto i : idx) diff += leader[i] - other[i];
    not_better += diff <= 0.0;
    ++total;
    std::size_t pos = 0;
    while (pos < n && ++idx[pos] == n) idx[pos++] = 0;
    if (pos == n) break;
  }
  return double(not_better) / double(total);
}

// Systems sorted by mean (best first, ties by name); a system opens a new
// cluster when the current cluster's first member beats it significantly.
std::map<std::string, int> cluster_oracle(const std::map<std::string, std::vector<double>>& scores, double alpha) {
  std::vector<std::pair<double, std::string>> by_mean;
  for (const auto& [s, v] : scores) by_mean.emplace_back(-std::accumulate(v.begin(), v.end(), 0.0) / double(v.size()), s);
  std::sort(by_mean.begin(), by_mean.end());
  std::map<std::string, int> out;
  int cluster = 1;
  std::string head = by_mean.front().second;
  out[head] = 1;
  for (std::size_t i = 1; i < by_mean.size(); ++i) {
    const auto& s = by_mean[i].second;
    if (exhaustive_p(scores.at(head), scores.at(s)) < alpha) {
      ++cluster;
      head = s;
    }
    out[s] = cluster;
  }
  return out;
}

Outcome ranking() {
  Outcome o;
  std::mt19937_64 rng(909);
  const std::size_t n = 6;
  int compared = 0, agreed = 0, multi = 0;
  while (compared < 40) {
    std::map<std::string, std::vector<double>> scores;
    const double shift[] = {0.0, double(rng() % 3), double(rng() % 4)};
    for (int s = 0; s < 3; ++s) {
      std::vector<double> v(n);
      for (auto& x : v) x = double(rng() % 4) - shift[s];
      scores[std::string(1, char('a' + s))] = v;
    }
    // keep instances whose pairwise exact p-values sit clear of the threshold
    bool clear = true;
    for (const auto& [a, va] : scores)
      for (const auto& [b, vb] : scores)
        if (a != b) clear = clear && std::abs(exhaustive_p(va, vb) - 0.05) > 0.01;
    if (!clear) continue;
    ScoreTable table;
    for (const auto& [s, v] : scores) table.add_vector(s, "xx", v);
    const auto want = cluster_oracle(scores, 0.05);
    const auto got = significance_clusters(table, "xx", {0.95, 20'000, 3});
    agreed += got == want;
    int top = 0;
    for (const auto& [s, c] : want) top = std::max(top, c);
    multi += top > 1;
    ++compared;
  }
  o.add(agreed == compared && multi > 0, "clusters vs exhaustive oracle (n = 6): " + std::to_string(agreed) + "/" + std::to_string(compared) +
                                             " agree, " + std::to_string(multi) + " with more than one cluster");

  const ClusterTable crafted{{"de", {{"x", 2}, {"y", 1}, {"z", 1}}},
                             {"en", {{"x", 1}, {"y", 2}, {"z", 2}}},
                             {"fr", {{"x", 1}, {"y", 2}, {"z", 3}}}};
  const auto borda = borda_rank(crafted);
  const bool exact = borda.value.at("x") == 4.0 / 3.0 && borda.value.at("y") == 5.0 / 3.0 && borda.value.at("z") == 2.0 &&
                     borda.ordering == std::vector<std::string>{"x", "y", "z"};
  o.add(exact, "crafted 3x3 Borda values x " + num(borda.value.at("x")) + ", y " + num(borda.value.at("y")) + ", z " +
                   num(borda.value.at("z")) + " (want 4/3, 5/3, 2)");

  // The same table from raw scores: constant per-system scores make every gap decisive.
  ScoreTable raw;
  const std::map<std::string, std::map<std::string, double>> means{
      {"de", {{"x", 0.3}, {"y", 0.9}, {"z", 0.9}}}, {"en", {{"x", 0.9}, {"y", 0.5}, {"z", 0.5}}}, {"fr", {{"x", 0.9}, {"y", 0.6}, {"z", 0.3}}}};
  for (const auto& [lang, row] : means)
    for (const auto& [sys, m] : row) raw.add_vector(sys, lang, std::vector<double>(20, m));
  const auto rep = rank_systems(raw);
  o.add(rep.clusters == crafted && rep.borda.value == borda.value, "score table reproduces the crafted clusters and Borda values");

  // p and q are identical; r trails them on every example by at least 0.5.
  int shared = 0, all_shared = 0;
  const int identical_trials = 50;
  for (int t = 0; t < identical_trials; ++t) {
    ScoreTable table, flat;
    const auto best = normal(12, rng);
    auto worse = normal(12, rng);
    for (std::size_t i = 0; i < worse.size(); ++i) worse[i] = best[i] - 0.5 - std::abs(worse[i]);
    table.add_vector("p", "xx", best);
    table.add_vector("q", "xx", best);
    table.add_vector("r", "xx", worse);
    const auto c = significance_clusters(table, "xx", {0.95, 1000, std::uint64_t(t)});
    shared += c.at("p") == 1 && c.at("q") == 1;
    for (const char* s : {"p", "q", "r"}) flat.add_vector(s, "xx", best);
    const auto f = significance_clusters(flat, "xx", {0.95, 1000, std::uint64_t(t)});
    all_shared += f.at("p") == 1 && f.at("q") == 1 && f.at("r") == 1;
  }
  o.add(shared == identical_trials && all_shared == identical_trials,
        "identical best systems share cluster 1 in " + std::to_string(shared) + "/" + std::to_string(identical_trials) +
            " draws; three identical systems in " + std::to_string(all_shared) + "/" + std::to_string(identical_trials));
  return o;
}

// ---------------------------------------------------------------------------

TaskExample class_example(std::int32_t label, std::mt19937& rng) {
  TaskExample ex;
  ex.label = label;
  ex.ids.push_back(special::bos);
  const std::size_t len = 4 + rng() % 6;
  for (std::size_t i = 0; i < len; ++i) ex.ids.push_back(static_cast<std::int32_t>((label == 0 ? 5 : 26) + rng() % 21));
  ex.ids.push_back(special::eos);
  return ex;
}

Outcome finetune_protocol_checks() {
  Outcome o;
  const auto grid = lr_grid();
  bool ratio_ok = grid.size() == 10;
  double worst = 0.0;
  const double r = std::pow(10.0, 1.0 / 9.0);
  for (std::size_t i = 1; i < grid.size(); ++i) worst = std::max(worst, std::abs(grid[i] / grid[i - 1] / r - 1.0));
  ratio_ok = ratio_ok && worst < 1e-12;
  o.add(grid.front() == 1e-5 && grid.back() == 1e-4, "grid endpoints exactly 1e-5 and 1e-4");
  o.add(ratio_ok, "10 points with ratio 10^(1/9), max relative deviation " + num(worst));
  const auto ref = finetune_protocol("reference", TaskKind::SeqClass);
  o.add(ref.lrs == grid && ref.batch == 32 && ref.steps == 10'000 && ref.warmup_fraction == 0.1, "reference protocol: 10k steps, batch 32, 10% warmup");

  std::mt19937 rng(17);
  std::vector<TaskExample> train, val;
  for (int i = 0; i < 64; ++i) train.push_back(class_example(i % 2, rng));
  for (int i = 0; i < 32; ++i) val.push_back(class_example(i % 2, rng));
  const auto snapshot = EncoderModel<float>::initialize(toy::tiny_config(), 1);
  const auto head = TaskHead<float>::create(TaskKind::SeqClass, 32, 2, Pooling::Mean, 1);
  auto protocol = finetune_protocol("desk", TaskKind::SeqClass);
  protocol.lrs = {1e-6, 1e-4, 3e-3};
  const auto res = finetune(snapshot, head, protocol, train, val);

  double best = -1.0, best_lr = 0.0;
  for (const auto& p : res.points)
    if (p.best_value > best) best = p.best_value, best_lr = p.lr;
  double record_best = -1.0;
  for (const auto& rec : res.records)
    if (rec.split == "validation") record_best = std::max(record_best, rec.value);
  o.add(res.best_lr == best_lr && res.best_value == best && record_best == best,
        "grid search returns the validation argmax (lr " + num(res.best_lr) + ", accuracy " + num(res.best_value) + ")");
  const double val_acc = evaluate(res.model, res.head, val, 8, std::nullopt).value;
  o.add(val_acc == 1.0, "separable task: validation accuracy " + num(val_acc));
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {"gradient fidelity", gradient_fidelity},
      {"architecture equivalences", architecture},
      {"recipe constants", recipe_constants},
      {"masking", masking},
      {"uniform-logit loss", uniform_logits},
      {"toy convergence", toy_convergence},
      {"data pipeline", data_pipeline},
      {"metric oracles", metric_oracles},
      {"ranking", ranking},
      {"fine-tuning protocol", finetune_protocol_checks},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Outcome out;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      out = criteria[i].run();
    } catch (const std::exception& e) {
      out.add(false, std::string("exception: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !out.passed;
    std::cout << (out.passed ? "PASS" : "FAIL") << " " << i + 1 << ". " << criteria[i].name << " (" << num(secs) << " s)\n";
    for (const auto& l : out.lines) std::cout << "       " << l << "\n";
    std::cout.flush();
  }
  std::cout << criteria.size() - failed << "/" << criteria.size() << " criteria passed\n";
  return failed;
}
