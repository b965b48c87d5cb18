#pragma once

// Self-checks behind `eurobert verify`. Each suite returns named checks with a
// short detail string; the caller prints them and sets the exit code.

#include <chrono>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "eurobert/datamix.hpp"
#include "eurobert/encoder.hpp"
#include "eurobert/finetune.hpp"
#include "eurobert/gradcheck.hpp"
#include "eurobert/mlm.hpp"
#include "eurobert/trainer.hpp"

namespace eurobert::verify {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

using Suite = std::vector<Check>;

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

inline std::vector<double> normal_vector(std::size_t n, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> d(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline TokenBatch plain_batch(std::size_t rows, std::size_t seq, std::int32_t vocab, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::int32_t> id(special::count, vocab - 1);
  TokenBatch b{rows, seq, {}, {}};
  for (std::size_t i = 0; i < rows * seq; ++i) {
    b.ids.push_back(id(rng));
    b.padding.push_back(0);
  }
  return b;
}

inline Check bound(std::string name, double value, double limit, std::string what = "max error") {
  return {std::move(name), value <= limit, what + " " + fmt(value) + " (limit " + fmt(limit) + ")"};
}

}  // namespace detail

/// Full-model MLM gradients in double precision against a four-point stencil.
inline Suite grad_suite() {
  Suite out;
  EncoderConfig c;
  c.n_layers = 2;
  c.d_model = 32;
  c.d_ffn = 64;
  c.n_heads = 4;
  c.n_kv_heads = 2;
  c.vocab_size = 101;
  c.init_std = 0.2;
  auto m = EncoderModel<double>::initialize(c, 11);
  auto batch = detail::plain_batch(2, 6, 101, 12);
  batch.padding[11] = 1;
  batch.ids[11] = special::pad;
  auto masked = apply_masking(batch, {0.5, MaskStrategy::Bert801010, 13}, 0, 101);
  const auto start = std::chrono::steady_clock::now();
  auto r = check_gradients(m.named_parameters(), [&] { return mlm_loss(forward(m, masked.corrupted).logits, masked); });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out.push_back({"encoder-mlm", r.max_relative_error < 1e-5 && r.checked == count_params(c),
                 "max relative error " + detail::fmt(r.max_relative_error) + " at " + r.worst_parameter + "[" +
                     std::to_string(r.worst_index) + "] over " + std::to_string(r.checked) + " parameters in " +
                     detail::fmt(secs) + " s"});

  std::mt19937_64 rng(14);
  Tensor<double> q(Shape{4, 6}, detail::normal_vector(24, rng), true), d(Shape{4, 6}, detail::normal_vector(24, rng), true);
  auto rn = check_gradients({{"q", &q}, {"d", &d}}, [&] { return infonce_loss(q, d, 0.05); });
  out.push_back(detail::bound("infonce", rn.max_relative_error, 1e-5, "max relative error"));

  auto small = c;
  small.n_layers = 1;
  small.d_model = 8;
  small.d_ffn = 16;
  small.n_heads = 2;
  small.n_kv_heads = 1;
  small.vocab_size = 20;
  small.init_std = 0.5;
  auto sm = EncoderModel<double>::initialize(small, 15);
  auto head = TaskHead<double>::create(TaskKind::SeqClass, 8, 3, Pooling::Mean, 16, 0.5);
  auto hb = detail::plain_batch(3, 4, 20, 17);
  std::vector<std::int32_t> labels{0, 2, 1};
  auto params = sm.named_parameters();
  for (auto& p : head.named_parameters()) params.push_back(p);
  auto rh = check_gradients(params, [&] {
    return classification_loss(head_forward(head, forward(sm, hb, std::nullopt, false).hidden, hb), labels);
  });
  out.push_back(detail::bound("classification-head", rh.max_relative_error, 1e-5, "max relative error"));
  return out;
}

inline Suite rope_suite() {
  Suite out;
  std::mt19937_64 rng(21);
  Tensor<double> x(Shape{1, 3, 16}, detail::normal_vector(48, rng));
  std::vector<std::int64_t> zero{0};
  auto y = rope_rotate(x, zero, 10'000.0);
  double err = 0;
  for (std::size_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(y[i] - x[i]));
  out.push_back(detail::bound("position-zero-identity", err, 0.0));

  Tensor<double> xs(Shape{6, 1, 16}, detail::normal_vector(96, rng));
  std::vector<std::int64_t> pos{0, 1, 9, 300, 5000, 8191};
  double norm_err = 0;
  for (double theta : {10'000.0, 250'000.0}) {
    auto r = rope_rotate(xs, pos, theta);
    for (std::size_t s = 0; s < 6; ++s) {
      double a = 0, b = 0;
      for (std::size_t t = 0; t < 16; ++t) {
        a += xs[s * 16 + t] * xs[s * 16 + t];
        b += r[s * 16 + t] * r[s * 16 + t];
      }
      norm_err = std::max(norm_err, std::abs(std::sqrt(a) - std::sqrt(b)));
    }
  }
  out.push_back(detail::bound("norm-preserved", norm_err, 1e-9));

  std::uniform_int_distribution<int> p(0, 4000), shift(0, 4000);
  double offset_err = 0;
  for (int trial = 0; trial < 200; ++trial) {
    Tensor<double> q(Shape{1, 1, 16}, detail::normal_vector(16, rng)), k(Shape{1, 1, 16}, detail::normal_vector(16, rng));
    const std::int64_t m = p(rng), n = p(rng), s = shift(rng);
    const double theta = trial % 2 ? 250'000.0 : 10'000.0;
    auto dot_at = [&](std::int64_t a, std::int64_t b) {
      std::vector<std::int64_t> pa{a}, pb{b};
      auto rq = rope_rotate(q, pa, theta), rk = rope_rotate(k, pb, theta);
      double d = 0;
      for (std::size_t t = 0; t < 16; ++t) d += rq[t] * rk[t];
      return d;
    };
    offset_err = std::max(offset_err, std::abs(dot_at(m, n) - dot_at(m + s, n + s)));
  }
  out.push_back(detail::bound("relative-offset-invariance", offset_err, 1e-5));
  return out;
}

/// Grouped-query attention against per-head attention written out as plain
/// loops, rotation included.
inline Suite gqa_suite() {
  Suite out;
  const std::size_t S = 5, d = 16, H = 4, hd = d / H;
  const double theta = 10'000.0;
  auto mha_oracle = [&](const std::vector<double>& x, const EncoderLayer<double>& L, std::size_t KV,
                        const std::vector<std::uint8_t>& pad) {
    auto project = [&](const Tensor<double>& W, std::size_t cols) {
      std::vector<double> r(S * cols, 0.0);
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t o = 0; o < cols; ++o)
          for (std::size_t i = 0; i < d; ++i) r[s * cols + o] += x[s * d + i] * W[i * cols + o];
      return r;
    };
    auto rotate = [&](std::vector<double>& t, std::size_t heads) {
      for (std::size_t s = 0; s < S; ++s)
        for (std::size_t h = 0; h < heads; ++h)
          for (std::size_t i = 0; i < hd / 2; ++i) {
            const double ang = double(s) * std::pow(theta, -2.0 * double(i) / double(hd));
            double& a = t[(s * heads + h) * hd + 2 * i];
            double& b = t[(s * heads + h) * hd + 2 * i + 1];
            const double a0 = a, b0 = b;
            a = a0 * std::cos(ang) - b0 * std::sin(ang);
            b = a0 * std::sin(ang) + b0 * std::cos(ang);
          }
    };
    auto q = project(L.wq, d), k = project(L.wk, KV * hd), v = project(L.wv, KV * hd);
    rotate(q, H);
    rotate(k, KV);
    std::vector<double> concat(S * d, 0.0);
    for (std::size_t h = 0; h < H; ++h) {
      const std::size_t g = h / (H / KV);
      for (std::size_t i = 0; i < S; ++i) {
        std::vector<double> w(S, 0.0);
        double z = 0.0, top = -INFINITY;
        std::vector<double> logits(S, -INFINITY);
        for (std::size_t j = 0; j < S; ++j) {
          if (pad[j]) continue;
          double dot = 0.0;
          for (std::size_t t = 0; t < hd; ++t) dot += q[(i * H + h) * hd + t] * k[(j * KV + g) * hd + t];
          logits[j] = dot / std::sqrt(double(hd));
          top = std::max(top, logits[j]);
        }
        for (std::size_t j = 0; j < S; ++j)
          if (!pad[j]) z += (w[j] = std::exp(logits[j] - top));
        for (std::size_t j = 0; j < S; ++j)
          for (std::size_t t = 0; t < hd; ++t) concat[i * d + h * hd + t] += w[j] / z * v[(j * KV + g) * hd + t];
      }
    }
    std::vector<double> res(S * d, 0.0);
    for (std::size_t s = 0; s < S; ++s)
      for (std::size_t o = 0; o < d; ++o)
        for (std::size_t i = 0; i < d; ++i) res[s * d + o] += concat[s * d + i] * L.wo[i * d + o];
    return res;
  };

  std::mt19937_64 rng(31);
  std::vector<std::int64_t> pos(S);
  for (std::size_t s = 0; s < S; ++s) pos[s] = static_cast<std::int64_t>(s);
  std::vector<std::uint8_t> pad{0, 0, 0, 1, 0};
  for (std::size_t KV : {std::size_t{4}, std::size_t{2}, std::size_t{1}}) {
    EncoderConfig c;
    c.n_layers = 1;
    c.d_model = d;
    c.d_ffn = 32;
    c.n_heads = H;
    c.n_kv_heads = KV;
    c.init_std = 0.4;
    auto m = EncoderModel<double>::initialize(c, 32 + KV);
    auto xv = detail::normal_vector(S * d, rng);
    auto got = gqa_attention(Tensor<double>(Shape{1, S, d}, xv), m.layers[0], H, KV, pos, pad, theta);
    auto want = mha_oracle(xv, m.layers[0], KV, pad);
    double err = 0, scale = 0;
    for (std::size_t i = 0; i < want.size(); ++i) {
      err = std::max(err, std::abs(got[i] - want[i]));
      scale = std::max(scale, std::abs(want[i]));
    }
    out.push_back(detail::bound("kv" + std::to_string(KV) + "-vs-loop-oracle", err, 1e-6,
                                "output scale " + detail::fmt(scale) + ", max error"));

    if (KV < H) {
      // Duplicating each key/value head H/KV times turns the grouped layer
      // into an ordinary multi-head layer with the same output.
      auto expanded = m.layers[0];
      const std::size_t rep = H / KV;
      auto widen = [&](const Tensor<double>& W) {
        std::vector<double> wide(d * d);
        for (std::size_t i = 0; i < d; ++i)
          for (std::size_t h = 0; h < H; ++h)
            for (std::size_t t = 0; t < hd; ++t) wide[i * d + h * hd + t] = W[i * KV * hd + (h / rep) * hd + t];
        return Tensor<double>(Shape{d, d}, wide);
      };
      expanded.wk = widen(m.layers[0].wk);
      expanded.wv = widen(m.layers[0].wv);
      auto mha = gqa_attention(Tensor<double>(Shape{1, S, d}, xv), expanded, H, H, pos, pad, theta);
      double e2 = 0;
      for (std::size_t i = 0; i < mha.size(); ++i) e2 = std::max(e2, std::abs(got[i] - mha[i]));
      out.push_back(detail::bound("kv" + std::to_string(KV) + "-equals-repeated-mha", e2, 1e-6));
    }
  }
  return out;
}

inline Suite mask_suite() {
  Suite out;
  const std::int32_t V = 300;
  // Exact per-sequence count with ragged padding.
  {
    auto b = detail::plain_batch(500, 64, V, 41);
    std::mt19937_64 rng(42);
    std::uniform_int_distribution<std::size_t> pads(0, 50);
    for (std::size_t r = 0; r < b.batch; ++r)
      for (std::size_t t = 64 - pads(rng); t < 64; ++t) {
        b.padding[r * 64 + t] = 1;
        b.ids[r * 64 + t] = special::pad;
      }
    double worst = 0;
    for (double ratio : {0.5, 0.3, 0.1}) {
      auto m = apply_masking(b, {ratio, MaskStrategy::Bert801010, 43}, 1, V);
      for (std::size_t r = 0; r < b.batch; ++r) {
        double eligible = 0, selected = 0;
        for (std::size_t t = 0; t < 64; ++t) {
          eligible += b.padding[r * 64 + t] == 0;
          selected += m.selection[r * 64 + t];
        }
        worst = std::max(worst, std::abs(selected - ratio * eligible));
      }
    }
    out.push_back(detail::bound("count-per-sequence", worst, 1.0, "max deviation in tokens"));
  }
  // Specials never chosen: 10^6 trials over one sequence rich in specials.
  {
    TokenBatch b{1, 16,
                 {special::bos, 7, special::mask, 8, special::parallel_sep, 9, 10, special::eos, 11, 12, special::pad, 13,
                  special::bos, 14, special::eos, special::pad},
                 {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1}};
    std::uint64_t violations = 0, trials = 0;
    for (std::uint64_t seed = 0; trials < 1'000'000; ++seed) {
      auto m = apply_masking(b, {0.5, MaskStrategy::Bert801010, seed}, seed, 40);
      for (std::size_t i = 0; i < 16; ++i) {
        violations += m.selection[i] && !mask_eligible(b.ids[i], b.padding[i]);
        ++trials;
      }
    }
    out.push_back({"specials-never-selected", violations == 0,
                   std::to_string(violations) + " special positions selected over " + std::to_string(trials) + " trials"});
  }
  // 80/10/10 over 10^5 selections.
  {
    auto b = detail::plain_batch(2000, 100, 500, 44);
    auto m = apply_masking(b, {0.5, MaskStrategy::Bert801010, 45}, 0, 500);
    double masked = 0, random = 0, kept = 0, n = 0;
    for (auto c : m.corruption) {
      masked += c == Corruption::Masked;
      random += c == Corruption::Random;
      kept += c == Corruption::Kept;
      n += c != Corruption::None;
    }
    const double worst = std::max({std::abs(masked / n - 0.8), std::abs(random / n - 0.1), std::abs(kept / n - 0.1)});
    out.push_back({"split-80-10-10", worst <= 0.01 && n >= 1e5,
                   "mask " + detail::fmt(masked / n) + " random " + detail::fmt(random / n) + " keep " +
                       detail::fmt(kept / n) + " over " + detail::fmt(n) + " selections"});
  }
  // Unselected positions get zero gradient on their logits.
  {
    auto b = detail::plain_batch(2, 12, 30, 46);
    auto m = apply_masking(b, {0.3, MaskStrategy::Bert801010, 47}, 0, 30);
    std::mt19937_64 rng(48);
    Tensor<double> logits(Shape{24, 30}, detail::normal_vector(24 * 30, rng), true);
    mlm_loss(logits, m).backward();
    double leak = 0, active = 0;
    for (std::size_t i = 0; i < 24; ++i)
      for (std::size_t v = 0; v < 30; ++v) {
        const double g = std::abs(logits.grad()[i * 30 + v]);
        (m.selection[i] ? active : leak) += g;
      }
    out.push_back({"zero-gradient-unselected", leak == 0.0 && active > 0.0,
                   "gradient mass on unselected rows " + detail::fmt(leak) + ", on selected rows " + detail::fmt(active)});
  }
  return out;
}

inline Suite mix_suite() {
  Suite out;
  auto frequencies = [](const MixSpec& spec, std::uint64_t seed, std::size_t draws) {
    MixPools pools;
    for (std::size_t e = 0; e < spec.entries.size(); ++e) pools.pools.push_back({std::vector<std::int32_t>(8, 10)});
    MixSampler s(spec, pools, seed, {MixAccounting::Documents, true, true});
    std::vector<double> counts(spec.entries.size(), 0.0);
    for (std::size_t i = 0; i < draws; ++i) counts[s.next().entry] += 1;
    for (auto& c : counts) c /= static_cast<double>(draws);
    return counts;
  };
  for (const char* name : {"pretrain-reference", "anneal-reference", "anneal-final"}) {
    auto spec = mix_preset(name);
    auto f = frequencies(spec, 51, 100'000);
    double worst = 0;
    std::string where;
    for (std::size_t e = 0; e < f.size(); ++e) {
      const double dev = std::abs(f[e] - spec.entries[e].weight);
      if (dev > worst) worst = dev, where = spec.entries[e].label;
    }
    out.push_back(detail::bound(std::string("frequencies-") + name, worst, 0.01, "max deviation (" + where + ")"));
    if (std::string(name) == "pretrain-reference") {
      std::size_t en = 0;
      for (std::size_t e = 0; e < spec.entries.size(); ++e)
        if (spec.entries[e].label == "FineWeb English") en = e;
      const bool weight_ok = std::abs(spec.entries[en].weight - 0.4134) < 5e-5;
      out.push_back({"fineweb-english-share", weight_ok && std::abs(f[en] - 0.4134) <= 0.01,
                     "weight " + detail::fmt(spec.entries[en].weight) + ", drawn " + detail::fmt(f[en])});
    }
  }

  {
    std::vector<std::int32_t> doc(10'000);
    for (std::size_t i = 0; i < doc.size(); ++i) doc[i] = static_cast<std::int32_t>(special::count + i % 200);
    auto rng = derive_rng(52, {});
    std::size_t lo = SIZE_MAX, hi = 0;
    bool contiguous = true;
    for (int i = 0; i < 100'000; ++i) {
      auto c = random_crop(doc, CropPolicy{12, 8192, CropDistribution::Uniform}, rng);
      lo = std::min(lo, c.size());
      hi = std::max(hi, c.size());
      for (std::size_t t = 1; t < c.size() && contiguous; ++t)
        contiguous = c[t] == static_cast<std::int32_t>(special::count + (c[t - 1] - special::count + 1) % 200);
    }
    out.push_back({"crop-range-and-tails", lo == 12 && hi == 8192 && contiguous,
                   "observed lengths " + std::to_string(lo) + ".." + std::to_string(hi)});
  }

  {
    Vocab bytes;
    std::mt19937_64 rng(53);
    std::uniform_int_distribution<int> len(1, 40), ch(32, 126);
    std::size_t bad = 0;
    for (int i = 0; i < 2000; ++i) {
      std::string a, b;
      for (int k = len(rng); k > 0; --k) a += static_cast<char>(ch(rng));
      for (int k = len(rng); k > 0; --k) b += static_cast<char>(ch(rng));
      auto ids = make_parallel(a, b, bytes);
      bad += std::count(ids.begin(), ids.end(), special::parallel_sep) != 1;
    }
    out.push_back({"one-separator-per-pair", bad == 0, std::to_string(bad) + " of 2000 pairs malformed"});
  }

  {
    std::vector<Document> docs;
    for (int q = 0; q <= 4; ++q)
      for (int k = 0; k < 3; ++k) {
        Document d;
        d.text = "doc";
        d.lang = "en";
        d.source = "web";
        if (q > 0) d.quality = q;
        docs.push_back(d);
      }
    auto kept = quality_filter(docs, 3, false);
    bool ok = kept.size() == 6;
    for (const auto& d : kept) ok = ok && d.quality && *d.quality >= 3;
    auto with_unlabeled = quality_filter(docs, 3, true);
    ok = ok && with_unlabeled.size() == 9;
    out.push_back({"quality-filter-buckets", ok,
                   "kept " + std::to_string(kept.size()) + " labeled of 12, " + std::to_string(with_unlabeled.size()) +
                       " with unlabeled documents passing"});
  }
  return out;
}

inline Suite sched_suite() {
  Suite out;
  auto plan = train_plan_preset("reference");
  const auto stable_end = plan.phase_start(1);
  const auto total = plan.total_steps();
  out.push_back({"warmup-start", plan.lr(0) == 0.0, "lr(0) = " + detail::fmt(plan.lr(0))});
  out.push_back(detail::bound("warmup-midpoint", std::abs(plan.lr(plan.warmup / 2) - 5e-5), 1e-18));
  bool flat = true;
  for (std::uint64_t s : {plan.warmup, plan.warmup + 1, stable_end / 2, stable_end - 1}) flat = flat && plan.lr(s) == 1e-4;
  out.push_back({"stable-exact", flat, "lr on the stable segment equals 1e-4 exactly"});
  out.push_back(detail::bound("anneal-end", std::abs(plan.lr(total - 1)), 1e-12));
  bool monotone = true;
  double prev = plan.lr(stable_end);
  for (std::uint64_t s = stable_end + 1; s < total; s += 97) {
    monotone = monotone && plan.lr(s) <= prev;
    prev = plan.lr(s);
  }
  out.push_back({"anneal-monotone", monotone, "cosine segment never increases"});
  return out;
}

inline const std::map<std::string, std::function<Suite()>>& suites() {
  static const std::map<std::string, std::function<Suite()>> all{
      {"grad", grad_suite}, {"rope", rope_suite}, {"gqa", gqa_suite},
      {"mask", mask_suite}, {"mix", mix_suite},   {"sched", sched_suite}};
  return all;
}

}  // namespace eurobert::verify
