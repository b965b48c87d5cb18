#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "eurobert/datamix.hpp"

using namespace eurobert;
namespace fs = std::filesystem;

namespace {

std::string write_temp(const std::string& name, const std::string& content) {
  auto path = fs::temp_directory_path() / ("eurobert_test_" + name);
  std::ofstream(path) << content;
  return path.string();
}

const Vocab& shared_vocab() {
  static const Vocab v = train_bpe({"hello world", "the quick brown fox", "bonjour le monde", "hallo welt"}, 300);
  return v;
}

std::vector<std::vector<std::int32_t>> fixed_pool(std::size_t docs, std::size_t len, std::int32_t base) {
  std::vector<std::vector<std::int32_t>> pool;
  for (std::size_t d = 0; d < docs; ++d) pool.emplace_back(len, base + static_cast<std::int32_t>(d));
  return pool;
}

MixSpec two_entry_spec(double a, double b) {
  MixSpec s{"two", {}};
  s.entries.push_back({"a", Selector{std::nullopt, std::string("en"), std::nullopt, std::nullopt}, a});
  s.entries.push_back({"b", Selector{std::nullopt, std::string("fr"), std::nullopt, std::nullopt}, b});
  return s;
}

}  // namespace

TEST(Ingest, EmptyFile) {
  EXPECT_TRUE(ingest(write_temp("empty.jsonl", "")).empty());
}

TEST(Ingest, ThreeRecordsInOrder) {
  auto path = write_temp("three.jsonl",
                         R"({"text": "one", "lang": "en", "source": "web"}
{"text": "deux", "lang": "fr", "source": "web", "quality": 3}
{"src": "hola", "tgt": "hello", "lang": "es-en", "source": "par", "kind": "parallel-pair"}
)");
  auto docs = ingest(path);
  ASSERT_EQ(docs.size(), 3u);
  EXPECT_EQ(docs[0].text, "one");
  EXPECT_FALSE(docs[0].quality);
  EXPECT_EQ(docs[1].quality, 3);
  EXPECT_EQ(docs[2].kind, DocKind::ParallelPair);
  EXPECT_EQ(docs[2].src, "hola");
}

TEST(Ingest, MissingTextNamesLine) {
  auto path = write_temp("missing.jsonl",
                         "{\"text\": \"ok\", \"lang\": \"en\", \"source\": \"s\"}\n{\"lang\": \"en\", \"source\": \"s\"}\n");
  try {
    ingest(path);
    FAIL();
  } catch (const IngestError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("text"), std::string::npos);
  }
}

TEST(Ingest, SchemaViolations) {
  EXPECT_THROW(parse_document("{\"text\": \"x\", \"source\": \"s\"}", 1), IngestError);  // no lang
  EXPECT_THROW(parse_document("not json", 1), IngestError);
  EXPECT_THROW(parse_document("{\"text\": \"x\", \"lang\": \"en\", \"source\": \"s\", \"quality\": 5}", 1), IngestError);
  EXPECT_THROW(parse_document("{\"src\": \"\", \"tgt\": \"b\", \"lang\": \"en\", \"source\": \"s\", \"kind\": \"parallel-pair\"}", 1),
               IngestError);
  EXPECT_THROW(parse_document("{\"text\": \"x\", \"lang\": \"en\", \"source\": \"s\", \"kind\": \"poem\"}", 1), IngestError);
  EXPECT_THROW(ingest("/nonexistent/corpus.jsonl"), std::runtime_error);
}

TEST(Parallel, Construction) {
  const auto& v = shared_vocab();
  auto ids = make_parallel("a", "b", v);
  std::vector<std::int32_t> expected = v.encode("a").ids;
  expected.push_back(special::parallel_sep);
  for (auto id : v.encode("b").ids) expected.push_back(id);
  EXPECT_EQ(ids, expected);
  EXPECT_EQ(ids[1], 4);
  EXPECT_THROW(make_parallel("", "b", v), std::invalid_argument);
  EXPECT_THROW(make_parallel("a", "", v), std::invalid_argument);
}

TEST(Parallel, SingleSeparatorAndHalvesDecode) {
  const auto& v = shared_vocab();
  std::mt19937_64 rng(3);
  const std::vector<std::string> words{"hello", "world", "<|parallel_sep|>", "monde", " ", "é", "中文"};
  for (int trial = 0; trial < 200; ++trial) {
    std::string src, tgt;
    for (int i = 0; i < 1 + int(rng() % 5); ++i) src += words[rng() % words.size()];
    for (int i = 0; i < 1 + int(rng() % 5); ++i) tgt += words[rng() % words.size()];
    auto ids = make_parallel(src, tgt, v);
    ASSERT_EQ(std::count(ids.begin(), ids.end(), special::parallel_sep), 1);
    auto sep = std::find(ids.begin(), ids.end(), special::parallel_sep);
    EXPECT_EQ(v.decode({ids.begin(), sep}), src);
    EXPECT_EQ(v.decode({sep + 1, ids.end()}), tgt);
  }
}

TEST(Parallel, MonolingualStreamsHaveNoSeparator) {
  const auto& v = shared_vocab();
  Document d{"text with <|parallel_sep|> inside", "", "", "en", "web", std::nullopt, DocKind::Mono};
  auto ids = document_tokens(d, v);
  EXPECT_EQ(std::count(ids.begin(), ids.end(), special::parallel_sep), 0);
}

TEST(Quality, Threshold) {
  std::vector<Document> docs;
  for (int q = 1; q <= 4; ++q) docs.push_back({"t", "", "", "en", "s", q, DocKind::Mono});
  auto kept = quality_filter(docs, 3);
  ASSERT_EQ(kept.size(), 2u);
  EXPECT_EQ(kept[0].quality, 3);
  EXPECT_EQ(kept[1].quality, 4);
  EXPECT_EQ(quality_filter(docs, 1).size(), 4u);
  EXPECT_THROW(quality_filter(docs, 0), std::invalid_argument);
}

TEST(Quality, UnlabeledAndIdempotent) {
  std::vector<Document> docs{{"a", "", "", "en", "s", 2, DocKind::Mono},
                             {"b", "", "", "en", "s", std::nullopt, DocKind::Mono},
                             {"c", "", "", "en", "s", 4, DocKind::Mono}};
  auto strict = quality_filter(docs, 3, false);
  ASSERT_EQ(strict.size(), 1u);
  EXPECT_EQ(strict[0].text, "c");
  auto lenient = quality_filter(docs, 3, true);
  ASSERT_EQ(lenient.size(), 2u);
  for (bool pass : {true, false}) {
    auto once = quality_filter(docs, 3, pass);
    auto twice = quality_filter(once, 3, pass);
    ASSERT_EQ(once.size(), twice.size());
    for (std::size_t i = 0; i < once.size(); ++i) EXPECT_EQ(once[i].text, twice[i].text);
  }
}

TEST(MixSpecFile, ParsesAndValidates) {
  auto good = write_temp("mix.yaml", R"(name: desk
entries:
  - label: english
    weight: 0.75
    match: {lang: en, kind: mono}
  - weight: 0.25
    match: {source: web, min_quality: 3}
)");
  auto spec = load_mix_spec(good);
  EXPECT_EQ(spec.name, "desk");
  ASSERT_EQ(spec.entries.size(), 2u);
  EXPECT_EQ(spec.entries[0].label, "english");
  EXPECT_EQ(spec.entries[1].match.min_quality, 3);

  auto bad = write_temp("badmix.yaml", R"(name: bad
colour: blue
entries:
  - weight: 0.5
    match: {lang: en, dialect: x}
  - weight: 0.4
)");
  try {
    load_mix_spec(bad);
    FAIL();
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("colour"), std::string::npos);
    EXPECT_NE(msg.find("dialect"), std::string::npos);
    EXPECT_NE(msg.find("sum to"), std::string::npos);
  }
}

TEST(MixSpecFile, YamlRoundTrip) {
  auto spec = mix_preset("anneal-final");
  auto again = parse_mix_spec(YAML::Load(YAML::Dump(to_yaml(spec))));
  ASSERT_EQ(again.entries.size(), spec.entries.size());
  for (std::size_t i = 0; i < spec.entries.size(); ++i) {
    EXPECT_EQ(again.entries[i].label, spec.entries[i].label);
    EXPECT_NEAR(again.entries[i].weight, spec.entries[i].weight, 1e-12);
    EXPECT_EQ(again.entries[i].match.describe(), spec.entries[i].match.describe());
  }
}

TEST(MixPresets, PretrainReferenceEnglishShare) {
  auto spec = mix_preset("pretrain-reference");
  spec.validate();
  EXPECT_EQ(spec.entries.size(), 71u);
  EXPECT_NEAR(spec.weight_of("FineWeb English") * 100, 41.34, 0.005);
  EXPECT_NEAR(spec.weight_of("CulturaX French") * 100, 6.09, 0.005);
  EXPECT_NEAR(spec.weight_of("Proof-pile-2 Arxiv") * 100, 2.51, 0.005);
}

TEST(MixPresets, AnnealFinal) {
  auto spec = mix_preset("anneal-final");
  spec.validate();
  EXPECT_NEAR(spec.weight_of("en"), 0.26, 1e-12);
  EXPECT_NEAR(spec.weight_of("math"), 0.06, 1e-12);
  EXPECT_NEAR(spec.weight_of("code"), 0.04, 1e-12);
  EXPECT_NEAR(spec.weight_of("parallel"), 0.06, 1e-12);
  EXPECT_THROW(spec.weight_of("instructions"), std::out_of_range);
  // Remaining languages keep their reference proportions.
  auto ref = mix_preset("anneal-reference");
  EXPECT_NEAR(spec.weight_of("fr") / spec.weight_of("de"), ref.weight_of("fr") / ref.weight_of("de"), 1e-12);
  EXPECT_GT(spec.weight_of("fr"), ref.weight_of("fr"));
  EXPECT_THROW(mix_preset("nope"), std::invalid_argument);
}

TEST(MixSampler, SingleEntryRoundRobin) {
  MixSpec spec{"one", {{"only", {}, 1.0}}};
  MixPools pools{{fixed_pool(5, 3, 10)}, 0};
  MixSampler s(spec, pools, 1);
  for (int pass = 0; pass < 4; ++pass) {
    std::set<std::int32_t> seen;
    for (int i = 0; i < 5; ++i) {
      auto d = s.next();
      if (pass == 0) {
        EXPECT_EQ((*d.tokens)[0], 10 + i);  // first pass in pool order
      }
      seen.insert((*d.tokens)[0]);
    }
    EXPECT_EQ(seen.size(), 5u);  // every pass visits every document once
  }
}

TEST(MixSampler, TwoEntryFrequencies) {
  MixPools pools{{fixed_pool(7, 4, 10), fixed_pool(3, 4, 50)}, 0};
  MixSampler s(two_entry_spec(0.7, 0.3), pools, 5);
  const int n = 100000;
  int a = 0;
  for (int i = 0; i < n; ++i) a += s.next().entry == 0;
  EXPECT_NEAR(double(a) / n, 0.7, 0.01);
  EXPECT_LE(std::abs(s.report()[0].drift), 3 * std::sqrt(0.7 * 0.3 / n));
}

TEST(MixSampler, TokenMassCorrectsForDocumentLength) {
  // Pool a documents are 4x longer; token shares still follow the weights.
  MixPools pools{{fixed_pool(4, 40, 10), fixed_pool(4, 10, 50)}, 0};
  const int n = 100000;
  MixSampler tokens(two_entry_spec(0.5, 0.5), pools, 9);
  for (int i = 0; i < n; ++i) tokens.next();
  auto r = tokens.report();
  EXPECT_NEAR(r[0].token_fraction, 0.5, 0.01);
  EXPECT_NEAR(r[0].document_fraction, 0.2, 0.01);

  MixSampler docs(two_entry_spec(0.5, 0.5), pools, 9, {MixAccounting::Documents, true, true});
  for (int i = 0; i < n; ++i) docs.next();
  EXPECT_NEAR(docs.report()[0].document_fraction, 0.5, 0.01);
  EXPECT_NEAR(docs.report()[0].token_fraction, 0.8, 0.01);
}

TEST(MixSampler, ConvergesWithinBandForManyEntries) {
  auto spec = mix_preset("anneal-final");
  MixPools pools;
  for (std::size_t e = 0; e < spec.entries.size(); ++e) pools.pools.push_back(fixed_pool(3, 8, 10));
  MixSampler s(spec, pools, 21);
  const double n = 200000;
  for (int i = 0; i < n; ++i) s.next();
  for (const auto& r : s.report()) EXPECT_LE(std::abs(r.drift), 3 * std::sqrt(r.target * (1 - r.target) / n)) << r.label;
}

TEST(MixSampler, ExhaustedPoolWithoutRecycling) {
  MixSpec spec{"one", {{"only", {}, 1.0}}};
  MixPools pools{{fixed_pool(2, 3, 10)}, 0};
  MixSampler s(spec, pools, 1, {MixAccounting::TokenMass, false, false});
  s.next();
  s.next();
  EXPECT_THROW(s.next(), std::runtime_error);
}

TEST(MixSampler, BuildPoolsRequiresMatches) {
  const auto& v = shared_vocab();
  std::vector<Document> docs{{"hello", "", "", "en", "web", std::nullopt, DocKind::Mono},
                             {"bonjour", "", "", "fr", "web", std::nullopt, DocKind::Mono},
                             {"hallo", "", "", "de", "web", std::nullopt, DocKind::Mono}};
  auto pools = build_pools(two_entry_spec(0.5, 0.5), docs, v);
  EXPECT_EQ(pools.pools[0].size(), 1u);
  EXPECT_EQ(pools.pools[1].size(), 1u);
  EXPECT_EQ(pools.unmatched, 1u);
  docs.erase(docs.begin() + 1);
  EXPECT_THROW(build_pools(two_entry_spec(0.5, 0.5), docs, v), std::invalid_argument);
}

TEST(MixSampler, Deterministic) {
  MixPools pools{{fixed_pool(7, 4, 10), fixed_pool(3, 6, 50)}, 0};
  MixSampler a(two_entry_spec(0.6, 0.4), pools, 77), b(two_entry_spec(0.6, 0.4), pools, 77);
  for (int i = 0; i < 1000; ++i) EXPECT_EQ(*a.next().tokens, *b.next().tokens);
}

TEST(Pack, TenTokenDocument) {
  std::vector<std::int32_t> doc{10, 11, 12, 13, 14, 15, 16, 17, 18, 19};
  auto rows = pack({doc}, 4, 100);
  ASSERT_EQ(rows.size(), 3u);
  for (const auto& r : rows) EXPECT_EQ(r.ids.size(), 4u);
  EXPECT_EQ(rows[0].ids, (std::vector<std::int32_t>{10, 11, 12, 13}));
  EXPECT_EQ(rows[2].ids, (std::vector<std::int32_t>{18, 19, special::eos, special::pad}));
  EXPECT_EQ(rows[2].padding, (std::vector<std::uint8_t>{0, 0, 0, 1}));
  EXPECT_EQ(std::count(rows[0].padding.begin(), rows[0].padding.end(), 1), 0);
}

TEST(Pack, TokenConservationAndBoundaries) {
  std::mt19937_64 rng(4);
  for (std::size_t L : {2u, 3u, 7u, 64u}) {
    std::vector<std::vector<std::int32_t>> docs;
    std::size_t total = 0;
    for (int d = 0; d < 40; ++d) {
      std::vector<std::int32_t> doc(1 + rng() % 30);
      for (auto& t : doc) t = static_cast<std::int32_t>(special::count + rng() % 50);
      total += doc.size();
      docs.push_back(doc);
    }
    auto rows = pack(docs, L, 60);
    std::size_t non_pad = 0, starts = 0;
    for (std::size_t r = 0; r < rows.size(); ++r) {
      ASSERT_EQ(rows[r].ids.size(), L);
      const auto pads = static_cast<std::size_t>(std::count(rows[r].padding.begin(), rows[r].padding.end(), 1));
      if (r + 1 < rows.size()) {
        EXPECT_EQ(pads, 0u);
      }
      non_pad += L - pads;
      starts += rows[r].doc_starts.size();
      for (auto id : rows[r].ids) EXPECT_LT(id, 60);
    }
    EXPECT_EQ(non_pad, total + docs.size());  // one EOS boundary per document
    EXPECT_EQ(starts, docs.size());
  }
  EXPECT_THROW(pack({{5}}, 1, 10), std::invalid_argument);
  EXPECT_THROW(pack({{50}}, 4, 10), std::out_of_range);
}

TEST(Pack, PretrainLengthPreset) {
  std::vector<std::int32_t> doc(5000, 7);
  auto rows = pack({doc}, 2048, 100);
  EXPECT_EQ(rows.size(), 3u);
  for (const auto& r : rows) EXPECT_EQ(r.ids.size(), 2048u);
}

TEST(Crop, ShortDocumentPassesThrough) {
  auto rng = derive_rng(1, {});
  std::vector<std::int32_t> doc{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  EXPECT_EQ(random_crop(doc, {}, rng), doc);
  EXPECT_THROW(random_crop(std::vector<std::int32_t>{}, {}, rng), std::invalid_argument);
}

TEST(Crop, LengthRangeAndContiguity) {
  auto rng = derive_rng(2, {});
  std::vector<std::int32_t> doc(10000);
  for (std::size_t i = 0; i < doc.size(); ++i) doc[i] = static_cast<std::int32_t>(i);
  std::size_t lo = SIZE_MAX, hi = 0;
  for (int i = 0; i < 100000; ++i) {
    auto c = random_crop(doc, {}, rng);
    ASSERT_GE(c.size(), 12u);
    ASSERT_LE(c.size(), 8192u);
    lo = std::min(lo, c.size());
    hi = std::max(hi, c.size());
    if (i % 1000 == 0) {
      for (std::size_t k = 1; k < c.size(); ++k) ASSERT_EQ(c[k], c[k - 1] + 1);
    }
  }
  EXPECT_LE(lo, 20u);
  EXPECT_GE(hi, 8180u);
}

TEST(Crop, LogUniformFavoursShortCrops) {
  auto rng = derive_rng(3, {});
  std::vector<std::int32_t> doc(10000, 1);
  CropPolicy policy{12, 8192, CropDistribution::LogUniform};
  std::size_t below_100 = 0;
  for (int i = 0; i < 10000; ++i) {
    auto len = random_crop(doc, policy, rng).size();
    ASSERT_GE(len, 12u);
    ASSERT_LE(len, 8192u);
    below_100 += len < 100;
  }
  // log(100/12)/log(8193/12) is about 0.32
  EXPECT_NEAR(below_100 / 10000.0, std::log(100.0 / 12) / std::log(8193.0 / 12), 0.02);
}
