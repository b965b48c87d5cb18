#pragma once

// Corpus ingestion, mixture sampling, parallel pairs, quality filtering,
// packing and random cropping.

#include <yaml-cpp/yaml.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eurobert/rng.hpp"
#include "eurobert/tokenizer.hpp"
#include "json.hpp"

namespace eurobert {

enum class DocKind { Mono, ParallelPair, Code, Math, Instruction };

inline std::string to_string(DocKind k) {
  switch (k) {
    case DocKind::Mono: return "mono";
    case DocKind::ParallelPair: return "parallel-pair";
    case DocKind::Code: return "code";
    case DocKind::Math: return "math";
    case DocKind::Instruction: return "instruction";
  }
  return "mono";
}

inline std::optional<DocKind> parse_doc_kind(std::string_view s) {
  for (auto k : {DocKind::Mono, DocKind::ParallelPair, DocKind::Code, DocKind::Math, DocKind::Instruction})
    if (s == to_string(k)) return k;
  return std::nullopt;
}

struct Document {
  std::string text;  // unused for parallel pairs
  std::string src, tgt;
  std::string lang;
  std::string source;
  std::optional<int> quality;  // educational-value bucket 1..4
  DocKind kind = DocKind::Mono;
};

class IngestError : public std::runtime_error {
 public:
  IngestError(std::size_t line, const std::string& what)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

/// One JSON object per line: text, lang and source are required (src and tgt
/// replace text for parallel pairs); quality (1..4) and kind are optional.
inline Document parse_document(const std::string& line, std::size_t line_no) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw IngestError(line_no, std::string("malformed JSON: ") + e.what());
  }
  if (!j.is_object()) throw IngestError(line_no, "record is not a JSON object");
  auto str = [&](const char* key, bool required) -> std::string {
    if (!j.contains(key)) {
      if (required) throw IngestError(line_no, std::string("missing required field \"") + key + "\"");
      return {};
    }
    if (!j[key].is_string()) throw IngestError(line_no, std::string("field \"") + key + "\" must be a string");
    return j[key].get<std::string>();
  };
  Document d;
  if (j.contains("kind")) {
    auto k = parse_doc_kind(str("kind", true));
    if (!k) throw IngestError(line_no, "unknown kind \"" + j["kind"].get<std::string>() + "\"");
    d.kind = *k;
  }
  d.lang = str("lang", true);
  d.source = str("source", true);
  if (d.kind == DocKind::ParallelPair) {
    d.src = str("src", true);
    d.tgt = str("tgt", true);
    if (d.src.empty()) throw IngestError(line_no, "parallel pair has an empty src");
    if (d.tgt.empty()) throw IngestError(line_no, "parallel pair has an empty tgt");
  } else {
    d.text = str("text", true);
  }
  if (j.contains("quality") && !j["quality"].is_null()) {
    if (!j["quality"].is_number_integer()) throw IngestError(line_no, "quality must be an integer");
    const int q = j["quality"].get<int>();
    if (q < 1 || q > 4) throw IngestError(line_no, "quality must lie in 1..4, got " + std::to_string(q));
    d.quality = q;
  }
  return d;
}

inline nlohmann::json to_json(const Document& d) {
  nlohmann::json j{{"lang", d.lang}, {"source", d.source}, {"kind", to_string(d.kind)}};
  if (d.kind == DocKind::ParallelPair) {
    j["src"] = d.src;
    j["tgt"] = d.tgt;
  } else {
    j["text"] = d.text;
  }
  if (d.quality) j["quality"] = *d.quality;
  return j;
}

/// Streaming reader; blank lines are skipped but still counted.
class DocumentReader {
 public:
  explicit DocumentReader(const std::string& path) : in_(path), path_(path) {
    if (!in_) throw std::runtime_error("cannot open corpus " + path);
  }

  std::optional<Document> next() {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      return parse_document(line, line_);
    }
    if (in_.bad()) throw std::runtime_error("read failure in " + path_);
    return std::nullopt;
  }

 private:
  std::ifstream in_;
  std::string path_;
  std::size_t line_ = 0;
};

inline std::vector<Document> ingest(const std::string& path) {
  DocumentReader reader(path);
  std::vector<Document> docs;
  while (auto d = reader.next()) docs.push_back(std::move(*d));
  return docs;
}

/// encode(src) ++ [parallel_sep] ++ encode(tgt).
inline std::vector<std::int32_t> make_parallel(std::string_view src, std::string_view tgt, const Vocab& vocab) {
  if (src.empty() || tgt.empty()) throw std::invalid_argument("parallel pair needs non-empty src and tgt");
  auto ids = vocab.encode(src).ids;
  ids.push_back(special::parallel_sep);
  auto t = vocab.encode(tgt).ids;
  ids.insert(ids.end(), t.begin(), t.end());
  return ids;
}

inline std::vector<std::int32_t> document_tokens(const Document& d, const Vocab& vocab) {
  if (d.kind == DocKind::ParallelPair) return make_parallel(d.src, d.tgt, vocab);
  return vocab.encode(d.text).ids;
}

inline bool passes_quality(const Document& d, int min_bucket, bool unlabeled_pass = true) {
  return d.quality ? *d.quality >= min_bucket : unlabeled_pass;
}

inline std::vector<Document> quality_filter(const std::vector<Document>& docs, int min_bucket, bool unlabeled_pass = true) {
  if (min_bucket < 1 || min_bucket > 4) throw std::invalid_argument("quality threshold must lie in 1..4");
  std::vector<Document> out;
  for (const auto& d : docs)
    if (passes_quality(d, min_bucket, unlabeled_pass)) out.push_back(d);
  return out;
}

// ---------------------------------------------------------------------------
// Mixture specification

struct Selector {
  std::optional<std::string> source, lang;
  std::optional<DocKind> kind;
  std::optional<int> min_quality;

  bool matches(const Document& d) const {
    if (source && d.source != *source) return false;
    if (lang && d.lang != *lang) return false;
    if (kind && d.kind != *kind) return false;
    if (min_quality && !(d.quality && *d.quality >= *min_quality)) return false;
    return true;
  }

  std::string describe() const {
    std::string s;
    auto add = [&](const std::string& k, const std::string& v) { s += (s.empty() ? "" : ", ") + k + "=" + v; };
    if (source) add("source", *source);
    if (lang) add("lang", *lang);
    if (kind) add("kind", to_string(*kind));
    if (min_quality) add("min_quality", std::to_string(*min_quality));
    return s.empty() ? "any" : s;
  }
};

struct MixEntry {
  std::string label;
  Selector match;
  double weight = 0.0;
};

struct MixSpec {
  std::string name;
  std::vector<MixEntry> entries;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (entries.empty()) p.push_back("mix '" + name + "' has no entries");
    double total = 0.0;
    for (const auto& e : entries) {
      if (!(e.weight >= 0.0) || !std::isfinite(e.weight)) p.push_back("entry '" + e.label + "' has invalid weight");
      total += e.weight;
    }
    if (!entries.empty() && std::abs(total - 1.0) > 1e-9) p.push_back("mix '" + name + "' weights sum to " + std::to_string(total) + ", not 1");
    return p;
  }

  void validate() const {
    auto p = problems();
    if (p.empty()) return;
    std::string msg;
    for (const auto& s : p) msg += (msg.empty() ? "" : "; ") + s;
    throw std::invalid_argument(msg);
  }

  double weight_of(std::string_view label) const {
    for (const auto& e : entries)
      if (e.label == label) return e.weight;
    throw std::out_of_range("no mix entry labelled " + std::string(label));
  }
};

/// YAML form:
///   name: desk
///   entries:
///     - label: english
///       weight: 0.5
///       match: {lang: en, kind: mono, source: web, min_quality: 3}
/// Unknown keys are rejected; all problems are reported together.
inline MixSpec parse_mix_spec(const YAML::Node& root) {
  std::vector<std::string> problems;
  MixSpec spec;
  if (!root.IsMap()) throw std::invalid_argument("mix spec must be a mapping with name and entries");
  for (const auto& kv : root) {
    const auto key = kv.first.as<std::string>();
    if (key != "name" && key != "entries") problems.push_back("unknown key '" + key + "'");
  }
  spec.name = root["name"] ? root["name"].as<std::string>() : "unnamed";
  if (!root["entries"] || !root["entries"].IsSequence()) {
    problems.push_back("'entries' must be a list");
  } else {
    std::size_t idx = 0;
    for (const auto& n : root["entries"]) {
      const std::string where = "entries[" + std::to_string(idx++) + "]";
      MixEntry e;
      if (!n.IsMap()) {
        problems.push_back(where + " must be a mapping");
        continue;
      }
      for (const auto& kv : n) {
        const auto key = kv.first.as<std::string>();
        if (key != "label" && key != "weight" && key != "match") problems.push_back(where + ": unknown key '" + key + "'");
      }
      if (!n["weight"]) {
        problems.push_back(where + ": missing weight");
      } else {
        try {
          e.weight = n["weight"].as<double>();
        } catch (const YAML::Exception&) {
          problems.push_back(where + ": weight is not a number");
        }
      }
      if (auto m = n["match"]) {
        if (!m.IsMap()) {
          problems.push_back(where + ": match must be a mapping");
        } else {
          for (const auto& kv : m) {
            const auto key = kv.first.as<std::string>();
            const auto val = kv.second.as<std::string>();
            if (key == "source") {
              e.match.source = val;
            } else if (key == "lang") {
              e.match.lang = val;
            } else if (key == "kind") {
              e.match.kind = parse_doc_kind(val);
              if (!e.match.kind) problems.push_back(where + ": unknown kind '" + val + "'");
            } else if (key == "min_quality") {
              try {
                e.match.min_quality = kv.second.as<int>();
              } catch (const YAML::Exception&) {
                problems.push_back(where + ": min_quality is not an integer");
              }
            } else {
              problems.push_back(where + ": unknown match key '" + key + "'");
            }
          }
        }
      }
      e.label = n["label"] ? n["label"].as<std::string>() : e.match.describe();
      spec.entries.push_back(std::move(e));
    }
  }
  for (auto& p : spec.problems()) problems.push_back(std::move(p));
  if (!problems.empty()) {
    std::string msg;
    for (const auto& s : problems) msg += (msg.empty() ? "" : "; ") + s;
    throw std::invalid_argument(msg);
  }
  return spec;
}

inline MixSpec load_mix_spec(const std::string& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path);
  } catch (const YAML::Exception& e) {
    throw std::invalid_argument("cannot parse mix spec " + path + ": " + e.what());
  }
  return parse_mix_spec(root);
}

/// Shortest text that reads back as the same double, so emitted files show
/// 0.1 rather than 0.10000000000000001.
inline YAML::Node yaml_number(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return YAML::Node(std::string(buf, r.ptr));
}

inline YAML::Node to_yaml(const MixSpec& spec) {
  YAML::Node root;
  root["name"] = spec.name;
  for (const auto& e : spec.entries) {
    YAML::Node n;
    n["label"] = e.label;
    n["weight"] = yaml_number(e.weight);
    YAML::Node m(YAML::NodeType::Map);
    if (e.match.source) m["source"] = *e.match.source;
    if (e.match.lang) m["lang"] = *e.match.lang;
    if (e.match.kind) m["kind"] = to_string(*e.match.kind);
    if (e.match.min_quality) m["min_quality"] = *e.match.min_quality;
    n["match"] = m;
    root["entries"].push_back(n);
  }
  return root;
}

namespace detail {

struct MixRow {
  const char* label;
  const char* source;
  const char* lang;
  DocKind kind;
  double amount;
};

inline MixSpec normalized_mix(std::string name, std::span<const MixRow> rows) {
  double total = 0.0;
  for (const auto& r : rows) total += r.amount;
  MixSpec spec{std::move(name), {}};
  for (const auto& r : rows) {
    MixEntry e;
    e.label = r.label;
    if (*r.source) e.match.source = r.source;
    if (*r.lang) e.match.lang = r.lang;
    e.match.kind = r.kind;
    e.weight = r.amount / total;
    spec.entries.push_back(std::move(e));
  }
  return spec;
}

// Pre-training sources with their token counts in millions.
inline constexpr MixRow kPretrainRows[] = {
    {"FineWeb English", "fineweb", "en", DocKind::Mono, 2002327},
    {"CulturaX French", "culturax", "fr", DocKind::Mono, 295113},
    {"CulturaX German", "culturax", "de", DocKind::Mono, 291514},
    {"CulturaX Spanish", "culturax", "es", DocKind::Mono, 290489},
    {"CulturaX Chinese", "culturax", "zh", DocKind::Mono, 238467},
    {"CulturaX Italian", "culturax", "it", DocKind::Mono, 120128},
    {"CulturaX Russian", "culturax", "ru", DocKind::Mono, 116797},
    {"CulturaX Portuguese", "culturax", "pt", DocKind::Mono, 112321},
    {"CulturaX Japanese", "culturax", "ja", DocKind::Mono, 112242},
    {"CulturaX Polish", "culturax", "pl", DocKind::Mono, 111659},
    {"CulturaX Turkish", "culturax", "tr", DocKind::Mono, 53126},
    {"CulturaX Arabic", "culturax", "ar", DocKind::Mono, 52413},
    {"CulturaX Vietnamese", "culturax", "vi", DocKind::Mono, 50661},
    {"CulturaX Dutch", "culturax", "nl", DocKind::Mono, 50646},
    {"CulturaX Hindi", "culturax", "hi", DocKind::Mono, 25544},
    {"EuroLLM Parallel es-en", "eurollm-parallel", "es-en", DocKind::ParallelPair, 50613},
    {"EuroLLM Parallel fr-en", "eurollm-parallel", "fr-en", DocKind::ParallelPair, 44891},
    {"EuroLLM Parallel de-en", "eurollm-parallel", "de-en", DocKind::ParallelPair, 30541},
    {"EuroLLM Parallel it-en", "eurollm-parallel", "it-en", DocKind::ParallelPair, 18702},
    {"EuroLLM Parallel ru-en", "eurollm-parallel", "ru-en", DocKind::ParallelPair, 13808},
    {"EuroLLM Parallel nl-en", "eurollm-parallel", "nl-en", DocKind::ParallelPair, 12666},
    {"EuroLLM Parallel pl-en", "eurollm-parallel", "pl-en", DocKind::ParallelPair, 7280},
    {"EuroLLM Parallel ar-en", "eurollm-parallel", "ar-en", DocKind::ParallelPair, 6414},
    {"EuroLLM Parallel zh-en", "eurollm-parallel", "zh-en", DocKind::ParallelPair, 6206},
    {"EuroLLM Parallel cs-en", "eurollm-parallel", "cs-en", DocKind::ParallelPair, 5458},
    {"EuroLLM Parallel hu-en", "eurollm-parallel", "hu-en", DocKind::ParallelPair, 4599},
    {"EuroLLM Parallel vi-en", "eurollm-parallel", "vi-en", DocKind::ParallelPair, 3395},
    {"EuroLLM Parallel tr-en", "eurollm-parallel", "tr-en", DocKind::ParallelPair, 2975},
    {"EuroLLM Parallel ja-en", "eurollm-parallel", "ja-en", DocKind::ParallelPair, 2687},
    {"EuroLLM Parallel hi-en", "eurollm-parallel", "hi-en", DocKind::ParallelPair, 1136},
    {"Proof-pile-2 Arxiv", "proof-pile-2/arxiv", "en", DocKind::Math, 121503},
    {"Proof-pile-2 Open-Web-Math", "proof-pile-2/open-web-math", "en", DocKind::Math, 54168},
    {"Proof-pile-2 Algebraic-stack", "proof-pile-2/algebraic-stack", "en", DocKind::Math, 35985},
    {"The-Stack v2 C++", "the-stack-v2", "c++", DocKind::Code, 120085},
    {"The-Stack v2 SQL", "the-stack-v2", "sql", DocKind::Code, 75348},
    {"The-Stack v2 C", "the-stack-v2", "c", DocKind::Code, 59404},
    {"The-Stack v2 JavaScript", "the-stack-v2", "javascript", DocKind::Code, 58440},
    {"The-Stack v2 PHP", "the-stack-v2", "php", DocKind::Code, 25620},
    {"The-Stack v2 C#", "the-stack-v2", "c#", DocKind::Code, 24842},
    {"The-Stack v2 Python", "the-stack-v2", "python", DocKind::Code, 21521},
    {"The-Stack v2 Java", "the-stack-v2", "java", DocKind::Code, 20950},
    {"The-Stack v2 Go", "the-stack-v2", "go", DocKind::Code, 14766},
    {"The-Stack v2 TypeScript", "the-stack-v2", "typescript", DocKind::Code, 11307},
    {"The-Stack v2 HTML", "the-stack-v2", "html", DocKind::Code, 7962},
    {"The-Stack v2 Lua", "the-stack-v2", "lua", DocKind::Code, 7733},
    {"The-Stack v2 Ruby", "the-stack-v2", "ruby", DocKind::Code, 5524},
    {"The-Stack v2 Vue", "the-stack-v2", "vue", DocKind::Code, 5411},
    {"The-Stack v2 R", "the-stack-v2", "r", DocKind::Code, 5287},
    {"The-Stack v2 Shell", "the-stack-v2", "shell", DocKind::Code, 4793},
    {"The-Stack v2 Swift", "the-stack-v2", "swift", DocKind::Code, 3766},
    {"The-Stack v2 reStructuredText", "the-stack-v2", "restructuredtext", DocKind::Code, 3761},
    {"The-Stack v2 JSON", "the-stack-v2", "json", DocKind::Code, 3586},
    {"The-Stack v2 Rust", "the-stack-v2", "rust", DocKind::Code, 3152},
    {"The-Stack v2 YAML", "the-stack-v2", "yaml", DocKind::Code, 2716},
    {"The-Stack v2 Dart", "the-stack-v2", "dart", DocKind::Code, 2678},
    {"The-Stack v2 RMarkdown", "the-stack-v2", "rmarkdown", DocKind::Code, 2058},
    {"The-Stack v2 HCL", "the-stack-v2", "hcl", DocKind::Code, 1423},
    {"The-Stack v2 PowerShell", "the-stack-v2", "powershell", DocKind::Code, 1027},
    {"The-Stack v2 VBA", "the-stack-v2", "vba", DocKind::Code, 1027},
    {"The-Stack v2 AsciiDoc", "the-stack-v2", "asciidoc", DocKind::Code, 970},
    {"The-Stack v2 Groovy", "the-stack-v2", "groovy", DocKind::Code, 540},
    {"The-Stack v2 CUDA", "the-stack-v2", "cuda", DocKind::Code, 406},
    {"The-Stack v2 Dockerfile", "the-stack-v2", "dockerfile", DocKind::Code, 281},
    {"The-Stack v2 Cython", "the-stack-v2", "cython", DocKind::Code, 103},
    {"The-Stack v2 COBOL", "the-stack-v2", "cobol", DocKind::Code, 96},
    {"The-Stack v2 GraphQL", "the-stack-v2", "graphql", DocKind::Code, 83},
    {"The-Stack v2 HTTP", "the-stack-v2", "http", DocKind::Code, 82},
    {"The-Stack v2 ABAP", "the-stack-v2", "abap", DocKind::Code, 71},
    {"The-Stack v2 RDoc", "the-stack-v2", "rdoc", DocKind::Code, 16},
    {"The-Stack v2 Metal", "the-stack-v2", "metal", DocKind::Code, 8},
    {"The-Stack v2 AppleScript", "the-stack-v2", "applescript", DocKind::Code, 7},
};

inline constexpr const char* kAnnealLangs[] = {"en", "fr", "de", "nl", "hi", "it", "ja", "pl", "pt", "ru", "es", "ar", "zh", "tr"};
// Reference annealing row, in the column order of kAnnealLangs, then code, math, parallel, instructions.
inline constexpr double kAnnealReference[] = {46.3, 5.8, 5.7, 1.0, 0.3, 1.5, 0.8, 1.0, 1.4, 1.0,
                                              5.7, 0.4, 4.7, 1.0, 8.7, 8.2, 5.2, 1.2};

inline std::vector<MixRow> anneal_rows(const double* values) {
  std::vector<MixRow> rows;
  for (std::size_t i = 0; i < 14; ++i) rows.push_back({kAnnealLangs[i], "", kAnnealLangs[i], DocKind::Mono, values[i]});
  rows.push_back({"code", "", "", DocKind::Code, values[14]});
  rows.push_back({"math", "", "", DocKind::Math, values[15]});
  rows.push_back({"parallel", "", "", DocKind::ParallelPair, values[16]});
  rows.push_back({"instructions", "", "", DocKind::Instruction, values[17]});
  return rows;
}

}  // namespace detail

/// Named mixtures:
///   pretrain-reference  every pre-training source, weighted by token count
///   anneal-reference    the reference annealing mix (normalized; the row sums to 99.9)
///   anneal-final        English 26%, math 6%, code 4%, parallel 6%, no
///                       instructions; the other languages share the
///                       remaining 58% in their reference proportions
inline MixSpec mix_preset(std::string_view name) {
  using namespace detail;
  if (name == "pretrain-reference") return normalized_mix("pretrain-reference", kPretrainRows);
  if (name == "anneal-reference") return normalized_mix("anneal-reference", anneal_rows(kAnnealReference));
  if (name == "anneal-final") {
    double values[18];
    std::copy(std::begin(kAnnealReference), std::end(kAnnealReference), values);
    double others = 0.0;
    for (std::size_t i = 1; i < 14; ++i) others += values[i];
    for (std::size_t i = 1; i < 14; ++i) values[i] *= 58.0 / others;
    values[0] = 26.0;
    values[14] = 4.0;
    values[15] = 6.0;
    values[16] = 6.0;
    values[17] = 0.0;
    auto spec = normalized_mix("anneal-final", anneal_rows(values));
    spec.entries.pop_back();  // instructions removed
    return spec;
  }
  throw std::invalid_argument("unknown mix preset '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Sampling

/// Tokenized documents grouped per mix entry. A document joins the first
/// entry whose selector it matches.
struct MixPools {
  std::vector<std::vector<std::vector<std::int32_t>>> pools;
  std::size_t unmatched = 0;
};

inline MixPools build_pools(const MixSpec& spec, const std::vector<Document>& docs, const Vocab& vocab) {
  spec.validate();
  MixPools out;
  out.pools.resize(spec.entries.size());
  for (const auto& d : docs) {
    bool placed = false;
    for (std::size_t e = 0; e < spec.entries.size() && !placed; ++e) {
      if (spec.entries[e].match.matches(d)) {
        auto ids = document_tokens(d, vocab);
        if (!ids.empty()) out.pools[e].push_back(std::move(ids));
        placed = true;
      }
    }
    out.unmatched += !placed;
  }
  std::string missing;
  for (std::size_t e = 0; e < spec.entries.size(); ++e)
    if (out.pools[e].empty() && spec.entries[e].weight > 0.0) missing += (missing.empty() ? "" : ", ") + spec.entries[e].label;
  if (!missing.empty()) throw std::invalid_argument("mix '" + spec.name + "': no documents match entries " + missing);
  return out;
}

enum class MixAccounting {
  TokenMass,  // weights are token shares; draw odds divided by mean pool document length
  Documents,  // weights are document-draw probabilities
};

struct MixSamplerOptions {
  MixAccounting accounting = MixAccounting::TokenMass;
  bool recycle = true;
  bool reshuffle = true;  // reshuffle a pool each time it is recycled
};

struct MixEntryReport {
  std::string label;
  double target = 0.0;
  std::uint64_t documents = 0;
  std::uint64_t tokens = 0;
  double token_fraction = 0.0;
  double document_fraction = 0.0;
  double drift = 0.0;  // token_fraction - target
};

class MixSampler {
 public:
  struct Draw {
    std::size_t entry;
    const std::vector<std::int32_t>* tokens;
  };

  MixSampler(MixSpec spec, MixPools pools, std::uint64_t seed, MixSamplerOptions options = {})
      : spec_(std::move(spec)), pools_(std::move(pools.pools)), options_(options), rng_(derive_rng(seed, {0x6d6978})) {
    spec_.validate();
    if (pools_.size() != spec_.entries.size()) throw std::invalid_argument("one pool per mix entry is required");
    std::vector<double> odds(pools_.size(), 0.0);
    for (std::size_t e = 0; e < pools_.size(); ++e) {
      const double w = spec_.entries[e].weight;
      if (w <= 0.0) continue;
      if (pools_[e].empty()) throw std::invalid_argument("mix entry '" + spec_.entries[e].label + "' has an empty pool");
      double mean_len = 0.0;
      for (const auto& d : pools_[e]) mean_len += static_cast<double>(d.size());
      mean_len /= static_cast<double>(pools_[e].size());
      odds[e] = options_.accounting == MixAccounting::TokenMass ? w / mean_len : w;
    }
    double total = 0.0;
    for (double o : odds) total += o;
    cdf_.resize(odds.size());
    double acc = 0.0;
    for (std::size_t e = 0; e < odds.size(); ++e) {
      acc += odds[e] / total;
      cdf_[e] = acc;
    }
    order_.resize(pools_.size());
    cursor_.assign(pools_.size(), 0);
    for (std::size_t e = 0; e < pools_.size(); ++e) {
      order_[e].resize(pools_[e].size());
      for (std::size_t i = 0; i < order_[e].size(); ++i) order_[e][i] = i;
    }
    documents_.assign(pools_.size(), 0);
    tokens_.assign(pools_.size(), 0);
  }

  Draw next() {
    const double u = uniform_real(rng_);
    std::size_t e = static_cast<std::size_t>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin());
    if (e >= cdf_.size()) e = last_positive();
    if (cursor_[e] == order_[e].size()) {
      if (!options_.recycle) throw std::runtime_error("pool for mix entry '" + spec_.entries[e].label + "' is exhausted");
      cursor_[e] = 0;
      if (options_.reshuffle) std::shuffle(order_[e].begin(), order_[e].end(), rng_);
    }
    const auto* doc = &pools_[e][order_[e][cursor_[e]++]];
    ++documents_[e];
    tokens_[e] += doc->size();
    ++draws_;
    return {e, doc};
  }

  std::uint64_t draws() const { return draws_; }
  const MixSpec& spec() const { return spec_; }

  std::vector<MixEntryReport> report() const {
    std::uint64_t total_tokens = 0;
    for (auto t : tokens_) total_tokens += t;
    std::vector<MixEntryReport> out;
    for (std::size_t e = 0; e < pools_.size(); ++e) {
      MixEntryReport r;
      r.label = spec_.entries[e].label;
      r.target = spec_.entries[e].weight;
      r.documents = documents_[e];
      r.tokens = tokens_[e];
      r.token_fraction = total_tokens ? static_cast<double>(tokens_[e]) / static_cast<double>(total_tokens) : 0.0;
      r.document_fraction = draws_ ? static_cast<double>(documents_[e]) / static_cast<double>(draws_) : 0.0;
      r.drift = (options_.accounting == MixAccounting::TokenMass ? r.token_fraction : r.document_fraction) - r.target;
      out.push_back(std::move(r));
    }
    return out;
  }

 private:
  std::size_t last_positive() const {
    for (std::size_t e = cdf_.size(); e-- > 0;)
      if (spec_.entries[e].weight > 0.0) return e;
    return 0;
  }

  MixSpec spec_;
  std::vector<std::vector<std::vector<std::int32_t>>> pools_;
  MixSamplerOptions options_;
  Rng rng_;
  std::vector<double> cdf_;
  std::vector<std::vector<std::size_t>> order_;
  std::vector<std::size_t> cursor_;
  std::vector<std::uint64_t> documents_, tokens_;
  std::uint64_t draws_ = 0;
};

inline nlohmann::json to_json(const std::vector<MixEntryReport>& report) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& r : report) {
    j.push_back({{"label", r.label}, {"target", r.target}, {"documents", r.documents}, {"tokens", r.tokens},
                 {"token_fraction", r.token_fraction}, {"document_fraction", r.document_fraction}, {"drift", r.drift}});
  }
  return j;
}

// ---------------------------------------------------------------------------
// Packing and cropping

struct PackedRow {
  std::vector<std::int32_t> ids;      // exactly L entries
  std::vector<std::uint8_t> padding;  // 1 marks padding
  std::vector<std::size_t> doc_starts;  // offsets where a document begins inside the row
};

/// Concatenates documents, each followed by EOS, and cuts the stream into rows
/// of exactly L tokens. Only the row produced by flush() may carry padding.
class Packer {
 public:
  Packer(std::size_t length, std::size_t vocab_size) : length_(length), vocab_size_(vocab_size) {
    if (length < 2) throw std::invalid_argument("packed row length must be at least 2");
  }

  void push(std::span<const std::int32_t> doc) {
    for (auto id : doc)
      if (id < 0 || static_cast<std::size_t>(id) >= vocab_size_) throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary");
    starts_pending_ = true;
    for (auto id : doc) append(id);
    append(special::eos);
  }

  bool ready() const { return !rows_.empty(); }

  PackedRow pop() {
    if (rows_.empty()) throw std::logic_error("no packed row is ready");
    PackedRow r = std::move(rows_.front());
    rows_.erase(rows_.begin());
    return r;
  }

  std::optional<PackedRow> flush() {
    if (current_.ids.empty()) return std::nullopt;
    current_.padding.assign(current_.ids.size(), 0);
    current_.padding.resize(length_, 1);
    current_.ids.resize(length_, special::pad);
    PackedRow r = std::move(current_);
    current_ = {};
    return r;
  }

 private:
  void append(std::int32_t id) {
    if (starts_pending_) {
      current_.doc_starts.push_back(current_.ids.size());
      starts_pending_ = false;
    }
    current_.ids.push_back(id);
    if (current_.ids.size() == length_) {
      current_.padding.assign(length_, 0);
      rows_.push_back(std::move(current_));
      current_ = {};
    }
  }

  std::size_t length_, vocab_size_;
  PackedRow current_;
  std::vector<PackedRow> rows_;
  bool starts_pending_ = false;
};

inline std::vector<PackedRow> pack(const std::vector<std::vector<std::int32_t>>& docs, std::size_t length, std::size_t vocab_size) {
  Packer packer(length, vocab_size);
  std::vector<PackedRow> rows;
  for (const auto& d : docs) {
    packer.push(d);
    while (packer.ready()) rows.push_back(packer.pop());
  }
  if (auto last = packer.flush()) rows.push_back(std::move(*last));
  return rows;
}

enum class CropDistribution { Uniform, LogUniform };

inline CropDistribution parse_crop_distribution(std::string_view s) {
  if (s == "uniform") return CropDistribution::Uniform;
  if (s == "log-uniform") return CropDistribution::LogUniform;
  throw std::invalid_argument("unknown crop distribution '" + std::string(s) + "' (expected uniform or log-uniform)");
}

inline std::string to_string(CropDistribution d) { return d == CropDistribution::Uniform ? "uniform" : "log-uniform"; }

struct CropPolicy {
  std::size_t min_len = 12;
  std::size_t max_len = 8192;
  CropDistribution distribution = CropDistribution::Uniform;
};

/// Contiguous window of the document. Documents shorter than min_len are
/// returned whole.
inline std::vector<std::int32_t> random_crop(std::span<const std::int32_t> doc, const CropPolicy& policy, Rng& rng) {
  if (doc.empty()) throw std::invalid_argument("cannot crop an empty document");
  if (policy.min_len < 1 || policy.min_len > policy.max_len) throw std::invalid_argument("crop bounds must satisfy 1 <= min_len <= max_len");
  if (doc.size() < policy.min_len) return {doc.begin(), doc.end()};
  const std::size_t hi = std::min(policy.max_len, doc.size());
  std::size_t len;
  if (policy.distribution == CropDistribution::Uniform) {
    len = uniform_index(rng, policy.min_len, hi);
  } else {
    const double lo_log = std::log(static_cast<double>(policy.min_len));
    const double hi_log = std::log(static_cast<double>(hi) + 1.0);
    len = static_cast<std::size_t>(std::exp(lo_log + (hi_log - lo_log) * uniform_real(rng)));
    len = std::clamp(len, policy.min_len, hi);
  }
  const std::size_t start = uniform_index(rng, 0, doc.size() - len);
  return {doc.begin() + static_cast<std::ptrdiff_t>(start), doc.begin() + static_cast<std::ptrdiff_t>(start + len)};
}

}  // namespace eurobert
