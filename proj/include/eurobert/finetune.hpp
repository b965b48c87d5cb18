#pragma once

// Task heads, task losses and the learning-rate grid search used for
// downstream evaluation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"

#include "eurobert/encoder.hpp"
#include "eurobert/evalstats.hpp"
#include "eurobert/optim.hpp"
#include "eurobert/rng.hpp"
#include "eurobert/tensor.hpp"
#include "eurobert/tokenizer.hpp"
#include "eurobert/trainer.hpp"

namespace eurobert {

class FinetuneError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class TaskKind { SeqClass, SeqRegress, TokenClass, Retrieval };
enum class Pooling { Mean, FirstToken };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::SeqClass: return "seq-class";
    case TaskKind::SeqRegress: return "seq-regress";
    case TaskKind::TokenClass: return "token-class";
    case TaskKind::Retrieval: return "retrieval";
  }
  return "?";
}

inline TaskKind parse_task_kind(std::string_view s) {
  for (auto k : {TaskKind::SeqClass, TaskKind::SeqRegress, TaskKind::TokenClass, TaskKind::Retrieval})
    if (s == to_string(k)) return k;
  throw FinetuneError("unknown task kind '" + std::string(s) + "' (seq-class, seq-regress, token-class, retrieval)");
}

inline std::string to_string(Pooling p) { return p == Pooling::Mean ? "mean" : "first-token"; }

inline Pooling parse_pooling(std::string_view s) {
  if (s == "mean") return Pooling::Mean;
  if (s == "first-token") return Pooling::FirstToken;
  throw FinetuneError("unknown pooling '" + std::string(s) + "' (mean, first-token)");
}

inline std::string metric_name(TaskKind k) {
  switch (k) {
    case TaskKind::SeqClass: return "accuracy";
    case TaskKind::SeqRegress: return "spearman";
    case TaskKind::TokenClass: return "entity_f1";
    case TaskKind::Retrieval: return "ndcg@10";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Heads

template <class T>
struct TaskHead {
  TaskKind kind = TaskKind::SeqClass;
  Pooling pooling = Pooling::Mean;
  std::size_t num_labels = 0;
  Tensor<T> projection;  // [d_model, K], [d_model, 1] for regression, none for retrieval

  static TaskHead create(TaskKind kind, std::size_t d_model, std::size_t num_labels, Pooling pooling, std::uint64_t seed,
                         double init_std = 0.02) {
    TaskHead h;
    h.kind = kind;
    h.pooling = pooling;
    if (kind == TaskKind::SeqClass || kind == TaskKind::TokenClass) {
      if (num_labels < 2) throw FinetuneError("a classification head needs at least 2 labels");
      h.num_labels = num_labels;
    } else if (kind == TaskKind::SeqRegress) {
      h.num_labels = 1;
    }
    if (kind != TaskKind::Retrieval) {
      Rng rng = derive_rng(seed, {0x4ead});
      std::normal_distribution<double> normal(0.0, init_std);
      std::vector<T> w(d_model * h.num_labels);
      for (auto& x : w) x = static_cast<T>(normal(rng));
      h.projection = Tensor<T>(Shape{d_model, h.num_labels}, std::move(w), true);
    }
    return h;
  }

  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    if (projection.defined()) out.emplace_back("head.projection", &projection);
    return out;
  }

  void zero_grad() {
    if (projection.defined()) projection.zero_grad();
  }

  TaskHead clone() const {
    TaskHead h = *this;
    if (projection.defined()) h.projection = cast<T>(projection, true);
    return h;
  }
};

inline nlohmann::json to_json(const TaskHead<float>& h, const std::vector<std::string>& labels = {}) {
  nlohmann::json j{{"kind", to_string(h.kind)}, {"pooling", to_string(h.pooling)}, {"num_labels", h.num_labels}, {"labels", labels}};
  if (h.projection.defined()) {
    j["shape"] = h.projection.shape();
    j["projection"] = std::vector<float>(h.projection.data().begin(), h.projection.data().end());
  }
  return j;
}

inline TaskHead<float> head_from_json(const nlohmann::json& j) {
  try {
    TaskHead<float> h;
    h.kind = parse_task_kind(j.at("kind").get<std::string>());
    h.pooling = parse_pooling(j.at("pooling").get<std::string>());
    h.num_labels = j.at("num_labels").get<std::size_t>();
    if (j.contains("projection")) {
      const auto shape = j.at("shape").get<Shape>();
      auto values = j.at("projection").get<std::vector<float>>();
      if (shape.size() != 2 || shape[1] != h.num_labels || numel(shape) != values.size()) throw FinetuneError("head projection does not match its shape");
      h.projection = Tensor<float>(shape, std::move(values), true);
    } else if (h.kind != TaskKind::Retrieval) {
      throw FinetuneError("head file lacks a projection");
    }
    return h;
  } catch (const nlohmann::json::exception& e) {
    throw FinetuneError(std::string("malformed head file: ") + e.what());
  }
}

/// [batch, seq, d] -> [batch, d].
template <class T>
Tensor<T> pool(const Tensor<T>& hidden, const TokenBatch& batch, Pooling pooling) {
  if (pooling == Pooling::Mean) {
    std::vector<std::uint8_t> keep(batch.padding.size());
    for (std::size_t i = 0; i < keep.size(); ++i) keep[i] = batch.padding[i] == 0;
    return masked_mean_rows(hidden, keep);
  }
  const std::size_t B = batch.batch, S = batch.seq, d = hidden.dim(2);
  std::vector<std::int32_t> rows(B);
  for (std::size_t b = 0; b < B; ++b) rows[b] = static_cast<std::int32_t>(b * S);
  return gather_rows(reshape(hidden, Shape{B * S, d}), rows);
}

/// Class logits [B, K], regression outputs [B], token logits [B*S, K] or
/// embeddings [B, d] depending on the head.
template <class T>
Tensor<T> head_forward(const TaskHead<T>& head, const Tensor<T>& hidden, const TokenBatch& batch) {
  switch (head.kind) {
    case TaskKind::SeqClass: return matmul(pool(hidden, batch, head.pooling), head.projection);
    case TaskKind::SeqRegress: return reshape(matmul(pool(hidden, batch, head.pooling), head.projection), Shape{batch.batch});
    case TaskKind::TokenClass:
      return matmul(reshape(hidden, Shape{batch.batch * batch.seq, hidden.dim(2)}), head.projection);
    case TaskKind::Retrieval: return pool(hidden, batch, head.pooling);
  }
  throw FinetuneError("unknown head kind");
}

// ---------------------------------------------------------------------------
// Losses

template <class T>
Tensor<T> classification_loss(const Tensor<T>& logits, const std::vector<std::int32_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw DimensionError("classification loss: logits do not match labels");
  for (auto l : labels)
    if (l < 0 || static_cast<std::size_t>(l) >= logits.dim(1))
      throw std::out_of_range("label " + std::to_string(l) + " outside " + std::to_string(logits.dim(1)) + " classes");
  const std::vector<std::uint8_t> all(labels.size(), 1);
  return softmax_cross_entropy(logits, labels, all);
}

template <class T>
Tensor<T> mse_loss(const Tensor<T>& predictions, const std::vector<double>& targets) {
  if (predictions.size() != targets.size()) throw DimensionError("mse loss: predictions do not match targets");
  std::vector<T> t(targets.begin(), targets.end());
  return mean(pow(sub(predictions, Tensor<T>(predictions.shape(), std::move(t))), T(2)));
}

/// Label -1 marks a position that does not contribute.
template <class T>
Tensor<T> token_classification_loss(const Tensor<T>& logits, const std::vector<std::int32_t>& labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) throw DimensionError("token loss: logits do not match labels");
  std::vector<std::uint8_t> sel(labels.size());
  std::vector<std::int32_t> tgt(labels.size(), 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == -1) continue;
    if (labels[i] < -1 || static_cast<std::size_t>(labels[i]) >= logits.dim(1))
      throw std::out_of_range("token label " + std::to_string(labels[i]) + " outside " + std::to_string(logits.dim(1)) + " labels");
    sel[i] = 1;
    tgt[i] = labels[i];
  }
  return softmax_cross_entropy(logits, tgt, sel);
}

struct TaskTargets {
  std::vector<std::int32_t> labels;  // classes, or per-token labels with -1 for unlabeled positions
  std::vector<double> scores;
};

template <class T>
Tensor<T> seq_losses(TaskKind kind, const Tensor<T>& predictions, const TaskTargets& targets) {
  switch (kind) {
    case TaskKind::SeqClass: return classification_loss(predictions, targets.labels);
    case TaskKind::SeqRegress: return mse_loss(predictions, targets.scores);
    case TaskKind::TokenClass: return token_classification_loss(predictions, targets.labels);
    case TaskKind::Retrieval: break;
  }
  throw FinetuneError("retrieval uses the contrastive loss, not seq_losses");
}

/// Cosine similarities over temperature, cross-entropy against the matching
/// document; every other document in the batch is a negative.
template <class T>
Tensor<T> infonce_loss(const Tensor<T>& queries, const Tensor<T>& docs, double temperature = 0.05) {
  if (queries.rank() != 2 || queries.shape() != docs.shape()) throw DimensionError("infonce: query and document embeddings must both be [B, d]");
  const std::size_t B = queries.dim(0);
  if (B < 2) throw FinetuneError("infonce needs at least 2 pairs for in-batch negatives");
  if (!(temperature > 0.0)) throw FinetuneError("infonce temperature must be positive");
  Tensor<T> qn, dn;
  try {
    qn = l2_normalize_rows(queries);
    dn = l2_normalize_rows(docs);
  } catch (const DimensionError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw FinetuneError(std::string("infonce: zero-norm embedding (") + e.what() + ")");
  }
  const auto sims = scale(matmul(qn, transpose(dn)), static_cast<T>(1.0 / temperature));
  std::vector<std::int32_t> tgt(B);
  for (std::size_t i = 0; i < B; ++i) tgt[i] = static_cast<std::int32_t>(i);
  const std::vector<std::uint8_t> all(B, 1);
  return softmax_cross_entropy(sims, tgt, all);
}

// ---------------------------------------------------------------------------
// Entity prediction

/// Most frequent label; among tied labels the one seen first wins, which is
/// the first sub-token's label whenever that label is part of the tie.
inline std::int32_t majority_vote(const std::vector<std::int32_t>& labels) {
  if (labels.empty()) throw FinetuneError("majority vote over an empty span");
  std::map<std::int32_t, std::size_t> count;
  std::size_t best = 0;
  for (auto l : labels) best = std::max(best, ++count[l]);
  for (auto l : labels)
    if (count[l] == best) return l;
  return labels.front();
}

/// Token index range [begin, end) of one entity.
using TokenSpan = std::pair<std::size_t, std::size_t>;

/// logits is row-major [n_tokens, K].
template <class T>
std::vector<std::int32_t> token_class_predict(std::span<const T> logits, std::size_t num_labels, const std::vector<TokenSpan>& spans) {
  if (num_labels == 0 || logits.size() % num_labels != 0) throw DimensionError("token logits do not divide into labels");
  const std::size_t n = logits.size() / num_labels;
  std::vector<std::int32_t> out;
  for (auto [b, e] : spans) {
    if (b >= e) throw FinetuneError("entity span covers no tokens");
    if (e > n) throw std::out_of_range("entity span reaches token " + std::to_string(e) + " of " + std::to_string(n));
    std::vector<std::int32_t> votes;
    for (std::size_t t = b; t < e; ++t) {
      const T* row = logits.data() + t * num_labels;
      votes.push_back(static_cast<std::int32_t>(std::max_element(row, row + num_labels) - row));
    }
    out.push_back(majority_vote(votes));
  }
  return out;
}

/// Tokens of an encoding that intersect each byte span.
inline std::vector<TokenSpan> token_spans_for(const Encoding& enc, const std::vector<std::pair<std::size_t, std::size_t>>& byte_spans) {
  std::vector<TokenSpan> out;
  for (auto [start, end] : byte_spans) {
    if (start >= end || end > enc.text_length) throw FinetuneError("entity byte span [" + std::to_string(start) + ", " + std::to_string(end) + ") is empty or outside the text");
    std::size_t b = enc.offsets.size(), e = 0;
    for (std::size_t t = 0; t < enc.offsets.size(); ++t) {
      if (enc.offsets[t].first < end && enc.offsets[t].second > start) {
        b = std::min(b, t);
        e = t + 1;
      }
    }
    if (b >= e) throw FinetuneError("entity span covers no tokens");
    out.emplace_back(b, e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Task data

struct TaskExample {
  std::string id;
  std::string lang;
  std::vector<std::int32_t> ids;           // with BOS and EOS
  std::int32_t label = -1;                 // seq-class
  double score = 0.0;                      // seq-regress
  std::vector<std::int32_t> token_labels;  // token-class, aligned with ids, -1 unlabeled
  std::vector<Entity> entities;            // token-class gold, token indices into ids
  std::vector<std::int32_t> positive;      // retrieval document, with BOS and EOS
  std::size_t words = 0;                   // whitespace words of the input text (the query for retrieval)
  std::size_t tokens = 0;                  // its subword count before truncation

  double fertility() const { return words ? static_cast<double>(tokens) / static_cast<double>(words) : 0.0; }
};

struct TaskData {
  TaskKind kind = TaskKind::SeqClass;
  std::vector<std::string> labels;  // class or entity label names; entity index 0 is "O"
  std::vector<TaskExample> train, validation, test;

  std::size_t num_labels() const { return labels.size(); }
};

/// BOS + tokens + EOS, truncated to max_len while keeping both markers.
/// Returns the index shift applied to token positions (always 1) and how many
/// tokens survived.
inline std::size_t frame_ids(const std::vector<std::int32_t>& tokens, std::size_t max_len, std::vector<std::int32_t>& out) {
  if (max_len < 3) throw FinetuneError("max_len must leave room for at least one token");
  const std::size_t keep = std::min(tokens.size(), max_len - 2);
  out.clear();
  out.push_back(special::bos);
  out.insert(out.end(), tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(keep));
  out.push_back(special::eos);
  return keep;
}

/// One JSON object per line. Common fields: text, lang, id, split
/// (train | validation | test, default train). Task fields: label (integer),
/// score (number), spans ([[start, end, label], ...] in bytes), or query and
/// positive for retrieval. Entities cut off by truncation are dropped.
inline TaskData read_task_data(std::istream& in, TaskKind kind, const Vocab& vocab, std::size_t max_len) {
  struct Raw {
    nlohmann::json j;
    std::size_t line;
  };
  std::vector<Raw> raws;
  std::string line;
  std::size_t line_no = 0;
  std::set<std::string> entity_names;
  std::int64_t max_label = -1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto where = "line " + std::to_string(line_no) + ": ";
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw IngestError(line_no, std::string("malformed JSON (") + e.what() + ")");
    }
    if (!j.is_object()) throw IngestError(line_no, "expected an object");
    auto need = [&](const char* key) {
      if (!j.contains(key)) throw IngestError(line_no, std::string("missing field ") + key + " for a " + to_string(kind) + " task");
    };
    switch (kind) {
      case TaskKind::SeqClass:
        need("text");
        need("label");
        if (!j["label"].is_number_integer() || j["label"].get<std::int64_t>() < 0) throw IngestError(line_no, "label must be a non-negative integer");
        max_label = std::max(max_label, j["label"].get<std::int64_t>());
        break;
      case TaskKind::SeqRegress:
        need("text");
        need("score");
        if (!j["score"].is_number()) throw IngestError(line_no, "score must be a number");
        break;
      case TaskKind::TokenClass:
        need("text");
        need("spans");
        for (const auto& s : j["spans"]) {
          if (!s.is_array() || s.size() != 3 || !s[0].is_number_unsigned() || !s[1].is_number_unsigned())
            throw IngestError(line_no, "each span must be [start, end, label]");
          entity_names.insert(s[2].is_string() ? s[2].get<std::string>() : s[2].dump());
        }
        break;
      case TaskKind::Retrieval:
        need("query");
        need("positive");
        break;
    }
    if (j.contains("split")) {
      const auto sp = j["split"].get<std::string>();
      if (sp != "train" && sp != "validation" && sp != "test") throw IngestError(line_no, "split must be train, validation or test");
    }
    raws.push_back({std::move(j), line_no});
  }

  TaskData data;
  data.kind = kind;
  std::map<std::string, std::int32_t> entity_index;
  if (kind == TaskKind::SeqClass) {
    for (std::int64_t l = 0; l <= std::max<std::int64_t>(max_label, 1); ++l) data.labels.push_back(std::to_string(l));
  } else if (kind == TaskKind::TokenClass) {
    data.labels.push_back("O");
    for (const auto& n : entity_names) {
      entity_index[n] = static_cast<std::int32_t>(data.labels.size());
      data.labels.push_back(n);
    }
  }

  for (auto& [j, ln] : raws) {
    TaskExample ex;
    ex.id = j.contains("id") ? (j["id"].is_string() ? j["id"].get<std::string>() : j["id"].dump()) : std::to_string(ln);
    ex.lang = j.value("lang", "");
    if (kind == TaskKind::Retrieval) {
      const auto query = j["query"].get<std::string>();
      const auto enc = vocab.encode(query);
      ex.words = whitespace_words(query).size();
      ex.tokens = enc.ids.size();
      frame_ids(enc.ids, max_len, ex.ids);
      frame_ids(vocab.encode(j["positive"].get<std::string>()).ids, max_len, ex.positive);
    } else {
      const auto text = j["text"].get<std::string>();
      const auto enc = vocab.encode(text);
      ex.words = whitespace_words(text).size();
      ex.tokens = enc.ids.size();
      const auto kept = frame_ids(enc.ids, max_len, ex.ids);
      if (kind == TaskKind::SeqClass) ex.label = j["label"].get<std::int32_t>();
      if (kind == TaskKind::SeqRegress) ex.score = j["score"].get<double>();
      if (kind == TaskKind::TokenClass) {
        ex.token_labels.assign(ex.ids.size(), -1);
        for (std::size_t t = 0; t < kept; ++t) ex.token_labels[t + 1] = 0;
        std::vector<std::pair<std::size_t, std::size_t>> byte_spans;
        std::vector<std::string> names;
        for (const auto& s : j["spans"]) {
          byte_spans.emplace_back(s[0].get<std::size_t>(), s[1].get<std::size_t>());
          names.push_back(s[2].is_string() ? s[2].get<std::string>() : s[2].dump());
        }
        std::vector<TokenSpan> spans;
        try {
          spans = token_spans_for(enc, byte_spans);
        } catch (const FinetuneError& e) {
          throw IngestError(ln, e.what());
        }
        for (std::size_t k = 0; k < spans.size(); ++k) {
          auto [b, e] = spans[k];
          if (e > kept) continue;
          for (std::size_t t = b; t < e; ++t) ex.token_labels[t + 1] = entity_index.at(names[k]);
          ex.entities.push_back({b + 1, e + 1, names[k]});
        }
      }
    }
    const auto split = j.value("split", std::string("train"));
    (split == "train" ? data.train : split == "validation" ? data.validation : data.test).push_back(std::move(ex));
  }
  return data;
}

inline TaskData read_task_file(const std::string& path, TaskKind kind, const Vocab& vocab, std::size_t max_len) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open task data " + path);
  return read_task_data(in, kind, vocab, max_len);
}

// ---------------------------------------------------------------------------
// Protocol

inline std::vector<double> lr_grid(double lo = 1e-5, double hi = 1e-4, std::size_t n = 10) {
  if (!(lo > 0.0) || !(lo < hi)) throw FinetuneError("lr_grid needs 0 < lo < hi");
  if (n < 2) throw FinetuneError("lr_grid needs at least 2 points");
  std::vector<double> out(n);
  const double ratio = std::log(hi / lo) / static_cast<double>(n - 1);
  for (std::size_t i = 0; i < n; ++i) out[i] = lo * std::exp(ratio * static_cast<double>(i));
  out.front() = lo;
  out.back() = hi;
  return out;
}

struct FinetuneProtocol {
  std::uint64_t steps = 10'000;
  std::size_t batch = 32;
  double warmup_fraction = 0.1;
  std::vector<double> lrs = lr_grid();
  std::size_t patience_epochs = 1;
  std::uint64_t eval_every = 0;  // 0 evaluates once per epoch
  double temperature = 0.05;
  bool head_only = false;
  Pooling pooling = Pooling::Mean;
  std::size_t max_len = 512;
  std::optional<double> rope_theta;
  AdamWConfig adam{};
  std::uint64_t seed = 0;

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (steps == 0) p.emplace_back("steps must be positive");
    if (batch == 0) p.emplace_back("batch must be positive");
    if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) p.emplace_back("warmup_fraction must lie in [0, 1)");
    if (lrs.empty()) p.emplace_back("the learning-rate grid is empty");
    for (double lr : lrs)
      if (!(lr > 0.0)) p.emplace_back("learning rates must be positive");
    if (patience_epochs == 0) p.emplace_back("patience must be at least one epoch");
    if (!(temperature > 0.0)) p.emplace_back("temperature must be positive");
    if (max_len < 3) p.emplace_back("max_len must be at least 3");
    return p;
  }
  void validate() const {
    const auto p = problems();
    if (!p.empty()) throw ConfigError(p);
  }

  std::uint64_t warmup_steps() const { return static_cast<std::uint64_t>(std::llround(warmup_fraction * static_cast<double>(steps))); }

  /// Linear warmup from 0, then linear decay reaching 0 at `steps`.
  double lr(double base, std::uint64_t step) const {
    const auto w = warmup_steps();
    if (step < w) return base * static_cast<double>(step) / static_cast<double>(w);
    if (step >= steps) return 0.0;
    return base * static_cast<double>(steps - step) / static_cast<double>(steps - w);
  }
};

/// "reference" is the full protocol; "desk" keeps its shape at a size that
/// runs in seconds on one core.
inline FinetuneProtocol finetune_protocol(std::string_view name, TaskKind kind) {
  FinetuneProtocol p;
  if (name == "reference") {
    p.steps = kind == TaskKind::Retrieval ? 1'000 : 10'000;
    return p;
  }
  if (name == "desk") {
    p.steps = kind == TaskKind::Retrieval ? 100 : 200;
    p.batch = 8;
    p.lrs = {1e-3, 3e-3};
    p.max_len = 64;
    return p;
  }
  throw FinetuneError("unknown finetune protocol '" + std::string(name) + "' (reference, desk)");
}

// ---------------------------------------------------------------------------
// Prediction and evaluation

inline TokenBatch batch_of(const std::vector<const std::vector<std::int32_t>*>& rows) {
  std::vector<std::vector<std::int32_t>> copy;
  for (auto* r : rows) copy.push_back(*r);
  return rows_to_batch(copy);
}

struct Predictions {
  std::vector<std::vector<float>> rows;  // class logits, scalar, token logits or embedding per example
};

/// Head outputs for each example, computed without recording a graph.
/// `positives` switches retrieval examples to their documents.
inline Predictions predict(const EncoderModel<float>& model, const TaskHead<float>& head, const std::vector<TaskExample>& examples,
                           std::size_t chunk, std::optional<double> theta, bool positives = false) {
  NoGradGuard guard;
  Predictions out;
  for (std::size_t i = 0; i < examples.size(); i += chunk) {
    std::vector<const std::vector<std::int32_t>*> rows;
    for (std::size_t k = i; k < std::min(examples.size(), i + chunk); ++k) rows.push_back(positives ? &examples[k].positive : &examples[k].ids);
    const auto batch = batch_of(rows);
    const auto y = head_forward(head, forward(model, batch, theta, false).hidden, batch);
    const auto data = y.data();
    if (head.kind == TaskKind::TokenClass) {
      const std::size_t K = head.num_labels, S = batch.seq;
      for (std::size_t b = 0; b < rows.size(); ++b)
        out.rows.emplace_back(data.begin() + static_cast<std::ptrdiff_t>(b * S * K), data.begin() + static_cast<std::ptrdiff_t>((b * S + rows[b]->size()) * K));
    } else {
      const std::size_t w = y.size() / rows.size();
      for (std::size_t b = 0; b < rows.size(); ++b)
        out.rows.emplace_back(data.begin() + static_cast<std::ptrdiff_t>(b * w), data.begin() + static_cast<std::ptrdiff_t>((b + 1) * w));
    }
  }
  return out;
}

inline double cosine(const std::vector<float>& a, const std::vector<float>& b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  return (aa > 0 && bb > 0) ? ab / std::sqrt(aa * bb) : 0.0;
}

/// Per-example scores that average to the task metric, with two exceptions.
/// Entity F1 is a corpus-level ratio, so each example gets its own F1, and
/// Spearman is a corpus-level correlation, so each example gets minus its
/// absolute error.
struct Evaluation {
  std::string metric;
  double value = 0.0;
  std::vector<double> per_example;
};

inline Evaluation evaluate(const EncoderModel<float>& model, const TaskHead<float>& head, const std::vector<TaskExample>& examples,
                           std::size_t chunk, std::optional<double> theta, const std::vector<std::string>& labels = {}) {
  if (examples.empty()) throw FinetuneError("evaluation split is empty");
  Evaluation ev;
  ev.metric = metric_name(head.kind);
  const auto pred = predict(model, head, examples, chunk, theta);
  switch (head.kind) {
    case TaskKind::SeqClass: {
      for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto& r = pred.rows[i];
        const auto arg = static_cast<std::int32_t>(std::max_element(r.begin(), r.end()) - r.begin());
        ev.per_example.push_back(arg == examples[i].label ? 1.0 : 0.0);
      }
      ev.value = std::accumulate(ev.per_example.begin(), ev.per_example.end(), 0.0) / static_cast<double>(examples.size());
      break;
    }
    case TaskKind::SeqRegress: {
      std::vector<double> p, g;
      for (std::size_t i = 0; i < examples.size(); ++i) {
        p.push_back(pred.rows[i][0]);
        g.push_back(examples[i].score);
        ev.per_example.push_back(-std::abs(p.back() - g.back()));
      }
      try {
        ev.value = spearman(p, g);
      } catch (const EvalError&) {
        ev.value = 0.0;  // constant predictions carry no ranking information
      }
      break;
    }
    case TaskKind::TokenClass: {
      std::vector<std::vector<Entity>> predicted, gold;
      for (std::size_t i = 0; i < examples.size(); ++i) {
        std::vector<TokenSpan> spans;
        for (const auto& e : examples[i].entities) spans.emplace_back(e.begin, e.end);
        const auto votes = token_class_predict<float>(pred.rows[i], head.num_labels, spans);
        std::vector<Entity> p;
        for (std::size_t k = 0; k < spans.size(); ++k) {
          if (votes[k] == 0) continue;
          const auto name = static_cast<std::size_t>(votes[k]) < labels.size() ? labels[votes[k]] : std::to_string(votes[k]);
          p.push_back({spans[k].first, spans[k].second, name});
        }
        ev.per_example.push_back(f1_entity({p}, {examples[i].entities}));
        predicted.push_back(std::move(p));
        gold.push_back(examples[i].entities);
      }
      ev.value = f1_entity(predicted, gold);
      break;
    }
    case TaskKind::Retrieval: {
      const auto docs = predict(model, head, examples, chunk, theta, true);
      for (std::size_t i = 0; i < examples.size(); ++i) {
        std::vector<std::pair<double, std::size_t>> scored;
        for (std::size_t k = 0; k < examples.size(); ++k) scored.emplace_back(-cosine(pred.rows[i], docs.rows[k]), k);
        std::sort(scored.begin(), scored.end());
        std::vector<std::string> ranked;
        for (auto& [s, k] : scored) ranked.push_back(std::to_string(k));
        ev.per_example.push_back(ndcg_at_k(ranked, {{std::to_string(i), 1.0}}, 10));
      }
      ev.value = std::accumulate(ev.per_example.begin(), ev.per_example.end(), 0.0) / static_cast<double>(examples.size());
      break;
    }
  }
  return ev;
}

// ---------------------------------------------------------------------------
// Grid search

struct GridRecord {
  double lr = 0.0;
  std::uint64_t step = 0;
  std::string split;
  std::string metric;
  double value = 0.0;
};

inline nlohmann::json to_json(const GridRecord& r) {
  return {{"lr", r.lr}, {"step", r.step}, {"split", r.split}, {"metric", r.metric}, {"value", r.value}};
}

struct GridPointResult {
  double lr = 0.0;
  double best_value = 0.0;
  std::uint64_t best_step = 0;
  std::uint64_t steps_run = 0;
  bool stopped_early = false;
};

struct FinetuneResult {
  std::string metric;
  double best_lr = 0.0;
  double best_value = 0.0;
  EncoderModel<float> model;
  TaskHead<float> head;
  std::vector<GridPointResult> points;  // in ascending learning-rate order
  std::vector<GridRecord> records;
};

/// Loss on one batch of examples; retrieval examples pair a query with its document.
inline Tensor<float> task_loss(const EncoderModel<float>& model, const TaskHead<float>& head, const std::vector<const TaskExample*>& batch,
                               const FinetuneProtocol& protocol) {
  auto encode = [&](const TokenBatch& tb) {
    if (!protocol.head_only) return forward(model, tb, protocol.rope_theta, false).hidden;
    NoGradGuard guard;
    return forward(model, tb, protocol.rope_theta, false).hidden;
  };
  std::vector<const std::vector<std::int32_t>*> rows;
  for (auto* ex : batch) rows.push_back(&ex->ids);
  const auto tb = batch_of(rows);
  const auto y = head_forward(head, encode(tb), tb);
  TaskTargets t;
  switch (head.kind) {
    case TaskKind::SeqClass:
      for (auto* ex : batch) t.labels.push_back(ex->label);
      break;
    case TaskKind::SeqRegress:
      for (auto* ex : batch) t.scores.push_back(ex->score);
      break;
    case TaskKind::TokenClass:
      for (auto* ex : batch) {
        t.labels.insert(t.labels.end(), ex->token_labels.begin(), ex->token_labels.end());
        t.labels.resize(t.labels.size() + (tb.seq - ex->token_labels.size()), -1);
      }
      break;
    case TaskKind::Retrieval: {
      std::vector<const std::vector<std::int32_t>*> docs;
      for (auto* ex : batch) docs.push_back(&ex->positive);
      const auto db = batch_of(docs);
      return infonce_loss(y, head_forward(head, encode(db), db), protocol.temperature);
    }
  }
  return seq_losses(head.kind, y, t);
}

/// Each learning rate starts from the same snapshot and sees the same example
/// order, so the selected configuration does not depend on grid order. Ties go
/// to the smaller rate.
inline FinetuneResult finetune(const EncoderModel<float>& snapshot, const TaskHead<float>& initial_head, const FinetuneProtocol& protocol,
                               const std::vector<TaskExample>& train, const std::vector<TaskExample>& validation,
                               const std::vector<std::string>& labels = {}) {
  protocol.validate();
  if (train.empty()) throw FinetuneError("training split is empty");
  if (validation.empty()) throw FinetuneError("validation split is empty");
  if (protocol.head_only && initial_head.kind == TaskKind::Retrieval) throw FinetuneError("a retrieval head has no parameters to tune on its own");
  if (initial_head.kind == TaskKind::Retrieval && protocol.batch < 2) throw FinetuneError("retrieval needs a batch of at least 2 for in-batch negatives");

  auto lrs = protocol.lrs;
  std::sort(lrs.begin(), lrs.end());
  lrs.erase(std::unique(lrs.begin(), lrs.end()), lrs.end());

  const std::size_t n = train.size();
  const std::uint64_t steps_per_epoch = (n + protocol.batch - 1) / protocol.batch;
  const std::uint64_t eval_every = protocol.eval_every ? protocol.eval_every : steps_per_epoch;
  const bool multi_epoch = protocol.steps > steps_per_epoch;

  std::vector<std::size_t> epoch_order;
  std::uint64_t cached_epoch = ~std::uint64_t{0};
  auto pick = [&](std::uint64_t sample) -> const TaskExample* {
    const std::uint64_t epoch = sample / n;
    if (epoch != cached_epoch) {
      auto rng = derive_rng(protocol.seed, {0xf1e, epoch});
      epoch_order.resize(n);
      std::iota(epoch_order.begin(), epoch_order.end(), 0);
      std::shuffle(epoch_order.begin(), epoch_order.end(), rng);
      cached_epoch = epoch;
    }
    return &train[epoch_order[sample % n]];
  };

  FinetuneResult result;
  result.metric = metric_name(initial_head.kind);
  bool have_best = false;
  for (double base : lrs) {
    auto model = snapshot.clone();
    auto head = initial_head.clone();
    auto params = head.named_parameters();
    if (!protocol.head_only) {
      auto enc = model.named_parameters();
      params.insert(params.begin(), enc.begin(), enc.end());
    }
    AdamW<float> opt(protocol.adam, params);

    GridPointResult point;
    point.lr = base;
    std::optional<EncoderModel<float>> best_model;
    std::optional<TaskHead<float>> best_head;
    bool point_has_best = false;
    std::size_t stale = 0;
    cached_epoch = ~std::uint64_t{0};

    for (std::uint64_t s = 0; s < protocol.steps; ++s) {
      std::vector<const TaskExample*> batch;
      for (std::size_t k = 0; k < protocol.batch; ++k) batch.push_back(pick(s * protocol.batch + k));
      model.zero_grad();
      head.zero_grad();
      auto loss = task_loss(model, head, batch, protocol);
      if (!std::isfinite(static_cast<double>(loss.item()))) throw TrainingDiverged(s);
      loss.backward();
      const auto lr = protocol.lr(base, s);
      opt.step(params, lr);
      result.records.push_back({base, s + 1, "train", "loss", static_cast<double>(loss.item())});
      point.steps_run = s + 1;

      const bool last = s + 1 == protocol.steps;
      if ((s + 1) % eval_every != 0 && !last) continue;
      const auto ev = evaluate(model, head, validation, protocol.batch, protocol.rope_theta, labels);
      result.records.push_back({base, s + 1, "validation", ev.metric, ev.value});
      if (!point_has_best || ev.value > point.best_value) {
        point_has_best = true;
        point.best_value = ev.value;
        point.best_step = s + 1;
        best_model = model.clone();
        best_head = head.clone();
        stale = 0;
      } else if (multi_epoch && ++stale >= protocol.patience_epochs && !last) {
        point.stopped_early = true;
        break;
      }
    }
    model.zero_grad();
    result.points.push_back(point);
    if (!have_best || point.best_value > result.best_value) {
      have_best = true;
      result.best_lr = base;
      result.best_value = point.best_value;
      result.model = std::move(*best_model);
      result.head = std::move(*best_head);
    }
  }
  return result;
}

}  // namespace eurobert
