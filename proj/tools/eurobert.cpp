// eurobert: tokenizer training, pretraining, annealing, fine-tuning,
// evaluation, ranking and self-verification from one binary.
//
// Exit codes: 0 success, 1 invalid input or configuration, 2 runtime
// failure, 3 verification failure.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "eurobert/checkpoint.hpp"
#include "eurobert/datamix.hpp"
#include "eurobert/encoder.hpp"
#include "eurobert/evalstats.hpp"
#include "eurobert/finetune.hpp"
#include "eurobert/run_config.hpp"
#include "eurobert/tokenizer.hpp"
#include "eurobert/trainer.hpp"
#include "svg.hpp"
#include "verify_suites.hpp"

using namespace eurobert;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Bad user input that is not tied to one of the library error types.
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class VerificationFailed : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Output helpers

/// --out wins, then EUROBERT_OUT_DIR, then the configured directory.
std::string output_dir(const std::string& flag, const std::string& configured) {
  std::string dir = flag;
  if (dir.empty())
    if (const char* env = std::getenv("EUROBERT_OUT_DIR"); env && *env) dir = env;
  if (dir.empty()) dir = configured;
  if (dir.empty()) throw InputError("no output directory: pass --out or set EUROBERT_OUT_DIR");
  fs::create_directories(dir);
  return dir;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::trunc | std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << content;
  if (!os) throw std::runtime_error("write failure on " + path.string());
}

std::string pretty(const json& j) { return j.dump(2) + "\n"; }

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw InputError(path + ": line " + std::to_string(n) + ": malformed JSON (" + e.what() + ")");
    }
    if (!out.back().is_object()) throw InputError(path + ": line " + std::to_string(n) + ": expected an object");
  }
  return out;
}

std::string id_string(const json& v) { return v.is_string() ? v.get<std::string>() : v.dump(); }

std::vector<Document> ingest_all(const std::vector<std::string>& paths) {
  std::vector<Document> docs;
  for (const auto& p : paths) {
    try {
      auto part = ingest(p);
      docs.insert(docs.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
    } catch (const IngestError& e) {
      throw InputError(p + ": " + e.what());
    }
  }
  return docs;
}

/// A checkpoint file, or the newest checkpoint in a directory (or in its
/// checkpoints/ subdirectory).
std::string resolve_checkpoint(const std::string& path) {
  if (fs::is_regular_file(path)) return path;
  if (fs::is_directory(path)) {
    if (auto c = latest_checkpoint(path)) return *c;
    if (auto c = latest_checkpoint((fs::path(path) / "checkpoints").string())) return *c;
    throw InputError("no checkpoint found in " + path);
  }
  throw InputError("checkpoint " + path + " does not exist");
}

// ---------------------------------------------------------------------------
// tokenizer-train

struct TokenizerArgs {
  std::vector<std::string> corpus;
  std::size_t vocab_size = 0;
  std::string out;
};

int cmd_tokenizer_train(const TokenizerArgs& a) {
  if (a.vocab_size <= static_cast<std::size_t>(kFirstMergeId)) {
    throw InputError("--vocab-size must exceed " + std::to_string(kFirstMergeId) + " (256 bytes plus " + std::to_string(special::count) +
                     " special tokens), got " + std::to_string(a.vocab_size));
  }
  std::vector<std::string> texts;
  for (const auto& path : a.corpus) {
    if (fs::path(path).extension() == ".jsonl") {
      for (const auto& d : ingest_all({path})) {
        if (d.kind == DocKind::ParallelPair) {
          texts.push_back(d.src);
          texts.push_back(d.tgt);
        } else {
          texts.push_back(d.text);
        }
      }
    } else {
      std::ifstream in(path);
      if (!in) throw std::runtime_error("cannot open corpus " + path);
      std::string line;
      while (std::getline(in, line))
        if (!line.empty()) texts.push_back(line);
    }
  }
  const auto out = output_dir(a.out, "");
  const auto vocab = train_bpe(texts, a.vocab_size);
  const auto path = fs::path(out) / "tokenizer.bpe";
  vocab.save(path.string());
  YAML::Node resolved;
  for (const auto& c : a.corpus) resolved["corpus"].push_back(fs::absolute(c).lexically_normal().string());
  resolved["vocab_size"] = a.vocab_size;
  resolved["learned_size"] = vocab.size();
  write_file(fs::path(out) / "resolved-config.yaml", dump_yaml(resolved));
  std::cout << "wrote " << path.string() << " (" << vocab.size() << " tokens from " << texts.size() << " texts)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// pretrain / anneal

struct TrainArgs {
  std::string config;
  std::string out;
  std::optional<std::string> resume;  // empty string: newest checkpoint in the output directory
  std::string checkpoint;             // anneal only
  std::optional<std::uint64_t> max_steps;
  bool plot = false;
};

std::uint64_t anneal_start(const TrainPlan& plan) {
  for (std::size_t i = 0; i < plan.phases.size(); ++i)
    if (plan.phases[i].schedule == ScheduleSegment::Cosine) return plan.phase_start(i);
  return plan.total_steps();
}

/// Keeps the records of steps before `from` and returns a log that appends.
std::unique_ptr<MetricsLog> open_metrics(const fs::path& path, std::uint64_t from) {
  std::vector<std::string> kept;
  if (from > 0 && fs::exists(path)) {
    std::ifstream in(path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = json::parse(line, nullptr, false);
      if (!j.is_discarded() && j.contains("step") && j["step"].get<std::uint64_t>() < from) kept.push_back(line);
    }
  }
  {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    for (const auto& l : kept) os << l << '\n';
  }
  return std::make_unique<MetricsLog>(path.string(), true);
}

void plot_loss(const fs::path& metrics, const fs::path& out) {
  std::map<std::string, svg::Series> by_phase;
  std::vector<std::string> order;
  for (const auto& r : read_jsonl(metrics.string())) {
    if (r["loss"].is_null()) continue;
    const auto phase = r["phase"].get<std::string>();
    if (!by_phase.count(phase)) {
      order.push_back(phase);
      by_phase[phase].name = phase;
    }
    by_phase[phase].points.emplace_back(r["step"].get<double>(), r["loss"].get<double>());
  }
  std::vector<svg::Series> series;
  for (const auto& p : order) series.push_back(by_phase[p]);
  svg::write(out.string(), svg::line_chart("MLM loss", "step", "loss", series));
}

int cmd_train(const TrainArgs& a, bool anneal) {
  auto cfg = load_run_config(a.config);
  {
    std::vector<std::string> missing;
    if (!cfg.tokenizer.empty() && !fs::is_regular_file(cfg.tokenizer)) missing.push_back("tokenizer: no such file " + cfg.tokenizer);
    for (const auto& c : cfg.corpus)
      if (!fs::is_regular_file(c)) missing.push_back("corpus: no such file " + c);
    if (!missing.empty()) throw ConfigError(missing);
  }
  auto vocab = std::make_shared<const Vocab>(load_run_vocab(cfg));
  bind_vocab(cfg, *vocab);
  cfg.model.validate();
  if (cfg.corpus.empty()) throw ConfigError({"config: 'corpus' lists no document files"});
  const auto out = output_dir(a.out, cfg.output_dir);
  cfg.output_dir = fs::absolute(out).lexically_normal().string();
  write_file(fs::path(out) / "resolved-config.yaml", dump_yaml(to_yaml(cfg)));

  auto docs = std::make_shared<const std::vector<Document>>(ingest_all(cfg.corpus));
  if (docs->empty()) throw InputError("the corpus holds no documents");
  const auto streams = mix_streams(cfg.plan, docs, vocab, cfg.seed);

  const std::uint64_t boundary = anneal_start(cfg.plan);
  std::uint64_t end = anneal ? cfg.plan.total_steps() : boundary;

  std::optional<Checkpoint> ckpt;
  std::string ckpt_path;
  if (anneal) {
    ckpt_path = resolve_checkpoint(a.checkpoint);
  } else if (a.resume) {
    ckpt_path = a.resume->empty() ? resolve_checkpoint((fs::path(out) / "checkpoints").string()) : resolve_checkpoint(*a.resume);
  }
  if (!ckpt_path.empty()) {
    ckpt = load_checkpoint(ckpt_path);
    auto saved = ckpt->model.config;
    saved.rope_theta = cfg.model.rope_theta;
    if (!(saved == cfg.model)) throw InputError("checkpoint " + ckpt_path + " holds a model whose architecture differs from the config");
    if (ckpt->progress.seed != cfg.seed) {
      throw InputError("checkpoint " + ckpt_path + " was trained with seed " + std::to_string(ckpt->progress.seed) + ", the config says " +
                       std::to_string(cfg.seed));
    }
    const auto step = ckpt->progress.step;
    if (anneal && step < boundary) {
      throw InputError("checkpoint " + ckpt_path + " is at step " + std::to_string(step) + ", before the annealing phase starts at step " +
                       std::to_string(boundary));
    }
    if (!anneal && step > boundary) {
      throw InputError("checkpoint " + ckpt_path + " is at step " + std::to_string(step) + ", past the end of pretraining at step " +
                       std::to_string(boundary) + "; use anneal");
    }
  }
  const std::uint64_t start = ckpt ? ckpt->progress.step : 0;
  if (a.max_steps) end = std::min(end, start + *a.max_steps);

  const auto ckpt_dir = (fs::path(out) / "checkpoints").string();
  const auto metrics_path = fs::path(out) / "metrics.jsonl";
  auto log = open_metrics(metrics_path, start);
  const std::uint64_t report_every = std::max<std::uint64_t>(1, (end - std::min(start, end)) / 10);
  TrainerOptions opts;
  opts.checkpoint_dir = ckpt_dir;
  opts.checkpoint_every = cfg.checkpoint_every;
  opts.on_step = [&](const StepRecord& r) {
    log->write(r);
    if ((r.step + 1) % report_every == 0 || r.step + 1 == end) {
      std::cout << "step " << r.step + 1 << "/" << end << " phase " << r.phase << " lr " << r.lr << " loss "
                << (r.loss ? std::to_string(*r.loss) : std::string("n/a")) << "\n";
    }
  };

  auto trainer = ckpt ? Trainer(cfg.plan, std::move(*ckpt), streams, opts)
                      : Trainer(cfg.plan, EncoderModel<float>::initialize(cfg.model, cfg.seed), streams, cfg.seed, opts);
  trainer.run(end);
  const auto final_path = checkpoint_path(ckpt_dir, trainer.progress().step);
  if (!fs::exists(final_path)) {
    fs::create_directories(ckpt_dir);
    trainer.save(final_path);
  }
  if (a.plot) plot_loss(metrics_path, fs::path(out) / "loss.svg");
  std::cout << (anneal ? "annealing" : "pretraining") << " reached step " << trainer.progress().step << "; checkpoint " << final_path << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// finetune

struct FinetuneArgs {
  std::string task, kind, tokenizer, checkpoint, model, protocol = "desk", out, pooling;
  std::optional<std::size_t> grid_size, batch, max_len;
  std::optional<double> lr_min, lr_max, warmup_fraction, temperature;
  std::optional<std::uint64_t> steps;
  std::uint64_t seed = 0;
  bool head_only = false;
};

Vocab load_vocab(const std::string& path) { return path.empty() ? Vocab() : Vocab::load(path); }

int cmd_finetune(const FinetuneArgs& a) {
  const auto kind = parse_task_kind(a.kind);
  auto protocol = finetune_protocol(a.protocol, kind);
  if (a.steps) protocol.steps = *a.steps;
  if (a.batch) protocol.batch = *a.batch;
  if (a.max_len) protocol.max_len = *a.max_len;
  if (a.warmup_fraction) protocol.warmup_fraction = *a.warmup_fraction;
  if (a.temperature) protocol.temperature = *a.temperature;
  if (!a.pooling.empty()) protocol.pooling = parse_pooling(a.pooling);
  protocol.head_only = a.head_only;
  protocol.seed = a.seed;
  if (a.grid_size || a.lr_min || a.lr_max) {
    const double lo = a.lr_min.value_or(1e-5), hi = a.lr_max.value_or(1e-4);
    const std::size_t n = a.grid_size.value_or(10);
    if (n == 0) throw InputError("--grid-size must be at least 1");
    protocol.lrs = n == 1 ? std::vector<double>{lo} : lr_grid(lo, hi, n);
  }
  protocol.validate();

  const auto vocab = load_vocab(a.tokenizer);
  EncoderModel<float> model;
  std::string source;
  if (!a.checkpoint.empty()) {
    source = resolve_checkpoint(a.checkpoint);
    model = load_checkpoint(source).model;
    if (model.config.vocab_size != vocab.size()) {
      throw InputError("the encoder has " + std::to_string(model.config.vocab_size) + " vocabulary entries, the tokenizer " + std::to_string(vocab.size()));
    }
  } else {
    auto c = encoder_preset(a.model.empty() ? "tiny" : a.model);
    c.vocab_size = vocab.size();
    c.validate();
    model = EncoderModel<float>::initialize(c, a.seed);
    source = "preset:" + (a.model.empty() ? std::string("tiny") : a.model);
  }
  if (protocol.max_len > model.config.max_seq_len) protocol.max_len = model.config.max_seq_len;

  TaskData data;
  try {
    data = read_task_file(a.task, kind, vocab, protocol.max_len);
  } catch (const IngestError& e) {
    throw InputError(a.task + ": " + e.what());
  }
  if (data.validation.empty()) throw InputError(a.task + ": no examples with split \"validation\"");
  const auto head = TaskHead<float>::create(kind, model.config.d_model, data.num_labels(), protocol.pooling, a.seed);

  const auto out = output_dir(a.out, "");
  YAML::Node resolved;
  resolved["task"] = fs::absolute(a.task).lexically_normal().string();
  resolved["kind"] = to_string(kind);
  resolved["tokenizer"] = a.tokenizer.empty() ? std::string("bytes") : fs::absolute(a.tokenizer).lexically_normal().string();
  resolved["encoder"] = source;
  resolved["protocol"] = a.protocol;
  resolved["steps"] = protocol.steps;
  resolved["batch"] = protocol.batch;
  resolved["warmup_fraction"] = protocol.warmup_fraction;
  for (double lr : protocol.lrs) resolved["lrs"].push_back(lr);
  resolved["patience_epochs"] = protocol.patience_epochs;
  resolved["temperature"] = protocol.temperature;
  resolved["pooling"] = to_string(protocol.pooling);
  resolved["head_only"] = protocol.head_only;
  resolved["max_len"] = protocol.max_len;
  resolved["seed"] = protocol.seed;
  write_file(fs::path(out) / "resolved-config.yaml", dump_yaml(resolved));

  auto result = finetune(model, head, protocol, data.train, data.validation, data.labels);

  std::ostringstream grid;
  for (const auto& r : result.records) grid << to_json(r).dump() << '\n';
  write_file(fs::path(out) / "grid.jsonl", grid.str());

  json summary{{"metric", result.metric}, {"best_lr", result.best_lr}, {"best_validation", result.best_value}, {"points", json::array()}};
  for (const auto& p : result.points) {
    summary["points"].push_back({{"lr", p.lr}, {"best_validation", p.best_value}, {"best_step", p.best_step}, {"steps_run", p.steps_run},
                                 {"stopped_early", p.stopped_early}});
  }
  if (!data.test.empty()) {
    const auto ev = evaluate(result.model, result.head, data.test, protocol.batch, protocol.rope_theta, data.labels);
    summary["test"] = ev.value;
  }
  write_file(fs::path(out) / "summary.json", pretty(summary));
  save_checkpoint((fs::path(out) / "best-encoder.ebck").string(), result.model, AdamW<float>{}, TrainProgress{0, 0, a.seed, "finetune"},
                  json{{"task", to_string(kind)}, {"best_lr", result.best_lr}});
  write_file(fs::path(out) / "best-head.json", to_json(result.head, data.labels).dump() + "\n");

  std::cout << "grid of " << protocol.lrs.size() << " learning rate" << (protocol.lrs.size() == 1 ? "" : "s") << "; best lr "
            << result.best_lr << " with validation " << result.metric << " " << result.best_value;
  if (summary.contains("test")) std::cout << ", test " << summary["test"].get<double>();
  std::cout << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

struct EvaluateArgs {
  std::string task, kind, tokenizer, checkpoint, head, split = "test", system = "model", out;
  std::string predictions, gold, metric;
  std::string compare;
  std::optional<std::size_t> max_len, quantiles;
  std::vector<double> fertility_edges;
  bool plot = false;
};

struct ExampleScore {
  std::string id, language;
  double score = 0.0;
  std::optional<double> length, fertility;
};

/// Predictions and gold labels in two JSONL files, joined on example_id.
std::pair<std::string, double> score_files(const EvaluateArgs& a, std::vector<ExampleScore>& rows) {
  const auto preds = read_jsonl(a.predictions);
  const auto gold = read_jsonl(a.gold);
  auto index = [](const std::vector<json>& recs, const std::string& path, const char* field) {
    std::map<std::string, const json*> by_id;
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const auto& r = recs[i];
      if (!r.contains("example_id") || !r.contains(field)) {
        throw InputError(path + ": record " + std::to_string(i + 1) + " needs example_id and " + field);
      }
      if (!by_id.emplace(id_string(r["example_id"]), &r).second) throw EvalError(path + ": duplicate example_id " + id_string(r["example_id"]));
    }
    return by_id;
  };
  const auto p = index(preds, a.predictions, "prediction");
  const auto g = index(gold, a.gold, "label");
  std::vector<std::string> missing, extra;
  for (const auto& [id, r] : g)
    if (!p.count(id)) missing.push_back(id);
  for (const auto& [id, r] : p)
    if (!g.count(id)) extra.push_back(id);
  if (!missing.empty() || !extra.empty()) {
    auto list = [](const std::vector<std::string>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size() && i < 5; ++i) s += (i ? ", " : "") + v[i];
      return s + (v.size() > 5 ? ", ..." : "");
    };
    std::string msg = "example ids of predictions and gold do not match";
    if (!missing.empty()) msg += "; no prediction for " + list(missing);
    if (!extra.empty()) msg += "; no gold label for " + list(extra);
    throw EvalError(msg);
  }

  auto entities = [](const json& v, const std::string& id) {
    std::vector<Entity> out;
    if (!v.is_array()) throw EvalError("example " + id + ": entities must be a list of [begin, end, label]");
    for (const auto& e : v) {
      if (!e.is_array() || e.size() != 3) throw EvalError("example " + id + ": entities must be a list of [begin, end, label]");
      out.push_back({e[0].get<std::size_t>(), e[1].get<std::size_t>(), id_string(e[2])});
    }
    return out;
  };

  std::vector<double> pv, gv;
  std::vector<std::vector<Entity>> pe, ge;
  for (const auto& [id, gr] : g) {
    const auto& pr = *p.at(id);
    ExampleScore row{id, gr->value("language", gr->value("lang", std::string("xx"))), 0.0, std::nullopt, std::nullopt};
    const auto& pred = pr["prediction"];
    const auto& lab = (*gr)["label"];
    try {
      if (a.metric == "accuracy") {
        row.score = pred == lab ? 1.0 : 0.0;
      } else if (a.metric == "spearman") {
        pv.push_back(pred.get<double>());
        gv.push_back(lab.get<double>());
        row.score = -std::abs(pv.back() - gv.back());
      } else if (a.metric == "entity_f1") {
        pe.push_back(entities(pred, id));
        ge.push_back(entities(lab, id));
        row.score = f1_entity({pe.back()}, {ge.back()});
      } else if (a.metric == "ndcg@10") {
        std::vector<std::string> ranked;
        for (const auto& d : pred) ranked.push_back(id_string(d));
        std::map<std::string, double> rel;
        for (const auto& [k, v] : lab.items()) rel[k] = v.get<double>();
        row.score = ndcg_at_k(ranked, rel, 10);
      } else {
        throw InputError("unknown metric '" + a.metric + "' (accuracy, spearman, entity_f1, ndcg@10)");
      }
    } catch (const json::exception& e) {
      throw EvalError("example " + id + ": " + e.what());
    }
    rows.push_back(row);
  }
  if (a.metric == "spearman") return {a.metric, spearman(pv, gv)};
  if (a.metric == "entity_f1") return {a.metric, f1_entity(pe, ge)};
  double sum = 0;
  for (const auto& r : rows) sum += r.score;
  return {a.metric, sum / static_cast<double>(rows.size())};
}

std::pair<std::string, double> score_model(const EvaluateArgs& a, std::vector<ExampleScore>& rows) {
  const auto ckpt_path = resolve_checkpoint(a.checkpoint);
  const auto model = load_checkpoint(ckpt_path).model;
  json hj;
  {
    std::ifstream in(a.head);
    if (!in) throw std::runtime_error("cannot open head " + a.head);
    try {
      hj = json::parse(in);
    } catch (const json::exception& e) {
      throw InputError(a.head + ": malformed JSON (" + e.what() + ")");
    }
  }
  const auto head = head_from_json(hj);
  if (!a.kind.empty() && parse_task_kind(a.kind) != head.kind) throw InputError("--kind " + a.kind + " does not match the head's " + to_string(head.kind));
  if (head.projection.defined() && head.projection.dim(0) != model.config.d_model) throw InputError("the head does not fit the encoder width");
  const auto vocab = load_vocab(a.tokenizer);
  if (model.config.vocab_size != vocab.size()) throw InputError("the encoder and the tokenizer disagree on the vocabulary size");
  const auto max_len = std::min(a.max_len.value_or(512), model.config.max_seq_len);
  TaskData data;
  try {
    data = read_task_file(a.task, head.kind, vocab, max_len);
  } catch (const IngestError& e) {
    throw InputError(a.task + ": " + e.what());
  }
  const auto& split = a.split == "train" ? data.train : a.split == "validation" ? data.validation : data.test;
  if (a.split != "train" && a.split != "validation" && a.split != "test") throw InputError("--split must be train, validation or test");
  if (split.empty()) throw InputError(a.task + ": the " + a.split + " split is empty");
  std::vector<std::string> labels = hj.value("labels", std::vector<std::string>{});
  const auto ev = evaluate(model, head, split, 16, std::nullopt, labels);
  for (std::size_t i = 0; i < split.size(); ++i) {
    const auto& ex = split[i];
    rows.push_back({ex.id, ex.lang.empty() ? "xx" : ex.lang, ev.per_example[i], static_cast<double>(ex.tokens), ex.fertility()});
  }
  return {ev.metric, ev.value};
}

int cmd_evaluate(const EvaluateArgs& a) {
  const bool file_mode = !a.predictions.empty() || !a.gold.empty();
  if (file_mode) {
    if (a.predictions.empty() || a.gold.empty() || a.metric.empty()) throw InputError("file mode needs --predictions, --gold and --metric");
  } else if (a.task.empty() || a.checkpoint.empty() || a.head.empty()) {
    throw InputError("model mode needs --task, --checkpoint and --head (or use --predictions, --gold and --metric)");
  }
  std::vector<ExampleScore> rows;
  const auto [metric, value] = file_mode ? score_files(a, rows) : score_model(a, rows);

  const auto out = output_dir(a.out, "");
  YAML::Node resolved;
  resolved["mode"] = file_mode ? "files" : "model";
  resolved["system"] = a.system;
  if (file_mode) {
    resolved["predictions"] = fs::absolute(a.predictions).lexically_normal().string();
    resolved["gold"] = fs::absolute(a.gold).lexically_normal().string();
  } else {
    resolved["task"] = fs::absolute(a.task).lexically_normal().string();
    resolved["checkpoint"] = fs::absolute(a.checkpoint).lexically_normal().string();
    resolved["head"] = fs::absolute(a.head).lexically_normal().string();
    resolved["tokenizer"] = a.tokenizer.empty() ? std::string("bytes") : fs::absolute(a.tokenizer).lexically_normal().string();
    resolved["split"] = a.split;
  }
  resolved["metric"] = metric;
  if (a.quantiles) resolved["quantiles"] = *a.quantiles;
  for (double e : a.fertility_edges) resolved["fertility_edges"].push_back(e);
  write_file(fs::path(out) / "resolved-config.yaml", dump_yaml(resolved));

  std::ostringstream per;
  for (const auto& r : rows) {
    json j{{"system", a.system}, {"language", r.language}, {"example_id", r.id}, {"score", r.score}};
    if (r.length) j["length"] = *r.length;
    if (r.fertility) j["fertility"] = *r.fertility;
    per << j.dump() << '\n';
  }
  write_file(fs::path(out) / "per-example.jsonl", per.str());
  write_file(fs::path(out) / "metrics.json", pretty({{"system", a.system}, {"metric", metric}, {"value", value}, {"examples", rows.size()}}));
  std::cout << a.system << " " << metric << " " << value << " over " << rows.size() << " examples\n";

  std::vector<double> scores;
  for (const auto& r : rows) scores.push_back(r.score);

  if (a.quantiles) {
    std::vector<double> lengths;
    for (const auto& r : rows) {
      if (!r.length) throw InputError("length quantiles need per-example lengths, which only model mode provides");
      lengths.push_back(*r.length);
    }
    const auto buckets = quantile_buckets(lengths, *a.quantiles);
    const auto means = bucket_means(scores, buckets, *a.quantiles);
    json j{{"metric", metric}, {"buckets", json::array()}};
    std::vector<std::pair<std::string, std::optional<double>>> bars;
    for (std::size_t b = 0; b < means.size(); ++b) {
      double lo = INFINITY, hi = -INFINITY;
      std::size_t n = 0;
      for (std::size_t i = 0; i < rows.size(); ++i)
        if (buckets[i] == b + 1) lo = std::min(lo, lengths[i]), hi = std::max(hi, lengths[i]), ++n;
      json e{{"bucket", b + 1}, {"count", n}};
      e["mean"] = means[b] ? json(*means[b]) : json(nullptr);
      if (n) e["min_length"] = lo, e["max_length"] = hi;
      j["buckets"].push_back(e);
      bars.emplace_back("Q" + std::to_string(b + 1), means[b]);
    }
    write_file(fs::path(out) / "length-quantiles.json", pretty(j));
    if (a.plot) svg::write((fs::path(out) / "length-quantiles.svg").string(), svg::bar_chart(metric + " by length quantile", metric, bars));
  }

  if (!a.fertility_edges.empty()) {
    std::vector<double> fert, other;
    for (const auto& r : rows) {
      if (!r.fertility) throw InputError("fertility bins need per-example fertility, which only model mode provides");
      fert.push_back(*r.fertility);
    }
    std::string other_name;
    if (!a.compare.empty()) {
      std::map<std::string, double> by_id;
      for (const auto& j : read_jsonl(a.compare)) {
        by_id[id_string(j.at("example_id"))] = j.at("score").get<double>();
        other_name = j.value("system", std::string("other"));
      }
      for (const auto& r : rows) {
        auto it = by_id.find(r.id);
        if (it == by_id.end()) throw EvalError("example " + r.id + " has no score in " + a.compare);
        other.push_back(it->second);
      }
      if (by_id.size() != rows.size()) throw EvalError(a.compare + " scores examples that are not in this evaluation");
    } else {
      other = scores;
    }
    const auto bins = fertility_bins(fert, scores, other, a.fertility_edges);
    json j{{"metric", metric}, {"system", a.system}, {"bins", json::array()}};
    if (!other_name.empty()) j["compared_to"] = other_name;
    std::vector<std::pair<std::string, std::optional<double>>> bars;
    for (const auto& b : bins) {
      json e{{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}};
      e["mean"] = b.mean_a ? json(*b.mean_a) : json(nullptr);
      if (!a.compare.empty()) {
        e["mean_other"] = b.mean_b ? json(*b.mean_b) : json(nullptr);
        e["difference"] = b.difference ? json(*b.difference) : json(nullptr);
      }
      j["bins"].push_back(e);
      std::ostringstream label;
      label << b.lo << "-" << b.hi;
      bars.emplace_back(label.str(), a.compare.empty() ? b.mean_a : b.difference);
    }
    write_file(fs::path(out) / "fertility-bins.json", pretty(j));
    if (a.plot) {
      const auto title = a.compare.empty() ? metric + " by fertility" : metric + " difference vs " + other_name + " by fertility";
      svg::write((fs::path(out) / "fertility-bins.svg").string(), svg::bar_chart(title, metric, bars));
    }
  }
  return 0;
}

// ---------------------------------------------------------------------------
// rank

struct RankArgs {
  std::vector<std::string> scores;
  double confidence = 0.95;
  std::size_t resamples = 1000;
  std::uint64_t seed = 0;
  std::string out;
  bool plot = false;
};

int cmd_rank(const RankArgs& a) {
  ScoreTable table;
  for (const auto& path : a.scores) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open scores " + path);
    try {
      read_score_records(in, table);
    } catch (const EvalError& e) {
      throw EvalError(path + ": " + e.what());
    }
  }
  table.validate();
  SignificanceOptions opt{a.confidence, a.resamples, a.seed};
  if (!(opt.confidence > 0.0 && opt.confidence < 1.0)) throw InputError("--confidence must lie in (0, 1)");
  if (opt.resamples == 0) throw InputError("--resamples must be positive");
  const auto report = rank_systems(table, opt);

  const auto out = output_dir(a.out, "");
  YAML::Node resolved;
  for (const auto& s : a.scores) resolved["scores"].push_back(fs::absolute(s).lexically_normal().string());
  resolved["confidence"] = opt.confidence;
  resolved["resamples"] = opt.resamples;
  resolved["seed"] = opt.seed;
  write_file(fs::path(out) / "resolved-config.yaml", dump_yaml(resolved));
  write_file(fs::path(out) / "ranking.jsonl", to_jsonl(report, table));
  const auto text = to_table(report);
  write_file(fs::path(out) / "ranking.txt", text);
  if (a.plot) {
    std::vector<std::pair<std::string, std::optional<double>>> bars;
    for (const auto& s : report.borda.ordering) bars.emplace_back(s, report.borda.value.at(s));
    svg::write((fs::path(out) / "ranking.svg").string(), svg::bar_chart("Normalized Borda count (lower is better)", "mean cluster", bars));
  }
  std::cout << text;
  return 0;
}

// ---------------------------------------------------------------------------
// verify

int cmd_verify(const std::string& suite) {
  std::vector<std::string> names;
  if (suite == "all") {
    for (const auto& [n, fn] : verify::suites()) names.push_back(n);
  } else {
    names.push_back(suite);
  }
  std::size_t failed = 0, total = 0;
  for (const auto& n : names) {
    for (const auto& c : verify::suites().at(n)()) {
      ++total;
      failed += !c.passed;
      std::cout << (c.passed ? "PASS " : "FAIL ") << n << "/" << c.name << ": " << c.detail << "\n";
    }
  }
  std::cout << (total - failed) << "/" << total << " checks passed\n";
  if (failed) throw VerificationFailed(std::to_string(failed) + " verification check" + (failed == 1 ? "" : "s") + " failed");
  return 0;
}

int report(const std::string& kind, const std::string& msg, int code) {
  std::cerr << "error: " << (kind.empty() ? "" : kind + ": ") << msg << "\n";
  return code;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multilingual encoder pretraining and evaluation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "eurobert 1.0.0");

  TokenizerArgs tok;
  auto* c_tok = app.add_subcommand("tokenizer-train", "Learn a byte-level BPE vocabulary");
  c_tok->add_option("corpus", tok.corpus, "Text files (one document per line) or JSONL document files")->required()->check(CLI::ExistingFile);
  c_tok->add_option("--vocab-size", tok.vocab_size, "Vocabulary size including bytes and special tokens")->required();
  c_tok->add_option("--out", tok.out, "Output directory");

  TrainArgs pre, ann;
  auto* c_pre = app.add_subcommand("pretrain", "Run the constant-rate phases of a training plan");
  c_pre->add_option("--config", pre.config, "Run configuration (YAML)")->required()->check(CLI::ExistingFile);
  c_pre->add_option("--resume", pre.resume, "Resume from a checkpoint file or directory (newest in the output directory when empty)")
      ->expected(0, 1);
  c_pre->add_option("--max-steps", pre.max_steps, "Run at most this many steps in this invocation");
  c_pre->add_option("--out", pre.out, "Output directory (overrides the config)");
  c_pre->add_flag("--plot", pre.plot, "Write loss.svg");

  auto* c_ann = app.add_subcommand("anneal", "Run the decaying phases from a pretraining checkpoint");
  c_ann->add_option("--config", ann.config, "Run configuration (YAML)")->required()->check(CLI::ExistingFile);
  c_ann->add_option("--checkpoint", ann.checkpoint, "Checkpoint file, or a directory holding checkpoints")->required();
  c_ann->add_option("--max-steps", ann.max_steps, "Run at most this many steps in this invocation");
  c_ann->add_option("--out", ann.out, "Output directory (overrides the config)");
  c_ann->add_flag("--plot", ann.plot, "Write loss.svg");

  FinetuneArgs ft;
  auto* c_ft = app.add_subcommand("finetune", "Grid-search fine-tuning on a task file");
  c_ft->add_option("--task", ft.task, "Task data (JSONL)")->required()->check(CLI::ExistingFile);
  c_ft->add_option("--kind", ft.kind, "seq-class, seq-regress, token-class or retrieval")->required();
  c_ft->add_option("--tokenizer", ft.tokenizer, "Vocabulary file (plain bytes when omitted)")->check(CLI::ExistingFile);
  auto* ft_ckpt = c_ft->add_option("--checkpoint", ft.checkpoint, "Encoder checkpoint file or directory");
  c_ft->add_option("--model", ft.model, "Encoder preset to initialize from scratch (default tiny)")->excludes(ft_ckpt);
  c_ft->add_option("--protocol", ft.protocol, "desk or reference")->capture_default_str();
  c_ft->add_option("--grid-size", ft.grid_size, "Learning rates on the grid (1 runs lr-min only)");
  c_ft->add_option("--lr-min", ft.lr_min, "Smallest learning rate");
  c_ft->add_option("--lr-max", ft.lr_max, "Largest learning rate");
  c_ft->add_option("--steps", ft.steps, "Optimizer steps per grid point");
  c_ft->add_option("--batch", ft.batch, "Batch size");
  c_ft->add_option("--warmup-fraction", ft.warmup_fraction, "Share of steps spent warming up");
  c_ft->add_option("--temperature", ft.temperature, "InfoNCE temperature (retrieval)");
  c_ft->add_option("--pooling", ft.pooling, "mean or first-token");
  c_ft->add_option("--max-len", ft.max_len, "Maximum tokens per example, markers included");
  c_ft->add_option("--seed", ft.seed, "Seed for head initialization and example order");
  c_ft->add_flag("--head-only", ft.head_only, "Freeze the encoder");
  c_ft->add_option("--out", ft.out, "Output directory");

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Score a fine-tuned model on a split, or predictions against gold labels");
  c_ev->add_option("--task", ev.task, "Task data (JSONL)")->check(CLI::ExistingFile);
  c_ev->add_option("--kind", ev.kind, "Task kind; must match the head");
  c_ev->add_option("--tokenizer", ev.tokenizer, "Vocabulary file (plain bytes when omitted)")->check(CLI::ExistingFile);
  c_ev->add_option("--checkpoint", ev.checkpoint, "Encoder checkpoint file or directory");
  c_ev->add_option("--head", ev.head, "Task head written by finetune")->check(CLI::ExistingFile);
  c_ev->add_option("--split", ev.split, "train, validation or test")->capture_default_str();
  c_ev->add_option("--system", ev.system, "System name for the score records")->capture_default_str();
  c_ev->add_option("--max-len", ev.max_len, "Maximum tokens per example, markers included");
  c_ev->add_option("--predictions", ev.predictions, "Predictions (JSONL with example_id and prediction)")->check(CLI::ExistingFile);
  c_ev->add_option("--gold", ev.gold, "Gold labels (JSONL with example_id and label)")->check(CLI::ExistingFile);
  c_ev->add_option("--metric", ev.metric, "accuracy, spearman, entity_f1 or ndcg@10 (file mode)");
  c_ev->add_option("--quantiles", ev.quantiles, "Report the metric per input-length quantile");
  c_ev->add_option("--fertility-edges", ev.fertility_edges, "Report the metric per fertility bin with these edges")->delimiter(',');
  c_ev->add_option("--compare", ev.compare, "Another system's per-example.jsonl for fertility-bin differences")->check(CLI::ExistingFile);
  c_ev->add_flag("--plot", ev.plot, "Write SVG charts for the analyses");
  c_ev->add_option("--out", ev.out, "Output directory");

  RankArgs rk;
  auto* c_rk = app.add_subcommand("rank", "Significance clusters per language and normalized Borda ranking");
  c_rk->add_option("--scores", rk.scores, "Score record files (JSONL)")->required()->check(CLI::ExistingFile);
  c_rk->add_option("--confidence", rk.confidence, "Confidence level")->capture_default_str();
  c_rk->add_option("--resamples", rk.resamples, "Bootstrap resamples")->capture_default_str();
  c_rk->add_option("--seed", rk.seed, "Bootstrap seed")->capture_default_str();
  c_rk->add_option("--out", rk.out, "Output directory");
  c_rk->add_flag("--plot", rk.plot, "Write ranking.svg");

  std::string suite = "all";
  auto* c_vf = app.add_subcommand("verify", "Run invariant suites with fixed seeds");
  c_vf->add_option("--suite", suite, "grad, rope, gqa, mask, mix, sched or all")
      ->check(CLI::IsMember({"grad", "rope", "gqa", "mask", "mix", "sched", "all"}))
      ->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (c_tok->parsed()) return cmd_tokenizer_train(tok);
    if (c_pre->parsed()) return cmd_train(pre, false);
    if (c_ann->parsed()) return cmd_train(ann, true);
    if (c_ft->parsed()) return cmd_finetune(ft);
    if (c_ev->parsed()) return cmd_evaluate(ev);
    if (c_rk->parsed()) return cmd_rank(rk);
    if (c_vf->parsed()) return cmd_verify(suite);
  } catch (const VerificationFailed& e) {
    return report("", e.what(), 3);
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid configuration (" << e.problems().size() << " problem" << (e.problems().size() == 1 ? "" : "s") << ")\n";
    for (const auto& p : e.problems()) std::cerr << "  " << p << "\n";
    std::cerr << "Run with --help for more information.\n";
    return 1;
  } catch (const IngestError& e) {
    return report("input", e.what(), 1);
  } catch (const TokenizerError& e) {
    return report("tokenizer", e.what(), 1);
  } catch (const std::invalid_argument& e) {
    return report("", e.what(), 1);
  } catch (const std::exception& e) {
    return report("", e.what(), 2);
  }
  return 1;
}
