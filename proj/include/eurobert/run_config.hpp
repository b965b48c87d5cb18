#pragma once

// Run configuration files: a model, a training plan, data locations and
// output settings. Every key is checked and all problems are reported at once.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "eurobert/datamix.hpp"
#include "eurobert/encoder.hpp"
#include "eurobert/tokenizer.hpp"
#include "eurobert/trainer.hpp"

namespace eurobert {

struct RunConfig {
  std::string name = "run";
  std::uint64_t seed = 0;
  std::string output_dir = "runs/run";
  std::uint64_t checkpoint_every = 1000;
  std::string tokenizer;            // vocabulary file; empty means plain bytes
  std::vector<std::string> corpus;  // document files (one JSON object per line)
  std::string model_preset;
  EncoderConfig model;
  bool vocab_size_explicit = false;
  std::string plan_preset;
  TrainPlan plan;
};

namespace detail {

class YamlReader {
 public:
  std::vector<std::string> problems;

  void keys(const YAML::Node& node, const std::string& where, const std::set<std::string>& allowed) {
    if (!node.IsMap()) {
      problems.push_back(where + ": expected a mapping");
      return;
    }
    for (const auto& kv : node) {
      const auto key = kv.first.as<std::string>();
      if (!allowed.count(key)) {
        std::string list;
        for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
        problems.push_back(where + ": unknown key '" + key + "' (allowed: " + list + ")");
      }
    }
  }

  template <class V>
  void get(const YAML::Node& node, const char* key, const std::string& where, V& out) {
    if (!node.IsMap() || !node[key]) return;
    try {
      out = node[key].as<V>();
    } catch (const YAML::Exception&) {
      problems.push_back(where + "." + key + ": cannot read '" + YAML::Dump(node[key]) + "'");
    }
  }

  template <class E, class Parse>
  void get_enum(const YAML::Node& node, const char* key, const std::string& where, E& out, Parse&& parse) {
    std::string s;
    if (!node.IsMap() || !node[key]) return;
    get(node, key, where, s);
    try {
      out = parse(s);
    } catch (const std::exception& e) {
      problems.push_back(where + "." + key + ": " + e.what());
    }
  }
};

inline void read_encoder_fields(YamlReader& r, const YAML::Node& n, EncoderConfig& c) {
  r.get(n, "n_layers", "model", c.n_layers);
  r.get(n, "d_model", "model", c.d_model);
  r.get(n, "d_ffn", "model", c.d_ffn);
  r.get(n, "n_heads", "model", c.n_heads);
  r.get(n, "n_kv_heads", "model", c.n_kv_heads);
  r.get(n, "vocab_size", "model", c.vocab_size);
  r.get(n, "rope_theta", "model", c.rope_theta);
  r.get(n, "rmsnorm_eps", "model", c.rmsnorm_eps);
  r.get(n, "max_seq_len", "model", c.max_seq_len);
  r.get(n, "init_std", "model", c.init_std);
  r.get(n, "tie_embeddings", "model", c.tie_embeddings);
}

inline const std::set<std::string> kEncoderKeys{"preset", "n_layers", "d_model", "d_ffn", "n_heads", "n_kv_heads", "vocab_size",
                                               "rope_theta", "rmsnorm_eps", "max_seq_len", "init_std", "tie_embeddings"};

inline void read_phase(YamlReader& r, const YAML::Node& n, const std::string& where, PhaseSpec& p) {
  r.keys(n, where, {"name", "steps", "mask_ratio", "rope_theta", "schedule", "length", "seq_len", "crop_min", "crop_distribution",
                    "mix", "min_quality", "unlabeled_pass"});
  r.get(n, "name", where, p.name);
  r.get(n, "steps", where, p.steps);
  r.get(n, "mask_ratio", where, p.mask_ratio);
  r.get(n, "rope_theta", where, p.rope_theta);
  r.get_enum(n, "schedule", where, p.schedule, parse_schedule_segment);
  r.get_enum(n, "length", where, p.length, parse_length_policy);
  r.get(n, "seq_len", where, p.seq_len);
  r.get(n, "crop_min", where, p.crop_min);
  r.get_enum(n, "crop_distribution", where, p.crop_distribution, parse_crop_distribution);
  r.get(n, "mix", where, p.mix);
  r.get(n, "min_quality", where, p.min_quality);
  r.get(n, "unlabeled_pass", where, p.unlabeled_pass);
}

}  // namespace detail

/// Model architecture from a preset file or mapping: `preset` gives the base,
/// the other keys override it.
inline EncoderConfig parse_encoder_config(const YAML::Node& n, std::vector<std::string>& problems, std::string* preset_out = nullptr,
                                          bool* vocab_explicit = nullptr) {
  detail::YamlReader r;
  EncoderConfig c;
  if (n.IsScalar()) {
    const auto name = n.as<std::string>();
    try {
      c = encoder_preset(name);
      if (preset_out) *preset_out = name;
    } catch (const ConfigError& e) {
      problems.insert(problems.end(), e.problems().begin(), e.problems().end());
    }
    return c;
  }
  r.keys(n, "model", detail::kEncoderKeys);
  if (n.IsMap() && n["preset"]) {
    std::string name;
    r.get(n, "preset", "model", name);
    try {
      c = encoder_preset(name);
      if (preset_out) *preset_out = name;
    } catch (const ConfigError& e) {
      r.problems.insert(r.problems.end(), e.problems().begin(), e.problems().end());
    }
  }
  detail::read_encoder_fields(r, n, c);
  if (vocab_explicit) *vocab_explicit = n.IsMap() && n["vocab_size"];
  problems.insert(problems.end(), r.problems.begin(), r.problems.end());
  return c;
}

/// Training plan: `preset` gives the base; phases listed by name override the
/// preset phase of the same name, unknown names are appended.
inline TrainPlan parse_train_plan(const YAML::Node& n, std::vector<std::string>& problems, std::string* preset_out = nullptr) {
  detail::YamlReader r;
  TrainPlan plan;
  if (n.IsScalar()) {
    try {
      plan = train_plan_preset(n.as<std::string>());
      if (preset_out) *preset_out = n.as<std::string>();
    } catch (const std::exception& e) {
      problems.push_back(std::string("train: ") + e.what());
    }
    return plan;
  }
  r.keys(n, "train", {"preset", "base_lr", "warmup", "batch_size", "mask_strategy", "adam", "phases"});
  if (n.IsMap() && n["preset"]) {
    std::string name;
    r.get(n, "preset", "train", name);
    try {
      plan = train_plan_preset(name);
      if (preset_out) *preset_out = name;
    } catch (const std::exception& e) {
      r.problems.push_back(std::string("train.preset: ") + e.what());
    }
  }
  r.get(n, "base_lr", "train", plan.base_lr);
  r.get(n, "warmup", "train", plan.warmup);
  r.get(n, "batch_size", "train", plan.batch_size);
  r.get_enum(n, "mask_strategy", "train", plan.strategy, parse_mask_strategy);
  if (n.IsMap() && n["adam"]) {
    const auto a = n["adam"];
    r.keys(a, "train.adam", {"beta1", "beta2", "eps", "weight_decay", "clip_norm"});
    r.get(a, "beta1", "train.adam", plan.adam.beta1);
    r.get(a, "beta2", "train.adam", plan.adam.beta2);
    r.get(a, "eps", "train.adam", plan.adam.eps);
    r.get(a, "weight_decay", "train.adam", plan.adam.weight_decay);
    r.get(a, "clip_norm", "train.adam", plan.adam.clip_norm);
  }
  if (n.IsMap() && n["phases"]) {
    const auto ph = n["phases"];
    if (!ph.IsSequence()) {
      r.problems.emplace_back("train.phases: expected a list");
    } else {
      for (std::size_t i = 0; i < ph.size(); ++i) {
        const std::string where = "train.phases[" + std::to_string(i) + "]";
        std::string name;
        r.get(ph[i], "name", where, name);
        auto it = std::find_if(plan.phases.begin(), plan.phases.end(), [&](const PhaseSpec& p) { return !name.empty() && p.name == name; });
        if (it == plan.phases.end()) {
          plan.phases.emplace_back();
          it = plan.phases.end() - 1;
        }
        detail::read_phase(r, ph[i], where, *it);
      }
    }
  }
  problems.insert(problems.end(), r.problems.begin(), r.problems.end());
  return plan;
}

/// Relative paths are taken from the directory holding the config file.
inline RunConfig parse_run_config(const YAML::Node& root, const std::filesystem::path& base_dir = {}) {
  detail::YamlReader r;
  RunConfig c;
  r.keys(root, "config", {"name", "seed", "output_dir", "checkpoint_every", "tokenizer", "corpus", "model", "train"});
  if (!root.IsMap()) throw ConfigError(r.problems);
  r.get(root, "name", "config", c.name);
  r.get(root, "seed", "config", c.seed);
  r.get(root, "output_dir", "config", c.output_dir);
  r.get(root, "checkpoint_every", "config", c.checkpoint_every);
  r.get(root, "tokenizer", "config", c.tokenizer);
  if (root["corpus"]) {
    if (root["corpus"].IsScalar()) c.corpus = {root["corpus"].as<std::string>()};
    else r.get(root, "corpus", "config", c.corpus);
  }
  auto resolve = [&](std::string& p) {
    if (!p.empty() && std::filesystem::path(p).is_relative() && !base_dir.empty()) p = (base_dir / p).lexically_normal().string();
  };
  resolve(c.tokenizer);
  for (auto& p : c.corpus) resolve(p);
  resolve(c.output_dir);

  if (root["model"]) c.model = parse_encoder_config(root["model"], r.problems, &c.model_preset, &c.vocab_size_explicit);
  else r.problems.emplace_back("config: missing key 'model'");
  if (root["train"]) c.plan = parse_train_plan(root["train"], r.problems, &c.plan_preset);
  else r.problems.emplace_back("config: missing key 'train'");

  // A mix that is neither a preset nor an absolute path is a file next to the config.
  for (auto& ph : c.plan.phases) {
    if (ph.mix.empty()) continue;
    bool preset = true;
    try {
      mix_preset(ph.mix);
    } catch (const std::invalid_argument&) {
      preset = false;
    }
    if (!preset) resolve(ph.mix);
  }

  for (const auto& p : c.model.problems()) r.problems.push_back("model: " + p);
  for (const auto& p : c.plan.problems()) r.problems.push_back("train: " + p);
  for (const auto& ph : c.plan.phases)
    if (ph.seq_len > c.model.max_seq_len)
      r.problems.push_back("phase '" + ph.name + "': seq_len " + std::to_string(ph.seq_len) + " exceeds model max_seq_len " +
                           std::to_string(c.model.max_seq_len));
  if (!r.problems.empty()) throw ConfigError(r.problems);
  return c;
}

inline RunConfig load_run_config(const std::string& path) {
  YAML::Node root;
  try {
    root = YAML::LoadFile(path);
  } catch (const YAML::BadFile&) {
    throw std::runtime_error("cannot open config " + path);
  } catch (const YAML::Exception& e) {
    throw ConfigError({path + ": " + e.what()});
  }
  return parse_run_config(root, std::filesystem::absolute(path).parent_path());
}

inline YAML::Node to_yaml(const EncoderConfig& c) {
  YAML::Node n;
  n["n_layers"] = c.n_layers;
  n["d_model"] = c.d_model;
  n["d_ffn"] = c.d_ffn;
  n["n_heads"] = c.n_heads;
  n["n_kv_heads"] = c.n_kv_heads;
  n["vocab_size"] = c.vocab_size;
  n["rope_theta"] = yaml_number(c.rope_theta);
  n["rmsnorm_eps"] = yaml_number(c.rmsnorm_eps);
  n["max_seq_len"] = c.max_seq_len;
  n["init_std"] = yaml_number(c.init_std);
  n["tie_embeddings"] = c.tie_embeddings;
  return n;
}

inline YAML::Node to_yaml(const TrainPlan& p) {
  YAML::Node n;
  n["base_lr"] = yaml_number(p.base_lr);
  n["warmup"] = p.warmup;
  n["batch_size"] = p.batch_size;
  n["mask_strategy"] = to_string(p.strategy);
  n["adam"]["beta1"] = yaml_number(p.adam.beta1);
  n["adam"]["beta2"] = yaml_number(p.adam.beta2);
  n["adam"]["eps"] = yaml_number(p.adam.eps);
  n["adam"]["weight_decay"] = yaml_number(p.adam.weight_decay);
  n["adam"]["clip_norm"] = yaml_number(p.adam.clip_norm);
  for (const auto& ph : p.phases) {
    YAML::Node q;
    q["name"] = ph.name;
    q["steps"] = ph.steps;
    q["mask_ratio"] = yaml_number(ph.mask_ratio);
    q["rope_theta"] = yaml_number(ph.rope_theta);
    q["schedule"] = to_string(ph.schedule);
    q["length"] = to_string(ph.length);
    q["seq_len"] = ph.seq_len;
    q["crop_min"] = ph.crop_min;
    q["crop_distribution"] = to_string(ph.crop_distribution);
    q["mix"] = ph.mix;
    q["min_quality"] = ph.min_quality;
    q["unlabeled_pass"] = ph.unlabeled_pass;
    n["phases"].push_back(q);
  }
  return n;
}

/// Fully resolved: every field explicit, no presets, absolute paths.
inline YAML::Node to_yaml(const RunConfig& c) {
  YAML::Node n;
  n["name"] = c.name;
  n["seed"] = c.seed;
  n["output_dir"] = c.output_dir;
  n["checkpoint_every"] = c.checkpoint_every;
  if (!c.tokenizer.empty()) n["tokenizer"] = c.tokenizer;
  for (const auto& p : c.corpus) n["corpus"].push_back(p);
  n["model"] = to_yaml(c.model);
  n["train"] = to_yaml(c.plan);
  return n;
}

inline std::string dump_yaml(const YAML::Node& n) {
  YAML::Emitter e;
  e.SetDoublePrecision(17);
  e << n;
  return std::string(e.c_str()) + "\n";
}

// ---------------------------------------------------------------------------
// Pipeline assembly

inline Vocab load_run_vocab(const RunConfig& c) { return c.tokenizer.empty() ? Vocab() : Vocab::load(c.tokenizer); }

/// The model width of the vocabulary follows the tokenizer unless the config
/// pins it, in which case the two must agree.
inline void bind_vocab(RunConfig& c, const Vocab& vocab) {
  if (c.vocab_size_explicit && c.model.vocab_size != vocab.size())
    throw ConfigError({"model.vocab_size " + std::to_string(c.model.vocab_size) + " does not match the tokenizer's " + std::to_string(vocab.size())});
  c.model.vocab_size = vocab.size();
}

inline MixSpec resolve_mix(const std::string& name_or_path) {
  if (name_or_path.empty()) {
    MixSpec all;
    all.name = "all";
    all.entries.push_back({"all", Selector{}, 1.0});
    return all;
  }
  try {
    return mix_preset(name_or_path);
  } catch (const std::invalid_argument&) {
  }
  return load_mix_spec(name_or_path);
}

/// Per-phase batch streams over the run's documents. Each phase draws from its
/// own seeded sampler, so a resumed run can rebuild a phase stream and replay it.
inline StreamFactory mix_streams(const TrainPlan& plan, std::shared_ptr<const std::vector<Document>> docs, std::shared_ptr<const Vocab> vocab,
                                 std::uint64_t seed) {
  return [plan, docs, vocab, seed](std::size_t phase) -> std::unique_ptr<BatchStream> {
    const auto& ph = plan.phases.at(phase);
    const auto spec = resolve_mix(ph.mix);
    const auto kept = ph.min_quality > 0 ? quality_filter(*docs, ph.min_quality, ph.unlabeled_pass) : *docs;
    MixSampler sampler(spec, build_pools(spec, kept, *vocab), seed + 1000003ULL * (phase + 1));
    if (ph.length == LengthPolicy::Packed) return std::make_unique<PackedMixStream>(std::move(sampler), ph.seq_len, plan.batch_size, vocab->size());
    return std::make_unique<CroppedMixStream>(std::move(sampler), CropPolicy{ph.crop_min, ph.seq_len, ph.crop_distribution}, plan.batch_size,
                                              seed + 7919ULL * (phase + 1));
  };
}

}  // namespace eurobert
