#pragma once

// Two-phase masked-language-model training: plan, batch streams, loop.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eurobert/checkpoint.hpp"
#include "eurobert/datamix.hpp"
#include "eurobert/encoder.hpp"
#include "eurobert/mlm.hpp"
#include "eurobert/optim.hpp"
#include "json.hpp"

namespace eurobert {

enum class LengthPolicy { Packed, Cropped };

inline std::string to_string(LengthPolicy p) { return p == LengthPolicy::Packed ? "packed" : "cropped"; }
inline LengthPolicy parse_length_policy(std::string_view s) {
  if (s == "packed") return LengthPolicy::Packed;
  if (s == "cropped") return LengthPolicy::Cropped;
  throw std::invalid_argument("unknown length policy '" + std::string(s) + "' (expected packed or cropped)");
}
inline std::string to_string(ScheduleSegment s) { return s == ScheduleSegment::Constant ? "constant" : "cosine"; }
inline ScheduleSegment parse_schedule_segment(std::string_view s) {
  if (s == "constant") return ScheduleSegment::Constant;
  if (s == "cosine") return ScheduleSegment::Cosine;
  throw std::invalid_argument("unknown schedule segment '" + std::string(s) + "' (expected constant or cosine)");
}

struct PhaseSpec {
  std::string name;
  std::uint64_t steps = 0;
  double mask_ratio = 0.5;
  double rope_theta = 10'000.0;
  ScheduleSegment schedule = ScheduleSegment::Constant;
  LengthPolicy length = LengthPolicy::Packed;
  std::size_t seq_len = 2048;  // packed row length, or the crop maximum
  std::size_t crop_min = 12;
  CropDistribution crop_distribution = CropDistribution::Uniform;
  std::string mix;      // mix preset name or YAML path; empty when batches come from elsewhere
  int min_quality = 0;  // 0 keeps every document
  bool unlabeled_pass = true;

  bool operator==(const PhaseSpec&) const = default;
};

struct TrainPlan {
  double base_lr = 1e-4;
  std::uint64_t warmup = 2000;
  std::size_t batch_size = 8;
  MaskStrategy strategy = MaskStrategy::Bert801010;
  AdamWConfig adam;
  std::vector<PhaseSpec> phases;

  std::uint64_t total_steps() const {
    std::uint64_t n = 0;
    for (const auto& p : phases) n += p.steps;
    return n;
  }

  std::uint64_t phase_start(std::size_t i) const {
    std::uint64_t n = 0;
    for (std::size_t k = 0; k < i; ++k) n += phases.at(k).steps;
    return n;
  }

  std::size_t phase_index(std::uint64_t step) const {
    std::uint64_t end = 0;
    for (std::size_t i = 0; i < phases.size(); ++i) {
      end += phases[i].steps;
      if (step < end) return i;
    }
    throw std::out_of_range("step " + std::to_string(step) + " beyond the plan's " + std::to_string(end) + " steps");
  }

  std::size_t phase_named(std::string_view name) const {
    for (std::size_t i = 0; i < phases.size(); ++i)
      if (phases[i].name == name) return i;
    throw std::invalid_argument("plan has no phase named '" + std::string(name) + "'");
  }

  WsdSchedule schedule() const {
    WsdSchedule s;
    s.base_lr = base_lr;
    s.warmup = warmup;
    for (const auto& p : phases) (p.schedule == ScheduleSegment::Constant ? s.stable_steps : s.decay_steps) += p.steps;
    return s;
  }

  double lr(std::uint64_t step) const { return schedule().lr(static_cast<double>(step)); }

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (!(base_lr > 0.0)) p.emplace_back("base_lr must be positive");
    if (batch_size == 0) p.emplace_back("batch_size must be positive");
    if (phases.empty()) p.emplace_back("plan needs at least one phase");
    bool seen_cosine = false;
    std::uint64_t stable = 0;
    for (const auto& ph : phases) {
      const std::string where = "phase '" + ph.name + "': ";
      if (ph.name.empty()) p.push_back("every phase needs a name");
      if (!(ph.mask_ratio > 0.0 && ph.mask_ratio < 1.0)) p.push_back(where + "mask_ratio must lie in (0, 1)");
      if (!(ph.rope_theta > 0.0)) p.push_back(where + "rope_theta must be positive");
      if (ph.length == LengthPolicy::Packed && ph.seq_len < 2) p.push_back(where + "packed seq_len must be at least 2");
      if (ph.length == LengthPolicy::Cropped && (ph.crop_min < 1 || ph.crop_min > ph.seq_len)) {
        p.push_back(where + "crop bounds must satisfy 1 <= crop_min <= seq_len");
      }
      if (ph.min_quality < 0 || ph.min_quality > 4) p.push_back(where + "min_quality must lie in 0..4");
      if (ph.schedule == ScheduleSegment::Cosine) seen_cosine = true;
      else if (seen_cosine) p.push_back(where + "constant segments must precede cosine segments");
      if (ph.schedule == ScheduleSegment::Constant) stable += ph.steps;
    }
    if (warmup > stable) p.push_back("warmup (" + std::to_string(warmup) + ") exceeds the constant-rate steps (" + std::to_string(stable) + ")");
    return p;
  }

  void validate() const {
    if (auto p = problems(); !p.empty()) throw ConfigError(std::move(p));
  }
};

/// Published recipe: warmup 2,000, lr 1e-4, pretraining at 50% masking with
/// theta 10,000 on packed 2,048-token rows, annealing at 10% masking with
/// theta 250,000 on crops of 12..8,192 tokens, cosine to zero. Step budgets
/// follow from the token budgets at the per-size tokens per step: 9,437,184
/// for 210m and 610m ("reference" is an alias of those), 9,830,400 for 2.1b.
inline TrainPlan train_plan_preset(std::string_view name) {
  TrainPlan plan;
  PhaseSpec pre{"pretrain", 0, 0.5, 10'000.0, ScheduleSegment::Constant, LengthPolicy::Packed, 2048, 12,
                CropDistribution::Uniform, "pretrain-reference", 0, true};
  PhaseSpec anneal{"anneal", 0, 0.1, 250'000.0, ScheduleSegment::Cosine, LengthPolicy::Cropped, 8192, 12,
                   CropDistribution::Uniform, "anneal-final", 3, true};
  if (name == "reference" || name == "reference-210m" || name == "reference-610m" || name == "reference-2.1b") {
    const std::uint64_t tokens_per_step = name == "reference-2.1b" ? 9'830'400 : 9'437'184;
    plan.base_lr = 1e-4;
    plan.warmup = 2000;
    plan.batch_size = tokens_per_step / 2048;
    pre.steps = 4'843'357'000'000ULL / tokens_per_step;  // 4.8T tokens
    anneal.steps = 200'000'000'000ULL / tokens_per_step;  // 200B tokens
  } else if (name == "tiny") {
    plan.base_lr = 3e-3;
    plan.warmup = 20;
    plan.batch_size = 8;
    pre.steps = 150;
    pre.seq_len = 64;
    anneal.steps = 50;
    anneal.seq_len = 128;
    pre.mix = "";
    anneal.mix = "";
  } else {
    throw std::invalid_argument("unknown train plan preset '" + std::string(name) + "'");
  }
  plan.phases = {pre, anneal};
  return plan;
}

// ---------------------------------------------------------------------------
// Batch streams

class BatchStream {
 public:
  virtual ~BatchStream() = default;
  virtual TokenBatch next() = 0;
  void skip(std::uint64_t n) {
    for (std::uint64_t i = 0; i < n; ++i) next();
  }
};

/// Right-pads rows to the longest row.
inline TokenBatch rows_to_batch(const std::vector<std::vector<std::int32_t>>& rows) {
  std::size_t len = 0;
  for (const auto& r : rows) len = std::max(len, r.size());
  TokenBatch b{rows.size(), len, {}, {}};
  b.ids.assign(rows.size() * len, special::pad);
  b.padding.assign(rows.size() * len, 1);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t t = 0; t < rows[i].size(); ++t) {
      b.ids[i * len + t] = rows[i][t];
      b.padding[i * len + t] = 0;
    }
  return b;
}

/// Cycles through a fixed list of sequences in order.
class CyclicStream : public BatchStream {
 public:
  CyclicStream(std::vector<std::vector<std::int32_t>> sequences, std::size_t batch_size)
      : seqs_(std::move(sequences)), batch_(batch_size) {
    if (seqs_.empty() || batch_ == 0) throw std::invalid_argument("cyclic stream needs sequences and a positive batch size");
  }
  TokenBatch next() override {
    std::vector<std::vector<std::int32_t>> rows;
    for (std::size_t i = 0; i < batch_; ++i) {
      rows.push_back(seqs_[cursor_]);
      cursor_ = (cursor_ + 1) % seqs_.size();
    }
    return rows_to_batch(rows);
  }

 private:
  std::vector<std::vector<std::int32_t>> seqs_;
  std::size_t batch_, cursor_ = 0;
};

/// Mixture draws packed into full rows of exactly seq_len tokens.
class PackedMixStream : public BatchStream {
 public:
  PackedMixStream(MixSampler sampler, std::size_t seq_len, std::size_t batch_size, std::size_t vocab_size)
      : sampler_(std::move(sampler)), packer_(seq_len, vocab_size), batch_(batch_size) {}
  TokenBatch next() override {
    std::vector<std::vector<std::int32_t>> rows;
    while (rows.size() < batch_) {
      while (!packer_.ready()) packer_.push(*sampler_.next().tokens);
      rows.push_back(packer_.pop().ids);
    }
    return rows_to_batch(rows);
  }
  const MixSampler& sampler() const { return sampler_; }

 private:
  MixSampler sampler_;
  Packer packer_;
  std::size_t batch_;
};

/// One randomly cropped mixture draw per row.
class CroppedMixStream : public BatchStream {
 public:
  CroppedMixStream(MixSampler sampler, CropPolicy policy, std::size_t batch_size, std::uint64_t seed)
      : sampler_(std::move(sampler)), policy_(policy), batch_(batch_size), rng_(derive_rng(seed, {0x63726f70})) {}
  TokenBatch next() override {
    std::vector<std::vector<std::int32_t>> rows;
    for (std::size_t i = 0; i < batch_; ++i) rows.push_back(random_crop(*sampler_.next().tokens, policy_, rng_));
    return rows_to_batch(rows);
  }
  const MixSampler& sampler() const { return sampler_; }

 private:
  MixSampler sampler_;
  CropPolicy policy_;
  std::size_t batch_;
  Rng rng_;
};

using StreamFactory = std::function<std::unique_ptr<BatchStream>(std::size_t phase)>;

// ---------------------------------------------------------------------------
// Loop

struct StepRecord {
  std::uint64_t step = 0;
  std::string phase;
  double lr = 0.0;
  std::optional<double> loss;  // empty when no position was selected
  std::uint64_t tokens_seen = 0;
  double masked_fraction = 0.0;
  double grad_norm = 0.0;
  std::size_t batch_tokens = 0;

  bool operator==(const StepRecord&) const = default;
};

inline nlohmann::json to_json(const StepRecord& r) {
  nlohmann::json j{{"step", r.step}, {"phase", r.phase}, {"lr", r.lr}, {"tokens_seen", r.tokens_seen},
                   {"masked_fraction", r.masked_fraction}, {"grad_norm", r.grad_norm}, {"batch_tokens", r.batch_tokens}};
  j["loss"] = r.loss ? nlohmann::json(*r.loss) : nlohmann::json(nullptr);
  return j;
}

class TrainingDiverged : public std::runtime_error {
 public:
  explicit TrainingDiverged(std::uint64_t step)
      : std::runtime_error("loss is not finite at step " + std::to_string(step) + "; stopping without a checkpoint"), step_(step) {}
  std::uint64_t step() const { return step_; }

 private:
  std::uint64_t step_;
};

struct TrainerOptions {
  std::string checkpoint_dir;            // empty disables checkpoints
  std::uint64_t checkpoint_every = 1000;  // also written at phase ends
  std::function<void(const StepRecord&)> on_step;
};

inline std::string checkpoint_path(const std::string& dir, std::uint64_t step) {
  char name[40];
  std::snprintf(name, sizeof(name), "checkpoint-%08llu.ebck", static_cast<unsigned long long>(step));
  return (std::filesystem::path(dir) / name).string();
}

/// Newest checkpoint in dir by step number, if any.
inline std::optional<std::string> latest_checkpoint(const std::string& dir) {
  if (!std::filesystem::is_directory(dir)) return std::nullopt;
  std::optional<std::string> best;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    const auto n = e.path().filename().string();
    if (n.rfind("checkpoint-", 0) == 0 && e.path().extension() == ".ebck" && (!best || n > std::filesystem::path(*best).filename().string())) {
      best = e.path().string();
    }
  }
  return best;
}

class Trainer {
 public:
  Trainer(TrainPlan plan, EncoderModel<float> model, StreamFactory streams, std::uint64_t seed, TrainerOptions options = {})
      : plan_(std::move(plan)), model_(std::move(model)), streams_(std::move(streams)), options_(std::move(options)) {
    plan_.validate();
    progress_.seed = seed;
    optimizer_ = AdamW<float>(plan_.adam, model_.named_parameters());
  }

  /// Continues from a checkpoint; the batch stream of the current phase is
  /// replayed up to the saved step.
  Trainer(TrainPlan plan, Checkpoint checkpoint, StreamFactory streams, TrainerOptions options = {})
      : plan_(std::move(plan)),
        model_(std::move(checkpoint.model)),
        optimizer_(std::move(checkpoint.optimizer)),
        progress_(checkpoint.progress),
        streams_(std::move(streams)),
        options_(std::move(options)) {
    plan_.validate();
    if (optimizer_.config() != plan_.adam) throw std::invalid_argument("checkpoint optimizer settings differ from the plan");
  }

  /// Runs until `end_step` completed steps (the plan total when omitted).
  void run(std::optional<std::uint64_t> end_step = std::nullopt) {
    const std::uint64_t end = end_step.value_or(plan_.total_steps());
    if (end > plan_.total_steps()) throw std::out_of_range("requested step " + std::to_string(end) + " beyond the plan");
    while (progress_.step < end) step_once();
  }

  const EncoderModel<float>& model() const { return model_; }
  EncoderModel<float>& model() { return model_; }
  const AdamW<float>& optimizer() const { return optimizer_; }
  const TrainProgress& progress() const { return progress_; }
  const std::vector<StepRecord>& history() const { return history_; }
  const TrainPlan& plan() const { return plan_; }

  void save(const std::string& path) const { save_checkpoint(path, model_, optimizer_, progress_); }

 private:
  BatchStream& stream_for(std::size_t phase) {
    if (!stream_ || stream_phase_ != phase) {
      stream_ = streams_(phase);
      if (!stream_) throw std::runtime_error("no batch stream for phase " + plan_.phases[phase].name);
      stream_phase_ = phase;
      stream_->skip(progress_.step - plan_.phase_start(phase));
    }
    return *stream_;
  }

  void step_once() {
    const std::uint64_t s = progress_.step;
    const std::size_t pi = plan_.phase_index(s);
    const auto& phase = plan_.phases[pi];
    const double lr = plan_.lr(s);

    TokenBatch batch = stream_for(pi).next();
    MaskingPolicy policy{phase.mask_ratio, plan_.strategy, progress_.seed};
    const auto masked = apply_masking(batch, policy, s, model_.config.vocab_size);

    StepRecord rec;
    rec.step = s;
    rec.phase = phase.name;
    rec.lr = lr;
    rec.batch_tokens = batch.non_padding();
    std::size_t eligible = 0;
    for (std::size_t i = 0; i < batch.ids.size(); ++i) eligible += mask_eligible(batch.ids[i], batch.padding[i]);
    const std::size_t selected = masked.selected();
    rec.masked_fraction = eligible ? static_cast<double>(selected) / static_cast<double>(eligible) : 0.0;

    model_.config.rope_theta = phase.rope_theta;  // downstream users of the checkpoint see the active theta
    if (selected > 0) {
      model_.zero_grad();
      auto out = forward(model_, masked.corrupted, phase.rope_theta);
      auto loss = mlm_loss(out.logits, masked);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) throw TrainingDiverged(s);
      loss.backward();
      rec.loss = value;
      rec.grad_norm = optimizer_.step(model_.named_parameters(), lr).grad_norm;
      model_.zero_grad();
    }

    progress_.step = s + 1;
    progress_.tokens_seen += rec.batch_tokens;
    progress_.phase = phase.name;
    rec.tokens_seen = progress_.tokens_seen;
    history_.push_back(rec);
    if (options_.on_step) options_.on_step(rec);

    const bool phase_end = progress_.step == plan_.phase_start(pi) + phase.steps;
    const bool cadence = options_.checkpoint_every > 0 && progress_.step % options_.checkpoint_every == 0;
    if (!options_.checkpoint_dir.empty() && (phase_end || cadence)) {
      std::filesystem::create_directories(options_.checkpoint_dir);
      save(checkpoint_path(options_.checkpoint_dir, progress_.step));
    }
  }

  TrainPlan plan_;
  EncoderModel<float> model_;
  AdamW<float> optimizer_;
  TrainProgress progress_;
  StreamFactory streams_;
  TrainerOptions options_;
  std::unique_ptr<BatchStream> stream_;
  std::size_t stream_phase_ = 0;
  std::vector<StepRecord> history_;
};

/// Appends one JSON record per step.
class MetricsLog {
 public:
  explicit MetricsLog(const std::string& path, bool append = false)
      : os_(path, append ? std::ios::app : std::ios::trunc) {
    if (!os_) throw std::runtime_error("cannot open metrics log " + path);
  }
  void write(const StepRecord& r) {
    os_ << to_json(r).dump() << '\n';
    os_.flush();
  }

 private:
  std::ofstream os_;
};

}  // namespace eurobert
