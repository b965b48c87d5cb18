#pragma once

// AdamW with global-norm clipping, and the warmup-stable-decay schedule.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "eurobert/tensor.hpp"

namespace eurobert {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-5;
  double weight_decay = 0.1;
  double clip_norm = 1.0;  // <= 0 disables clipping

  bool operator==(const AdamWConfig&) const = default;
};

class NonFiniteGradient : public std::runtime_error {
 public:
  explicit NonFiniteGradient(const std::string& parameter)
      : std::runtime_error("non-finite gradient in parameter " + parameter), parameter_(parameter) {}
  const std::string& parameter() const { return parameter_; }

 private:
  std::string parameter_;
};

struct AdamWStepStats {
  double grad_norm = 0.0;   // before clipping
  double clip_scale = 1.0;  // factor applied to every gradient
};

/// Moments are kept in the parameter precision so that a float checkpoint
/// restores them bit-exactly.
template <class T>
class AdamW {
 public:
  AdamW() = default;
  AdamW(AdamWConfig config, const std::vector<std::pair<std::string, Tensor<T>*>>& params) : config_(config) {
    for (const auto& [name, p] : params) {
      names_.push_back(name);
      m_.emplace_back(p->size(), T(0));
      v_.emplace_back(p->size(), T(0));
    }
  }

  /// clip (global norm) -> p *= 1 - lr*wd -> bias-corrected Adam update.
  /// Parameters without a gradient are treated as having a zero gradient.
  AdamWStepStats step(const std::vector<std::pair<std::string, Tensor<T>*>>& params, double lr) {
    if (params.size() != names_.size()) throw std::invalid_argument("optimizer was built for a different parameter set");
    AdamWStepStats stats;
    double sq = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& [name, p] = params[i];
      if (name != names_[i] || p->size() != m_[i].size()) throw std::invalid_argument("parameter " + name + " does not match optimizer state");
      if (!p->has_grad()) continue;
      for (T g : p->grad()) {
        if (!std::isfinite(static_cast<double>(g))) throw NonFiniteGradient(name);
        sq += static_cast<double>(g) * static_cast<double>(g);
      }
    }
    stats.grad_norm = std::sqrt(sq);
    if (config_.clip_norm > 0.0 && stats.grad_norm > config_.clip_norm) stats.clip_scale = config_.clip_norm / stats.grad_norm;

    ++step_;
    const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(step_));
    const double decay = 1.0 - lr * config_.weight_decay;
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto* p = params[i].second;
      auto data = p->mutable_data();
      const bool has = p->has_grad();
      auto& m = m_[i];
      auto& v = v_[i];
      for (std::size_t j = 0; j < data.size(); ++j) {
        const double g = has ? static_cast<double>(p->grad()[j]) * stats.clip_scale : 0.0;
        const double mj = config_.beta1 * m[j] + (1.0 - config_.beta1) * g;
        const double vj = config_.beta2 * v[j] + (1.0 - config_.beta2) * g * g;
        m[j] = static_cast<T>(mj);
        v[j] = static_cast<T>(vj);
        const double update = (mj / bc1) / (std::sqrt(vj / bc2) + config_.eps);
        data[j] = static_cast<T>(static_cast<double>(data[j]) * decay - lr * update);
      }
    }
    return stats;
  }

  const AdamWConfig& config() const { return config_; }
  std::uint64_t step_count() const { return step_; }
  void set_step_count(std::uint64_t s) { step_ = s; }
  const std::vector<std::string>& names() const { return names_; }
  std::vector<T>& first_moment(std::size_t i) { return m_.at(i); }
  std::vector<T>& second_moment(std::size_t i) { return v_.at(i); }
  const std::vector<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const std::vector<T>& second_moment(std::size_t i) const { return v_.at(i); }

 private:
  AdamWConfig config_;
  std::vector<std::string> names_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Warmup-stable-decay

enum class ScheduleSegment { Constant, Cosine };

/// Linear warmup from 0 over the first `warmup` steps, then a constant
/// plateau for the rest of the stable budget, then cosine decay to 0 over the
/// decay budget. The last decay step lands exactly on 0.
struct WsdSchedule {
  double base_lr = 1e-4;
  std::uint64_t warmup = 2000;
  std::uint64_t stable_steps = 0;  // includes the warmup
  std::uint64_t decay_steps = 0;

  std::uint64_t total() const { return stable_steps + decay_steps; }

  std::vector<std::string> problems() const {
    std::vector<std::string> p;
    if (!(base_lr > 0.0)) p.emplace_back("base_lr must be positive");
    if (warmup > stable_steps && stable_steps > 0) p.emplace_back("warmup must fit inside the stable segment");
    return p;
  }

  /// Real-valued step, so boundary continuity can be probed.
  double lr(double step) const {
    if (step < 0.0 || step >= static_cast<double>(total())) {
      throw std::out_of_range("step " + std::to_string(step) + " outside schedule of " + std::to_string(total()) + " steps");
    }
    if (step < static_cast<double>(warmup)) return base_lr * step / static_cast<double>(warmup);
    if (step < static_cast<double>(stable_steps)) return base_lr;
    const double span = decay_steps > 1 ? static_cast<double>(decay_steps - 1) : 1.0;
    const double t = (step - static_cast<double>(stable_steps)) / span;
    constexpr double pi = 3.14159265358979323846;
    const double lr = base_lr * (1.0 + std::cos(pi * t)) / 2.0;
    return t >= 1.0 ? 0.0 : lr;
  }
};

}  // namespace eurobert
