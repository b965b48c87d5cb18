#pragma once

// Masked-language-modeling corruption and loss.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eurobert/encoder.hpp"
#include "eurobert/rng.hpp"
#include "eurobert/tensor.hpp"
#include "eurobert/tokenizer.hpp"

namespace eurobert {

enum class MaskStrategy { MaskOnly, Bert801010 };

inline MaskStrategy parse_mask_strategy(std::string_view s) {
  if (s == "mask-only") return MaskStrategy::MaskOnly;
  if (s == "bert-80-10-10") return MaskStrategy::Bert801010;
  throw std::invalid_argument("unknown masking strategy '" + std::string(s) + "' (expected mask-only or bert-80-10-10)");
}

inline std::string to_string(MaskStrategy s) { return s == MaskStrategy::MaskOnly ? "mask-only" : "bert-80-10-10"; }

struct MaskingPolicy {
  double ratio = 0.5;
  MaskStrategy strategy = MaskStrategy::Bert801010;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("masking ratio must lie in (0, 1), got " + std::to_string(ratio));
  }
};

enum class Corruption : std::uint8_t { None = 0, Masked = 1, Random = 2, Kept = 3 };

struct MaskedBatch {
  TokenBatch corrupted;
  std::vector<std::int32_t> original;
  std::vector<std::uint8_t> selection;  // 1 where the model must predict the original id
  std::vector<Corruption> corruption;

  std::size_t selected() const {
    std::size_t n = 0;
    for (auto s : selection) n += s;
    return n;
  }
};

inline bool mask_eligible(std::int32_t id, std::uint8_t pad) { return pad == 0 && id >= special::count; }

/// Selects exactly round(ratio * eligible) positions per sequence without
/// replacement. Row r draws from the stream (seed, step, r), so rows can be
/// corrupted independently and in any order.
inline MaskedBatch apply_masking(const TokenBatch& batch, const MaskingPolicy& policy, std::uint64_t step,
                                 std::size_t vocab_size) {
  policy.validate();
  if (vocab_size <= static_cast<std::size_t>(special::count)) throw std::invalid_argument("vocabulary has no ordinary tokens");
  if (batch.ids.size() != batch.batch * batch.seq || batch.padding.size() != batch.ids.size()) {
    throw DimensionError("token batch does not match its declared [" + std::to_string(batch.batch) + "x" +
                         std::to_string(batch.seq) + "] shape");
  }
  MaskedBatch out;
  out.corrupted = batch;
  out.original = batch.ids;
  out.selection.assign(batch.ids.size(), 0);
  out.corruption.assign(batch.ids.size(), Corruption::None);

  std::vector<std::size_t> eligible;
  for (std::size_t r = 0; r < batch.batch; ++r) {
    eligible.clear();
    for (std::size_t t = 0; t < batch.seq; ++t) {
      const auto i = r * batch.seq + t;
      if (mask_eligible(batch.ids[i], batch.padding[i])) eligible.push_back(i);
    }
    if (eligible.empty()) throw std::invalid_argument("sequence " + std::to_string(r) + " has no maskable tokens");

    auto rng = derive_rng(policy.seed, {step, r});
    const auto count = static_cast<std::size_t>(std::llround(policy.ratio * static_cast<double>(eligible.size())));
    for (std::size_t k = 0; k < count; ++k) {
      std::swap(eligible[k], eligible[uniform_index(rng, k, eligible.size() - 1)]);
      const auto i = eligible[k];
      out.selection[i] = 1;
      Corruption c = Corruption::Masked;
      if (policy.strategy == MaskStrategy::Bert801010) {
        const double u = uniform_real(rng);
        c = u < 0.8 ? Corruption::Masked : (u < 0.9 ? Corruption::Random : Corruption::Kept);
      }
      out.corruption[i] = c;
      if (c == Corruption::Masked) {
        out.corrupted.ids[i] = special::mask;
      } else if (c == Corruption::Random) {
        out.corrupted.ids[i] = static_cast<std::int32_t>(uniform_index(rng, special::count, vocab_size - 1));
      }
    }
  }
  return out;
}

/// Mean cross-entropy of the original ids over all selected positions in the
/// batch. logits is [B*S, V] or [B, S, V].
template <class T>
Tensor<T> mlm_loss(const Tensor<T>& logits, const MaskedBatch& batch) {
  const auto n = batch.original.size();
  if (logits.rank() < 2 || logits.size() % (n ? n : 1) != 0) {
    throw DimensionError("mlm_loss: logits " + shape_str(logits.shape()) + " do not cover " + std::to_string(n) + " positions");
  }
  const auto vocab = logits.shape().back();
  const auto flat = logits.rank() == 2 ? logits : reshape(logits, Shape{logits.size() / vocab, vocab});
  if (flat.shape()[0] != n) {
    throw DimensionError("mlm_loss: logits " + shape_str(logits.shape()) + " do not cover " + std::to_string(n) + " positions");
  }
  return softmax_cross_entropy(flat, batch.original, batch.selection);
}

}  // namespace eurobert
