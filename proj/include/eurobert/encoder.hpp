#pragma once

// Bias-free bidirectional transformer encoder: token embedding, pre-norm
// blocks of grouped-query attention with rotary positions and a SwiGLU
// feed-forward, a final RMSNorm and the masked-language-model projection.

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eurobert/rng.hpp"
#include "eurobert/tensor.hpp"

namespace eurobert {

class ConfigError : public std::invalid_argument {
 public:
  explicit ConfigError(std::vector<std::string> problems)
      : std::invalid_argument(join(problems)), problems_(std::move(problems)) {}
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  static std::string join(const std::vector<std::string>& problems) {
    std::string out;
    for (const auto& p : problems) out += (out.empty() ? "" : "; ") + p;
    return out;
  }
  std::vector<std::string> problems_;
};

struct EncoderConfig {
  std::size_t n_layers = 2;
  std::size_t d_model = 32;
  std::size_t d_ffn = 64;
  std::size_t n_heads = 4;
  std::size_t n_kv_heads = 2;
  std::size_t vocab_size = 101;
  double rope_theta = 10'000.0;
  double rmsnorm_eps = 1e-5;
  std::size_t max_seq_len = 512;
  double init_std = 0.02;
  bool tie_embeddings = false;

  std::size_t head_dim() const { return n_heads ? d_model / n_heads : 0; }
  std::size_t kv_width() const { return n_kv_heads * head_dim(); }

  std::vector<std::string> problems() const {
    std::vector<std::string> out;
    if (n_layers == 0) out.emplace_back("n_layers must be positive");
    if (d_model == 0 || d_ffn == 0) out.emplace_back("d_model and d_ffn must be positive");
    if (n_heads == 0 || n_kv_heads == 0) {
      out.emplace_back("n_heads and n_kv_heads must be positive");
    } else {
      if (n_heads % n_kv_heads != 0) out.emplace_back("n_heads must be divisible by n_kv_heads");
      if (d_model % n_heads != 0) out.emplace_back("d_model must be divisible by n_heads");
      else if (head_dim() % 2 != 0) out.emplace_back("head_dim must be even for rotary embeddings");
    }
    if (vocab_size == 0) out.emplace_back("vocab_size must be positive");
    if (!(rope_theta > 0)) out.emplace_back("rope_theta must be positive");
    if (!(rmsnorm_eps > 0)) out.emplace_back("rmsnorm_eps must be positive");
    if (max_seq_len == 0) out.emplace_back("max_seq_len must be positive");
    if (!(init_std > 0)) out.emplace_back("init_std must be positive");
    return out;
  }
  void validate() const {
    if (auto p = problems(); !p.empty()) throw ConfigError(std::move(p));
  }

  bool operator==(const EncoderConfig&) const = default;
};

/// Named architecture presets. "210m", "610m" and "2.1b" are the published
/// model family; "tiny" and "small" are desk-scale.
inline EncoderConfig encoder_preset(std::string_view name) {
  EncoderConfig c;
  auto family = [&](std::size_t layers, std::size_t d, std::size_t ffn, std::size_t heads, std::size_t kv) {
    c.n_layers = layers;
    c.d_model = d;
    c.d_ffn = ffn;
    c.n_heads = heads;
    c.n_kv_heads = kv;
    c.vocab_size = 128'000;
    c.rope_theta = 250'000.0;
    c.rmsnorm_eps = 1e-5;
    c.max_seq_len = 8'192;
    c.init_std = std::sqrt(0.2);  // N(0, sigma^2 = 0.2)
    c.tie_embeddings = true;
  };
  if (name == "210m") family(12, 768, 3'072, 12, 12);
  else if (name == "610m") family(26, 1'152, 4'096, 18, 6);
  else if (name == "2.1b") family(32, 2'304, 6'144, 18, 6);
  else if (name == "tiny") {
    c = EncoderConfig{};
    c.vocab_size = 1'024;
    c.max_seq_len = 256;
  } else if (name == "small") {
    c = EncoderConfig{};
    c.n_layers = 4;
    c.d_model = 128;
    c.d_ffn = 384;
    c.n_heads = 8;
    c.n_kv_heads = 4;
    c.vocab_size = 1'024;
    c.max_seq_len = 1'024;
  } else {
    throw ConfigError({"unknown model preset '" + std::string(name) + "'"});
  }
  return c;
}

/// Exact parameter count:
///   V*d                                  token embedding
/// + L * (2*d*d + 2*d*kv*hd + 3*d*ffn + 2*d) attention, FFN, two norm gains
/// + d                                    final norm gain
/// + d*V                                  MLM projection, unless tied
inline std::uint64_t count_params(const EncoderConfig& c) {
  const std::uint64_t d = c.d_model, V = c.vocab_size, ffn = c.d_ffn, kv = c.kv_width();
  const std::uint64_t per_layer = 2 * d * d + 2 * d * kv + 3 * d * ffn + 2 * d;
  return V * d + c.n_layers * per_layer + d + (c.tie_embeddings ? 0 : d * V);
}

/// Token ids with padding flags, row-major [batch, seq].
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> ids;
  std::vector<std::uint8_t> padding;  // 1 marks a padding position

  std::size_t non_padding() const {
    std::size_t n = 0;
    for (auto p : padding) n += p == 0;
    return n;
  }
};

template <class T>
struct EncoderLayer {
  Tensor<T> wq, wk, wv, wo;
  Tensor<T> attn_norm, ffn_norm;
  Tensor<T> w1, w3, w2;
};

template <class T>
struct EncoderModel {
  EncoderConfig config;
  Tensor<T> embedding;
  std::vector<EncoderLayer<T>> layers;
  Tensor<T> final_norm;
  Tensor<T> mlm_head;  // undefined when tied to the embedding

  /// Normal(0, init_std) matrices and unit norm gains.
  static EncoderModel initialize(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    EncoderModel m;
    m.config = config;
    Rng rng = derive_rng(seed, {0x1417});
    std::normal_distribution<double> normal(0.0, config.init_std);
    auto matrix = [&](std::size_t rows, std::size_t cols) {
      std::vector<T> v(rows * cols);
      for (auto& x : v) x = static_cast<T>(normal(rng));
      return Tensor<T>(Shape{rows, cols}, std::move(v), true);
    };
    auto gain = [&](std::size_t n) { return Tensor<T>::full(Shape{n}, T(1), true); };
    const std::size_t d = config.d_model;
    m.embedding = matrix(config.vocab_size, d);
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      EncoderLayer<T> layer;
      layer.wq = matrix(d, d);
      layer.wk = matrix(d, config.kv_width());
      layer.wv = matrix(d, config.kv_width());
      layer.wo = matrix(d, d);
      layer.attn_norm = gain(d);
      layer.ffn_norm = gain(d);
      layer.w1 = matrix(d, config.d_ffn);
      layer.w3 = matrix(d, config.d_ffn);
      layer.w2 = matrix(config.d_ffn, d);
      m.layers.push_back(std::move(layer));
    }
    m.final_norm = gain(d);
    if (!config.tie_embeddings) m.mlm_head = matrix(d, config.vocab_size);
    return m;
  }

  /// Parameters in a fixed order with stable names; the order defines
  /// checkpoint layout and optimizer state alignment.
  std::vector<std::pair<std::string, Tensor<T>*>> named_parameters() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("embedding", &embedding);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layers." + std::to_string(l) + ".";
      auto& L = layers[l];
      out.emplace_back(p + "attn_norm", &L.attn_norm);
      out.emplace_back(p + "wq", &L.wq);
      out.emplace_back(p + "wk", &L.wk);
      out.emplace_back(p + "wv", &L.wv);
      out.emplace_back(p + "wo", &L.wo);
      out.emplace_back(p + "ffn_norm", &L.ffn_norm);
      out.emplace_back(p + "w1", &L.w1);
      out.emplace_back(p + "w3", &L.w3);
      out.emplace_back(p + "w2", &L.w2);
    }
    out.emplace_back("final_norm", &final_norm);
    if (mlm_head.defined()) out.emplace_back("mlm_head", &mlm_head);
    return out;
  }
  std::vector<std::pair<std::string, const Tensor<T>*>> named_parameters() const {
    std::vector<std::pair<std::string, const Tensor<T>*>> out;
    for (auto& [name, t] : const_cast<EncoderModel*>(this)->named_parameters()) out.emplace_back(name, t);
    return out;
  }

  std::uint64_t parameter_count() const {
    std::uint64_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t->size();
    return n;
  }

  void zero_grad() {
    for (auto& [name, t] : named_parameters()) t->zero_grad();
  }

  /// Deep copy in another precision; every parameter is a fresh leaf.
  template <class U>
  EncoderModel<U> cast() const {
    EncoderModel<U> m;
    m.config = config;
    auto c = [](const Tensor<T>& t) { return t.defined() ? eurobert::cast<U>(t, true) : Tensor<U>(); };
    m.embedding = c(embedding);
    for (const auto& L : layers) {
      m.layers.push_back(EncoderLayer<U>{c(L.wq), c(L.wk), c(L.wv), c(L.wo), c(L.attn_norm), c(L.ffn_norm),
                                         c(L.w1), c(L.w3), c(L.w2)});
    }
    m.final_norm = c(final_norm);
    m.mlm_head = c(mlm_head);
    return m;
  }
  EncoderModel clone() const { return cast<T>(); }
};

// ---------------------------------------------------------------------------
// Building blocks, usable on their own.

/// W2 * (swish(x W1) * (x W3)).
template <class T>
Tensor<T> swiglu_ffn(const Tensor<T>& x, const Tensor<T>& w1, const Tensor<T>& w2, const Tensor<T>& w3) {
  return matmul(mul(silu(matmul(x, w1)), matmul(x, w3)), w2);
}

/// Attention sublayer on x [batch, seq, d_model]. Key positions flagged in
/// `padding` are excluded; there is no causal mask.
template <class T>
Tensor<T> gqa_attention(const Tensor<T>& x, const EncoderLayer<T>& layer, std::size_t n_heads, std::size_t n_kv_heads,
                        std::span<const std::int64_t> positions, std::span<const std::uint8_t> padding,
                        double rope_theta) {
  if (x.rank() != 3) throw DimensionError("gqa_attention expects [batch, seq, d_model], got " + shape_str(x.shape()));
  const std::size_t B = x.dim(0), S = x.dim(1), d = x.dim(2);
  if (n_heads == 0 || d % n_heads != 0 || n_kv_heads == 0 || n_heads % n_kv_heads != 0) {
    throw DimensionError("gqa_attention: head layout does not divide d_model " + std::to_string(d));
  }
  const std::size_t hd = d / n_heads;
  auto q = reshape(matmul(x, layer.wq), Shape{B, S, n_heads, hd});
  auto k = reshape(matmul(x, layer.wk), Shape{B, S, n_kv_heads, hd});
  auto v = reshape(matmul(x, layer.wv), Shape{B, S, n_kv_heads, hd});
  q = rope_rotate(q, positions, rope_theta);
  k = rope_rotate(k, positions, rope_theta);
  auto o = grouped_attention(q, k, v, padding, static_cast<T>(1.0 / std::sqrt(static_cast<double>(hd))));
  return matmul(reshape(o, Shape{B, S, d}), layer.wo);
}

template <class T>
struct EncoderOutput {
  Tensor<T> hidden;  // [batch, seq, d_model], after the final norm
  Tensor<T> logits;  // [batch, seq, vocab]; undefined when not requested
};

/// embed -> n_layers x (x += attn(norm(x)); x += ffn(norm(x))) -> norm -> projection.
/// rope_theta overrides the configured value when given.
template <class T>
EncoderOutput<T> forward(const EncoderModel<T>& model, const TokenBatch& batch,
                         std::optional<double> rope_theta = std::nullopt, bool with_logits = true) {
  const auto& c = model.config;
  if (batch.ids.size() != batch.batch * batch.seq || batch.padding.size() != batch.ids.size()) {
    throw DimensionError("token batch does not match its declared geometry");
  }
  if (batch.seq > c.max_seq_len) {
    throw std::invalid_argument("sequence length " + std::to_string(batch.seq) + " exceeds max_seq_len " +
                                std::to_string(c.max_seq_len));
  }
  for (auto id : batch.ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
      throw std::out_of_range("token id " + std::to_string(id) + " outside vocabulary of " + std::to_string(c.vocab_size));
    }
  }
  const double theta = rope_theta.value_or(c.rope_theta);
  std::vector<std::int64_t> positions(batch.seq);
  for (std::size_t s = 0; s < batch.seq; ++s) positions[s] = static_cast<std::int64_t>(s);

  const T eps = static_cast<T>(c.rmsnorm_eps);
  auto x = reshape(gather_rows(model.embedding, batch.ids), Shape{batch.batch, batch.seq, c.d_model});
  for (const auto& layer : model.layers) {
    x = add(x, gqa_attention(rmsnorm(x, layer.attn_norm, eps), layer, c.n_heads, c.n_kv_heads, positions,
                             batch.padding, theta));
    x = add(x, swiglu_ffn(rmsnorm(x, layer.ffn_norm, eps), layer.w1, layer.w2, layer.w3));
  }
  EncoderOutput<T> out;
  out.hidden = rmsnorm(x, model.final_norm, eps);
  if (with_logits) {
    out.logits = model.mlm_head.defined() ? matmul(out.hidden, model.mlm_head)
                                          : matmul(out.hidden, transpose(model.embedding));
  }
  return out;
}

}  // namespace eurobert
