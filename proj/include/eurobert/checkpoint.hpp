#pragma once

// Binary checkpoints.
//
// Layout (all integers little-endian):
//   magic "EBRTCKPT", u32 version
//   u64 meta length, meta JSON (model config, progress, optimizer settings)
//   u32 tensor count, then per tensor: u32 name length, name, u8 dtype (0 = f32),
//     u32 rank, rank x u64 dims
//   payloads in header order, f32 little-endian
//   u64 FNV-1a checksum of every preceding byte
//
// Optimizer moments are stored as tensors named adam.m.<param> and adam.v.<param>.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "eurobert/encoder.hpp"
#include "eurobert/optim.hpp"
#include "json.hpp"

namespace eurobert {

inline constexpr char kCheckpointMagic[8] = {'E', 'B', 'R', 'T', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline nlohmann::json to_json(const EncoderConfig& c) {
  return {{"n_layers", c.n_layers},     {"d_model", c.d_model},       {"d_ffn", c.d_ffn},
          {"n_heads", c.n_heads},       {"n_kv_heads", c.n_kv_heads}, {"vocab_size", c.vocab_size},
          {"rope_theta", c.rope_theta}, {"rmsnorm_eps", c.rmsnorm_eps}, {"max_seq_len", c.max_seq_len},
          {"init_std", c.init_std},     {"tie_embeddings", c.tie_embeddings}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_ffn = j.at("d_ffn").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.n_kv_heads = j.at("n_kv_heads").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.rope_theta = j.at("rope_theta").get<double>();
  c.rmsnorm_eps = j.at("rmsnorm_eps").get<double>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.init_std = j.at("init_std").get<double>();
  c.tie_embeddings = j.at("tie_embeddings").get<bool>();
  return c;
}

inline nlohmann::json to_json(const AdamWConfig& c) {
  return {{"beta1", c.beta1}, {"beta2", c.beta2}, {"eps", c.eps}, {"weight_decay", c.weight_decay}, {"clip_norm", c.clip_norm}};
}

inline AdamWConfig adamw_config_from_json(const nlohmann::json& j) {
  return {j.at("beta1").get<double>(), j.at("beta2").get<double>(), j.at("eps").get<double>(),
          j.at("weight_decay").get<double>(), j.at("clip_norm").get<double>()};
}

struct TrainProgress {
  std::uint64_t step = 0;  // completed optimizer steps
  std::uint64_t tokens_seen = 0;
  std::uint64_t seed = 0;
  std::string phase;

  bool operator==(const TrainProgress&) const = default;
};

struct Checkpoint {
  EncoderModel<float> model;
  AdamW<float> optimizer;
  TrainProgress progress;
  nlohmann::json extra = nlohmann::json::object();
};

namespace detail {

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <class U>
void put(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff));
}

inline void put_f32(std::string& out, float f) { put(out, std::bit_cast<std::uint32_t>(f)); }

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}
  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }
  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  float get_f32() { return std::bit_cast<float>(get<std::uint32_t>()); }
  std::size_t position() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw CheckpointError("checkpoint is truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

struct TensorRecord {
  std::string name;
  Shape shape;
  std::span<const float> values;
};

}  // namespace detail

inline std::string serialize_checkpoint(const EncoderModel<float>& model, const AdamW<float>& optimizer,
                                        const TrainProgress& progress, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json meta{{"config", to_json(model.config)},
                      {"step", progress.step},
                      {"tokens_seen", progress.tokens_seen},
                      {"seed", progress.seed},
                      {"phase", progress.phase},
                      {"optimizer", to_json(optimizer.config())},
                      {"optimizer_step", optimizer.step_count()},
                      {"extra", extra}};
  std::vector<detail::TensorRecord> records;
  const auto params = model.named_parameters();
  for (const auto& [name, t] : params) records.push_back({name, t->shape(), t->data()});
  if (!optimizer.names().empty()) {
    if (optimizer.names().size() != params.size()) throw CheckpointError("optimizer state does not match the model");
    for (std::size_t i = 0; i < params.size(); ++i) {
      records.push_back({"adam.m." + params[i].first, params[i].second->shape(), optimizer.first_moment(i)});
      records.push_back({"adam.v." + params[i].first, params[i].second->shape(), optimizer.second_moment(i)});
    }
  }

  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(out, kCheckpointVersion);
  const std::string meta_text = meta.dump();
  detail::put<std::uint64_t>(out, meta_text.size());
  out += meta_text;
  detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.name.size()));
    out += r.name;
    detail::put<std::uint8_t>(out, 0);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(r.shape.size()));
    for (auto d : r.shape) detail::put<std::uint64_t>(out, d);
  }
  for (const auto& r : records)
    for (float f : r.values) detail::put_f32(out, f);
  detail::put<std::uint64_t>(out, detail::fnv1a(out));
  return out;
}

/// The file appears under its final name only once fully written.
inline void save_checkpoint(const std::string& path, const EncoderModel<float>& model, const AdamW<float>& optimizer,
                            const TrainProgress& progress, const nlohmann::json& extra = nlohmann::json::object()) {
  const std::string bytes = serialize_checkpoint(model, optimizer, progress, extra);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw CheckpointError("cannot write " + tmp);
    os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw CheckpointError("write failure on " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

/// Verifies length and checksum before building anything.
inline Checkpoint deserialize_checkpoint(std::string_view bytes) {
  if (bytes.size() < sizeof(kCheckpointMagic) + 4 + 8) throw CheckpointError("checkpoint is truncated");
  if (std::memcmp(bytes.data(), kCheckpointMagic, sizeof(kCheckpointMagic)) != 0) throw CheckpointError("not a checkpoint file (bad magic)");
  {
    detail::Reader tail(bytes.substr(bytes.size() - 8));
    if (tail.get<std::uint64_t>() != detail::fnv1a(bytes.substr(0, bytes.size() - 8))) {
      throw CheckpointError("checkpoint checksum mismatch (corrupted or truncated file)");
    }
  }
  detail::Reader r(bytes.substr(0, bytes.size() - 8));
  r.take(sizeof(kCheckpointMagic));
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw CheckpointError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  }
  const auto meta_len = r.get<std::uint64_t>();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.take(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is invalid: ") + e.what());
  }

  Checkpoint ck;
  try {
    ck.model = EncoderModel<float>::initialize(encoder_config_from_json(meta.at("config")), 0);
    ck.progress.step = meta.at("step").get<std::uint64_t>();
    ck.progress.tokens_seen = meta.at("tokens_seen").get<std::uint64_t>();
    ck.progress.seed = meta.at("seed").get<std::uint64_t>();
    ck.progress.phase = meta.at("phase").get<std::string>();
    ck.extra = meta.at("extra");
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint metadata is incomplete: ") + e.what());
  }
  auto params = ck.model.named_parameters();
  ck.optimizer = AdamW<float>(adamw_config_from_json(meta.at("optimizer")), params);
  ck.optimizer.set_step_count(meta.at("optimizer_step").get<std::uint64_t>());

  const auto count = r.get<std::uint32_t>();
  struct Header {
    std::string name;
    Shape shape;
  };
  std::vector<Header> headers;
  for (std::uint32_t i = 0; i < count; ++i) {
    Header h;
    h.name = std::string(r.take(r.get<std::uint32_t>()));
    if (r.get<std::uint8_t>() != 0) throw CheckpointError("tensor " + h.name + " has an unsupported element type");
    const auto rank = r.get<std::uint32_t>();
    for (std::uint32_t k = 0; k < rank; ++k) h.shape.push_back(r.get<std::uint64_t>());
    headers.push_back(std::move(h));
  }
  const bool has_moments = headers.size() == 3 * params.size();
  if (headers.size() != params.size() && !has_moments) throw CheckpointError("checkpoint tensor count does not match the model");
  for (std::size_t i = 0; i < headers.size(); ++i) {
    std::span<float> dest;
    std::string expected;
    Shape expected_shape;
    if (i < params.size()) {
      expected = params[i].first;
      expected_shape = params[i].second->shape();
      dest = params[i].second->mutable_data();
    } else {
      const std::size_t p = (i - params.size()) / 2;
      const bool first = (i - params.size()) % 2 == 0;
      expected = (first ? "adam.m." : "adam.v.") + params[p].first;
      expected_shape = params[p].second->shape();
      auto& moments = first ? ck.optimizer.first_moment(p) : ck.optimizer.second_moment(p);
      dest = moments;
    }
    if (headers[i].name != expected || headers[i].shape != expected_shape) {
      throw CheckpointError("checkpoint tensor " + headers[i].name + " " + shape_str(headers[i].shape) + " does not match " +
                            expected + " " + shape_str(expected_shape));
    }
    for (auto& x : dest) x = r.get_f32();
  }
  if (r.position() != bytes.size() - 8) throw CheckpointError("checkpoint has trailing bytes");
  return ck;
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot read checkpoint " + path);
  std::string bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

}  // namespace eurobert
