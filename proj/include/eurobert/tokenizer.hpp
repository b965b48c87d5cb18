#pragma once

// Byte-level BPE tokenizer.
//
// Id layout: the five special tokens first (pad=0, mask=1, bos=2, eos=3,
// parallel_sep=4), then the 256 byte values, then learned merges in the order
// they were learned. Raw text never encodes to a special id: special token
// strings appearing in input are tokenized as ordinary bytes.

#include <array>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

namespace eurobert {

namespace special {
inline constexpr std::int32_t pad = 0;
inline constexpr std::int32_t mask = 1;
inline constexpr std::int32_t bos = 2;
inline constexpr std::int32_t eos = 3;
inline constexpr std::int32_t parallel_sep = 4;
inline constexpr std::int32_t count = 5;
inline constexpr std::array<std::string_view, count> names{"<|pad|>", "<|mask|>", "<|bos|>", "<|eos|>",
                                                          "<|parallel_sep|>"};
}  // namespace special

inline constexpr std::int32_t kFirstByteId = special::count;
inline constexpr std::int32_t kFirstMergeId = special::count + 256;

class TokenizerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Encoding {
  std::vector<std::int32_t> ids;
  std::vector<std::pair<std::size_t, std::size_t>> offsets;  // [start, end) byte spans
  std::size_t text_length = 0;
};

/// Splits text into pre-tokenization chunks: words with at most one leading
/// space, and whitespace runs. Merges never cross chunk boundaries.
inline std::vector<std::pair<std::size_t, std::size_t>> pretokenize(std::string_view text) {
  auto is_space = [](unsigned char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; };
  std::vector<std::pair<std::size_t, std::size_t>> chunks;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    const std::size_t start = i;
    const auto c = static_cast<unsigned char>(text[i]);
    if (c == ' ' && i + 1 < n && !is_space(static_cast<unsigned char>(text[i + 1]))) {
      ++i;
      while (i < n && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    } else if (is_space(c)) {
      while (i < n && is_space(static_cast<unsigned char>(text[i]))) {
        // leave a single space to lead the following word
        if (text[i] == ' ' && i + 1 < n && !is_space(static_cast<unsigned char>(text[i + 1])) && i > start) break;
        ++i;
      }
    } else {
      while (i < n && !is_space(static_cast<unsigned char>(text[i]))) ++i;
    }
    chunks.emplace_back(start, i);
  }
  return chunks;
}

class Vocab {
 public:
  Vocab() {
    for (auto name : special::names) tokens_.emplace_back(name);
    for (int b = 0; b < 256; ++b) tokens_.emplace_back(1, static_cast<char>(b));
  }

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::int32_t id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  const std::vector<std::pair<std::int32_t, std::int32_t>>& merges() const { return merges_; }
  static bool is_special(std::int32_t id) { return id >= 0 && id < special::count; }

  /// Appends a merge of two existing ids; returns the new id.
  std::int32_t add_merge(std::int32_t left, std::int32_t right) {
    if (left < kFirstByteId || right < kFirstByteId || left >= static_cast<std::int32_t>(size()) ||
        right >= static_cast<std::int32_t>(size())) {
      throw TokenizerError("merge references an invalid id");
    }
    const auto id = static_cast<std::int32_t>(size());
    std::string merged = tokens_[left] + tokens_[right];
    if (lookup_.count(merged)) throw TokenizerError("merge duplicates an existing token");
    tokens_.push_back(merged);
    merges_.emplace_back(left, right);
    rank_[{left, right}] = id;
    lookup_.emplace(std::move(merged), id);
    return id;
  }

  bool contains_bytes(const std::string& bytes) const {
    return bytes.size() == 1 || lookup_.count(bytes) > 0;
  }

  Encoding encode(std::string_view text) const {
    Encoding enc;
    enc.text_length = text.size();
    struct Piece {
      std::int32_t id;
      std::size_t start, end;
    };
    std::vector<Piece> pieces;
    for (auto [cs, ce] : pretokenize(text)) {
      pieces.clear();
      for (std::size_t i = cs; i < ce; ++i)
        pieces.push_back({kFirstByteId + static_cast<unsigned char>(text[i]), i, i + 1});
      while (pieces.size() > 1) {
        std::int32_t best = -1;
        for (std::size_t i = 0; i + 1 < pieces.size(); ++i) {
          auto it = rank_.find({pieces[i].id, pieces[i + 1].id});
          if (it != rank_.end() && (best < 0 || it->second < best)) best = it->second;
        }
        if (best < 0) break;
        const auto pair = merges_[best - kFirstMergeId];
        std::vector<Piece> next;
        next.reserve(pieces.size());
        for (std::size_t i = 0; i < pieces.size(); ++i) {
          if (i + 1 < pieces.size() && pieces[i].id == pair.first && pieces[i + 1].id == pair.second) {
            next.push_back({best, pieces[i].start, pieces[i + 1].end});
            ++i;
          } else {
            next.push_back(pieces[i]);
          }
        }
        pieces.swap(next);
      }
      for (const auto& p : pieces) {
        enc.ids.push_back(p.id);
        enc.offsets.emplace_back(p.start, p.end);
      }
    }
    return enc;
  }

  std::string decode(std::span<const std::int32_t> ids) const {
    std::string out;
    for (auto id : ids) out += token(id);
    return out;
  }

  /// Header line, then one escaped token per line in id order; merged tokens
  /// carry their two component ids after tabs.
  void save(std::ostream& os) const {
    os << "eurobert-bpe 1 vocab_size=" << size() << " specials=";
    for (std::size_t i = 0; i < special::names.size(); ++i) os << (i ? "," : "") << special::names[i];
    os << '\n';
    for (std::size_t id = 0; id < size(); ++id) {
      os << escape(tokens_[id]);
      if (static_cast<std::int32_t>(id) >= kFirstMergeId) {
        const auto& m = merges_[id - kFirstMergeId];
        os << '\t' << m.first << '\t' << m.second;
      }
      os << '\n';
    }
  }

  static Vocab load(std::istream& is) {
    std::string header;
    if (!std::getline(is, header)) throw TokenizerError("vocabulary file is empty");
    std::istringstream hs(header);
    std::string magic, version, size_field, specials_field;
    hs >> magic >> version >> size_field >> specials_field;
    if (magic != "eurobert-bpe" || version != "1") throw TokenizerError("unsupported vocabulary header: " + header);
    if (size_field.rfind("vocab_size=", 0) != 0) throw TokenizerError("vocabulary header lacks vocab_size");
    const std::size_t declared = std::stoul(size_field.substr(11));
    std::string expected_specials = "specials=";
    for (std::size_t i = 0; i < special::names.size(); ++i) expected_specials += (i ? "," : "") + std::string(special::names[i]);
    if (specials_field != expected_specials) throw TokenizerError("vocabulary special tokens do not match: " + specials_field);

    Vocab v;
    std::string line;
    std::size_t id = 0;
    while (std::getline(is, line)) {
      std::string text = line, rest;
      if (auto tab = line.find('\t'); tab != std::string::npos) {
        text = line.substr(0, tab);
        rest = line.substr(tab + 1);
      }
      const std::string bytes = unescape(text);
      if (static_cast<std::int32_t>(id) < kFirstMergeId) {
        if (bytes != v.tokens_[id]) throw TokenizerError("line " + std::to_string(id + 2) + ": unexpected reserved token");
      } else {
        std::istringstream rs(rest);
        std::int32_t left = -1, right = -1;
        if (!(rs >> left >> right)) throw TokenizerError("line " + std::to_string(id + 2) + ": merge lacks component ids");
        v.add_merge(left, right);
        if (v.tokens_.back() != bytes) throw TokenizerError("line " + std::to_string(id + 2) + ": merge does not spell its token");
      }
      ++id;
    }
    if (v.size() != declared) {
      throw TokenizerError("vocabulary declares " + std::to_string(declared) + " tokens but lists " + std::to_string(v.size()));
    }
    return v;
  }

  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw TokenizerError("cannot write " + path);
    save(os);
  }
  static Vocab load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw TokenizerError("cannot read " + path);
    return load(is);
  }

  static std::string escape(const std::string& bytes) {
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned char c : bytes) {
      if (c > 0x20 && c < 0x7f && c != '\\') {
        out += static_cast<char>(c);
      } else {
        out += "\\x";
        out += hex[c >> 4];
        out += hex[c & 15];
      }
    }
    return out;
  }

  static std::string unescape(const std::string& text) {
    std::string out;
    for (std::size_t i = 0; i < text.size(); ++i) {
      if (text[i] != '\\') {
        out += text[i];
        continue;
      }
      if (i + 3 >= text.size()) throw TokenizerError("truncated escape in " + text);
      if (text[i + 1] != 'x') throw TokenizerError("bad escape in " + text);
      out += static_cast<char>(std::stoi(text.substr(i + 2, 2), nullptr, 16));
      i += 3;
    }
    return out;
  }

 private:
  std::vector<std::string> tokens_;
  std::vector<std::pair<std::int32_t, std::int32_t>> merges_;
  std::map<std::pair<std::int32_t, std::int32_t>, std::int32_t> rank_;
  std::unordered_map<std::string, std::int32_t> lookup_;
};

/// Learns merges greedily by pair frequency until the vocabulary reaches
/// vocab_size. Ties go to the lexicographically smallest (left, right) pair
/// of token byte strings. A pair whose concatenation already exists as a
/// token is never merged again.
inline Vocab train_bpe(const std::vector<std::string>& corpus, std::size_t vocab_size) {
  if (vocab_size <= static_cast<std::size_t>(kFirstMergeId)) {
    throw TokenizerError("vocab_size must exceed " + std::to_string(kFirstMergeId) +
                         " (256 bytes plus special tokens), got " + std::to_string(vocab_size));
  }
  std::map<std::string, std::uint64_t> chunk_counts;
  std::size_t total_bytes = 0;
  for (const auto& text : corpus) {
    total_bytes += text.size();
    for (auto [s, e] : pretokenize(text)) ++chunk_counts[text.substr(s, e - s)];
  }
  if (total_bytes == 0) throw TokenizerError("cannot train a tokenizer on an empty corpus");

  struct Word {
    std::vector<std::int32_t> symbols;
    std::uint64_t count;
  };
  std::vector<Word> words;
  for (const auto& [chunk, count] : chunk_counts) {
    Word w{{}, count};
    for (unsigned char c : chunk) w.symbols.push_back(kFirstByteId + c);
    words.push_back(std::move(w));
  }

  Vocab vocab;
  struct PairHash {
    std::size_t operator()(const std::pair<std::int32_t, std::int32_t>& p) const {
      return std::hash<std::uint64_t>()((static_cast<std::uint64_t>(p.first) << 32) | static_cast<std::uint32_t>(p.second));
    }
  };
  while (vocab.size() < vocab_size) {
    std::unordered_map<std::pair<std::int32_t, std::int32_t>, std::uint64_t, PairHash> counts;
    for (const auto& w : words)
      for (std::size_t i = 0; i + 1 < w.symbols.size(); ++i) counts[{w.symbols[i], w.symbols[i + 1]}] += w.count;

    std::pair<std::int32_t, std::int32_t> best{-1, -1};
    std::uint64_t best_count = 0;
    for (const auto& [pair, count] : counts) {
      if (count < best_count) continue;
      if (vocab.contains_bytes(vocab.token(pair.first) + vocab.token(pair.second))) continue;
      const bool better = count > best_count ||
                          std::tie(vocab.token(pair.first), vocab.token(pair.second)) <
                              std::tie(vocab.token(best.first), vocab.token(best.second));
      if (better) {
        best = pair;
        best_count = count;
      }
    }
    if (best_count == 0) {
      throw TokenizerError("corpus supports only " + std::to_string(vocab.size()) + " tokens, fewer than vocab_size " +
                           std::to_string(vocab_size));
    }
    const auto id = vocab.add_merge(best.first, best.second);
    for (auto& w : words) {
      std::vector<std::int32_t> next;
      next.reserve(w.symbols.size());
      for (std::size_t i = 0; i < w.symbols.size(); ++i) {
        if (i + 1 < w.symbols.size() && w.symbols[i] == best.first && w.symbols[i + 1] == best.second) {
          next.push_back(id);
          ++i;
        } else {
          next.push_back(w.symbols[i]);
        }
      }
      w.symbols.swap(next);
    }
  }
  return vocab;
}

/// Number of tokens whose span intersects each word span. A token straddling
/// a word boundary counts for both words.
inline std::vector<double> fertility(const Encoding& encoding,
                                     std::span<const std::pair<std::size_t, std::size_t>> word_spans) {
  std::vector<double> out;
  out.reserve(word_spans.size());
  for (auto [start, end] : word_spans) {
    if (start > end || end > encoding.text_length) {
      throw std::out_of_range("word span [" + std::to_string(start) + ", " + std::to_string(end) +
                              ") lies outside text of length " + std::to_string(encoding.text_length));
    }
    std::size_t n = 0;
    for (auto [ts, te] : encoding.offsets) n += ts < end && te > start;
    out.push_back(static_cast<double>(n));
  }
  return out;
}

/// Mean tokens per word over the given spans.
inline double mean_fertility(const Encoding& encoding, std::span<const std::pair<std::size_t, std::size_t>> word_spans) {
  if (word_spans.empty()) throw std::invalid_argument("mean fertility needs at least one word span");
  double total = 0.0;
  for (double f : fertility(encoding, word_spans)) total += f;
  return total / static_cast<double>(word_spans.size());
}

/// Whitespace-delimited word spans of text.
inline std::vector<std::pair<std::size_t, std::size_t>> whitespace_words(std::string_view text) {
  std::vector<std::pair<std::size_t, std::size_t>> spans;
  std::size_t i = 0;
  auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r'; };
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    const std::size_t s = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    if (i > s) spans.emplace_back(s, i);
  }
  return spans;
}

}  // namespace eurobert
