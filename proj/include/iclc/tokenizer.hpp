#pragma once

// GPT-2 style byte-level BPE: vocab.json + merges.txt.
// Every input byte is first mapped to a printable unicode symbol, so any byte
// string is representable and decode(encode(s)) == s.

#include "iclc/errors.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <climits>
#include <cstdint>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <algorithm>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace iclc {

namespace detail {

inline void append_utf8(std::string& out, std::uint32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xC0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xE0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  } else {
    out.push_back(static_cast<char>(0xF0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3F)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3F)));
  }
}

// Decodes one UTF-8 code point starting at s[i]. Invalid sequences consume a
// single byte and report cp = 0xFFFFFFFF so callers can treat them as opaque.
inline std::uint32_t next_code_point(std::string_view s, std::size_t i, std::size_t& len) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  auto cont = [&](std::size_t j) {
    return j < s.size() && (static_cast<unsigned char>(s[j]) & 0xC0) == 0x80;
  };
  len = 1;
  if (b0 < 0x80) return b0;
  if ((b0 & 0xE0) == 0xC0 && b0 >= 0xC2 && cont(i + 1)) {
    len = 2;
    return ((b0 & 0x1Fu) << 6) | (static_cast<unsigned char>(s[i + 1]) & 0x3Fu);
  }
  if ((b0 & 0xF0) == 0xE0 && cont(i + 1) && cont(i + 2)) {
    const std::uint32_t cp = ((b0 & 0x0Fu) << 12) | ((static_cast<unsigned char>(s[i + 1]) & 0x3Fu) << 6) |
                             (static_cast<unsigned char>(s[i + 2]) & 0x3Fu);
    if (cp >= 0x800 && (cp < 0xD800 || cp > 0xDFFF)) {
      len = 3;
      return cp;
    }
  }
  if ((b0 & 0xF8) == 0xF0 && cont(i + 1) && cont(i + 2) && cont(i + 3)) {
    const std::uint32_t cp = ((b0 & 0x07u) << 18) | ((static_cast<unsigned char>(s[i + 1]) & 0x3Fu) << 12) |
                             ((static_cast<unsigned char>(s[i + 2]) & 0x3Fu) << 6) |
                             (static_cast<unsigned char>(s[i + 3]) & 0x3Fu);
    if (cp >= 0x10000 && cp <= 0x10FFFF) {
      len = 4;
      return cp;
    }
  }
  return 0xFFFFFFFFu;
}

inline bool is_space_cp(std::uint32_t cp) {
  return cp == ' ' || (cp >= 0x09 && cp <= 0x0D) || cp == 0x85 || cp == 0xA0 || cp == 0x1680 ||
         (cp >= 0x2000 && cp <= 0x200A) || cp == 0x2028 || cp == 0x2029 || cp == 0x202F || cp == 0x205F ||
         cp == 0x3000;
}

inline bool is_number_cp(std::uint32_t cp) {
  if (cp >= '0' && cp <= '9') return true;
  if (cp == 0xB2 || cp == 0xB3 || cp == 0xB9 || (cp >= 0xBC && cp <= 0xBE)) return true;
  if ((cp >= 0x660 && cp <= 0x669) || (cp >= 0x6F0 && cp <= 0x6F9) || (cp >= 0x966 && cp <= 0x96F)) return true;
  if ((cp >= 0x2070 && cp <= 0x2079) || (cp >= 0x2080 && cp <= 0x2089) || (cp >= 0x2150 && cp <= 0x2189)) return true;
  if (cp >= 0xFF10 && cp <= 0xFF19) return true;
  return false;
}

// Approximation of \p{L}: exact for ASCII and Latin-1, coarse elsewhere
// (common punctuation/symbol blocks excluded, everything else treated as letters).
inline bool is_letter_cp(std::uint32_t cp) {
  if (cp < 0x80) return (cp >= 'a' && cp <= 'z') || (cp >= 'A' && cp <= 'Z');
  if (cp == 0xFFFFFFFFu) return false;
  if (cp < 0x100) return cp == 0xAA || cp == 0xB5 || cp == 0xBA || (cp >= 0xC0 && cp != 0xD7 && cp != 0xF7);
  if (is_space_cp(cp) || is_number_cp(cp)) return false;
  if (cp >= 0x2000 && cp <= 0x2BFF) return false;  // punctuation, symbols, arrows, box drawing
  if (cp >= 0x3000 && cp <= 0x303F) return false;  // CJK punctuation
  if (cp >= 0xFE30 && cp <= 0xFE4F) return false;
  if (cp >= 0xFF00 && cp <= 0xFF20) return false;
  if (cp >= 0x1F000 && cp <= 0x1FAFF) return false;  // emoji and pictographs
  if (cp >= 0x0300 && cp <= 0x036F) return false;    // combining marks (\p{M})
  if (cp >= 0xE000 && cp <= 0xF8FF) return false;    // private use
  return true;
}

}  // namespace detail

class Tokenizer {
 public:
  Tokenizer() = default;
  Tokenizer(const Tokenizer& o) : vocab_(o.vocab_), id_to_token_(o.id_to_token_), ranks_(o.ranks_) {}
  Tokenizer& operator=(const Tokenizer& o) {
    vocab_ = o.vocab_;
    id_to_token_ = o.id_to_token_;
    ranks_ = o.ranks_;
    std::lock_guard lock(cache_mutex_);
    cache_.clear();
    return *this;
  }

  static Tokenizer load(const std::string& vocab_path, const std::string& merges_path) {
    std::ifstream vin(vocab_path);
    if (!vin) throw LoadError("cannot open vocab: " + vocab_path);
    nlohmann::json vj;
    try {
      vin >> vj;
    } catch (const nlohmann::json::exception& e) {
      throw LoadError("malformed vocab " + vocab_path + ": " + e.what());
    }
    std::map<std::string, int> vocab;
    for (auto it = vj.begin(); it != vj.end(); ++it) vocab[it.key()] = it->get<int>();

    std::ifstream min(merges_path);
    if (!min) throw LoadError("cannot open merges: " + merges_path);
    std::vector<std::pair<std::string, std::string>> merges;
    std::string line;
    while (std::getline(min, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line.rfind("#version", 0) == 0) continue;
      const auto sp = line.find(' ');
      if (sp == std::string::npos) throw LoadError("malformed merge line: " + line);
      merges.emplace_back(line.substr(0, sp), line.substr(sp + 1));
    }
    return from_data(vocab, merges);
  }

  static Tokenizer from_data(const std::map<std::string, int>& vocab,
                             const std::vector<std::pair<std::string, std::string>>& merges) {
    Tokenizer t;
    int max_id = -1;
    for (const auto& [tok, id] : vocab) {
      if (id < 0) throw LoadError("negative token id for " + tok);
      max_id = std::max(max_id, id);
    }
    t.id_to_token_.assign(static_cast<std::size_t>(max_id + 1), std::string());
    for (const auto& [tok, id] : vocab) {
      t.vocab_[tok] = id;
      t.id_to_token_[static_cast<std::size_t>(id)] = tok;
    }
    for (int b = 0; b < 256; ++b) {
      if (!t.vocab_.count(byte_symbol(static_cast<unsigned char>(b)))) {
        throw LoadError("vocab lacks the byte symbol for byte " + std::to_string(b));
      }
    }
    for (std::size_t r = 0; r < merges.size(); ++r) {
      t.ranks_.emplace(merges[r].first + '\x01' + merges[r].second, static_cast<int>(r));
    }
    return t;
  }

  // Printable unicode symbol (UTF-8) standing for one raw byte.
  static const std::string& byte_symbol(unsigned char b) { return tables().byte_to_symbol[b]; }

  // GPT-2 pre-tokenizer:
  //   's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
  static std::vector<std::string_view> pretokenize(std::string_view s) {
    std::vector<std::string_view> out;
    std::vector<std::pair<std::size_t, std::uint32_t>> cps;  // (byte offset, code point)
    for (std::size_t i = 0; i < s.size();) {
      std::size_t len;
      cps.emplace_back(i, detail::next_code_point(s, i, len));
      i += len;
    }
    const std::size_t n = cps.size();
    auto off = [&](std::size_t ci) { return ci < n ? cps[ci].first : s.size(); };
    auto cls = [&](std::size_t ci) -> int {
      const std::uint32_t cp = cps[ci].second;
      if (detail::is_space_cp(cp)) return 0;
      if (detail::is_letter_cp(cp)) return 1;
      if (detail::is_number_cp(cp)) return 2;
      return 3;
    };
    std::size_t i = 0;
    while (i < n) {
      const std::uint32_t cp = cps[i].second;
      if (cp == '\'' && i + 1 < n) {
        static const char* const contractions[] = {"re", "ve", "ll", "s", "t", "m", "d"};
        bool matched = false;
        for (const char* c : contractions) {
          const std::size_t cl = std::char_traits<char>::length(c);
          bool ok = true;
          for (std::size_t j = 0; ok && j < cl; ++j) {
            if (i + 1 + j >= n || cps[i + 1 + j].second != static_cast<unsigned char>(c[j])) ok = false;
          }
          if (ok) {
            out.push_back(s.substr(off(i), off(i + 1 + cl) - off(i)));
            i += 1 + cl;
            matched = true;
            break;
          }
        }
        if (matched) continue;
      }
      const int c0 = cls(i);
      std::size_t start = i;
      std::size_t j = i;
      if (c0 == 0) {
        // Optional leading space followed by a non-space run.
        if (cp == ' ' && i + 1 < n && cls(i + 1) != 0) {
          j = i + 1;
        } else {
          std::size_t e = i;
          while (e < n && cls(e) == 0) ++e;
          // \s+(?!\S): leave the last whitespace char for the next token when followed by non-space
          if (e < n && e - i > 1) e -= 1;
          out.push_back(s.substr(off(start), off(e) - off(start)));
          i = e;
          continue;
        }
      }
      const int c = cls(j);
      std::size_t e = j + 1;
      while (e < n && cls(e) == c) ++e;
      out.push_back(s.substr(off(start), off(e) - off(start)));
      i = e;
    }
    return out;
  }

  std::vector<int> encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto word : pretokenize(text)) {
      for (int id : encode_word(word)) ids.push_back(id);
    }
    return ids;
  }

  std::string decode(std::span<const int> ids) const {
    std::string out;
    const auto& t = tables();
    for (int id : ids) {
      const std::string& tok = token(id);
      for (std::size_t i = 0; i < tok.size();) {
        std::size_t len;
        const std::uint32_t cp = detail::next_code_point(tok, i, len);
        auto it = t.symbol_to_byte.find(cp);
        if (it != t.symbol_to_byte.end()) {
          out.push_back(static_cast<char>(it->second));
        } else {
          out.append(tok, i, len);  // special tokens outside the byte alphabet
        }
        i += len;
      }
    }
    return out;
  }

  std::string decode(const std::vector<int>& ids) const { return decode(std::span<const int>(ids)); }

  const std::string& token(int id) const {
    if (id < 0 || id >= static_cast<int>(id_to_token_.size())) {
      throw ArgumentError("token id out of range: " + std::to_string(id));
    }
    return id_to_token_[static_cast<std::size_t>(id)];
  }

  std::optional<int> token_id(const std::string& token_str) const {
    auto it = vocab_.find(token_str);
    if (it == vocab_.end()) return std::nullopt;
    return it->second;
  }

  int vocab_size() const { return static_cast<int>(id_to_token_.size()); }
  std::size_t merge_count() const { return ranks_.size(); }

 private:
  struct Tables {
    std::array<std::string, 256> byte_to_symbol;
    std::unordered_map<std::uint32_t, unsigned char> symbol_to_byte;
  };

  static const Tables& tables() {
    static const Tables t = [] {
      Tables tb;
      std::vector<int> bs;
      for (int b = '!'; b <= '~'; ++b) bs.push_back(b);
      for (int b = 0xA1; b <= 0xAC; ++b) bs.push_back(b);
      for (int b = 0xAE; b <= 0xFF; ++b) bs.push_back(b);
      std::array<std::uint32_t, 256> cp{};
      std::array<bool, 256> direct{};
      for (int b : bs) {
        cp[static_cast<std::size_t>(b)] = static_cast<std::uint32_t>(b);
        direct[static_cast<std::size_t>(b)] = true;
      }
      std::uint32_t extra = 0;
      for (int b = 0; b < 256; ++b) {
        if (!direct[static_cast<std::size_t>(b)]) cp[static_cast<std::size_t>(b)] = 256 + extra++;
      }
      for (int b = 0; b < 256; ++b) {
        detail::append_utf8(tb.byte_to_symbol[static_cast<std::size_t>(b)], cp[static_cast<std::size_t>(b)]);
        tb.symbol_to_byte[cp[static_cast<std::size_t>(b)]] = static_cast<unsigned char>(b);
      }
      return tb;
    }();
    return t;
  }

  int rank(const std::string& a, const std::string& b) const {
    auto it = ranks_.find(a + '\x01' + b);
    return it == ranks_.end() ? INT_MAX : it->second;
  }

  std::vector<int> encode_word(std::string_view word) const {
    std::string key(word);
    {
      std::lock_guard lock(cache_mutex_);
      auto it = cache_.find(key);
      if (it != cache_.end()) return it->second;
    }
    std::vector<std::string> parts;
    parts.reserve(word.size());
    for (char c : word) parts.push_back(byte_symbol(static_cast<unsigned char>(c)));
    while (parts.size() > 1) {
      int best = INT_MAX;
      std::size_t best_i = 0;
      for (std::size_t i = 0; i + 1 < parts.size(); ++i) {
        const int r = rank(parts[i], parts[i + 1]);
        if (r < best) {
          best = r;
          best_i = i;
        }
      }
      if (best == INT_MAX) break;
      const std::string a = parts[best_i];
      const std::string b = parts[best_i + 1];
      std::vector<std::string> merged;
      merged.reserve(parts.size());
      for (std::size_t i = 0; i < parts.size();) {
        if (i + 1 < parts.size() && parts[i] == a && parts[i + 1] == b) {
          merged.push_back(a + b);
          i += 2;
        } else {
          merged.push_back(parts[i]);
          ++i;
        }
      }
      parts = std::move(merged);
    }
    std::vector<int> ids;
    ids.reserve(parts.size());
    for (const auto& p : parts) {
      auto it = vocab_.find(p);
      if (it != vocab_.end()) {
        ids.push_back(it->second);
      } else {
        // A merge produced a symbol absent from the vocab: fall back to bytes.
        for (std::size_t i = 0; i < p.size();) {
          std::size_t len;
          const std::uint32_t cp = detail::next_code_point(p, i, len);
          ids.push_back(vocab_.at(byte_symbol(tables().symbol_to_byte.at(cp))));
          i += len;
        }
      }
    }
    std::lock_guard lock(cache_mutex_);
    cache_.emplace(std::move(key), ids);
    return ids;
  }

  std::unordered_map<std::string, int> vocab_;
  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> ranks_;
  mutable std::mutex cache_mutex_;
  mutable std::unordered_map<std::string, std::vector<int>> cache_;
};

}  // namespace iclc
