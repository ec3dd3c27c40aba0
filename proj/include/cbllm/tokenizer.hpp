#ifndef CBLLM_TOKENIZER_HPP_
#define CBLLM_TOKENIZER_HPP_

#include <cstdint>
#include <cstdio>
#include <limits>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cbllm/common.hpp"
#include "json.hpp"

namespace cbllm {

class Tokenizer {
 public:
  virtual ~Tokenizer() = default;
  virtual std::vector<std::int32_t> encode(std::string_view text) const = 0;
  virtual std::size_t vocab_size() const = 0;
  // Round-trippable description, e.g. "hash:buckets=4096:seed=0".
  virtual std::string spec() const = 0;
};

// Lower-cased alphanumeric words hashed into a fixed number of buckets.
class HashWordTokenizer : public Tokenizer {
 public:
  HashWordTokenizer(std::size_t buckets, std::uint64_t seed)
      : buckets_(buckets), seed_(seed) {
    if (buckets == 0) throw ValidationError("hash tokenizer needs buckets > 0");
  }

  static std::vector<std::string> words(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    for (unsigned char c : text) {
      if (std::isalnum(c) || c == '\'' || c >= 0x80) {
        cur.push_back(static_cast<char>(std::tolower(c)));
      } else if (!cur.empty()) {
        out.push_back(std::move(cur));
        cur.clear();
      }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
  }

  std::vector<std::int32_t> encode(std::string_view text) const override {
    std::vector<std::int32_t> ids;
    for (const auto& w : words(text)) {
      ids.push_back(static_cast<std::int32_t>(fnv1a64(w, seed_) % buckets_));
    }
    return ids;
  }

  std::size_t vocab_size() const override { return buckets_; }

  std::string spec() const override {
    return "hash:buckets=" + std::to_string(buckets_) +
           ":seed=" + std::to_string(seed_);
  }

 private:
  std::size_t buckets_;
  std::uint64_t seed_;
};

// Byte-fallback BPE as serialized in a tokenizers-library JSON file
// (Llama-style: "▁" prepended, spaces replaced by "▁", no pre-tokenizer).
class BpeTokenizer : public Tokenizer {
 public:
  explicit BpeTokenizer(const std::string& path) : path_(path) {
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(read_text_file(path));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError("tokenizer " + path + ": " + e.what());
    }
    const auto& model = j.at("model");
    if (model.at("type") != "BPE") throw FormatError("tokenizer model is not BPE");
    for (const auto& [tok, id] : model.at("vocab").items()) {
      vocab_.emplace(tok, id.get<std::int32_t>());
    }
    byte_fallback_ = model.value("byte_fallback", false);
    if (model.contains("unk_token") && model["unk_token"].is_string()) {
      auto it = vocab_.find(model["unk_token"].get<std::string>());
      if (it != vocab_.end()) unk_id_ = it->second;
    }
    const auto& merges = model.at("merges");
    for (std::size_t rank = 0; rank < merges.size(); ++rank) {
      std::string a, b;
      if (merges[rank].is_string()) {
        auto s = merges[rank].get<std::string>();
        auto sp = s.find(' ');
        if (sp == std::string::npos) throw FormatError("bad merge entry: " + s);
        a = s.substr(0, sp);
        b = s.substr(sp + 1);
      } else {
        a = merges[rank].at(0).get<std::string>();
        b = merges[rank].at(1).get<std::string>();
      }
      auto ia = vocab_.find(a), ib = vocab_.find(b), im = vocab_.find(a + b);
      if (ia == vocab_.end() || ib == vocab_.end() || im == vocab_.end()) continue;
      merges_.emplace(pair_key(ia->second, ib->second),
                      Merge{static_cast<std::uint32_t>(rank), im->second});
    }
    parse_normalizer(j.value("normalizer", nlohmann::json()));
  }

  std::vector<std::int32_t> encode(std::string_view text) const override {
    std::vector<std::int32_t> ids;
    if (text.empty()) return ids;
    std::string norm = normalize(text);
    // Initial symbols: one per UTF-8 code point, byte fallback when unknown.
    for (std::size_t i = 0; i < norm.size();) {
      std::size_t len = utf8_len(static_cast<unsigned char>(norm[i]));
      if (i + len > norm.size()) len = norm.size() - i;
      std::string cp = norm.substr(i, len);
      auto it = vocab_.find(cp);
      if (it != vocab_.end()) {
        ids.push_back(it->second);
      } else if (byte_fallback_) {
        for (unsigned char byte : cp) {
          char buf[8];
          std::snprintf(buf, sizeof buf, "<0x%02X>", byte);
          auto bt = vocab_.find(buf);
          ids.push_back(bt != vocab_.end() ? bt->second : unk_id_);
        }
      } else {
        ids.push_back(unk_id_);
      }
      i += len;
    }
    // Repeatedly apply the lowest-rank merge, leftmost first.
    while (ids.size() > 1) {
      std::uint32_t best_rank = std::numeric_limits<std::uint32_t>::max();
      std::size_t best_pos = 0;
      std::int32_t best_id = -1;
      for (std::size_t p = 0; p + 1 < ids.size(); ++p) {
        auto it = merges_.find(pair_key(ids[p], ids[p + 1]));
        if (it != merges_.end() && it->second.rank < best_rank) {
          best_rank = it->second.rank;
          best_pos = p;
          best_id = it->second.id;
        }
      }
      if (best_id < 0) break;
      ids[best_pos] = best_id;
      ids.erase(ids.begin() + static_cast<std::ptrdiff_t>(best_pos) + 1);
    }
    return ids;
  }

  std::size_t vocab_size() const override { return vocab_.size(); }
  std::string spec() const override { return "bpe:" + path_; }

 private:
  struct Merge {
    std::uint32_t rank;
    std::int32_t id;
  };

  static std::uint64_t pair_key(std::int32_t a, std::int32_t b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  static std::size_t utf8_len(unsigned char lead) {
    if (lead < 0x80) return 1;
    if ((lead >> 5) == 0x6) return 2;
    if ((lead >> 4) == 0xE) return 3;
    if ((lead >> 3) == 0x1E) return 4;
    return 1;
  }

  void parse_normalizer(const nlohmann::json& n) {
    if (n.is_null()) return;
    std::vector<nlohmann::json> steps;
    if (n.at("type") == "Sequence") {
      for (const auto& s : n.at("normalizers")) steps.push_back(s);
    } else {
      steps.push_back(n);
    }
    for (const auto& s : steps) {
      auto type = s.at("type").get<std::string>();
      if (type == "Prepend") {
        norm_steps_.push_back({NormStep::kPrepend, s.at("prepend").get<std::string>(), ""});
      } else if (type == "Replace") {
        norm_steps_.push_back({NormStep::kReplace,
                               s.at("pattern").at("String").get<std::string>(),
                               s.at("content").get<std::string>()});
      } else {
        throw FormatError("unsupported tokenizer normalizer: " + type);
      }
    }
  }

  std::string normalize(std::string_view text) const {
    std::string s(text);
    for (const auto& step : norm_steps_) {
      if (step.kind == NormStep::kPrepend) {
        s = step.a + s;
      } else {
        std::string out;
        std::size_t pos = 0;
        while (true) {
          auto hit = s.find(step.a, pos);
          out.append(s, pos, hit == std::string::npos ? std::string::npos : hit - pos);
          if (hit == std::string::npos) break;
          out += step.b;
          pos = hit + step.a.size();
        }
        s = std::move(out);
      }
    }
    return s;
  }

  struct NormStep {
    enum Kind { kPrepend, kReplace } kind;
    std::string a, b;
  };

  std::string path_;
  std::unordered_map<std::string, std::int32_t> vocab_;
  std::unordered_map<std::uint64_t, Merge> merges_;
  std::vector<NormStep> norm_steps_;
  bool byte_fallback_ = false;
  std::int32_t unk_id_ = 0;
};

// "hash:buckets=N:seed=S" or "bpe:<path to tokenizer json>".
inline std::shared_ptr<const Tokenizer> make_tokenizer(std::string_view spec) {
  if (spec.rfind("bpe:", 0) == 0) {
    return std::make_shared<BpeTokenizer>(std::string(spec.substr(4)));
  }
  if (spec.rfind("hash", 0) == 0) {
    std::size_t buckets = 4096;
    std::uint64_t seed = 0;
    auto parts = split(spec, ':');
    for (std::size_t i = 1; i < parts.size(); ++i) {
      auto kv = split(parts[i], '=');
      if (kv.size() != 2) throw ValidationError("bad tokenizer option: " + parts[i]);
      if (kv[0] == "buckets") {
        buckets = std::stoull(kv[1]);
      } else if (kv[0] == "seed") {
        seed = std::stoull(kv[1]);
      } else {
        throw ValidationError("unknown tokenizer option: " + kv[0]);
      }
    }
    return std::make_shared<HashWordTokenizer>(buckets, seed);
  }
  throw ValidationError("unknown tokenizer spec: " + std::string(spec));
}

}  // namespace cbllm

#endif  // CBLLM_TOKENIZER_HPP_
