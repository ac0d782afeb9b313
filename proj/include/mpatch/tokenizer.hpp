#pragma once

// Closed-vocabulary whitespace tokenizer.

#include <algorithm>
#include <cctype>
#include <map>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "mpatch/tensor.hpp"

namespace mpatch {

class TextTokenizer {
 public:
  static constexpr float kPadId = 0.0f;
  static constexpr float kUnknownId = 1.0f;
  static constexpr std::size_t kDefaultMaxLength = 16;

  TextTokenizer() = default;

  // Vocabulary is the sorted set of words found in `corpus` after ids 0
  // (<pad>) and 1 (<unk>).
  static TextTokenizer from_corpus(const std::vector<std::string>& corpus,
                                   std::size_t max_length = kDefaultMaxLength) {
    std::set<std::string> words;
    for (const auto& text : corpus) {
      for (auto& w : split(text)) words.insert(std::move(w));
    }
    TextTokenizer tok;
    tok.max_length_ = max_length;
    tok.words_ = {"<pad>", "<unk>"};
    tok.words_.insert(tok.words_.end(), words.begin(), words.end());
    tok.reindex();
    return tok;
  }

  static TextTokenizer from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    TextTokenizer tok;
    tok.words_ = j.at("words").get<std::vector<std::string>>();
    tok.max_length_ = j.at("max_length").get<std::size_t>();
    if (tok.words_.size() < 2 || tok.words_[0] != "<pad>" ||
        tok.words_[1] != "<unk>") {
      throw Error(ErrorKind::InvalidArgument, "tokenizer vocabulary is malformed");
    }
    tok.reindex();
    return tok;
  }

  std::string to_json() const {
    return nlohmann::json{{"words", words_}, {"max_length", max_length_}}.dump();
  }

  // Lowercases, splits on whitespace and strips non-alphanumeric characters.
  static std::vector<std::string> split(std::string_view text) {
    std::vector<std::string> out;
    std::string cur;
    auto flush = [&] {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    };
    for (char ch : text) {
      const auto c = static_cast<unsigned char>(ch);
      if (std::isspace(c)) {
        flush();
      } else if (std::isalnum(c)) {
        cur.push_back(static_cast<char>(std::tolower(c)));
      }
    }
    flush();
    return out;
  }

  std::vector<float> encode(std::string_view text) const {
    std::vector<float> ids(max_length_, kPadId);
    const auto words = split(text);
    for (std::size_t i = 0; i < words.size() && i < max_length_; ++i) {
      auto it = index_.find(words[i]);
      ids[i] = it == index_.end() ? kUnknownId : static_cast<float>(it->second);
    }
    return ids;
  }

  // [N, max_length] id matrix.
  Tensor encode_batch(const std::vector<std::string>& texts) const {
    if (texts.empty()) {
      throw Error(ErrorKind::InvalidArgument, "cannot tokenize an empty batch");
    }
    std::vector<float> data;
    data.reserve(texts.size() * max_length_);
    for (const auto& t : texts) {
      const auto ids = encode(t);
      data.insert(data.end(), ids.begin(), ids.end());
    }
    return Tensor({texts.size(), max_length_}, std::move(data));
  }

  std::size_t vocab_size() const noexcept { return words_.size(); }
  std::size_t max_length() const noexcept { return max_length_; }
  const std::vector<std::string>& words() const noexcept { return words_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < words_.size(); ++i) index_[words_[i]] = i;
  }

  std::vector<std::string> words_;
  std::map<std::string, std::size_t> index_;
  std::size_t max_length_ = kDefaultMaxLength;
};

}  // namespace mpatch
