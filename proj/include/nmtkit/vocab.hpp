#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

#include "nmtkit/errors.hpp"
#include "nmtkit/model.hpp"

namespace nmt {

/// Token <-> id table. Ids 0..2 are the reserved unknown, begin and end
/// symbols; the rest are ordered by descending frequency, then bytewise.
class Vocab {
 public:
  static constexpr const char* kUnkToken = "<unk>";
  static constexpr const char* kBosToken = "<s>";
  static constexpr const char* kEosToken = "</s>";

  Vocab() : tokens_{kUnkToken, kBosToken, kEosToken} { reindex(); }

  explicit Vocab(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    if (tokens_.size() < 3 || tokens_[kUnk] != kUnkToken || tokens_[kBos] != kBosToken || tokens_[kEos] != kEosToken)
      throw FormatError("vocabulary must start with the reserved symbols");
    reindex();
    if (index_.size() != tokens_.size()) throw FormatError("vocabulary has duplicate tokens");
  }

  /// Builds from token counts; tokens seen fewer than min_count times and
  /// anything beyond max_size entries (reserved symbols included) map to unk.
  static Vocab build(const std::map<std::string, std::uint64_t>& counts, std::size_t max_size = 0,
                     std::uint64_t min_count = 1) {
    std::vector<std::pair<std::string, std::uint64_t>> items;
    for (const auto& [t, c] : counts)
      if (c >= min_count && t != kUnkToken && t != kBosToken && t != kEosToken) items.emplace_back(t, c);
    std::stable_sort(items.begin(), items.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens{kUnkToken, kBosToken, kEosToken};
    for (const auto& [t, c] : items) {
      if (max_size && tokens.size() >= max_size) break;
      tokens.push_back(t);
    }
    return Vocab(std::move(tokens));
  }

  std::size_t size() const { return tokens_.size(); }

  int id(const std::string& token) const {
    auto it = index_.find(token);
    return it == index_.end() ? kUnk : it->second;
  }

  const std::string& token(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size())
      throw ArgumentError("token id " + std::to_string(id) + " outside vocabulary");
    return tokens_[id];
  }

  std::vector<int> encode(const std::vector<std::string>& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  /// Tokens for ids, dropping a final end symbol if present.
  std::vector<std::string> decode(const std::vector<int>& ids) const {
    std::vector<std::string> out;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] == kEos && i + 1 == ids.size()) break;
      out.push_back(token(ids[i]));
    }
    return out;
  }

  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocab& a, const Vocab& b) { return a.tokens_ == b.tokens_; }

 private:
  void reindex() {
    index_.clear();
    for (std::size_t i = 0; i < tokens_.size(); ++i) index_.emplace(tokens_[i], static_cast<int>(i));
  }

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
};

}  // namespace nmt
