#pragma once

// Word-level vocabulary for the synthetic task. Ids are laid out in fixed
// contiguous blocks so that class membership of any id is a range check.

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "cdt/errors.hpp"

namespace cdt::task {

enum class WordKind { special, actor, move, pickup, drop, location, object, noise, low_frequency };

class Vocabulary {
 public:
  static constexpr std::size_t kSize = 512;
  static constexpr std::size_t kLowFrequency = 40;

  static const Vocabulary& instance() {
    static const Vocabulary v;
    return v;
  }

  std::size_t size() const { return words_.size(); }

  const std::string& word(int id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= words_.size())
      throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
    return words_[static_cast<std::size_t>(id)];
  }

  int id(std::string_view w) const {
    auto it = index_.find(std::string(w));
    if (it == index_.end()) throw IndexError("unknown word '" + std::string(w) + "'");
    return it->second;
  }

  std::vector<int> encode(std::span<const std::string> words) const {
    std::vector<int> ids;
    ids.reserve(words.size());
    for (const auto& w : words) ids.push_back(id(w));
    return ids;
  }

  std::vector<std::string> decode(std::span<const int> ids) const {
    std::vector<std::string> out;
    out.reserve(ids.size());
    for (int i : ids) out.push_back(word(i));
    return out;
  }

  std::string render(std::span<const int> ids) const {
    std::string s;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (i) s += ' ';
      s += word(ids[i]);
    }
    return s;
  }

  WordKind kind(int id) const {
    for (const auto& b : blocks_)
      if (id >= b.begin && id < b.end) return b.kind;
    throw IndexError("token id " + std::to_string(id) + " outside vocabulary");
  }

  std::span<const int> ids_of(WordKind k) const {
    for (const auto& b : blocks_)
      if (b.kind == k) return {block_ids_.data() + b.begin, static_cast<std::size_t>(b.end - b.begin)};
    return {};
  }

 private:
  struct Block {
    WordKind kind;
    int begin;
    int end;
  };

  Vocabulary() {
    add(WordKind::special, {"<pad>", "<bos>", "<eos>", ".", "?", "the", "to", "where", "was", "is",
                            "before", "prior", "place"});
    add(WordKind::actor, {"mary", "daniel", "mike", "john", "sandra", "fred", "bill", "julie", "emma",
                          "jeff", "lily", "max", "anna", "oscar", "nina", "paul"});
    add(WordKind::move, {"went", "journeyed", "travelled", "moved"});
    add(WordKind::pickup, {"got", "took", "grabbed", "fetched"});
    add(WordKind::drop, {"dropped", "discarded", "left", "released"});
    add(WordKind::location, {"office", "bedroom", "bathroom", "kitchen", "garden", "hallway", "cellar",
                             "attic", "garage", "balcony"});
    add(WordKind::object, {"apple", "football", "milk", "book", "key", "cup", "hat", "ball", "pen", "box",
                           "lamp", "coin", "vase", "sock", "plate", "rope"});
    const std::size_t fixed = words_.size();
    const std::size_t n_noise = kSize - fixed - kLowFrequency;
    // Filler words are consonant-vowel syllable pairs, disjoint from every
    // entity word above by construction (all entity words are longer or
    // contain consonant clusters).
    static constexpr std::array<char, 12> cons{'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 'v'};
    static constexpr std::array<char, 5> vow{'a', 'e', 'i', 'o', 'u'};
    std::vector<std::string> noise;
    for (std::size_t i = 0; noise.size() < n_noise; ++i) {
      const std::size_t a = i % 60, b = (i / 60) % 60;
      std::string w{cons[a % 12], vow[a / 12], cons[b % 12], vow[b / 12]};
      if (i >= 3600) w += std::to_string(i);
      noise.push_back(w);
    }
    add(WordKind::noise, noise);
    std::vector<std::string> low;
    for (std::size_t i = 0; i < kLowFrequency; ++i) low.push_back("<lf" + std::to_string(i) + ">");
    add(WordKind::low_frequency, low);
    for (std::size_t i = 0; i < words_.size(); ++i) block_ids_.push_back(static_cast<int>(i));
  }

  void add(WordKind kind, const std::vector<std::string>& words) {
    const int begin = static_cast<int>(words_.size());
    for (const auto& w : words) {
      if (index_.count(w)) throw GenerationError("duplicate vocabulary word '" + w + "'");
      index_.emplace(w, static_cast<int>(words_.size()));
      words_.push_back(w);
    }
    blocks_.push_back({kind, begin, static_cast<int>(words_.size())});
  }

  std::vector<std::string> words_;
  std::unordered_map<std::string, int> index_;
  std::vector<Block> blocks_;
  std::vector<int> block_ids_;
};

}  // namespace cdt::task
