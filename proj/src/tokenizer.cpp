#include "cutkit/tokenizer.hpp"

#include <numeric>

#include "cutkit/error.hpp"

namespace cutkit::nn {

Tokenizer::Tokenizer(std::vector<uint8_t> alphabet) : alphabet_(std::move(alphabet)) {
  byte_to_id_.fill(-1);
  for (size_t i = 0; i < alphabet_.size(); ++i) {
    byte_to_id_[alphabet_[i]] = static_cast<int>(i);
  }
}

Tokenizer Tokenizer::byte_level() {
  std::vector<uint8_t> all(256);
  std::iota(all.begin(), all.end(), 0);
  return Tokenizer(std::move(all));
}

Tokenizer Tokenizer::for_alphabet(std::string_view chars) {
  std::vector<uint8_t> alphabet;
  bool seen[256] = {};
  for (char c : chars) {
    auto b = static_cast<uint8_t>(c);
    if (!seen[b]) {
      seen[b] = true;
      alphabet.push_back(b);
    }
  }
  if (alphabet.empty()) throw DataError("tokenizer alphabet is empty");
  return Tokenizer(std::move(alphabet));
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (size_t i = 0; i < text.size(); ++i) {
    int id = byte_to_id_[static_cast<uint8_t>(text[i])];
    if (id < 0) {
      throw DataError("character 0x" +
                      std::to_string(static_cast<int>(static_cast<uint8_t>(text[i]))) +
                      " at byte " + std::to_string(i) + " is outside the model alphabet");
    }
    ids.push_back(id);
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id == bos_id() || id == eos_id()) continue;
    if (id < 0 || id >= static_cast<int>(alphabet_.size())) {
      throw DataError("token id " + std::to_string(id) + " is outside the vocabulary");
    }
    out.push_back(static_cast<char>(alphabet_[id]));
  }
  return out;
}

}  // namespace cutkit::nn
