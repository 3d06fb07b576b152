#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace cutkit::nn {

// Character tokenizer. The default alphabet is all 256 byte values, so any
// text round-trips; restricted alphabets exist for test-scale models whose
// embedding tables must stay tiny. BOS and EOS ids sit after the characters.
class Tokenizer {
 public:
  static Tokenizer byte_level();
  // Distinct characters of `chars`, in first-appearance order.
  static Tokenizer for_alphabet(std::string_view chars);

  // Throws DataError on a character outside the alphabet. Never emits BOS/EOS.
  std::vector<int> encode(std::string_view text) const;
  // Inverse of encode; BOS/EOS ids are dropped. Throws DataError on other
  // out-of-range ids.
  std::string decode(std::span<const int> ids) const;

  int vocab_size() const { return static_cast<int>(alphabet_.size()) + 2; }
  int bos_id() const { return static_cast<int>(alphabet_.size()); }
  int eos_id() const { return static_cast<int>(alphabet_.size()) + 1; }

  const std::vector<uint8_t>& alphabet() const { return alphabet_; }

 private:
  explicit Tokenizer(std::vector<uint8_t> alphabet);

  std::vector<uint8_t> alphabet_;
  std::array<int, 256> byte_to_id_{};
};

}  // namespace cutkit::nn
