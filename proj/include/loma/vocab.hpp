#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace loma {

// Byte-level vocabulary: 256 byte ids, then BOS/EOS/PAD, then the two
// compression specials <m> and <r> appended after all ordinary tokens.
class Vocab {
 public:
  static constexpr int kBos = 256;
  static constexpr int kEos = 257;
  static constexpr int kPad = 258;

  int base_size() const { return 259; }
  int mem_id() const { return base_size(); }      // <m>
  int rep_id() const { return base_size() + 1; }  // <r>
  int total_size() const { return base_size() + 2; }

  // BOS followed by one id per byte.
  std::vector<int> tokenize(const std::string& text) const;

  // Inverse over the byte range; BOS/EOS/PAD and specials are dropped.
  std::string detokenize(const std::vector<int>& ids) const;

  std::string token_name(int id) const;
};

}  // namespace loma
