#include "loma/vocab.hpp"

namespace loma {

std::vector<int> Vocab::tokenize(const std::string& text) const {
  std::vector<int> ids;
  ids.reserve(text.size() + 1);
  ids.push_back(kBos);
  for (unsigned char b : text) ids.push_back(static_cast<int>(b));
  return ids;
}

std::string Vocab::detokenize(const std::vector<int>& ids) const {
  std::string out;
  out.reserve(ids.size());
  for (int id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(static_cast<unsigned char>(id)));
  }
  return out;
}

std::string Vocab::token_name(int id) const {
  if (id >= 0 && id < 256) {
    if (id >= 32 && id < 127) return std::string(1, static_cast<char>(id));
    return "<0x" + std::string{"0123456789abcdef"[id / 16]} + std::string{"0123456789abcdef"[id % 16]} + ">";
  }
  switch (id) {
    case kBos: return "<s>";
    case kEos: return "</s>";
    case kPad: return "<pad>";
  }
  if (id == mem_id()) return "<m>";
  if (id == rep_id()) return "<r>";
  return "<unk" + std::to_string(id) + ">";
}

}  // namespace loma
