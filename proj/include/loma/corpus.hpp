#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loma/params.hpp"
#include "loma/rng.hpp"
#include "loma/vocab.hpp"

namespace loma {

// Tokenized documents; every document begins with BOS.
struct Corpus {
  std::vector<std::vector<int>> documents;

  std::size_t size() const { return documents.size(); }
  bool empty() const { return documents.empty(); }
};

// Manifest file: one path per line (blank lines and #-comments skipped).
// Each listed file is either one document, or one document per line.
Corpus load_corpus(const std::string& manifest_path, const Vocab& vocab,
                   bool newline_delimited = false);

// Uniform random byte documents sized to fill `chunks_per_doc` reading zones
// exactly (BOS counts as the first token).
Corpus make_random_corpus(std::size_t n_docs, int chunks_per_doc, const LomaParams& p,
                          std::uint64_t seed);

}  // namespace loma
