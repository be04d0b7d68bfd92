#include "loma/corpus.hpp"

#include <fstream>
#include <sstream>

#include "loma/errors.hpp"

namespace loma {

namespace {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

Corpus load_corpus(const std::string& manifest_path, const Vocab& vocab, bool newline_delimited) {
  std::ifstream manifest(manifest_path);
  if (!manifest) throw IoError("cannot open manifest " + manifest_path);

  Corpus corpus;
  std::string line;
  while (std::getline(manifest, line)) {
    if (line.empty() || line[0] == '#') continue;
    const std::string content = read_file(line);
    if (newline_delimited) {
      std::istringstream ss(content);
      std::string doc;
      while (std::getline(ss, doc)) {
        if (!doc.empty()) corpus.documents.push_back(vocab.tokenize(doc));
      }
    } else {
      corpus.documents.push_back(vocab.tokenize(content));
    }
  }
  if (corpus.empty()) throw IoError("manifest " + manifest_path + " yielded no documents");
  return corpus;
}

Corpus make_random_corpus(std::size_t n_docs, int chunks_per_doc, const LomaParams& p,
                          std::uint64_t seed) {
  p.validate();
  if (chunks_per_doc < 1) throw GeometryError("make_random_corpus: chunks_per_doc must be >= 1");
  NormalRng rng(seed);
  Corpus corpus;
  corpus.documents.reserve(n_docs);
  const int doc_len = chunks_per_doc * p.read_len();
  for (std::size_t d = 0; d < n_docs; ++d) {
    std::vector<int> doc;
    doc.reserve(static_cast<std::size_t>(doc_len));
    doc.push_back(Vocab::kBos);
    for (int i = 1; i < doc_len; ++i) {
      doc.push_back(static_cast<int>(rng.below(256)));
    }
    corpus.documents.push_back(std::move(doc));
  }
  return corpus;
}

}  // namespace loma
