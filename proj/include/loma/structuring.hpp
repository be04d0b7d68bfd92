#pragma once

#include <vector>

#include "loma/params.hpp"
#include "loma/tensor.hpp"
#include "loma/vocab.hpp"

namespace loma {

// Per-position zone tag and chunk index (-1 on trailing padding).
struct ZoneMap {
  std::vector<Zone> zones;
  std::vector<int> chunk_index;

  std::size_t size() const { return zones.size(); }
};

// One training sample: tokens, optional labels (-1 = no label), position ids,
// the sample-wide attention mask and the zone map.
struct StructuredSample {
  std::vector<int> tokens;
  std::vector<int> labels;
  std::vector<int> position_ids;
  MaskMat mask;
  ZoneMap zones;
  LomaParams params;
  int n_chunks = 0;

  std::size_t size() const { return tokens.size(); }
};

// Single-chunk block mask: causal over READ, bidirectional MEM attending
// READ+MEM, REP attending MEM plus itself.
MaskMat build_chunk_mask(const LomaParams& p);

// n_chunks x n_chunks block mask: chunk masks on the diagonal, earlier-chunk
// blocks letting READ rows see earlier MEM columns, zero above the diagonal.
MaskMat build_sample_mask(const LomaParams& p, int n_chunks);

// Position ids for the structured layout: READ keeps the original document
// ids, MEM ids interleave the reading span at stride c ending flush with it,
// REP mirrors the READ ids of its chunk.
std::vector<int> build_position_ids(const LomaParams& p, int n_chunks);

// Zone layout for n_chunks full chunks (no padding).
ZoneMap build_zone_map(const LomaParams& p, int n_chunks);

// Structures a tokenized document into READ|MEM|REP chunks padded to
// sample_len, with labels, mask and position ids attached.
StructuredSample build_sample(const std::vector<int>& doc, const LomaParams& p, long sample_len);

}  // namespace loma
