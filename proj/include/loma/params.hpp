#pragma once

#include <cstdint>
#include <string>

namespace loma {

// Chunk geometry: a reading zone of mem_len*compress_ratio tokens, a memory
// zone of mem_len tokens, and a repetition zone mirroring the reading zone.
struct LomaParams {
  int compress_ratio = 2;  // c
  int mem_len = 4;         // t

  int read_len() const { return mem_len * compress_ratio; }       // tc
  int span() const { return mem_len * (2 * compress_ratio + 1); } // s = 2tc + t

  void validate() const;
};

enum class Zone : std::uint8_t { Read, Mem, Rep, Pad };

const char* zone_name(Zone z);

struct PlanResult {
  long n_chunks_capacity = 0;  // how many chunk spans fit in the training length
  long n_chunks_doc = 0;       // chunks the document actually fills (last may be partial)
  long padding = 0;            // trailing PAD tokens after the final structured chunk
};

// Checks the training-length constraints and returns the chunk/padding plan
// for a raw document of `doc_len` tokens structured into `sample_len` slots.
PlanResult plan_lengths(long doc_len, const LomaParams& p, long sample_len);

}  // namespace loma
