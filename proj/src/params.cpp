#include "loma/params.hpp"

#include "loma/errors.hpp"

namespace loma {

void LomaParams::validate() const {
  if (mem_len < 1) throw GeometryError("loma params: mem_len must be >= 1, got " + std::to_string(mem_len));
  if (compress_ratio < 1) {
    throw GeometryError("loma params: compress_ratio must be >= 1, got " + std::to_string(compress_ratio));
  }
}

const char* zone_name(Zone z) {
  switch (z) {
    case Zone::Read: return "read";
    case Zone::Mem: return "mem";
    case Zone::Rep: return "rep";
    case Zone::Pad: return "pad";
  }
  return "?";
}

PlanResult plan_lengths(long doc_len, const LomaParams& p, long sample_len) {
  p.validate();
  const long span = p.span();
  const long read_len = p.read_len();
  if (doc_len < 0) throw GeometryError("plan_lengths: negative document length");
  if (sample_len < span) {
    throw GeometryError("plan_lengths: violated sample_len >= t(2c+1): " + std::to_string(sample_len) +
                        " < " + std::to_string(span));
  }
  if (sample_len % span != 0) {
    throw GeometryError("plan_lengths: violated sample_len mod (2tc + t) = 0: " +
                        std::to_string(sample_len) + " mod " + std::to_string(span) + " = " +
                        std::to_string(sample_len % span));
  }
  if (2 * doc_len + doc_len / p.compress_ratio > sample_len) {
    throw GeometryError("plan_lengths: violated 2s + floor(s/c) <= sample_len: 2*" +
                        std::to_string(doc_len) + " + " + std::to_string(doc_len / p.compress_ratio) +
                        " > " + std::to_string(sample_len));
  }

  PlanResult r;
  r.n_chunks_capacity = sample_len / span;
  r.n_chunks_doc = doc_len == 0 ? 0 : (doc_len + read_len - 1) / read_len;
  if (r.n_chunks_doc * span > sample_len) {
    // Can only happen when the document is not a multiple of the reading
    // length; the "2s + floor(s/c)" bound admits the extra partial chunk but
    // the structured layout does not.
    throw GeometryError("plan_lengths: violated n_chunks * (2tc + t) <= sample_len: " +
                        std::to_string(r.n_chunks_doc * span) + " > " + std::to_string(sample_len));
  }
  r.padding = sample_len - r.n_chunks_doc * span;
  return r;
}

}  // namespace loma
