#include "loma/structuring.hpp"

#include "loma/errors.hpp"

namespace loma {

MaskMat build_chunk_mask(const LomaParams& p) {
  p.validate();
  const int tc = p.read_len();
  const int t = p.mem_len;
  const int s = p.span();
  MaskMat m = MaskMat::Zero(s, s);
  // READ rows: lower triangular over READ columns, diagonal included.
  for (int i = 0; i < tc; ++i) {
    for (int j = 0; j <= i; ++j) m(i, j) = 1;
  }
  // MEM rows: bidirectional over READ + MEM columns.
  for (int i = tc; i < tc + t; ++i) {
    for (int j = 0; j < tc + t; ++j) m(i, j) = 1;
  }
  // REP rows: all MEM columns plus self.
  for (int i = tc + t; i < s; ++i) {
    for (int j = tc; j < tc + t; ++j) m(i, j) = 1;
    m(i, i) = 1;
  }
  return m;
}

MaskMat build_sample_mask(const LomaParams& p, int n_chunks) {
  if (n_chunks < 1) throw GeometryError("build_sample_mask: n_chunks must be >= 1");
  const int tc = p.read_len();
  const int t = p.mem_len;
  const int s = p.span();
  const MaskMat chunk = build_chunk_mask(p);
  MaskMat m = MaskMat::Zero(static_cast<Index>(n_chunks) * s, static_cast<Index>(n_chunks) * s);
  for (int bi = 0; bi < n_chunks; ++bi) {
    m.block(static_cast<Index>(bi) * s, static_cast<Index>(bi) * s, s, s) = chunk;
    // Earlier-chunk blocks: READ rows may attend the MEM columns of every
    // preceding chunk; everything else stays blocked.
    for (int bj = 0; bj < bi; ++bj) {
      for (int i = 0; i < tc; ++i) {
        for (int j = tc; j < tc + t; ++j) {
          m(static_cast<Index>(bi) * s + i, static_cast<Index>(bj) * s + j) = 1;
        }
      }
    }
  }
  return m;
}

std::vector<int> build_position_ids(const LomaParams& p, int n_chunks) {
  if (n_chunks < 1) throw GeometryError("build_position_ids: n_chunks must be >= 1");
  const int tc = p.read_len();
  const int t = p.mem_len;
  const int c = p.compress_ratio;
  std::vector<int> ids;
  ids.reserve(static_cast<std::size_t>(n_chunks) * p.span());
  for (int i = 0; i < n_chunks; ++i) {
    const int start = i * tc;
    for (int j = 0; j < tc; ++j) ids.push_back(start + j);           // READ: original ids
    for (int j = 1; j <= t; ++j) ids.push_back(start + j * c - 1);   // MEM: intermittent
    for (int j = 0; j < tc; ++j) ids.push_back(start + j);           // REP: mirrors READ
  }
  return ids;
}

ZoneMap build_zone_map(const LomaParams& p, int n_chunks) {
  ZoneMap zm;
  const int tc = p.read_len();
  const int t = p.mem_len;
  zm.zones.reserve(static_cast<std::size_t>(n_chunks) * p.span());
  zm.chunk_index.reserve(zm.zones.capacity());
  for (int i = 0; i < n_chunks; ++i) {
    for (int j = 0; j < tc; ++j) { zm.zones.push_back(Zone::Read); zm.chunk_index.push_back(i); }
    for (int j = 0; j < t; ++j) { zm.zones.push_back(Zone::Mem); zm.chunk_index.push_back(i); }
    for (int j = 0; j < tc; ++j) { zm.zones.push_back(Zone::Rep); zm.chunk_index.push_back(i); }
  }
  return zm;
}

StructuredSample build_sample(const std::vector<int>& doc, const LomaParams& p, long sample_len) {
  if (doc.empty()) throw GeometryError("build_sample: empty document");
  const PlanResult plan = plan_lengths(static_cast<long>(doc.size()), p, sample_len);
  const int tc = p.read_len();
  const int t = p.mem_len;
  const int s = p.span();
  const int n = static_cast<int>(plan.n_chunks_doc);
  const long structured = static_cast<long>(n) * s;

  StructuredSample out;
  out.params = p;
  out.n_chunks = n;
  out.tokens.assign(static_cast<std::size_t>(sample_len), Vocab::kPad);
  out.labels.assign(static_cast<std::size_t>(sample_len), -1);
  out.position_ids.assign(static_cast<std::size_t>(sample_len), 0);
  out.zones = build_zone_map(p, n);
  out.zones.zones.resize(static_cast<std::size_t>(sample_len), Zone::Pad);
  out.zones.chunk_index.resize(static_cast<std::size_t>(sample_len), -1);

  const Vocab vocab;
  const std::vector<int> structured_pos = build_position_ids(p, n);
  std::copy(structured_pos.begin(), structured_pos.end(), out.position_ids.begin());

  auto doc_at = [&](long g) -> int {
    return g < static_cast<long>(doc.size()) ? doc[static_cast<std::size_t>(g)] : -1;
  };

  for (int i = 0; i < n; ++i) {
    const long base = static_cast<long>(i) * s;
    for (int j = 0; j < tc; ++j) {
      const long g = static_cast<long>(i) * tc + j;  // original document index
      const int tok = doc_at(g);
      const std::size_t pos = static_cast<std::size_t>(base + j);
      if (tok >= 0) {
        out.tokens[pos] = tok;
        const int next = doc_at(g + 1);
        if (next >= 0) out.labels[pos] = next;  // document continuation
      } else {
        // Document ran out mid-chunk: the remainder of this reading zone is
        // padding and never labeled.
        out.zones.zones[pos] = Zone::Pad;
      }
    }
    for (int j = 0; j < t; ++j) {
      out.tokens[static_cast<std::size_t>(base + tc + j)] = vocab.mem_id();
    }
    for (int j = 0; j < tc; ++j) {
      const std::size_t pos = static_cast<std::size_t>(base + tc + t + j);
      out.tokens[pos] = vocab.rep_id();
      const int mirrored = doc_at(static_cast<long>(i) * tc + j);
      if (mirrored >= 0) out.labels[pos] = mirrored;  // repeat the reading zone
    }
  }

  // Trailing padding keeps monotone position ids past the structured region.
  for (long k = structured; k < sample_len; ++k) {
    out.position_ids[static_cast<std::size_t>(k)] = static_cast<int>(n) * tc + static_cast<int>(k - structured);
  }

  out.mask = MaskMat::Zero(sample_len, sample_len);
  if (n > 0) {
    out.mask.topLeftCorner(structured, structured) = build_sample_mask(p, n);
  }
  for (long k = structured; k < sample_len; ++k) out.mask(k, k) = 1;  // PAD rows: self only

  return out;
}

}  // namespace loma
