#pragma once

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "loma/corpus.hpp"
#include "loma/generator.hpp"
#include "loma/model.hpp"

namespace loma {

// ---------------------------------------------------------------------------
// Repetition accuracy
// ---------------------------------------------------------------------------

struct DecodeRecord {
  int target = 0;
  int predicted = 0;
};

struct AccuracyReport {
  long n_chunks = 0;
  long n_tokens = 0;
  long chunks_correct = 0;
  long tokens_correct = 0;
  std::vector<std::vector<DecodeRecord>> decode_log;  // one entry per chunk

  double zone_accuracy() const { return n_chunks ? static_cast<double>(chunks_correct) / n_chunks : 0.0; }
  double token_accuracy() const { return n_tokens ? static_cast<double>(tokens_correct) / n_tokens : 0.0; }

  // Metrics are pure folds of the decode log; recomputation is exact.
  static AccuracyReport from_log(std::vector<std::vector<DecodeRecord>> log) {
    AccuracyReport r;
    r.decode_log = std::move(log);
    for (const auto& chunk : r.decode_log) {
      ++r.n_chunks;
      bool all = true;
      for (const auto& rec : chunk) {
        ++r.n_tokens;
        if (rec.predicted == rec.target) {
          ++r.tokens_correct;
        } else {
          all = false;
        }
      }
      if (all) ++r.chunks_correct;
    }
    return r;
  }
};

// Decoder seam: maps one reading-zone chunk to the predicted repetition.
using ChunkDecoder = std::function<std::vector<int>(const std::vector<int>&)>;

inline AccuracyReport eval_repetition_with(const ChunkDecoder& decode, const Corpus& corpus,
                                           const LomaParams& p) {
  p.validate();
  const int tc = p.read_len();
  std::vector<std::vector<DecodeRecord>> log;
  for (const auto& doc : corpus.documents) {
    const long full_chunks = static_cast<long>(doc.size()) / tc;
    for (long ch = 0; ch < full_chunks; ++ch) {
      const std::vector<int> read(doc.begin() + ch * tc, doc.begin() + (ch + 1) * tc);
      const std::vector<int> predicted = decode(read);
      if (predicted.size() != read.size()) {
        throw ShapeError("eval_repetition: decoder returned " + std::to_string(predicted.size()) +
                         " tokens for a chunk of " + std::to_string(read.size()));
      }
      std::vector<DecodeRecord> records(read.size());
      for (std::size_t i = 0; i < read.size(); ++i) records[i] = {read[i], predicted[i]};
      log.push_back(std::move(records));
    }
  }
  if (log.empty()) throw GeometryError("eval_repetition: corpus holds no full reading chunk");
  return AccuracyReport::from_log(std::move(log));
}

// Generator-path repetition decode: compress the reading zone into mem_len
// cache entries, then greedily decode every repetition slot against the
// compressed cache plus itself.
template <class S>
std::vector<int> decode_chunk(const Model<S>& model, const LomaParams& p,
                              const std::vector<int>& read_tokens,
                              PositionScheme scheme = PositionScheme::Intermittent) {
  const int tc = p.read_len();
  const int t = p.mem_len;
  const int mem_id = model.cfg.vocab_size - 2;
  const int rep_id = model.cfg.vocab_size - 1;

  auto state = GeneratorState<S>::make(model, p, mem_id, /*max_len=*/1, scheme);
  add_token_ids(state, read_tokens);  // fills the reading zone and compresses it

  std::vector<int> rep_tokens(static_cast<std::size_t>(tc), rep_id);
  std::vector<int> positions(static_cast<std::size_t>(tc));
  for (int j = 0; j < tc; ++j) positions[static_cast<std::size_t>(j)] = j;  // mirror READ ids
  MaskMat mask = MaskMat::Zero(tc, t + tc);
  for (int r = 0; r < tc; ++r) {
    for (int j = 0; j < t; ++j) mask(r, j) = 1;
    mask(r, t + r) = 1;  // self
  }
  KvCache<S> scratch = state.cache;
  const Mat<S> logits = forward(model, rep_tokens, positions, mask, &scratch);
  std::vector<int> out(static_cast<std::size_t>(tc));
  for (int r = 0; r < tc; ++r) {
    Index best = 0;
    logits.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

template <class S>
AccuracyReport eval_repetition(const Model<S>& model, const Corpus& corpus, const LomaParams& p,
                               PositionScheme scheme = PositionScheme::Intermittent) {
  return eval_repetition_with(
      [&](const std::vector<int>& read) { return decode_chunk(model, p, read, scheme); }, corpus, p);
}

// ---------------------------------------------------------------------------
// Cost model
// ---------------------------------------------------------------------------

// T(l, k): cost of one inference over l tokens with a cache of k entries.
struct CostModel {
  std::function<double(long l, long k)> t_infer;

  double operator()(long l, long k) const { return t_infer(l, k); }

  // a*l*(k+l) + b*l + d
  static CostModel affine(double a, double b, double d) {
    return {[=](long l, long k) {
      return a * static_cast<double>(l) * static_cast<double>(k + l) + b * static_cast<double>(l) + d;
    }};
  }

  static CostModel constant(double v) {
    return {[=](long, long) { return v; }};
  }

  // T(l, k) = l * k; the pure cache-linear probe (T(1, k) = k).
  static CostModel cache_linear() {
    return {[](long l, long k) { return static_cast<double>(l) * static_cast<double>(k); }};
  }

  // Empirical table; linear interpolation in k (clamped), exact match on l.
  static CostModel from_table(std::map<long, std::map<long, double>> table) {
    return {[table = std::move(table)](long l, long k) {
      auto row = table.find(l);
      if (row == table.end() || row->second.empty()) {
        throw ConfigError("cost table has no entries for l=" + std::to_string(l));
      }
      const auto& by_k = row->second;
      auto hi = by_k.lower_bound(k);
      if (hi == by_k.end()) return std::prev(hi)->second;
      if (hi->first == k || hi == by_k.begin()) return hi->second;
      auto lo = std::prev(hi);
      const double f = static_cast<double>(k - lo->first) / static_cast<double>(hi->first - lo->first);
      return lo->second + f * (hi->second - lo->second);
    }};
  }
};

struct CostComparison {
  double vanilla_cost = 0.0;
  double loma_read_cost = 0.0;
  double loma_compress_cost = 0.0;
  long vanilla_peak_cache = 0;
  long loma_peak_cache = 0;
  double memory_factor = 0.0;  // steady-state cache shrink factor (c)

  double loma_cost() const { return loma_read_cost + loma_compress_cost; }
};

// Generation of m reading chunks: vanilla pays T(1,k) for k = 0 .. m*tc-1;
// the compressed schedule restarts each chunk's cache at y*t and adds one
// T(tc, t) compression pass per chunk.
inline CostComparison predict_costs(const CostModel& cm, const LomaParams& p, long m) {
  p.validate();
  if (m < 1) throw GeometryError("predict_costs: chunk count must be >= 1");
  const long tc = p.read_len();
  const long t = p.mem_len;
  CostComparison out;
  for (long k = 0; k < m * tc; ++k) out.vanilla_cost += cm(1, k);
  for (long y = 0; y < m; ++y) {
    for (long k = y * t; k < y * t + tc; ++k) out.loma_read_cost += cm(1, k);
  }
  out.loma_compress_cost = static_cast<double>(m) * cm(tc, t);
  out.vanilla_peak_cache = m * tc;
  out.loma_peak_cache = (m - 1) * t + tc;
  out.memory_factor = static_cast<double>(p.compress_ratio);
  return out;
}

// Smallest chunk count in [1, max_m] where the compressed schedule is
// strictly cheaper end to end; 0 when it never crosses.
inline long crossover_chunks(const CostModel& cm, const LomaParams& p, long max_m) {
  for (long m = 1; m <= max_m; ++m) {
    const CostComparison c = predict_costs(cm, p, m);
    if (c.loma_cost() < c.vanilla_cost) return m;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// Empirical latency
// ---------------------------------------------------------------------------

struct LatencyPoint {
  long l = 0;
  long k = 0;
  double median_ms = 0.0;
};

// Wall-clock medians for one forward pass over an (l, k) grid. Weights do not
// matter for timing; the cache is filled with random entries.
template <class S>
std::vector<LatencyPoint> measure_latency(const Model<S>& model, const std::vector<long>& input_lengths,
                                          const std::vector<long>& cache_lengths, int repeats = 9,
                                          std::uint64_t seed = 0) {
  using Clock = std::chrono::steady_clock;
  NormalRng rng(seed);
  std::vector<LatencyPoint> out;
  for (long l : input_lengths) {
    for (long k : cache_lengths) {
      if (k + l > model.cfg.max_position) {
        throw GeometryError("measure_latency: grid point k+l=" + std::to_string(k + l) +
                            " exceeds max_position");
      }
      std::vector<int> tokens(static_cast<std::size_t>(l));
      std::vector<int> positions(static_cast<std::size_t>(l));
      for (long i = 0; i < l; ++i) {
        tokens[static_cast<std::size_t>(i)] = static_cast<int>(rng.below(static_cast<std::uint64_t>(model.cfg.vocab_size)));
        positions[static_cast<std::size_t>(i)] = static_cast<int>(k + i);
      }
      MaskMat mask = MaskMat::Zero(l, k + l);
      for (long i = 0; i < l; ++i) {
        for (long j = 0; j <= k + i; ++j) mask(i, j) = 1;
      }
      const KvCache<S> base = random_cache<S>(model.cfg, k, rng);
      std::vector<double> times;
      times.reserve(static_cast<std::size_t>(repeats));
      for (int r = 0; r < repeats + 1; ++r) {
        KvCache<S> cache = base;
        const auto t0 = Clock::now();
        volatile S sink = forward(model, tokens, positions, mask, &cache)(0, 0);
        (void)sink;
        const auto t1 = Clock::now();
        if (r > 0) times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
      }
      std::sort(times.begin(), times.end());
      out.push_back({l, k, times[times.size() / 2]});
    }
  }
  return out;
}

// Least-squares slope of median_ms against k for the given input length.
inline double latency_slope_in_k(const std::vector<LatencyPoint>& points, long l) {
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  long n = 0;
  for (const auto& pt : points) {
    if (pt.l != l) continue;
    const double x = static_cast<double>(pt.k);
    sx += x;
    sy += pt.median_ms;
    sxx += x * x;
    sxy += x * pt.median_ms;
    ++n;
  }
  if (n < 2) throw GeometryError("latency_slope_in_k: need at least two grid points for l=" + std::to_string(l));
  const double denom = static_cast<double>(n) * sxx - sx * sx;
  return (static_cast<double>(n) * sxy - sx * sy) / denom;
}

// ---------------------------------------------------------------------------
// CSV emitters
// ---------------------------------------------------------------------------

inline std::string latency_csv(const std::vector<LatencyPoint>& points) {
  std::string out = "l,k,median_ms\n";
  char buf[96];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%ld,%ld,%.6f\n", p.l, p.k, p.median_ms);
    out += buf;
  }
  return out;
}

inline std::string accuracy_csv(const AccuracyReport& r) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "n_chunks,n_tokens,zone_accuracy,token_accuracy\n%ld,%ld,%.17g,%.17g\n",
                r.n_chunks, r.n_tokens, r.zone_accuracy(), r.token_accuracy());
  return buf;
}

inline std::string cost_csv(const std::vector<std::pair<long, CostComparison>>& rows) {
  std::string out = "m,vanilla_cost,loma_cost,loma_read_cost,loma_compress_cost,vanilla_peak_cache,loma_peak_cache\n";
  char buf[256];
  for (const auto& [m, c] : rows) {
    std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g,%ld,%ld\n", m, c.vanilla_cost,
                  c.loma_cost(), c.loma_read_cost, c.loma_compress_cost, c.vanilla_peak_cache,
                  c.loma_peak_cache);
    out += buf;
  }
  return out;
}

}  // namespace loma
