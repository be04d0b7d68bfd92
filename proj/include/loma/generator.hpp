#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "loma/model.hpp"
#include "loma/params.hpp"

namespace loma {

enum class PositionScheme { Intermittent, Sequential };

inline PositionScheme position_scheme_from_string(const std::string& s) {
  if (s == "intermittent") return PositionScheme::Intermittent;
  if (s == "sequential") return PositionScheme::Sequential;
  throw ConfigError("position-type must be 'intermittent' or 'sequential', got '" + s + "'");
}

struct CompressionEvent {
  long tokens_emitted = 0;  // trace position when the event fired
  long pre_len = 0;
  long post_len = 0;
};

struct GenerationTrace {
  std::vector<int> tokens;          // emitted (predicted) token ids
  std::vector<long> cache_lengths;  // cache length after each emitted token
  std::vector<CompressionEvent> events;
  long peak_cache = 0;

  std::string to_json() const {
    auto join_ints = [](const auto& v) {
      std::string s = "[";
      for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) s.push_back(',');
        s += std::to_string(v[i]);
      }
      s.push_back(']');
      return s;
    };
    std::string s = "{\n  \"tokens\": " + join_ints(tokens) + ",\n  \"cache_lengths\": " +
                    join_ints(cache_lengths) + ",\n  \"peak_cache\": " + std::to_string(peak_cache) +
                    ",\n  \"compression_events\": [";
    for (std::size_t i = 0; i < events.size(); ++i) {
      if (i) s.push_back(',');
      s += "\n    {\"tokens_emitted\": " + std::to_string(events[i].tokens_emitted) +
           ", \"pre_len\": " + std::to_string(events[i].pre_len) +
           ", \"post_len\": " + std::to_string(events[i].post_len) + "}";
    }
    if (!events.empty()) s += "\n  ";
    s += "]\n}\n";
    return s;
  }
};

// Streaming LoMA decoder: buffers inputs, runs ordinary causal inference over
// the uncompressed tail, and folds every full reading zone into mem_len cache
// entries with one extra inference pass.
template <class S>
struct GeneratorState {
  const Model<S>* model = nullptr;
  LomaParams params;
  PositionScheme scheme = PositionScheme::Intermittent;
  bool compression_enabled = true;
  long max_len = 256;        // cap on emitted tokens per generate() call
  int mem_token_id = 0;

  long cursor = 0;           // original-sequence positions consumed
  long compressed_chunks = 0;
  std::vector<int> input_buffer;
  KvCache<S> cache;
  GenerationTrace* trace = nullptr;

  static GeneratorState make(const Model<S>& model, const LomaParams& p, int mem_token_id,
                             long max_len, PositionScheme scheme = PositionScheme::Intermittent) {
    p.validate();
    GeneratorState s;
    s.model = &model;
    s.params = p;
    s.scheme = scheme;
    s.max_len = max_len;
    s.mem_token_id = mem_token_id;
    s.cache = KvCache<S>::empty(model.cfg);
    return s;
  }

  void reset() {
    cursor = 0;
    compressed_chunks = 0;
    input_buffer.clear();
    cache = KvCache<S>::empty(model->cfg);
  }

  long uncompressed_tail() const { return cache.total_len() - compressed_chunks * params.mem_len; }

  void note_cache_peak() {
    if (trace) trace->peak_cache = std::max(trace->peak_cache, static_cast<long>(cache.total_len()));
  }
};

// One causal inference over `token_ids`: position ids continue from the
// cursor, every cached entry is visible, and the new tail is lower
// triangular. Returns the greedy next-token prediction; the cursor advances
// by the number of tokens (compression never moves it).
template <class S>
int step_infer(GeneratorState<S>& state, const std::vector<int>& token_ids) {
  if (token_ids.empty()) throw ShapeError("step_infer: empty token batch");
  const Index n = static_cast<Index>(token_ids.size());
  const Index cache_len = state.cache.total_len();
  std::vector<int> positions(token_ids.size());
  for (std::size_t i = 0; i < token_ids.size(); ++i) {
    positions[i] = static_cast<int>(state.cursor + static_cast<long>(i));
  }
  MaskMat mask = MaskMat::Zero(n, cache_len + n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j <= cache_len + i; ++j) mask(i, j) = 1;
  }
  const Mat<S> logits = forward(*state.model, token_ids, positions, mask, &state.cache);
  state.cursor += static_cast<long>(token_ids.size());
  state.note_cache_peak();
  Index best = 0;
  logits.row(logits.rows() - 1).maxCoeff(&best);
  return static_cast<int>(best);
}

// Folds the trailing reading zone (exactly read_len uncompressed entries)
// into mem_len memory entries: one bidirectional pass of <m> tokens over the
// reading tail, then the tail is replaced by the fresh memory entries.
template <class S>
void compress_last_chunk(GeneratorState<S>& state) {
  const LomaParams& p = state.params;
  const long read_len = p.read_len();
  const long t = p.mem_len;
  const long mem_cursor = state.compressed_chunks * t;
  const long cache_len = state.cache.total_len();
  if (mem_cursor != cache_len - read_len) {
    throw GeometryError("compress_last_chunk: uncompressed tail is " +
                        std::to_string(cache_len - mem_cursor) + ", expected exactly " +
                        std::to_string(read_len));
  }

  std::vector<int> mem_tokens(static_cast<std::size_t>(t), state.mem_token_id);
  std::vector<int> positions(static_cast<std::size_t>(t));
  if (state.scheme == PositionScheme::Intermittent) {
    // cursor - read_len + c - 1, stepping by c, ending at cursor - 1.
    for (long j = 0; j < t; ++j) {
      positions[static_cast<std::size_t>(j)] =
          static_cast<int>(state.cursor - read_len + (j + 1) * p.compress_ratio - 1);
    }
  } else {
    for (long j = 0; j < t; ++j) {
      positions[static_cast<std::size_t>(j)] = static_cast<int>(mem_cursor + j);
    }
  }

  KvCache<S> read_tail = state.cache.tail(read_len);
  const MaskMat mem_mask = MaskMat::Ones(t, t + read_len);  // fully bidirectional
  forward(*state.model, mem_tokens, positions, mem_mask, &read_tail);

  const long pre_len = cache_len;
  state.cache.truncate(mem_cursor);
  state.cache.extend(read_tail.tail(t));
  state.compressed_chunks += 1;
  state.cache.compressed_len = state.compressed_chunks * t;
  if (state.trace) {
    state.trace->events.push_back(
        {static_cast<long>(state.trace->tokens.size()), pre_len, state.cache.total_len()});
  }
}

// Buffer tokens, then alternate full-reading-zone inference passes with
// compression until less than a reading zone remains; infer the remainder.
// Returns the greedy prediction after the last processed token.
template <class S>
int add_token_ids(GeneratorState<S>& state, const std::vector<int>& token_ids) {
  if (token_ids.empty()) throw ShapeError("add_token_ids: empty token batch");
  state.input_buffer.insert(state.input_buffer.end(), token_ids.begin(), token_ids.end());
  int last_predict = -1;
  const long read_len = state.params.read_len();
  while (state.compression_enabled && state.params.mem_len > 0) {
    const long uncomp = state.uncompressed_tail();
    if (uncomp >= read_len) throw StateError("add_token_ids: uncompressed tail overflow");
    const long proc_len = read_len - uncomp;
    if (static_cast<long>(state.input_buffer.size()) < proc_len) break;
    const std::vector<int> slice(state.input_buffer.begin(), state.input_buffer.begin() + proc_len);
    state.input_buffer.erase(state.input_buffer.begin(), state.input_buffer.begin() + proc_len);
    last_predict = step_infer(state, slice);
    compress_last_chunk(state);
  }
  if (!state.input_buffer.empty()) {
    last_predict = step_infer(state, state.input_buffer);
    state.input_buffer.clear();
  }
  return last_predict;
}

// Greedy generation: prompt streams through the same buffer/compress loop,
// then tokens are emitted one at a time until eos or max_len.
template <class S>
GenerationTrace generate(GeneratorState<S>& state, const std::vector<int>& prompt_ids, int eos_id) {
  if (prompt_ids.empty()) throw ShapeError("generate: empty prompt");
  GenerationTrace trace;
  state.trace = &trace;
  int next = add_token_ids(state, prompt_ids);
  trace.tokens.push_back(next);
  trace.cache_lengths.push_back(state.cache.total_len());
  while (static_cast<long>(trace.tokens.size()) < state.max_len && trace.tokens.back() != eos_id) {
    next = add_token_ids(state, {trace.tokens.back()});
    trace.tokens.push_back(next);
    trace.cache_lengths.push_back(state.cache.total_len());
  }
  state.trace = nullptr;
  return trace;
}

}  // namespace loma
