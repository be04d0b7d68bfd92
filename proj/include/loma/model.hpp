#pragma once

#include <span>
#include <string>
#include <vector>

#include "loma/errors.hpp"
#include "loma/tensor.hpp"

namespace loma {

struct ModelConfig {
  int n_layers = 4;
  int n_heads = 4;
  int d_model = 128;
  int d_head = 32;
  int d_ff = 256;
  int vocab_size = 261;  // base vocabulary + <m> + <r>
  int max_position = 4096;
  std::uint64_t seed = 0;
  double rope_base = 10000.0;

  void validate() const {
    if (n_layers < 1 || n_heads < 1 || d_model < 1 || d_head < 1 || d_ff < 1) {
      throw ConfigError("model config: dimensions must be positive");
    }
    if (d_model != n_heads * d_head) {
      throw ConfigError("model config: d_model (" + std::to_string(d_model) + ") != n_heads*d_head (" +
                        std::to_string(n_heads * d_head) + ")");
    }
    if (d_head % 2 != 0) throw ConfigError("model config: d_head must be even for rotary pairs");
    if (vocab_size < 3) throw ConfigError("model config: vocab_size too small");
    if (max_position < 1) throw ConfigError("model config: max_position must be >= 1");
  }
};

// Per-layer key/value entries (rotated keys), all heads side by side, plus the
// position id each entry was written with. The first compressed_len entries
// belong to compressed memory zones.
template <class S>
struct KvCache {
  struct LayerKV {
    Mat<S> k, v;  // total_len x (n_heads * d_head)
  };
  std::vector<LayerKV> layers;
  std::vector<int> positions;
  Index compressed_len = 0;

  Index total_len() const { return static_cast<Index>(positions.size()); }

  static KvCache empty(const ModelConfig& cfg) {
    KvCache c;
    c.layers.resize(static_cast<std::size_t>(cfg.n_layers));
    for (auto& l : c.layers) {
      l.k = Mat<S>(0, cfg.d_model);
      l.v = Mat<S>(0, cfg.d_model);
    }
    return c;
  }

  // Copy of the last n entries (as an uncompressed cache).
  KvCache tail(Index n) const {
    KvCache c;
    c.layers.resize(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) {
      c.layers[l].k = layers[l].k.bottomRows(n);
      c.layers[l].v = layers[l].v.bottomRows(n);
    }
    c.positions.assign(positions.end() - n, positions.end());
    return c;
  }

  void truncate(Index keep) {
    for (auto& l : layers) {
      l.k = Mat<S>(l.k.topRows(keep));
      l.v = Mat<S>(l.v.topRows(keep));
    }
    positions.resize(static_cast<std::size_t>(keep));
    compressed_len = std::min(compressed_len, keep);
  }

  void extend(const KvCache& other) {
    const Index old = total_len();
    const Index add = other.total_len();
    for (std::size_t l = 0; l < layers.size(); ++l) {
      layers[l].k.conservativeResize(old + add, Eigen::NoChange);
      layers[l].v.conservativeResize(old + add, Eigen::NoChange);
      layers[l].k.bottomRows(add) = other.layers[l].k;
      layers[l].v.bottomRows(add) = other.layers[l].v;
    }
    positions.insert(positions.end(), other.positions.begin(), other.positions.end());
  }
};

template <class S>
struct AttentionHead {
  TensorPtr<S> wq, wk, wv;  // d_model x d_head
  TensorPtr<S> wo;          // d_head x d_model
};

template <class S>
struct DecoderLayer {
  TensorPtr<S> attn_gain;
  std::vector<AttentionHead<S>> heads;
  TensorPtr<S> mlp_gain;
  TensorPtr<S> w_gate, w_up;  // d_model x d_ff
  TensorPtr<S> w_down;        // d_ff x d_model
};

template <class S>
struct NamedParam {
  std::string name;
  TensorPtr<S> param;
};

// Pre-norm decoder: RMS norm, per-head rotary attention with an explicit
// mask, gated MLP, untied output head.
template <class S>
struct Model {
  ModelConfig cfg;
  TensorPtr<S> tok_embedding;  // vocab_size x d_model
  std::vector<DecoderLayer<S>> layers;
  TensorPtr<S> final_gain;
  TensorPtr<S> lm_head;  // d_model x vocab_size

  std::vector<NamedParam<S>> named_params() {
    std::vector<NamedParam<S>> out;
    out.push_back({"embedding", tok_embedding});
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string pre = "layers." + std::to_string(l) + ".";
      out.push_back({pre + "attn_gain", layers[l].attn_gain});
      for (std::size_t h = 0; h < layers[l].heads.size(); ++h) {
        const std::string hp = pre + "heads." + std::to_string(h) + ".";
        out.push_back({hp + "wq", layers[l].heads[h].wq});
        out.push_back({hp + "wk", layers[l].heads[h].wk});
        out.push_back({hp + "wv", layers[l].heads[h].wv});
        out.push_back({hp + "wo", layers[l].heads[h].wo});
      }
      out.push_back({pre + "mlp_gain", layers[l].mlp_gain});
      out.push_back({pre + "w_gate", layers[l].w_gate});
      out.push_back({pre + "w_up", layers[l].w_up});
      out.push_back({pre + "w_down", layers[l].w_down});
    }
    out.push_back({"final_gain", final_gain});
    out.push_back({"lm_head", lm_head});
    return out;
  }

  void zero_grad() {
    for (auto& np : named_params()) np.param->zero_grad();
  }
};

inline constexpr double kInitStd = 0.02;

// Ordinary rows are seeded-normal; the two trailing special-token rows are
// drawn from a normal with the empirical mean/variance of the ordinary rows.
template <class S>
Model<S> init_model(const ModelConfig& cfg) {
  cfg.validate();
  NormalRng rng(cfg.seed);
  Model<S> m;
  m.cfg = cfg;

  const Index vocab = cfg.vocab_size;
  const Index base_rows = vocab - 2;
  Mat<S> emb(vocab, cfg.d_model);
  for (Index i = 0; i < base_rows; ++i) {
    for (Index j = 0; j < cfg.d_model; ++j) emb(i, j) = static_cast<S>(rng.normal(0.0, kInitStd));
  }
  double mean = 0.0;
  for (Index i = 0; i < base_rows; ++i) {
    for (Index j = 0; j < cfg.d_model; ++j) mean += static_cast<double>(emb(i, j));
  }
  const double count = static_cast<double>(base_rows) * cfg.d_model;
  mean /= count;
  double var = 0.0;
  for (Index i = 0; i < base_rows; ++i) {
    for (Index j = 0; j < cfg.d_model; ++j) {
      const double d = static_cast<double>(emb(i, j)) - mean;
      var += d * d;
    }
  }
  var /= count;
  const double stddev = std::sqrt(var);
  for (Index i = base_rows; i < vocab; ++i) {
    for (Index j = 0; j < cfg.d_model; ++j) emb(i, j) = static_cast<S>(rng.normal(mean, stddev));
  }
  m.tok_embedding = make_param(std::move(emb));

  auto ones_row = [&](Index n) {
    return make_param<S>(Mat<S>::Ones(1, n));
  };
  auto normal_mat = [&](Index r, Index c) {
    return make_param<S>(random_normal<S>(r, c, rng, 0.0, kInitStd));
  };

  m.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& layer : m.layers) {
    layer.attn_gain = ones_row(cfg.d_model);
    layer.heads.resize(static_cast<std::size_t>(cfg.n_heads));
    for (auto& head : layer.heads) {
      head.wq = normal_mat(cfg.d_model, cfg.d_head);
      head.wk = normal_mat(cfg.d_model, cfg.d_head);
      head.wv = normal_mat(cfg.d_model, cfg.d_head);
      head.wo = normal_mat(cfg.d_head, cfg.d_model);
    }
    layer.mlp_gain = ones_row(cfg.d_model);
    layer.w_gate = normal_mat(cfg.d_model, cfg.d_ff);
    layer.w_up = normal_mat(cfg.d_model, cfg.d_ff);
    layer.w_down = normal_mat(cfg.d_ff, cfg.d_model);
  }
  m.final_gain = ones_row(cfg.d_model);
  m.lm_head = normal_mat(cfg.d_model, cfg.vocab_size);
  return m;
}

namespace detail {

template <class S>
void check_tokens(const Model<S>& m, std::span<const int> tokens, std::span<const int> positions) {
  if (tokens.empty()) throw ShapeError("forward: empty token sequence");
  if (positions.size() != tokens.size()) throw ShapeError("forward: positions length != tokens length");
  for (int t : tokens) {
    if (t < 0 || t >= m.cfg.vocab_size) {
      throw ShapeError("forward: token id " + std::to_string(t) + " outside vocabulary");
    }
  }
  for (int p : positions) {
    if (p < 0 || p >= m.cfg.max_position) {
      throw GeometryError("forward: position " + std::to_string(p) + " exceeds max_position " +
                          std::to_string(m.cfg.max_position));
    }
  }
}

}  // namespace detail

// Cache-based forward pass (no gradients). The mask has one row per new token
// and one column per cache entry followed by the new tokens, in order. New
// K/V entries are appended to *cache; pass nullptr for a pure one-shot pass.
template <class S>
Mat<S> forward(const Model<S>& m, std::span<const int> tokens, std::span<const int> positions,
               const MaskMat& mask, KvCache<S>* cache) {
  const ModelConfig& cfg = m.cfg;
  detail::check_tokens(m, tokens, positions);
  KvCache<S> local;
  if (!cache) {
    local = KvCache<S>::empty(cfg);
    cache = &local;
  }
  const Index n = static_cast<Index>(tokens.size());
  const Index old_len = cache->total_len();
  if (mask.rows() != n || mask.cols() != old_len + n) {
    throw ShapeError("forward: mask is " + std::to_string(mask.rows()) + "x" +
                     std::to_string(mask.cols()) + ", expected " + std::to_string(n) + "x" +
                     std::to_string(old_len + n));
  }

  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.d_head)));
  Mat<S> x(n, cfg.d_model);
  for (Index i = 0; i < n; ++i) x.row(i) = m.tok_embedding->value.row(tokens[static_cast<std::size_t>(i)]);

  for (int l = 0; l < cfg.n_layers; ++l) {
    const DecoderLayer<S>& layer = m.layers[static_cast<std::size_t>(l)];
    auto& ckv = cache->layers[static_cast<std::size_t>(l)];
    const Mat<S> xn = rms_norm_rows(x, layer.attn_gain->value);

    Mat<S> qs(n, cfg.d_model);
    ckv.k.conservativeResize(old_len + n, Eigen::NoChange);
    ckv.v.conservativeResize(old_len + n, Eigen::NoChange);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto& head = layer.heads[static_cast<std::size_t>(h)];
      const Index hc = static_cast<Index>(h) * cfg.d_head;
      qs.block(0, hc, n, cfg.d_head).noalias() = xn * head.wq->value;
      ckv.k.block(old_len, hc, n, cfg.d_head).noalias() = xn * head.wk->value;
      ckv.v.block(old_len, hc, n, cfg.d_head).noalias() = xn * head.wv->value;
      rope_rows_inplace<S>(qs.block(0, hc, n, cfg.d_head), positions, cfg.rope_base);
      rope_rows_inplace<S>(ckv.k.block(old_len, hc, n, cfg.d_head), positions, cfg.rope_base);
    }

    Mat<S> attn_out = Mat<S>::Zero(n, cfg.d_model);
    for (int h = 0; h < cfg.n_heads; ++h) {
      const auto& head = layer.heads[static_cast<std::size_t>(h)];
      const Index hc = static_cast<Index>(h) * cfg.d_head;
      Mat<S> scores(n, old_len + n);
      scores.noalias() =
          qs.block(0, hc, n, cfg.d_head) * ckv.k.middleCols(hc, cfg.d_head).transpose() * inv_sqrt_dh;
      const Mat<S> probs = masked_softmax_rows(scores, mask);
      attn_out.noalias() += probs * ckv.v.middleCols(hc, cfg.d_head) * head.wo->value;
    }
    x += attn_out;

    const Mat<S> xn2 = rms_norm_rows(x, layer.mlp_gain->value);
    Mat<S> gate = xn2 * layer.w_gate->value;
    const Mat<S> up = xn2 * layer.w_up->value;
    gate = gate.cwiseProduct((S(1) / (S(1) + (-gate.array()).exp())).matrix());  // silu
    x += (gate.cwiseProduct(up)) * layer.w_down->value;
  }

  cache->positions.insert(cache->positions.end(), positions.begin(), positions.end());
  const Mat<S> xn = rms_norm_rows(x, m.final_gain->value);
  return xn * m.lm_head->value;
}

// One-shot pass without a cache; the mask is square over the input tokens.
template <class S>
Mat<S> forward(const Model<S>& m, std::span<const int> tokens, std::span<const int> positions,
               const MaskMat& mask) {
  return forward(m, tokens, positions, mask, static_cast<KvCache<S>*>(nullptr));
}

// Cache of `len` random entries; positions 0..len-1. Weight-independent
// timing and cache-surgery tests use this.
template <class S>
KvCache<S> random_cache(const ModelConfig& cfg, long len, NormalRng& rng) {
  KvCache<S> cache = KvCache<S>::empty(cfg);
  for (auto& layer : cache.layers) {
    layer.k = random_normal<S>(len, cfg.d_model, rng);
    layer.v = random_normal<S>(len, cfg.d_model, rng);
  }
  cache.positions.resize(static_cast<std::size_t>(len));
  for (long i = 0; i < len; ++i) cache.positions[static_cast<std::size_t>(i)] = static_cast<int>(i);
  return cache;
}

// Intermediate nodes of interest for gradient-flow checks: the normed
// per-layer attention input (what the k/v projections consume) and logits.
template <class S>
struct ForwardProbe {
  std::vector<TensorPtr<S>> attn_inputs;
  TensorPtr<S> logits;
};

// Same computation on the autodiff tape; no cache (the mask carries the full
// structure). Mask must be square over the input tokens.
template <class S>
TensorPtr<S> forward_train(Graph<S>& g, Model<S>& m, const std::vector<int>& tokens,
                           const std::vector<int>& positions, const MaskMat& mask,
                           ForwardProbe<S>* probe = nullptr) {
  const ModelConfig& cfg = m.cfg;
  detail::check_tokens(m, tokens, positions);
  const Index n = static_cast<Index>(tokens.size());
  if (mask.rows() != n || mask.cols() != n) {
    throw ShapeError("forward_train: mask must be " + std::to_string(n) + "x" + std::to_string(n));
  }
  const S inv_sqrt_dh = static_cast<S>(1.0 / std::sqrt(static_cast<double>(cfg.d_head)));

  TensorPtr<S> x = embedding_rows(g, m.tok_embedding, tokens);
  for (int l = 0; l < cfg.n_layers; ++l) {
    DecoderLayer<S>& layer = m.layers[static_cast<std::size_t>(l)];
    TensorPtr<S> xn = rms_norm(g, x, layer.attn_gain);
    if (probe) probe->attn_inputs.push_back(xn);

    TensorPtr<S> attn;
    for (int h = 0; h < cfg.n_heads; ++h) {
      auto& head = layer.heads[static_cast<std::size_t>(h)];
      TensorPtr<S> q = rope(g, matmul(g, xn, head.wq), positions, cfg.rope_base);
      TensorPtr<S> k = rope(g, matmul(g, xn, head.wk), positions, cfg.rope_base);
      TensorPtr<S> v = matmul(g, xn, head.wv);
      TensorPtr<S> scores = scale(g, matmul_nt(g, q, k), inv_sqrt_dh);
      TensorPtr<S> probs = masked_softmax(g, scores, mask);
      TensorPtr<S> head_out = matmul(g, matmul(g, probs, v), head.wo);
      attn = attn ? add(g, attn, head_out) : head_out;
    }
    x = add(g, x, attn);

    TensorPtr<S> xn2 = rms_norm(g, x, layer.mlp_gain);
    TensorPtr<S> gate = silu(g, matmul(g, xn2, layer.w_gate));
    TensorPtr<S> up = matmul(g, xn2, layer.w_up);
    x = add(g, x, matmul(g, mul(g, gate, up), layer.w_down));
  }
  TensorPtr<S> logits = matmul(g, rms_norm(g, x, m.final_gain), m.lm_head);
  if (probe) probe->logits = logits;
  return logits;
}

}  // namespace loma
