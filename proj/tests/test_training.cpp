#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "loma/corpus.hpp"
#include "loma/training.hpp"

using namespace loma;

namespace {

ModelConfig mini_config(int layers, std::uint64_t seed = 7) {
  ModelConfig cfg;
  cfg.n_layers = layers;
  cfg.n_heads = 2;
  cfg.d_model = 8;
  cfg.d_head = 4;
  cfg.d_ff = 16;
  cfg.vocab_size = 261;
  cfg.max_position = 128;
  cfg.seed = seed;
  return cfg;
}

LomaParams params(int t, int c) {
  LomaParams p;
  p.mem_len = t;
  p.compress_ratio = c;
  return p;
}

StructuredSample sample_for(const LomaParams& p, int n_chunks, std::uint64_t seed) {
  NormalRng rng(seed);
  std::vector<int> doc(static_cast<std::size_t>(n_chunks) * p.read_len());
  doc[0] = Vocab::kBos;
  for (std::size_t i = 1; i < doc.size(); ++i) doc[i] = static_cast<int>(rng.below(256));
  return build_sample(doc, p, static_cast<long>(n_chunks) * p.span());
}

Mat<double> oracle_logits(const StructuredSample& sample, int vocab) {
  Mat<double> logits = Mat<double>::Zero(static_cast<Index>(sample.size()), vocab);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    if (sample.labels[i] >= 0) logits(static_cast<Index>(i), sample.labels[i]) = 30.0;
  }
  return logits;
}

}  // namespace

TEST_CASE("saturated oracle logits give near-zero loss") {
  const auto p = params(2, 2);
  const auto sample = sample_for(p, 2, 3);
  const LossReport r = compute_loss(oracle_logits(sample, 261), sample);
  CHECK(r.total() < 1e-6);
  CHECK(r.read_tokens() > 0);
  CHECK(r.rep_tokens() > 0);
}

TEST_CASE("uniform logits cost ln(V) per labeled position") {
  const auto p = params(2, 2);
  const auto sample = sample_for(p, 2, 5);
  const int vocab = 261;
  const Mat<double> logits = Mat<double>::Zero(static_cast<Index>(sample.size()), vocab);
  const LossReport r = compute_loss(logits, sample);
  const double expected = static_cast<double>(r.labeled_tokens()) * std::log(static_cast<double>(vocab));
  CHECK(std::abs(r.total() - expected) < 1e-9);
}

TEST_CASE("memory-zone logits are inert") {
  const auto p = params(2, 2);
  const auto sample = sample_for(p, 2, 7);
  NormalRng rng(9);
  Mat<double> logits = random_normal<double>(static_cast<Index>(sample.size()), 261, rng);
  const LossReport before = compute_loss(logits, sample);
  for (std::size_t i = 0; i < sample.size(); ++i) {
    if (sample.zones.zones[i] == Zone::Mem) logits.row(static_cast<Index>(i)).setZero();
  }
  const LossReport after = compute_loss(logits, sample);
  CHECK(before.total() == after.total());
}

TEST_CASE("loss decomposes into the per-chunk read and rep sums") {
  const auto p = params(2, 3);
  const auto sample = sample_for(p, 3, 11);
  NormalRng rng(13);
  const Mat<double> logits = random_normal<double>(static_cast<Index>(sample.size()), 261, rng);
  const LossReport r = compute_loss(logits, sample);

  // independent recomputation straight from the labels
  double read = 0.0, rep = 0.0;
  for (std::size_t i = 0; i < sample.size(); ++i) {
    if (sample.labels[i] < 0) continue;
    const double ce = cross_entropy_row<double>(logits.row(static_cast<Index>(i)), sample.labels[i]);
    if (sample.zones.zones[i] == Zone::Read) read += ce;
    if (sample.zones.zones[i] == Zone::Rep) rep += ce;
  }
  CHECK(std::abs(r.read_sum() - read) < 1e-12);
  CHECK(std::abs(r.rep_sum() - rep) < 1e-12);
  CHECK(std::abs(r.total() - (read + rep)) < 1e-12);

  double chunk_total = 0.0;
  for (const auto& ch : r.chunks) chunk_total += ch.read_sum + ch.rep_sum;
  CHECK(std::abs(r.total() - chunk_total) < 1e-12);

  // the tape-built loss agrees with the pure recomputation
  ModelConfig cfg = mini_config(1, 17);
  auto m = init_model<double>(cfg);
  Graph<double> g;
  auto node = forward_train(g, m, sample.tokens, sample.position_ids, sample.mask);
  auto nodes = build_loss(g, node, sample);
  const LossReport pure = compute_loss(node->value, sample);
  CHECK(std::abs(nodes.report.total() - pure.total()) < 1e-12);
}

TEST_CASE("misaligned logits are rejected") {
  const auto p = params(2, 2);
  const auto sample = sample_for(p, 1, 19);
  const Mat<double> logits = Mat<double>::Zero(3, 261);
  CHECK_THROWS_AS(compute_loss(logits, sample), ShapeError);
}

TEST_CASE("argmax decisions are temperature invariant") {
  NormalRng rng(23);
  const Mat<double> logits = random_normal<double>(16, 261, rng);
  for (Index i = 0; i < logits.rows(); ++i) {
    Index a = 0, b = 0;
    logits.row(i).maxCoeff(&a);
    Mat<double> scaled = logits.row(i) * 2.5;
    scaled.row(0).maxCoeff(&b);
    CHECK(a == b);
  }
}

TEST_CASE("learning rate schedule is continuous and bounded") {
  TrainConfig cfg;
  cfg.max_steps = 500;
  cfg.warmup_steps = 50;
  cfg.lr_max = 3e-4;
  cfg.lr_min = 3e-5;
  double prev = learning_rate_at(cfg, 0);
  CHECK(prev == cfg.lr_min);
  double max_jump = 0.0;
  for (long s = 1; s < cfg.max_steps; ++s) {
    const double lr = learning_rate_at(cfg, s);
    CHECK(lr >= cfg.lr_min - 1e-15);
    CHECK(lr <= cfg.lr_max + 1e-15);
    max_jump = std::max(max_jump, std::abs(lr - prev));
    prev = lr;
  }
  CHECK(learning_rate_at(cfg, cfg.warmup_steps) == cfg.lr_max);
  CHECK(max_jump < (cfg.lr_max - cfg.lr_min) * 0.05);
}

TEST_CASE("zero training steps leave the model at its initialization") {
  auto m = init_model<double>(mini_config(1, 29));
  const auto reference = init_model<double>(mini_config(1, 29));
  const auto p = params(2, 2);
  const Corpus corpus = make_random_corpus(4, 1, p, 31);
  TrainConfig cfg;
  cfg.max_steps = 0;
  cfg.batch_size = 2;
  cfg.sample_len = p.span();
  cfg.seed = 1;
  const TrainResult r = train(m, corpus, p, cfg);
  CHECK(r.steps.empty());
  auto pa = m.named_params();
  auto pb = const_cast<Model<double>&>(reference).named_params();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    CHECK((pa[i].param->value - pb[i].param->value).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto p = params(2, 2);
  const Corpus corpus = make_random_corpus(8, 2, p, 37);
  TrainConfig cfg;
  cfg.max_steps = 12;
  cfg.batch_size = 2;
  cfg.sample_len = 2L * p.span();
  cfg.warmup_steps = 4;
  cfg.seed = 5;

  auto run = [&] {
    auto m = init_model<double>(mini_config(1, 41));
    const TrainResult r = train(m, corpus, p, cfg);
    return loss_curves_csv(r.steps);
  };
  const std::string a = run();
  const std::string b = run();
  CHECK(a == b);
  CHECK(a.find("step,L,L_Read,L_Rep,lr\n") == 0);
  CHECK(std::count(a.begin(), a.end(), '\n') == 13);  // header + 12 rows
}

TEST_CASE("short training run reduces the repetition loss") {
  const auto p = params(1, 2);
  const Corpus corpus = make_random_corpus(16, 1, p, 43);
  TrainConfig cfg;
  cfg.max_steps = 120;
  cfg.batch_size = 4;
  cfg.sample_len = p.span();
  cfg.warmup_steps = 10;
  cfg.lr_max = 3e-3;
  cfg.lr_min = 3e-4;
  cfg.seed = 7;
  auto m = init_model<double>(mini_config(2, 47));
  const TrainResult r = train(m, corpus, p, cfg);
  REQUIRE(r.steps.size() == 120);
  double early = 0.0, late = 0.0;
  for (int i = 0; i < 10; ++i) early += r.steps[static_cast<std::size_t>(i)].rep_per_token();
  for (int i = 110; i < 120; ++i) late += r.steps[static_cast<std::size_t>(i)].rep_per_token();
  CHECK(late < early);
}

TEST_CASE("divergence aborts with a diagnostic") {
  const auto p = params(1, 2);
  const Corpus corpus = make_random_corpus(4, 1, p, 51);
  TrainConfig cfg;
  cfg.max_steps = 20;
  cfg.batch_size = 1;
  cfg.sample_len = p.span();
  cfg.warmup_steps = 1;
  cfg.lr_max = 1e12;  // drives f32 activations past the representable range
  cfg.lr_min = 1e12;
  cfg.seed = 3;
  auto m = init_model<float>(mini_config(1, 53));
  CHECK_THROWS_AS(train(m, corpus, p, cfg), NumericError);
}

TEST_CASE("gradient flow report on a miniature two-layer model") {
  auto m = init_model<double>(mini_config(2, 59));
  const auto p = params(1, 2);
  const auto sample = sample_for(p, 2, 61);
  GradCheckOptions opt;
  opt.max_coords_per_param = 24;  // sampled projection keeps this test quick
  const GradFlowReport report = verify_gradient_flow(m, sample, opt);
  CHECK(report.mem_logit_grad_max == 0.0);
  CHECK(report.mem_kv_input_grad_norm > 0.0);
  CHECK(report.read_embedding_grad_norm > 0.0);
  CHECK(report.fd_max_rel_err < 1e-4);
  CHECK(report.ok());
  report.check();
}

TEST_CASE("one-layer model: repetition loss cannot reach the reading embeddings") {
  // With a single layer the MEM k/v projections read only the <m> embedding;
  // the READ -> MEM -> REP route needs at least two layers.
  auto m = init_model<double>(mini_config(1, 67));
  const auto p = params(1, 2);
  const auto sample = sample_for(p, 1, 71);
  GradCheckOptions opt;
  opt.run_finite_diff = false;
  const GradFlowReport report = verify_gradient_flow(m, sample, opt);
  CHECK(report.read_embedding_grad_norm == 0.0);
  CHECK(report.mem_kv_input_grad_norm > 0.0);
  CHECK(report.ok());  // the read-path requirement only binds for >= 2 layers
}

TEST_CASE("repetition logits ignore the reading-zone K/V at the attention level") {
  auto m = init_model<double>(mini_config(2, 73));
  const auto p = params(2, 2);
  const auto sample = sample_for(p, 1, 79);
  const int tc = p.read_len(), t = p.mem_len, s = p.span();

  // cache-based forward over the whole chunk
  auto cache = KvCache<double>::empty(m.cfg);
  const MaskMat full = build_chunk_mask(p);
  const Mat<double> logits =
      forward(m, sample.tokens, sample.position_ids, full, &cache);
  const Mat<double> rep_logits = logits.bottomRows(tc);

  // scramble READ K/V, keep MEM K/V, recompute the REP rows
  NormalRng rng(83);
  for (auto& layer : cache.layers) {
    layer.k.topRows(tc) = random_normal<double>(tc, m.cfg.d_model, rng);
    layer.v.topRows(tc) = random_normal<double>(tc, m.cfg.d_model, rng);
  }
  KvCache<double> prefix = cache;
  prefix.truncate(tc + t);
  std::vector<int> rep_tokens(sample.tokens.end() - tc, sample.tokens.end());
  std::vector<int> rep_pos(sample.position_ids.begin() + tc + t, sample.position_ids.begin() + s);
  MaskMat mask = MaskMat::Zero(tc, tc + t + tc);
  for (int r = 0; r < tc; ++r) {
    for (int j = tc; j < tc + t; ++j) mask(r, j) = 1;
    mask(r, tc + t + r) = 1;
  }
  const Mat<double> replayed = forward(m, rep_tokens, rep_pos, mask, &prefix);
  CHECK((rep_logits - replayed).cwiseAbs().maxCoeff() < 1e-9);
}
