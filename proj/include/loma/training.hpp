#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <deque>
#include <functional>
#include <string>
#include <vector>

#include "loma/corpus.hpp"
#include "loma/model.hpp"
#include "loma/structuring.hpp"

namespace loma {

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

struct ChunkLoss {
  double read_sum = 0.0;
  double rep_sum = 0.0;
  long read_tokens = 0;
  long rep_tokens = 0;
};

// Raw per-chunk cross-entropy sums; the total is their plain sum. Per-token
// means are derived views (nats/token).
struct LossReport {
  std::vector<ChunkLoss> chunks;

  double read_sum() const {
    double s = 0.0;
    for (const auto& c : chunks) s += c.read_sum;
    return s;
  }
  double rep_sum() const {
    double s = 0.0;
    for (const auto& c : chunks) s += c.rep_sum;
    return s;
  }
  double total() const { return read_sum() + rep_sum(); }
  long read_tokens() const {
    long n = 0;
    for (const auto& c : chunks) n += c.read_tokens;
    return n;
  }
  long rep_tokens() const {
    long n = 0;
    for (const auto& c : chunks) n += c.rep_tokens;
    return n;
  }
  long labeled_tokens() const { return read_tokens() + rep_tokens(); }
  double read_per_token() const { return read_tokens() ? read_sum() / read_tokens() : 0.0; }
  double rep_per_token() const { return rep_tokens() ? rep_sum() / rep_tokens() : 0.0; }
  double total_per_token() const { return labeled_tokens() ? total() / labeled_tokens() : 0.0; }
};

// READ positions score next-token cross entropy, REP positions score their
// mirrored reading-zone targets, MEM and PAD contribute nothing.
template <class S>
LossReport compute_loss(const Mat<S>& logits, const StructuredSample& sample) {
  if (logits.rows() != static_cast<Index>(sample.size())) {
    throw ShapeError("compute_loss: logits rows " + std::to_string(logits.rows()) +
                     " != sample positions " + std::to_string(sample.size()));
  }
  LossReport report;
  report.chunks.resize(static_cast<std::size_t>(std::max(sample.n_chunks, 0)));
  for (std::size_t i = 0; i < sample.size(); ++i) {
    const int label = sample.labels[i];
    if (label < 0) continue;
    const int chunk = sample.zones.chunk_index[i];
    const Zone z = sample.zones.zones[i];
    const double ce = static_cast<double>(cross_entropy_row<S>(logits.row(static_cast<Index>(i)), label));
    auto& bucket = report.chunks[static_cast<std::size_t>(chunk)];
    if (z == Zone::Read) {
      bucket.read_sum += ce;
      ++bucket.read_tokens;
    } else if (z == Zone::Rep) {
      bucket.rep_sum += ce;
      ++bucket.rep_tokens;
    }
  }
  return report;
}

// Tape version: one cross-entropy node per chunk and zone, so the gradient of
// the summed objective flows only through labeled rows.
template <class S>
struct LossNodes {
  TensorPtr<S> read_total;  // may be null when no read labels exist
  TensorPtr<S> rep_total;
  TensorPtr<S> objective;   // read + rep_weight * rep
  LossReport report;
};

template <class S>
LossNodes<S> build_loss(Graph<S>& g, const TensorPtr<S>& logits, const StructuredSample& sample,
                        double rep_weight = 1.0) {
  if (logits->rows() != static_cast<Index>(sample.size())) {
    throw ShapeError("build_loss: logits rows != sample positions");
  }
  const int tc = sample.params.read_len();
  const int t = sample.params.mem_len;
  const int span = sample.params.span();

  LossNodes<S> out;
  out.report.chunks.resize(static_cast<std::size_t>(sample.n_chunks));
  auto labels_slice = [&](Index start, Index len) {
    return std::vector<int>(sample.labels.begin() + start, sample.labels.begin() + start + len);
  };
  auto count_labels = [&](const std::vector<int>& v) {
    return static_cast<long>(std::count_if(v.begin(), v.end(), [](int x) { return x >= 0; }));
  };

  for (int i = 0; i < sample.n_chunks; ++i) {
    const Index base = static_cast<Index>(i) * span;
    auto read_labels = labels_slice(base, tc);
    auto rep_labels = labels_slice(base + tc + t, tc);
    auto& bucket = out.report.chunks[static_cast<std::size_t>(i)];
    bucket.read_tokens = count_labels(read_labels);
    bucket.rep_tokens = count_labels(rep_labels);

    if (bucket.read_tokens > 0) {
      auto ce = cross_entropy_rows(g, slice_rows(g, logits, base, tc), std::move(read_labels));
      bucket.read_sum = static_cast<double>(ce->value(0, 0));
      out.read_total = out.read_total ? add(g, out.read_total, ce) : ce;
    }
    if (bucket.rep_tokens > 0) {
      auto ce = cross_entropy_rows(g, slice_rows(g, logits, base + tc + t, tc), std::move(rep_labels));
      bucket.rep_sum = static_cast<double>(ce->value(0, 0));
      out.rep_total = out.rep_total ? add(g, out.rep_total, ce) : ce;
    }
  }

  TensorPtr<S> rep_part =
      out.rep_total ? (rep_weight == 1.0 ? out.rep_total : scale(g, out.rep_total, static_cast<S>(rep_weight)))
                    : nullptr;
  if (out.read_total && rep_part) {
    out.objective = add(g, out.read_total, rep_part);
  } else if (out.read_total) {
    out.objective = out.read_total;
  } else if (rep_part) {
    out.objective = rep_part;
  } else {
    throw GeometryError("build_loss: sample has no labeled positions");
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Adam with decoupled weight decay. Norm gains and the special-token
// embedding rows are exempt from decay.
template <class S>
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.95;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW(std::vector<NamedParam<S>> params, Options opt) : params_(std::move(params)), opt_(opt) {
    slots_.reserve(params_.size());
    for (const auto& np : params_) {
      Slot s;
      s.m = Mat<S>::Zero(np.param->rows(), np.param->cols());
      s.v = Mat<S>::Zero(np.param->rows(), np.param->cols());
      if (np.param->rows() == 1) {
        s.decay_rows = 0;  // norm gains
      } else if (np.name == "embedding") {
        s.decay_rows = np.param->rows() - 2;  // keep the special rows free
      } else {
        s.decay_rows = np.param->rows();
      }
      slots_.push_back(std::move(s));
    }
  }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, t_);
    const double bc2 = 1.0 - std::pow(opt_.beta2, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = *params_[i].param;
      auto& s = slots_[i];
      p.ensure_grad();
      s.m = s.m * static_cast<S>(opt_.beta1) + p.grad * static_cast<S>(1.0 - opt_.beta1);
      s.v = (s.v.array() * static_cast<S>(opt_.beta2) +
             p.grad.array().square() * static_cast<S>(1.0 - opt_.beta2))
                .matrix();
      const auto update = (s.m.array() / static_cast<S>(bc1)) /
                          ((s.v.array() / static_cast<S>(bc2)).sqrt() + static_cast<S>(opt_.eps));
      p.value.array() -= static_cast<S>(lr) * update;
      if (opt_.weight_decay > 0.0 && s.decay_rows > 0) {
        p.value.topRows(s.decay_rows) *= static_cast<S>(1.0 - lr * opt_.weight_decay);
      }
    }
  }

  long steps_taken() const { return t_; }

 private:
  struct Slot {
    Mat<S> m, v;
    Index decay_rows = 0;
  };
  std::vector<NamedParam<S>> params_;
  std::vector<Slot> slots_;
  Options opt_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct TrainConfig {
  long max_steps = 1000;
  int batch_size = 8;
  double lr_max = 3e-4;
  double lr_min = 3e-5;
  long warmup_steps = 100;
  std::uint64_t seed = 0;
  long eval_every = 0;        // 0 = no callback
  double rep_weight = 1.0;
  double weight_decay = 0.01;
  double stop_rep_loss = 0.0; // early stop once the smoothed per-token rep loss drops below; 0 = off
  long smooth_window = 200;
  long sample_len = 0;        // s_hat

  void validate() const {
    if (max_steps < 0 || batch_size < 1) throw ConfigError("train config: bad steps/batch");
    if (!(lr_min <= lr_max) || lr_min < 0) throw ConfigError("train config: need 0 <= lr_min <= lr_max");
    if (warmup_steps < 0) throw ConfigError("train config: negative warmup");
    if (sample_len < 1) throw ConfigError("train config: sample_len (s_hat) must be set");
  }
};

// Linear warmup from lr_min to lr_max, then cosine back down to lr_min.
// Continuous in step and bounded by [lr_min, lr_max].
inline double learning_rate_at(const TrainConfig& cfg, long step) {
  const double span = static_cast<double>(std::max<long>(cfg.warmup_steps, 1));
  if (step < cfg.warmup_steps) {
    return cfg.lr_min + (cfg.lr_max - cfg.lr_min) * (static_cast<double>(step) / span);
  }
  const double denom = static_cast<double>(std::max<long>(cfg.max_steps - cfg.warmup_steps, 1));
  const double progress = std::min(1.0, static_cast<double>(step - cfg.warmup_steps) / denom);
  return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + std::cos(3.14159265358979323846 * progress));
}

struct StepStats {
  long step = 0;
  double read_sum = 0.0, rep_sum = 0.0;
  long read_tokens = 0, rep_tokens = 0;
  double lr = 0.0;

  double read_per_token() const { return read_tokens ? read_sum / read_tokens : 0.0; }
  double rep_per_token() const { return rep_tokens ? rep_sum / rep_tokens : 0.0; }
  double total_per_token() const {
    const long n = read_tokens + rep_tokens;
    return n ? (read_sum + rep_sum) / n : 0.0;
  }
};

struct TrainResult {
  std::vector<StepStats> steps;
  long stopped_at = -1;  // step index of early stop, -1 if the budget ran out
};

template <class S>
using TrainCallback = std::function<void(long step, Model<S>&)>;

template <class S>
TrainResult train(Model<S>& model, const Corpus& corpus, const LomaParams& p, const TrainConfig& cfg,
                  const TrainCallback<S>& callback = {}) {
  cfg.validate();
  p.validate();
  if (corpus.empty()) throw GeometryError("train: empty corpus");

  AdamW<S> opt(model.named_params(), typename AdamW<S>::Options{0.9, 0.95, 1e-8, cfg.weight_decay});
  NormalRng batch_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  TrainResult result;
  result.steps.reserve(static_cast<std::size_t>(cfg.max_steps));
  std::deque<double> window;

  for (long step = 0; step < cfg.max_steps; ++step) {
    std::vector<const std::vector<int>*> docs;
    docs.reserve(static_cast<std::size_t>(cfg.batch_size));
    for (int b = 0; b < cfg.batch_size; ++b) {
      docs.push_back(&corpus.documents[batch_rng.below(corpus.size())]);
    }
    std::vector<StructuredSample> samples;
    samples.reserve(docs.size());
    long batch_labels = 0;
    for (const auto* doc : docs) {
      samples.push_back(build_sample(*doc, p, cfg.sample_len));
      batch_labels += [&] {
        long n = 0;
        for (int l : samples.back().labels) n += (l >= 0);
        return n;
      }();
    }
    if (batch_labels == 0) throw GeometryError("train: batch carries no labels");

    StepStats stats;
    stats.step = step;
    stats.lr = learning_rate_at(cfg, step);
    for (const auto& sample : samples) {
      Graph<S> g;
      auto logits = forward_train(g, model, sample.tokens, sample.position_ids, sample.mask);
      auto loss = build_loss(g, logits, sample, cfg.rep_weight);
      stats.read_sum += loss.report.read_sum();
      stats.rep_sum += loss.report.rep_sum();
      stats.read_tokens += loss.report.read_tokens();
      stats.rep_tokens += loss.report.rep_tokens();
      g.backward(loss.objective, static_cast<S>(1.0 / static_cast<double>(batch_labels)));
    }
    if (!std::isfinite(stats.read_sum + stats.rep_sum)) {
      throw NumericError("train: non-finite loss at step " + std::to_string(step) + " (read_sum=" +
                         std::to_string(stats.read_sum) + ", rep_sum=" + std::to_string(stats.rep_sum) +
                         "); reduce the learning rate or check the data");
    }
    opt.step(stats.lr);
    model.zero_grad();
    result.steps.push_back(stats);

    window.push_back(stats.rep_per_token());
    if (static_cast<long>(window.size()) > cfg.smooth_window) window.pop_front();
    if (callback && cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) callback(step, model);
    if (cfg.stop_rep_loss > 0.0 && static_cast<long>(window.size()) == cfg.smooth_window &&
        step >= cfg.warmup_steps) {
      double mean = 0.0;
      for (double v : window) mean += v;
      mean /= static_cast<double>(window.size());
      if (mean < cfg.stop_rep_loss) {
        result.stopped_at = step;
        break;
      }
    }
  }
  return result;
}

// "step,L,L_Read,L_Rep,lr" with per-token means (nats/token).
inline std::string loss_curves_csv(const std::vector<StepStats>& steps) {
  std::string out = "step,L,L_Read,L_Rep,lr\n";
  char buf[160];
  for (const auto& s : steps) {
    std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g,%.17g,%.17g\n", s.step, s.total_per_token(),
                  s.read_per_token(), s.rep_per_token(), s.lr);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradient-flow verification
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double h = 1e-5;
  double rtol = 1e-4;
  double atol = 1e-7;
  long max_coords_per_param = 0;  // 0 = exhaustive
  std::uint64_t seed = 1;
  bool run_finite_diff = true;
};

struct GradFlowReport {
  double mem_logit_grad_max = 0.0;       // gradient of L at MEM-position logits; must be exactly 0
  double mem_kv_input_grad_norm = 0.0;   // gradient of L_Rep at MEM rows of the attention inputs
  double read_embedding_grad_norm = 0.0; // gradient of L_Rep at READ-token embedding rows
  double fd_max_rel_err = 0.0;
  double rtol = 1e-4;
  int model_layers = 0;
  bool finite_diff_ran = false;

  bool mem_logits_zero() const { return mem_logit_grad_max == 0.0; }
  bool mem_path_nonzero() const { return mem_kv_input_grad_norm > 0.0; }
  bool read_path_nonzero() const { return read_embedding_grad_norm > 0.0; }
  bool finite_diff_ok() const { return !finite_diff_ran || fd_max_rel_err < rtol; }
  bool ok() const {
    return mem_logits_zero() && mem_path_nonzero() && (model_layers < 2 || read_path_nonzero()) &&
           finite_diff_ok();
  }

  void check() const {
    if (!mem_logits_zero()) {
      throw NumericError("gradient-flow: nonzero loss gradient at memory-zone logits (max " +
                         std::to_string(mem_logit_grad_max) + ")");
    }
    if (!mem_path_nonzero()) {
      throw NumericError("gradient-flow: repetition loss reaches no gradient at memory-zone k/v inputs");
    }
    if (model_layers >= 2 && !read_path_nonzero()) {
      throw NumericError("gradient-flow: repetition loss reaches no gradient at reading-zone embeddings");
    }
    if (!finite_diff_ok()) {
      throw NumericError("gradient-flow: finite-difference mismatch, max rel err " +
                         std::to_string(fd_max_rel_err));
    }
  }
};

template <class S>
GradFlowReport verify_gradient_flow(Model<S>& model, const StructuredSample& sample,
                                    const GradCheckOptions& opt = {}) {
  if (sample.n_chunks < 1) throw GeometryError("verify_gradient_flow: sample has no chunks");
  GradFlowReport report;
  report.rtol = opt.rtol;
  report.model_layers = model.cfg.n_layers;
  const int tc = sample.params.read_len();
  const int t = sample.params.mem_len;
  const int span = sample.params.span();

  // Pass 1: L_Rep only. Checks (a) and (c).
  {
    model.zero_grad();
    Graph<S> g;
    ForwardProbe<S> probe;
    auto logits = forward_train(g, model, sample.tokens, sample.position_ids, sample.mask, &probe);
    std::vector<int> rep_only(sample.labels.size(), -1);
    for (std::size_t i = 0; i < sample.size(); ++i) {
      if (sample.zones.zones[i] == Zone::Rep) rep_only[i] = sample.labels[i];
    }
    auto rep_loss = cross_entropy_rows(g, logits, rep_only);
    g.backward(rep_loss);

    double mem_norm_sq = 0.0;
    for (const auto& xn : probe.attn_inputs) {
      if (!xn->has_grad()) continue;
      for (int ch = 0; ch < sample.n_chunks; ++ch) {
        const Index base = static_cast<Index>(ch) * span + tc;
        mem_norm_sq += static_cast<double>(xn->grad.middleRows(base, t).squaredNorm());
      }
    }
    report.mem_kv_input_grad_norm = std::sqrt(mem_norm_sq);

    double read_norm_sq = 0.0;
    std::vector<char> seen(static_cast<std::size_t>(model.cfg.vocab_size), 0);
    for (std::size_t i = 0; i < sample.size(); ++i) {
      if (sample.zones.zones[i] != Zone::Read) continue;
      const int id = sample.tokens[i];
      if (!seen[static_cast<std::size_t>(id)]) {
        seen[static_cast<std::size_t>(id)] = 1;
        read_norm_sq += static_cast<double>(model.tok_embedding->grad.row(id).squaredNorm());
      }
    }
    report.read_embedding_grad_norm = std::sqrt(read_norm_sq);
  }

  // Pass 2: total L. Check (b): MEM-position logits carry no gradient.
  std::vector<Mat<S>> analytic;
  {
    model.zero_grad();
    Graph<S> g;
    auto logits = forward_train(g, model, sample.tokens, sample.position_ids, sample.mask);
    auto loss = build_loss(g, logits, sample, 1.0);
    g.backward(loss.objective);
    double mem_max = 0.0;
    if (logits->has_grad()) {
      for (std::size_t i = 0; i < sample.size(); ++i) {
        if (sample.zones.zones[i] == Zone::Mem) {
          mem_max = std::max(mem_max,
                             static_cast<double>(logits->grad.row(static_cast<Index>(i)).cwiseAbs().maxCoeff()));
        }
      }
    }
    report.mem_logit_grad_max = mem_max;
    for (auto& np : model.named_params()) analytic.push_back(np.param->grad);
  }

  // Pass 3: central finite differences of the total loss against pass 2.
  if (opt.run_finite_diff) {
    report.finite_diff_ran = true;
    auto eval_loss = [&]() -> double {
      Mat<S> logits = forward(model, sample.tokens, sample.position_ids, sample.mask);
      return compute_loss(logits, sample).total();
    };
    NormalRng pick(opt.seed);
    auto params = model.named_params();
    const double floor = opt.atol / opt.rtol;
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      auto& value = params[pi].param->value;
      const Index size = value.size();
      std::vector<Index> coords;
      if (opt.max_coords_per_param <= 0 || size <= opt.max_coords_per_param) {
        coords.resize(static_cast<std::size_t>(size));
        for (Index i = 0; i < size; ++i) coords[static_cast<std::size_t>(i)] = i;
      } else {
        coords.reserve(static_cast<std::size_t>(opt.max_coords_per_param));
        for (long i = 0; i < opt.max_coords_per_param; ++i) {
          coords.push_back(static_cast<Index>(pick.below(static_cast<std::uint64_t>(size))));
        }
      }
      for (Index c : coords) {
        S* data = value.data();
        const S original = data[c];
        data[c] = original + static_cast<S>(opt.h);
        const double up = eval_loss();
        data[c] = original - static_cast<S>(opt.h);
        const double down = eval_loss();
        data[c] = original;
        const double numeric = (up - down) / (2.0 * opt.h);
        const double analytic_g = static_cast<double>(analytic[pi].data()[c]);
        const double err = std::abs(analytic_g - numeric) /
                           (floor + std::max(std::abs(analytic_g), std::abs(numeric)));
        report.fd_max_rel_err = std::max(report.fd_max_rel_err, err);
      }
    }
  }
  model.zero_grad();
  return report;
}

}  // namespace loma
