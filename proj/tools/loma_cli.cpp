// Command-line front end: train / generate / eval / perf / mask-dump.
//
// Every command resolves its settings from built-in defaults, then an
// optional INI config file (--config), then explicit flags, and writes the
// resolved snapshot into the output directory.

#include <filesystem>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "loma/corpus.hpp"
#include "loma/eval.hpp"
#include "loma/generator.hpp"
#include "loma/model_io.hpp"
#include "loma/runconfig.hpp"
#include "loma/serialize.hpp"
#include "loma/structuring.hpp"
#include "loma/training.hpp"

namespace {

using namespace loma;

// Records "flag was set" -> config key bindings so flags can override files.
struct Binder {
  std::map<std::string, std::string>* staged;
  CLI::App* cmd;

  CLI::Option* opt(const std::string& flag, const std::string& key, const std::string& help) {
    auto* m = staged;  // outlives this binder
    return cmd->add_option_function<std::string>(
        flag, [m, key](const std::string& v) { (*m)[key] = v; }, help);
  }
  CLI::Option* toggle(const std::string& flag, const std::string& key, const std::string& help) {
    auto* m = staged;
    return cmd->add_flag_callback(flag, [m, key] { (*m)[key] = "true"; }, help);
  }
};

KeyValueConfig resolve(const std::string& config_path, const std::map<std::string, std::string>& staged) {
  KeyValueConfig cfg;
  // defaults
  cfg.set("run.seed", "0");
  cfg.set("loma.t", "4");
  cfg.set("loma.c", "2");
  cfg.set("loma.position_type", "intermittent");
  cfg.set("model.layers", "4");
  cfg.set("model.heads", "4");
  cfg.set("model.d_model", "128");
  cfg.set("model.d_ff", "256");
  cfg.set("model.max_position", "4096");
  cfg.set("model.precision", "f64");
  cfg.set("train.steps", "1000");
  cfg.set("train.batch", "8");
  cfg.set("train.lr_max", "3e-4");
  cfg.set("train.lr_min", "3e-5");
  cfg.set("train.warmup", "100");
  cfg.set("train.weight_decay", "0.01");
  cfg.set("train.rep_weight", "1.0");
  cfg.set("train.eval_every", "0");
  cfg.set("train.stop_rep_loss", "0");
  cfg.set("train.smooth_window", "200");
  cfg.set("corpus.synthetic_docs", "2048");
  cfg.set("corpus.synthetic_chunks", "2");
  cfg.set("corpus.newline_delimited", "false");
  cfg.set("generate.max_new", "64");
  cfg.set("generate.eos", "-1");
  cfg.set("generate.disable_compression", "false");
  cfg.set("perf.chunks_m", "8");
  cfg.set("perf.cost_model", "measured");
  cfg.set("perf.grid_k_max", "1024");
  cfg.set("perf.grid_points", "9");
  cfg.set("perf.repeats", "9");
  cfg.set("eval.docs", "64");

  if (!config_path.empty()) {
    const KeyValueConfig file_cfg = KeyValueConfig::from_file(config_path);
    for (const auto& [k, v] : file_cfg.values()) cfg.set(k, v);
  }
  for (const auto& [k, v] : staged) cfg.set(k, v);
  return cfg;
}

LomaParams loma_params(const KeyValueConfig& cfg) {
  LomaParams p;
  p.mem_len = static_cast<int>(cfg.get_int("loma.t", 4));
  p.compress_ratio = static_cast<int>(cfg.get_int("loma.c", 2));
  p.validate();
  return p;
}

ModelConfig model_config(const KeyValueConfig& cfg) {
  ModelConfig m;
  m.n_layers = static_cast<int>(cfg.get_int("model.layers", 4));
  m.n_heads = static_cast<int>(cfg.get_int("model.heads", 4));
  m.d_model = static_cast<int>(cfg.get_int("model.d_model", 128));
  m.d_head = static_cast<int>(cfg.get_int("model.d_head", m.d_model / std::max(m.n_heads, 1)));
  m.d_ff = static_cast<int>(cfg.get_int("model.d_ff", 256));
  m.max_position = static_cast<int>(cfg.get_int("model.max_position", 4096));
  m.seed = static_cast<std::uint64_t>(cfg.get_int("run.seed", 0));
  m.vocab_size = Vocab{}.total_size();
  m.validate();
  return m;
}

std::string out_dir(const KeyValueConfig& cfg) {
  const std::string out = cfg.get_str("run.out", "");
  if (out.empty()) throw ConfigError("--out directory is required");
  std::filesystem::create_directories(out);
  return out;
}

void write_snapshot(const KeyValueConfig& cfg, const std::string& dir) {
  write_file(dir + "/config.snapshot.ini", cfg.to_ini());
}

bool use_f32(const KeyValueConfig& cfg) {
  const std::string p = cfg.get_str("model.precision", "f64");
  if (p == "f32") return true;
  if (p == "f64") return false;
  throw ConfigError("model.precision must be f32 or f64, got '" + p + "'");
}

Corpus corpus_from_config(const KeyValueConfig& cfg, const LomaParams& p, std::uint64_t seed) {
  const std::string manifest = cfg.get_str("corpus.manifest", "");
  if (!manifest.empty()) {
    return load_corpus(manifest, Vocab{}, cfg.get_bool("corpus.newline_delimited", false));
  }
  return make_random_corpus(static_cast<std::size_t>(cfg.get_int("corpus.synthetic_docs", 2048)),
                            static_cast<int>(cfg.get_int("corpus.synthetic_chunks", 2)), p, seed);
}

// ---------------------------------------------------------------------------

template <class S>
int run_train(const KeyValueConfig& cfg) {
  const std::string dir = out_dir(cfg);
  const LomaParams p = loma_params(cfg);
  const ModelConfig mc = model_config(cfg);
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("run.seed", 0));

  TrainConfig tc;
  tc.max_steps = cfg.get_int("train.steps", 1000);
  tc.batch_size = static_cast<int>(cfg.get_int("train.batch", 8));
  tc.lr_max = cfg.get_f64("train.lr_max", 3e-4);
  tc.lr_min = cfg.get_f64("train.lr_min", 3e-5);
  tc.warmup_steps = cfg.get_int("train.warmup", 100);
  tc.weight_decay = cfg.get_f64("train.weight_decay", 0.01);
  tc.rep_weight = cfg.get_f64("train.rep_weight", 1.0);
  tc.eval_every = cfg.get_int("train.eval_every", 0);
  tc.stop_rep_loss = cfg.get_f64("train.stop_rep_loss", 0.0);
  tc.smooth_window = cfg.get_int("train.smooth_window", 200);
  tc.seed = seed;
  tc.sample_len = cfg.get_int("loma.s_hat",
                              cfg.get_int("corpus.synthetic_chunks", 2) * static_cast<long>(p.span()));

  const Corpus corpus = corpus_from_config(cfg, p, seed);
  auto model = init_model<S>(mc);

  std::string eval_rows = "step,zone_accuracy,token_accuracy\n";
  TrainCallback<S> callback;
  Corpus eval_corpus;
  if (tc.eval_every > 0) {
    eval_corpus =
        make_random_corpus(static_cast<std::size_t>(cfg.get_int("eval.docs", 64)),
                           static_cast<int>(cfg.get_int("corpus.synthetic_chunks", 2)), p, seed + 1);
    callback = [&](long step, Model<S>& m) {
      const AccuracyReport r = eval_repetition(m, eval_corpus, p);
      char buf[128];
      std::snprintf(buf, sizeof(buf), "%ld,%.17g,%.17g\n", step, r.zone_accuracy(), r.token_accuracy());
      eval_rows += buf;
      std::cout << "step " << step << ": token_acc " << r.token_accuracy() << " zone_acc "
                << r.zone_accuracy() << std::endl;
    };
  }

  const TrainResult result = train(model, corpus, p, tc, callback);
  write_file(dir + "/loss.csv", loss_curves_csv(result.steps));
  save_checkpoint(model, dir + "/checkpoint.bin");
  if (tc.eval_every > 0) write_file(dir + "/eval.csv", eval_rows);
  write_snapshot(cfg, dir);
  if (!result.steps.empty()) {
    const auto& last = result.steps.back();
    std::cout << "trained " << result.steps.size() << " steps"
              << (result.stopped_at >= 0 ? " (early stop)" : "") << ", final L_Rep/token "
              << last.rep_per_token() << ", final L_Read/token " << last.read_per_token() << "\n";
  }
  std::cout << "wrote " << dir << "/checkpoint.bin and loss.csv\n";
  return 0;
}

template <class S>
int run_generate(const KeyValueConfig& cfg) {
  const std::string dir = out_dir(cfg);
  const std::string ckpt = cfg.get_str("generate.checkpoint", "");
  if (ckpt.empty()) throw ConfigError("--checkpoint is required for generate");
  const LomaParams p = loma_params(cfg);
  auto model = load_checkpoint<S>(ckpt);
  const Vocab vocab;

  std::vector<int> prompt;
  std::string prompt_ids = cfg.get_str("generate.prompt_ids", "");
  if (!prompt_ids.empty()) {
    // accepts both a bare comma list and a JSON array
    std::erase_if(prompt_ids, [](char ch) { return ch == '[' || ch == ']' || ch == ' '; });
    std::size_t pos = 0;
    while (pos < prompt_ids.size()) {
      std::size_t next = prompt_ids.find(',', pos);
      if (next == std::string::npos) next = prompt_ids.size();
      try {
        prompt.push_back(std::stoi(prompt_ids.substr(pos, next - pos)));
      } catch (const std::exception&) {
        throw ConfigError("unparseable token id in --prompt-ids: '" +
                          prompt_ids.substr(pos, next - pos) + "'");
      }
      pos = next + 1;
    }
  } else {
    prompt = vocab.tokenize(cfg.get_str("generate.prompt", ""));
  }

  auto state = GeneratorState<S>::make(
      model, p, vocab.mem_id(), cfg.get_int("generate.max_new", 64),
      position_scheme_from_string(cfg.get_str("loma.position_type", "intermittent")));
  state.compression_enabled = !cfg.get_bool("generate.disable_compression", false);

  const GenerationTrace trace = generate(state, prompt, static_cast<int>(cfg.get_int("generate.eos", -1)));
  const std::string text = vocab.detokenize(trace.tokens);
  write_file(dir + "/trace.json", trace.to_json());
  write_file(dir + "/text.txt", text);
  write_snapshot(cfg, dir);
  std::cout << text << "\n";
  std::cout << "emitted " << trace.tokens.size() << " tokens, " << trace.events.size()
            << " compression events, peak cache " << trace.peak_cache << "\n";
  return 0;
}

template <class S>
int run_eval(const KeyValueConfig& cfg) {
  const std::string dir = out_dir(cfg);
  const std::string ckpt = cfg.get_str("generate.checkpoint", "");
  if (ckpt.empty()) throw ConfigError("--checkpoint is required for eval");
  const LomaParams p = loma_params(cfg);
  auto model = load_checkpoint<S>(ckpt);
  const std::uint64_t seed = static_cast<std::uint64_t>(cfg.get_int("run.seed", 0));
  Corpus corpus;
  const std::string manifest = cfg.get_str("corpus.manifest", "");
  if (!manifest.empty()) {
    corpus = load_corpus(manifest, Vocab{}, cfg.get_bool("corpus.newline_delimited", false));
  } else {
    corpus = make_random_corpus(static_cast<std::size_t>(cfg.get_int("eval.docs", 64)),
                                static_cast<int>(cfg.get_int("corpus.synthetic_chunks", 2)), p, seed + 1);
  }
  const AccuracyReport r = eval_repetition(
      model, corpus, p, position_scheme_from_string(cfg.get_str("loma.position_type", "intermittent")));
  write_file(dir + "/accuracy.csv", accuracy_csv(r));
  write_snapshot(cfg, dir);
  std::cout << "chunks " << r.n_chunks << " tokens " << r.n_tokens << "\n";
  std::cout << "zone_accuracy " << r.zone_accuracy() << "\n";
  std::cout << "token_accuracy " << r.token_accuracy() << "\n";
  return 0;
}

CostModel cost_model_from_string(const std::string& kind,
                                 const std::vector<LatencyPoint>& measured) {
  if (kind == "linear") return CostModel::cache_linear();
  if (kind.rfind("constant:", 0) == 0) return CostModel::constant(std::stod(kind.substr(9)));
  if (kind.rfind("affine:", 0) == 0) {
    const std::string rest = kind.substr(7);
    const std::size_t c1 = rest.find(',');
    const std::size_t c2 = rest.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos) {
      throw ConfigError("affine cost model needs a,b,d");
    }
    return CostModel::affine(std::stod(rest.substr(0, c1)), std::stod(rest.substr(c1 + 1, c2 - c1 - 1)),
                             std::stod(rest.substr(c2 + 1)));
  }
  if (kind == "measured") {
    std::map<long, std::map<long, double>> table;
    for (const auto& pt : measured) table[pt.l][pt.k] = pt.median_ms;
    return CostModel::from_table(std::move(table));
  }
  throw ConfigError("unknown cost model '" + kind + "'");
}

template <class S>
int run_perf(const KeyValueConfig& cfg) {
  const std::string dir = out_dir(cfg);
  const LomaParams p = loma_params(cfg);
  const long chunks_m = cfg.get_int("perf.chunks_m", 8);
  const std::string kind = cfg.get_str("perf.cost_model", "measured");

  std::vector<LatencyPoint> measured;
  if (kind == "measured") {
    ModelConfig mc = model_config(cfg);
    auto model = init_model<S>(mc);  // timing is weight independent
    const long k_max = cfg.get_int("perf.grid_k_max", 1024);
    const long n_points = std::max<long>(cfg.get_int("perf.grid_points", 9), 2);
    std::vector<long> ks;
    for (long i = 0; i < n_points; ++i) ks.push_back(i * k_max / (n_points - 1));
    const std::vector<long> ls{1, static_cast<long>(p.read_len())};
    measured = measure_latency(model, ls, ks, static_cast<int>(cfg.get_int("perf.repeats", 9)),
                               static_cast<std::uint64_t>(cfg.get_int("run.seed", 0)));
    write_file(dir + "/latency.csv", latency_csv(measured));
    std::cout << "T(1,k) slope in k: " << latency_slope_in_k(measured, 1) << " ms/entry\n";
  }

  const CostModel cm = cost_model_from_string(kind, measured);
  std::vector<std::pair<long, CostComparison>> rows;
  for (long m = 1; m <= chunks_m; ++m) rows.push_back({m, predict_costs(cm, p, m)});
  write_file(dir + "/cost.csv", cost_csv(rows));
  write_snapshot(cfg, dir);

  const CostComparison& last = rows.back().second;
  std::cout << "m=" << chunks_m << ": vanilla " << last.vanilla_cost << ", compressed "
            << last.loma_cost() << " (read " << last.loma_read_cost << " + overhead "
            << last.loma_compress_cost << ")\n";
  std::cout << "peak cache: vanilla " << last.vanilla_peak_cache << " entries, compressed "
            << last.loma_peak_cache << " entries, steady-state factor " << last.memory_factor << "\n";
  const long crossover = crossover_chunks(cm, p, std::max(chunks_m * 64, 4096L));
  if (crossover > 0) {
    std::cout << "compressed schedule is cheaper from m = " << crossover << " chunks\n";
  } else {
    std::cout << "compressed schedule never crosses over on this cost model\n";
  }
  return 0;
}

int run_mask_dump(const KeyValueConfig& cfg) {
  const std::string dir = out_dir(cfg);
  const LomaParams p = loma_params(cfg);
  const int n_chunks = static_cast<int>(cfg.get_int("loma.chunks", 3));
  const MaskMat mask = build_sample_mask(p, n_chunks);
  const auto ids = build_position_ids(p, n_chunks);
  write_file(dir + "/mask.csv", mask_to_csv(mask));
  write_file(dir + "/mask.rle", mask_to_rle(mask));
  write_file(dir + "/position_ids.csv", ints_to_csv(ids));
  write_file(dir + "/position_ids.rle", ints_to_rle(ids));
  write_snapshot(cfg, dir);
  std::cout << "wrote " << mask.rows() << "x" << mask.cols() << " mask and " << ids.size()
            << " position ids to " << dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LoMA: desk-scale decoder with lossless KV-cache compression"};
  app.require_subcommand(1);

  std::map<std::string, std::string> staged;
  std::string config_path;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "INI config file (flags override it)");
    Binder b{&staged, cmd};
    b.opt("--seed", "run.seed", "global seed");
    b.opt("--out", "run.out", "output directory");
    b.opt("--t", "loma.t", "memory zone length t");
    b.opt("--c", "loma.c", "compression ratio c");
    b.opt("--s-hat", "loma.s_hat", "structured training length");
    b.opt("--position-type", "loma.position_type", "intermittent|sequential");
    return b;
  };

  auto* train_cmd = app.add_subcommand("train", "train a compression-capable checkpoint");
  {
    Binder b = add_common(train_cmd);
    b.opt("--steps", "train.steps", "optimizer steps");
    b.opt("--batch", "train.batch", "samples per step");
    b.opt("--lr-max", "train.lr_max", "peak learning rate");
    b.opt("--lr-min", "train.lr_min", "floor learning rate");
    b.opt("--warmup", "train.warmup", "warmup steps");
    b.opt("--weight-decay", "train.weight_decay", "decoupled weight decay");
    b.opt("--rep-weight", "train.rep_weight", "repetition loss weight");
    b.opt("--eval-every", "train.eval_every", "evaluate repetition accuracy every N steps");
    b.opt("--stop-rep-loss", "train.stop_rep_loss", "early stop threshold on smoothed L_Rep/token");
    b.opt("--layers", "model.layers", "decoder layers");
    b.opt("--heads", "model.heads", "attention heads");
    b.opt("--d-model", "model.d_model", "model width");
    b.opt("--d-ff", "model.d_ff", "MLP width");
    b.opt("--max-position", "model.max_position", "rotary position capacity");
    b.opt("--precision", "model.precision", "f32|f64");
    b.opt("--corpus-manifest", "corpus.manifest", "file listing corpus documents");
    b.opt("--docs", "corpus.synthetic_docs", "synthetic corpus size");
    b.opt("--doc-chunks", "corpus.synthetic_chunks", "reading zones per synthetic document");
  }

  auto* gen_cmd = app.add_subcommand("generate", "greedy generation with in-flight compression");
  {
    Binder b = add_common(gen_cmd);
    b.opt("--checkpoint", "generate.checkpoint", "trained checkpoint path");
    b.opt("--prompt", "generate.prompt", "prompt text");
    b.opt("--prompt-ids", "generate.prompt_ids", "comma-separated prompt token ids");
    b.opt("--max-new", "generate.max_new", "emission cap");
    b.opt("--eos", "generate.eos", "stop token id (-1 disables)");
    b.toggle("--disable-compression", "generate.disable_compression", "plain autoregressive decoding");
  }

  auto* eval_cmd = app.add_subcommand("eval", "repetition accuracy of a checkpoint");
  {
    Binder b = add_common(eval_cmd);
    b.opt("--checkpoint", "generate.checkpoint", "trained checkpoint path");
    b.opt("--eval-docs", "eval.docs", "synthetic evaluation documents");
    b.opt("--doc-chunks", "corpus.synthetic_chunks", "reading zones per document");
    b.opt("--corpus-manifest", "corpus.manifest", "evaluate on a file corpus instead");
    b.opt("--precision", "model.precision", "f32|f64");
  }

  auto* perf_cmd = app.add_subcommand("perf", "cost model and host latency measurements");
  {
    Binder b = add_common(perf_cmd);
    b.opt("--chunks-m", "perf.chunks_m", "generation length in reading chunks");
    b.opt("--cost-model", "perf.cost_model", "measured|linear|constant:V|affine:a,b,d");
    b.opt("--grid-k-max", "perf.grid_k_max", "largest cache length on the timing grid");
    b.opt("--grid-points", "perf.grid_points", "timing grid size");
    b.opt("--repeats", "perf.repeats", "timing repetitions per grid point");
    b.opt("--layers", "model.layers", "decoder layers");
    b.opt("--d-model", "model.d_model", "model width");
    b.opt("--heads", "model.heads", "attention heads");
    b.opt("--d-ff", "model.d_ff", "MLP width");
  }

  auto* mask_cmd = app.add_subcommand("mask-dump", "write attention masks and position ids");
  {
    Binder b = add_common(mask_cmd);
    b.opt("--chunks", "loma.chunks", "chunk count");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    const KeyValueConfig cfg = resolve(config_path, staged);
    if (train_cmd->parsed()) return use_f32(cfg) ? run_train<float>(cfg) : run_train<double>(cfg);
    if (gen_cmd->parsed()) {
      const std::string ckpt = cfg.get_str("generate.checkpoint", "");
      if (ckpt.empty()) throw ConfigError("--checkpoint is required for generate");
      return checkpoint_scalar_bytes(ckpt) == 4 ? run_generate<float>(cfg) : run_generate<double>(cfg);
    }
    if (eval_cmd->parsed()) {
      const std::string ckpt = cfg.get_str("generate.checkpoint", "");
      if (ckpt.empty()) throw ConfigError("--checkpoint is required for eval");
      return checkpoint_scalar_bytes(ckpt) == 4 ? run_eval<float>(cfg) : run_eval<double>(cfg);
    }
    if (perf_cmd->parsed()) return use_f32(cfg) ? run_perf<float>(cfg) : run_perf<double>(cfg);
    if (mask_cmd->parsed()) return run_mask_dump(cfg);
    throw ConfigError("no command given");
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 2;
  } catch (const GeometryError& e) {
    std::cerr << "geometry error: " << e.what() << "\n";
    return 3;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const StateError& e) {
    std::cerr << "state error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
