// End-to-end checks of the command-line tool: exit codes, artifacts,
// golden mask output, and rerun determinism. argv[1] = CLI binary,
// argv[2] = golden file directory.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>

#include "loma/serialize.hpp"

namespace {

int failures = 0;

void check(bool ok, const std::string& what) {
  if (ok) {
    std::cout << "  ok: " << what << "\n";
  } else {
    ++failures;
    std::cout << "  FAILED: " << what << "\n";
  }
}

int run(const std::string& cmd) {
  const int status = std::system((cmd + " >cli_test_stdout.log 2>cli_test_stderr.log").c_str());
  if (status == -1) return -1;
  return (status >> 8) & 0xff;
}

}  // namespace

int run_all(const std::string& cli, const std::string& golden);

int main(int argc, char** argv) {
  if (argc < 3) {
    std::cerr << "usage: test_cli <loma-binary> <golden-dir>\n";
    return 2;
  }
  try {
    return run_all(argv[1], argv[2]);
  } catch (const std::exception& e) {
    std::cerr << "test_cli: unexpected exception: " << e.what() << "\n";
    return 1;
  }
}

int run_all(const std::string& cli_arg, const std::string& golden_arg) {
  const std::string cli = cli_arg;
  const std::string golden = golden_arg;
  namespace fs = std::filesystem;
  const std::string work = "cli_test_work";
  fs::remove_all(work);
  fs::create_directories(work);

  // mask-dump against the checked-in golden file
  check(run(cli + " mask-dump --t 2 --c 2 --chunks 3 --out " + work + "/mask") == 0, "mask-dump exits 0");
  check(loma::read_text_file(work + "/mask/mask.csv") == loma::read_text_file(golden + "/mask_t2_c2_n3.csv"),
        "30x30 mask matches the golden file");
  check(fs::exists(work + "/mask/position_ids.csv"), "position ids emitted");
  check(fs::exists(work + "/mask/config.snapshot.ini"), "config snapshot emitted");

  // smoke-profile training: miniature dims, 50 steps
  const std::string train_flags =
      " train --layers 1 --heads 2 --d-model 16 --d-ff 32 --t 2 --c 2 --s-hat 10"
      " --docs 8 --doc-chunks 1 --steps 50 --batch 2 --warmup 5 --seed 3 --out ";
  check(run(cli + train_flags + work + "/run1") == 0, "smoke train exits 0");
  const std::string loss1 = loma::read_text_file(work + "/run1/loss.csv");
  check(std::count(loss1.begin(), loss1.end(), '\n') == 51, "loss.csv has header + 50 rows");
  check(fs::exists(work + "/run1/checkpoint.bin"), "checkpoint written");

  // rerun with the same seed: byte-identical artifacts
  check(run(cli + train_flags + work + "/run2") == 0, "rerun exits 0");
  check(loma::hash_file(work + "/run1/loss.csv") == loma::hash_file(work + "/run2/loss.csv"),
        "rerun loss.csv is byte-identical");
  check(loma::hash_file(work + "/run1/checkpoint.bin") == loma::hash_file(work + "/run2/checkpoint.bin"),
        "rerun checkpoint is byte-identical");

  // generation: short LoMA output vs disabled compression must agree when the
  // reading zone never fills (t=8, c=8 -> read_len 64 > tokens processed)
  const std::string gen_common = " generate --checkpoint " + work + "/run1/checkpoint.bin" +
                                 " --prompt-ids 1,2,3,4 --max-new 12 --t 8 --c 8 --out ";
  check(run(cli + gen_common + work + "/gen_loma") == 0, "generate exits 0");
  check(run(cli + gen_common + work + "/gen_plain --disable-compression") == 0,
        "generate --disable-compression exits 0");
  check(loma::read_text_file(work + "/gen_loma/trace.json") ==
            loma::read_text_file(work + "/gen_plain/trace.json"),
        "no-compression fast path matches when compression never fires");

  // compression trace: t=2,c=2 and a long prompt must show events
  check(run(cli + " generate --checkpoint " + work + "/run1/checkpoint.bin" +
            " --prompt-ids 1,2,3,4,5,6,7,8,9 --max-new 8 --t 2 --c 2 --out " + work + "/gen_events") == 0,
        "compressing generate exits 0");
  check(loma::read_text_file(work + "/gen_events/trace.json").find("\"pre_len\": 4") != std::string::npos,
        "trace records a 4->2 compression event");

  // eval runs on the smoke checkpoint
  check(run(cli + " eval --checkpoint " + work + "/run1/checkpoint.bin --t 2 --c 2 --eval-docs 4"
                  " --doc-chunks 1 --seed 3 --out " + work + "/eval") == 0,
        "eval exits 0");
  check(fs::exists(work + "/eval/accuracy.csv"), "accuracy.csv emitted");

  // perf with a closed-form cost model
  check(run(cli + " perf --t 4 --c 4 --chunks-m 8 --cost-model linear --out " + work + "/perf") == 0,
        "perf exits 0");
  const std::string cost = loma::read_text_file(work + "/perf/cost.csv");
  check(cost.find("8128") != std::string::npos, "vanilla closed-form sum appears in cost.csv");

  // config file + flag override precedence
  loma::write_file(work + "/cfg.ini", "[loma]\nt = 2\nc = 2\n[model]\nprecision = f64\n");
  check(run(cli + " mask-dump --config " + work + "/cfg.ini --chunks 1 --t 1 --c 1 --out " +
            work + "/mask_override") == 0,
        "config + flags parse");
  const std::string snap = loma::read_text_file(work + "/mask_override/config.snapshot.ini");
  check(snap.find("t = 1") != std::string::npos, "flag overrides config file in the snapshot");

  // exit codes: geometry (3), config (2), missing file (2)
  check(run(cli + " train --layers 1 --heads 2 --d-model 16 --d-ff 32 --t 2 --c 2 --s-hat 11"
                  " --docs 4 --doc-chunks 1 --steps 5 --batch 1 --warmup 1 --out " + work + "/bad") == 3,
        "bad geometry exits 3");
  check(run(cli + " train --precision f16 --out " + work + "/bad2") == 2, "bad precision exits 2");
  check(run(cli + " generate --checkpoint " + work + "/missing.bin --prompt hi --out " + work + "/bad3") == 2,
        "missing checkpoint exits 2");
  check(run(cli + " eval --t 2 --c 2 --out " + work + "/bad4") == 2, "eval without checkpoint exits 2");

  if (failures == 0) {
    std::cout << "cli: all checks passed\n";
    return 0;
  }
  std::cout << "cli: " << failures << " checks FAILED\n";
  return 1;
}
