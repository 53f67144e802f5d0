// SPDX-License-Identifier: Apache-2.0
//
// textfuse: generate data, train, fuse, detect, evaluate, self-check.
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "textfuse/textfuse.hpp"

namespace fs = std::filesystem;
using namespace textfuse;

namespace {

struct GenArgs {
  std::uint64_t seed = 0;
  int n = 200, size = 64, classes = 3;
  std::string out;
};

struct TrainArgs {
  std::string data, out;
  std::size_t epochs = TrainerConfig{}.epochs;
  std::size_t batch = TrainerConfig{}.batch_size;
  double lr = TrainerConfig{}.lr0;
  std::string mode = "bilevel";
  bool no_self = false, no_cross = false, no_codebook = false, no_cl = false, no_sl = false;
  std::uint64_t seed = 0;
};

struct InferArgs {
  std::string ckpt, ir, vis, prompt, out;
  double conf = 0.25;
};

struct EvalArgs {
  std::string ckpt, data, report, fused_dir;
};

void echo(const std::string& cmd, std::initializer_list<std::pair<const char*, std::string>> kv) {
  std::printf("textfuse %s\n", cmd.c_str());
  for (const auto& [k, v] : kv) std::printf("  %-14s %s\n", k, v.c_str());
  std::printf("  %-14s %zu\n", "threads", thread_count());
  std::fflush(stdout);
}

std::string b(bool v) { return v ? "true" : "false"; }
std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

// The prompt flag takes literal text, or @path to read it from a file.
std::string prompt_text(const std::string& arg) { return arg.rfind('@', 0) == 0 ? read_file(arg.substr(1)) : arg; }

int cmd_gen(const GenArgs& a) {
  echo("gen", {{"seed", std::to_string(a.seed)},
               {"n", std::to_string(a.n)},
               {"size", std::to_string(a.size)},
               {"classes", std::to_string(a.classes)},
               {"out", a.out}});
  generate_synthetic(a.seed, a.n, a.size, a.classes, a.out);
  std::printf("wrote %d samples to %s\n", a.n, a.out.c_str());
  return 0;
}

int cmd_train(const TrainArgs& a) {
  TrainerConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch;
  cfg.lr0 = a.lr;
  cfg.mode = parse_mode(a.mode);
  cfg.seed = a.seed;
  cfg.fusion.use_self_attention = !a.no_self;
  cfg.fusion.use_cross_attention = !a.no_cross;
  cfg.fusion.use_codebook = !a.no_codebook;
  cfg.toggles.use_cc = !a.no_cl;
  cfg.toggles.use_str = !a.no_sl;
  cfg.validate();
  echo("train", {{"data", a.data},
                 {"out", a.out},
                 {"epochs", std::to_string(cfg.epochs)},
                 {"batch", std::to_string(cfg.batch_size)},
                 {"lr", num(cfg.lr0)},
                 {"lr-decay", num(cfg.gamma)},
                 {"lower/upper", std::to_string(cfg.lower_steps_per_upper)},
                 {"mode", mode_name(cfg.mode)},
                 {"self-att", b(cfg.fusion.use_self_attention)},
                 {"cross-att", b(cfg.fusion.use_cross_attention)},
                 {"codebook", b(cfg.fusion.use_codebook)},
                 {"cc-loss", b(cfg.toggles.use_cc)},
                 {"str-loss", b(cfg.toggles.use_str)},
                 {"seed", std::to_string(cfg.seed)}});
  Trainer trainer(cfg, load_dataset(a.data));
  fs::create_directories(a.out);
  const fs::path ckpt = fs::path(a.out) / "model.txf", log = fs::path(a.out) / "train_log.csv";
  trainer.train([&](const EpochLog& r) {
    std::printf("epoch %4zu  step %7zu  l_f %.5f  g %.5f  l_d %.5f  alpha %.3f/%.3f  lr %.3g\n", r.epoch, r.step,
                r.loss.l_f, r.loss.g, r.loss.l_d, r.loss.alpha1, r.loss.alpha2, r.lr);
    std::fflush(stdout);
    save_checkpoint(ckpt, make_checkpoint(trainer));
    write_file_atomic(log, format_log_csv(trainer.log()));
  });
  std::printf("checkpoint %s\nlog %s\n", ckpt.c_str(), log.c_str());
  return 0;
}

int cmd_fuse(const InferArgs& a) {
  echo("fuse", {{"ckpt", a.ckpt}, {"ir", a.ir}, {"vis", a.vis}, {"prompt", a.prompt}, {"out", a.out}});
  const Checkpoint c = load_checkpoint(a.ckpt);
  const InferenceResult r = infer(c, read_pgm(a.ir), read_pgm(a.vis), prompt_text(a.prompt));
  const Image fused = quantize_8bit(r.fused);
  write_file_atomic(a.out, encode_pgm(fused.height, fused.width, to_bytes(fused)));
  std::printf("wrote %zux%zu fused image to %s\n", fused.width, fused.height, a.out.c_str());
  return 0;
}

int cmd_detect(const InferArgs& a) {
  echo("detect", {{"ckpt", a.ckpt}, {"ir", a.ir}, {"vis", a.vis}, {"prompt", a.prompt}, {"conf", num(a.conf)},
                  {"out", a.out}});
  if (!(a.conf >= 0 && a.conf <= 1)) throw ArgumentError("--conf must lie in [0, 1]");
  const Checkpoint c = load_checkpoint(a.ckpt);
  InferenceOptions opt;
  opt.conf_threshold = a.conf;
  const InferenceResult r = infer(c, read_pgm(a.ir), read_pgm(a.vis), prompt_text(a.prompt), opt);
  std::string text;
  char buf[160];
  for (const Detection& d : r.detections) {
    std::snprintf(buf, sizeof buf, "%d %.6f %.6f %.6f %.6f %.6f\n", d.class_id, d.box.cx, d.box.cy, d.box.w,
                  d.box.h, d.confidence);
    text += buf;
  }
  write_file_atomic(a.out, text);
  std::printf("wrote %zu detections to %s\n", r.detections.size(), a.out.c_str());
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  const fs::path fused_dir = a.fused_dir.empty() ? fs::path(a.report).parent_path() / "fused" : fs::path(a.fused_dir);
  echo("eval", {{"ckpt", a.ckpt}, {"data", a.data}, {"report", a.report}, {"fused-dir", fused_dir.string()}});
  const Checkpoint c = load_checkpoint(a.ckpt);
  const std::vector<SampleRecord> data = load_dataset(a.data);
  const EvalReport rep = evaluate(c, data);
  fs::create_directories(fused_dir);
  for (std::size_t i = 0; i < data.size(); ++i) write_pgm(fused_dir / (data[i].id + ".pgm"), rep.fused[i]);
  const std::string csv = format_report_csv(rep);
  write_file_atomic(a.report, csv);
  std::cout << csv;
  return 0;
}

int cmd_gradcheck(std::uint64_t seed) {
  echo("gradcheck", {{"seed", std::to_string(seed)}});
  const auto results = run_gradcheck_suite(seed);
  std::size_t failed = 0;
  std::printf("%-32s %-6s %12s %8s\n", "check", "result", "max rel err", "coords");
  for (const GradCheckResult& r : results) {
    std::printf("%-32s %-6s %12.3e %8zu\n", r.name.c_str(), r.passed ? "PASS" : "FAIL", r.max_rel_error, r.coords);
    failed += !r.passed;
  }
  std::printf("%zu/%zu passed\n", results.size() - failed, results.size());
  return failed ? 1 : 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Text-guided infrared/visible image fusion with a bilevel-trained detector"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Render a synthetic paired IR/VIS dataset");
  g->add_option("--seed", gen.seed, "Generator seed")->capture_default_str();
  g->add_option("--n", gen.n, "Number of samples")->capture_default_str();
  g->add_option("--size", gen.size, "Image side length: 32, 64 or 128")->capture_default_str();
  g->add_option("--classes", gen.classes, "Number of object classes (1-5)")->capture_default_str();
  g->add_option("--out", gen.out, "Output dataset directory")->required();

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train fusion network and detector");
  t->add_option("--data", tr.data, "Dataset directory")->required();
  t->add_option("--out", tr.out, "Output directory for model.txf and train_log.csv")->required();
  t->add_option("--epochs", tr.epochs, "Training epochs")->capture_default_str();
  t->add_option("--batch", tr.batch, "Batch size (clamped to the dataset size)")->capture_default_str();
  t->add_option("--lr", tr.lr, "Initial learning rate, decayed by 0.99 per epoch")->capture_default_str();
  t->add_option("--mode", tr.mode, "bilevel (5 lower steps per upper step) or direct (joint)")
      ->check(CLI::IsMember({"bilevel", "direct"}))
      ->capture_default_str();
  t->add_flag("--no-self-att", tr.no_self, "Disable intra-domain self-attention");
  t->add_flag("--no-cross-att", tr.no_cross, "Disable text cross-attention");
  t->add_flag("--no-codebook", tr.no_codebook, "Disable codebook quantization");
  t->add_flag("--no-cl", tr.no_cl, "Disable the content-consistency loss");
  t->add_flag("--no-sl", tr.no_sl, "Disable the structure loss");
  t->add_option("--seed", tr.seed, "Seed for initialization and batch order")->capture_default_str();

  InferArgs fu;
  auto* f = app.add_subcommand("fuse", "Fuse one IR/VIS pair into a PGM");
  f->add_option("--ckpt", fu.ckpt, "Checkpoint file")->required();
  f->add_option("--ir", fu.ir, "Infrared PGM")->required();
  f->add_option("--vis", fu.vis, "Visible PGM")->required();
  f->add_option("--prompt", fu.prompt, "Prompt text, or @file")->required();
  f->add_option("--out", fu.out, "Output PGM")->required();

  InferArgs de;
  auto* d = app.add_subcommand("detect", "Detect objects in the fused image of one pair");
  d->add_option("--ckpt", de.ckpt, "Checkpoint file")->required();
  d->add_option("--ir", de.ir, "Infrared PGM")->required();
  d->add_option("--vis", de.vis, "Visible PGM")->required();
  d->add_option("--prompt", de.prompt, "Prompt text, or @file")->required();
  d->add_option("--conf", de.conf, "Confidence threshold")->capture_default_str();
  d->add_option("--out", de.out, "Output text: class cx cy w h confidence per line")->required();

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Fusion metrics and detection mAP over a dataset");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint file")->required();
  e->add_option("--data", ev.data, "Dataset directory")->required();
  e->add_option("--report", ev.report, "Output CSV report")->required();
  e->add_option("--fused-dir", ev.fused_dir, "Directory for fused PGMs (default: 'fused' next to the report)");

  std::uint64_t gc_seed = 0;
  auto* c = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable operation");
  c->add_option("--seed", gc_seed, "Seed for random instances")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*f) return cmd_fuse(fu);
    if (*d) return cmd_detect(de);
    if (*e) return cmd_eval(ev);
    if (*c) return cmd_gradcheck(gc_seed);
  } catch (const ArgumentError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 2;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return 1;
  }
  return 2;
}
