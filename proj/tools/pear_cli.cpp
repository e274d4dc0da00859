// Command-line driver for the pear adapter prune-and-share pipeline.
//
// Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numerical
// failure (non-finite loss). Relative output paths are resolved against
// $PEAR_OUT_DIR when it is set.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pear/data.hpp"
#include "pear/errors.hpp"
#include "pear/io.hpp"
#include "pear/model.hpp"
#include "pear/pipeline.hpp"
#include "pear/planner.hpp"

namespace {

namespace fs = std::filesystem;

fs::path resolve_out(const std::string& p) {
  fs::path path(p);
  if (path.is_relative()) {
    if (const char* dir = std::getenv("PEAR_OUT_DIR")) path = fs::path(dir) / path;
  }
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  return path;
}

struct ArchFlags {
  pear::BackboneConfig cfg;

  void attach(CLI::App* cmd) {
    cmd->add_option("--layers", cfg.layers, "transformer layers");
    cmd->add_option("--dim", cfg.model_dim, "model dimension");
    cmd->add_option("--heads", cfg.heads, "attention heads");
    cmd->add_option("--mlp-ratio", cfg.mlp_ratio, "mlp hidden size multiplier");
    cmd->add_option("--seq-len", cfg.seq_len, "sequence length");
    cmd->add_option("--rank", cfg.adapter_rank, "adapter rank d");
    cmd->add_option("--adapter-scale", cfg.adapter_scale, "multiplier on the low-rank update");
    cmd->add_option("--adapted", cfg.adapted_projections,
                    "projections carrying adapters (subset of q k v o)");
  }
};

struct TaskFlags {
  pear::SyntheticTask task;

  void attach(CLI::App* cmd) {
    cmd->add_option("--task-seed", task.generator_seed, "task generator seed");
    cmd->add_option("--input-dim", task.input_dim, "feature size per sequence element");
    cmd->add_option("--classes", task.classes, "number of classes");
    cmd->add_option("--teacher-std", task.teacher_init_std, "teacher weight scale");
    cmd->add_option("--shift", task.shift_scale, "downstream teacher perturbation scale");
    cmd->add_option("--shift-rank", task.shift_rank, "rank of the teacher perturbation");
    cmd->add_option("--shift-correlation", task.shift_correlation,
                    "share of the perturbation common to all positions, in [0, 1]");
    cmd->add_option("--pretrain-examples", task.pretrain_examples, "pretraining set size");
    cmd->add_option("--train-examples", task.train_examples, "fine-tuning set size");
    cmd->add_option("--val-examples", task.val_examples, "validation set size");
    cmd->add_option("--test-examples", task.test_examples, "test set size");
  }

  // The task shares input_dim and classes with the architecture; seq_len
  // comes from the architecture flags.
  void sync(pear::BackboneConfig& cfg) const {
    cfg.input_dim = task.input_dim;
    cfg.classes = task.classes;
  }
};

struct TrainFlags {
  pear::TrainConfig cfg;
  std::string kc;  // empty = keep variant's own scenario
  std::string coeff_source = "manual";

  void attach(CLI::App* cmd) {
    cmd->add_option("--warmup-epochs", cfg.warmup_epochs, "epochs before prune-and-share");
    cmd->add_option("--epochs", cfg.total_epochs, "total fine-tuning epochs (includes warm-up)");
    cmd->add_option("--lr", cfg.learning_rate, "AdamW learning rate");
    cmd->add_option("--weight-decay", cfg.weight_decay, "decoupled weight decay");
    cmd->add_option("--batch", cfg.batch_size, "mini-batch size");
    cmd->add_option("--seed", cfg.seed, "training seed");
    cmd->add_option("--ratio", cfg.prune_ratio, "fraction of adapters to prune, in (0, 0.5]");
    cmd->add_option("--kc", kc, "knowledge checkpoint mode: none, da or sba");
    cmd->add_option("--c1", cfg.checkpoint.c1, "sba coefficient for the donor");
    cmd->add_option("--c2", cfg.checkpoint.c2, "sba coefficient for the pruned pair");
    cmd->add_option("--coeff-source", coeff_source, "sba coefficients: manual or from-scores");
  }

  pear::TrainConfig resolved() const {
    pear::TrainConfig out = cfg;
    out.checkpoint.source = pear::coefficient_source_from_string(coeff_source);
    if (!kc.empty()) out.checkpoint.mode = pear::checkpoint_mode_from_string(kc);
    return out;
  }
};

pear::Variant merge_variant(const std::string& name, const std::string& kc) {
  pear::Variant v = pear::variant_from_string(name);
  if (kc.empty()) return v;
  const pear::CheckpointMode mode = pear::checkpoint_mode_from_string(kc);
  if (v == pear::Variant::FullAdapters || v == pear::Variant::VanillaPrune) {
    if (mode != pear::CheckpointMode::None)
      throw pear::usage_error("--kc applies only to pear variants");
    return v;
  }
  switch (mode) {
    case pear::CheckpointMode::None: return pear::Variant::Pear;
    case pear::CheckpointMode::DA: return pear::Variant::PearDA;
    case pear::CheckpointMode::SBA: return pear::Variant::PearSBA;
  }
  return v;
}

void print_metrics_line(const pear::Metrics& m) {
  std::printf("variant %s  val-accuracy %.4f  test-accuracy %.4f  trainable-params %lld  "
              "positions-adapted %d  (%.1fs)\n",
              m.variant.c_str(), m.val_accuracy, m.test_accuracy, m.trainable_params,
              m.positions_adapted, m.wall_seconds);
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

void cmd_pretrain(const ArchFlags& arch, const TaskFlags& taskf, const pear::PretrainConfig& pcfg,
                  const std::string& out) {
  pear::BackboneConfig cfg = arch.cfg;
  taskf.sync(cfg);
  cfg.validate();
  pear::SyntheticTask task = taskf.task;
  task.seq_len = cfg.seq_len;

  const pear::TaskData data = pear::generate_task(task, cfg);
  pear::TransformerModel model = pear::pretrain_backbone(cfg, data.pretrain, pcfg, task.generator_seed);

  const double pre_acc = pear::evaluate(model, data.pretrain, pcfg.batch_size);
  const double frozen_val = pear::evaluate(model, data.val, pcfg.batch_size);
  const fs::path path = resolve_out(out);
  pear::save_backbone(model, task, path);
  std::printf("pretrain-accuracy %.4f\n", pre_acc);
  std::printf("frozen-downstream-val-accuracy %.4f\n", frozen_val);
  std::printf("saved %s\n", path.string().c_str());
}

void cmd_finetune(const std::string& backbone, const std::string& variant_name,
                  const TrainFlags& trainf, const std::string& resume, int start_epoch,
                  const std::string& out_bank, const std::string& out_metrics) {
  const pear::LoadedBackbone lb = pear::load_backbone(backbone);
  const pear::TaskData data = pear::generate_task(lb.task, lb.model.config());
  const pear::TrainConfig cfg = trainf.resolved();
  const pear::Variant variant = merge_variant(variant_name, trainf.kc);

  pear::Metrics metrics;
  pear::TransformerModel trained = lb.model.clone();
  if (!resume.empty()) {
    trained.set_bank(pear::load_bank(resume));
    metrics = pear::continue_training(trained, data, cfg, start_epoch, pear::to_string(variant));
  } else {
    metrics = pear::run_variant(variant, lb.model, data, cfg, &trained);
  }

  if (!out_bank.empty()) pear::save_bank(trained.bank(), resolve_out(out_bank));
  if (!out_metrics.empty()) pear::write_metrics(metrics, resolve_out(out_metrics));
  print_metrics_line(metrics);
}

void cmd_score(const std::string& backbone, const TrainFlags& trainf, const std::string& out_report,
               const std::string& out_bank) {
  const pear::LoadedBackbone lb = pear::load_backbone(backbone);
  const pear::TaskData data = pear::generate_task(lb.task, lb.model.config());
  const pear::TrainConfig cfg = trainf.resolved();

  pear::TransformerModel model = lb.model.fork_with_fresh_adapters(cfg.seed);
  const pear::ImportanceReport report = pear::run_warmup(model, data, cfg);
  pear::write_importance_report(report, resolve_out(out_report));
  if (!out_bank.empty()) pear::save_bank(model.bank(), resolve_out(out_bank));
  std::printf("scored %d positions over %d steps\n", static_cast<int>(report.n_positions()),
              report.steps_accumulated());
}

void cmd_plan(const std::string& report_path, const TrainFlags& trainf, const std::string& out) {
  const pear::ImportanceReport report = pear::read_importance_report(report_path);
  const pear::TrainConfig cfg = trainf.resolved();
  const pear::SharePlan p = pear::plan(report, cfg.prune_ratio, cfg.checkpoint);
  pear::write_share_plan(p, resolve_out(out));
  std::printf("plan: prune %d of %d positions\n", p.m, static_cast<int>(report.n_positions()));
}

void cmd_apply(const std::string& bank_path, const std::string& plan_path, bool vanilla,
               bool untied, const std::string& out) {
  pear::AdapterBank bank = pear::load_bank(bank_path);
  const pear::SharePlan p = pear::read_share_plan(plan_path);
  pear::apply(bank, p, vanilla, untied ? pear::ShareMode::Copied : pear::ShareMode::Tied);
  pear::save_bank(bank, resolve_out(out));
  std::printf("applied plan: %lld trainable params, %d positions adapted\n",
              static_cast<long long>(bank.actual_param_count()),
              static_cast<int>(bank.positions_in_effect()));
}

void cmd_eval(const std::string& backbone, const std::string& bank_path, const std::string& split,
              int batch) {
  const pear::LoadedBackbone lb = pear::load_backbone(backbone);
  const pear::TaskData data = pear::generate_task(lb.task, lb.model.config());
  pear::TransformerModel model = lb.model.clone();
  if (!bank_path.empty()) model.set_bank(pear::load_bank(bank_path));

  const pear::Dataset* ds = &data.test;
  if (split == "val") ds = &data.val;
  else if (split == "train") ds = &data.train;
  else if (split != "test") throw pear::usage_error("--split must be train, val or test");

  std::printf("%s-accuracy %.17g\n", split.c_str(), pear::evaluate(model, *ds, batch));
}

void cmd_compare(const ArchFlags& arch, const TaskFlags& taskf, const TrainFlags& trainf,
                 const pear::PretrainConfig& pcfg, int n_task_seeds, int n_train_seeds,
                 uint64_t task_seed_base, uint64_t train_seed_base, int jobs,
                 const std::string& out) {
  pear::BackboneConfig cfg = arch.cfg;
  taskf.sync(cfg);
  cfg.validate();
  pear::SyntheticTask task = taskf.task;
  task.seq_len = cfg.seq_len;
  if (task.shift_scale <= 0.0)
    throw pear::usage_error("compare needs a nonzero --shift so the downstream task differs");
  if (n_task_seeds < 1 || n_train_seeds < 2)
    throw pear::usage_error("compare needs >= 1 task seed and >= 2 train seeds");

  std::vector<uint64_t> task_seeds, train_seeds;
  for (int i = 0; i < n_task_seeds; ++i) task_seeds.push_back(task_seed_base + static_cast<uint64_t>(i));
  for (int i = 0; i < n_train_seeds; ++i) train_seeds.push_back(train_seed_base + static_cast<uint64_t>(i));

  const pear::ComparisonReport rep = pear::compare_experiment(cfg, task, trainf.resolved(), pcfg,
                                                              task_seeds, train_seeds, jobs);
  if (!out.empty()) pear::write_comparison(rep, resolve_out(out));
  std::fputs(pear::format_comparison_table(rep).c_str(), stdout);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pear: prune-and-share adapter fine-tuning on a frozen tiny transformer"};
  app.require_subcommand(1);

  ArchFlags arch;
  TaskFlags taskf;
  TrainFlags trainf;
  pear::PretrainConfig pcfg;

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "synthesize a task and pretrain a frozen backbone");
  arch.attach(pre);
  taskf.attach(pre);
  pre->add_option("--pretrain-epochs", pcfg.epochs, "pretraining epochs");
  pre->add_option("--pretrain-lr", pcfg.learning_rate, "pretraining learning rate");
  pre->add_option("--pretrain-batch", pcfg.batch_size, "pretraining batch size");
  std::string pre_out;
  pre->add_option("--out", pre_out, "backbone output file")->required();
  pre->callback([&] { cmd_pretrain(arch, taskf, pcfg, pre_out); });

  // finetune
  auto* fin = app.add_subcommand("finetune", "fine-tune adapters under one variant");
  std::string fin_backbone, fin_variant = "pear", fin_resume, fin_out_bank, fin_out_metrics;
  int fin_start_epoch = 0;
  fin->add_option("--backbone", fin_backbone, "pretrained backbone file")->required();
  fin->add_option("--variant", fin_variant, "full, vanilla, pear, pear-da or pear-sba");
  trainf.attach(fin);
  fin->add_option("--resume", fin_resume, "resume from an applied bank instead of warm-up");
  fin->add_option("--start-epoch", fin_start_epoch, "first epoch when resuming");
  fin->add_option("--out-bank", fin_out_bank, "where to save the trained bank");
  fin->add_option("--out-metrics", fin_out_metrics, "where to save run metrics");
  fin->callback([&] {
    cmd_finetune(fin_backbone, fin_variant, trainf, fin_resume, fin_start_epoch, fin_out_bank,
                 fin_out_metrics);
  });

  // score
  auto* sco = app.add_subcommand("score", "run warm-up and emit an importance report");
  std::string sco_backbone, sco_out_report, sco_out_bank;
  sco->add_option("--backbone", sco_backbone, "pretrained backbone file")->required();
  trainf.attach(sco);
  sco->add_option("--out-report", sco_out_report, "importance report output")->required();
  sco->add_option("--out-bank", sco_out_bank, "post-warm-up bank output");
  sco->callback([&] { cmd_score(sco_backbone, trainf, sco_out_report, sco_out_bank); });

  // plan
  auto* pla = app.add_subcommand("plan", "turn an importance report into a share plan");
  std::string pla_report, pla_out;
  pla->add_option("--report", pla_report, "importance report file")->required();
  trainf.attach(pla);
  pla->add_option("--out", pla_out, "share plan output")->required();
  pla->callback([&] { cmd_plan(pla_report, trainf, pla_out); });

  // apply
  auto* app_cmd = app.add_subcommand("apply", "apply a share plan to a saved bank");
  std::string apl_bank, apl_plan, apl_out;
  bool apl_vanilla = false, apl_untied = false;
  app_cmd->add_option("--bank", apl_bank, "bank to transform")->required();
  app_cmd->add_option("--plan", apl_plan, "share plan file")->required();
  app_cmd->add_flag("--vanilla", apl_vanilla, "prune outright instead of sharing");
  app_cmd->add_flag("--untied", apl_untied, "share as independent copies (ablation)");
  app_cmd->add_option("--out", apl_out, "transformed bank output")->required();
  app_cmd->callback([&] { cmd_apply(apl_bank, apl_plan, apl_vanilla, apl_untied, apl_out); });

  // eval
  auto* ev = app.add_subcommand("eval", "report accuracy of a backbone plus bank");
  std::string ev_backbone, ev_bank, ev_split = "test";
  int ev_batch = 64;
  ev->add_option("--backbone", ev_backbone, "pretrained backbone file")->required();
  ev->add_option("--bank", ev_bank, "adapter bank file (optional)");
  ev->add_option("--split", ev_split, "train, val or test");
  ev->add_option("--batch", ev_batch, "evaluation batch size");
  ev->callback([&] { cmd_eval(ev_backbone, ev_bank, ev_split, ev_batch); });

  // compare
  auto* cmp = app.add_subcommand("compare", "multi-seed pear vs vanilla pruning study");
  int cmp_task_seeds = 3, cmp_train_seeds = 5, cmp_jobs = 0;
  uint64_t cmp_task_base = 1, cmp_train_base = 1;
  std::string cmp_out;
  arch.attach(cmp);
  taskf.attach(cmp);
  trainf.attach(cmp);
  cmp->add_option("--pretrain-epochs", pcfg.epochs, "pretraining epochs");
  cmp->add_option("--pretrain-lr", pcfg.learning_rate, "pretraining learning rate");
  cmp->add_option("--pretrain-batch", pcfg.batch_size, "pretraining batch size");
  cmp->add_option("--task-seeds", cmp_task_seeds, "number of task generator seeds");
  cmp->add_option("--seeds", cmp_train_seeds, "number of training seeds per task");
  cmp->add_option("--task-seed-base", cmp_task_base, "first task seed");
  cmp->add_option("--train-seed-base", cmp_train_base, "first training seed");
  cmp->add_option("--jobs", cmp_jobs, "parallel jobs (default: hardware threads)");
  cmp->add_option("--out", cmp_out, "comparison report output");
  cmp->callback([&] {
    cmd_compare(arch, taskf, trainf, pcfg, cmp_task_seeds, cmp_train_seeds, cmp_task_base,
                cmp_train_base, cmp_jobs, cmp_out);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  } catch (const pear::usage_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const pear::numeric_error& e) {
    std::fprintf(stderr, "numerical failure: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  }
  return 0;
}
