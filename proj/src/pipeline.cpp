#include "pear/pipeline.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <numeric>
#include <functional>
#include <thread>

#include "pear/errors.hpp"
#include "pear/optim.hpp"
#include "pear/rng.hpp"

namespace pear {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

AdamWConfig adam_config(const TrainConfig& cfg) {
  return AdamWConfig{cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                     cfg.weight_decay};
}

// Rounds every owned pair through 32-bit floats, mirroring what a
// checkpoint save/load does. Applied at the warm-up boundary so the
// in-process path and the file-based score/plan/apply path see identical
// weights from there on.
void quantize_bank_f32(AdapterBank& bank) {
  for (PositionId id : bank.owned_ids()) {
    AdapterPair& pair = bank.owned_pair(id);
    for (Tensor* t : {&pair.A, &pair.B})
      for (auto& v : t->data()) v = static_cast<double>(static_cast<float>(v));
  }
}

KnowledgeCheckpointConfig effective_checkpoint(Variant v, const TrainConfig& cfg) {
  KnowledgeCheckpointConfig out = cfg.checkpoint;
  switch (v) {
    case Variant::Pear:
    case Variant::VanillaPrune:
    case Variant::FullAdapters:
      out.mode = CheckpointMode::None;
      break;
    case Variant::PearDA:
      out.mode = CheckpointMode::DA;
      break;
    case Variant::PearSBA:
      out.mode = CheckpointMode::SBA;
      break;
  }
  return out;
}

double train_one_epoch(TransformerModel& model, const Dataset& ds, const TrainConfig& cfg,
                       int epoch, AdamW& opt, const std::vector<Tensor>& params,
                       ImportanceReport* accumulate_into) {
  std::vector<Index> order(static_cast<size_t>(ds.n));
  std::iota(order.begin(), order.end(), Index{0});
  Rng shuffle_rng(derive_seed(cfg.seed, "shuffle", static_cast<uint64_t>(epoch)));
  shuffle_rng.shuffle(order);

  double total = 0.0;
  for (Index start = 0; start < ds.n; start += cfg.batch_size) {
    const Index count = std::min<Index>(cfg.batch_size, ds.n - start);
    auto [x, y] = make_batch(ds, order, start, count);
    tape<double>().clear();
    Tensor loss = model.loss(x, y, count);
    const double lv = loss.value();
    if (!std::isfinite(lv))
      throw numeric_error("non-finite training loss at epoch " + std::to_string(epoch));
    backward(loss);
    if (accumulate_into) accumulate_step(model.bank(), *accumulate_into);
    opt.step();
    zero_grad(params);
    total += lv * static_cast<double>(count);
  }
  tape<double>().clear();
  return total / static_cast<double>(ds.n);
}

void fill_bank_metrics(const TransformerModel& model, Metrics& m) {
  m.trainable_params = model.bank().actual_param_count();
  m.positions_adapted = static_cast<int>(model.bank().positions_in_effect());
}

}  // namespace

std::string to_string(Variant v) {
  switch (v) {
    case Variant::FullAdapters: return "full";
    case Variant::VanillaPrune: return "vanilla";
    case Variant::Pear: return "pear";
    case Variant::PearDA: return "pear-da";
    case Variant::PearSBA: return "pear-sba";
  }
  return "full";
}

Variant variant_from_string(const std::string& s) {
  if (s == "full") return Variant::FullAdapters;
  if (s == "vanilla") return Variant::VanillaPrune;
  if (s == "pear") return Variant::Pear;
  if (s == "pear-da") return Variant::PearDA;
  if (s == "pear-sba") return Variant::PearSBA;
  throw usage_error("unknown variant '" + s + "', expected full, vanilla, pear, pear-da or pear-sba");
}

void TrainConfig::validate() const {
  if (warmup_epochs <= 0 || warmup_epochs >= total_epochs)
    throw usage_error("need 0 < warmup_epochs < total_epochs, got " +
                      std::to_string(warmup_epochs) + "/" + std::to_string(total_epochs));
  if (!(learning_rate > 0.0)) throw usage_error("learning_rate must be positive");
  if (batch_size < 1) throw usage_error("batch_size must be >= 1");
  if (!(prune_ratio > 0.0) || prune_ratio > 0.5)
    throw usage_error("prune_ratio must lie in (0, 0.5]");
}

TransformerModel pretrain_backbone(const BackboneConfig& arch, const Dataset& pretrain,
                                   const PretrainConfig& config, uint64_t task_seed) {
  if (config.epochs < 1) throw usage_error("pretrain epochs must be >= 1");
  TransformerModel model(arch, derive_seed(task_seed, "backbone-seed"));
  model.set_adapters_enabled(false);
  model.set_backbone_trainable(true);

  const std::vector<Tensor> params = model.backbone_parameters();
  AdamW opt(params, AdamWConfig{config.learning_rate, 0.9, 0.999, 1e-8, config.weight_decay});

  TrainConfig loop;
  loop.seed = derive_seed(task_seed, "pretrain-loop");
  loop.batch_size = config.batch_size;
  for (int epoch = 0; epoch < config.epochs; ++epoch)
    train_one_epoch(model, pretrain, loop, epoch, opt, params, nullptr);

  model.set_backbone_trainable(false);
  model.set_adapters_enabled(true);
  zero_grad(params);
  return model;
}

ImportanceReport run_warmup(TransformerModel& model, const TaskData& data,
                            const TrainConfig& config) {
  config.validate();
  const std::vector<Tensor> params = model.bank().trainable_parameters();
  AdamW opt(params, adam_config(config));
  ImportanceReport report;
  for (int epoch = 0; epoch < config.warmup_epochs; ++epoch)
    train_one_epoch(model, data.train, config, epoch, opt, params, &report);
  finalize(report);
  return report;
}

double evaluate(const TransformerModel& model, const Dataset& ds, int batch_size) {
  NoGradGuard ng;
  std::vector<Index> order(static_cast<size_t>(ds.n));
  std::iota(order.begin(), order.end(), Index{0});
  Index correct = 0;
  for (Index start = 0; start < ds.n; start += batch_size) {
    const Index count = std::min<Index>(batch_size, ds.n - start);
    auto [x, y] = make_batch(ds, order, start, count);
    Tensor logits = model.forward(x, count);
    const int classes = static_cast<int>(logits.cols());
    for (Index i = 0; i < count; ++i) {
      int best = 0;
      for (int c = 1; c < classes; ++c)
        if (logits.at(i, c) > logits.at(i, best)) best = c;
      if (best == y[static_cast<size_t>(i)]) ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(ds.n);
}

Metrics run_variant(Variant variant, const TransformerModel& pretrained, const TaskData& data,
                    const TrainConfig& config, TransformerModel* out_model) {
  config.validate();
  const auto start_time = Clock::now();

  TransformerModel model = pretrained.fork_with_fresh_adapters(config.seed);
  std::vector<Tensor> params = model.bank().trainable_parameters();
  AdamW opt(params, adam_config(config));
  ImportanceReport report;
  const bool prunes = variant != Variant::FullAdapters;

  Metrics m;
  m.variant = to_string(variant);
  m.task_seed = data.task_seed;
  m.train_seed = config.seed;

  for (int epoch = 0; epoch < config.total_epochs; ++epoch) {
    if (prunes && epoch == config.warmup_epochs) {
      const SharePlan p = plan(report, config.prune_ratio, effective_checkpoint(variant, config));
      quantize_bank_f32(model.bank());
      apply(model.bank(), p, variant == Variant::VanillaPrune);
      quantize_bank_f32(model.bank());
      params = model.bank().trainable_parameters();
      opt = AdamW(params, adam_config(config));
    }
    const bool warm = prunes && epoch < config.warmup_epochs;
    double loss = train_one_epoch(model, data.train, config, epoch, opt, params,
                                  warm ? &report : nullptr);
    if (warm && epoch == config.warmup_epochs - 1) finalize(report);
    m.train_loss.push_back(loss);
  }

  m.val_accuracy = evaluate(model, data.val, config.batch_size);
  m.test_accuracy = evaluate(model, data.test, config.batch_size);
  fill_bank_metrics(model, m);
  m.wall_seconds = seconds_since(start_time);
  if (out_model) *out_model = std::move(model);
  return m;
}

Metrics continue_training(TransformerModel& model, const TaskData& data, const TrainConfig& config,
                          int start_epoch, const std::string& variant_label) {
  config.validate();
  if (start_epoch < 0 || start_epoch >= config.total_epochs)
    throw usage_error("start epoch " + std::to_string(start_epoch) + " outside [0, " +
                      std::to_string(config.total_epochs) + ")");
  const auto start_time = Clock::now();

  std::vector<Tensor> params = model.bank().trainable_parameters();
  AdamW opt(params, adam_config(config));

  Metrics m;
  m.variant = variant_label;
  m.task_seed = data.task_seed;
  m.train_seed = config.seed;
  for (int epoch = start_epoch; epoch < config.total_epochs; ++epoch)
    m.train_loss.push_back(train_one_epoch(model, data.train, config, epoch, opt, params, nullptr));

  m.val_accuracy = evaluate(model, data.val, config.batch_size);
  m.test_accuracy = evaluate(model, data.test, config.batch_size);
  fill_bank_metrics(model, m);
  m.wall_seconds = seconds_since(start_time);
  return m;
}

SearchResult run_search(const TransformerModel& pretrained, const TaskData& data,
                        const TrainConfig& config) {
  SearchResult out;
  for (size_t i = 0; i < kSearchVariants.size(); ++i)
    out.scenarios[i] = run_variant(kSearchVariants[i], pretrained, data, config);
  out.best_index = 0;
  for (size_t i = 1; i < out.scenarios.size(); ++i)
    if (out.scenarios[i].val_accuracy > out.scenarios[static_cast<size_t>(out.best_index)].val_accuracy)
      out.best_index = static_cast<int>(i);
  return out;
}

const RunSummary& ComparisonReport::run(size_t task_index, size_t variant_index,
                                        size_t seed_index) const {
  const size_t per_task = kAllVariants.size() * train_seeds.size();
  return runs.at(task_index * per_task + variant_index * train_seeds.size() + seed_index);
}

namespace {

RunSummary summarize_run(const Metrics& m) {
  return RunSummary{m.task_seed, m.train_seed, m.variant, m.val_accuracy,
                    m.test_accuracy, m.trainable_params, m.positions_adapted};
}

ComparisonReport::Stat stat_of(const std::vector<double>& xs) {
  ComparisonReport::Stat s;
  if (xs.empty()) return s;
  for (double x : xs) s.mean += x;
  s.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return s;
}

// Runs tasks on a fixed-size worker pool. Each job is single-threaded.
void run_jobs(std::vector<std::function<void()>>& jobs, int workers) {
  if (workers <= 1) {
    for (auto& j : jobs) j();
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        const size_t i = next.fetch_add(1);
        if (i >= jobs.size()) return;
        jobs[i]();
      }
    });
  }
  for (auto& t : pool) t.join();
}

}  // namespace

void summarize_comparison(ComparisonReport& report) {
  const size_t nt = report.task_seeds.size();
  const size_t ns = report.train_seeds.size();

  // Best scenario per (task, seed) by validation accuracy, ties by order.
  report.best_scenario.assign(nt * ns, 0);
  for (size_t t = 0; t < nt; ++t) {
    for (size_t s = 0; s < ns; ++s) {
      int best = 0;
      double best_val = report.run(t, 2, s).val_accuracy;  // plain pear
      for (int v = 1; v < 3; ++v) {
        const double val = report.run(t, 2 + static_cast<size_t>(v), s).val_accuracy;
        if (val > best_val) {
          best_val = val;
          best = v;
        }
      }
      report.best_scenario[t * ns + s] = best;
    }
  }

  std::array<std::vector<double>, 5> pooled;
  std::vector<double> pooled_best;
  report.task_gaps.clear();
  report.tasks_exceeding_se = 0;
  for (size_t t = 0; t < nt; ++t) {
    std::vector<double> best_accs, vanilla_accs;
    for (size_t s = 0; s < ns; ++s) {
      for (size_t v = 0; v < kAllVariants.size(); ++v)
        pooled[v].push_back(report.run(t, v, s).test_accuracy);
      const int b = report.best_scenario[t * ns + s];
      const double best_acc = report.run(t, 2 + static_cast<size_t>(b), s).test_accuracy;
      pooled_best.push_back(best_acc);
      best_accs.push_back(best_acc);
      vanilla_accs.push_back(report.run(t, 1, s).test_accuracy);
    }
    ComparisonReport::TaskGap gap;
    gap.task_seed = report.task_seeds[t];
    gap.pear_best_mean = stat_of(best_accs).mean;
    gap.vanilla_mean = stat_of(vanilla_accs).mean;
    gap.gap = gap.pear_best_mean - gap.vanilla_mean;
    const double var_b = std::pow(stat_of(best_accs).stddev, 2);
    const double var_v = std::pow(stat_of(vanilla_accs).stddev, 2);
    gap.pooled_se = std::sqrt((var_b + var_v) / static_cast<double>(ns));
    if (gap.gap > gap.pooled_se && gap.gap > 0.0) ++report.tasks_exceeding_se;
    report.task_gaps.push_back(gap);
  }

  for (size_t v = 0; v < kAllVariants.size(); ++v) report.variant_stats[v] = stat_of(pooled[v]);
  report.pear_best_stats = stat_of(pooled_best);
  report.pear_ge_vanilla = report.pear_best_stats.mean >= report.variant_stats[1].mean;

  report.ordering_flags.clear();
  if (report.variant_stats[0].mean < report.pear_best_stats.mean)
    report.ordering_flags.push_back("pear-best pooled mean exceeds full-adapters pooled mean");
  if (report.pear_best_stats.mean < report.variant_stats[1].mean)
    report.ordering_flags.push_back("vanilla pooled mean exceeds pear-best pooled mean");
}

ComparisonReport compare_experiment(const BackboneConfig& arch, const SyntheticTask& base_task,
                                    const TrainConfig& base_config,
                                    const PretrainConfig& pretrain_config,
                                    const std::vector<uint64_t>& task_seeds,
                                    const std::vector<uint64_t>& train_seeds, int jobs) {
  if (train_seeds.size() < 2) throw usage_error("compare needs at least 2 train seeds");
  if (task_seeds.empty()) throw usage_error("compare needs at least 1 task seed");
  if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
  if (jobs < 1) jobs = 1;

  const size_t nt = task_seeds.size();
  const size_t ns = train_seeds.size();

  ComparisonReport report;
  report.task_seeds = task_seeds;
  report.train_seeds = train_seeds;

  // Stage 1: per-task data generation and backbone pretraining.
  std::vector<TaskData> data(nt);
  std::vector<TransformerModel> backbones(nt);
  {
    std::vector<std::function<void()>> stage;
    for (size_t t = 0; t < nt; ++t) {
      stage.push_back([&, t] {
        SyntheticTask task = base_task;
        task.generator_seed = task_seeds[t];
        data[t] = generate_task(task, arch);
        backbones[t] = pretrain_backbone(arch, data[t].pretrain, pretrain_config, task_seeds[t]);
      });
    }
    run_jobs(stage, jobs);
  }

  // Stage 2: every (task, variant, train seed) fine-tune, in parallel.
  std::vector<Metrics> metrics(nt * kAllVariants.size() * ns);
  {
    std::vector<std::function<void()>> stage;
    for (size_t t = 0; t < nt; ++t) {
      for (size_t v = 0; v < kAllVariants.size(); ++v) {
        for (size_t s = 0; s < ns; ++s) {
          const size_t slot = t * kAllVariants.size() * ns + v * ns + s;
          stage.push_back([&, t, v, s, slot] {
            TrainConfig cfg = base_config;
            cfg.seed = train_seeds[s];
            metrics[slot] = run_variant(kAllVariants[v], backbones[t], data[t], cfg);
          });
        }
      }
    }
    run_jobs(stage, jobs);
  }

  report.runs.reserve(metrics.size());
  for (const Metrics& m : metrics) report.runs.push_back(summarize_run(m));
  summarize_comparison(report);
  return report;
}

}  // namespace pear
