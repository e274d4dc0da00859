#include <doctest.h>

#include <cstring>

#include "pear/io.hpp"
#include "pear/pipeline.hpp"
#include "testutil.hpp"

using namespace pear;

namespace {

// Everything small: 2 layers, 4 positions, a few dozen examples.
struct Fixture {
  SyntheticTask task;
  BackboneConfig arch;
  TaskData data;
  TransformerModel backbone;

  explicit Fixture(uint64_t seed = 5) {
    task.generator_seed = seed;
    task.input_dim = 8;
    task.seq_len = 6;
    task.classes = 3;
    task.pretrain_examples = 160;
    task.train_examples = 128;
    task.val_examples = 64;
    task.test_examples = 64;

    arch.layers = 2;
    arch.model_dim = 16;
    arch.heads = 2;
    arch.mlp_ratio = 2;
    arch.input_dim = task.input_dim;
    arch.seq_len = task.seq_len;
    arch.classes = task.classes;
    arch.adapter_rank = 2;

    data = generate_task(task, arch);
    PretrainConfig pcfg;
    pcfg.epochs = 3;
    backbone = pretrain_backbone(arch, data.pretrain, pcfg, seed);
  }

  TrainConfig config(uint64_t seed = 7) const {
    TrainConfig cfg;
    cfg.warmup_epochs = 1;
    cfg.total_epochs = 4;
    cfg.batch_size = 32;
    cfg.seed = seed;
    return cfg;
  }
};

std::vector<double> snapshot_backbone(const TransformerModel& m) {
  std::vector<double> all;
  for (const auto& [name, t] : m.named_backbone_tensors())
    all.insert(all.end(), t.data().begin(), t.data().end());
  return all;
}

bool metrics_equal(const Metrics& a, const Metrics& b) {
  return a.variant == b.variant && a.train_loss == b.train_loss &&
         a.val_accuracy == b.val_accuracy && a.test_accuracy == b.test_accuracy &&
         a.trainable_params == b.trainable_params && a.positions_adapted == b.positions_adapted;
}

}  // namespace

TEST_CASE("variant accounting: equal budgets, different adapted positions") {
  const Fixture fx;
  const Metrics full = run_variant(Variant::FullAdapters, fx.backbone, fx.data, fx.config());
  const Metrics vanilla = run_variant(Variant::VanillaPrune, fx.backbone, fx.data, fx.config());
  const Metrics pear = run_variant(Variant::Pear, fx.backbone, fx.data, fx.config());

  const long long pair_scalars = 2 * (16 * 2 + 2 * 16);
  CHECK(full.trainable_params == 2 * pair_scalars);
  CHECK(vanilla.trainable_params == pair_scalars);
  CHECK(pear.trainable_params == pair_scalars);  // same plan, same budget
  CHECK(full.positions_adapted == 4);
  CHECK(pear.positions_adapted == 4);
  CHECK(vanilla.positions_adapted == 2);
  CHECK(static_cast<int>(full.train_loss.size()) == fx.config().total_epochs);
}

TEST_CASE("identical configs reproduce bit-identical metrics") {
  const Fixture fx;
  const Metrics a = run_variant(Variant::PearDA, fx.backbone, fx.data, fx.config(9));
  const Metrics b = run_variant(Variant::PearDA, fx.backbone, fx.data, fx.config(9));
  CHECK(metrics_equal(a, b));

  const Metrics c = run_variant(Variant::PearDA, fx.backbone, fx.data, fx.config(10));
  CHECK(a.train_loss != c.train_loss);  // the seed matters
}

TEST_CASE("the backbone stays frozen through every variant") {
  const Fixture fx;
  const std::vector<double> before = snapshot_backbone(fx.backbone);
  for (Variant v : kAllVariants) (void)run_variant(v, fx.backbone, fx.data, fx.config());
  const std::vector<double> after = snapshot_backbone(fx.backbone);
  CHECK(std::memcmp(before.data(), after.data(), before.size() * sizeof(double)) == 0);
}

TEST_CASE("warm-up accumulates importance over exactly warmup_epochs x steps_per_epoch") {
  const Fixture fx;
  TrainConfig cfg = fx.config();
  cfg.warmup_epochs = 2;
  TransformerModel model = fx.backbone.fork_with_fresh_adapters(cfg.seed);
  const ImportanceReport report = run_warmup(model, fx.data, cfg);
  const int steps_per_epoch = (128 + cfg.batch_size - 1) / cfg.batch_size;
  CHECK(report.steps_accumulated() == 2 * steps_per_epoch);
  CHECK(report.is_final());
  CHECK(report.n_positions() == 4);
  for (const auto& [id, s] : report.scores()) CHECK(s >= 0.0);
  // warm-up never prunes
  CHECK(model.bank().owned_count() == 4);
}

TEST_CASE("run_variant equals warmup + plan + apply + continue, bit for bit") {
  const Fixture fx;
  TrainConfig cfg = fx.config(21);
  cfg.checkpoint.c1 = 0.5;
  cfg.checkpoint.c2 = 0.5;

  TransformerModel end_to_end_model = fx.backbone.clone();
  const Metrics end_to_end =
      run_variant(Variant::PearSBA, fx.backbone, fx.data, cfg, &end_to_end_model);

  // decomposed path, through the same canonical f32 boundary
  TransformerModel model = fx.backbone.fork_with_fresh_adapters(cfg.seed);
  const ImportanceReport report = run_warmup(model, fx.data, cfg);
  KnowledgeCheckpointConfig kc = cfg.checkpoint;
  kc.mode = CheckpointMode::SBA;
  const SharePlan p = plan(report, cfg.prune_ratio, kc);
  for (PositionId id : model.bank().owned_ids())
    for (Tensor* t : {&model.bank().owned_pair(id).A, &model.bank().owned_pair(id).B})
      for (auto& v : t->data()) v = static_cast<double>(static_cast<float>(v));
  apply(model.bank(), p, false);
  for (PositionId id : model.bank().owned_ids())
    for (Tensor* t : {&model.bank().owned_pair(id).A, &model.bank().owned_pair(id).B})
      for (auto& v : t->data()) v = static_cast<double>(static_cast<float>(v));
  const Metrics resumed = continue_training(model, fx.data, cfg, cfg.warmup_epochs, "pear-sba");

  CHECK(end_to_end.val_accuracy == resumed.val_accuracy);
  CHECK(end_to_end.test_accuracy == resumed.test_accuracy);
  for (PositionId id : model.bank().owned_ids()) {
    CHECK(model.bank().owned_pair(id).A.data() == end_to_end_model.bank().owned_pair(id).A.data());
    CHECK(model.bank().owned_pair(id).B.data() == end_to_end_model.bank().owned_pair(id).B.data());
  }
}

TEST_CASE("search runs all three scenarios and selects by validation accuracy") {
  const Fixture fx;
  const SearchResult result = run_search(fx.backbone, fx.data, fx.config(3));
  CHECK(result.scenarios[0].variant == "pear");
  CHECK(result.scenarios[1].variant == "pear-da");
  CHECK(result.scenarios[2].variant == "pear-sba");

  // selection uses validation accuracy only, ties broken in scenario order
  int expect = 0;
  for (int i = 1; i < 3; ++i)
    if (result.scenarios[static_cast<size_t>(i)].val_accuracy >
        result.scenarios[static_cast<size_t>(expect)].val_accuracy)
      expect = i;
  CHECK(result.best_index == expect);
  CHECK(result.best().val_accuracy >= result.scenarios[0].val_accuracy);
}

TEST_CASE("compare produces a full deterministic grid with aggregate statistics") {
  const Fixture fx;  // only for the arch/task shapes
  TrainConfig cfg = fx.config();
  PretrainConfig pcfg;
  pcfg.epochs = 2;

  SyntheticTask base = fx.task;
  const std::vector<uint64_t> tasks = {5};
  const std::vector<uint64_t> seeds = {1, 2};
  const ComparisonReport a = compare_experiment(fx.arch, base, cfg, pcfg, tasks, seeds, 2);
  const ComparisonReport b = compare_experiment(fx.arch, base, cfg, pcfg, tasks, seeds, 1);

  REQUIRE(a.runs.size() == 1 * 5 * 2);
  CHECK(a.best_scenario.size() == 2);
  // deterministic regardless of job count
  for (size_t i = 0; i < a.runs.size(); ++i) {
    CHECK(a.runs[i].variant == b.runs[i].variant);
    CHECK(a.runs[i].val_accuracy == b.runs[i].val_accuracy);
    CHECK(a.runs[i].test_accuracy == b.runs[i].test_accuracy);
  }
  CHECK(a.task_gaps.size() == 1);
  CHECK(a.pear_ge_vanilla == (a.pear_best_stats.mean >= a.variant_stats[1].mean));

  // pear and vanilla rows report the same parameter budget
  for (size_t s = 0; s < seeds.size(); ++s)
    CHECK(a.run(0, 1, s).trainable_params == a.run(0, 2, s).trainable_params);

  CHECK_THROWS_AS(compare_experiment(fx.arch, base, cfg, pcfg, tasks, {1}, 1), usage_error);
}

TEST_CASE("train config validation") {
  TrainConfig cfg;
  cfg.warmup_epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg = {};
  cfg.warmup_epochs = cfg.total_epochs;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg = {};
  cfg.prune_ratio = 0.75;
  CHECK_THROWS_AS(cfg.validate(), usage_error);
  cfg = {};
  CHECK_NOTHROW(cfg.validate());
}
