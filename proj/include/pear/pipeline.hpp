#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "pear/data.hpp"
#include "pear/model.hpp"
#include "pear/planner.hpp"

// End-to-end experiment driver: pretrain a backbone on the synthetic
// pretrain split, then fine-tune adapters under one of five variants.
// Pruning variants run warm-up epochs with importance accumulation, apply
// a share plan at the warm-up boundary, and fine-tune the survivors.

namespace pear {

enum class Variant { FullAdapters, VanillaPrune, Pear, PearDA, PearSBA };

constexpr std::array<Variant, 5> kAllVariants = {
    Variant::FullAdapters, Variant::VanillaPrune, Variant::Pear, Variant::PearDA,
    Variant::PearSBA};
constexpr std::array<Variant, 3> kSearchVariants = {Variant::Pear, Variant::PearDA,
                                                    Variant::PearSBA};

std::string to_string(Variant v);
Variant variant_from_string(const std::string& s);

struct TrainConfig {
  int warmup_epochs = 2;
  int total_epochs = 20;  // warm-up epochs count toward the total
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  int batch_size = 64;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  double prune_ratio = 0.5;
  KnowledgeCheckpointConfig checkpoint;  // scenario for the SBA variant

  void validate() const;
};

struct PretrainConfig {
  int epochs = 16;
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
  int batch_size = 64;
};

struct Metrics {
  std::string variant;
  uint64_t task_seed = 0;
  uint64_t train_seed = 0;
  std::vector<double> train_loss;  // one entry per trained epoch
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  long long trainable_params = 0;
  int positions_adapted = 0;
  double wall_seconds = 0.0;  // informational only; never serialized
};

// Trains every backbone weight (adapters disabled) on the pretrain split,
// then freezes the result.
TransformerModel pretrain_backbone(const BackboneConfig& arch, const Dataset& pretrain,
                                   const PretrainConfig& config, uint64_t task_seed);

// Fine-tunes a fresh fork of the pretrained backbone under one variant.
// When out_model is given, the trained model (with its final bank) is
// moved into it.
Metrics run_variant(Variant variant, const TransformerModel& pretrained, const TaskData& data,
                    const TrainConfig& config, TransformerModel* out_model = nullptr);

// Warm-up epochs only: trains with importance accumulation and returns the
// finalized report, leaving the model at the warm-up boundary.
ImportanceReport run_warmup(TransformerModel& model, const TaskData& data,
                            const TrainConfig& config);

// Continues training an already-planned model over epochs
// [start_epoch, total_epochs). Used to resume from an applied bank.
Metrics continue_training(TransformerModel& model, const TaskData& data, const TrainConfig& config,
                          int start_epoch, const std::string& variant_label);

double evaluate(const TransformerModel& model, const Dataset& ds, int batch_size);

struct SearchResult {
  int best_index = 0;                 // into kSearchVariants
  std::array<Metrics, 3> scenarios;   // plain, DA, SBA
  const Metrics& best() const { return scenarios[static_cast<size_t>(best_index)]; }
};

// Runs the three Pear scenarios and selects by validation accuracy (ties
// resolved in scenario order). Test accuracy never enters selection.
SearchResult run_search(const TransformerModel& pretrained, const TaskData& data,
                        const TrainConfig& config);

struct RunSummary {
  uint64_t task_seed = 0;
  uint64_t train_seed = 0;
  std::string variant;
  double val_accuracy = 0.0;
  double test_accuracy = 0.0;
  long long trainable_params = 0;
  int positions_adapted = 0;
};

struct ComparisonReport {
  std::vector<uint64_t> task_seeds;
  std::vector<uint64_t> train_seeds;
  // task-major, then variant in kAllVariants order, then train seed
  std::vector<RunSummary> runs;
  // winning search scenario per (task, train seed), flattened task-major
  std::vector<int> best_scenario;

  struct Stat {
    double mean = 0.0;
    double stddev = 0.0;
  };
  std::array<Stat, 5> variant_stats;  // pooled over all tasks and seeds
  Stat pear_best_stats;

  struct TaskGap {
    uint64_t task_seed = 0;
    double pear_best_mean = 0.0;
    double vanilla_mean = 0.0;
    double gap = 0.0;        // pear_best_mean - vanilla_mean
    double pooled_se = 0.0;  // standard error of the mean difference
  };
  std::vector<TaskGap> task_gaps;

  bool pear_ge_vanilla = false;  // pooled mean comparison at equal parameters
  int tasks_exceeding_se = 0;    // tasks whose gap exceeds one pooled SE
  std::vector<std::string> ordering_flags;  // violations of full >= pear >= vanilla

  const RunSummary& run(size_t task_index, size_t variant_index, size_t seed_index) const;
};

// Multi-seed study: for every task seed, pretrains one backbone, then runs
// all variants for every train seed. Jobs run in parallel; results are
// deterministic for fixed seeds regardless of the job count.
ComparisonReport compare_experiment(const BackboneConfig& arch, const SyntheticTask& base_task,
                                    const TrainConfig& base_config,
                                    const PretrainConfig& pretrain_config,
                                    const std::vector<uint64_t>& task_seeds,
                                    const std::vector<uint64_t>& train_seeds, int jobs = 0);

// Fills the derived statistics of a report whose runs are already present.
void summarize_comparison(ComparisonReport& report);

}  // namespace pear
