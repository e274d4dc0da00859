#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "pear/model.hpp"
#include "pear/tensor.hpp"

// Synthetic sequence-classification tasks. Inputs are gaussian feature
// sequences; labels come from a randomly initialized teacher transformer,
// with per-class offsets calibrated so every class is well represented.
// The downstream task uses the same input distribution but a teacher whose
// attention projections are perturbed, so adaptation has real work to do.

namespace pear {

struct SyntheticTask {
  uint64_t generator_seed = 1;
  int input_dim = 16;
  int seq_len = 16;
  int classes = 4;

  // Scale of the teacher's weights; larger values make the labeling
  // function more nonlinear.
  double teacher_init_std = 0.15;
  // Relative size of the downstream teacher perturbation. Zero reproduces
  // the pretrain task exactly (control case).
  double shift_scale = 0.9;
  // The perturbation of each attention projection is low-rank: a common
  // direction shared by all positions (weighted by shift_correlation) plus
  // an independent per-position remainder. Per-position magnitudes differ,
  // so positions vary in how much adaptation they need.
  int shift_rank = 4;
  double shift_correlation = 0.85;

  int pretrain_examples = 4000;
  int train_examples = 1000;
  int val_examples = 500;
  int test_examples = 1000;

  void validate() const;
};

struct Dataset {
  Index n = 0;
  Index seq = 0;
  Index dim = 0;
  std::vector<double> x;  // [n * seq * dim], row-major
  std::vector<int> y;     // [n]
};

struct TaskData {
  uint64_t task_seed = 0;
  Dataset pretrain;
  Dataset train;
  Dataset val;
  Dataset test;
};

// Deterministic datasets for the given task. The teacher shares the
// backbone architecture; `arch` supplies layer/head/dim settings while the
// task dictates input_dim, seq_len and classes.
TaskData generate_task(const SyntheticTask& task, const BackboneConfig& arch);

// Labels the given inputs ([n * seq * dim]) under the task's pretrain or
// downstream labeling function. Exposed for tests of the shift behavior.
std::vector<int> label_inputs(const SyntheticTask& task, const BackboneConfig& arch,
                              bool downstream, const std::vector<double>& x, Index n);

// Assembles a mini-batch from `count` examples of `ds` starting at `start`
// in the given example order.
std::pair<Tensor, std::vector<int>> make_batch(const Dataset& ds, const std::vector<Index>& order,
                                               Index start, Index count);

}  // namespace pear
