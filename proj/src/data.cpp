#include "pear/data.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pear/errors.hpp"
#include "pear/rng.hpp"

namespace pear {

namespace {

constexpr Index kCalibrationExamples = 2048;
constexpr int kBalanceIterations = 400;
constexpr Index kLabelChunk = 256;

void check_arch(const SyntheticTask& task, const BackboneConfig& arch) {
  if (arch.input_dim != task.input_dim || arch.seq_len != task.seq_len ||
      arch.classes != task.classes)
    throw usage_error("backbone config and task disagree on input_dim/seq_len/classes");
}

BackboneConfig teacher_config(const SyntheticTask& task, const BackboneConfig& arch) {
  BackboneConfig cfg = arch;
  cfg.input_dim = task.input_dim;
  cfg.seq_len = task.seq_len;
  cfg.classes = task.classes;
  return cfg;
}

std::vector<double> gaussian_inputs(uint64_t seed, Index n, Index seq, Index dim) {
  Rng rng(seed);
  std::vector<double> x(static_cast<size_t>(n * seq * dim));
  for (auto& v : x) v = rng.gauss();
  return x;
}

// Logits of the teacher over packed inputs, computed in chunks.
std::vector<double> teacher_logits(const TransformerModel& teacher, const std::vector<double>& x,
                                   Index n) {
  NoGradGuard ng;
  const Index seq = teacher.config().seq_len;
  const Index dim = teacher.config().input_dim;
  const Index classes = teacher.config().classes;
  std::vector<double> logits(static_cast<size_t>(n * classes));
  for (Index start = 0; start < n; start += kLabelChunk) {
    const Index count = std::min(kLabelChunk, n - start);
    Tensor chunk({count * seq, dim},
                 std::vector<double>(x.begin() + start * seq * dim,
                                     x.begin() + (start + count) * seq * dim));
    Tensor z = teacher.forward(chunk, count);
    std::copy(z.data().begin(), z.data().end(), logits.begin() + start * classes);
  }
  return logits;
}

int argmax_with_offsets(const double* z, const std::vector<double>& offsets, int classes) {
  int best = 0;
  double best_v = z[0] - offsets[0];
  for (int c = 1; c < classes; ++c) {
    const double v = z[c] - offsets[static_cast<size_t>(c)];
    if (v > best_v) {
      best_v = v;
      best = c;
    }
  }
  return best;
}

// Per-class offsets tuned so argmax(z - b) hits every class with roughly
// equal frequency on the calibration sample.
std::vector<double> balance_offsets(const std::vector<double>& calib_logits, Index n, int classes) {
  std::vector<double> offsets(static_cast<size_t>(classes), 0.0);

  double mean = 0.0;
  for (double v : calib_logits) mean += v;
  mean /= static_cast<double>(calib_logits.size());
  double var = 0.0;
  for (double v : calib_logits) var += (v - mean) * (v - mean);
  const double logit_std = std::sqrt(var / static_cast<double>(calib_logits.size()));
  const double target = 1.0 / static_cast<double>(classes);

  std::vector<double> freq(static_cast<size_t>(classes));
  for (int it = 0; it < kBalanceIterations; ++it) {
    std::fill(freq.begin(), freq.end(), 0.0);
    for (Index i = 0; i < n; ++i)
      freq[static_cast<size_t>(
          argmax_with_offsets(calib_logits.data() + i * classes, offsets, classes))] += 1.0;
    const double lr = logit_std * 2.0 / std::sqrt(static_cast<double>(it + 1));
    for (int c = 0; c < classes; ++c)
      offsets[static_cast<size_t>(c)] += lr * (freq[static_cast<size_t>(c)] / static_cast<double>(n) - target);
  }
  return offsets;
}

std::vector<int> label_with(const TransformerModel& teacher, const std::vector<double>& offsets,
                            const std::vector<double>& x, Index n) {
  const int classes = teacher.config().classes;
  const std::vector<double> logits = teacher_logits(teacher, x, n);
  std::vector<int> y(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i)
    y[static_cast<size_t>(i)] = argmax_with_offsets(logits.data() + i * classes, offsets, classes);
  return y;
}

// Perturbs the teacher's attention projections with low-rank updates that
// share a common direction across positions. Tied adapters can only serve
// two positions at once when the updates those positions need are related,
// which is what pretrained-backbone adaptation looks like in practice.
// Per-position magnitudes are log-uniform, so some positions matter more.
void shift_teacher(TransformerModel& teacher, const SyntheticTask& task, uint64_t seed) {
  if (task.shift_scale == 0.0) return;
  Rng rng(seed);
  const Index dim = teacher.config().model_dim;
  const Index r = task.shift_rank;

  auto random_factors = [&](std::vector<double>& a, std::vector<double>& b) {
    a.resize(static_cast<size_t>(dim * r));
    b.resize(static_cast<size_t>(r * dim));
    for (auto& v : a) v = rng.gauss();
    for (auto& v : b) v = rng.gauss();
  };
  std::vector<double> common_a, common_b;
  random_factors(common_a, common_b);
  Eigen::Map<const MatrixR<double>> ca(common_a.data(), dim, r);
  Eigen::Map<const MatrixR<double>> cb(common_b.data(), r, dim);

  const double c = task.shift_correlation;
  const double indep = std::sqrt(1.0 - c * c);
  std::vector<double> pa, pb;
  for (auto& [name, t] : teacher.named_backbone_tensors()) {
    const bool is_q = name.size() > 2 && name.substr(name.size() - 2) == "wq";
    const bool is_v = name.size() > 2 && name.substr(name.size() - 2) == "wv";
    if (!is_q && !is_v) continue;
    // log-uniform in [0.3, 1.0]
    const double mag = std::exp(std::log(0.5) + rng.uniform() * (0.0 - std::log(0.5)));
    // A rank-r product of unit normals has per-element variance r.
    const double sigma = task.shift_scale * task.teacher_init_std * mag / std::sqrt(static_cast<double>(r));
    random_factors(pa, pb);
    Eigen::Map<const MatrixR<double>> ia(pa.data(), dim, r);
    Eigen::Map<const MatrixR<double>> ib(pb.data(), r, dim);
    t.mat().noalias() += sigma * (c * (ca * cb) + indep * (ia * ib));
  }
}

struct Teachers {
  TransformerModel pretrain;
  TransformerModel downstream;
  std::vector<double> pretrain_offsets;
  std::vector<double> downstream_offsets;
};

Teachers build_teachers(const SyntheticTask& task, const BackboneConfig& arch) {
  const BackboneConfig cfg = teacher_config(task, arch);
  TransformerModel t0(cfg, derive_seed(task.generator_seed, "teacher"), task.teacher_init_std);
  t0.set_adapters_enabled(false);

  TransformerModel t1 = t0.clone();
  shift_teacher(t1, task, derive_seed(task.generator_seed, "teacher-shift"));

  // Same calibration inputs for both teachers, so a zero shift yields the
  // identical labeling function.
  const std::vector<double> calib_x = gaussian_inputs(
      derive_seed(task.generator_seed, "calibration"), kCalibrationExamples, cfg.seq_len,
      cfg.input_dim);
  std::vector<double> b0 =
      balance_offsets(teacher_logits(t0, calib_x, kCalibrationExamples), kCalibrationExamples,
                      cfg.classes);
  std::vector<double> b1 =
      balance_offsets(teacher_logits(t1, calib_x, kCalibrationExamples), kCalibrationExamples,
                      cfg.classes);
  return Teachers{std::move(t0), std::move(t1), std::move(b0), std::move(b1)};
}

Dataset make_split(const TransformerModel& teacher, const std::vector<double>& offsets,
                   uint64_t seed, Index n, Index seq, Index dim) {
  Dataset ds;
  ds.n = n;
  ds.seq = seq;
  ds.dim = dim;
  ds.x = gaussian_inputs(seed, n, seq, dim);
  ds.y = label_with(teacher, offsets, ds.x, n);
  return ds;
}

}  // namespace

void SyntheticTask::validate() const {
  if (input_dim < 1 || seq_len < 1) throw usage_error("task input_dim and seq_len must be positive");
  if (classes < 2) throw usage_error("task needs at least 2 classes");
  if (teacher_init_std <= 0.0) throw usage_error("teacher_init_std must be positive");
  if (shift_scale < 0.0) throw usage_error("shift_scale must be nonnegative");
  if (shift_rank < 1) throw usage_error("shift_rank must be >= 1");
  if (shift_correlation < 0.0 || shift_correlation > 1.0)
    throw usage_error("shift_correlation must lie in [0, 1]");
  if (pretrain_examples < 1 || train_examples < 1 || val_examples < 1 || test_examples < 1)
    throw usage_error("all example counts must be positive");
}

TaskData generate_task(const SyntheticTask& task, const BackboneConfig& arch) {
  task.validate();
  check_arch(task, arch);
  const Teachers teachers = build_teachers(task, arch);
  const Index seq = task.seq_len, dim = task.input_dim;

  TaskData data;
  data.task_seed = task.generator_seed;
  data.pretrain = make_split(teachers.pretrain, teachers.pretrain_offsets,
                             derive_seed(task.generator_seed, "split-pretrain"),
                             task.pretrain_examples, seq, dim);
  data.train = make_split(teachers.downstream, teachers.downstream_offsets,
                          derive_seed(task.generator_seed, "split-train"), task.train_examples,
                          seq, dim);
  data.val = make_split(teachers.downstream, teachers.downstream_offsets,
                        derive_seed(task.generator_seed, "split-val"), task.val_examples, seq, dim);
  data.test = make_split(teachers.downstream, teachers.downstream_offsets,
                         derive_seed(task.generator_seed, "split-test"), task.test_examples, seq,
                         dim);
  return data;
}

std::vector<int> label_inputs(const SyntheticTask& task, const BackboneConfig& arch,
                              bool downstream, const std::vector<double>& x, Index n) {
  task.validate();
  check_arch(task, arch);
  const Teachers teachers = build_teachers(task, arch);
  return downstream ? label_with(teachers.downstream, teachers.downstream_offsets, x, n)
                    : label_with(teachers.pretrain, teachers.pretrain_offsets, x, n);
}

std::pair<Tensor, std::vector<int>> make_batch(const Dataset& ds, const std::vector<Index>& order,
                                               Index start, Index count) {
  const Index row = ds.seq * ds.dim;
  std::vector<double> xb(static_cast<size_t>(count * row));
  std::vector<int> yb(static_cast<size_t>(count));
  for (Index i = 0; i < count; ++i) {
    const Index src = order[static_cast<size_t>(start + i)];
    std::copy(ds.x.begin() + src * row, ds.x.begin() + (src + 1) * row, xb.begin() + i * row);
    yb[static_cast<size_t>(i)] = ds.y[static_cast<size_t>(src)];
  }
  return {Tensor({count * ds.seq, ds.dim}, std::move(xb)), std::move(yb)};
}

}  // namespace pear
