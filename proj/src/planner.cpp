#include "pear/planner.hpp"

#include <cmath>

#include "pear/errors.hpp"

namespace pear {

SharePlan plan(const ImportanceReport& report, double ratio,
               const KnowledgeCheckpointConfig& checkpoint) {
  if (!report.is_final()) throw usage_error("plan requires a finalized importance report");
  if (!(ratio > 0.0)) throw usage_error("invalid prune ratio " + std::to_string(ratio) +
                                        ", must be in (0, 0.5]");
  if (ratio > 0.5)
    throw usage_error("prune ratio " + std::to_string(ratio) +
                      " leaves insufficient distinct donors; at most 0.5 is supported");
  if (checkpoint.source == CoefficientSource::Manual &&
      (!std::isfinite(checkpoint.c1) || !std::isfinite(checkpoint.c2) || checkpoint.c1 < 0.0 ||
       checkpoint.c2 < 0.0))
    throw usage_error("checkpoint coefficients must be finite and nonnegative");

  const Index n = report.n_positions();
  if (n < 2) throw usage_error("planning needs at least 2 scored positions, got " + std::to_string(n));

  SharePlan out;
  out.ratio = ratio;
  out.checkpoint = checkpoint;
  out.m = static_cast<int>(std::floor(static_cast<double>(n) * ratio));
  if (out.m == 0) return out;

  const std::vector<PositionId> order = rank(report);  // descending contribution
  out.donors.assign(order.begin(), order.begin() + out.m);
  out.pruned.assign(order.end() - out.m, order.end());

  out.assignment.reserve(static_cast<size_t>(out.m));
  for (int i = 0; i < out.m; ++i) {
    ShareAssignment a;
    a.pruned = out.pruned[static_cast<size_t>(i)];
    a.donor = out.donors[static_cast<size_t>(i)];
    switch (checkpoint.mode) {
      case CheckpointMode::None:
        a.c1 = 1.0;
        a.c2 = 0.0;
        break;
      case CheckpointMode::DA:
        a.c1 = 1.0;
        a.c2 = 1.0;
        break;
      case CheckpointMode::SBA:
        if (checkpoint.source == CoefficientSource::FromScores) {
          const double sd = report.score(a.donor);
          const double sp = report.score(a.pruned);
          a.c1 = (sd + sp > 0.0) ? sd / (sd + sp) : 0.5;
          a.c2 = 1.0 - a.c1;
        } else {
          a.c1 = checkpoint.c1;
          a.c2 = checkpoint.c2;
        }
        break;
    }
    out.assignment.push_back(a);
  }
  return out;
}

void checkpoint_da(AdapterPair& donor, const AdapterPair& pruned) {
  if (donor.A.shape() != pruned.A.shape() || donor.B.shape() != pruned.B.shape())
    throw shape_error("checkpoint: pair shapes differ, A " + donor.A.shape_str() + " vs " +
                      pruned.A.shape_str() + ", B " + donor.B.shape_str() + " vs " +
                      pruned.B.shape_str());
  auto fold = [](Tensor& d, const Tensor& p) {
    auto& dv = d.data();
    const auto& pv = p.data();
    for (size_t i = 0; i < dv.size(); ++i) dv[i] += pv[i];
  };
  fold(donor.A, pruned.A);
  fold(donor.B, pruned.B);
}

void checkpoint_sba(AdapterPair& donor, const AdapterPair& pruned, double c1, double c2) {
  if (donor.A.shape() != pruned.A.shape() || donor.B.shape() != pruned.B.shape())
    throw shape_error("checkpoint: pair shapes differ, A " + donor.A.shape_str() + " vs " +
                      pruned.A.shape_str() + ", B " + donor.B.shape_str() + " vs " +
                      pruned.B.shape_str());
  if (!std::isfinite(c1) || !std::isfinite(c2))
    throw usage_error("checkpoint coefficients must be finite");
  auto fold = [c1, c2](Tensor& d, const Tensor& p) {
    auto& dv = d.data();
    const auto& pv = p.data();
    for (size_t i = 0; i < dv.size(); ++i) dv[i] = c1 * dv[i] + c2 * pv[i];
  };
  fold(donor.A, pruned.A);
  fold(donor.B, pruned.B);
}

void apply(AdapterBank& bank, const SharePlan& plan, bool vanilla, ShareMode mode) {
  for (const auto& a : plan.assignment) {
    if (!bank.is_owned(a.pruned))
      throw usage_error("plan prunes position " + std::to_string(a.pruned) +
                        ", which is not an owned slot");
    if (!bank.is_owned(a.donor))
      throw usage_error("plan uses donor " + std::to_string(a.donor) +
                        ", which is not an owned slot");
  }

  for (const auto& a : plan.assignment) {
    if (vanilla) {
      bank.set_slot(a.pruned, PrunedSlot{});
      continue;
    }
    if (plan.checkpoint.mode == CheckpointMode::DA) {
      checkpoint_da(bank.owned_pair(a.donor), bank.owned_pair(a.pruned));
    } else if (plan.checkpoint.mode == CheckpointMode::SBA) {
      checkpoint_sba(bank.owned_pair(a.donor), bank.owned_pair(a.pruned), a.c1, a.c2);
    }
    if (mode == ShareMode::Tied) {
      bank.set_slot(a.pruned, SharedSlot{a.donor});
    } else {
      const AdapterPair& donor = bank.owned_pair(a.donor);
      AdapterPair copy;
      copy.A = donor.A.copy(true);
      copy.B = donor.B.copy(true);
      copy.scale = donor.scale;
      bank.set_slot(a.pruned, OwnedSlot{std::move(copy)});
    }
  }
}

std::string to_string(CheckpointMode mode) {
  switch (mode) {
    case CheckpointMode::None: return "none";
    case CheckpointMode::DA: return "da";
    case CheckpointMode::SBA: return "sba";
  }
  return "none";
}

std::string to_string(CoefficientSource source) {
  return source == CoefficientSource::Manual ? "manual" : "from-scores";
}

CheckpointMode checkpoint_mode_from_string(const std::string& s) {
  if (s == "none") return CheckpointMode::None;
  if (s == "da") return CheckpointMode::DA;
  if (s == "sba") return CheckpointMode::SBA;
  throw usage_error("unknown checkpoint mode '" + s + "', expected none, da or sba");
}

CoefficientSource coefficient_source_from_string(const std::string& s) {
  if (s == "manual") return CoefficientSource::Manual;
  if (s == "from-scores") return CoefficientSource::FromScores;
  throw usage_error("unknown coefficient source '" + s + "', expected manual or from-scores");
}

}  // namespace pear
