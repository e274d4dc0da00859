#pragma once

#include <string>
#include <vector>

#include "pear/adapter.hpp"
#include "pear/importance.hpp"

// Turns a finalized importance report and a prune ratio into a share plan:
// the m lowest-contribution positions are pruned and taken over by the m
// highest-contribution survivors, rank-matched. Optionally a pruned pair's
// weights are folded into its donor first (knowledge checkpoint).

namespace pear {

enum class CheckpointMode { None, DA, SBA };
enum class CoefficientSource { Manual, FromScores };

struct KnowledgeCheckpointConfig {
  CheckpointMode mode = CheckpointMode::None;
  CoefficientSource source = CoefficientSource::Manual;
  double c1 = 0.5;
  double c2 = 0.5;
};

struct ShareAssignment {
  PositionId pruned = 0;
  PositionId donor = 0;
  // Fold coefficients resolved at planning time (donor weight c1, pruned
  // weight c2). Unused when the checkpoint mode is None.
  double c1 = 1.0;
  double c2 = 1.0;
};

// Sharing is weight tying by default: the donor pair is one parameter
// object serving both positions. Copied mode gives the pruned position an
// independent copy instead (ablation only; it does not reduce parameters).
enum class ShareMode { Tied, Copied };

struct SharePlan {
  double ratio = 0.0;
  int m = 0;
  std::vector<PositionId> pruned;            // descending contribution
  std::vector<PositionId> donors;            // descending contribution
  std::vector<ShareAssignment> assignment;   // rank-matched pairs
  KnowledgeCheckpointConfig checkpoint;

  bool empty() const { return m == 0; }
};

SharePlan plan(const ImportanceReport& report, double ratio,
               const KnowledgeCheckpointConfig& checkpoint);

// Applies a plan to the bank. Pear mode re-points each pruned position at
// its donor; vanilla mode prunes outright and ignores the checkpoint config.
void apply(AdapterBank& bank, const SharePlan& plan, bool vanilla,
           ShareMode mode = ShareMode::Tied);

// Direct aggregation: donor += pruned, elementwise on both factors.
void checkpoint_da(AdapterPair& donor, const AdapterPair& pruned);

// Score-based aggregation: donor = c1*donor + c2*pruned on both factors.
void checkpoint_sba(AdapterPair& donor, const AdapterPair& pruned, double c1, double c2);

std::string to_string(CheckpointMode mode);
std::string to_string(CoefficientSource source);
CheckpointMode checkpoint_mode_from_string(const std::string& s);
CoefficientSource coefficient_source_from_string(const std::string& s);

}  // namespace pear
