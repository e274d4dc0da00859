#pragma once

#include <map>
#include <string>
#include <vector>

#include "pear/adapter.hpp"

// First-order Taylor contribution scores for adapter pairs, accumulated over
// warm-up mini-batches. A pair's per-step contribution is the sum of
// |w * dL/dw| over every element of both its factors, treating the pair as
// one unit.

namespace pear {

class ImportanceReport {
 public:
  static constexpr const char* kFormulaTaylorFirstOrder = "taylor1-mean-abs-wg";

  ImportanceReport() = default;
  ImportanceReport(std::map<PositionId, double> scores, int steps, bool final_flag,
                   std::string formula);

  const std::map<PositionId, double>& scores() const { return scores_; }
  double score(PositionId id) const;
  int steps_accumulated() const { return steps_; }
  bool is_final() const { return final_; }
  const std::string& formula() const { return formula_; }
  Index n_positions() const { return static_cast<Index>(scores_.size()); }

 private:
  friend ImportanceReport& accumulate_step(const AdapterBank& bank, ImportanceReport& report);
  friend void finalize(ImportanceReport& report);

  std::map<PositionId, double> scores_;
  int steps_ = 0;
  bool final_ = false;
  std::string formula_ = kFormulaTaylorFirstOrder;
};

// Adds this mini-batch's contribution of every owned position. Must be
// called after backward() and before the gradients are cleared.
ImportanceReport& accumulate_step(const AdapterBank& bank, ImportanceReport& report);

// Converts accumulated sums into per-step means and seals the report.
void finalize(ImportanceReport& report);

// Position ids by descending score; ties broken by ascending id.
std::vector<PositionId> rank(const ImportanceReport& report);

}  // namespace pear
