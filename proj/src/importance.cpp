#include "pear/importance.hpp"

#include <algorithm>
#include <cmath>

#include "pear/errors.hpp"

namespace pear {

namespace {

double abs_weight_grad_sum(const Tensor& t) {
  const auto& w = t.data();
  const auto& g = t.grad();
  double s = 0.0;
  for (size_t i = 0; i < w.size(); ++i) s += std::abs(w[i] * g[i]);
  return s;
}

}  // namespace

ImportanceReport::ImportanceReport(std::map<PositionId, double> scores, int steps, bool final_flag,
                                   std::string formula)
    : scores_(std::move(scores)), steps_(steps), final_(final_flag), formula_(std::move(formula)) {}

double ImportanceReport::score(PositionId id) const {
  auto it = scores_.find(id);
  if (it == scores_.end())
    throw usage_error("importance report has no score for position " + std::to_string(id));
  return it->second;
}

ImportanceReport& accumulate_step(const AdapterBank& bank, ImportanceReport& report) {
  if (report.final_) throw usage_error("cannot accumulate into a finalized importance report");

  const auto owned = bank.owned_ids();
  if (owned.empty()) throw usage_error("bank has no owned adapter positions to score");
  if (report.steps_ > 0) {
    if (static_cast<size_t>(report.scores_.size()) != owned.size())
      throw usage_error("owned position set changed between accumulation steps");
    for (PositionId id : owned)
      if (!report.scores_.count(id))
        throw usage_error("owned position set changed between accumulation steps");
  }

  for (PositionId id : owned) {
    const AdapterPair& pair = bank.owned_pair(id);
    if (!pair.A.has_grad() || !pair.B.has_grad())
      throw usage_error("no gradients captured for position " + std::to_string(id) +
                        "; run backward before accumulating importance");
    const double inc = abs_weight_grad_sum(pair.A) + abs_weight_grad_sum(pair.B);
    if (!std::isfinite(inc))
      throw numeric_error("non-finite importance contribution at position " + std::to_string(id));
    report.scores_[id] += inc;
  }
  ++report.steps_;
  return report;
}

void finalize(ImportanceReport& report) {
  if (report.final_) throw usage_error("importance report already finalized");
  if (report.steps_ < 1) throw usage_error("cannot finalize an importance report with zero steps");
  for (auto& [id, s] : report.scores_) s /= static_cast<double>(report.steps_);
  report.final_ = true;
}

std::vector<PositionId> rank(const ImportanceReport& report) {
  if (!report.is_final()) throw usage_error("rank requires a finalized importance report");
  std::vector<PositionId> ids;
  ids.reserve(report.scores().size());
  for (const auto& [id, s] : report.scores()) ids.push_back(id);
  std::sort(ids.begin(), ids.end(), [&](PositionId lhs, PositionId rhs) {
    const double sl = report.scores().at(lhs);
    const double sr = report.scores().at(rhs);
    if (sl != sr) return sl > sr;
    return lhs < rhs;
  });
  return ids;
}

}  // namespace pear
