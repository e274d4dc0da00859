#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "pear/errors.hpp"
#include "pear/importance.hpp"
#include "testutil.hpp"

using namespace pear;

namespace {

AdapterBank make_bank(int n, uint64_t seed = 1) {
  std::vector<PositionInfo> catalog;
  for (int i = 0; i < n; ++i) catalog.push_back({i, i / 2, i % 2 == 0 ? "q" : "v"});
  Rng rng(seed);
  return AdapterBank::create(std::move(catalog), {4, 4, 2}, 1.0, rng);
}

void set_grad(Tensor& t, double value) {
  t.storage()->ensure_grad();
  std::fill(t.grad().begin(), t.grad().end(), value);
}

void give_random_state(AdapterBank& bank, Rng& rng) {
  for (PositionId id : bank.owned_ids()) {
    AdapterPair& p = bank.owned_pair(id);
    for (Tensor* t : {&p.A, &p.B}) {
      for (auto& v : t->data()) v = rng.gauss();
      t->storage()->ensure_grad();
      for (auto& v : t->grad()) v = rng.gauss();
    }
  }
}

// Independent oracle: recompute sum |w*g| from explicitly stored copies.
double brute_force_score(const std::vector<std::pair<std::vector<double>, std::vector<double>>>& wg) {
  double s = 0.0;
  for (const auto& [w, g] : wg)
    for (size_t i = 0; i < w.size(); ++i) s += std::abs(w[i] * g[i]);
  return s;
}

}  // namespace

TEST_CASE("all-zero gradients contribute zero to every position") {
  AdapterBank bank = make_bank(3);
  for (PositionId id : bank.owned_ids()) {
    set_grad(bank.owned_pair(id).A, 0.0);
    set_grad(bank.owned_pair(id).B, 0.0);
  }
  ImportanceReport report;
  accumulate_step(bank, report);
  for (const auto& [id, s] : report.scores()) CHECK(s == 0.0);
  CHECK(report.steps_accumulated() == 1);
}

TEST_CASE("hand-evaluated single-position contribution") {
  std::vector<PositionInfo> catalog{{0, 0, "q"}};
  Rng rng(1);
  AdapterBank bank = AdapterBank::create(catalog, {2, 2, 1}, 1.0, rng);
  AdapterPair& p = bank.owned_pair(0);
  p.A.data() = {1.0, -2.0};  // flattened 2x1
  set_grad(p.A, 0.5);
  p.B.data() = {0.0, 0.0};
  set_grad(p.B, 0.7);  // zero weights, so B contributes nothing

  ImportanceReport report;
  accumulate_step(bank, report);
  CHECK(report.score(0) == doctest::Approx(1.5).epsilon(1e-15));  // |1*0.5| + |-2*0.5|
}

TEST_CASE("two identical accumulation steps double the raw score") {
  AdapterBank bank = make_bank(2);
  Rng rng(8);
  give_random_state(bank, rng);
  ImportanceReport report;
  accumulate_step(bank, report);
  const double once = report.score(0);
  accumulate_step(bank, report);
  CHECK(report.score(0) == doctest::Approx(2.0 * once).epsilon(1e-15));
  CHECK(report.steps_accumulated() == 2);
}

TEST_CASE("missing gradients raise a no-gradients-captured error") {
  AdapterBank bank = make_bank(2);
  ImportanceReport report;
  try {
    accumulate_step(bank, report);
    FAIL("expected usage_error");
  } catch (const usage_error& e) {
    CHECK(std::string(e.what()).find("no gradients captured") != std::string::npos);
  }
}

TEST_CASE("finalize divides by steps and is single-shot") {
  ImportanceReport one({{0, 3.0}, {1, 1.0}}, 1, false, ImportanceReport::kFormulaTaylorFirstOrder);
  finalize(one);
  CHECK(one.score(0) == 3.0);  // one step: identity
  CHECK(one.score(1) == 1.0);

  ImportanceReport two({{0, 3.0}, {1, 1.0}}, 2, false, ImportanceReport::kFormulaTaylorFirstOrder);
  finalize(two);
  CHECK(two.score(0) == 1.5);
  CHECK(two.score(1) == 0.5);
  CHECK_THROWS_AS(finalize(two), usage_error);

  ImportanceReport empty;
  CHECK_THROWS_AS(finalize(empty), usage_error);
}

TEST_CASE("rank orders by descending score with ascending-id ties") {
  ImportanceReport report({{0, 5.0}, {1, 1.0}, {2, 4.0}, {3, 2.0}, {4, 9.0}, {5, 7.0}}, 1, true,
                          ImportanceReport::kFormulaTaylorFirstOrder);
  CHECK(rank(report) == std::vector<PositionId>{4, 5, 0, 2, 3, 1});

  ImportanceReport ties({{0, 1.0}, {1, 1.0}, {2, 1.0}}, 1, true,
                        ImportanceReport::kFormulaTaylorFirstOrder);
  CHECK(rank(ties) == std::vector<PositionId>{0, 1, 2});

  ImportanceReport single({{7, 3.0}}, 1, true, ImportanceReport::kFormulaTaylorFirstOrder);
  CHECK(rank(single) == std::vector<PositionId>{7});

  ImportanceReport not_final({{0, 1.0}}, 1, false, ImportanceReport::kFormulaTaylorFirstOrder);
  CHECK_THROWS_AS(rank(not_final), usage_error);
}

TEST_CASE("rank matches a reference selection sort on random scores") {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 2 + static_cast<int>(rng.uniform_below(9));
    std::map<PositionId, double> scores;
    for (int i = 0; i < n; ++i)
      scores[i] = rng.uniform_below(2) ? static_cast<double>(rng.uniform_below(4)) : rng.uniform();
    ImportanceReport report(scores, 1, true, ImportanceReport::kFormulaTaylorFirstOrder);

    // reference: repeated max extraction, lowest id wins ties
    std::vector<PositionId> remaining, expect;
    for (const auto& [id, s] : scores) remaining.push_back(id);
    while (!remaining.empty()) {
      size_t best = 0;
      for (size_t i = 1; i < remaining.size(); ++i)
        if (scores[remaining[i]] > scores[remaining[best]]) best = i;
      expect.push_back(remaining[best]);
      remaining.erase(remaining.begin() + static_cast<long>(best));
    }
    CHECK(rank(report) == expect);
  }
}

TEST_CASE("scaling all weights and gradients preserves the ranking") {
  AdapterBank bank = make_bank(5);
  Rng rng(31);
  give_random_state(bank, rng);

  ImportanceReport base;
  accumulate_step(bank, base);
  finalize(base);

  for (PositionId id : bank.owned_ids()) {
    AdapterPair& p = bank.owned_pair(id);
    for (Tensor* t : {&p.A, &p.B}) {
      for (auto& v : t->data()) v *= 3.7;
      for (auto& v : t->grad()) v *= 3.7;
    }
  }
  ImportanceReport scaled;
  accumulate_step(bank, scaled);
  finalize(scaled);
  CHECK(rank(base) == rank(scaled));
}

TEST_CASE("relabeling positions permutes scores identically") {
  AdapterBank bank = make_bank(4);
  Rng rng(13);
  give_random_state(bank, rng);
  ImportanceReport report;
  accumulate_step(bank, report);

  // a permuted bank: same pairs installed at shuffled position ids
  const std::vector<PositionId> perm = {2, 0, 3, 1};
  AdapterBank permuted = make_bank(4, 99);
  for (int i = 0; i < 4; ++i) {
    AdapterPair& dst = permuted.owned_pair(perm[static_cast<size_t>(i)]);
    const AdapterPair& src = bank.owned_pair(i);
    dst.A.data() = src.A.data();
    dst.B.data() = src.B.data();
    dst.A.storage()->grad = src.A.storage()->grad;
    dst.B.storage()->grad = src.B.storage()->grad;
  }
  ImportanceReport preport;
  accumulate_step(permuted, preport);
  for (int i = 0; i < 4; ++i)
    CHECK(preport.score(perm[static_cast<size_t>(i)]) == report.score(i));
}

TEST_CASE("accumulated scores equal a brute-force recomputation") {
  AdapterBank bank = make_bank(3);
  Rng rng(55);
  ImportanceReport report;

  std::vector<std::vector<std::pair<std::vector<double>, std::vector<double>>>> history(3);
  const int steps = 7;
  for (int step = 0; step < steps; ++step) {
    give_random_state(bank, rng);
    for (PositionId id : bank.owned_ids()) {
      const AdapterPair& p = bank.owned_pair(id);
      history[static_cast<size_t>(id)].push_back({p.A.data(), p.A.grad()});
      history[static_cast<size_t>(id)].push_back({p.B.data(), p.B.grad()});
    }
    accumulate_step(bank, report);
  }
  finalize(report);
  for (PositionId id : bank.owned_ids()) {
    const double expect = brute_force_score(history[static_cast<size_t>(id)]) / steps;
    CHECK(std::abs(report.score(id) - expect) / expect < 1e-12);
  }
}
