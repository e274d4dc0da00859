#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "pear/errors.hpp"
#include "pear/io.hpp"
#include "testutil.hpp"

using namespace pear;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("pear-test-" + std::to_string(::getpid()) + "-" +
                                        std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
  fs::path file(const char* name) const { return path / name; }
};

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// Random bank with a mix of owned, shared and pruned slots.
AdapterBank random_bank(Rng& rng) {
  const int n = 2 + static_cast<int>(rng.uniform_below(7));
  std::vector<PositionInfo> catalog;
  for (int i = 0; i < n; ++i) catalog.push_back({i, i / 2, i % 2 == 0 ? "q" : "v"});
  const Index a = 2 + static_cast<Index>(rng.uniform_below(5));
  const Index b = 2 + static_cast<Index>(rng.uniform_below(5));
  const Index d = 1 + static_cast<Index>(rng.uniform_below(static_cast<uint64_t>(std::min(a, b) - 1)));
  AdapterBank bank = AdapterBank::create(std::move(catalog), {a, b, d}, 1.0, rng);
  for (PositionId id : bank.owned_ids()) {
    for (auto& v : bank.owned_pair(id).A.data()) v = rng.gauss();
    for (auto& v : bank.owned_pair(id).B.data()) v = rng.gauss();
  }
  // reshape some slots; donors stay owned, so walk from high ids down and
  // never touch a position something already shares from
  std::vector<bool> is_donor(static_cast<size_t>(n), false);
  for (PositionId id = n - 1; id >= 1; --id) {
    if (is_donor[static_cast<size_t>(id)]) continue;
    const uint64_t kind = rng.uniform_below(3);
    if (kind == 1) {
      bank.set_slot(id, PrunedSlot{});
    } else if (kind == 2) {
      PositionId donor = static_cast<PositionId>(rng.uniform_below(static_cast<uint64_t>(id)));
      if (bank.is_owned(donor)) {
        bank.set_slot(id, SharedSlot{donor});
        is_donor[static_cast<size_t>(donor)] = true;
      }
    }
  }
  return bank;
}

bool banks_equal(const AdapterBank& x, const AdapterBank& y) {
  if (x.n_positions() != y.n_positions()) return false;
  if (!(x.signature() == y.signature())) return false;
  for (PositionId id = 0; id < x.n_positions(); ++id) {
    if (x.slot(id).index() != y.slot(id).index()) return false;
    if (x.is_owned(id)) {
      if (x.owned_pair(id).A.data() != y.owned_pair(id).A.data()) return false;
      if (x.owned_pair(id).B.data() != y.owned_pair(id).B.data()) return false;
    }
    if (const auto* s = std::get_if<SharedSlot>(&x.slot(id)))
      if (s->donor != std::get_if<SharedSlot>(&y.slot(id))->donor) return false;
  }
  return true;
}

void quantize_f32(AdapterBank& bank) {
  for (PositionId id : bank.owned_ids())
    for (Tensor* t : {&bank.owned_pair(id).A, &bank.owned_pair(id).B})
      for (auto& v : t->data()) v = static_cast<double>(static_cast<float>(v));
}

}  // namespace

TEST_CASE("banks round-trip with exact slot structure and f32-exact weights") {
  TempDir dir;
  Rng rng(2024);
  for (int trial = 0; trial < 50; ++trial) {
    AdapterBank bank = random_bank(rng);
    const fs::path p = dir.file("bank.pear");
    save_bank(bank, p);
    AdapterBank loaded = load_bank(p);

    AdapterBank expected = bank.clone();
    quantize_f32(expected);
    CHECK(banks_equal(loaded, expected));

    // second save is byte-identical
    const fs::path p2 = dir.file("bank2.pear");
    save_bank(loaded, p2);
    CHECK(slurp(p) == slurp(p2));
  }
}

TEST_CASE("payload stores owned pairs only, so sharing halves the file payload") {
  TempDir dir;
  Rng rng(7);
  std::vector<PositionInfo> catalog;
  for (int i = 0; i < 4; ++i) catalog.push_back({i, i / 2, i % 2 == 0 ? "q" : "v"});
  AdapterBank bank = AdapterBank::create(catalog, {8, 8, 2}, 1.0, rng);

  save_bank(bank, dir.file("full.pear"));
  const auto full_size = fs::file_size(dir.file("full.pear"));
  CHECK(bank_payload_bytes(bank) == 4u * 32u * 4u);

  bank.set_slot(1, SharedSlot{0});
  bank.set_slot(3, SharedSlot{2});
  save_bank(bank, dir.file("half.pear"));
  CHECK(bank_payload_bytes(bank) == 2u * 32u * 4u);

  // the file shrinks even though the manifest gains donor references
  const auto half_size = fs::file_size(dir.file("half.pear"));
  CHECK(half_size < full_size);
}

TEST_CASE("truncated payloads are a corrupt-payload error, not a partial bank") {
  TempDir dir;
  Rng rng(3);
  AdapterBank bank = random_bank(rng);
  const fs::path p = dir.file("bank.pear");
  save_bank(bank, p);
  std::string bytes = slurp(p);
  spit(p, bytes.substr(0, bytes.size() - 4));
  try {
    load_bank(p);
    FAIL("expected data_error");
  } catch (const data_error& e) {
    CHECK(e.kind() == data_error::Kind::corrupt_payload);
  }
}

TEST_CASE("unsupported format versions are rejected as version mismatch") {
  TempDir dir;
  nlohmann::json manifest{{"format_version", 99},
                          {"kind", "adapter-bank"},
                          {"payload_bytes", 0}};
  const std::string m = manifest.dump();
  std::string bytes = "PEARBIN1";
  uint64_t len = m.size();
  bytes.append(reinterpret_cast<const char*>(&len), 8);
  bytes += m;
  const fs::path p = dir.file("future.pear");
  spit(p, bytes);
  try {
    load_bank(p);
    FAIL("expected data_error");
  } catch (const data_error& e) {
    CHECK(e.kind() == data_error::Kind::version_mismatch);
  }
}

TEST_CASE("dangling donor references are rejected on load") {
  TempDir dir;
  nlohmann::json manifest{
      {"format_version", 1},
      {"kind", "adapter-bank"},
      {"signature", {{"a", 2}, {"b", 2}, {"d", 1}}},
      {"scale", 1.0},
      {"payload_dtype", "f32"},
      {"payload_bytes", 0},
      {"positions",
       {{{"id", 0}, {"layer", 0}, {"projection", "q"}, {"slot", "pruned"}},
        {{"id", 1}, {"layer", 0}, {"projection", "v"}, {"slot", "shared"}, {"donor", 0}}}}};
  const std::string m = manifest.dump();
  std::string bytes = "PEARBIN1";
  uint64_t len = m.size();
  bytes.append(reinterpret_cast<const char*>(&len), 8);
  bytes += m;
  const fs::path p = dir.file("dangling.pear");
  spit(p, bytes);
  try {
    load_bank(p);
    FAIL("expected data_error");
  } catch (const data_error& e) {
    CHECK(e.kind() == data_error::Kind::dangling_reference);
  }
}

TEST_CASE("importance reports round-trip byte-stably") {
  TempDir dir;
  ImportanceReport report({{0, 1.5e-3}, {1, 0.25}, {2, 7.123456789012345e-7}}, 32, true,
                          ImportanceReport::kFormulaTaylorFirstOrder);
  const fs::path p = dir.file("imp.txt");
  write_importance_report(report, p);
  const ImportanceReport loaded = read_importance_report(p);
  CHECK(loaded.scores() == report.scores());
  CHECK(loaded.steps_accumulated() == 32);
  CHECK(loaded.is_final());
  CHECK(loaded.formula() == report.formula());

  const fs::path p2 = dir.file("imp2.txt");
  write_importance_report(loaded, p2);
  CHECK(slurp(p) == slurp(p2));
}

TEST_CASE("share plans round-trip byte-stably") {
  TempDir dir;
  ImportanceReport report({{0, 5}, {1, 1}, {2, 4}, {3, 2}, {4, 9}, {5, 7}}, 4, true,
                          ImportanceReport::kFormulaTaylorFirstOrder);
  KnowledgeCheckpointConfig kc;
  kc.mode = CheckpointMode::SBA;
  kc.source = CoefficientSource::FromScores;
  const SharePlan p = plan(report, 0.5, kc);
  const fs::path f = dir.file("plan.txt");
  write_share_plan(p, f);
  const SharePlan loaded = read_share_plan(f);
  CHECK(loaded.ratio == p.ratio);
  CHECK(loaded.m == p.m);
  CHECK(loaded.pruned == p.pruned);
  CHECK(loaded.donors == p.donors);
  REQUIRE(loaded.assignment.size() == p.assignment.size());
  for (size_t i = 0; i < p.assignment.size(); ++i) {
    CHECK(loaded.assignment[i].pruned == p.assignment[i].pruned);
    CHECK(loaded.assignment[i].donor == p.assignment[i].donor);
    CHECK(loaded.assignment[i].c1 == p.assignment[i].c1);
    CHECK(loaded.assignment[i].c2 == p.assignment[i].c2);
  }
  const fs::path f2 = dir.file("plan2.txt");
  write_share_plan(loaded, f2);
  CHECK(slurp(f) == slurp(f2));
}

TEST_CASE("metrics round-trip without wall-clock time") {
  TempDir dir;
  Metrics m;
  m.variant = "pear-sba";
  m.task_seed = 3;
  m.train_seed = 9;
  m.train_loss = {1.25, 0.75, 0.6000000000000001};
  m.val_accuracy = 0.8125;
  m.test_accuracy = 0.7998046875;
  m.trainable_params = 512;
  m.positions_adapted = 4;
  m.wall_seconds = 123.456;  // must not appear in the file

  const fs::path p = dir.file("metrics.txt");
  write_metrics(m, p);
  CHECK(slurp(p).find("123.456") == std::string::npos);

  const Metrics loaded = read_metrics(p);
  CHECK(loaded.variant == m.variant);
  CHECK(loaded.train_loss == m.train_loss);
  CHECK(loaded.val_accuracy == m.val_accuracy);
  CHECK(loaded.test_accuracy == m.test_accuracy);
  CHECK(loaded.trainable_params == m.trainable_params);
  CHECK(loaded.positions_adapted == m.positions_adapted);
  CHECK(loaded.wall_seconds == 0.0);

  const fs::path p2 = dir.file("metrics2.txt");
  write_metrics(loaded, p2);
  CHECK(slurp(p) == slurp(p2));
}

TEST_CASE("parse errors carry the offending file and line context") {
  TempDir dir;
  const fs::path p = dir.file("bad.txt");
  spit(p, "pear-report 1\nkind metrics\nvariant pear\nwrong-key 3\n");
  CHECK_THROWS_AS(read_metrics(p), data_error);

  spit(p, "not a report\n");
  CHECK_THROWS_AS(read_metrics(p), data_error);
}

TEST_CASE("backbones round-trip their configuration and task") {
  TempDir dir;
  SyntheticTask task;
  task.generator_seed = 11;
  task.input_dim = 8;
  task.seq_len = 6;
  task.classes = 3;
  task.pretrain_examples = 100;
  task.train_examples = 100;
  task.val_examples = 50;
  task.test_examples = 50;
  BackboneConfig cfg;
  cfg.layers = 1;
  cfg.model_dim = 8;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.input_dim = 8;
  cfg.seq_len = 6;
  cfg.classes = 3;
  cfg.adapter_rank = 2;
  TransformerModel model(cfg, 5);

  const fs::path p = dir.file("backbone.pear");
  save_backbone(model, task, p);
  LoadedBackbone lb = load_backbone(p);
  CHECK(lb.task.generator_seed == 11);
  CHECK(lb.model.config().model_dim == 8);

  // weights survive at f32 precision
  auto orig = model.named_backbone_tensors();
  auto loaded = lb.model.named_backbone_tensors();
  for (size_t i = 0; i < orig.size(); ++i) {
    for (size_t j = 0; j < orig[i].second.data().size(); ++j) {
      const double expect = static_cast<double>(static_cast<float>(orig[i].second.data()[j]));
      CHECK(loaded[i].second.data()[j] == expect);
    }
  }

  // kind mismatch: a bank is not a backbone
  Rng rng(1);
  AdapterBank bank = random_bank(rng);
  save_bank(bank, dir.file("bank.pear"));
  CHECK_THROWS_AS(load_backbone(dir.file("bank.pear")), data_error);
}

TEST_CASE("no temp files are left behind by atomic writers") {
  TempDir dir;
  Metrics m;
  m.variant = "full";
  write_metrics(m, dir.file("m.txt"));
  int entries = 0;
  for (const auto& e : fs::directory_iterator(dir.path)) {
    ++entries;
    CHECK(e.path().extension() != ".tmp");
  }
  CHECK(entries == 1);
}
