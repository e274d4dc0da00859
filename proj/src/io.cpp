#include "pear/io.hpp"

#include <bit>
#include <cinttypes>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pear/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts are unsupported");

namespace pear {

namespace {

using nlohmann::json;

constexpr char kMagic[8] = {'P', 'E', 'A', 'R', 'B', 'I', 'N', '1'};
constexpr int kFormatVersion = 1;
constexpr const char* kReportHeader = "pear-report 1";

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Atomic file writing
// ---------------------------------------------------------------------------

void atomic_write(const std::filesystem::path& path, const std::string& contents) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw data_error(data_error::Kind::io, "cannot open " + tmp.string() + " for writing");
    out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!out) throw data_error(data_error::Kind::io, "short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw data_error(data_error::Kind::io, "cannot move " + tmp.string() + " into place: " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw data_error(data_error::Kind::io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return std::move(ss).str();
}

// ---------------------------------------------------------------------------
// Binary container
// ---------------------------------------------------------------------------

void append_u64(std::string& out, uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.append(b, 8);
}

void append_f32_block(std::string& out, const std::vector<double>& values) {
  const size_t start = out.size();
  out.resize(start + values.size() * 4);
  char* p = out.data() + start;
  for (double d : values) {
    const float f = static_cast<float>(d);
    std::memcpy(p, &f, 4);
    p += 4;
  }
}

void read_f32_block(const std::string& payload, size_t& offset, std::vector<double>& values) {
  if (offset + values.size() * 4 > payload.size())
    throw data_error(data_error::Kind::corrupt_payload, "payload shorter than manifest promises");
  const char* p = payload.data() + offset;
  for (double& d : values) {
    float f;
    std::memcpy(&f, p, 4);
    d = static_cast<double>(f);
    p += 4;
  }
  offset += values.size() * 4;
}

std::string pack_container(const json& manifest, const std::string& payload) {
  std::string out;
  out.append(kMagic, sizeof(kMagic));
  const std::string m = manifest.dump();
  append_u64(out, m.size());
  out += m;
  out += payload;
  return out;
}

struct Container {
  json manifest;
  std::string payload;
};

Container unpack_container(const std::filesystem::path& path, const char* expected_kind) {
  const std::string raw = read_file(path);
  if (raw.size() < sizeof(kMagic) + 8 || std::memcmp(raw.data(), kMagic, sizeof(kMagic)) != 0)
    throw data_error(data_error::Kind::parse, path.string() + " is not a pear binary file");
  uint64_t mlen;
  std::memcpy(&mlen, raw.data() + sizeof(kMagic), 8);
  if (sizeof(kMagic) + 8 + mlen > raw.size())
    throw data_error(data_error::Kind::corrupt_payload, path.string() + ": truncated manifest");

  Container c;
  try {
    c.manifest = json::parse(raw.substr(sizeof(kMagic) + 8, mlen));
  } catch (const json::exception& e) {
    throw data_error(data_error::Kind::parse, path.string() + ": bad manifest: " + e.what());
  }
  const int version = c.manifest.value("format_version", -1);
  if (version != kFormatVersion)
    throw data_error(data_error::Kind::version_mismatch,
                     path.string() + ": format version " + std::to_string(version) +
                         " unsupported, expected " + std::to_string(kFormatVersion));
  const std::string kind = c.manifest.value("kind", "");
  if (kind != expected_kind)
    throw data_error(data_error::Kind::parse, path.string() + ": expected a " +
                                                  std::string(expected_kind) + " file, found '" +
                                                  kind + "'");
  c.payload = raw.substr(sizeof(kMagic) + 8 + mlen);
  const uint64_t expect_bytes = c.manifest.value("payload_bytes", uint64_t{0});
  if (c.payload.size() != expect_bytes)
    throw data_error(data_error::Kind::corrupt_payload,
                     path.string() + ": payload is " + std::to_string(c.payload.size()) +
                         " bytes, manifest promises " + std::to_string(expect_bytes));
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Adapter banks
// ---------------------------------------------------------------------------

uint64_t bank_payload_bytes(const AdapterBank& bank) {
  return static_cast<uint64_t>(bank.owned_count()) *
         static_cast<uint64_t>(bank.signature().scalars_per_pair()) * 4u;
}

void save_bank(const AdapterBank& bank, const std::filesystem::path& path) {
  const auto& sig = bank.signature();
  json positions = json::array();
  double scale = 1.0;
  std::string payload;
  for (PositionId id = 0; id < bank.n_positions(); ++id) {
    const PositionInfo& info = bank.catalog()[static_cast<size_t>(id)];
    json p{{"id", info.id}, {"layer", info.layer}, {"projection", info.projection}};
    const AdapterSlot& slot = bank.slot(id);
    if (const auto* owned = std::get_if<OwnedSlot>(&slot)) {
      p["slot"] = "owned";
      scale = owned->pair.scale;
      append_f32_block(payload, owned->pair.A.data());
      append_f32_block(payload, owned->pair.B.data());
    } else if (const auto* shared = std::get_if<SharedSlot>(&slot)) {
      p["slot"] = "shared";
      p["donor"] = shared->donor;
    } else {
      p["slot"] = "pruned";
    }
    positions.push_back(std::move(p));
  }

  json manifest{{"format_version", kFormatVersion},
                {"kind", "adapter-bank"},
                {"signature", {{"a", sig.a}, {"b", sig.b}, {"d", sig.d}}},
                {"scale", scale},
                {"payload_dtype", "f32"},
                {"payload_bytes", payload.size()},
                {"positions", positions}};
  atomic_write(path, pack_container(manifest, payload));
}

AdapterBank load_bank(const std::filesystem::path& path) {
  Container c = unpack_container(path, "adapter-bank");
  AdapterSignature sig;
  try {
    sig.a = c.manifest.at("signature").at("a").get<Index>();
    sig.b = c.manifest.at("signature").at("b").get<Index>();
    sig.d = c.manifest.at("signature").at("d").get<Index>();
    const double scale = c.manifest.at("scale").get<double>();

    std::vector<PositionInfo> catalog;
    std::vector<AdapterSlot> slots;
    size_t offset = 0;
    for (const json& p : c.manifest.at("positions")) {
      PositionInfo info;
      info.id = p.at("id").get<PositionId>();
      info.layer = p.at("layer").get<int>();
      info.projection = p.at("projection").get<std::string>();
      catalog.push_back(info);
      const std::string kind = p.at("slot").get<std::string>();
      if (kind == "owned") {
        AdapterPair pair;
        pair.A = Tensor({sig.a, sig.d}, 0.0, true);
        pair.B = Tensor({sig.d, sig.b}, 0.0, true);
        pair.scale = scale;
        read_f32_block(c.payload, offset, pair.A.data());
        read_f32_block(c.payload, offset, pair.B.data());
        slots.push_back(OwnedSlot{std::move(pair)});
      } else if (kind == "shared") {
        slots.push_back(SharedSlot{p.at("donor").get<PositionId>()});
      } else if (kind == "pruned") {
        slots.push_back(PrunedSlot{});
      } else {
        throw data_error(data_error::Kind::parse, "unknown slot kind '" + kind + "'");
      }
    }
    if (offset != c.payload.size())
      throw data_error(data_error::Kind::corrupt_payload,
                       path.string() + ": payload has trailing bytes");
    return AdapterBank::from_slots(std::move(catalog), sig, std::move(slots));
  } catch (const json::exception& e) {
    throw data_error(data_error::Kind::parse, path.string() + ": bad manifest: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Backbones
// ---------------------------------------------------------------------------

namespace {

json config_to_json(const BackboneConfig& c) {
  return json{{"layers", c.layers},
              {"model_dim", c.model_dim},
              {"heads", c.heads},
              {"mlp_ratio", c.mlp_ratio},
              {"input_dim", c.input_dim},
              {"seq_len", c.seq_len},
              {"classes", c.classes},
              {"adapted_projections", c.adapted_projections},
              {"adapter_rank", c.adapter_rank},
              {"adapter_scale", c.adapter_scale},
              {"layer_norm_eps", c.layer_norm_eps}};
}

BackboneConfig config_from_json(const json& j) {
  BackboneConfig c;
  c.layers = j.at("layers").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<int>();
  c.input_dim = j.at("input_dim").get<int>();
  c.seq_len = j.at("seq_len").get<int>();
  c.classes = j.at("classes").get<int>();
  c.adapted_projections = j.at("adapted_projections").get<std::vector<std::string>>();
  c.adapter_rank = j.at("adapter_rank").get<int>();
  c.adapter_scale = j.at("adapter_scale").get<double>();
  c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  return c;
}

json task_to_json(const SyntheticTask& t) {
  return json{{"generator_seed", t.generator_seed},
              {"input_dim", t.input_dim},
              {"seq_len", t.seq_len},
              {"classes", t.classes},
              {"teacher_init_std", t.teacher_init_std},
              {"shift_scale", t.shift_scale},
              {"shift_rank", t.shift_rank},
              {"shift_correlation", t.shift_correlation},
              {"pretrain_examples", t.pretrain_examples},
              {"train_examples", t.train_examples},
              {"val_examples", t.val_examples},
              {"test_examples", t.test_examples}};
}

SyntheticTask task_from_json(const json& j) {
  SyntheticTask t;
  t.generator_seed = j.at("generator_seed").get<uint64_t>();
  t.input_dim = j.at("input_dim").get<int>();
  t.seq_len = j.at("seq_len").get<int>();
  t.classes = j.at("classes").get<int>();
  t.teacher_init_std = j.at("teacher_init_std").get<double>();
  t.shift_scale = j.at("shift_scale").get<double>();
  t.shift_rank = j.at("shift_rank").get<int>();
  t.shift_correlation = j.at("shift_correlation").get<double>();
  t.pretrain_examples = j.at("pretrain_examples").get<int>();
  t.train_examples = j.at("train_examples").get<int>();
  t.val_examples = j.at("val_examples").get<int>();
  t.test_examples = j.at("test_examples").get<int>();
  return t;
}

}  // namespace

void save_backbone(const TransformerModel& model, const SyntheticTask& task,
                   const std::filesystem::path& path) {
  json tensors = json::array();
  std::string payload;
  for (const auto& [name, t] : model.named_backbone_tensors()) {
    tensors.push_back(json{{"name", name}, {"numel", t.numel()}});
    append_f32_block(payload, t.data());
  }
  json manifest{{"format_version", kFormatVersion},
                {"kind", "backbone"},
                {"config", config_to_json(model.config())},
                {"task", task_to_json(task)},
                {"payload_dtype", "f32"},
                {"payload_bytes", payload.size()},
                {"tensors", tensors}};
  atomic_write(path, pack_container(manifest, payload));
}

LoadedBackbone load_backbone(const std::filesystem::path& path) {
  Container c = unpack_container(path, "backbone");
  try {
    const BackboneConfig cfg = config_from_json(c.manifest.at("config"));
    const SyntheticTask task = task_from_json(c.manifest.at("task"));
    TransformerModel model(cfg, 0);

    auto named = model.named_backbone_tensors();
    const json& tensors = c.manifest.at("tensors");
    if (tensors.size() != named.size())
      throw data_error(data_error::Kind::parse,
                       path.string() + ": backbone tensor catalog does not match architecture");
    size_t offset = 0;
    for (size_t i = 0; i < named.size(); ++i) {
      const std::string name = tensors[i].at("name").get<std::string>();
      const Index numel = tensors[i].at("numel").get<Index>();
      if (name != named[i].first || numel != named[i].second.numel())
        throw data_error(data_error::Kind::parse, path.string() + ": unexpected tensor '" + name +
                                                      "' in backbone catalog");
      read_f32_block(c.payload, offset, named[i].second.data());
    }
    if (offset != c.payload.size())
      throw data_error(data_error::Kind::corrupt_payload,
                       path.string() + ": payload has trailing bytes");
    return LoadedBackbone{std::move(model), task};
  } catch (const json::exception& e) {
    throw data_error(data_error::Kind::parse, path.string() + ": bad manifest: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Text reports
// ---------------------------------------------------------------------------

namespace {

class LineReader {
 public:
  LineReader(const std::filesystem::path& path, const char* expected_kind) : path_(path) {
    std::istringstream in(read_file(path));
    std::string line;
    while (std::getline(in, line)) lines_.push_back(line);
    if (lines_.empty() || lines_[0] != kReportHeader)
      throw data_error(data_error::Kind::version_mismatch,
                       path.string() + ": missing '" + kReportHeader + "' header");
    next_ = 1;
    std::istringstream kind_line(expect("kind"));
    std::string kind;
    kind_line >> kind;
    if (kind != expected_kind)
      throw data_error(data_error::Kind::parse, path.string() + ": expected kind '" +
                                                    expected_kind + "', found '" + kind + "'");
  }

  // Consumes the next line, which must start with `key`; returns the rest.
  std::string expect(const std::string& key) {
    if (next_ >= lines_.size())
      throw data_error(data_error::Kind::parse, path_.string() + ": unexpected end of file, wanted '" + key + "'");
    const std::string& line = lines_[next_];
    if (line.size() < key.size() || line.compare(0, key.size(), key) != 0 ||
        (line.size() > key.size() && line[key.size()] != ' '))
      throw data_error(data_error::Kind::parse,
                       path_.string() + ": expected '" + key + "', found '" + line + "'");
    ++next_;
    return line.size() > key.size() ? line.substr(key.size() + 1) : std::string();
  }

  bool peek_is(const std::string& key) const {
    if (next_ >= lines_.size()) return false;
    const std::string& line = lines_[next_];
    if (line.size() < key.size() || line.compare(0, key.size(), key) != 0) return false;
    return line.size() == key.size() || line[key.size()] == ' ';
  }

  double expect_double(const std::string& key) { return parse_double(expect(key)); }

  long long expect_int(const std::string& key) {
    const std::string s = expect(key);
    try {
      return std::stoll(s);
    } catch (const std::exception&) {
      throw data_error(data_error::Kind::parse, path_.string() + ": bad integer '" + s + "'");
    }
  }

  double parse_double(const std::string& s) const {
    try {
      size_t pos = 0;
      const double v = std::stod(s, &pos);
      return v;
    } catch (const std::exception&) {
      throw data_error(data_error::Kind::parse, path_.string() + ": bad number '" + s + "'");
    }
  }

 private:
  std::filesystem::path path_;
  std::vector<std::string> lines_;
  size_t next_ = 0;
};

std::string report_prologue(const char* kind) {
  return std::string(kReportHeader) + "\nkind " + kind + "\n";
}

}  // namespace

void write_importance_report(const ImportanceReport& report, const std::filesystem::path& path) {
  std::string out = report_prologue("importance");
  out += "formula " + report.formula() + "\n";
  out += "steps " + std::to_string(report.steps_accumulated()) + "\n";
  out += "final " + std::to_string(report.is_final() ? 1 : 0) + "\n";
  out += "scores " + std::to_string(report.scores().size()) + "\n";
  for (const auto& [id, s] : report.scores())
    out += "score " + std::to_string(id) + " " + fmt_double(s) + "\n";
  out += "end\n";
  atomic_write(path, out);
}

ImportanceReport read_importance_report(const std::filesystem::path& path) {
  LineReader r(path, "importance");
  std::string formula = r.expect("formula");
  const int steps = static_cast<int>(r.expect_int("steps"));
  const bool final_flag = r.expect_int("final") != 0;
  const long long n = r.expect_int("scores");
  std::map<PositionId, double> scores;
  for (long long i = 0; i < n; ++i) {
    std::istringstream line(r.expect("score"));
    PositionId id;
    std::string value;
    line >> id >> value;
    if (!line) throw data_error(data_error::Kind::parse, path.string() + ": bad score line");
    scores[id] = r.parse_double(value);
  }
  r.expect("end");
  return ImportanceReport(std::move(scores), steps, final_flag, std::move(formula));
}

void write_share_plan(const SharePlan& plan, const std::filesystem::path& path) {
  std::string out = report_prologue("share-plan");
  out += "ratio " + fmt_double(plan.ratio) + "\n";
  out += "m " + std::to_string(plan.m) + "\n";
  out += "checkpoint-mode " + to_string(plan.checkpoint.mode) + "\n";
  out += "coefficient-source " + to_string(plan.checkpoint.source) + "\n";
  out += "c1 " + fmt_double(plan.checkpoint.c1) + "\n";
  out += "c2 " + fmt_double(plan.checkpoint.c2) + "\n";
  auto id_list = [](const std::vector<PositionId>& ids) {
    std::string s = std::to_string(ids.size());
    for (PositionId id : ids) s += " " + std::to_string(id);
    return s;
  };
  out += "pruned " + id_list(plan.pruned) + "\n";
  out += "donors " + id_list(plan.donors) + "\n";
  for (const auto& a : plan.assignment)
    out += "assign " + std::to_string(a.pruned) + " " + std::to_string(a.donor) + " " +
           fmt_double(a.c1) + " " + fmt_double(a.c2) + "\n";
  out += "end\n";
  atomic_write(path, out);
}

SharePlan read_share_plan(const std::filesystem::path& path) {
  LineReader r(path, "share-plan");
  SharePlan plan;
  plan.ratio = r.expect_double("ratio");
  plan.m = static_cast<int>(r.expect_int("m"));
  plan.checkpoint.mode = checkpoint_mode_from_string(r.expect("checkpoint-mode"));
  plan.checkpoint.source = coefficient_source_from_string(r.expect("coefficient-source"));
  plan.checkpoint.c1 = r.expect_double("c1");
  plan.checkpoint.c2 = r.expect_double("c2");
  auto read_ids = [&](const char* key) {
    std::istringstream line(r.expect(key));
    size_t n;
    line >> n;
    std::vector<PositionId> ids(n);
    for (auto& id : ids) line >> id;
    if (!line) throw data_error(data_error::Kind::parse, path.string() + ": bad id list");
    return ids;
  };
  plan.pruned = read_ids("pruned");
  plan.donors = read_ids("donors");
  for (int i = 0; i < plan.m; ++i) {
    std::istringstream line(r.expect("assign"));
    ShareAssignment a;
    std::string c1, c2;
    line >> a.pruned >> a.donor >> c1 >> c2;
    if (!line) throw data_error(data_error::Kind::parse, path.string() + ": bad assign line");
    a.c1 = r.parse_double(c1);
    a.c2 = r.parse_double(c2);
    plan.assignment.push_back(a);
  }
  r.expect("end");
  if (plan.pruned.size() != static_cast<size_t>(plan.m) ||
      plan.donors.size() != static_cast<size_t>(plan.m))
    throw data_error(data_error::Kind::parse, path.string() + ": prune/donor list sizes disagree with m");
  return plan;
}

void write_metrics(const Metrics& m, const std::filesystem::path& path) {
  std::string out = report_prologue("metrics");
  out += "variant " + m.variant + "\n";
  out += "task-seed " + std::to_string(m.task_seed) + "\n";
  out += "train-seed " + std::to_string(m.train_seed) + "\n";
  out += "trainable-params " + std::to_string(m.trainable_params) + "\n";
  out += "positions-adapted " + std::to_string(m.positions_adapted) + "\n";
  out += "val-accuracy " + fmt_double(m.val_accuracy) + "\n";
  out += "test-accuracy " + fmt_double(m.test_accuracy) + "\n";
  out += "train-loss " + std::to_string(m.train_loss.size());
  for (double v : m.train_loss) out += " " + fmt_double(v);
  out += "\nend\n";
  atomic_write(path, out);
}

Metrics read_metrics(const std::filesystem::path& path) {
  LineReader r(path, "metrics");
  Metrics m;
  m.variant = r.expect("variant");
  m.task_seed = static_cast<uint64_t>(r.expect_int("task-seed"));
  m.train_seed = static_cast<uint64_t>(r.expect_int("train-seed"));
  m.trainable_params = r.expect_int("trainable-params");
  m.positions_adapted = static_cast<int>(r.expect_int("positions-adapted"));
  m.val_accuracy = r.expect_double("val-accuracy");
  m.test_accuracy = r.expect_double("test-accuracy");
  std::istringstream line(r.expect("train-loss"));
  size_t n;
  line >> n;
  std::string tok;
  for (size_t i = 0; i < n; ++i) {
    line >> tok;
    m.train_loss.push_back(r.parse_double(tok));
  }
  if (!line) throw data_error(data_error::Kind::parse, path.string() + ": bad train-loss line");
  r.expect("end");
  return m;
}

void write_comparison(const ComparisonReport& rep, const std::filesystem::path& path) {
  std::string out = report_prologue("compare");
  auto seed_list = [](const std::vector<uint64_t>& seeds) {
    std::string s = std::to_string(seeds.size());
    for (uint64_t v : seeds) s += " " + std::to_string(v);
    return s;
  };
  out += "task-seeds " + seed_list(rep.task_seeds) + "\n";
  out += "train-seeds " + seed_list(rep.train_seeds) + "\n";
  for (const RunSummary& run : rep.runs)
    out += "run " + std::to_string(run.task_seed) + " " + std::to_string(run.train_seed) + " " +
           run.variant + " " + fmt_double(run.val_accuracy) + " " + fmt_double(run.test_accuracy) +
           " " + std::to_string(run.trainable_params) + " " +
           std::to_string(run.positions_adapted) + "\n";
  out += "best-scenario " + std::to_string(rep.best_scenario.size());
  for (int b : rep.best_scenario) out += " " + std::to_string(b);
  out += "\n";
  for (size_t v = 0; v < kAllVariants.size(); ++v)
    out += "variant-stat " + to_string(kAllVariants[v]) + " " +
           fmt_double(rep.variant_stats[v].mean) + " " + fmt_double(rep.variant_stats[v].stddev) +
           "\n";
  out += "pear-best-stat " + fmt_double(rep.pear_best_stats.mean) + " " +
         fmt_double(rep.pear_best_stats.stddev) + "\n";
  for (const auto& g : rep.task_gaps)
    out += "task-gap " + std::to_string(g.task_seed) + " " + fmt_double(g.pear_best_mean) + " " +
           fmt_double(g.vanilla_mean) + " " + fmt_double(g.gap) + " " + fmt_double(g.pooled_se) +
           "\n";
  out += "verdict-pear-ge-vanilla " + std::to_string(rep.pear_ge_vanilla ? 1 : 0) + "\n";
  out += "tasks-exceeding-se " + std::to_string(rep.tasks_exceeding_se) + "\n";
  for (const auto& flag : rep.ordering_flags) out += "ordering-flag " + flag + "\n";
  out += "end\n";
  atomic_write(path, out);
}

ComparisonReport read_comparison(const std::filesystem::path& path) {
  LineReader r(path, "compare");
  ComparisonReport rep;
  auto read_seeds = [&](const char* key) {
    std::istringstream line(r.expect(key));
    size_t n;
    line >> n;
    std::vector<uint64_t> seeds(n);
    for (auto& s : seeds) line >> s;
    if (!line) throw data_error(data_error::Kind::parse, path.string() + ": bad seed list");
    return seeds;
  };
  rep.task_seeds = read_seeds("task-seeds");
  rep.train_seeds = read_seeds("train-seeds");
  const size_t expect_runs = rep.task_seeds.size() * kAllVariants.size() * rep.train_seeds.size();
  for (size_t i = 0; i < expect_runs; ++i) {
    std::istringstream line(r.expect("run"));
    RunSummary run;
    std::string val, test;
    line >> run.task_seed >> run.train_seed >> run.variant >> val >> test >>
        run.trainable_params >> run.positions_adapted;
    if (!line) throw data_error(data_error::Kind::parse, path.string() + ": bad run line");
    run.val_accuracy = r.parse_double(val);
    run.test_accuracy = r.parse_double(test);
    rep.runs.push_back(run);
  }
  {
    std::istringstream line(r.expect("best-scenario"));
    size_t n;
    line >> n;
    rep.best_scenario.resize(n);
    for (auto& b : rep.best_scenario) line >> b;
    if (!line) throw data_error(data_error::Kind::parse, path.string() + ": bad best-scenario line");
  }
  for (size_t v = 0; v < kAllVariants.size(); ++v) {
    std::istringstream line(r.expect("variant-stat"));
    std::string name, mean, stddev;
    line >> name >> mean >> stddev;
    if (!line || name != to_string(kAllVariants[v]))
      throw data_error(data_error::Kind::parse, path.string() + ": bad variant-stat line");
    rep.variant_stats[v].mean = r.parse_double(mean);
    rep.variant_stats[v].stddev = r.parse_double(stddev);
  }
  {
    std::istringstream line(r.expect("pear-best-stat"));
    std::string mean, stddev;
    line >> mean >> stddev;
    rep.pear_best_stats.mean = r.parse_double(mean);
    rep.pear_best_stats.stddev = r.parse_double(stddev);
  }
  for (size_t t = 0; t < rep.task_seeds.size(); ++t) {
    std::istringstream line(r.expect("task-gap"));
    ComparisonReport::TaskGap g;
    std::string a, b, c, d;
    line >> g.task_seed >> a >> b >> c >> d;
    if (!line) throw data_error(data_error::Kind::parse, path.string() + ": bad task-gap line");
    g.pear_best_mean = r.parse_double(a);
    g.vanilla_mean = r.parse_double(b);
    g.gap = r.parse_double(c);
    g.pooled_se = r.parse_double(d);
    rep.task_gaps.push_back(g);
  }
  rep.pear_ge_vanilla = r.expect_int("verdict-pear-ge-vanilla") != 0;
  rep.tasks_exceeding_se = static_cast<int>(r.expect_int("tasks-exceeding-se"));
  while (r.peek_is("ordering-flag")) rep.ordering_flags.push_back(r.expect("ordering-flag"));
  r.expect("end");
  return rep;
}

std::string format_comparison_table(const ComparisonReport& rep) {
  std::ostringstream os;
  os << "variant      mean-test-acc  stddev\n";
  const char* names[5] = {"full", "vanilla", "pear", "pear-da", "pear-sba"};
  char buf[96];
  for (size_t v = 0; v < kAllVariants.size(); ++v) {
    std::snprintf(buf, sizeof(buf), "%-12s %13.4f  %.4f\n", names[v], rep.variant_stats[v].mean,
                  rep.variant_stats[v].stddev);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "%-12s %13.4f  %.4f\n", "pear-best", rep.pear_best_stats.mean,
                rep.pear_best_stats.stddev);
  os << buf;
  for (const auto& g : rep.task_gaps) {
    std::snprintf(buf, sizeof(buf), "task %llu: pear-best %.4f vanilla %.4f gap %+.4f (pooled se %.4f)\n",
                  static_cast<unsigned long long>(g.task_seed), g.pear_best_mean, g.vanilla_mean,
                  g.gap, g.pooled_se);
    os << buf;
  }
  os << "pear >= vanilla at equal parameter count: " << (rep.pear_ge_vanilla ? "yes" : "no")
     << "\n";
  os << "tasks with gap exceeding one pooled standard error: " << rep.tasks_exceeding_se << "\n";
  for (const auto& f : rep.ordering_flags) os << "ordering: " << f << "\n";
  return std::move(os).str();
}

}  // namespace pear
