#pragma once

#include <filesystem>
#include <string>

#include "pear/adapter.hpp"
#include "pear/data.hpp"
#include "pear/importance.hpp"
#include "pear/model.hpp"
#include "pear/pipeline.hpp"
#include "pear/planner.hpp"

// File formats.
//
// Banks and backbones use a binary container: an 8-byte magic, a
// length-prefixed JSON manifest with canonically ordered keys, then a
// payload of little-endian 32-bit floats in manifest order. Only owned
// pairs are stored; shared slots are donor references in the manifest.
//
// Reports (importance, plans, metrics, comparisons) are line-delimited
// text with fixed key order and 17-significant-digit decimals, so a
// load/save round trip is byte-stable. Metrics wall-clock time is
// deliberately not serialized; report files depend only on seeds.
//
// All writers are atomic (write to a temp file, then rename).

namespace pear {

void save_bank(const AdapterBank& bank, const std::filesystem::path& path);
AdapterBank load_bank(const std::filesystem::path& path);

// Expected on-disk payload size of a bank, in bytes.
uint64_t bank_payload_bytes(const AdapterBank& bank);

void save_backbone(const TransformerModel& model, const SyntheticTask& task,
                   const std::filesystem::path& path);

struct LoadedBackbone {
  TransformerModel model;
  SyntheticTask task;
};
LoadedBackbone load_backbone(const std::filesystem::path& path);

void write_importance_report(const ImportanceReport& report, const std::filesystem::path& path);
ImportanceReport read_importance_report(const std::filesystem::path& path);

void write_share_plan(const SharePlan& plan, const std::filesystem::path& path);
SharePlan read_share_plan(const std::filesystem::path& path);

void write_metrics(const Metrics& metrics, const std::filesystem::path& path);
Metrics read_metrics(const std::filesystem::path& path);

void write_comparison(const ComparisonReport& report, const std::filesystem::path& path);
ComparisonReport read_comparison(const std::filesystem::path& path);

// Human-readable comparison table (for stdout).
std::string format_comparison_table(const ComparisonReport& report);

}  // namespace pear
