#pragma once

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "pear/rng.hpp"
#include "pear/tensor.hpp"

// Low-rank adapter pairs and the position-indexed bank that tracks which
// positions own a pair, borrow one from a donor, or carry none at all.

namespace pear {

using PositionId = int;

// Trainable low-rank factors adapting one frozen a x b projection:
// the effective weight is W0 + scale * A * B with A [a x d], B [d x b].
struct AdapterPair {
  Tensor A;
  Tensor B;
  double scale = 1.0;
};

struct OwnedSlot {
  AdapterPair pair;
};
struct SharedSlot {
  PositionId donor;
};
struct PrunedSlot {};

using AdapterSlot = std::variant<OwnedSlot, SharedSlot, PrunedSlot>;

struct PositionInfo {
  PositionId id = 0;
  int layer = 0;
  std::string projection;  // "q", "k", "v", "o"
};

struct AdapterSignature {
  Index a = 0;  // input dim of the adapted projection
  Index b = 0;  // output dim
  Index d = 0;  // adapter rank, d < min(a, b)

  Index scalars_per_pair() const { return a * d + d * b; }
  bool operator==(const AdapterSignature&) const = default;
};

// Position-indexed registry of adapter slots. Position ids are dense
// 0..n-1 indices; the catalog records which (layer, projection) each
// index stands for. All positions share one shape signature so any
// owned pair can serve any position.
class AdapterBank {
 public:
  AdapterBank() = default;

  // Fresh bank with one owned pair per position: A ~ normal(0, init_std),
  // B = 0, so a new bank leaves the backbone's behavior unchanged.
  static AdapterBank create(std::vector<PositionInfo> catalog, AdapterSignature sig, double scale,
                            Rng& rng, double init_std = 0.02);

  // Bank with the given slot layout; owned pair weights start at zero and
  // are filled by the caller (used by deserialization).
  static AdapterBank from_slots(std::vector<PositionInfo> catalog, AdapterSignature sig,
                                std::vector<AdapterSlot> slots);

  Index n_positions() const { return static_cast<Index>(slots_.size()); }
  const AdapterSignature& signature() const { return sig_; }
  const std::vector<PositionInfo>& catalog() const { return catalog_; }

  const AdapterSlot& slot(PositionId id) const;
  bool is_owned(PositionId id) const;
  bool is_pruned(PositionId id) const;

  // The owned pair at `id`; throws if the slot is not owned.
  AdapterPair& owned_pair(PositionId id);
  const AdapterPair& owned_pair(PositionId id) const;

  // Pair seen by position `id` after following a shared reference, or
  // nullptr for a pruned slot. Throws on a dangling shared reference.
  const AdapterPair* resolve(PositionId id) const;

  // Replaces a slot. Shared slots must point at an owned donor (no chains).
  void set_slot(PositionId id, AdapterSlot slot);

  std::vector<PositionId> owned_ids() const;

  // Stored trainable scalar count: owned pairs only.
  Index actual_param_count() const;
  // Number of positions receiving adaptation (owned or shared).
  Index positions_in_effect() const;
  Index owned_count() const;

  // A and B of each owned pair, in ascending position id, each exactly once.
  std::vector<Tensor> trainable_parameters() const;

  // Deep copy: fresh tensors, same values and slot structure.
  AdapterBank clone() const;

 private:
  void check_id(PositionId id) const;

  std::vector<PositionInfo> catalog_;
  std::vector<AdapterSlot> slots_;
  AdapterSignature sig_;
};

inline std::vector<Tensor> trainable_parameters(const AdapterBank& bank) {
  return bank.trainable_parameters();
}

// Adapted projection: x*W0 plus the resolved pair's low-rank update, or the
// frozen projection alone for a pruned slot. x is [rows x a], W0 [a x b].
Tensor forward_adapted(const Tensor& x, const Tensor& w0, const AdapterSlot& slot,
                       const AdapterBank& bank);

}  // namespace pear
