#include "pear/adapter.hpp"

#include <algorithm>

#include "pear/errors.hpp"

namespace pear {

namespace {

AdapterPair make_pair(const AdapterSignature& sig, double scale, Rng* rng, double init_std) {
  AdapterPair p;
  p.A = Tensor({sig.a, sig.d}, 0.0, true);
  p.B = Tensor({sig.d, sig.b}, 0.0, true);
  p.scale = scale;
  if (rng) {
    for (auto& v : p.A.data()) v = rng->gauss(0.0, init_std);
  }
  return p;
}

}  // namespace

AdapterBank AdapterBank::create(std::vector<PositionInfo> catalog, AdapterSignature sig,
                                double scale, Rng& rng, double init_std) {
  if (sig.d < 1 || sig.d >= std::min(sig.a, sig.b))
    throw usage_error("adapter rank must satisfy 1 <= d < min(a, b), got d=" + std::to_string(sig.d) +
                      " for a=" + std::to_string(sig.a) + ", b=" + std::to_string(sig.b));
  AdapterBank bank;
  bank.catalog_ = std::move(catalog);
  bank.sig_ = sig;
  bank.slots_.reserve(bank.catalog_.size());
  for (size_t i = 0; i < bank.catalog_.size(); ++i) {
    if (bank.catalog_[i].id != static_cast<PositionId>(i))
      throw usage_error("adapter catalog ids must be dense 0..n-1");
    bank.slots_.push_back(OwnedSlot{make_pair(sig, scale, &rng, init_std)});
  }
  return bank;
}

AdapterBank AdapterBank::from_slots(std::vector<PositionInfo> catalog, AdapterSignature sig,
                                    std::vector<AdapterSlot> slots) {
  if (catalog.size() != slots.size())
    throw usage_error("adapter catalog and slot list sizes differ");
  AdapterBank bank;
  bank.catalog_ = std::move(catalog);
  bank.sig_ = sig;
  bank.slots_ = std::move(slots);
  for (size_t i = 0; i < bank.slots_.size(); ++i) {
    if (bank.catalog_[i].id != static_cast<PositionId>(i))
      throw usage_error("adapter catalog ids must be dense 0..n-1");
    if (const auto* shared = std::get_if<SharedSlot>(&bank.slots_[i])) {
      if (shared->donor < 0 || shared->donor >= static_cast<PositionId>(bank.slots_.size()) ||
          !std::holds_alternative<OwnedSlot>(bank.slots_[static_cast<size_t>(shared->donor)]))
        throw data_error(data_error::Kind::dangling_reference,
                         "position " + std::to_string(i) + " shares from " +
                             std::to_string(shared->donor) + ", which is not an owned slot");
    }
  }
  return bank;
}

void AdapterBank::check_id(PositionId id) const {
  if (id < 0 || id >= static_cast<PositionId>(slots_.size()))
    throw usage_error("position id " + std::to_string(id) + " out of range [0, " +
                      std::to_string(slots_.size()) + ")");
}

const AdapterSlot& AdapterBank::slot(PositionId id) const {
  check_id(id);
  return slots_[static_cast<size_t>(id)];
}

bool AdapterBank::is_owned(PositionId id) const {
  return std::holds_alternative<OwnedSlot>(slot(id));
}

bool AdapterBank::is_pruned(PositionId id) const {
  return std::holds_alternative<PrunedSlot>(slot(id));
}

AdapterPair& AdapterBank::owned_pair(PositionId id) {
  check_id(id);
  auto* owned = std::get_if<OwnedSlot>(&slots_[static_cast<size_t>(id)]);
  if (!owned) throw usage_error("position " + std::to_string(id) + " does not own an adapter pair");
  return owned->pair;
}

const AdapterPair& AdapterBank::owned_pair(PositionId id) const {
  return const_cast<AdapterBank*>(this)->owned_pair(id);
}

const AdapterPair* AdapterBank::resolve(PositionId id) const {
  check_id(id);
  const AdapterSlot& s = slots_[static_cast<size_t>(id)];
  if (const auto* owned = std::get_if<OwnedSlot>(&s)) return &owned->pair;
  if (const auto* shared = std::get_if<SharedSlot>(&s)) {
    check_id(shared->donor);
    const auto* donor = std::get_if<OwnedSlot>(&slots_[static_cast<size_t>(shared->donor)]);
    if (!donor)
      throw data_error(data_error::Kind::dangling_reference,
                       "position " + std::to_string(id) + " shares from " +
                           std::to_string(shared->donor) + ", which is not an owned slot");
    return &donor->pair;
  }
  return nullptr;  // pruned
}

void AdapterBank::set_slot(PositionId id, AdapterSlot slot) {
  check_id(id);
  if (const auto* shared = std::get_if<SharedSlot>(&slot)) {
    check_id(shared->donor);
    if (shared->donor == id || !std::holds_alternative<OwnedSlot>(slots_[static_cast<size_t>(shared->donor)]))
      throw usage_error("share target " + std::to_string(shared->donor) +
                        " must be a distinct owned position");
  }
  if (!std::holds_alternative<OwnedSlot>(slot)) {
    for (size_t i = 0; i < slots_.size(); ++i) {
      const auto* dep = std::get_if<SharedSlot>(&slots_[i]);
      if (dep && dep->donor == id)
        throw usage_error("position " + std::to_string(id) + " still donates to position " +
                          std::to_string(i) + " and cannot stop being owned");
    }
  }
  slots_[static_cast<size_t>(id)] = std::move(slot);
}

std::vector<PositionId> AdapterBank::owned_ids() const {
  std::vector<PositionId> ids;
  for (size_t i = 0; i < slots_.size(); ++i)
    if (std::holds_alternative<OwnedSlot>(slots_[i])) ids.push_back(static_cast<PositionId>(i));
  return ids;
}

Index AdapterBank::actual_param_count() const {
  return owned_count() * sig_.scalars_per_pair();
}

Index AdapterBank::positions_in_effect() const {
  Index n = 0;
  for (const auto& s : slots_)
    if (!std::holds_alternative<PrunedSlot>(s)) ++n;
  return n;
}

Index AdapterBank::owned_count() const {
  Index n = 0;
  for (const auto& s : slots_)
    if (std::holds_alternative<OwnedSlot>(s)) ++n;
  return n;
}

std::vector<Tensor> AdapterBank::trainable_parameters() const {
  std::vector<Tensor> params;
  for (const auto& s : slots_) {
    if (const auto* owned = std::get_if<OwnedSlot>(&s)) {
      params.push_back(owned->pair.A);
      params.push_back(owned->pair.B);
    }
  }
  return params;
}

AdapterBank AdapterBank::clone() const {
  AdapterBank out;
  out.catalog_ = catalog_;
  out.sig_ = sig_;
  out.slots_.reserve(slots_.size());
  for (const auto& s : slots_) {
    if (const auto* owned = std::get_if<OwnedSlot>(&s)) {
      AdapterPair p;
      p.A = owned->pair.A.copy(true);
      p.B = owned->pair.B.copy(true);
      p.scale = owned->pair.scale;
      out.slots_.push_back(OwnedSlot{std::move(p)});
    } else {
      out.slots_.push_back(s);
    }
  }
  return out;
}

Tensor forward_adapted(const Tensor& x, const Tensor& w0, const AdapterSlot& slot,
                       const AdapterBank& bank) {
  Tensor out = matmul(x, w0);
  const AdapterPair* pair = nullptr;
  if (const auto* owned = std::get_if<OwnedSlot>(&slot)) {
    pair = &owned->pair;
  } else if (const auto* shared = std::get_if<SharedSlot>(&slot)) {
    const auto* donor = std::get_if<OwnedSlot>(&bank.slot(shared->donor));
    if (!donor)
      throw data_error(data_error::Kind::dangling_reference,
                       "shared slot points at position " + std::to_string(shared->donor) +
                           ", which is not an owned slot");
    pair = &donor->pair;
  }
  if (!pair) return out;  // pruned: frozen projection only

  Tensor delta = matmul(matmul(x, pair->A), pair->B);
  if (pair->scale != 1.0) delta = scale(delta, pair->scale);
  return add(out, delta);
}

}  // namespace pear
