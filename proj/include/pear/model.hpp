#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "pear/adapter.hpp"
#include "pear/tensor.hpp"

namespace pear {

// Tiny pre-norm transformer classifier over sequences of feature vectors.
struct BackboneConfig {
  int layers = 2;
  int model_dim = 32;
  int heads = 4;
  int mlp_ratio = 4;
  int input_dim = 16;  // feature size of each sequence element
  int seq_len = 16;
  int classes = 4;

  // Projections carrying adapters, applied to every layer. Subset of
  // {"q", "k", "v", "o"}; position ids enumerate layer-major in this order.
  std::vector<std::string> adapted_projections = {"q", "v"};
  int adapter_rank = 4;
  double adapter_scale = 1.0;

  double layer_norm_eps = 1e-5;

  void validate() const;
  int n_adapter_positions() const {
    return layers * static_cast<int>(adapted_projections.size());
  }
};

// Frozen backbone plus an adapter bank at the configured projections.
// Construction freezes every backbone weight; only the bank's owned pairs
// are trainable. The backbone can be unfrozen for pretraining.
class TransformerModel {
 public:
  // Empty placeholder; usable only as an assignment target.
  TransformerModel() = default;

  TransformerModel(const BackboneConfig& config, uint64_t seed, double init_std = 0.02);

  // x is [batch*seq_len x input_dim] packed row-major; returns logits
  // [batch x classes].
  Tensor forward(const Tensor& x, Index batch) const;

  // Cross-entropy loss over one mini-batch.
  Tensor loss(const Tensor& x, const std::vector<int>& labels, Index batch) const;

  const BackboneConfig& config() const { return cfg_; }
  AdapterBank& bank() { return bank_; }
  const AdapterBank& bank() const { return bank_; }
  void set_bank(AdapterBank bank);

  // Replaces the adapter bank with a freshly initialized one.
  void reset_adapters(uint64_t seed);

  bool adapters_enabled() const { return adapters_enabled_; }
  void set_adapters_enabled(bool on) { adapters_enabled_ = on; }

  void set_backbone_trainable(bool trainable);
  std::vector<Tensor> backbone_parameters() const;

  // Stable name -> tensor view of every backbone weight, in canonical order.
  std::vector<std::pair<std::string, Tensor>> named_backbone_tensors() const;

  // Deep copy with an independent, freshly seeded adapter bank.
  TransformerModel fork_with_fresh_adapters(uint64_t adapter_seed) const;

  // Deep copy preserving adapter values and slot structure.
  TransformerModel clone() const;

 private:
  struct Block {
    Tensor ln1_g, ln1_b;
    Tensor wq, wk, wv, wo;
    Tensor ln2_g, ln2_b;
    Tensor w1, b1, w2, b2;
  };

  Tensor project(const Tensor& x, const Tensor& w, int layer, const char* name) const;
  int position_of(int layer, const std::string& projection) const;  // -1 when unadapted

  BackboneConfig cfg_;
  Tensor embed_w, embed_b;
  std::vector<Block> blocks_;
  Tensor lnf_g, lnf_b;
  Tensor head_w, head_b;
  AdapterBank bank_;
  bool adapters_enabled_ = true;
};

// Builds a model with a frozen backbone and zero-impact fresh adapters.
inline TransformerModel build_model(const BackboneConfig& config, uint64_t seed) {
  return TransformerModel(config, seed);
}

}  // namespace pear
