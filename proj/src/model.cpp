#include "pear/model.hpp"

#include <algorithm>

#include "pear/errors.hpp"
#include "pear/rng.hpp"

namespace pear {

namespace {

constexpr const char* kProjectionOrder[] = {"q", "k", "v", "o"};

Tensor init_weight(Index rows, Index cols, Rng& rng, double std) {
  Tensor t({rows, cols});
  for (auto& v : t.data()) v = rng.gauss(0.0, std);
  return t;
}

}  // namespace

void BackboneConfig::validate() const {
  if (layers < 1) throw usage_error("backbone needs at least one layer");
  if (model_dim < 1 || heads < 1 || model_dim % heads != 0)
    throw usage_error("model_dim " + std::to_string(model_dim) + " must be divisible by heads " +
                      std::to_string(heads));
  if (mlp_ratio < 1) throw usage_error("mlp_ratio must be >= 1");
  if (input_dim < 1 || seq_len < 1 || classes < 2)
    throw usage_error("input_dim/seq_len must be positive and classes >= 2");
  if (adapted_projections.empty())
    throw usage_error("at least one adapted projection is required");
  for (const auto& p : adapted_projections) {
    if (std::find(std::begin(kProjectionOrder), std::end(kProjectionOrder), p) ==
        std::end(kProjectionOrder))
      throw usage_error("unknown projection '" + p + "', expected one of q, k, v, o");
  }
  if (adapter_rank < 1 || adapter_rank >= model_dim)
    throw usage_error("adapter rank must satisfy 1 <= d < model_dim");
}

TransformerModel::TransformerModel(const BackboneConfig& config, uint64_t seed, double init_std)
    : cfg_(config) {
  cfg_.validate();
  Rng wrng(derive_seed(seed, "backbone"));
  const Index dim = cfg_.model_dim;
  const Index hidden = dim * cfg_.mlp_ratio;

  embed_w = init_weight(cfg_.input_dim, dim, wrng, init_std);
  embed_b = Tensor({dim});
  blocks_.resize(static_cast<size_t>(cfg_.layers));
  for (auto& blk : blocks_) {
    blk.ln1_g = Tensor({dim}, 1.0);
    blk.ln1_b = Tensor({dim});
    blk.wq = init_weight(dim, dim, wrng, init_std);
    blk.wk = init_weight(dim, dim, wrng, init_std);
    blk.wv = init_weight(dim, dim, wrng, init_std);
    blk.wo = init_weight(dim, dim, wrng, init_std);
    blk.ln2_g = Tensor({dim}, 1.0);
    blk.ln2_b = Tensor({dim});
    blk.w1 = init_weight(dim, hidden, wrng, init_std);
    blk.b1 = Tensor({hidden});
    blk.w2 = init_weight(hidden, dim, wrng, init_std);
    blk.b2 = Tensor({dim});
  }
  lnf_g = Tensor({dim}, 1.0);
  lnf_b = Tensor({dim});
  head_w = init_weight(dim, cfg_.classes, wrng, init_std);
  head_b = Tensor({cfg_.classes});

  reset_adapters(seed);
}

void TransformerModel::reset_adapters(uint64_t seed) {
  Rng arng(derive_seed(seed, "adapters"));
  std::vector<PositionInfo> catalog;
  for (int l = 0; l < cfg_.layers; ++l)
    for (size_t p = 0; p < cfg_.adapted_projections.size(); ++p)
      catalog.push_back(PositionInfo{
          static_cast<PositionId>(catalog.size()), l, cfg_.adapted_projections[p]});
  AdapterSignature sig{cfg_.model_dim, cfg_.model_dim, cfg_.adapter_rank};
  bank_ = AdapterBank::create(std::move(catalog), sig, cfg_.adapter_scale, arng);
}

void TransformerModel::set_bank(AdapterBank bank) {
  if (bank.n_positions() != cfg_.n_adapter_positions())
    throw usage_error("bank has " + std::to_string(bank.n_positions()) + " positions, model expects " +
                      std::to_string(cfg_.n_adapter_positions()));
  const AdapterSignature expect{cfg_.model_dim, cfg_.model_dim, cfg_.adapter_rank};
  if (!(bank.signature() == expect))
    throw usage_error("bank signature does not match model configuration");
  bank_ = std::move(bank);
}

int TransformerModel::position_of(int layer, const std::string& projection) const {
  const auto& adapted = cfg_.adapted_projections;
  auto it = std::find(adapted.begin(), adapted.end(), projection);
  if (it == adapted.end()) return -1;
  return layer * static_cast<int>(adapted.size()) + static_cast<int>(it - adapted.begin());
}

Tensor TransformerModel::project(const Tensor& x, const Tensor& w, int layer,
                                 const char* name) const {
  const int pos = position_of(layer, name);
  if (pos < 0 || !adapters_enabled_) return matmul(x, w);
  return forward_adapted(x, w, bank_.slot(pos), bank_);
}

Tensor TransformerModel::forward(const Tensor& x, Index batch) const {
  if (x.ndim() != 2 || x.cols() != cfg_.input_dim || x.rows() != batch * cfg_.seq_len)
    throw shape_error("forward: expected [" + std::to_string(batch * cfg_.seq_len) + "x" +
                      std::to_string(cfg_.input_dim) + "] input, got " + x.shape_str());
  const double eps = cfg_.layer_norm_eps;

  Tensor h = add(matmul(x, embed_w), embed_b);
  for (int l = 0; l < cfg_.layers; ++l) {
    const Block& blk = blocks_[static_cast<size_t>(l)];
    Tensor a = layer_norm(h, blk.ln1_g, blk.ln1_b, eps);
    Tensor q = project(a, blk.wq, l, "q");
    Tensor k = project(a, blk.wk, l, "k");
    Tensor v = project(a, blk.wv, l, "v");
    Tensor att = attention_core(q, k, v, batch, cfg_.seq_len, cfg_.heads);
    h = add(h, project(att, blk.wo, l, "o"));

    Tensor m = layer_norm(h, blk.ln2_g, blk.ln2_b, eps);
    Tensor hidden = gelu(add(matmul(m, blk.w1), blk.b1));
    h = add(h, add(matmul(hidden, blk.w2), blk.b2));
  }
  Tensor pooled = sequence_mean(layer_norm(h, lnf_g, lnf_b, eps), batch, cfg_.seq_len);
  return add(matmul(pooled, head_w), head_b);
}

Tensor TransformerModel::loss(const Tensor& x, const std::vector<int>& labels, Index batch) const {
  return cross_entropy(forward(x, batch), labels);
}

void TransformerModel::set_backbone_trainable(bool trainable) {
  for (auto& [name, t] : named_backbone_tensors()) {
    (void)name;
    t.set_requires_grad(trainable);
  }
}

std::vector<Tensor> TransformerModel::backbone_parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_backbone_tensors()) {
    (void)name;
    out.push_back(t);
  }
  return out;
}

std::vector<std::pair<std::string, Tensor>> TransformerModel::named_backbone_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("embed.w", embed_w);
  out.emplace_back("embed.b", embed_b);
  for (size_t l = 0; l < blocks_.size(); ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    const Block& blk = blocks_[l];
    out.emplace_back(p + "ln1.g", blk.ln1_g);
    out.emplace_back(p + "ln1.b", blk.ln1_b);
    out.emplace_back(p + "wq", blk.wq);
    out.emplace_back(p + "wk", blk.wk);
    out.emplace_back(p + "wv", blk.wv);
    out.emplace_back(p + "wo", blk.wo);
    out.emplace_back(p + "ln2.g", blk.ln2_g);
    out.emplace_back(p + "ln2.b", blk.ln2_b);
    out.emplace_back(p + "mlp.w1", blk.w1);
    out.emplace_back(p + "mlp.b1", blk.b1);
    out.emplace_back(p + "mlp.w2", blk.w2);
    out.emplace_back(p + "mlp.b2", blk.b2);
  }
  out.emplace_back("final_norm.g", lnf_g);
  out.emplace_back("final_norm.b", lnf_b);
  out.emplace_back("head.w", head_w);
  out.emplace_back("head.b", head_b);
  return out;
}

TransformerModel TransformerModel::clone() const {
  TransformerModel out;
  out.cfg_ = cfg_;
  out.adapters_enabled_ = adapters_enabled_;
  auto copy_t = [](const Tensor& t) { return t.copy(t.requires_grad()); };
  out.embed_w = copy_t(embed_w);
  out.embed_b = copy_t(embed_b);
  out.blocks_.reserve(blocks_.size());
  for (const Block& blk : blocks_) {
    Block nb;
    nb.ln1_g = copy_t(blk.ln1_g);
    nb.ln1_b = copy_t(blk.ln1_b);
    nb.wq = copy_t(blk.wq);
    nb.wk = copy_t(blk.wk);
    nb.wv = copy_t(blk.wv);
    nb.wo = copy_t(blk.wo);
    nb.ln2_g = copy_t(blk.ln2_g);
    nb.ln2_b = copy_t(blk.ln2_b);
    nb.w1 = copy_t(blk.w1);
    nb.b1 = copy_t(blk.b1);
    nb.w2 = copy_t(blk.w2);
    nb.b2 = copy_t(blk.b2);
    out.blocks_.push_back(std::move(nb));
  }
  out.lnf_g = copy_t(lnf_g);
  out.lnf_b = copy_t(lnf_b);
  out.head_w = copy_t(head_w);
  out.head_b = copy_t(head_b);
  out.bank_ = bank_.clone();
  return out;
}

TransformerModel TransformerModel::fork_with_fresh_adapters(uint64_t adapter_seed) const {
  TransformerModel out = clone();
  out.set_backbone_trainable(false);
  out.reset_adapters(adapter_seed);
  out.set_adapters_enabled(true);
  return out;
}

}  // namespace pear
