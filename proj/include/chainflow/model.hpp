#pragma once

#include <string>
#include <vector>

#include "chainflow/flow.hpp"
#include "chainflow/geom.hpp"
#include "chainflow/nn.hpp"

namespace chainflow {

struct ModelConfig {
    int seq_dim = 128;
    int pair_dim = 64;
    int cond_dim = 128;
    int n_heads = 4;
    int n_blocks = 6;
    int n_registers = 10;
    int n_pair_updates = 2;  // 0 disables the pair track updates
    int t_enc_dim = 64;
    int idx_enc_dim = 32;
    int fold_emb_dim = 32;  // per hierarchy level
    int ffn_hidden = 256;
    int tri_hidden = 32;
    bool use_distogram_head = true;
    int xt_bins = 64;
    int xhat_bins = 128;
    int sep_bins = 127;  // offsets < -63 ... > 63
    int c_classes = 4;
    int a_classes = 4;
    int t_classes = 4;

    void validate() const;
    size_t param_count() const;

    std::string to_json() const;
    static ModelConfig from_json(const std::string& text);
};

struct Motif {
    Coords coords;
    std::vector<bool> mask;
};

// Sequence-separation bin for offset j - i, clamped to [-63, 63].
int separation_bin(int offset);

// One-hot pair features, (L*L) x (xt_bins + xhat_bins + sep_bins), row-major
// pair layout. The x-hat block is zero when x_hat is null.
Eigen::MatrixXd pair_onehot_features(const Coords& x_t, const Coords* x_hat,
                                     const std::vector<int>& residue_indices,
                                     const ModelConfig& cfg);

struct BuiltInputs {
    ad::Var tokens;  // (n_registers + L) x seq_dim
    ad::Var cond;    // (n_registers + L) x cond_dim, register rows zero
    ad::Var pair;    // (L*L) x pair_dim; register pairs are implicit zeros
};

class Denoiser : public FlowModel {
  public:
    Denoiser(ModelConfig cfg, uint64_t seed);
    Denoiser(ModelConfig cfg, nn::ParamStore store);

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore& params() override { return store_; }
    const nn::ParamStore& params() const { return store_; }
    bool has_pair_head() const override { return cfg_.use_distogram_head; }

    // Ids into the per-level embedding tables; missing levels map to the
    // trailing null id. Throws on out-of-vocabulary ids.
    std::array<int, 3> label_ids(const FoldLabel& label) const;
    Eigen::RowVectorXd embed_fold_labels(const FoldLabel& label) const;

    BuiltInputs build_inputs(nn::Ctx& ctx, const Coords& x_t, const Coords* x_hat,
                             const std::vector<int>* residue_indices, const FoldLabel& label,
                             double t, const Motif* motif) const;
    ad::Var attention_block(nn::Ctx& ctx, ad::Var tokens, ad::Var cond, ad::Var pair,
                            int block, int L) const;
    ad::Var pair_update(nn::Ctx& ctx, ad::Var tokens, ad::Var pair, int update, int L) const;

    ModelOutput forward(nn::Ctx& ctx, const Coords& x_t, double t, const Coords* x_hat,
                        const FoldLabel& label) override;
    ModelOutput forward_full(nn::Ctx& ctx, const Coords& x_t, double t, const Coords* x_hat,
                             const FoldLabel& label, const std::vector<int>* residue_indices,
                             const Motif* motif);

    // Adapter names: every linear weight and embedding table (biases and the
    // register tokens excluded).
    std::vector<std::string> lora_target_names() const;
    void attach_lora(const nn::LoraSpec& spec, Rng& rng);
    void merge_adapters(const nn::LoraSpec& spec);
    bool lora_active() const { return nn::lora_applied(store_); }

  private:
    void init_params(uint64_t seed);

    ModelConfig cfg_;
    nn::ParamStore store_;
    nn::LoraSpec lora_spec_;
};

}  // namespace chainflow
