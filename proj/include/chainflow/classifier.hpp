#pragma once

#include <array>
#include <utility>
#include <vector>

#include "chainflow/geom.hpp"
#include "chainflow/nn.hpp"

namespace chainflow {

struct ClassifierConfig {
    int node_dim = 64;
    int phi_dim = 64;
    int n_layers = 3;
    int n_rbf = 16;
    double rbf_max = 12.0;  // RBF centers span [0, rbf_max] Angstrom
    double spatial_cutoff = 10.0;
    double leaky_slope = 0.1;
    double dropout_p = 0.2;
    int idx_enc_dim = 16;
    int c_classes = 3;
    int a_classes = 2;
    int t_classes = 2;

    int edge_feat_dim() const { return n_rbf + 5 + 2; }  // RBF + offset one-hot + sin/cos dihedral
    void validate() const;
};

// Multi-relation graph: 5 sequential relations (offsets -2..2, including the
// self loop) plus one spatial relation (< spatial_cutoff).
struct ProteinGraph {
    static constexpr int n_relations = 6;
    int length = 0;
    std::array<std::vector<std::pair<int, int>>, n_relations> edges;  // (src, dst)
    std::array<Eigen::MatrixXd, n_relations> edge_feats;              // per edge rows
};

ProteinGraph build_graph(const Backbone& b, const ClassifierConfig& cfg);

struct Classification {
    Eigen::VectorXd probs_c;
    Eigen::VectorXd probs_a;
    Eigen::VectorXd probs_t;
    Eigen::VectorXd phi;  // pooled feature before the heads
};

class FoldClassifier {
  public:
    FoldClassifier(ClassifierConfig cfg, uint64_t seed);
    FoldClassifier(ClassifierConfig cfg, nn::ParamStore store);

    const ClassifierConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return store_; }
    const nn::ParamStore& params() const { return store_; }

    Classification classify(const Backbone& b) const;

    // Per-level logits on the tape; used by the training loop.
    struct Logits {
        ad::Var c, a, t, phi;
    };
    Logits forward(nn::Ctx& ctx, const Backbone& b) const;

  private:
    void init_params(uint64_t seed);
    ClassifierConfig cfg_;
    nn::ParamStore store_;
};

struct ClassifierTrainConfig {
    int n_epochs = 30;
    nn::AdamConfig adam{1e-3, 0.9, 0.999, 1e-8};
};

struct ClassifierTrainReport {
    double initial_loss = 0.0;
    double final_loss = 0.0;
    std::vector<int> skipped_levels;  // levels with an empty class in the train split
};

FoldClassifier train_classifier(const std::vector<StructureRecord>& records,
                                const ClassifierConfig& cfg, const ClassifierTrainConfig& tc,
                                uint64_t seed, ClassifierTrainReport* report = nullptr);

}  // namespace chainflow
