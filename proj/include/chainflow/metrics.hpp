#pragma once

#include <string>
#include <vector>

#include "chainflow/classifier.hpp"
#include "chainflow/flow.hpp"
#include "chainflow/geom.hpp"

namespace chainflow {

// --- distributional metrics over classifier features ---

struct FeatureSetStats {
    Eigen::VectorXd mean;
    Eigen::MatrixXd cov;
};

FeatureSetStats feature_stats(const std::vector<Eigen::VectorXd>& features);

// Frechet distance between Gaussian fits; covariances are stabilized with
// 1e-6*I and the matrix square root uses the symmetrized product with
// negative eigenvalues clamped to zero.
double fpsd(const FeatureSetStats& gen, const FeatureSetStats& ref);

// exp(mean KL(p || marginal)), natural log. Result lies in [1, K].
double fold_score(const std::vector<Eigen::VectorXd>& predictions);

// 10 x Jensen-Shannon divergence (base-2) between the two marginal predicted
// distributions of one level. Callers average C/A/T for the headline value.
double fjsd(const std::vector<Eigen::VectorXd>& preds_gen,
            const std::vector<Eigen::VectorXd>& preds_ref);

struct ReclassResult {
    double mean_prob = 0.0;
    int used = 0;
    int skipped = 0;  // samples lacking a label at the requested level
};

// level: 0 = C, 1 = A, 2 = T.
ReclassResult reclassification_probability(const std::vector<Backbone>& samples,
                                           const std::vector<FoldLabel>& targets,
                                           const FoldClassifier& classifier, int level);

// --- geometry metrics ---

enum class SSClass { helix, strand, coil };

struct SecondaryStructure {
    std::vector<SSClass> classes;
    double helix_frac = 0.0;
    double strand_frac = 0.0;
    double coil_frac = 0.0;
};

// P-SEA style C-alpha assignment from local distances, angles and dihedrals.
SecondaryStructure secondary_structure(const Backbone& b);

struct DiversityResult {
    double ratio = 0.0;
    int n_clusters = 0;
};

// Single-linkage clustering: edges where tm_proxy >= threshold.
DiversityResult cluster_diversity(const std::vector<Backbone>& set, double threshold = 0.5);

struct NoveltyResult {
    double mean_max_tm = 0.0;
    int used = 0;
    int skipped = 0;  // samples with an empty same-length reference bucket
};

NoveltyResult novelty(const std::vector<Backbone>& samples,
                      const std::vector<Backbone>& reference);

// --- equivariance analysis ---

struct EquivarianceReport {
    std::vector<double> t;
    std::vector<double> e;        // no alignment
    std::vector<double> e_rot;    // against the sampling rotation R
    std::vector<double> e_opt;    // against the Kabsch-optimal alignment

    std::string to_csv() const;
};

// Monte Carlo estimate over data samples, Gaussian noise, and Haar rotations
// of the clean-prediction consistency errors. Predictions are centered before
// each RMSD.
EquivarianceReport equivariance_analysis(FlowModel& model,
                                         const std::vector<StructureRecord>& data,
                                         const std::vector<double>& t_grid, int n_mc, Rng& rng);

// --- aggregated report ---

struct StructureSetReport {
    int n_samples = 0;
    double fpsd_value = 0.0;
    double fs_c = 0.0, fs_a = 0.0, fs_t = 0.0;
    double fjsd_c = 0.0, fjsd_a = 0.0, fjsd_t = 0.0, fjsd_avg = 0.0;
    double diversity_ratio = 0.0;
    int diversity_clusters = 0;
    double novelty_mean = 0.0;
    double helix_frac = 0.0, strand_frac = 0.0, coil_frac = 0.0;
    // externally computed scRMSD values may be attached; unused otherwise
    std::vector<double> external_scrmsd;

    std::string to_json() const;
    std::string to_csv() const;
};

StructureSetReport evaluate_structure_set(const std::vector<Backbone>& samples,
                                          const std::vector<StructureRecord>& reference,
                                          const FoldClassifier& classifier);

}  // namespace chainflow
