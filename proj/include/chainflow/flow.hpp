#pragma once

#include <optional>
#include <vector>

#include "chainflow/ad.hpp"
#include "chainflow/geom.hpp"
#include "chainflow/nn.hpp"
#include "chainflow/rng.hpp"

namespace chainflow {

// p(t) = 0.02 U(0,1) + 0.98 Beta(1.9, 1.0)
struct TimeSampler {
    double uniform_weight = 0.02;
    double beta_weight = 0.98;
    double beta_a = 1.9;
    double beta_b = 1.0;
};

// Draws are clamped strictly below 1 (1 - 1e-6) so the score stays defined.
std::vector<double> sample_time(int n, const TimeSampler& s, Rng& rng);
double time_density(double t, const TimeSampler& s);
double time_cdf(double t, const TimeSampler& s);

Coords interpolate(const Coords& x1, const Coords& eps, double t);
Coords clean_prediction(const Coords& x_t, double t, const Coords& v);

struct NoisySample {
    Coords x1;
    Coords eps;
    double t = 0.0;
    Coords x_t;
    Coords target_v;
};

NoisySample make_noisy_sample(const Coords& x1, double t, Rng& rng);

double cfm_loss(const Coords& v_pred, const Coords& x1, const Coords& eps);

// logits are (L*L) x n_bins, row-major pair layout (i,j) -> i*L+j.
double distogram_loss(const Eigen::MatrixXd& logits, const Backbone& x1, double t,
                      int n_bins = 64, double d_min = 1.0, double d_max = 30.0);

struct DropoutSchedule {
    double p_none = 0.5;
    double p_c_only = 0.1;
    double p_ca = 0.15;
    double p_cat = 0.25;
};

FoldLabel dropout_labels(const FoldLabel& label, const DropoutSchedule& s, Rng& rng);

// Graph-mode losses used by training_step.
ad::Var cfm_loss_var(ad::Var v_pred, const Coords& x1, const Coords& eps);
ad::Var distogram_loss_var(ad::Var logits, const Backbone& x1, double t,
                           int n_bins = 64, double d_min = 1.0, double d_max = 30.0);

struct ModelOutput {
    ad::Var velocity;
    std::optional<ad::Var> distogram_logits;
};

// Minimal interface the objective and sampler need from a denoiser.
class FlowModel {
  public:
    virtual ~FlowModel() = default;
    virtual nn::ParamStore& params() = 0;
    virtual ModelOutput forward(nn::Ctx& ctx, const Coords& x_t, double t,
                                const Coords* x_hat, const FoldLabel& label) = 0;
    virtual bool has_pair_head() const = 0;
};

struct TrainConfig {
    TimeSampler time_sampler;
    DropoutSchedule dropout;
    nn::AdamConfig adam;
    double self_cond_prob = 0.5;
};

struct StepStats {
    double loss = 0.0;
    double cfm = 0.0;
    double distogram = 0.0;
    double self_cond_frac = 0.0;
};

// One optimizer step over an equal-length batch. Throws on non-finite loss.
StepStats training_step(FlowModel& model, const std::vector<StructureRecord>& batch,
                        const TrainConfig& cfg, int step, Rng& rng);

}  // namespace chainflow
