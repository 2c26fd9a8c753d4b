#include "chainflow/flow.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace chainflow {

std::vector<double> sample_time(int n, const TimeSampler& s, Rng& rng) {
    if (n < 1) throw std::invalid_argument("sample_time: n must be >= 1");
    std::vector<double> out(n);
    for (int i = 0; i < n; ++i) {
        double t;
        if (rng.uniform() < s.uniform_weight) {
            t = rng.uniform();
        } else {
            // Beta(a, 1) via inverse CDF: u^(1/a).
            t = std::pow(rng.uniform(), 1.0 / s.beta_a);
        }
        if (t >= 1.0) t = 1.0 - 1e-6;
        out[i] = t;
    }
    return out;
}

double time_density(double t, const TimeSampler& s) {
    if (t < 0.0 || t > 1.0) return 0.0;
    return s.uniform_weight + s.beta_weight * s.beta_a * std::pow(t, s.beta_a - 1.0);
}

double time_cdf(double t, const TimeSampler& s) {
    if (t <= 0.0) return 0.0;
    if (t >= 1.0) return 1.0;
    return s.uniform_weight * t + s.beta_weight * std::pow(t, s.beta_a);
}

Coords interpolate(const Coords& x1, const Coords& eps, double t) {
    if (x1.rows() != eps.rows()) throw std::invalid_argument("interpolate: shape mismatch");
    return t * x1 + (1.0 - t) * eps;
}

Coords clean_prediction(const Coords& x_t, double t, const Coords& v) {
    if (x_t.rows() != v.rows()) throw std::invalid_argument("clean_prediction: shape mismatch");
    return x_t + (1.0 - t) * v;
}

NoisySample make_noisy_sample(const Coords& x1, double t, Rng& rng) {
    NoisySample ns;
    ns.x1 = x1;
    ns.t = t;
    ns.eps.resize(x1.rows(), 3);
    for (int i = 0; i < ns.eps.rows(); ++i)
        for (int j = 0; j < 3; ++j) ns.eps(i, j) = rng.gaussian();
    ns.x_t = interpolate(ns.x1, ns.eps, t);
    ns.target_v = ns.x1 - ns.eps;
    return ns;
}

double cfm_loss(const Coords& v_pred, const Coords& x1, const Coords& eps) {
    const Coords target = x1 - eps;
    return (v_pred - target).squaredNorm() / static_cast<double>(x1.rows());
}

namespace {

std::vector<int> flat_pair_bins(const Backbone& x1, int n_bins, double d_min, double d_max) {
    const auto bins = pair_distance_bins(x1, n_bins, d_min, d_max);
    const int L = static_cast<int>(bins.rows());
    std::vector<int> flat(static_cast<size_t>(L) * L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) flat[static_cast<size_t>(i) * L + j] = bins(i, j);
    return flat;
}

}  // namespace

double distogram_loss(const Eigen::MatrixXd& logits, const Backbone& x1, double t,
                      int n_bins, double d_min, double d_max) {
    if (t < 0.3) return 0.0;
    const int L = static_cast<int>(x1.length());
    if (logits.rows() != static_cast<Eigen::Index>(L) * L || logits.cols() != n_bins)
        throw std::invalid_argument("distogram_loss: logits shape mismatch");
    const auto targets = flat_pair_bins(x1, n_bins, d_min, d_max);
    double acc = 0.0;
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        const double m = logits.row(r).maxCoeff();
        const double lse = m + std::log((logits.row(r).array() - m).exp().sum());
        acc += lse - logits(r, targets[static_cast<size_t>(r)]);
    }
    return acc / static_cast<double>(logits.rows());
}

FoldLabel dropout_labels(const FoldLabel& label, const DropoutSchedule& s, Rng& rng) {
    if (!label.hierarchy_consistent())
        throw std::invalid_argument("dropout_labels: inconsistent label hierarchy");
    const int depth = label.t ? 3 : (label.a ? 2 : (label.c ? 1 : 0));
    const double u = rng.uniform();
    int keep;
    if (u < s.p_none)
        keep = 0;
    else if (u < s.p_none + s.p_c_only)
        keep = 1;
    else if (u < s.p_none + s.p_c_only + s.p_ca)
        keep = 2;
    else
        keep = 3;
    // Outcomes needing unavailable levels collapse to the coarsest available.
    if (keep > depth) keep = depth;
    FoldLabel out;
    if (keep >= 1) out.c = label.c;
    if (keep >= 2) out.a = label.a;
    if (keep >= 3) out.t = label.t;
    return out;
}

ad::Var cfm_loss_var(ad::Var v_pred, const Coords& x1, const Coords& eps) {
    ad::Mat target = x1 - eps;
    ad::Var diff = ad::sub(v_pred, v_pred.tape->constant(std::move(target)));
    return ad::cmul(ad::sum(ad::square(diff)), 1.0 / static_cast<double>(x1.rows()));
}

ad::Var distogram_loss_var(ad::Var logits, const Backbone& x1, double t,
                           int n_bins, double d_min, double d_max) {
    if (t < 0.3) return logits.tape->constant(ad::Mat::Zero(1, 1));
    return ad::cross_entropy_mean(logits, flat_pair_bins(x1, n_bins, d_min, d_max));
}

StepStats training_step(FlowModel& model, const std::vector<StructureRecord>& batch,
                        const TrainConfig& cfg, int step, Rng& rng) {
    if (batch.empty()) throw std::invalid_argument("training_step: empty batch");
    const Eigen::Index L = batch.front().backbone.length();
    for (const auto& rec : batch)
        if (rec.backbone.length() != L)
            throw std::invalid_argument("training_step: batch chains must share one length");

    StepStats stats;
    std::map<std::string, ad::Mat> grad_sum;
    const double inv_b = 1.0 / static_cast<double>(batch.size());

    for (const auto& rec : batch) {
        Backbone centered = center_backbone(rec.backbone);
        const Rotation rot = random_rotation(rng);
        Coords x1 = centered.coords * rot.matrix.transpose();

        FoldLabel label;
        if (!rec.labels.empty())
            label = rec.labels[rng.uniform_int(static_cast<uint64_t>(rec.labels.size()))];
        label = dropout_labels(label, cfg.dropout, rng);

        const double t = sample_time(1, cfg.time_sampler, rng)[0];
        NoisySample ns = make_noisy_sample(x1, t, rng);

        const bool use_sc = rng.bernoulli(cfg.self_cond_prob);
        Coords x_hat;
        if (use_sc) {
            ad::Tape pre_tape;
            nn::Ctx pre;
            pre.tape = &pre_tape;
            pre.store = &model.params();
            pre.train = false;
            pre.with_grad = false;
            pre.rng = &rng;
            ModelOutput pre_out = model.forward(pre, ns.x_t, t, nullptr, label);
            x_hat = clean_prediction(ns.x_t, t, pre_out.velocity.val());
            stats.self_cond_frac += inv_b;
        }

        ad::Tape tape;
        nn::Ctx ctx;
        ctx.tape = &tape;
        ctx.store = &model.params();
        ctx.train = true;
        ctx.with_grad = true;
        ctx.rng = &rng;
        ModelOutput out = model.forward(ctx, ns.x_t, t, use_sc ? &x_hat : nullptr, label);

        ad::Var loss = cfm_loss_var(out.velocity, ns.x1, ns.eps);
        const double cfm_val = loss.val()(0, 0);
        double dist_val = 0.0;
        if (model.has_pair_head() && out.distogram_logits && t >= 0.3) {
            ad::Var dl = distogram_loss_var(*out.distogram_logits, Backbone{ns.x1}, t);
            dist_val = dl.val()(0, 0);
            loss = ad::add(loss, dl);
        }
        const double total = loss.val()(0, 0);
        if (!std::isfinite(total)) {
            std::ostringstream msg;
            msg << "training_step: non-finite loss at step " << step << " (t=" << t << ")";
            throw std::runtime_error(msg.str());
        }
        stats.cfm += cfm_val * inv_b;
        stats.distogram += dist_val * inv_b;
        stats.loss += total * inv_b;

        tape.backward(loss);
        for (auto& [name, g] : ctx.collect_grads()) {
            auto it = grad_sum.find(name);
            if (it == grad_sum.end())
                grad_sum.emplace(name, g * inv_b);
            else
                it->second += g * inv_b;
        }
    }

    nn::adam_step(model.params(), grad_sum, cfg.adam, step);
    return stats;
}

}  // namespace chainflow
