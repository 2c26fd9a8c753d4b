#include "chainflow/sampler.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace chainflow {

StepSchedule build_time_grid(int n_steps) {
    if (n_steps < 2) throw std::invalid_argument("build_time_grid: need at least 2 steps");
    // logspace(-2, 0, n+1), reversed, mapped through 1 - x, then peak-normalized
    std::vector<double> t(n_steps + 1);
    for (int k = 0; k <= n_steps; ++k) {
        const double e = -2.0 + 2.0 * static_cast<double>(n_steps - k) / n_steps;
        t[k] = 1.0 - std::pow(10.0, e);
    }
    const double tmax = t[n_steps];
    for (double& v : t) v /= tmax;
    t[0] = 0.0;
    t[n_steps] = 1.0;
    return StepSchedule{n_steps, std::move(t)};
}

double g_value(const StochasticitySchedule& s, double t) {
    if (t > s.cutoff || s.kind == GKind::zero) return 0.0;
    switch (s.kind) {
        case GKind::main:
            return 1.0 / (t + 0.01);
        case GKind::one_minus_t:
            return (1.0 - t) / (t + 0.01);
        case GKind::tan: {
            const double a = (1.0 - t) * M_PI / 2.0;
            return (M_PI / 2.0) * std::cos(a) / (std::sin(a) + 0.01);
        }
        default:
            return 0.0;
    }
}

Coords score_from_velocity(const Coords& v, const Coords& x_t, double t) {
    if (t >= 1.0) throw std::invalid_argument("score_from_velocity: undefined at t >= 1");
    return (t * v - x_t) / (1.0 - t);
}

Coords guided_velocity(const Coords& v_cond, const Coords& v_uncond, const Coords* v_bad,
                       double omega, double alpha) {
    if (alpha > 0.0 && !v_bad)
        throw std::invalid_argument("guided_velocity: alpha > 0 requires a bad-model velocity");
    Coords mix = (1.0 - alpha) * v_uncond;
    if (v_bad) mix += alpha * (*v_bad);
    return omega * v_cond + (1.0 - omega) * mix;
}

Coords em_step(const Coords& x, double t_prev, double t_next, const Coords& v, const Coords& s,
               double g, double gamma, Rng& rng) {
    if (t_next <= t_prev) throw std::invalid_argument("em_step: times must increase");
    const double delta = t_next - t_prev;
    Coords next = x + (v + g * s) * delta;
    const double amp = std::sqrt(2.0 * delta * g * gamma);
    if (amp > 0.0) {
        for (int i = 0; i < next.rows(); ++i)
            for (int j = 0; j < 3; ++j) next(i, j) += amp * rng.gaussian();
    }
    return next;
}

namespace {

Coords eval_velocity(FlowModel& model, const Coords& x, double t, const Coords* x_hat,
                     const FoldLabel& label) {
    ad::Tape tape;
    nn::Ctx ctx;
    ctx.tape = &tape;
    ctx.store = &model.params();
    ctx.with_grad = false;
    return model.forward(ctx, x, t, x_hat, label).velocity.val();
}

}  // namespace

Backbone sample(FlowModel& model, int L, const GuidanceSpec& guidance,
                const SampleOptions& opts, Rng& rng) {
    if (guidance.alpha > 0.0 && !guidance.bad_model)
        throw std::invalid_argument("sample: alpha > 0 requires a bad model");
    const StepSchedule sched = build_time_grid(opts.n_steps);

    Coords x(L, 3);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < 3; ++j) x(i, j) = rng.gaussian();
    if (opts.trajectory) opts.trajectory->push_back(x);

    const FoldLabel uncond;
    bool have_x_hat = false;
    Coords x_hat;

    for (int k = 0; k < sched.n_steps; ++k) {
        const double t_prev = sched.grid[k];
        const double t_next = sched.grid[k + 1];

        // The same clean prediction (from the previous step's conditional
        // velocity) is fed to every model evaluation of this step.
        const Coords* xh = have_x_hat ? &x_hat : nullptr;
        const Coords v_cond = eval_velocity(model, x, t_prev, xh, guidance.label);
        Coords v = v_cond;
        if (guidance.omega != 1.0 || guidance.alpha > 0.0) {
            const Coords v_uncond =
                guidance.alpha < 1.0 ? eval_velocity(model, x, t_prev, xh, uncond)
                                     : Coords(Coords::Zero(L, 3));
            if (guidance.alpha > 0.0) {
                const Coords v_bad =
                    eval_velocity(*guidance.bad_model, x, t_prev, xh, guidance.label);
                v = guided_velocity(v_cond, v_uncond, &v_bad, guidance.omega, guidance.alpha);
            } else {
                v = guided_velocity(v_cond, v_uncond, nullptr, guidance.omega, guidance.alpha);
            }
        }

        const double g = opts.ode ? 0.0 : g_value(opts.g_schedule, t_prev);
        Coords x_next;
        if (g > 0.0) {
            const Coords s = score_from_velocity(v, x, t_prev);
            if (opts.injected_noise_sq) {
                Coords drift_only = x + (v + g * s) * (t_next - t_prev);
                x_next = em_step(x, t_prev, t_next, v, s, g, opts.gamma, rng);
                *opts.injected_noise_sq += (x_next - drift_only).squaredNorm();
            } else {
                x_next = em_step(x, t_prev, t_next, v, s, g, opts.gamma, rng);
            }
        } else {
            x_next = x + v * (t_next - t_prev);
        }

        if (!x_next.allFinite()) {
            std::ostringstream msg;
            msg << "sample: non-finite state at step " << k << " (t=" << t_prev
                << ", |x| was " << x.norm() << ")";
            throw std::runtime_error(msg.str());
        }
        if (opts.self_conditioning) {
            x_hat = clean_prediction(x, t_prev, v_cond);
            have_x_hat = true;
        }
        x = std::move(x_next);
        if (opts.trajectory) opts.trajectory->push_back(x);
    }
    return Backbone{x};
}

}  // namespace chainflow
