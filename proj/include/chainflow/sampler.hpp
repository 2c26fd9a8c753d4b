#pragma once

#include <vector>

#include "chainflow/flow.hpp"
#include "chainflow/geom.hpp"
#include "chainflow/rng.hpp"

namespace chainflow {

struct StepSchedule {
    int n_steps = 400;
    std::vector<double> grid;  // t_0 = 0 ... t_n = 1, strictly increasing
};

// Log-spaced grid, dense near t = 1: t_k = (1 - 10^(-2k/n)) / (1 - 10^-2).
StepSchedule build_time_grid(int n_steps);

enum class GKind { main, one_minus_t, tan, zero };

struct StochasticitySchedule {
    GKind kind = GKind::main;
    double cutoff = 0.99;  // g forced to 0 beyond this to dodge the 1/(1-t) pole
};

double g_value(const StochasticitySchedule& s, double t);

// Eq. 2: s = (t v - x_t) / (1 - t). Requires t < 1.
Coords score_from_velocity(const Coords& v, const Coords& x_t, double t);

// Eq. 4: w*v_cond + (1-w)*((1-a)*v_uncond + a*v_bad).
Coords guided_velocity(const Coords& v_cond, const Coords& v_uncond, const Coords* v_bad,
                       double omega, double alpha);

Coords em_step(const Coords& x, double t_prev, double t_next, const Coords& v, const Coords& s,
               double g, double gamma, Rng& rng);

struct GuidanceSpec {
    double omega = 1.0;
    double alpha = 0.0;
    FoldLabel label;
    FlowModel* bad_model = nullptr;
};

struct SampleOptions {
    int n_steps = 400;
    StochasticitySchedule g_schedule;
    double gamma = 0.45;
    bool ode = false;  // forces g = 0 on every step
    bool self_conditioning = true;
    std::vector<Coords>* trajectory = nullptr;   // optional per-step dump incl. x_0
    double* injected_noise_sq = nullptr;         // accumulates ||noise||^2 over the run
};

Backbone sample(FlowModel& model, int L, const GuidanceSpec& guidance,
                const SampleOptions& opts, Rng& rng);

}  // namespace chainflow
