#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "chainflow/flow.hpp"

using namespace chainflow;

namespace {

Coords random_coords(int n, Rng& rng, double scale = 1.0) {
    Coords c(n, 3);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < 3; ++j) c(i, j) = scale * rng.gaussian();
    return c;
}

// Linear per-residue velocity model, enough to exercise training_step.
class TinyModel : public FlowModel {
  public:
    explicit TinyModel(uint64_t seed) {
        Rng rng(seed);
        store_.add("w", 3, 3, 0.1, rng);
        store_.add("wt", 3, 3, 0.1, rng);
        store_.add_zeros("b", 1, 3);
    }
    nn::ParamStore& params() override { return store_; }
    ModelOutput forward(nn::Ctx& ctx, const Coords& x_t, double t, const Coords*,
                        const FoldLabel&) override {
        ad::Var x = ctx.constant(x_t);
        ad::Var v = ad::add(ad::matmul(x, ctx.param("w")),
                            ad::matmul(ad::cmul(x, t), ctx.param("wt")));
        v = ad::add_rowvec(v, ctx.param("b"));
        return ModelOutput{v, std::nullopt};
    }
    bool has_pair_head() const override { return false; }

  private:
    nn::ParamStore store_;
};

std::vector<StructureRecord> trivial_batch(int batch, int len, double spacing = 19.0) {
    Coords c(len, 3);
    for (int i = 0; i < len; ++i) c.row(i) << spacing * i, 0.0, 0.0;
    StructureRecord rec;
    rec.backbone = Backbone{c};
    rec.source_id = "toy";
    return std::vector<StructureRecord>(batch, rec);
}

}  // namespace

TEST_CASE("sample_time mean and support") {
    Rng rng(1);
    TimeSampler s;
    const int n = 1000000;
    auto draws = sample_time(n, s, rng);
    double mean = 0.0;
    for (double t : draws) {
        CHECK(t >= 0.0);
        CHECK(t < 1.0);
        mean += t;
    }
    mean /= n;
    // 0.02*0.5 + 0.98*(1.9/2.9)
    CHECK(mean == doctest::Approx(0.6521).epsilon(0.004));
}

TEST_CASE("sample_time KS against analytic mixture CDF") {
    Rng rng(2);
    TimeSampler s;
    const int n = 1000000;
    auto draws = sample_time(n, s, rng);
    std::sort(draws.begin(), draws.end());
    double ks = 0.0;
    for (int i = 0; i < n; ++i) {
        const double F = time_cdf(draws[i], s);
        ks = std::max(ks, std::abs(F - static_cast<double>(i) / n));
        ks = std::max(ks, std::abs(F - static_cast<double>(i + 1) / n));
    }
    CHECK(ks < 0.01);
}

TEST_CASE("time density integrates to one") {
    TimeSampler s;
    const int n = 200000;  // Simpson panels (even count)
    const double h = 1.0 / n;
    double acc = time_density(0.0, s) + time_density(1.0, s);
    for (int i = 1; i < n; ++i) acc += (i % 2 ? 4.0 : 2.0) * time_density(i * h, s);
    CHECK(acc * h / 3.0 == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("interpolate endpoints and midpoint") {
    Rng rng(3);
    Coords x1 = random_coords(10, rng), eps = random_coords(10, rng);
    CHECK((interpolate(x1, eps, 0.0) - eps).cwiseAbs().maxCoeff() == 0.0);
    CHECK((interpolate(x1, eps, 1.0) - x1).cwiseAbs().maxCoeff() == 0.0);
    Coords a(1, 3), b(1, 3);
    a << 2, 0, 0;
    b.setZero();
    CHECK(interpolate(a, b, 0.5)(0, 0) == doctest::Approx(1.0));
}

TEST_CASE("cfm_loss closed forms and scalar-loop oracle") {
    Rng rng(4);
    Coords x1 = random_coords(7, rng), eps = random_coords(7, rng);
    CHECK(cfm_loss(x1 - eps, x1, eps) == 0.0);

    Coords one(1, 3), z(1, 3);
    one << 1, 0, 0;
    z.setZero();
    CHECK(cfm_loss(one, z, z) == doctest::Approx(1.0));

    Coords v = random_coords(7, rng);
    double acc = 0.0;
    for (int i = 0; i < 7; ++i)
        for (int j = 0; j < 3; ++j) {
            const double d = v(i, j) - (x1(i, j) - eps(i, j));
            acc += d * d;
        }
    CHECK(std::abs(cfm_loss(v, x1, eps) - acc / 7.0) < 1e-10);
}

TEST_CASE("clean_prediction identities") {
    Rng rng(5);
    Coords x1 = random_coords(12, rng), eps = random_coords(12, rng);
    for (double t : {0.1, 0.37, 0.9, 0.999}) {
        Coords x_t = interpolate(x1, eps, t);
        CHECK((clean_prediction(x_t, t, x1 - eps) - x1).cwiseAbs().maxCoeff() < 1e-9);
    }
    Coords v = random_coords(12, rng);
    Coords x_t = random_coords(12, rng);
    CHECK((clean_prediction(x_t, 1.0, v) - x_t).cwiseAbs().maxCoeff() == 0.0);
    CHECK((clean_prediction(x_t, 0.3, Coords::Zero(12, 3)) - x_t).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("distogram_loss gate, perfect and uniform predictions") {
    Rng rng(6);
    const int L = 8;
    Backbone b{random_coords(L, rng, 5.0)};
    Eigen::MatrixXd uniform = Eigen::MatrixXd::Zero(L * L, 64);
    CHECK(distogram_loss(uniform, b, 0.29) == 0.0);
    CHECK(distogram_loss(uniform, b, 0.3) == doctest::Approx(std::log(64.0)).epsilon(1e-9));
    CHECK(distogram_loss(uniform, b, 0.5) > 0.0);

    const auto bins = pair_distance_bins(b, 64, 1.0, 30.0);
    Eigen::MatrixXd sharp = Eigen::MatrixXd::Zero(L * L, 64);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) sharp(i * L + j, bins(i, j)) = 50.0;
    CHECK(distogram_loss(sharp, b, 0.5) < 1e-10);
}

TEST_CASE("losses invariant to a shared rotation") {
    Rng rng(7);
    Coords x1 = random_coords(20, rng, 4.0), eps = random_coords(20, rng);
    Coords v = random_coords(20, rng);
    Eigen::MatrixXd logits(400, 64);
    for (int i = 0; i < logits.size(); ++i) logits(i / 64, i % 64) = rng.gaussian();
    const Rotation r = random_rotation(rng);
    const double base = cfm_loss(v, x1, eps) + distogram_loss(logits, Backbone{x1}, 0.5);
    const double rot =
        cfm_loss((v * r.matrix.transpose()).eval(), (x1 * r.matrix.transpose()).eval(),
                 (eps * r.matrix.transpose()).eval()) +
        distogram_loss(logits, Backbone{(x1 * r.matrix.transpose()).eval()}, 0.5);
    CHECK(std::abs(base - rot) < 1e-6);
}

TEST_CASE("dropout_labels frequencies on a full label") {
    Rng rng(8);
    FoldLabel full{1, 2, 3};
    DropoutSchedule s;
    const int n = 1000000;
    int counts[4] = {0, 0, 0, 0};
    for (int i = 0; i < n; ++i) {
        FoldLabel out = dropout_labels(full, s, rng);
        const int depth = out.t ? 3 : (out.a ? 2 : (out.c ? 1 : 0));
        ++counts[depth];
        CHECK(out.hierarchy_consistent());
    }
    const double expect[4] = {0.5, 0.1, 0.15, 0.25};
    double chi2 = 0.0;
    for (int k = 0; k < 4; ++k) {
        const double freq = static_cast<double>(counts[k]) / n;
        CHECK(std::abs(freq - expect[k]) < 0.002);
        const double e = n * expect[k];
        chi2 += (counts[k] - e) * (counts[k] - e) / e;
    }
    CHECK(chi2 < 16.27);  // df=3, p > 0.001
}

TEST_CASE("dropout_labels fall-through") {
    Rng rng(9);
    DropoutSchedule s;
    FoldLabel empty;
    for (int i = 0; i < 1000; ++i) CHECK(dropout_labels(empty, s, rng).empty());

    FoldLabel c_only{4, std::nullopt, std::nullopt};
    const int n = 1000000;
    int kept = 0;
    for (int i = 0; i < n; ++i) {
        FoldLabel out = dropout_labels(c_only, s, rng);
        CHECK(!out.a);
        CHECK(!out.t);
        if (out.c) ++kept;
    }
    CHECK(std::abs(static_cast<double>(kept) / n - 0.5) < 0.002);
}

TEST_CASE("training_step smoke: loss halves on a trivial chain") {
    TinyModel model(11);
    Rng rng(12);
    TrainConfig cfg;
    cfg.adam.lr = 0.05;
    auto batch = trivial_batch(4, 2);
    double early = 0.0, late = 0.0;
    const int steps = 200;
    for (int s = 1; s <= steps; ++s) {
        const auto stats = training_step(model, batch, cfg, s, rng);
        CHECK(std::isfinite(stats.loss));
        if (s <= 10) early += stats.loss;
        if (s > steps - 10) late += stats.loss;
    }
    CHECK(late < 0.5 * early);
}

TEST_CASE("self-conditioning branch frequency") {
    TinyModel model(13);
    Rng rng(14);
    TrainConfig cfg;
    auto batch = trivial_batch(1, 2);
    double frac = 0.0;
    const int steps = 10000;
    for (int s = 1; s <= steps; ++s) frac += training_step(model, batch, cfg, s, rng).self_cond_frac;
    CHECK(std::abs(frac / steps - 0.5) < 0.02);
}

TEST_CASE("cfm gradient matches central finite differences") {
    TinyModel model(15);
    Rng rng(16);
    Coords x1 = random_coords(6, rng), eps = random_coords(6, rng);
    const double t = 0.6;
    Coords x_t = interpolate(x1, eps, t);
    FoldLabel label;

    auto loss_at = [&](bool with_grad) {
        ad::Tape tape;
        nn::Ctx ctx;
        ctx.tape = &tape;
        ctx.store = &model.params();
        ctx.with_grad = with_grad;
        ModelOutput out = model.forward(ctx, x_t, t, nullptr, label);
        ad::Var loss = cfm_loss_var(out.velocity, x1, eps);
        if (with_grad) tape.backward(loss);
        return std::make_pair(loss.val()(0, 0), ctx.collect_grads());
    };

    auto [loss0, grads] = loss_at(true);
    CHECK(loss0 > 0.0);
    auto& w = model.params().at("w").value;
    const double h = 1e-6;
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) {
            const double keep = w(i, j);
            w(i, j) = keep + h;
            const double lp = loss_at(false).first;
            w(i, j) = keep - h;
            const double lm = loss_at(false).first;
            w(i, j) = keep;
            const double fd = (lp - lm) / (2.0 * h);
            const double g = grads.at("w")(i, j);
            CHECK(std::abs(fd - g) / std::max({std::abs(fd), std::abs(g), 1e-6}) < 1e-4);
        }
}

TEST_CASE("training_step rejects mixed lengths and empty batches") {
    TinyModel model(17);
    Rng rng(18);
    TrainConfig cfg;
    std::vector<StructureRecord> empty;
    CHECK_THROWS(training_step(model, empty, cfg, 1, rng));
    auto batch = trivial_batch(1, 2);
    auto longer = trivial_batch(1, 3);
    batch.push_back(longer.front());
    CHECK_THROWS(training_step(model, batch, cfg, 1, rng));
}
