#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>
#include <cmath>
#include <numeric>

#include "chainflow/model.hpp"

using namespace chainflow;

namespace {

ModelConfig small_config() {
    ModelConfig c;
    c.seq_dim = 32;
    c.pair_dim = 16;
    c.cond_dim = 32;
    c.n_heads = 2;
    c.n_blocks = 2;
    c.n_registers = 4;
    c.n_pair_updates = 1;
    c.t_enc_dim = 16;
    c.idx_enc_dim = 8;
    c.fold_emb_dim = 8;
    c.ffn_hidden = 48;
    c.tri_hidden = 8;
    c.c_classes = 3;
    c.a_classes = 2;
    c.t_classes = 2;
    return c;
}

Coords random_coords(int n, Rng& rng, double scale = 3.0) {
    Coords c(n, 3);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < 3; ++j) c(i, j) = scale * rng.gaussian();
    return c;
}

void randomize_params(nn::ParamStore& store, Rng& rng, double scale = 0.05) {
    for (auto& [name, p] : store.all())
        for (Eigen::Index i = 0; i < p.value.size(); ++i)
            p.value(i / p.value.cols(), i % p.value.cols()) = scale * rng.gaussian();
}

Eigen::MatrixXd run_velocity(Denoiser& m, const Coords& x_t, double t, const Coords* x_hat,
                             const FoldLabel& label, const std::vector<int>* idx = nullptr,
                             const Motif* motif = nullptr) {
    ad::Tape tape;
    nn::Ctx ctx;
    ctx.tape = &tape;
    ctx.store = &m.params();
    ctx.with_grad = false;
    return m.forward_full(ctx, x_t, t, x_hat, label, idx, motif).velocity.val();
}

}  // namespace

TEST_CASE("identity at init: zero velocity map") {
    Denoiser m(small_config(), 1);
    Rng rng(2);
    Coords x = random_coords(12, rng);
    FoldLabel label{1, 1, 0};
    auto v = run_velocity(m, x, 0.7, nullptr, label);
    CHECK(v.cwiseAbs().maxCoeff() == 0.0);

    ad::Tape tape;
    nn::Ctx ctx;
    ctx.tape = &tape;
    ctx.store = &m.params();
    ctx.with_grad = false;
    auto out = m.forward(ctx, x, 0.7, nullptr, label);
    REQUIRE(out.distogram_logits.has_value());
    CHECK(out.distogram_logits->val().allFinite());
}

TEST_CASE("forward is deterministic and leaves parameters untouched") {
    Denoiser m(small_config(), 3);
    Rng rng(4);
    randomize_params(m.params(), rng);
    const uint64_t before = m.params().value_checksum();
    Coords x = random_coords(10, rng);
    Coords xh = random_coords(10, rng);
    FoldLabel label{0, 1, 1};
    auto v1 = run_velocity(m, x, 0.5, &xh, label);
    auto v2 = run_velocity(m, x, 0.5, &xh, label);
    CHECK((v1 - v2).cwiseAbs().maxCoeff() == 0.0);
    CHECK(v1.cwiseAbs().maxCoeff() > 0.0);
    CHECK(m.params().value_checksum() == before);
}

TEST_CASE("residue permutation equivariance") {
    Denoiser m(small_config(), 5);
    Rng rng(6);
    randomize_params(m.params(), rng);
    const int L = 9;
    Coords x = random_coords(L, rng);
    Coords xh = random_coords(L, rng);
    FoldLabel label{2, 0, 1};
    std::vector<int> base_idx(L);
    std::iota(base_idx.begin(), base_idx.end(), 0);
    auto v = run_velocity(m, x, 0.6, &xh, label, &base_idx);

    std::vector<int> perm{3, 1, 7, 0, 8, 2, 5, 4, 6};
    Coords xp(L, 3), xhp(L, 3);
    std::vector<int> idx(L);
    for (int i = 0; i < L; ++i) {
        xp.row(i) = x.row(perm[i]);
        xhp.row(i) = xh.row(perm[i]);
        idx[i] = perm[i];
    }
    auto vp = run_velocity(m, xp, 0.6, &xhp, label, &idx);
    for (int i = 0; i < L; ++i)
        CHECK((vp.row(i) - v.row(perm[i])).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("separation bins and null x-hat block") {
    CHECK(separation_bin(0) == 63);
    CHECK(separation_bin(-1) == 62);
    CHECK(separation_bin(1) == 64);
    CHECK(separation_bin(-100) == 0);
    CHECK(separation_bin(100) == 126);

    ModelConfig cfg = small_config();
    Rng rng(7);
    Coords x = random_coords(5, rng);
    std::vector<int> idx{0, 1, 2, 3, 4};
    auto f = pair_onehot_features(x, nullptr, idx, cfg);
    CHECK(f.middleCols(cfg.xt_bins, cfg.xhat_bins).cwiseAbs().maxCoeff() == 0.0);
    // each row: one xt bin and one separation bin set
    for (int r = 0; r < f.rows(); ++r) CHECK(f.row(r).sum() == doctest::Approx(2.0));
    Coords xh = random_coords(5, rng);
    auto f2 = pair_onehot_features(x, &xh, idx, cfg);
    for (int r = 0; r < f2.rows(); ++r) CHECK(f2.row(r).sum() == doctest::Approx(3.0));
}

TEST_CASE("all-zero motif mask equals no motif") {
    Denoiser m(small_config(), 8);
    Rng rng(9);
    randomize_params(m.params(), rng);
    Coords x = random_coords(8, rng);
    FoldLabel label;
    Motif zero{random_coords(8, rng), std::vector<bool>(8, false)};
    auto v0 = run_velocity(m, x, 0.4, nullptr, label);
    auto v1 = run_velocity(m, x, 0.4, nullptr, label, nullptr, &zero);
    CHECK((v0 - v1).cwiseAbs().maxCoeff() < 1e-9);

    Motif real{random_coords(8, rng), std::vector<bool>(8, true)};
    auto v2 = run_velocity(m, x, 0.4, nullptr, label, nullptr, &real);
    CHECK((v0 - v2).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("parameter count formula matches the store exactly") {
    ModelConfig cfg = small_config();
    Denoiser m(cfg, 10);
    CHECK(cfg.param_count() == m.params().count_scalars());

    ModelConfig no_head = cfg;
    no_head.use_distogram_head = false;
    no_head.n_pair_updates = 0;
    Denoiser m2(no_head, 10);
    CHECK(no_head.param_count() == m2.params().count_scalars());
}

TEST_CASE("fold label embeddings") {
    Denoiser m(small_config(), 11);
    FoldLabel a{1, 1, 0}, b{1, 1, 1}, none;
    auto ea = m.embed_fold_labels(a);
    auto eb = m.embed_fold_labels(b);
    const int fe = m.config().fold_emb_dim;
    CHECK((ea.segment(0, 2 * fe) - eb.segment(0, 2 * fe)).cwiseAbs().maxCoeff() == 0.0);
    CHECK((ea.segment(2 * fe, fe) - eb.segment(2 * fe, fe)).cwiseAbs().maxCoeff() > 0.0);
    CHECK((m.embed_fold_labels(none) - m.embed_fold_labels(none)).cwiseAbs().maxCoeff() == 0.0);
    FoldLabel bad{7, std::nullopt, std::nullopt};
    CHECK_THROWS(m.embed_fold_labels(bad));
}

TEST_CASE("config validation and json round trip") {
    ModelConfig c = small_config();
    c.validate();
    ModelConfig r = ModelConfig::from_json(c.to_json());
    CHECK(r.param_count() == c.param_count());
    CHECK(r.seq_dim == c.seq_dim);
    CHECK(r.n_pair_updates == c.n_pair_updates);

    ModelConfig bad = small_config();
    bad.n_heads = 3;  // 32 % 3 != 0
    CHECK_THROWS(bad.validate());
    bad = small_config();
    bad.n_pair_updates = bad.n_blocks + 1;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("lora: zero-init exactness, frozen base, merge") {
    ModelConfig cfg = small_config();
    Denoiser m(cfg, 12);
    Rng rng(13);
    randomize_params(m.params(), rng);
    Coords x = random_coords(7, rng);
    FoldLabel label{0, 0, 0};
    auto base_out = run_velocity(m, x, 0.5, nullptr, label);
    const uint64_t base_sum = m.params().value_checksum();

    nn::LoraSpec spec;
    m.attach_lora(spec, rng);
    CHECK(m.lora_active());
    CHECK_THROWS(m.attach_lora(spec, rng));  // double apply

    auto fresh = run_velocity(m, x, 0.5, nullptr, label);
    CHECK((fresh - base_out).cwiseAbs().maxCoeff() == 0.0);

    // perturb the up factors as a stand-in for adapter training
    for (auto& [name, p] : m.params().all())
        if (name.find(".lora_up") != std::string::npos)
            for (Eigen::Index i = 0; i < p.value.size(); ++i)
                p.value(i / p.value.cols(), i % p.value.cols()) = 0.01 * rng.gaussian();
    auto adapted = run_velocity(m, x, 0.5, nullptr, label);
    CHECK((adapted - base_out).cwiseAbs().maxCoeff() > 0.0);

    // base weights untouched by adapter "training"
    for (const auto& name : m.lora_target_names()) CHECK(!m.params().at(name).trainable);

    m.merge_adapters(spec);
    CHECK(!m.lora_active());
    auto merged = run_velocity(m, x, 0.5, nullptr, label);
    CHECK((merged - adapted).cwiseAbs().maxCoeff() < 1e-5);
    CHECK(m.params().value_checksum() != base_sum);
}

TEST_CASE("pair update cost scales cubically") {
    // probe config where the triangle contraction dominates the quadratic terms
    ModelConfig cfg = small_config();
    cfg.pair_dim = 8;
    cfg.tri_hidden = 64;
    cfg.n_pair_updates = 1;
    Denoiser m(cfg, 14);
    Rng rng(15);
    randomize_params(m.params(), rng);

    auto time_update = [&](int L) {
        Coords x = random_coords(L, rng);
        ad::Tape tape;
        nn::Ctx ctx;
        ctx.tape = &tape;
        ctx.store = &m.params();
        ctx.with_grad = false;
        auto in = m.build_inputs(ctx, x, nullptr, nullptr, FoldLabel{}, 0.5, nullptr);
        double best = 1e9;
        for (int rep = 0; rep < 5; ++rep) {
            const auto t0 = std::chrono::steady_clock::now();
            m.pair_update(ctx, in.tokens, in.pair, 0, L);
            const auto t1 = std::chrono::steady_clock::now();
            best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
        }
        return best;
    };
    const double ratio = time_update(64) / time_update(32);
    CHECK(ratio > 4.0);
    CHECK(ratio < 12.0);
}

TEST_CASE("large-coordinate inputs stay finite") {
    Denoiser m(small_config(), 16);
    Rng rng(17);
    randomize_params(m.params(), rng, 0.2);
    for (int trial = 0; trial < 20; ++trial) {
        Coords x = random_coords(10, rng, 50.0);
        auto v = run_velocity(m, x, 0.9, nullptr, FoldLabel{});
        CHECK(v.allFinite());
    }
}
