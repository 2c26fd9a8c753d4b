#include "chainflow/classifier.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <stdexcept>

namespace chainflow {

namespace {

using nn::Linear;

const std::array<int, 5> kSeqOffsets{-2, -1, 0, 1, 2};

Eigen::RowVectorXd rbf_expand(double d, int n, double rbf_max) {
    Eigen::RowVectorXd out(n);
    const double spacing = rbf_max / (n - 1);
    for (int k = 0; k < n; ++k) {
        const double c = k * spacing;
        out(k) = std::exp(-0.5 * (d - c) * (d - c) / (spacing * spacing));
    }
    return out;
}

Eigen::RowVectorXd edge_feature(const Coords& x, int src, int dst,
                                const ClassifierConfig& cfg) {
    const int L = static_cast<int>(x.rows());
    Eigen::RowVectorXd f = Eigen::RowVectorXd::Zero(cfg.edge_feat_dim());
    const double d = (x.row(src) - x.row(dst)).norm();
    f.head(cfg.n_rbf) = rbf_expand(d, cfg.n_rbf, cfg.rbf_max);
    const int off = std::clamp(dst - src, -2, 2);
    f(cfg.n_rbf + off + 2) = 1.0;
    if (src != dst && src - 1 >= 0 && dst + 1 < L) {
        const double dih = signed_dihedral(x.row(src - 1), x.row(src), x.row(dst), x.row(dst + 1));
        f(cfg.n_rbf + 5) = std::sin(dih);
        f(cfg.n_rbf + 6) = std::cos(dih);
    }
    return f;
}

}  // namespace

void ClassifierConfig::validate() const {
    if (node_dim <= 0 || phi_dim <= 0 || n_layers <= 0 || n_rbf < 2 || idx_enc_dim <= 0 ||
        idx_enc_dim % 2 != 0)
        throw std::invalid_argument("ClassifierConfig: bad dimensions");
    if (spatial_cutoff <= 0.0 || rbf_max <= 0.0)
        throw std::invalid_argument("ClassifierConfig: bad cutoffs");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
        throw std::invalid_argument("ClassifierConfig: dropout must be in [0,1)");
    if (c_classes <= 0 || a_classes <= 0 || t_classes <= 0)
        throw std::invalid_argument("ClassifierConfig: class counts must be positive");
}

ProteinGraph build_graph(const Backbone& b, const ClassifierConfig& cfg) {
    if (b.length() < 5) throw std::invalid_argument("build_graph: need L >= 5");
    b.validate();
    const Coords& x = b.coords;
    const int L = b.length();
    ProteinGraph g;
    g.length = L;

    for (int r = 0; r < 5; ++r) {
        const int off = kSeqOffsets[r];
        for (int i = 0; i < L; ++i) {
            const int j = i + off;
            if (j < 0 || j >= L) continue;
            g.edges[r].emplace_back(i, j);
        }
    }
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            if (i == j) continue;
            if ((x.row(i) - x.row(j)).norm() < cfg.spatial_cutoff)
                g.edges[5].emplace_back(i, j);
        }

    for (int r = 0; r < ProteinGraph::n_relations; ++r) {
        g.edge_feats[r].resize(static_cast<Eigen::Index>(g.edges[r].size()), cfg.edge_feat_dim());
        for (size_t e = 0; e < g.edges[r].size(); ++e)
            g.edge_feats[r].row(static_cast<Eigen::Index>(e)) =
                edge_feature(x, g.edges[r][e].first, g.edges[r][e].second, cfg);
    }
    return g;
}

FoldClassifier::FoldClassifier(ClassifierConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init_params(seed);
}

FoldClassifier::FoldClassifier(ClassifierConfig cfg, nn::ParamStore store)
    : cfg_(std::move(cfg)), store_(std::move(store)) {
    cfg_.validate();
}

void FoldClassifier::init_params(uint64_t seed) {
    Rng rng(seed);
    store_.add("node.atom", 1, cfg_.node_dim, 0.02, rng);
    Linear{"node.idx", cfg_.idx_enc_dim, cfg_.node_dim, true}.init(store_, rng);
    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "gc" + std::to_string(l) + ".";
        Linear{p + "self", cfg_.node_dim, cfg_.node_dim, true}.init(store_, rng);
        for (int r = 0; r < ProteinGraph::n_relations; ++r)
            Linear{p + "rel" + std::to_string(r), cfg_.node_dim + cfg_.edge_feat_dim(),
                   cfg_.node_dim, false}
                .init(store_, rng);
    }
    Linear{"phi.l", cfg_.node_dim, cfg_.phi_dim, true}.init(store_, rng);
    Linear{"head.c", cfg_.phi_dim, cfg_.c_classes, true}.init(store_, rng);
    Linear{"head.a", cfg_.phi_dim, cfg_.a_classes, true}.init(store_, rng);
    Linear{"head.t", cfg_.phi_dim, cfg_.t_classes, true}.init(store_, rng);
}

FoldClassifier::Logits FoldClassifier::forward(nn::Ctx& ctx, const Backbone& b) const {
    const ProteinGraph g = build_graph(b, cfg_);
    const int L = g.length;

    Eigen::MatrixXd idx_enc(L, cfg_.idx_enc_dim);
    for (int i = 0; i < L; ++i)
        idx_enc.row(i) = nn::sinusoidal_encoding(static_cast<double>(i), cfg_.idx_enc_dim);
    ad::Var h = ad::add(
        ad::matmul(ctx.constant(Eigen::MatrixXd::Ones(L, 1)), ctx.param("node.atom")),
        Linear{"node.idx", cfg_.idx_enc_dim, cfg_.node_dim, true}(ctx, ctx.constant(idx_enc)));

    for (int l = 0; l < cfg_.n_layers; ++l) {
        const std::string p = "gc" + std::to_string(l) + ".";
        ad::Var acc = Linear{p + "self", cfg_.node_dim, cfg_.node_dim, true}(ctx, h);
        for (int r = 0; r < ProteinGraph::n_relations; ++r) {
            if (g.edges[r].empty()) continue;
            const int E = static_cast<int>(g.edges[r].size());
            std::vector<int> src(E);
            Eigen::MatrixXd scatter = Eigen::MatrixXd::Zero(L, E);
            for (int e = 0; e < E; ++e) {
                src[e] = g.edges[r][e].first;
                scatter(g.edges[r][e].second, e) = 1.0;
            }
            ad::Var msg_in = ad::concat_cols(ad::gather_rows(h, src),
                                             ctx.constant(g.edge_feats[r]));
            ad::Var msg = Linear{p + "rel" + std::to_string(r),
                                 cfg_.node_dim + cfg_.edge_feat_dim(), cfg_.node_dim,
                                 false}(ctx, msg_in);
            acc = ad::add(acc, ad::matmul(ctx.constant(scatter), msg));
        }
        h = ad::add(h, nn::dropout(ctx, ad::leaky_relu(acc, cfg_.leaky_slope), cfg_.dropout_p));
    }

    ad::Var pooled = ad::matmul(ctx.constant(Eigen::MatrixXd::Ones(1, L)), h);
    ad::Var phi = ad::leaky_relu(
        Linear{"phi.l", cfg_.node_dim, cfg_.phi_dim, true}(ctx, pooled), cfg_.leaky_slope);
    return Logits{Linear{"head.c", cfg_.phi_dim, cfg_.c_classes, true}(ctx, phi),
                  Linear{"head.a", cfg_.phi_dim, cfg_.a_classes, true}(ctx, phi),
                  Linear{"head.t", cfg_.phi_dim, cfg_.t_classes, true}(ctx, phi), phi};
}

Classification FoldClassifier::classify(const Backbone& b) const {
    ad::Tape tape;
    nn::Ctx ctx;
    ctx.tape = &tape;
    ctx.store = const_cast<nn::ParamStore*>(&store_);
    ctx.train = false;
    ctx.with_grad = false;
    const Logits out = forward(ctx, b);
    auto soft = [](const ad::Mat& logits) {
        Eigen::VectorXd v = logits.row(0).transpose();
        const double m = v.maxCoeff();
        Eigen::VectorXd e = (v.array() - m).exp();
        return Eigen::VectorXd(e / e.sum());
    };
    return Classification{soft(out.c.val()), soft(out.a.val()), soft(out.t.val()),
                          out.phi.val().row(0).transpose()};
}

FoldClassifier train_classifier(const std::vector<StructureRecord>& records,
                                const ClassifierConfig& cfg, const ClassifierTrainConfig& tc,
                                uint64_t seed, ClassifierTrainReport* report) {
    if (records.empty()) throw std::invalid_argument("train_classifier: empty dataset");
    FoldClassifier model(cfg, seed);
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);

    // levels whose label set is empty in this split are reported, not trained
    std::array<std::set<int>, 3> seen;
    for (const auto& rec : records)
        for (const auto& lab : rec.labels) {
            if (lab.c) seen[0].insert(*lab.c);
            if (lab.a) seen[1].insert(*lab.a);
            if (lab.t) seen[2].insert(*lab.t);
        }
    if (report)
        for (int lvl = 0; lvl < 3; ++lvl)
            if (seen[lvl].empty()) report->skipped_levels.push_back(lvl);

    int step = 0;
    std::vector<int> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    double first_epoch_loss = 0.0, last_epoch_loss = 0.0;

    for (int epoch = 0; epoch < tc.n_epochs; ++epoch) {
        for (size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.uniform_int(i)]);
        double epoch_loss = 0.0;
        int counted = 0;
        for (int ri : order) {
            const auto& rec = records[ri];
            if (rec.labels.empty()) continue;
            const FoldLabel lab =
                rec.labels[rng.uniform_int(static_cast<uint64_t>(rec.labels.size()))];
            if (lab.empty()) continue;

            ad::Tape tape;
            nn::Ctx ctx;
            ctx.tape = &tape;
            ctx.store = &model.params();
            ctx.train = true;
            ctx.with_grad = true;
            ctx.rng = &rng;
            const auto out = model.forward(ctx, rec.backbone);
            ad::Var loss = tape.constant(ad::Mat::Zero(1, 1));
            if (lab.c) loss = ad::add(loss, ad::cross_entropy_mean(out.c, {*lab.c}));
            if (lab.a) loss = ad::add(loss, ad::cross_entropy_mean(out.a, {*lab.a}));
            if (lab.t) loss = ad::add(loss, ad::cross_entropy_mean(out.t, {*lab.t}));
            if (!std::isfinite(loss.val()(0, 0)))
                throw std::runtime_error("train_classifier: non-finite loss");
            tape.backward(loss);
            nn::adam_step(model.params(), ctx.collect_grads(), tc.adam, ++step);
            epoch_loss += loss.val()(0, 0);
            ++counted;
        }
        if (counted > 0) epoch_loss /= counted;
        if (epoch == 0) first_epoch_loss = epoch_loss;
        last_epoch_loss = epoch_loss;
    }
    if (report) {
        report->initial_loss = first_epoch_loss;
        report->final_loss = last_epoch_loss;
    }
    return model;
}

}  // namespace chainflow
