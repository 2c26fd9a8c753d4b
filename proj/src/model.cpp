#include "chainflow/model.hpp"

#include <json.hpp>

#include <cmath>
#include <functional>
#include <numeric>
#include <stdexcept>

namespace chainflow {

namespace {

using nn::Embedding;
using nn::Linear;

struct LayerVisitor {
    std::function<void(const Linear&, bool zero_init)> lin;
    std::function<void(const Embedding&)> emb;
    std::function<void(const std::string&, int, int)> raw;
};

void visit_layers(const ModelConfig& c, const LayerVisitor& v) {
    const int cond_in = c.t_enc_dim + 3 * c.fold_emb_dim;
    const int pair_in = c.xt_bins + c.xhat_bins + c.sep_bins;

    v.lin({"in.token", 3 + c.idx_enc_dim, c.seq_dim, true}, false);
    v.lin({"in.motif", 4, c.seq_dim, false}, false);
    v.raw("in.registers", c.n_registers, c.seq_dim);
    v.emb({"fold.c", c.c_classes + 1, c.fold_emb_dim});
    v.emb({"fold.a", c.a_classes + 1, c.fold_emb_dim});
    v.emb({"fold.t", c.t_classes + 1, c.fold_emb_dim});
    v.lin({"cond.l0", cond_in, 2 * c.cond_dim, true}, false);
    v.lin({"cond.l1", c.cond_dim, 2 * c.cond_dim, true}, false);
    v.lin({"cond.l2", c.cond_dim, c.cond_dim, true}, false);
    v.lin({"pair.in", pair_in, c.pair_dim, false}, false);

    for (int i = 0; i < c.n_blocks; ++i) {
        const std::string b = "blk" + std::to_string(i) + ".";
        v.lin({b + "attn.ada_s", c.cond_dim, c.seq_dim, true}, true);
        v.lin({b + "attn.ada_b", c.cond_dim, c.seq_dim, true}, true);
        v.lin({b + "attn.q", c.seq_dim, c.seq_dim, true}, false);
        v.lin({b + "attn.k", c.seq_dim, c.seq_dim, true}, false);
        v.lin({b + "attn.v", c.seq_dim, c.seq_dim, true}, false);
        v.lin({b + "attn.pair_bias", c.pair_dim, c.n_heads, false}, false);
        v.lin({b + "attn.out", c.seq_dim, c.seq_dim, true}, false);
        v.lin({b + "attn.gate", c.cond_dim, c.seq_dim, true}, true);
        v.lin({b + "ffn.ada_s", c.cond_dim, c.seq_dim, true}, true);
        v.lin({b + "ffn.ada_b", c.cond_dim, c.seq_dim, true}, true);
        v.lin({b + "ffn.w1", c.seq_dim, 2 * c.ffn_hidden, true}, false);
        v.lin({b + "ffn.w2", c.ffn_hidden, c.seq_dim, true}, false);
        v.lin({b + "ffn.gate", c.cond_dim, c.seq_dim, true}, true);
    }

    for (int u = 0; u < c.n_pair_updates; ++u) {
        const std::string p = "pu" + std::to_string(u) + ".";
        v.lin({p + "outer_i", c.seq_dim, c.pair_dim, true}, true);
        v.lin({p + "outer_j", c.seq_dim, c.pair_dim, true}, true);
        for (const char* d : {"out", "in"}) {
            const std::string q = p + d + ".";
            v.lin({q + "ga", c.pair_dim, c.tri_hidden, true}, false);
            v.lin({q + "pa", c.pair_dim, c.tri_hidden, true}, false);
            v.lin({q + "gb", c.pair_dim, c.tri_hidden, true}, false);
            v.lin({q + "pb", c.pair_dim, c.tri_hidden, true}, false);
            v.lin({q + "g", c.pair_dim, c.pair_dim, true}, false);
            v.lin({q + "o", c.tri_hidden, c.pair_dim, true}, true);
        }
    }

    v.lin({"dec.out", c.seq_dim, 3, true}, true);
    if (c.use_distogram_head) v.lin({"disto.out", c.pair_dim, c.xt_bins, true}, false);
}

ad::Var swiglu(ad::Var x) {
    const int h = x.cols() / 2;
    return ad::mul(ad::silu(ad::slice_cols(x, 0, h)), ad::slice_cols(x, h, h));
}

ad::Var linear(nn::Ctx& ctx, const std::string& name, int in, int out, bool bias, ad::Var x) {
    return Linear{name, in, out, bias}(ctx, x);
}

}  // namespace

void ModelConfig::validate() const {
    if (seq_dim <= 0 || pair_dim <= 0 || cond_dim <= 0 || n_blocks <= 0 || n_heads <= 0 ||
        n_registers < 0 || ffn_hidden <= 0 || tri_hidden <= 0)
        throw std::invalid_argument("ModelConfig: dimensions must be positive");
    if (seq_dim % n_heads != 0)
        throw std::invalid_argument("ModelConfig: seq_dim must be divisible by n_heads");
    if (n_pair_updates > n_blocks)
        throw std::invalid_argument("ModelConfig: n_pair_updates must be <= n_blocks");
    if (t_enc_dim % 2 != 0 || idx_enc_dim % 2 != 0)
        throw std::invalid_argument("ModelConfig: encoding dims must be even");
    if (c_classes <= 0 || a_classes <= 0 || t_classes <= 0)
        throw std::invalid_argument("ModelConfig: label vocabularies must be positive");
}

size_t ModelConfig::param_count() const {
    size_t n = 0;
    LayerVisitor v;
    v.lin = [&](const Linear& l, bool) { n += l.n_params(); };
    v.emb = [&](const Embedding& e) { n += e.n_params(); };
    v.raw = [&](const std::string&, int r, int c) { n += static_cast<size_t>(r) * c; };
    visit_layers(*this, v);
    return n;
}

std::string ModelConfig::to_json() const {
    nlohmann::json j;
    j["seq_dim"] = seq_dim;
    j["pair_dim"] = pair_dim;
    j["cond_dim"] = cond_dim;
    j["n_heads"] = n_heads;
    j["n_blocks"] = n_blocks;
    j["n_registers"] = n_registers;
    j["n_pair_updates"] = n_pair_updates;
    j["t_enc_dim"] = t_enc_dim;
    j["idx_enc_dim"] = idx_enc_dim;
    j["fold_emb_dim"] = fold_emb_dim;
    j["ffn_hidden"] = ffn_hidden;
    j["tri_hidden"] = tri_hidden;
    j["use_distogram_head"] = use_distogram_head;
    j["xt_bins"] = xt_bins;
    j["xhat_bins"] = xhat_bins;
    j["sep_bins"] = sep_bins;
    j["c_classes"] = c_classes;
    j["a_classes"] = a_classes;
    j["t_classes"] = t_classes;
    return j.dump(2);
}

ModelConfig ModelConfig::from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    ModelConfig c;
    c.seq_dim = j.at("seq_dim");
    c.pair_dim = j.at("pair_dim");
    c.cond_dim = j.at("cond_dim");
    c.n_heads = j.at("n_heads");
    c.n_blocks = j.at("n_blocks");
    c.n_registers = j.at("n_registers");
    c.n_pair_updates = j.at("n_pair_updates");
    c.t_enc_dim = j.at("t_enc_dim");
    c.idx_enc_dim = j.at("idx_enc_dim");
    c.fold_emb_dim = j.at("fold_emb_dim");
    c.ffn_hidden = j.at("ffn_hidden");
    c.tri_hidden = j.at("tri_hidden");
    c.use_distogram_head = j.at("use_distogram_head");
    c.xt_bins = j.at("xt_bins");
    c.xhat_bins = j.at("xhat_bins");
    c.sep_bins = j.at("sep_bins");
    c.c_classes = j.at("c_classes");
    c.a_classes = j.at("a_classes");
    c.t_classes = j.at("t_classes");
    c.validate();
    return c;
}

int separation_bin(int offset) {
    if (offset < -63) offset = -63;
    if (offset > 63) offset = 63;
    return offset + 63;
}

Eigen::MatrixXd pair_onehot_features(const Coords& x_t, const Coords* x_hat,
                                     const std::vector<int>& residue_indices,
                                     const ModelConfig& cfg) {
    const int L = static_cast<int>(x_t.rows());
    if (static_cast<int>(residue_indices.size()) != L)
        throw std::invalid_argument("pair_onehot_features: index count mismatch");
    if (x_hat && x_hat->rows() != L)
        throw std::invalid_argument("pair_onehot_features: x_hat length mismatch");
    const int cols = cfg.xt_bins + cfg.xhat_bins + cfg.sep_bins;
    Eigen::MatrixXd f = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(L) * L, cols);
    for (int i = 0; i < L; ++i) {
        for (int j = 0; j < L; ++j) {
            const Eigen::Index r = static_cast<Eigen::Index>(i) * L + j;
            const double d = (x_t.row(i) - x_t.row(j)).norm();
            f(r, distance_bin(d, cfg.xt_bins, 1.0, 30.0)) = 1.0;
            if (x_hat) {
                const double dh = (x_hat->row(i) - x_hat->row(j)).norm();
                f(r, cfg.xt_bins + distance_bin(dh, cfg.xhat_bins, 1.0, 30.0)) = 1.0;
            }
            f(r, cfg.xt_bins + cfg.xhat_bins +
                     separation_bin(residue_indices[j] - residue_indices[i])) = 1.0;
        }
    }
    return f;
}

Denoiser::Denoiser(ModelConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init_params(seed);
}

Denoiser::Denoiser(ModelConfig cfg, nn::ParamStore store)
    : cfg_(std::move(cfg)), store_(std::move(store)) {
    cfg_.validate();
}

void Denoiser::init_params(uint64_t seed) {
    Rng rng(seed);
    LayerVisitor v;
    v.lin = [&](const Linear& l, bool zero) {
        if (zero)
            l.init_zero(store_);
        else
            l.init(store_, rng);
    };
    v.emb = [&](const Embedding& e) { e.init(store_, rng); };
    v.raw = [&](const std::string& name, int r, int c) { store_.add(name, r, c, 0.02, rng); };
    visit_layers(cfg_, v);
}

std::array<int, 3> Denoiser::label_ids(const FoldLabel& label) const {
    auto pick = [](const std::optional<int>& v, int classes, const char* level) {
        if (!v) return classes;  // null id
        if (*v < 0 || *v >= classes)
            throw std::out_of_range(std::string("fold label out of vocabulary at level ") + level);
        return *v;
    };
    return {pick(label.c, cfg_.c_classes, "C"), pick(label.a, cfg_.a_classes, "A"),
            pick(label.t, cfg_.t_classes, "T")};
}

Eigen::RowVectorXd Denoiser::embed_fold_labels(const FoldLabel& label) const {
    const auto ids = label_ids(label);
    Eigen::RowVectorXd out(3 * cfg_.fold_emb_dim);
    const char* tables[3] = {"fold.c.e", "fold.a.e", "fold.t.e"};
    for (int k = 0; k < 3; ++k)
        out.segment(k * cfg_.fold_emb_dim, cfg_.fold_emb_dim) =
            store_.at(tables[k]).value.row(ids[k]);
    return out;
}

BuiltInputs Denoiser::build_inputs(nn::Ctx& ctx, const Coords& x_t, const Coords* x_hat,
                                   const std::vector<int>* residue_indices,
                                   const FoldLabel& label, double t, const Motif* motif) const {
    const int L = static_cast<int>(x_t.rows());
    std::vector<int> idx(L);
    if (residue_indices) {
        if (static_cast<int>(residue_indices->size()) != L)
            throw std::invalid_argument("build_inputs: residue index count mismatch");
        idx = *residue_indices;
    } else {
        std::iota(idx.begin(), idx.end(), 0);
    }

    Eigen::MatrixXd feat(L, 3 + cfg_.idx_enc_dim);
    for (int i = 0; i < L; ++i) {
        feat.block(i, 0, 1, 3) = x_t.row(i);
        feat.block(i, 3, 1, cfg_.idx_enc_dim) =
            nn::sinusoidal_encoding(static_cast<double>(idx[i]), cfg_.idx_enc_dim);
    }
    ad::Var tokens = linear(ctx, "in.token", 3 + cfg_.idx_enc_dim, cfg_.seq_dim, true,
                            ctx.constant(std::move(feat)));
    if (motif) {
        if (static_cast<int>(motif->mask.size()) != L || motif->coords.rows() != L)
            throw std::invalid_argument("build_inputs: motif shape mismatch");
        Eigen::MatrixXd mf = Eigen::MatrixXd::Zero(L, 4);
        for (int i = 0; i < L; ++i) {
            if (!motif->mask[i]) continue;
            mf.block(i, 0, 1, 3) = motif->coords.row(i);
            mf(i, 3) = 1.0;
        }
        tokens = ad::add(tokens, linear(ctx, "in.motif", 4, cfg_.seq_dim, false,
                                        ctx.constant(std::move(mf))));
    }
    tokens = ad::concat_rows(ctx.param("in.registers"), tokens);

    const auto ids = label_ids(label);
    ad::Var t_enc = ctx.constant(nn::sinusoidal_encoding(t * 1000.0, cfg_.t_enc_dim));
    const int fe = cfg_.fold_emb_dim;
    ad::Var c_emb = Embedding{"fold.c", cfg_.c_classes + 1, fe}(ctx, {ids[0]});
    ad::Var a_emb = Embedding{"fold.a", cfg_.a_classes + 1, fe}(ctx, {ids[1]});
    ad::Var t_emb = Embedding{"fold.t", cfg_.t_classes + 1, fe}(ctx, {ids[2]});
    ad::Var raw = ad::concat_cols(ad::concat_cols(t_enc, c_emb, a_emb), t_emb);

    const int cond_in = cfg_.t_enc_dim + 3 * fe;
    ad::Var cvec = linear(ctx, "cond.l0", cond_in, 2 * cfg_.cond_dim, true, raw);
    cvec = swiglu(cvec);
    cvec = swiglu(linear(ctx, "cond.l1", cfg_.cond_dim, 2 * cfg_.cond_dim, true, cvec));
    cvec = linear(ctx, "cond.l2", cfg_.cond_dim, cfg_.cond_dim, true, cvec);
    ad::Var cond_res = ad::matmul(ctx.constant(Eigen::MatrixXd::Ones(L, 1)), cvec);
    ad::Var cond = ad::concat_rows(
        ctx.constant(Eigen::MatrixXd::Zero(cfg_.n_registers, cfg_.cond_dim)), cond_res);

    const int pair_in = cfg_.xt_bins + cfg_.xhat_bins + cfg_.sep_bins;
    ad::Var pair = linear(ctx, "pair.in", pair_in, cfg_.pair_dim, false,
                          ctx.constant(pair_onehot_features(x_t, x_hat, idx, cfg_)));
    return BuiltInputs{tokens, cond, pair};
}

ad::Var Denoiser::attention_block(nn::Ctx& ctx, ad::Var tokens, ad::Var cond, ad::Var pair,
                                  int block, int L) const {
    const std::string b = "blk" + std::to_string(block) + ".";
    const int S = cfg_.seq_dim, C = cfg_.cond_dim, R = cfg_.n_registers;
    const int T = R + L;
    const int dh = S / cfg_.n_heads;

    auto adaln = [&](ad::Var x, const std::string& prefix) {
        ad::Var scale = linear(ctx, prefix + "ada_s", C, S, true, cond);
        ad::Var shift = linear(ctx, prefix + "ada_b", C, S, true, cond);
        return ad::add(ad::mul(ad::layer_norm_rows(x), ad::cadd(scale, 1.0)), shift);
    };

    ad::Var h = adaln(tokens, b + "attn.");
    ad::Var qf = ad::layer_norm_rows(linear(ctx, b + "attn.q", S, S, true, h));
    ad::Var kf = ad::layer_norm_rows(linear(ctx, b + "attn.k", S, S, true, h));
    ad::Var vf = linear(ctx, b + "attn.v", S, S, true, h);
    ad::Var bias = linear(ctx, b + "attn.pair_bias", cfg_.pair_dim, cfg_.n_heads, false, pair);

    ad::Var heads_out;
    for (int hi = 0; hi < cfg_.n_heads; ++hi) {
        ad::Var qh = ad::slice_cols(qf, hi * dh, dh);
        ad::Var kh = ad::slice_cols(kf, hi * dh, dh);
        ad::Var vh = ad::slice_cols(vf, hi * dh, dh);
        ad::Var logits = ad::cmul(ad::matmul(qh, ad::transpose(kh)), 1.0 / std::sqrt(dh));
        logits = ad::add(logits, ad::pad(ad::col_to_square(bias, hi, L), T, T, R, R));
        ad::Var oh = ad::matmul(ad::softmax_rows(logits), vh);
        heads_out = (hi == 0) ? oh : ad::concat_cols(heads_out, oh);
    }
    ad::Var attn = linear(ctx, b + "attn.out", S, S, true, heads_out);
    ad::Var gate1 = linear(ctx, b + "attn.gate", C, S, true, cond);
    tokens = ad::add(tokens, ad::mul(gate1, attn));

    ad::Var h2 = adaln(tokens, b + "ffn.");
    ad::Var ff = swiglu(linear(ctx, b + "ffn.w1", S, 2 * cfg_.ffn_hidden, true, h2));
    ff = linear(ctx, b + "ffn.w2", cfg_.ffn_hidden, S, true, ff);
    ad::Var gate2 = linear(ctx, b + "ffn.gate", C, S, true, cond);
    return ad::add(tokens, ad::mul(gate2, ff));
}

ad::Var Denoiser::pair_update(nn::Ctx& ctx, ad::Var tokens, ad::Var pair, int update,
                              int L) const {
    const std::string p = "pu" + std::to_string(update) + ".";
    const int S = cfg_.seq_dim, P = cfg_.pair_dim, H = cfg_.tri_hidden;
    ad::Var resid = ad::slice_rows(tokens, cfg_.n_registers, L);

    Eigen::MatrixXd pi = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(L) * L, L);
    Eigen::MatrixXd pj = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(L) * L, L);
    for (int i = 0; i < L; ++i)
        for (int j = 0; j < L; ++j) {
            pi(static_cast<Eigen::Index>(i) * L + j, i) = 1.0;
            pj(static_cast<Eigen::Index>(i) * L + j, j) = 1.0;
        }
    ad::Var oi = linear(ctx, p + "outer_i", S, P, true, resid);
    ad::Var oj = linear(ctx, p + "outer_j", S, P, true, resid);
    pair = ad::add(pair, ad::add(ad::matmul(ctx.constant(std::move(pi)), oi),
                                 ad::matmul(ctx.constant(std::move(pj)), oj)));

    for (const char* d : {"out", "in"}) {
        const std::string q = p + d + ".";
        const bool incoming = (std::string(d) == "in");
        ad::Var z = ad::layer_norm_rows(pair);
        ad::Var a = ad::mul(ad::sigmoid(linear(ctx, q + "ga", P, H, true, z)),
                            linear(ctx, q + "pa", P, H, true, z));
        ad::Var bb = ad::mul(ad::sigmoid(linear(ctx, q + "gb", P, H, true, z)),
                             linear(ctx, q + "pb", P, H, true, z));
        ad::Var comb = ad::layer_norm_rows(ad::tri_combine(a, bb, L, incoming));
        ad::Var upd = ad::mul(ad::sigmoid(linear(ctx, q + "g", P, P, true, z)),
                              linear(ctx, q + "o", H, P, true, comb));
        pair = ad::add(pair, upd);
    }
    return pair;
}

ModelOutput Denoiser::forward(nn::Ctx& ctx, const Coords& x_t, double t, const Coords* x_hat,
                              const FoldLabel& label) {
    return forward_full(ctx, x_t, t, x_hat, label, nullptr, nullptr);
}

ModelOutput Denoiser::forward_full(nn::Ctx& ctx, const Coords& x_t, double t,
                                   const Coords* x_hat, const FoldLabel& label,
                                   const std::vector<int>* residue_indices, const Motif* motif) {
    const int L = static_cast<int>(x_t.rows());
    if (nn::lora_applied(store_)) {
        ctx.lora_active = true;
        ctx.lora_scale_over_rank = lora_spec_.scale / lora_spec_.rank;
    }
    BuiltInputs in = build_inputs(ctx, x_t, x_hat, residue_indices, label, t, motif);
    ad::Var tokens = in.tokens;
    ad::Var pair = in.pair;
    for (int b = 0; b < cfg_.n_blocks; ++b) {
        tokens = attention_block(ctx, tokens, in.cond, pair, b, L);
        if (b < cfg_.n_pair_updates) pair = pair_update(ctx, tokens, pair, b, L);
    }
    ad::Var resid = ad::layer_norm_rows(ad::slice_rows(tokens, cfg_.n_registers, L));
    ad::Var vel = linear(ctx, "dec.out", cfg_.seq_dim, 3, true, resid);
    if (!vel.val().allFinite()) throw std::runtime_error("denoiser forward: non-finite velocity");

    ModelOutput out{vel, std::nullopt};
    if (cfg_.use_distogram_head) {
        ad::Var logits = linear(ctx, "disto.out", cfg_.pair_dim, cfg_.xt_bins, true,
                                ad::layer_norm_rows(pair));
        out.distogram_logits = ad::sym_pair(logits, L);
    }
    return out;
}

std::vector<std::string> Denoiser::lora_target_names() const {
    std::vector<std::string> names;
    LayerVisitor v;
    v.lin = [&](const Linear& l, bool) { names.push_back(l.name + ".w"); };
    v.emb = [&](const Embedding& e) { names.push_back(e.name + ".e"); };
    v.raw = [](const std::string&, int, int) {};
    visit_layers(cfg_, v);
    return names;
}

void Denoiser::attach_lora(const nn::LoraSpec& spec, Rng& rng) {
    nn::apply_lora(store_, lora_target_names(), spec, rng);
    lora_spec_ = spec;
}

void Denoiser::merge_adapters(const nn::LoraSpec& spec) { nn::merge_lora(store_, spec); }

}  // namespace chainflow
