#include "chainflow/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace chainflow {

namespace {

constexpr double kCovEps = 1e-6;

double kl_nat(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
    double acc = 0.0;
    for (int i = 0; i < p.size(); ++i) {
        if (p(i) <= 0.0) continue;
        acc += p(i) * std::log(p(i) / std::max(q(i), 1e-300));
    }
    return acc;
}

double kl_bits(const Eigen::VectorXd& p, const Eigen::VectorXd& q) {
    return kl_nat(p, q) / std::log(2.0);
}

double centered_rmsd(const Coords& a, const Coords& b) {
    const Coords ac = (a.rowwise() - a.colwise().mean()).eval();
    const Coords bc = (b.rowwise() - b.colwise().mean()).eval();
    return std::sqrt((ac - bc).squaredNorm() / static_cast<double>(a.rows()));
}

struct UnionFind {
    std::vector<int> parent;
    explicit UnionFind(int n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
    int find(int x) { return parent[x] == x ? x : parent[x] = find(parent[x]); }
    void unite(int a, int b) { parent[find(a)] = find(b); }
};

}  // namespace

FeatureSetStats feature_stats(const std::vector<Eigen::VectorXd>& features) {
    if (features.empty()) throw std::invalid_argument("feature_stats: empty set");
    const int d = static_cast<int>(features.front().size());
    Eigen::VectorXd mu = Eigen::VectorXd::Zero(d);
    for (const auto& f : features) {
        if (f.size() != d) throw std::invalid_argument("feature_stats: dimension mismatch");
        mu += f;
    }
    mu /= static_cast<double>(features.size());
    Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(d, d);
    for (const auto& f : features) {
        const Eigen::VectorXd c = f - mu;
        cov += c * c.transpose();
    }
    cov /= std::max<double>(1.0, static_cast<double>(features.size()) - 1.0);
    return FeatureSetStats{std::move(mu), std::move(cov)};
}

double fpsd(const FeatureSetStats& gen, const FeatureSetStats& ref) {
    if (gen.mean.size() != ref.mean.size())
        throw std::invalid_argument("fpsd: feature dimension mismatch");
    const int d = static_cast<int>(gen.mean.size());
    const Eigen::MatrixXd a =
        gen.cov + kCovEps * Eigen::MatrixXd::Identity(d, d);
    const Eigen::MatrixXd b =
        ref.cov + kCovEps * Eigen::MatrixXd::Identity(d, d);
    const Eigen::MatrixXd prod = a * b;
    const Eigen::MatrixXd sym = 0.5 * (prod + prod.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(sym);
    double tr_sqrt = 0.0;
    for (int i = 0; i < d; ++i) tr_sqrt += std::sqrt(std::max(0.0, eig.eigenvalues()(i)));
    const double mean_term = (gen.mean - ref.mean).squaredNorm();
    return mean_term + a.trace() + b.trace() - 2.0 * tr_sqrt;
}

double fold_score(const std::vector<Eigen::VectorXd>& predictions) {
    if (predictions.size() < 2) throw std::invalid_argument("fold_score: need >= 2 samples");
    const int k = static_cast<int>(predictions.front().size());
    Eigen::VectorXd marginal = Eigen::VectorXd::Zero(k);
    for (const auto& p : predictions) marginal += p;
    marginal /= static_cast<double>(predictions.size());
    double mean_kl = 0.0;
    for (const auto& p : predictions) mean_kl += kl_nat(p, marginal);
    mean_kl /= static_cast<double>(predictions.size());
    return std::exp(mean_kl);
}

double fjsd(const std::vector<Eigen::VectorXd>& preds_gen,
            const std::vector<Eigen::VectorXd>& preds_ref) {
    if (preds_gen.empty() || preds_ref.empty()) throw std::invalid_argument("fjsd: empty set");
    if (preds_gen.front().size() != preds_ref.front().size())
        throw std::invalid_argument("fjsd: vocabulary mismatch");
    auto marginal = [](const std::vector<Eigen::VectorXd>& ps) {
        Eigen::VectorXd m = Eigen::VectorXd::Zero(ps.front().size());
        for (const auto& p : ps) m += p;
        return Eigen::VectorXd(m / static_cast<double>(ps.size()));
    };
    const Eigen::VectorXd p = marginal(preds_gen);
    const Eigen::VectorXd q = marginal(preds_ref);
    const Eigen::VectorXd m = 0.5 * (p + q);
    return 10.0 * (0.5 * kl_bits(p, m) + 0.5 * kl_bits(q, m));
}

ReclassResult reclassification_probability(const std::vector<Backbone>& samples,
                                           const std::vector<FoldLabel>& targets,
                                           const FoldClassifier& classifier, int level) {
    if (samples.size() != targets.size())
        throw std::invalid_argument("reclassification: sample/label count mismatch");
    if (level < 0 || level > 2) throw std::invalid_argument("reclassification: bad level");
    ReclassResult res;
    double acc = 0.0;
    for (size_t i = 0; i < samples.size(); ++i) {
        const auto& lab = targets[i];
        const std::optional<int> id = level == 0 ? lab.c : (level == 1 ? lab.a : lab.t);
        if (!id) {
            ++res.skipped;
            continue;
        }
        const Classification c = classifier.classify(samples[i]);
        const Eigen::VectorXd& probs =
            level == 0 ? c.probs_c : (level == 1 ? c.probs_a : c.probs_t);
        if (*id < 0 || *id >= probs.size())
            throw std::out_of_range("reclassification: label outside classifier vocabulary");
        acc += probs(*id);
        ++res.used;
    }
    if (res.used > 0) res.mean_prob = acc / res.used;
    return res;
}

SecondaryStructure secondary_structure(const Backbone& b) {
    const int L = b.length();
    if (L < 5) throw std::invalid_argument("secondary_structure: need L >= 5");
    const Coords& x = b.coords;
    const double deg = M_PI / 180.0;

    auto dist = [&](int i, int j) { return (x.row(i) - x.row(j)).norm(); };
    std::vector<bool> helix_cond(L, false), strand_cond(L, false);
    for (int i = 0; i < L; ++i) {
        const bool has3 = i + 3 < L, has4 = i + 4 < L, has2 = i + 2 < L;
        // helix: d3 = 5.3+-0.5, d4 = 6.4+-0.6 or tau = 89+-12 deg, alpha = 50+-20 deg
        bool h_dist = has3 && has4 && std::abs(dist(i, i + 3) - 5.3) <= 0.5 &&
                      std::abs(dist(i, i + 4) - 6.4) <= 0.6;
        bool h_ang = false;
        if (has3) {
            const double tau = bond_angle(x.row(i), x.row(i + 1), x.row(i + 2));
            const double alpha = signed_dihedral(x.row(i), x.row(i + 1), x.row(i + 2), x.row(i + 3));
            h_ang = std::abs(tau - 89.0 * deg) <= 12.0 * deg &&
                    std::abs(alpha - 50.0 * deg) <= 20.0 * deg;
        }
        helix_cond[i] = h_dist || h_ang;
        // strand: d2 = 6.7+-0.6, d3 = 9.9+-0.9, d4 = 12.4+-1.1
        //         or tau = 124+-14 deg, |alpha| in [125, 180] deg
        bool s_dist = has2 && has3 && has4 && std::abs(dist(i, i + 2) - 6.7) <= 0.6 &&
                      std::abs(dist(i, i + 3) - 9.9) <= 0.9 &&
                      std::abs(dist(i, i + 4) - 12.4) <= 1.1;
        bool s_ang = false;
        if (has3) {
            const double tau = bond_angle(x.row(i), x.row(i + 1), x.row(i + 2));
            const double alpha = signed_dihedral(x.row(i), x.row(i + 1), x.row(i + 2), x.row(i + 3));
            s_ang = std::abs(tau - 124.0 * deg) <= 14.0 * deg &&
                    std::abs(alpha) >= 125.0 * deg;
        }
        strand_cond[i] = s_dist || s_ang;
    }

    SecondaryStructure ss;
    ss.classes.assign(L, SSClass::coil);
    auto mark_runs = [&](const std::vector<bool>& cond, int min_run, SSClass cls) {
        int i = 0;
        while (i < L) {
            if (!cond[i]) {
                ++i;
                continue;
            }
            int j = i;
            while (j + 1 < L && cond[j + 1]) ++j;
            if (j - i + 1 >= min_run) {
                const int hi = std::min(L - 1, j + 2);  // include window tail
                for (int k = i; k <= hi; ++k)
                    if (ss.classes[k] == SSClass::coil) ss.classes[k] = cls;
            }
            i = j + 1;
        }
    };
    mark_runs(helix_cond, 5, SSClass::helix);
    mark_runs(strand_cond, 3, SSClass::strand);

    int nh = 0, ns = 0;
    for (const SSClass c : ss.classes) {
        if (c == SSClass::helix) ++nh;
        if (c == SSClass::strand) ++ns;
    }
    ss.helix_frac = static_cast<double>(nh) / L;
    ss.strand_frac = static_cast<double>(ns) / L;
    ss.coil_frac = 1.0 - ss.helix_frac - ss.strand_frac;
    return ss;
}

DiversityResult cluster_diversity(const std::vector<Backbone>& set, double threshold) {
    if (set.empty()) throw std::invalid_argument("cluster_diversity: empty set");
    const int n = static_cast<int>(set.size());
    for (const auto& b : set)
        if (b.length() != set.front().length())
            throw std::invalid_argument("cluster_diversity: lengths must match");
    UnionFind uf(n);
    for (int i = 0; i < n; ++i)
        for (int j = i + 1; j < n; ++j)
            if (tm_proxy(set[i], set[j]) >= threshold) uf.unite(i, j);
    std::vector<bool> root_seen(n, false);
    int clusters = 0;
    for (int i = 0; i < n; ++i) {
        const int r = uf.find(i);
        if (!root_seen[r]) {
            root_seen[r] = true;
            ++clusters;
        }
    }
    return DiversityResult{static_cast<double>(clusters) / n, clusters};
}

NoveltyResult novelty(const std::vector<Backbone>& samples,
                      const std::vector<Backbone>& reference) {
    std::map<int, std::vector<const Backbone*>> buckets;
    for (const auto& r : reference) buckets[r.length()].push_back(&r);
    NoveltyResult res;
    double acc = 0.0;
    for (const auto& s : samples) {
        const auto it = buckets.find(s.length());
        if (it == buckets.end()) {
            ++res.skipped;
            continue;
        }
        double best = 0.0;
        for (const Backbone* r : it->second) best = std::max(best, tm_proxy(s, *r));
        acc += best;
        ++res.used;
    }
    if (res.used > 0) res.mean_max_tm = acc / res.used;
    return res;
}

std::string EquivarianceReport::to_csv() const {
    std::ostringstream out;
    out << "t,E,E_rot,E_opt\n";
    for (size_t i = 0; i < t.size(); ++i)
        out << t[i] << "," << e[i] << "," << e_rot[i] << "," << e_opt[i] << "\n";
    return out.str();
}

EquivarianceReport equivariance_analysis(FlowModel& model,
                                         const std::vector<StructureRecord>& data,
                                         const std::vector<double>& t_grid, int n_mc, Rng& rng) {
    if (data.empty()) throw std::invalid_argument("equivariance_analysis: empty dataset");
    auto velocity = [&](const Coords& x, double t) {
        ad::Tape tape;
        nn::Ctx ctx;
        ctx.tape = &tape;
        ctx.store = &model.params();
        ctx.with_grad = false;
        return Coords(model.forward(ctx, x, t, nullptr, FoldLabel{}).velocity.val());
    };

    EquivarianceReport rep;
    for (const double t : t_grid) {
        double e_acc = 0.0, er_acc = 0.0, eu_acc = 0.0;
        for (int mc = 0; mc < n_mc; ++mc) {
            const auto& rec = data[rng.uniform_int(static_cast<uint64_t>(data.size()))];
            const Coords x1 = center_backbone(rec.backbone).coords;
            NoisySample ns = make_noisy_sample(x1, t, rng);
            const Coords xhat = clean_prediction(ns.x_t, t, velocity(ns.x_t, t));
            const Eigen::Matrix3d r = random_rotation(rng).matrix;
            const Coords x_t_rot = ns.x_t * r;  // R^T applied to rows
            const Coords xhat_rot = clean_prediction(x_t_rot, t, velocity(x_t_rot, t));
            const Coords xhat_back = xhat_rot * r.transpose();

            e_acc += centered_rmsd(xhat, xhat_rot);
            er_acc += centered_rmsd(xhat, xhat_back);
            eu_acc += kabsch_align(Backbone{xhat}, Backbone{xhat_back}).rmsd;
        }
        rep.t.push_back(t);
        rep.e.push_back(e_acc / n_mc);
        rep.e_rot.push_back(er_acc / n_mc);
        rep.e_opt.push_back(eu_acc / n_mc);
    }
    return rep;
}

std::string StructureSetReport::to_json() const {
    nlohmann::json j;
    j["n_samples"] = n_samples;
    j["fpsd"] = fpsd_value;
    j["fs"] = {{"c", fs_c}, {"a", fs_a}, {"t", fs_t}};
    j["fjsd"] = {{"c", fjsd_c}, {"a", fjsd_a}, {"t", fjsd_t}, {"avg", fjsd_avg}};
    j["diversity"] = {{"ratio", diversity_ratio}, {"clusters", diversity_clusters}};
    j["novelty"] = novelty_mean;
    j["secondary_structure"] = {
        {"helix", helix_frac}, {"strand", strand_frac}, {"coil", coil_frac}};
    if (!external_scrmsd.empty()) j["external_scrmsd"] = external_scrmsd;
    return j.dump(2);
}

std::string StructureSetReport::to_csv() const {
    std::ostringstream out;
    out << "metric,value\n";
    out << "n_samples," << n_samples << "\n";
    out << "fpsd," << fpsd_value << "\n";
    out << "fs_c," << fs_c << "\nfs_a," << fs_a << "\nfs_t," << fs_t << "\n";
    out << "fjsd_c," << fjsd_c << "\nfjsd_a," << fjsd_a << "\nfjsd_t," << fjsd_t << "\n";
    out << "fjsd_avg," << fjsd_avg << "\n";
    out << "diversity_ratio," << diversity_ratio << "\n";
    out << "diversity_clusters," << diversity_clusters << "\n";
    out << "novelty," << novelty_mean << "\n";
    out << "helix_frac," << helix_frac << "\nstrand_frac," << strand_frac << "\ncoil_frac,"
        << coil_frac << "\n";
    return out.str();
}

StructureSetReport evaluate_structure_set(const std::vector<Backbone>& samples,
                                          const std::vector<StructureRecord>& reference,
                                          const FoldClassifier& classifier) {
    if (samples.empty() || reference.empty())
        throw std::invalid_argument("evaluate_structure_set: empty input");
    StructureSetReport rep;
    rep.n_samples = static_cast<int>(samples.size());

    std::vector<Eigen::VectorXd> phi_g, phi_r;
    std::vector<Eigen::VectorXd> pc_g, pa_g, pt_g, pc_r, pa_r, pt_r;
    for (const auto& s : samples) {
        const Classification c = classifier.classify(s);
        phi_g.push_back(c.phi);
        pc_g.push_back(c.probs_c);
        pa_g.push_back(c.probs_a);
        pt_g.push_back(c.probs_t);
        const SecondaryStructure ss = secondary_structure(s);
        rep.helix_frac += ss.helix_frac;
        rep.strand_frac += ss.strand_frac;
        rep.coil_frac += ss.coil_frac;
    }
    rep.helix_frac /= rep.n_samples;
    rep.strand_frac /= rep.n_samples;
    rep.coil_frac /= rep.n_samples;

    std::vector<Backbone> ref_backbones;
    for (const auto& r : reference) {
        const Classification c = classifier.classify(r.backbone);
        phi_r.push_back(c.phi);
        pc_r.push_back(c.probs_c);
        pa_r.push_back(c.probs_a);
        pt_r.push_back(c.probs_t);
        ref_backbones.push_back(r.backbone);
    }

    rep.fpsd_value = fpsd(feature_stats(phi_g), feature_stats(phi_r));
    rep.fs_c = fold_score(pc_g);
    rep.fs_a = fold_score(pa_g);
    rep.fs_t = fold_score(pt_g);
    rep.fjsd_c = fjsd(pc_g, pc_r);
    rep.fjsd_a = fjsd(pa_g, pa_r);
    rep.fjsd_t = fjsd(pt_g, pt_r);
    rep.fjsd_avg = (rep.fjsd_c + rep.fjsd_a + rep.fjsd_t) / 3.0;

    // diversity per length bucket, aggregated
    std::map<int, std::vector<Backbone>> buckets;
    for (const auto& s : samples) buckets[s.length()].push_back(s);
    int clusters = 0;
    for (const auto& [len, group] : buckets)
        clusters += cluster_diversity(group).n_clusters;
    rep.diversity_clusters = clusters;
    rep.diversity_ratio = static_cast<double>(clusters) / rep.n_samples;

    const NoveltyResult nov = novelty(samples, ref_backbones);
    rep.novelty_mean = nov.mean_max_tm;
    return rep;
}

}  // namespace chainflow
