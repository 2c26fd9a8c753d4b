#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "chainflow/classifier.hpp"
#include "chainflow/data.hpp"
#include "chainflow/flow.hpp"
#include "chainflow/metrics.hpp"
#include "chainflow/model.hpp"
#include "chainflow/sampler.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace chainflow;

namespace {

// Exit codes: 2 bad usage, 3 missing artifact, 4 invalid config, 5 runtime failure.
struct MissingArtifact : std::runtime_error {
    using std::runtime_error::runtime_error;
};

void require_exists(const fs::path& p, const std::string& what) {
    if (!fs::exists(p)) throw MissingArtifact(what + " not found: " + p.string());
}

void write_text(const fs::path& p, const std::string& text) {
    fs::create_directories(p.parent_path());
    std::ofstream out(p);
    if (!out) throw std::runtime_error("cannot write " + p.string());
    out << text;
}

void write_run_config(const std::string& dir, json config, uint64_t seed) {
    config["seed"] = seed;
    fs::create_directories(dir);
    write_text(fs::path(dir) / "run_config.json", config.dump(2) + "\n");
}

FoldLabel parse_label(const std::string& text) {
    FoldLabel label;
    if (text.empty()) return label;
    std::array<std::optional<int>*, 3> slots{&label.c, &label.a, &label.t};
    size_t start = 0, slot = 0;
    while (start <= text.size() && slot < 3) {
        const size_t dot = text.find('.', start);
        const std::string part =
            text.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        *slots[slot++] = std::stoi(part);
        if (dot == std::string::npos) break;
        start = dot + 1;
    }
    if (!label.hierarchy_consistent()) throw std::invalid_argument("bad label: " + text);
    return label;
}

GKind parse_gkind(const std::string& name) {
    if (name == "main") return GKind::main;
    if (name == "one-minus-t") return GKind::one_minus_t;
    if (name == "tan") return GKind::tan;
    if (name == "zero") return GKind::zero;
    throw std::invalid_argument("unknown g schedule: " + name);
}

json classifier_config_to_json(const ClassifierConfig& cfg) {
    return json{{"node_dim", cfg.node_dim},           {"phi_dim", cfg.phi_dim},
                {"n_layers", cfg.n_layers},           {"n_rbf", cfg.n_rbf},
                {"rbf_max", cfg.rbf_max},             {"spatial_cutoff", cfg.spatial_cutoff},
                {"leaky_slope", cfg.leaky_slope},     {"dropout_p", cfg.dropout_p},
                {"idx_enc_dim", cfg.idx_enc_dim},     {"c_classes", cfg.c_classes},
                {"a_classes", cfg.a_classes},         {"t_classes", cfg.t_classes}};
}

ClassifierConfig classifier_config_from_json(const std::string& text) {
    const json j = json::parse(text);
    ClassifierConfig cfg;
    cfg.node_dim = j.at("node_dim");
    cfg.phi_dim = j.at("phi_dim");
    cfg.n_layers = j.at("n_layers");
    cfg.n_rbf = j.at("n_rbf");
    cfg.rbf_max = j.at("rbf_max");
    cfg.spatial_cutoff = j.at("spatial_cutoff");
    cfg.leaky_slope = j.at("leaky_slope");
    cfg.dropout_p = j.at("dropout_p");
    cfg.idx_enc_dim = j.at("idx_enc_dim");
    cfg.c_classes = j.at("c_classes");
    cfg.a_classes = j.at("a_classes");
    cfg.t_classes = j.at("t_classes");
    return cfg;
}

Denoiser load_denoiser(const std::string& dir) {
    require_exists(fs::path(dir) / "manifest.json", "checkpoint");
    nn::ParamStore store;
    nn::CheckpointMeta meta;
    const std::string config = nn::load_checkpoint(dir, store, meta);
    return Denoiser(ModelConfig::from_json(config), std::move(store));
}

FoldClassifier load_classifier(const std::string& dir) {
    require_exists(fs::path(dir) / "manifest.json", "classifier checkpoint");
    nn::ParamStore store;
    nn::CheckpointMeta meta;
    const std::string config = nn::load_checkpoint(dir, store, meta);
    return FoldClassifier(classifier_config_from_json(config), std::move(store));
}

Dataset load_dataset_checked(const std::string& dir) {
    require_exists(fs::path(dir) / "manifest.json", "dataset");
    return load_dataset(dir);
}

// Equal-length batches drawn from cluster-balanced epochs.
struct BatchStream {
    const Dataset& ds;
    int batch_size;
    Rng& rng;
    std::vector<int> epoch;
    size_t cursor = 0;
    std::map<int, std::vector<int>> pending;  // length -> record indices

    std::vector<StructureRecord> next() {
        while (true) {
            for (auto& [len, ids] : pending) {
                if (static_cast<int>(ids.size()) >= batch_size) {
                    std::vector<StructureRecord> batch;
                    for (int k = 0; k < batch_size; ++k) {
                        batch.push_back(ds.records[ids.back()]);
                        ids.pop_back();
                    }
                    return batch;
                }
            }
            if (cursor >= epoch.size()) {
                epoch = cluster_epoch(ds.manifest, rng);
                cursor = 0;
            }
            const int idx = epoch[cursor++];
            pending[ds.records[idx].backbone.length()].push_back(idx);
        }
    }
};

struct TrainedLog {
    std::string csv = "step,loss,cfm,distogram\n";
    void log(int step, const StepStats& st) {
        csv += std::to_string(step) + "," + std::to_string(st.loss) + "," +
               std::to_string(st.cfm) + "," + std::to_string(st.distogram) + "\n";
    }
};

int run_toydata(int n, std::optional<int> target_len, double jitter, bool filter,
                const std::string& out, uint64_t seed) {
    ToySpec spec;
    spec.n_records = n;
    spec.jitter = jitter;
    spec.target_len = target_len;
    Rng rng(seed);
    auto records = generate_toy_dataset(spec, rng);
    int rejected = 0;
    if (filter) {
        FilterResult res = apply_filters(records, FilterConfig{});
        rejected = static_cast<int>(res.rejected.size());
        records = std::move(res.kept);
    }
    save_dataset(records, make_manifest(records), out);
    write_run_config(out,
                     json{{"command", "toydata"},
                          {"n", n},
                          {"target_len", target_len ? json(*target_len) : json(nullptr)},
                          {"jitter", jitter},
                          {"filter", filter},
                          {"rejected", rejected}},
                     seed);
    std::cout << "wrote " << records.size() << " records to " << out << "\n";
    return 0;
}

int run_train(const std::string& data, const std::string& out, int steps, int batch,
              uint64_t seed, const std::string& config_path, double lr) {
    const Dataset ds = load_dataset_checked(data);
    if (ds.records.empty()) throw std::invalid_argument("train: empty dataset");

    ModelConfig cfg;
    if (!config_path.empty()) {
        require_exists(config_path, "model config");
        std::ifstream in(config_path);
        cfg = ModelConfig::from_json(
            std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()));
    }
    cfg.c_classes = std::max(cfg.c_classes, ds.manifest.label_vocab[0]);
    cfg.a_classes = std::max(cfg.a_classes, ds.manifest.label_vocab[1]);
    cfg.t_classes = std::max(cfg.t_classes, ds.manifest.label_vocab[2]);
    cfg.validate();

    Denoiser model(cfg, seed);
    TrainConfig tc;
    tc.adam.lr = lr;
    Rng rng(Rng::derive(seed, 1));
    BatchStream stream{ds, batch, rng};
    TrainedLog log;
    for (int step = 1; step <= steps; ++step) {
        const StepStats st = training_step(model, stream.next(), tc, step, rng);
        if (step == 1 || step % 25 == 0 || step == steps) log.log(step, st);
    }
    nn::CheckpointMeta meta;
    meta.seed = seed;
    meta.step = steps;
    meta.dataset_id = data;
    nn::save_checkpoint((fs::path(out) / "checkpoint").string(), model.params(), cfg.to_json(),
                        meta);
    write_text(fs::path(out) / "train_log.csv", log.csv);
    write_run_config(out,
                     json{{"command", "train"},
                          {"data", data},
                          {"steps", steps},
                          {"batch", batch},
                          {"lr", lr},
                          {"model", json::parse(cfg.to_json())}},
                     seed);
    std::cout << "checkpoint written to " << (fs::path(out) / "checkpoint").string() << "\n";
    return 0;
}

int run_lora(const std::string& ckpt, const std::string& data, const std::string& out, int steps,
             int batch, int rank, double scale, uint64_t seed, double lr) {
    const Dataset ds = load_dataset_checked(data);
    if (ds.records.empty()) throw std::invalid_argument("lora-finetune: empty dataset");
    Denoiser model = load_denoiser(ckpt);
    nn::LoraSpec spec;
    spec.rank = rank;
    spec.scale = scale;
    Rng init_rng(Rng::derive(seed, 2));
    model.attach_lora(spec, init_rng);

    TrainConfig tc;
    tc.adam.lr = lr;
    Rng rng(Rng::derive(seed, 3));
    BatchStream stream{ds, batch, rng};
    TrainedLog log;
    for (int step = 1; step <= steps; ++step) {
        const StepStats st = training_step(model, stream.next(), tc, step, rng);
        if (step == 1 || step % 25 == 0 || step == steps) log.log(step, st);
    }
    nn::CheckpointMeta meta;
    meta.seed = seed;
    meta.step = steps;
    meta.dataset_id = data;
    nn::save_checkpoint((fs::path(out) / "checkpoint").string(), model.params(),
                        model.config().to_json(), meta);
    write_text(fs::path(out) / "train_log.csv", log.csv);
    write_run_config(out,
                     json{{"command", "lora-finetune"},
                          {"ckpt", ckpt},
                          {"data", data},
                          {"steps", steps},
                          {"batch", batch},
                          {"rank", rank},
                          {"scale", scale},
                          {"lr", lr}},
                     seed);
    std::cout << "adapter checkpoint written to " << (fs::path(out) / "checkpoint").string()
              << "\n";
    return 0;
}

int run_sample(const std::string& ckpt, const std::string& bad_ckpt, int n, int len, double gamma,
               double omega, double alpha, const std::string& gt, int steps, bool ode,
               bool self_cond, const std::string& label_text, const std::string& out,
               uint64_t seed) {
    Denoiser model = load_denoiser(ckpt);
    std::optional<Denoiser> bad;
    if (!bad_ckpt.empty()) bad.emplace(load_denoiser(bad_ckpt));
    if (alpha != 0.0 && !bad)
        throw std::invalid_argument("sample: --alpha requires --bad-ckpt");

    GuidanceSpec guidance;
    guidance.omega = omega;
    guidance.alpha = alpha;
    guidance.label = parse_label(label_text);
    guidance.bad_model = bad ? &*bad : nullptr;

    SampleOptions opts;
    opts.n_steps = steps;
    opts.g_schedule.kind = ode ? GKind::zero : parse_gkind(gt);
    opts.gamma = gamma;
    opts.ode = ode;
    opts.self_conditioning = self_cond;

    fs::create_directories(out);
    json files = json::array();
    for (int i = 0; i < n; ++i) {
        Rng rng(Rng::derive(seed, 10, static_cast<uint64_t>(i)));
        const Backbone b = sample(model, len, guidance, opts, rng);
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%03d.pdb", i);
        write_calpha_pdb(b, (fs::path(out) / name).string());
        files.push_back(name);
    }
    const json config{{"command", "sample"}, {"ckpt", ckpt},       {"bad_ckpt", bad_ckpt},
                      {"n", n},              {"len", len},         {"gamma", gamma},
                      {"omega", omega},      {"alpha", alpha},     {"gt", ode ? "zero" : gt},
                      {"steps", steps},      {"ode", ode},         {"self_cond", self_cond},
                      {"label", label_text}, {"files", files}};
    write_text(fs::path(out) / "samples.json", config.dump(2) + "\n");
    write_run_config(out, config, seed);
    std::cout << "wrote " << n << " samples to " << out << "\n";
    return 0;
}

std::vector<Backbone> load_sample_dir(const std::string& dir) {
    require_exists(fs::path(dir) / "samples.json", "sample manifest");
    std::ifstream in(fs::path(dir) / "samples.json");
    json j;
    in >> j;
    std::vector<Backbone> out;
    for (const auto& name : j.at("files"))
        out.push_back(ingest_calpha((fs::path(dir) / name.get<std::string>()).string()).backbone);
    if (out.empty()) throw MissingArtifact("sample directory is empty: " + dir);
    return out;
}

int run_eval(const std::string& samples, const std::string& ref, const std::string& classifier,
             const std::string& out, uint64_t seed) {
    const std::vector<Backbone> sample_set = load_sample_dir(samples);
    const Dataset ds = load_dataset_checked(ref);
    const FoldClassifier clf = load_classifier(classifier);
    const StructureSetReport report = evaluate_structure_set(sample_set, ds.records, clf);
    write_text(fs::path(out) / "report.json", report.to_json() + "\n");
    write_text(fs::path(out) / "report.csv", report.to_csv());
    write_run_config(
        out, json{{"command", "eval"}, {"samples", samples}, {"ref", ref}, {"classifier", classifier}},
        seed);
    std::cout << report.to_json() << "\n";
    return 0;
}

int run_reclass(const std::string& samples, const std::string& classifier, const std::string& out,
                uint64_t seed) {
    require_exists(fs::path(samples) / "samples.json", "sample manifest");
    std::ifstream in(fs::path(samples) / "samples.json");
    json j;
    in >> j;
    const FoldLabel target = parse_label(j.at("label").get<std::string>());
    const std::vector<Backbone> sample_set = load_sample_dir(samples);
    const std::vector<FoldLabel> targets(sample_set.size(), target);
    const FoldClassifier clf = load_classifier(classifier);

    json result{{"command", "reclass"}, {"samples", samples}, {"label", j.at("label")}};
    const std::array<std::string, 3> names{"c", "a", "t"};
    for (int level = 0; level < 3; ++level) {
        const ReclassResult r = reclassification_probability(sample_set, targets, clf, level);
        result[names[level]] = {{"mean_prob", r.mean_prob}, {"used", r.used}, {"skipped", r.skipped}};
    }
    write_text(fs::path(out) / "reclass.json", result.dump(2) + "\n");
    write_run_config(out, result, seed);
    std::cout << result.dump(2) << "\n";
    return 0;
}

int run_equiv(const std::string& ckpt, const std::string& data, const std::string& out, int t_n,
              double t_min, double t_max, int n_mc, uint64_t seed) {
    Denoiser model = load_denoiser(ckpt);
    const Dataset ds = load_dataset_checked(data);
    if (ds.records.empty()) throw std::invalid_argument("equiv: empty dataset");
    if (t_n < 1) throw std::invalid_argument("equiv: need at least one grid point");
    std::vector<double> grid;
    for (int i = 0; i < t_n; ++i)
        grid.push_back(t_n == 1 ? t_min : t_min + (t_max - t_min) * i / (t_n - 1));
    Rng rng(Rng::derive(seed, 4));
    const EquivarianceReport report = equivariance_analysis(model, ds.records, grid, n_mc, rng);
    write_text(fs::path(out) / "equiv.csv", report.to_csv());
    write_run_config(out,
                     json{{"command", "equiv"},
                          {"ckpt", ckpt},
                          {"data", data},
                          {"t_min", t_min},
                          {"t_max", t_max},
                          {"t_n", t_n},
                          {"n_mc", n_mc}},
                     seed);
    std::cout << report.to_csv();
    return 0;
}

int run_classify_train(const std::string& data, const std::string& out, int epochs,
                       uint64_t seed) {
    const Dataset ds = load_dataset_checked(data);
    if (ds.records.empty()) throw std::invalid_argument("classify-train: empty dataset");
    ClassifierConfig cfg;
    cfg.node_dim = 32;
    cfg.phi_dim = 32;
    cfg.c_classes = std::max(1, ds.manifest.label_vocab[0]);
    cfg.a_classes = std::max(1, ds.manifest.label_vocab[1]);
    cfg.t_classes = std::max(1, ds.manifest.label_vocab[2]);
    ClassifierTrainConfig tc;
    tc.n_epochs = epochs;
    ClassifierTrainReport report;
    FoldClassifier model = train_classifier(ds.records, cfg, tc, seed, &report);

    nn::CheckpointMeta meta;
    meta.seed = seed;
    meta.step = epochs;
    meta.dataset_id = data;
    nn::save_checkpoint((fs::path(out) / "checkpoint").string(), model.params(),
                        classifier_config_to_json(cfg).dump(2), meta);
    write_run_config(out,
                     json{{"command", "classify-train"},
                          {"data", data},
                          {"epochs", epochs},
                          {"initial_loss", report.initial_loss},
                          {"final_loss", report.final_loss},
                          {"skipped_levels", report.skipped_levels},
                          {"config", classifier_config_to_json(cfg)}},
                     seed);
    std::cout << "classifier loss " << report.initial_loss << " -> " << report.final_loss << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"flow-matching backbone generation toolkit"};
    app.require_subcommand(1);

    uint64_t seed = 0;
    app.add_option("--seed", seed, "global rng seed")->capture_default_str();

    // toydata
    auto* toydata = app.add_subcommand("toydata", "generate a labeled toy dataset");
    int td_n = 100;
    std::optional<int> td_len;
    double td_jitter = 0.05;
    bool td_filter = false;
    std::string td_out;
    toydata->add_option("--n", td_n, "record count")->capture_default_str();
    toydata->add_option("--len", td_len, "exact chain length");
    toydata->add_option("--jitter", td_jitter)->capture_default_str();
    toydata->add_flag("--filter", td_filter, "apply the structural filters");
    toydata->add_option("--out", td_out)->required();

    // train
    auto* train = app.add_subcommand("train", "train a denoiser");
    std::string tr_data, tr_out, tr_config;
    int tr_steps = 500, tr_batch = 2;
    double tr_lr = 1e-3;
    train->add_option("--data", tr_data)->required();
    train->add_option("--out", tr_out)->required();
    train->add_option("--steps", tr_steps)->capture_default_str();
    train->add_option("--batch", tr_batch)->capture_default_str();
    train->add_option("--config", tr_config, "model config json file");
    train->add_option("--lr", tr_lr)->capture_default_str();

    // lora-finetune
    auto* lora = app.add_subcommand("lora-finetune", "fine-tune adapters on a checkpoint");
    std::string lo_ckpt, lo_data, lo_out;
    int lo_steps = 200, lo_batch = 2, lo_rank = 16;
    double lo_scale = 32.0, lo_lr = 1e-3;
    lora->add_option("--ckpt", lo_ckpt)->required();
    lora->add_option("--data", lo_data)->required();
    lora->add_option("--out", lo_out)->required();
    lora->add_option("--steps", lo_steps)->capture_default_str();
    lora->add_option("--batch", lo_batch)->capture_default_str();
    lora->add_option("--rank", lo_rank)->capture_default_str();
    lora->add_option("--scale", lo_scale)->capture_default_str();
    lora->add_option("--lr", lo_lr)->capture_default_str();

    // sample
    auto* smp = app.add_subcommand("sample", "generate backbones from a checkpoint");
    std::string sm_ckpt, sm_bad, sm_gt = "main", sm_label, sm_out;
    int sm_n = 8, sm_len = 64, sm_steps = 400;
    double sm_gamma = 0.45, sm_omega = 1.0, sm_alpha = 0.0;
    bool sm_ode = false, sm_self_cond = true;
    smp->add_option("--ckpt", sm_ckpt)->required();
    smp->add_option("--bad-ckpt", sm_bad, "reduced model for autoguidance");
    smp->add_option("--n", sm_n)->capture_default_str();
    smp->add_option("--len", sm_len)->capture_default_str();
    smp->add_option("--gamma", sm_gamma)->capture_default_str();
    smp->add_option("--omega", sm_omega)->capture_default_str();
    smp->add_option("--alpha", sm_alpha)->capture_default_str();
    smp->add_option("--gt", sm_gt, "g schedule: main|one-minus-t|tan|zero")->capture_default_str();
    smp->add_option("--steps", sm_steps)->capture_default_str();
    smp->add_flag("--ode", sm_ode, "deterministic sampling (alias for --gt zero)");
    smp->add_flag("--self-cond,!--no-self-cond", sm_self_cond, "self-conditioning");
    smp->add_option("--label", sm_label, "fold condition C[.A[.T]]");
    smp->add_option("--out", sm_out)->required();

    // eval
    auto* eval = app.add_subcommand("eval", "score a sample directory against a reference set");
    std::string ev_samples, ev_ref, ev_clf, ev_out;
    eval->add_option("--samples", ev_samples)->required();
    eval->add_option("--ref", ev_ref)->required();
    eval->add_option("--classifier", ev_clf)->required();
    eval->add_option("--out", ev_out)->required();

    // reclass
    auto* rc = app.add_subcommand("reclass", "re-classification probabilities of a sample set");
    std::string rc_samples, rc_clf, rc_out;
    rc->add_option("--samples", rc_samples)->required();
    rc->add_option("--classifier", rc_clf)->required();
    rc->add_option("--out", rc_out)->required();

    // equiv
    auto* eq = app.add_subcommand("equiv", "equivariance error analysis");
    std::string eq_ckpt, eq_data, eq_out;
    int eq_tn = 5, eq_mc = 16;
    double eq_tmin = 0.1, eq_tmax = 0.9;
    eq->add_option("--ckpt", eq_ckpt)->required();
    eq->add_option("--data", eq_data)->required();
    eq->add_option("--out", eq_out)->required();
    eq->add_option("--t-n", eq_tn)->capture_default_str();
    eq->add_option("--t-min", eq_tmin)->capture_default_str();
    eq->add_option("--t-max", eq_tmax)->capture_default_str();
    eq->add_option("--mc", eq_mc)->capture_default_str();

    // classify-train
    auto* ct = app.add_subcommand("classify-train", "train the fold classifier");
    std::string ct_data, ct_out;
    int ct_epochs = 30;
    ct->add_option("--data", ct_data)->required();
    ct->add_option("--out", ct_out)->required();
    ct->add_option("--epochs", ct_epochs)->capture_default_str();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (toydata->parsed())
            return run_toydata(td_n, td_len, td_jitter, td_filter, td_out, seed);
        if (train->parsed())
            return run_train(tr_data, tr_out, tr_steps, tr_batch, seed, tr_config, tr_lr);
        if (lora->parsed())
            return run_lora(lo_ckpt, lo_data, lo_out, lo_steps, lo_batch, lo_rank, lo_scale, seed,
                            lo_lr);
        if (smp->parsed())
            return run_sample(sm_ckpt, sm_bad, sm_n, sm_len, sm_gamma, sm_omega, sm_alpha, sm_gt,
                              sm_steps, sm_ode, sm_self_cond, sm_label, sm_out, seed);
        if (eval->parsed()) return run_eval(ev_samples, ev_ref, ev_clf, ev_out, seed);
        if (rc->parsed()) return run_reclass(rc_samples, rc_clf, rc_out, seed);
        if (eq->parsed())
            return run_equiv(eq_ckpt, eq_data, eq_out, eq_tn, eq_tmin, eq_tmax, eq_mc, seed);
        if (ct->parsed()) return run_classify_train(ct_data, ct_out, ct_epochs, seed);
    } catch (const MissingArtifact& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    }
    return 2;
}
