#include "chainflow/nn.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace chainflow::nn {

namespace fs = std::filesystem;
using nlohmann::json;

Mat& ParamStore::add(const std::string& name, int rows, int cols, double init_std, Rng& rng) {
    if (params_.count(name)) throw std::invalid_argument("duplicate param: " + name);
    Param p;
    p.value = Mat::Zero(rows, cols);
    for (int j = 0; j < cols; ++j)
        for (int i = 0; i < rows; ++i) p.value(i, j) = init_std * rng.gaussian();
    return params_.emplace(name, std::move(p)).first->second.value;
}

Mat& ParamStore::add_zeros(const std::string& name, int rows, int cols) {
    if (params_.count(name)) throw std::invalid_argument("duplicate param: " + name);
    Param p;
    p.value = Mat::Zero(rows, cols);
    return params_.emplace(name, std::move(p)).first->second.value;
}

Param& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no param: " + name);
    return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("no param: " + name);
    return it->second;
}

size_t ParamStore::count_scalars(bool trainable_only) const {
    size_t n = 0;
    for (const auto& [k, p] : params_) {
        if (trainable_only && !p.trainable) continue;
        n += static_cast<size_t>(p.value.size());
    }
    return n;
}

uint64_t ParamStore::value_checksum() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [k, p] : params_) {
        for (char c : k) h = (h ^ static_cast<uint8_t>(c)) * 0x100000001b3ull;
        const auto* bytes = reinterpret_cast<const uint8_t*>(p.value.data());
        for (size_t i = 0; i < p.value.size() * sizeof(double); ++i)
            h = (h ^ bytes[i]) * 0x100000001b3ull;
    }
    return h;
}

Var Ctx::param(const std::string& name) {
    auto it = leaf_ids_.find(name);
    if (it != leaf_ids_.end()) return {tape, it->second};
    const Param& p = store->at(name);
    Var v = tape->leaf(p.value, with_grad && p.trainable);
    leaf_ids_.emplace(name, v.id);
    return v;
}

std::map<std::string, Mat> Ctx::collect_grads() const {
    std::map<std::string, Mat> out;
    for (const auto& [name, id] : leaf_ids_) {
        if (!tape->needs_grad(id)) continue;
        const Mat& g = tape->grad(id);
        if (g.size() != 0) out.emplace(name, g);
    }
    return out;
}

void Linear::init(ParamStore& store, Rng& rng, double init_std) const {
    const double s = init_std < 0.0 ? 1.0 / std::sqrt(static_cast<double>(in)) : init_std;
    store.add(name + ".w", in, out, s, rng);
    if (bias) store.add_zeros(name + ".b", 1, out);
}

void Linear::init_zero(ParamStore& store) const {
    store.add_zeros(name + ".w", in, out);
    if (bias) store.add_zeros(name + ".b", 1, out);
}

namespace {

Var effective_weight(Ctx& ctx, const std::string& wname) {
    Var w = ctx.param(wname);
    if (ctx.lora_active && ctx.store->has(wname + ".lora_down")) {
        Var down = ctx.param(wname + ".lora_down");
        Var up = ctx.param(wname + ".lora_up");
        w = ad::add(w, ad::cmul(ad::matmul(down, up), ctx.lora_scale_over_rank));
    }
    return w;
}

}  // namespace

Var Linear::operator()(Ctx& ctx, Var x) const {
    Var y = ad::matmul(x, effective_weight(ctx, name + ".w"));
    if (bias) y = ad::add_rowvec(y, ctx.param(name + ".b"));
    return y;
}

void Embedding::init(ParamStore& store, Rng& rng, double init_std) const {
    store.add(name + ".e", vocab, dim, init_std, rng);
}

Var Embedding::operator()(Ctx& ctx, const std::vector<int>& ids) const {
    for (int id : ids)
        if (id < 0 || id >= vocab) throw std::out_of_range("embedding id out of range: " + name);
    return ad::gather_rows(effective_weight(ctx, name + ".e"), ids);
}

Var dropout(Ctx& ctx, Var x, double p) {
    if (!ctx.train || p <= 0.0) return x;
    if (!ctx.rng) throw std::logic_error("dropout needs ctx.rng in train mode");
    Mat mask(x.rows(), x.cols());
    const double keep = 1.0 - p;
    for (int j = 0; j < mask.cols(); ++j)
        for (int i = 0; i < mask.rows(); ++i)
            mask(i, j) = ctx.rng->bernoulli(keep) ? 1.0 / keep : 0.0;
    return ad::mul(x, ctx.constant(std::move(mask)));
}

Eigen::RowVectorXd sinusoidal_encoding(double v, int dim, double max_period) {
    if (dim % 2 != 0) throw std::invalid_argument("sinusoidal dim must be even");
    Eigen::RowVectorXd enc(dim);
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        const double freq = std::pow(max_period, -static_cast<double>(k) / half);
        enc(k) = std::sin(v * freq);
        enc(half + k) = std::cos(v * freq);
    }
    return enc;
}

void apply_lora(ParamStore& store, const std::vector<std::string>& param_names,
                const LoraSpec& spec, Rng& rng) {
    for (const auto& base : param_names) {
        Param& p = store.at(base);
        if (store.has(base + ".lora_down")) throw std::logic_error("lora already applied: " + base);
        const int rows = static_cast<int>(p.value.rows());
        const int cols = static_cast<int>(p.value.cols());
        store.add(base + ".lora_down", rows, spec.rank, 1.0 / std::sqrt(spec.rank), rng);
        store.add_zeros(base + ".lora_up", spec.rank, cols);
        p.trainable = false;
    }
}

bool lora_applied(const ParamStore& store) {
    for (const auto& [k, p] : store.all())
        if (k.size() > 10 && k.rfind(".lora_down") == k.size() - 10) return true;
    return false;
}

std::vector<std::string> lora_base_names(const ParamStore& store) {
    std::vector<std::string> out;
    for (const auto& [k, p] : store.all())
        if (k.size() > 10 && k.rfind(".lora_down") == k.size() - 10)
            out.push_back(k.substr(0, k.size() - 10));
    return out;
}

void merge_lora(ParamStore& store, const LoraSpec& spec) {
    const auto bases = lora_base_names(store);
    if (bases.empty()) throw std::logic_error("merge_lora: no adapters attached");
    for (const auto& base : bases) {
        Param& p = store.at(base);
        p.value += (spec.scale / spec.rank) * store.at(base + ".lora_down").value *
                   store.at(base + ".lora_up").value;
        p.trainable = true;
        store.all().erase(base + ".lora_down");
        store.all().erase(base + ".lora_up");
    }
}

void adam_step(ParamStore& store, const std::map<std::string, Mat>& grads,
               const AdamConfig& cfg, int step) {
    const double bc1 = 1.0 - std::pow(cfg.beta1, step);
    const double bc2 = 1.0 - std::pow(cfg.beta2, step);
    for (const auto& [name, g] : grads) {
        Param& p = store.at(name);
        if (!p.trainable) continue;
        if (p.adam_m.size() == 0) {
            p.adam_m = Mat::Zero(g.rows(), g.cols());
            p.adam_v = Mat::Zero(g.rows(), g.cols());
        }
        p.adam_m = cfg.beta1 * p.adam_m + (1.0 - cfg.beta1) * g;
        p.adam_v = cfg.beta2 * p.adam_v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
        const Mat mhat = p.adam_m / bc1;
        const Mat vhat = p.adam_v / bc2;
        p.value -= cfg.lr * (mhat.array() / (vhat.array().sqrt() + cfg.eps)).matrix();
    }
}

void save_checkpoint(const std::string& dir, const ParamStore& store,
                     const std::string& config_json, const CheckpointMeta& meta) {
    fs::create_directories(dir);
    {
        std::ofstream f(fs::path(dir) / "config.json");
        f << config_json;
    }
    json manifest = json::array();
    std::ofstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
    uint64_t offset = 0;
    for (const auto& [name, p] : store.all()) {
        json entry;
        entry["name"] = name;
        entry["shape"] = {p.value.rows(), p.value.cols()};
        entry["dtype"] = "float64";
        entry["offset"] = offset;
        entry["trainable"] = p.trainable;
        manifest.push_back(entry);
        const auto nbytes = static_cast<std::streamsize>(p.value.size() * sizeof(double));
        wf.write(reinterpret_cast<const char*>(p.value.data()), nbytes);
        offset += static_cast<uint64_t>(nbytes);
    }
    wf.close();
    {
        std::ofstream f(fs::path(dir) / "manifest.json");
        f << manifest.dump(1);
    }
    json m;
    m["seed"] = meta.seed;
    m["step"] = meta.step;
    m["dataset_id"] = meta.dataset_id;
    std::ofstream mf(fs::path(dir) / "meta.json");
    mf << m.dump(1);
}

std::string load_checkpoint(const std::string& dir, ParamStore& store, CheckpointMeta& meta) {
    std::ifstream cf(fs::path(dir) / "config.json");
    if (!cf) throw std::runtime_error("checkpoint missing config.json: " + dir);
    std::string config((std::istreambuf_iterator<char>(cf)), std::istreambuf_iterator<char>());

    std::ifstream maf(fs::path(dir) / "manifest.json");
    if (!maf) throw std::runtime_error("checkpoint missing manifest.json: " + dir);
    json manifest = json::parse(maf);

    std::ifstream wf(fs::path(dir) / "weights.bin", std::ios::binary);
    if (!wf) throw std::runtime_error("checkpoint missing weights.bin: " + dir);

    store.all().clear();
    for (const auto& entry : manifest) {
        const std::string name = entry.at("name");
        const int rows = entry.at("shape")[0];
        const int cols = entry.at("shape")[1];
        if (entry.at("dtype") != "float64")
            throw std::runtime_error("unsupported dtype in manifest");
        Param p;
        p.value = Mat::Zero(rows, cols);
        p.trainable = entry.value("trainable", true);
        wf.seekg(static_cast<std::streamoff>(entry.at("offset").get<uint64_t>()));
        wf.read(reinterpret_cast<char*>(p.value.data()),
                static_cast<std::streamsize>(p.value.size() * sizeof(double)));
        if (!wf) throw std::runtime_error("weights.bin truncated for tensor " + name);
        store.all().emplace(name, std::move(p));
    }

    std::ifstream mf(fs::path(dir) / "meta.json");
    if (!mf) throw std::runtime_error("checkpoint missing meta.json: " + dir);
    json m = json::parse(mf);
    meta.seed = m.at("seed");
    meta.step = m.at("step");
    meta.dataset_id = m.value("dataset_id", "");
    return config;
}

}  // namespace chainflow::nn
