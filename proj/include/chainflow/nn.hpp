#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "chainflow/ad.hpp"
#include "chainflow/rng.hpp"

namespace chainflow::nn {

using ad::Mat;
using ad::Var;

struct Param {
    Mat value;
    Mat adam_m;
    Mat adam_v;
    bool trainable = true;
};

// Named parameter container shared by all models. std::map keeps iteration
// order deterministic for optimizer steps and checkpoint layout.
class ParamStore {
public:
    Mat& add(const std::string& name, int rows, int cols, double init_std, Rng& rng);
    Mat& add_zeros(const std::string& name, int rows, int cols);
    bool has(const std::string& name) const { return params_.count(name) != 0; }
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    std::map<std::string, Param>& all() { return params_; }
    const std::map<std::string, Param>& all() const { return params_; }

    size_t count_scalars(bool trainable_only = false) const;
    uint64_t value_checksum() const;  // byte-level, for frozen-base tests

private:
    std::map<std::string, Param> params_;
};

// Binds a tape to a store for one forward pass. Parameter leaves are created
// lazily and cached so each parameter appears once per tape.
struct Ctx {
    ad::Tape* tape = nullptr;
    ParamStore* store = nullptr;
    bool train = false;      // enables dropout
    bool with_grad = true;   // parameter leaves get gradients
    bool lora_active = false;
    double lora_scale_over_rank = 0.0;
    Rng* rng = nullptr;

    Var param(const std::string& name);
    Var constant(Mat m) { return tape->constant(std::move(m)); }

    // Gradients of every parameter leaf touched during this pass.
    std::map<std::string, Mat> collect_grads() const;

private:
    std::unordered_map<std::string, int> leaf_ids_;
    friend Var param_leaf(Ctx&, const std::string&);
};

// y = x * W (+ b). W stored as in x out. With an active LoRA adapter the
// effective weight W + (alpha/r) * down * up is assembled on the tape and the
// base weight leaf is frozen.
struct Linear {
    std::string name;
    int in = 0, out = 0;
    bool bias = true;

    void init(ParamStore& store, Rng& rng, double init_std = -1.0) const;  // -1: 1/sqrt(in)
    void init_zero(ParamStore& store) const;
    Var operator()(Ctx& ctx, Var x) const;
    size_t n_params() const { return static_cast<size_t>(in) * out + (bias ? out : 0); }
};

// Row lookup table, vocab x dim. LoRA-adaptable like Linear.
struct Embedding {
    std::string name;
    int vocab = 0, dim = 0;

    void init(ParamStore& store, Rng& rng, double init_std = 0.02) const;
    Var operator()(Ctx& ctx, const std::vector<int>& ids) const;
    size_t n_params() const { return static_cast<size_t>(vocab) * dim; }
};

Var dropout(Ctx& ctx, Var x, double p);

// sin/cos features of a scalar; dim must be even.
Eigen::RowVectorXd sinusoidal_encoding(double v, int dim, double max_period = 10000.0);

// --- LoRA ---

struct LoraSpec {
    int rank = 16;
    double scale = 32.0;
};

// Attach adapters (down: rows x r gaussian, up: r x cols zero) to the listed
// base parameters; bases are frozen. Throws if any adapter already exists.
void apply_lora(ParamStore& store, const std::vector<std::string>& param_names,
                const LoraSpec& spec, Rng& rng);
// Fold adapters into the base weights and remove them; bases unfreeze.
void merge_lora(ParamStore& store, const LoraSpec& spec);
bool lora_applied(const ParamStore& store);
std::vector<std::string> lora_base_names(const ParamStore& store);

// --- optimizer ---

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// One update over the grads present in `grads`; `step` is 1-based.
void adam_step(ParamStore& store, const std::map<std::string, Mat>& grads,
               const AdamConfig& cfg, int step);

// --- checkpoints ---
// Directory layout: config.json (model config document, caller-provided),
// manifest.json (tensor name/shape/dtype/offset), weights.bin (raw doubles,
// little endian), meta.json (seed, step, dataset id). Bit-exact round trip.

struct CheckpointMeta {
    uint64_t seed = 0;
    int64_t step = 0;
    std::string dataset_id;
};

void save_checkpoint(const std::string& dir, const ParamStore& store,
                     const std::string& config_json, const CheckpointMeta& meta);
// Returns the config document; fills store (replacing its contents) and meta.
std::string load_checkpoint(const std::string& dir, ParamStore& store, CheckpointMeta& meta);

}  // namespace chainflow::nn
