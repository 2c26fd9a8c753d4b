#pragma once

#include <array>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "chainflow/geom.hpp"
#include "chainflow/rng.hpp"

namespace chainflow {

struct FilterConfig {
    int min_len = 32;
    int max_len = 256;
    double max_coil_fraction = 0.5;
    double max_rgyr = 30.0;  // Angstrom
    double min_mean_confidence = 85.0;
    double max_confidence_std = 15.0;

    void validate() const;
};

// Procedural labeled chains. Class levels: c picks the motif family
// (0 = helix bundle, 1 = strand meander, 2 = mixed), a picks the segment
// count (2 or 3), t picks short or long segments.
struct ToySpec {
    int n_records = 0;
    double jitter = 0.05;                 // Gaussian coordinate noise, Angstrom
    std::optional<int> target_len;        // exact chain length when set
    int loop_len = 3;                     // residues between segments

    void validate() const;
};

std::vector<StructureRecord> generate_toy_dataset(const ToySpec& spec, Rng& rng);

// Reads C-alpha atoms of the first model from a PDB-format file. A chain id
// must be given when the file holds several chains; alternate locations keep
// the highest-occupancy conformer; B-factors become per-residue confidence.
StructureRecord ingest_calpha(const std::string& path,
                              std::optional<char> chain = std::nullopt);

void write_calpha_pdb(const Backbone& b, const std::string& path);

struct FilterResult {
    std::vector<StructureRecord> kept;
    std::vector<std::pair<StructureRecord, std::vector<std::string>>> rejected;
};

FilterResult apply_filters(const std::vector<StructureRecord>& records,
                           const FilterConfig& cfg);

struct DatasetManifest {
    static constexpr int current_version = 1;
    int version = current_version;
    std::vector<std::string> record_ids;    // parallel to the record array
    std::vector<std::string> cluster_keys;  // parallel to the record array
    std::array<int, 3> label_vocab{0, 0, 0};

    void validate() const;
};

// Cluster key: generating class plus a length bucket.
DatasetManifest make_manifest(const std::vector<StructureRecord>& records);

// One epoch: clusters in shuffled order, one uniform member each. Returns
// record indices.
std::vector<int> cluster_epoch(const DatasetManifest& manifest, Rng& rng);

struct Dataset {
    std::vector<StructureRecord> records;
    DatasetManifest manifest;
};

void save_dataset(const std::vector<StructureRecord>& records,
                  const DatasetManifest& manifest, const std::string& dir);
Dataset load_dataset(const std::string& dir);

}  // namespace chainflow
