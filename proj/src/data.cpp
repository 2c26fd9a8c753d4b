#include "chainflow/data.hpp"

#include "chainflow/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

namespace chainflow {

namespace fs = std::filesystem;
using nlohmann::json;

void FilterConfig::validate() const {
    if (min_len < 5 || min_len >= max_len)
        throw std::invalid_argument("FilterConfig: need 5 <= min_len < max_len");
    if (max_coil_fraction <= 0.0 || max_rgyr <= 0.0 || min_mean_confidence <= 0.0 ||
        max_confidence_std <= 0.0)
        throw std::invalid_argument("FilterConfig: thresholds must be positive");
}

void ToySpec::validate() const {
    if (n_records <= 0) throw std::invalid_argument("ToySpec: n_records must be positive");
    if (jitter < 0.0) throw std::invalid_argument("ToySpec: jitter must be non-negative");
    if (loop_len < 1) throw std::invalid_argument("ToySpec: loop_len must be >= 1");
    if (target_len && *target_len < 32)
        throw std::invalid_argument("ToySpec: target_len must be >= 32");
}

namespace {

constexpr double kCaSpacing = 3.8;

Coords helix_segment(int n) {
    Coords x(n, 3);
    const double step = 100.0 * M_PI / 180.0;
    for (int i = 0; i < n; ++i) {
        x(i, 0) = 2.3 * std::cos(i * step);
        x(i, 1) = 2.3 * std::sin(i * step);
        x(i, 2) = 1.5 * i;
    }
    return x;
}

Coords strand_segment(int n) {
    Coords x = Coords::Zero(n, 3);
    for (int i = 0; i < n; ++i) {
        x(i, 0) = 3.2 * i;
        x(i, 1) = (i % 2 == 0) ? 1.02 : -1.02;
    }
    return x;
}

Eigen::RowVector3d random_unit(Rng& rng) {
    Eigen::RowVector3d v(rng.gaussian(), rng.gaussian(), rng.gaussian());
    const double n = v.norm();
    return n > 1e-12 ? Eigen::RowVector3d(v / n) : Eigen::RowVector3d(1, 0, 0);
}

// 0 = helix, 1 = strand
std::vector<int> segment_types(int c, int n_seg) {
    std::vector<int> types(n_seg);
    for (int s = 0; s < n_seg; ++s) types[s] = c == 0 ? 0 : (c == 1 ? 1 : s % 2);
    return types;
}

Backbone build_chain(int c, int a, int t, const ToySpec& spec, Rng& rng) {
    const int n_seg = a == 0 ? 2 : 3;
    const auto types = segment_types(c, n_seg);

    std::vector<int> seg_len(n_seg);
    if (spec.target_len) {
        const int body = *spec.target_len - (n_seg - 1) * spec.loop_len;
        for (int s = 0; s < n_seg; ++s) seg_len[s] = body / n_seg;
        seg_len[n_seg - 1] += body - (body / n_seg) * n_seg;
    } else {
        for (int s = 0; s < n_seg; ++s)
            seg_len[s] = types[s] == 0 ? (t == 0 ? 12 : 16) : (t == 0 ? 8 : 11);
    }

    std::vector<Eigen::RowVector3d> pts;
    for (int s = 0; s < n_seg; ++s) {
        if (s > 0)
            for (int k = 0; k < spec.loop_len; ++k)
                pts.push_back(pts.back() + kCaSpacing * random_unit(rng));
        const Coords local = types[s] == 0 ? helix_segment(seg_len[s]) : strand_segment(seg_len[s]);
        const Eigen::Matrix3d rot = random_rotation(rng).matrix;
        const Eigen::RowVector3d anchor =
            pts.empty() ? Eigen::RowVector3d::Zero()
                        : Eigen::RowVector3d(pts.back() + kCaSpacing * random_unit(rng));
        for (int i = 0; i < seg_len[s]; ++i)
            pts.push_back((local.row(i) - local.row(0)) * rot.transpose() + anchor);
    }

    Backbone b;
    b.coords = Coords(static_cast<int>(pts.size()), 3);
    for (size_t i = 0; i < pts.size(); ++i)
        for (int k = 0; k < 3; ++k)
            b.coords(static_cast<int>(i), k) = pts[i](k) + spec.jitter * rng.gaussian();
    return b;
}

std::string cluster_key_for(const StructureRecord& rec) {
    std::ostringstream key;
    if (rec.labels.empty()) {
        key << "u";
    } else {
        const FoldLabel& l = rec.labels.front();
        key << (l.c ? std::to_string(*l.c) : "u") << "."
            << (l.a ? std::to_string(*l.a) : "u") << "."
            << (l.t ? std::to_string(*l.t) : "u");
    }
    key << "-L" << rec.backbone.length() / 16;
    return key.str();
}

bool has_chain_break(const Backbone& b) {
    for (int i = 1; i < b.length(); ++i)
        if ((b.coords.row(i) - b.coords.row(i - 1)).norm() > 4.5) return true;
    return false;
}

double parse_field(const std::string& line, size_t pos, size_t len, double fallback) {
    if (line.size() < pos + len) return fallback;
    try {
        return std::stod(line.substr(pos, len));
    } catch (const std::exception&) {
        return fallback;
    }
}

}  // namespace

std::vector<StructureRecord> generate_toy_dataset(const ToySpec& spec, Rng& rng) {
    spec.validate();
    std::vector<StructureRecord> out;
    out.reserve(spec.n_records);
    for (int i = 0; i < spec.n_records; ++i) {
        const int c = static_cast<int>(rng.uniform_int(3));
        const int a = static_cast<int>(rng.uniform_int(2));
        const int t = static_cast<int>(rng.uniform_int(2));
        StructureRecord rec;
        rec.backbone = build_chain(c, a, t, spec, rng);
        rec.labels = {FoldLabel{c, a, t}};
        rec.source_id = "toy-" + std::to_string(i);
        rec.per_residue_confidence = Eigen::VectorXd::Constant(rec.backbone.length(), 100.0);
        rec.chain_break = false;
        out.push_back(std::move(rec));
    }
    return out;
}

StructureRecord ingest_calpha(const std::string& path, std::optional<char> chain) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("ingest_calpha: cannot open " + path);

    struct CaAtom {
        Eigen::RowVector3d xyz;
        double occupancy;
        double bfactor;
        int order;
    };
    std::map<std::string, CaAtom> best;  // residue key -> highest occupancy CA
    std::set<char> chains;
    std::string line;
    int order = 0;
    while (std::getline(in, line)) {
        if (line.rfind("ENDMDL", 0) == 0) break;
        if (line.rfind("ATOM", 0) != 0 || line.size() < 54) continue;
        const std::string atom = line.substr(12, 4);
        if (atom != " CA " && atom != "CA  ") continue;
        const char ch = line[21];
        chains.insert(ch);
        if (chain && ch != *chain) continue;
        if (!chain && chains.size() > 1) continue;  // resolved after the loop
        const std::string res_key = std::string(1, ch) + line.substr(22, 5);
        CaAtom a;
        a.xyz = Eigen::RowVector3d(parse_field(line, 30, 8, 0.0), parse_field(line, 38, 8, 0.0),
                                   parse_field(line, 46, 8, 0.0));
        a.occupancy = parse_field(line, 54, 6, 1.0);
        a.bfactor = parse_field(line, 60, 6, 0.0);
        a.order = order++;
        const auto it = best.find(res_key);
        if (it == best.end() || a.occupancy > it->second.occupancy) {
            if (it != best.end()) a.order = it->second.order;
            best[res_key] = a;
        }
    }
    if (!chain && chains.size() > 1) {
        std::string listing;
        for (const char c : chains) listing += std::string(listing.empty() ? "" : ", ") + c;
        throw std::runtime_error("ingest_calpha: multiple chains present (" + listing +
                                 "), pass a chain id");
    }
    if (best.empty()) throw std::runtime_error("ingest_calpha: no C-alpha atoms in " + path);

    std::vector<const CaAtom*> ordered;
    for (const auto& [key, a] : best) ordered.push_back(&a);
    std::sort(ordered.begin(), ordered.end(),
              [](const CaAtom* x, const CaAtom* y) { return x->order < y->order; });

    StructureRecord rec;
    const int n = static_cast<int>(ordered.size());
    rec.backbone.coords = Coords(n, 3);
    Eigen::VectorXd conf(n);
    for (int i = 0; i < n; ++i) {
        rec.backbone.coords.row(i) = ordered[i]->xyz;
        conf(i) = std::clamp(ordered[i]->bfactor, 0.0, 100.0);
    }
    rec.per_residue_confidence = conf;
    rec.source_id = fs::path(path).stem().string();
    rec.chain_break = has_chain_break(rec.backbone);
    return rec;
}

void write_calpha_pdb(const Backbone& b, const std::string& path) {
    b.validate();
    std::ofstream out(path);
    if (!out) throw std::runtime_error("write_calpha_pdb: cannot open " + path);
    char buf[96];
    for (int i = 0; i < b.length(); ++i) {
        std::snprintf(buf, sizeof(buf),
                      "ATOM  %5d  CA  GLY A%4d    %8.3f%8.3f%8.3f  1.00  0.00           C", i + 1,
                      i + 1, b.coords(i, 0), b.coords(i, 1), b.coords(i, 2));
        out << buf << "\n";
    }
    out << "TER\nEND\n";
}

FilterResult apply_filters(const std::vector<StructureRecord>& records,
                           const FilterConfig& cfg) {
    cfg.validate();
    FilterResult res;
    for (const auto& rec : records) {
        std::vector<std::string> reasons;
        const int L = rec.backbone.length();
        if (L < cfg.min_len || L > cfg.max_len) {
            reasons.push_back("length");
        } else {
            if (secondary_structure(rec.backbone).coil_frac > cfg.max_coil_fraction)
                reasons.push_back("coil_fraction");
            if (radius_of_gyration(rec.backbone) > cfg.max_rgyr) reasons.push_back("rgyr");
            if (rec.per_residue_confidence) {
                const Eigen::VectorXd& c = *rec.per_residue_confidence;
                const double mean = c.mean();
                const double sd = std::sqrt((c.array() - mean).square().sum() /
                                            std::max(1, static_cast<int>(c.size()) - 1));
                if (mean < cfg.min_mean_confidence) reasons.push_back("confidence_mean");
                if (sd > cfg.max_confidence_std) reasons.push_back("confidence_std");
            }
        }
        if (reasons.empty())
            res.kept.push_back(rec);
        else
            res.rejected.emplace_back(rec, std::move(reasons));
    }
    return res;
}

void DatasetManifest::validate() const {
    if (version != current_version) throw std::runtime_error("DatasetManifest: version mismatch");
    if (record_ids.size() != cluster_keys.size())
        throw std::runtime_error("DatasetManifest: id/cluster size mismatch");
}

DatasetManifest make_manifest(const std::vector<StructureRecord>& records) {
    DatasetManifest m;
    for (const auto& rec : records) {
        m.record_ids.push_back(rec.source_id);
        m.cluster_keys.push_back(cluster_key_for(rec));
        for (const auto& l : rec.labels) {
            if (l.c) m.label_vocab[0] = std::max(m.label_vocab[0], *l.c + 1);
            if (l.a) m.label_vocab[1] = std::max(m.label_vocab[1], *l.a + 1);
            if (l.t) m.label_vocab[2] = std::max(m.label_vocab[2], *l.t + 1);
        }
    }
    return m;
}

std::vector<int> cluster_epoch(const DatasetManifest& manifest, Rng& rng) {
    manifest.validate();
    std::map<std::string, std::vector<int>> clusters;
    for (size_t i = 0; i < manifest.cluster_keys.size(); ++i)
        clusters[manifest.cluster_keys[i]].push_back(static_cast<int>(i));
    std::vector<const std::vector<int>*> order;
    for (const auto& [key, members] : clusters) order.push_back(&members);
    for (size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rng.uniform_int(i)]);
    std::vector<int> epoch;
    for (const auto* members : order)
        epoch.push_back((*members)[rng.uniform_int(members->size())]);
    return epoch;
}

void save_dataset(const std::vector<StructureRecord>& records,
                  const DatasetManifest& manifest, const std::string& dir) {
    manifest.validate();
    if (manifest.record_ids.size() != records.size())
        throw std::runtime_error("save_dataset: manifest does not match record count");
    fs::create_directories(dir);

    std::ofstream bin(fs::path(dir) / "coords.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("save_dataset: cannot write coords.bin");
    json jrecords = json::array();
    int64_t offset = 0;  // in doubles
    for (size_t i = 0; i < records.size(); ++i) {
        const auto& rec = records[i];
        const int L = rec.backbone.length();
        bin.write(reinterpret_cast<const char*>(rec.backbone.coords.data()),
                  static_cast<std::streamsize>(L) * 3 * sizeof(double));
        int64_t written = static_cast<int64_t>(L) * 3;
        if (rec.per_residue_confidence) {
            bin.write(reinterpret_cast<const char*>(rec.per_residue_confidence->data()),
                      static_cast<std::streamsize>(L) * sizeof(double));
            written += L;
        }
        json labels = json::array();
        for (const auto& l : rec.labels) {
            json jl;
            jl["c"] = l.c ? json(*l.c) : json(nullptr);
            jl["a"] = l.a ? json(*l.a) : json(nullptr);
            jl["t"] = l.t ? json(*l.t) : json(nullptr);
            labels.push_back(jl);
        }
        jrecords.push_back({{"id", manifest.record_ids[i]},
                            {"cluster", manifest.cluster_keys[i]},
                            {"length", L},
                            {"offset", offset},
                            {"labels", labels},
                            {"has_confidence", rec.per_residue_confidence.has_value()},
                            {"chain_break", rec.chain_break}});
        offset += written;
    }
    json j;
    j["version"] = manifest.version;
    j["label_vocab"] = manifest.label_vocab;
    j["total_doubles"] = offset;
    j["records"] = jrecords;
    std::ofstream mf(fs::path(dir) / "manifest.json");
    mf << j.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw std::runtime_error("load_dataset: missing manifest.json in " + dir);
    json j;
    mf >> j;
    if (j.at("version").get<int>() != DatasetManifest::current_version)
        throw std::runtime_error("load_dataset: manifest version mismatch");

    std::ifstream bin(fs::path(dir) / "coords.bin", std::ios::binary);
    if (!bin) throw std::runtime_error("load_dataset: missing coords.bin in " + dir);
    bin.seekg(0, std::ios::end);
    const int64_t file_doubles = static_cast<int64_t>(bin.tellg()) / sizeof(double);
    if (file_doubles != j.at("total_doubles").get<int64_t>())
        throw std::runtime_error("load_dataset: coords.bin size does not match manifest");

    Dataset ds;
    ds.manifest.version = j.at("version").get<int>();
    ds.manifest.label_vocab = j.at("label_vocab").get<std::array<int, 3>>();
    for (const auto& jr : j.at("records")) {
        const int L = jr.at("length").get<int>();
        const int64_t offset = jr.at("offset").get<int64_t>();
        const bool has_conf = jr.at("has_confidence").get<bool>();
        const int64_t need = static_cast<int64_t>(L) * (has_conf ? 4 : 3);
        if (L < 2 || offset < 0 || offset + need > file_doubles)
            throw std::runtime_error("load_dataset: corrupted record extent for id " +
                                     jr.at("id").get<std::string>());
        StructureRecord rec;
        rec.backbone.coords = Coords(L, 3);
        bin.seekg(offset * static_cast<int64_t>(sizeof(double)));
        bin.read(reinterpret_cast<char*>(rec.backbone.coords.data()),
                 static_cast<std::streamsize>(L) * 3 * sizeof(double));
        if (has_conf) {
            Eigen::VectorXd conf(L);
            bin.read(reinterpret_cast<char*>(conf.data()),
                     static_cast<std::streamsize>(L) * sizeof(double));
            rec.per_residue_confidence = conf;
        }
        if (!bin) throw std::runtime_error("load_dataset: truncated coords.bin");
        for (const auto& jl : jr.at("labels")) {
            FoldLabel l;
            if (!jl.at("c").is_null()) l.c = jl.at("c").get<int>();
            if (!jl.at("a").is_null()) l.a = jl.at("a").get<int>();
            if (!jl.at("t").is_null()) l.t = jl.at("t").get<int>();
            rec.labels.push_back(l);
        }
        rec.source_id = jr.at("id").get<std::string>();
        rec.chain_break = jr.at("chain_break").get<bool>();
        ds.manifest.record_ids.push_back(rec.source_id);
        ds.manifest.cluster_keys.push_back(jr.at("cluster").get<std::string>());
        ds.records.push_back(std::move(rec));
    }
    ds.manifest.validate();
    return ds;
}

}  // namespace chainflow
