#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "chainflow/classifier.hpp"
#include "chainflow/data.hpp"
#include "chainflow/metrics.hpp"

using namespace chainflow;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& tag) : path(fs::temp_directory_path() / ("chainflow_" + tag)) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string pdb_line(int serial, char altloc, char chain, int resseq, double x, double y,
                     double z, double occ, double b) {
    char buf[96];
    std::snprintf(buf, sizeof(buf),
                  "ATOM  %5d  CA %cGLY %c%4d    %8.3f%8.3f%8.3f%6.2f%6.2f           C", serial,
                  altloc, chain, resseq, x, y, z, occ, b);
    return std::string(buf) + "\n";
}

std::vector<StructureRecord> by_class(const std::vector<StructureRecord>& recs, int c) {
    std::vector<StructureRecord> out;
    for (const auto& r : recs)
        if (r.labels.front().c == c) out.push_back(r);
    return out;
}

}  // namespace

TEST_CASE("toy generator spacing, determinism and labels") {
    ToySpec spec;
    spec.n_records = 40;
    Rng rng(1);
    const auto recs = generate_toy_dataset(spec, rng);
    REQUIRE(recs.size() == 40);

    double spacing_sum = 0.0;
    int spacing_n = 0;
    for (const auto& r : recs) {
        REQUIRE(r.labels.size() == 1);
        CHECK(r.labels.front().hierarchy_consistent());
        CHECK(r.per_residue_confidence->minCoeff() == 100.0);
        for (int i = 1; i < r.backbone.length(); ++i) {
            spacing_sum += (r.backbone.coords.row(i) - r.backbone.coords.row(i - 1)).norm();
            ++spacing_n;
        }
    }
    CHECK(spacing_sum / spacing_n == doctest::Approx(3.8).epsilon(0.1 / 3.8));

    Rng rng2(1);
    const auto again = generate_toy_dataset(spec, rng2);
    for (size_t i = 0; i < recs.size(); ++i)
        CHECK((recs[i].backbone.coords - again[i].backbone.coords).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("toy generator respects target length") {
    ToySpec spec;
    spec.n_records = 20;
    spec.target_len = 64;
    Rng rng(2);
    for (const auto& r : generate_toy_dataset(spec, rng)) CHECK(r.backbone.length() == 64);
    spec.target_len = 20;
    CHECK_THROWS(generate_toy_dataset(spec, rng));
}

TEST_CASE("toy classes show the intended secondary structure") {
    ToySpec spec;
    spec.n_records = 120;
    Rng rng(3);
    const auto recs = generate_toy_dataset(spec, rng);
    const auto bundles = by_class(recs, 0);
    const auto meanders = by_class(recs, 1);
    REQUIRE(bundles.size() >= 10);
    REQUIRE(meanders.size() >= 10);
    for (const auto& r : bundles)
        CHECK(secondary_structure(r.backbone).helix_frac >= 0.6);
    for (const auto& r : meanders)
        CHECK(secondary_structure(r.backbone).strand_frac >= 0.4);
}

TEST_CASE("pdb round trip and writer format") {
    TempDir tmp("pdb");
    Backbone b;
    b.coords = Coords(3, 3);
    b.coords << 1.25, -2.5, 3.125, 4.75, 5.0, -6.25, 8.5, 9.125, 10.0;
    const std::string path = (tmp.path / "toy.pdb").string();
    write_calpha_pdb(b, path);
    const StructureRecord rec = ingest_calpha(path);
    REQUIRE(rec.backbone.length() == 3);
    CHECK((rec.backbone.coords - b.coords).cwiseAbs().maxCoeff() < 1e-9);
    CHECK(rec.chain_break);  // these points are > 4.5 A apart
    CHECK(rec.per_residue_confidence.has_value());
}

TEST_CASE("pdb ingestion corner cases") {
    TempDir tmp("pdbcases");
    const std::string alt = (tmp.path / "alt.pdb").string();
    {
        std::ofstream out(alt);
        out << pdb_line(1, 'A', 'A', 1, 1.0, 0.0, 0.0, 0.30, 77.0);
        out << pdb_line(2, 'B', 'A', 1, 2.0, 0.0, 0.0, 0.70, 55.0);
        out << pdb_line(3, ' ', 'A', 2, 5.0, 0.0, 0.0, 1.00, 80.0);
    }
    const StructureRecord rec = ingest_calpha(alt);
    REQUIRE(rec.backbone.length() == 2);
    CHECK(rec.backbone.coords(0, 0) == doctest::Approx(2.0));  // higher occupancy wins
    CHECK((*rec.per_residue_confidence)(0) == doctest::Approx(55.0));
    CHECK_FALSE(rec.chain_break);

    const std::string multi = (tmp.path / "multi.pdb").string();
    {
        std::ofstream out(multi);
        out << pdb_line(1, ' ', 'A', 1, 0.0, 0.0, 0.0, 1.0, 0.0);
        out << pdb_line(2, ' ', 'B', 1, 3.8, 0.0, 0.0, 1.0, 0.0);
    }
    CHECK_THROWS_WITH_AS(static_cast<void>(ingest_calpha(multi)),
                         doctest::Contains("A, B"), std::runtime_error);
    CHECK(ingest_calpha(multi, 'B').backbone.coords(0, 0) == doctest::Approx(3.8));

    const std::string empty = (tmp.path / "none.pdb").string();
    {
        std::ofstream out(empty);
        out << "ATOM      1  N   GLY A   1       0.000   0.000   0.000  1.00  0.00           N\n";
    }
    CHECK_THROWS(static_cast<void>(ingest_calpha(empty)));
}

TEST_CASE("filters enforce length, structure and confidence") {
    FilterConfig cfg;
    std::vector<StructureRecord> recs;

    StructureRecord stretched;  // 100 residues on a line, far beyond the rgyr cap
    stretched.backbone.coords = Coords::Zero(100, 3);
    for (int i = 0; i < 100; ++i) stretched.backbone.coords(i, 0) = 3.8 * i;
    recs.push_back(stretched);

    ToySpec spec;
    spec.n_records = 1;
    spec.target_len = 64;
    Rng rng(4);
    auto toy = generate_toy_dataset(spec, rng);
    while (toy.front().labels.front().c != 0 ||
           secondary_structure(toy.front().backbone).coil_frac > 0.5 ||
           radius_of_gyration(toy.front().backbone) > 30.0)
        toy = generate_toy_dataset(spec, rng);
    recs.push_back(toy.front());  // compact helix bundle

    StructureRecord shorty = toy.front();
    shorty.backbone.coords = toy.front().backbone.coords.topRows(10);
    shorty.per_residue_confidence = Eigen::VectorXd::Constant(10, 100.0);
    recs.push_back(shorty);

    StructureRecord doubtful = toy.front();
    doubtful.per_residue_confidence = Eigen::VectorXd::Constant(64, 50.0);
    recs.push_back(doubtful);

    StructureRecord no_conf = toy.front();
    no_conf.per_residue_confidence.reset();
    recs.push_back(no_conf);

    const FilterResult res = apply_filters(recs, cfg);
    REQUIRE(res.kept.size() == 2);  // the bundle, with and without confidence
    REQUIRE(res.rejected.size() == 3);

    std::map<int, std::vector<std::string>> reasons;
    for (const auto& [rec, why] : res.rejected)
        reasons[rec.backbone.length() == 100 ? 0 : (rec.backbone.length() == 10 ? 1 : 2)] = why;
    CHECK(std::find(reasons[0].begin(), reasons[0].end(), "rgyr") != reasons[0].end());
    CHECK(reasons[1] == std::vector<std::string>{"length"});
    CHECK(reasons[2] == std::vector<std::string>{"confidence_mean"});
}

TEST_CASE("filters are order independent") {
    ToySpec spec;
    spec.n_records = 30;
    Rng rng(5);
    auto recs = generate_toy_dataset(spec, rng);
    const FilterResult fwd = apply_filters(recs, FilterConfig{});
    std::reverse(recs.begin(), recs.end());
    const FilterResult rev = apply_filters(recs, FilterConfig{});
    CHECK(fwd.kept.size() == rev.kept.size());
    CHECK(fwd.rejected.size() == rev.rejected.size());
    for (size_t i = 0; i < fwd.kept.size(); ++i)
        CHECK(fwd.kept[i].source_id == rev.kept[rev.kept.size() - 1 - i].source_id);
}

TEST_CASE("cluster balanced epochs") {
    DatasetManifest m;
    // clusters of size 1, 10, 100
    for (int i = 0; i < 111; ++i) {
        m.record_ids.push_back("r" + std::to_string(i));
        m.cluster_keys.push_back(i == 0 ? "a" : (i <= 10 ? "b" : "c"));
    }
    Rng rng(6);
    const auto epoch = cluster_epoch(m, rng);
    REQUIRE(epoch.size() == 3);
    std::set<std::string> seen;
    for (int idx : epoch) seen.insert(m.cluster_keys[idx]);
    CHECK(seen == std::set<std::string>{"a", "b", "c"});

    std::map<int, int> picks;
    Rng rng2(17);
    for (int e = 0; e < 10000; ++e)
        for (int idx : cluster_epoch(m, rng2))
            if (m.cluster_keys[idx] == "b") ++picks[idx];
    for (int i = 1; i <= 10; ++i) {
        CHECK(picks[i] > 900);
        CHECK(picks[i] < 1100);
    }

    Rng ra(8), rb(8);
    CHECK(cluster_epoch(m, ra) == cluster_epoch(m, rb));
}

TEST_CASE("dataset round trip is lossless") {
    TempDir tmp("dataset");
    ToySpec spec;
    spec.n_records = 25;
    Rng rng(9);
    auto recs = generate_toy_dataset(spec, rng);
    recs[3].per_residue_confidence.reset();
    recs[5].labels.push_back(FoldLabel{1, std::nullopt, std::nullopt});
    const DatasetManifest manifest = make_manifest(recs);
    save_dataset(recs, manifest, tmp.path.string());

    const Dataset back = load_dataset(tmp.path.string());
    REQUIRE(back.records.size() == recs.size());
    CHECK(back.manifest.cluster_keys == manifest.cluster_keys);
    CHECK(back.manifest.label_vocab == manifest.label_vocab);
    for (size_t i = 0; i < recs.size(); ++i) {
        CHECK((back.records[i].backbone.coords - recs[i].backbone.coords).cwiseAbs().maxCoeff() ==
              0.0);
        CHECK(back.records[i].source_id == recs[i].source_id);
        REQUIRE(back.records[i].labels.size() == recs[i].labels.size());
        CHECK(back.records[i].labels.back().a == recs[i].labels.back().a);
        CHECK(back.records[i].per_residue_confidence.has_value() ==
              recs[i].per_residue_confidence.has_value());
    }
}

TEST_CASE("dataset loader rejects corruption, accepts empty") {
    TempDir tmp("corrupt");
    ToySpec spec;
    spec.n_records = 4;
    Rng rng(10);
    const auto recs = generate_toy_dataset(spec, rng);
    save_dataset(recs, make_manifest(recs), tmp.path.string());

    // inflate one record's stored length past the file extent
    std::ifstream in(tmp.path / "manifest.json");
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    const std::string needle = "\"length\": " + std::to_string(recs[3].backbone.length());
    const size_t pos = text.rfind(needle);
    REQUIRE(pos != std::string::npos);
    text.replace(pos, needle.size(), "\"length\": 99999");
    std::ofstream(tmp.path / "manifest.json") << text;
    CHECK_THROWS(load_dataset(tmp.path.string()));

    TempDir tmp2("empty");
    save_dataset({}, DatasetManifest{}, tmp2.path.string());
    const Dataset empty = load_dataset(tmp2.path.string());
    CHECK(empty.records.empty());
}

TEST_CASE("classifier recovers the generating class") {
    ToySpec spec;
    spec.n_records = 90;
    Rng rng(11);
    const auto train = generate_toy_dataset(spec, rng);
    Rng rng_eval(12);
    spec.n_records = 30;
    const auto held_out = generate_toy_dataset(spec, rng_eval);

    ClassifierConfig cfg;
    cfg.node_dim = 32;
    cfg.phi_dim = 32;
    cfg.n_layers = 3;
    ClassifierTrainConfig tc;
    tc.n_epochs = 30;
    const FoldClassifier model = train_classifier(train, cfg, tc, 13);

    int correct = 0;
    for (const auto& rec : held_out) {
        int arg = 0;
        model.classify(rec.backbone).probs_c.maxCoeff(&arg);
        if (arg == *rec.labels.front().c) ++correct;
    }
    CHECK(static_cast<double>(correct) / held_out.size() >= 0.9);
}
