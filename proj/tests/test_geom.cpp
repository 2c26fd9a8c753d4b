#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "chainflow/geom.hpp"

using namespace chainflow;

namespace {

Backbone make_backbone(std::initializer_list<std::array<double, 3>> pts) {
    Coords c(static_cast<int>(pts.size()), 3);
    int i = 0;
    for (const auto& p : pts) {
        c.row(i++) << p[0], p[1], p[2];
    }
    return Backbone{c};
}

// Ideal alpha-helix on the canonical parameters: radius 2.3 A, rise 1.5 A,
// 100 degrees per residue.
Backbone ideal_helix(int n) {
    Coords c(n, 3);
    const double w = 100.0 * M_PI / 180.0;
    for (int i = 0; i < n; ++i)
        c.row(i) << 2.3 * std::cos(w * i), 2.3 * std::sin(w * i), 1.5 * i;
    return Backbone{c};
}

Backbone random_coil(int n, Rng& rng) {
    Coords c(n, 3);
    c.row(0).setZero();
    for (int i = 1; i < n; ++i) {
        Eigen::RowVector3d dir(rng.gaussian(), rng.gaussian(), rng.gaussian());
        c.row(i) = c.row(i - 1) + 3.8 * dir.normalized();
    }
    return Backbone{c};
}

}  // namespace

TEST_CASE("center_backbone basics") {
    auto b = make_backbone({{1, 0, 0}, {3, 0, 0}});
    auto c = center_backbone(b);
    CHECK(c.coords(0, 0) == doctest::Approx(-1.0).epsilon(1e-12));
    CHECK(c.coords(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(c.coords.colwise().mean().norm() < 1e-9);
}

TEST_CASE("center_backbone with mask") {
    auto b = make_backbone({{0, 0, 0}, {2, 0, 0}, {4, 0, 0}});
    std::vector<bool> mask{true, true, false};
    auto c = center_backbone(b, &mask);
    CHECK(c.coords(0, 0) == doctest::Approx(-1.0));
    CHECK(c.coords(1, 0) == doctest::Approx(1.0));
    CHECK(c.coords(2, 0) == doctest::Approx(3.0));
}

TEST_CASE("center_backbone is idempotent") {
    Rng rng(7);
    Coords c(20, 3);
    for (int i = 0; i < c.size(); ++i) c(i / 3, i % 3) = 10.0 * rng.gaussian();
    Backbone b{c};
    auto once = center_backbone(b);
    auto twice = center_backbone(once);
    CHECK((once.coords - twice.coords).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("center_backbone empty mask errors") {
    auto b = make_backbone({{1, 0, 0}, {3, 0, 0}});
    std::vector<bool> mask{false, false};
    CHECK_THROWS(center_backbone(b, &mask));
}

TEST_CASE("random_rotation invariants over many seeds") {
    for (uint64_t seed = 0; seed < 10000; ++seed) {
        Rng rng(seed);
        CHECK(random_rotation(rng).is_valid(1e-9));
    }
}

TEST_CASE("random_rotation mean trace matches Haar value") {
    // trace = 1 + 2 cos(theta); under Haar measure E[cos theta] = -1/2, so E[trace] = 0.
    Rng rng(123);
    double tr = 0.0;
    const int n = 10000;
    for (int i = 0; i < n; ++i) tr += random_rotation(rng).matrix.trace();
    CHECK(std::abs(tr / n) < 0.05);
}

TEST_CASE("random_rotation deterministic for fixed seed") {
    Rng a(42), b(42);
    CHECK((random_rotation(a).matrix - random_rotation(b).matrix).norm() == 0.0);
}

TEST_CASE("kabsch recovers a pure rotation") {
    Rng rng(5);
    auto a = random_coil(30, rng);
    const Rotation r = random_rotation(rng);
    Backbone b{(a.coords * r.matrix.transpose()).eval()};
    auto res = kabsch_align(a, b);
    CHECK(res.rmsd < 1e-6);
    // Aligning b back onto a recovers R^T.
    CHECK((res.rotation.matrix - r.matrix.transpose()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("kabsch identical input") {
    Rng rng(6);
    auto a = random_coil(25, rng);
    auto res = kabsch_align(a, a);
    CHECK(res.rmsd == doctest::Approx(0.0).epsilon(1e-9));
    CHECK((res.rotation.matrix - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("kabsch removes arbitrary rigid motion") {
    Rng rng(17);
    for (int trial = 0; trial < 20; ++trial) {
        auto a = random_coil(40, rng);
        const Rotation r = random_rotation(rng);
        Eigen::RowVector3d t(rng.gaussian() * 5, rng.gaussian() * 5, rng.gaussian() * 5);
        Backbone b{((a.coords * r.matrix.transpose()).rowwise() + t).eval()};
        CHECK(kabsch_align(a, b).rmsd < 1e-6);
    }
}

TEST_CASE("kabsch jitter rmsd matches Monte Carlo expectation") {
    Rng rng(99);
    const int L = 100;
    const double sigma = 0.1;
    double mean_rmsd = 0.0;
    const int trials = 100;
    for (int trial = 0; trial < trials; ++trial) {
        auto a = random_coil(L, rng);
        Coords jitter(L, 3);
        for (int i = 0; i < L; ++i)
            jitter.row(i) << sigma * rng.gaussian(), sigma * rng.gaussian(), sigma * rng.gaussian();
        Backbone b{(a.coords + jitter).eval()};
        mean_rmsd += kabsch_align(a, b).rmsd;
    }
    mean_rmsd /= trials;
    const double expected = sigma * std::sqrt(3.0);  // DOF correction is O(1/L)
    CHECK(mean_rmsd > 0.8 * expected);
    CHECK(mean_rmsd < 1.2 * expected);
}

TEST_CASE("radius_of_gyration closed forms") {
    CHECK(radius_of_gyration(make_backbone({{0, 0, 0}, {2, 0, 0}})) == doctest::Approx(1.0));
    CHECK(radius_of_gyration(make_backbone({{1, 1, 1}, {1, 1, 1}, {1, 1, 1}})) ==
          doctest::Approx(0.0));
}

TEST_CASE("radius_of_gyration matches scalar-loop oracle on a helix") {
    auto h = ideal_helix(100);
    double cx = 0, cy = 0, cz = 0;
    for (int i = 0; i < 100; ++i) {
        cx += h.coords(i, 0);
        cy += h.coords(i, 1);
        cz += h.coords(i, 2);
    }
    cx /= 100;
    cy /= 100;
    cz /= 100;
    double acc = 0;
    for (int i = 0; i < 100; ++i) {
        const double dx = h.coords(i, 0) - cx, dy = h.coords(i, 1) - cy,
                     dz = h.coords(i, 2) - cz;
        acc += dx * dx + dy * dy + dz * dz;
    }
    CHECK(radius_of_gyration(h) == doctest::Approx(std::sqrt(acc / 100)).epsilon(1e-9));
}

TEST_CASE("pair distance binning boundaries") {
    CHECK(distance_bin(0.5, 64, 1.0, 30.0) == 0);
    CHECK(distance_bin(31.0, 64, 1.0, 30.0) == 63);
    CHECK(distance_bin(1.0, 64, 1.0, 30.0) == 1);  // left-closed interior bins
    const double width = 29.0 / 62.0;
    CHECK(distance_bin(1.0 + width, 64, 1.0, 30.0) == 2);
    CHECK(distance_bin(30.0, 64, 1.0, 30.0) == 63);
}

TEST_CASE("pair_distance_bins symmetry and range") {
    Rng rng(11);
    auto b = random_coil(30, rng);
    auto bins = pair_distance_bins(b, 64, 1.0, 30.0);
    for (int i = 0; i < 30; ++i) {
        CHECK(bins(i, i) == 0);
        for (int j = 0; j < 30; ++j) {
            CHECK(bins(i, j) == bins(j, i));
            CHECK(bins(i, j) >= 0);
            CHECK(bins(i, j) <= 63);
        }
    }
}

TEST_CASE("tm_proxy identity and rigid motion") {
    Rng rng(13);
    auto a = random_coil(50, rng);
    CHECK(tm_proxy(a, a) == doctest::Approx(1.0));
    const Rotation r = random_rotation(rng);
    Backbone b{(a.coords * r.matrix.transpose()).eval()};
    CHECK(tm_proxy(a, b) == doctest::Approx(1.0).epsilon(1e-6));
}

TEST_CASE("tm_proxy low for random coils") {
    Rng rng(29);
    auto a = ideal_helix(100);
    int low = 0;
    for (int trial = 0; trial < 100; ++trial) {
        auto b = random_coil(100, rng);
        if (tm_proxy(a, b) < 0.3) ++low;
    }
    CHECK(low >= 95);
}

TEST_CASE("tm_proxy symmetric") {
    Rng rng(31);
    for (int trial = 0; trial < 10; ++trial) {
        auto a = random_coil(40, rng);
        auto b = random_coil(40, rng);
        CHECK(std::abs(tm_proxy(a, b) - tm_proxy(b, a)) < 1e-9);
    }
}

TEST_CASE("tm_proxy rejects short chains") {
    Rng rng(37);
    auto a = random_coil(10, rng);
    CHECK_THROWS(tm_proxy(a, a));
}

TEST_CASE("fold label hierarchy") {
    FoldLabel ok{1, 2, 3};
    CHECK(ok.hierarchy_consistent());
    FoldLabel bad;
    bad.t = 3;
    CHECK(!bad.hierarchy_consistent());
    FoldLabel c_only{1, std::nullopt, std::nullopt};
    CHECK(c_only.hierarchy_consistent());
}

TEST_CASE("backbone validation") {
    Coords c(1, 3);
    c.setZero();
    CHECK_THROWS(Backbone{c}.validate());
    Coords d(3, 3);
    d.setZero();
    d(1, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS(Backbone{d}.validate());
}
