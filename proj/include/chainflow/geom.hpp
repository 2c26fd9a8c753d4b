#pragma once

#include <Eigen/Dense>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "chainflow/rng.hpp"

namespace chainflow {

using Coords = Eigen::Matrix<double, Eigen::Dynamic, 3>;  // L x 3, Angstrom

// A chain of C-alpha coordinates. The object every module operates on.
struct Backbone {
    Coords coords;

    Backbone() = default;
    explicit Backbone(Coords c) : coords(std::move(c)) {}

    int length() const { return static_cast<int>(coords.rows()); }

    void validate() const;  // throws on non-finite coords or L < 2
};

// Hierarchical C/A/T fold class label; unset levels mean "no label".
struct FoldLabel {
    std::optional<int> c;
    std::optional<int> a;
    std::optional<int> t;

    bool hierarchy_consistent() const {
        if (t && !a) return false;
        if (a && !c) return false;
        return true;
    }

    bool empty() const { return !c && !a && !t; }

    bool operator==(const FoldLabel&) const = default;
};

struct Rotation {
    Eigen::Matrix3d matrix = Eigen::Matrix3d::Identity();

    // R^T R = I and det = 1, both within tol.
    bool is_valid(double tol = 1e-9) const;
};

struct StructureRecord {
    Backbone backbone;
    std::vector<FoldLabel> labels;  // multi-domain records carry several
    std::string source_id;
    std::optional<Eigen::VectorXd> per_residue_confidence;  // pLDDT-like, [0,100]
    bool chain_break = false;

    void validate() const;
};

// Subtract the centroid (optionally computed over a residue mask) from all
// coordinates. mask, if given, must have at least one true entry.
Backbone center_backbone(const Backbone& b,
                         const std::vector<bool>* mask = nullptr);

// Uniform draw from SO(3).
Rotation random_rotation(Rng& rng);

struct AlignResult {
    Rotation rotation;  // applied to (centered) B to match (centered) A
    double rmsd = 0.0;
};

// Optimal superposition of two equal-length chains (both centered
// internally), SVD-based with determinant sign correction.
AlignResult kabsch_align(const Backbone& a, const Backbone& b);

double radius_of_gyration(const Backbone& b);

// Distance binning: bin 0 holds d < d_min, last bin d > d_max, interior
// bins left-closed/right-open with uniform width (d_max-d_min)/(n_bins-2).
Eigen::MatrixXi pair_distance_bins(const Backbone& b, int n_bins, double d_min,
                                   double d_max);
int distance_bin(double d, int n_bins, double d_min, double d_max);

// Fixed-correspondence TM-score proxy, symmetrized over both alignment
// directions. Requires equal lengths, L >= 15.
double tm_proxy(const Backbone& a, const Backbone& b);

// Angle at b in radians, [0, pi].
double bond_angle(const Eigen::RowVector3d& a, const Eigen::RowVector3d& b,
                  const Eigen::RowVector3d& c);

// Signed dihedral of a-b-c-d in radians, (-pi, pi]; flips sign under
// reflection, invariant under rotation.
double signed_dihedral(const Eigen::RowVector3d& a, const Eigen::RowVector3d& b,
                       const Eigen::RowVector3d& c, const Eigen::RowVector3d& d);

}  // namespace chainflow
