#include "chainflow/geom.hpp"

#include <Eigen/SVD>
#include <algorithm>
#include <cmath>

namespace chainflow {

void Backbone::validate() const {
    if (coords.rows() < 2) throw std::invalid_argument("backbone needs L >= 2");
    if (!coords.allFinite()) throw std::invalid_argument("backbone has non-finite coords");
}

bool Rotation::is_valid(double tol) const {
    const Eigen::Matrix3d err = matrix.transpose() * matrix - Eigen::Matrix3d::Identity();
    if (err.cwiseAbs().maxCoeff() > tol) return false;
    return std::abs(matrix.determinant() - 1.0) <= tol;
}

void StructureRecord::validate() const {
    backbone.validate();
    for (const auto& l : labels) {
        if (!l.hierarchy_consistent()) throw std::invalid_argument("inconsistent fold label");
    }
    if (per_residue_confidence) {
        if (per_residue_confidence->size() != backbone.length())
            throw std::invalid_argument("confidence length mismatch");
        if (per_residue_confidence->minCoeff() < 0.0 || per_residue_confidence->maxCoeff() > 100.0)
            throw std::invalid_argument("confidence outside [0,100]");
    }
}

Backbone center_backbone(const Backbone& b, const std::vector<bool>* mask) {
    Eigen::RowVector3d centroid = Eigen::RowVector3d::Zero();
    if (mask) {
        if (static_cast<int>(mask->size()) != b.length())
            throw std::invalid_argument("mask length mismatch");
        int n = 0;
        for (int i = 0; i < b.length(); ++i) {
            if ((*mask)[i]) {
                centroid += b.coords.row(i);
                ++n;
            }
        }
        if (n == 0) throw std::invalid_argument("mask selects no residues");
        centroid /= static_cast<double>(n);
    } else {
        centroid = b.coords.colwise().mean();
    }
    Backbone out;
    out.coords = b.coords.rowwise() - centroid;
    return out;
}

Rotation random_rotation(Rng& rng) {
    // Shoemake's uniform quaternion method.
    const double u1 = rng.uniform();
    const double u2 = rng.uniform();
    const double u3 = rng.uniform();
    const double sq1 = std::sqrt(1.0 - u1), sq2 = std::sqrt(u1);
    const double qx = sq1 * std::sin(2.0 * M_PI * u2);
    const double qy = sq1 * std::cos(2.0 * M_PI * u2);
    const double qz = sq2 * std::sin(2.0 * M_PI * u3);
    const double qw = sq2 * std::cos(2.0 * M_PI * u3);
    Rotation r;
    r.matrix = Eigen::Quaterniond(qw, qx, qy, qz).toRotationMatrix();
    return r;
}

AlignResult kabsch_align(const Backbone& a, const Backbone& b) {
    if (a.length() != b.length()) throw std::invalid_argument("kabsch: length mismatch");
    if (a.length() < 3) throw std::invalid_argument("kabsch: need L >= 3");
    const Coords ac = center_backbone(a).coords;
    const Coords bc = center_backbone(b).coords;

    const Eigen::Matrix3d h = bc.transpose() * ac;
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
    Eigen::Matrix3d d = Eigen::Matrix3d::Identity();
    // Reflection correction keeps the result in SO(3) even for degenerate input.
    d(2, 2) = (svd.matrixV() * svd.matrixU().transpose()).determinant() < 0.0 ? -1.0 : 1.0;

    AlignResult res;
    res.rotation.matrix = svd.matrixV() * d * svd.matrixU().transpose();
    const Coords aligned = bc * res.rotation.matrix.transpose();
    res.rmsd = std::sqrt((ac - aligned).squaredNorm() / static_cast<double>(a.length()));
    return res;
}

double radius_of_gyration(const Backbone& b) {
    if (b.length() < 2) throw std::invalid_argument("rgyr: need L >= 2");
    const Coords c = center_backbone(b).coords;
    return std::sqrt(c.squaredNorm() / static_cast<double>(b.length()));
}

int distance_bin(double d, int n_bins, double d_min, double d_max) {
    if (d < d_min) return 0;
    if (d > d_max) return n_bins - 1;
    const double width = (d_max - d_min) / static_cast<double>(n_bins - 2);
    int k = 1 + static_cast<int>((d - d_min) / width);
    return std::min(k, n_bins - 1);
}

Eigen::MatrixXi pair_distance_bins(const Backbone& b, int n_bins, double d_min, double d_max) {
    if (n_bins < 2 || !(d_min < d_max)) throw std::invalid_argument("bad bin spec");
    const int n = b.length();
    Eigen::MatrixXi bins(n, n);
    for (int i = 0; i < n; ++i) {
        bins(i, i) = 0;
        for (int j = i + 1; j < n; ++j) {
            const double d = (b.coords.row(i) - b.coords.row(j)).norm();
            const int k = distance_bin(d, n_bins, d_min, d_max);
            bins(i, j) = k;
            bins(j, i) = k;
        }
    }
    return bins;
}

namespace {

double tm_one_direction(const Backbone& a, const Backbone& b) {
    const int n = a.length();
    const double d0 = std::max(1.24 * std::cbrt(static_cast<double>(n) - 15.0) - 1.8, 0.5);
    const Coords ac = center_backbone(a).coords;
    const Coords bc = center_backbone(b).coords;
    const AlignResult al = kabsch_align(a, b);
    const Coords aligned = bc * al.rotation.matrix.transpose();
    double s = 0.0;
    for (int i = 0; i < n; ++i) {
        const double d = (ac.row(i) - aligned.row(i)).norm();
        s += 1.0 / (1.0 + (d / d0) * (d / d0));
    }
    return s / static_cast<double>(n);
}

}  // namespace

double tm_proxy(const Backbone& a, const Backbone& b) {
    if (a.length() != b.length()) throw std::invalid_argument("tm_proxy: length mismatch");
    if (a.length() < 15) throw std::invalid_argument("tm_proxy: need L >= 15");
    return 0.5 * (tm_one_direction(a, b) + tm_one_direction(b, a));
}

double bond_angle(const Eigen::RowVector3d& a, const Eigen::RowVector3d& b,
                  const Eigen::RowVector3d& c) {
    const Eigen::RowVector3d u = (a - b).normalized();
    const Eigen::RowVector3d v = (c - b).normalized();
    return std::acos(std::clamp(u.dot(v), -1.0, 1.0));
}

double signed_dihedral(const Eigen::RowVector3d& a, const Eigen::RowVector3d& b,
                       const Eigen::RowVector3d& c, const Eigen::RowVector3d& d) {
    const Eigen::RowVector3d b1 = b - a, b2 = c - b, b3 = d - c;
    const Eigen::RowVector3d n1 = b1.cross(b2), n2 = b2.cross(b3);
    const Eigen::RowVector3d m1 = n1.cross(b2.normalized());
    return std::atan2(m1.dot(n2), n1.dot(n2));
}

}  // namespace chainflow
