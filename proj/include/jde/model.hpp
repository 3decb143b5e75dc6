#pragma once

// Generative model of the parcel-based joint detection-estimation problem:
//
//   y_j = sum_m a_j^m X_m h + P l_j + e_j,   e_j ~ N(0, Gamma_j^{-1})
//
// with a smoothness prior on the HRF h, a Gaussian mixture prior on the
// response levels a_j^m and a Potts prior on the activation classes.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace jde {

using Eigen::MatrixXd;
using Eigen::MatrixXi;
using Eigen::VectorXd;

using Coord = std::array<int, 3>;

struct Condition {
    std::string name;
    std::vector<double> onsets;  // seconds, ascending
};

struct Paradigm {
    std::vector<Condition> conditions;
    double session_length = 0.0;  // seconds

    int size() const { return static_cast<int>(conditions.size()); }
    // Throws InvalidParadigm.
    void validate() const;
};

/// Binary stimulus matrices X_m, one N x (D+1) block per condition.
struct DesignMatrix {
    int scans = 0;
    int order = 0;  // D; the HRF has D+1 taps
    double tr = 0.0;
    double dt = 0.0;
    std::vector<MatrixXd> x;

    int conditions() const { return static_cast<int>(x.size()); }
    int free_taps() const { return order - 1; }
    /// Columns 1..D-1 of X_m, the part acting on the unconstrained taps.
    MatrixXd interior(int m) const { return x[m].middleCols(1, order - 1); }
};

DesignMatrix build_design_matrix(const Paradigm& paradigm, int scans, double tr, double dt, int order);

/// Discrete cosine drift basis, constant column first, orthonormal columns.
MatrixXd build_drift_basis(int scans, double tr, double cutoff_period);

/// Second-order finite-difference operator on the D-1 interior taps.
MatrixXd second_difference(int order);

/// R = dt^4 (D2^t D2)^{-1}, the (D-1)x(D-1) covariance kernel of the HRF prior.
MatrixXd build_hrf_prior(int order, double dt);

struct HrfPrior {
    int order = 0;
    double dt = 0.0;
    MatrixXd r;
    MatrixXd r_inv;  // D2^t D2 / dt^4, exact
    double log_det_r = 0.0;
};

HrfPrior make_hrf_prior(int order, double dt);

struct HrfModel {
    double dt = 0.0;
    VectorXd taps;  // D+1 values, taps(0) == taps(D) == 0

    int order() const { return static_cast<int>(taps.size()) - 1; }
    VectorXd interior() const { return taps.segment(1, taps.size() - 2); }
    static HrfModel from_interior(const VectorXd& interior, double dt);
};

/// Difference-of-gammas response peaking near 5 s, scaled to unit peak,
/// endpoints forced to zero.
HrfModel canonical_hrf(int order, double dt);

/// Symmetric tridiagonal matrix; O(N) products and quadratic forms.
struct SymTridiag {
    VectorXd diag;
    VectorXd off;  // size n-1

    int size() const { return static_cast<int>(diag.size()); }
    VectorXd apply(const VectorXd& v) const;
    double quad(const VectorXd& u, const VectorXd& v) const;
    double log_det() const;  // requires positive definite
    MatrixXd dense() const;
};

/// AR(1) precision Gamma = Lambda(rho) / sigma2. Throws Nonstationary for |rho| >= 1.
SymTridiag ar1_precision(double rho, double sigma2, int n);

/// log|Gamma| = -n log(sigma2) + log(1 - rho^2).
double ar1_log_det(double rho, double sigma2, int n);

// Lambda(rho) = I + rho^2 B + rho C with B = diag(0,1,...,1,0) and C = -(sub + super
// diagonal). Every bilinear form splits into three rho-free pieces.
struct Ar1Forms {
    double i = 0.0;
    double b = 0.0;
    double c = 0.0;

    double at(double rho) const { return i + rho * rho * b + rho * c; }
};

Ar1Forms ar1_forms(const Eigen::Ref<const VectorXd>& u, const Eigen::Ref<const VectorXd>& v);
VectorXd apply_b(const Eigen::Ref<const VectorXd>& v);
VectorXd apply_c(const Eigen::Ref<const VectorXd>& v);
VectorXd apply_lambda(double rho, const Eigen::Ref<const VectorXd>& v);

struct MixtureParams {
    int classes = 2;  // I: 1 non-activated, 2 activated, 3 deactivated
    MatrixXd mean;    // M x I, mean(m, 0) == 0
    MatrixXd var;     // M x I, > 0

    int conditions() const { return static_cast<int>(mean.rows()); }
    void validate() const;
};

struct NoiseParams {
    VectorXd sigma2;  // innovation variance per voxel
    VectorXd rho;     // AR(1) coefficient per voxel, zero for white noise
};

/// Labels q_j^m in 1..I, stored M x J.
struct LabelField {
    int classes = 2;
    MatrixXi labels;

    int conditions() const { return static_cast<int>(labels.rows()); }
    int voxels() const { return static_cast<int>(labels.cols()); }
    void validate() const;
};

struct VoxelGraph {
    std::vector<std::vector<int>> neighbors;

    int size() const { return static_cast<int>(neighbors.size()); }
    std::size_t edge_count() const;
    bool symmetric() const;
    /// Unordered edges (j < k).
    std::vector<std::pair<int, int>> edges() const;
};

/// 6-connectivity over integer coordinates. Throws Invariant on duplicates.
VoxelGraph build_graph(const std::vector<Coord>& coords);

/// Regular nx x ny x nz block in raster order (x fastest within a row of the
/// first axis; voxel j = (a * ny + b) * nz + c for coordinate (a, b, c)).
std::vector<Coord> grid_coords(int nx, int ny, int nz);

struct ParcelDataset {
    int parcel_id = 0;
    MatrixXd y;  // N x J
    std::vector<Coord> coords;
    VoxelGraph graph;
    MatrixXd drift;  // P, N x O
    double drift_cutoff = 128.0;
    Paradigm paradigm;
    DesignMatrix design;

    int scans() const { return static_cast<int>(y.rows()); }
    int voxels() const { return static_cast<int>(y.cols()); }
    int conditions() const { return design.conditions(); }
    int order() const { return design.order; }
    /// Checks every type invariant; throws Invariant / DimensionMismatch.
    void validate() const;
};

ParcelDataset make_dataset(int parcel_id, MatrixXd y, std::vector<Coord> coords, const Paradigm& paradigm,
                           double tr, double dt, int order, double drift_cutoff);

/// Gaussian log-density of y_j under the observation model.
double log_likelihood(const VectorXd& y, const VectorXd& nrl, const VectorXd& hrf_taps, const VectorXd& drift_coeffs,
                      double sigma2, double rho, const DesignMatrix& design, const MatrixXd& drift_basis);

struct ModelParams {
    NoiseParams noise;
    MatrixXd drift_coeffs;  // O x J
    MixtureParams mixture;
    double v_h = 1.0;
    VectorXd beta;  // per condition
};

struct LogJoint {
    double value = 0.0;
    bool potts_exact = true;  // false when the mean-field surrogate stood in for log Z
};

/// log p(Y, A, h, Q; Theta) with h given by its D+1 taps and A as M x J.
LogJoint log_joint(const ParcelDataset& data, const MatrixXd& nrls, const VectorXd& hrf_taps,
                   const LabelField& labels, const ModelParams& theta);

}  // namespace jde
