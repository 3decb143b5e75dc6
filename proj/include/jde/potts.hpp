#pragma once

// Potts field utilities: p(q) = Z(beta)^{-1} exp(beta U(q)), U(q) = number of
// agreeing neighbour pairs.

#include <Eigen/Dense>

#include "jde/model.hpp"

namespace jde::potts {

/// Per-site class probabilities, one row per site (J x I).
using SiteMarginals = MatrixXd;

bool on_simplex(const SiteMarginals& p, double tol = 1e-12);

/// Number of agreeing neighbour pairs; labels are 1-based.
double energy(const Eigen::VectorXi& labels, const VoxelGraph& graph);

/// Largest configuration count the enumeration routines accept.
inline constexpr double kMaxConfigurations = 16777216.0;  // 2^24

struct Enumeration {
    double log_z = 0.0;
    double mean_energy = 0.0;   // d log Z / d beta
    SiteMarginals marginals;    // exact site marginals
};

/// Exhaustive enumeration of exp(beta U(q) + sum_j field_j(q_j)). `field` may be
/// empty (zero field). Throws GraphTooLarge past 2^24 configurations.
Enumeration enumerate(const VoxelGraph& graph, double beta, int classes, const MatrixXd& field = MatrixXd());

double exact_log_partition(const VoxelGraph& graph, double beta, int classes);

/// Sequential raster-order mean-field sweeps:
///   p_j(i) <- exp(field_j(i) + beta sum_{k~j} p_k(i)), normalised per site.
SiteMarginals mean_field_sweep(const SiteMarginals& marginals, const MatrixXd& field, double beta,
                               const VoxelGraph& graph, int sweeps = 1);

/// sum_{j~k} sum_i p_j(i) p_k(i): E[U] under the factorised distribution.
double expected_agreement(const SiteMarginals& marginals, const VoxelGraph& graph);

// Mean-field surrogate of the log-partition: neighbours are frozen at the current
// marginals, so each site sees the local field n_j(i) = sum_{k~j} p_k(i) and
//   log Z~(beta) = J log I + 1/2 sum_j [ log sum_i exp(beta n_j(i)) - log I ].
// The 1/2 undoes the double counting of pairs; log Z~(0) equals the exact J log I.
double surrogate_log_partition(const SiteMarginals& marginals, const VoxelGraph& graph, double beta);

/// d log Z~ / d beta = 1/2 sum_j sum_i softmax(beta n_j)(i) n_j(i).
double surrogate_agreement(const SiteMarginals& marginals, const VoxelGraph& graph, double beta);

struct BetaOptions {
    double step = 0.05;
    double beta_max = 1.5;
    double tol = 1e-6;  // on the step length
    int max_iters = 1000;
};

struct BetaEstimate {
    double beta = 0.0;
    int iterations = 0;
    bool converged = true;
};

/// Projected gradient ascent on [0, beta_max] of
///   beta -> -log Z~(beta) + beta (expected_agreement - lambda).
/// Steps of length `step` along the gradient sign, halved whenever the
/// objective fails to increase.
BetaEstimate estimate_beta(const SiteMarginals& marginals, const VoxelGraph& graph, double beta_init, double lambda,
                           const BetaOptions& options = {});

double beta_objective(const SiteMarginals& marginals, const VoxelGraph& graph, double beta, double lambda);

}  // namespace jde::potts
