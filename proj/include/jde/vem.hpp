#pragma once

// Variational EM for one parcel. The posterior factorises over the HRF, the
// per-voxel response-level vectors and the per-condition label fields:
//
//   q(h, A, Q) = q_H(h) prod_j q_A(a_j) prod_m q_Q(q^m)
//
// Each iteration runs E-H, E-A, E-Q and then the M-steps for (mu, v), v_h,
// beta and (drift, noise).

#include <optional>
#include <string>
#include <vector>

#include "jde/model.hpp"
#include "jde/potts.hpp"

namespace jde {

enum class NoiseMode { White, Ar1 };

const char* to_string(NoiseMode mode);
NoiseMode noise_mode_from_string(const std::string& s);

struct VemConfig {
    NoiseMode noise_mode = NoiseMode::White;
    int classes = 2;
    int max_iters = 500;
    double tol_h = 1e-5;
    double tol_a = 1e-5;
    double lambda_vh = 0.0;    // rate of the exponential prior on v_h, 0 = flat
    double lambda_beta = 0.0;  // rate of the exponential prior on beta, 0 = flat
    double beta_max = 1.5;
    double beta_step = 0.05;
    bool estimate_beta = true;
    bool estimate_vh = true;
    double jitter = 1e-8;  // relative to the mean diagonal
    double v_min = 1e-8;
    double empty_class_eps = 1e-8;
    int eq_sweeps = 1;
    int ar1_max_inner = 50;
    double ar1_tol = 1e-8;
    double rho_max = 0.95;
    std::uint64_t seed = 0;
    // Initialisation knobs.
    double beta_init = 0.5;
    double vh_init = 0.1;
    double hrf_init_scale = 1.0;
    double init_label_prob = 0.9;

    void validate() const;
};

struct PosteriorState {
    VectorXd m_h;                  // D-1 interior taps
    MatrixXd sigma_h;              // (D-1) x (D-1)
    MatrixXd m_a;                  // M x J
    std::vector<MatrixXd> sigma_a; // J blocks of M x M
    std::vector<potts::SiteMarginals> q;  // M blocks of J x I
    MatrixXd drift;                // O x J
    NoiseParams noise;
    MixtureParams mixture;
    double v_h = 0.1;
    VectorXd beta;                 // per condition

    int conditions() const { return static_cast<int>(m_a.rows()); }
    int voxels() const { return static_cast<int>(m_a.cols()); }
    VectorXd hrf_taps() const;     // D+1 taps with zero endpoints
    /// Activated-class marginal for condition m (J-vector).
    VectorXd ppm(int m) const;
};

struct TraceEntry {
    double free_energy = 0.0;
    double c_h = 0.0;
    double c_a = 0.0;
    double wall_seconds = 0.0;
};

struct NormalizedView {
    VectorXd hrf;    // D+1 taps, unit value at the largest-magnitude tap
    MatrixXd nrls;   // M x J, rescaled inversely
    double scale = 1.0;
};

NormalizedView normalized_view(const VectorXd& hrf_taps, const MatrixXd& nrls);

struct VemReport {
    int parcel_id = 0;
    NoiseMode noise_mode = NoiseMode::White;
    double dt = 0.0;
    PosteriorState state;
    int iterations = 0;
    std::vector<TraceEntry> trace;
    bool converged = false;
    bool free_energy_exact = true;  // false when the Potts term used the surrogate
    std::vector<std::string> warnings;

    NormalizedView normalized() const { return normalized_view(state.hrf_taps(), state.m_a); }
};

/// Relative squared change ||x - x_prev||^2 / ||x_prev||^2; 0 when both vanish,
/// infinity when only the previous value does.
double relative_change(const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& x_prev);

/// One engine per parcel; the dataset must outlive it.
class VemEngine {
public:
    VemEngine(const ParcelDataset& data, VemConfig config);

    const ParcelDataset& data() const { return *data_; }
    const VemConfig& config() const { return config_; }
    const HrfPrior& prior() const { return prior_; }
    PosteriorState& state() { return state_; }
    const PosteriorState& state() const { return state_; }
    const std::vector<std::string>& warnings() const { return warnings_; }
    void set_iteration(int r) { iteration_ = r; }

    /// Builds the initial state (deterministic).
    void initialize();

    void e_h_step();
    void e_a_step();
    void e_q_step();
    void m_mixture_step();
    void m_vh_step();
    void m_beta_step();
    void m_drift_noise_step();

    /// One full pass in the fixed order; returns (c_H, c_A).
    std::pair<double, double> iterate();

    double free_energy() const;
    /// True when the Potts contribution to free_energy() is exact (all beta = 0).
    bool free_energy_exact() const;

    /// Field used by E-Q for condition m: J x I.
    MatrixXd label_field(int m) const;

    VemReport run();

private:
    // y_j - P l_j for every voxel, N x J.
    MatrixXd residual_data() const;
    // g_m = X_m h for the current mean, N x M.
    MatrixXd hrf_regressors() const;
    // E[a a^t] for voxel j.
    MatrixXd second_moment_a(int j) const;
    // Factorisation with one jittered retry, returns the inverse.
    MatrixXd spd_inverse(const MatrixXd& precision, const char* step, double* log_det = nullptr) const;

    void warn(std::string message);

    const ParcelDataset* data_;
    VemConfig config_;
    HrfPrior prior_;
    std::vector<MatrixXd> xi_;  // interior design blocks, N x (D-1)
    // K_*(m, m') = Xi_m^t {I, B, C} Xi_m', indexed m * M + m'.
    std::vector<MatrixXd> k_i_, k_b_, k_c_;
    PosteriorState state_;
    int iteration_ = 0;
    std::vector<std::string> warnings_;
};

VemReport run_vem(const ParcelDataset& data, const VemConfig& config);

// Closed-form M-step pieces, exposed for testing.

/// v_h maximising -(D-1)/2 log v - C/(2v) - lambda v (lambda = 0: C/(D-1)).
double vh_update(double c, int free_taps, double lambda);

using RowRef = Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>>;

/// Weighted class moments for one condition; keeps `previous` values for
/// classes with total weight below eps and reports them in `empty`.
void mixture_moments(const VectorXd& mean_a, const VectorXd& var_a, const MatrixXd& q, double v_min, double eps,
                     RowRef mu, RowRef v, std::vector<int>* empty);

/// Root of (1 - rho^2)(2 rho qb + qc) + 2 sigma2 rho on [-rho_max, rho_max]; the
/// clamped end when there is none inside.
double ar1_rho_update(double qb, double qc, double sigma2, double rho_max);

}  // namespace jde
