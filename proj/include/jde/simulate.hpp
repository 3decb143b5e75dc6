#pragma once

// Artificial parcels drawn from the generative model: labels (masks or Potts
// samples), mixture NRLs, HRF convolution, cosine drift and white/AR noise.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "jde/model.hpp"

namespace jde::sim {

enum class NoiseKind { White, Ar1, Ar2 };

const char* to_string(NoiseKind kind);
NoiseKind noise_kind_from_string(const std::string& s);

struct NoiseSpec {
    NoiseKind kind = NoiseKind::White;
    double variance = 1.0;  // innovation variance
    double rho = 0.0;       // AR(1)
    double phi1 = 0.0;      // AR(2)
    double phi2 = 0.0;
};

/// Stable AR(2) with the requested lag-1 autocorrelation: phi1 = lag1 (1 - phi2).
NoiseSpec ar2_from_lag1(double lag1, double phi2, double variance);

/// Seed for parcel `parcel_id` of a run seeded with `seed`.
inline std::uint64_t parcel_seed(std::uint64_t seed, int parcel_id) {
    return seed ^ static_cast<std::uint64_t>(parcel_id);
}

/// Independent sub-stream seed (splitmix64 of seed + stream).
std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream);

class PottsGibbsSampler {
public:
    PottsGibbsSampler(const VoxelGraph& graph, double beta, int classes, std::uint64_t seed);

    /// One sequential raster-order sweep.
    void sweep();
    const Eigen::VectorXi& labels() const { return labels_; }

private:
    const VoxelGraph* graph_;
    double beta_;
    int classes_;
    std::mt19937_64 rng_;
    Eigen::VectorXi labels_;  // 1-based
};

LabelField sample_potts_labels(const VoxelGraph& graph, const VectorXd& beta, int classes, int sweeps,
                               std::uint64_t seed);

struct MaskLabels {
    LabelField labels;
    std::vector<Coord> coords;
    int rows = 0;
    int cols = 0;
};

/// One CSV integer grid per condition; voxels in row-major reading order with
/// coordinates (row, col, 0).
MaskLabels load_mask_labels(const std::vector<std::filesystem::path>& mask_files, int classes);

MatrixXd sample_nrls(const LabelField& labels, const MixtureParams& mixture, std::uint64_t seed);

/// N x J matrix, one independent realisation per column, stationary start.
MatrixXd sample_noise(const NoiseSpec& spec, int scans, int voxels, std::uint64_t seed);

MatrixXd sample_drift_coeffs(int basis_size, int voxels, double stddev, std::uint64_t seed);

/// Events spread evenly over the session with spacing `isi` (a value <= 0 means
/// session_length / total events), each shifted by U(-jitter, jitter); the
/// condition of each slot comes from a seeded balanced shuffle.
Paradigm interleaved_paradigm(const std::vector<std::string>& names, int events_per_condition, double session_length,
                              double isi, double jitter, std::uint64_t seed);

struct GroundTruth {
    LabelField labels;
    MatrixXd nrls;  // M x J
    HrfModel hrf;
    MatrixXd drift_coeffs;  // O x J
    NoiseSpec noise;
    MatrixXd noise_samples;  // N x J
    MixtureParams mixture;
    VectorXd beta;  // Potts parameters used to draw labels, empty for masks
    std::uint64_t seed = 0;
};

struct SimulatedParcel {
    ParcelDataset data;
    GroundTruth truth;
};

/// Y = sum_m a^m X_m h + P L + E.
SimulatedParcel simulate_parcel(int parcel_id, const Paradigm& paradigm, const HrfModel& hrf, const LabelField& labels,
                                const std::vector<Coord>& coords, const MixtureParams& mixture,
                                const MatrixXd& drift_coeffs, const NoiseSpec& noise, int scans, double tr,
                                double drift_cutoff, std::uint64_t seed);

/// Stimulus-induced component sum_m a_j^m X_m h, N x J.
MatrixXd stimulus_component(const DesignMatrix& design, const MatrixXd& nrls, const VectorXd& hrf_taps);

double compute_cnr(double mu1, double v1, double mu2, double v2);

/// 10 log10 of stimulus energy over noise energy.
double compute_snr(const MatrixXd& stimulus, const MatrixXd& noise);

struct LabelSource {
    std::vector<std::filesystem::path> masks;
    // Potts-sampled labels when `masks` is empty.
    VectorXd beta;
    std::array<int, 3> shape{20, 20, 1};
    int sweeps = 100;
};

struct ParadigmSource {
    std::optional<std::filesystem::path> file;  // CSV condition,onset_seconds
    std::vector<std::string> names{"m1", "m2"};
    int events_per_condition = 30;
    double isi = 0.0;
    double jitter = 0.25;
};

struct SimulationConfig {
    std::uint64_t seed = 1;
    int parcels = 1;
    int scans = 268;
    double tr = 2.0;
    double dt = 0.5;
    int order = 50;
    double drift_cutoff = 128.0;
    double drift_std = 10.0;
    ParadigmSource paradigm;
    LabelSource labels;
    MixtureParams mixture;
    NoiseSpec noise;
};

/// The paradigm shared by all parcels of a run.
Paradigm make_paradigm(const SimulationConfig& config);

SimulatedParcel simulate_from_config(const SimulationConfig& config, const Paradigm& paradigm, int parcel_id);

}  // namespace jde::sim
