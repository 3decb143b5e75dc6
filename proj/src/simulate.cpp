#include "jde/simulate.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "jde/errors.hpp"
#include "jde/io.hpp"

namespace jde::sim {

const char* to_string(NoiseKind kind) {
    switch (kind) {
        case NoiseKind::White: return "white";
        case NoiseKind::Ar1: return "ar1";
        case NoiseKind::Ar2: return "ar2";
    }
    return "white";
}

NoiseKind noise_kind_from_string(const std::string& s) {
    if (s == "white") return NoiseKind::White;
    if (s == "ar1") return NoiseKind::Ar1;
    if (s == "ar2") return NoiseKind::Ar2;
    fail(ErrorKind::Config, "unknown noise kind '" + s + "'");
}

NoiseSpec ar2_from_lag1(double lag1, double phi2, double variance) {
    NoiseSpec s;
    s.kind = NoiseKind::Ar2;
    s.variance = variance;
    s.phi2 = phi2;
    s.phi1 = lag1 * (1.0 - phi2);
    return s;
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

PottsGibbsSampler::PottsGibbsSampler(const VoxelGraph& graph, double beta, int classes, std::uint64_t seed)
    : graph_(&graph), beta_(beta), classes_(classes), rng_(seed), labels_(graph.size()) {
    require(beta >= 0.0, ErrorKind::InvalidArgument, "Potts beta must be nonnegative");
    require(classes >= 2, ErrorKind::InvalidArgument, "Potts needs at least two classes");
    std::uniform_int_distribution<int> uniform(1, classes);
    for (int j = 0; j < graph.size(); ++j) labels_(j) = uniform(rng_);
}

void PottsGibbsSampler::sweep() {
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<double> w(static_cast<std::size_t>(classes_));
    for (int j = 0; j < graph_->size(); ++j) {
        std::fill(w.begin(), w.end(), 0.0);
        for (int k : graph_->neighbors[j]) w[static_cast<std::size_t>(labels_(k) - 1)] += 1.0;
        const double mx = *std::max_element(w.begin(), w.end());
        double total = 0.0;
        for (double& x : w) {
            x = std::exp(beta_ * (x - mx));
            total += x;
        }
        double u = unif(rng_) * total;
        int pick = classes_;
        for (int i = 0; i < classes_; ++i) {
            u -= w[static_cast<std::size_t>(i)];
            if (u < 0.0) {
                pick = i + 1;
                break;
            }
        }
        labels_(j) = pick;
    }
}

LabelField sample_potts_labels(const VoxelGraph& graph, const VectorXd& beta, int classes, int sweeps,
                               std::uint64_t seed) {
    require(sweeps >= 1, ErrorKind::InvalidArgument, "at least one sweep required");
    LabelField out;
    out.classes = classes;
    out.labels.resize(beta.size(), graph.size());
    for (Eigen::Index m = 0; m < beta.size(); ++m) {
        PottsGibbsSampler sampler(graph, beta(m), classes, stream_seed(seed, static_cast<std::uint64_t>(m)));
        for (int s = 0; s < sweeps; ++s) sampler.sweep();
        out.labels.row(m) = sampler.labels().transpose();
    }
    return out;
}

MaskLabels load_mask_labels(const std::vector<std::filesystem::path>& mask_files, int classes) {
    require(!mask_files.empty(), ErrorKind::InvalidArgument, "no mask files");
    std::vector<std::vector<int>> grids;
    int rows = -1;
    int cols = -1;
    for (const auto& path : mask_files) {
        const auto grid = io::read_int_grid(path);
        const int r = static_cast<int>(grid.size());
        const int c = r > 0 ? static_cast<int>(grid.front().size()) : 0;
        if (rows < 0) {
            rows = r;
            cols = c;
        }
        require(r == rows && c == cols && r > 0 && c > 0, ErrorKind::Shape,
                "mask " + path.string() + " shape differs from the first mask");
        std::vector<int> flat;
        flat.reserve(static_cast<std::size_t>(r * c));
        for (const auto& row : grid) {
            require(static_cast<int>(row.size()) == cols, ErrorKind::Shape, "ragged mask " + path.string());
            for (int v : row) {
                require(v >= 1 && v <= classes, ErrorKind::Invariant,
                        "mask " + path.string() + " holds label " + std::to_string(v) + " outside 1.." +
                            std::to_string(classes));
                flat.push_back(v);
            }
        }
        grids.push_back(std::move(flat));
    }
    MaskLabels out;
    out.rows = rows;
    out.cols = cols;
    out.coords = grid_coords(rows, cols, 1);
    out.labels.classes = classes;
    out.labels.labels.resize(static_cast<Eigen::Index>(grids.size()), rows * cols);
    for (std::size_t m = 0; m < grids.size(); ++m) {
        for (int j = 0; j < rows * cols; ++j) out.labels.labels(static_cast<Eigen::Index>(m), j) = grids[m][j];
    }
    return out;
}

MatrixXd sample_nrls(const LabelField& labels, const MixtureParams& mixture, std::uint64_t seed) {
    labels.validate();
    require(mixture.conditions() == labels.conditions() && mixture.classes >= labels.classes,
            ErrorKind::DimensionMismatch, "mixture does not match label field");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    MatrixXd a(labels.conditions(), labels.voxels());
    for (int m = 0; m < labels.conditions(); ++m) {
        for (int j = 0; j < labels.voxels(); ++j) {
            const int i = labels.labels(m, j) - 1;
            a(m, j) = mixture.mean(m, i) + std::sqrt(mixture.var(m, i)) * normal(rng);
        }
    }
    return a;
}

MatrixXd sample_noise(const NoiseSpec& spec, int scans, int voxels, std::uint64_t seed) {
    require(spec.variance >= 0.0, ErrorKind::InvalidArgument, "noise variance must be nonnegative");
    const double sd = std::sqrt(spec.variance);
    if (spec.kind == NoiseKind::Ar1) {
        require(std::abs(spec.rho) < 1.0, ErrorKind::Nonstationary, "AR(1) requires |rho| < 1");
    }
    double g0 = 0.0;
    double g1 = 0.0;
    if (spec.kind == NoiseKind::Ar2) {
        const double p1 = spec.phi1;
        const double p2 = spec.phi2;
        require(std::abs(p2) < 1.0 && p1 + p2 < 1.0 && p2 - p1 < 1.0, ErrorKind::Nonstationary,
                "AR(2) coefficients outside the stationarity triangle");
        g0 = spec.variance * (1.0 - p2) / ((1.0 + p2) * ((1.0 - p2) * (1.0 - p2) - p1 * p1));
        g1 = g0 * p1 / (1.0 - p2);
    }
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    MatrixXd e(scans, voxels);
    for (int j = 0; j < voxels; ++j) {
        switch (spec.kind) {
            case NoiseKind::White:
                for (int n = 0; n < scans; ++n) e(n, j) = sd * normal(rng);
                break;
            case NoiseKind::Ar1: {
                e(0, j) = sd / std::sqrt(1.0 - spec.rho * spec.rho) * normal(rng);
                for (int n = 1; n < scans; ++n) e(n, j) = spec.rho * e(n - 1, j) + sd * normal(rng);
                break;
            }
            case NoiseKind::Ar2: {
                // (x0, x1) from the stationary bivariate law.
                const double z0 = normal(rng);
                const double z1 = normal(rng);
                const double s0 = std::sqrt(g0);
                e(0, j) = s0 * z0;
                if (scans > 1) {
                    const double r = g1 / g0;
                    e(1, j) = s0 * (r * z0 + std::sqrt(std::max(0.0, 1.0 - r * r)) * z1);
                }
                for (int n = 2; n < scans; ++n) {
                    e(n, j) = spec.phi1 * e(n - 1, j) + spec.phi2 * e(n - 2, j) + sd * normal(rng);
                }
                break;
            }
        }
    }
    return e;
}

MatrixXd sample_drift_coeffs(int basis_size, int voxels, double stddev, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    MatrixXd l(basis_size, voxels);
    for (int j = 0; j < voxels; ++j) {
        for (int o = 0; o < basis_size; ++o) l(o, j) = stddev * normal(rng);
    }
    return l;
}

Paradigm interleaved_paradigm(const std::vector<std::string>& names, int events_per_condition, double session_length,
                              double isi, double jitter, std::uint64_t seed) {
    require(!names.empty(), ErrorKind::InvalidParadigm, "no condition names");
    require(events_per_condition >= 0, ErrorKind::InvalidParadigm, "negative event count");
    require(session_length > 0.0, ErrorKind::InvalidParadigm, "session length must be positive");
    const int nc = static_cast<int>(names.size());
    int per = events_per_condition;
    if (isi > 0.0) per = static_cast<int>(std::floor(session_length / isi)) / nc;
    const int total = per * nc;
    const double spacing = isi > 0.0 ? isi : (total > 0 ? session_length / total : session_length);
    require(total == 0 || spacing * total <= session_length + 1e-9, ErrorKind::InvalidParadigm,
            "events do not fit in the session");
    require(jitter >= 0.0 && jitter < 0.5 * spacing, ErrorKind::InvalidParadigm, "jitter must be below half the ISI");

    std::mt19937_64 rng(seed);
    std::vector<int> order(static_cast<std::size_t>(total));
    for (int k = 0; k < total; ++k) order[static_cast<std::size_t>(k)] = k % nc;
    std::shuffle(order.begin(), order.end(), rng);
    std::uniform_real_distribution<double> shift(-jitter, jitter);

    Paradigm p;
    p.session_length = session_length;
    for (const auto& n : names) p.conditions.push_back({n, {}});
    for (int k = 0; k < total; ++k) {
        double t = (k + 0.5) * spacing + (jitter > 0.0 ? shift(rng) : 0.0);
        t = std::clamp(t, 0.0, std::nextafter(session_length, 0.0));
        p.conditions[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])].onsets.push_back(t);
    }
    for (auto& c : p.conditions) std::sort(c.onsets.begin(), c.onsets.end());
    return p;
}

MatrixXd stimulus_component(const DesignMatrix& design, const MatrixXd& nrls, const VectorXd& hrf_taps) {
    require(nrls.rows() == design.conditions(), ErrorKind::DimensionMismatch, "NRL rows != conditions");
    require(hrf_taps.size() == design.order + 1, ErrorKind::DimensionMismatch, "HRF tap count");
    MatrixXd g(design.scans, design.conditions());
    for (int m = 0; m < design.conditions(); ++m) g.col(m) = design.x[m] * hrf_taps;
    return g * nrls;
}

SimulatedParcel simulate_parcel(int parcel_id, const Paradigm& paradigm, const HrfModel& hrf, const LabelField& labels,
                                const std::vector<Coord>& coords, const MixtureParams& mixture,
                                const MatrixXd& drift_coeffs, const NoiseSpec& noise, int scans, double tr,
                                double drift_cutoff, std::uint64_t seed) {
    mixture.validate();
    labels.validate();
    require(labels.voxels() == static_cast<int>(coords.size()), ErrorKind::DimensionMismatch,
            "label field and coordinates disagree");
    require(labels.conditions() == paradigm.size(), ErrorKind::DimensionMismatch, "labels and paradigm disagree");
    require(hrf.taps(0) == 0.0 && hrf.taps(hrf.order()) == 0.0, ErrorKind::InvalidArgument,
            "HRF endpoints must be zero");

    const int nvox = labels.voxels();
    SimulatedParcel out;
    GroundTruth& t = out.truth;
    t.seed = seed;
    t.labels = labels;
    t.hrf = hrf;
    t.mixture = mixture;
    t.noise = noise;
    t.nrls = sample_nrls(labels, mixture, stream_seed(seed, 1));
    t.noise_samples = sample_noise(noise, scans, nvox, stream_seed(seed, 2));

    const DesignMatrix design = build_design_matrix(paradigm, scans, tr, hrf.dt, hrf.order());
    const MatrixXd drift = build_drift_basis(scans, tr, drift_cutoff);
    require(drift_coeffs.rows() == drift.cols() && drift_coeffs.cols() == nvox, ErrorKind::DimensionMismatch,
            "drift coefficients must be O x J");
    t.drift_coeffs = drift_coeffs;

    MatrixXd y = stimulus_component(design, t.nrls, hrf.taps);
    y += drift * drift_coeffs;
    y += t.noise_samples;

    out.data = make_dataset(parcel_id, std::move(y), coords, paradigm, tr, hrf.dt, hrf.order(), drift_cutoff);
    return out;
}

double compute_cnr(double mu1, double v1, double mu2, double v2) {
    require(v1 + v2 > 0.0, ErrorKind::InvalidArgument, "CNR needs a positive total variance");
    return 2.0 * (mu1 - mu2) * (mu1 - mu2) / (v1 + v2);
}

double compute_snr(const MatrixXd& stimulus, const MatrixXd& noise) {
    require(stimulus.rows() == noise.rows() && stimulus.cols() == noise.cols(), ErrorKind::DimensionMismatch,
            "stimulus and noise shapes differ");
    const double en = noise.squaredNorm();
    require(en > 0.0, ErrorKind::InvalidArgument, "SNR undefined for zero noise energy");
    return 10.0 * std::log10(stimulus.squaredNorm() / en);
}

Paradigm make_paradigm(const SimulationConfig& config) {
    const double session = config.scans * config.tr;
    if (config.paradigm.file) {
        Paradigm p = io::read_paradigm_csv(*config.paradigm.file, session);
        return p;
    }
    return interleaved_paradigm(config.paradigm.names, config.paradigm.events_per_condition, session,
                                config.paradigm.isi, config.paradigm.jitter, stream_seed(config.seed, 0x5eed));
}

SimulatedParcel simulate_from_config(const SimulationConfig& config, const Paradigm& paradigm, int parcel_id) {
    const std::uint64_t seed = parcel_seed(config.seed, parcel_id);
    const int classes = config.mixture.classes;
    LabelField labels;
    std::vector<Coord> coords;
    VectorXd beta;
    if (!config.labels.masks.empty()) {
        auto mask = load_mask_labels(config.labels.masks, classes);
        labels = std::move(mask.labels);
        coords = std::move(mask.coords);
    } else {
        const auto& s = config.labels.shape;
        coords = grid_coords(s[0], s[1], s[2]);
        const VoxelGraph graph = build_graph(coords);
        beta = config.labels.beta;
        if (beta.size() == 1 && paradigm.size() > 1) beta = VectorXd::Constant(paradigm.size(), beta(0));
        require(beta.size() == paradigm.size(), ErrorKind::Config, "labels.potts.beta needs one value per condition");
        labels = sample_potts_labels(graph, beta, classes, config.labels.sweeps, stream_seed(seed, 3));
    }
    const HrfModel hrf = canonical_hrf(config.order, config.dt);
    const int basis = static_cast<int>(build_drift_basis(config.scans, config.tr, config.drift_cutoff).cols());
    const MatrixXd drift = sample_drift_coeffs(basis, labels.voxels(), config.drift_std, stream_seed(seed, 4));
    SimulatedParcel out = simulate_parcel(parcel_id, paradigm, hrf, labels, coords, config.mixture, drift,
                                          config.noise, config.scans, config.tr, config.drift_cutoff, seed);
    out.truth.beta = beta;
    return out;
}

}  // namespace jde::sim
