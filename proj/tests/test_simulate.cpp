#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>

#include "helpers.hpp"
#include "jde/errors.hpp"
#include "jde/io.hpp"
#include "jde/potts.hpp"
#include "jde/simulate.hpp"

using namespace jde;
using namespace jde::sim;
namespace fs = std::filesystem;

namespace {

const fs::path kData = JDE_DATA_DIR;

MixtureParams mixture2(int conditions, double mu, double v) {
    MixtureParams p;
    p.classes = 2;
    p.mean = MatrixXd::Zero(conditions, 2);
    p.mean.col(1).setConstant(mu);
    p.var = MatrixXd::Constant(conditions, 2, v);
    return p;
}

double lag1_autocorrelation(const VectorXd& x) {
    const VectorXd c = x.array() - x.mean();
    return c.head(c.size() - 1).dot(c.tail(c.size() - 1)) / c.squaredNorm();
}

}  // namespace

TEST_CASE("Gibbs sampler at beta = 0 gives uniform class frequencies") {
    const VoxelGraph g = build_graph(grid_coords(20, 20, 1));
    for (int classes : {2, 3}) {
        const LabelField f = sample_potts_labels(g, VectorXd::Zero(1), classes, 5, 7);
        const double p = 1.0 / classes;
        const double sd = std::sqrt(p * (1.0 - p) / 400.0);
        for (int i = 1; i <= classes; ++i) {
            const double freq = (f.labels.array() == i).cast<double>().mean();
            CHECK(std::abs(freq - p) <= 3.0 * sd);
        }
    }
}

TEST_CASE("Gibbs sampler on 2x2 matches Boltzmann weights") {
    const VoxelGraph g = build_graph(grid_coords(2, 2, 1));
    const double beta = 0.5;
    PottsGibbsSampler sampler(g, beta, 2, 12345);
    std::map<int, double> counts;
    const int sweeps = 100000;
    for (int s = 0; s < sweeps; ++s) {
        sampler.sweep();
        int code = 0;
        for (int j = 0; j < 4; ++j) code = code * 2 + (sampler.labels()(j) - 1);
        counts[code] += 1.0;
    }
    const double log_z = potts::exact_log_partition(g, beta, 2);
    for (int code = 0; code < 16; ++code) {
        Eigen::VectorXi q(4);
        for (int j = 0; j < 4; ++j) q(j) = 1 + ((code >> (3 - j)) & 1);
        const double p = std::exp(beta * potts::energy(q, g) - log_z);
        CHECK(std::abs(counts[code] / sweeps - p) <= 0.02);
    }
}

TEST_CASE("Gibbs sampler at large beta is nearly single-class") {
    const VoxelGraph g = build_graph(grid_coords(20, 20, 1));
    for (std::uint64_t seed : {1, 2, 3}) {
        const LabelField f = sample_potts_labels(g, VectorXd::Constant(1, 2.5), 2, 20000, seed);
        const double frac = (f.labels.array() == 1).cast<double>().mean();
        CHECK(std::max(frac, 1.0 - frac) >= 0.95);
    }
}

TEST_CASE("Potts sampling is deterministic given the seed") {
    const VoxelGraph g = build_graph(grid_coords(10, 10, 1));
    const VectorXd beta = VectorXd::Constant(2, 0.6);
    CHECK(sample_potts_labels(g, beta, 2, 20, 9).labels == sample_potts_labels(g, beta, 2, 20, 9).labels);
    CHECK(sample_potts_labels(g, beta, 2, 20, 9).labels != sample_potts_labels(g, beta, 2, 20, 10).labels);
}

TEST_CASE("mask loading") {
    const fs::path dir = jde::testing::scratch_dir("masks");
    std::ofstream(dir / "ones.csv") << "1,1,1\n1,1,1\n";
    const MaskLabels ones = load_mask_labels({dir / "ones.csv"}, 2);
    CHECK(ones.rows == 2);
    CHECK(ones.cols == 3);
    CHECK((ones.labels.labels.array() == 1).all());
    CHECK(ones.coords[4] == Coord{1, 1, 0});

    const std::vector<fs::path> files{kData / "masks/replica_m1.csv", kData / "masks/replica_m2.csv"};
    const MaskLabels replica = load_mask_labels(files, 2);
    CHECK(replica.labels.voxels() == 400);
    for (int m = 0; m < 2; ++m) {
        std::map<char, int> counted;
        for (char c : jde::testing::slurp(files[m]))
            if (c >= '0' && c <= '9') counted[c] += 1;
        CHECK((replica.labels.labels.row(m).array() == 1).count() == counted['1']);
        CHECK((replica.labels.labels.row(m).array() == 2).count() == counted['2']);
    }

    try {
        load_mask_labels({dir / "missing.csv"}, 2);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Io);
    }
    std::ofstream(dir / "bad.csv") << "1,3\n1,1\n";
    try {
        load_mask_labels({dir / "bad.csv"}, 2);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Invariant);
    }
    std::ofstream(dir / "small.csv") << "1,1\n";
    try {
        load_mask_labels({dir / "ones.csv", dir / "small.csv"}, 2);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::Shape);
    }
}

TEST_CASE("NRL sampling") {
    LabelField labels;
    labels.classes = 2;
    labels.labels = MatrixXi::Ones(2, 20000);
    labels.labels.row(0).setConstant(2);

    const MatrixXd exact = sample_nrls(labels, mixture2(2, 2.8, 1e-20), 3);
    CHECK((exact.row(0).array() - 2.8).abs().maxCoeff() <= 1e-8);
    CHECK(exact.row(1).cwiseAbs().maxCoeff() <= 1e-8);

    const MatrixXd a = sample_nrls(labels, mixture2(2, 2.8, 0.25), 4);
    const double n = 20000.0;
    CHECK(std::abs(a.row(0).mean() - 2.8) <= 3.0 * 0.5 / std::sqrt(n));
    CHECK(std::abs(a.row(1).mean()) <= 3.0 * 0.5 / std::sqrt(n));
    const double var = (a.row(0).array() - a.row(0).mean()).square().sum() / (n - 1.0);
    CHECK(std::abs(var - 0.25) <= 3.0 * 0.25 * std::sqrt(2.0 / n));
    CHECK(sample_nrls(labels, mixture2(2, 2.8, 0.25), 4) == a);
}

TEST_CASE("noise sampling") {
    NoiseSpec white;
    white.variance = 1.2;
    const MatrixXd e = sample_noise(white, 268, 400, 5);
    const double pooled = e.squaredNorm() / e.size();
    CHECK(std::abs(pooled - 1.2) <= 3.0 * 1.2 * std::sqrt(2.0 / e.size()));

    NoiseSpec ar0 = white;
    ar0.kind = NoiseKind::Ar1;
    ar0.rho = 0.0;
    CHECK(sample_noise(ar0, 50, 3, 8) == sample_noise(white, 50, 3, 8));

    NoiseSpec ar1;
    ar1.kind = NoiseKind::Ar1;
    ar1.rho = 0.6;
    const MatrixXd x = sample_noise(ar1, 10000, 1, 6);
    CHECK(std::abs(lag1_autocorrelation(x.col(0)) - 0.6) <= 0.03);

    const NoiseSpec ar2 = ar2_from_lag1(0.4, -0.2, 1.0);
    const MatrixXd z = sample_noise(ar2, 20000, 1, 7);
    CHECK(std::abs(lag1_autocorrelation(z.col(0)) - 0.4) <= 0.03);

    NoiseSpec bad;
    bad.kind = NoiseKind::Ar1;
    bad.rho = 1.0;
    CHECK_THROWS_AS(sample_noise(bad, 10, 1, 1), Error);
    NoiseSpec bad2;
    bad2.kind = NoiseKind::Ar2;
    bad2.phi1 = 0.8;
    bad2.phi2 = 0.5;
    try {
        sample_noise(bad2, 10, 1, 1);
        FAIL("expected an error");
    } catch (const Error& err) {
        CHECK(err.kind() == ErrorKind::Nonstationary);
    }
}

TEST_CASE("interleaved paradigm") {
    const Paradigm p = interleaved_paradigm({"a", "b"}, 30, 536.0, 0.0, 0.25, 11);
    REQUIRE(p.size() == 2);
    std::vector<double> all;
    for (const auto& c : p.conditions) {
        CHECK(c.onsets.size() == 30);
        CHECK(std::is_sorted(c.onsets.begin(), c.onsets.end()));
        all.insert(all.end(), c.onsets.begin(), c.onsets.end());
    }
    std::sort(all.begin(), all.end());
    const double spacing = 536.0 / 60.0;
    for (std::size_t k = 0; k < all.size(); ++k) CHECK(std::abs(all[k] - (k + 0.5) * spacing) <= 0.25);
    CHECK_NOTHROW(p.validate());

    const Paradigm q = interleaved_paradigm({"a", "b"}, 30, 536.0, 47.0, 0.25, 11);
    CHECK(q.conditions[0].onsets.size() == 5);
    CHECK(q.conditions[1].onsets.size() == 5);
    CHECK(interleaved_paradigm({"a", "b"}, 30, 536.0, 0.0, 0.25, 11).conditions[0].onsets == p.conditions[0].onsets);
}

TEST_CASE("parcel simulation") {
    const auto coords = grid_coords(4, 5, 1);
    const Paradigm p = interleaved_paradigm({"a", "b"}, 4, 60.0, 0.0, 0.0, 1);
    const HrfModel h = canonical_hrf(20, 0.5);
    LabelField labels;
    labels.classes = 2;
    labels.labels = MatrixXi::Ones(2, 20);
    const int o = static_cast<int>(build_drift_basis(60, 1.0, 30.0).cols());

    NoiseSpec silent;
    silent.variance = 0.0;
    const SimulatedParcel zero = simulate_parcel(0, p, h, labels, coords, mixture2(2, 0.0, 1e-300),
                                                 MatrixXd::Zero(o, 20), silent, 60, 1.0, 30.0, 3);
    CHECK(zero.data.y.cwiseAbs().maxCoeff() <= 1e-140);

    labels.labels.row(0).head(7).setConstant(2);
    const MatrixXd l = sample_drift_coeffs(o, 20, 10.0, 4);
    NoiseSpec noise;
    noise.variance = 1.2;
    const SimulatedParcel s = simulate_parcel(3, p, h, labels, coords, mixture2(2, 2.0, 0.3), l, noise, 60, 1.0, 30.0, 5);
    CHECK(s.data.parcel_id == 3);
    const MatrixXd stim = stimulus_component(s.data.design, s.truth.nrls, h.taps);
    CHECK((s.data.y - stim - s.data.drift * l - s.truth.noise_samples).cwiseAbs().maxCoeff() <= 1e-12);

    const SimulatedParcel again =
        simulate_parcel(3, p, h, labels, coords, mixture2(2, 2.0, 0.3), l, noise, 60, 1.0, 30.0, 5);
    CHECK(again.data.y == s.data.y);
}

TEST_CASE("replica configuration") {
    const auto cfg = io::read_simulation_config(kData / "sim_replica.json");
    CHECK(cfg.scans == 268);
    CHECK(cfg.noise.kind == NoiseKind::White);
    CHECK(cfg.noise.variance == 1.2);
    CHECK(cfg.mixture.mean(0, 1) == 2.8);
    CHECK(cfg.mixture.mean(1, 1) == 1.8);
    CHECK(cfg.mixture.var(0, 1) == 0.25);
    const Paradigm p = make_paradigm(cfg);
    const SimulatedParcel s = simulate_from_config(cfg, p, 0);
    CHECK(s.data.scans() == 268);
    CHECK(s.data.voxels() == 400);
    CHECK(s.data.conditions() == 2);

    const MatrixXd stim = stimulus_component(s.data.design, s.truth.nrls, s.truth.hrf.taps);
    CHECK((s.data.y - stim - s.data.drift * s.truth.drift_coeffs - s.truth.noise_samples).cwiseAbs().maxCoeff() <=
          1e-12);

    double es = 0.0, en = 0.0;
    for (int j = 0; j < stim.cols(); ++j) {
        for (int n = 0; n < stim.rows(); ++n) {
            es += stim(n, j) * stim(n, j);
            en += s.truth.noise_samples(n, j) * s.truth.noise_samples(n, j);
        }
    }
    CHECK(compute_snr(stim, s.truth.noise_samples) == doctest::Approx(10.0 * std::log10(es / en)).epsilon(1e-12));

    const SimulatedParcel again = simulate_from_config(cfg, make_paradigm(cfg), 0);
    CHECK(again.data.y == s.data.y);
    CHECK(again.truth.nrls == s.truth.nrls);
}

TEST_CASE("CNR and SNR") {
    CHECK(compute_cnr(1.0, 0.3, 1.0, 0.2) == 0.0);
    CHECK(compute_cnr(2.8, 0.25, 0.0, 0.25) == doctest::Approx(31.36).epsilon(1e-12));
    CHECK(compute_cnr(1.8, 0.25, 0.0, 0.25) == doctest::Approx(12.96).epsilon(1e-12));
    CHECK_THROWS_AS(compute_cnr(1.0, 0.0, 0.0, 0.0), Error);

    const MatrixXd a = MatrixXd::Constant(4, 2, 1.0);
    CHECK(compute_snr(a, -a) == doctest::Approx(0.0));
    CHECK(compute_snr(a, std::sqrt(10.0) * a) == doctest::Approx(-10.0).epsilon(1e-12));
    CHECK_THROWS_AS(compute_snr(a, MatrixXd::Zero(4, 2)), Error);
}

TEST_CASE("class-conditional moments converge at the root-n rate") {
    LabelField labels;
    labels.classes = 2;
    for (int n : {1000, 16000}) {
        labels.labels = MatrixXi::Constant(1, n, 2);
        const MatrixXd a = sample_nrls(labels, mixture2(1, 1.8, 0.25), 21);
        const double err = std::abs(a.mean() - 1.8);
        CHECK(err <= 4.0 * 0.5 / std::sqrt(static_cast<double>(n)));
    }
}
