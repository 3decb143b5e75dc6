// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero when any criterion fails.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "../helpers.hpp"
#include "jde/cli.hpp"
#include "jde/io.hpp"
#include "jde/metrics.hpp"
#include "jde/potts.hpp"
#include "jde/simulate.hpp"
#include "jde/vem.hpp"

using namespace jde;
namespace fs = std::filesystem;

namespace {

const fs::path kData = JDE_DATA_DIR;
using clock_type = std::chrono::steady_clock;

std::string num(double x, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, x);
    return buf;
}

double seconds_since(clock_type::time_point t0) {
    return std::chrono::duration<double>(clock_type::now() - t0).count();
}

struct Outcome {
    bool pass = false;
    std::string detail;
};

sim::SimulationConfig replica_config(std::uint64_t seed) {
    auto cfg = io::read_simulation_config(kData / "sim_replica.json");
    cfg.seed = seed;
    return cfg;
}

sim::SimulatedParcel simulate(const sim::SimulationConfig& cfg) {
    return sim::simulate_from_config(cfg, sim::make_paradigm(cfg), 0);
}

// ---- criteria 1, 2, 3, 8: the replica protocol over ten seeds ----

struct ReplicaRun {
    VectorXd mse;  // per condition, normalized view
    VectorXd auc;
    double hrf_corr = 0.0;
    double ttp_err = 0.0;
    double pv_rel_err = 0.0;
    int iterations = 0;
    bool converged = false;
    double c_h = 0.0;
    double c_a = 0.0;
};

std::vector<ReplicaRun> replica_runs(double* seconds) {
    std::vector<ReplicaRun> runs;
    const auto t0 = clock_type::now();
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        const auto cfg = replica_config(seed);
        const auto s = simulate(cfg);
        const VemReport r = run_vem(s.data, VemConfig{});
        ReplicaRun out;
        const NormalizedView est = r.normalized();
        const NormalizedView tru = normalized_view(s.truth.hrf.taps, s.truth.nrls);
        const int nc = s.data.conditions();
        out.mse.resize(nc);
        out.auc.resize(nc);
        for (int m = 0; m < nc; ++m) {
            out.mse(m) = metrics::mse(est.nrls.row(m).transpose(), tru.nrls.row(m).transpose());
            std::vector<bool> active(s.data.voxels());
            for (int j = 0; j < s.data.voxels(); ++j) active[j] = s.truth.labels.labels(m, j) == 2;
            out.auc(m) = metrics::roc_curve(r.state.ppm(m), active).auc;
        }
        const int d = static_cast<int>(est.hrf.size());
        out.hrf_corr = metrics::correlation(est.hrf.segment(1, d - 2), tru.hrf.segment(1, d - 2));
        const auto fe = metrics::hrf_features(est.hrf, cfg.dt);
        const auto ft = metrics::hrf_features(tru.hrf, cfg.dt);
        out.ttp_err = std::abs(fe.time_to_peak - ft.time_to_peak);
        out.pv_rel_err = std::abs(fe.peak_value - ft.peak_value) / std::abs(ft.peak_value);
        out.iterations = r.iterations;
        out.converged = r.converged;
        out.c_h = r.trace.back().c_h;
        out.c_a = r.trace.back().c_a;
        runs.push_back(out);
    }
    *seconds = seconds_since(t0);
    return runs;
}

Outcome criterion1(const std::vector<ReplicaRun>& runs, double seconds) {
    VectorXd mean = VectorXd::Zero(runs.front().mse.size());
    for (const auto& r : runs) mean += r.mse;
    mean /= static_cast<double>(runs.size());
    Outcome o;
    o.pass = (mean.array() <= 0.02).all() && seconds <= 120.0;
    o.detail = "mean NRL MSE m1=" + num(mean(0)) + " m2=" + num(mean(1)) + " (limit 0.02), " + num(seconds, 3) +
               " s for 10 seeds (limit 120 s)";
    return o;
}

Outcome criterion2(const std::vector<ReplicaRun>& runs) {
    VectorXd mean = VectorXd::Zero(runs.front().auc.size());
    int ordered = 0;
    for (const auto& r : runs) {
        mean += r.auc;
        ordered += r.auc(0) >= r.auc(1);
    }
    mean /= static_cast<double>(runs.size());
    Outcome o;
    o.pass = mean(0) >= 0.97 && mean(1) >= 0.93 && ordered >= 8;
    o.detail = "mean AUC m1=" + num(mean(0)) + " m2=" + num(mean(1)) + ", AUC_m1 >= AUC_m2 in " +
               std::to_string(ordered) + "/10 seeds";
    return o;
}

Outcome criterion3(const std::vector<ReplicaRun>& runs, double dt) {
    double worst_corr = 1.0, worst_ttp = 0.0, worst_pv = 0.0;
    for (const auto& r : runs) {
        worst_corr = std::min(worst_corr, r.hrf_corr);
        worst_ttp = std::max(worst_ttp, r.ttp_err);
        worst_pv = std::max(worst_pv, r.pv_rel_err);
    }
    Outcome o;
    o.pass = worst_corr >= 0.98 && worst_ttp <= dt && worst_pv <= 0.10;
    o.detail = "worst over seeds: HRF correlation " + num(worst_corr, 5) + ", |dTTP| " + num(worst_ttp, 3) +
               " s (limit " + num(dt) + "), PV relative error " + num(worst_pv, 3);
    return o;
}

Outcome criterion8(const std::vector<ReplicaRun>& runs) {
    int ok = 0, worst_iters = 0;
    double worst_c = 0.0;
    for (const auto& r : runs) {
        ok += r.converged && r.iterations <= 200 && r.c_h <= 1e-5 && r.c_a <= 1e-5;
        worst_iters = std::max(worst_iters, r.iterations);
        worst_c = std::max({worst_c, r.c_h, r.c_a});
    }
    Outcome o;
    o.pass = ok == static_cast<int>(runs.size());
    o.detail = std::to_string(ok) + "/10 seeds converged, at most " + std::to_string(worst_iters) +
               " iterations, final max(c_H, c_A) " + num(worst_c, 3);
    return o;
}

// ---- criterion 4: beta recovery on Potts-sampled labels ----

Outcome criterion4() {
    Outcome o;
    o.pass = true;
    std::ostringstream detail;
    for (double beta : {0.2, 0.4, 0.6, 0.8}) {
        double sum = 0.0;
        const int seeds = 20;
        for (int seed = 1; seed <= seeds; ++seed) {
            auto cfg = replica_config(static_cast<std::uint64_t>(100 + seed));
            cfg.labels.masks.clear();
            cfg.labels.beta = VectorXd::Constant(2, beta);
            cfg.labels.shape = {20, 20, 1};
            const auto s = simulate(cfg);
            const VemReport r = run_vem(s.data, VemConfig{});
            sum += r.state.beta.mean();
        }
        const double mean = sum / seeds;
        const bool ok = std::abs(mean - beta) <= 0.15;
        o.pass = o.pass && ok;
        detail << "beta " << num(beta) << " -> " << num(mean) << (ok ? "" : " (out of range)") << "; ";
    }
    o.detail = detail.str();
    return o;
}

// ---- criterion 5: AR(1) noise estimation ----

Outcome criterion5() {
    Outcome o;
    o.pass = true;
    std::ostringstream detail;
    for (double rho : {0.0, 0.3, 0.5}) {
        auto cfg = replica_config(7);
        cfg.labels.masks.clear();
        cfg.labels.beta = VectorXd::Constant(2, 0.5);
        cfg.labels.shape = {10, 5, 1};
        cfg.noise.kind = sim::NoiseKind::Ar1;
        cfg.noise.rho = rho;
        const auto s = simulate(cfg);
        VemConfig v;
        v.noise_mode = NoiseMode::Ar1;
        const VemReport r = run_vem(s.data, v);
        const double mean = r.state.noise.rho.mean();
        const bool ok = std::abs(mean - rho) <= 0.1;
        o.pass = o.pass && ok;
        detail << "rho " << num(rho) << " -> " << num(mean) << "; ";
    }
    o.detail = detail.str() + "50 voxels, N=268";
    return o;
}

// ---- criterion 6: free-energy ascent with beta frozen at zero ----

Outcome criterion6() {
    int ok = 0;
    double worst = 0.0;
    for (int k = 0; k < 20; ++k) {
        auto cfg = replica_config(static_cast<std::uint64_t>(500 + k));
        cfg.labels.masks.clear();
        cfg.labels.beta = VectorXd::Constant(2, 0.2 * (k % 5));
        cfg.labels.shape = {4 + k % 4, 5, 1};
        cfg.scans = 120 + 10 * k;
        cfg.paradigm.events_per_condition = cfg.scans / 9;
        const bool ar1 = k % 2 == 1;
        if (ar1) {
            cfg.noise.kind = sim::NoiseKind::Ar1;
            cfg.noise.rho = 0.3;
        }
        const auto s = simulate(cfg);
        VemConfig v;
        v.noise_mode = ar1 ? NoiseMode::Ar1 : NoiseMode::White;
        v.estimate_beta = false;
        v.beta_init = 0.0;
        v.max_iters = 60;
        v.tol_h = v.tol_a = 1e-14;
        const VemReport r = run_vem(s.data, v);
        bool mono = true;
        for (std::size_t t = 1; t < r.trace.size(); ++t) {
            const double prev = r.trace[t - 1].free_energy;
            const double drop = (prev - r.trace[t].free_energy) / std::abs(prev);
            worst = std::max(worst, drop);
            mono = mono && drop <= 1e-8;
        }
        ok += mono;
    }
    Outcome o;
    o.pass = ok == 20;
    o.detail = std::to_string(ok) + "/20 instances non-decreasing, largest relative drop " + num(worst, 3);
    return o;
}

// ---- criterion 7: oracle equivalence ----

void randomize_state(VemEngine& e, std::mt19937_64& rng, bool ar1) {
    PosteriorState& s = e.state();
    const int nc = s.conditions();
    const int nv = s.voxels();
    const int dh = static_cast<int>(s.m_h.size());
    s.m_h = jde::testing::random_vector(dh, rng);
    s.sigma_h = 0.01 * jde::testing::random_spd(dh, rng);
    s.m_a = jde::testing::random_matrix(nc, nv, rng);
    for (int j = 0; j < nv; ++j) s.sigma_a[j] = 0.1 * jde::testing::random_spd(nc, rng);
    std::uniform_real_distribution<double> u(0.05, 0.95);
    for (int m = 0; m < nc; ++m) {
        for (int j = 0; j < nv; ++j) {
            s.q[m](j, 1) = u(rng);
            s.q[m](j, 0) = 1.0 - s.q[m](j, 1);
        }
    }
    s.mixture.mean.col(1).setConstant(1.7);
    s.mixture.var.setConstant(0.4);
    s.drift = jde::testing::random_matrix(static_cast<int>(s.drift.rows()), nv, rng, 0.5);
    for (int j = 0; j < nv; ++j) {
        s.noise.sigma2(j) = 0.5 + u(rng);
        s.noise.rho(j) = ar1 ? u(rng) - 0.5 : 0.0;
    }
    s.v_h = 0.7;
}

MatrixXd dense_gamma(const PosteriorState& s, int j, int n) {
    return ar1_precision(s.noise.rho(j), s.noise.sigma2(j), n).dense();
}

// Relative max error of E-H against the dense conjugate posterior.
double e_h_error(bool ar1, std::mt19937_64& rng) {
    const ParcelDataset d = jde::testing::tiny_dataset(12, 6, 2, 2, 1, rng);
    VemConfig cfg;
    cfg.noise_mode = ar1 ? NoiseMode::Ar1 : NoiseMode::White;
    VemEngine e(d, cfg);
    e.initialize();
    randomize_state(e, rng, ar1);
    PosteriorState& s = e.state();
    MatrixXd prec = build_hrf_prior(d.order(), d.design.dt).inverse() / s.v_h;
    VectorXd rhs = VectorXd::Zero(s.m_h.size());
    for (int j = 0; j < d.voxels(); ++j) {
        const MatrixXd g = dense_gamma(s, j, d.scans());
        const MatrixXd ea = s.sigma_a[j] + s.m_a.col(j) * s.m_a.col(j).transpose();
        for (int a = 0; a < d.conditions(); ++a) {
            for (int b = 0; b < d.conditions(); ++b)
                prec += ea(a, b) * d.design.interior(a).transpose() * g * d.design.interior(b);
            rhs += s.m_a(a, j) * d.design.interior(a).transpose() * g * (d.y.col(j) - d.drift * s.drift.col(j));
        }
    }
    const MatrixXd cov = prec.inverse();
    const VectorXd mean = cov * rhs;
    e.e_h_step();
    return std::max((s.sigma_h - cov).cwiseAbs().maxCoeff() / cov.cwiseAbs().maxCoeff(),
                    (s.m_h - mean).cwiseAbs().maxCoeff() / std::max(1.0, mean.cwiseAbs().maxCoeff()));
}

// Max abs error of E-A against per-voxel dense Gaussian conditioning.
double e_a_error(bool ar1, std::mt19937_64& rng) {
    const ParcelDataset d = jde::testing::tiny_dataset(16, 6, 2, 3, 1, rng);
    VemConfig cfg;
    cfg.noise_mode = ar1 ? NoiseMode::Ar1 : NoiseMode::White;
    VemEngine e(d, cfg);
    e.initialize();
    randomize_state(e, rng, ar1);
    PosteriorState& s = e.state();
    const int nc = d.conditions();
    MatrixXd g(d.scans(), nc);
    for (int m = 0; m < nc; ++m) g.col(m) = d.design.interior(m) * s.m_h;
    std::vector<MatrixXd> cov(d.voxels());
    MatrixXd mean(nc, d.voxels());
    for (int j = 0; j < d.voxels(); ++j) {
        const MatrixXd gam = dense_gamma(s, j, d.scans());
        MatrixXd prec = g.transpose() * gam * g;
        VectorXd rhs = g.transpose() * gam * (d.y.col(j) - d.drift * s.drift.col(j));
        for (int a = 0; a < nc; ++a) {
            for (int b = 0; b < nc; ++b)
                prec(a, b) += (gam * d.design.interior(a) * s.sigma_h * d.design.interior(b).transpose()).trace();
            for (int i = 0; i < 2; ++i) {
                prec(a, a) += s.q[a](j, i) / s.mixture.var(a, i);
                rhs(a) += s.q[a](j, i) * s.mixture.mean(a, i) / s.mixture.var(a, i);
            }
        }
        cov[j] = prec.inverse();
        mean.col(j) = cov[j] * rhs;
    }
    e.e_a_step();
    double err = 0.0;
    for (int j = 0; j < d.voxels(); ++j) {
        err = std::max(err, (s.sigma_a[j] - cov[j]).cwiseAbs().maxCoeff());
        err = std::max(err, (s.m_a.col(j) - mean.col(j)).cwiseAbs().maxCoeff());
    }
    return err;
}

// Worst total-variation distance between converged E-Q marginals and the
// enumerated posterior on a three-voxel chain.
double e_q_tv(std::mt19937_64& rng) {
    const ParcelDataset d = jde::testing::tiny_dataset(20, 6, 1, 3, 1, rng);
    VemEngine e(d, VemConfig{});
    e.initialize();
    randomize_state(e, rng, false);
    PosteriorState& s = e.state();
    s.beta(0) = 0.3;
    s.m_a.row(0) << 0.2, 1.1, 2.3;
    for (int j = 0; j < 3; ++j) s.sigma_a[j](0, 0) = 0.05 * (j + 1);
    MatrixXd field(3, 2);
    for (int j = 0; j < 3; ++j) {
        for (int i = 0; i < 2; ++i) {
            const double v = s.mixture.var(0, i);
            const double r = s.m_a(0, j) - s.mixture.mean(0, i);
            field(j, i) = -0.5 * std::log(2.0 * M_PI * v) - 0.5 * (r * r + s.sigma_a[j](0, 0)) / v;
        }
    }
    for (int it = 0; it < 100; ++it) e.e_q_step();
    const potts::Enumeration exact = potts::enumerate(d.graph, 0.3, 2, field);
    double worst = 0.0;
    for (int j = 0; j < 3; ++j) worst = std::max(worst, 0.5 * (s.q[0].row(j) - exact.marginals.row(j)).cwiseAbs().sum());
    return worst;
}

// Relative error of log_joint against a term-by-term dense evaluation, beta = 0.
double log_joint_error(std::mt19937_64& rng) {
    const int nc = 2, nv = 6;
    const ParcelDataset d = jde::testing::tiny_dataset(10, 6, nc, 3, 2, rng);
    const MatrixXd nrls = jde::testing::random_matrix(nc, nv, rng);
    VectorXd h = VectorXd::Zero(7);
    h.segment(1, 5) = jde::testing::random_vector(5, rng);
    LabelField labels;
    labels.classes = 2;
    labels.labels = MatrixXi::Ones(nc, nv);
    for (int m = 0; m < nc; ++m)
        for (int j = 0; j < nv; ++j) labels.labels(m, j) = 1 + static_cast<int>(rng() % 2);
    ModelParams theta;
    theta.noise.sigma2 = VectorXd::Constant(nv, 1.4);
    theta.noise.rho = VectorXd::Constant(nv, 0.2);
    theta.drift_coeffs = jde::testing::random_matrix(static_cast<int>(d.drift.cols()), nv, rng);
    theta.mixture.classes = 2;
    theta.mixture.mean = MatrixXd::Zero(nc, 2);
    theta.mixture.mean.col(1).setConstant(2.0);
    theta.mixture.var = MatrixXd::Constant(nc, 2, 0.5);
    theta.v_h = 0.3;
    theta.beta = VectorXd::Zero(nc);

    double oracle = -nc * nv * std::log(2.0);
    const int n = d.scans();
    for (int j = 0; j < nv; ++j) {
        VectorXd mean = d.drift * theta.drift_coeffs.col(j);
        for (int m = 0; m < nc; ++m) mean += nrls(m, j) * d.design.x[m] * h;
        MatrixXd cov(n, n);
        for (int a = 0; a < n; ++a)
            for (int b = 0; b < n; ++b) cov(a, b) = 1.4 * std::pow(0.2, std::abs(a - b)) / (1.0 - 0.04);
        oracle += jde::testing::dense_mvn_log_density(d.y.col(j), mean, cov);
    }
    oracle += jde::testing::dense_mvn_log_density(h.segment(1, 5), VectorXd::Zero(5),
                                                  theta.v_h * build_hrf_prior(6, d.design.dt));
    for (int m = 0; m < nc; ++m) {
        for (int j = 0; j < nv; ++j) {
            const int i = labels.labels(m, j) - 1;
            const double r = nrls(m, j) - theta.mixture.mean(m, i);
            oracle += -0.5 * std::log(2.0 * M_PI * 0.5) - 0.5 * r * r / 0.5;
        }
    }
    const double value = log_joint(d, nrls, h, labels, theta).value;
    return std::abs(value - oracle) / std::abs(oracle);
}

Outcome criterion7() {
    std::mt19937_64 rng(2024);
    double eh = 0.0, ea = 0.0;
    for (bool ar1 : {false, true}) {
        eh = std::max(eh, e_h_error(ar1, rng));
        ea = std::max(ea, e_a_error(ar1, rng));
    }
    const double eq = e_q_tv(rng);
    const double lj = log_joint_error(rng);
    const VoxelGraph g = build_graph(grid_coords(3, 3, 1));
    const double step = 1e-5;
    const double fd = (potts::exact_log_partition(g, 0.3 + step, 2) - potts::exact_log_partition(g, 0.3 - step, 2)) /
                      (2.0 * step);
    const double dz = std::abs(potts::enumerate(g, 0.3, 2).mean_energy - fd);
    Outcome o;
    o.pass = eh <= 1e-9 && ea <= 1e-9 && eq <= 0.05 && lj <= 1e-11 && dz <= 1e-6;
    o.detail = "E-H " + num(eh, 2) + ", E-A " + num(ea, 2) + ", E-Q TV " + num(eq, 2) + ", log_joint " +
               num(lj, 2) + ", dlogZ/dbeta " + num(dz, 2);
    return o;
}

// ---- criterion 9: worker-count independence ----

Outcome criterion9(const fs::path& work) {
    auto cfg = replica_config(3);
    cfg.parcels = 10;
    cfg.labels.masks.clear();
    cfg.labels.beta = VectorXd::Constant(2, 0.5);
    cfg.labels.shape = {10, 8, 1};
    const fs::path root = work / "determinism";
    fs::remove_all(root);
    fs::create_directories(root);
    std::ofstream(root / "sim.json") << io::to_json(cfg).dump(2);
    std::ostringstream log;
    cli::cmd_simulate({root / "sim.json", root / "data", std::nullopt}, log);
    const int f1 = cli::cmd_fit({root / "data", std::nullopt, root / "jobs1", 1}, log);
    const int f8 = cli::cmd_fit({root / "data", std::nullopt, root / "jobs8", 8}, log);
    const auto h1 = jde::testing::hash_tree(root / "jobs1", {"timing.json"});
    const auto h8 = jde::testing::hash_tree(root / "jobs8", {"timing.json"});
    Outcome o;
    o.pass = f1 == 0 && f8 == 0 && h1 == h8;
    std::ostringstream d;
    d << "10 parcels, output hash jobs=1 " << std::hex << h1 << ", jobs=8 " << h8;
    o.detail = d.str();
    return o;
}

// ---- criterion 10: scaling shape ----

Outcome criterion10(const fs::path& work) {
    cli::BenchOptions b;
    b.dims = "J=400,800;M=2,4;N=268,536";
    b.out = work / "bench.csv";
    b.iterations = 10;
    std::ostringstream log;
    const auto rows = cli::cmd_bench(b, log);
    Outcome o;
    o.pass = true;
    std::ostringstream d;
    for (std::size_t k = 0; k + 1 < rows.size(); k += 2) {
        const double ratio = rows[k + 1].seconds_per_iteration / rows[k].seconds_per_iteration;
        o.pass = o.pass && ratio <= 2.5;
        d << rows[k].axis << " x2 -> " << num(ratio, 3) << "; ";
    }
    o.detail = d.str() + "limit 2.5";
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Acceptance checks"};
    fs::path work = fs::temp_directory_path() / "jde_acceptance";
    app.add_option("--work-dir", work, "Scratch directory");
    CLI11_PARSE(app, argc, argv);
    fs::create_directories(work);

    int failed = 0;
    auto report = [&](int n, const Outcome& o) {
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << n << ": " << o.detail << std::endl;
        failed += !o.pass;
    };
    auto guarded = [&](int n, const std::function<Outcome()>& f) {
        try {
            report(n, f());
        } catch (const std::exception& e) {
            report(n, {false, std::string("error: ") + e.what()});
        }
    };

    std::vector<ReplicaRun> runs;
    double seconds = 0.0;
    std::string replica_error;
    try {
        runs = replica_runs(&seconds);
    } catch (const std::exception& e) {
        replica_error = e.what();
    }
    auto replica = [&](auto f) {
        return [&, f]() -> Outcome {
            if (!replica_error.empty()) return {false, "error: " + replica_error};
            return f();
        };
    };
    const double dt = replica_config(1).dt;
    guarded(1, replica([&] { return criterion1(runs, seconds); }));
    guarded(2, replica([&] { return criterion2(runs); }));
    guarded(3, replica([&] { return criterion3(runs, dt); }));
    guarded(4, criterion4);
    guarded(5, criterion5);
    guarded(6, criterion6);
    guarded(7, criterion7);
    guarded(8, replica([&] { return criterion8(runs); }));
    guarded(9, [&] { return criterion9(work); });
    guarded(10, [&] { return criterion10(work); });
    return failed == 0 ? 0 : 1;
}
