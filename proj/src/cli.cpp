#include "jde/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>

#include <CLI11.hpp>

#include "jde/io.hpp"
#include "jde/metrics.hpp"
#include "jde/parallel.hpp"
#include "jde/simulate.hpp"
#include "jde/vem.hpp"

namespace jde::cli {

namespace {

std::string parcel_dir_name(int id) { return "parcel_" + std::to_string(id); }

std::string fmt(double x) { return io::format_double(x); }

std::string fixed(double x, int digits) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, x);
    return buf;
}

std::vector<double> parse_doubles(const std::string& spec, const std::string& what) {
    std::vector<double> out;
    for (const auto& f : io::csv_split(spec)) {
        std::size_t used = 0;
        double v = 0.0;
        try {
            v = std::stod(f, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        require(used > 0 && used == f.size(), ErrorKind::Config, what + ": '" + f + "' is not a number");
        out.push_back(v);
    }
    return out;
}

void simulate_one(const sim::SimulationConfig& config, const fs::path& out, std::optional<double> isi,
                  std::ostream& log) {
    const Paradigm paradigm = sim::make_paradigm(config);
    std::vector<ParcelDataset> parcels;
    std::vector<std::optional<sim::GroundTruth>> truths;
    for (int p = 0; p < config.parcels; ++p) {
        sim::SimulatedParcel s = sim::simulate_from_config(config, paradigm, p);
        parcels.push_back(std::move(s.data));
        truths.emplace_back(std::move(s.truth));
    }
    io::DatasetMeta meta;
    meta.seed = config.seed;
    meta.classes = config.mixture.classes;
    meta.isi = isi;
    io::write_dataset(parcels, truths, out, meta);

    const auto& mix = config.mixture;
    const auto& first = parcels.front();
    const auto& truth = *truths.front();
    log << "simulated " << parcels.size() << " parcel(s): N=" << first.scans() << " J=" << first.voxels()
        << " M=" << first.conditions() << " -> " << out.string() << "\n";
    for (int m = 0; m < first.conditions(); ++m) {
        const double cnr = sim::compute_cnr(mix.mean(m, 1), mix.var(m, 1), mix.mean(m, 0), mix.var(m, 0));
        DesignMatrix single = first.design;
        single.x = {first.design.x[static_cast<std::size_t>(m)]};
        const MatrixXd stim = sim::stimulus_component(single, truth.nrls.row(m), truth.hrf.taps);
        std::string snr = "n/a";
        if (truth.noise_samples.squaredNorm() > 0.0) snr = fixed(sim::compute_snr(stim, truth.noise_samples), 2) + " dB";
        log << "  condition " << first.paradigm.conditions[static_cast<std::size_t>(m)].name << ": CNR "
            << fixed(cnr, 2) << ", SNR " << snr << "\n";
    }
}

// One synthetic parcel with the requested dimensions for timing.
ParcelDataset bench_parcel(int voxels, int conditions, int scans, std::uint64_t seed) {
    const double tr = 2.0;
    const double session = scans * tr;
    std::vector<std::string> names;
    for (int m = 0; m < conditions; ++m) names.push_back("c" + std::to_string(m + 1));
    const int total_events = std::max(conditions, static_cast<int>(std::lround(60.0 * scans / 268.0)));
    const Paradigm paradigm =
        sim::interleaved_paradigm(names, std::max(1, total_events / conditions), session, 0.0, 0.25, seed);
    const std::vector<Coord> coords =
        voxels % 20 == 0 ? grid_coords(20, voxels / 20, 1) : grid_coords(1, voxels, 1);
    const VoxelGraph graph = build_graph(coords);
    const LabelField labels =
        sim::sample_potts_labels(graph, VectorXd::Constant(conditions, 0.5), 2, 20, sim::stream_seed(seed, 1));
    MixtureParams mix;
    mix.classes = 2;
    mix.mean = MatrixXd::Zero(conditions, 2);
    mix.var = MatrixXd::Constant(conditions, 2, 0.25);
    for (int m = 0; m < conditions; ++m) mix.mean(m, 1) = (m % 2 == 0) ? 2.8 : 1.8;
    const HrfModel hrf = canonical_hrf(50, 0.5);
    const int basis = static_cast<int>(build_drift_basis(scans, tr, 128.0).cols());
    const MatrixXd drift = sim::sample_drift_coeffs(basis, voxels, 10.0, sim::stream_seed(seed, 2));
    sim::NoiseSpec noise;
    noise.variance = 1.2;
    return sim::simulate_parcel(0, paradigm, hrf, labels, coords, mix, drift, noise, scans, tr, 128.0, seed).data;
}

}  // namespace

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Config:
        case ErrorKind::InvalidArgument:
        case ErrorKind::InvalidSampling:
        case ErrorKind::DriftBasisTooRich:
        case ErrorKind::Nonstationary:
            return kExitConfig;
        case ErrorKind::NumericalFailure:
            return kExitNumerical;
        default:
            return kExitData;
    }
}

std::vector<double> parse_isi_sweep(const std::string& spec) {
    std::vector<std::string> parts;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ':')) parts.push_back(item);
    require(parts.size() == 3, ErrorKind::Config, "--isi-sweep: expected lo:hi:count");
    const auto lo = parse_doubles(parts[0], "--isi-sweep");
    const auto hi = parse_doubles(parts[1], "--isi-sweep");
    const auto cnt = parse_doubles(parts[2], "--isi-sweep");
    require(lo.size() == 1 && hi.size() == 1 && cnt.size() == 1, ErrorKind::Config, "--isi-sweep: expected lo:hi:count");
    const double n = cnt[0];
    require(n >= 1 && n == std::floor(n), ErrorKind::Config, "--isi-sweep: count must be a positive integer");
    require(lo[0] > 0.0 && hi[0] > 0.0, ErrorKind::Config, "--isi-sweep: ISIs must be positive");
    std::vector<double> out;
    const int k = static_cast<int>(n);
    for (int i = 0; i < k; ++i) out.push_back(k == 1 ? lo[0] : lo[0] + (hi[0] - lo[0]) * i / (k - 1));
    return out;
}

std::vector<BenchAxis> parse_bench_dims(const std::string& spec) {
    std::vector<BenchAxis> axes;
    std::stringstream ss(spec);
    std::string item;
    while (std::getline(ss, item, ';')) {
        if (item.empty()) continue;
        const auto eq = item.find('=');
        require(eq == 1 && (item[0] == 'J' || item[0] == 'M' || item[0] == 'N'), ErrorKind::Config,
                "--dims: expected entries like J=400,800");
        BenchAxis axis;
        axis.name = item[0];
        for (double v : parse_doubles(item.substr(2), "--dims")) {
            require(v >= 1 && v == std::floor(v), ErrorKind::Config, "--dims: values must be positive integers");
            axis.values.push_back(static_cast<int>(v));
        }
        require(!axis.values.empty(), ErrorKind::Config, "--dims: empty axis");
        axes.push_back(axis);
    }
    require(!axes.empty(), ErrorKind::Config, "--dims: nothing to run");
    return axes;
}

void cmd_simulate(const SimulateOptions& o, std::ostream& log) {
    const sim::SimulationConfig config = io::read_simulation_config(o.config);
    if (!o.isi_sweep) {
        simulate_one(config, o.out, std::nullopt, log);
        return;
    }
    const auto isis = parse_isi_sweep(*o.isi_sweep);
    require(!config.paradigm.file, ErrorKind::Config, "--isi-sweep needs a generated paradigm, not paradigm.file");
    io::CsvTable index({"dataset", "isi_seconds", "events_per_condition"});
    const double session = config.scans * config.tr;
    for (double isi : isis) {
        sim::SimulationConfig c = config;
        c.paradigm.isi = isi;
        const std::string name = "isi_" + fixed(isi, 2);
        simulate_one(c, o.out / name, isi, log);
        const int per = static_cast<int>(std::floor(session / isi)) / static_cast<int>(c.paradigm.names.size());
        index.add({name, fmt(isi), std::to_string(per)});
    }
    index.write(o.out / "isi_sweep.csv");
}

int cmd_fit(const FitOptions& o, std::ostream& log, ErrorKind* worst) {
    require(o.jobs >= 1, ErrorKind::Config, "--jobs must be at least 1");
    const VemConfig config = o.config ? io::read_vem_config(*o.config) : VemConfig{};
    const io::LoadedDataset data = io::read_dataset(o.data);
    fs::create_directories(o.out);
    io::atomic_write(o.out / "vem_config.json", io::to_json(config).dump(2) + "\n");

    const std::size_t count = data.parcels.size();
    std::vector<int> iterations(count, 0);
    std::vector<bool> converged(count, false);
    std::mutex log_mutex;
    const auto errors = parallel_for(count, o.jobs, [&](std::size_t k) {
        const ParcelDataset& p = data.parcels[k];
        const VemReport report = run_vem(p, config);
        io::write_report(report, o.out / parcel_dir_name(p.parcel_id));
        iterations[k] = report.iterations;
        converged[k] = report.converged;
    });

    io::CsvTable summary({"parcel_id", "status", "iterations", "converged", "error"});
    int failed = 0;
    ErrorKind worst_kind = ErrorKind::Config;
    int worst_code = 0;
    for (std::size_t k = 0; k < count; ++k) {
        const int id = data.parcels[k].parcel_id;
        if (!errors[k]) {
            summary.add({std::to_string(id), "ok", std::to_string(iterations[k]), converged[k] ? "true" : "false", ""});
            log << "parcel " << id << ": " << iterations[k] << " iterations"
                << (converged[k] ? "" : " (not converged)") << "\n";
            continue;
        }
        ++failed;
        std::string msg;
        ErrorKind kind = ErrorKind::NumericalFailure;
        try {
            std::rethrow_exception(errors[k]);
        } catch (const Error& e) {
            msg = e.what();
            kind = e.kind();
        } catch (const std::exception& e) {
            msg = e.what();
        }
        if (exit_code_for(kind) > worst_code) {
            worst_code = exit_code_for(kind);
            worst_kind = kind;
        }
        summary.add({std::to_string(id), "failed", "0", "false", msg});
        log << "parcel " << id << " failed: " << msg << "\n";
    }
    summary.write(o.out / "fit_summary.csv");
    if (worst) *worst = worst_kind;
    return failed;
}

void cmd_evaluate(const EvaluateOptions& o, std::ostream& log) {
    const io::LoadedDataset data = io::read_dataset(o.truth);
    std::set<int> truth_ids;
    for (const auto& p : data.parcels) truth_ids.insert(p.parcel_id);
    std::set<int> report_ids;
    require(fs::is_directory(o.reports), ErrorKind::Io, "reports directory " + o.reports.string() + " not found");
    for (const auto& e : fs::directory_iterator(o.reports)) {
        const std::string n = e.path().filename().string();
        if (e.is_directory() && n.rfind("parcel_", 0) == 0 && fs::exists(e.path() / "report.json")) {
            try {
                report_ids.insert(std::stoi(n.substr(7)));
            } catch (const std::exception&) {
            }
        }
    }
    require(report_ids == truth_ids, ErrorKind::ParcelMismatch,
            "report parcels and ground-truth parcels differ (" + std::to_string(report_ids.size()) + " reports, " +
                std::to_string(truth_ids.size()) + " truth parcels)");

    const int nc = data.meta.conditions;
    std::vector<double> w = o.contrast;
    if (w.empty()) {
        w.assign(static_cast<std::size_t>(nc), 0.0);
        w[0] = 1.0;
        if (nc > 1) w[1] = -1.0;
    }
    require(static_cast<int>(w.size()) == nc, ErrorKind::Config, "--contrast: need one weight per condition");

    fs::create_directories(o.out);
    io::CsvTable mse_t({"parcel_id", "condition", "mse", "mse_raw"});
    io::CsvTable feat_t({"parcel_id", "source", "peak_value", "time_to_peak", "time_to_undershoot", "fwhm", "correlation"});
    io::CsvTable beta_t({"parcel_id", "condition", "beta_hat", "beta_true"});
    io::CsvTable con_t({"parcel_id", "voxel", "estimate", "truth"});
    io::CsvTable act_t({"parcel_id", "max_activated_mean", "activated"});
    std::vector<io::CsvTable> roc_t;
    std::vector<io::CsvTable> ppm_t;
    for (int m = 0; m < nc; ++m) {
        roc_t.emplace_back(std::vector<std::string>{"parcel_id", "threshold", "fpr", "tpr", "auc"});
        ppm_t.emplace_back(std::vector<std::string>{"parcel_id", "voxel", "x", "y", "z", "ppm", "truth_label"});
    }

    for (std::size_t k = 0; k < data.parcels.size(); ++k) {
        const ParcelDataset& p = data.parcels[k];
        require(data.truths[k].has_value(), ErrorKind::ParcelMismatch,
                "parcel " + std::to_string(p.parcel_id) + " has no ground truth");
        const sim::GroundTruth& t = *data.truths[k];
        const VemReport r = io::read_report(o.reports / parcel_dir_name(p.parcel_id));
        require(r.parcel_id == p.parcel_id && r.state.voxels() == p.voxels() && r.state.conditions() == nc,
                ErrorKind::ParcelMismatch, "report for parcel " + std::to_string(p.parcel_id) + " does not match");
        const std::string id = std::to_string(p.parcel_id);

        const NormalizedView est = r.normalized();
        const NormalizedView tru = normalized_view(t.hrf.taps, t.nrls);
        for (int m = 0; m < nc; ++m) {
            const double e = metrics::mse(est.nrls.row(m).transpose(), tru.nrls.row(m).transpose());
            const double raw = metrics::mse(r.state.m_a.row(m).transpose(), t.nrls.row(m).transpose());
            mse_t.add({id, std::to_string(m), fmt(e), fmt(raw)});

            std::vector<bool> active(static_cast<std::size_t>(p.voxels()));
            for (int j = 0; j < p.voxels(); ++j) active[static_cast<std::size_t>(j)] = t.labels.labels(m, j) == 2;
            const VectorXd ppm = r.state.ppm(m);
            try {
                const auto roc = metrics::roc_curve(ppm, active);
                for (const auto& pt : roc.points) {
                    roc_t[static_cast<std::size_t>(m)].add({id, fmt(pt.threshold), fmt(pt.fpr), fmt(pt.tpr), fmt(roc.auc)});
                }
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::UndefinedAuc) throw;
                log << "parcel " << id << " condition " << m << ": AUC undefined (single-class truth)\n";
            }
            for (int j = 0; j < p.voxels(); ++j) {
                const auto& c = p.coords[static_cast<std::size_t>(j)];
                ppm_t[static_cast<std::size_t>(m)].add({id, std::to_string(j), std::to_string(c[0]), std::to_string(c[1]),
                                                        std::to_string(c[2]), fmt(ppm(j)),
                                                        std::to_string(t.labels.labels(m, j))});
            }
            beta_t.add({id, std::to_string(m), fmt(r.state.beta(m)), t.beta.size() > m ? fmt(t.beta(m)) : ""});
        }

        const double corr = metrics::correlation(est.hrf.segment(1, est.hrf.size() - 2),
                                                 tru.hrf.segment(1, tru.hrf.size() - 2));
        auto add_features = [&](const std::string& source, const VectorXd& taps) {
            try {
                const auto f = metrics::hrf_features(taps, data.meta.dt);
                feat_t.add({id, source, fmt(f.peak_value), fmt(f.time_to_peak), fmt(f.time_to_undershoot), fmt(f.fwhm),
                            fmt(corr)});
            } catch (const Error& e) {
                if (e.kind() != ErrorKind::NoPeak) throw;
                feat_t.add({id, source, "", "", "", "", fmt(corr)});
            }
        };
        add_features("estimate", est.hrf);
        add_features("truth", tru.hrf);

        for (int j = 0; j < p.voxels(); ++j) {
            double e = 0.0;
            double tv = 0.0;
            for (int m = 0; m < nc; ++m) {
                e += w[static_cast<std::size_t>(m)] * est.nrls(m, j);
                tv += w[static_cast<std::size_t>(m)] * tru.nrls(m, j);
            }
            con_t.add({id, std::to_string(j), fmt(e), fmt(tv)});
        }
        const double top = r.state.mixture.mean.col(1).maxCoeff();
        act_t.add({id, fmt(top), metrics::parcel_activation_flag(r.state.mixture) ? "true" : "false"});
        log << "parcel " << id << ": evaluated\n";
    }
    mse_t.write(o.out / "nrl_mse.csv");
    feat_t.write(o.out / "hrf_features.csv");
    beta_t.write(o.out / "beta_estimates.csv");
    con_t.write(o.out / "contrast.csv");
    act_t.write(o.out / "activation.csv");
    for (int m = 0; m < nc; ++m) {
        roc_t[static_cast<std::size_t>(m)].write(o.out / ("roc_m" + std::to_string(m) + ".csv"));
        ppm_t[static_cast<std::size_t>(m)].write(o.out / ("ppm_m" + std::to_string(m) + ".csv"));
    }
}

std::vector<BenchRow> cmd_bench(const BenchOptions& o, std::ostream& log) {
    using clock = std::chrono::steady_clock;
    require(o.iterations >= 5, ErrorKind::Config, "--iterations must be at least 5");
    const auto axes = parse_bench_dims(o.dims);
    std::vector<BenchRow> rows;
    io::CsvTable table({"axis", "voxels", "conditions", "scans", "iterations", "seconds_per_iteration"});
    for (const auto& axis : axes) {
        for (int v : axis.values) {
            BenchRow row;
            row.axis = axis.name;
            row.voxels = axis.name == 'J' ? v : 400;
            row.conditions = axis.name == 'M' ? v : 2;
            row.scans = axis.name == 'N' ? v : 268;
            const ParcelDataset data = bench_parcel(row.voxels, row.conditions, row.scans, o.seed);
            VemConfig config;
            config.max_iters = o.iterations + 1;
            VemEngine engine(data, config);
            engine.initialize();
            engine.iterate();  // warm-up
            const auto t0 = clock::now();
            for (int r = 0; r < o.iterations; ++r) engine.iterate();
            const double total = std::chrono::duration<double>(clock::now() - t0).count();
            row.iterations = o.iterations;
            row.seconds_per_iteration = total / o.iterations;
            rows.push_back(row);
            table.add({std::string(1, row.axis), std::to_string(row.voxels), std::to_string(row.conditions),
                       std::to_string(row.scans), std::to_string(row.iterations), fmt(row.seconds_per_iteration)});
            log << row.axis << ": J=" << row.voxels << " M=" << row.conditions << " N=" << row.scans << " -> "
                << fixed(row.seconds_per_iteration * 1e3, 3) << " ms/iteration\n";
        }
    }
    if (!o.out.empty()) {
        if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
        table.write(o.out);
    }
    return rows;
}

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Joint detection-estimation of evoked activity by variational EM"};
    app.require_subcommand(1);

    SimulateOptions so;
    std::string isi;
    auto* sim_cmd = app.add_subcommand("simulate", "Simulate artificial parcels from a JSON config");
    sim_cmd->add_option("--config", so.config, "Simulation config (JSON)")->required();
    sim_cmd->add_option("--out", so.out, "Output dataset directory")->required();
    sim_cmd->add_option("--isi-sweep", isi, "lo:hi:count, one dataset per ISI");

    FitOptions fo;
    std::string fit_config;
    auto* fit_cmd = app.add_subcommand("fit", "Fit every parcel of a dataset");
    fit_cmd->add_option("--data", fo.data, "Dataset directory or manifest")->required();
    fit_cmd->add_option("--config", fit_config, "VEM config (JSON); defaults when omitted");
    fit_cmd->add_option("--out", fo.out, "Output directory for reports")->required();
    fit_cmd->add_option("--jobs", fo.jobs, "Worker threads")->default_val(1);

    EvaluateOptions eo;
    std::string contrast;
    auto* eval_cmd = app.add_subcommand("evaluate", "Compare reports against ground truth");
    eval_cmd->add_option("--reports", eo.reports, "Directory written by fit")->required();
    eval_cmd->add_option("--truth", eo.truth, "Simulated dataset with ground truth")->required();
    eval_cmd->add_option("--out", eo.out, "Output directory for CSV tables")->required();
    eval_cmd->add_option("--contrast", contrast, "Comma-separated condition weights");

    BenchOptions bo;
    auto* bench_cmd = app.add_subcommand("bench", "Per-iteration timing against J, M and N");
    bench_cmd->add_option("--dims", bo.dims, "e.g. J=400,800;M=2,4;N=268,536")->default_val(bo.dims);
    bench_cmd->add_option("--out", bo.out, "Output CSV")->required();
    bench_cmd->add_option("--iterations", bo.iterations, "Timed iterations per point (>= 5)")->default_val(10);
    bench_cmd->add_option("--seed", bo.seed, "Seed for the synthetic parcels")->default_val(1);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (*sim_cmd) {
            if (!isi.empty()) so.isi_sweep = isi;
            cmd_simulate(so, out);
        } else if (*fit_cmd) {
            if (!fit_config.empty()) fo.config = fit_config;
            ErrorKind worst = ErrorKind::Config;
            const int failed = cmd_fit(fo, out, &worst);
            if (failed > 0) {
                err << failed << " parcel(s) failed\n";
                return exit_code_for(worst);
            }
        } else if (*eval_cmd) {
            if (!contrast.empty()) eo.contrast = parse_doubles(contrast, "--contrast");
            cmd_evaluate(eo, out);
        } else if (*bench_cmd) {
            cmd_bench(bo, out);
        }
    } catch (const Error& e) {
        err << "error: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::filesystem::filesystem_error& e) {
        err << "error: " << e.what() << "\n";
        return kExitData;
    }
    return kExitOk;
}

}  // namespace jde::cli
