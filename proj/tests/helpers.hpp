#pragma once

// Small fixtures shared by the unit tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "jde/model.hpp"

namespace jde::testing {

inline constexpr double kLog2Pi = 1.8378770664093453;

inline MatrixXd random_matrix(int rows, int cols, std::mt19937_64& rng, double sd = 1.0) {
    std::normal_distribution<double> n(0.0, sd);
    MatrixXd m(rows, cols);
    for (int c = 0; c < cols; ++c)
        for (int r = 0; r < rows; ++r) m(r, c) = n(rng);
    return m;
}

inline VectorXd random_vector(int n, std::mt19937_64& rng, double sd = 1.0) {
    return random_matrix(n, 1, rng, sd).col(0);
}

/// Random SPD matrix with eigenvalues bounded away from zero.
inline MatrixXd random_spd(int n, std::mt19937_64& rng, double floor = 0.1) {
    const MatrixXd a = random_matrix(n, n, rng);
    return a * a.transpose() / n + floor * MatrixXd::Identity(n, n);
}

/// Log-density of N(mean, cov) at x from a dense factorisation.
inline double dense_mvn_log_density(const VectorXd& x, const VectorXd& mean, const MatrixXd& cov) {
    Eigen::LDLT<MatrixXd> ldlt(cov);
    const VectorXd r = x - mean;
    const double quad = r.dot(ldlt.solve(r));
    const double log_det = ldlt.vectorD().array().log().sum();
    return -0.5 * x.size() * kLog2Pi - 0.5 * log_det - 0.5 * quad;
}

/// Paradigm with evenly spread onsets for `conditions` conditions.
inline Paradigm spread_paradigm(int conditions, int events, double session, double offset = 0.0) {
    Paradigm p;
    p.session_length = session;
    const int total = conditions * events;
    for (int m = 0; m < conditions; ++m) {
        Condition c;
        c.name = "c" + std::to_string(m + 1);
        for (int e = 0; e < events; ++e) {
            const double t = offset + (e * conditions + m) * session / (total + 1);
            c.onsets.push_back(t);
        }
        p.conditions.push_back(c);
    }
    return p;
}

/// Random tiny dataset on an nx x ny grid.
inline ParcelDataset tiny_dataset(int scans, int order, int conditions, int nx, int ny, std::mt19937_64& rng,
                                  double tr = 1.0, double dt = 0.5, double cutoff = 1e6) {
    const Paradigm p = spread_paradigm(conditions, 2, scans * tr);
    return make_dataset(0, random_matrix(scans, nx * ny, rng), grid_coords(nx, ny, 1), p, tr, dt, order, cutoff);
}

inline std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

/// FNV-1a over every regular file under dir (relative path + contents), sorted by path.
inline std::uint64_t hash_tree(const std::filesystem::path& dir, const std::vector<std::string>& skip = {}) {
    std::vector<std::filesystem::path> files;
    for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        bool skipped = false;
        for (const auto& s : skip) skipped = skipped || e.path().filename() == s;
        if (!skipped) files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const std::string& s) {
        for (unsigned char c : s) {
            h ^= c;
            h *= 1099511628211ull;
        }
    };
    for (const auto& f : files) {
        mix(std::filesystem::relative(f, dir).generic_string());
        mix(slurp(f));
    }
    return h;
}

inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / ("jde_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

}  // namespace jde::testing
