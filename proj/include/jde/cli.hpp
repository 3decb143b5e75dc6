#pragma once

// Subcommands behind the `jde` executable. Each returns a process exit code:
// 0 success, 2 configuration error, 3 data error, 4 numerical failure.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "jde/errors.hpp"

namespace jde::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 2;
inline constexpr int kExitData = 3;
inline constexpr int kExitNumerical = 4;

int exit_code_for(ErrorKind kind);

/// "lo:hi:count" -> count evenly spaced values from lo to hi.
std::vector<double> parse_isi_sweep(const std::string& spec);

struct BenchAxis {
    char name = 'J';  // J, M or N
    std::vector<int> values;
};

/// "J=400,800;M=2,4;N=268,536"
std::vector<BenchAxis> parse_bench_dims(const std::string& spec);

struct BenchRow {
    char axis = 'J';
    int voxels = 0;
    int conditions = 0;
    int scans = 0;
    int iterations = 0;
    double seconds_per_iteration = 0.0;
};

struct SimulateOptions {
    fs::path config;
    fs::path out;
    std::optional<std::string> isi_sweep;
};

struct FitOptions {
    fs::path data;
    std::optional<fs::path> config;
    fs::path out;
    int jobs = 1;
};

struct EvaluateOptions {
    fs::path reports;
    fs::path truth;
    fs::path out;
    std::vector<double> contrast;
};

struct BenchOptions {
    std::string dims = "J=400,800;M=2,4;N=268,536";
    fs::path out;
    int iterations = 10;
    std::uint64_t seed = 1;
};

// These throw jde::Error; run() maps errors to exit codes.
void cmd_simulate(const SimulateOptions& o, std::ostream& log);
/// Returns the number of parcels that failed; the worst failure kind goes to `worst`.
int cmd_fit(const FitOptions& o, std::ostream& log, ErrorKind* worst = nullptr);
void cmd_evaluate(const EvaluateOptions& o, std::ostream& log);
std::vector<BenchRow> cmd_bench(const BenchOptions& o, std::ostream& log);

/// Entry point used by the executable.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace jde::cli
