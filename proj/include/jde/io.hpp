#pragma once

// On-disk formats: raw float64 arrays with a 16-byte header, JSON manifests and
// reports, CSV paradigms, masks and tables. See docs/formats.md.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "jde/model.hpp"
#include "jde/simulate.hpp"
#include "jde/vem.hpp"

namespace jde::io {

namespace fs = std::filesystem;
using nlohmann::json;

inline constexpr int kFormatVersion = 1;
inline constexpr char kArrayMagic[8] = {'V', 'J', 'D', 'E', 'A', 'R', 'R', '\0'};

// ---- raw arrays ----

std::string encode_array(const MatrixXd& a);
MatrixXd decode_array(const std::string& bytes, const std::string& origin);
void write_array(const fs::path& path, const MatrixXd& a);
MatrixXd read_array(const fs::path& path);
/// Reads and checks the header dims against the expected shape (Shape error).
MatrixXd read_array(const fs::path& path, Eigen::Index rows, Eigen::Index cols);

// ---- files ----

std::string read_text(const fs::path& path);
/// Writes through a temporary file in the same directory, then renames.
void atomic_write(const fs::path& path, const std::string& bytes);

/// Exclusive lock on a directory, held as `<dir>/.lock` for the object's lifetime.
class DirectoryLock {
public:
    explicit DirectoryLock(const fs::path& dir);
    ~DirectoryLock();
    DirectoryLock(const DirectoryLock&) = delete;
    DirectoryLock& operator=(const DirectoryLock&) = delete;

private:
    fs::path lock_;
};

// ---- CSV ----

std::string csv_escape(const std::string& field);
std::vector<std::string> csv_split(const std::string& line);
std::string format_double(double x);

class CsvTable {
public:
    explicit CsvTable(std::vector<std::string> header) : header_(std::move(header)) {}
    void add(std::vector<std::string> row);
    std::string str() const;
    void write(const fs::path& path) const { atomic_write(path, str()); }
    std::size_t rows() const { return rows_.size(); }

private:
    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

std::vector<std::vector<int>> read_int_grid(const fs::path& path);
void write_int_grid(const fs::path& path, const std::vector<std::vector<int>>& grid);

/// CSV with columns condition,onset_seconds; conditions keep first-appearance order.
Paradigm read_paradigm_csv(const fs::path& path, double session_length);
void write_paradigm_csv(const fs::path& path, const Paradigm& paradigm);

// ---- configs ----

sim::SimulationConfig parse_simulation_config(const json& j, const fs::path& base_dir);
sim::SimulationConfig read_simulation_config(const fs::path& path);
json to_json(const sim::SimulationConfig& c);

VemConfig parse_vem_config(const json& j);
VemConfig read_vem_config(const fs::path& path);
json to_json(const VemConfig& c);

// ---- datasets ----

struct DatasetMeta {
    int format_version = kFormatVersion;
    double tr = 0.0;
    double dt = 0.0;
    int scans = 0;
    int order = 0;
    int conditions = 0;
    int classes = 2;
    double drift_cutoff = 128.0;
    std::optional<std::uint64_t> seed;
    std::optional<double> isi;
};

struct LoadedDataset {
    DatasetMeta meta;
    std::vector<ParcelDataset> parcels;
    std::vector<std::optional<sim::GroundTruth>> truths;  // one slot per parcel
};

fs::path write_dataset(const std::vector<ParcelDataset>& parcels,
                       const std::vector<std::optional<sim::GroundTruth>>& truths, const fs::path& dir,
                       const DatasetMeta& extra = {});
/// Accepts the manifest path or its directory.
LoadedDataset read_dataset(const fs::path& manifest);

// ---- reports ----

/// Writes `<dir>/report.json`, its arrays, and `<dir>/timing.json` (wall times,
/// kept apart so reports hash identically across runs).
void write_report(const VemReport& report, const fs::path& dir);
VemReport read_report(const fs::path& dir);

}  // namespace jde::io
