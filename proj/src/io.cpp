#include "jde/io.hpp"

#include <atomic>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>

#include <fcntl.h>
#include <unistd.h>

#include "jde/errors.hpp"

namespace jde::io {

namespace {

template <typename T>
T to_little(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        unsigned char b[sizeof(T)];
        std::memcpy(b, &v, sizeof(T));
        for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(b[i], b[sizeof(T) - 1 - i]);
        std::memcpy(&v, b, sizeof(T));
    }
    return v;
}

template <typename T>
void put(std::string& out, T v) {
    v = to_little(v);
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out.append(b, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t offset) {
    T v;
    std::memcpy(&v, in.data() + offset, sizeof(T));
    return to_little(v);
}

json num(double x) {
    if (std::isfinite(x)) return x;
    if (std::isnan(x)) return "nan";
    return x > 0 ? "inf" : "-inf";
}

double get_num(const json& j, const std::string& where) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "inf") return std::numeric_limits<double>::infinity();
        if (s == "-inf") return -std::numeric_limits<double>::infinity();
        if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    }
    fail(ErrorKind::Format, where + ": expected a number");
}

json matrix_json(const MatrixXd& m) {
    json rows = json::array();
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        json row = json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(num(m(r, c)));
        rows.push_back(std::move(row));
    }
    return rows;
}

json vector_json(const VectorXd& v) {
    json out = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) out.push_back(num(v(i)));
    return out;
}

// ---- strict JSON field access for configs ----

class Fields {
public:
    Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        require(j.is_object(), ErrorKind::Config, where("") + "expected an object");
    }
    ~Fields() = default;

    bool has(const std::string& key) const { return j_.contains(key); }

    const json& at(const std::string& key) {
        seen_.insert(key);
        require(j_.contains(key), ErrorKind::Config, where(key) + "missing");
        return j_.at(key);
    }

    template <typename T>
    void opt(const std::string& key, T& out) {
        if (!j_.contains(key)) return;
        seen_.insert(key);
        out = get<T>(key, j_.at(key));
    }

    template <typename T>
    T req(const std::string& key) {
        return get<T>(key, at(key));
    }

    std::string where(const std::string& key) const {
        std::string p = path_;
        if (!key.empty()) p += (p.empty() ? "" : ".") + key;
        return (p.empty() ? std::string("config") : p) + ": ";
    }

    std::string child(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            require(seen_.count(k) > 0, ErrorKind::Config, where(k) + "unknown key");
        }
    }

private:
    template <typename T>
    T get(const std::string& key, const json& v) const {
        try {
            if constexpr (std::is_same_v<T, double>) {
                require(v.is_number(), ErrorKind::Config, where(key) + "expected a number");
            } else if constexpr (std::is_same_v<T, bool>) {
                require(v.is_boolean(), ErrorKind::Config, where(key) + "expected a boolean");
            } else if constexpr (std::is_integral_v<T>) {
                require(v.is_number_integer(), ErrorKind::Config, where(key) + "expected an integer");
            } else if constexpr (std::is_same_v<T, std::string>) {
                require(v.is_string(), ErrorKind::Config, where(key) + "expected a string");
            }
            return v.get<T>();
        } catch (const json::exception& e) {
            fail(ErrorKind::Config, where(key) + e.what());
        }
    }

    const json& j_;
    std::string path_;
    std::set<std::string> seen_;
};

MatrixXd parse_matrix(const json& j, const std::string& where) {
    require(j.is_array() && !j.empty() && j.front().is_array(), ErrorKind::Config, where + ": expected a 2-D array");
    const auto rows = static_cast<Eigen::Index>(j.size());
    const auto cols = static_cast<Eigen::Index>(j.front().size());
    MatrixXd m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const json& row = j[static_cast<std::size_t>(r)];
        require(row.is_array() && static_cast<Eigen::Index>(row.size()) == cols, ErrorKind::Config,
                where + ": ragged array");
        for (Eigen::Index c = 0; c < cols; ++c) {
            const json& v = row[static_cast<std::size_t>(c)];
            require(v.is_number(), ErrorKind::Config, where + ": expected numbers");
            m(r, c) = v.get<double>();
        }
    }
    return m;
}

VectorXd parse_vector(const json& j, const std::string& where) {
    if (j.is_number()) return VectorXd::Constant(1, j.get<double>());
    require(j.is_array(), ErrorKind::Config, where + ": expected a number or an array");
    VectorXd v(static_cast<Eigen::Index>(j.size()));
    for (std::size_t i = 0; i < j.size(); ++i) {
        require(j[i].is_number(), ErrorKind::Config, where + ": expected numbers");
        v(static_cast<Eigen::Index>(i)) = j[i].get<double>();
    }
    return v;
}

json parse_json_file(const fs::path& path, ErrorKind kind) {
    const std::string text = read_text(path);
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        fail(kind, path.string() + ": " + e.what());
    }
}

std::string array_name(int parcel_id, const std::string& what) {
    return "parcel_" + std::to_string(parcel_id) + "_" + what + ".arr";
}

MatrixXd labels_to_matrix(const MatrixXi& labels) { return labels.cast<double>(); }

MatrixXi matrix_to_labels(const MatrixXd& m, const std::string& origin) {
    MatrixXi out(m.rows(), m.cols());
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        for (Eigen::Index c = 0; c < m.cols(); ++c) {
            const double v = m(r, c);
            require(v == std::round(v), ErrorKind::Format, origin + ": non-integer label");
            out(r, c) = static_cast<int>(v);
        }
    }
    return out;
}

}  // namespace

// ---- raw arrays ----

std::string encode_array(const MatrixXd& a) {
    require(a.rows() <= std::numeric_limits<std::uint32_t>::max() && a.cols() <= std::numeric_limits<std::uint32_t>::max(),
            ErrorKind::Shape, "array dimension overflows 32 bits");
    std::string out;
    out.reserve(16 + static_cast<std::size_t>(a.size()) * 8);
    out.append(kArrayMagic, 8);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.rows()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(a.cols()));
    for (Eigen::Index r = 0; r < a.rows(); ++r) {
        for (Eigen::Index c = 0; c < a.cols(); ++c) put<double>(out, a(r, c));
    }
    return out;
}

MatrixXd decode_array(const std::string& bytes, const std::string& origin) {
    require(bytes.size() >= 16, ErrorKind::Format, origin + ": truncated header");
    require(std::memcmp(bytes.data(), kArrayMagic, 8) == 0, ErrorKind::Format, origin + ": bad magic bytes");
    const auto rows = get<std::uint32_t>(bytes, 8);
    const auto cols = get<std::uint32_t>(bytes, 12);
    const std::size_t count = static_cast<std::size_t>(rows) * cols;
    require(bytes.size() == 16 + 8 * count, ErrorKind::Format,
            origin + ": payload size does not match header dims " + std::to_string(rows) + "x" + std::to_string(cols));
    MatrixXd a(rows, cols);
    std::size_t off = 16;
    for (std::uint32_t r = 0; r < rows; ++r) {
        for (std::uint32_t c = 0; c < cols; ++c, off += 8) a(r, c) = get<double>(bytes, off);
    }
    return a;
}

void write_array(const fs::path& path, const MatrixXd& a) { atomic_write(path, encode_array(a)); }

MatrixXd read_array(const fs::path& path) { return decode_array(read_text(path), path.string()); }

MatrixXd read_array(const fs::path& path, Eigen::Index rows, Eigen::Index cols) {
    MatrixXd a = read_array(path);
    require(a.rows() == rows && a.cols() == cols, ErrorKind::Shape,
            path.string() + ": header dims " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                " but " + std::to_string(rows) + "x" + std::to_string(cols) + " declared");
    return a;
}

// ---- files ----

std::string read_text(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    require(static_cast<bool>(in), ErrorKind::Io, "cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void atomic_write(const fs::path& path, const std::string& bytes) {
    static std::atomic<unsigned> counter{0};
    const fs::path tmp = path.string() + ".tmp." + std::to_string(::getpid()) + "." + std::to_string(counter++);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorKind::Io, "cannot write " + tmp.string());
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        out.flush();
        require(static_cast<bool>(out), ErrorKind::Io, "short write to " + tmp.string());
    }
    std::error_code ec;
    fs::rename(tmp, path, ec);
    if (ec) {
        fs::remove(tmp);
        fail(ErrorKind::Io, "cannot rename onto " + path.string() + ": " + ec.message());
    }
}

DirectoryLock::DirectoryLock(const fs::path& dir) : lock_(dir / ".lock") {
    std::error_code ec;
    fs::create_directories(dir, ec);
    require(!ec, ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
    const int fd = ::open(lock_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0) {
        fail(ErrorKind::Io, errno == EEXIST ? dir.string() + " is locked by another writer (" + lock_.string() + ")"
                                            : "cannot lock " + dir.string() + ": " + std::strerror(errno));
    }
    ::close(fd);
}

DirectoryLock::~DirectoryLock() {
    std::error_code ec;
    fs::remove(lock_, ec);
}

// ---- CSV ----

std::string csv_escape(const std::string& field) {
    if (field.find_first_of(",\"\r\n") == std::string::npos) return field;
    std::string out = "\"";
    for (char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

std::vector<std::string> csv_split(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

std::string format_double(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

void CsvTable::add(std::vector<std::string> row) {
    require(row.size() == header_.size(), ErrorKind::DimensionMismatch, "CSV row width differs from header");
    rows_.push_back(std::move(row));
}

std::string CsvTable::str() const {
    std::string out;
    auto line = [&](const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out += ',';
            out += csv_escape(fields[i]);
        }
        out += "\r\n";
    };
    line(header_);
    for (const auto& r : rows_) line(r);
    return out;
}

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> text_lines(const std::string& text) {
    std::vector<std::string> lines;
    std::istringstream in(text);
    std::string line;
    while (std::getline(in, line)) {
        if (!trim(line).empty()) lines.push_back(line);
    }
    return lines;
}

}  // namespace

std::vector<std::vector<int>> read_int_grid(const fs::path& path) {
    std::vector<std::vector<int>> grid;
    for (const auto& line : text_lines(read_text(path))) {
        std::vector<int> row;
        for (const auto& f : csv_split(line)) {
            const std::string t = trim(f);
            std::size_t used = 0;
            int v = 0;
            try {
                v = std::stoi(t, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            require(used == t.size() && !t.empty(), ErrorKind::Format,
                    path.string() + ": '" + t + "' is not an integer");
            row.push_back(v);
        }
        grid.push_back(std::move(row));
    }
    return grid;
}

void write_int_grid(const fs::path& path, const std::vector<std::vector<int>>& grid) {
    std::string out;
    for (const auto& row : grid) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) out += ',';
            out += std::to_string(row[i]);
        }
        out += '\n';
    }
    atomic_write(path, out);
}

Paradigm read_paradigm_csv(const fs::path& path, double session_length) {
    const auto lines = text_lines(read_text(path));
    require(!lines.empty(), ErrorKind::InvalidParadigm, path.string() + ": empty paradigm file");
    Paradigm p;
    p.session_length = session_length;
    std::map<std::string, std::size_t> index;
    for (std::size_t k = 0; k < lines.size(); ++k) {
        const auto f = csv_split(lines[k]);
        require(f.size() == 2, ErrorKind::InvalidParadigm,
                path.string() + " line " + std::to_string(k + 1) + ": expected condition,onset_seconds");
        const std::string name = trim(f[0]);
        const std::string onset = trim(f[1]);
        if (k == 0 && name == "condition" && onset == "onset_seconds") continue;
        double t = 0.0;
        std::size_t used = 0;
        try {
            t = std::stod(onset, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        require(used == onset.size() && used > 0, ErrorKind::InvalidParadigm,
                path.string() + " line " + std::to_string(k + 1) + ": bad onset '" + onset + "'");
        auto [it, inserted] = index.emplace(name, p.conditions.size());
        if (inserted) p.conditions.push_back({name, {}});
        p.conditions[it->second].onsets.push_back(t);
    }
    for (auto& c : p.conditions) std::sort(c.onsets.begin(), c.onsets.end());
    p.validate();
    return p;
}

void write_paradigm_csv(const fs::path& path, const Paradigm& paradigm) {
    CsvTable t({"condition", "onset_seconds"});
    for (const auto& c : paradigm.conditions) {
        for (double s : c.onsets) t.add({c.name, format_double(s)});
    }
    t.write(path);
}

// ---- configs ----

sim::SimulationConfig parse_simulation_config(const json& j, const fs::path& base_dir) {
    sim::SimulationConfig c;
    Fields f(j, "");
    f.opt("seed", c.seed);
    f.opt("parcels", c.parcels);
    f.opt("scans", c.scans);
    f.opt("tr", c.tr);
    f.opt("dt", c.dt);
    f.opt("order", c.order);
    f.opt("drift_cutoff", c.drift_cutoff);
    f.opt("drift_std", c.drift_std);
    require(c.parcels >= 1, ErrorKind::Config, "parcels: must be at least 1");
    require(c.scans >= 2, ErrorKind::Config, "scans: must be at least 2");
    require(c.tr > 0.0, ErrorKind::Config, "tr: must be positive");
    require(c.dt > 0.0 && c.dt < c.tr, ErrorKind::Config, "dt: must lie in (0, tr)");
    require(c.order >= 4, ErrorKind::Config, "order: must be at least 4");
    require(c.drift_std >= 0.0, ErrorKind::Config, "drift_std: must be nonnegative");

    if (f.has("paradigm")) {
        Fields p(f.at("paradigm"), "paradigm");
        if (p.has("file")) c.paradigm.file = base_dir / p.req<std::string>("file");
        p.opt("conditions", c.paradigm.names);
        p.opt("events_per_condition", c.paradigm.events_per_condition);
        p.opt("isi", c.paradigm.isi);
        p.opt("jitter", c.paradigm.jitter);
        p.finish();
        require(!c.paradigm.names.empty(), ErrorKind::Config, "paradigm.conditions: must not be empty");
        require(c.paradigm.jitter >= 0.0, ErrorKind::Config, "paradigm.jitter: must be nonnegative");
    }

    const json& mj = f.at("mixture");
    {
        Fields m(mj, "mixture");
        c.mixture.classes = 2;
        m.opt("classes", c.mixture.classes);
        c.mixture.mean = parse_matrix(m.at("mean"), "mixture.mean");
        c.mixture.var = parse_matrix(m.at("var"), "mixture.var");
        m.finish();
        try {
            c.mixture.validate();
        } catch (const Error& e) {
            fail(ErrorKind::Config, std::string("mixture: ") + e.what());
        }
    }
    const int nc = c.mixture.conditions();

    {
        Fields l(f.at("labels"), "labels");
        if (l.has("masks")) {
            const json& masks = l.at("masks");
            require(masks.is_array(), ErrorKind::Config, "labels.masks: expected an array of paths");
            for (const auto& m : masks) {
                require(m.is_string(), ErrorKind::Config, "labels.masks: expected an array of paths");
                c.labels.masks.push_back(base_dir / m.get<std::string>());
            }
            require(static_cast<int>(c.labels.masks.size()) == nc, ErrorKind::Config,
                    "labels.masks: need one mask per condition");
        } else {
            Fields p(l.at("potts"), "labels.potts");
            c.labels.beta = parse_vector(p.at("beta"), "labels.potts.beta");
            if (p.has("shape")) {
                const json& s = p.at("shape");
                require(s.is_array() && s.size() == 3, ErrorKind::Config, "labels.potts.shape: expected [nx, ny, nz]");
                for (int k = 0; k < 3; ++k) {
                    require(s[static_cast<std::size_t>(k)].is_number_integer() && s[static_cast<std::size_t>(k)].get<int>() >= 1,
                            ErrorKind::Config, "labels.potts.shape: expected positive integers");
                    c.labels.shape[static_cast<std::size_t>(k)] = s[static_cast<std::size_t>(k)].get<int>();
                }
            }
            p.opt("sweeps", c.labels.sweeps);
            p.finish();
            require((c.labels.beta.array() >= 0.0).all(), ErrorKind::Config, "labels.potts.beta: must be nonnegative");
            require(c.labels.sweeps >= 1, ErrorKind::Config, "labels.potts.sweeps: must be at least 1");
            require(c.labels.beta.size() == 1 || c.labels.beta.size() == nc, ErrorKind::Config,
                    "labels.potts.beta: need one value or one per condition");
        }
        l.finish();
    }

    if (f.has("noise")) {
        Fields n(f.at("noise"), "noise");
        std::string kind = "white";
        n.opt("kind", kind);
        try {
            c.noise.kind = sim::noise_kind_from_string(kind);
        } catch (const Error&) {
            fail(ErrorKind::Config, "noise.kind: expected white, ar1 or ar2");
        }
        n.opt("variance", c.noise.variance);
        n.opt("rho", c.noise.rho);
        n.opt("phi1", c.noise.phi1);
        n.opt("phi2", c.noise.phi2);
        if (n.has("lag1")) {
            const double lag1 = n.req<double>("lag1");
            require(c.noise.kind == sim::NoiseKind::Ar2, ErrorKind::Config, "noise.lag1: only valid for ar2");
            c.noise = sim::ar2_from_lag1(lag1, c.noise.phi2, c.noise.variance);
        }
        n.finish();
        require(c.noise.variance >= 0.0, ErrorKind::Config, "noise.variance: must be nonnegative");
        require(std::abs(c.noise.rho) < 1.0, ErrorKind::Config, "noise.rho: must satisfy |rho| < 1");
    }
    require(c.labels.masks.empty() || !c.paradigm.names.empty(), ErrorKind::Config, "paradigm.conditions missing");
    require(c.paradigm.file || static_cast<int>(c.paradigm.names.size()) == nc, ErrorKind::Config,
            "paradigm.conditions: need one name per mixture row");
    f.finish();
    return c;
}

sim::SimulationConfig read_simulation_config(const fs::path& path) {
    const json j = parse_json_file(path, ErrorKind::Config);
    return parse_simulation_config(j, path.parent_path());
}

json to_json(const sim::SimulationConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["parcels"] = c.parcels;
    j["scans"] = c.scans;
    j["tr"] = c.tr;
    j["dt"] = c.dt;
    j["order"] = c.order;
    j["drift_cutoff"] = c.drift_cutoff;
    j["drift_std"] = c.drift_std;
    json p;
    if (c.paradigm.file) p["file"] = c.paradigm.file->string();
    p["conditions"] = c.paradigm.names;
    p["events_per_condition"] = c.paradigm.events_per_condition;
    p["isi"] = c.paradigm.isi;
    p["jitter"] = c.paradigm.jitter;
    j["paradigm"] = p;
    if (!c.labels.masks.empty()) {
        json m = json::array();
        for (const auto& path : c.labels.masks) m.push_back(path.string());
        j["labels"]["masks"] = m;
    } else {
        j["labels"]["potts"] = {{"beta", vector_json(c.labels.beta)},
                                {"shape", {c.labels.shape[0], c.labels.shape[1], c.labels.shape[2]}},
                                {"sweeps", c.labels.sweeps}};
    }
    j["mixture"] = {{"classes", c.mixture.classes}, {"mean", matrix_json(c.mixture.mean)},
                    {"var", matrix_json(c.mixture.var)}};
    j["noise"] = {{"kind", sim::to_string(c.noise.kind)}, {"variance", c.noise.variance}, {"rho", c.noise.rho},
                  {"phi1", c.noise.phi1}, {"phi2", c.noise.phi2}};
    return j;
}

VemConfig parse_vem_config(const json& j) {
    VemConfig c;
    Fields f(j, "");
    if (f.has("noise_mode")) {
        const auto s = f.req<std::string>("noise_mode");
        require(s == "white" || s == "ar1", ErrorKind::Config, "noise_mode: expected white or ar1");
        c.noise_mode = noise_mode_from_string(s);
    }
    f.opt("classes", c.classes);
    f.opt("max_iters", c.max_iters);
    f.opt("tol_h", c.tol_h);
    f.opt("tol_a", c.tol_a);
    f.opt("lambda_vh", c.lambda_vh);
    f.opt("lambda_beta", c.lambda_beta);
    f.opt("beta_max", c.beta_max);
    f.opt("beta_step", c.beta_step);
    f.opt("estimate_beta", c.estimate_beta);
    f.opt("estimate_vh", c.estimate_vh);
    f.opt("jitter", c.jitter);
    f.opt("v_min", c.v_min);
    f.opt("empty_class_eps", c.empty_class_eps);
    f.opt("eq_sweeps", c.eq_sweeps);
    f.opt("ar1_max_inner", c.ar1_max_inner);
    f.opt("ar1_tol", c.ar1_tol);
    f.opt("rho_max", c.rho_max);
    f.opt("seed", c.seed);
    f.opt("beta_init", c.beta_init);
    f.opt("vh_init", c.vh_init);
    f.opt("hrf_init_scale", c.hrf_init_scale);
    f.opt("init_label_prob", c.init_label_prob);
    f.finish();
    c.validate();
    return c;
}

VemConfig read_vem_config(const fs::path& path) { return parse_vem_config(parse_json_file(path, ErrorKind::Config)); }

json to_json(const VemConfig& c) {
    return {{"noise_mode", to_string(c.noise_mode)},
            {"classes", c.classes},
            {"max_iters", c.max_iters},
            {"tol_h", c.tol_h},
            {"tol_a", c.tol_a},
            {"lambda_vh", c.lambda_vh},
            {"lambda_beta", c.lambda_beta},
            {"beta_max", c.beta_max},
            {"beta_step", c.beta_step},
            {"estimate_beta", c.estimate_beta},
            {"estimate_vh", c.estimate_vh},
            {"jitter", c.jitter},
            {"v_min", c.v_min},
            {"empty_class_eps", c.empty_class_eps},
            {"eq_sweeps", c.eq_sweeps},
            {"ar1_max_inner", c.ar1_max_inner},
            {"ar1_tol", c.ar1_tol},
            {"rho_max", c.rho_max},
            {"seed", c.seed},
            {"beta_init", c.beta_init},
            {"vh_init", c.vh_init},
            {"hrf_init_scale", c.hrf_init_scale},
            {"init_label_prob", c.init_label_prob}};
}

// ---- datasets ----

fs::path write_dataset(const std::vector<ParcelDataset>& parcels,
                       const std::vector<std::optional<sim::GroundTruth>>& truths, const fs::path& dir,
                       const DatasetMeta& extra) {
    require(!parcels.empty(), ErrorKind::InvalidArgument, "cannot write an empty parcel list");
    require(truths.empty() || truths.size() == parcels.size(), ErrorKind::DimensionMismatch,
            "ground truth list must match the parcel list");
    const ParcelDataset& first = parcels.front();
    for (const auto& p : parcels) {
        p.validate();
        require(p.scans() == first.scans() && p.order() == first.order() && p.conditions() == first.conditions() &&
                    p.design.tr == first.design.tr && p.design.dt == first.design.dt &&
                    p.drift_cutoff == first.drift_cutoff,
                ErrorKind::DimensionMismatch, "parcels of one dataset must share the acquisition settings");
    }

    DirectoryLock lock(dir);
    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["tr"] = first.design.tr;
    manifest["dt"] = first.design.dt;
    manifest["scans"] = first.scans();
    manifest["order"] = first.order();
    manifest["conditions"] = first.conditions();
    manifest["drift_cutoff"] = first.drift_cutoff;
    int classes = extra.classes;
    for (const auto& t : truths) {
        if (t) classes = t->mixture.classes;
    }
    manifest["classes"] = classes;
    if (extra.seed) manifest["seed"] = *extra.seed;
    if (extra.isi) manifest["isi"] = *extra.isi;
    json para;
    para["session_length"] = first.paradigm.session_length;
    para["conditions"] = json::array();
    for (const auto& c : first.paradigm.conditions) para["conditions"].push_back({{"name", c.name}, {"onsets", c.onsets}});
    manifest["paradigm"] = para;

    json plist = json::array();
    for (std::size_t k = 0; k < parcels.size(); ++k) {
        const ParcelDataset& p = parcels[k];
        const int id = p.parcel_id;
        json entry;
        entry["id"] = id;
        entry["voxels"] = p.voxels();
        MatrixXd coords(p.voxels(), 3);
        for (int j = 0; j < p.voxels(); ++j) {
            for (int a = 0; a < 3; ++a) coords(j, a) = p.coords[static_cast<std::size_t>(j)][static_cast<std::size_t>(a)];
        }
        entry["arrays"] = {{"y", array_name(id, "y")}, {"coords", array_name(id, "coords")}};
        write_array(dir / array_name(id, "y"), p.y);
        write_array(dir / array_name(id, "coords"), coords);
        if (!truths.empty() && truths[k]) {
            const sim::GroundTruth& t = *truths[k];
            json tj;
            tj["arrays"] = {{"labels", array_name(id, "labels")},
                            {"nrls", array_name(id, "nrls")},
                            {"hrf", array_name(id, "hrf")},
                            {"drift_coeffs", array_name(id, "drift_coeffs")},
                            {"noise", array_name(id, "noise")}};
            write_array(dir / array_name(id, "labels"), labels_to_matrix(t.labels.labels));
            write_array(dir / array_name(id, "nrls"), t.nrls);
            write_array(dir / array_name(id, "hrf"), t.hrf.taps);
            write_array(dir / array_name(id, "drift_coeffs"), t.drift_coeffs);
            write_array(dir / array_name(id, "noise"), t.noise_samples);
            tj["mixture"] = {{"classes", t.mixture.classes}, {"mean", matrix_json(t.mixture.mean)},
                             {"var", matrix_json(t.mixture.var)}};
            tj["beta"] = vector_json(t.beta);
            tj["noise"] = {{"kind", sim::to_string(t.noise.kind)}, {"variance", t.noise.variance},
                           {"rho", t.noise.rho}, {"phi1", t.noise.phi1}, {"phi2", t.noise.phi2}};
            tj["seed"] = t.seed;
            entry["truth"] = tj;
        }
        plist.push_back(entry);
    }
    manifest["parcels"] = plist;
    const fs::path path = dir / "manifest.json";
    atomic_write(path, manifest.dump(2) + "\n");
    return path;
}

LoadedDataset read_dataset(const fs::path& manifest_path) {
    const fs::path path = fs::is_directory(manifest_path) ? manifest_path / "manifest.json" : manifest_path;
    const fs::path dir = path.parent_path();
    const json m = parse_json_file(path, ErrorKind::Format);
    LoadedDataset out;
    try {
        require(m.contains("format_version") && m["format_version"].is_number_integer(), ErrorKind::Format,
                path.string() + ": missing format_version");
        out.meta.format_version = m["format_version"].get<int>();
        require(out.meta.format_version == kFormatVersion, ErrorKind::Version,
                path.string() + ": unsupported format_version " + std::to_string(out.meta.format_version));
        out.meta.tr = m.at("tr").get<double>();
        out.meta.dt = m.at("dt").get<double>();
        out.meta.scans = m.at("scans").get<int>();
        out.meta.order = m.at("order").get<int>();
        out.meta.conditions = m.at("conditions").get<int>();
        out.meta.classes = m.value("classes", 2);
        out.meta.drift_cutoff = m.at("drift_cutoff").get<double>();
        if (m.contains("seed")) out.meta.seed = m["seed"].get<std::uint64_t>();
        if (m.contains("isi")) out.meta.isi = m["isi"].get<double>();

        Paradigm para;
        para.session_length = m.at("paradigm").at("session_length").get<double>();
        for (const auto& c : m.at("paradigm").at("conditions")) {
            para.conditions.push_back({c.at("name").get<std::string>(), c.at("onsets").get<std::vector<double>>()});
        }
        require(para.size() == out.meta.conditions, ErrorKind::Shape, path.string() + ": paradigm condition count");

        const int n = out.meta.scans;
        const int nc = out.meta.conditions;
        for (const auto& e : m.at("parcels")) {
            const int id = e.at("id").get<int>();
            const int nv = e.at("voxels").get<int>();
            const auto& arrays = e.at("arrays");
            MatrixXd y = read_array(dir / arrays.at("y").get<std::string>(), n, nv);
            const MatrixXd cm = read_array(dir / arrays.at("coords").get<std::string>(), nv, 3);
            std::vector<Coord> coords(static_cast<std::size_t>(nv));
            for (int j = 0; j < nv; ++j) {
                for (int a = 0; a < 3; ++a) coords[static_cast<std::size_t>(j)][static_cast<std::size_t>(a)] = static_cast<int>(cm(j, a));
            }
            ParcelDataset ds;
            try {
                ds = make_dataset(id, std::move(y), std::move(coords), para, out.meta.tr, out.meta.dt, out.meta.order,
                                  out.meta.drift_cutoff);
            } catch (const Error& err) {
                if (err.kind() == ErrorKind::Invariant || err.kind() == ErrorKind::DimensionMismatch) throw;
                fail(ErrorKind::Invariant, "parcel " + std::to_string(id) + ": " + err.what());
            }
            std::optional<sim::GroundTruth> truth;
            if (e.contains("truth")) {
                const auto& tj = e["truth"];
                const auto& ta = tj.at("arrays");
                sim::GroundTruth t;
                t.mixture.classes = tj.at("mixture").at("classes").get<int>();
                t.mixture.mean = parse_matrix(tj.at("mixture").at("mean"), "truth.mixture.mean");
                t.mixture.var = parse_matrix(tj.at("mixture").at("var"), "truth.mixture.var");
                t.labels.classes = t.mixture.classes;
                const fs::path lp = dir / ta.at("labels").get<std::string>();
                t.labels.labels = matrix_to_labels(read_array(lp, nc, nv), lp.string());
                t.labels.validate();
                t.nrls = read_array(dir / ta.at("nrls").get<std::string>(), nc, nv);
                t.hrf.dt = out.meta.dt;
                t.hrf.taps = read_array(dir / ta.at("hrf").get<std::string>(), out.meta.order + 1, 1);
                t.drift_coeffs = read_array(dir / ta.at("drift_coeffs").get<std::string>(), ds.drift.cols(), nv);
                t.noise_samples = read_array(dir / ta.at("noise").get<std::string>(), n, nv);
                if (tj.contains("beta")) {
                    const auto b = tj["beta"].get<std::vector<double>>();
                    t.beta = Eigen::Map<const VectorXd>(b.data(), static_cast<Eigen::Index>(b.size()));
                }
                const auto& nj = tj.at("noise");
                t.noise.kind = sim::noise_kind_from_string(nj.at("kind").get<std::string>());
                t.noise.variance = nj.at("variance").get<double>();
                t.noise.rho = nj.at("rho").get<double>();
                t.noise.phi1 = nj.at("phi1").get<double>();
                t.noise.phi2 = nj.at("phi2").get<double>();
                t.seed = tj.at("seed").get<std::uint64_t>();
                truth = std::move(t);
            }
            out.parcels.push_back(std::move(ds));
            out.truths.push_back(std::move(truth));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, path.string() + ": " + e.what());
    }
    require(!out.parcels.empty(), ErrorKind::Format, path.string() + ": no parcels");
    return out;
}

// ---- reports ----

void write_report(const VemReport& r, const fs::path& dir) {
    DirectoryLock lock(dir);
    const PosteriorState& s = r.state;
    const int nv = s.voxels();
    const int nc = s.conditions();
    MatrixXd sigma_a(nv, nc * nc);
    for (int j = 0; j < nv; ++j) {
        for (int a = 0; a < nc; ++a) {
            for (int b = 0; b < nc; ++b) sigma_a(j, a * nc + b) = s.sigma_a[static_cast<std::size_t>(j)](a, b);
        }
    }
    MatrixXd noise(2, nv);
    noise.row(0) = s.noise.sigma2.transpose();
    noise.row(1) = s.noise.rho.transpose();

    json arrays = {{"m_h", "m_h.arr"},     {"sigma_h", "sigma_h.arr"}, {"m_a", "m_a.arr"},
                   {"sigma_a", "sigma_a.arr"}, {"drift", "drift.arr"},   {"noise", "noise.arr"}};
    write_array(dir / "m_h.arr", s.m_h);
    write_array(dir / "sigma_h.arr", s.sigma_h);
    write_array(dir / "m_a.arr", s.m_a);
    write_array(dir / "sigma_a.arr", sigma_a);
    write_array(dir / "drift.arr", s.drift);
    write_array(dir / "noise.arr", noise);
    json qfiles = json::array();
    for (int m = 0; m < nc; ++m) {
        const std::string name = "q_m" + std::to_string(m) + ".arr";
        write_array(dir / name, s.q[static_cast<std::size_t>(m)]);
        qfiles.push_back(name);
    }
    arrays["q"] = qfiles;

    json j;
    j["format_version"] = kFormatVersion;
    j["parcel_id"] = r.parcel_id;
    j["noise_mode"] = to_string(r.noise_mode);
    j["dt"] = r.dt;
    j["iterations"] = r.iterations;
    j["converged"] = r.converged;
    j["free_energy_exact"] = r.free_energy_exact;
    j["warnings"] = r.warnings;
    j["v_h"] = num(s.v_h);
    j["beta"] = vector_json(s.beta);
    j["mixture"] = {{"classes", s.mixture.classes}, {"mean", matrix_json(s.mixture.mean)},
                    {"var", matrix_json(s.mixture.var)}};
    json trace = json::array();
    json times = json::array();
    for (const auto& t : r.trace) {
        trace.push_back({{"free_energy", num(t.free_energy)}, {"c_h", num(t.c_h)}, {"c_a", num(t.c_a)}});
        times.push_back(t.wall_seconds);
    }
    j["trace"] = trace;
    j["arrays"] = arrays;
    atomic_write(dir / "timing.json", json{{"wall_seconds", times}}.dump(2) + "\n");
    atomic_write(dir / "report.json", j.dump(2) + "\n");
}

VemReport read_report(const fs::path& dir) {
    const fs::path path = dir / "report.json";
    const json j = parse_json_file(path, ErrorKind::Format);
    VemReport r;
    try {
        const int version = j.at("format_version").get<int>();
        require(version == kFormatVersion, ErrorKind::Version,
                path.string() + ": unsupported format_version " + std::to_string(version));
        r.parcel_id = j.at("parcel_id").get<int>();
        r.noise_mode = noise_mode_from_string(j.at("noise_mode").get<std::string>());
        r.dt = j.at("dt").get<double>();
        r.iterations = j.at("iterations").get<int>();
        r.converged = j.at("converged").get<bool>();
        r.free_energy_exact = j.at("free_energy_exact").get<bool>();
        r.warnings = j.at("warnings").get<std::vector<std::string>>();
        for (const auto& t : j.at("trace")) {
            TraceEntry e;
            e.free_energy = get_num(t.at("free_energy"), "trace.free_energy");
            e.c_h = get_num(t.at("c_h"), "trace.c_h");
            e.c_a = get_num(t.at("c_a"), "trace.c_a");
            r.trace.push_back(e);
        }
        require(static_cast<int>(r.trace.size()) == r.iterations, ErrorKind::Invariant,
                path.string() + ": trace length differs from iteration count");
        const fs::path timing = dir / "timing.json";
        if (fs::exists(timing)) {
            const json tj = parse_json_file(timing, ErrorKind::Format);
            const auto w = tj.at("wall_seconds").get<std::vector<double>>();
            for (std::size_t k = 0; k < w.size() && k < r.trace.size(); ++k) r.trace[k].wall_seconds = w[k];
        }

        PosteriorState& s = r.state;
        s.v_h = get_num(j.at("v_h"), "v_h");
        s.mixture.classes = j.at("mixture").at("classes").get<int>();
        s.mixture.mean = parse_matrix(j.at("mixture").at("mean"), "mixture.mean");
        s.mixture.var = parse_matrix(j.at("mixture").at("var"), "mixture.var");
        const int nc = static_cast<int>(s.mixture.mean.rows());
        const int ni = s.mixture.classes;
        s.beta.resize(nc);
        const auto& bj = j.at("beta");
        require(static_cast<int>(bj.size()) == nc, ErrorKind::Shape, path.string() + ": beta length");
        for (int m = 0; m < nc; ++m) s.beta(m) = get_num(bj[static_cast<std::size_t>(m)], "beta");

        const auto& a = j.at("arrays");
        s.m_h = read_array(dir / a.at("m_h").get<std::string>());
        require(s.m_h.cols() == 1, ErrorKind::Shape, "m_h must be a column");
        const Eigen::Index dh = s.m_h.size();
        s.sigma_h = read_array(dir / a.at("sigma_h").get<std::string>(), dh, dh);
        s.m_a = read_array(dir / a.at("m_a").get<std::string>());
        require(s.m_a.rows() == nc, ErrorKind::Shape, path.string() + ": m_a rows differ from condition count");
        const Eigen::Index nv = s.m_a.cols();
        const MatrixXd sa = read_array(dir / a.at("sigma_a").get<std::string>(), nv, nc * nc);
        s.sigma_a.assign(static_cast<std::size_t>(nv), MatrixXd(nc, nc));
        for (Eigen::Index v = 0; v < nv; ++v) {
            for (int x = 0; x < nc; ++x) {
                for (int y = 0; y < nc; ++y) s.sigma_a[static_cast<std::size_t>(v)](x, y) = sa(v, x * nc + y);
            }
        }
        s.drift = read_array(dir / a.at("drift").get<std::string>());
        require(s.drift.cols() == nv, ErrorKind::Shape, path.string() + ": drift columns");
        const MatrixXd noise = read_array(dir / a.at("noise").get<std::string>(), 2, nv);
        s.noise.sigma2 = noise.row(0).transpose();
        s.noise.rho = noise.row(1).transpose();
        const auto& qf = a.at("q");
        require(static_cast<int>(qf.size()) == nc, ErrorKind::Shape, path.string() + ": label marginal count");
        for (int m = 0; m < nc; ++m) {
            s.q.push_back(read_array(dir / qf[static_cast<std::size_t>(m)].get<std::string>(), nv, ni));
        }
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, path.string() + ": " + e.what());
    }
    return r;
}

}  // namespace jde::io
