#include "jde/model.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numbers>

#include "jde/errors.hpp"
#include "jde/potts.hpp"

namespace jde {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;  // log(2 pi)

double gamma_pdf(double t, double shape) {
    if (t <= 0.0) return 0.0;
    return std::exp((shape - 1.0) * std::log(t) - t - std::lgamma(shape));
}

}  // namespace

void Paradigm::validate() const {
    require(!conditions.empty(), ErrorKind::InvalidParadigm, "paradigm needs at least one condition");
    require(session_length > 0.0, ErrorKind::InvalidParadigm, "session length must be positive");
    for (const auto& c : conditions) {
        for (std::size_t k = 0; k < c.onsets.size(); ++k) {
            const double s = c.onsets[k];
            require(std::isfinite(s) && s >= 0.0 && s < session_length, ErrorKind::InvalidParadigm,
                    "onset " + std::to_string(s) + " of condition '" + c.name + "' outside [0, session_length)");
            require(k == 0 || c.onsets[k - 1] <= s, ErrorKind::InvalidParadigm,
                    "onsets of condition '" + c.name + "' not sorted");
        }
    }
}

DesignMatrix build_design_matrix(const Paradigm& paradigm, int scans, double tr, double dt, int order) {
    require(dt > 0.0 && tr > 0.0, ErrorKind::InvalidSampling, "TR and dt must be positive");
    require(dt < tr, ErrorKind::InvalidSampling, "HRF sampling period must be shorter than TR");
    require(scans > 0 && order >= 1, ErrorKind::InvalidArgument, "scan count and HRF order must be positive");
    paradigm.validate();

    DesignMatrix out;
    out.scans = scans;
    out.order = order;
    out.tr = tr;
    out.dt = dt;
    out.x.reserve(paradigm.conditions.size());
    for (const auto& cond : paradigm.conditions) {
        MatrixXd x = MatrixXd::Zero(scans, order + 1);
        for (double s : cond.onsets) {
            const int first = std::max(0, static_cast<int>(std::floor((s - 0.5 * dt) / tr)));
            for (int n = first; n < scans; ++n) {
                const double lag = n * tr - s;
                const long d = std::lround(lag / dt);
                if (d < 0) continue;
                if (d > order) break;
                if (std::abs(lag - static_cast<double>(d) * dt) <= 0.5 * dt) x(n, d) = 1.0;
            }
        }
        out.x.push_back(std::move(x));
    }
    return out;
}

MatrixXd build_drift_basis(int scans, double tr, double cutoff_period) {
    require(scans > 0 && tr > 0.0, ErrorKind::InvalidArgument, "scan count and TR must be positive");
    require(cutoff_period > 2.0 * tr, ErrorKind::InvalidArgument, "drift cutoff period must exceed 2 TR");
    const int cols = 1 + static_cast<int>(std::floor(2.0 * scans * tr / cutoff_period));
    require(cols < scans, ErrorKind::DriftBasisTooRich,
            std::to_string(cols) + " drift regressors for " + std::to_string(scans) + " scans");
    MatrixXd p(scans, cols);
    const double n = static_cast<double>(scans);
    for (int k = 0; k < cols; ++k) {
        const double scale = (k == 0) ? std::sqrt(1.0 / n) : std::sqrt(2.0 / n);
        for (int t = 0; t < scans; ++t) {
            p(t, k) = scale * std::cos(std::numbers::pi * k * (t + 0.5) / n);
        }
    }
    return p;
}

MatrixXd second_difference(int order) {
    const int n = order - 1;
    MatrixXd d2 = MatrixXd::Zero(n, n);
    for (int i = 0; i < n; ++i) {
        d2(i, i) = -2.0;
        if (i > 0) d2(i, i - 1) = 1.0;
        if (i + 1 < n) d2(i, i + 1) = 1.0;
    }
    return d2;
}

HrfPrior make_hrf_prior(int order, double dt) {
    require(order >= 4, ErrorKind::InvalidArgument, "HRF order D must be at least 4");
    require(dt > 0.0, ErrorKind::InvalidArgument, "dt must be positive");
    const MatrixXd d2 = second_difference(order);
    const double dt4 = std::pow(dt, 4);
    HrfPrior prior;
    prior.order = order;
    prior.dt = dt;
    prior.r_inv = (d2.transpose() * d2) / dt4;
    Eigen::LLT<MatrixXd> llt(d2.transpose() * d2);
    require(llt.info() == Eigen::Success, ErrorKind::NumericalFailure, "D2^t D2 is singular");
    const int n = order - 1;
    prior.r = dt4 * llt.solve(MatrixXd::Identity(n, n));
    prior.r = 0.5 * (prior.r + prior.r.transpose()).eval();
    // log|R| = n log dt^4 - log|D2^t D2|
    prior.log_det_r = n * std::log(dt4) - 2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
    return prior;
}

MatrixXd build_hrf_prior(int order, double dt) { return make_hrf_prior(order, dt).r; }

HrfModel HrfModel::from_interior(const VectorXd& interior, double dt) {
    HrfModel h;
    h.dt = dt;
    h.taps = VectorXd::Zero(interior.size() + 2);
    h.taps.segment(1, interior.size()) = interior;
    return h;
}

HrfModel canonical_hrf(int order, double dt) {
    HrfModel h;
    h.dt = dt;
    h.taps = VectorXd::Zero(order + 1);
    for (int d = 1; d < order; ++d) {
        const double t = d * dt;
        h.taps(d) = gamma_pdf(t, 6.0) - gamma_pdf(t, 16.0) / 6.0;
    }
    const double peak = h.taps.maxCoeff();
    if (peak > 0.0) h.taps /= peak;
    return h;
}

VectorXd SymTridiag::apply(const VectorXd& v) const {
    const int n = size();
    require(v.size() == n, ErrorKind::DimensionMismatch, "tridiagonal apply");
    VectorXd out = diag.cwiseProduct(v);
    if (n > 1) {
        out.head(n - 1) += off.cwiseProduct(v.tail(n - 1));
        out.tail(n - 1) += off.cwiseProduct(v.head(n - 1));
    }
    return out;
}

double SymTridiag::quad(const VectorXd& u, const VectorXd& v) const {
    const int n = size();
    require(u.size() == n && v.size() == n, ErrorKind::DimensionMismatch, "tridiagonal quadratic form");
    double s = (diag.array() * u.array() * v.array()).sum();
    if (n > 1) {
        s += (off.array() * (u.head(n - 1).array() * v.tail(n - 1).array() +
                             u.tail(n - 1).array() * v.head(n - 1).array()))
                 .sum();
    }
    return s;
}

double SymTridiag::log_det() const {
    double pivot = diag(0);
    require(pivot > 0.0, ErrorKind::NumericalFailure, "tridiagonal matrix not positive definite");
    double s = std::log(pivot);
    for (int k = 1; k < size(); ++k) {
        pivot = diag(k) - off(k - 1) * off(k - 1) / pivot;
        require(pivot > 0.0, ErrorKind::NumericalFailure, "tridiagonal matrix not positive definite");
        s += std::log(pivot);
    }
    return s;
}

MatrixXd SymTridiag::dense() const {
    const int n = size();
    MatrixXd m = MatrixXd::Zero(n, n);
    m.diagonal() = diag;
    for (int k = 0; k + 1 < n; ++k) {
        m(k, k + 1) = off(k);
        m(k + 1, k) = off(k);
    }
    return m;
}

SymTridiag ar1_precision(double rho, double sigma2, int n) {
    require(std::abs(rho) < 1.0, ErrorKind::Nonstationary, "AR(1) coefficient must satisfy |rho| < 1");
    require(sigma2 > 0.0, ErrorKind::InvalidArgument, "noise variance must be positive");
    require(n >= 1, ErrorKind::InvalidArgument, "series length must be positive");
    SymTridiag g;
    g.diag = VectorXd::Constant(n, (1.0 + rho * rho) / sigma2);
    g.diag(0) = 1.0 / sigma2;
    g.diag(n - 1) = 1.0 / sigma2;
    g.off = VectorXd::Constant(std::max(n - 1, 0), -rho / sigma2);
    return g;
}

double ar1_log_det(double rho, double sigma2, int n) {
    require(std::abs(rho) < 1.0, ErrorKind::Nonstationary, "AR(1) coefficient must satisfy |rho| < 1");
    return -n * std::log(sigma2) + std::log1p(-rho * rho);
}

Ar1Forms ar1_forms(const Eigen::Ref<const VectorXd>& u, const Eigen::Ref<const VectorXd>& v) {
    const Eigen::Index n = u.size();
    Ar1Forms f;
    f.i = u.dot(v);
    if (n > 2) f.b = u.segment(1, n - 2).dot(v.segment(1, n - 2));
    if (n > 1) f.c = -(u.head(n - 1).dot(v.tail(n - 1)) + u.tail(n - 1).dot(v.head(n - 1)));
    return f;
}

VectorXd apply_b(const Eigen::Ref<const VectorXd>& v) {
    VectorXd out = v;
    out(0) = 0.0;
    out(v.size() - 1) = 0.0;
    return out;
}

VectorXd apply_c(const Eigen::Ref<const VectorXd>& v) {
    const Eigen::Index n = v.size();
    VectorXd out = VectorXd::Zero(n);
    if (n > 1) {
        out.head(n - 1) -= v.tail(n - 1);
        out.tail(n - 1) -= v.head(n - 1);
    }
    return out;
}

VectorXd apply_lambda(double rho, const Eigen::Ref<const VectorXd>& v) {
    if (rho == 0.0) return v;
    return v + rho * rho * apply_b(v) + rho * apply_c(v);
}

void MixtureParams::validate() const {
    require(classes == 2 || classes == 3, ErrorKind::InvalidArgument, "class count must be 2 or 3");
    require(mean.cols() == classes && var.cols() == classes && mean.rows() == var.rows() && mean.rows() >= 1,
            ErrorKind::DimensionMismatch, "mixture parameter shapes");
    for (Eigen::Index m = 0; m < mean.rows(); ++m) {
        require(mean(m, 0) == 0.0, ErrorKind::Invariant, "non-activated class mean must be 0");
        for (int i = 0; i < classes; ++i) {
            require(var(m, i) > 0.0, ErrorKind::Invariant, "mixture variances must be positive");
        }
    }
}

void LabelField::validate() const {
    require(classes >= 2, ErrorKind::InvalidArgument, "class count must be at least 2");
    require((labels.array() >= 1).all() && (labels.array() <= classes).all(), ErrorKind::Invariant,
            "labels outside 1..I");
}

std::size_t VoxelGraph::edge_count() const {
    std::size_t s = 0;
    for (const auto& n : neighbors) s += n.size();
    return s / 2;
}

bool VoxelGraph::symmetric() const {
    for (int j = 0; j < size(); ++j) {
        for (int k : neighbors[j]) {
            if (k < 0 || k >= size() || k == j) return false;
            const auto& back = neighbors[k];
            if (std::find(back.begin(), back.end(), j) == back.end()) return false;
        }
    }
    return true;
}

std::vector<std::pair<int, int>> VoxelGraph::edges() const {
    std::vector<std::pair<int, int>> e;
    for (int j = 0; j < size(); ++j) {
        for (int k : neighbors[j]) {
            if (k > j) e.emplace_back(j, k);
        }
    }
    return e;
}

VoxelGraph build_graph(const std::vector<Coord>& coords) {
    std::map<Coord, int> index;
    for (std::size_t j = 0; j < coords.size(); ++j) {
        const bool inserted = index.emplace(coords[j], static_cast<int>(j)).second;
        require(inserted, ErrorKind::Invariant, "duplicate voxel coordinate");
    }
    static constexpr int kOffsets[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
    VoxelGraph g;
    g.neighbors.resize(coords.size());
    for (std::size_t j = 0; j < coords.size(); ++j) {
        for (const auto& o : kOffsets) {
            const Coord c{coords[j][0] + o[0], coords[j][1] + o[1], coords[j][2] + o[2]};
            if (auto it = index.find(c); it != index.end()) g.neighbors[j].push_back(it->second);
        }
        std::sort(g.neighbors[j].begin(), g.neighbors[j].end());
    }
    return g;
}

std::vector<Coord> grid_coords(int nx, int ny, int nz) {
    std::vector<Coord> c;
    c.reserve(static_cast<std::size_t>(nx) * ny * nz);
    for (int a = 0; a < nx; ++a) {
        for (int b = 0; b < ny; ++b) {
            for (int k = 0; k < nz; ++k) c.push_back({a, b, k});
        }
    }
    return c;
}

void ParcelDataset::validate() const {
    const int n = scans();
    const int j = voxels();
    require(static_cast<int>(coords.size()) == j, ErrorKind::DimensionMismatch, "coordinate count != voxel count");
    require(graph.size() == j, ErrorKind::DimensionMismatch, "graph size != voxel count");
    require(graph.symmetric(), ErrorKind::Invariant, "voxel graph not symmetric");
    require(drift.rows() == n, ErrorKind::DimensionMismatch, "drift basis rows != scan count");
    require(design.scans == n, ErrorKind::DimensionMismatch, "design scans != scan count");
    require(design.conditions() >= 1, ErrorKind::Invariant, "no conditions");
    require(design.conditions() == paradigm.size(), ErrorKind::DimensionMismatch, "design/paradigm conditions");
    for (const auto& x : design.x) {
        require(x.rows() == n && x.cols() == design.order + 1, ErrorKind::DimensionMismatch, "design block shape");
    }
    const MatrixXd gram = drift.transpose() * drift;
    const double err = (gram - MatrixXd::Identity(gram.rows(), gram.cols())).cwiseAbs().maxCoeff();
    require(err <= 1e-10, ErrorKind::Invariant, "drift basis not orthonormal");
    require(y.allFinite(), ErrorKind::Invariant, "non-finite BOLD samples");
    std::map<Coord, int> seen;
    for (const auto& c : coords) {
        require(seen.emplace(c, 0).second, ErrorKind::Invariant, "duplicate voxel coordinate");
    }
}

ParcelDataset make_dataset(int parcel_id, MatrixXd y, std::vector<Coord> coords, const Paradigm& paradigm,
                           double tr, double dt, int order, double drift_cutoff) {
    ParcelDataset d;
    d.parcel_id = parcel_id;
    d.y = std::move(y);
    d.coords = std::move(coords);
    d.graph = build_graph(d.coords);
    d.drift_cutoff = drift_cutoff;
    d.drift = build_drift_basis(static_cast<int>(d.y.rows()), tr, drift_cutoff);
    d.paradigm = paradigm;
    d.design = build_design_matrix(paradigm, static_cast<int>(d.y.rows()), tr, dt, order);
    d.validate();
    return d;
}

double log_likelihood(const VectorXd& y, const VectorXd& nrl, const VectorXd& hrf_taps, const VectorXd& drift_coeffs,
                      double sigma2, double rho, const DesignMatrix& design, const MatrixXd& drift_basis) {
    const int n = design.scans;
    require(y.size() == n, ErrorKind::DimensionMismatch, "series length");
    require(nrl.size() == design.conditions(), ErrorKind::DimensionMismatch, "NRL vector length");
    require(hrf_taps.size() == design.order + 1, ErrorKind::DimensionMismatch, "HRF tap count");
    require(drift_basis.rows() == n && drift_coeffs.size() == drift_basis.cols(), ErrorKind::DimensionMismatch,
            "drift dimensions");
    require(hrf_taps(0) == 0.0 && hrf_taps(design.order) == 0.0, ErrorKind::InvalidArgument,
            "HRF endpoints must be zero");
    VectorXd resid = y - drift_basis * drift_coeffs;
    for (int m = 0; m < design.conditions(); ++m) {
        if (nrl(m) != 0.0) resid -= nrl(m) * (design.x[m] * hrf_taps);
    }
    const SymTridiag gamma = ar1_precision(rho, sigma2, n);
    return -0.5 * n * kLog2Pi + 0.5 * ar1_log_det(rho, sigma2, n) - 0.5 * gamma.quad(resid, resid);
}

LogJoint log_joint(const ParcelDataset& data, const MatrixXd& nrls, const VectorXd& hrf_taps,
                   const LabelField& labels, const ModelParams& theta) {
    const int nvox = data.voxels();
    const int ncond = data.conditions();
    require(nrls.rows() == ncond && nrls.cols() == nvox, ErrorKind::DimensionMismatch, "NRL matrix shape");
    require(labels.conditions() == ncond && labels.voxels() == nvox, ErrorKind::DimensionMismatch,
            "label field shape");
    require(theta.mixture.conditions() == ncond && theta.beta.size() == ncond, ErrorKind::DimensionMismatch,
            "parameter shapes");
    require(theta.noise.sigma2.size() == nvox && theta.noise.rho.size() == nvox &&
                theta.drift_coeffs.cols() == nvox,
            ErrorKind::DimensionMismatch, "per-voxel parameter shapes");
    labels.validate();
    theta.mixture.validate();

    LogJoint out;
    double total = 0.0;
    for (int j = 0; j < nvox; ++j) {
        total += log_likelihood(data.y.col(j), nrls.col(j), hrf_taps, theta.drift_coeffs.col(j),
                                theta.noise.sigma2(j), theta.noise.rho(j), data.design, data.drift);
    }

    const HrfPrior prior = make_hrf_prior(data.order(), data.design.dt);
    const VectorXd h = hrf_taps.segment(1, data.order() - 1);
    const double dim = static_cast<double>(h.size());
    total += -0.5 * dim * (kLog2Pi + std::log(theta.v_h)) - 0.5 * prior.log_det_r -
             0.5 * h.dot(prior.r_inv * h) / theta.v_h;

    for (int m = 0; m < ncond; ++m) {
        for (int j = 0; j < nvox; ++j) {
            const int i = labels.labels(m, j) - 1;
            const double mu = theta.mixture.mean(m, i);
            const double v = theta.mixture.var(m, i);
            const double r = nrls(m, j) - mu;
            total += -0.5 * (kLog2Pi + std::log(v)) - 0.5 * r * r / v;
        }
    }

    const bool small = nvox * std::log(static_cast<double>(labels.classes)) <= std::log(potts::kMaxConfigurations);
    out.potts_exact = true;
    for (int m = 0; m < ncond; ++m) {
        const Eigen::VectorXi q = labels.labels.row(m).transpose();
        const double beta = theta.beta(m);
        double log_z;
        if (beta == 0.0) {
            log_z = nvox * std::log(static_cast<double>(labels.classes));
        } else if (small) {
            log_z = potts::exact_log_partition(data.graph, beta, labels.classes);
        } else {
            out.potts_exact = false;
            MatrixXd delta = MatrixXd::Zero(nvox, labels.classes);
            for (int j = 0; j < nvox; ++j) delta(j, q(j) - 1) = 1.0;
            log_z = potts::surrogate_log_partition(delta, data.graph, beta);
        }
        total += beta * potts::energy(q, data.graph) - log_z;
    }
    out.value = total;
    return out;
}

}  // namespace jde
