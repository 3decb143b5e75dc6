#include "jde/vem.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "jde/errors.hpp"

namespace jde {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

double frobenius(const MatrixXd& a, const MatrixXd& b) { return a.cwiseProduct(b).sum(); }

}  // namespace

const char* to_string(NoiseMode mode) { return mode == NoiseMode::Ar1 ? "ar1" : "white"; }

NoiseMode noise_mode_from_string(const std::string& s) {
    if (s == "white") return NoiseMode::White;
    if (s == "ar1") return NoiseMode::Ar1;
    fail(ErrorKind::Config, "noise_mode must be 'white' or 'ar1', got '" + s + "'");
}

void VemConfig::validate() const {
    require(classes == 2 || classes == 3, ErrorKind::Config, "classes must be 2 or 3");
    require(max_iters >= 1, ErrorKind::Config, "max_iters must be at least 1");
    require(tol_h > 0.0 && tol_a > 0.0, ErrorKind::Config, "tolerances must be positive");
    require(lambda_vh >= 0.0 && lambda_beta >= 0.0, ErrorKind::Config, "prior rates must be nonnegative");
    require(beta_max > 0.0 && beta_step > 0.0, ErrorKind::Config, "beta_max and beta_step must be positive");
    require(beta_init >= 0.0 && beta_init <= beta_max, ErrorKind::Config, "beta_init must lie in [0, beta_max]");
    require(vh_init > 0.0, ErrorKind::Config, "vh_init must be positive");
    require(hrf_init_scale != 0.0, ErrorKind::Config, "hrf_init_scale must be nonzero");
    require(init_label_prob > 0.0 && init_label_prob < 1.0, ErrorKind::Config, "init_label_prob must lie in (0, 1)");
    require(jitter > 0.0 && v_min > 0.0, ErrorKind::Config, "jitter and v_min must be positive");
    require(eq_sweeps >= 1 && ar1_max_inner >= 1, ErrorKind::Config, "sweep and inner-loop counts must be positive");
    require(rho_max > 0.0 && rho_max < 1.0, ErrorKind::Config, "rho_max must lie in (0, 1)");
}

VectorXd PosteriorState::hrf_taps() const { return HrfModel::from_interior(m_h, 1.0).taps; }

VectorXd PosteriorState::ppm(int m) const { return q[m].col(1); }

NormalizedView normalized_view(const VectorXd& hrf_taps, const MatrixXd& nrls) {
    NormalizedView v;
    Eigen::Index idx = 0;
    hrf_taps.cwiseAbs().maxCoeff(&idx);
    const double s = hrf_taps.size() > 0 ? hrf_taps(idx) : 0.0;
    v.scale = s != 0.0 ? s : 1.0;
    v.hrf = hrf_taps / v.scale;
    v.nrls = nrls * v.scale;
    return v;
}

double relative_change(const Eigen::Ref<const VectorXd>& x, const Eigen::Ref<const VectorXd>& x_prev) {
    const double num = (x - x_prev).squaredNorm();
    const double den = x_prev.squaredNorm();
    if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return num / den;
}

double vh_update(double c, int free_taps, double lambda) {
    require(c > 0.0, ErrorKind::NumericalFailure, "v_h update needs a positive prior quadratic form");
    const double d = static_cast<double>(free_taps);
    if (lambda == 0.0) return c / d;
    // Positive root of 2 lambda v^2 + d v - C = 0, written without cancellation.
    return 2.0 * c / (d + std::sqrt(8.0 * lambda * c + d * d));
}

void mixture_moments(const VectorXd& mean_a, const VectorXd& var_a, const MatrixXd& q, double v_min, double eps,
                     RowRef mu, RowRef v, std::vector<int>* empty) {
    const Eigen::Index classes = q.cols();
    for (Eigen::Index i = 0; i < classes; ++i) {
        const double w = q.col(i).sum();
        if (w < eps) {
            if (empty) empty->push_back(static_cast<int>(i));
            continue;
        }
        const double m = (i == 0) ? 0.0 : q.col(i).dot(mean_a) / w;
        const double s = (q.col(i).array() * ((mean_a.array() - m).square() + var_a.array())).sum() / w;
        mu(i) = m;
        v(i) = std::max(s, v_min);
    }
}

double ar1_rho_update(double qb, double qc, double sigma2, double rho_max) {
    auto h = [&](double r) { return (1.0 - r * r) * (2.0 * r * qb + qc) + 2.0 * sigma2 * r; };
    // The objective increases while h < 0.
    double lo = -rho_max;
    double hi = rho_max;
    if (h(lo) >= 0.0) return lo;
    if (h(hi) <= 0.0) return hi;
    for (int it = 0; it < 200 && hi - lo > 1e-14; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (h(mid) < 0.0) lo = mid;
        else hi = mid;
    }
    return 0.5 * (lo + hi);
}

VemEngine::VemEngine(const ParcelDataset& data, VemConfig config) : data_(&data), config_(std::move(config)) {
    config_.validate();
    data.validate();
    prior_ = make_hrf_prior(data.order(), data.design.dt);
    const int nc = data.conditions();
    const int n = data.scans();
    xi_.reserve(static_cast<std::size_t>(nc));
    for (int m = 0; m < nc; ++m) xi_.push_back(data.design.interior(m));
    const std::size_t blocks = static_cast<std::size_t>(nc * nc);
    k_i_.resize(blocks);
    k_b_.resize(blocks);
    k_c_.resize(blocks);
    for (int a = 0; a < nc; ++a) {
        for (int b = 0; b < nc; ++b) {
            const std::size_t idx = static_cast<std::size_t>(a * nc + b);
            k_i_[idx] = xi_[a].transpose() * xi_[b];
            if (n > 2) {
                k_b_[idx] = xi_[a].middleRows(1, n - 2).transpose() * xi_[b].middleRows(1, n - 2);
            } else {
                k_b_[idx] = MatrixXd::Zero(k_i_[idx].rows(), k_i_[idx].cols());
            }
            k_c_[idx] = -(xi_[a].topRows(n - 1).transpose() * xi_[b].bottomRows(n - 1) +
                          xi_[a].bottomRows(n - 1).transpose() * xi_[b].topRows(n - 1));
        }
    }
}

void VemEngine::warn(std::string message) {
    warnings_.push_back("iteration " + std::to_string(iteration_) + ": " + std::move(message));
}

MatrixXd VemEngine::residual_data() const { return data_->y - data_->drift * state_.drift; }

MatrixXd VemEngine::hrf_regressors() const {
    MatrixXd g(data_->scans(), data_->conditions());
    for (int m = 0; m < data_->conditions(); ++m) g.col(m) = xi_[m] * state_.m_h;
    return g;
}

MatrixXd VemEngine::second_moment_a(int j) const {
    return state_.sigma_a[j] + state_.m_a.col(j) * state_.m_a.col(j).transpose();
}

MatrixXd VemEngine::spd_inverse(const MatrixXd& precision, const char* step, double* log_det) const {
    const Eigen::Index n = precision.rows();
    Eigen::LLT<MatrixXd> llt(precision);
    if (llt.info() != Eigen::Success) {
        const double bump = config_.jitter * precision.diagonal().mean();
        llt.compute(precision + bump * MatrixXd::Identity(n, n));
        if (llt.info() != Eigen::Success) {
            fail(ErrorKind::NumericalFailure, std::string(step) + " at iteration " + std::to_string(iteration_) +
                                                  ": precision not positive definite after jitter (min diagonal " +
                                                  std::to_string(precision.diagonal().minCoeff()) + ")");
        }
    }
    if (log_det) *log_det = 2.0 * llt.matrixLLT().diagonal().array().log().sum();
    MatrixXd inv = llt.solve(MatrixXd::Identity(n, n));
    return 0.5 * (inv + inv.transpose());
}

void VemEngine::initialize() {
    const ParcelDataset& d = *data_;
    const int nc = d.conditions();
    const int nv = d.voxels();
    const int ni = config_.classes;
    const int n = d.scans();
    const MatrixXd& p = d.drift;
    iteration_ = 0;
    warnings_.clear();

    PosteriorState& s = state_;
    const HrfModel h0 = canonical_hrf(d.order(), d.design.dt);
    s.m_h = config_.hrf_init_scale * h0.interior();
    s.sigma_h = MatrixXd::Zero(s.m_h.size(), s.m_h.size());

    const MatrixXd g = hrf_regressors();
    const MatrixXd gp = g - p * (p.transpose() * g);
    const MatrixXd yp = d.y - p * (p.transpose() * d.y);
    Eigen::ColPivHouseholderQR<MatrixXd> qr(gp);
    s.m_a = MatrixXd::Zero(nc, nv);
    if (qr.rank() < nc) {
        warn("regressors rank deficient at initialisation; response levels start at zero");
    } else {
        s.m_a = qr.solve(yp);
    }
    s.sigma_a.assign(static_cast<std::size_t>(nv), MatrixXd::Zero(nc, nc));

    s.noise.sigma2.resize(nv);
    s.noise.rho = VectorXd::Zero(nv);
    for (int j = 0; j < nv; ++j) {
        const double rss = (yp.col(j) - gp * s.m_a.col(j)).squaredNorm();
        s.noise.sigma2(j) = std::max(rss / n, config_.v_min);
    }
    s.drift = p.transpose() * (d.y - g * s.m_a);

    // Labels: voxels ranked by |m_A| per condition; the top half starts activated
    // (deactivated when negative and I = 3).
    const double hi = config_.init_label_prob;
    s.q.assign(static_cast<std::size_t>(nc), MatrixXd());
    for (int m = 0; m < nc; ++m) {
        MatrixXd q = MatrixXd::Zero(nv, ni);
        std::vector<int> order(static_cast<std::size_t>(nv));
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(),
                         [&](int a, int b) { return std::abs(s.m_a(m, a)) > std::abs(s.m_a(m, b)); });
        for (int r = 0; r < nv; ++r) {
            const int j = order[static_cast<std::size_t>(r)];
            int cls = 0;
            if (r < nv / 2) cls = (ni == 3 && s.m_a(m, j) < 0.0) ? 2 : 1;
            q.row(j).setConstant((1.0 - hi) / (ni - 1));
            q(j, cls) = hi;
        }
        s.q[static_cast<std::size_t>(m)] = std::move(q);
    }

    s.mixture.classes = ni;
    s.mixture.mean = MatrixXd::Zero(nc, ni);
    s.mixture.var = MatrixXd::Ones(nc, ni);
    m_mixture_step();
    if (ni == 3) {
        for (int m = 0; m < nc; ++m) {
            if (s.mixture.mean(m, 2) >= 0.0) s.mixture.mean(m, 2) = -std::abs(s.mixture.mean(m, 1));
        }
    }
    s.v_h = config_.vh_init;
    s.beta = VectorXd::Constant(nc, config_.beta_init);
}

void VemEngine::e_h_step() {
    const ParcelDataset& d = *data_;
    const PosteriorState& s = state_;
    const int nc = d.conditions();
    const int nv = d.voxels();
    const bool ar1 = config_.noise_mode == NoiseMode::Ar1;

    const MatrixXd yt = residual_data();
    MatrixXd z = MatrixXd::Zero(d.scans(), nc);
    MatrixXd wi = MatrixXd::Zero(nc, nc);
    MatrixXd wb = MatrixXd::Zero(nc, nc);
    MatrixXd wc = MatrixXd::Zero(nc, nc);
    for (int j = 0; j < nv; ++j) {
        const double rho = s.noise.rho(j);
        const double inv_s2 = 1.0 / s.noise.sigma2(j);
        const VectorXd gy = (ar1 ? apply_lambda(rho, yt.col(j)) : VectorXd(yt.col(j))) * inv_s2;
        for (int m = 0; m < nc; ++m) z.col(m) += s.m_a(m, j) * gy;
        const MatrixXd e = second_moment_a(j) * inv_s2;
        wi += e;
        if (ar1) {
            wb += rho * rho * e;
            wc += rho * e;
        }
    }
    MatrixXd prec = prior_.r_inv / s.v_h;
    VectorXd rhs = VectorXd::Zero(s.m_h.size());
    for (int a = 0; a < nc; ++a) {
        rhs += xi_[a].transpose() * z.col(a);
        for (int b = 0; b < nc; ++b) {
            const std::size_t idx = static_cast<std::size_t>(a * nc + b);
            prec += wi(a, b) * k_i_[idx];
            if (ar1) prec += wb(a, b) * k_b_[idx] + wc(a, b) * k_c_[idx];
        }
    }
    prec = 0.5 * (prec + prec.transpose()).eval();
    state_.sigma_h = spd_inverse(prec, "E-H");
    state_.m_h = state_.sigma_h * rhs;
}

void VemEngine::e_a_step() {
    const ParcelDataset& d = *data_;
    PosteriorState& s = state_;
    const int nc = d.conditions();
    const int nv = d.voxels();
    const int ni = s.mixture.classes;
    const bool ar1 = config_.noise_mode == NoiseMode::Ar1;

    const MatrixXd g = hrf_regressors();
    MatrixXd ai(nc, nc), ab(nc, nc), ac(nc, nc);
    for (int a = 0; a < nc; ++a) {
        for (int b = 0; b < nc; ++b) {
            const std::size_t idx = static_cast<std::size_t>(a * nc + b);
            const Ar1Forms f = ar1_forms(g.col(a), g.col(b));
            ai(a, b) = f.i + frobenius(s.sigma_h, k_i_[idx]);
            ab(a, b) = f.b + frobenius(s.sigma_h, k_b_[idx]);
            ac(a, b) = f.c + frobenius(s.sigma_h, k_c_[idx]);
        }
    }
    const MatrixXd yt = residual_data();
    for (int j = 0; j < nv; ++j) {
        const double rho = ar1 ? s.noise.rho(j) : 0.0;
        const double inv_s2 = 1.0 / s.noise.sigma2(j);
        MatrixXd prec = (ai + rho * rho * ab + rho * ac) * inv_s2;
        VectorXd rhs(nc);
        for (int m = 0; m < nc; ++m) {
            double w = 0.0;
            double wm = 0.0;
            for (int i = 0; i < ni; ++i) {
                const double pi = s.q[m](j, i);
                w += pi / s.mixture.var(m, i);
                wm += pi * s.mixture.mean(m, i) / s.mixture.var(m, i);
            }
            prec(m, m) += w;
            rhs(m) = wm + ar1_forms(g.col(m), yt.col(j)).at(rho) * inv_s2;
        }
        prec = 0.5 * (prec + prec.transpose()).eval();
        s.sigma_a[j] = spd_inverse(prec, "E-A");
        s.m_a.col(j) = s.sigma_a[j] * rhs;
    }
}

MatrixXd VemEngine::label_field(int m) const {
    const PosteriorState& s = state_;
    const int nv = s.voxels();
    const int ni = s.mixture.classes;
    MatrixXd field(nv, ni);
    for (int j = 0; j < nv; ++j) {
        const double a = s.m_a(m, j);
        const double va = s.sigma_a[j](m, m);
        for (int i = 0; i < ni; ++i) {
            const double mu = s.mixture.mean(m, i);
            const double v = s.mixture.var(m, i);
            field(j, i) = -0.5 * (kLog2Pi + std::log(v)) - 0.5 * ((a - mu) * (a - mu) + va) / v;
        }
    }
    return field;
}

void VemEngine::e_q_step() {
    for (int m = 0; m < state_.conditions(); ++m) {
        state_.q[m] = potts::mean_field_sweep(state_.q[m], label_field(m), state_.beta(m), data_->graph,
                                              config_.eq_sweeps);
    }
}

void VemEngine::m_mixture_step() {
    PosteriorState& s = state_;
    const int nv = s.voxels();
    for (int m = 0; m < s.conditions(); ++m) {
        VectorXd va(nv);
        for (int j = 0; j < nv; ++j) va(j) = s.sigma_a[j](m, m);
        std::vector<int> empty;
        mixture_moments(s.m_a.row(m).transpose(), va, s.q[m], config_.v_min, config_.empty_class_eps,
                        s.mixture.mean.row(m), s.mixture.var.row(m), &empty);
        for (int i : empty) {
            warn("class " + std::to_string(i + 1) + " of condition " + std::to_string(m) +
                 " is empty; keeping previous mean and variance");
        }
    }
}

void VemEngine::m_vh_step() {
    if (!config_.estimate_vh) return;
    const PosteriorState& s = state_;
    const double c = frobenius(s.sigma_h, prior_.r_inv) + s.m_h.dot(prior_.r_inv * s.m_h);
    state_.v_h = vh_update(c, static_cast<int>(s.m_h.size()), config_.lambda_vh);
}

void VemEngine::m_beta_step() {
    if (!config_.estimate_beta) return;
    potts::BetaOptions opts;
    opts.step = config_.beta_step;
    opts.beta_max = config_.beta_max;
    for (int m = 0; m < state_.conditions(); ++m) {
        const auto est = potts::estimate_beta(state_.q[m], data_->graph, state_.beta(m), config_.lambda_beta, opts);
        if (!est.converged) warn("beta search for condition " + std::to_string(m) + " hit the iteration cap");
        state_.beta(m) = est.beta;
    }
}

void VemEngine::m_drift_noise_step() {
    const ParcelDataset& d = *data_;
    PosteriorState& s = state_;
    const int nc = d.conditions();
    const int nv = d.voxels();
    const int n = d.scans();
    const MatrixXd& p = d.drift;
    const bool ar1 = config_.noise_mode == NoiseMode::Ar1;

    const MatrixXd g = hrf_regressors();
    std::vector<Ar1Forms> gg(static_cast<std::size_t>(nc * nc));
    std::vector<Ar1Forms> tt(static_cast<std::size_t>(nc * nc));
    for (int a = 0; a < nc; ++a) {
        for (int b = 0; b < nc; ++b) {
            const std::size_t idx = static_cast<std::size_t>(a * nc + b);
            gg[idx] = ar1_forms(g.col(a), g.col(b));
            tt[idx] = {frobenius(s.sigma_h, k_i_[idx]), frobenius(s.sigma_h, k_b_[idx]),
                       frobenius(s.sigma_h, k_c_[idx])};
        }
    }
    MatrixXd lp, lambda_p;
    int unconverged = 0;
    for (int j = 0; j < nv; ++j) {
        const MatrixXd e = second_moment_a(j);
        Ar1Forms extra;
        for (int a = 0; a < nc; ++a) {
            for (int b = 0; b < nc; ++b) {
                const std::size_t idx = static_cast<std::size_t>(a * nc + b);
                const double sa = s.sigma_a[j](a, b);
                extra.i += sa * gg[idx].i + e(a, b) * tt[idx].i;
                extra.b += sa * gg[idx].b + e(a, b) * tt[idx].b;
                extra.c += sa * gg[idx].c + e(a, b) * tt[idx].c;
            }
        }
        const VectorXd base = d.y.col(j) - g * s.m_a.col(j);
        if (!ar1) {
            const VectorXd l = p.transpose() * base;
            const VectorXd r = base - p * l;
            s.drift.col(j) = l;
            s.noise.sigma2(j) = std::max((r.squaredNorm() + extra.i) / n, config_.v_min);
            s.noise.rho(j) = 0.0;
            continue;
        }
        double rho = s.noise.rho(j);
        double sigma2 = s.noise.sigma2(j);
        VectorXd l = s.drift.col(j);
        bool done = false;
        for (int it = 0; it < config_.ar1_max_inner && !done; ++it) {
            lambda_p.resize(n, p.cols());
            for (Eigen::Index o = 0; o < p.cols(); ++o) lambda_p.col(o) = apply_lambda(rho, p.col(o));
            lp = p.transpose() * lambda_p;
            const VectorXd l_new = lp.llt().solve(lambda_p.transpose() * base);
            const VectorXd r = base - p * l_new;
            Ar1Forms q = ar1_forms(r, r);
            q.i += extra.i;
            q.b += extra.b;
            q.c += extra.c;
            const double rho_new = ar1_rho_update(q.b, q.c, sigma2, config_.rho_max);
            const double s2_new = std::max(q.at(rho_new) / n, config_.v_min);
            const double dl = std::sqrt(relative_change(l_new, l));
            const double ds = std::abs(s2_new - sigma2) / sigma2;
            const double dr = std::abs(rho_new - rho);
            done = std::max({dl, ds, dr}) <= config_.ar1_tol;
            l = l_new;
            sigma2 = s2_new;
            rho = rho_new;
        }
        if (!done) ++unconverged;
        s.drift.col(j) = l;
        s.noise.sigma2(j) = sigma2;
        s.noise.rho(j) = rho;
    }
    if (unconverged > 0) {
        warn("AR(1) noise update hit the inner iteration cap at " + std::to_string(unconverged) + " voxels");
    }
}

std::pair<double, double> VemEngine::iterate() {
    const VectorXd h_prev = state_.m_h;
    const MatrixXd a_prev = state_.m_a;
    ++iteration_;
    e_h_step();
    e_a_step();
    e_q_step();
    m_mixture_step();
    m_vh_step();
    m_beta_step();
    m_drift_noise_step();
    const double ch = relative_change(state_.m_h, h_prev);
    const double ca = relative_change(state_.m_a.reshaped(), a_prev.reshaped());
    return {ch, ca};
}

bool VemEngine::free_energy_exact() const { return (state_.beta.array() == 0.0).all(); }

double VemEngine::free_energy() const {
    const ParcelDataset& d = *data_;
    const PosteriorState& s = state_;
    const int nc = d.conditions();
    const int nv = d.voxels();
    const int n = d.scans();
    const int ni = s.mixture.classes;
    const double dh = static_cast<double>(s.m_h.size());
    const bool ar1 = config_.noise_mode == NoiseMode::Ar1;
    double f = 0.0;

    // Expected log-likelihood.
    const MatrixXd g = hrf_regressors();
    std::vector<Ar1Forms> gg(static_cast<std::size_t>(nc * nc));
    std::vector<Ar1Forms> tt(static_cast<std::size_t>(nc * nc));
    for (int a = 0; a < nc; ++a) {
        for (int b = 0; b < nc; ++b) {
            const std::size_t idx = static_cast<std::size_t>(a * nc + b);
            gg[idx] = ar1_forms(g.col(a), g.col(b));
            tt[idx] = {frobenius(s.sigma_h, k_i_[idx]), frobenius(s.sigma_h, k_b_[idx]),
                       frobenius(s.sigma_h, k_c_[idx])};
        }
    }
    const MatrixXd yt = residual_data();
    for (int j = 0; j < nv; ++j) {
        const double rho = ar1 ? s.noise.rho(j) : 0.0;
        const double s2 = s.noise.sigma2(j);
        const MatrixXd e = second_moment_a(j);
        const VectorXd r = yt.col(j) - g * s.m_a.col(j);
        double q = ar1_forms(r, r).at(rho);
        for (int a = 0; a < nc; ++a) {
            for (int b = 0; b < nc; ++b) {
                const std::size_t idx = static_cast<std::size_t>(a * nc + b);
                q += s.sigma_a[j](a, b) * gg[idx].at(rho) + e(a, b) * tt[idx].at(rho);
            }
        }
        f += -0.5 * n * (kLog2Pi + std::log(s2)) + 0.5 * std::log1p(-rho * rho) - 0.5 * q / s2;
    }

    // HRF prior and entropy.
    const double c = frobenius(s.sigma_h, prior_.r_inv) + s.m_h.dot(prior_.r_inv * s.m_h);
    f += -0.5 * dh * (kLog2Pi + std::log(s.v_h)) - 0.5 * prior_.log_det_r - 0.5 * c / s.v_h;
    Eigen::LLT<MatrixXd> llt_h(s.sigma_h);
    if (llt_h.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
    f += 0.5 * dh * (1.0 + kLog2Pi) + llt_h.matrixLLT().diagonal().array().log().sum();

    // Mixture prior, NRL entropy, label entropy.
    for (int j = 0; j < nv; ++j) {
        Eigen::LLT<MatrixXd> llt_a(s.sigma_a[j]);
        if (llt_a.info() != Eigen::Success) return -std::numeric_limits<double>::infinity();
        f += 0.5 * nc * (1.0 + kLog2Pi) + llt_a.matrixLLT().diagonal().array().log().sum();
        for (int m = 0; m < nc; ++m) {
            const double a = s.m_a(m, j);
            const double va = s.sigma_a[j](m, m);
            for (int i = 0; i < ni; ++i) {
                const double p = s.q[m](j, i);
                if (p <= 0.0) continue;
                const double mu = s.mixture.mean(m, i);
                const double v = s.mixture.var(m, i);
                f += p * (-0.5 * (kLog2Pi + std::log(v)) - 0.5 * ((a - mu) * (a - mu) + va) / v) - p * std::log(p);
            }
        }
    }

    // Potts prior.
    const double log_i = std::log(static_cast<double>(ni));
    for (int m = 0; m < nc; ++m) {
        const double beta = s.beta(m);
        if (beta == 0.0) {
            f -= nv * log_i;
        } else {
            f += beta * potts::expected_agreement(s.q[m], d.graph) -
                 potts::surrogate_log_partition(s.q[m], d.graph, beta);
        }
    }

    if (config_.lambda_vh > 0.0) f += std::log(config_.lambda_vh) - config_.lambda_vh * s.v_h;
    if (config_.lambda_beta > 0.0 && config_.estimate_beta) {
        for (int m = 0; m < nc; ++m) f += std::log(config_.lambda_beta) - config_.lambda_beta * s.beta(m);
    }
    return f;
}

VemReport VemEngine::run() {
    using clock = std::chrono::steady_clock;
    initialize();
    VemReport report;
    report.parcel_id = data_->parcel_id;
    report.noise_mode = config_.noise_mode;
    report.dt = data_->design.dt;
    for (int r = 0; r < config_.max_iters; ++r) {
        const auto t0 = clock::now();
        const auto [ch, ca] = iterate();
        TraceEntry entry;
        entry.c_h = ch;
        entry.c_a = ca;
        entry.free_energy = free_energy();
        entry.wall_seconds = std::chrono::duration<double>(clock::now() - t0).count();
        report.trace.push_back(entry);
        if (ch <= config_.tol_h && ca <= config_.tol_a) {
            report.converged = true;
            break;
        }
    }
    report.iterations = static_cast<int>(report.trace.size());
    if (!report.converged) warn("stopping criteria not met after " + std::to_string(config_.max_iters) + " iterations");
    report.free_energy_exact = free_energy_exact();
    report.state = state_;
    report.warnings = warnings_;
    return report;
}

VemReport run_vem(const ParcelDataset& data, const VemConfig& config) {
    VemEngine engine(data, config);
    return engine.run();
}

}  // namespace jde
