#include "jde/potts.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "jde/errors.hpp"

namespace jde::potts {

namespace {

// n_j(i) = sum_{k~j} p_k(i)
MatrixXd neighbour_sums(const SiteMarginals& p, const VoxelGraph& graph) {
    MatrixXd n = MatrixXd::Zero(p.rows(), p.cols());
    for (int j = 0; j < graph.size(); ++j) {
        for (int k : graph.neighbors[j]) n.row(j) += p.row(k);
    }
    return n;
}

double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
    const double mx = v.maxCoeff();
    return mx + std::log((v.array() - mx).exp().sum());
}

}  // namespace

bool on_simplex(const SiteMarginals& p, double tol) {
    for (Eigen::Index j = 0; j < p.rows(); ++j) {
        if ((p.row(j).array() < 0.0).any()) return false;
        if (std::abs(p.row(j).sum() - 1.0) > tol) return false;
    }
    return true;
}

double energy(const Eigen::VectorXi& labels, const VoxelGraph& graph) {
    require(labels.size() == graph.size(), ErrorKind::DimensionMismatch, "labels and graph sizes differ");
    double u = 0.0;
    for (int j = 0; j < graph.size(); ++j) {
        for (int k : graph.neighbors[j]) {
            if (k > j && labels(j) == labels(k)) u += 1.0;
        }
    }
    return u;
}

Enumeration enumerate(const VoxelGraph& graph, double beta, int classes, const MatrixXd& field) {
    const int n = graph.size();
    require(classes >= 1, ErrorKind::InvalidArgument, "classes must be positive");
    require(n * std::log(static_cast<double>(classes)) <= std::log(kMaxConfigurations) + 1e-9,
            ErrorKind::GraphTooLarge, "enumeration limited to 2^24 configurations");
    const bool has_field = field.size() > 0;
    if (has_field) {
        require(field.rows() == n && field.cols() == classes, ErrorKind::DimensionMismatch, "field shape");
    }
    const auto edges = graph.edges();

    std::vector<int> q(n, 0);
    std::size_t total = 1;
    for (int j = 0; j < n; ++j) total *= static_cast<std::size_t>(classes);

    // Two passes: the first finds the max log-weight for a stable log-sum-exp.
    auto log_weight = [&](double& u) {
        u = 0.0;
        for (const auto& [a, b] : edges) u += (q[a] == q[b]) ? 1.0 : 0.0;
        double w = beta * u;
        if (has_field) {
            for (int j = 0; j < n; ++j) w += field(j, q[j]);
        }
        return w;
    };
    auto advance = [&]() {
        for (int j = 0; j < n; ++j) {
            if (++q[j] < classes) return;
            q[j] = 0;
        }
    };

    double mx = -std::numeric_limits<double>::infinity();
    std::fill(q.begin(), q.end(), 0);
    for (std::size_t c = 0; c < total; ++c) {
        double u;
        mx = std::max(mx, log_weight(u));
        advance();
    }

    Enumeration out;
    out.marginals = MatrixXd::Zero(n, classes);
    double sum = 0.0;
    double sum_u = 0.0;
    std::fill(q.begin(), q.end(), 0);
    for (std::size_t c = 0; c < total; ++c) {
        double u;
        const double w = std::exp(log_weight(u) - mx);
        sum += w;
        sum_u += w * u;
        for (int j = 0; j < n; ++j) out.marginals(j, q[j]) += w;
        advance();
    }
    out.log_z = mx + std::log(sum);
    out.mean_energy = sum_u / sum;
    out.marginals /= sum;
    return out;
}

double exact_log_partition(const VoxelGraph& graph, double beta, int classes) {
    return enumerate(graph, beta, classes).log_z;
}

SiteMarginals mean_field_sweep(const SiteMarginals& marginals, const MatrixXd& field, double beta,
                               const VoxelGraph& graph, int sweeps) {
    require(marginals.rows() == graph.size(), ErrorKind::DimensionMismatch, "marginals and graph sizes differ");
    require(field.rows() == marginals.rows() && field.cols() == marginals.cols(), ErrorKind::DimensionMismatch,
            "field shape");
    SiteMarginals p = marginals;
    const Eigen::Index classes = p.cols();
    Eigen::RowVectorXd logit(classes);
    for (int s = 0; s < sweeps; ++s) {
        for (int j = 0; j < graph.size(); ++j) {
            logit = field.row(j);
            if (beta != 0.0) {
                for (int k : graph.neighbors[j]) logit += beta * p.row(k);
            }
            const double lse = log_sum_exp(logit);
            p.row(j) = (logit.array() - lse).exp();
            p.row(j) /= p.row(j).sum();
        }
    }
    return p;
}

double expected_agreement(const SiteMarginals& marginals, const VoxelGraph& graph) {
    require(marginals.rows() == graph.size(), ErrorKind::DimensionMismatch, "marginals and graph sizes differ");
    double s = 0.0;
    for (int j = 0; j < graph.size(); ++j) {
        for (int k : graph.neighbors[j]) {
            if (k > j) s += marginals.row(j).dot(marginals.row(k));
        }
    }
    return s;
}

double surrogate_log_partition(const SiteMarginals& marginals, const VoxelGraph& graph, double beta) {
    const MatrixXd n = neighbour_sums(marginals, graph);
    const double log_i = std::log(static_cast<double>(marginals.cols()));
    double s = 0.0;
    for (Eigen::Index j = 0; j < n.rows(); ++j) s += log_sum_exp(beta * n.row(j)) - log_i;
    return static_cast<double>(n.rows()) * log_i + 0.5 * s;
}

double surrogate_agreement(const SiteMarginals& marginals, const VoxelGraph& graph, double beta) {
    const MatrixXd n = neighbour_sums(marginals, graph);
    double s = 0.0;
    Eigen::RowVectorXd w(n.cols());
    for (Eigen::Index j = 0; j < n.rows(); ++j) {
        w = beta * n.row(j);
        w = (w.array() - w.maxCoeff()).exp();
        s += w.dot(n.row(j)) / w.sum();
    }
    return 0.5 * s;
}

double beta_objective(const SiteMarginals& marginals, const VoxelGraph& graph, double beta, double lambda) {
    return -surrogate_log_partition(marginals, graph, beta) + beta * (expected_agreement(marginals, graph) - lambda);
}

BetaEstimate estimate_beta(const SiteMarginals& marginals, const VoxelGraph& graph, double beta_init, double lambda,
                           const BetaOptions& options) {
    require(beta_init >= 0.0, ErrorKind::InvalidArgument, "beta_init must be nonnegative");
    require(lambda >= 0.0, ErrorKind::InvalidArgument, "lambda_beta must be nonnegative");
    const double agreement = expected_agreement(marginals, graph) - lambda;
    // Gradients below this are treated as zero; the surrogate and the agreement
    // are sums over ~edge_count terms each.
    const double grad_tol = 1e-10 * (static_cast<double>(graph.edge_count()) + 1.0);

    auto objective = [&](double b) { return -surrogate_log_partition(marginals, graph, b) + b * agreement; };
    auto gradient = [&](double b) { return agreement - surrogate_agreement(marginals, graph, b); };

    BetaEstimate out;
    double beta = std::clamp(beta_init, 0.0, options.beta_max);
    double f = objective(beta);
    double step = options.step;
    int it = 0;
    for (; it < options.max_iters; ++it) {
        const double g = gradient(beta);
        if (std::abs(g) <= grad_tol) break;
        if ((beta <= 0.0 && g < 0.0) || (beta >= options.beta_max && g > 0.0)) break;  // projected gradient is zero
        if (step < options.tol) break;
        const double candidate = std::clamp(beta + (g > 0.0 ? step : -step), 0.0, options.beta_max);
        const double fc = objective(candidate);
        if (fc > f) {
            beta = candidate;
            f = fc;
        } else {
            step *= 0.5;
        }
    }
    out.beta = beta;
    out.iterations = it;
    out.converged = it < options.max_iters;
    return out;
}

}  // namespace jde::potts
