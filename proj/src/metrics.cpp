#include "jde/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "jde/errors.hpp"

namespace jde::metrics {

double mse(const VectorXd& estimate, const VectorXd& truth) {
    require(estimate.size() == truth.size(), ErrorKind::DimensionMismatch, "MSE inputs differ in length");
    require(estimate.size() > 0, ErrorKind::InvalidArgument, "MSE of empty vectors");
    return (estimate - truth).squaredNorm() / static_cast<double>(estimate.size());
}

RocCurve roc_curve(const VectorXd& scores, const std::vector<bool>& truth) {
    const std::size_t n = truth.size();
    require(static_cast<std::size_t>(scores.size()) == n, ErrorKind::DimensionMismatch, "scores and truth differ in length");
    const auto pos = static_cast<double>(std::count(truth.begin(), truth.end(), true));
    const double neg = static_cast<double>(n) - pos;
    require(pos > 0 && neg > 0, ErrorKind::UndefinedAuc, "ROC needs both classes in the truth");

    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores(a) > scores(b); });

    RocCurve out;
    out.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    double tp = 0.0;
    double fp = 0.0;
    std::size_t k = 0;
    while (k < n) {
        const double t = scores(order[k]);
        while (k < n && scores(order[k]) == t) {
            if (truth[order[k]]) tp += 1.0;
            else fp += 1.0;
            ++k;
        }
        out.points.push_back({t, fp / neg, tp / pos});
    }
    double auc = 0.0;
    for (std::size_t i = 1; i < out.points.size(); ++i) {
        const auto& a = out.points[i - 1];
        const auto& b = out.points[i];
        auc += (b.fpr - a.fpr) * 0.5 * (a.tpr + b.tpr);
    }
    out.auc = auc;
    return out;
}

HrfFeatures hrf_features(const VectorXd& taps, double dt) {
    require(taps.size() >= 5, ErrorKind::InvalidArgument, "HRF needs at least 5 taps");
    require(dt > 0.0, ErrorKind::InvalidArgument, "dt must be positive");
    const Eigen::Index n = taps.size();
    Eigen::Index k = 0;
    const double pv = taps.maxCoeff(&k);
    require(pv > 0.0, ErrorKind::NoPeak, "HRF has no positive peak");

    HrfFeatures f;
    f.peak_value = pv;
    double shift = 0.0;
    if (k > 0 && k + 1 < n) {
        const double l = taps(k - 1);
        const double r = taps(k + 1);
        const double curv = l - 2.0 * pv + r;
        if (curv < 0.0) shift = 0.5 * (l - r) / curv;
    }
    f.time_to_peak = (static_cast<double>(k) + shift) * dt;

    if (k + 1 < n) {
        Eigen::Index u = 0;
        taps.tail(n - k - 1).minCoeff(&u);
        f.time_to_undershoot = static_cast<double>(k + 1 + u) * dt;
    } else {
        f.time_to_undershoot = static_cast<double>(k) * dt;
    }

    const double half = 0.5 * pv;
    double left = 0.0;
    for (Eigen::Index i = k; i > 0; --i) {
        if (taps(i - 1) < half) {
            const double frac = (half - taps(i - 1)) / (taps(i) - taps(i - 1));
            left = (static_cast<double>(i - 1) + frac) * dt;
            break;
        }
    }
    double right = static_cast<double>(n - 1) * dt;
    for (Eigen::Index i = k; i + 1 < n; ++i) {
        if (taps(i + 1) < half) {
            const double frac = (taps(i) - half) / (taps(i) - taps(i + 1));
            right = (static_cast<double>(i) + frac) * dt;
            break;
        }
    }
    f.fwhm = right - left;
    return f;
}

double correlation(const VectorXd& a, const VectorXd& b) {
    require(a.size() == b.size() && a.size() > 1, ErrorKind::DimensionMismatch, "correlation inputs");
    const VectorXd x = a.array() - a.mean();
    const VectorXd y = b.array() - b.mean();
    const double den = std::sqrt(x.squaredNorm() * y.squaredNorm());
    require(den > 0.0, ErrorKind::InvalidArgument, "correlation of a constant vector");
    return x.dot(y) / den;
}

bool parcel_activation_flag(const MixtureParams& mixture, double threshold) {
    mixture.validate();
    return mixture.mean.col(1).maxCoeff() >= threshold;
}

}  // namespace jde::metrics
