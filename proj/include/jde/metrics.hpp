#pragma once

#include <vector>

#include "jde/model.hpp"

namespace jde::metrics {

double mse(const VectorXd& estimate, const VectorXd& truth);

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0;
    double tpr = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points;  // from (0, 0) to (1, 1)
    double auc = 0.0;
};

/// Scores thresholded at every distinct value (score >= t counts as positive).
/// Throws UndefinedAuc when truth holds a single class.
RocCurve roc_curve(const VectorXd& scores, const std::vector<bool>& truth);

struct HrfFeatures {
    double peak_value = 0.0;
    double time_to_peak = 0.0;
    double time_to_undershoot = 0.0;
    double fwhm = 0.0;
};

/// Features of an HRF sampled every dt seconds starting at t = 0.
HrfFeatures hrf_features(const VectorXd& taps, double dt);

/// Pearson correlation.
double correlation(const VectorXd& a, const VectorXd& b);

/// True when some condition has an activated-class mean at or above threshold.
bool parcel_activation_flag(const MixtureParams& mixture, double threshold = 8.0);

}  // namespace jde::metrics
