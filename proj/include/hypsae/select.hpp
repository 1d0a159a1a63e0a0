#pragma once

#include <Eigen/Dense>

#include <optional>
#include <string>
#include <vector>

#include "hypsae/common.hpp"

namespace hypsae::select {

struct SelectionConfig {
    int H = 20;
    TaskKind task_kind = TaskKind::regression;
    /// Search bracket; defaults to [lambda_eps * lambda_max, lambda_max].
    std::optional<double> lambda_lo;
    std::optional<double> lambda_hi;
    double lambda_eps = 1e-4;
    int max_bisect_iters = 50;
    double tolerance = 1e-7;
    int max_iterations = 10000;
    bool standardize = true;

    void validate() const;
};

struct SelectionResult {
    Eigen::VectorXd beta;  // original feature scale
    double intercept = 0.0;
    double lambda = 0.0;
    std::vector<int> selected;  // indices with beta != 0, ascending
    std::size_t achieved_count = 0;
    int iterations = 0;

    std::string to_json() const;
    static SelectionResult from_json(const std::string& text);
};

struct Probe {
    double lambda;
    std::size_t count;
};

/// Smallest penalty at which the all-zero coefficient vector is optimal.
/// Regression: max_j |<Z_j, y - mean(y)>| / N on the standardized design.
double lambda_max(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y, TaskKind task_kind, bool standardize = true);

/// Regression minimizes (1/2N)||y - b0 - Z b||^2 + lambda ||b||_1 by cyclic
/// coordinate descent; classification minimizes (1/N) BCE(y, sigmoid(b0 + Z b))
/// + lambda ||b||_1 by accelerated proximal gradient. The intercept is never
/// penalized, and is fixed at 0 for paired-classification.
/// `warm_start` (if given) is a previous result on the same data.
SelectionResult fit_l1(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y, double lambda, const SelectionConfig& config,
                       const SelectionResult* warm_start = nullptr);

/// Max subgradient-optimality violation, measured on the internal
/// (standardized) parameterization, including the intercept's gradient.
double kkt_residual(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y, double lambda, const SelectionResult& result,
                    const SelectionConfig& config);

/// Gradient of the smooth part of the objective with respect to the
/// original-scale coefficients, followed by the intercept's entry.
Eigen::VectorXd smooth_gradient(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y, const SelectionResult& result,
                                const SelectionConfig& config);

/// Objective value of `result` on the internal parameterization.
double objective(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y, double lambda, const SelectionResult& result,
                 const SelectionConfig& config);

/// Bisects log(lambda) for exactly H nonzero coefficients.
SelectionResult binary_search_lambda(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y, const SelectionConfig& config,
                                     std::vector<Probe>* trace = nullptr);

/// Unselected usable features ordered by how soon they would enter the
/// path (largest |smooth gradient| first).
std::vector<int> next_entering_features(const Eigen::MatrixXd& Z, const Eigen::VectorXd& y,
                                        const SelectionResult& result, const SelectionConfig& config);

inline double soft_threshold(double z, double gamma) {
    if (z > gamma) return z - gamma;
    if (z < -gamma) return z + gamma;
    return 0.0;
}

}  // namespace hypsae::select
