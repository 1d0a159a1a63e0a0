#include "hypsae/select.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace hypsae::select {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using json = nlohmann::json;

void SelectionConfig::validate() const {
    if (H < 1) throw ValidationError("selection H must be >= 1");
    if (lambda_lo && lambda_hi && !(*lambda_lo < *lambda_hi)) throw ValidationError("selection bracket needs lo < hi");
    if (!(tolerance > 0.0)) throw ValidationError("selection tolerance must be positive");
    if (max_iterations < 1 || max_bisect_iters < 1) throw ValidationError("selection iteration caps must be positive");
    if (!(lambda_eps > 0.0 && lambda_eps < 1.0)) throw ValidationError("lambda_eps must be in (0, 1)");
}

std::string SelectionResult::to_json() const {
    json j;
    j["lambda"] = lambda;
    j["intercept"] = intercept;
    j["selected"] = selected;
    j["achieved_count"] = achieved_count;
    j["coefficients"] = std::vector<double>(beta.data(), beta.data() + beta.size());
    j["iterations"] = iterations;
    return j.dump(1);
}

SelectionResult SelectionResult::from_json(const std::string& text) {
    SelectionResult r;
    try {
        auto j = json::parse(text);
        r.lambda = j.at("lambda").get<double>();
        r.intercept = j.at("intercept").get<double>();
        r.selected = j.at("selected").get<std::vector<int>>();
        r.achieved_count = j.at("achieved_count").get<std::size_t>();
        auto c = j.at("coefficients").get<std::vector<double>>();
        r.beta = Eigen::Map<VectorXd>(c.data(), static_cast<Index>(c.size()));
        r.iterations = j.value("iterations", 0);
    } catch (const json::exception& e) {
        throw ParseError(std::string("selection result: ") + e.what());
    }
    return r;
}

namespace {

constexpr double kConstantColumn = 1e-12;

/// Design in the solver's internal coordinates.
struct Problem {
    MatrixXd x;
    VectorXd center;  // subtracted per column
    VectorXd scale;   // divided per column
    std::vector<bool> usable;
    VectorXd y;
    TaskKind task;
    bool intercept;
    Index n() const { return x.rows(); }
    Index m() const { return x.cols(); }
};

Problem prepare(const MatrixXd& Z, const VectorXd& y, TaskKind task, bool standardize) {
    if (Z.rows() != y.size()) throw ValidationError("design rows do not align with targets");
    if (Z.rows() == 0 || Z.cols() == 0) throw ValidationError("empty design matrix");
    if (!Z.allFinite() || !y.allFinite()) throw ValidationError("non-finite design or targets");
    Problem p;
    p.task = task;
    p.intercept = task != TaskKind::paired_classification;
    p.y = y;
    const Index n = Z.rows(), m = Z.cols();
    const double nd = static_cast<double>(n);
    p.center = p.intercept ? VectorXd(Z.colwise().mean().transpose()) : VectorXd::Zero(m);
    p.scale = VectorXd::Ones(m);
    p.usable.assign(static_cast<std::size_t>(m), true);
    for (Index j = 0; j < m; ++j) {
        const double ss = (Z.col(j).array() - p.center(j)).square().sum() / nd;
        const double sd = std::sqrt(ss);
        if (sd < kConstantColumn) p.usable[static_cast<std::size_t>(j)] = false;
        else if (standardize) p.scale(j) = sd;
    }
    p.x = (Z.rowwise() - p.center.transpose()).array().rowwise() / p.scale.transpose().array();
    for (Index j = 0; j < m; ++j)
        if (!p.usable[static_cast<std::size_t>(j)]) p.x.col(j).setZero();
    return p;
}

double sigmoid(double t) {
    if (t >= 0) return 1.0 / (1.0 + std::exp(-t));
    const double e = std::exp(t);
    return e / (1.0 + e);
}

double log1pexp(double t) { return t > 0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t)); }

/// Internal coefficients from an original-scale result.
void to_internal(const Problem& p, const SelectionResult& r, VectorXd& beta, double& b0) {
    if (r.beta.size() != p.m()) throw ValidationError("coefficient length does not match design");
    beta = r.beta.cwiseProduct(p.scale);
    b0 = r.intercept + p.center.dot(r.beta);
}

SelectionResult to_result(const Problem& p, const VectorXd& beta, double b0, double lambda, int iterations) {
    SelectionResult r;
    r.beta = beta.cwiseQuotient(p.scale);
    r.intercept = p.intercept ? b0 - p.center.dot(r.beta) : 0.0;
    r.lambda = lambda;
    r.iterations = iterations;
    for (Index j = 0; j < beta.size(); ++j)
        if (beta(j) != 0.0) r.selected.push_back(static_cast<int>(j));
    r.achieved_count = r.selected.size();
    return r;
}

/// Smooth-part gradient (features, intercept) at internal coefficients.
void smooth_gradient(const Problem& p, const VectorXd& beta, double b0, VectorXd& g, double& g0) {
    const double nd = static_cast<double>(p.n());
    if (p.task == TaskKind::regression) {
        const VectorXd r = p.y - p.x * beta - VectorXd::Constant(p.n(), b0);
        g = -p.x.transpose() * r / nd;
        g0 = -r.sum() / nd;
    } else {
        VectorXd eta = p.x * beta;
        eta.array() += b0;
        VectorXd resid(p.n());
        for (Index i = 0; i < p.n(); ++i) resid(i) = sigmoid(eta(i)) - p.y(i);
        g = p.x.transpose() * resid / nd;
        g0 = p.intercept ? resid.sum() / nd : 0.0;
    }
}

double smooth_value(const Problem& p, const VectorXd& beta, double b0) {
    const double nd = static_cast<double>(p.n());
    if (p.task == TaskKind::regression) {
        const VectorXd r = p.y - p.x * beta - VectorXd::Constant(p.n(), b0);
        return 0.5 * r.squaredNorm() / nd;
    }
    VectorXd eta = p.x * beta;
    eta.array() += b0;
    double s = 0.0;
    for (Index i = 0; i < p.n(); ++i) s += log1pexp(eta(i)) - p.y(i) * eta(i);
    return s / nd;
}

void check_targets(const Problem& p) {
    if (p.task != TaskKind::regression) {
        for (Index i = 0; i < p.y.size(); ++i)
            if (p.y(i) != 0.0 && p.y(i) != 1.0) throw ValidationError("classification targets must be 0/1");
    }
    const double mean = p.y.mean();
    if (p.task != TaskKind::paired_classification && (p.y.array() - mean).abs().maxCoeff() == 0.0) {
        throw ValidationError("targets have zero variance");
    }
}

double lambda_max_prepared(const Problem& p) {
    VectorXd g;
    double g0;
    double base;
    if (p.task == TaskKind::regression) base = p.y.mean();
    else if (p.task == TaskKind::classification) base = std::log(p.y.mean() / (1.0 - p.y.mean()));
    else base = 0.0;
    smooth_gradient(p, VectorXd::Zero(p.m()), base, g, g0);
    return g.cwiseAbs().maxCoeff();
}

SelectionResult fit_regression(const Problem& p, double lambda, const SelectionConfig& cfg, VectorXd beta) {
    const double nd = static_cast<double>(p.n());
    const double ybar = p.y.mean();
    VectorXd r = p.y - p.x * beta;
    r.array() -= ybar;
    VectorXd col_ss(p.m());
    for (Index j = 0; j < p.m(); ++j) col_ss(j) = p.x.col(j).squaredNorm() / nd;
    double max_change = 0.0;
    for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
        max_change = 0.0;
        for (Index j = 0; j < p.m(); ++j) {
            if (!p.usable[static_cast<std::size_t>(j)]) continue;
            const double rho = p.x.col(j).dot(r) / nd + col_ss(j) * beta(j);
            const double updated = soft_threshold(rho, lambda) / col_ss(j);
            const double delta = updated - beta(j);
            if (delta != 0.0) {
                r -= delta * p.x.col(j);
                beta(j) = updated;
                max_change = std::max(max_change, std::abs(delta));
            }
        }
        if (max_change < cfg.tolerance) return to_result(p, beta, ybar, lambda, iter);
    }
    throw NumericalError("lasso coordinate descent did not converge in " + std::to_string(cfg.max_iterations) +
                         " iterations; final max coefficient change " + std::to_string(max_change));
}

double lipschitz_logistic(const Problem& p) {
    // 0.25 * largest eigenvalue of [X 1]^T [X 1] / N by power iteration
    const Index m = p.m() + (p.intercept ? 1 : 0);
    VectorXd v = VectorXd::Ones(m) / std::sqrt(static_cast<double>(m));
    double eig = 0.0;
    for (int it = 0; it < 200; ++it) {
        VectorXd xv = p.x * v.head(p.m());
        if (p.intercept) xv.array() += v(p.m());
        VectorXd w(m);
        w.head(p.m()) = p.x.transpose() * xv;
        if (p.intercept) w(p.m()) = xv.sum();
        const double nrm = w.norm();
        if (nrm == 0.0) break;
        const double next = nrm;
        v = w / nrm;
        if (std::abs(next - eig) <= 1e-10 * next) {
            eig = next;
            break;
        }
        eig = next;
    }
    // small safety margin on the power-iteration estimate
    return std::max(1e-12, 0.25 * eig * 1.01 / static_cast<double>(p.n()));
}

SelectionResult fit_logistic(const Problem& p, double lambda, const SelectionConfig& cfg, VectorXd beta, double b0) {
    const double step = 1.0 / lipschitz_logistic(p);
    VectorXd x_prev = beta, yb = beta;
    double x0_prev = b0, y0 = b0;
    double t = 1.0;
    VectorXd g;
    double g0;
    double max_change = 0.0;
    for (int iter = 1; iter <= cfg.max_iterations; ++iter) {
        smooth_gradient(p, yb, y0, g, g0);
        VectorXd x_new(p.m());
        for (Index j = 0; j < p.m(); ++j) {
            x_new(j) = p.usable[static_cast<std::size_t>(j)] ? soft_threshold(yb(j) - step * g(j), step * lambda) : 0.0;
        }
        const double x0_new = p.intercept ? y0 - step * g0 : 0.0;
        max_change = std::max((x_new - x_prev).cwiseAbs().maxCoeff(), std::abs(x0_new - x0_prev));
        if (max_change < cfg.tolerance) return to_result(p, x_new, x0_new, lambda, iter);

        // restart momentum when it points uphill
        const double uphill = (yb - x_new).dot(x_new - x_prev) + (y0 - x0_new) * (x0_new - x0_prev);
        if (uphill > 0.0) t = 1.0;
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        const double mom = (t - 1.0) / t_next;
        yb = x_new + mom * (x_new - x_prev);
        y0 = x0_new + mom * (x0_new - x0_prev);
        x_prev = std::move(x_new);
        x0_prev = x0_new;
        t = t_next;
    }
    throw NumericalError("L1 logistic proximal gradient did not converge in " + std::to_string(cfg.max_iterations) +
                         " iterations; final max coefficient change " + std::to_string(max_change));
}

SelectionResult fit_prepared(const Problem& p, double lambda, const SelectionConfig& cfg, const SelectionResult* warm) {
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ValidationError("lambda must be finite and non-negative");
    VectorXd beta = VectorXd::Zero(p.m());
    double b0 = 0.0;
    if (p.task == TaskKind::classification) b0 = std::log(p.y.mean() / (1.0 - p.y.mean()));
    if (warm) to_internal(p, *warm, beta, b0);
    if (p.task == TaskKind::regression) return fit_regression(p, lambda, cfg, beta);
    return fit_logistic(p, lambda, cfg, beta, b0);
}

}  // namespace

double lambda_max(const MatrixXd& Z, const VectorXd& y, TaskKind task_kind, bool standardize) {
    const Problem p = prepare(Z, y, task_kind, standardize);
    check_targets(p);
    return lambda_max_prepared(p);
}

SelectionResult fit_l1(const MatrixXd& Z, const VectorXd& y, double lambda, const SelectionConfig& config,
                       const SelectionResult* warm_start) {
    config.validate();
    const Problem p = prepare(Z, y, config.task_kind, config.standardize);
    check_targets(p);
    return fit_prepared(p, lambda, config, warm_start);
}

double kkt_residual(const MatrixXd& Z, const VectorXd& y, double lambda, const SelectionResult& result,
                    const SelectionConfig& config) {
    const Problem p = prepare(Z, y, config.task_kind, config.standardize);
    VectorXd beta;
    double b0;
    to_internal(p, result, beta, b0);
    VectorXd g;
    double g0;
    smooth_gradient(p, beta, b0, g, g0);
    double worst = p.intercept ? std::abs(g0) : 0.0;
    for (Index j = 0; j < p.m(); ++j) {
        if (!p.usable[static_cast<std::size_t>(j)]) continue;
        const double v = beta(j) == 0.0 ? std::max(0.0, std::abs(g(j)) - lambda)
                                        : std::abs(g(j) + lambda * (beta(j) > 0 ? 1.0 : -1.0));
        worst = std::max(worst, v);
    }
    return worst;
}

VectorXd smooth_gradient(const MatrixXd& Z, const VectorXd& y, const SelectionResult& result,
                         const SelectionConfig& config) {
    const Problem p = prepare(Z, y, config.task_kind, config.standardize);
    VectorXd beta;
    double b0;
    to_internal(p, result, beta, b0);
    VectorXd g;
    double g0;
    smooth_gradient(p, beta, b0, g, g0);
    // chain rule through beta_int = beta * scale, b0 = intercept + center . beta
    VectorXd out(p.m() + 1);
    out.head(p.m()) = g.cwiseProduct(p.scale) + p.center * g0;
    out(p.m()) = g0;
    return out;
}

double objective(const MatrixXd& Z, const VectorXd& y, double lambda, const SelectionResult& result,
                 const SelectionConfig& config) {
    const Problem p = prepare(Z, y, config.task_kind, config.standardize);
    VectorXd beta;
    double b0;
    to_internal(p, result, beta, b0);
    return smooth_value(p, beta, b0) + lambda * beta.lpNorm<1>();
}

SelectionResult binary_search_lambda(const MatrixXd& Z, const VectorXd& y, const SelectionConfig& config,
                                     std::vector<Probe>* trace) {
    config.validate();
    const Problem p = prepare(Z, y, config.task_kind, config.standardize);
    check_targets(p);
    if (config.H >= p.m()) throw ValidationError("selection H must be smaller than the number of features");
    const double lmax = lambda_max_prepared(p);
    double hi = config.lambda_hi.value_or(lmax);
    double lo = config.lambda_lo.value_or(config.lambda_eps * lmax);
    const auto target = static_cast<std::size_t>(config.H);

    auto distance = [&](std::size_t c) { return c > target ? c - target : target - c; };
    SelectionResult best;
    bool have_best = false;
    auto consider = [&](const SelectionResult& r) {
        if (trace) trace->push_back({r.lambda, r.achieved_count});
        if (!have_best || distance(r.achieved_count) < distance(best.achieved_count) ||
            (distance(r.achieved_count) == distance(best.achieved_count) && r.lambda > best.lambda)) {
            best = r;
            have_best = true;
        }
    };

    SelectionResult current = fit_prepared(p, hi, config, nullptr);
    consider(current);
    if (current.achieved_count == target) return current;
    for (int it = 0; it < config.max_bisect_iters; ++it) {
        const double mid = std::exp(0.5 * (std::log(lo) + std::log(hi)));
        current = fit_prepared(p, mid, config, &current);
        consider(current);
        if (current.achieved_count == target) return current;
        if (current.achieved_count > target) lo = mid;
        else hi = mid;
    }
    return best;
}

std::vector<int> next_entering_features(const MatrixXd& Z, const VectorXd& y, const SelectionResult& result,
                                        const SelectionConfig& config) {
    const Problem p = prepare(Z, y, config.task_kind, config.standardize);
    VectorXd beta;
    double b0;
    to_internal(p, result, beta, b0);
    VectorXd g;
    double g0;
    smooth_gradient(p, beta, b0, g, g0);
    std::vector<int> out;
    for (Index j = 0; j < p.m(); ++j)
        if (p.usable[static_cast<std::size_t>(j)] && beta(j) == 0.0) out.push_back(static_cast<int>(j));
    std::stable_sort(out.begin(), out.end(), [&](int a, int b) { return std::abs(g(a)) > std::abs(g(b)); });
    return out;
}

}  // namespace hypsae::select
