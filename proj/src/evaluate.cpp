#include "hypsae/evaluate.hpp"

#include <boost/math/distributions/normal.hpp>
#include <boost/math/distributions/students_t.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numeric>
#include <sstream>

#include "hypsae/log.hpp"

namespace hypsae::evaluate {

using json = nlohmann::json;

// --- annotation matrix --------------------------------------------------------

std::vector<int> AnnotationMatrix::column(std::size_t col) const {
    if (col >= cols()) throw ValidationError("annotation column out of range");
    std::vector<int> out(n_rows);
    for (std::size_t r = 0; r < n_rows; ++r) out[r] = at(r, col);
    return out;
}

Eigen::MatrixXd AnnotationMatrix::to_eigen() const {
    Eigen::MatrixXd m(n_rows, cols());
    for (std::size_t r = 0; r < n_rows; ++r)
        for (std::size_t c = 0; c < cols(); ++c) m(r, c) = at(r, c);
    return m;
}

void AnnotationMatrix::validate() const {
    if (values.size() != n_rows * cols()) throw ValidationError("annotation matrix size does not match its shape");
    if (!row_ids.empty() && row_ids.size() != n_rows) throw ValidationError("annotation row ids do not match row count");
    for (auto v : values)
        if (v > 1) throw ValidationError("annotation entries must be 0 or 1");
}

std::string AnnotationMatrix::to_json() const {
    json rows = json::array();
    for (std::size_t r = 0; r < n_rows; ++r) {
        json row = json::array();
        for (std::size_t c = 0; c < cols(); ++c) row.push_back(at(r, c));
        rows.push_back(std::move(row));
    }
    return json{{"hypotheses", hypotheses}, {"row_ids", row_ids}, {"values", rows}, {"unparsed", unparsed}}.dump();
}

AnnotationMatrix AnnotationMatrix::from_json(const std::string& text) {
    AnnotationMatrix m;
    try {
        const auto j = json::parse(text);
        m.hypotheses = j.at("hypotheses").get<std::vector<std::string>>();
        m.row_ids = j.value("row_ids", std::vector<std::string>{});
        m.unparsed = j.value("unparsed", std::size_t{0});
        const auto& rows = j.at("values");
        m.n_rows = rows.size();
        for (const auto& row : rows) {
            if (row.size() != m.cols()) throw ValidationError("annotation row has the wrong width");
            for (const auto& v : row) m.values.push_back(static_cast<std::uint8_t>(v.get<int>()));
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("annotation matrix: ") + e.what());
    }
    m.validate();
    return m;
}

AnnotationMatrix annotate_matrix(llm::Annotator& annotator, const std::vector<std::string>& hypotheses,
                                 const std::vector<std::string>& texts, const std::vector<std::string>& row_ids) {
    if (hypotheses.empty() || texts.empty()) throw ValidationError("annotate_matrix needs hypotheses and texts");
    if (!row_ids.empty() && row_ids.size() != texts.size()) throw ValidationError("row ids do not align with texts");
    std::vector<std::pair<std::string, std::string>> pairs;
    pairs.reserve(hypotheses.size() * texts.size());
    for (const auto& t : texts)
        for (const auto& h : hypotheses) pairs.emplace_back(h, t);
    const auto ann = annotator.annotate_all(pairs);

    AnnotationMatrix m;
    m.n_rows = texts.size();
    m.hypotheses = hypotheses;
    m.row_ids = row_ids;
    m.values.resize(pairs.size());
    for (std::size_t i = 0; i < ann.size(); ++i) {
        m.values[i] = static_cast<std::uint8_t>(ann[i].value);
        if (!ann[i].parsed) ++m.unparsed;
    }
    if (m.unparsed) log::warn(std::to_string(m.unparsed) + " annotations were unparseable and recorded as 0");
    return m;
}

// --- separation and fidelity ----------------------------------------------------

double signed_separation(const std::vector<int>& z, const std::vector<double>& y) {
    if (z.size() != y.size()) throw ValidationError("separation: column and target lengths differ");
    double s1 = 0, s0 = 0;
    std::size_t n1 = 0, n0 = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        if (z[i]) {
            s1 += y[i];
            ++n1;
        } else {
            s0 += y[i];
            ++n0;
        }
    }
    if (n1 == 0 || n0 == 0) throw ValidationError("separation score is undefined for a single-class column");
    return s1 / static_cast<double>(n1) - s0 / static_cast<double>(n0);
}

double separation_score(const std::vector<int>& z, const std::vector<double>& y) {
    return std::abs(signed_separation(z, y));
}

Delta interpretation_delta(const std::vector<int>& z, const std::vector<int>& zhat) {
    if (z.size() != zhat.size() || z.empty()) throw ValidationError("delta: columns must be non-empty and aligned");
    double n11 = 0, n_z1 = 0, n_h1 = 0;
    for (std::size_t i = 0; i < z.size(); ++i) {
        n11 += (z[i] && zhat[i]) ? 1 : 0;
        n_z1 += z[i] ? 1 : 0;
        n_h1 += zhat[i] ? 1 : 0;
    }
    const double n = static_cast<double>(z.size());
    const double denom = std::min((n - n_h1) / n, (n - n_z1) / n);
    if (denom <= 0.0) throw ValidationError("delta is undefined when an indicator never takes the value 0");
    Delta d;
    d.precision = n_h1 > 0 ? n11 / n_h1 : 0.0;
    d.recall = n_z1 > 0 ? n11 / n_z1 : 0.0;
    d.delta = (1.0 - std::min(d.recall, d.precision)) / denom;
    return d;
}

void JointCounts::validate() const {
    const double ps[] = {p11, p10, p01, p00};
    const double ys[] = {y11, y10, y01, y00};
    for (double p : ps)
        if (!(p >= 0.0)) throw ValidationError("joint probabilities must be non-negative");
    if (std::abs(p11 + p10 + p01 + p00 - 1.0) > 1e-12) throw ValidationError("joint probabilities must sum to 1");
    for (double y : ys)
        if (!(y >= 0.0 && y <= 1.0)) throw ValidationError("conditional means must lie in [0, 1]");
}

JointCounts JointCounts::random(Rng& rng) {
    double e[4];
    double total = 0;
    for (double& v : e) {
        v = -std::log(1.0 - rng.uniform());
        total += v;
    }
    JointCounts j;
    j.p11 = e[0] / total;
    j.p10 = e[1] / total;
    j.p01 = e[2] / total;
    j.p00 = 1.0 - j.p11 - j.p10 - j.p01;
    if (j.p00 < 0) j.p00 = 0;
    j.y11 = rng.uniform();
    j.y10 = rng.uniform();
    j.y01 = rng.uniform();
    j.y00 = rng.uniform();
    return j;
}

TriangleCheck check_triangle(const JointCounts& j) {
    j.validate();
    const double hat1 = j.p11 + j.p10, hat0 = j.p01 + j.p00;
    const double z1 = j.p11 + j.p01, z0 = j.p10 + j.p00;
    if (hat1 <= 0 || hat0 <= 0 || z1 <= 0 || z0 <= 0) throw ValidationError("degenerate marginal in joint distribution");
    TriangleCheck t;
    t.s_hat = std::abs((j.p11 * j.y11 + j.p10 * j.y10) / hat1 - (j.p01 * j.y01 + j.p00 * j.y00) / hat0);
    t.s_z = std::abs((j.p11 * j.y11 + j.p01 * j.y01) / z1 - (j.p10 * j.y10 + j.p00 * j.y00) / z0);
    const double precision = j.p11 / hat1;
    const double recall = j.p11 / z1;
    t.lhs = std::abs(t.s_hat - t.s_z);
    t.rhs = (1.0 - std::min(precision, recall)) / std::min(hat0, z0);
    t.holds = t.lhs <= t.rhs + 1e-9;
    return t;
}

// --- metrics --------------------------------------------------------------------

double auc(const std::vector<double>& scores, const std::vector<double>& labels) {
    if (scores.size() != labels.size()) throw ValidationError("auc: scores and labels differ in length");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double n_pos = 0, n_neg = 0;
    for (double l : labels) {
        if (l != 0.0 && l != 1.0) throw ValidationError("auc: labels must be 0 or 1");
        (l == 1.0 ? n_pos : n_neg) += 1;
    }
    if (n_pos == 0 || n_neg == 0) throw ValidationError("auc is undefined with a single class");
    // Twice the Mann-Whitney count, kept integral so the result is exact.
    double twice_wins = 0, neg_below = 0;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        double pos = 0, neg = 0;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            (labels[order[j]] == 1.0 ? pos : neg) += 1;
            ++j;
        }
        twice_wins += pos * (2 * neg_below + neg);
        neg_below += neg;
        i = j;
    }
    return twice_wins / (2 * n_pos * n_neg);
}

double r_squared(const std::vector<double>& predictions, const std::vector<double>& y) {
    if (predictions.size() != y.size() || y.empty()) throw ValidationError("r_squared: lengths differ or empty");
    const double mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
    double ss_tot = 0, ss_res = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        ss_tot += (y[i] - mean) * (y[i] - mean);
        ss_res += (y[i] - predictions[i]) * (y[i] - predictions[i]);
    }
    if (ss_tot <= 0) throw ValidationError("r_squared is undefined for a constant target");
    return 1.0 - ss_res / ss_tot;
}

// --- linear models --------------------------------------------------------------

namespace {

Eigen::MatrixXd with_intercept(const Eigen::MatrixXd& X, bool intercept) {
    if (!intercept) return X;
    Eigen::MatrixXd D(X.rows(), X.cols() + 1);
    D.col(0).setOnes();
    D.rightCols(X.cols()) = X;
    return D;
}

Eigen::VectorXd penalty_diag(Eigen::Index p, bool intercept, double l2) {
    Eigen::VectorXd d = Eigen::VectorXd::Constant(p, l2);
    if (intercept && p > 0) d(0) = 0.0;
    return d;
}

Eigen::MatrixXd symmetric_inverse(const Eigen::MatrixXd& A) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
    if (ldlt.info() != Eigen::Success) throw NumericalError("information matrix is singular");
    return ldlt.solve(Eigen::MatrixXd::Identity(A.rows(), A.cols()));
}

double log1pexp(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }
double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

double logit_loss(const Eigen::MatrixXd& D, const Eigen::VectorXd& y, const Eigen::VectorXd& beta,
                  const Eigen::VectorXd& pen) {
    const Eigen::VectorXd eta = D * beta;
    double loss = 0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) loss += log1pexp(eta(i)) - y(i) * eta(i);
    return loss + (pen.array() * beta.array().square()).sum();
}

}  // namespace

LinearFit fit_ols(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, bool intercept, double l2) {
    if (X.rows() != y.size()) throw ValidationError("ols: design and target row counts differ");
    const Eigen::MatrixXd D = with_intercept(X, intercept);
    const Eigen::Index n = D.rows(), p = D.cols();
    Eigen::MatrixXd A = D.transpose() * D;
    A.diagonal() += penalty_diag(p, intercept, l2);
    const Eigen::MatrixXd Ainv = symmetric_inverse(A);
    LinearFit fit;
    fit.intercept = intercept;
    fit.beta = Ainv * (D.transpose() * y);
    const Eigen::VectorXd pred = D * fit.beta;
    fit.fitted.assign(pred.data(), pred.data() + n);
    fit.std_error = Eigen::VectorXd::Constant(p, std::numeric_limits<double>::quiet_NaN());
    fit.p_value = fit.std_error;
    const Eigen::Index dof = n - p;
    if (dof > 0) {
        const double sigma2 = (y - pred).squaredNorm() / static_cast<double>(dof);
        boost::math::students_t dist(static_cast<double>(dof));
        for (Eigen::Index j = 0; j < p; ++j) {
            fit.std_error(j) = std::sqrt(std::max(0.0, sigma2 * Ainv(j, j)));
            if (fit.std_error(j) > 0) {
                const double t = std::abs(fit.beta(j) / fit.std_error(j));
                fit.p_value(j) = 2.0 * boost::math::cdf(boost::math::complement(dist, t));
            } else {
                fit.p_value(j) = fit.beta(j) == 0.0 ? 1.0 : 0.0;
            }
        }
    }
    return fit;
}

LinearFit fit_logit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, bool intercept, double l2) {
    if (X.rows() != y.size()) throw ValidationError("logit: design and target row counts differ");
    for (Eigen::Index i = 0; i < y.size(); ++i)
        if (y(i) != 0.0 && y(i) != 1.0) throw ValidationError("logit: targets must be 0 or 1");
    const Eigen::MatrixXd D = with_intercept(X, intercept);
    const Eigen::Index n = D.rows(), p = D.cols();
    const Eigen::VectorXd pen = penalty_diag(p, intercept, l2);
    LinearFit fit;
    fit.intercept = intercept;
    fit.beta = Eigen::VectorXd::Zero(p);
    double loss = logit_loss(D, y, fit.beta, pen);
    constexpr int kMaxIter = 100;
    bool converged = false;
    Eigen::MatrixXd H;
    for (int it = 0; it < kMaxIter; ++it) {
        fit.iterations = it + 1;
        const Eigen::VectorXd eta = D * fit.beta;
        Eigen::VectorXd mu(n), w(n);
        for (Eigen::Index i = 0; i < n; ++i) {
            mu(i) = sigmoid(eta(i));
            w(i) = mu(i) * (1.0 - mu(i));
        }
        const Eigen::VectorXd grad = D.transpose() * (mu - y) + 2.0 * pen.cwiseProduct(fit.beta);
        H = D.transpose() * w.asDiagonal() * D;
        H.diagonal() += 2.0 * pen;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(H);
        Eigen::VectorXd step = ldlt.solve(grad);
        if (ldlt.info() != Eigen::Success || !step.allFinite()) {
            fit.separation = true;
            break;
        }
        double t = 1.0;
        Eigen::VectorXd next = fit.beta - step;
        double next_loss = logit_loss(D, y, next, pen);
        while (!(next_loss <= loss) && t > 1e-10) {
            t *= 0.5;
            next = fit.beta - t * step;
            next_loss = logit_loss(D, y, next, pen);
        }
        const double change = (t * step).cwiseAbs().maxCoeff();
        if (next_loss <= loss) {
            fit.beta = next;
            loss = next_loss;
        }
        if (change < 1e-8 || t <= 1e-10) {
            converged = true;
            break;
        }
    }
    const Eigen::VectorXd eta = D * fit.beta;
    fit.fitted.resize(n);
    Eigen::VectorXd w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        fit.fitted[i] = sigmoid(eta(i));
        w(i) = fit.fitted[i] * (1.0 - fit.fitted[i]);
    }
    // under (quasi-)separation the ridge alone bounds the fit, leaving some
    // rows predicted almost exactly
    bool saturated = false;
    for (Eigen::Index i = 0; i < n; ++i) saturated = saturated || (std::abs(eta(i)) > 9.0 && (eta(i) > 0) == (y(i) == 1.0));
    if (!converged || saturated) fit.separation = true;
    H = D.transpose() * w.asDiagonal() * D;
    H.diagonal() += 2.0 * pen;
    fit.std_error = Eigen::VectorXd::Constant(p, std::numeric_limits<double>::quiet_NaN());
    fit.p_value = fit.std_error;
    try {
        const Eigen::MatrixXd cov = symmetric_inverse(H);
        boost::math::normal norm;
        for (Eigen::Index j = 0; j < p; ++j) {
            fit.std_error(j) = std::sqrt(std::max(0.0, cov(j, j)));
            if (fit.std_error(j) > 0 && std::isfinite(fit.std_error(j))) {
                const double z = std::abs(fit.beta(j) / fit.std_error(j));
                fit.p_value(j) = 2.0 * boost::math::cdf(boost::math::complement(norm, z));
            }
        }
    } catch (const NumericalError&) {
        fit.separation = true;
    }
    return fit;
}

// --- hypothesis report ----------------------------------------------------------

HypothesisReport fit_report(const Eigen::MatrixXd& X, const std::vector<std::string>& hypotheses,
                            const std::vector<double>& y, TaskKind task, double alpha, std::size_t h_total) {
    const auto n = static_cast<std::size_t>(X.rows());
    const auto H = static_cast<std::size_t>(X.cols());
    if (hypotheses.size() != H) throw ValidationError("fit_report: hypothesis count does not match columns");
    if (y.size() != n) throw ValidationError("fit_report: target length does not match rows");
    if (n <= H + 1) throw ValidationError("fit_report needs more rows than hypotheses + 1");
    if (!(alpha > 0 && alpha < 1)) throw ValidationError("fit_report: alpha must lie in (0, 1)");

    HypothesisReport rep;
    rep.task_kind = task;
    rep.alpha = alpha;
    rep.h_total = h_total ? h_total : H;
    rep.threshold = alpha / static_cast<double>(rep.h_total);
    rep.n_rows = n;
    const bool paired = task == TaskKind::paired_classification;
    const bool classify = is_classification(task);

    std::vector<Eigen::Index> kept;
    rep.rows.resize(H);
    for (std::size_t c = 0; c < H; ++c) {
        auto& row = rep.rows[c];
        row.concept_text = hypotheses[c];
        const Eigen::VectorXd col = X.col(static_cast<Eigen::Index>(c));
        const bool constant = (col.array() == col(0)).all();
        bool duplicate = false;
        for (auto k : kept) duplicate = duplicate || X.col(k) == col;
        if (constant) {
            rep.warnings.push_back("dropped constant column: " + hypotheses[c]);
            log::warn("dropping constant annotation column '" + hypotheses[c] + "'");
        } else if (duplicate) {
            rep.warnings.push_back("dropped column identical to an earlier one: " + hypotheses[c]);
            log::warn("dropping duplicate annotation column '" + hypotheses[c] + "'");
        } else {
            kept.push_back(static_cast<Eigen::Index>(c));
        }
        // Separation: indicator column directly, or the sign of a pair difference.
        std::vector<int> z;
        std::vector<double> yz;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = col(static_cast<Eigen::Index>(i));
            if (paired) {
                if (v == 0) continue;
                z.push_back(v > 0 ? 1 : 0);
            } else {
                z.push_back(v != 0 ? 1 : 0);
            }
            yz.push_back(y[i]);
        }
        try {
            row.separation = signed_separation(z, yz);
        } catch (const ValidationError&) {
        }
        if (!constant) {
            const std::vector<double> scores(col.data(), col.data() + col.size());
            if (classify) {
                row.univariate = auc(scores, y);
            } else {
                const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(n));
                const auto uni = fit_ols(col, yv, true);
                row.univariate = r_squared(uni.fitted, y);
            }
        }
    }

    Eigen::MatrixXd Xk(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kept.size()));
    for (std::size_t k = 0; k < kept.size(); ++k) Xk.col(static_cast<Eigen::Index>(k)) = X.col(kept[k]);
    const Eigen::VectorXd yv = Eigen::Map<const Eigen::VectorXd>(y.data(), static_cast<Eigen::Index>(n));
    const bool intercept = !paired;
    LinearFit fit = classify ? fit_logit(Xk, yv, intercept) : fit_ols(Xk, yv, intercept);
    if (fit.separation) {
        rep.warnings.push_back("logit separation detected; coefficients held finite by ridge 1e-6");
        log::warn("logit fit hit (quasi-)separation; coefficients are ridge-capped");
    }
    const Eigen::Index off = intercept ? 1 : 0;
    for (std::size_t k = 0; k < kept.size(); ++k) {
        auto& row = rep.rows[static_cast<std::size_t>(kept[k])];
        row.coefficient = fit.beta(off + static_cast<Eigen::Index>(k));
        const double p = fit.p_value(off + static_cast<Eigen::Index>(k));
        if (std::isfinite(p)) {
            row.p_value = p;
            row.significant = p < rep.threshold;
        }
        rep.significant_count += row.significant ? 1 : 0;
    }
    rep.overall = classify ? auc(fit.fitted, y) : r_squared(fit.fitted, y);
    return rep;
}

HypothesisReport fit_report(const AnnotationMatrix& annotations, const std::vector<double>& y, TaskKind task,
                            double alpha, std::size_t h_total) {
    annotations.validate();
    auto rep = fit_report(annotations.to_eigen(), annotations.hypotheses, y, task, alpha, h_total);
    rep.annotation_warnings = annotations.unparsed;
    return rep;
}

namespace {

std::string fmt(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << *v;
    return os.str();
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

std::string md_cell(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '|') out += '\\';
        out += c == '\n' ? ' ' : c;
    }
    return out;
}

// Positive separations first (largest first), then negative (most negative
// first), then undefined.
std::vector<std::size_t> display_order(const std::vector<HypothesisRow>& rows) {
    std::vector<std::size_t> idx(rows.size());
    std::iota(idx.begin(), idx.end(), 0);
    auto block = [&](std::size_t i) {
        if (!rows[i].separation) return 2;
        return *rows[i].separation >= 0 ? 0 : 1;
    };
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        const int ba = block(a), bb = block(b);
        if (ba != bb) return ba < bb;
        if (ba == 0) return *rows[a].separation > *rows[b].separation;
        if (ba == 1) return *rows[a].separation < *rows[b].separation;
        return false;
    });
    return idx;
}

}  // namespace

std::string HypothesisReport::to_csv() const {
    std::ostringstream os;
    os << "concept,sep," << metric_name() << ",coefficient,p,significant\n";
    for (auto i : display_order(rows)) {
        const auto& r = rows[i];
        os << csv_field(r.concept_text) << ',' << fmt(r.separation) << ',' << fmt(r.univariate) << ','
           << fmt(r.coefficient) << ',';
        if (r.p_value) {
            std::ostringstream p;
            p << std::scientific << std::setprecision(6) << *r.p_value;
            os << p.str();
        }
        os << ',' << (r.significant ? "true" : "false") << '\n';
    }
    return os.str();
}

std::string HypothesisReport::to_markdown() const {
    std::ostringstream os;
    os << "Overall " << metric_name() << ": " << fmt(overall) << "  \n";
    os << significant_count << " significant of " << rows.size() << " (p < " << std::setprecision(3) << threshold
       << ")\n\n";
    os << "| Hypothesis | Sep. | " << metric_name() << " | Coef. | p | Sig. |\n";
    os << "|---|---:|---:|---:|---:|:---:|\n";
    for (auto i : display_order(rows)) {
        const auto& r = rows[i];
        std::string p;
        if (r.p_value) {
            std::ostringstream ps;
            ps << std::scientific << std::setprecision(2) << *r.p_value;
            p = ps.str();
        }
        os << "| " << md_cell(r.concept_text) << " | " << fmt(r.separation) << " | " << fmt(r.univariate) << " | "
           << fmt(r.coefficient) << " | " << p << " | " << (r.significant ? "*" : "") << " |\n";
    }
    if (annotation_warnings) os << "\n" << annotation_warnings << " annotations were unparseable and counted as No.\n";
    for (const auto& w : warnings) os << "\n- " << w;
    if (!warnings.empty()) os << '\n';
    return os.str();
}

std::string HypothesisReport::to_json() const {
    auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
    json rs = json::array();
    for (const auto& r : rows) {
        rs.push_back({{"concept", r.concept_text},
                      {"separation", opt(r.separation)},
                      {"univariate", opt(r.univariate)},
                      {"coefficient", opt(r.coefficient)},
                      {"p_value", opt(r.p_value)},
                      {"significant", r.significant}});
    }
    return json{{"task_kind", to_string(task_kind)},
                {"metric", metric_name()},
                {"overall", overall},
                {"significant_count", significant_count},
                {"alpha", alpha},
                {"threshold", threshold},
                {"h_total", h_total},
                {"n_rows", n_rows},
                {"annotation_warnings", annotation_warnings},
                {"warnings", warnings},
                {"hypotheses", rs}}
        .dump(2);
}

HypothesisReport HypothesisReport::from_json(const std::string& text) {
    HypothesisReport rep;
    auto opt = [](const json& v) { return v.is_null() ? std::optional<double>{} : std::optional<double>(v.get<double>()); };
    try {
        const auto j = json::parse(text);
        rep.task_kind = task_kind_from_string(j.at("task_kind").get<std::string>());
        rep.overall = j.at("overall").get<double>();
        rep.significant_count = j.at("significant_count").get<int>();
        rep.alpha = j.at("alpha").get<double>();
        rep.threshold = j.at("threshold").get<double>();
        rep.h_total = j.at("h_total").get<std::size_t>();
        rep.n_rows = j.at("n_rows").get<std::size_t>();
        rep.annotation_warnings = j.value("annotation_warnings", std::size_t{0});
        rep.warnings = j.value("warnings", std::vector<std::string>{});
        for (const auto& r : j.at("hypotheses")) {
            HypothesisRow row;
            row.concept_text = r.at("concept").get<std::string>();
            row.separation = opt(r.at("separation"));
            row.univariate = opt(r.at("univariate"));
            row.coefficient = opt(r.at("coefficient"));
            row.p_value = opt(r.at("p_value"));
            row.significant = r.at("significant").get<bool>();
            rep.rows.push_back(std::move(row));
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("hypothesis report: ") + e.what());
    }
    return rep;
}

// --- matching -------------------------------------------------------------------

std::vector<int> hungarian_match(const Eigen::MatrixXd& score) {
    if (score.rows() != score.cols()) throw ValidationError("hungarian_match needs a square matrix");
    if (!score.allFinite()) throw ValidationError("hungarian_match needs finite entries");
    const int n = static_cast<int>(score.rows());
    if (n == 0) return {};
    // Potentials-based O(n^3) assignment on cost = -score, 1-indexed.
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(n + 1, 0), v(n + 1, 0);
    std::vector<int> p(n + 1, 0), way(n + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(n + 1, inf);
        std::vector<char> used(n + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            double delta = inf;
            int j1 = 0;
            for (int j = 1; j <= n; ++j) {
                if (used[j]) continue;
                const double cur = -score(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= n; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    std::vector<int> match(n);
    for (int j = 1; j <= n; ++j) match[p[j] - 1] = j - 1;
    return match;
}

Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& inferred) {
    if (reference.rows() != inferred.rows()) throw ValidationError("correlation_matrix: row counts differ");
    auto standardize = [](const Eigen::MatrixXd& M) {
        Eigen::MatrixXd S = M.rowwise() - M.colwise().mean();
        for (Eigen::Index c = 0; c < S.cols(); ++c) {
            const double norm = S.col(c).norm();
            if (norm > 0) S.col(c) /= norm;
            else S.col(c).setZero();
        }
        return S;
    };
    return standardize(reference).transpose() * standardize(inferred);
}

double binary_f1(const std::vector<int>& truth, const std::vector<int>& predicted) {
    if (truth.size() != predicted.size()) throw ValidationError("binary_f1: lengths differ");
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        if (truth[i] && predicted[i]) ++tp;
        else if (predicted[i]) ++fp;
        else if (truth[i]) ++fn;
    }
    return tp > 0 ? 2 * tp / (2 * tp + fp + fn) : 0.0;
}

F1Similarity f1_similarity(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& inferred,
                           const std::vector<int>& matching) {
    if (reference.rows() != inferred.rows()) throw ValidationError("f1_similarity: row counts differ");
    if (matching.size() != static_cast<std::size_t>(reference.cols()))
        throw ValidationError("f1_similarity: matching must cover every reference column");
    F1Similarity out;
    const auto n = static_cast<std::size_t>(reference.rows());
    for (std::size_t r = 0; r < matching.size(); ++r) {
        if (matching[r] < 0 || matching[r] >= inferred.cols()) throw ValidationError("f1_similarity: bad match index");
        std::vector<int> t(n), p(n);
        for (std::size_t i = 0; i < n; ++i) {
            t[i] = reference(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(r)) != 0;
            p[i] = inferred(static_cast<Eigen::Index>(i), matching[r]) != 0;
        }
        out.per_pair.push_back(binary_f1(t, p));
    }
    if (!out.per_pair.empty())
        out.mean = std::accumulate(out.per_pair.begin(), out.per_pair.end(), 0.0) / static_cast<double>(out.per_pair.size());
    return out;
}

// --- surface similarity ---------------------------------------------------------

std::string build_similarity_prompt(const std::string& text_a, const std::string& text_b) {
    return "Is text_a and text_b similar in meaning? Respond with yes, related, or no.\n"
           "\n"
           "Here are a few examples.\n"
           "\n"
           "Example 1:\n"
           "text_a: has a topic of protecting the environment\n"
           "text_b: has a topic of environmental protection and sustainability\n"
           "output: yes\n"
           "\n"
           "Example 2:\n"
           "text_a: has a language of German\n"
           "text_b: has a language of Deutsch\n"
           "output: yes\n"
           "\n"
           "Example 3:\n"
           "text_a: has a topic of the relation between political figures\n"
           "text_b: has a topic of international diplomacy\n"
           "output: related\n"
           "\n"
           "Example 4:\n"
           "text_a: has a topic of the sports\n"
           "text_b: has a topic of sports team recruiting new members\n"
           "output: related\n"
           "\n"
           "Example 5:\n"
           "text_a: has a named language of Korean\n"
           "text_b: uses archaic and poetic diction\n"
           "output: no\n"
           "\n"
           "Example 6:\n"
           "text_a: has a named language of Korean\n"
           "text_b: has a named language of Japanese\n"
           "output: no\n"
           "\n"
           "Example 7:\n"
           "text_a: describes an important 20th century historical event\n"
           "text_b: describes a 20th century European politician\n"
           "output: no\n"
           "\n"
           "Target:\n"
           "text_a: " +
           text_a + "\ntext_b: " + text_b + "\noutput:";
}

std::optional<double> parse_similarity(const std::string& response) {
    std::string word;
    for (char c : response) {
        if (std::isalpha(static_cast<unsigned char>(c))) {
            word += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        } else if (!word.empty()) {
            break;
        }
    }
    if (word == "yes") return 1.0;
    if (word == "related") return 0.5;
    if (word == "no") return 0.0;
    return std::nullopt;
}

SurfaceSimilarity surface_similarity(llm::ChatClient& client, const std::string& reference_text,
                                     const std::string& inferred_text, int samples, double temperature) {
    if (reference_text.empty() || inferred_text.empty()) throw ValidationError("surface_similarity needs non-empty texts");
    if (samples < 1) throw ValidationError("surface_similarity needs at least one sample");
    const llm::ChatRequest req{{{"user", build_similarity_prompt(reference_text, inferred_text)}}, temperature, 5};
    SurfaceSimilarity out;
    double total = 0;
    for (int s = 0; s < samples; ++s) {
        const auto reply = client.complete(req);
        const auto v = parse_similarity(reply);
        if (!v) {
            ++out.unparsed;
            log::warn("unparseable similarity judgment: " + reply);
        }
        total += v.value_or(0.0);
    }
    out.score = total / samples;
    return out;
}

// --- stage diagnostic -------------------------------------------------------------

std::array<double, 4> stage_diagnostic(const Eigen::MatrixXd& embeddings, const Eigen::MatrixXd& full_acts,
                                       const Eigen::MatrixXd& top_acts, const Eigen::MatrixXd& annotations,
                                       const std::vector<double>& y, TaskKind task,
                                       const std::vector<std::size_t>& train_rows,
                                       const std::vector<std::size_t>& test_rows) {
    const Eigen::MatrixXd* designs[4] = {&embeddings, &full_acts, &top_acts, &annotations};
    for (auto* d : designs)
        if (static_cast<std::size_t>(d->rows()) != y.size()) throw ValidationError("stage_diagnostic: row mismatch");
    if (train_rows.empty() || test_rows.empty()) throw ValidationError("stage_diagnostic needs train and test rows");
    const bool classify = is_classification(task);
    const bool intercept = task != TaskKind::paired_classification;
    auto take = [](const Eigen::MatrixXd& M, const std::vector<std::size_t>& rows) {
        Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), M.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i] >= static_cast<std::size_t>(M.rows())) throw ValidationError("stage_diagnostic: row out of range");
            out.row(static_cast<Eigen::Index>(i)) = M.row(static_cast<Eigen::Index>(rows[i]));
        }
        return out;
    };
    Eigen::VectorXd ytr(static_cast<Eigen::Index>(train_rows.size()));
    for (std::size_t i = 0; i < train_rows.size(); ++i) ytr(static_cast<Eigen::Index>(i)) = y[train_rows[i]];
    std::vector<double> yte;
    for (auto r : test_rows) yte.push_back(y[r]);

    std::array<double, 4> out{};
    for (int s = 0; s < 4; ++s) {
        const Eigen::MatrixXd Xtr = take(*designs[s], train_rows);
        const Eigen::MatrixXd Xte = take(*designs[s], test_rows);
        const auto fit = classify ? fit_logit(Xtr, ytr, intercept, 1e-6) : fit_ols(Xtr, ytr, intercept, 1e-6);
        Eigen::VectorXd eta = Xte * fit.beta.tail(Xte.cols());
        if (intercept) eta.array() += fit.beta(0);
        std::vector<double> pred(eta.data(), eta.data() + eta.size());
        out[static_cast<std::size_t>(s)] = classify ? auc(pred, yte) : r_squared(pred, yte);
    }
    return out;
}

}  // namespace hypsae::evaluate
