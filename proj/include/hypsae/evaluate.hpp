#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hypsae/common.hpp"
#include "hypsae/llm.hpp"

namespace hypsae::evaluate {

/// n_rows x H binary matrix of concept annotations, row-major.
struct AnnotationMatrix {
    std::size_t n_rows = 0;
    std::vector<std::string> hypotheses;
    std::vector<std::string> row_ids;
    std::vector<std::uint8_t> values;
    std::size_t unparsed = 0;  // annotations defaulted to 0

    std::size_t cols() const { return hypotheses.size(); }
    int at(std::size_t row, std::size_t col) const { return values[row * cols() + col]; }
    std::vector<int> column(std::size_t col) const;
    Eigen::MatrixXd to_eigen() const;
    void validate() const;

    std::string to_json() const;
    static AnnotationMatrix from_json(const std::string& text);
};

/// One annotator call per (hypothesis, text) pair, cache permitting.
AnnotationMatrix annotate_matrix(llm::Annotator& annotator, const std::vector<std::string>& hypotheses,
                                 const std::vector<std::string>& texts, const std::vector<std::string>& row_ids = {});

/// E[Y | z=1] - E[Y | z=0]; throws unless z has both classes.
double signed_separation(const std::vector<int>& z, const std::vector<double>& y);
double separation_score(const std::vector<int>& z, const std::vector<double>& y);

struct Delta {
    double delta = 0.0;
    double precision = 0.0;  // Pr[neuron fires | concept present]
    double recall = 0.0;     // Pr[concept present | neuron fires]
};

/// (1 - min(recall, precision)) / min(Pr[zhat=0], Pr[z=0]), with z the
/// neuron indicator and zhat the concept indicator.
Delta interpretation_delta(const std::vector<int>& z, const std::vector<int>& zhat);

/// Joint law of (zhat, z) and conditional means of Y; index order is
/// p[zhat][z].
struct JointCounts {
    double p11 = 0, p10 = 0, p01 = 0, p00 = 0;
    double y11 = 0, y10 = 0, y01 = 0, y00 = 0;
    void validate() const;
    static JointCounts random(Rng& rng);  // flat Dirichlet, uniform means
};

struct TriangleCheck {
    double s_hat = 0, s_z = 0;
    double lhs = 0, rhs = 0;
    bool holds = false;
};

TriangleCheck check_triangle(const JointCounts& joint);

/// Probability a random positive outscores a random negative, ties as 1/2.
double auc(const std::vector<double>& scores, const std::vector<double>& labels);
double r_squared(const std::vector<double>& predictions, const std::vector<double>& y);

struct LinearFit {
    Eigen::VectorXd beta;  // intercept first when fitted
    Eigen::VectorXd std_error;
    Eigen::VectorXd p_value;
    std::vector<double> fitted;  // predictions (probabilities for logit)
    bool intercept = true;
    bool separation = false;  // logit hit a separation pathology
    int iterations = 0;
};

/// OLS with classical standard errors and two-sided t-test p-values.
LinearFit fit_ols(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, bool intercept = true, double l2 = 0.0);
/// Maximum-likelihood logit by IRLS with two-sided Wald z-test p-values.
LinearFit fit_logit(const Eigen::MatrixXd& X, const Eigen::VectorXd& y, bool intercept = true, double l2 = 1e-6);

struct HypothesisRow {
    std::string concept_text;
    std::optional<double> separation;  // signed
    std::optional<double> univariate;  // AUC or R^2
    std::optional<double> coefficient;  // absent when the column was dropped
    std::optional<double> p_value;
    bool significant = false;
};

struct HypothesisReport {
    TaskKind task_kind = TaskKind::regression;
    std::vector<HypothesisRow> rows;
    double overall = 0.0;  // AUC or R^2 of the multivariate fit
    int significant_count = 0;
    double alpha = 0.05;
    double threshold = 0.0;
    std::size_t h_total = 0;
    std::size_t n_rows = 0;
    std::size_t annotation_warnings = 0;
    std::vector<std::string> warnings;

    std::string metric_name() const { return is_classification(task_kind) ? "AUC" : "R2"; }
    std::string to_csv() const;
    std::string to_markdown() const;
    std::string to_json() const;
    static HypothesisReport from_json(const std::string& text);
};

/// Multivariate fit of y on the annotation columns with Bonferroni
/// significance at alpha / h_total (h_total defaults to the column count).
/// Constant columns and exact duplicates of earlier columns are dropped.
/// For paired classification X holds annotation differences, the model has
/// no intercept, and separation is computed over rows where the pair differs.
HypothesisReport fit_report(const Eigen::MatrixXd& X, const std::vector<std::string>& hypotheses,
                            const std::vector<double>& y, TaskKind task, double alpha = 0.05,
                            std::size_t h_total = 0);
HypothesisReport fit_report(const AnnotationMatrix& annotations, const std::vector<double>& y, TaskKind task,
                            double alpha = 0.05, std::size_t h_total = 0);

/// Assignment maximizing total score; result[i] is the column matched to row i.
std::vector<int> hungarian_match(const Eigen::MatrixXd& score);

/// Pearson correlations between reference columns (rows of the result) and
/// inferred columns; constant columns correlate 0.
Eigen::MatrixXd correlation_matrix(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& inferred);

struct F1Similarity {
    std::vector<double> per_pair;
    double mean = 0.0;
};

/// F1 of each inferred column against its matched reference column.
F1Similarity f1_similarity(const Eigen::MatrixXd& reference, const Eigen::MatrixXd& inferred,
                           const std::vector<int>& matching);

double binary_f1(const std::vector<int>& truth, const std::vector<int>& predicted);

std::string build_similarity_prompt(const std::string& text_a, const std::string& text_b);

/// yes -> 1, related -> 0.5, no -> 0.
std::optional<double> parse_similarity(const std::string& response);

struct SurfaceSimilarity {
    double score = 0.0;
    std::size_t unparsed = 0;
};

SurfaceSimilarity surface_similarity(llm::ChatClient& client, const std::string& reference_text,
                                     const std::string& inferred_text, int samples = 5, double temperature = 0.7);

/// Heldout performance of a linear model (L2 1e-6) fit on the training
/// rows of each design: embeddings, full activations, top-H activations,
/// annotations.
std::array<double, 4> stage_diagnostic(const Eigen::MatrixXd& embeddings, const Eigen::MatrixXd& full_acts,
                                       const Eigen::MatrixXd& top_acts, const Eigen::MatrixXd& annotations,
                                       const std::vector<double>& y, TaskKind task,
                                       const std::vector<std::size_t>& train_rows,
                                       const std::vector<std::size_t>& test_rows);

}  // namespace hypsae::evaluate
