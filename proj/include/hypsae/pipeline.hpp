#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "hypsae/corpus.hpp"
#include "hypsae/evaluate.hpp"
#include "hypsae/interpret.hpp"
#include "hypsae/llm.hpp"
#include "hypsae/sae.hpp"
#include "hypsae/select.hpp"

namespace hypsae::pipeline {

struct EvaluationConfig {
    double alpha = 0.05;
    std::optional<std::size_t> h_total;  // Bonferroni denominator; defaults to H
    /// Reference concepts for synthetic runs; matched to hypotheses by the
    /// Hungarian algorithm on heldout annotation correlations.
    std::vector<std::string> reference_concepts;
    int surface_samples = 5;
    double recovery_f1 = 0.8;  // F1 at which a reference counts as recovered
    bool stage_diagnostic = false;
};

struct RunConfig {
    std::filesystem::path dataset;
    std::filesystem::path output_dir = "run";
    std::uint64_t seed = 0;
    corpus::SplitFractions splits;
    std::optional<std::uint64_t> split_seed;
    corpus::EmbeddingConfig embedding;
    std::vector<sae::SaeConfig> saes{sae::SaeConfig{}};
    select::SelectionConfig selection;
    std::optional<TaskKind> task_kind;  // overrides the dataset's inferred kind
    interpret::InterpretConfig interpretation;
    llm::ChatConfig generation = llm::ChatConfig::generation_defaults();
    llm::ChatConfig annotation = llm::ChatConfig::annotation_defaults();
    EvaluationConfig evaluation;
    std::optional<std::filesystem::path> mock_llm;  // rules file; replaces every chat endpoint

    /// Checks everything that can be checked before any compute.
    void validate() const;
    std::string to_json() const;
    /// Relative paths resolve against `base_dir`.
    static RunConfig from_json(const std::string& text, const std::filesystem::path& base_dir = {});
    static RunConfig load(const std::filesystem::path& path);
    std::string fingerprint() const;
};

enum class Stage { split = 1, embed, train_sae, select, interpret, evaluate };
std::string to_string(Stage s);

/// Stage failure; the message names the stage and artifacts on disk are kept.
class StageError : public Error {
public:
    StageError(Stage stage, const std::string& what);
    Stage stage() const { return stage_; }

private:
    Stage stage_;
};

struct RunSummary {
    std::filesystem::path run_dir;
    std::vector<Stage> executed;
    std::vector<Stage> skipped;
};

/// Runs every stage up to and including `until`, skipping stages whose
/// artifacts and manifest fingerprint are already current.
RunSummary run_pipeline(const RunConfig& config, Stage until = Stage::evaluate);

/// Re-renders report.md and report.csv from the evaluation artifacts and
/// returns the markdown.
std::string emit_report(const std::filesystem::path& run_dir);

struct TunePoint {
    int M = 0;
    int k = 0;
    double validation_metric = 0.0;
    std::size_t selected = 0;
};

struct TuneResult {
    std::vector<TunePoint> grid;
    TunePoint best;
    std::string to_json() const;
};

/// Trains one SAE per (M, k) pair with k < M and scores the H-feature
/// selector on the validation split; writes tune.json in the run directory.
TuneResult tune(const RunConfig& config, const std::vector<int>& m_values, const std::vector<int>& k_values);

/// Powers of two in [lo, hi].
std::vector<int> powers_of_two(int lo, int hi);

struct TriangleSweep {
    std::size_t trials = 0;
    std::size_t violations = 0;
    double max_gap = 0.0;  // max of lhs - rhs
    double seconds = 0.0;
};

TriangleSweep sweep_triangle(std::size_t trials, std::uint64_t seed);

}  // namespace hypsae::pipeline
