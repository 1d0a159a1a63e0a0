#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "hypsae/llm.hpp"
#include "hypsae/sae.hpp"

namespace hypsae::interpret {

/// Percentile range over a neuron's strictly positive activations.
struct PercentileBin {
    double lo = 0.0;
    double hi = 100.0;
};

struct InterpretConfig {
    int n_high = 10;
    int n_low = 10;
    PercentileBin high_bin{90.0, 100.0};
    PercentileBin low_bin{0.0, 10.0};
    int max_words_per_example = 256;
    int n_candidates = 3;
    double temperature = 0.7;
    int max_tokens = 100;
    int fidelity_samples_per_class = 100;
    bool validate = true;  // false gives the single-candidate, unscored variant

    void check() const;
    std::string to_json() const;
    static InterpretConfig from_json(const std::string& text);
    /// Short stable hash of the JSON form.
    std::string fingerprint() const;
};

struct InterpretationCandidate {
    int neuron = -1;
    std::string concept_text;
    std::optional<double> fidelity_f1;  // present iff validation ran
    double precision = 0.0;
    double recall = 0.0;

    std::string to_jsonl(const std::string& config_fingerprint) const;
    static InterpretationCandidate from_jsonl(const std::string& line);
};

class InsufficientActivations : public Error {
public:
    InsufficientActivations(int neuron, std::size_t positives, std::size_t needed);
    int neuron() const { return neuron_; }

private:
    int neuron_;
};

struct BinSamples {
    std::vector<std::size_t> high_rows;  // sampled for the prompt
    std::vector<std::size_t> low_rows;
    std::vector<std::string> high_texts;  // truncated
    std::vector<std::string> low_texts;
    std::vector<std::size_t> high_bin;  // every row in the bin
    std::vector<std::size_t> low_bin;
};

/// Rows of a neuron's bins: positive activations sorted ascending (ties by
/// row), bin [a, b] covers sorted positions [floor(a n / 100), ceil(b n / 100)).
BinSamples sample_activation_bins(const sae::ActivationMatrix& acts, const std::vector<std::string>& texts, int neuron,
                                  const InterpretConfig& config, std::uint64_t seed);

/// Keeps the first `max_words` whitespace-separated words, cutting the
/// original string right after the last kept word.
std::string truncate_words(const std::string& text, int max_words);

std::string build_interpretation_prompt(const std::vector<std::string>& high, const std::vector<std::string>& low);

/// Text between a leading `- "` (optional when the reply continues the
/// primer) and the closing quote on that line.
std::optional<std::string> parse_interpretation(const std::string& response);

struct Fidelity {
    double f1 = 0.0;
    double precision = 0.0;
    double recall = 0.0;
    std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
};

/// F1 with the convention F1 = 0 when precision + recall = 0.
Fidelity fidelity_from_counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn);

/// High-pool texts are positives, low-pool texts negatives; `n_per_class`
/// of each are sampled (all when the pool is smaller) and annotated.
Fidelity score_fidelity(llm::Annotator& annotator, const std::string& concept_text, const std::vector<std::string>& high_pool,
                        const std::vector<std::string>& low_pool, int n_per_class, std::uint64_t seed);

InterpretationCandidate interpret_neuron(llm::ChatClient& generator, llm::Annotator& annotator,
                                         const sae::ActivationMatrix& acts, const std::vector<std::string>& texts,
                                         int neuron, const InterpretConfig& config, std::uint64_t seed,
                                         std::vector<InterpretationCandidate>* all_candidates = nullptr);

}  // namespace hypsae::interpret
