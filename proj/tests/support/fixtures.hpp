#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hypsae/common.hpp"

namespace fixtures {

/// Fresh scratch directory under HYPSAE_TEST_TMP (or the system temp dir).
inline std::filesystem::path scratch(const std::string& name) {
    const char* root = std::getenv("HYPSAE_TEST_TMP");
    std::filesystem::path dir = root ? std::filesystem::path(root) : std::filesystem::temp_directory_path() / "hypsae_tests";
    dir /= name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline void write_text(const std::filesystem::path& p, const std::string& s) {
    std::ofstream out(p, std::ios::binary);
    out << s;
}

struct PlantedConcept {
    std::string concept_text;
    std::string keyword;
    double weight;
};

inline std::vector<PlantedConcept> default_concepts() {
    return {{"mentions a cat", "cat", 2.0},
            {"mentions a rocket", "rocket", -2.0},
            {"mentions a violin", "violin", 2.0},
            {"mentions a glacier", "glacier", -2.0},
            {"mentions pepper", "pepper", 2.0}};
}

/// Filler-word texts; each concept's keyword is inserted with probability
/// `rate`, and y ~ Bernoulli(sigmoid(sum_j w_j a_j + bias)).
inline std::string planted_corpus_jsonl(std::size_t n, std::uint64_t seed,
                                        const std::vector<PlantedConcept>& concepts = default_concepts(),
                                        double rate = 0.25, double bias = -0.5) {
    hypsae::Rng rng(seed);
    std::string out;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::string> words;
        for (int w = 0; w < 10; ++w) {
            char buf[8];
            std::snprintf(buf, sizeof buf, "w%03zu", rng.index(300));
            words.emplace_back(buf);
        }
        double eta = bias;
        for (const auto& c : concepts) {
            if (rng.uniform() < rate) {
                words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng.index(words.size() + 1)), c.keyword);
                eta += c.weight;
            }
        }
        const double y = rng.uniform() < 1.0 / (1.0 + std::exp(-eta)) ? 1.0 : 0.0;
        std::string text;
        for (std::size_t w = 0; w < words.size(); ++w) text += (w ? " " : "") + words[w];
        out += nlohmann::json{{"text", text}, {"label", y}}.dump() + "\n";
    }
    return out;
}

inline std::string mock_rules_json(const std::vector<PlantedConcept>& concepts = default_concepts()) {
    nlohmann::json rules = nlohmann::json::array();
    for (const auto& c : concepts) rules.push_back({{"concept", c.concept_text}, {"text_pattern", "\\b" + c.keyword + "\\b"}});
    return nlohmann::json{{"rules", rules}}.dump();
}

/// Run config for the planted corpus with offline embeddings and the mock LLM.
inline nlohmann::json planted_config(const std::filesystem::path& dir, std::uint64_t seed = 1,
                                     const std::vector<PlantedConcept>& concepts = default_concepts()) {
    std::vector<std::string> refs;
    for (const auto& c : concepts) refs.push_back(c.concept_text);
    return {{"dataset", (dir / "data.jsonl").string()},
            {"output_dir", (dir / "run").string()},
            {"seed", seed},
            {"embedding", {{"provider", "hashing"}, {"hashing_dim", 128}}},
            {"sae", {{{"M", 32}, {"k", 4}, {"batch_size", 256}, {"max_epochs", 100}}}},
            {"selection", {{"H", static_cast<int>(concepts.size())}}},
            {"interpretation", {{"fidelity_samples_per_class", 50}}},
            {"evaluation", {{"reference_concepts", refs}}},
            {"mock_llm", (dir / "rules.json").string()}};
}

}  // namespace fixtures
