#include "hypsae/interpret.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "hypsae/io.hpp"
#include "hypsae/log.hpp"

namespace hypsae::interpret {

using json = nlohmann::json;

void InterpretConfig::check() const {
    auto in_range = [](const PercentileBin& b) { return b.lo >= 0.0 && b.hi <= 100.0 && b.lo < b.hi; };
    if (!in_range(high_bin) || !in_range(low_bin)) throw ValidationError("interpretation bins must lie within [0, 100]");
    if (low_bin.hi > high_bin.lo) throw ValidationError("interpretation bins overlap or low bin is above high bin");
    if (n_high < 1 || n_low < 1 || n_candidates < 1 || max_words_per_example < 1 || fidelity_samples_per_class < 1) {
        throw ValidationError("interpretation counts must be positive");
    }
    if (!(temperature >= 0.0)) throw ValidationError("interpretation temperature must be >= 0");
}

std::string InterpretConfig::to_json() const {
    json j = {{"n_high", n_high},
              {"n_low", n_low},
              {"high_bin", {high_bin.lo, high_bin.hi}},
              {"low_bin", {low_bin.lo, low_bin.hi}},
              {"max_words_per_example", max_words_per_example},
              {"n_candidates", n_candidates},
              {"temperature", temperature},
              {"max_tokens", max_tokens},
              {"fidelity_samples_per_class", fidelity_samples_per_class},
              {"validate", validate}};
    return j.dump();
}

InterpretConfig InterpretConfig::from_json(const std::string& text) {
    InterpretConfig c;
    try {
        const auto j = json::parse(text);
        c.n_high = j.value("n_high", c.n_high);
        c.n_low = j.value("n_low", c.n_low);
        if (j.contains("high_bin")) c.high_bin = {j["high_bin"].at(0).get<double>(), j["high_bin"].at(1).get<double>()};
        if (j.contains("low_bin")) c.low_bin = {j["low_bin"].at(0).get<double>(), j["low_bin"].at(1).get<double>()};
        c.max_words_per_example = j.value("max_words_per_example", c.max_words_per_example);
        c.n_candidates = j.value("n_candidates", c.n_candidates);
        c.temperature = j.value("temperature", c.temperature);
        c.max_tokens = j.value("max_tokens", c.max_tokens);
        c.fidelity_samples_per_class = j.value("fidelity_samples_per_class", c.fidelity_samples_per_class);
        c.validate = j.value("validate", c.validate);
    } catch (const json::exception& e) {
        throw ParseError(std::string("interpretation config: ") + e.what());
    }
    return c;
}

std::string InterpretConfig::fingerprint() const { return io::sha256_hex(to_json()).substr(0, 16); }

std::string InterpretationCandidate::to_jsonl(const std::string& config_fingerprint) const {
    json j = {{"neuron", neuron}, {"concept", concept_text}, {"precision", precision}, {"recall", recall}};
    j["f1"] = fidelity_f1 ? json(*fidelity_f1) : json(nullptr);
    j["config_fingerprint"] = config_fingerprint;
    return j.dump();
}

InterpretationCandidate InterpretationCandidate::from_jsonl(const std::string& line) {
    InterpretationCandidate c;
    try {
        const auto j = json::parse(line);
        c.neuron = j.at("neuron").get<int>();
        c.concept_text = j.at("concept").get<std::string>();
        c.precision = j.value("precision", 0.0);
        c.recall = j.value("recall", 0.0);
        if (j.contains("f1") && !j["f1"].is_null()) c.fidelity_f1 = j["f1"].get<double>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("interpretation record: ") + e.what());
    }
    return c;
}

InsufficientActivations::InsufficientActivations(int neuron, std::size_t positives, std::size_t needed)
    : Error("neuron " + std::to_string(neuron) + " has " + std::to_string(positives) +
            " positive activations; need at least " + std::to_string(needed)),
      neuron_(neuron) {}

std::string truncate_words(const std::string& text, int max_words) {
    int words = 0;
    std::size_t i = 0;
    const std::size_t n = text.size();
    auto is_space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
    while (i < n) {
        while (i < n && is_space(text[i])) ++i;
        if (i >= n) break;
        if (words == max_words) return text.substr(0, i == 0 ? 0 : text.find_last_not_of(" \t\n\r\f\v", i - 1) + 1);
        while (i < n && !is_space(text[i])) ++i;
        ++words;
    }
    return text;
}

BinSamples sample_activation_bins(const sae::ActivationMatrix& acts, const std::vector<std::string>& texts, int neuron,
                                  const InterpretConfig& config, std::uint64_t seed) {
    config.check();
    if (texts.size() != acts.rows()) throw ValidationError("texts do not align with activation rows");
    if (neuron < 0 || static_cast<std::size_t>(neuron) >= acts.latents()) throw ValidationError("neuron index out of range");

    std::vector<std::pair<double, std::size_t>> positive;
    for (std::size_t i = 0; i < acts.rows(); ++i) {
        const double v = acts.at(i, static_cast<std::size_t>(neuron));
        if (v > 0.0) positive.emplace_back(v, i);
    }
    const auto needed = static_cast<std::size_t>(config.n_high + config.n_low);
    if (positive.size() < needed) throw InsufficientActivations(neuron, positive.size(), needed);
    std::sort(positive.begin(), positive.end());

    const double n = static_cast<double>(positive.size());
    auto bin_rows = [&](const PercentileBin& b) {
        const auto start = static_cast<std::size_t>(std::floor(b.lo * n / 100.0));
        const auto end = std::min(positive.size(), static_cast<std::size_t>(std::ceil(b.hi * n / 100.0)));
        std::vector<std::size_t> rows;
        for (std::size_t p = start; p < end; ++p) rows.push_back(positive[p].second);
        return rows;
    };

    BinSamples out;
    out.high_bin = bin_rows(config.high_bin);
    out.low_bin = bin_rows(config.low_bin);
    Rng rng(seed);
    for (auto idx : rng.sample_without_replacement(out.high_bin.size(), static_cast<std::size_t>(config.n_high))) {
        out.high_rows.push_back(out.high_bin[idx]);
    }
    for (auto idx : rng.sample_without_replacement(out.low_bin.size(), static_cast<std::size_t>(config.n_low))) {
        out.low_rows.push_back(out.low_bin[idx]);
    }
    for (auto r : out.high_rows) out.high_texts.push_back(truncate_words(texts[r], config.max_words_per_example));
    for (auto r : out.low_rows) out.low_texts.push_back(truncate_words(texts[r], config.max_words_per_example));
    return out;
}

namespace {

std::string sample_block(const std::vector<std::string>& samples) {
    std::string out;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        if (i) out += '\n';
        out += "- ";
        out += samples[i];
    }
    return out;
}

}  // namespace

std::string build_interpretation_prompt(const std::vector<std::string>& high, const std::vector<std::string>& low) {
    if (high.empty() || low.empty()) throw ValidationError("interpretation prompt needs positive and negative samples");
    std::string p =
        "You are a machine learning researcher who has trained a neural network on a text dataset. You are trying to "
        "understand what text features cause a specific neuron in the neural network to fire.\n"
        "\n"
        "You are given two sets of SAMPLES: POSITIVE SAMPLES that strongly activate the neuron, and NEGATIVE SAMPLES "
        "from the same distribution that do not activate the neuron. Your goal is to identify a feature that is "
        "present in the positive samples but absent in the negative samples.\n"
        "Example features could be:\n"
        "- \"uses multiple adjectives to describe colors\"\n"
        "- \"describes a patient experiencing seizures or epilepsy\"\n"
        "- \"contains multiple single-digit numbers\"\n"
        "\n"
        "POSITIVE SAMPLES:\n"
        "----------------\n";
    p += sample_block(high);
    p +=
        "\n----------------\n"
        "\n"
        "NEGATIVE SAMPLES:\n"
        "----------------\n";
    p += sample_block(low);
    p +=
        "\n----------------\n"
        "\n"
        "Rules about the feature you identify:\n"
        "- The feature should be objective, focusing on concrete attributes rather than abstract concepts.\n"
        "- The feature should be present in the positive samples and absent in the negative samples. Do not output a "
        "generic feature which also appears in negative samples.\n"
        "- The feature should be as specific as possible, while still applying to all of the positive samples. For "
        "example, if all of the positive samples mention Golden or Labrador retrievers, then the feature should be "
        "\"mentions retriever dogs\", not \"mentions dogs\" or \"mentions Golden retrievers\".\n"
        "\n"
        "Do not output anything else. Your response should be formatted exactly as shown in the examples above. "
        "Please suggest exactly one description, starting with \"-\" and surrounded by quotes \"\". Your response "
        "is:\n"
        "- \"";
    return p;
}

std::optional<std::string> parse_interpretation(const std::string& response) {
    std::size_t start = 0;
    const auto marker = response.find("- \"");
    if (marker != std::string::npos) {
        start = marker + 3;
    } else {
        start = response.find_first_not_of(" \t\r\n\"");
        if (start == std::string::npos) return std::nullopt;
    }
    auto line_end = response.find('\n', start);
    if (line_end == std::string::npos) line_end = response.size();
    const std::string line = response.substr(start, line_end - start);
    const auto close = line.rfind('"');
    std::string concept_text = close == std::string::npos ? line : line.substr(0, close);
    const auto b = concept_text.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::nullopt;
    concept_text = concept_text.substr(b, concept_text.find_last_not_of(" \t\r") - b + 1);
    if (concept_text.empty()) return std::nullopt;
    return concept_text;
}

Fidelity fidelity_from_counts(std::size_t tp, std::size_t fp, std::size_t fn, std::size_t tn) {
    Fidelity f;
    f.tp = tp;
    f.fp = fp;
    f.fn = fn;
    f.tn = tn;
    f.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
    f.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
    f.f1 = f.precision + f.recall > 0 ? 2.0 * f.precision * f.recall / (f.precision + f.recall) : 0.0;
    return f;
}

Fidelity score_fidelity(llm::Annotator& annotator, const std::string& concept_text, const std::vector<std::string>& high_pool,
                        const std::vector<std::string>& low_pool, int n_per_class, std::uint64_t seed) {
    Rng rng(seed);
    const auto hi_idx = rng.sample_without_replacement(high_pool.size(), static_cast<std::size_t>(n_per_class));
    const auto lo_idx = rng.sample_without_replacement(low_pool.size(), static_cast<std::size_t>(n_per_class));
    std::vector<std::pair<std::string, std::string>> pairs;
    for (auto i : hi_idx) pairs.emplace_back(concept_text, high_pool[i]);
    for (auto i : lo_idx) pairs.emplace_back(concept_text, low_pool[i]);
    const auto ann = annotator.annotate_all(pairs);
    std::size_t tp = 0, fn = 0, fp = 0, tn = 0;
    for (std::size_t i = 0; i < ann.size(); ++i) {
        const bool positive_class = i < hi_idx.size();
        const bool said_yes = ann[i].value == 1;
        if (positive_class) (said_yes ? tp : fn)++;
        else (said_yes ? fp : tn)++;
    }
    return fidelity_from_counts(tp, fp, fn, tn);
}

InterpretationCandidate interpret_neuron(llm::ChatClient& generator, llm::Annotator& annotator,
                                         const sae::ActivationMatrix& acts, const std::vector<std::string>& texts,
                                         int neuron, const InterpretConfig& config, std::uint64_t seed,
                                         std::vector<InterpretationCandidate>* all_candidates) {
    config.check();
    const int n_gen = config.validate ? config.n_candidates : 1;
    std::vector<InterpretationCandidate> candidates;
    for (int c = 0; c < n_gen; ++c) {
        const auto bins = sample_activation_bins(acts, texts, neuron, config,
                                                 derive_seed(seed, static_cast<std::uint64_t>(c)));
        llm::ChatRequest req{{{"user", build_interpretation_prompt(bins.high_texts, bins.low_texts)}},
                             config.temperature, config.max_tokens};
        const auto reply = generator.complete(req);
        const auto concept_text = parse_interpretation(reply);
        if (!concept_text) {
            log::warn("unparseable interpretation for neuron " + std::to_string(neuron) + ": " + reply);
            continue;
        }
        InterpretationCandidate cand;
        cand.neuron = neuron;
        cand.concept_text = *concept_text;
        if (config.validate) {
            const auto pool = [&](const std::vector<std::size_t>& bin, const std::vector<std::size_t>& used) {
                const std::set<std::size_t> excl(used.begin(), used.end());
                std::vector<std::string> out;
                const bool exclude = bin.size() >= used.size() + static_cast<std::size_t>(config.fidelity_samples_per_class);
                for (auto r : bin) {
                    if (exclude && excl.count(r)) continue;
                    out.push_back(truncate_words(texts[r], config.max_words_per_example));
                }
                return out;
            };
            const auto fid = score_fidelity(annotator, cand.concept_text, pool(bins.high_bin, bins.high_rows),
                                            pool(bins.low_bin, bins.low_rows), config.fidelity_samples_per_class,
                                            derive_seed(seed, 1000 + static_cast<std::uint64_t>(c)));
            cand.fidelity_f1 = fid.f1;
            cand.precision = fid.precision;
            cand.recall = fid.recall;
        }
        candidates.push_back(std::move(cand));
    }
    if (candidates.empty()) {
        throw ParseError("no parseable interpretation for neuron " + std::to_string(neuron));
    }
    std::size_t best = 0;
    for (std::size_t i = 1; i < candidates.size(); ++i) {
        if (candidates[i].fidelity_f1.value_or(-1.0) > candidates[best].fidelity_f1.value_or(-1.0)) best = i;
    }
    if (all_candidates) *all_candidates = candidates;
    return candidates[best];
}

}  // namespace hypsae::interpret
