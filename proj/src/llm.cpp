#include "hypsae/llm.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <sstream>

#include "hypsae/common.hpp"
#include "hypsae/io.hpp"
#include "hypsae/log.hpp"

namespace hypsae::llm {

using json = nlohmann::json;

void ChatConfig::validate() const {
    if (!(temperature >= 0.0)) throw ValidationError("chat temperature must be >= 0");
    if (max_retries < 0) throw ValidationError("chat max_retries must be >= 0");
    if (max_in_flight < 1) throw ValidationError("chat max_in_flight must be >= 1");
    if (max_tokens < 1) throw ValidationError("chat max_tokens must be >= 1");
}

ChatConfig ChatConfig::generation_defaults() { return ChatConfig{}; }

ChatConfig ChatConfig::annotation_defaults() {
    ChatConfig c;
    c.model = "gpt-4o-mini";
    c.temperature = 0.0;
    c.max_tokens = 150;
    return c;
}

net::InFlightLimiter& global_limiter() {
    static net::InFlightLimiter limiter(8);
    return limiter;
}

void set_global_in_flight_limit(int limit) { global_limiter().set_limit(limit); }

std::string ChatClient::complete(const ChatRequest& request) {
    net::InFlightLimiter::Guard guard(global_limiter());
    ++requests_;
    return do_complete(request);
}

HttpChatClient::HttpChatClient(ChatConfig config, std::shared_ptr<net::Transport> transport, net::Sleeper sleeper)
    : config_(std::move(config)), transport_(std::move(transport)), sleeper_(std::move(sleeper)),
      api_key_(net::api_key_from_env()) {
    config_.validate();
}

std::string HttpChatClient::do_complete(const ChatRequest& request) {
    json msgs = json::array();
    for (const auto& m : request.messages) msgs.push_back({{"role", m.role}, {"content", m.content}});
    const json body = {{"model", config_.model},
                       {"messages", msgs},
                       {"temperature", request.temperature},
                       {"max_tokens", request.max_tokens}};
    net::RetryPolicy policy{config_.max_retries, config_.backoff_base_seconds, 2.0};
    const auto outcome = net::post_with_retries(*transport_, "/chat/completions", body.dump(),
                                                {{"Authorization", "Bearer " + api_key_}}, policy, sleeper_);
    last_backoffs_ = outcome.backoffs;
    if (!outcome.ok()) {
        std::ostringstream msg;
        msg << "chat completion failed after " << outcome.status_history.size() << " attempt(s); last status "
            << outcome.response.status << "; history:";
        for (int s : outcome.status_history) msg << ' ' << s;
        throw TransportError(msg.str());
    }
    try {
        const auto j = json::parse(outcome.response.body);
        const auto& content = j.at("choices").at(0).at("message").at("content");
        return content.is_null() ? std::string{} : content.get<std::string>();
    } catch (const json::exception& e) {
        throw ParseError(std::string("chat response: ") + e.what());
    }
}

std::string CannedChatClient::do_complete(const ChatRequest&) {
    std::lock_guard lk(m_);
    if (responses_.empty()) return {};
    return responses_[next_++ % responses_.size()];
}

// --- annotation ---------------------------------------------------------------

std::string build_annotation_prompt(const std::string& concept_text, const std::string& text) {
    std::string p =
        "Check whether the TEXT satisfies a PROPERTY. Respond with Yes or No with an explanation that discusses the "
        "evidence from the TEXT (at most a sentence). When uncertain, output No.\n"
        "\n"
        "Example 1:\n"
        "PROPERTY: \"mentions a natural scene.\"\n"
        "TEXT: \"I love the way the sun sets in the evening.\"\n"
        "Output: Yes. \"Sun sets\" are clearly natural scenes.\n"
        "\n"
        "Example 2:\n"
        "PROPERTY: \"writes in a 1st person perspective.\"\n"
        "TEXT: \"Jacob is smart.\"\n"
        "Output: No. This text is written in a 3rd person perspective.\n"
        "\n"
        "Example 3:\n"
        "PROPERTY: \"is better than group B.\"\n"
        "TEXT: \"I also need to buy a chair.\"\n"
        "Output: No. It is unclear what the PROPERTY means (e.g., what does group B mean?) and doesn't seem related "
        "to the text.\n"
        "\n"
        "Example 4:\n"
        "PROPERTY: \"mentions that the breakfast is good on the airline.\"\n"
        "TEXT: \"The airline staff was really nice! Enjoyable flight.\"\n"
        "Output: No. Although the text appreciates the flight experience, it DOES NOT mention about the breakfast.\n"
        "\n"
        "Example 5:\n"
        "PROPERTY: \"appreciates the writing style of the author.\"\n"
        "TEXT: \"The paper absolutely sucks because its underlying logic is wrong. However, the presentation of the "
        "paper is clear and the use of language is really impressive.\"\n"
        "Output: Yes. Although the text dislikes the paper, it says \"the presentation of the paper is clear\", so it "
        "DOES like the writing style.\n"
        "\n"
        "Example 6:\n"
        "PROPERTY: \"has a formal style; specifically, the language in the text is relatively formal, complex and "
        "academic. For example, 'represent whom and which'\"\n"
        "TEXT: \"investigates formation of nominalization\"\n"
        "Output: Yes. \"formation\" and \"nominalization\" are abstract and complex nouns.\n"
        "\n"
        "Example 7:\n"
        "PROPERTY: \"refers to historical dates; specifically, there are references to years or specific dates in "
        "the text. For example, 'Obama was born on August 4, 1961.'\"\n"
        "TEXT: \"A member of the Democratic Party, he was the first African-American president of the United "
        "States.\"\n"
        "Output: No. The text does not mention date.\n"
        "\n"
        "Now complete the following example - Respond with Yes or No with an explanation that discusses the evidence "
        "from the TEXT. When uncertain, output No.\n"
        "\n"
        "PROPERTY: ";
    p += concept_text;
    p += "\nTEXT: ";
    p += text;
    p += "\nOutput:";
    return p;
}

namespace {

std::string lower(std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
}

/// First alphabetic token, lower-cased.
std::string first_word(const std::string& s) {
    std::size_t i = 0;
    while (i < s.size() && !std::isalpha(static_cast<unsigned char>(s[i]))) {
        // skip leading whitespace, quotes, bullets and markdown emphasis only
        const char c = s[i];
        if (!(std::isspace(static_cast<unsigned char>(c)) || c == '"' || c == '\'' || c == '*' || c == '-' || c == '`'))
            return {};
        ++i;
    }
    std::size_t j = i;
    while (j < s.size() && std::isalpha(static_cast<unsigned char>(s[j]))) ++j;
    return lower(s.substr(i, j - i));
}

}  // namespace

std::optional<int> parse_binary_annotation(const std::string& response) {
    std::string scan = response;
    // prefer an "Output:" line when present
    std::istringstream lines(response);
    std::string line;
    while (std::getline(lines, line)) {
        const auto l = lower(line);
        const auto pos = l.find("output:");
        if (pos != std::string::npos) {
            scan = line.substr(pos + 7);
            break;
        }
    }
    const auto w = first_word(scan);
    if (w == "yes") return 1;
    if (w == "no") return 0;
    return std::nullopt;
}

AnnotationCache::AnnotationCache(std::filesystem::path path) : path_(std::move(path)) {
    if (!std::filesystem::exists(path_)) return;
    std::ifstream in(path_, std::ios::binary);
    for (;;) {
        std::uint32_t len;
        try {
            len = io::read_u32(in);
        } catch (const ParseError&) {
            break;
        }
        std::string rec(len, '\0');
        if (!in.read(rec.data(), len)) {
            log::warn("annotation cache has a truncated trailing record; ignoring it");
            break;
        }
        try {
            const auto j = json::parse(rec);
            entries_.emplace(j.at("key").get<std::string>(), Entry{j.at("value").get<int>(), j.at("raw").get<std::string>()});
        } catch (const json::exception&) {
            log::warn("annotation cache has a corrupt record; skipping it");
        }
    }
}

std::string AnnotationCache::key_for(const std::string& model, const std::string& concept_text, const std::string& text) {
    std::string material = model;
    material.push_back('\0');
    material += concept_text;
    material.push_back('\0');
    material += text;
    return io::sha256_hex(material);
}

std::optional<AnnotationCache::Entry> AnnotationCache::find(const std::string& key) const {
    std::lock_guard lk(m_);
    auto it = entries_.find(key);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
}

void AnnotationCache::insert(const std::string& key, const Entry& entry) {
    std::lock_guard lk(m_);
    if (!entries_.emplace(key, entry).second) return;
    if (path_.empty()) return;
    if (path_.has_parent_path()) std::filesystem::create_directories(path_.parent_path());
    const std::string rec = json{{"key", key}, {"value", entry.value}, {"raw", entry.raw}}.dump();
    std::ofstream out(path_, std::ios::binary | std::ios::app);
    io::write_u32(out, static_cast<std::uint32_t>(rec.size()));
    out.write(rec.data(), static_cast<std::streamsize>(rec.size()));
    out.flush();
    if (!out) throw Error("failed to append to annotation cache " + path_.string());
}

std::size_t AnnotationCache::size() const {
    std::lock_guard lk(m_);
    return entries_.size();
}

Annotator::Annotator(std::shared_ptr<ChatClient> client, ChatConfig config, std::shared_ptr<AnnotationCache> cache)
    : client_(std::move(client)), config_(std::move(config)), cache_(std::move(cache)) {
    config_.validate();
    if (!cache_) cache_ = std::make_shared<AnnotationCache>();
}

Annotation Annotator::annotate(const std::string& concept_text, const std::string& text) {
    const auto key = AnnotationCache::key_for(client_->model_id(), concept_text, text);
    if (auto hit = cache_->find(key)) {
        const auto parsed = parse_binary_annotation(hit->raw);
        return {hit->value, parsed.has_value(), true};
    }
    ChatRequest req{{{"user", build_annotation_prompt(concept_text, text)}}, config_.temperature, config_.max_tokens};
    std::string raw = client_->complete(req);
    auto parsed = parse_binary_annotation(raw);
    if (!parsed) {
        raw = client_->complete(req);
        parsed = parse_binary_annotation(raw);
    }
    const int value = parsed.value_or(0);
    cache_->insert(key, {value, raw});
    return {value, parsed.has_value(), false};
}

std::vector<Annotation> Annotator::annotate_all(const std::vector<std::pair<std::string, std::string>>& pairs) {
    std::vector<Annotation> out(pairs.size());
    net::parallel_for(pairs.size(), config_.max_in_flight,
                      [&](std::size_t i) { out[i] = annotate(pairs[i].first, pairs[i].second); });
    return out;
}

// --- mock oracle --------------------------------------------------------------

namespace {

std::string regex_escape(const std::string& s) {
    static const std::string special = R"(\^$.|?*+()[]{})";
    std::string out;
    for (char c : s) {
        if (special.find(c) != std::string::npos) out.push_back('\\');
        out.push_back(c);
    }
    return out;
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

/// Text between `after` (last occurrence) and the next `until`.
std::optional<std::string> extract_last(const std::string& s, const std::string& after, const std::string& until) {
    const auto a = s.rfind(after);
    if (a == std::string::npos) return std::nullopt;
    const auto start = a + after.size();
    const auto e = s.find(until, start);
    return s.substr(start, e == std::string::npos ? std::string::npos : e - start);
}

std::vector<std::string> block_samples(const std::string& block) {
    std::vector<std::string> out;
    std::string body = trim(block);
    if (body.empty()) return out;
    if (body.rfind("- ", 0) == 0) body = body.substr(2);
    std::size_t pos = 0;
    for (;;) {
        const auto next = body.find("\n- ", pos);
        out.push_back(body.substr(pos, next == std::string::npos ? std::string::npos : next - pos));
        if (next == std::string::npos) break;
        pos = next + 3;
    }
    return out;
}

}  // namespace

std::vector<MockRule> parse_mock_rules(const std::string& json_text) {
    std::vector<MockRule> rules;
    try {
        const auto j = json::parse(json_text);
        const auto& arr = j.is_object() ? j.at("rules") : j;
        for (const auto& r : arr) {
            MockRule rule;
            rule.concept_text = r.at("concept").get<std::string>();
            rule.concept_regex = r.value("concept_pattern", regex_escape(rule.concept_text));
            rule.text_regex = r.at("text_pattern").get<std::string>();
            rules.push_back(std::move(rule));
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("mock rules: ") + e.what());
    }
    return rules;
}

std::vector<MockRule> load_mock_rules(const std::filesystem::path& path) { return parse_mock_rules(io::read_file(path)); }

MockOracle::MockOracle(std::vector<MockRule> rules, int default_value, std::string model)
    : default_value_(default_value), model_(std::move(model)) {
    for (auto& r : rules) {
        try {
            Compiled c{r, std::regex(r.concept_regex, std::regex::icase | std::regex::ECMAScript),
                       std::regex(r.text_regex, std::regex::icase | std::regex::ECMAScript)};
            rules_.push_back(std::move(c));
        } catch (const std::regex_error& e) {
            throw ValidationError("bad mock rule regex for concept '" + r.concept_text + "': " + e.what());
        }
    }
}

std::optional<std::size_t> MockOracle::rule_for(const std::string& concept_text) const {
    for (std::size_t i = 0; i < rules_.size(); ++i)
        if (std::regex_search(concept_text, rules_[i].concept_re)) return i;
    return std::nullopt;
}

int MockOracle::judge(const std::string& concept_text, const std::string& text) const {
    const auto r = rule_for(concept_text);
    if (!r) return default_value_;
    return std::regex_search(text, rules_[*r].text_re) ? 1 : 0;
}

std::string MockOracle::answer_annotation(const std::string& prompt) const {
    const auto concept_text = extract_last(prompt, "\nPROPERTY: ", "\nTEXT: ");
    const auto text = extract_last(prompt, "\nTEXT: ", "\nOutput:");
    if (!concept_text || !text) return "Unsure.";
    return judge(*concept_text, *text) ? "Yes. The text matches the property." : "No. The text does not match the property.";
}

std::string MockOracle::answer_interpretation(const std::string& prompt) const {
    const std::string dash = "\n----------------\n";
    auto block_after = [&](const std::string& header) -> std::string {
        const auto h = prompt.find(header);
        if (h == std::string::npos) return {};
        const auto open = prompt.find(dash, h);
        if (open == std::string::npos) return {};
        const auto start = open + dash.size();
        const auto close = prompt.find(dash, start);
        return prompt.substr(start, close == std::string::npos ? std::string::npos : close - start);
    };
    const auto pos = block_samples(block_after("POSITIVE SAMPLES:"));
    const auto neg = block_samples(block_after("NEGATIVE SAMPLES:"));
    if (rules_.empty()) return "- \"no identifiable feature\"";
    auto frac = [](const std::vector<std::string>& xs, const std::regex& re) {
        if (xs.empty()) return 0.0;
        std::size_t hits = 0;
        for (const auto& x : xs) hits += std::regex_search(x, re) ? 1 : 0;
        return static_cast<double>(hits) / static_cast<double>(xs.size());
    };
    std::size_t best = 0;
    double best_score = -2.0;
    for (std::size_t i = 0; i < rules_.size(); ++i) {
        const double score = frac(pos, rules_[i].text_re) - frac(neg, rules_[i].text_re);
        if (score > best_score) {
            best_score = score;
            best = i;
        }
    }
    return "- \"" + rules_[best].rule.concept_text + "\"";
}

std::string MockOracle::answer_similarity(const std::string& prompt) const {
    const auto a = extract_last(prompt, "\ntext_a: ", "\n");
    const auto b = extract_last(prompt, "\ntext_b: ", "\n");
    if (!a || !b) return "no";
    const auto ra = rule_for(trim(*a));
    const auto rb = rule_for(trim(*b));
    return ra && rb && *ra == *rb ? "yes" : "no";
}

std::string MockOracle::do_complete(const ChatRequest& request) {
    if (request.messages.empty()) return {};
    const auto& prompt = request.messages.back().content;
    if (prompt.find("Check whether the TEXT satisfies a PROPERTY") != std::string::npos) return answer_annotation(prompt);
    if (prompt.find("POSITIVE SAMPLES:") != std::string::npos) return answer_interpretation(prompt);
    if (prompt.find("similar in meaning?") != std::string::npos) return answer_similarity(prompt);
    return "No.";
}

}  // namespace hypsae::llm
