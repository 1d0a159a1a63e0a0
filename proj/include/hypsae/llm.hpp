#pragma once

#include <atomic>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <unordered_map>
#include <vector>

#include "hypsae/net.hpp"

namespace hypsae::llm {

struct ChatConfig {
    std::string base_url = "https://api.openai.com/v1";
    std::string model = "gpt-4o";
    double temperature = 0.7;
    int max_tokens = 256;
    int max_retries = 5;
    double backoff_base_seconds = 1.0;
    int max_in_flight = 8;

    void validate() const;
    static ChatConfig generation_defaults();
    static ChatConfig annotation_defaults();
};

struct Message {
    std::string role;
    std::string content;
};

struct ChatRequest {
    std::vector<Message> messages;
    double temperature = 0.0;
    int max_tokens = 256;
};

/// Process-wide bound on concurrent chat requests.
net::InFlightLimiter& global_limiter();
void set_global_in_flight_limit(int limit);

/// A chat-completion endpoint. `complete` applies the global in-flight
/// bound and counts requests; subclasses implement `do_complete`.
class ChatClient {
public:
    virtual ~ChatClient() = default;
    std::string complete(const ChatRequest& request);
    virtual std::string model_id() const = 0;
    std::size_t request_count() const { return requests_.load(); }

protected:
    virtual std::string do_complete(const ChatRequest& request) = 0;

private:
    std::atomic<std::size_t> requests_{0};
};

/// OpenAI-chat-completions-compatible HTTP client with retry on 429/5xx.
class HttpChatClient final : public ChatClient {
public:
    HttpChatClient(ChatConfig config, std::shared_ptr<net::Transport> transport,
                   net::Sleeper sleeper = net::real_sleeper());
    std::string model_id() const override { return config_.model; }
    int last_backoffs() const { return last_backoffs_.load(); }

protected:
    std::string do_complete(const ChatRequest& request) override;

private:
    ChatConfig config_;
    std::shared_ptr<net::Transport> transport_;
    net::Sleeper sleeper_;
    std::string api_key_;
    std::atomic<int> last_backoffs_{0};
};

/// Returns canned responses in order, cycling.
class CannedChatClient final : public ChatClient {
public:
    explicit CannedChatClient(std::vector<std::string> responses, std::string model = "canned")
        : responses_(std::move(responses)), model_(std::move(model)) {}
    std::string model_id() const override { return model_; }

protected:
    std::string do_complete(const ChatRequest& request) override;

private:
    std::vector<std::string> responses_;
    std::string model_;
    std::mutex m_;
    std::size_t next_ = 0;
};

// --- annotation ---------------------------------------------------------------

std::string build_annotation_prompt(const std::string& concept_text, const std::string& text);

/// 1 for yes, 0 for no, nullopt when the response matches neither.
std::optional<int> parse_binary_annotation(const std::string& response);

/// Append-only log of u32-length-prefixed JSON records {key, value, raw}.
class AnnotationCache {
public:
    struct Entry {
        int value = 0;
        std::string raw;
    };

    AnnotationCache() = default;  // in-memory only
    explicit AnnotationCache(std::filesystem::path path);

    static std::string key_for(const std::string& model, const std::string& concept_text, const std::string& text);
    std::optional<Entry> find(const std::string& key) const;
    /// First write wins; later writes for the same key are ignored.
    void insert(const std::string& key, const Entry& entry);
    std::size_t size() const;

private:
    std::filesystem::path path_;
    mutable std::mutex m_;
    std::unordered_map<std::string, Entry> entries_;
};

struct Annotation {
    int value = 0;
    bool parsed = true;
    bool from_cache = false;
};

/// Concept-presence annotator: prompt, parse, one retry on an unparseable
/// reply, cache. Unparseable replies count as 0.
class Annotator {
public:
    Annotator(std::shared_ptr<ChatClient> client, ChatConfig config, std::shared_ptr<AnnotationCache> cache = nullptr);

    Annotation annotate(const std::string& concept_text, const std::string& text);
    /// Annotates every (concept_text, text) pair using up to max_in_flight workers.
    std::vector<Annotation> annotate_all(const std::vector<std::pair<std::string, std::string>>& pairs);

    const ChatClient& client() const { return *client_; }

private:
    std::shared_ptr<ChatClient> client_;
    ChatConfig config_;
    std::shared_ptr<AnnotationCache> cache_;
};

// --- mock oracle --------------------------------------------------------------

struct MockRule {
    std::string concept_text;       // canonical concept string produced in generator mode
    std::string concept_regex; // matched (case-insensitive search) against requested concepts
    std::string text_regex;    // predicate on texts (case-insensitive search)
};

std::vector<MockRule> parse_mock_rules(const std::string& json_text);
std::vector<MockRule> load_mock_rules(const std::filesystem::path& path);

/// Deterministic offline endpoint answering annotation, interpretation and
/// surface-similarity prompts from keyword/regex rules.
class MockOracle final : public ChatClient {
public:
    explicit MockOracle(std::vector<MockRule> rules, int default_value = 0, std::string model = "mock-oracle");
    std::string model_id() const override { return model_; }

    /// Index of the first rule whose concept regex matches, if any.
    std::optional<std::size_t> rule_for(const std::string& concept_text) const;
    int judge(const std::string& concept_text, const std::string& text) const;

protected:
    std::string do_complete(const ChatRequest& request) override;

private:
    struct Compiled {
        MockRule rule;
        std::regex concept_re;
        std::regex text_re;
    };
    std::vector<Compiled> rules_;
    int default_value_;
    std::string model_;

    std::string answer_annotation(const std::string& prompt) const;
    std::string answer_interpretation(const std::string& prompt) const;
    std::string answer_similarity(const std::string& prompt) const;
};

}  // namespace hypsae::llm
