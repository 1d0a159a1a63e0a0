#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <istream>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "hypsae/common.hpp"
#include "hypsae/net.hpp"

namespace hypsae::corpus {

struct Item {
    std::string id;
    std::string text;
    double label = 0.0;
    std::optional<std::string> pair_id;
};

struct Corpus {
    std::vector<Item> items;
    TaskKind task_kind = TaskKind::regression;

    std::size_t size() const { return items.size(); }
    /// Checks id uniqueness, label domain and pair cardinality.
    void validate() const;
};

/// Parses JSON-lines. Missing ids become "0", "1", ... by line order.
Corpus parse_dataset(std::istream& in);
Corpus load_dataset(const std::filesystem::path& path);

enum class Split { train, validation, heldout };
std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct SplitFractions {
    double train = 0.8;
    double validation = 0.1;
    double heldout = 0.1;
};

struct SplitAssignment {
    std::map<std::string, Split> by_id;
    std::uint64_t seed = 0;

    Split of(const std::string& id) const;
    /// Row indices of `corpus` in `split`, in corpus order.
    std::vector<std::size_t> rows(const Corpus& corpus, Split split) const;
    std::size_t count(Split split) const;

    std::string to_json() const;
    static SplitAssignment from_json(const std::string& json);
};

/// Pair-respecting seeded split. Items without a pair id are their own group.
SplitAssignment make_splits(const Corpus& corpus, const SplitFractions& fractions, std::uint64_t seed);

/// Row-major float32 embeddings with one id per row.
struct EmbeddingMatrix {
    std::size_t n_rows = 0;
    std::size_t dim = 0;
    std::vector<float> data;
    std::vector<std::string> row_ids;

    std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
    /// Copy of the selected rows, in the given order.
    EmbeddingMatrix subset(std::span<const std::size_t> rows) const;
    Eigen::MatrixXd to_eigen() const;
    void validate() const;
};

// --- embedding providers -------------------------------------------------

class EmbeddingBackend {
public:
    virtual ~EmbeddingBackend() = default;
    virtual std::string model_id() const = 0;
    /// One vector per input text, same order.
    virtual std::vector<std::vector<float>> embed_batch(const std::vector<std::string>& texts) = 0;
};

struct EmbeddingConfig {
    std::string provider = "openai";  // "openai" or "hashing"
    std::string base_url = "https://api.openai.com/v1";
    std::string model = "text-embedding-3-small";
    std::size_t batch_size = 256;
    std::size_t max_text_chars = 32000;
    int max_in_flight = 8;
    net::RetryPolicy retry{};
    std::size_t hashing_dim = 64;  // only for the hashing provider
    std::uint64_t hashing_seed = 0;
};

/// OpenAI-embeddings-compatible HTTP backend.
class HttpEmbeddingBackend final : public EmbeddingBackend {
public:
    HttpEmbeddingBackend(EmbeddingConfig config, std::shared_ptr<net::Transport> transport,
                         net::Sleeper sleeper = net::real_sleeper());
    std::string model_id() const override { return config_.model; }
    std::vector<std::vector<float>> embed_batch(const std::vector<std::string>& texts) override;

private:
    EmbeddingConfig config_;
    std::shared_ptr<net::Transport> transport_;
    net::Sleeper sleeper_;
    std::string api_key_;
};

/// Offline deterministic embedder: lower-cased alphanumeric tokens are each
/// mapped to a seeded Gaussian direction, summed, then L2-normalized.
class HashingEmbeddingBackend final : public EmbeddingBackend {
public:
    HashingEmbeddingBackend(std::size_t dim, std::uint64_t seed) : dim_(dim), seed_(seed) {}
    std::string model_id() const override;
    std::vector<std::vector<float>> embed_batch(const std::vector<std::string>& texts) override;
    std::vector<float> embed(const std::string& text) const;

private:
    std::size_t dim_;
    std::uint64_t seed_;
};

std::unique_ptr<EmbeddingBackend> make_embedding_backend(const EmbeddingConfig& config);

/// Lower-cased runs of ASCII alphanumerics.
std::vector<std::string> tokenize_words(const std::string& text);

// --- cache ---------------------------------------------------------------

/// On-disk embedding cache ("EMB1" format) keyed by SHA-256(model id, text).
class EmbeddingCache {
public:
    using Key = std::array<std::uint8_t, 32>;

    static Key key_for(const std::string& model_id, const std::string& text);

    static EmbeddingCache load(const std::filesystem::path& path);  // empty if absent
    void save(const std::filesystem::path& path) const;

    const std::vector<float>* find(const Key& key) const;
    void insert(const Key& key, std::vector<float> values);
    std::size_t size() const { return entries_.size(); }
    std::size_t dim() const { return dim_; }

private:
    struct KeyHash {
        std::size_t operator()(const Key& k) const noexcept;
    };
    std::unordered_map<Key, std::vector<float>, KeyHash> entries_;
    std::size_t dim_ = 0;
};

struct EmbedStats {
    std::size_t requests = 0;
    std::size_t cache_hits = 0;
    std::size_t truncated = 0;
};

/// Embeds every corpus item (row order = corpus order), filling the cache.
EmbeddingMatrix embed_corpus(const Corpus& corpus, EmbeddingBackend& backend, const EmbeddingConfig& config,
                             const std::filesystem::path& cache_path, EmbedStats* stats = nullptr);

/// Elementwise A - B.
Eigen::MatrixXd pair_difference(const Eigen::MatrixXd& acts_a, const Eigen::MatrixXd& acts_b);

/// Rows of a paired corpus grouped by pair id: (row of first member,
/// row of second member), ordered by first appearance.
struct PairRows {
    std::vector<std::size_t> first;
    std::vector<std::size_t> second;
};
PairRows pair_rows(const Corpus& corpus, std::span<const std::size_t> rows);

}  // namespace hypsae::corpus
