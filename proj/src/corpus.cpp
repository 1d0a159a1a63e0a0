#include "hypsae/corpus.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include "hypsae/io.hpp"
#include "hypsae/log.hpp"

namespace hypsae::corpus {

using json = nlohmann::json;

void Corpus::validate() const {
    std::set<std::string> seen;
    for (const auto& it : items) {
        if (!seen.insert(it.id).second) throw ValidationError("duplicate id: " + it.id);
        if (!std::isfinite(it.label)) throw ValidationError("non-finite label for id " + it.id);
        if (is_classification(task_kind) && it.label != 0.0 && it.label != 1.0) {
            throw ValidationError("classification label not in {0,1} for id " + it.id);
        }
    }
    if (task_kind == TaskKind::paired_classification) {
        std::map<std::string, int> counts;
        for (const auto& it : items) {
            if (!it.pair_id) throw ValidationError("paired corpus item without pair_id: " + it.id);
            ++counts[*it.pair_id];
        }
        for (const auto& [pid, c] : counts) {
            if (c != 2) throw ValidationError("pair_id " + pid + " occurs " + std::to_string(c) + " times");
        }
    }
}

Corpus parse_dataset(std::istream& in) {
    Corpus c;
    std::string line;
    std::size_t line_no = 0;
    bool any_pair = false;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (std::all_of(line.begin(), line.end(), [](unsigned char ch) { return std::isspace(ch); })) continue;
        json obj;
        try {
            obj = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!obj.is_object() || !obj.contains("text") || !obj["text"].is_string() || !obj.contains("label") ||
            !obj["label"].is_number()) {
            throw ParseError("line " + std::to_string(line_no) + ": expected object with string text and numeric label");
        }
        Item it;
        it.text = obj["text"].get<std::string>();
        it.label = obj["label"].get<double>();
        if (obj.contains("id")) {
            const auto& id = obj["id"];
            it.id = id.is_string() ? id.get<std::string>() : id.dump();
        } else {
            it.id = std::to_string(c.items.size());
        }
        if (obj.contains("pair_id") && !obj["pair_id"].is_null()) {
            const auto& p = obj["pair_id"];
            it.pair_id = p.is_string() ? p.get<std::string>() : p.dump();
            any_pair = true;
        }
        c.items.push_back(std::move(it));
    }
    const bool binary = std::all_of(c.items.begin(), c.items.end(),
                                    [](const Item& it) { return it.label == 0.0 || it.label == 1.0; });
    if (any_pair) {
        c.task_kind = TaskKind::paired_classification;
    } else if (binary && !c.items.empty()) {
        c.task_kind = TaskKind::classification;
    } else {
        c.task_kind = TaskKind::regression;
    }
    c.validate();
    return c;
}

Corpus load_dataset(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open dataset " + path.string());
    return parse_dataset(in);
}

std::string to_string(Split s) {
    switch (s) {
        case Split::train: return "train";
        case Split::validation: return "validation";
        case Split::heldout: return "heldout";
    }
    return "?";
}

Split split_from_string(const std::string& s) {
    if (s == "train") return Split::train;
    if (s == "validation") return Split::validation;
    if (s == "heldout") return Split::heldout;
    throw ParseError("unknown split: " + s);
}

Split SplitAssignment::of(const std::string& id) const {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw ValidationError("id not in split assignment: " + id);
    return it->second;
}

std::vector<std::size_t> SplitAssignment::rows(const Corpus& corpus, Split split) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < corpus.items.size(); ++i) {
        if (of(corpus.items[i].id) == split) out.push_back(i);
    }
    return out;
}

std::size_t SplitAssignment::count(Split split) const {
    return static_cast<std::size_t>(
        std::count_if(by_id.begin(), by_id.end(), [&](const auto& kv) { return kv.second == split; }));
}

std::string SplitAssignment::to_json() const {
    json j;
    j["seed"] = seed;
    json a = json::object();
    for (const auto& [id, s] : by_id) a[id] = to_string(s);
    j["assignments"] = std::move(a);
    return j.dump(1);
}

SplitAssignment SplitAssignment::from_json(const std::string& text) {
    SplitAssignment sa;
    try {
        auto j = json::parse(text);
        sa.seed = j.at("seed").get<std::uint64_t>();
        for (const auto& [id, s] : j.at("assignments").items()) sa.by_id[id] = split_from_string(s.get<std::string>());
    } catch (const json::exception& e) {
        throw ParseError(std::string("split file: ") + e.what());
    }
    return sa;
}

SplitAssignment make_splits(const Corpus& corpus, const SplitFractions& f, std::uint64_t seed) {
    if (corpus.size() < 3) throw ValidationError("corpus needs at least 3 items to split");
    if (f.train <= 0 || f.validation <= 0 || f.heldout <= 0) throw ValidationError("split fractions must be positive");
    if (std::abs(f.train + f.validation + f.heldout - 1.0) > 1e-9) throw ValidationError("split fractions must sum to 1");

    // groups in first-appearance order; shuffled below
    std::vector<std::vector<std::size_t>> groups;
    std::map<std::string, std::size_t> group_of_pair;
    for (std::size_t i = 0; i < corpus.items.size(); ++i) {
        const auto& pid = corpus.items[i].pair_id;
        if (pid) {
            auto [it, inserted] = group_of_pair.emplace(*pid, groups.size());
            if (inserted) groups.emplace_back();
            groups[it->second].push_back(i);
        } else {
            groups.push_back({i});
        }
    }
    Rng rng(seed);
    rng.shuffle(groups);

    const auto n = static_cast<double>(corpus.size());
    const auto n_train = static_cast<std::size_t>(std::llround(f.train * n));
    const auto n_val = static_cast<std::size_t>(std::llround(f.validation * n));

    SplitAssignment sa;
    sa.seed = seed;
    std::size_t filled = 0;
    for (const auto& g : groups) {
        const Split s = filled < n_train ? Split::train : (filled < n_train + n_val ? Split::validation : Split::heldout);
        for (auto row : g) sa.by_id[corpus.items[row].id] = s;
        filled += g.size();
    }
    return sa;
}

EmbeddingMatrix EmbeddingMatrix::subset(std::span<const std::size_t> rows) const {
    EmbeddingMatrix m;
    m.dim = dim;
    m.n_rows = rows.size();
    m.data.reserve(rows.size() * dim);
    for (auto r : rows) {
        if (r >= n_rows) throw ValidationError("row index out of range");
        auto src = row(r);
        m.data.insert(m.data.end(), src.begin(), src.end());
        m.row_ids.push_back(row_ids.at(r));
    }
    return m;
}

Eigen::MatrixXd EmbeddingMatrix::to_eigen() const {
    Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> m(
        data.data(), static_cast<Eigen::Index>(n_rows), static_cast<Eigen::Index>(dim));
    return m.cast<double>();
}

void EmbeddingMatrix::validate() const {
    if (data.size() != n_rows * dim) throw ValidationError("embedding data length != n_rows * dim");
    if (row_ids.size() != n_rows) throw ValidationError("embedding row_ids length != n_rows");
    for (float v : data) {
        if (!std::isfinite(v)) throw ValidationError("non-finite embedding value");
    }
}

// --- backends --------------------------------------------------------------

HttpEmbeddingBackend::HttpEmbeddingBackend(EmbeddingConfig config, std::shared_ptr<net::Transport> transport,
                                           net::Sleeper sleeper)
    : config_(std::move(config)), transport_(std::move(transport)), sleeper_(std::move(sleeper)),
      api_key_(net::api_key_from_env()) {}

std::vector<std::vector<float>> HttpEmbeddingBackend::embed_batch(const std::vector<std::string>& texts) {
    json body = {{"model", config_.model}, {"input", texts}};
    const auto outcome = net::post_with_retries(*transport_, "/embeddings", body.dump(),
                                                {{"Authorization", "Bearer " + api_key_}}, config_.retry, sleeper_);
    if (!outcome.ok()) {
        std::ostringstream msg;
        msg << "embedding request failed; statuses:";
        for (int s : outcome.status_history) msg << ' ' << s;
        throw TransportError(msg.str());
    }
    std::vector<std::vector<float>> out(texts.size());
    try {
        auto j = json::parse(outcome.response.body);
        for (const auto& d : j.at("data")) {
            const auto idx = d.contains("index") ? d["index"].get<std::size_t>() : 0;
            if (idx >= out.size()) throw ParseError("embedding response index out of range");
            out[idx] = d.at("embedding").get<std::vector<float>>();
        }
    } catch (const json::exception& e) {
        throw ParseError(std::string("embedding response: ") + e.what());
    }
    for (const auto& v : out) {
        if (v.empty()) throw ParseError("embedding response missing an entry");
    }
    return out;
}

std::vector<std::string> tokenize_words(const std::string& text) {
    std::vector<std::string> words;
    std::string cur;
    for (unsigned char ch : text) {
        if (std::isalnum(ch)) {
            cur.push_back(static_cast<char>(std::tolower(ch)));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

std::string HashingEmbeddingBackend::model_id() const {
    return "hashing-bow-d" + std::to_string(dim_) + "-s" + std::to_string(seed_);
}

std::vector<float> HashingEmbeddingBackend::embed(const std::string& text) const {
    std::vector<double> acc(dim_, 0.0);
    for (const auto& w : tokenize_words(text)) {
        const auto digest = io::sha256(w);
        std::uint64_t h = 0;
        std::memcpy(&h, digest.data(), sizeof(h));
        Rng rng(h ^ seed_);
        for (auto& a : acc) a += rng.normal();
    }
    double norm = 0.0;
    for (double a : acc) norm += a * a;
    norm = std::sqrt(norm);
    std::vector<float> out(dim_, 0.0f);
    if (norm > 0) {
        for (std::size_t i = 0; i < dim_; ++i) out[i] = static_cast<float>(acc[i] / norm);
    }
    return out;
}

std::vector<std::vector<float>> HashingEmbeddingBackend::embed_batch(const std::vector<std::string>& texts) {
    std::vector<std::vector<float>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(embed(t));
    return out;
}

std::unique_ptr<EmbeddingBackend> make_embedding_backend(const EmbeddingConfig& config) {
    if (config.provider == "hashing") {
        return std::make_unique<HashingEmbeddingBackend>(config.hashing_dim, config.hashing_seed);
    }
    if (config.provider == "openai") {
        return std::make_unique<HttpEmbeddingBackend>(config, net::make_http_transport(config.base_url));
    }
    throw ValidationError("unknown embedding provider: " + config.provider);
}

// --- cache -----------------------------------------------------------------

std::size_t EmbeddingCache::KeyHash::operator()(const Key& k) const noexcept {
    std::size_t h;
    std::memcpy(&h, k.data(), sizeof(h));
    return h;
}

EmbeddingCache::Key EmbeddingCache::key_for(const std::string& model_id, const std::string& text) {
    std::string material = model_id;
    material.push_back('\0');
    material += text;
    return io::sha256(material);
}

EmbeddingCache EmbeddingCache::load(const std::filesystem::path& path) {
    EmbeddingCache cache;
    if (!std::filesystem::exists(path)) return cache;
    std::ifstream in(path, std::ios::binary);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "EMB1", 4) != 0) {
        throw ParseError("embedding cache has bad magic: " + path.string());
    }
    const auto count = io::read_u32(in);
    cache.dim_ = io::read_u32(in);
    for (std::uint32_t i = 0; i < count; ++i) {
        Key key;
        if (!in.read(reinterpret_cast<char*>(key.data()), 32)) throw ParseError("truncated embedding cache");
        std::vector<float> v(cache.dim_);
        for (auto& x : v) x = io::read_f32(in);
        cache.entries_.emplace(key, std::move(v));
    }
    return cache;
}

void EmbeddingCache::save(const std::filesystem::path& path) const {
    std::vector<const Key*> keys;
    keys.reserve(entries_.size());
    for (const auto& [k, v] : entries_) keys.push_back(&k);
    std::sort(keys.begin(), keys.end(), [](const Key* a, const Key* b) { return *a < *b; });
    std::ostringstream os(std::ios::binary);
    os.write("EMB1", 4);
    io::write_u32(os, static_cast<std::uint32_t>(entries_.size()));
    io::write_u32(os, static_cast<std::uint32_t>(dim_));
    for (const Key* k : keys) {
        os.write(reinterpret_cast<const char*>(k->data()), 32);
        for (float x : entries_.at(*k)) io::write_f32(os, x);
    }
    io::write_file_atomic(path, os.str());
}

const std::vector<float>* EmbeddingCache::find(const Key& key) const {
    auto it = entries_.find(key);
    return it == entries_.end() ? nullptr : &it->second;
}

void EmbeddingCache::insert(const Key& key, std::vector<float> values) {
    if (dim_ == 0 && entries_.empty()) dim_ = values.size();
    if (values.size() != dim_) {
        throw ValidationError("embedding dimension " + std::to_string(values.size()) +
                              " does not match cache dimension " + std::to_string(dim_));
    }
    entries_.insert_or_assign(key, std::move(values));
}

EmbeddingMatrix embed_corpus(const Corpus& corpus, EmbeddingBackend& backend, const EmbeddingConfig& config,
                             const std::filesystem::path& cache_path, EmbedStats* stats) {
    EmbedStats local;
    auto cache = EmbeddingCache::load(cache_path);
    const auto model = backend.model_id();

    std::vector<std::string> sent(corpus.size());
    std::vector<EmbeddingCache::Key> keys(corpus.size());
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        sent[i] = corpus.items[i].text;
        if (sent[i].size() > config.max_text_chars) {
            log::warn("truncating text " + corpus.items[i].id + " to " + std::to_string(config.max_text_chars) +
                      " bytes");
            sent[i].resize(config.max_text_chars);
            ++local.truncated;
        }
        keys[i] = EmbeddingCache::key_for(model, sent[i]);
    }

    // unique uncached texts, first-appearance order
    std::vector<std::size_t> todo;
    std::set<EmbeddingCache::Key> queued;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        if (cache.find(keys[i]) != nullptr) {
            ++local.cache_hits;
        } else if (queued.insert(keys[i]).second) {
            todo.push_back(i);
        }
    }

    if (!todo.empty()) {
        const std::size_t bs = std::max<std::size_t>(1, config.batch_size);
        const std::size_t n_batches = (todo.size() + bs - 1) / bs;
        std::mutex m;
        std::vector<std::string> failed_ids;
        std::string first_error;
        net::parallel_for(n_batches, config.max_in_flight, [&](std::size_t b) {
            std::vector<std::string> texts;
            std::vector<std::size_t> rows;
            for (std::size_t j = b * bs; j < std::min(todo.size(), (b + 1) * bs); ++j) {
                rows.push_back(todo[j]);
                texts.push_back(sent[todo[j]]);
            }
            std::vector<std::vector<float>> vecs;
            try {
                vecs = backend.embed_batch(texts);
                if (vecs.size() != texts.size()) throw ParseError("embedding backend returned wrong row count");
            } catch (const Error& e) {
                std::lock_guard lk(m);
                ++local.requests;
                if (first_error.empty()) first_error = e.what();
                for (auto r : rows) failed_ids.push_back(corpus.items[r].id);
                return;
            }
            std::lock_guard lk(m);
            ++local.requests;
            for (std::size_t j = 0; j < rows.size(); ++j) cache.insert(keys[rows[j]], std::move(vecs[j]));
        });
        // keep whatever succeeded
        cache.save(cache_path);
        if (!failed_ids.empty()) {
            std::sort(failed_ids.begin(), failed_ids.end());
            std::string msg = "embedding failed for ids:";
            for (const auto& id : failed_ids) msg += " " + id;
            throw TransportError(msg + " (" + first_error + ")");
        }
    }

    EmbeddingMatrix out;
    out.n_rows = corpus.size();
    out.dim = cache.dim();
    out.data.reserve(out.n_rows * out.dim);
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto* v = cache.find(keys[i]);
        out.data.insert(out.data.end(), v->begin(), v->end());
        out.row_ids.push_back(corpus.items[i].id);
    }
    out.validate();
    if (stats) *stats = local;
    return out;
}

Eigen::MatrixXd pair_difference(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw ValidationError("pair_difference shape mismatch");
    }
    return a - b;
}

PairRows pair_rows(const Corpus& corpus, std::span<const std::size_t> rows) {
    PairRows out;
    std::map<std::string, std::size_t> slot;
    for (auto r : rows) {
        const auto& pid = corpus.items.at(r).pair_id;
        if (!pid) throw ValidationError("item without pair_id in paired design: " + corpus.items[r].id);
        auto it = slot.find(*pid);
        if (it == slot.end()) {
            slot.emplace(*pid, out.first.size());
            out.first.push_back(r);
            out.second.push_back(SIZE_MAX);
        } else {
            if (out.second[it->second] != SIZE_MAX) throw ValidationError("pair_id occurs more than twice: " + *pid);
            out.second[it->second] = r;
        }
    }
    for (std::size_t i = 0; i < out.second.size(); ++i) {
        if (out.second[i] == SIZE_MAX) {
            throw ValidationError("unmatched pair member: " + corpus.items[out.first[i]].id);
        }
    }
    return out;
}

}  // namespace hypsae::corpus
