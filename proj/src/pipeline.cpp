#include "hypsae/pipeline.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <map>
#include <sstream>

#include "hypsae/io.hpp"
#include "hypsae/log.hpp"

namespace hypsae::pipeline {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Seed tags; each stage draws from its own stream.
constexpr std::uint64_t kSplitTag = 100;
constexpr std::uint64_t kSaeTag = 300;
constexpr std::uint64_t kInterpretTag = 500;
constexpr std::uint64_t kDiagnosticTag = 600;

json embedding_json(const corpus::EmbeddingConfig& e) {
    return {{"provider", e.provider},
            {"base_url", e.base_url},
            {"model", e.model},
            {"batch_size", e.batch_size},
            {"max_text_chars", e.max_text_chars},
            {"max_in_flight", e.max_in_flight},
            {"max_retries", e.retry.max_retries},
            {"backoff_base_seconds", e.retry.backoff_base_seconds},
            {"hashing_dim", e.hashing_dim},
            {"hashing_seed", e.hashing_seed}};
}

corpus::EmbeddingConfig embedding_from(const json& j) {
    corpus::EmbeddingConfig e;
    e.provider = j.value("provider", e.provider);
    e.base_url = j.value("base_url", e.base_url);
    e.model = j.value("model", e.model);
    e.batch_size = j.value("batch_size", e.batch_size);
    e.max_text_chars = j.value("max_text_chars", e.max_text_chars);
    e.max_in_flight = j.value("max_in_flight", e.max_in_flight);
    e.retry.max_retries = j.value("max_retries", e.retry.max_retries);
    e.retry.backoff_base_seconds = j.value("backoff_base_seconds", e.retry.backoff_base_seconds);
    e.hashing_dim = j.value("hashing_dim", e.hashing_dim);
    e.hashing_seed = j.value("hashing_seed", e.hashing_seed);
    return e;
}

json chat_json(const llm::ChatConfig& c) {
    return {{"base_url", c.base_url},
            {"model", c.model},
            {"temperature", c.temperature},
            {"max_tokens", c.max_tokens},
            {"max_retries", c.max_retries},
            {"backoff_base_seconds", c.backoff_base_seconds},
            {"max_in_flight", c.max_in_flight}};
}

llm::ChatConfig chat_from(const json& j, llm::ChatConfig c) {
    c.base_url = j.value("base_url", c.base_url);
    c.model = j.value("model", c.model);
    c.temperature = j.value("temperature", c.temperature);
    c.max_tokens = j.value("max_tokens", c.max_tokens);
    c.max_retries = j.value("max_retries", c.max_retries);
    c.backoff_base_seconds = j.value("backoff_base_seconds", c.backoff_base_seconds);
    c.max_in_flight = j.value("max_in_flight", c.max_in_flight);
    return c;
}

json selection_json(const select::SelectionConfig& s) {
    json j = {{"H", s.H},
              {"lambda_eps", s.lambda_eps},
              {"max_bisect_iters", s.max_bisect_iters},
              {"tolerance", s.tolerance},
              {"max_iterations", s.max_iterations},
              {"standardize", s.standardize}};
    if (s.lambda_lo) j["lambda_lo"] = *s.lambda_lo;
    if (s.lambda_hi) j["lambda_hi"] = *s.lambda_hi;
    return j;
}

select::SelectionConfig selection_from(const json& j) {
    select::SelectionConfig s;
    s.H = j.value("H", s.H);
    s.lambda_eps = j.value("lambda_eps", s.lambda_eps);
    s.max_bisect_iters = j.value("max_bisect_iters", s.max_bisect_iters);
    s.tolerance = j.value("tolerance", s.tolerance);
    s.max_iterations = j.value("max_iterations", s.max_iterations);
    s.standardize = j.value("standardize", s.standardize);
    if (j.contains("lambda_lo")) s.lambda_lo = j["lambda_lo"].get<double>();
    if (j.contains("lambda_hi")) s.lambda_hi = j["lambda_hi"].get<double>();
    return s;
}

std::string hash_parts(std::initializer_list<std::string> parts) {
    std::string all;
    for (const auto& p : parts) {
        all += p;
        all += '\x1f';
    }
    return io::sha256_hex(all).substr(0, 16);
}

fs::path resolve(const fs::path& p, const fs::path& base) {
    if (p.empty() || p.is_absolute() || base.empty()) return p;
    return base / p;
}

}  // namespace

// --- config -------------------------------------------------------------------

void RunConfig::validate() const {
    if (dataset.empty()) throw ValidationError("config: dataset path is required");
    if (saes.empty()) throw ValidationError("config: at least one SAE block is required");
    long total_latents = 0;
    for (const auto& s : saes) {
        s.validate();
        total_latents += s.M;
    }
    if (selection.H < 1) throw ValidationError("config: H must be at least 1");
    if (selection.H > total_latents) {
        throw ValidationError("config: H = " + std::to_string(selection.H) + " exceeds the " +
                              std::to_string(total_latents) + " available SAE latents");
    }
    auto sel = selection;
    sel.task_kind = task_kind.value_or(TaskKind::regression);
    sel.validate();
    interpretation.check();
    generation.validate();
    annotation.validate();
    if (embedding.provider != "openai" && embedding.provider != "hashing")
        throw ValidationError("config: embedding provider must be 'openai' or 'hashing'");
    if (!(evaluation.alpha > 0 && evaluation.alpha < 1)) throw ValidationError("config: alpha must lie in (0, 1)");
    if (evaluation.h_total && *evaluation.h_total < 1) throw ValidationError("config: h_total must be positive");
    if (evaluation.surface_samples < 1) throw ValidationError("config: surface_samples must be positive");
    const double fsum = splits.train + splits.validation + splits.heldout;
    if (splits.train <= 0 || splits.validation <= 0 || splits.heldout <= 0 || std::abs(fsum - 1.0) > 1e-9)
        throw ValidationError("config: split fractions must be positive and sum to 1");
}

std::string RunConfig::to_json() const {
    json saes_j = json::array();
    for (const auto& s : saes) saes_j.push_back(json::parse(s.to_json()));
    json j = {{"dataset", dataset.string()},
              {"output_dir", output_dir.string()},
              {"seed", seed},
              {"splits", {{"train", splits.train}, {"validation", splits.validation}, {"heldout", splits.heldout}}},
              {"embedding", embedding_json(embedding)},
              {"sae", saes_j},
              {"selection", selection_json(selection)},
              {"interpretation", json::parse(interpretation.to_json())},
              {"generation", chat_json(generation)},
              {"annotation", chat_json(annotation)},
              {"evaluation",
               {{"alpha", evaluation.alpha},
                {"reference_concepts", evaluation.reference_concepts},
                {"surface_samples", evaluation.surface_samples},
                {"recovery_f1", evaluation.recovery_f1},
                {"stage_diagnostic", evaluation.stage_diagnostic}}}};
    if (split_seed) j["splits"]["seed"] = *split_seed;
    if (task_kind) j["selection"]["task_kind"] = to_string(*task_kind);
    if (evaluation.h_total) j["evaluation"]["h_total"] = *evaluation.h_total;
    if (mock_llm) j["mock_llm"] = mock_llm->string();
    return j.dump(2);
}

RunConfig RunConfig::from_json(const std::string& text, const fs::path& base_dir) {
    RunConfig c;
    try {
        const auto j = json::parse(text);
        c.dataset = resolve(j.at("dataset").get<std::string>(), base_dir);
        if (j.contains("output_dir")) c.output_dir = resolve(j["output_dir"].get<std::string>(), base_dir);
        c.seed = j.value("seed", c.seed);
        if (j.contains("splits")) {
            const auto& s = j["splits"];
            c.splits.train = s.value("train", c.splits.train);
            c.splits.validation = s.value("validation", c.splits.validation);
            c.splits.heldout = s.value("heldout", c.splits.heldout);
            if (s.contains("seed")) c.split_seed = s["seed"].get<std::uint64_t>();
        }
        if (j.contains("embedding")) c.embedding = embedding_from(j["embedding"]);
        if (j.contains("sae")) {
            const auto& s = j["sae"];
            c.saes.clear();
            if (s.is_array()) {
                for (const auto& b : s) c.saes.push_back(sae::SaeConfig::from_json(b.dump()));
            } else {
                c.saes.push_back(sae::SaeConfig::from_json(s.dump()));
            }
        }
        if (j.contains("selection")) {
            c.selection = selection_from(j["selection"]);
            if (j["selection"].contains("task_kind"))
                c.task_kind = task_kind_from_string(j["selection"]["task_kind"].get<std::string>());
        }
        if (j.contains("interpretation")) c.interpretation = interpret::InterpretConfig::from_json(j["interpretation"].dump());
        if (j.contains("generation")) c.generation = chat_from(j["generation"], c.generation);
        if (j.contains("annotation")) c.annotation = chat_from(j["annotation"], c.annotation);
        if (j.contains("evaluation")) {
            const auto& e = j["evaluation"];
            c.evaluation.alpha = e.value("alpha", c.evaluation.alpha);
            if (e.contains("h_total")) c.evaluation.h_total = e["h_total"].get<std::size_t>();
            c.evaluation.reference_concepts = e.value("reference_concepts", c.evaluation.reference_concepts);
            c.evaluation.surface_samples = e.value("surface_samples", c.evaluation.surface_samples);
            c.evaluation.recovery_f1 = e.value("recovery_f1", c.evaluation.recovery_f1);
            c.evaluation.stage_diagnostic = e.value("stage_diagnostic", c.evaluation.stage_diagnostic);
        }
        if (j.contains("mock_llm") && !j["mock_llm"].is_null())
            c.mock_llm = resolve(j["mock_llm"].get<std::string>(), base_dir);
    } catch (const json::exception& e) {
        throw ParseError(std::string("config: ") + e.what());
    }
    return c;
}

RunConfig RunConfig::load(const fs::path& path) {
    return from_json(io::read_file(path), path.parent_path());
}

std::string RunConfig::fingerprint() const { return io::sha256_hex(to_json()).substr(0, 16); }

std::string to_string(Stage s) {
    switch (s) {
        case Stage::split: return "split";
        case Stage::embed: return "embed";
        case Stage::train_sae: return "train-sae";
        case Stage::select: return "select";
        case Stage::interpret: return "interpret";
        case Stage::evaluate: return "evaluate";
    }
    return "unknown";
}

StageError::StageError(Stage stage, const std::string& what)
    : Error("stage '" + to_string(stage) + "' failed: " + what), stage_(stage) {}

// --- artifacts ----------------------------------------------------------------

namespace {

struct Layout {
    fs::path root;
    fs::path splits() const { return root / "01_splits" / "splits.json"; }
    fs::path embeddings() const { return root / "02_embeddings" / "embeddings.bin"; }
    fs::path embedding_cache() const { return root / "02_embeddings" / "cache.emb"; }
    fs::path sae(std::size_t i) const { return root / "03_sae" / ("sae_" + std::to_string(i) + ".bin"); }
    fs::path history(std::size_t i) const { return root / "03_sae" / ("history_" + std::to_string(i) + ".json"); }
    fs::path selection() const { return root / "04_selection" / "selection.json"; }
    fs::path interpretations() const { return root / "05_interpretations" / "interpretations.jsonl"; }
    fs::path candidates() const { return root / "05_interpretations" / "candidates.jsonl"; }
    fs::path skipped() const { return root / "05_interpretations" / "skipped.json"; }
    fs::path annotations() const { return root / "06_eval" / "annotations.json"; }
    fs::path report_json() const { return root / "06_eval" / "report.json"; }
    fs::path report_md() const { return root / "06_eval" / "report.md"; }
    fs::path report_csv() const { return root / "06_eval" / "report.csv"; }
    fs::path similarity() const { return root / "06_eval" / "similarity.json"; }
    fs::path diagnostic() const { return root / "06_eval" / "diagnostic.json"; }
    fs::path annotation_cache() const { return root / "llm_cache" / "annotations.log"; }
    fs::path manifest() const { return root / "manifest.json"; }
};

void save_embeddings(const fs::path& path, const corpus::EmbeddingMatrix& m) {
    std::ostringstream out;
    out << "EMBM";
    io::write_u32(out, static_cast<std::uint32_t>(m.n_rows));
    io::write_u32(out, static_cast<std::uint32_t>(m.dim));
    for (float v : m.data) io::write_f32(out, v);
    out << json(m.row_ids).dump();
    io::write_file_atomic(path, out.str());
}

corpus::EmbeddingMatrix load_embeddings(const fs::path& path) {
    std::istringstream in(io::read_file(path));
    char magic[4] = {};
    if (!in.read(magic, 4) || std::string(magic, 4) != "EMBM") throw ParseError("not an embedding matrix: " + path.string());
    corpus::EmbeddingMatrix m;
    m.n_rows = io::read_u32(in);
    m.dim = io::read_u32(in);
    m.data.resize(m.n_rows * m.dim);
    for (auto& v : m.data) v = io::read_f32(in);
    if (!in) throw ParseError("truncated embedding matrix: " + path.string());
    try {
        m.row_ids = json::parse(std::string(std::istreambuf_iterator<char>(in), {})).get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        throw ParseError("embedding matrix ids: " + std::string(e.what()));
    }
    m.validate();
    return m;
}

std::vector<std::string> read_lines(const fs::path& path) {
    std::istringstream in(io::read_file(path));
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) lines.push_back(line);
    return lines;
}

std::string fixed6(double v) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(6) << v;
    return os.str();
}

// Everything a stage may need, loaded on first use.
class Context {
public:
    Context(const RunConfig& config) : cfg(config), layout{config.output_dir} {}

    const RunConfig& cfg;
    Layout layout;

    const corpus::Corpus& corpus() {
        if (!corpus_) {
            corpus_ = corpus::load_dataset(cfg.dataset);
            if (cfg.task_kind) corpus_->task_kind = *cfg.task_kind;
            corpus_->validate();
        }
        return *corpus_;
    }
    const std::string& dataset_hash() {
        if (dataset_hash_.empty()) dataset_hash_ = io::sha256_hex(io::read_file(cfg.dataset));
        return dataset_hash_;
    }
    TaskKind task() { return corpus().task_kind; }
    bool paired() { return task() == TaskKind::paired_classification; }

    const corpus::SplitAssignment& splits() {
        if (!splits_) splits_ = corpus::SplitAssignment::from_json(io::read_file(layout.splits()));
        return *splits_;
    }
    void set_splits(corpus::SplitAssignment s) { splits_ = std::move(s); }
    std::vector<std::size_t> rows(corpus::Split s) { return splits().rows(corpus(), s); }

    const corpus::EmbeddingMatrix& embeddings() {
        if (!embeddings_) embeddings_ = load_embeddings(layout.embeddings());
        return *embeddings_;
    }
    void set_embeddings(corpus::EmbeddingMatrix m) { embeddings_ = std::move(m); }

    // Activations always come from the saved checkpoints so a resumed run
    // sees exactly what a fresh one does.
    const sae::ActivationMatrix& activations() {
        if (!acts_) {
            std::vector<sae::ActivationMatrix> blocks;
            for (std::size_t i = 0; i < cfg.saes.size(); ++i) {
                blocks.push_back(sae::compute_activations(sae::SaeModel::load(layout.sae(i)), embeddings()));
            }
            acts_ = sae::concat_activations(blocks);
        }
        return *acts_;
    }
    void reset_activations() { acts_.reset(); }

    /// Design rows and targets: per-item rows, or first-minus-second pair
    /// differences with the first member's label.
    Eigen::MatrixXd design(std::span<const std::size_t> rows, const std::function<Eigen::MatrixXd(std::span<const std::size_t>)>& dense) {
        if (!paired()) return dense(rows);
        const auto pr = corpus::pair_rows(corpus(), rows);
        return corpus::pair_difference(dense(pr.first), dense(pr.second));
    }
    std::vector<double> targets(std::span<const std::size_t> rows) {
        std::vector<double> y;
        if (paired()) {
            for (auto r : corpus::pair_rows(corpus(), rows).first) y.push_back(corpus().items[r].label);
        } else {
            for (auto r : rows) y.push_back(corpus().items[r].label);
        }
        return y;
    }
    Eigen::MatrixXd activation_design(std::span<const std::size_t> rows) {
        return design(rows, [&](std::span<const std::size_t> r) { return activations().select_rows(r).to_dense(); });
    }

    std::string mock_hash() {
        if (!cfg.mock_llm) return "none";
        if (mock_hash_.empty()) mock_hash_ = io::sha256_hex(io::read_file(*cfg.mock_llm));
        return mock_hash_;
    }

    llm::ChatClient& generator() {
        ensure_clients();
        return *generator_;
    }
    llm::ChatClient& judge() {
        ensure_clients();
        return *annotator_client_;
    }
    llm::Annotator& annotator() {
        ensure_clients();
        return *annotator_;
    }

private:
    void ensure_clients() {
        if (annotator_) return;
        if (cfg.mock_llm) {
            auto oracle = std::make_shared<llm::MockOracle>(llm::load_mock_rules(*cfg.mock_llm));
            generator_ = oracle;
            annotator_client_ = oracle;
        } else {
            generator_ = std::make_shared<llm::HttpChatClient>(cfg.generation, net::make_http_transport(cfg.generation.base_url));
            annotator_client_ =
                std::make_shared<llm::HttpChatClient>(cfg.annotation, net::make_http_transport(cfg.annotation.base_url));
        }
        llm::set_global_in_flight_limit(std::max(cfg.generation.max_in_flight, cfg.annotation.max_in_flight));
        fs::create_directories(layout.annotation_cache().parent_path());
        cache_ = std::make_shared<llm::AnnotationCache>(layout.annotation_cache());
        annotator_ = std::make_unique<llm::Annotator>(annotator_client_, cfg.annotation, cache_);
    }

    std::optional<corpus::Corpus> corpus_;
    std::string dataset_hash_;
    std::optional<corpus::SplitAssignment> splits_;
    std::optional<corpus::EmbeddingMatrix> embeddings_;
    std::optional<sae::ActivationMatrix> acts_;
    std::string mock_hash_;
    std::shared_ptr<llm::ChatClient> generator_, annotator_client_;
    std::shared_ptr<llm::AnnotationCache> cache_;
    std::unique_ptr<llm::Annotator> annotator_;
};

std::uint64_t split_seed(const RunConfig& c) { return c.split_seed.value_or(derive_seed(c.seed, kSplitTag)); }

sae::SaeConfig effective_sae(const RunConfig& c, std::size_t i) {
    auto s = c.saes[i];
    s.seed = derive_seed(c.seed, kSaeTag + i) ^ s.seed;
    return s;
}

select::SelectionConfig effective_selection(const RunConfig& c, TaskKind task) {
    auto s = c.selection;
    s.task_kind = task;
    return s;
}

// --- stages -------------------------------------------------------------------

std::vector<fs::path> stage_artifacts(const Context& ctx, Stage s) {
    const auto& L = ctx.layout;
    switch (s) {
        case Stage::split: return {L.splits()};
        case Stage::embed: return {L.embeddings()};
        case Stage::train_sae: {
            std::vector<fs::path> out;
            for (std::size_t i = 0; i < ctx.cfg.saes.size(); ++i) out.push_back(L.sae(i));
            return out;
        }
        case Stage::select: return {L.selection()};
        case Stage::interpret: return {L.interpretations()};
        case Stage::evaluate: return {L.annotations(), L.report_json(), L.report_md(), L.report_csv()};
    }
    return {};
}

std::string stage_fingerprint(Context& ctx, Stage s, const std::string& upstream) {
    const auto& c = ctx.cfg;
    switch (s) {
        case Stage::split:
            return hash_parts({"split", ctx.dataset_hash(), json({c.splits.train, c.splits.validation, c.splits.heldout}).dump(),
                               std::to_string(split_seed(c)), c.task_kind ? to_string(*c.task_kind) : ""});
        case Stage::embed: {
            auto e = embedding_json(c.embedding);
            e.erase("batch_size");
            e.erase("max_in_flight");
            e.erase("max_retries");
            e.erase("backoff_base_seconds");
            return hash_parts({"embed", upstream, e.dump()});
        }
        case Stage::train_sae: {
            std::string blocks;
            for (std::size_t i = 0; i < c.saes.size(); ++i) blocks += effective_sae(c, i).to_json();
            return hash_parts({"sae", upstream, blocks});
        }
        case Stage::select: return hash_parts({"select", upstream, selection_json(c.selection).dump()});
        case Stage::interpret:
            return hash_parts({"interpret", upstream, c.interpretation.to_json(), chat_json(c.generation).dump(),
                               chat_json(c.annotation).dump(), ctx.mock_hash(), std::to_string(c.seed)});
        case Stage::evaluate: {
            json e = json::parse(c.to_json())["evaluation"];
            return hash_parts({"evaluate", upstream, e.dump(), chat_json(c.annotation).dump(), ctx.mock_hash(),
                               std::to_string(c.seed)});
        }
    }
    return {};
}

void run_split(Context& ctx) {
    auto s = corpus::make_splits(ctx.corpus(), ctx.cfg.splits, split_seed(ctx.cfg));
    io::write_file_atomic(ctx.layout.splits(), s.to_json());
    log::info("split: train " + std::to_string(s.count(corpus::Split::train)) + ", validation " +
              std::to_string(s.count(corpus::Split::validation)) + ", heldout " +
              std::to_string(s.count(corpus::Split::heldout)));
    ctx.set_splits(std::move(s));
}

void run_embed(Context& ctx) {
    auto backend = corpus::make_embedding_backend(ctx.cfg.embedding);
    corpus::EmbedStats stats;
    fs::create_directories(ctx.layout.embedding_cache().parent_path());
    auto m = corpus::embed_corpus(ctx.corpus(), *backend, ctx.cfg.embedding, ctx.layout.embedding_cache(), &stats);
    save_embeddings(ctx.layout.embeddings(), m);
    log::info("embed: " + std::to_string(m.n_rows) + " x " + std::to_string(m.dim) + ", " +
              std::to_string(stats.requests) + " requests, " + std::to_string(stats.cache_hits) + " cache hits");
    ctx.set_embeddings(std::move(m));
}

void run_train_sae(Context& ctx) {
    const auto& emb = ctx.embeddings();
    const auto tr = ctx.rows(corpus::Split::train);
    const auto va = ctx.rows(corpus::Split::validation);
    const Eigen::MatrixXd train = emb.subset(tr).to_eigen();
    const Eigen::MatrixXd val = emb.subset(va).to_eigen();
    for (std::size_t i = 0; i < ctx.cfg.saes.size(); ++i) {
        const auto cfg = effective_sae(ctx.cfg, i);
        auto result = sae::train(sae::init_model(cfg, train), train, val);
        json hist = json::array();
        for (const auto& e : result.history) {
            hist.push_back({{"epoch", e.epoch},
                            {"train_loss", e.train_loss},
                            {"train_recon", e.train_recon},
                            {"val_loss", e.val_loss},
                            {"dead_latents", e.dead_latents}});
        }
        fs::create_directories(ctx.layout.sae(i).parent_path());
        result.model.save(ctx.layout.sae(i));
        io::write_file_atomic(ctx.layout.history(i), json{{"config", json::parse(cfg.to_json())},
                                                           {"initial_train_loss", result.initial_train_loss},
                                                           {"initial_val_loss", result.initial_val_loss},
                                                           {"best_epoch", result.best_epoch},
                                                           {"steps", result.steps},
                                                           {"history", hist}}
                                                         .dump(2));
        log::info("train-sae: block " + std::to_string(i) + " (M=" + std::to_string(cfg.M) + ", k=" +
                  std::to_string(cfg.k) + ") best epoch " + std::to_string(result.best_epoch) + ", val loss " +
                  (result.history.empty() ? std::string("n/a") : fixed6(result.history[result.best_epoch - 1].val_loss)));
    }
    ctx.reset_activations();
}

void run_select(Context& ctx) {
    const auto tr = ctx.rows(corpus::Split::train);
    const Eigen::MatrixXd Z = ctx.activation_design(tr);
    const auto yv = ctx.targets(tr);
    const Eigen::VectorXd y = Eigen::Map<const Eigen::VectorXd>(yv.data(), static_cast<Eigen::Index>(yv.size()));
    const auto cfg = effective_selection(ctx.cfg, ctx.task());
    std::vector<select::Probe> trace;
    const auto res = select::binary_search_lambda(Z, y, cfg, &trace);
    if (res.achieved_count != static_cast<std::size_t>(cfg.H)) {
        log::warn("select: no penalty gives exactly H = " + std::to_string(cfg.H) + "; using " +
                  std::to_string(res.achieved_count) + " features");
    }
    std::vector<int> order = res.selected;
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return std::abs(res.beta(a)) > std::abs(res.beta(b)); });
    const auto replacements = select::next_entering_features(Z, y, res, cfg);
    json probes = json::array();
    for (const auto& p : trace) probes.push_back({{"lambda", p.lambda}, {"count", p.count}});
    io::write_file_atomic(ctx.layout.selection(), json{{"result", json::parse(res.to_json())},
                                                       {"order", order},
                                                       {"replacements", replacements},
                                                       {"task_kind", to_string(ctx.task())},
                                                       {"standardize", cfg.standardize},
                                                       {"probes", probes}}
                                                     .dump(2));
    log::info("select: " + std::to_string(res.achieved_count) + " features at lambda " + fixed6(res.lambda));
}

void run_interpret(Context& ctx) {
    const auto sel = json::parse(io::read_file(ctx.layout.selection()));
    std::vector<int> queue = sel.at("order").get<std::vector<int>>();
    const auto repl = sel.at("replacements").get<std::vector<int>>();
    const std::size_t want = queue.size();
    queue.insert(queue.end(), repl.begin(), repl.end());

    const auto tr = ctx.rows(corpus::Split::train);
    const auto acts = ctx.activations().select_rows(tr);
    std::vector<std::string> texts;
    for (auto r : tr) texts.push_back(ctx.corpus().items[r].text);

    const auto fp = ctx.cfg.interpretation.fingerprint();
    std::string out, all_out;
    json skipped = json::array();
    std::size_t done = 0;
    const std::uint64_t base = derive_seed(ctx.cfg.seed, kInterpretTag);
    for (std::size_t q = 0; q < queue.size() && done < want; ++q) {
        const int neuron = queue[q];
        try {
            std::vector<interpret::InterpretationCandidate> cands;
            const auto best = interpret::interpret_neuron(ctx.generator(), ctx.annotator(), acts, texts, neuron,
                                                          ctx.cfg.interpretation,
                                                          derive_seed(base, static_cast<std::uint64_t>(neuron)), &cands);
            out += best.to_jsonl(fp) + '\n';
            for (const auto& c : cands) all_out += c.to_jsonl(fp) + '\n';
            ++done;
            log::info("interpret: neuron " + std::to_string(neuron) + " -> \"" + best.concept_text + "\"" +
                      (best.fidelity_f1 ? " (F1 " + fixed6(*best.fidelity_f1) + ")" : std::string()));
        } catch (const interpret::InsufficientActivations& e) {
            log::warn(std::string("interpret: skipping: ") + e.what());
            skipped.push_back({{"neuron", neuron}, {"reason", e.what()}});
        }
    }
    if (done == 0) throw Error("no selected neuron could be interpreted");
    if (done < want) log::warn("interpret: only " + std::to_string(done) + " of " + std::to_string(want) + " neurons interpreted");
    io::write_file_atomic(ctx.layout.candidates(), all_out);
    io::write_file_atomic(ctx.layout.skipped(), skipped.dump(2));
    io::write_file_atomic(ctx.layout.interpretations(), out);
}

std::vector<interpret::InterpretationCandidate> load_interpretations(const Layout& L) {
    std::vector<interpret::InterpretationCandidate> out;
    for (const auto& line : read_lines(L.interpretations())) out.push_back(interpret::InterpretationCandidate::from_jsonl(line));
    return out;
}

void run_evaluate(Context& ctx) {
    const auto interps = load_interpretations(ctx.layout);
    std::vector<std::string> hypotheses;
    for (const auto& c : interps) hypotheses.push_back(c.concept_text);

    const auto held = ctx.rows(corpus::Split::heldout);
    std::vector<std::string> texts, ids;
    for (auto r : held) {
        texts.push_back(ctx.corpus().items[r].text);
        ids.push_back(ctx.corpus().items[r].id);
    }
    const auto ann = evaluate::annotate_matrix(ctx.annotator(), hypotheses, texts, ids);
    io::write_file_atomic(ctx.layout.annotations(), ann.to_json());

    // Map corpus rows to annotation rows so paired designs can be formed.
    std::map<std::size_t, std::size_t> pos;
    for (std::size_t i = 0; i < held.size(); ++i) pos[held[i]] = i;
    const Eigen::MatrixXd A = ann.to_eigen();
    auto ann_rows = [&](std::span<const std::size_t> rows) {
        Eigen::MatrixXd out(static_cast<Eigen::Index>(rows.size()), A.cols());
        for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Eigen::Index>(i)) = A.row(static_cast<Eigen::Index>(pos.at(rows[i])));
        return out;
    };
    const Eigen::MatrixXd X = ctx.design(held, ann_rows);
    const auto y = ctx.targets(held);
    const std::size_t h_total = ctx.cfg.evaluation.h_total.value_or(static_cast<std::size_t>(ctx.cfg.selection.H));
    auto report = evaluate::fit_report(X, hypotheses, y, ctx.task(), ctx.cfg.evaluation.alpha, h_total);
    report.annotation_warnings = ann.unparsed;
    io::write_file_atomic(ctx.layout.report_json(), report.to_json());

    if (!ctx.cfg.evaluation.reference_concepts.empty()) {
        const auto& refs = ctx.cfg.evaluation.reference_concepts;
        const auto ref = evaluate::annotate_matrix(ctx.annotator(), refs, texts, ids).to_eigen();
        const Eigen::MatrixXd corr = evaluate::correlation_matrix(ref, A);
        const auto n = std::max(corr.rows(), corr.cols());
        Eigen::MatrixXd square = Eigen::MatrixXd::Constant(n, n, -2.0);
        square.topLeftCorner(corr.rows(), corr.cols()) = corr;
        const auto match = evaluate::hungarian_match(square);
        json pairs = json::array();
        double f1_sum = 0, surface_sum = 0;
        int recovered = 0;
        for (Eigen::Index r = 0; r < corr.rows(); ++r) {
            const int c = match[static_cast<std::size_t>(r)];
            json p = {{"reference", refs[static_cast<std::size_t>(r)]}};
            double f1 = 0, surface = 0;
            bool significant = false;
            if (c < corr.cols()) {
                std::vector<int> t(static_cast<std::size_t>(ref.rows())), q(t.size());
                for (std::size_t i = 0; i < t.size(); ++i) {
                    t[i] = ref(static_cast<Eigen::Index>(i), r) != 0;
                    q[i] = A(static_cast<Eigen::Index>(i), c) != 0;
                }
                f1 = evaluate::binary_f1(t, q);
                surface = evaluate::surface_similarity(ctx.generator(), refs[static_cast<std::size_t>(r)],
                                                       hypotheses[static_cast<std::size_t>(c)],
                                                       ctx.cfg.evaluation.surface_samples, ctx.cfg.generation.temperature)
                              .score;
                significant = report.rows[static_cast<std::size_t>(c)].significant;
                p["inferred"] = hypotheses[static_cast<std::size_t>(c)];
                p["correlation"] = corr(r, c);
            } else {
                p["inferred"] = nullptr;
            }
            const bool rec = f1 >= ctx.cfg.evaluation.recovery_f1 && significant;
            recovered += rec ? 1 : 0;
            p["f1"] = f1;
            p["surface"] = surface;
            p["significant"] = significant;
            p["recovered"] = rec;
            pairs.push_back(std::move(p));
            f1_sum += f1;
            surface_sum += surface;
        }
        const double nr = static_cast<double>(corr.rows());
        io::write_file_atomic(ctx.layout.similarity(), json{{"pairs", pairs},
                                                            {"mean_f1", f1_sum / nr},
                                                            {"mean_surface", surface_sum / nr},
                                                            {"recovered", recovered},
                                                            {"references", refs.size()}}
                                                          .dump(2));
    }

    if (ctx.cfg.evaluation.stage_diagnostic) {
        // Fit on one half of the heldout split, score on the other, so all
        // four designs see the same rows.
        std::vector<std::size_t> units(ctx.paired() ? corpus::pair_rows(ctx.corpus(), held).first.size() : held.size());
        std::iota(units.begin(), units.end(), 0);
        Rng rng(derive_seed(ctx.cfg.seed, kDiagnosticTag));
        rng.shuffle(units);
        const std::size_t half = units.size() / 2;
        std::vector<std::size_t> fit_rows(units.begin(), units.begin() + static_cast<std::ptrdiff_t>(half));
        std::vector<std::size_t> test_rows(units.begin() + static_cast<std::ptrdiff_t>(half), units.end());
        const auto& emb = ctx.embeddings();
        const Eigen::MatrixXd E =
            ctx.design(held, [&](std::span<const std::size_t> r) { return emb.subset(r).to_eigen(); });
        const Eigen::MatrixXd F = ctx.activation_design(held);
        std::vector<int> neurons;
        for (const auto& c : interps) neurons.push_back(c.neuron);
        Eigen::MatrixXd T(F.rows(), static_cast<Eigen::Index>(neurons.size()));
        for (std::size_t i = 0; i < neurons.size(); ++i) T.col(static_cast<Eigen::Index>(i)) = F.col(neurons[i]);
        const auto stages = evaluate::stage_diagnostic(E, F, T, X, y, ctx.task(), fit_rows, test_rows);
        io::write_file_atomic(ctx.layout.diagnostic(), json{{"metric", report.metric_name()},
                                                            {"embeddings", stages[0]},
                                                            {"sae_full", stages[1]},
                                                            {"sae_selected", stages[2]},
                                                            {"annotations", stages[3]}}
                                                          .dump(2));
    }

    emit_report(ctx.layout.root);
}

json load_manifest(const Layout& L) {
    if (!fs::exists(L.manifest())) return json::object();
    try {
        return json::parse(io::read_file(L.manifest()));
    } catch (const json::exception&) {
        log::warn("manifest is unreadable; every stage will run");
        return json::object();
    }
}

}  // namespace

RunSummary run_pipeline(const RunConfig& config, Stage until) {
    config.validate();
    if (!fs::exists(config.dataset)) throw ValidationError("dataset not found: " + config.dataset.string());
    if (config.mock_llm && !fs::exists(*config.mock_llm))
        throw ValidationError("mock LLM rules not found: " + config.mock_llm->string());
    fs::create_directories(config.output_dir);
    Context ctx(config);
    RunSummary summary;
    summary.run_dir = config.output_dir;

    json manifest = load_manifest(ctx.layout);
    const json previous = manifest.value("stages", json::object());
    manifest["config_fingerprint"] = config.fingerprint();
    manifest["seed"] = config.seed;
    manifest["split_seed"] = split_seed(config);
    json stages = json::object();

    std::string upstream;
    bool dirty = false;  // an earlier stage re-ran, so later ones must too
    for (int si = static_cast<int>(Stage::split); si <= static_cast<int>(until); ++si) {
        const auto stage = static_cast<Stage>(si);
        const auto name = to_string(stage);
        std::string fp;
        try {
            fp = stage_fingerprint(ctx, stage, upstream);
        } catch (const std::exception& e) {
            throw StageError(stage, e.what());
        }
        bool current = !dirty && previous.contains(name) && previous[name].value("fingerprint", "") == fp;
        for (const auto& a : stage_artifacts(ctx, stage)) current = current && fs::exists(a);
        if (current) {
            summary.skipped.push_back(stage);
            log::info(name + ": up to date");
        } else {
            dirty = true;
            const auto t0 = std::chrono::steady_clock::now();
            try {
                for (const auto& a : stage_artifacts(ctx, stage)) fs::create_directories(a.parent_path());
                switch (stage) {
                    case Stage::split: run_split(ctx); break;
                    case Stage::embed: run_embed(ctx); break;
                    case Stage::train_sae: run_train_sae(ctx); break;
                    case Stage::select: run_select(ctx); break;
                    case Stage::interpret: run_interpret(ctx); break;
                    case Stage::evaluate: run_evaluate(ctx); break;
                }
            } catch (const StageError&) {
                throw;
            } catch (const std::exception& e) {
                throw StageError(stage, e.what());
            }
            const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
            std::ostringstream took;
            took << std::fixed << std::setprecision(2) << dt.count();
            log::info(name + ": done in " + took.str() + " s");
            summary.executed.push_back(stage);
        }
        stages[name] = {{"fingerprint", fp}};
        json artifacts = json::array();
        for (const auto& a : stage_artifacts(ctx, stage)) artifacts.push_back(fs::relative(a, ctx.layout.root).generic_string());
        stages[name]["artifacts"] = artifacts;
        // Keep records of later stages from a previous run only while they
        // may still be valid.
        json merged = dirty ? stages : previous;
        for (auto it = stages.begin(); it != stages.end(); ++it) merged[it.key()] = it.value();
        if (dirty) {
            for (int later = si + 1; later <= static_cast<int>(Stage::evaluate); ++later)
                merged.erase(to_string(static_cast<Stage>(later)));
        }
        manifest["stages"] = merged;
        io::write_file_atomic(ctx.layout.manifest(), manifest.dump(2));
        upstream = fp;
    }
    return summary;
}

std::string emit_report(const fs::path& run_dir) {
    const Layout L{run_dir};
    std::vector<std::string> missing;
    for (const auto& p : {L.report_json(), L.annotations()})
        if (!fs::exists(p)) missing.push_back(p.string());
    if (!missing.empty()) {
        std::string msg = "missing evaluation artifacts:";
        for (const auto& m : missing) msg += " " + m;
        throw Error(msg);
    }
    const auto report = evaluate::HypothesisReport::from_json(io::read_file(L.report_json()));
    std::string md = "# Hypotheses\n\n" + report.to_markdown();
    if (fs::exists(L.similarity())) {
        const auto s = json::parse(io::read_file(L.similarity()));
        md += "\n## Reference recovery\n\n";
        md += "Recovered " + std::to_string(s.at("recovered").get<int>()) + " of " +
              std::to_string(s.at("references").get<std::size_t>()) + "; mean F1 " + fixed6(s.at("mean_f1").get<double>()) +
              ", mean surface similarity " + fixed6(s.at("mean_surface").get<double>()) + "\n\n";
        md += "| Reference | Matched hypothesis | F1 | Surface | Sig. |\n|---|---|---:|---:|:---:|\n";
        for (const auto& p : s.at("pairs")) {
            md += "| " + p.at("reference").get<std::string>() + " | " +
                  (p.at("inferred").is_null() ? std::string() : p.at("inferred").get<std::string>()) + " | " +
                  fixed6(p.at("f1").get<double>()) + " | " + fixed6(p.at("surface").get<double>()) + " | " +
                  (p.at("significant").get<bool>() ? "*" : "") + " |\n";
        }
    }
    if (fs::exists(L.diagnostic())) {
        const auto d = json::parse(io::read_file(L.diagnostic()));
        const auto metric = d.at("metric").get<std::string>();
        md += "\n## Stage diagnostic (" + metric + ")\n\n| Embeddings | SAE (all) | SAE (selected) | Annotations |\n"
              "|---:|---:|---:|---:|\n| " +
              fixed6(d.at("embeddings").get<double>()) + " | " + fixed6(d.at("sae_full").get<double>()) + " | " +
              fixed6(d.at("sae_selected").get<double>()) + " | " + fixed6(d.at("annotations").get<double>()) + " |\n";
    }
    io::write_file_atomic(L.report_md(), md);
    io::write_file_atomic(L.report_csv(), report.to_csv());
    return md;
}

// --- tuning -------------------------------------------------------------------

std::vector<int> powers_of_two(int lo, int hi) {
    if (lo < 1 || hi < lo) throw ValidationError("power-of-two range must satisfy 1 <= lo <= hi");
    std::vector<int> out;
    for (long v = 1; v <= hi; v *= 2)
        if (v >= lo) out.push_back(static_cast<int>(v));
    if (out.empty()) throw ValidationError("no power of two in [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    return out;
}

std::string TuneResult::to_json() const {
    json g = json::array();
    for (const auto& p : grid)
        g.push_back({{"M", p.M}, {"k", p.k}, {"validation_metric", p.validation_metric}, {"selected", p.selected}});
    return json{{"grid", g}, {"best", {{"M", best.M}, {"k", best.k}, {"validation_metric", best.validation_metric}}}}.dump(2);
}

TuneResult tune(const RunConfig& config, const std::vector<int>& m_values, const std::vector<int>& k_values) {
    run_pipeline(config, Stage::embed);
    Context ctx(config);
    const auto tr = ctx.rows(corpus::Split::train);
    const auto va = ctx.rows(corpus::Split::validation);
    const auto& emb = ctx.embeddings();
    const Eigen::MatrixXd train = emb.subset(tr).to_eigen();
    const Eigen::MatrixXd val = emb.subset(va).to_eigen();
    const bool classify = is_classification(ctx.task());
    const bool intercept = !ctx.paired();
    const auto ytr = ctx.targets(tr);
    const auto yva = ctx.targets(va);
    const Eigen::VectorXd ytr_v = Eigen::Map<const Eigen::VectorXd>(ytr.data(), static_cast<Eigen::Index>(ytr.size()));

    TuneResult result;
    bool have_best = false;
    for (int M : m_values) {
        for (int k : k_values) {
            if (k >= M) continue;
            auto cfg = effective_sae(config, 0);
            cfg.M = M;
            cfg.k = k;
            if (cfg.k_aux > M) cfg.k_aux = -1;
            if (cfg.resolved_k_aux() > M) cfg.k_aux = M;
            auto trained = sae::train(sae::init_model(cfg, train), train, val);
            const auto acts_tr = sae::compute_activations(trained.model, train);
            const auto acts_va = sae::compute_activations(trained.model, val);
            auto dense = [&](const sae::ActivationMatrix& a, const std::vector<std::size_t>& rows) {
                // `a` rows follow `rows`; map corpus rows back to local indices.
                std::map<std::size_t, std::size_t> local;
                for (std::size_t i = 0; i < rows.size(); ++i) local[rows[i]] = i;
                return ctx.design(rows, [&](std::span<const std::size_t> r) {
                    std::vector<std::size_t> idx;
                    for (auto x : r) idx.push_back(local.at(x));
                    return a.select_rows(idx).to_dense();
                });
            };
            const Eigen::MatrixXd Ztr = dense(acts_tr, tr);
            const Eigen::MatrixXd Zva = dense(acts_va, va);
            auto scfg = effective_selection(config, ctx.task());
            scfg.H = std::min(scfg.H, M);
            TunePoint pt{M, k, 0.0, 0};
            try {
                const auto sel = select::binary_search_lambda(Ztr, ytr_v, scfg);
                pt.selected = sel.selected.size();
                Eigen::MatrixXd Xtr(Ztr.rows(), static_cast<Eigen::Index>(sel.selected.size()));
                Eigen::MatrixXd Xva(Zva.rows(), Xtr.cols());
                for (std::size_t i = 0; i < sel.selected.size(); ++i) {
                    Xtr.col(static_cast<Eigen::Index>(i)) = Ztr.col(sel.selected[i]);
                    Xva.col(static_cast<Eigen::Index>(i)) = Zva.col(sel.selected[i]);
                }
                const auto fit = classify ? evaluate::fit_logit(Xtr, ytr_v, intercept, 1e-6)
                                          : evaluate::fit_ols(Xtr, ytr_v, intercept, 1e-6);
                Eigen::VectorXd eta = Xva * fit.beta.tail(Xva.cols());
                if (intercept) eta.array() += fit.beta(0);
                const std::vector<double> pred(eta.data(), eta.data() + eta.size());
                pt.validation_metric = classify ? evaluate::auc(pred, yva) : evaluate::r_squared(pred, yva);
            } catch (const Error& e) {
                log::warn("tune: M=" + std::to_string(M) + " k=" + std::to_string(k) + " failed: " + e.what());
                pt.validation_metric = -std::numeric_limits<double>::infinity();
            }
            log::info("tune: M=" + std::to_string(M) + " k=" + std::to_string(k) + " -> " + fixed6(pt.validation_metric));
            result.grid.push_back(pt);
            if (!have_best || pt.validation_metric > result.best.validation_metric) {
                result.best = pt;
                have_best = true;
            }
        }
    }
    if (!have_best) throw ValidationError("tune: grid has no (M, k) pair with k < M");
    io::write_file_atomic(config.output_dir / "tune.json", result.to_json());
    return result;
}

TriangleSweep sweep_triangle(std::size_t trials, std::uint64_t seed) {
    const auto t0 = std::chrono::steady_clock::now();
    TriangleSweep s;
    Rng rng(seed);
    s.max_gap = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < trials; ++i) {
        const auto check = evaluate::check_triangle(evaluate::JointCounts::random(rng));
        ++s.trials;
        s.violations += check.holds ? 0 : 1;
        s.max_gap = std::max(s.max_gap, check.lhs - check.rhs);
    }
    s.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return s;
}

}  // namespace hypsae::pipeline
