#include "hypsae/sae.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "hypsae/io.hpp"
#include "hypsae/log.hpp"

namespace hypsae::sae {

using json = nlohmann::json;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void SaeConfig::validate() const {
    if (M < 1) throw ValidationError("SAE M must be >= 1");
    if (k < 1 || k > M) throw ValidationError("SAE k must satisfy 1 <= k <= M");
    if (k_aux < -1) throw ValidationError("SAE k_aux must be >= 0");
    if (!(w_aux >= 0.0)) throw ValidationError("SAE w_aux must be non-negative");
    if (dead_threshold_steps < 1) throw ValidationError("SAE dead_threshold_steps must be positive");
    if (batch_size < 1) throw ValidationError("SAE batch_size must be positive");
    if (!(learning_rate > 0.0)) throw ValidationError("SAE learning_rate must be positive");
    if (!(grad_clip > 0.0)) throw ValidationError("SAE grad_clip must be positive");
    if (max_epochs < 1) throw ValidationError("SAE max_epochs must be positive");
    if (patience_epochs < 1) throw ValidationError("SAE patience_epochs must be positive");
}

std::string SaeConfig::to_json() const {
    json j = {{"M", M},
              {"k", k},
              {"k_aux", resolved_k_aux()},
              {"w_aux", w_aux},
              {"dead_threshold_steps", dead_threshold_steps},
              {"batch_size", batch_size},
              {"learning_rate", learning_rate},
              {"grad_clip", grad_clip},
              {"max_epochs", max_epochs},
              {"patience_epochs", patience_epochs},
              {"seed", seed}};
    return j.dump();
}

SaeConfig SaeConfig::from_json(const std::string& text) {
    SaeConfig c;
    try {
        auto j = json::parse(text);
        c.M = j.value("M", c.M);
        c.k = j.value("k", c.k);
        c.k_aux = j.value("k_aux", c.k_aux);
        c.w_aux = j.value("w_aux", c.w_aux);
        c.dead_threshold_steps = j.value("dead_threshold_steps", c.dead_threshold_steps);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.grad_clip = j.value("grad_clip", c.grad_clip);
        c.max_epochs = j.value("max_epochs", c.max_epochs);
        c.patience_epochs = j.value("patience_epochs", c.patience_epochs);
        c.seed = j.value("seed", c.seed);
    } catch (const json::exception& e) {
        throw ParseError(std::string("SAE config: ") + e.what());
    }
    return c;
}

void SaeModel::normalize_atoms() {
    for (Index j = 0; j < w_dec.cols(); ++j) {
        const double n = w_dec.col(j).norm();
        if (n > 0.0) w_dec.col(j) /= n;
    }
}

double SaeModel::max_atom_norm_error() const {
    double worst = 0.0;
    for (Index j = 0; j < w_dec.cols(); ++j) worst = std::max(worst, std::abs(w_dec.col(j).norm() - 1.0));
    return worst;
}

namespace {

void write_block(std::ostream& os, const MatrixXd& m) {
    // row-major order
    for (Index r = 0; r < m.rows(); ++r)
        for (Index c = 0; c < m.cols(); ++c) io::write_f32(os, static_cast<float>(m(r, c)));
}

MatrixXd read_block(std::istream& is, Index rows, Index cols) {
    MatrixXd m(rows, cols);
    for (Index r = 0; r < rows; ++r)
        for (Index c = 0; c < cols; ++c) m(r, c) = io::read_f32(is);
    return m;
}

}  // namespace

void SaeModel::save(const std::filesystem::path& path) const {
    std::ostringstream os(std::ios::binary);
    os.write("SAE1", 4);
    io::write_u32(os, static_cast<std::uint32_t>(dim()));
    io::write_u32(os, static_cast<std::uint32_t>(latents()));
    io::write_u32(os, static_cast<std::uint32_t>(config.k));
    write_block(os, w_enc);
    write_block(os, b_enc.transpose());
    write_block(os, w_dec);
    write_block(os, b_pre.transpose());
    auto trailer = json::parse(config.to_json());
    trailer["dead_steps"] = dead_steps;
    os << trailer.dump();
    io::write_file_atomic(path, os.str());
}

SaeModel SaeModel::load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path.string());
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, "SAE1", 4) != 0) throw ParseError("bad checkpoint magic: " + path.string());
    const Index d = io::read_u32(in);
    const Index m = io::read_u32(in);
    const int k = static_cast<int>(io::read_u32(in));
    SaeModel model;
    model.w_enc = read_block(in, m, d);
    model.b_enc = read_block(in, 1, m).transpose();
    model.w_dec = read_block(in, d, m);
    model.b_pre = read_block(in, 1, d).transpose();
    std::ostringstream rest;
    rest << in.rdbuf();
    model.config = SaeConfig::from_json(rest.str());
    if (model.config.k != k || model.config.M != m) throw ParseError("checkpoint header disagrees with config trailer");
    auto trailer = json::parse(rest.str());
    model.dead_steps = trailer.value("dead_steps", std::vector<std::uint32_t>(static_cast<std::size_t>(m), 0));
    if (model.dead_steps.size() != static_cast<std::size_t>(m)) throw ParseError("checkpoint dead_steps length mismatch");
    return model;
}

// --- ActivationMatrix ---------------------------------------------------------

ActivationMatrix::ActivationMatrix(std::size_t n_rows, std::size_t n_latents) : rows_(n_rows), latents_(n_latents) {}

void ActivationMatrix::set_row(std::size_t i, std::vector<Entry> entries) {
    std::sort(entries.begin(), entries.end());
    for (const auto& [j, v] : entries) {
        if (j >= latents_) throw ValidationError("activation latent index out of range");
        if (!(v > 0.0)) throw ValidationError("activation values must be strictly positive");
    }
    rows_.at(i) = std::move(entries);
}

double ActivationMatrix::at(std::size_t row, std::size_t latent) const {
    for (const auto& [j, v] : rows_.at(row))
        if (j == latent) return v;
    return 0.0;
}

VectorXd ActivationMatrix::column(std::size_t latent) const {
    VectorXd c = VectorXd::Zero(static_cast<Index>(rows()));
    for (std::size_t i = 0; i < rows(); ++i)
        for (const auto& [j, v] : rows_[i])
            if (j == latent) c(static_cast<Index>(i)) = v;
    return c;
}

MatrixXd ActivationMatrix::to_dense() const {
    MatrixXd d = MatrixXd::Zero(static_cast<Index>(rows()), static_cast<Index>(latents_));
    for (std::size_t i = 0; i < rows(); ++i)
        for (const auto& [j, v] : rows_[i]) d(static_cast<Index>(i), j) = v;
    return d;
}

ActivationMatrix ActivationMatrix::select_rows(std::span<const std::size_t> rows) const {
    ActivationMatrix out(rows.size(), latents_);
    for (std::size_t i = 0; i < rows.size(); ++i) out.rows_[i] = rows_.at(rows[i]);
    return out;
}

std::size_t ActivationMatrix::nonzeros() const {
    std::size_t n = 0;
    for (const auto& r : rows_) n += r.size();
    return n;
}

// --- math -------------------------------------------------------------------

VectorXd geometric_median(const MatrixXd& points, double tol) {
    if (points.rows() < 1) throw ValidationError("geometric_median needs at least one point");
    VectorXd x = points.colwise().mean().transpose();
    const Index n = points.rows();
    VectorXd dist(n);
    for (int iter = 0; iter < 100; ++iter) {
        dist = (points.rowwise() - x.transpose()).rowwise().norm();
        if ((dist.array() == 0.0).any()) {
            x.array() += 1e-12;
            dist = (points.rowwise() - x.transpose()).rowwise().norm();
            if ((dist.array() == 0.0).any()) return x;  // only for degenerate float spacing
        }
        const VectorXd w = dist.cwiseInverse();
        const VectorXd next = (points.transpose() * w) / w.sum();
        const double step = (next - x).norm();
        x = next;
        if (step < tol) break;
    }
    return x;
}

SaeModel init_model(const SaeConfig& config, const MatrixXd& train) {
    config.validate();
    if (train.rows() == 0 || train.cols() == 0) throw ValidationError("cannot initialize SAE from an empty training matrix");
    const Index d = train.cols();
    const Index m = config.M;
    SaeModel model;
    model.config = config;
    model.b_pre = geometric_median(train);
    model.b_enc = VectorXd::Zero(m);
    Rng rng(derive_seed(config.seed, 0x5AE1));
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    model.w_enc.resize(m, d);
    for (Index r = 0; r < m; ++r)
        for (Index c = 0; c < d; ++c) model.w_enc(r, c) = rng.normal() * scale;
    model.w_dec = model.w_enc.transpose();
    model.normalize_atoms();
    model.dead_steps.assign(static_cast<std::size_t>(m), 0);
    return model;
}

SaeModel init_model(const SaeConfig& config, const corpus::EmbeddingMatrix& train) {
    return init_model(config, train.to_eigen());
}

std::vector<int> topk_indices(std::span<const double> v, int k) {
    const int m = static_cast<int>(v.size());
    k = std::clamp(k, 0, m);
    std::vector<int> idx(static_cast<std::size_t>(m));
    std::iota(idx.begin(), idx.end(), 0);
    auto better = [&](int a, int b) { return v[a] > v[b] || (v[a] == v[b] && a < b); };
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), better);
    idx.resize(static_cast<std::size_t>(k));
    std::sort(idx.begin(), idx.end());
    return idx;
}

std::vector<double> topk_mask(std::span<const double> v, int k) {
    if (k < 1 || k > static_cast<int>(v.size())) throw ValidationError("topk_mask requires 1 <= k <= M");
    std::vector<double> out(v.size(), 0.0);
    for (int j : topk_indices(v, k)) out[j] = v[j];
    return out;
}

namespace {

void check_finite(const VectorXd& v, const char* what) {
    if (!v.allFinite()) throw ValidationError(std::string(what) + " contains non-finite values");
}

}  // namespace

VectorXd encode(const SaeModel& model, const VectorXd& e) {
    if (e.size() != model.dim()) throw ValidationError("encode: input dimension mismatch");
    check_finite(e, "encode input");
    const VectorXd pre = model.w_enc * (e - model.b_pre) + model.b_enc;
    VectorXd z = VectorXd::Zero(pre.size());
    for (int j : topk_indices({pre.data(), static_cast<std::size_t>(pre.size())}, model.config.k)) {
        z(j) = std::max(0.0, pre(j));
    }
    return z;
}

VectorXd decode(const SaeModel& model, const VectorXd& z) {
    if (z.size() != model.latents()) throw ValidationError("decode: latent dimension mismatch");
    return model.w_dec * z + model.b_pre;
}

double Gradients::squared_norm() const {
    return w_enc.squaredNorm() + b_enc.squaredNorm() + w_dec.squaredNorm() + b_pre.squaredNorm();
}

void Gradients::scale(double s) {
    w_enc *= s;
    b_enc *= s;
    w_dec *= s;
    b_pre *= s;
}

namespace {

MatrixXd pre_activations(const SaeModel& model, const MatrixXd& batch, MatrixXd* centered = nullptr) {
    MatrixXd xc = batch.rowwise() - model.b_pre.transpose();
    MatrixXd pre = (xc * model.w_enc.transpose()).rowwise() + model.b_enc.transpose();
    if (centered) *centered = std::move(xc);
    return pre;
}

}  // namespace

Masks compute_masks(const SaeModel& model, const MatrixXd& batch, const std::vector<bool>& dead) {
    const MatrixXd pre = pre_activations(model, batch);
    const Index b = batch.rows();
    const Index m = model.latents();
    Masks masks;
    masks.topk.resize(static_cast<std::size_t>(b));
    masks.aux.resize(static_cast<std::size_t>(b));
    std::vector<int> dead_idx;
    for (Index j = 0; j < m; ++j)
        if (dead[static_cast<std::size_t>(j)]) dead_idx.push_back(static_cast<int>(j));
    const int k_aux = std::min<int>(model.config.resolved_k_aux(), static_cast<int>(dead_idx.size()));
    std::vector<double> row(static_cast<std::size_t>(m));
    std::vector<double> dead_vals(dead_idx.size());
    for (Index i = 0; i < b; ++i) {
        for (Index j = 0; j < m; ++j) row[static_cast<std::size_t>(j)] = pre(i, j);
        masks.topk[static_cast<std::size_t>(i)] = topk_indices(row, model.config.k);
        if (k_aux > 0) {
            for (std::size_t t = 0; t < dead_idx.size(); ++t) dead_vals[t] = std::max(0.0, row[dead_idx[t]]);
            auto& aux = masks.aux[static_cast<std::size_t>(i)];
            for (int t : topk_indices(dead_vals, k_aux)) aux.push_back(dead_idx[static_cast<std::size_t>(t)]);
        }
    }
    return masks;
}

LossParts loss_with_masks(const SaeModel& model, const MatrixXd& batch, const Masks& masks, Gradients* grads) {
    const Index b = batch.rows();
    const Index m = model.latents();
    const double w = model.config.w_aux;
    MatrixXd xc;
    const MatrixXd pre = pre_activations(model, batch, &xc);

    MatrixXd z = MatrixXd::Zero(b, m);
    MatrixXd z_aux = MatrixXd::Zero(b, m);
    bool any_aux = false;
    for (Index i = 0; i < b; ++i) {
        for (int j : masks.topk[static_cast<std::size_t>(i)]) z(i, j) = std::max(0.0, pre(i, j));
        for (int j : masks.aux[static_cast<std::size_t>(i)]) {
            z_aux(i, j) = std::max(0.0, pre(i, j));
            any_aux = true;
        }
    }
    const MatrixXd e_hat = (z * model.w_dec.transpose()).rowwise() + model.b_pre.transpose();
    const MatrixXd resid = batch - e_hat;
    LossParts parts;
    parts.recon = resid.squaredNorm() / static_cast<double>(b);
    MatrixXd a;
    if (any_aux) {
        a = z_aux * model.w_dec.transpose();
        parts.aux = (a - resid).squaredNorm() / static_cast<double>(b);
    }
    parts.total = parts.recon + w * parts.aux;
    if (grads == nullptr) return parts;

    // d total / d resid and d total / d a
    const double c = 2.0 / static_cast<double>(b);
    MatrixXd g_r = c * resid;
    MatrixXd g_a;
    if (any_aux) {
        g_a = (c * w) * (a - resid);
        g_r -= g_a;
    }
    // resid = batch - e_hat, so d/d e_hat = -g_r
    grads->w_dec = -g_r.transpose() * z;
    MatrixXd d_pre = (-g_r * model.w_dec).cwiseProduct((z.array() > 0.0).cast<double>().matrix());
    if (any_aux) {
        grads->w_dec += g_a.transpose() * z_aux;
        d_pre += (g_a * model.w_dec).cwiseProduct((z_aux.array() > 0.0).cast<double>().matrix());
    }
    grads->w_enc = d_pre.transpose() * xc;
    grads->b_enc = d_pre.colwise().sum().transpose();
    // tied bias enters as the decoder bias and as the pre-encoder offset
    grads->b_pre = -g_r.colwise().sum().transpose() - model.w_enc.transpose() * grads->b_enc;
    return parts;
}

double reconstruction_loss(const SaeModel& model, const MatrixXd& data) {
    if (data.rows() == 0) return 0.0;
    const std::vector<bool> none(static_cast<std::size_t>(model.latents()), false);
    double total = 0.0;
    const Index chunk = 4096;
    for (Index start = 0; start < data.rows(); start += chunk) {
        const Index len = std::min(chunk, data.rows() - start);
        const MatrixXd block = data.middleRows(start, len);
        const auto masks = compute_masks(model, block, none);
        total += loss_with_masks(model, block, masks).recon * static_cast<double>(len);
    }
    return total / static_cast<double>(data.rows());
}

namespace {

struct AdamState {
    Gradients m, v;
    std::size_t t = 0;

    explicit AdamState(const SaeModel& model) {
        for (Gradients* g : {&m, &v}) {
            g->w_enc = MatrixXd::Zero(model.w_enc.rows(), model.w_enc.cols());
            g->b_enc = VectorXd::Zero(model.b_enc.size());
            g->w_dec = MatrixXd::Zero(model.w_dec.rows(), model.w_dec.cols());
            g->b_pre = VectorXd::Zero(model.b_pre.size());
        }
    }

    template <typename P, typename G>
    static void update(P& param, P& m1, P& m2, const G& g, double lr, double bc1, double bc2) {
        constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
        m1 = beta1 * m1 + (1.0 - beta1) * g;
        m2 = beta2 * m2 + (1.0 - beta2) * g.cwiseProduct(g);
        param.array() -= lr * (m1.array() / bc1) / ((m2.array() / bc2).sqrt() + eps);
    }

    void step(SaeModel& model, const Gradients& g, double lr) {
        ++t;
        const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(t));
        update(model.w_enc, m.w_enc, v.w_enc, g.w_enc, lr, bc1, bc2);
        update(model.b_enc, m.b_enc, v.b_enc, g.b_enc, lr, bc1, bc2);
        update(model.w_dec, m.w_dec, v.w_dec, g.w_dec, lr, bc1, bc2);
        update(model.b_pre, m.b_pre, v.b_pre, g.b_pre, lr, bc1, bc2);
    }
};

}  // namespace

TrainResult train(SaeModel model, const MatrixXd& train_data, const MatrixXd& val_data, const StepCallback& on_step) {
    const auto& cfg = model.config;
    cfg.validate();
    if (train_data.rows() == 0) throw ValidationError("SAE training set is empty");
    if (train_data.cols() != model.dim() || (val_data.rows() > 0 && val_data.cols() != model.dim())) {
        throw ValidationError("SAE train/validation dimension mismatch");
    }
    const bool has_val = val_data.rows() > 0;
    const auto m = static_cast<std::size_t>(model.latents());
    if (model.dead_steps.size() != m) model.dead_steps.assign(m, 0);

    TrainResult result;
    result.initial_train_loss = reconstruction_loss(model, train_data);
    result.initial_val_loss = has_val ? reconstruction_loss(model, val_data) : result.initial_train_loss;

    AdamState adam(model);
    Rng rng(derive_seed(cfg.seed, 0x7EA1));
    std::vector<Index> order(static_cast<std::size_t>(train_data.rows()));
    std::iota(order.begin(), order.end(), Index{0});

    double best_val = std::numeric_limits<double>::infinity();
    int since_best = 0;
    result.model = model;
    std::vector<bool> dead(m);
    std::vector<char> selected(m);
    const Index bs = cfg.batch_size;
    MatrixXd batch;
    Gradients grads;

    for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
        rng.shuffle(order);
        double sum_total = 0.0, sum_recon = 0.0;
        std::size_t batches = 0;
        for (Index start = 0; start < train_data.rows(); start += bs) {
            const Index len = std::min(bs, train_data.rows() - start);
            batch.resize(len, train_data.cols());
            for (Index i = 0; i < len; ++i) batch.row(i) = train_data.row(order[static_cast<std::size_t>(start + i)]);

            for (std::size_t j = 0; j < m; ++j) dead[j] = model.dead_steps[j] >= static_cast<std::uint32_t>(cfg.dead_threshold_steps);
            const Masks masks = compute_masks(model, batch, dead);
            const LossParts parts = loss_with_masks(model, batch, masks, &grads);
            if (!std::isfinite(parts.total)) {
                throw NumericalError("SAE training diverged at epoch " + std::to_string(epoch) + ", step " +
                                     std::to_string(result.steps + 1));
            }
            const double gnorm = std::sqrt(grads.squared_norm());
            if (gnorm > cfg.grad_clip) grads.scale(cfg.grad_clip / gnorm);
            adam.step(model, grads, cfg.learning_rate);
            model.normalize_atoms();

            std::fill(selected.begin(), selected.end(), 0);
            for (const auto& row : masks.topk)
                for (int j : row) selected[static_cast<std::size_t>(j)] = 1;
            for (std::size_t j = 0; j < m; ++j) model.dead_steps[j] = selected[j] ? 0 : model.dead_steps[j] + 1;

            ++result.steps;
            sum_total += parts.total;
            sum_recon += parts.recon;
            ++batches;
            if (on_step) on_step(model, result.steps);
        }
        EpochStats st;
        st.epoch = epoch;
        st.train_loss = sum_total / static_cast<double>(batches);
        st.train_recon = sum_recon / static_cast<double>(batches);
        st.val_loss = has_val ? reconstruction_loss(model, val_data) : st.train_recon;
        st.dead_latents = static_cast<std::size_t>(std::count_if(model.dead_steps.begin(), model.dead_steps.end(), [&](auto s) {
            return s >= static_cast<std::uint32_t>(cfg.dead_threshold_steps);
        }));
        if (!std::isfinite(st.val_loss)) throw NumericalError("SAE validation loss non-finite at epoch " + std::to_string(epoch));
        result.history.push_back(st);
        if (st.val_loss < best_val) {
            best_val = st.val_loss;
            since_best = 0;
            result.model = model;
            result.best_epoch = epoch;
        } else if (++since_best >= cfg.patience_epochs) {
            break;
        }
    }
    return result;
}

ActivationMatrix compute_activations(const SaeModel& model, const MatrixXd& embs) {
    if (embs.cols() != model.dim()) throw ValidationError("compute_activations: dimension mismatch");
    if (!embs.allFinite()) throw ValidationError("compute_activations: non-finite embeddings");
    ActivationMatrix out(static_cast<std::size_t>(embs.rows()), static_cast<std::size_t>(model.latents()));
    const Index chunk = 4096;
    const Index m = model.latents();
    std::vector<double> row(static_cast<std::size_t>(m));
    for (Index start = 0; start < embs.rows(); start += chunk) {
        const Index len = std::min(chunk, embs.rows() - start);
        const MatrixXd pre = pre_activations(model, embs.middleRows(start, len));
        for (Index i = 0; i < len; ++i) {
            for (Index j = 0; j < m; ++j) row[static_cast<std::size_t>(j)] = pre(i, j);
            std::vector<ActivationMatrix::Entry> entries;
            for (int j : topk_indices(row, model.config.k)) {
                if (pre(i, j) > 0.0) entries.emplace_back(static_cast<std::uint32_t>(j), pre(i, j));
            }
            out.set_row(static_cast<std::size_t>(start + i), std::move(entries));
        }
    }
    return out;
}

ActivationMatrix compute_activations(const SaeModel& model, const corpus::EmbeddingMatrix& embs) {
    return compute_activations(model, embs.to_eigen());
}

ActivationMatrix concat_activations(std::span<const ActivationMatrix> matrices) {
    if (matrices.empty()) throw ValidationError("concat_activations needs at least one matrix");
    const std::size_t n = matrices.front().rows();
    std::size_t total = 0;
    for (const auto& a : matrices) {
        if (a.rows() != n) throw ValidationError("concat_activations: row-count mismatch");
        total += a.latents();
    }
    ActivationMatrix out(n, total);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<ActivationMatrix::Entry> entries;
        std::uint32_t offset = 0;
        for (const auto& a : matrices) {
            for (const auto& [j, v] : a.row(i)) entries.emplace_back(j + offset, v);
            offset += static_cast<std::uint32_t>(a.latents());
        }
        out.set_row(i, std::move(entries));
    }
    return out;
}

}  // namespace hypsae::sae
