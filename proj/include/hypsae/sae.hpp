#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "hypsae/corpus.hpp"

namespace hypsae::sae {

struct SaeConfig {
    int M = 32;
    int k = 4;
    int k_aux = -1;  // -1 resolves to 2k
    double w_aux = 1.0 / 32.0;
    int dead_threshold_steps = 256;
    int batch_size = 512;
    double learning_rate = 5e-4;
    double grad_clip = 1.0;
    int max_epochs = 200;
    int patience_epochs = 5;
    std::uint64_t seed = 0;

    int resolved_k_aux() const { return k_aux < 0 ? 2 * k : k_aux; }
    void validate() const;
    std::string to_json() const;
    static SaeConfig from_json(const std::string& text);
};

/// Top-k sparse autoencoder. The pre-encoder bias and the decoder bias are
/// one parameter (`b_pre`); each column of `w_dec` is a unit-norm atom.
struct SaeModel {
    Eigen::MatrixXd w_enc;  // M x D
    Eigen::VectorXd b_enc;  // M
    Eigen::MatrixXd w_dec;  // D x M
    Eigen::VectorXd b_pre;  // D
    std::vector<std::uint32_t> dead_steps;
    SaeConfig config;

    const Eigen::VectorXd& b_dec() const { return b_pre; }
    Eigen::Index dim() const { return w_dec.rows(); }
    Eigen::Index latents() const { return w_dec.cols(); }

    void normalize_atoms();
    /// Largest |norm - 1| over decoder atoms.
    double max_atom_norm_error() const;

    void save(const std::filesystem::path& path) const;
    static SaeModel load(const std::filesystem::path& path);
};

/// Sparse N x M activations; each row holds (latent, value > 0) sorted by latent.
class ActivationMatrix {
public:
    using Entry = std::pair<std::uint32_t, double>;

    ActivationMatrix() = default;
    ActivationMatrix(std::size_t n_rows, std::size_t n_latents);

    std::size_t rows() const { return rows_.size(); }
    std::size_t latents() const { return latents_; }
    const std::vector<Entry>& row(std::size_t i) const { return rows_.at(i); }
    void set_row(std::size_t i, std::vector<Entry> entries);

    double at(std::size_t row, std::size_t latent) const;
    Eigen::VectorXd column(std::size_t latent) const;
    Eigen::MatrixXd to_dense() const;
    ActivationMatrix select_rows(std::span<const std::size_t> rows) const;
    std::size_t nonzeros() const;

private:
    std::vector<std::vector<Entry>> rows_;
    std::size_t latents_ = 0;
};

/// Weiszfeld iteration from the centroid; stops once an update moves less
/// than `tol` or after 100 iterations.
Eigen::VectorXd geometric_median(const Eigen::MatrixXd& points, double tol = 1e-6);

SaeModel init_model(const SaeConfig& config, const Eigen::MatrixXd& train);
SaeModel init_model(const SaeConfig& config, const corpus::EmbeddingMatrix& train);

/// Indices of the k largest values; ties go to the lower index. Sorted ascending.
std::vector<int> topk_indices(std::span<const double> v, int k);
std::vector<double> topk_mask(std::span<const double> v, int k);

Eigen::VectorXd encode(const SaeModel& model, const Eigen::VectorXd& e);
Eigen::VectorXd decode(const SaeModel& model, const Eigen::VectorXd& z);

/// Per-row latent sets used in one forward pass. Held fixed for backprop.
struct Masks {
    std::vector<std::vector<int>> topk;
    std::vector<std::vector<int>> aux;
};

struct LossParts {
    double total = 0.0;
    double recon = 0.0;  // mean over rows of ||e - e_hat||^2
    double aux = 0.0;    // mean over rows of ||W_dec z_aux - (e - e_hat)||^2
};

struct Gradients {
    Eigen::MatrixXd w_enc;
    Eigen::VectorXd b_enc;
    Eigen::MatrixXd w_dec;
    Eigen::VectorXd b_pre;

    double squared_norm() const;
    void scale(double s);
};

/// `dead[j]` marks latents eligible for the auxiliary path.
Masks compute_masks(const SaeModel& model, const Eigen::MatrixXd& batch, const std::vector<bool>& dead);

/// Total loss with the given masks; fills `grads` when non-null.
LossParts loss_with_masks(const SaeModel& model, const Eigen::MatrixXd& batch, const Masks& masks,
                          Gradients* grads = nullptr);

/// Mean reconstruction loss of the encode/decode path over all rows.
double reconstruction_loss(const SaeModel& model, const Eigen::MatrixXd& data);

struct EpochStats {
    int epoch = 0;
    double train_loss = 0.0;   // mean total loss over the epoch's batches
    double train_recon = 0.0;  // mean reconstruction part
    double val_loss = 0.0;     // reconstruction loss on the validation set
    std::size_t dead_latents = 0;
};

struct TrainResult {
    SaeModel model;  // best-validation snapshot
    std::vector<EpochStats> history;
    double initial_train_loss = 0.0;
    double initial_val_loss = 0.0;
    int best_epoch = 0;
    std::size_t steps = 0;
};

using StepCallback = std::function<void(const SaeModel&, std::size_t step)>;

TrainResult train(SaeModel model, const Eigen::MatrixXd& train_data, const Eigen::MatrixXd& val_data,
                  const StepCallback& on_step = {});

ActivationMatrix compute_activations(const SaeModel& model, const Eigen::MatrixXd& embs);
ActivationMatrix compute_activations(const SaeModel& model, const corpus::EmbeddingMatrix& embs);

/// Column-wise concatenation; block b's latent indices are offset by the
/// latent counts of blocks before it.
ActivationMatrix concat_activations(std::span<const ActivationMatrix> matrices);

}  // namespace hypsae::sae
