#include <doctest.h>

#include <cmath>
#include <limits>

#include "hypsae/sae.hpp"
#include "support/fixtures.hpp"

using namespace hypsae;
using namespace hypsae::sae;

namespace {

Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng) {
    Eigen::MatrixXd m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = rng.normal();
    return m;
}

SaeModel random_model(int d, int m, int k, std::uint64_t seed) {
    Rng rng(seed);
    SaeConfig cfg;
    cfg.M = m;
    cfg.k = k;
    cfg.seed = seed;
    auto model = init_model(cfg, random_matrix(20, d, rng));
    model.b_enc = random_matrix(m, 1, rng).col(0) * 0.1;
    return model;
}

// Oracles written with plain loops over the parameter arrays.
std::vector<double> encode_oracle(const SaeModel& m, const std::vector<double>& e) {
    const int M = static_cast<int>(m.latents()), D = static_cast<int>(m.dim());
    std::vector<double> pre(M);
    for (int j = 0; j < M; ++j) {
        double s = m.b_enc(j);
        for (int d = 0; d < D; ++d) s += m.w_enc(j, d) * (e[d] - m.b_pre(d));
        pre[j] = s;
    }
    std::vector<bool> keep(M, false);
    for (int t = 0; t < m.config.k; ++t) {
        int best = -1;
        for (int j = 0; j < M; ++j) {
            if (!keep[j] && (best < 0 || pre[j] > pre[best])) best = j;
        }
        keep[best] = true;
    }
    std::vector<double> z(M, 0.0);
    for (int j = 0; j < M; ++j) z[j] = keep[j] && pre[j] > 0 ? pre[j] : 0.0;
    return z;
}

std::vector<double> decode_oracle(const SaeModel& m, const std::vector<double>& z) {
    const int M = static_cast<int>(m.latents()), D = static_cast<int>(m.dim());
    std::vector<double> out(D);
    for (int d = 0; d < D; ++d) {
        double s = m.b_pre(d);
        for (int j = 0; j < M; ++j) s += m.w_dec(d, j) * z[j];
        out[d] = s;
    }
    return out;
}

double median_objective(const Eigen::MatrixXd& pts, double x, double y) {
    double s = 0;
    for (Eigen::Index i = 0; i < pts.rows(); ++i) s += std::hypot(pts(i, 0) - x, pts(i, 1) - y);
    return s;
}

/// Sums of k unit atoms from a random dictionary plus Gaussian noise; with
/// `varied` each atom is scaled by U[0.5, 1.5]. The dictionary is written to
/// `atoms` when given.
Eigen::MatrixXd dictionary_data(int n, int d, int m, int k, double sigma, std::uint64_t seed, bool varied = false,
                                Eigen::MatrixXd* atoms = nullptr) {
    Rng rng(seed);
    Eigen::MatrixXd dict = random_matrix(d, m, rng);
    dict.colwise().normalize();
    if (atoms) *atoms = dict;
    Eigen::MatrixXd x(n, d);
    for (int i = 0; i < n; ++i) {
        Eigen::VectorXd row = Eigen::VectorXd::Zero(d);
        for (auto j : rng.sample_without_replacement(static_cast<std::size_t>(m), static_cast<std::size_t>(k))) {
            row += dict.col(static_cast<Eigen::Index>(j)) * (varied ? 0.5 + rng.uniform() : 1.0);
        }
        for (int c = 0; c < d; ++c) row(c) += sigma * rng.normal();
        x.row(i) = row;
    }
    return x;
}

}  // namespace

TEST_CASE("config validation") {
    SaeConfig c;
    CHECK_NOTHROW(c.validate());
    CHECK(c.resolved_k_aux() == 8);
    c.k = 0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c.k = 40;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = SaeConfig{};
    c.learning_rate = 0;
    CHECK_THROWS_AS(c.validate(), ValidationError);
    c = SaeConfig{};
    c.M = 64;
    c.k = 8;
    c.seed = 9;
    const auto back = SaeConfig::from_json(c.to_json());
    CHECK(back.M == 64);
    CHECK(back.k == 8);
    CHECK(back.seed == 9);
}

TEST_CASE("geometric median: trivial cases") {
    Eigen::MatrixXd one(1, 3);
    one << 1, 2, 3;
    CHECK(geometric_median(one).isApprox(one.row(0).transpose()));
    Eigen::MatrixXd cross(4, 2);
    cross << -1, 0, 1, 0, 0, -1, 0, 1;
    CHECK(geometric_median(cross).norm() < 1e-6);
    Eigen::MatrixXd same(5, 2);
    same.rowwise() = Eigen::RowVector2d(0.3, -0.7);
    CHECK((geometric_median(same) - Eigen::Vector2d(0.3, -0.7)).norm() < 1e-9);
}

TEST_CASE("geometric median of 50 random points matches a grid-search oracle") {
    Rng rng(11);
    const Eigen::MatrixXd pts = random_matrix(50, 2, rng);
    const auto gm = geometric_median(pts, 1e-10);
    const double got = median_objective(pts, gm(0), gm(1));
    const double x0 = pts.col(0).minCoeff(), x1 = pts.col(0).maxCoeff();
    const double y0 = pts.col(1).minCoeff(), y1 = pts.col(1).maxCoeff();
    double best = std::numeric_limits<double>::infinity();
    for (int i = 0; i < 200; ++i)
        for (int j = 0; j < 200; ++j)
            best = std::min(best, median_objective(pts, x0 + (x1 - x0) * i / 199.0, y0 + (y1 - y0) * j / 199.0));
    // the grid can only be worse than the true minimizer
    CHECK(got <= best + 1e-6);
}

TEST_CASE("init: unit atoms, tied transpose, seeded, median bias") {
    Rng rng(2);
    const Eigen::MatrixXd data = random_matrix(30, 6, rng);
    SaeConfig cfg;
    cfg.M = 10;
    cfg.k = 3;
    cfg.seed = 5;
    const auto a = init_model(cfg, data);
    const auto b = init_model(cfg, data);
    CHECK(a.max_atom_norm_error() < 1e-6);
    CHECK(a.w_enc == b.w_enc);
    CHECK(a.w_dec == b.w_dec);
    CHECK(a.b_enc.isZero());
    CHECK((a.b_pre - geometric_median(data)).norm() < 1e-9);
    for (Eigen::Index j = 0; j < a.latents(); ++j) {
        const Eigen::VectorXd dir = a.w_enc.row(j).transpose().normalized();
        CHECK((dir - a.w_dec.col(j)).norm() < 1e-9);
    }
    CHECK(std::all_of(a.dead_steps.begin(), a.dead_steps.end(), [](auto s) { return s == 0; }));
    cfg.seed = 6;
    CHECK(init_model(cfg, data).w_enc != a.w_enc);

    Eigen::MatrixXd same(7, 6);
    same.rowwise() = data.row(0);
    CHECK((init_model(cfg, same).b_pre - data.row(0).transpose()).norm() < 1e-9);
    CHECK_THROWS_AS(init_model(cfg, Eigen::MatrixXd(0, 6)), ValidationError);
}

TEST_CASE("top-k mask definition and ties") {
    const std::vector<double> v{3, -1, 5, 2};
    CHECK(topk_mask(v, 2) == std::vector<double>{3, 0, 5, 0});
    CHECK(topk_mask(v, 4) == v);
    const std::vector<double> ties{2, 2, 2};
    CHECK(topk_mask(ties, 1) == std::vector<double>{2, 0, 0});
    CHECK(topk_indices(ties, 2) == std::vector<int>{0, 1});
}

TEST_CASE("encode and decode agree with scalar-loop oracles") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto m = random_model(4, 7, 3, seed);
        Rng rng(seed + 100);
        std::vector<double> e(4);
        for (auto& x : e) x = rng.normal();
        const auto z = encode(m, Eigen::Map<const Eigen::VectorXd>(e.data(), 4));
        const auto zo = encode_oracle(m, e);
        int nnz = 0;
        for (int j = 0; j < 7; ++j) {
            CHECK(z(j) == doctest::Approx(zo[j]).epsilon(1e-5));
            CHECK(z(j) >= 0.0);
            nnz += z(j) > 0;
        }
        CHECK(nnz <= 3);
        std::vector<double> zr(7);
        for (auto& x : zr) x = std::abs(rng.normal());
        const auto d = decode(m, Eigen::Map<const Eigen::VectorXd>(zr.data(), 7));
        const auto dox = decode_oracle(m, zr);
        for (int i = 0; i < 4; ++i) CHECK(d(i) == doctest::Approx(dox[i]).epsilon(1e-5));
    }
}

TEST_CASE("encode/decode trivial cases") {
    auto m = random_model(4, 6, 2, 1);
    m.b_enc.setZero();
    CHECK(encode(m, m.b_pre).isZero());
    CHECK(decode(m, Eigen::VectorXd::Zero(6)) == m.b_dec());
    Eigen::VectorXd unit = Eigen::VectorXd::Zero(6);
    unit(3) = 1.0;
    CHECK(decode(m, unit).isApprox(m.w_dec.col(3) + m.b_pre));
    Eigen::VectorXd bad = m.b_pre;
    bad(0) = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(encode(m, bad), Error);
}

TEST_CASE("analytic gradients match central differences with masks held fixed") {
    // 3-dimensional inputs, 4 latents; every latent dead so the auxiliary path is active
    auto m = random_model(3, 4, 2, 7);
    m.config.w_aux = 0.5;
    m.config.k_aux = 2;
    Rng rng(8);
    const Eigen::MatrixXd batch = random_matrix(5, 3, rng);
    const Masks masks = compute_masks(m, batch, std::vector<bool>(4, true));
    REQUIRE_FALSE(masks.aux.empty());
    Gradients g;
    loss_with_masks(m, batch, masks, &g);

    const double h = 1e-4;
    auto check_param = [&](auto get_param, const auto& analytic) {
        for (Eigen::Index i = 0; i < analytic.size(); ++i) {
            auto plus = m, minus = m;
            get_param(plus).data()[i] += h;
            get_param(minus).data()[i] -= h;
            const double fd = (loss_with_masks(plus, batch, masks).total - loss_with_masks(minus, batch, masks).total) /
                              (2 * h);
            const double an = analytic.data()[i];
            CHECK(std::abs(fd - an) <= 1e-3 * std::max(1.0, std::abs(fd)));
        }
    };
    check_param([](SaeModel& s) -> Eigen::MatrixXd& { return s.w_enc; }, g.w_enc);
    check_param([](SaeModel& s) -> Eigen::VectorXd& { return s.b_enc; }, g.b_enc);
    check_param([](SaeModel& s) -> Eigen::MatrixXd& { return s.w_dec; }, g.w_dec);
    check_param([](SaeModel& s) -> Eigen::VectorXd& { return s.b_pre; }, g.b_pre);
}

TEST_CASE("aux term vanishes when no latent is dead or its weight is zero") {
    auto m = random_model(5, 8, 3, 3);
    Rng rng(4);
    const Eigen::MatrixXd batch = random_matrix(16, 5, rng);
    const auto live = compute_masks(m, batch, std::vector<bool>(8, false));
    const auto parts = loss_with_masks(m, batch, live);
    CHECK(parts.aux == 0.0);
    CHECK(parts.total == doctest::Approx(reconstruction_loss(m, batch)).epsilon(1e-12));
    m.config.w_aux = 0.0;
    const auto dead = compute_masks(m, batch, std::vector<bool>(8, true));
    CHECK(loss_with_masks(m, batch, dead).total == doctest::Approx(parts.recon).epsilon(1e-12));
}

TEST_CASE("training lowers loss, keeps atoms unit norm, and is deterministic") {
    const Eigen::MatrixXd data = dictionary_data(3000, 16, 16, 2, 0.01, 21);
    const Eigen::MatrixXd train_x = data.topRows(2500), val_x = data.bottomRows(500);
    SaeConfig cfg;
    cfg.M = 16;
    cfg.k = 2;
    cfg.batch_size = 128;
    cfg.max_epochs = 15;
    cfg.learning_rate = 2e-3;
    cfg.seed = 4;
    double worst_norm = 0.0;
    const auto r1 = train(init_model(cfg, train_x), train_x, val_x,
                          [&](const SaeModel& m, std::size_t) { worst_norm = std::max(worst_norm, m.max_atom_norm_error()); });
    CHECK(worst_norm < 1e-6);
    REQUIRE_FALSE(r1.history.empty());
    CHECK(r1.history.back().train_loss < r1.initial_train_loss);
    CHECK(reconstruction_loss(r1.model, val_x) < r1.initial_val_loss);
    const auto r2 = train(init_model(cfg, train_x), train_x, val_x);
    REQUIRE(r1.history.size() == r2.history.size());
    for (std::size_t i = 0; i < r1.history.size(); ++i) {
        CHECK(r1.history[i].train_loss == r2.history[i].train_loss);
        CHECK(r1.history[i].val_loss == r2.history[i].val_loss);
    }
}

TEST_CASE("dictionary recovery up to the bias shift of equal coefficients") {
    auto matched = [](const Eigen::MatrixXd& truth, const Eigen::MatrixXd& learned) {
        const Eigen::MatrixXd cos = truth.transpose() * learned;
        int n = 0;
        for (Eigen::Index j = 0; j < cos.rows(); ++j) n += cos.row(j).cwiseAbs().maxCoeff() >= 0.9 ? 1 : 0;
        return n;
    };
    SaeConfig cfg;
    cfg.M = 32;
    cfg.k = 4;
    cfg.batch_size = 256;
    cfg.learning_rate = 2e-3;
    cfg.max_epochs = 60;
    cfg.seed = 3;
    for (const bool varied : {true, false}) {
        CAPTURE(varied);
        Eigen::MatrixXd atoms;
        const Eigen::MatrixXd data = dictionary_data(20000, 64, 32, 4, 0.01, 7, varied, &atoms);
        const Eigen::MatrixXd train_x = data.topRows(16000), val_x = data.bottomRows(4000);
        const auto model = train(init_model(cfg, train_x), train_x, val_x).model;
        if (varied) {
            CHECK(matched(atoms, model.w_dec) >= 26);
        } else {
            // a_j + v with bias b - 4v reconstructs as well as a_j with b
            Eigen::MatrixXd shifted = atoms;
            for (Eigen::Index j = 0; j < shifted.cols(); ++j) shifted.col(j) = (atoms.col(j) - model.b_pre / 4.0).normalized();
            CHECK(matched(shifted, model.w_dec) >= 26);
        }
    }
}

TEST_CASE("divergence is reported") {
    Rng rng(1);
    Eigen::MatrixXd data = random_matrix(64, 4, rng);
    SaeConfig cfg;
    cfg.M = 4;
    cfg.k = 2;
    cfg.batch_size = 16;
    auto model = init_model(cfg, data);
    data(3, 1) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(train(model, data, data.topRows(8)), Error);
}

TEST_CASE("activations match encode and satisfy sparsity") {
    const auto m = random_model(6, 12, 3, 5);
    Rng rng(6);
    Eigen::MatrixXd embs = random_matrix(10, 6, rng);
    embs.row(4) = m.b_pre.transpose();
    auto m0 = m;
    m0.b_enc.setZero();
    const auto acts = compute_activations(m0, embs);
    CHECK(acts.rows() == 10);
    CHECK(acts.latents() == 12);
    CHECK(acts.row(4).empty());
    for (std::size_t i = 0; i < 10; ++i) {
        CHECK(acts.row(i).size() <= 3);
        const auto z = encode(m0, embs.row(static_cast<Eigen::Index>(i)).transpose());
        for (std::size_t j = 0; j < 12; ++j) CHECK(acts.at(i, j) == z(static_cast<Eigen::Index>(j)));
        for (const auto& [lat, v] : acts.row(i)) CHECK(v > 0.0);
    }
}

TEST_CASE("concatenation offsets latent indices") {
    ActivationMatrix a(2, 8), b(2, 4);
    a.set_row(0, {{1, 0.5}, {7, 1.0}});
    b.set_row(0, {{0, 2.0}});
    b.set_row(1, {{3, 1.5}});
    const std::vector<ActivationMatrix> one{a};
    const auto id = concat_activations(one);
    CHECK(id.to_dense() == a.to_dense());
    const std::vector<ActivationMatrix> two{a, b};
    const auto c = concat_activations(two);
    CHECK(c.latents() == 12);
    CHECK(c.row(0).size() == 3);
    CHECK(c.at(0, 8) == 2.0);
    CHECK(c.at(1, 11) == 1.5);
    CHECK(c.at(0, 7) == 1.0);
    const std::vector<ActivationMatrix> bad{a, ActivationMatrix(3, 4)};
    CHECK_THROWS_AS(concat_activations(bad), ValidationError);
}

TEST_CASE("checkpoint round trip") {
    const auto dir = fixtures::scratch("sae_ckpt");
    auto m = random_model(5, 6, 2, 12);
    m.dead_steps[2] = 77;
    m.save(dir / "m.bin");
    const auto back = SaeModel::load(dir / "m.bin");
    // stored as f32
    auto f32 = [](const auto& x) { return x.template cast<float>().template cast<double>().eval(); };
    CHECK(back.w_enc == f32(m.w_enc));
    CHECK(back.w_dec == f32(m.w_dec));
    CHECK(back.b_enc == f32(m.b_enc));
    CHECK(back.b_pre == f32(m.b_pre));
    CHECK(back.dead_steps == m.dead_steps);
    CHECK(back.config.k == 2);
    fixtures::write_text(dir / "junk.bin", "nope");
    CHECK_THROWS_AS(SaeModel::load(dir / "junk.bin"), Error);
}
