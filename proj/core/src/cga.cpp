// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include "hisam/cga.hpp"

#include <cmath>

#include "hisam/checkpoint.hpp"
#include "hisam/common.hpp"
#include "hisam/rng.hpp"

namespace hisam::cga {

using ag::Var;

Eigen::VectorXd project(const Eigen::MatrixXd& W, const Eigen::VectorXd& raw) {
    if (raw.size() != W.rows())
        throw Error("project: raw dimensionality " + std::to_string(raw.size()) +
                    " does not match head input " + std::to_string(W.rows()));
    Eigen::VectorXd out = W.transpose() * raw;
    double n = out.norm();
    if (n < 1e-12) throw Error("project: degenerate projection (norm ~ 0)");
    return out / n;
}

double gram_volume(const std::vector<Eigen::VectorXd>& vectors) {
    const auto k = static_cast<long>(vectors.size());
    Eigen::MatrixXd g(k, k);
    for (long a = 0; a < k; ++a)
        for (long b = 0; b < k; ++b) g(a, b) = vectors[static_cast<size_t>(a)].dot(vectors[static_cast<size_t>(b)]);
    return std::sqrt(std::max(g.determinant(), 0.0));
}

namespace {

void check_cfg(const AlignConfig& cfg) {
    if (cfg.tau <= 0.0) throw ConfigError("align: tau must be > 0");
    if (cfg.d < 2) throw ConfigError("align: d must be >= 2");
}

// Vol(a_k, r_i): Gram volume of item k's anchor vector together with
// item i's non-anchor modality vectors.
Var vol_term(const std::vector<std::vector<Var>>& z, int k, int i, int anchor) {
    std::vector<Var> rows;
    rows.push_back(z[static_cast<size_t>(k)][static_cast<size_t>(anchor)]);
    for (size_t j = 0; j < z[static_cast<size_t>(i)].size(); ++j)
        if (static_cast<int>(j) != anchor)
            rows.push_back(z[static_cast<size_t>(i)][j]);
    Var zm = ag::concat_rows(rows);
    Var gram = ag::matmul(zm, ag::transpose(zm));
    return ag::sqrt_det_psd(gram);
}

}  // namespace

Var alignment_loss_graph(const std::vector<std::vector<Var>>& z_rows,
                         const AlignConfig& cfg) {
    check_cfg(cfg);
    const int b = static_cast<int>(z_rows.size());
    // vols(k, i) = Vol(a_k, r_i)
    std::vector<Var> rows;
    for (int k = 0; k < b; ++k) {
        std::vector<Var> cols;
        for (int i = 0; i < b; ++i)
            cols.push_back(vol_term(z_rows, k, i, cfg.anchor));
        rows.push_back(ag::concat_cols(cols));
    }
    Var vols = ag::concat_rows(rows);
    Var logits = ag::scale(vols, -1.0 / cfg.tau);
    // D2A: softmax over k (anchors) for fixed data i -> columns.
    Var lsm_d2a = ag::log_softmax_rows(ag::transpose(logits));
    // A2D: softmax over k (data sets) for fixed anchor i -> rows.
    Var lsm_a2d = ag::log_softmax_rows(logits);
    Var acc = ag::constant(0.0);
    for (int i = 0; i < b; ++i) {
        acc = ag::add(acc, ag::pick(lsm_d2a, i, i));
        acc = ag::add(acc, ag::pick(lsm_a2d, i, i));
    }
    return ag::scale(acc, -0.5 / static_cast<double>(b));
}

double alignment_loss(const std::vector<ModalEmbeddingSet>& batch,
                      const AlignConfig& cfg) {
    std::vector<std::vector<Var>> z_rows;
    for (const auto& set : batch) {
        std::vector<Var> mods;
        for (const auto& v : set.z)
            mods.push_back(ag::constant(Eigen::MatrixXd(v.transpose())));
        z_rows.push_back(std::move(mods));
    }
    return alignment_loss_graph(z_rows, cfg)->scalar();
}

ProjectionHeads init_heads(const std::vector<int>& dims, int d, uint64_t seed) {
    Rng rng(stage_seed(seed, "align-init"));
    ProjectionHeads heads;
    for (int dj : dims) {
        double s = 1.0 / std::sqrt(static_cast<double>(dj));
        Eigen::MatrixXd w(dj, d);
        for (long r = 0; r < w.rows(); ++r)
            for (long c = 0; c < w.cols(); ++c) w(r, c) = rng.uniform(-s, s);
        heads.W.push_back(std::move(w));
    }
    return heads;
}

std::vector<ModalEmbeddingSet> apply_heads(const ingest::Corpus& corpus,
                                           const ProjectionHeads& heads) {
    std::vector<ModalEmbeddingSet> out;
    out.reserve(corpus.items.size());
    for (const auto& rec : corpus.items) {
        ModalEmbeddingSet set;
        set.item_id = rec.item_id;
        for (size_t j = 0; j < rec.vectors.size(); ++j)
            set.z.push_back(project(heads.W[j], rec.vectors[j]));
        out.push_back(std::move(set));
    }
    return out;
}

AlignResult train_alignment(const ingest::Corpus& corpus,
                            const AlignConfig& cfg) {
    check_cfg(cfg);
    if (corpus.items.empty()) throw Error("align: empty corpus");
    if (corpus.n_modalities() < 2)
        throw Error("align: need at least 2 modalities");
    if (cfg.anchor < 0 || cfg.anchor >= corpus.n_modalities())
        throw ConfigError("align: anchor modality out of range");

    ProjectionHeads init = init_heads(corpus.dims, cfg.d, cfg.seed);
    std::vector<Var> params;
    for (auto& w : init.W) params.push_back(ag::param(w));

    Rng rng(stage_seed(cfg.seed, "align-batches"));
    ag::Adam opt(cfg.lr);
    std::vector<double> curve;

    const int n = static_cast<int>(corpus.items.size());
    const int b = std::min(cfg.batch, n);
    for (int step = 0; step < cfg.steps; ++step) {
        std::vector<std::vector<Var>> z_rows;
        for (int s = 0; s < b; ++s) {
            int idx = static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n)));
            const auto& rec = corpus.items[static_cast<size_t>(idx)];
            std::vector<Var> mods;
            for (size_t j = 0; j < rec.vectors.size(); ++j) {
                Var raw = ag::constant(
                    Eigen::MatrixXd(rec.vectors[j].transpose()));
                mods.push_back(ag::normalize_rows(
                    ag::matmul(raw, params[j]), 1e-12));
            }
            z_rows.push_back(std::move(mods));
        }
        Var loss = alignment_loss_graph(z_rows, cfg);
        double lv = loss->scalar();
        if (!std::isfinite(lv))
            throw Error("align: non-finite loss at step " +
                        std::to_string(step));
        curve.push_back(lv);
        ag::Adam::zero_grad(params);
        ag::backward(loss);
        opt.step(params);
    }

    AlignResult result;
    for (const auto& p : params) result.heads.W.push_back(p->value);
    result.aligned = apply_heads(corpus, result.heads);
    result.curve = std::move(curve);
    return result;
}

void save_heads(const ProjectionHeads& heads, const std::string& path) {
    std::vector<ckpt::NamedTensor> tensors;
    for (size_t j = 0; j < heads.W.size(); ++j)
        tensors.emplace_back("head." + std::to_string(j), heads.W[j]);
    ckpt::save(path, tensors);
}

ProjectionHeads load_heads(const std::string& path) {
    ProjectionHeads heads;
    for (const auto& [name, m] : ckpt::load(path)) {
        (void)name;
        heads.W.push_back(m);
    }
    return heads;
}

}  // namespace hisam::cga
