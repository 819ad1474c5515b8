// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include "hisam/dmrq.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "hisam/checkpoint.hpp"
#include "hisam/common.hpp"
#include "hisam/rng.hpp"

namespace hisam::dmrq {

using ag::Var;
using Eigen::MatrixXd;
using Eigen::VectorXd;

void DmrqConfig::validate(int n_modalities) const {
    if (n_sh < 1) throw ConfigError("dmrq: n_sh must be >= 1");
    if (v < 2) throw ConfigError("dmrq: codebook size must be >= 2");
    if (h < 1 || d % h != 0)
        throw ConfigError("dmrq: h must divide d (H * d_h = d)");
    if (beta < 0 || lambda < 0 || gamma < 0)
        throw ConfigError("dmrq: beta, lambda, gamma must be >= 0");
    if (n_modalities < 1) throw ConfigError("dmrq: need >= 1 modality");
}

std::vector<Var> VariationalEstimator::params() const {
    return {mu_w1, mu_b1, mu_w2, mu_b2, sg_w1, sg_b1, sg_w2, sg_b2};
}

std::vector<Var> CodebookStack::main_params() const {
    std::vector<Var> p(shared);
    p.insert(p.end(), specific.begin(), specific.end());
    if (cfg.learned_fuse) p.push_back(fuse_w);
    p.push_back(psgr_wq);
    p.push_back(psgr_wk);
    p.push_back(psgr_wv);
    p.push_back(psgr_wo);
    return p;
}

std::vector<Var> CodebookStack::estimator_params() const {
    std::vector<Var> p;
    for (const auto& e : estimators) {
        auto ep = e.params();
        p.insert(p.end(), ep.begin(), ep.end());
    }
    return p;
}

namespace {

MatrixXd rand_matrix(Rng& rng, long rows, long cols, double s) {
    MatrixXd m(rows, cols);
    for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c) m(r, c) = rng.uniform(-s, s);
    return m;
}

VariationalEstimator init_estimator(int d, Rng& rng) {
    double s = 1.0 / std::sqrt(static_cast<double>(d));
    VariationalEstimator e;
    e.mu_w1 = ag::param(rand_matrix(rng, d, d, s));
    e.mu_b1 = ag::param(MatrixXd::Zero(1, d));
    e.mu_w2 = ag::param(rand_matrix(rng, d, d, s));
    e.mu_b2 = ag::param(MatrixXd::Zero(1, d));
    e.sg_w1 = ag::param(rand_matrix(rng, d, d, s));
    e.sg_b1 = ag::param(MatrixXd::Zero(1, d));
    e.sg_w2 = ag::param(rand_matrix(rng, d, d, 0.1 * s));
    e.sg_b2 = ag::param(MatrixXd::Zero(1, d));
    return e;
}

// mu and log-variance heads of the estimator, batched over rows of z.
std::pair<Var, Var> estimator_heads(const VariationalEstimator& e,
                                    const Var& z) {
    Var hm = ag::tanh_(ag::add_row_broadcast(ag::matmul(z, e.mu_w1), e.mu_b1));
    Var mu = ag::add_row_broadcast(ag::matmul(hm, e.mu_w2), e.mu_b2);
    Var hs = ag::tanh_(ag::add_row_broadcast(ag::matmul(z, e.sg_w1), e.sg_b1));
    Var lv = ag::add_row_broadcast(ag::matmul(hs, e.sg_w2), e.sg_b2);
    return {mu, lv};
}

}  // namespace

CodebookStack init_stack(const DmrqConfig& cfg, int n_modalities,
                         uint64_t seed) {
    cfg.validate(n_modalities);
    Rng rng(stage_seed(seed, "dmrq-init"));
    CodebookStack stack;
    stack.cfg = cfg;
    stack.n_m = n_modalities;
    double s = 1.0 / std::sqrt(static_cast<double>(cfg.d));
    for (int k = 0; k < cfg.n_sh; ++k)
        stack.shared.push_back(ag::param(rand_matrix(rng, cfg.v, cfg.d, s)));
    for (int j = 0; j < n_modalities; ++j)
        stack.specific.push_back(ag::param(rand_matrix(rng, cfg.v, cfg.d, s)));
    // Learned fuse starts at the arithmetic mean: stacked scaled identities.
    MatrixXd fw = MatrixXd::Zero(static_cast<long>(n_modalities) * cfg.d, cfg.d);
    for (int j = 0; j < n_modalities; ++j)
        fw.block(static_cast<long>(j) * cfg.d, 0, cfg.d, cfg.d) =
            MatrixXd::Identity(cfg.d, cfg.d) / static_cast<double>(n_modalities);
    stack.fuse_w = ag::param(std::move(fw));
    stack.psgr_wq = ag::param(rand_matrix(rng, cfg.d, cfg.d, s));
    stack.psgr_wk = ag::param(rand_matrix(rng, cfg.d, cfg.d, s));
    stack.psgr_wv = ag::param(rand_matrix(rng, cfg.d, cfg.d, s));
    stack.psgr_wo = ag::param(rand_matrix(rng, cfg.d, cfg.d, s));
    for (int j = 0; j < n_modalities; ++j)
        stack.estimators.push_back(init_estimator(cfg.d, rng));
    return stack;
}

int nearest_code(const VectorXd& x, const MatrixXd& entries) {
    int best = 0;
    double best_d = (entries.row(0).transpose() - x).squaredNorm();
    for (long v = 1; v < entries.rows(); ++v) {
        double dist = (entries.row(v).transpose() - x).squaredNorm();
        if (dist < best_d) {  // ties keep the lowest index
            best_d = dist;
            best = static_cast<int>(v);
        }
    }
    return best;
}

VectorXd fuse_value(const std::vector<VectorXd>& z, const CodebookStack& stack) {
    if (stack.cfg.learned_fuse) {
        VectorXd cat(static_cast<long>(z.size()) * stack.cfg.d);
        for (size_t j = 0; j < z.size(); ++j)
            cat.segment(static_cast<long>(j) * stack.cfg.d, stack.cfg.d) = z[j];
        return stack.fuse_w->value.transpose() * cat;
    }
    VectorXd f = VectorXd::Zero(stack.cfg.d);
    for (const auto& zj : z) f += zj;
    return f / static_cast<double>(z.size());
}

RqResult residual_quantize_shared(const VectorXd& f,
                                  const CodebookStack& stack) {
    RqResult out;
    VectorXd r = f;
    out.reconstruction = VectorXd::Zero(f.size());
    for (const auto& book : stack.shared) {
        int code = nearest_code(r, book->value);
        out.codes.push_back(code);
        VectorXd e = book->value.row(code).transpose();
        out.reconstruction += e;
        r -= e;
    }
    out.residual = std::move(r);
    return out;
}

VectorXd psgr_recover(const VectorXd& residual, const VectorXd& probe,
                      const CodebookStack& stack) {
    const int h = stack.cfg.h;
    const int dh = stack.cfg.d_h();
    VectorXd kt = stack.psgr_wk->value.transpose() * residual;
    VectorXd vt = stack.psgr_wv->value.transpose() * residual;
    VectorXd q = stack.psgr_wq->value.transpose() * probe;
    VectorXd scores(h);
    for (int i = 0; i < h; ++i)
        scores(i) = q.segment(i * dh, dh).dot(kt.segment(i * dh, dh)) /
                    std::sqrt(static_cast<double>(dh));
    VectorXd alpha = (scores.array() - scores.maxCoeff()).exp();
    alpha /= alpha.sum();
    VectorXd ctx(stack.cfg.d);
    for (int i = 0; i < h; ++i)
        ctx.segment(i * dh, dh) = alpha(i) * vt.segment(i * dh, dh);
    return stack.psgr_wo->value.transpose() * ctx;
}

std::pair<int, VectorXd> quantize_specific(const VectorXd& z_sp,
                                           const MatrixXd& entries) {
    int code = nearest_code(z_sp, entries);
    return {code, entries.row(code).transpose()};
}

// ---------------------------------------------------------------------------
// vCLUB
// ---------------------------------------------------------------------------

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

// Per-k column of log q(x_l | z_k) over all l, as a B x 1 graph node.
Var logq_column(const Var& x, const Var& mu, const Var& lv, int k) {
    const long b = x->value.rows();
    const long d = x->value.cols();
    Var mu_k = ag::slice_rows(mu, k, 1);
    Var lv_k = ag::slice_rows(lv, k, 1);
    Var inv_k = ag::exp_(ag::neg(lv_k));
    Var diff = ag::add_row_broadcast(x, ag::neg(mu_k));
    Var weighted = ag::scale_cols(ag::mul(diff, diff), inv_k);
    Var ones = ag::constant(MatrixXd::Ones(d, 1));
    Var rs = ag::matmul(weighted, ones);  // B x 1
    Var ones_b = ag::constant(MatrixXd::Ones(b, 1));
    Var lv_sum = ag::sum_all(lv_k);
    Var total = ag::add(rs, ag::matmul(ones_b, lv_sum));
    total = ag::add_scalar(total, static_cast<double>(d) * kLog2Pi);
    return ag::scale(total, -0.5);
}

}  // namespace

Var vclub_graph(const Var& z_sh, const Var& z_sp,
                const VariationalEstimator& est) {
    const long b = z_sh->value.rows();
    auto [mu, lv] = estimator_heads(est, z_sh);
    Var diag = ag::constant(0.0);
    Var cross = ag::constant(0.0);
    for (long k = 0; k < b; ++k) {
        Var col = logq_column(z_sp, mu, lv, static_cast<int>(k));
        diag = ag::add(diag, ag::pick(col, static_cast<int>(k), 0));
        cross = ag::add(cross, ag::sum_all(col));
    }
    double bd = static_cast<double>(b);
    return ag::sub(ag::scale(diag, 1.0 / bd), ag::scale(cross, 1.0 / (bd * bd)));
}

double vclub_estimate(const MatrixXd& z_sh, const MatrixXd& z_sp,
                      const VariationalEstimator& est) {
    return vclub_graph(ag::constant(z_sh), ag::constant(z_sp), est)->scalar();
}

void fit_estimator_step(VariationalEstimator& est, const MatrixXd& z_sh,
                        const MatrixXd& z_sp, ag::Adam& opt) {
    if (z_sh.rows() == 0) throw Error("fit_estimator_step: empty batch");
    auto [mu, lv] = estimator_heads(est, ag::constant(z_sh));
    Var x = ag::constant(z_sp);
    Var diff = ag::sub(x, mu);
    Var nll = ag::scale(
        ag::add(ag::sum_all(ag::mul(ag::mul(diff, diff), ag::exp_(ag::neg(lv)))),
                ag::sum_all(lv)),
        0.5);  // negative log-likelihood up to a constant
    auto params = est.params();
    ag::Adam::zero_grad(params);
    ag::backward(nll);
    opt.step(params);
}

// ---------------------------------------------------------------------------
// DMRQ loss
// ---------------------------------------------------------------------------

namespace {

Var row_const(const VectorXd& v) {
    return ag::constant(MatrixXd(v.transpose()));
}

Var sum_sq(const Var& a) { return ag::sum_all(ag::mul(a, a)); }

// x + const(q - x_snap): value matches the quantized q at the base point,
// gradient flows straight through into x.
Var st_shift(const Var& x, const VectorXd& q, const VectorXd& x_snap) {
    return ag::add(x, row_const(q - x_snap));
}

Var fuse_graph(const std::vector<Var>& z_rows, const CodebookStack& stack) {
    if (stack.cfg.learned_fuse)
        return ag::matmul(ag::concat_cols(z_rows), stack.fuse_w);
    Var acc = z_rows[0];
    for (size_t j = 1; j < z_rows.size(); ++j) acc = ag::add(acc, z_rows[j]);
    return ag::scale(acc, 1.0 / static_cast<double>(z_rows.size()));
}

Var psgr_graph(const Var& residual, const Var& probe,
               const CodebookStack& stack) {
    const int h = stack.cfg.h;
    const int dh = stack.cfg.d_h();
    Var kt = ag::matmul(residual, stack.psgr_wk);
    Var vt = ag::matmul(residual, stack.psgr_wv);
    Var q = ag::matmul(probe, stack.psgr_wq);
    std::vector<Var> score_parts;
    for (int i = 0; i < h; ++i) {
        Var qi = ag::slice_cols(q, i * dh, dh);
        Var ki = ag::slice_cols(kt, i * dh, dh);
        score_parts.push_back(ag::scale(
            ag::sum_all(ag::mul(qi, ki)),
            1.0 / std::sqrt(static_cast<double>(dh))));
    }
    Var alpha = ag::softmax_rows(ag::concat_cols(score_parts));  // 1 x h
    std::vector<Var> ctx_parts;
    for (int i = 0; i < h; ++i) {
        Var ai = ag::slice_cols(alpha, i, 1);  // 1 x 1
        Var vi = ag::slice_cols(vt, i * dh, dh);
        ctx_parts.push_back(ag::matmul(ai, vi));
    }
    return ag::matmul(ag::concat_cols(ctx_parts), stack.psgr_wo);
}

LossGraph loss_graph_impl(const std::vector<cga::ModalEmbeddingSet>& batch,
                          const CodebookStack& stack,
                          const LossSnapshots* frozen) {
    const auto& cfg = stack.cfg;
    const int n_m = stack.n_m;
    const double bsz = static_cast<double>(batch.size());

    LossGraph g;
    g.shared_hits.assign(static_cast<size_t>(cfg.n_sh),
                         std::vector<int>(static_cast<size_t>(cfg.v), 0));
    g.specific_hits.assign(static_cast<size_t>(n_m),
                           std::vector<int>(static_cast<size_t>(cfg.v), 0));

    Var recon = ag::constant(0.0);
    Var vq_sh = ag::constant(0.0);
    Var vq_sp = ag::constant(0.0);

    std::vector<Var> sh_rows, sp_rows_flat;  // for the MI term
    std::vector<std::vector<Var>> sp_rows(static_cast<size_t>(n_m));

    for (size_t i = 0; i < batch.size(); ++i) {
        const auto& set = batch[i];
        std::vector<Var> z_rows;
        for (const auto& zj : set.z) z_rows.push_back(row_const(zj));
        Var f = fuse_graph(z_rows, stack);
        VectorXd f_snap =
            frozen ? frozen->f_snaps[i] : VectorXd(f->value.row(0).transpose());

        Var r = f;
        VectorXd zhat_sh = VectorXd::Zero(cfg.d);
        for (int k = 0; k < cfg.n_sh; ++k) {
            const auto& book = stack.shared[static_cast<size_t>(k)];
            VectorXd r_snap = frozen ? frozen->r_snaps[i][static_cast<size_t>(k)]
                                     : VectorXd(r->value.row(0).transpose());
            int code = frozen ? frozen->sh_codes[i][static_cast<size_t>(k)]
                              : nearest_code(r_snap, book->value);
            g.shared_hits[static_cast<size_t>(k)][static_cast<size_t>(code)]++;
            VectorXd e_snap = frozen ? frozen->e_snaps[i][static_cast<size_t>(k)]
                                     : VectorXd(book->value.row(code).transpose());
            Var e_var = ag::gather_rows(book, {code});
            vq_sh = ag::add(vq_sh, sum_sq(ag::sub(row_const(r_snap), e_var)));
            vq_sh = ag::add(vq_sh, ag::scale(sum_sq(ag::sub(r, row_const(e_snap))),
                                             cfg.gamma));
            zhat_sh += e_snap;
            r = ag::sub(r, row_const(e_snap));
        }
        Var zhat_sh_st = st_shift(f, zhat_sh, f_snap);
        sh_rows.push_back(zhat_sh_st);

        for (int j = 0; j < n_m; ++j) {
            Var z_sp = psgr_graph(r, z_rows[static_cast<size_t>(j)], stack);
            VectorXd zsp_snap = frozen
                                    ? frozen->zsp_snaps[i][static_cast<size_t>(j)]
                                    : VectorXd(z_sp->value.row(0).transpose());
            const auto& book = stack.specific[static_cast<size_t>(j)];
            int code = frozen ? frozen->sp_codes[i][static_cast<size_t>(j)]
                              : nearest_code(zsp_snap, book->value);
            g.specific_hits[static_cast<size_t>(j)][static_cast<size_t>(code)]++;
            VectorXd e_snap = frozen ? frozen->esp_snaps[i][static_cast<size_t>(j)]
                                     : VectorXd(book->value.row(code).transpose());
            Var e_var = ag::gather_rows(book, {code});
            vq_sp = ag::add(vq_sp, sum_sq(ag::sub(row_const(zsp_snap), e_var)));
            vq_sp = ag::add(vq_sp, ag::scale(sum_sq(ag::sub(z_sp, row_const(e_snap))),
                                             cfg.gamma));
            Var zhat_sp_st = st_shift(z_sp, e_snap, zsp_snap);
            recon = ag::add(
                recon, sum_sq(ag::sub(z_rows[static_cast<size_t>(j)],
                                      ag::add(zhat_sh_st, zhat_sp_st))));
            sp_rows[static_cast<size_t>(j)].push_back(z_sp);
        }
    }

    Var mi = ag::constant(0.0);
    if (cfg.lambda > 0.0) {
        Var sh_mat = ag::concat_rows(sh_rows);
        for (int j = 0; j < n_m; ++j) {
            Var sp_mat = ag::concat_rows(sp_rows[static_cast<size_t>(j)]);
            mi = ag::add(mi, vclub_graph(sh_mat, sp_mat,
                                         stack.estimators[static_cast<size_t>(j)]));
        }
    }

    g.reconstruction = ag::scale(recon, 1.0 / bsz);
    g.vq_sh = ag::scale(vq_sh, 1.0 / bsz);
    g.vq_sp = ag::scale(vq_sp, 1.0 / bsz);
    g.mi = mi;
    g.total = ag::add(
        g.reconstruction,
        ag::add(ag::scale(ag::add(g.vq_sh, g.vq_sp), cfg.beta),
                ag::scale(g.mi, cfg.lambda)));
    return g;
}

}  // namespace

LossSnapshots capture_snapshots(const std::vector<cga::ModalEmbeddingSet>& batch,
                                const CodebookStack& stack) {
    LossSnapshots fr;
    for (const auto& set : batch) {
        VectorXd f = fuse_value(set.z, stack);
        fr.f_snaps.push_back(f);
        std::vector<int> codes;
        std::vector<VectorXd> r_snaps, e_snaps;
        VectorXd r = f;
        for (const auto& book : stack.shared) {
            r_snaps.push_back(r);
            int code = nearest_code(r, book->value);
            codes.push_back(code);
            VectorXd e = book->value.row(code).transpose();
            e_snaps.push_back(e);
            r -= e;
        }
        fr.sh_codes.push_back(std::move(codes));
        fr.r_snaps.push_back(std::move(r_snaps));
        fr.e_snaps.push_back(std::move(e_snaps));
        std::vector<int> sp_codes;
        std::vector<VectorXd> zsp_snaps, esp_snaps;
        for (int j = 0; j < stack.n_m; ++j) {
            VectorXd z_sp = psgr_recover(r, set.z[static_cast<size_t>(j)], stack);
            auto [code, e] = quantize_specific(
                z_sp, stack.specific[static_cast<size_t>(j)]->value);
            sp_codes.push_back(code);
            zsp_snaps.push_back(std::move(z_sp));
            esp_snaps.push_back(std::move(e));
        }
        fr.sp_codes.push_back(std::move(sp_codes));
        fr.zsp_snaps.push_back(std::move(zsp_snaps));
        fr.esp_snaps.push_back(std::move(esp_snaps));
    }
    return fr;
}

LossGraph dmrq_loss_graph(const std::vector<cga::ModalEmbeddingSet>& batch,
                          const CodebookStack& stack) {
    stack.cfg.validate(stack.n_m);
    if (batch.empty()) throw Error("dmrq_loss: empty batch");
    return loss_graph_impl(batch, stack, nullptr);
}

LossGraph dmrq_loss_graph(const std::vector<cga::ModalEmbeddingSet>& batch,
                          const CodebookStack& stack,
                          const LossSnapshots& snaps) {
    stack.cfg.validate(stack.n_m);
    if (batch.empty()) throw Error("dmrq_loss: empty batch");
    return loss_graph_impl(batch, stack, &snaps);
}

LossComponents dmrq_loss(const std::vector<cga::ModalEmbeddingSet>& batch,
                         const CodebookStack& stack) {
    LossGraph g = dmrq_loss_graph(batch, stack);
    LossComponents c;
    c.reconstruction = g.reconstruction->scalar();
    c.vq_sh = g.vq_sh->scalar();
    c.vq_sp = g.vq_sp->scalar();
    c.mi = g.mi->scalar();
    c.total = g.total->scalar();
    return c;
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

namespace {

// k-means++ seeding only (no Lloyd iterations).
MatrixXd kmeanspp(const std::vector<VectorXd>& points, int v, int d, Rng& rng) {
    MatrixXd entries(v, d);
    if (points.empty()) {
        for (long r = 0; r < entries.rows(); ++r)
            for (long c = 0; c < entries.cols(); ++c)
                entries(r, c) = 0.01 * rng.gaussian();
        return entries;
    }
    size_t first = rng.uniform_int(points.size());
    entries.row(0) = points[first].transpose();
    std::vector<double> dist2(points.size());
    for (size_t p = 0; p < points.size(); ++p)
        dist2[p] = (points[p] - VectorXd(entries.row(0).transpose())).squaredNorm();
    for (int k = 1; k < v; ++k) {
        double total = std::accumulate(dist2.begin(), dist2.end(), 0.0);
        size_t chosen;
        if (total <= 1e-300) {
            chosen = rng.uniform_int(points.size());
        } else {
            double t = rng.uniform() * total;
            double acc = 0.0;
            chosen = points.size() - 1;
            for (size_t p = 0; p < points.size(); ++p) {
                acc += dist2[p];
                if (acc >= t) {
                    chosen = p;
                    break;
                }
            }
        }
        entries.row(k) = points[chosen].transpose();
        // Deduplicate coincident seeds with a small jitter.
        if (dist2[chosen] <= 1e-300)
            for (int c = 0; c < d; ++c) entries(k, c) += 1e-4 * rng.gaussian();
        for (size_t p = 0; p < points.size(); ++p)
            dist2[p] = std::min(
                dist2[p],
                (points[p] - VectorXd(entries.row(k).transpose())).squaredNorm());
    }
    return entries;
}

void seed_codebooks(CodebookStack& stack,
                    const std::vector<cga::ModalEmbeddingSet>& aligned,
                    Rng& rng) {
    const auto& cfg = stack.cfg;
    size_t sample = std::min(aligned.size(),
                             static_cast<size_t>(std::max(4 * cfg.v, 256)));
    std::vector<VectorXd> residuals;
    residuals.reserve(sample);
    for (size_t i = 0; i < sample; ++i)
        residuals.push_back(fuse_value(aligned[i].z, stack));
    for (int k = 0; k < cfg.n_sh; ++k) {
        auto& book = stack.shared[static_cast<size_t>(k)];
        book->value = kmeanspp(residuals, cfg.v, cfg.d, rng);
        for (auto& r : residuals) {
            int code = nearest_code(r, book->value);
            r -= book->value.row(code).transpose();
        }
    }
    for (int j = 0; j < stack.n_m; ++j) {
        std::vector<VectorXd> sp;
        sp.reserve(sample);
        for (size_t i = 0; i < sample; ++i)
            sp.push_back(psgr_recover(residuals[i],
                                      aligned[i].z[static_cast<size_t>(j)],
                                      stack));
        stack.specific[static_cast<size_t>(j)]->value =
            kmeanspp(sp, cfg.v, cfg.d, rng);
    }
}

}  // namespace

TrainResult train_dmrq(const std::vector<cga::ModalEmbeddingSet>& aligned,
                       const DmrqConfig& cfg, int n_modalities) {
    cfg.validate(n_modalities);
    if (aligned.empty()) throw Error("dmrq: empty corpus");

    TrainResult out;
    out.stack = init_stack(cfg, n_modalities, cfg.seed);
    auto& stack = out.stack;
    Rng rng(stage_seed(cfg.seed, "dmrq-train"));
    seed_codebooks(stack, aligned, rng);

    auto main_params = stack.main_params();
    ag::Adam opt(cfg.lr);
    std::vector<ag::Adam> est_opts;
    for (int j = 0; j < n_modalities; ++j) est_opts.emplace_back(cfg.est_lr);

    std::vector<size_t> order(aligned.size());
    std::iota(order.begin(), order.end(), 0);

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Deterministic Fisher-Yates shuffle.
        for (size_t i = order.size(); i > 1; --i) {
            size_t j = rng.uniform_int(i);
            std::swap(order[i - 1], order[j]);
        }
        std::vector<std::vector<long>> usage(
            static_cast<size_t>(cfg.n_sh + n_modalities),
            std::vector<long>(static_cast<size_t>(cfg.v), 0));
        double recon_sum = 0.0;
        long n_batches = 0;
        std::vector<cga::ModalEmbeddingSet> last_batch;

        for (size_t start = 0; start < order.size();
             start += static_cast<size_t>(cfg.batch)) {
            size_t end = std::min(order.size(),
                                  start + static_cast<size_t>(cfg.batch));
            std::vector<cga::ModalEmbeddingSet> batch;
            for (size_t i = start; i < end; ++i)
                batch.push_back(aligned[order[i]]);

            // Step A: likelihood ascent on the variational estimators.
            if (cfg.lambda > 0.0) {
                MatrixXd sh_mat(static_cast<long>(batch.size()), cfg.d);
                std::vector<MatrixXd> sp_mats(
                    static_cast<size_t>(n_modalities),
                    MatrixXd(static_cast<long>(batch.size()), cfg.d));
                for (size_t i = 0; i < batch.size(); ++i) {
                    VectorXd f = fuse_value(batch[i].z, stack);
                    RqResult rq = residual_quantize_shared(f, stack);
                    sh_mat.row(static_cast<long>(i)) = rq.reconstruction.transpose();
                    for (int j = 0; j < n_modalities; ++j)
                        sp_mats[static_cast<size_t>(j)].row(static_cast<long>(i)) =
                            psgr_recover(rq.residual,
                                         batch[i].z[static_cast<size_t>(j)], stack)
                                .transpose();
                }
                for (int j = 0; j < n_modalities; ++j)
                    fit_estimator_step(stack.estimators[static_cast<size_t>(j)],
                                       sh_mat, sp_mats[static_cast<size_t>(j)],
                                       est_opts[static_cast<size_t>(j)]);
            }

            // Step B: descent on the main objective.
            LossGraph g = dmrq_loss_graph(batch, stack);
            double total = g.total->scalar();
            if (!std::isfinite(total))
                throw Error("dmrq: non-finite loss in epoch " +
                            std::to_string(epoch));
            recon_sum += g.reconstruction->scalar();
            ++n_batches;
            ag::Adam::zero_grad(main_params);
            ag::backward(g.total);
            opt.step(main_params);

            for (int k = 0; k < cfg.n_sh; ++k)
                for (int c = 0; c < cfg.v; ++c)
                    usage[static_cast<size_t>(k)][static_cast<size_t>(c)] +=
                        g.shared_hits[static_cast<size_t>(k)][static_cast<size_t>(c)];
            for (int j = 0; j < n_modalities; ++j)
                for (int c = 0; c < cfg.v; ++c)
                    usage[static_cast<size_t>(cfg.n_sh + j)][static_cast<size_t>(c)] +=
                        g.specific_hits[static_cast<size_t>(j)][static_cast<size_t>(c)];
            last_batch = std::move(batch);
        }

        out.curve.push_back(recon_sum / static_cast<double>(n_batches));
        out.usage = usage;

        if (cfg.dead_reseed && !last_batch.empty()) {
            // Reseed entries unused for a full epoch to in-batch targets.
            auto reseed = [&](ag::Var& book, const std::vector<long>& hits,
                              const std::vector<VectorXd>& pool) {
                for (int c = 0; c < cfg.v; ++c) {
                    if (hits[static_cast<size_t>(c)] > 0 || pool.empty()) continue;
                    const VectorXd& target = pool[rng.uniform_int(pool.size())];
                    for (int col = 0; col < cfg.d; ++col)
                        book->value(c, col) =
                            target(col) + 1e-3 * rng.gaussian();
                }
            };
            std::vector<std::vector<VectorXd>> sh_pools(
                static_cast<size_t>(cfg.n_sh));
            std::vector<std::vector<VectorXd>> sp_pools(
                static_cast<size_t>(n_modalities));
            for (const auto& set : last_batch) {
                VectorXd r = fuse_value(set.z, stack);
                for (int k = 0; k < cfg.n_sh; ++k) {
                    sh_pools[static_cast<size_t>(k)].push_back(r);
                    int code = nearest_code(
                        r, stack.shared[static_cast<size_t>(k)]->value);
                    r -= stack.shared[static_cast<size_t>(k)]
                             ->value.row(code)
                             .transpose();
                }
                for (int j = 0; j < n_modalities; ++j)
                    sp_pools[static_cast<size_t>(j)].push_back(psgr_recover(
                        r, set.z[static_cast<size_t>(j)], stack));
            }
            for (int k = 0; k < cfg.n_sh; ++k)
                reseed(stack.shared[static_cast<size_t>(k)],
                       usage[static_cast<size_t>(k)],
                       sh_pools[static_cast<size_t>(k)]);
            for (int j = 0; j < n_modalities; ++j)
                reseed(stack.specific[static_cast<size_t>(j)],
                       usage[static_cast<size_t>(cfg.n_sh + j)],
                       sp_pools[static_cast<size_t>(j)]);
        }
    }
    return out;
}

std::vector<ItemCodes> tokenize(const std::vector<cga::ModalEmbeddingSet>& aligned,
                                const CodebookStack& stack) {
    std::vector<ItemCodes> out;
    out.reserve(aligned.size());
    for (const auto& set : aligned) {
        ItemCodes codes;
        codes.item_id = set.item_id;
        VectorXd f = fuse_value(set.z, stack);
        RqResult rq = residual_quantize_shared(f, stack);
        codes.c_sh = rq.codes;
        codes.z_hat_sh = rq.reconstruction;
        for (int j = 0; j < stack.n_m; ++j) {
            VectorXd z_sp =
                psgr_recover(rq.residual, set.z[static_cast<size_t>(j)], stack);
            auto [code, e] = quantize_specific(
                z_sp, stack.specific[static_cast<size_t>(j)]->value);
            codes.c_sp.push_back(code);
            codes.z_hat_sp.push_back(std::move(e));
        }
        out.push_back(std::move(codes));
    }
    return out;
}

Eigen::MatrixXd layer_modality_similarity(
    const std::vector<cga::ModalEmbeddingSet>& aligned,
    const CodebookStack& stack) {
    MatrixXd sim = MatrixXd::Zero(stack.n_m, stack.n_m);
    auto codes = tokenize(aligned, stack);
    for (size_t i = 0; i < aligned.size(); ++i) {
        for (int j = 0; j < stack.n_m; ++j) {
            const VectorXd& zsp = codes[i].z_hat_sp[static_cast<size_t>(j)];
            double zn = zsp.norm();
            if (zn < 1e-12) continue;
            for (int jp = 0; jp < stack.n_m; ++jp) {
                const VectorXd& z = aligned[i].z[static_cast<size_t>(jp)];
                sim(j, jp) += zsp.dot(z) / (zn * z.norm());
            }
        }
    }
    return sim / static_cast<double>(aligned.size());
}

void save_stack(const CodebookStack& stack, const std::string& path) {
    std::vector<ckpt::NamedTensor> tensors;
    Eigen::MatrixXd meta(1, 6);
    meta << stack.cfg.n_sh, stack.n_m, stack.cfg.v, stack.cfg.d, stack.cfg.h,
        stack.cfg.learned_fuse ? 1 : 0;
    tensors.emplace_back("meta", meta);
    for (size_t k = 0; k < stack.shared.size(); ++k)
        tensors.emplace_back("shared." + std::to_string(k),
                             stack.shared[k]->value);
    for (size_t j = 0; j < stack.specific.size(); ++j)
        tensors.emplace_back("specific." + std::to_string(j),
                             stack.specific[j]->value);
    tensors.emplace_back("fuse.w", stack.fuse_w->value);
    tensors.emplace_back("psgr.wq", stack.psgr_wq->value);
    tensors.emplace_back("psgr.wk", stack.psgr_wk->value);
    tensors.emplace_back("psgr.wv", stack.psgr_wv->value);
    tensors.emplace_back("psgr.wo", stack.psgr_wo->value);
    ckpt::save(path, tensors, "HISAM-CB v1");
}

CodebookStack load_stack(const std::string& path) {
    auto tensors = ckpt::load(path, "HISAM-CB v1");
    const auto& meta = ckpt::find(tensors, "meta");
    DmrqConfig cfg;
    cfg.n_sh = static_cast<int>(meta(0, 0));
    int n_m = static_cast<int>(meta(0, 1));
    cfg.v = static_cast<int>(meta(0, 2));
    cfg.d = static_cast<int>(meta(0, 3));
    cfg.h = static_cast<int>(meta(0, 4));
    cfg.learned_fuse = meta(0, 5) != 0;
    CodebookStack stack = init_stack(cfg, n_m, 0);
    for (int k = 0; k < cfg.n_sh; ++k)
        stack.shared[static_cast<size_t>(k)]->value =
            ckpt::find(tensors, "shared." + std::to_string(k));
    for (int j = 0; j < n_m; ++j)
        stack.specific[static_cast<size_t>(j)]->value =
            ckpt::find(tensors, "specific." + std::to_string(j));
    stack.fuse_w->value = ckpt::find(tensors, "fuse.w");
    stack.psgr_wq->value = ckpt::find(tensors, "psgr.wq");
    stack.psgr_wk->value = ckpt::find(tensors, "psgr.wk");
    stack.psgr_wv->value = ckpt::find(tensors, "psgr.wv");
    stack.psgr_wo->value = ckpt::find(tensors, "psgr.wo");
    return stack;
}

}  // namespace hisam::dmrq
