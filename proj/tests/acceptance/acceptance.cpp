// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Each criterion prints exactly one
// [PASS]/[FAIL] line; the process exits non-zero if any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "hisam/cga.hpp"
#include "hisam/common.hpp"
#include "hisam/config.hpp"
#include "hisam/dmrq.hpp"
#include "hisam/hmat.hpp"
#include "hisam/ingest.hpp"
#include "hisam/rng.hpp"
#include "hisam/seqstream.hpp"
#include "hisam/serve.hpp"
#include "hisam/tape.hpp"
#include "hisam/train_eval.hpp"
#include "../test_util.hpp"

using namespace hisam;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using testutil::fd_grad;
using testutil::random_matrix;
using testutil::rel_err;

namespace {

int g_failures = 0;

void report(int idx, const std::string& name, bool ok,
            const std::string& detail) {
    std::printf("[%s] criterion %2d: %s (%s)\n", ok ? "PASS" : "FAIL", idx,
                name.c_str(), detail.c_str());
    if (!ok) ++g_failures;
}

double now_s() {
    using clock = std::chrono::steady_clock;
    return std::chrono::duration<double>(clock::now().time_since_epoch())
        .count();
}

double median3(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// ---------------------------------------------------------------------------
// Shared stream/model helpers.

seq::Vocab vocab_li6() {
    seq::Vocab v;
    v.n_sh = 3;
    v.n_m = 3;
    v.v = 8;
    v.n_actions = 2;
    v.profile_buckets = 8;
    return v;
}

dmrq::ItemCodes random_item(const seq::Vocab& vocab, Rng& rng,
                            const std::string& id = "item") {
    dmrq::ItemCodes c;
    c.item_id = id;
    for (int k = 0; k < vocab.n_sh; ++k)
        c.c_sh.push_back(
            static_cast<int>(rng.uniform_int(static_cast<uint64_t>(vocab.v))));
    for (int j = 0; j < vocab.n_m; ++j)
        c.c_sp.push_back(
            static_cast<int>(rng.uniform_int(static_cast<uint64_t>(vocab.v))));
    return c;
}

seq::TokenStream random_stream(const seq::Vocab& vocab, int l_u, int k,
                               Rng& rng) {
    std::vector<int> profile;
    for (int i = 0; i < l_u; ++i)
        profile.push_back(vocab.profile_id(static_cast<int>(
            rng.uniform_int(static_cast<uint64_t>(vocab.profile_buckets)))));
    std::vector<std::pair<dmrq::ItemCodes, int>> hist;
    for (int t = 0; t < k; ++t)
        hist.emplace_back(random_item(vocab, rng),
                          static_cast<int>(rng.uniform_int(2)));
    return seq::build_stream(profile, hist, vocab);
}

// ---------------------------------------------------------------------------
// 1. Rotary score vs an explicit cos/sin expansion oracle.

double rotary_oracle(const VectorXd& q, const VectorXd& k, int m_q, int n_q,
                     int m_k, int n_k, const hmat::HRopeTables& t) {
    // Per pair: q rotated by angle a, k by angle b, so the dot product is
    // cos(b-a) * (q . k) + sin(b-a) * (q1*k0 - q0*k1).
    double score = 0.0;
    const int quarter = t.d / 4;
    for (int j = 0; j < quarter; ++j) {
        double phi = (m_k - m_q) * t.theta_inter(j);
        double q0 = q(2 * j), q1 = q(2 * j + 1);
        double k0 = k(2 * j), k1 = k(2 * j + 1);
        score += std::cos(phi) * (q0 * k0 + q1 * k1) +
                 std::sin(phi) * (q1 * k0 - q0 * k1);
    }
    const int half = t.d / 2;
    for (int j = 0; j < quarter; ++j) {
        double phi = (n_k - n_q) * t.theta_intra(j);
        double q0 = q(half + 2 * j), q1 = q(half + 2 * j + 1);
        double k0 = k(half + 2 * j), k1 = k(half + 2 * j + 1);
        score += std::cos(phi) * (q0 * k0 + q1 * k1) +
                 std::sin(phi) * (q1 * k0 - q0 * k1);
    }
    return score;
}

void criterion_1() {
    double t0 = now_s();
    Rng rng(101);
    double max_err = 0.0, max_shift = 0.0;
    for (int d : {4, 8, 64}) {
        hmat::HRopeTables t = hmat::make_hrope_tables(d);
        for (int trial = 0; trial < 1000; ++trial) {
            VectorXd q = random_matrix(rng, d, 1);
            VectorXd k = random_matrix(rng, d, 1);
            int m_q = static_cast<int>(rng.uniform_int(512));
            int n_q = static_cast<int>(rng.uniform_int(64));
            int m_k = static_cast<int>(rng.uniform_int(512));
            int n_k = static_cast<int>(rng.uniform_int(64));
            double got = hmat::hrope_score(q, k, m_q, n_q, m_k, n_k, t);
            double want = rotary_oracle(q, k, m_q, n_q, m_k, n_k, t);
            max_err = std::max(max_err, std::abs(got - want));
            int sm = static_cast<int>(rng.uniform_int(200));
            int sn = static_cast<int>(rng.uniform_int(30));
            max_shift = std::max(
                max_shift,
                std::abs(hmat::hrope_score(q, k, m_q + sm, n_q, m_k + sm, n_k,
                                           t) -
                         got));
            max_shift = std::max(
                max_shift,
                std::abs(hmat::hrope_score(q, k, m_q, n_q + sn, m_k, n_k + sn,
                                           t) -
                         got));
        }
    }
    double elapsed = now_s() - t0;
    bool ok = max_err < 1e-6 && max_shift < 1e-5 && elapsed < 5.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "oracle err %.2e, shift err %.2e, %.2fs", max_err, max_shift,
                  elapsed);
    report(1, "rotary score matches explicit cos/sin oracle", ok, buf);
}

// ---------------------------------------------------------------------------
// 2. Decoupling of the inter/intra halves.

void criterion_2() {
    Rng rng(102);
    double max_intra = 0.0, max_inter = 0.0;
    for (int d : {8, 64}) {
        hmat::HRopeTables t = hmat::make_hrope_tables(d);
        for (int trial = 0; trial < 50; ++trial) {
            VectorXd q = random_matrix(rng, d, 1);
            VectorXd k = random_matrix(rng, d, 1);
            VectorXd q_inter = q, k_inter = k;
            q_inter.tail(d / 2).setZero();  // kill the intra half
            k_inter.tail(d / 2).setZero();
            double base =
                hmat::hrope_score(q_inter, k_inter, 3, 0, 1, 0, t);
            for (int n = 0; n <= 16; ++n)
                max_intra = std::max(
                    max_intra,
                    std::abs(hmat::hrope_score(q_inter, k_inter, 3, n, 1, 0,
                                               t) -
                             base));
            VectorXd q_intra = q, k_intra = k;
            q_intra.head(d / 2).setZero();  // kill the inter half
            k_intra.head(d / 2).setZero();
            double base2 =
                hmat::hrope_score(q_intra, k_intra, 0, 5, 0, 2, t);
            for (int m : {0, 1, 10, 100, 500, 1000})
                max_inter = std::max(
                    max_inter,
                    std::abs(hmat::hrope_score(q_intra, k_intra, m, 5, 0, 2,
                                               t) -
                             base2));
        }
    }
    bool ok = max_intra <= 1e-7 && max_inter <= 1e-7;
    char buf[120];
    std::snprintf(buf, sizeof(buf), "n-sensitivity %.2e, m-sensitivity %.2e",
                  max_intra, max_inter);
    report(2, "inter and intra rotary halves are decoupled", ok, buf);
}

// ---------------------------------------------------------------------------
// 3. Memory-anchor mask equals its closed form.

void criterion_3() {
    Rng rng(103);
    seq::Vocab vocab = vocab_li6();
    long mismatches = 0;
    for (int trial = 0; trial < 200; ++trial) {
        seq::TokenStream s = random_stream(
            vocab, 1 + static_cast<int>(rng.uniform_int(5)),
            1 + static_cast<int>(rng.uniform_int(6)), rng);
        MatrixXd mask = hmat::build_mask(s, true);
        const long t = static_cast<long>(s.tokens.size());
        for (long q = 0; q < t; ++q)
            for (long k = 0; k < t; ++k) {
                const auto& tq = s.tokens[static_cast<size_t>(q)];
                const auto& tk = s.tokens[static_cast<size_t>(k)];
                bool visible =
                    k <= q &&
                    (tk.m == 0 || tq.m == tk.m ||
                     (tk.m < tq.m && tk.kind == seq::TokenKind::Anchor));
                bool got = mask(q, k) == 0.0;
                if (visible != got) ++mismatches;
            }
    }
    report(3, "anchored attention mask equals the closed-form visible set",
           mismatches == 0,
           "mismatched entries: " + std::to_string(mismatches));
}

// ---------------------------------------------------------------------------
// 4. Anchor eviction is lossless at action-prediction positions.

void criterion_4() {
    Rng rng(104);
    seq::Vocab vocab = vocab_li6();  // l_i = 6
    hmat::ModelConfig mc;
    mc.width = 64;
    mc.n_layers = 2;
    mc.n_q = 4;
    mc.n_kv = 2;
    mc.vocab_size = vocab.size();
    mc.seed = 1041;
    hmat::ModelState model = hmat::init_model(mc);

    double max_diff = 0.0;
    long cache_violations = 0;
    for (int trial = 0; trial < 50; ++trial) {
        int l_u = 2 + static_cast<int>(rng.uniform_int(5));
        int k = 1 + static_cast<int>(rng.uniform_int(20));
        seq::TokenStream s = random_stream(vocab, l_u, k, rng);
        MatrixXd dense = hmat::forward_values(model, s, hmat::build_mask(s, true));
        serve::AnchorCache cache = serve::make_cache(model);
        MatrixXd inc = serve::incremental_decode(model, cache, s.tokens);
        for (int pos : s.anchor_positions)
            max_diff = std::max(
                max_diff,
                (inc.row(pos) - dense.row(pos)).cwiseAbs().maxCoeff());
        if (cache.entries() != static_cast<size_t>(l_u + k))
            ++cache_violations;
    }
    bool ok = max_diff < 1e-5 && cache_violations == 0;
    char buf[120];
    std::snprintf(buf, sizeof(buf),
                  "max logit diff %.2e, cache-size violations %ld", max_diff,
                  cache_violations);
    report(4, "anchor eviction is lossless and leaves l_u + k entries", ok,
           buf);
}

// ---------------------------------------------------------------------------
// 5. One-pass candidate ranking equals sequential scoring.

void criterion_5() {
    Rng rng(105);
    seq::Vocab vocab = vocab_li6();
    hmat::ModelConfig mc;
    mc.width = 32;
    mc.n_layers = 2;
    mc.n_q = 2;
    mc.n_kv = 1;
    mc.vocab_size = vocab.size();
    mc.seed = 1051;
    hmat::ModelState model = hmat::init_model(mc);

    seq::TokenStream s = random_stream(vocab, 4, 6, rng);
    serve::AnchorCache cache = serve::make_cache(model);
    serve::incremental_decode(model, cache, s.tokens);

    std::vector<dmrq::ItemCodes> cands;
    for (int c = 0; c < 16; ++c)
        cands.push_back(random_item(vocab, rng, "cand" + std::to_string(c)));
    std::vector<double> one = serve::rank_one_pass(model, cache, cands, vocab, 1);
    double max_seq = 0.0;
    for (size_t c = 0; c < cands.size(); ++c)
        max_seq = std::max(
            max_seq,
            std::abs(one[c] - serve::score_sequential(model, cache, cands[c],
                                                      vocab, 1)));
    double max_shuffle = 0.0;
    Rng perm_rng(1052);
    std::vector<size_t> perm(cands.size());
    std::iota(perm.begin(), perm.end(), size_t{0});
    for (int rep = 0; rep < 4; ++rep) {
        for (size_t i = perm.size(); i > 1; --i)
            std::swap(perm[i - 1], perm[perm_rng.uniform_int(i)]);
        std::vector<dmrq::ItemCodes> shuffled;
        for (size_t p : perm) shuffled.push_back(cands[p]);
        std::vector<double> again =
            serve::rank_one_pass(model, cache, shuffled, vocab, 1);
        for (size_t i = 0; i < perm.size(); ++i)
            max_shuffle =
                std::max(max_shuffle, std::abs(again[i] - one[perm[i]]));
    }
    bool ok = max_seq < 1e-5 && max_shuffle <= 1e-6;
    char buf[120];
    std::snprintf(buf, sizeof(buf),
                  "vs sequential %.2e, shuffle deviation %.2e", max_seq,
                  max_shuffle);
    report(5, "one-pass ranking matches sequential scoring", ok, buf);
}

// ---------------------------------------------------------------------------
// 6. Quantizer oracles.

void criterion_6() {
    Rng rng(106);
    bool ok = true;
    std::string detail = "all oracles held";

    // Exhaustive nearest-entry search at v = 64.
    for (int trial = 0; trial < 40 && ok; ++trial) {
        MatrixXd entries = random_matrix(rng, 64, 6);
        VectorXd x = random_matrix(rng, 6, 1);
        int got = dmrq::nearest_code(x, entries);
        int want = 0;
        double best = (entries.row(0).transpose() - x).squaredNorm();
        for (int i = 1; i < 64; ++i) {
            double d2 = (entries.row(i).transpose() - x).squaredNorm();
            if (d2 < best) {
                best = d2;
                want = i;
            }
        }
        if (got != want) {
            ok = false;
            detail = "nearest-entry mismatch vs exhaustive search";
        }
    }

    // Residual identity, replayed in the implementation's summation order.
    dmrq::DmrqConfig cfg;
    cfg.n_sh = 4;
    cfg.v = 16;
    cfg.d = 8;
    cfg.h = 2;
    dmrq::CodebookStack stack = dmrq::init_stack(cfg, 2, 1061);
    for (int trial = 0; trial < 25 && ok; ++trial) {
        VectorXd f = random_matrix(rng, 8, 1);
        dmrq::RqResult rq = dmrq::residual_quantize_shared(f, stack);
        VectorXd recon = VectorXd::Zero(8);
        VectorXd resid = f;
        for (int l = 0; l < cfg.n_sh; ++l) {
            VectorXd e =
                stack.shared[static_cast<size_t>(l)]->value.row(rq.codes[static_cast<size_t>(l)]).transpose();
            recon += e;
            resid -= e;
        }
        if ((recon - rq.reconstruction).cwiseAbs().maxCoeff() != 0.0 ||
            (resid - rq.residual).cwiseAbs().maxCoeff() != 0.0) {
            ok = false;
            detail = "residual identity broke under replayed summation";
        }
    }

    // Pinned zero entry => per-layer residual norms never increase.
    for (auto& book : stack.shared) book->value.row(0).setZero();
    for (int trial = 0; trial < 25 && ok; ++trial) {
        VectorXd r = random_matrix(rng, 8, 1);
        for (const auto& book : stack.shared) {
            int code = dmrq::nearest_code(r, book->value);
            VectorXd next = r - book->value.row(code).transpose();
            if (next.norm() > r.norm() + 1e-12) {
                ok = false;
                detail = "residual norm increased despite pinned zero entry";
            }
            r = next;
        }
    }
    report(6, "quantizer selection, residual identity, norm decay", ok,
           detail);
}

// ---------------------------------------------------------------------------
// 7. Mutual-information upper-bound estimator.

void criterion_7() {
    dmrq::DmrqConfig cfg;
    cfg.n_sh = 1;
    cfg.v = 4;
    cfg.d = 4;
    cfg.h = 1;

    // Single-sample estimate is identically zero.
    dmrq::CodebookStack z_stack = dmrq::init_stack(cfg, 1, 1071);
    Rng zr(1072);
    MatrixXd one_sh = random_matrix(zr, 1, 4);
    MatrixXd one_sp = random_matrix(zr, 1, 4);
    bool zero_ok =
        dmrq::vclub_estimate(one_sh, one_sp, z_stack.estimators[0]) == 0.0;

    // Fit each estimator on fresh minibatches from its pair distribution,
    // then estimate on a held 512-pair sample: fitting and estimating on
    // the same finite sample would reward memorization with a spurious
    // positive estimate even for independent pairs.
    std::vector<double> indep_abs, copied;
    for (uint64_t seed : {21u, 22u, 23u}) {
        Rng rng(seed);
        dmrq::CodebookStack s1 = dmrq::init_stack(cfg, 1, seed * 7 + 1);
        ag::Adam opt1(1e-2);
        for (int step = 0; step < 400; ++step) {
            MatrixXd z = random_matrix(rng, 128, 4);
            MatrixXd x = random_matrix(rng, 128, 4);
            dmrq::fit_estimator_step(s1.estimators[0], z, x, opt1);
        }
        MatrixXd z_eval = random_matrix(rng, 512, 4);
        MatrixXd x_eval = random_matrix(rng, 512, 4);
        indep_abs.push_back(
            std::abs(dmrq::vclub_estimate(z_eval, x_eval, s1.estimators[0])));

        dmrq::CodebookStack s2 = dmrq::init_stack(cfg, 1, seed * 7 + 2);
        ag::Adam opt2(1e-2);
        for (int step = 0; step < 400; ++step) {
            MatrixXd z = random_matrix(rng, 128, 4);
            dmrq::fit_estimator_step(s2.estimators[0], z, z, opt2);
        }
        MatrixXd z_copy = random_matrix(rng, 512, 4);
        copied.push_back(dmrq::vclub_estimate(z_copy, z_copy, s2.estimators[0]));
    }
    double med_i = median3(indep_abs), med_c = median3(copied);
    bool ok = zero_ok && med_i <= 0.05 && med_c > med_i;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "B=1 exact: %s, |independent| median %.4f, copied median "
                  "%.3f",
                  zero_ok ? "yes" : "no", med_i, med_c);
    report(7, "MI estimator: zero at B=1, small for independent, larger for "
              "copied", ok, buf);
}

// ---------------------------------------------------------------------------
// 8. Analytic gradients vs central finite differences.

void criterion_8() {
    double t0 = now_s();
    double worst = 0.0;
    std::string worst_part = "none";
    auto track = [&](const std::string& part, double err) {
        if (err > worst) {
            worst = err;
            worst_part = part;
        }
    };

    {  // Alignment loss.
        Rng rng(108);
        const int b = 3, n_mod = 2, d = 6;
        cga::AlignConfig cfg;
        cfg.tau = 0.7;
        std::vector<std::vector<ag::Var>> raw(b);
        std::vector<ag::Var> params;
        for (int i = 0; i < b; ++i)
            for (int j = 0; j < n_mod; ++j) {
                ag::Var p = ag::param(random_matrix(rng, 1, d, 0.8));
                raw[static_cast<size_t>(i)].push_back(p);
                params.push_back(p);
            }
        auto build = [&] {
            std::vector<std::vector<ag::Var>> z(b);
            for (int i = 0; i < b; ++i)
                for (int j = 0; j < n_mod; ++j)
                    z[static_cast<size_t>(i)].push_back(ag::normalize_rows(
                        raw[static_cast<size_t>(i)][static_cast<size_t>(j)],
                        1e-12));
            return cga::alignment_loss_graph(z, cfg);
        };
        for (const ag::Var& p : params) {
            ag::Var root = build();
            p->ensure_grad();
            p->grad.setZero();
            ag::backward(root);
            MatrixXd analytic = p->grad;
            MatrixXd fd = fd_grad([&] { return build()->scalar(); }, p);
            track("alignment", rel_err(analytic, fd));
        }
    }

    {  // Quantizer loss with pinned code/snapshot terms.
        Rng rng(1081);
        dmrq::DmrqConfig cfg;
        cfg.n_sh = 2;
        cfg.v = 3;
        cfg.d = 4;
        cfg.h = 2;
        cfg.beta = 0.8;
        cfg.lambda = 0.2;
        cfg.learned_fuse = true;
        dmrq::CodebookStack stack = dmrq::init_stack(cfg, 2, 1082);
        std::vector<cga::ModalEmbeddingSet> batch(3);
        for (auto& set : batch)
            for (int j = 0; j < 2; ++j)
                set.z.push_back(testutil::random_unit(rng, 4));
        dmrq::LossSnapshots snaps = dmrq::capture_snapshots(batch, stack);
        auto loss = [&] {
            return dmrq::dmrq_loss_graph(batch, stack, snaps).total;
        };
        for (const ag::Var& p : stack.main_params()) {
            ag::Var root = loss();
            p->ensure_grad();
            p->grad.setZero();
            ag::backward(root);
            MatrixXd analytic = p->grad;
            MatrixXd fd = fd_grad([&] { return loss()->scalar(); }, p);
            track("quantizer", rel_err(analytic, fd));
        }
    }

    {  // Full-model SFT loss.
        Rng rng(1083);
        seq::Vocab vocab;
        vocab.n_sh = 1;
        vocab.n_m = 1;
        vocab.v = 3;
        vocab.n_actions = 2;
        vocab.profile_buckets = 2;
        hmat::ModelConfig mc;
        mc.width = 8;
        mc.n_layers = 2;
        mc.n_q = 2;
        mc.n_kv = 2;
        mc.ffn_mult = 2;
        mc.vocab_size = vocab.size();
        mc.seed = 1084;
        hmat::ModelState model = hmat::init_model(mc);
        tev::TrainBatch batch;
        batch.streams.push_back(random_stream(vocab, 2, 2, rng));
        batch.streams.push_back(random_stream(vocab, 1, 1, rng));
        auto loss = [&] { return tev::sft_loss_graph(model, batch, vocab); };
        for (const ag::Var& p : model.params()) {
            ag::Var root = loss();
            p->ensure_grad();
            p->grad.setZero();
            ag::backward(root);
            MatrixXd analytic = p->grad;
            MatrixXd fd = fd_grad([&] { return loss()->scalar(); }, p);
            track("sft", rel_err(analytic, fd));
        }
    }

    double elapsed = now_s() - t0;
    bool ok = worst <= 1e-3 && elapsed < 60.0;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "worst rel err %.2e (%s), %.1fs", worst,
                  worst_part.c_str(), elapsed);
    report(8, "analytic gradients match finite differences", ok, buf);
}

// ---------------------------------------------------------------------------
// 9. Disentanglement trend under the MI penalty.

void criterion_9() {
    int diagonal_seeds = 0;
    for (uint64_t seed : {1u, 2u, 3u}) {
        ingest::SyntheticSpec spec;
        spec.n_items = 240;
        spec.n_users = 4;
        spec.n_modalities = 3;
        spec.dims = {12, 12, 12};
        spec.cluster_count = 4;
        spec.events_per_user = 4;
        // Enough per-modality detail for the specific layers to recover;
        // light alignment keeps the per-modality probes distinct.
        spec.noise_scale = 0.3;
        spec.seed = seed;
        auto data = ingest::synth_corpus(spec);
        cga::AlignConfig ac;
        ac.d = 12;
        ac.batch = 16;
        ac.steps = 10;
        ac.seed = seed;
        cga::AlignResult align = cga::train_alignment(data.corpus, ac);
        dmrq::DmrqConfig dc;
        dc.n_sh = 2;
        dc.v = 16;
        dc.d = 12;
        dc.h = 6;
        dc.lambda = 0.3;
        dc.epochs = 60;
        dc.batch = 32;
        dc.lr = 3e-3;
        dc.learned_fuse = true;
        dc.seed = seed;
        dmrq::TrainResult tr = dmrq::train_dmrq(align.aligned, dc, 3);
        MatrixXd sim = dmrq::layer_modality_similarity(align.aligned, tr.stack);
        bool diagonal = true;
        for (int r = 0; r < sim.rows(); ++r) {
            int argmax = 0;
            sim.row(r).maxCoeff(&argmax);
            if (argmax != r) diagonal = false;
        }
        if (diagonal) ++diagonal_seeds;
    }
    bool ok = diagonal_seeds >= 2;
    report(9, "specific layers align with their own modality under the MI "
              "penalty",
           ok, std::to_string(diagonal_seeds) + "/3 seeds diagonal");
}

// ---------------------------------------------------------------------------
// 10. Learning sanity on the planted-rule dataset.

struct PlantedWorld {
    ingest::SyntheticData data;
    seq::Vocab vocab;
    std::map<std::string, dmrq::ItemCodes> by_item;
    std::vector<seq::TokenStream> streams;
    std::vector<ingest::InteractionLog> eval_logs;
    tev::EvalOptions eval_opts;
};

PlantedWorld make_planted_world() {
    PlantedWorld w;
    ingest::SyntheticSpec spec;
    spec.n_items = 500;
    spec.n_users = 2000;
    spec.n_modalities = 3;
    spec.dims = {12, 12, 12};
    spec.cluster_count = 4;
    spec.events_per_user = 10;
    spec.seed = 110;
    w.data = ingest::synth_corpus(spec);

    cga::AlignConfig ac;
    ac.d = 12;
    ac.batch = 16;
    ac.steps = 60;
    ac.seed = 110;
    cga::AlignResult align = cga::train_alignment(w.data.corpus, ac);

    dmrq::DmrqConfig dc;
    dc.n_sh = 2;
    dc.v = 16;
    dc.d = 12;
    dc.h = 3;
    dc.lambda = 0.1;
    dc.epochs = 4;
    dc.batch = 32;
    dc.seed = 110;
    dmrq::TrainResult tr = dmrq::train_dmrq(align.aligned, dc, 3);
    for (auto& c : dmrq::tokenize(align.aligned, tr.stack))
        w.by_item[c.item_id] = c;

    w.vocab.n_sh = 2;
    w.vocab.n_m = 3;
    w.vocab.v = 16;
    w.vocab.n_actions = 2;
    w.vocab.profile_buckets = 16;

    const int l_u = 4, max_items = 8;
    for (const auto& log : w.data.logs) {
        std::vector<std::pair<dmrq::ItemCodes, int>> hist;
        for (const auto& e : log.events)
            hist.emplace_back(w.by_item.at(e.item_id), e.action_id);
        w.streams.push_back(seq::truncate(
            seq::build_stream(
                seq::profile_bucket_ids(log.user_id, l_u, w.vocab), hist,
                w.vocab),
            max_items));
    }
    w.eval_logs.assign(w.data.logs.begin(), w.data.logs.begin() + 150);
    w.eval_opts.max_items = max_items;
    w.eval_opts.l_u = l_u;
    w.eval_opts.min_history = 1;
    return w;
}

hmat::ModelState planted_model(const PlantedWorld& w, uint64_t seed) {
    hmat::ModelConfig mc;
    mc.width = 64;
    mc.n_layers = 2;
    mc.n_q = 4;
    mc.n_kv = 2;
    mc.ffn_mult = 2;
    mc.vocab_size = w.vocab.size();
    mc.seed = seed;
    return hmat::init_model(mc);
}

double planted_auc(const PlantedWorld& w, const hmat::ModelState& model) {
    auto records = tev::score_events(model, w.by_item, w.eval_logs, w.vocab,
                                     w.eval_opts);
    return tev::auc(records);
}

void criterion_10() {
    PlantedWorld w = make_planted_world();

    // Untrained baseline sits at chance (3-seed median).
    std::vector<double> untrained;
    for (uint64_t seed : {31u, 32u, 33u})
        untrained.push_back(planted_auc(w, planted_model(w, seed)));
    double untrained_med = median3(untrained);

    // Main run: PT warmup then SFT in chunks with early exit.
    hmat::ModelState model = planted_model(w, 30);
    {
        tev::Schedule sched;
        sched.pt_steps = 200;
        sched.sft_steps = 0;
        sched.pt_lr = 1e-3;
        sched.batch = 8;
        sched.seed = 301;
        tev::train(model, w.streams, w.vocab, sched);
    }
    double best_auc = 0.0;
    int sft_steps_used = 0;
    while (sft_steps_used < 2000) {
        tev::Schedule sched;
        sched.pt_steps = 0;
        sched.sft_steps = 100;
        sched.sft_lr = 1e-3;
        sched.batch = 8;
        sched.seed = 302 + static_cast<uint64_t>(sft_steps_used);
        tev::train(model, w.streams, w.vocab, sched);
        sft_steps_used += 100;
        best_auc = std::max(best_auc, planted_auc(w, model));
        if (best_auc >= 0.85) break;
    }

    // PT+SFT vs SFT-only on a small shared budget, 3-seed median.
    std::vector<double> sft_only, pt_sft;
    for (uint64_t seed : {41u, 42u, 43u}) {
        hmat::ModelState m_s = planted_model(w, seed);
        tev::Schedule ss;
        ss.sft_steps = 40;
        ss.sft_lr = 1e-3;
        ss.batch = 8;
        ss.seed = seed;
        tev::train(m_s, w.streams, w.vocab, ss);
        sft_only.push_back(planted_auc(w, m_s));

        hmat::ModelState m_ps = planted_model(w, seed);
        tev::Schedule ps;
        ps.pt_steps = 80;
        ps.sft_steps = 40;
        ps.pt_lr = 1e-3;
        ps.sft_lr = 1e-3;
        ps.batch = 8;
        ps.seed = seed;
        tev::train(m_ps, w.streams, w.vocab, ps);
        pt_sft.push_back(planted_auc(w, m_ps));
    }
    double med_s = median3(sft_only), med_ps = median3(pt_sft);

    bool ok = best_auc >= 0.85 && std::abs(untrained_med - 0.5) <= 0.05 &&
              med_ps >= med_s;
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "AUC %.3f after %d SFT steps, untrained median %.3f, "
                  "PT+SFT %.3f vs SFT-only %.3f",
                  best_auc, sft_steps_used, untrained_med, med_ps, med_s);
    report(10, "planted rule is learned; pretraining does not hurt", ok, buf);
}

// ---------------------------------------------------------------------------
// 11. Ranking metric oracles.

double brute_force_auc(const std::vector<tev::EvalRecord>& records) {
    double wins = 0.0;
    long pairs = 0;
    for (const auto& p : records) {
        if (p.label != 1) continue;
        for (const auto& n : records) {
            if (n.label != 0) continue;
            ++pairs;
            if (p.score > n.score) wins += 1.0;
            else if (p.score == n.score) wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

void criterion_11() {
    Rng rng(111);
    double max_auc_err = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        int n = 5 + static_cast<int>(rng.uniform_int(96));
        std::vector<tev::EvalRecord> recs;
        bool has_pos = false, has_neg = false;
        for (int i = 0; i < n; ++i) {
            tev::EvalRecord r;
            r.user_id = "u";
            r.label = static_cast<int>(rng.uniform_int(2));
            // Coarse quantization forces plenty of ties.
            r.score = static_cast<double>(rng.uniform_int(8)) / 8.0;
            has_pos |= r.label == 1;
            has_neg |= r.label == 0;
            recs.push_back(r);
        }
        if (!has_pos || !has_neg) continue;
        max_auc_err = std::max(
            max_auc_err, std::abs(tev::auc(recs) - brute_force_auc(recs)));
    }

    // Weighted per-user fixtures against an independently computed mean.
    double max_gauc_err = 0.0;
    for (int fixture = 0; fixture < 10; ++fixture) {
        Rng fr(200 + static_cast<uint64_t>(fixture));
        std::vector<tev::EvalRecord> recs;
        double weighted_sum = 0.0;
        long total_records = 0;
        int n_users = 2 + static_cast<int>(fr.uniform_int(4));
        for (int u = 0; u < n_users; ++u) {
            std::vector<tev::EvalRecord> user_recs;
            int n = 4 + static_cast<int>(fr.uniform_int(8));
            bool has_pos = false, has_neg = false;
            for (int i = 0; i < n; ++i) {
                tev::EvalRecord r;
                r.user_id = "user" + std::to_string(u);
                r.label = static_cast<int>(fr.uniform_int(2));
                r.score = static_cast<double>(fr.uniform_int(16)) / 16.0;
                has_pos |= r.label == 1;
                has_neg |= r.label == 0;
                user_recs.push_back(r);
            }
            recs.insert(recs.end(), user_recs.begin(), user_recs.end());
            if (has_pos && has_neg) {
                weighted_sum += static_cast<double>(user_recs.size()) *
                                brute_force_auc(user_recs);
                total_records += static_cast<long>(user_recs.size());
            }
        }
        if (total_records == 0) continue;
        double expected = weighted_sum / static_cast<double>(total_records);
        max_gauc_err = std::max(max_gauc_err,
                                std::abs(tev::gauc(recs, true) - expected));
    }
    bool ok = max_auc_err <= 1e-12 && max_gauc_err <= 1e-12;
    char buf[120];
    std::snprintf(buf, sizeof(buf), "auc err %.2e, gauc err %.2e", max_auc_err,
                  max_gauc_err);
    report(11, "AUC/GAUC match brute-force pairwise oracles", ok, buf);
}

// ---------------------------------------------------------------------------
// 12. Serving complexity accounting.

void criterion_12() {
    seq::Vocab vocab = vocab_li6();
    hmat::ModelConfig mc;
    mc.width = 16;
    mc.n_layers = 1;
    mc.n_q = 2;
    mc.n_kv = 1;
    mc.vocab_size = vocab.size();
    mc.seed = 1121;
    hmat::ModelState model = hmat::init_model(mc);

    long mismatches = 0;
    double ratio_at_100 = 0.0;
    for (int l_i : {4, 6}) {
        for (int k : {5, 10, 25, 50, 100}) {
            serve::WorkloadSpec spec;
            spec.l_u = 6;
            spec.k = k;
            spec.l_i = l_i;
            spec.repeats = 1;
            spec.seed = 1122;
            serve::BenchReport rep = serve::bench_serving(model, vocab, spec);
            if (rep.ma_pairs_counted != rep.ma_pairs_analytic) ++mismatches;
            if (k == 100 && l_i == 6) ratio_at_100 = rep.hist_ratio;
        }
    }
    bool ok = mismatches == 0 && std::abs(ratio_at_100 - 6.0) / 6.0 <= 0.10;
    char buf[160];
    std::snprintf(buf, sizeof(buf),
                  "count mismatches %ld, history ratio at k=100 is %.3f "
                  "(target l_i=6)",
                  mismatches, ratio_at_100);
    report(12, "attention-pair counts match the closed form; history cost "
               "ratio approaches l_i",
           ok, buf);
}

}  // namespace

int main() {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7();
    criterion_8();
    criterion_9();
    criterion_10();
    criterion_11();
    criterion_12();
    if (g_failures == 0) {
        std::printf("all 12 acceptance criteria passed\n");
        return 0;
    }
    std::printf("%d acceptance criteria FAILED\n", g_failures);
    return 1;
}
