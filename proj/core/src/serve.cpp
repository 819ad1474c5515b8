// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include "hisam/serve.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <limits>

#include "hisam/common.hpp"
#include "hisam/rng.hpp"

namespace hisam::serve {

using Eigen::MatrixXd;
using Eigen::RowVectorXd;

size_t AnchorCache::bytes() const {
    size_t b = 0;
    for (const auto& l : layers)
        b += static_cast<size_t>(l.k.size() + l.v.size()) * sizeof(double);
    return b;
}

AnchorCache make_cache(const hmat::ModelState& model) {
    AnchorCache cache;
    const int kvw = model.cfg.n_kv * model.cfg.head_dim();
    cache.layers.resize(static_cast<size_t>(model.cfg.n_layers));
    for (auto& l : cache.layers) {
        l.k = MatrixXd(0, kvw);
        l.v = MatrixXd(0, kvw);
    }
    return cache;
}

namespace {

// In-place rotary application to each head_dim segment of a row.
void rotate_row(RowVectorXd& row, int head_dim, const RowVectorXd& cs,
                const RowVectorXd& sn) {
    for (long off = 0; off + head_dim <= row.size(); off += head_dim) {
        for (int j = 0; j < head_dim / 2; ++j) {
            double a = row(off + 2 * j), b = row(off + 2 * j + 1);
            row(off + 2 * j) = cs(2 * j) * a - sn(2 * j) * b;
            row(off + 2 * j + 1) = sn(2 * j + 1) * a + cs(2 * j + 1) * b;
        }
    }
}

RowVectorXd softmax_row(const RowVectorXd& scores) {
    double mx = -std::numeric_limits<double>::infinity();
    for (long i = 0; i < scores.size(); ++i) mx = std::max(mx, scores(i));
    RowVectorXd out = RowVectorXd::Zero(scores.size());
    if (!std::isfinite(mx)) return out;
    double sum = 0.0;
    for (long i = 0; i < scores.size(); ++i) {
        if (std::isfinite(scores(i))) {
            out(i) = std::exp(scores(i) - mx);
            sum += out(i);
        }
    }
    return out / sum;
}

RowVectorXd swiglu_row(const RowVectorXd& x, const hmat::LayerParams& lp,
                       const hmat::ModelConfig& cfg) {
    RowVectorXd f = hmat::value_rmsnorm(x, lp.ffn_gain->value.row(0),
                                        cfg.rms_eps);
    RowVectorXd g = f * lp.w_gate->value;
    RowVectorXd u = f * lp.w_up->value;
    for (long i = 0; i < g.size(); ++i)
        g(i) = g(i) / (1.0 + std::exp(-g(i))) * u(i);
    return g * lp.w_down->value;
}

}  // namespace

Eigen::MatrixXd incremental_decode(const hmat::ModelState& model,
                                   AnchorCache& cache,
                                   const std::vector<seq::SemanticToken>& tokens,
                                   long* score_pairs) {
    const auto& cfg = model.cfg;
    const int hd = cfg.head_dim();
    const int group = cfg.n_q / cfg.n_kv;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    MatrixXd logits(static_cast<long>(tokens.size()), cfg.vocab_size);

    for (size_t ti = 0; ti < tokens.size(); ++ti) {
        const auto& tok = tokens[ti];
        if (tok.vocab_id < 0 || tok.vocab_id >= cfg.vocab_size)
            throw Error("incremental_decode: token id out of vocab");
        if (tok.m < cache.last_m ||
            (tok.m == cache.last_m && tok.n <= cache.last_n))
            throw Error("incremental_decode: coordinate regression at (m=" +
                        std::to_string(tok.m) + ", n=" + std::to_string(tok.n) +
                        ")");
        cache.last_m = tok.m;
        cache.last_n = tok.n;

        auto [cs, sn] = hmat::rope_coeffs({{tok.m, tok.n}}, model.tables);
        RowVectorXd x = model.embed->value.row(tok.vocab_id);
        for (int l = 0; l < cfg.n_layers; ++l) {
            const auto& lp = model.layers[static_cast<size_t>(l)];
            auto& lc = cache.layers[static_cast<size_t>(l)];
            RowVectorXd h =
                hmat::value_rmsnorm(x, lp.attn_gain->value.row(0), cfg.rms_eps);
            RowVectorXd q = h * lp.wq->value;
            RowVectorXd kx = h * lp.wk->value;
            RowVectorXd vx = h * lp.wv->value;
            rotate_row(q, hd, cs.row(0), sn.row(0));
            rotate_row(kx, hd, cs.row(0), sn.row(0));

            const long e = lc.k.rows();
            RowVectorXd ctx(cfg.width);
            for (int hq = 0; hq < cfg.n_q; ++hq) {
                const int g = hq / group;
                RowVectorXd qh = q.segment(hq * hd, hd);
                RowVectorXd scores(e + 1);
                for (long r = 0; r < e; ++r)
                    scores(r) = qh.dot(lc.k.row(r).segment(g * hd, hd)) *
                                inv_sqrt;
                scores(e) = qh.dot(kx.segment(g * hd, hd)) * inv_sqrt;
                RowVectorXd attn = softmax_row(scores);
                RowVectorXd c = RowVectorXd::Zero(hd);
                for (long r = 0; r < e; ++r)
                    c += attn(r) * lc.v.row(r).segment(g * hd, hd);
                c += attn(e) * vx.segment(g * hd, hd);
                ctx.segment(hq * hd, hd) = c;
            }
            if (score_pairs) *score_pairs += cfg.n_q * (e + 1);
            x += (ctx * lp.wo->value).eval();
            x += swiglu_row(x, lp, cfg);

            lc.k.conservativeResize(e + 1, Eigen::NoChange);
            lc.v.conservativeResize(e + 1, Eigen::NoChange);
            lc.k.row(e) = kx;
            lc.v.row(e) = vx;
        }
        cache.meta.push_back({tok.m, tok.n, tok.kind});

        RowVectorXd out =
            hmat::value_rmsnorm(x, model.final_gain->value.row(0), cfg.rms_eps);
        logits.row(static_cast<long>(ti)) = out * model.lm_head->value;

        if (tok.kind == seq::TokenKind::Action) {
            // Segment boundary: drop everything in this segment except the
            // Anchor (the Action entry included).
            std::vector<long> keep;
            for (size_t r = 0; r < cache.meta.size(); ++r) {
                const auto& mt = cache.meta[r];
                if (mt.m == tok.m && mt.kind != seq::TokenKind::Anchor)
                    continue;
                keep.push_back(static_cast<long>(r));
            }
            std::vector<CacheMeta> new_meta;
            for (long r : keep) new_meta.push_back(cache.meta[static_cast<size_t>(r)]);
            cache.meta = std::move(new_meta);
            for (auto& lc : cache.layers) {
                MatrixXd nk(static_cast<long>(keep.size()), lc.k.cols());
                MatrixXd nv(static_cast<long>(keep.size()), lc.v.cols());
                for (size_t r = 0; r < keep.size(); ++r) {
                    nk.row(static_cast<long>(r)) = lc.k.row(keep[r]);
                    nv.row(static_cast<long>(r)) = lc.v.row(keep[r]);
                }
                lc.k = std::move(nk);
                lc.v = std::move(nv);
            }
        }
    }
    return logits;
}

std::vector<double> rank_one_pass(const hmat::ModelState& model,
                                  const AnchorCache& cache,
                                  const std::vector<dmrq::ItemCodes>& candidates,
                                  const seq::Vocab& vocab, int target_action,
                                  int max_tokens, long* score_pairs) {
    const auto& cfg = model.cfg;
    if (candidates.empty()) throw Error("rank_one_pass: no candidates");
    if (target_action < 0 || target_action >= vocab.n_actions)
        throw Error("rank_one_pass: target action out of range");
    for (const auto& mt : cache.meta)
        if (mt.kind != seq::TokenKind::ProfileCode &&
            mt.kind != seq::TokenKind::Anchor)
            throw Error("rank_one_pass: history cache not fully evicted "
                        "(in-flight segment present)");

    int l_valid = 0;
    for (const auto& mt : cache.meta) l_valid = std::max(l_valid, mt.m);
    const int cand_m = l_valid + 1;

    std::vector<int> ids;
    std::vector<std::pair<int, int>> coords;
    std::vector<int> block_of;      // candidate index per block token
    std::vector<long> anchor_pos;   // block-local anchor positions
    for (size_t c = 0; c < candidates.size(); ++c) {
        int n = 1;
        for (int id : seq::item_token_ids(candidates[c], vocab)) {
            ids.push_back(id);
            coords.emplace_back(cand_m, n++);
            block_of.push_back(static_cast<int>(c));
        }
        anchor_pos.push_back(static_cast<long>(ids.size()));
        ids.push_back(vocab.anchor_id());
        coords.emplace_back(cand_m, n);
        block_of.push_back(static_cast<int>(c));
    }
    const long t = static_cast<long>(ids.size());
    const long e = static_cast<long>(cache.entries());
    if (e + t > max_tokens)
        throw Error("rank_one_pass: candidate block needs " +
                    std::to_string(e + t) + " cached+block tokens, above the "
                    "limit of " + std::to_string(max_tokens) +
                    "; chunk the candidates into smaller blocks");

    const int hd = cfg.head_dim();
    const int group = cfg.n_q / cfg.n_kv;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    auto [cs, sn] = hmat::rope_coeffs(coords, model.tables);

    MatrixXd x(t, cfg.width);
    for (long i = 0; i < t; ++i) {
        int id = ids[static_cast<size_t>(i)];
        if (id < 0 || id >= cfg.vocab_size)
            throw Error("rank_one_pass: token id out of vocab");
        x.row(i) = model.embed->value.row(id);
    }

    for (int l = 0; l < cfg.n_layers; ++l) {
        const auto& lp = model.layers[static_cast<size_t>(l)];
        const auto& lc = cache.layers[static_cast<size_t>(l)];
        MatrixXd h = hmat::value_rmsnorm(x, lp.attn_gain->value.row(0),
                                         cfg.rms_eps);
        MatrixXd q = h * lp.wq->value;
        MatrixXd k = h * lp.wk->value;
        MatrixXd v = h * lp.wv->value;
        for (long i = 0; i < t; ++i) {
            RowVectorXd qr = q.row(i), kr = k.row(i);
            rotate_row(qr, hd, cs.row(i), sn.row(i));
            rotate_row(kr, hd, cs.row(i), sn.row(i));
            q.row(i) = qr;
            k.row(i) = kr;
        }
        MatrixXd ctx(t, cfg.width);
        for (int hq = 0; hq < cfg.n_q; ++hq) {
            const int g = hq / group;
            for (long i = 0; i < t; ++i) {
                RowVectorXd qh = q.row(i).segment(hq * hd, hd);
                RowVectorXd scores(e + t);
                scores.setConstant(-std::numeric_limits<double>::infinity());
                for (long r = 0; r < e; ++r)
                    scores(r) =
                        qh.dot(lc.k.row(r).segment(g * hd, hd)) * inv_sqrt;
                for (long r = 0; r <= i; ++r)
                    if (block_of[static_cast<size_t>(r)] ==
                        block_of[static_cast<size_t>(i)])
                        scores(e + r) =
                            qh.dot(k.row(r).segment(g * hd, hd)) * inv_sqrt;
                RowVectorXd attn = softmax_row(scores);
                RowVectorXd c = RowVectorXd::Zero(hd);
                for (long r = 0; r < e; ++r)
                    c += attn(r) * lc.v.row(r).segment(g * hd, hd);
                for (long r = 0; r <= i; ++r)
                    c += attn(e + r) * v.row(r).segment(g * hd, hd);
                ctx.row(i).segment(hq * hd, hd) = c;
                if (score_pairs) {
                    long vis = e;
                    for (long r = 0; r <= i; ++r)
                        if (block_of[static_cast<size_t>(r)] ==
                            block_of[static_cast<size_t>(i)])
                            ++vis;
                    *score_pairs += vis;
                }
            }
        }
        x += ctx * lp.wo->value;
        MatrixXd f = hmat::value_rmsnorm(x, lp.ffn_gain->value.row(0),
                                         cfg.rms_eps);
        MatrixXd gate = f * lp.w_gate->value;
        MatrixXd up = f * lp.w_up->value;
        for (long i = 0; i < gate.rows(); ++i)
            for (long j = 0; j < gate.cols(); ++j)
                gate(i, j) =
                    gate(i, j) / (1.0 + std::exp(-gate(i, j))) * up(i, j);
        x += gate * lp.w_down->value;
    }

    MatrixXd out =
        hmat::value_rmsnorm(x, model.final_gain->value.row(0), cfg.rms_eps);
    std::vector<double> scores_out;
    for (long ap : anchor_pos) {
        RowVectorXd logits = out.row(ap) * model.lm_head->value;
        RowVectorXd a = logits.segment(vocab.action_base(), vocab.n_actions);
        RowVectorXd ex = (a.array() - a.maxCoeff()).exp();
        scores_out.push_back(ex(target_action) / ex.sum());
    }
    return scores_out;
}

double score_sequential(const hmat::ModelState& model, const AnchorCache& cache,
                        const dmrq::ItemCodes& candidate,
                        const seq::Vocab& vocab, int target_action) {
    AnchorCache session = cache;  // private copy of the shared history
    int l_valid = 0;
    for (const auto& mt : session.meta) l_valid = std::max(l_valid, mt.m);
    std::vector<seq::SemanticToken> toks;
    int n = 1;
    for (int id : seq::item_token_ids(candidate, vocab))
        toks.push_back({id, seq::TokenKind::ItemCode, l_valid + 1, n++});
    toks.push_back({vocab.anchor_id(), seq::TokenKind::Anchor, l_valid + 1, n});
    MatrixXd logits = incremental_decode(model, session, toks);
    RowVectorXd a = logits.row(logits.rows() - 1)
                        .segment(vocab.action_base(), vocab.n_actions);
    RowVectorXd ex = (a.array() - a.maxCoeff()).exp();
    return ex(target_action) / ex.sum();
}

// ---------------------------------------------------------------------------
// Benchmark
// ---------------------------------------------------------------------------

namespace {

std::vector<seq::SemanticToken> random_anchored_stream(
    const seq::Vocab& vocab, const WorkloadSpec& spec, Rng& rng) {
    std::vector<seq::SemanticToken> toks;
    for (int n = 1; n <= spec.l_u; ++n)
        toks.push_back({vocab.profile_id(static_cast<int>(
                            rng.uniform_int(static_cast<uint64_t>(
                                vocab.profile_buckets)))),
                        seq::TokenKind::ProfileCode, 0, n});
    const int code_span = (vocab.n_sh + vocab.n_m) * vocab.v;
    for (int t = 1; t <= spec.k; ++t) {
        for (int n = 1; n <= spec.l_i; ++n)
            toks.push_back({1 + static_cast<int>(rng.uniform_int(
                                    static_cast<uint64_t>(code_span))),
                            seq::TokenKind::ItemCode, t, n});
        toks.push_back({vocab.anchor_id(), seq::TokenKind::Anchor, t,
                        spec.l_i + 1});
        toks.push_back({vocab.action_id(static_cast<int>(rng.uniform_int(
                            static_cast<uint64_t>(vocab.n_actions)))),
                        seq::TokenKind::Action, t, spec.l_i + 2});
    }
    return toks;
}

double percentile(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    size_t idx = static_cast<size_t>(
        std::ceil(p * static_cast<double>(v.size()))) - 1;
    return v[std::min(idx, v.size() - 1)];
}

}  // namespace

BenchReport bench_serving(const hmat::ModelState& model,
                          const seq::Vocab& vocab, const WorkloadSpec& spec) {
    if (spec.k < 0 || spec.l_i < 1 || spec.l_u < 0 || spec.repeats < 1)
        throw ConfigError("bench: bad workload spec");
    Rng rng(stage_seed(spec.seed, "bench"));
    const auto& cfg = model.cfg;
    BenchReport rep;

    auto stream = random_anchored_stream(vocab, spec, rng);
    AnchorCache cache = make_cache(model);
    incremental_decode(model, cache, stream, &rep.ma_pairs_counted);

    // Closed-form visible keys: profile query n sees n keys; query j of
    // segment t sees l_u + (t-1) anchors-plus-profile plus j own-segment
    // keys. Counted per layer per query head.
    long per_layer = 0;
    for (int n = 1; n <= spec.l_u; ++n) per_layer += n;
    for (int t = 1; t <= spec.k; ++t)
        for (int j = 1; j <= spec.l_i + 2; ++j)
            per_layer += spec.l_u + (t - 1) + j;
    rep.ma_pairs_analytic =
        per_layer * static_cast<long>(cfg.n_q) * cfg.n_layers;

    const long flat_len = spec.l_u + static_cast<long>(spec.k) * spec.l_i;
    rep.flat_pairs_analytic = flat_len * (flat_len + 1) / 2 *
                              static_cast<long>(cfg.n_q) * cfg.n_layers;
    rep.ma_hist_keys = spec.l_u + spec.k;
    rep.flat_hist_keys = flat_len;
    rep.hist_ratio = static_cast<double>(rep.flat_hist_keys) /
                     static_cast<double>(std::max(1L, rep.ma_hist_keys));

    rep.cache_entries = cache.entries();
    rep.cache_bytes = cache.bytes();
    rep.flat_entries = static_cast<size_t>(flat_len);
    rep.flat_bytes = static_cast<size_t>(flat_len) *
                     static_cast<size_t>(cfg.n_layers) * 2 *
                     static_cast<size_t>(cfg.n_kv * cfg.head_dim()) *
                     sizeof(double);

    // Latency: decoding one additional item segment over the warm cache
    // vs a full dense MA-masked forward of the whole history.
    seq::TokenStream full;
    full.tokens = stream;
    for (size_t i = 0; i < stream.size(); ++i) {
        if (stream[i].kind == seq::TokenKind::Anchor)
            full.anchor_positions.push_back(static_cast<int>(i));
        if (stream[i].kind == seq::TokenKind::Action)
            full.action_positions.push_back(static_cast<int>(i));
    }
    Eigen::MatrixXd mask = hmat::build_mask(full, true);

    std::vector<double> decode_ms, full_ms;
    for (int r = 0; r < spec.repeats; ++r) {
        WorkloadSpec one = spec;
        one.k = 1;
        one.l_u = 0;
        auto seg = random_anchored_stream(vocab, one, rng);
        for (auto& tk : seg) tk.m = spec.k + 1 + r;
        AnchorCache c2 = cache;
        c2.last_m = spec.k + r;  // allow appending the fresh segment
        c2.last_n = 0;
        auto t0 = std::chrono::steady_clock::now();
        incremental_decode(model, c2, seg);
        auto t1 = std::chrono::steady_clock::now();
        decode_ms.push_back(
            std::chrono::duration<double, std::milli>(t1 - t0).count());
        cache = std::move(c2);

        auto t2 = std::chrono::steady_clock::now();
        hmat::forward_values(model, full, mask);
        auto t3 = std::chrono::steady_clock::now();
        full_ms.push_back(
            std::chrono::duration<double, std::milli>(t3 - t2).count());
    }
    rep.decode_ms_median = percentile(decode_ms, 0.5);
    rep.decode_ms_p99 = percentile(decode_ms, 0.99);
    rep.full_ms_median = percentile(full_ms, 0.5);
    rep.full_ms_p99 = percentile(full_ms, 0.99);
    return rep;
}

void write_bench_csv(const BenchReport& r, const WorkloadSpec& spec,
                     const std::string& path) {
    std::ofstream f(path);
    if (!f) throw Error("cannot write file: " + path);
    f << "l_u,k,l_i,n_candidates,"
         "ma_pairs_counted,ma_pairs_analytic,flat_pairs_analytic,"
         "ma_hist_keys,flat_hist_keys,hist_ratio,"
         "cache_entries,cache_bytes,flat_entries,flat_bytes,"
         "decode_ms_median,decode_ms_p99,full_ms_median,full_ms_p99\n";
    f << spec.l_u << ',' << spec.k << ',' << spec.l_i << ','
      << spec.n_candidates << ',' << r.ma_pairs_counted << ','
      << r.ma_pairs_analytic << ',' << r.flat_pairs_analytic << ','
      << r.ma_hist_keys << ',' << r.flat_hist_keys << ',' << r.hist_ratio
      << ',' << r.cache_entries << ',' << r.cache_bytes << ','
      << r.flat_entries << ',' << r.flat_bytes << ',' << r.decode_ms_median
      << ',' << r.decode_ms_p99 << ',' << r.full_ms_median << ','
      << r.full_ms_p99 << '\n';
}

}  // namespace hisam::serve
