// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include "hisam/hmat.hpp"

#include <cmath>

#include "hisam/checkpoint.hpp"
#include "hisam/common.hpp"
#include "hisam/rng.hpp"

namespace hisam::hmat {

using ag::Var;
using Eigen::MatrixXd;
using Eigen::VectorXd;

HRopeTables make_hrope_tables(int head_dim, double b_inter, double b_intra) {
    if (head_dim <= 0 || head_dim % 4 != 0)
        throw ConfigError("hrope: head dim must be a positive multiple of 4");
    HRopeTables t;
    t.d = head_dim;
    const int q = head_dim / 4;
    t.theta_inter.resize(q);
    t.theta_intra.resize(q);
    const double half = static_cast<double>(head_dim) / 2.0;
    for (int j = 0; j < q; ++j) {
        double expo = -2.0 * static_cast<double>(j) / half;
        t.theta_inter(j) = std::pow(b_inter, expo);
        t.theta_intra(j) = std::pow(b_intra, expo);
    }
    return t;
}

Eigen::VectorXd hrope_apply(const VectorXd& x, int m, int n,
                            const HRopeTables& t) {
    if (x.size() != t.d) throw Error("hrope_apply: dim mismatch");
    VectorXd out(t.d);
    const int q = t.d / 4;
    for (int j = 0; j < q; ++j) {
        double a = static_cast<double>(m) * t.theta_inter(j);
        double c = std::cos(a), s = std::sin(a);
        out(2 * j) = c * x(2 * j) - s * x(2 * j + 1);
        out(2 * j + 1) = s * x(2 * j) + c * x(2 * j + 1);
    }
    const int off = t.d / 2;
    for (int j = 0; j < q; ++j) {
        double a = static_cast<double>(n) * t.theta_intra(j);
        double c = std::cos(a), s = std::sin(a);
        out(off + 2 * j) = c * x(off + 2 * j) - s * x(off + 2 * j + 1);
        out(off + 2 * j + 1) = s * x(off + 2 * j) + c * x(off + 2 * j + 1);
    }
    return out;
}

double hrope_score(const VectorXd& q, const VectorXd& k, int m_q, int n_q,
                   int m_k, int n_k, const HRopeTables& t) {
    return hrope_apply(q, m_q, n_q, t).dot(hrope_apply(k, m_k, n_k, t));
}

Eigen::MatrixXd build_mask(const seq::TokenStream& stream, bool memory_anchor) {
    const long n = static_cast<long>(stream.tokens.size());
    const double ninf = -std::numeric_limits<double>::infinity();
    MatrixXd m = MatrixXd::Constant(n, n, ninf);
    for (long qi = 0; qi < n; ++qi) {
        const auto& tq = stream.tokens[static_cast<size_t>(qi)];
        for (long ki = 0; ki <= qi; ++ki) {
            const auto& tk = stream.tokens[static_cast<size_t>(ki)];
            bool visible =
                !memory_anchor || tk.m == 0 || tq.m == tk.m ||
                (tk.m < tq.m && tk.kind == seq::TokenKind::Anchor);
            if (visible) m(qi, ki) = 0.0;
        }
    }
    return m;
}

void ModelConfig::validate() const {
    if (width <= 0 || n_layers < 1) throw ConfigError("model: bad width/layers");
    if (n_q < 1 || width % n_q != 0)
        throw ConfigError("model: n_q must divide width");
    if (n_kv < 1 || n_q % n_kv != 0)
        throw ConfigError("model: n_kv must divide n_q");
    if (head_dim() % 4 != 0)
        throw ConfigError("model: head dim must be divisible by 4");
    if (vocab_size < 2) throw ConfigError("model: vocab_size must be >= 2");
    if (ffn_mult < 1) throw ConfigError("model: ffn_mult must be >= 1");
}

std::vector<Var> ModelState::params() const {
    std::vector<Var> p{embed};
    for (const auto& l : layers) {
        p.push_back(l.attn_gain);
        p.push_back(l.wq);
        p.push_back(l.wk);
        p.push_back(l.wv);
        p.push_back(l.wo);
        p.push_back(l.ffn_gain);
        p.push_back(l.w_gate);
        p.push_back(l.w_up);
        p.push_back(l.w_down);
    }
    p.push_back(final_gain);
    p.push_back(lm_head);
    return p;
}

namespace {

Var linear_init(Rng& rng, long rows, long cols) {
    double s = 1.0 / std::sqrt(static_cast<double>(rows));
    MatrixXd m(rows, cols);
    for (long r = 0; r < rows; ++r)
        for (long c = 0; c < cols; ++c) m(r, c) = rng.uniform(-s, s);
    return ag::param(std::move(m));
}

}  // namespace

ModelState init_model(const ModelConfig& cfg) {
    cfg.validate();
    ModelState model;
    model.cfg = cfg;
    model.tables = make_hrope_tables(cfg.head_dim(), cfg.b_inter, cfg.b_intra);
    Rng rng(stage_seed(cfg.seed, "model-init"));
    MatrixXd emb(cfg.vocab_size, cfg.width);
    for (long r = 0; r < emb.rows(); ++r)
        for (long c = 0; c < emb.cols(); ++c) emb(r, c) = 0.02 * rng.gaussian();
    model.embed = ag::param(std::move(emb));
    const int ffn = cfg.ffn_mult * cfg.width;
    const int kv_w = cfg.n_kv * cfg.head_dim();
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerParams layer;
        layer.attn_gain = ag::param(MatrixXd::Ones(1, cfg.width));
        layer.wq = linear_init(rng, cfg.width, cfg.width);
        layer.wk = linear_init(rng, cfg.width, kv_w);
        layer.wv = linear_init(rng, cfg.width, kv_w);
        layer.wo = linear_init(rng, cfg.width, cfg.width);
        layer.ffn_gain = ag::param(MatrixXd::Ones(1, cfg.width));
        layer.w_gate = linear_init(rng, cfg.width, ffn);
        layer.w_up = linear_init(rng, cfg.width, ffn);
        layer.w_down = linear_init(rng, ffn, cfg.width);
        model.layers.push_back(std::move(layer));
    }
    model.final_gain = ag::param(MatrixXd::Ones(1, cfg.width));
    model.lm_head = linear_init(rng, cfg.width, cfg.vocab_size);
    return model;
}

std::pair<MatrixXd, MatrixXd> rope_coeffs(
    const std::vector<std::pair<int, int>>& coords, const HRopeTables& t) {
    const long n = static_cast<long>(coords.size());
    MatrixXd cs(n, t.d), sn(n, t.d);
    const int q = t.d / 4;
    const int off = t.d / 2;
    for (long i = 0; i < n; ++i) {
        auto [m, loc] = coords[static_cast<size_t>(i)];
        for (int j = 0; j < q; ++j) {
            double a = static_cast<double>(m) * t.theta_inter(j);
            cs(i, 2 * j) = cs(i, 2 * j + 1) = std::cos(a);
            sn(i, 2 * j) = sn(i, 2 * j + 1) = std::sin(a);
            double b = static_cast<double>(loc) * t.theta_intra(j);
            cs(i, off + 2 * j) = cs(i, off + 2 * j + 1) = std::cos(b);
            sn(i, off + 2 * j) = sn(i, off + 2 * j + 1) = std::sin(b);
        }
    }
    return {cs, sn};
}

Eigen::MatrixXd rope_pair_shuffle(int head_dim) {
    MatrixXd p = MatrixXd::Zero(head_dim, head_dim);
    for (int j = 0; j < head_dim / 2; ++j) {
        p(2 * j + 1, 2 * j) = -1.0;  // out_even = -x_odd
        p(2 * j, 2 * j + 1) = 1.0;   // out_odd = x_even
    }
    return p;
}

namespace {

// x rotated per row by the (cos, sin) coefficient rows.
Var rotate(const Var& x, const MatrixXd& cs, const MatrixXd& sn,
           const MatrixXd& shuffle) {
    return ag::add(ag::mul(x, ag::constant(cs)),
                   ag::mul(ag::matmul(x, ag::constant(shuffle)),
                           ag::constant(sn)));
}

Var rms_gained(const Var& x, const Var& gain, double eps) {
    return ag::scale_cols(ag::rmsnorm_rows(x, eps), gain);
}

}  // namespace

Var layer_forward(const Var& x, const LayerParams& layer,
                  const ModelConfig& cfg, const MatrixXd& cos_m,
                  const MatrixXd& sin_m, const MatrixXd& mask) {
    const int hd = cfg.head_dim();
    const int group = cfg.n_q / cfg.n_kv;
    static thread_local MatrixXd shuffle;
    if (shuffle.rows() != hd) shuffle = rope_pair_shuffle(hd);

    Var h = rms_gained(x, layer.attn_gain, cfg.rms_eps);
    Var q = ag::matmul(h, layer.wq);
    Var k = ag::matmul(h, layer.wk);
    Var v = ag::matmul(h, layer.wv);

    std::vector<Var> k_rot, v_heads;
    for (int g = 0; g < cfg.n_kv; ++g) {
        k_rot.push_back(
            rotate(ag::slice_cols(k, g * hd, hd), cos_m, sin_m, shuffle));
        v_heads.push_back(ag::slice_cols(v, g * hd, hd));
    }
    std::vector<Var> ctx;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
    Var mask_c = ag::constant(mask);
    for (int hq = 0; hq < cfg.n_q; ++hq) {
        Var qh = rotate(ag::slice_cols(q, hq * hd, hd), cos_m, sin_m, shuffle);
        const int g = hq / group;
        Var scores = ag::scale(ag::matmul(qh, ag::transpose(k_rot[g])),
                               inv_sqrt);
        Var attn = ag::softmax_rows(ag::add(scores, mask_c));
        ctx.push_back(ag::matmul(attn, v_heads[g]));
    }
    Var attn_out = ag::matmul(ag::concat_cols(ctx), layer.wo);
    Var x1 = ag::add(x, attn_out);

    Var f = rms_gained(x1, layer.ffn_gain, cfg.rms_eps);
    Var gated = ag::mul(ag::silu(ag::matmul(f, layer.w_gate)),
                        ag::matmul(f, layer.w_up));
    return ag::add(x1, ag::matmul(gated, layer.w_down));
}

Var forward(const ModelState& model, const seq::TokenStream& stream,
            const MatrixXd& mask) {
    const auto& cfg = model.cfg;
    if (stream.tokens.empty()) throw Error("forward: empty stream");
    if (mask.rows() != static_cast<long>(stream.tokens.size()) ||
        mask.cols() != mask.rows())
        throw Error("forward: mask shape does not match stream");
    std::vector<int> ids;
    std::vector<std::pair<int, int>> coords;
    for (const auto& t : stream.tokens) {
        if (t.vocab_id < 0 || t.vocab_id >= cfg.vocab_size)
            throw Error("forward: token id " + std::to_string(t.vocab_id) +
                        " out of vocab");
        ids.push_back(t.vocab_id);
        coords.emplace_back(t.m, t.n);
    }
    auto [cs, sn] = rope_coeffs(coords, model.tables);
    Var x = ag::gather_rows(model.embed, ids);
    for (const auto& layer : model.layers)
        x = layer_forward(x, layer, cfg, cs, sn, mask);
    x = rms_gained(x, model.final_gain, cfg.rms_eps);
    return ag::matmul(x, model.lm_head);
}

Eigen::MatrixXd forward_values(const ModelState& model,
                               const seq::TokenStream& stream,
                               const MatrixXd& mask) {
    return forward(model, stream, mask)->value;
}

Eigen::MatrixXd value_rmsnorm(const MatrixXd& x, const Eigen::RowVectorXd& gain,
                              double eps) {
    MatrixXd out(x.rows(), x.cols());
    for (long r = 0; r < x.rows(); ++r) {
        double ms = x.row(r).squaredNorm() / static_cast<double>(x.cols());
        out.row(r) =
            (x.row(r) / std::sqrt(ms + eps)).cwiseProduct(gain);
    }
    return out;
}

void save_model(const ModelState& model, const std::string& path) {
    std::vector<ckpt::NamedTensor> tensors;
    MatrixXd meta(1, 9);
    meta << model.cfg.width, model.cfg.n_layers, model.cfg.n_q, model.cfg.n_kv,
        model.cfg.vocab_size, model.cfg.ffn_mult, model.cfg.rms_eps,
        model.cfg.b_inter, model.cfg.b_intra;
    tensors.emplace_back("meta", meta);
    tensors.emplace_back("embed", model.embed->value);
    for (size_t l = 0; l < model.layers.size(); ++l) {
        const auto& lp = model.layers[l];
        std::string p = "layer." + std::to_string(l) + ".";
        tensors.emplace_back(p + "attn_gain", lp.attn_gain->value);
        tensors.emplace_back(p + "wq", lp.wq->value);
        tensors.emplace_back(p + "wk", lp.wk->value);
        tensors.emplace_back(p + "wv", lp.wv->value);
        tensors.emplace_back(p + "wo", lp.wo->value);
        tensors.emplace_back(p + "ffn_gain", lp.ffn_gain->value);
        tensors.emplace_back(p + "w_gate", lp.w_gate->value);
        tensors.emplace_back(p + "w_up", lp.w_up->value);
        tensors.emplace_back(p + "w_down", lp.w_down->value);
    }
    tensors.emplace_back("final_gain", model.final_gain->value);
    tensors.emplace_back("lm_head", model.lm_head->value);
    ckpt::save(path, tensors);
}

ModelState load_model(const std::string& path) {
    auto tensors = ckpt::load(path);
    const auto& meta = ckpt::find(tensors, "meta");
    ModelConfig cfg;
    cfg.width = static_cast<int>(meta(0, 0));
    cfg.n_layers = static_cast<int>(meta(0, 1));
    cfg.n_q = static_cast<int>(meta(0, 2));
    cfg.n_kv = static_cast<int>(meta(0, 3));
    cfg.vocab_size = static_cast<int>(meta(0, 4));
    cfg.ffn_mult = static_cast<int>(meta(0, 5));
    cfg.rms_eps = meta(0, 6);
    cfg.b_inter = meta(0, 7);
    cfg.b_intra = meta(0, 8);
    ModelState model = init_model(cfg);
    model.embed->value = ckpt::find(tensors, "embed");
    for (size_t l = 0; l < model.layers.size(); ++l) {
        auto& lp = model.layers[l];
        std::string p = "layer." + std::to_string(l) + ".";
        lp.attn_gain->value = ckpt::find(tensors, p + "attn_gain");
        lp.wq->value = ckpt::find(tensors, p + "wq");
        lp.wk->value = ckpt::find(tensors, p + "wk");
        lp.wv->value = ckpt::find(tensors, p + "wv");
        lp.wo->value = ckpt::find(tensors, p + "wo");
        lp.ffn_gain->value = ckpt::find(tensors, p + "ffn_gain");
        lp.w_gate->value = ckpt::find(tensors, p + "w_gate");
        lp.w_up->value = ckpt::find(tensors, p + "w_up");
        lp.w_down->value = ckpt::find(tensors, p + "w_down");
    }
    model.final_gain->value = ckpt::find(tensors, "final_gain");
    model.lm_head->value = ckpt::find(tensors, "lm_head");
    return model;
}

}  // namespace hisam::hmat
