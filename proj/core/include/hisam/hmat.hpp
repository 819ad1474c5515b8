// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "hisam/seqstream.hpp"
#include "hisam/tape.hpp"

namespace hisam::hmat {

/// Rotary tables over decoupled halves of the head dimension: the first
/// half rotates with the item order m (low-frequency base), the second
/// with the local position n (high-frequency base).
struct HRopeTables {
    int d = 0;  // head dim, divisible by 4
    Eigen::VectorXd theta_inter;  // d/4 angles
    Eigen::VectorXd theta_intra;  // d/4 angles
};

HRopeTables make_hrope_tables(int head_dim, double b_inter = 10000.0,
                              double b_intra = 100.0);

Eigen::VectorXd hrope_apply(const Eigen::VectorXd& x, int m, int n,
                            const HRopeTables& t);

double hrope_score(const Eigen::VectorXd& q, const Eigen::VectorXd& k,
                   int m_q, int n_q, int m_k, int n_k, const HRopeTables& t);

/// Attention mask (0 visible / -inf masked), causality intersected with
/// the memory-anchor rule: a key is visible when it is profile (m_k = 0),
/// in the query's own segment (m_q = m_k), or a historical Anchor
/// (m_k < m_q). With `memory_anchor` false this is a plain causal mask.
Eigen::MatrixXd build_mask(const seq::TokenStream& stream,
                           bool memory_anchor = true);

struct ModelConfig {
    int width = 512;
    int n_layers = 4;
    int n_q = 8;
    int n_kv = 2;
    int vocab_size = 0;
    int ffn_mult = 5;
    double rms_eps = 1e-6;
    double b_inter = 10000.0;
    double b_intra = 100.0;
    uint64_t seed = 1;

    int head_dim() const { return width / n_q; }
    void validate() const;
};

struct LayerParams {
    ag::Var attn_gain;  // 1 x width
    ag::Var wq;         // width x width
    ag::Var wk;         // width x (n_kv * head_dim)
    ag::Var wv;         // width x (n_kv * head_dim)
    ag::Var wo;         // width x width
    ag::Var ffn_gain;   // 1 x width
    ag::Var w_gate;     // width x ffn
    ag::Var w_up;       // width x ffn
    ag::Var w_down;     // ffn x width
};

struct ModelState {
    ModelConfig cfg;
    HRopeTables tables;
    ag::Var embed;       // vocab x width
    std::vector<LayerParams> layers;
    ag::Var final_gain;  // 1 x width
    ag::Var lm_head;     // width x vocab

    std::vector<ag::Var> params() const;
};

ModelState init_model(const ModelConfig& cfg);

/// Per-position (cos, sin) coefficient rows for rotary application, one
/// row per token, width = head_dim. Shared by training and serving.
std::pair<Eigen::MatrixXd, Eigen::MatrixXd> rope_coeffs(
    const std::vector<std::pair<int, int>>& coords, const HRopeTables& t);

/// Constant head_dim x head_dim matrix P with (x P) giving the
/// (-x_odd, x_even) pair shuffle used by the rotation identity.
Eigen::MatrixXd rope_pair_shuffle(int head_dim);

/// One pre-norm decoder block on the autograd tape.
ag::Var layer_forward(const ag::Var& x, const LayerParams& layer,
                      const ModelConfig& cfg, const Eigen::MatrixXd& cos_m,
                      const Eigen::MatrixXd& sin_m,
                      const Eigen::MatrixXd& mask);

/// Full forward to per-position logits (T x vocab) over the whole vocab.
ag::Var forward(const ModelState& model, const seq::TokenStream& stream,
                const Eigen::MatrixXd& mask);

/// Value-only forward (no gradient bookkeeping kept by callers).
Eigen::MatrixXd forward_values(const ModelState& model,
                               const seq::TokenStream& stream,
                               const Eigen::MatrixXd& mask);

/// RMS-normalize rows and apply a gain row; value-path helper shared with
/// the serving code.
Eigen::MatrixXd value_rmsnorm(const Eigen::MatrixXd& x,
                              const Eigen::RowVectorXd& gain, double eps);

void save_model(const ModelState& model, const std::string& path);
ModelState load_model(const std::string& path);

}  // namespace hisam::hmat
