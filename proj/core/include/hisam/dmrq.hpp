// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "hisam/cga.hpp"
#include "hisam/tape.hpp"

namespace hisam::dmrq {

struct DmrqConfig {
    int n_sh = 3;        // shared RQ depth
    int v = 512;         // codebook size (all books)
    int d = 256;         // embedding dim
    int h = 4;           // PSGR subspaces; h * d_h == d
    double beta = 1.0;   // VQ loss weight
    double lambda = 0.1; // MI loss weight
    double gamma = 0.25; // commitment coefficient
    bool learned_fuse = false;  // default: arithmetic mean
    double lr = 1e-3;
    double est_lr = 1e-3;
    int epochs = 10;
    int batch = 32;
    bool dead_reseed = true;
    uint64_t seed = 1;

    int d_h() const { return d / h; }
    void validate(int n_modalities) const;
};

/// Diagonal-Gaussian variational approximator q(x|z) with separate
/// one-hidden-layer MLPs for the mean and (softplus-mapped) scale.
struct VariationalEstimator {
    ag::Var mu_w1, mu_b1, mu_w2, mu_b2;
    ag::Var sg_w1, sg_b1, sg_w2, sg_b2;
    std::vector<ag::Var> params() const;
};

/// Shared + specific codebooks plus fuse/PSGR parameters. Matrices are
/// held as tape parameters; read `->value` for inference paths.
struct CodebookStack {
    DmrqConfig cfg;
    int n_m = 0;
    std::vector<ag::Var> shared;    // n_sh books, each v x d
    std::vector<ag::Var> specific;  // n_m books, each v x d
    ag::Var fuse_w;                 // (n_m*d) x d, used when learned_fuse
    ag::Var psgr_wq, psgr_wk, psgr_wv, psgr_wo;  // each d x d
    std::vector<VariationalEstimator> estimators;  // one per modality

    std::vector<ag::Var> main_params() const;       // codebooks+fuse+psgr
    std::vector<ag::Var> estimator_params() const;
};

struct ItemCodes {
    std::string item_id;
    std::vector<int> c_sh;                  // n_sh codes
    std::vector<int> c_sp;                  // n_m codes
    Eigen::VectorXd z_hat_sh;
    std::vector<Eigen::VectorXd> z_hat_sp;  // per modality
};

CodebookStack init_stack(const DmrqConfig& cfg, int n_modalities,
                         uint64_t seed);

/// Nearest-entry code with lowest-index tie breaking.
int nearest_code(const Eigen::VectorXd& x, const Eigen::MatrixXd& entries);

Eigen::VectorXd fuse_value(const std::vector<Eigen::VectorXd>& z,
                           const CodebookStack& stack);

struct RqResult {
    std::vector<int> codes;
    Eigen::VectorXd reconstruction;  // fixed-order sum of selected entries
    Eigen::VectorXd residual;        // f - reconstruction, exactly
};
RqResult residual_quantize_shared(const Eigen::VectorXd& f,
                                  const CodebookStack& stack);

Eigen::VectorXd psgr_recover(const Eigen::VectorXd& residual,
                             const Eigen::VectorXd& probe,
                             const CodebookStack& stack);

std::pair<int, Eigen::VectorXd> quantize_specific(const Eigen::VectorXd& z_sp,
                                                  const Eigen::MatrixXd& entries);

/// vCLUB estimate of I(z_sh; z_sp): batch rows are samples. Identically 0
/// for a single-row batch.
double vclub_estimate(const Eigen::MatrixXd& z_sh, const Eigen::MatrixXd& z_sp,
                      const VariationalEstimator& est);
ag::Var vclub_graph(const ag::Var& z_sh, const ag::Var& z_sp,
                    const VariationalEstimator& est);

/// One likelihood-ascent step on sum_k log q(x_k | z_k).
void fit_estimator_step(VariationalEstimator& est, const Eigen::MatrixXd& z_sh,
                        const Eigen::MatrixXd& z_sp, ag::Adam& opt);

struct LossComponents {
    double reconstruction = 0;
    double vq_sh = 0;
    double vq_sp = 0;
    double mi = 0;
    double total = 0;
};

struct LossGraph {
    ag::Var total;
    ag::Var reconstruction, vq_sh, vq_sp, mi;
    // Per-layer code usage for this batch, used for dead-code tracking.
    std::vector<std::vector<int>> shared_hits;    // [layer][code]
    std::vector<std::vector<int>> specific_hits;  // [modality][code]
};

/// Code assignments and stop-gradient snapshots captured at one parameter
/// point. Evaluating the loss against a held snapshot turns it into an
/// ordinary differentiable function of the parameters whose analytic
/// gradient at the capture point equals the training gradient; the
/// finite-difference checks rely on that.
struct LossSnapshots {
    std::vector<std::vector<int>> sh_codes;               // [item][layer]
    std::vector<std::vector<Eigen::VectorXd>> r_snaps;    // [item][layer]
    std::vector<std::vector<Eigen::VectorXd>> e_snaps;    // [item][layer]
    std::vector<Eigen::VectorXd> f_snaps;                 // [item]
    std::vector<std::vector<int>> sp_codes;               // [item][modality]
    std::vector<std::vector<Eigen::VectorXd>> zsp_snaps;  // [item][modality]
    std::vector<std::vector<Eigen::VectorXd>> esp_snaps;  // [item][modality]
};

LossSnapshots capture_snapshots(const std::vector<cga::ModalEmbeddingSet>& batch,
                                const CodebookStack& stack);

/// Mean DMRQ objective over a batch of aligned sets (training form: codes
/// and snapshots taken at the current parameter values).
LossGraph dmrq_loss_graph(const std::vector<cga::ModalEmbeddingSet>& batch,
                          const CodebookStack& stack);

/// Same objective with the quantization pinned to `snaps`.
LossGraph dmrq_loss_graph(const std::vector<cga::ModalEmbeddingSet>& batch,
                          const CodebookStack& stack,
                          const LossSnapshots& snaps);
LossComponents dmrq_loss(const std::vector<cga::ModalEmbeddingSet>& batch,
                         const CodebookStack& stack);

struct TrainResult {
    CodebookStack stack;
    std::vector<double> curve;  // reconstruction loss per epoch
    std::vector<std::vector<long>> usage;  // last-epoch code usage per book
};
TrainResult train_dmrq(const std::vector<cga::ModalEmbeddingSet>& aligned,
                       const DmrqConfig& cfg, int n_modalities);

std::vector<ItemCodes> tokenize(const std::vector<cga::ModalEmbeddingSet>& aligned,
                                const CodebookStack& stack);

/// Mean cosine similarity between each specific layer's quantized output
/// and each modality's aligned input: rows = specific layer, cols =
/// modality. The disentanglement diagnostic checks the diagonal argmax.
Eigen::MatrixXd layer_modality_similarity(
    const std::vector<cga::ModalEmbeddingSet>& aligned,
    const CodebookStack& stack);

void save_stack(const CodebookStack& stack, const std::string& path);
CodebookStack load_stack(const std::string& path);

}  // namespace hisam::dmrq
