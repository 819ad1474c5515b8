// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "hisam/ingest.hpp"
#include "hisam/tape.hpp"

namespace hisam::cga {

/// Aligned per-item feature set: one unit vector per modality on the
/// shared d-dimensional hypersphere.
struct ModalEmbeddingSet {
    std::string item_id;
    std::vector<Eigen::VectorXd> z;
};

struct AlignConfig {
    int d = 256;           // shared dimension
    double tau = 0.07;     // softmax temperature
    int anchor = 0;        // anchor modality index
    int batch = 16;
    double lr = 1e-3;
    int steps = 200;
    uint64_t seed = 1;
};

/// Per-modality linear projection heads, stored as d_j x d matrices
/// (applied as raw^T W, then unit-normalized).
struct ProjectionHeads {
    std::vector<Eigen::MatrixXd> W;
};

/// W-projection followed by strict unit normalization. Throws Error when
/// the projected norm falls below 1e-12.
Eigen::VectorXd project(const Eigen::MatrixXd& W, const Eigen::VectorXd& raw);

/// sqrt(max(det(G), 0)) for the Gram matrix of a set of unit vectors.
/// In [0, 1] by Hadamard's inequality.
double gram_volume(const std::vector<Eigen::VectorXd>& vectors);

/// Symmetric volume-contrastive loss over a batch of aligned sets, with
/// in-batch negatives (K = B).
double alignment_loss(const std::vector<ModalEmbeddingSet>& batch,
                      const AlignConfig& cfg);

/// Autograd version used by training and by the gradient-check tests.
/// `z_rows[i][j]` is the projected+normalized 1 x d row for item i,
/// modality j.
ag::Var alignment_loss_graph(
    const std::vector<std::vector<ag::Var>>& z_rows, const AlignConfig& cfg);

struct AlignResult {
    ProjectionHeads heads;
    std::vector<ModalEmbeddingSet> aligned;
    std::vector<double> curve;  // loss per step
};

ProjectionHeads init_heads(const std::vector<int>& dims, int d, uint64_t seed);

/// Applies trained heads to every corpus item.
std::vector<ModalEmbeddingSet> apply_heads(const ingest::Corpus& corpus,
                                           const ProjectionHeads& heads);

AlignResult train_alignment(const ingest::Corpus& corpus,
                            const AlignConfig& cfg);

void save_heads(const ProjectionHeads& heads, const std::string& path);
ProjectionHeads load_heads(const std::string& path);

}  // namespace hisam::cga
