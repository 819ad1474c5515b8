// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_map>
#include <vector>

namespace hisam::ag {

using Matrix = Eigen::MatrixXd;

/// One node of the reverse-mode tape. Scalars are represented as 1x1
/// matrices. Nodes are built by the free functions below and kept alive
/// through shared_ptr parent edges.
class Node {
public:
    Matrix value;
    Matrix grad;  // lazily allocated, same shape as value
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void()> backprop;  // accumulates into parents' grads

    void ensure_grad() {
        if (grad.size() == 0) grad = Matrix::Zero(value.rows(), value.cols());
    }
    double scalar() const { return value(0, 0); }
};

using Var = std::shared_ptr<Node>;

Var constant(Matrix v);
Var constant(double v);
/// A trainable leaf; participates in gradient accumulation.
Var param(Matrix v);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);  // elementwise, same shape
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var neg(const Var& a);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var sum_all(const Var& a);                       // -> 1x1
Var mean_all(const Var& a);                      // -> 1x1
Var slice_rows(const Var& a, int start, int n);
Var slice_cols(const Var& a, int start, int n);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var gather_rows(const Var& table, const std::vector<int>& rows);
Var pick(const Var& a, int r, int c);             // -> 1x1
Var add_row_broadcast(const Var& a, const Var& row);   // row is 1xN
Var scale_cols(const Var& a, const Var& gain);         // gain is 1xN
Var softmax_rows(const Var& a);        // -inf entries become exact zeros
Var log_softmax_rows(const Var& a);
Var sigmoid(const Var& a);
Var tanh_(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var softplus(const Var& a);
Var silu(const Var& a);
Var rmsnorm_rows(const Var& a, double eps);
/// Row-wise L2 normalization; throws Error if any row norm < min_norm.
Var normalize_rows(const Var& a, double min_norm);
/// Stops gradient flow; value is copied.
Var detach(const Var& a);
/// Straight-through estimator: forward value is `quantized`, gradient
/// flows unchanged into `cont`.
Var straight_through(const Var& cont, const Matrix& quantized);
/// sqrt(max(det(G), 0)) for a symmetric PSD Gram matrix, with the
/// adjugate-identity gradient dV/dG = det(G) G^{-T} / (2V) and a
/// pseudo-inverse fallback when det(G) < 1e-10.
Var sqrt_det_psd(const Var& gram);

/// Runs reverse accumulation from a 1x1 root.
void backward(const Var& root);

/// Adam with bias correction; state keyed by parameter node identity.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

    void step(const std::vector<Var>& params);
    static void zero_grad(const std::vector<Var>& params);
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

private:
    struct Slot {
        Matrix m, v;
    };
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::unordered_map<Node*, Slot> slots_;
};

}  // namespace hisam::ag
