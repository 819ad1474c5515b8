// Copyright (C) 2026 Hi-SAM Contributors
// SPDX-License-Identifier: Apache-2.0

#include "hisam/tape.hpp"

#include <cmath>
#include <limits>
#include <unordered_set>

#include "hisam/common.hpp"

namespace hisam::ag {

namespace {

Var make_node(Matrix v, std::vector<Var> parents) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->parents = std::move(parents);
    for (const auto& p : n->parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    return n;
}

}  // namespace

Var constant(Matrix v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

Var constant(double v) {
    Matrix m(1, 1);
    m(0, 0) = v;
    return constant(std::move(m));
}

Var param(Matrix v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    return n;
}

Var add(const Var& a, const Var& b) {
    auto n = make_node(a->value + b->value, {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), b = b.get()]() {
            if (a->requires_grad) {
                a->ensure_grad();
                a->grad += np->grad;
            }
            if (b->requires_grad) {
                b->ensure_grad();
                b->grad += np->grad;
            }
        };
    }
    return n;
}

Var sub(const Var& a, const Var& b) {
    auto n = make_node(a->value - b->value, {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), b = b.get()]() {
            if (a->requires_grad) {
                a->ensure_grad();
                a->grad += np->grad;
            }
            if (b->requires_grad) {
                b->ensure_grad();
                b->grad -= np->grad;
            }
        };
    }
    return n;
}

Var mul(const Var& a, const Var& b) {
    auto n = make_node(a->value.cwiseProduct(b->value), {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), b = b.get()]() {
            if (a->requires_grad) {
                a->ensure_grad();
                a->grad += np->grad.cwiseProduct(b->value);
            }
            if (b->requires_grad) {
                b->ensure_grad();
                b->grad += np->grad.cwiseProduct(a->value);
            }
        };
    }
    return n;
}

Var scale(const Var& a, double s) {
    auto n = make_node(a->value * s, {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), s]() {
            a->ensure_grad();
            a->grad += np->grad * s;
        };
    }
    return n;
}

Var add_scalar(const Var& a, double s) {
    auto n = make_node(a->value.array() + s, {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get()]() {
            a->ensure_grad();
            a->grad += np->grad;
        };
    }
    return n;
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var matmul(const Var& a, const Var& b) {
    auto n = make_node(a->value * b->value, {a, b});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), b = b.get()]() {
            if (a->requires_grad) {
                a->ensure_grad();
                a->grad += np->grad * b->value.transpose();
            }
            if (b->requires_grad) {
                b->ensure_grad();
                b->grad += a->value.transpose() * np->grad;
            }
        };
    }
    return n;
}

Var transpose(const Var& a) {
    auto n = make_node(a->value.transpose(), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get()]() {
            a->ensure_grad();
            a->grad += np->grad.transpose();
        };
    }
    return n;
}

Var sum_all(const Var& a) {
    Matrix v(1, 1);
    v(0, 0) = a->value.sum();
    auto n = make_node(std::move(v), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get()]() {
            a->ensure_grad();
            a->grad.array() += np->grad(0, 0);
        };
    }
    return n;
}

Var mean_all(const Var& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->value.size()));
}

Var slice_rows(const Var& a, int start, int nrows) {
    auto n = make_node(a->value.middleRows(start, nrows), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), start, nrows]() {
            a->ensure_grad();
            a->grad.middleRows(start, nrows) += np->grad;
        };
    }
    return n;
}

Var slice_cols(const Var& a, int start, int ncols) {
    auto n = make_node(a->value.middleCols(start, ncols), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), start, ncols]() {
            a->ensure_grad();
            a->grad.middleCols(start, ncols) += np->grad;
        };
    }
    return n;
}

Var concat_rows(const std::vector<Var>& parts) {
    long rows = 0;
    long cols = parts.front()->value.cols();
    for (const auto& p : parts) rows += p->value.rows();
    Matrix v(rows, cols);
    long r = 0;
    for (const auto& p : parts) {
        v.middleRows(r, p->value.rows()) = p->value;
        r += p->value.rows();
    }
    auto n = make_node(std::move(v), parts);
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np]() {
            long r = 0;
            for (const auto& p : np->parents) {
                long nr = p->value.rows();
                if (p->requires_grad) {
                    p->ensure_grad();
                    p->grad += np->grad.middleRows(r, nr);
                }
                r += nr;
            }
        };
    }
    return n;
}

Var concat_cols(const std::vector<Var>& parts) {
    long cols = 0;
    long rows = parts.front()->value.rows();
    for (const auto& p : parts) cols += p->value.cols();
    Matrix v(rows, cols);
    long c = 0;
    for (const auto& p : parts) {
        v.middleCols(c, p->value.cols()) = p->value;
        c += p->value.cols();
    }
    auto n = make_node(std::move(v), parts);
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np]() {
            long c = 0;
            for (const auto& p : np->parents) {
                long nc = p->value.cols();
                if (p->requires_grad) {
                    p->ensure_grad();
                    p->grad += np->grad.middleCols(c, nc);
                }
                c += nc;
            }
        };
    }
    return n;
}

Var gather_rows(const Var& table, const std::vector<int>& rows) {
    Matrix v(static_cast<long>(rows.size()), table->value.cols());
    for (size_t i = 0; i < rows.size(); ++i) v.row(i) = table->value.row(rows[i]);
    auto n = make_node(std::move(v), {table});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, t = table.get(), rows]() {
            t->ensure_grad();
            for (size_t i = 0; i < rows.size(); ++i)
                t->grad.row(rows[i]) += np->grad.row(i);
        };
    }
    return n;
}

Var pick(const Var& a, int r, int c) {
    Matrix v(1, 1);
    v(0, 0) = a->value(r, c);
    auto n = make_node(std::move(v), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), r, c]() {
            a->ensure_grad();
            a->grad(r, c) += np->grad(0, 0);
        };
    }
    return n;
}

Var add_row_broadcast(const Var& a, const Var& row) {
    auto n = make_node(a->value.rowwise() + row->value.row(0), {a, row});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), b = row.get()]() {
            if (a->requires_grad) {
                a->ensure_grad();
                a->grad += np->grad;
            }
            if (b->requires_grad) {
                b->ensure_grad();
                b->grad.row(0) += np->grad.colwise().sum();
            }
        };
    }
    return n;
}

Var scale_cols(const Var& a, const Var& gain) {
    Matrix v = a->value.array().rowwise() * gain->value.row(0).array();
    auto n = make_node(std::move(v), {a, gain});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), g = gain.get()]() {
            if (a->requires_grad) {
                a->ensure_grad();
                a->grad.array() += np->grad.array().rowwise() * g->value.row(0).array();
            }
            if (g->requires_grad) {
                g->ensure_grad();
                g->grad.row(0) +=
                    np->grad.cwiseProduct(a->value).colwise().sum();
            }
        };
    }
    return n;
}

Var softmax_rows(const Var& a) {
    const double neg_inf = -std::numeric_limits<double>::infinity();
    Matrix v(a->value.rows(), a->value.cols());
    for (long r = 0; r < a->value.rows(); ++r) {
        double mx = a->value.row(r).maxCoeff();
        if (mx == neg_inf) {
            // All-masked row: defined as zero output.
            v.row(r).setZero();
            continue;
        }
        Eigen::ArrayXd e = (a->value.row(r).array() - mx).exp();
        v.row(r) = (e / e.sum()).matrix();
    }
    auto n = make_node(std::move(v), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get()]() {
            a->ensure_grad();
            for (long r = 0; r < np->value.rows(); ++r) {
                const auto p = np->value.row(r).array();
                const auto d = np->grad.row(r).array();
                double dot = (p * d).sum();
                Eigen::ArrayXd dx = p * (d - dot);
                for (long c = 0; c < np->value.cols(); ++c) {
                    if (std::isfinite(a->value(r, c))) a->grad(r, c) += dx(c);
                }
            }
        };
    }
    return n;
}

Var log_softmax_rows(const Var& a) {
    Matrix v(a->value.rows(), a->value.cols());
    for (long r = 0; r < a->value.rows(); ++r) {
        double mx = a->value.row(r).maxCoeff();
        double lse = std::log((a->value.row(r).array() - mx).exp().sum()) + mx;
        v.row(r) = a->value.row(r).array() - lse;
    }
    auto n = make_node(std::move(v), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get()]() {
            a->ensure_grad();
            for (long r = 0; r < np->value.rows(); ++r) {
                const auto d = np->grad.row(r).array();
                double dsum = d.sum();
                a->grad.row(r).array() +=
                    d - np->value.row(r).array().exp() * dsum;
            }
        };
    }
    return n;
}

namespace {

Var unary(const Var& a, Matrix v, std::function<Matrix(const Node&)> dfn) {
    auto n = make_node(std::move(v), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), dfn = std::move(dfn)]() {
            a->ensure_grad();
            a->grad += np->grad.cwiseProduct(dfn(*np));
        };
    }
    return n;
}

}  // namespace

Var sigmoid(const Var& a) {
    Matrix v = (1.0 / (1.0 + (-a->value.array()).exp())).matrix();
    return unary(a, std::move(v), [](const Node& n) -> Matrix {
        return (n.value.array() * (1.0 - n.value.array())).matrix();
    });
}

Var tanh_(const Var& a) {
    Matrix v = a->value.array().tanh().matrix();
    return unary(a, std::move(v), [](const Node& n) -> Matrix {
        return (1.0 - n.value.array().square()).matrix();
    });
}

Var exp_(const Var& a) {
    Matrix v = a->value.array().exp().matrix();
    return unary(a, std::move(v),
                 [](const Node& n) -> Matrix { return n.value; });
}

Var log_(const Var& a) {
    Matrix v = a->value.array().log().matrix();
    Matrix av = a->value;
    return unary(a, std::move(v), [av](const Node&) -> Matrix {
        return av.cwiseInverse();
    });
}

Var softplus(const Var& a) {
    // log(1 + e^x), computed stably.
    Matrix v = (a->value.array().max(0.0) +
                (1.0 + (-a->value.array().abs()).exp()).log())
                   .matrix();
    Matrix av = a->value;
    return unary(a, std::move(v), [av](const Node&) -> Matrix {
        return (1.0 / (1.0 + (-av.array()).exp())).matrix();
    });
}

Var silu(const Var& a) { return mul(a, sigmoid(a)); }

Var rmsnorm_rows(const Var& a, double eps) {
    long cols = a->value.cols();
    Matrix v(a->value.rows(), cols);
    Eigen::VectorXd inv_rms(a->value.rows());
    for (long r = 0; r < a->value.rows(); ++r) {
        double ms = a->value.row(r).squaredNorm() / static_cast<double>(cols);
        inv_rms(r) = 1.0 / std::sqrt(ms + eps);
        v.row(r) = a->value.row(r) * inv_rms(r);
    }
    auto n = make_node(std::move(v), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), inv_rms, cols]() {
            a->ensure_grad();
            for (long r = 0; r < np->value.rows(); ++r) {
                double s = inv_rms(r);
                double xd = a->value.row(r).dot(np->grad.row(r));
                a->grad.row(r) +=
                    s * np->grad.row(r) -
                    (s * s * s / static_cast<double>(cols)) * xd *
                        a->value.row(r);
            }
        };
    }
    return n;
}

Var normalize_rows(const Var& a, double min_norm) {
    Matrix v(a->value.rows(), a->value.cols());
    Eigen::VectorXd norms(a->value.rows());
    for (long r = 0; r < a->value.rows(); ++r) {
        double nr = a->value.row(r).norm();
        if (nr < min_norm)
            throw Error("normalize_rows: degenerate row with norm " +
                        std::to_string(nr));
        norms(r) = nr;
        v.row(r) = a->value.row(r) / nr;
    }
    auto n = make_node(std::move(v), {a});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, a = a.get(), norms]() {
            a->ensure_grad();
            for (long r = 0; r < np->value.rows(); ++r) {
                double nr = norms(r);
                double xd = a->value.row(r).dot(np->grad.row(r));
                a->grad.row(r) += np->grad.row(r) / nr -
                                  a->value.row(r) * (xd / (nr * nr * nr));
            }
        };
    }
    return n;
}

Var detach(const Var& a) { return constant(a->value); }

Var straight_through(const Var& cont, const Matrix& quantized) {
    auto n = make_node(quantized, {cont});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, c = cont.get()]() {
            c->ensure_grad();
            c->grad += np->grad;
        };
    }
    return n;
}

Var sqrt_det_psd(const Var& gram) {
    double det = gram->value.determinant();
    double vol = std::sqrt(std::max(det, 0.0));
    Matrix v(1, 1);
    v(0, 0) = vol;
    auto n = make_node(std::move(v), {gram});
    if (n->requires_grad) {
        Node* np = n.get();
        n->backprop = [np, g = gram.get(), det, vol]() {
            g->ensure_grad();
            // dV/dG = det(G) G^{-T} / (2V); pseudo-inverse fallback when the
            // Gram matrix is (numerically) singular.
            Matrix ddet;
            if (det >= 1e-10) {
                ddet = det * g->value.inverse().transpose();
            } else {
                ddet = det * g->value.completeOrthogonalDecomposition()
                                 .pseudoInverse()
                                 .transpose();
            }
            double denom = 2.0 * std::max(vol, 1e-8);
            g->grad += (np->grad(0, 0) / denom) * ddet;
        };
    }
    return n;
}

void backward(const Var& root) {
    if (root->value.size() != 1)
        throw Error("backward: root must be a scalar node");
    // Iterative post-order DFS, then reverse sweep.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad();
    root->grad(0, 0) = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        if ((*it)->backprop) {
            (*it)->ensure_grad();
            (*it)->backprop();
        }
    }
}

void Adam::step(const std::vector<Var>& params) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (const auto& p : params) {
        p->ensure_grad();
        auto& slot = slots_[p.get()];
        if (slot.m.size() == 0) {
            slot.m = Matrix::Zero(p->value.rows(), p->value.cols());
            slot.v = Matrix::Zero(p->value.rows(), p->value.cols());
        }
        slot.m = beta1_ * slot.m + (1.0 - beta1_) * p->grad;
        slot.v = beta2_ * slot.v.array() +
                 (1.0 - beta2_) * p->grad.array().square();
        Matrix mhat = slot.m / bc1;
        Matrix vhat = slot.v / bc2;
        p->value.array() -= lr_ * mhat.array() / (vhat.array().sqrt() + eps_);
    }
}

void Adam::zero_grad(const std::vector<Var>& params) {
    for (const auto& p : params) {
        p->ensure_grad();
        p->grad.setZero();
    }
}

}  // namespace hisam::ag
