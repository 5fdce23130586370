#include "uvit/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numbers>
#include <unordered_set>

#include "uvit/errors.hpp"

namespace uvit::ad {
namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;
using Strided = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using MutStrided = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using VecMap = Eigen::Map<Eigen::VectorXd>;
using ConstVecMap = Eigen::Map<const Eigen::VectorXd>;

thread_local bool g_grad_enabled = true;

constexpr double kLayerNormEps = 1e-6;

std::int64_t last_dim(const Tensor& t) {
    if (t.rank() == 0) throw ShapeError("expected at least one dimension");
    return t.dim(-1);
}

ConstMatMap as_matrix(const Tensor& t) {
    const auto cols = last_dim(t);
    return ConstMatMap(t.ptr(), cols ? t.size() / cols : 0, cols);
}

MatMap as_matrix(Tensor& t) {
    const auto cols = last_dim(t);
    return MatMap(t.ptr(), cols ? t.size() / cols : 0, cols);
}

Shape with_last(const Shape& s, std::int64_t last) {
    Shape out = s;
    out.back() = last;
    return out;
}

bool wants(const NodePtr& n) { return n && n->requires_grad; }

}  // namespace

Tensor& Node::grad_buffer() {
    if (grad.empty() && value.size() > 0) grad = Tensor(value.shape());
    if (grad.shape() != value.shape()) grad = Tensor(value.shape());
    return grad;
}

void Node::accumulate(const Tensor& g) {
    if (grad.empty()) {
        grad = g;
        return;
    }
    grad += g;
}

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
}

const Tensor& Var::grad() const {
    if (node_->grad.empty()) node_->grad = Tensor(node_->value.shape());
    return node_->grad;
}

void Var::zero_grad() {
    if (node_) node_->grad = Tensor();
}

void Var::backward() const {
    if (!node_ || node_->value.size() != 1) throw ShapeError("backward() needs a single-element output");
    if (!node_->requires_grad) return;

    // Iterative post-order DFS gives a topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> seen;
    std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->inputs.size()) {
            Node* child = n->inputs[next++].get();
            if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }

    node_->accumulate(Tensor(node_->value.shape(), 1.0));
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
    // Intermediate gradients are not needed once they have been propagated.
    for (Node* n : order) {
        if (n->backward) n->grad = Tensor();
    }
}

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
    const bool any = g_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                                   [](const Var& v) { return v.requires_grad(); });
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    if (any) {
        node->requires_grad = true;
        node->inputs.reserve(inputs.size());
        for (auto& v : inputs) node->inputs.push_back(v.node());
        node->backward = std::move(backward);
    }
    return Var(std::move(node));
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---- linear ----------------------------------------------------------------

Var linear(const Var& x, const Var& weight, const Var& bias) {
    const auto in = last_dim(x.value());
    if (weight.value().rank() != 2 || weight.dim(1) != in) {
        throw ShapeError("linear: weight " + shape_string(weight.shape()) + " incompatible with input " +
                         shape_string(x.shape()));
    }
    const auto out_dim = weight.dim(0);
    if (bias.defined() && (bias.value().rank() != 1 || bias.dim(0) != out_dim)) {
        throw ShapeError("linear: bias shape " + shape_string(bias.shape()));
    }
    Tensor out(with_last(x.shape(), out_dim));
    auto y = as_matrix(out);
    const auto X = as_matrix(x.value());
    const auto W = as_matrix(weight.value());
    y.noalias() = X * W.transpose();
    if (bias.defined()) y.rowwise() += ConstVecMap(bias.value().ptr(), out_dim).transpose();

    std::vector<Var> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result(std::move(out), std::move(inputs), [](Node& self) {
        const auto dY = as_matrix(self.grad);
        const auto& xin = self.inputs[0];
        const auto& w = self.inputs[1];
        if (wants(xin)) as_matrix(xin->grad_buffer()).noalias() += dY * as_matrix(w->value);
        if (wants(w)) as_matrix(w->grad_buffer()).noalias() += dY.transpose() * as_matrix(xin->value);
        if (self.inputs.size() > 2 && wants(self.inputs[2])) {
            auto& b = self.inputs[2]->grad_buffer();
            VecMap(b.ptr(), b.size()) += dY.colwise().sum().transpose();
        }
    });
}

// ---- element-wise ------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "add");
    return make_result(a.value() + b.value(), {a, b}, [](Node& self) {
        for (auto& in : self.inputs)
            if (wants(in)) in->accumulate(self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "sub");
    return make_result(a.value() - b.value(), {a, b}, [](Node& self) {
        if (wants(self.inputs[0])) self.inputs[0]->accumulate(self.grad);
        if (wants(self.inputs[1])) self.inputs[1]->accumulate(self.grad * -1.0);
    });
}

Var mul(const Var& a, const Var& b) {
    require_same_shape(a.value(), b.value(), "mul");
    Tensor out = a.value();
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
    return make_result(std::move(out), {a, b}, [](Node& self) {
        const auto& A = self.inputs[0];
        const auto& B = self.inputs[1];
        if (wants(A)) {
            auto& g = A->grad_buffer();
            for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * B->value[i];
        }
        if (wants(B)) {
            auto& g = B->grad_buffer();
            for (std::int64_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * A->value[i];
        }
    });
}

Var scale(const Var& a, double s) {
    return make_result(a.value() * s, {a}, [s](Node& self) { self.inputs[0]->accumulate(self.grad * s); });
}

Var gelu(const Var& x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
    return make_result(std::move(out), {x}, [](Node& self) {
        const auto& X = self.inputs[0];
        auto& g = X->grad_buffer();
        const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
        for (std::int64_t i = 0; i < g.size(); ++i) {
            const double v = X->value[i];
            const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
            g[i] += self.grad[i] * (cdf + v * pdf);
        }
    });
}

// ---- layer norm ----------------------------------------------------------------

Var layer_norm(const Var& x, const Var& gain, const Var& bias) {
    const auto D = last_dim(x.value());
    if (gain.defined() && gain.value().shape() != Shape{D}) throw ShapeError("layer_norm: gain shape");
    if (bias.defined() && bias.value().shape() != Shape{D}) throw ShapeError("layer_norm: bias shape");
    const auto X = as_matrix(x.value());
    const auto M = X.rows();

    Tensor xhat(x.shape());
    Tensor rstd(Shape{M});
    Tensor out(x.shape());
    auto Xh = as_matrix(xhat);
    auto Y = as_matrix(out);
    for (Eigen::Index r = 0; r < M; ++r) {
        const double mean = X.row(r).mean();
        const double var = (X.row(r).array() - mean).square().mean();
        const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
        rstd[r] = inv;
        Xh.row(r) = (X.row(r).array() - mean) * inv;
    }
    Y = Xh;
    if (gain.defined()) Y.array().rowwise() *= ConstVecMap(gain.value().ptr(), D).transpose().array();
    if (bias.defined()) Y.rowwise() += ConstVecMap(bias.value().ptr(), D).transpose();

    std::vector<Var> inputs{x};
    const bool has_gain = gain.defined();
    const bool has_bias = bias.defined();
    if (has_gain) inputs.push_back(gain);
    if (has_bias) inputs.push_back(bias);
    return make_result(std::move(out), std::move(inputs),
                       [xhat = std::move(xhat), rstd = std::move(rstd), has_gain, has_bias, D](Node& self) {
                           const auto dY = as_matrix(self.grad);
                           const auto Xh = as_matrix(xhat);
                           const auto& X = self.inputs[0];
                           const NodePtr gainp = has_gain ? self.inputs[1] : nullptr;
                           const NodePtr biasp = has_bias ? self.inputs[has_gain ? 2 : 1] : nullptr;
                           if (wants(gainp)) {
                               auto& g = gainp->grad_buffer();
                               VecMap(g.ptr(), D) += (dY.array() * Xh.array()).colwise().sum().transpose().matrix();
                           }
                           if (wants(biasp)) {
                               auto& g = biasp->grad_buffer();
                               VecMap(g.ptr(), D) += dY.colwise().sum().transpose();
                           }
                           if (wants(X)) {
                               RowMat dXh = dY;
                               if (gainp) dXh.array().rowwise() *= ConstVecMap(gainp->value.ptr(), D).transpose().array();
                               auto dX = as_matrix(X->grad_buffer());
                               for (Eigen::Index r = 0; r < dXh.rows(); ++r) {
                                   const double m1 = dXh.row(r).mean();
                                   const double m2 = (dXh.row(r).array() * Xh.row(r).array()).mean();
                                   dX.row(r).array() +=
                                       rstd[r] * (dXh.row(r).array() - m1 - Xh.row(r).array() * m2);
                               }
                           }
                       });
}

// ---- structural ops --------------------------------------------------------------

Var concat_cols(const Var& a, const Var& b) {
    const auto A = as_matrix(a.value());
    const auto B = as_matrix(b.value());
    if (A.rows() != B.rows()) throw ShapeError("concat_cols: row counts differ");
    const auto ka = A.cols();
    const auto kb = B.cols();
    Tensor out(Shape{A.rows(), ka + kb});
    auto Y = as_matrix(out);
    Y.leftCols(ka) = A;
    Y.rightCols(kb) = B;
    return make_result(std::move(out), {a, b}, [ka, kb](Node& self) {
        const auto dY = as_matrix(self.grad);
        if (wants(self.inputs[0])) as_matrix(self.inputs[0]->grad_buffer()) += dY.leftCols(ka);
        if (wants(self.inputs[1])) as_matrix(self.inputs[1]->grad_buffer()) += dY.rightCols(kb);
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
    const auto cols = last_dim(parts.front().value());
    std::int64_t rows = 0;
    for (const auto& p : parts) {
        if (last_dim(p.value()) != cols) throw ShapeError("concat_rows: column counts differ");
        rows += p.value().size() / cols;
    }
    Tensor out(Shape{rows, cols});
    std::int64_t offset = 0;
    for (const auto& p : parts) {
        std::copy(p.value().data().begin(), p.value().data().end(), out.data().begin() + offset);
        offset += p.value().size();
    }
    return make_result(std::move(out), {parts.begin(), parts.end()}, [](Node& self) {
        std::int64_t offset = 0;
        for (auto& in : self.inputs) {
            const auto n = in->value.size();
            if (wants(in)) {
                auto& g = in->grad_buffer();
                for (std::int64_t i = 0; i < n; ++i) g[i] += self.grad[offset + i];
            }
            offset += n;
        }
    });
}

Var gather_rows(const Var& table, std::vector<std::int64_t> index) {
    const auto T = as_matrix(table.value());
    const auto cols = T.cols();
    Tensor out(Shape{static_cast<std::int64_t>(index.size()), cols});
    auto Y = as_matrix(out);
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= T.rows()) throw IndexError("gather_rows: row index out of range");
        Y.row(static_cast<Eigen::Index>(i)) = T.row(index[i]);
    }
    return make_result(std::move(out), {table}, [index = std::move(index)](Node& self) {
        auto G = as_matrix(self.inputs[0]->grad_buffer());
        const auto dY = as_matrix(self.grad);
        for (std::size_t i = 0; i < index.size(); ++i) G.row(index[i]) += dY.row(static_cast<Eigen::Index>(i));
    });
}

Var gather(const Var& x, std::vector<std::int64_t> index, Shape out_shape) {
    if (shape_numel(out_shape) != static_cast<std::int64_t>(index.size())) {
        throw ShapeError("gather: index count does not match output shape");
    }
    Tensor out(std::move(out_shape));
    const auto& src = x.value();
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] < 0 || index[i] >= src.size()) throw IndexError("gather: element index out of range");
        out[static_cast<std::int64_t>(i)] = src[index[i]];
    }
    return make_result(std::move(out), {x}, [index = std::move(index)](Node& self) {
        auto& g = self.inputs[0]->grad_buffer();
        for (std::size_t i = 0; i < index.size(); ++i) g[index[i]] += self.grad[static_cast<std::int64_t>(i)];
    });
}

Var reshape(const Var& x, Shape shape) {
    return make_result(x.value().reshaped(std::move(shape)), {x}, [](Node& self) {
        auto& in = self.inputs[0];
        in->accumulate(self.grad.reshaped(in->value.shape()));
    });
}

// ---- attention ------------------------------------------------------------------

Var self_attention(const Var& qkv, std::span<const std::int64_t> row_offsets, std::int64_t heads) {
    const auto Q = as_matrix(qkv.value());
    const auto M = Q.rows();
    if (Q.cols() % 3 != 0) throw ShapeError("self_attention: qkv width must be 3D");
    const auto D = Q.cols() / 3;
    if (heads <= 0 || D % heads != 0) throw ShapeError("self_attention: heads must divide D");
    if (row_offsets.size() < 2 || row_offsets.front() != 0 || row_offsets.back() != M) {
        throw ShapeError("self_attention: row offsets do not cover the batch");
    }
    const auto dh = D / heads;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto stride = Eigen::OuterStride<>(3 * D);
    const auto out_stride = Eigen::OuterStride<>(D);

    // Softmax probabilities per (sequence, head), stored back to back.
    std::vector<std::int64_t> prob_offsets;
    std::int64_t total = 0;
    for (std::size_t s = 0; s + 1 < row_offsets.size(); ++s) {
        const auto n = row_offsets[s + 1] - row_offsets[s];
        if (n < 0) throw ShapeError("self_attention: offsets must be non-decreasing");
        prob_offsets.push_back(total);
        total += heads * n * n;
    }
    Storage probs(static_cast<std::size_t>(total));

    Tensor out(Shape{M, D});
    const double* base = qkv.value().ptr();
    for (std::size_t s = 0; s + 1 < row_offsets.size(); ++s) {
        const auto r0 = row_offsets[s];
        const auto n = row_offsets[s + 1] - r0;
        if (n == 0) continue;
        for (std::int64_t h = 0; h < heads; ++h) {
            Strided q(base + r0 * 3 * D + h * dh, n, dh, stride);
            Strided k(base + r0 * 3 * D + D + h * dh, n, dh, stride);
            Strided v(base + r0 * 3 * D + 2 * D + h * dh, n, dh, stride);
            MatMap P(probs.data() + prob_offsets[s] + h * n * n, n, n);
            P.noalias() = (q * k.transpose()) * scale_factor;
            for (Eigen::Index i = 0; i < n; ++i) {
                const double mx = P.row(i).maxCoeff();
                P.row(i) = (P.row(i).array() - mx).exp();
                P.row(i) /= P.row(i).sum();
            }
            MutStrided o(out.ptr() + r0 * D + h * dh, n, dh, out_stride);
            o.noalias() = P * v;
        }
    }

    std::vector<std::int64_t> offsets(row_offsets.begin(), row_offsets.end());
    return make_result(std::move(out), {qkv},
                       [probs = std::move(probs), prob_offsets = std::move(prob_offsets),
                        offsets = std::move(offsets), heads, D, dh, scale_factor](Node& self) {
                           const auto stride = Eigen::OuterStride<>(3 * D);
                           const auto out_stride = Eigen::OuterStride<>(D);
                           auto& in = self.inputs[0];
                           const double* base = in->value.ptr();
                           double* gbase = in->grad_buffer().ptr();
                           const double* dout = self.grad.ptr();
                           RowMat dP, dS;
                           for (std::size_t s = 0; s + 1 < offsets.size(); ++s) {
                               const auto r0 = offsets[s];
                               const auto n = offsets[s + 1] - r0;
                               if (n == 0) continue;
                               for (std::int64_t h = 0; h < heads; ++h) {
                                   Strided q(base + r0 * 3 * D + h * dh, n, dh, stride);
                                   Strided k(base + r0 * 3 * D + D + h * dh, n, dh, stride);
                                   Strided v(base + r0 * 3 * D + 2 * D + h * dh, n, dh, stride);
                                   MutStrided dq(gbase + r0 * 3 * D + h * dh, n, dh, stride);
                                   MutStrided dk(gbase + r0 * 3 * D + D + h * dh, n, dh, stride);
                                   MutStrided dv(gbase + r0 * 3 * D + 2 * D + h * dh, n, dh, stride);
                                   Eigen::Map<const RowMat, 0, Eigen::OuterStride<>> dO(dout + r0 * D + h * dh, n,
                                                                                        dh, out_stride);
                                   ConstMatMap P(probs.data() + prob_offsets[s] + h * n * n, n, n);
                                   dv.noalias() += P.transpose() * dO;
                                   dP.noalias() = dO * v.transpose();
                                   dS = P.array() * (dP.array().colwise() - (dP.array() * P.array()).rowwise().sum());
                                   dq.noalias() += (dS * k) * scale_factor;
                                   dk.noalias() += (dS.transpose() * q) * scale_factor;
                               }
                           }
                       });
}

// ---- convolution -------------------------------------------------------------------

Var conv2d(const Var& x, const Var& weight, const Var& bias) {
    const auto& xs = x.shape();
    const auto& ws = weight.shape();
    if (xs.size() != 4) throw ShapeError("conv2d: input must be [B, H, W, C], got " + shape_string(xs));
    if (ws.size() != 4 || ws[1] != ws[2] || ws[1] % 2 == 0 || ws[3] != xs[3]) {
        throw ShapeError("conv2d: weight " + shape_string(ws) + " incompatible with input " + shape_string(xs));
    }
    const auto B = xs[0], H = xs[1], W = xs[2], Cin = xs[3];
    const auto Cout = ws[0], k = ws[1], pad = k / 2;
    const auto patch = k * k * Cin;
    if (bias.defined() && bias.value().shape() != Shape{Cout}) throw ShapeError("conv2d: bias shape");

    // im2col: one row per output pixel, columns ordered (ky, kx, cin) to match the weight layout.
    Tensor cols(Shape{B * H * W, patch});
    const double* src = x.value().ptr();
    for (std::int64_t b = 0; b < B; ++b)
        for (std::int64_t i = 0; i < H; ++i)
            for (std::int64_t j = 0; j < W; ++j) {
                double* row = cols.ptr() + ((b * H + i) * W + j) * patch;
                for (std::int64_t ky = 0; ky < k; ++ky) {
                    const auto yi = i + ky - pad;
                    for (std::int64_t kx = 0; kx < k; ++kx) {
                        const auto xj = j + kx - pad;
                        double* dst = row + (ky * k + kx) * Cin;
                        if (yi < 0 || yi >= H || xj < 0 || xj >= W) continue;
                        std::copy_n(src + ((b * H + yi) * W + xj) * Cin, Cin, dst);
                    }
                }
            }

    Tensor out(Shape{B, H, W, Cout});
    auto Y = as_matrix(out);
    const ConstMatMap Wm(weight.value().ptr(), Cout, patch);
    Y.noalias() = as_matrix(cols) * Wm.transpose();
    if (bias.defined()) Y.rowwise() += ConstVecMap(bias.value().ptr(), Cout).transpose();

    std::vector<Var> inputs{x, weight};
    if (bias.defined()) inputs.push_back(bias);
    return make_result(std::move(out), std::move(inputs),
                       [cols = std::move(cols), B, H, W, Cin, Cout, k, pad, patch](Node& self) {
                           const auto dY = as_matrix(self.grad);
                           const auto& X = self.inputs[0];
                           const auto& Wt = self.inputs[1];
                           const ConstMatMap C(cols.ptr(), B * H * W, patch);
                           if (wants(Wt)) {
                               MatMap(Wt->grad_buffer().ptr(), Cout, patch).noalias() += dY.transpose() * C;
                           }
                           if (self.inputs.size() > 2 && wants(self.inputs[2])) {
                               auto& g = self.inputs[2]->grad_buffer();
                               VecMap(g.ptr(), Cout) += dY.colwise().sum().transpose();
                           }
                           if (wants(X)) {
                               const RowMat dC = dY * ConstMatMap(Wt->value.ptr(), Cout, patch);
                               double* dst = X->grad_buffer().ptr();
                               for (std::int64_t b = 0; b < B; ++b)
                                   for (std::int64_t i = 0; i < H; ++i)
                                       for (std::int64_t j = 0; j < W; ++j) {
                                           const double* row = dC.data() + ((b * H + i) * W + j) * patch;
                                           for (std::int64_t ky = 0; ky < k; ++ky) {
                                               const auto yi = i + ky - pad;
                                               if (yi < 0 || yi >= H) continue;
                                               for (std::int64_t kx = 0; kx < k; ++kx) {
                                                   const auto xj = j + kx - pad;
                                                   if (xj < 0 || xj >= W) continue;
                                                   double* d = dst + ((b * H + yi) * W + xj) * Cin;
                                                   const double* s = row + (ky * k + kx) * Cin;
                                                   for (std::int64_t c = 0; c < Cin; ++c) d[c] += s[c];
                                               }
                                           }
                                       }
                           }
                       });
}

// ---- loss ---------------------------------------------------------------------------

Var mse(const Var& pred, const Tensor& target) {
    require_same_shape(pred.value(), target, "mse");
    const auto n = static_cast<double>(target.size());
    double acc = 0.0;
    for (std::int64_t i = 0; i < target.size(); ++i) {
        const double d = pred.value()[i] - target[i];
        acc += d * d;
    }
    return make_result(Tensor(Shape{}, std::vector<double>{acc / n}), {pred}, [target, n](Node& self) {
        auto& in = self.inputs[0];
        auto& g = in->grad_buffer();
        const double s = 2.0 * self.grad[0] / n;
        for (std::int64_t i = 0; i < g.size(); ++i) g[i] += s * (in->value[i] - target[i]);
    });
}

}  // namespace uvit::ad
