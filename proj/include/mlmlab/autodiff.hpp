#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <string_view>
#include <vector>

#include "mlmlab/param_store.hpp"
#include "mlmlab/tensor.hpp"

namespace mlmlab {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<EMat>;
using CMatMap = Eigen::Map<const EMat>;

inline MatMap as_mat(Tensor& t) {
    require(t.ndim() == 2, "as_mat: expected a matrix, got " + shape_str(t.shape));
    return MatMap(t.v.data(), t.rows(), t.cols());
}

inline CMatMap as_mat(const Tensor& t) {
    require(t.ndim() == 2, "as_mat: expected a matrix, got " + shape_str(t.shape));
    return CMatMap(t.v.data(), t.rows(), t.cols());
}

class Tape;

// Handle to a value on a tape.
struct Var {
    Tape* tape = nullptr;
    int32_t id = -1;
};

// Reverse-mode tape over a ParamStore. Values are computed eagerly as ops are
// emitted; gradients(loss) walks the node registry backwards once. A tape is
// single-use per backward and not thread-safe; concurrent evaluation belongs
// on disjoint tapes.
class Tape {
public:
    using Vjp = std::function<void(Tape&, const Tensor& g, const std::vector<int32_t>& parents)>;

    explicit Tape(const ParamStore& ps, bool check_finite = true)
        : check_finite_(check_finite) {
        param_names_.reserve(ps.segments.size());
        for (const auto& [name, t] : ps.segments) {
            param_names_.push_back(name);
            param_ids_.push_back(emit_leaf(t, /*needs_grad=*/true));
        }
    }

    // Tape over no parameters, for plain evaluation graphs.
    Tape() : check_finite_(true) {}

    Var param(std::string_view name) {
        for (size_t i = 0; i < param_names_.size(); ++i)
            if (param_names_[i] == name) return Var{this, param_ids_[i]};
        throw ArgumentError("Tape: no parameter segment '" + std::string(name) + "'");
    }

    Var constant(Tensor t) { return Var{this, emit_leaf(std::move(t), /*needs_grad=*/false)}; }

    const Tensor& val(int32_t id) const { return nodes_[static_cast<size_t>(id)].val; }
    const Tensor& val(Var v) const { return val(v.id); }

    bool wants_grad(int32_t id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }

    int32_t emit(Tensor val, std::vector<int32_t> parents, const char* op, Vjp vjp) {
        bool needs = false;
        for (int32_t p : parents) needs = needs || nodes_[static_cast<size_t>(p)].needs_grad;
        if (check_finite_ && !val.all_finite())
            throw NumericError(std::string("non-finite value produced by op '") + op + "'");
        nodes_.push_back(Node{std::move(val), std::move(parents),
                              needs ? std::move(vjp) : Vjp{}, op, needs});
        return static_cast<int32_t>(nodes_.size() - 1);
    }

    // Gradient buffer for a node, allocated as zeros on first touch.
    Tensor& grad_buf(int32_t id) {
        Tensor& g = grads_[static_cast<size_t>(id)];
        if (g.v.empty() && val(id).size() > 0) g = Tensor::zeros(val(id).shape);
        return g;
    }

    bool has_grad(int32_t id) const { return !grads_[static_cast<size_t>(id)].v.empty(); }

    // Reverse pass from a scalar loss; returns one gradient tensor per
    // parameter segment (zeros for segments the loss does not touch).
    Gradients gradients(Var loss) {
        require(loss.tape == this, "gradients: loss from another tape");
        require(val(loss).size() == 1, "gradients: loss must be scalar");
        grads_.assign(nodes_.size(), Tensor{});
        grad_buf(loss.id).v[0] = 1.0;
        for (int32_t i = loss.id; i >= 0; --i) {
            Node& n = nodes_[static_cast<size_t>(i)];
            if (!n.needs_grad || !n.vjp || !has_grad(i)) continue;
            n.vjp(*this, grads_[static_cast<size_t>(i)], n.parents);
        }
        Gradients out;
        for (size_t i = 0; i < param_ids_.size(); ++i) {
            int32_t id = param_ids_[i];
            Tensor g = has_grad(id) ? grads_[static_cast<size_t>(id)] : Tensor::zeros(val(id).shape);
            out.segments.emplace_back(param_names_[i], std::move(g));
        }
        grads_.clear();
        return out;
    }

    size_t num_nodes() const { return nodes_.size(); }

private:
    struct Node {
        Tensor val;
        std::vector<int32_t> parents;
        Vjp vjp;
        const char* op;
        bool needs_grad;
    };

    int32_t emit_leaf(Tensor t, bool needs_grad) {
        nodes_.push_back(Node{std::move(t), {}, Vjp{}, "leaf", needs_grad});
        return static_cast<int32_t>(nodes_.size() - 1);
    }

    std::vector<Node> nodes_;
    std::vector<Tensor> grads_;
    std::vector<std::string> param_names_;
    std::vector<int32_t> param_ids_;
    bool check_finite_;
};

namespace detail {
inline Tape& same_tape(Var a, Var b) {
    require(a.tape && a.tape == b.tape, "operands from different tapes");
    return *a.tape;
}
}  // namespace detail

// ---- elementwise ----

inline Var add(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor &A = t.val(a), &B = t.val(b);
    require(A.same_shape(B), "add: shape mismatch");
    Tensor out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] += B.v[i];
    int32_t id = t.emit(std::move(out), {a.id, b.id}, "add",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            for (int32_t pid : p)
                                if (tp.wants_grad(pid)) {
                                    Tensor& gb = tp.grad_buf(pid);
                                    for (size_t i = 0; i < g.v.size(); ++i) gb.v[i] += g.v[i];
                                }
                        });
    return Var{&t, id};
}

inline Var sub(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor &A = t.val(a), &B = t.val(b);
    require(A.same_shape(B), "sub: shape mismatch");
    Tensor out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] -= B.v[i];
    int32_t id = t.emit(std::move(out), {a.id, b.id}, "sub",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (tp.wants_grad(p[0])) {
                                Tensor& ga = tp.grad_buf(p[0]);
                                for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i];
                            }
                            if (tp.wants_grad(p[1])) {
                                Tensor& gb = tp.grad_buf(p[1]);
                                for (size_t i = 0; i < g.v.size(); ++i) gb.v[i] -= g.v[i];
                            }
                        });
    return Var{&t, id};
}

inline Var mul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor &A = t.val(a), &B = t.val(b);
    require(A.same_shape(B), "mul: shape mismatch");
    Tensor out = A;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] *= B.v[i];
    int32_t id = t.emit(std::move(out), {a.id, b.id}, "mul",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            const Tensor &A = tp.val(p[0]), &B = tp.val(p[1]);
                            if (tp.wants_grad(p[0])) {
                                Tensor& ga = tp.grad_buf(p[0]);
                                for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += g.v[i] * B.v[i];
                            }
                            if (tp.wants_grad(p[1])) {
                                Tensor& gb = tp.grad_buf(p[1]);
                                for (size_t i = 0; i < g.v.size(); ++i) gb.v[i] += g.v[i] * A.v[i];
                            }
                        });
    return Var{&t, id};
}

inline Var scale(Var a, double c) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (auto& x : out.v) x *= c;
    int32_t id = t.emit(std::move(out), {a.id}, "scale",
                        [c](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            Tensor& ga = tp.grad_buf(p[0]);
                            for (size_t i = 0; i < g.v.size(); ++i) ga.v[i] += c * g.v[i];
                        });
    return Var{&t, id};
}

inline Var relu(Var a) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (auto& x : out.v) x = x > 0.0 ? x : 0.0;
    int32_t id = t.emit(std::move(out), {a.id}, "relu",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            const Tensor& A = tp.val(p[0]);
                            Tensor& ga = tp.grad_buf(p[0]);
                            for (size_t i = 0; i < g.v.size(); ++i)
                                if (A.v[i] > 0.0) ga.v[i] += g.v[i];
                        });
    return Var{&t, id};
}

inline Var leaky_relu(Var a, double slope) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (auto& x : out.v) x = x > 0.0 ? x : slope * x;
    int32_t id = t.emit(std::move(out), {a.id}, "leaky_relu",
                        [slope](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            const Tensor& A = tp.val(p[0]);
                            Tensor& ga = tp.grad_buf(p[0]);
                            for (size_t i = 0; i < g.v.size(); ++i)
                                ga.v[i] += (A.v[i] > 0.0 ? 1.0 : slope) * g.v[i];
                        });
    return Var{&t, id};
}

inline Var gelu(Var a) {
    Tape& t = *a.tape;
    Tensor out = t.val(a);
    for (auto& x : out.v) x = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
    int32_t id = t.emit(std::move(out), {a.id}, "gelu",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            const Tensor& A = tp.val(p[0]);
                            Tensor& ga = tp.grad_buf(p[0]);
                            constexpr double inv_sqrt_2pi = 0.3989422804014327;
                            for (size_t i = 0; i < g.v.size(); ++i) {
                                double x = A.v[i];
                                double d = 0.5 * (1.0 + std::erf(x * M_SQRT1_2)) +
                                           x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
                                ga.v[i] += d * g.v[i];
                            }
                        });
    return Var{&t, id};
}

// ---- matrix products (Eigen-backed kernels) ----

inline Var matmul(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor &A = t.val(a), &B = t.val(b);
    require(A.ndim() == 2 && B.ndim() == 2 && A.cols() == B.rows(), "matmul: shape mismatch");
    Tensor out = Tensor::zeros({A.rows(), B.cols()});
    as_mat(out).noalias() = as_mat(A) * as_mat(B);
    int32_t id = t.emit(std::move(out), {a.id, b.id}, "matmul",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            const Tensor &A = tp.val(p[0]), &B = tp.val(p[1]);
                            CMatMap G(g.v.data(), g.rows(), g.cols());
                            if (tp.wants_grad(p[0]))
                                as_mat(tp.grad_buf(p[0])).noalias() += G * as_mat(B).transpose();
                            if (tp.wants_grad(p[1]))
                                as_mat(tp.grad_buf(p[1])).noalias() += as_mat(A).transpose() * G;
                        });
    return Var{&t, id};
}

// A * B^T
inline Var matmul_nt(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor &A = t.val(a), &B = t.val(b);
    require(A.ndim() == 2 && B.ndim() == 2 && A.cols() == B.cols(), "matmul_nt: shape mismatch");
    Tensor out = Tensor::zeros({A.rows(), B.rows()});
    as_mat(out).noalias() = as_mat(A) * as_mat(B).transpose();
    int32_t id = t.emit(std::move(out), {a.id, b.id}, "matmul_nt",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            const Tensor &A = tp.val(p[0]), &B = tp.val(p[1]);
                            CMatMap G(g.v.data(), g.rows(), g.cols());
                            if (tp.wants_grad(p[0]))
                                as_mat(tp.grad_buf(p[0])).noalias() += G * as_mat(B);
                            if (tp.wants_grad(p[1]))
                                as_mat(tp.grad_buf(p[1])).noalias() += G.transpose() * as_mat(A);
                        });
    return Var{&t, id};
}

// x: n x m, bias: m; adds bias to every row
inline Var add_row_broadcast(Var x, Var bias) {
    Tape& t = detail::same_tape(x, bias);
    const Tensor &X = t.val(x), &B = t.val(bias);
    require(X.ndim() == 2 && B.size() == X.cols(), "add_row_broadcast: shape mismatch");
    Tensor out = X;
    for (int64_t i = 0; i < X.rows(); ++i)
        for (int64_t j = 0; j < X.cols(); ++j) out.at(i, j) += B.v[static_cast<size_t>(j)];
    int32_t id = t.emit(std::move(out), {x.id, bias.id}, "add_row_broadcast",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (tp.wants_grad(p[0])) {
                                Tensor& gx = tp.grad_buf(p[0]);
                                for (size_t i = 0; i < g.v.size(); ++i) gx.v[i] += g.v[i];
                            }
                            if (tp.wants_grad(p[1])) {
                                Tensor& gb = tp.grad_buf(p[1]);
                                int64_t m = g.cols();
                                for (int64_t i = 0; i < g.rows(); ++i)
                                    for (int64_t j = 0; j < m; ++j)
                                        gb.v[static_cast<size_t>(j)] += g.at(i, j);
                            }
                        });
    return Var{&t, id};
}

// ---- row-wise softmax family ----

inline Var softmax_rows(Var x) {
    Tape& t = *x.tape;
    const Tensor& X = t.val(x);
    require(X.ndim() == 2, "softmax_rows: expected matrix");
    Tensor out = X;
    for (int64_t i = 0; i < X.rows(); ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < X.cols(); ++j) mx = std::max(mx, X.at(i, j));
        double s = 0.0;
        for (int64_t j = 0; j < X.cols(); ++j) {
            double e = std::exp(X.at(i, j) - mx);
            out.at(i, j) = e;
            s += e;
        }
        for (int64_t j = 0; j < X.cols(); ++j) out.at(i, j) /= s;
    }
    int32_t id = t.emit(std::move(out), {x.id}, "softmax_rows",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            // recompute the row softmax rather than capturing the output
                            const Tensor& X = tp.val(p[0]);
                            Tensor& gx = tp.grad_buf(p[0]);
                            for (int64_t i = 0; i < X.rows(); ++i) {
                                double mx = -1e300;
                                for (int64_t j = 0; j < X.cols(); ++j) mx = std::max(mx, X.at(i, j));
                                double s = 0.0;
                                std::vector<double> pr(static_cast<size_t>(X.cols()));
                                for (int64_t j = 0; j < X.cols(); ++j) {
                                    pr[static_cast<size_t>(j)] = std::exp(X.at(i, j) - mx);
                                    s += pr[static_cast<size_t>(j)];
                                }
                                double dsum = 0.0;
                                for (int64_t j = 0; j < X.cols(); ++j) {
                                    pr[static_cast<size_t>(j)] /= s;
                                    dsum += g.at(i, j) * pr[static_cast<size_t>(j)];
                                }
                                for (int64_t j = 0; j < X.cols(); ++j)
                                    gx.at(i, j) += pr[static_cast<size_t>(j)] * (g.at(i, j) - dsum);
                            }
                        });
    return Var{&t, id};
}

// log-softmax fused with max subtraction; never takes log(0)
inline Var log_softmax_rows(Var x) {
    Tape& t = *x.tape;
    const Tensor& X = t.val(x);
    require(X.ndim() == 2, "log_softmax_rows: expected matrix");
    Tensor out = X;
    for (int64_t i = 0; i < X.rows(); ++i) {
        double mx = -1e300;
        for (int64_t j = 0; j < X.cols(); ++j) mx = std::max(mx, X.at(i, j));
        double s = 0.0;
        for (int64_t j = 0; j < X.cols(); ++j) s += std::exp(X.at(i, j) - mx);
        double lse = mx + std::log(s);
        for (int64_t j = 0; j < X.cols(); ++j) out.at(i, j) = X.at(i, j) - lse;
    }
    int32_t id = t.emit(std::move(out), {x.id}, "log_softmax_rows",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            const Tensor& X = tp.val(p[0]);
                            Tensor& gx = tp.grad_buf(p[0]);
                            for (int64_t i = 0; i < X.rows(); ++i) {
                                double mx = -1e300;
                                for (int64_t j = 0; j < X.cols(); ++j) mx = std::max(mx, X.at(i, j));
                                double s = 0.0;
                                std::vector<double> pr(static_cast<size_t>(X.cols()));
                                for (int64_t j = 0; j < X.cols(); ++j) {
                                    pr[static_cast<size_t>(j)] = std::exp(X.at(i, j) - mx);
                                    s += pr[static_cast<size_t>(j)];
                                }
                                double gsum = 0.0;
                                for (int64_t j = 0; j < X.cols(); ++j) gsum += g.at(i, j);
                                for (int64_t j = 0; j < X.cols(); ++j)
                                    gx.at(i, j) += g.at(i, j) - gsum * pr[static_cast<size_t>(j)] / s;
                            }
                        });
    return Var{&t, id};
}

// ---- layer norm ----

// Row-wise standardization followed by the gamma/beta affine. Variance is the
// biased (1/d) estimate, which is what keeps feature duplication exact.
inline Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-12) {
    Tape& t = *x.tape;
    const Tensor &X = t.val(x), &G = t.val(gamma), &B = t.val(beta);
    require(X.ndim() == 2 && G.size() == X.cols() && B.size() == X.cols(),
            "layer_norm_rows: shape mismatch");
    int64_t n = X.rows(), d = X.cols();
    auto xhat = std::make_shared<Tensor>(Tensor::zeros({n, d}));
    auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(n));
    Tensor out = Tensor::zeros({n, d});
    for (int64_t i = 0; i < n; ++i) {
        double mean = 0.0;
        for (int64_t j = 0; j < d; ++j) mean += X.at(i, j);
        mean /= static_cast<double>(d);
        double var = 0.0;
        for (int64_t j = 0; j < d; ++j) {
            double c = X.at(i, j) - mean;
            var += c * c;
        }
        var /= static_cast<double>(d);
        double is = 1.0 / std::sqrt(var + eps);
        (*inv_std)[static_cast<size_t>(i)] = is;
        for (int64_t j = 0; j < d; ++j) {
            double h = (X.at(i, j) - mean) * is;
            xhat->at(i, j) = h;
            out.at(i, j) = G.v[static_cast<size_t>(j)] * h + B.v[static_cast<size_t>(j)];
        }
    }
    int32_t id = t.emit(
        std::move(out), {x.id, gamma.id, beta.id}, "layer_norm_rows",
        [xhat, inv_std](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
            const Tensor& G = tp.val(p[1]);
            int64_t n = g.rows(), d = g.cols();
            if (tp.wants_grad(p[1])) {
                Tensor& gg = tp.grad_buf(p[1]);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < d; ++j)
                        gg.v[static_cast<size_t>(j)] += g.at(i, j) * xhat->at(i, j);
            }
            if (tp.wants_grad(p[2])) {
                Tensor& gb = tp.grad_buf(p[2]);
                for (int64_t i = 0; i < n; ++i)
                    for (int64_t j = 0; j < d; ++j) gb.v[static_cast<size_t>(j)] += g.at(i, j);
            }
            if (tp.wants_grad(p[0])) {
                Tensor& gx = tp.grad_buf(p[0]);
                for (int64_t i = 0; i < n; ++i) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t j = 0; j < d; ++j) {
                        double gy = g.at(i, j) * G.v[static_cast<size_t>(j)];
                        m1 += gy;
                        m2 += gy * xhat->at(i, j);
                    }
                    m1 /= static_cast<double>(d);
                    m2 /= static_cast<double>(d);
                    double is = (*inv_std)[static_cast<size_t>(i)];
                    for (int64_t j = 0; j < d; ++j) {
                        double gy = g.at(i, j) * G.v[static_cast<size_t>(j)];
                        gx.at(i, j) += is * (gy - m1 - xhat->at(i, j) * m2);
                    }
                }
            }
        });
    return Var{&t, id};
}

// ---- reductions ----

inline Var sum_all(Var x) {
    Tape& t = *x.tape;
    const Tensor& X = t.val(x);
    double s = 0.0;
    for (double v : X.v) s += v;
    int32_t id = t.emit(Tensor::scalar(s), {x.id}, "sum_all",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            Tensor& gx = tp.grad_buf(p[0]);
                            for (auto& v : gx.v) v += g.v[0];
                        });
    return Var{&t, id};
}

inline Var mean_all(Var x) {
    return scale(sum_all(x), 1.0 / static_cast<double>(x.tape->val(x).size()));
}

// sum(x * w) with w a constant tensor
inline Var weighted_sum(Var x, Tensor w) {
    Tape& t = *x.tape;
    const Tensor& X = t.val(x);
    require(X.size() == w.size(), "weighted_sum: size mismatch");
    double s = 0.0;
    for (size_t i = 0; i < X.v.size(); ++i) s += X.v[i] * w.v[i];
    auto wp = std::make_shared<Tensor>(std::move(w));
    int32_t id = t.emit(Tensor::scalar(s), {x.id}, "weighted_sum",
                        [wp](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            Tensor& gx = tp.grad_buf(p[0]);
                            for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += g.v[0] * wp->v[i];
                        });
    return Var{&t, id};
}

inline Var dot_all(Var a, Var b) { return sum_all(mul(a, b)); }

// ---- structural ops ----

inline Var slice_rows(Var x, int64_t r0, int64_t r1) {
    Tape& t = *x.tape;
    const Tensor& X = t.val(x);
    require(X.ndim() == 2 && 0 <= r0 && r0 < r1 && r1 <= X.rows(), "slice_rows: bad range");
    int64_t m = X.cols();
    Tensor out = Tensor::zeros({r1 - r0, m});
    std::copy(X.v.begin() + static_cast<ptrdiff_t>(r0 * m), X.v.begin() + static_cast<ptrdiff_t>(r1 * m),
              out.v.begin());
    int32_t id = t.emit(std::move(out), {x.id}, "slice_rows",
                        [r0](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            Tensor& gx = tp.grad_buf(p[0]);
                            int64_t m = g.cols();
                            for (int64_t i = 0; i < g.rows(); ++i)
                                for (int64_t j = 0; j < m; ++j) gx.at(r0 + i, j) += g.at(i, j);
                        });
    return Var{&t, id};
}

inline Var concat_rows(const std::vector<Var>& xs) {
    require(!xs.empty(), "concat_rows: empty");
    Tape& t = *xs[0].tape;
    int64_t m = t.val(xs[0]).cols(), n = 0;
    std::vector<int32_t> parents;
    for (Var v : xs) {
        require(v.tape == &t && t.val(v).ndim() == 2 && t.val(v).cols() == m,
                "concat_rows: mismatched parts");
        n += t.val(v).rows();
        parents.push_back(v.id);
    }
    Tensor out = Tensor::zeros({n, m});
    int64_t r = 0;
    for (Var v : xs) {
        const Tensor& X = t.val(v);
        std::copy(X.v.begin(), X.v.end(), out.v.begin() + static_cast<ptrdiff_t>(r * m));
        r += X.rows();
    }
    int32_t id = t.emit(std::move(out), std::move(parents), "concat_rows",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            int64_t m = g.cols(), r = 0;
                            for (int32_t pid : p) {
                                int64_t rows = tp.val(pid).rows();
                                if (tp.wants_grad(pid)) {
                                    Tensor& gx = tp.grad_buf(pid);
                                    for (int64_t i = 0; i < rows; ++i)
                                        for (int64_t j = 0; j < m; ++j) gx.at(i, j) += g.at(r + i, j);
                                }
                                r += rows;
                            }
                        });
    return Var{&t, id};
}

inline Var slice_cols(Var x, int64_t c0, int64_t c1) {
    Tape& t = *x.tape;
    const Tensor& X = t.val(x);
    require(X.ndim() == 2 && 0 <= c0 && c0 < c1 && c1 <= X.cols(), "slice_cols: bad range");
    Tensor out = Tensor::zeros({X.rows(), c1 - c0});
    for (int64_t i = 0; i < X.rows(); ++i)
        for (int64_t j = c0; j < c1; ++j) out.at(i, j - c0) = X.at(i, j);
    int32_t id = t.emit(std::move(out), {x.id}, "slice_cols",
                        [c0](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            Tensor& gx = tp.grad_buf(p[0]);
                            for (int64_t i = 0; i < g.rows(); ++i)
                                for (int64_t j = 0; j < g.cols(); ++j) gx.at(i, c0 + j) += g.at(i, j);
                        });
    return Var{&t, id};
}

inline Var concat_cols(const std::vector<Var>& xs) {
    require(!xs.empty(), "concat_cols: empty");
    Tape& t = *xs[0].tape;
    int64_t n = t.val(xs[0]).rows(), m = 0;
    std::vector<int32_t> parents;
    for (Var v : xs) {
        require(v.tape == &t && t.val(v).ndim() == 2 && t.val(v).rows() == n,
                "concat_cols: mismatched parts");
        m += t.val(v).cols();
        parents.push_back(v.id);
    }
    Tensor out = Tensor::zeros({n, m});
    int64_t c = 0;
    for (Var v : xs) {
        const Tensor& X = t.val(v);
        for (int64_t i = 0; i < n; ++i)
            for (int64_t j = 0; j < X.cols(); ++j) out.at(i, c + j) = X.at(i, j);
        c += X.cols();
    }
    int32_t id = t.emit(std::move(out), std::move(parents), "concat_cols",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            int64_t c = 0;
                            for (int32_t pid : p) {
                                int64_t cols = tp.val(pid).cols();
                                if (tp.wants_grad(pid)) {
                                    Tensor& gx = tp.grad_buf(pid);
                                    for (int64_t i = 0; i < g.rows(); ++i)
                                        for (int64_t j = 0; j < cols; ++j) gx.at(i, j) += g.at(i, c + j);
                                }
                                c += cols;
                            }
                        });
    return Var{&t, id};
}

inline Var reshape(Var x, std::vector<int64_t> shape) {
    Tape& t = *x.tape;
    const Tensor& X = t.val(x);
    require(Tensor::numel(shape) == X.size(), "reshape: size mismatch");
    Tensor out(std::move(shape), X.v);
    int32_t id = t.emit(std::move(out), {x.id}, "reshape",
                        [](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            Tensor& gx = tp.grad_buf(p[0]);
                            for (size_t i = 0; i < g.v.size(); ++i) gx.v[i] += g.v[i];
                        });
    return Var{&t, id};
}

// table: V x d, ids: n entries; rows gathered into n x d
inline Var gather_rows(Var table, const std::vector<int64_t>& ids) {
    Tape& t = *table.tape;
    const Tensor& T = t.val(table);
    require(T.ndim() == 2, "gather_rows: table must be a matrix");
    int64_t d = T.cols();
    Tensor out = Tensor::zeros({static_cast<int64_t>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        require(ids[i] >= 0 && ids[i] < T.rows(), "gather_rows: id out of range");
        for (int64_t j = 0; j < d; ++j) out.at(static_cast<int64_t>(i), j) = T.at(ids[i], j);
    }
    auto idp = std::make_shared<std::vector<int64_t>>(ids);
    int32_t id = t.emit(std::move(out), {table.id}, "gather_rows",
                        [idp](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            Tensor& gt = tp.grad_buf(p[0]);
                            for (size_t i = 0; i < idp->size(); ++i)
                                for (int64_t j = 0; j < g.cols(); ++j)
                                    gt.at((*idp)[i], j) += g.at(static_cast<int64_t>(i), j);
                        });
    return Var{&t, id};
}

// x: n x m, idx: n column indices; picks x[i, idx[i]] into an n-vector
inline Var pick_per_row(Var x, const std::vector<int64_t>& idx) {
    Tape& t = *x.tape;
    const Tensor& X = t.val(x);
    require(X.ndim() == 2 && static_cast<int64_t>(idx.size()) == X.rows(),
            "pick_per_row: shape mismatch");
    Tensor out = Tensor::zeros({X.rows()});
    for (size_t i = 0; i < idx.size(); ++i) {
        require(idx[i] >= 0 && idx[i] < X.cols(), "pick_per_row: index out of range");
        out.v[i] = X.at(static_cast<int64_t>(i), idx[i]);
    }
    auto idp = std::make_shared<std::vector<int64_t>>(idx);
    int32_t id = t.emit(std::move(out), {x.id}, "pick_per_row",
                        [idp](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            if (!tp.wants_grad(p[0])) return;
                            Tensor& gx = tp.grad_buf(p[0]);
                            for (size_t i = 0; i < idp->size(); ++i)
                                gx.at(static_cast<int64_t>(i), (*idp)[i]) += g.v[i];
                        });
    return Var{&t, id};
}

// X = A^-1 B for symmetric positive definite A, via Cholesky.
inline Var solve_spd(Var a, Var b) {
    Tape& t = detail::same_tape(a, b);
    const Tensor &A = t.val(a), &B = t.val(b);
    require(A.ndim() == 2 && A.rows() == A.cols() && B.ndim() == 2 && B.rows() == A.rows(),
            "solve_spd: shape mismatch");
    auto llt = std::make_shared<Eigen::LLT<EMat>>(EMat(as_mat(A)));
    if (llt->info() != Eigen::Success) throw NumericError("solve_spd: factorization failed");
    Tensor out = Tensor::zeros({B.rows(), B.cols()});
    as_mat(out) = llt->solve(EMat(as_mat(B)));
    int32_t id = t.emit(std::move(out), {a.id, b.id}, "solve_spd",
                        [llt](Tape& tp, const Tensor& g, const std::vector<int32_t>& p) {
                            CMatMap G(g.v.data(), g.rows(), g.cols());
                            EMat gb = llt->solve(EMat(G));  // A^-T G = A^-1 G (symmetric)
                            if (tp.wants_grad(p[1])) as_mat(tp.grad_buf(p[1])).noalias() += gb;
                            if (tp.wants_grad(p[0])) {
                                // recompute X from the stored factorization
                                const Tensor& B = tp.val(p[1]);
                                EMat X = llt->solve(EMat(as_mat(B)));
                                as_mat(tp.grad_buf(p[0])).noalias() -= gb * X.transpose();
                            }
                        });
    return Var{&t, id};
}

// ---- gradient drivers ----

using LossFn = std::function<Var(Tape&)>;

inline double eval_loss(const LossFn& f, const ParamStore& params) {
    Tape t(params);
    Var l = f(t);
    return t.val(l).item();
}

// Exact reverse-mode gradient of a scalar loss at params.
inline Gradients grad(const LossFn& f, const ParamStore& params) {
    Tape t(params);
    Var l = f(t);
    require(t.val(l).size() == 1, "grad: loss_fn must produce a scalar");
    return t.gradients(l);
}

// Central-difference gradient; test/oracle use only.
inline Gradients finite_diff_grad(const LossFn& f, const ParamStore& params, double step) {
    require(step > 0.0, "finite_diff_grad: step must be positive");
    ParamStore p = params;
    Gradients out = Gradients::zeros_like(params);
    for (size_t s = 0; s < p.segments.size(); ++s) {
        Tensor& seg = p.segments[s].second;
        for (size_t i = 0; i < seg.v.size(); ++i) {
            double orig = seg.v[i];
            seg.v[i] = orig + step;
            double up = eval_loss(f, p);
            seg.v[i] = orig - step;
            double dn = eval_loss(f, p);
            seg.v[i] = orig;
            out.segments[s].second.v[i] = (up - dn) / (2.0 * step);
        }
    }
    return out;
}

inline double relative_gradient_error(const Gradients& a, const Gradients& b) {
    double num = 0.0, den = 0.0;
    require(a.same_layout(b), "relative_gradient_error: layout mismatch");
    for (size_t s = 0; s < a.segments.size(); ++s)
        for (size_t i = 0; i < a.segments[s].second.v.size(); ++i) {
            double d = a.segments[s].second.v[i] - b.segments[s].second.v[i];
            num += d * d;
            den += a.segments[s].second.v[i] * a.segments[s].second.v[i];
        }
    if (den == 0.0) return std::sqrt(num);
    return std::sqrt(num / den);
}

}  // namespace mlmlab
