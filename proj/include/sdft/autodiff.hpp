#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every primitive executed on tracked values together with a
// closure that propagates the adjoint back to its inputs. Parameters are the
// only named leaves; constants never get a gradient slot.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sdft/tensor.hpp"

namespace sdft {

template <typename Real>
class Tape;

template <typename Real>
using Gradients = std::map<std::string, Tensor<Real>>;

/// Handle to a value recorded on a tape.
template <typename Real>
struct Var {
    Tape<Real>* tape = nullptr;
    std::size_t id = 0;

    const Tensor<Real>& value() const { return tape->value(*this); }
    const Shape& shape() const { return value().shape(); }
    bool requires_grad() const { return tape->requires_grad(*this); }
};

template <typename Real>
class Tape {
   public:
    using Backward = std::function<void(Tape&, std::size_t self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    /// Registers a named parameter leaf that aliases `value`; the caller keeps it alive.
    Var<Real> parameter(std::string name, const Tensor<Real>& value) {
        Node n;
        n.external = &value;
        n.requires_grad = true;
        n.param_name = std::move(name);
        return push(std::move(n));
    }
    Var<Real> parameter(std::string name, Tensor<Real>&& value) {
        Node n;
        n.owned = std::move(value);
        n.requires_grad = true;
        n.param_name = std::move(name);
        return push(std::move(n));
    }

    Var<Real> constant(Tensor<Real> value) {
        Node n;
        n.owned = std::move(value);
        return push(std::move(n));
    }
    /// Constant that aliases external storage.
    Var<Real> constant_ref(const Tensor<Real>& value) {
        Node n;
        n.external = &value;
        return push(std::move(n));
    }

    /// Records the output of a primitive. The backward closure is dropped when no input is tracked.
    Var<Real> record(Tensor<Real> value, std::initializer_list<Var<Real>> inputs, Backward backward) {
        Node n;
        n.owned = std::move(value);
        for (const auto& in : inputs) {
            check_owner(in);
            n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
        }
        if (n.requires_grad) n.backward = std::move(backward);
        return push(std::move(n));
    }
    Var<Real> record(Tensor<Real> value, const std::vector<Var<Real>>& inputs, Backward backward) {
        Node n;
        n.owned = std::move(value);
        for (const auto& in : inputs) {
            check_owner(in);
            n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
        }
        if (n.requires_grad) n.backward = std::move(backward);
        return push(std::move(n));
    }

    const Tensor<Real>& value(Var<Real> v) const { return nodes_.at(v.id).value(); }
    const Tensor<Real>& value(std::size_t id) const { return nodes_[id].value(); }
    bool requires_grad(Var<Real> v) const { return nodes_.at(v.id).requires_grad; }
    bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

    /// Adjoint of node `id`; valid only inside backward closures.
    const Tensor<Real>& grad(std::size_t id) const { return nodes_[id].grad; }

    /// Adjoint accumulator of an input, allocated on first use.
    Tensor<Real>& grad_slot(std::size_t id) {
        Node& n = nodes_[id];
        if (!n.has_grad) {
            n.grad = Tensor<Real>(n.value().shape(), Real(0));
            n.has_grad = true;
        }
        return n.grad;
    }

    std::size_t size() const noexcept { return nodes_.size(); }

    /// Replays adjoints in reverse order and returns the gradient of every parameter leaf.
    Gradients<Real> backward(Var<Real> loss) {
        check_owner(loss);
        const Tensor<Real>& lv = value(loss);
        if (lv.rank() != 0) throw UsageError("backward() needs a scalar loss, got shape " + shape_str(lv.shape()));
        for (auto& n : nodes_) {
            n.has_grad = false;
            n.grad = Tensor<Real>();
        }
        Gradients<Real> out;
        if (nodes_[loss.id].requires_grad) {
            grad_slot(loss.id)[0] = Real(1);
            for (std::size_t i = loss.id + 1; i-- > 0;) {
                Node& n = nodes_[i];
                if (n.has_grad && n.backward) n.backward(*this, i);
            }
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            Node& n = nodes_[i];
            if (n.param_name.empty()) continue;
            auto it = out.find(n.param_name);
            if (it == out.end()) {
                out.emplace(n.param_name, n.has_grad ? n.grad : Tensor<Real>(n.value().shape(), Real(0)));
            } else if (n.has_grad) {
                axpy(Real(1), n.grad, it->second);
            }
        }
        return out;
    }

   private:
    struct Node {
        Tensor<Real> owned;
        const Tensor<Real>* external = nullptr;
        Tensor<Real> grad;
        bool has_grad = false;
        bool requires_grad = false;
        std::string param_name;
        Backward backward;

        const Tensor<Real>& value() const { return external ? *external : owned; }
    };

    Var<Real> push(Node&& n) {
        nodes_.push_back(std::move(n));
        return Var<Real>{this, nodes_.size() - 1};
    }

    void check_owner(Var<Real> v) const {
        if (v.tape != this || v.id >= nodes_.size()) throw UsageError("variable does not belong to this tape");
    }

    std::vector<Node> nodes_;
};

// ----------------------------- kernels -----------------------------

namespace kernel {

/// c += a * b for row-major matrices (m x k) * (k x n).
template <typename Real>
void gemm_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        Real* ci = c + i * n;
        const Real* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const Real av = ai[p];
            if (av == Real(0)) continue;
            const Real* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

/// c += a * b^T with a (m x k), b (n x k).
template <typename Real>
void gemm_bt_acc(const Real* a, const Real* b, Real* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const Real* ai = a + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const Real* bj = b + j * k;
            Real s = 0;
            for (std::size_t p = 0; p < k; ++p) s += ai[p] * bj[p];
            c[i * n + j] += s;
        }
    }
}

/// c += a^T * b with a (k x m), b (k x n).
template <typename Real>
void gemm_at_acc(const Real* a, const Real* b, Real* c, std::size_t k, std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const Real* ap = a + p * m;
        const Real* bp = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const Real av = ap[i];
            if (av == Real(0)) continue;
            Real* ci = c + i * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

}  // namespace kernel

/// Row-wise softmax of a matrix (or of a vector / scalar treated as one row).
template <typename Real>
Tensor<Real> softmax(const Tensor<Real>& v) {
    if (v.rank() > 2) throw ShapeError("softmax expects rank <= 2, got " + shape_str(v.shape()));
    const std::size_t c = v.rank() == 0 ? 1 : v.shape().back();
    if (c == 0) throw ShapeError("softmax over an empty last dimension");
    Tensor<Real> out(v.shape());
    const std::size_t rows = v.size() / c;
    for (std::size_t r = 0; r < rows; ++r) {
        const Real* in = v.data() + r * c;
        Real* o = out.data() + r * c;
        Real m = *std::max_element(in, in + c);
        Real s = 0;
        for (std::size_t j = 0; j < c; ++j) {
            o[j] = std::exp(in[j] - m);
            s += o[j];
        }
        for (std::size_t j = 0; j < c; ++j) o[j] /= s;
    }
    return out;
}

// ----------------------------- primitives -----------------------------

template <typename Real>
Var<Real> matmul(Var<Real> a, Var<Real> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.rows()) {
        throw ShapeError("matmul: cannot multiply " + shape_str(av.shape()) + " by " + shape_str(bv.shape()));
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
    Tensor<Real> out = Tensor<Real>::matrix(m, n);
    kernel::gemm_acc(av.data(), bv.data(), out.data(), m, k, n);
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) kernel::gemm_bt_acc(g.data(), t.value(ib).data(), t.grad_slot(ia).data(), m, n, k);
        if (t.requires_grad(ib)) kernel::gemm_at_acc(t.value(ia).data(), g.data(), t.grad_slot(ib).data(), m, k, n);
    });
}

/// a * b^T without materializing the transpose.
template <typename Real>
Var<Real> matmul_bt(Var<Real> a, Var<Real> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (av.rank() != 2 || bv.rank() != 2 || av.cols() != bv.cols()) {
        throw ShapeError("matmul_bt: cannot multiply " + shape_str(av.shape()) + " by transpose of " +
                         shape_str(bv.shape()));
    }
    const std::size_t m = av.rows(), k = av.cols(), n = bv.rows();
    Tensor<Real> out = Tensor<Real>::matrix(m, n);
    kernel::gemm_bt_acc(av.data(), bv.data(), out.data(), m, k, n);
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {a, b}, [ia, ib, m, k, n](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);  // m x n
        if (t.requires_grad(ia)) kernel::gemm_acc(g.data(), t.value(ib).data(), t.grad_slot(ia).data(), m, n, k);
        if (t.requires_grad(ib)) kernel::gemm_at_acc(g.data(), t.value(ia).data(), t.grad_slot(ib).data(), m, n, k);
    });
}

template <typename Real>
Var<Real> add(Var<Real> a, Var<Real> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (!av.same_shape(bv)) throw ShapeError("add: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor<Real> out = av;
    axpy(Real(1), bv, out);
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) axpy(Real(1), g, t.grad_slot(ia));
        if (t.requires_grad(ib)) axpy(Real(1), g, t.grad_slot(ib));
    });
}

template <typename Real>
Var<Real> sub(Var<Real> a, Var<Real> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (!av.same_shape(bv)) throw ShapeError("sub: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor<Real> out = av;
    axpy(Real(-1), bv, out);
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) axpy(Real(1), g, t.grad_slot(ia));
        if (t.requires_grad(ib)) axpy(Real(-1), g, t.grad_slot(ib));
    });
}

/// Elementwise product.
template <typename Real>
Var<Real> mul(Var<Real> a, Var<Real> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (!av.same_shape(bv)) throw ShapeError("mul: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    Tensor<Real> out = av;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(std::move(out), {a, b}, [ia, ib](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) {
            auto& ga = t.grad_slot(ia);
            const auto& bv = t.value(ib);
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_slot(ib);
            const auto& av = t.value(ia);
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
        }
    });
}

template <typename Real>
Var<Real> scale(Var<Real> a, Real c) {
    Tensor<Real> out = a.value();
    scale_inplace(out, c);
    const std::size_t ia = a.id;
    return a.tape->record(std::move(out), {a}, [ia, c](Tape<Real>& t, std::size_t self) {
        axpy(c, t.grad(self), t.grad_slot(ia));
    });
}

/// Adds a 1 x n row to every row of an m x n matrix.
template <typename Real>
Var<Real> add_row(Var<Real> a, Var<Real> row) {
    const auto& av = a.value();
    const auto& rv = row.value();
    if (av.rank() != 2 || rv.rank() != 2 || rv.rows() != 1 || rv.cols() != av.cols()) {
        throw ShapeError("add_row: cannot broadcast " + shape_str(rv.shape()) + " over " + shape_str(av.shape()));
    }
    const std::size_t m = av.rows(), n = av.cols();
    Tensor<Real> out = av;
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(i, j) += rv[j];
    const std::size_t ia = a.id, ir = row.id;
    return a.tape->record(std::move(out), {a, row}, [ia, ir, m, n](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        if (t.requires_grad(ia)) axpy(Real(1), g, t.grad_slot(ia));
        if (t.requires_grad(ir)) {
            auto& gr = t.grad_slot(ir);
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t j = 0; j < n; ++j) gr[j] += g(i, j);
        }
    });
}

template <typename Real>
Var<Real> transpose(Var<Real> a) {
    const auto& av = a.value();
    const std::size_t m = av.rows(), n = av.cols();
    Tensor<Real> out = Tensor<Real>::matrix(n, m);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out(j, i) = av(i, j);
    const std::size_t ia = a.id;
    return a.tape->record(std::move(out), {a}, [ia, m, n](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad_slot(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) ga(i, j) += g(j, i);
    });
}

/// Exact (erf-based) GELU.
template <typename Real>
Var<Real> gelu(Var<Real> a) {
    const auto& av = a.value();
    Tensor<Real> out(av.shape());
    const Real inv_sqrt2 = Real(1) / std::numbers::sqrt2_v<Real>;
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = Real(0.5) * av[i] * (Real(1) + std::erf(av[i] * inv_sqrt2));
    const std::size_t ia = a.id;
    return a.tape->record(std::move(out), {a}, [ia, inv_sqrt2](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& x = t.value(ia);
        auto& ga = t.grad_slot(ia);
        const Real inv_sqrt_2pi = inv_sqrt2 * std::numbers::inv_sqrtpi_v<Real>;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const Real cdf = Real(0.5) * (Real(1) + std::erf(x[i] * inv_sqrt2));
            const Real pdf = inv_sqrt_2pi * std::exp(Real(-0.5) * x[i] * x[i]);
            ga[i] += g[i] * (cdf + x[i] * pdf);
        }
    });
}

/// Row-wise layer normalization with 1 x n gain and bias.
template <typename Real>
Var<Real> layer_norm(Var<Real> x, Var<Real> gain, Var<Real> bias, Real eps = Real(1e-5)) {
    const auto& xv = x.value();
    const std::size_t m = xv.rows(), n = xv.cols();
    if (gain.value().shape() != Shape{1, n} || bias.value().shape() != Shape{1, n}) {
        throw ShapeError("layer_norm: gain/bias must be [1x" + std::to_string(n) + "], got " +
                         shape_str(gain.value().shape()) + " and " + shape_str(bias.value().shape()));
    }
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    Tensor<Real> out = Tensor<Real>::matrix(m, n);
    std::vector<Real> xhat(m * n), inv_std(m);
    for (std::size_t i = 0; i < m; ++i) {
        Real mean = 0;
        for (std::size_t j = 0; j < n; ++j) mean += xv(i, j);
        mean /= Real(n);
        Real var = 0;
        for (std::size_t j = 0; j < n; ++j) var += (xv(i, j) - mean) * (xv(i, j) - mean);
        var /= Real(n);
        inv_std[i] = Real(1) / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            xhat[i * n + j] = (xv(i, j) - mean) * inv_std[i];
            out(i, j) = xhat[i * n + j] * gv[j] + bv[j];
        }
    }
    const std::size_t ix = x.id, ig = gain.id, ib = bias.id;
    return x.tape->record(
        std::move(out), {x, gain, bias},
        [ix, ig, ib, m, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<Real>& t, std::size_t self) {
            const auto& g = t.grad(self);
            if (t.requires_grad(ig)) {
                auto& gg = t.grad_slot(ig);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gg[j] += g(i, j) * xhat[i * n + j];
            }
            if (t.requires_grad(ib)) {
                auto& gb = t.grad_slot(ib);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) gb[j] += g(i, j);
            }
            if (t.requires_grad(ix)) {
                const auto& gv = t.value(ig);
                auto& gx = t.grad_slot(ix);
                std::vector<Real> dxhat(n);
                for (std::size_t i = 0; i < m; ++i) {
                    Real s1 = 0, s2 = 0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dxhat[j] = g(i, j) * gv[j];
                        s1 += dxhat[j];
                        s2 += dxhat[j] * xhat[i * n + j];
                    }
                    for (std::size_t j = 0; j < n; ++j) {
                        gx(i, j) += inv_std[i] / Real(n) * (Real(n) * dxhat[j] - s1 - xhat[i * n + j] * s2);
                    }
                }
            }
        });
}

template <typename Real>
Var<Real> softmax_rows(Var<Real> a) {
    Tensor<Real> out = softmax(a.value());
    const std::size_t ia = a.id;
    const std::size_t c = out.rank() == 0 ? 1 : out.shape().back();
    return a.tape->record(std::move(out), {a}, [ia, c](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        const auto& y = t.value(self);
        auto& ga = t.grad_slot(ia);
        for (std::size_t r = 0; r < y.size() / c; ++r) {
            Real dot = 0;
            for (std::size_t j = 0; j < c; ++j) dot += g[r * c + j] * y[r * c + j];
            for (std::size_t j = 0; j < c; ++j) ga[r * c + j] += y[r * c + j] * (g[r * c + j] - dot);
        }
    });
}

/// Gathers rows of `table` by index.
template <typename Real>
Var<Real> gather_rows(Var<Real> table, std::vector<std::size_t> rows) {
    const auto& tv = table.value();
    const std::size_t n = tv.cols();
    Tensor<Real> out = Tensor<Real>::matrix(rows.size(), n);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] >= tv.rows()) {
            throw InputError("row index " + std::to_string(rows[i]) + " out of range for table " +
                             shape_str(tv.shape()));
        }
        std::copy_n(tv.data() + rows[i] * n, n, out.data() + i * n);
    }
    const std::size_t it = table.id;
    return table.tape->record(std::move(out), {table}, [it, n, rows = std::move(rows)](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& gt = t.grad_slot(it);
        for (std::size_t i = 0; i < rows.size(); ++i)
            for (std::size_t j = 0; j < n; ++j) gt(rows[i], j) += g(i, j);
    });
}

/// Columns [start, start + count) of a matrix.
template <typename Real>
Var<Real> slice_cols(Var<Real> a, std::size_t start, std::size_t count) {
    const auto& av = a.value();
    if (start + count > av.cols()) {
        throw ShapeError("slice_cols: [" + std::to_string(start) + ", " + std::to_string(start + count) +
                         ") outside " + shape_str(av.shape()));
    }
    const std::size_t m = av.rows();
    Tensor<Real> out = Tensor<Real>::matrix(m, count);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < count; ++j) out(i, j) = av(i, start + j);
    const std::size_t ia = a.id;
    return a.tape->record(std::move(out), {a}, [ia, m, start, count](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        auto& ga = t.grad_slot(ia);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < count; ++j) ga(i, start + j) += g(i, j);
    });
}

template <typename Real>
Var<Real> concat_cols(const std::vector<Var<Real>>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no inputs");
    const std::size_t m = parts[0].value().rows();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& p : parts) {
        if (p.value().rank() != 2 || p.value().rows() != m) {
            throw ShapeError("concat_cols: row mismatch at " + shape_str(p.value().shape()));
        }
        widths.push_back(p.value().cols());
        total += widths.back();
    }
    Tensor<Real> out = Tensor<Real>::matrix(m, total);
    std::size_t off = 0;
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& pv = parts[k].value();
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < widths[k]; ++j) out(i, off + j) = pv(i, j);
        off += widths[k];
    }
    std::vector<std::size_t> ids;
    for (const auto& p : parts) ids.push_back(p.id);
    return parts[0].tape->record(std::move(out), parts, [ids, widths, m, total](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        std::size_t off = 0;
        for (std::size_t k = 0; k < ids.size(); ++k) {
            if (t.requires_grad(ids[k])) {
                auto& gk = t.grad_slot(ids[k]);
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < widths[k]; ++j) gk(i, j) += g(i, off + j);
            }
            off += widths[k];
        }
        (void)total;
    });
}

/// Stacks 1 x n rows into a k x n matrix.
template <typename Real>
Var<Real> stack_rows(const std::vector<Var<Real>>& rows) {
    if (rows.empty()) throw ShapeError("stack_rows: no inputs");
    const std::size_t n = rows[0].value().cols();
    Tensor<Real> out = Tensor<Real>::matrix(rows.size(), n);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        const auto& rv = rows[i].value();
        if (rv.shape() != Shape{1, n}) throw ShapeError("stack_rows: expected [1x" + std::to_string(n) + "], got " +
                                                        shape_str(rv.shape()));
        std::copy_n(rv.data(), n, out.data() + i * n);
    }
    std::vector<std::size_t> ids;
    for (const auto& r : rows) ids.push_back(r.id);
    return rows[0].tape->record(std::move(out), rows, [ids, n](Tape<Real>& t, std::size_t self) {
        const auto& g = t.grad(self);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (!t.requires_grad(ids[i])) continue;
            auto& gi = t.grad_slot(ids[i]);
            for (std::size_t j = 0; j < n; ++j) gi[j] += g(i, j);
        }
    });
}

/// Inverted dropout; identity when p == 0.
template <typename Real, typename Rng>
Var<Real> dropout(Var<Real> a, Real p, Rng& rng) {
    if (p <= Real(0)) return a;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const Real keep_scale = Real(1) / (Real(1) - p);
    Tensor<Real> mask(a.value().shape());
    for (auto& m : mask.storage()) m = u(rng) < double(p) ? Real(0) : keep_scale;
    return mul(a, a.tape->constant(std::move(mask)));
}

template <typename Real>
Var<Real> sum(Var<Real> a) {
    Real s = 0;
    for (Real v : a.value().values()) s += v;
    const std::size_t ia = a.id;
    return a.tape->record(Tensor<Real>::scalar(s), {a}, [ia](Tape<Real>& t, std::size_t self) {
        const Real g = t.grad(self)[0];
        for (auto& v : t.grad_slot(ia).storage()) v += g;
    });
}

/// Mean over the batch of -log softmax(logits)[label].
template <typename Real>
Var<Real> cross_entropy(Var<Real> logits, const std::vector<int>& labels) {
    const auto& lv = logits.value();
    if (lv.rank() != 2) throw ShapeError("cross_entropy expects [B x C] logits, got " + shape_str(lv.shape()));
    const std::size_t b = lv.rows(), c = lv.cols();
    if (labels.size() != b) {
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " + std::to_string(b) +
                         " rows");
    }
    for (int y : labels) {
        if (y < 0 || static_cast<std::size_t>(y) >= c) {
            throw InputError("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");
        }
    }
    Tensor<Real> probs = softmax(lv);
    Real total = 0;
    for (std::size_t i = 0; i < b; ++i) {
        const Real* row = lv.data() + i * c;
        const Real m = *std::max_element(row, row + c);
        Real s = 0;
        for (std::size_t j = 0; j < c; ++j) s += std::exp(row[j] - m);
        total += m + std::log(s) - row[labels[i]];
    }
    const std::size_t il = logits.id;
    return logits.tape->record(Tensor<Real>::scalar(total / Real(b)), {logits},
                               [il, b, c, labels, probs = std::move(probs)](Tape<Real>& t, std::size_t self) {
                                   const Real g = t.grad(self)[0] / Real(b);
                                   auto& gl = t.grad_slot(il);
                                   for (std::size_t i = 0; i < b; ++i) {
                                       for (std::size_t j = 0; j < c; ++j) gl(i, j) += g * probs(i, j);
                                       gl(i, labels[i]) -= g;
                                   }
                               });
}

/// Mean over every entry of (a - b)^2.
template <typename Real>
Var<Real> mse(Var<Real> a, Var<Real> b) {
    const auto& av = a.value();
    const auto& bv = b.value();
    if (!av.same_shape(bv)) throw ShapeError("mse: " + shape_str(av.shape()) + " vs " + shape_str(bv.shape()));
    const std::size_t n = av.size();
    Real s = 0;
    for (std::size_t i = 0; i < n; ++i) s += (av[i] - bv[i]) * (av[i] - bv[i]);
    const std::size_t ia = a.id, ib = b.id;
    return a.tape->record(Tensor<Real>::scalar(s / Real(n)), {a, b}, [ia, ib, n](Tape<Real>& t, std::size_t self) {
        const Real g = t.grad(self)[0] * Real(2) / Real(n);
        const auto& av = t.value(ia);
        const auto& bv = t.value(ib);
        if (t.requires_grad(ia)) {
            auto& ga = t.grad_slot(ia);
            for (std::size_t i = 0; i < n; ++i) ga[i] += g * (av[i] - bv[i]);
        }
        if (t.requires_grad(ib)) {
            auto& gb = t.grad_slot(ib);
            for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (av[i] - bv[i]);
        }
    });
}

// ----------------------------- gradient check -----------------------------

template <typename Real>
Tensor<Real>& tensor_ref(Tensor<Real>& t) {
    return t;
}

template <typename Real>
struct GradCheckResult {
    Real max_rel_error = 0;
    std::string worst_name;
    std::size_t worst_index = 0;
    std::size_t checked = 0;
};

/// Compares tape gradients against central differences for every entry of
/// every named tensor in `params`.
///
/// `loss` is called as `loss(tape)` and must read `params` by reference and
/// bind each entry with `tape.parameter(name, tensor)`. Entries are perturbed
/// in place and restored afterwards. The error per entry is
/// |analytic - fd| / max(|analytic|, |fd|, 1e-8).
template <typename Real, typename Params, typename LossFn>
GradCheckResult<Real> grad_check(LossFn&& loss, Params& params, Real eps) {
    Gradients<Real> analytic;
    {
        Tape<Real> tape;
        Var<Real> l = loss(tape);
        analytic = tape.backward(l);
    }
    auto eval = [&] {
        Tape<Real> tape;
        return loss(tape).value().item();
    };
    GradCheckResult<Real> res;
    for (auto& [name, entry] : params) {
        Tensor<Real>& x = tensor_ref(entry);
        auto it = analytic.find(name);
        for (std::size_t i = 0; i < x.size(); ++i) {
            const Real saved = x[i];
            x[i] = saved + eps;
            const Real fp = eval();
            x[i] = saved - eps;
            const Real fm = eval();
            x[i] = saved;
            const Real fd = (fp - fm) / (Real(2) * eps);
            const Real an = it == analytic.end() ? Real(0) : it->second[i];
            const Real denom = std::max({std::abs(an), std::abs(fd), Real(1e-8)});
            const Real err = std::abs(an - fd) / denom;
            ++res.checked;
            if (err > res.max_rel_error) {
                res.max_rel_error = err;
                res.worst_name = name;
                res.worst_index = i;
            }
        }
    }
    return res;
}

}  // namespace sdft
