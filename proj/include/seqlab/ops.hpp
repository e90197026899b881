#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <vector>

#include "seqlab/tensor.hpp"

namespace seqlab {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;
using MapA = Eigen::Map<Eigen::ArrayXd>;
using CMapA = Eigen::Map<const Eigen::ArrayXd>;

inline void check_finite(const Tensor& t, const char* what) {
    for (double v : t.values())
        if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value in ") + what);
}

namespace detail {

// b must have the same shape as a, or a shape equal to a trailing suffix of
// a's shape (a scalar {1} qualifies). Returns the broadcast block count.
inline std::size_t broadcast_rows(const Tensor& a, const Tensor& b, const char* op) {
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    bool suffix = sb.size() <= sa.size() &&
                  std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
    if (!suffix && !(sb.size() == 1 && sb[0] == 1))
        throw std::invalid_argument(std::string(op) + ": shape " + shape_str(sb) +
                                    " does not trailing-broadcast onto " + shape_str(sa));
    return a.numel() / b.numel();
}

inline void record_if_needed(Tensor& out, bool any_grad, std::function<void()> fn) {
    if (Tape* tape = Tape::active(); tape && any_grad) {
        out.set_requires_grad(true);
        tape->record(std::move(fn));
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// binary elementwise (trailing broadcast on the right operand)
// ---------------------------------------------------------------------------

enum class BinOp { Add, Sub, Mul };

inline Tensor binary_op(BinOp op, const Tensor& a, const Tensor& b) {
    const char* name = op == BinOp::Add ? "add" : op == BinOp::Sub ? "sub" : "mul";
    std::size_t rows = detail::broadcast_rows(a, b, name);
    std::size_t bn = b.numel();
    Tensor out(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        CMapA av(a.data() + r * bn, bn);
        CMapA bv(b.data(), bn);
        MapA ov(out.data() + r * bn, bn);
        switch (op) {
            case BinOp::Add: ov = av + bv; break;
            case BinOp::Sub: ov = av - bv; break;
            case BinOp::Mul: ov = av * bv; break;
        }
    }
    detail::record_if_needed(out, a.requires_grad() || b.requires_grad(),
                             [op, a = a, b = b, out = out]() mutable {
        std::size_t bn = b.numel();
        std::size_t rows = a.numel() / bn;
        const double* g = out.grad();
        if (a.requires_grad()) {
            MapA da(a.grad(), a.numel());
            CMapA gv(g, a.numel());
            if (op == BinOp::Mul) {
                for (std::size_t r = 0; r < rows; ++r)
                    MapA(a.grad() + r * bn, bn) += CMapA(g + r * bn, bn) * CMapA(b.data(), bn);
            } else {
                da += gv;
            }
        }
        if (b.requires_grad()) {
            MapA db(b.grad(), bn);
            for (std::size_t r = 0; r < rows; ++r) {
                CMapA gv(g + r * bn, bn);
                switch (op) {
                    case BinOp::Add: db += gv; break;
                    case BinOp::Sub: db -= gv; break;
                    case BinOp::Mul: db += gv * CMapA(a.data() + r * bn, bn); break;
                }
            }
        }
    });
    return out;
}

inline Tensor add(const Tensor& a, const Tensor& b) { return binary_op(BinOp::Add, a, b); }
inline Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(BinOp::Sub, a, b); }
inline Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(BinOp::Mul, a, b); }

// ---------------------------------------------------------------------------
// unary elementwise
// ---------------------------------------------------------------------------

inline Tensor exp(const Tensor& a) {
    Tensor out(a.shape());
    MapA(out.data(), out.numel()) = CMapA(a.data(), a.numel()).exp();
    detail::record_if_needed(out, a.requires_grad(), [a = a, out = out]() mutable {
        MapA(a.grad(), a.numel()) +=
            CMapA(out.grad(), out.numel()) * CMapA(out.data(), out.numel());
    });
    return out;
}

namespace detail {
inline void sigmoid_into(const double* x, double* y, std::size_t n) {
    // 0.5*(1+tanh(x/2)) is monotone and saturates without overflow
    MapA(y, n) = 0.5 * (1.0 + (CMapA(x, n) * 0.5).tanh());
}
}  // namespace detail

// softplus(x) = log(1+e^x), linear branch above 30
inline Tensor softplus(const Tensor& a) {
    Tensor out(a.shape());
    CMapA x(a.data(), a.numel());
    MapA(out.data(), out.numel()) = (x > 30.0).select(x, x.min(30.0).exp().log1p());
    detail::record_if_needed(out, a.requires_grad(), [a = a, out = out]() mutable {
        std::size_t n = a.numel();
        Eigen::ArrayXd sig(n);
        detail::sigmoid_into(a.data(), sig.data(), n);
        MapA(a.grad(), n) += CMapA(out.grad(), n) * sig;
    });
    return out;
}

// silu(x) = x * sigmoid(x)
inline Tensor silu(const Tensor& a) {
    Tensor out(a.shape());
    std::size_t n = a.numel();
    Eigen::ArrayXd sig(n);
    detail::sigmoid_into(a.data(), sig.data(), n);
    MapA(out.data(), n) = CMapA(a.data(), n) * sig;
    detail::record_if_needed(out, a.requires_grad(), [a = a, out = out]() mutable {
        std::size_t n = a.numel();
        Eigen::ArrayXd sig(n);
        detail::sigmoid_into(a.data(), sig.data(), n);
        CMapA x(a.data(), n);
        MapA(a.grad(), n) += CMapA(out.grad(), n) * sig * (1.0 + x * (1.0 - sig));
    });
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out(a.shape());
    MapA(out.data(), out.numel()) = CMapA(a.data(), a.numel()) * c;
    detail::record_if_needed(out, a.requires_grad(), [a = a, out = out, c]() mutable {
        MapA(a.grad(), a.numel()) += CMapA(out.grad(), out.numel()) * c;
    });
    return out;
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()));
    int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    MapM(out.data(), m, n).noalias() = CMapM(a.data(), m, k) * CMapM(b.data(), k, n);
    detail::record_if_needed(out, a.requires_grad() || b.requires_grad(),
                             [a = a, b = b, out = out, m, k, n]() mutable {
        CMapM g(out.grad(), m, n);
        if (a.requires_grad())
            MapM(a.grad(), m, k).noalias() += g * CMapM(b.data(), k, n).transpose();
        if (b.requires_grad())
            MapM(b.grad(), k, n).noalias() += CMapM(a.data(), m, k).transpose() * g;
    });
    return out;
}

// a[m,k] * b[n,k]^T without materializing the transpose
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape()) +
                                    " x " + shape_str(b.shape()) + "^T");
    int m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor out(Shape{m, n});
    MapM(out.data(), m, n).noalias() = CMapM(a.data(), m, k) * CMapM(b.data(), n, k).transpose();
    detail::record_if_needed(out, a.requires_grad() || b.requires_grad(),
                             [a = a, b = b, out = out, m, k, n]() mutable {
        CMapM g(out.grad(), m, n);
        if (a.requires_grad())
            MapM(a.grad(), m, k).noalias() += g * CMapM(b.data(), n, k);
        if (b.requires_grad())
            MapM(b.grad(), n, k).noalias() += g.transpose() * CMapM(a.data(), m, k);
    });
    return out;
}

// ---------------------------------------------------------------------------
// reductions and reshuffles
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    Tensor out = Tensor::scalar(CMapA(a.data(), a.numel()).sum());
    detail::record_if_needed(out, a.requires_grad(), [a = a, out = out]() mutable {
        MapA(a.grad(), a.numel()) += out.grad()[0];
    });
    return out;
}

inline Tensor slice_cols(const Tensor& a, int start, int len) {
    if (a.rank() != 2 || start < 0 || len <= 0 || start + len > a.dim(1))
        throw std::invalid_argument("slice_cols: bad range");
    int m = a.dim(0), n = a.dim(1);
    Tensor out(Shape{m, len});
    MapM(out.data(), m, len) = CMapM(a.data(), m, n).middleCols(start, len);
    detail::record_if_needed(out, a.requires_grad(), [a = a, out = out, start, len, m, n]() mutable {
        MapM(a.grad(), m, n).middleCols(start, len) += CMapM(out.grad(), m, len);
    });
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty input");
    int m = parts[0].dim(0), n = 0;
    bool any_grad = false;
    for (const Tensor& p : parts) {
        if (p.rank() != 2 || p.dim(0) != m) throw std::invalid_argument("concat_cols: row mismatch");
        n += p.dim(1);
        any_grad = any_grad || p.requires_grad();
    }
    Tensor out(Shape{m, n});
    int col = 0;
    for (const Tensor& p : parts) {
        MapM(out.data(), m, n).middleCols(col, p.dim(1)) = CMapM(p.data(), m, p.dim(1));
        col += p.dim(1);
    }
    detail::record_if_needed(out, any_grad, [parts = parts, out = out, m, n]() mutable {
        int col = 0;
        for (Tensor& p : parts) {
            int w = p.dim(1);
            if (p.requires_grad())
                MapM(p.grad(), m, w) += CMapM(out.grad(), m, n).middleCols(col, w);
            col += w;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// softmax over the last axis (max-subtracted)
// ---------------------------------------------------------------------------

inline Tensor softmax(const Tensor& a) {
    if (a.rank() < 1 || a.dim(a.rank() - 1) < 1)
        throw std::invalid_argument("softmax: needs a non-empty last axis");
    std::size_t n = static_cast<std::size_t>(a.dim(a.rank() - 1));
    std::size_t rows = a.numel() / n;
    Tensor out(a.shape());
    for (std::size_t r = 0; r < rows; ++r) {
        CMapA x(a.data() + r * n, n);
        MapA y(out.data() + r * n, n);
        y = (x - x.maxCoeff()).exp();
        y /= y.sum();
    }
    detail::record_if_needed(out, a.requires_grad(), [a = a, out = out, n]() mutable {
        std::size_t rows = a.numel() / n;
        for (std::size_t r = 0; r < rows; ++r) {
            CMapA y(out.data() + r * n, n);
            CMapA g(out.grad() + r * n, n);
            MapA da(a.grad() + r * n, n);
            double dot = (g * y).sum();
            da += (g - dot) * y;
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// normalization (epsilon inside the root)
// ---------------------------------------------------------------------------

inline constexpr double kNormEps = 1e-5;

inline Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias) {
    std::size_t d = static_cast<std::size_t>(a.dim(a.rank() - 1));
    if (gain.numel() != d || bias.numel() != d)
        throw std::invalid_argument("layer_norm: gain/bias must match the last axis");
    std::size_t rows = a.numel() / d;
    Tensor out(a.shape());
    CMapA g(gain.data(), d), b(bias.data(), d);
    for (std::size_t r = 0; r < rows; ++r) {
        CMapA x(a.data() + r * d, d);
        MapA y(out.data() + r * d, d);
        double mu = x.mean();
        double var = (x - mu).square().mean();
        y = (x - mu) / std::sqrt(var + kNormEps) * g + b;
    }
    detail::record_if_needed(out, a.requires_grad() || gain.requires_grad() || bias.requires_grad(),
                             [a = a, gain = gain, bias = bias, out = out, d]() mutable {
        std::size_t rows = a.numel() / d;
        CMapA g(gain.data(), d);
        Eigen::ArrayXd xhat(d), dxhat(d);
        for (std::size_t r = 0; r < rows; ++r) {
            CMapA x(a.data() + r * d, d);
            CMapA go(out.grad() + r * d, d);
            double mu = x.mean();
            double var = (x - mu).square().mean();
            double inv = 1.0 / std::sqrt(var + kNormEps);
            xhat = (x - mu) * inv;
            if (gain.requires_grad()) MapA(gain.grad(), d) += go * xhat;
            if (bias.requires_grad()) MapA(bias.grad(), d) += go;
            if (a.requires_grad()) {
                dxhat = go * g;
                double m1 = dxhat.mean();
                double m2 = (dxhat * xhat).mean();
                MapA(a.grad() + r * d, d) += inv * (dxhat - m1 - xhat * m2);
            }
        }
    });
    return out;
}

inline Tensor rms_norm(const Tensor& a, const Tensor& gain) {
    std::size_t d = static_cast<std::size_t>(a.dim(a.rank() - 1));
    if (gain.numel() != d) throw std::invalid_argument("rms_norm: gain must match the last axis");
    std::size_t rows = a.numel() / d;
    Tensor out(a.shape());
    CMapA g(gain.data(), d);
    for (std::size_t r = 0; r < rows; ++r) {
        CMapA x(a.data() + r * d, d);
        MapA(out.data() + r * d, d) = x / std::sqrt(x.square().mean() + kNormEps) * g;
    }
    detail::record_if_needed(out, a.requires_grad() || gain.requires_grad(),
                             [a = a, gain = gain, out = out, d]() mutable {
        std::size_t rows = a.numel() / d;
        CMapA g(gain.data(), d);
        for (std::size_t r = 0; r < rows; ++r) {
            CMapA x(a.data() + r * d, d);
            CMapA go(out.grad() + r * d, d);
            double r2 = x.square().mean() + kNormEps;
            double rinv = 1.0 / std::sqrt(r2);
            if (gain.requires_grad()) MapA(gain.grad(), d) += go * x * rinv;
            if (a.requires_grad()) {
                double mix = (go * g * x).sum() / (static_cast<double>(d) * r2);
                MapA(a.grad() + r * d, d) += rinv * (go * g - x * mix);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// embedding lookup
// ---------------------------------------------------------------------------

inline Tensor embedding_lookup(const Tensor& table, const std::vector<int>& ids) {
    if (table.rank() != 2) throw std::invalid_argument("embedding_lookup: table must be 2-d");
    int v = table.dim(0), d = table.dim(1);
    for (int id : ids)
        if (id < 0 || id >= v) throw std::out_of_range("embedding_lookup: id out of range");
    int l = static_cast<int>(ids.size());
    Tensor out(Shape{l, d});
    for (int i = 0; i < l; ++i)
        std::copy_n(table.data() + static_cast<std::size_t>(ids[i]) * d, d,
                    out.data() + static_cast<std::size_t>(i) * d);
    detail::record_if_needed(out, table.requires_grad(), [table = table, out = out, ids, d]() mutable {
        for (std::size_t i = 0; i < ids.size(); ++i)
            MapA(table.grad() + static_cast<std::size_t>(ids[i]) * d, d) +=
                CMapA(out.grad() + i * d, d);
    });
    return out;
}

// ---------------------------------------------------------------------------
// masked cross entropy, normalized over one sequence's target tokens
// ---------------------------------------------------------------------------

inline Tensor cross_entropy(const Tensor& logits, const std::vector<int>& targets,
                            const std::vector<bool>& mask) {
    if (logits.rank() != 2) throw std::invalid_argument("cross_entropy: logits must be [L,V]");
    std::size_t l = static_cast<std::size_t>(logits.dim(0));
    std::size_t v = static_cast<std::size_t>(logits.dim(1));
    if (targets.size() != l || mask.size() != l)
        throw std::invalid_argument("cross_entropy: targets/mask must have length L");
    std::size_t count = 0;
    double total = 0.0;
    for (std::size_t t = 0; t < l; ++t) {
        if (!mask[t]) continue;
        if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= v)
            throw std::out_of_range("cross_entropy: target id out of range");
        CMapA row(logits.data() + t * v, v);
        double m = row.maxCoeff();
        total += m + std::log((row - m).exp().sum()) - row[targets[t]];
        ++count;
    }
    if (count == 0) throw std::invalid_argument("cross_entropy: empty mask");
    Tensor out = Tensor::scalar(total / static_cast<double>(count));
    detail::record_if_needed(out, logits.requires_grad(),
                             [logits = logits, out = out, targets, mask, v, count]() mutable {
        double gscale = out.grad()[0] / static_cast<double>(count);
        std::size_t l = static_cast<std::size_t>(logits.dim(0));
        Eigen::ArrayXd p(v);
        for (std::size_t t = 0; t < l; ++t) {
            if (!mask[t]) continue;
            CMapA row(logits.data() + t * v, v);
            p = (row - row.maxCoeff()).exp();
            p /= p.sum();
            MapA dl(logits.grad() + t * v, v);
            dl += gscale * p;
            dl[targets[t]] -= gscale;
        }
    });
    return out;
}

}  // namespace seqlab
