#pragma once

#include <cmath>
#include <vector>

#include "seqlab/ops.hpp"
#include "seqlab/rng.hpp"
#include "seqlab/tensor.hpp"

namespace seqlab {

// Selective state-space block parameters. A is stored as a_log with
// A = -exp(a_log), which keeps the continuous system strictly stable:
// |exp(delta*A)| < 1 for any delta > 0.
struct SsmLayerParams {
    int d_model = 0;
    int d_inner = 0;
    int n_state = 0;
    int k_conv = 0;

    Tensor rms_gain;    // [d_model]
    Tensor w_in;        // [d_model, 2*d_inner], signal + gate
    Tensor conv_kernel; // [d_inner, k_conv], depthwise causal
    Tensor w_delta;     // [d_inner, d_inner]
    Tensor delta_bias;  // [d_inner]
    Tensor w_b;         // [d_inner, n_state]
    Tensor w_c;         // [d_inner, n_state]
    Tensor a_log;       // [d_inner, n_state]
    Tensor d_skip;      // [d_inner]
    Tensor w_out;       // [d_inner, d_model]

    static SsmLayerParams init(int d_model, int n_state, int expand, int k_conv, Rng& rng) {
        SsmLayerParams p;
        p.d_model = d_model;
        p.d_inner = expand * d_model;
        p.n_state = n_state;
        p.k_conv = k_conv;
        auto gauss = [&rng](Shape shape, double std) {
            Tensor t(std::move(shape), true);
            for (double& v : t.values()) v = std * rng.next_normal();
            return t;
        };
        int di = p.d_inner;
        p.rms_gain = Tensor::full({d_model}, 1.0).set_requires_grad();
        p.w_in = gauss({d_model, 2 * di}, 1.0 / std::sqrt(static_cast<double>(d_model)));
        p.conv_kernel = gauss({di, k_conv}, 1.0 / std::sqrt(static_cast<double>(k_conv)));
        p.w_delta = gauss({di, di}, 1.0 / std::sqrt(static_cast<double>(di)));
        // softplus(bias) log-uniform in [1e-3, 1e-1]: diverse initial memory horizons
        p.delta_bias = Tensor({di}, true);
        for (double& v : p.delta_bias.values()) {
            double dt = std::exp(rng.next_uniform(std::log(1e-3), std::log(1e-1)));
            v = std::log(std::expm1(dt));
        }
        p.w_b = gauss({di, n_state}, 1.0 / std::sqrt(static_cast<double>(di)));
        p.w_c = gauss({di, n_state}, 1.0 / std::sqrt(static_cast<double>(di)));
        // S4D-real ladder: A = -(1..N) on every channel
        p.a_log = Tensor({di, n_state}, true);
        for (int d = 0; d < di; ++d)
            for (int n = 0; n < n_state; ++n)
                p.a_log.data()[d * n_state + n] = std::log(static_cast<double>(n + 1));
        p.d_skip = Tensor::full({di}, 1.0).set_requires_grad();
        p.w_out = gauss({di, d_model}, 1.0 / std::sqrt(static_cast<double>(di)));
        return p;
    }

    std::vector<Tensor> parameters() const {
        return {rms_gain, w_in, conv_kernel, w_delta, delta_bias, w_b, w_c, a_log, d_skip, w_out};
    }
};

// Zero-order-hold discretization of the diagonal system, with the input
// contribution fused in: a_bar = exp(delta*A), b_bar_x = delta*B*x.
struct DiscreteParams {
    Tensor a_bar;    // [L, d_inner, n_state]
    Tensor b_bar_x;  // [L, d_inner, n_state]
};

inline DiscreteParams discretize(const Tensor& delta, const Tensor& A, const Tensor& B,
                                 const Tensor& x) {
    int L = delta.dim(0), d = delta.dim(1), N = A.dim(1);
    if (A.dim(0) != d || B.dim(0) != L || B.dim(1) != N || x.dim(0) != L || x.dim(1) != d)
        throw std::invalid_argument("discretize: inconsistent shapes");
    for (double v : delta.values())
        if (!(v > 0.0)) throw std::invalid_argument("discretize: delta must be positive");

    DiscreteParams dp{Tensor({L, d, N}), Tensor({L, d, N})};
    for (int l = 0; l < L; ++l) {
        CMapA brow(B.data() + static_cast<std::size_t>(l) * N, N);
        for (int c = 0; c < d; ++c) {
            std::size_t off = (static_cast<std::size_t>(l) * d + c) * N;
            double dt = delta.data()[static_cast<std::size_t>(l) * d + c];
            CMapA arow(A.data() + static_cast<std::size_t>(c) * N, N);
            MapA(dp.a_bar.data() + off, N) = (dt * arow).exp();
            MapA(dp.b_bar_x.data() + off, N) =
                (dt * x.data()[static_cast<std::size_t>(l) * d + c]) * brow;
        }
    }
    bool any = delta.requires_grad() || A.requires_grad() || B.requires_grad() || x.requires_grad();
    if (Tape* tape = Tape::active(); tape && any) {
        dp.a_bar.set_requires_grad();
        dp.b_bar_x.set_requires_grad();
        tape->record([delta = delta, A = A, B = B, x = x, dp, L, d, N]() mutable {
            const double* ga = dp.a_bar.grad();
            const double* gb = dp.b_bar_x.grad();
            for (int l = 0; l < L; ++l) {
                CMapA brow(B.data() + static_cast<std::size_t>(l) * N, N);
                for (int c = 0; c < d; ++c) {
                    std::size_t off = (static_cast<std::size_t>(l) * d + c) * N;
                    std::size_t ld = static_cast<std::size_t>(l) * d + c;
                    double dt = delta.data()[ld];
                    double xv = x.data()[ld];
                    CMapA arow(A.data() + static_cast<std::size_t>(c) * N, N);
                    CMapA gav(ga + off, N);
                    CMapA gbv(gb + off, N);
                    CMapA abar(dp.a_bar.data() + off, N);
                    if (delta.requires_grad())
                        delta.grad()[ld] += (gav * arow * abar).sum() + xv * (gbv * brow).sum();
                    if (A.requires_grad())
                        MapA(A.grad() + static_cast<std::size_t>(c) * N, N) += dt * gav * abar;
                    if (B.requires_grad())
                        MapA(B.grad() + static_cast<std::size_t>(l) * N, N) += (dt * xv) * gbv;
                    if (x.requires_grad()) x.grad()[ld] += dt * (gbv * brow).sum();
                }
            }
        });
    }
    return dp;
}

// h_t = a_bar_t (.) h_{t-1} + b_bar_x_t ;  y_t[d] = <C_t, h_t[d,:]> + d_skip[d]*x_t[d]
// Differentiable end-to-end; the hidden trajectory is kept for the backward
// sweep.
inline Tensor ssm_scan_recurrent(const DiscreteParams& dp, const Tensor& C, const Tensor& d_skip,
                                 const Tensor& x) {
    int L = dp.a_bar.dim(0), d = dp.a_bar.dim(1), N = dp.a_bar.dim(2);
    if (C.dim(0) != L || C.dim(1) != N || x.dim(0) != L || x.dim(1) != d ||
        static_cast<int>(d_skip.numel()) != d)
        throw std::invalid_argument("ssm_scan_recurrent: inconsistent shapes");

    std::size_t slab = static_cast<std::size_t>(d) * N;
    auto h = std::make_shared<std::vector<double>>(static_cast<std::size_t>(L) * slab);
    Tensor y(Shape{L, d});
    for (int l = 0; l < L; ++l) {
        std::size_t off = static_cast<std::size_t>(l) * slab;
        MapA hl(h->data() + off, slab);
        if (l == 0)
            hl = CMapA(dp.b_bar_x.data() + off, slab);
        else
            hl = CMapA(dp.a_bar.data() + off, slab) * CMapA(h->data() + off - slab, slab) +
                 CMapA(dp.b_bar_x.data() + off, slab);
        const double* crow = C.data() + static_cast<std::size_t>(l) * N;
        for (int c = 0; c < d; ++c)
            y.data()[static_cast<std::size_t>(l) * d + c] =
                (CMapA(crow, N) * CMapA(h->data() + off + static_cast<std::size_t>(c) * N, N))
                    .sum() +
                d_skip.data()[c] * x.data()[static_cast<std::size_t>(l) * d + c];
    }
    bool any = dp.a_bar.requires_grad() || dp.b_bar_x.requires_grad() || C.requires_grad() ||
               d_skip.requires_grad() || x.requires_grad();
    detail::record_if_needed(y, any, [dp, C = C, d_skip = d_skip, x = x, y = y, h, L, d, N]() mutable {
        std::size_t slab = static_cast<std::size_t>(d) * N;
        const double* gy = y.grad();
        // gh carries dLoss/dh_t while sweeping t backwards
        std::vector<double> gh(slab, 0.0);
        for (int l = L - 1; l >= 0; --l) {
            std::size_t off = static_cast<std::size_t>(l) * slab;
            const double* crow = C.data() + static_cast<std::size_t>(l) * N;
            for (int c = 0; c < d; ++c) {
                std::size_t ld = static_cast<std::size_t>(l) * d + c;
                double g = gy[ld];
                MapA(gh.data() + static_cast<std::size_t>(c) * N, N) += g * CMapA(crow, N);
                if (C.requires_grad())
                    MapA(C.grad() + static_cast<std::size_t>(l) * N, N) +=
                        g * CMapA(h->data() + off + static_cast<std::size_t>(c) * N, N);
                if (d_skip.requires_grad()) d_skip.grad()[c] += g * x.data()[ld];
                if (x.requires_grad()) x.grad()[ld] += g * d_skip.data()[c];
            }
            if (dp.b_bar_x.requires_grad())
                MapA(dp.b_bar_x.grad() + off, slab) += CMapA(gh.data(), slab);
            if (dp.a_bar.requires_grad()) {
                if (l > 0)
                    MapA(dp.a_bar.grad() + off, slab) +=
                        CMapA(gh.data(), slab) * CMapA(h->data() + off - slab, slab);
                // h_{-1} = 0: no a_bar contribution at l == 0
            }
            MapA(gh.data(), slab) *= CMapA(dp.a_bar.data() + off, slab);
        }
    });
    return y;
}

// Time-invariant kernel K[c][j] = <C, A_bar_c^j * delta*B> for channel c.
inline Tensor lti_kernel(const Tensor& A, const Tensor& B, const Tensor& C, double delta, int len) {
    if (B.rank() != 1 || C.rank() != 1)
        throw std::invalid_argument("lti_kernel: B and C must be time-invariant vectors");
    if (!(delta > 0.0)) throw std::invalid_argument("lti_kernel: delta must be positive");
    int d = A.dim(0), N = A.dim(1);
    if (static_cast<int>(B.numel()) != N || static_cast<int>(C.numel()) != N)
        throw std::invalid_argument("lti_kernel: state size mismatch");
    Tensor kernel(Shape{d, len});
    Eigen::ArrayXd state(N), abar(N);
    CMapA bv(B.data(), N), cv(C.data(), N);
    for (int c = 0; c < d; ++c) {
        abar = (delta * CMapA(A.data() + static_cast<std::size_t>(c) * N, N)).exp();
        state = delta * bv;  // A_bar^0 * B_bar
        for (int j = 0; j < len; ++j) {
            kernel.data()[static_cast<std::size_t>(c) * len + j] = (cv * state).sum();
            state *= abar;
        }
    }
    return kernel;
}

// Convolution view of the time-invariant system (Eq. of the LTI regime):
// y = x (*) K + d_skip (.) x. Reference path only; not differentiable.
inline Tensor ssm_conv_lti(const Tensor& A, const Tensor& B, const Tensor& C, double delta,
                           const Tensor& d_skip, const Tensor& x) {
    int L = x.dim(0), d = x.dim(1);
    Tensor kernel = lti_kernel(A, B, C, delta, L);
    Tensor y(Shape{L, d});
    for (int l = 0; l < L; ++l)
        for (int c = 0; c < d; ++c) {
            double acc = d_skip.data()[c] * x.data()[static_cast<std::size_t>(l) * d + c];
            const double* k = kernel.data() + static_cast<std::size_t>(c) * L;
            for (int j = 0; j <= l; ++j)
                acc += k[j] * x.data()[static_cast<std::size_t>(l - j) * d + c];
            y.data()[static_cast<std::size_t>(l) * d + c] = acc;
        }
    return y;
}

// Input-dependent (selective) per-timestep parameters.
struct SelectiveParams {
    Tensor delta;  // [L, d_inner], strictly positive
    Tensor B;      // [L, n_state]
    Tensor C;      // [L, n_state]
};

inline SelectiveParams selective_parameters(const Tensor& u, const SsmLayerParams& p) {
    SelectiveParams sp;
    sp.delta = softplus(add(matmul(u, p.w_delta), p.delta_bias));
    sp.B = matmul(u, p.w_b);
    sp.C = matmul(u, p.w_c);
    return sp;
}

// Depthwise causal conv along time; kernel column k_conv-1 multiplies the
// current step, earlier taps reach back with zero padding.
inline Tensor causal_depthwise_conv(const Tensor& u, const Tensor& kernel) {
    int L = u.dim(0), d = u.dim(1), k = kernel.dim(1);
    if (kernel.dim(0) != d) throw std::invalid_argument("causal_depthwise_conv: channel mismatch");
    Tensor y(Shape{L, d});
    for (int l = 0; l < L; ++l)
        for (int c = 0; c < d; ++c) {
            double acc = 0.0;
            for (int j = 0; j < k; ++j) {
                int src = l - (k - 1) + j;
                if (src >= 0)
                    acc += kernel.data()[static_cast<std::size_t>(c) * k + j] *
                           u.data()[static_cast<std::size_t>(src) * d + c];
            }
            y.data()[static_cast<std::size_t>(l) * d + c] = acc;
        }
    detail::record_if_needed(y, u.requires_grad() || kernel.requires_grad(),
                             [u = u, kernel = kernel, y = y, L, d, k]() mutable {
        const double* gy = y.grad();
        for (int l = 0; l < L; ++l)
            for (int c = 0; c < d; ++c) {
                double g = gy[static_cast<std::size_t>(l) * d + c];
                if (g == 0.0) continue;
                for (int j = 0; j < k; ++j) {
                    int src = l - (k - 1) + j;
                    if (src < 0) continue;
                    if (u.requires_grad())
                        u.grad()[static_cast<std::size_t>(src) * d + c] +=
                            g * kernel.data()[static_cast<std::size_t>(c) * k + j];
                    if (kernel.requires_grad())
                        kernel.grad()[static_cast<std::size_t>(c) * k + j] +=
                            g * u.data()[static_cast<std::size_t>(src) * d + c];
                }
            }
    });
    return y;
}

// Pre-norm residual selective block:
//   u, g = split(w_in * rms_norm(x)); u = silu(conv(u));
//   y = scan(discretize(selective(u)), C, D, u); out = x + w_out * (y (.) silu(g))
inline Tensor mamba_block_forward(const Tensor& x, const SsmLayerParams& p) {
    if (x.dim(1) != p.d_model) throw std::invalid_argument("mamba_block_forward: d_model mismatch");
    Tensor xn = rms_norm(x, p.rms_gain);
    Tensor proj = matmul(xn, p.w_in);
    Tensor u = slice_cols(proj, 0, p.d_inner);
    Tensor gate = slice_cols(proj, p.d_inner, p.d_inner);
    u = silu(causal_depthwise_conv(u, p.conv_kernel));
    SelectiveParams sp = selective_parameters(u, p);
    Tensor A = scale(exp(p.a_log), -1.0);
    DiscreteParams dp = discretize(sp.delta, A, sp.B, u);
    Tensor y = ssm_scan_recurrent(dp, sp.C, p.d_skip, u);
    return add(x, matmul(mul(y, silu(gate)), p.w_out));
}

}  // namespace seqlab
