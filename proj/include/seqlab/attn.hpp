#pragma once

#include <cmath>
#include <vector>

#include "seqlab/ops.hpp"
#include "seqlab/rng.hpp"
#include "seqlab/tensor.hpp"

namespace seqlab {

// Rotary position encoding over [L, n_heads*head_dim]: within each head,
// dimension pair (2i, 2i+1) at position t rotates by t * base^(-2i/head_dim).
inline Tensor rope_apply(const Tensor& x, int n_heads, double base) {
    int L = x.dim(0), D = x.dim(1);
    if (D % n_heads != 0) throw std::invalid_argument("rope_apply: D not divisible by n_heads");
    int hd = D / n_heads;
    if (hd % 2 != 0) throw std::invalid_argument("rope_apply: head_dim must be even");
    int pairs = hd / 2;
    std::vector<double> freq(pairs);
    for (int i = 0; i < pairs; ++i)
        freq[i] = std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(hd));
    Tensor y(x.shape());
    for (int t = 0; t < L; ++t)
        for (int h = 0; h < n_heads; ++h) {
            std::size_t off = static_cast<std::size_t>(t) * D + static_cast<std::size_t>(h) * hd;
            for (int i = 0; i < pairs; ++i) {
                double th = static_cast<double>(t) * freq[i];
                double c = std::cos(th), s = std::sin(th);
                double a = x.data()[off + 2 * i], b = x.data()[off + 2 * i + 1];
                y.data()[off + 2 * i] = c * a - s * b;
                y.data()[off + 2 * i + 1] = s * a + c * b;
            }
        }
    detail::record_if_needed(y, x.requires_grad(), [x = x, y = y, freq, L, D, n_heads, hd]() mutable {
        int pairs = hd / 2;
        for (int t = 0; t < L; ++t)
            for (int h = 0; h < n_heads; ++h) {
                std::size_t off = static_cast<std::size_t>(t) * D + static_cast<std::size_t>(h) * hd;
                for (int i = 0; i < pairs; ++i) {
                    double th = static_cast<double>(t) * freq[i];
                    double c = std::cos(th), s = std::sin(th);
                    double ga = y.grad()[off + 2 * i], gb = y.grad()[off + 2 * i + 1];
                    x.grad()[off + 2 * i] += c * ga + s * gb;
                    x.grad()[off + 2 * i + 1] += -s * ga + c * gb;
                }
            }
    });
    return y;
}

// Row i is a softmax over columns 0..i; everything above the diagonal is
// exactly zero.
inline Tensor causal_softmax(const Tensor& scores) {
    if (scores.rank() != 2 || scores.dim(0) != scores.dim(1))
        throw std::invalid_argument("causal_softmax: scores must be square");
    int L = scores.dim(0);
    Tensor y(scores.shape());
    for (int i = 0; i < L; ++i) {
        std::size_t off = static_cast<std::size_t>(i) * L;
        CMapA x(scores.data() + off, i + 1);
        MapA p(y.data() + off, i + 1);
        p = (x - x.maxCoeff()).exp();
        p /= p.sum();
        // trailing entries stay zero
    }
    detail::record_if_needed(y, scores.requires_grad(), [scores = scores, y = y, L]() mutable {
        for (int i = 0; i < L; ++i) {
            std::size_t off = static_cast<std::size_t>(i) * L;
            CMapA p(y.data() + off, i + 1);
            CMapA g(y.grad() + off, i + 1);
            double dot = (g * p).sum();
            MapA(scores.grad() + off, i + 1) += (g - dot) * p;
        }
    });
    return y;
}

struct AttnLayerParams {
    int d_model = 0;
    int n_heads = 0;
    int head_dim = 0;
    double rope_base = 10000.0;

    Tensor ln1_gain, ln1_bias;  // [d_model]
    Tensor w_q, w_k, w_v, w_o;  // [d_model, d_model], no biases
    Tensor ln2_gain, ln2_bias;  // [d_model]
    Tensor mlp_in;              // [d_model, 4*d_model]
    Tensor mlp_out;             // [4*d_model, d_model]

    static AttnLayerParams init(int d_model, int n_heads, double rope_base, Rng& rng) {
        if (d_model % n_heads != 0)
            throw std::invalid_argument("attn: d_model must be divisible by n_heads");
        AttnLayerParams p;
        p.d_model = d_model;
        p.n_heads = n_heads;
        p.head_dim = d_model / n_heads;
        p.rope_base = rope_base;
        auto gauss = [&rng](Shape shape, double std) {
            Tensor t(std::move(shape), true);
            for (double& v : t.values()) v = std * rng.next_normal();
            return t;
        };
        double s = 1.0 / std::sqrt(static_cast<double>(d_model));
        p.ln1_gain = Tensor::full({d_model}, 1.0).set_requires_grad();
        p.ln1_bias = Tensor({d_model}, true);
        p.w_q = gauss({d_model, d_model}, s);
        p.w_k = gauss({d_model, d_model}, s);
        p.w_v = gauss({d_model, d_model}, s);
        p.w_o = gauss({d_model, d_model}, s);
        p.ln2_gain = Tensor::full({d_model}, 1.0).set_requires_grad();
        p.ln2_bias = Tensor({d_model}, true);
        p.mlp_in = gauss({d_model, 4 * d_model}, s);
        p.mlp_out = gauss({4 * d_model, d_model}, 1.0 / std::sqrt(4.0 * d_model));
        return p;
    }

    std::vector<Tensor> parameters() const {
        return {ln1_gain, ln1_bias, w_q, w_k, w_v, w_o, ln2_gain, ln2_bias, mlp_in, mlp_out};
    }
};

// Pre-norm attention sublayer with residual: x + W_o * attend(rope(q), rope(k), v).
inline Tensor causal_attention(const Tensor& x, const AttnLayerParams& p) {
    if (x.dim(1) != p.d_model) throw std::invalid_argument("causal_attention: d_model mismatch");
    Tensor xn = layer_norm(x, p.ln1_gain, p.ln1_bias);
    Tensor q = rope_apply(matmul(xn, p.w_q), p.n_heads, p.rope_base);
    Tensor k = rope_apply(matmul(xn, p.w_k), p.n_heads, p.rope_base);
    Tensor v = matmul(xn, p.w_v);
    double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(p.head_dim));
    std::vector<Tensor> heads;
    heads.reserve(static_cast<std::size_t>(p.n_heads));
    for (int h = 0; h < p.n_heads; ++h) {
        Tensor qh = slice_cols(q, h * p.head_dim, p.head_dim);
        Tensor kh = slice_cols(k, h * p.head_dim, p.head_dim);
        Tensor vh = slice_cols(v, h * p.head_dim, p.head_dim);
        Tensor att = causal_softmax(scale(matmul_nt(qh, kh), inv_sqrt));
        heads.push_back(matmul(att, vh));
    }
    return add(x, matmul(concat_cols(heads), p.w_o));
}

// Attention sublayer followed by a pre-norm silu MLP sublayer.
inline Tensor attn_block_forward(const Tensor& x, const AttnLayerParams& p) {
    Tensor x1 = causal_attention(x, p);
    Tensor x1n = layer_norm(x1, p.ln2_gain, p.ln2_bias);
    return add(x1, matmul(silu(matmul(x1n, p.mlp_in)), p.mlp_out));
}

}  // namespace seqlab
