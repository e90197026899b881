#pragma once

#include <memory>
#include <string>
#include <vector>

#include "seqlab/attn.hpp"
#include "seqlab/ops.hpp"
#include "seqlab/rng.hpp"
#include "seqlab/ssm.hpp"
#include "seqlab/tensor.hpp"

namespace seqlab {

enum class Family { Ssm, Attn };

inline const char* family_name(Family f) { return f == Family::Ssm ? "ssm" : "attn"; }

inline Family family_from(const std::string& s) {
    if (s == "ssm") return Family::Ssm;
    if (s == "attn") return Family::Attn;
    throw std::invalid_argument("unknown model family: " + s);
}

struct ModelConfig {
    Family family = Family::Attn;
    int vocab = 0;
    int d_model = 128;
    int n_layers = 2;
    int n_heads = 4;       // attn only
    double rope_base = 10000.0;
    int n_state = 16;      // ssm only
    int expand = 2;        // ssm only
    int k_conv = 4;        // ssm only
    uint64_t seed = 0;
};

// Shared forward contract for both families; the harness only sees this.
class Model {
public:
    virtual ~Model() = default;
    // Logits for every position, [L, vocab].
    virtual Tensor forward(const std::vector<int>& ids) const = 0;
    // Logits at the final position only, [1, vocab]. Evaluation fast path;
    // must not be called under an active tape.
    virtual Tensor forward_last(const std::vector<int>& ids) const = 0;
    virtual std::vector<Tensor> parameters() const = 0;
    virtual const ModelConfig& config() const = 0;
};

inline std::size_t parameter_count(const Model& m) {
    std::size_t n = 0;
    for (const Tensor& p : m.parameters()) n += p.numel();
    return n;
}

namespace detail {

inline Tensor init_gauss(Shape shape, double std, Rng& rng) {
    Tensor t(std::move(shape), true);
    for (double& v : t.values()) v = std * rng.next_normal();
    return t;
}

inline Tensor unembed_last_row(const Tensor& x, const Tensor& w_unembed) {
    if (Tape::active()) throw std::logic_error("forward_last is an eval-only path");
    int d = x.dim(1);
    Tensor last(Shape{1, d});
    std::copy_n(x.data() + static_cast<std::size_t>(x.dim(0) - 1) * d, d, last.data());
    return matmul(last, w_unembed);
}

}  // namespace detail

class SsmModel final : public Model {
public:
    explicit SsmModel(ModelConfig cfg) : cfg_(cfg) {
        Rng rng(Rng::combine({cfg.seed, 0x55u}));
        double s = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
        embedding_ = detail::init_gauss({cfg.vocab, cfg.d_model}, s, rng);
        blocks_.reserve(static_cast<std::size_t>(cfg.n_layers));
        for (int i = 0; i < cfg.n_layers; ++i)
            blocks_.push_back(SsmLayerParams::init(cfg.d_model, cfg.n_state, cfg.expand, cfg.k_conv, rng));
        final_gain_ = Tensor::full({cfg.d_model}, 1.0).set_requires_grad();
        unembed_ = detail::init_gauss({cfg.d_model, cfg.vocab}, s, rng);
    }

    Tensor forward(const std::vector<int>& ids) const override {
        return matmul(trunk(ids), unembed_);
    }

    Tensor forward_last(const std::vector<int>& ids) const override {
        return detail::unembed_last_row(trunk(ids), unembed_);
    }

    std::vector<Tensor> parameters() const override {
        std::vector<Tensor> ps{embedding_};
        for (const auto& b : blocks_) {
            auto bp = b.parameters();
            ps.insert(ps.end(), bp.begin(), bp.end());
        }
        ps.push_back(final_gain_);
        ps.push_back(unembed_);
        return ps;
    }

    const ModelConfig& config() const override { return cfg_; }
    const std::vector<SsmLayerParams>& blocks() const { return blocks_; }

private:
    Tensor trunk(const std::vector<int>& ids) const {
        Tensor x = embedding_lookup(embedding_, ids);
        for (const auto& b : blocks_) x = mamba_block_forward(x, b);
        return rms_norm(x, final_gain_);
    }

    ModelConfig cfg_;
    Tensor embedding_;
    std::vector<SsmLayerParams> blocks_;
    Tensor final_gain_;
    Tensor unembed_;
};

class AttnModel final : public Model {
public:
    explicit AttnModel(ModelConfig cfg) : cfg_(cfg) {
        Rng rng(Rng::combine({cfg.seed, 0xAAu}));
        double s = 1.0 / std::sqrt(static_cast<double>(cfg.d_model));
        embedding_ = detail::init_gauss({cfg.vocab, cfg.d_model}, s, rng);
        blocks_.reserve(static_cast<std::size_t>(cfg.n_layers));
        for (int i = 0; i < cfg.n_layers; ++i)
            blocks_.push_back(AttnLayerParams::init(cfg.d_model, cfg.n_heads, cfg.rope_base, rng));
        final_gain_ = Tensor::full({cfg.d_model}, 1.0).set_requires_grad();
        final_bias_ = Tensor({cfg.d_model}, true);
        unembed_ = detail::init_gauss({cfg.d_model, cfg.vocab}, s, rng);
    }

    Tensor forward(const std::vector<int>& ids) const override {
        return matmul(trunk(ids), unembed_);
    }

    Tensor forward_last(const std::vector<int>& ids) const override {
        return detail::unembed_last_row(trunk(ids), unembed_);
    }

    std::vector<Tensor> parameters() const override {
        std::vector<Tensor> ps{embedding_};
        for (const auto& b : blocks_) {
            auto bp = b.parameters();
            ps.insert(ps.end(), bp.begin(), bp.end());
        }
        ps.push_back(final_gain_);
        ps.push_back(final_bias_);
        ps.push_back(unembed_);
        return ps;
    }

    const ModelConfig& config() const override { return cfg_; }
    const std::vector<AttnLayerParams>& blocks() const { return blocks_; }

private:
    Tensor trunk(const std::vector<int>& ids) const {
        Tensor x = embedding_lookup(embedding_, ids);
        for (const auto& b : blocks_) x = attn_block_forward(x, b);
        return layer_norm(x, final_gain_, final_bias_);
    }

    ModelConfig cfg_;
    Tensor embedding_;
    std::vector<AttnLayerParams> blocks_;
    Tensor final_gain_, final_bias_;
    Tensor unembed_;
};

inline std::unique_ptr<Model> make_model(const ModelConfig& cfg) {
    if (cfg.vocab <= 0) throw std::invalid_argument("make_model: vocab must be positive");
    if (cfg.family == Family::Ssm) return std::make_unique<SsmModel>(cfg);
    return std::make_unique<AttnModel>(cfg);
}

}  // namespace seqlab
