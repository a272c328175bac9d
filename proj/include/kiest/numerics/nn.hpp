#pragma once

// Named parameters and the transformer building blocks shared by the
// generation model, the selectors and the coherence classifier.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "kiest/numerics/tensor.hpp"
#include "kiest/random.hpp"

namespace kiest {

struct NamedParameter {
    std::string name;
    Tensor tensor;
};

// Owns the name -> tensor registry of one model. Names are unique.
class ParameterStore {
public:
    Tensor add(const std::string& name, Tensor t) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        if (!t.requires_grad()) t = Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
        index_.emplace(name, params_.size());
        params_.push_back({name, t});
        return t;
    }

    // Uniform(-1/sqrt(fan), 1/sqrt(fan)) initialized parameter.
    Tensor add_uniform(const std::string& name, Shape shape, std::size_t fan, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(std::max<std::size_t>(fan, 1)));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<double> data(numel(shape));
        for (auto& v : data) v = dist(rng);
        return add(name, Tensor::from(std::move(shape), std::move(data), true));
    }

    Tensor add_constant(const std::string& name, Shape shape, double value) {
        return add(name, Tensor::full(std::move(shape), value, true));
    }

    const std::vector<NamedParameter>& params() const { return params_; }

    std::vector<Tensor> tensors() const {
        std::vector<Tensor> out;
        out.reserve(params_.size());
        for (const auto& p : params_) out.push_back(p.tensor);
        return out;
    }

    const Tensor* find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : &params_[it->second].tensor;
    }

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p.tensor.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p.tensor.zero_grad();
    }

private:
    std::vector<NamedParameter> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct Linear {
    Tensor weight;  // [in x out]
    Tensor bias;    // [1 x out], undefined when disabled

    Linear() = default;
    Linear(ParameterStore& ps, const std::string& name, std::size_t in, std::size_t out, Rng& rng,
           bool use_bias = true) {
        weight = ps.add_uniform(name + ".w", {in, out}, in, rng);
        if (use_bias) bias = ps.add_constant(name + ".b", {1, out}, 0.0);
    }

    Tensor operator()(const Tensor& x) const {
        Tensor y = matmul(x, weight);
        return bias.defined() ? add_row(y, bias) : y;
    }
};

struct LayerNorm {
    Tensor gain;
    Tensor bias;

    LayerNorm() = default;
    LayerNorm(ParameterStore& ps, const std::string& name, std::size_t d) {
        gain = ps.add_constant(name + ".g", {1, d}, 1.0);
        bias = ps.add_constant(name + ".b", {1, d}, 0.0);
    }

    Tensor operator()(const Tensor& x) const { return layer_norm(x, gain, bias); }
};

inline constexpr double kMaskedLogit = -1e30;

// Scaled dot-product multi-head attention with input and output projections.
struct MultiHeadAttention {
    Linear wq, wk, wv, wo;
    std::size_t d_model = 0;
    std::size_t heads = 1;

    MultiHeadAttention() = default;
    MultiHeadAttention(ParameterStore& ps, const std::string& name, std::size_t d, std::size_t n_heads, Rng& rng)
        : d_model(d), heads(n_heads) {
        if (n_heads == 0 || d % n_heads != 0) {
            throw ConfigError("attention: d_model " + std::to_string(d) + " is not divisible by heads " +
                              std::to_string(n_heads));
        }
        wq = Linear(ps, name + ".wq", d, d, rng);
        // No key bias: it shifts every score of a query equally and cancels in softmax.
        wk = Linear(ps, name + ".wk", d, d, rng, false);
        wv = Linear(ps, name + ".wv", d, d, rng);
        wo = Linear(ps, name + ".wo", d, d, rng);
    }

    // With causal=true, query row i sees key rows 0..i only. When `weights` is
    // given it receives the per-head attention matrices.
    Tensor operator()(const Tensor& q_in, const Tensor& kv_in, bool causal = false,
                      std::vector<Tensor>* weights = nullptr) const {
        if (q_in.cols() != d_model || kv_in.cols() != d_model) {
            throw DimensionError("attention: expected width " + std::to_string(d_model) + ", got " +
                                 shape_str(q_in.shape()) + " and " + shape_str(kv_in.shape()));
        }
        const Tensor q = wq(q_in), k = wk(kv_in), v = wv(kv_in);
        const std::size_t dh = d_model / heads;
        const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
        const std::size_t tq = q_in.rows(), tk = kv_in.rows();
        std::vector<double> mask;
        if (causal) {
            mask.assign(tq * tk, 0.0);
            for (std::size_t i = 0; i < tq; ++i)
                for (std::size_t j = i + 1; j < tk; ++j) mask[i * tk + j] = kMaskedLogit;
        }
        std::vector<Tensor> outs;
        outs.reserve(heads);
        for (std::size_t h = 0; h < heads; ++h) {
            Tensor qh = heads == 1 ? q : slice_cols(q, h * dh, dh);
            Tensor kh = heads == 1 ? k : slice_cols(k, h * dh, dh);
            Tensor vh = heads == 1 ? v : slice_cols(v, h * dh, dh);
            Tensor scores = scale(matmul(qh, transpose(kh)), scale_factor);
            if (causal) scores = add_constant(scores, mask);
            Tensor w = softmax(scores, 1);
            if (weights) weights->push_back(w);
            outs.push_back(matmul(w, vh));
        }
        Tensor merged = heads == 1 ? outs[0] : concat_cols(outs);
        return wo(merged);
    }
};

struct FeedForward {
    Linear in, out;

    FeedForward() = default;
    FeedForward(ParameterStore& ps, const std::string& name, std::size_t d, std::size_t d_ff, Rng& rng)
        : in(ps, name + ".in", d, d_ff, rng), out(ps, name + ".out", d_ff, d, rng) {}

    Tensor operator()(const Tensor& x) const { return out(relu(in(x))); }
};

// Post-norm encoder layer: LN(SA(x) + x), then LN(FFN(h) + h).
struct EncoderLayer {
    MultiHeadAttention self_attn;
    LayerNorm ln_attn;
    FeedForward ffn;
    LayerNorm ln_ffn;

    EncoderLayer() = default;
    EncoderLayer(ParameterStore& ps, const std::string& name, std::size_t d, std::size_t heads, std::size_t d_ff,
                 Rng& rng)
        : self_attn(ps, name + ".sa", d, heads, rng),
          ln_attn(ps, name + ".ln_sa", d),
          ffn(ps, name + ".ffn", d, d_ff, rng),
          ln_ffn(ps, name + ".ln_ffn", d) {}

    Tensor operator()(const Tensor& x) const {
        Tensor h = ln_attn(add(self_attn(x, x), x));
        return ln_ffn(add(ffn(h), h));
    }
};

// Token embedding plus learned absolute positions.
inline Tensor embed_with_positions(const Tensor& table, const Tensor& positions, std::span<const std::size_t> ids) {
    if (ids.size() > positions.rows()) {
        throw DimensionError("sequence of length " + std::to_string(ids.size()) + " exceeds " +
                             std::to_string(positions.rows()) + " positions");
    }
    std::vector<std::size_t> pos(ids.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = i;
    return add(gather_rows(table, ids), gather_rows(positions, pos));
}

}  // namespace kiest
