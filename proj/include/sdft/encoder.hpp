#pragma once

// Miniature BERT-shaped classifier: token + position embeddings, post-LN
// transformer layers, first-token pooling and a linear softmax head.

#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "sdft/autodiff.hpp"
#include "sdft/data.hpp"
#include "sdft/params.hpp"

namespace sdft {

struct ModelConfig {
    std::size_t vocab_size = 2000;
    std::size_t max_len = 64;
    std::size_t dim = 32;
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t ffn_dim = 64;
    std::size_t n_classes = 4;
    double dropout_p = 0.1;

    void validate() const {
        if (vocab_size <= static_cast<std::size_t>(kReservedTokens)) throw ConfigError("vocab_size must exceed the 4 reserved tokens");
        if (max_len < 2) throw ConfigError("max_len must be >= 2");
        if (dim == 0 || n_heads == 0 || dim % n_heads != 0) {
            throw ConfigError("dim (" + std::to_string(dim) + ") must be a positive multiple of n_heads (" +
                              std::to_string(n_heads) + ")");
        }
        if (n_layers == 0) throw ConfigError("n_layers must be >= 1");
        if (ffn_dim == 0) throw ConfigError("ffn_dim must be >= 1");
        if (n_classes < 1) throw ConfigError("n_classes must be >= 1");
        if (!(dropout_p >= 0.0 && dropout_p < 1.0)) throw ConfigError("dropout_p must lie in [0, 1)");
    }

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

using Rng = std::mt19937_64;

inline std::string layer_name(std::size_t l, const char* leaf) { return "layer" + std::to_string(l) + "." + leaf; }

/// Deterministic initialization: Glorot-uniform encoder matrices,
/// uniform(+-0.1) embeddings, zero biases and layer-norm offsets, unit
/// layer-norm gains. The fresh classifier head starts small (std 0.02) so the
/// initial prediction is close to uniform over the classes.
template <typename Real>
ParameterSet<Real> init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    ParameterSet<Real> ps;
    auto uniform = [&](std::size_t r, std::size_t c, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        Tensor<Real> t = Tensor<Real>::matrix(r, c);
        for (auto& v : t.storage()) v = static_cast<Real>(u(rng));
        return t;
    };
    auto glorot = [&](std::size_t fan_in, std::size_t fan_out) {
        return uniform(fan_in, fan_out, std::sqrt(6.0 / double(fan_in + fan_out)));
    };
    auto zeros = [](std::size_t c) { return Tensor<Real>::matrix(1, c, Real(0)); };
    auto ones = [](std::size_t c) { return Tensor<Real>::matrix(1, c, Real(1)); };
    const auto enc = ParamGroup::encoder;
    const std::size_t d = cfg.dim;

    ps.add("embed.token", uniform(cfg.vocab_size, d, 0.1), enc, true);
    ps.add("embed.position", uniform(cfg.max_len, d, 0.1), enc, true);
    ps.add("embed.ln.gain", ones(d), enc, false);
    ps.add("embed.ln.bias", zeros(d), enc, false);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (const char* m : {"attn.q", "attn.k", "attn.v", "attn.o"}) {
            ps.add(layer_name(l, m) + ".weight", glorot(d, d), enc, true);
            // A key bias shifts every score of a query by the same amount,
            // which the softmax cancels, so it is left out.
            if (std::string(m) != "attn.k") ps.add(layer_name(l, m) + ".bias", zeros(d), enc, false);
        }
        ps.add(layer_name(l, "ln1.gain"), ones(d), enc, false);
        ps.add(layer_name(l, "ln1.bias"), zeros(d), enc, false);
        ps.add(layer_name(l, "ffn.in.weight"), glorot(d, cfg.ffn_dim), enc, true);
        ps.add(layer_name(l, "ffn.in.bias"), zeros(cfg.ffn_dim), enc, false);
        ps.add(layer_name(l, "ffn.out.weight"), glorot(cfg.ffn_dim, d), enc, true);
        ps.add(layer_name(l, "ffn.out.bias"), zeros(d), enc, false);
        ps.add(layer_name(l, "ln2.gain"), ones(d), enc, false);
        ps.add(layer_name(l, "ln2.bias"), zeros(d), enc, false);
    }
    ps.add("head.weight", uniform(cfg.n_classes, d, 0.02 * std::sqrt(3.0)), ParamGroup::head, true);
    return ps;
}

/// Dropout is applied only when `train_mode` is set and `rng` is non-null.
/// With `track_params` unset the parameters enter the tape as constants.
struct ForwardOptions {
    bool train_mode = false;
    Rng* rng = nullptr;
    bool track_params = true;
};

namespace detail {

template <typename Real>
struct BoundParams {
    Tape<Real>& tape;
    const ParameterSet<Real>& params;
    bool track;
    std::map<std::string, Var<Real>> cache;

    Var<Real> operator()(const std::string& name) {
        auto it = cache.find(name);
        if (it != cache.end()) return it->second;
        const Tensor<Real>& t = params.tensor(name);
        Var<Real> v = track ? tape.parameter(name, t) : tape.constant_ref(t);
        cache.emplace(name, v);
        return v;
    }
};

template <typename Real>
Var<Real> maybe_dropout(Var<Real> x, const ModelConfig& cfg, const ForwardOptions& opt) {
    if (!opt.train_mode || opt.rng == nullptr || cfg.dropout_p <= 0.0) return x;
    return dropout(x, static_cast<Real>(cfg.dropout_p), *opt.rng);
}

template <typename Real>
Var<Real> linear(BoundParams<Real>& p, Var<Real> x, const std::string& prefix) {
    return add_row(matmul(x, p(prefix + ".weight")), p(prefix + ".bias"));
}

/// One post-LN encoder layer. When `cls_only` is set, only the first
/// position's output is computed (keys and values still span the sequence).
template <typename Real>
Var<Real> encoder_layer(BoundParams<Real>& p, const ModelConfig& cfg, std::size_t l, Var<Real> x,
                        const std::optional<Var<Real>>& key_mask, bool cls_only, const ForwardOptions& opt) {
    Var<Real> xq = cls_only ? gather_rows(x, {0}) : x;
    Var<Real> q = linear(p, xq, layer_name(l, "attn.q"));
    Var<Real> k = matmul(x, p(layer_name(l, "attn.k.weight")));
    Var<Real> v = linear(p, x, layer_name(l, "attn.v"));
    const std::size_t dh = cfg.dim / cfg.n_heads;
    const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
    std::vector<Var<Real>> heads;
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        Var<Real> qh = cfg.n_heads == 1 ? q : slice_cols(q, h * dh, dh);
        Var<Real> kh = cfg.n_heads == 1 ? k : slice_cols(k, h * dh, dh);
        Var<Real> vh = cfg.n_heads == 1 ? v : slice_cols(v, h * dh, dh);
        Var<Real> scores = scale(matmul_bt(qh, kh), inv_sqrt);
        if (key_mask) scores = add_row(scores, *key_mask);
        Var<Real> probs = maybe_dropout(softmax_rows(scores), cfg, opt);
        heads.push_back(matmul(probs, vh));
    }
    Var<Real> ctx = heads.size() == 1 ? heads[0] : concat_cols(heads);
    Var<Real> attn = maybe_dropout(linear(p, ctx, layer_name(l, "attn.o")), cfg, opt);
    Var<Real> h1 = layer_norm(add(xq, attn), p(layer_name(l, "ln1.gain")), p(layer_name(l, "ln1.bias")));
    Var<Real> f = gelu(linear(p, h1, layer_name(l, "ffn.in")));
    f = maybe_dropout(linear(p, f, layer_name(l, "ffn.out")), cfg, opt);
    return layer_norm(add(h1, f), p(layer_name(l, "ln2.gain")), p(layer_name(l, "ln2.bias")));
}

inline void check_batch(const ModelConfig& cfg, const Batch& batch) {
    if (batch.size == 0) throw InputError("empty batch");
    if (batch.seq_len > cfg.max_len) {
        throw InputError("sequence length " + std::to_string(batch.seq_len) + " exceeds max_len " +
                         std::to_string(cfg.max_len));
    }
    if (batch.ids.size() != batch.size * batch.seq_len || batch.mask.size() != batch.ids.size()) {
        throw InputError("batch id/mask matrices do not match its declared shape");
    }
    for (int id : batch.ids) {
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size) {
            throw InputError("token id " + std::to_string(id) + " outside vocabulary of size " +
                             std::to_string(cfg.vocab_size));
        }
    }
    for (std::size_t r = 0; r < batch.size; ++r) {
        if (batch.seq_len == 0 || !batch.real(r, 0)) throw InputError("batch row " + std::to_string(r) + " has no leading token");
    }
}

}  // namespace detail

/// Pooled first-token representation h, shape B x dim.
template <typename Real>
Var<Real> encode(const ModelConfig& cfg, const ParameterSet<Real>& params, const Batch& batch, Tape<Real>& tape,
                 const ForwardOptions& opt = {}) {
    detail::check_batch(cfg, batch);
    detail::BoundParams<Real> p{tape, params, opt.track_params, {}};
    Var<Real> tok = p("embed.token");
    Var<Real> pos = p("embed.position");
    std::vector<Var<Real>> pooled;
    pooled.reserve(batch.size);
    for (std::size_t r = 0; r < batch.size; ++r) {
        // trailing padding is dropped; interior padding is masked out of the keys
        std::size_t n = 0;
        for (std::size_t i = 0; i < batch.seq_len; ++i)
            if (batch.real(r, i)) n = i + 1;
        std::vector<std::size_t> ids(n), positions(n);
        std::optional<Var<Real>> key_mask;
        bool interior_pad = false;
        for (std::size_t i = 0; i < n; ++i) {
            ids[i] = static_cast<std::size_t>(batch.id(r, i));
            positions[i] = i;
            interior_pad = interior_pad || !batch.real(r, i);
        }
        if (interior_pad) {
            Tensor<Real> m = Tensor<Real>::matrix(1, n);
            for (std::size_t i = 0; i < n; ++i) m[i] = batch.real(r, i) ? Real(0) : Real(-1e30);
            key_mask = tape.constant(std::move(m));
        }
        Var<Real> x = add(gather_rows(tok, ids), gather_rows(pos, positions));
        x = layer_norm(x, p("embed.ln.gain"), p("embed.ln.bias"));
        x = detail::maybe_dropout(x, cfg, opt);
        for (std::size_t l = 0; l < cfg.n_layers; ++l) {
            x = detail::encoder_layer(p, cfg, l, x, key_mask, l + 1 == cfg.n_layers, opt);
        }
        pooled.push_back(x);  // already 1 x dim after the first-token-only final layer
    }
    return stack_rows(pooled);
}

/// Pre-softmax class scores W h, shape B x n_classes.
template <typename Real>
Var<Real> classify(const ModelConfig& cfg, const ParameterSet<Real>& params, const Batch& batch, Tape<Real>& tape,
                   const ForwardOptions& opt = {}) {
    Var<Real> h = encode(cfg, params, batch, tape, opt);
    h = detail::maybe_dropout(h, cfg, opt);
    Var<Real> w = opt.track_params ? tape.parameter("head.weight", params.tensor("head.weight"))
                                   : tape.constant_ref(params.tensor("head.weight"));
    return matmul_bt(h, w);
}

/// Eval-mode logits without gradient bookkeeping.
template <typename Real>
Tensor<Real> logits(const ModelConfig& cfg, const ParameterSet<Real>& params, const Batch& batch) {
    Tape<Real> tape;
    ForwardOptions opt;
    opt.track_params = false;
    return classify(cfg, params, batch, tape, opt).value();
}

template <typename Real>
Tensor<Real> predict_proba(const ModelConfig& cfg, const ParameterSet<Real>& params, const Batch& batch) {
    return softmax(logits(cfg, params, batch));
}

}  // namespace sdft
