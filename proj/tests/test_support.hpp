#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sdft/sdft.hpp"

namespace sdft::testing {

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> n(0.0, scale);
    Tensor<double> t(std::move(shape));
    for (auto& v : t.storage()) v = n(rng);
    return t;
}

/// Small two-tensor set; every draw has the same names and shapes.
inline ParameterSet<double> random_set(std::mt19937_64& rng, double scale = 1.0) {
    ParameterSet<double> s;
    s.add("a.weight", random_tensor({3, 4}, rng, scale), ParamGroup::encoder, true);
    s.add("a.bias", random_tensor({1, 4}, rng, scale), ParamGroup::encoder, false);
    s.add("head.weight", random_tensor({2, 4}, rng, scale), ParamGroup::head, true);
    return s;
}

/// Tiny encoder config used by most model-level tests.
inline ModelConfig tiny_model(std::size_t vocab = 50) {
    ModelConfig m;
    m.vocab_size = vocab;
    m.max_len = 16;
    m.dim = 8;
    m.n_layers = 1;
    m.n_heads = 2;
    m.ffn_dim = 16;
    m.n_classes = 3;
    m.dropout_p = 0.1;
    return m;
}

inline SyntheticSpec tiny_spec(std::size_t n_train = 48, std::size_t n_test = 30) {
    SyntheticSpec s;
    s.n_classes = 3;
    s.vocab_span = 60;
    s.topic_words = 8;
    s.min_tokens = 3;
    s.max_tokens = 10;
    s.signal = 0.5;
    s.label_noise = 0.0;
    s.n_train = n_train;
    s.n_test = n_test;
    return s;
}

inline PreparedData tiny_data(const ModelConfig& m, const SyntheticSpec& spec, std::uint64_t seed = 3) {
    RawData raw;
    auto d = make_synthetic(spec, seed);
    raw.train = d.train;
    raw.test = d.test;
    return prepare_data(raw, m);
}

inline TrainConfig tiny_train(std::size_t epochs = 2) {
    TrainConfig t;
    t.epochs = epochs;
    t.micro_batch = 4;
    t.accum_steps = 2;
    t.eval_batch = 16;
    return t;
}

/// Random batch of valid rows: CLS first, trailing padding.
inline Batch random_batch(const ModelConfig& m, std::size_t rows, std::size_t len, std::mt19937_64& rng,
                          std::size_t n_classes = 3) {
    EncodedSplit split;
    split.n_classes = n_classes;
    split.max_len = len;
    std::uniform_int_distribution<int> tok(kReservedTokens, static_cast<int>(m.vocab_size) - 1);
    std::uniform_int_distribution<std::size_t> lpick(2, len);
    std::uniform_int_distribution<int> lab(0, static_cast<int>(n_classes) - 1);
    for (std::size_t r = 0; r < rows; ++r) {
        EncodedExample e;
        e.length = lpick(rng);
        e.ids.assign(len, kPad);
        e.ids[0] = kCls;
        for (std::size_t i = 1; i < e.length; ++i) e.ids[i] = tok(rng);
        e.label = lab(rng);
        split.examples.push_back(e);
    }
    return make_batch(split, 0, rows);
}

inline double rel_diff(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

}  // namespace sdft::testing
