#pragma once

// Training-strategy configuration and JSON (de)serialization of every config
// struct, used for report echoes and structured config files.

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

#include "sdft/data.hpp"
#include "sdft/encoder.hpp"
#include "sdft/optim.hpp"

namespace sdft {

enum class Mode { baseline, sda, sdv };

inline const char* to_string(Mode m) {
    switch (m) {
        case Mode::baseline: return "baseline";
        case Mode::sda: return "sda";
        case Mode::sdv: return "sdv";
    }
    return "?";
}

inline Mode parse_mode(const std::string& s) {
    if (s == "baseline") return Mode::baseline;
    if (s == "sda") return Mode::sda;
    if (s == "sdv") return Mode::sdv;
    throw ConfigError("unknown mode '" + s + "' (expected baseline, sda or sdv)");
}

/// teacher_size == kTeacherAll selects the running mean over every previous step.
inline constexpr std::size_t kTeacherAll = 0;

struct DistillConfig {
    Mode mode = Mode::baseline;
    double lambda = 1.0;
    std::size_t teacher_size = 1;
    std::size_t snapshot_every = 1;

    bool teacher_all() const noexcept { return teacher_size == kTeacherAll; }

    void validate() const {
        if (!(lambda >= 0.0)) throw ConfigError("distillation weight lambda must be >= 0");
        if (snapshot_every == 0) throw ConfigError("snapshot_every must be >= 1");
        if (teacher_all() && mode == Mode::sdv) throw ConfigError("teacher size 'all' is only valid for sda");
    }

    std::string label() const {
        if (mode == Mode::baseline) return "baseline";
        std::string k = teacher_all() ? "all" : std::to_string(teacher_size);
        return std::string(to_string(mode)) + "(K=" + k + ")";
    }

    friend bool operator==(const DistillConfig&, const DistillConfig&) = default;
};

inline std::string teacher_size_str(std::size_t k) { return k == kTeacherAll ? "all" : std::to_string(k); }

inline std::size_t parse_teacher_size(const std::string& s) {
    if (s == "all" || s == "ALL") return kTeacherAll;
    std::size_t used = 0;
    unsigned long v = 0;
    try {
        v = std::stoul(s, &used);
    } catch (const std::exception&) {
        used = 0;
    }
    if (used == 0 || used != s.size() || v == 0) throw ConfigError("teacher size must be a positive integer or 'all', got '" + s + "'");
    return static_cast<std::size_t>(v);
}

enum class Selection { final_epoch, best_dev };

struct TrainConfig {
    std::size_t epochs = 4;
    std::size_t micro_batch = 8;
    std::size_t accum_steps = 2;
    std::size_t eval_batch = 64;
    AdamWConfig optim;
    std::uint64_t init_seed = 1;
    std::uint64_t data_seed = 1;
    Selection selection = Selection::final_epoch;

    void validate() const {
        if (micro_batch == 0) throw ConfigError("micro_batch must be >= 1");
        if (accum_steps == 0) throw ConfigError("accum_steps must be >= 1");
        if (eval_batch == 0) throw ConfigError("eval_batch must be >= 1");
        optim.validate();
    }

    friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ----------------------------- JSON -----------------------------

using json = nlohmann::json;

inline void to_json(json& j, const ModelConfig& c) {
    j = json{{"vocab_size", c.vocab_size}, {"max_len", c.max_len}, {"dim", c.dim},       {"n_layers", c.n_layers},
             {"n_heads", c.n_heads},       {"ffn_dim", c.ffn_dim}, {"n_classes", c.n_classes}, {"dropout_p", c.dropout_p}};
}
inline void from_json(const json& j, ModelConfig& c) {
    ModelConfig d;
    c.vocab_size = j.value("vocab_size", d.vocab_size);
    c.max_len = j.value("max_len", d.max_len);
    c.dim = j.value("dim", d.dim);
    c.n_layers = j.value("n_layers", d.n_layers);
    c.n_heads = j.value("n_heads", d.n_heads);
    c.ffn_dim = j.value("ffn_dim", d.ffn_dim);
    c.n_classes = j.value("n_classes", d.n_classes);
    c.dropout_p = j.value("dropout_p", d.dropout_p);
}

inline void to_json(json& j, const AdamWConfig& c) {
    j = json{{"lr_encoder", c.lr_encoder}, {"lr_head", c.lr_head},           {"beta1", c.beta1},
             {"beta2", c.beta2},           {"eps", c.eps},                   {"weight_decay", c.weight_decay},
             {"warmup_prop", c.warmup_prop}};
}
inline void from_json(const json& j, AdamWConfig& c) {
    AdamWConfig d;
    c.lr_encoder = j.value("lr_encoder", d.lr_encoder);
    c.lr_head = j.value("lr_head", d.lr_head);
    c.beta1 = j.value("beta1", d.beta1);
    c.beta2 = j.value("beta2", d.beta2);
    c.eps = j.value("eps", d.eps);
    c.weight_decay = j.value("weight_decay", d.weight_decay);
    c.warmup_prop = j.value("warmup_prop", d.warmup_prop);
}

inline void to_json(json& j, const DistillConfig& c) {
    j = json{{"mode", to_string(c.mode)},
             {"lambda", c.lambda},
             {"teacher_size", teacher_size_str(c.teacher_size)},
             {"snapshot_every", c.snapshot_every}};
}
inline void from_json(const json& j, DistillConfig& c) {
    c.mode = parse_mode(j.value("mode", std::string("baseline")));
    c.lambda = j.value("lambda", 1.0);
    c.teacher_size = parse_teacher_size(j.value("teacher_size", std::string("1")));
    c.snapshot_every = j.value("snapshot_every", std::size_t{1});
}

inline void to_json(json& j, const TrainConfig& c) {
    j = json{{"epochs", c.epochs},
             {"micro_batch", c.micro_batch},
             {"accum_steps", c.accum_steps},
             {"eval_batch", c.eval_batch},
             {"optim", c.optim},
             {"init_seed", c.init_seed},
             {"data_seed", c.data_seed},
             {"selection", c.selection == Selection::best_dev ? "best_dev" : "final"}};
}
inline void from_json(const json& j, TrainConfig& c) {
    TrainConfig d;
    c.epochs = j.value("epochs", d.epochs);
    c.micro_batch = j.value("micro_batch", d.micro_batch);
    c.accum_steps = j.value("accum_steps", d.accum_steps);
    c.eval_batch = j.value("eval_batch", d.eval_batch);
    c.optim = j.value("optim", d.optim);
    c.init_seed = j.value("init_seed", d.init_seed);
    c.data_seed = j.value("data_seed", d.data_seed);
    c.selection = j.value("selection", std::string("final")) == "best_dev" ? Selection::best_dev : Selection::final_epoch;
}

inline void to_json(json& j, const SyntheticSpec& s) {
    j = json{{"n_classes", s.n_classes},   {"vocab_span", s.vocab_span},   {"topic_words", s.topic_words},
             {"min_tokens", s.min_tokens}, {"max_tokens", s.max_tokens},   {"signal", s.signal},
             {"topic_overlap", s.topic_overlap}, {"zipf", s.zipf},         {"label_noise", s.label_noise},
             {"test_label_noise", s.test_label_noise}, {"n_train", s.n_train}, {"n_test", s.n_test}};
}
inline void from_json(const json& j, SyntheticSpec& s) {
    SyntheticSpec d;
    s.n_classes = j.value("n_classes", d.n_classes);
    s.vocab_span = j.value("vocab_span", d.vocab_span);
    s.topic_words = j.value("topic_words", d.topic_words);
    s.min_tokens = j.value("min_tokens", d.min_tokens);
    s.max_tokens = j.value("max_tokens", d.max_tokens);
    s.signal = j.value("signal", d.signal);
    s.topic_overlap = j.value("topic_overlap", d.topic_overlap);
    s.zipf = j.value("zipf", d.zipf);
    s.label_noise = j.value("label_noise", d.label_noise);
    s.test_label_noise = j.value("test_label_noise", d.test_label_noise);
    s.n_train = j.value("n_train", d.n_train);
    s.n_test = j.value("n_test", d.n_test);
}

inline void to_json(json& j, const CsvSchema& s) {
    j = json{{"label_col", s.label_col},   {"text_cols", s.text_cols}, {"pair", s.pair},
             {"delimiter", std::string(1, s.delimiter)}, {"has_header", s.has_header}, {"n_classes", s.n_classes}};
    j["label_base"] = s.label_base ? json(*s.label_base) : json(nullptr);
}
inline void from_json(const json& j, CsvSchema& s) {
    CsvSchema d;
    s.label_col = j.value("label_col", d.label_col);
    s.text_cols = j.value("text_cols", d.text_cols);
    s.pair = j.value("pair", d.pair);
    const std::string delim = j.value("delimiter", std::string(","));
    if (delim.size() != 1) throw ConfigError("CSV delimiter must be a single character");
    s.delimiter = delim[0];
    s.has_header = j.value("has_header", d.has_header);
    s.n_classes = j.value("n_classes", d.n_classes);
    if (j.contains("label_base") && !j.at("label_base").is_null()) s.label_base = j.at("label_base").get<int>();
}

}  // namespace sdft
