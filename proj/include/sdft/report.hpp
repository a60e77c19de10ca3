#pragma once

// Evaluation metrics and the per-run report exchanged between the trainer,
// the harness and the CLI.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdft/data.hpp"
#include "sdft/encoder.hpp"

namespace sdft {

struct EvalMetrics {
    double accuracy = 0.0;
    double error = 1.0;
    std::size_t correct = 0;
    std::size_t total = 0;

    friend bool operator==(const EvalMetrics&, const EvalMetrics&) = default;
};

inline EvalMetrics metrics_from_counts(std::size_t correct, std::size_t total) {
    EvalMetrics m;
    m.correct = correct;
    m.total = total;
    m.accuracy = double(correct) / double(total);
    m.error = double(total - correct) / double(total);
    return m;
}

/// Accuracy of argmax predictions against gold labels.
inline EvalMetrics score_predictions(const std::vector<int>& predicted, const std::vector<int>& gold) {
    if (predicted.size() != gold.size()) throw ShapeError("prediction/label count mismatch");
    if (gold.empty()) throw InputError("cannot score an empty split");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < gold.size(); ++i) correct += predicted[i] == gold[i];
    return metrics_from_counts(correct, gold.size());
}

/// Eval-mode argmax predictions over a whole split.
template <typename Real>
std::vector<int> predict_labels(const ModelConfig& cfg, const ParameterSet<Real>& params, const EncodedSplit& split,
                                std::size_t batch_size, std::size_t* forwards = nullptr) {
    if (batch_size == 0) throw ConfigError("evaluation batch size must be >= 1");
    std::vector<int> out;
    out.reserve(split.size());
    for (std::size_t b = 0; b < split.size(); b += batch_size) {
        Batch batch = make_batch(split, b, std::min(split.size(), b + batch_size));
        auto labels = argmax_rows(logits(cfg, params, batch));
        out.insert(out.end(), labels.begin(), labels.end());
        if (forwards) ++*forwards;
    }
    return out;
}

inline std::vector<int> gold_labels(const EncodedSplit& split) {
    std::vector<int> out;
    out.reserve(split.size());
    for (const auto& e : split.examples) out.push_back(e.label);
    return out;
}

/// Misclassification rate in eval mode (no dropout).
template <typename Real>
EvalMetrics evaluate(const ModelConfig& cfg, const ParameterSet<Real>& params, const EncodedSplit& split,
                     std::size_t batch_size, std::size_t* forwards = nullptr) {
    if (split.empty()) throw InputError("cannot evaluate on an empty split");
    return score_predictions(predict_labels(cfg, params, split, batch_size, forwards), gold_labels(split));
}

// ----------------------------- run report -----------------------------

struct CurvePoint {
    std::size_t epoch = 0;
    double test_error = 0;
    double test_accuracy = 0;
    double ce_loss = 0;   // mean over the epoch's micro-batches
    double mse_loss = 0;  // mean over the epoch's micro-batches (0 for baseline)
    double lr = 0;        // encoder-group rate after the epoch's last update
    std::optional<double> dev_accuracy;

    friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct StepPoint {
    std::size_t step = 0;
    double ce_loss = 0;
    double mse_loss = 0;
    double lr = 0;

    friend bool operator==(const StepPoint&, const StepPoint&) = default;
};

struct RunCounters {
    std::size_t student_forwards = 0;
    std::size_t teacher_forwards = 0;
    std::size_t eval_forwards = 0;
    std::size_t optimizer_steps = 0;

    friend bool operator==(const RunCounters&, const RunCounters&) = default;
};

struct RunReport {
    nlohmann::json config;  // echo of every config and seed
    std::vector<CurvePoint> curve;
    std::vector<StepPoint> steps;
    EvalMetrics student;
    std::optional<EvalMetrics> teacher;        // final SDA teacher
    std::optional<EvalMetrics> self_ensemble;  // mean of every post-update student
    std::optional<std::size_t> selected_epoch;
    RunCounters counters;
    std::optional<double> wall_seconds;  // kept out of files unless requested
    std::string status = "ok";
    std::string diagnostic;

    bool ok() const noexcept { return status == "ok"; }

    friend bool operator==(const RunReport&, const RunReport&) = default;
};

using json = nlohmann::json;

inline void to_json(json& j, const EvalMetrics& m) {
    j = json{{"accuracy", m.accuracy}, {"error", m.error}, {"correct", m.correct}, {"total", m.total}};
}
inline void from_json(const json& j, EvalMetrics& m) {
    m.accuracy = j.at("accuracy").get<double>();
    m.error = j.at("error").get<double>();
    m.correct = j.at("correct").get<std::size_t>();
    m.total = j.at("total").get<std::size_t>();
}

template <typename T>
json optional_json(const std::optional<T>& v) {
    return v ? json(*v) : json(nullptr);
}

template <typename T>
std::optional<T> optional_from(const json& j, const char* key) {
    if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
    return j.at(key).get<T>();
}

inline void to_json(json& j, const CurvePoint& p) {
    j = json{{"epoch", p.epoch},     {"test_error", p.test_error}, {"test_accuracy", p.test_accuracy},
             {"ce_loss", p.ce_loss}, {"mse_loss", p.mse_loss},     {"lr", p.lr},
             {"dev_accuracy", optional_json(p.dev_accuracy)}};
}
inline void from_json(const json& j, CurvePoint& p) {
    p.epoch = j.at("epoch").get<std::size_t>();
    p.test_error = j.at("test_error").get<double>();
    p.test_accuracy = j.at("test_accuracy").get<double>();
    p.ce_loss = j.at("ce_loss").get<double>();
    p.mse_loss = j.at("mse_loss").get<double>();
    p.lr = j.at("lr").get<double>();
    p.dev_accuracy = optional_from<double>(j, "dev_accuracy");
}

inline void to_json(json& j, const StepPoint& p) {
    j = json{{"step", p.step}, {"ce_loss", p.ce_loss}, {"mse_loss", p.mse_loss}, {"lr", p.lr}};
}
inline void from_json(const json& j, StepPoint& p) {
    p.step = j.at("step").get<std::size_t>();
    p.ce_loss = j.at("ce_loss").get<double>();
    p.mse_loss = j.at("mse_loss").get<double>();
    p.lr = j.at("lr").get<double>();
}

inline void to_json(json& j, const RunCounters& c) {
    j = json{{"student_forwards", c.student_forwards},
             {"teacher_forwards", c.teacher_forwards},
             {"eval_forwards", c.eval_forwards},
             {"optimizer_steps", c.optimizer_steps}};
}
inline void from_json(const json& j, RunCounters& c) {
    c.student_forwards = j.at("student_forwards").get<std::size_t>();
    c.teacher_forwards = j.at("teacher_forwards").get<std::size_t>();
    c.eval_forwards = j.at("eval_forwards").get<std::size_t>();
    c.optimizer_steps = j.at("optimizer_steps").get<std::size_t>();
}

inline void to_json(json& j, const RunReport& r) {
    j = json{{"config", r.config},
             {"curve", r.curve},
             {"steps", r.steps},
             {"final", json{{"student", r.student},
                            {"teacher", optional_json(r.teacher)},
                            {"self_ensemble", optional_json(r.self_ensemble)}}},
             {"selected_epoch", optional_json(r.selected_epoch)},
             {"counters", r.counters},
             {"status", r.status},
             {"diagnostic", r.diagnostic}};
    if (r.wall_seconds) j["wall_seconds"] = *r.wall_seconds;
}
inline void from_json(const json& j, RunReport& r) {
    r.config = j.at("config");
    r.curve = j.at("curve").get<std::vector<CurvePoint>>();
    r.steps = j.at("steps").get<std::vector<StepPoint>>();
    const json& f = j.at("final");
    r.student = f.at("student").get<EvalMetrics>();
    r.teacher = optional_from<EvalMetrics>(f, "teacher");
    r.self_ensemble = optional_from<EvalMetrics>(f, "self_ensemble");
    r.selected_epoch = optional_from<std::size_t>(j, "selected_epoch");
    r.counters = j.at("counters").get<RunCounters>();
    r.wall_seconds = optional_from<double>(j, "wall_seconds");
    r.status = j.at("status").get<std::string>();
    r.diagnostic = j.at("diagnostic").get<std::string>();
}

}  // namespace sdft
