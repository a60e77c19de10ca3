#pragma once

// Experiment orchestration: single runs, independently seeded ensembles,
// lambda / teacher-size sweeps and data-order stability studies, plus the
// JSON and CSV files they are written to.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "sdft/config.hpp"
#include "sdft/data.hpp"
#include "sdft/distill.hpp"
#include "sdft/ensemble.hpp"
#include "sdft/report.hpp"

namespace sdft {

// ----------------------------- configuration -----------------------------

enum class DataKind { synthetic, csv, split };

/// Where the train / test (/ dev) examples come from.
struct DataSource {
    DataKind kind = DataKind::synthetic;
    SyntheticSpec synthetic;
    std::uint64_t synthetic_seed = 7;
    std::string train_path;
    std::string test_path;
    std::string dev_path;  // empty: no dev split
    CsvSchema schema;      // csv kind; n_classes is also used by the split kind
    std::size_t min_freq = 1;
    std::optional<std::size_t> subsample_per_class;  // stratified train subsample
    std::uint64_t subsample_seed = 1;

    friend bool operator==(const DataSource&, const DataSource&) = default;
};

enum class Precision { f64, f32 };

inline const char* to_string(Precision p) { return p == Precision::f32 ? "float32" : "float64"; }

inline Precision parse_precision(const std::string& s) {
    if (s == "float64" || s == "f64" || s == "double") return Precision::f64;
    if (s == "float32" || s == "f32" || s == "float") return Precision::f32;
    throw ConfigError("unknown precision '" + s + "' (expected float32 or float64)");
}

struct ExperimentConfig {
    ModelConfig model;
    DistillConfig distill;
    TrainConfig train;
    DataSource data;
    Precision precision = Precision::f64;
    bool record_timing = false;  // keep wall-clock seconds in reports

    friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

inline const char* to_string(DataKind k) {
    switch (k) {
        case DataKind::synthetic: return "synthetic";
        case DataKind::csv: return "csv";
        case DataKind::split: return "split";
    }
    return "?";
}

inline DataKind parse_data_kind(const std::string& s) {
    if (s == "synthetic") return DataKind::synthetic;
    if (s == "csv") return DataKind::csv;
    if (s == "split") return DataKind::split;
    throw ConfigError("unknown data kind '" + s + "' (expected synthetic, csv or split)");
}

inline void to_json(json& j, const DataSource& d) {
    j = json{{"kind", to_string(d.kind)}, {"min_freq", d.min_freq}};
    if (d.kind == DataKind::synthetic) {
        j["synthetic"] = d.synthetic;
        j["synthetic_seed"] = d.synthetic_seed;
    } else {
        j["train_path"] = d.train_path;
        j["test_path"] = d.test_path;
        j["dev_path"] = d.dev_path;
        if (d.kind == DataKind::csv) {
            j["schema"] = d.schema;
        } else {
            j["n_classes"] = d.schema.n_classes;
        }
    }
    if (d.subsample_per_class) {
        j["subsample_per_class"] = *d.subsample_per_class;
        j["subsample_seed"] = d.subsample_seed;
    }
}

inline void from_json(const json& j, DataSource& d) {
    d = DataSource{};
    d.kind = parse_data_kind(j.value("kind", std::string("synthetic")));
    d.min_freq = j.value("min_freq", d.min_freq);
    if (j.contains("synthetic")) d.synthetic = j.at("synthetic").get<SyntheticSpec>();
    d.synthetic_seed = j.value("synthetic_seed", d.synthetic_seed);
    d.train_path = j.value("train_path", std::string());
    d.test_path = j.value("test_path", std::string());
    d.dev_path = j.value("dev_path", std::string());
    if (j.contains("schema")) d.schema = j.at("schema").get<CsvSchema>();
    if (j.contains("n_classes")) d.schema.n_classes = j.at("n_classes").get<std::size_t>();
    if (j.contains("subsample_per_class")) d.subsample_per_class = j.at("subsample_per_class").get<std::size_t>();
    d.subsample_seed = j.value("subsample_seed", d.subsample_seed);
}

inline void to_json(json& j, const ExperimentConfig& c) {
    j = json{{"model", c.model},
             {"distill", c.distill},
             {"train", c.train},
             {"data", c.data},
             {"precision", to_string(c.precision)}};
}

inline void from_json(const json& j, ExperimentConfig& c) {
    c = ExperimentConfig{};
    if (j.contains("model")) c.model = j.at("model").get<ModelConfig>();
    if (j.contains("distill")) c.distill = j.at("distill").get<DistillConfig>();
    if (j.contains("train")) c.train = j.at("train").get<TrainConfig>();
    if (j.contains("data")) c.data = j.at("data").get<DataSource>();
    c.precision = parse_precision(j.value("precision", std::string("float64")));
}

// ----------------------------- data preparation -----------------------------

struct RawData {
    DatasetSplit train;
    DatasetSplit test;
    std::optional<DatasetSplit> dev;
};

inline RawData load_raw_data(const DataSource& src) {
    RawData raw;
    switch (src.kind) {
        case DataKind::synthetic: {
            auto d = make_synthetic(src.synthetic, src.synthetic_seed);
            raw.train = std::move(d.train);
            raw.test = std::move(d.test);
            break;
        }
        case DataKind::csv:
            if (src.train_path.empty() || src.test_path.empty()) throw ConfigError("CSV data needs train and test paths");
            raw.train = load_csv(src.train_path, src.schema, SplitRole::train);
            raw.test = load_csv(src.test_path, src.schema, SplitRole::test);
            if (!src.dev_path.empty()) raw.dev = load_csv(src.dev_path, src.schema, SplitRole::dev);
            break;
        case DataKind::split:
            if (src.train_path.empty() || src.test_path.empty()) throw ConfigError("split data needs train and test paths");
            raw.train = load_split(src.train_path, src.schema.n_classes, SplitRole::train);
            raw.test = load_split(src.test_path, src.schema.n_classes, SplitRole::test);
            if (!src.dev_path.empty()) raw.dev = load_split(src.dev_path, src.schema.n_classes, SplitRole::dev);
            break;
    }
    if (src.subsample_per_class) raw.train = stratified_subsample(raw.train, *src.subsample_per_class, src.subsample_seed);
    return raw;
}

/// Vocabulary from the training texts, capped at the model's vocab_size, then tokenization of every split.
inline PreparedData prepare_data(const RawData& raw, const ModelConfig& model, std::size_t min_freq = 1) {
    if (raw.train.empty()) throw InputError("training split is empty");
    PreparedData out;
    out.vocab = build_vocab(raw.train.texts(), model.vocab_size, min_freq);
    out.train = encode_split(raw.train, out.vocab, model.max_len);
    out.test = encode_split(raw.test, out.vocab, model.max_len);
    if (raw.dev) out.dev = encode_split(*raw.dev, out.vocab, model.max_len);
    return out;
}

inline PreparedData prepare_data(const DataSource& src, const ModelConfig& model) {
    return prepare_data(load_raw_data(src), model, src.min_freq);
}

// ----------------------------- worker pool -----------------------------

/// Runs fn(0..n-1) on up to `jobs` threads; results are stored by index so the
/// output never depends on scheduling. The first exception is rethrown.
template <typename Fn>
auto parallel_map(std::size_t n, std::size_t jobs, Fn&& fn) {
    using R = decltype(fn(std::size_t{0}));
    std::vector<std::optional<R>> slots(n);
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto worker = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                slots[i].emplace(fn(i));
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mu);
                if (!error) error = std::current_exception();
            }
        }
    };
    const std::size_t threads = std::min(std::max<std::size_t>(jobs, 1), n);
    if (threads <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (error) std::rethrow_exception(error);
    std::vector<R> out;
    out.reserve(n);
    for (auto& s : slots) out.push_back(std::move(*s));
    return out;
}

// ----------------------------- single runs -----------------------------

namespace detail {

inline json config_echo(const ExperimentConfig& cfg, const RunReport& rep) {
    json echo = rep.config;
    echo["data"] = cfg.data;
    echo["precision"] = to_string(cfg.precision);
    return echo;
}

template <typename Real>
FineTuneResult<Real> fine_tune_checked(const ExperimentConfig& cfg, const PreparedData& data) {
    auto res = fine_tune<Real>(cfg.model, cfg.distill, cfg.train, data);
    res.report.config = config_echo(cfg, res.report);
    if (!cfg.record_timing) res.report.wall_seconds.reset();
    return res;
}

inline RunReport failed_report(const ExperimentConfig& cfg, const std::string& status, const std::string& what) {
    RunReport rep;
    rep.config = json{{"model", cfg.model}, {"distill", cfg.distill}, {"train", cfg.train}, {"data", cfg.data},
                      {"precision", to_string(cfg.precision)}};
    rep.student = EvalMetrics{};
    rep.status = status;
    rep.diagnostic = what;
    return rep;
}

}  // namespace detail

/// One fine-tuning run on prepared data. A diverged run comes back as a
/// report with status "diverged"; every other error propagates.
inline RunReport run_prepared(const ExperimentConfig& cfg, const PreparedData& data) {
    try {
        if (cfg.precision == Precision::f32) return detail::fine_tune_checked<float>(cfg, data).report;
        return detail::fine_tune_checked<double>(cfg, data).report;
    } catch (const DivergenceError& e) {
        return detail::failed_report(cfg, "diverged", e.what());
    }
}

inline RunReport run_experiment(const ExperimentConfig& cfg) { return run_prepared(cfg, prepare_data(cfg.data, cfg.model)); }

/// Seeds a run the way the ensemble and sweep studies do: one seed drives
/// both initialization and data order.
inline ExperimentConfig with_run_seed(ExperimentConfig cfg, std::uint64_t seed) {
    cfg.train.init_seed = seed;
    cfg.train.data_seed = seed;
    return cfg;
}

// ----------------------------- summary statistics -----------------------------

struct SummaryStats {
    std::size_t n = 0;
    double mean = 0;
    double stddev = 0;  // sample standard deviation (n - 1); 0 when n < 2
    double min = 0;
    double max = 0;
    double q1 = 0;
    double median = 0;
    double q3 = 0;

    friend bool operator==(const SummaryStats&, const SummaryStats&) = default;
};

/// Quantile by linear interpolation between order statistics at h = (n - 1) q.
inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) throw ContractError("quantile of an empty sample");
    const double h = (double(sorted.size()) - 1.0) * q;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, sorted.size() - 1);
    return sorted[lo] + (h - double(lo)) * (sorted[hi] - sorted[lo]);
}

inline SummaryStats summarize(const std::vector<double>& xs) {
    if (xs.empty()) throw ContractError("summary of an empty sample");
    SummaryStats s;
    s.n = xs.size();
    s.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / double(s.n);
    if (s.n > 1) {
        double ss = 0;
        for (double x : xs) ss += (x - s.mean) * (x - s.mean);
        s.stddev = std::sqrt(ss / double(s.n - 1));
    }
    std::vector<double> sorted = xs;
    std::sort(sorted.begin(), sorted.end());
    s.min = sorted.front();
    s.max = sorted.back();
    s.q1 = quantile_sorted(sorted, 0.25);
    s.median = quantile_sorted(sorted, 0.5);
    s.q3 = quantile_sorted(sorted, 0.75);
    return s;
}

/// Mean over datasets of (baseline_error - method_error) / baseline_error.
inline double average_relative_change(const std::vector<double>& baseline_errors, const std::vector<double>& method_errors) {
    if (baseline_errors.size() != method_errors.size() || baseline_errors.empty()) {
        throw ContractError("relative change needs matching non-empty error lists");
    }
    double sum = 0;
    for (std::size_t i = 0; i < baseline_errors.size(); ++i) {
        if (!(baseline_errors[i] > 0)) throw ContractError("relative change is undefined for a zero baseline error");
        sum += (baseline_errors[i] - method_errors[i]) / baseline_errors[i];
    }
    return sum / double(baseline_errors.size());
}

inline void to_json(json& j, const SummaryStats& s) {
    j = json{{"n", s.n},       {"mean", s.mean}, {"stddev", s.stddev}, {"min", s.min},
             {"max", s.max},   {"q1", s.q1},     {"median", s.median}, {"q3", s.q3}};
}
inline void from_json(const json& j, SummaryStats& s) {
    s.n = j.at("n").get<std::size_t>();
    s.mean = j.at("mean").get<double>();
    s.stddev = j.at("stddev").get<double>();
    s.min = j.at("min").get<double>();
    s.max = j.at("max").get<double>();
    s.q1 = j.at("q1").get<double>();
    s.median = j.at("median").get<double>();
    s.q3 = j.at("q3").get<double>();
}

// ----------------------------- ensembles -----------------------------

struct EnsembleReport {
    std::vector<std::uint64_t> seeds;
    std::vector<RunReport> members;
    EvalMetrics voted;
    EvalMetrics averaged;
    double max_member_error = 0;
    double mean_member_error = 0;

    friend bool operator==(const EnsembleReport&, const EnsembleReport&) = default;
};

namespace detail {

template <typename Real>
EnsembleReport ensemble_impl(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                             const PreparedData& data, std::size_t jobs) {
    auto results = parallel_map(seeds.size(), jobs, [&](std::size_t i) {
        return fine_tune_checked<Real>(with_run_seed(cfg, seeds[i]), data);
    });
    EnsembleReport out;
    out.seeds = seeds;
    EnsembleSet<Real> set;
    set.config = cfg.model;
    for (auto& r : results) {
        set.members.push_back(std::move(r.student));
        out.members.push_back(std::move(r.report));
    }
    std::vector<int> voted;
    for (std::size_t b = 0; b < data.test.size(); b += cfg.train.eval_batch) {
        Batch batch = make_batch(data.test, b, std::min(data.test.size(), b + cfg.train.eval_batch));
        auto v = voted_predict(set, batch);
        voted.insert(voted.end(), v.labels.begin(), v.labels.end());
    }
    const auto gold = gold_labels(data.test);
    out.voted = score_predictions(voted, gold);
    out.averaged = evaluate(cfg.model, average_parameters(set.members), data.test, cfg.train.eval_batch);
    double sum = 0;
    for (const auto& m : out.members) {
        out.max_member_error = std::max(out.max_member_error, m.student.error);
        sum += m.student.error;
    }
    out.mean_member_error = sum / double(out.members.size());
    return out;
}

}  // namespace detail

/// Fine-tunes one model per seed, then scores the voted and the
/// parameter-averaged ensemble on the test split.
inline EnsembleReport ensemble_experiment(const ExperimentConfig& cfg, const std::vector<std::uint64_t>& seeds,
                                          const PreparedData& data, std::size_t jobs = 1) {
    if (seeds.empty()) throw ConfigError("an ensemble needs at least one seed");
    if (data.test.empty()) throw InputError("test split is empty");
    if (cfg.precision == Precision::f32) return detail::ensemble_impl<float>(cfg, seeds, data, jobs);
    return detail::ensemble_impl<double>(cfg, seeds, data, jobs);
}

// ----------------------------- sweeps -----------------------------

enum class SweepAxis { lambda, teacher_size };

inline const char* to_string(SweepAxis a) { return a == SweepAxis::lambda ? "lambda" : "k"; }

inline SweepAxis parse_sweep_axis(const std::string& s) {
    if (s == "lambda") return SweepAxis::lambda;
    if (s == "k" || s == "K" || s == "teacher_size") return SweepAxis::teacher_size;
    throw ConfigError("unknown sweep axis '" + s + "' (expected lambda or k)");
}

/// Default lambda grid.
inline std::vector<std::string> default_lambda_grid() { return {"0", "0.25", "0.5", "1", "1.5", "2"}; }
/// Default teacher-size grid.
inline std::vector<std::string> default_k_grid() { return {"1", "2", "3", "4", "5", "all"}; }

struct SweepCell {
    std::string value;  // grid value as written ("0.5", "3", "all")
    std::vector<std::uint64_t> seeds;
    std::vector<std::optional<double>> accuracy;  // per seed; nullopt for a failed run
    std::vector<std::optional<double>> error;
    std::optional<double> mean_accuracy;  // over successful seeds
    std::optional<double> mean_error;
    std::vector<std::string> failures;  // "seed N: diagnostic"

    bool failed() const { return !mean_accuracy.has_value(); }
    friend bool operator==(const SweepCell&, const SweepCell&) = default;
};

struct SweepTable {
    SweepAxis axis = SweepAxis::lambda;
    json base_config;
    std::vector<SweepCell> cells;

    friend bool operator==(const SweepTable&, const SweepTable&) = default;
};

/// Applies one grid value to a base configuration.
inline ExperimentConfig apply_grid_value(ExperimentConfig cfg, SweepAxis axis, const std::string& value) {
    if (axis == SweepAxis::lambda) {
        std::size_t used = 0;
        double v = 0;
        try {
            v = std::stod(value, &used);
        } catch (const std::exception&) {
            used = 0;
        }
        if (used == 0 || used != value.size()) throw ConfigError("lambda grid value '" + value + "' is not a number");
        cfg.distill.lambda = v;
    } else {
        cfg.distill.teacher_size = parse_teacher_size(value);
    }
    return cfg;
}

/// One run per (grid value, seed). A cell whose runs fail is marked with
/// diagnostics and the sweep moves on.
inline SweepTable sweep(const ExperimentConfig& base, SweepAxis axis, const std::vector<std::string>& grid,
                        const std::vector<std::uint64_t>& seeds, const PreparedData& data, std::size_t jobs = 1) {
    if (grid.empty()) throw ConfigError("sweep grid is empty");
    if (seeds.empty()) throw ConfigError("sweep needs at least one seed");
    if (base.distill.mode == Mode::baseline) throw ConfigError("sweeps need mode sda or sdv");
    struct Outcome {
        std::optional<RunReport> report;
        std::string failure;
    };
    const std::size_t n = grid.size() * seeds.size();
    auto outcomes = parallel_map(n, jobs, [&](std::size_t i) {
        const std::string& value = grid[i / seeds.size()];
        const std::uint64_t seed = seeds[i % seeds.size()];
        Outcome o;
        try {
            ExperimentConfig cfg = with_run_seed(apply_grid_value(base, axis, value), seed);
            RunReport rep = run_prepared(cfg, data);
            if (rep.ok()) {
                o.report = std::move(rep);
            } else {
                o.failure = rep.diagnostic;
            }
        } catch (const Error& e) {
            o.failure = e.what();
        }
        return o;
    });
    SweepTable table;
    table.axis = axis;
    table.base_config = base;
    for (std::size_t c = 0; c < grid.size(); ++c) {
        SweepCell cell;
        cell.value = grid[c];
        cell.seeds = seeds;
        double acc_sum = 0, err_sum = 0;
        std::size_t ok = 0;
        for (std::size_t s = 0; s < seeds.size(); ++s) {
            const Outcome& o = outcomes[c * seeds.size() + s];
            if (o.report) {
                cell.accuracy.push_back(o.report->student.accuracy);
                cell.error.push_back(o.report->student.error);
                acc_sum += o.report->student.accuracy;
                err_sum += o.report->student.error;
                ++ok;
            } else {
                cell.accuracy.push_back(std::nullopt);
                cell.error.push_back(std::nullopt);
                cell.failures.push_back("seed " + std::to_string(seeds[s]) + ": " + o.failure);
            }
        }
        if (ok > 0) {
            cell.mean_accuracy = acc_sum / double(ok);
            cell.mean_error = err_sum / double(ok);
        }
        table.cells.push_back(std::move(cell));
    }
    return table;
}

// ----------------------------- stability -----------------------------

/// Strategies compared by the stability study.
inline std::vector<DistillConfig> default_stability_strategies(double lambda = 1.0) {
    DistillConfig base;
    DistillConfig sda1{Mode::sda, lambda, 1, 1};
    DistillConfig sda5{Mode::sda, lambda, 5, 1};
    DistillConfig sdv5{Mode::sdv, lambda, 5, 1};
    return {base, sda1, sda5, sdv5};
}

struct StabilityResult {
    std::string strategy;
    DistillConfig distill;
    std::uint64_t init_seed = 0;
    std::vector<std::uint64_t> data_seeds;
    std::vector<double> accuracies;
    SummaryStats stats;
    std::vector<std::string> failures;

    friend bool operator==(const StabilityResult&, const StabilityResult&) = default;
};

/// Same initialization for every run, one run per data-order seed and strategy.
inline std::vector<StabilityResult> stability_study(const ExperimentConfig& base, const std::vector<std::uint64_t>& data_seeds,
                                                    std::uint64_t init_seed, const PreparedData& data,
                                                    const std::vector<DistillConfig>& strategies, std::size_t jobs = 1) {
    if (data_seeds.size() < 2) throw ConfigError("a stability study needs at least two data-order seeds");
    if (strategies.empty()) throw ConfigError("a stability study needs at least one strategy");
    for (const auto& s : strategies) s.validate();
    const std::size_t n = strategies.size() * data_seeds.size();
    auto reports = parallel_map(n, jobs, [&](std::size_t i) {
        ExperimentConfig cfg = base;
        cfg.distill = strategies[i / data_seeds.size()];
        cfg.train.init_seed = init_seed;
        cfg.train.data_seed = data_seeds[i % data_seeds.size()];
        return run_prepared(cfg, data);
    });
    std::vector<StabilityResult> out;
    for (std::size_t k = 0; k < strategies.size(); ++k) {
        StabilityResult r;
        r.strategy = strategies[k].label();
        r.distill = strategies[k];
        r.init_seed = init_seed;
        for (std::size_t s = 0; s < data_seeds.size(); ++s) {
            const RunReport& rep = reports[k * data_seeds.size() + s];
            if (rep.ok()) {
                r.data_seeds.push_back(data_seeds[s]);
                r.accuracies.push_back(rep.student.accuracy);
            } else {
                r.failures.push_back("data seed " + std::to_string(data_seeds[s]) + ": " + rep.diagnostic);
            }
        }
        if (!r.accuracies.empty()) r.stats = summarize(r.accuracies);
        out.push_back(std::move(r));
    }
    return out;
}

inline std::vector<StabilityResult> stability_study(const ExperimentConfig& base, const std::vector<std::uint64_t>& data_seeds,
                                                    std::uint64_t init_seed, const PreparedData& data, std::size_t jobs = 1) {
    return stability_study(base, data_seeds, init_seed, data, default_stability_strategies(base.distill.lambda), jobs);
}

// ----------------------------- JSON for study results -----------------------------

inline void to_json(json& j, const EnsembleReport& r) {
    j = json{{"seeds", r.seeds},         {"members", r.members},
             {"voted", r.voted},         {"averaged", r.averaged},
             {"max_member_error", r.max_member_error}, {"mean_member_error", r.mean_member_error}};
}
inline void from_json(const json& j, EnsembleReport& r) {
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.members = j.at("members").get<std::vector<RunReport>>();
    r.voted = j.at("voted").get<EvalMetrics>();
    r.averaged = j.at("averaged").get<EvalMetrics>();
    r.max_member_error = j.at("max_member_error").get<double>();
    r.mean_member_error = j.at("mean_member_error").get<double>();
}

inline void to_json(json& j, const SweepCell& c) {
    auto opt_list = [](const std::vector<std::optional<double>>& v) {
        json a = json::array();
        for (const auto& x : v) a.push_back(optional_json(x));
        return a;
    };
    j = json{{"value", c.value},
             {"seeds", c.seeds},
             {"accuracy", opt_list(c.accuracy)},
             {"error", opt_list(c.error)},
             {"mean_accuracy", optional_json(c.mean_accuracy)},
             {"mean_error", optional_json(c.mean_error)},
             {"failures", c.failures}};
}
inline void from_json(const json& j, SweepCell& c) {
    auto opt_list = [](const json& a) {
        std::vector<std::optional<double>> v;
        for (const auto& x : a) v.push_back(x.is_null() ? std::nullopt : std::optional<double>(x.get<double>()));
        return v;
    };
    c.value = j.at("value").get<std::string>();
    c.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    c.accuracy = opt_list(j.at("accuracy"));
    c.error = opt_list(j.at("error"));
    c.mean_accuracy = optional_from<double>(j, "mean_accuracy");
    c.mean_error = optional_from<double>(j, "mean_error");
    c.failures = j.at("failures").get<std::vector<std::string>>();
}

inline void to_json(json& j, const SweepTable& t) {
    j = json{{"axis", to_string(t.axis)}, {"base_config", t.base_config}, {"cells", t.cells}};
}
inline void from_json(const json& j, SweepTable& t) {
    t.axis = parse_sweep_axis(j.at("axis").get<std::string>());
    t.base_config = j.at("base_config");
    t.cells = j.at("cells").get<std::vector<SweepCell>>();
}

inline void to_json(json& j, const StabilityResult& r) {
    j = json{{"strategy", r.strategy}, {"distill", r.distill},       {"init_seed", r.init_seed},
             {"data_seeds", r.data_seeds}, {"accuracies", r.accuracies}, {"stats", r.stats},
             {"failures", r.failures}};
}
inline void from_json(const json& j, StabilityResult& r) {
    r.strategy = j.at("strategy").get<std::string>();
    r.distill = j.at("distill").get<DistillConfig>();
    r.init_seed = j.at("init_seed").get<std::uint64_t>();
    r.data_seeds = j.at("data_seeds").get<std::vector<std::uint64_t>>();
    r.accuracies = j.at("accuracies").get<std::vector<double>>();
    r.stats = j.at("stats").get<SummaryStats>();
    r.failures = j.at("failures").get<std::vector<std::string>>();
}

// ----------------------------- files -----------------------------

namespace detail {

inline std::string fmt_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::mutex& path_mutex(const std::string& path) {
    static std::mutex registry_mu;
    static std::map<std::string, std::unique_ptr<std::mutex>> registry;
    std::lock_guard<std::mutex> lock(registry_mu);
    auto& m = registry[path];
    if (!m) m = std::make_unique<std::mutex>();
    return *m;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::lock_guard<std::mutex> lock(path_mutex(path.string()));
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open for writing: " + path.string());
    os << text;
    if (!os) throw IoError("write failed: " + path.string());
}

inline std::filesystem::path ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
    return std::filesystem::path(dir);
}

inline json read_json(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open for reading: " + path.string());
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

}  // namespace detail

/// One row per epoch.
inline std::string curve_csv(const RunReport& r) {
    std::string s = "epoch,test_error,test_accuracy,ce_loss,mse_loss,lr,dev_accuracy\n";
    for (const auto& p : r.curve) {
        s += std::to_string(p.epoch) + "," + detail::fmt_real(p.test_error) + "," + detail::fmt_real(p.test_accuracy) +
             "," + detail::fmt_real(p.ce_loss) + "," + detail::fmt_real(p.mse_loss) + "," + detail::fmt_real(p.lr) + "," +
             (p.dev_accuracy ? detail::fmt_real(*p.dev_accuracy) : std::string()) + "\n";
    }
    return s;
}

/// One row per optimizer step, CE and MSE components in separate columns.
inline std::string steps_csv(const RunReport& r) {
    std::string s = "step,ce_loss,mse_loss,lr\n";
    for (const auto& p : r.steps) {
        s += std::to_string(p.step) + "," + detail::fmt_real(p.ce_loss) + "," + detail::fmt_real(p.mse_loss) + "," +
             detail::fmt_real(p.lr) + "\n";
    }
    return s;
}

inline std::string sweep_csv(const SweepTable& t) {
    std::string s = std::string(to_string(t.axis)) + ",seed,accuracy,error,status\n";
    for (const auto& c : t.cells) {
        for (std::size_t i = 0; i < c.seeds.size(); ++i) {
            s += c.value + "," + std::to_string(c.seeds[i]) + ",";
            if (c.accuracy[i]) {
                s += detail::fmt_real(*c.accuracy[i]) + "," + detail::fmt_real(*c.error[i]) + ",ok\n";
            } else {
                s += ",,failed\n";
            }
        }
    }
    return s;
}

inline std::string stability_csv(const std::vector<StabilityResult>& rs) {
    std::string s = "strategy,data_seed,accuracy\n";
    for (const auto& r : rs)
        for (std::size_t i = 0; i < r.accuracies.size(); ++i)
            s += r.strategy + "," + std::to_string(r.data_seeds[i]) + "," + detail::fmt_real(r.accuracies[i]) + "\n";
    return s;
}

/// report.json, curve.csv and steps.csv under `dir`.
inline void emit_report(const RunReport& r, const std::string& dir) {
    auto d = detail::ensure_dir(dir);
    detail::write_text(d / "report.json", json(r).dump(2) + "\n");
    detail::write_text(d / "curve.csv", curve_csv(r));
    detail::write_text(d / "steps.csv", steps_csv(r));
}

inline RunReport read_report(const std::string& dir) {
    auto p = std::filesystem::path(dir);
    if (std::filesystem::is_directory(p)) p /= "report.json";
    try {
        return detail::read_json(p).get<RunReport>();
    } catch (const json::exception& e) {
        throw IoError("not a run report: " + p.string() + ": " + e.what());
    }
}

inline void emit_sweep(const SweepTable& t, const std::string& dir) {
    auto d = detail::ensure_dir(dir);
    detail::write_text(d / "sweep.json", json(t).dump(2) + "\n");
    detail::write_text(d / "sweep.csv", sweep_csv(t));
}

inline SweepTable read_sweep(const std::string& path) { return detail::read_json(path).get<SweepTable>(); }

inline void emit_stability(const std::vector<StabilityResult>& rs, const std::string& dir) {
    auto d = detail::ensure_dir(dir);
    detail::write_text(d / "stability.json", json(rs).dump(2) + "\n");
    detail::write_text(d / "stability.csv", stability_csv(rs));
}

inline std::vector<StabilityResult> read_stability(const std::string& path) {
    return detail::read_json(path).get<std::vector<StabilityResult>>();
}

inline void emit_ensemble(const EnsembleReport& r, const std::string& dir) {
    auto d = detail::ensure_dir(dir);
    detail::write_text(d / "ensemble.json", json(r).dump(2) + "\n");
    for (std::size_t i = 0; i < r.members.size(); ++i) {
        emit_report(r.members[i], (d / ("member" + std::to_string(i))).string());
    }
}

inline EnsembleReport read_ensemble(const std::string& path) { return detail::read_json(path).get<EnsembleReport>(); }

}  // namespace sdft
