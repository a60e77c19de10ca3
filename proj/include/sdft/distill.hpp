#pragma once

// Fine-tuning loop with optional self-distillation.
//
// baseline  loss = CE(student, y)
// SDA       loss = CE(student, y) + lambda * MSE(student logits, logits of the
//                  parameter-averaged recent students)
// SDV       loss = CE(student, y) + lambda * MSE(student logits, mean logits of
//                  the recent students)
//
// The teacher state is seeded with the initial parameters and absorbs a fresh
// copy of the student after every `snapshot_every` optimizer steps, so a
// teacher exists from the first step on.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <vector>

#include "sdft/autodiff.hpp"
#include "sdft/config.hpp"
#include "sdft/encoder.hpp"
#include "sdft/ensemble.hpp"
#include "sdft/optim.hpp"
#include "sdft/report.hpp"

namespace sdft {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Optimizer steps for a run: epochs * ceil(ceil(n / micro_batch) / accum_steps).
inline std::size_t total_optimizer_steps(std::size_t n_train, const TrainConfig& tc) {
    const std::size_t micro = (n_train + tc.micro_batch - 1) / tc.micro_batch;
    return tc.epochs * ((micro + tc.accum_steps - 1) / tc.accum_steps);
}

template <typename Real>
struct LossParts {
    Var<Real> total;
    double ce = 0;
    double mse = 0;
};

/// CE(student, labels) + lambda * MSE(student, teacher). The teacher logits must be a constant.
template <typename Real>
LossParts<Real> sda_loss(Var<Real> student_logits, Var<Real> teacher_logits, const std::vector<int>& labels,
                         double lambda) {
    if (!(lambda >= 0.0)) throw ConfigError("distillation weight lambda must be >= 0");
    if (teacher_logits.requires_grad()) throw UsageError("teacher logits must be a constant on the student tape");
    Var<Real> ce = cross_entropy(student_logits, labels);
    Var<Real> m = mse(student_logits, teacher_logits);
    LossParts<Real> out;
    out.total = add(ce, scale(m, static_cast<Real>(lambda)));
    out.ce = static_cast<double>(ce.value().item());
    out.mse = static_cast<double>(m.value().item());
    return out;
}

struct StepMetrics {
    double ce = 0;
    double mse = 0;
    double total = 0;
    bool stepped = false;  // an optimizer update happened after this micro-batch
    double lr = 0;         // encoder-group rate of that update
};

template <typename Real>
struct TrainState {
    ModelConfig model;
    DistillConfig distill;
    TrainConfig train;

    ParameterSet<Real> student;
    OptimState<Real> optim;
    std::size_t step = 0;
    std::size_t total_steps = 0;

    std::optional<CheckpointRing<Real>> ring;    // SDA(K) and SDV(K)
    std::optional<RunningMean<Real>> all_mean;   // SDA(all)
    std::optional<ParameterSet<Real>> teacher_params;  // cached SDA teacher
    RunningMean<Real> self_ensemble;             // mean of every post-update student

    Rng dropout_rng;
    std::vector<Gradients<Real>> pending;
    double window_ce = 0, window_mse = 0;
    RunCounters counters;
};

template <typename Real>
void refresh_teacher(TrainState<Real>& st) {
    if (st.distill.mode != Mode::sda) return;
    st.teacher_params = st.distill.teacher_all() ? st.all_mean->value() : st.ring->window_mean();
}

template <typename Real>
TrainState<Real> make_train_state(const ModelConfig& model, const DistillConfig& distill, const TrainConfig& train,
                                  std::size_t total_steps, ParameterSet<Real> initial) {
    model.validate();
    distill.validate();
    train.validate();
    TrainState<Real> st;
    st.model = model;
    st.distill = distill;
    st.train = train;
    st.student = std::move(initial);
    st.optim = make_optim_state(st.student, train.optim, total_steps);
    st.total_steps = total_steps;
    st.dropout_rng.seed(splitmix64(train.init_seed ^ 0xd509f0a1u));
    if (distill.mode != Mode::baseline) {
        if (distill.teacher_all()) {
            st.all_mean.emplace();
            st.all_mean->update(st.student);
        } else {
            st.ring.emplace(distill.teacher_size);
            st.ring->push(st.student);
        }
        refresh_teacher(st);
    }
    return st;
}

template <typename Real>
TrainState<Real> make_train_state(const ModelConfig& model, const DistillConfig& distill, const TrainConfig& train,
                                  std::size_t total_steps) {
    return make_train_state(model, distill, train, total_steps, init_params<Real>(model, train.init_seed));
}

/// Parameter-averaged teacher: window mean for K, running mean for all.
template <typename Real>
const ParameterSet<Real>& sda_teacher(const TrainState<Real>& st) {
    if (st.distill.mode != Mode::sda || !st.teacher_params) throw UsageError("sda_teacher called outside SDA mode");
    return *st.teacher_params;
}

/// Mean of eval-mode logits of every retained snapshot, as x1 + (1/K) sum (x_k - x1).
template <typename Real>
Tensor<Real> sdv_teacher_logits(TrainState<Real>& st, const Batch& batch) {
    if (st.distill.mode != Mode::sdv || !st.ring) throw UsageError("sdv_teacher_logits called outside SDV mode");
    if (st.ring->empty()) throw ContractError("SDV teacher ring is empty");
    const auto& entries = st.ring->entries();
    Tensor<Real> first = logits(st.model, entries.front(), batch);
    ++st.counters.teacher_forwards;
    if (entries.size() == 1) return first;
    Tensor<Real> delta(first.shape());
    for (std::size_t k = 1; k < entries.size(); ++k) {
        Tensor<Real> lk = logits(st.model, entries[k], batch);
        ++st.counters.teacher_forwards;
        for (std::size_t i = 0; i < lk.size(); ++i) delta[i] += lk[i] - first[i];
    }
    axpy(Real(1) / Real(entries.size()), delta, first);
    return first;
}

/// Applies the accumulated update and lets the teacher absorb the new student.
template <typename Real>
double apply_update(TrainState<Real>& st) {
    if (st.pending.empty()) return 0.0;
    Gradients<Real> g = accumulate(st.pending);
    st.pending.clear();
    const double lr = adamw_step(st.student, g, st.optim);
    ++st.step;
    ++st.counters.optimizer_steps;
    st.self_ensemble.update(st.student);
    if (st.distill.mode != Mode::baseline && st.step % st.distill.snapshot_every == 0) {
        if (st.all_mean) {
            st.all_mean->update(st.student);
        } else {
            st.ring->push(st.student);
        }
        refresh_teacher(st);
    }
    return lr;
}

/// One micro-batch: teacher signal, student forward in train mode, loss,
/// backward, accumulation, and an optimizer update on the accumulation boundary.
template <typename Real>
StepMetrics train_step(TrainState<Real>& st, const Batch& batch) {
    std::optional<Tensor<Real>> teacher;
    if (st.distill.mode == Mode::sda) {
        teacher = logits(st.model, sda_teacher(st), batch);
        ++st.counters.teacher_forwards;
    } else if (st.distill.mode == Mode::sdv) {
        teacher = sdv_teacher_logits(st, batch);
    }

    Tape<Real> tape;
    ForwardOptions opt;
    opt.train_mode = true;
    opt.rng = &st.dropout_rng;
    Var<Real> student = classify(st.model, st.student, batch, tape, opt);
    ++st.counters.student_forwards;

    StepMetrics m;
    Var<Real> loss;
    if (teacher) {
        auto parts = sda_loss(student, tape.constant(std::move(*teacher)), batch.labels, st.distill.lambda);
        loss = parts.total;
        m.ce = parts.ce;
        m.mse = parts.mse;
    } else {
        loss = cross_entropy(student, batch.labels);
        m.ce = static_cast<double>(loss.value().item());
    }
    m.total = static_cast<double>(loss.value().item());
    if (!std::isfinite(m.total)) {
        std::ostringstream os;
        os << "non-finite loss at optimizer step " << st.step + 1 << " (ce=" << m.ce << ", mse=" << m.mse << ")";
        throw DivergenceError(os.str());
    }
    st.pending.push_back(tape.backward(loss));
    st.window_ce += m.ce;
    st.window_mse += m.mse;
    if (st.pending.size() == st.train.accum_steps) {
        m.lr = apply_update(st);
        m.stepped = true;
    }
    return m;
}

/// Train, optional dev, and test splits, already tokenized.
struct PreparedData {
    Vocab vocab;
    EncodedSplit train;
    EncodedSplit test;
    std::optional<EncodedSplit> dev;
};

template <typename Real>
struct FineTuneResult {
    ParameterSet<Real> student;
    std::optional<ParameterSet<Real>> teacher;
    std::optional<ParameterSet<Real>> self_ensemble;
    RunReport report;
};

/// Epoch-level training loop with per-epoch test evaluation.
template <typename Real>
FineTuneResult<Real> fine_tune(const ModelConfig& model, const DistillConfig& distill, const TrainConfig& train,
                               const PreparedData& data) {
    if (data.train.empty()) throw InputError("training split is empty");
    if (data.test.empty()) throw InputError("test split is empty");
    if (data.train.n_classes != model.n_classes) {
        throw ConfigError("model has " + std::to_string(model.n_classes) + " classes but the data has " +
                          std::to_string(data.train.n_classes));
    }
    const auto t0 = std::chrono::steady_clock::now();
    const std::size_t n = data.train.size();
    const std::size_t total = total_optimizer_steps(n, train);
    TrainState<Real> st = make_train_state<Real>(model, distill, train, total);

    FineTuneResult<Real> res;
    RunReport& rep = res.report;
    rep.config = json{{"model", model}, {"distill", distill}, {"train", train}, {"total_steps", total},
                      {"n_train", n},   {"n_test", data.test.size()}};

    std::optional<double> best_dev;
    std::optional<ParameterSet<Real>> best_params;
    double last_lr = 0.0;
    for (std::size_t epoch = 1; epoch <= train.epochs; ++epoch) {
        const auto order = shuffle_with_seed(n, splitmix64(train.data_seed * 1000003ULL + epoch));
        double ce_sum = 0, mse_sum = 0;
        std::size_t micro = 0;
        std::size_t in_window = 0;
        for (std::size_t b = 0; b < n; b += train.micro_batch) {
            const std::size_t e = std::min(n, b + train.micro_batch);
            Batch batch = make_batch(data.train, std::span<const std::size_t>(order.data() + b, e - b));
            StepMetrics m = train_step(st, batch);
            ce_sum += m.ce;
            mse_sum += m.mse;
            ++micro;
            ++in_window;
            if (m.stepped) {
                last_lr = m.lr;
                rep.steps.push_back(StepPoint{st.step, st.window_ce / double(in_window), st.window_mse / double(in_window), m.lr});
                st.window_ce = st.window_mse = 0;
                in_window = 0;
            }
        }
        if (!st.pending.empty()) {
            last_lr = apply_update(st);
            rep.steps.push_back(StepPoint{st.step, st.window_ce / double(in_window), st.window_mse / double(in_window), last_lr});
            st.window_ce = st.window_mse = 0;
        }
        CurvePoint cp;
        cp.epoch = epoch;
        const EvalMetrics em = evaluate(model, st.student, data.test, train.eval_batch, &st.counters.eval_forwards);
        cp.test_error = em.error;
        cp.test_accuracy = em.accuracy;
        cp.ce_loss = ce_sum / double(micro);
        cp.mse_loss = mse_sum / double(micro);
        cp.lr = last_lr;
        if (data.dev) {
            cp.dev_accuracy = evaluate(model, st.student, *data.dev, train.eval_batch, &st.counters.eval_forwards).accuracy;
            if (train.selection == Selection::best_dev && (!best_dev || *cp.dev_accuracy > *best_dev)) {
                best_dev = cp.dev_accuracy;
                best_params = st.student;
                rep.selected_epoch = epoch;
            }
        }
        rep.curve.push_back(cp);
    }

    res.student = best_params ? std::move(*best_params) : st.student;
    rep.student = evaluate(model, res.student, data.test, train.eval_batch, &st.counters.eval_forwards);
    if (st.distill.mode == Mode::sda) {
        res.teacher = sda_teacher(st);
        rep.teacher = evaluate(model, *res.teacher, data.test, train.eval_batch, &st.counters.eval_forwards);
    }
    if (st.self_ensemble.count() > 0) {
        res.self_ensemble = st.self_ensemble.value();
        rep.self_ensemble = evaluate(model, *res.self_ensemble, data.test, train.eval_batch, &st.counters.eval_forwards);
    }
    rep.counters = st.counters;
    rep.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return res;
}

}  // namespace sdft
