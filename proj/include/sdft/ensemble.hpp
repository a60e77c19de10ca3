#pragma once

// Parameter- and prediction-level combination of models: voted and averaged
// ensembles, the sliding checkpoint window and the cumulative running mean.

#include <cstddef>
#include <deque>
#include <iterator>
#include <type_traits>
#include <vector>

#include "sdft/encoder.hpp"
#include "sdft/params.hpp"

namespace sdft {

/// Elementwise arithmetic mean, computed as x1 + (1/K) * sum_k (x_k - x1) so
/// that identical inputs reproduce themselves bit for bit.
template <typename Range>
auto average_parameters(const Range& sets) {
    using Real = typename std::decay_t<decltype(*std::begin(sets))>::real_type;
    auto first = std::begin(sets);
    auto last = std::end(sets);
    if (first == last) throw ContractError("average_parameters: empty list");
    const ParameterSet<Real>& anchor = *first;
    std::size_t k = 0;
    for (auto it = first; it != last; ++it, ++k) anchor.require_compatible(*it, "average_parameters");
    ParameterSet<Real> out = anchor;
    if (k == 1) return out;
    ParameterSet<Real> delta = anchor.zeros_like();
    for (auto it = std::next(first); it != last; ++it) {
        auto a = anchor.begin();
        auto s = it->begin();
        for (auto& [_, d] : delta) {
            Real* ds = d.value.data();
            const Real* as = a->second.value.data();
            const Real* ss = s->second.value.data();
            for (std::size_t i = 0, n = d.value.size(); i < n; ++i) ds[i] += ss[i] - as[i];
            ++a, ++s;
        }
    }
    out.axpy(Real(1) / Real(k), delta);
    return out;
}

/// K independently fine-tuned models sharing one configuration.
template <typename Real>
struct EnsembleSet {
    ModelConfig config;
    std::vector<ParameterSet<Real>> members;

    void validate() const {
        if (members.empty()) throw ContractError("ensemble needs at least one member");
        for (const auto& m : members) members.front().require_compatible(m, "ensemble member");
    }
};

template <typename Real>
struct VoteResult {
    Tensor<Real> summed_proba;  // B x C, sum over members of predict_proba
    std::vector<int> labels;    // argmax of the sum, ties to the lowest class
};

template <typename Real>
VoteResult<Real> voted_predict(const EnsembleSet<Real>& models, const Batch& batch) {
    models.validate();
    VoteResult<Real> out;
    for (std::size_t k = 0; k < models.members.size(); ++k) {
        Tensor<Real> p = predict_proba(models.config, models.members[k], batch);
        if (k == 0) {
            out.summed_proba = std::move(p);
        } else {
            axpy(Real(1), p, out.summed_proba);
        }
    }
    out.labels = argmax_rows(out.summed_proba);
    return out;
}

/// FIFO window of the K most recent snapshots.
template <typename Real>
class CheckpointRing {
   public:
    explicit CheckpointRing(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw ConfigError("checkpoint ring capacity must be >= 1");
    }

    void push(ParameterSet<Real> snapshot) {
        if (!buffer_.empty()) buffer_.front().require_compatible(snapshot, "ring_push");
        buffer_.push_back(std::move(snapshot));
        if (buffer_.size() > capacity_) buffer_.pop_front();
        ++pushes_;
    }

    /// Mean of the snapshots currently held (fewer than K during warm-in).
    ParameterSet<Real> window_mean() const {
        if (buffer_.empty()) throw ContractError("window_mean of an empty checkpoint ring");
        return average_parameters(buffer_);
    }

    std::size_t capacity() const noexcept { return capacity_; }
    std::size_t size() const noexcept { return buffer_.size(); }
    bool empty() const noexcept { return buffer_.empty(); }
    std::size_t pushes() const noexcept { return pushes_; }
    const std::deque<ParameterSet<Real>>& entries() const noexcept { return buffer_; }

   private:
    std::size_t capacity_;
    std::deque<ParameterSet<Real>> buffer_;
    std::size_t pushes_ = 0;
};

/// Cumulative mean of every absorbed snapshot.
template <typename Real>
class RunningMean {
   public:
    void update(const ParameterSet<Real>& snapshot) {
        if (count_ == 0) {
            mean_ = snapshot;
        } else {
            mean_.require_compatible(snapshot, "running_mean_update");
            const Real w = Real(1) / Real(count_ + 1);
            auto s = snapshot.begin();
            for (auto& [_, p] : mean_) {
                Real* ms = p.value.data();
                const Real* ss = s->second.value.data();
                for (std::size_t i = 0, n = p.value.size(); i < n; ++i) ms[i] += (ss[i] - ms[i]) * w;
                ++s;
            }
        }
        ++count_;
    }

    const ParameterSet<Real>& value() const {
        if (count_ == 0) throw ContractError("running mean has absorbed no snapshots");
        return mean_;
    }
    std::size_t count() const noexcept { return count_; }

   private:
    ParameterSet<Real> mean_;
    std::size_t count_ = 0;
};

}  // namespace sdft
