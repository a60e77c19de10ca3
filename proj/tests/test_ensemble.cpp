#include <gtest/gtest.h>

#include <random>

#include "test_support.hpp"

using namespace sdft;
using namespace sdft::testing;

namespace {

// Straight textbook mean, summed in order then divided.
ParameterSet<double> brute_mean(const std::vector<ParameterSet<double>>& sets) {
    ParameterSet<double> out = sets.front().zeros_like();
    for (const auto& s : sets) {
        auto it = s.begin();
        for (auto& [_, p] : out) {
            for (std::size_t i = 0; i < p.value.size(); ++i) p.value[i] += it->second.value[i];
            ++it;
        }
    }
    out.scale(1.0 / double(sets.size()));
    return out;
}

double max_diff(const ParameterSet<double>& a, const ParameterSet<double>& b) {
    double d = 0;
    auto it = b.begin();
    for (const auto& [_, p] : a) {
        d = std::max(d, max_abs_diff(p.value, it->second.value));
        ++it;
    }
    return d;
}

}  // namespace

TEST(AverageParameters, MatchesBruteForceMean) {
    std::mt19937_64 rng(1);
    for (std::size_t k : {1u, 2u, 3u, 7u}) {
        std::vector<ParameterSet<double>> sets;
        for (std::size_t i = 0; i < k; ++i) sets.push_back(random_set(rng));
        EXPECT_LT(max_diff(average_parameters(sets), brute_mean(sets)), 1e-14) << "k=" << k;
    }
}

TEST(AverageParameters, IdenticalInputsReproduceExactly) {
    std::mt19937_64 rng(2);
    const auto s = random_set(rng, 3.7);
    for (std::size_t k : {1u, 2u, 3u, 5u, 10u}) {
        std::vector<ParameterSet<double>> sets(k, s);
        EXPECT_EQ(average_parameters(sets), s) << "k=" << k;
    }
}

TEST(AverageParameters, KeepsGroupsAndDecayFlags) {
    std::mt19937_64 rng(3);
    std::vector<ParameterSet<double>> sets{random_set(rng), random_set(rng)};
    const auto avg = average_parameters(sets);
    EXPECT_EQ(avg.at("head.weight").group, ParamGroup::head);
    EXPECT_FALSE(avg.at("a.bias").decay);
}

TEST(AverageParameters, RejectsEmptyAndIncompatible) {
    std::mt19937_64 rng(4);
    EXPECT_THROW(average_parameters(std::vector<ParameterSet<double>>{}), ContractError);
    auto a = random_set(rng);
    ParameterSet<double> b;
    b.add("a.weight", random_tensor({3, 4}, rng), ParamGroup::encoder, true);
    EXPECT_THROW(average_parameters(std::vector<ParameterSet<double>>{a, b}), ShapeError);
    ParameterSet<double> c;
    c.add("a.weight", random_tensor({4, 3}, rng), ParamGroup::encoder, true);
    c.add("a.bias", random_tensor({1, 4}, rng), ParamGroup::encoder, false);
    c.add("head.weight", random_tensor({2, 4}, rng), ParamGroup::head, true);
    EXPECT_THROW(average_parameters(std::vector<ParameterSet<double>>{a, c}), ShapeError);
}

TEST(CheckpointRing, FifoEvictionAndWarmIn) {
    std::mt19937_64 rng(5);
    CheckpointRing<double> ring(3);
    EXPECT_TRUE(ring.empty());
    EXPECT_THROW(ring.window_mean(), ContractError);
    std::vector<ParameterSet<double>> pushed;
    for (int i = 0; i < 7; ++i) {
        pushed.push_back(random_set(rng));
        ring.push(pushed.back());
        EXPECT_EQ(ring.size(), std::min<std::size_t>(i + 1, 3));
        // The ring holds exactly the most recent min(i+1, 3) snapshots, oldest first.
        const std::size_t first = pushed.size() - ring.size();
        for (std::size_t j = 0; j < ring.size(); ++j) EXPECT_EQ(ring.entries()[j], pushed[first + j]);
        std::vector<ParameterSet<double>> window(pushed.begin() + first, pushed.end());
        EXPECT_LT(max_diff(ring.window_mean(), brute_mean(window)), 1e-14);
    }
    EXPECT_EQ(ring.pushes(), 7u);
    EXPECT_THROW(CheckpointRing<double>(0), ConfigError);
}

TEST(CheckpointRing, RejectsIncompatibleSnapshot) {
    std::mt19937_64 rng(6);
    CheckpointRing<double> ring(2);
    ring.push(random_set(rng));
    ParameterSet<double> other;
    other.add("z.weight", random_tensor({1, 1}, rng), ParamGroup::encoder, true);
    EXPECT_THROW(ring.push(other), ShapeError);
}

TEST(RunningMean, MatchesBruteForceMeanAtEveryStep) {
    std::mt19937_64 rng(7);
    RunningMean<double> rm;
    EXPECT_THROW(rm.value(), ContractError);
    std::vector<ParameterSet<double>> seen;
    for (int i = 0; i < 200; ++i) {
        seen.push_back(random_set(rng));
        rm.update(seen.back());
        const auto ref = brute_mean(seen);
        double worst = 0;
        auto it = ref.begin();
        for (const auto& [_, p] : rm.value()) {
            for (std::size_t j = 0; j < p.value.size(); ++j) {
                worst = std::max(worst, std::abs(p.value[j] - it->second.value[j]) / std::max(1e-3, std::abs(it->second.value[j])));
            }
            ++it;
        }
        ASSERT_LT(worst, 1e-9) << "step " << i;
    }
    EXPECT_EQ(rm.count(), 200u);
}

TEST(RunningMean, SingleSnapshotIsExact) {
    std::mt19937_64 rng(8);
    const auto s = random_set(rng);
    RunningMean<double> rm;
    rm.update(s);
    EXPECT_EQ(rm.value(), s);
}

TEST(VotedPredict, SumsMemberProbabilities) {
    const auto m = tiny_model();
    std::mt19937_64 rng(9);
    const Batch b = random_batch(m, 7, 9, rng);
    EnsembleSet<double> ens{m, {}};
    for (std::uint64_t s = 1; s <= 3; ++s) {
        auto p = init_params<double>(m, s);
        p.tensor("head.weight").storage()[s] += 2.0;
        ens.members.push_back(p);
    }
    const auto vote = voted_predict(ens, b);
    Tensor<double> ref = predict_proba(m, ens.members[0], b);
    for (std::size_t k = 1; k < 3; ++k) {
        const auto pk = predict_proba(m, ens.members[k], b);
        for (std::size_t i = 0; i < ref.size(); ++i) ref[i] += pk[i];
    }
    EXPECT_LT(max_abs_diff(vote.summed_proba, ref), 1e-12);
    EXPECT_EQ(vote.labels, argmax_rows(ref));
    for (std::size_t r = 0; r < b.size; ++r) {
        double s = 0;
        for (std::size_t c = 0; c < m.n_classes; ++c) s += vote.summed_proba(r, c);
        EXPECT_NEAR(s, 3.0, 1e-9);
    }
}

TEST(VotedPredict, IdenticalMembersMatchSingleModel) {
    const auto m = tiny_model();
    std::mt19937_64 rng(10);
    const Batch b = random_batch(m, 6, 8, rng);
    auto p = init_params<double>(m, 4);
    p.tensor("head.weight").storage()[1] += 1.5;
    EnsembleSet<double> ens{m, std::vector<ParameterSet<double>>(4, p)};
    const auto single = argmax_rows(logits(m, p, b));
    EXPECT_EQ(voted_predict(ens, b).labels, single);
    EXPECT_EQ(argmax_rows(logits(m, average_parameters(ens.members), b)), single);
}

TEST(VotedPredict, EmptyEnsembleRejected) {
    EnsembleSet<double> ens{tiny_model(), {}};
    std::mt19937_64 rng(11);
    EXPECT_THROW(voted_predict(ens, random_batch(ens.config, 2, 4, rng)), ContractError);
}
