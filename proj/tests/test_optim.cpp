#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "test_support.hpp"

using namespace sdft;
using namespace sdft::testing;

TEST(LrSchedule, WarmupPeakAndDecay) {
    // 100 steps, 10% warmup, base 1.0
    EXPECT_EQ(lr_at(0, 100, 1.0, 0.1), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(5, 100, 1.0, 0.1), 0.5);
    EXPECT_DOUBLE_EQ(lr_at(10, 100, 1.0, 0.1), 1.0);
    EXPECT_DOUBLE_EQ(lr_at(55, 100, 1.0, 0.1), 0.5);
    EXPECT_EQ(lr_at(100, 100, 1.0, 0.1), 0.0);
    EXPECT_DOUBLE_EQ(lr_at(10, 100, 3e-5, 0.1), 3e-5);
}

TEST(LrSchedule, NoWarmupStartsAtBase) {
    EXPECT_DOUBLE_EQ(lr_at(0, 50, 2.0, 0.0), 2.0);
    EXPECT_DOUBLE_EQ(lr_at(25, 50, 2.0, 0.0), 1.0);
}

TEST(LrSchedule, NonNegativeAndUnimodal) {
    for (std::size_t total : {1u, 7u, 40u, 333u}) {
        for (double wp : {0.0, 0.1, 0.37, 0.9}) {
            double prev = -1;
            bool falling = false;
            for (std::size_t s = 0; s <= total; ++s) {
                const double lr = lr_at(s, total, 1.0, wp);
                EXPECT_GE(lr, 0.0);
                EXPECT_LE(lr, 1.0 + 1e-12);
                if (lr < prev - 1e-15) falling = true;
                if (falling) {
                    EXPECT_LE(lr, prev + 1e-15) << "total=" << total << " wp=" << wp << " s=" << s;
                }
                prev = lr;
            }
        }
    }
}

TEST(LrSchedule, PastEndClampsToZeroAndBadWarmupThrows) {
    ::testing::internal::CaptureStderr();
    EXPECT_EQ(lr_at(101, 100, 1.0, 0.1), 0.0);
    EXPECT_NE(::testing::internal::GetCapturedStderr().find("warning"), std::string::npos);
    EXPECT_EQ(lr_at(0, 0, 1.0, 0.1), 0.0);
    EXPECT_THROW(lr_at(1, 10, 1.0, 1.0), ConfigError);
    EXPECT_THROW(lr_at(1, 10, 1.0, -0.1), ConfigError);
}

namespace {

ParameterSet<double> scalar_param(double x0, ParamGroup group = ParamGroup::encoder, bool decay = true) {
    ParameterSet<double> p;
    Tensor<double> t({1, 1});
    t[0] = x0;
    p.add("x.weight", t, group, decay);
    return p;
}

Gradients<double> scalar_grad(double g) {
    Gradients<double> out;
    Tensor<double> t({1, 1});
    t[0] = g;
    out.emplace("x.weight", t);
    return out;
}

}  // namespace

TEST(AdamW, MatchesHandWrittenRecurrenceOnQuadratic) {
    // f(x) = 0.5 * a * (x - b)^2 with the schedule applied, 100 steps.
    const double a = 3.0, b = -1.5;
    AdamWConfig cfg;
    cfg.lr_encoder = 0.05;
    cfg.weight_decay = 0.01;
    cfg.warmup_prop = 0.1;
    const std::size_t total = 100;

    auto p = scalar_param(2.0);
    auto st = make_optim_state(p, cfg, total);

    double x = 2.0, m = 0, v = 0;
    for (std::size_t t = 1; t <= total; ++t) {
        const double g_ref = a * (x - b);
        m = cfg.beta1 * m + (1 - cfg.beta1) * g_ref;
        v = cfg.beta2 * v + (1 - cfg.beta2) * g_ref * g_ref;
        const double mhat = m / (1 - std::pow(cfg.beta1, double(t)));
        const double vhat = v / (1 - std::pow(cfg.beta2, double(t)));
        const double warm = 0.1 * total;
        const double f = double(t) < warm ? double(t) / warm : (double(total) - double(t)) / (double(total) - warm);
        const double lr = cfg.lr_encoder * f;
        x = x * (1 - lr * cfg.weight_decay) - lr * mhat / (std::sqrt(vhat) + cfg.eps);

        const double g = a * (p.tensor("x.weight")[0] - b);
        const double applied = adamw_step(p, scalar_grad(g), st);
        EXPECT_NEAR(applied, lr, 1e-15);
        ASSERT_NEAR(p.tensor("x.weight")[0], x, 1e-10) << "step " << t;
    }
    EXPECT_EQ(st.step, total);
}

TEST(AdamW, ConvergesOnQuadraticWithoutSchedule) {
    AdamWConfig cfg;
    cfg.weight_decay = 0.0;
    auto p = scalar_param(5.0);
    auto st = make_optim_state(p, cfg, 1000);
    for (int i = 0; i < 1000; ++i) adamw_update(p, scalar_grad(2 * (p.tensor("x.weight")[0] - 1.0)), st, 0.05, 0.05);
    EXPECT_NEAR(p.tensor("x.weight")[0], 1.0, 1e-3);
}

TEST(AdamW, GroupsUseTheirOwnRate) {
    ParameterSet<double> p;
    Tensor<double> one({1, 1});
    one[0] = 1.0;
    p.add("enc.weight", one, ParamGroup::encoder, false);
    p.add("head.weight", one, ParamGroup::head, false);
    Gradients<double> g;
    g.emplace("enc.weight", one);
    g.emplace("head.weight", one);
    auto st = make_optim_state(p, AdamWConfig{}, 10);
    adamw_update(p, g, st, 0.0, 0.1);
    EXPECT_EQ(p.tensor("enc.weight")[0], 1.0);
    // First Adam step moves by lr * g / (|g| + eps).
    EXPECT_NEAR(p.tensor("head.weight")[0], 1.0 - 0.1 / (1.0 + 1e-8), 1e-12);
}

TEST(AdamW, DecayFlagControlsDecoupledShrinkage) {
    AdamWConfig cfg;
    cfg.weight_decay = 0.5;
    for (bool decay : {true, false}) {
        auto p = scalar_param(2.0, ParamGroup::encoder, decay);
        auto st = make_optim_state(p, cfg, 10);
        adamw_update(p, scalar_grad(0.0), st, 0.1, 0.1);
        EXPECT_DOUBLE_EQ(p.tensor("x.weight")[0], decay ? 2.0 * (1 - 0.1 * 0.5) : 2.0);
    }
}

TEST(AdamW, RejectsMismatchedGradients) {
    auto p = scalar_param(1.0);
    auto st = make_optim_state(p, AdamWConfig{}, 10);
    Gradients<double> wrong;
    wrong.emplace("y.weight", Tensor<double>({1, 1}));
    EXPECT_THROW(adamw_step(p, wrong, st), ContractError);
    Gradients<double> shape;
    shape.emplace("x.weight", Tensor<double>({1, 2}));
    EXPECT_THROW(adamw_step(p, shape, st), ShapeError);
    AdamWConfig bad;
    bad.beta1 = 1.0;
    EXPECT_THROW(make_optim_state(p, bad, 10), ConfigError);
}

TEST(Accumulate, IsElementwiseMean) {
    std::mt19937_64 rng(1);
    std::vector<Gradients<double>> micro;
    for (int k = 0; k < 3; ++k) {
        Gradients<double> g;
        g.emplace("a", random_tensor({2, 3}, rng));
        g.emplace("b", random_tensor({1, 3}, rng));
        micro.push_back(g);
    }
    const auto acc = accumulate(micro);
    for (const auto& name : {"a", "b"}) {
        const auto& t = acc.at(name);
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double ref = (micro[0].at(name)[i] + micro[1].at(name)[i] + micro[2].at(name)[i]) / 3.0;
            EXPECT_NEAR(t[i], ref, 1e-15);
        }
    }
    EXPECT_EQ(accumulate(std::vector<Gradients<double>>{micro[0]}), micro[0]);
    EXPECT_THROW(accumulate(std::vector<Gradients<double>>{}), ContractError);
}

TEST(Accumulate, EqualMicroBatchesMatchFullBatchGradient) {
    ModelConfig m = tiny_model();
    m.dropout_p = 0.0;
    const auto p = init_params<double>(m, 3);
    std::mt19937_64 rng(2);
    const Batch full = random_batch(m, 6, 8, rng);
    EncodedSplit split;
    split.n_classes = 3;
    split.max_len = full.seq_len;
    for (std::size_t r = 0; r < full.size; ++r) {
        EncodedExample e;
        e.ids.assign(full.seq_len, kPad);
        for (std::size_t k = 0; k < full.seq_len; ++k) {
            if (full.real(r, k)) {
                e.ids[k] = full.id(r, k);
                ++e.length;
            }
        }
        e.label = full.labels[r];
        split.examples.push_back(e);
    }
    auto grad_of = [&](const Batch& b) {
        Tape<double> t;
        return t.backward(cross_entropy(classify(m, p, b, t), b.labels));
    };
    const auto whole = grad_of(make_batch(split, 0, 6));
    const auto acc = accumulate(std::vector<Gradients<double>>{grad_of(make_batch(split, 0, 3)), grad_of(make_batch(split, 3, 6))});
    for (const auto& [name, t] : whole) {
        EXPECT_LT(max_abs_diff(t, acc.at(name)), 1e-12) << name;
    }
}
