#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "test_support.hpp"

using namespace sdft;
using namespace sdft::testing;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_experiment(Mode mode = Mode::sda) {
    ExperimentConfig cfg;
    cfg.model = tiny_model(80);
    cfg.distill.mode = mode;
    cfg.distill.teacher_size = 2;
    cfg.train = tiny_train(2);
    cfg.data.synthetic = tiny_spec(40, 20);
    cfg.data.synthetic_seed = 3;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    std::stringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

fs::path scratch(const std::string& name) {
    auto d = fs::temp_directory_path() / ("sdft_harness_" + name);
    fs::remove_all(d);
    return d;
}

std::size_t line_count(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Evaluate, ConstantPredictorScoresClassShare) {
    ModelConfig m = tiny_model();
    auto p = init_params<double>(m, 1);
    p.tensor("head.weight").fill(0.0);  // all logits tie, argmax picks class 0
    std::mt19937_64 rng(1);
    EncodedSplit split;
    split.n_classes = 3;
    split.max_len = m.max_len;
    for (int i = 0; i < 10; ++i) {
        const Batch one = random_batch(m, 1, 6, rng);
        EncodedExample e;
        e.ids.assign(m.max_len, kPad);
        for (std::size_t k = 0; k < one.seq_len; ++k) e.ids[k] = one.ids[k];
        e.length = one.seq_len;
        e.label = i < 4 ? 0 : 1 + i % 2;
        split.examples.push_back(e);
    }
    const auto em = evaluate(m, p, split, 3);
    EXPECT_DOUBLE_EQ(em.accuracy, 0.4);
    EXPECT_NEAR(em.accuracy + em.error, 1.0, 1e-12);
    EXPECT_EQ(em.correct, 4u);
    EXPECT_THROW(evaluate(m, p, EncodedSplit{}, 3), InputError);
    EXPECT_THROW(evaluate(m, p, split, 0), ConfigError);
}

TEST(Evaluate, BatchingInvariant) {
    ModelConfig m = tiny_model(80);
    const auto data = tiny_data(m, tiny_spec(30, 50));
    auto p = init_params<double>(m, 5);
    p.tensor("head.weight").storage()[2] += 2.0;
    const auto ref = predict_labels(m, p, data.test, 1);
    for (std::size_t bs : {2u, 7u, 64u}) {
        EXPECT_EQ(predict_labels(m, p, data.test, bs), ref);
        EXPECT_EQ(evaluate(m, p, data.test, bs), evaluate(m, p, data.test, 1));
    }
}

TEST(Stats, SummaryOracle) {
    const auto s = summarize({4.0, 1.0, 3.0, 2.0});
    EXPECT_EQ(s.n, 4u);
    EXPECT_DOUBLE_EQ(s.mean, 2.5);
    EXPECT_NEAR(s.stddev, 1.2909944487358056, 1e-15);
    EXPECT_EQ(s.min, 1.0);
    EXPECT_EQ(s.max, 4.0);
    EXPECT_DOUBLE_EQ(s.q1, 1.75);
    EXPECT_DOUBLE_EQ(s.median, 2.5);
    EXPECT_DOUBLE_EQ(s.q3, 3.25);
    EXPECT_EQ(summarize({7.0}).stddev, 0.0);
    EXPECT_THROW(summarize({}), ContractError);
}

TEST(Stats, AverageRelativeChange) {
    EXPECT_NEAR(average_relative_change({0.1, 0.2}, {0.09, 0.15}), 0.175, 1e-15);
    EXPECT_THROW(average_relative_change({0.1}, {}), ContractError);
    EXPECT_THROW(average_relative_change({0.0}, {0.1}), ContractError);
}

TEST(Config, ExperimentConfigJsonRoundTrip) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.distill.teacher_size = kTeacherAll;
    cfg.precision = Precision::f32;
    EXPECT_EQ(json(cfg).get<ExperimentConfig>(), cfg);

    // Only the active data source is serialized, so start the CSV case from a clean source.
    cfg.data = DataSource{};
    cfg.data.kind = DataKind::csv;
    cfg.data.train_path = "a.csv";
    cfg.data.test_path = "b.csv";
    cfg.data.schema.text_cols = {1, 2};
    cfg.data.schema.label_base = 1;
    cfg.data.subsample_per_class = 5;
    cfg.train.selection = Selection::best_dev;
    const json j = cfg;
    EXPECT_EQ(j.get<ExperimentConfig>(), cfg);
    EXPECT_EQ(json::parse(j.dump()).get<ExperimentConfig>(), cfg);
}

TEST(Config, RunSeedDrivesInitAndDataOrder) {
    const auto cfg = with_run_seed(tiny_experiment(), 42);
    EXPECT_EQ(cfg.train.init_seed, 42u);
    EXPECT_EQ(cfg.train.data_seed, 42u);
}

TEST(ParallelMap, OrderedResultsAndErrorPropagation) {
    auto sq = parallel_map(20, 4, [](std::size_t i) { return i * i; });
    for (std::size_t i = 0; i < 20; ++i) EXPECT_EQ(sq[i], i * i);
    EXPECT_THROW(parallel_map(5, 3, [](std::size_t i) -> int {
                     if (i == 3) throw InputError("boom");
                     return 0;
                 }),
                 InputError);
    EXPECT_TRUE(parallel_map(0, 2, [](std::size_t) { return 1; }).empty());
}

TEST(RunExperiment, SeparableDataGivesLowError) {
    ExperimentConfig cfg = tiny_experiment(Mode::baseline);
    cfg.model.dropout_p = 0.0;
    cfg.data.synthetic = tiny_spec(240, 60);
    cfg.data.synthetic.signal = 1.0;
    cfg.train.epochs = 5;
    const auto rep = run_experiment(cfg);
    EXPECT_TRUE(rep.ok());
    EXPECT_LT(rep.student.error, 0.05);
}

TEST(RunExperiment, ReportInvariantsAndConfigEcho) {
    const auto cfg = tiny_experiment();
    const auto rep = run_experiment(cfg);
    EXPECT_EQ(rep.curve.size(), cfg.train.epochs);
    EXPECT_NEAR(rep.student.accuracy + rep.student.error, 1.0, 1e-9);
    for (const auto& c : rep.curve) EXPECT_NEAR(c.test_accuracy + c.test_error, 1.0, 1e-9);
    EXPECT_FALSE(rep.wall_seconds.has_value());
    EXPECT_EQ(rep.config.at("train").get<TrainConfig>(), cfg.train);
    EXPECT_EQ(rep.config.at("data").get<DataSource>(), cfg.data);
    EXPECT_EQ(rep.config.at("precision"), "float64");

    ExperimentConfig timed = cfg;
    timed.record_timing = true;
    EXPECT_TRUE(run_experiment(timed).wall_seconds.has_value());
}

TEST(RunExperiment, Float32RunsAndDivergenceIsRecorded) {
    ExperimentConfig cfg = tiny_experiment();
    cfg.precision = Precision::f32;
    const auto rep = run_experiment(cfg);
    EXPECT_TRUE(rep.ok());
    EXPECT_EQ(rep.curve.size(), cfg.train.epochs);

    ExperimentConfig hot = tiny_experiment();
    hot.train.optim.lr_encoder = hot.train.optim.lr_head = 1e300;
    hot.train.optim.warmup_prop = 0.0;
    const auto bad = run_experiment(hot);
    EXPECT_EQ(bad.status, "diverged");
    EXPECT_NE(bad.diagnostic.find("non-finite"), std::string::npos);
}

TEST(Reports, FilesRoundTripAndAreDeterministic) {
    const auto cfg = tiny_experiment();
    const auto rep = run_experiment(cfg);
    const auto a = scratch("a"), b = scratch("b");
    emit_report(rep, a.string());
    emit_report(run_experiment(cfg), b.string());
    EXPECT_EQ(read_report(a.string()), rep);
    EXPECT_EQ(read_report((a / "report.json").string()), rep);
    for (const char* f : {"report.json", "curve.csv", "steps.csv"}) EXPECT_EQ(slurp(a / f), slurp(b / f)) << f;

    const std::string curve = slurp(a / "curve.csv");
    EXPECT_EQ(line_count(curve), cfg.train.epochs + 1);
    const std::string steps = slurp(a / "steps.csv");
    EXPECT_EQ(steps.substr(0, steps.find('\n')), "step,ce_loss,mse_loss,lr");
    EXPECT_EQ(line_count(steps), rep.steps.size() + 1);
    EXPECT_THROW(read_report((a / "missing").string()), IoError);
}

TEST(Ensemble, SingleAndIdenticalMembersMatchSingleModel) {
    const auto cfg = tiny_experiment(Mode::baseline);
    const auto data = prepare_data(cfg.data, cfg.model);
    const auto single = run_prepared(with_run_seed(cfg, 3), data);
    const auto one = ensemble_experiment(cfg, {3}, data);
    EXPECT_EQ(one.voted, single.student);
    EXPECT_EQ(one.averaged, single.student);
    const auto same = ensemble_experiment(cfg, {3, 3, 3}, data, 2);
    EXPECT_EQ(same.voted, single.student);
    EXPECT_EQ(same.averaged, single.student);
    EXPECT_EQ(same.max_member_error, single.student.error);
}

TEST(Ensemble, StreamingVoteMatchesMaterializedOracle) {
    const auto cfg = tiny_experiment(Mode::baseline);
    const auto data = prepare_data(cfg.data, cfg.model);
    const std::vector<std::uint64_t> seeds{1, 2, 3, 4};
    const auto ens = ensemble_experiment(cfg, seeds, data);

    // Oracle: whole-split probability tensors for each member, summed, argmaxed.
    const Batch all = make_batch(data.test, 0, data.test.size());
    Tensor<double> sum;
    double worst = 0;
    for (std::size_t i = 0; i < seeds.size(); ++i) {
        const auto c = with_run_seed(cfg, seeds[i]);
        const auto res = fine_tune<double>(c.model, c.distill, c.train, data);
        const auto p = predict_proba(cfg.model, res.student, all);
        if (i == 0) {
            sum = p;
        } else {
            for (std::size_t k = 0; k < p.size(); ++k) sum[k] += p[k];
        }
        worst = std::max(worst, res.report.student.error);
    }
    const auto oracle = score_predictions(argmax_rows(sum), gold_labels(data.test));
    EXPECT_EQ(ens.voted, oracle);
    EXPECT_EQ(ens.max_member_error, worst);
    EXPECT_LE(ens.voted.error, ens.max_member_error);

    const auto dir = scratch("ens");
    emit_ensemble(ens, dir.string());
    EXPECT_EQ(read_ensemble((dir / "ensemble.json").string()), ens);
    EXPECT_TRUE(fs::exists(dir / "member3" / "curve.csv"));
    EXPECT_THROW(ensemble_experiment(cfg, {}, data), ConfigError);
}

TEST(Sweep, LambdaZeroCellEqualsBaselineAndMeansRecompute) {
    const auto cfg = tiny_experiment(Mode::sda);
    const auto data = prepare_data(cfg.data, cfg.model);
    const std::vector<std::uint64_t> seeds{1, 2};
    const auto table = sweep(cfg, SweepAxis::lambda, {"0", "1"}, seeds, data, 2);
    ASSERT_EQ(table.cells.size(), 2u);
    ExperimentConfig base = cfg;
    base.distill.mode = Mode::baseline;
    for (std::size_t s = 0; s < seeds.size(); ++s) {
        const auto rep = run_prepared(with_run_seed(base, seeds[s]), data);
        EXPECT_EQ(*table.cells[0].accuracy[s], rep.student.accuracy);
    }
    for (const auto& c : table.cells) {
        double acc = 0, err = 0;
        for (std::size_t s = 0; s < seeds.size(); ++s) acc += *c.accuracy[s], err += *c.error[s];
        EXPECT_NEAR(*c.mean_accuracy, acc / 2.0, 1e-12);
        EXPECT_NEAR(*c.mean_error, err / 2.0, 1e-12);
        EXPECT_TRUE(c.failures.empty());
    }
    const auto dir = scratch("sweep");
    emit_sweep(table, dir.string());
    EXPECT_EQ(read_sweep((dir / "sweep.json").string()), table);
    EXPECT_EQ(line_count(slurp(dir / "sweep.csv")), 1 + 2 * seeds.size());
}

TEST(Sweep, SingleCellEqualsTheRunAndFailedCellsAreMarked) {
    ExperimentConfig cfg = tiny_experiment(Mode::sdv);
    const auto data = prepare_data(cfg.data, cfg.model);
    const auto table = sweep(cfg, SweepAxis::teacher_size, {"2", "all"}, {5}, data);
    const auto rep = run_prepared(with_run_seed(cfg, 5), data);
    EXPECT_EQ(*table.cells[0].mean_accuracy, rep.student.accuracy);
    EXPECT_TRUE(table.cells[1].failed());
    ASSERT_EQ(table.cells[1].failures.size(), 1u);
    EXPECT_NE(table.cells[1].failures[0].find("seed 5"), std::string::npos);
    EXPECT_NE(sweep_csv(table).find("all,5,,,failed"), std::string::npos);

    EXPECT_THROW(sweep(tiny_experiment(Mode::baseline), SweepAxis::lambda, {"1"}, {1}, data), ConfigError);
    EXPECT_THROW(sweep(cfg, SweepAxis::lambda, {}, {1}, data), ConfigError);
    EXPECT_THROW(apply_grid_value(cfg, SweepAxis::lambda, "abc"), ConfigError);
    EXPECT_THROW(apply_grid_value(cfg, SweepAxis::teacher_size, "0"), ConfigError);
}

TEST(Stability, FixedInitRepeatedSeedsAndRecomputableStats) {
    const auto cfg = tiny_experiment(Mode::baseline);
    const auto data = prepare_data(cfg.data, cfg.model);
    const std::vector<std::uint64_t> seeds{4, 4, 9};
    const auto serial = stability_study(cfg, seeds, 1, data, 1);
    const auto parallel = stability_study(cfg, seeds, 1, data, 3);
    EXPECT_EQ(serial, parallel);
    ASSERT_EQ(serial.size(), 4u);
    EXPECT_EQ(serial[0].strategy, "baseline");
    EXPECT_EQ(serial[2].strategy, "sda(K=5)");
    for (const auto& r : serial) {
        ASSERT_EQ(r.accuracies.size(), 3u);
        EXPECT_EQ(r.accuracies[0], r.accuracies[1]);
        EXPECT_EQ(r.init_seed, 1u);
        const auto again = summarize(r.accuracies);
        EXPECT_NEAR(again.mean, r.stats.mean, 1e-9);
        EXPECT_NEAR(again.stddev, r.stats.stddev, 1e-9);
        EXPECT_NEAR(again.q1, r.stats.q1, 1e-9);
        EXPECT_NEAR(again.q3, r.stats.q3, 1e-9);
    }
    // Only data order differs between seeds, so the run reproduces the matching single run.
    ExperimentConfig one = cfg;
    one.train.init_seed = 1;
    one.train.data_seed = 9;
    EXPECT_EQ(run_prepared(one, data).student.accuracy, serial[0].accuracies[2]);

    const auto dir = scratch("stab");
    emit_stability(serial, dir.string());
    EXPECT_EQ(read_stability((dir / "stability.json").string()), serial);
    EXPECT_THROW(stability_study(cfg, {1}, 1, data), ConfigError);
}
