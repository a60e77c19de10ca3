// Command-line front end: train, sweep, ensemble, stability and report.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime or divergence error.
// Every flag can also be set through an SDFT_* environment variable; an
// explicit flag wins.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sdft/sdft.hpp"

namespace {

using namespace sdft;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitRuntime = 2;

struct Flags {
    std::string config_file;
    std::string mode = "baseline";
    double lambda = 1.0;
    std::string teacher_size = "1";
    std::size_t snapshot_every = 1;
    std::uint64_t seed = 1;
    std::uint64_t data_seed = 1;
    std::string dataset = "synthetic";
    std::string format;  // csv | split; inferred from the extension when empty
    std::string test_data;
    std::string dev_data;
    std::size_t label_col = 0;
    std::vector<std::size_t> text_cols{1};
    bool pair = false;
    std::string delimiter;
    bool header = false;
    std::size_t n_classes = 0;  // 0: taken from the synthetic spec or required for files
    int label_base = -1;        // -1: detect
    std::size_t min_freq = 1;
    std::size_t subsample = 0;
    std::uint64_t subsample_seed = 1;
    std::uint64_t synthetic_seed = 7;

    ModelConfig model;
    TrainConfig train;
    std::string selection = "final";
    std::string precision = "float64";
    std::size_t jobs = 1;
    bool record_timing = false;
    std::string out = "sdft-out";
};

std::string env_name(const std::string& flag) {
    std::string s = "SDFT_";
    for (char c : flag) s.push_back(c == '-' ? '_' : static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    return s;
}

template <typename T>
CLI::Option* opt(CLI::App* app, const std::string& name, T& target, const std::string& help) {
    return app->add_option("--" + name, target, help)->envname(env_name(name))->capture_default_str();
}

void add_common_flags(CLI::App* app, Flags& f) {
    opt(app, "config", f.config_file, "JSON experiment config; flags given explicitly override it");
    opt(app, "mode", f.mode, "baseline, sda or sdv")->check(CLI::IsMember({"baseline", "sda", "sdv"}));
    opt(app, "lambda", f.lambda, "distillation weight");
    opt(app, "teacher-size", f.teacher_size, "teacher size K (integer) or 'all' (sda only)");
    opt(app, "snapshot-every", f.snapshot_every, "optimizer steps between teacher absorptions");
    opt(app, "seed", f.seed, "initialization seed");
    opt(app, "data-seed", f.data_seed, "data-order seed");
    opt(app, "dataset", f.dataset, "'synthetic', a synthetic spec .json, or a training data file");
    opt(app, "format", f.format, "data file format: csv (also .tsv) or split (label<TAB>text)");
    opt(app, "test-data", f.test_data, "test data file (required with a data file)");
    opt(app, "dev-data", f.dev_data, "optional dev data file");
    opt(app, "label-col", f.label_col, "CSV label column index");
    app->add_option("--text-cols", f.text_cols, "CSV text column indices")->delimiter(',')->envname("SDFT_TEXT_COLS");
    app->add_flag("--pair", f.pair, "first two text columns are a sentence pair")->envname("SDFT_PAIR");
    opt(app, "delimiter", f.delimiter, "CSV delimiter (default ',' or tab for .tsv)");
    app->add_flag("--header", f.header, "CSV files start with a header row")->envname("SDFT_HEADER");
    opt(app, "n-classes", f.n_classes, "class count for data files");
    opt(app, "label-base", f.label_base, "smallest label value in CSV files (-1 detects)");
    opt(app, "min-freq", f.min_freq, "minimum token count for the vocabulary");
    opt(app, "subsample-per-class", f.subsample, "stratified training subsample size per class (0 keeps all)");
    opt(app, "subsample-seed", f.subsample_seed, "seed of the stratified subsample");
    opt(app, "synthetic-seed", f.synthetic_seed, "seed of the synthetic generator");

    opt(app, "vocab-size", f.model.vocab_size, "vocabulary cap");
    opt(app, "max-len", f.model.max_len, "tokens per example including specials");
    opt(app, "dim", f.model.dim, "hidden width");
    opt(app, "layers", f.model.n_layers, "encoder layers");
    opt(app, "heads", f.model.n_heads, "attention heads");
    opt(app, "ffn-dim", f.model.ffn_dim, "feed-forward width");
    opt(app, "dropout", f.model.dropout_p, "dropout probability");

    opt(app, "epochs", f.train.epochs, "training epochs");
    opt(app, "micro-batch", f.train.micro_batch, "examples per micro-batch");
    opt(app, "accum-steps", f.train.accum_steps, "micro-batches per optimizer step");
    opt(app, "eval-batch", f.train.eval_batch, "evaluation batch size");
    opt(app, "lr-encoder", f.train.optim.lr_encoder, "base learning rate of the encoder group");
    opt(app, "lr-head", f.train.optim.lr_head, "base learning rate of the classifier head");
    opt(app, "weight-decay", f.train.optim.weight_decay, "decoupled weight decay");
    opt(app, "warmup-prop", f.train.optim.warmup_prop, "warmup proportion of the schedule");
    opt(app, "selection", f.selection, "final or best_dev")->check(CLI::IsMember({"final", "best_dev"}));

    opt(app, "precision", f.precision, "float64 or float32");
    opt(app, "jobs", f.jobs, "parallel runs");
    app->add_flag("--record-timing", f.record_timing, "keep wall-clock seconds in reports")->envname("SDFT_RECORD_TIMING");
    opt(app, "out", f.out, "output directory");
}

bool given(const CLI::App* app, const std::string& name) {
    const CLI::Option* o = app->get_option_no_throw("--" + name);
    return o != nullptr && o->count() > 0;
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

/// Builds the experiment config: defaults, then --config, then explicit flags.
ExperimentConfig build_config(const CLI::App* app, const Flags& f) {
    ExperimentConfig cfg;
    cfg.model = f.model;
    cfg.train = f.train;
    if (!f.config_file.empty()) {
        try {
            cfg = detail::read_json(f.config_file).get<ExperimentConfig>();
        } catch (const json::exception& e) {
            throw ConfigError("bad config file " + f.config_file + ": " + e.what());
        }
    }
    auto set = [&](const char* name, auto& field, const auto& value) {
        if (f.config_file.empty() || given(app, name)) field = value;
    };
    set("mode", cfg.distill.mode, parse_mode(f.mode));
    set("lambda", cfg.distill.lambda, f.lambda);
    set("teacher-size", cfg.distill.teacher_size, parse_teacher_size(f.teacher_size));
    set("snapshot-every", cfg.distill.snapshot_every, f.snapshot_every);
    set("seed", cfg.train.init_seed, f.seed);
    set("data-seed", cfg.train.data_seed, f.data_seed);
    set("vocab-size", cfg.model.vocab_size, f.model.vocab_size);
    set("max-len", cfg.model.max_len, f.model.max_len);
    set("dim", cfg.model.dim, f.model.dim);
    set("layers", cfg.model.n_layers, f.model.n_layers);
    set("heads", cfg.model.n_heads, f.model.n_heads);
    set("ffn-dim", cfg.model.ffn_dim, f.model.ffn_dim);
    set("dropout", cfg.model.dropout_p, f.model.dropout_p);
    set("epochs", cfg.train.epochs, f.train.epochs);
    set("micro-batch", cfg.train.micro_batch, f.train.micro_batch);
    set("accum-steps", cfg.train.accum_steps, f.train.accum_steps);
    set("eval-batch", cfg.train.eval_batch, f.train.eval_batch);
    set("lr-encoder", cfg.train.optim.lr_encoder, f.train.optim.lr_encoder);
    set("lr-head", cfg.train.optim.lr_head, f.train.optim.lr_head);
    set("weight-decay", cfg.train.optim.weight_decay, f.train.optim.weight_decay);
    set("warmup-prop", cfg.train.optim.warmup_prop, f.train.optim.warmup_prop);
    set("selection", cfg.train.selection, f.selection == "best_dev" ? Selection::best_dev : Selection::final_epoch);
    set("precision", cfg.precision, parse_precision(f.precision));
    cfg.record_timing = f.record_timing;

    if (f.config_file.empty() || given(app, "dataset")) {
        DataSource& d = cfg.data;
        d = DataSource{};
        if (f.dataset == "synthetic") {
            d.kind = DataKind::synthetic;
        } else if (ends_with(f.dataset, ".json")) {
            d.kind = DataKind::synthetic;
            try {
                d.synthetic = detail::read_json(f.dataset).get<SyntheticSpec>();
            } catch (const json::exception& e) {
                throw ConfigError("bad synthetic spec " + f.dataset + ": " + e.what());
            }
        } else {
            std::string fmt = f.format;
            if (fmt.empty()) fmt = (ends_with(f.dataset, ".csv") || ends_with(f.dataset, ".tsv")) ? "csv" : "split";
            d.kind = parse_data_kind(fmt);
            if (d.kind == DataKind::synthetic) throw ConfigError("--format must be csv or split for a data file");
            if (f.test_data.empty()) throw ConfigError("--test-data is required with a data file");
            if (f.n_classes == 0) throw ConfigError("--n-classes is required with a data file");
            d.train_path = f.dataset;
            d.test_path = f.test_data;
            d.dev_path = f.dev_data;
            d.schema.label_col = f.label_col;
            d.schema.text_cols = f.text_cols;
            d.schema.pair = f.pair;
            std::string delim = f.delimiter.empty() ? (ends_with(f.dataset, ".tsv") ? "\t" : ",") : f.delimiter;
            if (delim == "\\t" || delim == "tab") delim = "\t";
            if (delim.size() != 1) throw ConfigError("--delimiter must be a single character");
            d.schema.delimiter = delim[0];
            d.schema.has_header = f.header;
            d.schema.n_classes = f.n_classes;
            if (f.label_base >= 0) d.schema.label_base = f.label_base;
        }
        d.synthetic_seed = f.synthetic_seed;
        d.min_freq = f.min_freq;
        if (f.subsample > 0) {
            d.subsample_per_class = f.subsample;
            d.subsample_seed = f.subsample_seed;
        }
        if (f.n_classes > 0 && d.kind == DataKind::synthetic) d.synthetic.n_classes = f.n_classes;
    }
    cfg.model.n_classes = cfg.data.kind == DataKind::synthetic ? cfg.data.synthetic.n_classes : cfg.data.schema.n_classes;
    cfg.model.validate();
    cfg.distill.validate();
    cfg.train.validate();
    if (cfg.data.kind == DataKind::synthetic) cfg.data.synthetic.validate();
    return cfg;
}

template <typename T>
std::vector<T> parse_list(const std::string& csv, const char* what) {
    std::vector<T> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        std::istringstream is(item);
        T v{};
        if (!(is >> v) || !is.eof()) throw ConfigError(std::string("bad ") + what + " entry '" + item + "'");
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError(std::string(what) + " list is empty");
    return out;
}

std::vector<std::string> split_list(const std::string& csv) {
    std::vector<std::string> out;
    std::stringstream ss(csv);
    std::string item;
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

std::string pct(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
    return buf;
}

void print_run(const RunReport& r, const std::string& name) {
    std::cout << name << ": status=" << r.status;
    if (!r.ok()) {
        std::cout << " (" << r.diagnostic << ")\n";
        return;
    }
    std::cout << " student_error=" << pct(r.student.error) << "% accuracy=" << pct(r.student.accuracy) << "%";
    if (r.teacher) std::cout << " teacher_error=" << pct(r.teacher->error) << "%";
    if (r.self_ensemble) std::cout << " self_ensemble_error=" << pct(r.self_ensemble->error) << "%";
    std::cout << "\n";
    for (const auto& p : r.curve) {
        std::cout << "  epoch " << p.epoch << ": test_error=" << pct(p.test_error) << "% ce=" << p.ce_loss
                  << " mse=" << p.mse_loss << "\n";
    }
}

void print_sweep(const SweepTable& t) {
    std::cout << to_string(t.axis) << "\tmean_error(%)\tmean_accuracy(%)\tfailures\n";
    for (const auto& c : t.cells) {
        std::cout << c.value << "\t" << (c.mean_error ? pct(*c.mean_error) : "failed") << "\t"
                  << (c.mean_accuracy ? pct(*c.mean_accuracy) : "failed") << "\t" << c.failures.size() << "\n";
        for (const auto& f : c.failures) std::cout << "  " << f << "\n";
    }
}

void print_stability(const std::vector<StabilityResult>& rs) {
    std::cout << "strategy\tn\tmean(%)\tstd(%)\tmin(%)\tq1(%)\tmedian(%)\tq3(%)\tmax(%)\n";
    for (const auto& r : rs) {
        const auto& s = r.stats;
        std::cout << r.strategy << "\t" << s.n << "\t" << pct(s.mean) << "\t" << pct(s.stddev) << "\t" << pct(s.min)
                  << "\t" << pct(s.q1) << "\t" << pct(s.median) << "\t" << pct(s.q3) << "\t" << pct(s.max) << "\n";
        for (const auto& f : r.failures) std::cout << "  " << f << "\n";
    }
    if (!rs.empty() && rs.front().distill.mode == Mode::baseline && rs.front().stats.n > 0) {
        for (std::size_t i = 1; i < rs.size(); ++i) {
            if (rs[i].stats.n == 0 || rs.front().stats.mean >= 1.0) continue;
            const double d = average_relative_change({1.0 - rs.front().stats.mean}, {1.0 - rs[i].stats.mean});
            std::cout << "relative error reduction of " << rs[i].strategy << " vs baseline: " << pct(d) << "%\n";
        }
    }
}

void print_ensemble(const EnsembleReport& r) {
    for (std::size_t i = 0; i < r.members.size(); ++i) {
        std::cout << "member seed " << r.seeds[i] << ": error=" << pct(r.members[i].student.error) << "%\n";
    }
    std::cout << "voted error=" << pct(r.voted.error) << "%\naveraged error=" << pct(r.averaged.error)
              << "%\nmean member error=" << pct(r.mean_member_error) << "%\nmax member error=" << pct(r.max_member_error)
              << "%\n";
    if (r.mean_member_error > 0) {
        std::cout << "relative error reduction (voted vs mean member): "
                  << pct(average_relative_change({r.mean_member_error}, {r.voted.error})) << "%\n";
    }
}

/// Renders any stored report file or run directory.
void render_path(const std::string& path) {
    namespace fs = std::filesystem;
    fs::path p(path);
    if (fs::is_directory(p)) {
        for (const char* name : {"report.json", "sweep.json", "stability.json", "ensemble.json"}) {
            if (fs::exists(p / name)) {
                render_path((p / name).string());
                return;
            }
        }
        throw IoError("no report file in " + path);
    }
    const json j = detail::read_json(p);
    try {
        if (j.is_array()) {
            print_stability(j.get<std::vector<StabilityResult>>());
        } else if (j.contains("cells")) {
            print_sweep(j.get<SweepTable>());
        } else if (j.contains("voted")) {
            print_ensemble(j.get<EnsembleReport>());
        } else {
            print_run(j.get<RunReport>(), path);
        }
    } catch (const json::exception& e) {
        throw IoError("unrecognized report " + path + ": " + e.what());
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Fine-tuning with self-ensemble and self-distillation on a small transformer encoder"};
    app.require_subcommand(1);

    Flags train_f, sweep_f, ens_f, stab_f;
    CLI::App* train = app.add_subcommand("train", "one fine-tuning run");
    add_common_flags(train, train_f);

    CLI::App* sweep_cmd = app.add_subcommand("sweep", "lambda or teacher-size grid over seeds");
    add_common_flags(sweep_cmd, sweep_f);
    std::string axis = "lambda", grid, seeds_csv = "1";
    sweep_cmd->add_option("--axis", axis, "lambda or k")->envname("SDFT_AXIS")->check(CLI::IsMember({"lambda", "k"}));
    sweep_cmd->add_option("--grid", grid, "comma-separated grid values (default depends on the axis)")->envname("SDFT_GRID");
    sweep_cmd->add_option("--seeds", seeds_csv, "comma-separated run seeds")->envname("SDFT_SEEDS")->capture_default_str();

    CLI::App* ens = app.add_subcommand("ensemble", "independently seeded models, voted and averaged");
    add_common_flags(ens, ens_f);
    std::size_t n_models = 0;
    std::string ens_seeds;
    ens->add_option("--n-models", n_models, "number of models (seeds 1..n when --seeds is absent)")->envname("SDFT_N_MODELS");
    ens->add_option("--seeds", ens_seeds, "comma-separated run seeds")->envname("SDFT_SEEDS");

    CLI::App* stab = app.add_subcommand("stability", "fixed initialization, varying data order");
    add_common_flags(stab, stab_f);
    std::string data_seeds = "1,2,3,4,5,6,7,8,9,10";
    std::uint64_t init_seed = 1;
    stab->add_option("--data-seeds", data_seeds, "comma-separated data-order seeds")->envname("SDFT_DATA_SEEDS")->capture_default_str();
    stab->add_option("--init-seed", init_seed, "shared initialization seed")->envname("SDFT_INIT_SEED")->capture_default_str();

    CLI::App* rep = app.add_subcommand("report", "re-render stored reports");
    std::vector<std::string> paths;
    std::vector<std::string> pairs;
    rep->add_option("paths", paths, "report files or run directories");
    rep->add_option("--pairs", pairs,
                    "baseline,method run-report pairs (one per dataset); prints the average relative error change")
        ->expected(2, 1 << 20);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (train->parsed()) {
            const ExperimentConfig cfg = build_config(train, train_f);
            const RunReport r = run_experiment(cfg);
            emit_report(r, train_f.out);
            print_run(r, train_f.out);
            return r.ok() ? kExitOk : kExitRuntime;
        }
        if (sweep_cmd->parsed()) {
            const ExperimentConfig cfg = build_config(sweep_cmd, sweep_f);
            const SweepAxis ax = parse_sweep_axis(axis);
            const auto values = grid.empty() ? (ax == SweepAxis::lambda ? default_lambda_grid() : default_k_grid()) : split_list(grid);
            const PreparedData data = prepare_data(cfg.data, cfg.model);
            const SweepTable t = sweep(cfg, ax, values, parse_list<std::uint64_t>(seeds_csv, "seed"), data, sweep_f.jobs);
            emit_sweep(t, sweep_f.out);
            print_sweep(t);
            return kExitOk;
        }
        if (ens->parsed()) {
            const ExperimentConfig cfg = build_config(ens, ens_f);
            std::vector<std::uint64_t> seeds;
            if (!ens_seeds.empty()) {
                seeds = parse_list<std::uint64_t>(ens_seeds, "seed");
                if (n_models != 0 && n_models != seeds.size()) throw ConfigError("--n-models disagrees with the --seeds count");
            } else {
                if (n_models == 0) n_models = 4;
                for (std::uint64_t s = 1; s <= n_models; ++s) seeds.push_back(s);
            }
            const PreparedData data = prepare_data(cfg.data, cfg.model);
            const EnsembleReport r = ensemble_experiment(cfg, seeds, data, ens_f.jobs);
            emit_ensemble(r, ens_f.out);
            print_ensemble(r);
            return kExitOk;
        }
        if (stab->parsed()) {
            const ExperimentConfig cfg = build_config(stab, stab_f);
            const PreparedData data = prepare_data(cfg.data, cfg.model);
            const auto rs = stability_study(cfg, parse_list<std::uint64_t>(data_seeds, "data seed"), init_seed, data, stab_f.jobs);
            emit_stability(rs, stab_f.out);
            print_stability(rs);
            return kExitOk;
        }
        if (rep->parsed()) {
            if (paths.empty() && pairs.empty()) throw ConfigError("report needs at least one path");
            for (const auto& p : paths) render_path(p);
            if (!pairs.empty()) {
                if (pairs.size() % 2 != 0) throw ConfigError("--pairs needs an even number of paths");
                std::vector<double> base, method;
                for (std::size_t i = 0; i < pairs.size(); i += 2) {
                    base.push_back(read_report(pairs[i]).student.error);
                    method.push_back(read_report(pairs[i + 1]).student.error);
                }
                std::cout << "average relative error change: " << pct(average_relative_change(base, method)) << "%\n";
            }
            return kExitOk;
        }
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}
