// lwdna: widen a CNN, score latent channels with one mini-batch, shrink to a
// FLOP budget, and train/compare the result against the baseline.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "CLI11.hpp"

#include "lwdna/complexity.hpp"
#include "lwdna/train.hpp"

namespace fs = std::filesystem;
using namespace lwdna;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitError = 1;
constexpr int kExitInfeasible = 2;

int env_threads() {
    const char* v = std::getenv("LWDNA_THREADS");
    if (!v) return 1;
    const int t = std::atoi(v);
    if (t < 1) throw std::runtime_error("LWDNA_THREADS must be a positive integer, got '" + std::string(v) + "'");
    return t;
}

struct DataOptions {
    std::string train_images, train_labels, test_images, test_labels;
    int num_classes = 10;
    int synth_classes = 10;
    int synth_train = 512, synth_test = 256;
    int synth_hw = 16, synth_channels = 3;
    double synth_sep = 5.0;

    void attach(CLI::App* cmd) {
        cmd->add_option("--train-images", train_images, "IDX image file for the training split");
        cmd->add_option("--train-labels", train_labels, "IDX label file for the training split");
        cmd->add_option("--test-images", test_images, "IDX image file for the test split");
        cmd->add_option("--test-labels", test_labels, "IDX label file for the test split");
        cmd->add_option("--classes", num_classes, "class count for IDX data")->capture_default_str();
        cmd->add_option("--synth-classes", synth_classes)->capture_default_str();
        cmd->add_option("--synth-train", synth_train, "synthetic training samples")->capture_default_str();
        cmd->add_option("--synth-test", synth_test, "synthetic test samples")->capture_default_str();
        cmd->add_option("--synth-hw", synth_hw, "synthetic image side")->capture_default_str();
        cmd->add_option("--synth-channels", synth_channels)->capture_default_str();
        cmd->add_option("--synth-sep", synth_sep, "between/within sigma ratio")->capture_default_str();
    }

    bool uses_idx() const { return !train_images.empty(); }

    std::pair<Dataset, Dataset> load(uint64_t seed) const {
        if (uses_idx()) {
            Dataset train = load_idx_dataset(train_images, train_labels, num_classes, "train");
            Dataset test = load_idx_dataset(test_images, test_labels, num_classes, "test");
            std::vector<double> mean, sd;
            compute_channel_stats(train, mean, sd);
            normalize(train, mean, sd);
            normalize(test, mean, sd);
            return {std::move(train), std::move(test)};
        }
        SynthSpec spec;
        spec.num_classes = synth_classes;
        spec.n_train = synth_train;
        spec.n_test = synth_test;
        spec.hw = synth_hw;
        spec.channels = synth_channels;
        spec.sigma_between = synth_sep;
        spec.sigma_within = 1.0;
        return synth_dataset(spec, seed);
    }
};

struct ArchOptions {
    std::string name = "vgg-tiny";
    std::string arch_json;
    int input_hw = 0;      // 0 = dataset (or arch default)
    int classes = 0;       // 0 = dataset default

    void attach(CLI::App* cmd) {
        cmd->add_option("--arch", name, "vgg-tiny | resnet-tiny | mobile-tiny | resnet56 | densenet40")
            ->capture_default_str();
        cmd->add_option("--arch-json", arch_json, "load the architecture from a JSON file instead");
        cmd->add_option("--input", input_hw, "input resolution (side)");
        cmd->add_option("--num-classes", classes, "classifier width");
    }

    ArchSpec resolve(int dataset_hw, int dataset_classes, int dataset_channels) const {
        const int hw = input_hw > 0 ? input_hw : dataset_hw;
        const int nc = classes > 0 ? classes : dataset_classes;
        if (!arch_json.empty()) {
            std::ifstream f(arch_json);
            if (!f) throw std::runtime_error("cannot open " + arch_json);
            std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
            return arch_from_json(text);
        }
        return build(name, nc, hw, dataset_channels);
    }
};

ChannelConfig parse_config(const std::string& csv) {
    ChannelConfig cfg;
    std::string cur;
    for (char c : csv + ",") {
        if (c == ',') {
            if (!cur.empty()) cfg.push_back(std::stoi(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    return cfg;
}

void write_file(const fs::path& path, const std::string& content, bool force) {
    if (fs::exists(path) && !force)
        throw std::runtime_error(path.string() + " already exists (use --force to overwrite)");
    fs::create_directories(path.parent_path().empty() ? "." : path.parent_path());
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << content;
}

int64_t resolve_budget(double budget, int64_t baseline_flops) {
    if (budget <= 0.0) throw std::runtime_error("--budget must be positive");
    if (budget <= 1.0) return static_cast<int64_t>(budget * static_cast<double>(baseline_flops));
    return static_cast<int64_t>(budget);
}

TrainProtocol protocol_from(int epochs, int batch, double lr, double momentum, double wd,
                            const std::string& sched, bool no_aug, uint64_t seed, double kd_lambda,
                            double kd_temperature, const std::string& kd_teacher) {
    TrainProtocol p;
    p.epochs = epochs;
    p.batch_size = batch;
    p.base_lr = lr;
    p.momentum = momentum;
    p.weight_decay = wd;
    p.schedule = sched == "cosine" ? LrSchedule::Kind::Cosine : LrSchedule::Kind::Step;
    p.horizontal_flip = !no_aug;
    p.pad_crop = !no_aug;
    p.seed = seed;
    if (!kd_teacher.empty()) {
        KdSettings kd;
        kd.lambda = kd_lambda;
        kd.temperature = kd_temperature;
        kd.teacher_checkpoint = kd_teacher;
        p.kd = kd;
    }
    return p;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"layer-wise channel configuration search and training"};
    app.require_subcommand(1);

    // shared option storage
    ArchOptions arch_opt;
    DataOptions data_opt;
    uint64_t seed = 7;
    std::string outdir = "out";
    bool force = false;
    double beta = 2.0, rho = 0.4, tau = 0.45, budget = 0.95;
    int m = 8;
    std::string criterion = "gradient";
    int epochs = 30, batch = 64;
    double lr = 0.1, momentum = 0.9, wd = 1e-4;
    std::string sched = "step";
    bool no_aug = false;
    double kd_lambda = 0.4, kd_temperature = 4.0;
    std::string kd_teacher;
    std::string config_csv, baseline_csv, ckpt_path;

    auto add_common = [&](CLI::App* cmd, bool with_data) {
        arch_opt.attach(cmd);
        if (with_data) data_opt.attach(cmd);
        cmd->add_option("--seed", seed, "controls every random choice")->capture_default_str();
        cmd->add_option("-o,--out", outdir, "output directory")->capture_default_str();
        cmd->add_flag("--force", force, "overwrite existing outputs");
    };
    auto add_shrink_knobs = [&](CLI::App* cmd) {
        cmd->add_option("--beta", beta, "width multiplier (>= 1)")->capture_default_str();
        cmd->add_option("--m", m, "embedding width of the generators")->capture_default_str();
        cmd->add_option("--rho", rho, "minimum surviving fraction per conv layer")->capture_default_str();
        cmd->add_option("--tau", tau, "minimum surviving fraction of classifier inputs")->capture_default_str();
        cmd->add_option("--budget", budget, "FLOP target: fraction of baseline if <= 1, else absolute")
            ->capture_default_str();
        cmd->add_option("--criterion", criterion, "gradient | magnitude")->capture_default_str();
    };
    auto add_protocol = [&](CLI::App* cmd) {
        cmd->add_option("--epochs", epochs)->capture_default_str();
        cmd->add_option("--batch", batch)->capture_default_str();
        cmd->add_option("--lr", lr)->capture_default_str();
        cmd->add_option("--momentum", momentum)->capture_default_str();
        cmd->add_option("--wd", wd)->capture_default_str();
        cmd->add_option("--schedule", sched, "step | cosine")->capture_default_str();
        cmd->add_flag("--no-aug", no_aug, "disable flip and pad-crop augmentation");
        cmd->add_option("--kd-teacher", kd_teacher, "teacher checkpoint enables distillation");
        cmd->add_option("--kd-lambda", kd_lambda)->capture_default_str();
        cmd->add_option("--kd-temperature", kd_temperature)->capture_default_str();
    };

    CLI::App* c_analyze = app.add_subcommand("analyze", "FLOPs/params of an architecture + config");
    add_common(c_analyze, false);
    c_analyze->add_option("--config", config_csv, "channel config as comma list (default: arch default)");
    c_analyze->add_option("--baseline-config", baseline_csv, "ratio reference config");
    bool analyze_write = false;
    c_analyze->add_flag("--write", analyze_write, "also write cost_report.json and cost_rows.csv");

    CLI::App* c_shrink = app.add_subcommand("shrink", "single-batch shrinkage to a FLOP budget");
    add_common(c_shrink, true);
    add_shrink_knobs(c_shrink);
    c_shrink->add_option("--batch", batch, "scoring batch size")->capture_default_str();

    CLI::App* c_train = app.add_subcommand("train", "train an architecture + config from scratch");
    add_common(c_train, true);
    add_protocol(c_train);
    c_train->add_option("--config", config_csv, "channel config (default: arch default)");

    CLI::App* c_eval = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(c_eval, true);
    c_eval->add_option("--ckpt", ckpt_path, "model checkpoint")->required();

    CLI::App* c_compare = app.add_subcommand("compare", "baseline vs shrunk model, identical protocol");
    add_common(c_compare, true);
    add_shrink_knobs(c_compare);
    add_protocol(c_compare);

    CLI11_PARSE(app, argc, argv);

    try {
        const int threads = env_threads();
        const fs::path out(outdir);

        if (app.got_subcommand(c_analyze)) {
            const ArchSpec arch = arch_opt.resolve(0, 10, 3);
            const int hw = arch_opt.input_hw > 0 ? arch_opt.input_hw : arch.input_hw;
            const ChannelConfig cfg = config_csv.empty() ? arch.default_config : parse_config(config_csv);
            const ChannelConfig base = baseline_csv.empty() ? arch.default_config : parse_config(baseline_csv);
            const CostReport rep = model_cost(arch, cfg, hw);
            const RatioReport ratio = ratio_report(base, cfg, arch, hw);
            std::printf("arch: %s  input: %dx%d\n", arch.name.c_str(), hw, hw);
            std::printf("FLOPs [G] / Ratio (%%): %.4f / %.2f\n", rep.gflops(), ratio.flops_ratio);
            std::printf("Params [M] / Ratio (%%): %.4f / %.2f\n", rep.mparams(), ratio.params_ratio);
            if (analyze_write) {
                write_file(out / "cost_report.json", cost_report_json(arch, cfg, hw, rep, ratio), force);
                write_file(out / "cost_rows.csv", cost_rows_csv(rep), force);
            }
            return kExitOk;
        }

        if (app.got_subcommand(c_shrink)) {
            auto [train_set, test_set] = data_opt.load(seed);
            const ArchSpec arch = arch_opt.resolve(train_set.hw(), train_set.num_classes, train_set.channels());
            const int hw = train_set.hw();
            const int64_t baseline_flops = model_cost(arch, arch.default_config, hw).total_flops;
            const Budget bud{resolve_budget(budget, baseline_flops)};
            const Floors floors{rho, tau};

            Rng batch_rng(Rng::derive(seed, 0x7363627463ULL));
            BatchSource source = [&]() {
                std::vector<int> pool(static_cast<size_t>(train_set.size()));
                for (size_t i = 0; i < pool.size(); ++i) pool[i] = static_cast<int>(i);
                for (int i = train_set.size() - 1; i > 0; --i)
                    std::swap(pool[static_cast<size_t>(i)], pool[static_cast<size_t>(batch_rng.uniform_int(0, i))]);
                pool.resize(static_cast<size_t>(std::min(batch, train_set.size())));
                return take_batch(train_set, pool);
            };
            const ShrinkReport rep = shrink_pipeline(arch, beta, m, floors, bud, criterion_from(criterion),
                                                     seed, source, hw);
            write_file(out / "shrink_report.json", shrink_report_json(rep), force);
            write_file(out / "channels.csv", channels_csv(rep), force);
            std::printf("shrunk %s: %.4f -> %.4f GFLOPs (budget %.4f), threshold %.6g\n", arch.name.c_str(),
                        static_cast<double>(rep.baseline_flops) / 1e9,
                        static_cast<double>(rep.shrunk_flops) / 1e9,
                        static_cast<double>(rep.budget_flops) / 1e9, rep.threshold);
            return kExitOk;
        }

        if (app.got_subcommand(c_train)) {
            auto [train_set, test_set] = data_opt.load(seed);
            const ArchSpec arch = arch_opt.resolve(train_set.hw(), train_set.num_classes, train_set.channels());
            const ChannelConfig cfg = config_csv.empty() ? arch.default_config : parse_config(config_csv);
            TrainProtocol proto = protocol_from(epochs, batch, lr, momentum, wd, sched, no_aug, seed,
                                                kd_lambda, kd_temperature, kd_teacher);
            Model model(arch, cfg, Rng::derive(seed, 0x747261696eULL));
            std::optional<Model> teacher;
            if (proto.kd) teacher.emplace(Model::load(proto.kd->teacher_checkpoint));
            const TrainLog log = train(model, train_set, test_set, proto,
                                       teacher ? &*teacher : nullptr, threads);
            write_file(out / "train_log.csv", train_log_csv(log), force);
            model.save((out / "model.ckpt").string());
            std::printf("final test error: %.4f%%  (loss %.6f)\n", log.final_test_err, log.final_test_loss);
            return kExitOk;
        }

        if (app.got_subcommand(c_eval)) {
            auto [train_set, test_set] = data_opt.load(seed);
            Model model = Model::load(ckpt_path);
            const EvalResult r = evaluate(model, test_set, 256, threads);
            std::printf("top1_err: %.4f%%  loss: %.6f\n", r.top1_err, r.loss);
            return kExitOk;
        }

        if (app.got_subcommand(c_compare)) {
            auto [train_set, test_set] = data_opt.load(seed);
            const ArchSpec arch = arch_opt.resolve(train_set.hw(), train_set.num_classes, train_set.channels());
            const int hw = train_set.hw();
            TrainProtocol proto = protocol_from(epochs, batch, lr, momentum, wd, sched, no_aug, seed,
                                                kd_lambda, kd_temperature, kd_teacher);
            const int64_t baseline_flops = model_cost(arch, arch.default_config, hw).total_flops;
            const Budget bud{resolve_budget(budget, baseline_flops)};
            std::optional<Model> teacher;
            if (proto.kd) teacher.emplace(Model::load(proto.kd->teacher_checkpoint));
            const CompareOutcome oc = compare_run(arch, proto, beta, m, Floors{rho, tau}, bud,
                                                  criterion_from(criterion), train_set, test_set, seed,
                                                  teacher ? &*teacher : nullptr, threads);
            write_file(out / "shrink_report.json", shrink_report_json(oc.shrink), force);
            write_file(out / "channels.csv", channels_csv(oc.shrink), force);
            write_file(out / "baseline_log.csv", train_log_csv(oc.baseline_log), force);
            write_file(out / "lwdna_log.csv", train_log_csv(oc.shrunk_log), force);
            write_file(out / "summary.json", summary_json(oc.summary), force);
            std::printf("baseline: %.4f%%  lwdna: %.4f%%  flops ratio: %.2f%%  params ratio: %.2f%%\n",
                        oc.summary.baseline_top1_err, oc.summary.shrunk_top1_err, oc.summary.flops_ratio,
                        oc.summary.params_ratio);
            return kExitOk;
        }
        return kExitError;
    } catch (const InfeasibleBudget& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitInfeasible;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitError;
    }
}
